"""Smoke test for the `migt` extension module.

Build first: `cd crates/py && maturin develop --release`.
"""

import math
import random
import tempfile
from pathlib import Path

import migt

TINY_CONFIG = """
seed = 3

[data.synthetic]
n_assets = 2
n_days = 200
drift = [0.001, 0.0]
volatility = [0.005]

[env]
window = 10

[attention]
d_model = 16
heads = 2
ff_dim = 16
memory_len = 16

[ppo]
total_steps = 500
rollout_steps = 250
"""


def random_action(n, rng):
    w = [rng.random() for _ in range(n + 1)]
    s = sum(w)
    return [x / s for x in w]


def check_accounting():
    prices = migt.synth_prices(4, 120, 0.0005, 0.01, seed=9)
    assert len(prices) == 120 and all(len(row) == 4 for row in prices)
    rng = random.Random(0)
    actions = [random_action(4, rng) for _ in range(len(prices) - 1)]
    values, rewards = migt.simulate(prices, actions, cost_rate=0.001, initial_cash=1e6)
    assert len(values) == len(prices)
    gap = abs((values[-1] - 1e6) - 1e6 * sum(rewards)) / values[-1]
    assert gap < 1e-9, gap
    try:
        migt.simulate(prices, actions[:-1])
    except ValueError as e:
        assert "actions" in str(e)
    else:
        raise AssertionError("short action list accepted")


def check_metrics():
    flat = migt.metrics([1e6] * 30)
    assert flat["cum_return"] == 0.0
    assert flat["sharpe"] is None
    growing = migt.metrics([100 * 1.001**t for t in range(253)])
    assert math.isclose(growing["cum_return"], 1.001**252 - 1, rel_tol=1e-12)
    assert growing["omega"] is None


def check_cli():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        (tmp / "run.toml").write_text(TINY_CONFIG)
        base = ["--config", str(tmp / "run.toml"), "--out", str(tmp / "out")]
        assert migt.run_cli(base + ["train"]) == 0
        assert migt.run_cli(base + ["backtest", "--baseline", "all_cash"]) == 0
        log = (tmp / "out" / "training_log.csv").read_text().splitlines()
        assert log[0] == "update,steps,mean_reward,loss,clip_fraction,approx_kl"
        assert len(log) == 3
        metrics = (tmp / "out" / "metrics.csv").read_text().splitlines()
        assert metrics[1].startswith("all_cash,test,0,")
        bad = TINY_CONFIG.replace("[ppo]", "[ppo]\nclip_eps = 1.5")
        (tmp / "bad.toml").write_text(bad)
        assert migt.run_cli(["--config", str(tmp / "bad.toml"), "train"]) == 1


if __name__ == "__main__":
    check_accounting()
    check_metrics()
    check_cli()
    print("smoke test passed")
