pub mod tensor;
pub mod market_data;
pub mod indicators;
pub mod portfolio_env;
pub mod migt_policy;
pub mod ppo_trainer;
pub mod backtest_eval;
pub mod cli;
