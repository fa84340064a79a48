//! The MIGT policy network: a per-day embedding, a Gated Instance Attention
//! block over the memory trajectory plus the current window, and separate
//! action and value heads.
//!
//! Vectors are rows: every layer computes `y = xW + b`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Graph, Tensor, TensorError, Var};

pub const NORM_EPS: f64 = 1e-5;
const MASKED: f64 = -1e9;
const CHECKPOINT_HEADER: &str = "# migt checkpoint v1";

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("invalid policy config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint line {line}: {msg}")]
    Checkpoint { line: usize, msg: String },
    #[error("checkpoint does not match config: {0}")]
    Mismatch(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoNorm,
    NoGating,
    NoTransformer,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoNorm, Variant::NoGating, Variant::NoTransformer];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoNorm => "no_norm",
            Variant::NoGating => "no_gating",
            Variant::NoTransformer => "no_transformer",
        }
    }

    fn has_attention(self) -> bool {
        self != Variant::NoTransformer
    }

    fn has_norm(self) -> bool {
        matches!(self, Variant::Full | Variant::NoGating)
    }

    fn has_gates(self) -> bool {
        matches!(self, Variant::Full | Variant::NoNorm)
    }
}

impl std::str::FromStr for Variant {
    type Err = PolicyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| PolicyError::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub memory_len: usize,
    /// Initial gate bias `b_g`.
    pub gate_bias: f64,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            d_model: 64,
            heads: 4,
            ff_dim: 32,
            memory_len: 64,
            gate_bias: 2.0,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.d_model < 2 || self.heads == 0 || self.ff_dim == 0 {
            return Err(PolicyError::Config("d_model >= 2, heads >= 1 and ff_dim >= 1 required".into()));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(PolicyError::Config(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if !self.gate_bias.is_finite() {
            return Err(PolicyError::Config("gate_bias must be finite".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Everything that fixes the parameter layout.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyConfig {
    pub n_assets: usize,
    /// Channels per asset and day in the state.
    pub channels: usize,
    pub attention: AttentionConfig,
    pub variant: Variant,
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.n_assets == 0 || self.channels == 0 {
            return Err(PolicyError::Config("n_assets and channels must be >= 1".into()));
        }
        self.attention.validate()
    }

    pub fn input_dim(&self) -> usize {
        self.n_assets * self.channels
    }

    pub fn action_dim(&self) -> usize {
        self.n_assets + 1
    }

    /// Parameter names, shapes and init gains in creation order.
    fn layout(&self) -> Vec<(String, Vec<usize>, Init)> {
        let d = self.attention.d_model;
        let ff = self.attention.ff_dim;
        let mut out = Vec::new();
        let dense = |prefix: &str, fan_in: usize, fan_out: usize, gain: f64, out: &mut Vec<_>| {
            out.push((format!("{prefix}.w"), vec![fan_in, fan_out], Init::Uniform(gain)));
            out.push((format!("{prefix}.b"), vec![fan_out], Init::Zero));
        };
        dense("embed", self.input_dim(), d, 1.0, &mut out);
        let v = self.variant;
        let norm = |name: &str, out: &mut Vec<(String, Vec<usize>, Init)>| {
            out.push((format!("{name}.gain"), vec![d], Init::One));
            out.push((format!("{name}.bias"), vec![d], Init::Zero));
        };
        let gate = |name: &str, bias: f64, out: &mut Vec<(String, Vec<usize>, Init)>| {
            for m in ["wz", "uz", "wg", "ug"] {
                out.push((format!("{name}.{m}"), vec![d, d], Init::Uniform(0.1)));
            }
            out.push((format!("{name}.bg"), vec![d], Init::Const(bias)));
        };
        if v.has_attention() {
            if v.has_norm() {
                norm("norm1", &mut out);
            }
            for m in ["wq", "wk", "wv", "wo"] {
                out.push((format!("attn.{m}"), vec![d, d], Init::Uniform(1.0)));
            }
            out.push(("attn.bo".into(), vec![d], Init::Zero));
            if v.has_gates() {
                gate("gate1", self.attention.gate_bias, &mut out);
            }
            if v.has_norm() {
                norm("norm2", &mut out);
            }
        }
        out.push(("ff.w1".into(), vec![d, ff], Init::Uniform(1.0)));
        out.push(("ff.b1".into(), vec![ff], Init::Zero));
        out.push(("ff.w2".into(), vec![ff, d], Init::Uniform(1.0)));
        out.push(("ff.b2".into(), vec![d], Init::Zero));
        if v.has_gates() {
            gate("gate2", self.attention.gate_bias, &mut out);
        }
        dense("policy_head.l1", d, d, 1.0, &mut out);
        dense("policy_head.l2", d, self.action_dim(), 0.01, &mut out);
        dense("value_head.l1", d, d, 1.0, &mut out);
        dense("value_head.l2", d, 1, 1.0, &mut out);
        out
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Zero,
    One,
    Const(f64),
    /// Uniform on `±gain·√(6 / (fan_in + fan_out))`.
    Uniform(f64),
}

/// Named weights of one policy, in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParameters {
    entries: Vec<(String, Tensor)>,
}

impl PolicyParameters {
    pub fn init(config: &PolicyConfig, seed: u64) -> Result<Self, PolicyError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = config
            .layout()
            .into_iter()
            .map(|(name, shape, init)| {
                let n: usize = shape.iter().product();
                let data = match init {
                    Init::Zero => vec![0.0; n],
                    Init::One => vec![1.0; n],
                    Init::Const(c) => vec![c; n],
                    Init::Uniform(gain) => {
                        let bound = gain * (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                        (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
                    }
                };
                (name, Tensor::new(shape, data).expect("layout shapes are consistent"))
            })
            .collect();
        Ok(PolicyParameters { entries })
    }

    pub fn from_entries(entries: Vec<(String, Tensor)>) -> Self {
        PolicyParameters { entries }
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.entries.iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }

    /// Registers every tensor as a gradient-tracked leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        let vars = self.entries.iter().map(|(_, t)| g.param(t.clone())).collect();
        Bound::new(self.names(), vars)
    }

    /// Registers every tensor as a constant of `g`.
    pub fn bind_constant(&self, g: &mut Graph) -> Bound {
        let vars = self.entries.iter().map(|(_, t)| g.constant(t.clone())).collect();
        Bound::new(self.names(), vars)
    }

    /// Checks names and shapes against the layout implied by `config`.
    pub fn check_layout(&self, config: &PolicyConfig) -> Result<(), PolicyError> {
        let layout = config.layout();
        if layout.len() != self.entries.len() {
            return Err(PolicyError::Mismatch(format!(
                "expected {} tensors, found {}",
                layout.len(),
                self.entries.len()
            )));
        }
        for ((name, shape, _), (got_name, t)) in layout.iter().zip(&self.entries) {
            if name != got_name || shape.as_slice() != t.shape() {
                return Err(PolicyError::Mismatch(format!(
                    "expected {name} {shape:?}, found {got_name} {:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Graph handles of bound parameters, looked up by name.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
    order: Vec<Var>,
}

impl Bound {
    pub fn new(names: Vec<String>, vars: Vec<Var>) -> Self {
        Bound {
            order: vars.clone(),
            vars: names.into_iter().zip(vars).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var, TensorError> {
        self.vars.get(name).copied().ok_or_else(|| TensorError::Contract {
            op: "policy",
            msg: format!("missing parameter {name}"),
        })
    }

    /// Handles in parameter order.
    pub fn vars(&self) -> &[Var] {
        &self.order
    }
}

/// Cached per-day embeddings from earlier steps, oldest first, at most
/// `capacity` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryTensor {
    capacity: usize,
    d: usize,
    rows: Vec<f64>,
}

impl MemoryTensor {
    pub fn new(capacity: usize, d: usize) -> Self {
        MemoryTensor {
            capacity,
            d,
            rows: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len() / self.d
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn rows(&self) -> &[f64] {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.d..(i + 1) * self.d]
    }

    pub fn to_tensor(&self) -> Option<Tensor> {
        (!self.is_empty()).then(|| Tensor::new(vec![self.len(), self.d], self.rows.clone()).expect("rows are d-wide"))
    }

    /// Appends flattened `d`-wide rows, dropping the oldest beyond capacity.
    pub fn extended(&self, rows: &[f64]) -> Self {
        assert_eq!(rows.len() % self.d, 0, "memory rows must be {} wide", self.d);
        let mut all = self.rows.clone();
        all.extend_from_slice(rows);
        let keep = self.capacity * self.d;
        if all.len() > keep {
            all.drain(..all.len() - keep);
        }
        MemoryTensor {
            capacity: self.capacity,
            d: self.d,
            rows: all,
        }
    }
}

/// Sinusoidal encoding for `len` consecutive positions ending at offset 0.
pub fn positional_encoding(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for r in 0..len {
        let pos = r as f64 - (len as f64 - 1.0);
        for i in 0..d {
            let freq = 10000f64.powf(-((2 * (i / 2)) as f64) / d as f64);
            let angle = pos * freq;
            data[r * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![len, d], data).expect("shape matches")
}

fn dense(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var, TensorError> {
    let y = g.matmul(x, p.get(&format!("{prefix}.w"))?)?;
    g.add(y, p.get(&format!("{prefix}.b"))?)
}

/// Row-wise instance normalization over the feature axis, then `gain`/`bias`.
pub fn instance_norm(g: &mut Graph, x: Var, gain: Var, bias: Var) -> Result<Var, TensorError> {
    let z = instance_standardize(g, x)?;
    let scaled = g.mul(z, gain)?;
    g.add(scaled, bias)
}

/// The pre-affine part of [`instance_norm`].
pub fn instance_standardize(g: &mut Graph, x: Var) -> Result<Var, TensorError> {
    let d = g.shape(x)[1];
    let (mean, var) = g.mean_var(x, 1)?;
    let mean = g.broadcast_axis(mean, 1, d)?;
    let centered = g.sub(x, mean)?;
    let var = g.add_scalar(var, NORM_EPS);
    let sd = g.sqrt(var);
    let sd = g.broadcast_axis(sd, 1, d)?;
    g.div(centered, sd)
}

/// `softmax(QKᵀ/√d_k + mask)·V`; `mask` holds 0 or a large negative per entry.
pub fn scaled_dot_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<Var>,
) -> Result<Var, TensorError> {
    let (m, dk) = (g.shape(k)[0], g.shape(k)[1]);
    if m == 0 {
        return Err(TensorError::Contract {
            op: "scaled_dot_attention",
            msg: "no keys".into(),
        });
    }
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let mut scores = g.scale(scores, 1.0 / (dk as f64).sqrt());
    if let Some(mask) = mask {
        scores = g.add(scores, mask)?;
    }
    let weights = g.softmax(scores, 1)?;
    g.matmul(weights, v)
}

/// Causal mask for queries at absolute rows `q_start..q_start + q` over `m` keys.
pub fn causal_mask(q: usize, m: usize, q_start: usize) -> Tensor {
    let mut data = vec![0.0; q * m];
    for i in 0..q {
        for j in (q_start + i + 1)..m {
            data[i * m + j] = MASKED;
        }
    }
    Tensor::new(vec![q, m], data).expect("shape matches")
}

/// Multi-head attention of `queries` over `keys`; the query at row `i`
/// sits at absolute key position `q_start + i` and sees keys up to it.
pub fn multi_head_attention(
    g: &mut Graph,
    p: &Bound,
    queries: Var,
    keys: Var,
    q_start: usize,
    heads: usize,
) -> Result<Var, TensorError> {
    let d = g.shape(queries)[1];
    let (nq, m) = (g.shape(queries)[0], g.shape(keys)[0]);
    let dh = d / heads;
    let q = g.matmul(queries, p.get("attn.wq")?)?;
    let k = g.matmul(keys, p.get("attn.wk")?)?;
    let v = g.matmul(keys, p.get("attn.wv")?)?;
    let mask = (q_start + nq < m || nq > 1).then(|| g.constant(causal_mask(nq, m, q_start)));
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        outs.push(scaled_dot_attention(g, qh, kh, vh, mask)?);
    }
    let joined = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    let o = g.matmul(joined, p.get("attn.wo")?)?;
    g.add(o, p.get("attn.bo")?)
}

/// Lite gate unit fan-in of residual `x` and sub-layer output `y`.
pub fn lgu(g: &mut Graph, p: &Bound, prefix: &str, x: Var, y: Var) -> Result<Var, TensorError> {
    let w = |m: &str| p.get(&format!("{prefix}.{m}"));
    let zy = g.matmul(y, w("wz")?)?;
    let zx = g.matmul(x, w("uz")?)?;
    let pre = g.add(zy, zx)?;
    let pre = g.sub(pre, w("bg")?)?;
    let z = g.sigmoid(pre);
    let hy = g.matmul(y, w("wg")?)?;
    let zx = g.mul(z, x)?;
    let hx = g.matmul(zx, w("ug")?)?;
    let hpre = g.add(hy, hx)?;
    let h = g.sigmoid(hpre);
    let neg_z = g.neg(z);
    let keep = g.add_scalar(neg_z, 1.0);
    let kept = g.mul(keep, x)?;
    let update = g.mul(z, h)?;
    g.add(kept, update)
}

/// Position-wise `d → ff → d` MLP with ReLU between the layers.
pub fn pw_mlp(g: &mut Graph, p: &Bound, x: Var) -> Result<Var, TensorError> {
    let h = g.matmul(x, p.get("ff.w1")?)?;
    let h = g.add(h, p.get("ff.b1")?)?;
    let h = g.relu(h);
    let o = g.matmul(h, p.get("ff.w2")?)?;
    g.add(o, p.get("ff.b2")?)
}

fn fan_in(g: &mut Graph, p: &Bound, gate: &str, variant: Variant, x: Var, y: Var) -> Result<Var, TensorError> {
    if variant.has_gates() {
        lgu(g, p, gate, x, y)
    } else {
        g.add(x, y)
    }
}

fn maybe_norm(g: &mut Graph, p: &Bound, name: &str, variant: Variant, x: Var) -> Result<Var, TensorError> {
    if variant.has_norm() {
        instance_norm(g, x, p.get(&format!("{name}.gain"))?, p.get(&format!("{name}.bias"))?)
    } else {
        Ok(x)
    }
}

/// Block over `context` (memory rows then current rows) whose outputs are
/// the rows from `q_start` on.
fn block(
    g: &mut Graph,
    p: &Bound,
    context: Var,
    q_start: usize,
    heads: usize,
    variant: Variant,
) -> Result<Var, TensorError> {
    let s = g.shape(context)[0];
    let x = g.slice_rows(context, q_start, s - q_start)?;
    let normed = maybe_norm(g, p, "norm1", variant, context)?;
    let queries = g.slice_rows(normed, q_start, s - q_start)?;
    let att = multi_head_attention(g, p, queries, normed, q_start, heads)?;
    let att = g.relu(att);
    let h = fan_in(g, p, "gate1", variant, x, att)?;
    let hn = maybe_norm(g, p, "norm2", variant, h)?;
    let f = pw_mlp(g, p, hn)?;
    let f = g.relu(f);
    fan_in(g, p, "gate2", variant, h, f)
}

/// Gated Instance Attention block over `x` with `memory` rows as extra
/// keys/values. Returns the block output and the memory extended by `x`.
pub fn gia_block(
    g: &mut Graph,
    p: &Bound,
    x: Var,
    memory: &MemoryTensor,
    heads: usize,
    variant: Variant,
) -> Result<(Var, MemoryTensor), TensorError> {
    if !variant.has_attention() {
        return Err(TensorError::Contract {
            op: "gia_block",
            msg: "variant has no attention block".into(),
        });
    }
    let (context, q_start) = match memory.to_tensor() {
        Some(m) => {
            let m = g.constant(m);
            (g.concat_rows(&[m, x])?, memory.len())
        }
        None => (x, 0),
    };
    let out = block(g, p, context, q_start, heads, variant)?;
    let next = memory.extended(g.value(x).data());
    Ok((out, next))
}

fn check_stage(g: &Graph, v: Var, stage: &str) -> Result<(), TensorError> {
    if g.value(v).is_finite() {
        Ok(())
    } else {
        Err(TensorError::Contract {
            op: "policy_forward",
            msg: format!("non-finite values after {stage}"),
        })
    }
}

/// Graph handles produced by one policy evaluation.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// `1 × (n + 1)` action logits.
    pub logits: Var,
    /// `1 × 1` state value.
    pub value: Var,
    /// `window × d` per-day embeddings of the state rows.
    pub embeddings: Var,
}

/// Builds the forward pass for `state` (`window × input_dim`) on `g`.
/// Only the newest row is queried.
pub fn forward_graph(
    g: &mut Graph,
    p: &Bound,
    config: &PolicyConfig,
    state: &Tensor,
    memory: &MemoryTensor,
) -> Result<ForwardVars, TensorError> {
    let d = config.attention.d_model;
    let x = g.constant(state.clone());
    let embeddings = dense(g, p, "embed", x)?;
    check_stage(g, embeddings, "embedding")?;
    let w = g.shape(embeddings)[0];
    let trunk = if config.variant.has_attention() {
        let (raw, mem_len) = match memory.to_tensor() {
            Some(m) => {
                let m = g.constant(m);
                (g.concat_rows(&[m, embeddings])?, memory.len())
            }
            None => (embeddings, 0),
        };
        let s = mem_len + w;
        let pe = g.constant(positional_encoding(s, d));
        let context = g.add(raw, pe)?;
        let out = block(g, p, context, s - 1, config.attention.heads, config.variant)?;
        check_stage(g, out, "attention block")?;
        out
    } else {
        let last = g.slice_rows(embeddings, w - 1, 1)?;
        let f = pw_mlp(g, p, last)?;
        let f = g.relu(f);
        let out = g.add(last, f)?;
        check_stage(g, out, "position-wise MLP")?;
        out
    };
    let a = dense(g, p, "policy_head.l1", trunk)?;
    let a = g.relu(a);
    let logits = dense(g, p, "policy_head.l2", a)?;
    check_stage(g, logits, "action head")?;
    let v = dense(g, p, "value_head.l1", trunk)?;
    let v = g.relu(v);
    let value = dense(g, p, "value_head.l2", v)?;
    check_stage(g, value, "value head")?;
    Ok(ForwardVars {
        logits,
        value,
        embeddings,
    })
}

/// Result of a value-only policy evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyOutput {
    pub logits: Vec<f64>,
    pub value: f64,
    /// Memory extended by every state row's embedding.
    pub memory: MemoryTensor,
    /// `window × d` embeddings, row-major.
    pub embeddings: Vec<f64>,
}

/// Evaluates the policy without tracking gradients.
pub fn policy_forward(
    params: &PolicyParameters,
    config: &PolicyConfig,
    state: &Tensor,
    memory: &MemoryTensor,
) -> Result<PolicyOutput, PolicyError> {
    let expected = config.input_dim();
    if state.rank() != 2 || state.shape()[1] != expected || state.shape()[0] == 0 {
        return Err(PolicyError::Config(format!(
            "state must be window x {expected}, got {:?}",
            state.shape()
        )));
    }
    if !state.is_finite() {
        return Err(PolicyError::Config("state contains non-finite values".into()));
    }
    let mut g = Graph::new();
    let p = params.bind_constant(&mut g);
    let out = forward_graph(&mut g, &p, config, state, memory)?;
    let embeddings = g.value(out.embeddings).data().to_vec();
    Ok(PolicyOutput {
        logits: g.value(out.logits).data().to_vec(),
        value: g.value(out.value).item(),
        memory: memory.extended(&embeddings),
        embeddings,
    })
}

/// Writes parameters and any extra named tensors as text, one tensor per line.
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    params: &PolicyParameters,
    extras: &[(String, Tensor)],
) -> Result<(), PolicyError> {
    let path = path.as_ref();
    let mut out = String::from(CHECKPOINT_HEADER);
    out.push('\n');
    for (name, t) in params.entries().iter().chain(extras) {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        out.push_str(&format!("{name} {}", dims.join("x")));
        for v in t.data() {
            out.push_str(&format!(" {v:?}"));
        }
        out.push('\n');
    }
    let io = |source| PolicyError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut file = std::fs::File::create(path).map_err(io)?;
    file.write_all(out.as_bytes()).map_err(io)
}

/// Reads a checkpoint and validates it against `config`. Tensors outside the
/// policy layout are returned as extras.
pub fn load_checkpoint(
    path: impl AsRef<Path>,
    config: &PolicyConfig,
) -> Result<(PolicyParameters, BTreeMap<String, Tensor>), PolicyError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| PolicyError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == CHECKPOINT_HEADER => {}
        _ => {
            return Err(PolicyError::Checkpoint {
                line: 1,
                msg: format!("expected header {CHECKPOINT_HEADER:?}"),
            })
        }
    }
    let mut tensors = BTreeMap::new();
    for (i, line) in lines {
        let bad = |msg: String| PolicyError::Checkpoint { line: i + 1, msg };
        let mut parts = line.split(' ');
        let name = parts.next().filter(|n| !n.is_empty()).ok_or_else(|| bad("missing name".into()))?;
        let dims = parts.next().ok_or_else(|| bad("missing shape".into()))?;
        let shape = dims
            .split('x')
            .map(|d| d.parse::<usize>().map_err(|e| bad(format!("shape {dims:?}: {e}"))))
            .collect::<Result<Vec<_>, _>>()?;
        let data = parts
            .map(|v| v.parse::<f64>().map_err(|e| bad(format!("value {v:?}: {e}"))))
            .collect::<Result<Vec<_>, _>>()?;
        let t = Tensor::new(shape, data).map_err(|e| bad(e.to_string()))?;
        if tensors.insert(name.to_string(), t).is_some() {
            return Err(bad(format!("duplicate tensor {name}")));
        }
    }
    let mut entries = Vec::new();
    for (name, shape, _) in config.layout() {
        let t = tensors
            .remove(&name)
            .ok_or_else(|| PolicyError::Mismatch(format!("missing tensor {name}")))?;
        if t.shape() != shape.as_slice() {
            return Err(PolicyError::Mismatch(format!(
                "{name} has shape {:?}, config expects {shape:?}",
                t.shape()
            )));
        }
        entries.push((name, t));
    }
    Ok((PolicyParameters::from_entries(entries), tensors))
}
