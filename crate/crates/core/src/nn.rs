//! Neural building blocks on top of the tape: parameters, dense and graph
//! attention layers, the adaptive-moment optimizer and checkpoints.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::RandomSource;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub tensor: Arc<Tensor>,
}

/// Named model parameters. Names are unique.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, tensor: Tensor) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return invalid(format!("duplicate parameter name {name:?}"));
        }
        let id = ParamId(self.params.len());
        self.params.push(Parameter {
            name: name.to_string(),
            tensor: Arc::new(tensor),
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    /// Uniform(−a, a) with `a = √(6 / (fan_in + fan_out))`.
    pub fn add_glorot(&mut self, name: &str, shape: &[usize], rng: &mut RandomSource) -> Result<ParamId> {
        let (fan_in, fan_out) = match shape {
            [n] => (*n, 1),
            [r, c] => (*r, *c),
            _ => return invalid(format!("unsupported parameter shape {shape:?}")),
        };
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..shape.iter().product::<usize>())
            .map(|_| (2.0 * rng.uniform() - 1.0) * a)
            .collect();
        self.add(name, Tensor::new(shape.to_vec(), data)?)
    }

    /// Normal(0, std²) entries.
    pub fn add_normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut RandomSource) -> Result<ParamId> {
        let data = (0..shape.iter().product::<usize>()).map(|_| std * rng.normal()).collect();
        self.add(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub(crate) fn shared(&self, id: ParamId) -> Arc<Tensor> {
        Arc::clone(&self.params[id.0].tensor)
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.params[id.0].tensor)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Empty gradient buffers, one per parameter.
    pub fn grad_buffers(&self) -> Vec<Vec<f64>> {
        vec![Vec::new(); self.params.len()]
    }

    pub fn to_checkpoint(&self, config_hash: &str, extra: serde_json::Value) -> Checkpoint {
        Checkpoint {
            config_hash: config_hash.to_string(),
            params: self
                .params
                .iter()
                .map(|p| CheckpointTensor {
                    name: p.name.clone(),
                    shape: p.tensor.shape().to_vec(),
                    values: p.tensor.data().to_vec(),
                })
                .collect(),
            extra,
        }
    }

    /// Overwrites values from a checkpoint. Every parameter must be present
    /// with an identical shape.
    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let mut seen = vec![false; self.params.len()];
        for t in &ckpt.params {
            let id = self
                .id(&t.name)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {:?}", t.name)))?;
            let cur = self.get(id);
            if cur.shape() != t.shape.as_slice() {
                return invalid(format!(
                    "shape mismatch for {:?}: model {:?}, checkpoint {:?}",
                    t.name,
                    cur.shape(),
                    t.shape
                ));
            }
            let tensor = Tensor::new(t.shape.clone(), t.values.clone())?;
            *self.get_mut(id) = tensor;
            seen[id.0] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return invalid(format!("checkpoint lacks parameter {:?}", self.params[missing].name));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Self-describing parameter file: name, shape and row-major values per tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config_hash: String,
    pub params: Vec<CheckpointTensor>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

/// Affine map `x·W + b`.
#[derive(Debug, Clone, Copy)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut RandomSource) -> Result<Self> {
        Ok(Self {
            weight: store.add_glorot(&format!("{name}.weight"), &[in_dim, out_dim], rng)?,
            bias: store.add_zeros(&format!("{name}.bias"), &[out_dim])?,
            in_dim,
            out_dim,
        })
    }

    /// Accepts a vector (returns a vector) or an n×in matrix (returns n×out).
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let input = tape.value(x);
        if input.is_matrix() {
            let h = tape.matmul(x, w)?;
            tape.add_row_broadcast(h, b)
        } else {
            let len = input.len();
            let row = tape.reshape(x, &[1, len])?;
            let h = tape.matmul(row, w)?;
            let h = tape.reshape(h, &[self.out_dim])?;
            tape.add(h, b)
        }
    }
}

/// `out_i = (q · E_i) / √d`.
pub fn scaled_dot(tape: &mut Tape, q: Var, e: Var) -> Result<Var> {
    let (qv, ev) = (tape.value(q), tape.value(e));
    if qv.is_matrix() || !ev.is_matrix() || ev.cols() != qv.len() {
        return invalid(format!("scaled_dot shapes {:?} and {:?}", qv.shape(), ev.shape()));
    }
    let (d, n) = (qv.len(), ev.rows());
    let col = tape.reshape(q, &[d, 1])?;
    let s = tape.matmul(e, col)?;
    let s = tape.reshape(s, &[n])?;
    Ok(tape.scale(s, 1.0 / (d as f64).sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatLayerConfig {
    pub in_dim: usize,
    pub out_dim: usize,
    pub heads: usize,
}

impl GatLayerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.out_dim == 0 || self.heads == 0 {
            return invalid("GAT dimensions must be positive");
        }
        if self.out_dim % self.heads != 0 {
            return invalid(format!(
                "out_dim {} not divisible by {} heads",
                self.out_dim, self.heads
            ));
        }
        Ok(())
    }
}

const GAT_SLOPE: f64 = 0.2;

#[derive(Debug, Clone)]
struct GatHead {
    weight: ParamId,
    att_dst: ParamId,
    att_src: ParamId,
}

/// Multi-head additive graph attention restricted to adjacency plus
/// self-loops. The layer has no bias, so an all-zero node with no neighbours
/// maps to zero.
#[derive(Debug, Clone)]
pub struct GatLayer {
    cfg: GatLayerConfig,
    heads: Vec<GatHead>,
}

impl GatLayer {
    pub fn new(store: &mut ParamStore, name: &str, cfg: GatLayerConfig, rng: &mut RandomSource) -> Result<Self> {
        cfg.validate()?;
        let dh = cfg.out_dim / cfg.heads;
        let heads = (0..cfg.heads)
            .map(|h| {
                Ok(GatHead {
                    weight: store.add_glorot(&format!("{name}.head{h}.weight"), &[cfg.in_dim, dh], rng)?,
                    att_dst: store.add_glorot(&format!("{name}.head{h}.att_dst"), &[dh, 1], rng)?,
                    att_src: store.add_glorot(&format!("{name}.head{h}.att_src"), &[dh, 1], rng)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { cfg, heads })
    }

    pub fn config(&self) -> GatLayerConfig {
        self.cfg
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, h: Var, adj: &[bool]) -> Result<Var> {
        Ok(self.forward_with_attention(tape, store, h, adj)?.0)
    }

    /// Also returns the attention-weight matrix of every head.
    pub fn forward_with_attention(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        h: Var,
        adj: &[bool],
    ) -> Result<(Var, Vec<Var>)> {
        let x = tape.value(h);
        if !x.is_matrix() || x.cols() != self.cfg.in_dim {
            return invalid(format!(
                "GAT input shape {:?}, expected n×{}",
                x.shape(),
                self.cfg.in_dim
            ));
        }
        let n = x.rows();
        if adj.len() != n * n {
            return invalid(format!("adjacency has {} entries for {n} nodes", adj.len()));
        }
        let mask: Vec<bool> = (0..n * n).map(|idx| adj[idx] || idx / n == idx % n).collect();
        let mut outs = Vec::with_capacity(self.heads.len());
        let mut attn = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let w = tape.param(store, head.weight);
            let wh = tape.matmul(h, w)?;
            let a_dst = tape.param(store, head.att_dst);
            let a_src = tape.param(store, head.att_src);
            let dst = tape.matmul(wh, a_dst)?;
            let dst = tape.reshape(dst, &[n])?;
            let src = tape.matmul(wh, a_src)?;
            let src = tape.reshape(src, &[n])?;
            // row i = receiver, column j = neighbour
            let logits = tape.outer_sum(dst, src)?;
            let logits = tape.leaky_relu(logits, GAT_SLOPE);
            let alpha = tape.masked_softmax_rows(logits, mask.clone())?;
            outs.push(tape.matmul(alpha, wh)?);
            attn.push(alpha);
        }
        let cat = if outs.len() == 1 { outs[0] } else { tape.concat(&outs)? };
        Ok((cat, attn))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay: each step also subtracts `lr · weight_decay · p`.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct AdamState {
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            step: 0,
            m: store.iter().map(|(_, p)| vec![0.0; p.tensor.len()]).collect(),
            v: store.iter().map(|(_, p)| vec![0.0; p.tensor.len()]).collect(),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected adaptive-moment update. An empty gradient buffer means
/// the parameter received no gradient and is treated as zero.
pub fn adam_step(store: &mut ParamStore, grads: &[Vec<f64>], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return invalid("gradient buffers do not match the parameter store");
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, g) in grads.iter().enumerate() {
        let id = ParamId(i);
        let len = store.get(id).len();
        if !g.is_empty() && g.len() != len {
            return invalid(format!("gradient for {:?} has wrong length", store.name(id)));
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let mut delta = vec![0.0; len];
        for j in 0..len {
            let gj = g.get(j).copied().unwrap_or(0.0);
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            delta[j] = cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
        let decay = cfg.lr * cfg.weight_decay;
        if decay != 0.0 || delta.iter().any(|d| *d != 0.0) {
            for (p, d) in store.get_mut(id).data_mut().iter_mut().zip(delta) {
                *p -= d + decay * *p;
            }
        }
    }
    Ok(())
}

/// Largest relative discrepancy between tape gradients and central finite
/// differences, over every entry of every input.
///
/// `build` records a scalar function of the given leaves.
pub fn gradient_check<F>(inputs: &[Tensor], step: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; input.len()]);
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[j] += step;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[j] -= step;
            let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
            let denom = analytic[j].abs().max(fd.abs()).max(1e-2);
            worst = worst.max((analytic[j] - fd).abs() / denom);
        }
    }
    Ok(worst)
}
