//! Oracles and finite-difference cases shared by the integration tests.
#![allow(dead_code)]

use gvqa_core::nn::{gradient_check, GatLayer, GatLayerConfig, ParamStore};
use gvqa_core::tensor::{Tape, Tensor, Var};
use gvqa_core::{RandomSource, Result};

/// Every k-subset of `0..n` with its probability under `p(z) ∝ exp(θᵀz)`,
/// enumerated by bitmask.
pub fn enumerate(theta: &[f64], k: usize) -> Vec<(Vec<bool>, f64)> {
    let n = theta.len();
    let mut out = Vec::new();
    for bits in 0u32..(1 << n) {
        if bits.count_ones() as usize != k {
            continue;
        }
        let z: Vec<bool> = (0..n).map(|i| bits >> i & 1 == 1).collect();
        let score: f64 = (0..n).filter(|&i| z[i]).map(|i| theta[i]).sum();
        out.push((z, score));
    }
    let top = out.iter().map(|(_, s)| *s).fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = out.iter().map(|(_, s)| (s - top).exp()).sum();
    out.into_iter().map(|(z, s)| (z, (s - top).exp() / total)).collect()
}

pub fn oracle_marginals(theta: &[f64], k: usize) -> Vec<f64> {
    let mut mu = vec![0.0; theta.len()];
    for (z, p) in enumerate(theta, k) {
        for (m, b) in mu.iter_mut().zip(&z) {
            if *b {
                *m += p;
            }
        }
    }
    mu
}

/// `∂/∂θ E[⟨w, z⟩] = Cov(z, ⟨w, z⟩)`, by enumeration.
pub fn oracle_linear_grad(theta: &[f64], k: usize, w: &[f64]) -> Vec<f64> {
    let mu = oracle_marginals(theta, k);
    let states = enumerate(theta, k);
    let mean_loss: f64 = states
        .iter()
        .map(|(z, p)| p * z.iter().zip(w).filter(|(b, _)| **b).map(|(_, w)| w).sum::<f64>())
        .sum();
    let mut g = vec![0.0; theta.len()];
    for (z, p) in &states {
        let loss: f64 = z.iter().zip(w).filter(|(b, _)| **b).map(|(_, w)| w).sum();
        for i in 0..theta.len() {
            let zi = f64::from(u8::from(z[i]));
            g[i] += p * (zi - mu[i]) * (loss - mean_loss);
        }
    }
    g
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

pub const FD_INSTANCES: usize = 100;
pub const FD_STEP: f64 = 1e-4;
pub const FD_TOL: f64 = 1e-3;

/// Values bounded away from zero so kinked ops stay smooth under the probe step.
pub fn values(rng: &mut RandomSource, len: usize) -> Vec<f64> {
    (0..len)
        .map(|_| {
            let mag = 0.05 + 1.95 * rng.uniform();
            if rng.uniform() < 0.5 {
                -mag
            } else {
                mag
            }
        })
        .collect()
}

pub fn mat(rng: &mut RandomSource, r: usize, c: usize) -> Tensor {
    Tensor::matrix(r, c, values(rng, r * c)).unwrap()
}

pub fn vector(rng: &mut RandomSource, n: usize) -> Tensor {
    Tensor::vector(values(rng, n)).unwrap()
}

fn dim(rng: &mut RandomSource) -> usize {
    1 + rng.below(4)
}

/// Reduces any tensor to a scalar through a dot product with `w`.
pub fn weighted(tape: &mut Tape, out: Var, w: Var) -> Result<Var> {
    let len = tape.value(out).len();
    let flat = tape.reshape(out, &[len])?;
    tape.dot(flat, w)
}

type Inputs = Box<dyn Fn(&mut RandomSource, usize) -> Vec<Tensor>>;
type Build = Box<dyn Fn(&mut Tape, &[Var], usize) -> Result<Var>>;

/// One differentiable op: random inputs (the last input weights the output)
/// and the scalar function under test. Both receive the instance index.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: Inputs,
    pub build: Build,
}

fn case(
    name: &'static str,
    inputs: impl Fn(&mut RandomSource, usize) -> Vec<Tensor> + 'static,
    build: impl Fn(&mut Tape, &[Var], usize) -> Result<Var> + 'static,
) -> OpCase {
    OpCase {
        name,
        inputs: Box::new(inputs),
        build: Box::new(build),
    }
}

fn push_weight(mut xs: Vec<Tensor>, out_len: usize, rng: &mut RandomSource) -> Vec<Tensor> {
    xs.push(vector(rng, out_len));
    xs
}

fn softmax_mask(instance: usize) -> Vec<bool> {
    let mut rng = RandomSource::new(10_000 + instance as u64);
    (0..16).map(|i| i / 4 == i % 4 || rng.uniform() < 0.5).collect()
}

pub fn op_cases() -> Vec<OpCase> {
    vec![
        case(
            "matmul",
            |r, _| {
                let (a, b, c) = (dim(r), dim(r), dim(r));
                push_weight(vec![mat(r, a, b), mat(r, b, c)], a * c, r)
            },
            |t, v, _| {
                let o = t.matmul(v[0], v[1])?;
                weighted(t, o, v[2])
            },
        ),
        case(
            "add",
            |r, _| {
                let (a, b) = (dim(r), dim(r));
                push_weight(vec![mat(r, a, b), mat(r, a, b)], a * b, r)
            },
            |t, v, _| {
                let o = t.add(v[0], v[1])?;
                weighted(t, o, v[2])
            },
        ),
        case(
            "sub",
            |r, _| {
                let (a, b) = (dim(r), dim(r));
                push_weight(vec![mat(r, a, b), mat(r, a, b)], a * b, r)
            },
            |t, v, _| {
                let o = t.sub(v[0], v[1])?;
                weighted(t, o, v[2])
            },
        ),
        case(
            "mul",
            |r, _| {
                let (a, b) = (dim(r), dim(r));
                push_weight(vec![mat(r, a, b), mat(r, a, b)], a * b, r)
            },
            |t, v, _| {
                let o = t.mul(v[0], v[1])?;
                weighted(t, o, v[2])
            },
        ),
        case(
            "scale",
            |r, _| {
                let (a, b) = (dim(r), dim(r));
                push_weight(vec![mat(r, a, b)], a * b, r)
            },
            |t, v, _| {
                let o = t.scale(v[0], -1.7);
                weighted(t, o, v[1])
            },
        ),
        case(
            "add_row_broadcast",
            |r, _| {
                let (a, b) = (dim(r), dim(r));
                push_weight(vec![mat(r, a, b), vector(r, b)], a * b, r)
            },
            |t, v, _| {
                let o = t.add_row_broadcast(v[0], v[1])?;
                weighted(t, o, v[2])
            },
        ),
        case(
            "broadcast_rows",
            |r, _| {
                let b = dim(r);
                push_weight(vec![vector(r, b)], 3 * b, r)
            },
            |t, v, _| {
                let o = t.broadcast_rows(v[0], 3)?;
                weighted(t, o, v[1])
            },
        ),
        case(
            "outer_sum",
            |r, _| {
                let (a, b) = (dim(r), dim(r));
                push_weight(vec![vector(r, a), vector(r, b)], a * b, r)
            },
            |t, v, _| {
                let o = t.outer_sum(v[0], v[1])?;
                weighted(t, o, v[2])
            },
        ),
        case(
            "leaky_relu",
            |r, _| {
                let (a, b) = (dim(r), dim(r));
                push_weight(vec![mat(r, a, b)], a * b, r)
            },
            |t, v, _| {
                let o = t.leaky_relu(v[0], 0.2);
                weighted(t, o, v[1])
            },
        ),
        case(
            "elu",
            |r, _| {
                let (a, b) = (dim(r), dim(r));
                push_weight(vec![mat(r, a, b)], a * b, r)
            },
            |t, v, _| {
                let o = t.elu(v[0]);
                weighted(t, o, v[1])
            },
        ),
        case(
            "tanh",
            |r, _| {
                let (a, b) = (dim(r), dim(r));
                push_weight(vec![mat(r, a, b)], a * b, r)
            },
            |t, v, _| {
                let o = t.tanh(v[0]);
                weighted(t, o, v[1])
            },
        ),
        case(
            "masked_softmax_rows",
            |r, _| push_weight(vec![mat(r, 4, 4)], 16, r),
            |t, v, i| {
                let o = t.masked_softmax_rows(v[0], softmax_mask(i))?;
                weighted(t, o, v[1])
            },
        ),
        case(
            "concat",
            |r, _| {
                let (n, a, b) = (dim(r), dim(r), dim(r));
                push_weight(vec![mat(r, n, a), mat(r, n, b)], n * (a + b), r)
            },
            |t, v, _| {
                let o = t.concat(&[v[0], v[1]])?;
                weighted(t, o, v[2])
            },
        ),
        case(
            "concat_vectors",
            |r, _| {
                let (a, b) = (dim(r), dim(r));
                push_weight(vec![vector(r, a), vector(r, b)], a + b, r)
            },
            |t, v, _| {
                let o = t.concat(&[v[0], v[1]])?;
                weighted(t, o, v[2])
            },
        ),
        case(
            "row_scale",
            |r, _| {
                let (n, d) = (dim(r), dim(r));
                push_weight(vec![mat(r, n, d), vector(r, n)], n * d, r)
            },
            |t, v, _| {
                let o = t.row_scale(v[0], v[1])?;
                weighted(t, o, v[2])
            },
        ),
        case(
            "gather_mean",
            |r, _| {
                let d = dim(r);
                push_weight(vec![mat(r, 3, d)], 4 * d, r)
            },
            |t, v, _| {
                let o = t.gather_mean(v[0], vec![vec![0, 2], vec![1], vec![], vec![2, 2, 0]])?;
                weighted(t, o, v[1])
            },
        ),
        case(
            "reshape",
            |r, _| {
                let (a, b) = (dim(r), dim(r));
                push_weight(vec![mat(r, a, b)], a * b, r)
            },
            |t, v, _| {
                let len = t.value(v[0]).len();
                let o = t.reshape(v[0], &[len])?;
                t.dot(o, v[1])
            },
        ),
        case(
            "sum",
            |r, _| {
                let (a, b) = (dim(r), dim(r));
                vec![mat(r, a, b)]
            },
            |t, v, _| {
                let sq = t.mul(v[0], v[0])?;
                Ok(t.sum(sq))
            },
        ),
        case(
            "dot",
            |r, _| {
                let a = dim(r);
                vec![vector(r, a), vector(r, a)]
            },
            |t, v, _| t.dot(v[0], v[1]),
        ),
        case(
            "softmax_cross_entropy",
            |r, _| vec![vector(r, 4)],
            |t, v, i| t.softmax_cross_entropy(v[0], i % 4),
        ),
    ]
}

/// Worst relative finite-difference error of each op over its random instances.
pub fn op_errors() -> Vec<(&'static str, f64)> {
    op_cases()
        .into_iter()
        .map(|c| {
            let mut rng = RandomSource::new(c.name.bytes().map(u64::from).sum());
            let mut worst: f64 = 0.0;
            for i in 0..FD_INSTANCES {
                let xs = (c.inputs)(&mut rng, i);
                let err = gradient_check(&xs, FD_STEP, |t, v| (c.build)(t, v, i)).unwrap();
                worst = worst.max(err);
            }
            (c.name, worst)
        })
        .collect()
}

pub fn gat_setup(seed: u64, n: usize) -> (ParamStore, GatLayer, Tensor, Vec<bool>) {
    let mut rng = RandomSource::new(seed);
    let mut store = ParamStore::new();
    let cfg = GatLayerConfig {
        in_dim: 4,
        out_dim: 4,
        heads: 2,
    };
    let layer = GatLayer::new(&mut store, "gat", cfg, &mut rng).unwrap();
    let h = mat(&mut rng, n, 4);
    let mut adj = vec![false; n * n];
    for i in 0..n {
        for j in i + 1..n {
            if rng.uniform() < 0.4 {
                adj[i * n + j] = true;
                adj[j * n + i] = true;
            }
        }
    }
    (store, layer, h, adj)
}

fn gat_loss(store: &ParamStore, layer: &GatLayer, h: &Tensor, adj: &[bool], w: &Tensor) -> (f64, Vec<Vec<f64>>, Vec<f64>) {
    let mut tape = Tape::new();
    let hv = tape.leaf(h.clone());
    let wv = tape.leaf(w.clone());
    let out = layer.forward(&mut tape, store, hv, adj).unwrap();
    let loss = weighted(&mut tape, out, wv).unwrap();
    let value = tape.value(loss).item();
    let grads = tape.backward(loss).unwrap();
    let mut acc = store.grad_buffers();
    grads.accumulate_into(&mut acc);
    let gh = grads.get(hv).map(<[f64]>::to_vec).unwrap_or_default();
    (value, acc, gh)
}

fn rel(a: f64, fd: f64) -> f64 {
    (a - fd).abs() / a.abs().max(fd.abs()).max(1e-2)
}

/// Worst relative finite-difference error of a GAT layer, over its parameters
/// and its input features.
pub fn gat_error(instances: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..instances {
        let n = 3 + (seed as usize % 4);
        let (mut store, layer, h, adj) = gat_setup(seed, n);
        let w = vector(&mut RandomSource::new(seed + 1000), n * 4);
        let (_, analytic, gh) = gat_loss(&store, &layer, &h, &adj, &w);
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            for j in 0..store.get(id).len() {
                let orig = store.get(id).data()[j];
                store.get_mut(id).data_mut()[j] = orig + FD_STEP;
                let plus = gat_loss(&store, &layer, &h, &adj, &w).0;
                store.get_mut(id).data_mut()[j] = orig - FD_STEP;
                let minus = gat_loss(&store, &layer, &h, &adj, &w).0;
                store.get_mut(id).data_mut()[j] = orig;
                let fd = (plus - minus) / (2.0 * FD_STEP);
                let a = analytic[id.index()].get(j).copied().unwrap_or(0.0);
                worst = worst.max(rel(a, fd));
            }
        }
        for j in 0..h.len() {
            let mut hp = h.clone();
            hp.data_mut()[j] += FD_STEP;
            let mut hm = h.clone();
            hm.data_mut()[j] -= FD_STEP;
            let plus = gat_loss(&store, &layer, &hp, &adj, &w).0;
            let minus = gat_loss(&store, &layer, &hm, &adj, &w).0;
            worst = worst.max(rel(gh[j], (plus - minus) / (2.0 * FD_STEP)));
        }
    }
    worst
}
