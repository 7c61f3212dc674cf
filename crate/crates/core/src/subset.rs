//! Exact mathematics of the k-subset distribution
//! `p(z | sum z = k) ∝ exp(θ·z)` over binary masks.
//!
//! Marginals and the log-partition function come from the elementary
//! symmetric polynomial recursion evaluated in log-space; pair marginals for
//! the Jacobian are obtained by conditioning on one element being included.

use itertools::Itertools;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::RandomSource;

/// Default upper bound on the number of subsets [`enumerate_ksubsets`] lists.
pub const DEFAULT_ENUMERATION_CAP: u128 = 1_000_000;

const GUMBEL_CLAMP: f64 = 1e-12;

/// Real-valued prior scores over the nodes of one graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ScoreVector(Vec<f64>);

impl ScoreVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        check_scores(&values)?;
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<f64>> for ScoreVector {
    type Error = Error;
    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<ScoreVector> for Vec<f64> {
    fn from(s: ScoreVector) -> Self {
        s.0
    }
}

/// Binary inclusion vector with exactly `k` ones.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SubsetMask {
    bits: Vec<bool>,
    k: usize,
}

impl SubsetMask {
    pub fn from_bits(bits: Vec<bool>) -> Self {
        let k = bits.iter().filter(|&&b| b).count();
        Self { bits, k }
    }

    pub fn from_indices(n: usize, indices: &[usize]) -> Result<Self> {
        let mut bits = vec![false; n];
        for &i in indices {
            if i >= n {
                return invalid(format!("index {i} out of range for n={n}"));
            }
            if bits[i] {
                return invalid(format!("duplicate index {i}"));
            }
            bits[i] = true;
        }
        Ok(Self::from_bits(bits))
    }

    pub fn all(n: usize) -> Self {
        Self::from_bits(vec![true; n])
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.bits.get(i).copied().unwrap_or(false)
    }

    pub fn indices(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    /// Renders as a `0`/`1` string, e.g. `"0101"`.
    pub fn to_bit_string(&self) -> String {
        self.bits.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }
}

/// Dense row-major square matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SquareMatrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn transpose_mul_vec(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for (i, &vi) in v.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(self.row(i)) {
                *o += a * vi;
            }
        }
        out
    }
}

/// The k-subset exponential-family distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct KSubsetDistribution {
    scores: ScoreVector,
    k: usize,
}

impl KSubsetDistribution {
    pub fn new(scores: ScoreVector, k: usize) -> Result<Self> {
        if scores.is_empty() {
            return invalid("score vector must be nonempty");
        }
        if k == 0 || k > scores.len() {
            return invalid(format!("k={k} must lie in 1..={}", scores.len()));
        }
        Ok(Self { scores, k })
    }

    pub fn from_slice(theta: &[f64], k: usize) -> Result<Self> {
        Self::new(ScoreVector::new(theta.to_vec())?, k)
    }

    pub fn scores(&self) -> &[f64] {
        self.scores.as_slice()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.scores.len()
    }

    pub fn log_partition(&self) -> f64 {
        log_partition(self.scores(), self.k)
    }
}

fn check_scores(theta: &[f64]) -> Result<()> {
    if theta.is_empty() {
        return invalid("score vector must be nonempty");
    }
    if let Some(i) = theta.iter().position(|v| !v.is_finite()) {
        return invalid(format!("score {i} is not finite"));
    }
    Ok(())
}

fn check_k(n: usize, k: usize) -> Result<()> {
    if k == 0 || k > n {
        return invalid(format!("k={k} must lie in 1..={n}"));
    }
    Ok(())
}

/// Mask of the `k` largest entries; ties go to the lowest index.
pub fn topk_map(theta: &[f64], k: usize) -> Result<SubsetMask> {
    check_k(theta.len(), k)?;
    if theta.iter().any(|v| v.is_nan()) {
        return invalid("scores contain NaN");
    }
    let mut order: Vec<usize> = (0..theta.len()).collect();
    order.sort_by(|&a, &b| theta[b].total_cmp(&theta[a]).then(a.cmp(&b)));
    SubsetMask::from_indices(theta.len(), &order[..k])
}

/// `n` independent standard Gumbel draws.
pub fn gumbel_noise(rng: &mut RandomSource, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u = rng.uniform().clamp(GUMBEL_CLAMP, 1.0 - GUMBEL_CLAMP);
            -(-u.ln()).ln()
        })
        .collect()
}

/// `topk_map(θ + ε, k)` with one fresh Gumbel draw.
pub fn perturb_and_map(theta: &[f64], k: usize, rng: &mut RandomSource) -> Result<SubsetMask> {
    let eps = gumbel_noise(rng, theta.len());
    perturb_and_map_with_noise(theta, k, &eps)
}

pub fn perturb_and_map_with_noise(theta: &[f64], k: usize, eps: &[f64]) -> Result<SubsetMask> {
    if eps.len() != theta.len() {
        return invalid(format!(
            "noise length {} differs from score length {}",
            eps.len(),
            theta.len()
        ));
    }
    let perturbed: Vec<f64> = theta.iter().zip(eps).map(|(t, e)| t + e).collect();
    topk_map(&perturbed, k)
}

pub fn enumerate_ksubsets(n: usize, k: usize) -> Result<Vec<SubsetMask>> {
    enumerate_ksubsets_capped(n, k, DEFAULT_ENUMERATION_CAP)
}

/// All `C(n, k)` masks in lexicographic order of their index sets.
pub fn enumerate_ksubsets_capped(n: usize, k: usize, cap: u128) -> Result<Vec<SubsetMask>> {
    if k > n {
        return invalid(format!("k={k} exceeds n={n}"));
    }
    let count = binomial(n, k);
    if count > cap {
        return Err(Error::ResourceLimit(format!(
            "C({n},{k}) = {count} subsets exceeds cap {cap}"
        )));
    }
    (0..n)
        .combinations(k)
        .map(|idx| SubsetMask::from_indices(n, &idx))
        .collect()
}

/// Saturating binomial coefficient.
pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = match acc.checked_mul((n - i) as u128) {
            Some(v) => v / (i as u128 + 1),
            None => return u128::MAX,
        };
    }
    acc
}

/// `θ·z − log Z_k`.
pub fn subset_logprob(dist: &KSubsetDistribution, z: &SubsetMask) -> Result<f64> {
    if z.len() != dist.n() {
        return invalid(format!("mask length {} differs from n={}", z.len(), dist.n()));
    }
    if z.k() != dist.k() {
        return invalid(format!("mask has {} ones, expected k={}", z.k(), dist.k()));
    }
    let dot: f64 = z.indices().iter().map(|&i| dist.scores()[i]).sum();
    Ok(dot - dist.log_partition())
}

/// Inclusion probabilities `μ_i = P(z_i = 1)`.
pub fn exact_marginals(dist: &KSubsetDistribution) -> Vec<f64> {
    marginals_and_log_partition(dist.scores(), dist.k()).0
}

/// `J_ij = ∂μ_i/∂θ_j = E[z_i z_j] − μ_i μ_j`.
pub fn marginals_jacobian(dist: &KSubsetDistribution) -> SquareMatrix {
    let theta = dist.scores();
    let (n, k) = (dist.n(), dist.k());
    let mu = exact_marginals(dist);
    let mut pair = SquareMatrix::zeros(n);
    if k >= 2 {
        let mut rest = Vec::with_capacity(n - 1);
        for i in 0..n {
            rest.clear();
            rest.extend(theta.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &t)| t));
            // conditional marginals of the others given z_i = 1
            let (cond, _) = marginals_and_log_partition(&rest, k - 1);
            for (j, c) in (0..n).filter(|&j| j != i).zip(cond) {
                pair.set(i, j, mu[i] * c);
            }
        }
    }
    let mut jac = SquareMatrix::zeros(n);
    for i in 0..n {
        jac.set(i, i, mu[i] * (1.0 - mu[i]));
        for j in 0..i {
            let v = 0.5 * (pair.get(i, j) + pair.get(j, i)) - mu[i] * mu[j];
            jac.set(i, j, v);
            jac.set(j, i, v);
        }
    }
    jac
}

pub(crate) fn log_partition(theta: &[f64], k: usize) -> f64 {
    let forward = prefix_table(theta, k);
    forward[theta.len()][k]
}

/// `table[i][j] = log e_j(exp θ_0, …, exp θ_{i-1})`.
fn prefix_table(theta: &[f64], k: usize) -> Vec<Vec<f64>> {
    let mut table = vec![vec![f64::NEG_INFINITY; k + 1]; theta.len() + 1];
    table[0][0] = 0.0;
    for (i, &t) in theta.iter().enumerate() {
        let (done, todo) = table.split_at_mut(i + 1);
        let prev = &done[i];
        let next = &mut todo[0];
        next[0] = prev[0];
        for j in 1..=k {
            next[j] = log_add(prev[j], prev[j - 1] + t);
        }
    }
    table
}

/// `table[i][j] = log e_j(exp θ_i, …, exp θ_{n-1})`.
fn suffix_table(theta: &[f64], k: usize) -> Vec<Vec<f64>> {
    let n = theta.len();
    let mut table = vec![vec![f64::NEG_INFINITY; k + 1]; n + 1];
    table[n][0] = 0.0;
    for i in (0..n).rev() {
        let (head, tail) = table.split_at_mut(i + 1);
        let prev = &tail[0];
        let next = &mut head[i];
        next[0] = prev[0];
        for j in 1..=k {
            next[j] = log_add(prev[j], prev[j - 1] + theta[i]);
        }
    }
    table
}

pub(crate) fn marginals_and_log_partition(theta: &[f64], k: usize) -> (Vec<f64>, f64) {
    let n = theta.len();
    if k == 0 {
        return (vec![0.0; n], 0.0);
    }
    let forward = prefix_table(theta, k);
    let backward = suffix_table(theta, k);
    let log_z = forward[n][k];
    let mu = (0..n)
        .map(|i| {
            // log e_{k-1} of every element except i
            let rest = (0..k)
                .map(|j| forward[i][j] + backward[i + 1][k - 1 - j])
                .fold(f64::NEG_INFINITY, log_add);
            (theta[i] + rest - log_z).exp().min(1.0)
        })
        .collect();
    (mu, log_z)
}

#[inline]
fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}
