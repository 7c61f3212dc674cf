//! Tie-aware Bradley-Terry (Davidson) fitting over pairwise method
//! comparisons, per-method tallies and correlation coefficients.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::{read_jsonl, write_jsonl};
use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Outcome {
    A,
    B,
    #[serde(rename = "TIE")]
    Tie,
}

/// One judgment: which of two explanations a participant preferred.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComparisonRecord {
    pub session: String,
    pub method_a: String,
    pub method_b: String,
    pub outcome: Outcome,
    pub example_id: String,
    /// Milliseconds since the Unix epoch.
    pub timestamp: u64,
}

impl ComparisonRecord {
    pub fn validate(&self) -> Result<()> {
        if self.method_a == self.method_b {
            return invalid(format!("record compares {:?} with itself", self.method_a));
        }
        Ok(())
    }
}

pub fn read_records(path: &Path) -> Result<Vec<ComparisonRecord>> {
    let records: Vec<ComparisonRecord> = read_jsonl(path)?;
    for r in &records {
        r.validate()?;
    }
    Ok(records)
}

pub fn write_records(path: &Path, records: &[ComparisonRecord]) -> Result<()> {
    write_jsonl(path, records)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub favored: usize,
    pub ties: usize,
    pub unfavored: usize,
}

impl Tally {
    pub fn appearances(&self) -> usize {
        self.favored + self.ties + self.unfavored
    }
}

/// Per-method counts over every appearance.
pub fn tally(records: &[ComparisonRecord]) -> BTreeMap<String, Tally> {
    let mut out: BTreeMap<String, Tally> = BTreeMap::new();
    for r in records {
        let (a, b) = match r.outcome {
            Outcome::A => ((1, 0, 0), (0, 0, 1)),
            Outcome::B => ((0, 0, 1), (1, 0, 0)),
            Outcome::Tie => ((0, 1, 0), (0, 1, 0)),
        };
        for (m, (f, t, u)) in [(&r.method_a, a), (&r.method_b, b)] {
            let e = out.entry(m.clone()).or_default();
            e.favored += f;
            e.ties += t;
            e.unfavored += u;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    /// Likelihood weight of each tie.
    pub tie_weight: f64,
    /// Quadratic penalty on θ and log δ; keeps separable data finite.
    pub ridge: f64,
    pub max_iterations: usize,
    /// Stop when the gradient norm per comparison falls below this.
    pub tolerance: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            tie_weight: 1.0 / 6.0,
            ridge: 1e-6,
            max_iterations: 500,
            tolerance: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BTParams {
    /// Method strengths, summing to zero.
    pub theta: BTreeMap<String, f64>,
    /// Tie parameter.
    pub delta: f64,
    pub tie_weight: f64,
    pub log_likelihood: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, Default)]
struct PairCounts {
    a: f64,
    b: f64,
    ties: f64,
}

/// Maximizes the Davidson log-likelihood
///
/// `P(i beats j) = πᵢ / (πᵢ + πⱼ + δ√(πᵢπⱼ))`,
/// `P(tie) = δ√(πᵢπⱼ) / (πᵢ + πⱼ + δ√(πᵢπⱼ))`, with `π = exp(θ)`,
///
/// where each tie counts with weight `tie_weight`. Uses damped Newton steps
/// on `(θ, log δ)` and returns θ centred to sum zero.
pub fn fit_extended_bt(records: &[ComparisonRecord], opts: &FitOptions) -> Result<BTParams> {
    if !(opts.tie_weight > 0.0 && opts.tie_weight <= 1.0) {
        return invalid("tie_weight must lie in (0, 1]");
    }
    if opts.ridge < 0.0 || !opts.ridge.is_finite() {
        return invalid("ridge must be nonnegative");
    }
    for r in records {
        r.validate()?;
    }
    let methods: BTreeSet<&str> = records
        .iter()
        .flat_map(|r| [r.method_a.as_str(), r.method_b.as_str()])
        .collect();
    if methods.len() < 2 {
        return invalid("at least two compared methods are needed");
    }
    let names: Vec<String> = methods.iter().map(|s| s.to_string()).collect();
    let index: BTreeMap<&str, usize> = methods.iter().enumerate().map(|(i, m)| (*m, i)).collect();

    // aggregate by unordered pair (i < j)
    let mut pairs: BTreeMap<(usize, usize), PairCounts> = BTreeMap::new();
    for r in records {
        let (ia, ib) = (index[r.method_a.as_str()], index[r.method_b.as_str()]);
        let (key, flip) = if ia < ib { ((ia, ib), false) } else { ((ib, ia), true) };
        let c = pairs.entry(key).or_default();
        match (r.outcome, flip) {
            (Outcome::A, false) | (Outcome::B, true) => c.a += 1.0,
            (Outcome::B, false) | (Outcome::A, true) => c.b += 1.0,
            (Outcome::Tie, _) => c.ties += 1.0,
        }
    }
    let pairs: Vec<((usize, usize), PairCounts)> = pairs.into_iter().collect();
    let m = names.len();
    let dim = m + 1;
    let w = opts.tie_weight;

    // objective: weighted log-likelihood − ridge/2·|x|² − (Σθ)²/2
    let evaluate = |x: &[f64], want_derivs: bool, penalized: bool| -> (f64, Vec<f64>, Vec<f64>) {
        let nu = x[m];
        let mut f = 0.0;
        let mut g = vec![0.0; dim];
        let mut h = vec![0.0; dim * dim];
        for &((i, j), c) in &pairs {
            let (ti, tj) = (x[i], x[j]);
            let lt = nu + 0.5 * (ti + tj);
            let mx = ti.max(tj).max(lt);
            let (ei, ej, et) = ((ti - mx).exp(), (tj - mx).exp(), (lt - mx).exp());
            let sum = ei + ej + et;
            let log_d = mx + sum.ln();
            let n = c.a + c.b + w * c.ties;
            f += c.a * ti + c.b * tj + w * c.ties * lt - n * log_d;
            if !want_derivs {
                continue;
            }
            let (pi, pj, pt) = (ei / sum, ej / sum, et / sum);
            // sufficient statistics of the three outcomes over (θi, θj, ν)
            let stats = [(pi, [1.0, 0.0, 0.0]), (pj, [0.0, 1.0, 0.0]), (pt, [0.5, 0.5, 1.0])];
            let mut mean = [0.0; 3];
            for (p, s) in &stats {
                for k in 0..3 {
                    mean[k] += p * s[k];
                }
            }
            let observed = [c.a + 0.5 * w * c.ties, c.b + 0.5 * w * c.ties, w * c.ties];
            let idx = [i, j, m];
            for k in 0..3 {
                g[idx[k]] += observed[k] - n * mean[k];
            }
            for r in 0..3 {
                for s in 0..3 {
                    let cov: f64 = stats.iter().map(|(p, st)| p * st[r] * st[s]).sum::<f64>() - mean[r] * mean[s];
                    h[idx[r] * dim + idx[s]] -= n * cov;
                }
            }
        }
        if !penalized {
            return (f, g, h);
        }
        let total: f64 = x[..m].iter().sum();
        f -= 0.5 * opts.ridge * x.iter().map(|v| v * v).sum::<f64>() + 0.5 * total * total;
        if want_derivs {
            for k in 0..dim {
                g[k] -= opts.ridge * x[k];
                h[k * dim + k] -= opts.ridge;
            }
            for r in 0..m {
                g[r] -= total;
                for s in 0..m {
                    h[r * dim + s] -= 1.0;
                }
            }
        }
        (f, g, h)
    };

    let scale = (records.len() as f64).max(1.0);
    let mut x = vec![0.0; dim];
    let mut iterations = 0;
    loop {
        let (f, g, h) = evaluate(&x, true, true);
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < opts.tolerance * scale {
            break;
        }
        if iterations >= opts.max_iterations {
            return Err(Error::NotConverged {
                iterations,
                grad_norm: norm,
            });
        }
        iterations += 1;
        // Newton direction solves (−H) d = g; fall back to the gradient when
        // the system is singular
        let neg_h: Vec<f64> = h.iter().map(|v| -v).collect();
        let dir = solve(&neg_h, &g, dim).filter(|d| d.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>() > 0.0);
        let dir = dir.unwrap_or_else(|| g.clone());
        let mut step = 1.0;
        let slope: f64 = dir.iter().zip(&g).map(|(a, b)| a * b).sum();
        loop {
            let cand: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + step * d).collect();
            let (fc, _, _) = evaluate(&cand, false, true);
            if fc >= f + 1e-4 * step * slope || step < 1e-12 {
                x = cand;
                break;
            }
            step *= 0.5;
        }
    }
    let mean = x[..m].iter().sum::<f64>() / m as f64;
    let (ll, _, _) = evaluate(&x, false, false);
    let theta = names
        .into_iter()
        .zip(&x[..m])
        .map(|(name, t)| (name, t - mean))
        .collect();
    Ok(BTParams {
        theta,
        delta: x[m].exp(),
        tie_weight: w,
        log_likelihood: ll,
        iterations,
    })
}

/// Gaussian elimination with partial pivoting. `None` when singular.
fn solve(a: &[f64], b: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut m = a.to_vec();
    let mut rhs = b.to_vec();
    for col in 0..n {
        let piv = (col..n).max_by(|&r, &s| m[r * n + col].abs().total_cmp(&m[s * n + col].abs()))?;
        if m[piv * n + col].abs() < 1e-300 {
            return None;
        }
        if piv != col {
            for k in 0..n {
                m.swap(col * n + k, piv * n + k);
            }
            rhs.swap(col, piv);
        }
        for r in col + 1..n {
            let factor = m[r * n + col] / m[col * n + col];
            if factor != 0.0 {
                for k in col..n {
                    m[r * n + k] -= factor * m[col * n + k];
                }
                rhs[r] -= factor * rhs[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| m[r * n + k] * x[k]).sum();
        x[r] = (rhs[r] - s) / m[r * n + r];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Drops records that involve methods outside `keep`, warning once per method.
pub fn restrict_methods(records: &[ComparisonRecord], keep: &BTreeSet<String>) -> Vec<ComparisonRecord> {
    let mut dropped = BTreeSet::new();
    let out = records
        .iter()
        .filter(|r| {
            let ok = keep.contains(&r.method_a) && keep.contains(&r.method_b);
            if !ok {
                for m in [&r.method_a, &r.method_b] {
                    if !keep.contains(m) {
                        dropped.insert(m.clone());
                    }
                }
            }
            ok
        })
        .cloned()
        .collect();
    for m in dropped {
        warn!("method {m} excluded from the fit");
    }
    out
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return invalid(format!("length mismatch: {} vs {}", x.len(), y.len()));
    }
    if x.len() < 2 {
        return invalid("correlation needs at least two points");
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return invalid("correlation inputs must be finite");
    }
    Ok(())
}

/// Sample Pearson correlation; `None` when either input has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<Option<f64>> {
    check_pair(x, y)?;
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(None);
    }
    Ok(Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)))
}

/// 1-based ranks; tied values share their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<Option<f64>> {
    check_pair(x, y)?;
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Kendall's τ-b.
pub fn kendall(x: &[f64], y: &[f64]) -> Result<Option<f64>> {
    check_pair(x, y)?;
    let n = x.len();
    let (mut concordant, mut discordant, mut tie_x, mut tie_y) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let dx = (x[i] - x[j]).partial_cmp(&0.0).unwrap_or(std::cmp::Ordering::Equal);
            let dy = (y[i] - y[j]).partial_cmp(&0.0).unwrap_or(std::cmp::Ordering::Equal);
            use std::cmp::Ordering::Equal;
            match (dx, dy) {
                (Equal, Equal) => {}
                (Equal, _) => tie_x += 1,
                (_, Equal) => tie_y += 1,
                (a, b) if a == b => concordant += 1,
                _ => discordant += 1,
            }
        }
    }
    let n1 = (concordant + discordant + tie_x) as f64;
    let n2 = (concordant + discordant + tie_y) as f64;
    if n1 == 0.0 || n2 == 0.0 {
        return Ok(None);
    }
    Ok(Some((concordant - discordant) as f64 / (n1 * n2).sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    pub kendall: Option<f64>,
}

impl CorrelationRow {
    pub fn compute(x: &[f64], y: &[f64]) -> Result<Self> {
        Ok(Self {
            pearson: pearson(x, y)?,
            spearman: spearman(x, y)?,
            kendall: kendall(x, y)?,
        })
    }
}
