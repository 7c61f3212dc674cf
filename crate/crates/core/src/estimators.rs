//! Discrete gradient estimators for top-k subset sampling.
//!
//! Each estimator maps prior scores θ and the downstream gradient `∂L/∂z`
//! to an estimate of `∂L/∂θ`. The forward sample and its backward rule are
//! produced together by [`sample_subset`] so the autodiff tape can wire the
//! straight-through junction without knowing which estimator is in use.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::RandomSource;
use crate::subset::{
    enumerate_ksubsets, gumbel_noise, marginals_jacobian, topk_map, KSubsetDistribution,
    SubsetMask,
};

const LAMBDA_MIN: f64 = 1e-4;
const LAMBDA_MAX: f64 = 1e4;
const MASK_FLOOR: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Method {
    Ste,
    Imle,
    Aimle,
    Simple,
    GumbelSoftsubSt,
    None,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Ste,
        Method::Imle,
        Method::Aimle,
        Method::Simple,
        Method::GumbelSoftsubSt,
        Method::None,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ste => "STE",
            Method::Imle => "IMLE",
            Method::Aimle => "AIMLE",
            Method::Simple => "SIMPLE",
            Method::GumbelSoftsubSt => "GUMBEL_SOFTSUB_ST",
            Method::None => "NONE",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method {s:?}")))
    }

    /// Whether the model samples a subgraph at all.
    pub fn samples(self) -> bool {
        self != Method::None
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    pub method: Method,
    /// IMLE perturbation strength.
    pub lambda: f64,
    /// Relaxation temperature.
    pub tau: f64,
    pub ema_decay: f64,
    /// AIMLE target for the average number of nonzero gradient entries per instance.
    pub target_nonzeros: f64,
    pub lambda_adapt_rate: f64,
    /// Multiplier on the Gumbel noise used by every perturbation-based sampler.
    pub noise_scale: f64,
    /// Starting λ for AIMLE before adaptation.
    pub aimle_initial_lambda: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            method: Method::Aimle,
            lambda: 10.0,
            tau: 1.0,
            ema_decay: 0.9,
            target_nonzeros: 1.0,
            lambda_adapt_rate: 0.1,
            noise_scale: 1.0,
            aimle_initial_lambda: 1.0,
        }
    }
}

impl EstimatorConfig {
    pub fn with_method(method: Method) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lambda", self.lambda),
            ("tau", self.tau),
            ("target_nonzeros", self.target_nonzeros),
            ("lambda_adapt_rate", self.lambda_adapt_rate),
            ("aimle_initial_lambda", self.aimle_initial_lambda),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return invalid(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return invalid(format!("ema_decay must lie in (0,1), got {}", self.ema_decay));
        }
        if !(self.noise_scale.is_finite() && self.noise_scale >= 0.0) {
            return invalid(format!("noise_scale must be nonnegative, got {}", self.noise_scale));
        }
        Ok(())
    }
}

/// Adaptive λ state threaded through training by the caller.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AimleState {
    pub lambda: f64,
    pub ema_l0: f64,
}

impl AimleState {
    pub fn new(cfg: &EstimatorConfig) -> Self {
        Self {
            lambda: cfg.aimle_initial_lambda,
            ema_l0: 0.0,
        }
    }
}

/// Soft relaxation paired with the hard sample it stands in for.
#[derive(Debug, Clone, PartialEq)]
pub struct RelaxedMask {
    pub soft: Vec<f64>,
    pub hard: SubsetMask,
}

fn check_dims(theta: &[f64], grad_z: &[f64]) -> Result<()> {
    if theta.len() != grad_z.len() {
        return invalid(format!(
            "gradient length {} differs from score length {}",
            grad_z.len(),
            theta.len()
        ));
    }
    Ok(())
}

pub fn imle_grad(
    theta: &[f64],
    grad_z: &[f64],
    k: usize,
    lambda: f64,
    rng: &mut RandomSource,
) -> Result<Vec<f64>> {
    let eps = gumbel_noise(rng, theta.len());
    imle_grad_with_noise(theta, grad_z, k, lambda, &eps)
}

/// `(1/λ)[MAP(θ+ε) − MAP(θ'+ε)]` with `θ' = θ − λ·∂L/∂z` and the same ε in both.
pub fn imle_grad_with_noise(
    theta: &[f64],
    grad_z: &[f64],
    k: usize,
    lambda: f64,
    eps: &[f64],
) -> Result<Vec<f64>> {
    check_dims(theta, grad_z)?;
    check_dims(theta, eps)?;
    if !(lambda > 0.0) {
        return invalid(format!("lambda must be positive, got {lambda}"));
    }
    let prior: Vec<f64> = theta.iter().zip(eps).map(|(t, e)| t + e).collect();
    let target: Vec<f64> = prior
        .iter()
        .zip(grad_z)
        .map(|(p, g)| p - lambda * g)
        .collect();
    let z = topk_map(&prior, k)?;
    let z_target = topk_map(&target, k)?;
    Ok(z
        .bits()
        .iter()
        .zip(z_target.bits())
        .map(|(&a, &b)| (a as i8 - b as i8) as f64 / lambda)
        .collect())
}

pub fn count_nonzero(grad: &[f64]) -> usize {
    grad.iter().filter(|g| **g != 0.0).count()
}

pub fn aimle_update(state: AimleState, grad_theta: &[f64], cfg: &EstimatorConfig) -> AimleState {
    aimle_update_with_count(state, count_nonzero(grad_theta) as f64, cfg)
}

/// AIMLE step driven by an already-averaged nonzero count.
pub fn aimle_update_with_count(state: AimleState, nonzeros: f64, cfg: &EstimatorConfig) -> AimleState {
    let ema_l0 = cfg.ema_decay * state.ema_l0 + (1.0 - cfg.ema_decay) * nonzeros;
    let step = 1.0 + cfg.lambda_adapt_rate;
    let lambda = if ema_l0 < cfg.target_nonzeros {
        state.lambda * step
    } else {
        state.lambda / step
    };
    AimleState {
        lambda: lambda.clamp(LAMBDA_MIN, LAMBDA_MAX),
        ema_l0,
    }
}

/// `J(θ)·∂L/∂z` with `J` the exact Jacobian of the k-subset marginals.
pub fn simple_grad(theta: &[f64], grad_z: &[f64], k: usize) -> Result<Vec<f64>> {
    check_dims(theta, grad_z)?;
    let dist = KSubsetDistribution::from_slice(theta, k)?;
    Ok(marginals_jacobian(&dist).mul_vec(grad_z))
}

pub fn ste_grad(grad_z: &[f64]) -> Vec<f64> {
    grad_z.to_vec()
}

pub fn gumbel_softsub_st(
    theta: &[f64],
    k: usize,
    tau: f64,
    rng: &mut RandomSource,
) -> Result<RelaxedMask> {
    let eps = gumbel_noise(rng, theta.len());
    gumbel_softsub_st_with_noise(theta, k, tau, &eps)
}

pub fn gumbel_softsub_st_with_noise(
    theta: &[f64],
    k: usize,
    tau: f64,
    eps: &[f64],
) -> Result<RelaxedMask> {
    check_dims(theta, eps)?;
    if !(tau > 0.0) {
        return invalid(format!("tau must be positive, got {tau}"));
    }
    let keys: Vec<f64> = theta.iter().zip(eps).map(|(t, e)| t + e).collect();
    let hard = topk_map(&keys, k)?;
    let rounds = relax_rounds(&keys, k, tau);
    let mut soft = vec![0.0; keys.len()];
    for round in &rounds {
        for (s, lp) in soft.iter_mut().zip(&round.log_p) {
            *s += lp.exp();
        }
    }
    Ok(RelaxedMask { soft, hard })
}

/// Vector-Jacobian product of the relaxed mask with respect to θ.
pub fn gumbel_softsub_backward(
    theta: &[f64],
    eps: &[f64],
    k: usize,
    tau: f64,
    grad_soft: &[f64],
) -> Result<Vec<f64>> {
    check_dims(theta, eps)?;
    check_dims(theta, grad_soft)?;
    let n = theta.len();
    let keys: Vec<f64> = theta.iter().zip(eps).map(|(t, e)| t + e).collect();
    let rounds = relax_rounds(&keys, k, tau);
    // gradient flowing into the logits of the next round
    let mut g_alpha = vec![0.0; n];
    for round in rounds.iter().rev() {
        let p: Vec<f64> = round.log_p.iter().map(|lp| lp.exp()).collect();
        let mut g_u = vec![0.0; n];
        // soft = Σ p: softmax VJP
        let dot: f64 = grad_soft.iter().zip(&p).map(|(g, p)| g * p).sum();
        for m in 0..n {
            g_u[m] += p[m] * (grad_soft[m] - dot);
        }
        // mask term ℓ_i = log(1 − p_i) feeds the next round additively
        for m in 0..n {
            let mut acc = 0.0;
            for i in 0..n {
                if round.clamped[i] || g_alpha[i] == 0.0 {
                    continue;
                }
                if i == m {
                    acc -= g_alpha[i] * p[m];
                } else {
                    acc += g_alpha[i] * (round.log_p[m] + round.log_p[i] - round.mask[i]).exp();
                }
            }
            g_u[m] += acc;
        }
        for (a, u) in g_alpha.iter_mut().zip(&g_u) {
            *a += u / tau;
        }
    }
    Ok(g_alpha)
}

struct RelaxRound {
    log_p: Vec<f64>,
    mask: Vec<f64>,
    clamped: Vec<bool>,
}

/// Successive temperature-τ softmax rounds; after each round every logit is
/// shifted by `log(1 − p_i)`, which removes the mass already selected.
fn relax_rounds(keys: &[f64], k: usize, tau: f64) -> Vec<RelaxRound> {
    let n = keys.len();
    let mut alpha = keys.to_vec();
    let mut rounds = Vec::with_capacity(k);
    for _ in 0..k {
        let u: Vec<f64> = alpha.iter().map(|a| a / tau).collect();
        let lse = log_sum_exp(u.iter().copied());
        let log_p: Vec<f64> = u.iter().map(|v| v - lse).collect();
        let mut mask = vec![0.0; n];
        let mut clamped = vec![false; n];
        for i in 0..n {
            let others = log_sum_exp(u.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, v)| *v));
            let m = others - lse;
            if m.is_finite() && m > MASK_FLOOR {
                mask[i] = m;
            } else {
                mask[i] = MASK_FLOOR;
                clamped[i] = true;
            }
        }
        for (a, m) in alpha.iter_mut().zip(&mask) {
            *a += m;
        }
        rounds.push(RelaxRound {
            log_p,
            mask,
            clamped,
        });
    }
    rounds
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Exact `∇_θ E_{z∼p_θ}[loss(z)] = Σ_z p(z)·loss(z)·(z − μ)` by enumeration.
///
/// Test oracle: probabilities and marginals come from the enumeration itself,
/// not from the dynamic program.
pub fn estimate_true_grad_oracle(
    theta: &[f64],
    k: usize,
    loss_per_subset: impl Fn(&SubsetMask) -> f64,
) -> Result<Vec<f64>> {
    let n = theta.len();
    let subsets = enumerate_ksubsets(n, k)?;
    let log_w: Vec<f64> = subsets
        .iter()
        .map(|z| z.indices().iter().map(|&i| theta[i]).sum())
        .collect();
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut mu = vec![0.0; n];
    for (z, wz) in subsets.iter().zip(&w) {
        for i in z.indices() {
            mu[i] += wz / total;
        }
    }
    let mut grad = vec![0.0; n];
    for (z, wz) in subsets.iter().zip(&w) {
        let p = wz / total;
        let l = loss_per_subset(z);
        for (i, g) in grad.iter_mut().enumerate() {
            let zi = if z.contains(i) { 1.0 } else { 0.0 };
            *g += p * l * (zi - mu[i]);
        }
    }
    Ok(grad)
}

/// Backward rule recorded alongside a forward sample.
#[derive(Debug, Clone)]
pub enum SampleBackward {
    /// Straight-through identity.
    Identity,
    Imle {
        theta: Vec<f64>,
        eps: Vec<f64>,
        k: usize,
        lambda: f64,
    },
    Simple {
        theta: Vec<f64>,
        k: usize,
    },
    SoftSub {
        theta: Vec<f64>,
        eps: Vec<f64>,
        k: usize,
        tau: f64,
    },
    /// Deterministic MAP without a gradient path (inference).
    Blocked,
}

impl SampleBackward {
    pub fn apply(&self, grad_z: &[f64]) -> Result<Vec<f64>> {
        match self {
            SampleBackward::Identity => Ok(ste_grad(grad_z)),
            SampleBackward::Imle {
                theta,
                eps,
                k,
                lambda,
            } => imle_grad_with_noise(theta, grad_z, *k, *lambda, eps),
            SampleBackward::Simple { theta, k } => simple_grad(theta, grad_z, *k),
            SampleBackward::SoftSub {
                theta,
                eps,
                k,
                tau,
            } => gumbel_softsub_backward(theta, eps, *k, *tau, grad_z),
            SampleBackward::Blocked => Ok(vec![0.0; grad_z.len()]),
        }
    }
}

/// Draws the forward subset for training and pairs it with its backward rule.
///
/// `lambda` overrides the configured IMLE strength (used for AIMLE's adaptive value).
pub fn sample_subset(
    theta: &[f64],
    k: usize,
    cfg: &EstimatorConfig,
    lambda: f64,
    rng: &mut RandomSource,
) -> Result<(SubsetMask, SampleBackward)> {
    let eps: Vec<f64> = gumbel_noise(rng, theta.len())
        .into_iter()
        .map(|e| e * cfg.noise_scale)
        .collect();
    let perturbed: Vec<f64> = theta.iter().zip(&eps).map(|(t, e)| t + e).collect();
    let z = topk_map(&perturbed, k)?;
    let backward = match cfg.method {
        Method::Ste => SampleBackward::Identity,
        Method::Imle | Method::Aimle => SampleBackward::Imle {
            theta: theta.to_vec(),
            eps,
            k,
            lambda,
        },
        Method::Simple => SampleBackward::Simple {
            theta: theta.to_vec(),
            k,
        },
        Method::GumbelSoftsubSt => SampleBackward::SoftSub {
            theta: theta.to_vec(),
            eps,
            k,
            tau: cfg.tau,
        },
        Method::None => return invalid("method NONE does not sample"),
    };
    Ok((z, backward))
}
