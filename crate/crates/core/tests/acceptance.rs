//! One PASS/FAIL line per acceptance criterion.
//!
//! Runs as a plain binary. The process fails when a criterion fails unless
//! it is listed in `KNOWN_RED`.

mod common;

use std::time::{Duration, Instant};

use common::{cosine, gat_error, op_errors, oracle_linear_grad, oracle_marginals, FD_TOL};
use gvqa_core::data::QAExample;
use gvqa_core::estimators::{
    aimle_update_with_count, count_nonzero, gumbel_softsub_st, gumbel_softsub_st_with_noise, imle_grad, simple_grad, AimleState,
    EstimatorConfig, Method,
};
use gvqa_core::model::{evaluate, train, Model, ModelConfig};
use gvqa_core::preference::{fit_extended_bt, kendall, pearson, spearman, ComparisonRecord, FitOptions, Outcome};
use gvqa_core::subset::{exact_marginals, gumbel_noise, marginals_jacobian, KSubsetDistribution};
use gvqa_core::synth::{generate, split, GeneratorSpec};
use gvqa_core::RandomSource;

/// Criteria that cannot be met as stated; each has a ledger entry.
const KNOWN_RED: &[&str] = &["Correlation table reproduction"];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn normals(rng: &mut RandomSource, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| std * rng.normal()).collect()
}

fn marginal_oracle() -> Verdict {
    let start = Instant::now();
    let mut rng = RandomSource::new(1);
    let (mut worst, mut worst_sum) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let n = 1 + rng.below(12);
        let k = 1 + rng.below(n);
        let theta = normals(&mut rng, n, 2.0);
        let mu = exact_marginals(&KSubsetDistribution::from_slice(&theta, k).unwrap());
        let want = oracle_marginals(&theta, k);
        for (a, b) in mu.iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
        worst_sum = worst_sum.max((mu.iter().sum::<f64>() - k as f64).abs());
    }
    let elapsed = start.elapsed();
    verdict(
        worst <= 1e-10 && worst_sum <= 1e-10 && elapsed < Duration::from_secs(10),
        format!("max |μ−oracle| {worst:.1e}, max |Σμ−k| {worst_sum:.1e}, {elapsed:.2?}"),
    )
}

fn jacobian_checks() -> Verdict {
    let mut rng = RandomSource::new(2);
    let (mut asym, mut rows, mut fd_err) = (0.0f64, 0.0f64, 0.0f64);
    let h = 1e-5;
    for _ in 0..50 {
        let n = 2 + rng.below(9);
        let k = 1 + rng.below(n - 1);
        let theta = normals(&mut rng, n, 1.5);
        let jac = marginals_jacobian(&KSubsetDistribution::from_slice(&theta, k).unwrap());
        for i in 0..n {
            rows = rows.max(jac.row(i).iter().sum::<f64>().abs());
            for j in 0..n {
                asym = asym.max((jac.get(i, j) - jac.get(j, i)).abs());
            }
        }
        for j in 0..n {
            let shifted = |d: f64| {
                let mut t = theta.clone();
                t[j] += d;
                exact_marginals(&KSubsetDistribution::from_slice(&t, k).unwrap())
            };
            let (plus, minus) = (shifted(h), shifted(-h));
            for i in 0..n {
                fd_err = fd_err.max((jac.get(i, j) - (plus[i] - minus[i]) / (2.0 * h)).abs());
            }
        }
    }
    verdict(
        asym <= 1e-8 && rows <= 1e-8 && fd_err <= 1e-6,
        format!("asymmetry {asym:.1e}, row sums {rows:.1e}, finite differences {fd_err:.1e}"),
    )
}

fn simple_exactness() -> Verdict {
    let mut rng = RandomSource::new(3);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let n = 2 + rng.below(9);
        let k = 1 + rng.below(n - 1);
        let theta = normals(&mut rng, n, 1.0);
        let w = normals(&mut rng, n, 1.0);
        let got = simple_grad(&theta, &w, k).unwrap();
        let want = oracle_linear_grad(&theta, k, &w);
        for (a, b) in got.iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
    }
    verdict(worst <= 1e-6, format!("max deviation from enumeration {worst:.1e}"))
}

fn imle_direction() -> Verdict {
    let (n, k, lambda, draws) = (8, 3, 10.0, 10_000);
    // loss gradients scaled so that λ·∂L/∂z is on the scale of the Gumbel noise
    let mean_cosines = |scale: f64| {
        let mut rng = RandomSource::new(4);
        (0..10)
            .map(|_| {
                let theta = normals(&mut rng, n, 1.0);
                let w = normals(&mut rng, n, scale);
                let mut mean = vec![0.0; n];
                for _ in 0..draws {
                    let g = imle_grad(&theta, &w, k, lambda, &mut rng).unwrap();
                    for (m, v) in mean.iter_mut().zip(&g) {
                        *m += v / draws as f64;
                    }
                }
                cosine(&mean, &oracle_linear_grad(&theta, k, &w))
            })
            .fold(f64::INFINITY, f64::min)
    };
    let worst = mean_cosines(0.1);
    let unit = mean_cosines(1.0);
    let mut rng = RandomSource::new(40);
    let theta = normals(&mut rng, n, 1.0);
    let zero = (0..100).all(|_| imle_grad(&theta, &vec![0.0; n], k, lambda, &mut rng).unwrap().iter().all(|v| *v == 0.0));
    verdict(
        worst >= 0.8 && zero,
        format!("min cosine {worst:.3} for ∂L/∂z ~ N(0, 0.1²) ({unit:.3} at unit scale), zero in gives zero out: {zero}"),
    )
}

fn aimle_adaptation() -> Verdict {
    let cfg = EstimatorConfig::with_method(Method::Aimle);
    let mut state = AimleState::new(&cfg);
    let mut rng = RandomSource::new(5);
    // wide score gaps: small perturbations never change the MAP state
    let theta: Vec<f64> = (0..8).map(|i| 6.0 * (4.0 - i as f64)).collect();
    let batch = 32;
    let mut first_count = None;
    let start_lambda = state.lambda;
    for _ in 0..500 {
        let mut count = 0.0;
        for _ in 0..batch {
            let w = normals(&mut rng, 8, 0.1);
            let g = imle_grad(&theta, &w, 3, state.lambda, &mut rng).unwrap();
            count += count_nonzero(&g) as f64;
        }
        first_count.get_or_insert(count);
        state = aimle_update_with_count(state, count / batch as f64, &cfg);
    }
    let target = cfg.target_nonzeros;
    let in_band = (state.ema_l0 - target).abs() <= 0.5 * target;
    let silent_start = first_count == Some(0.0);
    verdict(
        silent_start && in_band && state.lambda > start_lambda,
        format!(
            "λ {start_lambda} → {:.2}, nonzero EMA {:.3} (target {target} ± 50%), all-zero gradients at the start: {silent_start}",
            state.lambda, state.ema_l0
        ),
    )
}

fn softsub_contract() -> Verdict {
    let tau = 1e-3;
    let mut rng = RandomSource::new(6);
    let (mut sum_err, mut dist, mut used) = (0.0f64, 0.0f64, 0);
    for _ in 0..2000 {
        let n = 3 + rng.below(10);
        let k = 1 + rng.below(n - 1);
        let theta = normals(&mut rng, n, 1.0);
        for t in [1.0, 0.1, tau] {
            let m = gumbel_softsub_st(&theta, k, t, &mut rng).unwrap();
            sum_err = sum_err.max((m.soft.iter().sum::<f64>() - k as f64).abs());
        }
        let eps = gumbel_noise(&mut rng, n);
        let m = gumbel_softsub_st_with_noise(&theta, k, tau, &eps).unwrap();
        // non-degenerate: perturbed scores pairwise at least 50τ apart
        let mut keys: Vec<f64> = theta.iter().zip(&eps).map(|(t, e)| t + e).collect();
        keys.sort_by(|a, b| b.total_cmp(a));
        if keys.windows(2).any(|w| w[0] - w[1] < 50.0 * tau) {
            continue;
        }
        used += 1;
        for (s, h) in m.soft.iter().zip(m.hard.to_f64()) {
            dist = dist.max((s - h).abs());
        }
    }
    verdict(
        sum_err <= 1e-6 && dist < 1e-2 && used >= 500,
        format!("max |Σsoft−k| {sum_err:.1e}, max distance to hard at τ=1e-3 {dist:.1e} over {used} draws"),
    )
}

fn autodiff() -> Verdict {
    let errors = op_errors();
    let gat = gat_error(10);
    let (name, worst) = errors.iter().copied().fold(("gat", gat), |a, b| if b.1 > a.1 { b } else { a });
    verdict(
        worst < FD_TOL,
        format!("{} ops plus a GAT layer, worst relative error {worst:.1e} ({name})", errors.len()),
    )
}

/// Model settings for the end-to-end run.
fn desk_config(method: Method) -> ModelConfig {
    ModelConfig {
        k: 5,
        embed_dim: 32,
        hidden_dim: 64,
        epochs: 50,
        batch_size: 32,
        lr: 3e-3,
        estimator: EstimatorConfig::with_method(method),
        seed: 0,
        ..ModelConfig::default()
    }
}

fn end_to_end() -> Verdict {
    let data = generate(&GeneratorSpec::default()).unwrap();
    let parts = split(&data, &[0.8, 0.2], 0).unwrap();
    let (tr, va) = (&parts[0], &parts[1]);
    assert_eq!((tr.len(), va.len()), (2000, 500));
    let start = Instant::now();
    let mut line = Vec::new();
    let mut ok = true;
    let mut accuracy = std::collections::BTreeMap::new();
    for method in [Method::Aimle, Method::Simple, Method::None, Method::Imle] {
        let model = train(&desk_config(method), tr, &[]).unwrap().model;
        let m = evaluate(&model, va).unwrap().metrics;
        accuracy.insert(method.name(), m.accuracy);
        match method {
            Method::Aimle | Method::Simple => {
                let at = m.at_coo.unwrap_or(0.0);
                ok &= m.accuracy >= 0.90 && at >= 0.80;
                line.push(format!("{} acc {:.3} AT-COO {at:.3}", method.name(), m.accuracy));
            }
            Method::None => {
                ok &= m.accuracy >= 0.90;
                line.push(format!("NONE acc {:.3}", m.accuracy));
            }
            _ => line.push(format!("IMLE acc {:.3}", m.accuracy)),
        }
        if method == Method::None {
            let elapsed = start.elapsed();
            ok &= elapsed < Duration::from_secs(15 * 60);
            line.push(format!("{elapsed:.0?}"));
        }
    }
    let ordered = accuracy["AIMLE"] >= accuracy["SIMPLE"] && accuracy["SIMPLE"] >= accuracy["IMLE"];
    line.push(format!("AIMLE ≥ SIMPLE ≥ IMLE: {ordered}"));
    verdict(ok, line.join(", "))
}

fn identity_property() -> Verdict {
    let data = generate(&GeneratorSpec::default()).unwrap();
    let examples: Vec<QAExample> = data.into_iter().take(300).collect();
    let (fit, probe) = examples.split_at(200);
    let cfg = ModelConfig {
        k: 16,
        embed_dim: 16,
        hidden_dim: 32,
        epochs: 2,
        batch_size: 32,
        lr: 3e-3,
        ..desk_config(Method::Aimle)
    };
    let mut model: Model = train(&cfg, fit, &[]).unwrap().model;
    model.set_estimator(EstimatorConfig::with_method(Method::None)).unwrap();
    let plain: Vec<Vec<f64>> = probe.iter().map(|ex| model.logits(ex).unwrap()).collect();
    let mut worst = 0.0f64;
    let methods = [Method::Aimle, Method::Simple, Method::Imle, Method::Ste, Method::GumbelSoftsubSt];
    for method in methods {
        model.set_estimator(EstimatorConfig::with_method(method)).unwrap();
        for (ex, want) in probe.iter().zip(&plain) {
            for (a, b) in model.logits(ex).unwrap().iter().zip(want) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    verdict(
        worst <= 1e-10,
        format!("{} estimators × {} examples, max logit deviation {worst:.1e}", methods.len(), probe.len()),
    )
}

fn record(a: &str, b: &str, outcome: Outcome, i: usize) -> ComparisonRecord {
    ComparisonRecord {
        session: format!("s{}", i % 10),
        method_a: a.into(),
        method_b: b.into(),
        outcome,
        example_id: format!("e{i}"),
        timestamp: i as u64,
    }
}

fn bradley_terry() -> Verdict {
    let names = ["A", "B", "C"];
    let mut sym = Vec::new();
    for (x, y) in [(0, 1), (1, 2), (0, 2)] {
        for (o, count) in [(Outcome::A, 7), (Outcome::B, 7), (Outcome::Tie, 4)] {
            for _ in 0..count {
                sym.push(record(names[x], names[y], o, sym.len()));
            }
        }
    }
    let fit = fit_extended_bt(&sym, &FitOptions::default()).unwrap();
    let sym_max = fit.theta.values().map(|t| t.abs()).fold(0.0, f64::max);

    let mut dom = Vec::new();
    for (x, y, wins, losses, ties) in [(0, 1, 8, 2, 3), (1, 2, 8, 2, 3), (0, 2, 9, 1, 2)] {
        for (o, count) in [(Outcome::A, wins), (Outcome::B, losses), (Outcome::Tie, ties)] {
            for _ in 0..count {
                dom.push(record(names[x], names[y], o, dom.len()));
            }
        }
    }
    let fit = fit_extended_bt(&dom, &FitOptions::default()).unwrap();
    let ordered = fit.theta["A"] > fit.theta["B"] && fit.theta["B"] > fit.theta["C"];

    // Davidson outcomes with unit tie weight
    let truth = [0.5, 0.1, -0.6];
    let delta: f64 = 0.8;
    let mut rng = RandomSource::new(7);
    let mut sim = Vec::new();
    for (x, y) in [(0, 1), (1, 2), (0, 2)] {
        let (ei, ej) = (f64::exp(truth[x]), f64::exp(truth[y]));
        let et = delta * f64::exp(0.5 * (truth[x] + truth[y]));
        let total = ei + ej + et;
        for _ in 0..10_000 {
            let u = rng.uniform() * total;
            let o = if u < ei {
                Outcome::A
            } else if u < ei + ej {
                Outcome::B
            } else {
                Outcome::Tie
            };
            sim.push(record(names[x], names[y], o, sim.len()));
        }
    }
    let opts = FitOptions {
        tie_weight: 1.0,
        ..FitOptions::default()
    };
    let fit = fit_extended_bt(&sim, &opts).unwrap();
    let err = names
        .iter()
        .zip(truth)
        .map(|(n, t)| (fit.theta[*n] - t).abs())
        .fold(0.0, f64::max);
    verdict(
        sym_max < 1e-6 && ordered && err <= 0.05,
        format!("symmetric max |θ| {sym_max:.1e}, dominance ordered: {ordered}, refit error {err:.3} (δ̂ {:.3})", fit.delta),
    )
}

fn correlation_table() -> Verdict {
    let theta = [0.17, -0.07, -0.1];
    let rows = [("AT-COO", [92.66, 84.47, 65.15], 0.795), ("QT-COO", [80.86, 73.56, 72.88], 0.99)];
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, x, want) in rows {
        let r = pearson(&x, &theta).unwrap().unwrap();
        let rho = spearman(&x, &theta).unwrap().unwrap();
        let tau = kendall(&x, &theta).unwrap().unwrap();
        let row_ok = (r - want).abs() <= 0.005 && (rho - 1.0).abs() < 1e-12 && (tau - 1.0).abs() < 1e-12;
        ok &= row_ok;
        parts.push(format!("{name} ({r:.5}, {rho:.3}, {tau:.3}) vs ({want}, 1, 1) {}", if row_ok { "ok" } else { "off" }));
    }
    verdict(ok, parts.join("; "))
}

fn main() {
    // libtest flags are ignored; bare arguments select criteria by substring
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        return;
    }
    let filters: Vec<String> = args.iter().filter(|a| !a.starts_with('-')).map(|a| a.to_lowercase()).collect();
    let criteria: Vec<(&str, fn() -> Verdict)> = vec![
        ("Marginal oracle equivalence", marginal_oracle),
        ("Jacobian checks", jacobian_checks),
        ("SIMPLE exactness on linear losses", simple_exactness),
        ("IMLE statistical direction", imle_direction),
        ("AIMLE adaptation", aimle_adaptation),
        ("SoftSub contract", softsub_contract),
        ("Autodiff", autodiff),
        ("Desk-scale end-to-end", end_to_end),
        ("Identity property", identity_property),
        ("Bradley-Terry", bradley_terry),
        ("Correlation table reproduction", correlation_table),
    ];
    let mut unexpected = Vec::new();
    for (name, run) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| name.to_lowercase().contains(f)) {
            continue;
        }
        let v = run();
        let tag = if v.pass { "PASS" } else { "FAIL" };
        let note = if !v.pass && KNOWN_RED.contains(&name) { " [known red]" } else { "" };
        println!("{tag} {name}: {}{note}", v.detail);
        if !v.pass && !KNOWN_RED.contains(&name) {
            unexpected.push(name);
        }
    }
    if !unexpected.is_empty() {
        eprintln!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}
