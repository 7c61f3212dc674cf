//! `gvqa`: data generation, training, evaluation, explanation export, sweeps,
//! preference fitting, reports and the study server.

mod config;
mod report;

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use gvqa_core::data::{read_dataset, QAExample};
use gvqa_core::estimators::Method;
use gvqa_core::model::{evaluate, train, Explanation, Model, ModelConfig};
use gvqa_core::nn::Checkpoint;
use gvqa_core::preference::{fit_extended_bt, read_records, tally};
use gvqa_core::study::{Study, StudyPlan};
use gvqa_core::synth::{generate, split};
use gvqa_server::{AppState, ServerOptions};
use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use config::{digest, RunConfig};
use report::{PreferenceRow, ReferenceTables, Report, SweepRow};

#[derive(Parser, Debug)]
#[command(name = "gvqa", version, about = "Interpretable graph question answering with differentiable subset sampling")]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `out_dir` from the config.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Overrides the model seed and the sweep seed list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus and its train/validation split.
    GenData,
    /// Train one model.
    Train {
        /// Overrides the configured estimator.
        #[arg(long)]
        method: Option<String>,
    },
    /// Evaluate a trained model on the validation split.
    Eval {
        #[arg(long)]
        method: Option<String>,
    },
    /// Write explanation records for the validation split.
    Explain {
        #[arg(long)]
        method: Option<String>,
    },
    /// Train and evaluate every method × k × batch size × seed cell.
    Sweep,
    /// Fit the tie-aware Bradley-Terry model to a comparison log.
    FitBt {
        /// Comparison log; defaults to the study log in the output directory.
        #[arg(long)]
        comparisons: Option<PathBuf>,
    },
    /// Summary tables, correlations and batch-size series.
    Report {
        /// Reference tables to report from instead of sweep results.
        #[arg(long)]
        fixture: Option<PathBuf>,
    },
    /// Serve the pairwise preference study.
    Serve {
        /// Study plan (TOML); the config's `[study]` table when omitted.
        #[arg(long)]
        study: Option<PathBuf>,
        /// Explanation files, one or more per method.
        #[arg(long, num_args = 1.., required = true)]
        explanations: Vec<PathBuf>,
        /// Examples the explanations refer to; the validation split when omitted.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Comparison log; created when missing.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Directory with the browser bundle.
        #[arg(long)]
        static_dir: Option<PathBuf>,
        /// Key for the export endpoint; random when omitted.
        #[arg(long)]
        operator_key: Option<String>,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
    hash: String,
}

impl Ctx {
    fn path(&self, parts: &[&str]) -> PathBuf {
        parts.iter().fold(self.out.clone(), |p, s| p.join(s))
    }

    fn data_hash(&self) -> String {
        digest(&(&self.cfg.data, &self.cfg.split))
    }

    fn model_config(&self, method: Option<&str>) -> Result<ModelConfig> {
        let mut m = self.cfg.model.clone();
        if let Some(name) = method {
            m.estimator.method = Method::parse(name)?;
        }
        Ok(m)
    }
}

fn cell_name(m: &ModelConfig) -> String {
    format!("{}-k{}-b{}-s{}", m.estimator.method, m.k, m.batch_size, m.seed)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    ensure_parent(path)?;
    gvqa_core::data::write_jsonl(path, items).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("missing input {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

#[derive(Debug, Serialize, Deserialize)]
struct DataManifest {
    config_hash: String,
    data_hash: String,
    seed: u64,
    train: usize,
    validation: usize,
}

fn make_splits(cfg: &RunConfig) -> Result<(Vec<QAExample>, Vec<QAExample>)> {
    let all = generate(&cfg.data)?;
    let n = all.len() as f64;
    let (t, v) = (cfg.split.train as f64 / n, cfg.split.validation as f64 / n);
    let mut parts = split(&all, &[t, v, (1.0 - t - v).max(0.0)], cfg.data.seed)?;
    let validation = parts.swap_remove(1);
    let train = parts.swap_remove(0);
    Ok((train, validation))
}

fn gen_data(ctx: &Ctx) -> Result<()> {
    let (train, validation) = make_splits(&ctx.cfg)?;
    write_jsonl(&ctx.path(&["data", "train.jsonl"]), &train)?;
    write_jsonl(&ctx.path(&["data", "validation.jsonl"]), &validation)?;
    write_json(
        &ctx.path(&["data", "manifest.json"]),
        &DataManifest {
            config_hash: ctx.hash.clone(),
            data_hash: ctx.data_hash(),
            seed: ctx.cfg.data.seed,
            train: train.len(),
            validation: validation.len(),
        },
    )?;
    println!("wrote {} train and {} validation examples to {}", train.len(), validation.len(), ctx.path(&["data"]).display());
    Ok(())
}

fn load_split(ctx: &Ctx, name: &str) -> Result<Vec<QAExample>> {
    let manifest: DataManifest = read_json(&ctx.path(&["data", "manifest.json"])).context("run gen-data first")?;
    if manifest.data_hash != ctx.data_hash() {
        bail!("data in {} was generated from a different config; run gen-data again", ctx.path(&["data"]).display());
    }
    let path = ctx.path(&["data", &format!("{name}.jsonl")]);
    if !path.exists() {
        bail!("missing input {}", path.display());
    }
    read_dataset(&path).with_context(|| format!("reading {}", path.display()))
}

#[derive(Debug, Serialize, Deserialize)]
struct HistoryFile {
    config_hash: String,
    seed: u64,
    cell: String,
    history: Vec<gvqa_core::model::EpochRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct MetricsFile {
    config_hash: String,
    seed: u64,
    cell: String,
    method: String,
    k: usize,
    batch_size: usize,
    metrics: gvqa_core::metrics::EvalMetrics,
    notes: Vec<String>,
}

fn train_cmd(ctx: &Ctx, method: Option<&str>) -> Result<()> {
    let mcfg = ctx.model_config(method)?;
    let cell = cell_name(&mcfg);
    let tr = load_split(ctx, "train")?;
    let va = load_split(ctx, "validation")?;
    let outcome = train(&mcfg, &tr, &va)?;
    let ckpt_path = ctx.path(&["models", &format!("{cell}.json")]);
    ensure_parent(&ckpt_path)?;
    outcome
        .model
        .to_checkpoint(&ctx.hash)?
        .save(&ckpt_path)
        .with_context(|| format!("writing {}", ckpt_path.display()))?;
    write_json(
        &ctx.path(&["models", &format!("{cell}.history.json")]),
        &HistoryFile {
            config_hash: ctx.hash.clone(),
            seed: mcfg.seed,
            cell: cell.clone(),
            history: outcome.history,
        },
    )?;
    println!("trained {cell}");
    Ok(())
}

fn load_model(ctx: &Ctx, method: Option<&str>) -> Result<(Model, String)> {
    let cell = cell_name(&ctx.model_config(method)?);
    let path = ctx.path(&["models", &format!("{cell}.json")]);
    if !path.exists() {
        bail!("missing input {}; run train first", path.display());
    }
    let ckpt = Checkpoint::load(&path)?;
    if ckpt.config_hash != ctx.hash {
        warn!("{} was trained under config {}, current config is {}", path.display(), ckpt.config_hash, ctx.hash);
    }
    Ok((Model::from_checkpoint(&ckpt)?, cell))
}

fn eval_cmd(ctx: &Ctx, method: Option<&str>) -> Result<()> {
    let (model, cell) = load_model(ctx, method)?;
    let va = load_split(ctx, "validation")?;
    let ev = evaluate(&model, &va)?;
    let cfg = model.config();
    let path = ctx.path(&["metrics", &format!("{cell}.json")]);
    write_json(
        &path,
        &MetricsFile {
            config_hash: ctx.hash.clone(),
            seed: cfg.seed,
            cell: cell.clone(),
            method: cfg.estimator.method.to_string(),
            k: cfg.k,
            batch_size: cfg.batch_size,
            metrics: ev.metrics.clone(),
            notes: gvqa_core::metrics::METRIC_NOTES.iter().map(|s| s.to_string()).collect(),
        },
    )?;
    println!(
        "{cell}: accuracy {:.4} AT-COO {:?} QT-COO {:?} -> {}",
        ev.metrics.accuracy,
        ev.metrics.at_coo,
        ev.metrics.qt_coo,
        path.display()
    );
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct ExplanationManifest {
    config_hash: String,
    seed: u64,
    cell: String,
    records: usize,
}

fn explain_cmd(ctx: &Ctx, method: Option<&str>) -> Result<()> {
    let (model, cell) = load_model(ctx, method)?;
    if !model.method().samples() {
        bail!("the {} baseline produces no explanations", model.method());
    }
    let va = load_split(ctx, "validation")?;
    let ev = evaluate(&model, &va)?;
    let path = ctx.path(&["explanations", &format!("{cell}.jsonl")]);
    write_jsonl(&path, &ev.explanations)?;
    write_json(
        &ctx.path(&["explanations", &format!("{cell}.manifest.json")]),
        &ExplanationManifest {
            config_hash: ctx.hash.clone(),
            seed: model.config().seed,
            cell,
            records: ev.explanations.len(),
        },
    )?;
    println!("wrote {} explanations to {}", ev.explanations.len(), path.display());
    Ok(())
}

fn sweep_cells(cfg: &RunConfig) -> Result<Vec<ModelConfig>> {
    let mut cells = Vec::new();
    for m in &cfg.sweep.methods {
        for &k in &cfg.sweep.k {
            for &b in &cfg.sweep.batch_sizes {
                for &s in &cfg.sweep.seeds {
                    let mut c = cfg.model.clone();
                    c.estimator.method = Method::parse(m)?;
                    c.k = k;
                    c.batch_size = b;
                    c.seed = s;
                    cells.push(c);
                }
            }
        }
    }
    Ok(cells)
}

fn sweep_cmd(ctx: &Ctx) -> Result<()> {
    let cells = sweep_cells(&ctx.cfg)?;
    let data_hash = ctx.data_hash();
    let keyed: Vec<(String, ModelConfig)> = cells
        .into_iter()
        .map(|c| (digest(&(&data_hash, &c)), c))
        .collect();
    let cell_dir = ctx.path(&["sweep", "cells"]);
    let pending: Vec<&(String, ModelConfig)> = keyed
        .iter()
        .filter(|(h, _)| !cell_dir.join(format!("{h}.json")).exists())
        .collect();
    println!("sweep: {} cells, {} already complete", keyed.len(), keyed.len() - pending.len());
    if !pending.is_empty() {
        let (tr, va) = make_splits(&ctx.cfg)?;
        pending.par_iter().try_for_each(|(hash, mcfg)| -> Result<()> {
            let name = cell_name(mcfg);
            info!("cell {name} ({hash}) started");
            let outcome = train(mcfg, &tr, &va).with_context(|| format!("training {name}"))?;
            let ev = evaluate(&outcome.model, &va)?;
            let lambda = match mcfg.estimator.method {
                Method::Aimle => outcome.history.last().and_then(|h| h.lambda),
                Method::Imle => Some(mcfg.estimator.lambda),
                _ => None,
            };
            let row = SweepRow {
                cell: hash.clone(),
                config_hash: ctx.hash.clone(),
                method: mcfg.estimator.method.to_string(),
                k: mcfg.k,
                batch_size: mcfg.batch_size,
                epochs: mcfg.epochs,
                seed: mcfg.seed,
                accuracy: ev.metrics.accuracy,
                at_coo: ev.metrics.at_coo,
                qt_coo: ev.metrics.qt_coo,
                lambda,
                tau: (mcfg.estimator.method == Method::GumbelSoftsubSt).then_some(mcfg.estimator.tau),
            };
            write_json(&cell_dir.join(format!("{hash}.json")), &row)?;
            info!("cell {name} done: accuracy {:.4}", row.accuracy);
            Ok(())
        })?;
    }
    let rows: Vec<SweepRow> = keyed
        .iter()
        .map(|(h, _)| read_json(&cell_dir.join(format!("{h}.json"))))
        .collect::<Result<_>>()?;
    write_jsonl(&ctx.path(&["sweep", "results.jsonl"]), &rows)?;
    let text = format!("config {} seed {:?}\n\n{}", ctx.hash, ctx.cfg.sweep.seeds, report::render_sweep(&rows));
    std::fs::write(ctx.path(&["sweep", "results.txt"]), &text)?;
    print!("{text}");
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct BtFile {
    config_hash: String,
    comparisons: usize,
    tie_weight: f64,
    delta: f64,
    log_likelihood: f64,
    iterations: usize,
    methods: Vec<PreferenceRow>,
}

fn fit_bt_cmd(ctx: &Ctx, comparisons: Option<PathBuf>) -> Result<()> {
    let path = comparisons.unwrap_or_else(|| ctx.path(&["study", "log.jsonl"]));
    if !path.exists() {
        bail!("missing input {}", path.display());
    }
    let records = read_records(&path)?;
    let fit = fit_extended_bt(&records, &ctx.cfg.bt)?;
    let tallies = tally(&records);
    let methods: Vec<PreferenceRow> = fit
        .theta
        .iter()
        .map(|(m, t)| {
            let c = tallies.get(m).copied().unwrap_or_default();
            PreferenceRow {
                method: m.clone(),
                favored: c.favored,
                ties: c.ties,
                unfavored: c.unfavored,
                theta: *t,
            }
        })
        .collect();
    let out = BtFile {
        config_hash: ctx.hash.clone(),
        comparisons: records.len(),
        tie_weight: fit.tie_weight,
        delta: fit.delta,
        log_likelihood: fit.log_likelihood,
        iterations: fit.iterations,
        methods,
    };
    write_json(&ctx.path(&["bt.json"]), &out)?;
    print!("{}", report::render_preferences(&out.methods));
    println!("δ = {:.4} (tie weight {:.4}, {} comparisons)", out.delta, out.tie_weight, out.comparisons);
    Ok(())
}

fn report_cmd(ctx: &Ctx, fixture: Option<PathBuf>) -> Result<()> {
    let (summaries, preferences, reference, series) = match fixture {
        Some(path) => {
            let tables: ReferenceTables = read_json(&path)?;
            report::check_reference(&tables)?;
            (tables.summaries, tables.preferences, tables.correlations, Vec::new())
        }
        None => {
            let path = ctx.path(&["sweep", "results.jsonl"]);
            if !path.exists() {
                bail!("missing input {}; run sweep first or pass --fixture", path.display());
            }
            let rows: Vec<SweepRow> =
                gvqa_core::data::read_jsonl(&path).with_context(|| format!("reading {}", path.display()))?;
            let bt_path = ctx.path(&["bt.json"]);
            let prefs = if bt_path.exists() {
                read_json::<BtFile>(&bt_path)?.methods
            } else {
                Vec::new()
            };
            (report::summarize(&rows), prefs, Vec::new(), report::batch_series(&rows))
        }
    };
    let correlations = report::correlate(&summaries, &preferences)?;
    let rep = Report {
        config_hash: ctx.hash.clone(),
        seed: ctx.cfg.model.seed,
        summaries,
        preferences,
        correlations,
        reference_correlations: reference,
        series,
    };
    write_json(&ctx.path(&["report", "report.json"]), &rep)?;
    let text = report::render(&rep);
    std::fs::write(ctx.path(&["report", "report.txt"]), &text)?;
    print!("{text}");
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn serve_cmd(
    ctx: &Ctx,
    study: Option<PathBuf>,
    explanations: Vec<PathBuf>,
    dataset: Option<PathBuf>,
    log_path: Option<PathBuf>,
    static_dir: Option<PathBuf>,
    operator_key: Option<String>,
    host: String,
    port: u16,
) -> Result<()> {
    let mut plan: StudyPlan = match study {
        Some(p) => {
            let text = std::fs::read_to_string(&p).with_context(|| format!("missing input {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("study plan {}", p.display()))?
        }
        None => ctx.cfg.study.clone(),
    };
    if plan.salt.is_empty() {
        plan.salt = format!("{:032x}", rand::random::<u128>());
        warn!("study plan has no salt; using a random one for this process");
    }
    let dataset = dataset.unwrap_or_else(|| ctx.path(&["data", "validation.jsonl"]));
    if !dataset.exists() {
        bail!("missing input {}", dataset.display());
    }
    let examples = read_dataset(&dataset).with_context(|| format!("reading {}", dataset.display()))?;
    let mut expl: Vec<Explanation> = Vec::new();
    for p in &explanations {
        if !p.exists() {
            bail!("missing input {}", p.display());
        }
        expl.extend(
            gvqa_core::data::read_jsonl::<Explanation>(p).with_context(|| format!("reading {}", p.display()))?,
        );
    }
    let log_path = log_path.unwrap_or_else(|| ctx.path(&["study", "log.jsonl"]));
    ensure_parent(&log_path)?;
    let study = Study::open(plan, examples, expl, &log_path)?;
    let operator_key = operator_key.unwrap_or_else(|| {
        let key = format!("{:032x}", rand::random::<u128>());
        println!("operator key: {key}");
        key
    });
    let addr: SocketAddr = format!("{host}:{port}").parse().context("invalid host or port")?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .with_context(|| format!("binding {addr}"))?;
        println!("serving study on http://{} (log {})", listener.local_addr()?, log_path.display());
        use std::io::Write as _;
        std::io::stdout().flush()?;
        gvqa_server::serve_on(listener, AppState { study, operator_key }, ServerOptions { static_dir }).await?;
        anyhow::Ok(())
    })
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.model.seed = seed;
        cfg.sweep.seeds = vec![seed];
    }
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            bail!("--jobs must be positive");
        }
        rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global().ok();
    }
    let out = cli.out_dir.clone().unwrap_or_else(|| PathBuf::from(&cfg.out_dir));
    let hash = cfg.hash();
    let ctx = Ctx { cfg, out, hash };
    match cli.command {
        Command::GenData => gen_data(&ctx),
        Command::Train { method } => train_cmd(&ctx, method.as_deref()),
        Command::Eval { method } => eval_cmd(&ctx, method.as_deref()),
        Command::Explain { method } => explain_cmd(&ctx, method.as_deref()),
        Command::Sweep => sweep_cmd(&ctx),
        Command::FitBt { comparisons } => fit_bt_cmd(&ctx, comparisons),
        Command::Report { fixture } => report_cmd(&ctx, fixture),
        Command::Serve {
            study,
            explanations,
            dataset,
            log,
            static_dir,
            operator_key,
            host,
            port,
        } => serve_cmd(&ctx, study, explanations, dataset, log, static_dir, operator_key, host, port),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("GVQA_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
