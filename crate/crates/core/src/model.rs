//! The interpretable graph question-answering model: question and node
//! encoders, question-conditioned prior scores, a hard k-subset mask over
//! the scene graph, graph attention and an answer classifier.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::{QAExample, Vocabulary};
use crate::error::{invalid, Result};
use crate::estimators::{aimle_update_with_count, count_nonzero, sample_subset, AimleState, EstimatorConfig, Method, SampleBackward};
use crate::exec::Execution;
use crate::metrics::{self, EvalMetrics, TokenSet};
use crate::nn::{adam_step, scaled_dot, AdamConfig, AdamState, Checkpoint, Dense, GatLayer, GatLayerConfig, ParamId, ParamStore};
use crate::rng::RandomSource;
use crate::subset::{topk_map, SubsetMask};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub k: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub gat_layers: usize,
    pub gat_heads: usize,
    pub estimator: EstimatorConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    /// Decoupled weight decay applied by the optimizer.
    pub weight_decay: f64,
    pub seed: u64,
    pub execution: Execution,
}

/// Learning rate over the optimizer steps of a run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine from `lr` down to zero at the last step.
    #[default]
    Cosine,
}

impl LrSchedule {
    pub fn rate(self, lr: f64, step: usize, total_steps: usize) -> f64 {
        match self {
            LrSchedule::Constant => lr,
            LrSchedule::Cosine => {
                let t = step as f64 / total_steps.max(1) as f64;
                0.5 * lr * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            k: 5,
            embed_dim: 64,
            hidden_dim: 128,
            gat_layers: 2,
            gat_heads: 2,
            estimator: EstimatorConfig::default(),
            batch_size: 128,
            epochs: 50,
            lr: 1e-3,
            lr_schedule: LrSchedule::default(),
            weight_decay: 0.0,
            seed: 0,
            execution: Execution::Parallel,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return invalid("k must be at least 1");
        }
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.gat_heads == 0 || self.batch_size == 0 {
            return invalid("model dimensions and batch size must be positive");
        }
        if self.hidden_dim % self.gat_heads != 0 {
            return invalid(format!(
                "hidden_dim {} not divisible by {} heads",
                self.hidden_dim, self.gat_heads
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return invalid("lr must be a nonnegative finite number");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return invalid("weight_decay must be a nonnegative finite number");
        }
        self.estimator.validate()
    }
}

/// Which subset the forward pass uses.
pub enum Mode<'a> {
    /// Noise-free top-k of the prior scores.
    Inference,
    /// A stochastic sample with the configured estimator's backward rule.
    Training { rng: &'a mut RandomSource, lambda: f64 },
}

pub struct ForwardPass {
    pub tape: Tape,
    pub logits: Var,
    pub theta: Option<Var>,
    /// Per-node multiplier on the node features: the hard mask, or all ones.
    pub selection: Var,
    /// Selected nodes; `None` for the unmasked baseline.
    pub mask: Option<SubsetMask>,
}

/// Per-example explanation: the selected subgraph and the prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub id: String,
    pub question: Vec<String>,
    pub answer_pred: String,
    pub answer_gold: String,
    pub k: usize,
    pub node_labels_included: Vec<String>,
    pub node_labels_excluded: Vec<String>,
    pub method: Method,
    pub mask: String,
}

#[derive(Debug, Clone)]
struct Layers {
    embedding: ParamId,
    question: Dense,
    prior_embedding: ParamId,
    prior_gate: Dense,
    prior_mix: Dense,
    question_to_node: Dense,
    fuse: Dense,
    gat: Vec<GatLayer>,
    readout_query: Dense,
    readout_gate: Dense,
    hidden: Dense,
    output: Dense,
    answer_bias: ParamId,
    /// Token ids of each answer, for the tied output layer.
    answer_tokens: Vec<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct Model {
    cfg: ModelConfig,
    vocab: Vocabulary,
    answers: Vocabulary,
    store: ParamStore,
    layers: Layers,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointExtra {
    config: ModelConfig,
    vocab: Vocabulary,
    answers: Vocabulary,
}

impl Model {
    /// Builds vocabularies from `train` and initializes parameters from the seed.
    pub fn new(cfg: ModelConfig, train: &[QAExample]) -> Result<Self> {
        if train.is_empty() {
            return invalid("training set is empty");
        }
        let vocab = Vocabulary::build(train.iter().flat_map(|ex| {
            ex.question
                .iter()
                .map(String::as_str)
                .chain((0..ex.graph.n()).flat_map(|i| ex.graph.node_tokens(i)))
                .chain(std::iter::once(ex.answer.as_str()))
        }));
        let answers = Vocabulary::build(train.iter().map(|ex| ex.answer.as_str()));
        Self::with_vocabularies(cfg, vocab, answers)
    }

    pub fn with_vocabularies(cfg: ModelConfig, vocab: Vocabulary, answers: Vocabulary) -> Result<Self> {
        cfg.validate()?;
        let mut rng = RandomSource::new(cfg.seed).derive(u64::MAX);
        let mut store = ParamStore::new();
        let (e, h) = (cfg.embed_dim, cfg.hidden_dim);
        let embedding = store.add_normal("embedding", &[vocab.len(), e], 1.0, &mut rng)?;
        let question = Dense::new(&mut store, "question", e, h, &mut rng)?;
        let prior_embedding = store.add_normal("prior.embedding", &[vocab.len(), e], 1.0, &mut rng)?;
        let prior_gate = Dense::new(&mut store, "prior.gate", e, e, &mut rng)?;
        let prior_mix = Dense::new(&mut store, "prior.mix", e, 2, &mut rng)?;
        let question_to_node = Dense::new(&mut store, "question_to_node", h, e, &mut rng)?;
        let fuse = Dense::new(&mut store, "fuse", 6 * e, h, &mut rng)?;
        let gat = (0..cfg.gat_layers)
            .map(|l| {
                let gc = GatLayerConfig {
                    in_dim: h,
                    out_dim: h,
                    heads: cfg.gat_heads,
                };
                GatLayer::new(&mut store, &format!("gat{l}"), gc, &mut rng)
            })
            .collect::<Result<_>>()?;
        let readout_query = Dense::new(&mut store, "readout.query", h, h, &mut rng)?;
        let readout_gate = Dense::new(&mut store, "readout.gate", 2 * h, 1, &mut rng)?;
        let hidden = Dense::new(&mut store, "classifier.hidden", 2 * h, h, &mut rng)?;
        let output = Dense::new(&mut store, "classifier.output", h, e, &mut rng)?;
        let answer_bias = store.add_zeros("classifier.answer_bias", &[answers.len()])?;
        let answer_tokens = (0..answers.len()).map(|a| vec![vocab.id(answers.token(a))]).collect();
        Ok(Self {
            cfg,
            vocab,
            answers,
            store,
            layers: Layers {
                embedding,
                question,
                prior_embedding,
                prior_gate,
                prior_mix,
                question_to_node,
                fuse,
                gat,
                readout_query,
                readout_gate,
                hidden,
                output,
                answer_bias,
                answer_tokens,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn answers(&self) -> &Vocabulary {
        &self.answers
    }

    pub fn method(&self) -> Method {
        self.cfg.estimator.method
    }

    /// Switches the estimator while keeping parameters.
    pub fn set_estimator(&mut self, estimator: EstimatorConfig) -> Result<()> {
        estimator.validate()?;
        self.cfg.estimator = estimator;
        Ok(())
    }

    /// `tanh(dense(mean token embedding))`.
    pub fn encode_question(&self, tape: &mut Tape, question: &[String]) -> Result<Var> {
        let mean = self.question_mean(tape, question)?;
        self.question_from_mean(tape, mean)
    }

    fn question_mean(&self, tape: &mut Tape, question: &[String]) -> Result<Var> {
        self.mean_over(tape, self.layers.embedding, question)
    }

    fn mean_over(&self, tape: &mut Tape, table: ParamId, question: &[String]) -> Result<Var> {
        if question.is_empty() {
            return invalid("question is empty");
        }
        let ids = question.iter().map(|t| self.vocab.id(t)).collect();
        let table = tape.param(&self.store, table);
        let mean = tape.gather_mean(table, vec![ids])?;
        tape.reshape(mean, &[self.cfg.embed_dim])
    }

    fn question_from_mean(&self, tape: &mut Tape, mean: Var) -> Result<Var> {
        let h = self.layers.question.forward(tape, &self.store, mean)?;
        Ok(tape.tanh(h))
    }

    /// Row `i` is the mean embedding of node `i`'s label and attribute tokens.
    pub fn encode_nodes(&self, tape: &mut Tape, ex: &QAExample) -> Result<Var> {
        self.nodes_over(tape, self.layers.embedding, ex)
    }

    fn nodes_over(&self, tape: &mut Tape, table: ParamId, ex: &QAExample) -> Result<Var> {
        let groups = (0..ex.graph.n())
            .map(|i| ex.graph.node_tokens(i).map(|t| self.vocab.id(t)).collect())
            .collect();
        let table = tape.param(&self.store, table);
        tape.gather_mean(table, groups)
    }

    /// Prior score of every node: its own match with the question plus the
    /// summed positive matches of its neighbours, weighted per question.
    ///
    /// The prior reads its own token embeddings. The match is the scaled dot
    /// product between the question's mean embedding, gated per dimension by
    /// that same mean, and the node embedding.
    pub fn prior_scores(&self, tape: &mut Tape, ex: &QAExample, adj: &[bool]) -> Result<Var> {
        let n = ex.graph.n();
        let e = self.cfg.embed_dim;
        let qmean = self.mean_over(tape, self.layers.prior_embedding, &ex.question)?;
        let nodes = self.nodes_over(tape, self.layers.prior_embedding, ex)?;
        let gate = self.layers.prior_gate.forward(tape, &self.store, qmean)?;
        let ones = tape.leaf(Tensor::vector(vec![1.0; e])?);
        let gate = tape.add(gate, ones)?;
        let query = tape.mul(qmean, gate)?;
        let own = scaled_dot(tape, query, nodes)?;
        let own = tape.reshape(own, &[n, 1])?;
        let positive = tape.leaky_relu(own, 0.0);
        let a = tape.leaf(Tensor::matrix(n, n, adj.iter().map(|&b| f64::from(u8::from(b))).collect())?);
        let around = tape.matmul(a, positive)?;
        let both = tape.concat(&[own, around])?;
        let mix = self.layers.prior_mix.forward(tape, &self.store, qmean)?;
        let ones = tape.leaf(Tensor::vector(vec![1.0; 2])?);
        let mix = tape.add(mix, ones)?;
        let mix = tape.reshape(mix, &[2, 1])?;
        let theta = tape.matmul(both, mix)?;
        tape.reshape(theta, &[n])
    }

    /// Subset size actually used for a graph with `n` nodes.
    pub fn effective_k(&self, n: usize) -> usize {
        self.cfg.k.min(n)
    }

    pub fn forward(&self, ex: &QAExample, mode: Mode<'_>) -> Result<ForwardPass> {
        ex.validate()?;
        let n = ex.graph.n();
        let mut tape = Tape::new();
        let qmean = self.question_mean(&mut tape, &ex.question)?;
        let q = self.question_from_mean(&mut tape, qmean)?;
        let nodes = self.encode_nodes(&mut tape, ex)?;

        let method = self.cfg.estimator.method;
        let (theta, z, mask) = if method == Method::None {
            let ones = tape.leaf(Tensor::vector(vec![1.0; n])?);
            (None, ones, None)
        } else {
            let k = self.effective_k(n);
            if k < self.cfg.k {
                warn!("example {}: {n} nodes < k = {}, using k = {k}", ex.id, self.cfg.k);
            }
            let theta = self.prior_scores(&mut tape, ex, &ex.graph.adjacency())?;
            let scores = tape.value(theta).data().to_vec();
            let (mask, rule) = match mode {
                Mode::Inference => (topk_map(&scores, k)?, SampleBackward::Blocked),
                Mode::Training { rng, lambda } => sample_subset(&scores, k, &self.cfg.estimator, lambda, rng)?,
            };
            let z = tape.subset_sample(theta, mask.to_f64(), rule)?;
            (Some(theta), z, Some(mask))
        };
        let selected: Vec<bool> = match &mask {
            Some(m) => m.bits().to_vec(),
            None => vec![true; n],
        };
        let k_used = selected.iter().filter(|b| **b).count();
        let adj: Vec<bool> = ex
            .graph
            .adjacency()
            .into_iter()
            .enumerate()
            .map(|(idx, a)| a && selected[idx / n] && selected[idx % n])
            .collect();

        // question-conditioned node features over the masked graph
        let context = context_over(&mut tape, nodes, &adj, n)?;
        let qn = self.layers.question_to_node.forward(&mut tape, &self.store, q)?;
        let qn = tape.broadcast_rows(qn, n)?;
        let qraw = tape.broadcast_rows(qmean, n)?;
        let inter = tape.mul(nodes, qraw)?;
        let inter_ctx = tape.mul(context, qraw)?;
        let matched = matched_context(&mut tape, qmean, nodes, &adj, n)?;
        let fused_in = tape.concat(&[nodes, context, qn, inter, inter_ctx, matched])?;
        let fused = self.layers.fuse.forward(&mut tape, &self.store, fused_in)?;
        let mut h = tape.elu(fused);

        h = tape.row_scale(h, z)?;
        for (l, layer) in self.layers.gat.iter().enumerate() {
            h = layer.forward(&mut tape, &self.store, h, &adj)?;
            if l + 1 < self.layers.gat.len() {
                h = tape.elu(h);
            }
        }

        // question-conditioned sigmoid gate per node; excluded rows are zero
        let rq = self.layers.readout_query.forward(&mut tape, &self.store, q)?;
        let rq = tape.broadcast_rows(rq, n)?;
        let hq = tape.mul(h, rq)?;
        let gate_in = tape.concat(&[h, hq])?;
        let gate = self.layers.readout_gate.forward(&mut tape, &self.store, gate_in)?;
        let gate = tape.scale(gate, 0.5);
        let gate = tape.tanh(gate);
        let half = tape.leaf(Tensor::matrix(n, 1, vec![1.0; n])?);
        let gate = tape.add(gate, half)?;
        let gate = tape.scale(gate, 0.5);
        let gate = tape.reshape(gate, &[1, n])?;
        let pooled = tape.matmul(gate, h)?;
        let pooled = tape.reshape(pooled, &[self.cfg.hidden_dim])?;
        let pooled = tape.scale(pooled, 1.0 / k_used as f64);

        let joint = tape.concat(&[pooled, q])?;
        let hid = self.layers.hidden.forward(&mut tape, &self.store, joint)?;
        let hid = tape.elu(hid);
        // answers are scored against their own token embeddings
        let out = self.layers.output.forward(&mut tape, &self.store, hid)?;
        let out = tape.reshape(out, &[self.cfg.embed_dim, 1])?;
        let table = tape.param(&self.store, self.layers.embedding);
        let answer_emb = tape.gather_mean(table, self.layers.answer_tokens.clone())?;
        let logits = tape.matmul(answer_emb, out)?;
        let logits = tape.reshape(logits, &[self.answers.len()])?;
        let bias = tape.param(&self.store, self.layers.answer_bias);
        let logits = tape.add(logits, bias)?;
        Ok(ForwardPass {
            tape,
            logits,
            theta,
            selection: z,
            mask,
        })
    }

    /// Answer logits under noise-free inference.
    pub fn logits(&self, ex: &QAExample) -> Result<Vec<f64>> {
        let pass = self.forward(ex, Mode::Inference)?;
        Ok(pass.tape.value(pass.logits).data().to_vec())
    }

    pub fn predict(&self, ex: &QAExample) -> Result<(String, Option<SubsetMask>)> {
        let pass = self.forward(ex, Mode::Inference)?;
        let logits = pass.tape.value(pass.logits).data();
        let best = argmax(logits);
        Ok((self.answers.token(best).to_string(), pass.mask))
    }

    /// Explanation record for one example; `None` for the unmasked baseline.
    pub fn explain(&self, ex: &QAExample) -> Result<(String, Option<Explanation>)> {
        let (pred, mask) = self.predict(ex)?;
        let explanation = mask.map(|m| {
            let (inc, exc): (Vec<usize>, Vec<usize>) = (0..ex.graph.n()).partition(|&i| m.contains(i));
            let labels = |ix: &[usize]| ix.iter().map(|&i| ex.graph.nodes[i].label.clone()).collect();
            Explanation {
                id: ex.id.clone(),
                question: ex.question.clone(),
                answer_pred: pred.clone(),
                answer_gold: ex.answer.clone(),
                k: m.k(),
                node_labels_included: labels(&inc),
                node_labels_excluded: labels(&exc),
                method: self.method(),
                mask: m.to_bit_string(),
            }
        });
        Ok((pred, explanation))
    }

    /// Loss, parameter gradients and the nonzero count of `∂L/∂θ` for one
    /// training example.
    fn example_gradient(&self, ex: &QAExample, label: usize, rng: &mut RandomSource, lambda: f64) -> Result<(f64, Vec<Vec<f64>>, usize)> {
        let pass = self.forward(ex, Mode::Training { rng, lambda })?;
        let ForwardPass {
            mut tape, logits, theta, ..
        } = pass;
        let loss = tape.softmax_cross_entropy(logits, label)?;
        let value = tape.value(loss).item();
        let grads = tape.backward(loss)?;
        let nonzero = theta.and_then(|t| grads.get(t).map(count_nonzero)).unwrap_or(0);
        let mut acc = self.store.grad_buffers();
        grads.accumulate_into(&mut acc);
        Ok((value, acc, nonzero))
    }

    pub fn to_checkpoint(&self, config_hash: &str) -> Result<Checkpoint> {
        let extra = CheckpointExtra {
            config: self.cfg.clone(),
            vocab: self.vocab.clone(),
            answers: self.answers.clone(),
        };
        Ok(self.store.to_checkpoint(config_hash, serde_json::to_value(extra)?))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let extra: CheckpointExtra = serde_json::from_value(ckpt.extra.clone())?;
        let mut model = Self::with_vocabularies(extra.config, extra.vocab, extra.answers)?;
        model.store.load_checkpoint(ckpt)?;
        Ok(model)
    }
}

fn context_over(tape: &mut Tape, nodes: Var, adj: &[bool], n: usize) -> Result<Var> {
    let groups = (0..n)
        .map(|i| (0..n).filter(|&j| adj[i * n + j]).collect())
        .collect();
    tape.gather_mean(nodes, groups)
}

/// Row `i` sums neighbour embeddings weighted by their positive match with the question.
fn matched_context(tape: &mut Tape, qmean: Var, nodes: Var, adj: &[bool], n: usize) -> Result<Var> {
    let m = scaled_dot(tape, qmean, nodes)?;
    let m = tape.leaky_relu(m, 0.0);
    let weighted = tape.row_scale(nodes, m)?;
    let a = tape.leaf(Tensor::matrix(n, n, adj.iter().map(|&b| f64::from(u8::from(b))).collect())?);
    tape.matmul(a, weighted)
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate() {
        if *v > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub lambda: Option<f64>,
    pub validation: Option<EvalMetrics>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochRecord>,
}

/// Mini-batch cross-entropy training with Adam. Examples inside a batch are
/// processed concurrently; gradients are summed in index order, so the
/// result does not depend on the execution mode.
pub fn train(cfg: &ModelConfig, train: &[QAExample], validation: &[QAExample]) -> Result<TrainOutcome> {
    let model = Model::new(cfg.clone(), train)?;
    train_model(model, train, validation)
}

/// Continues training an existing model on `train`.
pub fn train_model(mut model: Model, train: &[QAExample], validation: &[QAExample]) -> Result<TrainOutcome> {
    if train.is_empty() {
        return invalid("training set is empty");
    }
    for ex in train {
        ex.validate()?;
    }
    let cfg = model.cfg.clone();
    let labels: Vec<usize> = train
        .iter()
        .map(|ex| {
            model
                .answers
                .get(&ex.answer)
                .ok_or_else(|| crate::Error::InvalidArgument(format!("answer {:?} not in the answer vocabulary", ex.answer)))
        })
        .collect::<Result<_>>()?;
    let mut adam = AdamConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamConfig::default()
    };
    let total_steps = cfg.epochs * train.len().div_ceil(cfg.batch_size);
    let mut step = 0;
    let mut opt = AdamState::new(&model.store);
    let mut aimle = AimleState::new(&cfg.estimator);
    let root = RandomSource::new(cfg.seed);
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        root.derive(epoch as u64).shuffle(&mut order);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let lambda = match cfg.estimator.method {
                Method::Aimle => aimle.lambda,
                _ => cfg.estimator.lambda,
            };
            let model_ref = &model;
            let results = cfg.execution.map_indexed(batch.len(), |b| {
                let idx = batch[b];
                let mut rng = root.derive(((epoch as u64) << 32) | idx as u64 | (1 << 63));
                model_ref.example_gradient(&train[idx], labels[idx], &mut rng, lambda)
            });
            let mut total = model.store.grad_buffers();
            let mut nonzero = 0usize;
            for r in results {
                let (loss, grads, nz) = r?;
                if !loss.is_finite() {
                    return Err(crate::Error::InvalidArgument(format!("non-finite loss in epoch {epoch}")));
                }
                loss_sum += loss;
                nonzero += nz;
                for (t, g) in total.iter_mut().zip(grads) {
                    if g.is_empty() {
                        continue;
                    }
                    if t.is_empty() {
                        *t = g;
                    } else {
                        for (a, b) in t.iter_mut().zip(g) {
                            *a += b;
                        }
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            for t in &mut total {
                t.iter_mut().for_each(|v| *v *= inv);
            }
            adam.lr = cfg.lr_schedule.rate(cfg.lr, step, total_steps);
            step += 1;
            adam_step(&mut model.store, &total, &mut opt, &adam)?;
            if cfg.estimator.method == Method::Aimle {
                aimle = aimle_update_with_count(aimle, nonzero as f64 * inv, &cfg.estimator);
            }
        }
        let validation_metrics = if validation.is_empty() {
            None
        } else {
            Some(evaluate(&model, validation)?.metrics)
        };
        let record = EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / train.len() as f64,
            lambda: (cfg.estimator.method == Method::Aimle).then_some(aimle.lambda),
            validation: validation_metrics,
        };
        log::info!(
            "epoch {} loss {:.4} val acc {:?}",
            record.epoch,
            record.train_loss,
            record.validation.as_ref().map(|m| m.accuracy)
        );
        history.push(record);
    }
    Ok(TrainOutcome { model, history })
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub metrics: EvalMetrics,
    pub predictions: Vec<String>,
    pub explanations: Vec<Explanation>,
}

/// Noise-free pass over `data` with aggregate metrics. The unmasked baseline
/// yields no explanations and no co-occurrence metrics.
pub fn evaluate(model: &Model, data: &[QAExample]) -> Result<Evaluation> {
    let results = model.cfg.execution.map_slice(data, |ex| model.explain(ex));
    let mut predictions = Vec::with_capacity(data.len());
    let mut explanations = Vec::new();
    for r in results {
        let (pred, exp) = r?;
        predictions.push(pred);
        explanations.extend(exp);
    }
    let golds: Vec<&str> = data.iter().map(|ex| ex.answer.as_str()).collect();
    let accuracy = metrics::accuracy(&predictions, &golds)?;
    let (mut at, mut qt, mut at_den, mut qt_den) = (None, None, 0, 0);
    if !explanations.is_empty() {
        let subgraphs: Vec<TokenSet> = data
            .iter()
            .zip(&explanations)
            .map(|(ex, e)| {
                let keep: Vec<usize> = e.mask.chars().enumerate().filter(|(_, c)| *c == '1').map(|(i, _)| i).collect();
                ex.graph.token_set(&keep)
            })
            .collect();
        let flags: Vec<bool> = data.iter().map(QAExample::answer_in_graph).collect();
        let relevant: Vec<TokenSet> = data
            .iter()
            .map(|ex| metrics::relevant_question_tokens(&ex.question, &ex.graph.universe()))
            .collect();
        at = metrics::at_coo(&golds, &subgraphs, &flags)?;
        qt = metrics::qt_coo(&relevant, &subgraphs)?;
        at_den = flags.iter().filter(|f| **f).count();
        qt_den = relevant.iter().filter(|r| !r.is_empty()).count();
    }
    Ok(Evaluation {
        metrics: EvalMetrics {
            examples: data.len(),
            accuracy,
            at_coo: at,
            qt_coo: qt,
            at_coo_denominator: at_den,
            qt_coo_denominator: qt_den,
        },
        predictions,
        explanations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::subset::{marginals_jacobian, KSubsetDistribution};
    use crate::synth::{generate, GeneratorSpec};

    fn corpus(n: usize) -> Vec<QAExample> {
        generate(&GeneratorSpec {
            num_examples: n,
            min_nodes: 5,
            max_nodes: 9,
            ..GeneratorSpec::default()
        })
        .unwrap()
    }

    fn small(method: Method, k: usize) -> ModelConfig {
        ModelConfig {
            k,
            embed_dim: 8,
            hidden_dim: 8,
            epochs: 2,
            batch_size: 8,
            lr: 0.01,
            estimator: EstimatorConfig::with_method(method),
            ..ModelConfig::default()
        }
    }

    fn values(tape: &Tape, v: Var) -> Vec<f64> {
        tape.value(v).data().to_vec()
    }

    #[test]
    fn question_encoding_is_deterministic_and_order_free() {
        let data = corpus(12);
        let model = Model::new(small(Method::Aimle, 3), &data).unwrap();
        let q = &data[1].question;
        let mut rev = q.clone();
        rev.reverse();
        let mut tape = Tape::new();
        let a = model.encode_question(&mut tape, q).unwrap();
        let b = model.encode_question(&mut tape, q).unwrap();
        let c = model.encode_question(&mut tape, &rev).unwrap();
        assert_eq!(values(&tape, a), values(&tape, b));
        for (x, y) in values(&tape, a).iter().zip(values(&tape, c)) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(model.encode_question(&mut tape, &[]).is_err());
    }

    #[test]
    fn prior_of_a_node_depends_only_on_its_own_adjacency_row() {
        let data = corpus(12);
        let model = Model::new(small(Method::Simple, 3), &data).unwrap();
        for ex in &data {
            let n = ex.graph.n();
            let full = ex.graph.adjacency();
            let mut cut = full.clone();
            cut[..n].iter_mut().for_each(|b| *b = false);
            let mut tape = Tape::new();
            let none = vec![false; n * n];
            let iso = model.prior_scores(&mut tape, ex, &none).unwrap();
            let all = model.prior_scores(&mut tape, ex, &full).unwrap();
            let part = model.prior_scores(&mut tape, ex, &cut).unwrap();
            let (iso, all, part) = (values(&tape, iso), values(&tape, all), values(&tape, part));
            assert!((part[0] - iso[0]).abs() < 1e-12);
            for i in 1..n {
                assert!((part[i] - all[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn full_subset_matches_unmasked_baseline() {
        let data = corpus(100);
        for method in [Method::Aimle, Method::Simple, Method::Imle] {
            let mut model = Model::new(small(method, 64), &data).unwrap();
            let masked: Vec<Vec<f64>> = data.iter().map(|ex| model.logits(ex).unwrap()).collect();
            model.set_estimator(EstimatorConfig::with_method(Method::None)).unwrap();
            for (ex, m) in data.iter().zip(&masked) {
                let plain = model.logits(ex).unwrap();
                for (a, b) in m.iter().zip(&plain) {
                    assert!((a - b).abs() <= 1e-10);
                }
            }
        }
    }

    #[test]
    fn inference_is_deterministic() {
        let data = corpus(10);
        let model = Model::new(small(Method::Aimle, 3), &data).unwrap();
        for ex in &data {
            assert_eq!(model.logits(ex).unwrap(), model.logits(ex).unwrap());
            assert_eq!(model.predict(ex).unwrap(), model.predict(ex).unwrap());
        }
    }

    #[test]
    fn simple_gradient_is_jacobian_times_upstream() {
        let data = corpus(10);
        let model = Model::new(small(Method::Simple, 3), &data).unwrap();
        for (i, ex) in data.iter().enumerate() {
            let mut rng = RandomSource::new(i as u64);
            let pass = model.forward(ex, Mode::Training { rng: &mut rng, lambda: 1.0 }).unwrap();
            let ForwardPass {
                mut tape,
                logits,
                theta,
                selection,
                ..
            } = pass;
            let theta = theta.unwrap();
            let scores = values(&tape, theta);
            let loss = tape.softmax_cross_entropy(logits, 0).unwrap();
            let grads = tape.backward(loss).unwrap();
            let upstream = grads.get(selection).unwrap();
            let dist = KSubsetDistribution::from_slice(&scores, 3).unwrap();
            let want = marginals_jacobian(&dist).mul_vec(upstream);
            for (a, b) in grads.get(theta).unwrap().iter().zip(&want) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let data = corpus(16);
        let cfg = ModelConfig { lr: 0.0, ..small(Method::Aimle, 3) };
        let before = Model::new(cfg.clone(), &data).unwrap();
        let after = train(&cfg, &data, &[]).unwrap().model;
        for ((_, a), (_, b)) in before.params().iter().zip(after.params().iter()) {
            assert_eq!(a.tensor.data(), b.tensor.data());
        }
    }

    #[test]
    fn training_is_reproducible_across_execution_modes() {
        let data = corpus(24);
        let (tr, va) = data.split_at(16);
        for method in [Method::Aimle, Method::Simple, Method::None] {
            let cfg = small(method, 3);
            let a = train(&cfg, tr, va).unwrap();
            let b = train(
                &ModelConfig {
                    execution: Execution::Sequential,
                    ..cfg.clone()
                },
                tr,
                va,
            )
            .unwrap();
            assert_eq!(a.history, b.history);
            for ((_, x), (_, y)) in a.model.params().iter().zip(b.model.params().iter()) {
                assert_eq!(x.tensor.data(), y.tensor.data());
            }
            let other = train(&ModelConfig { seed: 9, ..cfg }, tr, va).unwrap();
            assert_ne!(
                a.model.params().iter().next().unwrap().1.tensor.data(),
                other.model.params().iter().next().unwrap().1.tensor.data()
            );
        }
    }

    #[test]
    fn explanations_hold_min_k_n_nodes() {
        let data = corpus(30);
        for k in [1, 3, 7, 20] {
            let model = Model::new(small(Method::Aimle, k), &data).unwrap();
            for ex in &data {
                let (_, e) = model.explain(ex).unwrap();
                let e = e.unwrap();
                let want = k.min(ex.graph.n());
                assert_eq!(e.k, want);
                assert_eq!(e.node_labels_included.len(), want);
                assert_eq!(e.node_labels_included.len() + e.node_labels_excluded.len(), ex.graph.n());
                assert_eq!(e.mask.chars().filter(|c| *c == '1').count(), want);
            }
        }
        let baseline = Model::new(small(Method::None, 3), &data).unwrap();
        assert!(baseline.explain(&data[0]).unwrap().1.is_none());
    }

    #[test]
    fn checkpoint_round_trip_preserves_logits() {
        let data = corpus(16);
        let model = train(&small(Method::Simple, 3), &data, &[]).unwrap().model;
        let ckpt = model.to_checkpoint("abc").unwrap();
        let back = Model::from_checkpoint(&ckpt).unwrap();
        assert_eq!(back.config(), model.config());
        for ex in &data {
            assert_eq!(back.logits(ex).unwrap(), model.logits(ex).unwrap());
        }
    }

    #[test]
    fn excluded_nodes_do_not_reach_the_answer() {
        let data = corpus(60);
        let model = Model::new(small(Method::Aimle, 3), &data).unwrap();
        let attrs: Vec<String> = GeneratorSpec::default().attributes;
        let mut checked = 0;
        for ex in &data {
            let mask = model.predict(ex).unwrap().1.unwrap();
            let Some(out) = (0..ex.graph.n()).find(|&i| !mask.contains(i)) else { continue };
            for attr in &attrs {
                let mut edited = ex.clone();
                edited.graph.nodes[out].attributes = vec![attr.clone()];
                if model.predict(&edited).unwrap().1.unwrap() != mask {
                    continue;
                }
                let (a, b) = (model.logits(ex).unwrap(), model.logits(&edited).unwrap());
                for (x, y) in a.iter().zip(&b) {
                    assert!((x - y).abs() < 1e-12);
                }
                checked += 1;
            }
        }
        assert!(checked > 100);
    }
}
