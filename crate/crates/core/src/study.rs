//! Blind pairwise-comparison study: session tokens, per-session pair
//! assignment, durable judgment log and export.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{QAExample, SceneGraph};
use crate::error::{invalid, Error, Result};
use crate::model::Explanation;
use crate::preference::{ComparisonRecord, Outcome};
use crate::rng::RandomSource;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyPlan {
    pub comparisons_per_session: usize,
    /// Method pairs to cover; empty means every pair of available methods.
    pub method_pairs: Vec<(String, String)>,
    /// Restricts the example pool; empty uses every example.
    pub examples: Vec<String>,
    pub seed: u64,
    /// Salt for hashing participant identifiers.
    pub salt: String,
}

impl Default for StudyPlan {
    fn default() -> Self {
        Self {
            comparisons_per_session: 18,
            method_pairs: Vec::new(),
            examples: Vec::new(),
            seed: 0,
            salt: String::new(),
        }
    }
}

/// Salted SHA-256 of a participant identifier, hex encoded.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SessionToken(String);

impl SessionToken {
    pub fn derive(salt: &str, participant: &str) -> Self {
        let mut h = Sha256::new();
        h.update((salt.len() as u64).to_le_bytes());
        h.update(salt.as_bytes());
        h.update(participant.as_bytes());
        Self(hex::encode(h.finalize()))
    }

    pub fn parse(s: &str) -> Result<Self> {
        if s.len() == 64 && s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b)) {
            Ok(Self(s.to_string()))
        } else {
            Err(Error::NotFound(format!("session {s:?}")))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    fn stream(&self) -> u64 {
        let bytes = hex::decode(&self.0[..16]).unwrap_or_default();
        bytes.iter().fold(0u64, |acc, b| (acc << 8) | u64::from(*b))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Assignment {
    pair_id: String,
    methods: (String, String),
    example_id: String,
    /// Whether the second method is shown on the left.
    swapped: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleView {
    pub id: String,
    pub question: String,
    pub gold_answer: String,
    pub graph: SceneGraph,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExplanationView {
    pub answer_pred: String,
    /// Indices of the selected nodes.
    pub included: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairPayload {
    pub pair_id: String,
    /// 1-based position within the session.
    pub index: usize,
    pub total: usize,
    pub example: ExampleView,
    /// Shown on the left, answered as `A`.
    pub explanation_a: ExplanationView,
    /// Shown on the right, answered as `B`.
    pub explanation_b: ExplanationView,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NextPair {
    Pair(Box<PairPayload>),
    Done { done: bool },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Acknowledgment {
    pub recorded: bool,
    pub remaining: usize,
}

struct Assets {
    plan: StudyPlan,
    pairs: Vec<(String, String)>,
    examples: BTreeMap<String, QAExample>,
    explanations: BTreeMap<String, BTreeMap<String, Explanation>>,
    /// Eligible example ids per pair, sorted.
    eligible: Vec<Vec<String>>,
}

struct SessionState {
    assignments: Vec<Assignment>,
    answered: Vec<bool>,
}

impl SessionState {
    fn cursor(&self) -> Option<usize> {
        self.answered.iter().position(|a| !a)
    }
}

struct Inner {
    sessions: HashMap<SessionToken, SessionState>,
    log: File,
    records: Vec<ComparisonRecord>,
}

/// Shared study state. Assets are immutable; sessions and the log sit
/// behind one writer lock.
#[derive(Clone)]
pub struct Study {
    assets: Arc<Assets>,
    inner: Arc<Mutex<Inner>>,
    log_path: PathBuf,
}

fn included_nodes(e: &Explanation) -> Vec<usize> {
    e.mask
        .bytes()
        .enumerate()
        .filter(|(_, b)| *b == b'1')
        .map(|(i, _)| i)
        .collect()
}

impl Study {
    /// Opens a study, replaying any existing log at `log_path`. A trailing
    /// partial line left by an interrupted write is discarded.
    pub fn open(
        plan: StudyPlan,
        examples: Vec<QAExample>,
        explanations: Vec<Explanation>,
        log_path: &Path,
    ) -> Result<Self> {
        if plan.comparisons_per_session == 0 {
            return invalid("comparisons_per_session must be positive");
        }
        let examples: BTreeMap<String, QAExample> = examples.into_iter().map(|e| (e.id.clone(), e)).collect();
        let mut by_method: BTreeMap<String, BTreeMap<String, Explanation>> = BTreeMap::new();
        for e in explanations {
            if e.mask.len() != examples.get(&e.id).map_or(usize::MAX, |x| x.graph.n()) {
                return invalid(format!("explanation for {:?} does not match a known example graph", e.id));
            }
            by_method.entry(e.method.name().to_string()).or_default().insert(e.id.clone(), e);
        }
        let pairs = if plan.method_pairs.is_empty() {
            let names: Vec<&String> = by_method.keys().collect();
            let mut out = Vec::new();
            for i in 0..names.len() {
                for j in i + 1..names.len() {
                    out.push((names[i].clone(), names[j].clone()));
                }
            }
            out
        } else {
            plan.method_pairs.clone()
        };
        if pairs.is_empty() {
            return invalid("the study needs at least two methods with explanations");
        }
        let pool: BTreeSet<&String> = plan.examples.iter().collect();
        let mut eligible = Vec::new();
        for (a, b) in &pairs {
            if a == b {
                return invalid(format!("pair compares {a} with itself"));
            }
            let (ea, eb) = match (by_method.get(a), by_method.get(b)) {
                (Some(x), Some(y)) => (x, y),
                _ => return invalid(format!("no explanations for pair ({a}, {b})")),
            };
            let ids: Vec<String> = ea
                .iter()
                .filter(|(id, _)| pool.is_empty() || pool.contains(id))
                .filter_map(|(id, x)| {
                    let y = eb.get(id)?;
                    (included_nodes(x).len() == included_nodes(y).len()).then(|| id.clone())
                })
                .collect();
            if ids.len() < plan.comparisons_per_session {
                return invalid(format!(
                    "pair ({a}, {b}) has {} equal-size examples, {} needed",
                    ids.len(),
                    plan.comparisons_per_session
                ));
            }
            eligible.push(ids);
        }
        let assets = Arc::new(Assets {
            plan,
            pairs,
            examples,
            explanations: by_method,
            eligible,
        });

        let mut log = OpenOptions::new().read(true).append(true).create(true).open(log_path)?;
        let mut text = String::new();
        log.read_to_string(&mut text)?;
        if !text.is_empty() && !text.ends_with('\n') {
            let keep = text.rfind('\n').map_or(0, |p| p + 1);
            log.set_len(keep as u64)?;
            log.seek(SeekFrom::End(0))?;
            text.truncate(keep);
        }
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let r: ComparisonRecord = serde_json::from_str(line)
                .map_err(|e| Error::InvalidArgument(format!("{}:{}: {e}", log_path.display(), i + 1)))?;
            records.push(r);
        }
        let study = Self {
            assets,
            inner: Arc::new(Mutex::new(Inner {
                sessions: HashMap::new(),
                log,
                records: Vec::new(),
            })),
            log_path: log_path.to_path_buf(),
        };
        {
            let mut inner = study.lock();
            for r in records {
                let token = SessionToken::parse(&r.session)?;
                let state = inner
                    .sessions
                    .entry(token.clone())
                    .or_insert_with(|| study.assign(&token));
                let slot = state
                    .assignments
                    .iter()
                    .position(|a| a.example_id == r.example_id)
                    .ok_or_else(|| Error::InvalidArgument(format!("log record for {:?} does not match the plan", r.example_id)))?;
                state.answered[slot] = true;
                inner.records.push(r);
            }
        }
        Ok(study)
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn plan(&self) -> &StudyPlan {
        &self.assets.plan
    }

    pub fn log_path(&self) -> &Path {
        &self.log_path
    }

    pub fn open_session(&self, participant: &str) -> SessionToken {
        SessionToken::derive(&self.assets.plan.salt, participant)
    }

    /// Deterministic schedule for a session: method pairs cycle through a
    /// shuffled order and no example repeats.
    fn assign(&self, token: &SessionToken) -> SessionState {
        let a = &self.assets;
        let mut rng = RandomSource::new(a.plan.seed).derive(token.stream());
        let mut order: Vec<usize> = (0..a.pairs.len()).collect();
        rng.shuffle(&mut order);
        let mut used = BTreeSet::new();
        let mut assignments = Vec::with_capacity(a.plan.comparisons_per_session);
        for slot in 0..a.plan.comparisons_per_session {
            let p = order[slot % order.len()];
            let candidates: Vec<&String> = a.eligible[p].iter().filter(|id| !used.contains(*id)).collect();
            let example_id = candidates[rng.below(candidates.len())].clone();
            used.insert(example_id.clone());
            let mut h = Sha256::new();
            h.update(token.as_str().as_bytes());
            h.update((slot as u64).to_le_bytes());
            assignments.push(Assignment {
                pair_id: hex::encode(&h.finalize()[..8]),
                methods: a.pairs[p].clone(),
                example_id,
                swapped: rng.uniform() < 0.5,
            });
        }
        let answered = vec![false; assignments.len()];
        SessionState { assignments, answered }
    }

    fn payload(&self, state: &SessionState, slot: usize) -> PairPayload {
        let a = &self.assets;
        let asg = &state.assignments[slot];
        let ex = &a.examples[&asg.example_id];
        let view = |method: &str| {
            let e = &a.explanations[method][&asg.example_id];
            ExplanationView {
                answer_pred: e.answer_pred.clone(),
                included: included_nodes(e),
            }
        };
        let (first, second) = (view(&asg.methods.0), view(&asg.methods.1));
        let (left, right) = if asg.swapped { (second, first) } else { (first, second) };
        PairPayload {
            pair_id: asg.pair_id.clone(),
            index: slot + 1,
            total: state.assignments.len(),
            example: ExampleView {
                id: ex.id.clone(),
                question: ex.question.join(" "),
                gold_answer: ex.answer.clone(),
                graph: ex.graph.clone(),
            },
            explanation_a: left,
            explanation_b: right,
        }
    }

    /// Current unanswered pair, or the completed signal.
    pub fn next_pair(&self, token: &SessionToken) -> NextPair {
        let mut inner = self.lock();
        let state = inner.sessions.entry(token.clone()).or_insert_with(|| self.assign(token));
        match state.cursor() {
            Some(slot) => NextPair::Pair(Box::new(self.payload(state, slot))),
            None => NextPair::Done { done: true },
        }
    }

    /// Records a judgment on the session's current pair. The record is
    /// synced to disk before this returns.
    pub fn record_choice(&self, token: &SessionToken, pair_id: &str, outcome: Outcome) -> Result<Acknowledgment> {
        let mut guard = self.lock();
        let inner = &mut *guard;
        let state = inner.sessions.entry(token.clone()).or_insert_with(|| self.assign(token));
        let slot = state
            .assignments
            .iter()
            .position(|a| a.pair_id == pair_id)
            .ok_or_else(|| Error::Conflict(format!("pair {pair_id:?} was not issued to this session")))?;
        if state.answered[slot] {
            return Err(Error::Conflict(format!("pair {pair_id:?} already answered")));
        }
        if state.cursor() != Some(slot) {
            return Err(Error::Conflict(format!("pair {pair_id:?} was not issued yet")));
        }
        let asg = &state.assignments[slot];
        let outcome = match (outcome, asg.swapped) {
            (Outcome::A, true) => Outcome::B,
            (Outcome::B, true) => Outcome::A,
            (o, _) => o,
        };
        let timestamp = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_millis() as u64);
        let record = ComparisonRecord {
            session: token.as_str().to_string(),
            method_a: asg.methods.0.clone(),
            method_b: asg.methods.1.clone(),
            outcome,
            example_id: asg.example_id.clone(),
            timestamp,
        };
        let mut line = serde_json::to_string(&record)?;
        line.push('\n');
        inner.log.write_all(line.as_bytes())?;
        inner.log.sync_data()?;
        state.answered[slot] = true;
        let remaining = state.answered.iter().filter(|a| !**a).count();
        inner.records.push(record);
        Ok(Acknowledgment {
            recorded: true,
            remaining,
        })
    }

    /// Every record in append order.
    pub fn export(&self) -> Vec<ComparisonRecord> {
        self.lock().records.clone()
    }

    /// The log as JSON lines.
    pub fn export_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in self.lock().records.iter() {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }
}
