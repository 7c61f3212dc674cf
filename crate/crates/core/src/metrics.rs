//! Answer accuracy and the two token co-occurrence measures of explanation
//! quality: answer-token co-occurrence (AT-COO) and question-token
//! co-occurrence (QT-COO).

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Function words dropped before matching question tokens against a graph.
pub const STOPWORDS: &[&str] = &[
    "a", "an", "the", "is", "are", "was", "were", "be", "what", "which", "who", "whom", "whose", "where",
    "when", "how", "why", "there", "this", "that", "these", "those", "of", "in", "on", "at", "to", "for",
    "with", "by", "from", "and", "or", "does", "do", "did", "it", "its", "has", "have", "any", "color",
    "colour", "kind", "type", "object", "thing",
];

/// Lowercase tokens split on whitespace and hyphens, with set semantics.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSet(BTreeSet<String>);

/// Lowercases and splits one raw token into words.
pub fn normalize(token: &str) -> Vec<String> {
    token
        .split(|c: char| c.is_whitespace() || c == '-')
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

impl TokenSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_tokens<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Self {
        let mut set = Self::new();
        for t in tokens {
            set.insert(t);
        }
        set
    }

    pub fn insert(&mut self, raw: &str) {
        self.0.extend(normalize(raw));
    }

    pub fn contains(&self, word: &str) -> bool {
        self.0.contains(word)
    }

    /// True when every word of `raw` is present. Empty input never matches.
    pub fn contains_phrase(&self, raw: &str) -> bool {
        let words = normalize(raw);
        !words.is_empty() && words.iter().all(|w| self.0.contains(w))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(String::as_str)
    }

    pub fn union(&self, other: &TokenSet) -> TokenSet {
        TokenSet(self.0.union(&other.0).cloned().collect())
    }
}

/// Question words kept for QT-COO: content words that occur somewhere in the
/// full graph's token universe.
pub fn relevant_question_tokens<S: AsRef<str>>(question: &[S], universe: &TokenSet) -> TokenSet {
    let mut out = TokenSet::new();
    for tok in question {
        for w in normalize(tok.as_ref()) {
            if !STOPWORDS.contains(&w.as_str()) && universe.contains(&w) {
                out.0.insert(w);
            }
        }
    }
    out
}

/// Fraction of flagged examples whose answer occurs in the explanation's
/// token set. `None` when no example is flagged.
pub fn at_coo<S: AsRef<str>>(answers: &[S], subgraphs: &[TokenSet], answer_in_graph: &[bool]) -> Result<Option<f64>> {
    if answers.len() != subgraphs.len() || answers.len() != answer_in_graph.len() {
        return invalid("at_coo inputs are not aligned");
    }
    let mut hits = 0usize;
    let mut total = 0usize;
    for ((a, s), flag) in answers.iter().zip(subgraphs).zip(answer_in_graph) {
        if *flag {
            total += 1;
            hits += usize::from(s.contains_phrase(a.as_ref()));
        }
    }
    Ok((total > 0).then(|| hits as f64 / total as f64))
}

/// Mean matched fraction of relevant question tokens. Examples with no
/// relevant tokens are skipped; `None` when all are skipped.
pub fn qt_coo(relevant: &[TokenSet], subgraphs: &[TokenSet]) -> Result<Option<f64>> {
    if relevant.len() != subgraphs.len() {
        return invalid("qt_coo inputs are not aligned");
    }
    let mut sum = 0.0;
    let mut total = 0usize;
    for (q, s) in relevant.iter().zip(subgraphs) {
        if q.is_empty() {
            continue;
        }
        total += 1;
        sum += q.iter().filter(|w| s.contains(w)).count() as f64 / q.len() as f64;
    }
    Ok((total > 0).then(|| sum / total as f64))
}

/// Exact-match rate on normalized answers. Empty input gives 0.
pub fn accuracy<S: AsRef<str>, T: AsRef<str>>(predictions: &[S], golds: &[T]) -> Result<f64> {
    if predictions.len() != golds.len() {
        return invalid("accuracy inputs are not aligned");
    }
    if predictions.is_empty() {
        return Ok(0.0);
    }
    let hits = predictions
        .iter()
        .zip(golds)
        .filter(|(p, g)| normalize(p.as_ref()) == normalize(g.as_ref()))
        .count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Metrics of one evaluation pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub examples: usize,
    pub accuracy: f64,
    pub at_coo: Option<f64>,
    pub qt_coo: Option<f64>,
    pub at_coo_denominator: usize,
    pub qt_coo_denominator: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation; zero for a single value.
    pub std: f64,
    pub count: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self {
            mean,
            std,
            count: values.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub k: usize,
    pub accuracy: Option<Summary>,
    pub at_coo: Option<Summary>,
    pub qt_coo: Option<Summary>,
    pub at_coo_denominator: usize,
    pub qt_coo_denominator: usize,
}

impl MethodSummary {
    /// Aggregates the runs of one method, typically one per seed.
    pub fn from_runs(method: &str, k: usize, runs: &[EvalMetrics]) -> Self {
        let collect = |f: &dyn Fn(&EvalMetrics) -> Option<f64>| -> Vec<f64> { runs.iter().filter_map(f).collect() };
        Self {
            method: method.to_string(),
            k,
            accuracy: Summary::of(&collect(&|r| Some(r.accuracy))),
            at_coo: Summary::of(&collect(&|r| r.at_coo)),
            qt_coo: Summary::of(&collect(&|r| r.qt_coo)),
            at_coo_denominator: runs.iter().map(|r| r.at_coo_denominator).max().unwrap_or(0),
            qt_coo_denominator: runs.iter().map(|r| r.qt_coo_denominator).max().unwrap_or(0),
        }
    }
}

/// Notes attached to every report describing how the co-occurrence inputs
/// are built.
pub const METRIC_NOTES: &[&str] = &[
    "std is taken across seeds",
    "AT-COO counts only examples whose answer occurs in the graph (yes/no answers excluded)",
    "QT-COO question tokens are non-stopword tokens that occur in the full graph",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub methods: Vec<MethodSummary>,
    pub notes: Vec<String>,
}

impl MetricsReport {
    pub fn new(methods: Vec<MethodSummary>) -> Self {
        Self {
            methods,
            notes: METRIC_NOTES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(words: &[&str]) -> TokenSet {
        TokenSet::from_tokens(words.iter().copied())
    }

    #[test]
    fn at_coo_examples() {
        assert_eq!(at_coo(&["dog"], &[set(&["dog", "bike"])], &[true]).unwrap(), Some(1.0));
        let r = at_coo(&["dog", "cat"], &[set(&["dog"]), set(&["tree"])], &[true, true]).unwrap();
        assert_eq!(r, Some(0.5));
        assert_eq!(at_coo(&["yes"], &[set(&["dog"])], &[false]).unwrap(), None);
        assert!(at_coo(&["a"], &[], &[true]).is_err());
    }

    #[test]
    fn multiword_answer_needs_every_word() {
        assert!(set(&["traffic", "light"]).contains_phrase("traffic light"));
        assert!(set(&["traffic-light"]).contains_phrase("Traffic Light"));
        assert!(!set(&["traffic"]).contains_phrase("traffic-light"));
    }

    #[test]
    fn qt_coo_examples() {
        let r = qt_coo(&[set(&["dog", "bike"])], &[set(&["dog", "man"])]).unwrap();
        assert_eq!(r, Some(0.5));
        let r = qt_coo(&[set(&["dog"])], &[set(&["dog", "man"])]).unwrap();
        assert_eq!(r, Some(1.0));
        assert_eq!(qt_coo(&[TokenSet::new()], &[set(&["dog"])]).unwrap(), None);
    }

    #[test]
    fn relevant_tokens_filter_stopwords_and_universe() {
        let universe = set(&["dog", "red", "bike"]);
        let q = ["what", "color", "is", "the", "Dog", "near-bike", "cat"];
        assert_eq!(relevant_question_tokens(&q, &universe), set(&["dog", "bike"]));
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&["a", "b"], &["a", "b"]).unwrap(), 1.0);
        assert_eq!(accuracy(&["a", "b"], &["c", "d"]).unwrap(), 0.0);
        assert_eq!(accuracy(&["a", "b"], &["a", "d"]).unwrap(), 0.5);
        assert_eq!(accuracy(&["Red"], &["red"]).unwrap(), 1.0);
    }

    #[test]
    fn summary_std() {
        let s = Summary::of(&[1.0, 3.0]).unwrap();
        assert_eq!((s.mean, s.std, s.count), (2.0, 2f64.sqrt(), 2));
        assert_eq!(Summary::of(&[4.0]).unwrap().std, 0.0);
        assert!(Summary::of(&[]).is_none());
    }
}
