//! Scene-graph question answering records, token vocabularies and
//! line-delimited JSON IO.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::metrics::TokenSet;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub label: String,
    #[serde(default)]
    pub attributes: Vec<String>,
}

/// Directed labelled edge, serialized as `[src, dst, relation]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge(pub usize, pub usize, pub String);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneGraph {
    pub nodes: Vec<Node>,
    #[serde(default)]
    pub edges: Vec<Edge>,
}

impl SceneGraph {
    pub fn n(&self) -> usize {
        self.nodes.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.nodes.is_empty() {
            return invalid("scene graph has no nodes");
        }
        if let Some(i) = self.nodes.iter().position(|n| n.label.trim().is_empty()) {
            return invalid(format!("node {i} has an empty label"));
        }
        let n = self.n();
        if let Some(e) = self.edges.iter().find(|e| e.0 >= n || e.1 >= n) {
            return invalid(format!("edge ({}, {}) out of range for {n} nodes", e.0, e.1));
        }
        Ok(())
    }

    /// Row-major symmetric adjacency without self-loops.
    pub fn adjacency(&self) -> Vec<bool> {
        let n = self.n();
        let mut adj = vec![false; n * n];
        for Edge(s, d, _) in &self.edges {
            if s != d {
                adj[s * n + d] = true;
                adj[d * n + s] = true;
            }
        }
        adj
    }

    /// Sorted, de-duplicated neighbour lists of the undirected graph.
    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let n = self.n();
        let adj = self.adjacency();
        (0..n).map(|i| (0..n).filter(|&j| adj[i * n + j]).collect()).collect()
    }

    /// Raw label and attribute tokens of node `i`.
    pub fn node_tokens(&self, i: usize) -> impl Iterator<Item = &str> {
        let node = &self.nodes[i];
        std::iter::once(node.label.as_str()).chain(node.attributes.iter().map(String::as_str))
    }

    /// Normalized tokens of the given nodes.
    pub fn token_set(&self, nodes: &[usize]) -> TokenSet {
        TokenSet::from_tokens(nodes.iter().flat_map(|&i| self.node_tokens(i)))
    }

    pub fn universe(&self) -> TokenSet {
        self.token_set(&(0..self.n()).collect::<Vec<_>>())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAExample {
    pub id: String,
    pub question: Vec<String>,
    pub answer: String,
    pub graph: SceneGraph,
    /// Gold node indices that determine the answer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_in_graph: Option<bool>,
}

impl QAExample {
    pub fn validate(&self) -> Result<()> {
        if self.question.is_empty() {
            return invalid(format!("example {:?} has an empty question", self.id));
        }
        self.graph.validate()?;
        if let Some(r) = &self.rationale {
            if r.iter().any(|&i| i >= self.graph.n()) {
                return invalid(format!("example {:?} rationale out of range", self.id));
            }
        }
        Ok(())
    }

    /// The stored flag, or whether the answer occurs among the graph's tokens.
    pub fn answer_in_graph(&self) -> bool {
        self.answer_in_graph
            .unwrap_or_else(|| self.graph.universe().contains_phrase(&self.answer))
    }
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| {
            Error::InvalidArgument(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        out.push(value);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Loads and validates a dataset file.
pub fn read_dataset(path: &Path) -> Result<Vec<QAExample>> {
    let data: Vec<QAExample> = read_jsonl(path)?;
    for ex in &data {
        ex.validate()?;
    }
    Ok(data)
}

pub const UNK: &str = "<unk>";

/// Token ↔ index map. Index 0 is reserved for unknown tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Sorted, de-duplicated vocabulary over `tokens`.
    pub fn build<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Self {
        let mut sorted: Vec<&str> = tokens.into_iter().filter(|t| *t != UNK).collect();
        sorted.sort_unstable();
        sorted.dedup();
        let all = std::iter::once(UNK).chain(sorted).map(str::to_string).collect();
        Self::from_list(all).expect("sorted tokens are unique")
    }

    fn from_list(tokens: Vec<String>) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(UNK) {
            return invalid("vocabulary must start with the unknown token");
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return invalid(format!("duplicate vocabulary token {t:?}"));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 1
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied().filter(|&i| i != 0)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Self::from_list(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}
