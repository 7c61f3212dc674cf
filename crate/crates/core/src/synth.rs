//! Deterministic synthetic scene-graph QA corpora with gold rationales.

use serde::{Deserialize, Serialize};

use crate::data::{Edge, Node, QAExample, SceneGraph};
use crate::error::{invalid, Result};
use crate::exec::Execution;
use crate::rng::RandomSource;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Template {
    AttributeOfObject,
    RelationTarget,
    Existence,
}

const OBJECTS: &[&str] = &[
    "dog", "cat", "man", "woman", "child", "bike", "car", "bus", "tree", "bench", "table", "chair", "cup",
    "plate", "bottle", "lamp", "window", "door", "sign", "fence", "horse", "bird", "ball", "kite",
    "umbrella", "bag", "hat", "shirt", "shoe", "clock", "boat", "train", "truck", "flower", "pot",
    "book", "phone", "laptop", "sofa", "bed",
];
const ATTRIBUTES: &[&str] = &[
    "red", "blue", "green", "yellow", "white", "black", "brown", "orange", "pink", "gray",
];
const RELATIONS: &[&str] = &["left-of", "right-of", "on", "near", "behind", "under"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSpec {
    pub num_examples: usize,
    pub min_nodes: usize,
    pub max_nodes: usize,
    pub objects: Vec<String>,
    pub attributes: Vec<String>,
    pub relations: Vec<String>,
    pub templates: Vec<Template>,
    /// Extra edges between non-leaf nodes, as a fraction of the node count.
    pub extra_edge_ratio: f64,
    pub seed: u64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        let own = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
        Self {
            num_examples: 2500,
            min_nodes: 8,
            max_nodes: 16,
            objects: own(OBJECTS),
            attributes: own(ATTRIBUTES),
            relations: own(RELATIONS),
            templates: vec![Template::AttributeOfObject, Template::RelationTarget, Template::Existence],
            extra_edge_ratio: 0.25,
            seed: 0,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.min_nodes < 2 || self.min_nodes > self.max_nodes {
            return invalid(format!(
                "node range {}..={} must be nonempty with at least 2 nodes",
                self.min_nodes, self.max_nodes
            ));
        }
        if self.templates.is_empty() {
            return invalid("no question templates");
        }
        if self.objects.len() < self.max_nodes {
            return invalid(format!(
                "{} object labels cannot give {} distinct labels per graph",
                self.objects.len(),
                self.max_nodes
            ));
        }
        if self.attributes.len() < 2 {
            return invalid("at least 2 attributes are needed for negative existence questions");
        }
        if self.relations.is_empty() {
            return invalid("no relations");
        }
        if !(0.0..=1.0).contains(&self.extra_edge_ratio) {
            return invalid("extra_edge_ratio must lie in [0, 1]");
        }
        let mut all: Vec<&String> = self.objects.iter().chain(&self.attributes).collect();
        all.sort();
        if all.windows(2).any(|w| w[0] == w[1]) {
            return invalid("object and attribute tokens must be distinct");
        }
        Ok(())
    }
}

/// Generates `spec.num_examples` examples. Output depends only on the spec.
pub fn generate(spec: &GeneratorSpec) -> Result<Vec<QAExample>> {
    spec.validate()?;
    let root = RandomSource::new(spec.seed);
    Ok(Execution::Parallel.map_indexed(spec.num_examples, |i| {
        let mut rng = root.derive(i as u64);
        generate_one(spec, i, &mut rng)
    }))
}

fn pick<'a>(xs: &'a [String], rng: &mut RandomSource) -> &'a String {
    &xs[rng.below(xs.len())]
}

fn generate_one(spec: &GeneratorSpec, i: usize, rng: &mut RandomSource) -> QAExample {
    let n = spec.min_nodes + rng.below(spec.max_nodes - spec.min_nodes + 1);
    let mut labels: Vec<usize> = (0..spec.objects.len()).collect();
    rng.shuffle(&mut labels);
    let nodes: Vec<Node> = labels[..n]
        .iter()
        .map(|&l| Node {
            label: spec.objects[l].clone(),
            attributes: vec![pick(&spec.attributes, rng).clone()],
        })
        .collect();

    // random tree, then extra edges among non-leaves so leaves stay leaves
    let mut edges = Vec::new();
    let mut degree = vec![0usize; n];
    for v in 1..n {
        let u = rng.below(v);
        edges.push(Edge(v, u, pick(&spec.relations, rng).clone()));
        degree[u] += 1;
        degree[v] += 1;
    }
    let internal: Vec<usize> = (0..n).filter(|&v| degree[v] > 1).collect();
    let extra = (spec.extra_edge_ratio * n as f64).round() as usize;
    if internal.len() > 2 {
        for _ in 0..extra {
            let a = internal[rng.below(internal.len())];
            let b = internal[rng.below(internal.len())];
            let exists = edges.iter().any(|e| (e.0 == a && e.1 == b) || (e.0 == b && e.1 == a));
            if a != b && !exists {
                edges.push(Edge(a, b, pick(&spec.relations, rng).clone()));
            }
        }
    }
    let mut graph = SceneGraph { nodes, edges };

    let template = spec.templates[i % spec.templates.len()];
    let round = i / spec.templates.len();
    let word = |s: &str| s.to_string();
    let (question, answer, rationale, in_graph) = match template {
        Template::AttributeOfObject => {
            let s = rng.below(n);
            let q = vec![word("what"), word("color"), word("is"), word("the"), graph.nodes[s].label.clone()];
            (q, graph.nodes[s].attributes[0].clone(), vec![s], true)
        }
        Template::RelationTarget => {
            let leaves: Vec<usize> = graph.neighbors().iter().enumerate().filter(|(_, nb)| nb.len() == 1).map(|(v, _)| v).collect();
            let s = leaves[rng.below(leaves.len())];
            let idx = graph.edges.iter().position(|e| e.0 == s || e.1 == s).expect("leaf has an edge");
            let t = if graph.edges[idx].0 == s { graph.edges[idx].1 } else { graph.edges[idx].0 };
            let rel = graph.edges[idx].2.clone();
            graph.edges[idx] = Edge(t, s, rel.clone());
            let q = vec![word("what"), word("is"), rel, word("the"), graph.nodes[s].label.clone()];
            (q, graph.nodes[t].label.clone(), vec![s, t], true)
        }
        Template::Existence => {
            let s = rng.below(n);
            let own = graph.nodes[s].attributes[0].clone();
            let positive = round % 2 == 0;
            let attr = if positive {
                own
            } else {
                let others: Vec<&String> = spec.attributes.iter().filter(|a| **a != own).collect();
                others[rng.below(others.len())].clone()
            };
            let q = vec![word("is"), word("there"), word("a"), attr, graph.nodes[s].label.clone()];
            (q, word(if positive { "yes" } else { "no" }), vec![s], false)
        }
    };
    QAExample {
        id: format!("syn-{i:06}"),
        question,
        answer,
        graph,
        rationale: Some(rationale),
        answer_in_graph: Some(in_graph),
    }
}

/// Re-answers a generated question using only the nodes and edges inside its
/// rationale. `None` when the rationale does not determine a unique answer.
pub fn answer_from_rationale(ex: &QAExample) -> Option<String> {
    let keep = ex.rationale.as_ref()?;
    let g = &ex.graph;
    let find = |label: &str| -> Option<usize> {
        let hits: Vec<usize> = keep.iter().copied().filter(|&v| g.nodes[v].label == label).collect();
        (hits.len() == 1).then(|| hits[0])
    };
    let q: Vec<&str> = ex.question.iter().map(String::as_str).collect();
    match q.as_slice() {
        ["what", "color", "is", "the", obj] => {
            let attrs = &g.nodes[find(obj)?].attributes;
            (attrs.len() == 1).then(|| attrs[0].clone())
        }
        ["what", "is", rel, "the", obj] => {
            let s = find(obj)?;
            let targets: Vec<usize> = g
                .edges
                .iter()
                .filter(|e| e.1 == s && e.2 == *rel && keep.contains(&e.0))
                .map(|e| e.0)
                .collect();
            (targets.len() == 1).then(|| g.nodes[targets[0]].label.clone())
        }
        ["is", "there", "a", attr, obj] => {
            let s = find(obj)?;
            Some(if g.nodes[s].attributes.iter().any(|a| a == attr) { "yes" } else { "no" }.to_string())
        }
        _ => None,
    }
}

/// Seed-deterministic partition into consecutive parts of the given sizes.
pub fn split<T: Clone>(data: &[T], fractions: &[f64], seed: u64) -> Result<Vec<Vec<T>>> {
    if fractions.is_empty() || fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return invalid("split fractions must lie in [0, 1]");
    }
    if (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return invalid("split fractions must sum to 1");
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    RandomSource::new(seed).shuffle(&mut order);
    let mut parts = Vec::with_capacity(fractions.len());
    let mut start = 0;
    let mut cum = 0.0;
    for (j, f) in fractions.iter().enumerate() {
        cum += f;
        let end = if j + 1 == fractions.len() {
            data.len()
        } else {
            ((cum * data.len() as f64).round() as usize).min(data.len())
        };
        parts.push(order[start..end].iter().map(|&i| data[i].clone()).collect());
        start = end;
    }
    Ok(parts)
}
