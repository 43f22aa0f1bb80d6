//! Gene vocabulary and the undirected, weighted gene–gene knowledge graph.
//!
//! Edges are stored in compressed sparse rows: `offsets[u]..offsets[u + 1]`
//! indexes the neighbors of `u`, sorted ascending. Every undirected edge
//! appears in both endpoint rows with the same weight.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GeneVocab {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl GeneVocab {
    pub fn new(names: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(names.len());
        for (i, n) in names.iter().enumerate() {
            if index.insert(n.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate gene name `{n}`")));
            }
        }
        Ok(GeneVocab { names, index })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn require(&self, name: &str) -> Result<usize> {
        self.index_of(name)
            .ok_or_else(|| Error::Usage(format!("gene `{name}` is not in the vocabulary")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeGraph {
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
    weights: Vec<f64>,
}

impl KnowledgeGraph {
    pub fn empty(n: usize) -> Self {
        KnowledgeGraph {
            offsets: vec![0; n + 1],
            neighbors: Vec::new(),
            weights: Vec::new(),
        }
    }

    /// Builds a symmetric graph from undirected edges. Self-loops are
    /// skipped; repeated pairs keep the largest weight.
    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (usize, usize, f64)>) -> Result<Self> {
        let mut unique: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for (u, v, w) in edges {
            if u >= n || v >= n {
                return Err(Error::Usage(format!("edge ({u}, {v}) outside a {n}-node graph")));
            }
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::Data(format!("edge ({u}, {v}) has invalid weight {w}")));
            }
            if u == v {
                continue;
            }
            let key = (u.min(v), u.max(v));
            let slot = unique.entry(key).or_insert(w);
            if w > *slot {
                *slot = w;
            }
        }
        let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for (&(u, v), &w) in &unique {
            adj[u].push((v, w));
            adj[v].push((u, w));
        }
        let mut offsets = Vec::with_capacity(n + 1);
        let mut neighbors = Vec::with_capacity(2 * unique.len());
        let mut weights = Vec::with_capacity(2 * unique.len());
        offsets.push(0);
        for mut row in adj {
            row.sort_by_key(|&(v, _)| v);
            for (v, w) in row {
                neighbors.push(v);
                weights.push(w);
            }
            offsets.push(neighbors.len());
        }
        Ok(KnowledgeGraph {
            offsets,
            neighbors,
            weights,
        })
    }

    pub fn node_count(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Number of undirected edges.
    pub fn edge_count(&self) -> usize {
        self.neighbors.len() / 2
    }

    pub fn neighbors(&self, u: usize) -> &[usize] {
        &self.neighbors[self.offsets[u]..self.offsets[u + 1]]
    }

    pub fn weights(&self, u: usize) -> &[f64] {
        &self.weights[self.offsets[u]..self.offsets[u + 1]]
    }

    pub fn degree(&self, u: usize) -> usize {
        self.offsets[u + 1] - self.offsets[u]
    }

    pub fn edge_weight(&self, u: usize, v: usize) -> Option<f64> {
        let nb = self.neighbors(u);
        nb.binary_search(&v).ok().map(|i| self.weights(u)[i])
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.neighbors(u).binary_search(&v).is_ok()
    }

    /// Undirected edges as `(u, v, w)` with `u < v`, in lexicographic order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.node_count()).flat_map(move |u| {
            self.neighbors(u)
                .iter()
                .zip(self.weights(u))
                .filter(move |(&v, _)| v > u)
                .map(move |(&v, &w)| (u, v, w))
        })
    }

    /// Row-normalized aggregation operator with a self-loop on every node.
    ///
    /// Unweighted: `A[v][u] = 1 / (deg(v) + 1)` for `u ∈ N(v) ∪ {v}`.
    /// Weighted: entries proportional to edge weight, self-loop weight 1.
    pub fn aggregation_matrix(&self, weighted: bool) -> Matrix {
        let n = self.node_count();
        let mut a = Matrix::zeros(n, n);
        for v in 0..n {
            let self_w = 1.0;
            let total: f64 = if weighted {
                self_w + self.weights(v).iter().sum::<f64>()
            } else {
                (self.degree(v) + 1) as f64
            };
            a.set(v, v, self_w / total);
            for (&u, &w) in self.neighbors(v).iter().zip(self.weights(v)) {
                let entry = if weighted { w } else { 1.0 };
                a.set(v, u, entry / total);
            }
        }
        a
    }
}

/// Result of reading an edge list against a vocabulary.
#[derive(Clone, Debug)]
pub struct EdgeListLoad {
    pub graph: KnowledgeGraph,
    /// Lines whose genes are not both in the vocabulary.
    pub dropped: usize,
}

pub fn load_edge_list(path: impl AsRef<Path>, vocab: &GeneVocab) -> Result<EdgeListLoad> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_edge_list(BufReader::new(file), vocab, &path.display().to_string())
}

pub fn parse_edge_list(reader: impl BufRead, vocab: &GeneVocab, source: &str) -> Result<EdgeListLoad> {
    let mut edges = Vec::new();
    let mut dropped = 0;
    for (lineno, line) in reader.lines().enumerate() {
        let line_no = lineno as u64 + 1;
        let line = line.map_err(|e| Error::io(source, e))?;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.trim().is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split('\t').collect();
        let parse_err = |detail: String| Error::Parse {
            path: source.to_string(),
            line: line_no,
            detail,
        };
        if fields.len() != 3 {
            return Err(parse_err(format!(
                "expected `geneA<TAB>geneB<TAB>weight`, found {} field(s)",
                fields.len()
            )));
        }
        let w: f64 = fields[2]
            .trim()
            .parse()
            .map_err(|_| parse_err(format!("invalid weight `{}`", fields[2])))?;
        if !w.is_finite() {
            return Err(parse_err(format!("non-finite weight `{}`", fields[2])));
        }
        if w < 0.0 {
            return Err(Error::Data(format!(
                "{source} line {line_no}: negative edge weight {w}"
            )));
        }
        match (vocab.index_of(fields[0].trim()), vocab.index_of(fields[1].trim())) {
            (Some(u), Some(v)) => edges.push((u, v, w)),
            _ => dropped += 1,
        }
    }
    Ok(EdgeListLoad {
        graph: KnowledgeGraph::from_edges(vocab.len(), edges)?,
        dropped,
    })
}

/// Vocabulary of every gene named in an edge list, sorted.
pub fn edge_list_vocab(path: impl AsRef<Path>) -> Result<GeneVocab> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut names = std::collections::BTreeSet::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        names.extend(line.split('\t').take(2).map(|g| g.trim().to_string()));
    }
    GeneVocab::new(names.into_iter().collect())
}

pub fn write_edge_list(path: impl AsRef<Path>, graph: &KnowledgeGraph, vocab: &GeneVocab) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for (u, v, w) in graph.edges() {
        writeln!(out, "{}\t{}\t{}", vocab.name(u), vocab.name(v), w).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TopkMode {
    /// Keep an edge when either endpoint nominates it.
    #[default]
    Union,
    /// Keep an edge only when both endpoints nominate it.
    Mutual,
}

/// Each node's top-`k` neighbors by weight, ties to the lower index.
pub fn nominations(graph: &KnowledgeGraph, k: usize) -> Vec<Vec<usize>> {
    (0..graph.node_count())
        .map(|u| {
            let mut ranked: Vec<(usize, f64)> = graph
                .neighbors(u)
                .iter()
                .copied()
                .zip(graph.weights(u).iter().copied())
                .collect();
            ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            let mut picked: Vec<usize> = ranked.into_iter().take(k).map(|(v, _)| v).collect();
            picked.sort_unstable();
            picked
        })
        .collect()
}

pub fn topk_filter(graph: &KnowledgeGraph, k: usize) -> Result<KnowledgeGraph> {
    topk_filter_with(graph, k, TopkMode::Union)
}

pub fn topk_filter_with(graph: &KnowledgeGraph, k: usize, mode: TopkMode) -> Result<KnowledgeGraph> {
    if k == 0 {
        return Err(Error::Usage("top-k filtering needs k >= 1".into()));
    }
    let noms = nominations(graph, k);
    let nominated = |u: usize, v: usize| noms[u].binary_search(&v).is_ok();
    let kept = graph.edges().filter(|&(u, v, _)| match mode {
        TopkMode::Union => nominated(u, v) || nominated(v, u),
        TopkMode::Mutual => nominated(u, v) && nominated(v, u),
    });
    KnowledgeGraph::from_edges(graph.node_count(), kept.collect::<Vec<_>>())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegreeStats {
    pub nodes: usize,
    pub edges: usize,
    pub mean_degree: f64,
    /// Lower-middle element for even node counts.
    pub median_degree: usize,
    pub max_degree: usize,
}

pub fn degree_stats(graph: &KnowledgeGraph) -> DegreeStats {
    let n = graph.node_count();
    let mut degrees: Vec<usize> = (0..n).map(|u| graph.degree(u)).collect();
    degrees.sort_unstable();
    let median_degree = if n == 0 { 0 } else { degrees[(n - 1) / 2] };
    DegreeStats {
        nodes: n,
        edges: graph.edge_count(),
        mean_degree: if n == 0 {
            0.0
        } else {
            2.0 * graph.edge_count() as f64 / n as f64
        },
        median_degree,
        max_degree: degrees.last().copied().unwrap_or(0),
    }
}

/// Breadth-first hop counts from `source`; `None` marks unreachable nodes.
pub fn hop_distances(graph: &KnowledgeGraph, source: usize) -> Result<Vec<Option<usize>>> {
    let n = graph.node_count();
    if source >= n {
        return Err(Error::Usage(format!("source node {source} not in a {n}-node graph")));
    }
    let mut dist = vec![None; n];
    dist[source] = Some(0);
    let mut queue = VecDeque::from([source]);
    while let Some(u) = queue.pop_front() {
        let d = dist[u].unwrap_or(0) + 1;
        for &v in graph.neighbors(u) {
            if dist[v].is_none() {
                dist[v] = Some(d);
                queue.push_back(v);
            }
        }
    }
    Ok(dist)
}

/// Fraction of `deg_set` within `h` hops of `source`, for `h = 1..=max_hops`.
pub fn deg_coverage(
    graph: &KnowledgeGraph,
    source: usize,
    deg_set: &[usize],
    max_hops: usize,
) -> Result<Vec<f64>> {
    if deg_set.is_empty() {
        return Err(Error::Usage("DEG coverage needs a nonempty DEG set".into()));
    }
    let dist = hop_distances(graph, source)?;
    let total = deg_set.len() as f64;
    (1..=max_hops)
        .map(|h| {
            let mut hit = 0usize;
            for &g in deg_set {
                let d = dist.get(g).ok_or_else(|| {
                    Error::Usage(format!("DEG index {g} outside a {}-node graph", dist.len()))
                })?;
                if d.is_some_and(|d| d <= h) {
                    hit += 1;
                }
            }
            Ok(hit as f64 / total)
        })
        .collect()
}
