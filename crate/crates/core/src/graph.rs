//! Directed graphs over `n` labelled nodes: the ground-truth DAGs of the
//! environments and the (possibly cyclic) epistemic estimates edited by the
//! agent.

use std::collections::{BTreeSet, BinaryHeap};
use std::cmp::Reverse;
use std::fmt;
use std::io::{BufRead, Write};
use std::ops::Deref;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest node count accepted by [`all_dags`].
pub const MAX_ENUMERATION_NODES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
}

impl Edge {
    pub fn new(from: usize, to: usize) -> Self {
        Edge { from, to }
    }

    pub fn reversed(self) -> Self {
        Edge {
            from: self.to,
            to: self.from,
        }
    }
}

impl fmt::Display for Edge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->{}", self.from, self.to)
    }
}

/// A directed graph without self-loops and with at most one edge per node
/// pair. Longer cycles are allowed; see [`Dag`] for the acyclic variant.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DiGraph {
    n: usize,
    edges: BTreeSet<Edge>,
}

impl DiGraph {
    pub fn empty(n: usize) -> Self {
        DiGraph {
            n,
            edges: BTreeSet::new(),
        }
    }

    pub fn from_edges<I>(n: usize, edges: I) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, usize)>,
    {
        let mut g = DiGraph::empty(n);
        for (from, to) in edges {
            g.check_pair(from, to)?;
            if g.has_edge(to, from) {
                return Err(Error::OppositeEdges(from, to));
            }
            g.edges.insert(Edge::new(from, to));
        }
        Ok(g)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &BTreeSet<Edge> {
        &self.edges
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn has_edge(&self, from: usize, to: usize) -> bool {
        self.edges.contains(&Edge::new(from, to))
    }

    pub fn parents(&self, node: usize) -> impl Iterator<Item = usize> + '_ {
        self.edges.iter().filter(move |e| e.to == node).map(|e| e.from)
    }

    fn check_pair(&self, from: usize, to: usize) -> Result<()> {
        for node in [from, to] {
            if node >= self.n {
                return Err(Error::NodeOutOfRange { node, n: self.n });
            }
        }
        if from == to {
            return Err(Error::SelfLoop(from));
        }
        Ok(())
    }

    /// Kahn's algorithm, always releasing the lowest-index ready node first.
    /// Returns `None` when the graph has a cycle.
    pub fn topological_order(&self) -> Option<Vec<usize>> {
        let mut indegree = vec![0usize; self.n];
        let mut children = vec![Vec::new(); self.n];
        for e in &self.edges {
            indegree[e.to] += 1;
            children[e.from].push(e.to);
        }
        let mut ready: BinaryHeap<Reverse<usize>> = (0..self.n)
            .filter(|&v| indegree[v] == 0)
            .map(Reverse)
            .collect();
        let mut order = Vec::with_capacity(self.n);
        while let Some(Reverse(v)) = ready.pop() {
            order.push(v);
            for &c in &children[v] {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    ready.push(Reverse(c));
                }
            }
        }
        (order.len() == self.n).then_some(order)
    }

    pub fn is_acyclic(&self) -> bool {
        self.topological_order().is_some()
    }

    /// Applies an add/delete/reverse edit. Edits that do not apply leave the
    /// graph unchanged: deleting or reversing an absent edge, and adding an
    /// edge whose pair is already connected in either direction. Cycles
    /// through three or more nodes may be created.
    pub fn apply(&mut self, kind: StructureKind, from: usize, to: usize) -> Result<()> {
        self.check_pair(from, to)?;
        let edge = Edge::new(from, to);
        match kind {
            StructureKind::Add => {
                if !self.edges.contains(&edge.reversed()) {
                    self.edges.insert(edge);
                }
            }
            StructureKind::Delete => {
                self.edges.remove(&edge);
            }
            StructureKind::Reverse => {
                if self.edges.remove(&edge) {
                    self.edges.insert(edge.reversed());
                }
            }
        }
        Ok(())
    }
}

impl fmt::Display for DiGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, e) in self.edges.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{e}")?;
        }
        write!(f, "]")
    }
}

/// A directed graph verified to be acyclic.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Dag(DiGraph);

impl Dag {
    pub fn new(graph: DiGraph) -> Result<Self> {
        if graph.is_acyclic() {
            Ok(Dag(graph))
        } else {
            Err(Error::Cyclic)
        }
    }

    pub fn from_edges<I>(n: usize, edges: I) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, usize)>,
    {
        Dag::new(DiGraph::from_edges(n, edges)?)
    }

    pub fn empty(n: usize) -> Self {
        Dag(DiGraph::empty(n))
    }

    pub fn into_graph(self) -> DiGraph {
        self.0
    }

    pub fn as_graph(&self) -> &DiGraph {
        &self.0
    }

    /// Topological order with ties broken by node index.
    pub fn order(&self) -> Vec<usize> {
        self.0
            .topological_order()
            .expect("Dag invariant: graph is acyclic")
    }
}

impl Deref for Dag {
    type Target = DiGraph;

    fn deref(&self) -> &DiGraph {
        &self.0
    }
}

impl fmt::Display for Dag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StructureKind {
    Add,
    Delete,
    Reverse,
}

impl StructureKind {
    pub const ALL: [StructureKind; 3] = [StructureKind::Add, StructureKind::Delete, StructureKind::Reverse];

    pub fn name(self) -> &'static str {
        match self {
            StructureKind::Add => "add",
            StructureKind::Delete => "delete",
            StructureKind::Reverse => "reverse",
        }
    }
}

/// Functional form of [`DiGraph::apply`].
pub fn apply_structure_action(
    graph: &DiGraph,
    kind: StructureKind,
    from: usize,
    to: usize,
) -> Result<DiGraph> {
    let mut out = graph.clone();
    out.apply(kind, from, to)?;
    Ok(out)
}

/// Number of unordered node pairs, `n(n-1)/2`.
pub fn pair_count(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

/// All pairs `(i, j)` with `i < j`, in lexicographic order.
pub fn node_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .collect()
}

/// Per-pair graph vector: 0 for no edge, 0.5 for `i -> j`, 1 for `j -> i`
/// (with `i < j`), pairs in lexicographic order.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphEncoding(Vec<f64>);

impl GraphEncoding {
    pub const NONE: f64 = 0.0;
    pub const FORWARD: f64 = 0.5;
    pub const BACKWARD: f64 = 1.0;

    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(&bad) = values
            .iter()
            .find(|&&v| v != Self::NONE && v != Self::FORWARD && v != Self::BACKWARD)
        {
            return Err(Error::EncodingValue(bad));
        }
        Ok(GraphEncoding(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn encode(graph: &DiGraph) -> GraphEncoding {
    let mut out = Vec::with_capacity(pair_count(graph.n));
    encode_into(graph, &mut out);
    GraphEncoding(out)
}

pub(crate) fn encode_into(graph: &DiGraph, out: &mut Vec<f64>) {
    for (i, j) in node_pairs(graph.n) {
        let fwd = graph.has_edge(i, j);
        let back = graph.has_edge(j, i);
        out.push(match (fwd, back) {
            (false, false) => GraphEncoding::NONE,
            (true, false) => GraphEncoding::FORWARD,
            (false, true) => GraphEncoding::BACKWARD,
            (true, true) => unreachable!("DiGraph invariant: one edge per pair"),
        });
    }
}

pub fn decode(enc: &GraphEncoding, n: usize) -> Result<DiGraph> {
    let pairs = node_pairs(n);
    if enc.len() != pairs.len() {
        return Err(Error::EncodingLength {
            got: enc.len(),
            expected: pairs.len(),
        });
    }
    let mut g = DiGraph::empty(n);
    for (&(i, j), &v) in pairs.iter().zip(enc.values()) {
        if v == GraphEncoding::FORWARD {
            g.edges.insert(Edge::new(i, j));
        } else if v == GraphEncoding::BACKWARD {
            g.edges.insert(Edge::new(j, i));
        } else if v != GraphEncoding::NONE {
            return Err(Error::EncodingValue(v));
        }
    }
    Ok(g)
}

/// Directed structural Hamming distance: the size of the symmetric
/// difference of the two edge sets. A reversed edge counts twice.
pub fn dshd(pred: &DiGraph, target: &DiGraph) -> Result<usize> {
    if pred.n != target.n {
        return Err(Error::NodeCountMismatch {
            left: pred.n,
            right: target.n,
        });
    }
    Ok(pred.edges.symmetric_difference(&target.edges).count())
}

/// Random DAG: a uniformly random node permutation fixes a topological order
/// and every order-respecting edge is kept with probability 1/2.
pub fn random_dag<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Dag {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut g = DiGraph::empty(n);
    for a in 0..n {
        for b in a + 1..n {
            if rng.gen_bool(0.5) {
                g.edges.insert(Edge::new(order[a], order[b]));
            }
        }
    }
    Dag(g)
}

/// Every labelled DAG on `n` nodes, each exactly once.
pub fn all_dags(n: usize) -> Result<Vec<Dag>> {
    if n > MAX_ENUMERATION_NODES {
        return Err(Error::TooManyNodes {
            n,
            max: MAX_ENUMERATION_NODES,
        });
    }
    let pairs = node_pairs(n);
    let total = 3usize.pow(pairs.len() as u32);
    let mut out = Vec::new();
    for mut code in 0..total {
        let mut g = DiGraph::empty(n);
        for &(i, j) in &pairs {
            match code % 3 {
                1 => {
                    g.edges.insert(Edge::new(i, j));
                }
                2 => {
                    g.edges.insert(Edge::new(j, i));
                }
                _ => {}
            }
            code /= 3;
        }
        if g.is_acyclic() {
            out.push(Dag(g));
        }
    }
    Ok(out)
}

/// One line of a graph JSON-lines file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphRecord {
    pub n: usize,
    pub edges: Vec<[usize; 2]>,
}

impl From<&DiGraph> for GraphRecord {
    fn from(g: &DiGraph) -> Self {
        GraphRecord {
            n: g.n,
            edges: g.edges.iter().map(|e| [e.from, e.to]).collect(),
        }
    }
}

impl GraphRecord {
    pub fn to_graph(&self) -> Result<DiGraph> {
        DiGraph::from_edges(self.n, self.edges.iter().map(|e| (e[0], e[1])))
    }
}

pub fn write_graphs<W: Write>(out: &mut W, graphs: &[DiGraph]) -> std::io::Result<()> {
    for g in graphs {
        serde_json::to_writer(&mut *out, &GraphRecord::from(g))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_graphs(path: &Path) -> Result<Vec<DiGraph>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut graphs = Vec::new();
    for (idx, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            msg,
        };
        let rec: GraphRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        graphs.push(rec.to_graph().map_err(|e| parse_err(e.to_string()))?);
    }
    Ok(graphs)
}
