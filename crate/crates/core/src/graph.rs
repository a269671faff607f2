//! Cell DAGs: representation, seeded sampling, pruning into cell semantics and
//! the closed-form MAC cost model.
//!
//! A [`Dag`] only admits edges `i -> j` with `i < j`, so the adjacency matrix is
//! strictly upper-triangular and acyclicity holds by construction.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// Operation carried by a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum OpKind {
    Conv1x1,
    DwSepConv3x3,
    Labeled(u16),
}

impl OpKind {
    /// Small integer tag, stable across runs. Used as the initial WL label.
    pub fn tag(self) -> u32 {
        match self {
            OpKind::Conv1x1 => 0,
            OpKind::DwSepConv3x3 => 1,
            OpKind::Labeled(id) => 2 + u32::from(id),
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OpKind::Conv1x1 => f.write_str("conv1x1"),
            OpKind::DwSepConv3x3 => f.write_str("dwsep3x3"),
            OpKind::Labeled(id) => write!(f, "op{id}"),
        }
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv1x1" => Ok(OpKind::Conv1x1),
            "dwsep3x3" => Ok(OpKind::DwSepConv3x3),
            _ => s
                .strip_prefix("op")
                .and_then(|id| id.parse::<u16>().ok())
                .map(OpKind::Labeled)
                .ok_or_else(|| Error::invalid(format!("unknown op `{s}`"))),
        }
    }
}

impl From<OpKind> for String {
    fn from(op: OpKind) -> String {
        op.to_string()
    }
}

impl TryFrom<String> for OpKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Directed acyclic graph with one operation per node.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "DagRecord", try_from = "DagRecord")]
pub struct Dag {
    n: usize,
    succ: Vec<Vec<usize>>,
    pred: Vec<Vec<usize>>,
    ops: Vec<OpKind>,
}

#[derive(Serialize, Deserialize)]
struct DagRecord {
    n: usize,
    edges: Vec<[usize; 2]>,
    ops: Vec<OpKind>,
}

impl From<Dag> for DagRecord {
    fn from(dag: Dag) -> Self {
        DagRecord {
            n: dag.n,
            edges: dag.edges().map(|(i, j)| [i, j]).collect(),
            ops: dag.ops,
        }
    }
}

impl TryFrom<DagRecord> for Dag {
    type Error = Error;

    fn try_from(r: DagRecord) -> Result<Self> {
        Dag::new(r.n, r.edges.iter().map(|&[i, j]| (i, j)), r.ops)
    }
}

impl Dag {
    pub fn new(
        n: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
        ops: Vec<OpKind>,
    ) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("a DAG needs at least one node"));
        }
        if ops.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: ops.len(),
            });
        }
        let mut succ = vec![Vec::new(); n];
        let mut pred = vec![Vec::new(); n];
        for (i, j) in edges {
            if i >= j || j >= n {
                return Err(Error::invalid(format!(
                    "edge {i}->{j} is not strictly upper-triangular in a {n}-node DAG"
                )));
            }
            succ[i].push(j);
            pred[j].push(i);
        }
        for list in succ.iter_mut().chain(pred.iter_mut()) {
            list.sort_unstable();
            list.dedup();
        }
        Ok(Dag { n, succ, pred, ops })
    }

    /// `n` nodes sharing one op, no edges.
    pub fn empty(n: usize, op: OpKind) -> Result<Self> {
        Dag::new(n, std::iter::empty(), vec![op; n])
    }

    pub fn chain(n: usize, op: OpKind) -> Result<Self> {
        Dag::new(n, (1..n).map(|j| (j - 1, j)), vec![op; n])
    }

    pub fn complete(n: usize, op: OpKind) -> Result<Self> {
        Dag::new(
            n,
            (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))),
            vec![op; n],
        )
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn ops(&self) -> &[OpKind] {
        &self.ops
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        i < self.n && self.succ[i].binary_search(&j).is_ok()
    }

    /// Edges in row-major order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.succ
            .iter()
            .enumerate()
            .flat_map(|(i, out)| out.iter().map(move |&j| (i, j)))
    }

    pub fn edge_count(&self) -> usize {
        self.succ.iter().map(Vec::len).sum()
    }

    pub fn in_neighbors(&self, v: usize) -> impl Iterator<Item = usize> + '_ {
        self.pred[v].iter().copied()
    }

    pub fn out_neighbors(&self, v: usize) -> impl Iterator<Item = usize> + '_ {
        self.succ[v].iter().copied()
    }

    pub fn in_degree(&self, v: usize) -> usize {
        self.pred[v].len()
    }

    pub fn out_degree(&self, v: usize) -> usize {
        self.succ[v].len()
    }

    /// Dense `n x n` adjacency matrix, zero on and below the diagonal.
    pub fn adjacency_matrix(&self) -> Vec<Vec<u8>> {
        let mut a = vec![vec![0u8; self.n]; self.n];
        for (i, j) in self.edges() {
            a[i][j] = 1;
        }
        a
    }

    /// Relabels node `v` as `perm[v]`. The permutation must keep every edge
    /// pointing from a lower to a higher index.
    pub fn permuted(&self, perm: &[usize]) -> Result<Dag> {
        if perm.len() != self.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                got: perm.len(),
            });
        }
        let mut seen = vec![false; self.n];
        for &p in perm {
            if p >= self.n || std::mem::replace(&mut seen[p], true) {
                return Err(Error::invalid("not a permutation"));
            }
        }
        let mut ops = vec![OpKind::Conv1x1; self.n];
        for (v, &p) in perm.iter().enumerate() {
            ops[p] = self.ops[v];
        }
        Dag::new(self.n, self.edges().map(|(i, j)| (perm[i], perm[j])), ops)
    }

    pub fn with_ops(&self, ops: Vec<OpKind>) -> Result<Dag> {
        Dag::new(self.n, self.edges(), ops)
    }
}

/// Samples a DAG: each upper-triangular edge independently with probability
/// `edge_prob`, each op uniformly from `op_palette`.
pub fn random_dag(n: usize, edge_prob: f64, op_palette: &[OpKind], rng_seed: u64) -> Result<Dag> {
    let mut rng = rng::rng_from(rng_seed, 0);
    random_dag_with(n, edge_prob, op_palette, &mut rng)
}

pub fn random_dag_with(
    n: usize,
    edge_prob: f64,
    op_palette: &[OpKind],
    rng: &mut Rng,
) -> Result<Dag> {
    if n == 0 {
        return Err(Error::invalid("n must be at least 1"));
    }
    if !(0.0..=1.0).contains(&edge_prob) {
        return Err(Error::invalid(format!(
            "edge_prob {edge_prob} outside [0, 1]"
        )));
    }
    if op_palette.is_empty() {
        return Err(Error::invalid("op palette is empty"));
    }
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.gen_bool(edge_prob) {
                edges.push((i, j));
            }
        }
    }
    let ops = (0..n)
        .map(|_| *op_palette.choose(rng).expect("palette is non-empty"))
        .collect();
    Dag::new(n, edges, ops)
}

/// Every DAG on `n` nodes with ops drawn from `palette`. Exponential; meant
/// for exhaustive checks at `n <= 5`.
pub fn enumerate_dags(n: usize, palette: &[OpKind]) -> Result<Vec<Dag>> {
    if n == 0 || n > 5 {
        return Err(Error::invalid(format!(
            "enumeration supports 1..=5 nodes, got {n}"
        )));
    }
    if palette.is_empty() {
        return Err(Error::invalid("op palette is empty"));
    }
    let slots: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .collect();
    let op_combos = palette.len().pow(n as u32);
    let mut out = Vec::with_capacity((1usize << slots.len()) * op_combos);
    for mask in 0..1usize << slots.len() {
        let edges: Vec<_> = slots
            .iter()
            .enumerate()
            .filter(|(b, _)| mask >> b & 1 == 1)
            .map(|(_, &e)| e)
            .collect();
        for mut code in 0..op_combos {
            let mut ops = Vec::with_capacity(n);
            for _ in 0..n {
                ops.push(palette[code % palette.len()]);
                code /= palette.len();
            }
            out.push(Dag::new(n, edges.iter().copied(), ops)?);
        }
    }
    Ok(out)
}

/// Row-major `(i, j)`, `i < j` entries of the adjacency matrix.
pub fn flatten_upper_triangle(dag: &Dag) -> Vec<f64> {
    let n = dag.n;
    let mut out = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        let mut next = dag.succ[i].iter().peekable();
        for j in i + 1..n {
            let hit = next.next_if_eq(&&j).is_some();
            out.push(if hit { 1.0 } else { 0.0 });
        }
    }
    out
}

/// Inverse of [`flatten_upper_triangle`]; entries above 0.5 become edges.
pub fn unflatten_upper_triangle(n: usize, flat: &[f64], ops: Vec<OpKind>) -> Result<Dag> {
    let expected = n * n.saturating_sub(1) / 2;
    if flat.len() != expected {
        return Err(Error::DimensionMismatch {
            expected,
            got: flat.len(),
        });
    }
    let slots = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j)));
    let edges: Vec<_> = slots
        .zip(flat)
        .filter(|(_, &x)| x > 0.5)
        .map(|(e, _)| e)
        .collect();
    Dag::new(n, edges, ops)
}

/// A DAG mapped onto network-cell semantics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSpec {
    pub source: Dag,
    /// Surviving nodes in increasing index order.
    pub active_nodes: Vec<usize>,
    pub input_node: usize,
    /// Active nodes with zero out-degree inside the cell.
    pub output_leaves: Vec<usize>,
    /// Active nodes with more than one active predecessor.
    pub concat_nodes: Vec<usize>,
    pub channels: usize,
    pub resolution: (usize, usize),
}

impl CellSpec {
    pub fn is_active(&self, v: usize) -> bool {
        self.active_nodes.binary_search(&v).is_ok()
    }

    /// In-degree of `v` counting only active predecessors.
    pub fn active_in_degree(&self, v: usize) -> usize {
        self.source
            .in_neighbors(v)
            .filter(|&u| self.is_active(u))
            .count()
    }

    pub fn active_out_degree(&self, v: usize) -> usize {
        self.source
            .out_neighbors(v)
            .filter(|&w| self.is_active(w))
            .count()
    }

    /// Number of edges on the longest path from the input node.
    pub fn longest_path(&self) -> usize {
        let n = self.source.n();
        let mut depth = vec![0usize; n];
        for &v in &self.active_nodes {
            depth[v] = self
                .source
                .in_neighbors(v)
                .filter(|&u| self.is_active(u))
                .map(|u| depth[u] + 1)
                .max()
                .unwrap_or(0);
        }
        self.active_nodes
            .iter()
            .map(|&v| depth[v])
            .max()
            .unwrap_or(0)
    }
}

/// Drops non-input nodes without active predecessors until nothing changes.
///
/// Node 0 is the cell input and is never dropped. Because edges only point
/// from lower to higher indices, one pass in index order reaches the fixpoint.
pub fn prune_to_cell(dag: &Dag, channels: usize, resolution: (usize, usize)) -> Result<CellSpec> {
    if channels == 0 {
        return Err(Error::invalid("channels must be positive"));
    }
    let n = dag.n();
    let mut active = vec![false; n];
    active[0] = true;
    for v in 1..n {
        active[v] = dag.in_neighbors(v).any(|u| active[u]);
    }
    let active_nodes: Vec<usize> = (0..n).filter(|&v| active[v]).collect();
    if n > 1 && active_nodes.len() == 1 {
        return Err(Error::DegenerateCell);
    }
    let output_leaves = active_nodes
        .iter()
        .copied()
        .filter(|&v| !dag.out_neighbors(v).any(|w| active[w]))
        .collect();
    let concat_nodes = active_nodes
        .iter()
        .copied()
        .filter(|&v| dag.in_neighbors(v).filter(|&u| active[u]).count() > 1)
        .collect();
    Ok(CellSpec {
        source: dag.clone(),
        active_nodes,
        input_node: 0,
        output_leaves,
        concat_nodes,
        channels,
        resolution,
    })
}

/// MACs of a cell in millions.
///
/// `Conv1x1` costs `H*W*C_in*C_out`; `DwSepConv3x3` costs
/// `H*W*C_in*9 + H*W*C_in*C_out`. `C_in` is `channels` times the active
/// in-degree (at least 1), since multi-input nodes concatenate their inputs.
/// `Labeled` ops are priced as `Conv1x1`.
pub fn mac_estimate(cell: &CellSpec) -> f64 {
    let (h, w) = cell.resolution;
    let hw = (h * w) as f64;
    let c_out = cell.channels as f64;
    let total: f64 = cell
        .active_nodes
        .iter()
        .map(|&v| {
            let c_in = c_out * cell.active_in_degree(v).max(1) as f64;
            match cell.source.ops()[v] {
                OpKind::DwSepConv3x3 => hw * c_in * 9.0 + hw * c_in * c_out,
                OpKind::Conv1x1 | OpKind::Labeled(_) => hw * c_in * c_out,
            }
        })
        .sum();
    total / 1e6
}

/// Sampling distribution over cells: `random_dag` with degenerate cells
/// rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub n: usize,
    pub edge_prob: f64,
    pub ops: Vec<OpKind>,
}

const MAX_REJECTIONS: usize = 100_000;

impl SearchSpace {
    pub fn new(n: usize, edge_prob: f64, ops: Vec<OpKind>) -> Result<Self> {
        let space = SearchSpace { n, edge_prob, ops };
        space.validate()?;
        Ok(space)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::invalid("n must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.edge_prob) {
            return Err(Error::invalid(format!(
                "edge_prob {} outside [0, 1]",
                self.edge_prob
            )));
        }
        if self.n > 1 && self.edge_prob == 0.0 {
            return Err(Error::invalid("edge_prob 0 yields only degenerate cells"));
        }
        if self.ops.is_empty() {
            return Err(Error::invalid("op palette is empty"));
        }
        Ok(())
    }
}

/// Source of candidate architectures.
pub trait DagSampler: Sync {
    fn sample(&self, rng: &mut Rng) -> Result<Dag>;
}

impl DagSampler for SearchSpace {
    fn sample(&self, rng: &mut Rng) -> Result<Dag> {
        for _ in 0..MAX_REJECTIONS {
            let dag = random_dag_with(self.n, self.edge_prob, &self.ops, rng)?;
            if self.n == 1 || dag.out_neighbors(0).next().is_some() {
                return Ok(dag);
            }
        }
        Err(Error::DegenerateCell)
    }
}

/// Uniform sampling with replacement from a fixed list.
impl DagSampler for [Dag] {
    fn sample(&self, rng: &mut Rng) -> Result<Dag> {
        self.choose(rng).cloned().ok_or(Error::EmptySpace)
    }
}

impl DagSampler for Vec<Dag> {
    fn sample(&self, rng: &mut Rng) -> Result<Dag> {
        self.as_slice().sample(rng)
    }
}

/// Writes one JSON DAG per line.
pub fn write_dags(path: &Path, dags: &[Dag]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for dag in dags {
        serde_json::to_writer(&mut w, dag)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dags(path: &Path) -> Result<Vec<Dag>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let dag = serde_json::from_str(&line)
            .map_err(|e| Error::format(path, format!("line {}: {e}", lineno + 1)))?;
        out.push(dag);
    }
    Ok(out)
}
