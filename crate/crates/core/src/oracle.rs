//! Architecture evaluation backends and the efficiency score.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{
    mac_estimate, prune_to_cell, unflatten_upper_triangle, CellSpec, Dag, DagSampler, OpKind,
};
use crate::nn::sigmoid;
use crate::rng::{self, stream, Rng};
use crate::wl_kernel::wl_canonical_hash;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub mac_millions: f64,
}

impl Evaluation {
    pub fn new(accuracy: f64, mac_millions: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&accuracy) {
            return Err(Error::Domain(format!("accuracy {accuracy} outside [0, 1]")));
        }
        if !(mac_millions >= 0.0 && mac_millions.is_finite()) {
            return Err(Error::Domain(format!(
                "mac_millions {mac_millions} must be finite and >= 0"
            )));
        }
        Ok(Evaluation {
            accuracy,
            mac_millions,
        })
    }
}

/// `accuracy - lambda * ln(mac_millions)`.
pub fn efficiency_score(eval: &Evaluation, lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::Domain(format!("lambda {lambda} must be >= 0")));
    }
    if lambda == 0.0 {
        return Ok(eval.accuracy);
    }
    if eval.mac_millions <= 0.0 {
        return Err(Error::Domain(format!(
            "log penalty needs positive MACs, got {}",
            eval.mac_millions
        )));
    }
    Ok(eval.accuracy - lambda * eval.mac_millions.ln())
}

/// Anything that can score an architecture.
pub trait Oracle: Sync {
    fn evaluate(&self, dag: &Dag) -> Result<Evaluation>;

    /// Short JSON description recorded in manifests.
    fn describe(&self) -> serde_json::Value;
}

/// Closed-form stand-in for proxy training. Accuracy is a sigmoid of
/// pruned-cell topology features plus per-architecture Gaussian noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticOracleConfig {
    pub bias: f64,
    /// Weight on the longest input-to-leaf path, in edges.
    pub longest_path: f64,
    /// Weight on the squared longest path; negative values favour moderate depth.
    pub longest_path_sq: f64,
    /// Weight on the mean active in-degree of non-input nodes.
    pub mean_in_degree: f64,
    /// Weight on the fraction of active nodes that are `DwSepConv3x3`.
    pub op_mix: f64,
    pub noise_sigma: f64,
    pub rng_seed: u64,
}

impl Default for SyntheticOracleConfig {
    fn default() -> Self {
        SyntheticOracleConfig {
            bias: 1.0,
            longest_path: 0.45,
            longest_path_sq: -0.04,
            mean_in_degree: 0.35,
            op_mix: 0.4,
            noise_sigma: 0.005,
            rng_seed: 0,
        }
    }
}

impl SyntheticOracleConfig {
    pub fn zero() -> Self {
        SyntheticOracleConfig {
            bias: 0.0,
            longest_path: 0.0,
            longest_path_sq: 0.0,
            mean_in_degree: 0.0,
            op_mix: 0.0,
            noise_sigma: 0.0,
            rng_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TopologyFeatures {
    pub longest_path: f64,
    pub mean_in_degree: f64,
    pub op_mix: f64,
}

pub fn topology_features(cell: &CellSpec) -> TopologyFeatures {
    let inner: Vec<usize> = cell
        .active_nodes
        .iter()
        .copied()
        .filter(|&v| v != cell.input_node)
        .collect();
    let mean_in_degree = if inner.is_empty() {
        0.0
    } else {
        inner
            .iter()
            .map(|&v| cell.active_in_degree(v) as f64)
            .sum::<f64>()
            / inner.len() as f64
    };
    let dw = cell
        .active_nodes
        .iter()
        .filter(|&&v| cell.source.ops()[v] == OpKind::DwSepConv3x3)
        .count();
    TopologyFeatures {
        longest_path: cell.longest_path() as f64,
        mean_in_degree,
        op_mix: dw as f64 / cell.active_nodes.len().max(1) as f64,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticOracle {
    pub cfg: SyntheticOracleConfig,
    pub channels: usize,
    pub resolution: (usize, usize),
}

impl SyntheticOracle {
    pub fn new(
        cfg: SyntheticOracleConfig,
        channels: usize,
        resolution: (usize, usize),
    ) -> Result<Self> {
        if !(cfg.noise_sigma >= 0.0) {
            return Err(Error::invalid("noise_sigma must be >= 0"));
        }
        if channels == 0 || resolution.0 == 0 || resolution.1 == 0 {
            return Err(Error::invalid("channels and resolution must be positive"));
        }
        Ok(SyntheticOracle {
            cfg,
            channels,
            resolution,
        })
    }
}

pub fn synthetic_evaluate(
    dag: &Dag,
    cfg: &SyntheticOracleConfig,
    channels: usize,
    resolution: (usize, usize),
) -> Result<Evaluation> {
    let cell = match prune_to_cell(dag, channels, resolution) {
        Ok(cell) => cell,
        Err(Error::DegenerateCell) => return Evaluation::new(0.0, 0.0),
        Err(e) => return Err(e),
    };
    let f = topology_features(&cell);
    let z = cfg.bias
        + cfg.longest_path * f.longest_path
        + cfg.longest_path_sq * f.longest_path * f.longest_path
        + cfg.mean_in_degree * f.mean_in_degree
        + cfg.op_mix * f.op_mix;
    let mut accuracy = sigmoid(z);
    if cfg.noise_sigma > 0.0 {
        // Keyed by the canonical hash, so isomorphic cells share their noise.
        let key = u64::from_str_radix(&wl_canonical_hash(dag, 3)[..16], 16).expect("hex digest");
        let mut rng = rng::rng_from(cfg.rng_seed, key);
        let normal =
            Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::invalid(e.to_string()))?;
        accuracy += normal.sample(&mut rng);
    }
    Evaluation::new(accuracy.clamp(0.0, 1.0), mac_estimate(&cell))
}

impl Oracle for SyntheticOracle {
    fn evaluate(&self, dag: &Dag) -> Result<Evaluation> {
        synthetic_evaluate(dag, &self.cfg, self.channels, self.resolution)
    }

    fn describe(&self) -> serde_json::Value {
        serde_json::json!({ "kind": "synthetic", "config": self.cfg, "channels": self.channels, "resolution": self.resolution })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableMeta {
    pub n: usize,
    pub ops: Vec<OpKind>,
    /// WL iterations used for the keys.
    pub h: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableEntry {
    pub evaluation: Evaluation,
    /// A representative architecture, when known. Needed to sample from the table.
    pub dag: Option<Dag>,
}

/// Precomputed evaluations keyed by [`wl_canonical_hash`].
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkTable {
    pub meta: TableMeta,
    entries: BTreeMap<String, TableEntry>,
}

#[derive(Serialize, Deserialize)]
struct HeaderRecord {
    header: TableMeta,
}

#[derive(Serialize, Deserialize)]
struct EntryRecord {
    hash: String,
    accuracy: f64,
    mac_millions: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dag: Option<Dag>,
}

impl BenchmarkTable {
    pub fn new(meta: TableMeta) -> Self {
        BenchmarkTable {
            meta,
            entries: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn hash(&self, dag: &Dag) -> String {
        wl_canonical_hash(dag, self.meta.h)
    }

    /// Inserts unless the hash is already present. Returns whether it was new.
    pub fn insert(&mut self, dag: &Dag, evaluation: Evaluation) -> bool {
        let key = self.hash(dag);
        self.insert_hashed(key, evaluation, Some(dag.clone()))
    }

    pub fn insert_hashed(
        &mut self,
        hash: String,
        evaluation: Evaluation,
        dag: Option<Dag>,
    ) -> bool {
        if self.entries.contains_key(&hash) {
            return false;
        }
        self.entries.insert(hash, TableEntry { evaluation, dag });
        true
    }

    pub fn get(&self, hash: &str) -> Option<&TableEntry> {
        self.entries.get(hash)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&String, &TableEntry)> {
        self.entries.iter()
    }

    /// Representative architectures, in hash order.
    pub fn dags(&self) -> Vec<Dag> {
        self.entries
            .values()
            .filter_map(|e| e.dag.clone())
            .collect()
    }

    pub fn best_accuracy(&self) -> Option<f64> {
        self.entries
            .values()
            .map(|e| e.evaluation.accuracy)
            .reduce(f64::max)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(
            &mut w,
            &HeaderRecord {
                header: self.meta.clone(),
            },
        )?;
        w.write_all(b"\n")?;
        for (hash, e) in &self.entries {
            let rec = EntryRecord {
                hash: hash.clone(),
                accuracy: e.evaluation.accuracy,
                mac_millions: e.evaluation.mac_millions,
                dag: e.dag.clone(),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let mut lines = reader
            .lines()
            .enumerate()
            .filter(|(_, l)| l.as_ref().map_or(true, |l| !l.trim().is_empty()));
        let (_, first) = lines
            .next()
            .ok_or_else(|| Error::format(path, "empty table file"))?;
        let header: HeaderRecord = serde_json::from_str(&first?)
            .map_err(|e| Error::format(path, format!("header: {e}")))?;
        let mut table = BenchmarkTable::new(header.header);
        for (lineno, line) in lines {
            let rec: EntryRecord = serde_json::from_str(&line?)
                .map_err(|e| Error::format(path, format!("line {}: {e}", lineno + 1)))?;
            let eval = Evaluation::new(rec.accuracy, rec.mac_millions)
                .map_err(|e| Error::format(path, format!("line {}: {e}", lineno + 1)))?;
            if !table.insert_hashed(rec.hash.clone(), eval, rec.dag) {
                return Err(Error::format(path, format!("duplicate hash {}", rec.hash)));
            }
        }
        Ok(table)
    }

    /// Imports an external benchmark dump: CSV with columns `adjacency`
    /// (row-major `n*n` 0/1 string), `ops` (`;`-separated op names),
    /// `accuracy` and `mac_millions`. Lower-triangular entries are rejected.
    pub fn import_csv(path: &Path, h: usize) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            adjacency: String,
            ops: String,
            accuracy: f64,
            mac_millions: f64,
        }
        let mut reader = csv::Reader::from_path(path)?;
        let mut table: Option<BenchmarkTable> = None;
        for (k, row) in reader.deserialize::<Row>().enumerate() {
            let row = row?;
            let ops: Vec<OpKind> = row.ops.split(';').map(str::parse).collect::<Result<_>>()?;
            let n = ops.len();
            let bits: Vec<u8> = row
                .adjacency
                .bytes()
                .map(|b| b.wrapping_sub(b'0'))
                .collect();
            if bits.len() != n * n || bits.iter().any(|&b| b > 1) {
                return Err(Error::format(
                    path,
                    format!("row {}: adjacency must be {n}x{n} bits", k + 1),
                ));
            }
            if (0..n).any(|i| (0..=i).any(|j| bits[i * n + j] == 1)) {
                return Err(Error::format(
                    path,
                    format!("row {}: adjacency is not strictly upper-triangular", k + 1),
                ));
            }
            let flat: Vec<f64> = (0..n)
                .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
                .map(|(i, j)| f64::from(bits[i * n + j]))
                .collect();
            let dag = unflatten_upper_triangle(n, &flat, ops.clone())?;
            let t =
                table.get_or_insert_with(|| BenchmarkTable::new(TableMeta { n, ops: vec![], h }));
            for op in ops {
                if !t.meta.ops.contains(&op) {
                    t.meta.ops.push(op);
                }
            }
            t.meta.n = t.meta.n.max(n);
            t.insert(&dag, Evaluation::new(row.accuracy, row.mac_millions)?);
        }
        table.ok_or_else(|| Error::format(path, "no rows"))
    }
}

pub fn tabular_evaluate(dag: &Dag, table: &BenchmarkTable) -> Result<Evaluation> {
    let hash = table.hash(dag);
    table
        .get(&hash)
        .map(|e| e.evaluation)
        .ok_or(Error::MissingArchitecture { hash })
}

impl Oracle for BenchmarkTable {
    fn evaluate(&self, dag: &Dag) -> Result<Evaluation> {
        tabular_evaluate(dag, self)
    }

    fn describe(&self) -> serde_json::Value {
        serde_json::json!({ "kind": "tabular", "entries": self.len(), "meta": self.meta })
    }
}

/// Fills a table with `entries` distinct architectures drawn from `sampler`
/// and scored by `oracle`.
pub fn build_table(
    sampler: &dyn DagSampler,
    oracle: &dyn Oracle,
    meta: TableMeta,
    entries: usize,
    seed: u64,
) -> Result<BenchmarkTable> {
    let mut table = BenchmarkTable::new(meta);
    let mut rng: Rng = rng::rng_from(seed, stream::TABLE);
    let max_draws = entries.saturating_mul(50).max(1000);
    let mut draws = 0;
    while table.len() < entries {
        if draws == max_draws {
            return Err(Error::invalid(format!(
                "only {} distinct architectures after {draws} draws",
                table.len()
            )));
        }
        draws += 1;
        let dag = sampler.sample(&mut rng)?;
        let key = table.hash(&dag);
        if table.get(&key).is_some() {
            continue;
        }
        let eval = oracle.evaluate(&dag)?;
        table.insert_hashed(key, eval, Some(dag));
    }
    Ok(table)
}
