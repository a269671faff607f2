//! Kernel-guided graph encoder.
//!
//! The encoder maps the flattened upper triangle of a cell's adjacency matrix
//! (optionally followed by per-node op one-hots) to a `d`-dimensional vector,
//! scaled to unit length so that only its direction carries information. A
//! sigmoid decoder reconstructs the adjacency from that vector. Training minimizes, per graph
//! pair, `(cos(E(a), E(b)) - S_g(a, b))^2 + L_r(a) + L_r(b)` where `S_g` is the
//! normalized WL kernel and `L_r` is the reconstruction MSE.

use std::fs;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{flatten_upper_triangle, random_dag_with, Dag, OpKind};
use crate::nn::{self, Activation, Mlp, OptState, TrainConfig};
use crate::rng::{self, stream};
use crate::wl_kernel::{wl_similarity, WlConfig};

/// Norm floor inside the training-time cosine denominator.
const TRAIN_NORM_FLOOR: f64 = 1e-6;
/// Below this norm [`cosine_similarity`] refuses to answer.
const ZERO_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphVector(pub Vec<f64>);

impl GraphVector {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

impl From<Vec<f64>> for GraphVector {
    fn from(v: Vec<f64>) -> Self {
        GraphVector(v)
    }
}

pub fn cosine_similarity(a: &GraphVector, b: &GraphVector) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let (na, nb) = (a.norm(), b.norm());
    for norm in [na, nb] {
        if norm < ZERO_NORM {
            return Err(Error::ZeroVector(norm));
        }
    }
    let dot: f64 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// What the encoder sees besides the adjacency structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum EncoderInput {
    StructureOnly,
    StructureAndOps { palette: Vec<OpKind> },
}

impl EncoderInput {
    pub fn width(&self, n: usize) -> usize {
        let adj = n * n.saturating_sub(1) / 2;
        match self {
            EncoderInput::StructureOnly => adj,
            EncoderInput::StructureAndOps { palette } => adj + n * palette.len(),
        }
    }

    pub fn encode(&self, dag: &Dag) -> Result<Vec<f64>> {
        let mut x = flatten_upper_triangle(dag);
        if let EncoderInput::StructureAndOps { palette } = self {
            for &op in dag.ops() {
                let k = palette.iter().position(|&p| p == op).ok_or_else(|| {
                    Error::invalid(format!("op {op} is not in the encoder palette"))
                })?;
                x.extend((0..palette.len()).map(|i| if i == k { 1.0 } else { 0.0 }));
            }
        }
        Ok(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Similarity loss plus reconstruction of both graphs.
    KernelGuided,
    /// Plain autoencoder: reconstruction only.
    ReconstructionOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub n: usize,
    pub d: usize,
    pub hidden: Vec<usize>,
    pub pair_count: usize,
    pub wl: WlConfig,
    pub input: EncoderInput,
    pub objective: Objective,
    /// Ops used when sampling training graphs.
    pub palette: Vec<OpKind>,
    /// Per-graph edge probability is drawn uniformly from this range.
    pub edge_prob_range: (f64, f64),
    pub checkpoint_every: usize,
    pub train: TrainConfig,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            n: 10,
            d: 10,
            hidden: vec![128, 128],
            pair_count: 5000,
            wl: WlConfig::default(),
            input: EncoderInput::StructureOnly,
            objective: Objective::KernelGuided,
            palette: vec![OpKind::Conv1x1, OpKind::DwSepConv3x3],
            edge_prob_range: (0.1, 0.9),
            checkpoint_every: 100,
            train: TrainConfig {
                iterations: 10_000,
                batch_size: 16,
                ..TrainConfig::default()
            },
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::invalid(
                "the encoder needs n >= 2 so the adjacency is non-empty",
            ));
        }
        if self.d == 0 {
            return Err(Error::invalid("embedding dimension d must be positive"));
        }
        if self.pair_count == 0 {
            return Err(Error::invalid("pair_count must be at least 1"));
        }
        if self.palette.is_empty() {
            return Err(Error::invalid("training palette is empty"));
        }
        let (lo, hi) = self.edge_prob_range;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(Error::invalid(format!(
                "edge_prob_range ({lo}, {hi}) is not inside [0, 1]"
            )));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::invalid("checkpoint_every must be positive"));
        }
        if let EncoderInput::StructureAndOps { palette } = &self.input {
            if let Some(op) = self.palette.iter().find(|op| !palette.contains(op)) {
                return Err(Error::invalid(format!(
                    "training op {op} missing from the encoder input palette"
                )));
            }
        }
        self.train.validate()
    }
}

/// Trained encoder/decoder pair plus everything needed to reproduce targets.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBundle {
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub n: usize,
    pub d: usize,
    pub wl_cfg: WlConfig,
    pub input: EncoderInput,
    pub objective: Objective,
    pub seed: u64,
    pub pair_count: usize,
}

impl EncoderBundle {
    /// Freshly initialized, untrained networks.
    pub fn init(cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let m = cfg.n * (cfg.n - 1) / 2;
        let seed = cfg.train.rng_seed;
        let mut enc_dims = vec![cfg.input.width(cfg.n)];
        enc_dims.extend(&cfg.hidden);
        enc_dims.push(cfg.d);
        let mut dec_dims = vec![cfg.d];
        dec_dims.extend(cfg.hidden.iter().rev());
        dec_dims.push(m);
        Ok(EncoderBundle {
            encoder: Mlp::xavier(
                &enc_dims,
                Activation::Relu,
                Activation::Identity,
                rng::derive_seed(seed, stream::ENCODER_INIT),
            )?,
            decoder: Mlp::xavier(
                &dec_dims,
                Activation::Relu,
                Activation::Sigmoid,
                rng::derive_seed(seed, stream::DECODER_INIT),
            )?,
            n: cfg.n,
            d: cfg.d,
            wl_cfg: cfg.wl,
            input: cfg.input.clone(),
            objective: cfg.objective,
            seed,
            pair_count: cfg.pair_count,
        })
    }

    fn check_n(&self, dag: &Dag) -> Result<()> {
        if dag.n() != self.n {
            return Err(Error::NodeCountMismatch {
                expected: self.n,
                got: dag.n(),
            });
        }
        Ok(())
    }

    fn input_matrix(&self, dags: &[Dag]) -> Result<Array2<f64>> {
        let width = self.input.width(self.n);
        let mut x = Array2::zeros((dags.len(), width));
        for (row, dag) in x.rows_mut().into_iter().zip(dags) {
            self.check_n(dag)?;
            let v = self.input.encode(dag)?;
            row.into_slice()
                .expect("standard layout")
                .copy_from_slice(&v);
        }
        Ok(x)
    }

    /// Encoder outputs for a batch, one row per DAG.
    pub fn embed_matrix(&self, dags: &[Dag]) -> Result<Array2<f64>> {
        let x = self.input_matrix(dags)?;
        Ok(project_rows(&self.encoder.forward_batch(x.view())?).0)
    }

    pub fn decode(&self, g: &GraphVector) -> Result<Vec<f64>> {
        self.decoder.forward(g.values())
    }
}

pub fn embed(dag: &Dag, bundle: &EncoderBundle) -> Result<GraphVector> {
    let m = bundle.embed_matrix(std::slice::from_ref(dag))?;
    Ok(GraphVector(m.row(0).to_vec()))
}

pub fn embed_batch(dags: &[Dag], bundle: &EncoderBundle) -> Result<Vec<GraphVector>> {
    let m = bundle.embed_matrix(dags)?;
    Ok(m.rows()
        .into_iter()
        .map(|r| GraphVector(r.to_vec()))
        .collect())
}

pub fn similarity_loss(ga: &Dag, gb: &Dag, bundle: &EncoderBundle) -> Result<f64> {
    bundle.check_n(ga)?;
    bundle.check_n(gb)?;
    let se = cosine_similarity(&embed(ga, bundle)?, &embed(gb, bundle)?)?;
    let sg = wl_similarity(ga, gb, &bundle.wl_cfg)?;
    Ok((se - sg).powi(2))
}

/// Mean squared error between two equal-length vectors.
pub fn mse(target: &[f64], output: &[f64]) -> Result<f64> {
    if target.len() != output.len() {
        return Err(Error::DimensionMismatch {
            expected: target.len(),
            got: output.len(),
        });
    }
    if target.is_empty() {
        return Ok(0.0);
    }
    Ok(target
        .iter()
        .zip(output)
        .map(|(t, o)| (t - o).powi(2))
        .sum::<f64>()
        / target.len() as f64)
}

pub fn reconstruction_loss(dag: &Dag, bundle: &EncoderBundle) -> Result<f64> {
    let g = embed(dag, bundle)?;
    mse(&flatten_upper_triangle(dag), &bundle.decode(&g)?)
}

/// Mean losses over one window of training iterations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossCheckpoint {
    pub iteration: usize,
    pub similarity: f64,
    pub reconstruction: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossHistory {
    pub checkpoints: Vec<LossCheckpoint>,
}

impl LossHistory {
    /// Mean similarity loss over the last `k` checkpoints.
    pub fn tail_similarity(&self, k: usize) -> f64 {
        let tail = &self.checkpoints[self.checkpoints.len().saturating_sub(k)..];
        tail.iter().map(|c| c.similarity).sum::<f64>() / tail.len().max(1) as f64
    }

    pub fn head_similarity(&self, k: usize) -> f64 {
        let head = &self.checkpoints[..k.min(self.checkpoints.len())];
        head.iter().map(|c| c.similarity).sum::<f64>() / head.len().max(1) as f64
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for c in &self.checkpoints {
            w.serialize(c)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// A graph pair with its WL similarity target.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphPair {
    pub a: Dag,
    pub b: Dag,
    pub target: f64,
}

/// Samples `count` independent pairs; each graph gets its own edge
/// probability drawn from `cfg.edge_prob_range`.
pub fn sample_pairs(cfg: &EncoderConfig, count: usize, seed: u64) -> Result<Vec<GraphPair>> {
    let mut rng = rng::rng_from(seed, stream::PAIRS);
    let (lo, hi) = cfg.edge_prob_range;
    let mut raw = Vec::with_capacity(count);
    for _ in 0..count {
        let pa = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        let a = random_dag_with(cfg.n, pa, &cfg.palette, &mut rng)?;
        let pb = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        let b = random_dag_with(cfg.n, pb, &cfg.palette, &mut rng)?;
        raw.push((a, b));
    }
    label_pairs(raw, &cfg.wl)
}

/// Computes WL targets; each pair uses its own label dictionary, so the
/// result does not depend on evaluation order.
pub fn label_pairs(raw: Vec<(Dag, Dag)>, wl: &WlConfig) -> Result<Vec<GraphPair>> {
    raw.into_par_iter()
        .map(|(a, b)| {
            let target = wl_similarity(&a, &b, wl)?;
            Ok(GraphPair { a, b, target })
        })
        .collect()
}

pub fn train_encoder(cfg: &EncoderConfig) -> Result<(EncoderBundle, LossHistory)> {
    cfg.validate()?;
    let pairs = sample_pairs(cfg, cfg.pair_count, cfg.train.rng_seed)?;
    train_encoder_on_pairs(cfg, &pairs)
}

/// Scales each row to `r / (||r|| + eps)`. Returns the projected rows and
/// the raw norms. The dot product of two projected rows is the cosine of the
/// raw rows, up to the floor.
fn project_rows(r: &Array2<f64>) -> (Array2<f64>, Vec<f64>) {
    let norms: Vec<f64> = r
        .rows()
        .into_iter()
        .map(|row| row.dot(&row).sqrt())
        .collect();
    let mut u = r.clone();
    for (mut row, &n) in u.rows_mut().into_iter().zip(&norms) {
        row /= n + TRAIN_NORM_FLOOR;
    }
    (u, norms)
}

/// Pulls the gradient `g` with respect to a projected row back to the raw row.
fn project_backward(r: ArrayView1<f64>, norm: f64, g: ArrayView1<f64>) -> Array1<f64> {
    let f = norm + TRAIN_NORM_FLOOR;
    let mut out = g.to_owned() / f;
    if norm > 0.0 {
        out.scaled_add(-r.dot(&g) / (f * f * norm), &r);
    }
    out
}

pub fn train_encoder_on_pairs(
    cfg: &EncoderConfig,
    pairs: &[GraphPair],
) -> Result<(EncoderBundle, LossHistory)> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::invalid("no training pairs"));
    }
    let mut bundle = EncoderBundle::init(cfg)?;
    bundle.pair_count = pairs.len();
    let m = cfg.n * (cfg.n - 1) / 2;
    let width = cfg.input.width(cfg.n);

    let a_dags: Vec<Dag> = pairs.iter().map(|p| p.a.clone()).collect();
    let b_dags: Vec<Dag> = pairs.iter().map(|p| p.b.clone()).collect();
    let xa = bundle.input_matrix(&a_dags)?;
    let xb = bundle.input_matrix(&b_dags)?;
    let ta = xa.slice(s![.., ..m]).to_owned();
    let tb = xb.slice(s![.., ..m]).to_owned();

    let mut enc_opt = OptState::new(&cfg.train);
    let mut dec_opt = OptState::new(&cfg.train);
    let mut rng = rng::rng_from(cfg.train.rng_seed, stream::ENCODER_BATCHES);
    let bsz = cfg.train.batch_size;
    let guided = cfg.objective == Objective::KernelGuided;

    let mut history = LossHistory::default();
    let (mut win_sim, mut win_rec, mut win_len) = (0.0, 0.0, 0usize);

    let mut x = Array2::<f64>::zeros((2 * bsz, width));
    let mut target = Array2::<f64>::zeros((2 * bsz, m));
    let mut sg = vec![0.0; bsz];
    for it in 0..cfg.train.iterations {
        for k in 0..bsz {
            let idx = rng.gen_range(0..pairs.len());
            x.row_mut(k).assign(&xa.row(idx));
            x.row_mut(bsz + k).assign(&xb.row(idx));
            target.row_mut(k).assign(&ta.row(idx));
            target.row_mut(bsz + k).assign(&tb.row(idx));
            sg[k] = pairs[idx].target;
        }

        let enc_cache = bundle.encoder.forward_cached(x.clone())?;
        let raw = enc_cache.output();
        let (emb, norms) = project_rows(raw);
        let dec_cache = bundle.decoder.forward_cached(emb.clone())?;
        let recon = dec_cache.output();

        // d/dr of (1/B) sum_pairs [mse(r_a) + mse(r_b)]
        let diff = recon - &target;
        let rec_loss = diff.mapv(|v| v * v).sum() / (m as f64 * bsz as f64);
        let dr = diff * (2.0 / (m as f64 * bsz as f64));
        let (dec_grads, mut demb) = bundle.decoder.backward_cached(&dec_cache, dr.view())?;

        let mut sim_loss = 0.0;
        for k in 0..bsz {
            let (ua, ub) = (emb.row(k), emb.row(bsz + k));
            let err = ua.dot(&ub) - sg[k];
            sim_loss += err * err;
            if guided {
                let scale = 2.0 * err / bsz as f64;
                demb.row_mut(k).scaled_add(scale, &ub);
                demb.row_mut(bsz + k).scaled_add(scale, &ua);
            }
        }
        sim_loss /= bsz as f64;

        let mut draw = Array2::zeros(raw.dim());
        for (k, mut row) in draw.rows_mut().into_iter().enumerate() {
            row.assign(&project_backward(raw.row(k), norms[k], demb.row(k)));
        }
        let (enc_grads, _) = bundle.encoder.backward_cached(&enc_cache, draw.view())?;
        enc_opt.apply(&mut bundle.encoder, &enc_grads)?;
        dec_opt.apply(&mut bundle.decoder, &dec_grads)?;
        if !(sim_loss.is_finite() && rec_loss.is_finite()) {
            return Err(Error::TrainingDiverged { step: it + 1 });
        }

        win_sim += sim_loss;
        win_rec += rec_loss;
        win_len += 1;
        if win_len == cfg.checkpoint_every || it + 1 == cfg.train.iterations {
            let (s, r) = (win_sim / win_len as f64, win_rec / win_len as f64);
            let total = if guided { s + r } else { r };
            history.checkpoints.push(LossCheckpoint {
                iteration: it + 1,
                similarity: s,
                reconstruction: r,
                total,
            });
            (win_sim, win_rec, win_len) = (0.0, 0.0, 0);
        }
    }
    Ok((bundle, history))
}

/// Mean similarity loss of `bundle` over `pairs`, with the training-time norm
/// floor so that zero embeddings do not abort the evaluation.
pub fn mean_similarity_loss(bundle: &EncoderBundle, pairs: &[GraphPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("no pairs"));
    }
    let a: Vec<Dag> = pairs.iter().map(|p| p.a.clone()).collect();
    let b: Vec<Dag> = pairs.iter().map(|p| p.b.clone()).collect();
    let ea = bundle.embed_matrix(&a)?;
    let eb = bundle.embed_matrix(&b)?;
    let total: f64 = pairs
        .iter()
        .enumerate()
        .map(|(k, p)| (ea.row(k).dot(&eb.row(k)) - p.target).powi(2))
        .sum();
    Ok(total / pairs.len() as f64)
}

/// Embedding cosine similarities of each pair, with the same norm floor.
pub fn pair_cosines(bundle: &EncoderBundle, pairs: &[GraphPair]) -> Result<Vec<f64>> {
    let a: Vec<Dag> = pairs.iter().map(|p| p.a.clone()).collect();
    let b: Vec<Dag> = pairs.iter().map(|p| p.b.clone()).collect();
    let ea = bundle.embed_matrix(&a)?;
    let eb = bundle.embed_matrix(&b)?;
    Ok((0..pairs.len())
        .map(|k| ea.row(k).dot(&eb.row(k)))
        .collect())
}

/// Mean squared distance of embedded vectors to their centroid.
pub fn embedding_spread(bundle: &EncoderBundle, dags: &[Dag]) -> Result<f64> {
    let e = bundle.embed_matrix(dags)?;
    let mean = e
        .mean_axis(Axis(0))
        .ok_or_else(|| Error::invalid("empty set"))?;
    let centered = e - &mean;
    Ok(centered.mapv(|v| v * v).sum() / dags.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BundleManifest {
    n: usize,
    d: usize,
    wl_cfg: WlConfig,
    input: EncoderInput,
    objective: Objective,
    seed: u64,
    pair_count: usize,
}

pub const ENCODER_FILE: &str = "encoder.ckpt";
pub const DECODER_FILE: &str = "decoder.ckpt";
pub const MANIFEST_FILE: &str = "encoder.json";

/// Writes the two network checkpoints and a JSON manifest into `dir`.
pub fn save_bundle(dir: &Path, bundle: &EncoderBundle) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = BundleManifest {
        n: bundle.n,
        d: bundle.d,
        wl_cfg: bundle.wl_cfg,
        input: bundle.input.clone(),
        objective: bundle.objective,
        seed: bundle.seed,
        pair_count: bundle.pair_count,
    };
    let meta = serde_json::to_value(&manifest)?;
    nn::save_checkpoint(
        &dir.join(ENCODER_FILE),
        &bundle.encoder,
        bundle.seed,
        meta.clone(),
    )?;
    nn::save_checkpoint(&dir.join(DECODER_FILE), &bundle.decoder, bundle.seed, meta)?;
    fs::write(
        dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    Ok(())
}

pub fn load_bundle(dir: &Path) -> Result<EncoderBundle> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path)?;
    let m: BundleManifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    let (encoder, _) = nn::load_checkpoint(&dir.join(ENCODER_FILE))?;
    let (decoder, _) = nn::load_checkpoint(&dir.join(DECODER_FILE))?;
    let m_adj = m.n * m.n.saturating_sub(1) / 2;
    if encoder.input_dim() != m.input.width(m.n)
        || encoder.output_dim() != m.d
        || decoder.input_dim() != m.d
        || decoder.output_dim() != m_adj
    {
        return Err(Error::format(
            dir,
            "encoder/decoder dims disagree with the manifest",
        ));
    }
    Ok(EncoderBundle {
        encoder,
        decoder,
        n: m.n,
        d: m.d,
        wl_cfg: m.wl_cfg,
        input: m.input,
        objective: m.objective,
        seed: m.seed,
        pair_count: m.pair_count,
    })
}
