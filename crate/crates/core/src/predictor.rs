//! Efficiency-score predictor and the iterative estimator-building loop.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderBundle, EncoderInput, GraphVector};
use crate::error::{Error, Result};
use crate::graph::{Dag, DagSampler};
use crate::nn::{self, Activation, Mlp, OptState, TrainConfig};
use crate::oracle::{efficiency_score, Evaluation, Oracle};
use crate::rng::{self, stream};
use crate::wl_kernel::wl_canonical_hash;

/// Maps an architecture to the predictor's input vector.
#[derive(Debug, Clone, PartialEq)]
pub enum Featurizer {
    /// Raw flattened upper triangle (plus op one-hots if configured).
    Adjacency { n: usize, input: EncoderInput },
    /// Output of a trained encoder.
    Encoder(Box<EncoderBundle>),
}

impl Featurizer {
    pub fn dim(&self) -> usize {
        match self {
            Featurizer::Adjacency { n, input } => input.width(*n),
            Featurizer::Encoder(b) => b.d,
        }
    }

    pub fn n(&self) -> usize {
        match self {
            Featurizer::Adjacency { n, .. } => *n,
            Featurizer::Encoder(b) => b.n,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Featurizer::Adjacency { .. } => "adjacency",
            Featurizer::Encoder(_) => "encoder",
        }
    }

    pub fn featurize_matrix(&self, dags: &[Dag]) -> Result<Array2<f64>> {
        match self {
            Featurizer::Adjacency { n, input } => {
                let mut x = Array2::zeros((dags.len(), input.width(*n)));
                for (mut row, dag) in x.rows_mut().into_iter().zip(dags) {
                    if dag.n() != *n {
                        return Err(Error::NodeCountMismatch {
                            expected: *n,
                            got: dag.n(),
                        });
                    }
                    row.assign(&ndarray::Array1::from(input.encode(dag)?));
                }
                Ok(x)
            }
            Featurizer::Encoder(b) => b.embed_matrix(dags),
        }
    }

    pub fn featurize(&self, dag: &Dag) -> Result<GraphVector> {
        let m = self.featurize_matrix(std::slice::from_ref(dag))?;
        Ok(GraphVector(m.row(0).to_vec()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub g: GraphVector,
    pub y: f64,
    /// Canonical hash of the architecture the vector came from.
    pub provenance: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictorConfig {
    pub hidden: Vec<usize>,
    /// Minibatch steps after each newly added sample.
    pub finetune_steps: usize,
    /// Full-batch steps over the final set once sampling ends.
    pub final_steps: usize,
    pub train: TrainConfig,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            hidden: vec![128, 128],
            finetune_steps: 5,
            final_steps: 500,
            train: TrainConfig::default(),
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.contains(&0) {
            return Err(Error::invalid("hidden widths must be positive"));
        }
        self.train.validate()
    }
}

/// Affine map between raw scores and the network's output. The network is
/// trained on standardized targets; efficiency scores cluster tightly and an
/// unscaled fit extrapolates poorly off the training set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetScaling {
    pub shift: f64,
    pub scale: f64,
}

impl TargetScaling {
    pub const IDENTITY: TargetScaling = TargetScaling {
        shift: 0.0,
        scale: 1.0,
    };

    /// Mean and population standard deviation of `ys`; the scale falls back
    /// to 1 when the spread is too small to divide by.
    pub fn fit(ys: &[f64]) -> Self {
        if ys.is_empty() {
            return Self::IDENTITY;
        }
        let n = ys.len() as f64;
        let shift = ys.iter().sum::<f64>() / n;
        let sd = (ys.iter().map(|y| (y - shift).powi(2)).sum::<f64>() / n).sqrt();
        TargetScaling {
            shift,
            scale: if sd > 1e-9 { sd } else { 1.0 },
        }
    }

    pub fn to_target(&self, y: f64) -> f64 {
        (y - self.shift) / self.scale
    }

    pub fn to_score(&self, out: f64) -> f64 {
        out * self.scale + self.shift
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Predictor {
    pub net: Mlp,
    pub scaling: TargetScaling,
    pub training_set: Vec<ScoredSample>,
    pub d: usize,
}

impl Predictor {
    pub fn init(d: usize, cfg: &PredictorConfig) -> Result<Self> {
        cfg.validate()?;
        let mut dims = vec![d];
        dims.extend(&cfg.hidden);
        dims.push(1);
        let seed = rng::derive_seed(cfg.train.rng_seed, stream::PREDICTOR_INIT);
        Ok(Predictor {
            net: Mlp::xavier(&dims, Activation::Relu, Activation::Identity, seed)?,
            scaling: TargetScaling::IDENTITY,
            training_set: Vec::new(),
            d,
        })
    }

    pub fn predict_matrix(&self, x: ArrayView2<f64>) -> Result<Vec<f64>> {
        Ok(self
            .net
            .forward_batch(x)?
            .column(0)
            .iter()
            .map(|&o| self.scaling.to_score(o))
            .collect())
    }

    /// Mean squared error on the accumulated training set.
    pub fn training_mse(&self) -> Result<f64> {
        if self.training_set.is_empty() {
            return Err(Error::invalid("empty training set"));
        }
        let (x, y) = stack(&self.training_set, self.d)?;
        let pred = self.predict_matrix(x.view())?;
        Ok(pred
            .iter()
            .zip(&y)
            .map(|(p, t)| (p - t).powi(2))
            .sum::<f64>()
            / y.len() as f64)
    }
}

pub fn predict(p: &Predictor, g: &GraphVector) -> Result<f64> {
    if g.len() != p.d {
        return Err(Error::DimensionMismatch {
            expected: p.d,
            got: g.len(),
        });
    }
    Ok(p.scaling.to_score(p.net.forward(g.values())?[0]))
}

fn stack(samples: &[ScoredSample], d: usize) -> Result<(Array2<f64>, Vec<f64>)> {
    let mut x = Array2::zeros((samples.len(), d));
    for (mut row, s) in x.rows_mut().into_iter().zip(samples) {
        if s.g.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: s.g.len(),
            });
        }
        row.assign(&ndarray::ArrayView1::from(s.g.values()));
    }
    Ok((x, samples.iter().map(|s| s.y).collect()))
}

/// One squared-error step on the given rows, in standardized units; returns
/// the loss before the step.
fn regression_step(
    p: &mut Predictor,
    x: Array2<f64>,
    y: &[f64],
    opt: &mut OptState,
) -> Result<f64> {
    let cache = p.net.forward_cached(x)?;
    let out = cache.output();
    let b = y.len() as f64;
    let mut grad = Array2::zeros((y.len(), 1));
    let mut loss = 0.0;
    for (k, &t) in y.iter().enumerate() {
        let err = out[[k, 0]] - p.scaling.to_target(t);
        loss += err * err;
        grad[[k, 0]] = 2.0 * err / b;
    }
    let (g, _) = p.net.backward_cached(&cache, grad.view())?;
    opt.apply(&mut p.net, &g)?;
    Ok(loss / b)
}

/// Full-batch steps over the whole set; returns the loss trace.
fn polish(p: &mut Predictor, steps: usize, opt: &mut OptState) -> Result<Vec<f64>> {
    let (x, y) = stack(&p.training_set, p.d)?;
    let mut trace = Vec::with_capacity(steps);
    for _ in 0..steps {
        trace.push(regression_step(p, x.clone(), &y, opt)?);
    }
    Ok(trace)
}

/// Batch mode: trains a fresh predictor on a fixed sample set with
/// `cfg.train.iterations` minibatch steps followed by `cfg.final_steps`
/// full-batch steps.
pub fn fit_predictor(
    d: usize,
    samples: Vec<ScoredSample>,
    cfg: &PredictorConfig,
) -> Result<Predictor> {
    if samples.is_empty() {
        return Err(Error::invalid("no training samples"));
    }
    let mut p = Predictor::init(d, cfg)?;
    p.training_set = samples;
    let (x, y) = stack(&p.training_set, d)?;
    p.scaling = TargetScaling::fit(&y);
    let mut opt = OptState::new(&cfg.train);
    let mut rng = rng::rng_from(cfg.train.rng_seed, stream::PREDICTOR_BATCHES);
    let bsz = cfg.train.batch_size.min(y.len());
    for _ in 0..cfg.train.iterations {
        let idx: Vec<usize> = (0..bsz).map(|_| rng.gen_range(0..y.len())).collect();
        let xb = x.select(ndarray::Axis(0), &idx);
        let yb: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
        regression_step(&mut p, xb, &yb, &mut opt)?;
    }
    polish(&mut p, cfg.final_steps, &mut opt)?;
    Ok(p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MissingPolicy {
    /// Drop the draw and keep going; the log ends up shorter than the budget.
    #[default]
    Skip,
    Fail,
}

/// One line of the estimator sample log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    pub hash: String,
    pub dag: Dag,
    pub evaluation: Evaluation,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorRun {
    pub predictor: Predictor,
    pub log: Vec<SampleRecord>,
    pub skipped: usize,
    /// Full-set loss at each final full-batch step.
    pub final_trace: Vec<f64>,
}

/// Sample, evaluate, score, embed, append and fine-tune, `sample_budget`
/// times; then polish on the accumulated set.
#[allow(clippy::too_many_arguments)]
pub fn build_estimator(
    oracle: &dyn Oracle,
    featurizer: &Featurizer,
    sampler: &dyn DagSampler,
    sample_budget: usize,
    cfg: &PredictorConfig,
    lambda: f64,
    missing: MissingPolicy,
) -> Result<EstimatorRun> {
    if sample_budget == 0 {
        return Err(Error::invalid("sample_budget must be at least 1"));
    }
    let d = featurizer.dim();
    let mut p = Predictor::init(d, cfg)?;
    let mut opt = OptState::new(&cfg.train);
    let mut sample_rng = rng::rng_from(cfg.train.rng_seed, stream::ESTIMATOR_SAMPLES);
    let mut batch_rng = rng::rng_from(cfg.train.rng_seed, stream::PREDICTOR_BATCHES);
    let mut log = Vec::with_capacity(sample_budget);
    let mut skipped = 0;
    let mut xs: Vec<f64> = Vec::with_capacity(sample_budget * d);
    let mut ys: Vec<f64> = Vec::with_capacity(sample_budget);

    for index in 0..sample_budget {
        let dag = sampler.sample(&mut sample_rng)?;
        let evaluation = match oracle.evaluate(&dag) {
            Ok(e) => e,
            Err(Error::MissingArchitecture { hash }) if missing == MissingPolicy::Skip => {
                log::warn!("architecture {hash} missing from the benchmark table; skipped");
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let score = efficiency_score(&evaluation, lambda)?;
        let g = featurizer.featurize(&dag)?;
        let hash = wl_canonical_hash(&dag, 3);
        xs.extend_from_slice(g.values());
        ys.push(score);
        p.training_set.push(ScoredSample {
            g,
            y: score,
            provenance: hash.clone(),
        });
        log.push(SampleRecord {
            index,
            hash,
            dag,
            evaluation,
            score,
        });

        // Running statistics; the final polish settles the net on the last ones.
        p.scaling = TargetScaling::fit(&ys);
        let have = ys.len();
        let bsz = cfg.train.batch_size.min(have);
        for _ in 0..cfg.finetune_steps {
            let mut xb = Array2::zeros((bsz, d));
            let mut yb = Vec::with_capacity(bsz);
            for mut row in xb.rows_mut() {
                let i = batch_rng.gen_range(0..have);
                row.assign(&ndarray::ArrayView1::from(&xs[i * d..(i + 1) * d]));
                yb.push(ys[i]);
            }
            regression_step(&mut p, xb, &yb, &mut opt)?;
        }
    }
    if p.training_set.is_empty() {
        return Err(Error::invalid(
            "every sampled architecture was missing from the table",
        ));
    }
    let final_trace = polish(&mut p, cfg.final_steps, &mut opt)?;
    Ok(EstimatorRun {
        predictor: p,
        log,
        skipped,
        final_trace,
    })
}

/// Result of checking `Var P(X) <= K^2 E||X - E X||^2` on one vector set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    /// Output variance.
    pub lhs: f64,
    /// `K_spectral^2` times the input variance.
    pub rhs: f64,
    pub input_variance: f64,
    /// Largest slope over sampled pairs; a lower estimate of the Lipschitz constant.
    pub k_sampled: f64,
    /// Product of layer spectral norms; an upper bound.
    pub k_spectral: f64,
    pub satisfied: bool,
}

pub fn empirical_variance_bound_check(
    p: &Predictor,
    vector_sets: &[Vec<GraphVector>],
) -> Result<Vec<BoundReport>> {
    let k_spectral = p.scaling.scale.abs() * p.net.lipschitz_upper_bound();
    vector_sets
        .iter()
        .map(|set| {
            if set.len() < 2 {
                return Err(Error::invalid("each vector set needs at least two vectors"));
            }
            let samples: Vec<ScoredSample> = set
                .iter()
                .map(|g| ScoredSample {
                    g: g.clone(),
                    y: 0.0,
                    provenance: String::new(),
                })
                .collect();
            let (x, _) = stack(&samples, p.d)?;
            let out = p.predict_matrix(x.view())?;
            let n = set.len() as f64;
            let mean_out = out.iter().sum::<f64>() / n;
            let lhs = out.iter().map(|o| (o - mean_out).powi(2)).sum::<f64>() / n;
            let mean_in = x.mean_axis(ndarray::Axis(0)).expect("non-empty");
            let input_variance = (&x - &mean_in).mapv(|v| v * v).sum() / n;

            let mut k_sampled: f64 = 0.0;
            for i in 0..set.len() {
                for j in i + 1..set.len() {
                    let dist = (&x.row(i) - &x.row(j)).mapv(|v| v * v).sum().sqrt();
                    if dist > 0.0 {
                        k_sampled = k_sampled.max((out[i] - out[j]).abs() / dist);
                    }
                }
            }
            if input_variance == 0.0 {
                return Ok(BoundReport {
                    lhs: 0.0,
                    rhs: 0.0,
                    input_variance,
                    k_sampled,
                    k_spectral,
                    satisfied: true,
                });
            }
            let rhs = k_spectral * k_spectral * input_variance;
            Ok(BoundReport {
                lhs,
                rhs,
                input_variance,
                k_sampled,
                k_spectral,
                satisfied: lhs <= rhs * (1.0 + 1e-12),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorManifest {
    pub d: usize,
    pub lambda: f64,
    pub sample_budget: usize,
    pub seed: u64,
    pub oracle: serde_json::Value,
    pub featurizer: String,
}

pub const PREDICTOR_FILE: &str = "predictor.ckpt";
pub const PREDICTOR_MANIFEST: &str = "predictor.json";

pub fn save_predictor(dir: &Path, p: &Predictor, manifest: &PredictorManifest) -> Result<()> {
    fs::create_dir_all(dir)?;
    let header = serde_json::json!({ "manifest": manifest, "scaling": p.scaling });
    nn::save_checkpoint(&dir.join(PREDICTOR_FILE), &p.net, manifest.seed, header)?;
    fs::write(
        dir.join(PREDICTOR_MANIFEST),
        serde_json::to_string_pretty(manifest)? + "\n",
    )?;
    Ok(())
}

/// Loads a predictor without its training set.
pub fn load_predictor(dir: &Path) -> Result<(Predictor, PredictorManifest)> {
    let path = dir.join(PREDICTOR_MANIFEST);
    let manifest: PredictorManifest = serde_json::from_str(&fs::read_to_string(&path)?)
        .map_err(|e| Error::format(&path, e.to_string()))?;
    let ckpt = dir.join(PREDICTOR_FILE);
    let (net, header) = nn::load_checkpoint(&ckpt)?;
    let scaling: TargetScaling = serde_json::from_value(header.config["scaling"].clone())
        .map_err(|e| Error::format(&ckpt, format!("target scaling: {e}")))?;
    if net.input_dim() != manifest.d || net.output_dim() != 1 {
        return Err(Error::format(
            dir,
            "predictor dims disagree with the manifest",
        ));
    }
    Ok((
        Predictor {
            net,
            scaling,
            training_set: Vec::new(),
            d: manifest.d,
        },
        manifest,
    ))
}
