//! Evaluation protocols: the predictor correlation grid and the tabular
//! global-prediction-bias sweep.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{train_encoder, EncoderBundle, EncoderConfig, EncoderInput, Objective};
use crate::error::{Error, Result};
use crate::graph::{Dag, DagSampler};
use crate::metrics::{kendall_tau, pearson};
use crate::oracle::{efficiency_score, BenchmarkTable, Oracle};
use crate::predictor::{
    build_estimator, fit_predictor, Featurizer, MissingPolicy, PredictorConfig, SampleRecord,
    ScoredSample,
};
use crate::rng::{self, stream};
use crate::search::{bootstrap_optimize, global_prediction_bias, HASH_ROUNDS};
use crate::wl_kernel::wl_canonical_hash;

/// Training-set proportions (percent) of the correlation grid.
pub const DEFAULT_PROPORTIONS: [u32; 6] = [10, 20, 30, 50, 70, 100];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Adjacency,
    PlainAutoencoder,
    KernelGuided,
}

impl Method {
    pub const ALL: [Method; 3] = [
        Method::Adjacency,
        Method::PlainAutoencoder,
        Method::KernelGuided,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Adjacency => "adjacency",
            Method::PlainAutoencoder => "plain-autoencoder",
            Method::KernelGuided => "kernel-guided",
        }
    }

    pub fn objective(self) -> Option<Objective> {
        match self {
            Method::Adjacency => None,
            Method::PlainAutoencoder => Some(Objective::ReconstructionOnly),
            Method::KernelGuided => Some(Objective::KernelGuided),
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown method {s:?}")))
    }
}

/// Featurizer for `method`: raw adjacency, or an encoder trained from
/// `encoder_cfg` with the method's objective.
pub fn featurizer_for(method: Method, encoder_cfg: &EncoderConfig) -> Result<Featurizer> {
    match method.objective() {
        None => Ok(Featurizer::Adjacency {
            n: encoder_cfg.n,
            input: encoder_cfg.input.clone(),
        }),
        Some(objective) => {
            let cfg = EncoderConfig {
                objective,
                ..encoder_cfg.clone()
            };
            let (bundle, _) = train_encoder(&cfg)?;
            Ok(Featurizer::Encoder(Box::new(bundle)))
        }
    }
}

pub fn encoder_featurizer(bundle: EncoderBundle) -> Featurizer {
    Featurizer::Encoder(Box::new(bundle))
}

pub fn adjacency_featurizer(n: usize, input: EncoderInput) -> Featurizer {
    Featurizer::Adjacency { n, input }
}

/// Samples `count` architectures and evaluates them with the oracle.
pub fn make_corpus(
    sampler: &dyn DagSampler,
    oracle: &dyn Oracle,
    count: usize,
    lambda: f64,
    seed: u64,
) -> Result<Vec<SampleRecord>> {
    let mut rng = rng::rng_from(seed, stream::CORPUS);
    let dags: Vec<Dag> = (0..count)
        .map(|_| sampler.sample(&mut rng))
        .collect::<Result<_>>()?;
    dags.into_par_iter()
        .enumerate()
        .map(|(index, dag)| {
            let evaluation = oracle.evaluate(&dag)?;
            Ok(SampleRecord {
                index,
                hash: wl_canonical_hash(&dag, HASH_ROUNDS),
                score: efficiency_score(&evaluation, lambda)?,
                dag,
                evaluation,
            })
        })
        .collect()
}

pub fn write_records(path: &Path, records: &[SampleRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<SampleRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}

/// Seeded shuffle split into (train, test).
pub fn split_corpus(
    corpus: &[SampleRecord],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<SampleRecord>, Vec<SampleRecord>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "train fraction {train_fraction} must lie in (0, 1)"
        )));
    }
    let mut idx: Vec<usize> = (0..corpus.len()).collect();
    idx.shuffle(&mut rng::rng_from(seed, stream::SPLIT));
    let cut = (corpus.len() as f64 * train_fraction).round() as usize;
    if cut < 2 || corpus.len() - cut < 2 {
        return Err(Error::invalid(format!(
            "corpus of {} is too small to split",
            corpus.len()
        )));
    }
    let pick = |ids: &[usize]| ids.iter().map(|&i| corpus[i].clone()).collect();
    Ok((pick(&idx[..cut]), pick(&idx[cut..])))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub method: Method,
    pub proportion: u32,
    pub n_train: usize,
    pub n_test: usize,
    pub kendall_tau: f64,
    pub pearson_r: f64,
}

/// Trains one predictor per proportion on a prefix of `train` and scores it
/// on `test`. Smaller training sets are nested inside larger ones.
pub fn correlation_grid(
    method: Method,
    featurizer: &Featurizer,
    train: &[SampleRecord],
    test: &[SampleRecord],
    proportions: &[u32],
    cfg: &PredictorConfig,
) -> Result<Vec<CorrelationRow>> {
    let train_dags: Vec<Dag> = train.iter().map(|r| r.dag.clone()).collect();
    let test_dags: Vec<Dag> = test.iter().map(|r| r.dag.clone()).collect();
    let xtrain = featurizer.featurize_matrix(&train_dags)?;
    let xtest = featurizer.featurize_matrix(&test_dags)?;
    let actual: Vec<f64> = test.iter().map(|r| r.score).collect();

    proportions
        .iter()
        .map(|&pct| {
            if pct == 0 || pct > 100 {
                return Err(Error::invalid(format!(
                    "proportion {pct}% is outside 1..=100"
                )));
            }
            let k = ((train.len() as f64 * pct as f64 / 100.0).round() as usize).max(1);
            let samples: Vec<ScoredSample> = (0..k)
                .map(|i| ScoredSample {
                    g: xtrain.row(i).to_vec().into(),
                    y: train[i].score,
                    provenance: train[i].hash.clone(),
                })
                .collect();
            let p = fit_predictor(featurizer.dim(), samples, cfg)?;
            let predicted = p.predict_matrix(xtest.view())?;
            Ok(CorrelationRow {
                method,
                proportion: pct,
                n_train: k,
                n_test: test.len(),
                kendall_tau: kendall_tau(&predicted, &actual)?,
                pearson_r: pearson(&predicted, &actual)?,
            })
        })
        .collect()
}

pub fn write_correlation_csv(path: &Path, rows: &[CorrelationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "method",
        "proportion",
        "n_train",
        "n_test",
        "kendall_tau",
        "pearson_r",
    ])?;
    for r in rows {
        w.write_record([
            r.method.name().to_string(),
            r.proportion.to_string(),
            r.n_train.to_string(),
            r.n_test.to_string(),
            r.kendall_tau.to_string(),
            r.pearson_r.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasRow {
    pub featurizer: String,
    pub budget: usize,
    pub seed: u64,
    pub bias: f64,
    pub selected_accuracy: f64,
}

/// Builds an estimator from table lookups at each budget, runs bootstrap
/// search over the table's architectures, and records the global prediction
/// bias. Scores are `lambda`-weighted efficiency scores; bias is on accuracy.
#[allow(clippy::too_many_arguments)]
pub fn bias_sweep(
    table: &BenchmarkTable,
    name: &str,
    featurizer: &Featurizer,
    budgets: &[usize],
    seed: u64,
    cfg: &PredictorConfig,
    pool_size: usize,
    lambda: f64,
) -> Result<Vec<BiasRow>> {
    let space = table.dags();
    if space.is_empty() {
        return Err(Error::invalid(
            "the table stores no architectures to sample from",
        ));
    }
    budgets
        .iter()
        .map(|&budget| {
            let mut pc = cfg.clone();
            pc.train.rng_seed = rng::derive_seed(seed, budget as u64);
            let run = build_estimator(
                table,
                featurizer,
                &space,
                budget,
                &pc,
                lambda,
                MissingPolicy::Fail,
            )?;
            let result = bootstrap_optimize(
                featurizer,
                &run.predictor,
                &space,
                pool_size,
                pc.train.rng_seed,
            )?;
            let bias = global_prediction_bias(table, &result)?;
            let selected = table
                .get(&table.hash(&result.best_dag))
                .expect("found above")
                .evaluation
                .accuracy;
            Ok(BiasRow {
                featurizer: name.to_string(),
                budget,
                seed,
                bias,
                selected_accuracy: selected,
            })
        })
        .collect()
}
