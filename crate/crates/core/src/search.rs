//! Bootstrap optimization: sample a pool with replacement, score it with the
//! predictor, keep the argmax.

use std::cmp::Ordering;

use ndarray::{concatenate, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Dag, DagSampler};
use crate::oracle::{efficiency_score, BenchmarkTable, Oracle};
use crate::predictor::{Featurizer, Predictor};
use crate::rng::{self, stream};
use crate::wl_kernel::wl_canonical_hash;

/// Hash depth used for tie-breaking and table keys.
pub const HASH_ROUNDS: usize = 3;

const CHUNK: usize = 2048;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best_dag: Dag,
    pub best_hash: String,
    pub predicted_score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_score: Option<f64>,
    pub pool_size: usize,
    pub seed: u64,
}

impl SearchResult {
    /// Re-evaluates the winner with the oracle and records its true score.
    pub fn with_true_score(mut self, oracle: &dyn Oracle, lambda: f64) -> Result<Self> {
        self.true_score = Some(efficiency_score(&oracle.evaluate(&self.best_dag)?, lambda)?);
        Ok(self)
    }
}

/// A scored pool, kept around for surface export.
#[derive(Debug, Clone)]
pub struct ScoredPool {
    pub dags: Vec<Dag>,
    pub features: Array2<f64>,
    pub scores: Vec<f64>,
}

/// Draws `pool_size` architectures with replacement. Sampling is sequential so
/// the pool depends only on the seed.
pub fn sample_pool(sampler: &dyn DagSampler, pool_size: usize, seed: u64) -> Result<Vec<Dag>> {
    let mut rng = rng::rng_from(seed, stream::POOL);
    (0..pool_size).map(|_| sampler.sample(&mut rng)).collect()
}

/// Features and predicted scores for every pool member, in pool order.
pub fn score_pool(
    featurizer: &Featurizer,
    p: &Predictor,
    dags: &[Dag],
) -> Result<(Array2<f64>, Vec<f64>)> {
    if featurizer.dim() != p.d {
        return Err(Error::DimensionMismatch {
            expected: p.d,
            got: featurizer.dim(),
        });
    }
    let parts: Vec<(Array2<f64>, Vec<f64>)> = dags
        .par_chunks(CHUNK)
        .map(|chunk| {
            let x = featurizer.featurize_matrix(chunk)?;
            let s = p.predict_matrix(x.view())?;
            Ok((x, s))
        })
        .collect::<Result<_>>()?;
    if parts.is_empty() {
        return Ok((Array2::zeros((0, p.d)), Vec::new()));
    }
    let views: Vec<_> = parts.iter().map(|(x, _)| x.view()).collect();
    let features = concatenate(Axis(0), &views).expect("chunks share width");
    let scores = parts.into_iter().flat_map(|(_, s)| s).collect();
    Ok((features, scores))
}

/// Index of the highest score; ties go to the lowest canonical hash. Hashes
/// are only computed when a tie actually occurs.
pub fn argmax_with_tiebreak(dags: &[Dag], scores: &[f64]) -> Result<usize> {
    if dags.is_empty() || dags.len() != scores.len() {
        return Err(Error::invalid(
            "argmax needs a non-empty pool with one score per member",
        ));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::Domain(format!(
            "predicted score for pool member {i} is NaN"
        )));
    }
    let top = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tied: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] == top).collect();
    if tied.len() == 1 {
        return Ok(tied[0]);
    }
    let best = tied
        .into_iter()
        .map(|i| (wl_canonical_hash(&dags[i], HASH_ROUNDS), i))
        .min_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)))
        .expect("non-empty");
    Ok(best.1)
}

/// Samples, scores and selects in one go, returning the scored pool as well.
pub fn bootstrap_search(
    featurizer: &Featurizer,
    p: &Predictor,
    sampler: &dyn DagSampler,
    pool_size: usize,
    seed: u64,
) -> Result<(SearchResult, ScoredPool)> {
    if pool_size == 0 {
        return Err(Error::invalid("pool_size must be at least 1"));
    }
    let dags = sample_pool(sampler, pool_size, seed)?;
    let (features, scores) = score_pool(featurizer, p, &dags)?;
    let i = argmax_with_tiebreak(&dags, &scores)?;
    let result = SearchResult {
        best_dag: dags[i].clone(),
        best_hash: wl_canonical_hash(&dags[i], HASH_ROUNDS),
        predicted_score: scores[i],
        true_score: None,
        pool_size,
        seed,
    };
    Ok((
        result,
        ScoredPool {
            dags,
            features,
            scores,
        },
    ))
}

pub fn bootstrap_optimize(
    featurizer: &Featurizer,
    p: &Predictor,
    sampler: &dyn DagSampler,
    pool_size: usize,
    seed: u64,
) -> Result<SearchResult> {
    bootstrap_search(featurizer, p, sampler, pool_size, seed).map(|(r, _)| r)
}

/// Best accuracy in the table minus the table accuracy of the selected cell.
pub fn global_prediction_bias(table: &BenchmarkTable, result: &SearchResult) -> Result<f64> {
    let best = table.best_accuracy().ok_or(Error::EmptySpace)?;
    let hash = table.hash(&result.best_dag);
    let entry = table
        .get(&hash)
        .ok_or(Error::MissingArchitecture { hash })?;
    Ok(best - entry.evaluation.accuracy)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExhaustiveResult {
    pub best_dag: Dag,
    pub best_score: f64,
    /// Score of every scorable member, in space order.
    pub scores: Vec<f64>,
    /// Members the score is undefined for (degenerate cells under a MAC penalty).
    pub unscorable: usize,
}

impl ExhaustiveResult {
    /// Fraction of scored members strictly above `score`.
    pub fn fraction_above(&self, score: f64) -> f64 {
        self.scores.iter().filter(|&&s| s > score).count() as f64 / self.scores.len() as f64
    }
}

/// True argmax of the efficiency score over a finite space. Cells whose score
/// is undefined are skipped; ties go to the lowest canonical hash.
pub fn exhaustive_oracle_search(
    space: &[Dag],
    oracle: &dyn Oracle,
    lambda: f64,
) -> Result<ExhaustiveResult> {
    let scored: Vec<Option<f64>> = space
        .par_iter()
        .map(
            |dag| match efficiency_score(&oracle.evaluate(dag)?, lambda) {
                Ok(s) => Ok(Some(s)),
                Err(Error::Domain(_)) => Ok(None),
                Err(e) => Err(e),
            },
        )
        .collect::<Result<_>>()?;
    let mut best: Option<(f64, String, usize)> = None;
    for (i, s) in scored.iter().enumerate() {
        let Some(s) = *s else { continue };
        let replace = match &best {
            None => true,
            Some((b, h, _)) => match s.partial_cmp(b).unwrap_or(Ordering::Less) {
                Ordering::Greater => true,
                Ordering::Equal => wl_canonical_hash(&space[i], HASH_ROUNDS) < *h,
                Ordering::Less => false,
            },
        };
        if replace {
            best = Some((s, wl_canonical_hash(&space[i], HASH_ROUNDS), i));
        }
    }
    let (best_score, _, i) = best.ok_or(Error::EmptySpace)?;
    let scores: Vec<f64> = scored.iter().flatten().copied().collect();
    Ok(ExhaustiveResult {
        best_dag: space[i].clone(),
        best_score,
        unscorable: space.len() - scores.len(),
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderInput;
    use crate::graph::{enumerate_dags, OpKind, SearchSpace};
    use crate::nn::{Activation, Mlp};
    use crate::oracle::{Evaluation, SyntheticOracle, SyntheticOracleConfig, TableMeta};
    use crate::predictor::{PredictorConfig, TargetScaling};

    fn adjacency(n: usize) -> Featurizer {
        Featurizer::Adjacency {
            n,
            input: EncoderInput::StructureOnly,
        }
    }

    fn random_predictor(d: usize, seed: u64) -> Predictor {
        let mut cfg = PredictorConfig::default();
        cfg.train.rng_seed = seed;
        Predictor::init(d, &cfg).unwrap()
    }

    fn constant_predictor(d: usize) -> Predictor {
        Predictor {
            net: Mlp::zeros(&[d, 4, 1], Activation::Relu, Activation::Identity).unwrap(),
            scaling: TargetScaling::IDENTITY,
            training_set: vec![],
            d,
        }
    }

    #[test]
    fn returns_exact_pool_argmax() {
        let space = SearchSpace::new(6, 0.5, vec![OpKind::Conv1x1]).unwrap();
        let f = adjacency(6);
        let p = random_predictor(15, 1);
        let (r, pool) = bootstrap_search(&f, &p, &space, 3000, 11).unwrap();
        assert!(pool.scores.iter().all(|&s| s <= r.predicted_score));
        let direct = crate::predictor::predict(&p, &f.featurize(&r.best_dag).unwrap()).unwrap();
        assert_eq!(direct, r.predicted_score);
        assert_eq!(pool.features.nrows(), 3000);
    }

    #[test]
    fn pool_of_one_returns_the_sample() {
        let space = SearchSpace::new(5, 0.5, vec![OpKind::Conv1x1]).unwrap();
        let dags = sample_pool(&space, 1, 4).unwrap();
        let r = bootstrap_optimize(&adjacency(5), &random_predictor(10, 2), &space, 1, 4).unwrap();
        assert_eq!(r.best_dag, dags[0]);
        assert!(bootstrap_optimize(&adjacency(5), &random_predictor(10, 2), &space, 0, 4).is_err());
    }

    #[test]
    fn constant_predictor_uses_hash_tiebreak() {
        let space = SearchSpace::new(5, 0.5, vec![OpKind::Conv1x1, OpKind::DwSepConv3x3]).unwrap();
        let p = constant_predictor(10);
        let a = bootstrap_optimize(&adjacency(5), &p, &space, 200, 8).unwrap();
        let b = bootstrap_optimize(&adjacency(5), &p, &space, 200, 8).unwrap();
        assert_eq!(a, b);
        let lowest = sample_pool(&space, 200, 8)
            .unwrap()
            .iter()
            .map(|d| wl_canonical_hash(d, HASH_ROUNDS))
            .min()
            .unwrap();
        assert_eq!(a.best_hash, lowest);
    }

    #[test]
    fn result_is_independent_of_thread_count() {
        let space = SearchSpace::new(6, 0.4, vec![OpKind::Conv1x1]).unwrap();
        let p = random_predictor(15, 3);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| bootstrap_optimize(&adjacency(6), &p, &space, 5000, 21).unwrap())
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn bias_is_table_best_minus_selected() {
        let dags = enumerate_dags(3, &[OpKind::Conv1x1]).unwrap();
        let mut table = BenchmarkTable::new(TableMeta {
            n: 3,
            ops: vec![OpKind::Conv1x1],
            h: HASH_ROUNDS,
        });
        table.insert(&dags[1], Evaluation::new(0.946, 1.0).unwrap());
        table.insert(&dags[3], Evaluation::new(0.944, 1.0).unwrap());
        let mut r = SearchResult {
            best_dag: dags[3].clone(),
            best_hash: String::new(),
            predicted_score: 0.0,
            true_score: None,
            pool_size: 1,
            seed: 0,
        };
        assert!((global_prediction_bias(&table, &r).unwrap() - 0.002).abs() < 1e-12);
        r.best_dag = dags[1].clone();
        assert_eq!(global_prediction_bias(&table, &r).unwrap(), 0.0);
        r.best_dag = Dag::complete(3, OpKind::DwSepConv3x3).unwrap();
        assert!(matches!(
            global_prediction_bias(&table, &r),
            Err(Error::MissingArchitecture { .. })
        ));
    }

    #[test]
    fn exhaustive_search_matches_brute_force() {
        let oracle = SyntheticOracle::new(SyntheticOracleConfig::default(), 16, (8, 8)).unwrap();
        let single = vec![Dag::chain(3, OpKind::Conv1x1).unwrap()];
        assert_eq!(
            exhaustive_oracle_search(&single, &oracle, 0.01)
                .unwrap()
                .best_dag,
            single[0]
        );
        assert!(matches!(
            exhaustive_oracle_search(&[], &oracle, 0.01),
            Err(Error::EmptySpace)
        ));

        let space = enumerate_dags(2, &[OpKind::Conv1x1, OpKind::DwSepConv3x3]).unwrap();
        assert_eq!(space.len(), 8);
        let r = exhaustive_oracle_search(&space, &oracle, 0.01).unwrap();
        let mut best = f64::NEG_INFINITY;
        for d in &space {
            if let Ok(s) = efficiency_score(&oracle.evaluate(d).unwrap(), 0.01) {
                best = best.max(s);
            }
        }
        assert_eq!(r.best_score, best);
        assert_eq!(r.scores.len() + r.unscorable, 8);
    }

    #[test]
    fn full_coverage_pool_finds_true_best_under_oracle_predictor() {
        // With a predictor that is the oracle itself and a pool covering the
        // space, bootstrap and exhaustive search agree.
        let oracle = SyntheticOracle::new(SyntheticOracleConfig::default(), 16, (8, 8)).unwrap();
        let space: Vec<Dag> = enumerate_dags(4, &[OpKind::Conv1x1])
            .unwrap()
            .into_iter()
            .filter(|d| efficiency_score(&oracle.evaluate(d).unwrap(), 0.01).is_ok())
            .collect();
        let ex = exhaustive_oracle_search(&space, &oracle, 0.01).unwrap();
        let scores: Vec<f64> = space
            .iter()
            .map(|d| efficiency_score(&oracle.evaluate(d).unwrap(), 0.01).unwrap())
            .collect();
        let i = argmax_with_tiebreak(&space, &scores).unwrap();
        assert_eq!(space[i], ex.best_dag);
    }
}
