//! Command-line front end: one JSON run configuration, seeded commands and
//! artifacts written under a single output directory.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::encoder::{self, EncoderConfig, EncoderInput, Objective};
use crate::error::{Error, Result};
use crate::graph::{DagSampler, OpKind, SearchSpace};
use crate::metrics;
use crate::nn::TrainConfig;
use crate::oracle::{
    build_table, BenchmarkTable, Oracle, SyntheticOracle, SyntheticOracleConfig, TableMeta,
};
use crate::predictor::{self, Featurizer, MissingPolicy, PredictorConfig, PredictorManifest};
use crate::protocol::{self, Method, DEFAULT_PROPORTIONS};
use crate::search::{self, HASH_ROUNDS};
use crate::wl_kernel::WlConfig;

pub const SEED_ENV: &str = "GEMNAS_SEED";
pub const EFFECTIVE_CONFIG: &str = "effective_config.json";
pub const ENCODER_DIR: &str = "encoder";
pub const PREDICTOR_DIR: &str = "predictor";
pub const LOSS_CSV: &str = "encoder_loss.csv";
pub const SAMPLE_LOG: &str = "samples.ndjson";
pub const SEARCH_RESULT: &str = "search_result.json";
pub const SURFACE_CSV: &str = "surface.csv";
pub const CORPUS_FILE: &str = "corpus.ndjson";
pub const CORRELATION_CSV: &str = "correlation.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpaceBlock {
    pub n: usize,
    pub edge_prob: f64,
    pub ops: Vec<OpKind>,
    pub channels: usize,
    pub resolution: (usize, usize),
}

impl Default for SpaceBlock {
    fn default() -> Self {
        SpaceBlock {
            n: 8,
            edge_prob: 0.5,
            ops: vec![OpKind::Conv1x1, OpKind::DwSepConv3x3],
            channels: 64,
            resolution: (32, 32),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderBlock {
    pub d: usize,
    pub hidden: Vec<usize>,
    pub pair_count: usize,
    pub wl: WlConfig,
    /// Append per-node op one-hots to the encoder input.
    pub include_ops: bool,
    pub objective: Objective,
    pub edge_prob_range: (f64, f64),
    pub checkpoint_every: usize,
    pub train: TrainConfig,
}

impl Default for EncoderBlock {
    fn default() -> Self {
        let base = EncoderConfig::default();
        EncoderBlock {
            d: 16,
            hidden: base.hidden,
            pair_count: 2000,
            // Op one-hots go into the encoder, so the similarity target sees them too.
            wl: WlConfig {
                use_ops_as_initial_labels: true,
                ..base.wl
            },
            include_ops: true,
            objective: base.objective,
            edge_prob_range: base.edge_prob_range,
            checkpoint_every: base.checkpoint_every,
            train: TrainConfig {
                iterations: 2000,
                ..base.train
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OracleKind {
    #[default]
    Synthetic,
    Tabular,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleBlock {
    pub kind: OracleKind,
    pub lambda: f64,
    pub synthetic: SyntheticOracleConfig,
    /// Benchmark table file, required for the tabular oracle.
    pub table: Option<PathBuf>,
    pub missing: MissingPolicy,
    /// Draw estimator samples from the table's stored architectures instead
    /// of the search space.
    pub sample_from_table: bool,
}

impl Default for OracleBlock {
    fn default() -> Self {
        OracleBlock {
            kind: OracleKind::Synthetic,
            lambda: 0.01,
            synthetic: SyntheticOracleConfig::default(),
            table: None,
            missing: MissingPolicy::Skip,
            sample_from_table: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorBlock {
    pub sample_budget: usize,
    pub predictor: PredictorConfig,
}

impl Default for EstimatorBlock {
    fn default() -> Self {
        EstimatorBlock {
            sample_budget: 100,
            predictor: PredictorConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchBlock {
    pub pool_size: usize,
}

impl Default for SearchBlock {
    fn default() -> Self {
        SearchBlock { pool_size: 5000 }
    }
}

/// Settings of the correlation protocol. The corpus lives in its own small
/// single-op space, separate from the main search space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrelationBlock {
    pub corpus_size: usize,
    pub n: usize,
    pub edge_prob: f64,
    pub ops: Vec<OpKind>,
    pub train_fraction: f64,
    pub proportions: Vec<u32>,
    pub methods: Vec<Method>,
    pub encoder_iterations: usize,
    pub encoder_pair_count: usize,
    pub d: usize,
    pub predictor: PredictorConfig,
}

impl Default for CorrelationBlock {
    fn default() -> Self {
        CorrelationBlock {
            corpus_size: 1000,
            n: 6,
            edge_prob: 0.5,
            ops: vec![OpKind::Conv1x1],
            train_fraction: 0.6,
            proportions: DEFAULT_PROPORTIONS.to_vec(),
            methods: Method::ALL.to_vec(),
            encoder_iterations: 10_000,
            encoder_pair_count: 5000,
            d: 16,
            predictor: PredictorConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub output_dir: PathBuf,
    pub workers: Option<usize>,
    pub search_space: SpaceBlock,
    pub encoder: EncoderBlock,
    pub oracle: OracleBlock,
    pub estimator: EstimatorBlock,
    pub search: SearchBlock,
    pub correlation: CorrelationBlock,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            output_dir: PathBuf::from("runs/default"),
            workers: None,
            search_space: SpaceBlock::default(),
            encoder: EncoderBlock::default(),
            oracle: OracleBlock::default(),
            estimator: EstimatorBlock::default(),
            search: SearchBlock::default(),
            correlation: CorrelationBlock::default(),
        }
    }
}

fn config_err(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// The seed every command uses; set by [`RunConfig::resolve`].
    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    /// Applies command-line overrides and the environment fallback, then
    /// validates. Precedence for the seed: flag, config, `GEMNAS_SEED`, 0.
    pub fn resolve(self, common: &CommonArgs) -> Result<Self> {
        self.resolve_with(common, std::env::var(SEED_ENV).ok())
    }

    /// [`RunConfig::resolve`] with the environment seed passed in.
    pub fn resolve_with(mut self, common: &CommonArgs, env_seed: Option<String>) -> Result<Self> {
        if let Some(seed) = common.seed {
            self.seed = Some(seed);
        }
        if self.seed.is_none() {
            self.seed = Some(match env_seed {
                Some(v) => v.trim().parse().map_err(|_| {
                    Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))
                })?,
                None => 0,
            });
        }
        if let Some(dir) = &common.output_dir {
            self.output_dir = dir.clone();
        }
        if let Some(w) = common.workers {
            self.workers = Some(w);
        }
        self.validate().map_err(config_err)?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.space()?;
        self.encoder_config()?.validate()?;
        if self.oracle.lambda < 0.0 || !self.oracle.lambda.is_finite() {
            return Err(Error::Config(format!(
                "lambda {} must be finite and >= 0",
                self.oracle.lambda
            )));
        }
        if self.oracle.kind == OracleKind::Tabular {
            match &self.oracle.table {
                None => {
                    return Err(Error::Config(
                        "the tabular oracle needs oracle.table".into(),
                    ))
                }
                Some(p) if !p.is_file() => {
                    return Err(Error::Config(format!(
                        "benchmark table {} does not exist",
                        p.display()
                    )))
                }
                _ => {}
            }
        }
        SyntheticOracle::new(
            self.oracle.synthetic,
            self.search_space.channels,
            self.search_space.resolution,
        )?;
        if self.estimator.sample_budget == 0 {
            return Err(Error::Config(
                "estimator.sample_budget must be at least 1".into(),
            ));
        }
        self.estimator.predictor.validate()?;
        if self.search.pool_size == 0 {
            return Err(Error::Config("search.pool_size must be at least 1".into()));
        }
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        let c = &self.correlation;
        SearchSpace::new(c.n, c.edge_prob, c.ops.clone())?;
        if !(c.train_fraction > 0.0 && c.train_fraction < 1.0) {
            return Err(Error::Config(
                "correlation.train_fraction must lie in (0, 1)".into(),
            ));
        }
        if c.proportions.iter().any(|&p| p == 0 || p > 100) {
            return Err(Error::Config(
                "correlation proportions must lie in 1..=100".into(),
            ));
        }
        c.predictor.validate()
    }

    pub fn space(&self) -> Result<SearchSpace> {
        let s = &self.search_space;
        SearchSpace::new(s.n, s.edge_prob, s.ops.clone())
    }

    pub fn encoder_input(&self) -> EncoderInput {
        if self.encoder.include_ops {
            EncoderInput::StructureAndOps {
                palette: self.search_space.ops.clone(),
            }
        } else {
            EncoderInput::StructureOnly
        }
    }

    pub fn encoder_config(&self) -> Result<EncoderConfig> {
        let e = &self.encoder;
        Ok(EncoderConfig {
            n: self.search_space.n,
            d: e.d,
            hidden: e.hidden.clone(),
            pair_count: e.pair_count,
            wl: e.wl,
            input: self.encoder_input(),
            objective: e.objective,
            palette: self.search_space.ops.clone(),
            edge_prob_range: e.edge_prob_range,
            checkpoint_every: e.checkpoint_every,
            train: TrainConfig {
                rng_seed: self.seed(),
                ..e.train
            },
        })
    }

    pub fn predictor_config(&self) -> PredictorConfig {
        let mut p = self.estimator.predictor.clone();
        p.train.rng_seed = self.seed();
        p
    }

    pub fn oracle(&self) -> Result<Box<dyn Oracle>> {
        let s = &self.search_space;
        Ok(match self.oracle.kind {
            OracleKind::Synthetic => Box::new(SyntheticOracle::new(
                self.oracle.synthetic,
                s.channels,
                s.resolution,
            )?),
            OracleKind::Tabular => {
                let path = self
                    .oracle
                    .table
                    .as_ref()
                    .ok_or_else(|| Error::Config("oracle.table is unset".into()))?;
                Box::new(BenchmarkTable::load(path)?)
            }
        })
    }
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Run configuration (JSON).
    #[arg(short, long)]
    pub config: PathBuf,
    /// Overrides the config seed and GEMNAS_SEED.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Upper bound on worker threads.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Parser)]
#[command(
    name = "gemnas",
    version,
    about = "Kernel-guided graph embedding and bootstrap architecture search"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the default run configuration.
    InitConfig {
        #[arg(default_value = "gemnas.json")]
        path: PathBuf,
    },
    /// Train the kernel-guided encoder.
    TrainEncoder {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Sample, evaluate and fit the efficiency-score predictor.
    BuildEstimator {
        #[command(flatten)]
        common: CommonArgs,
        /// Encoder checkpoint directory; defaults to <output_dir>/encoder.
        #[arg(long)]
        encoder: Option<PathBuf>,
        /// Feed raw adjacency to the predictor instead of embeddings.
        #[arg(long)]
        no_embedding: bool,
    },
    /// Bootstrap search over a sampled pool.
    Search {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        encoder: Option<PathBuf>,
        #[arg(long)]
        predictor: Option<PathBuf>,
        /// Also write a 2-D PCA projection of the pool with predicted scores.
        #[arg(long)]
        surface: bool,
        /// Re-evaluate the selected architecture with the oracle.
        #[arg(long)]
        evaluate: bool,
    },
    /// Build a synthetic benchmark table over the search space.
    MakeTable {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value_t = 10_000)]
        entries: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample and evaluate the correlation corpus.
    MakeCorpus {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train predictors on growing shares of the corpus and report test-set
    /// Kendall tau and Pearson r.
    EvalCorrelation {
        #[command(flatten)]
        common: CommonArgs,
        /// Corpus file; defaults to <output_dir>/corpus.ndjson.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Training share of the corpus.
        #[arg(long)]
        split: Option<f64>,
        #[arg(long, value_delimiter = ',')]
        proportions: Option<Vec<u32>>,
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<Method>>,
    },
}

fn common(cmd: &Command) -> Option<&CommonArgs> {
    match cmd {
        Command::InitConfig { .. } => None,
        Command::TrainEncoder { common }
        | Command::BuildEstimator { common, .. }
        | Command::Search { common, .. }
        | Command::MakeTable { common, .. }
        | Command::MakeCorpus { common }
        | Command::EvalCorrelation { common, .. } => Some(common),
    }
}

/// Process exit code for an error: 2 for usage and configuration problems,
/// 1 for everything that fails at run time.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        _ => 1,
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            log::error!("{e}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let Some(common) = common(&cli.command) else {
        let Command::InitConfig { path } = &cli.command else {
            unreachable!()
        };
        write_json(path, &RunConfig::default())?;
        println!("{}", path.display());
        return Ok(());
    };
    let cfg = RunConfig::load(&common.config)?.resolve(common)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(w) = cfg.workers {
        pool = pool.num_threads(w);
    }
    let pool = pool.build().map_err(|e| Error::Config(e.to_string()))?;
    fs::create_dir_all(&cfg.output_dir)?;
    write_json(&cfg.output_dir.join(EFFECTIVE_CONFIG), &cfg)?;
    pool.install(|| dispatch(&cli.command, &cfg))
}

fn dispatch(cmd: &Command, cfg: &RunConfig) -> Result<()> {
    match cmd {
        Command::InitConfig { .. } => unreachable!(),
        Command::TrainEncoder { .. } => cmd_train_encoder(cfg).map(|_| ()),
        Command::BuildEstimator {
            encoder,
            no_embedding,
            ..
        } => cmd_build_estimator(cfg, encoder.as_deref(), *no_embedding).map(|_| ()),
        Command::Search {
            encoder,
            predictor,
            surface,
            evaluate,
            ..
        } => cmd_search(
            cfg,
            encoder.as_deref(),
            predictor.as_deref(),
            *surface,
            *evaluate,
        )
        .map(|_| ()),
        Command::MakeTable { entries, out, .. } => cmd_make_table(cfg, *entries, out),
        Command::MakeCorpus { .. } => cmd_make_corpus(cfg).map(|_| ()),
        Command::EvalCorrelation {
            corpus,
            split,
            proportions,
            methods,
            ..
        } => {
            let mut cfg = cfg.clone();
            if let Some(s) = split {
                cfg.correlation.train_fraction = *s;
            }
            if let Some(p) = proportions {
                cfg.correlation.proportions = p.clone();
            }
            if let Some(m) = methods {
                cfg.correlation.methods = m.clone();
            }
            cfg.validate().map_err(config_err)?;
            cmd_eval_correlation(&cfg, corpus.as_deref()).map(|_| ())
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Trains the encoder; writes the bundle and the loss-history CSV.
pub fn cmd_train_encoder(cfg: &RunConfig) -> Result<PathBuf> {
    let ecfg = cfg.encoder_config()?;
    log::info!(
        "training encoder: n={} d={} pairs={} iterations={}",
        ecfg.n,
        ecfg.d,
        ecfg.pair_count,
        ecfg.train.iterations
    );
    let (bundle, history) = encoder::train_encoder(&ecfg)?;
    let dir = cfg.output_dir.join(ENCODER_DIR);
    encoder::save_bundle(&dir, &bundle)?;
    history.write_csv(&cfg.output_dir.join(LOSS_CSV))?;
    log::info!(
        "similarity loss {:.5} -> {:.5}",
        history.head_similarity(1),
        history.tail_similarity(1)
    );
    Ok(dir)
}

fn load_featurizer(
    cfg: &RunConfig,
    encoder_dir: Option<&Path>,
    no_embedding: bool,
) -> Result<Featurizer> {
    if no_embedding {
        return Ok(Featurizer::Adjacency {
            n: cfg.search_space.n,
            input: cfg.encoder_input(),
        });
    }
    let dir = encoder_dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.output_dir.join(ENCODER_DIR));
    let bundle = encoder::load_bundle(&dir)?;
    if bundle.n != cfg.search_space.n {
        return Err(Error::Config(format!(
            "encoder was trained for n={} but the search space has n={}",
            bundle.n, cfg.search_space.n
        )));
    }
    Ok(Featurizer::Encoder(Box::new(bundle)))
}

fn estimator_sampler(
    cfg: &RunConfig,
    oracle_table: Option<&BenchmarkTable>,
) -> Result<Box<dyn DagSampler>> {
    if cfg.oracle.sample_from_table {
        let table = oracle_table
            .ok_or_else(|| Error::Config("sample_from_table needs the tabular oracle".into()))?;
        let dags = table.dags();
        if dags.is_empty() {
            return Err(Error::Config(
                "the benchmark table stores no architectures".into(),
            ));
        }
        return Ok(Box::new(dags));
    }
    Ok(Box::new(cfg.space()?))
}

/// Builds the estimator; writes the predictor checkpoint and the sample log.
pub fn cmd_build_estimator(
    cfg: &RunConfig,
    encoder_dir: Option<&Path>,
    no_embedding: bool,
) -> Result<PathBuf> {
    let featurizer = load_featurizer(cfg, encoder_dir, no_embedding)?;
    let table = match cfg.oracle.kind {
        OracleKind::Tabular => Some(BenchmarkTable::load(
            cfg.oracle.table.as_ref().expect("validated"),
        )?),
        OracleKind::Synthetic => None,
    };
    let oracle: Box<dyn Oracle> = match &table {
        Some(t) => Box::new(t.clone()),
        None => cfg.oracle()?,
    };
    let sampler = estimator_sampler(cfg, table.as_ref())?;
    let run = predictor::build_estimator(
        oracle.as_ref(),
        &featurizer,
        sampler.as_ref(),
        cfg.estimator.sample_budget,
        &cfg.predictor_config(),
        cfg.oracle.lambda,
        cfg.oracle.missing,
    )?;
    if run.skipped > 0 {
        log::warn!(
            "{} of {} sampled architectures were missing from the table",
            run.skipped,
            cfg.estimator.sample_budget
        );
    }
    protocol::write_records(&cfg.output_dir.join(SAMPLE_LOG), &run.log)?;
    let manifest = PredictorManifest {
        d: featurizer.dim(),
        lambda: cfg.oracle.lambda,
        sample_budget: cfg.estimator.sample_budget,
        seed: cfg.seed(),
        oracle: oracle.describe(),
        featurizer: featurizer.name().to_string(),
    };
    let dir = cfg.output_dir.join(PREDICTOR_DIR);
    predictor::save_predictor(&dir, &run.predictor, &manifest)?;
    log::info!(
        "estimator built from {} samples; training mse {:.3e}",
        run.log.len(),
        run.predictor.training_mse()?
    );
    Ok(dir)
}

/// Bootstrap search; writes the result JSON and optionally the surface CSV.
pub fn cmd_search(
    cfg: &RunConfig,
    encoder_dir: Option<&Path>,
    predictor_dir: Option<&Path>,
    surface: bool,
    evaluate: bool,
) -> Result<search::SearchResult> {
    let pdir = predictor_dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.output_dir.join(PREDICTOR_DIR));
    let (p, manifest) = predictor::load_predictor(&pdir)?;
    let featurizer = load_featurizer(cfg, encoder_dir, manifest.featurizer == "adjacency")?;
    if featurizer.dim() != p.d {
        return Err(Error::Config(format!(
            "predictor expects {}-dimensional input but the featurizer gives {}",
            p.d,
            featurizer.dim()
        )));
    }
    let space = cfg.space()?;
    let (mut result, pool) =
        search::bootstrap_search(&featurizer, &p, &space, cfg.search.pool_size, cfg.seed())?;
    if evaluate {
        result = result.with_true_score(cfg.oracle()?.as_ref(), cfg.oracle.lambda)?;
    }
    write_json(&cfg.output_dir.join(SEARCH_RESULT), &result)?;
    if surface {
        let proj = metrics::pca_project(pool.features.view(), 2)?;
        metrics::write_surface_csv(
            &cfg.output_dir.join(SURFACE_CSV),
            proj.coords.view(),
            &pool.scores,
        )?;
        log::info!(
            "surface explained variance {:.3} + {:.3}",
            proj.explained[0],
            proj.explained[1]
        );
    }
    log::info!(
        "selected {} with predicted score {:.5}",
        result.best_hash,
        result.predicted_score
    );
    Ok(result)
}

pub fn cmd_make_table(cfg: &RunConfig, entries: usize, out: &Path) -> Result<()> {
    let s = &cfg.search_space;
    let oracle = SyntheticOracle::new(cfg.oracle.synthetic, s.channels, s.resolution)?;
    let meta = TableMeta {
        n: s.n,
        ops: s.ops.clone(),
        h: HASH_ROUNDS,
    };
    let table = build_table(&cfg.space()?, &oracle, meta, entries, cfg.seed())?;
    table.save(out)?;
    log::info!("wrote {} entries to {}", table.len(), out.display());
    Ok(())
}

fn corpus_oracle(cfg: &RunConfig) -> Result<SyntheticOracle> {
    let s = &cfg.search_space;
    SyntheticOracle::new(cfg.oracle.synthetic, s.channels, s.resolution)
}

pub fn cmd_make_corpus(cfg: &RunConfig) -> Result<PathBuf> {
    let c = &cfg.correlation;
    let space = SearchSpace::new(c.n, c.edge_prob, c.ops.clone())?;
    let corpus = protocol::make_corpus(
        &space,
        &corpus_oracle(cfg)?,
        c.corpus_size,
        cfg.oracle.lambda,
        cfg.seed(),
    )?;
    let path = cfg.output_dir.join(CORPUS_FILE);
    protocol::write_records(&path, &corpus)?;
    Ok(path)
}

/// Encoder settings for the correlation protocol's learned methods.
pub fn correlation_encoder_config(cfg: &RunConfig) -> EncoderConfig {
    let c = &cfg.correlation;
    let base = EncoderConfig::default();
    EncoderConfig {
        n: c.n,
        d: c.d,
        pair_count: c.encoder_pair_count,
        wl: cfg.encoder.wl,
        input: if c.ops.len() > 1 {
            EncoderInput::StructureAndOps {
                palette: c.ops.clone(),
            }
        } else {
            EncoderInput::StructureOnly
        },
        palette: c.ops.clone(),
        train: TrainConfig {
            iterations: c.encoder_iterations,
            rng_seed: cfg.seed(),
            ..base.train
        },
        ..base
    }
}

pub fn cmd_eval_correlation(
    cfg: &RunConfig,
    corpus: Option<&Path>,
) -> Result<Vec<protocol::CorrelationRow>> {
    let path = corpus
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.output_dir.join(CORPUS_FILE));
    if !path.is_file() {
        return Err(Error::Config(format!(
            "corpus {} not found; run make-corpus first",
            path.display()
        )));
    }
    let records = protocol::read_records(&path)?;
    let c = &cfg.correlation;
    let (train, test) = protocol::split_corpus(&records, c.train_fraction, cfg.seed())?;
    let ecfg = correlation_encoder_config(cfg);
    let mut pc = c.predictor.clone();
    pc.train.rng_seed = cfg.seed();
    let mut rows = Vec::new();
    for &method in &c.methods {
        log::info!("correlation protocol: {}", method.name());
        let f = protocol::featurizer_for(method, &ecfg)?;
        rows.extend(protocol::correlation_grid(
            method,
            &f,
            &train,
            &test,
            &c.proportions,
            &pc,
        )?);
    }
    protocol::write_correlation_csv(&cfg.output_dir.join(CORRELATION_CSV), &rows)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    fn gemnas(args: &[&str]) -> i32 {
        main_with_args(std::iter::once("gemnas").chain(args.iter().copied()))
    }

    /// A config small enough to run the whole pipeline in seconds.
    fn small_config(dir: &Path, seed: Option<u64>) -> String {
        let path = dir.join("cfg.json");
        assert_eq!(gemnas(&["init-config", path.to_str().unwrap()]), 0);
        let mut cfg: Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        cfg["output_dir"] = dir.join("out").to_str().unwrap().into();
        cfg["seed"] = seed.map(Value::from).unwrap_or(Value::Null);
        cfg["encoder"]["train"]["iterations"] = 200.into();
        cfg["encoder"]["pair_count"] = 200.into();
        cfg["estimator"]["sample_budget"] = 100.into();
        cfg["search"]["pool_size"] = 300.into();
        fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
        path.to_str().unwrap().to_string()
    }

    fn read_json(path: &Path) -> Value {
        serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
    }

    fn write(dir: &Path, name: &str, body: &str) -> String {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p.to_str().unwrap().to_string()
    }

    #[test]
    fn usage_and_config_errors_exit_2() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        assert_eq!(gemnas(&["no-such-command"]), 2);
        assert_eq!(gemnas(&["train-encoder"]), 2);
        let missing = d.join("missing.json");
        assert_eq!(
            gemnas(&["train-encoder", "-c", missing.to_str().unwrap()]),
            2
        );
        let typo = write(d, "typo.json", r#"{"search_spaec": {}}"#);
        assert_eq!(gemnas(&["train-encoder", "-c", &typo]), 2);
        let bad = write(d, "bad.json", r#"{"search_space": {"n": 1}}"#);
        assert_eq!(gemnas(&["train-encoder", "-c", &bad]), 2);
        let tab = write(d, "tab.json", r#"{"oracle": {"kind": "tabular"}}"#);
        assert_eq!(gemnas(&["build-estimator", "-c", &tab]), 2);
        assert_eq!(gemnas(&["--help"]), 0);
    }

    #[test]
    fn missing_artifacts_are_runtime_failures() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(dir.path(), Some(1));
        assert_eq!(gemnas(&["search", "-c", &cfg]), 1);
    }

    #[test]
    fn seed_precedence() {
        let common = |seed: Option<u64>| CommonArgs {
            config: PathBuf::new(),
            seed,
            output_dir: None,
            workers: None,
        };
        let env = |v: &str| Some(v.to_string());
        let bare = RunConfig::default();
        let pinned = RunConfig {
            seed: Some(23),
            ..RunConfig::default()
        };
        assert_eq!(
            bare.clone()
                .resolve_with(&common(None), None)
                .unwrap()
                .seed(),
            0
        );
        assert_eq!(
            bare.clone()
                .resolve_with(&common(None), env("17"))
                .unwrap()
                .seed(),
            17
        );
        assert_eq!(
            bare.clone()
                .resolve_with(&common(Some(5)), env("17"))
                .unwrap()
                .seed(),
            5
        );
        assert_eq!(
            pinned
                .clone()
                .resolve_with(&common(None), env("17"))
                .unwrap()
                .seed(),
            23
        );
        assert_eq!(
            pinned.resolve_with(&common(Some(5)), None).unwrap().seed(),
            5
        );
        let err = bare
            .resolve_with(&common(None), env("minus one"))
            .unwrap_err();
        assert_eq!(exit_code(&err), 2);
    }

    #[test]
    fn effective_config_records_resolved_seed() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(dir.path(), None);
        assert_eq!(gemnas(&["make-corpus", "-c", &cfg, "--seed", "6"]), 0);
        let eff = read_json(&dir.path().join("out").join(EFFECTIVE_CONFIG));
        assert_eq!(eff["seed"].as_u64(), Some(6));
    }

    fn pipeline(d: &Path, seed: &str) {
        let cfg = small_config(d, None);
        for args in [
            vec!["train-encoder", "-c", &cfg, "--seed", seed],
            vec!["build-estimator", "-c", &cfg, "--seed", seed],
            vec![
                "search",
                "-c",
                &cfg,
                "--seed",
                seed,
                "--surface",
                "--evaluate",
            ],
        ] {
            assert_eq!(gemnas(&args), 0, "{args:?}");
        }
    }

    #[test]
    fn pipeline_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        pipeline(dir.path(), "4");
        let out = dir.path().join("out");

        let log = fs::read_to_string(out.join(SAMPLE_LOG)).unwrap();
        let records: Vec<Value> = log
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(records.len(), 100);
        for (i, r) in records.iter().enumerate() {
            assert_eq!(r["index"].as_u64(), Some(i as u64));
            assert_eq!(r["hash"].as_str().unwrap().len(), 32);
            assert!(r["score"].as_f64().unwrap().is_finite());
        }

        let result = read_json(&out.join(SEARCH_RESULT));
        assert_eq!(result["pool_size"].as_u64(), Some(300));
        assert_eq!(result["seed"].as_u64(), Some(4));
        assert!(result["true_score"].as_f64().is_some());

        let surface = fs::read_to_string(out.join(SURFACE_CSV)).unwrap();
        let mut lines = surface.lines();
        assert_eq!(lines.next(), Some("x,y,predicted_score"));
        assert_eq!(lines.count(), 300);

        assert!(
            fs::read_to_string(out.join(LOSS_CSV))
                .unwrap()
                .lines()
                .count()
                > 1
        );
        for f in [ENCODER_DIR, PREDICTOR_DIR, EFFECTIVE_CONFIG] {
            assert!(out.join(f).exists(), "{f}");
        }
    }

    #[test]
    fn same_seed_same_bytes_different_seed_different_samples() {
        let dirs: Vec<_> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
        pipeline(dirs[0].path(), "8");
        pipeline(dirs[1].path(), "8");
        pipeline(dirs[2].path(), "9");
        let read = |i: usize, f: &str| fs::read(dirs[i].path().join("out").join(f)).unwrap();
        for f in [
            SAMPLE_LOG,
            SEARCH_RESULT,
            SURFACE_CSV,
            "predictor/predictor.ckpt",
        ] {
            assert_eq!(read(0, f), read(1, f), "{f}");
        }
        assert_ne!(read(0, SAMPLE_LOG), read(2, SAMPLE_LOG));
    }

    #[test]
    fn correlation_command_writes_grid() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(dir.path(), Some(2));
        let mut v = read_json(Path::new(&cfg));
        v["correlation"]["corpus_size"] = 120.into();
        v["correlation"]["encoder_iterations"] = 100.into();
        v["correlation"]["encoder_pair_count"] = 100.into();
        v["correlation"]["predictor"]["train"]["iterations"] = 50.into();
        fs::write(&cfg, v.to_string()).unwrap();
        assert_eq!(gemnas(&["make-corpus", "-c", &cfg]), 0);
        let code = gemnas(&[
            "eval-correlation",
            "-c",
            &cfg,
            "--proportions",
            "50,100",
            "--methods",
            "adjacency,kernel-guided",
        ]);
        assert_eq!(code, 0);
        let csv = fs::read_to_string(dir.path().join("out").join(CORRELATION_CSV)).unwrap();
        assert_eq!(csv.lines().count(), 1 + 4);
        assert_eq!(
            gemnas(&["eval-correlation", "-c", &cfg, "--split", "1.5"]),
            2
        );
    }
}
