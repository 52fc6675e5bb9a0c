//! Experiment runner: config parsing, staged pipeline, ablation and sweeps.
//!
//! Stages run in a fixed order (`data`, `normalize`, `embed`, `expand`,
//! `prototypes`, `project`, `evaluate`) and every failure is reported with
//! the stage it happened in. Each seed writes into its own directory.

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use ndarray::{Array2, Axis};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    class_centers, format_f64, generate_synthetic, l2_normalize_rows, load_features, load_prototypes, save_features,
    save_matrix, save_prototypes, write_text, FeatureSchema, LabeledDataset, Partition, PrototypeTable, Segment,
    SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::expansion::{
    default_latent_dim, evaluate_expansion, model_flat_params, relu_pattern, set_model_flat_params, train_expansion, unified_loss,
    AlignmentContext, ExpansionConfig, ExpansionModel, LossBreakdown, LossTrace, LossWeights, Variant,
};
use crate::mds::{double_center, dump_csv, extract_embedding, pairwise_distance_matrix, EmbeddedManifold};
use crate::nn::{gradient_check, gradient_check_piecewise, Activation, AdamConfig, GradCheckOptions, GradCheckReport};
use crate::prototypes::{update_prototypes, NeighborMetric, NeighborSolution, UpdateOptions};
use crate::recognition::{
    evaluate, projection_flat_grad, projection_loss, train_projection, EvaluationReport, Metric, ProjectionConfig,
    ProjectionModel, UnseenPrototypes,
};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Flat experiment configuration. Every key is optional; unknown keys are rejected.
///
/// | key | default | meaning |
/// |-----|---------|---------|
/// | `source` | `"synthetic"` | `"synthetic"` or `"csv"` |
/// | `m_seen`, `v_unseen`, `d`, `n` | 40, 10, 64, 10 | synthetic class counts and dimensions |
/// | `cluster_spread`, `examples_per_class` | 0.3, 8 | synthetic noise and class size |
/// | `data_seed` | run seed | fixes the synthetic draw across seeds |
/// | `prototypes_path`, `train_path`, `test_path` | | CSV inputs |
/// | `normalize` | true | L2-normalize visual features |
/// | `variant` | `"vae"` | `"ae"` or `"vae"` |
/// | `latent_k` | `round(expansion_rate · n)` | expanded dimensions, 0 disables expansion |
/// | `expansion_rate` | 0.6 | used when `latent_k` is absent |
/// | `alpha`, `beta` | 9, 77 | reconstruction and alignment weights |
/// | `hidden`, `activation` | `[256]`, `"relu"` | expansion network shape |
/// | `epochs`, `batch_size`, `learning_rate` | 200, 64, 1e-3 | expansion training |
/// | `adam_beta1`, `adam_beta2`, `adam_epsilon` | 0.9, 0.999, 1e-8 | shared optimizer constants |
/// | `neighbors`, `neighbor_metric`, `normalize_neighbor_search` | 8, `"euclidean"`, false | unseen prototype update |
/// | `lambda`, `tied` | 1, false | projection penalty and weight tying |
/// | `projection_epochs`, `projection_batch_size`, `projection_learning_rate` | 200, 64, 1e-3 | projection training |
/// | `metric` | `"cosine"` | recognition distance |
/// | `seeds` | `[7]` | one pipeline per seed |
/// | `hit_k` | v | largest k reported |
/// | `sweep_k` | `[4, 8, 16, 32]` | latent sizes for `sweep` |
/// | `out_dir` | `"runs"` | artifact root |
/// | `cache`, `cache_dir` | true, `<out_dir>/cache` | expansion model cache |
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub source: String,
    pub m_seen: usize,
    pub v_unseen: usize,
    pub d: usize,
    pub n: usize,
    pub cluster_spread: f64,
    pub examples_per_class: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prototypes_path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_path: Option<PathBuf>,
    pub normalize: bool,
    pub variant: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latent_k: Option<usize>,
    pub expansion_rate: f64,
    pub alpha: f64,
    pub beta: f64,
    pub hidden: Vec<usize>,
    pub activation: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub neighbors: usize,
    pub neighbor_metric: String,
    pub normalize_neighbor_search: bool,
    pub lambda: f64,
    pub tied: bool,
    pub projection_epochs: usize,
    pub projection_batch_size: usize,
    pub projection_learning_rate: f64,
    pub metric: String,
    pub seeds: Vec<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hit_k: Option<usize>,
    pub sweep_k: Vec<usize>,
    pub out_dir: PathBuf,
    pub cache: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let synthetic = SyntheticSpec::default();
        let adam = AdamConfig::default();
        Self {
            source: "synthetic".into(),
            m_seen: synthetic.m_seen,
            v_unseen: synthetic.v_unseen,
            d: synthetic.d,
            n: synthetic.n,
            cluster_spread: synthetic.cluster_spread,
            examples_per_class: synthetic.examples_per_class,
            data_seed: None,
            prototypes_path: None,
            train_path: None,
            test_path: None,
            normalize: true,
            variant: "vae".into(),
            latent_k: None,
            expansion_rate: 0.6,
            alpha: 9.0,
            beta: 77.0,
            hidden: vec![256],
            activation: "relu".into(),
            epochs: 200,
            batch_size: 64,
            learning_rate: adam.learning_rate,
            adam_beta1: adam.beta1,
            adam_beta2: adam.beta2,
            adam_epsilon: adam.epsilon,
            neighbors: crate::prototypes::DEFAULT_NEIGHBORS,
            neighbor_metric: "euclidean".into(),
            normalize_neighbor_search: false,
            lambda: 1.0,
            tied: false,
            projection_epochs: 200,
            projection_batch_size: 64,
            projection_learning_rate: adam.learning_rate,
            metric: "cosine".into(),
            seeds: vec![synthetic.seed],
            hit_k: None,
            sweep_k: vec![4, 8, 16, 32],
            out_dir: PathBuf::from("runs"),
            cache: true,
            cache_dir: None,
        }
    }
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn staged(stage: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Stage { .. } => e,
        other => Error::Stage {
            stage,
            source: Box::new(other),
        },
    }
}

/// Counts and dimensions the config must be checked against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dimensions {
    pub m: usize,
    pub v: usize,
    pub d: usize,
    pub n: usize,
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(config_err(format!("`{name}` must be finite and > 0, got {v}")))
    }
}

fn check_nonnegative(name: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(config_err(format!("`{name}` must be finite and >= 0, got {v}")))
    }
}

fn parse_metric(key: &str, s: &str) -> Result<NeighborMetric> {
    NeighborMetric::parse(s).ok_or_else(|| config_err(format!("`{key}` must be \"cosine\" or \"euclidean\", got {s:?}")))
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| config_err(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Stable digest of the full config.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn variant(&self) -> Result<Variant> {
        Variant::parse(&self.variant).ok_or_else(|| config_err(format!("`variant` must be \"ae\" or \"vae\", got {:?}", self.variant)))
    }

    pub fn activation(&self) -> Result<Activation> {
        Activation::parse(&self.activation)
            .ok_or_else(|| config_err(format!("`activation` must be linear, relu or tanh, got {:?}", self.activation)))
    }

    pub fn recognition_metric(&self) -> Result<Metric> {
        parse_metric("metric", &self.metric)
    }

    pub fn neighbor_search_metric(&self) -> Result<NeighborMetric> {
        parse_metric("neighbor_metric", &self.neighbor_metric)
    }

    pub fn is_synthetic(&self) -> Result<bool> {
        match self.source.as_str() {
            "synthetic" => Ok(true),
            "csv" => Ok(false),
            other => Err(config_err(format!("`source` must be \"synthetic\" or \"csv\", got {other:?}"))),
        }
    }

    pub fn synthetic_spec(&self, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            seed: self.data_seed.unwrap_or(seed),
            m_seen: self.m_seen,
            v_unseen: self.v_unseen,
            d: self.d,
            n: self.n,
            cluster_spread: self.cluster_spread,
            examples_per_class: self.examples_per_class,
        }
    }

    fn adam(&self, learning_rate: f64) -> AdamConfig {
        AdamConfig {
            learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            epsilon: self.adam_epsilon,
        }
    }

    /// Resolved number of expanded dimensions.
    pub fn latent_dim(&self, dims: Dimensions) -> Result<usize> {
        match self.latent_k {
            Some(k) => Ok(k),
            None => default_latent_dim(dims.n, dims.d, self.expansion_rate),
        }
    }

    pub fn expansion_config(&self, latent_dim: usize, seed: u64) -> Result<ExpansionConfig> {
        Ok(ExpansionConfig {
            variant: self.variant()?,
            latent_dim,
            hidden: self.hidden.clone(),
            activation: self.activation()?,
            weights: LossWeights {
                alpha: self.alpha,
                beta: self.beta,
            },
            epochs: self.epochs,
            batch_size: self.batch_size,
            adam: self.adam(self.learning_rate),
            seed,
        })
    }

    pub fn projection_config(&self, seed: u64) -> ProjectionConfig {
        ProjectionConfig {
            lambda: self.lambda,
            tied: self.tied,
            epochs: self.projection_epochs,
            batch_size: self.projection_batch_size,
            adam: self.adam(self.projection_learning_rate),
            seed: projection_seed(seed),
        }
    }

    pub fn update_options(&self) -> Result<UpdateOptions> {
        Ok(UpdateOptions {
            neighbors: self.neighbors,
            metric: self.neighbor_search_metric()?,
            normalize_search: self.normalize_neighbor_search,
        })
    }

    pub fn cache_root(&self) -> PathBuf {
        self.cache_dir.clone().unwrap_or_else(|| self.out_dir.join("cache"))
    }

    /// Checks that need no data: enums, ranges and the synthetic shape.
    pub fn validate(&self) -> Result<()> {
        let synthetic = self.is_synthetic()?;
        self.variant()?;
        self.activation()?;
        self.recognition_metric()?;
        self.neighbor_search_metric()?;
        check_nonnegative("alpha", self.alpha)?;
        check_nonnegative("beta", self.beta)?;
        check_nonnegative("lambda", self.lambda)?;
        check_positive("expansion_rate", self.expansion_rate)?;
        check_positive("learning_rate", self.learning_rate)?;
        check_positive("projection_learning_rate", self.projection_learning_rate)?;
        check_positive("adam_epsilon", self.adam_epsilon)?;
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(config_err(format!("`{name}` must be in [0, 1), got {b}")));
            }
        }
        if self.batch_size == 0 || self.projection_batch_size == 0 {
            return Err(config_err("batch sizes must be >= 1"));
        }
        if self.hidden.contains(&0) {
            return Err(config_err("`hidden` layer sizes must be >= 1"));
        }
        if self.neighbors == 0 {
            return Err(config_err("`neighbors` must be >= 1"));
        }
        if self.seeds.is_empty() {
            return Err(config_err("`seeds` must list at least one seed"));
        }
        let mut unique = self.seeds.clone();
        unique.sort_unstable();
        unique.dedup();
        if unique.len() != self.seeds.len() {
            return Err(config_err("`seeds` must be distinct"));
        }
        if self.sweep_k.is_empty() {
            return Err(config_err("`sweep_k` must list at least one value"));
        }
        if synthetic {
            self.synthetic_spec(0).validate().map_err(|e| config_err(e.to_string()))?;
            if self.cluster_spread <= 0.0 {
                return Err(config_err("`cluster_spread` must be > 0"));
            }
            self.validate_dimensions(Dimensions {
                m: self.m_seen,
                v: self.v_unseen,
                d: self.d,
                n: self.n,
            })?;
        } else {
            for (key, p) in [
                ("prototypes_path", &self.prototypes_path),
                ("train_path", &self.train_path),
                ("test_path", &self.test_path),
            ] {
                if p.is_none() {
                    return Err(config_err(format!("csv source needs `{key}`")));
                }
            }
        }
        Ok(())
    }

    /// Checks against the actual class counts and dimensions.
    pub fn validate_dimensions(&self, dims: Dimensions) -> Result<()> {
        if dims.m < 2 {
            return Err(config_err(format!("need at least 2 seen classes, got {}", dims.m)));
        }
        if dims.v < 1 {
            return Err(config_err("need at least 1 unseen class"));
        }
        if self.neighbors > dims.m {
            return Err(config_err(format!(
                "`neighbors` = {} exceeds the {} seen classes",
                self.neighbors, dims.m
            )));
        }
        let k = self.latent_dim(dims).map_err(|e| config_err(e.to_string()))?;
        self.check_latent("latent_k", k, dims)?;
        for &k in &self.sweep_k {
            if k == 0 {
                return Err(config_err("`sweep_k` values must be >= 1"));
            }
            self.check_latent("sweep_k", k, dims)?;
        }
        if let Some(h) = self.hit_k {
            if h == 0 || h > dims.v {
                return Err(config_err(format!("`hit_k` must be in 1..={}, got {h}", dims.v)));
            }
        }
        Ok(())
    }

    fn check_latent(&self, key: &str, k: usize, dims: Dimensions) -> Result<()> {
        if dims.n + k + 1 > dims.d {
            return Err(config_err(format!(
                "`{key}` = {k}: n + k = {} must be <= d - 1 = {}",
                dims.n + k,
                dims.d.saturating_sub(1)
            )));
        }
        Ok(())
    }
}

fn projection_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

/// Train/test data and the predefined prototype table, after normalization.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub table: PrototypeTable,
}

impl PreparedData {
    pub fn dimensions(&self) -> Dimensions {
        Dimensions {
            m: self.table.classes().seen().len(),
            v: self.table.classes().unseen().len(),
            d: self.train.dim(),
            n: self.table.n(),
        }
    }

    /// Digest over everything the expansion stage reads.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for v in self.train.features().iter().chain(self.table.predefined().iter()) {
            h.update(v.to_bits().to_le_bytes());
        }
        for &l in self.train.labels() {
            h.update((l as u64).to_le_bytes());
        }
        for c in self.table.classes().iter() {
            h.update(c.id.as_bytes());
            h.update([0]);
        }
        hex::encode(h.finalize())
    }
}

/// Loads or generates the data for one seed and applies normalization.
pub fn prepare_data(config: &ExperimentConfig, seed: u64) -> Result<PreparedData> {
    let (train, test, table) = if config.is_synthetic()? {
        let bench = generate_synthetic(&config.synthetic_spec(seed)).map_err(staged("data"))?;
        (bench.train, bench.test, bench.prototypes)
    } else {
        let missing = || staged("data")(config_err("csv source paths missing"));
        let table = load_prototypes(config.prototypes_path.as_ref().ok_or_else(missing)?).map_err(staged("data"))?;
        let schema = |partition| FeatureSchema {
            classes: table.classes(),
            partition,
        };
        let train = load_features(config.train_path.as_ref().ok_or_else(missing)?, schema(Partition::Train))
            .map_err(staged("data"))?;
        let test = load_features(config.test_path.as_ref().ok_or_else(missing)?, schema(Partition::Test))
            .map_err(staged("data"))?;
        if train.dim() != test.dim() {
            return Err(staged("data")(Error::shape("test feature dimension", train.dim(), test.dim())));
        }
        (train, test, table)
    };
    let (train, test) = if config.normalize {
        let tr = train.with_features(l2_normalize_rows(train.features())).map_err(staged("normalize"))?;
        let te = test.with_features(l2_normalize_rows(test.features())).map_err(staged("normalize"))?;
        (tr, te)
    } else {
        (train, test)
    };
    let prepared = PreparedData { train, test, table };
    config.validate_dimensions(prepared.dimensions()).map_err(staged("data"))?;
    Ok(prepared)
}

/// Records artifacts as they are written so a failure can list what exists.
#[derive(Debug)]
struct Emitter {
    dir: PathBuf,
    artifacts: Vec<String>,
}

impl Emitter {
    fn new(dir: PathBuf) -> Self {
        Self {
            dir,
            artifacts: Vec::new(),
        }
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.artifacts.push(name.to_string());
        self.dir.join(name)
    }

    fn text(&mut self, name: &str, contents: &str) -> Result<()> {
        let p = self.path(name);
        write_text(&p, contents)
    }

    fn child(&self, sub: &str) -> Emitter {
        Emitter::new(self.dir.join(sub))
    }

    fn absorb(&mut self, sub: &str, child: Emitter) {
        self.artifacts.extend(child.artifacts.into_iter().map(|a| format!("{sub}/{a}")));
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    status: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    failed_stage: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    config_hash: String,
    artifacts: &'a [String],
    config: &'a ExperimentConfig,
}

fn write_manifest(
    dir: &Path,
    command: &str,
    seed: u64,
    config: &ExperimentConfig,
    artifacts: &[String],
    outcome: std::result::Result<(), &Error>,
) -> Result<()> {
    let (status, failed_stage, error) = match outcome {
        Ok(()) => ("complete", None, None),
        Err(e) => ("partial", e.stage(), Some(e.to_string())),
    };
    let manifest = Manifest {
        command,
        version: VERSION,
        seed,
        status,
        failed_stage,
        error,
        config_hash: config.hash(),
        artifacts,
        config,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Invalid(e.to_string()))?;
    write_text(&dir.join("manifest.toml"), &text)
}

fn seed_config(config: &ExperimentConfig, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        seeds: vec![seed],
        ..config.clone()
    }
}

/// Full-data alignment before and after expansion training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignmentSummary {
    pub initial: LossBreakdown,
    pub trained: LossBreakdown,
    /// Smallest alignment loss any latent code could reach on this data.
    pub floor: f64,
}

impl AlignmentSummary {
    /// Trained over initial alignment loss.
    pub fn ratio(&self) -> f64 {
        self.trained.alignment / self.initial.alignment
    }
}

/// Trained expansion state shared by every downstream consumer.
#[derive(Debug, Clone)]
pub struct ExpansionOutcome {
    pub model: ExpansionModel,
    pub trace: LossTrace,
    /// Full-data loss of the untrained model.
    pub initial: LossBreakdown,
    /// Full-data loss of the trained model.
    pub trained: LossBreakdown,
    /// Smallest alignment loss any latent code could reach on this data.
    pub alignment_floor: f64,
    pub from_cache: bool,
}

impl ExpansionOutcome {
    pub fn summary(&self) -> AlignmentSummary {
        AlignmentSummary {
            initial: self.initial,
            trained: self.trained,
            floor: self.alignment_floor,
        }
    }
}

fn expansion_cache_key(config: &ExperimentConfig, exp: &ExpansionConfig, data: &PreparedData) -> String {
    let mut h = Sha256::new();
    h.update(VERSION.as_bytes());
    h.update(format!("{exp:?}").as_bytes());
    h.update(data.hash().as_bytes());
    h.update([config.normalize as u8]);
    hex::encode(h.finalize())
}

/// Trains the expansion model, or reuses a cached one with the same key.
fn expand(
    config: &ExperimentConfig,
    data: &PreparedData,
    ctx: &AlignmentContext,
    exp: &ExpansionConfig,
) -> Result<ExpansionOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(exp.seed);
    let initial_model = ExpansionModel::init(exp.variant, data.train.dim(), &exp.hidden, exp.latent_dim, exp.activation, &mut rng)?;
    let initial = evaluate_expansion(&initial_model, &data.train, ctx, exp.weights)?;
    let alignment_floor = ctx.alignment_floor(&data.train.seen_positions()?);
    let key = expansion_cache_key(config, exp, data);
    let dir = config.cache_root();
    let model_path = dir.join(format!("expansion-{key}.ckpt"));
    let trace_path = dir.join(format!("trace-{key}.csv"));
    if config.cache && model_path.exists() && trace_path.exists() {
        let cached = ExpansionModel::load(&model_path).and_then(|model| {
            let text = fs::read_to_string(&trace_path).map_err(|e| Error::io(&trace_path, e))?;
            Ok((model, LossTrace::from_csv(&text)?))
        });
        match cached {
            Ok((model, trace)) => {
                info!("expansion cache hit {}", &key[..12]);
                let trained = evaluate_expansion(&model, &data.train, ctx, exp.weights)?;
                return Ok(ExpansionOutcome {
                    model,
                    trace,
                    initial,
                    trained,
                    alignment_floor,
                    from_cache: true,
                });
            }
            Err(e) => warn!("ignoring unreadable cache entry {}: {e}", &key[..12]),
        }
    }
    let (model, trace) = train_expansion(&data.train, ctx, exp)?;
    if config.cache {
        // write to a unique temp name then rename, so parallel seeds never see half a file
        let tmp = dir.join(format!("expansion-{key}.{}.tmp", std::process::id()));
        model.save(&tmp)?;
        fs::rename(&tmp, &model_path).map_err(|e| Error::io(&model_path, e))?;
        let tmp = dir.join(format!("trace-{key}.{}.tmp", std::process::id()));
        trace.save(&tmp)?;
        fs::rename(&tmp, &trace_path).map_err(|e| Error::io(&trace_path, e))?;
    }
    let trained = evaluate_expansion(&model, &data.train, ctx, exp.weights)?;
    Ok(ExpansionOutcome {
        model,
        trace,
        initial,
        trained,
        alignment_floor,
        from_cache: false,
    })
}

/// Everything upstream of projection training for one seed.
#[derive(Debug, Clone)]
pub struct Stages {
    pub data: PreparedData,
    pub manifold: Option<EmbeddedManifold>,
    pub expansion: Option<ExpansionOutcome>,
    pub table: PrototypeTable,
    pub solutions: Vec<NeighborSolution>,
}

fn run_upstream(config: &ExperimentConfig, seed: u64, latent: Option<usize>, out: &mut Emitter) -> Result<Stages> {
    let data = prepare_data(config, seed)?;
    let dims = data.dimensions();
    let k = match latent {
        Some(k) => k,
        None => config.latent_dim(dims).map_err(staged("data"))?,
    };
    if k == 0 {
        info!("seed {seed}: expansion disabled");
        return Ok(Stages {
            table: data.table.with_expanded(None).map_err(staged("prototypes"))?,
            data,
            manifold: None,
            expansion: None,
            solutions: Vec::new(),
        });
    }

    let embed = staged("embed");
    let centers = class_centers(&data.train).map_err(&embed)?;
    let distances = pairwise_distance_matrix(centers.view()).map_err(&embed)?;
    let gram = double_center(&distances);
    let manifold = extract_embedding(&gram, dims.n + k).map_err(&embed)?;
    let mds_dir = out.dir.join("mds");
    dump_csv(&mds_dir, &distances, &gram, &manifold).map_err(&embed)?;
    for f in ["distances.csv", "gram.csv", "eigenvalues.csv", "embedding.csv"] {
        out.artifacts.push(format!("mds/{f}"));
    }
    info!("seed {seed}: embedded {} classes, effective rank {}", dims.m, manifold.effective_rank);

    let expand_tag = staged("expand");
    let seen_pre = data.table.predefined().select(Axis(0), &data.table.classes().seen());
    let ctx = AlignmentContext::new(seen_pre, &manifold).map_err(&expand_tag)?;
    let exp = config.expansion_config(k, seed).map_err(&expand_tag)?;
    let outcome = expand(config, &data, &ctx, &exp).map_err(&expand_tag)?;
    outcome.trace.save(out.path("loss_trace.csv")).map_err(&expand_tag)?;
    outcome.model.save(out.path("expansion.ckpt")).map_err(&expand_tag)?;
    out.text("alignment.csv", &alignment_csv(&outcome)).map_err(&expand_tag)?;
    info!(
        "seed {seed}: alignment {} -> {}{}",
        format_f64(outcome.initial.alignment),
        format_f64(outcome.trained.alignment),
        if outcome.from_cache { " (cached)" } else { "" }
    );

    let proto_tag = staged("prototypes");
    let options = config.update_options().map_err(&proto_tag)?;
    let (table, solutions) = update_prototypes(&outcome.model, &data.train, &data.table, options).map_err(&proto_tag)?;
    save_prototypes(out.path("prototypes_expanded.csv"), &table).map_err(&proto_tag)?;
    out.text("neighbors.csv", &neighbors_csv(&table, &solutions)).map_err(&proto_tag)?;

    Ok(Stages {
        data,
        manifold: Some(manifold),
        expansion: Some(outcome),
        table,
        solutions,
    })
}

fn alignment_csv(outcome: &ExpansionOutcome) -> String {
    let mut out = String::from("model,reconstruction,kl,alignment,total\n");
    for (name, l) in [("initial", &outcome.initial), ("trained", &outcome.trained)] {
        out.push_str(&format!(
            "{name},{},{},{},{}\n",
            format_f64(l.reconstruction),
            format_f64(l.kl),
            format_f64(l.alignment),
            format_f64(l.total)
        ));
    }
    out.push_str(&format!("floor,,,{},\n", format_f64(outcome.alignment_floor)));
    out
}

fn neighbors_csv(table: &PrototypeTable, solutions: &[NeighborSolution]) -> String {
    let classes = table.classes();
    let seen = classes.seen();
    let mut out = String::from("class_id,rank,neighbor_id,theta,residual\n");
    for (&c, sol) in classes.unseen().iter().zip(solutions) {
        for (r, (&nb, t)) in sol.neighbors.iter().zip(sol.theta.iter()).enumerate() {
            out.push_str(&format!(
                "{},{r},{},{},{}\n",
                classes.get(c).id,
                classes.get(seen[nb]).id,
                format_f64(*t),
                format_f64(sol.residual)
            ));
        }
    }
    out
}

/// Trains the projection onto one prototype segment and evaluates it.
fn project_and_evaluate(
    config: &ExperimentConfig,
    stages: &Stages,
    segment: Segment,
    seed: u64,
    out: &mut Emitter,
) -> Result<EvaluationReport> {
    let project = staged("project");
    let targets = stages.table.segment(segment).map_err(&project)?;
    let model = train_projection(&stages.data.train, &targets, &config.projection_config(seed)).map_err(&project)?;
    model.save(out.path("projection.ckpt")).map_err(&project)?;

    let eval = staged("evaluate");
    let candidates = UnseenPrototypes::from_table(&stages.table, segment).map_err(&eval)?;
    let max_k = config.hit_k.unwrap_or(candidates.len());
    let metric = config.recognition_metric().map_err(&eval)?;
    let report = evaluate(&model, &stages.data.test, &candidates, max_k, metric).map_err(&eval)?;
    for name in ["report.csv", "confusion.csv", "per_class.csv"] {
        out.artifacts.push(name.into());
    }
    report.save(&out.dir).map_err(&eval)?;
    Ok(report)
}

/// Result of one seed of `run`.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub report: EvaluationReport,
    pub alignment: Option<AlignmentSummary>,
    pub latent_dim: usize,
}

fn seed_dir(root: &Path, seed: u64) -> PathBuf {
    root.join(format!("seed_{seed}"))
}

/// Runs `body` for every seed in parallel, each with its own directory and manifest.
fn for_each_seed<T, F>(config: &ExperimentConfig, root: &Path, command: &str, body: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64, &mut Emitter) -> Result<T> + Sync,
{
    config.validate().map_err(staged("config"))?;
    config
        .seeds
        .par_iter()
        .map(|&seed| {
            let mut out = Emitter::new(seed_dir(root, seed));
            let result = body(seed, &mut out);
            let cfg = seed_config(config, seed);
            write_manifest(&out.dir, command, seed, &cfg, &out.artifacts, result.as_ref().map(|_| ()))?;
            result
        })
        .collect()
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Full pipeline per seed using the concatenated prototypes (predefined only when k = 0).
pub fn run_pipeline(config: &ExperimentConfig) -> Result<Vec<SeedRun>> {
    let root = config.out_dir.clone();
    let runs = for_each_seed(config, &root, "run", |seed, out| {
        let stages = run_upstream(config, seed, None, out)?;
        let segment = if stages.expansion.is_some() {
            Segment::Combined
        } else {
            Segment::Predefined
        };
        let report = project_and_evaluate(config, &stages, segment, seed, out)?;
        info!("seed {seed}: Hit@1 {}", format_f64(report.hit1()));
        Ok(SeedRun {
            seed,
            latent_dim: stages.table.k(),
            alignment: stages.expansion.as_ref().map(ExpansionOutcome::summary),
            report,
        })
    })?;
    write_run_summary(&root, &runs).map_err(staged("evaluate"))?;
    Ok(runs)
}

fn write_run_summary(root: &Path, runs: &[SeedRun]) -> Result<()> {
    let max_k = runs.iter().map(|r| r.report.hit_at_k.len()).min().unwrap_or(0);
    let mut out = String::from("k,mean_hit_at_k,std_hit_at_k\n");
    for k in 0..max_k {
        let values: Vec<f64> = runs.iter().map(|r| r.report.hit_at_k[k]).collect();
        let (m, s) = mean_std(&values);
        out.push_str(&format!("{},{},{}\n", k + 1, format_f64(m), format_f64(s)));
    }
    write_text(&root.join("summary.csv"), &out)
}

/// One segment's outcome in an ablation.
#[derive(Debug, Clone)]
pub struct AblationEntry {
    pub segment: Segment,
    pub dim: usize,
    pub report: EvaluationReport,
}

#[derive(Debug, Clone)]
pub struct AblationRun {
    pub seed: u64,
    pub entries: Vec<AblationEntry>,
    pub alignment: Option<AlignmentSummary>,
}

impl AblationRun {
    pub fn hit1(&self, segment: Segment) -> Option<f64> {
        self.entries.iter().find(|e| e.segment == segment).map(|e| e.report.hit1())
    }
}

fn segment_dir(segment: Segment) -> &'static str {
    match segment {
        Segment::Predefined => "p",
        Segment::Expanded => "e",
        Segment::Combined => "pe",
    }
}

/// Recognition with predefined, expanded and concatenated prototypes, sharing
/// one expansion model per seed. With k = 0 only the predefined report exists.
pub fn run_ablation(config: &ExperimentConfig) -> Result<Vec<AblationRun>> {
    let root = config.out_dir.clone();
    let runs = for_each_seed(config, &root, "ablate", |seed, out| {
        let stages = run_upstream(config, seed, None, out)?;
        let segments: &[Segment] = if stages.expansion.is_some() {
            &[Segment::Predefined, Segment::Expanded, Segment::Combined]
        } else {
            &[Segment::Predefined]
        };
        let mut entries = Vec::new();
        let mut csv = String::from("segment,dim,hit_at_1\n");
        for &segment in segments {
            let sub = segment_dir(segment);
            let mut child = out.child(sub);
            let result = project_and_evaluate(config, &stages, segment, seed, &mut child);
            out.absorb(sub, child);
            let report = result?;
            let dim = report_dim(&stages.table, segment);
            csv.push_str(&format!("{},{dim},{}\n", segment.label(), format_f64(report.hit1())));
            entries.push(AblationEntry { segment, dim, report });
        }
        out.text("ablation.csv", &csv).map_err(staged("evaluate"))?;
        Ok(AblationRun {
            seed,
            entries,
            alignment: stages.expansion.as_ref().map(ExpansionOutcome::summary),
        })
    })?;
    write_ablation_summary(&root, &runs).map_err(staged("evaluate"))?;
    Ok(runs)
}

fn report_dim(table: &PrototypeTable, segment: Segment) -> usize {
    match segment {
        Segment::Predefined => table.n(),
        Segment::Expanded => table.k(),
        Segment::Combined => table.n() + table.k(),
    }
}

fn write_ablation_summary(root: &Path, runs: &[AblationRun]) -> Result<()> {
    let mut out = String::from("segment,dim,mean_hit_at_1,std_hit_at_1\n");
    for entry in &runs[0].entries {
        let values: Vec<f64> = runs.iter().filter_map(|r| r.hit1(entry.segment)).collect();
        let (m, s) = mean_std(&values);
        out.push_str(&format!("{},{},{},{}\n", entry.segment.label(), entry.dim, format_f64(m), format_f64(s)));
    }
    write_text(&root.join("ablation_summary.csv"), &out)
}

/// One `(k, seed)` cell of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub k: usize,
    pub seed: u64,
    pub initial_alignment: f64,
    pub final_alignment: f64,
    pub alignment_floor: f64,
    pub hit_at_1: f64,
}

/// Seed-aggregated sweep row.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub k: usize,
    pub mean_final_alignment: f64,
    pub std_final_alignment: f64,
    pub mean_initial_alignment: f64,
    pub mean_hit_at_1: f64,
    pub std_hit_at_1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub points: Vec<SweepPoint>,
    pub rows: Vec<SweepRow>,
}

/// Runs the pipeline for each latent size in `k_values` and every seed.
pub fn run_expansion_sweep(config: &ExperimentConfig, k_values: &[usize]) -> Result<SweepTable> {
    let config = ExperimentConfig {
        sweep_k: k_values.to_vec(),
        ..config.clone()
    };
    let mut points = Vec::new();
    let mut rows = Vec::new();
    for &k in k_values {
        let root = config.out_dir.join(format!("k_{k}"));
        let per_seed = for_each_seed(&config, &root, "sweep", |seed, out| {
            let stages = run_upstream(&config, seed, Some(k), out)?;
            let report = project_and_evaluate(&config, &stages, Segment::Combined, seed, out)?;
            let exp = stages.expansion.as_ref().expect("sweep k >= 1");
            Ok(SweepPoint {
                k,
                seed,
                initial_alignment: exp.initial.alignment,
                final_alignment: exp.trained.alignment,
                alignment_floor: exp.alignment_floor,
                hit_at_1: report.hit1(),
            })
        })?;
        let finals: Vec<f64> = per_seed.iter().map(|p| p.final_alignment).collect();
        let initials: Vec<f64> = per_seed.iter().map(|p| p.initial_alignment).collect();
        let hits: Vec<f64> = per_seed.iter().map(|p| p.hit_at_1).collect();
        let (mf, sf) = mean_std(&finals);
        let (mh, sh) = mean_std(&hits);
        rows.push(SweepRow {
            k,
            mean_final_alignment: mf,
            std_final_alignment: sf,
            mean_initial_alignment: mean_std(&initials).0,
            mean_hit_at_1: mh,
            std_hit_at_1: sh,
        });
        points.extend(per_seed);
    }
    let table = SweepTable { points, rows };
    write_sweep(&config.out_dir, &table).map_err(staged("evaluate"))?;
    Ok(table)
}

fn write_sweep(root: &Path, table: &SweepTable) -> Result<()> {
    let mut main = String::from("k,final_alignment_loss,hit_at_1\n");
    let mut summary = String::from(
        "k,mean_initial_alignment_loss,mean_final_alignment_loss,std_final_alignment_loss,mean_hit_at_1,std_hit_at_1\n",
    );
    for r in &table.rows {
        main.push_str(&format!("{},{},{}\n", r.k, format_f64(r.mean_final_alignment), format_f64(r.mean_hit_at_1)));
        summary.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.k,
            format_f64(r.mean_initial_alignment),
            format_f64(r.mean_final_alignment),
            format_f64(r.std_final_alignment),
            format_f64(r.mean_hit_at_1),
            format_f64(r.std_hit_at_1)
        ));
    }
    let mut detail = String::from("k,seed,initial_alignment_loss,final_alignment_loss,alignment_floor,hit_at_1\n");
    for p in &table.points {
        detail.push_str(&format!(
            "{},{},{},{},{},{}\n",
            p.k,
            p.seed,
            format_f64(p.initial_alignment),
            format_f64(p.final_alignment),
            format_f64(p.alignment_floor),
            format_f64(p.hit_at_1)
        ));
    }
    write_text(&root.join("sweep.csv"), &main)?;
    write_text(&root.join("sweep_summary.csv"), &summary)?;
    write_text(&root.join("sweep_seeds.csv"), &detail)
}

/// Writes the synthetic benchmark for each seed as CSV inputs for a `csv` source.
pub fn generate_data(config: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    config.validate().map_err(staged("config"))?;
    if !config.is_synthetic()? {
        return Err(staged("config")(config_err("gen-data needs `source = \"synthetic\"`")));
    }
    for_each_seed(config, &config.out_dir, "gen-data", |seed, out| {
        let tag = staged("data");
        let bench = generate_synthetic(&config.synthetic_spec(seed)).map_err(&tag)?;
        save_prototypes(out.path("prototypes.csv"), &bench.prototypes).map_err(&tag)?;
        save_features(out.path("train.csv"), &bench.train).map_err(&tag)?;
        save_features(out.path("test.csv"), &bench.test).map_err(&tag)?;
        save_matrix(out.path("visual_map.csv"), &bench.visual_map).map_err(&tag)?;
        Ok(out.dir.clone())
    })
}

/// One row of a gradient check run.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub target: &'static str,
    pub report: GradCheckReport,
}

/// Checks unified-loss (AE and VAE with frozen noise) and projection-loss
/// gradients against central differences on a slice of the training data.
/// Large networks are checked on a random subset of coordinates.
pub fn run_grad_check(config: &ExperimentConfig, batch: usize, sample_coords: usize) -> Result<Vec<GradCheckEntry>> {
    config.validate().map_err(staged("config"))?;
    let seed = config.seeds[0];
    let tag = staged("grad-check");
    let data = prepare_data(config, seed)?;
    let dims = data.dimensions();
    let k = config.latent_dim(dims).map_err(&tag)?.max(1);
    let centers = class_centers(&data.train).map_err(&tag)?;
    let manifold = crate::mds::embed_centers(centers.view(), dims.n + k).map_err(&tag)?;
    let seen = data.table.classes().seen();
    let ctx = AlignmentContext::new(data.table.predefined().select(Axis(0), &seen), &manifold).map_err(&tag)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = batch.clamp(1, data.train.len());
    let rows = sample(&mut rng, data.train.len(), b).into_vec();
    let x = data.train.features().select(Axis(0), &rows);
    let positions = data.train.seen_positions().map_err(&tag)?;
    let labels: Vec<usize> = rows.iter().map(|&r| positions[r]).collect();
    let weights = LossWeights {
        alpha: config.alpha,
        beta: config.beta,
    };
    let options = |n: usize| GradCheckOptions {
        sample: (n > sample_coords).then_some((sample_coords, seed)),
        loss_scaled_floor: true,
        ..Default::default()
    };
    let mut entries = Vec::new();
    for variant in [Variant::Ae, Variant::Vae] {
        let model = ExpansionModel::init(variant, dims.d, &config.hidden, k, config.activation()?, &mut rng).map_err(&tag)?;
        let eps: Array2<f64> = Array2::from_shape_fn((b, k), |_| StandardNormal.sample(&mut rng));
        let eps_view = (variant == Variant::Vae).then(|| eps.view());
        let (_, grads) = unified_loss(x.view(), &labels, &model, &ctx, weights, eps_view).map_err(&tag)?;
        let params = model_flat_params(&model);
        let mut probe = model.clone();
        let report = gradient_check_piecewise(
            |p| {
                set_model_flat_params(&mut probe, p).expect("same shape");
                let loss = unified_loss(x.view(), &labels, &probe, &ctx, weights, eps_view).map(|r| r.0.total);
                (loss.unwrap_or(f64::NAN), relu_pattern(&probe, x.view(), eps_view).unwrap_or_default())
            },
            &params,
            &grads.to_flat(),
            options(params.len()),
        );
        entries.push(GradCheckEntry {
            target: match variant {
                Variant::Ae => "unified_loss_ae",
                Variant::Vae => "unified_loss_vae",
            },
            report,
        });
    }
    let targets = data.table.predefined().select(Axis(0), &rows.iter().map(|&r| data.train.labels()[r]).collect::<Vec<_>>());
    let model = ProjectionModel::init(dims.d, dims.n, config.lambda, config.tied, &mut rng).map_err(&tag)?;
    let (_, grads) = projection_loss(&model, x.view(), targets.view()).map_err(&tag)?;
    let params = model.to_flat();
    let mut probe = model.clone();
    let report = gradient_check(
        |p| {
            probe.set_flat(p).expect("same shape");
            projection_loss(&probe, x.view(), targets.view()).map(|r| r.0).unwrap_or(f64::NAN)
        },
        &params,
        &projection_flat_grad(&model, &grads),
        options(params.len()),
    );
    entries.push(GradCheckEntry {
        target: "projection_loss",
        report,
    });

    let mut csv = String::from("target,checked,skipped_kinks,max_relative_error,tolerance,passed\n");
    for e in &entries {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            e.target,
            e.report.checked,
            e.report.skipped,
            format_f64(e.report.max_relative_error),
            format_f64(e.report.tolerance),
            e.report.passed()
        ));
    }
    write_text(&config.out_dir.join("grad_check.csv"), &csv).map_err(&tag)?;
    if let Some(bad) = entries.iter().find(|e| !e.report.passed()) {
        return Err(tag(Error::Invalid(format!(
            "{}: relative error {} at parameter {} exceeds {}",
            bad.target,
            format_f64(bad.report.max_relative_error),
            bad.report.worst_index,
            format_f64(bad.report.tolerance)
        ))));
    }
    Ok(entries)
}
