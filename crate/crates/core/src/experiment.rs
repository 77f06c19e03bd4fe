//! End-to-end runs: data, backbone, adaptor tuning, evaluation and reports.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{evaluate, train_backbone, BackboneConfig, BackboneError, TrainConfig, TrainLog};
use crate::data::{
    build_solution_bank, encode_dataset, load_dataset, split_dataset, DataError, Dataset, EncodedSequence, LoadOptions, SolutionBank,
    SplitRatios,
};
use crate::denoise::METRIC_W;
use crate::denoise::{annotate, DenoiseError};
use crate::encoder::{load_embeddings, EmbeddingProvider, EncoderError, ProviderKind, DEFAULT_DIM};
use crate::graph::{build_adjacency, edge_budget, metric_matrix, GraphError};
use crate::kmeans::ClusterCount;
use crate::metrics::{Metrics, MetricsError};
use crate::numerics::ParamStore;
use crate::synth::{self, score_identification, IdentificationScores, LearnerTruth, SynthConfig, SynthError};
use crate::trainer::{coda_evaluate, prepare, tune_coda, Sample, TrainerError, TuneConfig, TuneLog};

pub const SPARSITY_GRID: [f64; 5] = [0.2, 0.4, 0.5, 0.6, 0.8];
pub const LR_GRID: [f64; 3] = [1e-3, 1e-2, 1e-1];
pub const CLUSTER_GRID: [usize; 3] = [1, 3, 5];
pub const SEED_ENV: &str = "CODA_SEED";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config: {0}")]
    Config(String),
    #[error("data")]
    Data(#[from] DataError),
    #[error("encoder")]
    Encoder(#[from] EncoderError),
    #[error("synthetic data")]
    Synth(#[from] SynthError),
    #[error("backbone")]
    Backbone(#[from] BackboneError),
    #[error("tuning")]
    Trainer(#[from] TrainerError),
    #[error("identification")]
    Denoise(#[from] DenoiseError),
    #[error("graph")]
    Graph(#[from] GraphError),
    #[error("metrics")]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub kind: ProviderKind,
    pub dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { kind: ProviderKind::Hash, dim: DEFAULT_DIM }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Generate data; takes precedence over `dataset`.
    pub synth: Option<SynthConfig>,
    pub dataset: Option<PathBuf>,
    /// Embedding table for a file provider.
    pub embeddings: Option<PathBuf>,
    /// Ground-truth roles (truth JSONL) for identification scoring.
    pub truth: Option<PathBuf>,
    pub load: LoadOptions,
    pub encoder: EncoderConfig,
    pub split: SplitRatios,
    pub backbone: TrainConfig,
    pub coda: TuneConfig,
    pub seeds: Vec<u64>,
    /// Also tune the "w/o weak", "w/o uw" and "w/o nav" variants.
    pub ablations: bool,
    /// Reject hyperparameters outside the documented grids instead of listing them.
    pub strict_grid: bool,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            synth: Some(SynthConfig::default()),
            dataset: None,
            embeddings: None,
            truth: None,
            load: LoadOptions::default(),
            encoder: EncoderConfig::default(),
            split: SplitRatios::default(),
            backbone: TrainConfig::default(),
            coda: TuneConfig::default(),
            seeds: vec![1],
            ablations: false,
            strict_grid: false,
            output_dir: None,
        }
    }
}

fn on_grid(v: f64, grid: &[f64]) -> bool {
    grid.iter().any(|g| (g - v).abs() < 1e-12)
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self, ExperimentError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// Replaces the seed list with a single seed from `CODA_SEED` when set.
    pub fn apply_env(&mut self) -> Result<(), ExperimentError> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            let seed = v.trim().parse().map_err(|_| ExperimentError::Config(format!("{SEED_ENV}={v} is not an integer")))?;
            self.seeds = vec![seed];
        }
        Ok(())
    }

    /// Hyperparameters outside the documented search grids.
    pub fn off_grid(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !on_grid(self.coda.denoise.sparsity, &SPARSITY_GRID) {
            out.push(format!("sparsity {}", self.coda.denoise.sparsity));
        }
        for (name, lr) in [("backbone lr", self.backbone.lr), ("coda lr", self.coda.lr)] {
            if !on_grid(lr, &LR_GRID) {
                out.push(format!("{name} {lr}"));
            }
        }
        match self.coda.denoise.clusters {
            ClusterCount::Fixed(k) if CLUSTER_GRID.contains(&k) => {}
            c => out.push(format!("clusters {c:?}")),
        }
        out
    }

    pub fn validate(&self) -> Result<Vec<String>, ExperimentError> {
        if self.seeds.is_empty() {
            return Err(ExperimentError::Config("seeds list is empty".into()));
        }
        if self.synth.is_none() && self.dataset.is_none() {
            return Err(ExperimentError::Config("either synth or dataset must be given".into()));
        }
        let p = self.coda.denoise.sparsity;
        if !(p > 0.0 && p <= 1.0) {
            return Err(ExperimentError::Config(format!("sparsity {p} outside (0, 1]")));
        }
        let off = self.off_grid();
        if self.strict_grid && !off.is_empty() {
            return Err(ExperimentError::Config(format!("off-grid hyperparameters: {}", off.join(", "))));
        }
        Ok(off)
    }
}

/// Loaded or generated data for one seed.
pub struct Prepared {
    pub dataset: Dataset,
    pub provider: EmbeddingProvider,
    pub truth: Option<Vec<LearnerTruth>>,
}

pub fn prepare_data(cfg: &ExperimentConfig, seed: u64) -> Result<Prepared, ExperimentError> {
    if let Some(sc) = &cfg.synth {
        let g = synth::generate(&SynthConfig { seed, ..*sc })?;
        return Ok(Prepared { dataset: g.dataset, provider: g.provider, truth: Some(g.truth.learners) });
    }
    let path = cfg.dataset.as_ref().expect("validated");
    let dataset = load_dataset(path, &cfg.load)?;
    let provider = match cfg.encoder.kind {
        ProviderKind::Hash => EmbeddingProvider::hash(cfg.encoder.dim)?,
        ProviderKind::File => {
            let p = cfg.embeddings.as_ref().ok_or_else(|| ExperimentError::Config("file encoder needs `embeddings`".into()))?;
            EmbeddingProvider::File(load_embeddings(p, Some(cfg.encoder.dim))?)
        }
    };
    let truth = cfg.truth.as_ref().map(|p| synth::load_truth(p)).transpose()?;
    Ok(Prepared { dataset, provider, truth })
}

/// Encoded partitions, bank and backbone config for one seed.
pub struct Stage {
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
    pub bank: SolutionBank,
    pub backbone_config: BackboneConfig,
    pub encoded: [Vec<EncodedSequence>; 3],
    pub truth: Option<Vec<LearnerTruth>>,
}

pub fn stage(cfg: &ExperimentConfig, seed: u64) -> Result<Stage, ExperimentError> {
    let prep = prepare_data(cfg, seed)?;
    let split = split_dataset(&prep.dataset, cfg.split, seed)?;
    let bank = build_solution_bank(&split.train, &prep.provider)?;
    let encoded = [
        encode_dataset(&split.train, &prep.provider)?,
        encode_dataset(&split.valid, &prep.provider)?,
        encode_dataset(&split.test, &prep.provider)?,
    ];
    let backbone_config = BackboneConfig::for_data(prep.provider.dim(), prep.dataset.question_count, prep.dataset.concept_count);
    Ok(Stage { train: split.train, valid: split.valid, test: split.test, bank, backbone_config, encoded, truth: prep.truth })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoWeak,
    NoUnwanted,
    NoNav,
}

impl Variant {
    pub fn apply(self, tc: &TuneConfig) -> TuneConfig {
        let mut t = *tc;
        match self {
            Variant::Full => {}
            Variant::NoWeak => t.weak_loss = false,
            Variant::NoUnwanted => t.denoise.detect_unwanted = false,
            Variant::NoNav => t.nav_weight = 0.0,
        }
        t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub variant: Variant,
    pub test: Metrics,
    pub valid_auc: Vec<f64>,
    pub best: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub learners: [usize; 3],
    pub backbone: Metrics,
    pub coda: Metrics,
    pub backbone_log: TrainLog,
    pub tune_log: TuneLog,
    /// Scores on test learners with tuned parameters, when ground truth exists.
    pub identification: Option<IdentificationScores>,
    pub ablations: Vec<VariantReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    /// Population standard deviation.
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len().max(1) as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub backbone_auc: Summary,
    pub coda_auc: Summary,
    pub backbone_rmse: Summary,
    pub coda_rmse: Summary,
    pub auc_gain: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PublishedReference {
    pub dataset: String,
    pub backbone_auc: f64,
    pub coda_auc: f64,
    pub note: String,
}

impl Default for PublishedReference {
    fn default() -> Self {
        Self {
            dataset: "BePKT, Help-DKT backbone".into(),
            backbone_auc: 60.10,
            coda_auc: 62.31,
            note: "published real-data figures; not reproduced at desk scale".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config: ExperimentConfig,
    pub off_grid: Vec<String>,
    pub seeds: Vec<SeedReport>,
    pub aggregate: Aggregate,
    pub reference: PublishedReference,
}

/// Frozen backbone and tuned adaptor for one seed.
pub struct Trained {
    pub stage: Stage,
    pub backbone: ParamStore<f64>,
    pub coda: ParamStore<f64>,
    pub samples: [Vec<Sample>; 3],
    pub backbone_log: TrainLog,
    pub tune_log: TuneLog,
}

pub fn train_seed(cfg: &ExperimentConfig, seed: u64) -> Result<Trained, ExperimentError> {
    let st = stage(cfg, seed)?;
    let tc = TrainConfig { seed, ..cfg.backbone };
    let (mut backbone, backbone_log) = train_backbone(&st.backbone_config, &st.encoded[0], &st.encoded[1], &tc)?;
    backbone.freeze_all();
    let samples = [prepare(&backbone, &st.encoded[0]), prepare(&backbone, &st.encoded[1]), prepare(&backbone, &st.encoded[2])];
    let coda_cfg = TuneConfig { seed, ..cfg.coda };
    let (coda, tune_log) = tune_coda(&backbone, &st.bank, &samples[0], &samples[1], &coda_cfg)?;
    Ok(Trained { stage: st, backbone, coda, samples, backbone_log, tune_log })
}

/// Full-sequence identification of `samples` scored against their truth rows.
pub fn identification(
    coda: &ParamStore<f64>,
    bank: &SolutionBank,
    seqs: &[EncodedSequence],
    truth: &[LearnerTruth],
    tc: &TuneConfig,
) -> Result<IdentificationScores, ExperimentError> {
    let mut pred = Vec::with_capacity(seqs.len());
    let mut rows = Vec::with_capacity(seqs.len());
    for s in seqs {
        let t = truth
            .iter()
            .find(|t| t.learner == s.learner)
            .ok_or_else(|| ExperimentError::Config(format!("no truth for learner {}", s.learner)))?;
        pred.push(annotate(&s.embeddings, &s.questions, bank, coda, &tc.denoise)?.roles);
        rows.push(t);
    }
    Ok(score_identification(&pred, &rows)?)
}

pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedReport, ExperimentError> {
    report_seed(cfg, seed, train_seed(cfg, seed)?)
}

/// Test metrics, identification scores and (when enabled) ablations of a trained seed.
pub fn report_seed(cfg: &ExperimentConfig, seed: u64, tr: Trained) -> Result<SeedReport, ExperimentError> {
    let tc = TuneConfig { seed, ..cfg.coda };
    let backbone_metrics = evaluate(&tr.backbone, &tr.stage.encoded[2])?;
    let coda_metrics = coda_evaluate(&tr.backbone, &tr.coda, &tr.stage.bank, &tr.samples[2], &tc.pass_config())?;
    let ident = match &tr.stage.truth {
        Some(t) => Some(identification(&tr.coda, &tr.stage.bank, &tr.stage.encoded[2], t, &tc)?),
        None => None,
    };
    let mut ablations = Vec::new();
    if cfg.ablations {
        for v in [Variant::NoWeak, Variant::NoUnwanted, Variant::NoNav] {
            let vc = v.apply(&tc);
            let (p, log) = tune_coda(&tr.backbone, &tr.stage.bank, &tr.samples[0], &tr.samples[1], &vc)?;
            let test = coda_evaluate(&tr.backbone, &p, &tr.stage.bank, &tr.samples[2], &vc.pass_config())?;
            ablations.push(VariantReport { variant: v, test, valid_auc: log.valid_auc, best: log.best });
        }
    }
    Ok(SeedReport {
        seed,
        learners: [tr.stage.train.learner_count(), tr.stage.valid.learner_count(), tr.stage.test.learner_count()],
        backbone: backbone_metrics,
        coda: coda_metrics,
        backbone_log: tr.backbone_log,
        tune_log: tr.tune_log,
        identification: ident,
        ablations,
    })
}

pub fn aggregate(seeds: &[SeedReport]) -> Aggregate {
    let col = |f: &dyn Fn(&SeedReport) -> f64| Summary::of(&seeds.iter().map(f).collect::<Vec<_>>());
    Aggregate {
        backbone_auc: col(&|s| s.backbone.auc),
        coda_auc: col(&|s| s.coda.auc),
        backbone_rmse: col(&|s| s.backbone.rmse),
        coda_rmse: col(&|s| s.coda.rmse),
        auc_gain: col(&|s| s.coda.auc - s.backbone.auc),
    }
}

/// Seeds run one after another; each seed parallelizes internally.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Report, ExperimentError> {
    let off_grid = cfg.validate()?;
    let seeds = cfg.seeds.iter().map(|&s| run_seed(cfg, s)).collect::<Result<Vec<_>, _>>()?;
    Ok(Report { config: cfg.clone(), off_grid, aggregate: aggregate(&seeds), seeds, reference: PublishedReference::default() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sparsity: f64,
    /// Mean edge count per test learner before unwanted removal.
    pub mean_edges: f64,
    pub auc: f64,
    pub f1: f64,
    pub rmse: f64,
    pub accuracy: f64,
}

/// One tuned evaluation per sparsity value on the first seed, everything else fixed.
pub fn sparsity_sweep(cfg: &ExperimentConfig, values: &[f64]) -> Result<Vec<SweepRow>, ExperimentError> {
    cfg.validate()?;
    let seed = cfg.seeds[0];
    let st = stage(cfg, seed)?;
    let (mut backbone, _) = train_backbone(&st.backbone_config, &st.encoded[0], &st.encoded[1], &TrainConfig { seed, ..cfg.backbone })?;
    backbone.freeze_all();
    let samples: Vec<Vec<Sample>> = st.encoded.iter().map(|e| prepare(&backbone, e)).collect();
    let mut rows = Vec::with_capacity(values.len());
    for &p in values {
        let mut tc = TuneConfig { seed, ..cfg.coda };
        tc.denoise.sparsity = p;
        let (coda, _) = tune_coda(&backbone, &st.bank, &samples[0], &samples[1], &tc)?;
        let m = coda_evaluate(&backbone, &coda, &st.bank, &samples[2], &tc.pass_config())?;
        let w = coda.get(METRIC_W).map_err(TrainerError::from)?.data.clone();
        let mut edges = 0usize;
        for s in &samples[2] {
            let metric = metric_matrix(&s.seq.embeddings, &w);
            let n = s.seq.len();
            edges += build_adjacency(&metric, edge_budget(p, n), (1..=n).collect())?.edge_count();
        }
        rows.push(SweepRow {
            sparsity: p,
            mean_edges: edges as f64 / samples[2].len().max(1) as f64,
            auc: m.auc,
            f1: m.f1,
            rmse: m.rmse,
            accuracy: m.accuracy,
        });
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("sparsity,mean_edges,auc,f1,rmse,accuracy\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{},{},{}\n", r.sparsity, r.mean_edges, r.auc, r.f1, r.rmse, r.accuracy));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub step: usize,
    pub role: String,
    pub raw: f64,
    pub corrected: f64,
}

/// Sigmoid of state coordinate `concept` before and after correction, per step.
pub fn export_trace(
    backbone: &ParamStore<f64>,
    coda: &ParamStore<f64>,
    bank: &SolutionBank,
    sample: &Sample,
    concept: usize,
    tc: &TuneConfig,
) -> Result<Vec<TracePoint>, ExperimentError> {
    let d_h = sample.states.first().map_or(0, Vec::len);
    if concept >= d_h {
        return Err(ExperimentError::Config(format!("concept {concept} outside hidden size {d_h}")));
    }
    let tr = crate::trainer::inductive_trace(backbone, coda, bank, sample, &tc.pass_config())?;
    Ok((0..tr.roles.len())
        .map(|t| TracePoint {
            step: t + 1,
            role: tr.roles[t].name().to_string(),
            raw: crate::numerics::sigmoid(tr.raw[t][concept]),
            corrected: crate::numerics::sigmoid(tr.corrected[t][concept]),
        })
        .collect())
}

pub fn trace_csv(points: &[TracePoint]) -> String {
    let mut out = String::from("step,role,raw,corrected\n");
    for p in points {
        out.push_str(&format!("{},{},{},{}\n", p.step, p.role, p.raw, p.corrected));
    }
    out
}
