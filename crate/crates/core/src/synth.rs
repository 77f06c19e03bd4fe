//! Synthetic programming sessions with known noise roles.
//!
//! Geometry (all vectors in `R^d`): a shared boilerplate direction, one unit
//! centroid per concept orthogonal to it, and a per-question offset. Core
//! submissions scatter around their question centre, weak ones copy an
//! earlier core within `radius`, unwanted ones sit at least `margin` away from
//! every concept centroid. Mastery moves only on core attempts.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{save_dataset, DataError, Dataset, LearnerSequence, SubmissionRecord, ACCEPTED};
use crate::denoise::Role;
use crate::encoder::{save_embeddings, EmbeddingProvider, EncoderError, FileEncoder};
use crate::numerics::{dot, norm, sigmoid};

pub const REJECTED: &str = "Wrong Answer";

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{0} predicted sequences for {1} true ones")]
    Misaligned(usize, usize),
    #[error("learner {learner}: {pred} predicted roles for {truth} steps")]
    StepMismatch { learner: usize, pred: usize, truth: usize },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub learners: usize,
    pub questions: usize,
    pub concepts: usize,
    pub mean_length: usize,
    pub unwanted_rate: f64,
    pub weak_rate: f64,
    pub dim: usize,
    /// Minimum distance between an unwanted embedding and any concept centroid.
    pub margin: f64,
    /// Maximum distance between a weak copy and its core.
    pub radius: f64,
    pub seed: u64,
    pub concepts_per_learner: usize,
    /// Mastery increment per core attempt.
    pub learning_gain: f64,
    /// Logit shift of a weak resubmission's acceptance.
    pub weak_boost: f64,
    /// Mastery slope of the weak-step accept logit; below the core slope, a weak verdict says little about mastery.
    pub weak_slope: f64,
    /// Spread of core submissions around their question centre.
    pub core_spread: f64,
    /// Standard deviation of the learner-level ability shared by all concepts.
    pub ability_spread: f64,
    /// Question difficulties are uniform on `[-difficulty_spread, difficulty_spread]`.
    pub difficulty_spread: f64,
    /// Per-learner noise rates are `2ρ·σ(±coupling·z)` for ability score `z`:
    /// weaker learners resubmit more, stronger ones stray more. Zero gives uniform rates.
    pub noise_coupling: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            learners: 200,
            questions: 50,
            concepts: 20,
            mean_length: 30,
            unwanted_rate: 0.1,
            weak_rate: 0.3,
            dim: 32,
            margin: 0.5,
            radius: 0.05,
            seed: 1,
            concepts_per_learner: 3,
            learning_gain: 0.35,
            weak_boost: 2.5,
            weak_slope: 0.3,
            core_spread: 0.15,
            ability_spread: 1.0,
            difficulty_spread: 1.0,
            noise_coupling: 1.5,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.unwanted_rate) || !(0.0..=1.0).contains(&self.weak_rate) {
            return bad("noise rates must lie in [0, 1]");
        }
        if self.unwanted_rate + self.weak_rate > 0.9 {
            return bad("unwanted_rate + weak_rate must be at most 0.9");
        }
        if 2.0 * (self.unwanted_rate + self.weak_rate) > 1.0 && self.noise_coupling != 0.0 {
            return bad("coupled noise rates need unwanted_rate + weak_rate at most 0.5");
        }
        if self.margin <= self.radius {
            return bad("margin must exceed the perturbation radius");
        }
        if self.learners == 0 || self.concepts == 0 || self.questions < self.concepts {
            return bad("need learners > 0 and questions >= concepts > 0");
        }
        if self.dim < self.concepts + 2 {
            return bad("dim must be at least concepts + 2");
        }
        if self.concepts_per_learner == 0 || self.concepts_per_learner > self.concepts {
            return bad("concepts_per_learner must lie in 1..=concepts");
        }
        if self.mean_length < crate::data::MIN_SEQUENCE_LENGTH {
            return bad("mean_length below the minimum sequence length");
        }
        Ok(())
    }

    pub fn concept_of(&self, question: usize) -> usize {
        question % self.concepts
    }
}

/// True role of one step; `core_step` is 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "role", rename_all = "lowercase")]
pub enum TrueRole {
    Unwanted,
    Core,
    Weak { core_step: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerTruth {
    pub learner: String,
    pub roles: Vec<TrueRole>,
    /// Per-concept mastery just before each step.
    pub mastery: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub learners: Vec<LearnerTruth>,
    pub concept_centroids: Vec<Vec<f64>>,
}

impl GroundTruth {
    pub fn find(&self, learner: &str) -> Option<&LearnerTruth> {
        self.learners.iter().find(|l| l.learner == learner)
    }
}

pub struct Generated {
    pub dataset: Dataset,
    pub truth: GroundTruth,
    pub provider: EmbeddingProvider,
    /// Embedding rows in generation order, keyed by record code.
    pub rows: Vec<(String, Vec<f64>)>,
}

struct World {
    boilerplate: Vec<f64>,
    centroids: Vec<Vec<f64>>,
    centres: Vec<Vec<f64>>,
    difficulty: Vec<f64>,
}

fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = norm(&v);
    v.into_iter().map(|x| x / n).collect()
}

fn orthogonalize(mut v: Vec<f64>, basis: &[Vec<f64>]) -> Vec<f64> {
    for b in basis {
        let p = dot(&v, b);
        v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
    }
    v
}

fn axpy(a: f64, x: &[f64], y: &[f64]) -> Vec<f64> {
    x.iter().zip(y).map(|(x, y)| a * x + y).collect()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn world(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> World {
    let d = cfg.dim;
    let boilerplate = unit(gaussian(rng, d));
    let mut basis = vec![boilerplate.clone()];
    let mut centroids = Vec::with_capacity(cfg.concepts);
    for _ in 0..cfg.concepts {
        let c = unit(orthogonalize(gaussian(rng, d), &basis));
        basis.push(c.clone());
        centroids.push(c);
    }
    let centres = (0..cfg.questions)
        .map(|q| {
            let offset = unit(orthogonalize(gaussian(rng, d), &basis[..1]));
            unit(axpy(0.5, &offset, &centroids[cfg.concept_of(q)]))
        })
        .collect();
    let difficulty = (0..cfg.questions).map(|_| cfg.difficulty_spread * rng.random_range(-1.0..1.0)).collect();
    World { boilerplate, centroids, centres, difficulty }
}

struct Step {
    question: usize,
    embedding: Vec<f64>,
    accepted: bool,
    role: TrueRole,
    mastery: Vec<f64>,
}

const SLOPE: f64 = 1.5;
/// Boilerplate share of unwanted code: enough to skew its similarity profile, too little to link unwanted codes together.
const UNWANTED_BOILERPLATE: f64 = 0.3;
/// Fraction of learners who write the shared boilerplate; it must dominate every question bank.
const STYLE_SHARE: f64 = 0.85;

fn learner_steps(cfg: &SynthConfig, w: &World, rng: &mut ChaCha8Rng) -> Vec<Step> {
    let d = cfg.dim;
    let lo = (cfg.mean_length as f64 * 0.6).round() as usize;
    let hi = (cfg.mean_length as f64 * 1.4).round() as usize;
    let len = rng.random_range(lo..=hi).max(crate::data::MIN_SEQUENCE_LENGTH);
    let mut pool: Vec<usize> = (0..cfg.concepts).collect();
    for i in 0..cfg.concepts_per_learner {
        let j = rng.random_range(i..pool.len());
        pool.swap(i, j);
    }
    let concepts = &pool[..cfg.concepts_per_learner];
    let questions: Vec<usize> = (0..cfg.questions).filter(|q| concepts.contains(&cfg.concept_of(*q))).collect();
    let style = if rng.random::<f64>() < STYLE_SHARE { 0.6 } else { 0.0 };
    let z: f64 = StandardNormal.sample(rng);
    let ability = cfg.ability_spread * z - 0.5;
    let unwanted_rate = 2.0 * cfg.unwanted_rate * sigmoid(cfg.noise_coupling * z);
    let weak_rate = 2.0 * cfg.weak_rate * sigmoid(-cfg.noise_coupling * z);
    let mut mastery: Vec<f64> = (0..cfg.concepts)
        .map(|_| {
            let e: f64 = StandardNormal.sample(rng);
            ability + 0.3 * e
        })
        .collect();
    let mut steps: Vec<Step> = Vec::with_capacity(len);
    let mut current = questions[rng.random_range(0..questions.len())];
    let mut last_failed = false;
    let mut cores: Vec<usize> = Vec::new();
    for t in 0..len {
        let u: f64 = rng.random();
        let before = mastery.clone();
        let step = if u < unwanted_rate {
            let embedding = loop {
                let e = axpy(UNWANTED_BOILERPLATE, &w.boilerplate, &unit(gaussian(rng, d)));
                if w.centroids.iter().all(|c| distance(&e, c) >= cfg.margin) {
                    break e;
                }
            };
            Step { question: current, embedding, accepted: false, role: TrueRole::Unwanted, mastery: before }
        } else if u < unwanted_rate + weak_rate && !cores.is_empty() {
            let src = if rng.random::<f64>() < 0.6 { *cores.last().expect("non-empty") } else { cores[rng.random_range(0..cores.len())] };
            let core = &steps[src];
            let q = core.question;
            let dir = unit(gaussian(rng, d));
            let embedding = axpy(cfg.radius * rng.random::<f64>(), &dir, &core.embedding);
            let p = sigmoid(cfg.weak_slope * (mastery[cfg.concept_of(q)] - w.difficulty[q]) + cfg.weak_boost);
            current = q;
            Step { question: q, embedding, accepted: rng.random::<f64>() < p, role: TrueRole::Weak { core_step: src + 1 }, mastery: before }
        } else {
            if !(last_failed && rng.random::<f64>() < 0.5) {
                current = questions[rng.random_range(0..questions.len())];
            }
            let q = current;
            let k = cfg.concept_of(q);
            let noise = gaussian(rng, d);
            let scatter = cfg.core_spread / (d as f64).sqrt();
            let embedding: Vec<f64> = (0..d).map(|i| w.centres[q][i] + scatter * noise[i] + style * w.boilerplate[i]).collect();
            let p = sigmoid(SLOPE * (mastery[k] - w.difficulty[q]));
            let accepted = rng.random::<f64>() < p;
            last_failed = !accepted;
            mastery[k] += cfg.learning_gain;
            cores.push(t);
            Step { question: q, embedding, accepted, role: TrueRole::Core, mastery: before }
        };
        steps.push(step);
    }
    steps
}

/// Deterministic under `cfg.seed`; learners use independent streams.
pub fn generate(cfg: &SynthConfig) -> Result<Generated, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let w = world(cfg, &mut rng);
    let per: Vec<Vec<Step>> = (0..cfg.learners)
        .into_par_iter()
        .map(|l| {
            let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
            r.set_stream(l as u64 + 1);
            learner_steps(cfg, &w, &mut r)
        })
        .collect();
    let mut sequences = Vec::with_capacity(cfg.learners);
    let mut learners = Vec::with_capacity(cfg.learners);
    let mut rows = Vec::new();
    for (l, steps) in per.into_iter().enumerate() {
        let name = format!("s{l:04}");
        let mut records = Vec::with_capacity(steps.len());
        let mut roles = Vec::with_capacity(steps.len());
        let mut mastery = Vec::with_capacity(steps.len());
        for (t, s) in steps.into_iter().enumerate() {
            let code = format!("{name}/{}", t + 1);
            records.push(SubmissionRecord {
                step: t + 1,
                question: s.question,
                concept: cfg.concept_of(s.question),
                code: code.clone(),
                verdict: if s.accepted { ACCEPTED } else { REJECTED }.to_string(),
                correct: s.accepted,
            });
            // Stored at file precision so in-memory and reloaded runs agree.
            rows.push((code, s.embedding.iter().map(|&x| x as f32 as f64).collect()));
            roles.push(s.role);
            mastery.push(s.mastery);
        }
        sequences.push(LearnerSequence { learner: name.clone(), records });
        learners.push(LearnerTruth { learner: name, roles, mastery });
    }
    let provider = EmbeddingProvider::File(FileEncoder::from_rows(cfg.dim, rows.clone())?);
    Ok(Generated {
        dataset: Dataset { sequences, question_count: cfg.questions, concept_count: cfg.concepts },
        truth: GroundTruth { learners, concept_centroids: w.centroids },
        provider,
        rows,
    })
}

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const EMBEDDINGS_FILE: &str = "embeddings.bin";
pub const TRUTH_FILE: &str = "truth.jsonl";

/// Writes the dataset, the embedding table and one truth line per learner.
pub fn write_generated(g: &Generated, dir: &Path) -> Result<(), SynthError> {
    std::fs::create_dir_all(dir)?;
    save_dataset(&g.dataset, &dir.join(DATASET_FILE))?;
    save_embeddings(&dir.join(EMBEDDINGS_FILE), g.provider.dim(), &g.rows)?;
    let mut out = String::new();
    for l in &g.truth.learners {
        out.push_str(&serde_json::to_string(l)?);
        out.push('\n');
    }
    std::fs::write(dir.join(TRUTH_FILE), out)?;
    Ok(())
}

pub fn load_truth(path: &Path) -> Result<Vec<LearnerTruth>, SynthError> {
    let text = std::fs::read_to_string(path)?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

impl DetectionScore {
    /// Empty predicted (or actual) sets give precision (recall) 1.
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if a + b == 0 { 1.0 } else { a as f64 / (a + b) as f64 };
        let (precision, recall) = (ratio(tp, fp), ratio(tp, fn_));
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        Self { precision, recall, f1, true_positives: tp, false_positives: fp, false_negatives: fn_ }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct IdentificationScores {
    pub unwanted: DetectionScore,
    pub weak: DetectionScore,
}

/// Binary detection scores for the unwanted and weak roles; cluster identity is ignored.
pub fn score_identification(pred: &[Vec<Role>], truth: &[&LearnerTruth]) -> Result<IdentificationScores, SynthError> {
    if pred.len() != truth.len() {
        return Err(SynthError::Misaligned(pred.len(), truth.len()));
    }
    let mut u = [0usize; 3];
    let mut w = [0usize; 3];
    let tally = |c: &mut [usize; 3], p: bool, t: bool| match (p, t) {
        (true, true) => c[0] += 1,
        (true, false) => c[1] += 1,
        (false, true) => c[2] += 1,
        _ => {}
    };
    for (l, (p, t)) in pred.iter().zip(truth).enumerate() {
        if p.len() != t.roles.len() {
            return Err(SynthError::StepMismatch { learner: l, pred: p.len(), truth: t.roles.len() });
        }
        for (pr, tr) in p.iter().zip(&t.roles) {
            tally(&mut u, pr.is_unwanted(), matches!(tr, TrueRole::Unwanted));
            tally(&mut w, pr.is_weak(), matches!(tr, TrueRole::Weak { .. }));
        }
    }
    Ok(IdentificationScores {
        unwanted: DetectionScore::from_counts(u[0], u[1], u[2]),
        weak: DetectionScore::from_counts(w[0], w[1], w[2]),
    })
}

/// Maps true roles onto predicted-role form: clusters follow true cores in order.
pub fn oracle_roles(truth: &LearnerTruth) -> Vec<Role> {
    let mut cluster_of = vec![0usize; truth.roles.len()];
    let mut next = 0;
    truth
        .roles
        .iter()
        .enumerate()
        .map(|(t, r)| match *r {
            TrueRole::Unwanted => Role::Unwanted,
            TrueRole::Core => {
                cluster_of[t] = next;
                next += 1;
                Role::Core { cluster: cluster_of[t] }
            }
            TrueRole::Weak { core_step } => Role::Weak { cluster: cluster_of[core_step - 1], core_step },
        })
        .collect()
}
