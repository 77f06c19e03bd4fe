//! Adaptor tuning against a frozen backbone, the navigational bound and
//! inductive evaluation.
//!
//! At test time step `t` is corrected with the structure (graph, roles,
//! refined code) of the prefix ending at `t`. Tuning uses the same per-prefix
//! structures by default, so no later submission informs an earlier
//! correction; clearing `prefix_structure` annotates each full sequence once. Per batch the structures are recomputed from the current
//! parameters and held fixed while differentiating. The batch
//! objective is the prediction plus noise-feature loss, normalized by the
//! number of predicted steps, plus the weighted navigational bound
//! `s + s²` with `s = Σ |g_prev| · |δθ|` and `δθ = −lr · ∇L(θ)`. Its gradient
//! needs a Hessian-vector product, obtained by running the same tape on
//! [`Dual`] numbers.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adaptor::{adaptor_terms, build_prompt, correct_state, AdaptorVars, LossSwitches, ADAPTOR_A, ADAPTOR_B, PROMPT_W};
use crate::backbone::{hidden_states, predict_from_states, BackboneVars};
use crate::data::{EncodedSequence, SolutionBank};
use crate::denoise::{
    annotate, refine_on_tape, Annotation, DenoiseConfig, DenoiseError, DenoiseVars, Role, ATT_B1, ATT_B2, ATT_CTX, ATT_NB, ATT_SELF,
    ATT_W2, ATT_WC, GCN_W, METRIC_W,
};
use crate::metrics::{compute_metrics, Metrics, MetricsError};
use crate::numerics::{cast_slice, sgd_step, Adam, AdamConfig, Dual, NumericsError, ParamGrads, ParamStore, Scalar, Tape, Var};

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("backbone slot `{0}` is not frozen")]
    UnfrozenBackbone(String),
    #[error("backbone parameters changed during tuning")]
    BackboneModified,
    #[error("training split has no sequence with a next step")]
    EmptyTrain,
    #[error("non-finite tuning loss at epoch {0}")]
    Diverged(usize),
    #[error(transparent)]
    Denoise(#[from] DenoiseError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// `s + s²` with `s = Σ |g_i| · |δθ_i|`: the Gauss–Newton bound on the change
/// in prediction loss when the Jacobian is replaced by the gradient row.
pub fn nav_bound(g: &[f64], delta: &[f64]) -> f64 {
    assert_eq!(g.len(), delta.len(), "nav_bound dimension mismatch");
    let s: f64 = g.iter().zip(delta).map(|(a, b)| a.abs() * b.abs()).sum();
    s + s * s
}

/// Fresh adaptor parameters. The metric, attention context and prompt
/// weights start at one, the up-projection at zero so the first forward pass
/// reproduces the backbone exactly.
pub fn init_coda_params(code_dim: usize, hidden_dim: usize, bottleneck: usize, seed: u64) -> ParamStore<f64> {
    let d = code_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamStore::new();
    let mut xavier = |p: &mut ParamStore<f64>, name: &str, shape: &[usize], fan: (usize, usize), gain: f64| {
        let limit = gain * (6.0 / (fan.0 + fan.1) as f64).sqrt();
        let n = shape.iter().product();
        p.insert(name, shape, (0..n).map(|_| rng.random_range(-limit..limit)).collect()).expect("init shape");
    };
    p.insert(METRIC_W, &[d], vec![1.0; d]).expect("init shape");
    xavier(&mut p, GCN_W, &[d, d], (d, d), 1.0);
    p.insert(ATT_WC, &[d], vec![1.0; d]).expect("init shape");
    xavier(&mut p, ATT_SELF, &[d, d], (3 * d, d), 1.0);
    xavier(&mut p, ATT_CTX, &[d, d], (3 * d, d), 1.0);
    xavier(&mut p, ATT_NB, &[d, d], (3 * d, d), 1.0);
    p.zeros(ATT_B1, &[d]);
    xavier(&mut p, ATT_W2, &[d], (d, 1), 1.0);
    p.zeros(ATT_B2, &[1]);
    p.insert(PROMPT_W, &[d], vec![1.0; d]).expect("init shape");
    xavier(&mut p, ADAPTOR_A, &[bottleneck, 2 * d], (bottleneck, 2 * d), 0.1);
    p.zeros(ADAPTOR_B, &[bottleneck, hidden_dim]);
    p
}

/// Same layout as [`init_coda_params`] with every value zero.
pub fn zeroed_coda_params(code_dim: usize, hidden_dim: usize, bottleneck: usize) -> ParamStore<f64> {
    let mut p = init_coda_params(code_dim, hidden_dim, bottleneck, 0);
    for i in 0..p.len() {
        p.slot_mut(i).data.iter_mut().for_each(|v| *v = 0.0);
    }
    p
}

/// A learner with its frozen-backbone states `h_1..h_T`.
#[derive(Debug, Clone)]
pub struct Sample {
    pub seq: EncodedSequence,
    pub states: Vec<Vec<f64>>,
}

pub fn prepare(backbone: &ParamStore<f64>, seqs: &[EncodedSequence]) -> Vec<Sample> {
    seqs.par_iter().map(|s| Sample { seq: s.clone(), states: hidden_states(backbone, s) }).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TuneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub seed: u64,
    pub nav_weight: f64,
    /// Apply the navigational gradient as a separate plain step after the optimizer step.
    pub sequential_nav: bool,
    pub weak_loss: bool,
    /// Feed corrected states back into the frozen recurrence.
    pub feedback: bool,
    /// Low-rank bottleneck; `None` means half the code dimension.
    pub bottleneck: Option<usize>,
    /// Tune on per-prefix structures instead of one full-sequence annotation.
    pub prefix_structure: bool,
    pub denoise: DenoiseConfig,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 1e-2,
            batch_size: 32,
            patience: 10,
            seed: 7,
            nav_weight: 1.0,
            sequential_nav: false,
            weak_loss: true,
            feedback: true,
            bottleneck: None,
            prefix_structure: true,
            denoise: DenoiseConfig::default(),
        }
    }
}

impl TuneConfig {
    pub fn bottleneck_for(&self, code_dim: usize) -> usize {
        self.bottleneck.unwrap_or(code_dim / 2).max(1)
    }

    pub fn pass_config(&self) -> PassConfig {
        PassConfig {
            denoise: self.denoise,
            switches: LossSwitches { weak: self.weak_loss, unwanted: self.denoise.detect_unwanted },
            feedback: self.feedback,
        }
    }
}

/// Everything a forward pass needs besides parameters and data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PassConfig {
    pub denoise: DenoiseConfig,
    pub switches: LossSwitches,
    pub feedback: bool,
}

impl Default for PassConfig {
    fn default() -> Self {
        TuneConfig::default().pass_config()
    }
}

/// Corrected states for steps `0..len`. Without feedback the stored backbone
/// states are corrected independently; with feedback each corrected state is
/// the recurrence input of the next step.
#[allow(clippy::too_many_arguments)]
fn corrected_chain<T: Scalar>(
    tape: &mut Tape<T>,
    bb: &BackboneVars,
    av: &AdaptorVars,
    sample: &Sample,
    roles: &[Role],
    refined: &[Var],
    len: usize,
    feedback: bool,
) -> Vec<Var> {
    let seq = &sample.seq;
    let hidden = sample.states.first().map_or(0, Vec::len);
    let mut h_prev = tape.leaf(vec![T::zero(); hidden]);
    (0..len)
        .map(|t| {
            let h = if feedback {
                let x = tape.leaf(cast_slice(&seq.embeddings[t]));
                let x_in = bb.ce(tape, x);
                bb.ke(tape, h_prev, seq.questions[t], seq.concepts[t], x_in, seq.outcomes[t])
            } else {
                tape.leaf(cast_slice(&sample.states[t]))
            };
            let p = build_prompt(tape, &roles[t], refined[t], av.w_p);
            h_prev = correct_state(tape, h, p, av);
            h_prev
        })
        .collect()
}

/// Loss components of one learner (sums) with gradients of the total and of
/// the prediction part alone.
#[derive(Debug, Clone)]
pub struct LearnerPass<T> {
    pub pkt: T,
    pub adaptor: T,
    pub terms: usize,
    pub grad_total: ParamGrads<T>,
    pub grad_pkt: ParamGrads<T>,
}

/// Annotations of the first `count` prefixes; entry `t` covers steps `0..=t`.
pub fn annotate_prefixes(
    seq: &EncodedSequence,
    count: usize,
    bank: &SolutionBank,
    coda: &ParamStore<f64>,
    cfg: &DenoiseConfig,
) -> Result<Vec<Annotation>, DenoiseError> {
    (1..=count.min(seq.len())).map(|t| annotate(&seq.embeddings[..t], &seq.questions[..t], bank, coda, cfg)).collect()
}

/// Discrete structure of one learner held fixed during a tuning step.
#[derive(Debug, Clone, PartialEq)]
pub enum Structure {
    /// One annotation of the whole sequence.
    Full(Annotation),
    /// One annotation per predicted step, see [`annotate_prefixes`].
    Prefixes(Vec<Annotation>),
}

impl Structure {
    pub fn build(
        seq: &EncodedSequence,
        prefix: bool,
        bank: &SolutionBank,
        coda: &ParamStore<f64>,
        cfg: &DenoiseConfig,
    ) -> Result<Self, DenoiseError> {
        Ok(if prefix {
            Self::Prefixes(annotate_prefixes(seq, seq.len().saturating_sub(1), bank, coda, cfg)?)
        } else {
            Self::Full(annotate(&seq.embeddings, &seq.questions, bank, coda, cfg)?)
        })
    }
}

/// Differentiable forward/backward for one learner under a fixed structure.
pub fn learner_pass<T: Scalar>(
    coda: &ParamStore<T>,
    backbone: &ParamStore<T>,
    sample: &Sample,
    structure: &Structure,
    pc: &PassConfig,
) -> Result<Option<LearnerPass<T>>, DenoiseError> {
    let n = sample.seq.len();
    if n < 2 {
        return Ok(None);
    }
    let mut tape = Tape::new();
    let vars = coda.bind(&mut tape);
    let dv = DenoiseVars::pick(coda, &vars);
    let av = AdaptorVars::pick(coda, &vars);
    let bb = BackboneVars::bind(&mut tape, backbone);
    let xs: Vec<Var> = sample.seq.embeddings.iter().map(|x| tape.leaf(cast_slice(x))).collect();
    let (roles, refined) = match structure {
        Structure::Full(ann) => (ann.roles.clone(), refine_on_tape(&mut tape, &dv, &xs, ann, &pc.denoise)?),
        Structure::Prefixes(prefixes) => {
            assert!(prefixes.len() >= n - 1, "one prefix annotation per predicted step");
            let mut roles = Vec::with_capacity(n - 1);
            let mut refined = Vec::with_capacity(n - 1);
            for (t, ann) in prefixes[..n - 1].iter().enumerate() {
                let r = refine_on_tape(&mut tape, &dv, &xs[..=t], ann, &pc.denoise)?;
                roles.push(ann.roles[t]);
                refined.push(r[t]);
            }
            (roles, refined)
        }
    };
    let corrected = corrected_chain(&mut tape, &bb, &av, sample, &roles, &refined, n - 1, pc.feedback);
    let pkt_terms: Vec<Var> = (0..n - 1)
        .map(|t| {
            let z = bb.logit(&mut tape, corrected[t], sample.seq.questions[t + 1]);
            tape.bce_with_logit(z, T::lit(sample.seq.outcomes[t + 1] as f64))
        })
        .collect();
    let ad_terms = adaptor_terms(&mut tape, &corrected, &roles, n - 1, pc.switches);
    let pkt = tape.add_all(&pkt_terms).expect("at least one prediction");
    let total = match tape.add_all(&ad_terms) {
        Some(ad) => tape.add(pkt, ad),
        None => pkt,
    };
    let g_total = tape.backward(total);
    let g_pkt = tape.backward(pkt);
    let (pkt_v, total_v) = (tape.scalar(pkt), tape.scalar(total));
    Ok(Some(LearnerPass {
        pkt: pkt_v,
        adaptor: total_v - pkt_v,
        terms: n - 1,
        grad_total: coda.collect(&vars, &g_total),
        grad_pkt: coda.collect(&vars, &g_pkt),
    }))
}

/// One batch with structures fixed.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    pub samples: Vec<&'a Sample>,
    pub structures: Vec<Structure>,
}

impl<'a> Batch<'a> {
    pub fn annotate(
        samples: Vec<&'a Sample>,
        prefix: bool,
        coda: &ParamStore<f64>,
        bank: &SolutionBank,
        cfg: &DenoiseConfig,
    ) -> Result<Self, DenoiseError> {
        let structures = samples.par_iter().map(|s| Structure::build(&s.seq, prefix, bank, coda, cfg)).collect::<Result<Vec<_>, _>>()?;
        Ok(Self { samples, structures })
    }
}

/// Batch-level prediction + noise-feature loss and gradients, normalized by
/// the number of predicted steps.
#[derive(Debug, Clone)]
pub struct BatchLoss<T> {
    pub pkt: T,
    pub adaptor: T,
    pub terms: usize,
    pub grad: ParamGrads<T>,
    pub grad_pkt: ParamGrads<T>,
}

pub fn batch_loss<T: Scalar>(
    coda: &ParamStore<T>,
    backbone: &ParamStore<T>,
    batch: &Batch<'_>,
    pc: &PassConfig,
) -> Result<BatchLoss<T>, DenoiseError> {
    let passes = batch
        .samples
        .par_iter()
        .zip(batch.structures.par_iter())
        .map(|(s, a)| learner_pass(coda, backbone, s, a, pc))
        .collect::<Result<Vec<_>, _>>()?;
    let mut out = BatchLoss {
        pkt: T::zero(),
        adaptor: T::zero(),
        terms: 0,
        grad: ParamGrads::zeros_like(coda),
        grad_pkt: ParamGrads::zeros_like(coda),
    };
    for p in passes.into_iter().flatten() {
        out.pkt = out.pkt + p.pkt;
        out.adaptor = out.adaptor + p.adaptor;
        out.terms += p.terms;
        out.grad.add_assign(&p.grad_total);
        out.grad_pkt.add_assign(&p.grad_pkt);
    }
    if out.terms > 0 {
        let inv = T::one() / T::lit(out.terms as f64);
        out.pkt = out.pkt * inv;
        out.adaptor = out.adaptor * inv;
        out.grad.scale(inv);
        out.grad_pkt.scale(inv);
    }
    Ok(out)
}

/// Hessian of the normalized batch loss applied to `v`, by forward-over-reverse.
pub fn batch_hvp(
    coda: &ParamStore<f64>,
    backbone_dual: &ParamStore<Dual<f64>>,
    batch: &Batch<'_>,
    pc: &PassConfig,
    v: &[f64],
) -> Result<Vec<f64>, DenoiseError> {
    let mut seeded: ParamStore<Dual<f64>> = coda.cast();
    let flat = coda.flatten_trainable();
    let duals: Vec<Dual<f64>> = flat.iter().zip(v).map(|(&re, &eps)| Dual::new(re, eps)).collect();
    seeded.assign_trainable(&duals);
    let loss = batch_loss(&seeded, backbone_dual, batch, pc)?;
    Ok(loss.grad.flatten().iter().map(|d| d.eps).collect())
}

/// Full batch objective at `coda` given the previous batch's prediction gradient.
#[derive(Debug, Clone)]
pub struct Objective {
    pub pkt: f64,
    pub adaptor: f64,
    pub nav: f64,
    pub total: f64,
    pub terms: usize,
    /// Gradient of prediction + noise-feature loss.
    pub grad_main: Vec<f64>,
    /// Gradient of the navigational term (unweighted).
    pub grad_nav: Vec<f64>,
    pub grad_total: Vec<f64>,
    pub grad_pkt: Vec<f64>,
}

pub fn objective(
    coda: &ParamStore<f64>,
    backbone: &ParamStore<f64>,
    backbone_dual: &ParamStore<Dual<f64>>,
    batch: &Batch<'_>,
    prev_grad: Option<&[f64]>,
    tc: &TuneConfig,
) -> Result<Objective, DenoiseError> {
    let pc = tc.pass_config();
    let main = batch_loss(coda, backbone, batch, &pc)?;
    let grad_main = main.grad.flatten();
    let mut nav = 0.0;
    let mut grad_nav = vec![0.0; grad_main.len()];
    if let (Some(g_prev), true) = (prev_grad, tc.nav_weight != 0.0) {
        let delta: Vec<f64> = grad_main.iter().map(|g| -tc.lr * g).collect();
        nav = nav_bound(g_prev, &delta);
        let s: f64 = g_prev.iter().zip(&delta).map(|(a, b)| a.abs() * b.abs()).sum();
        let v: Vec<f64> = g_prev.iter().zip(&grad_main).map(|(a, g)| a.abs() * sign(*g)).collect();
        let hv = batch_hvp(coda, backbone_dual, batch, &pc, &v)?;
        grad_nav = hv.iter().map(|h| (1.0 + 2.0 * s) * tc.lr * h).collect();
    }
    let grad_total = grad_main.iter().zip(&grad_nav).map(|(a, b)| a + tc.nav_weight * b).collect();
    Ok(Objective {
        pkt: main.pkt,
        adaptor: main.adaptor,
        nav,
        total: main.pkt + main.adaptor + tc.nav_weight * nav,
        terms: main.terms,
        grad_main,
        grad_nav,
        grad_total,
        grad_pkt: main.grad_pkt.flatten(),
    })
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub pkt: f64,
    pub adaptor: f64,
    pub nav: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TuneLog {
    pub epochs: Vec<EpochLoss>,
    /// Validation AUC of the initial parameters followed by one entry per epoch.
    pub valid_auc: Vec<f64>,
    /// Index into `valid_auc` of the selected parameters.
    pub best: usize,
    pub nav_batches: usize,
}

pub fn check_frozen(backbone: &ParamStore<f64>) -> Result<(), TrainerError> {
    match backbone.slots().iter().find(|s| !s.frozen) {
        Some(s) => Err(TrainerError::UnfrozenBackbone(s.name.clone())),
        None => Ok(()),
    }
}

/// Tunes the adaptor parameters with the backbone frozen; returns the
/// parameters with best inductive validation AUC (the initial ones included).
pub fn tune_coda(
    backbone: &ParamStore<f64>,
    bank: &SolutionBank,
    train: &[Sample],
    valid: &[Sample],
    tc: &TuneConfig,
) -> Result<(ParamStore<f64>, TuneLog), TrainerError> {
    check_frozen(backbone)?;
    let fingerprint = backbone.fingerprint();
    let usable: Vec<&Sample> = train.iter().filter(|s| s.seq.len() >= 2).collect();
    if usable.is_empty() {
        return Err(TrainerError::EmptyTrain);
    }
    let code_dim = usable[0].seq.embeddings[0].len();
    let hidden = usable[0].states[0].len();
    let mut coda = init_coda_params(code_dim, hidden, tc.bottleneck_for(code_dim), tc.seed);
    let backbone_dual: ParamStore<Dual<f64>> = backbone.cast();
    let mut opt = Adam::new(AdamConfig::with_lr(tc.lr), &coda);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0xc0da);
    let mut log = TuneLog::default();
    let mut best = coda.clone();
    let mut best_auc = coda_evaluate(backbone, &coda, bank, valid, &tc.pass_config())?.auc;
    log.valid_auc.push(best_auc);
    let mut since_best = 0;
    let mut prev_grad: Option<Vec<f64>> = None;
    let mut order: Vec<usize> = (0..usable.len()).collect();
    for epoch in 0..tc.epochs {
        order.shuffle(&mut rng);
        let mut acc = EpochLoss::default();
        let mut batches = 0;
        for chunk in order.chunks(tc.batch_size.max(1)) {
            let batch = Batch::annotate(chunk.iter().map(|&i| usable[i]).collect(), tc.prefix_structure, &coda, bank, &tc.denoise)?;
            let obj = objective(&coda, backbone, &backbone_dual, &batch, prev_grad.as_deref(), tc)?;
            if prev_grad.is_some() && tc.nav_weight != 0.0 {
                log.nav_batches += 1;
            }
            if tc.sequential_nav {
                let main = ParamGrads::from_flat(&coda, &obj.grad_main);
                opt.step(&mut coda, &main);
                let nav_step: Vec<f64> = obj.grad_nav.iter().map(|g| tc.nav_weight * g).collect();
                let nav = ParamGrads::from_flat(&coda, &nav_step);
                sgd_step(&mut coda, &nav, tc.lr);
            } else {
                let total = ParamGrads::from_flat(&coda, &obj.grad_total);
                opt.step(&mut coda, &total);
            }
            prev_grad = Some(obj.grad_pkt);
            acc.pkt += obj.pkt;
            acc.adaptor += obj.adaptor;
            acc.nav += obj.nav;
            batches += 1;
        }
        let inv = 1.0 / batches as f64;
        let epoch_loss = EpochLoss { pkt: acc.pkt * inv, adaptor: acc.adaptor * inv, nav: acc.nav * inv };
        if !(epoch_loss.pkt + epoch_loss.adaptor + epoch_loss.nav).is_finite() || !coda.all_finite() {
            return Err(TrainerError::Diverged(epoch));
        }
        if backbone.fingerprint() != fingerprint {
            return Err(TrainerError::BackboneModified);
        }
        log.epochs.push(epoch_loss);
        let auc = coda_evaluate(backbone, &coda, bank, valid, &tc.pass_config())?.auc;
        log.valid_auc.push(auc);
        if auc > best_auc {
            best_auc = auc;
            best = coda.clone();
            log.best = epoch + 1;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= tc.patience {
                break;
            }
        }
    }
    Ok((best, log))
}

/// Per-step outcome of inductive evaluation for one learner.
#[derive(Debug, Clone, PartialEq)]
pub struct InductiveTrace {
    /// Role of step `t` judged from the prefix ending at `t`.
    pub roles: Vec<Role>,
    pub raw: Vec<Vec<f64>>,
    pub corrected: Vec<Vec<f64>>,
    /// Probability for steps `2..T`.
    pub predictions: Vec<f64>,
}

/// Rebuilds the structure on every prefix `1..t`, corrects `h_t` and predicts step `t+1`.
pub fn inductive_trace(
    backbone: &ParamStore<f64>,
    coda: &ParamStore<f64>,
    bank: &SolutionBank,
    sample: &Sample,
    pc: &PassConfig,
) -> Result<InductiveTrace, DenoiseError> {
    let n = sample.seq.len();
    let prefixes = annotate_prefixes(&sample.seq, n, bank, coda, &pc.denoise)?;
    let mut tape = Tape::new();
    let vars = coda.bind(&mut tape);
    let av = AdaptorVars::pick(coda, &vars);
    let bb = BackboneVars::bind(&mut tape, backbone);
    let roles: Vec<Role> = prefixes.iter().enumerate().map(|(t, a)| a.roles[t]).collect();
    let refined: Vec<Var> = prefixes.iter().enumerate().map(|(t, a)| tape.leaf(a.refined[t].clone())).collect();
    let chain = corrected_chain(&mut tape, &bb, &av, sample, &roles, &refined, n, pc.feedback);
    let corrected: Vec<Vec<f64>> = chain.iter().map(|&v| tape.value(v).to_vec()).collect();
    let predictions = predict_from_states(backbone, &corrected, &sample.seq.questions);
    Ok(InductiveTrace { roles, raw: sample.states.clone(), corrected, predictions })
}

pub fn coda_predictions(
    backbone: &ParamStore<f64>,
    coda: &ParamStore<f64>,
    bank: &SolutionBank,
    samples: &[Sample],
    pc: &PassConfig,
) -> Result<(Vec<f64>, Vec<u8>), DenoiseError> {
    let per = samples
        .par_iter()
        .map(|s| inductive_trace(backbone, coda, bank, s, pc).map(|tr| (tr.predictions, s.seq.outcomes[1..].to_vec())))
        .collect::<Result<Vec<_>, _>>()?;
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (s, l) in per {
        scores.extend(s);
        labels.extend(l);
    }
    Ok((scores, labels))
}

/// Inductive evaluation: no parameter updates, structure rebuilt per prefix.
pub fn coda_evaluate(
    backbone: &ParamStore<f64>,
    coda: &ParamStore<f64>,
    bank: &SolutionBank,
    samples: &[Sample],
    pc: &PassConfig,
) -> Result<Metrics, TrainerError> {
    let (scores, labels) = coda_predictions(backbone, coda, bank, samples, pc)?;
    Ok(compute_metrics(&scores, &labels)?)
}

/// Backbone-only metrics over prepared samples, via the same prediction path.
pub fn backbone_evaluate(backbone: &ParamStore<f64>, samples: &[Sample]) -> Result<Metrics, MetricsError> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for s in samples {
        scores.extend(predict_from_states(backbone, &s.states, &s.seq.questions));
        labels.extend_from_slice(&s.seq.outcomes[1..]);
    }
    compute_metrics(&scores, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nav_bound_examples() {
        assert_eq!(nav_bound(&[1.0, -2.0], &[0.0, 0.0]), 0.0);
        assert!((nav_bound(&[1.0, -2.0], &[0.1, 0.1]) - 0.39).abs() < 1e-15);
    }

    #[test]
    fn zeroed_params_have_full_layout() {
        let p = zeroed_coda_params(4, 6, 2);
        assert_eq!(p.get(ADAPTOR_A).unwrap().shape, vec![2, 8]);
        assert_eq!(p.get(ADAPTOR_B).unwrap().shape, vec![2, 6]);
        assert!(p.flatten().iter().all(|&v| v == 0.0));
        let q = init_coda_params(4, 6, 2, 1);
        assert!(q.data(ADAPTOR_B).iter().all(|&v| v == 0.0));
        assert!(q.data(ADAPTOR_A).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn unfrozen_backbone_is_rejected() {
        let mut p = ParamStore::<f64>::new();
        p.insert("x", &[1], vec![0.0]).unwrap();
        assert!(matches!(check_frozen(&p), Err(TrainerError::UnfrozenBackbone(_))));
        p.freeze_all();
        assert!(check_frozen(&p).is_ok());
    }

    pub(crate) fn fixture(seed: u64) -> (ParamStore<f64>, ParamStore<f64>, SolutionBank, Vec<Sample>) {
        use crate::backbone::{init_params, BackboneConfig};
        let d = 8;
        let cfg = BackboneConfig { code_dim: d, proj_dim: d, emb_dim: 4, hidden_dim: 8, question_count: 3, concept_count: 2 };
        let mut backbone = init_params(&cfg, seed);
        backbone.freeze_all();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bank = SolutionBank::default();
        for q in 0..3 {
            for _ in 0..3 {
                bank.insert(q, (0..d).map(|_| rng.random_range(-1.0..1.0)).collect());
            }
        }
        let samples: Vec<Sample> = (0..2)
            .map(|l| {
                let base: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                let embeddings: Vec<Vec<f64>> = (0..5)
                    .map(|t| {
                        if t % 2 == 1 {
                            base.iter().map(|v| v + rng.random_range(-0.05..0.05)).collect()
                        } else {
                            (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
                        }
                    })
                    .collect();
                let seq = EncodedSequence {
                    learner: format!("l{l}"),
                    embeddings,
                    questions: vec![0, 1, 2, 1, 0],
                    concepts: vec![0, 1, 0, 1, 0],
                    outcomes: vec![0, 1, 1, 0, 1],
                };
                let states = hidden_states(&backbone, &seq);
                Sample { seq, states }
            })
            .collect();
        let mut coda = init_coda_params(d, 8, 4, seed);
        for v in &mut coda.get_mut(ADAPTOR_B).unwrap().data {
            *v = rng.random_range(-0.5..0.5);
        }
        for v in &mut coda.get_mut(ADAPTOR_A).unwrap().data {
            *v *= 5.0;
        }
        (backbone, coda, bank, samples)
    }

    #[test]
    fn total_objective_passes_gradient_check() {
        for feedback in [false, true] {
            for prefix in [false, true] {
                check_total_objective(feedback, prefix);
            }
        }
    }

    fn check_total_objective(feedback: bool, prefix: bool) {
        let (backbone, coda, bank, samples) = fixture(3);
        let backbone_dual: ParamStore<Dual<f64>> = backbone.cast();
        let tc = TuneConfig { lr: 0.05, nav_weight: 2.0, feedback, ..TuneConfig::default() };
        let batch = Batch::annotate(samples.iter().collect(), prefix, &coda, &bank, &tc.denoise).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g_prev: Vec<f64> = (0..coda.num_values()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let report = crate::numerics::grad_check(
            |theta: &ParamStore<f64>| -> Result<_, TrainerError> {
                let obj = objective(theta, &backbone, &backbone_dual, &batch, Some(&g_prev), &tc)?;
                Ok((obj.total, ParamGrads::from_flat(theta, &obj.grad_total)))
            },
            &coda,
            1e-5,
        )
        .unwrap();
        assert!(report.max_relative_error <= 1e-4, "{report:?}");
    }

    #[test]
    fn hvp_matches_gradient_differences() {
        let (backbone, coda, bank, samples) = fixture(5);
        let backbone_dual: ParamStore<Dual<f64>> = backbone.cast();
        let pc = PassConfig::default();
        let batch = Batch::annotate(samples.iter().collect(), false, &coda, &bank, &pc.denoise).unwrap();
        let n = coda.num_values();
        let v: Vec<f64> = (0..n).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.5).collect();
        let hv = batch_hvp(&coda, &backbone_dual, &batch, &pc, &v).unwrap();
        let h = 1e-6;
        let at = |sign: f64| {
            let mut p = coda.clone();
            let flat: Vec<f64> = p.flatten().iter().zip(&v).map(|(a, b)| a + sign * h * b).collect();
            p.assign_trainable(&flat);
            batch_loss(&p, &backbone, &batch, &pc).unwrap().grad.flatten()
        };
        let (up, down) = (at(1.0), at(-1.0));
        for i in 0..n {
            let fd = (up[i] - down[i]) / (2.0 * h);
            assert!((fd - hv[i]).abs() <= 1e-5 * (1.0 + fd.abs()), "entry {i}: {fd} vs {}", hv[i]);
        }
    }

    #[test]
    fn zero_correction_reproduces_backbone_bitwise() {
        let (backbone, _, bank, samples) = fixture(9);
        let zero = zeroed_coda_params(8, 8, 4);
        for feedback in [false, true] {
            let pc = PassConfig { feedback, ..PassConfig::default() };
            for s in &samples {
                let tr = inductive_trace(&backbone, &zero, &bank, s, &pc).unwrap();
                let plain = predict_from_states(&backbone, &s.states, &s.seq.questions);
                let bits = |v: &[f64]| v.iter().map(|p| p.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(&tr.predictions), bits(&plain));
            }
        }
    }

    #[test]
    fn prefix_tuning_loss_matches_inductive_predictions() {
        let (backbone, coda, bank, samples) = fixture(4);
        for feedback in [false, true] {
            let pc = PassConfig { feedback, ..PassConfig::default() };
            let batch = Batch::annotate(samples.iter().collect(), true, &coda, &bank, &pc.denoise).unwrap();
            let loss = batch_loss(&coda, &backbone, &batch, &pc).unwrap();
            let (scores, labels) = coda_predictions(&backbone, &coda, &bank, &samples, &pc).unwrap();
            let nll: f64 = scores.iter().zip(&labels).map(|(&p, &y)| if y == 1 { -p.ln() } else { -(1.0 - p).ln() }).sum();
            let nll = nll / scores.len() as f64;
            assert_eq!(loss.terms, scores.len());
            assert!((loss.pkt - nll).abs() < 1e-10, "{} vs {nll}", loss.pkt);
        }
    }
}
