//! Reference knowledge-tracing backbone: a code projection, a gated
//! recurrent knowledge estimator and a logistic next-step predictor.
//!
//! Every forward pass runs on a [`Tape`], so training, gradient checks and
//! plain inference share one code path and produce identical values.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::EncodedSequence;
use crate::metrics::{compute_metrics, Metrics, MetricsError};
use crate::numerics::{cast_slice, Adam, AdamConfig, ParamGrads, ParamStore, Scalar, Tape, Var};

pub const CE_W: &str = "ce.w";
pub const CE_B: &str = "ce.b";
pub const EMB_QUESTION: &str = "emb.question";
pub const EMB_CONCEPT: &str = "emb.concept";
pub const PRED_W: &str = "pred.w";
pub const PRED_B: &str = "pred.b";
const GATES: [&str; 3] = ["z", "r", "n"];

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error("training split has no sequence with a next step")]
    EmptyTrain,
    #[error("non-finite training loss at epoch {0}")]
    Diverged(usize),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Numerics(#[from] crate::numerics::NumericsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub code_dim: usize,
    pub proj_dim: usize,
    pub emb_dim: usize,
    pub hidden_dim: usize,
    pub question_count: usize,
    pub concept_count: usize,
}

impl BackboneConfig {
    /// Projection keeps the code dimension; hidden size is `max(K, 32)`.
    pub fn for_data(code_dim: usize, question_count: usize, concept_count: usize) -> Self {
        Self { code_dim, proj_dim: code_dim, emb_dim: 16, hidden_dim: concept_count.max(32), question_count, concept_count }
    }

    /// Length of `[x ‖ question ‖ concept ‖ onehot(r)]`.
    pub fn input_dim(&self) -> usize {
        self.proj_dim + 2 * self.emb_dim + 2
    }
}

/// Xavier-uniform weights, zero biases.
pub fn init_params(cfg: &BackboneConfig, seed: u64) -> ParamStore<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamStore::new();
    let mut xavier = |p: &mut ParamStore<f64>, name: &str, rows: usize, cols: usize| {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect();
        p.insert(name, &[rows, cols], data).expect("xavier shape");
    };
    let (d_h, d_u) = (cfg.hidden_dim, cfg.input_dim());
    xavier(&mut p, CE_W, cfg.proj_dim, cfg.code_dim);
    p.zeros(CE_B, &[cfg.proj_dim]);
    xavier(&mut p, EMB_QUESTION, cfg.question_count, cfg.emb_dim);
    xavier(&mut p, EMB_CONCEPT, cfg.concept_count, cfg.emb_dim);
    for g in GATES {
        xavier(&mut p, &format!("ke.w_{g}"), d_h, d_u);
        xavier(&mut p, &format!("ke.u_{g}"), d_h, d_h);
        p.zeros(&format!("ke.b_{g}"), &[d_h]);
    }
    xavier(&mut p, PRED_W, d_h + cfg.emb_dim, 1);
    p.get_mut(PRED_W).expect("pred.w").shape = vec![d_h + cfg.emb_dim];
    p.zeros(PRED_B, &[1]);
    p
}

#[derive(Debug, Clone, Copy)]
struct Gate {
    w: Var,
    u: Var,
    b: Var,
}

/// Backbone slots bound as leaves on one tape.
#[derive(Debug, Clone)]
pub struct BackboneVars {
    pub all: Vec<Var>,
    ce_w: Var,
    ce_b: Var,
    emb_q: Var,
    emb_c: Var,
    gates: [Gate; 3],
    pred_w: Var,
    pred_b: Var,
}

impl BackboneVars {
    pub fn bind<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>) -> Self {
        let all = store.bind(tape);
        let v = |name: &str| all[store.position(name).unwrap_or_else(|| panic!("missing backbone slot {name}"))];
        let gate = |g: &str| Gate { w: v(&format!("ke.w_{g}")), u: v(&format!("ke.u_{g}")), b: v(&format!("ke.b_{g}")) };
        Self {
            ce_w: v(CE_W),
            ce_b: v(CE_B),
            emb_q: v(EMB_QUESTION),
            emb_c: v(EMB_CONCEPT),
            gates: [gate("z"), gate("r"), gate("n")],
            pred_w: v(PRED_W),
            pred_b: v(PRED_B),
            all,
        }
    }

    /// Affine projection of a code embedding.
    pub fn ce<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Var {
        let wx = tape.matvec(self.ce_w, x);
        tape.add(wx, self.ce_b)
    }

    /// One gated recurrent update from `h_prev`.
    pub fn ke<T: Scalar>(&self, tape: &mut Tape<T>, h_prev: Var, q: usize, c: usize, x_in: Var, r: u8) -> Var {
        let eq = tape.row(self.emb_q, q);
        let ec = tape.row(self.emb_c, c);
        let onehot = tape.leaf(if r == 1 { vec![T::zero(), T::one()] } else { vec![T::one(), T::zero()] });
        let u = tape.concat(&[x_in, eq, ec, onehot]);
        let pre = |tape: &mut Tape<T>, g: Gate, h: Var| {
            let a = tape.matvec(g.w, u);
            let b = tape.matvec(g.u, h);
            let s = tape.add(a, b);
            tape.add(s, g.b)
        };
        let [gz, gr, gn] = self.gates;
        let z_pre = pre(tape, gz, h_prev);
        let z = tape.sigmoid(z_pre);
        let r_pre = pre(tape, gr, h_prev);
        let r = tape.sigmoid(r_pre);
        let rh = tape.mul(r, h_prev);
        let n_pre = pre(tape, gn, rh);
        let n = tape.tanh(n_pre);
        let keep = tape.mul(z, h_prev);
        let one_minus_z = tape.one_minus(z);
        let write = tape.mul(one_minus_z, n);
        tape.add(keep, write)
    }

    /// Logit of answering `q_next` correctly from state `h`.
    pub fn logit<T: Scalar>(&self, tape: &mut Tape<T>, h: Var, q_next: usize) -> Var {
        let eq = tape.row(self.emb_q, q_next);
        let input = tape.concat(&[h, eq]);
        let s = tape.dot(self.pred_w, input);
        tape.add(s, self.pred_b)
    }

    /// States `h_1..h_T` starting from `h_0 = 0`.
    pub fn unroll<T: Scalar>(&self, tape: &mut Tape<T>, seq: &EncodedSequence, hidden_dim: usize) -> Vec<Var> {
        let mut h = tape.leaf(vec![T::zero(); hidden_dim]);
        let mut states = Vec::with_capacity(seq.len());
        for t in 0..seq.len() {
            let x = tape.leaf(cast_slice(&seq.embeddings[t]));
            let x_in = self.ce(tape, x);
            h = self.ke(tape, h, seq.questions[t], seq.concepts[t], x_in, seq.outcomes[t]);
            states.push(h);
        }
        states
    }
}

fn hidden_dim<T: Scalar>(store: &ParamStore<T>) -> usize {
    store.get("ke.b_z").expect("ke.b_z").data.len()
}

/// Sum over `t = 1..T−1` of the cross-entropy of step `t+1` predicted from `h_t`,
/// with its gradient. `None` when the sequence has no next step.
pub fn sequence_loss<T: Scalar>(store: &ParamStore<T>, seq: &EncodedSequence) -> Option<(T, ParamGrads<T>, usize)> {
    if seq.len() < 2 {
        return None;
    }
    let mut tape = Tape::new();
    let vars = BackboneVars::bind(&mut tape, store);
    let states = vars.unroll(&mut tape, seq, hidden_dim(store));
    let terms: Vec<Var> = (0..seq.len() - 1)
        .map(|t| {
            let z = vars.logit(&mut tape, states[t], seq.questions[t + 1]);
            tape.bce_with_logit(z, T::lit(seq.outcomes[t + 1] as f64))
        })
        .collect();
    let total = tape.add_all(&terms)?;
    let grads = tape.backward(total);
    Some((tape.scalar(total), store.collect(&vars.all, &grads), terms.len()))
}

/// Knowledge states `h_1..h_T`.
pub fn hidden_states(store: &ParamStore<f64>, seq: &EncodedSequence) -> Vec<Vec<f64>> {
    let mut tape = Tape::new();
    let vars = BackboneVars::bind(&mut tape, store);
    let states = vars.unroll(&mut tape, seq, hidden_dim(store));
    states.iter().map(|&h| tape.value(h).to_vec()).collect()
}

/// Next-step probabilities from given states: entry `t` predicts step `t+2`
/// (1-based) from `states[t]`.
pub fn predict_from_states(store: &ParamStore<f64>, states: &[Vec<f64>], questions: &[usize]) -> Vec<f64> {
    let mut tape = Tape::new();
    let vars = BackboneVars::bind(&mut tape, store);
    (0..states.len().min(questions.len()).saturating_sub(1))
        .map(|t| {
            let h = tape.leaf(states[t].clone());
            let z = vars.logit(&mut tape, h, questions[t + 1]);
            let p = tape.sigmoid(z);
            tape.scalar(p)
        })
        .collect()
}

pub fn predict_probability(store: &ParamStore<f64>, h: &[f64], q_next: usize) -> f64 {
    predict_from_states(store, &[h.to_vec(), Vec::new()], &[0, q_next])[0]
}

/// Pooled scores and labels for steps `2..T` of every learner.
pub fn predictions(store: &ParamStore<f64>, seqs: &[EncodedSequence]) -> (Vec<f64>, Vec<u8>) {
    let per: Vec<(Vec<f64>, Vec<u8>)> = seqs
        .par_iter()
        .map(|s| {
            let states = hidden_states(store, s);
            (predict_from_states(store, &states, &s.questions), s.outcomes.iter().skip(1).copied().collect())
        })
        .collect();
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (s, l) in per {
        scores.extend(s);
        labels.extend(l);
    }
    (scores, labels)
}

pub fn evaluate(store: &ParamStore<f64>, seqs: &[EncodedSequence]) -> Result<Metrics, MetricsError> {
    let (scores, labels) = predictions(store, seqs);
    compute_metrics(&scores, &labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 40, lr: 1e-2, batch_size: 32, patience: 10, seed: 7 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean cross-entropy per predicted step, per epoch.
    pub train_loss: Vec<f64>,
    pub valid_auc: Vec<f64>,
    pub best_epoch: usize,
    pub best_valid_auc: f64,
}

/// Mini-batch Adam on the summed next-step cross-entropy, normalized by the
/// number of predicted steps in the batch. Returns the best-validation-AUC parameters.
pub fn train_backbone(
    cfg: &BackboneConfig,
    train: &[EncodedSequence],
    valid: &[EncodedSequence],
    tc: &TrainConfig,
) -> Result<(ParamStore<f64>, TrainLog), BackboneError> {
    let usable: Vec<&EncodedSequence> = train.iter().filter(|s| s.len() >= 2).collect();
    if usable.is_empty() {
        return Err(BackboneError::EmptyTrain);
    }
    let mut params = init_params(cfg, tc.seed);
    let mut opt = Adam::new(AdamConfig::with_lr(tc.lr), &params);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x5eed);
    let mut log = TrainLog::default();
    let mut best = params.clone();
    let mut since_best = 0;
    log.best_valid_auc = f64::NEG_INFINITY;
    let mut order: Vec<usize> = (0..usable.len()).collect();
    for epoch in 0..tc.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut term_sum) = (0.0, 0usize);
        for batch in order.chunks(tc.batch_size.max(1)) {
            let parts: Vec<(f64, ParamGrads<f64>, usize)> = batch.par_iter().filter_map(|&i| sequence_loss(&params, usable[i])).collect();
            let mut grads = ParamGrads::zeros_like(&params);
            let mut terms = 0;
            for (l, g, n) in &parts {
                loss_sum += l;
                terms += n;
                grads.add_assign(g);
            }
            term_sum += terms;
            grads.scale(1.0 / terms as f64);
            opt.step(&mut params, &grads);
        }
        let mean_loss = loss_sum / term_sum as f64;
        if !mean_loss.is_finite() || !params.all_finite() {
            return Err(BackboneError::Diverged(epoch));
        }
        log.train_loss.push(mean_loss);
        let auc = evaluate(&params, valid)?.auc;
        log.valid_auc.push(auc);
        if auc > log.best_valid_auc {
            log.best_valid_auc = auc;
            log.best_epoch = epoch;
            best = params.clone();
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
