//! Role prompts, the low-rank state correction and the noise-feature losses.

use crate::denoise::Role;
use crate::numerics::{hadamard, ParamStore, Scalar, Tape, Var};

pub const PROMPT_W: &str = "prompt.w_p";
pub const ADAPTOR_A: &str = "adaptor.w_a";
pub const ADAPTOR_B: &str = "adaptor.w_b";

/// Adaptor slots bound on a tape.
#[derive(Debug, Clone, Copy)]
pub struct AdaptorVars {
    pub w_p: Var,
    /// `[b, 2d']`
    pub w_a: Var,
    /// `[b, d_h]`
    pub w_b: Var,
}

impl AdaptorVars {
    pub fn pick<T: Scalar>(store: &ParamStore<T>, vars: &[Var]) -> Self {
        let v = |name: &str| vars[store.position(name).unwrap_or_else(|| panic!("missing slot {name}"))];
        Self { w_p: v(PROMPT_W), w_a: v(ADAPTOR_A), w_b: v(ADAPTOR_B) }
    }
}

/// Core `[w⊙x ‖ 0]`, weak `[0 ‖ w⊙x]`, unwanted `[w⊙x ‖ w⊙x]`.
pub fn build_prompt<T: Scalar>(tape: &mut Tape<T>, role: &Role, refined: Var, w_p: Var) -> Var {
    let wx = tape.mul(w_p, refined);
    let zeros = tape.leaf(vec![T::zero(); tape.value(wx).len()]);
    match role {
        Role::Core { .. } => tape.concat(&[wx, zeros]),
        Role::Weak { .. } => tape.concat(&[zeros, wx]),
        Role::Unwanted => tape.concat(&[wx, wx]),
    }
}

/// Plain-value form of [`build_prompt`].
pub fn prompt_values<T: Scalar>(role: &Role, refined: &[T], w_p: &[T]) -> Vec<T> {
    let wx = hadamard(w_p, refined);
    let zeros = vec![T::zero(); wx.len()];
    match role {
        Role::Core { .. } => [wx, zeros].concat(),
        Role::Weak { .. } => [zeros, wx].concat(),
        Role::Unwanted => [wx.clone(), wx].concat(),
    }
}

/// `h + W_Bᵀ (W_A p)`.
pub fn correct_state<T: Scalar>(tape: &mut Tape<T>, h: Var, prompt: Var, av: &AdaptorVars) -> Var {
    let low = tape.matvec(av.w_a, prompt);
    let delta = tape.mat_t_vec(av.w_b, low);
    tape.add(h, delta)
}

/// Step whose corrected state anchors step `t` (both 0-based): the cluster
/// core for a weak step, the latest earlier non-unwanted step for an unwanted one.
pub fn reference_step(roles: &[Role], t: usize) -> Option<usize> {
    match roles[t] {
        Role::Core { .. } => None,
        Role::Weak { core_step, .. } => Some(core_step - 1),
        Role::Unwanted => (0..t).rev().find(|&s| !roles[s].is_unwanted()),
    }
}

/// Which noise-feature terms contribute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossSwitches {
    pub weak: bool,
    pub unwanted: bool,
}

impl Default for LossSwitches {
    fn default() -> Self {
        Self { weak: true, unwanted: true }
    }
}

/// `KL(softmax(h'_t) ‖ softmax(h'_ref))` for each step `t < steps` that has a
/// reference. Core steps contribute nothing.
pub fn adaptor_terms<T: Scalar>(tape: &mut Tape<T>, corrected: &[Var], roles: &[Role], steps: usize, switches: LossSwitches) -> Vec<Var> {
    let mut terms = Vec::new();
    for t in 0..steps.min(roles.len()) {
        let enabled = match roles[t] {
            Role::Core { .. } => false,
            Role::Weak { .. } => switches.weak,
            Role::Unwanted => switches.unwanted,
        };
        if !enabled {
            continue;
        }
        if let Some(r) = reference_step(roles, t) {
            let p = tape.softmax(corrected[t]);
            let q = tape.softmax(corrected[r]);
            terms.push(tape.kl(p, q));
        }
    }
    terms
}
