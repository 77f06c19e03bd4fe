//! Noisy-signal identification: unwanted-node detection against the
//! solution bank, cluster-aware graph convolution, clustering and role
//! assignment.
//!
//! The discrete outcome ([`Annotation`]) is computed in `f64` and then held
//! fixed; [`cluster_gcn`] is the differentiable part and runs on any tape.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::SolutionBank;
use crate::graph::{build_adjacency, edge_budget, metric_matrix, CodeGraph, GraphError};
use crate::kmeans::{kmeans, ClusterCount};
use crate::numerics::{cast_slice, cosine, hadamard, mean, median, ParamStore, Scalar, Tape, Var};

pub const METRIC_W: &str = "coda.w";
pub const GCN_W: &str = "gcn.w_a";
pub const ATT_WC: &str = "att.w_c";
pub const ATT_SELF: &str = "att.w_self";
pub const ATT_CTX: &str = "att.w_ctx";
pub const ATT_NB: &str = "att.w_nb";
pub const ATT_B1: &str = "att.b1";
pub const ATT_W2: &str = "att.w2";
pub const ATT_B2: &str = "att.b2";

#[derive(Debug, Error, PartialEq)]
pub enum DenoiseError {
    #[error("node for step {0} has no neighbours in a multi-node graph")]
    IsolatedNode(usize),
    #[error("{embeddings} embeddings for {questions} questions")]
    Length { embeddings: usize, questions: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Numerics(#[from] crate::numerics::NumericsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "role", rename_all = "lowercase")]
pub enum Role {
    Unwanted,
    Core {
        cluster: usize,
    },
    /// `core_step` is 1-based.
    Weak {
        cluster: usize,
        core_step: usize,
    },
}

impl Role {
    pub fn name(&self) -> &'static str {
        match self {
            Role::Unwanted => "unwanted",
            Role::Core { .. } => "core",
            Role::Weak { .. } => "weak",
        }
    }

    pub fn cluster(&self) -> Option<usize> {
        match *self {
            Role::Unwanted => None,
            Role::Core { cluster } | Role::Weak { cluster, .. } => Some(cluster),
        }
    }

    pub fn is_weak(&self) -> bool {
        matches!(self, Role::Weak { .. })
    }

    pub fn is_unwanted(&self) -> bool {
        matches!(self, Role::Unwanted)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiseConfig {
    /// Fraction of node pairs kept as edges.
    pub sparsity: f64,
    pub layers: usize,
    pub hops: usize,
    pub clusters: ClusterCount,
    pub seed: u64,
    /// When false no node is ever judged unwanted.
    pub detect_unwanted: bool,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        Self { sparsity: 0.2, layers: 2, hops: 2, clusters: ClusterCount::PerNode(0.6), seed: 17, detect_unwanted: true }
    }
}

/// Discrete outcome of the identification stage for one learner prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    /// One role per step.
    pub roles: Vec<Role>,
    /// Graph over kept nodes after relinking; node labels are 1-based steps.
    pub graph: CodeGraph,
    /// 0-based step indices of kept (non-unwanted) nodes, ascending.
    pub kept: Vec<usize>,
    pub unwanted: Vec<usize>,
    /// Post-convolution embeddings per step (unwanted steps use the empty aggregate).
    pub refined: Vec<Vec<f64>>,
    /// Edge count before unwanted removal and relinking.
    pub raw_edges: usize,
}

/// The skew test: unwanted iff the mean similarity to accepted solutions is
/// below the median. Fewer than two samples cannot be judged and count as related.
pub fn is_unwanted_scores(scores: &[f64]) -> bool {
    match median(scores) {
        Some(med) if scores.len() >= 2 => mean(scores) < med,
        _ => false,
    }
}

/// Flags isolated, question-unrelated nodes, reattaches every other isolated
/// node by one edge and returns `(unwanted, kept, graph over kept)`.
pub fn identify_unwanted(
    g: &CodeGraph,
    embeddings: &[Vec<f64>],
    questions: &[usize],
    metric: &[Vec<f64>],
    bank: &SolutionBank,
    w: &[f64],
    detect: bool,
) -> (Vec<usize>, Vec<usize>, CodeGraph) {
    let n = g.n();
    let isolated = g.isolated();
    let mut unwanted = vec![false; n];
    if detect {
        for &i in &isolated {
            let xi = hadamard(w, &embeddings[i]);
            let scores: Vec<f64> = bank.get(questions[i]).iter().map(|s| cosine(&xi, &hadamard(w, s))).collect();
            unwanted[i] = is_unwanted_scores(&scores);
        }
    }
    let mut linked = g.clone();
    let connected: Vec<usize> = (0..n).filter(|&j| g.degree(j) > 0).collect();
    let related_isolated: Vec<usize> = isolated.iter().copied().filter(|&i| !unwanted[i]).collect();
    for &i in &related_isolated {
        let pool: Vec<usize> =
            if connected.is_empty() { related_isolated.iter().copied().filter(|&j| j != i).collect() } else { connected.clone() };
        // ascending scan with strict improvement breaks ties toward the earlier step
        let mut best: Option<usize> = None;
        for &j in &pool {
            if best.is_none_or(|b| metric[i][j] > metric[i][b]) {
                best = Some(j);
            }
        }
        if let Some(j) = best {
            linked.add_edge(i, j);
        }
    }
    let kept: Vec<usize> = (0..n).filter(|&i| !unwanted[i]).collect();
    let removed: Vec<usize> = (0..n).filter(|&i| unwanted[i]).collect();
    let graph = linked.induced(&kept);
    (removed, kept, graph)
}

/// Denoising slots bound on a tape.
#[derive(Debug, Clone, Copy)]
pub struct DenoiseVars {
    pub w: Var,
    pub w_a: Var,
    pub w_c: Var,
    pub w_self: Var,
    pub w_ctx: Var,
    pub w_nb: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl DenoiseVars {
    pub fn pick<T: Scalar>(store: &ParamStore<T>, vars: &[Var]) -> Self {
        let v = |name: &str| vars[store.position(name).unwrap_or_else(|| panic!("missing slot {name}"))];
        Self {
            w: v(METRIC_W),
            w_a: v(GCN_W),
            w_c: v(ATT_WC),
            w_self: v(ATT_SELF),
            w_ctx: v(ATT_CTX),
            w_nb: v(ATT_NB),
            b1: v(ATT_B1),
            w2: v(ATT_W2),
            b2: v(ATT_B2),
        }
    }
}

/// Output for a node with nothing to aggregate: `σ(0) + x`.
pub fn empty_aggregate<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Var {
    tape.affine(x, T::one(), T::lit(0.5))
}

/// Cluster-aware convolution over `graph`, whose node `i` has raw embedding `xs[i]`.
///
/// `x⁽⁰⁾ = W ⊙ x`, `x⁽ˡ⁾_i = σ(W_a · mean_{j ∈ N(i)} α_ij x⁽ˡ⁻¹⁾_j)`, output
/// `x⁽ᴸ⁾ + x`. Attention `α_ij` reads `W_c ⊙ x_i`, `W_c ⊙` (mean of the
/// `hops`-hop set including `i`) and `W_c ⊙ x_j`, and is shared across layers.
/// A single-node graph takes the empty aggregate; any other degree-0 node is an error.
pub fn cluster_gcn<T: Scalar>(
    tape: &mut Tape<T>,
    dv: &DenoiseVars,
    xs: &[Var],
    graph: &CodeGraph,
    layers: usize,
    hops: usize,
) -> Result<Vec<Var>, DenoiseError> {
    let n = graph.n();
    if n == 1 {
        return Ok(vec![empty_aggregate(tape, xs[0])]);
    }
    if let Some(i) = (0..n).find(|&i| graph.degree(i) == 0) {
        return Err(DenoiseError::IsolatedNode(graph.step(i)));
    }
    let neighbors: Vec<Vec<usize>> = (0..n).map(|i| graph.neighbors(i)).collect();
    let cw: Vec<Var> = xs.iter().map(|&x| tape.mul(dv.w_c, x)).collect();
    let mut self_term = Vec::with_capacity(n);
    let mut nb_term = Vec::with_capacity(n);
    for i in 0..n {
        let mut ctx: Vec<Var> = vec![xs[i]];
        ctx.extend(graph.k_hop(i, hops).into_iter().map(|j| xs[j]));
        let ctx_mean = tape.mean(&ctx);
        let ctx_w = tape.mul(dv.w_c, ctx_mean);
        let s = tape.matvec(dv.w_self, cw[i]);
        let c = tape.matvec(dv.w_ctx, ctx_w);
        let sc = tape.add(s, c);
        self_term.push(tape.add(sc, dv.b1));
        nb_term.push(tape.matvec(dv.w_nb, cw[i]));
    }
    let alpha: Vec<Vec<Var>> = (0..n)
        .map(|i| {
            neighbors[i]
                .iter()
                .map(|&j| {
                    let pre = tape.add(self_term[i], nb_term[j]);
                    let hidden = tape.tanh(pre);
                    let o = tape.dot(dv.w2, hidden);
                    let o = tape.add(o, dv.b2);
                    tape.sigmoid(o)
                })
                .collect()
        })
        .collect();
    let mut h: Vec<Var> = xs.iter().map(|&x| tape.mul(dv.w, x)).collect();
    for _ in 0..layers {
        h = (0..n)
            .map(|i| {
                let msgs: Vec<Var> = neighbors[i].iter().zip(&alpha[i]).map(|(&j, &a)| tape.scale_by(h[j], a)).collect();
                let agg = tape.mean(&msgs);
                let z = tape.matvec(dv.w_a, agg);
                tape.sigmoid(z)
            })
            .collect();
    }
    Ok(h.into_iter().zip(xs).map(|(hl, &x)| tape.add(hl, x)).collect())
}

/// Per-step refined embeddings on a tape: kept nodes through [`cluster_gcn`],
/// unwanted nodes through [`empty_aggregate`].
pub fn refine_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    dv: &DenoiseVars,
    xs: &[Var],
    ann: &Annotation,
    cfg: &DenoiseConfig,
) -> Result<Vec<Var>, DenoiseError> {
    let kept_x: Vec<Var> = ann.kept.iter().map(|&i| xs[i]).collect();
    let kept_out = if kept_x.is_empty() { Vec::new() } else { cluster_gcn(tape, dv, &kept_x, &ann.graph, cfg.layers, cfg.hops)? };
    let mut out: Vec<Option<Var>> = vec![None; xs.len()];
    for (&i, v) in ann.kept.iter().zip(kept_out) {
        out[i] = Some(v);
    }
    for &i in &ann.unwanted {
        out[i] = Some(empty_aggregate(tape, xs[i]));
    }
    Ok(out.into_iter().map(|v| v.expect("every step is kept or unwanted")).collect())
}

/// Full identification pipeline for one learner (or prefix): graph, unwanted
/// detection and relinking, convolution, global k-means and role assignment.
pub fn annotate(
    embeddings: &[Vec<f64>],
    questions: &[usize],
    bank: &SolutionBank,
    params: &ParamStore<f64>,
    cfg: &DenoiseConfig,
) -> Result<Annotation, DenoiseError> {
    let n = embeddings.len();
    if questions.len() != n {
        return Err(DenoiseError::Length { embeddings: n, questions: questions.len() });
    }
    let w = params.get(METRIC_W)?.data.clone();
    let metric = metric_matrix(embeddings, &w);
    let steps: Vec<usize> = (1..=n).collect();
    let g = build_adjacency(&metric, edge_budget(cfg.sparsity, n), steps)?;
    let raw_edges = g.edge_count();
    let (unwanted, kept, graph) = identify_unwanted(&g, embeddings, questions, &metric, bank, &w, cfg.detect_unwanted);

    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let dv = DenoiseVars::pick(params, &vars);
    let xs: Vec<Var> = embeddings.iter().map(|x| tape.leaf(cast_slice(x))).collect();
    let mut ann = Annotation { roles: vec![Role::Unwanted; n], graph, kept, unwanted, refined: Vec::new(), raw_edges };
    let refined_vars = refine_on_tape(&mut tape, &dv, &xs, &ann, cfg)?;
    ann.refined = refined_vars.iter().map(|&v| tape.value(v).to_vec()).collect();

    let points: Vec<Vec<f64>> = ann.kept.iter().map(|&i| ann.refined[i].clone()).collect();
    let k = cfg.clusters.resolve(points.len());
    let assignment = kmeans(&points, k, cfg.seed).assignments;
    // clusters renumbered by their earliest step; kept is ascending so the first hit is the core
    let mut core_of: Vec<Option<(usize, usize)>> = vec![None; k.max(1)];
    let mut next_id = 0;
    for (pos, &i) in ann.kept.iter().enumerate() {
        let c = assignment[pos];
        ann.roles[i] = match core_of[c] {
            None => {
                core_of[c] = Some((next_id, i + 1));
                next_id += 1;
                Role::Core { cluster: next_id - 1 }
            }
            Some((cluster, core_step)) => Role::Weak { cluster, core_step },
        };
    }
    Ok(ann)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::numerics::sigmoid;

    /// Denoising slots with hand-chosen values, dimension `d`.
    pub(crate) fn params(d: usize) -> ParamStore<f64> {
        let mut p = ParamStore::new();
        let eye: Vec<f64> = (0..d * d).map(|i| if i % (d + 1) == 0 { 1.0 } else { 0.0 }).collect();
        p.insert(METRIC_W, &[d], vec![1.0; d]).unwrap();
        p.insert(GCN_W, &[d, d], eye.clone()).unwrap();
        p.insert(ATT_WC, &[d], vec![1.0; d]).unwrap();
        p.insert(ATT_SELF, &[d, d], eye.iter().map(|v| v * 0.5).collect()).unwrap();
        p.insert(ATT_CTX, &[d, d], eye.iter().map(|v| v * -0.25).collect()).unwrap();
        p.insert(ATT_NB, &[d, d], eye.clone()).unwrap();
        p.insert(ATT_B1, &[d], vec![0.1; d]).unwrap();
        p.insert(ATT_W2, &[d], (0..d).map(|i| 0.3 - 0.1 * i as f64).collect()).unwrap();
        p.insert(ATT_B2, &[1], vec![-0.2]).unwrap();
        p
    }

    #[test]
    fn skew_rule_examples() {
        assert!(!is_unwanted_scores(&[0.1, 0.2, 0.9]));
        assert!(is_unwanted_scores(&[0.1, 0.8, 0.9]));
        assert!(!is_unwanted_scores(&[0.3]));
        assert!(!is_unwanted_scores(&[]));
    }

    #[test]
    fn gcn_matches_straight_line_oracle_on_path() {
        let d = 2;
        let p = params(d);
        let x = [vec![1.0, 0.0], vec![0.5, 0.5], vec![0.0, 1.0]];
        let mut g = CodeGraph::empty(vec![1, 2, 3]);
        g.add_edge(0, 1);
        g.add_edge(1, 2);
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape);
        let dv = DenoiseVars::pick(&p, &vars);
        let xs: Vec<Var> = x.iter().map(|v| tape.leaf(v.clone())).collect();
        let out = cluster_gcn(&mut tape, &dv, &xs, &g, 1, 2).unwrap();

        // identity W, W_c, W_a, W_nb; W_self = 0.5 I; W_ctx = -0.25 I
        let mean3: Vec<f64> = (0..d).map(|k| x.iter().map(|v| v[k]).sum::<f64>() / 3.0).collect();
        let w2 = [0.3, 0.2];
        let alpha = |i: usize, j: usize| {
            let o: f64 = (0..d).map(|k| w2[k] * (0.5 * x[i][k] - 0.25 * mean3[k] + 0.1 + x[j][k]).tanh()).sum();
            sigmoid(o - 0.2)
        };
        let nbrs = [vec![1], vec![0, 2], vec![1]];
        for i in 0..3 {
            for k in 0..d {
                let agg: f64 = nbrs[i].iter().map(|&j| alpha(i, j) * x[j][k]).sum::<f64>() / nbrs[i].len() as f64;
                let expect = sigmoid(agg) + x[i][k];
                assert!((tape.value(out[i])[k] - expect).abs() < 1e-14, "node {i} dim {k}");
            }
        }
    }

    #[test]
    fn constant_neighbours_aggregate_independent_of_degree() {
        let d = 2;
        let mut p = params(d);
        // zero attention weights: α = σ(0) everywhere
        p.insert(ATT_W2, &[d], vec![0.0; d]).unwrap();
        p.insert(ATT_B2, &[1], vec![0.0]).unwrap();
        let v = vec![0.3, -0.7];
        let mut g = CodeGraph::empty(vec![1, 2, 3, 4]);
        for j in 1..4 {
            g.add_edge(0, j);
        }
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape);
        let dv = DenoiseVars::pick(&p, &vars);
        let xs: Vec<Var> = (0..4).map(|_| tape.leaf(v.clone())).collect();
        let out = cluster_gcn(&mut tape, &dv, &xs, &g, 1, 1).unwrap();
        for k in 0..d {
            let expect = sigmoid(0.5 * v[k]) + v[k];
            assert!((tape.value(out[0])[k] - expect).abs() < 1e-15);
            assert!((tape.value(out[1])[k] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn isolated_node_is_a_contract_violation() {
        let p = params(2);
        let mut g = CodeGraph::empty(vec![1, 2, 3]);
        g.add_edge(0, 1);
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape);
        let dv = DenoiseVars::pick(&p, &vars);
        let xs: Vec<Var> = (0..3).map(|_| tape.leaf(vec![1.0, 0.0])).collect();
        assert_eq!(cluster_gcn(&mut tape, &dv, &xs, &g, 1, 1), Err(DenoiseError::IsolatedNode(3)));
    }

    fn bank(entries: &[(usize, Vec<f64>)]) -> SolutionBank {
        let mut b = SolutionBank::default();
        for (q, e) in entries {
            b.insert(*q, e.clone());
        }
        b
    }

    #[test]
    fn relinking_targets_most_similar_connected_node() {
        // nodes 0,1 connected; node 2 isolated but related
        let x = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.9, 0.1]];
        let metric = metric_matrix(&x, &[1.0, 1.0]);
        let mut g = CodeGraph::empty(vec![1, 2, 3]);
        g.add_edge(0, 1);
        let (unwanted, kept, linked) = identify_unwanted(&g, &x, &[0, 0, 0], &metric, &SolutionBank::default(), &[1.0, 1.0], true);
        assert!(unwanted.is_empty());
        assert_eq!(kept, vec![0, 1, 2]);
        assert!(linked.has_edge(2, 0) && !linked.has_edge(2, 1));
        assert!(linked.isolated().is_empty());
    }

    #[test]
    fn unwanted_nodes_are_removed() {
        let x = vec![vec![1.0, 0.0], vec![0.95, 0.05], vec![-1.0, 0.2]];
        let metric = metric_matrix(&x, &[1.0, 1.0]);
        let mut g = CodeGraph::empty(vec![1, 2, 3]);
        g.add_edge(0, 1);
        // similarities of node 2 to the bank for question 5: skewed high-median
        let b = bank(&[(5, vec![1.0, 0.0]), (5, vec![-1.0, 0.25]), (5, vec![-1.0, 0.15])]);
        let (unwanted, kept, linked) = identify_unwanted(&g, &x, &[0, 0, 5], &metric, &b, &[1.0, 1.0], true);
        assert_eq!(unwanted, vec![2]);
        assert_eq!(kept, vec![0, 1]);
        assert_eq!(linked.steps(), &[1, 2]);
        let (none, _, _) = identify_unwanted(&g, &x, &[0, 0, 5], &metric, &b, &[1.0, 1.0], false);
        assert!(none.is_empty());
    }

    #[test]
    fn identical_codes_yield_single_core_at_step_one() {
        let d = 3;
        let p = params(d);
        let x = vec![vec![0.2, 0.5, -0.1]; 6];
        let cfg = DenoiseConfig { clusters: ClusterCount::Fixed(3), ..DenoiseConfig::default() };
        let ann = annotate(&x, &[1; 6], &SolutionBank::default(), &p, &cfg).unwrap();
        assert_eq!(ann.roles[0], Role::Core { cluster: 0 });
        assert!(ann.unwanted.is_empty());
        for r in &ann.roles {
            assert!(!r.is_unwanted());
        }
        assert_eq!(ann.roles.iter().filter(|r| matches!(r, Role::Core { .. })).count(), 1, "{:?}", ann.roles);
    }

    #[test]
    fn roles_satisfy_cluster_invariants() {
        let d = 3;
        let p = params(d);
        let x: Vec<Vec<f64>> = (0..12).map(|i| vec![(i % 4) as f64, ((i * 7) % 5) as f64 - 2.0, 1.0]).collect();
        let ann = annotate(&x, &[0; 12], &SolutionBank::default(), &p, &DenoiseConfig::default()).unwrap();
        assert_eq!(ann, annotate(&x, &[0; 12], &SolutionBank::default(), &p, &DenoiseConfig::default()).unwrap());
        for (t, r) in ann.roles.iter().enumerate() {
            if let Role::Weak { cluster, core_step } = *r {
                assert!(core_step < t + 1);
                assert_eq!(ann.roles[core_step - 1], Role::Core { cluster });
            }
        }
        assert!(ann.graph.isolated().is_empty());
    }
}
