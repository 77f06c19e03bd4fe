//! Per-learner code graphs: weighted-cosine metric, rank-threshold
//! adjacency, components and k-hop neighbourhoods.

use std::collections::VecDeque;
use std::io::Write;

use thiserror::Error;

use crate::numerics::{cosine, hadamard, Scalar};

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("edge budget must be at least 1")]
    ZeroBudget,
    #[error("metric matrix is not square ({rows} rows, row {row} has {cols} columns)")]
    NotSquare { rows: usize, row: usize, cols: usize },
    #[error("node/step map has {steps} entries for {nodes} nodes")]
    StepMap { nodes: usize, steps: usize },
}

/// Symmetric, loop-free, unweighted graph whose nodes carry a step index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeGraph {
    n: usize,
    adj: Vec<bool>,
    steps: Vec<usize>,
}

impl CodeGraph {
    pub fn empty(steps: Vec<usize>) -> Self {
        let n = steps.len();
        Self { n, adj: vec![false; n * n], steps }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Step index (1-based, within the learner sequence) of node `i`.
    pub fn step(&self, i: usize) -> usize {
        self.steps[i]
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adj[i * self.n + j]
    }

    pub fn add_edge(&mut self, i: usize, j: usize) {
        if i != j {
            self.adj[i * self.n + j] = true;
            self.adj[j * self.n + i] = true;
        }
    }

    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        (0..self.n).filter(|&j| self.has_edge(i, j)).collect()
    }

    pub fn degree(&self, i: usize) -> usize {
        (0..self.n).filter(|&j| self.has_edge(i, j)).count()
    }

    /// Degree-0 nodes in ascending order.
    pub fn isolated(&self) -> Vec<usize> {
        (0..self.n).filter(|&i| self.degree(i) == 0).collect()
    }

    /// Undirected edges, each counted once.
    pub fn edge_count(&self) -> usize {
        (0..self.n).map(|i| (i + 1..self.n).filter(|&j| self.has_edge(i, j)).count()).sum()
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.n {
            for j in i + 1..self.n {
                if self.has_edge(i, j) {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// Connected components, each sorted, ordered by smallest member.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let mut seen = vec![false; self.n];
        let mut out = Vec::new();
        for start in 0..self.n {
            if seen[start] {
                continue;
            }
            let mut comp = self.bfs(start, usize::MAX).into_iter().map(|(v, _)| v).collect::<Vec<_>>();
            comp.sort_unstable();
            for &v in &comp {
                seen[v] = true;
            }
            out.push(comp);
        }
        out
    }

    /// Nodes within graph distance `k` of `i`, excluding `i`, ascending.
    pub fn k_hop(&self, i: usize, k: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self.bfs(i, k).into_iter().filter(|&(v, _)| v != i).map(|(v, _)| v).collect();
        out.sort_unstable();
        out
    }

    fn bfs(&self, start: usize, max_depth: usize) -> Vec<(usize, usize)> {
        let mut depth = vec![usize::MAX; self.n];
        let mut queue = VecDeque::from([start]);
        depth[start] = 0;
        let mut out = vec![(start, 0)];
        while let Some(u) = queue.pop_front() {
            if depth[u] >= max_depth {
                continue;
            }
            for v in 0..self.n {
                if self.has_edge(u, v) && depth[v] == usize::MAX {
                    depth[v] = depth[u] + 1;
                    out.push((v, depth[v]));
                    queue.push_back(v);
                }
            }
        }
        out
    }

    /// Subgraph on `keep` (ascending node indices), preserving step labels.
    pub fn induced(&self, keep: &[usize]) -> CodeGraph {
        let mut g = CodeGraph::empty(keep.iter().map(|&i| self.steps[i]).collect());
        for (a, &i) in keep.iter().enumerate() {
            for (b, &j) in keep.iter().enumerate().skip(a + 1) {
                if self.has_edge(i, j) {
                    g.add_edge(a, b);
                }
            }
        }
        g
    }

    /// Same graph with nodes relabelled: new node `perm[i]` is old node `i`.
    pub fn permuted(&self, perm: &[usize]) -> CodeGraph {
        let mut steps = vec![0; self.n];
        for (i, &p) in perm.iter().enumerate() {
            steps[p] = self.steps[i];
        }
        let mut g = CodeGraph::empty(steps);
        for (i, j) in self.edges() {
            g.add_edge(perm[i], perm[j]);
        }
        g
    }

    /// One `step_i step_j` line per undirected edge.
    pub fn write_edge_list<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        for (i, j) in self.edges() {
            writeln!(out, "{} {}", self.steps[i], self.steps[j])?;
        }
        Ok(())
    }
}

/// Pairwise `cosine(w ⊙ x_i, w ⊙ x_j)`.
pub fn metric_matrix<T: Scalar>(embeddings: &[Vec<T>], w: &[T]) -> Vec<Vec<T>> {
    let n = embeddings.len();
    let weighted: Vec<Vec<T>> = embeddings.iter().map(|x| hadamard(w, x)).collect();
    let mut m = vec![vec![T::zero(); n]; n];
    for i in 0..n {
        m[i][i] = cosine(&weighted[i], &weighted[i]);
        for j in i + 1..n {
            let c = cosine(&weighted[i], &weighted[j]);
            m[i][j] = c;
            m[j][i] = c;
        }
    }
    m
}

/// Number of node pairs kept for sparsity ratio `p`: `⌈p · n(n−1)/2⌉`, at least 1.
pub fn edge_budget(p: f64, n: usize) -> usize {
    let pairs = n * n.saturating_sub(1) / 2;
    ((p * pairs as f64).ceil() as usize).clamp(1, pairs.max(1))
}

/// Keeps every pair whose metric is at least the `budget`-th largest
/// strictly-upper-triangle entry. Ties at the threshold are all kept.
pub fn build_adjacency<T: Scalar>(m: &[Vec<T>], budget: usize, steps: Vec<usize>) -> Result<CodeGraph, GraphError> {
    if budget == 0 {
        return Err(GraphError::ZeroBudget);
    }
    let n = m.len();
    if let Some((row, r)) = m.iter().enumerate().find(|(_, r)| r.len() != n) {
        return Err(GraphError::NotSquare { rows: n, row, cols: r.len() });
    }
    if steps.len() != n {
        return Err(GraphError::StepMap { nodes: n, steps: steps.len() });
    }
    let mut g = CodeGraph::empty(steps);
    if n < 2 {
        return Ok(g);
    }
    let mut upper: Vec<T> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).map(|(i, j)| m[i][j]).collect();
    upper.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    let tau = upper[budget.min(upper.len()) - 1];
    for i in 0..n {
        for j in i + 1..n {
            if m[i][j] >= tau {
                g.add_edge(i, j);
            }
        }
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sym(n: usize, upper: &[f64]) -> Vec<Vec<f64>> {
        let mut m = vec![vec![1.0; n]; n];
        let mut k = 0;
        for i in 0..n {
            for j in i + 1..n {
                m[i][j] = upper[k];
                m[j][i] = upper[k];
                k += 1;
            }
        }
        m
    }

    fn path3() -> CodeGraph {
        let mut g = CodeGraph::empty(vec![1, 2, 3]);
        g.add_edge(0, 1);
        g.add_edge(1, 2);
        g
    }

    #[test]
    fn metric_examples() {
        let m = metric_matrix(&[vec![1.0, 1.0], vec![1.0, 0.0], vec![1.0, 1.0]], &[1.0, 2.0]);
        assert!((m[0][1] - 1.0 / 5f64.sqrt()).abs() < 1e-12);
        assert!((m[0][2] - 1.0).abs() < 1e-12);
        let m = metric_matrix(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[1.0, 1.0]);
        assert_eq!(m[0][1], 0.0);
    }

    #[test]
    fn threshold_examples() {
        // pairs (0,1)=0.9, (0,2)=0.5, (1,2)=0.1
        let g = build_adjacency(&sym(3, &[0.9, 0.5, 0.1]), 2, vec![1, 2, 3]).unwrap();
        assert_eq!(g.edges(), vec![(0, 1), (0, 2)]);
        let g = build_adjacency(&sym(3, &[0.9, 0.5, 0.1]), 3, vec![1, 2, 3]).unwrap();
        assert_eq!(g.edge_count(), 3);
        let g = build_adjacency(&sym(3, &[0.5, 0.5, 0.1]), 1, vec![1, 2, 3]).unwrap();
        assert_eq!(g.edges(), vec![(0, 1), (0, 2)]);
        let g = build_adjacency(&sym(3, &[0.9, 0.5, 0.1]), 99, vec![1, 2, 3]).unwrap();
        assert_eq!(g.edge_count(), 3);
    }

    #[test]
    fn tiny_graphs() {
        let g = build_adjacency(&[vec![1.0]], 1, vec![1]).unwrap();
        assert_eq!(g.n(), 1);
        assert_eq!(g.isolated(), vec![0]);
        assert_eq!(build_adjacency::<f64>(&[], 1, vec![]).unwrap().n(), 0);
        assert_eq!(build_adjacency(&[vec![1.0]], 0, vec![1]), Err(GraphError::ZeroBudget));
    }

    #[test]
    fn budget_examples() {
        assert_eq!(edge_budget(0.2, 30), 87);
        assert_eq!(edge_budget(1.0, 5), 10);
        assert_eq!(edge_budget(0.01, 3), 1);
        assert_eq!(edge_budget(0.5, 1), 1);
    }

    #[test]
    fn component_examples() {
        assert_eq!(CodeGraph::empty(vec![1, 2, 3]).components(), vec![vec![0], vec![1], vec![2]]);
        assert_eq!(path3().components(), vec![vec![0, 1, 2]]);
        let mut g = CodeGraph::empty(vec![1, 2, 3, 4]);
        g.add_edge(0, 2);
        g.add_edge(1, 3);
        assert_eq!(g.components(), vec![vec![0, 2], vec![1, 3]]);
    }

    #[test]
    fn k_hop_examples() {
        let g = path3();
        assert_eq!(g.k_hop(0, 1), vec![1]);
        assert_eq!(g.k_hop(0, 2), vec![1, 2]);
        assert!(CodeGraph::empty(vec![1, 2]).k_hop(0, 3).is_empty());
    }

    #[test]
    fn induced_keeps_step_labels() {
        let g = path3().induced(&[1, 2]);
        assert_eq!(g.steps(), &[2, 3]);
        assert_eq!(g.edges(), vec![(0, 1)]);
    }

    #[test]
    fn edge_list_dump() {
        let mut buf = Vec::new();
        path3().write_edge_list(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "1 2\n2 3\n");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn distinct_matrix() -> impl Strategy<Value = (usize, Vec<Vec<f64>>)> {
            (2usize..9).prop_flat_map(|n| {
                let pairs = n * (n - 1) / 2;
                Just((0..pairs).collect::<Vec<usize>>()).prop_shuffle().prop_map(move |ranks| {
                    let upper: Vec<f64> = ranks.iter().map(|&r| r as f64 / pairs as f64 * 2.0 - 1.0).collect();
                    (n, sym(n, &upper))
                })
            })
        }

        proptest! {
            #[test]
            fn exact_budget_symmetric_loop_free((n, m) in distinct_matrix(), frac in 0.0f64..1.0) {
                let pairs = n * (n - 1) / 2;
                let eps = 1 + (frac * (pairs - 1) as f64) as usize;
                let g = build_adjacency(&m, eps, (1..=n).collect()).unwrap();
                prop_assert_eq!(g.edge_count(), eps);
                for i in 0..n {
                    prop_assert!(!g.has_edge(i, i));
                    for j in 0..n {
                        prop_assert_eq!(g.has_edge(i, j), g.has_edge(j, i));
                    }
                }
                let iso = g.isolated();
                prop_assert!(iso.iter().all(|&i| g.degree(i) == 0));
                let total: usize = g.components().iter().map(Vec::len).sum();
                prop_assert_eq!(total, n);
            }

            #[test]
            fn monotone_in_budget((n, m) in distinct_matrix(), a in 1usize..40, b in 1usize..40) {
                let (lo, hi) = (a.min(b), a.max(b));
                let g1 = build_adjacency(&m, lo, (1..=n).collect()).unwrap();
                let g2 = build_adjacency(&m, hi, (1..=n).collect()).unwrap();
                for (i, j) in g1.edges() {
                    prop_assert!(g2.has_edge(i, j));
                }
            }

            #[test]
            fn relabelling_is_equivariant((n, m) in distinct_matrix(), seed in any::<u64>(), eps in 1usize..10, k in 1usize..3) {
                use rand::{seq::SliceRandom, SeedableRng};
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
                let mut pm = vec![vec![0.0; n]; n];
                for i in 0..n {
                    for j in 0..n {
                        pm[perm[i]][perm[j]] = m[i][j];
                    }
                }
                let g = build_adjacency(&m, eps, (1..=n).collect()).unwrap();
                let pg = build_adjacency(&pm, eps, g.permuted(&perm).steps().to_vec()).unwrap();
                prop_assert_eq!(&pg, &g.permuted(&perm));
                for i in 0..n {
                    let mut mapped: Vec<usize> = g.k_hop(i, k).iter().map(|&v| perm[v]).collect();
                    mapped.sort_unstable();
                    prop_assert_eq!(pg.k_hop(perm[i], k), mapped);
                }
                prop_assert_eq!(g.components().len(), pg.components().len());
            }
        }
    }
}
