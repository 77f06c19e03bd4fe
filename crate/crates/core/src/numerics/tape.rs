//! Vector-valued reverse-mode tape.
//!
//! Nodes hold dense row-major values; matrices are nodes with `rows > 1`.
//! Operations are appended in evaluation order, so a single reverse sweep in
//! [`Tape::backward`] propagates adjoints. Every op below has its adjoint
//! covered by the finite-difference tests at the bottom of this file.

use super::{Scalar, KL_FLOOR};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `scale * a + offset`
    Affine(Var, T, T),
    /// vector times a length-1 node
    ScaleBy(Var, Var),
    MatVec(Var, Var),
    MatTVec(Var, Var),
    Row(Var, usize),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Sigmoid(Var),
    Tanh(Var),
    Sum(Var),
    Dot(Var, Var),
    Mean(Vec<Var>),
    Softmax(Var),
    Kl(Var, Var),
    BceLogit(Var, T),
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Vec<T>,
    rows: usize,
    cols: usize,
    op: Op<T>,
}

#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    lens: Vec<usize>,
}

impl<T: Scalar> Gradients<T> {
    /// Adjoint of `v`; zeros when `v` does not reach the root.
    pub fn get(&self, v: Var) -> Vec<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => vec![T::zero(); self.lens[v.0]],
        }
    }

    pub fn touched(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<T>, rows: usize, cols: usize, op: Op<T>) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node { value, rows, cols, op });
        Var(self.nodes.len() - 1)
    }

    fn vector(&mut self, value: Vec<T>, op: Op<T>) -> Var {
        let n = value.len();
        self.push(value, n, 1, op)
    }

    pub fn leaf(&mut self, value: Vec<T>) -> Var {
        self.vector(value, Op::Leaf)
    }

    pub fn scalar_leaf(&mut self, value: T) -> Var {
        self.vector(vec![value], Op::Leaf)
    }

    pub fn matrix_leaf(&mut self, rows: usize, cols: usize, value: Vec<T>) -> Var {
        assert_eq!(value.len(), rows * cols, "matrix leaf shape");
        self.push(value, rows, cols, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        let n = &self.nodes[v.0];
        assert_eq!(n.value.len(), 1, "scalar() on a non-scalar node");
        n.value[0]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    fn same_len(&self, a: Var, b: Var) -> usize {
        let (la, lb) = (self.nodes[a.0].value.len(), self.nodes[b.0].value.len());
        assert_eq!(la, lb, "elementwise op on lengths {la} and {lb}");
        la
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_len(a, b);
        let v = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.vector(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_len(a, b);
        let v = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.vector(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_len(a, b);
        let v = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.vector(v, Op::Mul(a, b))
    }

    pub fn affine(&mut self, a: Var, scale: T, offset: T) -> Var {
        let v = self.value(a).iter().map(|&x| scale * x + offset).collect();
        self.vector(v, Op::Affine(a, scale, offset))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.affine(a, c, T::zero())
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: Var) -> Var {
        self.affine(a, -T::one(), T::one())
    }

    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let k = self.scalar(s);
        let v = self.value(a).iter().map(|&x| x * k).collect();
        self.vector(v, Op::ScaleBy(a, s))
    }

    pub fn matvec(&mut self, m: Var, x: Var) -> Var {
        let (rows, cols) = self.shape(m);
        let xv = self.value(x);
        assert_eq!(xv.len(), cols, "matvec: {rows}x{cols} times {}", xv.len());
        let mv = self.value(m);
        let out = (0..rows)
            .map(|r| {
                let row = &mv[r * cols..(r + 1) * cols];
                row.iter().zip(xv).fold(T::zero(), |acc, (&a, &b)| acc + a * b)
            })
            .collect();
        self.vector(out, Op::MatVec(m, x))
    }

    /// `mᵀ x`
    pub fn mat_t_vec(&mut self, m: Var, x: Var) -> Var {
        let (rows, cols) = self.shape(m);
        let xv = self.value(x);
        assert_eq!(xv.len(), rows, "mat_t_vec: ({rows}x{cols})ᵀ times {}", xv.len());
        let mv = self.value(m);
        let mut out = vec![T::zero(); cols];
        for r in 0..rows {
            let xr = xv[r];
            for (o, &a) in out.iter_mut().zip(&mv[r * cols..(r + 1) * cols]) {
                *o = *o + a * xr;
            }
        }
        self.vector(out, Op::MatTVec(m, x))
    }

    pub fn row(&mut self, m: Var, r: usize) -> Var {
        let (rows, cols) = self.shape(m);
        assert!(r < rows, "row {r} of a {rows}-row matrix");
        let v = self.value(m)[r * cols..(r + 1) * cols].to_vec();
        self.vector(v, Op::Row(m, r))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut v = Vec::new();
        for &p in parts {
            v.extend_from_slice(self.value(p));
        }
        self.vector(v, Op::Concat(parts.to_vec()))
    }

    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a)[start..start + len].to_vec();
        self.vector(v, Op::Slice(a, start))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|&x| super::sigmoid(x)).collect();
        self.vector(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|&x| x.tanh()).collect();
        self.vector(v, Op::Tanh(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().fold(T::zero(), |acc, &x| acc + x);
        self.vector(vec![s], Op::Sum(a))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        self.same_len(a, b);
        let s = super::dot(self.value(a), self.value(b));
        self.vector(vec![s], Op::Dot(a, b))
    }

    /// Elementwise mean of equally sized vectors.
    pub fn mean(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "mean of an empty set");
        let n = self.value(parts[0]).len();
        let mut acc = vec![T::zero(); n];
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.len(), n, "mean over vectors of different length");
            for (a, &x) in acc.iter_mut().zip(pv) {
                *a = *a + x;
            }
        }
        let k = T::lit(parts.len() as f64);
        let v = acc.into_iter().map(|a| a / k).collect();
        self.vector(v, Op::Mean(parts.to_vec()))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let v = super::softmax(self.value(a));
        self.vector(v, Op::Softmax(a))
    }

    /// `KL(p || q)` with `q` floored; both must already be distributions.
    pub fn kl(&mut self, p: Var, q: Var) -> Var {
        self.same_len(p, q);
        let floor = T::lit(KL_FLOOR);
        let s = self.value(p).iter().zip(self.value(q)).fold(T::zero(), |acc, (&pi, &qi)| {
            if pi <= T::zero() {
                acc
            } else {
                acc + pi * (pi.ln() - qi.max(floor).ln())
            }
        });
        self.vector(vec![s], Op::Kl(p, q))
    }

    /// Binary cross-entropy of `sigmoid(z)` against `target`, computed stably.
    pub fn bce_with_logit(&mut self, z: Var, target: T) -> Var {
        let x = self.scalar(z);
        // softplus(x) - target * x
        let softplus = if x > T::zero() { x + (-x).exp().ln_1p() } else { x.exp().ln_1p() };
        self.vector(vec![softplus - target * x], Op::BceLogit(z, target))
    }

    /// Sum of scalar nodes.
    pub fn add_all(&mut self, terms: &[Var]) -> Option<Var> {
        let mut it = terms.iter().copied();
        let first = it.next()?;
        Some(it.fold(first, |acc, t| self.add(acc, t)))
    }

    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward from a non-scalar node");
        let mut grads: Vec<Option<Vec<T>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    acc(&mut grads, self, *a, |d| add_into(d, &g));
                    acc(&mut grads, self, *b, |d| add_into(d, &g));
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, self, *a, |d| add_into(d, &g));
                    acc(&mut grads, self, *b, |d| {
                        for (x, &y) in d.iter_mut().zip(&g) {
                            *x = *x - y;
                        }
                    });
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    acc(&mut grads, self, *a, |d| {
                        for ((x, &gi), &bi) in d.iter_mut().zip(&g).zip(bv) {
                            *x = *x + gi * bi;
                        }
                    });
                    acc(&mut grads, self, *b, |d| {
                        for ((x, &gi), &ai) in d.iter_mut().zip(&g).zip(av) {
                            *x = *x + gi * ai;
                        }
                    });
                }
                Op::Affine(a, scale, _) => {
                    acc(&mut grads, self, *a, |d| {
                        for (x, &gi) in d.iter_mut().zip(&g) {
                            *x = *x + gi * *scale;
                        }
                    });
                }
                Op::ScaleBy(a, s) => {
                    let k = self.scalar(*s);
                    let av = self.value(*a);
                    acc(&mut grads, self, *a, |d| {
                        for (x, &gi) in d.iter_mut().zip(&g) {
                            *x = *x + gi * k;
                        }
                    });
                    let ds = super::dot(&g, av);
                    acc(&mut grads, self, *s, |d| d[0] = d[0] + ds);
                }
                Op::MatVec(m, x) => {
                    let (rows, cols) = self.shape(*m);
                    let (mv, xv) = (self.value(*m), self.value(*x));
                    acc(&mut grads, self, *m, |d| {
                        for r in 0..rows {
                            let gr = g[r];
                            for (dm, &xc) in d[r * cols..(r + 1) * cols].iter_mut().zip(xv) {
                                *dm = *dm + gr * xc;
                            }
                        }
                    });
                    acc(&mut grads, self, *x, |d| {
                        for r in 0..rows {
                            let gr = g[r];
                            for (dx, &a) in d.iter_mut().zip(&mv[r * cols..(r + 1) * cols]) {
                                *dx = *dx + a * gr;
                            }
                        }
                    });
                }
                Op::MatTVec(m, x) => {
                    let (rows, cols) = self.shape(*m);
                    let (mv, xv) = (self.value(*m), self.value(*x));
                    acc(&mut grads, self, *m, |d| {
                        for r in 0..rows {
                            let xr = xv[r];
                            for (dm, &gc) in d[r * cols..(r + 1) * cols].iter_mut().zip(&g) {
                                *dm = *dm + xr * gc;
                            }
                        }
                    });
                    acc(&mut grads, self, *x, |d| {
                        for (r, dx) in d.iter_mut().enumerate() {
                            let row = &mv[r * cols..(r + 1) * cols];
                            *dx = *dx + super::dot(row, &g);
                        }
                    });
                }
                Op::Row(m, r) => {
                    let cols = self.shape(*m).1;
                    acc(&mut grads, self, *m, |d| add_into(&mut d[r * cols..(r + 1) * cols], &g));
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.nodes[p.0].value.len();
                        acc(&mut grads, self, p, |d| add_into(d, &g[offset..offset + n]));
                        offset += n;
                    }
                }
                Op::Slice(a, start) => {
                    let n = g.len();
                    acc(&mut grads, self, *a, |d| add_into(&mut d[*start..*start + n], &g));
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    acc(&mut grads, self, *a, |d| {
                        for ((x, &gi), &yi) in d.iter_mut().zip(&g).zip(y) {
                            *x = *x + gi * yi * (T::one() - yi);
                        }
                    });
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    acc(&mut grads, self, *a, |d| {
                        for ((x, &gi), &yi) in d.iter_mut().zip(&g).zip(y) {
                            *x = *x + gi * (T::one() - yi * yi);
                        }
                    });
                }
                Op::Sum(a) => {
                    acc(&mut grads, self, *a, |d| {
                        for x in d.iter_mut() {
                            *x = *x + g[0];
                        }
                    });
                }
                Op::Dot(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    acc(&mut grads, self, *a, |d| {
                        for (x, &bi) in d.iter_mut().zip(bv) {
                            *x = *x + g[0] * bi;
                        }
                    });
                    acc(&mut grads, self, *b, |d| {
                        for (x, &ai) in d.iter_mut().zip(av) {
                            *x = *x + g[0] * ai;
                        }
                    });
                }
                Op::Mean(parts) => {
                    let k = T::lit(parts.len() as f64);
                    for &p in parts {
                        acc(&mut grads, self, p, |d| {
                            for (x, &gi) in d.iter_mut().zip(&g) {
                                *x = *x + gi / k;
                            }
                        });
                    }
                }
                Op::Softmax(a) => {
                    let s = &node.value;
                    let gs = super::dot(&g, s);
                    acc(&mut grads, self, *a, |d| {
                        for ((x, &gi), &si) in d.iter_mut().zip(&g).zip(s) {
                            *x = *x + si * (gi - gs);
                        }
                    });
                }
                Op::Kl(p, q) => {
                    let floor = T::lit(KL_FLOOR);
                    let (pv, qv) = (self.value(*p), self.value(*q));
                    acc(&mut grads, self, *p, |d| {
                        for ((x, &pi), &qi) in d.iter_mut().zip(pv).zip(qv) {
                            if pi > T::zero() {
                                *x = *x + g[0] * (pi.ln() + T::one() - qi.max(floor).ln());
                            }
                        }
                    });
                    acc(&mut grads, self, *q, |d| {
                        for ((x, &pi), &qi) in d.iter_mut().zip(pv).zip(qv) {
                            if pi > T::zero() && qi > floor {
                                *x = *x - g[0] * pi / qi;
                            }
                        }
                    });
                }
                Op::BceLogit(z, target) => {
                    let s = super::sigmoid(self.scalar(*z));
                    acc(&mut grads, self, *z, |d| d[0] = d[0] + g[0] * (s - *target));
                }
            }
            grads[i] = Some(g);
        }
        let lens = self.nodes.iter().map(|n| n.value.len()).collect();
        grads.resize(self.nodes.len(), None);
        Gradients { grads, lens }
    }
}

fn zip_map<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn add_into<T: Scalar>(d: &mut [T], g: &[T]) {
    for (x, &y) in d.iter_mut().zip(g) {
        *x = *x + y;
    }
}

fn acc<T: Scalar>(grads: &mut [Option<Vec<T>>], tape: &Tape<T>, v: Var, f: impl FnOnce(&mut [T])) {
    let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); tape.nodes[v.0].value.len()]);
    f(slot);
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central differences of `build` with respect to the entries of leaf 0.
    fn fd_check(leaf0: Vec<f64>, rows: usize, build: impl Fn(&mut Tape<f64>, Var) -> Var) {
        let cols = leaf0.len() / rows;
        let mut tape = Tape::new();
        let x = tape.matrix_leaf(rows, cols, leaf0.clone());
        let out = build(&mut tape, x);
        let analytic = tape.backward(out).get(x);
        let h = 1e-6;
        for i in 0..leaf0.len() {
            let eval = |delta: f64| {
                let mut v = leaf0.clone();
                v[i] += delta;
                let mut t = Tape::new();
                let x = t.matrix_leaf(rows, cols, v);
                let o = build(&mut t, x);
                t.scalar(o)
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let err = (numeric - analytic[i]).abs() / numeric.abs().max(analytic[i].abs()).max(1e-6);
            assert!(err < 1e-6, "entry {i}: analytic {} numeric {numeric}", analytic[i]);
        }
    }

    #[test]
    fn elementwise_ops() {
        let x0 = vec![0.3, -1.2, 0.8];
        fd_check(x0.clone(), 3, |t, x| {
            let c = t.leaf(vec![2.0, -0.5, 1.5]);
            let a = t.add(x, c);
            let b = t.mul(a, x);
            let s = t.sub(b, c);
            let s = t.affine(s, 0.7, -0.2);
            let s = t.sigmoid(s);
            let s = t.tanh(s);
            t.sum(s)
        });
    }

    #[test]
    fn matrix_ops() {
        // x is a 2x3 matrix
        let m0 = vec![0.2, -0.4, 0.9, 1.1, 0.05, -0.7];
        fd_check(m0, 2, |t, m| {
            let v = t.leaf(vec![0.5, -1.0, 2.0]);
            let y = t.matvec(m, v);
            let u = t.leaf(vec![0.3, -0.8]);
            let z = t.mat_t_vec(m, u);
            let r = t.row(m, 1);
            let zr = t.mul(z, r);
            let a = t.dot(y, y);
            let b = t.sum(zr);
            t.add(a, b)
        });
        // gradient with respect to the vector argument
        fd_check(vec![0.5, -1.0, 2.0], 3, |t, v| {
            let m = t.matrix_leaf(2, 3, vec![0.2, -0.4, 0.9, 1.1, 0.05, -0.7]);
            let y = t.matvec(m, v);
            let w = t.mat_t_vec(m, y);
            t.dot(w, v)
        });
    }

    #[test]
    fn structural_ops() {
        fd_check(vec![0.1, 0.2, -0.3, 0.4], 4, |t, x| {
            let a = t.slice(x, 1, 2);
            let b = t.slice(x, 0, 2);
            let c = t.concat(&[a, b, x]);
            let s = t.sum(x);
            let k = t.scale_by(c, s);
            let m = t.mean(&[a, b]);
            let mm = t.dot(m, m);
            let ks = t.sum(k);
            t.add(mm, ks)
        });
    }

    #[test]
    fn softmax_kl_bce() {
        fd_check(vec![0.4, -0.3, 1.2], 3, |t, x| {
            let p = t.softmax(x);
            let other = t.leaf(vec![0.0, 0.5, -0.5]);
            let q0 = t.mul(x, other);
            let q = t.softmax(q0);
            let k1 = t.kl(p, q);
            let k2 = t.kl(q, p);
            let z = t.sum(x);
            let b = t.bce_with_logit(z, 1.0);
            let b0 = t.bce_with_logit(z, 0.0);
            let s = t.add(k1, k2);
            let s = t.add(s, b);
            t.add(s, b0)
        });
    }

    #[test]
    fn bce_matches_log_form() {
        let mut t = Tape::new();
        let z = t.scalar_leaf(0.3f64);
        let l = t.bce_with_logit(z, 1.0);
        let p = super::super::sigmoid(0.3f64);
        assert!((t.scalar(l) + p.ln()).abs() < 1e-14);
        let l0 = t.bce_with_logit(z, 0.0);
        assert!((t.scalar(l0) + (1.0 - p).ln()).abs() < 1e-14);
    }

    #[test]
    fn untouched_nodes_have_zero_gradient() {
        let mut t = Tape::new();
        let a = t.leaf(vec![1.0f64, 2.0]);
        let b = t.leaf(vec![3.0, 4.0]);
        let s = t.sum(a);
        let g = t.backward(s);
        assert!(!g.touched(b));
        assert_eq!(g.get(b), vec![0.0, 0.0]);
        assert_eq!(g.get(a), vec![1.0, 1.0]);
    }
}
