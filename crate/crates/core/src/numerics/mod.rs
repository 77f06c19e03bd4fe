//! Dense vector primitives, the reverse-mode tape, parameter storage and
//! the finite-difference gradient oracle.
//!
//! Everything below the training loop is generic over [`Scalar`], which is
//! implemented for `f32`, `f64` and the forward-mode [`Dual`] number used to
//! obtain Hessian-vector products from the same tape code.

mod adam;
mod dual;
mod gradcheck;
mod params;
mod scalar;
mod tape;

pub use adam::{sgd_step, Adam, AdamConfig};
pub use dual::Dual;
pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use params::{ParamGrads, ParamStore, Slot};
pub use scalar::{cast_slice, Scalar};
pub use tape::{Gradients, Tape, Var};

use thiserror::Error;

/// Floor applied to the second argument of [`kl_divergence`] before the log.
pub const KL_FLOOR: f64 = 1e-12;

/// Tolerance on `|sum(p) - 1|` accepted by [`kl_divergence`].
pub const NORMALIZATION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum NumericsError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("input is not a probability vector (sum = {sum})")]
    NotNormalized { sum: f64 },
    #[error("loss is not finite ({0})")]
    NonFiniteLoss(f64),
    #[error("finite-difference step {0} outside [1e-7, 1e-4]")]
    StepOutOfRange(f64),
    #[error("unknown parameter slot `{0}`")]
    UnknownSlot(String),
    #[error("slot `{name}` expects {expected} values, got {got}")]
    SlotSize { name: String, expected: usize, got: usize },
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub fn norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

pub fn hadamard<T: Scalar>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| x * y).collect()
}

pub fn squared_distance<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| {
        let d = x - y;
        acc + d * d
    })
}

/// Cosine similarity. A zero-norm argument yields 0.
pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> T {
    assert_eq!(a.len(), b.len(), "cosine of vectors with different dimension");
    let na = norm(a);
    let nb = norm(b);
    if na == T::zero() || nb == T::zero() {
        return T::zero();
    }
    let c = dot(a, b) / (na * nb);
    // rounding can push |c| a hair past 1
    c.max(-T::one()).min(T::one())
}

/// Cosine of `w ⊙ a` and `w ⊙ b`.
pub fn weighted_cosine<T: Scalar>(w: &[T], a: &[T], b: &[T]) -> T {
    cosine(&hadamard(w, a), &hadamard(w, b))
}

/// Max-shifted softmax.
pub fn softmax<T: Scalar>(v: &[T]) -> Vec<T> {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = v.iter().map(|&x| (x - max).exp()).collect();
    let total = exps.iter().copied().fold(T::zero(), |a, b| a + b);
    exps.into_iter().map(|e| e / total).collect()
}

/// `KL(p || q)` for probability vectors, with `q` floored at [`KL_FLOOR`].
pub fn kl_divergence<T: Scalar>(p: &[T], q: &[T]) -> Result<T, NumericsError> {
    if p.len() != q.len() {
        return Err(NumericsError::DimensionMismatch { left: p.len(), right: q.len() });
    }
    for v in [p, q] {
        let sum = v.iter().copied().fold(T::zero(), |a, b| a + b).real();
        if (sum - 1.0).abs() > NORMALIZATION_TOLERANCE {
            return Err(NumericsError::NotNormalized { sum });
        }
    }
    let floor = T::lit(KL_FLOOR);
    let kl =
        p.iter().zip(q).fold(T::zero(), |acc, (&pi, &qi)| if pi <= T::zero() { acc } else { acc + pi * (pi.ln() - qi.max(floor).ln()) });
    Ok(kl.max(T::zero()))
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn mean<T: Scalar>(values: &[T]) -> T {
    let n = T::lit(values.len() as f64);
    values.iter().copied().fold(T::zero(), |a, b| a + b) / n
}

/// Midpoint median; `None` for an empty slice.
pub fn median<T: Scalar>(values: &[T]) -> Option<T> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = sorted.len();
    Some(if n % 2 == 1 { sorted[n / 2] } else { (sorted[n / 2 - 1] + sorted[n / 2]) / T::lit(2.0) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine(&[1.0, 0.0], &[1.0, 0.0]), 1.0);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        let c: f64 = cosine(&[1.0, 2.0], &[1.0, 0.0]);
        assert!((c - 1.0 / 5f64.sqrt()).abs() < 1e-15);
        assert!((c - 0.4472).abs() < 1e-4);
    }

    #[test]
    fn cosine_zero_vector_is_zero() {
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 3.0]), 0.0);
        assert_eq!(cosine::<f64>(&[0.0], &[0.0]), 0.0);
    }

    #[test]
    fn cosine_works_in_f32() {
        let c: f32 = cosine(&[1.0f32, 2.0], &[1.0, 0.0]);
        assert!((c - 0.4472).abs() < 1e-4);
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]), vec![0.5, 0.5]);
        let s = softmax(&[2f64.ln(), 0.0]);
        assert!((s[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((s[1] - 1.0 / 3.0).abs() < 1e-15);
        for v in softmax(&[5.0f64, 5.0, 5.0]) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_divergence(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), 0.0);
        let kl = kl_divergence(&[0.5, 0.5], &[0.9, 0.1]).unwrap();
        assert!((kl - 0.5 * (25.0f64 / 9.0).ln()).abs() < 1e-12);
        assert!((kl - 0.5108).abs() < 1e-4);
        let kl = kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((kl - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn kl_rejects_unnormalized() {
        assert!(matches!(kl_divergence(&[0.5, 0.6], &[0.5, 0.5]), Err(NumericsError::NotNormalized { .. })));
        assert!(matches!(kl_divergence(&[0.5, 0.5], &[0.5]), Err(NumericsError::DimensionMismatch { .. })));
    }

    #[test]
    fn median_midpoint() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median::<f64>(&[]), None);
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        fn vec_strategy() -> impl Strategy<Value = Vec<f64>> {
            (1usize..12).prop_flat_map(|n| proptest::collection::vec(-20.0f64..20.0, n))
        }

        proptest! {
            #[test]
            fn softmax_sums_to_one_and_is_shift_invariant(v in vec_strategy(), c in -50.0f64..50.0) {
                let s = softmax(&v);
                let total: f64 = s.iter().sum();
                prop_assert!((total - 1.0).abs() <= 1e-12);
                prop_assert!(s.iter().all(|&x| x > 0.0));
                let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
                for (a, b) in s.iter().zip(softmax(&shifted)) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }

            #[test]
            fn kl_nonnegative_and_zero_on_equal(a in vec_strategy(), seed in 0u64..1000) {
                let p = softmax(&a);
                let b: Vec<f64> = a.iter().enumerate().map(|(i, x)| x + ((i as u64 * 7 + seed) % 5) as f64 * 0.3).collect();
                let q = softmax(&b);
                prop_assert!(kl_divergence(&p, &q).unwrap() >= 0.0);
                prop_assert!(kl_divergence(&p, &p).unwrap().abs() < 1e-12);
            }

            #[test]
            fn cosine_symmetric_bounded(a in proptest::collection::vec(-5.0f64..5.0, 4), b in proptest::collection::vec(-5.0f64..5.0, 4)) {
                let c = cosine(&a, &b);
                prop_assert!((-1.0..=1.0).contains(&c));
                prop_assert_eq!(c, cosine(&b, &a));
            }
        }
    }
}
