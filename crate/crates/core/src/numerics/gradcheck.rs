use super::{NumericsError, ParamGrads, ParamStore, Scalar};

/// Denominator floor in [`relative_error`]; below this both values count as zero.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// `(slot, index)` of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Frozen slots for which the analytic gradient was absent or all zero.
    pub frozen_clean: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Compares the analytic gradient returned by `loss` with central finite
/// differences over every entry of every unfrozen slot of `theta`.
pub fn grad_check<T, F, E>(loss: F, theta: &ParamStore<T>, eps: f64) -> Result<GradCheckReport, E>
where
    T: Scalar,
    F: Fn(&ParamStore<T>) -> Result<(T, ParamGrads<T>), E>,
    E: From<NumericsError>,
{
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(NumericsError::StepOutOfRange(eps).into());
    }
    let (value, analytic) = loss(theta)?;
    if !value.is_finite() {
        return Err(NumericsError::NonFiniteLoss(value.real()).into());
    }
    let mut report = GradCheckReport { max_relative_error: 0.0, worst: None, checked: 0, frozen_clean: true };
    let mut probe = theta.clone();
    for (i, slot) in theta.slots().iter().enumerate() {
        if slot.frozen {
            if let Some(g) = analytic.get(i) {
                if g.iter().any(|v| *v != T::zero()) {
                    report.frozen_clean = false;
                }
            }
            continue;
        }
        let g = analytic.get(i).map(|g| g.to_vec()).unwrap_or_else(|| vec![T::zero(); slot.data.len()]);
        for j in 0..slot.data.len() {
            let base = slot.data[j];
            probe.slot_mut(i).data[j] = base + T::lit(eps);
            let (up, _) = loss(&probe)?;
            probe.slot_mut(i).data[j] = base - T::lit(eps);
            let (down, _) = loss(&probe)?;
            probe.slot_mut(i).data[j] = base;
            if !up.is_finite() || !down.is_finite() {
                return Err(NumericsError::NonFiniteLoss(up.real()).into());
            }
            let numeric = (up.real() - down.real()) / (2.0 * eps);
            let err = relative_error(g[j].real(), numeric);
            report.checked += 1;
            if err > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = err;
                report.worst = Some((slot.name.clone(), j));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;

    fn half_norm_sq(p: &ParamStore<f64>) -> Result<(f64, ParamGrads<f64>), NumericsError> {
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape);
        let mut terms = Vec::new();
        for &v in &vars {
            let d = tape.dot(v, v);
            terms.push(tape.scale(d, 0.5));
        }
        let total = tape.add_all(&terms).unwrap();
        let grads = tape.backward(total);
        Ok((tape.scalar(total), p.collect(&vars, &grads)))
    }

    #[test]
    fn quadratic_gradient_is_exact() {
        let mut p = ParamStore::new();
        p.insert("a", &[3], vec![0.5, -1.5, 2.0]).unwrap();
        p.insert("m", &[2, 2], vec![1.0, -0.25, 0.75, 3.0]).unwrap();
        let report = grad_check(half_norm_sq, &p, 1e-5).unwrap();
        assert_eq!(report.checked, 7);
        assert!(report.max_relative_error < 1e-8, "{report:?}");
    }

    #[test]
    fn frozen_slots_are_skipped_and_report_no_gradient() {
        let mut p = ParamStore::new();
        p.insert("a", &[2], vec![0.5, -1.5]).unwrap();
        p.insert("f", &[2], vec![4.0, 4.0]).unwrap();
        p.set_frozen("f", true).unwrap();
        let (_, g) = half_norm_sq(&p).unwrap();
        assert!(g.get(1).is_none());
        let report = grad_check(half_norm_sq, &p, 1e-5).unwrap();
        assert_eq!(report.checked, 2);
        assert!(report.frozen_clean);
    }

    #[test]
    fn rejects_bad_step_and_nonfinite_loss() {
        let mut p = ParamStore::new();
        p.insert("a", &[1], vec![1.0]).unwrap();
        assert!(matches!(grad_check(half_norm_sq, &p, 1e-2), Err(NumericsError::StepOutOfRange(_))));
        let nan = |_: &ParamStore<f64>| -> Result<(f64, ParamGrads<f64>), NumericsError> {
            Ok((f64::NAN, ParamGrads { slots: vec![Some(vec![0.0])] }))
        };
        assert!(matches!(grad_check(nan, &p, 1e-5), Err(NumericsError::NonFiniteLoss(_))));
    }
}
