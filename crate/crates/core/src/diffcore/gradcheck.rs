use super::params::{ParamGrads, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat coordinate of the worst disagreement.
    pub worst: Option<(String, usize)>,
    /// Reverse-mode and central-difference values at `worst`.
    pub worst_pair: (f64, f64),
    pub checked: usize,
}

/// Relative disagreement used throughout: `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Smallest change in `(plus - minus) / (2 step)` that rounding can produce:
/// one unit in the last place of each loss value.
pub fn difference_quantum(plus: f64, minus: f64, step: f64) -> f64 {
    f64::EPSILON * plus.abs().max(minus.abs()) / step
}

/// Like [`relative_error`], but the part of the disagreement that a central
/// difference cannot resolve (`quantum`) is not counted.
pub fn resolved_relative_error(analytic: f64, numeric: f64, quantum: f64) -> f64 {
    ((analytic - numeric).abs() - quantum).max(0.0) / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares reverse-mode gradients against central differences for every
/// scalar in `store`, using [`resolved_relative_error`].
///
/// `objective` returns the loss and its parameter gradients. The store is
/// restored to its original values before returning.
pub fn grad_check<F>(mut objective: F, store: &mut ParamStore, step: f64) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<(f64, ParamGrads)>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Argument(format!("finite-difference step must be positive, got {step}")));
    }
    let (base, analytic) = objective(store)?;
    if !base.is_finite() {
        return Err(Error::Numeric(format!("loss is {base}")));
    }
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_pair: (0.0, 0.0),
        checked: 0,
    };
    for idx in 0..store.len() {
        for flat in 0..store.entry(idx).value.len() {
            let original = store.entry(idx).value.values()[flat];
            store.entry_mut(idx).value.values_mut()[flat] = original + step;
            let plus = objective(store).map(|r| r.0);
            store.entry_mut(idx).value.values_mut()[flat] = original - step;
            let minus = objective(store).map(|r| r.0);
            store.entry_mut(idx).value.values_mut()[flat] = original;
            let (plus, minus) = (plus?, minus?);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss became non-finite perturbing `{}`[{flat}]",
                    store.entry(idx).name
                )));
            }
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.coord(idx, flat);
            let err = resolved_relative_error(a, numeric, difference_quantum(plus, minus, step));
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst_pair = (a, numeric);
                report.worst = Some((store.entry(idx).name.clone(), flat));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{DenseArray, Tape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn affine_store() -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut s = ParamStore::new();
        s.insert_xavier("w", 3, 4, &mut rng).unwrap();
        s.insert("b", DenseArray::new(vec![4], vec![0.1, -0.2, 0.3, 0.0]).unwrap()).unwrap();
        s
    }

    fn affine_loss(store: &ParamStore) -> Result<(f64, ParamGrads)> {
        let mut t = Tape::new(store);
        let x = t.constant(DenseArray::from_rows(&[[0.5, -1.0, 2.0], [1.0, 2.5, -0.5]]).unwrap());
        let w = t.param("w")?;
        let b = t.param("b")?;
        let y = t.linear(x, w, b)?;
        let l = t.sum(y);
        let g = t.backward(l)?;
        Ok((t.value(l).values()[0], t.param_grads(&g)))
    }

    #[test]
    fn affine_loss_is_exact() {
        let mut s = affine_store();
        let r = grad_check(affine_loss, &mut s, 1e-5).unwrap();
        assert_eq!(r.checked, 16);
        assert!(r.max_rel_error < 1e-10, "{r:?}");
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let mut s = affine_store();
        let r = grad_check(
            |st| {
                let (l, mut g) = affine_loss(st)?;
                if let Some(Some(w)) = g.0.get_mut(0) {
                    w.values_mut()[2] *= 1.5;
                }
                Ok((l, g))
            },
            &mut s,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error > 1e-2);
        assert_eq!(r.worst, Some(("w".to_string(), 2)));
    }

    /// `L = 1 + 1e-9 w`: the difference quotient is off by rounding alone.
    fn tiny_slope(scale: f64) -> impl Fn(&ParamStore) -> Result<(f64, ParamGrads)> {
        move |st| {
            let w = st.value("w")?.values()[0];
            let g = DenseArray::new(vec![1], vec![1e-9 * scale]).unwrap();
            Ok((1.0 + 1e-9 * w, ParamGrads(vec![Some(g)])))
        }
    }

    #[test]
    fn rounding_below_the_quantum_is_not_an_error() {
        let mut s = ParamStore::new();
        s.insert("w", DenseArray::new(vec![1], vec![0.3]).unwrap()).unwrap();
        let naive = {
            let (p, m) = (1.0 + 1e-9 * (0.3 + 1e-5), 1.0 + 1e-9 * (0.3 - 1e-5));
            relative_error(1e-9, (p - m) / 2e-5)
        };
        assert!(naive > 1e-6, "the plain ratio is rounding-limited here: {naive}");
        let r = grad_check(tiny_slope(1.0), &mut s, 1e-5).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
        let r = grad_check(tiny_slope(1.5), &mut s, 1e-5).unwrap();
        assert!(r.max_rel_error > 1e-2, "{r:?}");
    }

    #[test]
    fn zero_step_is_rejected() {
        let mut s = affine_store();
        assert!(matches!(grad_check(affine_loss, &mut s, 0.0), Err(Error::Argument(_))));
    }

    #[test]
    fn non_finite_loss_is_rejected() {
        let mut s = affine_store();
        let r = grad_check(|_| Ok((f64::NAN, ParamGrads::default())), &mut s, 1e-5);
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    #[test]
    fn store_is_restored() {
        let mut s = affine_store();
        let before = s.value("w").unwrap().clone();
        grad_check(affine_loss, &mut s, 1e-3).unwrap();
        assert_eq!(s.value("w").unwrap(), &before);
    }
}
