use super::{ParamStore, Real, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub entries: usize,
}

/// Compares tape gradients of a scalar objective against central finite
/// differences for every parameter entry. The relative error of one entry
/// is `|ga - gn| / max(1e-8, |ga| + |gn|)`.
pub fn grad_check<T, F>(store: &mut ParamStore<T>, eps: f64, objective: F) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&ParamStore<T>, &mut Tape<T>) -> Result<Var>,
{
    let eval = |store: &ParamStore<T>| -> Result<f64> {
        let mut tape = Tape::new();
        let out = objective(store, &mut tape)?;
        let v = tape.value(out).data()[0].as_f64();
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("objective value {v}")));
        }
        Ok(v)
    };

    store.zero_grad();
    let mut tape = Tape::new();
    let out = objective(store, &mut tape)?;
    tape.backward(out, store)?;
    let analytic: Vec<Vec<f64>> = store
        .iter()
        .map(|p| p.grad.data().iter().map(|g| g.as_f64()).collect())
        .collect();
    if analytic.iter().flatten().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("analytic gradient".into()));
    }

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        entries: 0,
    };
    let names: Vec<String> = store.iter().map(|p| p.name.clone()).collect();
    for (pi, name) in names.iter().enumerate() {
        let id = store.id(name).expect("known name");
        for j in 0..store.value(id).len() {
            let orig = store.value(id).data()[j];
            store.get_mut(id).value.data_mut()[j] = orig + T::lit(eps);
            let plus = eval(store);
            store.get_mut(id).value.data_mut()[j] = orig - T::lit(eps);
            let minus = eval(store);
            store.get_mut(id).value.data_mut()[j] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let ga = analytic[pi][j];
            let rel = (ga - numeric).abs() / f64::max(1e-8, ga.abs() + numeric.abs());
            report.entries += 1;
            if rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst = Some((name.clone(), j));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_objective() {
        let mut store = ParamStore::<f64>::new();
        let x = store
            .add("x", Tensor::vector(vec![0.3, -1.2, 2.0, 0.01]))
            .unwrap();
        let r = grad_check(&mut store, 1e-3, |s, t| {
            let v = t.param(s, x);
            Ok(t.half_squared_norm(v))
        })
        .unwrap();
        assert!(r.max_relative_error < 1e-6, "{r:?}");
        assert_eq!(r.entries, 4);
        // analytic gradient of the quadratic is x itself
        assert_eq!(store.get(x).grad.data(), &[0.3, -1.2, 2.0, 0.01]);
    }

    #[test]
    fn mask_scales_gradient() {
        let mut store = ParamStore::<f64>::new();
        let x = store.add("x", Tensor::vector(vec![0.5, -0.7, 1.1])).unwrap();
        let r = grad_check(&mut store, 1e-5, |s, t| {
            let v = t.param(s, x);
            let m = t.mask(v, Tensor::vector(vec![2.0, 0.0, 1.0]))?;
            Ok(t.half_squared_norm(m))
        })
        .unwrap();
        assert!(r.max_relative_error < 1e-6, "{r:?}");
        assert_eq!(store.get(x).grad.data(), &[2.0, 0.0, 1.1]);
    }

    #[test]
    fn no_parameters_gives_zero_error() {
        let mut store = ParamStore::<f64>::new();
        let r = grad_check(&mut store, 1e-3, |_, t| {
            Ok(t.constant(Tensor::scalar(1.5)))
        })
        .unwrap();
        assert_eq!(r.max_relative_error, 0.0);
        assert_eq!(r.entries, 0);
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let mut store = ParamStore::<f64>::new();
        let x = store.add("x", Tensor::vector(vec![1.0])).unwrap();
        let r = grad_check(&mut store, 1e-3, |s, t| {
            let v = t.param(s, x);
            t.dot_with(v, Tensor::vector(vec![f64::NAN]))
        });
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
