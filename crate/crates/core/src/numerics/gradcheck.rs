//! Central-difference verification of analytic gradients.

use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::{Error, Result};

/// Outcome of a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over checked entries of `|analytic - numeric| / max(1, |analytic|)`
    pub max_rel_error: f64,
    pub worst_param: Option<String>,
    pub worst_index: usize,
    pub entries_checked: usize,
}

/// Compares analytic parameter gradients of the scalar built by `f` against
/// central differences with step `h`, over every entry of every parameter.
pub fn check_gradients<F>(f: F, params: &ParamStore, h: f64) -> Result<f64>
where
    F: Fn(&Graph, &ParamStore) -> Result<Var>,
{
    Ok(check_gradients_sampled(f, params, h, usize::MAX)?.max_rel_error)
}

/// Like [`check_gradients`] but visits at most `per_param` evenly spaced entries of each parameter.
pub fn check_gradients_sampled<F>(
    f: F,
    params: &ParamStore,
    h: f64,
    per_param: usize,
) -> Result<GradCheckReport>
where
    F: Fn(&Graph, &ParamStore) -> Result<Var>,
{
    let eval = |store: &ParamStore| -> Result<f64> {
        let g = Graph::new();
        let out = f(&g, store)?;
        g.check()?;
        let v = g.value(out);
        if !v.is_scalar() {
            return Err(Error::Shape(format!(
                "gradient check needs a scalar function, got {:?}",
                v.shape()
            )));
        }
        Ok(v.item())
    };

    let base = eval(params)?;
    if eval(params)?.to_bits() != base.to_bits() {
        return Err(Error::NonDeterministic);
    }

    let mut analytic = params.clone();
    {
        let g = Graph::new();
        let out = f(&g, &analytic)?;
        analytic.backward(&g, out)?;
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: None,
        worst_index: 0,
        entries_checked: 0,
    };
    let mut probe = params.clone();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let n = params.value(&name).map_or(0, |t| t.len());
        let stride = n.div_ceil(per_param.max(1)).max(1);
        for i in (0..n).step_by(stride) {
            let x0 = params.value(&name).unwrap().data()[i];
            probe.value_mut(&name).unwrap().data_mut()[i] = x0 + h;
            let plus = eval(&probe)?;
            probe.value_mut(&name).unwrap().data_mut()[i] = x0 - h;
            let minus = eval(&probe)?;
            probe.value_mut(&name).unwrap().data_mut()[i] = x0;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.grad(&name).unwrap().data()[i];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            report.entries_checked += 1;
            if err > report.max_rel_error || report.worst_param.is_none() {
                report.max_rel_error = err;
                report.worst_param = Some(name.clone());
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use std::cell::Cell;

    #[test]
    fn quadratic_form_is_exact() {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::new(&[3], vec![0.3, -1.2, 2.0]).unwrap());
        let a = Tensor::new(&[3, 3], vec![2.0, 0.5, 0.0, 0.5, 3.0, -1.0, 0.0, -1.0, 4.0]).unwrap();
        let err = check_gradients(
            |g, s| {
                let x = g.reshape(g.param(s, "x"), &[1, 3]);
                let ax = g.matmul(x, g.constant(a.clone()));
                Ok(g.sum(g.mul(ax, x)))
            },
            &s,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::full(&[2], 1.0));
        let err = check_gradients(|g, _| Ok(g.constant_scalar(4.0)), &s, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn nondeterminism_is_detected() {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::full(&[1], 1.0));
        let calls = Cell::new(0.0);
        let r = check_gradients(
            |g, s| {
                calls.set(calls.get() + 1.0);
                let x = g.param(s, "x");
                Ok(g.sum(g.affine(x, 1.0, calls.get())))
            },
            &s,
            1e-5,
        );
        assert!(matches!(r, Err(Error::NonDeterministic)));
    }
}
