//! Central finite-difference verification of analytic gradients.

use serde::Serialize;

use super::graph::{Graph, Var};
use super::params::ParamSet;
use crate::error::{Error, Result};

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub numel: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |numeric|)` over every checked entry.
    pub max_rel_error: f64,
    /// Parameter name and flat index where the maximum occurred.
    pub worst: Option<(String, usize)>,
    pub per_param: Vec<ParamCheck>,
    pub entries_checked: usize,
}

fn eval<F>(f: &F, params: &ParamSet) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamSet) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, params)?;
    let t = g.value(loss);
    if !t.is_scalar() {
        return Err(Error::shape("finite_difference_check", format!("loss has shape {:?}", t.shape())));
    }
    Ok(t.item())
}

/// Compares the analytic gradient of `f` against central differences with
/// step `h`, over every entry of every `requires_grad` parameter.
///
/// `f` must build the same computation each time it is called. Existing
/// gradients in `params` are cleared.
pub fn finite_difference_check<F>(f: F, params: &mut ParamSet, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamSet) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step h = {h} must be positive")));
    }
    params.zero_grad();
    let mut g = Graph::new();
    let loss = f(&mut g, params)?;
    if let Some(i) = g.value(loss).data().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { what: "loss".into(), index: i });
    }
    g.backward(loss, params)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        per_param: Vec::new(),
        entries_checked: 0,
    };
    let ids: Vec<_> = params.ids().filter(|&id| params.by_id(id).requires_grad).collect();
    for id in ids {
        let name = params.name(id).to_string();
        let numel = params.by_id(id).numel();
        let analytic = params.by_id(id).grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; numel]);
        let mut worst = 0.0f64;
        for i in 0..numel {
            let orig = params.by_id(id).data()[i];
            params.by_id_mut(id).data_mut()[i] = orig + h;
            let up = eval(&f, params);
            params.by_id_mut(id).data_mut()[i] = orig - h;
            let down = eval(&f, params);
            params.by_id_mut(id).data_mut()[i] = orig;
            let (up, down) = (up?, down?);
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::NonFinite { what: name, index: i });
            }
            let numeric = (up - down) / (2.0 * h);
            let rel = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
            if rel > worst {
                worst = rel;
            }
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((name.clone(), i));
            }
        }
        report.entries_checked += numel;
        report.per_param.push(ParamCheck {
            name,
            numel,
            max_rel_error: worst,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_is_exact() {
        let mut p = ParamSet::new();
        p.insert("x", Tensor::from_vec(vec![0.3, -1.2, 2.5]).with_requires_grad(true));
        let r = finite_difference_check(
            |g, p| {
                let x = g.param_named(p, "x")?;
                let sq = g.mul(x, x)?;
                let s = g.scale(sq, 1.7);
                Ok(g.sum(s))
            },
            &mut p,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-9, "{}", r.max_rel_error);
        assert_eq!(r.entries_checked, 3);
    }

    #[test]
    fn rejects_bad_step_and_reports_non_finite() {
        let mut p = ParamSet::new();
        p.insert("x", Tensor::from_vec(vec![1.0, 0.0]).with_requires_grad(true));
        let f = |g: &mut Graph, p: &ParamSet| {
            let x = g.param_named(p, "x")?;
            Ok(g.sum(x))
        };
        assert!(finite_difference_check(f, &mut p, 0.0).is_err());
        let blowup = |g: &mut Graph, p: &ParamSet| {
            let x = g.param_named(p, "x")?;
            let v = g.value(x).data()[1];
            let s = g.scale(x, if v != 0.0 { f64::INFINITY } else { 1.0 });
            Ok(g.sum(s))
        };
        match finite_difference_check(blowup, &mut p, 1e-5) {
            Err(Error::NonFinite { what, index }) => assert_eq!((what.as_str(), index), ("x", 1)),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }
}
