use super::{BoundParams, ParamSet, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over elements of `|a - n| / max(|a|, |n|, 1e-8)`.
    pub max_rel_error: f64,
    /// Parameter name and flat element index where the maximum occurred.
    pub worst: Option<(String, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub elements: usize,
}

fn eval_loss<F>(params: &ParamSet<f64>, f: &F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &BoundParams) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let loss = f(&mut tape, &bound)?;
    let v = tape.value(loss);
    if !v.is_scalar() {
        return Err(Error::Contract("grad_check objective must be scalar".into()));
    }
    Ok(v.data()[0])
}

/// Compares tape gradients of `f` against central finite differences for
/// every element of every parameter.
pub fn grad_check<F>(params: &ParamSet<f64>, eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &BoundParams) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::Contract(format!(
            "grad_check eps {eps} outside [1e-6, 1e-3]"
        )));
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let loss = f(&mut tape, &bound)?;
    let base = tape.value(loss).data()[0];
    if !base.is_finite() {
        return Err(Error::NonFinite("grad_check objective at base point".into()));
    }
    let mut grads = tape.backward(loss)?;

    let mut analytic = Vec::with_capacity(params.len());
    for (name, _) in params.iter() {
        let v = bound.get(name)?;
        let g = grads
            .take(v)
            .ok_or_else(|| Error::Contract(format!("no gradient for `{name}`")))?;
        analytic.push(g.into_data());
    }

    let mut work = params.clone();
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        elements: 0,
    };
    for (pi, name) in names.iter().enumerate() {
        let len = params.require(name)?.numel();
        for e in 0..len {
            let orig = params.require(name)?.data()[e];
            work.get_mut(name).unwrap().data_mut()[e] = orig + eps;
            let plus = eval_loss(&work, &f)?;
            work.get_mut(name).unwrap().data_mut()[e] = orig - eps;
            let minus = eval_loss(&work, &f)?;
            work.get_mut(name).unwrap().data_mut()[e] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "grad_check objective when perturbing `{name}`[{e}]"
                )));
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[pi][e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.elements += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), e));
                report.analytic = a;
                report.numeric = numeric;
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
    fn quadratic_is_exact() {
        let mut params = ParamSet::new();
        params.insert("theta", Tensor::from_f64([3], &[0.7, -1.3, 2.1]).unwrap());
        let report = grad_check(&params, 1e-4, |tape, p| {
            let th = p.get("theta")?;
            let sq = tape.mul(th, th)?;
            let s = tape.sum(sq);
            Ok(tape.scale(s, 1.5))
        })
        .unwrap();
        assert!(report.max_rel_error <= 1e-9, "{report:?}");
        assert_eq!(report.elements, 3);
    }

    #[test]
    fn rejects_eps_out_of_range() {
        let mut params = ParamSet::new();
        params.insert("x", Tensor::from_f64([1], &[1.0]).unwrap());
        let err = grad_check(&params, 1e-1, |tape, p| Ok(tape.sum(p.get("x")?))).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn non_finite_names_parameter() {
        let mut params = ParamSet::new();
        params.insert("ok", Tensor::from_f64([1], &[1.0]).unwrap());
        params.insert("blowup", Tensor::from_f64([1], &[0.0]).unwrap());
        // Finite at the base point; overflows once `blowup` moves off zero.
        let err = grad_check(&params, 1e-4, |tape, p| {
            let r = tape.mul(p.get("blowup")?, p.get("ok")?)?;
            let big = tape.scale(r, 1e308);
            let sq = tape.mul(big, big)?;
            Ok(tape.sum(sq))
        })
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert!(err.to_string().contains("`blowup`"), "{err}");
    }
}
