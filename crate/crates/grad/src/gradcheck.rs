use crate::error::{GradError, Result};
use crate::param::Parameter;
use crate::tensor::Tensor;

/// Floor on the denominator of [`relative_error`].
pub const REL_ERR_FLOOR: f64 = 1e-8;

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Number of scalar entries compared.
    pub checked: usize,
}

/// Compares reverse-mode gradients of `f` against central differences with step `h`
/// over every entry of every parameter.
///
/// `f` receives one tensor per parameter, in order, and must return a scalar.
pub fn grad_check<F>(params: &[Parameter], h: f64, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor]) -> Result<Tensor>,
{
    if !(h > 0.0) {
        return Err(GradError::Config {
            op: "grad_check",
            msg: format!("step must be > 0, got {h}"),
        });
    }
    let leaves: Vec<Tensor> = params.iter().map(Parameter::leaf).collect();
    let loss = f(&leaves)?;
    let base = loss.item()?;
    if !base.is_finite() {
        return Err(GradError::NonFinite {
            param: "<unperturbed>".into(),
            index: 0,
            value: base,
        });
    }
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.numel()]))
        .collect();
    drop(loss);
    drop(leaves);

    let mut values: Vec<Vec<f64>> = params.iter().map(|p| p.data.clone()).collect();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for pi in 0..params.len() {
        for ei in 0..params[pi].numel() {
            let orig = values[pi][ei];
            let mut eval = |x: f64, values: &mut Vec<Vec<f64>>| -> Result<f64> {
                values[pi][ei] = x;
                let inputs: Vec<Tensor> = params
                    .iter()
                    .zip(values.iter())
                    .map(|(p, v)| Tensor::raw(v.clone(), p.shape.clone(), false, None))
                    .collect();
                let v = f(&inputs)?.item()?;
                if !v.is_finite() {
                    return Err(GradError::NonFinite {
                        param: params[pi].name.clone(),
                        index: ei,
                        value: v,
                    });
                }
                Ok(v)
            };
            let plus = eval(orig + h, &mut values)?;
            let minus = eval(orig - h, &mut values)?;
            values[pi][ei] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[pi][ei];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_err || report.worst_param.is_empty() {
                report.max_rel_err = err;
                report.worst_param = params[pi].name.clone();
                report.worst_index = ei;
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
    use crate::ops;

    #[test]
    fn exact_quadratic() {
        let w = Parameter::new("w", &[1], vec![3.0]).unwrap();
        let r = grad_check(&[w], 1e-5, |t| Ok(ops::sum(&ops::mul(&t[0], &t[0])?))).unwrap();
        assert!(r.max_rel_err < 1e-8, "{r:?}");
        assert!((r.analytic - 6.0).abs() < 1e-15);
    }

    #[test]
    fn non_finite_forward_names_parameter() {
        let w = Parameter::new("bad_weight", &[1], vec![0.0]).unwrap();
        // exp(1e8 * h) overflows once perturbed.
        let err = grad_check(&[w], 1e-5, |t| {
            let y = ops::exp_clamped(&ops::scale(&t[0], 1e8), -1.0, 1e6)?;
            Ok(ops::sum(&y))
        })
        .unwrap_err();
        match err {
            GradError::NonFinite { param, .. } => assert_eq!(param, "bad_weight"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
