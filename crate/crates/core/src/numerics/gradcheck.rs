use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Where the largest disagreement between autodiff and finite differences was
/// found.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Denominator floor for the relative error; keeps entries whose true
/// gradient is ~0 from turning finite-difference round-off into huge ratios.
const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out);
    if value.numel() != 1 {
        return Err(Error::shape("grad_check", "scalar output", value.numel()));
    }
    let v = value.data()[0];
    if !v.is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    Ok(v)
}

/// Compares reverse-mode gradients of the scalar function `f` against central
/// finite differences `(f(w+h) − f(w−h)) / 2h` for every entry of every
/// parameter with `requires_grad`. The autodiff gradients are written back into
/// each parameter's `grad` buffer.
pub fn grad_check<F>(f: F, params: &mut [Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::Config(format!("finite-difference step must be > 0, got {h}")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::shape("grad_check", "scalar output", tape.value(out).numel()));
    }
    if !tape.value(out).is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    let mut grads = tape.backward(out)?;
    for (p, v) in params.iter_mut().zip(&vars) {
        if p.requires_grad() {
            let g = grads.take(*v).unwrap_or_else(|| vec![0.0; p.numel()]);
            p.set_grad(g)?;
        }
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        param: 0,
        index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for pi in 0..params.len() {
        if !params[pi].requires_grad() {
            continue;
        }
        for i in 0..params[pi].numel() {
            let original = params[pi].data()[i];
            params[pi].data_mut()[i] = original + h;
            let plus = evaluate(&f, params);
            params[pi].data_mut()[i] = original - h;
            let minus = evaluate(&f, params);
            params[pi].data_mut()[i] = original;
            let numeric = (plus? - minus?) / (2.0 * h);
            let analytic = params[pi].grad().map_or(0.0, |g| g[i]);
            let err = relative_error(analytic, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.checked == 1 {
                report = GradCheckReport {
                    max_rel_error: err,
                    param: pi,
                    index: i,
                    analytic,
                    numeric,
                    checked: report.checked,
                };
            }
        }
    }
    Ok(report)
}
