use super::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Gradients smaller than this are compared on an absolute scale.
const MAGNITUDE_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Flat index in `x` where the worst error occurred.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// `|a - n| / max(|a|, |n|)`, with tiny magnitudes compared absolutely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences with step `h`. `indices` restricts the check to a subset of
/// coordinates of `x` (all of them when `None`).
pub fn grad_check<E, F>(
    f: F,
    x: &Tensor<E>,
    h: f64,
    tolerance: f64,
    indices: Option<&[usize]>,
) -> Result<GradCheckReport>
where
    E: Scalar,
    F: Fn(&Tape<E>, &Var<E>) -> Result<Var<E>>,
{
    let tape = Tape::new();
    let leaf = tape.leaf(x.clone(), true);
    let loss = f(&tape, &leaf)?;
    tape.backward(&loss)?;
    let grad = leaf.grad().map(|g| g.clone()).ok_or_else(|| {
        Error::InvalidArgument("gradient was not populated".to_string())
    })?;

    let all: Vec<usize>;
    let indices = match indices {
        Some(ix) => ix,
        None => {
            all = (0..x.numel()).collect();
            &all
        }
    };
    let eval = |t: Tensor<E>| -> Result<f64> {
        let tape = Tape::no_grad();
        let v = tape.constant(t);
        Ok(f(&tape, &v)?.value().item().as_f64())
    };

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: Vec::with_capacity(indices.len()),
        numeric: Vec::with_capacity(indices.len()),
        tolerance,
    };
    for &i in indices {
        let mut plus = x.clone();
        plus.data_mut()[i] = plus.data()[i] + E::lit(h);
        let mut minus = x.clone();
        minus.data_mut()[i] = minus.data()[i] - E::lit(h);
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let analytic = grad.data()[i].as_f64();
        let err = relative_error(analytic, numeric);
        if err > report.max_rel_error || report.checked == 0 {
            report.max_rel_error = err;
            report.worst_index = i;
        }
        report.analytic.push(analytic);
        report.numeric.push(numeric);
        report.checked += 1;
    }
    Ok(report)
}
