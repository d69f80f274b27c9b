//! Central-difference gradient checking.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// `|a - n| / max(1e-12, |a| + |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-12)
}

/// Central differences with `eps = 1e-6` on values of order one resolve
/// derivatives only down to about `ulp(f) / (2·eps) ≈ 2e-10`; entries whose
/// analytic and numeric magnitudes sum below this floor are compared
/// absolutely instead of relatively.
pub const GRAD_NOISE_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Absolute accuracy of the numeric derivative, `ε_mach · max|f| / eps`.
    pub resolution: f64,
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

impl GradCheckReport {
    fn pairs(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.analytic
            .iter()
            .zip(&self.numeric)
            .flat_map(|(a, n)| a.data().iter().copied().zip(n.data().iter().copied()))
    }

    /// Max relative error over entries with `|a| + |n| >= floor`.
    ///
    /// Directions along which the function is exactly flat (a bias under a
    /// softmax, a dead ReLU) have a numeric derivative of exactly zero and an
    /// analytic one of rounding size, which the plain relative error reports
    /// as a large mismatch.
    pub fn max_relative_error_above(&self, floor: f64) -> f64 {
        self.pairs()
            .filter(|(a, n)| a.abs() + n.abs() >= floor)
            .map(|(a, n)| relative_error(a, n))
            .fold(0.0, f64::max)
    }

    /// Max of `|a - n| / max(|a| + |n|, resolution / tol)`.
    ///
    /// Relative error wherever central differences can resolve a relative
    /// accuracy of `tol`; below that, the mismatch is measured against the
    /// numeric resolution itself, so a result under `tol` means every entry
    /// agrees relatively or to within `resolution`.
    pub fn max_resolved_error(&self, tol: f64) -> f64 {
        let floor = self.resolution / tol;
        self.pairs()
            .map(|(a, n)| (a - n).abs() / (a.abs() + n.abs()).max(floor).max(1e-300))
            .fold(0.0, f64::max)
    }

    /// Max `|a - n|` over entries with `|a| + |n| < floor`.
    pub fn max_abs_error_below(&self, floor: f64) -> f64 {
        self.pairs()
            .filter(|(a, n)| a.abs() + n.abs() < floor)
            .map(|(a, n)| (a - n).abs())
            .fold(0.0, f64::max)
    }
}

/// Compares the tape gradient of a scalar function of several inputs
/// against central differences with step `eps`.
pub fn grad_check_many<F>(f: F, points: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |pts: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = pts.iter().map(|p| tape.constant(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(points)
        .map(|(v, p)| tape.grad(*v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();

    let mut numeric = Vec::with_capacity(points.len());
    let mut work: Vec<Tensor> = points.to_vec();
    let mut max_err: f64 = 0.0;
    let mut max_f: f64 = 0.0;
    for k in 0..points.len() {
        let mut num = Tensor::zeros(points[k].shape());
        for i in 0..points[k].len() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + eps;
            let up = eval(&work)?;
            work[k].data_mut()[i] = orig - eps;
            let down = eval(&work)?;
            work[k].data_mut()[i] = orig;
            max_f = max_f.max(up.abs()).max(down.abs());
            let n = (up - down) / (2.0 * eps);
            num.data_mut()[i] = n;
            max_err = max_err.max(relative_error(analytic[k].data()[i], n));
        }
        numeric.push(num);
    }
    Ok(GradCheckReport {
        max_relative_error: max_err,
        resolution: f64::EPSILON * max_f / eps,
        analytic,
        numeric,
    })
}

/// Single-input form of [`grad_check_many`]; returns the max relative error.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let report = grad_check_many(|t, vs| f(t, vs[0]), std::slice::from_ref(point), eps)?;
    Ok(report.max_relative_error)
}
