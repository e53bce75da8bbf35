//! Central-difference verification of analytic gradients.

use super::{Scalar, Tape, Tensor, Var};
use crate::error::{shape_err, Error, Result};

/// Step size and relative-error threshold for one precision.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tolerance {
    pub step: f64,
    pub rel_tol: f64,
}

impl Tolerance {
    pub const F32: Tolerance = Tolerance { step: 1e-4, rel_tol: 1e-3 };
    pub const F64: Tolerance = Tolerance { step: 1e-6, rel_tol: 1e-5 };

    pub fn for_dtype<T: Scalar>() -> Tolerance {
        if T::DTYPE == "f64" {
            Self::F64
        } else {
            Self::F32
        }
    }
}

/// Denominator floor of the per-coordinate relative error.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Coordinate with the largest error.
    pub worst: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub tolerance: Tolerance,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance.rel_tol
    }
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Compares `analytic[i]` against `(f(+h) − f(−h)) / 2h` for the coordinate
/// `coords[i]`, where `eval(coord, delta)` evaluates the loss with that
/// coordinate shifted by `delta` and returns `(loss, shift actually applied)`;
/// the applied shift differs from `delta` once the coordinate is rounded to
/// its storage precision.
pub fn grad_check_coords(
    coords: &[usize],
    analytic: &[f64],
    tol: Tolerance,
    mut eval: impl FnMut(usize, f64) -> Result<(f64, f64)>,
) -> Result<GradCheckReport> {
    if coords.len() != analytic.len() {
        return Err(shape_err!("{} coordinates but {} analytic values", coords.len(), analytic.len()));
    }
    let mut numeric = Vec::with_capacity(coords.len());
    let mut max_rel_error = 0.0;
    let mut worst = 0;
    for (i, (&c, &a)) in coords.iter().zip(analytic).enumerate() {
        let (up, s_up) = eval(c, tol.step)?;
        let (down, s_down) = eval(c, -tol.step)?;
        let n = (up - down) / (s_up - s_down);
        if !n.is_finite() || !a.is_finite() {
            return Err(Error::NonFinite(format!("gradient at coordinate {c}")));
        }
        let e = relative_error(a, n);
        if e > max_rel_error {
            max_rel_error = e;
            worst = i;
        }
        numeric.push(n);
    }
    Ok(GradCheckReport {
        checked: coords.len(),
        max_rel_error,
        worst,
        analytic: analytic.to_vec(),
        numeric,
        tolerance: tol,
    })
}

/// Checks the gradient of a scalar-valued `f` at `x` over every coordinate.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, tol: Tolerance) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    if !x.all_finite() {
        return Err(Error::NonFinite("grad_check input".into()));
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let y = f(&mut tape, xv)?;
    if tape.value(y).len() != 1 {
        return Err(shape_err!("grad_check needs a scalar function, got shape {:?}", tape.shape(y)));
    }
    let grads = tape.backward(y)?;
    let analytic: Vec<f64> = match grads.get(xv) {
        Some(g) => g.data().iter().map(|v| v.as_f64()).collect(),
        None => vec![0.0; x.len()],
    };
    let coords: Vec<usize> = (0..x.len()).collect();
    grad_check_coords(&coords, &analytic, tol, |c, delta| {
        let mut xp = x.clone();
        let shifted = T::of(xp.data()[c].as_f64() + delta);
        let applied = shifted.as_f64() - xp.data()[c].as_f64();
        xp.data_mut()[c] = shifted;
        let mut tape = Tape::new();
        let v = tape.leaf(xp, true);
        let y = f(&mut tape, v)?;
        Ok((tape.value(y).item().as_f64(), applied))
    })
}

/// Checks the gradients of an `f32` function against central differences of
/// `reference`, the same function evaluated in `f64` at the same point.
/// Differences taken in `f32` itself carry rounding noise near `ε·|f|/h`,
/// which swamps small coordinates at `h = 1e-4`.
pub fn grad_check_reference<F, R>(f: F, reference: R, x: &Tensor<f32>, tol: Tolerance) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f32>, Var) -> Result<Var>,
    R: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    if !x.all_finite() {
        return Err(Error::NonFinite("grad_check input".into()));
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let y = f(&mut tape, xv)?;
    if tape.value(y).len() != 1 {
        return Err(shape_err!("grad_check needs a scalar function, got shape {:?}", tape.shape(y)));
    }
    let grads = tape.backward(y)?;
    let analytic: Vec<f64> = match grads.get(xv) {
        Some(g) => g.data().iter().map(|v| v.as_f64()).collect(),
        None => vec![0.0; x.len()],
    };
    let x64 = x.cast::<f64>();
    let coords: Vec<usize> = (0..x.len()).collect();
    grad_check_coords(&coords, &analytic, tol, |c, delta| {
        let mut xp = x64.clone();
        xp.data_mut()[c] += delta;
        let mut tape = Tape::new();
        let v = tape.leaf(xp, true);
        let y = reference(&mut tape, v)?;
        if tape.value(y).len() != 1 {
            return Err(shape_err!("reference function is not scalar"));
        }
        Ok((tape.value(y).item(), delta))
    })
}
