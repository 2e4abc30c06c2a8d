//! Central finite differences, used as the independent oracle for every
//! analytic gradient in the crate.

use crate::error::{AwiError, Result};
use crate::tensor::Tensor;

/// An ordered collection of parameter tensors.
///
/// The order of `tensors` and `tensors_mut` must agree.
pub trait ParamSet {
    fn tensors(&self) -> Vec<&Tensor>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    fn num_elements(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

impl ParamSet for Vec<Tensor> {
    fn tensors(&self) -> Vec<&Tensor> {
        self.iter().collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.iter_mut().collect()
    }
}

/// `(f(θ+ε) − f(θ−ε)) / 2ε` for every element of every tensor in `params`.
///
/// `params` is perturbed in place and restored bit-exactly afterwards.
pub fn finite_diff_gradient<P, F>(params: &mut P, step: f64, mut f: F) -> Result<Vec<Tensor>>
where
    P: ParamSet,
    F: FnMut(&P) -> Result<f64>,
{
    if step.is_nan() || step <= 0.0 {
        return Err(AwiError::Domain(format!(
            "finite-difference step must be > 0, got {step}"
        )));
    }
    let shapes: Vec<(usize, usize)> = params.tensors().iter().map(|t| t.shape()).collect();
    let mut grads = Vec::with_capacity(shapes.len());
    for (ti, &(rows, cols)) in shapes.iter().enumerate() {
        let mut g = Tensor::zeros(rows, cols);
        for ei in 0..rows * cols {
            let original = params.tensors()[ti].data()[ei];
            params.tensors_mut()[ti].data_mut()[ei] = original + step;
            let plus = f(params);
            params.tensors_mut()[ti].data_mut()[ei] = original - step;
            let minus = f(params);
            params.tensors_mut()[ti].data_mut()[ei] = original;
            let (plus, minus) = (plus?, minus?);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(AwiError::Numeric(format!(
                    "objective is non-finite at tensor {ti} element {ei}: f+ = {plus}, f- = {minus}"
                )));
            }
            g.data_mut()[ei] = (plus - minus) / (2.0 * step);
        }
        grads.push(g);
    }
    Ok(grads)
}

/// `|a − b| / max(|a|, |b|, floor)`.
///
/// The floor keeps elements whose true gradient is zero (or below the
/// finite-difference noise level) from reporting huge relative errors.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Largest element-wise [`relative_error`] over two aligned tensor lists,
/// with the location `(tensor index, element index)` where it occurs.
pub fn max_relative_error(a: &[Tensor], b: &[Tensor], floor: f64) -> (f64, usize, usize) {
    assert_eq!(a.len(), b.len(), "gradient lists differ in length");
    let mut worst = (0.0, 0, 0);
    for (ti, (ta, tb)) in a.iter().zip(b).enumerate() {
        assert_eq!(ta.shape(), tb.shape(), "gradient {ti} shape mismatch");
        for (ei, (x, y)) in ta.data().iter().zip(tb.data()).enumerate() {
            let e = relative_error(*x, *y, floor);
            if e > worst.0 {
                worst = (e, ti, ei);
            }
        }
    }
    worst
}
