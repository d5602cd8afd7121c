//! Fake quantization with a clipped straight-through gradient.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::quantize::{fake_quantize_with_scales, solve_scale_max, QuantSpec};
use crate::scalar::Scalar;

/// Fake-quant operator for one weight matrix.
///
/// Every [`forward`](Self::forward) recomputes the group scales as
/// `max|group| / (2^(b-1) − 1)` and caches them for the backward pass.
#[derive(Clone, Debug)]
pub struct FakeQuantNode<T> {
    spec: QuantSpec,
    scales: Vec<T>,
}

impl<T: Scalar> FakeQuantNode<T> {
    pub fn new(spec: QuantSpec) -> Self {
        Self {
            spec,
            scales: Vec::new(),
        }
    }

    pub fn spec(&self) -> QuantSpec {
        self.spec
    }

    pub fn scales(&self) -> &[T] {
        &self.scales
    }

    /// Computes fresh scales from `w` and returns `dequantize(quantize(w))`.
    pub fn forward(&mut self, w: &Matrix<T>) -> Matrix<T> {
        let cols = w.cols();
        self.scales = self
            .spec
            .row_groups(w.rows())
            .into_iter()
            .map(|r| {
                solve_scale_max(&w.as_slice()[r.start * cols..r.end * cols], self.spec)
                    .unwrap_or(T::one())
            })
            .collect();
        fake_quantize_with_scales(w, self.spec, &self.scales)
            .expect("scales computed for this shape")
    }

    /// Fake-quantizes with the cached scales.
    pub fn forward_frozen(&self, w: &Matrix<T>) -> Result<Matrix<T>> {
        fake_quantize_with_scales(w, self.spec, &self.scales)
    }

    /// `true` where the forward pass did not clamp the element.
    pub fn pass_mask(&self, w: &Matrix<T>) -> Result<Vec<bool>> {
        let ranges = self.spec.row_groups(w.rows());
        if ranges.len() != self.scales.len() {
            return Err(Error::Empty("fake-quant scales (run forward first)"));
        }
        let cols = w.cols();
        let (lo, hi) = (self.spec.qmin() as f64, self.spec.qmax() as f64);
        let mut mask = Vec::with_capacity(w.len());
        for (range, &s) in ranges.into_iter().zip(&self.scales) {
            for &x in &w.as_slice()[range.start * cols..range.end * cols] {
                let q = (x / s).round().as_f64();
                mask.push(q >= lo && q <= hi);
            }
        }
        Ok(mask)
    }

    /// Straight-through gradient: `upstream` where not clamped, zero elsewhere.
    pub fn backward(&self, upstream: &Matrix<T>, w: &Matrix<T>) -> Result<Matrix<T>> {
        upstream.ensure_shape(w)?;
        let mask = self.pass_mask(w)?;
        let mut g = upstream.clone();
        for (x, keep) in g.as_mut_slice().iter_mut().zip(mask) {
            if !keep {
                *x = T::zero();
            }
        }
        Ok(g)
    }
}

pub fn fq_forward<T: Scalar>(w: &Matrix<T>, node: &mut FakeQuantNode<T>) -> Matrix<T> {
    node.forward(w)
}

pub fn fq_backward<T: Scalar>(
    upstream: &Matrix<T>,
    w: &Matrix<T>,
    node: &FakeQuantNode<T>,
) -> Result<Matrix<T>> {
    node.backward(upstream, w)
}

/// Per-tensor symmetric fake quantization of activations, scale = max |x|.
pub fn fake_quantize_activations<T: Scalar>(x: &Matrix<T>, bits: u32) -> Matrix<T> {
    let spec = QuantSpec::new(bits, 0).expect("activation bit width in range");
    match solve_scale_max(x.as_slice(), spec) {
        Ok(s) => fake_quantize_with_scales(x, spec, &[s]).expect("single scale"),
        Err(_) => x.clone(),
    }
}
