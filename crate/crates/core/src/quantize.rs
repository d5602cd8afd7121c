//! Symmetric group-wise integer quantization.
//!
//! A value is encoded as `code = clamp(round(x / s), -2^(b-1), 2^(b-1) - 1)`
//! and decoded as `s * code`. Rows (output neurons) are split into
//! consecutive groups that share one scale.

use std::fmt;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

/// Bit width and neurons-per-scale of a symmetric quantizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct QuantSpec {
    bits: u32,
    group_size: usize,
}

impl QuantSpec {
    /// `group_size == 0` shares a single scale across the whole matrix.
    pub fn new(bits: u32, group_size: usize) -> Result<Self> {
        if !(2..=16).contains(&bits) {
            return Err(Error::InvalidBits(bits));
        }
        Ok(Self { bits, group_size })
    }

    #[inline]
    pub fn bits(&self) -> u32 {
        self.bits
    }

    #[inline]
    pub fn group_size(&self) -> usize {
        self.group_size
    }

    /// Largest positive code, `2^(b-1) - 1`.
    #[inline]
    pub fn qmax(&self) -> i32 {
        (1 << (self.bits - 1)) - 1
    }

    /// Most negative code, `-2^(b-1)`.
    #[inline]
    pub fn qmin(&self) -> i32 {
        -(1 << (self.bits - 1))
    }

    /// Row ranges sharing one scale in a matrix with `rows` rows.
    pub fn row_groups(&self, rows: usize) -> Vec<std::ops::Range<usize>> {
        let step = if self.group_size == 0 {
            rows
        } else {
            self.group_size
        };
        (0..rows)
            .step_by(step.max(1))
            .map(|s| s..(s + step).min(rows))
            .collect()
    }

    pub fn num_groups(&self, rows: usize) -> usize {
        if self.group_size == 0 {
            1
        } else {
            rows.div_ceil(self.group_size)
        }
    }
}

/// How a group's scale is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum ScaleSolver {
    /// Largest magnitude maps exactly onto the largest positive code.
    #[default]
    Max,
    /// Scale minimizing the squared reconstruction error of the group.
    Dist,
}

impl fmt::Display for ScaleSolver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScaleSolver::Max => "max",
            ScaleSolver::Dist => "dist",
        })
    }
}

/// Codes and scale of one row group, codes in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedGroup<T> {
    pub scale: T,
    pub codes: Vec<i32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedMatrix<T> {
    pub groups: Vec<QuantizedGroup<T>>,
    /// `scale * code` for every element (the fake-quantized matrix).
    pub dequantized: Matrix<T>,
}

impl<T: Scalar> QuantizedMatrix<T> {
    pub fn scales(&self) -> Vec<T> {
        self.groups.iter().map(|g| g.scale).collect()
    }
}

#[inline]
pub(crate) fn code_of<T: Scalar>(x: T, s: T, spec: QuantSpec) -> i32 {
    // `round` is half-away-from-zero.
    let q = (x / s).round().as_f64();
    q.clamp(spec.qmin() as f64, spec.qmax() as f64) as i32
}

/// Encodes one value. Fails on a non-positive or non-finite scale.
pub fn quantize_value<T: Scalar>(x: T, s: T, spec: QuantSpec) -> Result<i32> {
    if !(s > T::zero()) || !s.is_finite() {
        return Err(Error::NonPositiveScale(s.as_f64()));
    }
    Ok(code_of(x, s, spec))
}

#[inline]
pub fn dequantize_value<T: Scalar>(code: i32, s: T) -> T {
    s * T::from_i64_exact(code as i64)
}

/// Squared reconstruction error `Σ (s·q(x) − x)²` of a group, in `f64`.
pub fn quant_error<T: Scalar>(group: &[T], s: T, spec: QuantSpec) -> f64 {
    group
        .iter()
        .map(|&x| {
            let d = dequantize_value(code_of(x, s, spec), s).as_f64() - x.as_f64();
            d * d
        })
        .sum()
}

fn max_abs<T: Scalar>(group: &[T]) -> Result<T> {
    if group.is_empty() {
        return Err(Error::Empty("quantization group"));
    }
    let m = group.iter().fold(T::zero(), |m, x| m.max(x.abs()));
    if m == T::zero() {
        return Err(Error::ZeroGroup);
    }
    Ok(m)
}

/// ADMM-Max scale: `max|x| / (2^(b-1) − 1)`.
pub fn solve_scale_max<T: Scalar>(group: &[T], spec: QuantSpec) -> Result<T> {
    let m = max_abs(group)?;
    Ok(m / T::from_i64_exact(spec.qmax() as i64))
}

/// ADMM-Dist scale: the global minimizer of the squared reconstruction error.
///
/// With codes held fixed the error is the quadratic `A − 2sB + s²C`, and the
/// codes only change at the breakpoints `s = |x| / (j − ½)`. Sweeping the
/// breakpoints in decreasing order and minimizing each quadratic piece in
/// closed form gives the exact optimum. The result is never worse than
/// [`solve_scale_max`] on the same group.
pub fn solve_scale_dist<T: Scalar>(group: &[T], spec: QuantSpec) -> Result<T> {
    let s_max = solve_scale_max(group, spec)?;
    let err_max = quant_error(group, s_max, spec);

    let qmax = spec.qmax() as f64;
    let a_max = group.iter().map(|x| x.as_f64().abs()).fold(0.0, f64::max);
    let cap_of = |x: f64| if x < 0.0 { qmax + 1.0 } else { qmax };
    // Below `s_lo` the clamped largest element alone costs more than the
    // ADMM-Max solution, so no breakpoint there can be optimal.
    let cap_top = group
        .iter()
        .map(|x| x.as_f64())
        .filter(|x| x.abs() == a_max)
        .map(cap_of)
        .fold(0.0, f64::max);
    let s_lo = ((a_max - err_max.sqrt()) / cap_top).max(0.0);

    let mut events: Vec<(f64, f64, f64)> = Vec::new();
    let mut total_sq = 0.0;
    for &x in group {
        let x = x.as_f64();
        let a = x.abs();
        total_sq += a * a;
        if a == 0.0 {
            continue;
        }
        let cap = cap_of(x);
        let mut j = 1.0;
        while j <= cap {
            let s = a / (j - 0.5);
            if s < s_lo {
                break;
            }
            events.push((s, a, j));
            j += 1.0;
        }
    }
    events.sort_by(|p, q| q.0.total_cmp(&p.0));

    let (mut b, mut c) = (0.0f64, 0.0f64);
    let mut best = (total_sq, s_max.as_f64());
    let mut i = 0;
    while i < events.len() {
        let s_hi = events[i].0;
        while i < events.len() && events[i].0 == s_hi {
            let (_, a, j) = events[i];
            b += a;
            c += 2.0 * j - 1.0;
            i += 1;
        }
        let s_lo_piece = if i < events.len() { events[i].0 } else { s_lo };
        let s = (b / c).clamp(s_lo_piece, s_hi);
        if s <= 0.0 {
            continue;
        }
        let obj = total_sq - 2.0 * s * b + s * s * c;
        if obj < best.0 {
            best = (obj, s);
        }
    }

    let candidate = T::from_f64_lossy(best.1);
    if candidate > T::zero()
        && candidate.is_finite()
        && quant_error(group, candidate, spec) < err_max
    {
        Ok(candidate)
    } else {
        Ok(s_max)
    }
}

/// Solves a group's scale, treating an all-zero group as scale 1.
pub(crate) fn group_scale<T: Scalar>(
    group: &[T],
    spec: QuantSpec,
    solver: ScaleSolver,
) -> Result<T> {
    let r = match solver {
        ScaleSolver::Max => solve_scale_max(group, spec),
        ScaleSolver::Dist => solve_scale_dist(group, spec),
    };
    match r {
        Err(Error::ZeroGroup) => Ok(T::one()),
        other => other,
    }
}

/// Quantizes `w` group-wise, returning codes, scales and the dequantized matrix.
pub fn quantize_matrix<T: Scalar>(
    w: &Matrix<T>,
    spec: QuantSpec,
    solver: ScaleSolver,
) -> Result<QuantizedMatrix<T>> {
    let cols = w.cols();
    let mut groups = Vec::new();
    let mut dq = w.clone();
    for range in spec.row_groups(w.rows()) {
        let slice = &w.as_slice()[range.start * cols..range.end * cols];
        let scale = group_scale(slice, spec, solver)?;
        let codes: Vec<i32> = slice.iter().map(|&x| code_of(x, scale, spec)).collect();
        let out = &mut dq.as_mut_slice()[range.start * cols..range.end * cols];
        for (o, &q) in out.iter_mut().zip(&codes) {
            *o = dequantize_value(q, scale);
        }
        groups.push(QuantizedGroup { scale, codes });
    }
    Ok(QuantizedMatrix {
        groups,
        dequantized: dq,
    })
}

/// Fake-quantizes `w` with fixed per-group scales.
pub fn fake_quantize_with_scales<T: Scalar>(
    w: &Matrix<T>,
    spec: QuantSpec,
    scales: &[T],
) -> Result<Matrix<T>> {
    let ranges = spec.row_groups(w.rows());
    if ranges.len() != scales.len() {
        return Err(Error::DataLength {
            len: scales.len(),
            rows: ranges.len(),
            cols: 1,
        });
    }
    let cols = w.cols();
    let mut out = w.clone();
    for (range, &s) in ranges.into_iter().zip(scales) {
        if !(s > T::zero()) {
            return Err(Error::NonPositiveScale(s.as_f64()));
        }
        for x in &mut out.as_mut_slice()[range.start * cols..range.end * cols] {
            *x = dequantize_value(code_of(*x, s, spec), s);
        }
    }
    Ok(out)
}
