//! Euclidean projection onto the joint sparsity × quantization constraint,
//! and the matching feasibility check.

use std::fmt;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::quantize::{code_of, dequantize_value, quantize_matrix, QuantSpec, ScaleSolver};
use crate::scalar::Scalar;
use crate::sparsify::{nxm_project, NxMMask, NxMPattern};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct QuantConstraint {
    pub spec: QuantSpec,
    pub solver: ScaleSolver,
}

/// Sparsity pattern, quantizer, or both.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConstraintSet {
    sparsity: Option<NxMPattern>,
    quant: Option<QuantConstraint>,
}

impl ConstraintSet {
    pub fn new(sparsity: Option<NxMPattern>, quant: Option<QuantConstraint>) -> Result<Self> {
        if sparsity.is_none() && quant.is_none() {
            return Err(Error::EmptyConstraint);
        }
        Ok(Self { sparsity, quant })
    }

    pub fn sparse(p: NxMPattern) -> Self {
        Self {
            sparsity: Some(p),
            quant: None,
        }
    }

    pub fn quant(spec: QuantSpec, solver: ScaleSolver) -> Self {
        Self {
            sparsity: None,
            quant: Some(QuantConstraint { spec, solver }),
        }
    }

    pub fn fused(p: NxMPattern, spec: QuantSpec, solver: ScaleSolver) -> Self {
        Self {
            sparsity: Some(p),
            quant: Some(QuantConstraint { spec, solver }),
        }
    }

    pub fn sparsity(&self) -> Option<NxMPattern> {
        self.sparsity
    }

    pub fn quantizer(&self) -> Option<QuantConstraint> {
        self.quant
    }

    /// Same set with the quantizer dropped, if a sparsity pattern remains.
    pub fn sparsity_only(&self) -> Option<Self> {
        self.sparsity.map(Self::sparse)
    }

    pub fn check_cols(&self, cols: usize) -> Result<()> {
        if let Some(p) = self.sparsity {
            p.check_cols(cols)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projection<T> {
    pub value: Matrix<T>,
    pub mask: Option<NxMMask>,
    pub scales: Option<Vec<T>>,
}

/// Projects `v` onto `c`: N:M sparsification first, then group quantization
/// of the sparsified matrix. Zeroed elements stay at code 0.
pub fn euclidean_project<T: Scalar>(v: &Matrix<T>, c: &ConstraintSet) -> Result<Projection<T>> {
    c.check_cols(v.cols())?;
    let (sparse, mask) = match c.sparsity {
        Some(p) => {
            let (s, m) = nxm_project(v, p)?;
            (s, Some(m))
        }
        None => (v.clone(), None),
    };
    match c.quant {
        Some(q) => {
            let qm = quantize_matrix(&sparse, q.spec, q.solver)?;
            let scales = qm.scales();
            Ok(Projection {
                value: qm.dequantized,
                mask,
                scales: Some(scales),
            })
        }
        None => Ok(Projection {
            value: sparse,
            mask,
            scales: None,
        }),
    }
}

/// First constraint violation found by [`satisfies`].
#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    Shape {
        cols: usize,
        n: usize,
    },
    Sparsity {
        row: usize,
        group: usize,
        nonzeros: usize,
        allowed: usize,
    },
    /// No scale in the group puts every element on the integer grid.
    OffGrid {
        first_row: usize,
        row: usize,
        col: usize,
        value: f64,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Shape { cols, n } => write!(f, "{cols} columns not divisible by group length {n}"),
            Violation::Sparsity { row, group, nonzeros, allowed } => write!(
                f,
                "row {row} group {group} has {nonzeros} nonzeros (at most {allowed} allowed)"
            ),
            Violation::OffGrid { first_row, row, col, value } => write!(
                f,
                "element ({row}, {col}) = {value} is off the integer grid of the scale group starting at row {first_row}"
            ),
        }
    }
}

/// Recovers a scale and codes that reproduce `group` as `scale * code`.
///
/// With `exact`, reconstruction must be bit-identical; otherwise each ratio
/// `x / s` must lie within a few ulps of an integer. Candidate scales come
/// from the largest-magnitude element taking each admissible code, largest
/// code first. An all-zero group yields scale 1.
pub(crate) fn infer_grid<T: Scalar>(
    group: &[T],
    spec: QuantSpec,
    exact: bool,
) -> Option<(T, Vec<i32>)> {
    let top = group
        .iter()
        .copied()
        .fold(T::zero(), |m, x| if x.abs() > m.abs() { x } else { m });
    if top == T::zero() {
        return Some((T::one(), vec![0; group.len()]));
    }
    let qmax = spec.qmax();
    let mut ks: Vec<i32> = Vec::with_capacity(qmax as usize + 1);
    ks.push(qmax);
    if top < T::zero() {
        ks.push(qmax + 1);
    }
    ks.extend((1..qmax).rev());
    let tol = T::from_f64_lossy(64.0) * T::epsilon();
    for k in ks {
        let base = top.abs() / T::from_i64_exact(k as i64);
        for step in [0, 1, -1, 2, -2] {
            let s = base.ulp_step(step);
            if !(s > T::zero()) {
                continue;
            }
            let fits = |x: T| -> Option<i32> {
                let ratio = x / s;
                let q = ratio.round();
                if q.as_f64() < spec.qmin() as f64 || q.as_f64() > qmax as f64 {
                    return None;
                }
                let code = code_of(x, s, spec);
                let ok = if exact {
                    dequantize_value(code, s) == x
                } else {
                    (ratio - q).abs() <= tol * ratio.abs().max(T::one())
                };
                ok.then_some(code)
            };
            let codes: Option<Vec<i32>> = group.iter().map(|&x| fits(x)).collect();
            if let Some(codes) = codes {
                return Some((s, codes));
            }
        }
    }
    None
}

/// Checks `w` against every constraint in `c`, reporting the first violation.
pub fn satisfies<T: Scalar>(
    w: &Matrix<T>,
    c: &ConstraintSet,
) -> std::result::Result<(), Violation> {
    let (rows, cols) = w.shape();
    if let Some(p) = c.sparsity {
        if cols % p.n() != 0 {
            return Err(Violation::Shape { cols, n: p.n() });
        }
        for r in 0..rows {
            for (g, chunk) in w.row(r).chunks(p.n()).enumerate() {
                let nz = chunk.iter().filter(|x| **x != T::zero()).count();
                if nz > p.m() {
                    return Err(Violation::Sparsity {
                        row: r,
                        group: g,
                        nonzeros: nz,
                        allowed: p.m(),
                    });
                }
            }
        }
    }
    if let Some(q) = c.quant {
        for range in q.spec.row_groups(rows) {
            let slice = &w.as_slice()[range.start * cols..range.end * cols];
            if infer_grid(slice, q.spec, false).is_none() {
                // Report the first element off the grid implied by the group maximum.
                let s = crate::quantize::solve_scale_max(slice, q.spec).unwrap_or(T::one());
                let bad = slice
                    .iter()
                    .position(|&x| {
                        let r = x / s;
                        (r - r.round()).abs() > T::from_f64_lossy(1e-4)
                    })
                    .unwrap_or(0);
                return Err(Violation::OffGrid {
                    first_row: range.start,
                    row: range.start + bad / cols,
                    col: bad % cols,
                    value: slice[bad].as_f64(),
                });
            }
        }
    }
    Ok(())
}
