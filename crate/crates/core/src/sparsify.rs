//! N:M semi-structured sparsity: keep the `m` largest magnitudes in every
//! contiguous group of `n` elements along each row.

use std::fmt;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

/// Group length `n` and retained count `m` (written `n:m`, e.g. 4:2).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NxMPattern {
    n: usize,
    m: usize,
}

impl NxMPattern {
    pub fn new(n: usize, m: usize) -> Result<Self> {
        if m == 0 || m >= n {
            return Err(Error::InvalidPattern { n, m });
        }
        Ok(Self { n, m })
    }

    /// The 4:2 pattern supported by sparse tensor cores.
    pub const fn four_two() -> Self {
        Self { n: 4, m: 2 }
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn m(&self) -> usize {
        self.m
    }

    /// Bits needed to address a position inside a group: `ceil(log2 n)`.
    pub fn index_bits(&self) -> u32 {
        usize::BITS - (self.n - 1).leading_zeros()
    }

    pub fn check_cols(&self, cols: usize) -> Result<()> {
        if !cols.is_multiple_of(self.n) {
            return Err(Error::Indivisible { cols, n: self.n });
        }
        Ok(())
    }
}

impl fmt::Display for NxMPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.n, self.m)
    }
}

/// Retained positions of an N:M projection; exactly `m` set per group.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NxMMask {
    rows: usize,
    cols: usize,
    keep: Vec<bool>,
}

impl NxMMask {
    pub fn new(rows: usize, cols: usize, keep: Vec<bool>) -> Result<Self> {
        if keep.len() != rows * cols {
            return Err(Error::DataLength {
                len: keep.len(),
                rows,
                cols,
            });
        }
        Ok(Self { rows, cols, keep })
    }

    pub fn all(rows: usize, cols: usize, value: bool) -> Self {
        Self {
            rows,
            cols,
            keep: vec![value; rows * cols],
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.keep[r * self.cols + c]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.keep
    }

    /// Retained in-group positions (ascending) for group `g` of row `r`.
    pub fn group_positions(&self, r: usize, g: usize, n: usize) -> Vec<u8> {
        let start = r * self.cols + g * n;
        self.keep[start..start + n]
            .iter()
            .enumerate()
            .filter(|(_, &k)| k)
            .map(|(i, _)| i as u8)
            .collect()
    }
}

/// Selects the `m` retained positions of one group, written into `keep`.
///
/// Larger magnitude wins; equal magnitudes go to the lower index.
pub(crate) fn select_group<T: Scalar>(group: &[T], m: usize, keep: &mut [bool]) {
    let mut order: Vec<usize> = (0..group.len()).collect();
    // Stable sort keeps ascending index order among equal magnitudes.
    order.sort_by(|&a, &b| {
        group[b]
            .abs()
            .partial_cmp(&group[a].abs())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    keep.iter_mut().for_each(|k| *k = false);
    for &i in &order[..m] {
        keep[i] = true;
    }
}

/// Euclidean projection onto the N:M constraint.
///
/// Returns the projected matrix and the mask of retained positions. Retained
/// values are copied unchanged.
pub fn nxm_project<T: Scalar>(w: &Matrix<T>, p: NxMPattern) -> Result<(Matrix<T>, NxMMask)> {
    p.check_cols(w.cols())?;
    let (rows, cols) = w.shape();
    let mut keep = vec![false; rows * cols];
    let mut out = w.clone();
    for r in 0..rows {
        let row = w.row(r);
        let orow = out.row_mut(r);
        for g in 0..cols / p.n {
            let span = g * p.n..(g + 1) * p.n;
            let kslice = &mut keep[r * cols + span.start..r * cols + span.end];
            select_group(&row[span.clone()], p.m, kslice);
            for (o, &k) in orow[span].iter_mut().zip(kslice.iter()) {
                if !k {
                    *o = T::zero();
                }
            }
        }
    }
    Ok((out, NxMMask { rows, cols, keep }))
}

/// Elementwise product of `w` with a boolean mask.
pub fn apply_mask<T: Scalar>(w: &Matrix<T>, mask: &NxMMask) -> Result<Matrix<T>> {
    if w.shape() != mask.shape() {
        return Err(Error::ShapeMismatch {
            expected: w.shape(),
            actual: mask.shape(),
        });
    }
    let mut out = w.clone();
    for (x, &k) in out.as_mut_slice().iter_mut().zip(&mask.keep) {
        if !k {
            *x = T::zero();
        }
    }
    Ok(out)
}
