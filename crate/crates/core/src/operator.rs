//! The measurement matrix `A` whose rows are vectorised masks, applied
//! matrix-free.

use rayon::prelude::*;

use crate::error::{shape, Error, Result};
use crate::grid::Grid;
use crate::slm::SamplingMask;

const ADJOINT_CHUNK: usize = 2048;
/// Rows per partial sum in [`MaskOperator::gram`]; fixed so the reduction
/// order does not depend on the thread count.
const GRAM_BLOCK: usize = 64;

/// Dense binary rows stored as bytes, optionally with the mean row
/// subtracted (a rank-one correction applied on the fly).
#[derive(Clone, Debug)]
pub struct MaskOperator {
    width: usize,
    height: usize,
    rows: usize,
    entries: Vec<u8>,
    mean_row: Option<Vec<f64>>,
}

impl MaskOperator {
    pub fn new<'a>(masks: impl IntoIterator<Item = &'a SamplingMask>) -> Result<Self> {
        let mut iter = masks.into_iter().peekable();
        let (width, height) = iter.peek().ok_or(Error::EmptySet)?.dims();
        let mut entries = Vec::new();
        let mut rows = 0;
        for m in iter {
            if m.dims() != (width, height) {
                return Err(shape(format!(
                    "mask {:?} differs from {width}x{height}",
                    m.dims()
                )));
            }
            entries.extend_from_slice(m.transmit());
            rows += 1;
        }
        Ok(MaskOperator {
            width,
            height,
            rows,
            entries,
            mean_row: None,
        })
    }

    /// Subtracts the average mask from every row.
    pub fn centered(mut self) -> Self {
        let n = self.pixels();
        let mut mean = vec![0.0; n];
        for row in self.entries.chunks_exact(n) {
            for (acc, &a) in mean.iter_mut().zip(row) {
                *acc += a as f64;
            }
        }
        let inv = 1.0 / self.rows as f64;
        mean.iter_mut().for_each(|v| *v *= inv);
        self.mean_row = Some(mean);
        self
    }

    pub fn is_centered(&self) -> bool {
        self.mean_row.is_some()
    }

    pub fn mean_row(&self) -> Option<&[f64]> {
        self.mean_row.as_deref()
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    /// `A u` with the uncentered binary rows.
    pub fn forward_raw(&self, u: &[f64]) -> Vec<f64> {
        assert_eq!(u.len(), self.pixels());
        self.entries
            .par_chunks_exact(self.pixels())
            .map(|row| dot_bytes(row, u))
            .collect()
    }

    pub fn forward(&self, u: &[f64]) -> Vec<f64> {
        let mut y = self.forward_raw(u);
        if let Some(mean) = &self.mean_row {
            let shift = dot(mean, u);
            y.iter_mut().for_each(|v| *v -= shift);
        }
        y
    }

    /// `A^T y`, summing rows in index order for every pixel.
    pub fn adjoint(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.rows);
        let n = self.pixels();
        let mut out = vec![0.0; n];
        out.par_chunks_mut(ADJOINT_CHUNK)
            .enumerate()
            .for_each(|(c, chunk)| {
                let start = c * ADJOINT_CHUNK;
                for (row, &yi) in self.entries.chunks_exact(n).zip(y) {
                    if yi == 0.0 {
                        continue;
                    }
                    for (o, &a) in chunk.iter_mut().zip(&row[start..]) {
                        *o += yi * a as f64;
                    }
                }
            });
        if let Some(mean) = &self.mean_row {
            let total: f64 = y.iter().sum();
            out.iter_mut().zip(mean).for_each(|(o, m)| *o -= total * m);
        }
        out
    }
}

impl MaskOperator {
    /// `A^T A v` in one sweep over the rows.
    pub fn gram(&self, v: &[f64]) -> Vec<f64> {
        let n = self.pixels();
        assert_eq!(v.len(), n);
        let shift = self.mean_row.as_deref().map_or(0.0, |m| dot(m, v));
        let partials: Vec<(Vec<f64>, f64)> = self
            .entries
            .par_chunks(GRAM_BLOCK * n)
            .map(|block| {
                let mut acc = vec![0.0; n];
                let mut coeff_sum = 0.0;
                for row in block.chunks_exact(n) {
                    let t = dot_bytes(row, v) - shift;
                    coeff_sum += t;
                    for (o, &a) in acc.iter_mut().zip(row) {
                        *o += t * a as f64;
                    }
                }
                (acc, coeff_sum)
            })
            .collect();
        let mut out = vec![0.0; n];
        let mut total = 0.0;
        for (acc, coeff_sum) in partials {
            out.iter_mut().zip(&acc).for_each(|(o, a)| *o += a);
            total += coeff_sum;
        }
        if let Some(mean) = &self.mean_row {
            out.iter_mut().zip(mean).for_each(|(o, m)| *o -= total * m);
        }
        out
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn dot_bytes(a: &[u8], b: &[f64]) -> f64 {
    const LANES: usize = 16;
    let mut acc = [0.0f64; LANES];
    let mut ca = a.chunks_exact(LANES);
    let mut cb = b.chunks_exact(LANES);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..LANES {
            acc[k] += x[k] as f64 * y[k];
        }
    }
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(&x, y)| x as f64 * y)
        .sum();
    let mut width = LANES;
    while width > 1 {
        width /= 2;
        for k in 0..width {
            acc[k] += acc[k + width];
        }
    }
    acc[0] + tail
}

/// Component `i` is the sum of `u` over the transparent pixels of mask `i`.
pub fn apply_forward(masks: &[SamplingMask], u: &Grid) -> Result<Vec<f64>> {
    if masks.is_empty() {
        return Ok(Vec::new());
    }
    let op = MaskOperator::new(masks)?;
    if op.dims() != u.dims() {
        return Err(shape(format!(
            "masks are {:?}, image is {:?}",
            op.dims(),
            u.dims()
        )));
    }
    Ok(op.forward_raw(u.as_slice()))
}

/// `sum_i y_i mask_i` as an image.
pub fn apply_adjoint(masks: &[SamplingMask], y: &[f64]) -> Result<Grid> {
    if masks.len() != y.len() {
        return Err(shape(format!(
            "{} masks but {} coefficients",
            masks.len(),
            y.len()
        )));
    }
    let op = MaskOperator::new(masks)?;
    let (w, h) = op.dims();
    Grid::from_vec(w, h, op.adjoint(y))
}
