//! Symmetric group-wise quantization grids.
//!
//! A grid holds one scale per `(row, group)` where groups are contiguous runs
//! of `group_size` weights along the input dimension. Codes are unsigned
//! integers in `[0, 2^c - 1]` with the symmetric zero at `2^(c-1)`, so the
//! representable values are `scale · (code - 2^(c-1))`.
//!
//! Scales are fitted for the *whole* set of target bit-widths at once: each
//! candidate scale is scored by the weighted reconstruction error of the
//! master codes after slicing them down to every target width.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::slice::slice_to_code_unchecked;

pub const MIN_BITS: u8 = 2;
pub const MAX_BITS: u8 = 8;

/// Smallest scale a group may carry; all-zero groups end up here.
pub const SCALE_FLOOR: f64 = 1e-12;

/// Target bit-widths `R` with their importance weights `λ_r`.
///
/// Targets are kept sorted ascending; the master width `c` is the largest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BitWidthSet {
    targets: Vec<u8>,
    weights: Vec<f64>,
}

impl BitWidthSet {
    pub fn new(targets: &[u8], weights: &[f64]) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::InvalidBits("empty target set".into()));
        }
        if targets.len() != weights.len() {
            return Err(Error::InvalidArgument("lambda/bits length mismatch".into()));
        }
        let mut pairs: Vec<(u8, f64)> = targets.iter().copied().zip(weights.iter().copied()).collect();
        pairs.sort_by_key(|p| p.0);
        for w in pairs.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::InvalidBits(format!("duplicate target {}", w[0].0)));
            }
        }
        for &(r, lambda) in &pairs {
            if !(MIN_BITS..=MAX_BITS).contains(&r) {
                return Err(Error::InvalidBits(format!("target {r} outside [{MIN_BITS}, {MAX_BITS}]")));
            }
            if !(lambda > 0.0 && lambda.is_finite()) {
                return Err(Error::InvalidArgument(format!("lambda for {r} bits must be positive and finite")));
            }
        }
        Ok(Self {
            targets: pairs.iter().map(|p| p.0).collect(),
            weights: pairs.iter().map(|p| p.1).collect(),
        })
    }

    pub fn uniform(targets: &[u8]) -> Result<Self> {
        Self::new(targets, &vec![1.0; targets.len()])
    }

    /// `R = {c}`: plain single-precision quantization.
    pub fn single(bits: u8) -> Result<Self> {
        Self::new(&[bits], &[1.0])
    }

    pub fn master(&self) -> u8 {
        *self.targets.last().expect("non-empty by construction")
    }

    pub fn targets(&self) -> &[u8] {
        &self.targets
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u8, f64)> + '_ {
        self.targets.iter().copied().zip(self.weights.iter().copied())
    }
}

impl Default for BitWidthSet {
    fn default() -> Self {
        Self::uniform(&[3, 4, 8]).expect("valid default")
    }
}

pub(crate) fn check_bits(bits: u8) -> Result<()> {
    if (MIN_BITS..=MAX_BITS).contains(&bits) {
        Ok(())
    } else {
        Err(Error::InvalidBits(format!("{bits} outside [{MIN_BITS}, {MAX_BITS}]")))
    }
}

#[inline]
pub fn zero_code(bits: u8) -> u32 {
    1 << (bits - 1)
}

#[inline]
pub fn max_code(bits: u8) -> u32 {
    (1 << bits) - 1
}

/// `max_abs / (2^(c-1) - 1)`, floored. `+max_abs` lands exactly on the top code.
pub fn base_scale(max_abs: f64, bits: u8) -> f64 {
    let levels = f64::from((1u32 << (bits - 1)) - 1);
    (max_abs / levels).max(SCALE_FLOOR)
}

/// Round-to-nearest onto the master grid, ties away from zero.
pub fn rtn(w: f64, scale: f64, bits: u8) -> Result<u8> {
    if !w.is_finite() {
        return Err(Error::NonFiniteWeight);
    }
    Ok(rtn_unchecked(w, scale, bits))
}

#[inline]
pub(crate) fn rtn_unchecked(w: f64, scale: f64, bits: u8) -> u8 {
    let z = f64::from(zero_code(bits));
    let q = (w / scale + z).round();
    q.clamp(0.0, f64::from(max_code(bits))) as u8
}

/// Value of an `r`-bit code on a grid whose scale was fitted at master width
/// `master_bits`: `scale · 2^(c-r) · (code - 2^(r-1))`.
pub fn dequant_code(code: u32, scale: f64, master_bits: u8, r: u8) -> Result<f64> {
    if r > master_bits {
        return Err(Error::SliceUpward { from: master_bits, to: r });
    }
    if code > max_code(r) {
        return Err(Error::CodeOutOfRange { code, bits: r });
    }
    Ok(dequant_unchecked(code, scale, master_bits, r))
}

#[inline]
pub(crate) fn dequant_unchecked(code: u32, scale: f64, master_bits: u8, r: u8) -> f64 {
    let step = f64::from(1u32 << (master_bits - r));
    scale * ((f64::from(code) - f64::from(zero_code(r))) * step)
}

/// Per-(row, group) scales of one layer plus the master bit-width they were
/// fitted for. The zero code is always `2^(c-1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantGrid {
    master_bits: u8,
    group_size: usize,
    rows: usize,
    cols: usize,
    scales: Vec<f32>,
}

impl QuantGrid {
    pub fn new(master_bits: u8, group_size: usize, rows: usize, cols: usize, scales: Vec<f32>) -> Result<Self> {
        check_bits(master_bits)?;
        if group_size == 0 {
            return Err(Error::InvalidArgument("group size must be positive".into()));
        }
        let groups = cols.div_ceil(group_size);
        if scales.len() != rows * groups {
            return Err(Error::DimensionMismatch(format!(
                "{} scales for {rows} rows x {groups} groups",
                scales.len()
            )));
        }
        if let Some(bad) = scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::InvalidArgument(format!("scale {bad} is not strictly positive")));
        }
        Ok(Self {
            master_bits,
            group_size,
            rows,
            cols,
            scales,
        })
    }

    pub fn master_bits(&self) -> u8 {
        self.master_bits
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn n_groups(&self) -> usize {
        self.cols.div_ceil(self.group_size)
    }

    pub fn zero_code(&self) -> u32 {
        zero_code(self.master_bits)
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    #[inline]
    pub fn group_scale(&self, row: usize, group: usize) -> f64 {
        f64::from(self.scales[row * self.n_groups() + group])
    }

    /// Scale applying to weight `(row, col)`.
    #[inline]
    pub fn scale(&self, row: usize, col: usize) -> f64 {
        self.group_scale(row, col / self.group_size)
    }

    /// Dequantize an `r`-bit code (a slice of this grid's master codes).
    pub fn dequant(&self, row: usize, col: usize, code: u32, r: u8) -> Result<f64> {
        dequant_code(code, self.scale(row, col), self.master_bits, r)
    }

    /// Same grid with every scale multiplied by `2^(c-r)` and master width `r`:
    /// the grid an `r`-bit slice lives on when treated as an ordinary layer.
    pub fn rescaled_for(&self, r: u8) -> Result<Self> {
        if r > self.master_bits {
            return Err(Error::SliceUpward { from: self.master_bits, to: r });
        }
        check_bits(r)?;
        let factor = (1u32 << (self.master_bits - r)) as f32;
        Ok(Self {
            master_bits: r,
            group_size: self.group_size,
            rows: self.rows,
            cols: self.cols,
            scales: self.scales.iter().map(|s| s * factor).collect(),
        })
    }
}

/// Shrink-factor sweep for scale fitting: candidates `α·base_scale` with
/// `α ∈ linspace(1, shrink_min, steps)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleSearch {
    pub shrink_min: f64,
    pub steps: usize,
}

impl Default for ScaleSearch {
    fn default() -> Self {
        Self {
            shrink_min: 0.5,
            steps: 51,
        }
    }
}

impl ScaleSearch {
    pub fn none() -> Self {
        Self {
            shrink_min: 1.0,
            steps: 1,
        }
    }

    pub fn alphas(&self) -> impl Iterator<Item = f64> + '_ {
        let steps = self.steps.max(1);
        (0..steps).map(move |k| {
            if steps == 1 {
                1.0
            } else {
                1.0 + (self.shrink_min - 1.0) * (k as f64) / ((steps - 1) as f64)
            }
        })
    }
}

/// Scale actually stored for a candidate: rounded to the 32-bit storage type.
#[inline]
pub(crate) fn storage_scale(s: f64) -> f32 {
    let f = s.max(SCALE_FLOOR) as f32;
    if f > 0.0 {
        f
    } else {
        SCALE_FLOOR as f32
    }
}

/// Weighted multi-bit MSE of one group at a given scale:
/// `Σ_r λ_r Σ_w (w - dequant(slice(rtn(w, s, c), r)))²`.
pub fn group_objective(values: &[f64], scale: f64, bits: &BitWidthSet) -> f64 {
    let c = bits.master();
    let codes: Vec<u32> = values.iter().map(|&w| u32::from(rtn_unchecked(w, scale, c))).collect();
    let mut total = 0.0;
    for (r, lambda) in bits.iter() {
        let mut sum = 0.0;
        for (&w, &q) in values.iter().zip(&codes) {
            let d = w - dequant_unchecked(slice_to_code_unchecked(q, c, r), scale, c, r);
            sum += d * d;
        }
        total += lambda * sum;
    }
    total
}

/// Best scale for one group; returns the stored (f32) scale and the chosen α.
pub fn fit_group(values: &[f64], bits: &BitWidthSet, search: ScaleSearch) -> Result<(f32, f64)> {
    if values.is_empty() {
        return Err(Error::EmptyGroup);
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteWeight);
    }
    let c = bits.master();
    let max_abs = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let base = base_scale(max_abs, c);
    let mut best: Option<(f64, f32, f64)> = None;
    for alpha in search.alphas() {
        let s = storage_scale(alpha * base);
        let obj = group_objective(values, f64::from(s), bits);
        // Strict improvement only: ties stay with the larger α seen first.
        if best.is_none_or(|(b, _, _)| obj < b) {
            best = Some((obj, s, alpha));
        }
    }
    let (_, s, alpha) = best.expect("at least one candidate");
    Ok((s, alpha))
}

pub fn fit_grid(w: &Matrix<f64>, bits: &BitWidthSet, group_size: usize, search: ScaleSearch) -> Result<QuantGrid> {
    if group_size == 0 {
        return Err(Error::InvalidArgument("group size must be positive".into()));
    }
    let (rows, cols) = w.shape();
    if cols == 0 {
        return Err(Error::EmptyGroup);
    }
    let groups = cols.div_ceil(group_size);
    let mut scales = Vec::with_capacity(rows * groups);
    for r in 0..rows {
        let row = w.row(r);
        for chunk in row.chunks(group_size) {
            scales.push(fit_group(chunk, bits, search)?.0);
        }
    }
    QuantGrid::new(bits.master(), group_size, rows, cols, scales)
}
