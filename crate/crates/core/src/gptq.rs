//! Multi-precision GPTQ.
//!
//! Columns are quantized left to right. Each column's codes are picked by
//! exhaustive search over every master code, scoring the weighted error of
//! all target bit-widths after slicing. The resulting error, averaged over
//! the targets with uniform weight, is pushed onto the not-yet-quantized
//! columns through rows of the upper Cholesky factor of `H⁻¹`.

use crate::error::{Error, Result};
use crate::grid::{max_code, zero_code, BitWidthSet, QuantGrid};
use crate::linalg::{cholesky_lower, spd_inverse, Matrix};
use crate::slice::{slice_to_code_unchecked, NestedLayer};

pub const DEFAULT_DAMP: f64 = 0.01;
pub const DEFAULT_BLOCK: usize = 128;
pub const DEFAULT_GROUP: usize = 128;

/// Layer inputs, feature-major: `d_col × n_samples`.
#[derive(Debug, Clone)]
pub struct CalibBatch {
    x: Matrix<f64>,
}

impl CalibBatch {
    pub fn new(x: Matrix<f64>) -> Result<Self> {
        if x.cols() == 0 {
            return Err(Error::InvalidArgument("calibration batch needs at least one sample".into()));
        }
        if !x.is_finite() {
            return Err(Error::NonFiniteWeight);
        }
        Ok(Self { x })
    }

    /// From sample-major activations (`n × d`), as produced by a forward pass.
    pub fn from_samples(samples: &Matrix<f64>) -> Result<Self> {
        Self::new(samples.transpose())
    }

    pub fn dim(&self) -> usize {
        self.x.rows()
    }

    pub fn n_samples(&self) -> usize {
        self.x.cols()
    }

    pub fn matrix(&self) -> &Matrix<f64> {
        &self.x
    }
}

/// Dampened Hessian `2XXᵀ + λI`.
#[derive(Debug, Clone)]
pub struct Hessian {
    pub matrix: Matrix<f64>,
    pub damp_rel: f64,
    pub damp_abs: f64,
}

impl Hessian {
    /// `2XXᵀ`, the undampened part.
    pub fn gram(&self) -> Matrix<f64> {
        let mut g = self.matrix.clone();
        for i in 0..g.rows() {
            g[(i, i)] -= self.damp_abs;
        }
        g
    }
}

pub fn build_hessian(x: &CalibBatch, damp_rel: f64) -> Result<Hessian> {
    if !(damp_rel > 0.0 && damp_rel.is_finite()) {
        return Err(Error::InvalidArgument("dampening must be positive".into()));
    }
    let xm = x.matrix();
    let mut h = xm.matmul_transb(xm)?;
    for v in h.as_mut_slice() {
        *v *= 2.0;
    }
    let d = h.rows();
    let mean_diag = (0..d).map(|i| h[(i, i)]).sum::<f64>() / d as f64;
    if mean_diag.is_nan() || mean_diag <= 0.0 {
        return Err(Error::DegenerateCalibration);
    }
    let damp_abs = damp_rel * mean_diag;
    for i in 0..d {
        h[(i, i)] += damp_abs;
    }
    Ok(Hessian {
        matrix: h,
        damp_rel,
        damp_abs,
    })
}

/// Upper Cholesky factor `U` of `H⁻¹` (`H⁻¹ = UᵀU`).
#[derive(Debug, Clone)]
pub struct HessianFactor {
    pub chol_upper: Matrix<f64>,
    pub damp_rel: f64,
    pub damp_abs: f64,
    /// `2XXᵀ`, kept for reconstruction diagnostics when available.
    pub gram: Option<Matrix<f64>>,
}

impl HessianFactor {
    /// A factor from a given upper-triangular matrix, with no diagnostics.
    pub fn from_upper(chol_upper: Matrix<f64>) -> Result<Self> {
        let n = chol_upper.rows();
        if chol_upper.cols() != n {
            return Err(Error::DimensionMismatch("factor must be square".into()));
        }
        for i in 0..n {
            if chol_upper[(i, i)].is_nan() || chol_upper[(i, i)] <= 0.0 {
                return Err(Error::FactorizationFailed);
            }
            for j in 0..i {
                if chol_upper[(i, j)] != 0.0 {
                    return Err(Error::InvalidArgument("factor must be upper triangular".into()));
                }
            }
        }
        Ok(Self {
            chol_upper,
            damp_rel: 0.0,
            damp_abs: 0.0,
            gram: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.chol_upper.rows()
    }

    /// `UᵀU`, which should equal `H⁻¹`.
    pub fn reconstruct_inverse(&self) -> Matrix<f64> {
        let u = &self.chol_upper;
        let n = u.rows();
        let mut out = Matrix::zeros(n, n);
        for k in 0..n {
            for a in k..n {
                let ua = u[(k, a)];
                if ua == 0.0 {
                    continue;
                }
                for b in k..n {
                    out[(a, b)] += ua * u[(k, b)];
                }
            }
        }
        out
    }
}

pub fn factor_inverse(h: &Hessian) -> Result<HessianFactor> {
    let upper = inverse_upper_factor(&h.matrix)?;
    Ok(HessianFactor {
        chol_upper: upper,
        damp_rel: h.damp_rel,
        damp_abs: h.damp_abs,
        gram: Some(h.gram()),
    })
}

/// `Cholesky(H⁻¹)ᵀ` for a symmetric positive-definite `H`.
pub fn inverse_upper_factor(h: &Matrix<f64>) -> Result<Matrix<f64>> {
    let inv = spd_inverse(h)?;
    Ok(cholesky_lower(&inv)?.transpose())
}

/// Normalized dequantized value of every master code at every target width:
/// `value[q][k] = 2^(c-r_k) · (slice(q, r_k) - 2^(r_k-1))`, so the real value
/// on a grid with scale `s` is `s · value`.
#[derive(Debug, Clone)]
pub struct CandidateTable {
    master: u8,
    weights: Vec<f64>,
    values: Vec<f64>,
}

impl CandidateTable {
    pub fn new(bits: &BitWidthSet) -> Self {
        let c = bits.master();
        let k = bits.len();
        let mut values = Vec::with_capacity((max_code(c) as usize + 1) * k);
        for q in 0..=max_code(c) {
            for &r in bits.targets() {
                let code = slice_to_code_unchecked(q, c, r);
                let step = f64::from(1u32 << (c - r));
                values.push((f64::from(code) - f64::from(zero_code(r))) * step);
            }
        }
        Self {
            master: c,
            weights: bits.weights().to_vec(),
            values,
        }
    }

    pub fn n_targets(&self) -> usize {
        self.weights.len()
    }

    /// Code with the least weighted multi-bit error; smallest code wins ties.
    #[inline]
    pub fn select(&self, w: f64, scale: f64) -> u8 {
        let k = self.weights.len();
        let mut best_q = 0usize;
        let mut best_err = f64::INFINITY;
        for (q, vals) in self.values.chunks_exact(k).enumerate() {
            let mut err = 0.0;
            for (lambda, v) in self.weights.iter().zip(vals) {
                let d = w - scale * v;
                err += lambda * (d * d);
            }
            if err < best_err {
                best_err = err;
                best_q = q;
            }
        }
        best_q as u8
    }

    /// Mean over targets of `w - dequant(slice(q, r))`.
    #[inline]
    pub fn mean_residual(&self, w: f64, scale: f64, q: u8) -> f64 {
        let k = self.weights.len();
        let vals = &self.values[q as usize * k..(q as usize + 1) * k];
        let mut sum = 0.0;
        for v in vals {
            sum += w - scale * v;
        }
        sum / k as f64
    }

    pub fn master(&self) -> u8 {
        self.master
    }
}

fn check_grid(w: &Matrix<f64>, grid: &QuantGrid, bits: &BitWidthSet) -> Result<()> {
    if w.shape() != (grid.rows(), grid.cols()) {
        return Err(Error::DimensionMismatch(format!(
            "weights {:?} vs grid {}x{}",
            w.shape(),
            grid.rows(),
            grid.cols()
        )));
    }
    if grid.master_bits() != bits.master() {
        return Err(Error::InvalidBits(format!(
            "grid fitted for {} bits, target set master is {}",
            grid.master_bits(),
            bits.master()
        )));
    }
    Ok(())
}

/// Elementwise minimal-error code selection over all `2^c` candidates.
pub fn select_codes(w: &Matrix<f64>, grid: &QuantGrid, bits: &BitWidthSet) -> Result<Vec<u8>> {
    check_grid(w, grid, bits)?;
    if !w.is_finite() {
        return Err(Error::NonFiniteWeight);
    }
    let table = CandidateTable::new(bits);
    let mut codes = Vec::with_capacity(w.rows() * w.cols());
    for r in 0..w.rows() {
        for (c, &v) in w.row(r).iter().enumerate() {
            codes.push(table.select(v, grid.scale(r, c)));
        }
    }
    Ok(codes)
}

/// Per-target reconstruction error `‖(dequant(S(Q, r)) - W) X‖²_F` and the
/// λ-weighted total.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerDiagnostics {
    pub per_bit: Vec<(u8, f64)>,
    pub weighted: f64,
}

#[derive(Debug, Clone)]
pub struct QuantizeOutput {
    pub layer: NestedLayer,
    /// Weights after error compensation; column `j` holds the values that were
    /// quantized at step `j`.
    pub compensated: Matrix<f64>,
    pub diagnostics: Option<LayerDiagnostics>,
}

/// Blocked multi-precision GPTQ over one layer.
pub fn quantize_layer(
    name: &str,
    w: &Matrix<f64>,
    factor: &HessianFactor,
    grid: &QuantGrid,
    bits: &BitWidthSet,
    block: usize,
) -> Result<QuantizeOutput> {
    check_grid(w, grid, bits)?;
    let (rows, cols) = w.shape();
    if factor.dim() != cols {
        return Err(Error::DimensionMismatch(format!(
            "factor is {0}x{0}, layer has {cols} columns",
            factor.dim()
        )));
    }
    if block == 0 {
        return Err(Error::InvalidArgument("block size must be positive".into()));
    }
    if !w.is_finite() {
        return Err(Error::NonFiniteWeight);
    }

    let table = CandidateTable::new(bits);
    let u = &factor.chol_upper;
    let mut work = w.clone();
    let mut codes = vec![0u8; rows * cols];
    let mut err_block = Matrix::<f64>::zeros(rows, block);
    let mut acc = vec![0.0f64; cols];

    let mut start = 0;
    while start < cols {
        let end = (start + block).min(cols);
        let width = end - start;
        for j in start..end {
            let d = u[(j, j)];
            let u_row = u.row(j);
            for r in 0..rows {
                let scale = grid.scale(r, j);
                let row = work.row_mut(r);
                let value = row[j];
                let q = table.select(value, scale);
                codes[r * cols + j] = q;
                let e = table.mean_residual(value, scale, q) / d;
                err_block[(r, j - start)] = e;
                for k in (j + 1)..end {
                    row[k] -= e * u_row[k];
                }
            }
        }
        if end < cols {
            for r in 0..rows {
                let tail = &mut acc[end..cols];
                tail.fill(0.0);
                for jj in 0..width {
                    let e = err_block[(r, jj)];
                    let u_tail = &u.row(start + jj)[end..cols];
                    for (a, &uv) in tail.iter_mut().zip(u_tail) {
                        *a += e * uv;
                    }
                }
                let row = &mut work.row_mut(r)[end..cols];
                for (v, a) in row.iter_mut().zip(tail.iter()) {
                    *v -= *a;
                }
            }
        }
        if let Some(pos) = work.as_slice().iter().position(|v| !v.is_finite()) {
            return Err(Error::NumericalBlowup { column: pos % cols });
        }
        start = end;
    }

    let layer = NestedLayer::new(name, codes, grid.clone())?;
    let diagnostics = factor
        .gram
        .as_ref()
        .map(|g| diagnostics_from_gram(w, &layer, bits, g))
        .transpose()?;
    Ok(QuantizeOutput {
        layer,
        compensated: work,
        diagnostics,
    })
}

/// Reconstruction error of `layer` against `w` computed from `2XXᵀ`:
/// `‖ΔX‖² = tr(Δ · (2XXᵀ)/2 · Δᵀ)`.
fn diagnostics_from_gram(w: &Matrix<f64>, layer: &NestedLayer, bits: &BitWidthSet, gram: &Matrix<f64>) -> Result<LayerDiagnostics> {
    let mut per_bit = Vec::with_capacity(bits.len());
    let mut weighted = 0.0;
    for (r, lambda) in bits.iter() {
        let delta = sliced_dequant(layer, r).sub(w)?;
        let dg = delta.matmul(gram)?;
        let mut e = 0.0;
        for i in 0..delta.rows() {
            e += crate::linalg::dot(dg.row(i), delta.row(i));
        }
        let e = 0.5 * e;
        per_bit.push((r, e));
        weighted += lambda * e;
    }
    Ok(LayerDiagnostics { per_bit, weighted })
}

/// Dequantized weights of `layer` after slicing its codes to `r` bits.
pub fn sliced_dequant(layer: &NestedLayer, r: u8) -> Matrix<f64> {
    let c = layer.bits();
    let grid = layer.grid();
    let step = f64::from(1u32 << (c - r));
    let z = f64::from(zero_code(r));
    Matrix::from_fn(layer.rows(), layer.cols(), |i, j| {
        let s = slice_to_code_unchecked(u32::from(layer.code(i, j)), c, r);
        grid.scale(i, j) * ((f64::from(s) - z) * step)
    })
}

/// `Σ_r λ_r ‖dequant(S(Q, r)) X - W X‖²_F` evaluated directly from `X`.
pub fn reconstruction_error(w: &Matrix<f64>, layer: &NestedLayer, bits: &BitWidthSet, x: &CalibBatch) -> Result<LayerDiagnostics> {
    let wx = w.matmul(x.matrix())?;
    let mut per_bit = Vec::with_capacity(bits.len());
    let mut weighted = 0.0;
    for (r, lambda) in bits.iter() {
        let qx = sliced_dequant(layer, r).matmul(x.matrix())?;
        let e = qx.sub(&wx)?.frobenius_sq();
        per_bit.push((r, e));
        weighted += lambda * e;
    }
    Ok(LayerDiagnostics { per_bit, weighted })
}

/// Round-to-nearest codes on `grid` (no error compensation, no multi-bit search).
pub fn rtn_codes(w: &Matrix<f64>, grid: &QuantGrid) -> Result<Vec<u8>> {
    let c = grid.master_bits();
    let mut out = Vec::with_capacity(w.rows() * w.cols());
    for r in 0..w.rows() {
        for (j, &v) in w.row(r).iter().enumerate() {
            out.push(crate::grid::rtn(v, grid.scale(r, j), c)?);
        }
    }
    Ok(out)
}
