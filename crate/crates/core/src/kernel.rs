//! Matmul over bit-plane packed weights with on-the-fly dequantization.
//!
//! The packed path computes the transposed product `Y = (W Xᵀ)ᵀ`: each output
//! row of `W Xᵀ` is one weight row streamed once against every activation
//! row, and rows are partitioned across threads.
//!
//! On x86-64 with AVX2 a unit's planes are expanded into codes in registers
//! (see `avx2`). Elsewhere two portable loops are used:
//!
//! - batch < 8: per activation row, subset-sum lookup tables over 8 inputs
//!   (256 entries each) turn every byte of a bit-plane into a single load, so
//!   a 32-weight unit costs `4 · bits` lookups and no per-weight decode;
//! - batch ≥ 8: each unit is decoded once into 32 scaled floats and reused
//!   for all activation rows.
//!
//! All paths accumulate in `f32`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::zero_code;
use crate::linalg::{dot, simd_dispatch, Matrix};
use crate::pack::{pack_with_layout, split_base, PackLayout, PackedTensor, UNIT};
use crate::slice::NestedLayer;

#[cfg(target_arch = "x86_64")]
mod avx2;

/// Batch size at which the portable blocked (decode-once) path takes over.
pub const BATCH_SWITCH: usize = 8;

const ROWS_PER_TASK: usize = 64;

/// A layer ready for the packed kernel: planes, one scale per (row, group)
/// and the symmetric zero `2^(bits-1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedLayer {
    packed: PackedTensor,
    scales: Vec<f32>,
    group_size: usize,
}

impl PackedLayer {
    pub fn new(packed: PackedTensor, scales: Vec<f32>, group_size: usize) -> Result<Self> {
        if group_size == 0 || !group_size.is_multiple_of(UNIT) {
            return Err(Error::InvalidArgument(format!(
                "group size {group_size} is not a multiple of {UNIT}"
            )));
        }
        let groups = packed.cols().div_ceil(group_size);
        if scales.len() != packed.rows() * groups {
            return Err(Error::DimensionMismatch(format!(
                "{} scales for {} rows x {groups} groups",
                scales.len(),
                packed.rows()
            )));
        }
        Ok(Self {
            packed,
            scales,
            group_size,
        })
    }

    pub fn from_nested(layer: &NestedLayer, layout: PackLayout) -> Result<Self> {
        if !(2..=4).contains(&layer.bits()) {
            return Err(Error::UnsupportedBits(layer.bits()));
        }
        let packed = pack_with_layout(layer.codes(), layer.rows(), layer.cols(), layer.bits(), layout)?;
        Self::new(packed, layer.grid().scales().to_vec(), layer.grid().group_size())
    }

    pub fn packed(&self) -> &PackedTensor {
        &self.packed
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn bits(&self) -> u8 {
        self.packed.bits()
    }

    pub fn rows(&self) -> usize {
        self.packed.rows()
    }

    pub fn cols(&self) -> usize {
        self.packed.cols()
    }

    pub fn n_groups(&self) -> usize {
        self.cols().div_ceil(self.group_size)
    }

    pub fn zero(&self) -> u32 {
        zero_code(self.bits())
    }

    /// Dense `f32` weights, `scale · (code - zero)`.
    pub fn dequantize(&self) -> Matrix<f32> {
        let z = self.zero() as f32;
        let groups = self.n_groups();
        Matrix::from_fn(self.rows(), self.cols(), |r, c| {
            let s = self.scales[r * groups + c / self.group_size];
            s * (f32::from(self.packed.code(r, c)) - z)
        })
    }
}

fn check_task(x: &Matrix<f32>, layer: &PackedLayer) -> Result<()> {
    if x.cols() != layer.cols() {
        return Err(Error::DimensionMismatch(format!(
            "activations have {} features, layer expects {}",
            x.cols(),
            layer.cols()
        )));
    }
    Ok(())
}

/// Dequantize, then a plain dense product with k-ascending `f32` accumulation.
pub fn matmul_ref(x: &Matrix<f32>, layer: &PackedLayer) -> Result<Matrix<f32>> {
    check_task(x, layer)?;
    let w = layer.dequantize();
    let mut y = Matrix::zeros(x.rows(), layer.rows());
    for b in 0..x.rows() {
        let xr = x.row(b);
        for o in 0..layer.rows() {
            let mut acc = 0.0f32;
            for (xv, wv) in xr.iter().zip(w.row(o)) {
                acc += xv * wv;
            }
            y[(b, o)] = acc;
        }
    }
    Ok(y)
}

/// Single-threaded dense `f32` product `X Wᵀ`; the baseline the packed kernel
/// is benchmarked against.
pub fn matmul_dense(x: &Matrix<f32>, w: &Matrix<f32>) -> Result<Matrix<f32>> {
    if x.cols() != w.cols() {
        return Err(Error::DimensionMismatch("dense matmul inner dimension".into()));
    }
    let mut z = vec![0.0f32; w.rows() * x.rows()];
    dense_rows(x, w, &mut z);
    Ok(transpose_out(&z, x.rows(), w.rows()))
}

simd_dispatch! {
    fn dense_rows(x: &Matrix<f32>, w: &Matrix<f32>, z: &mut [f32]) {
        let batch = x.rows();
        for o in 0..w.rows() {
            let wr = w.row(o);
            for b in 0..batch {
                z[o * batch + b] = dot(x.row(b), wr);
            }
        }
    }
}

fn transpose_out(z: &[f32], batch: usize, rows: usize) -> Matrix<f32> {
    let mut y = Matrix::zeros(batch, rows);
    for o in 0..rows {
        for b in 0..batch {
            y[(b, o)] = z[o * batch + b];
        }
    }
    y
}

pub fn matmul_packed(x: &Matrix<f32>, layer: &PackedLayer) -> Result<Matrix<f32>> {
    packed_product(x, layer, true)
}

fn packed_product(x: &Matrix<f32>, layer: &PackedLayer, allow_simd: bool) -> Result<Matrix<f32>> {
    check_task(x, layer)?;
    let batch = x.rows();
    let rows = layer.rows();
    if batch == 0 || rows == 0 {
        return Ok(Matrix::zeros(batch, rows));
    }
    let padded = layer.packed.padded_cols();
    let mut xp = vec![0.0f32; batch * padded];
    for b in 0..batch {
        xp[b * padded..b * padded + layer.cols()].copy_from_slice(x.row(b));
    }

    // Z = W Xᵀ, one row per output feature.
    let mut z = vec![0.0f32; rows * batch];
    let chunks = z.par_chunks_mut(ROWS_PER_TASK * batch).enumerate();

    #[cfg(target_arch = "x86_64")]
    if allow_simd && avx2::available() {
        chunks.for_each(|(task, out)| avx2::task(layer, task * ROWS_PER_TASK, &xp, batch, out));
        return Ok(transpose_out(&z, batch, rows));
    }
    let _ = allow_simd;

    if batch < BATCH_SWITCH {
        let tables: Vec<Vec<UnitTables>> = (0..batch).map(|b| subset_tables(&xp[b * padded..(b + 1) * padded])).collect();
        chunks.for_each(|(task, out)| lut_task(layer, task * ROWS_PER_TASK, &tables, out));
    } else {
        // Unit-major copy: the inputs of one unit for every activation row are adjacent.
        let upr = layer.packed.units_per_row();
        let mut xu = vec![0.0f32; batch * padded];
        for u in 0..upr {
            for b in 0..batch {
                let dst = (u * batch + b) * UNIT;
                xu[dst..dst + UNIT].copy_from_slice(&xp[b * padded + u * UNIT..b * padded + (u + 1) * UNIT]);
            }
        }
        chunks.for_each(|(task, out)| blocked_task(layer, task * ROWS_PER_TASK, &xu, batch, out));
    }
    Ok(transpose_out(&z, batch, rows))
}

/// Subset-sum tables for one 32-input unit: `t[k][m]` is the sum of the inputs
/// `8k + i` whose bit `i` is set in `m`.
type UnitTables = [[f32; 256]; 4];

fn subset_tables(x: &[f32]) -> Vec<UnitTables> {
    x.chunks_exact(UNIT)
        .map(|xu| {
            let mut t = [[0.0f32; 256]; 4];
            for (tab, xs) in t.iter_mut().zip(xu.chunks_exact(8)) {
                for m in 1..256usize {
                    let low = m.trailing_zeros() as usize;
                    tab[m] = tab[m & (m - 1)] + xs[low];
                }
            }
            t
        })
        .collect()
}

/// `Σ_i x_i · bit_i(plane)` for one unit.
#[inline(always)]
fn plane_sum(t: &UnitTables, plane: u32) -> f32 {
    let b = plane.to_le_bytes();
    (t[0][usize::from(b[0])] + t[1][usize::from(b[1])]) + (t[2][usize::from(b[2])] + t[3][usize::from(b[3])])
}

/// With `code - zero` read as a two's-complement number (top plane inverted),
/// `Σ x (code - zero) = Σ_{i<b-1} 2^i S(p_i) - 2^(b-1) S(!p_{b-1})`.
#[inline(always)]
fn unit_signed_sum<const BITS: u8>(p: [u32; 4], t: &UnitTables) -> f32 {
    match BITS {
        2 => plane_sum(t, p[0]) - 2.0 * plane_sum(t, !p[1]),
        3 => plane_sum(t, p[0]) + 2.0 * plane_sum(t, p[1]) - 4.0 * plane_sum(t, !p[2]),
        _ => plane_sum(t, p[0]) + 2.0 * plane_sum(t, p[1]) + 4.0 * plane_sum(t, p[2]) - 8.0 * plane_sum(t, !p[3]),
    }
}

#[inline(always)]
fn lut_row<const BITS: u8, const CANONICAL: bool>(layer: &PackedLayer, row: usize, t: &[UnitTables]) -> f32 {
    let pk = &layer.packed;
    let upr = pk.units_per_row();
    let upg = layer.group_size / UNIT;
    let groups = layer.n_groups();
    let r0 = row * upr;
    let base = &pk.base()[r0..r0 + upr];
    let b2 = if BITS >= 3 { &pk.plane_b2()[r0..r0 + upr] } else { &[][..] };
    let b3 = if BITS >= 4 { &pk.plane_b3()[r0..r0 + upr] } else { &[][..] };
    let t = &t[..upr];
    let layout = if CANONICAL { PackLayout::Canonical } else { PackLayout::Interleaved };
    let mut acc = 0.0f32;
    for (g, &s) in layer.scales[row * groups..(row + 1) * groups].iter().enumerate() {
        let mut gsum = 0.0f32;
        for u in g * upg..((g + 1) * upg).min(upr) {
            let (lo, hi) = split_base(base[u], layout);
            let p2 = if BITS >= 3 { b2[u] } else { 0 };
            let p3 = if BITS >= 4 { b3[u] } else { 0 };
            gsum += unit_signed_sum::<BITS>([lo, hi, p2, p3], &t[u]);
        }
        acc += s * gsum;
    }
    acc
}

simd_dispatch! {
    fn lut_task(layer: &PackedLayer, first: usize, tables: &[Vec<UnitTables>], out: &mut [f32]) {
        let batch = tables.len();
        let canonical = layer.packed.layout() == PackLayout::Canonical;
        for (i, zrow) in out.chunks_mut(batch).enumerate() {
            for (zv, t) in zrow.iter_mut().zip(tables) {
                *zv = match (layer.bits(), canonical) {
                    (2, false) => lut_row::<2, false>(layer, first + i, t),
                    (3, false) => lut_row::<3, false>(layer, first + i, t),
                    (_, false) => lut_row::<4, false>(layer, first + i, t),
                    (2, true) => lut_row::<2, true>(layer, first + i, t),
                    (3, true) => lut_row::<3, true>(layer, first + i, t),
                    (_, true) => lut_row::<4, true>(layer, first + i, t),
                };
            }
        }
    }
}

/// `scale · (code - zero)` for the 32 weights of a unit.
#[inline(always)]
fn decode_unit(p: [u32; 4], zero: f32, scale: f32, out: &mut [f32; UNIT]) {
    for (lane, v) in out.iter_mut().enumerate() {
        let q = ((p[0] >> lane) & 1) | (((p[1] >> lane) & 1) << 1) | (((p[2] >> lane) & 1) << 2) | (((p[3] >> lane) & 1) << 3);
        *v = scale * (q as f32 - zero);
    }
}

#[inline(always)]
fn lane_sum(l: &[f32; UNIT]) -> f32 {
    let mut h = [0.0f32; 8];
    for c in l.chunks_exact(8) {
        for (a, v) in h.iter_mut().zip(c) {
            *a += v;
        }
    }
    ((h[0] + h[4]) + (h[1] + h[5])) + ((h[2] + h[6]) + (h[3] + h[7]))
}

simd_dispatch! {
    fn blocked_task(layer: &PackedLayer, first: usize, xu: &[f32], batch: usize, out: &mut [f32]) {
        let upr = layer.packed.units_per_row();
        let upg = layer.group_size / UNIT;
        let groups = layer.n_groups();
        let zero = layer.zero() as f32;
        let mut vals = [0.0f32; UNIT];
        let mut lanes = vec![[0.0f32; UNIT]; batch];
        for (i, zrow) in out.chunks_mut(batch).enumerate() {
            let row = first + i;
            lanes.fill([0.0; UNIT]);
            for u in 0..upr {
                let s = layer.scales[row * groups + u / upg];
                decode_unit(layer.packed.unit_planes(row * upr + u), zero, s, &mut vals);
                let xs_u = &xu[u * batch * UNIT..(u + 1) * batch * UNIT];
                for (l, xs) in lanes.iter_mut().zip(xs_u.chunks_exact(UNIT)) {
                    let xs: &[f32; UNIT] = xs.try_into().expect("unit slice");
                    for j in 0..UNIT {
                        l[j] += vals[j] * xs[j];
                    }
                }
            }
            for (zv, l) in zrow.iter_mut().zip(&lanes) {
                *zv = lane_sum(l);
            }
        }
    }
}

/// `max |a - b| / max |b|` (0 when both are identically zero).
pub fn relative_error(a: &Matrix<f32>, b: &Matrix<f32>) -> f64 {
    let num = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .fold(0.0f64, |m, (x, y)| m.max((f64::from(*x) - f64::from(*y)).abs()));
    let den = b.as_slice().iter().fold(0.0f64, |m, y| m.max(f64::from(*y).abs()));
    if num == 0.0 {
        0.0
    } else {
        num / den
    }
}
