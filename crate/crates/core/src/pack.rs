//! Bit-plane packing for 2/3/4-bit codes.
//!
//! Every row is padded to a multiple of 32 weights and stored in 32-weight
//! units. A unit occupies one 64-bit base word holding the two lowest code
//! bits of each weight, plus one 32-bit word per extra bit:
//!
//! ```text
//! base     u64  weight i -> bits [2i, 2i+1]   (canonical layout)
//! plane_b2 u32  weight i -> bit i = code bit 2   (bits >= 3)
//! plane_b3 u32  weight i -> bit i = code bit 3   (bits == 4)
//! ```
//!
//! A 2-bit tensor is just the base plane and a 3-bit tensor drops `plane_b3`,
//! so every width costs exactly `bits` bits per weight.
//!
//! The interleaved layout stores the same base word de-interleaved: bit 0 of
//! every weight in the low half and bit 1 in the high half. The matmul kernel
//! can then read each bit-plane as a plain `u32` without shuffling.

use crate::error::{Error, Result};
use crate::grid::{check_bits, max_code};

pub const UNIT: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PackLayout {
    Canonical,
    Interleaved,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedTensor {
    bits: u8,
    rows: usize,
    cols: usize,
    layout: PackLayout,
    base: Vec<u64>,
    plane_b2: Vec<u32>,
    plane_b3: Vec<u32>,
}

/// Bit `i` of `x` moved to bit `2i`.
#[inline]
pub fn spread_bits(x: u32) -> u64 {
    let mut v = u64::from(x);
    v = (v | (v << 16)) & 0x0000_FFFF_0000_FFFF;
    v = (v | (v << 8)) & 0x00FF_00FF_00FF_00FF;
    v = (v | (v << 4)) & 0x0F0F_0F0F_0F0F_0F0F;
    v = (v | (v << 2)) & 0x3333_3333_3333_3333;
    v = (v | (v << 1)) & 0x5555_5555_5555_5555;
    v
}

/// Even bits of `x` gathered into a `u32` (inverse of [`spread_bits`]).
#[inline]
pub fn compress_even_bits(x: u64) -> u32 {
    let mut v = x & 0x5555_5555_5555_5555;
    v = (v | (v >> 1)) & 0x3333_3333_3333_3333;
    v = (v | (v >> 2)) & 0x0F0F_0F0F_0F0F_0F0F;
    v = (v | (v >> 4)) & 0x00FF_00FF_00FF_00FF;
    v = (v | (v >> 8)) & 0x0000_FFFF_0000_FFFF;
    v = (v | (v >> 16)) & 0x0000_0000_FFFF_FFFF;
    v as u32
}

#[inline]
fn base_word(lo: u32, hi: u32, layout: PackLayout) -> u64 {
    match layout {
        PackLayout::Canonical => spread_bits(lo) | (spread_bits(hi) << 1),
        PackLayout::Interleaved => u64::from(lo) | (u64::from(hi) << 32),
    }
}

#[inline]
pub(crate) fn split_base(word: u64, layout: PackLayout) -> (u32, u32) {
    match layout {
        PackLayout::Canonical => (compress_even_bits(word), compress_even_bits(word >> 1)),
        PackLayout::Interleaved => (word as u32, (word >> 32) as u32),
    }
}

fn check_pack_bits(bits: u8) -> Result<()> {
    if (2..=4).contains(&bits) {
        Ok(())
    } else {
        Err(Error::UnsupportedBits(bits))
    }
}

impl PackedTensor {
    pub fn from_parts(
        bits: u8,
        rows: usize,
        cols: usize,
        layout: PackLayout,
        base: Vec<u64>,
        plane_b2: Vec<u32>,
        plane_b3: Vec<u32>,
    ) -> Result<Self> {
        check_pack_bits(bits)?;
        let p = Self {
            bits,
            rows,
            cols,
            layout,
            base,
            plane_b2,
            plane_b3,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let units = self.unit_count();
        let want_b2 = if self.bits >= 3 { units } else { 0 };
        let want_b3 = if self.bits == 4 { units } else { 0 };
        if self.base.len() != units || self.plane_b2.len() != want_b2 || self.plane_b3.len() != want_b3 {
            return Err(Error::CorruptPlanes(format!(
                "{}-bit {}x{} tensor needs planes of {units}/{want_b2}/{want_b3} words, found {}/{}/{}",
                self.bits,
                self.rows,
                self.cols,
                self.base.len(),
                self.plane_b2.len(),
                self.plane_b3.len()
            )));
        }
        Ok(())
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn layout(&self) -> PackLayout {
        self.layout
    }

    pub fn padded_cols(&self) -> usize {
        self.cols.div_ceil(UNIT) * UNIT
    }

    pub fn units_per_row(&self) -> usize {
        self.cols.div_ceil(UNIT)
    }

    pub fn unit_count(&self) -> usize {
        self.rows * self.units_per_row()
    }

    pub fn base(&self) -> &[u64] {
        &self.base
    }

    pub fn plane_b2(&self) -> &[u32] {
        &self.plane_b2
    }

    pub fn plane_b3(&self) -> &[u32] {
        &self.plane_b3
    }

    /// Bytes of plane storage: exactly `bits · rows · padded_cols / 8`.
    pub fn payload_bytes(&self) -> usize {
        self.base.len() * 8 + self.plane_b2.len() * 4 + self.plane_b3.len() * 4
    }

    /// Bit-planes `[bit0, bit1, bit2, bit3]` of one unit; absent planes are 0.
    #[inline]
    pub fn unit_planes(&self, unit: usize) -> [u32; 4] {
        let (lo, hi) = split_base(self.base[unit], self.layout);
        let b2 = if self.bits >= 3 { self.plane_b2[unit] } else { 0 };
        let b3 = if self.bits == 4 { self.plane_b3[unit] } else { 0 };
        [lo, hi, b2, b3]
    }

    fn from_unit_planes(bits: u8, rows: usize, cols: usize, layout: PackLayout, planes: &[[u32; 4]]) -> Self {
        let base = planes.iter().map(|p| base_word(p[0], p[1], layout)).collect();
        let plane_b2 = if bits >= 3 { planes.iter().map(|p| p[2]).collect() } else { Vec::new() };
        let plane_b3 = if bits == 4 { planes.iter().map(|p| p[3]).collect() } else { Vec::new() };
        Self {
            bits,
            rows,
            cols,
            layout,
            base,
            plane_b2,
            plane_b3,
        }
    }

    /// Same codes, re-encoded in another layout.
    pub fn to_layout(&self, layout: PackLayout) -> Self {
        if layout == self.layout {
            return self.clone();
        }
        let planes: Vec<[u32; 4]> = (0..self.unit_count()).map(|u| self.unit_planes(u)).collect();
        Self::from_unit_planes(self.bits, self.rows, self.cols, layout, &planes)
    }

    /// Code of weight `(row, col)`.
    pub fn code(&self, row: usize, col: usize) -> u8 {
        let unit = row * self.units_per_row() + col / UNIT;
        let lane = col % UNIT;
        let planes = self.unit_planes(unit);
        let mut q = 0u8;
        for (b, p) in planes.iter().enumerate() {
            q |= (((p >> lane) & 1) as u8) << b;
        }
        q
    }
}

/// Pack a row-major `rows × cols` code matrix in the canonical layout.
pub fn pack(codes: &[u8], rows: usize, cols: usize, bits: u8) -> Result<PackedTensor> {
    pack_with_layout(codes, rows, cols, bits, PackLayout::Canonical)
}

pub fn pack_with_layout(codes: &[u8], rows: usize, cols: usize, bits: u8, layout: PackLayout) -> Result<PackedTensor> {
    check_pack_bits(bits)?;
    if codes.len() != rows * cols {
        return Err(Error::DimensionMismatch(format!(
            "{} codes for a {rows}x{cols} tensor",
            codes.len()
        )));
    }
    if let Some(&bad) = codes.iter().find(|&&q| u32::from(q) > max_code(bits)) {
        return Err(Error::CodeOverflow { code: bad, bits });
    }
    let units_per_row = cols.div_ceil(UNIT);
    let mut planes = Vec::with_capacity(rows * units_per_row);
    for r in 0..rows {
        let row = &codes[r * cols..(r + 1) * cols];
        for chunk in row.chunks(UNIT) {
            let mut p = [0u32; 4];
            for (lane, &q) in chunk.iter().enumerate() {
                for (b, plane) in p.iter_mut().enumerate() {
                    *plane |= u32::from((q >> b) & 1) << lane;
                }
            }
            planes.push(p);
        }
    }
    Ok(PackedTensor::from_unit_planes(bits, rows, cols, layout, &planes))
}

/// Row-major codes of the unpadded region.
pub fn unpack(p: &PackedTensor) -> Result<Vec<u8>> {
    p.validate()?;
    let upr = p.units_per_row();
    let mut out = Vec::with_capacity(p.rows * p.cols);
    for r in 0..p.rows {
        for u in 0..upr {
            let planes = p.unit_planes(r * upr + u);
            let lanes = (p.cols - u * UNIT).min(UNIT);
            for lane in 0..lanes {
                let mut q = 0u8;
                for (b, plane) in planes.iter().enumerate() {
                    q |= (((plane >> lane) & 1) as u8) << b;
                }
                out.push(q);
            }
        }
    }
    Ok(out)
}

/// Slice a packed tensor to `r` bits directly on its bit-planes.
///
/// `round(q / 2^s)` with `s = bits - r` is computed as `(q + 2^(s-1)) >> s`
/// using a bit-sliced ripple-carry add over the 32 lanes of a unit; a carry
/// out of the top plane means the rounded value overflowed and is clamped to
/// `2^r - 1`.
pub fn pack_slice(p: &PackedTensor, r: u8) -> Result<PackedTensor> {
    check_bits(r)?;
    check_pack_bits(r)?;
    p.validate()?;
    if r > p.bits {
        return Err(Error::SliceUpward { from: p.bits, to: r });
    }
    if r == p.bits {
        return Ok(p.clone());
    }
    let b = p.bits as usize;
    let shift = (p.bits - r) as usize;
    let mut planes = Vec::with_capacity(p.unit_count());
    for u in 0..p.unit_count() {
        let src = p.unit_planes(u);
        let mut sum = [0u32; 4];
        let mut carry = 0u32;
        for i in 0..b {
            let k = if i == shift - 1 { u32::MAX } else { 0 };
            sum[i] = src[i] ^ k ^ carry;
            carry = (src[i] & k) | (src[i] & carry) | (k & carry);
        }
        let mut out = [0u32; 4];
        for i in 0..(r as usize) {
            out[i] = sum[i + shift] | carry;
        }
        planes.push(out);
    }
    Ok(PackedTensor::from_unit_planes(r, p.rows, p.cols, p.layout, &planes))
}
