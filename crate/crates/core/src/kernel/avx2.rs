//! AVX2 row kernel. A unit's planes are broadcast and shifted lane-wise so
//! that one register holds all 32 codes, byte `k` of lane `l` being the code
//! of weight `8k + l`. The zero point is subtracted on the bytes, each byte
//! is moved to the top of its lane, and the conversion yields
//! `(code - zero) · 2^24` exactly; the factor is folded into the group scale.

use std::arch::x86_64::*;

use super::PackedLayer;
use crate::pack::{split_base, PackLayout, UNIT};

/// Activation rows handled per pass over a weight row.
const MAX_NB: usize = 4;

/// `2^-24`, undoing the shift of a signed code into the top byte.
const TOP_BYTE_INV: f32 = 1.0 / 16_777_216.0;

pub(super) fn available() -> bool {
    std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma")
}

/// Fills `out` (rows `first..`, `batch` values each) with `W Xᵀ`.
///
/// `xp` is row-major `batch × padded_cols`.
pub(super) fn task(layer: &PackedLayer, first: usize, xp: &[f32], batch: usize, out: &mut [f32]) {
    assert!(available());
    let canonical = layer.packed.layout() == PackLayout::Canonical;
    // SAFETY: AVX2 and FMA support were checked above.
    unsafe {
        match (layer.bits(), canonical) {
            (2, false) => task_bits::<2, false>(layer, first, xp, batch, out),
            (3, false) => task_bits::<3, false>(layer, first, xp, batch, out),
            (_, false) => task_bits::<4, false>(layer, first, xp, batch, out),
            (2, true) => task_bits::<2, true>(layer, first, xp, batch, out),
            (3, true) => task_bits::<3, true>(layer, first, xp, batch, out),
            (_, true) => task_bits::<4, true>(layer, first, xp, batch, out),
        }
    }
}

/// Bytes of activations kept hot while a tile of units is swept over all rows.
const X_TILE_BYTES: usize = 32 * 1024;

#[target_feature(enable = "avx2,fma")]
unsafe fn task_bits<const BITS: u8, const CANONICAL: bool>(
    layer: &PackedLayer,
    first: usize,
    xp: &[f32],
    batch: usize,
    out: &mut [f32],
) {
    let upr = layer.packed.units_per_row();
    let tile = (X_TILE_BYTES / (batch * UNIT * 4)).max(1);
    out.fill(0.0);
    let mut u0 = 0;
    while u0 < upr {
        let u1 = (u0 + tile).min(upr);
        for (i, zrow) in out.chunks_mut(batch).enumerate() {
            let mut b0 = 0;
            while b0 < batch {
                let nb = (batch - b0).min(MAX_NB);
                let z = &mut zrow[b0..b0 + nb];
                let row = first + i;
                match nb {
                    1 => row_dot::<BITS, CANONICAL, 1>(layer, row, xp, b0, u0..u1, z),
                    2 => row_dot::<BITS, CANONICAL, 2>(layer, row, xp, b0, u0..u1, z),
                    3 => row_dot::<BITS, CANONICAL, 3>(layer, row, xp, b0, u0..u1, z),
                    _ => row_dot::<BITS, CANONICAL, 4>(layer, row, xp, b0, u0..u1, z),
                }
                b0 += nb;
            }
        }
        u0 = u1;
    }
}

#[inline(always)]
unsafe fn expand(plane: u32, shifts: __m256i, ones: __m256i) -> __m256i {
    _mm256_and_si256(_mm256_srlv_epi32(_mm256_set1_epi32(plane as i32), shifts), ones)
}

#[inline(always)]
unsafe fn hsum(v: __m256) -> f32 {
    let s = _mm_add_ps(_mm256_castps256_ps128(v), _mm256_extractf128_ps::<1>(v));
    let s = _mm_add_ps(s, _mm_movehl_ps(s, s));
    let s = _mm_add_ss(s, _mm_shuffle_ps::<0b01>(s, s));
    _mm_cvtss_f32(s)
}

#[inline(always)]
unsafe fn row_dot<const BITS: u8, const CANONICAL: bool, const NB: usize>(
    layer: &PackedLayer,
    row: usize,
    xp: &[f32],
    b0: usize,
    units: std::ops::Range<usize>,
    z: &mut [f32],
) {
    let pk = &layer.packed;
    let upr = pk.units_per_row();
    let padded = upr * UNIT;
    let upg = layer.group_size / UNIT;
    let groups = layer.n_groups();
    let r0 = row * upr;
    let base = &pk.base()[r0..r0 + upr];
    let b2 = if BITS >= 3 { &pk.plane_b2()[r0..r0 + upr] } else { &[][..] };
    let b3 = if BITS >= 4 { &pk.plane_b3()[r0..r0 + upr] } else { &[][..] };
    let scales = &layer.scales[row * groups..(row + 1) * groups];
    let layout = if CANONICAL { PackLayout::Canonical } else { PackLayout::Interleaved };
    assert!(xp.len() >= (b0 + NB) * padded);
    let x0 = xp.as_ptr().add(b0 * padded);

    let shifts = _mm256_setr_epi32(0, 1, 2, 3, 4, 5, 6, 7);
    let ones = _mm256_set1_epi32(0x0101_0101);
    let zero = _mm256_set1_epi8(layer.zero() as i8);
    let pick: [__m256i; 4] = std::array::from_fn(|k| {
        let k = k as i8;
        let n = -128i8;
        _mm256_setr_epi8(
            n, n, n, k, n, n, n, 4 + k, n, n, n, 8 + k, n, n, n, 12 + k, n, n, n, k, n, n, n, 4 + k, n, n, n, 8 + k,
            n, n, n, 12 + k,
        )
    });
    let mut acc = [[_mm256_setzero_ps(); 4]; NB];

    let g0 = units.start / upg;
    for (g, &s) in scales.iter().enumerate().take(units.end.div_ceil(upg)).skip(g0) {
        let sv = _mm256_set1_ps(s * TOP_BYTE_INV);
        for u in (g * upg).max(units.start)..((g + 1) * upg).min(units.end) {
            let (lo, hi) = split_base(base[u], layout);
            let mut q = expand(if BITS == 2 { hi } else if BITS == 3 { b2[u] } else { b3[u] }, shifts, ones);
            if BITS >= 4 {
                q = _mm256_add_epi32(_mm256_add_epi32(q, q), expand(b2[u], shifts, ones));
            }
            if BITS >= 3 {
                q = _mm256_add_epi32(_mm256_add_epi32(q, q), expand(hi, shifts, ones));
            }
            q = _mm256_add_epi32(_mm256_add_epi32(q, q), expand(lo, shifts, ones));
            q = _mm256_sub_epi8(q, zero);

            let qs: [__m256; 4] = std::array::from_fn(|k| _mm256_mul_ps(_mm256_cvtepi32_ps(_mm256_shuffle_epi8(q, pick[k])), sv));
            for (b, a) in acc.iter_mut().enumerate() {
                let xu = x0.add(b * padded + u * UNIT);
                for k in 0..4 {
                    a[k] = _mm256_fmadd_ps(qs[k], _mm256_loadu_ps(xu.add(8 * k)), a[k]);
                }
            }
        }
    }

    for (a, zv) in acc.iter().zip(z.iter_mut()) {
        *zv += hsum(_mm256_add_ps(_mm256_add_ps(a[0], a[1]), _mm256_add_ps(a[2], a[3])));
    }
}
