//! Independent reference implementations used as test oracles. Nothing here
//! calls into the library's numerics; only plain containers cross over.

#![allow(dead_code, clippy::needless_range_loop)]

use matq::grid::QuantGrid;
use matq::linalg::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
    let mut r = rng(seed);
    Matrix::from_fn(rows, cols, |_, _| r.sample::<f64, _>(StandardNormal))
}

/// Inputs with correlated features, feature-major `d × n`.
pub fn correlated_inputs(d: usize, n: usize, seed: u64) -> Matrix<f64> {
    let mut r = rng(seed);
    let mix: Vec<f64> = (0..d * d).map(|_| r.sample::<f64, _>(StandardNormal) / (d as f64).sqrt()).collect();
    let z: Vec<f64> = (0..d * n).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
    Matrix::from_fn(d, n, |i, k| {
        let mut s = z[i * n + k];
        for j in 0..d {
            s += 0.7 * mix[i * d + j] * z[j * n + k];
        }
        s
    })
}

/// `round(q / 2^(c-r))` clamped to the r-bit range, by direct evaluation.
pub fn ref_slice_code(q: u32, c: u8, r: u8) -> u32 {
    let step = f64::from(1u32 << (c - r));
    let v = (f64::from(q) / step).round();
    v.min(f64::from((1u32 << r) - 1)) as u32
}

/// Planes of a row-major code matrix, one weight at a time.
pub struct RefPlanes {
    pub base: Vec<u64>,
    pub b2: Vec<u32>,
    pub b3: Vec<u32>,
}

pub fn ref_pack(codes: &[u8], rows: usize, cols: usize, bits: u8) -> RefPlanes {
    let units = cols.div_ceil(32);
    let mut base = vec![0u64; rows * units];
    let mut b2 = vec![0u32; rows * units];
    let mut b3 = vec![0u32; rows * units];
    for r in 0..rows {
        for c in 0..cols {
            let q = codes[r * cols + c];
            let unit = r * units + c / 32;
            let i = c % 32;
            base[unit] |= u64::from(q & 0b11) << (2 * i);
            if q & 0b100 != 0 {
                b2[unit] |= 1 << i;
            }
            if q & 0b1000 != 0 {
                b3[unit] |= 1 << i;
            }
        }
    }
    if bits < 3 {
        b2.clear();
    }
    if bits < 4 {
        b3.clear();
    }
    RefPlanes { base, b2, b3 }
}

type Mat = Vec<Vec<f64>>;

fn to_rows(m: &Matrix<f64>) -> Mat {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

fn cholesky(a: &Mat) -> Mat {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            if i == j {
                assert!(s > 0.0, "reference cholesky: matrix not positive definite");
                l[i][i] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    l
}

/// `A⁻¹` from `A = LLᵀ` by forward and back substitution per unit vector.
fn inverse_spd(a: &Mat) -> Mat {
    let n = a.len();
    let l = cholesky(a);
    let mut inv = vec![vec![0.0; n]; n];
    for col in 0..n {
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut s = if i == col { 1.0 } else { 0.0 };
            for k in 0..i {
                s -= l[i][k] * y[k];
            }
            y[i] = s / l[i][i];
        }
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= l[k][i] * x[k];
            }
            x[i] = s / l[i][i];
        }
        for i in 0..n {
            inv[i][col] = x[i];
        }
    }
    inv
}

/// Plain single-width GPTQ: `H = 2XXᵀ + damp·mean(diag)·I`, `U = chol(H⁻¹)ᵀ`,
/// round-to-nearest on `grid`, lazy batch updates every `block` columns.
/// `x` is feature-major (`cols × n`).
pub fn reference_gptq(w: &Matrix<f64>, x: &Matrix<f64>, grid: &QuantGrid, damp_rel: f64, block: usize) -> Vec<u8> {
    let (rows, cols) = w.shape();
    let n = x.cols();
    let xr = to_rows(x);
    let mut h = vec![vec![0.0; cols]; cols];
    for i in 0..cols {
        for j in 0..cols {
            let mut s = 0.0;
            for k in 0..n {
                s += xr[i][k] * xr[j][k];
            }
            h[i][j] = 2.0 * s;
        }
    }
    let damp = damp_rel * (0..cols).map(|i| h[i][i]).sum::<f64>() / cols as f64;
    for (i, row) in h.iter_mut().enumerate() {
        row[i] += damp;
    }
    let lower = cholesky(&inverse_spd(&h));
    let u = |i: usize, j: usize| lower[j][i];

    let c = grid.master_bits();
    let zero = f64::from(1u32 << (c - 1));
    let maxq = f64::from((1u32 << c) - 1);
    let mut wm = to_rows(w);
    let mut q = vec![0u8; rows * cols];
    let mut i1 = 0;
    while i1 < cols {
        let i2 = (i1 + block).min(cols);
        let mut err = vec![vec![0.0; i2 - i1]; rows];
        for i in i1..i2 {
            let d = u(i, i);
            for r in 0..rows {
                let s = grid.scale(r, i);
                let v = wm[r][i];
                let code = ((v / s).round() + zero).clamp(0.0, maxq);
                q[r * cols + i] = code as u8;
                let e = (v - s * (code - zero)) / d;
                err[r][i - i1] = e;
                for j in i + 1..i2 {
                    wm[r][j] -= e * u(i, j);
                }
            }
        }
        for r in 0..rows {
            for j in i2..cols {
                let mut s = 0.0;
                for (t, e) in err[r].iter().enumerate() {
                    s += e * u(i1 + t, j);
                }
                wm[r][j] -= s;
            }
        }
        i1 = i2;
    }
    q
}

/// `Σ_r λ_r ‖(dequant(S(Q, r)) − W) X‖²_F`, accumulated naively.
pub fn ref_objective(w: &Matrix<f64>, codes: &[u8], grid: &QuantGrid, targets: &[(u8, f64)], x: &Matrix<f64>) -> Vec<f64> {
    let (rows, cols) = w.shape();
    let c = grid.master_bits();
    targets
        .iter()
        .map(|&(r, _)| {
            let step = f64::from(1u32 << (c - r));
            let zero = f64::from(1u32 << (r - 1));
            let mut total = 0.0;
            for i in 0..rows {
                let delta: Vec<f64> = (0..cols)
                    .map(|j| {
                        let s = ref_slice_code(u32::from(codes[i * cols + j]), c, r);
                        grid.scale(i, j) * (f64::from(s) - zero) * step - w[(i, j)]
                    })
                    .collect();
                for k in 0..x.cols() {
                    let mut y = 0.0;
                    for j in 0..cols {
                        y += delta[j] * x[(j, k)];
                    }
                    total += y * y;
                }
            }
            total
        })
        .collect()
}

/// `X Wᵀ` in `f64` from a dequantized weight matrix.
pub fn ref_matmul(x: &Matrix<f32>, w: &Matrix<f64>) -> Matrix<f64> {
    Matrix::from_fn(x.rows(), w.rows(), |b, o| {
        (0..x.cols()).map(|k| f64::from(x[(b, k)]) * w[(o, k)]).sum()
    })
}

/// Relative Frobenius error of `a` against the `f64` reference `b`.
pub fn rel_err(a: &Matrix<f32>, b: &Matrix<f64>) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
        num += (f64::from(*x) - y).powi(2);
        den += y * y;
    }
    (num / den.max(f64::MIN_POSITIVE)).sqrt()
}
