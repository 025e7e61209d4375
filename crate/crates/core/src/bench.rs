//! Timing harness for the packed kernel against a dense `f32` baseline.

use std::hint::black_box;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::QuantGrid;
use crate::kernel::{matmul_dense, matmul_packed, PackedLayer};
use crate::linalg::Matrix;
use crate::pack::PackLayout;
use crate::slice::NestedLayer;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchParams {
    /// Output features.
    pub m: usize,
    /// Input features.
    pub k: usize,
    pub batch: usize,
    pub bits: u8,
    pub reps: usize,
    pub group_size: usize,
    pub seed: u64,
}

impl BenchParams {
    pub fn new(m: usize, k: usize, batch: usize, bits: u8, reps: usize) -> Self {
        Self {
            m,
            k,
            batch,
            bits,
            reps,
            group_size: 128,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub m: usize,
    pub k: usize,
    pub batch: usize,
    pub bits: u8,
    pub reps: usize,
    pub median_ns: u64,
    pub samples_ns: Vec<u64>,
    pub dense_median_ns: u64,
    /// Packed code planes only.
    pub weight_bytes: u64,
    /// Per-group scales, read alongside the planes.
    pub scale_bytes: u64,
    /// Code planes + activations + output.
    pub bytes_moved: u64,
    pub gbps: f64,
    pub speedup: f64,
}

impl BenchReport {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// Traffic the kernel must move: code planes, `f32` inputs and outputs.
pub fn theoretical_bytes(m: usize, k: usize, batch: usize, bits: u8) -> (u64, u64) {
    let padded_k = k.div_ceil(32) * 32;
    let weights = (m * padded_k * usize::from(bits) / 8) as u64;
    let io = ((batch * k + batch * m) * 4) as u64;
    (weights, weights + io)
}

pub fn median(samples: &[u64]) -> u64 {
    let mut s = samples.to_vec();
    s.sort_unstable();
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2
    }
}

/// Times `f` and `g` alternately so both see the same machine conditions.
fn time_interleaved(reps: usize, mut f: impl FnMut(), mut g: impl FnMut()) -> (Vec<u64>, Vec<u64>) {
    f();
    g();
    let mut tf = Vec::with_capacity(reps);
    let mut tg = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        f();
        tf.push(t.elapsed().as_nanos() as u64);
        let t = Instant::now();
        g();
        tg.push(t.elapsed().as_nanos() as u64);
    }
    (tf, tg)
}

pub fn bench(params: BenchParams) -> Result<BenchReport> {
    let BenchParams {
        m,
        k,
        batch,
        bits,
        reps,
        group_size,
        seed,
    } = params;
    if !(2..=4).contains(&bits) {
        return Err(Error::UnsupportedBits(bits));
    }
    if reps < 3 {
        return Err(Error::InvalidArgument("at least 3 repetitions are needed".into()));
    }
    if m == 0 || k == 0 || batch == 0 {
        return Err(Error::InvalidArgument("benchmark dimensions must be positive".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let top = 1u8 << bits;
    let codes: Vec<u8> = (0..m * k).map(|_| rng.gen_range(0..top)).collect();
    let scales = (0..m * k.div_ceil(group_size)).map(|_| rng.gen_range(0.005f32..0.05)).collect();
    let layer = NestedLayer::new("bench", codes, QuantGrid::new(bits, group_size, m, k, scales)?)?;
    let packed = PackedLayer::from_nested(&layer, PackLayout::Interleaved)?;
    let dense_w = packed.dequantize();
    let x = Matrix::from_fn(batch, k, |_, _| rng.gen_range(-1.0f32..1.0));

    let (samples_ns, dense_samples) = time_interleaved(
        reps,
        || {
            black_box(matmul_packed(black_box(&x), black_box(&packed)).expect("shapes checked"));
        },
        || {
            black_box(matmul_dense(black_box(&x), black_box(&dense_w)).expect("shapes checked"));
        },
    );
    let median_ns = median(&samples_ns).max(1);
    let dense_median_ns = median(&dense_samples).max(1);
    let (weight_bytes, bytes_moved) = theoretical_bytes(m, k, batch, bits);
    Ok(BenchReport {
        m,
        k,
        batch,
        bits,
        reps,
        median_ns,
        samples_ns,
        dense_median_ns,
        weight_bytes,
        scale_bytes: (packed.scales().len() * 4) as u64,
        bytes_moved,
        gbps: bytes_moved as f64 / median_ns as f64,
        speedup: dense_median_ns as f64 / median_ns as f64,
    })
}
