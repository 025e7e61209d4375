//! A small residual network standing in for a transformer: every block has
//! two `d×d` linears (`attn_in`, `attn_out`) and an MLP (`mlp_up` `4d×d`,
//! `mlp_down` `d×4d`), each sublayer pre-normalized with RMSNorm. The head
//! stays in full precision.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};

pub const DEFAULT_DIM: usize = 64;
pub const DEFAULT_VOCAB: usize = 64;
pub const DEFAULT_BLOCKS: usize = 4;

/// Linears per block, in forward order.
pub const LAYERS_PER_BLOCK: usize = 4;

const NORM_EPS: f32 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    AttnIn,
    AttnOut,
    MlpUp,
    MlpDown,
}

impl LayerKind {
    fn of(index: usize) -> Self {
        match index % LAYERS_PER_BLOCK {
            0 => Self::AttnIn,
            1 => Self::AttnOut,
            2 => Self::MlpUp,
            _ => Self::MlpDown,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::AttnIn => "attn_in",
            Self::AttnOut => "attn_out",
            Self::MlpUp => "mlp_up",
            Self::MlpDown => "mlp_down",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelShape {
    pub dim: usize,
    pub vocab: usize,
    pub blocks: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        Self {
            dim: DEFAULT_DIM,
            vocab: DEFAULT_VOCAB,
            blocks: DEFAULT_BLOCKS,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    shape: ModelShape,
    names: Vec<String>,
    /// Quantizable linears in forward order, each `out × in`.
    weights: Vec<Matrix<f32>>,
    head: Matrix<f32>,
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix<f32> {
    let normal = Normal::new(0.0, std).expect("positive std");
    Matrix::from_fn(rows, cols, |_, _| normal.sample(rng) as f32)
}

impl ToyModel {
    /// Seeded init: linears `N(0, 1/in)`, head `N(0, 4/d)`.
    pub fn new(shape: ModelShape, seed: u64) -> Result<Self> {
        if shape.dim == 0 || shape.vocab == 0 || shape.blocks == 0 {
            return Err(Error::InvalidArgument("model dimensions must be positive".into()));
        }
        let d = shape.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut weights = Vec::new();
        for b in 0..shape.blocks {
            for i in 0..LAYERS_PER_BLOCK {
                let kind = LayerKind::of(i);
                let (out, inp) = match kind {
                    LayerKind::AttnIn | LayerKind::AttnOut => (d, d),
                    LayerKind::MlpUp => (4 * d, d),
                    LayerKind::MlpDown => (d, 4 * d),
                };
                names.push(format!("block{b}.{}", kind.label()));
                weights.push(gaussian(&mut rng, out, inp, (1.0 / inp as f64).sqrt()));
            }
        }
        let head = gaussian(&mut rng, shape.vocab, d, (4.0 / d as f64).sqrt());
        Ok(Self {
            shape,
            names,
            weights,
            head,
        })
    }

    pub fn toy(seed: u64) -> Self {
        Self::new(ModelShape::default(), seed).expect("default shape is valid")
    }

    pub fn shape(&self) -> ModelShape {
        self.shape
    }

    pub fn dim(&self) -> usize {
        self.shape.dim
    }

    pub fn n_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn layer_names(&self) -> &[String] {
        &self.names
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn kind(&self, index: usize) -> LayerKind {
        LayerKind::of(index)
    }

    pub fn weight(&self, index: usize) -> &Matrix<f32> {
        &self.weights[index]
    }

    pub fn weights(&self) -> &[Matrix<f32>] {
        &self.weights
    }

    pub fn head(&self) -> &Matrix<f32> {
        &self.head
    }

    pub fn param_count(&self, index: usize) -> u64 {
        let w = &self.weights[index];
        (w.rows() * w.cols()) as u64
    }

    /// Replace one layer's weights (same shape).
    pub fn set_weight(&mut self, index: usize, w: Matrix<f32>) -> Result<()> {
        if w.shape() != self.weights[index].shape() {
            return Err(Error::DimensionMismatch(format!("replacement for {}", self.names[index])));
        }
        self.weights[index] = w;
        Ok(())
    }

    /// Multiply one layer's weights by `factor`.
    pub fn scale_layer(&mut self, index: usize, factor: f32) {
        self.weights[index] = self.weights[index].map(|v| v * factor);
    }

    /// Same architecture and head, different linears.
    pub fn with_weights(&self, weights: Vec<Matrix<f32>>) -> Result<Self> {
        if weights.len() != self.weights.len() || weights.iter().zip(&self.weights).any(|(a, b)| a.shape() != b.shape()) {
            return Err(Error::DimensionMismatch("replacement weights do not match the model".into()));
        }
        Ok(Self {
            shape: self.shape,
            names: self.names.clone(),
            weights,
            head: self.head.clone(),
        })
    }

    /// Logits for every row of `x` (`n × d`).
    pub fn forward(&self, x: &Matrix<f32>) -> Result<Matrix<f32>> {
        let refs: Vec<&Matrix<f32>> = self.weights.iter().collect();
        self.forward_with(x, &refs)
    }

    /// Logits using `weights` in place of the model's own linears.
    pub fn forward_with(&self, x: &Matrix<f32>, weights: &[&Matrix<f32>]) -> Result<Matrix<f32>> {
        if weights.len() != self.n_layers() {
            return Err(Error::DimensionMismatch(format!("{} weights for {} layers", weights.len(), self.n_layers())));
        }
        let mut state = self.start(x)?;
        for (i, w) in weights.iter().enumerate() {
            self.apply(&mut state, i, w)?;
        }
        Ok(self.logits(&state))
    }

    /// Hidden state before the first layer.
    pub fn start(&self, x: &Matrix<f32>) -> Result<Trace> {
        if x.cols() != self.dim() {
            return Err(Error::DimensionMismatch(format!("inputs have {} features, model has {}", x.cols(), self.dim())));
        }
        Ok(Trace {
            hidden: x.clone(),
            mid: None,
            next: 0,
        })
    }

    /// Inputs seen by layer `index` given a trace positioned at it.
    pub fn layer_input(&self, state: &Trace, index: usize) -> Result<Matrix<f32>> {
        self.check_position(state, index)?;
        Ok(match LayerKind::of(index) {
            LayerKind::AttnIn | LayerKind::MlpUp => rms_norm(&state.hidden),
            LayerKind::AttnOut | LayerKind::MlpDown => state.mid.clone().expect("set by the preceding layer"),
        })
    }

    /// Run layer `index` with weights `w` and advance the trace.
    pub fn apply(&self, state: &mut Trace, index: usize, w: &Matrix<f32>) -> Result<()> {
        self.check_position(state, index)?;
        if w.shape() != self.weights[index].shape() {
            return Err(Error::DimensionMismatch(format!("weights for {}", self.names[index])));
        }
        match LayerKind::of(index) {
            LayerKind::AttnIn => {
                let y = linear(&rms_norm(&state.hidden), w);
                state.mid = Some(y.map(f32::tanh));
            }
            LayerKind::MlpUp => {
                let y = linear(&rms_norm(&state.hidden), w);
                state.mid = Some(y.map(silu));
            }
            LayerKind::AttnOut | LayerKind::MlpDown => {
                let y = linear(state.mid.as_ref().expect("set by the preceding layer"), w);
                for (h, v) in state.hidden.as_mut_slice().iter_mut().zip(y.as_slice()) {
                    *h += v;
                }
                state.mid = None;
            }
        }
        state.next += 1;
        Ok(())
    }

    /// Head logits from a trace that has run every layer.
    pub fn logits(&self, state: &Trace) -> Matrix<f32> {
        assert_eq!(state.next, self.n_layers(), "trace has not run every layer");
        linear(&rms_norm(&state.hidden), &self.head)
    }

    fn check_position(&self, state: &Trace, index: usize) -> Result<()> {
        if index >= self.n_layers() || state.next != index {
            return Err(Error::InvalidArgument(format!("trace is at layer {}, not {index}", state.next)));
        }
        Ok(())
    }
}

/// Activations part-way through a forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    hidden: Matrix<f32>,
    mid: Option<Matrix<f32>>,
    next: usize,
}

impl Trace {
    pub fn hidden(&self) -> &Matrix<f32> {
        &self.hidden
    }

    /// Index of the next layer to run.
    pub fn position(&self) -> usize {
        self.next
    }
}

fn silu(v: f32) -> f32 {
    v / (1.0 + (-v).exp())
}

pub fn rms_norm(x: &Matrix<f32>) -> Matrix<f32> {
    let mut out = x.clone();
    let d = x.cols() as f32;
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let ms = row.iter().map(|v| v * v).sum::<f32>() / d;
        let inv = 1.0 / (ms + NORM_EPS).sqrt();
        row.iter_mut().for_each(|v| *v *= inv);
    }
    out
}

/// `x · wᵀ`, rows of `x` split across threads.
pub fn linear(x: &Matrix<f32>, w: &Matrix<f32>) -> Matrix<f32> {
    assert_eq!(x.cols(), w.cols());
    let out_dim = w.rows();
    let mut y = vec![0.0f32; x.rows() * out_dim];
    y.par_chunks_mut(out_dim * 16)
        .zip(x.as_slice().par_chunks(x.cols().max(1) * 16))
        .for_each(|(out, xs)| linear_rows(xs, w, out));
    Matrix::from_vec(x.rows(), out_dim, y).expect("sized above")
}

fn linear_rows(xs: &[f32], w: &Matrix<f32>, out: &mut [f32]) {
    #[cfg(target_arch = "x86_64")]
    if fast::available() {
        // SAFETY: avx2 and fma were detected on this CPU.
        return unsafe { fast::rows(xs, w, out) };
    }
    for (xr, dst) in xs.chunks_exact(w.cols()).zip(out.chunks_exact_mut(w.rows())) {
        for (o, d) in dst.iter_mut().enumerate() {
            *d = dot(xr, w.row(o));
        }
    }
}

#[cfg(target_arch = "x86_64")]
mod fast {
    use std::arch::x86_64::*;

    use crate::linalg::Matrix;

    pub fn available() -> bool {
        std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma")
    }

    /// `out[b][o] = x_b · w_o` in tiles of two inputs by four outputs.
    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn rows(xs: &[f32], w: &Matrix<f32>, out: &mut [f32]) {
        let d = w.cols();
        let n = xs.len() / d;
        assert!(out.len() >= n * w.rows());
        let mut b = 0;
        while b + 2 <= n {
            tiles::<2>(xs, b, w, out);
            b += 2;
        }
        if b < n {
            tiles::<1>(xs, b, w, out);
        }
    }

    #[inline(always)]
    unsafe fn tiles<const NB: usize>(xs: &[f32], b: usize, w: &Matrix<f32>, out: &mut [f32]) {
        let (d, n_out) = (w.cols(), w.rows());
        let full = d - d % 8;
        let xr: [&[f32]; NB] = std::array::from_fn(|i| &xs[(b + i) * d..(b + i + 1) * d]);
        let mut o = 0;
        while o < n_out {
            let nw = (n_out - o).min(4);
            let wr: [&[f32]; 4] = std::array::from_fn(|j| w.row(o + j.min(nw - 1)));
            let mut acc = [[_mm256_setzero_ps(); 4]; NB];
            let mut k = 0;
            while k < full {
                let wv: [__m256; 4] = std::array::from_fn(|j| _mm256_loadu_ps(wr[j].as_ptr().add(k)));
                for i in 0..NB {
                    let xv = _mm256_loadu_ps(xr[i].as_ptr().add(k));
                    for j in 0..4 {
                        acc[i][j] = _mm256_fmadd_ps(xv, wv[j], acc[i][j]);
                    }
                }
                k += 8;
            }
            for i in 0..NB {
                for j in 0..nw {
                    let mut s = hsum(acc[i][j]);
                    for k in full..d {
                        s += xr[i][k] * wr[j][k];
                    }
                    out[(b + i) * n_out + o + j] = s;
                }
            }
            o += nw;
        }
    }

    #[inline(always)]
    unsafe fn hsum(v: __m256) -> f32 {
        let s = _mm_add_ps(_mm256_castps256_ps128(v), _mm256_extractf128_ps(v, 1));
        let s = _mm_add_ps(s, _mm_movehl_ps(s, s));
        _mm_cvtss_f32(_mm_add_ss(s, _mm_shuffle_ps(s, s, 1)))
    }
}

/// Row-wise `log softmax`, in `f64`.
pub fn log_softmax(logits: &Matrix<f32>) -> Matrix<f64> {
    let mut out = logits.map(f64::from);
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
    out
}

/// Per-row `KL(p ‖ q)` from log-probabilities.
pub fn kl_rows(log_p: &Matrix<f64>, log_q: &Matrix<f64>) -> Vec<f64> {
    (0..log_p.rows())
        .map(|r| {
            let kl: f64 = log_p.row(r).iter().zip(log_q.row(r)).map(|(lp, lq)| lp.exp() * (lp - lq)).sum();
            kl.max(0.0)
        })
        .collect()
}
