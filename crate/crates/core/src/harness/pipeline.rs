//! One pass over the toy model in forward order: capture each layer's inputs,
//! fit its grid, quantize it, then feed the dequantized layer forward.

use std::time::Instant;

use serde::Serialize;

use super::calib::CalibSet;
use super::model::ToyModel;
use crate::error::Result;
use crate::gptq::{
    build_hessian, factor_inverse, quantize_layer, reconstruction_error, rtn_codes, CalibBatch, LayerDiagnostics,
    DEFAULT_BLOCK, DEFAULT_DAMP, DEFAULT_GROUP,
};
use crate::grid::{fit_grid, BitWidthSet, ScaleSearch};
use crate::linalg::Matrix;
use crate::slice::{NestedLayer, NestedModel};

/// Where later layers take their calibration inputs from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActivationSource {
    /// The already-quantized (master-bit) earlier layers.
    Quantized,
    /// The original weights; only useful as a comparison.
    FullPrecision,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Multi-precision error-compensated quantization.
    MatGptq,
    /// Round-to-nearest on the same grid.
    Rtn,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOptions {
    pub bits: BitWidthSet,
    pub group_size: usize,
    pub damp_rel: f64,
    pub block: usize,
    pub search: ScaleSearch,
    pub activations: ActivationSource,
    pub method: Method,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            bits: BitWidthSet::default(),
            group_size: DEFAULT_GROUP,
            damp_rel: DEFAULT_DAMP,
            block: DEFAULT_BLOCK,
            search: ScaleSearch::default(),
            activations: ActivationSource::Quantized,
            method: Method::MatGptq,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerReport {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// `(bits, ‖ΔX‖²)` for every target width.
    pub per_bit: Vec<(u8, f64)>,
    pub weighted: f64,
    pub grid_ms: f64,
    pub quantize_ms: f64,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub model: NestedModel,
    pub reports: Vec<LayerReport>,
}

fn to_f64(m: &Matrix<f32>) -> Matrix<f64> {
    m.map(f64::from)
}

/// Quantize one layer given its captured inputs (`n × in`).
pub fn quantize_captured(name: &str, w: &Matrix<f32>, inputs: &Matrix<f32>, opts: &PipelineOptions) -> Result<(NestedLayer, LayerDiagnostics, f64, f64)> {
    let w64 = to_f64(w);
    let batch = CalibBatch::from_samples(&to_f64(inputs))?;
    let t = Instant::now();
    let grid = fit_grid(&w64, &opts.bits, opts.group_size, opts.search)?;
    let grid_ms = t.elapsed().as_secs_f64() * 1e3;
    let t = Instant::now();
    let (layer, diag) = match opts.method {
        Method::MatGptq => {
            let h = build_hessian(&batch, opts.damp_rel)?;
            let factor = factor_inverse(&h)?;
            let out = quantize_layer(name, &w64, &factor, &grid, &opts.bits, opts.block)?;
            let diag = match out.diagnostics {
                Some(d) => d,
                None => reconstruction_error(&w64, &out.layer, &opts.bits, &batch)?,
            };
            (out.layer, diag)
        }
        Method::Rtn => {
            let layer = NestedLayer::new(name, rtn_codes(&w64, &grid)?, grid)?;
            let diag = reconstruction_error(&w64, &layer, &opts.bits, &batch)?;
            (layer, diag)
        }
    };
    Ok((layer, diag, grid_ms, t.elapsed().as_secs_f64() * 1e3))
}

pub fn run_pipeline(model: &ToyModel, calib: &CalibSet, opts: &PipelineOptions) -> Result<PipelineOutput> {
    let mut trace = model.start(calib.calib())?;
    let mut layers = Vec::with_capacity(model.n_layers());
    let mut reports = Vec::with_capacity(model.n_layers());
    for i in 0..model.n_layers() {
        let name = &model.layer_names()[i];
        let inputs = model.layer_input(&trace, i)?;
        let (layer, diag, grid_ms, quantize_ms) = quantize_captured(name, model.weight(i), &inputs, opts)?;
        match opts.activations {
            ActivationSource::Quantized => model.apply(&mut trace, i, &layer.dequantize_f32())?,
            ActivationSource::FullPrecision => model.apply(&mut trace, i, model.weight(i))?,
        }
        reports.push(LayerReport {
            name: name.clone(),
            rows: layer.rows(),
            cols: layer.cols(),
            per_bit: diag.per_bit,
            weighted: diag.weighted,
            grid_ms,
            quantize_ms,
        });
        layers.push(layer);
    }
    Ok(PipelineOutput {
        model: NestedModel {
            bits: opts.bits.clone(),
            group_size: opts.group_size,
            damp_rel: opts.damp_rel,
            layers,
        },
        reports,
    })
}

/// Inputs of every layer when the earlier layers run at their master width,
/// the same capture the pipeline uses.
pub fn capture_inputs(model: &ToyModel, ckpt: &NestedModel, x: &Matrix<f32>) -> Result<Vec<Matrix<f32>>> {
    let mut trace = model.start(x)?;
    let mut out = Vec::with_capacity(model.n_layers());
    for i in 0..model.n_layers() {
        out.push(model.layer_input(&trace, i)?);
        let layer = super::eval::checkpoint_layer(ckpt, &model.layer_names()[i])?;
        model.apply(&mut trace, i, &layer.dequantize_f32())?;
    }
    Ok(out)
}
