//! Output KL against the full-precision model, and per-layer reconstruction
//! error tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use super::model::{kl_rows, log_softmax, ToyModel};
use super::pipeline::capture_inputs;
use crate::error::{Error, Result};
use crate::gptq::{reconstruction_error, CalibBatch};
use crate::linalg::Matrix;
use crate::slice::{slice_layer, NestedLayer, NestedModel};

/// Widths at or above this run the layer in full precision.
pub const FULL_PRECISION_BITS: u8 = 16;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Selection {
    Uniform(u8),
    Config(BTreeMap<String, u8>),
}

impl Selection {
    fn bits_for(&self, name: &str) -> Result<u8> {
        match self {
            Self::Uniform(r) => Ok(*r),
            Self::Config(map) => map.get(name).copied().ok_or_else(|| Error::IncompleteConfig(name.to_string())),
        }
    }
}

pub fn checkpoint_layer<'a>(ckpt: &'a NestedModel, name: &str) -> Result<&'a NestedLayer> {
    ckpt.layer(name)
        .ok_or_else(|| Error::DimensionMismatch(format!("checkpoint has no layer {name}")))
}

/// The weights a selection runs with, in model order.
pub fn selection_weights(fp: &ToyModel, ckpt: &NestedModel, sel: &Selection) -> Result<Vec<Matrix<f32>>> {
    fp.layer_names()
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let r = sel.bits_for(name)?;
            if r >= FULL_PRECISION_BITS {
                return Ok(fp.weight(i).clone());
            }
            let layer = checkpoint_layer(ckpt, name)?;
            let w = slice_layer(layer, r)?.dequantize_f32();
            if w.shape() != fp.weight(i).shape() {
                return Err(Error::DimensionMismatch(format!("layer {name} does not match the model")));
            }
            Ok(w)
        })
        .collect()
}

/// Mean `KL(fp ‖ quantized)` of the output distributions over the rows of `inputs`.
pub fn mean_kl(fp: &ToyModel, weights: &[Matrix<f32>], inputs: &Matrix<f32>) -> Result<f64> {
    let refs: Vec<&Matrix<f32>> = weights.iter().collect();
    let p = log_softmax(&fp.forward(inputs)?);
    let q = log_softmax(&fp.forward_with(inputs, &refs)?);
    let kl = kl_rows(&p, &q);
    Ok(kl.iter().sum::<f64>() / kl.len().max(1) as f64)
}

pub fn eval_kl(fp: &ToyModel, ckpt: &NestedModel, sel: &Selection, heldout: &Matrix<f32>) -> Result<f64> {
    if heldout.rows() == 0 {
        return Err(Error::InvalidArgument("no held-out samples".into()));
    }
    mean_kl(fp, &selection_weights(fp, ckpt, sel)?, heldout)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KlSummary {
    pub selection: String,
    pub kl: f64,
    pub tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReconRow {
    pub layer: String,
    pub bits: u8,
    pub error: f64,
}

/// `‖dequant(S(Q, r)) X - W X‖²_F` for every layer and every target width.
pub fn eval_recon(fp: &ToyModel, ckpt: &NestedModel, calib: &Matrix<f32>) -> Result<Vec<ReconRow>> {
    let inputs = capture_inputs(fp, ckpt, calib)?;
    let mut rows = Vec::new();
    for (i, name) in fp.layer_names().iter().enumerate() {
        let layer = checkpoint_layer(ckpt, name)?;
        let batch = CalibBatch::from_samples(&inputs[i].map(f64::from))?;
        let diag = reconstruction_error(&fp.weight(i).map(f64::from), layer, &ckpt.bits, &batch)?;
        rows.extend(diag.per_bit.into_iter().map(|(bits, error)| ReconRow {
            layer: name.clone(),
            bits,
            error,
        }));
    }
    Ok(rows)
}

pub fn recon_csv(rows: &[ReconRow]) -> String {
    let mut s = String::from("layer,bits,error\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{:e}", r.layer, r.bits, r.error);
    }
    s
}
