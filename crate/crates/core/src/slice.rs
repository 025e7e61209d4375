//! Most-significant-bit slicing of nested codes.
//!
//! A `c`-bit code `q` is sliced to `r` bits by rounding `q / 2^(c-r)` to the
//! nearest integer (ties away from zero, which "pushes" a set `(c-r)`-th bit
//! into the next bucket), clamping to `[0, 2^r - 1]`. Multiplying back by
//! `2^(c-r)` gives the value on the master grid.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{check_bits, max_code, BitWidthSet, QuantGrid};
use crate::linalg::Matrix;

fn check_slice(q: u32, c: u8, r: u8) -> Result<()> {
    check_bits(c)?;
    check_bits(r)?;
    if r > c {
        return Err(Error::SliceUpward { from: c, to: r });
    }
    if q > max_code(c) {
        return Err(Error::CodeOutOfRange { code: q, bits: c });
    }
    Ok(())
}

/// Sliced code expressed on the master grid (a multiple of `2^(c-r)`).
pub fn slice_code(q: u32, c: u8, r: u8) -> Result<u32> {
    check_slice(q, c, r)?;
    Ok(slice_to_code_unchecked(q, c, r) << (c - r))
}

/// Sliced code as an `r`-bit integer.
pub fn slice_to_code(q: u32, c: u8, r: u8) -> Result<u32> {
    check_slice(q, c, r)?;
    Ok(slice_to_code_unchecked(q, c, r))
}

#[inline]
pub(crate) fn slice_to_code_unchecked(q: u32, c: u8, r: u8) -> u32 {
    let shift = c - r;
    if shift == 0 {
        return q;
    }
    // q ≥ 0, so half-away-from-zero is floor(q / 2^s + 1/2).
    let rounded = (q + (1 << (shift - 1))) >> shift;
    rounded.min(max_code(r))
}

/// One quantized linear layer: integer codes plus their grid.
///
/// For a parent layer `bits() == source_bits`. A sliced child keeps the
/// parent's width in `source_bits` and carries a grid rescaled by
/// `2^(c-r)`, so it can be used like any other `r`-bit layer.
#[derive(Debug, Clone, PartialEq)]
pub struct NestedLayer {
    pub name: String,
    codes: Vec<u8>,
    grid: QuantGrid,
    source_bits: u8,
}

impl NestedLayer {
    pub fn new(name: impl Into<String>, codes: Vec<u8>, grid: QuantGrid) -> Result<Self> {
        let bits = grid.master_bits();
        Self::with_source(name, codes, grid, bits)
    }

    pub fn with_source(name: impl Into<String>, codes: Vec<u8>, grid: QuantGrid, source_bits: u8) -> Result<Self> {
        let name = name.into();
        if codes.len() != grid.rows() * grid.cols() {
            return Err(Error::DimensionMismatch(format!(
                "layer {name}: {} codes for a {}x{} grid",
                codes.len(),
                grid.rows(),
                grid.cols()
            )));
        }
        let bits = grid.master_bits();
        if let Some(&bad) = codes.iter().find(|&&q| u32::from(q) > max_code(bits)) {
            return Err(Error::CodeOutOfRange {
                code: u32::from(bad),
                bits,
            });
        }
        if source_bits < bits {
            return Err(Error::SliceUpward { from: source_bits, to: bits });
        }
        Ok(Self {
            name,
            codes,
            grid,
            source_bits,
        })
    }

    pub fn bits(&self) -> u8 {
        self.grid.master_bits()
    }

    pub fn source_bits(&self) -> u8 {
        self.source_bits
    }

    pub fn rows(&self) -> usize {
        self.grid.rows()
    }

    pub fn cols(&self) -> usize {
        self.grid.cols()
    }

    pub fn param_count(&self) -> u64 {
        (self.rows() * self.cols()) as u64
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn grid(&self) -> &QuantGrid {
        &self.grid
    }

    #[inline]
    pub fn code(&self, row: usize, col: usize) -> u8 {
        self.codes[row * self.cols() + col]
    }

    /// Real-valued weights `scale · (code - zero)`.
    pub fn dequantize(&self) -> Matrix<f64> {
        let z = f64::from(self.grid.zero_code());
        Matrix::from_fn(self.rows(), self.cols(), |r, c| {
            self.grid.scale(r, c) * (f64::from(self.code(r, c)) - z)
        })
    }

    pub fn dequantize_f32(&self) -> Matrix<f32> {
        self.dequantize().map(|v| v as f32)
    }
}

/// Slice a parent layer to `r` bits.
pub fn slice_layer(layer: &NestedLayer, r: u8) -> Result<NestedLayer> {
    let c = layer.bits();
    check_bits(r)?;
    if r > c {
        return Err(Error::SliceUpward { from: c, to: r });
    }
    if layer.source_bits != c && r != c {
        return Err(Error::InvalidArgument(format!(
            "layer {} is already a {c}-bit slice; slice from the master instead",
            layer.name
        )));
    }
    let codes = layer
        .codes
        .iter()
        .map(|&q| slice_to_code_unchecked(u32::from(q), c, r) as u8)
        .collect();
    Ok(NestedLayer {
        name: layer.name.clone(),
        codes,
        grid: layer.grid.rescaled_for(r)?,
        source_bits: layer.source_bits,
    })
}

/// A nested (parent) model, or a model sliced from one.
#[derive(Debug, Clone, PartialEq)]
pub struct NestedModel {
    pub bits: BitWidthSet,
    pub group_size: usize,
    pub damp_rel: f64,
    pub layers: Vec<NestedLayer>,
}

impl NestedModel {
    pub fn master(&self) -> u8 {
        self.bits.master()
    }

    pub fn layer(&self, name: &str) -> Option<&NestedLayer> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn layer_names(&self) -> Vec<String> {
        self.layers.iter().map(|l| l.name.clone()).collect()
    }

    pub fn param_counts(&self) -> Vec<u64> {
        self.layers.iter().map(NestedLayer::param_count).collect()
    }

    pub fn total_params(&self) -> u64 {
        self.param_counts().iter().sum()
    }
}

pub const DEFAULT_LADDER: [u8; 5] = [2, 3, 4, 6, 8];

/// Per-layer bit-width assignment under a parameter-bit budget.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitConfig {
    pub assignment: BTreeMap<String, u8>,
    pub ladder: Vec<u8>,
    pub budget_bits: u64,
}

impl BitConfig {
    /// Every layer at `r` bits; the budget is exactly what that costs.
    pub fn uniform(model: &NestedModel, r: u8, ladder: &[u8]) -> Self {
        let assignment: BTreeMap<String, u8> = model.layers.iter().map(|l| (l.name.clone(), r)).collect();
        let budget_bits = model.total_params() * u64::from(r);
        Self {
            assignment,
            ladder: ladder.to_vec(),
            budget_bits,
        }
    }

    /// Parameter-bits spent by this assignment on `model`.
    pub fn total_bits(&self, model: &NestedModel) -> Result<u64> {
        let mut total = 0u64;
        for layer in &model.layers {
            let r = self
                .assignment
                .get(&layer.name)
                .ok_or_else(|| Error::IncompleteConfig(layer.name.clone()))?;
            total += u64::from(*r) * layer.param_count();
        }
        Ok(total)
    }

    /// Ladder membership, `r ≤ c` and budget checks against `model`.
    pub fn validate(&self, model: &NestedModel) -> Result<()> {
        for layer in &model.layers {
            let r = *self
                .assignment
                .get(&layer.name)
                .ok_or_else(|| Error::IncompleteConfig(layer.name.clone()))?;
            if !self.ladder.contains(&r) {
                return Err(Error::InvalidBits(format!("{r} bits for {} not on the ladder", layer.name)));
            }
            if r > layer.bits() {
                return Err(Error::SliceUpward {
                    from: layer.bits(),
                    to: r,
                });
            }
        }
        let spent = self.total_bits(model)?;
        if spent > self.budget_bits {
            return Err(Error::InfeasibleBudget(format!(
                "config spends {spent} bits, budget is {}",
                self.budget_bits
            )));
        }
        Ok(())
    }

    /// The plain `{layer: bits}` JSON map.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.assignment)?)
    }

    /// Parse a `{layer: bits}` map; ladder and budget are left for the caller.
    pub fn assignment_from_json(text: &str) -> Result<BTreeMap<String, u8>> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Apply a per-layer assignment to a parent model.
pub fn slice_model(model: &NestedModel, assignment: &BTreeMap<String, u8>) -> Result<NestedModel> {
    let layers = model
        .layers
        .iter()
        .map(|layer| {
            let r = assignment
                .get(&layer.name)
                .ok_or_else(|| Error::IncompleteConfig(layer.name.clone()))?;
            slice_layer(layer, *r)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(NestedModel {
        bits: model.bits.clone(),
        group_size: model.group_size,
        damp_rel: model.damp_rel,
        layers,
    })
}

/// Uniform slice of every layer.
pub fn slice_model_uniform(model: &NestedModel, r: u8) -> Result<NestedModel> {
    let assignment = model.layers.iter().map(|l| (l.name.clone(), r)).collect();
    slice_model(model, &assignment)
}
