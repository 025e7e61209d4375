//! Per-token routing analysis inside one block: which assignment of widths to
//! the block's linears reproduces the full-precision block output best for
//! each input.

use std::fmt::Write as _;

use super::eval::checkpoint_layer;
use super::model::{ToyModel, LAYERS_PER_BLOCK};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::slice::slice_layer;

/// Every assignment from `ladder` to `layers` slots with mean exactly `avg`,
/// in lexicographic order.
pub fn routing_configs(ladder: &[u8], layers: usize, avg: u8) -> Vec<Vec<u8>> {
    let mut levels = ladder.to_vec();
    levels.sort_unstable();
    levels.dedup();
    let target = usize::from(avg) * layers;
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(layers);
    fn walk(levels: &[u8], left: usize, target: usize, cur: &mut Vec<u8>, out: &mut Vec<Vec<u8>>) {
        let sum: usize = cur.iter().map(|&b| usize::from(b)).sum();
        if left == 0 {
            if sum == target {
                out.push(cur.clone());
            }
            return;
        }
        for &b in levels {
            cur.push(b);
            walk(levels, left - 1, target, cur, out);
            cur.pop();
        }
    }
    walk(&levels, layers, target, &mut cur, &mut out);
    out
}

pub fn config_label(config: &[u8]) -> String {
    config.iter().map(u8::to_string).collect::<Vec<_>>().join("-")
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingReport {
    pub block: usize,
    pub configs: Vec<Vec<u8>>,
    /// Per token: index of the best config and its MSE.
    pub best: Vec<(usize, f64)>,
    pub wins: Vec<usize>,
}

impl RoutingReport {
    /// The config winning strictly more tokens than any other, if one does.
    pub fn plurality(&self) -> Option<usize> {
        let top = *self.wins.iter().max()?;
        let mut leaders = self.wins.iter().enumerate().filter(|(_, &w)| w == top);
        let (first, _) = leaders.next()?;
        leaders.next().is_none().then_some(first)
    }

    pub fn tokens_csv(&self) -> String {
        let mut s = String::from("token,best_config,mse\n");
        for (t, &(c, mse)) in self.best.iter().enumerate() {
            let _ = writeln!(s, "{t},{},{mse:e}", config_label(&self.configs[c]));
        }
        s
    }

    pub fn wins_csv(&self) -> String {
        let mut s = String::from("config,wins\n");
        for (c, w) in self.configs.iter().zip(&self.wins) {
            let _ = writeln!(s, "{},{w}", config_label(c));
        }
        s
    }
}

/// Compare every config on `tokens`, feeding the block full-precision inputs.
pub fn analyze_routing(
    fp: &ToyModel,
    ckpt: &crate::slice::NestedModel,
    block: usize,
    ladder: &[u8],
    avg_bits: u8,
    tokens: &Matrix<f32>,
) -> Result<RoutingReport> {
    let first = block * LAYERS_PER_BLOCK;
    let last = first + LAYERS_PER_BLOCK;
    if last > fp.n_layers() {
        return Err(Error::InvalidArgument(format!("model has no block {block}")));
    }
    let configs = routing_configs(ladder, LAYERS_PER_BLOCK, avg_bits);
    if configs.is_empty() {
        return Err(Error::InfeasibleBudget(format!("no assignment averages {avg_bits} bits")));
    }

    let mut entry = fp.start(tokens)?;
    for i in 0..first {
        fp.apply(&mut entry, i, fp.weight(i))?;
    }
    let run_block = |weights: &[&Matrix<f32>]| -> Result<Matrix<f32>> {
        let mut t = entry.clone();
        for (k, w) in weights.iter().enumerate() {
            fp.apply(&mut t, first + k, w)?;
        }
        Ok(t.hidden().clone())
    };
    let reference = run_block(&fp.weights()[first..last].iter().collect::<Vec<_>>())?;

    // Dequantized weights per (slot, width), sliced once.
    let mut cache: Vec<Vec<(u8, Matrix<f32>)>> = Vec::with_capacity(LAYERS_PER_BLOCK);
    for k in 0..LAYERS_PER_BLOCK {
        let layer = checkpoint_layer(ckpt, &fp.layer_names()[first + k])?;
        let mut per = Vec::new();
        for &r in ladder {
            per.push((r, slice_layer(layer, r)?.dequantize_f32()));
        }
        cache.push(per);
    }
    let lookup = |k: usize, r: u8| &cache[k].iter().find(|(b, _)| *b == r).expect("ladder width cached").1;

    let n = tokens.rows();
    let d = fp.dim() as f64;
    let mut best = vec![(0usize, f64::INFINITY); n];
    for (ci, config) in configs.iter().enumerate() {
        let ws: Vec<&Matrix<f32>> = config.iter().enumerate().map(|(k, &r)| lookup(k, r)).collect();
        let out = run_block(&ws)?;
        for (t, b) in best.iter_mut().enumerate() {
            let mse = out
                .row(t)
                .iter()
                .zip(reference.row(t))
                .map(|(a, r)| (f64::from(*a) - f64::from(*r)).powi(2))
                .sum::<f64>()
                / d;
            if mse < b.1 {
                *b = (ci, mse);
            }
        }
    }
    let mut wins = vec![0usize; configs.len()];
    for &(c, _) in &best {
        wins[c] += 1;
    }
    Ok(RoutingReport {
        block,
        configs,
        best,
        wins,
    })
}
