mod common;

use common::{correlated_inputs, gaussian, ref_objective, reference_gptq, rng};
use matq::gptq::{
    build_hessian, factor_inverse, quantize_layer, reconstruction_error, rtn_codes, select_codes, CalibBatch,
    HessianFactor,
};
use matq::grid::{fit_grid, group_objective, BitWidthSet, ScaleSearch};
use matq::linalg::Matrix;
use matq::slice::NestedLayer;
use rand::Rng;
use rand_distr::StandardNormal;

fn matgptq(w: &Matrix<f64>, x: &Matrix<f64>, bits: &BitWidthSet, group: usize, block: usize) -> (Vec<u8>, matq::grid::QuantGrid) {
    let grid = fit_grid(w, bits, group, ScaleSearch::default()).unwrap();
    let h = build_hessian(&CalibBatch::new(x.clone()).unwrap(), 0.01).unwrap();
    let f = factor_inverse(&h).unwrap();
    let out = quantize_layer("l", w, &f, &grid, bits, block).unwrap();
    (out.layer.codes().to_vec(), grid)
}

#[test]
fn single_width_matches_reference_gptq() {
    // 64x64 against 64x256 inputs, then a spread of shapes, widths and blocks.
    let w = gaussian(64, 64, 1);
    let x = gaussian(64, 256, 2);
    let bits = BitWidthSet::single(4).unwrap();
    let (codes, grid) = matgptq(&w, &x, &bits, 32, 128);
    assert_eq!(codes, reference_gptq(&w, &x, &grid, 0.01, 128));

    for (i, &(rows, cols, c, block)) in [(24, 40, 3u8, 16usize), (48, 96, 8, 32), (32, 128, 2, 128), (80, 64, 6, 7)]
        .iter()
        .enumerate()
    {
        let w = gaussian(rows, cols, 10 + i as u64);
        let x = correlated_inputs(cols, 2 * cols, 20 + i as u64);
        let bits = BitWidthSet::single(c).unwrap();
        let (codes, grid) = matgptq(&w, &x, &bits, 32, block);
        assert_eq!(codes, reference_gptq(&w, &x, &grid, 0.01, block), "case {i}");
    }
}

#[test]
fn identity_factor_reduces_to_select_codes() {
    let w = gaussian(16, 64, 3);
    let bits = BitWidthSet::uniform(&[2, 4, 8]).unwrap();
    let grid = fit_grid(&w, &bits, 32, ScaleSearch::default()).unwrap();
    let f = HessianFactor::from_upper(Matrix::identity(64)).unwrap();
    let out = quantize_layer("l", &w, &f, &grid, &bits, 16).unwrap();
    assert_eq!(out.layer.codes(), select_codes(&w, &grid, &bits).unwrap().as_slice());
}

#[test]
fn compensated_weights_are_self_consistent() {
    let w = gaussian(32, 96, 4);
    let x = correlated_inputs(96, 200, 5);
    let bits = BitWidthSet::uniform(&[3, 4, 8]).unwrap();
    let grid = fit_grid(&w, &bits, 32, ScaleSearch::default()).unwrap();
    let f = factor_inverse(&build_hessian(&CalibBatch::new(x).unwrap(), 0.01).unwrap()).unwrap();
    let out = quantize_layer("l", &w, &f, &grid, &bits, 32).unwrap();
    assert_eq!(out.layer.codes(), select_codes(&out.compensated, &grid, &bits).unwrap().as_slice());
}

#[test]
fn codes_do_not_depend_on_thread_count() {
    let w = gaussian(64, 128, 6);
    let x = correlated_inputs(128, 256, 7);
    let bits = BitWidthSet::uniform(&[3, 4, 8]).unwrap();
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| matgptq(&w, &x, &bits, 64, 32).0)
    };
    let one = run(1);
    assert_eq!(one, run(4));
    assert_eq!(one, matgptq(&w, &x, &bits, 64, 32).0);
}

#[test]
fn beats_round_to_nearest_on_most_layers() {
    let bits = BitWidthSet::uniform(&[3, 4, 8]).unwrap();
    let mut wins = 0;
    for seed in 0..20u64 {
        let w = gaussian(64, 64, 100 + seed);
        let x = correlated_inputs(64, 256, 200 + seed);
        let (codes, grid) = matgptq(&w, &x, &bits, 64, 128);
        let batch = CalibBatch::new(x.clone()).unwrap();
        let ours = reconstruction_error(&w, &NestedLayer::new("l", codes, grid.clone()).unwrap(), &bits, &batch).unwrap();
        let rtn = NestedLayer::new("l", rtn_codes(&w, &grid).unwrap(), grid).unwrap();
        let base = reconstruction_error(&w, &rtn, &bits, &batch).unwrap();
        wins += usize::from(ours.weighted < base.weighted);
    }
    assert!(wins >= 19, "{wins}/20");
}

#[test]
fn reconstruction_error_matches_naive_objective() {
    let w = gaussian(16, 64, 8);
    let x = gaussian(64, 40, 9);
    let bits = BitWidthSet::new(&[2, 3, 6], &[1.0, 0.5, 2.0]).unwrap();
    let (codes, grid) = matgptq(&w, &x, &bits, 32, 16);
    let layer = NestedLayer::new("l", codes.clone(), grid.clone()).unwrap();
    let got = reconstruction_error(&w, &layer, &bits, &CalibBatch::new(x.clone()).unwrap()).unwrap();
    let targets: Vec<(u8, f64)> = bits.iter().collect();
    let want = ref_objective(&w, &codes, &grid, &targets, &x);
    for ((r, g), e) in got.per_bit.iter().zip(&want) {
        assert!((g - e).abs() <= 1e-9 * e.abs().max(1.0), "r={r}: {g} vs {e}");
    }
}

#[test]
fn diagnostics_from_hessian_match_direct_error() {
    let w = gaussian(16, 64, 11);
    let x = correlated_inputs(64, 100, 12);
    let bits = BitWidthSet::uniform(&[3, 4, 8]).unwrap();
    let grid = fit_grid(&w, &bits, 32, ScaleSearch::default()).unwrap();
    let batch = CalibBatch::new(x).unwrap();
    let f = factor_inverse(&build_hessian(&batch, 0.01).unwrap()).unwrap();
    let out = quantize_layer("l", &w, &f, &grid, &bits, 16).unwrap();
    let from_gram = out.diagnostics.unwrap();
    let direct = reconstruction_error(&w, &out.layer, &bits, &batch).unwrap();
    for ((_, a), (_, b)) in from_gram.per_bit.iter().zip(&direct.per_bit) {
        assert!((a - b).abs() <= 1e-8 * b.abs().max(1.0), "{a} vs {b}");
    }
}

#[test]
fn scale_search_matches_brute_force_sweep() {
    let mut r = rng(0);
    let values: Vec<f64> = (0..64).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
    let bits = BitWidthSet::uniform(&[2, 4]).unwrap();
    let search = ScaleSearch::default();
    let grid = fit_grid(&Matrix::from_vec(1, 64, values.clone()).unwrap(), &bits, 64, search).unwrap();

    let max_abs = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let base = max_abs / 7.0;
    let mut best = (f64::INFINITY, 0.0f32);
    for k in 0..51 {
        let alpha = 1.0 - 0.5 * k as f64 / 50.0;
        let s = (alpha * base) as f32;
        let obj = group_objective(&values, f64::from(s), &bits);
        if obj < best.0 {
            best = (obj, s);
        }
    }
    assert_eq!(grid.scales()[0], best.1);
}
