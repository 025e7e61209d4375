mod common;

use common::{ref_matmul, rel_err, rng};
use matq::bench::{bench, theoretical_bytes, BenchParams};
use matq::grid::QuantGrid;
use matq::kernel::{matmul_dense, matmul_packed, matmul_ref, PackedLayer};
use matq::linalg::Matrix;
use matq::pack::PackLayout;
use matq::slice::NestedLayer;
use rand::Rng;

fn random_layer(rows: usize, cols: usize, bits: u8, group: usize, seed: u64) -> NestedLayer {
    let mut r = rng(seed);
    let codes = (0..rows * cols).map(|_| r.gen_range(0..(1u8 << bits))).collect();
    let scales = (0..rows * cols.div_ceil(group)).map(|_| r.gen_range(0.01f32..0.1)).collect();
    NestedLayer::new("l", codes, QuantGrid::new(bits, group, rows, cols, scales).unwrap()).unwrap()
}

fn random_x(batch: usize, cols: usize, seed: u64) -> Matrix<f32> {
    let mut r = rng(seed);
    Matrix::from_fn(batch, cols, |_, _| r.gen_range(-1.0f32..1.0))
}

#[test]
fn three_bit_task_matches_scalar_oracle() {
    let layer = random_layer(128, 256, 3, 128, 1);
    let x = random_x(4, 256, 2);
    let want = ref_matmul(&x, &layer.dequantize());
    let packed = PackedLayer::from_nested(&layer, PackLayout::Interleaved).unwrap();
    assert!(rel_err(&matmul_ref(&x, &packed).unwrap(), &want) < 1e-6);
    assert!(rel_err(&matmul_packed(&x, &packed).unwrap(), &want) < 1e-6);
}

#[test]
fn batch_one_agrees_across_fifty_seeds() {
    for seed in 0..50u64 {
        for bits in 2..=4u8 {
            let layer = random_layer(64, 320, bits, 64, seed);
            let x = random_x(1, 320, 1000 + seed);
            let packed = PackedLayer::from_nested(&layer, PackLayout::Interleaved).unwrap();
            let want = ref_matmul(&x, &layer.dequantize());
            let e = rel_err(&matmul_packed(&x, &packed).unwrap(), &want);
            assert!(e < 1e-5, "seed {seed} bits {bits}: {e}");
        }
    }
}

#[test]
fn identity_and_zero_inputs() {
    let layer = random_layer(32, 64, 4, 32, 3);
    let packed = PackedLayer::from_nested(&layer, PackLayout::Canonical).unwrap();
    let eye = Matrix::from_fn(64, 64, |i, j| if i == j { 1.0f32 } else { 0.0 });
    let y = matmul_packed(&eye, &packed).unwrap();
    let w = layer.dequantize_f32();
    for i in 0..64 {
        for o in 0..32 {
            assert!((y[(i, o)] - w[(o, i)]).abs() <= 1e-6 * w[(o, i)].abs().max(1.0));
        }
    }
    let z = matmul_packed(&Matrix::zeros(3, 64), &packed).unwrap();
    assert!(z.as_slice().iter().all(|&v| v == 0.0));
}

#[test]
fn dense_baseline_matches_oracle() {
    let layer = random_layer(96, 200, 4, 40, 4);
    let x = random_x(5, 200, 5);
    let want = ref_matmul(&x, &layer.dequantize());
    assert!(rel_err(&matmul_dense(&x, &layer.dequantize_f32()).unwrap(), &want) < 1e-6);
}

#[test]
fn weight_traffic_halves_from_four_to_two_bits() {
    let (w2, _) = theoretical_bytes(256, 512, 1, 2);
    let (w4, _) = theoretical_bytes(256, 512, 1, 4);
    assert_eq!(2 * w2, w4);
    let r2 = bench(BenchParams::new(64, 128, 1, 2, 3)).unwrap();
    let r4 = bench(BenchParams::new(64, 128, 1, 4, 3)).unwrap();
    assert_eq!(r2.weight_bytes as f64 / r4.weight_bytes as f64, 0.5);
    assert_eq!(r4.weight_bytes, 64 * 128 * 4 / 8);
}
