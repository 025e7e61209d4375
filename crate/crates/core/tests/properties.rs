mod common;

use common::{ref_pack, ref_slice_code};
use matq::checkpoint::{decode, encode};
use matq::evo::{mutate_level_switch, SearchSpace};
use matq::gptq::CandidateTable;
use matq::grid::{BitWidthSet, QuantGrid};
use matq::kernel::{matmul_packed, matmul_ref, PackedLayer};
use matq::linalg::Matrix;
use matq::pack::{pack, pack_slice, pack_with_layout, unpack, PackLayout};
use matq::slice::{slice_to_code, BitConfig, NestedLayer, NestedModel};
use proptest::prelude::*;
use proptest::sample::subsequence;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn codes_strategy(max_rows: usize, max_cols: usize) -> impl Strategy<Value = (u8, usize, usize, Vec<u8>)> {
    (2u8..=4, 1..=max_rows, 1..=max_cols).prop_flat_map(|(bits, rows, cols)| {
        (
            Just(bits),
            Just(rows),
            Just(cols),
            prop::collection::vec(0u8..(1 << bits), rows * cols),
        )
    })
}

/// Weighted multi-bit error of master code `q`, evaluated from scratch.
fn weighted_error(w: f64, s: f64, c: u8, targets: &[(u8, f64)], q: u32) -> f64 {
    targets
        .iter()
        .map(|&(r, lambda)| {
            let code = ref_slice_code(q, c, r);
            let v = s * f64::from(1u32 << (c - r)) * (f64::from(code) - f64::from(1u32 << (r - 1)));
            lambda * (w - v) * (w - v)
        })
        .sum()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 256, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn selected_code_is_an_exhaustive_minimum(
        w in -4.0f64..4.0,
        s in 0.01f64..1.0,
        targets in subsequence(vec![2u8, 3, 4, 6, 8], 1..=5),
        lambdas in prop::collection::vec(0.05f64..10.0, 5),
    ) {
        let bits = BitWidthSet::new(&targets, &lambdas[..targets.len()]).unwrap();
        let c = bits.master();
        let pairs: Vec<(u8, f64)> = bits.iter().collect();
        let q = u32::from(CandidateTable::new(&bits).select(w, s));
        let chosen = weighted_error(w, s, c, &pairs, q);
        for other in 0..(1u32 << c) {
            let e = weighted_error(w, s, c, &pairs, other);
            // Nothing strictly better (allowing for rounding in the sums),
            // and no exact tie at a smaller code.
            prop_assert!(e >= chosen - 1e-12 * chosen.max(1e-300), "q={q} e={chosen} beaten by {other} e={e}");
            if other < q {
                prop_assert!(e != chosen);
            }
        }
    }

    #[test]
    fn pack_unpack_roundtrip_and_reference_planes((bits, rows, cols, codes) in codes_strategy(6, 100)) {
        let p = pack(&codes, rows, cols, bits).unwrap();
        prop_assert_eq!(unpack(&p).unwrap(), codes.clone());
        let r = ref_pack(&codes, rows, cols, bits);
        prop_assert_eq!(p.base(), r.base.as_slice());
        prop_assert_eq!(p.plane_b2(), r.b2.as_slice());
        prop_assert_eq!(p.plane_b3(), r.b3.as_slice());
        prop_assert_eq!(p.payload_bytes(), usize::from(bits) * rows * cols.div_ceil(32) * 32 / 8);
        let inter = pack_with_layout(&codes, rows, cols, bits, PackLayout::Interleaved).unwrap();
        prop_assert_eq!(unpack(&inter).unwrap(), codes);
        prop_assert_eq!(inter.to_layout(PackLayout::Canonical), p);
    }

    #[test]
    fn pack_slice_is_unpack_slice_pack((bits, rows, cols, codes) in codes_strategy(4, 80), r in 2u8..=4) {
        prop_assume!(r <= bits);
        let p = pack(&codes, rows, cols, bits).unwrap();
        let sliced: Vec<u8> = codes.iter().map(|&q| slice_to_code(u32::from(q), bits, r).unwrap() as u8).collect();
        prop_assert_eq!(pack_slice(&p, r).unwrap(), pack(&sliced, rows, cols, r).unwrap());
    }

    #[test]
    fn checkpoint_roundtrip(
        layers in prop::collection::vec((1usize..6, 1usize..70, 0u64..1000), 1..4),
        master in prop::sample::select(vec![2u8, 3, 4, 6, 8]),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(layers.len() as u64);
        let nested: Vec<NestedLayer> = layers
            .iter()
            .enumerate()
            .map(|(i, &(rows, cols, seed))| {
                use rand::Rng;
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                let codes = (0..rows * cols).map(|_| r.gen_range(0..(1u32 << master)) as u8).collect();
                let scales = (0..rows * cols.div_ceil(32)).map(|_| rng.gen_range(1e-4f32..2.0)).collect();
                NestedLayer::new(format!("layer{i}"), codes, QuantGrid::new(master, 32, rows, cols, scales).unwrap()).unwrap()
            })
            .collect();
        let model = NestedModel {
            bits: if master == 2 { BitWidthSet::single(2).unwrap() } else { BitWidthSet::uniform(&[2, master]).unwrap() },
            group_size: 32,
            damp_rel: 0.01,
            layers: nested,
        };
        let bytes = encode(&model).unwrap();
        let back = decode(&bytes).unwrap();
        prop_assert_eq!(&back, &model);
        prop_assert_eq!(encode(&back).unwrap(), bytes);
    }

    #[test]
    fn level_switch_conserves_budget(
        sizes in prop::collection::vec((1usize..8, 1usize..4), 2..7),
        seed in 0u64..1000,
        start in 2u8..=4,
    ) {
        let layers = sizes
            .iter()
            .enumerate()
            .map(|(i, &(rows, units))| {
                let cols = 32 * units;
                NestedLayer::new(format!("l{i}"), vec![8; rows * cols], QuantGrid::new(4, 32, rows, cols, vec![1.0; rows * units]).unwrap()).unwrap()
            })
            .collect();
        let model = NestedModel { bits: BitWidthSet::uniform(&[2, 3, 4]).unwrap(), group_size: 32, damp_rel: 0.01, layers };
        let space = SearchSpace::new(&model, &[2, 3, 4]).unwrap();
        let mut cfg = BitConfig::uniform(&model, start, &[2, 3, 4]);
        let budget = cfg.budget_bits;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..20 {
            let out = mutate_level_switch(&space, &cfg, 10, &mut rng).unwrap();
            prop_assert_eq!(out.config.total_bits(&model).unwrap(), budget);
            if out.stagnant {
                prop_assert_eq!(&out.config, &cfg);
            } else {
                prop_assert_ne!(&out.config, &cfg);
            }
            cfg = out.config;
        }
    }

    #[test]
    fn packed_matmul_matches_reference(
        (bits, rows, cols, codes) in codes_strategy(40, 200),
        batch in 1usize..17,
        seed in 0u64..100,
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let group = 32;
        let scales = (0..rows * cols.div_ceil(group)).map(|_| rng.gen_range(0.01f32..0.2)).collect();
        let layer = NestedLayer::new("l", codes, QuantGrid::new(bits, group, rows, cols, scales).unwrap()).unwrap();
        let x = Matrix::from_fn(batch, cols, |_, _| rng.gen_range(-1.0f32..1.0));
        for layout in [PackLayout::Canonical, PackLayout::Interleaved] {
            let packed = PackedLayer::from_nested(&layer, layout).unwrap();
            let got = matmul_packed(&x, &packed).unwrap();
            let want = matmul_ref(&x, &packed).unwrap();
            // Absolute bound scaled by the row's magnitude, since single
            // outputs can cancel to near zero.
            for b in 0..batch {
                let mag: f32 = (0..cols).map(|k| x[(b, k)].abs()).sum::<f32>() * 0.2 * 8.0;
                for o in 0..rows {
                    let d = (got[(b, o)] - want[(b, o)]).abs();
                    prop_assert!(d <= 1e-5 * mag.max(1.0), "b={} o={} {} vs {}", b, o, got[(b, o)], want[(b, o)]);
                }
            }
        }
    }
}
