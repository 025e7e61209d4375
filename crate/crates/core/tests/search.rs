use std::collections::BTreeSet;

use matq::evo::{
    desk_stages, fitness_kl, mutate_level_switch, search, Evaluator, SearchParams, SearchSpace,
};
use matq::harness::model::ModelShape;
use matq::harness::{eval_kl, run_pipeline, CalibSet, PipelineOptions, Selection, ToyModel};
use matq::slice::{BitConfig, NestedModel};
use matq::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const LADDER: [u8; 3] = [2, 3, 4];

fn checkpoint(model: &ToyModel, seed: u64, n: usize) -> (NestedModel, CalibSet) {
    let calib = CalibSet::synthetic(seed, model.dim(), n, 256).unwrap();
    let ckpt = run_pipeline(model, &calib, &PipelineOptions::default()).unwrap().model;
    (ckpt, calib)
}

fn quick_params(seed: u64, generations: usize) -> SearchParams {
    SearchParams {
        generations,
        offspring: 16,
        stages: desk_stages(256),
        seed,
        ..SearchParams::default()
    }
}

#[test]
fn thousand_mutations_conserve_the_budget() {
    let shape = ModelShape {
        blocks: 2,
        ..ModelShape::default()
    };
    let model = ToyModel::new(shape, 7).unwrap();
    let (ckpt, _) = checkpoint(&model, 7, 128);
    assert_eq!(ckpt.layers.len(), 8);
    let space = SearchSpace::new(&ckpt, &LADDER).unwrap();
    let start = BitConfig::uniform(&ckpt, 3, &LADDER);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut cfg = start.clone();
    let mut seen = BTreeSet::new();
    let mut violations = 0;
    for _ in 0..1000 {
        let out = mutate_level_switch(&space, &cfg, 10, &mut rng).unwrap();
        if out.config.total_bits(&ckpt).unwrap() != start.budget_bits {
            violations += 1;
        }
        out.config.validate(&ckpt).unwrap();
        seen.insert(out.config.assignment.values().copied().collect::<Vec<u8>>());
        cfg = out.config;
    }
    assert_eq!(violations, 0);
    seen.remove(&vec![3u8; 8]);
    assert!(!seen.is_empty());
}

#[test]
fn identical_models_have_zero_fitness() {
    let base = ToyModel::toy(4);
    let (ckpt, calib) = checkpoint(&base, 4, 256);
    let dequant: Vec<_> = ckpt.layers.iter().map(|l| l.dequantize_f32()).collect();
    let fp = base.with_weights(dequant).unwrap();
    let cfg = BitConfig::uniform(&ckpt, ckpt.master(), &[ckpt.master()]);
    assert_eq!(fitness_kl(&fp, &cfg, &ckpt, calib.heldout()).unwrap(), 0.0);
    let lower = BitConfig::uniform(&ckpt, 3, &LADDER);
    assert!(fitness_kl(&fp, &lower, &ckpt, calib.heldout()).unwrap() > 0.0);
}

#[test]
fn two_bits_diverge_more_than_three() {
    let mut holds = 0;
    for seed in 0..10u64 {
        let model = ToyModel::toy(seed);
        let (ckpt, calib) = checkpoint(&model, seed, 512);
        let two = fitness_kl(&model, &BitConfig::uniform(&ckpt, 2, &LADDER), &ckpt, calib.heldout()).unwrap();
        let three = fitness_kl(&model, &BitConfig::uniform(&ckpt, 3, &LADDER), &ckpt, calib.heldout()).unwrap();
        holds += usize::from(two >= three);
    }
    assert!(holds >= 9, "{holds}/10");
}

#[test]
fn search_is_elitist_budget_exact_and_logged() {
    let model = ToyModel::toy(5);
    let (ckpt, calib) = checkpoint(&model, 5, 512);
    let space = SearchSpace::new(&ckpt, &LADDER).unwrap();
    let eval = Evaluator::new(&model, &ckpt, space, calib.calib().clone()).unwrap();
    let out = search(&eval, 3.0, &quick_params(1, 8)).unwrap();

    assert!(out.best.fitness.unwrap() <= out.uniform.fitness.unwrap());
    assert_eq!(out.best.config.total_bits(&ckpt).unwrap(), out.uniform.config.total_bits(&ckpt).unwrap());
    assert_eq!(out.best.config.budget_bits, 3 * ckpt.total_params());
    assert_eq!(out.log.len(), 9);
    for pair in out.log.windows(2) {
        assert!(pair[1].best_fitness <= pair[0].best_fitness);
    }
    for (line, rec) in out.log_json_lines().lines().zip(&out.log) {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["generation"], rec.generation);
        assert_eq!(v["best_fitness"].as_f64().unwrap(), rec.best_fitness);
        assert_eq!(v["config"].as_object().unwrap().len(), ckpt.layers.len());
    }
    // The searched config applies to the checkpoint and evaluates like any other.
    let kl = eval_kl(&model, &ckpt, &Selection::Config(out.best.config.assignment.clone()), calib.heldout()).unwrap();
    assert!(kl.is_finite() && kl >= 0.0);
}

#[test]
fn full_budget_keeps_the_widest_uniform_config() {
    let model = ToyModel::toy(6);
    let (ckpt, calib) = checkpoint(&model, 6, 256);
    let space = SearchSpace::new(&ckpt, &LADDER).unwrap();
    let eval = Evaluator::new(&model, &ckpt, space, calib.calib().clone()).unwrap();
    let out = search(&eval, 4.0, &quick_params(0, 2)).unwrap();
    assert!(out.best.config.assignment.values().all(|&r| r == 4));
    assert!(out.best.fitness.unwrap() <= out.uniform.fitness.unwrap());
    assert!(out.log.iter().skip(1).all(|r| r.stagnant_offspring == 16));

    for bad in [1.5, 4.5, f64::NAN] {
        assert!(matches!(search(&eval, bad, &quick_params(0, 1)), Err(Error::InfeasibleBudget(_))));
    }
}

#[test]
fn trajectory_does_not_depend_on_thread_count() {
    let model = ToyModel::toy(8);
    let (ckpt, calib) = checkpoint(&model, 8, 256);
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| {
            let space = SearchSpace::new(&ckpt, &LADDER).unwrap();
            let eval = Evaluator::new(&model, &ckpt, space, calib.calib().clone()).unwrap();
            search(&eval, 3.0, &quick_params(3, 4)).unwrap().log_json_lines()
        })
    };
    assert_eq!(run(1), run(3));
}
