//! Budget-aware elitist search over per-layer bit-widths.
//!
//! A single parent is kept. Each generation mutates it into a batch of
//! offspring with budget-preserving level switches, thins them through
//! selection stages of growing token counts, and the last survivor replaces
//! the parent only if it is strictly better on the fixed final token set.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::model::{kl_rows, log_softmax, ToyModel};
use crate::linalg::Matrix;
use crate::slice::{slice_layer, BitConfig, NestedModel};

/// Full-scale selection schedule as `(survivors, tokens)`.
pub const REFERENCE_STAGES: [(usize, usize); 3] = [(16, 2048), (4, 16384), (1, 131072)];

/// Token counts of [`REFERENCE_STAGES`] are divided by this at desk scale.
pub const DESK_TOKEN_DIVISOR: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub survivors: usize,
    pub tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchParams {
    pub generations: usize,
    pub offspring: usize,
    pub stages: Vec<Stage>,
    pub initial_candidates: usize,
    pub max_mutation_retries: usize,
    pub seed: u64,
}

impl Default for SearchParams {
    fn default() -> Self {
        Self {
            generations: 100,
            offspring: 64,
            stages: desk_stages(DESK_TOKEN_DIVISOR),
            initial_candidates: 10,
            max_mutation_retries: 10,
            seed: 0,
        }
    }
}

/// The reference schedule with token counts divided by `divisor`.
pub fn desk_stages(divisor: usize) -> Vec<Stage> {
    REFERENCE_STAGES
        .iter()
        .map(|&(survivors, tokens)| Stage {
            survivors,
            tokens: (tokens / divisor.max(1)).max(1),
        })
        .collect()
}

impl SearchParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if self.offspring == 0 {
            return bad("at least one offspring per generation is needed");
        }
        let Some(last) = self.stages.last() else {
            return bad("at least one selection stage is needed");
        };
        if last.survivors != 1 {
            return bad("the last stage must keep exactly one survivor");
        }
        if self.stages.iter().any(|s| s.survivors == 0 || s.tokens == 0) {
            return bad("stages need positive survivors and tokens");
        }
        for w in self.stages.windows(2) {
            if w[1].survivors > w[0].survivors {
                return bad("survivors must not increase across stages");
            }
            if w[1].tokens < w[0].tokens {
                return bad("tokens must not decrease across stages");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub config: BitConfig,
    pub fitness: Option<f64>,
}

/// Layer sizes and the widths each layer may take.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SearchSpace {
    names: Vec<String>,
    params: Vec<u64>,
    levels: Vec<Vec<u8>>,
    ladder: Vec<u8>,
}

impl SearchSpace {
    /// Ladder widths above a layer's master width are dropped for that layer.
    pub fn new(model: &NestedModel, ladder: &[u8]) -> Result<Self> {
        let mut sorted = ladder.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.is_empty() {
            return Err(Error::InvalidArgument("empty ladder".into()));
        }
        let levels: Vec<Vec<u8>> = model
            .layers
            .iter()
            .map(|l| sorted.iter().copied().filter(|&b| b <= l.bits()).collect())
            .collect();
        if let Some(i) = levels.iter().position(Vec::is_empty) {
            return Err(Error::InvalidArgument(format!(
                "no ladder width fits layer {}",
                model.layers[i].name
            )));
        }
        Ok(Self {
            names: model.layer_names(),
            params: model.param_counts(),
            levels,
            ladder: sorted,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn min_bits(&self) -> u64 {
        self.params.iter().zip(&self.levels).map(|(&p, l)| p * u64::from(l[0])).sum()
    }

    pub fn max_bits(&self) -> u64 {
        self.params.iter().zip(&self.levels).map(|(&p, l)| p * u64::from(*l.last().expect("nonempty"))).sum()
    }

    pub fn total_params(&self) -> u64 {
        self.params.iter().sum()
    }

    fn indices(&self, config: &BitConfig) -> Result<Vec<usize>> {
        self.names
            .iter()
            .zip(&self.levels)
            .map(|(name, lv)| {
                let r = *config
                    .assignment
                    .get(name)
                    .ok_or_else(|| Error::IncompleteConfig(name.clone()))?;
                lv.iter()
                    .position(|&b| b == r)
                    .ok_or_else(|| Error::InvalidBits(format!("{r} bits for {name} not on the ladder")))
            })
            .collect()
    }

    fn spent(&self, idx: &[usize]) -> u64 {
        idx.iter().enumerate().map(|(i, &k)| self.params[i] * u64::from(self.levels[i][k])).sum()
    }

    fn to_config(&self, idx: &[usize], budget_bits: u64) -> BitConfig {
        BitConfig {
            assignment: self
                .names
                .iter()
                .zip(idx)
                .enumerate()
                .map(|(i, (n, &k))| (n.clone(), self.levels[i][k]))
                .collect(),
            ladder: self.ladder.clone(),
            budget_bits,
        }
    }

    /// Cost in parameter-bits of raising layer `i` one level, if possible.
    fn raise_cost(&self, i: usize, k: usize) -> Option<u64> {
        let lv = &self.levels[i];
        (k + 1 < lv.len()).then(|| u64::from(lv[k + 1] - lv[k]) * self.params[i])
    }

    /// Spend exactly `remaining` bits by raising random layers other than
    /// `skip` one level at a time. Returns false if it gets stuck.
    fn fill(&self, idx: &mut [usize], mut remaining: u64, skip: Option<usize>, rng: &mut ChaCha8Rng) -> bool {
        while remaining > 0 {
            let options: Vec<usize> = (0..idx.len())
                .filter(|&j| Some(j) != skip)
                .filter(|&j| self.raise_cost(j, idx[j]).is_some_and(|c| c <= remaining))
                .collect();
            if options.is_empty() {
                return false;
            }
            let j = options[rng.gen_range(0..options.len())];
            remaining -= self.raise_cost(j, idx[j]).expect("filtered");
            idx[j] += 1;
        }
        true
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MutationOutcome {
    pub config: BitConfig,
    /// No budget-exact move was found; `config` is the input.
    pub stagnant: bool,
}

/// Lower one random layer by one ladder level and hand the freed bits to
/// other layers until they are used up exactly.
pub fn mutate_level_switch(space: &SearchSpace, config: &BitConfig, retries: usize, rng: &mut ChaCha8Rng) -> Result<MutationOutcome> {
    if space.n_layers() < 2 {
        return Err(Error::MutationImpossible("a level switch needs at least two layers".into()));
    }
    let idx = space.indices(config)?;
    if space.spent(&idx) != config.budget_bits {
        return Err(Error::InvalidArgument(format!(
            "config spends {} bits, budget is {}",
            space.spent(&idx),
            config.budget_bits
        )));
    }
    let lowerable: Vec<usize> = (0..idx.len()).filter(|&i| idx[i] > 0).collect();
    if !lowerable.is_empty() {
        for _ in 0..retries.max(1) {
            let i = lowerable[rng.gen_range(0..lowerable.len())];
            let mut next = idx.clone();
            next[i] -= 1;
            let lv = &space.levels[i];
            let freed = u64::from(lv[idx[i]] - lv[next[i]]) * space.params[i];
            if space.fill(&mut next, freed, Some(i), rng) {
                return Ok(MutationOutcome {
                    config: space.to_config(&next, config.budget_bits),
                    stagnant: false,
                });
            }
        }
    }
    Ok(MutationOutcome {
        config: config.clone(),
        stagnant: true,
    })
}

/// Mean `KL(fp ‖ sliced)` of output distributions over the rows of `tokens`.
pub fn fitness_kl(fp: &ToyModel, config: &BitConfig, ckpt: &NestedModel, tokens: &Matrix<f32>) -> Result<f64> {
    let sel = crate::harness::Selection::Config(config.assignment.clone());
    crate::harness::eval_kl(fp, ckpt, &sel, tokens)
}

/// KL fitness over a fixed token pool with the full-precision outputs and
/// every (layer, width) dequantization computed once.
pub struct Evaluator<'a> {
    fp: &'a ToyModel,
    space: SearchSpace,
    weights: Vec<BTreeMap<u8, Matrix<f32>>>,
    pool: Matrix<f32>,
    fp_logp: Matrix<f64>,
}

impl<'a> Evaluator<'a> {
    pub fn new(fp: &'a ToyModel, ckpt: &NestedModel, space: SearchSpace, pool: Matrix<f32>) -> Result<Self> {
        if pool.rows() == 0 {
            return Err(Error::InvalidArgument("no tokens to evaluate on".into()));
        }
        let mut weights = Vec::with_capacity(space.n_layers());
        for (i, name) in fp.layer_names().iter().enumerate() {
            if space.names.get(i) != Some(name) {
                return Err(Error::DimensionMismatch(format!("checkpoint layer order differs at {name}")));
            }
            let layer = ckpt.layers.get(i).expect("same length as names");
            let mut per = BTreeMap::new();
            for &r in &space.levels[i] {
                per.insert(r, slice_layer(layer, r)?.dequantize_f32());
            }
            weights.push(per);
        }
        let fp_logp = log_softmax(&fp.forward(&pool)?);
        Ok(Self {
            fp,
            space,
            weights,
            pool,
            fp_logp,
        })
    }

    pub fn space(&self) -> &SearchSpace {
        &self.space
    }

    pub fn pool_size(&self) -> usize {
        self.pool.rows()
    }

    /// Mean KL over the pool rows `tokens`.
    pub fn fitness(&self, config: &BitConfig, tokens: &[usize]) -> Result<f64> {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("no tokens selected".into()));
        }
        let idx = self.space.indices(config)?;
        let ws: Vec<&Matrix<f32>> = idx
            .iter()
            .enumerate()
            .map(|(i, &k)| &self.weights[i][&self.space.levels[i][k]])
            .collect();
        let x = self.pool.select_rows(tokens);
        let q = log_softmax(&self.fp.forward_with(&x, &ws)?);
        let p = self.fp_logp.select_rows(tokens);
        let kl = kl_rows(&p, &q);
        Ok(kl.iter().sum::<f64>() / kl.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub generation: usize,
    pub best_fitness: f64,
    pub config: BTreeMap<String, u8>,
    pub improved: bool,
    pub stagnant_offspring: usize,
}

impl GenerationRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub best: Candidate,
    /// The seeded uniform member, scored on the final token set.
    pub uniform: Candidate,
    pub log: Vec<GenerationRecord>,
}

impl SearchOutcome {
    pub fn log_json_lines(&self) -> String {
        self.log.iter().map(|r| r.to_json_line() + "\n").collect()
    }
}

/// `avg_bits · total_params`, rounded to whole parameter-bits.
pub fn budget_for(space: &SearchSpace, avg_bits: f64) -> Result<u64> {
    if !avg_bits.is_finite() || avg_bits <= 0.0 {
        return Err(Error::InfeasibleBudget(format!("average of {avg_bits} bits")));
    }
    let budget = (avg_bits * space.total_params() as f64).round() as u64;
    if budget < space.min_bits() || budget > space.max_bits() {
        return Err(Error::InfeasibleBudget(format!(
            "{avg_bits} bits on average is outside the ladder's range [{:.3}, {:.3}]",
            space.min_bits() as f64 / space.total_params() as f64,
            space.max_bits() as f64 / space.total_params() as f64
        )));
    }
    Ok(budget)
}

/// The widest uniform assignment within `budget`, topped up with random
/// single-level raises until it spends the budget exactly.
pub fn closest_uniform(space: &SearchSpace, budget: u64, retries: usize, rng: &mut ChaCha8Rng) -> Result<BitConfig> {
    let start: Vec<usize> = {
        let mut best = vec![0; space.n_layers()];
        for &r in &space.ladder {
            let idx: Option<Vec<usize>> = space.levels.iter().map(|lv| lv.iter().position(|&b| b == r)).collect();
            if let Some(idx) = idx {
                if space.spent(&idx) <= budget {
                    best = idx;
                }
            }
        }
        best
    };
    let need = budget
        .checked_sub(space.spent(&start))
        .ok_or_else(|| Error::InfeasibleBudget("budget is below the narrowest assignment".into()))?;
    for _ in 0..retries.max(1) {
        let mut idx = start.clone();
        if space.fill(&mut idx, need, None, rng) {
            return Ok(space.to_config(&idx, budget));
        }
    }
    Err(Error::InfeasibleBudget(format!("{budget} parameter-bits is not reachable on the ladder")))
}

fn rank(fitness: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..fitness.len()).collect();
    order.sort_by(|&a, &b| fitness[a].total_cmp(&fitness[b]).then(a.cmp(&b)));
    order
}

fn evaluate_all(eval: &Evaluator<'_>, configs: &[&BitConfig], tokens: &[usize]) -> Result<Vec<f64>> {
    configs.par_iter().map(|c| eval.fitness(c, tokens)).collect()
}

pub fn search(eval: &Evaluator<'_>, avg_bits: f64, params: &SearchParams) -> Result<SearchOutcome> {
    params.validate()?;
    let space = eval.space();
    let budget = budget_for(space, avg_bits)?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let retries = params.max_mutation_retries;

    let uniform = closest_uniform(space, budget, retries, &mut rng)?;
    let mut initial = vec![uniform.clone()];
    for _ in 0..params.initial_candidates {
        let mut c = uniform.clone();
        for _ in 0..space.n_layers() {
            c = mutate_level_switch(space, &c, retries, &mut rng)?.config;
        }
        initial.push(c);
    }

    let final_tokens: Vec<usize> = (0..params.stages.last().expect("validated").tokens.min(eval.pool_size())).collect();
    let scores = evaluate_all(eval, &initial.iter().collect::<Vec<_>>(), &final_tokens)?;
    let first = rank(&scores)[0];
    let uniform = Candidate {
        config: uniform,
        fitness: Some(scores[0]),
    };
    let mut parent = initial.swap_remove(first);
    let mut parent_fit = scores[first];
    let mut log = vec![GenerationRecord {
        generation: 0,
        best_fitness: parent_fit,
        config: parent.assignment.clone(),
        improved: false,
        stagnant_offspring: 0,
    }];

    for generation in 1..=params.generations {
        let mut stagnant = 0;
        let mut pool = Vec::with_capacity(params.offspring);
        for _ in 0..params.offspring {
            let m = mutate_level_switch(space, &parent, retries, &mut rng)?;
            stagnant += usize::from(m.stagnant);
            pool.push(m.config);
        }

        let mut alive: Vec<usize> = (0..pool.len()).collect();
        let mut last_scores = Vec::new();
        for (s, stage) in params.stages.iter().enumerate() {
            let tokens: Vec<usize> = if s + 1 == params.stages.len() {
                final_tokens.clone()
            } else {
                let n = stage.tokens.min(eval.pool_size());
                let mut t = sample(&mut rng, eval.pool_size(), n).into_vec();
                t.sort_unstable();
                t
            };
            let configs: Vec<&BitConfig> = alive.iter().map(|&i| &pool[i]).collect();
            let scores = evaluate_all(eval, &configs, &tokens)?;
            let order = rank(&scores);
            let keep = stage.survivors.min(alive.len());
            last_scores = order[..keep].iter().map(|&k| scores[k]).collect();
            alive = order[..keep].iter().map(|&k| alive[k]).collect();
        }

        let improved = last_scores[0] < parent_fit;
        if improved {
            parent = pool.swap_remove(alive[0]);
            parent_fit = last_scores[0];
        }
        log.push(GenerationRecord {
            generation,
            best_fitness: parent_fit,
            config: parent.assignment.clone(),
            improved,
            stagnant_offspring: stagnant,
        });
    }

    Ok(SearchOutcome {
        best: Candidate {
            config: parent,
            fitness: Some(parent_fit),
        },
        uniform,
        log,
    })
}
