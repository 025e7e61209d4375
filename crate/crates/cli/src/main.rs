//! `matq`: quantize a toy model into a nested checkpoint, slice it, search
//! mixed-precision configs, evaluate and benchmark.
//!
//! Exit codes: 0 on success, 1 on runtime errors, 2 on usage errors.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use matq::bench::{bench, BenchParams};
use matq::checkpoint::{read_checkpoint, write_checkpoint};
use matq::evo::{desk_stages, search, Evaluator, SearchParams, SearchSpace, DESK_TOKEN_DIVISOR};
use matq::grid::{BitWidthSet, ScaleSearch};
use matq::harness::eval::{recon_csv, KlSummary};
use matq::harness::routing::config_label;
use matq::harness::{
    analyze_routing, eval_kl, eval_recon, ActivationSource, CalibSet, Method, PipelineOptions, Selection, ToyModel,
};
use matq::slice::{slice_model, slice_model_uniform, BitConfig, NestedModel};

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<matq::Error> for Failure {
    fn from(e: matq::Error) -> Self {
        Self::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::Runtime(e.to_string())
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(Failure::Usage(msg.into()))
}

#[derive(Parser)]
#[command(name = "matq", version, about = "Nested multi-precision quantization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct Source {
    /// Full-precision model: `toy` or `toy:<seed>`.
    #[arg(long, default_value = "toy")]
    model: String,
    /// Calibration data: `synthetic`, `synthetic:<seed>` or a sample file.
    #[arg(long, default_value = "synthetic")]
    calib: String,
    /// Seed for `toy` and `synthetic` given without one.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = matq::harness::calib::DEFAULT_CALIB)]
    n_calib: usize,
    #[arg(long, default_value_t = matq::harness::calib::DEFAULT_HELDOUT)]
    n_heldout: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Matgptq,
    Rtn,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Kl,
    Recon,
}

#[derive(Subcommand)]
enum Command {
    /// Quantize the model into a nested checkpoint.
    Quantize {
        #[command(flatten)]
        source: Source,
        #[arg(long, value_delimiter = ',', default_value = "3,4,8")]
        bits: Vec<u8>,
        /// Per-width weights, same length as --bits. Defaults to all ones.
        #[arg(long, value_delimiter = ',')]
        lambda: Option<Vec<f64>>,
        #[arg(long, default_value_t = 128)]
        group_size: usize,
        #[arg(long, default_value_t = 0.01)]
        damp: f64,
        #[arg(long, default_value_t = 128)]
        block: usize,
        #[arg(long, value_enum, default_value = "matgptq")]
        method: MethodArg,
        /// Skip the clipping search and use max-abs scales.
        #[arg(long)]
        no_scale_search: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Slice a checkpoint to one width or a per-layer config.
    Slice {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, conflicts_with = "config", required_unless_present = "config")]
        bits: Option<u8>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evolutionary search for a per-layer config at an average width.
    Search {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 3.0)]
        avg_bits: f64,
        #[arg(long, value_delimiter = ',', default_value = "2,3,4")]
        ladder: Vec<u8>,
        #[arg(long, default_value_t = 100)]
        generations: usize,
        #[arg(long, default_value_t = 64)]
        offspring: usize,
        /// Token counts of the reference selection stages are divided by this.
        #[arg(long, default_value_t = DESK_TOKEN_DIVISOR)]
        token_divisor: usize,
        /// Generation log as JSON lines.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Config JSON; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Report KL divergence or per-layer reconstruction error of a checkpoint.
    Eval {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        ckpt: PathBuf,
        /// Uniform widths, one JSON line each; 16 runs full precision.
        #[arg(long, value_delimiter = ',', conflicts_with = "config")]
        bits: Option<Vec<u8>>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "kl")]
        metric: Metric,
        /// CSV destination for `recon`; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time the packed matmul against the dense baseline.
    Bench {
        #[arg(long, default_value_t = 4096)]
        m: usize,
        #[arg(long, default_value_t = 4096)]
        k: usize,
        #[arg(long, value_delimiter = ',', default_value = "1")]
        batch: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "4")]
        bits: Vec<u8>,
        #[arg(long, default_value_t = 15)]
        reps: usize,
        #[arg(long, default_value_t = 128)]
        group_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Per-token best width assignment inside one block.
    Routing {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 0)]
        block: usize,
        #[arg(long, value_delimiter = ',', default_value = "2,3,4")]
        ladder: Vec<u8>,
        #[arg(long, default_value_t = 3)]
        avg_bits: u8,
        /// Held-out rows to analyze.
        #[arg(long, default_value_t = 512)]
        tokens: usize,
        /// `token,best_config,mse` CSV; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// `config,wins` CSV.
        #[arg(long)]
        wins: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> CliResult {
    match command {
        Command::Quantize {
            source,
            bits,
            lambda,
            group_size,
            damp,
            block,
            method,
            no_scale_search,
            out,
        } => {
            let lambda = lambda.unwrap_or_else(|| vec![1.0; bits.len()]);
            if lambda.len() != bits.len() {
                return usage("lambda/bits length mismatch");
            }
            let set = BitWidthSet::new(&bits, &lambda).map_err(|e| Failure::Usage(e.to_string()))?;
            if group_size == 0 || group_size % 32 != 0 {
                return usage("group size must be a positive multiple of 32");
            }
            if !(damp.is_finite() && damp > 0.0) || block == 0 {
                return usage("damp must be positive and block nonzero");
            }
            let model = load_model(&source)?;
            let calib = load_calib(&source, model.dim())?;
            let opts = PipelineOptions {
                bits: set,
                group_size,
                damp_rel: damp,
                block,
                search: if no_scale_search { ScaleSearch::none() } else { ScaleSearch::default() },
                activations: ActivationSource::Quantized,
                method: match method {
                    MethodArg::Matgptq => Method::MatGptq,
                    MethodArg::Rtn => Method::Rtn,
                },
            };
            let output = matq::harness::run_pipeline(&model, &calib, &opts)?;
            write_checkpoint(&output.model, &out)?;
            for r in &output.reports {
                println!("{}", serde_json::to_string(r).map_err(runtime)?);
            }
            Ok(())
        }
        Command::Slice { ckpt, bits, config, out } => {
            let parent = read_checkpoint(&ckpt)?;
            let sliced = match (bits, config) {
                (Some(r), _) => {
                    check_width(r)?;
                    slice_model_uniform(&parent, r)?
                }
                (None, Some(path)) => slice_model(&parent, &read_config(&path)?)?,
                (None, None) => return usage("pass --bits or --config"),
            };
            write_checkpoint(&sliced, &out)?;
            Ok(())
        }
        Command::Search {
            source,
            ckpt,
            avg_bits,
            ladder,
            generations,
            offspring,
            token_divisor,
            log,
            out,
        } => {
            for &r in &ladder {
                check_width(r)?;
            }
            if token_divisor == 0 {
                return usage("token divisor must be positive");
            }
            let params = SearchParams {
                generations,
                offspring,
                stages: desk_stages(token_divisor),
                seed: source.seed,
                ..SearchParams::default()
            };
            params.validate().map_err(|e| Failure::Usage(e.to_string()))?;
            let model = load_model(&source)?;
            let calib = load_calib(&source, model.dim())?;
            let parent = read_checkpoint(&ckpt)?;
            let space = SearchSpace::new(&parent, &ladder)?;
            let evaluator = Evaluator::new(&model, &parent, space, calib.calib().clone())?;
            let outcome = search(&evaluator, avg_bits, &params)?;
            if let Some(path) = log {
                fs::write(path, outcome.log_json_lines())?;
            }
            let text = outcome.best.config.to_json()?;
            match out {
                Some(path) => fs::write(path, text + "\n")?,
                None => println!("{text}"),
            }
            eprintln!(
                "best fitness {:.6} (uniform start {:.6})",
                outcome.best.fitness.unwrap_or(f64::NAN),
                outcome.uniform.fitness.unwrap_or(f64::NAN)
            );
            Ok(())
        }
        Command::Eval {
            source,
            ckpt,
            bits,
            config,
            metric,
            out,
        } => {
            let model = load_model(&source)?;
            let calib = load_calib(&source, model.dim())?;
            let parent = read_checkpoint(&ckpt)?;
            match metric {
                Metric::Kl => {
                    let selections: Vec<(String, Selection)> = match (bits, config) {
                        (Some(list), _) => {
                            let mut v = Vec::new();
                            for r in list {
                                if r < matq::harness::eval::FULL_PRECISION_BITS {
                                    check_width(r)?;
                                }
                                v.push((format!("uniform-{r}"), Selection::Uniform(r)));
                            }
                            v
                        }
                        (None, Some(path)) => {
                            let map = read_config(&path)?;
                            vec![(path.display().to_string(), Selection::Config(map))]
                        }
                        (None, None) => vec![("checkpoint".into(), Selection::Config(own_widths(&parent)))],
                    };
                    for (label, sel) in selections {
                        let kl = eval_kl(&model, &parent, &sel, calib.heldout())?;
                        let summary = KlSummary {
                            selection: label,
                            kl,
                            tokens: calib.heldout().rows(),
                        };
                        println!("{}", serde_json::to_string(&summary).map_err(runtime)?);
                    }
                }
                Metric::Recon => {
                    let csv = recon_csv(&eval_recon(&model, &parent, calib.calib())?);
                    emit(out.as_deref(), &csv)?;
                }
            }
            Ok(())
        }
        Command::Bench {
            m,
            k,
            batch,
            bits,
            reps,
            group_size,
            seed,
        } => {
            for &b in &bits {
                if !(2..=4).contains(&b) {
                    return usage(format!("unsupported bits: {b} (packed kernel supports 2, 3 and 4)"));
                }
            }
            if m == 0 || k == 0 || batch.contains(&0) {
                return usage("dimensions and batch must be positive");
            }
            if reps < 3 {
                return usage("--reps must be at least 3");
            }
            if group_size == 0 || group_size % 32 != 0 {
                return usage("group size must be a positive multiple of 32");
            }
            for &b in &bits {
                for &n in &batch {
                    let params = BenchParams {
                        group_size,
                        seed,
                        ..BenchParams::new(m, k, n, b, reps)
                    };
                    println!("{}", bench(params)?.to_json_line());
                }
            }
            Ok(())
        }
        Command::Routing {
            source,
            ckpt,
            block,
            ladder,
            avg_bits,
            tokens,
            out,
            wins,
        } => {
            for &r in &ladder {
                check_width(r)?;
            }
            let model = load_model(&source)?;
            let calib = load_calib(&source, model.dim())?;
            let parent = read_checkpoint(&ckpt)?;
            let n = tokens.min(calib.heldout().rows());
            if n == 0 {
                return usage("no tokens to analyze");
            }
            let x = calib.heldout().row_range(0, n);
            let report = analyze_routing(&model, &parent, block, &ladder, avg_bits, &x)?;
            emit(out.as_deref(), &report.tokens_csv())?;
            if let Some(path) = wins {
                fs::write(path, report.wins_csv())?;
            }
            match report.plurality() {
                Some(c) => eprintln!(
                    "{} configs; plurality winner {} with {} of {n} tokens",
                    report.configs.len(),
                    config_label(&report.configs[c]),
                    report.wins[c]
                ),
                None => eprintln!("{} configs; no strict plurality winner", report.configs.len()),
            }
            Ok(())
        }
    }
}

fn check_width(r: u8) -> CliResult {
    if !(matq::grid::MIN_BITS..=matq::grid::MAX_BITS).contains(&r) {
        return usage(format!("unsupported bits: {r}"));
    }
    Ok(())
}

/// `name[:seed]`, falling back to `default_seed`.
fn parse_seeded(arg: &str, name: &str, default_seed: u64) -> Option<CliResult<u64>> {
    let rest = arg.strip_prefix(name)?;
    if rest.is_empty() {
        return Some(Ok(default_seed));
    }
    let seed = rest.strip_prefix(':')?;
    Some(seed.parse().map_err(|_| Failure::Usage(format!("bad seed in {arg:?}"))))
}

fn load_model(source: &Source) -> CliResult<ToyModel> {
    match parse_seeded(&source.model, "toy", source.seed) {
        Some(seed) => Ok(ToyModel::toy(seed?)),
        None => usage(format!("unknown model {:?}; expected toy or toy:<seed>", source.model)),
    }
}

fn load_calib(source: &Source, dim: usize) -> CliResult<CalibSet> {
    let set = match parse_seeded(&source.calib, "synthetic", source.seed) {
        Some(seed) => {
            if source.n_calib == 0 || source.n_heldout == 0 {
                return usage("calibration and held-out counts must be positive");
            }
            CalibSet::synthetic(seed?, dim, source.n_calib, source.n_heldout)?
        }
        None => CalibSet::from_file(&source.calib)?,
    };
    if set.dim() != dim {
        return Err(Failure::Runtime(format!(
            "calibration samples have {} features, model has {dim}",
            set.dim()
        )));
    }
    Ok(set)
}

fn read_config(path: &Path) -> CliResult<BTreeMap<String, u8>> {
    let text = fs::read_to_string(path)?;
    Ok(BitConfig::assignment_from_json(&text)?)
}

/// Each layer at the width it is stored at.
fn own_widths(model: &NestedModel) -> BTreeMap<String, u8> {
    model.layers.iter().map(|l| (l.name.clone(), l.bits())).collect()
}

fn emit(path: Option<&Path>, text: &str) -> CliResult {
    match path {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}
