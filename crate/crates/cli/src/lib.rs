//! `causalpix` subcommands. Exit codes: 0 success, 1 failure (including a
//! violated probe), 2 usage error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use causalpix_core::ablations::{Ablation, SMALL_FIELD_DEPTH};
use causalpix_core::network::{probe_causality, probe_field, receptive_field, ReceptiveField};
use causalpix_core::run::{Run, RunConfig, RESOLVED_CONFIG_FILE};
use causalpix_core::sampling::{emit_class_grid, emit_samples, GRID_COLUMNS};
use causalpix_core::training::{evaluate, load_checkpoint};
use causalpix_core::{Error, Model, ModelConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "causalpix", version, about = "Autoregressive pixel model with a discretized logistic mixture likelihood")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write metrics.csv, run.json and checkpoint.cpix.
    Train(TrainArgs),
    /// Score a checkpoint on the configured data.
    Eval(EvalArgs),
    /// Draw samples from a checkpoint (or a freshly initialized model) as PPM files.
    Sample(SampleArgs),
    /// Train one named ablation of the configured model.
    Ablate {
        /// softmax_head, dequantized, no_shortcut, no_dropout or small_field_plain
        name: String,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Check causality or the receptive field by exact input gradients.
    Probe {
        #[command(subcommand)]
        what: ProbeCommand,
    },
    /// Print the version.
    Version,
}

#[derive(Args, Debug, Clone)]
struct TrainArgs {
    /// JSON run config; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    /// Overrides the config seed and CAUSALPIX_SEED.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write 0 in the seconds column so the CSV is byte-reproducible.
    #[arg(long)]
    no_wall_clock: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Run config for the data; defaults to run.json next to the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use the raw parameters instead of the EMA ones.
    #[arg(long)]
    raw: bool,
}

#[derive(Args, Debug)]
struct SampleArgs {
    /// Without a checkpoint a desk model is initialized from the seed.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    n: usize,
    #[arg(long)]
    label: Option<usize>,
    /// Write a class grid with this many rows instead of single images.
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Image side in pixels.
    #[arg(long, default_value_t = 16)]
    size: usize,
    #[arg(long, default_value = "samples")]
    out: PathBuf,
    #[arg(long)]
    raw: bool,
}

#[derive(Subcommand, Debug)]
enum ProbeCommand {
    /// Exhaustive check that every output depends only on strictly earlier pixels.
    Causality {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Model config JSON; defaults to the desk config.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the analytic receptive field and compare it with the probed one.
    Field {
        /// Depth of the plain small-field stack.
        #[arg(long, default_value_t = SMALL_FIELD_DEPTH)]
        depth: usize,
        /// Model config JSON instead of a plain stack.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

type CliResult = Result<i32, Error>;

/// Parses `args` (including the program name) and runs the subcommand.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}

fn dispatch(command: Command) -> CliResult {
    match command {
        Command::Train(args) => train(&args, None),
        Command::Ablate { name, train: args } => {
            let ablation: Ablation = name.parse()?;
            train(&args, Some(ablation))
        }
        Command::Eval(args) => eval(&args),
        Command::Sample(args) => sample(&args),
        Command::Probe { what } => probe(what),
        Command::Version => {
            println!("causalpix {}", env!("CARGO_PKG_VERSION"));
            Ok(EXIT_OK)
        }
    }
}

fn run_config(args: &TrainArgs, ablation: Option<Ablation>) -> Result<RunConfig, Error> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_seed_env()?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(n) = args.steps {
        cfg.steps = n;
    }
    if let Some(a) = ablation {
        if args.out.is_none() && args.config.is_none() {
            cfg.out_dir = PathBuf::from("runs").join(a.name());
        }
        cfg.ablation = Some(a);
    }
    if let Some(o) = &args.out {
        cfg.out_dir = o.clone();
    }
    if args.no_wall_clock {
        cfg.wall_clock = false;
    }
    let cwd = std::env::current_dir().map_err(|e| Error::Io {
        path: PathBuf::from("."),
        source: e,
    })?;
    cfg.resolve_paths(&cwd);
    Ok(cfg)
}

fn train(args: &TrainArgs, ablation: Option<Ablation>) -> CliResult {
    let cfg = run_config(args, ablation)?;
    cfg.validate()?;
    let out = cfg.out_dir.clone();
    let mut run = Run::new(cfg)?;
    eprintln!(
        "training {} parameters for {} steps (seed {}) into {}",
        run.model.param_count(),
        run.config.steps,
        run.config.seed,
        out.display()
    );
    run.execute_with(|m| {
        println!(
            "step {:>6}  train {:.4}  eval {:.4}  {:.1}s",
            m.step, m.train_bpd, m.eval_bpd, m.seconds
        )
    })?;
    Ok(EXIT_OK)
}

fn load_model(checkpoint: &Path, raw: bool) -> Result<Model<f32>, Error> {
    let ck = load_checkpoint(checkpoint)?;
    if raw {
        Ok(ck.model)
    } else {
        ck.optim.ema_model(&ck.model)
    }
}

fn eval(args: &EvalArgs) -> CliResult {
    let cfg_path = match &args.config {
        Some(p) => p.clone(),
        None => args
            .checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join(RESOLVED_CONFIG_FILE),
    };
    let cfg = RunConfig::load(&cfg_path)?;
    let model = load_model(&args.checkpoint, args.raw)?;
    let cfg = RunConfig {
        model: model.config().clone(),
        ablation: None,
        ..cfg
    };
    cfg.validate()?;
    let (train, eval) = cfg.datasets()?;
    let bs = cfg.eval_batch_size;
    println!("train_bpd {:.6}", evaluate(&model, &train, bs)?);
    println!("eval_bpd {:.6}", evaluate(&model, &eval, bs)?);
    Ok(EXIT_OK)
}

fn sample(args: &SampleArgs) -> CliResult {
    let model = match &args.checkpoint {
        Some(p) => load_model(p, args.raw)?,
        None => {
            let cfg = ModelConfig {
                n_classes: (args.label.is_some() || args.grid.is_some()).then_some(GRID_COLUMNS),
                ..ModelConfig::desk()
            };
            Model::new(cfg, &mut ChaCha8Rng::seed_from_u64(args.seed))?
        }
    };
    let size = (args.size, args.size);
    match args.grid {
        Some(rows) => {
            let path = emit_class_grid(&model, rows, args.seed, size, &args.out)?;
            println!("{}", path.display());
        }
        None => {
            for path in emit_samples(&model, args.n, args.label, args.seed, size, &args.out)? {
                println!("{}", path.display());
            }
        }
    }
    Ok(EXIT_OK)
}

fn probe_model(checkpoint: Option<&Path>, model: Option<&Path>, fallback: ModelConfig, seed: u64) -> Result<Model<f32>, Error> {
    if let Some(p) = checkpoint {
        return Ok(load_checkpoint(p)?.model);
    }
    let cfg = match model {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.to_path_buf(),
                source: e,
            })?;
            serde_json::from_str(&text)?
        }
        None => fallback,
    };
    Model::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn report_causality(model: &Model<f32>, size: usize, seed: u64) -> Result<bool, Error> {
    let report = probe_causality(model, size, size, seed)?;
    println!(
        "{}x{}: {} violations, {} unseen earlier positions",
        size,
        size,
        report.violations.len(),
        report.unseen.len()
    );
    for ((out, inp), _) in report.violations.iter().zip(0..10) {
        println!("  output {out:?} depends on {inp:?}");
    }
    Ok(report.is_causal())
}

fn probe(what: ProbeCommand) -> CliResult {
    match what {
        ProbeCommand::Causality {
            checkpoint,
            model,
            size,
            seed,
        } => {
            let m = probe_model(checkpoint.as_deref(), model.as_deref(), ModelConfig::desk(), seed)?;
            let ok = report_causality(&m, size, seed)?;
            println!("{}", if ok { "causal" } else { "NOT causal" });
            Ok(if ok { EXIT_OK } else { EXIT_FAILURE })
        }
        ProbeCommand::Field {
            depth,
            model,
            size,
            seed,
        } => {
            let m = probe_model(None, model.as_deref(), ModelConfig::small_field(depth), seed)?;
            match receptive_field(m.config())? {
                ReceptiveField::WholePrefix => {
                    println!("receptive field: whole raster prefix");
                    let report = probe_causality(&m, size, size, seed)?;
                    let ok = report.is_exact_prefix();
                    println!(
                        "probe on {size}x{size}: {}",
                        if ok { "matches" } else { "MISMATCH" }
                    );
                    Ok(if ok { EXIT_OK } else { EXIT_FAILURE })
                }
                ReceptiveField::Local(field) => {
                    println!("head field:     {}", field.head);
                    println!("vertical field: {}", field.vertical);
                    let probed = probe_field(&m, seed)?;
                    let ok = probed == field;
                    if !ok {
                        println!("probed head:     {}", probed.head);
                        println!("probed vertical: {}", probed.vertical);
                    }
                    println!("probe: {}", if ok { "matches" } else { "MISMATCH" });
                    Ok(if ok { EXIT_OK } else { EXIT_FAILURE })
                }
            }
        }
    }
}
