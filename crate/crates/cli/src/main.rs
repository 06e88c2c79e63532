use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use bitturbo_core::bench::{bench_decode, bench_shapes, BenchConfig};
use bitturbo_core::codec::{freeze_for_edge, Architecture};
use bitturbo_core::config::{parse_config, ExperimentConfig};
use bitturbo_core::container::ModelContainer;
use bitturbo_core::cost::{cost_report, CostReport};
use bitturbo_core::ensemble::{train_bag_on, EnsembleModel};
use bitturbo_core::parallel;
use bitturbo_core::quantize::QuantMode;
use bitturbo_core::sweep::{sweep, write_csv, BlockCodec, EdgeSystem, SweepConfig};
use bitturbo_core::train::{train_full, TrainLog};
use bitturbo_core::Error;

/// Train, compress, deploy and evaluate turbo-autoencoder channel codes.
#[derive(Parser, Debug)]
#[command(name = "bitturbo", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Train a model (or a bag of decoders) and write a model file.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// real, binary or ternary; overrides the config.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        out: PathBuf,
        /// Train this many decoders against one shared real-trained encoder.
        #[arg(long)]
        bag: Option<usize>,
        /// Training-curve CSV (default: next to the model).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Post-training q-bit quantization of a real model's decoder.
    Quantize {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        bits: u8,
        #[arg(long)]
        out: PathBuf,
    },
    /// BER/BLER sweep over an SNR grid.
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// Further models whose decoders join a bag with the first.
        #[arg(long, num_args = 1..)]
        ensemble: Vec<PathBuf>,
        #[arg(long)]
        snr_start: Option<f64>,
        #[arg(long)]
        snr_end: Option<f64>,
        #[arg(long)]
        snr_step: Option<f64>,
        #[arg(long)]
        blocks: Option<usize>,
        #[arg(long)]
        target_errors: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Decode with the float path even if the file holds a packed decoder.
        #[arg(long)]
        float: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Storage and operation counts of a model's decoder.
    Cost {
        #[arg(long)]
        model: Option<PathBuf>,
        /// Cost an untrained architecture instead: desk or paper.
        #[arg(long)]
        profile: Option<String>,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long, default_value_t = 1)]
        members: usize,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Packed vs float decode throughput.
    Bench {
        #[arg(long)]
        model: Option<PathBuf>,
        /// Benchmark random weights at desk or paper layer shapes.
        #[arg(long)]
        profile: Option<String>,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long, default_value_t = 4)]
        iters: usize,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 5)]
        reps: usize,
    },
    /// Freeze binary/ternary decoders into packed form.
    Pack {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Marks an error as caused by bad input (exit code 1).
#[derive(Debug)]
struct Invalid(String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(Invalid(msg.into()))
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.downcast_ref::<Invalid>().is_some() {
            return 1;
        }
        if let Some(err) = cause.downcast_ref::<Error>() {
            return if err.is_validation() { 1 } else { 2 };
        }
    }
    2
}

fn parse_mode(s: &str) -> Result<QuantMode> {
    s.parse::<QuantMode>().map_err(|e| invalid(e.to_string()))
}

fn profile_arch(s: &str) -> Result<Architecture> {
    match s {
        "desk" => Ok(Architecture::desk()),
        "paper" => Ok(Architecture::paper()),
        _ => Err(invalid(format!("unknown profile `{}` (desk|paper)", s))),
    }
}

fn load(path: &Path) -> Result<ModelContainer> {
    if !path.exists() {
        return Err(invalid(format!("model file {} does not exist", path.display())));
    }
    ModelContainer::load(path).with_context(|| format!("loading {}", path.display()))
}

fn save(c: &ModelContainer, path: &Path) -> Result<()> {
    c.save(path).with_context(|| format!("writing {}", path.display()))
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        None => Ok(ExperimentConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| invalid(format!("cannot read config {}: {}", p.display(), e)))?;
            Ok(parse_config(&text).with_context(|| format!("in {}", p.display()))?)
        }
    }
}

fn cmd_train(config: Option<&Path>, mode: Option<&str>, out: &Path, bag: Option<usize>, log: Option<&Path>) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(m) = mode {
        cfg.mode = parse_mode(m)?;
    }
    if matches!(cfg.mode, QuantMode::PostQuant(_)) {
        return Err(invalid("train supports real, binary and ternary; use `quantize` for q-bit models"));
    }
    let tc = cfg.train_config();
    let log_path = log.map(Path::to_path_buf).unwrap_or_else(|| out.with_extension("train.csv"));
    let (container, curve) = match bag {
        None => {
            let (model, curve) = train_full(cfg.arch, &tc, cfg.mode)?;
            (ModelContainer::single(model), curve)
        }
        Some(0) => return Err(invalid("--bag must be >= 1")),
        Some(b) => {
            info!("training shared real encoder");
            let (base, curve) = train_full(cfg.arch, &tc, QuantMode::Real)?;
            let (bag, logs) = train_bag_on(&base, &tc, cfg.mode, b)?;
            for (i, l) in logs.iter().enumerate() {
                let p = log_path.with_extension(format!("member{}.csv", i));
                write_log(l, &p)?;
                println!("wrote {}", p.display());
            }
            (ModelContainer::from_ensemble(&bag), curve)
        }
    };
    let container = ModelContainer {
        config: Some(cfg),
        curve: Some(curve.clone()),
        ..container
    };
    save(&container, out)?;
    write_log(&curve, &log_path)?;
    println!("wrote {} and {}", out.display(), log_path.display());
    Ok(())
}

fn write_log(curve: &TrainLog, path: &Path) -> Result<()> {
    std::fs::write(path, curve.to_csv()).with_context(|| format!("writing {}", path.display()))
}

fn cmd_quantize(model: &Path, bits: u8, out: &Path) -> Result<()> {
    let c = load(model)?;
    let members = c
        .members
        .iter()
        .map(|m| m.post_quantize(bits))
        .collect::<bitturbo_core::Result<Vec<_>>>()?;
    let q = ModelContainer {
        config: c.config.map(|cfg| ExperimentConfig {
            mode: QuantMode::Real,
            ..cfg
        }),
        members,
        packed: Vec::new(),
        curve: c.curve,
    };
    save(&q, out)?;
    println!("wrote {} (quant{})", out.display(), bits);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    model: &Path,
    ensemble: &[PathBuf],
    overrides: (Option<f64>, Option<f64>, Option<f64>),
    blocks: Option<usize>,
    target_errors: Option<u64>,
    seed: Option<u64>,
    float: bool,
    out: Option<&Path>,
) -> Result<()> {
    let base = load(model)?;
    let mut sc = base
        .config
        .as_ref()
        .map(ExperimentConfig::sweep_config)
        .unwrap_or_else(|| ExperimentConfig::desk().sweep_config());
    let (start, end, step) = overrides;
    sc.snr_start = start.unwrap_or(sc.snr_start);
    sc.snr_end = end.unwrap_or(sc.snr_end);
    sc.snr_step = step.unwrap_or(sc.snr_step);
    sc.blocks_per_point = blocks.unwrap_or(sc.blocks_per_point);
    sc.target_bit_errors = target_errors.unwrap_or(sc.target_bit_errors);
    sc.seed = seed.unwrap_or(sc.seed);
    sc.validate()?;

    let mut members = base.members.clone();
    let mut packs = base.packed.clone();
    for p in ensemble {
        let c = load(p)?;
        members.extend(c.members);
        packs.extend(c.packed);
    }
    let bag = EnsembleModel::new(members).map_err(|e| invalid(format!("malformed ensemble set: {}", e)))?;
    let points = if bag.len() > 1 {
        run_sweep(&bag, &sc)?
    } else if !float && packs.len() == 1 {
        let edge = EdgeSystem {
            encoder: bag.encoder_model(),
            decoder: &packs[0],
        };
        run_sweep(&edge, &sc)?
    } else {
        run_sweep(bag.encoder_model(), &sc)?
    };
    match out {
        Some(p) => {
            let f = std::fs::File::create(p).with_context(|| format!("creating {}", p.display()))?;
            write_csv(&points, std::io::BufWriter::new(f))?;
        }
        None => write_csv(&points, std::io::stdout().lock())?,
    }
    Ok(())
}

fn run_sweep(codec: &dyn BlockCodec, sc: &SweepConfig) -> Result<Vec<bitturbo_core::sweep::SweepPoint>> {
    Ok(sweep(codec, sc)?)
}

fn print_cost(r: &CostReport, csv: Option<&Path>) -> Result<()> {
    println!("{}", r);
    println!();
    println!("{}", CostReport::CSV_HEADER);
    println!("{}", r.csv_row());
    if let Some(p) = csv {
        std::fs::write(p, format!("{}\n{}\n", CostReport::CSV_HEADER, r.csv_row()))
            .with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn cmd_cost(model: Option<&Path>, profile: Option<&str>, mode: Option<&str>, members: usize, csv: Option<&Path>) -> Result<()> {
    let report = match (model, profile) {
        (Some(m), None) => {
            let c = load(m)?;
            cost_report(&c.model().arch, c.model().mode, c.members.len())
        }
        (None, Some(p)) => {
            let mode = mode.map(parse_mode).transpose()?.unwrap_or(QuantMode::Real);
            cost_report(&profile_arch(p)?, mode, members)
        }
        _ => return Err(invalid("give exactly one of --model or --profile")),
    };
    print_cost(&report, csv)
}

fn cmd_bench(model: Option<&Path>, profile: Option<&str>, mode: Option<&str>, cfg: BenchConfig) -> Result<()> {
    let report = match (model, profile) {
        (Some(m), None) => {
            let c = load(m)?;
            let model = c.model();
            if !model.mode.is_bitwise() {
                return Err(invalid(format!("bench needs a binary or ternary model, got {}", model.mode)));
            }
            let packed = match c.packed.first() {
                Some(p) => p.clone(),
                None => freeze_for_edge(model)?,
            };
            bench_decode(model, &packed, &cfg)?
        }
        (None, Some(p)) => {
            let mode = mode.map(parse_mode).transpose()?.unwrap_or(QuantMode::Binary);
            if !mode.is_bitwise() {
                return Err(invalid("bench needs --mode binary or ternary"));
            }
            bench_shapes(profile_arch(p)?, mode, &cfg)?
        }
        _ => return Err(invalid("give exactly one of --model or --profile")),
    };
    println!("{}", report);
    Ok(())
}

fn cmd_pack(model: &Path, out: &Path) -> Result<()> {
    let c = load(model)?;
    let packed = c
        .members
        .iter()
        .map(freeze_for_edge)
        .collect::<bitturbo_core::Result<Vec<_>>>()?;
    save(&ModelContainer { packed, ..c }, out)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("BITTURBO_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| invalid(format!("BITTURBO_THREADS must be a positive integer, got `{}`", v)))?;
        parallel::init_threads(n);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.cmd {
        Cmd::Train {
            config,
            mode,
            out,
            bag,
            log,
        } => cmd_train(config.as_deref(), mode.as_deref(), &out, bag, log.as_deref()),
        Cmd::Quantize { model, bits, out } => cmd_quantize(&model, bits, &out),
        Cmd::Eval {
            model,
            ensemble,
            snr_start,
            snr_end,
            snr_step,
            blocks,
            target_errors,
            seed,
            float,
            out,
        } => {
            if blocks == Some(0) {
                bail!(invalid("--blocks must be >= 1"));
            }
            cmd_eval(
                &model,
                &ensemble,
                (snr_start, snr_end, snr_step),
                blocks,
                target_errors,
                seed,
                float,
                out.as_deref(),
            )
        }
        Cmd::Cost {
            model,
            profile,
            mode,
            members,
            csv,
        } => cmd_cost(model.as_deref(), profile.as_deref(), mode.as_deref(), members, csv.as_deref()),
        Cmd::Bench {
            model,
            profile,
            mode,
            iters,
            batch,
            reps,
        } => cmd_bench(
            model.as_deref(),
            profile.as_deref(),
            mode.as_deref(),
            BenchConfig {
                batch,
                iters,
                reps,
                seed: 0,
            },
        ),
        Cmd::Pack { model, out } => cmd_pack(&model, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e);
            ExitCode::from(exit_code(&e))
        }
    }
}
