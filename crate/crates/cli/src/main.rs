//! `msf`: inspect models, profile energy, train toy models, run verification suites and
//! convert event files.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or configuration error,
//! 3 data error.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use spikeformer::checkpoint::{load_checkpoint, save_checkpoint};
use spikeformer::config::ConfigFile;
use spikeformer::energy::{estimate_energy, measure_random_rates, FiringRateReport};
use spikeformer::event_file::{load_event_file, Polarity};
use spikeformer::model::{build_model, count_params, ModelConfig};
use spikeformer::train::{blobs, evaluate, finetune_timesteps, train_toy, Dataset};
use spikeformer::verify::{run_suite, Fault, Suite};

#[derive(Parser)]
#[command(name = "msf", version, about = "Spiking transformer toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print stage widths, block counts, parameter count and token counts.
    Info {
        #[arg(long)]
        config: PathBuf,
    },
    /// Estimate energy from a firing-rate file or from rates measured on random input.
    Profile(ProfileArgs),
    /// Train a model on a dataset file; writes a checkpoint and per-epoch metrics.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(short = 'T', long)]
        timesteps: Option<usize>,
    },
    /// Run the verification suites.
    Verify {
        #[arg(long, default_value = "all")]
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Deliberately break a kernel or gradient to exercise failure reporting.
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Write a synthetic Gaussian-blob dataset.
    GenBlobs(BlobArgs),
    /// Bin a `timestamp_us,x,y,polarity` event file into binary frames.
    ConvertEvents(ConvertArgs),
}

#[derive(Args)]
struct ProfileArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, conflicts_with = "measure", required_unless_present = "measure")]
    rates: Option<PathBuf>,
    /// Measure rates on a random batch instead of reading a rate file.
    #[arg(long)]
    measure: bool,
    #[arg(short = 'T', long)]
    timesteps: Option<usize>,
    #[arg(long, default_value_t = 2)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(short = 'T', long)]
    timesteps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from a checkpoint instead of a fresh initialization.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct BlobArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    samples: usize,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long, default_value_t = 3)]
    channels: usize,
    #[arg(long, default_value_t = 16)]
    resolution: usize,
    #[arg(long, default_value_t = 0.5)]
    noise: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct ConvertArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(short = 'T', long = "timesteps")]
    bins: usize,
    #[arg(long)]
    height: usize,
    #[arg(long)]
    width: usize,
    /// One channel per polarity instead of merging them.
    #[arg(long)]
    split_polarity: bool,
}

/// An error tagged with its exit code.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

fn usage<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure {
        code: 2,
        err: e.into(),
    }
}

fn data<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure {
        code: 3,
        err: e.into(),
    }
}

type CmdResult = Result<(), Failure>;

fn load_config(path: &Path) -> Result<(ConfigFile, ModelConfig), Failure> {
    let file = ConfigFile::load(path).map_err(usage)?;
    let cfg = file.model_config().map_err(usage)?;
    Ok((file, cfg))
}

fn load_dataset(path: &Path) -> Result<Dataset<f32>, Failure> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read dataset {}", path.display()))
        .map_err(usage)?;
    Dataset::parse(&text)
        .with_context(|| format!("dataset {}", path.display()))
        .map_err(data)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CmdResult {
    fs::write(path, contents)
        .with_context(|| format!("cannot write {}", path.display()))
        .map_err(usage)
}

fn out_dir(dir: &Path) -> CmdResult {
    fs::create_dir_all(dir)
        .with_context(|| format!("cannot create {}", dir.display()))
        .map_err(usage)
}

fn info(config: &Path) -> CmdResult {
    let (_, cfg) = load_config(config)?;
    let model = build_model::<f32>(&cfg).map_err(usage)?;
    let stages = ["stage1a", "stage1b", "stage2", "stage3", "stage4"];
    let (widths, tokens) = (cfg.dims(), cfg.tokens());
    let mut out = String::new();
    for (i, name) in stages.iter().enumerate() {
        let _ = writeln!(
            out,
            "{name}: dim={} blocks={} tokens={}",
            widths[i], cfg.blocks[i], tokens[i]
        );
    }
    let n = count_params(&model);
    let _ = writeln!(
        out,
        "attention=sdsa{} shortcut={} timesteps={}",
        cfg.sdsa_variant.index(),
        cfg.shortcut.as_str(),
        cfg.timesteps
    );
    let _ = writeln!(out, "params={n} ({:.2}M)", n as f64 / 1e6);
    print!("{out}");
    Ok(())
}

fn profile(a: &ProfileArgs) -> CmdResult {
    let (_, cfg) = load_config(&a.config)?;
    let steps = a.timesteps.unwrap_or(cfg.timesteps);
    if steps == 0 {
        return Err(usage(anyhow::anyhow!("timesteps must be >= 1")));
    }
    let rates = match &a.rates {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("cannot read rates {}", path.display()))
                .map_err(usage)?;
            FiringRateReport::parse(&text)
                .with_context(|| format!("rates {}", path.display()))
                .map_err(data)?
        }
        None => measure_random_rates(&cfg, steps, a.batch, a.seed).map_err(usage)?,
    };
    let report = estimate_energy(&cfg, &rates, steps).map_err(data)?;
    out_dir(&a.out_dir)?;
    write_file(&a.out_dir.join("energy.csv"), report.to_csv())?;
    write_file(&a.out_dir.join("energy.txt"), report.to_text())?;
    if a.measure {
        write_file(&a.out_dir.join("rates.txt"), rates.to_text())?;
    }
    println!("total_mj={:.3} timesteps={steps}", report.total_mj());
    Ok(())
}

fn train(a: &TrainArgs) -> CmdResult {
    let (file, cfg) = load_config(&a.config)?;
    let mut tc = file.train.clone();
    if let Some(e) = a.epochs {
        tc.epochs = e;
    }
    if let Some(t) = a.timesteps {
        tc.timesteps = t;
    }
    if let Some(s) = a.seed {
        tc.seed = s;
    }
    tc.validate().map_err(usage)?;
    let ds = load_dataset(&a.data)?;
    let mut model = match &a.resume {
        Some(path) => {
            let m = load_checkpoint::<f32>(path).map_err(data)?;
            if m.cfg
                != (ModelConfig {
                    seed: m.cfg.seed,
                    ..cfg.clone()
                })
            {
                return Err(usage(anyhow::anyhow!(
                    "checkpoint {} was written for another model",
                    path.display()
                )));
            }
            m
        }
        None => {
            let mut m = build_model::<f32>(&ModelConfig {
                seed: tc.seed,
                ..cfg
            })
            .map_err(usage)?;
            m.zero_residual_branches().map_err(usage)?;
            m
        }
    };
    let mut history = train_toy(&mut model, &ds, &tc).map_err(usage)?;
    if let Some(t_to) = tc.finetune_timesteps {
        history.extend(
            finetune_timesteps(&mut model, &ds, &tc, tc.timesteps, t_to, tc.finetune_epochs)
                .map_err(usage)?,
        );
    }
    out_dir(&a.out_dir)?;
    let lines: String = history.iter().map(|m| m.to_line() + "\n").collect();
    write_file(&a.out_dir.join("metrics.txt"), &lines)?;
    let ckpt = a.out_dir.join("model.ckpt");
    save_checkpoint(&model, &ckpt)
        .with_context(|| format!("cannot write {}", ckpt.display()))
        .map_err(usage)?;
    print!("{lines}");
    println!("checkpoint={}", ckpt.display());
    Ok(())
}

fn eval(checkpoint: &Path, data_path: &Path, timesteps: Option<usize>) -> CmdResult {
    let model = load_checkpoint::<f32>(checkpoint).map_err(data)?;
    let ds = load_dataset(data_path)?;
    let steps = timesteps.unwrap_or(model.cfg.timesteps);
    let (loss, acc) = evaluate(&model, &ds, steps).map_err(usage)?;
    println!("split=eval timesteps={steps} loss={loss:.6} accuracy={acc:.4}");
    Ok(())
}

fn verify(suite: &str, seed: u64, fault: Option<&str>) -> CmdResult {
    let suite = Suite::parse(suite).map_err(usage)?;
    let fault = fault.map(Fault::parse).transpose().map_err(usage)?;
    let report = run_suite(suite, fault, seed);
    print!("{}", report.to_text());
    if report.passed() {
        Ok(())
    } else {
        Err(Failure {
            code: 1,
            err: anyhow::anyhow!("verification failed"),
        })
    }
}

fn gen_blobs(a: &BlobArgs) -> CmdResult {
    let ds = blobs::<f32>(
        a.samples,
        a.classes,
        [a.channels, a.resolution, a.resolution],
        a.noise,
        a.seed,
    )
    .map_err(usage)?;
    write_file(&a.out, ds.to_text())?;
    println!(
        "samples={} classes={} shape={}x{}x{}",
        ds.len(),
        a.classes,
        a.channels,
        a.resolution,
        a.resolution
    );
    Ok(())
}

fn convert_events(a: &ConvertArgs) -> CmdResult {
    if !a.input.is_file() {
        return Err(usage(anyhow::anyhow!(
            "no event file at {}",
            a.input.display()
        )));
    }
    let polarity = if a.split_polarity {
        Polarity::Split
    } else {
        Polarity::Merge
    };
    let frames = load_event_file(&a.input, a.bins, (a.height, a.width), polarity)
        .with_context(|| format!("event file {}", a.input.display()))
        .map_err(|e| match e.downcast_ref::<spikeformer::Error>() {
            Some(spikeformer::Error::Arg(_)) => usage(e),
            _ => data(e),
        })?;
    let c = polarity.channels();
    let mut text = format!("frames {} {c} {} {}\n", a.bins, a.height, a.width);
    for row in frames.data().chunks(a.width) {
        let cells: Vec<&str> = row
            .iter()
            .map(|&b| if b == 1 { "1" } else { "0" })
            .collect();
        text.push_str(&cells.join(" "));
        text.push('\n');
    }
    write_file(&a.out, text)?;
    let per_bin = frames.len() / a.bins;
    let counts: Vec<String> = frames
        .data()
        .chunks(per_bin)
        .map(|f| f.iter().filter(|&&b| b == 1).count().to_string())
        .collect();
    println!("bins={} active_pixels_per_bin={}", a.bins, counts.join(","));
    Ok(())
}

fn init_threads() -> CmdResult {
    let Ok(v) = std::env::var("MSF_THREADS") else {
        return Ok(());
    };
    let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        usage(anyhow::anyhow!(
            "MSF_THREADS must be a positive integer, got {v:?}"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(usage)
}

fn run(cli: Cli) -> CmdResult {
    init_threads()?;
    match cli.cmd {
        Cmd::Info { config } => info(&config),
        Cmd::Profile(a) => profile(&a),
        Cmd::Train(a) => train(&a),
        Cmd::Eval {
            checkpoint,
            data,
            timesteps,
        } => eval(&checkpoint, &data, timesteps),
        Cmd::Verify {
            suite,
            seed,
            inject_fault,
        } => verify(&suite, seed, inject_fault.as_deref()),
        Cmd::GenBlobs(a) => gen_blobs(&a),
        Cmd::ConvertEvents(a) => convert_events(&a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}
