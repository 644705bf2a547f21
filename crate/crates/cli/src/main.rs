//! `colexp` command-line tool: synthetic data generation, training,
//! evaluation, expert ablations and the gradient check suite.
//!
//! Exit codes: 0 success, 1 invalid input (config, spec, manifest, data),
//! 2 runtime failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use colexp::checkpoint;
use colexp::dataio::synth::{gen_synthetic, SyntheticSpec};
use colexp::experiment::{ablate, eval_seed, load_data, train_seed, AblationMode, CHECKPOINT_DIR};
use colexp::gradcheck::{run_suite, FD_TOLERANCE};
use colexp::model::init_params;
use colexp::report::MultiSeedReport;
use colexp::{Error, RunConfig};

#[derive(Parser)]
#[command(name = "colexp", version, about = "Collaborative-experts video-text retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a planted-correspondence dataset (features, captions, manifest).
    GenSynth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model per configured seed, then evaluate each.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from the checkpoints already in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate checkpoints on the configured evaluation split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// A checkpoint directory, or a run directory holding
        /// `seed_<n>/checkpoint`. Omitted: freshly initialized parameters.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Where reports go (default: `<output>/eval`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate on expert subsets.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// `cumulative`, `pairwise`, or a `+`-separated expert list.
        #[arg(long)]
        experts: String,
    },
    /// Finite-difference check of every differentiable operation.
    GradCheck {
        #[arg(long, default_value_t = 20)]
        seeds: usize,
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(Error::Config(_) | Error::Integrity(_) | Error::Format { .. } | Error::Unencodable(_)) => 1,
        _ => 2,
    }
}

fn run(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::GenSynth { spec, out } => gen_synth(&spec, &out),
        Command::Train { config, resume } => train(&config, resume),
        Command::Eval {
            config,
            checkpoint,
            out,
        } => eval(&config, checkpoint.as_deref(), out.as_deref()),
        Command::Ablate { config, experts } => run_ablation(&config, &experts),
        Command::GradCheck { seeds, corrupt } => grad_check(seeds, corrupt.as_deref()),
    }
}

fn load_config(path: &Path) -> anyhow::Result<RunConfig> {
    Ok(RunConfig::load(path)?)
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_report(dir: &Path, report: &MultiSeedReport) -> anyhow::Result<()> {
    write(&dir.join("report.json"), &(serde_json::to_string_pretty(report)? + "\n"))?;
    let table = report.to_table();
    write(&dir.join("report.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn gen_synth(spec_path: &Path, out: &Path) -> anyhow::Result<()> {
    let text = fs::read_to_string(spec_path).with_context(|| format!("reading {}", spec_path.display()))?;
    let spec: SyntheticSpec = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", spec_path.display())))?;
    let (manifest, _) = gen_synthetic(&spec, out)?;
    println!("wrote {} videos to {}", manifest.entries.len(), out.display());
    Ok(())
}

fn train(config: &Path, resume: bool) -> anyhow::Result<()> {
    let cfg = load_config(config)?;
    let data = load_data(&cfg)?;
    write(&cfg.output.join("config.resolved.json"), &cfg.resolved_json()?)?;
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        let dir = cfg.seed_dir(seed);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let trained = train_seed(&cfg, &cfg.model, &data.train, seed, Some(&dir), resume)?;
        let last = trained.losses.last().copied().unwrap_or(f64::NAN);
        match trained.resumed_from {
            Some(s) => println!("seed {seed}: resumed at step {s}, {} steps, final loss {last:.4}", trained.losses.len()),
            None => println!("seed {seed}: {} steps, final loss {last:.4}", trained.losses.len()),
        }
        let report = eval_seed(&cfg, &cfg.model, &trained.params, &data.eval, seed)?;
        write(&dir.join("report.json"), &(serde_json::to_string_pretty(&report)? + "\n"))?;
        runs.push(report);
    }
    write_report(&cfg.output, &MultiSeedReport::new(runs)?)
}

fn eval(config: &Path, ckpt: Option<&Path>, out: Option<&Path>) -> anyhow::Result<()> {
    let cfg = load_config(config)?;
    let data = load_data(&cfg)?;
    let mut runs = Vec::new();
    let single = ckpt.filter(|p| p.join(checkpoint::HEADER_FILE).exists());
    let seeds = match single {
        Some(dir) => vec![checkpoint::read_header(dir)?.seed],
        None => cfg.seeds.clone(),
    };
    for seed in seeds {
        let like = init_params(&cfg.model, seed)?;
        let params = match (single, ckpt) {
            (Some(dir), _) => checkpoint::load(dir, Some(&cfg.training_hash(seed)?), &like)?.1.params,
            (None, Some(root)) => {
                let dir = root.join(format!("seed_{seed}")).join(CHECKPOINT_DIR);
                if !dir.join(checkpoint::HEADER_FILE).exists() {
                    return Err(anyhow!(Error::Config(format!("no checkpoint for seed {seed} at {}", dir.display()))));
                }
                checkpoint::load(&dir, Some(&cfg.training_hash(seed)?), &like)?.1.params
            }
            (None, None) => like,
        };
        runs.push(eval_seed(&cfg, &cfg.model, &params, &data.eval, seed)?);
    }
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.output.join("eval"));
    write_report(&dir, &MultiSeedReport::new(runs)?)
}

fn run_ablation(config: &Path, experts: &str) -> anyhow::Result<()> {
    let cfg = load_config(config)?;
    let mode = AblationMode::parse(experts);
    colexp::experiment::ablation_rows(&mode, &cfg.model)?;
    let data = load_data(&cfg)?;
    let dir = cfg.output.join("ablation");
    let report = ablate(&cfg, &data, &mode, Some(&dir))?;
    write(&dir.join("ablation.json"), &(serde_json::to_string_pretty(&report)? + "\n"))?;
    let table = report.to_table();
    write(&dir.join("ablation.txt"), &table)?;
    print!("{table}");
    for r in report.rows.iter().filter(|r| r.dropped_train + r.dropped_eval > 0) {
        println!(
            "{}: dropped {} train / {} eval videos with none of these experts",
            r.experts.join("+"),
            r.dropped_train,
            r.dropped_eval
        );
    }
    Ok(())
}

fn grad_check(seeds: usize, corrupt: Option<&str>) -> anyhow::Result<()> {
    let report = run_suite(seeds, corrupt)?;
    for o in &report.ops {
        let mark = if o.passed { "ok  " } else { "FAIL" };
        println!("{mark} {:<14} worst {:.3e} (seed {})", o.op, o.worst, o.worst_seed);
    }
    println!("{} ops × {seeds} seeds in {:.1}s", report.ops.len(), report.seconds);
    let failed: Vec<String> = report
        .failures()
        .map(|o| format!("{} (seed {}, {:.3e})", o.op, o.worst_seed, o.worst))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(anyhow!("relative error ≥ {FD_TOLERANCE:e} in {}", failed.join(", ")))
    }
}
