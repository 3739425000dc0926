use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use decoupled_mae::data::{DataFormat, SplitKind};
use decoupled_mae::harness::{self, AblationMode, ExperimentConfig, SynthPreset, SynthSource};
use decoupled_mae::Result;

/// Masked-autoencoder pre-training and forecasting experiments.
#[derive(Parser)]
#[command(name = "dmae", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its mirage manifest.
    Synth(SynthArgs),
    /// Pre-train the autoencoders selected by the ablation mode.
    Pretrain(ConfigArgs),
    /// Train the forecaster (and the baseline) on pre-trained checkpoints.
    Train(ConfigArgs),
    /// Pre-train, then train.
    Run(ConfigArgs),
    /// Evaluate a stored forecaster on one split.
    Eval(EvalArgs),
    /// Write plot-ready CSVs for a finished run.
    Report(ReportArgs),
    /// Repeat the pipeline over several masking ratios.
    Sweep(SweepArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Binary,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Sinusoid,
    Latent,
    Mirage,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Args)]
struct SynthArgs {
    /// Generator spec (JSON or TOML); flags below are used when absent.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Output directory.
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "binary")]
    format: Format,
    #[arg(long, value_enum, default_value = "sinusoid")]
    preset: Preset,
    #[arg(long)]
    n_nodes: Option<usize>,
    #[arg(long)]
    n_steps: Option<usize>,
    #[arg(long)]
    daily_period: Option<usize>,
    #[arg(long)]
    noise_std: Option<f64>,
    #[arg(long)]
    mirage_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (TOML). Defaults apply to every missing key.
    #[arg(long, short, env = "DMAE_CONFIG")]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set pretrain.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// full, s-only, t-only, mixed or none.
    #[arg(long)]
    ablation: Option<String>,
    #[arg(long)]
    mask_ratio: Option<f64>,
    /// Seed of both training phases.
    #[arg(long)]
    seed: Option<u64>,
    /// Relative paths are resolved against $DMAE_OUTPUT_ROOT.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long, value_enum)]
    precision: Option<PrecisionArg>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Forecaster checkpoint; defaults to the run directory's.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: Split,
    /// Where eval_<split>.json goes; defaults to the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory holding config.toml.
    run_dir: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, value_delimiter = ',', default_values_t = harness::SWEEP_RATIOS)]
    ratios: Vec<f64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(a) = &self.ablation {
            a.parse::<AblationMode>()?;
            overrides.push(format!("ablation=\"{a}\""));
        }
        if let Some(r) = self.mask_ratio {
            overrides.push(format!("mae.mask_ratio={r:?}"));
        }
        if let Some(s) = self.seed {
            overrides.push(format!("pretrain.seed={s}"));
            overrides.push(format!("forecast.seed={s}"));
        }
        if let Some(d) = &self.output_dir {
            overrides.push(format!("output_dir={:?}", d.display().to_string()));
        }
        if let Some(p) = self.precision {
            let p = match p {
                PrecisionArg::F32 => "f32",
                PrecisionArg::F64 => "f64",
            };
            overrides.push(format!("precision=\"{p}\""));
        }
        match &self.config {
            Some(path) => ExperimentConfig::load_with_overrides(path, &overrides),
            None => ExperimentConfig::from_toml_with_overrides("", &overrides),
        }
    }
}

fn synth(args: &SynthArgs) -> Result<()> {
    let spec = match &args.spec {
        Some(p) => harness::load_synth_spec(p)?,
        None => {
            let d = SynthSource::default();
            SynthSource {
                preset: match args.preset {
                    Preset::Sinusoid => SynthPreset::Sinusoid,
                    Preset::Latent => SynthPreset::Latent,
                    Preset::Mirage => SynthPreset::Mirage,
                },
                n_nodes: args.n_nodes.unwrap_or(d.n_nodes),
                n_steps: args.n_steps.unwrap_or(d.n_steps),
                daily_period: args.daily_period.unwrap_or(d.daily_period),
                noise_std: args.noise_std.unwrap_or(d.noise_std),
                mirage_fraction: args.mirage_fraction.unwrap_or(d.mirage_fraction),
                seed: args.seed.unwrap_or(d.seed),
                ..d
            }
            .to_spec()
        }
    };
    let format = match args.format {
        Format::Binary => DataFormat::Binary,
        Format::Csv => DataFormat::Csv,
    };
    let a = harness::cmd_synth(&spec, &args.out, format)?;
    println!(
        "wrote {} ({} steps × {} nodes), {} mirage records in {}",
        a.dataset.display(),
        a.t_total,
        a.n_nodes,
        a.mirage_pairs,
        a.manifest.display()
    );
    println!("experiment config: {}", a.config.display());
    Ok(())
}

fn print_run(report: &harness::RunReport, run_dir: &Path) {
    for n in &report.notices {
        println!("note: {n}");
    }
    println!(
        "{:<10} {:>6} {:>10} {:>10} {:>10} {:>12}",
        "run", "split", "MAE", "RMSE", "MAPE%", "mirage MAE"
    );
    for run in &report.runs {
        for s in &run.splits {
            let m = &s.metrics.raw.overall;
            println!(
                "{:<10} {:>6} {:>10.4} {:>10.4} {:>10} {:>12}",
                run.name,
                format!("{:?}", s.split).to_lowercase(),
                m.mae,
                m.rmse,
                m.mape.map_or("-".into(), |v| format!("{v:.2}")),
                s.mirage.as_ref().map_or("-".into(), |m| format!("{:.4}", m.raw_mae)),
            );
        }
    }
    if let Some(c) = &report.comparison {
        println!("validation MAE change vs baseline: {:+.1}%", -100.0 * c.mae_improvement);
        if let Some(m) = c.mirage_improvement {
            println!("mirage-window MAE change vs baseline: {:+.1}%", -100.0 * m);
        }
    }
    println!("report: {}", run_dir.join(harness::RUN_REPORT_FILE).display());
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(args) => synth(&args),
        Command::Pretrain(args) => {
            let cfg = args.load()?;
            let r = harness::cmd_pretrain(&cfg)?;
            if let Some(n) = &r.notice {
                println!("note: {n}");
            }
            for p in &r.phases {
                println!(
                    "{}: {} epochs, final loss {:.5}, best val {} -> {}",
                    p.name,
                    p.epochs,
                    p.final_loss,
                    p.best_val.map_or("-".into(), |v| format!("{v:.5}")),
                    cfg.run_dir().join(&p.checkpoint).display()
                );
            }
            Ok(())
        }
        Command::Train(args) => {
            let cfg = args.load()?;
            print_run(&harness::cmd_train(&cfg)?, &cfg.run_dir());
            Ok(())
        }
        Command::Run(args) => {
            let cfg = args.load()?;
            print_run(&harness::cmd_run(&cfg)?, &cfg.run_dir());
            Ok(())
        }
        Command::Eval(args) => {
            let cfg = args.config.load()?;
            let split = match args.split {
                Split::Train => SplitKind::Train,
                Split::Val => SplitKind::Val,
                Split::Test => SplitKind::Test,
            };
            let r = harness::cmd_eval(&cfg, args.checkpoint.as_deref(), split, args.out.as_deref())?;
            if let Some(w) = &r.warning {
                println!("warning: {w}");
            }
            println!("{}", serde_json::to_string_pretty(&r.metrics)?);
            Ok(())
        }
        Command::Report(args) => {
            for w in harness::cmd_report(&args.run_dir)?.written {
                println!("{}", args.run_dir.join(w).display());
            }
            Ok(())
        }
        Command::Sweep(args) => {
            let cfg = args.config.load()?;
            let r = harness::cmd_sweep(&cfg, &args.ratios)?;
            print!("{}", r.table);
            if let Some(b) = r.baseline_val_mae {
                println!("baseline val_mae: {b}");
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
