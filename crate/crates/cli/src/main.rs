//! `qdistill`: teacher training, student distillation, ablations, sweeps
//! and reports from the command line.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use config::ExperimentArgs;
use qdistill::encode::EncodingKind;
use qdistill::experiment::{
    ablate_encodings, ablate_reducers, prepare_teacher, read_sweep, run_experiment, run_sweep,
    sweep_table, ExperimentConfig, PreparedData, TeacherChoice, SWEEP_ALPHAS, SWEEP_TAUS,
};
use qdistill::reduce::ReducerKind;
use qdistill::stats::{emit_report, read_report_json, ExperimentReport};
use toml::Value;

#[derive(Debug, Parser)]
#[command(
    name = "qdistill",
    version,
    about = "Classical-to-quantum knowledge distillation experiments"
)]
struct Cli {
    /// Log verbosity (-v info, -vv debug); RUST_LOG overrides.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Default, clap::Args)]
struct Thresholds {
    /// Exit with code 3 unless distilled − baseline is at least this many points.
    #[arg(long, value_name = "POINTS")]
    require_gain: Option<f64>,
    /// Exit with code 3 unless the per-seed paired t-test p is below this.
    #[arg(long, value_name = "P")]
    require_p: Option<f64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train (or reuse) the configured teacher and report its test accuracy.
    TrainTeacher {
        #[command(flatten)]
        exp: ExperimentArgs,
    },
    /// Write teacher logits for the student training split.
    ExportLogits {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Destination file [default: <out>/teacher-logits.txt].
        #[arg(long, value_name = "PATH")]
        logits: Option<PathBuf>,
    },
    /// Train students without distillation (alpha = 0).
    TrainStudent {
        #[command(flatten)]
        exp: ExperimentArgs,
    },
    /// Train baseline and distilled students and compare them.
    Distill {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[command(flatten)]
        thresholds: Thresholds,
    },
    /// Compare dimensionality reducers under amplitude encoding.
    AblateReducers {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long, value_delimiter = ',', action = clap::ArgAction::Set, overrides_with = "reducers", default_value = "fc,avgpool,maxpool")]
        reducers: Vec<String>,
        /// Exit with code 3 unless mean accuracy strictly decreases in list order.
        #[arg(long)]
        require_order: bool,
    },
    /// Compare data encodings behind the fc reducer.
    AblateEncodings {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long, value_delimiter = ',', action = clap::ArgAction::Set, overrides_with = "encodings", default_value = "amplitude,angle,qubit")]
        encodings: Vec<String>,
        /// Exit with code 3 unless mean accuracy strictly decreases in list order.
        #[arg(long)]
        require_order: bool,
    },
    /// Validation accuracy over a temperature × weight grid.
    Sweep {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Temperatures [default: 1,2,5].
        #[arg(long, value_delimiter = ',', action = clap::ArgAction::Set, overrides_with = "taus")]
        taus: Option<Vec<f64>>,
        /// Distillation weights [default: 0.1,0.2,...,1.0].
        #[arg(long, value_delimiter = ',', action = clap::ArgAction::Set, overrides_with = "alphas")]
        alphas: Option<Vec<f64>>,
    },
    /// Print and re-emit the report files of a finished run directory.
    Report {
        /// Run directory containing report.json or sweep.csv.
        dir: PathBuf,
        #[command(flatten)]
        thresholds: Thresholds,
    },
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
enum Failure {
    Validation(Vec<String>),
    Runtime(qdistill::Error),
    Threshold(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Runtime(_) => 2,
            Failure::Threshold(_) => 3,
        }
    }
}

impl From<qdistill::Error> for Failure {
    fn from(e: qdistill::Error) -> Self {
        match e {
            qdistill::Error::Config(msg) => Failure::Validation(vec![msg]),
            other => Failure::Runtime(other),
        }
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Validation(errs) => {
                    eprintln!("invalid configuration:");
                    for e in errs {
                        eprintln!("  - {e}");
                    }
                }
                Failure::Runtime(e) => eprintln!("error: {e}"),
                Failure::Threshold(msg) => eprintln!("threshold not met: {msg}"),
            }
            ExitCode::from(f.code())
        }
    }
}

fn run(command: Command) -> Outcome {
    match command {
        Command::TrainTeacher { exp } => train_teacher(&exp),
        Command::ExportLogits { exp, logits } => export_logits(&exp, logits),
        Command::TrainStudent { exp } => {
            let cfg = exp
                .resolve_with(|t| {
                    t.insert("alpha".into(), Value::Float(0.0));
                })
                .map_err(Failure::Validation)?;
            finish(&run_experiment(&cfg)?, &cfg.output);
            Ok(())
        }
        Command::Distill { exp, thresholds } => {
            let cfg = exp.resolve().map_err(Failure::Validation)?;
            let report = run_experiment(&cfg)?;
            finish(&report, &cfg.output);
            check_thresholds(&report, &thresholds)
        }
        Command::AblateReducers {
            exp,
            reducers,
            require_order,
        } => {
            let kinds = parse_list::<ReducerKind>(&reducers)?;
            let cfg = resolve_ablation(&exp)?;
            let data = PreparedData::load(&cfg)?;
            let report = ablate_reducers(&cfg, &kinds, &data, true)?;
            emit_report(&report, &cfg.output)?;
            finish(&report, &cfg.output);
            check_order(&report, require_order)
        }
        Command::AblateEncodings {
            exp,
            encodings,
            require_order,
        } => {
            let kinds = parse_list::<EncodingKind>(&encodings)?;
            let cfg = resolve_ablation(&exp)?;
            let data = PreparedData::load(&cfg)?;
            let report = ablate_encodings(&cfg, &kinds, &data, true)?;
            emit_report(&report, &cfg.output)?;
            finish(&report, &cfg.output);
            check_order(&report, require_order)
        }
        Command::Sweep { exp, taus, alphas } => {
            let cfg = exp.resolve().map_err(Failure::Validation)?;
            let taus = taus.unwrap_or_else(|| SWEEP_TAUS.to_vec());
            let alphas = alphas.unwrap_or_else(|| SWEEP_ALPHAS.to_vec());
            let data = PreparedData::load(&cfg)?;
            let cells = run_sweep(&cfg, &taus, &alphas, &data, true)?;
            print!("{}", sweep_table(&cells));
            println!("written to {}", cfg.output.join("sweep.csv").display());
            Ok(())
        }
        Command::Report { dir, thresholds } => report(&dir, &thresholds),
    }
}

/// Ablation arms train at α = 0, so the teacher setting is irrelevant.
fn resolve_ablation(exp: &ExperimentArgs) -> Result<ExperimentConfig, Failure> {
    exp.resolve_with(|t| {
        t.insert("alpha".into(), Value::Float(0.0));
    })
    .map_err(Failure::Validation)
}

fn parse_list<T: std::str::FromStr<Err = qdistill::Error>>(
    items: &[String],
) -> Result<Vec<T>, Failure> {
    let mut out = Vec::new();
    let mut errs = Vec::new();
    for s in items {
        match s.parse::<T>() {
            Ok(v) => out.push(v),
            Err(e) => errs.push(e.to_string()),
        }
    }
    if errs.is_empty() && out.is_empty() {
        errs.push("empty list".into());
    }
    if errs.is_empty() {
        Ok(out)
    } else {
        Err(Failure::Validation(errs))
    }
}

fn native_teacher(exp: &ExperimentArgs) -> Result<(ExperimentConfig, PreparedData), Failure> {
    let cfg = exp.resolve().map_err(Failure::Validation)?;
    if matches!(cfg.teacher, TeacherChoice::None | TeacherChoice::Logits(_)) {
        return Err(Failure::Validation(vec![format!(
            "teacher: `{}` is not a trainable network",
            cfg.teacher
        )]));
    }
    let data = PreparedData::load(&cfg)?;
    std::fs::create_dir_all(&cfg.output).map_err(|e| {
        Failure::Runtime(qdistill::Error::Config(format!(
            "{}: {e}",
            cfg.output.display()
        )))
    })?;
    Ok((cfg, data))
}

fn train_teacher(exp: &ExperimentArgs) -> Outcome {
    let (cfg, data) = native_teacher(exp)?;
    let t = prepare_teacher(&cfg, &data, Some(&cfg.output))?.expect("native teacher");
    let net = t
        .trained
        .as_ref()
        .map(|m| m.net.name().to_string())
        .unwrap_or_default();
    println!(
        "teacher {net}: test accuracy {:.2}% on {} samples, checkpoint in {}",
        100.0 * t.test_accuracy.unwrap_or(f64::NAN),
        data.test.len(),
        cfg.output.display()
    );
    Ok(())
}

fn export_logits(exp: &ExperimentArgs, dest: Option<PathBuf>) -> Outcome {
    let (cfg, data) = native_teacher(exp)?;
    let t = prepare_teacher(&cfg, &data, Some(&cfg.output))?.expect("native teacher");
    let dest = dest.unwrap_or_else(|| cfg.output.join("teacher-logits.txt"));
    t.logits.write(&dest)?;
    println!(
        "{} logits rows written to {}",
        t.logits.len(),
        dest.display()
    );
    Ok(())
}

fn finish(report: &ExperimentReport, dir: &Path) {
    print!("{}", report.summary_text());
    println!("reports written to {}", dir.display());
}

fn check_thresholds(report: &ExperimentReport, t: &Thresholds) -> Outcome {
    if t.require_gain.is_none() && t.require_p.is_none() {
        return Ok(());
    }
    let Some(c) = report.comparisons.first() else {
        return Err(Failure::Validation(vec![
            "thresholds need a baseline/distilled comparison in the report".into(),
        ]));
    };
    let gain = 100.0 * c.delta_mean;
    let mut missed = Vec::new();
    if let Some(min) = t.require_gain {
        if gain.is_nan() || gain < min {
            missed.push(format!("gain {gain:+.2} points < {min}"));
        }
    }
    if let Some(max) = t.require_p {
        if c.per_seed.p.is_nan() || c.per_seed.p >= max {
            missed.push(format!("p = {:.4e} >= {max}", c.per_seed.p));
        }
    }
    if missed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Threshold(missed.join(", ")))
    }
}

fn check_order(report: &ExperimentReport, required: bool) -> Outcome {
    if !required {
        return Ok(());
    }
    for w in report.arms.windows(2) {
        if w[0].mean().is_nan() || w[0].mean() <= w[1].mean() {
            return Err(Failure::Threshold(format!(
                "{} ({:.2}%) is not above {} ({:.2}%)",
                w[0].label,
                100.0 * w[0].mean(),
                w[1].label,
                100.0 * w[1].mean()
            )));
        }
    }
    Ok(())
}

fn report(dir: &Path, thresholds: &Thresholds) -> Outcome {
    let json = dir.join("report.json");
    let sweep = dir.join("sweep.csv");
    if json.is_file() {
        let report = read_report_json(&json)?;
        emit_report(&report, dir)?;
        finish(&report, dir);
        check_thresholds(&report, thresholds)
    } else if sweep.is_file() {
        print!("{}", sweep_table(&read_sweep(&sweep)?));
        Ok(())
    } else {
        Err(Failure::Runtime(qdistill::Error::Config(format!(
            "{} has neither report.json nor sweep.csv",
            dir.display()
        ))))
    }
}
