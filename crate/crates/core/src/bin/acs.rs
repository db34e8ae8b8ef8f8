//! Command-line front end.
//!
//! Failures print a single `error kind=<kind> msg="<message>"` line on stderr
//! and exit with status 2 for configuration problems, 1 otherwise.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use acs_core::data::load_dataset;
use acs_core::experiment::{
    self, export_score_histogram, run_qat_with, run_sweep, timing_breakdown, write_histogram_csv,
    write_run_outputs, write_summary_csv, RunConfig, ScoreKind, SweepAxis, SweepSeeds,
};
use acs_core::network::save_checkpoint;
use acs_core::scoring::{load_scores, AnnealingStrategy};
use acs_core::selection::{coreset_overlap, load_coreset, Selector};
use acs_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "acs",
    version,
    about = "Quantization-aware training with adaptive coreset selection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train (or load) the full-precision teacher and save its checkpoint.
    TrainTeacher(Common),
    /// Run quantization-aware training.
    Run(Common),
    /// Run once per value along one axis and write summary.csv.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        /// Give every child the base seed instead of a derived one.
        #[arg(long)]
        shared_seed: bool,
    },
    /// Percentage of ids shared by two coreset files of equal size.
    Overlap {
        /// Validate ids against this config's training set.
        #[arg(long)]
        config: Option<PathBuf>,
        a: PathBuf,
        b: PathBuf,
    },
    /// Histogram of one score column of a score dump.
    Histogram {
        #[arg(long)]
        config: Option<PathBuf>,
        scores: PathBuf,
        #[arg(long)]
        epoch: usize,
        #[arg(long, default_value_t = 20)]
        bins: usize,
        #[arg(long, default_value = "acs")]
        score: ScoreKind,
        /// Write CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long)]
    interval: Option<usize>,
    #[arg(long)]
    strategy: Option<AnnealingStrategy>,
    #[arg(long)]
    selector: Option<Selector>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_kd: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut c = RunConfig::load(&self.config)?;
        if let Some(v) = self.fraction {
            c.qat.fraction = v;
        }
        if let Some(v) = self.interval {
            c.qat.interval = v;
        }
        if let Some(v) = self.strategy {
            c.qat.strategy = v;
        }
        if let Some(v) = self.selector {
            c.qat.selector = v;
        }
        if let Some(v) = self.noise {
            c.noise = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if self.no_kd {
            c.qat.kd = false;
        }
        if let Some(v) = &self.out {
            c.out_dir = Some(v.clone());
        }
        c.validate()?;
        Ok(c)
    }
}

fn out_dir(config: &RunConfig) -> PathBuf {
    config
        .out_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("acs-out"))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.display().to_string(),
        source: e,
    })
}

fn write_to(path: &Path, f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    f(&mut buf).expect("writing to memory");
    std::fs::write(path, buf).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn training_len(config: &Option<PathBuf>) -> Result<usize> {
    match config {
        Some(p) => Ok(load_dataset(&RunConfig::load(p)?.data)?.0.len()),
        None => Ok(usize::MAX),
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainTeacher(common) => {
            let mut config = common.load()?;
            config.qat.kd = true;
            let prepared = experiment::prepare(&config)?;
            let teacher = prepared.teacher.as_ref().expect("distillation is on");
            let dir = out_dir(&config);
            create_dir(&dir)?;
            save_checkpoint(teacher, "teacher", dir.join("teacher.ckpt"))?;
            write_to(&dir.join("teacher_metrics.csv"), |w| {
                use std::io::Write;
                writeln!(w, "epoch,train_loss,train_acc")?;
                for (e, s) in prepared.teacher_log.iter().enumerate() {
                    writeln!(w, "{e},{},{}", s.loss, s.accuracy)?;
                }
                Ok(())
            })?;
            let acc =
                acs_core::network::evaluate(teacher, &prepared.test, acs_core::network::Mode::Fp)?;
            println!(
                "teacher test_acc={acc} checkpoint={}",
                dir.join("teacher.ckpt").display()
            );
        }
        Command::Run(common) => {
            let config = common.load()?;
            let prepared = experiment::prepare(&config)?;
            let result = run_qat_with(&config, &prepared)?;
            let dir = out_dir(&config);
            write_run_outputs(&dir, &config, &prepared, &result)?;
            let t = timing_breakdown(&result.metrics);
            let recall = result
                .final_recall()
                .map(|r| format!(" noisy_recall={r}"))
                .unwrap_or_default();
            println!(
                "final_test_acc={} epochs={} rounds={} total_s={:.3} selection_s={:.3} training_s={:.3}{recall} out={}",
                result.final_test_acc(),
                result.epochs,
                result.counters.selection_rounds,
                t.total,
                t.selection,
                t.training,
                dir.display()
            );
        }
        Command::Sweep {
            common,
            axis,
            values,
            shared_seed,
        } => {
            let config = common.load()?;
            let prepared = experiment::prepare(&config)?;
            let dir = out_dir(&config);
            let mut base = config.clone();
            base.out_dir = Some(dir.clone());
            let seeds = if shared_seed {
                SweepSeeds::Shared
            } else {
                SweepSeeds::Derived
            };
            let rows = run_sweep(&base, &prepared, axis, &values, seeds);
            create_dir(&dir)?;
            write_to(&dir.join("summary.csv"), |w| write_summary_csv(&rows, w))?;
            let failed = rows.iter().filter(|r| r.outcome.is_err()).count();
            println!(
                "sweep {axis}: {} runs, {failed} failed, summary={}",
                rows.len(),
                dir.join("summary.csv").display()
            );
        }
        Command::Overlap { config, a, b } => {
            let n = training_len(&config)?;
            let ca = load_coreset(&a, n)?;
            let cb = load_coreset(&b, n)?;
            println!("{}", coreset_overlap(&ca, &cb)?);
        }
        Command::Histogram {
            config,
            scores,
            epoch,
            bins,
            score,
            out,
        } => {
            let records = load_scores(&scores)?;
            let n = training_len(&config)?;
            if let Some(r) = records.iter().find(|r| r.sample_id >= n) {
                return Err(Error::Input(format!(
                    "sample id {} is outside the training set",
                    r.sample_id
                )));
            }
            let hist = export_score_histogram(&records, epoch, bins, score)?;
            match out {
                Some(path) => write_to(&path, |w| write_histogram_csv(&hist, w))?,
                None => {
                    write_histogram_csv(&hist, std::io::stdout().lock()).map_err(|e| Error::Io {
                        path: "<stdout>".into(),
                        source: e,
                    })?
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.kind();
            let msg = e.to_string().replace('\n', " ").replace('"', "'");
            eprintln!("error kind={kind} msg=\"{msg}\"");
            if kind == acs_core::error::ErrorKind::Config {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
