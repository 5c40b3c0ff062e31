use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use localbins::config::TrainConfig;
use localbins::data::{generate_corpus, read_corpus_file, write_corpus_file, SceneSample};
use localbins::metrics::MetricsReport;
use localbins::train::{self, LossRow, COVERAGE_CSV_HEADER, SWEEP_CSV_HEADER};

#[derive(Parser)]
#[command(name = "localbins", version, about = "Train and inspect LocalBins depth models on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's `seed`.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
            None => TrainConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a procedural scene corpus.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Output corpus file.
        #[arg(long)]
        out: PathBuf,
        /// Use the evaluation split (`eval_scenes`, `eval_data_seed`).
        #[arg(long)]
        eval: bool,
    },
    /// Train a model and write loss CSV, config and checkpoint to `--out`.
    Train {
        #[command(flatten)]
        common: Common,
        /// Training corpus; generated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Print a progress line every this many steps (0 disables).
        #[arg(long, default_value_t = 100)]
        log_every: usize,
    },
    /// Print mean metrics of a checkpoint as CSV.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluation corpus; the generated evaluation split when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Also write `metrics.csv` into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate once per N_seed value; writes `sweep.csv`.
    SweepBins {
        #[command(flatten)]
        common: Common,
        /// Comma-separated N_seed values.
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
        values: Vec<usize>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        eval_data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Point-set comparisons and pixel coverage of naive and query sampling.
    Coverage {
        #[command(flatten)]
        common: Common,
        /// Write `coverage.csv` here instead of printing.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write locality and density curves of a trained checkpoint.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Random pixels per image.
        #[arg(long, default_value_t = 100)]
        locations: usize,
    },
}

fn corpus(cfg: &TrainConfig, path: Option<&Path>, eval: bool) -> Result<Vec<SceneSample>> {
    match path {
        Some(p) => read_corpus_file(p).with_context(|| format!("reading corpus {}", p.display())),
        None if eval => Ok(generate_corpus(cfg.eval_scenes, cfg.height, cfg.width, cfg.range(), cfg.eval_data_seed)),
        None => Ok(generate_corpus(cfg.num_scenes, cfg.height, cfg.width, cfg.range(), cfg.data_seed)),
    }
}

fn progress(every: usize, start: Instant) -> impl FnMut(&LossRow) {
    move |r: &LossRow| {
        if every > 0 && (r.step + 1) % every == 0 {
            eprintln!(
                "step {:>6}  pixel {:.5}  bins {:.5}  total {:.5}  ({:.1}s)",
                r.step + 1,
                r.pixel,
                r.bins,
                r.total,
                start.elapsed().as_secs_f64()
            );
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { common, out, eval } => {
            let cfg = common.load()?;
            let data = corpus(&cfg, None, eval)?;
            write_corpus_file(&out, &data)?;
            eprintln!("wrote {} scenes to {}", data.len(), out.display());
        }
        Command::Train {
            common,
            data,
            out,
            log_every,
        } => {
            let cfg = common.load()?;
            let data = corpus(&cfg, data.as_deref(), false)?;
            let start = Instant::now();
            let report = train::train_with_observer(&cfg, &data, Some(&out), &mut progress(log_every, start))?;
            eprintln!(
                "trained {} steps in {:.1}s, final loss {}",
                report.losses.len(),
                start.elapsed().as_secs_f64(),
                report.final_loss().unwrap_or(f64::NAN)
            );
        }
        Command::Eval {
            common,
            checkpoint,
            data,
            out,
        } => {
            let cfg = common.load()?;
            let data = corpus(&cfg, data.as_deref(), true)?;
            let params = train::read_params(&checkpoint)
                .with_context(|| format!("reading checkpoint {}", checkpoint.display()))?;
            let m = train::evaluate(&cfg, &params, &data)?;
            let text = format!("{}\n{}\n", MetricsReport::CSV_HEADER, m.csv_row());
            if let Some(dir) = out {
                fs::create_dir_all(&dir)?;
                fs::write(dir.join("metrics.csv"), &text)?;
            }
            print!("{text}");
        }
        Command::SweepBins {
            common,
            values,
            data,
            eval_data,
            out,
        } => {
            let cfg = common.load()?;
            let train_data = corpus(&cfg, data.as_deref(), false)?;
            let eval_data = corpus(&cfg, eval_data.as_deref(), true)?;
            let start = Instant::now();
            let mut log = progress(500, start);
            let rows = train::sweep_bins(&cfg, &values, &train_data, &eval_data, &mut |_, r| log(r))?;
            fs::create_dir_all(&out)?;
            let mut text = format!("{SWEEP_CSV_HEADER}\n");
            for (bins, rel) in rows {
                text.push_str(&format!("{bins},{rel}\n"));
            }
            fs::write(out.join("sweep.csv"), &text)?;
            print!("{text}");
        }
        Command::Coverage { common, out } => {
            let cfg = common.load()?;
            let mut text = format!("{COVERAGE_CSV_HEADER}\n");
            for row in train::coverage_study(&cfg)? {
                text.push_str(&row.csv_row());
                text.push('\n');
            }
            match out {
                Some(dir) => {
                    fs::create_dir_all(&dir)?;
                    fs::write(dir.join("coverage.csv"), &text)?;
                }
                None => std::io::stdout().write_all(text.as_bytes())?,
            }
        }
        Command::Analyze {
            common,
            checkpoint,
            data,
            out,
            locations,
        } => {
            let cfg = common.load()?;
            let data = corpus(&cfg, data.as_deref(), true)?;
            let params = train::read_params(&checkpoint)
                .with_context(|| format!("reading checkpoint {}", checkpoint.display()))?;
            let report = train::analyze(&cfg, &params, &data, locations)?;
            report.write(&out)?;
            eprintln!(
                "{} locality rows, {} density rows; {:.1}% of locations non-decreasing",
                report.locality.len(),
                report.density.len(),
                100.0 * report.nondecreasing_fraction()
            );
        }
    }
    Ok(())
}

/// Usage problems (bad flags or config) exit with 1, everything else that
/// fails on the data or files exits with 2.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<localbins::Error>() {
        Some(localbins::Error::Config(_)) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn verify_cli() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn config_errors_are_usage_errors() {
        let e = anyhow::Error::new(localbins::Error::Config("x".into()));
        assert_eq!(exit_code(&e), 1);
        let e = anyhow::Error::new(localbins::Error::Format("x".into())).context("reading corpus");
        assert_eq!(exit_code(&e), 2);
    }
}
