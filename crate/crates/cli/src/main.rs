use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dlm_core::harness::*;

#[derive(Parser)]
#[command(name = "dlm", version, about = "Direct localization of RF sources in multipath")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize one trial and write its received samples as CSV.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Trial index within the master seed.
        #[arg(long, default_value_t = 0)]
        trial: usize,
    },
    /// Localize the source(s) of one trial with one method.
    Locate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        trial: usize,
        /// Samples written by `simulate`; waveforms come from the same config, seed and trial.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Run a Monte Carlo sweep and write the results table.
    Montecarlo {
        #[command(flatten)]
        common: Common,
        /// Also write a matplotlib script next to the CSV.
        #[arg(long)]
        plot: bool,
    },
    /// Run the recovery-window sweep over v.
    Theorem {
        #[command(flatten)]
        common: Common,
        /// Comma-separated v values.
        #[arg(long, value_delimiter = ',')]
        v: Vec<f64>,
        #[arg(long)]
        plot: bool,
    },
}

#[derive(Args)]
struct Common {
    /// INI experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated methods: dlm, dpd, dpd_mitigated, indirect_cs, indirect_mf.
    #[arg(long, value_delimiter = ',')]
    method: Vec<Method>,
    /// SNR in dB; replaces the swept values when the sweep is over SNR.
    #[arg(long)]
    snr: Option<f64>,
    #[arg(long)]
    trials: Option<usize>,
}

impl Common {
    fn experiment(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::from_file(p).with_context(|| format!("reading {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if !self.method.is_empty() {
            cfg.methods = self.method.clone();
        }
        if let Some(snr) = self.snr {
            cfg.snr_db = snr;
            if cfg.sweep == SweepParam::Snr {
                cfg.values = vec![snr];
            }
        }
        if let Some(t) = self.trials {
            cfg.trials = t;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_or(&self, default: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(default))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let text = e.to_string();
            eprintln!("{}", text.lines().next().unwrap_or("error: invalid arguments"));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { common, trial } => {
            let cfg = common.experiment()?;
            let data = simulate_trial(&cfg, 0, trial)?;
            let out = common.out_or("signals.csv");
            write_signals(&data.signals, &out)?;
            println!("wrote {} ({} sensors x {} samples, sigma_w {:.6e})", out.display(), data.signals.num_sensors(), data.signals.num_samples(), data.sigma_w);
        }
        Command::Locate { common, trial, input } => {
            let cfg = common.experiment()?;
            let mut data = simulate_trial(&cfg, 0, trial)?;
            if let Some(p) = &input {
                let (n, l) = (data.signals.num_samples(), data.signals.num_sensors());
                data.signals = read_signals(p, n, l, data.signals.sample_rate).with_context(|| format!("reading {}", p.display()))?;
            }
            let [method] = cfg.methods[..] else { bail!("locate takes exactly one --method") };
            let estimates = locate(&cfg, &data, method)?;
            println!("method,source,x,y,error_m");
            for (q, (p, t)) in estimates.iter().zip(&data.scenario.sources).enumerate() {
                println!("{},{q},{},{},{:.3}", method.name(), p.x, p.y, p.distance_to(t));
            }
        }
        Command::Montecarlo { common, plot } => {
            let cfg = common.experiment()?;
            let out = run_monte_carlo(&cfg)?;
            let failures = out.records.iter().filter(|r| r.error.is_some()).count();
            finish(&out.rows, &common.out_or("results.csv"), plot)?;
            if failures > 0 {
                eprintln!("{failures} method runs failed and count as misses");
            }
        }
        Command::Theorem { common, v, plot } => {
            let mut cfg = TheoremConfig::default();
            if common.config.is_some() {
                let e = common.experiment()?;
                (cfg.signal, cfg.grids, cfg.dlm) = (e.signal, e.grids, e.dlm);
            }
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            if let Some(t) = common.trials {
                cfg.trials = t;
            }
            if !v.is_empty() {
                cfg.v_values = v;
            }
            let rows = run_theorem_experiment(&cfg)?;
            finish(&theorem_rows(&rows), &common.out_or("theorem.csv"), plot)?;
        }
    }
    Ok(())
}

fn finish(rows: &[MetricsRow], path: &Path, plot: bool) -> Result<()> {
    emit_results(rows, path, plot)?;
    println!("{:<14} {:<16} {:>10} {:>6} {:>8} {:>10}", "method", "param", "value", "P", "rMSE", "runtime_s");
    for r in rows {
        println!("{:<14} {:<16} {:>10} {:>6.3} {:>8.3} {:>10.3}", r.method, r.param, r.value, r.p, r.rmse, r.runtime_s);
    }
    println!("wrote {}", path.display());
    Ok(())
}
