use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use loo_certify::harness::{
    default_threads, emit_csv, emit_svg, preset, run_experiment_threads, with_threads, BoundContext,
    ExperimentConfig, ExperimentResult, ProfileKind, PRESET_NAMES,
};
use loo_certify::stability::fit_profile;
use loo_certify::validation::{verify_all, CSV_HEADER};
use loo_certify::{rng, Error};

#[derive(Parser)]
#[command(name = "loo-certify", version, about = "Leave-one-out risk experiments with stability-based tail bounds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write its CSV files.
    Run {
        #[command(flatten)]
        source: Source,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Worker threads; defaults to LOO_CERTIFY_THREADS or all cores.
        #[arg(long)]
        threads: Option<usize>,
        /// Also write one SVG chart per summary column.
        #[arg(long)]
        svg: bool,
    },
    /// List the built-in configurations.
    Presets {
        /// Print the full configuration of one preset.
        #[arg(long, value_name = "NAME")]
        show: Option<String>,
    },
    /// Fit gradient envelopes and δ3 estimates over the configured n grid.
    Stability {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Evaluate the tail bounds on an ε grid without running the experiment.
    Bounds {
        #[command(flatten)]
        source: Source,
        /// Comma-separated ε values.
        #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
        eps: Vec<f64>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Check the per-estimator stability claims.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        threads: Option<usize>,
    },
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct Source {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in configuration name.
    #[arg(long)]
    preset: Option<String>,
}

impl Source {
    fn load(&self) -> loo_certify::Result<ExperimentConfig> {
        match (&self.config, &self.preset) {
            (Some(path), _) => ExperimentConfig::from_path(path),
            (None, Some(name)) => preset(name),
            (None, None) => Err(Error::Config("one of --config or --preset is required".into())),
        }
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

fn opt_flag(v: Option<bool>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn print_summary(res: &ExperimentResult) {
    println!("{:>6} {:>12} {:>10} {:>10} {:>12}", "n", "std_dev", "tail_freq", "tail_se", "bound_main");
    for s in &res.summaries {
        let bound = s.bound_main.as_ref().map(|b| format!("{:.4e}", b.value)).unwrap_or_else(|| "-".into());
        println!("{:>6} {:>12.5e} {:>10.4} {:>10.4} {:>12}", s.n, s.std_dev, s.tail_freq, s.tail_se, bound);
    }
}

/// Returns whether everything requested succeeded; `Ok(false)` only for failed claims.
fn execute(cli: Cli) -> loo_certify::Result<bool> {
    match cli.command {
        Command::Run {
            source,
            out,
            threads,
            svg,
        } => {
            let cfg = source.load()?;
            let threads = threads.unwrap_or_else(default_threads);
            info!("running {} on {threads} threads", cfg.name);
            let res = run_experiment_threads(&cfg, threads)?;
            let mut written = emit_csv(&res, &out)?;
            if svg {
                written.extend(emit_svg(&res, &out)?);
            }
            print_summary(&res);
            for p in written {
                println!("wrote {}", p.display());
            }
        }
        Command::Presets { show } => match show {
            Some(name) => print!("{}", preset(&name)?.to_text()),
            None => {
                for name in PRESET_NAMES {
                    let c = preset(name)?;
                    println!(
                        "{name:<14} {} on {}, {} loss",
                        c.estimator,
                        c.generator.name(),
                        c.loss.name()
                    );
                }
            }
        },
        Command::Stability { source, threads } => {
            let cfg = source.load()?;
            cfg.validate()?;
            let seed = rng::derive_seed(cfg.base_seed, &[rng::Purpose::Probe as u64]);
            let (_, rows) = with_threads(threads.unwrap_or_else(default_threads), || {
                fit_profile(&cfg.estimator, cfg.loss, &cfg.generator, &cfg.n_grid, cfg.profile_settings, seed)
            })??;
            println!("n,delta1_hat,delta2_hat,violations,probes,delta3,delta3_se");
            for r in rows {
                println!(
                    "{},{:?},{:?},{},{},{:?},{:?}",
                    r.fit.n, r.fit.delta1_hat, r.fit.delta2_hat, r.fit.violations, r.fit.probes, r.delta3.estimate,
                    r.delta3.std_error
                );
            }
        }
        Command::Bounds { source, eps, threads } => {
            let cfg = source.load()?;
            if cfg.profile == ProfileKind::None && cfg.restriction.is_none() {
                return Err(Error::Config(
                    "bounds need `profile` (fitted or analytic) or `restriction_eps_k` in the configuration".into(),
                ));
            }
            if let Some(e) = eps.iter().find(|e| !(**e > 0.0 && e.is_finite())) {
                return Err(Error::Config(format!("--eps values must be positive, got {e}")));
            }
            let ctx = with_threads(threads.unwrap_or_else(default_threads), || BoundContext::prepare(&cfg))??;
            println!("n,eps,bound_main,valid_main,bound_simplified,bound_data_dependent,valid_data_dependent");
            for &n in &cfg.n_grid {
                for &e in &eps {
                    let b = ctx.evaluate(&cfg, n, e)?;
                    println!(
                        "{n},{e:?},{},{},{},{},{}",
                        opt(b.main.as_ref().map(|x| x.value)),
                        opt_flag(b.main.as_ref().map(|x| x.valid)),
                        opt(b.simplified.as_ref().map(|x| x.value)),
                        opt(b.data_dependent.as_ref().map(|x| x.value)),
                        opt_flag(b.data_dependent.as_ref().map(|x| x.valid)),
                    );
                }
            }
        }
        Command::Verify { seed, threads } => {
            let checks = with_threads(threads.unwrap_or_else(default_threads), || verify_all(seed))??;
            println!("{CSV_HEADER}");
            for c in &checks {
                println!("{}", c.csv_line());
            }
            let passed = checks.iter().filter(|c| c.passed()).count();
            eprintln!();
            for c in &checks {
                eprintln!("{:<16} {:<4} {}", c.claim_id, c.status, c.detail);
            }
            eprintln!("{passed} of {} claims pass", checks.len());
            return Ok(passed == checks.len());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) if e.is_config() => {
            eprintln!("configuration error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
