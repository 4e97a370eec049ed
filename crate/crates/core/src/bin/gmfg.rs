use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use gmfg::experiment::{compare_runs, run_experiment, ExperimentConfig, ExperimentError, OutputFormat, Variant};
use gmfg::game::monotonicity_probe;

#[derive(Parser)]
#[command(name = "gmfg", version, about = "Policy mirror descent for entropy-regularized graphon mean-field games")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its convergence trace.
    Run(Common),
    /// Run the base experiment and each variant, writing a joined trace.
    Compare {
        #[command(flatten)]
        common: Common,
        /// JSON list of variants; replaces the config's `variants`.
        #[arg(long)]
        variants: Option<PathBuf>,
    },
    /// Random search for violations of the weak monotonicity inequality.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
    },
    /// Check a config without running it.
    Validate(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<Format>,
    /// Overrides `base_seed`.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    replications: Option<usize>,
    /// Worker threads for replications and per-agent work.
    #[arg(long)]
    parallel: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

impl Common {
    fn load(&self) -> Result<(ExperimentConfig, PathBuf), ExperimentError> {
        let (mut cfg, base) = ExperimentConfig::load(&self.config)?;
        if let Some(out) = &self.out {
            cfg.output.dir = Some(out.clone());
        }
        if let Some(f) = self.format {
            cfg.output.format = match f {
                Format::Csv => OutputFormat::Csv,
                Format::Json => OutputFormat::Json,
            };
        }
        if let Some(seed) = self.seed {
            cfg.base_seed = seed;
        }
        if let Some(r) = self.replications {
            cfg.replications = r;
        }
        if let Some(threads) = self.parallel {
            if threads == 0 {
                return Err(ExperimentError::Invalid("--parallel must be at least 1".into()));
            }
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build_global()
                .map_err(|e| ExperimentError::Runtime(e.to_string()))?;
        }
        Ok((cfg, base))
    }
}

fn read_variants(path: &Path) -> Result<Vec<Variant>, ExperimentError> {
    let text = std::fs::read_to_string(path).map_err(|e| ExperimentError::Invalid(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| ExperimentError::Invalid(format!("{}: {e}", path.display())))
}

fn execute(cli: Cli) -> Result<String, ExperimentError> {
    match cli.command {
        Command::Run(common) => {
            let (cfg, base) = common.load()?;
            let table = run_experiment(&cfg, &base)?;
            let last = table.final_summary().expect("at least one iteration");
            Ok(format!(
                "run: {} replications, t={}, exploit_avg mean={:.6e} min={:.6e} max={:.6e}",
                cfg.replications, last.t, last.mean, last.min, last.max
            ))
        }
        Command::Compare { common, variants } => {
            let (cfg, base) = common.load()?;
            let variants = match variants {
                Some(p) => read_variants(&p)?,
                None => cfg.variants.clone(),
            };
            let table = compare_runs(&cfg, &variants, &base)?;
            let parts: Vec<String> = table
                .variants
                .iter()
                .map(|(name, t)| format!("{name}={:.6e}", t.final_summary().map_or(f64::NAN, |s| s.mean)))
                .collect();
            Ok(format!("compare: final mean exploit_avg {}", parts.join(" ")))
        }
        Command::Probe { common, trials } => {
            let (cfg, base) = common.load()?;
            let prepared = cfg.prepare(&base)?;
            let report = monotonicity_probe(&prepared.game, &prepared.train, trials, cfg.base_seed)
                .map_err(|e| ExperimentError::Runtime(e.to_string()))?;
            if let Some(dir) = &cfg.output.dir {
                std::fs::create_dir_all(dir).map_err(|e| ExperimentError::Runtime(e.to_string()))?;
                let body = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
                std::fs::write(dir.join("probe.json"), body).map_err(|e| ExperimentError::Runtime(e.to_string()))?;
            }
            Ok(format!("probe: trials={} violations={} max_lhs={:.6e}", report.trials, report.violations, report.max_lhs))
        }
        Command::Validate(common) => {
            let (cfg, base) = common.load()?;
            cfg.prepare(&base)?;
            Ok(format!("valid: {}", common.config.display()))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GMFG_LOG", "warn")).init();
    match execute(Cli::parse()) {
        Ok(line) => {
            println!("{line}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("gmfg: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
