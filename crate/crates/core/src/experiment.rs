//! Config-driven experiment runner: replicated solver runs, variant comparison,
//! and the CSV / JSON trace writers used by the `gmfg` binary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::GmfgError;
use crate::game::{build_beach_bar, BeachBarConfig, GameSpec, TabularGameFile};
use crate::graphon::{discretize, DiscreteGraphon, GraphonSpec};
use crate::solver::{pmd_run_with_eval, IterationRecord, PMDConfig};

/// Failures split by the exit code they map to.
#[derive(Debug, Error)]
pub enum ExperimentError {
    /// Bad config or arguments (exit code 2).
    #[error("invalid config: {0}")]
    Invalid(String),
    /// Anything that fails once the run has started (exit code 1).
    #[error("run failed: {0}")]
    Runtime(String),
}

impl ExperimentError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Invalid(_) => 2,
            Self::Runtime(_) => 1,
        }
    }
}

fn invalid(e: impl std::fmt::Display) -> ExperimentError {
    ExperimentError::Invalid(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> ExperimentError {
    ExperimentError::Runtime(e.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GameSection {
    BeachBar(BeachBarConfig),
    /// JSON file holding a [`TabularGameFile`]; relative paths resolve against
    /// the config file's directory.
    TabularFile { path: PathBuf },
}

impl Default for GameSection {
    fn default() -> Self {
        GameSection::BeachBar(BeachBarConfig::default())
    }
}

impl GameSection {
    pub fn build(&self, base_dir: &Path) -> Result<GameSpec, ExperimentError> {
        match self {
            GameSection::BeachBar(cfg) => build_beach_bar(cfg).map_err(invalid),
            GameSection::TabularFile { path } => {
                let full = if path.is_absolute() { path.clone() } else { base_dir.join(path) };
                let text = fs::read_to_string(&full).map_err(|e| invalid(format!("{}: {e}", full.display())))?;
                let file: TabularGameFile =
                    serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", full.display())))?;
                file.build().map_err(invalid)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    #[default]
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Directory for trace files; nothing is written when absent.
    pub dir: Option<PathBuf>,
    pub format: OutputFormat,
}

/// A named change to the base run used by [`compare_runs`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    /// Fields merged over the base solver section.
    #[serde(default)]
    pub solver: serde_json::Map<String, serde_json::Value>,
    /// Graphon the learner trains on; exploitability is still measured on the
    /// base run's evaluation graphon.
    #[serde(default)]
    pub graphon: Option<GraphonSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub game: GameSection,
    pub graphon: GraphonSpec,
    /// Graphon used to score policies; defaults to `graphon`.
    pub eval_graphon: Option<GraphonSpec>,
    pub n_agents: usize,
    pub solver: PMDConfig,
    pub replications: usize,
    pub base_seed: u64,
    pub output: OutputConfig,
    pub variants: Vec<Variant>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            game: GameSection::default(),
            graphon: GraphonSpec::beach_bar_sbm(),
            eval_graphon: None,
            n_agents: 10,
            solver: PMDConfig::default(),
            replications: 5,
            base_seed: 0,
            output: OutputConfig::default(),
            variants: Vec::new(),
        }
    }
}

/// Everything a run needs, built and checked from an [`ExperimentConfig`].
#[derive(Debug, Clone)]
pub struct PreparedExperiment {
    pub game: GameSpec,
    pub train: DiscreteGraphon,
    pub eval: DiscreteGraphon,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        serde_json::from_str(text).map_err(invalid)
    }

    pub fn load(path: &Path) -> Result<(Self, PathBuf), ExperimentError> {
        let text = fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        let cfg = Self::from_json(&text)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((cfg, base))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Builds the game and graphons and checks every nested section, including variants.
    pub fn prepare(&self, base_dir: &Path) -> Result<PreparedExperiment, ExperimentError> {
        if self.replications == 0 {
            return Err(invalid("replications must be at least 1"));
        }
        if self.n_agents == 0 {
            return Err(invalid("n_agents must be at least 1"));
        }
        let game = self.game.build(base_dir)?;
        let hz = game.horizon();
        let train = discretize(&self.graphon, self.n_agents, hz).map_err(invalid)?;
        let eval = match &self.eval_graphon {
            Some(spec) => discretize(spec, self.n_agents, hz).map_err(invalid)?,
            None => train.clone(),
        };
        self.solver.validate(&game).map_err(invalid)?;
        self.check_sampling(&self.solver)?;
        for v in &self.variants {
            let solver = self.variant_solver(v)?;
            solver.validate(&game).map_err(|e| invalid(format!("variant {}: {e}", v.name)))?;
            self.check_sampling(&solver)?;
            if let Some(g) = &v.graphon {
                g.validate().map_err(|e| invalid(format!("variant {}: {e}", v.name)))?;
            }
        }
        Ok(PreparedExperiment { game, train, eval })
    }

    fn check_sampling(&self, solver: &PMDConfig) -> Result<(), ExperimentError> {
        if solver.q_source == crate::solver::QSource::Estimated {
            crate::estimation::sampled_grid_agents(solver.estimation.n_sampled, self.n_agents).map_err(invalid)?;
        }
        Ok(())
    }

    /// Base solver section with the variant's fields merged in.
    pub fn variant_solver(&self, variant: &Variant) -> Result<PMDConfig, ExperimentError> {
        let mut value = serde_json::to_value(&self.solver).map_err(invalid)?;
        merge(&mut value, &serde_json::Value::Object(variant.solver.clone()));
        serde_json::from_value(value).map_err(|e| invalid(format!("variant {}: {e}", variant.name)))
    }
}

/// Recursive object merge; non-object values in `patch` replace those in `base`.
fn merge(base: &mut serde_json::Value, patch: &serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k.clone()).or_insert(serde_json::Value::Null), v);
            }
        }
        (b, p) => *b = p.clone(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub replication: usize,
    pub t: usize,
    pub exploit_last: f64,
    pub exploit_avg: f64,
}

/// Across-replication statistics of `exploit_avg` at one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub t: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceTable {
    pub rows: Vec<TraceRow>,
    pub summary: Vec<SummaryRow>,
}

impl TraceTable {
    pub fn from_traces(traces: &[Vec<IterationRecord>]) -> Self {
        let rows = traces
            .iter()
            .enumerate()
            .flat_map(|(r, trace)| {
                trace.iter().map(move |rec| TraceRow {
                    replication: r,
                    t: rec.t,
                    exploit_last: rec.exploitability_last,
                    exploit_avg: rec.exploitability_avg,
                })
            })
            .collect();
        let summary = match traces.first() {
            None => Vec::new(),
            Some(first) => (0..first.len())
                .map(|k| {
                    let vals: Vec<f64> = traces.iter().map(|tr| tr[k].exploitability_avg).collect();
                    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                    let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
                    let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    // Rounding can push the mean a ulp outside [min, max].
                    SummaryRow { t: first[k].t, mean: mean.clamp(min, max), min, max }
                })
                .collect(),
        };
        Self { rows, summary }
    }

    /// Total of trace rows and summary rows.
    pub fn len(&self) -> usize {
        self.rows.len() + self.summary.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn final_summary(&self) -> Option<SummaryRow> {
        self.summary.last().copied()
    }

    pub fn trace_csv(&self) -> String {
        let mut out = String::from("replication,t,exploit_last,exploit_avg\n");
        for r in &self.rows {
            writeln!(out, "{},{},{},{}", r.replication, r.t, r.exploit_last, r.exploit_avg).unwrap();
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("t,mean,min,max\n");
        for r in &self.summary {
            writeln!(out, "{},{},{},{}", r.t, r.mean, r.min, r.max).unwrap();
        }
        out
    }

    pub fn write(&self, dir: &Path, format: OutputFormat, stem: &str) -> Result<Vec<PathBuf>, ExperimentError> {
        fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
        let files = match format {
            OutputFormat::Csv => vec![
                (dir.join(format!("{stem}_trace.csv")), self.trace_csv()),
                (dir.join(format!("{stem}_summary.csv")), self.summary_csv()),
            ],
            OutputFormat::Json => {
                vec![(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(self).map_err(runtime)? + "\n")]
            }
        };
        for (path, body) in &files {
            fs::write(path, body).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
        }
        Ok(files.into_iter().map(|(p, _)| p).collect())
    }
}

/// Traces of several named runs, keyed by `(variant, t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareTable {
    pub variants: Vec<(String, TraceTable)>,
}

impl CompareTable {
    pub fn get(&self, name: &str) -> Option<&TraceTable> {
        self.variants.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn trace_csv(&self) -> String {
        let mut out = String::from("variant,replication,t,exploit_last,exploit_avg\n");
        for (name, table) in &self.variants {
            for r in &table.rows {
                writeln!(out, "{name},{},{},{},{}", r.replication, r.t, r.exploit_last, r.exploit_avg).unwrap();
            }
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("variant,t,mean,min,max\n");
        for (name, table) in &self.variants {
            for r in &table.summary {
                writeln!(out, "{name},{},{},{},{}", r.t, r.mean, r.min, r.max).unwrap();
            }
        }
        out
    }

    pub fn write(&self, dir: &Path, format: OutputFormat) -> Result<Vec<PathBuf>, ExperimentError> {
        fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
        let files = match format {
            OutputFormat::Csv => vec![
                (dir.join("compare_trace.csv"), self.trace_csv()),
                (dir.join("compare_summary.csv"), self.summary_csv()),
            ],
            OutputFormat::Json => {
                vec![(dir.join("compare.json"), serde_json::to_string_pretty(self).map_err(runtime)? + "\n")]
            }
        };
        for (path, body) in &files {
            fs::write(path, body).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
        }
        Ok(files.into_iter().map(|(p, _)| p).collect())
    }
}

/// Runs `replications` seeds `base_seed + r` of one solver config, in parallel.
fn replicate(
    prepared: &PreparedExperiment,
    train: &DiscreteGraphon,
    solver: &PMDConfig,
    replications: usize,
    base_seed: u64,
) -> Result<TraceTable, ExperimentError> {
    let traces: Vec<Vec<IterationRecord>> = (0..replications)
        .into_par_iter()
        .map(|r| {
            let cfg = PMDConfig { rng_seed: base_seed.wrapping_add(r as u64), ..solver.clone() };
            pmd_run_with_eval(&prepared.game, train, &prepared.eval, &cfg).map(|o| o.trace)
        })
        .collect::<Result<_, GmfgError>>()
        .map_err(|e| match e {
            GmfgError::Config(_) | GmfgError::Validation(_) | GmfgError::DimensionMismatch { .. } => invalid(e),
            _ => runtime(e),
        })?;
    Ok(TraceTable::from_traces(&traces))
}

/// Runs the base experiment and writes its trace when an output directory is set.
pub fn run_experiment(config: &ExperimentConfig, base_dir: &Path) -> Result<TraceTable, ExperimentError> {
    let prepared = config.prepare(base_dir)?;
    let table = replicate(&prepared, &prepared.train, &config.solver, config.replications, config.base_seed)?;
    if let Some(dir) = &config.output.dir {
        table.write(dir, config.output.format, "run")?;
    }
    Ok(table)
}

/// Runs the base experiment (as variant `base`) followed by each variant.
pub fn compare_runs(config: &ExperimentConfig, variants: &[Variant], base_dir: &Path) -> Result<CompareTable, ExperimentError> {
    let with_variants = ExperimentConfig { variants: variants.to_vec(), ..config.clone() };
    let prepared = with_variants.prepare(base_dir)?;
    let mut out = Vec::with_capacity(variants.len() + 1);
    out.push((
        "base".to_string(),
        replicate(&prepared, &prepared.train, &config.solver, config.replications, config.base_seed)?,
    ));
    for v in variants {
        let solver = config.variant_solver(v)?;
        let train = match &v.graphon {
            Some(spec) => discretize(spec, config.n_agents, prepared.game.horizon()).map_err(invalid)?,
            None => prepared.train.clone(),
        };
        log::info!("variant {}", v.name);
        out.push((v.name.clone(), replicate(&prepared, &train, &solver, config.replications, config.base_seed)?));
    }
    let table = CompareTable { variants: out };
    if let Some(dir) = &config.output.dir {
        table.write(dir, config.output.format)?;
    }
    Ok(table)
}
