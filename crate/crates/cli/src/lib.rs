//! Experiment configuration and the batch commands behind the `drsls`
//! binary. Every command reads one JSON config, writes its artifacts into
//! the output directory and echoes the resolved configuration next to them.

use std::fs;
use std::path::{Path, PathBuf};

use drsls::harness::{
    metrics_csv, monte_carlo, prepare_scenario, trajectories_csv, DisturbanceSpec, MethodSummary, MonteCarloConfig,
    TrueSystem, CLIP,
};
use drsls::lti::{InnovationModel, ModelDocument};
use drsls::synthesis::{grid_search, solve_nominal, ResultDocument};
use drsls::validate::{run_suites, ValidationReport};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;
pub const EXIT_SUITE: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Config { path: PathBuf, source: drsls::Error },
    #[error(transparent)]
    Core(#[from] drsls::Error),
    #[error("property suites failed: {0}")]
    Suites(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use drsls::Error as E;
        match self {
            CliError::Config { .. } => EXIT_VALIDATION,
            CliError::Suites(_) => EXIT_SUITE,
            CliError::Core(e) => match e {
                E::Dimension(_) | E::Validation { .. } | E::Parse(_) | E::Io(_) | E::Json(_) => EXIT_VALIDATION,
                E::Solver { .. }
                | E::GridInfeasible { .. }
                | E::Sampling { .. }
                | E::Conditioning { .. }
                | E::Structure(_)
                | E::Premise(_) => EXIT_SOLVER,
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

fn default_validation_draws() -> usize {
    200
}

/// One experiment. `model` is resolved against the directory of the config
/// file; `output_dir` against the working directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: PathBuf,
    pub output_dir: PathBuf,
    pub process_noise: DisturbanceSpec,
    pub measurement_noise: DisturbanceSpec,
    pub experiment: MonteCarloConfig,
    /// Random cases per property suite in `validate`.
    #[serde(default = "default_validation_draws")]
    pub validation_draws: usize,
}

/// A parsed config with its plant loaded.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: ExperimentConfig,
    pub model_path: PathBuf,
    pub system: TrueSystem,
}

#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

pub fn load(path: &Path, overrides: &Overrides) -> Result<Loaded> {
    let wrap = |source: drsls::Error| CliError::Config { path: path.to_path_buf(), source };
    let text = fs::read_to_string(path).map_err(|e| wrap(e.into()))?;
    let mut config: ExperimentConfig = serde_json::from_str(&text).map_err(|e| wrap(e.into()))?;
    if let Some(seed) = overrides.seed {
        config.experiment.seed = seed;
    }
    if let Some(out) = &overrides.out {
        config.output_dir = out.clone();
    }
    config.experiment.validate().map_err(wrap)?;

    let model_path = path.parent().unwrap_or(Path::new(".")).join(&config.model);
    let model =
        InnovationModel::load(&model_path).map_err(|source| CliError::Config { path: model_path.clone(), source })?;
    let system =
        TrueSystem::new(model, config.process_noise.clone(), config.measurement_noise.clone()).map_err(wrap)?;
    Ok(Loaded { config, model_path, system })
}

/// Provenance written next to every artifact.
#[derive(Debug, Serialize)]
struct RunRecord<'a, T: Serialize> {
    command: &'a str,
    version: &'a str,
    config: &'a ExperimentConfig,
    model: ModelDocument,
    #[serde(flatten)]
    body: T,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(drsls::Error::from)?;
    fs::write(path, text + "\n").map_err(drsls::Error::from)?;
    Ok(())
}

fn record<'a, T: Serialize>(command: &'a str, loaded: &'a Loaded, body: T) -> RunRecord<'a, T> {
    RunRecord {
        command,
        version: env!("CARGO_PKG_VERSION"),
        config: &loaded.config,
        model: ModelDocument::from_model(&loaded.system.model),
        body,
    }
}

fn output_dir(loaded: &Loaded) -> Result<PathBuf> {
    let dir = loaded.config.output_dir.clone();
    fs::create_dir_all(&dir).map_err(drsls::Error::from)?;
    Ok(dir)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthMode {
    Nominal,
    Drsls,
}

impl SynthMode {
    pub fn name(self) -> &'static str {
        match self {
            SynthMode::Nominal => "nominal",
            SynthMode::Drsls => "drsls",
        }
    }
}

#[derive(Debug, Serialize)]
struct SynthBody {
    decay_residual: f64,
    result: ResultDocument,
}

/// Synthesizes on the configured model as the nominal model, with the
/// innovation samples and window the config's seed produces.
pub fn cmd_synth(loaded: &Loaded, mode: SynthMode) -> Result<ResultDocument> {
    let cfg = &loaded.config.experiment;
    let sys = &loaded.system;
    let scenario = prepare_scenario(sys, cfg)?;
    let layout = cfg.layout(sys);
    let (cost, constraints) = (cfg.cost(layout)?, cfg.constraints(layout)?);
    let result = match mode {
        SynthMode::Drsls => grid_search(
            &cfg.rho_grid,
            &cfg.sigma_grid,
            &scenario.truth,
            &scenario.samples,
            &cfg.budget,
            &cost,
            &constraints,
        )?,
        SynthMode::Nominal => solve_nominal(&scenario.truth, &scenario.samples, cfg.nominal_mode, &cost, &constraints)?,
    };
    let doc = result.to_document();
    let dir = output_dir(loaded)?;
    write_json(
        &dir.join(format!("synth-{}.json", mode.name())),
        &record("synth", loaded, SynthBody { decay_residual: scenario.decay_residual, result: doc.clone() }),
    )?;
    write_json(&dir.join(format!("policy-{}.json", mode.name())), &doc.policy)?;
    Ok(doc)
}

#[derive(Debug, Serialize)]
pub struct MonteCarloBody {
    pub decay_residual: f64,
    /// Magnitude at which divergent signals are clipped in the cost columns.
    pub clip: f64,
    /// Rejection-sampling attempts per draw (`None` when sampling failed).
    pub sampling_tries: Vec<Option<usize>>,
    pub summary: Vec<MethodSummary>,
}

pub fn cmd_montecarlo(loaded: &Loaded) -> Result<MonteCarloBody> {
    let out = monte_carlo(&loaded.system, &loaded.config.experiment)?;
    let dir = output_dir(loaded)?;
    fs::write(dir.join("metrics.csv"), metrics_csv(&out.rows())?).map_err(drsls::Error::from)?;
    fs::write(dir.join("trajectories.csv"), trajectories_csv(&out.draws)?).map_err(drsls::Error::from)?;
    let body = MonteCarloBody {
        decay_residual: out.scenario.decay_residual,
        clip: CLIP,
        sampling_tries: out.draws.iter().map(|d| d.nominal.as_ref().map(|n| n.tries)).collect(),
        summary: out.summary(),
    };
    write_json(&dir.join("summary.json"), &record("montecarlo", loaded, &body))?;
    Ok(body)
}

pub fn cmd_validate(loaded: &Loaded) -> Result<ValidationReport> {
    let report = run_suites(&loaded.system, &loaded.config.experiment, loaded.config.validation_draws)?;
    let dir = output_dir(loaded)?;
    write_json(&dir.join("validation.json"), &record("validate", loaded, &report))?;
    Ok(report)
}

/// Fails with [`CliError::Suites`] when any suite failed.
pub fn check_report(report: &ValidationReport) -> Result<()> {
    let failed: Vec<&str> = report.suites.iter().filter(|s| !s.passed()).map(|s| s.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Suites(failed.join(", ")))
    }
}

#[derive(Debug, Serialize)]
struct SamplesBody {
    samples: usize,
    sample_len: usize,
}

/// Writes the innovation samples as long-format CSV
/// (`sample, t, channel, value`).
pub fn cmd_sample_innovations(loaded: &Loaded) -> Result<usize> {
    let cfg = &loaded.config.experiment;
    let sys = &loaded.system;
    // The scenario's samples, so the file matches what synthesis uses.
    let samples = prepare_scenario(sys, cfg)?.samples;
    let q = sys.model.q();
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| drsls::Error::Parse(e.to_string());
    w.write_record(["sample", "t", "channel", "value"]).map_err(io)?;
    for (i, e) in samples.samples().iter().enumerate() {
        for (k, v) in e.iter().enumerate() {
            w.write_record([i.to_string(), (k / q).to_string(), (k % q).to_string(), v.to_string()]).map_err(io)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| drsls::Error::Parse(e.to_string()))?;
    let dir = output_dir(loaded)?;
    fs::write(dir.join("innovations.csv"), bytes).map_err(drsls::Error::from)?;
    write_json(
        &dir.join("innovations.json"),
        &record("sample-innovations", loaded, SamplesBody { samples: samples.len(), sample_len: samples.sample_len() }),
    )?;
    Ok(samples.len())
}
