//! Experiment configuration files and the single-run driver.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cluster::{simulate, ClusterSpec, RunOutput, SystemKind};
use crate::control::FlipPolicy;
use crate::cost::{CostModel, CostModelParams, NetworkPreset};
use crate::coupled::CoupledConfig;
use crate::decode::DecodeConfig;
use crate::engine::{write_trace, RngStreams, SimTime, StreamId, DEFAULT_MAX_EVENTS};
use crate::error::{ConfigError, Error};
use crate::metrics::{csv_rows, write_requests_csv, CsvRow, RunSummary};
use crate::prefill::{DispatchPolicy, PredictorConfig, PrefillPolicy};
use crate::workload::{fingerprint, generate_phases, Request, WorkloadSpec};

/// One workload, or several phases concatenated on a shared clock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WorkloadConfig {
    Phases { phases: Vec<WorkloadSpec> },
    Single(WorkloadSpec),
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        WorkloadConfig::Single(WorkloadSpec::default())
    }
}

impl WorkloadConfig {
    pub fn phases(&self) -> &[WorkloadSpec] {
        match self {
            WorkloadConfig::Phases { phases } => phases,
            WorkloadConfig::Single(s) => std::slice::from_ref(s),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TopologyConfig {
    pub system: SystemKind,
    pub prefill: u32,
    pub decode: u32,
    pub coupled: u32,
}

impl Default for TopologyConfig {
    fn default() -> Self {
        TopologyConfig {
            system: SystemKind::Disaggregated,
            prefill: 1,
            decode: 1,
            coupled: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub prefill: PrefillPolicy,
    pub decode: DecodeConfig,
    pub dispatcher: DispatchPolicy,
    pub predictor: PredictorConfig,
    pub flip: FlipPolicy,
    pub coupled: CoupledConfig,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Write `events.jsonl`.
    pub events: bool,
    /// Write `iterations.jsonl`.
    pub iterations: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub workload: WorkloadConfig,
    pub cluster: TopologyConfig,
    pub policies: PolicyConfig,
    pub cost: CostModelParams,
    /// Overrides the bandwidth and fixed transfer cost in `cost`.
    pub network: Option<NetworkPreset>,
    pub monitor_period_us: u64,
    pub max_events: u64,
    pub output: OutputConfig,
    /// Directory that relative trace paths resolve against.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "experiment".into(),
            seed: 0,
            workload: WorkloadConfig::default(),
            cluster: TopologyConfig::default(),
            policies: PolicyConfig::default(),
            cost: CostModelParams::default(),
            network: None,
            monitor_period_us: crate::cluster::DEFAULT_MONITOR_PERIOD.0,
            max_events: DEFAULT_MAX_EVENTS,
            output: OutputConfig::default(),
            base_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig =
            serde_path_to_error::deserialize(de).map_err(|e| ConfigError::Parse {
                key: match e.path().to_string() {
                    p if p == "." => "<root>".into(),
                    p => p,
                },
                message: e.inner().to_string(),
            })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_json(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf);
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let t = &self.cluster;
        match t.system {
            SystemKind::Disaggregated => {
                if t.prefill == 0 {
                    return Err(ConfigError::invalid(
                        "cluster.prefill",
                        "a disaggregated system needs >= 1 prefill instance",
                    ));
                }
                if t.decode == 0 {
                    return Err(ConfigError::invalid(
                        "cluster.decode",
                        "a disaggregated system needs >= 1 decode instance",
                    ));
                }
                if t.coupled != 0 {
                    return Err(ConfigError::invalid(
                        "cluster.coupled",
                        "must be 0 for a disaggregated system",
                    ));
                }
            }
            SystemKind::Coupled => {
                if t.coupled == 0 {
                    return Err(ConfigError::invalid(
                        "cluster.coupled",
                        "a coupled system needs >= 1 instance",
                    ));
                }
                if t.prefill != 0 || t.decode != 0 {
                    return Err(ConfigError::invalid(
                        "cluster.prefill",
                        "prefill and decode counts must be 0 for a coupled system",
                    ));
                }
            }
        }
        let phases = self.workload.phases();
        if phases.is_empty() {
            return Err(ConfigError::invalid(
                "workload.phases",
                "needs at least one phase",
            ));
        }
        for (i, p) in phases.iter().enumerate() {
            let key = match self.workload {
                WorkloadConfig::Single(_) => "workload".to_string(),
                WorkloadConfig::Phases { .. } => format!("workload.phases[{i}]"),
            };
            p.validate(&key)?;
        }
        self.policies.prefill.validate()?;
        self.policies.decode.validate()?;
        self.policies.flip.validate()?;
        self.policies.coupled.validate()?;
        crate::prefill::PredictorModel::from_config(&self.policies.predictor)?;
        self.cost_params().validate()?;
        if self.monitor_period_us == 0 {
            return Err(ConfigError::invalid("monitor_period_us", "must be > 0"));
        }
        if self.max_events == 0 {
            return Err(ConfigError::invalid("max_events", "must be > 0"));
        }
        Ok(())
    }

    pub fn cost_params(&self) -> CostModelParams {
        let mut p = self.cost.clone();
        if let Some(preset) = self.network {
            preset.apply(&mut p);
        }
        p
    }

    pub fn cluster_spec(&self) -> Result<ClusterSpec, ConfigError> {
        let t = &self.cluster;
        let p = &self.policies;
        Ok(ClusterSpec {
            system: t.system,
            n_prefill: t.prefill,
            n_decode: t.decode,
            n_coupled: t.coupled,
            prefill: p.prefill,
            decode: p.decode,
            dispatch: p.dispatcher,
            predictor: p.predictor,
            flip: p.flip,
            coupled: p.coupled,
            cost: CostModel::new(self.cost_params())?,
            monitor_period: SimTime(self.monitor_period_us),
            max_events: self.max_events,
            trace: self.output.events,
            record_iterations: self.output.iterations,
        })
    }

    /// Requests for this config; depends only on the seed and the workload.
    pub fn requests(&self) -> Result<Vec<Request>, Error> {
        let mut phases = self.workload.phases().to_vec();
        if let Some(base) = &self.base_dir {
            for p in &mut phases {
                if let Some(trace) = &p.trace {
                    if Path::new(trace).is_relative() {
                        p.trace = Some(base.join(trace).to_string_lossy().into_owned());
                    }
                }
            }
        }
        let mut rng = RngStreams::new(self.seed).stream(StreamId::Workload);
        generate_phases(&phases, &mut rng)
    }
}

/// Everything one run produced.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub summary: RunSummary,
    pub rows: Vec<CsvRow>,
    pub output: RunOutput,
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Experiment, Error> {
    cfg.validate()?;
    let spec = cfg.cluster_spec()?;
    let requests = cfg.requests()?;
    let fp = fingerprint(&requests);
    let output = simulate(&spec, requests, cfg.seed)?;
    Ok(Experiment {
        summary: RunSummary::from_output(&output, cfg.seed, fp),
        rows: csv_rows(&output),
        output,
    })
}

pub const SUMMARY_FILE: &str = "summary.json";
pub const REQUESTS_FILE: &str = "requests.csv";
pub const EVENTS_FILE: &str = "events.jsonl";
pub const ITERATIONS_FILE: &str = "iterations.jsonl";

/// Write `summary.json`, `requests.csv` and whichever optional logs the
/// run recorded into `dir`.
pub fn write_outputs(dir: &Path, exp: &Experiment) -> Result<(), Error> {
    fs::create_dir_all(dir)?;
    let mut summary = serde_json::to_string_pretty(&exp.summary)?;
    summary.push('\n');
    fs::write(dir.join(SUMMARY_FILE), summary)?;
    write_requests_csv(
        BufWriter::new(File::create(dir.join(REQUESTS_FILE))?),
        &exp.rows,
    )?;
    if let Some(trace) = &exp.output.trace {
        write_trace(BufWriter::new(File::create(dir.join(EVENTS_FILE))?), trace)?;
    }
    if !exp.output.iterations.is_empty() {
        let mut w = BufWriter::new(File::create(dir.join(ITERATIONS_FILE))?);
        for (id, recs) in &exp.output.iterations {
            for r in recs {
                serde_json::to_writer(
                    &mut w,
                    &serde_json::json!({ "instance": id, "iteration": r }),
                )?;
                std::io::Write::write_all(&mut w, b"\n")?;
            }
        }
        std::io::Write::flush(&mut w)?;
    }
    Ok(())
}

pub fn read_summary(dir: &Path) -> Result<RunSummary, Error> {
    let text = fs::read_to_string(dir.join(SUMMARY_FILE))?;
    Ok(serde_json::from_str(&text)?)
}
