//! Run configuration: scenario block, engine block, trials, seed and sweep.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::bounds::BoundOptions;
use crate::datamodel::{Problem, ProblemFile};
use crate::engines::{uniform_grid, EngineConfig, EngineKind};
use crate::error::{Error, Result};
use crate::graph::{self, GraphKind, Topology, TopologyFile};
use crate::rng;
use crate::scenarios::{
    self, FidData, FidSchema, FidSurrogateSpec, MrfFieldSpec, ScalingSpec,
};
use crate::streams::ClockDistribution;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FidScenario {
    #[serde(default = "fid_nodes")]
    pub n_nodes: usize,
    /// JSON object species → node.
    #[serde(default)]
    pub mapping: Option<PathBuf>,
    #[serde(default)]
    pub schema: FidSchema,
    /// Used when no data file is given.
    #[serde(default)]
    pub surrogate: FidSurrogateSpec,
    #[serde(default = "fid_window")]
    pub window: usize,
    #[serde(default = "fid_phi")]
    pub phi: f64,
    #[serde(default = "one")]
    pub mu: f64,
    #[serde(default = "fid_level")]
    pub ci_level: f64,
    /// Data file; `--data` overrides it.
    #[serde(default)]
    pub data: Option<PathBuf>,
}

fn fid_nodes() -> usize {
    15
}
fn fid_window() -> usize {
    15
}
fn fid_phi() -> f64 {
    0.9
}
fn fid_level() -> f64 {
    0.97
}
fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingScenario {
    pub n: usize,
    /// Node count of the `δ = 0` reference run; defaults to `n`.
    #[serde(default)]
    pub reference_n: Option<usize>,
    #[serde(default)]
    pub spec: ScalingSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TopologyConfig {
    Kind(GraphKind),
    File(TopologyFile),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileScenario {
    /// Path to a problem JSON file.
    pub problem: PathBuf,
    pub topology: TopologyConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scenario", rename_all = "snake_case")]
pub enum ScenarioConfig {
    Mrf(MrfFieldSpec),
    Fid(FidScenario),
    Scaling(ScalingScenario),
    File(FileScenario),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EngineName {
    Sgn,
    Fl,
    SgnSde,
    FlSde,
}

impl EngineName {
    pub fn kind(self) -> EngineKind {
        match self {
            EngineName::Sgn => EngineKind::Sgn,
            EngineName::Fl => EngineKind::Fl,
            EngineName::SgnSde => EngineKind::SgnSde,
            EngineName::FlSde => EngineKind::FlSde,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            EngineName::Sgn => "sgn",
            EngineName::Fl => "fl",
            EngineName::SgnSde => "sgn_sde",
            EngineName::FlSde => "fl_sde",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineBlock {
    pub gamma: f64,
    /// Step size of the federated engines; defaults to `gamma`.
    #[serde(default)]
    pub gamma_fl: Option<f64>,
    pub delta: f64,
    pub beta: f64,
    /// Multiply `beta` by the mean gradient rate of the instance.
    #[serde(default)]
    pub beta_per_mean_rate: bool,
    /// Real-time horizon.
    #[serde(default)]
    pub horizon: Option<f64>,
    /// Horizon given as an expected number of gradient events over the whole network.
    #[serde(default)]
    pub horizon_events: Option<f64>,
    #[serde(default = "snapshots")]
    pub snapshots: usize,
    #[serde(default)]
    pub snapshot_times: Option<Vec<f64>>,
    #[serde(default)]
    pub clock: ClockDistribution,
    #[serde(default = "sde_dt")]
    pub sde_dt: f64,
    #[serde(default = "engines")]
    pub engines: Vec<EngineName>,
    /// Initial node models; zeros when absent.
    #[serde(default)]
    pub w0: Option<Vec<Vec<f64>>>,
}

fn snapshots() -> usize {
    20
}
fn sde_dt() -> f64 {
    1e-3
}
fn engines() -> Vec<EngineName> {
    vec![EngineName::Sgn]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub parameter: String,
    pub values: Vec<f64>,
}

impl SweepConfig {
    /// Parses `name=v1,v2,…`.
    pub fn parse(s: &str) -> Result<Self> {
        let (name, vals) = s
            .split_once('=')
            .ok_or_else(|| Error::config(format!("sweep {s:?} is not of the form name=v1,v2")))?;
        let values = vals
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::config(format!("sweep value {v:?} is not a number")))
            })
            .collect::<Result<Vec<_>>>()?;
        if values.is_empty() {
            return Err(Error::config("sweep has no values"));
        }
        Ok(SweepConfig {
            parameter: name.trim().to_string(),
            values,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: ScenarioConfig,
    pub engine: EngineBlock,
    #[serde(default = "trials")]
    pub trials: u64,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub bounds: BoundOptions,
}

fn trials() -> u64 {
    10
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config(format!("invalid config: {e}")))
    }

    /// Reads a config; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut cfg.scenario {
            ScenarioConfig::File(f) => fix(&mut f.problem),
            ScenarioConfig::Fid(f) => {
                if let Some(m) = &mut f.mapping {
                    fix(m);
                }
                if let Some(d) = &mut f.data {
                    fix(d);
                }
            }
            _ => {}
        }
        Ok(cfg)
    }

    /// Config with `parameter` set to `value`. Looks in the scenario block
    /// (and its nested `spec`) first, then in the engine block.
    pub fn with_parameter(&self, parameter: &str, value: f64) -> Result<Self> {
        let mut v = serde_json::to_value(self)?;
        let key = match (parameter, &self.scenario) {
            ("N", ScenarioConfig::Mrf(_)) => "n_sensors",
            ("N", ScenarioConfig::Fid(_)) => "n_nodes",
            ("N", _) => "n",
            ("upsilon", _) => "edge_fraction",
            (k, _) => k,
        };
        let set = |obj: &mut Value| -> bool {
            match obj.get_mut(key) {
                Some(slot) => {
                    *slot = if slot.is_u64() || slot.is_i64() || (slot.is_null() && value.fract() == 0.0) {
                        Value::from(value as u64)
                    } else {
                        Value::from(value)
                    };
                    true
                }
                None => false,
            }
        };
        let done = set(&mut v["scenario"])
            || v["scenario"].get_mut("spec").is_some_and(&set)
            || set(&mut v["engine"]);
        if !done {
            return Err(Error::config(format!("unknown sweep parameter {parameter:?}")));
        }
        serde_json::from_value(v).map_err(|e| Error::config(format!("sweep {parameter}={value}: {e}")))
    }

    /// One config per sweep value, or just this one.
    pub fn sweep_points(&self) -> Result<Vec<(Option<(String, f64)>, RunConfig)>> {
        match &self.sweep {
            None => Ok(vec![(None, self.clone())]),
            Some(s) => s
                .values
                .iter()
                .map(|&x| Ok((Some((s.parameter.clone(), x)), self.with_parameter(&s.parameter, x)?)))
                .collect(),
        }
    }
}

/// A generative problem with its graph.
#[derive(Debug, Clone)]
pub struct Instance {
    pub problem: Problem,
    pub topology: Topology,
}

/// Builds the shared instance of an MRF or file scenario.
pub fn fixed_instance(cfg: &RunConfig, seed: u64) -> Result<Option<Instance>> {
    match &cfg.scenario {
        ScenarioConfig::Mrf(spec) => {
            let sc = scenarios::mrf_build(spec, &mut rng::stream(seed, rng::STREAM_SCENARIO))?;
            Ok(Some(Instance {
                problem: sc.problem,
                topology: sc.topology,
            }))
        }
        ScenarioConfig::File(f) => {
            let text = std::fs::read_to_string(&f.problem)
                .map_err(|e| Error::config(format!("cannot read {}: {e}", f.problem.display())))?;
            let pf: ProblemFile = serde_json::from_str(&text).map_err(|e| Error::config(format!("invalid problem file: {e}")))?;
            let problem = pf.into_problem()?;
            let topology = match &f.topology {
                TopologyConfig::Kind(k) => graph::generate(k, &mut rng::stream(seed, rng::STREAM_TOPOLOGY))?,
                TopologyConfig::File(t) => t.clone().into_topology()?,
            };
            if topology.n() != problem.len() {
                return Err(Error::config(format!(
                    "topology has {} nodes, problem has {}",
                    topology.n(),
                    problem.len()
                )));
            }
            Ok(Some(Instance { problem, topology }))
        }
        ScenarioConfig::Scaling(_) | ScenarioConfig::Fid(_) => Ok(None),
    }
}

/// Instance of trial `trial_seed` in a scaling scenario with `n` nodes.
pub fn scaling_instance(sc: &ScalingScenario, n: usize, trial_seed: u64) -> Result<Instance> {
    let (problem, topology) = scenarios::scaling_trial_instance(&sc.spec, n, trial_seed)?;
    Ok(Instance { problem, topology })
}

/// Loads the FID table from `data` (or the scenario's own path), or generates a surrogate.
pub fn fid_data(sc: &FidScenario, data: Option<&Path>, seed: u64) -> Result<(FidData, bool)> {
    let mapping: Option<BTreeMap<String, usize>> = match &sc.mapping {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::config(format!("cannot read mapping {}: {e}", p.display())))?;
            Some(serde_json::from_str(&text).map_err(|e| Error::config(format!("invalid mapping file: {e}")))?)
        }
        None => None,
    };
    match data.or(sc.data.as_deref()) {
        Some(path) => {
            let f = std::fs::File::open(path)
                .map_err(|e| Error::data(format!("cannot open {}: {e}", path.display())))?;
            Ok((scenarios::fid_ingest(f, &sc.schema, sc.n_nodes, mapping.as_ref())?, false))
        }
        None => {
            log::warn!("no FID data file given; using the synthetic surrogate");
            let csv = scenarios::fid_surrogate(&sc.surrogate, &mut rng::stream(seed, rng::STREAM_SCENARIO))?;
            Ok((scenarios::fid_ingest(csv.as_bytes(), &sc.schema, sc.n_nodes, mapping.as_ref())?, true))
        }
    }
}

/// Real-time snapshot grid for an instance with gradient rates `rates`.
pub fn snapshot_grid(block: &EngineBlock, rates: &[f64]) -> Result<Vec<f64>> {
    if let Some(t) = &block.snapshot_times {
        if block.horizon.is_some() || block.horizon_events.is_some() {
            return Err(Error::config("snapshot_times already fixes the horizon"));
        }
        return Ok(t.clone());
    }
    let horizon = match (block.horizon, block.horizon_events) {
        (Some(h), None) => h,
        (None, Some(ev)) => ev / rates.iter().sum::<f64>(),
        _ => return Err(Error::config("give exactly one of horizon and horizon_events")),
    };
    if !(horizon > 0.0 && horizon.is_finite()) || block.snapshots == 0 {
        return Err(Error::config("horizon and snapshot count must be positive"));
    }
    Ok(uniform_grid(horizon, block.snapshots))
}

/// Engine config of one engine for an instance with gradient rates `rates`.
pub fn engine_config(block: &EngineBlock, engine: EngineName, rates: &[f64]) -> Result<EngineConfig> {
    let mean = rates.iter().sum::<f64>() / rates.len().max(1) as f64;
    let gamma = match engine {
        EngineName::Fl | EngineName::FlSde => block.gamma_fl.unwrap_or(block.gamma),
        _ => block.gamma,
    };
    let beta = if block.beta_per_mean_rate { block.beta * mean } else { block.beta };
    let mut cfg = EngineConfig::new(gamma, block.delta, beta, snapshot_grid(block, rates)?);
    cfg.clock = block.clock;
    cfg.sde_dt = block.sde_dt;
    cfg.validate()?;
    Ok(cfg)
}

/// Initial models from the engine block.
pub fn initial_models(block: &EngineBlock, n: usize, p: usize) -> Result<Vec<DVector<f64>>> {
    match &block.w0 {
        None => Ok(vec![DVector::zeros(p); n]),
        Some(rows) => {
            if rows.len() != n || rows.iter().any(|r| r.len() != p) {
                return Err(Error::config(format!("w0 must be {n} vectors of length {p}")));
            }
            Ok(rows.iter().map(|r| DVector::from_column_slice(r)).collect())
        }
    }
}
