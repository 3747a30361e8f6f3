//! Command-line front end: `run`, `bounds` and `compare-fl`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use nalgebra::DVector;
use serde::Serialize;

use crate::bounds::{self, AlphaMode, BetaConvention, BoundCheck, FlComparison, ProblemConstants};
use crate::config::{self, EngineName, Instance, RunConfig, ScenarioConfig, SweepConfig};
use crate::engines::{run_discrete, run_trial, EngineKind, TrialSetup};
use crate::error::{Error, Result};
use crate::gls::{self, CoefficientTable};
use crate::metrics::{self, mean_ci, MeanCi, Metric, MetricsSeries, PhiMode, SeriesSummary};
use crate::plot::{self, Series};
use crate::rng;
use crate::runner::map_trials;
use crate::scenarios::{FidSource, FID_COEFFICIENTS};

pub const SEED_ENV: &str = "SGN_LAB_SEED";

#[derive(Debug, Parser)]
#[command(name = "sgn-lab", version, about = "Networked asynchronous GLS learners: simulation, bounds, baselines")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a scenario and write metrics, summaries, bounds and plots.
    Run(CommonArgs),
    /// Evaluate the bound report; `--check` also validates it by Monte Carlo.
    Bounds {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        check: bool,
    },
    /// Compare SGN against the federated baseline, analytically and empirically.
    CompareFl(CommonArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Data file for scenarios that ingest one.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Master seed; falls back to $SGN_LAB_SEED, then the config.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub trials: Option<u64>,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// `name=v1,v2,…`
    #[arg(long)]
    pub sweep: Option<String>,
    #[arg(long)]
    pub beta_convention: Option<BetaConvention>,
}

/// Config, seed and output directory after applying flags.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: RunConfig,
    pub seed: u64,
    pub out: PathBuf,
    pub workers: usize,
    pub data: Option<PathBuf>,
}

pub fn resolve(args: &CommonArgs) -> Result<Resolved> {
    let mut config = RunConfig::load(&args.config)?;
    if let Some(t) = args.trials {
        config.trials = t;
    }
    if let Some(s) = &args.sweep {
        config.sweep = Some(SweepConfig::parse(s)?);
    }
    if let Some(b) = args.beta_convention {
        config.bounds.beta = b;
    }
    if config.trials == 0 {
        return Err(Error::config("trials must be at least 1"));
    }
    let env_seed = match std::env::var(SEED_ENV) {
        Ok(v) => Some(
            v.trim()
                .parse::<u64>()
                .map_err(|_| Error::config(format!("{SEED_ENV}={v:?} is not a u64")))?,
        ),
        Err(_) => None,
    };
    let seed = args.seed.or(env_seed).or(config.seed).unwrap_or(0);
    let out = args.out.clone().or_else(|| config.output.clone()).unwrap_or_else(|| PathBuf::from("out"));
    Ok(Resolved {
        config,
        seed,
        out,
        workers: args.workers.max(1),
        data: args.data.clone(),
    })
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cmd: &Command) -> Result<()> {
    match cmd {
        Command::Run(a) => cmd_run(&resolve(a)?),
        Command::Bounds { common, check } => cmd_bounds(&resolve(common)?, *check),
        Command::CompareFl(a) => cmd_compare_fl(&resolve(a)?),
    }
}

// ---------------------------------------------------------------- output helpers

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// `trial,time,metric,value`, rows ordered by trial, then time, then metric.
pub fn write_metrics_csv(path: &Path, series: &[MetricsSeries]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut sorted: Vec<&MetricsSeries> = series.iter().collect();
    sorted.sort_by_key(|s| s.trial_id);
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["trial", "time", "metric", "value"])?;
    for s in sorted {
        for snap in &s.snapshots {
            for m in Metric::ALL {
                if let Some(v) = snap.value(m) {
                    w.write_record([s.trial_id.to_string(), snap.time.to_string(), m.name().to_string(), v.to_string()])?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn write_metric_plots(dir: &Path, title: &str, summary: &SeriesSummary) -> Result<()> {
    for m in Metric::ALL {
        let Some(stats) = summary.metric(m) else { continue };
        let pts: Vec<(f64, f64)> = summary.times.iter().zip(stats).map(|(&t, c)| (t, c.mean)).collect();
        let err: Vec<f64> = stats.iter().map(|c| c.half_width).collect();
        let svg = plot::line_chart(
            &format!("{title}: mean {} over trials", m.name()),
            "time",
            m.name(),
            &[Series::new(m.name(), pts).with_err(err)],
        );
        fs::write(dir.join(format!("plot_{}.svg", m.name())), svg)?;
    }
    Ok(())
}

/// Per-engine result of one sweep point.
#[derive(Debug, Clone, Serialize)]
pub struct EngineResult {
    pub engine: String,
    pub gamma: f64,
    pub beta: f64,
    pub horizon: f64,
    /// Final `φ` across trials.
    pub final_phi: MeanCi,
    /// Final `φ̄` of the `δ = 0` reference run (scaling scenarios).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference_phi: Option<f64>,
    /// `φ̄_T / φ̄_T(reference)`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phi_s: Option<f64>,
    pub summary: SeriesSummary,
}

#[derive(Debug, Clone, Serialize)]
pub struct PointResult {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub parameter: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    pub engines: Vec<EngineResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fid_table: Option<CoefficientTable>,
    /// The FID run used the synthetic surrogate.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub surrogate: Option<bool>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub seed: u64,
    pub trials: u64,
    pub points: Vec<PointResult>,
}

fn point_dir(out: &Path, label: &Option<(String, f64)>) -> PathBuf {
    match label {
        Some((k, v)) => out.join(format!("{k}={v}")),
        None => out.to_path_buf(),
    }
}

fn final_phis(series: &[MetricsSeries]) -> Vec<f64> {
    series.iter().filter_map(|s| s.last().map(|l| l.phi)).collect()
}

fn finish_engine(
    dir: &Path,
    engine: EngineName,
    series: &[MetricsSeries],
    gamma: f64,
    beta: f64,
    horizon: f64,
    reference_phi: Option<f64>,
) -> Result<EngineResult> {
    let edir = dir.join(engine.label());
    write_metrics_csv(&edir.join("metrics.csv"), series)?;
    let summary = metrics::summarize(series)?;
    write_json(&edir.join("summary.json"), &summary)?;
    write_metric_plots(&edir, engine.label(), &summary)?;
    let final_phi = mean_ci(&final_phis(series));
    let phi_s = match reference_phi {
        Some(r) => Some(metrics::scaled_error(final_phi.mean, Some(r))?),
        None => None,
    };
    Ok(EngineResult {
        engine: engine.label().to_string(),
        gamma,
        beta,
        horizon,
        final_phi,
        reference_phi,
        phi_s,
        summary,
    })
}

// ---------------------------------------------------------------- run

pub fn cmd_run(r: &Resolved) -> Result<()> {
    run_experiment(r).map(|_| ())
}

/// Runs every sweep point of `r`, writes all artifacts under `r.out` and
/// returns the top-level summary.
pub fn run_experiment(r: &Resolved) -> Result<RunSummary> {
    let mut points = Vec::new();
    for (label, cfg) in r.config.sweep_points()? {
        let dir = point_dir(&r.out, &label);
        info!("running {}", dir.display());
        let mut res = run_point(&cfg, r, &dir)?;
        if let Some((k, v)) = label {
            res.parameter = Some(k);
            res.value = Some(v);
        }
        points.push(res);
    }
    if let Some(sw) = &r.config.sweep {
        write_sweep_plot(&r.out, &sw.parameter, &points)?;
    }
    let summary = RunSummary {
        seed: r.seed,
        trials: r.config.trials,
        points,
    };
    write_json(&r.out.join("summary.json"), &summary)?;
    Ok(summary)
}

fn write_sweep_plot(out: &Path, parameter: &str, points: &[PointResult]) -> Result<()> {
    let mut by_engine: BTreeMap<String, (Vec<(f64, f64)>, Vec<f64>)> = BTreeMap::new();
    for p in points {
        let x = p.value.unwrap_or(f64::NAN);
        for e in &p.engines {
            let entry = by_engine.entry(e.engine.clone()).or_default();
            entry.0.push((x, e.final_phi.mean));
            entry.1.push(e.final_phi.half_width);
        }
    }
    let series: Vec<Series> = by_engine
        .into_iter()
        .map(|(name, (pts, err))| Series::new(name, pts).with_err(err))
        .collect();
    let svg = plot::line_chart(&format!("final phi vs {parameter}"), parameter, "final phi (95% CI)", &series);
    fs::create_dir_all(out)?;
    fs::write(out.join("plot_sweep.svg"), svg)?;
    Ok(())
}

fn run_point(cfg: &RunConfig, r: &Resolved, dir: &Path) -> Result<PointResult> {
    fs::create_dir_all(dir)?;
    let trials = cfg.trials;
    let block = &cfg.engine;
    let mut engines = Vec::new();
    let mut fid_table = None;
    let mut surrogate = None;
    match &cfg.scenario {
        ScenarioConfig::Mrf(_) | ScenarioConfig::File(_) => {
            let inst = config::fixed_instance(cfg, r.seed)?.expect("generative scenario");
            let w0 = config::initial_models(block, inst.problem.len(), inst.problem.p())?;
            let setup = TrialSetup::from_problem(&inst.problem, &inst.topology).with_w0(w0.clone());
            let rates = inst.problem.rates();
            write_bounds(dir, cfg, &inst, &w0)?;
            for &engine in &block.engines {
                let ecfg = config::engine_config(block, engine, &rates)?;
                let series = map_trials(trials, r.workers, |l| {
                    run_trial(engine.kind(), &inst.problem, &setup, &ecfg, rng::trial_seed(r.seed, l), l)
                })?;
                engines.push(finish_engine(dir, engine, &series, ecfg.gamma, ecfg.beta, ecfg.horizon(), None)?);
            }
        }
        ScenarioConfig::Scaling(sc) => {
            let first = config::scaling_instance(sc, sc.n, rng::trial_seed(r.seed, 0))?;
            let w0 = config::initial_models(block, first.problem.len(), first.problem.p())?;
            write_bounds(dir, cfg, &first, &w0)?;
            let reference_n = sc.reference_n.unwrap_or(sc.n);
            for &engine in &block.engines {
                let run = |n: usize, delta: Option<f64>| -> Result<(Vec<MetricsSeries>, f64, f64, f64)> {
                    let out = map_trials(trials, r.workers, |l| {
                        let ts = rng::trial_seed(r.seed, l);
                        let inst = config::scaling_instance(sc, n, ts)?;
                        let w0 = config::initial_models(block, n, inst.problem.p())?;
                        let setup = TrialSetup::from_problem(&inst.problem, &inst.topology).with_w0(w0);
                        let mut ecfg = config::engine_config(block, engine, &inst.problem.rates())?;
                        if let Some(d) = delta {
                            ecfg.delta = d;
                        }
                        let s = run_trial(engine.kind(), &inst.problem, &setup, &ecfg, ts, l)?;
                        Ok((s, ecfg.gamma, ecfg.beta, ecfg.horizon()))
                    })?;
                    let (g, b, h) = out.first().map(|o| (o.1, o.2, o.3)).unwrap_or_default();
                    Ok((out.into_iter().map(|o| o.0).collect(), g, b, h))
                };
                let (reference, ..) = run(reference_n, Some(0.0))?;
                let ref_phi = mean_ci(&final_phis(&reference)).mean;
                let (series, g, b, h) = run(sc.n, None)?;
                engines.push(finish_engine(dir, engine, &series, g, b, h, Some(ref_phi))?);
            }
        }
        ScenarioConfig::Fid(sc) => {
            let (data, is_surrogate) = config::fid_data(sc, r.data.as_deref(), r.seed)?;
            surrogate = Some(is_surrogate);
            let gls_sol = crate::scenarios::fid_gls(&data)?;
            let n = data.n_nodes();
            let topo = crate::graph::Topology::complete(n);
            let b = data.mini_batch as f64;
            let setup = TrialSetup {
                topology: &topo,
                alpha_hat: vec![1.0 / b; n],
                rates: vec![sc.mu; n],
                w_star: gls_sol.w_hat.clone(),
                w0: config::initial_models(block, n, data.x.ncols())?,
                phi: PhiMode::Residual {
                    x: data.x.clone(),
                    y: data.y.clone(),
                },
            };
            for &engine in &block.engines {
                if matches!(engine, EngineName::SgnSde | EngineName::FlSde) {
                    return Err(Error::config("the FID scenario has no generative model; use sgn or fl"));
                }
                let mut ecfg = config::engine_config(block, engine, &setup.rates)?;
                ecfg.refresh_weights = true;
                let series = map_trials(trials, r.workers, |l| {
                    let ts = rng::trial_seed(r.seed, l);
                    let mut src = FidSource::new(&data, ts, sc.window, sc.phi)?;
                    run_discrete(engine.kind(), &mut src, &setup, &ecfg, ts, l)
                })?;
                if engine == EngineName::Sgn {
                    let mut mean_w = DVector::zeros(data.x.ncols());
                    for s in &series {
                        mean_w += s.final_model.as_ref().expect("final model") / series.len() as f64;
                    }
                    let resid = mean_ci(&final_phis(&series)).mean;
                    let names: Vec<String> = FID_COEFFICIENTS.iter().map(|s| s.to_string()).collect();
                    let table = gls::coefficient_table(&names, &gls_sol, &mean_w, resid, sc.ci_level)?;
                    write_json(&dir.join("fid_table.json"), &table)?;
                    fid_table = Some(table);
                }
                engines.push(finish_engine(dir, engine, &series, ecfg.gamma, ecfg.beta, ecfg.horizon(), None)?);
            }
        }
    }
    Ok(PointResult {
        parameter: None,
        value: None,
        engines,
        fid_table,
        surrogate,
    })
}

fn bound_report_for(cfg: &RunConfig, inst: &Instance, w0: &[DVector<f64>]) -> Result<bounds::BoundReport> {
    let rates = inst.problem.rates();
    let times = config::snapshot_grid(&cfg.engine, &rates)?;
    let mean = rates.iter().sum::<f64>() / rates.len() as f64;
    let beta = if cfg.engine.beta_per_mean_rate { cfg.engine.beta * mean } else { cfg.engine.beta };
    let inputs = bounds::initial_inputs(&inst.problem, w0, cfg.engine.delta, beta);
    bounds::bound_report(&inst.problem, &inst.topology, cfg.engine.gamma, inputs, cfg.bounds, &times)
}

fn write_bounds(dir: &Path, cfg: &RunConfig, inst: &Instance, w0: &[DVector<f64>]) -> Result<()> {
    let report = bound_report_for(cfg, inst, w0)?;
    if report.constants.kappa == 0.0 {
        warn!("kappa = 0: consistency and federated upper bounds are reported as +inf");
    }
    write_json(&dir.join("bounds.json"), &report)
}

/// Generative instance used by `bounds` and `compare-fl`: the fixed
/// instance, or the first trial's instance of a scaling scenario.
fn analysis_instance(cfg: &RunConfig, seed: u64) -> Result<Instance> {
    match &cfg.scenario {
        ScenarioConfig::Scaling(sc) => config::scaling_instance(sc, sc.n, rng::trial_seed(seed, 0)),
        ScenarioConfig::Fid(_) => Err(Error::config("bounds need a generative scenario (mrf, scaling or file)")),
        _ => Ok(config::fixed_instance(cfg, seed)?.expect("generative scenario")),
    }
}

// ---------------------------------------------------------------- bounds

pub fn cmd_bounds(r: &Resolved, check: bool) -> Result<()> {
    let mut failures = Vec::new();
    for (label, cfg) in r.config.sweep_points()? {
        let dir = point_dir(&r.out, &label);
        let inst = analysis_instance(&cfg, r.seed)?;
        let w0 = config::initial_models(&cfg.engine, inst.problem.len(), inst.problem.p())?;
        write_bounds(&dir, &cfg, &inst, &w0)?;
        if check {
            let ecfg = config::engine_config(&cfg.engine, EngineName::SgnSde, &inst.problem.rates())?;
            let res: BoundCheck = bounds::monte_carlo_check(
                &inst.problem,
                &inst.topology,
                &ecfg,
                cfg.bounds,
                w0,
                cfg.trials,
                r.seed,
                r.workers,
            )?;
            write_json(&dir.join("bound_check.json"), &res)?;
            for f in res.failures() {
                failures.push(format!("{}: {f}", dir.display()));
            }
        }
    }
    if failures.is_empty() {
        Ok(())
    } else {
        let mut stderr = std::io::stderr();
        for f in &failures {
            let _ = writeln!(stderr, "{f}");
        }
        Err(Error::BoundCheck(format!("{} snapshot(s) violate the bounds", failures.len())))
    }
}

// ---------------------------------------------------------------- compare-fl

#[derive(Debug, Clone, Serialize)]
pub struct EmpiricalComparison {
    /// Mean `U` of SGN over the last 10% of snapshots.
    pub sgn_tail_u: f64,
    /// Mean `F` of the federated model over the same snapshots.
    pub fl_tail_f: f64,
    pub sgn_better: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareReport {
    pub constants: ProblemConstants,
    pub cor1: FlComparison,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cor2: Option<FlComparison>,
    pub empirical: EmpiricalComparison,
}

/// Mean over trials and over the last 10% of snapshots (at least one).
pub fn tail_mean(series: &[MetricsSeries], m: Metric) -> f64 {
    let mut acc = Vec::new();
    for s in series {
        let n = s.snapshots.len();
        let k = (n / 10).max(1);
        acc.extend(s.snapshots[n - k..].iter().filter_map(|p| p.value(m)));
    }
    acc.iter().sum::<f64>() / acc.len().max(1) as f64
}

/// SGN-versus-federated comparison under the weights of `mode`.
pub fn weighted_comparison(
    inst: &Instance,
    gamma: f64,
    beta: f64,
    opts: bounds::BoundOptions,
    mode: AlphaMode,
) -> Result<(ProblemConstants, FlComparison)> {
    let n = inst.problem.len();
    let alpha_hat: Vec<f64> = match mode {
        AlphaMode::Uniform => vec![1.0; n],
        AlphaMode::InverseVariance => inst.problem.nodes().iter().map(|s| 1.0 / s.sigma2).collect(),
    };
    let pr = inst.problem.with_alpha_hat(&alpha_hat)?;
    let k = ProblemConstants::compute(&pr, &inst.topology, gamma, opts)?;
    let c2 = bounds::constant_c2(&k, &k.alpha);
    let c3 = bounds::constant_c3(&k);
    let cmp = bounds::fl_comparison(&pr, &k, c2, c3, beta, mode)?;
    Ok((k, cmp))
}

pub fn cmd_compare_fl(r: &Resolved) -> Result<()> {
    for (label, cfg) in r.config.sweep_points()? {
        let dir = point_dir(&r.out, &label);
        let inst = analysis_instance(&cfg, r.seed)?;
        let rates = inst.problem.rates();
        let sgn_cfg = config::engine_config(&cfg.engine, EngineName::Sgn, &rates)?;
        let fl_cfg = config::engine_config(&cfg.engine, EngineName::Fl, &rates)?;
        let (k, cor1) = weighted_comparison(&inst, sgn_cfg.gamma, sgn_cfg.beta, cfg.bounds, AlphaMode::Uniform)?;
        let cor2 = if inst.problem.has_common_noise() {
            None
        } else {
            Some(weighted_comparison(&inst, sgn_cfg.gamma, sgn_cfg.beta, cfg.bounds, AlphaMode::InverseVariance)?.1)
        };
        let w0 = config::initial_models(&cfg.engine, inst.problem.len(), inst.problem.p())?;
        let setup = TrialSetup::from_problem(&inst.problem, &inst.topology).with_w0(w0);
        let run = |kind: EngineKind, ecfg| {
            map_trials(cfg.trials, r.workers, |l| {
                run_trial(kind, &inst.problem, &setup, ecfg, rng::trial_seed(r.seed, l), l)
            })
        };
        let sgn = run(EngineKind::Sgn, &sgn_cfg)?;
        let fl = run(EngineKind::Fl, &fl_cfg)?;
        let (u, f) = (tail_mean(&sgn, Metric::U), tail_mean(&fl, Metric::F));
        write_metrics_csv(&dir.join("sgn").join("metrics.csv"), &sgn)?;
        write_metrics_csv(&dir.join("fl").join("metrics.csv"), &fl)?;
        write_json(
            &dir.join("compare_fl.json"),
            &CompareReport {
                constants: k,
                cor1,
                cor2,
                empirical: EmpiricalComparison {
                    sgn_tail_u: u,
                    fl_tail_f: f,
                    sgn_better: u < f,
                },
            },
        )?;
    }
    Ok(())
}
