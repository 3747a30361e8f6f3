//! Discrete SGN and federated dynamics driven by renewal clocks, and an
//! Euler–Maruyama integrator for their diffusion limits.
//!
//! Engine configs, snapshot grids and the metric series use real time (the
//! event clock). The diffusion runs in squeezed time `s = γ·t`, in which the
//! drift of node `i` is `μ_i g_i + δβ∇ρ_i`.

use nalgebra::DVector;
use rand_distr::{Distribution, StandardNormal};

use crate::datamodel::{CommonNoiseTape, NodeOperators, Problem};
use crate::error::{Error, Result};
use crate::graph::Topology;
use crate::metrics::{self, MetricsSeries, PhiMode, Snapshot};
use crate::rng::{self, SimRng};
use crate::streams::{schedule_init, ClockDistribution, Event, EventKind};

/// Largest coordinate magnitude tolerated before a trial is aborted.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub gamma: f64,
    pub delta: f64,
    pub beta: f64,
    /// Real-time snapshot grid, strictly increasing. The last entry is the horizon.
    pub snapshot_times: Vec<f64>,
    pub clock: ClockDistribution,
    /// Euler–Maruyama step in squeezed time.
    pub sde_dt: f64,
    /// Ask the data source for new raw weights at every sync.
    pub refresh_weights: bool,
}

impl EngineConfig {
    pub fn new(gamma: f64, delta: f64, beta: f64, snapshot_times: Vec<f64>) -> Self {
        EngineConfig {
            gamma,
            delta,
            beta,
            snapshot_times,
            clock: ClockDistribution::Exponential,
            sde_dt: 1e-3,
            refresh_weights: false,
        }
    }

    pub fn horizon(&self) -> f64 {
        self.snapshot_times.last().copied().unwrap_or(0.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::config(format!("gamma must be positive, got {}", self.gamma)));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(Error::config(format!("delta must be nonnegative, got {}", self.delta)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::config(format!("beta must be nonnegative, got {}", self.beta)));
        }
        if !(self.sde_dt > 0.0) {
            return Err(Error::config("sde_dt must be positive"));
        }
        if self.snapshot_times.is_empty() {
            return Err(Error::config("snapshot grid is empty"));
        }
        if self.snapshot_times[0] < 0.0
            || self.snapshot_times.windows(2).any(|w| w[1] <= w[0])
        {
            return Err(Error::config("snapshot times must be nonnegative and strictly increasing"));
        }
        self.clock.validate()
    }
}

/// `n` evenly spaced snapshot times ending at `horizon`.
pub fn uniform_grid(horizon: f64, n: usize) -> Vec<f64> {
    (1..=n).map(|k| horizon * k as f64 / n as f64).collect()
}

/// `X_iᵀ Ω_i⁻¹ (X_i w_i − y)`.
pub fn local_gradient(w_i: &DVector<f64>, y: &DVector<f64>, x: &nalgebra::DMatrix<f64>, ops: &NodeOperators) -> DVector<f64> {
    &ops.xt_omega_inv * (x * w_i - y)
}

/// `Σ_j α̂_j a_ij (w_i − w_j)`.
pub fn penalty_gradient(i: usize, w: &[DVector<f64>], alpha_hat: &[f64], t: &Topology) -> DVector<f64> {
    let mut g = DVector::zeros(w[i].len());
    for &j in t.neighbors(i) {
        g.axpy(alpha_hat[j], &(&w[i] - &w[j]), 1.0);
    }
    g
}

/// Supplies noisy local gradients.
pub trait DataSource {
    /// Writes the gradient of node `node`'s `k`-th sample at `w` into `out`.
    fn gradient_into(&mut self, node: usize, k: u64, w: &DVector<f64>, out: &mut DVector<f64>) -> Result<()>;

    /// No node will ask for a sample index below `k` again.
    fn release_below(&mut self, _k: u64) {}

    /// Fresh raw weights, if the source estimates them online.
    fn refresh_weights(&mut self) -> Option<Vec<f64>> {
        None
    }
}

/// Streams samples from the generative model of a [`Problem`].
pub struct StreamSource<'a> {
    problem: &'a Problem,
    node_rngs: Vec<SimRng>,
    tape: CommonNoiseTape,
    noise: DVector<f64>,
    diff: DVector<f64>,
}

impl<'a> StreamSource<'a> {
    pub fn new(problem: &'a Problem, seed: u64) -> Self {
        StreamSource {
            problem,
            node_rngs: (0..problem.len()).map(|i| rng::node_stream(seed, i)).collect(),
            tape: CommonNoiseTape::new(problem.m(), problem.noise(), rng::stream(seed, rng::STREAM_COMMON_NOISE)),
            noise: DVector::zeros(problem.m()),
            diff: DVector::zeros(problem.p()),
        }
    }
}

impl DataSource for StreamSource<'_> {
    fn gradient_into(&mut self, node: usize, k: u64, w: &DVector<f64>, out: &mut DVector<f64>) -> Result<()> {
        // y − X w* = ε + Λ ξ_k, so the gradient is H (w − w*) − M (ε + Λ ξ_k).
        let spec = self.problem.node(node);
        let ops = self.problem.ops(node);
        let sigma = spec.sigma2.sqrt();
        let kind = self.problem.noise();
        let has_common = spec.lambda_diag.iter().any(|&l| l != 0.0);
        let rng = &mut self.node_rngs[node];
        for q in 0..self.noise.len() {
            self.noise[q] = if sigma > 0.0 { sigma * kind.draw(rng) } else { 0.0 };
        }
        if has_common {
            let xi = self.tape.get(k);
            for q in 0..self.noise.len() {
                self.noise[q] += spec.lambda_diag[q] * xi[q];
            }
        }
        self.diff.copy_from(w);
        self.diff -= &self.problem.w_star().0;
        out.gemv(1.0, &ops.hessian, &self.diff, 0.0);
        out.gemv(-1.0, &ops.xt_omega_inv, &self.noise, 1.0);
        Ok(())
    }

    fn release_below(&mut self, k: u64) {
        self.tape.release_below(k);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgnState {
    pub w: Vec<DVector<f64>>,
    pub sim_time: f64,
    pub sample_counters: Vec<u64>,
    pub alpha_hat: Vec<f64>,
    pub steps: u64,
    scratch: Vec<DVector<f64>>,
    grad: DVector<f64>,
}

impl SgnState {
    pub fn new(w: Vec<DVector<f64>>, alpha_hat: Vec<f64>) -> Self {
        let n = w.len();
        let p = w.first().map_or(0, |v| v.len());
        SgnState {
            scratch: w.clone(),
            w,
            sim_time: 0.0,
            sample_counters: vec![0; n],
            alpha_hat,
            steps: 0,
            grad: DVector::zeros(p),
        }
    }

    pub fn alpha(&self) -> Vec<f64> {
        let c: f64 = self.alpha_hat.iter().sum();
        self.alpha_hat.iter().map(|a| a / c).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlState {
    pub w: DVector<f64>,
    pub sim_time: f64,
    pub sample_counters: Vec<u64>,
    pub steps: u64,
    grad: DVector<f64>,
}

impl FlState {
    pub fn new(w: DVector<f64>, n: usize) -> Self {
        FlState {
            grad: DVector::zeros(w.len()),
            w,
            sim_time: 0.0,
            sample_counters: vec![0; n],
            steps: 0,
        }
    }
}

fn check_finite(w: &DVector<f64>, node: usize, step: u64, time: f64) -> Result<()> {
    if w.iter().all(|v| v.is_finite() && v.abs() <= DIVERGENCE_LIMIT) {
        return Ok(());
    }
    Err(Error::Divergence {
        node,
        step,
        time,
        detail: format!("max |w| = {:e}", w.amax()),
    })
}

fn advance_time(current: &mut f64, ev: &Event) -> Result<()> {
    if ev.time < *current {
        return Err(Error::contract(format!(
            "event at {} precedes state time {}",
            ev.time, current
        )));
    }
    *current = ev.time;
    Ok(())
}

/// Applies one event to the SGN models.
///
/// A gradient event moves only the firing node. A sync moves every node
/// toward its neighbors using the models as they were before the sync.
pub fn sgn_apply_event(
    state: &mut SgnState,
    ev: &Event,
    config: &EngineConfig,
    topology: &Topology,
    source: &mut dyn DataSource,
) -> Result<()> {
    advance_time(&mut state.sim_time, ev)?;
    state.steps += 1;
    match ev.kind {
        EventKind::GradientAt(i) => {
            let k = state.sample_counters[i];
            state.sample_counters[i] += 1;
            source.gradient_into(i, k, &state.w[i], &mut state.grad)?;
            state.w[i].axpy(-config.gamma, &state.grad, 1.0);
            check_finite(&state.w[i], i, state.steps, state.sim_time)
        }
        EventKind::RegularizationSync => {
            if config.refresh_weights {
                if let Some(a) = source.refresh_weights() {
                    state.alpha_hat = a;
                }
            }
            if config.delta == 0.0 {
                return Ok(());
            }
            let gd = config.gamma * config.delta;
            for i in 0..state.w.len() {
                let s = &mut state.scratch[i];
                s.copy_from(&state.w[i]);
                for &j in topology.neighbors(i) {
                    let a = gd * state.alpha_hat[j];
                    s.axpy(-a, &state.w[i], 1.0);
                    s.axpy(a, &state.w[j], 1.0);
                }
            }
            std::mem::swap(&mut state.w, &mut state.scratch);
            for (i, w) in state.w.iter().enumerate() {
                check_finite(w, i, state.steps, state.sim_time)?;
            }
            Ok(())
        }
    }
}

/// Applies one event to the shared federated model. Syncs only advance time.
pub fn fl_apply_event(
    state: &mut FlState,
    ev: &Event,
    config: &EngineConfig,
    source: &mut dyn DataSource,
) -> Result<()> {
    advance_time(&mut state.sim_time, ev)?;
    state.steps += 1;
    if let EventKind::GradientAt(i) = ev.kind {
        let k = state.sample_counters[i];
        state.sample_counters[i] += 1;
        source.gradient_into(i, k, &state.w, &mut state.grad)?;
        state.w.axpy(-config.gamma, &state.grad, 1.0);
        check_finite(&state.w, i, state.steps, state.sim_time)?;
    }
    Ok(())
}

fn gaussian_vector(len: usize, scale: f64, rng: &mut SimRng) -> DVector<f64> {
    DVector::from_fn(len, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        scale * z
    })
}

/// One Euler–Maruyama step of length `dt` (squeezed time) for every node.
///
/// `dw_i = −(μ_i g_i + δβ∇ρ_i) dt + τ_i M_i dB_i + ς_i M_i Λ_i dB` with
/// `g_i = H_i (w_i − w*)`, `τ_i = σ_i √(γμ_i)`, `ς_i = √(γμ_i)` and one common `dB`.
#[allow(clippy::too_many_arguments)]
pub fn sde_step(
    w: &mut [DVector<f64>],
    dt: f64,
    problem: &Problem,
    topology: &Topology,
    alpha_hat: &[f64],
    config: &EngineConfig,
    rng: &mut SimRng,
) -> Result<()> {
    if !(dt > 0.0) {
        return Err(Error::contract("sde step needs dt > 0"));
    }
    let m = problem.m();
    let sq = dt.sqrt();
    let common = gaussian_vector(m, sq, rng);
    let db_common = problem.has_common_noise();
    let w_star = &problem.w_star().0;
    let frozen: Vec<DVector<f64>> = w.to_vec();
    for (i, wi) in w.iter_mut().enumerate() {
        let spec = problem.node(i);
        let ops = problem.ops(i);
        let scale = (config.gamma * spec.mu).sqrt();
        let mut drift = spec.mu * (&ops.hessian * (&frozen[i] - w_star));
        if config.delta > 0.0 && config.beta > 0.0 {
            drift.axpy(config.delta * config.beta, &penalty_gradient(i, &frozen, alpha_hat, topology), 1.0);
        }
        wi.axpy(-dt, &drift, 1.0);
        let tau = spec.sigma2.sqrt() * scale;
        if tau > 0.0 {
            let db = gaussian_vector(m, sq, rng);
            wi.gemv(tau, &ops.xt_omega_inv, &db, 1.0);
        }
        if db_common && scale > 0.0 {
            wi.gemv(scale, &ops.xt_omega_inv_lambda, &common, 1.0);
        }
    }
    for (i, wi) in w.iter().enumerate() {
        check_finite(wi, i, 0, f64::NAN)?;
    }
    Ok(())
}

/// Euler–Maruyama step of the federated diffusion
/// `dw = Σ_i [−μ_i g_i dt + τ_i M_i dB_i + ς_i M_i Λ_i dB]`.
pub fn fl_sde_step(
    w: &mut DVector<f64>,
    dt: f64,
    problem: &Problem,
    config: &EngineConfig,
    rng: &mut SimRng,
) -> Result<()> {
    if !(dt > 0.0) {
        return Err(Error::contract("sde step needs dt > 0"));
    }
    let m = problem.m();
    let sq = dt.sqrt();
    let common = gaussian_vector(m, sq, rng);
    let db_common = problem.has_common_noise();
    let err = &*w - &problem.w_star().0;
    let mut dw = DVector::zeros(w.len());
    for i in 0..problem.len() {
        let spec = problem.node(i);
        let ops = problem.ops(i);
        let scale = (config.gamma * spec.mu).sqrt();
        dw.gemv(-dt * spec.mu, &ops.hessian, &err, 1.0);
        let tau = spec.sigma2.sqrt() * scale;
        if tau > 0.0 {
            let db = gaussian_vector(m, sq, rng);
            dw.gemv(tau, &ops.xt_omega_inv, &db, 1.0);
        }
        if db_common && scale > 0.0 {
            dw.gemv(scale, &ops.xt_omega_inv_lambda, &common, 1.0);
        }
    }
    *w += dw;
    check_finite(w, 0, 0, f64::NAN)
}

/// Which dynamics a trial runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EngineKind {
    Sgn,
    Fl,
    SgnSde,
    FlSde,
}

impl EngineKind {
    pub fn is_federated(self) -> bool {
        matches!(self, EngineKind::Fl | EngineKind::FlSde)
    }
}

/// Everything a trial needs besides the engine config.
#[derive(Debug, Clone)]
pub struct TrialSetup<'a> {
    pub topology: &'a Topology,
    /// Raw weights at time zero.
    pub alpha_hat: Vec<f64>,
    /// Gradient rate of each node.
    pub rates: Vec<f64>,
    /// Reference for `U`, `F` and parameter-mode `φ`.
    pub w_star: DVector<f64>,
    /// Initial node models (the federated model starts at their weighted average).
    pub w0: Vec<DVector<f64>>,
    pub phi: PhiMode,
}

impl<'a> TrialSetup<'a> {
    /// Every node starts at zero; weights, rates and `w*` come from the problem.
    pub fn from_problem(problem: &Problem, topology: &'a Topology) -> Self {
        TrialSetup {
            topology,
            alpha_hat: problem.weights().alpha_hat,
            rates: problem.rates(),
            w_star: problem.w_star().0.clone(),
            w0: vec![DVector::zeros(problem.p()); problem.len()],
            phi: PhiMode::Parameter,
        }
    }

    pub fn with_w0(mut self, w0: Vec<DVector<f64>>) -> Self {
        self.w0 = w0;
        self
    }

    fn validate(&self) -> Result<()> {
        let n = self.topology.n();
        if self.alpha_hat.len() != n || self.rates.len() != n || self.w0.len() != n {
            return Err(Error::config(format!(
                "trial setup sizes disagree with the {n}-node topology"
            )));
        }
        if self.w0.iter().any(|w| w.len() != self.w_star.len()) {
            return Err(Error::config("initial models have the wrong dimension"));
        }
        Ok(())
    }
}

fn sgn_snapshot(time: f64, w: &[DVector<f64>], alpha: &[f64], setup: &TrialSetup) -> Snapshot {
    let avg = metrics::ensemble_average(w, alpha);
    let (lhs, _) = metrics::lemma1_identity(w, alpha, &setup.w_star);
    Snapshot {
        time,
        vbar: Some(metrics::regularity(w, alpha)),
        u: Some(0.5 * (&avg - &setup.w_star).norm_squared()),
        f: None,
        phi: metrics::estimation_error(&avg, &setup.w_star, &setup.phi),
        lemma_lhs: Some(lhs),
    }
}

fn fl_snapshot(time: f64, w: &DVector<f64>, setup: &TrialSetup) -> Snapshot {
    Snapshot {
        time,
        vbar: None,
        u: None,
        f: Some(metrics::fl_error(w, &setup.w_star)),
        phi: metrics::estimation_error(w, &setup.w_star, &setup.phi),
        lemma_lhs: None,
    }
}

fn initial_fl_model(setup: &TrialSetup) -> DVector<f64> {
    let c: f64 = setup.alpha_hat.iter().sum();
    let alpha: Vec<f64> = setup.alpha_hat.iter().map(|a| a / c).collect();
    metrics::ensemble_average(&setup.w0, &alpha)
}

/// Runs SGN or FL against an arbitrary data source.
pub fn run_discrete(
    kind: EngineKind,
    source: &mut dyn DataSource,
    setup: &TrialSetup,
    config: &EngineConfig,
    seed: u64,
    trial_id: u64,
) -> Result<MetricsSeries> {
    config.validate()?;
    setup.validate()?;
    let mut clock_rng = rng::stream(seed, rng::STREAM_CLOCKS);
    let mut queue = schedule_init(&setup.rates, config.beta, config.clock, &mut clock_rng)?;
    let mut series = MetricsSeries::new(trial_id);
    let n = setup.topology.n();
    match kind {
        EngineKind::Sgn => {
            let mut state = SgnState::new(setup.w0.clone(), setup.alpha_hat.clone());
            for &ts in &config.snapshot_times {
                while queue.peek_time().is_some_and(|t| t <= ts) {
                    let ev = queue.next_event(&mut clock_rng)?;
                    sgn_apply_event(&mut state, &ev, config, setup.topology, source)?;
                    if state.steps.is_multiple_of(256) {
                        source.release_below(*state.sample_counters.iter().min().unwrap_or(&0));
                    }
                }
                series.push(sgn_snapshot(ts, &state.w, &state.alpha(), setup));
            }
            series.final_model = Some(metrics::ensemble_average(&state.w, &state.alpha()));
        }
        EngineKind::Fl => {
            let mut state = FlState::new(initial_fl_model(setup), n);
            for &ts in &config.snapshot_times {
                while queue.peek_time().is_some_and(|t| t <= ts) {
                    let ev = queue.next_event(&mut clock_rng)?;
                    fl_apply_event(&mut state, &ev, config, source)?;
                    if state.steps.is_multiple_of(256) {
                        source.release_below(*state.sample_counters.iter().min().unwrap_or(&0));
                    }
                }
                series.push(fl_snapshot(ts, &state.w, setup));
            }
            series.final_model = Some(state.w);
        }
        EngineKind::SgnSde | EngineKind::FlSde => {
            return Err(Error::contract("diffusion engines need a generative problem; use run_trial"));
        }
    }
    Ok(series)
}

/// Runs the diffusion limit of SGN or FL for a generative problem.
pub fn run_sde(
    kind: EngineKind,
    problem: &Problem,
    setup: &TrialSetup,
    config: &EngineConfig,
    seed: u64,
    trial_id: u64,
) -> Result<MetricsSeries> {
    config.validate()?;
    setup.validate()?;
    let mut r = rng::stream(seed, rng::STREAM_SDE_COMMON);
    let mut series = MetricsSeries::new(trial_id);
    let c: f64 = setup.alpha_hat.iter().sum();
    let alpha: Vec<f64> = setup.alpha_hat.iter().map(|a| a / c).collect();
    let mut s = 0.0;
    let mut w = setup.w0.clone();
    let mut wf = initial_fl_model(setup);
    for &ts in &config.snapshot_times {
        let target = config.gamma * ts;
        while s < target {
            let dt = config.sde_dt.min(target - s);
            let res = match kind {
                EngineKind::SgnSde => sde_step(&mut w, dt, problem, setup.topology, &setup.alpha_hat, config, &mut r),
                EngineKind::FlSde => fl_sde_step(&mut wf, dt, problem, config, &mut r),
                _ => return Err(Error::contract("run_sde expects a diffusion engine")),
            };
            if let Err(Error::Divergence { node, detail, .. }) = res {
                return Err(Error::Divergence {
                    node,
                    step: (s / config.sde_dt) as u64,
                    time: s / config.gamma,
                    detail,
                });
            }
            res?;
            s += dt;
            if target - s < 1e-12 * target.max(1.0) {
                s = target;
            }
        }
        series.push(match kind {
            EngineKind::SgnSde => sgn_snapshot(ts, &w, &alpha, setup),
            _ => fl_snapshot(ts, &wf, setup),
        });
    }
    series.final_model = Some(match kind {
        EngineKind::SgnSde => metrics::ensemble_average(&w, &alpha),
        _ => wf,
    });
    Ok(series)
}

/// Runs any engine on a generative problem. Deterministic in `(kind, problem, config, seed)`.
pub fn run_trial(
    kind: EngineKind,
    problem: &Problem,
    setup: &TrialSetup,
    config: &EngineConfig,
    seed: u64,
    trial_id: u64,
) -> Result<MetricsSeries> {
    match kind {
        EngineKind::Sgn | EngineKind::Fl => {
            let mut source = StreamSource::new(problem, seed);
            run_discrete(kind, &mut source, setup, config, seed, trial_id)
        }
        EngineKind::SgnSde | EngineKind::FlSde => run_sde(kind, problem, setup, config, seed, trial_id),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{GroundTruth, NodeDataSpec, NoiseModel};
    use crate::graph::mixing_matrix;
    use approx::assert_abs_diff_eq;
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    fn node(id: usize, x: DMatrix<f64>, sigma2: f64, lambda: f64, mu: f64) -> NodeDataSpec {
        let m = x.nrows();
        NodeDataSpec {
            node_id: id,
            x,
            sigma2,
            lambda_diag: DVector::from_element(m, lambda),
            mu,
            alpha_hat: 1.0,
        }
    }

    fn problem(nodes: Vec<NodeDataSpec>, w_star: &[f64]) -> Problem {
        Problem::new(nodes, GroundTruth::new(DVector::from_row_slice(w_star)).unwrap(), NoiseModel::Gaussian).unwrap()
    }

    /// Source with no noise: y = X w*.
    struct Exact<'a>(&'a Problem);

    impl DataSource for Exact<'_> {
        fn gradient_into(&mut self, node: usize, _k: u64, w: &DVector<f64>, out: &mut DVector<f64>) -> Result<()> {
            let spec = self.0.node(node);
            let y = &spec.x * &self.0.w_star().0;
            out.copy_from(&local_gradient(w, &y, &spec.x, self.0.ops(node)));
            Ok(())
        }
    }

    #[test]
    fn local_gradient_examples() {
        let p = problem(vec![node(0, DMatrix::identity(2, 2), 1.0, 0.0, 1.0)], &[1.0, 2.0]);
        let ws = &p.w_star().0;
        let y = ws.clone();
        assert_eq!(local_gradient(ws, &y, &p.node(0).x, p.ops(0)), DVector::zeros(2));
        let w = ws + DVector::from_row_slice(&[1.0, 0.0]);
        assert_eq!(local_gradient(&w, &y, &p.node(0).x, p.ops(0)), DVector::from_row_slice(&[1.0, 0.0]));

        let x = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]);
        let p = problem(vec![node(0, x.clone(), 1.0, 0.0, 1.0)], &[0.0, 0.0]);
        let g = local_gradient(&DVector::from_row_slice(&[1.0, 1.0]), &DVector::zeros(2), &x, p.ops(0));
        assert_eq!(g, DVector::from_row_slice(&[1.0, 4.0]));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.5, -0.3, 2.0, 0.7, 0.1]);
        let p = problem(vec![node(0, x.clone(), 0.4, 0.3, 1.0)], &[0.5, -1.0]);
        let spec = p.node(0);
        let omega_inv = p.ops(0).omega.inverse();
        let y = &x * &p.w_star().0;
        let f = |w: &DVector<f64>| {
            let r = &x * w - &y;
            0.5 * (r.transpose() * &omega_inv * &r)[0]
        };
        let w = DVector::from_row_slice(&[1.3, 0.2]);
        let g = local_gradient(&w, &y, &spec.x, p.ops(0));
        let analytic = &p.ops(0).hessian * (&w - &p.w_star().0);
        assert!((&g - &analytic).amax() < 1e-12);
        let h = 1e-5;
        for c in 0..2 {
            let mut e = DVector::zeros(2);
            e[c] = h;
            let fd = (f(&(&w + &e)) - f(&(&w - &e))) / (2.0 * h);
            assert!((fd - g[c]).abs() <= 1e-6 * g[c].abs().max(1.0));
        }
    }

    #[test]
    fn penalty_examples() {
        let t = Topology::new(3, [(0, 1), (0, 2)]).unwrap();
        let same = vec![DVector::from_element(1, 2.0); 3];
        assert_eq!(penalty_gradient(0, &same, &[1.0; 3], &t)[0], 0.0);
        let w = vec![DVector::from_element(1, 1.0), DVector::zeros(1), DVector::zeros(1)];
        assert_eq!(penalty_gradient(0, &w, &[9.0, 1.0, 1.0], &t)[0], 2.0);
        assert_eq!(penalty_gradient(0, &w, &[9.0, 2.0, 3.0], &t)[0], 5.0);
    }

    #[test]
    fn penalty_matches_finite_differences() {
        let t = Topology::new(3, [(0, 1), (0, 2), (1, 2)]).unwrap();
        let a = [0.5, 2.0, 1.5];
        let w = vec![
            DVector::from_row_slice(&[1.0, -2.0]),
            DVector::from_row_slice(&[0.3, 0.4]),
            DVector::from_row_slice(&[-1.0, 2.5]),
        ];
        let rho = |wi: &DVector<f64>| {
            t.neighbors(0).iter().map(|&j| 0.5 * a[j] * (wi - &w[j]).norm_squared()).sum::<f64>()
        };
        let g = penalty_gradient(0, &w, &a, &t);
        let h = 1e-6;
        for c in 0..2 {
            let mut e = DVector::zeros(2);
            e[c] = h;
            let fd = (rho(&(&w[0] + &e)) - rho(&(&w[0] - &e))) / (2.0 * h);
            assert!((fd - g[c]).abs() < 1e-8);
        }
    }

    fn ev(time: f64, kind: EventKind) -> Event {
        Event { time, kind }
    }

    #[test]
    fn sync_examples() {
        let p = problem(
            vec![node(0, DMatrix::identity(1, 1), 1.0, 0.0, 1.0), node(1, DMatrix::identity(1, 1), 1.0, 0.0, 1.0)],
            &[0.0],
        );
        let t = Topology::new(2, [(0, 1)]).unwrap();
        let w0 = vec![DVector::from_element(1, 1.0), DVector::zeros(1)];
        let mut cfg = EngineConfig::new(0.1, 1.0, 1.0, vec![1.0]);
        let mut src = Exact(&p);
        let mut s = SgnState::new(w0.clone(), vec![1.0, 1.0]);
        sgn_apply_event(&mut s, &ev(0.5, EventKind::RegularizationSync), &cfg, &t, &mut src).unwrap();
        assert_abs_diff_eq!(s.w[0][0], 0.9, epsilon = 1e-15);
        assert_abs_diff_eq!(s.w[1][0], 0.1, epsilon = 1e-15);
        assert_eq!(s.sim_time, 0.5);

        cfg.delta = 0.0;
        let mut s = SgnState::new(w0.clone(), vec![1.0, 1.0]);
        sgn_apply_event(&mut s, &ev(0.5, EventKind::RegularizationSync), &cfg, &t, &mut src).unwrap();
        assert_eq!(s.w, w0);

        assert!(sgn_apply_event(&mut s, &ev(0.1, EventKind::RegularizationSync), &cfg, &t, &mut src).is_err());
    }

    #[test]
    fn gradient_event_halves_error() {
        let p = problem(vec![node(0, DMatrix::identity(2, 2), 1.0, 0.0, 1.0)], &[1.0, -1.0]);
        let t = Topology::empty(1);
        let cfg = EngineConfig::new(0.5, 0.0, 0.0, vec![1.0]);
        let mut src = Exact(&p);
        let mut s = SgnState::new(vec![DVector::from_row_slice(&[3.0, 3.0])], vec![1.0]);
        for k in 1..=5 {
            sgn_apply_event(&mut s, &ev(k as f64, EventKind::GradientAt(0)), &cfg, &t, &mut src).unwrap();
            let err = (&s.w[0] - &p.w_star().0).norm();
            assert_abs_diff_eq!(err, (20.0f64).sqrt() * 0.5f64.powi(k), epsilon = 1e-12);
        }
        assert_eq!(s.sample_counters, vec![5]);
    }

    #[test]
    fn divergence_is_reported() {
        let p = problem(vec![node(0, DMatrix::identity(1, 1), 1.0, 0.0, 1.0)], &[0.0]);
        let t = Topology::empty(1);
        let cfg = EngineConfig::new(3.0, 0.0, 0.0, vec![1.0]);
        let mut src = Exact(&p);
        let mut s = SgnState::new(vec![DVector::from_element(1, 1.0)], vec![1.0]);
        let mut k = 0.0;
        let err = loop {
            k += 1.0;
            if let Err(e) = sgn_apply_event(&mut s, &ev(k, EventKind::GradientAt(0)), &cfg, &t, &mut src) {
                break e;
            }
        };
        assert!(matches!(err, Error::Divergence { node: 0, step: 40, .. }), "{err}");
    }

    #[test]
    fn fl_contracts_per_event() {
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let p = problem(vec![node(0, x.clone(), 2.0, 0.0, 1.0), node(1, x, 2.0, 0.0, 1.0)], &[0.0, 0.0]);
        // H = I/2, so each event scales the error by 1 − γ/2.
        let cfg = EngineConfig::new(0.2, 0.0, 0.0, vec![1.0]);
        let mut src = Exact(&p);
        let mut s = FlState::new(DVector::from_row_slice(&[1.0, 1.0]), 2);
        for (k, i) in [0, 1, 1, 0].into_iter().enumerate() {
            fl_apply_event(&mut s, &ev(k as f64 + 1.0, EventKind::GradientAt(i)), &cfg, &mut src).unwrap();
            assert_abs_diff_eq!(s.w[0], 0.9f64.powi(k as i32 + 1), epsilon = 1e-15);
        }
        fl_apply_event(&mut s, &ev(9.0, EventKind::RegularizationSync), &cfg, &mut src).unwrap();
        assert_eq!(s.sample_counters, vec![2, 2]);
    }

    #[test]
    fn single_node_fl_equals_sgn_without_penalty() {
        let p = problem(vec![node(0, DMatrix::identity(3, 2), 0.5, 0.2, 2.0)], &[1.0, 2.0]);
        let t = Topology::empty(1);
        let setup = TrialSetup::from_problem(&p, &t);
        let cfg = EngineConfig::new(0.01, 0.0, 1.0, uniform_grid(50.0, 10));
        let a = run_trial(EngineKind::Sgn, &p, &setup, &cfg, 17, 0).unwrap();
        let b = run_trial(EngineKind::Fl, &p, &setup, &cfg, 17, 0).unwrap();
        for (x, y) in a.snapshots.iter().zip(&b.snapshots) {
            assert_eq!(x.u.unwrap().to_bits(), y.f.unwrap().to_bits());
            assert_eq!(x.phi.to_bits(), y.phi.to_bits());
        }
    }

    #[test]
    fn fl_counts_follow_rates() {
        let p = problem(
            vec![node(0, DMatrix::identity(1, 1), 1.0, 0.0, 10.0), node(1, DMatrix::identity(1, 1), 1.0, 0.0, 1.0)],
            &[0.0],
        );
        let cfg = EngineConfig::new(1e-3, 0.0, 0.0, vec![1000.0]);
        let mut src = Exact(&p);
        let mut r = rng::stream(2, rng::STREAM_CLOCKS);
        let mut q = schedule_init(&p.rates(), 0.0, cfg.clock, &mut r).unwrap();
        let mut s = FlState::new(DVector::zeros(1), 2);
        while q.peek_time().is_some_and(|t| t <= 1000.0) {
            let e = q.next_event(&mut r).unwrap();
            fl_apply_event(&mut s, &e, &cfg, &mut src).unwrap();
        }
        let ratio = s.sample_counters[0] as f64 / s.sample_counters[1] as f64;
        assert!((ratio - 10.0).abs() < 1.5, "ratio {ratio}");
    }

    #[test]
    fn sde_examples() {
        let p = problem(vec![node(0, DMatrix::identity(2, 2), 1.0, 0.0, 1.0)], &[1.0, 2.0]);
        let t = Topology::empty(1);
        // γ = 0 is not a valid engine config, so bypass validation by calling the step directly.
        let cfg = EngineConfig::new(0.0, 0.0, 0.0, vec![1.0]);
        let mut r = rng::stream(1, 0);
        let mut w = vec![DVector::from_row_slice(&[3.0, 0.0])];
        sde_step(&mut w, 0.1, &p, &t, &[1.0], &cfg, &mut r).unwrap();
        assert_abs_diff_eq!(w[0][0], 3.0 - 0.1 * 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(w[0][1], 0.0 - 0.1 * -2.0, epsilon = 1e-15);

        let p2 = problem(
            vec![node(0, DMatrix::identity(2, 2), 0.0, 0.5, 1.0), node(1, DMatrix::identity(2, 2), 0.0, 0.5, 1.0)],
            &[1.0, 2.0],
        );
        let t2 = Topology::complete(2);
        let cfg = EngineConfig::new(0.0, 5.0, 1.0, vec![1.0]);
        let mut w = vec![p2.w_star().0.clone(); 2];
        sde_step(&mut w, 0.1, &p2, &t2, &[1.0, 1.0], &cfg, &mut r).unwrap();
        assert_eq!(w, vec![p2.w_star().0.clone(); 2]);
    }

    #[test]
    fn sde_step_variance() {
        // Scalar X = 1, σ² = 1, Λ = λ: Ω = 1 + λ². One step from w* has variance
        // γμ dt (σ² + λ²) / Ω² = γ dt / Ω.
        let lambda = 0.5;
        let p = problem(vec![node(0, DMatrix::identity(1, 1), 1.0, lambda, 1.0)], &[0.0]);
        let t = Topology::empty(1);
        let gamma = 0.3;
        let dt = 0.2;
        let cfg = EngineConfig::new(gamma, 0.0, 0.0, vec![1.0]);
        let mut r = rng::stream(77, 0);
        let draws = 100_000;
        let mut sum2 = 0.0;
        for _ in 0..draws {
            let mut w = vec![DVector::zeros(1)];
            sde_step(&mut w, dt, &p, &t, &[1.0], &cfg, &mut r).unwrap();
            sum2 += w[0][0] * w[0][0];
        }
        let var = sum2 / draws as f64;
        let exact = gamma * dt / (1.0 + lambda * lambda);
        // Sample variance of a Gaussian has relative sd √(2/M).
        assert!((var / exact - 1.0).abs() < 5.0 * (2.0 / draws as f64).sqrt(), "{var} vs {exact}");
    }

    #[test]
    fn noise_free_network_reaches_truth() {
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.0, 1.0]);
        let nodes = (0..4).map(|i| node(i, x.clone(), 1.0, 0.0, 1.0 + i as f64 * 0.5)).collect();
        let p = problem(nodes, &[1.0, -2.0]);
        let t = Topology::new(4, [(0, 1), (1, 2), (2, 3)]).unwrap();
        let setup = TrialSetup::from_problem(&p, &t);
        let cfg = EngineConfig::new(0.1, 1.0, 2.0, vec![400.0]);
        let mut src = Exact(&p);
        let s = run_discrete(EngineKind::Sgn, &mut src, &setup, &cfg, 3, 0).unwrap();
        assert!(s.last().unwrap().lemma_lhs.unwrap().sqrt() < 1e-7);
    }

    #[test]
    fn runs_are_bit_identical() {
        let p = problem(
            vec![node(0, DMatrix::identity(2, 2), 0.5, 0.3, 1.0), node(1, DMatrix::identity(2, 2), 0.2, 0.1, 2.0)],
            &[1.0, 2.0],
        );
        let t = Topology::complete(2);
        let setup = TrialSetup::from_problem(&p, &t);
        let cfg = EngineConfig::new(0.05, 1.0, 1.0, uniform_grid(20.0, 5));
        for kind in [EngineKind::Sgn, EngineKind::Fl, EngineKind::SgnSde, EngineKind::FlSde] {
            let a = run_trial(kind, &p, &setup, &cfg, 5, 0).unwrap();
            let b = run_trial(kind, &p, &setup, &cfg, 5, 0).unwrap();
            assert_eq!(a, b, "{kind:?}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn sync_equals_mixing_matrix(
            n in 2usize..7,
            seed in any::<u64>(),
            gd in 0.0f64..0.2,
        ) {
            use rand::Rng;
            let mut r = rng::stream(seed, 0);
            let t = crate::graph::generate(&crate::graph::GraphKind::EdgeFraction { n, fraction: 0.6, exact: false }, &mut r).unwrap();
            let a: Vec<f64> = (0..n).map(|_| r.random_range(0.2..2.0)).collect();
            let w0: Vec<DVector<f64>> = (0..n).map(|_| DVector::from_element(1, r.random_range(-5.0..5.0))).collect();
            let p = problem((0..n).map(|i| node(i, DMatrix::identity(1, 1), 1.0, 0.0, 1.0)).collect(), &[0.0]);
            let cfg = EngineConfig::new(gd, 1.0, 1.0, vec![1.0]);
            let mut src = Exact(&p);
            let mut s = SgnState::new(w0.clone(), a.clone());
            sgn_apply_event(&mut s, &ev(1.0, EventKind::RegularizationSync), &cfg, &t, &mut src).unwrap();
            let stacked = DVector::from_iterator(n, w0.iter().map(|v| v[0]));
            let mixed = mixing_matrix(&t, &a, gd, 1.0).w * stacked;
            for i in 0..n {
                prop_assert!((s.w[i][0] - mixed[i]).abs() < 1e-12);
            }
        }

        #[test]
        fn uniform_sync_preserves_sum(n in 2usize..8, seed in any::<u64>(), p in 1usize..4) {
            use rand::Rng;
            let mut r = rng::stream(seed, 0);
            let t = crate::graph::generate(&crate::graph::GraphKind::EdgeFraction { n, fraction: 0.5, exact: false }, &mut r).unwrap();
            let w0: Vec<DVector<f64>> = (0..n).map(|_| DVector::from_fn(p, |_, _| r.random_range(-5.0..5.0))).collect();
            let prob = problem((0..n).map(|i| node(i, DMatrix::identity(p, p), 1.0, 0.0, 1.0)).collect(), &vec![0.0; p]);
            let cfg = EngineConfig::new(0.05, 1.0, 1.0, vec![1.0]);
            let mut src = Exact(&prob);
            let mut s = SgnState::new(w0.clone(), vec![1.0; n]);
            sgn_apply_event(&mut s, &ev(1.0, EventKind::RegularizationSync), &cfg, &t, &mut src).unwrap();
            let before: DVector<f64> = w0.iter().sum();
            let after: DVector<f64> = s.w.iter().sum();
            prop_assert!((before - after).amax() < 1e-10);
        }
    }
}
