//! Problem constants, finite-time bound curves and the SGN-versus-federated
//! decision rules.
//!
//! Bound curves are functions of squeezed time `s = γ·t`, the clock of the
//! diffusion limit.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::datamodel::{Problem, Weights};
use crate::engines::{run_trial, EngineConfig, EngineKind, TrialSetup};
use crate::error::{Error, Result};
use crate::graph::{spectral_summary, Topology};
use crate::metrics::{self, Metric};
use crate::{rng, runner};

/// Which rate multiplies `δλ̂₂` in the bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaConvention {
    /// `β̂ = β / c`.
    #[default]
    Proof,
    /// `β` as is.
    Statement,
}

impl std::str::FromStr for BetaConvention {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "proof" => Ok(BetaConvention::Proof),
            "statement" => Ok(BetaConvention::Statement),
            _ => Err(Error::config(format!("unknown beta convention {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KappaConvention {
    /// `κ_i = 2 λ_min(H_i)`.
    #[default]
    Literal,
    /// `κ_i = λ_min(H_i)`.
    Strict,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EtaNorm {
    #[default]
    Spectral,
    Frobenius,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundOptions {
    pub beta: BetaConvention,
    pub kappa: KappaConvention,
    pub eta: EtaNorm,
}

/// Serializes non-finite numbers as `"+inf"`, `"-inf"` or `null`.
pub mod json_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_none()
        } else if *v > 0.0 {
            s.serialize_str("+inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
        Null(()),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) if s == "+inf" => Ok(f64::INFINITY),
            Repr::Str(s) if s == "-inf" => Ok(f64::NEG_INFINITY),
            Repr::Str(s) => Err(serde::de::Error::custom(format!("bad number {s:?}"))),
            Repr::Null(()) => Ok(f64::NAN),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemConstants {
    pub eta: f64,
    pub kappa: f64,
    pub mu: f64,
    pub mu_prime: f64,
    pub tau: Vec<f64>,
    pub varsigma: Vec<f64>,
    pub lambda2: f64,
    pub lambda2_hat: f64,
    pub c: f64,
    pub gamma: f64,
    /// `‖X_iᵀΩ_i⁻¹‖_F²`.
    pub m_fro2: Vec<f64>,
    /// `‖X_iᵀΩ_i⁻¹Λ_i‖_F²`.
    pub ml_fro2: Vec<f64>,
    /// `A_{i,k}` row-major.
    pub a: Vec<Vec<f64>>,
    pub alpha: Vec<f64>,
}

fn sym_eigenvalues(h: &DMatrix<f64>) -> Vec<f64> {
    let sym = (h + h.transpose()) * 0.5;
    let mut e: Vec<f64> = sym.symmetric_eigen().eigenvalues.iter().copied().collect();
    e.sort_by(f64::total_cmp);
    e
}

/// `A_{i,k} = 1ᵀ (X_iᵀΩ_i⁻¹Λ_i ∘ X_kᵀΩ_k⁻¹Λ_k) 1`.
pub fn hadamard_a(i: usize, k: usize, problem: &Problem) -> f64 {
    problem
        .ops(i)
        .xt_omega_inv_lambda
        .component_mul(&problem.ops(k).xt_omega_inv_lambda)
        .sum()
}

impl ProblemConstants {
    pub fn compute(problem: &Problem, topology: &Topology, gamma: f64, opts: BoundOptions) -> Result<Self> {
        if topology.n() != problem.len() {
            return Err(Error::config(format!(
                "topology has {} nodes, problem has {}",
                topology.n(),
                problem.len()
            )));
        }
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(Error::config("gamma must be finite and nonnegative"));
        }
        let n = problem.len();
        let mut eta: f64 = 0.0;
        let mut kappa = f64::INFINITY;
        for i in 0..n {
            let h = &problem.ops(i).hessian;
            let eig = sym_eigenvalues(h);
            let e = match opts.eta {
                EtaNorm::Spectral => eig.iter().fold(0.0f64, |a, v| a.max(v.abs())),
                EtaNorm::Frobenius => h.norm(),
            };
            eta = eta.max(e);
            let lmin = eig[0].max(0.0);
            let factor = match opts.kappa {
                KappaConvention::Literal => 2.0,
                KappaConvention::Strict => 1.0,
            };
            kappa = kappa.min(factor * lmin);
        }
        let scale = eta.max(1.0);
        if kappa <= 1e-12 * scale {
            log::warn!("some X_iᵀΩ_i⁻¹X_i is rank deficient; κ = 0 and the bounds degenerate");
            kappa = 0.0;
        }
        let rates = problem.rates();
        let weights: Weights = problem.weights();
        let spectral = spectral_summary(topology, &weights.alpha_hat);
        let varsigma: Vec<f64> = rates.iter().map(|m| (gamma * m).sqrt()).collect();
        let tau = problem
            .nodes()
            .iter()
            .zip(&varsigma)
            .map(|(s, v)| s.sigma2.sqrt() * v)
            .collect();
        let a = (0..n).map(|i| (0..n).map(|k| hadamard_a(i, k, problem)).collect()).collect();
        Ok(ProblemConstants {
            eta,
            kappa,
            mu: rates.iter().copied().fold(f64::INFINITY, f64::min),
            mu_prime: rates.iter().copied().fold(0.0, f64::max),
            tau,
            varsigma,
            lambda2: spectral.lambda2,
            lambda2_hat: spectral.lambda2_hat,
            c: weights.c,
            gamma,
            m_fro2: (0..n).map(|i| problem.ops(i).xt_omega_inv.norm_squared()).collect(),
            ml_fro2: (0..n).map(|i| problem.ops(i).xt_omega_inv_lambda.norm_squared()).collect(),
            a,
            alpha: weights.alpha,
        })
    }

    pub fn n(&self) -> usize {
        self.tau.len()
    }

    /// `μ′η / (μκ)`.
    pub fn condition_ratio(&self) -> f64 {
        self.mu_prime * self.eta / (self.mu * self.kappa)
    }

    fn weighted_common(&self, alpha: &[f64]) -> f64 {
        let n = self.n();
        let mut s = 0.0;
        for k in 0..n {
            for j in 0..n {
                s += alpha[k] * alpha[j] * self.varsigma[k] * self.varsigma[j] * self.a[k][j];
            }
        }
        s
    }

    fn weighted_individual(&self, alpha: &[f64]) -> f64 {
        (0..self.n())
            .map(|k| alpha[k] * alpha[k] * self.tau[k] * self.tau[k] * self.m_fro2[k])
            .sum()
    }
}

/// `(C1, [C_{1,i}])` under normalized weights `alpha`.
pub fn constant_c1(k: &ProblemConstants, alpha: &[f64]) -> (f64, Vec<f64>) {
    let n = k.n();
    let shared = k.weighted_individual(alpha) + k.weighted_common(alpha);
    let per_node: Vec<f64> = (0..n)
        .map(|i| {
            let cross: f64 = (0..n).map(|j| alpha[j] * k.varsigma[i] * k.varsigma[j] * k.a[i][j]).sum();
            k.tau[i].powi(2) * (1.0 - 2.0 * alpha[i]) * k.m_fro2[i]
                + k.varsigma[i].powi(2) * k.ml_fro2[i]
                + shared
                - 2.0 * cross
        })
        .collect();
    for (i, c) in per_node.iter().enumerate() {
        if *c < -1e-12 * shared.abs().max(1e-300) {
            log::warn!("C_1,{i} = {c} is negative");
        }
    }
    let c1 = 0.5 * alpha.iter().zip(&per_node).map(|(a, c)| a * c).sum::<f64>();
    (c1, per_node)
}

pub fn constant_c2(k: &ProblemConstants, alpha: &[f64]) -> f64 {
    0.5 * (k.weighted_individual(alpha) + k.weighted_common(alpha))
}

pub fn constant_c3(k: &ProblemConstants) -> f64 {
    let ones = vec![1.0; k.n()];
    let ind: f64 = (0..k.n()).map(|i| k.tau[i].powi(2) * k.m_fro2[i]).sum();
    0.5 * (ind + k.weighted_common(&ones))
}

/// `e^{−r s} x0 + limit·(1 − e^{−r s})`; linear in `s` when `r = 0`.
fn relax(x0: f64, rate: f64, forcing: f64, s: f64) -> f64 {
    if s == 0.0 {
        return x0;
    }
    if rate > 0.0 {
        let e = (-rate * s).exp();
        x0 * e + forcing / rate * (1.0 - e)
    } else {
        x0 + forcing * s
    }
}

/// Inputs of the theorem curves besides the constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub vbar0: f64,
    pub u0: f64,
    pub f0: f64,
    pub delta: f64,
    pub beta: f64,
}

/// Closed-form bound curves.
#[derive(Debug, Clone, PartialEq)]
pub struct TheoremCurves {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    /// `μκ + δβ_effλ̂₂`.
    pub thm1_half_rate: f64,
    /// `δβ_effλ̂₂`.
    pub network_rate: f64,
    pub mu_kappa: f64,
    pub eta_mu_prime: f64,
    /// `(ημ′ − κμ)/(δβλ̂₂)·C1 + C2`, `+∞` when the network rate vanishes.
    pub thm2_forcing: f64,
    pub inputs: BoundInputs,
}

impl TheoremCurves {
    pub fn new(k: &ProblemConstants, c1: f64, c2: f64, c3: f64, inputs: BoundInputs, convention: BetaConvention) -> Self {
        let beta_eff = match convention {
            BetaConvention::Proof => inputs.beta / k.c,
            BetaConvention::Statement => inputs.beta,
        };
        let network_rate = inputs.delta * beta_eff * k.lambda2_hat;
        let mu_kappa = k.mu * k.kappa;
        let eta_mu_prime = k.eta * k.mu_prime;
        let gap = eta_mu_prime - mu_kappa;
        let c1_term = if c1 * gap == 0.0 {
            0.0
        } else if network_rate > 0.0 {
            gap / network_rate * c1
        } else {
            f64::INFINITY
        };
        TheoremCurves {
            c1,
            c2,
            c3,
            thm1_half_rate: mu_kappa + network_rate,
            network_rate,
            mu_kappa,
            eta_mu_prime,
            thm2_forcing: c1_term + c2,
            inputs,
        }
    }

    pub fn thm1(&self, s: f64) -> f64 {
        relax(self.inputs.vbar0, 2.0 * self.thm1_half_rate, self.c1, s)
    }

    pub fn thm2(&self, s: f64) -> f64 {
        relax(self.inputs.u0, 2.0 * self.mu_kappa, self.thm2_forcing, s)
    }

    pub fn thm3_lower(&self, s: f64) -> f64 {
        relax(self.inputs.f0, 2.0 * self.eta_mu_prime, self.c3, s)
    }

    pub fn thm3_upper(&self, s: f64) -> f64 {
        relax(self.inputs.f0, 2.0 * self.mu_kappa, self.c3, s)
    }

    fn limit(rate: f64, forcing: f64) -> f64 {
        if forcing == 0.0 {
            0.0
        } else if rate > 0.0 {
            forcing / rate
        } else {
            f64::INFINITY
        }
    }

    pub fn thm1_inf(&self) -> f64 {
        Self::limit(2.0 * self.thm1_half_rate, self.c1)
    }

    pub fn thm2_inf(&self) -> f64 {
        Self::limit(2.0 * self.mu_kappa, self.thm2_forcing)
    }

    pub fn thm3_inf_lower(&self) -> f64 {
        Self::limit(2.0 * self.eta_mu_prime, self.c3)
    }

    pub fn thm3_inf_upper(&self) -> f64 {
        Self::limit(2.0 * self.mu_kappa, self.c3)
    }
}

/// Convenience: constants, C1–C3 and curves in one call, with the problem's own weights.
pub fn theorem_curves(
    problem: &Problem,
    topology: &Topology,
    gamma: f64,
    inputs: BoundInputs,
    opts: BoundOptions,
) -> Result<(ProblemConstants, TheoremCurves, Vec<f64>)> {
    let k = ProblemConstants::compute(problem, topology, gamma, opts)?;
    let (c1, per_node) = constant_c1(&k, &k.alpha);
    let c2 = constant_c2(&k, &k.alpha);
    let c3 = constant_c3(&k);
    let curves = TheoremCurves::new(&k, c1, c2, c3, inputs, opts.beta);
    Ok((k, curves, per_node))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaMode {
    /// All `α̂_i = 1`.
    Uniform,
    /// `α̂_i = 1/σ_i²` with no common noise.
    InverseVariance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    SgnWinsForLargeDelta,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlComparison {
    pub decision: Decision,
    pub mode: AlphaMode,
    /// `√(μ′η/(μκ))`.
    #[serde(with = "json_f64")]
    pub n_threshold: f64,
    #[serde(with = "json_f64")]
    pub delta_bar: f64,
    /// `C2/(μκ)` and `C3/(μ′η)`.
    #[serde(with = "json_f64")]
    pub sgn_constant: f64,
    #[serde(with = "json_f64")]
    pub fl_constant: f64,
    /// Whether `C2/(μκ) < C3/(μ′η)` holds for the actual constants.
    pub constants_ordered: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_bar: Option<f64>,
    /// `σ̄² / min σ_k²`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heterogeneity: Option<f64>,
    /// `√(μκ/(μ′η))`, the threshold as it appears in the derivation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reversed_threshold: Option<f64>,
}

/// Decides whether a large enough penalty makes SGN's consistency bound beat
/// the federated lower bound.
pub fn fl_comparison(
    problem: &Problem,
    k: &ProblemConstants,
    c2: f64,
    c3: f64,
    beta: f64,
    mode: AlphaMode,
) -> Result<FlComparison> {
    let n = problem.len() as f64;
    let ratio = k.condition_ratio();
    let n_threshold = ratio.sqrt();
    let sgn_constant = c2 / (k.mu * k.kappa);
    let fl_constant = c3 / (k.mu_prime * k.eta);
    let gap = fl_constant - sgn_constant;
    let delta_bar = if beta > 0.0 && k.lambda2 > 0.0 && gap > 0.0 {
        (ratio - 1.0) / (beta * k.lambda2 * gap)
    } else {
        f64::INFINITY
    };
    let network_ok = k.lambda2 > 1e-12 && beta > 0.0 && gap > 0.0 && ratio.is_finite();
    let mut out = FlComparison {
        decision: Decision::Inconclusive,
        mode,
        n_threshold,
        delta_bar,
        sgn_constant,
        fl_constant,
        constants_ordered: gap > 0.0,
        sigma_bar: None,
        heterogeneity: None,
        reversed_threshold: None,
    };
    match mode {
        AlphaMode::Uniform => {
            if network_ok && n > n_threshold {
                out.decision = Decision::SgnWinsForLargeDelta;
            }
        }
        AlphaMode::InverseVariance => {
            if problem.has_common_noise() {
                return Err(Error::contract(
                    "inverse-variance comparison requires every Λ_i = 0",
                ));
            }
            let mut num = 0.0;
            let mut den = 0.0;
            for s in problem.nodes() {
                let w = s.mu * s.x.norm_squared();
                num += w / s.sigma2.powi(2);
                den += w;
            }
            let sigma_bar = (den / num).powf(0.25);
            let min_s2 = problem.nodes().iter().map(|s| s.sigma2).fold(f64::INFINITY, f64::min);
            let het = sigma_bar * sigma_bar / min_s2;
            out.sigma_bar = Some(sigma_bar);
            out.heterogeneity = Some(het);
            out.reversed_threshold = Some(1.0 / n_threshold);
            if network_ok && het > n_threshold {
                out.decision = Decision::SgnWinsForLargeDelta;
            }
        }
    }
    Ok(out)
}

/// `S₂ μ′ γ m ω₂ / (κ μ ε²)` with `ε = min σ_i²` and `ω₂` the largest `Λ` entry.
pub fn lemma2_bound(problem: &Problem, k: &ProblemConstants, gamma: f64) -> f64 {
    let s2 = lemma2_s2(problem);
    let eps = problem.nodes().iter().map(|s| s.sigma2).fold(f64::INFINITY, f64::min);
    let omega2 = problem
        .nodes()
        .iter()
        .flat_map(|s| s.lambda_diag.iter().copied())
        .fold(0.0f64, |a, v| a.max(v.abs()));
    if omega2 == 0.0 {
        return 0.0;
    }
    s2 * k.mu_prime * gamma * problem.m() as f64 * omega2 / (k.kappa * k.mu * eps * eps)
}

/// Largest inner product between two rows of the same `X_i`.
pub fn lemma2_s2(problem: &Problem) -> f64 {
    let mut best = f64::NEG_INFINITY;
    for s in problem.nodes() {
        for a in 0..s.x.nrows() {
            for b in 0..s.x.nrows() {
                best = best.max(s.x.row(a).dot(&s.x.row(b)));
            }
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub t: f64,
    pub s: f64,
    #[serde(with = "json_f64")]
    pub thm1: f64,
    #[serde(with = "json_f64")]
    pub thm2: f64,
    #[serde(with = "json_f64")]
    pub thm3_lower: f64,
    #[serde(with = "json_f64")]
    pub thm3_upper: f64,
}

/// Everything written to `bounds.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub options: BoundOptions,
    pub constants: ProblemConstants,
    pub inputs: BoundInputs,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c1_per_node: Vec<f64>,
    #[serde(with = "json_f64")]
    pub thm2_c1_term: f64,
    #[serde(with = "json_f64")]
    pub thm1_inf: f64,
    #[serde(with = "json_f64")]
    pub thm2_inf: f64,
    #[serde(with = "json_f64")]
    pub thm3_inf_lower: f64,
    #[serde(with = "json_f64")]
    pub thm3_inf_upper: f64,
    pub lemma2_s2: f64,
    #[serde(with = "json_f64")]
    pub lemma2_bound: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cor1: Option<FlComparison>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cor2: Option<FlComparison>,
    pub curves: Vec<CurvePoint>,
}

/// Builds the full report for real snapshot times `times`.
pub fn bound_report(
    problem: &Problem,
    topology: &Topology,
    gamma: f64,
    inputs: BoundInputs,
    opts: BoundOptions,
    times: &[f64],
) -> Result<BoundReport> {
    let (k, curves, per_node) = theorem_curves(problem, topology, gamma, inputs, opts)?;
    let uniform = problem.nodes().iter().all(|s| s.alpha_hat == problem.node(0).alpha_hat);
    let inv_var = !problem.has_common_noise()
        && problem
            .nodes()
            .iter()
            .all(|s| (s.alpha_hat * s.sigma2 - 1.0).abs() < 1e-9);
    let cor1 = if uniform {
        Some(fl_comparison(problem, &k, curves.c2, curves.c3, inputs.beta, AlphaMode::Uniform)?)
    } else {
        None
    };
    let cor2 = if inv_var {
        Some(fl_comparison(problem, &k, curves.c2, curves.c3, inputs.beta, AlphaMode::InverseVariance)?)
    } else {
        None
    };
    let points = times
        .iter()
        .map(|&t| {
            let s = gamma * t;
            CurvePoint {
                t,
                s,
                thm1: curves.thm1(s),
                thm2: curves.thm2(s),
                thm3_lower: curves.thm3_lower(s),
                thm3_upper: curves.thm3_upper(s),
            }
        })
        .collect();
    Ok(BoundReport {
        options: opts,
        inputs,
        c1: curves.c1,
        c2: curves.c2,
        c3: curves.c3,
        c1_per_node: per_node,
        thm2_c1_term: curves.thm2_forcing - curves.c2,
        thm1_inf: curves.thm1_inf(),
        thm2_inf: curves.thm2_inf(),
        thm3_inf_lower: curves.thm3_inf_lower(),
        thm3_inf_upper: curves.thm3_inf_upper(),
        lemma2_s2: lemma2_s2(problem),
        lemma2_bound: lemma2_bound(problem, &k, gamma),
        cor1,
        cor2,
        curves: points,
        constants: k,
    })
}

/// Upper tolerance of the Monte Carlo check: means may exceed a bound by 10%.
pub const CHECK_UPPER_TOL: f64 = 1.1;
/// Lower tolerance for the federated sandwich.
pub const CHECK_LOWER_TOL: f64 = 0.9;

/// Initial regularity, consistency and federated error of a start `w0`.
pub fn initial_inputs(problem: &Problem, w0: &[DVector<f64>], delta: f64, beta: f64) -> BoundInputs {
    let alpha = problem.weights().alpha;
    let w_star = &problem.w_star().0;
    let avg = metrics::ensemble_average(w0, &alpha);
    let u0 = metrics::fl_error(&avg, w_star);
    BoundInputs {
        vbar0: metrics::regularity(w0, &alpha),
        u0,
        f0: u0,
        delta,
        beta,
    }
}

/// Monte Carlo means next to the bounds at one snapshot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CheckPoint {
    pub t: f64,
    pub vbar_mean: f64,
    pub thm1: f64,
    pub u_mean: f64,
    pub thm2: f64,
    pub f_mean: f64,
    pub thm3_lower: f64,
    pub thm3_upper: f64,
    /// The lower sandwich side is enforced from here on.
    pub past_transient: bool,
    pub vbar_ok: bool,
    pub u_ok: bool,
    pub f_ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub trials: u64,
    pub transient_time: f64,
    pub points: Vec<CheckPoint>,
    pub passed: bool,
}

impl BoundCheck {
    pub fn failures(&self) -> Vec<String> {
        let mut out = Vec::new();
        for p in &self.points {
            if !p.vbar_ok {
                out.push(format!("t={}: mean Vbar {:.4e} > 1.1 x {:.4e}", p.t, p.vbar_mean, p.thm1));
            }
            if !p.u_ok {
                out.push(format!("t={}: mean U {:.4e} > 1.1 x {:.4e}", p.t, p.u_mean, p.thm2));
            }
            if !p.f_ok {
                out.push(format!(
                    "t={}: mean F {:.4e} outside [0.9 x {:.4e}, 1.1 x {:.4e}]",
                    p.t, p.f_mean, p.thm3_lower, p.thm3_upper
                ));
            }
        }
        out
    }
}

/// Time after which `e^{−2μκγt}` has fallen below 5%: `ln 20 / (2μκγ)`.
/// Both federated curves have settled by then, and so has the slowest mode
/// of the diffusion whenever `κ` is at least the smallest Hessian eigenvalue.
pub fn transient_time(k: &ProblemConstants) -> f64 {
    let rate = 2.0 * k.mu * k.kappa * k.gamma;
    if rate > 0.0 {
        20f64.ln() / rate
    } else {
        f64::INFINITY
    }
}

/// Runs the SGN and federated diffusions from `w0` and compares trial means
/// with the theorem curves at every snapshot of `config`.
#[allow(clippy::too_many_arguments)]
pub fn monte_carlo_check(
    problem: &Problem,
    topology: &Topology,
    config: &EngineConfig,
    opts: BoundOptions,
    w0: Vec<DVector<f64>>,
    trials: u64,
    seed: u64,
    workers: usize,
) -> Result<BoundCheck> {
    if trials == 0 {
        return Err(Error::config("bound check needs at least one trial"));
    }
    let inputs = initial_inputs(problem, &w0, config.delta, config.beta);
    let (k, curves, _) = theorem_curves(problem, topology, config.gamma, inputs, opts)?;
    let setup = TrialSetup::from_problem(problem, topology).with_w0(w0);
    let run = |kind: EngineKind| {
        let series = runner::map_trials(trials, workers, |l| {
            run_trial(kind, problem, &setup, config, rng::trial_seed(seed, l), l)
        })?;
        metrics::summarize(&series)
    };
    let sgn = run(EngineKind::SgnSde)?;
    let fl = run(EngineKind::FlSde)?;
    let mean = |s: &metrics::SeriesSummary, m: Metric, j: usize| s.metric(m).map_or(f64::NAN, |v| v[j].mean);
    let transient = transient_time(&k);
    let points: Vec<CheckPoint> = config
        .snapshot_times
        .iter()
        .enumerate()
        .map(|(j, &t)| {
            let s = config.gamma * t;
            let (vbar_mean, u_mean, f_mean) = (mean(&sgn, Metric::Vbar, j), mean(&sgn, Metric::U, j), mean(&fl, Metric::F, j));
            let (thm1, thm2, lo, hi) = (curves.thm1(s), curves.thm2(s), curves.thm3_lower(s), curves.thm3_upper(s));
            let past_transient = t >= transient;
            CheckPoint {
                t,
                vbar_mean,
                thm1,
                u_mean,
                thm2,
                f_mean,
                thm3_lower: lo,
                thm3_upper: hi,
                past_transient,
                vbar_ok: vbar_mean <= CHECK_UPPER_TOL * thm1,
                u_ok: u_mean <= CHECK_UPPER_TOL * thm2,
                f_ok: f_mean <= CHECK_UPPER_TOL * hi && (!past_transient || f_mean >= CHECK_LOWER_TOL * lo),
            }
        })
        .collect();
    let passed = points.iter().all(|p| p.vbar_ok && p.u_ok && p.f_ok);
    Ok(BoundCheck {
        trials,
        transient_time: transient,
        points,
        passed,
    })
}
