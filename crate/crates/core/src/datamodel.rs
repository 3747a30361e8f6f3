//! Ground truth, per-node data specifications and noise.
//!
//! Node `i` observes `y_{i,k} = X_i w* + ε_{i,k} + Λ_i ξ_k` where `ε_{i,k}` has
//! componentwise variance `σ_i²`, `ξ_k` is shared by every node at index `k`, and
//! `Λ_i` is diagonal. The error covariance `Ω_i = σ_i² I + Λ_i²` is therefore
//! diagonal as well and is stored as its diagonal.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SimRng;

/// Model coefficients `w*`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth(pub DVector<f64>);

impl GroundTruth {
    pub fn new(w: DVector<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::config("ground truth must have at least one coefficient"));
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("ground truth has non-finite entries"));
        }
        Ok(GroundTruth(w))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }
}

/// Distribution of the standardized noise draws (zero mean, unit variance).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseModel {
    #[default]
    Gaussian,
    /// Uniform on `[-√3, √3]`.
    Uniform,
}

impl NoiseModel {
    pub fn draw(self, rng: &mut SimRng) -> f64 {
        match self {
            NoiseModel::Gaussian => StandardNormal.sample(rng),
            NoiseModel::Uniform => {
                let half = 3f64.sqrt();
                rng.random_range(-half..half)
            }
        }
    }

    pub fn draw_vector(self, len: usize, rng: &mut SimRng) -> DVector<f64> {
        DVector::from_fn(len, |_, _| self.draw(rng))
    }
}

/// Per-node problem data.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeDataSpec {
    pub node_id: usize,
    /// Design matrix, `m × p`.
    pub x: DMatrix<f64>,
    /// Individual noise variance `σ_i²`.
    pub sigma2: f64,
    /// Diagonal of the common-noise loading `Λ_i`.
    pub lambda_diag: DVector<f64>,
    /// Gradient events per unit time.
    pub mu: f64,
    /// Raw ensemble weight `α̂_i`.
    pub alpha_hat: f64,
}

impl NodeDataSpec {
    pub fn rows(&self) -> usize {
        self.x.nrows()
    }

    pub fn cols(&self) -> usize {
        self.x.ncols()
    }
}

/// Diagonal error covariance `Ω_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeCovariance {
    diag: DVector<f64>,
}

impl NodeCovariance {
    pub fn diagonal(&self) -> &DVector<f64> {
        &self.diag
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.diag)
    }

    pub fn inverse_diagonal(&self) -> DVector<f64> {
        self.diag.map(|v| 1.0 / v)
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.inverse_diagonal())
    }

    pub fn trace(&self) -> f64 {
        self.diag.sum()
    }
}

/// `Ω_i = σ_i² I + Λ_i²`.
pub fn node_covariance(spec: &NodeDataSpec) -> Result<NodeCovariance> {
    if spec.sigma2 < 0.0 || !spec.sigma2.is_finite() {
        return Err(Error::config(format!(
            "node {}: sigma2 must be finite and nonnegative",
            spec.node_id
        )));
    }
    if spec.lambda_diag.len() != spec.rows() {
        return Err(Error::config(format!(
            "node {}: lambda_diag has length {}, expected m = {}",
            spec.node_id,
            spec.lambda_diag.len(),
            spec.rows()
        )));
    }
    let diag = spec.lambda_diag.map(|l| spec.sigma2 + l * l);
    if let Some(q) = diag.iter().position(|&v| v <= 0.0) {
        return Err(Error::config(format!(
            "node {}: Ω is singular (sigma2 = 0 and Λ[{q},{q}] = 0)",
            spec.node_id
        )));
    }
    Ok(NodeCovariance { diag })
}

/// Joint covariance `Ω = Σ + ΛΛᵀ` of the stacked noise, `Nm × Nm`.
pub fn global_covariance(specs: &[NodeDataSpec]) -> Result<DMatrix<f64>> {
    let Some(first) = specs.first() else {
        return Err(Error::config("global covariance needs at least one node"));
    };
    let m = first.rows();
    if let Some(bad) = specs.iter().find(|s| s.rows() != m || s.lambda_diag.len() != m) {
        return Err(Error::config(format!(
            "node {}: dimension mismatch (expected m = {m})",
            bad.node_id
        )));
    }
    let n = specs.len();
    let mut omega = DMatrix::zeros(n * m, n * m);
    for (i, si) in specs.iter().enumerate() {
        for (j, sj) in specs.iter().enumerate() {
            for q in 0..m {
                let mut v = si.lambda_diag[q] * sj.lambda_diag[q];
                if i == j {
                    v += si.sigma2;
                }
                omega[(i * m + q, j * m + q)] = v;
            }
        }
    }
    Ok(omega)
}

/// One observation `y_{i,k}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub node_id: usize,
    pub k: u64,
    pub y: DVector<f64>,
}

/// `y = X_i w* + ε + Λ_i ξ_k`, with `ε` drawn from `rng`.
pub fn draw_sample(
    spec: &NodeDataSpec,
    w_star: &GroundTruth,
    k: u64,
    xi_k: &DVector<f64>,
    noise: NoiseModel,
    rng: &mut SimRng,
) -> Sample {
    let sigma = spec.sigma2.sqrt();
    let mut y = &spec.x * &w_star.0;
    for q in 0..y.len() {
        let eps = if sigma > 0.0 { sigma * noise.draw(rng) } else { 0.0 };
        y[q] += eps + spec.lambda_diag[q] * xi_k[q];
    }
    Sample {
        node_id: spec.node_id,
        k,
        y,
    }
}

/// Raw and normalized ensemble weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub alpha_hat: Vec<f64>,
    pub alpha: Vec<f64>,
    /// `c = Σ α̂_i`.
    pub c: f64,
}

impl Weights {
    pub fn from_raw(alpha_hat: Vec<f64>) -> Result<Self> {
        if alpha_hat.is_empty() {
            return Err(Error::config("weights need at least one node"));
        }
        if let Some(i) = alpha_hat.iter().position(|a| !(*a > 0.0 && a.is_finite())) {
            return Err(Error::config(format!(
                "node {i}: raw weight must be positive, got {}",
                alpha_hat[i]
            )));
        }
        let c: f64 = alpha_hat.iter().sum();
        let alpha = alpha_hat.iter().map(|a| a / c).collect();
        Ok(Weights { alpha_hat, alpha, c })
    }

    pub fn uniform(n: usize) -> Self {
        Weights {
            alpha_hat: vec![1.0; n],
            alpha: vec![1.0 / n as f64; n],
            c: n as f64,
        }
    }
}

/// `α̂_i = 1 / trc(Ω_i)`, normalized by `c = Σ α̂_i`.
pub fn weights_from_trace(specs: &[NodeDataSpec]) -> Result<Weights> {
    let raw = specs
        .iter()
        .map(|s| {
            let tr = node_covariance(s)?.trace();
            if tr <= 0.0 {
                Err(Error::config(format!("node {}: zero covariance trace", s.node_id)))
            } else {
                Ok(1.0 / tr)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Weights::from_raw(raw)
}

/// Operators of node `i` that the engines and bounds reuse.
#[derive(Debug, Clone)]
pub struct NodeOperators {
    pub omega: NodeCovariance,
    /// `X_iᵀ Ω_i⁻¹`, `p × m`.
    pub xt_omega_inv: DMatrix<f64>,
    /// `X_iᵀ Ω_i⁻¹ X_i`, `p × p`.
    pub hessian: DMatrix<f64>,
    /// `X_iᵀ Ω_i⁻¹ Λ_i`, `p × m`.
    pub xt_omega_inv_lambda: DMatrix<f64>,
}

impl NodeOperators {
    fn new(spec: &NodeDataSpec) -> Result<Self> {
        let omega = node_covariance(spec)?;
        let inv = omega.inverse_diagonal();
        let mut xt_omega_inv = spec.x.transpose();
        for (q, mut col) in xt_omega_inv.column_iter_mut().enumerate() {
            col *= inv[q];
        }
        let hessian = &xt_omega_inv * &spec.x;
        let mut xt_omega_inv_lambda = xt_omega_inv.clone();
        for (q, mut col) in xt_omega_inv_lambda.column_iter_mut().enumerate() {
            col *= spec.lambda_diag[q];
        }
        Ok(NodeOperators {
            omega,
            xt_omega_inv,
            hessian,
            xt_omega_inv_lambda,
        })
    }
}

/// A validated estimation problem: the nodes, `w*` and the noise law.
#[derive(Debug, Clone)]
pub struct Problem {
    nodes: Vec<NodeDataSpec>,
    w_star: GroundTruth,
    noise: NoiseModel,
    ops: Vec<NodeOperators>,
}

impl Problem {
    pub fn new(nodes: Vec<NodeDataSpec>, w_star: GroundTruth, noise: NoiseModel) -> Result<Self> {
        let Some(first) = nodes.first() else {
            return Err(Error::config("problem needs at least one node"));
        };
        let (m, p) = (first.rows(), first.cols());
        if p != w_star.dim() {
            return Err(Error::config(format!(
                "w_star has length {}, design matrices have {p} columns",
                w_star.dim()
            )));
        }
        for (i, spec) in nodes.iter().enumerate() {
            if spec.node_id != i {
                return Err(Error::config(format!("node at position {i} has id {}", spec.node_id)));
            }
            if spec.rows() != m || spec.cols() != p {
                return Err(Error::config(format!(
                    "node {i}: X is {}x{}, expected {m}x{p}",
                    spec.rows(),
                    spec.cols()
                )));
            }
            if !(spec.mu > 0.0 && spec.mu.is_finite()) {
                return Err(Error::config(format!("node {i}: rate mu must be positive")));
            }
            if !(spec.alpha_hat > 0.0 && spec.alpha_hat.is_finite()) {
                return Err(Error::config(format!("node {i}: alpha_hat must be positive")));
            }
            if spec.x.iter().any(|v| !v.is_finite()) {
                return Err(Error::config(format!("node {i}: X has non-finite entries")));
            }
        }
        let ops = nodes.iter().map(NodeOperators::new).collect::<Result<Vec<_>>>()?;
        Ok(Problem {
            nodes,
            w_star,
            noise,
            ops,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Rows per node.
    pub fn m(&self) -> usize {
        self.nodes[0].rows()
    }

    /// Coefficients.
    pub fn p(&self) -> usize {
        self.w_star.dim()
    }

    pub fn nodes(&self) -> &[NodeDataSpec] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> &NodeDataSpec {
        &self.nodes[i]
    }

    pub fn ops(&self, i: usize) -> &NodeOperators {
        &self.ops[i]
    }

    pub fn w_star(&self) -> &GroundTruth {
        &self.w_star
    }

    pub fn noise(&self) -> NoiseModel {
        self.noise
    }

    pub fn rates(&self) -> Vec<f64> {
        self.nodes.iter().map(|n| n.mu).collect()
    }

    pub fn weights(&self) -> Weights {
        Weights::from_raw(self.nodes.iter().map(|n| n.alpha_hat).collect())
            .expect("alpha_hat validated at construction")
    }

    /// True when every `Λ_i` vanishes.
    pub fn has_common_noise(&self) -> bool {
        self.nodes.iter().any(|n| n.lambda_diag.iter().any(|&l| l != 0.0))
    }

    /// Copy with every `α̂_i` replaced.
    pub fn with_alpha_hat(&self, alpha_hat: &[f64]) -> Result<Self> {
        let mut nodes = self.nodes.clone();
        for (n, &a) in nodes.iter_mut().zip(alpha_hat) {
            n.alpha_hat = a;
        }
        Problem::new(nodes, self.w_star.clone(), self.noise)
    }

    /// Stacked design `[X_1; …; X_N]`.
    pub fn stacked_design(&self) -> DMatrix<f64> {
        let (m, p) = (self.m(), self.p());
        let mut x = DMatrix::zeros(self.len() * m, p);
        for (i, n) in self.nodes.iter().enumerate() {
            x.view_mut((i * m, 0), (m, p)).copy_from(&n.x);
        }
        x
    }
}

/// Trial-wide tape of common-noise draws `ξ_k`.
///
/// Every node that consumes sample index `k` sees the same `ξ_k`, whatever the
/// order in which nodes reach `k`. Entries no node can ask for again are dropped.
#[derive(Debug)]
pub struct CommonNoiseTape {
    m: usize,
    noise: NoiseModel,
    rng: SimRng,
    offset: u64,
    buf: VecDeque<DVector<f64>>,
}

impl CommonNoiseTape {
    pub fn new(m: usize, noise: NoiseModel, rng: SimRng) -> Self {
        CommonNoiseTape {
            m,
            noise,
            rng,
            offset: 0,
            buf: VecDeque::new(),
        }
    }

    /// `ξ_k`. Panics if `k` was already released.
    pub fn get(&mut self, k: u64) -> &DVector<f64> {
        assert!(k >= self.offset, "common noise index {k} already released");
        while self.offset + (self.buf.len() as u64) <= k {
            let xi = self.noise.draw_vector(self.m, &mut self.rng);
            self.buf.push_back(xi);
        }
        &self.buf[(k - self.offset) as usize]
    }

    /// Forget every index below `k`.
    pub fn release_below(&mut self, k: u64) {
        while self.offset < k && !self.buf.is_empty() {
            self.buf.pop_front();
            self.offset += 1;
        }
    }
}

/// JSON problem file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProblemFile {
    pub p: usize,
    pub m: usize,
    pub nodes: Vec<NodeFileEntry>,
    pub w_star: Vec<f64>,
    #[serde(default)]
    pub noise: NoiseFileEntry,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeFileEntry {
    /// Row-major `m × p`.
    #[serde(rename = "X")]
    pub x: Vec<f64>,
    pub sigma2: f64,
    pub lambda_diag: Vec<f64>,
    pub mu: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_hat: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct NoiseFileEntry {
    #[serde(default)]
    pub kind: NoiseModel,
}

impl ProblemFile {
    /// Builds the problem; nodes without `alpha_hat` get `1 / trc(Ω_i)`.
    pub fn into_problem(self) -> Result<Problem> {
        let mut nodes = Vec::with_capacity(self.nodes.len());
        for (i, e) in self.nodes.into_iter().enumerate() {
            if e.x.len() != self.m * self.p {
                return Err(Error::config(format!(
                    "node {i}: X has {} entries, expected m*p = {}",
                    e.x.len(),
                    self.m * self.p
                )));
            }
            let mut spec = NodeDataSpec {
                node_id: i,
                x: DMatrix::from_row_slice(self.m, self.p, &e.x),
                sigma2: e.sigma2,
                lambda_diag: DVector::from_vec(e.lambda_diag),
                mu: e.mu,
                alpha_hat: 1.0,
            };
            spec.alpha_hat = match e.alpha_hat {
                Some(a) => a,
                None => 1.0 / node_covariance(&spec)?.trace(),
            };
            nodes.push(spec);
        }
        Problem::new(
            nodes,
            GroundTruth::new(DVector::from_vec(self.w_star))?,
            self.noise.kind,
        )
    }

    pub fn from_problem(problem: &Problem) -> Self {
        ProblemFile {
            p: problem.p(),
            m: problem.m(),
            nodes: problem
                .nodes()
                .iter()
                .map(|n| NodeFileEntry {
                    x: n.x.transpose().iter().copied().collect(),
                    sigma2: n.sigma2,
                    lambda_diag: n.lambda_diag.iter().copied().collect(),
                    mu: n.mu,
                    alpha_hat: Some(n.alpha_hat),
                })
                .collect(),
            w_star: problem.w_star().0.iter().copied().collect(),
            noise: NoiseFileEntry {
                kind: problem.noise(),
            },
        }
    }
}
