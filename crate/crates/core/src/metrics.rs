//! Regularity, consistency and error measures over node models.

use std::collections::{BTreeMap, VecDeque};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `ŵ = Σ α_i w_i`.
pub fn ensemble_average(w: &[DVector<f64>], alpha: &[f64]) -> DVector<f64> {
    let mut avg = DVector::zeros(w[0].len());
    for (wi, &a) in w.iter().zip(alpha) {
        avg.axpy(a, wi, 1.0);
    }
    avg
}

/// `V̄ = Σ α_i ‖w_i − ŵ‖² / 2`.
pub fn regularity(w: &[DVector<f64>], alpha: &[f64]) -> f64 {
    let avg = ensemble_average(w, alpha);
    regularity_about(w, alpha, &avg)
}

fn regularity_about(w: &[DVector<f64>], alpha: &[f64], avg: &DVector<f64>) -> f64 {
    0.5 * w
        .iter()
        .zip(alpha)
        .map(|(wi, a)| a * (wi - avg).norm_squared())
        .sum::<f64>()
}

/// `U = ‖ŵ − w*‖² / 2`.
pub fn consistency(w: &[DVector<f64>], alpha: &[f64], w_star: &DVector<f64>) -> f64 {
    0.5 * (ensemble_average(w, alpha) - w_star).norm_squared()
}

/// Both sides of `½ Σ α_i ‖w_i − w*‖² = V̄ + U`.
pub fn lemma1_identity(w: &[DVector<f64>], alpha: &[f64], w_star: &DVector<f64>) -> (f64, f64) {
    let lhs = 0.5
        * w.iter()
            .zip(alpha)
            .map(|(wi, a)| a * (wi - w_star).norm_squared())
            .sum::<f64>();
    (lhs, regularity(w, alpha) + consistency(w, alpha, w_star))
}

/// `F = ‖w − w*‖² / 2` for the shared federated model.
pub fn fl_error(w: &DVector<f64>, w_star: &DVector<f64>) -> f64 {
    0.5 * (w - w_star).norm_squared()
}

/// How `φ` is measured.
#[derive(Debug, Clone, Default)]
pub enum PhiMode {
    /// `‖ŵ − w*‖`.
    #[default]
    Parameter,
    /// `‖y − X ŵ‖` against a pooled table.
    Residual { x: DMatrix<f64>, y: DVector<f64> },
}

pub fn estimation_error(w_hat: &DVector<f64>, w_star: &DVector<f64>, mode: &PhiMode) -> f64 {
    match mode {
        PhiMode::Parameter => (w_hat - w_star).norm(),
        PhiMode::Residual { x, y } => (y - x * w_hat).norm(),
    }
}

/// `φ̄ / φ̄_ref`.
pub fn scaled_error(phi_bar: f64, reference: Option<f64>) -> Result<f64> {
    match reference {
        Some(r) if r > 0.0 && r.is_finite() => Ok(phi_bar / r),
        Some(r) => Err(Error::config(format!("reference error must be positive, got {r}"))),
        None => Err(Error::config("scaled error requested without a reference run")),
    }
}

/// `φ·prev + (1 − φ)·fresh`.
pub fn fading_trace(prev: f64, fresh: f64, phi: f64) -> Result<f64> {
    if !(phi > 0.0 && phi <= 1.0) {
        return Err(Error::config(format!("fading factor {phi} outside (0, 1]")));
    }
    Ok(phi * prev + (1.0 - phi) * fresh)
}

/// Online covariance-trace estimate from residual mini-batches.
///
/// The fresh estimate is the sum of per-coordinate sample variances over the
/// last `window` residual vectors; it is blended into the running trace with
/// [`fading_trace`].
#[derive(Debug, Clone)]
pub struct TraceEstimator {
    window: usize,
    phi: f64,
    recent: VecDeque<DVector<f64>>,
    trace: Option<f64>,
}

impl TraceEstimator {
    pub fn new(window: usize, phi: f64) -> Result<Self> {
        if window < 2 {
            return Err(Error::config("trace window needs at least two mini-batches"));
        }
        fading_trace(0.0, 0.0, phi)?;
        Ok(TraceEstimator {
            window,
            phi,
            recent: VecDeque::with_capacity(window),
            trace: None,
        })
    }

    pub fn push(&mut self, residual: DVector<f64>) {
        if self.recent.len() == self.window {
            self.recent.pop_front();
        }
        self.recent.push_back(residual);
        if self.recent.len() < 2 {
            return;
        }
        let k = self.recent.len() as f64;
        let mean = self.recent.iter().fold(DVector::zeros(self.recent[0].len()), |acc, r| acc + r) / k;
        let fresh = self
            .recent
            .iter()
            .map(|r| (r - &mean).norm_squared())
            .sum::<f64>()
            / (k - 1.0);
        self.trace = Some(match self.trace {
            None => fresh,
            Some(prev) => self.phi * prev + (1.0 - self.phi) * fresh,
        });
    }

    pub fn trace(&self) -> Option<f64> {
        self.trace
    }
}

/// Measures at one snapshot. SGN runs fill `vbar`, `u` and `lemma_lhs`; FL runs fill `f`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub time: f64,
    pub vbar: Option<f64>,
    pub u: Option<f64>,
    pub f: Option<f64>,
    pub phi: f64,
    #[serde(skip)]
    pub lemma_lhs: Option<f64>,
}

impl Snapshot {
    pub fn value(&self, metric: Metric) -> Option<f64> {
        match metric {
            Metric::Vbar => self.vbar,
            Metric::U => self.u,
            Metric::F => self.f,
            Metric::Phi => Some(self.phi),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Metric {
    Vbar,
    U,
    F,
    #[serde(rename = "phi")]
    Phi,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Vbar, Metric::U, Metric::F, Metric::Phi];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Vbar => "Vbar",
            Metric::U => "U",
            Metric::F => "F",
            Metric::Phi => "phi",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSeries {
    pub trial_id: u64,
    pub snapshots: Vec<Snapshot>,
    /// Ensemble (or federated) model at the last snapshot.
    #[serde(skip)]
    pub final_model: Option<DVector<f64>>,
}

impl MetricsSeries {
    pub fn new(trial_id: u64) -> Self {
        MetricsSeries {
            trial_id,
            snapshots: Vec::new(),
            final_model: None,
        }
    }

    pub fn push(&mut self, s: Snapshot) {
        debug_assert!(self.snapshots.last().is_none_or(|l| l.time < s.time));
        self.snapshots.push(s);
    }

    pub fn last(&self) -> Option<&Snapshot> {
        self.snapshots.last()
    }

    pub fn values(&self, metric: Metric) -> Vec<Option<f64>> {
        self.snapshots.iter().map(|s| s.value(metric)).collect()
    }
}

/// Mean and 95% normal-approximation half-width of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanCi {
    pub mean: f64,
    pub half_width: f64,
    pub n: usize,
}

pub fn mean_ci(xs: &[f64]) -> MeanCi {
    let n = xs.len();
    if n == 0 {
        return MeanCi {
            mean: f64::NAN,
            half_width: f64::NAN,
            n,
        };
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let half_width = if n < 2 {
        0.0
    } else {
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        1.959_963_984_540_054 * (var / n as f64).sqrt()
    };
    MeanCi {
        mean,
        half_width,
        n,
    }
}

/// Per-time statistics across trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesSummary {
    pub times: Vec<f64>,
    pub metrics: BTreeMap<String, Vec<MeanCi>>,
}

impl SeriesSummary {
    pub fn metric(&self, m: Metric) -> Option<&[MeanCi]> {
        self.metrics.get(m.name()).map(Vec::as_slice)
    }

    pub fn final_mean(&self, m: Metric) -> Option<f64> {
        self.metric(m).and_then(|v| v.last()).map(|c| c.mean)
    }
}

/// Folds trials that share a snapshot grid.
pub fn summarize(series: &[MetricsSeries]) -> Result<SeriesSummary> {
    let Some(first) = series.first() else {
        return Err(Error::contract("summary of zero trials"));
    };
    let times: Vec<f64> = first.snapshots.iter().map(|s| s.time).collect();
    for s in series {
        if s.snapshots.len() != times.len()
            || s.snapshots.iter().zip(&times).any(|(a, &t)| a.time != t)
        {
            return Err(Error::contract(format!(
                "trial {} has a different snapshot grid",
                s.trial_id
            )));
        }
    }
    let mut metrics = BTreeMap::new();
    for m in Metric::ALL {
        if first.snapshots.iter().all(|s| s.value(m).is_none()) {
            continue;
        }
        let stats = (0..times.len())
            .map(|k| {
                let xs: Vec<f64> = series
                    .iter()
                    .filter_map(|s| s.snapshots[k].value(m))
                    .collect();
                mean_ci(&xs)
            })
            .collect();
        metrics.insert(m.name().to_string(), stats);
    }
    Ok(SeriesSummary { times, metrics })
}
