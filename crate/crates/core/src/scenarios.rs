//! Experiment generators: a sensor network measuring a temperature field, the
//! bird flight-initiation-distance regression, and a synthetic scaling study.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{GroundTruth, NodeDataSpec, NoiseModel, Problem};
use crate::engines::DataSource;
use crate::error::{Error, Result};
use crate::gls::{self, Covariance, GlsSolution};
use crate::graph::{self, GraphKind, Topology};
use crate::metrics::TraceEstimator;
use crate::rng::{self, SimRng};

// ---------------------------------------------------------------- temperature field

fn default_sources() -> Vec<[f64; 2]> {
    vec![[2.0, 8.5], [8.5, 9.0]]
}

/// Temperature field on a square grid, observed by randomly placed sensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MrfFieldSpec {
    /// Cells per side.
    pub grid: usize,
    /// Side length in meters.
    pub field_size: f64,
    pub sources: Vec<[f64; 2]>,
    /// °F at a source.
    pub source_temp: f64,
    /// °F lost per meter away from a source.
    pub decay_rate: f64,
    /// Meters; beyond this the field sits at the ambient value.
    pub influence_radius: f64,
    pub n_sensors: usize,
    pub connect_radius: f64,
    /// Common-noise loading of the cell farthest from a sensor.
    pub lambda_max: f64,
    pub min_var: f64,
    pub max_var: f64,
    /// `μ_i = mu_per_var · σ_i²`.
    pub mu_per_var: f64,
}

impl Default for MrfFieldSpec {
    fn default() -> Self {
        MrfFieldSpec {
            grid: 10,
            field_size: 10.0,
            sources: default_sources(),
            source_temp: 255.0,
            decay_rate: 25.0,
            influence_radius: 5.0,
            n_sensors: 40,
            connect_radius: 2.5,
            lambda_max: 0.3,
            min_var: 0.01,
            max_var: 1.0,
            mu_per_var: 10.0,
        }
    }
}

impl MrfFieldSpec {
    pub fn ambient(&self) -> f64 {
        self.source_temp - self.decay_rate * self.influence_radius
    }

    pub fn cells(&self) -> usize {
        self.grid * self.grid
    }

    /// Center of cell `q`; cells are numbered row by row from the origin.
    pub fn cell_center(&self, q: usize) -> [f64; 2] {
        let h = self.field_size / self.grid as f64;
        [((q % self.grid) as f64 + 0.5) * h, ((q / self.grid) as f64 + 0.5) * h]
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid == 0 || !(self.field_size > 0.0) {
            return Err(Error::config("field needs a positive size and at least one cell"));
        }
        if self.n_sensors == 0 {
            return Err(Error::config("field needs at least one sensor"));
        }
        if !(self.min_var > 0.0 && self.max_var >= self.min_var) {
            return Err(Error::config(format!(
                "variance range [{}, {}] is invalid",
                self.min_var, self.max_var
            )));
        }
        if !(self.mu_per_var > 0.0 && self.lambda_max >= 0.0 && self.decay_rate >= 0.0) {
            return Err(Error::config("field rates and loadings must be nonnegative"));
        }
        Ok(())
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Field temperature at a point, clamped to `[0, 255]`. Overlapping sources take the maximum.
pub fn temperature_at(spec: &MrfFieldSpec, point: [f64; 2]) -> f64 {
    let ambient = spec.ambient();
    let t = spec
        .sources
        .iter()
        .map(|&s| {
            let d = dist(point, s);
            if d <= spec.influence_radius {
                spec.source_temp - spec.decay_rate * d
            } else {
                ambient
            }
        })
        .fold(ambient, f64::max);
    t.clamp(0.0, 255.0)
}

/// Temperature of every cell center.
pub fn mrf_field(spec: &MrfFieldSpec) -> DVector<f64> {
    DVector::from_fn(spec.cells(), |q, _| temperature_at(spec, spec.cell_center(q)))
}

#[derive(Debug, Clone)]
pub struct MrfScenario {
    pub problem: Problem,
    pub topology: Topology,
    pub positions: Vec<[f64; 2]>,
}

/// Places sensors, draws their noise levels and wires up the radius graph.
///
/// Sensor positions are drawn before the variances, and each variance is an
/// affine image of one uniform draw, so sweeping `max_var` under a fixed seed
/// keeps the layout and the ranking of sensors.
pub fn mrf_build(spec: &MrfFieldSpec, rng: &mut SimRng) -> Result<MrfScenario> {
    spec.validate()?;
    let n = spec.n_sensors;
    let positions: Vec<[f64; 2]> = (0..n)
        .map(|_| [rng.random_range(0.0..spec.field_size), rng.random_range(0.0..spec.field_size)])
        .collect();
    let u: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let cells = spec.cells();
    let diag = spec.field_size * std::f64::consts::SQRT_2;
    let nodes = positions
        .iter()
        .zip(&u)
        .enumerate()
        .map(|(i, (&pos, &u))| {
            let sigma2 = spec.min_var + u * (spec.max_var - spec.min_var);
            let lambda = DVector::from_fn(cells, |q, _| spec.lambda_max * dist(pos, spec.cell_center(q)) / diag);
            let trace = cells as f64 * sigma2 + lambda.norm_squared();
            NodeDataSpec {
                node_id: i,
                x: DMatrix::identity(cells, cells),
                sigma2,
                lambda_diag: lambda,
                mu: spec.mu_per_var * sigma2,
                alpha_hat: 1.0 / trace,
            }
        })
        .collect();
    let problem = Problem::new(nodes, GroundTruth::new(mrf_field(spec))?, NoiseModel::Gaussian)?;
    let topology = graph::generate(
        &GraphKind::Geometric {
            positions: positions.clone(),
            radius: spec.connect_radius,
        },
        rng,
    )?;
    if !topology.is_connected() {
        warn!("sensor graph is disconnected; the regularization cannot reach every node");
    }
    Ok(MrfScenario {
        problem,
        topology,
        positions,
    })
}

// ---------------------------------------------------------------- flight initiation distance

pub const FID_COEFFICIENTS: [&str; 8] = [
    "Intercept",
    "Start dist",
    "Diet(gi)",
    "Diet(g)",
    "Diet(i)",
    "Latitude",
    "Flock size",
    "Habitat",
];

fn s(v: &str) -> String {
    v.to_string()
}

/// Column names of the FID table. Deserializes from a mapping file; missing keys keep their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FidSchema {
    pub response: String,
    pub species: String,
    pub start_dist: String,
    pub diet: String,
    pub latitude: String,
    pub flock_size: String,
    pub habitat: String,
    /// Diet labels in regression order.
    pub diet_levels: [String; 3],
    /// Habitat label coded as 1; every other label is 0.
    pub habitat_one: String,
    pub mini_batch: usize,
    /// Cells treated as missing.
    pub missing: Vec<String>,
}

impl Default for FidSchema {
    fn default() -> Self {
        FidSchema {
            response: s("FID"),
            species: s("species"),
            start_dist: s("start_dist"),
            diet: s("diet"),
            latitude: s("latitude"),
            flock_size: s("flock_size"),
            habitat: s("habitat"),
            diet_levels: [s("gi"), s("g"), s("i")],
            habitat_one: s("urban"),
            mini_batch: 10,
            missing: vec![s(""), s("NA"), s("NaN")],
        }
    }
}

/// Rows of one node.
#[derive(Debug, Clone, PartialEq)]
pub struct FidNode {
    pub species: Vec<String>,
    /// Indices into the pooled table.
    pub rows: Vec<usize>,
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FidData {
    pub nodes: Vec<FidNode>,
    /// Normalized design, one row per accepted observation in file order.
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    /// Node of every pooled row.
    pub node_of_row: Vec<usize>,
    /// Rows dropped for missing fields.
    pub rejected: usize,
    pub mini_batch: usize,
}

impl FidData {
    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }
}

/// Species → node. Alphabetical round-robin over `n_nodes` unless `mapping` is given.
pub fn species_assignment(
    species: &BTreeSet<String>,
    n_nodes: usize,
    mapping: Option<&BTreeMap<String, usize>>,
) -> Result<BTreeMap<String, usize>> {
    match mapping {
        Some(m) => {
            for sp in species {
                match m.get(sp) {
                    None => return Err(Error::data(format!("species {sp:?} is missing from the node mapping"))),
                    Some(&k) if k >= n_nodes => {
                        return Err(Error::data(format!("species {sp:?} maps to node {k}, only {n_nodes} nodes")))
                    }
                    _ => {}
                }
            }
            Ok(species.iter().map(|sp| (sp.clone(), m[sp])).collect())
        }
        None => {
            if n_nodes == 0 {
                return Err(Error::config("need at least one node"));
            }
            Ok(species.iter().enumerate().map(|(k, sp)| (sp.clone(), k % n_nodes)).collect())
        }
    }
}

struct RawRow {
    species: String,
    values: [f64; 8],
    fid: f64,
}

fn zscore_column(x: &mut DMatrix<f64>, col: usize) -> Result<()> {
    let v = x.column(col).clone_owned();
    let (mean, sd) = mean_sd(&v)?;
    x.column_mut(col).iter_mut().for_each(|c| *c = (*c - mean) / sd);
    Ok(())
}

fn mean_sd(v: &DVector<f64>) -> Result<(f64, f64)> {
    let n = v.len() as f64;
    let mean = v.mean();
    let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    if !(sd > 0.0) {
        return Err(Error::data("cannot normalize a constant column"));
    }
    Ok((mean, sd))
}

/// Reads the table, codes the predictors and splits rows by species group.
///
/// Start distance, latitude, flock size and the response are z-scored over
/// the accepted rows; diet becomes three indicators and habitat one.
pub fn fid_ingest<R: Read>(
    reader: R,
    schema: &FidSchema,
    n_nodes: usize,
    mapping: Option<&BTreeMap<String, usize>>,
) -> Result<FidData> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::data(format!("missing column {name:?}")))
    };
    let c_species = col(&schema.species)?;
    let c_fid = col(&schema.response)?;
    let c_start = col(&schema.start_dist)?;
    let c_diet = col(&schema.diet)?;
    let c_lat = col(&schema.latitude)?;
    let c_flock = col(&schema.flock_size)?;
    let c_hab = col(&schema.habitat)?;

    let mut rows = Vec::new();
    let mut rejected = 0;
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let cell = |c: usize| rec.get(c).unwrap_or("");
        let used = [c_species, c_fid, c_start, c_diet, c_lat, c_flock, c_hab];
        if used.iter().any(|&c| schema.missing.iter().any(|m| m == cell(c))) {
            rejected += 1;
            continue;
        }
        let num = |c: usize| -> Result<f64> {
            let v = cell(c);
            match v.parse::<f64>() {
                Ok(x) if x.is_finite() => Ok(x),
                _ => Err(Error::data(format!("line {line}: column {:?} is not numeric: {v:?}", &headers[c]))),
            }
        };
        let diet = cell(c_diet);
        let level = schema
            .diet_levels
            .iter()
            .position(|l| l == diet)
            .ok_or_else(|| Error::data(format!("line {line}: unknown diet {diet:?}")))?;
        let mut values = [0.0; 8];
        values[0] = 1.0;
        values[1] = num(c_start)?;
        values[2 + level] = 1.0;
        values[5] = num(c_lat)?;
        values[6] = num(c_flock)?;
        values[7] = if cell(c_hab) == schema.habitat_one { 1.0 } else { 0.0 };
        rows.push(RawRow {
            species: cell(c_species).to_string(),
            values,
            fid: num(c_fid)?,
        });
    }
    if rows.len() < 2 {
        return Err(Error::data("table has fewer than two usable rows"));
    }
    if rejected > 0 {
        warn!("rejected {rejected} rows with missing fields");
    }

    let n = rows.len();
    let mut x = DMatrix::from_fn(n, 8, |r, c| rows[r].values[c]);
    for c in [1, 5, 6] {
        zscore_column(&mut x, c)?;
    }
    let y_raw = DVector::from_fn(n, |r, _| rows[r].fid);
    let (ym, ysd) = mean_sd(&y_raw)?;
    let y = y_raw.map(|v| (v - ym) / ysd);

    let species: BTreeSet<String> = rows.iter().map(|r| r.species.clone()).collect();
    let assign = species_assignment(&species, n_nodes, mapping)?;
    let node_of_row: Vec<usize> = rows.iter().map(|r| assign[&r.species]).collect();
    let mut nodes = Vec::with_capacity(n_nodes);
    for k in 0..n_nodes {
        let idx: Vec<usize> = (0..n).filter(|&r| node_of_row[r] == k).collect();
        if idx.len() < schema.mini_batch {
            return Err(Error::data(format!(
                "node {k} has {} rows, fewer than the mini-batch of {}",
                idx.len(),
                schema.mini_batch
            )));
        }
        nodes.push(FidNode {
            species: assign.iter().filter(|(_, &v)| v == k).map(|(sp, _)| sp.clone()).collect(),
            x: x.select_rows(&idx),
            y: DVector::from_fn(idx.len(), |r, _| y[idx[r]]),
            rows: idx,
        });
    }
    Ok(FidData {
        nodes,
        x,
        y,
        node_of_row,
        rejected,
        mini_batch: schema.mini_batch,
    })
}

/// Two-step GLS on the pooled table: per-node residual variances from an
/// ordinary fit set a block-diagonal `Ω`, then the minimum-norm GLS fit.
///
/// The intercept equals the sum of the diet indicators, so the normal matrix
/// is singular; the minimum-norm solution is also where mini-batch gradient
/// descent from zero converges.
pub fn fid_gls(data: &FidData) -> Result<GlsSolution> {
    let n = data.y.len();
    let ols = gls::gls_solve_min_norm(&data.x, &Covariance::Diagonal(DVector::from_element(n, 1.0)), &data.y)?;
    let resid = &data.y - &data.x * &ols.w_hat;
    let var: Vec<f64> = data
        .nodes
        .iter()
        .map(|node| {
            let ss: f64 = node.rows.iter().map(|&r| resid[r].powi(2)).sum();
            (ss / node.rows.len() as f64).max(1e-12)
        })
        .collect();
    let omega = DVector::from_fn(n, |r, _| var[data.node_of_row[r]]);
    gls::gls_solve_min_norm(&data.x, &Covariance::Diagonal(omega), &data.y)
}

/// Mini-batch gradients with an online covariance-trace estimate per node.
///
/// Each gradient event samples `mini_batch` rows without replacement, uses
/// `Ω̂_i = (trc_i / b) I` with the current trace estimate, and feeds the
/// residual back into the estimator. Raw weights are `1 / trc_i`.
pub struct FidSource<'a> {
    data: &'a FidData,
    rngs: Vec<SimRng>,
    estimators: Vec<TraceEstimator>,
    xb: DMatrix<f64>,
    yb: DVector<f64>,
}

impl<'a> FidSource<'a> {
    pub fn new(data: &'a FidData, seed: u64, window: usize, phi: f64) -> Result<Self> {
        let b = data.mini_batch;
        Ok(FidSource {
            data,
            rngs: (0..data.n_nodes()).map(|i| rng::node_stream(seed, i)).collect(),
            estimators: (0..data.n_nodes())
                .map(|_| TraceEstimator::new(window, phi))
                .collect::<Result<_>>()?,
            xb: DMatrix::zeros(b, data.x.ncols()),
            yb: DVector::zeros(b),
        })
    }

    /// Current trace estimate of node `i`; `b` (unit variance) before any estimate exists.
    pub fn trace(&self, i: usize) -> f64 {
        self.estimators[i].trace().filter(|t| *t > 0.0).unwrap_or(self.data.mini_batch as f64)
    }
}

impl DataSource for FidSource<'_> {
    fn gradient_into(&mut self, node: usize, _k: u64, w: &DVector<f64>, out: &mut DVector<f64>) -> Result<()> {
        let nd = &self.data.nodes[node];
        let b = self.data.mini_batch;
        let picks = sample(&mut self.rngs[node], nd.y.len(), b);
        for (r, src) in picks.iter().enumerate() {
            self.xb.row_mut(r).copy_from(&nd.x.row(src));
            self.yb[r] = nd.y[src];
        }
        let resid = &self.xb * w - &self.yb;
        let omega = self.trace(node) / b as f64;
        out.gemv_tr(1.0 / omega, &self.xb, &resid, 0.0);
        self.estimators[node].push(resid);
        Ok(())
    }

    fn refresh_weights(&mut self) -> Option<Vec<f64>> {
        Some((0..self.data.n_nodes()).map(|i| 1.0 / self.trace(i)).collect())
    }
}

/// Synthetic stand-in for the FID table with the same columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FidSurrogateSpec {
    pub rows: usize,
    pub species: usize,
    /// Rows per species before the remainder is spread at random.
    pub min_rows_per_species: usize,
    /// Rows written with an empty field (extra to `rows`).
    pub missing_rows: usize,
}

impl Default for FidSurrogateSpec {
    fn default() -> Self {
        FidSurrogateSpec {
            rows: 941,
            species: 23,
            min_rows_per_species: 20,
            missing_rows: 0,
        }
    }
}

/// Writes a surrogate table as CSV. Each species has its own diet, latitude
/// band and noise level, so nodes are heteroscedastic and non-identical.
pub fn fid_surrogate(spec: &FidSurrogateSpec, rng: &mut SimRng) -> Result<String> {
    if spec.species == 0 || spec.rows < spec.species * spec.min_rows_per_species {
        return Err(Error::config("surrogate needs rows ≥ species × min_rows_per_species"));
    }
    let mut counts = vec![spec.min_rows_per_species; spec.species];
    for _ in 0..spec.rows - spec.species * spec.min_rows_per_species {
        counts[rng.random_range(0..spec.species)] += 1;
    }
    let diets = ["gi", "g", "i"];
    let diet_effect = [-4.0, -2.5, -4.0];
    let mut out = String::from("species,FID,start_dist,diet,latitude,flock_size,habitat\n");
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let mut write_row = |sp: usize, diet: usize, lat0: f64, noise: f64, rng: &mut SimRng, blank: bool| {
        let start: f64 = rng.random_range(5.0..60.0);
        let lat = lat0 + 2.0 * std.sample(rng);
        let flock = (1.0 + (0.8 * std.sample(rng) + 1.2).exp()).round();
        let urban = rng.random_bool(0.5);
        let fid = 12.0 + 0.35 * start + diet_effect[diet] - 0.15 * (lat - 50.0) - 0.4 * flock
            + if urban { 0.8 } else { 0.0 }
            + noise * std.sample(rng);
        let fid_cell = if blank { String::new() } else { format!("{:.3}", fid.max(0.5)) };
        out.push_str(&format!(
            "sp{:02},{},{:.2},{},{:.3},{},{}\n",
            sp + 1,
            fid_cell,
            start,
            diets[diet],
            lat,
            flock,
            if urban { "urban" } else { "rural" }
        ));
    };
    for (sp, &count) in counts.iter().enumerate() {
        let diet = rng.random_range(0..3);
        let lat0 = rng.random_range(40.0..62.0);
        let noise = rng.random_range(2.0..8.0);
        for _ in 0..count {
            write_row(sp, diet, lat0, noise, rng, false);
        }
    }
    for k in 0..spec.missing_rows {
        write_row(k % spec.species, 0, 50.0, 1.0, rng, true);
    }
    Ok(out)
}

// ---------------------------------------------------------------- scaling study

/// Random regression networks for the size and connectivity sweeps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScalingSpec {
    /// Observations per node.
    pub m: usize,
    /// Parameters.
    pub p: usize,
    pub x_mean: f64,
    pub x_sd: f64,
    pub sigma2_range: [f64; 2],
    /// Range of `‖Λ_i‖₂` (largest diagonal entry).
    pub lambda_norm_range: [f64; 2],
    /// Inclusive integer range of the entries of `w*`.
    pub w_star_range: [i64; 2],
    pub mu: f64,
    pub edge_fraction: f64,
}

impl Default for ScalingSpec {
    fn default() -> Self {
        ScalingSpec {
            m: 10,
            p: 5,
            x_mean: 1.0,
            x_sd: 0.1,
            sigma2_range: [1e-6, 1e-2],
            lambda_norm_range: [0.003, 0.3],
            w_star_range: [-10, 10],
            mu: 1.0,
            edge_fraction: 0.6,
        }
    }
}

impl ScalingSpec {
    pub fn validate(&self) -> Result<()> {
        let [s0, s1] = self.sigma2_range;
        let [l0, l1] = self.lambda_norm_range;
        if self.m == 0 || self.p == 0 {
            return Err(Error::config("scaling study needs m, p ≥ 1"));
        }
        if !(s0 >= 0.0 && s1 >= s0 && l0 >= 0.0 && l1 >= l0) {
            return Err(Error::config("noise ranges must be nonnegative and ordered"));
        }
        if !(self.x_sd >= 0.0 && self.mu > 0.0) {
            return Err(Error::config("x_sd must be nonnegative and mu positive"));
        }
        if self.w_star_range[1] < self.w_star_range[0] {
            return Err(Error::config("w_star range is empty"));
        }
        if !(0.0..=1.0).contains(&self.edge_fraction) {
            return Err(Error::config("edge fraction outside [0, 1]"));
        }
        Ok(())
    }
}

/// `w*` for a scaling instance. Drawn from its own stream so it does not depend on `N`.
pub fn scaling_w_star(spec: &ScalingSpec, rng: &mut SimRng) -> DVector<f64> {
    let [lo, hi] = spec.w_star_range;
    DVector::from_fn(spec.p, |_, _| rng.random_range(lo..=hi) as f64)
}

/// Builds `n` nodes with data drawn from `problem_rng` and an edge-fraction
/// topology drawn from `topology_rng`.
pub fn scaling_build(
    spec: &ScalingSpec,
    n: usize,
    problem_rng: &mut SimRng,
    topology_rng: &mut SimRng,
) -> Result<(Problem, Topology)> {
    spec.validate()?;
    if n < 2 {
        return Err(Error::config("scaling study needs at least two nodes"));
    }
    let w_star = scaling_w_star(spec, problem_rng);
    let x_law = Normal::new(spec.x_mean, spec.x_sd).map_err(|e| Error::config(e.to_string()))?;
    let [s0, s1] = spec.sigma2_range;
    let [l0, l1] = spec.lambda_norm_range;
    let mut nodes = Vec::with_capacity(n);
    for i in 0..n {
        let x = DMatrix::from_fn(spec.m, spec.p, |_, _| x_law.sample(problem_rng));
        let sigma2 = s0 + (s1 - s0) * problem_rng.random::<f64>();
        let norm = l0 + (l1 - l0) * problem_rng.random::<f64>();
        let raw = DVector::from_fn(spec.m, |_, _| problem_rng.random_range(0.05..1.0));
        let lambda = &raw * (norm / raw.amax());
        debug_assert!(lambda.amax() >= l0 - 1e-12 && lambda.amax() <= l1 + 1e-12);
        let trace = spec.m as f64 * sigma2 + lambda.norm_squared();
        nodes.push(NodeDataSpec {
            node_id: i,
            x,
            sigma2,
            lambda_diag: lambda,
            mu: spec.mu,
            alpha_hat: 1.0 / trace,
        });
    }
    let problem = Problem::new(nodes, GroundTruth::new(w_star)?, NoiseModel::Gaussian)?;
    let topology = graph::generate(
        &GraphKind::EdgeFraction {
            n,
            fraction: spec.edge_fraction,
            exact: false,
        },
        topology_rng,
    )?;
    Ok((problem, topology))
}

/// Scaling instance of trial `trial`: independent streams for data and graph.
pub fn scaling_trial_instance(spec: &ScalingSpec, n: usize, trial_seed: u64) -> Result<(Problem, Topology)> {
    scaling_build(
        spec,
        n,
        &mut rng::stream(trial_seed, rng::STREAM_SCENARIO),
        &mut rng::stream(trial_seed, rng::STREAM_TOPOLOGY),
    )
}
