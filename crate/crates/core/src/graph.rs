//! Undirected topologies, Laplacians and algebraic connectivity.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SimRng;

/// Undirected simple graph on `n` nodes. Edges are stored as `(i, j)` with `i < j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    n: usize,
    edges: BTreeSet<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
}

impl Topology {
    pub fn new(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut set = BTreeSet::new();
        for (a, b) in edges {
            if a == b {
                return Err(Error::config(format!("self-loop at node {a}")));
            }
            if a >= n || b >= n {
                return Err(Error::config(format!("edge ({a},{b}) out of range for n = {n}")));
            }
            if !set.insert((a.min(b), a.max(b))) {
                return Err(Error::config(format!("duplicate edge ({a},{b})")));
            }
        }
        let mut neighbors = vec![Vec::new(); n];
        for &(a, b) in &set {
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        for nb in &mut neighbors {
            nb.sort_unstable();
        }
        Ok(Topology {
            n,
            edges: set,
            neighbors,
        })
    }

    pub fn empty(n: usize) -> Self {
        Topology::new(n, []).expect("empty graph is valid")
    }

    pub fn complete(n: usize) -> Self {
        let edges = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j)));
        Topology::new(n, edges).expect("complete graph is valid")
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.edges.contains(&(i.min(j), i.max(j)))
    }

    pub fn adjacency(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.n, self.n);
        for &(i, j) in &self.edges {
            a[(i, j)] = 1.0;
            a[(j, i)] = 1.0;
        }
        a
    }

    /// Union-find connectivity.
    pub fn is_connected(&self) -> bool {
        if self.n <= 1 {
            return true;
        }
        let mut parent: Vec<usize> = (0..self.n).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        let mut components = self.n;
        for &(a, b) in &self.edges {
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            if ra != rb {
                parent[ra] = rb;
                components -= 1;
            }
        }
        components == 1
    }

    pub fn to_file(&self) -> TopologyFile {
        TopologyFile {
            n: self.n,
            edges: self.edges.iter().map(|&(a, b)| [a, b]).collect(),
        }
    }
}

/// JSON edge list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologyFile {
    pub n: usize,
    pub edges: Vec<[usize; 2]>,
}

impl TopologyFile {
    pub fn into_topology(self) -> Result<Topology> {
        Topology::new(self.n, self.edges.into_iter().map(|[a, b]| (a, b)))
    }
}

/// `L = D − A`.
pub fn laplacian(t: &Topology) -> DMatrix<f64> {
    generalized_laplacian(t, &vec![1.0; t.n()])
}

/// Laplacian of the graph with edge weights `α̂_i α̂_j`.
pub fn generalized_laplacian(t: &Topology, alpha_hat: &[f64]) -> DMatrix<f64> {
    assert_eq!(alpha_hat.len(), t.n(), "one weight per node");
    let mut l = DMatrix::zeros(t.n(), t.n());
    for (i, j) in t.edges() {
        let w = alpha_hat[i] * alpha_hat[j];
        l[(i, j)] -= w;
        l[(j, i)] -= w;
        l[(i, i)] += w;
        l[(j, j)] += w;
    }
    l
}

/// Second-smallest eigenvalue of a symmetric matrix.
///
/// Returns 0 for a 1×1 input.
pub fn algebraic_connectivity(m: &DMatrix<f64>) -> Result<f64> {
    if !m.is_square() {
        return Err(Error::contract("algebraic connectivity needs a square matrix"));
    }
    let scale = m.amax().max(1.0);
    for i in 0..m.nrows() {
        for j in i + 1..m.ncols() {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-12 * scale {
                return Err(Error::contract(format!(
                    "matrix is not symmetric at ({i},{j})"
                )));
            }
        }
    }
    if m.nrows() < 2 {
        return Ok(0.0);
    }
    let mut eig: Vec<f64> = m.clone().symmetric_eigen().eigenvalues.iter().copied().collect();
    eig.sort_by(f64::total_cmp);
    Ok(eig[1])
}

/// λ₂ of `L` and of the generalized Laplacian.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralSummary {
    pub lambda2: f64,
    pub lambda2_hat: f64,
}

pub fn spectral_summary(t: &Topology, alpha_hat: &[f64]) -> SpectralSummary {
    SpectralSummary {
        lambda2: algebraic_connectivity(&laplacian(t)).expect("Laplacian is symmetric"),
        lambda2_hat: algebraic_connectivity(&generalized_laplacian(t, alpha_hat))
            .expect("Laplacian is symmetric"),
    }
}

/// Graph families used by the experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GraphKind {
    Complete {
        n: usize,
    },
    /// Connects every pair of points at Euclidean distance at most `radius`.
    Geometric {
        positions: Vec<[f64; 2]>,
        radius: f64,
    },
    /// Keeps edges of the complete graph at random. With `exact`, exactly
    /// `⌊Υ·E⌋` edges are kept; otherwise each edge survives with probability `Υ`.
    EdgeFraction {
        n: usize,
        fraction: f64,
        #[serde(default)]
        exact: bool,
    },
}

pub fn generate(kind: &GraphKind, rng: &mut SimRng) -> Result<Topology> {
    match kind {
        GraphKind::Complete { n } => Ok(Topology::complete(*n)),
        GraphKind::Geometric { positions, radius } => {
            let r2 = radius * radius;
            let mut edges = Vec::new();
            for (i, a) in positions.iter().enumerate() {
                for (j, b) in positions.iter().enumerate().skip(i + 1) {
                    let d2 = (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
                    if d2 <= r2 {
                        edges.push((i, j));
                    }
                }
            }
            Topology::new(positions.len(), edges)
        }
        GraphKind::EdgeFraction { n, fraction, exact } => {
            if !(0.0..=1.0).contains(fraction) {
                return Err(Error::config(format!("edge fraction {fraction} outside [0, 1]")));
            }
            let all: Vec<(usize, usize)> = Topology::complete(*n).edges().collect();
            let kept: Vec<(usize, usize)> = if *exact {
                let k = (fraction * all.len() as f64).floor() as usize;
                let mut idx = sample(rng, all.len(), k).into_vec();
                idx.sort_unstable();
                idx.into_iter().map(|e| all[e]).collect()
            } else {
                all.into_iter().filter(|_| rng.random_bool(*fraction)).collect()
            };
            Topology::new(*n, kept)
        }
    }
}

/// One-sync linear map of the scalar models and its column sums.
#[derive(Debug, Clone)]
pub struct MixingMatrix {
    pub w: DMatrix<f64>,
    pub column_sums: DVector<f64>,
}

/// `W_ii = 1 − γδ Σ_j α̂_j a_ij`, `W_ij = γδ α̂_j a_ij`.
pub fn mixing_matrix(t: &Topology, alpha_hat: &[f64], gamma: f64, delta: f64) -> MixingMatrix {
    let n = t.n();
    let gd = gamma * delta;
    let mut w = DMatrix::identity(n, n);
    for i in 0..n {
        for &j in t.neighbors(i) {
            w[(i, j)] = gd * alpha_hat[j];
            w[(i, i)] -= gd * alpha_hat[j];
        }
        if w[(i, i)] < 0.0 {
            log::warn!("mixing matrix diagonal W[{i},{i}] = {} is negative", w[(i, i)]);
        }
    }
    let column_sums = DVector::from_fn(n, |j, _| w.column(j).sum());
    MixingMatrix { w, column_sums }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest, Just, ProptestConfig, Strategy};

    #[test]
    fn laplacian_examples() {
        let t = Topology::new(2, [(0, 1)]).unwrap();
        let l = laplacian(&t);
        assert_eq!(l, DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]));
        assert_abs_diff_eq!(algebraic_connectivity(&l).unwrap(), 2.0, epsilon = 1e-12);

        let path = Topology::new(3, [(0, 1), (1, 2)]).unwrap();
        let mut eig: Vec<f64> = laplacian(&path).symmetric_eigen().eigenvalues.iter().copied().collect();
        eig.sort_by(f64::total_cmp);
        for (a, b) in eig.iter().zip([0.0, 1.0, 3.0]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }

        let k3 = laplacian(&Topology::complete(3));
        assert_abs_diff_eq!(algebraic_connectivity(&k3).unwrap(), 3.0, epsilon = 1e-12);
    }

    #[test]
    fn generalized_laplacian_examples() {
        let t = Topology::new(2, [(0, 1)]).unwrap();
        assert_eq!(generalized_laplacian(&t, &[1.0, 1.0]), laplacian(&t));
        let lh = generalized_laplacian(&t, &[1.0, 2.0]);
        assert_eq!(lh, DMatrix::from_row_slice(2, 2, &[2.0, -2.0, -2.0, 2.0]));
        assert_abs_diff_eq!(algebraic_connectivity(&lh).unwrap(), 4.0, epsilon = 1e-10);

        let e = Topology::empty(3);
        assert_eq!(generalized_laplacian(&e, &[1.0, 2.0, 3.0]), DMatrix::zeros(3, 3));
        assert_abs_diff_eq!(spectral_summary(&e, &[1.0, 2.0, 3.0]).lambda2_hat, 0.0);
    }

    #[test]
    fn connectivity_examples() {
        for n in [3, 5, 10] {
            let l = laplacian(&Topology::complete(n));
            assert_abs_diff_eq!(algebraic_connectivity(&l).unwrap(), n as f64, epsilon = 1e-8);
        }
        let two = Topology::new(4, [(0, 1), (2, 3)]).unwrap();
        assert!(algebraic_connectivity(&laplacian(&two)).unwrap().abs() < 1e-10);
        let star = Topology::new(4, [(0, 1), (0, 2), (0, 3)]).unwrap();
        assert_abs_diff_eq!(algebraic_connectivity(&laplacian(&star)).unwrap(), 1.0, epsilon = 1e-10);
    }

    #[test]
    fn asymmetric_input_is_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        assert!(matches!(algebraic_connectivity(&m), Err(Error::Contract(_))));
    }

    #[test]
    fn invalid_edges_are_rejected() {
        assert!(Topology::new(3, [(1, 1)]).is_err());
        assert!(Topology::new(3, [(0, 1), (1, 0)]).is_err());
        assert!(Topology::new(3, [(0, 3)]).is_err());
    }

    #[test]
    fn generator_examples() {
        let mut r = rng::stream(1, 0);
        assert_eq!(generate(&GraphKind::Complete { n: 4 }, &mut r).unwrap().edge_count(), 6);
        let full = generate(
            &GraphKind::EdgeFraction {
                n: 7,
                fraction: 1.0,
                exact: false,
            },
            &mut r,
        )
        .unwrap();
        assert_eq!(full, Topology::complete(7));
        let geo = generate(
            &GraphKind::Geometric {
                positions: vec![[0.0, 0.0], [1.0, 0.0], [5.0, 0.0]],
                radius: 2.5,
            },
            &mut r,
        )
        .unwrap();
        assert_eq!(geo.edges().collect::<Vec<_>>(), vec![(0, 1)]);
        let exact = generate(
            &GraphKind::EdgeFraction {
                n: 10,
                fraction: 0.5,
                exact: true,
            },
            &mut r,
        )
        .unwrap();
        assert_eq!(exact.edge_count(), 22);
        assert!(generate(
            &GraphKind::EdgeFraction {
                n: 3,
                fraction: 1.5,
                exact: false
            },
            &mut r
        )
        .is_err());
    }

    #[test]
    fn mixing_examples() {
        let t = Topology::new(2, [(0, 1)]).unwrap();
        let m = mixing_matrix(&t, &[1.0, 1.0], 0.1, 1.0);
        assert_abs_diff_eq!(m.w, DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.1, 0.9]), epsilon = 1e-15);
        let m = mixing_matrix(&t, &[1.0, 2.0], 0.1, 1.0);
        assert_abs_diff_eq!(m.w, DMatrix::from_row_slice(2, 2, &[0.8, 0.2, 0.1, 0.9]), epsilon = 1e-15);
        assert_abs_diff_eq!(m.column_sums[0], 0.9, epsilon = 1e-15);
        assert_abs_diff_eq!(m.column_sums[1], 1.1, epsilon = 1e-15);
        let m = mixing_matrix(&Topology::complete(4), &[1.0; 4], 0.1, 0.0);
        assert_eq!(m.w, DMatrix::identity(4, 4));
    }

    #[test]
    fn topology_json_roundtrip() {
        let t = Topology::new(4, [(2, 1), (0, 3)]).unwrap();
        let s = serde_json::to_string(&t.to_file()).unwrap();
        assert_eq!(s, r#"{"n":4,"edges":[[0,3],[1,2]]}"#);
        let back: TopologyFile = serde_json::from_str(&s).unwrap();
        assert_eq!(back.into_topology().unwrap(), t);
    }

    fn random_graph() -> impl Strategy<Value = (Topology, Vec<f64>, u64)> {
        (2usize..12, 0.0f64..1.0, any::<u64>()).prop_flat_map(|(n, p, seed)| {
            let mut r = rng::stream(seed, 0);
            let t = generate(
                &GraphKind::EdgeFraction {
                    n,
                    fraction: p,
                    exact: false,
                },
                &mut r,
            )
            .unwrap();
            (Just(t), proptest::collection::vec(0.1f64..5.0, n), Just(seed))
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn generalized_laplacian_is_psd_with_null_ones((t, a, seed) in random_graph()) {
            let lh = generalized_laplacian(&t, &a);
            let ones = DVector::from_element(t.n(), 1.0);
            prop_assert!((&lh * &ones).amax() <= 1e-12 * lh.amax().max(1.0));
            let mut r = rng::stream(seed, 1);
            for _ in 0..100 {
                let x = DVector::from_fn(t.n(), |_, _| r.random_range(-1.0..1.0));
                prop_assert!((x.transpose() * &lh * &x)[0] >= -1e-12);
            }
        }

        #[test]
        fn positive_connectivity_iff_connected((t, a, _seed) in random_graph()) {
            let l2 = spectral_summary(&t, &a).lambda2_hat;
            prop_assert_eq!(l2 > 1e-9, t.is_connected());
        }

        #[test]
        fn rayleigh_quotient_bounded_by_lambda2((t, a, seed) in random_graph()) {
            let lh = generalized_laplacian(&t, &a);
            let l2 = algebraic_connectivity(&lh).unwrap();
            let mut r = rng::stream(seed, 2);
            for _ in 0..20 {
                let mut x = DVector::from_fn(t.n(), |_, _| r.random_range(-1.0..1.0));
                let mean = x.mean();
                x.add_scalar_mut(-mean);
                let q = (x.transpose() * &lh * &x)[0] / x.norm_squared();
                prop_assert!(q >= l2 - 1e-8);
            }
        }

        #[test]
        fn mixing_rows_sum_to_one((t, a, _seed) in random_graph(), gd in 0.0f64..2.0) {
            let m = mixing_matrix(&t, &a, gd, 1.0);
            for i in 0..t.n() {
                prop_assert!((m.w.row(i).sum() - 1.0).abs() < 1e-12);
            }
        }
    }
}
