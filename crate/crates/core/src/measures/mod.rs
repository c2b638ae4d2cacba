//! Weighted particle measures on ℝ^d and on discretized path space.
//!
//! A [`ParticleMeasure`] stands for `m ∈ P_α(ℝ^d)`, a [`TrajectoryEnsemble`]
//! for `η` on curves, and a [`FlowOfMeasures`] for `t ↦ e_t♯η`.

pub mod transport;

use std::collections::HashMap;

use serde::Serialize;

use crate::dynamics::{LinearDynamics, Path, TimeGrid};
use crate::error::{invalid, Result};
use crate::linalg::{norm, point_bits};

const WEIGHT_SUM_TOL: f64 = 1e-9;

/// Leaves weights untouched when they already sum to one up to rounding, so
/// that copying weights between measures preserves them bit for bit.
fn renormalize(weights: Vec<f64>, total: f64) -> Vec<f64> {
    if (total - 1.0).abs() <= 1e-14 {
        weights
    } else {
        weights.into_iter().map(|w| w / total).collect()
    }
}

/// Finite weighted point cloud with weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleMeasure {
    dim: usize,
    points: Vec<f64>,
    weights: Vec<f64>,
    mean: Vec<f64>,
}

impl ParticleMeasure {
    /// `points` is row-major, one particle per `dim` entries. Weights must be
    /// nonnegative and sum to one within `1e-9`; they are renormalized.
    pub fn new(dim: usize, points: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(invalid("measure dimension must be at least 1"));
        }
        if weights.is_empty() {
            return Err(invalid("measure needs at least one particle"));
        }
        if points.len() != dim * weights.len() {
            return Err(invalid(format!(
                "{} coordinates do not match {} particles in R^{dim}",
                points.len(),
                weights.len()
            )));
        }
        if let Some(j) = points.chunks(dim).position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(invalid(format!("particle {j} has a non-finite coordinate")));
        }
        if let Some(j) = weights.iter().position(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(invalid(format!(
                "particle {j} has invalid weight {}",
                weights[j]
            )));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(invalid(format!("weights sum to {total}, expected 1")));
        }
        let weights = renormalize(weights, total);
        let mut mean = vec![0.0; dim];
        for (p, w) in points.chunks(dim).zip(&weights) {
            for (m, x) in mean.iter_mut().zip(p) {
                *m += w * x;
            }
        }
        Ok(Self {
            dim,
            points,
            weights,
            mean,
        })
    }

    /// Equal weights on the given points.
    pub fn uniform(dim: usize, points: Vec<f64>) -> Result<Self> {
        if dim == 0 || points.is_empty() || !points.len().is_multiple_of(dim) {
            return Err(invalid("uniform measure needs a nonempty point list"));
        }
        let n = points.len() / dim;
        Self::new(dim, points, vec![1.0 / n as f64; n])
    }

    pub fn dirac(x: &[f64]) -> Result<Self> {
        Self::new(x.len(), x.to_vec(), vec![1.0])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, j: usize) -> &[f64] {
        &self.points[j * self.dim..(j + 1) * self.dim]
    }

    pub fn weight(&self, j: usize) -> f64 {
        self.weights[j]
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], f64)> {
        self.points.chunks(self.dim).zip(self.weights.iter().copied())
    }

    /// Barycenter `∫ x dm`.
    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// `[m]_α = Σ w_j |x_j|^α`
    pub fn moment_alpha(&self, alpha: f64) -> Result<f64> {
        if !(alpha > 1.0 && alpha.is_finite()) {
            return Err(invalid(format!("moment exponent must exceed 1, got {alpha}")));
        }
        Ok(self.iter().map(|(x, w)| w * norm(x).powf(alpha)).sum())
    }

    /// `∫ |x| dm`
    pub fn first_moment(&self) -> f64 {
        self.iter().map(|(x, w)| w * norm(x)).sum()
    }

    /// `max_j |x_j|`
    pub fn support_radius(&self) -> f64 {
        self.points.chunks(self.dim).map(norm).fold(0.0, f64::max)
    }

    /// `∫ φ dm`
    pub fn integrate(&self, mut phi: impl FnMut(&[f64]) -> f64) -> f64 {
        self.iter().map(|(x, w)| w * phi(x)).sum()
    }
}

/// Exact `d₁(μ, ν)`.
///
/// Uses the sorted-CDF formula on the line and an exact transport solve
/// otherwise. Bit-identical points are merged first; in dimension above one
/// the solve refuses more than [`transport::MAX_EXACT_PARTICLES`] distinct
/// points per side.
pub fn wasserstein1(mu: &ParticleMeasure, nu: &ParticleMeasure) -> Result<f64> {
    if mu.dim != nu.dim {
        return Err(invalid(format!(
            "cannot compare measures on R^{} and R^{}",
            mu.dim, nu.dim
        )));
    }
    if mu.dim == 1 {
        Ok(transport::w1_sorted(
            &mu.points,
            &mu.weights,
            &nu.points,
            &nu.weights,
        ))
    } else {
        transport::w1_exact(&mu.points, &mu.weights, &nu.points, &nu.weights, mu.dim)
    }
}

/// Weighted collection of paths on a shared grid, all starting at node 0.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryEnsemble {
    grid: TimeGrid,
    paths: Vec<Path>,
    weights: Vec<f64>,
}

impl TrajectoryEnsemble {
    pub fn new(grid: TimeGrid, paths: Vec<Path>, weights: Vec<f64>) -> Result<Self> {
        if paths.is_empty() || paths.len() != weights.len() {
            return Err(invalid(format!(
                "ensemble has {} paths and {} weights",
                paths.len(),
                weights.len()
            )));
        }
        let (d, k) = (paths[0].state_dim(), paths[0].control_dim());
        for (j, p) in paths.iter().enumerate() {
            if p.start_node() != 0 || p.end_node() != grid.steps() {
                return Err(invalid(format!(
                    "path {j} covers nodes {}..={}, expected 0..={}",
                    p.start_node(),
                    p.end_node(),
                    grid.steps()
                )));
            }
            if p.state_dim() != d || p.control_dim() != k {
                return Err(invalid(format!("path {j} has mismatched dimensions")));
            }
        }
        if let Some(j) = weights.iter().position(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(invalid(format!("path {j} has invalid weight {}", weights[j])));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(invalid(format!("path weights sum to {total}, expected 1")));
        }
        let weights = renormalize(weights, total);
        Ok(Self {
            grid,
            paths,
            weights,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn paths(&self) -> &[Path] {
        &self.paths
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.paths[0].state_dim()
    }

    /// `e_{t_i}♯η`
    pub fn pushforward_eval(&self, node: usize) -> Result<ParticleMeasure> {
        if node > self.grid.steps() {
            return Err(invalid(format!(
                "node {node} outside 0..={}",
                self.grid.steps()
            )));
        }
        let d = self.state_dim();
        let mut points = Vec::with_capacity(d * self.len());
        for p in &self.paths {
            points.extend_from_slice(p.state(node));
        }
        ParticleMeasure::new(d, points, self.weights.clone())
    }

    /// All time marginals.
    pub fn flow(&self) -> Result<FlowOfMeasures> {
        let snaps = (0..=self.grid.steps())
            .map(|i| self.pushforward_eval(i))
            .collect::<Result<Vec<_>>>()?;
        FlowOfMeasures::new(self.grid, snaps)
    }

    /// `∫ φ dη`
    pub fn integrate(&self, mut phi: impl FnMut(&Path) -> f64) -> f64 {
        self.paths.iter().zip(&self.weights).map(|(p, w)| w * phi(p)).sum()
    }

    /// `(1 − λ)·self ⊕ λ·other` as a weighted union of path lists.
    pub fn mix(&self, other: &TrajectoryEnsemble, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda <= 1.0) {
            return Err(invalid(format!("mixing weight must lie in (0, 1], got {lambda}")));
        }
        if self.grid != other.grid {
            return Err(invalid("cannot mix ensembles on different grids"));
        }
        let mut paths = Vec::with_capacity(self.len() + other.len());
        let mut weights = Vec::with_capacity(self.len() + other.len());
        for (p, w) in self.paths.iter().zip(&self.weights) {
            paths.push(p.clone());
            weights.push((1.0 - lambda) * w);
        }
        for (p, w) in other.paths.iter().zip(&other.weights) {
            paths.push(p.clone());
            weights.push(lambda * w);
        }
        Self::new(self.grid, paths, weights)
    }

    /// Drops paths with weight below `min_weight` and merges paths from the
    /// same start whose states and controls differ by less than `merge_tol`
    /// in sup norm. Order of first appearance is kept.
    pub fn prune(&self, min_weight: f64, merge_tol: f64) -> Result<Self> {
        let mut kept: Vec<Path> = Vec::new();
        let mut kept_w: Vec<f64> = Vec::new();
        let mut by_start: HashMap<Vec<u64>, Vec<usize>> = HashMap::new();
        for (p, &w) in self.paths.iter().zip(&self.weights) {
            if w < min_weight {
                continue;
            }
            let bucket = by_start.entry(point_bits(p.initial_state())).or_default();
            let twin = bucket.iter().copied().find(|&k| {
                let q = &kept[k];
                q.sup_distance(p) < merge_tol
                    && q.controls()
                        .iter()
                        .zip(p.controls())
                        .all(|(a, b)| (a - b).abs() < merge_tol)
            });
            match twin {
                Some(k) => kept_w[k] += w,
                None => {
                    bucket.push(kept.len());
                    kept.push(p.clone());
                    kept_w.push(w);
                }
            }
        }
        let total: f64 = kept_w.iter().sum();
        if kept.is_empty() || total <= 0.0 {
            return Err(invalid("pruning removed every path"));
        }
        let weights = kept_w.iter().map(|w| w / total).collect();
        Self::new(self.grid, kept, weights)
    }
}

/// One marginal per grid node.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowOfMeasures {
    grid: TimeGrid,
    snapshots: Vec<ParticleMeasure>,
}

impl FlowOfMeasures {
    pub fn new(grid: TimeGrid, snapshots: Vec<ParticleMeasure>) -> Result<Self> {
        if snapshots.len() != grid.node_count() {
            return Err(invalid(format!(
                "flow has {} snapshots, grid has {} nodes",
                snapshots.len(),
                grid.node_count()
            )));
        }
        let d = snapshots[0].dim();
        if snapshots.iter().any(|s| s.dim() != d) {
            return Err(invalid("flow snapshots live in different dimensions"));
        }
        Ok(Self { grid, snapshots })
    }

    /// The same measure at every node.
    pub fn constant(grid: TimeGrid, m: ParticleMeasure) -> Self {
        Self {
            grid,
            snapshots: vec![m; grid.node_count()],
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn snapshot(&self, node: usize) -> &ParticleMeasure {
        &self.snapshots[node]
    }

    pub fn snapshots(&self) -> &[ParticleMeasure] {
        &self.snapshots
    }

    pub fn dim(&self) -> usize {
        self.snapshots[0].dim()
    }

    /// `max_i d₁(m_{t_i}, m'_{t_i})`
    pub fn sup_distance(&self, other: &FlowOfMeasures) -> Result<f64> {
        if self.grid != other.grid {
            return Err(invalid("flows live on different grids"));
        }
        let mut best: f64 = 0.0;
        for (a, b) in self.snapshots.iter().zip(&other.snapshots) {
            best = best.max(wasserstein1(a, b)?);
        }
        Ok(best)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AdmissibilityReport {
    /// `d₁(e₀♯η, m₀)`
    pub initial_match: f64,
    /// `Σ w_j ‖γ̇_j‖₂^α`
    pub moment: f64,
    pub bound: f64,
    pub admissible: bool,
}

/// Tests membership of `η` in the admissible set with moment bound `r`.
pub fn check_admissible(
    eta: &TrajectoryEnsemble,
    dynamics: &LinearDynamics,
    m0: &ParticleMeasure,
    r: f64,
    alpha: f64,
) -> Result<AdmissibilityReport> {
    let start = eta.pushforward_eval(0)?;
    let initial_match = wasserstein1(&start, m0)?;
    let dt = eta.grid().dt();
    let moment = eta.integrate(|p| p.velocity_l2(dynamics, dt).powf(alpha));
    Ok(AdmissibilityReport {
        initial_match,
        moment,
        bound: r,
        admissible: initial_match <= 1e-9 && moment <= r,
    })
}

/// Paths sharing one initial point, with weights renormalized within the group.
#[derive(Debug, Clone, PartialEq)]
pub struct StartGroup {
    pub start: Vec<f64>,
    /// Total weight of the group in `η`, i.e. `m₀({x})`.
    pub mass: f64,
    /// Indices into the ensemble's path list.
    pub members: Vec<usize>,
    /// Conditional weights, summing to one.
    pub weights: Vec<f64>,
}

/// Finite disintegration of `η` with respect to `e₀`.
///
/// Groups are formed by bitwise equality of the initial state and appear in
/// order of first occurrence.
pub fn disintegrate(eta: &TrajectoryEnsemble) -> Vec<StartGroup> {
    let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut groups: Vec<StartGroup> = Vec::new();
    for (j, (p, &w)) in eta.paths().iter().zip(eta.weights()).enumerate() {
        let key = point_bits(p.initial_state());
        let g = *index.entry(key).or_insert_with(|| {
            groups.push(StartGroup {
                start: p.initial_state().to_vec(),
                mass: 0.0,
                members: Vec::new(),
                weights: Vec::new(),
            });
            groups.len() - 1
        });
        groups[g].mass += w;
        groups[g].members.push(j);
        groups[g].weights.push(w);
    }
    for g in &mut groups {
        let mass = g.mass;
        if mass > 0.0 {
            g.weights.iter_mut().for_each(|w| *w /= mass);
        }
    }
    groups
}

/// Maximum over nodes of `d₁(m_t, m_s)/|t − s|` for adjacent nodes, which is
/// the sharpest Lipschitz constant the grid can witness for a path-induced
/// flow since `d₁` along coupled paths is subadditive.
pub fn adjacent_lipschitz(flow: &FlowOfMeasures) -> Result<f64> {
    let dt = flow.grid().dt();
    let mut best: f64 = 0.0;
    for pair in flow.snapshots().windows(2) {
        best = best.max(wasserstein1(&pair[0], &pair[1])? / dt);
    }
    Ok(best)
}
