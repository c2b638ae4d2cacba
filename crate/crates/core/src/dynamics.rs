//! Exact flow maps for `ẋ = Ax + Bu` on a uniform grid with piecewise-constant
//! controls.
//!
//! Over one interval of length `Δt` with constant control `u`,
//!
//! ```text
//! x(t + Δt) = Φ x(t) + Ψ u,   Φ = e^{ΔtA},   Ψ = ∫₀^{Δt} e^{sA} ds B.
//! ```
//!
//! Both maps come from a single exponential of the block matrix
//! `[[A, B], [0, 0]]`, so the step is exact to the accuracy of the exponential.

use nalgebra::DMatrix;

use crate::error::{invalid, Result};
use crate::linalg::{mat_vec_acc, norm, spectral_norm};
use crate::measures::{ParticleMeasure, TrajectoryEnsemble};

/// Linear controlled dynamics `ẋ = Ax + Bu` on `[0, T]`.
#[derive(Debug, Clone)]
pub struct LinearDynamics {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    horizon: f64,
    a_norm: f64,
    b_norm: f64,
}

impl LinearDynamics {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, horizon: f64) -> Result<Self> {
        let d = a.nrows();
        if d == 0 || a.ncols() != d {
            return Err(invalid(format!(
                "A must be square with d >= 1, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if b.nrows() != d || b.ncols() == 0 {
            return Err(invalid(format!(
                "B must be {d}xk with k >= 1, got {}x{}",
                b.nrows(),
                b.ncols()
            )));
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(invalid(format!("horizon must be positive, got {horizon}")));
        }
        if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(invalid("A and B must have finite entries"));
        }
        let a_norm = spectral_norm(&a);
        let b_norm = spectral_norm(&b);
        Ok(Self {
            a,
            b,
            horizon,
            a_norm,
            b_norm,
        })
    }

    /// Convenience constructor from row-major entries.
    pub fn from_rows(a: &[Vec<f64>], b: &[Vec<f64>], horizon: f64) -> Result<Self> {
        Self::new(matrix_from_rows(a, "A")?, matrix_from_rows(b, "B")?, horizon)
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Operator norm `‖A‖`.
    pub fn a_norm(&self) -> f64 {
        self.a_norm
    }

    /// Operator norm `‖B‖`.
    pub fn b_norm(&self) -> f64 {
        self.b_norm
    }

    /// `Ax + Bu`
    pub fn velocity(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        mat_vec_acc(&self.a, x, out);
        mat_vec_acc(&self.b, u, out);
    }
}

pub(crate) fn matrix_from_rows(rows: &[Vec<f64>], name: &str) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    if nrows == 0 {
        return Err(invalid(format!("{name} has no rows")));
    }
    let ncols = rows[0].len();
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != ncols) {
        return Err(invalid(format!(
            "{name} row {i} has {} entries, expected {ncols}",
            r.len()
        )));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

/// Uniform grid `t_i = iT/N`, `i = 0..=N`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    steps: usize,
    horizon: f64,
}

impl TimeGrid {
    pub const DEFAULT_STEPS: usize = 100;

    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if steps < 2 {
            return Err(invalid(format!("grid needs N >= 2 intervals, got {steps}")));
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(invalid(format!("horizon must be positive, got {horizon}")));
        }
        Ok(Self { steps, horizon })
    }

    /// Number of intervals `N`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn time(&self, node: usize) -> f64 {
        if node == self.steps {
            self.horizon
        } else {
            node as f64 * self.dt()
        }
    }

    pub fn node_count(&self) -> usize {
        self.steps + 1
    }
}

/// `e^{tM}` by scaling and squaring with Padé approximants.
pub fn matrix_exponential(m: &DMatrix<f64>, t: f64) -> Result<DMatrix<f64>> {
    if m.nrows() != m.ncols() {
        return Err(invalid("matrix exponential needs a square matrix"));
    }
    if !t.is_finite() || m.iter().any(|v| !v.is_finite()) {
        return Err(invalid("matrix exponential needs finite entries"));
    }
    if m.is_empty() {
        return Ok(m.clone());
    }
    Ok((m * t).exp())
}

/// Dynamics, grid, and the precomputed one-step maps.
#[derive(Debug, Clone)]
pub struct DiscreteSystem {
    dynamics: LinearDynamics,
    grid: TimeGrid,
    phi: DMatrix<f64>,
    psi: DMatrix<f64>,
}

impl DiscreteSystem {
    pub fn new(dynamics: LinearDynamics, steps: usize) -> Result<Self> {
        let grid = TimeGrid::new(dynamics.horizon(), steps)?;
        let d = dynamics.state_dim();
        let k = dynamics.control_dim();
        let mut aug = DMatrix::zeros(d + k, d + k);
        aug.view_mut((0, 0), (d, d)).copy_from(dynamics.a());
        aug.view_mut((0, d), (d, k)).copy_from(dynamics.b());
        let e = matrix_exponential(&aug, grid.dt())?;
        let phi = e.view((0, 0), (d, d)).into_owned();
        let psi = e.view((0, d), (d, k)).into_owned();
        Ok(Self {
            dynamics,
            grid,
            phi,
            psi,
        })
    }

    pub fn dynamics(&self) -> &LinearDynamics {
        &self.dynamics
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn state_dim(&self) -> usize {
        self.dynamics.state_dim()
    }

    pub fn control_dim(&self) -> usize {
        self.dynamics.control_dim()
    }

    /// `Φ = e^{ΔtA}`
    pub fn phi(&self) -> &DMatrix<f64> {
        &self.phi
    }

    /// `Ψ = ∫₀^{Δt} e^{sA} ds B`
    pub fn psi(&self) -> &DMatrix<f64> {
        &self.psi
    }

    /// One exact step: `out = Φ x + Ψ u`.
    pub fn step(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        mat_vec_acc(&self.phi, x, out);
        mat_vec_acc(&self.psi, u, out);
    }

    /// Same system on a grid with a different number of intervals.
    pub fn with_steps(&self, steps: usize) -> Result<Self> {
        Self::new(self.dynamics.clone(), steps)
    }
}

/// A discretized admissible curve: states on nodes `start..=N`, one control
/// per interval `[t_i, t_{i+1})`.
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    start: usize,
    state_dim: usize,
    control_dim: usize,
    states: Vec<f64>,
    controls: Vec<f64>,
}

impl Path {
    pub fn start_node(&self) -> usize {
        self.start
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn control_dim(&self) -> usize {
        self.control_dim
    }

    /// Number of intervals covered.
    pub fn intervals(&self) -> usize {
        self.controls.len() / self.control_dim
    }

    pub fn end_node(&self) -> usize {
        self.start + self.intervals()
    }

    /// State at absolute node index `node`.
    pub fn state(&self, node: usize) -> &[f64] {
        let i = node - self.start;
        &self.states[i * self.state_dim..(i + 1) * self.state_dim]
    }

    /// Control on interval `[t_node, t_{node+1})`.
    pub fn control(&self, node: usize) -> &[f64] {
        let i = node - self.start;
        &self.controls[i * self.control_dim..(i + 1) * self.control_dim]
    }

    pub fn initial_state(&self) -> &[f64] {
        &self.states[..self.state_dim]
    }

    pub fn final_state(&self) -> &[f64] {
        &self.states[self.states.len() - self.state_dim..]
    }

    pub fn states(&self) -> &[f64] {
        &self.states
    }

    pub fn controls(&self) -> &[f64] {
        &self.controls
    }

    /// `‖u‖_{L²}` for the piecewise-constant control.
    pub fn control_l2(&self, dt: f64) -> f64 {
        (self.controls.iter().map(|u| u * u).sum::<f64>() * dt).sqrt()
    }

    /// `sup_t |γ(t)|` over the nodes.
    pub fn state_sup(&self) -> f64 {
        self.states
            .chunks(self.state_dim)
            .map(norm)
            .fold(0.0, f64::max)
    }

    /// `‖γ̇‖_{L²}` by the trapezoidal rule on each interval, with `γ̇ = Aγ + Bu`
    /// evaluated at both interval ends under that interval's control.
    pub fn velocity_l2(&self, dynamics: &LinearDynamics, dt: f64) -> f64 {
        let mut v = vec![0.0; self.state_dim];
        let mut acc = 0.0;
        for node in self.start..self.end_node() {
            let u = self.control(node);
            dynamics.velocity(self.state(node), u, &mut v);
            let left = v.iter().map(|x| x * x).sum::<f64>();
            dynamics.velocity(self.state(node + 1), u, &mut v);
            let right = v.iter().map(|x| x * x).sum::<f64>();
            acc += 0.5 * dt * (left + right);
        }
        acc.sqrt()
    }

    /// `sup_t |γ̇(t)|` at interval ends.
    pub fn velocity_sup(&self, dynamics: &LinearDynamics) -> f64 {
        let mut v = vec![0.0; self.state_dim];
        let mut best: f64 = 0.0;
        for node in self.start..self.end_node() {
            let u = self.control(node);
            for end in [node, node + 1] {
                dynamics.velocity(self.state(end), u, &mut v);
                best = best.max(norm(&v));
            }
        }
        best
    }

    /// Sup-norm distance between two paths on their common nodes.
    pub fn sup_distance(&self, other: &Path) -> f64 {
        let lo = self.start.max(other.start);
        let hi = self.end_node().min(other.end_node());
        (lo..=hi)
            .map(|n| crate::linalg::dist(self.state(n), other.state(n)))
            .fold(0.0, f64::max)
    }
}

/// Integrates from `x` at node `t0_index` with one control per remaining
/// interval, using the exact step on each interval.
pub fn integrate_path(
    sys: &DiscreteSystem,
    t0_index: usize,
    x: &[f64],
    controls: &[f64],
) -> Result<Path> {
    let n = sys.grid().steps();
    let d = sys.state_dim();
    let k = sys.control_dim();
    if t0_index >= n {
        return Err(invalid(format!(
            "start node {t0_index} must be below N = {n}"
        )));
    }
    if x.len() != d {
        return Err(invalid(format!("state has length {}, expected {d}", x.len())));
    }
    let intervals = n - t0_index;
    if controls.len() != intervals * k {
        return Err(invalid(format!(
            "expected {} control values ({intervals} intervals x {k}), got {}",
            intervals * k,
            controls.len()
        )));
    }
    let mut states = vec![0.0; (intervals + 1) * d];
    states[..d].copy_from_slice(x);
    for i in 0..intervals {
        let (done, rest) = states.split_at_mut((i + 1) * d);
        sys.step(&done[i * d..], &controls[i * k..(i + 1) * k], &mut rest[..d]);
    }
    Ok(Path {
        start: t0_index,
        state_dim: d,
        control_dim: k,
        states,
        controls: controls.to_vec(),
    })
}

/// The uncontrolled ensemble `x ↦ e^{tA}x` pushed forward by `m0`.
pub fn reference_ensemble(sys: &DiscreteSystem, m0: &ParticleMeasure) -> Result<TrajectoryEnsemble> {
    if m0.dim() != sys.state_dim() {
        return Err(invalid(format!(
            "initial measure lives in R^{}, dynamics in R^{}",
            m0.dim(),
            sys.state_dim()
        )));
    }
    let zeros = vec![0.0; sys.grid().steps() * sys.control_dim()];
    let paths = (0..m0.len())
        .map(|j| integrate_path(sys, 0, m0.point(j), &zeros))
        .collect::<Result<Vec<_>>>()?;
    TrajectoryEnsemble::new(*sys.grid(), paths, m0.weights().to_vec())
}

/// `(‖A‖e^{T‖A‖})^α [m₀]_α`, the velocity-moment bound of the reference ensemble.
pub fn reference_moment_bound(dynamics: &LinearDynamics, m0: &ParticleMeasure, alpha: f64) -> Result<f64> {
    let a = dynamics.a_norm();
    Ok((a * (dynamics.horizon() * a).exp()).powf(alpha) * m0.moment_alpha(alpha)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn power_series(m: &DMatrix<f64>, t: f64, terms: usize) -> DMatrix<f64> {
        let n = m.nrows();
        let mut acc = DMatrix::identity(n, n);
        let mut term = DMatrix::identity(n, n);
        for j in 1..terms {
            term = &term * m * (t / j as f64);
            acc += &term;
        }
        acc
    }

    #[test]
    fn exponential_of_zero_is_identity() {
        let e = matrix_exponential(&DMatrix::zeros(3, 3), 1.0).unwrap();
        assert_eq!(e, DMatrix::identity(3, 3));
    }

    #[test]
    fn exponential_of_nilpotent_matches_truncated_series() {
        let m = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        for &t in &[0.0, 0.3, 1.0, 2.5] {
            let e = matrix_exponential(&m, t).unwrap();
            let oracle = power_series(&m, t, 3);
            assert_abs_diff_eq!(e, oracle, epsilon = 1e-14);
            assert_abs_diff_eq!(e[(0, 1)], t, epsilon = 1e-14);
        }
    }

    #[test]
    fn exponential_of_diagonal() {
        let a = [0.5, -1.2, 2.0];
        let m = DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(&a));
        let e = matrix_exponential(&m, 0.7).unwrap();
        for i in 0..3 {
            let exact = (0.7 * a[i]).exp();
            assert!((e[(i, i)] - exact).abs() <= 1e-12 * exact);
        }
    }

    #[test]
    fn exponential_rejects_non_finite() {
        let m = DMatrix::from_row_slice(1, 1, &[f64::NAN]);
        assert!(matrix_exponential(&m, 1.0).is_err());
        assert!(matrix_exponential(&DMatrix::zeros(1, 1), f64::INFINITY).is_err());
    }

    #[test]
    fn step_maps_for_double_integrator() {
        let dynamics = LinearDynamics::from_rows(
            &[vec![0.0, 1.0], vec![0.0, 0.0]],
            &[vec![0.0], vec![1.0]],
            1.0,
        )
        .unwrap();
        let sys = DiscreteSystem::new(dynamics, 10).unwrap();
        let dt = 0.1;
        assert_abs_diff_eq!(sys.psi()[(0, 0)], dt * dt / 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(sys.psi()[(1, 0)], dt, epsilon = 1e-15);
    }

    #[test]
    fn integrator_with_zero_drift_sums_controls() {
        let dynamics = LinearDynamics::from_rows(&[vec![0.0]], &[vec![1.0]], 1.0).unwrap();
        let sys = DiscreteSystem::new(dynamics, 8).unwrap();
        let path = integrate_path(&sys, 2, &[0.4], &[0.5; 6]).unwrap();
        for node in 2..=8 {
            let t = sys.grid().time(node);
            assert_abs_diff_eq!(path.state(node)[0], 0.4 + (t - 0.25) * 0.5, epsilon = 1e-14);
        }
    }

    #[test]
    fn double_integrator_closed_form() {
        let dynamics = LinearDynamics::from_rows(
            &[vec![0.0, 1.0], vec![0.0, 0.0]],
            &[vec![0.0], vec![1.0]],
            1.0,
        )
        .unwrap();
        let sys = DiscreteSystem::new(dynamics, 20).unwrap();
        let path = integrate_path(&sys, 0, &[0.0, 0.0], &[1.0; 20]).unwrap();
        for node in 0..=20 {
            let t = sys.grid().time(node);
            assert_abs_diff_eq!(path.state(node)[0], t * t / 2.0, epsilon = 1e-13);
            assert_abs_diff_eq!(path.state(node)[1], t, epsilon = 1e-13);
        }
    }

    #[test]
    fn homogeneous_solution_follows_exponential() {
        let dynamics =
            LinearDynamics::from_rows(&[vec![-0.3, 1.0], vec![-1.0, 0.2]], &[vec![1.0], vec![0.0]], 2.0)
                .unwrap();
        let sys = DiscreteSystem::new(dynamics.clone(), 16).unwrap();
        let x = [1.0, -0.5];
        let path = integrate_path(&sys, 4, &x, &[0.0; 12]).unwrap();
        for node in 4..=16 {
            let tau = sys.grid().time(node) - sys.grid().time(4);
            let e = matrix_exponential(dynamics.a(), tau).unwrap();
            let exact = &e * nalgebra::DVector::from_row_slice(&x);
            assert_abs_diff_eq!(path.state(node)[0], exact[0], epsilon = 1e-12);
            assert_abs_diff_eq!(path.state(node)[1], exact[1], epsilon = 1e-12);
        }
    }

    #[test]
    fn integrate_rejects_bad_lengths() {
        let dynamics = LinearDynamics::from_rows(&[vec![0.0]], &[vec![1.0]], 1.0).unwrap();
        let sys = DiscreteSystem::new(dynamics, 4).unwrap();
        assert!(integrate_path(&sys, 0, &[0.0], &[0.0; 3]).is_err());
        assert!(integrate_path(&sys, 4, &[0.0], &[]).is_err());
        assert!(integrate_path(&sys, 0, &[0.0, 1.0], &[0.0; 4]).is_err());
    }

    #[test]
    fn dynamics_validation() {
        assert!(LinearDynamics::from_rows(&[vec![0.0, 1.0]], &[vec![1.0]], 1.0).is_err());
        assert!(LinearDynamics::from_rows(&[vec![0.0]], &[vec![1.0]], 0.0).is_err());
        assert!(LinearDynamics::from_rows(&[vec![0.0]], &[vec![1.0], vec![2.0]], 1.0).is_err());
        assert!(TimeGrid::new(1.0, 1).is_err());
    }

    fn small_matrix(n: usize) -> impl Strategy<Value = DMatrix<f64>> {
        proptest::collection::vec(-1.0f64..1.0, n * n).prop_map(move |v| DMatrix::from_row_slice(n, n, &v))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn exponential_is_a_semigroup(m in small_matrix(3), s in 0.0f64..1.0, t in 0.0f64..1.0) {
            let lhs = matrix_exponential(&m, s + t).unwrap();
            let rhs = matrix_exponential(&m, s).unwrap() * matrix_exponential(&m, t).unwrap();
            prop_assert!((&lhs - &rhs).amax() <= 1e-12 * (1.0 + lhs.amax()));
        }

        #[test]
        fn exponential_matches_series(m in small_matrix(4), t in 0.0f64..1.0) {
            let e = matrix_exponential(&m, t).unwrap();
            prop_assert!((&e - power_series(&m, t, 40)).amax() <= 1e-12 * (1.0 + e.amax()));
        }

        #[test]
        fn refinement_keeps_piecewise_constant_solutions(
            a in small_matrix(2),
            b in proptest::collection::vec(-1.0f64..1.0, 2),
            us in proptest::collection::vec(-2.0f64..2.0, 6),
            x in proptest::collection::vec(-1.0f64..1.0, 2),
        ) {
            let dy = LinearDynamics::new(a, DMatrix::from_column_slice(2, 1, &b), 1.5).unwrap();
            let coarse = DiscreteSystem::new(dy.clone(), 6).unwrap();
            let fine = coarse.with_steps(12).unwrap();
            let fine_us: Vec<f64> = us.iter().flat_map(|&u| [u, u]).collect();
            let pc = integrate_path(&coarse, 0, &x, &us).unwrap();
            let pf = integrate_path(&fine, 0, &x, &fine_us).unwrap();
            for i in 0..=6 {
                for (p, q) in pc.state(i).iter().zip(pf.state(2 * i)) {
                    prop_assert!((p - q).abs() <= 1e-12 * (1.0 + p.abs()));
                }
            }
        }
    }
}
