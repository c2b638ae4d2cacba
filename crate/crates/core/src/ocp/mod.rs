//! Best response of a single agent against a frozen flow of measures.
//!
//! The discrete problem minimizes
//!
//! ```text
//! J(u) = Σ_{i ≥ i₀} Δt L(x_i, u_i, m_{t_i}) + G(x_N, m_T),   x_{i+1} = Φx_i + Ψu_i
//! ```
//!
//! over the stacked controls by L-BFGS, with gradients from the discrete
//! adjoint `λ_N = D_xG`, `λ_i = Δt D_xL_i + Φᵀλ_{i+1}`,
//! `∂J/∂u_i = Δt D_uℓ_i + Ψᵀλ_{i+1}`.

mod bounds;
mod lbfgs;

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use bounds::{apriori_bounds, AprioriBounds, BoundRatios, VelocityReading};

use crate::dynamics::{integrate_path, DiscreteSystem, Path, TimeGrid};
use crate::error::{invalid, Error, Result};
use crate::hamiltonian::{
    lagrangian, lagrangian_grad_x, maximize_pseudo_hamiltonian, LagrangianModel,
};
use crate::linalg::{mat_t_vec_acc, mix_seed, norm, point_bits};
use crate::measures::FlowOfMeasures;

/// Solver settings for [`solve_best_response`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OcpOptions {
    /// Number of starts: zero control, adjoint sweep, then random.
    pub multistart: usize,
    pub seed: u64,
    /// Gradient tolerance factor, `‖∇J‖ ≤ grad_tol·(1 + |J|)`.
    pub grad_tol: f64,
    pub max_iter: usize,
    pub memory: usize,
}

impl Default for OcpOptions {
    fn default() -> Self {
        Self {
            multistart: 3,
            seed: 0,
            grad_tol: 1e-8,
            max_iter: 1000,
            memory: 10,
        }
    }
}

/// A discrete best response with its adjoint.
#[derive(Debug, Clone, PartialEq)]
pub struct OcpSolution {
    pub path: Path,
    pub cost: f64,
    /// `λ_i` for nodes `i₀..=N`, row-major.
    pub adjoint: Vec<f64>,
    pub pmp_residual: f64,
    pub grad_norm: f64,
    pub iterations: usize,
}

impl OcpSolution {
    pub fn controls(&self) -> &[f64] {
        self.path.controls()
    }

    /// `λ` at absolute node index `node`.
    pub fn adjoint_at(&self, node: usize) -> &[f64] {
        let d = self.path.state_dim();
        let i = node - self.path.start_node();
        &self.adjoint[i * d..(i + 1) * d]
    }
}

pub(crate) fn check_problem(
    sys: &DiscreteSystem,
    model: &dyn LagrangianModel,
    flow: &FlowOfMeasures,
) -> Result<()> {
    if model.state_dim() != sys.state_dim() || model.control_dim() != sys.control_dim() {
        return Err(Error::InvalidModel(format!(
            "model is defined for (d, k) = ({}, {}), dynamics for ({}, {})",
            model.state_dim(),
            model.control_dim(),
            sys.state_dim(),
            sys.control_dim()
        )));
    }
    if flow.grid() != sys.grid() {
        return Err(invalid("flow and dynamics use different grids"));
    }
    if flow.dim() != sys.state_dim() {
        return Err(invalid("flow lives in a different dimension than the dynamics"));
    }
    Ok(())
}

/// Cost, path, adjoint and gradient for given controls.
pub(crate) struct Evaluation {
    pub cost: f64,
    pub path: Path,
    pub adjoint: Vec<f64>,
    pub grad: Vec<f64>,
}

pub(crate) fn evaluate(
    sys: &DiscreteSystem,
    model: &dyn LagrangianModel,
    flow: &FlowOfMeasures,
    i0: usize,
    x: &[f64],
    controls: &[f64],
) -> Result<Evaluation> {
    let n = sys.grid().steps();
    let (d, k) = (sys.state_dim(), sys.control_dim());
    let dt = sys.grid().dt();
    let path = integrate_path(sys, i0, x, controls)?;
    let mut cost = 0.0;
    for i in i0..n {
        cost += dt * lagrangian(model, path.state(i), path.control(i), flow.snapshot(i));
    }
    cost += model.terminal(path.state(n), flow.snapshot(n));
    if !cost.is_finite() {
        return Err(Error::InvalidModel(format!(
            "cost is not finite from node {i0} at x = {x:?}"
        )));
    }
    let len = n - i0 + 1;
    let mut adjoint = vec![0.0; len * d];
    model.terminal_grad_x(path.state(n), flow.snapshot(n), &mut adjoint[(len - 1) * d..]);
    let mut grad = vec![0.0; (n - i0) * k];
    let mut lx = vec![0.0; d];
    for i in (i0..n).rev() {
        let r = i - i0;
        let (head, tail) = adjoint.split_at_mut((r + 1) * d);
        let next = &tail[..d];
        let g = &mut grad[r * k..(r + 1) * k];
        model.running_grad_u(path.state(i), path.control(i), g);
        g.iter_mut().for_each(|v| *v *= dt);
        mat_t_vec_acc(sys.psi(), next, g);
        let cur = &mut head[r * d..];
        lagrangian_grad_x(model, path.state(i), path.control(i), flow.snapshot(i), &mut lx);
        for (c, l) in cur.iter_mut().zip(&lx) {
            *c = dt * l;
        }
        mat_t_vec_acc(sys.phi(), next, cur);
    }
    if grad.iter().chain(&adjoint).any(|v| !v.is_finite()) {
        return Err(Error::InvalidModel("model derivatives are not finite".into()));
    }
    Ok(Evaluation {
        cost,
        path,
        adjoint,
        grad,
    })
}

/// Discrete cost `J` for the given controls.
pub fn discrete_cost(
    sys: &DiscreteSystem,
    model: &dyn LagrangianModel,
    flow: &FlowOfMeasures,
    i0: usize,
    x: &[f64],
    controls: &[f64],
) -> Result<f64> {
    check_problem(sys, model, flow)?;
    Ok(evaluate(sys, model, flow, i0, x, controls)?.cost)
}

/// Packages given controls as a solution, including adjoint and residual.
pub fn evaluate_controls(
    sys: &DiscreteSystem,
    model: &dyn LagrangianModel,
    flow: &FlowOfMeasures,
    i0: usize,
    x: &[f64],
    controls: &[f64],
) -> Result<OcpSolution> {
    check_problem(sys, model, flow)?;
    let ev = evaluate(sys, model, flow, i0, x, controls)?;
    let mut sol = OcpSolution {
        grad_norm: norm(&ev.grad),
        path: ev.path,
        cost: ev.cost,
        adjoint: ev.adjoint,
        pmp_residual: 0.0,
        iterations: 0,
    };
    sol.pmp_residual = pmp_residual(sys, model, flow, &sol)?;
    Ok(sol)
}

/// Controls `u_i = argmax` of the discrete pseudo-Hamiltonian along the
/// zero-control path, using that path's adjoint.
fn adjoint_sweep_start(
    sys: &DiscreteSystem,
    model: &dyn LagrangianModel,
    flow: &FlowOfMeasures,
    i0: usize,
    x: &[f64],
) -> Result<Vec<f64>> {
    let n = sys.grid().steps();
    let k = sys.control_dim();
    let zeros = vec![0.0; (n - i0) * k];
    let ev = evaluate(sys, model, flow, i0, x, &zeros)?;
    let (a_bar, b_bar) = discrete_drift(sys);
    let d = sys.state_dim();
    let mut out = Vec::with_capacity(zeros.len());
    for i in i0..n {
        let r = i - i0;
        let p = &ev.adjoint[(r + 1) * d..(r + 2) * d];
        let hv = maximize_pseudo_hamiltonian(&a_bar, &b_bar, model, ev.path.state(i), p, flow.snapshot(i))?;
        out.extend_from_slice(&hv.u_star);
    }
    Ok(out)
}

fn random_start(opts: &OcpOptions, i0: usize, x: &[f64], len: usize, which: u64) -> Vec<f64> {
    let mut parts = vec![i0 as u64, which];
    parts.extend(point_bits(x));
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(opts.seed, &parts));
    let scale = 1.0 + norm(x);
    (0..len).map(|_| scale * rng.random_range(-1.0..=1.0)).collect()
}

/// `Ā = (Φ − I)/Δt`, `B̄ = Ψ/Δt`: the drift whose forward Euler step is
/// the exact one-step map.
pub(crate) fn discrete_drift(sys: &DiscreteSystem) -> (DMatrix<f64>, DMatrix<f64>) {
    let dt = sys.grid().dt();
    let d = sys.state_dim();
    let a = (sys.phi() - DMatrix::identity(d, d)) / dt;
    let b = sys.psi() / dt;
    (a, b)
}

/// Minimizes the discrete cost from `(t_{i₀}, x)`.
///
/// Runs L-BFGS from each start and keeps the lowest cost; costs within a
/// relative `1e-12` are broken by the smaller `‖u‖₂`. A supplied `init` is
/// tried in addition to the configured starts.
pub fn solve_best_response(
    sys: &DiscreteSystem,
    model: &dyn LagrangianModel,
    flow: &FlowOfMeasures,
    i0: usize,
    x: &[f64],
    init: Option<&[f64]>,
    opts: &OcpOptions,
) -> Result<OcpSolution> {
    check_problem(sys, model, flow)?;
    let n = sys.grid().steps();
    if i0 >= n {
        return Err(invalid(format!("start node {i0} must be below N = {n}")));
    }
    if x.len() != sys.state_dim() {
        return Err(invalid("initial state has wrong dimension"));
    }
    let len = (n - i0) * sys.control_dim();
    let mut starts: Vec<Vec<f64>> = Vec::new();
    if let Some(u) = init {
        if u.len() != len {
            return Err(invalid(format!(
                "warm start has {} values, expected {len}",
                u.len()
            )));
        }
        starts.push(u.to_vec());
    }
    for s in 0..opts.multistart.max(1) {
        starts.push(match s {
            0 => vec![0.0; len],
            1 => adjoint_sweep_start(sys, model, flow, i0, x)?,
            _ => random_start(opts, i0, x, len, s as u64),
        });
    }
    let lopts = lbfgs::LbfgsOptions {
        memory: opts.memory,
        max_iter: opts.max_iter,
        grad_tol: opts.grad_tol,
        initial_scale: 1.0 / sys.grid().dt(),
    };
    let mut best: Option<(lbfgs::LbfgsResult, f64)> = None;
    let mut total_iter = 0;
    let mut last_err = None;
    for u0 in starts {
        let run = lbfgs::minimize(
            |u| {
                let ev = evaluate(sys, model, flow, i0, x, u)?;
                Ok((ev.cost, ev.grad))
            },
            u0,
            lopts,
        );
        let res = match run {
            Ok(r) => r,
            Err(e @ Error::InvalidModel(_)) => return Err(e),
            Err(e) => {
                last_err = Some(e);
                continue;
            }
        };
        total_iter += res.iterations;
        let unorm = norm(&res.x);
        let better = match &best {
            None => true,
            Some((b, bn)) => {
                let tie = (res.f - b.f).abs() <= 1e-12 * (1.0 + b.f.abs());
                if tie {
                    unorm < *bn
                } else {
                    res.f < b.f
                }
            }
        };
        if better {
            best = Some((res, unorm));
        }
    }
    let Some((res, _)) = best else {
        return Err(last_err.unwrap_or_else(|| invalid("no solver start")));
    };
    let mut sol = evaluate_controls(sys, model, flow, i0, x, &res.x)?;
    sol.iterations = total_iter;
    Ok(sol)
}

/// Largest violation of the discrete Pontryagin system along `sol`:
///
/// `|Δγ/Δt + D_pH̄(γ_i, λ_{i+1})| + |Δλ/Δt − D_xH̄(γ_i, λ_{i+1})| + |u_i − u*_i|`,
///
/// where `H̄` uses the drift `(Ā, B̄)` whose Euler step is exact. All three
/// terms vanish at a stationary point of the discrete cost.
pub fn pmp_residual(
    sys: &DiscreteSystem,
    model: &dyn LagrangianModel,
    flow: &FlowOfMeasures,
    sol: &OcpSolution,
) -> Result<f64> {
    check_problem(sys, model, flow)?;
    let (a_bar, b_bar) = discrete_drift(sys);
    let dt = sys.grid().dt();
    let d = sys.state_dim();
    let path = &sol.path;
    let mut worst: f64 = 0.0;
    for i in path.start_node()..path.end_node() {
        let x = path.state(i);
        let p_next = sol.adjoint_at(i + 1);
        let p_cur = sol.adjoint_at(i);
        let g = crate::hamiltonian::pseudo_hamiltonian_grad(
            &a_bar,
            &b_bar,
            model,
            x,
            p_next,
            flow.snapshot(i),
        )?;
        let x_next = path.state(i + 1);
        let mut r1 = vec![0.0; d];
        let mut r2 = vec![0.0; d];
        for j in 0..d {
            r1[j] = (x_next[j] - x[j]) / dt + g.dp[j];
            r2[j] = (p_next[j] - p_cur[j]) / dt - g.dx[j];
        }
        let r3: Vec<f64> = path.control(i).iter().zip(&g.u_star).map(|(a, b)| a - b).collect();
        worst = worst.max(norm(&r1) + norm(&r2) + norm(&r3));
    }
    Ok(worst)
}

/// Source of value-function evaluations on grid nodes.
pub trait ValueOracle: Sync {
    fn grid(&self) -> &TimeGrid;
    fn value(&self, node: usize, x: &[f64]) -> Result<f64>;
}

/// Memoized value function `V(t_i, x)` against a frozen flow.
pub struct ValueProbe {
    sys: DiscreteSystem,
    model: Arc<dyn LagrangianModel>,
    flow: Arc<FlowOfMeasures>,
    opts: OcpOptions,
    cache: Mutex<HashMap<(usize, Vec<u64>), f64>>,
}

impl std::fmt::Debug for ValueProbe {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ValueProbe")
            .field("grid", self.sys.grid())
            .field("opts", &self.opts)
            .field("cached", &self.cache_len())
            .finish()
    }
}

impl ValueProbe {
    pub fn new(
        sys: DiscreteSystem,
        model: Arc<dyn LagrangianModel>,
        flow: Arc<FlowOfMeasures>,
        opts: OcpOptions,
    ) -> Result<Self> {
        check_problem(&sys, model.as_ref(), &flow)?;
        Ok(Self {
            sys,
            model,
            flow,
            opts,
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn system(&self) -> &DiscreteSystem {
        &self.sys
    }

    pub fn model(&self) -> &dyn LagrangianModel {
        self.model.as_ref()
    }

    pub fn model_arc(&self) -> Arc<dyn LagrangianModel> {
        Arc::clone(&self.model)
    }

    pub fn flow(&self) -> &FlowOfMeasures {
        &self.flow
    }

    pub fn options(&self) -> &OcpOptions {
        &self.opts
    }

    pub fn cache_len(&self) -> usize {
        self.cache.lock().map(|c| c.len()).unwrap_or(0)
    }

    /// A fresh best-response solve from `(t_node, x)`; records its cost.
    pub fn solve(&self, node: usize, x: &[f64]) -> Result<OcpSolution> {
        let sol = solve_best_response(
            &self.sys,
            self.model.as_ref(),
            &self.flow,
            node,
            x,
            None,
            &self.opts,
        )?;
        if let Ok(mut c) = self.cache.lock() {
            c.insert((node, point_bits(x)), sol.cost);
        }
        Ok(sol)
    }
}

impl ValueOracle for ValueProbe {
    fn grid(&self) -> &TimeGrid {
        self.sys.grid()
    }

    /// `V(t_node, x)`; exact `G(x, m_T)` at the terminal node.
    fn value(&self, node: usize, x: &[f64]) -> Result<f64> {
        let n = self.sys.grid().steps();
        if node > n {
            return Err(invalid(format!("node {node} outside 0..={n}")));
        }
        if x.len() != self.sys.state_dim() {
            return Err(invalid("probe point has wrong dimension"));
        }
        if node == n {
            return Ok(self.model.terminal(x, self.flow.snapshot(n)));
        }
        let key = (node, point_bits(x));
        if let Some(v) = self.cache.lock().ok().and_then(|c| c.get(&key).copied()) {
            return Ok(v);
        }
        Ok(self.solve(node, x)?.cost)
    }
}

/// `|V(t_i, x) − V(t_j, γ*(t_j)) − Σ_{i≤l<j} Δt L(γ*_l, u*_l, m_l)|`.
pub fn dpp_residual(probe: &ValueProbe, i: usize, j: usize, x: &[f64]) -> Result<f64> {
    let n = probe.system().grid().steps();
    if i > j || j > n || i >= n {
        return Err(invalid(format!("need i <= j <= N with i < N, got ({i}, {j})")));
    }
    if i == j {
        return Ok(0.0);
    }
    let sol = probe.solve(i, x)?;
    let dt = probe.system().grid().dt();
    let mut running = 0.0;
    for l in i..j {
        running += dt
            * lagrangian(
                probe.model(),
                sol.path.state(l),
                sol.path.control(l),
                probe.flow().snapshot(l),
            );
    }
    let tail = probe.value(j, sol.path.state(j))?;
    Ok((sol.cost - tail - running).abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::LinearDynamics;
    use crate::hamiltonian::{Coupling, QuadraticModel};
    use crate::measures::ParticleMeasure;
    use proptest::prelude::*;

    pub(crate) fn lq(steps: usize) -> (DiscreteSystem, QuadraticModel, FlowOfMeasures) {
        let dy = LinearDynamics::from_rows(&[vec![0.0]], &[vec![1.0]], 1.0).unwrap();
        let sys = DiscreteSystem::new(dy, steps).unwrap();
        let model = QuadraticModel::control_energy(1, 1)
            .with_terminal_weight(DMatrix::identity(1, 1))
            .unwrap();
        let flow = FlowOfMeasures::constant(*sys.grid(), ParticleMeasure::dirac(&[0.0]).unwrap());
        (sys, model, flow)
    }

    #[test]
    fn lq_benchmark_closed_form() {
        let (sys, model, flow) = lq(50);
        let sol = solve_best_response(&sys, &model, &flow, 0, &[1.0], None, &OcpOptions::default()).unwrap();
        assert!((sol.cost - 0.25).abs() < 1e-10);
        assert!(sol.controls().iter().all(|u| (u + 0.5).abs() < 1e-7));
        assert!((sol.path.final_state()[0] - 0.5).abs() < 1e-8);
        assert!(sol.adjoint.iter().all(|p| (p - 0.5).abs() < 1e-8));
        assert!(sol.pmp_residual < 1e-6);
    }

    #[test]
    fn lq_value_from_interior_node() {
        let (sys, model, flow) = lq(40);
        for (i0, x) in [(10usize, 0.7), (30, -1.3)] {
            let sol = solve_best_response(&sys, &model, &flow, i0, &[x], None, &OcpOptions::default()).unwrap();
            let t = sys.grid().time(i0);
            assert!((sol.cost - x * x / (2.0 * (2.0 - t))).abs() < 1e-9);
            let u = -x / (2.0 - t);
            assert!(sol.controls().iter().all(|v| (v - u).abs() < 1e-6));
        }
    }

    #[test]
    fn doing_nothing_is_optimal_without_costs() {
        let dy = LinearDynamics::from_rows(&[vec![0.3]], &[vec![1.0]], 1.0).unwrap();
        let sys = DiscreteSystem::new(dy, 20).unwrap();
        let model = QuadraticModel::control_energy(1, 1);
        let flow = FlowOfMeasures::constant(*sys.grid(), ParticleMeasure::dirac(&[0.0]).unwrap());
        let sol = solve_best_response(&sys, &model, &flow, 0, &[2.0], None, &OcpOptions::default()).unwrap();
        assert_eq!(sol.cost, 0.0);
        assert!(sol.controls().iter().all(|u| *u == 0.0));
        assert!(sol.pmp_residual < 1e-12);
    }

    #[test]
    fn symmetric_start_stays_at_rest() {
        let (sys, model, flow) = lq(20);
        let sol = solve_best_response(&sys, &model, &flow, 0, &[0.0], None, &OcpOptions::default()).unwrap();
        assert_eq!(sol.cost, 0.0);
        assert!(sol.controls().iter().all(|u| *u == 0.0));
    }

    #[test]
    fn perturbed_controls_violate_pmp() {
        let (sys, model, flow) = lq(50);
        let sol = solve_best_response(&sys, &model, &flow, 0, &[1.0], None, &OcpOptions::default()).unwrap();
        let bumped: Vec<f64> = sol.controls().iter().map(|u| u + 0.1).collect();
        let bad = evaluate_controls(&sys, &model, &flow, 0, &[1.0], &bumped).unwrap();
        // Final state 0.6, so λ ≡ 0.6 and u* = −0.6 against u = −0.4: the
        // state equation and the maximum condition each miss by 0.2.
        assert!(bad.pmp_residual >= 0.05);
        assert!((bad.pmp_residual - 0.4).abs() < 1e-9);
    }

    #[test]
    fn value_probe_terminal_and_cache() {
        let (sys, model, flow) = lq(20);
        let probe = ValueProbe::new(sys, Arc::new(model), Arc::new(flow), OcpOptions::default()).unwrap();
        assert_eq!(probe.value(20, &[3.0]).unwrap(), 4.5);
        let v = probe.value(4, &[1.0]).unwrap();
        let again = probe.value(4, &[1.0]).unwrap();
        assert_eq!(v, again);
        let fresh = probe.solve(4, &[1.0]).unwrap().cost;
        assert!((fresh - v).abs() <= 1e-9);
        assert!((v - 1.0 / (2.0 * (2.0 - 0.2))).abs() < 1e-9);
    }

    #[test]
    fn dpp_identities() {
        let (sys, model, flow) = lq(40);
        let probe = ValueProbe::new(sys, Arc::new(model), Arc::new(flow), OcpOptions::default()).unwrap();
        assert_eq!(dpp_residual(&probe, 5, 5, &[1.0]).unwrap(), 0.0);
        assert!(dpp_residual(&probe, 0, 20, &[1.0]).unwrap() < 1e-8);
        assert!(dpp_residual(&probe, 0, 40, &[1.0]).unwrap() < 1e-12);
    }

    #[test]
    fn warm_start_length_is_checked() {
        let (sys, model, flow) = lq(10);
        let r = solve_best_response(&sys, &model, &flow, 0, &[1.0], Some(&[0.0; 3]), &OcpOptions::default());
        assert!(r.is_err());
    }

    #[test]
    fn value_refinement_is_first_order_with_state_cost() {
        // With a running state cost the piecewise-constant discretization
        // has an O(Δt) value error; fit the log-log slope over N = 10..80
        // against a fine-grid reference.
        let dy = LinearDynamics::from_rows(&[vec![0.0]], &[vec![1.0]], 1.0).unwrap();
        let model = QuadraticModel::control_energy(1, 1)
            .with_state_weight(DMatrix::identity(1, 1))
            .unwrap()
            .with_terminal_weight(DMatrix::identity(1, 1))
            .unwrap();
        let value = |n: usize| {
            let sys = DiscreteSystem::new(dy.clone(), n).unwrap();
            let flow = FlowOfMeasures::constant(*sys.grid(), ParticleMeasure::dirac(&[0.0]).unwrap());
            solve_best_response(&sys, &model, &flow, 0, &[1.0], None, &OcpOptions::default())
                .unwrap()
                .cost
        };
        // Riccati: V = x²P(t)/2 with P' = P² − 1, P(T) = 1, so P ≡ 1 and V = ½.
        let exact = 0.5;
        let ns = [10usize, 20, 40, 80];
        let errs: Vec<f64> = ns.iter().map(|&n| (value(n) - exact).abs()).collect();
        let xs: Vec<f64> = ns.iter().map(|&n| (1.0 / n as f64).ln()).collect();
        let ys: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
        let mx = xs.iter().sum::<f64>() / 4.0;
        let my = ys.iter().sum::<f64>() / 4.0;
        let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
            / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
        assert!((slope - 1.0).abs() <= 0.3, "slope {slope}, errors {errs:?}");
    }

    fn random_instance(seed: u64) -> (DiscreteSystem, QuadraticModel, FlowOfMeasures, Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut r = || rand::Rng::random_range(&mut rng, -1.0..1.0);
        let dy = LinearDynamics::from_rows(
            &[vec![r(), r()], vec![r(), r()]],
            &[vec![r()], vec![1.0 + r().abs()]],
            1.0,
        )
        .unwrap();
        let sys = DiscreteSystem::new(dy, 12).unwrap();
        let q = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5]);
        let model = QuadraticModel::new(
            DMatrix::from_element(1, 1, 1.5),
            DMatrix::from_row_slice(1, 2, &[r() * 0.3, r() * 0.3]),
            q.clone(),
            q,
            Coupling::Convolution { strength: 0.8, width: 0.6 },
            Coupling::MeanField { strength: 0.4 },
        )
        .unwrap();
        let snaps: Vec<ParticleMeasure> = (0..=12)
            .map(|i| {
                let s = i as f64 / 12.0;
                ParticleMeasure::uniform(2, vec![s, -s, 0.5 - s, 0.3]).unwrap()
            })
            .collect();
        let flow = FlowOfMeasures::new(*sys.grid(), snaps).unwrap();
        let x = vec![r(), r()];
        let u: Vec<f64> = (0..12).map(|_| r()).collect();
        (sys, model, flow, x, u)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn adjoint_gradient_matches_finite_differences(seed in any::<u64>(), i0 in 0usize..6) {
            let (sys, model, flow, x, u) = random_instance(seed);
            let u = &u[i0..];
            let ev = evaluate(&sys, &model, &flow, i0, &x, u).unwrap();
            let h = 1e-6;
            for j in 0..u.len() {
                let mut up = u.to_vec();
                let mut um = u.to_vec();
                up[j] += h;
                um[j] -= h;
                let fd = (evaluate(&sys, &model, &flow, i0, &x, &up).unwrap().cost
                    - evaluate(&sys, &model, &flow, i0, &x, &um).unwrap().cost)
                    / (2.0 * h);
                prop_assert!((fd - ev.grad[j]).abs() <= 1e-5 * (1.0 + fd.abs()), "{} vs {}", fd, ev.grad[j]);
            }
        }

        #[test]
        fn solutions_are_stationary_and_pmp_consistent(seed in any::<u64>()) {
            let (sys, model, flow, x, _) = random_instance(seed);
            let sol = solve_best_response(&sys, &model, &flow, 0, &x, None, &OcpOptions::default()).unwrap();
            prop_assert!(sol.grad_norm <= 1e-6 * (1.0 + sol.cost.abs()));
            prop_assert!(sol.pmp_residual <= 1e-5, "{}", sol.pmp_residual);
        }
    }
}
