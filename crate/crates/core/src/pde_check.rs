//! Residual checks of the coupled Hamilton-Jacobi / continuity system.
//!
//! A computed equilibrium gives a flow `m` and a value function `V` (through
//! a [`ValueProbe`]). The checks here test the continuity equation against
//! bump functions, the HJB equation pointwise at differentiability points,
//! monotonicity of the couplings, uniqueness across initializations, and
//! reconstruction of the equilibrium paths from the feedback `−D_pH(x, D_xV)`.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::dynamics::{DiscreteSystem, LinearDynamics, TimeGrid};
use crate::equilibrium::{fictitious_play, EquilibriumConfig, EquilibriumReport, Initialization};
use crate::error::{invalid, Result};
use crate::hamiltonian::{hamiltonian_grad, legendre_hamiltonian, LagrangianModel};
use crate::linalg::{dot, norm};
use crate::measures::{disintegrate, FlowOfMeasures, ParticleMeasure, TrajectoryEnsemble};
use crate::ocp::{ValueOracle, ValueProbe};

/// `φ(t, x) = χ(t) ψ(x)` with a compactly supported spatial bump `ψ` and a
/// smooth time cutoff `χ` that equals 1 before `t_start` and 0 after `t_end`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestFunction {
    pub center: Vec<f64>,
    pub radius: f64,
    pub t_start: f64,
    pub t_end: f64,
}

fn bump_step(s: f64) -> f64 {
    if s > 0.0 {
        (-1.0 / s).exp()
    } else {
        0.0
    }
}

fn bump_step_prime(s: f64) -> f64 {
    if s > 0.0 {
        bump_step(s) / (s * s)
    } else {
        0.0
    }
}

impl TestFunction {
    pub fn new(center: Vec<f64>, radius: f64, t_start: f64, t_end: f64) -> Result<Self> {
        if !(radius > 0.0) || center.iter().any(|c| !c.is_finite()) {
            return Err(invalid("test function needs a finite center and positive radius"));
        }
        if !(0.0 < t_start && t_start < t_end) {
            return Err(invalid(format!("need 0 < t_start < t_end, got {t_start}, {t_end}")));
        }
        Ok(Self {
            center,
            radius,
            t_start,
            t_end,
        })
    }

    /// `count` bumps with centers in the box `[lo, hi]` and cutoffs before
    /// `horizon`.
    pub fn battery(lo: &[f64], hi: &[f64], horizon: f64, count: usize, seed: u64) -> Result<Vec<Self>> {
        if lo.len() != hi.len() || lo.iter().zip(hi).any(|(l, h)| !(l <= h)) {
            return Err(invalid("battery box needs lo <= hi in every coordinate"));
        }
        let side = lo.iter().zip(hi).map(|(l, h)| h - l).fold(0.0f64, f64::max).max(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                let center = lo.iter().zip(hi).map(|(&l, &h)| rng.random_range(l..=h)).collect();
                let radius = side * rng.random_range(0.25..=0.6);
                let t_start = horizon * rng.random_range(0.3..=0.6);
                let t_end = t_start + horizon * rng.random_range(0.1..=0.3);
                Self::new(center, radius, t_start, t_end)
            })
            .collect()
    }

    fn cutoff(&self, t: f64) -> (f64, f64) {
        let width = self.t_end - self.t_start;
        let s = (self.t_end - t) / width;
        let (f, g) = (bump_step(s), bump_step(1.0 - s));
        if f + g == 0.0 {
            return (0.0, 0.0);
        }
        let denom = (f + g) * (f + g);
        let ds = (bump_step_prime(s) * g + f * bump_step_prime(1.0 - s)) / denom;
        (f / (f + g), -ds / width)
    }

    /// `ψ(x)` and writes `Dψ(x)` into `grad`.
    fn spatial(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let r2 = self.radius * self.radius;
        let s: f64 = x.iter().zip(&self.center).map(|(a, c)| (a - c) * (a - c)).sum::<f64>() / r2;
        grad.iter_mut().for_each(|g| *g = 0.0);
        if s >= 1.0 {
            return 0.0;
        }
        let psi = (1.0 - 1.0 / (1.0 - s)).exp();
        let factor = -psi / ((1.0 - s) * (1.0 - s)) * 2.0 / r2;
        for ((g, a), c) in grad.iter_mut().zip(x).zip(&self.center) {
            *g = factor * (a - c);
        }
        psi
    }

    pub fn value(&self, t: f64, x: &[f64]) -> f64 {
        let mut g = vec![0.0; x.len()];
        self.cutoff(t).0 * self.spatial(x, &mut g)
    }

    pub fn time_derivative(&self, t: f64, x: &[f64]) -> f64 {
        let mut g = vec![0.0; x.len()];
        self.cutoff(t).1 * self.spatial(x, &mut g)
    }

    pub fn gradient(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        self.spatial(x, &mut g);
        let chi = self.cutoff(t).0;
        g.iter_mut().for_each(|v| *v *= chi);
        g
    }
}

/// Finite-difference step for `D_xV`: `max(1e-4, 0.01Δt)`.
pub fn fd_step(grid: &TimeGrid) -> f64 {
    (0.01 * grid.dt()).max(1e-4)
}

/// Central and one-sided differences disagree when
/// `|D⁺ − D⁻| > 0.1|D⁰| + 10h` in some coordinate.
fn differences_agree(forward: f64, backward: f64, central: f64, step: f64) -> bool {
    (forward - backward).abs() <= 0.1 * central.abs() + 10.0 * step
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdGradient {
    pub value: f64,
    pub central: Vec<f64>,
    pub agree: bool,
}

/// `D_xV(t_node, x)` by central differences with step `h`.
pub fn value_gradient(oracle: &dyn ValueOracle, node: usize, x: &[f64], h: f64) -> Result<FdGradient> {
    let v0 = oracle.value(node, x)?;
    let mut central = Vec::with_capacity(x.len());
    let mut agree = true;
    let mut y = x.to_vec();
    for k in 0..x.len() {
        y[k] = x[k] + h;
        let vp = oracle.value(node, &y)?;
        y[k] = x[k] - h;
        let vm = oracle.value(node, &y)?;
        y[k] = x[k];
        let c = (vp - vm) / (2.0 * h);
        agree &= differences_agree((vp - v0) / h, (v0 - vm) / h, c, h);
        central.push(c);
    }
    Ok(FdGradient { value: v0, central, agree })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContinuityReport {
    pub max_residual: f64,
    pub per_test: Vec<f64>,
}

/// Weak-form residual of `∂_t m + div(v m) = 0` for a given velocity field
/// `v(node, x)` evaluated at the particles of `flow`.
pub fn continuity_residual_with_field(
    flow: &FlowOfMeasures,
    tests: &[TestFunction],
    field: impl Fn(usize, &[f64]) -> Result<Vec<f64>> + Sync,
) -> Result<ContinuityReport> {
    let grid = flow.grid();
    let n = grid.steps();
    let dt = grid.dt();
    let velocities: Vec<Vec<Vec<f64>>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let m = flow.snapshot(i);
            (0..m.len()).map(|j| field(i, m.point(j))).collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let per_test: Vec<f64> = tests
        .par_iter()
        .map(|phi| {
            let m0 = flow.snapshot(0);
            let mut total = m0.integrate(|x| phi.value(0.0, x));
            for (i, vel) in velocities.iter().enumerate() {
                let t = grid.time(i);
                let m = flow.snapshot(i);
                let mut inner = 0.0;
                for (j, (x, w)) in m.iter().enumerate() {
                    inner += w * (phi.time_derivative(t, x) + dot(&phi.gradient(t, x), &vel[j]));
                }
                total += dt * inner;
            }
            total.abs()
        })
        .collect();
    Ok(ContinuityReport {
        max_residual: per_test.iter().copied().fold(0.0, f64::max),
        per_test,
    })
}

/// Continuity residual with the feedback field `−D_pH(x, D_xV(t, x), m_t)`.
pub fn continuity_residual(
    flow: &FlowOfMeasures,
    probe: &ValueProbe,
    tests: &[TestFunction],
) -> Result<ContinuityReport> {
    let h = fd_step(probe.system().grid());
    let dynamics = probe.system().dynamics();
    continuity_residual_with_field(flow, tests, |i, x| {
        let p = value_gradient(probe, i, x, h)?.central;
        let g = hamiltonian_grad(dynamics, probe.model(), x, &p, probe.flow().snapshot(i))?;
        Ok(g.dp.iter().map(|v| -v).collect())
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HjbReport {
    /// Residual per sample point; `None` where the differences disagreed.
    pub residuals: Vec<Option<f64>>,
    pub kept: usize,
    pub skipped: usize,
    pub max_residual: f64,
    pub median: f64,
    pub p90: f64,
    /// `max |V(T, x) − G(x, m_T)|` over the sample points.
    pub terminal_residual: f64,
}

impl HjbReport {
    /// Fraction of all sample points whose residual is at most `tol`.
    pub fn fraction_within(&self, tol: f64) -> f64 {
        if self.residuals.is_empty() {
            return 0.0;
        }
        let ok = self.residuals.iter().filter(|r| r.is_some_and(|v| v <= tol)).count();
        ok as f64 / self.residuals.len() as f64
    }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx]
}

/// Random interior sample points `(node, x)` with `1 ≤ node ≤ N − 1` and `x`
/// in `[lo, hi]`.
pub fn interior_samples(grid: &TimeGrid, lo: &[f64], hi: &[f64], count: usize, seed: u64) -> Vec<(usize, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let node = rng.random_range(1..grid.steps());
            let x = lo.iter().zip(hi).map(|(&l, &h)| rng.random_range(l..=h)).collect();
            (node, x)
        })
        .collect()
}

/// `|−∂_tV + H(x, D_xV, m_t)|` by finite differences of `oracle`, where `H`
/// includes the coupling so that this equals `|−∂_tV + H₀ − F|`.
pub fn hjb_residual_with(
    oracle: &dyn ValueOracle,
    dynamics: &LinearDynamics,
    model: &dyn LagrangianModel,
    flow: &FlowOfMeasures,
    points: &[(usize, Vec<f64>)],
) -> Result<HjbReport> {
    let grid = *oracle.grid();
    let n = grid.steps();
    let dt = grid.dt();
    let h = fd_step(&grid);
    if let Some((node, _)) = points.iter().find(|(i, _)| *i == 0 || *i >= n) {
        return Err(invalid(format!("sample node {node} is not interior to 0..={n}")));
    }
    let residuals: Vec<Option<f64>> = points
        .par_iter()
        .map(|(i, x)| {
            let g = value_gradient(oracle, *i, x, h)?;
            let vp = oracle.value(i + 1, x)?;
            let vm = oracle.value(i - 1, x)?;
            let dt_central = (vp - vm) / (2.0 * dt);
            let time_ok = differences_agree((vp - g.value) / dt, (g.value - vm) / dt, dt_central, dt);
            if !(g.agree && time_ok) {
                return Ok(None);
            }
            let ham = legendre_hamiltonian(dynamics, model, x, &g.central, flow.snapshot(*i))?;
            Ok(Some((-dt_central + ham.h).abs()))
        })
        .collect::<Result<_>>()?;
    let terminal_residual = points
        .iter()
        .map(|(_, x)| Ok((oracle.value(n, x)? - model.terminal(x, flow.snapshot(n))).abs()))
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    let mut kept: Vec<f64> = residuals.iter().flatten().copied().collect();
    kept.sort_by(f64::total_cmp);
    Ok(HjbReport {
        kept: kept.len(),
        skipped: residuals.len() - kept.len(),
        max_residual: kept.last().copied().unwrap_or(0.0),
        median: quantile(&kept, 0.5),
        p90: quantile(&kept, 0.9),
        terminal_residual,
        residuals,
    })
}

pub fn hjb_residual(probe: &ValueProbe, points: &[(usize, Vec<f64>)]) -> Result<HjbReport> {
    hjb_residual_with(probe, probe.system().dynamics(), probe.model(), probe.flow(), points)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonotonicityReport {
    /// `∫(Ψ(x, m₁) − Ψ(x, m₂)) d(m₁ − m₂)(x)` per pair.
    pub pairings: Vec<f64>,
    pub min_pairing: f64,
    pub monotone: bool,
    /// No pair has a vanishing pairing with `Ψ(·, m₁) ≠ Ψ(·, m₂)`.
    pub strictly_monotone: bool,
}

/// Numerical test of the monotonicity pairing for a coupling `Ψ(x, m)`.
///
/// Pairs with `|pairing| ≤ 1e-10` are checked for `Ψ(·, m₁) = Ψ(·, m₂)` on
/// both supports and on `witness_points`.
pub fn monotonicity_check(
    coupling: &(dyn Fn(&[f64], &ParticleMeasure) -> f64 + Sync),
    pairs: &[(ParticleMeasure, ParticleMeasure)],
    witness_points: &[Vec<f64>],
) -> Result<MonotonicityReport> {
    if pairs.is_empty() {
        return Err(invalid("monotonicity check needs at least one pair"));
    }
    let mut pairings = Vec::with_capacity(pairs.len());
    let mut strict = true;
    for (m1, m2) in pairs {
        if m1.dim() != m2.dim() {
            return Err(invalid("paired measures live in different dimensions"));
        }
        let diff = |x: &[f64]| coupling(x, m1) - coupling(x, m2);
        let value = m1.integrate(diff) - m2.integrate(diff);
        if value.abs() <= 1e-10 {
            let points = m1
                .iter()
                .chain(m2.iter())
                .map(|(x, _)| x)
                .chain(witness_points.iter().map(Vec::as_slice));
            let same = points
                .into_iter()
                .all(|x| (coupling(x, m1) - coupling(x, m2)).abs() <= 1e-10 * (1.0 + coupling(x, m1).abs()));
            strict &= same;
        }
        pairings.push(value);
    }
    let min_pairing = pairings.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(MonotonicityReport {
        monotone: min_pairing >= -1e-10,
        strictly_monotone: min_pairing >= -1e-10 && strict,
        min_pairing,
        pairings,
    })
}

/// Random pairs of measures near `m0`: each support point is shifted by a
/// uniform offset in `[−spread, spread]^d` and reweighted at random.
pub fn measure_pairs(m0: &ParticleMeasure, count: usize, spread: f64, seed: u64) -> Result<Vec<(ParticleMeasure, ParticleMeasure)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |rng: &mut ChaCha8Rng| {
        let points: Vec<f64> = m0.points().iter().map(|x| x + spread * rng.random_range(-1.0..=1.0)).collect();
        let raw: Vec<f64> = (0..m0.len()).map(|_| rng.random_range(0.1..=1.0)).collect();
        let total: f64 = raw.iter().sum();
        ParticleMeasure::new(m0.dim(), points, raw.iter().map(|w| w / total).collect())
    };
    (0..count).map(|_| Ok((draw(&mut rng)?, draw(&mut rng)?))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UniquenessRun {
    pub init: Initialization,
    pub converged: bool,
    pub rounds: usize,
    pub exploitability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UniquenessReport {
    pub running_monotonicity: MonotonicityReport,
    pub terminal_monotonicity: MonotonicityReport,
    /// Set when a coupling failed the monotonicity check; no runs are made.
    pub skipped: bool,
    pub runs: Vec<UniquenessRun>,
    /// `max |V₁ − V₂|` over converged run pairs and probe points.
    pub max_value_gap: Option<f64>,
}

/// Initialization of the `r`-th uniqueness run.
pub fn uniqueness_initialization(r: usize, seed: u64) -> Initialization {
    match r % 3 {
        0 => Initialization::Reference,
        1 => Initialization::PerturbedControls {
            amplitude: 0.5,
            seed: seed.wrapping_add(r as u64),
        },
        _ => Initialization::Random {
            amplitude: 0.5,
            seed: seed.wrapping_add(r as u64),
        },
    }
}

/// Runs fictitious play from `n_runs` initializations and compares the
/// resulting value functions on `probe_points`.
pub fn uniqueness_check(
    sys: &DiscreteSystem,
    model: Arc<dyn LagrangianModel>,
    m0: &ParticleMeasure,
    cfg: &EquilibriumConfig,
    n_runs: usize,
    probe_points: &[(usize, Vec<f64>)],
) -> Result<UniquenessReport> {
    if n_runs < 2 {
        return Err(invalid("uniqueness check needs at least two runs"));
    }
    let radius = m0.support_radius().max(1.0);
    let pairs = measure_pairs(m0, 20, radius, cfg.ocp.seed ^ 0x6d6f6e6f)?;
    let witnesses: Vec<Vec<f64>> = pairs.iter().flat_map(|(a, _)| a.iter().map(|(x, _)| x.to_vec())).collect();
    let running = monotonicity_check(&|x, m| model.coupling(x, m), &pairs, &witnesses)?;
    let terminal = monotonicity_check(&|x, m| model.terminal(x, m), &pairs, &witnesses)?;
    if !(running.monotone && terminal.monotone) {
        return Ok(UniquenessReport {
            running_monotonicity: running,
            terminal_monotonicity: terminal,
            skipped: true,
            runs: Vec::new(),
            max_value_gap: None,
        });
    }

    let mut runs = Vec::with_capacity(n_runs);
    let mut values: Vec<Vec<f64>> = Vec::new();
    for r in 0..n_runs {
        let init = uniqueness_initialization(r, cfg.ocp.seed);
        let rep = fictitious_play(sys, model.as_ref(), m0, &EquilibriumConfig { init, ..*cfg })?;
        runs.push(UniquenessRun {
            init,
            converged: rep.converged,
            rounds: rep.rounds,
            exploitability: rep.final_exploitability(),
        });
        if rep.converged {
            let probe = ValueProbe::new(sys.clone(), Arc::clone(&model), Arc::new(rep.flow()?), cfg.ocp)?;
            let v = probe_points
                .par_iter()
                .map(|(i, x)| probe.value(*i, x))
                .collect::<Result<Vec<f64>>>()?;
            values.push(v);
        }
    }
    let mut gap: Option<f64> = None;
    for a in 0..values.len() {
        for b in a + 1..values.len() {
            let g = values[a]
                .iter()
                .zip(&values[b])
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            gap = Some(gap.map_or(g, |v| v.max(g)));
        }
    }
    Ok(UniquenessReport {
        running_monotonicity: running,
        terminal_monotonicity: terminal,
        skipped: false,
        runs,
        max_value_gap: gap,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SynthesisReport {
    /// `max_x Σ_j ν_x(γ_j) sup_t |γ̂_x − γ_j|`: for each start `x`, the
    /// deviations of its paths averaged with their conditional weights.
    pub max_path_deviation: f64,
    /// The same maximum with each start's deviation divided by `1 + |x|`.
    pub max_relative_deviation: f64,
    /// `Σ_x m₀({x}) Σ_j ν_x(γ_j) sup_t |γ̂_x − γ_j|` over checked starts.
    pub weighted_deviation: f64,
    /// Start points checked.
    pub checked: usize,
    /// Start points skipped because the differences disagreed somewhere
    /// along the feedback path.
    pub skipped: usize,
}

/// Integrates `γ̇ = −D_pH(γ, D_xV(t, γ))` from each start of `ensemble` with
/// the feedback held constant on each interval, and compares the result with
/// the paths leaving that start.
pub fn synthesis_check(probe: &ValueProbe, ensemble: &TrajectoryEnsemble) -> Result<SynthesisReport> {
    let sys = probe.system();
    let n = sys.grid().steps();
    let d = sys.state_dim();
    let h = fd_step(sys.grid());
    let groups = disintegrate(ensemble);
    let outcomes: Vec<Option<f64>> = groups
        .par_iter()
        .map(|group| {
            let mut feedback = Vec::with_capacity((n + 1) * d);
            let mut y = group.start.clone();
            let mut next = vec![0.0; d];
            feedback.extend_from_slice(&y);
            for i in 0..n {
                let g = value_gradient(probe, i, &y, h)?;
                if !g.agree {
                    return Ok(None);
                }
                let hg = hamiltonian_grad(sys.dynamics(), probe.model(), &y, &g.central, probe.flow().snapshot(i))?;
                sys.step(&y, &hg.u_star, &mut next);
                std::mem::swap(&mut y, &mut next);
                feedback.extend_from_slice(&y);
            }
            let deviation = group
                .members
                .iter()
                .zip(&group.weights)
                .map(|(&j, &w)| {
                    let path = &ensemble.paths()[j];
                    let sup = (1..=n)
                        .map(|i| {
                            let err: Vec<f64> =
                                feedback[i * d..(i + 1) * d].iter().zip(path.state(i)).map(|(a, b)| a - b).collect();
                            norm(&err)
                        })
                        .fold(0.0, f64::max);
                    w * sup
                })
                .sum();
            Ok(Some(deviation))
        })
        .collect::<Result<_>>()?;
    let mut report = SynthesisReport {
        max_path_deviation: 0.0,
        max_relative_deviation: 0.0,
        weighted_deviation: 0.0,
        checked: 0,
        skipped: 0,
    };
    for (group, dev) in groups.iter().zip(outcomes) {
        match dev {
            Some(dev) => {
                report.checked += 1;
                report.max_path_deviation = report.max_path_deviation.max(dev);
                report.max_relative_deviation = report.max_relative_deviation.max(dev / (1.0 + norm(&group.start)));
                report.weighted_deviation += group.mass * dev;
            }
            None => report.skipped += 1,
        }
    }
    Ok(report)
}

/// Synthesis check against the flow and paths of an equilibrium report.
pub fn synthesis_check_report(
    sys: &DiscreteSystem,
    model: Arc<dyn LagrangianModel>,
    report: &EquilibriumReport,
    opts: crate::ocp::OcpOptions,
) -> Result<SynthesisReport> {
    let probe = ValueProbe::new(sys.clone(), model, Arc::new(report.flow()?), opts)?;
    synthesis_check(&probe, &report.ensemble)
}
