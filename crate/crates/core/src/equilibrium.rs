//! Best-response map on trajectory ensembles and fictitious play.
//!
//! An ensemble `η` induces the flow `m_t = e_t♯η`; each start of `η` gets
//! one discrete best response against that flow. Fictitious play averages
//! `η` with its best response until the exploitability or the flow gap is
//! below tolerance.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::dynamics::{integrate_path, reference_ensemble, DiscreteSystem, Path};
use crate::error::{invalid, Result};
use crate::hamiltonian::{check_h1, H1Report, LagrangianModel, SampleBox};
use crate::linalg::{mix_seed, norm, point_bits};
use crate::measures::{
    adjacent_lipschitz, check_admissible, disintegrate, AdmissibilityReport, FlowOfMeasures, ParticleMeasure,
    TrajectoryEnsemble,
};
use crate::ocp::{apriori_bounds, discrete_cost, solve_best_response, AprioriBounds, BoundRatios, OcpOptions};

/// Mixing weight `λ_k` used at round `k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Averaging {
    /// `λ_k = 1/(k + 1)`
    Harmonic,
    Constant { lambda: f64 },
}

impl Averaging {
    pub fn weight(&self, round: usize) -> f64 {
        match *self {
            Averaging::Harmonic => 1.0 / (round as f64 + 1.0),
            Averaging::Constant { lambda } => lambda,
        }
    }
}

/// Starting ensemble for fictitious play.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Initialization {
    /// Uncontrolled paths.
    Reference,
    /// One constant control per particle, uniform in `[−amplitude, amplitude]^k`.
    PerturbedControls { amplitude: f64, seed: u64 },
    /// Independent Gaussian controls on every interval, scaled by `amplitude`.
    Random { amplitude: f64, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EquilibriumConfig {
    pub max_rounds: usize,
    pub averaging: Averaging,
    pub tol_exploitability: f64,
    /// Tolerance on `sup_t d₁(m^k_t, m^{k+1}_t)`.
    pub tol_gap: f64,
    pub alpha: f64,
    /// Admissibility radius; `r_default` from the a-priori bounds when unset.
    pub radius: Option<f64>,
    pub lipschitz_mode: bool,
    pub init: Initialization,
    pub prune_weight: f64,
    pub merge_tol: f64,
    pub ocp: OcpOptions,
}

impl Default for EquilibriumConfig {
    fn default() -> Self {
        Self {
            max_rounds: 50,
            averaging: Averaging::Harmonic,
            tol_exploitability: 1e-6,
            tol_gap: 1e-8,
            alpha: 2.0,
            radius: None,
            lipschitz_mode: false,
            init: Initialization::Reference,
            prune_weight: 1e-12,
            merge_tol: 1e-10,
            ocp: OcpOptions::default(),
        }
    }
}

impl EquilibriumConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol_exploitability > 0.0 && self.tol_gap > 0.0) {
            return Err(invalid("stopping tolerances must be positive"));
        }
        if let Averaging::Constant { lambda } = self.averaging {
            if !(lambda > 0.0 && lambda <= 1.0) {
                return Err(invalid(format!("averaging weight must lie in (0, 1], got {lambda}")));
            }
        }
        if !(self.alpha > 1.0) {
            return Err(invalid(format!("alpha must exceed 1, got {}", self.alpha)));
        }
        if let Some(r) = self.radius {
            if !(r > 0.0) {
                return Err(invalid(format!("admissibility radius must be positive, got {r}")));
            }
        }
        match self.init {
            Initialization::Reference => {}
            Initialization::PerturbedControls { amplitude, .. } | Initialization::Random { amplitude, .. } => {
                if !(amplitude.is_finite() && amplitude >= 0.0) {
                    return Err(invalid("initialization amplitude must be finite and nonnegative"));
                }
            }
        }
        if !(self.prune_weight >= 0.0 && self.merge_tol >= 0.0) {
            return Err(invalid("pruning thresholds must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Exploitability,
    Gap,
    MaxRounds,
}

/// Per-round certificate of the Lipschitz mode.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LipschitzCertificate {
    /// `None` when the model declares no `(H1)` constants.
    pub h1: Option<H1Report>,
    pub q1: Option<f64>,
    /// `max ‖γ̇‖_∞ / (Q₁(1 + |x|))` over all best responses.
    pub velocity_ratio: Option<f64>,
    /// `max_i d₁(m_{t_i}, m_{t_{i+1}})/Δt` for each iterate.
    pub flow_lipschitz: Vec<f64>,
    pub certified: bool,
}

#[derive(Debug, Clone)]
pub struct EquilibriumReport {
    pub ensemble: TrajectoryEnsemble,
    /// `sup_t d₁(m^k_t, m^{k+1}_t)` for each completed averaging step.
    pub gaps: Vec<f64>,
    /// Exploitability of each iterate `η^k`, the last entry being the final
    /// ensemble's.
    pub exploitability: Vec<f64>,
    /// Admissibility of each iterate, aligned with `exploitability`.
    pub admissibility: Vec<AdmissibilityReport>,
    /// Number of best-response rounds performed.
    pub rounds: usize,
    pub converged: bool,
    pub stop_reason: StopReason,
    pub bounds: AprioriBounds,
    pub radius: f64,
    /// Largest observed ratios against the a-priori bounds.
    pub bound_ratios: BoundRatios,
    pub lipschitz: Option<LipschitzCertificate>,
}

impl EquilibriumReport {
    pub fn flow(&self) -> Result<FlowOfMeasures> {
        self.ensemble.flow()
    }

    pub fn final_exploitability(&self) -> f64 {
        *self.exploitability.last().expect("at least one round")
    }

    pub fn final_admissibility(&self) -> &AdmissibilityReport {
        self.admissibility.last().expect("at least one round")
    }
}

/// One best response per start group of an ensemble, with the group's
/// realized costs.
#[derive(Debug, Clone)]
struct GroupResponse {
    path: Path,
    cost: f64,
    mass: f64,
    /// `Σ_j w_j J(u_j)` over the group, conditional weights.
    realized: f64,
    /// Cheapest supported path of the group.
    best_member: f64,
}

type WarmStarts = HashMap<Vec<u64>, Vec<f64>>;

fn respond(
    sys: &DiscreteSystem,
    model: &dyn LagrangianModel,
    eta: &TrajectoryEnsemble,
    flow: &FlowOfMeasures,
    warm: Option<&WarmStarts>,
    opts: &OcpOptions,
) -> Result<Vec<GroupResponse>> {
    disintegrate(eta)
        .par_iter()
        .map(|g| {
            let init = warm.and_then(|w| w.get(&point_bits(&g.start))).map(Vec::as_slice);
            let sol = solve_best_response(sys, model, flow, 0, &g.start, init, opts)?;
            let mut realized = 0.0;
            let mut best_member = f64::INFINITY;
            for (&j, &w) in g.members.iter().zip(&g.weights) {
                let c = discrete_cost(sys, model, flow, 0, &g.start, eta.paths()[j].controls())?;
                realized += w * c;
                best_member = best_member.min(c);
            }
            Ok(GroupResponse {
                path: sol.path,
                cost: sol.cost,
                mass: g.mass,
                realized,
                best_member,
            })
        })
        .collect()
}

fn exploitability_of(responses: &[GroupResponse]) -> f64 {
    responses
        .iter()
        .map(|r| r.mass * (r.realized - r.cost.min(r.best_member)).max(0.0))
        .sum()
}

fn response_ensemble(sys: &DiscreteSystem, responses: &[GroupResponse]) -> Result<TrajectoryEnsemble> {
    TrajectoryEnsemble::new(
        *sys.grid(),
        responses.iter().map(|r| r.path.clone()).collect(),
        responses.iter().map(|r| r.mass).collect(),
    )
}

/// Best responses against the flow of `η`, one path per distinct start
/// carrying that start's mass.
pub fn best_response_ensemble(
    sys: &DiscreteSystem,
    model: &dyn LagrangianModel,
    eta: &TrajectoryEnsemble,
    opts: &OcpOptions,
) -> Result<TrajectoryEnsemble> {
    let flow = eta.flow()?;
    let responses = respond(sys, model, eta, &flow, None, opts)?;
    response_ensemble(sys, &responses)
}

/// `Σ_x m₀(x) [Σ_j w_j J_η(x, u_j) − inf_u J_η(x, u)]`, where the infimum is
/// the better of the solver's minimum and the supported paths.
pub fn exploitability(
    sys: &DiscreteSystem,
    model: &dyn LagrangianModel,
    eta: &TrajectoryEnsemble,
    opts: &OcpOptions,
) -> Result<f64> {
    let flow = eta.flow()?;
    Ok(exploitability_of(&respond(sys, model, eta, &flow, None, opts)?))
}

/// Builds the starting ensemble over the particles of `m0`.
pub fn initial_ensemble(
    sys: &DiscreteSystem,
    m0: &ParticleMeasure,
    init: &Initialization,
) -> Result<TrajectoryEnsemble> {
    let n = sys.grid().steps();
    let k = sys.control_dim();
    let (amplitude, seed, constant) = match *init {
        Initialization::Reference => return reference_ensemble(sys, m0),
        Initialization::PerturbedControls { amplitude, seed } => (amplitude, seed, true),
        Initialization::Random { amplitude, seed } => (amplitude, seed, false),
    };
    if m0.dim() != sys.state_dim() {
        return Err(invalid(format!(
            "initial measure lives in R^{}, dynamics in R^{}",
            m0.dim(),
            sys.state_dim()
        )));
    }
    let mut paths = Vec::with_capacity(m0.len());
    for (j, (x, _)) in m0.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[j as u64]));
        let controls: Vec<f64> = if constant {
            let c: Vec<f64> = (0..k).map(|_| amplitude * rng.random_range(-1.0..=1.0)).collect();
            c.iter().copied().cycle().take(n * k).collect()
        } else {
            (0..n * k)
                .map(|_| amplitude * rng.sample::<f64, _>(StandardNormal))
                .collect()
        };
        paths.push(integrate_path(sys, 0, x, &controls)?);
    }
    TrajectoryEnsemble::new(*sys.grid(), paths, m0.weights().to_vec())
}

fn lipschitz_setup(
    sys: &DiscreteSystem,
    model: &dyn LagrangianModel,
    m0: &ParticleMeasure,
    bounds: &AprioriBounds,
) -> Result<LipschitzCertificate> {
    let h1 = match (bounds.growth.c3, bounds.growth.c4) {
        (Some(c3), Some(c4)) => {
            let region = SampleBox {
                state_radius: bounds.growth.radius,
                dual_radius: 1.0 + 2.0 * bounds.growth.g_grad_sup,
                measures: vec![m0.clone()],
                seed: 0x4831,
            };
            Some(check_h1(sys.dynamics(), model, &region, 2000, c3, c4)?)
        }
        _ => None,
    };
    Ok(LipschitzCertificate {
        certified: h1.as_ref().is_some_and(|r| r.pass) && bounds.q1.is_some(),
        h1,
        q1: bounds.q1,
        velocity_ratio: bounds.q1.map(|_| 0.0),
        flow_lipschitz: Vec::new(),
    })
}

/// Fictitious play `η^{k+1} = (1 − λ_k)η^k ⊕ λ_k BR(η^k)`.
///
/// Stops when the exploitability of the current iterate or the previous
/// flow gap is below tolerance; otherwise runs `max_rounds` rounds and
/// reports `converged = false`.
pub fn fictitious_play(
    sys: &DiscreteSystem,
    model: &dyn LagrangianModel,
    m0: &ParticleMeasure,
    cfg: &EquilibriumConfig,
) -> Result<EquilibriumReport> {
    cfg.validate()?;
    let dynamics = sys.dynamics();
    let bounds = apriori_bounds(dynamics, model, m0, cfg.alpha, None)?;
    let radius = cfg.radius.unwrap_or(bounds.r_default);
    let dt = sys.grid().dt();
    let mut lipschitz = if cfg.lipschitz_mode {
        Some(lipschitz_setup(sys, model, m0, &bounds)?)
    } else {
        None
    };

    let mut eta = initial_ensemble(sys, m0, &cfg.init)?;
    let mut flow = eta.flow()?;
    let mut warm = WarmStarts::new();
    let mut gaps = Vec::new();
    let mut trace = Vec::new();
    let mut admissibility = Vec::new();
    let mut ratios = BoundRatios::default();
    let mut round = 0;
    let stop_reason = loop {
        admissibility.push(check_admissible(&eta, dynamics, m0, radius, cfg.alpha)?);
        if let Some(cert) = lipschitz.as_mut() {
            cert.flow_lipschitz.push(adjacent_lipschitz(&flow)?);
        }
        let responses = respond(sys, model, &eta, &flow, Some(&warm), &cfg.ocp)?;
        round += 1;
        for r in &responses {
            ratios = ratios.max(bounds.ratios(dynamics, &r.path, dt));
            if let (Some(cert), Some(q1)) = (lipschitz.as_mut(), bounds.q1) {
                let x = norm(r.path.initial_state());
                let v = r.path.velocity_sup(dynamics) / (q1 * (1.0 + x));
                cert.velocity_ratio = cert.velocity_ratio.map(|m| m.max(v));
            }
        }
        let e = exploitability_of(&responses);
        trace.push(e);
        if e <= cfg.tol_exploitability {
            break StopReason::Exploitability;
        }
        if gaps.last().is_some_and(|&g| g <= cfg.tol_gap) {
            break StopReason::Gap;
        }
        if round >= cfg.max_rounds {
            break StopReason::MaxRounds;
        }
        for r in &responses {
            warm.insert(point_bits(r.path.initial_state()), r.path.controls().to_vec());
        }
        let response = response_ensemble(sys, &responses)?;
        let next = eta
            .mix(&response, cfg.averaging.weight(round - 1))?
            .prune(cfg.prune_weight, cfg.merge_tol)?;
        let next_flow = next.flow()?;
        gaps.push(flow.sup_distance(&next_flow)?);
        eta = next;
        flow = next_flow;
    };

    if let Some(cert) = lipschitz.as_mut() {
        cert.certified = cert.certified
            && cert.velocity_ratio.is_some_and(|v| v <= 1.0)
            && cert.flow_lipschitz.iter().all(|l| l.is_finite());
    }
    Ok(EquilibriumReport {
        ensemble: eta,
        gaps,
        exploitability: trace,
        admissibility,
        rounds: round,
        converged: stop_reason != StopReason::MaxRounds,
        stop_reason,
        bounds,
        radius,
        bound_ratios: ratios,
        lipschitz,
    })
}

/// Fictitious play from the reference ensemble with the Lipschitz
/// certificate switched on.
pub fn lipschitz_equilibrium(
    sys: &DiscreteSystem,
    model: &dyn LagrangianModel,
    m0: &ParticleMeasure,
    cfg: &EquilibriumConfig,
) -> Result<EquilibriumReport> {
    let cfg = EquilibriumConfig {
        lipschitz_mode: true,
        init: Initialization::Reference,
        ..*cfg
    };
    fictitious_play(sys, model, m0, &cfg)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::dynamics::LinearDynamics;
    use crate::hamiltonian::{Coupling, QuadraticModel};
    use crate::measures::wasserstein1;
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    pub(crate) fn scalar(steps: usize) -> DiscreteSystem {
        let dy = LinearDynamics::from_rows(&[vec![0.0]], &[vec![1.0]], 1.0).unwrap();
        DiscreteSystem::new(dy, steps).unwrap()
    }

    pub(crate) fn lq_model() -> QuadraticModel {
        QuadraticModel::control_energy(1, 1)
            .with_terminal_weight(DMatrix::identity(1, 1))
            .unwrap()
    }

    pub(crate) fn symmetric_model(strength: f64) -> QuadraticModel {
        lq_model().with_coupling(Coupling::MeanField { strength }).unwrap()
    }

    fn two_points() -> ParticleMeasure {
        ParticleMeasure::uniform(1, vec![-1.0, 1.0]).unwrap()
    }

    #[test]
    fn decoupled_game_converges_after_one_averaging_step() {
        let sys = scalar(40);
        let rep = fictitious_play(&sys, &lq_model(), &two_points(), &EquilibriumConfig::default()).unwrap();
        assert!(rep.converged);
        assert_eq!(rep.stop_reason, StopReason::Exploitability);
        assert_eq!(rep.rounds, 2);
        assert!((rep.exploitability[0] - 0.25).abs() < 1e-9);
        assert!(rep.final_exploitability() < 1e-9);
        let flow = rep.flow().unwrap();
        for i in 0..=40 {
            let t = sys.grid().time(i);
            let s = 1.0 - t / 2.0;
            let target = ParticleMeasure::uniform(1, vec![-s, s]).unwrap();
            assert!(wasserstein1(flow.snapshot(i), &target).unwrap() < 1e-6);
            assert!(flow.snapshot(i).mean()[0].abs() < 1e-12);
        }
        assert!(rep.final_admissibility().admissible);
    }

    #[test]
    fn response_ignores_paths_without_coupling() {
        let sys = scalar(20);
        let m0 = two_points();
        let a = reference_ensemble(&sys, &m0).unwrap();
        let b = initial_ensemble(&sys, &m0, &Initialization::Random { amplitude: 1.0, seed: 3 }).unwrap();
        let opts = OcpOptions::default();
        let ra = best_response_ensemble(&sys, &lq_model(), &a, &opts).unwrap();
        let rb = best_response_ensemble(&sys, &lq_model(), &b, &opts).unwrap();
        for (p, q) in ra.paths().iter().zip(rb.paths()) {
            assert_eq!(p.initial_state(), q.initial_state());
            assert!(p.sup_distance(q) < 1e-7);
        }
    }

    #[test]
    fn reference_exploitability_on_benchmark() {
        let sys = scalar(50);
        let eta = reference_ensemble(&sys, &ParticleMeasure::dirac(&[1.0]).unwrap()).unwrap();
        let e = exploitability(&sys, &lq_model(), &eta, &OcpOptions::default()).unwrap();
        assert!((e - 0.25).abs() < 1e-9);
    }

    #[test]
    fn zero_control_is_unexploitable_without_costs() {
        let sys = scalar(20);
        let eta = reference_ensemble(&sys, &two_points()).unwrap();
        let model = QuadraticModel::control_energy(1, 1);
        let e = exploitability(&sys, &model, &eta, &OcpOptions::default()).unwrap();
        assert!(e.abs() < 1e-14);
    }

    #[test]
    fn symmetric_instance_is_a_fixed_point() {
        let sys = scalar(40);
        let m0 = ParticleMeasure::dirac(&[0.0]).unwrap();
        let model = symmetric_model(1.0);
        let eta = reference_ensemble(&sys, &m0).unwrap();
        let br = best_response_ensemble(&sys, &model, &eta, &OcpOptions::default()).unwrap();
        assert!(br.paths()[0].sup_distance(&eta.paths()[0]) < 1e-6);
        let rep = fictitious_play(&sys, &model, &m0, &EquilibriumConfig::default()).unwrap();
        assert!(rep.converged);
        assert_eq!(rep.rounds, 1);
    }

    fn sup_distance_to(rep: &EquilibriumReport, m: &ParticleMeasure) -> f64 {
        let flow = rep.flow().unwrap();
        flow.snapshots()
            .iter()
            .map(|s| wasserstein1(s, m).unwrap())
            .fold(0.0, f64::max)
    }

    #[test]
    fn harmonic_play_from_perturbed_start() {
        let sys = scalar(40);
        let m0 = ParticleMeasure::dirac(&[0.0]).unwrap();
        let cfg = EquilibriumConfig {
            init: Initialization::PerturbedControls { amplitude: 1.0, seed: 9 },
            ..Default::default()
        };
        let rep = fictitious_play(&sys, &symmetric_model(1.0), &m0, &cfg).unwrap();
        assert!(rep.final_exploitability() <= 1e-3);
        // The initial path keeps weight 1/(k + 1) under harmonic averaging.
        let initial = initial_ensemble(&sys, &m0, &cfg.init).unwrap();
        let excursion = initial.paths()[0].state_sup();
        assert!(sup_distance_to(&rep, &m0) <= 1.1 * excursion / rep.rounds as f64);
        assert!(rep.admissibility.iter().all(|a| a.admissible));
        for w in rep.exploitability.windows(2) {
            assert!(w[1] <= w[0] + 1e-4);
        }
    }

    #[test]
    fn damped_play_from_perturbed_start() {
        let sys = scalar(40);
        let m0 = ParticleMeasure::dirac(&[0.0]).unwrap();
        let cfg = EquilibriumConfig {
            averaging: Averaging::Constant { lambda: 0.5 },
            init: Initialization::PerturbedControls { amplitude: 1.0, seed: 9 },
            ..Default::default()
        };
        let rep = fictitious_play(&sys, &symmetric_model(1.0), &m0, &cfg).unwrap();
        assert!(rep.converged);
        assert!(rep.final_exploitability() <= 1e-3);
        assert!(sup_distance_to(&rep, &m0) <= 1e-3);
    }

    #[test]
    fn lipschitz_mode_on_benchmark() {
        let sys = scalar(40);
        let model = lq_model().with_h1_constants(0.0, 0.0);
        let rep = lipschitz_equilibrium(&sys, &model, &two_points(), &EquilibriumConfig::default()).unwrap();
        let cert = rep.lipschitz.as_ref().unwrap();
        assert_eq!(cert.flow_lipschitz[0], 0.0);
        assert!((cert.flow_lipschitz.last().unwrap() - 0.5).abs() < 1e-6);
    }

    #[test]
    fn lipschitz_mode_without_h1_constants_does_not_certify() {
        let sys = scalar(20);
        let rep = lipschitz_equilibrium(&sys, &lq_model(), &two_points(), &EquilibriumConfig::default()).unwrap();
        assert!(rep.converged);
        let cert = rep.lipschitz.unwrap();
        assert!(cert.h1.is_none());
        assert!(!cert.certified);
    }

    #[test]
    fn rejects_bad_config() {
        let sys = scalar(10);
        let m0 = two_points();
        for cfg in [
            EquilibriumConfig { tol_gap: 0.0, ..Default::default() },
            EquilibriumConfig { averaging: Averaging::Constant { lambda: 1.5 }, ..Default::default() },
            EquilibriumConfig { alpha: 1.0, ..Default::default() },
        ] {
            assert!(fictitious_play(&sys, &lq_model(), &m0, &cfg).is_err());
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn iterates_keep_their_starts(
            xs in proptest::collection::vec(-2.0f64..2.0, 1..4),
            strength in 0.0f64..1.0,
            lambda in 0.2f64..1.0,
        ) {
            let sys = scalar(16);
            let m0 = ParticleMeasure::uniform(1, xs).unwrap();
            let cfg = EquilibriumConfig {
                max_rounds: 4,
                averaging: Averaging::Constant { lambda },
                init: Initialization::Random { amplitude: 0.5, seed: 1 },
                ..Default::default()
            };
            let rep = fictitious_play(&sys, &symmetric_model(strength), &m0, &cfg).unwrap();
            let start = rep.ensemble.pushforward_eval(0).unwrap();
            prop_assert!(wasserstein1(&start, &m0).unwrap() < 1e-12);
            prop_assert!(rep.exploitability.iter().all(|e| *e >= 0.0));
            prop_assert_eq!(rep.admissibility.len(), rep.exploitability.len());
        }
    }
}
