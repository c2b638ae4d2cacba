//! A-priori estimates for optimal controls and paths.
//!
//! All constants are local: the growth constants are evaluated on a working
//! ball of radius `r_w`, and the estimates hold for solves whose states and
//! flows stay in that ball.

use serde::Serialize;

use crate::dynamics::{LinearDynamics, Path};
use crate::error::{Error, Result};
use crate::hamiltonian::{GrowthConstants, LagrangianModel};
use crate::measures::ParticleMeasure;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum VelocityReading {
    /// `‖A‖^{1/2}`, `‖B‖^{1/2}` as displayed.
    SquareRoot,
    /// `‖A‖`, `‖B‖` as dimensional analysis suggests.
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AprioriBounds {
    pub growth: GrowthConstants,
    pub alpha: f64,
    /// `‖u*‖₂ ≤ K`, `K² = (2/c₀)(c₁T + ‖G‖_∞)`
    pub k: f64,
    /// `‖γ*‖_∞ ≤ C̃₁(1 + |x|)`
    pub c1_tilde: f64,
    /// `‖γ̇*‖₂ ≤ C̃₂(1 + |x|)`
    pub c2_tilde: f64,
    /// Which operator-norm reading produced the larger `C̃₂`.
    pub c2_tilde_binding: VelocityReading,
    /// `C̃₂^α([m₀]_α + 1)`
    pub r_star: f64,
    /// `(‖A‖e^{T‖A‖})^α [m₀]_α`
    pub r_reference: f64,
    /// Default admissibility radius `max(r_star, r_reference)`.
    pub r_default: f64,
    /// ½-Hölder constant of equilibrium flows.
    pub kappa: f64,
    /// `‖γ̇*‖_∞ ≤ Q₁(1 + |x|)` when the `(H1)` constants are declared.
    pub q1: Option<f64>,
    /// Spatial Lipschitz bound on the value function over the working ball.
    pub value_lipschitz: f64,
}

impl AprioriBounds {
    /// Working radius `2 e^{T‖A‖} max(1, max_j |x_j|)` for the support of `m₀`.
    pub fn working_radius(dynamics: &LinearDynamics, m0: &ParticleMeasure) -> f64 {
        2.0 * (dynamics.horizon() * dynamics.a_norm()).exp() * m0.support_radius().max(1.0)
    }

    /// Evaluates the estimates from explicit growth constants.
    pub fn from_constants(
        dynamics: &LinearDynamics,
        growth: GrowthConstants,
        m0: &ParticleMeasure,
        alpha: f64,
    ) -> Result<Self> {
        if !(growth.c0 > 0.0) || !growth.c1.is_finite() || !growth.g_sup.is_finite() {
            return Err(Error::InvalidModel(
                "growth constants need c0 > 0 and finite c1, sup|G|".into(),
            ));
        }
        let t = dynamics.horizon();
        let a = dynamics.a_norm();
        let b = dynamics.b_norm();
        let ea = (t * a).exp();
        let k = ((2.0 / growth.c0) * (growth.c1 * t + growth.g_sup)).sqrt();
        let c1_tilde = ea * (b * t.sqrt() * k).max(1.0);
        let sqrt_reading = a.sqrt() * t.sqrt() * c1_tilde + b.sqrt() * k;
        let linear_reading = a * t.sqrt() * c1_tilde + b * k;
        let (c2_tilde, c2_tilde_binding) = if linear_reading > sqrt_reading {
            (linear_reading, VelocityReading::Linear)
        } else {
            (sqrt_reading, VelocityReading::SquareRoot)
        };
        let moment = m0.moment_alpha(alpha)?;
        let r_star = c2_tilde.powf(alpha) * (moment + 1.0);
        let r_reference = crate::dynamics::reference_moment_bound(dynamics, m0, alpha)?;
        let kappa = a.max(a.sqrt()) * t.sqrt() * c1_tilde * (1.0 + m0.first_moment()) + b.max(b.sqrt()) * k;
        let q1 = match (growth.c3, growth.c4) {
            (Some(c3), Some(c4)) if c3 >= 0.0 && c4 >= 0.0 => {
                let tail = if c3 > 0.0 {
                    (c4 / c3) * (1.0 - (-2.0 * c3 * t).exp())
                } else {
                    2.0 * c4 * t
                };
                let p_sup = (growth.g_grad_sup.powi(2) + tail).sqrt();
                Some(growth.c2 * (1.0 + c1_tilde + p_sup))
            }
            _ => None,
        };
        let value_lipschitz =
            growth.l_grad_x * ea * (t + t.sqrt() * k) + growth.g_grad_sup * ea;
        Ok(Self {
            growth,
            alpha,
            k,
            c1_tilde,
            c2_tilde,
            c2_tilde_binding,
            r_star,
            r_reference,
            r_default: r_star.max(r_reference),
            kappa,
            q1,
            value_lipschitz,
        })
    }
}

/// Observed quantities divided by their a-priori bounds; all three should be
/// at most one.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct BoundRatios {
    /// `‖u*‖₂ / K`
    pub control: f64,
    /// `‖γ*‖_∞ / (C̃₁(1 + |x|))`
    pub state: f64,
    /// `‖γ̇*‖₂ / (C̃₂(1 + |x|))`
    pub velocity: f64,
}

impl BoundRatios {
    pub fn max(self, other: BoundRatios) -> BoundRatios {
        BoundRatios {
            control: self.control.max(other.control),
            state: self.state.max(other.state),
            velocity: self.velocity.max(other.velocity),
        }
    }

    pub fn within(&self, factor: f64) -> bool {
        self.control <= factor && self.state <= factor && self.velocity <= factor
    }
}

impl AprioriBounds {
    /// Compares an optimal path with the estimates.
    pub fn ratios(&self, dynamics: &LinearDynamics, path: &Path, dt: f64) -> BoundRatios {
        let scale = 1.0 + crate::linalg::norm(path.initial_state());
        let ratio = |v: f64, b: f64| if v == 0.0 { 0.0 } else { v / b };
        BoundRatios {
            control: ratio(path.control_l2(dt), self.k),
            state: ratio(path.state_sup(), self.c1_tilde * scale),
            velocity: ratio(path.velocity_l2(dynamics, dt), self.c2_tilde * scale),
        }
    }
}

/// Estimates for `model` on the working ball of `m₀` (or the given radius).
pub fn apriori_bounds(
    dynamics: &LinearDynamics,
    model: &dyn LagrangianModel,
    m0: &ParticleMeasure,
    alpha: f64,
    radius: Option<f64>,
) -> Result<AprioriBounds> {
    let radius = radius.unwrap_or_else(|| AprioriBounds::working_radius(dynamics, m0));
    let growth = model.growth_constants(dynamics, radius).ok_or_else(|| {
        Error::InvalidModel("model does not declare growth constants".into())
    })?;
    AprioriBounds::from_constants(dynamics, growth, m0, alpha)
}
