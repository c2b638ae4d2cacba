//! Lagrangian models and the Hamiltonian
//! `H(x, p, m) = sup_u { −⟨p, Ax + Bu⟩ − L(x, u, m) }` with `L = ℓ + F`.
//!
//! The supremum is computed by damped Newton on the strictly concave inner
//! problem, so `H` is available for any model that is uniformly convex in `u`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dynamics::LinearDynamics;
use crate::error::{invalid, Error, Result};
use crate::linalg::{dot, mat_t_vec_acc, mat_vec_acc, norm, spectral_norm};
use crate::measures::ParticleMeasure;

/// Running cost `ℓ(x, u)`, coupling `F(x, m)` and terminal cost `G(x, m)`
/// with their first derivatives.
///
/// Implementations must be re-entrant: evaluators take `&self` and are called
/// from several threads at once.
pub trait LagrangianModel: Send + Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;

    fn running_cost(&self, x: &[f64], u: &[f64]) -> f64;
    /// Writes `D_xℓ(x, u)` into `out`.
    fn running_grad_x(&self, x: &[f64], u: &[f64], out: &mut [f64]);
    /// Writes `D_uℓ(x, u)` into `out`.
    fn running_grad_u(&self, x: &[f64], u: &[f64], out: &mut [f64]);
    /// `D²_uuℓ(x, u)`, a `k × k` matrix.
    fn running_hess_uu(&self, x: &[f64], u: &[f64]) -> DMatrix<f64>;

    /// `D²_xuℓ(x, u)` as a `k × d` matrix. Central differences of
    /// [`running_grad_u`](Self::running_grad_u) unless overridden.
    fn running_hess_xu(&self, x: &[f64], u: &[f64]) -> DMatrix<f64> {
        let (d, k) = (self.state_dim(), self.control_dim());
        let mut out = DMatrix::zeros(k, d);
        let mut xp = x.to_vec();
        let mut gp = vec![0.0; k];
        let mut gm = vec![0.0; k];
        for j in 0..d {
            let h = 1e-6 * (1.0 + x[j].abs());
            xp[j] = x[j] + h;
            self.running_grad_u(&xp, u, &mut gp);
            xp[j] = x[j] - h;
            self.running_grad_u(&xp, u, &mut gm);
            xp[j] = x[j];
            for i in 0..k {
                out[(i, j)] = (gp[i] - gm[i]) / (2.0 * h);
            }
        }
        out
    }

    fn coupling(&self, x: &[f64], m: &ParticleMeasure) -> f64;
    fn coupling_grad_x(&self, x: &[f64], m: &ParticleMeasure, out: &mut [f64]);
    fn terminal(&self, x: &[f64], m: &ParticleMeasure) -> f64;
    fn terminal_grad_x(&self, x: &[f64], m: &ParticleMeasure, out: &mut [f64]);

    /// Declared constants of the strict Tonelli conditions, valid for states
    /// and measure supports in the ball of the given radius.
    fn tonelli_constants(&self, _radius: f64) -> Option<TonelliConstants> {
        None
    }

    /// Growth constants used by the a-priori bounds, valid on the ball of the
    /// given radius.
    fn growth_constants(&self, _dynamics: &LinearDynamics, _radius: f64) -> Option<GrowthConstants> {
        None
    }
}

/// Constants of the strict Tonelli conditions and of the semiconcavity and
/// measure-Lipschitz assumptions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TonelliConstants {
    /// `I/C₀ ≤ D²_uuL ≤ C₀ I`
    pub c0: f64,
    /// `‖D²_xuL‖ ≤ C₁(1 + |u|)`
    pub c1: f64,
    /// `|L(x,0,m)| + |D_xL(x,0,m)| + |D_uL(x,0,m)| ≤ C₂`
    pub c2: f64,
    /// Lipschitz constant of `m ↦ L(x, u, m)` in `d₁`.
    pub q_l: f64,
    pub w_l: f64,
    pub w_g: f64,
}

/// Constants entering the a-priori estimates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GrowthConstants {
    /// `c₀|u|² − c₁ ≤ L ≤ c₁ + |u|²/c₀`
    pub c0: f64,
    pub c1: f64,
    /// `|D_pH(x,p,m)| ≤ c₂(1 + |x| + |p|)`
    pub c2: f64,
    /// Declared `(H1)` constants: `⟨D_xH, p⟩ ≥ c₃|p|² − c₄`.
    pub c3: Option<f64>,
    pub c4: Option<f64>,
    /// `sup |G|` over the ball.
    pub g_sup: f64,
    /// `sup |D_xG|` over the ball.
    pub g_grad_sup: f64,
    /// `|D_xL(x,u,m)| ≤ l(1 + |u|)` over the ball.
    pub l_grad_x: f64,
    pub radius: f64,
}

/// `L(x, u, m) = ℓ(x, u) + F(x, m)`
pub fn lagrangian(model: &dyn LagrangianModel, x: &[f64], u: &[f64], m: &ParticleMeasure) -> f64 {
    model.running_cost(x, u) + model.coupling(x, m)
}

/// Writes `D_xL(x, u, m)` into `out`.
pub fn lagrangian_grad_x(
    model: &dyn LagrangianModel,
    x: &[f64],
    u: &[f64],
    m: &ParticleMeasure,
    out: &mut [f64],
) {
    let mut tmp = vec![0.0; out.len()];
    model.running_grad_x(x, u, out);
    model.coupling_grad_x(x, m, &mut tmp);
    out.iter_mut().zip(&tmp).for_each(|(o, t)| *o += t);
}

/// Coupling `Ψ(x, m)` shared by the running coupling `F` and the terminal
/// part of `G`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Coupling {
    None,
    /// `θ⟨x, mean(m)⟩`
    MeanField { strength: f64 },
    /// `θ Σ_j w_j exp(−|x − x_j|²/(2σ²))`
    Convolution { strength: f64, width: f64 },
}

impl Coupling {
    pub fn value(&self, x: &[f64], m: &ParticleMeasure) -> f64 {
        match *self {
            Coupling::None => 0.0,
            Coupling::MeanField { strength } => strength * dot(x, m.mean()),
            Coupling::Convolution { strength, width } => {
                let s2 = 2.0 * width * width;
                strength
                    * m.iter()
                        .map(|(y, w)| w * (-sq_dist(x, y) / s2).exp())
                        .sum::<f64>()
            }
        }
    }

    pub fn grad_x(&self, x: &[f64], m: &ParticleMeasure, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        match *self {
            Coupling::None => {}
            Coupling::MeanField { strength } => {
                for (o, c) in out.iter_mut().zip(m.mean()) {
                    *o = strength * c;
                }
            }
            Coupling::Convolution { strength, width } => {
                let s2 = width * width;
                for (y, w) in m.iter() {
                    let g = w * (-sq_dist(x, y) / (2.0 * s2)).exp();
                    for ((o, xi), yi) in out.iter_mut().zip(x).zip(y) {
                        *o -= strength * g * (xi - yi) / s2;
                    }
                }
            }
        }
    }

    /// `sup |Ψ|` and `sup |D_xΨ|` for states and supports in the ball.
    fn bounds(&self, radius: f64) -> (f64, f64) {
        match *self {
            Coupling::None => (0.0, 0.0),
            Coupling::MeanField { strength } => {
                (strength.abs() * radius * radius, strength.abs() * radius)
            }
            Coupling::Convolution { strength, width } => (
                strength.abs(),
                strength.abs() / (width * std::f64::consts::E.sqrt()),
            ),
        }
    }

    /// Lipschitz constant in `d₁` for `x` in the ball.
    fn measure_lipschitz(&self, radius: f64) -> f64 {
        self.bounds(radius).1
    }

    /// Upper bound on the largest eigenvalue of `D²_xxΨ`.
    fn semiconcavity(&self) -> f64 {
        match *self {
            Coupling::Convolution { strength, width } => strength.abs() / (width * width),
            _ => 0.0,
        }
    }

    fn validate(&self, what: &str) -> Result<()> {
        match *self {
            Coupling::None => Ok(()),
            Coupling::MeanField { strength } if strength.is_finite() => Ok(()),
            Coupling::Convolution { strength, width }
                if strength.is_finite() && width.is_finite() && width > 0.0 =>
            {
                Ok(())
            }
            _ => Err(Error::InvalidModel(format!("{what} coupling has invalid parameters"))),
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `ℓ(x, u) = ½⟨u, Ru⟩ + ⟨u, Sx⟩ + ½⟨x, Qx⟩`, `F` and the terminal coupling
/// chosen from [`Coupling`], `G(x, m) = ½⟨x, Q_T x⟩ + Ψ_T(x, m)`.
#[derive(Debug, Clone)]
pub struct QuadraticModel {
    r: DMatrix<f64>,
    s: DMatrix<f64>,
    q: DMatrix<f64>,
    q_terminal: DMatrix<f64>,
    coupling: Coupling,
    terminal_coupling: Coupling,
    h1: Option<(f64, f64)>,
    r_min: f64,
    r_max: f64,
}

impl QuadraticModel {
    /// `ℓ = ½|u|²`, no state cost, no coupling, `G = 0`.
    pub fn control_energy(d: usize, k: usize) -> Self {
        Self::new(
            DMatrix::identity(k, k),
            DMatrix::zeros(k, d),
            DMatrix::zeros(d, d),
            DMatrix::zeros(d, d),
            Coupling::None,
            Coupling::None,
        )
        .expect("identity weights are valid")
    }

    pub fn new(
        r: DMatrix<f64>,
        s: DMatrix<f64>,
        q: DMatrix<f64>,
        q_terminal: DMatrix<f64>,
        coupling: Coupling,
        terminal_coupling: Coupling,
    ) -> Result<Self> {
        let k = r.nrows();
        let d = q.nrows();
        let bad = |m: &str| Err(Error::InvalidModel(m.to_string()));
        if k == 0 || r.ncols() != k {
            return bad("R must be square with k >= 1");
        }
        if d == 0 || q.ncols() != d || q_terminal.shape() != (d, d) {
            return bad("Q and Q_T must be d x d");
        }
        if s.shape() != (k, d) {
            return bad("S must be k x d");
        }
        for (name, m) in [("R", &r), ("Q", &q), ("Q_T", &q_terminal)] {
            if m.iter().any(|v| !v.is_finite()) || (m - m.transpose()).amax() > 1e-12 {
                return Err(Error::InvalidModel(format!("{name} must be finite and symmetric")));
            }
        }
        if s.iter().any(|v| !v.is_finite()) {
            return bad("S must be finite");
        }
        let eig = r.clone().symmetric_eigen().eigenvalues;
        let r_min = eig.min();
        let r_max = eig.max();
        if r_min <= 0.0 {
            return bad("R must be positive definite");
        }
        coupling.validate("running")?;
        terminal_coupling.validate("terminal")?;
        Ok(Self {
            r,
            s,
            q,
            q_terminal,
            coupling,
            terminal_coupling,
            h1: None,
            r_min,
            r_max,
        })
    }

    /// Declares the `(H1)` constants reported through [`GrowthConstants`].
    pub fn with_h1_constants(mut self, c3: f64, c4: f64) -> Self {
        self.h1 = Some((c3, c4));
        self
    }

    pub fn with_coupling(mut self, coupling: Coupling) -> Result<Self> {
        coupling.validate("running")?;
        self.coupling = coupling;
        Ok(self)
    }

    pub fn with_terminal_coupling(mut self, coupling: Coupling) -> Result<Self> {
        coupling.validate("terminal")?;
        self.terminal_coupling = coupling;
        Ok(self)
    }

    pub fn with_terminal_weight(mut self, q_terminal: DMatrix<f64>) -> Result<Self> {
        let d = self.q.nrows();
        if q_terminal.shape() != (d, d) || (&q_terminal - q_terminal.transpose()).amax() > 1e-12 {
            return Err(Error::InvalidModel("Q_T must be symmetric d x d".into()));
        }
        self.q_terminal = q_terminal;
        Ok(self)
    }

    pub fn with_state_weight(mut self, q: DMatrix<f64>) -> Result<Self> {
        let d = self.q.nrows();
        if q.shape() != (d, d) || (&q - q.transpose()).amax() > 1e-12 {
            return Err(Error::InvalidModel("Q must be symmetric d x d".into()));
        }
        self.q = q;
        Ok(self)
    }

    pub fn coupling_kind(&self) -> Coupling {
        self.coupling
    }

    pub fn terminal_coupling_kind(&self) -> Coupling {
        self.terminal_coupling
    }
}

impl LagrangianModel for QuadraticModel {
    fn state_dim(&self) -> usize {
        self.q.nrows()
    }

    fn control_dim(&self) -> usize {
        self.r.nrows()
    }

    fn running_cost(&self, x: &[f64], u: &[f64]) -> f64 {
        let mut ru = vec![0.0; u.len()];
        mat_vec_acc(&self.r, u, &mut ru);
        let mut sx = vec![0.0; u.len()];
        mat_vec_acc(&self.s, x, &mut sx);
        let mut qx = vec![0.0; x.len()];
        mat_vec_acc(&self.q, x, &mut qx);
        0.5 * dot(u, &ru) + dot(u, &sx) + 0.5 * dot(x, &qx)
    }

    fn running_grad_x(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        mat_vec_acc(&self.q, x, out);
        mat_t_vec_acc(&self.s, u, out);
    }

    fn running_grad_u(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        mat_vec_acc(&self.r, u, out);
        mat_vec_acc(&self.s, x, out);
    }

    fn running_hess_uu(&self, _x: &[f64], _u: &[f64]) -> DMatrix<f64> {
        self.r.clone()
    }

    fn running_hess_xu(&self, _x: &[f64], _u: &[f64]) -> DMatrix<f64> {
        self.s.clone()
    }

    fn coupling(&self, x: &[f64], m: &ParticleMeasure) -> f64 {
        self.coupling.value(x, m)
    }

    fn coupling_grad_x(&self, x: &[f64], m: &ParticleMeasure, out: &mut [f64]) {
        self.coupling.grad_x(x, m, out)
    }

    fn terminal(&self, x: &[f64], m: &ParticleMeasure) -> f64 {
        let mut qx = vec![0.0; x.len()];
        mat_vec_acc(&self.q_terminal, x, &mut qx);
        0.5 * dot(x, &qx) + self.terminal_coupling.value(x, m)
    }

    fn terminal_grad_x(&self, x: &[f64], m: &ParticleMeasure, out: &mut [f64]) {
        self.terminal_coupling.grad_x(x, m, out);
        mat_vec_acc(&self.q_terminal, x, out);
    }

    fn tonelli_constants(&self, radius: f64) -> Option<TonelliConstants> {
        let q = spectral_norm(&self.q);
        let s = spectral_norm(&self.s);
        let (f_sup, f_grad) = self.coupling.bounds(radius);
        let q_max = self.q.clone().symmetric_eigen().eigenvalues.max().max(0.0);
        let qt_max = self
            .q_terminal
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .max()
            .max(0.0);
        Some(TonelliConstants {
            c0: self.r_max.max(1.0 / self.r_min),
            c1: s,
            c2: 0.5 * q * radius * radius + f_sup + q * radius + f_grad + s * radius,
            q_l: self.coupling.measure_lipschitz(radius),
            w_l: q_max + self.coupling.semiconcavity(),
            w_g: qt_max + self.terminal_coupling.semiconcavity(),
        })
    }

    fn growth_constants(&self, dynamics: &LinearDynamics, radius: f64) -> Option<GrowthConstants> {
        let q = spectral_norm(&self.q);
        let s = spectral_norm(&self.s);
        let (f_sup, f_grad) = self.coupling.bounds(radius);
        let (gc_sup, gc_grad) = self.terminal_coupling.bounds(radius);
        let qt = spectral_norm(&self.q_terminal);
        let r2 = radius * radius;
        // Young's inequality on the cross term: s|u||x| ≤ λ|u|²/4 + s²|x|²/λ
        // below and ≤ |u|²/2 + s²|x|²/2 above.
        let (lower, upper, shift) = if s == 0.0 {
            (0.5 * self.r_min, 0.5 * self.r_max, 0.0)
        } else {
            (
                0.25 * self.r_min,
                0.5 * (self.r_max + 1.0),
                (s * s * r2 / self.r_min).max(0.5 * s * s * r2),
            )
        };
        let c0 = lower.min(1.0 / upper);
        let c1 = 0.5 * q * r2 + f_sup + shift;
        let (a, b) = (dynamics.a_norm(), dynamics.b_norm());
        let c2 = (a + b * s / self.r_min).max(b * b / self.r_min);
        Some(GrowthConstants {
            c0,
            c1,
            c2,
            c3: self.h1.map(|h| h.0),
            c4: self.h1.map(|h| h.1),
            g_sup: 0.5 * qt * r2 + gc_sup,
            g_grad_sup: qt * radius + gc_grad,
            l_grad_x: (q * radius + f_grad).max(s),
            radius,
        })
    }
}

/// Attained value and maximizer of the inner problem.
#[derive(Debug, Clone, PartialEq)]
pub struct HamiltonianValue {
    pub h: f64,
    pub u_star: Vec<f64>,
    pub iterations: usize,
}

const NEWTON_MAX_ITER: usize = 100;
const NEWTON_TOL: f64 = 1e-10;

/// Minimizes `ψ(u) = ⟨Bᵀp, u⟩ + ℓ(x, u)` from `u0` by damped Newton.
fn newton_inner(
    b: &DMatrix<f64>,
    model: &dyn LagrangianModel,
    x: &[f64],
    p: &[f64],
    u0: &[f64],
) -> Result<(Vec<f64>, usize)> {
    let k = b.ncols();
    let mut btp = vec![0.0; k];
    mat_t_vec_acc(b, p, &mut btp);
    let psi = |u: &[f64]| dot(&btp, u) + model.running_cost(x, u);
    let mut u = u0.to_vec();
    let mut g = vec![0.0; k];
    let mut trial = vec![0.0; k];
    let mut f = psi(&u);
    for it in 0..NEWTON_MAX_ITER {
        model.running_grad_u(x, &u, &mut g);
        g.iter_mut().zip(&btp).for_each(|(gi, bi)| *gi += bi);
        let gn = norm(&g);
        if !gn.is_finite() || !f.is_finite() {
            return Err(Error::InvalidModel(format!(
                "running cost is not finite at x = {x:?}, u = {u:?}"
            )));
        }
        if gn <= NEWTON_TOL {
            return Ok((u, it));
        }
        let mut hess = model.running_hess_uu(x, &u);
        let rhs = -DVector::from_column_slice(&g);
        let mut shift = 0.0;
        let step = loop {
            if let Some(ch) = hess.clone().cholesky() {
                break ch.solve(&rhs);
            }
            shift = if shift == 0.0 { 1e-10 * (1.0 + hess.amax()) } else { shift * 10.0 };
            for i in 0..k {
                hess[(i, i)] += shift;
            }
            if shift > 1e12 {
                break rhs.clone();
            }
        };
        let slope = dot(&g, step.as_slice());
        if -slope <= 1e-12 * (1.0 + f.abs()) {
            // The predicted decrease is below round-off, so the Armijo test
            // is meaningless; keep a full step that shrinks the gradient.
            for i in 0..k {
                trial[i] = u[i] + step[i];
            }
            let mut gt = vec![0.0; k];
            model.running_grad_u(x, &trial, &mut gt);
            gt.iter_mut().zip(&btp).for_each(|(gi, bi)| *gi += bi);
            if norm(&gt) < gn {
                u.copy_from_slice(&trial);
                f = psi(&u);
                continue;
            }
        }
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            for i in 0..k {
                trial[i] = u[i] + t * step[i];
            }
            let ft = psi(&trial);
            if ft <= f + 1e-4 * t * slope {
                u.copy_from_slice(&trial);
                f = ft;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            if gn <= 1e-8 * (1.0 + norm(&btp)) {
                return Ok((u, it));
            }
            return Err(Error::NumericalFailure {
                message: format!("inner maximization line search failed, |grad| = {gn:e}"),
                iterations: it,
                last_iterate: u,
            });
        }
    }
    model.running_grad_u(x, &u, &mut g);
    g.iter_mut().zip(&btp).for_each(|(gi, bi)| *gi += bi);
    let gn = norm(&g);
    if gn <= 1e-8 * (1.0 + norm(&btp)) {
        return Ok((u, NEWTON_MAX_ITER));
    }
    Err(Error::NumericalFailure {
        message: format!("inner maximization did not converge, |grad| = {gn:e}"),
        iterations: NEWTON_MAX_ITER,
        last_iterate: u,
    })
}

/// `sup_u { −⟨p, ax + bu⟩ − L(x, u, m) }` for arbitrary drift matrices, used
/// with the discrete-time drift in the PMP certificate.
pub(crate) fn maximize_pseudo_hamiltonian(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    model: &dyn LagrangianModel,
    x: &[f64],
    p: &[f64],
    m: &ParticleMeasure,
) -> Result<HamiltonianValue> {
    let k = b.ncols();
    let mut u0 = vec![0.0; k];
    mat_t_vec_acc(b, p, &mut u0);
    u0.iter_mut().for_each(|v| *v = -*v);
    let (u, iterations) = newton_inner(b, model, x, p, &u0)?;
    let mut drift = vec![0.0; x.len()];
    mat_vec_acc(a, x, &mut drift);
    mat_vec_acc(b, &u, &mut drift);
    let h = -dot(p, &drift) - lagrangian(model, x, &u, m);
    Ok(HamiltonianValue {
        h,
        u_star: u,
        iterations,
    })
}

fn check_dims(dynamics: &LinearDynamics, model: &dyn LagrangianModel, x: &[f64], p: &[f64]) -> Result<()> {
    if model.state_dim() != dynamics.state_dim() || model.control_dim() != dynamics.control_dim() {
        return Err(Error::InvalidModel(format!(
            "model is defined for (d, k) = ({}, {}), dynamics for ({}, {})",
            model.state_dim(),
            model.control_dim(),
            dynamics.state_dim(),
            dynamics.control_dim()
        )));
    }
    if x.len() != dynamics.state_dim() || p.len() != dynamics.state_dim() {
        return Err(invalid("state and covector must have length d"));
    }
    Ok(())
}

/// `H(x, p, m)` and its maximizer `u*`.
pub fn legendre_hamiltonian(
    dynamics: &LinearDynamics,
    model: &dyn LagrangianModel,
    x: &[f64],
    p: &[f64],
    m: &ParticleMeasure,
) -> Result<HamiltonianValue> {
    check_dims(dynamics, model, x, p)?;
    maximize_pseudo_hamiltonian(dynamics.a(), dynamics.b(), model, x, p, m)
}

/// Envelope-theorem derivatives of `H`.
#[derive(Debug, Clone, PartialEq)]
pub struct HamiltonianGrad {
    pub h: f64,
    pub u_star: Vec<f64>,
    /// `D_xH = −Aᵀp − D_xL(x, u*, m)`
    pub dx: Vec<f64>,
    /// `D_pH = −(Ax + Bu*)`
    pub dp: Vec<f64>,
}

pub fn hamiltonian_grad(
    dynamics: &LinearDynamics,
    model: &dyn LagrangianModel,
    x: &[f64],
    p: &[f64],
    m: &ParticleMeasure,
) -> Result<HamiltonianGrad> {
    check_dims(dynamics, model, x, p)?;
    pseudo_hamiltonian_grad(dynamics.a(), dynamics.b(), model, x, p, m)
}

pub(crate) fn pseudo_hamiltonian_grad(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    model: &dyn LagrangianModel,
    x: &[f64],
    p: &[f64],
    m: &ParticleMeasure,
) -> Result<HamiltonianGrad> {
    let hv = maximize_pseudo_hamiltonian(a, b, model, x, p, m)?;
    let d = x.len();
    let mut dp = vec![0.0; d];
    mat_vec_acc(a, x, &mut dp);
    mat_vec_acc(b, &hv.u_star, &mut dp);
    dp.iter_mut().for_each(|v| *v = -*v);
    let mut lx = vec![0.0; d];
    lagrangian_grad_x(model, x, &hv.u_star, m, &mut lx);
    let mut dx = vec![0.0; d];
    mat_t_vec_acc(a, p, &mut dx);
    dx.iter_mut().zip(&lx).for_each(|(v, l)| *v = -*v - l);
    Ok(HamiltonianGrad {
        h: hv.h,
        u_star: hv.u_star,
        dx,
        dp,
    })
}

/// The closed form `−⟨p, Ax⟩ + |Bᵀp|² − L(x, −Bᵀp, m)`, which coincides with
/// `H` exactly when `D_uℓ(x, u) = u`.
pub fn explicit_hamiltonian(
    dynamics: &LinearDynamics,
    model: &dyn LagrangianModel,
    x: &[f64],
    p: &[f64],
    m: &ParticleMeasure,
) -> Result<f64> {
    check_dims(dynamics, model, x, p)?;
    let mut btp = vec![0.0; dynamics.control_dim()];
    mat_t_vec_acc(dynamics.b(), p, &mut btp);
    let mut ax = vec![0.0; x.len()];
    mat_vec_acc(dynamics.a(), x, &mut ax);
    let u: Vec<f64> = btp.iter().map(|v| -v).collect();
    Ok(-dot(p, &ax) + dot(&btp, &btp) - lagrangian(model, x, &u, m))
}

/// Region sampled by the assumption checkers.
#[derive(Debug, Clone)]
pub struct SampleBox {
    /// States are drawn from `[−r, r]^d`.
    pub state_radius: f64,
    /// Controls (Tonelli check) or covectors ((H1) check) from `[−r, r]^·`.
    pub dual_radius: f64,
    /// Measures paired with the samples, cycled through.
    pub measures: Vec<ParticleMeasure>,
    pub seed: u64,
}

impl SampleBox {
    fn validate(&self, d: usize) -> Result<()> {
        if !(self.state_radius >= 0.0 && self.dual_radius >= 0.0) {
            return Err(invalid("sample radii must be nonnegative"));
        }
        if self.measures.is_empty() || self.measures.iter().any(|m| m.dim() != d) {
            return Err(invalid("sample box needs measures on R^d"));
        }
        Ok(())
    }
}

fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, r: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..=1.0) * r).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TonelliReport {
    pub samples: usize,
    /// Smallest and largest eigenvalue of `D²_uuL` seen.
    pub hess_min_eig: f64,
    pub hess_max_eig: f64,
    /// `max(λ_max, 1/λ_min)`; infinite when `λ_min ≤ 0`.
    pub c0_fitted: f64,
    /// `max ‖D²_xuL‖/(1 + |u|)`
    pub c1_fitted: f64,
    /// `max |L(x,0,m)| + |D_xL(x,0,m)| + |D_uL(x,0,m)|`
    pub c2_fitted: f64,
    pub c0_pass: bool,
    pub c1_pass: bool,
    pub c2_pass: bool,
    /// Largest violation of `c₀|u|² − c₁ ≤ L ≤ c₁ + |u|²/c₀`, if growth
    /// constants are declared.
    pub growth_violation: Option<f64>,
    pub pass: bool,
}

/// Samples the strict Tonelli conditions. Samples include `u = 0` at every
/// drawn state. Fitted constants are compared with the declared ones when
/// the model provides them, otherwise only finiteness is required.
pub fn check_tonelli(
    dynamics: &LinearDynamics,
    model: &dyn LagrangianModel,
    region: &SampleBox,
    n_samples: usize,
) -> Result<TonelliReport> {
    let (d, k) = (model.state_dim(), model.control_dim());
    region.validate(d)?;
    let mut rng = ChaCha8Rng::seed_from_u64(region.seed);
    let mut hess_min = f64::INFINITY;
    let mut hess_max = f64::NEG_INFINITY;
    let mut c1 = 0.0_f64;
    let mut c2 = 0.0_f64;
    let mut growth_violation: Option<f64> = None;
    let growth = model.growth_constants(dynamics, region.state_radius);
    let zero = vec![0.0; k];
    let mut gx = vec![0.0; d];
    let mut gu = vec![0.0; k];
    for s in 0..n_samples {
        let m = &region.measures[s % region.measures.len()];
        let x = uniform_vec(&mut rng, d, region.state_radius);
        let u = if s % 2 == 0 {
            zero.clone()
        } else {
            uniform_vec(&mut rng, k, region.dual_radius)
        };
        let eig = model.running_hess_uu(&x, &u).symmetric_eigen().eigenvalues;
        hess_min = hess_min.min(eig.min());
        hess_max = hess_max.max(eig.max());
        c1 = c1.max(spectral_norm(&model.running_hess_xu(&x, &u)) / (1.0 + norm(&u)));
        lagrangian_grad_x(model, &x, &zero, m, &mut gx);
        model.running_grad_u(&x, &zero, &mut gu);
        c2 = c2.max(lagrangian(model, &x, &zero, m).abs() + norm(&gx) + norm(&gu));
        if let Some(g) = growth {
            let l = lagrangian(model, &x, &u, m);
            let u2 = dot(&u, &u);
            let v = (g.c0 * u2 - g.c1 - l).max(l - g.c1 - u2 / g.c0).max(0.0);
            growth_violation = Some(growth_violation.unwrap_or(0.0).max(v));
        }
    }
    let c0_fitted = if hess_min > 0.0 {
        hess_max.max(1.0 / hess_min)
    } else {
        f64::INFINITY
    };
    let declared = model.tonelli_constants(region.state_radius);
    let slack = |fitted: f64, declared: Option<f64>| {
        fitted.is_finite() && declared.is_none_or(|c| fitted <= c * (1.0 + 1e-9) + 1e-12)
    };
    let c0_pass = slack(c0_fitted, declared.map(|c| c.c0));
    let c1_pass = slack(c1, declared.map(|c| c.c1));
    let c2_pass = slack(c2, declared.map(|c| c.c2));
    let growth_ok = growth_violation.is_none_or(|v| v <= 1e-9);
    Ok(TonelliReport {
        samples: n_samples,
        hess_min_eig: hess_min,
        hess_max_eig: hess_max,
        c0_fitted,
        c1_fitted: c1,
        c2_fitted: c2,
        c0_pass,
        c1_pass,
        c2_pass,
        growth_violation,
        pass: c0_pass && c1_pass && c2_pass && growth_ok,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct H1Report {
    pub samples: usize,
    pub c3_declared: f64,
    pub c4_declared: f64,
    /// Largest `c₃` compatible with the declared `c₄` over the samples.
    pub c3_hat: f64,
    /// Smallest `c₄` compatible with the declared `c₃` over the samples.
    pub c4_hat: f64,
    pub pass: bool,
}

/// Samples `⟨D_xH(x, p, m), p⟩ ≥ c₃|p|² − c₄` for the declared constants.
pub fn check_h1(
    dynamics: &LinearDynamics,
    model: &dyn LagrangianModel,
    region: &SampleBox,
    n_samples: usize,
    c3: f64,
    c4: f64,
) -> Result<H1Report> {
    let d = model.state_dim();
    region.validate(d)?;
    let mut rng = ChaCha8Rng::seed_from_u64(region.seed);
    let mut c3_hat = f64::INFINITY;
    let mut c4_hat = f64::NEG_INFINITY;
    for s in 0..n_samples {
        let m = &region.measures[s % region.measures.len()];
        let x = uniform_vec(&mut rng, d, region.state_radius);
        let p = uniform_vec(&mut rng, d, region.dual_radius);
        let g = hamiltonian_grad(dynamics, model, &x, &p, m)?;
        let q = dot(&g.dx, &p);
        let p2 = dot(&p, &p);
        c4_hat = c4_hat.max(c3 * p2 - q);
        if p2 > 0.0 {
            c3_hat = c3_hat.min((q + c4) / p2);
        }
    }
    Ok(H1Report {
        samples: n_samples,
        c3_declared: c3,
        c4_declared: c4,
        c3_hat,
        c4_hat,
        pass: c4_hat <= c4 + 1e-9 * (1.0 + c4.abs()),
    })
}

/// Fits `c₂` in `|D_pH| ≤ c₂(1 + |x| + |p|)` over the sample box.
pub fn fit_hamiltonian_growth(
    dynamics: &LinearDynamics,
    model: &dyn LagrangianModel,
    region: &SampleBox,
    n_samples: usize,
) -> Result<f64> {
    let d = model.state_dim();
    region.validate(d)?;
    let mut rng = ChaCha8Rng::seed_from_u64(region.seed);
    let mut c2 = 0.0_f64;
    for s in 0..n_samples {
        let m = &region.measures[s % region.measures.len()];
        let x = uniform_vec(&mut rng, d, region.state_radius);
        let p = uniform_vec(&mut rng, d, region.dual_radius);
        let g = hamiltonian_grad(dynamics, model, &x, &p, m)?;
        c2 = c2.max(norm(&g.dp) / (1.0 + norm(&x) + norm(&p)));
    }
    Ok(c2)
}

#[cfg(test)]
pub(crate) mod test_models {
    use super::*;

    /// `ℓ = |u|⁴` on `d = k = 1`.
    pub struct Quartic;

    impl LagrangianModel for Quartic {
        fn state_dim(&self) -> usize {
            1
        }
        fn control_dim(&self) -> usize {
            1
        }
        fn running_cost(&self, _x: &[f64], u: &[f64]) -> f64 {
            u[0].powi(4)
        }
        fn running_grad_x(&self, _x: &[f64], _u: &[f64], out: &mut [f64]) {
            out[0] = 0.0;
        }
        fn running_grad_u(&self, _x: &[f64], u: &[f64], out: &mut [f64]) {
            out[0] = 4.0 * u[0].powi(3);
        }
        fn running_hess_uu(&self, _x: &[f64], u: &[f64]) -> DMatrix<f64> {
            DMatrix::from_element(1, 1, 12.0 * u[0] * u[0])
        }
        fn coupling(&self, _x: &[f64], _m: &ParticleMeasure) -> f64 {
            0.0
        }
        fn coupling_grad_x(&self, _x: &[f64], _m: &ParticleMeasure, out: &mut [f64]) {
            out[0] = 0.0;
        }
        fn terminal(&self, _x: &[f64], _m: &ParticleMeasure) -> f64 {
            0.0
        }
        fn terminal_grad_x(&self, _x: &[f64], _m: &ParticleMeasure, out: &mut [f64]) {
            out[0] = 0.0;
        }
    }

    /// `ℓ = ½u² + sin(x)u` on `d = k = 1`, mixed derivative left to the
    /// finite-difference default.
    pub struct SineCross;

    impl LagrangianModel for SineCross {
        fn state_dim(&self) -> usize {
            1
        }
        fn control_dim(&self) -> usize {
            1
        }
        fn running_cost(&self, x: &[f64], u: &[f64]) -> f64 {
            0.5 * u[0] * u[0] + x[0].sin() * u[0]
        }
        fn running_grad_x(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
            out[0] = x[0].cos() * u[0];
        }
        fn running_grad_u(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
            out[0] = u[0] + x[0].sin();
        }
        fn running_hess_uu(&self, _x: &[f64], _u: &[f64]) -> DMatrix<f64> {
            DMatrix::identity(1, 1)
        }
        fn coupling(&self, _x: &[f64], _m: &ParticleMeasure) -> f64 {
            0.0
        }
        fn coupling_grad_x(&self, _x: &[f64], _m: &ParticleMeasure, out: &mut [f64]) {
            out[0] = 0.0;
        }
        fn terminal(&self, _x: &[f64], _m: &ParticleMeasure) -> f64 {
            0.0
        }
        fn terminal_grad_x(&self, _x: &[f64], _m: &ParticleMeasure, out: &mut [f64]) {
            out[0] = 0.0;
        }
        fn tonelli_constants(&self, _radius: f64) -> Option<TonelliConstants> {
            Some(TonelliConstants {
                c0: 1.0,
                c1: 1.0,
                c2: 2.0,
                q_l: 0.0,
                w_l: 1.0,
                w_g: 0.0,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::test_models::*;
    use super::*;
    use proptest::prelude::*;

    fn dyn1(a: f64, b: f64) -> LinearDynamics {
        LinearDynamics::from_rows(&[vec![a]], &[vec![b]], 1.0).unwrap()
    }

    fn dyn2() -> LinearDynamics {
        LinearDynamics::from_rows(
            &[vec![0.3, -1.0], vec![0.5, 0.1]],
            &[vec![1.0, 0.0], vec![0.4, 2.0]],
            1.0,
        )
        .unwrap()
    }

    fn delta0(d: usize) -> ParticleMeasure {
        ParticleMeasure::dirac(&vec![0.0; d]).unwrap()
    }

    fn mat(rows: usize, cols: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, cols, v)
    }

    #[test]
    fn quadratic_conjugate_identity_dynamics() {
        let dy = LinearDynamics::from_rows(&[vec![0.0, 0.0], vec![0.0, 0.0]], &[vec![1.0, 0.0], vec![0.0, 1.0]], 1.0)
            .unwrap();
        let model = QuadraticModel::control_energy(2, 2);
        let p = [0.7, -1.3];
        let hv = legendre_hamiltonian(&dy, &model, &[1.0, 2.0], &p, &delta0(2)).unwrap();
        assert!((hv.h - 0.5 * dot(&p, &p)).abs() < 1e-14);
        assert!((hv.u_star[0] + 0.7).abs() < 1e-14 && (hv.u_star[1] - 1.3).abs() < 1e-14);
    }

    #[test]
    fn quadratic_conjugate_matches_grid_search() {
        // Brute force over a fine control grid around the analytic maximizer.
        let dy = LinearDynamics::from_rows(&[vec![0.4]], &[vec![1.5]], 1.0).unwrap();
        let model = QuadraticModel::control_energy(1, 1);
        let (x, p) = ([0.8], [0.6]);
        let m = delta0(1);
        let hv = legendre_hamiltonian(&dy, &model, &x, &p, &m).unwrap();
        let mut best = f64::NEG_INFINITY;
        for i in 0..=40_000 {
            let u = -3.0 + 6.0 * i as f64 / 40_000.0;
            best = best.max(-p[0] * (0.4 * x[0] + 1.5 * u) - 0.5 * u * u);
        }
        assert!((hv.h - best).abs() < 1e-7);
        let closed = -p[0] * 0.4 * x[0] + 0.5 * (1.5 * p[0]).powi(2);
        assert!((hv.h - closed).abs() < 1e-13);
    }

    #[test]
    fn zero_covector() {
        let model = QuadraticModel::control_energy(1, 1);
        let hv = legendre_hamiltonian(&dyn1(0.0, 1.0), &model, &[2.0], &[0.0], &delta0(1)).unwrap();
        assert_eq!(hv.h, 0.0);
        assert_eq!(hv.u_star, vec![0.0]);
        let g = hamiltonian_grad(&dyn1(0.7, 1.0), &model, &[2.0], &[0.0], &delta0(1)).unwrap();
        assert!((g.dp[0] + 1.4).abs() < 1e-15);
    }

    #[test]
    fn gradient_without_state_dependence() {
        let dy = dyn2();
        let model = QuadraticModel::control_energy(2, 2);
        let p = [0.3, -0.8];
        let g = hamiltonian_grad(&dy, &model, &[1.0, -1.0], &p, &delta0(2)).unwrap();
        let mut atp = vec![0.0; 2];
        mat_t_vec_acc(dy.a(), &p, &mut atp);
        assert!((g.dx[0] + atp[0]).abs() < 1e-15 && (g.dx[1] + atp[1]).abs() < 1e-15);
    }

    #[test]
    fn gradient_with_mean_field_coupling() {
        let model = QuadraticModel::control_energy(1, 1)
            .with_coupling(Coupling::MeanField { strength: 1.0 })
            .unwrap();
        let m = ParticleMeasure::uniform(1, vec![0.5, 1.5]).unwrap();
        let g = hamiltonian_grad(&dyn1(0.0, 1.0), &model, &[0.3], &[0.9], &m).unwrap();
        assert!((g.dp[0] - 0.9).abs() < 1e-15);
        assert!((g.dx[0] + 1.0).abs() < 1e-15);
    }

    fn fd_check(dy: &LinearDynamics, model: &dyn LagrangianModel, x: &[f64], p: &[f64], m: &ParticleMeasure) {
        let g = hamiltonian_grad(dy, model, x, p, m).unwrap();
        let h = 1e-5;
        let eval = |x: &[f64], p: &[f64]| legendre_hamiltonian(dy, model, x, p, m).unwrap().h;
        for j in 0..x.len() {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[j] += h;
            xm[j] -= h;
            let fd = (eval(&xp, p) - eval(&xm, p)) / (2.0 * h);
            assert!((fd - g.dx[j]).abs() <= 1e-6 * (1.0 + g.dx[j].abs()), "dx {fd} vs {}", g.dx[j]);
            let mut pp = p.to_vec();
            let mut pm = p.to_vec();
            pp[j] += h;
            pm[j] -= h;
            let fd = (eval(x, &pp) - eval(x, &pm)) / (2.0 * h);
            assert!((fd - g.dp[j]).abs() <= 1e-6 * (1.0 + g.dp[j].abs()), "dp {fd} vs {}", g.dp[j]);
        }
    }

    #[test]
    fn explicit_formula_agrees_for_unit_control_weight() {
        let dy = dyn2();
        let model = QuadraticModel::new(
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 2),
            mat(2, 2, &[1.0, 0.2, 0.2, 0.5]),
            DMatrix::zeros(2, 2),
            Coupling::Convolution { strength: 0.7, width: 0.5 },
            Coupling::None,
        )
        .unwrap();
        let m = ParticleMeasure::uniform(2, vec![0.1, 0.2, -0.4, 0.9]).unwrap();
        let (x, p) = ([0.4, -1.1], [0.9, 0.25]);
        let hv = legendre_hamiltonian(&dy, &model, &x, &p, &m).unwrap();
        let ex = explicit_hamiltonian(&dy, &model, &x, &p, &m).unwrap();
        assert!((hv.h - ex).abs() <= 1e-10);
    }

    #[test]
    fn explicit_formula_gap_for_doubled_control_weight() {
        // ℓ = |u|²: the maximizer is −Bᵀp/2, so H = −⟨p,Ax⟩ + |Bᵀp|²/4 while
        // the closed form returns −⟨p,Ax⟩.
        let dy = dyn1(0.5, 2.0);
        let model = QuadraticModel::new(
            DMatrix::from_element(1, 1, 2.0),
            DMatrix::zeros(1, 1),
            DMatrix::zeros(1, 1),
            DMatrix::zeros(1, 1),
            Coupling::None,
            Coupling::None,
        )
        .unwrap();
        let (x, p) = ([1.0], [0.75]);
        let hv = legendre_hamiltonian(&dy, &model, &x, &p, &delta0(1)).unwrap();
        let ex = explicit_hamiltonian(&dy, &model, &x, &p, &delta0(1)).unwrap();
        let btp = 2.0 * 0.75;
        assert!((hv.h - ex - btp * btp / 4.0).abs() < 1e-13);
    }

    #[test]
    fn quartic_maximizer_is_stationary() {
        let dy = dyn1(0.0, 1.0);
        let hv = legendre_hamiltonian(&dy, &Quartic, &[0.0], &[2.0], &delta0(1)).unwrap();
        // 4u³ = −p
        let exact = -(0.5f64).cbrt();
        assert!((hv.u_star[0] - exact).abs() < 1e-10);
        let hv0 = legendre_hamiltonian(&dy, &Quartic, &[0.0], &[0.0], &delta0(1)).unwrap();
        assert_eq!(hv0.u_star, vec![0.0]);
    }

    #[test]
    fn tonelli_quadratic_passes() {
        let dy = dyn1(0.0, 1.0);
        let region = SampleBox {
            state_radius: 2.0,
            dual_radius: 3.0,
            measures: vec![delta0(1)],
            seed: 3,
        };
        let rep = check_tonelli(&dy, &QuadraticModel::control_energy(1, 1), &region, 200).unwrap();
        assert!(rep.pass, "{rep:?}");
        assert_eq!(rep.c0_fitted, 1.0);
    }

    #[test]
    fn tonelli_quartic_fails_lower_bound() {
        let dy = dyn1(0.0, 1.0);
        let region = SampleBox {
            state_radius: 1.0,
            dual_radius: 1.0,
            measures: vec![delta0(1)],
            seed: 3,
        };
        let rep = check_tonelli(&dy, &Quartic, &region, 50).unwrap();
        assert_eq!(rep.hess_min_eig, 0.0);
        assert!(!rep.c0_pass && !rep.pass);
    }

    #[test]
    fn tonelli_sine_cross_mixed_bound() {
        let dy = dyn1(0.0, 1.0);
        let region = SampleBox {
            state_radius: 3.0,
            dual_radius: 2.0,
            measures: vec![delta0(1)],
            seed: 11,
        };
        let rep = check_tonelli(&dy, &SineCross, &region, 500).unwrap();
        assert!(rep.c1_fitted <= 1.0 + 1e-8 && rep.c1_fitted > 0.5);
        assert!(rep.c1_pass && rep.c0_pass);
    }

    #[test]
    fn h1_fails_without_state_dependence() {
        let dy = dyn1(0.0, 1.0);
        let region = SampleBox {
            state_radius: 1.0,
            dual_radius: 10.0,
            measures: vec![delta0(1)],
            seed: 5,
        };
        let rep = check_h1(&dy, &QuadraticModel::control_energy(1, 1), &region, 200, 0.5, 1.0).unwrap();
        assert!(!rep.pass);
        assert!(rep.c4_hat > 1.0);
    }

    #[test]
    fn h1_fails_for_repulsive_sign_sweep() {
        // D_xF = −x: ⟨D_xH, p⟩ = ⟨x, p⟩, negative for opposite signs.
        let dy = dyn1(0.0, 1.0);
        let model = QuadraticModel::new(
            DMatrix::identity(1, 1),
            DMatrix::zeros(1, 1),
            DMatrix::from_element(1, 1, -1.0),
            DMatrix::zeros(1, 1),
            Coupling::None,
            Coupling::None,
        )
        .unwrap();
        let region = SampleBox {
            state_radius: 5.0,
            dual_radius: 5.0,
            measures: vec![delta0(1)],
            seed: 9,
        };
        let rep = check_h1(&dy, &model, &region, 400, 0.1, 0.1).unwrap();
        assert!(!rep.pass);
    }

    #[test]
    fn h1_tailored_model_passes() {
        // ℓ = ½|u + x|² with B = I: the maximizer satisfies u* + x = −p, so
        // D_xL(x, u*) = −p and ⟨D_xH, p⟩ = |p|² − ⟨Ap, p⟩ ≥ (1 − ‖A‖)|p|².
        let dy = LinearDynamics::from_rows(
            &[vec![0.2, 0.1], vec![-0.1, 0.3]],
            &[vec![1.0, 0.0], vec![0.0, 1.0]],
            1.0,
        )
        .unwrap();
        let model = QuadraticModel::new(
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 2),
            Coupling::None,
            Coupling::None,
        )
        .unwrap();
        let region = SampleBox {
            state_radius: 4.0,
            dual_radius: 4.0,
            measures: vec![delta0(2)],
            seed: 1,
        };
        let c3 = 1.0 - dy.a_norm();
        let rep = check_h1(&dy, &model, &region, 500, c3, 0.0).unwrap();
        assert!(rep.pass, "{rep:?}");
        assert!(rep.c3_hat >= c3 - 1e-12);
    }

    #[test]
    fn newton_restarts_agree() {
        let dy = dyn1(0.0, 1.0);
        let p = [1.7];
        let base = newton_inner(dy.b(), &Quartic, &[0.0], &p, &[0.0]).unwrap().0;
        for u0 in [-3.0, -0.5, 0.2, 1.0, 4.0] {
            let u = newton_inner(dy.b(), &Quartic, &[0.0], &p, &[u0]).unwrap().0;
            assert!((u[0] - base[0]).abs() < 1e-8);
        }
    }

    #[test]
    fn growth_constant_covers_samples() {
        let dy = dyn2();
        let model = QuadraticModel::new(
            mat(2, 2, &[2.0, 0.3, 0.3, 1.0]),
            mat(2, 2, &[0.1, 0.0, 0.2, -0.3]),
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            Coupling::MeanField { strength: 0.5 },
            Coupling::None,
        )
        .unwrap();
        let region = SampleBox {
            state_radius: 3.0,
            dual_radius: 3.0,
            measures: vec![delta0(2)],
            seed: 2,
        };
        let fitted = fit_hamiltonian_growth(&dy, &model, &region, 500).unwrap();
        let declared = model.growth_constants(&dy, 3.0).unwrap().c2;
        assert!(fitted <= declared, "{fitted} > {declared}");
        let rep = check_tonelli(&dy, &model, &region, 500).unwrap();
        assert!(rep.pass, "{rep:?}");
    }

    #[test]
    fn non_finite_model_is_reported() {
        let dy = dyn1(0.0, 1.0);
        let r = legendre_hamiltonian(&dy, &Quartic, &[0.0], &[f64::NAN], &delta0(1));
        assert!(matches!(r, Err(Error::InvalidModel(_))));
    }

    fn general_model() -> QuadraticModel {
        QuadraticModel::new(
            mat(2, 2, &[1.5, 0.2, 0.2, 0.8]),
            mat(2, 2, &[0.3, -0.1, 0.0, 0.4]),
            mat(2, 2, &[0.5, 0.1, 0.1, 0.2]),
            DMatrix::zeros(2, 2),
            Coupling::Convolution { strength: -0.4, width: 0.7 },
            Coupling::None,
        )
        .unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn envelope_gradients_match_finite_differences(
            x in proptest::collection::vec(-2.0..2.0f64, 2),
            p in proptest::collection::vec(-2.0..2.0f64, 2),
        ) {
            let m = ParticleMeasure::uniform(2, vec![0.3, -0.2, -0.5, 0.6]).unwrap();
            fd_check(&dyn2(), &general_model(), &x, &p, &m);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn sine_cross_gradients_match_finite_differences(x in -3.0..3.0f64, p in -3.0..3.0f64) {
            fd_check(&dyn1(-0.4, 1.3), &SineCross, &[x], &[p], &delta0(1));
        }

        #[test]
        fn stationarity_holds_at_return(x in -3.0..3.0f64, p in -3.0..3.0f64) {
            let dy = dyn1(0.2, 0.9);
            for model in [&SineCross as &dyn LagrangianModel, &Quartic] {
                let hv = legendre_hamiltonian(&dy, model, &[x], &[p], &delta0(1)).unwrap();
                let mut g = [0.0];
                model.running_grad_u(&[x], &hv.u_star, &mut g);
                prop_assert!((g[0] + 0.9 * p).abs() <= 1e-8);
            }
        }
    }
}
