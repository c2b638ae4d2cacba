//! Empirical regularity of equilibrium flows and value functions.
//!
//! Hölder fits of `t ↦ m_t` in `d₁`, second-difference probes for
//! semiconcavity of `V`, and finite-difference Lipschitz ratios.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{invalid, Result};
use crate::linalg::{dist, norm};
use crate::measures::{wasserstein1, FlowOfMeasures};
use crate::ocp::ValueOracle;

/// Largest number of nodes used by [`holder_fit`]; longer flows are
/// subsampled evenly, always keeping both ends.
pub const HOLDER_MAX_NODES: usize = 101;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HolderFit {
    /// Log-log slope of `d₁` against `|t − s|`; `+∞` when every distance is 0.
    pub exponent: f64,
    /// `max d₁(m_t, m_s)/|t − s|^{1/2}`
    pub constant: f64,
    /// Node pair attaining `constant`.
    pub worst_pair: (usize, usize),
    /// `(|t − s|, d₁)` for every compared pair.
    pub pairs: Vec<(f64, f64)>,
}

fn holder_nodes(n_nodes: usize) -> Vec<usize> {
    if n_nodes <= HOLDER_MAX_NODES {
        return (0..n_nodes).collect();
    }
    let last = (n_nodes - 1) as f64;
    let m = HOLDER_MAX_NODES - 1;
    let mut nodes: Vec<usize> = (0..=m).map(|j| (j as f64 * last / m as f64).round() as usize).collect();
    nodes.dedup();
    nodes
}

/// Fits `d₁(m_t, m_s) ≈ C|t − s|^β` over node pairs.
pub fn holder_fit(flow: &FlowOfMeasures) -> Result<HolderFit> {
    let grid = flow.grid();
    if grid.node_count() < 3 {
        return Err(invalid("Hölder fit needs at least 3 snapshots"));
    }
    let nodes = holder_nodes(grid.node_count());
    let index: Vec<(usize, usize)> = nodes
        .iter()
        .enumerate()
        .flat_map(|(a, &i)| nodes[a + 1..].iter().map(move |&j| (i, j)))
        .collect();
    let distances: Vec<f64> = index
        .par_iter()
        .map(|&(i, j)| wasserstein1(flow.snapshot(i), flow.snapshot(j)))
        .collect::<Result<_>>()?;

    let mut constant = 0.0;
    let mut worst_pair = index[0];
    let (mut sx, mut sy, mut sxx, mut sxy, mut count) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut pairs = Vec::with_capacity(index.len());
    for (&(i, j), &d) in index.iter().zip(&distances) {
        let gap = grid.time(j) - grid.time(i);
        pairs.push((gap, d));
        let ratio = d / gap.sqrt();
        if ratio > constant {
            constant = ratio;
            worst_pair = (i, j);
        }
        if d > 0.0 {
            let (lx, ly) = (gap.ln(), d.ln());
            sx += lx;
            sy += ly;
            sxx += lx * lx;
            sxy += lx * ly;
            count += 1.0;
        }
    }
    let exponent = if count == 0.0 {
        f64::INFINITY
    } else {
        let var = sxx - sx * sx / count;
        if var > 0.0 {
            (sxy - sx * sy / count) / var
        } else {
            f64::NAN
        }
    };
    Ok(HolderFit {
        exponent,
        constant,
        worst_pair,
        pairs,
    })
}

/// A box of states over a range of nodes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeRegion {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub first_node: usize,
    pub last_node: usize,
}

impl ProbeRegion {
    pub fn cube(dim: usize, radius: f64, first_node: usize, last_node: usize) -> Self {
        Self {
            lo: vec![-radius; dim],
            hi: vec![radius; dim],
            first_node,
            last_node,
        }
    }

    fn validate(&self, oracle: &dyn ValueOracle) -> Result<()> {
        if self.lo.is_empty() || self.lo.len() != self.hi.len() {
            return Err(invalid("probe box bounds must be nonempty and of equal length"));
        }
        if self.lo.iter().zip(&self.hi).any(|(l, h)| !(l <= h)) {
            return Err(invalid("probe box needs lo <= hi in every coordinate"));
        }
        let n = oracle.grid().steps();
        if self.first_node > self.last_node || self.last_node > n {
            return Err(invalid(format!(
                "probe nodes {}..={} outside 0..={n}",
                self.first_node, self.last_node
            )));
        }
        Ok(())
    }

    pub fn diameter(&self) -> f64 {
        dist(&self.lo, &self.hi)
    }

    fn sample(&self, rng: &mut ChaCha8Rng, margin: f64) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(&l, &h)| rng.random_range((l + margin)..=(h - margin)))
            .collect()
    }
}

/// Time part of the semiconcavity modulus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeModulus {
    /// `|h|² + |δ|^{3/2}`
    Fractional,
    /// `|h|² + |δ|²`
    Quadratic,
}

impl TimeModulus {
    fn eval(&self, h: f64, delta: f64) -> f64 {
        match self {
            TimeModulus::Fractional => h * h + delta.powf(1.5),
            TimeModulus::Quadratic => h * h + delta * delta,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemiconcavitySettings {
    pub centers: usize,
    /// Step lengths as fractions of the region diameter.
    pub h_fractions: Vec<f64>,
    /// Time offsets in grid steps.
    pub delta_steps: Vec<usize>,
    pub time_modulus: TimeModulus,
    pub seed: u64,
}

impl Default for SemiconcavitySettings {
    fn default() -> Self {
        Self {
            centers: 60,
            h_fractions: vec![0.02, 0.05, 0.1],
            delta_steps: vec![1, 2, 4],
            time_modulus: TimeModulus::Fractional,
            seed: 0,
        }
    }
}

/// `V(t+δ, x+h) + V(t−δ, x−h) − 2V(t, x)` at one probe.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SecondDifference {
    pub node: usize,
    pub x: Vec<f64>,
    pub h: Vec<f64>,
    /// `δ` in grid steps; 0 for pure-space probes.
    pub delta_steps: usize,
    pub value: f64,
    pub modulus: f64,
    /// Whether the probe belongs to the fitting half.
    pub train: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SemiconcavityReport {
    /// `max Δ²/|h|²` over pure-space probes.
    pub lambda_space: f64,
    /// `max Δ²/modulus` over probes with `δ > 0`.
    pub lambda_time: f64,
    /// The same maxima restricted to the training half.
    pub fitted_space: f64,
    pub fitted_time: f64,
    /// Held-out probes exceeding twice the fitted bound.
    pub violations: Vec<usize>,
    pub probes: Vec<SecondDifference>,
}

struct ProbeSpec {
    node: usize,
    x: Vec<f64>,
    h: Vec<f64>,
    steps: usize,
    train: bool,
}

fn random_direction(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let n = norm(&v);
        if n > 1e-8 {
            return v.into_iter().map(|c| c / n).collect();
        }
    }
}

/// Second differences of `V` in space and in space-time.
///
/// Probe centers alternate between a training half, on which the moduli
/// constants are fitted, and a held-out half checked against twice the fit.
pub fn semiconcavity_probe(
    oracle: &dyn ValueOracle,
    region: &ProbeRegion,
    settings: &SemiconcavitySettings,
) -> Result<SemiconcavityReport> {
    region.validate(oracle)?;
    let max_steps = settings.delta_steps.iter().copied().max().unwrap_or(0);
    let lo_node = region.first_node.max(max_steps);
    let hi_node = region.last_node.min(oracle.grid().steps() - max_steps);
    if lo_node > hi_node {
        return Err(invalid("node range too short for the requested time offsets"));
    }
    let diam = region.diameter();
    let h_max = settings.h_fractions.iter().fold(0.0f64, |a, &b| a.max(b)) * diam;
    if region.lo.iter().zip(&region.hi).any(|(l, h)| h - l < 2.0 * h_max) {
        return Err(invalid("probe box too thin for the requested steps"));
    }
    let dt = oracle.grid().dt();
    let dim = region.lo.len();

    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut specs = Vec::new();
    for c in 0..settings.centers {
        let node = rng.random_range(lo_node..=hi_node);
        let x = region.sample(&mut rng, h_max);
        let train = c % 2 == 0;
        for &frac in &settings.h_fractions {
            let dir = random_direction(&mut rng, dim);
            let h: Vec<f64> = dir.iter().map(|v| v * frac * diam).collect();
            specs.push(ProbeSpec { node, x: x.clone(), h: h.clone(), steps: 0, train });
            for &s in settings.delta_steps.iter().filter(|&&s| s > 0) {
                specs.push(ProbeSpec { node, x: x.clone(), h: h.clone(), steps: s, train });
            }
        }
    }

    let probes: Vec<SecondDifference> = specs
        .into_par_iter()
        .map(|p| {
            let plus: Vec<f64> = p.x.iter().zip(&p.h).map(|(a, b)| a + b).collect();
            let minus: Vec<f64> = p.x.iter().zip(&p.h).map(|(a, b)| a - b).collect();
            let v0 = oracle.value(p.node, &p.x)?;
            let vp = oracle.value(p.node + p.steps, &plus)?;
            let vm = oracle.value(p.node - p.steps, &minus)?;
            let hn = norm(&p.h);
            let modulus = if p.steps == 0 {
                hn * hn
            } else {
                settings.time_modulus.eval(hn, p.steps as f64 * dt)
            };
            Ok(SecondDifference {
                node: p.node,
                x: p.x,
                h: p.h,
                delta_steps: p.steps,
                value: vp + vm - 2.0 * v0,
                modulus,
                train: p.train,
            })
        })
        .collect::<Result<_>>()?;

    let ratio = |p: &SecondDifference| (p.value / p.modulus).max(0.0);
    let max_over = |space: bool, train_only: bool| {
        probes
            .iter()
            .filter(|p| (p.delta_steps == 0) == space && (p.train || !train_only))
            .map(ratio)
            .fold(0.0f64, f64::max)
    };
    let fitted_space = max_over(true, true);
    let fitted_time = max_over(false, true);
    let violations = probes
        .iter()
        .enumerate()
        .filter(|(_, p)| {
            let fit = if p.delta_steps == 0 { fitted_space } else { fitted_time };
            !p.train && p.value > 2.0 * fit * p.modulus + 1e-9
        })
        .map(|(j, _)| j)
        .collect();
    Ok(SemiconcavityReport {
        lambda_space: max_over(true, false),
        lambda_time: max_over(false, false),
        fitted_space,
        fitted_time,
        violations,
        probes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LipschitzProbe {
    /// `max |V(t,x) − V(t,y)|/|x − y|`
    pub l_space: f64,
    /// `max |V(t,x) − V(s,x)|/|t − s|`
    pub l_time: f64,
    pub pairs: usize,
}

/// Finite-difference Lipschitz ratios of `V` over random pairs in `region`.
pub fn lipschitz_probe(
    oracle: &dyn ValueOracle,
    region: &ProbeRegion,
    pairs: usize,
    seed: u64,
) -> Result<LipschitzProbe> {
    region.validate(oracle)?;
    let grid = *oracle.grid();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut specs = Vec::with_capacity(pairs);
    for _ in 0..pairs {
        let i = rng.random_range(region.first_node..=region.last_node);
        let x = region.sample(&mut rng, 0.0);
        let y = region.sample(&mut rng, 0.0);
        let j = if region.first_node == region.last_node {
            i
        } else {
            loop {
                let j = rng.random_range(region.first_node..=region.last_node);
                if j != i {
                    break j;
                }
            }
        };
        specs.push((i, j, x, y));
    }
    let ratios: Vec<(f64, f64)> = specs
        .par_iter()
        .map(|(i, j, x, y)| {
            let vx = oracle.value(*i, x)?;
            let space = match dist(x, y) {
                d if d > 0.0 => (vx - oracle.value(*i, y)?).abs() / d,
                _ => 0.0,
            };
            let time = if i == j {
                0.0
            } else {
                (vx - oracle.value(*j, x)?).abs() / (grid.time(*i) - grid.time(*j)).abs()
            };
            Ok((space, time))
        })
        .collect::<Result<_>>()?;
    Ok(LipschitzProbe {
        l_space: ratios.iter().map(|r| r.0).fold(0.0, f64::max),
        l_time: ratios.iter().map(|r| r.1).fold(0.0, f64::max),
        pairs,
    })
}
