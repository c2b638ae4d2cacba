//! Subcommand runners. Each returns a [`Report`] and writes its CSV tables
//! into the run directory.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use pathmfg_core::pde_check::{interior_samples, measure_pairs};
use pathmfg_core::{
    apriori_bounds, BoundRatios, continuity_residual, dpp_residual, fictitious_play, holder_fit, hjb_residual, lipschitz_equilibrium,
    lipschitz_probe, monotonicity_check, reference_ensemble, semiconcavity_probe, solve_best_response,
    synthesis_check, uniqueness_check, AprioriBounds, DiscreteSystem, EquilibriumReport, FlowOfMeasures,
    LagrangianModel, ParticleMeasure, ProbeRegion, SemiconcavitySettings, TestFunction, ValueProbe,
};
use serde_json::Value;

use crate::config::RunConfig;
use crate::report::{self, Report};
use crate::CliError;

/// Ratio slack allowed against the a-priori bounds.
const BOUND_SLACK: f64 = 1.05;
const PMP_TOL: f64 = 1e-5;
const DPP_TOL: f64 = 1e-4;
const HOLDER_SLACK: f64 = 1.1;
const LIPSCHITZ_EXPONENT: f64 = 0.95;

/// Everything derived once from a validated configuration.
pub struct Context {
    pub cfg: RunConfig,
    pub sys: DiscreteSystem,
    pub model: Arc<dyn LagrangianModel>,
    pub m0: ParticleMeasure,
    pub bounds: AprioriBounds,
    pub lipschitz: bool,
}

impl Context {
    pub fn new(cfg: RunConfig, lipschitz: bool) -> Result<Self, CliError> {
        let sys = cfg.system();
        let model: Arc<dyn LagrangianModel> = Arc::new(cfg.model());
        let m0 = cfg.m0();
        let bounds = apriori_bounds(sys.dynamics(), model.as_ref(), &m0, cfg.alpha, cfg.radius)?;
        Ok(Self {
            cfg,
            sys,
            model,
            m0,
            bounds,
            lipschitz,
        })
    }

    /// Fields shared by every report.
    pub fn header(&self, command: &str) -> Report {
        let config = serde_json::to_value(&self.cfg).expect("config serializes");
        let mut r = Report::new(command);
        r.set("config_hash", report::content_hash(&config));
        r.set("config", config);
        r.set("apriori_bounds", &self.bounds);
        r.set("lipschitz_mode", self.lipschitz);
        r
    }

    fn region(&self) -> ProbeRegion {
        let radius = self
            .cfg
            .diagnostics
            .region_radius
            .unwrap_or_else(|| self.m0.support_radius().max(1.0));
        ProbeRegion::cube(self.m0.dim(), radius, 0, self.sys.grid().steps())
    }

    pub fn equilibrium(&self) -> Result<EquilibriumReport, CliError> {
        let eq = self.cfg.equilibrium_config(self.lipschitz);
        let rep = if self.lipschitz {
            lipschitz_equilibrium(&self.sys, self.model.as_ref(), &self.m0, &eq)?
        } else {
            fictitious_play(&self.sys, self.model.as_ref(), &self.m0, &eq)?
        };
        Ok(rep)
    }

    pub fn probe(&self, flow: FlowOfMeasures) -> Result<ValueProbe, CliError> {
        Ok(ValueProbe::new(
            self.sys.clone(),
            Arc::clone(&self.model),
            Arc::new(flow),
            self.cfg.ocp_options(),
        )?)
    }
}

fn ratio_assertions(r: &mut Report, ratios: &BoundRatios) {
    r.at_most("control_bound_ratio", ratios.control, BOUND_SLACK);
    r.at_most("state_bound_ratio", ratios.state, BOUND_SLACK);
    r.at_most("velocity_bound_ratio", ratios.velocity, BOUND_SLACK);
}

/// Best response from `[solve] node, x` against the uncontrolled flow of `m0`.
pub fn solve_ocp(ctx: &Context, dir: &Path) -> Result<Report, CliError> {
    let flow = reference_ensemble(&ctx.sys, &ctx.m0)?.flow()?;
    let node = ctx.cfg.solve.node;
    let x = ctx.cfg.solve.x.clone().unwrap_or_else(|| ctx.m0.point(0).to_vec());
    let opts = ctx.cfg.ocp_options();
    let sol = solve_best_response(&ctx.sys, ctx.model.as_ref(), &flow, node, &x, None, &opts)?;
    let grid = *ctx.sys.grid();
    let ratios = ctx.bounds.ratios(ctx.sys.dynamics(), &sol.path, grid.dt());

    let mut r = Report::new("solve-ocp");
    r.set("node", node);
    r.set("x", &x);
    r.set("cost", sol.cost);
    r.set("grad_norm", sol.grad_norm);
    r.set("iterations", sol.iterations);
    r.set("pmp_residual", sol.pmp_residual);
    r.set("bound_ratios", ratios);
    r.at_most("pmp_residual", sol.pmp_residual, PMP_TOL);
    ratio_assertions(&mut r, &ratios);

    let mid = (node + grid.steps()) / 2;
    if mid > node {
        let probe = ctx.probe(flow)?;
        let dpp = dpp_residual(&probe, node, mid, &x)?;
        r.set("dpp_node", mid);
        r.set("dpp_residual", dpp);
        r.at_most("dpp_residual", dpp, DPP_TOL);
    }
    report::write_path(&dir.join("path.csv"), &grid, &sol.path)?;
    Ok(r)
}

/// Summary of a fictitious-play run and its flow table.
pub fn equilibrium(rep: &EquilibriumReport, dir: &Path) -> Result<Report, CliError> {
    let mut r = Report::new("equilibrium");
    r.set("converged", rep.converged);
    r.set("rounds", rep.rounds);
    r.set("stop_reason", rep.stop_reason);
    r.set("gaps", &rep.gaps);
    r.set("exploitability", &rep.exploitability);
    r.set("final_exploitability", rep.final_exploitability());
    r.set("admissibility", rep.final_admissibility());
    r.set("radius", rep.radius);
    r.set("bound_ratios", rep.bound_ratios);
    r.set("particles", rep.ensemble.len());
    r.holds("converged", rep.converged);
    r.holds("admissible", rep.final_admissibility().admissible);
    ratio_assertions(&mut r, &rep.bound_ratios);
    if let Some(cert) = &rep.lipschitz {
        r.set("lipschitz", cert);
        r.holds("lipschitz_certified", cert.certified);
    }
    report::write_flow(&dir.join("flow.csv"), &rep.flow()?)?;
    Ok(r)
}

/// Hölder fit of the flow, semiconcavity and Lipschitz probes of `V`.
pub fn diagnose(ctx: &Context, rep: &EquilibriumReport, probe: &ValueProbe, dir: &Path) -> Result<Report, CliError> {
    let d = &ctx.cfg.diagnostics;
    let mut r = Report::new("diagnose");
    r.set("converged", rep.converged);
    r.set("kappa", ctx.bounds.kappa);
    if d.holder {
        let fit = holder_fit(probe.flow())?;
        r.set("holder_constant", fit.constant);
        r.set("holder_exponent", fit.exponent);
        r.set("holder_worst_pair", fit.worst_pair);
        if rep.converged {
            r.at_most("holder_constant", fit.constant, HOLDER_SLACK * ctx.bounds.kappa);
        }
        if ctx.lipschitz {
            r.at_least("holder_exponent", fit.exponent, LIPSCHITZ_EXPONENT);
        }
        report::write_table(
            &dir.join("holder_pairs.csv"),
            &["dt".into(), "d1".into()],
            fit.pairs.iter().map(|&(gap, d1)| vec![gap, d1]),
        )?;
    }
    let region = ctx.region();
    if d.semiconcavity {
        let settings = SemiconcavitySettings {
            centers: d.centers,
            seed: ctx.cfg.seed,
            ..SemiconcavitySettings::default()
        };
        let sc = semiconcavity_probe(probe, &region, &settings)?;
        r.set("semiconcavity_probes", sc.probes.len());
        r.set("lambda_space", sc.lambda_space);
        r.set("lambda_time", sc.lambda_time);
        r.set("fitted_space", sc.fitted_space);
        r.set("fitted_time", sc.fitted_time);
        r.set("semiconcavity_violations", sc.violations.len());
        r.at_most("semiconcavity_violations", sc.violations.len() as f64, 0.0);
        let dim = ctx.m0.dim();
        let mut header = vec!["t".to_string(), "delta_steps".into(), "train".into()];
        header.extend((1..=dim).map(|i| format!("x{i}")));
        header.extend((1..=dim).map(|i| format!("h{i}")));
        header.extend(["value".to_string(), "modulus".into()]);
        let grid = *probe.system().grid();
        report::write_table(
            &dir.join("semiconcavity.csv"),
            &header,
            sc.probes.iter().map(|p| {
                let mut row = vec![grid.time(p.node), p.delta_steps as f64, if p.train { 1.0 } else { 0.0 }];
                row.extend(&p.x);
                row.extend(&p.h);
                row.extend([p.value, p.modulus]);
                row
            }),
        )?;
    }
    if d.lipschitz {
        let lp = lipschitz_probe(probe, &region, d.lipschitz_pairs, ctx.cfg.seed)?;
        r.set("value_lipschitz_space", lp.l_space);
        r.set("value_lipschitz_time", lp.l_time);
        r.set("value_lipschitz_bound", ctx.bounds.value_lipschitz);
    }
    Ok(r)
}

/// Weak-form residuals of the coupled system at an equilibrium.
pub fn check_pde(ctx: &Context, rep: &EquilibriumReport, probe: &ValueProbe, dir: &Path) -> Result<Report, CliError> {
    let p = &ctx.cfg.pde;
    let region = ctx.region();
    let grid = *ctx.sys.grid();
    let tests = TestFunction::battery(&region.lo, &region.hi, grid.horizon(), p.tests, p.test_seed)?;
    let cont = continuity_residual(probe.flow(), probe, &tests)?;
    let points = interior_samples(&grid, &region.lo, &region.hi, p.hjb_samples, ctx.cfg.seed);
    let hjb = hjb_residual(probe, &points)?;
    let within = hjb.fraction_within(p.tol_hjb);

    let mut r = Report::new("check-pde");
    r.set("converged", rep.converged);
    r.set("continuity", &cont);
    r.set("hjb_max", hjb.max_residual);
    r.set("hjb_median", hjb.median);
    r.set("hjb_terminal", hjb.terminal_residual);
    r.set("hjb_kept", hjb.kept);
    r.set("hjb_skipped", hjb.skipped);
    r.set("hjb_fraction_within", within);
    r.at_most("continuity_residual", cont.max_residual, p.tol_continuity);
    r.at_least("hjb_fraction_within", within, p.hjb_fraction);
    if p.synthesis {
        let syn = synthesis_check(probe, &rep.ensemble)?;
        r.set("synthesis", syn);
    }
    let dim = ctx.m0.dim();
    let mut header = vec!["t".to_string()];
    header.extend((1..=dim).map(|i| format!("x{i}")));
    header.push("residual".into());
    report::write_table(
        &dir.join("hjb.csv"),
        &header,
        points.iter().zip(&hjb.residuals).map(|((node, x), res)| {
            let mut row = vec![grid.time(*node)];
            row.extend(x);
            row.push(res.unwrap_or(f64::NAN));
            row
        }),
    )?;
    Ok(r)
}

/// Monotonicity pairings of the running and terminal couplings.
pub fn check_monotone(ctx: &Context, dir: &Path) -> Result<Report, CliError> {
    let m = &ctx.cfg.monotone;
    let pairs = measure_pairs(&ctx.m0, m.pairs, m.spread, ctx.cfg.seed)?;
    let witnesses: Vec<Vec<f64>> = ctx.m0.iter().map(|(x, _)| x.to_vec()).collect();
    let model = ctx.model.as_ref();
    let running = monotonicity_check(&|x, mu| model.coupling(x, mu), &pairs, &witnesses)?;
    let terminal = monotonicity_check(&|x, mu| model.terminal(x, mu), &pairs, &witnesses)?;
    let mut r = Report::new("check-monotone");
    r.set("running", &running);
    r.set("terminal", &terminal);
    r.holds("running_monotone", running.monotone);
    r.holds("terminal_monotone", terminal.monotone);
    report::write_table(
        &dir.join("pairings.csv"),
        &["pair".into(), "running".into(), "terminal".into()],
        running
            .pairings
            .iter()
            .zip(&terminal.pairings)
            .enumerate()
            .map(|(i, (a, b))| vec![i as f64, *a, *b]),
    )?;
    Ok(r)
}

/// Probe points for comparing value functions: evenly spaced nodes, and
/// states on a Kronecker sequence over the probe box.
pub fn uniqueness_points(ctx: &Context) -> Vec<(usize, Vec<f64>)> {
    let u = &ctx.cfg.uniqueness;
    let region = ctx.region();
    let n = ctx.sys.grid().steps();
    let dim = region.lo.len();
    let shifts: Vec<f64> = (0..dim).map(|j| ((j + 2) as f64).sqrt().fract()).collect();
    let mut out = Vec::with_capacity(u.probe_nodes * u.probe_points);
    for a in 0..u.probe_nodes {
        let node = a * n / u.probe_nodes;
        for p in 0..u.probe_points {
            let x = (0..dim)
                .map(|j| {
                    let s = if j == 0 {
                        (p as f64 + 0.5) / u.probe_points as f64
                    } else {
                        (p as f64 * shifts[j] + 0.5).fract()
                    };
                    region.lo[j] + s * (region.hi[j] - region.lo[j])
                })
                .collect();
            out.push((node, x));
        }
    }
    out
}

/// Value functions of fictitious play from several initializations.
pub fn check_unique(ctx: &Context, dir: &Path) -> Result<Report, CliError> {
    let u = &ctx.cfg.uniqueness;
    let points = uniqueness_points(ctx);
    let eq = ctx.cfg.equilibrium_config(false);
    let rep = uniqueness_check(&ctx.sys, Arc::clone(&ctx.model), &ctx.m0, &eq, u.runs, &points)?;
    let mut r = Report::new("check-unique");
    r.set("probe_points", points.len());
    r.set("skipped", rep.skipped);
    r.set("runs", &rep.runs);
    r.set("max_value_gap", rep.max_value_gap);
    r.set("running_monotonicity", &rep.running_monotonicity);
    r.set("terminal_monotonicity", &rep.terminal_monotonicity);
    r.holds("monotone", !rep.skipped);
    r.holds("all_converged", !rep.skipped && rep.runs.iter().all(|run| run.converged));
    r.at_most("max_value_gap", rep.max_value_gap.unwrap_or(f64::NAN), u.tol_gap);
    report::write_table(
        &dir.join("uniqueness_runs.csv"),
        &["run".into(), "converged".into(), "rounds".into(), "exploitability".into()],
        rep.runs.iter().enumerate().map(|(i, run)| {
            vec![i as f64, if run.converged { 1.0 } else { 0.0 }, run.rounds as f64, run.exploitability]
        }),
    )?;
    Ok(r)
}

/// Every subcommand on one shared equilibrium. Timings are returned apart
/// from the report so that the report stays reproducible.
pub fn bench(ctx: &Context, dir: &Path) -> Result<(Report, Value), CliError> {
    let mut timings = serde_json::Map::new();
    let mut time = |name: &str, start: Instant| {
        timings.insert(name.into(), Value::from(start.elapsed().as_secs_f64()));
    };
    let mut r = ctx.header("bench");

    let start = Instant::now();
    let part = solve_ocp(ctx, dir)?;
    time("solve_ocp", start);
    r.absorb("solve_ocp", part);

    let start = Instant::now();
    let rep = ctx.equilibrium()?;
    let part = equilibrium(&rep, dir)?;
    time("equilibrium", start);
    r.absorb("equilibrium", part);

    let probe = ctx.probe(rep.flow()?)?;
    let start = Instant::now();
    let part = diagnose(ctx, &rep, &probe, dir)?;
    time("diagnose", start);
    r.absorb("diagnose", part);

    let start = Instant::now();
    let part = check_pde(ctx, &rep, &probe, dir)?;
    time("check_pde", start);
    r.absorb("check_pde", part);

    let start = Instant::now();
    let part = check_monotone(ctx, dir)?;
    time("check_monotone", start);
    r.absorb("check_monotone", part);

    let start = Instant::now();
    let part = check_unique(ctx, dir)?;
    time("check_unique", start);
    r.absorb("check_unique", part);

    Ok((r, Value::Object(timings)))
}
