//! Verification suites with serializable pass/fail reports: condition scans
//! over seeded sample grids, conservation monitors along trajectories, and
//! exact-solution transfer checks.
//!
//! `verify_suite` scans the pointwise multiplier conditions of a built-in
//! system and cross-checks every numerically constructed object against its
//! closed form.  `hj_checks` builds a separable solution, transfers it to
//! the full chart, and validates the resulting one-form.  `aggregate_report`
//! chains both with long-run conservation and flow-closure checks.

use std::collections::BTreeMap;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::chart::{DomainBox, PhasePoint};
use crate::diff::DiffEngine;
use crate::dynamics::{self, IntegratorConfig};
use crate::error::{NhkError, Result};
use crate::hamilton_jacobi::{
    gamma_first_stage, gamma_second_stage, hj_residual, integrate_via_gamma, nh_hj_verify,
    separable_solve, HJSolution, OneFormField,
};
use crate::hamiltonization::{
    canonical_field, chaplygin_hamiltonian, conformal_form_residual, flow_conjugacy_check,
    hamiltonized_field, measure_divergence, ns_condition_residual, sufficient_condition_residual,
    MeasureDensity, Multiplier,
};
use crate::reduction::{integrate_reduced, ReducedSystem};
use crate::sample::Sampler;
use crate::second_stage::{dynamics_equivalence_residual, SecondStageConfig, TildeSystem};
use crate::sysdef::CustomBundle;
use crate::systems::SystemBundle;

/// How the sample grid behind a condition report was drawn.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridSpec {
    pub domain_points: usize,
    pub fiber_draws: usize,
    pub seed: u64,
}

/// One scanned condition: its sup residual over the grid against a fixed
/// tolerance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditionReport {
    pub condition: String,
    pub sup_residual: f64,
    pub grid_spec: GridSpec,
    pub tolerance: f64,
    pub pass: bool,
}

/// One line of an aggregate report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckLine {
    pub check: String,
    pub residual: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Which multiplier the suite should test: the system's built-in candidate,
/// or the trivial `f ≡ 1` (the negative control).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MultiplierMode {
    Builtin,
    One,
}

impl std::str::FromStr for MultiplierMode {
    type Err = NhkError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "builtin" => Ok(MultiplierMode::Builtin),
            "one" => Ok(MultiplierMode::One),
            other => Err(NhkError::Config(format!(
                "unknown multiplier mode `{other}` (expected builtin or one)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub domain_points: usize,
    pub fiber_draws: usize,
    pub seed: u64,
    pub multiplier: MultiplierMode,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            domain_points: 200,
            fiber_draws: 20,
            seed: 17,
            multiplier: MultiplierMode::Builtin,
        }
    }
}

/// Sup of `|check(q, p, u, w)|` over `points` domain samples with `draws`
/// fiber/tangent draws each.  `q` is drawn from `domain`; `p`, `u`, `w` have
/// dimension `fiber_dim` (momenta scaled to `[-2, 2]`, directions to
/// `[-1, 1]`).
fn sup_scan<F>(
    sampler: &mut Sampler,
    domain: &DomainBox,
    points: usize,
    draws: usize,
    fiber_dim: usize,
    mut check: F,
) -> Result<f64>
where
    F: FnMut(&[f64], &DVector<f64>, &DVector<f64>, &DVector<f64>) -> Result<f64>,
{
    let mut sup: f64 = 0.0;
    for _ in 0..points {
        let q = sampler.point_in(domain);
        for _ in 0..draws.max(1) {
            let p = sampler.fiber(fiber_dim, 2.0);
            let u = sampler.tangent(fiber_dim);
            let w = sampler.tangent(fiber_dim);
            sup = sup.max(check(&q, &p, &u, &w)?.abs());
        }
    }
    Ok(sup)
}

fn field_gap(a: &(DVector<f64>, DVector<f64>), b: &(DVector<f64>, DVector<f64>)) -> f64 {
    (&a.0 - &b.0).amax().max((&a.1 - &b.1).amax())
}

/// The multiplier the suite runs with, honoring the override mode.
fn select_multiplier(builtin: &Multiplier, mode: MultiplierMode) -> Multiplier {
    match mode {
        MultiplierMode::Builtin => builtin.clone(),
        MultiplierMode::One => Multiplier::one(),
    }
}

struct SuiteBuilder {
    grid: GridSpec,
    reports: Vec<ConditionReport>,
}

impl SuiteBuilder {
    fn new(opts: &VerifyOptions) -> Self {
        SuiteBuilder {
            grid: GridSpec {
                domain_points: opts.domain_points,
                fiber_draws: opts.fiber_draws,
                seed: opts.seed,
            },
            reports: Vec::new(),
        }
    }

    fn push(&mut self, condition: &str, sup: f64, tolerance: f64) {
        self.reports.push(ConditionReport {
            condition: condition.to_string(),
            sup_residual: sup,
            grid_spec: self.grid.clone(),
            tolerance,
            pass: sup.is_finite() && sup < tolerance,
        });
    }
}

/// Scan every pointwise condition and closed-form cross-check that applies
/// to the bundle, with the grid and multiplier dictated by `opts`.
pub fn verify_suite(bundle: &SystemBundle, opts: &VerifyOptions) -> Result<Vec<ConditionReport>> {
    let engine = DiffEngine::default();
    let mut sampler = Sampler::new(opts.seed);
    let mut suite = SuiteBuilder::new(opts);
    let rsys = &bundle.reduced;
    let nbar = rsys.reduced_dim();
    let rdomain = bundle.reduced_domain();
    let points = opts.domain_points;
    let draws = opts.fiber_draws;
    let slow_draws = draws.min(5);
    let builtin = opts.multiplier == MultiplierMode::Builtin;

    if bundle.name == "vrd" {
        let sup = sup_scan(&mut sampler, &rdomain, points, draws, nbar, |q, p, _, _| {
            Ok(rsys.xi_matrix(q, p)?.amax())
        })?;
        suite.push("gyroscopic-form-vanishes", sup, 1e-10);
    }

    if let Some(candidate) = &bundle.multiplier {
        let f = select_multiplier(candidate, opts.multiplier);

        let sup = sup_scan(&mut sampler, &rdomain, points, draws, nbar, |q, p, u, w| {
            sufficient_condition_residual(rsys, &f, q, p, u, w)
        })?;
        suite.push("multiplier-sufficient-condition", sup, 1e-9);

        let sup = sup_scan(&mut sampler, &rdomain, points, draws, nbar, |q, p, _, _| {
            let pushed = hamiltonized_field(rsys, &f, q, p, &engine)?;
            let canonical = canonical_field(rsys, &f, q, p, &engine)?;
            Ok(field_gap(&pushed, &canonical))
        })?;
        suite.push("hamiltonized-field-matches-canonical", sup, 1e-7);

        let sup = sup_scan(
            &mut sampler,
            &rdomain,
            points,
            slow_draws,
            nbar,
            |q, p, _, _| Ok(ns_condition_residual(rsys, &f, q, p, &engine)?.amax()),
        )?;
        suite.push("necessary-sufficient-condition", sup, 1e-6);

        let density = MeasureDensity {
            exponent: bundle.measure_exponent,
            multiplier: f.clone(),
        };
        let sup = sup_scan(&mut sampler, &rdomain, points, 1, nbar, |q, p, _, _| {
            measure_divergence(rsys, &density, q, p, &engine)
        })?;
        suite.push("invariant-measure-divergence", sup, 1e-6);

        if bundle.name == "knife-edge" {
            let sup = sup_scan(
                &mut sampler,
                &rdomain,
                points,
                slow_draws,
                nbar,
                |q, p, _, _| conformal_form_residual(rsys, &f, q, p),
            )?;
            suite.push("conformal-form-closed", sup, 1e-7);

            let q0 = rsys.project_q(bundle.default_state.q.as_slice());
            let p0 = rsys.project_p(bundle.default_state.q.as_slice(), &bundle.default_state.p)?;
            let gap = flow_conjugacy_check(rsys, &f, &q0, &p0, 0.5, 1e-3, &engine)?;
            suite.push("rescaled-flow-conjugacy", gap, 1e-6);
        }
    }

    if let Some(cfg) = &bundle.second {
        second_stage_conditions(
            &mut suite,
            &mut sampler,
            rsys,
            &rdomain,
            cfg,
            opts,
            &engine,
            Some(bundle),
        )?;
    }

    let sup = sup_scan(
        &mut sampler,
        &bundle.domain,
        points,
        draws,
        nbar,
        |q, p, _, _| Ok((rsys.hl_m(q, p)? - (bundle.oracles.momentum_lift)(q, p)).amax()),
    )?;
    suite.push("closed-form-momentum-lift", sup, 1e-9);

    let sup = sup_scan(&mut sampler, &rdomain, points, draws, nbar, |q, p, _, _| {
        Ok((rsys.xi_matrix(q, p)? - (bundle.oracles.xi_matrix)(q, p)).amax())
    })?;
    suite.push("closed-form-gyroscopic-form", sup, 1e-9);

    let sup = sup_scan(&mut sampler, &rdomain, points, draws, nbar, |q, p, _, _| {
        Ok((rsys.reduced_hamiltonian(q, p)? - (bundle.oracles.reduced_hamiltonian)(q, p)).abs())
    })?;
    suite.push("closed-form-quotient-energy", sup, 1e-9);

    if builtin {
        if let (Some(f), Some(oracle)) = (&bundle.multiplier, &bundle.oracles.chaplygin_hamiltonian)
        {
            let sup = sup_scan(&mut sampler, &rdomain, points, draws, nbar, |q, p, _, _| {
                Ok((chaplygin_hamiltonian(rsys, f, q, p)? - oracle(q, p)).abs())
            })?;
            suite.push("closed-form-rescaled-energy", sup, 1e-9);
        }
    }

    Ok(suite.reports)
}

#[allow(clippy::too_many_arguments)]
fn second_stage_conditions(
    suite: &mut SuiteBuilder,
    sampler: &mut Sampler,
    rsys: &ReducedSystem,
    rdomain: &DomainBox,
    cfg: &SecondStageConfig,
    opts: &VerifyOptions,
    engine: &DiffEngine,
    extras: Option<&SystemBundle>,
) -> Result<()> {
    let nbar = rsys.reduced_dim();
    let points = opts.domain_points;
    let draws = opts.fiber_draws;
    let builtin = opts.multiplier == MultiplierMode::Builtin;

    let mut active = cfg.clone();
    active.multiplier = select_multiplier(&cfg.multiplier, opts.multiplier);
    let tsys = TildeSystem::from_config(rsys.clone(), &active)?;
    let setup = &tsys.setup;
    let nt = setup.tilde_dim();

    let sup_pair = {
        let mut invariance: f64 = 0.0;
        let mut vertical: f64 = 0.0;
        for _ in 0..points {
            let q = sampler.point_in(rdomain);
            for _ in 0..draws.max(1) {
                let p = sampler.fiber(nbar, 2.0);
                let (inv, vert) = setup.condition_residuals(&q, &p, engine)?;
                invariance = invariance.max(inv.abs());
                vertical = vertical.max(vert.abs());
            }
        }
        (invariance, vertical)
    };
    suite.push("residual-symmetry-invariance", sup_pair.0, 1e-7);
    suite.push("residual-symmetry-vertical", sup_pair.1, 1e-8);

    if extras.is_some_and(|b| b.name == "snakeboard") {
        let mu = cfg.mu[0];
        let sup = sup_scan(sampler, rdomain, points, draws, nbar, |q, p, _, _| {
            let mut leveled = p.clone();
            for (a, &k) in cfg.k_action.translated_coords.iter().enumerate() {
                leveled[k] = cfg.mu[a];
            }
            let (qt, pt) = setup.phi_mu(q, &leveled)?;
            let gap = (qt[0] - q[0])
                .abs()
                .max((qt[1] - q[1]).abs())
                .max((pt[0] - (leveled[0] - mu)).abs())
                .max((pt[1] - leveled[1]).abs());
            Ok(gap)
        })?;
        suite.push("level-identification-closed-form", sup, 1e-12);
    }

    let sup = sup_scan(
        sampler,
        &cfg.tilde_domain,
        points,
        draws,
        nt,
        |q, p, u, w| tsys.second_sufficient_residual(q, p, u, w),
    )?;
    suite.push("second-sufficient-condition", sup, 1e-8);

    let sup = sup_scan(
        sampler,
        &cfg.tilde_domain,
        points,
        draws,
        nt,
        |q, p, _, _| {
            let fv = tsys.multiplier.eval(q)?;
            let beta = p / fv;
            let (xq, xp) = tsys.tilde_vector_field(q, &beta, engine)?;
            let a = &xq / fv;
            let b = &xp / fv;
            let df = tsys.multiplier.grad(q);
            let pushed = (a.clone(), b * fv + &beta * df.dot(&a));
            let canonical = tsys.canonical_tilde_field(q, p, engine)?;
            Ok(field_gap(&pushed, &canonical))
        },
    )?;
    suite.push("second-rescaled-field-matches-canonical", sup, 1e-7);

    let exponent = nt as i32 - 1;
    let sup = sup_scan(sampler, &cfg.tilde_domain, points, 1, nt, |q, p, _, _| {
        tsys.tilde_measure_divergence(exponent, q, p, engine)
    })?;
    suite.push("second-invariant-measure-divergence", sup, 1e-6);

    if let Some(bundle) = extras {
        let q0 = rsys.project_q(bundle.default_state.q.as_slice());
        let p0 = rsys.project_p(bundle.default_state.q.as_slice(), &bundle.default_state.p)?;
        let gap = dynamics_equivalence_residual(&tsys, &q0, &p0, 0.5, 1e-3, engine)?;
        suite.push("reduced-dynamics-equivalence", gap, 1e-6);

        if builtin {
            if let Some(oracle) = &bundle.oracles.second_chaplygin_hamiltonian {
                let sup = sup_scan(
                    sampler,
                    &cfg.tilde_domain,
                    points,
                    draws,
                    nt,
                    |q, p, _, _| Ok((tsys.second_chaplygin_hamiltonian(q, p)? - oracle(q, p)).abs()),
                )?;
                suite.push("closed-form-second-rescaled-energy", sup, 1e-9);
            }
        }
    }

    Ok(())
}

/// Condition scans for a config-defined system: everything that does not
/// require closed-form reference data.
pub fn custom_suite(custom: &CustomBundle, opts: &VerifyOptions) -> Result<Vec<ConditionReport>> {
    let engine = DiffEngine::default();
    let mut sampler = Sampler::new(opts.seed);
    let mut suite = SuiteBuilder::new(opts);
    let rsys = &custom.reduced;
    let nbar = rsys.reduced_dim();
    let rdomain = custom.reduced_domain();
    let points = opts.domain_points;
    let draws = opts.fiber_draws;
    let slow_draws = draws.min(5);

    if let Some(candidate) = &custom.multiplier {
        let f = select_multiplier(candidate, opts.multiplier);

        let sup = sup_scan(&mut sampler, &rdomain, points, draws, nbar, |q, p, u, w| {
            sufficient_condition_residual(rsys, &f, q, p, u, w)
        })?;
        suite.push("multiplier-sufficient-condition", sup, 1e-9);

        let sup = sup_scan(&mut sampler, &rdomain, points, draws, nbar, |q, p, _, _| {
            let pushed = hamiltonized_field(rsys, &f, q, p, &engine)?;
            let canonical = canonical_field(rsys, &f, q, p, &engine)?;
            Ok(field_gap(&pushed, &canonical))
        })?;
        suite.push("hamiltonized-field-matches-canonical", sup, 1e-7);

        let sup = sup_scan(
            &mut sampler,
            &rdomain,
            points,
            slow_draws,
            nbar,
            |q, p, _, _| Ok(ns_condition_residual(rsys, &f, q, p, &engine)?.amax()),
        )?;
        suite.push("necessary-sufficient-condition", sup, 1e-6);

        let density = MeasureDensity {
            exponent: nbar as i32 - 1,
            multiplier: f.clone(),
        };
        let sup = sup_scan(&mut sampler, &rdomain, points, 1, nbar, |q, p, _, _| {
            measure_divergence(rsys, &density, q, p, &engine)
        })?;
        suite.push("invariant-measure-divergence", sup, 1e-6);
    }

    if let Some(cfg) = &custom.second {
        second_stage_conditions(
            &mut suite,
            &mut sampler,
            rsys,
            &rdomain,
            cfg,
            opts,
            &engine,
            None,
        )?;
    }

    if suite.reports.is_empty() {
        return Err(NhkError::Config(
            "system declares no multiplier or second stage; nothing to verify".to_string(),
        ));
    }
    Ok(suite.reports)
}

/// Named constants and energy driving the default exact-solution checks.
pub fn default_hj_constants(bundle: &SystemBundle) -> (f64, BTreeMap<String, f64>) {
    let mut constants = BTreeMap::new();
    match bundle.name.as_str() {
        "vrd" => {
            constants.insert("gamma_phi0".to_string(), 1.0);
            constants.insert("gamma_psi0".to_string(), 1.0);
            (1.5, constants)
        }
        "knife-edge" => {
            constants.insert("gamma_phi0".to_string(), 0.15);
            (1.0, constants)
        }
        _ => {
            constants.insert("gamma_phi0".to_string(), 0.2);
            (2.0, constants)
        }
    }
}

/// The full-chart box on which a transferred one-form is sampled: the
/// bundle's box with the solution's (possibly restricted) base bounds
/// substituted in.
fn restricted_full_domain(bundle: &SystemBundle, sol: &HJSolution) -> DomainBox {
    let mut full = bundle.domain.clone();
    let targets: Vec<usize> = match &bundle.second {
        None => bundle.reduced.reduced_indices.clone(),
        Some(cfg) => (0..bundle.reduced.reduced_dim())
            .filter(|i| !cfg.k_action.translated_coords.contains(i))
            .map(|k| bundle.reduced.reduced_indices[k])
            .collect(),
    };
    for (k, &i) in targets.iter().enumerate() {
        full.lower[i] = sol.form.domain.lower[k];
        full.upper[i] = sol.form.domain.upper[k];
    }
    full
}

/// Build the exact-solution one-form on the full chart for a solved system,
/// honoring the multiplier override.
pub fn transfer(
    bundle: &SystemBundle,
    sol: &HJSolution,
    mode: MultiplierMode,
) -> Result<OneFormField> {
    let domain = restricted_full_domain(bundle, sol);
    match &bundle.second {
        Some(cfg) => {
            let mut active = cfg.clone();
            active.multiplier = select_multiplier(&cfg.multiplier, mode);
            let tsys = TildeSystem::from_config(bundle.reduced.clone(), &active)?;
            gamma_second_stage(&tsys, sol, &domain)
        }
        None => {
            let candidate = bundle.multiplier.as_ref().ok_or_else(|| {
                NhkError::Config(format!("system `{}` has no multiplier", bundle.name))
            })?;
            let f = select_multiplier(candidate, mode);
            gamma_first_stage(&bundle.reduced, &f, sol, &domain)
        }
    }
}

/// A solved and transferred exact solution with its validation lines.
#[derive(Debug)]
pub struct HjOutcome {
    pub energy: f64,
    pub constants: BTreeMap<String, f64>,
    pub gamma: OneFormField,
    pub checks: Vec<CheckLine>,
}

/// Solve the separable equation at the given constants, transfer the
/// solution to the full chart, and validate it: the rescaled equation on the
/// base, the closed form of the transferred one-form, and the defining
/// properties (energy level, closedness along constrained directions,
/// membership in the constrained momentum space).
pub fn hj_checks(
    bundle: &SystemBundle,
    energy: f64,
    constants: &BTreeMap<String, f64>,
    samples: usize,
    seed: u64,
    mode: MultiplierMode,
) -> Result<HjOutcome> {
    let sol = separable_solve(bundle, energy, constants)?;
    let gamma = transfer(bundle, &sol, mode)?;
    let mut sampler = Sampler::new(seed);
    let mut checks = Vec::new();
    let push = |checks: &mut Vec<CheckLine>, name: &str, residual: f64, tolerance: f64| {
        checks.push(CheckLine {
            check: format!("exact-solution-{name}"),
            residual,
            tolerance,
            pass: residual.is_finite() && residual < tolerance,
        });
    };

    let base_grid: Vec<Vec<f64>> = (0..samples)
        .map(|_| sampler.point_in(&sol.form.domain))
        .collect();
    let equation = match &bundle.second {
        Some(cfg) => {
            let mut active = cfg.clone();
            active.multiplier = select_multiplier(&cfg.multiplier, mode);
            let tsys = TildeSystem::from_config(bundle.reduced.clone(), &active)?;
            hj_residual(
                |q, p| tsys.second_chaplygin_hamiltonian(q, p),
                &sol,
                &base_grid,
            )?
        }
        None => {
            let candidate = bundle.multiplier.as_ref().ok_or_else(|| {
                NhkError::Config(format!("system `{}` has no multiplier", bundle.name))
            })?;
            let f = select_multiplier(candidate, mode);
            hj_residual(
                |q, p| chaplygin_hamiltonian(&bundle.reduced, &f, q, p),
                &sol,
                &base_grid,
            )?
        }
    };
    push(&mut checks, "equation", equation, 1e-9);

    let closed_form_tol = if bundle.second.is_some() { 1e-9 } else { 1e-10 };
    let mut sup: f64 = 0.0;
    for _ in 0..samples {
        let q = sampler.point_in(&gamma.domain);
        let gap = (gamma.at(&q) - (bundle.oracles.gamma)(&q, &sol.constants)).amax();
        sup = sup.max(gap);
    }
    push(&mut checks, "closed-form", sup, closed_form_tol);

    let report = nh_hj_verify(
        &bundle.system,
        &bundle.reduced,
        &gamma,
        sol.energy,
        samples,
        seed,
    )?;
    push(
        &mut checks,
        "energy-level",
        report.sup_energy_residual,
        1e-8,
    );
    push(&mut checks, "closedness", report.sup_dgamma_residual, 1e-8);
    push(
        &mut checks,
        "membership",
        report.sup_membership_residual,
        1e-8,
    );

    Ok(HjOutcome {
        energy: sol.energy,
        constants: sol.constants,
        gamma,
        checks,
    })
}

/// Sup deviation between the exact-solution flow (first-order, through the
/// one-form) and the full constrained dynamics started on its graph.
pub fn gamma_flow_closure(
    bundle: &SystemBundle,
    gamma: &OneFormField,
    q0: &[f64],
    t_end: f64,
    dt: f64,
) -> Result<f64> {
    let engine = DiffEngine::default();
    let via = integrate_via_gamma(&bundle.system, gamma, q0, t_end, dt)?;
    let state0 = PhasePoint::new(DVector::from_column_slice(q0), gamma.at(q0));
    let cfg = IntegratorConfig {
        t_end,
        dt,
        ..IntegratorConfig::default()
    };
    let direct = dynamics::integrate(&bundle.system, &state0, &cfg, &engine)?;
    if via.states.len() != direct.states.len() {
        return Err(NhkError::Config(format!(
            "trajectory grids disagree: {} vs {} states",
            via.states.len(),
            direct.states.len()
        )));
    }
    let mut sup: f64 = 0.0;
    for (a, b) in via.states.iter().zip(&direct.states) {
        sup = sup.max((&a.q - &b.q).amax()).max((&a.p - &b.p).amax());
    }
    Ok(sup)
}

/// Run every suite against a bundle: scanned conditions, long-run
/// conservation, the default exact solution, and flow closure.
pub fn aggregate_report(bundle: &SystemBundle, opts: &VerifyOptions) -> Result<Vec<CheckLine>> {
    let engine = DiffEngine::default();
    let mut lines: Vec<CheckLine> = verify_suite(bundle, opts)?
        .into_iter()
        .map(|r| CheckLine {
            check: r.condition,
            residual: r.sup_residual,
            tolerance: r.tolerance,
            pass: r.pass,
        })
        .collect();
    let push = |lines: &mut Vec<CheckLine>, name: &str, residual: f64, tolerance: f64| {
        lines.push(CheckLine {
            check: name.to_string(),
            residual,
            tolerance,
            pass: residual.is_finite() && residual < tolerance,
        });
    };

    let traj = dynamics::integrate(
        &bundle.system,
        &bundle.default_state,
        &IntegratorConfig::default(),
        &engine,
    )?;
    let mon = dynamics::monitor(&traj, &bundle.system);
    push(&mut lines, "full-energy-drift", mon.max_energy_drift, 1e-7);
    push(
        &mut lines,
        "full-constraint-residual",
        mon.max_constraint_residual,
        1e-7,
    );
    push(
        &mut lines,
        "full-membership-residual",
        mon.max_m_residual,
        1e-7,
    );

    if let Some(cfg) = &bundle.second {
        let q0 = bundle.reduced.project_q(bundle.default_state.q.as_slice());
        let p0 = bundle
            .reduced
            .project_p(bundle.default_state.q.as_slice(), &bundle.default_state.p)?;
        let rtraj = integrate_reduced(&bundle.reduced, &q0, &p0, 1e-3, 5.0, &engine)?;
        let mut drift: f64 = 0.0;
        for (_, p) in &rtraj.states {
            for (a, &k) in cfg.k_action.translated_coords.iter().enumerate() {
                drift = drift.max((p[k] - cfg.mu[a]).abs());
            }
        }
        push(&mut lines, "reduced-momentum-drift", drift, 1e-8);
    }

    let (energy, constants) = default_hj_constants(bundle);
    let outcome = hj_checks(bundle, energy, &constants, 50, opts.seed, opts.multiplier)?;
    lines.extend(outcome.checks);

    let closure = gamma_flow_closure(
        bundle,
        &outcome.gamma,
        bundle.default_state.q.as_slice(),
        2.0,
        1e-3,
    )?;
    push(&mut lines, "gamma-flow-closure", closure, 1e-5);

    Ok(lines)
}
