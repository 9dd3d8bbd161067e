//! Exact-solution machinery: separable solutions of the rescaled
//! Hamilton–Jacobi equation on the quotient, their transfer to the full
//! chart through the horizontal lift, verification of the transferred
//! one-form (energy level, closedness on the constraint distribution,
//! membership in the constrained momentum space), and integration of the
//! full dynamics through it.
//!
//! Solutions are represented by their differential: only `dW̄` ever enters a
//! formula, and checking closedness avoids reconstructing a possibly
//! multi-valued potential on periodic coordinates.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::DVector;

use crate::chart::{ChartSystem, DomainBox, OneFormFn, PhasePoint};
use crate::diff::DiffEngine;
use crate::dynamics::{full_vector_field, rk4_step, Trajectory};
use crate::error::{fmt_point, NhkError, Result};
use crate::hamiltonization::Multiplier;
use crate::reduction::ReducedSystem;
use crate::second_stage::TildeSystem;
use crate::systems::SystemBundle;

/// A one-form given by an evaluator over a base domain.
#[derive(Clone)]
pub struct OneFormField {
    pub base_dim: usize,
    pub eval: OneFormFn,
    pub domain: DomainBox,
}

impl std::fmt::Debug for OneFormField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OneFormField")
            .field("base_dim", &self.base_dim)
            .field("domain", &self.domain)
            .finish()
    }
}

impl OneFormField {
    pub fn new(base_dim: usize, eval: OneFormFn, domain: DomainBox) -> Self {
        OneFormField {
            base_dim,
            eval,
            domain,
        }
    }

    pub fn at(&self, q: &[f64]) -> DVector<f64> {
        (self.eval)(q)
    }

    /// Largest mixed-partial antisymmetry `|∂_i σ_j − ∂_j σ_i|` at `q`;
    /// vanishes when the form is locally exact.
    pub fn closedness_residual(&self, q: &[f64], engine: &DiffEngine) -> f64 {
        let d = engine.exterior_derivative_matrix(|x| self.at(x), q);
        if self.base_dim < 2 {
            0.0
        } else {
            d.amax()
        }
    }
}

/// A separable solution: the differential of the unknown function, the energy
/// level, and the named constants tied by the system's energy relation.
#[derive(Debug, Clone)]
pub struct HJSolution {
    pub form: OneFormField,
    pub energy: f64,
    pub constants: BTreeMap<String, f64>,
}

/// Sup of `|H(q, σ(q)) − E|` over a grid of base points.
pub fn hj_residual<H>(hamiltonian: H, sol: &HJSolution, grid: &[Vec<f64>]) -> Result<f64>
where
    H: Fn(&[f64], &DVector<f64>) -> Result<f64>,
{
    let mut sup: f64 = 0.0;
    for q in grid {
        let sigma = sol.form.at(q);
        sup = sup.max((hamiltonian(q, &sigma)? - sol.energy).abs());
    }
    Ok(sup)
}

const ENERGY_RELATION_TOL: f64 = 1e-10;
/// Margin kept between a square-root's zero locus and the admissible box so
/// finite-difference probes near the boundary stay real.
const RADICAND_MARGIN: f64 = 1e-3;

fn constant(map: &BTreeMap<String, f64>, key: &str) -> Option<f64> {
    map.get(key).copied()
}

fn sign_flag(map: &BTreeMap<String, f64>, key: &str) -> Result<f64> {
    match map.get(key) {
        None => Ok(1.0),
        Some(&v) if v == 1.0 || v == -1.0 => Ok(v),
        Some(&v) => Err(NhkError::InvalidConstants(format!(
            "`{key}` must be +1 or -1 (got {v})"
        ))),
    }
}

/// Solve the rescaled Hamilton–Jacobi equation of a built-in system by
/// separation of variables, validating the constants against the system's
/// energy relation and deriving a missing one where the relation determines
/// it.  Square-root branches follow the positive convention unless a
/// `sign_*` flag is supplied.
pub fn separable_solve(
    bundle: &SystemBundle,
    energy: f64,
    constants: &BTreeMap<String, f64>,
) -> Result<HJSolution> {
    match bundle.name.as_str() {
        "vrd" => solve_vertical_disk(bundle, energy, constants),
        "knife-edge" => solve_knife_edge(bundle, energy, constants),
        "snakeboard" => solve_snakeboard(bundle, energy, constants),
        other => Err(NhkError::Config(format!(
            "no separable solution registered for system `{other}`"
        ))),
    }
}

/// Both momenta are conserved, so the differential is a constant covector.
/// The solution family is indexed by the full-chart heading and rolling
/// momenta `(γ_φ⁰, γ_ψ⁰)`, tied to the energy by
/// `(γ_φ⁰)²/J + (I + mR²)/I²·(γ_ψ⁰)² = 2E`; the quotient covector carries
/// `(I + mR²)/I` times the rolling constant.
fn solve_vertical_disk(
    bundle: &SystemBundle,
    energy: f64,
    constants: &BTreeMap<String, f64>,
) -> Result<HJSolution> {
    let p = &bundle.params;
    let (m, r, i, j) = (p["m"], p["R"], p["I"], p["J"]);
    let coupling = (i + m * r * r) / (i * i);

    let relation = |gp: f64, gs: f64| 0.5 * (gp * gp / j + coupling * gs * gs);
    let gp = constant(constants, "gamma_phi0");
    let gs = constant(constants, "gamma_psi0");
    let (gp, gs) = match (gp, gs) {
        (Some(gp), Some(gs)) => {
            if (relation(gp, gs) - energy).abs() > ENERGY_RELATION_TOL {
                return Err(NhkError::InvalidConstants(format!(
                    "energy relation violated: constants give {}, energy is {energy}",
                    relation(gp, gs)
                )));
            }
            (gp, gs)
        }
        (Some(gp), None) => {
            let rad = (2.0 * energy - gp * gp / j) / coupling;
            if rad < 0.0 {
                return Err(NhkError::InvalidConstants(format!(
                    "no real gamma_psi0 exists: radicand {rad:e}"
                )));
            }
            (gp, sign_flag(constants, "sign_psi0")? * rad.sqrt())
        }
        (None, Some(gs)) => {
            let rad = j * (2.0 * energy - coupling * gs * gs);
            if rad < 0.0 {
                return Err(NhkError::InvalidConstants(format!(
                    "no real gamma_phi0 exists: radicand {rad:e}"
                )));
            }
            (sign_flag(constants, "sign_phi0")? * rad.sqrt(), gs)
        }
        (None, None) => {
            return Err(NhkError::InvalidConstants(
                "need gamma_phi0 or gamma_psi0 to pin down the solution".to_string(),
            ))
        }
    };

    let sigma = DVector::from_vec(vec![gp, (i + m * r * r) / i * gs]);
    let eval: OneFormFn = Arc::new(move |_qbar: &[f64]| sigma.clone());
    let mut out = constants.clone();
    out.insert("gamma_phi0".into(), gp);
    out.insert("gamma_psi0".into(), gs);
    out.insert("energy".into(), energy);
    Ok(HJSolution {
        form: OneFormField::new(2, eval, bundle.reduced_domain()),
        energy,
        constants: out,
    })
}

/// The heading momentum separates with a cosine profile and the descent
/// coordinate absorbs the potential: `dW̄ = γ_φ⁰ cosφ dφ ± s(x) dx` with
/// `s(x)² = m(2E − (γ_φ⁰)²/J) + 2m²g sinα·x`.  The admissible box is
/// restricted to where the radicand stays positive.
fn solve_knife_edge(
    bundle: &SystemBundle,
    energy: f64,
    constants: &BTreeMap<String, f64>,
) -> Result<HJSolution> {
    let p = &bundle.params;
    let (m, j, alpha, grav) = (p["m"], p["J"], p["alpha"], p["g"]);
    let gp = constant(constants, "gamma_phi0").ok_or_else(|| {
        NhkError::InvalidConstants("knife-edge solution needs gamma_phi0".to_string())
    })?;
    let sign = sign_flag(constants, "sign_x")?;

    // Radicand rad0 + slope_x·x must exceed the margin on the whole box.
    let rad0 = m * (2.0 * energy - gp * gp / j);
    let slope_x = 2.0 * m * m * grav * alpha.sin();
    let mut domain = bundle.reduced_domain();
    if slope_x == 0.0 {
        if rad0 < RADICAND_MARGIN {
            return Err(NhkError::DomainViolation(format!(
                "radicand {rad0:e} is negative everywhere for gamma_phi0 = {gp}"
            )));
        }
    } else {
        let x_crit = (RADICAND_MARGIN - rad0) / slope_x;
        if slope_x > 0.0 {
            domain.lower[1] = domain.lower[1].max(x_crit);
        } else {
            domain.upper[1] = domain.upper[1].min(x_crit);
        }
        if domain.lower[1] >= domain.upper[1] {
            return Err(NhkError::DomainViolation(format!(
                "no admissible descent range: radicand negative on the whole box \
                 for gamma_phi0 = {gp}, energy = {energy}"
            )));
        }
    }

    let eval: OneFormFn = Arc::new(move |qbar: &[f64]| {
        DVector::from_vec(vec![
            gp * qbar[0].cos(),
            sign * (rad0 + slope_x * qbar[1]).sqrt(),
        ])
    });
    let mut out = constants.clone();
    out.insert("gamma_phi0".into(), gp);
    out.insert("energy".into(), energy);
    Ok(HJSolution {
        form: OneFormField::new(2, eval, domain),
        energy,
        constants: out,
    })
}

/// Solution on the double quotient `(θ, φ)` at momentum level μ: both
/// variables separate, with the steering component weighted by the
/// second-stage multiplier: `dW̃ = γ_θ⁰ dθ + f_μ(φ) γ_φ⁰ dφ`, and
/// `(γ_θ⁰)² + (γ_φ⁰)²/(2J₁) + μ_ψ²/J₀ = 2E`.
fn solve_snakeboard(
    bundle: &SystemBundle,
    energy: f64,
    constants: &BTreeMap<String, f64>,
) -> Result<HJSolution> {
    let p = &bundle.params;
    let (m, r, j0, j1) = (p["m"], p["r"], p["J0"], p["J1"]);
    let mr2 = m * r * r;
    let gp = constant(constants, "gamma_phi0").ok_or_else(|| {
        NhkError::InvalidConstants("snakeboard solution needs gamma_phi0".to_string())
    })?;
    let mu = constant(constants, "mu_psi").unwrap_or(p["mu_psi"]);

    let rad = 2.0 * (energy - gp * gp / (4.0 * j1) - mu * mu / (2.0 * j0));
    let gt = match constant(constants, "gamma_theta0") {
        Some(gt) => {
            let lhs = 0.5 * (gt * gt + gp * gp / (2.0 * j1) + mu * mu / j0);
            if (lhs - energy).abs() > ENERGY_RELATION_TOL {
                return Err(NhkError::InvalidConstants(format!(
                    "energy relation violated: constants give {lhs}, energy is {energy}"
                )));
            }
            gt
        }
        None => {
            if rad < 0.0 {
                return Err(NhkError::InvalidConstants(format!(
                    "no real gamma_theta0 exists: radicand {rad:e}"
                )));
            }
            sign_flag(constants, "sign_theta0")? * rad.sqrt()
        }
    };

    let domain = bundle
        .second
        .as_ref()
        .map(|cfg| cfg.tilde_domain.clone())
        .ok_or_else(|| NhkError::Config("snakeboard bundle lacks second-stage data".into()))?;
    let eval: OneFormFn = Arc::new(move |qt: &[f64]| {
        let sp = qt[1].sin();
        DVector::from_vec(vec![gt, sp / (mr2 - j0 * sp * sp).sqrt() * gp])
    });
    let mut out = constants.clone();
    out.insert("gamma_theta0".into(), gt);
    out.insert("gamma_phi0".into(), gp);
    out.insert("mu_psi".into(), mu);
    out.insert("energy".into(), energy);
    Ok(HJSolution {
        form: OneFormField::new(2, eval, domain),
        energy,
        constants: out,
    })
}

/// Transfer a quotient solution to the full chart:
/// `γ(q) = hl^M_q(dW̄(π(q)) / f(π(q)))`.  The result takes values in the
/// constrained momentum space by construction.
pub fn gamma_first_stage(
    rsys: &ReducedSystem,
    f: &Multiplier,
    sol: &HJSolution,
    domain: &DomainBox,
) -> Result<OneFormField> {
    if sol.form.base_dim != rsys.reduced_dim() {
        return Err(NhkError::Config(format!(
            "solution lives on a {}-dimensional base, quotient has dimension {}",
            sol.form.base_dim,
            rsys.reduced_dim()
        )));
    }
    // Surface a vanishing multiplier early, at the box center.
    let center: Vec<f64> = domain
        .lower
        .iter()
        .zip(&domain.upper)
        .map(|(lo, hi)| 0.5 * (lo + hi))
        .collect();
    f.eval(&rsys.project_q(&center))?;

    let dim = rsys.full.dim;
    let rsys = rsys.clone();
    let f = f.clone();
    let w = sol.form.eval.clone();
    let eval: OneFormFn = Arc::new(move |q: &[f64]| {
        let qbar = rsys.project_q(q);
        let lifted = f.eval(&qbar).and_then(|fv| rsys.hl_m(q, &(w(&qbar) / fv)));
        lifted.unwrap_or_else(|_| DVector::from_element(q.len(), f64::NAN))
    });
    Ok(OneFormField::new(dim, eval, domain.clone()))
}

/// Transfer a double-quotient solution to the full chart: lift into the zero
/// level of the residual momentum, restore the level with the connection
/// one-form, then lift the result the rest of the way:
/// `γ = hl^M ∘ (hl^M̄(dW̃(q̃)/f_μ(q̃)) + α_μ)`.
pub fn gamma_second_stage(
    tsys: &TildeSystem,
    sol: &HJSolution,
    domain: &DomainBox,
) -> Result<OneFormField> {
    let setup = &tsys.setup;
    if sol.form.base_dim != setup.tilde_dim() {
        return Err(NhkError::Config(format!(
            "solution lives on a {}-dimensional base, double quotient has dimension {}",
            sol.form.base_dim,
            setup.tilde_dim()
        )));
    }
    // The solution must sit on the same momentum level as the setup.
    if let Some(mu_sol) = constant(&sol.constants, "mu_psi") {
        if setup.mu.len() != 1 || (setup.mu[0] - mu_sol).abs() > 1e-12 {
            return Err(NhkError::WrongLevel(format!(
                "solution is at level {mu_sol}, setup is at {}",
                fmt_point(setup.mu.as_slice())
            )));
        }
    }

    let dim = setup.rsys.full.dim;
    let tsys = tsys.clone();
    let w = sol.form.eval.clone();
    let eval: OneFormFn = Arc::new(move |q: &[f64]| {
        let setup = &tsys.setup;
        let qbar = setup.rsys.project_q(q);
        let qtilde = setup.project_tilde(&qbar);
        let lifted = tsys.multiplier.eval(&qtilde).and_then(|fv| {
            let pbar0 = setup.bar_horizontal_lift_mom(&qbar, &(w(&qtilde) / fv))?;
            let pbar = pbar0 + setup.alpha_mu(&qbar)?;
            setup.rsys.hl_m(q, &pbar)
        });
        lifted.unwrap_or_else(|_| DVector::from_element(q.len(), f64::NAN))
    });
    Ok(OneFormField::new(dim, eval, domain.clone()))
}

/// Verification report for a transferred one-form.
#[derive(Debug, Clone, serde::Serialize)]
pub struct HJReport {
    pub samples: usize,
    /// sup |H(q, γ(q)) − E|.
    pub sup_energy_residual: f64,
    /// sup |dγ(u, w)| over horizontal frame pairs.
    pub sup_dgamma_residual: f64,
    /// sup of the constrained-momentum-space membership residual.
    pub sup_membership_residual: f64,
}

impl HJReport {
    pub fn max_residual(&self) -> f64 {
        self.sup_energy_residual
            .max(self.sup_dgamma_residual)
            .max(self.sup_membership_residual)
    }
}

/// Step for differencing a transferred form: balances the square-root
/// curvature of the solution components against cancellation noise.
const DGAMMA_STEP: f64 = 1e-5;

/// Check the three defining properties of an exact solution on random domain
/// points: constant energy, vanishing exterior derivative on pairs of
/// horizontal lifts of the quotient basis, and membership in the constrained
/// momentum space.
pub fn nh_hj_verify(
    system: &ChartSystem,
    rsys: &ReducedSystem,
    gamma: &OneFormField,
    energy: f64,
    samples: usize,
    seed: u64,
) -> Result<HJReport> {
    let mut sampler = crate::sample::Sampler::new(seed);
    let engine = DiffEngine::with_step(DGAMMA_STEP);
    let nbar = rsys.reduced_dim();
    let mut sup_e: f64 = 0.0;
    let mut sup_d: f64 = 0.0;
    let mut sup_m: f64 = 0.0;
    for _ in 0..samples {
        let q = sampler.point_in(&gamma.domain);
        let sigma = gamma.at(&q);
        if sigma.iter().any(|x| !x.is_finite()) {
            return Err(NhkError::DomainViolation(format!(
                "transferred form is not finite at {}",
                fmt_point(&q)
            )));
        }
        sup_e = sup_e.max((system.hamiltonian(&q, &sigma)? - energy).abs());
        sup_m = sup_m.max(system.m_projection_residual(&q, &sigma)?);
        for k in 0..nbar {
            let mut ek = DVector::zeros(nbar);
            ek[k] = 1.0;
            let u = rsys.hl_d(&q, &ek)?;
            for l in (k + 1)..nbar {
                let mut el = DVector::zeros(nbar);
                el[l] = 1.0;
                let w = rsys.hl_d(&q, &el)?;
                let d = engine.exterior_derivative_oneform(
                    |x| gamma.at(x),
                    &q,
                    u.as_slice(),
                    w.as_slice(),
                );
                sup_d = sup_d.max(d.abs());
            }
        }
    }
    Ok(HJReport {
        samples,
        sup_energy_residual: sup_e,
        sup_dgamma_residual: sup_d,
        sup_membership_residual: sup_m,
    })
}

/// Disagreement between the flow generated by the form (`q̇ = g⁻¹γ(q)`,
/// `ṗ = Dγ·q̇`) and the constrained equations of motion at `(q, γ(q))`.
pub fn gamma_field_defect(
    system: &ChartSystem,
    gamma: &OneFormField,
    q: &[f64],
    engine: &DiffEngine,
) -> Result<f64> {
    let sigma = gamma.at(q);
    let v = system.legendre_inverse(q, &sigma)?;
    let jac = engine.jacobian(|x| gamma.at(x), q);
    let pdot_form = jac * &v;
    let state = PhasePoint::new(DVector::from_column_slice(q), sigma);
    let (qdot, pdot, _) = full_vector_field(system, &state, engine)?;
    Ok((&v - qdot).amax().max((pdot_form - pdot).amax()))
}

/// Integrate the full dynamics through the form: the base follows
/// `q̇ = g⁻¹γ(q)` and the momentum rides along as `p = γ(q)`.
pub fn integrate_via_gamma(
    system: &ChartSystem,
    gamma: &OneFormField,
    q0: &[f64],
    t_end: f64,
    dt: f64,
) -> Result<Trajectory> {
    if dt <= 0.0 || dt.is_nan() || t_end < 0.0 || t_end.is_nan() {
        return Err(NhkError::Config(format!(
            "need dt > 0 and t_end >= 0 (got dt = {dt}, t_end = {t_end})"
        )));
    }
    let field = |z: &DVector<f64>| -> Result<DVector<f64>> {
        let sigma = gamma.at(z.as_slice());
        if sigma.iter().any(|x| !x.is_finite()) {
            return Err(NhkError::DomainViolation(format!(
                "form is not finite at {}",
                fmt_point(z.as_slice())
            )));
        }
        system.legendre_inverse(z.as_slice(), &sigma)
    };

    let steps = (t_end / dt).round() as usize;
    let mut traj = Trajectory::default();
    let mut q = DVector::from_column_slice(q0);
    for step in 0..=steps {
        let t = step as f64 * dt;
        let sigma = gamma.at(q.as_slice());
        let v = field(&q)?;
        traj.times.push(t);
        traj.energies
            .push(system.hamiltonian(q.as_slice(), &sigma)?);
        traj.constraint_residuals
            .push(system.constraint_residual(q.as_slice(), &v));
        traj.m_residuals
            .push(system.m_projection_residual(q.as_slice(), &sigma)?);
        traj.multipliers.push(DVector::zeros(0));
        traj.states.push(PhasePoint::new(q.clone(), sigma));
        if step < steps {
            q = rk4_step(&field, &q, dt)?;
        }
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{integrate, IntegratorConfig};
    use crate::sample::Sampler;
    use crate::systems;

    fn grid(domain: &DomainBox, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut sampler = Sampler::new(seed);
        (0..n).map(|_| sampler.point_in(domain)).collect()
    }

    #[test]
    fn disk_solution_satisfies_rescaled_equation() {
        let bundle = systems::build("vrd", &Default::default()).unwrap();
        let mut c = BTreeMap::new();
        c.insert("gamma_phi0".to_string(), 1.0);
        c.insert("gamma_psi0".to_string(), 1.0);
        let sol = separable_solve(&bundle, 1.5, &c).unwrap();
        let f = bundle.multiplier.as_ref().unwrap();
        let res = hj_residual(
            |q: &[f64], p: &DVector<f64>| {
                crate::hamiltonization::chaplygin_hamiltonian(&bundle.reduced, f, q, p)
            },
            &sol,
            &grid(&sol.form.domain, 40, 3),
        )
        .unwrap();
        assert!(res < 1e-12, "residual {res:e}");
    }

    #[test]
    fn disk_energy_relation_enforced_and_derivable() {
        let bundle = systems::build("vrd", &Default::default()).unwrap();
        let mut c = BTreeMap::new();
        c.insert("gamma_phi0".to_string(), 1.0);
        c.insert("gamma_psi0".to_string(), 1.0);
        assert!(matches!(
            separable_solve(&bundle, 1.0, &c),
            Err(NhkError::InvalidConstants(_))
        ));

        let mut c = BTreeMap::new();
        c.insert("gamma_phi0".to_string(), 1.0);
        let sol = separable_solve(&bundle, 1.5, &c).unwrap();
        assert!((sol.constants["gamma_psi0"] - 1.0).abs() < 1e-12);

        c.insert("sign_psi0".to_string(), -1.0);
        let sol = separable_solve(&bundle, 1.5, &c).unwrap();
        assert!((sol.constants["gamma_psi0"] + 1.0).abs() < 1e-12);

        // Underdetermined and over-energetic cases fail loudly.
        assert!(matches!(
            separable_solve(&bundle, 1.5, &BTreeMap::new()),
            Err(NhkError::InvalidConstants(_))
        ));
        let mut c = BTreeMap::new();
        c.insert("gamma_phi0".to_string(), 10.0);
        assert!(matches!(
            separable_solve(&bundle, 1.5, &c),
            Err(NhkError::InvalidConstants(_))
        ));
    }

    #[test]
    fn knife_solution_restricts_domain_and_satisfies_equation() {
        let bundle = systems::build("knife-edge", &Default::default()).unwrap();
        let mut c = BTreeMap::new();
        c.insert("gamma_phi0".to_string(), 0.15);
        let sol = separable_solve(&bundle, 1.0, &c).unwrap();
        // rad0 + slope·x ≥ margin pins the lower descent coordinate.
        let p = &bundle.params;
        let rad0 = p["m"] * (2.0 - 0.15 * 0.15 / p["J"]);
        let slope = 2.0 * p["m"] * p["m"] * p["g"] * p["alpha"].sin();
        assert!((sol.form.domain.lower[1] - (1e-3 - rad0) / slope).abs() < 1e-12);
        assert!(sol.form.domain.lower[1] > -0.21);

        let f = bundle.multiplier.as_ref().unwrap();
        let res = hj_residual(
            |q: &[f64], p: &DVector<f64>| {
                crate::hamiltonization::chaplygin_hamiltonian(&bundle.reduced, f, q, p)
            },
            &sol,
            &grid(&sol.form.domain, 60, 4),
        )
        .unwrap();
        assert!(res < 1e-10, "residual {res:e}");

        // Closedness: the two components depend on separate variables.
        for q in grid(&sol.form.domain, 10, 5) {
            assert!(sol.form.closedness_residual(&q, &DiffEngine::default()) < 1e-8);
        }

        // An energy below the potential minimum on the box leaves nothing.
        let mut c = BTreeMap::new();
        c.insert("gamma_phi0".to_string(), 0.15);
        assert!(matches!(
            separable_solve(&bundle, -20.0, &c),
            Err(NhkError::DomainViolation(_))
        ));
    }

    #[test]
    fn disk_transfer_matches_closed_form() {
        let bundle = systems::build("vrd", &Default::default()).unwrap();
        let mut c = BTreeMap::new();
        c.insert("gamma_phi0".to_string(), 1.0);
        c.insert("gamma_psi0".to_string(), 1.0);
        let sol = separable_solve(&bundle, 1.5, &c).unwrap();
        let gamma = gamma_first_stage(
            &bundle.reduced,
            bundle.multiplier.as_ref().unwrap(),
            &sol,
            &bundle.domain,
        )
        .unwrap();
        for q in grid(&bundle.domain, 25, 6) {
            let closed = (bundle.oracles.gamma)(&q, &sol.constants);
            assert!((gamma.at(&q) - closed).amax() < 1e-10);
        }
    }

    #[test]
    fn knife_transfer_matches_closed_form() {
        let bundle = systems::build("knife-edge", &Default::default()).unwrap();
        let mut c = BTreeMap::new();
        c.insert("gamma_phi0".to_string(), 0.15);
        let sol = separable_solve(&bundle, 1.0, &c).unwrap();
        let mut domain = bundle.domain.clone();
        domain.lower[1] = sol.form.domain.lower[1];
        let gamma = gamma_first_stage(
            &bundle.reduced,
            bundle.multiplier.as_ref().unwrap(),
            &sol,
            &domain,
        )
        .unwrap();
        for q in grid(&domain, 25, 7) {
            let closed = (bundle.oracles.gamma)(&q, &sol.constants);
            assert!((gamma.at(&q) - closed).amax() < 1e-10);
            assert!(
                bundle
                    .system
                    .m_projection_residual(&q, &gamma.at(&q))
                    .unwrap()
                    < 1e-12
            );
        }
    }

    #[test]
    fn snakeboard_solution_level_and_transfer() {
        let bundle = systems::build("snakeboard", &Default::default()).unwrap();
        let mut c = BTreeMap::new();
        c.insert("gamma_phi0".to_string(), 0.2);
        let sol = separable_solve(&bundle, 2.0, &c).unwrap();
        let gt = sol.constants["gamma_theta0"];
        let p = &bundle.params;
        let relation = 0.5 * (gt * gt + 0.04 / (2.0 * p["J1"]) + 0.09 / p["J0"]);
        assert!((relation - 2.0).abs() < 1e-12);

        let tsys =
            TildeSystem::from_config(bundle.reduced.clone(), bundle.second.as_ref().unwrap())
                .unwrap();
        let gamma = gamma_second_stage(&tsys, &sol, &bundle.domain).unwrap();
        for q in grid(&bundle.domain, 25, 8) {
            let closed = (bundle.oracles.gamma)(&q, &sol.constants);
            assert!(
                (gamma.at(&q) - &closed).amax() < 1e-9,
                "mismatch at {q:?}: {:?} vs {:?}",
                gamma.at(&q),
                closed
            );
            // The residual-symmetry momentum sits exactly on the level.
            let pbar = bundle.reduced.project_p(&q, &gamma.at(&q)).unwrap();
            assert!((pbar[2] - 0.3).abs() < 1e-12);
        }

        // A solution pinned to a different level is rejected at transfer.
        let mut c = BTreeMap::new();
        c.insert("gamma_phi0".to_string(), 0.2);
        c.insert("mu_psi".to_string(), 0.4);
        let other = separable_solve(&bundle, 2.0, &c).unwrap();
        assert!(matches!(
            gamma_second_stage(&tsys, &other, &bundle.domain),
            Err(NhkError::WrongLevel(_))
        ));
    }

    #[test]
    fn snakeboard_rejects_insufficient_energy() {
        let bundle = systems::build("snakeboard", &Default::default()).unwrap();
        let mut c = BTreeMap::new();
        c.insert("gamma_phi0".to_string(), 1.0);
        assert!(matches!(
            separable_solve(&bundle, 0.1, &c),
            Err(NhkError::InvalidConstants(_))
        ));
    }

    #[test]
    fn verify_passes_for_disk_and_fails_for_wrong_multiplier() {
        let bundle = systems::build("vrd", &Default::default()).unwrap();
        let mut c = BTreeMap::new();
        c.insert("gamma_phi0".to_string(), 1.0);
        c.insert("gamma_psi0".to_string(), 1.0);
        let sol = separable_solve(&bundle, 1.5, &c).unwrap();
        let gamma = gamma_first_stage(
            &bundle.reduced,
            bundle.multiplier.as_ref().unwrap(),
            &sol,
            &bundle.domain,
        )
        .unwrap();
        let report = nh_hj_verify(&bundle.system, &bundle.reduced, &gamma, 1.5, 50, 9).unwrap();
        assert!(report.max_residual() < 1e-9, "{report:?}");

        // Deliberately wrong multiplier on the knife edge: the transferred
        // form stops being closed on the constraint distribution.
        let knife = systems::build("knife-edge", &Default::default()).unwrap();
        let mut c = BTreeMap::new();
        c.insert("gamma_phi0".to_string(), 0.15);
        let sol = separable_solve(&knife, 1.0, &c).unwrap();
        let mut domain = knife.domain.clone();
        domain.lower[1] = sol.form.domain.lower[1];
        let bad = gamma_first_stage(&knife.reduced, &Multiplier::one(), &sol, &domain).unwrap();
        let report = nh_hj_verify(&knife.system, &knife.reduced, &bad, 1.0, 50, 10).unwrap();
        assert!(
            report.sup_dgamma_residual > 1e-3,
            "wrong multiplier slipped through: {report:?}"
        );
    }

    #[test]
    fn zero_form_at_critical_point_is_stationary() {
        let mut p = BTreeMap::new();
        p.insert("alpha".to_string(), 0.0);
        let bundle = systems::build("knife-edge", &p).unwrap();
        let zero = OneFormField::new(
            3,
            Arc::new(|q: &[f64]| DVector::zeros(q.len())),
            bundle.domain.clone(),
        );
        let sol = HJSolution {
            form: OneFormField::new(
                2,
                Arc::new(|_q: &[f64]| DVector::zeros(2)),
                bundle.reduced_domain(),
            ),
            energy: 0.0,
            constants: BTreeMap::new(),
        };
        let res = hj_residual(
            |q: &[f64], pp: &DVector<f64>| bundle.reduced.reduced_hamiltonian(q, pp),
            &sol,
            &grid(&sol.form.domain, 10, 11),
        )
        .unwrap();
        assert_eq!(res, 0.0);

        let traj =
            integrate_via_gamma(&bundle.system, &zero, &[0.4, 0.1, -0.2], 1.0, 1e-2).unwrap();
        let drift = (&traj.last_state().q - &traj.states[0].q).amax();
        assert_eq!(drift, 0.0);
    }

    #[test]
    fn via_gamma_matches_direct_integration_on_knife() {
        let bundle = systems::build("knife-edge", &Default::default()).unwrap();
        let mut c = BTreeMap::new();
        c.insert("gamma_phi0".to_string(), 0.15);
        let sol = separable_solve(&bundle, 1.0, &c).unwrap();
        let mut domain = bundle.domain.clone();
        domain.lower[1] = sol.form.domain.lower[1];
        let gamma = gamma_first_stage(
            &bundle.reduced,
            bundle.multiplier.as_ref().unwrap(),
            &sol,
            &domain,
        )
        .unwrap();

        let q0 = vec![0.25, 0.0, 0.0];
        let dt = 1e-3;
        let via = integrate_via_gamma(&bundle.system, &gamma, &q0, 3.0, dt).unwrap();
        let direct = integrate(
            &bundle.system,
            &PhasePoint::new(DVector::from_column_slice(&q0), gamma.at(&q0)),
            &IntegratorConfig {
                dt,
                t_end: 3.0,
                ..Default::default()
            },
            &DiffEngine::default(),
        )
        .unwrap();
        assert_eq!(via.len(), direct.len());
        let mut sup: f64 = 0.0;
        for i in 0..via.len() {
            sup = sup.max((&via.states[i].q - &direct.states[i].q).amax());
            sup = sup.max((&via.states[i].p - &direct.states[i].p).amax());
        }
        assert!(sup < 1e-5, "trajectories diverge: {sup:e}");

        // The flow of the form solves the constrained equations of motion.
        let engine = DiffEngine::default();
        for i in [0, via.len() / 2, via.len() - 1] {
            let defect =
                gamma_field_defect(&bundle.system, &gamma, via.states[i].q.as_slice(), &engine)
                    .unwrap();
            assert!(defect < 1e-6, "field defect {defect:e} at node {i}");
        }
    }
}
