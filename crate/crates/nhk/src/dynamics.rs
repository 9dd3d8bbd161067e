//! Full constrained dynamics: Hamilton's equations with Lagrange multipliers.
//!
//! The equations of motion on the constrained momentum space are
//!
//! ```text
//! q̇ = ∂H/∂p,      ṗ = −∂H/∂q + λ_s ω^s(q),      ω^s(q̇) = 0,
//! ```
//!
//! with the multipliers `λ_s` determined by index reduction: differentiating
//! the membership functions `c^s(q, p) = ω^s(q) · g(q)⁻¹ p` along the flow
//! and requiring `ċ^s = 0` yields the m×m linear system
//!
//! ```text
//! G λ = b,   G_{st} = ω^s g⁻¹ ω^t,   b_s = (g⁻¹ω^s)·∂H/∂q − (∂_q c^s)·q̇.
//! ```
//!
//! `G` is the (SPD) constraint Gram matrix in the kinetic cometric.

use nalgebra::{Cholesky, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::chart::{ChartSystem, PhasePoint};
use crate::diff::DiffEngine;
use crate::error::{fmt_point, NhkError, Result};

/// Time-stepping scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// Classical fixed-step 4th-order Runge–Kutta (the reference scheme).
    Rk4,
    /// Adaptive Runge–Kutta–Fehlberg 4(5).
    Rk45,
}

#[derive(Debug, Clone, Serialize)]
pub struct IntegratorConfig {
    pub scheme: Scheme,
    /// Step size (RK4) or initial step (RK45).
    pub dt: f64,
    pub t_end: f64,
    /// Re-project momenta onto the constrained momentum space after every
    /// step.  Off by default: membership drift is a diagnostic, and
    /// projection would hide it.
    pub projection: bool,
    /// Error tolerance for the adaptive scheme.
    pub tolerance: f64,
    /// Smallest step the adaptive scheme may take before giving up.
    pub dt_min: f64,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        IntegratorConfig {
            scheme: Scheme::Rk4,
            dt: 1e-3,
            t_end: 5.0,
            projection: false,
            tolerance: 1e-10,
            dt_min: 1e-10,
        }
    }
}

impl IntegratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dt <= 0.0 || self.dt.is_nan() || self.t_end < 0.0 || self.t_end.is_nan() {
            return Err(NhkError::Config(format!(
                "integrator needs dt > 0 and t_end >= 0, got dt={}, t_end={}",
                self.dt, self.t_end
            )));
        }
        Ok(())
    }
}

/// An integrated path with per-sample diagnostics.
#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<PhasePoint>,
    /// Energy at each sample.
    pub energies: Vec<f64>,
    /// `ω^s(q̇)` magnitudes at each sample, one entry per constraint.
    pub constraint_residuals: Vec<DVector<f64>>,
    /// Momentum-space membership residual at each sample.
    pub m_residuals: Vec<f64>,
    /// Multiplier values at each sample (empty when not applicable).
    pub multipliers: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last_state(&self) -> &PhasePoint {
        self.states.last().expect("trajectory is nonempty")
    }
}

/// Summary statistics over a trajectory.
#[derive(Debug, Clone, Serialize)]
pub struct MonitorReport {
    pub samples: usize,
    pub max_energy_drift: f64,
    pub max_constraint_residual: f64,
    pub max_m_residual: f64,
}

/// Evaluate the constrained Hamiltonian vector field at a phase point.
///
/// Returns `(q̇, ṗ, λ)`.  The returned `q̇` satisfies the constraints to
/// solver precision whenever `state.p` lies in the momentum space `M`.
pub fn full_vector_field(
    system: &ChartSystem,
    state: &PhasePoint,
    engine: &DiffEngine,
) -> Result<(DVector<f64>, DVector<f64>, DVector<f64>)> {
    if !state.is_finite() {
        return Err(NhkError::DomainViolation(
            "non-finite phase point".to_string(),
        ));
    }
    let q = state.q.as_slice();
    let p = &state.p;
    let m = system.num_constraints();

    let chol = system.metric_cholesky(q)?;
    let qdot = chol.solve(p);

    // ∂H/∂q at fixed p.
    let dh_dq = engine.gradient(|x| system.hamiltonian(x, p).unwrap_or(f64::NAN), q);
    if dh_dq.iter().any(|x| !x.is_finite()) {
        return Err(NhkError::DomainViolation(format!(
            "Hamiltonian gradient is not finite at {}",
            fmt_point(q)
        )));
    }

    if m == 0 {
        return Ok((qdot, -dh_dq, DVector::zeros(0)));
    }

    let omega = system.constraint_matrix(q);
    if omega.iter().any(|x| !x.is_finite()) {
        return Err(NhkError::DomainViolation(format!(
            "constraint forms are not finite at {}",
            fmt_point(q)
        )));
    }
    // Rows of Ω g⁻¹ as columns: g⁻¹ Ωᵀ.
    let ginv_omega_t = chol.solve(&omega.transpose());
    let gram = &omega * &ginv_omega_t;

    // b_s = (g⁻¹ω^s)·∂H/∂q − (∂_q c^s)·q̇ with c^s(q) = ω^s(q)·g(q)⁻¹p.
    let mut b = DVector::zeros(m);
    for s in 0..m {
        let dq_c = engine.gradient(
            |x| {
                let form = system.constraint_forms[s](x);
                match system.legendre_inverse(x, p) {
                    Ok(v) => form.dot(&v),
                    Err(_) => f64::NAN,
                }
            },
            q,
        );
        b[s] = ginv_omega_t.column(s).dot(&dh_dq) - dq_c.dot(&qdot);
    }
    let lambda = Cholesky::new(gram)
        .ok_or_else(|| NhkError::SingularConstraintGram(fmt_point(q)))?
        .solve(&b);

    let pdot = -dh_dq + omega.transpose() * &lambda;
    Ok((qdot, pdot, lambda))
}

/// Generic RK4 step for a first-order system `ż = F(z)`.
pub fn rk4_step<F>(field: &F, z: &DVector<f64>, dt: f64) -> Result<DVector<f64>>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    let k1 = field(z)?;
    let k2 = field(&(z + &k1 * (dt / 2.0)))?;
    let k3 = field(&(z + &k2 * (dt / 2.0)))?;
    let k4 = field(&(z + &k3 * dt))?;
    Ok(z + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0))
}

/// Runge–Kutta–Fehlberg 4(5) embedded step: returns the 5th-order solution
/// and an error estimate.
fn rkf45_step<F>(field: &F, z: &DVector<f64>, dt: f64) -> Result<(DVector<f64>, f64)>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    let k1 = field(z)?;
    let k2 = field(&(z + &k1 * (dt * 1.0 / 4.0)))?;
    let k3 = field(&(z + &k1 * (dt * 3.0 / 32.0) + &k2 * (dt * 9.0 / 32.0)))?;
    let k4 = field(
        &(z + &k1 * (dt * 1932.0 / 2197.0) - &k2 * (dt * 7200.0 / 2197.0)
            + &k3 * (dt * 7296.0 / 2197.0)),
    )?;
    let k5 = field(
        &(z + &k1 * (dt * 439.0 / 216.0) - &k2 * (dt * 8.0) + &k3 * (dt * 3680.0 / 513.0)
            - &k4 * (dt * 845.0 / 4104.0)),
    )?;
    let k6 = field(
        &(z - &k1 * (dt * 8.0 / 27.0) + &k2 * (dt * 2.0) - &k3 * (dt * 3544.0 / 2565.0)
            + &k4 * (dt * 1859.0 / 4104.0)
            - &k5 * (dt * 11.0 / 40.0)),
    )?;
    let z5 = z
        + (&k1 * (16.0 / 135.0) + &k3 * (6656.0 / 12825.0) + &k4 * (28561.0 / 56430.0)
            - &k5 * (9.0 / 50.0)
            + &k6 * (2.0 / 55.0))
            * dt;
    let z4 = z
        + (&k1 * (25.0 / 216.0) + &k3 * (1408.0 / 2565.0) + &k4 * (2197.0 / 4104.0)
            - &k5 * (1.0 / 5.0))
            * dt;
    let err = (&z5 - &z4).amax();
    Ok((z5, err))
}

/// Integrate the full constrained dynamics from `state0`.
pub fn integrate(
    system: &ChartSystem,
    state0: &PhasePoint,
    cfg: &IntegratorConfig,
    engine: &DiffEngine,
) -> Result<Trajectory> {
    cfg.validate()?;
    const M_MEMBERSHIP_TOL: f64 = 1e-6;
    let m_res0 = system.m_projection_residual(state0.q.as_slice(), &state0.p)?;
    if m_res0 > M_MEMBERSHIP_TOL {
        return Err(NhkError::DomainViolation(format!(
            "initial momentum is off the constrained momentum space (residual {m_res0:.3e})"
        )));
    }

    let n = system.dim;
    let pack = |s: &PhasePoint| {
        let mut z = DVector::zeros(2 * n);
        z.rows_mut(0, n).copy_from(&s.q);
        z.rows_mut(n, n).copy_from(&s.p);
        z
    };
    let unpack = |z: &DVector<f64>| PhasePoint {
        q: z.rows(0, n).into_owned(),
        p: z.rows(n, n).into_owned(),
    };
    let field = |z: &DVector<f64>| -> Result<DVector<f64>> {
        let s = unpack(z);
        let (qdot, pdot, _) = full_vector_field(system, &s, engine)?;
        let mut out = DVector::zeros(2 * n);
        out.rows_mut(0, n).copy_from(&qdot);
        out.rows_mut(n, n).copy_from(&pdot);
        Ok(out)
    };

    let mut traj = Trajectory {
        times: Vec::new(),
        states: Vec::new(),
        energies: Vec::new(),
        constraint_residuals: Vec::new(),
        m_residuals: Vec::new(),
        multipliers: Vec::new(),
    };
    let record = |t: f64, state: &PhasePoint, traj: &mut Trajectory| -> Result<()> {
        let q = state.q.as_slice();
        let (qdot, _, lambda) = full_vector_field(system, state, engine)?;
        traj.times.push(t);
        traj.energies.push(system.hamiltonian(q, &state.p)?);
        traj.constraint_residuals
            .push(system.constraint_residual(q, &qdot));
        traj.m_residuals
            .push(system.m_projection_residual(q, &state.p)?);
        traj.multipliers.push(lambda);
        traj.states.push(state.clone());
        Ok(())
    };

    let mut t = 0.0;
    let mut state = state0.clone();
    record(t, &state, &mut traj)?;

    match cfg.scheme {
        Scheme::Rk4 => {
            let steps = (cfg.t_end / cfg.dt).round() as usize;
            for k in 1..=steps {
                let z = rk4_step(&field, &pack(&state), cfg.dt)?;
                state = unpack(&z);
                if cfg.projection {
                    state.p = system.m_project(state.q.as_slice(), &state.p)?;
                }
                t = k as f64 * cfg.dt;
                record(t, &state, &mut traj)?;
            }
        }
        Scheme::Rk45 => {
            let mut dt = cfg.dt;
            while t < cfg.t_end - 1e-14 {
                dt = dt.min(cfg.t_end - t);
                let (z, err) = rkf45_step(&field, &pack(&state), dt)?;
                if err <= cfg.tolerance || dt <= cfg.dt_min {
                    if err > cfg.tolerance {
                        return Err(NhkError::StepRejected(format!(
                            "error {err:.3e} above tolerance {:.3e} at minimum step {dt:.3e}",
                            cfg.tolerance
                        )));
                    }
                    t += dt;
                    state = unpack(&z);
                    if cfg.projection {
                        state.p = system.m_project(state.q.as_slice(), &state.p)?;
                    }
                    record(t, &state, &mut traj)?;
                }
                // PI-free classical step-size update with safety factor.
                let scale = if err > 0.0 {
                    0.9 * (cfg.tolerance / err).powf(0.2)
                } else {
                    2.0
                };
                dt = (dt * scale.clamp(0.2, 2.0)).max(cfg.dt_min);
            }
        }
    }
    Ok(traj)
}

/// Summarize conservation behavior over a trajectory.
pub fn monitor(traj: &Trajectory, _system: &ChartSystem) -> MonitorReport {
    let e0 = traj.energies.first().copied().unwrap_or(0.0);
    MonitorReport {
        samples: traj.len(),
        max_energy_drift: traj
            .energies
            .iter()
            .map(|e| (e - e0).abs())
            .fold(0.0, f64::max),
        max_constraint_residual: traj
            .constraint_residuals
            .iter()
            .map(|r| if r.is_empty() { 0.0 } else { r.amax() })
            .fold(0.0, f64::max),
        max_m_residual: traj.m_residuals.iter().copied().fold(0.0, f64::max),
    }
}

/// Write a trajectory as CSV: `t, q…, p…, H, lambda…, res…`.
pub fn write_trajectory_csv<W: std::io::Write>(
    writer: W,
    traj: &Trajectory,
    system: &ChartSystem,
) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = vec!["t".into()];
    header.extend(system.coord_names.iter().cloned());
    header.extend(system.coord_names.iter().map(|c| format!("p_{c}")));
    header.push("H".into());
    let m = system.num_constraints();
    let label = |s: usize| -> String {
        system
            .group
            .lie_algebra_labels
            .get(s)
            .cloned()
            .unwrap_or_else(|| format!("{}", s + 1))
    };
    let lam_count = traj.multipliers.first().map_or(0, |l| l.len());
    for s in 0..lam_count {
        header.push(format!("lambda_{}", label(s)));
    }
    for s in 0..m {
        header.push(format!("res_{}", label(s)));
    }
    wtr.write_record(&header)?;

    for i in 0..traj.len() {
        let mut row: Vec<String> = vec![format!("{}", traj.times[i])];
        row.extend(traj.states[i].q.iter().map(|x| format!("{x}")));
        row.extend(traj.states[i].p.iter().map(|x| format!("{x}")));
        row.push(format!("{}", traj.energies[i]));
        row.extend(traj.multipliers[i].iter().map(|x| format!("{x}")));
        row.extend(traj.constraint_residuals[i].iter().map(|x| format!("{x}")));
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Manifest accompanying exported artifacts: what produced them and a
/// content hash of the producing inputs.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub system: String,
    pub parameters: std::collections::BTreeMap<String, f64>,
    pub config: serde_json::Value,
    pub content_hash: String,
}

impl RunManifest {
    pub fn new(
        system: &str,
        parameters: std::collections::BTreeMap<String, f64>,
        config: serde_json::Value,
    ) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(system.as_bytes());
        hasher.update(serde_json::to_vec(&parameters).unwrap_or_default());
        hasher.update(serde_json::to_vec(&config).unwrap_or_default());
        let content_hash = format!("sha256:{:x}", hasher.finalize());
        RunManifest {
            system: system.to_string(),
            parameters,
            config,
            content_hash,
        }
    }
}
