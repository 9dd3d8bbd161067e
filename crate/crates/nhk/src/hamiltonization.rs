//! Multiplier machinery: fiber scalings Ψ_f, the rescaled Hamiltonian and
//! vector field, the pointwise conditions under which the time-reparametrized
//! reduced dynamics become canonically Hamiltonian, and the associated
//! invariant-measure and conjugacy diagnostics.
//!
//! The central objects: a nowhere-zero function `f` of the base point, the
//! fiber scaling `Ψ_f(q̄, p̄) = (q̄, f p̄)`, the rescaled Hamiltonian
//! `H̄_C = H̄ ∘ Ψ_{1/f}`, and the pushforward `X̄_C = TΨ_f ∘ (X̄/f) ∘ Ψ_{1/f}`.
//! When `df ∧ Θ̄ = f Ξ` holds, `X̄_C` is the canonical Hamiltonian field of
//! `H̄_C`, the two-form `f(Ω̄ − Ξ)` is closed, and `f^{n̄−1}` times the
//! Liouville volume is invariant under the reduced flow.

use nalgebra::{DMatrix, DVector};

use crate::chart::{OneFormFn, ScalarFn};
use crate::diff::DiffEngine;
use crate::dynamics::rk4_step;
use crate::error::{fmt_point, NhkError, Result};
use crate::reduction::{ReducedSystem, ReducedTrajectory};

/// A candidate multiplier: a nowhere-zero function of the base point together
/// with its differential.
#[derive(Clone)]
pub struct Multiplier {
    pub value: ScalarFn,
    pub gradient: OneFormFn,
}

impl std::fmt::Debug for Multiplier {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("Multiplier { .. }")
    }
}

impl Multiplier {
    pub fn new(value: ScalarFn, gradient: OneFormFn) -> Self {
        Multiplier { value, gradient }
    }

    /// The trivial multiplier f ≡ 1.
    pub fn one() -> Self {
        Multiplier {
            value: std::sync::Arc::new(|_| 1.0),
            gradient: std::sync::Arc::new(|q: &[f64]| DVector::zeros(q.len())),
        }
    }

    /// Build from a value function alone, differentiating numerically.
    pub fn from_value(value: ScalarFn, engine: DiffEngine) -> Self {
        let v = value.clone();
        Multiplier {
            value,
            gradient: std::sync::Arc::new(move |q: &[f64]| engine.gradient(|x| v(x), q)),
        }
    }

    pub fn eval(&self, qbar: &[f64]) -> Result<f64> {
        let f = (self.value)(qbar);
        if !f.is_finite() || f.abs() <= 1e-12 {
            return Err(NhkError::ZeroMultiplier(format!(
                "multiplier value {f:e} at {}",
                fmt_point(qbar)
            )));
        }
        Ok(f)
    }

    pub fn grad(&self, qbar: &[f64]) -> DVector<f64> {
        (self.gradient)(qbar)
    }

    /// Sup-norm disagreement between the declared gradient and a
    /// finite-difference of the value.
    pub fn gradient_check(&self, qbar: &[f64], engine: &DiffEngine) -> f64 {
        let fd = engine.gradient(|x| (self.value)(x), qbar);
        (fd - self.grad(qbar)).amax()
    }
}

/// A density `f^exponent` against the Liouville volume.
#[derive(Debug, Clone)]
pub struct MeasureDensity {
    pub exponent: i32,
    pub multiplier: Multiplier,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PsiDirection {
    Forward,
    Inverse,
}

/// Fiber scaling: `forward` multiplies the covector by f(q̄), `inverse`
/// divides.
pub fn psi_f(
    f: &Multiplier,
    qbar: &[f64],
    pbar: &DVector<f64>,
    direction: PsiDirection,
) -> Result<DVector<f64>> {
    let fv = f.eval(qbar)?;
    Ok(match direction {
        PsiDirection::Forward => pbar * fv,
        PsiDirection::Inverse => pbar / fv,
    })
}

/// The rescaled Hamiltonian `H̄_C(q̄, p̄) = H̄(q̄, p̄ / f(q̄))`.
pub fn chaplygin_hamiltonian(
    rsys: &ReducedSystem,
    f: &Multiplier,
    qbar: &[f64],
    pbar: &DVector<f64>,
) -> Result<f64> {
    let beta = psi_f(f, qbar, pbar, PsiDirection::Inverse)?;
    rsys.reduced_hamiltonian(qbar, &beta)
}

/// The candidate Hamiltonized field, computed as a pushforward: evaluate the
/// time-rescaled reduced field at the scaled-down covector and map its value
/// through the tangent of Ψ_f (base part unchanged, fiber part
/// `f ṗ + (df · q̇) p`).
pub fn hamiltonized_field(
    rsys: &ReducedSystem,
    f: &Multiplier,
    qbar: &[f64],
    pbar: &DVector<f64>,
    engine: &DiffEngine,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let fv = f.eval(qbar)?;
    let beta = pbar / fv;
    let (xq, xp) = rsys.reduced_vector_field(qbar, &beta, engine)?;
    let a = &xq / fv;
    let b = &xp / fv;
    let df = f.grad(qbar);
    let fiber = b * fv + &beta * df.dot(&a);
    Ok((a, fiber))
}

/// Canonical Hamilton's equations for the rescaled Hamiltonian, differenced
/// independently of the pushforward path; disagreement with
/// `hamiltonized_field` measures failure of the multiplier condition.
pub fn canonical_field(
    rsys: &ReducedSystem,
    f: &Multiplier,
    qbar: &[f64],
    pbar: &DVector<f64>,
    engine: &DiffEngine,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let nbar = rsys.reduced_dim();
    let mut z = Vec::with_capacity(2 * nbar);
    z.extend_from_slice(qbar);
    z.extend(pbar.iter().copied());
    let grad = engine.gradient(
        |zz: &[f64]| {
            let pb = DVector::from_column_slice(&zz[nbar..]);
            chaplygin_hamiltonian(rsys, f, &zz[..nbar], &pb).unwrap_or(f64::NAN)
        },
        &z,
    );
    if grad.iter().any(|x| !x.is_finite()) {
        return Err(NhkError::DomainViolation(format!(
            "rescaled Hamiltonian gradient not finite at {}",
            fmt_point(qbar)
        )));
    }
    Ok((
        grad.rows(nbar, nbar).into_owned(),
        -grad.rows(0, nbar).into_owned(),
    ))
}

/// Coefficient matrix of the two-form `df ∧ Θ̄ − f Ξ` on base directions:
/// `S_ij = df_i p̄_j − df_j p̄_i − f Ξ_ij`.
fn condition_matrix(
    rsys: &ReducedSystem,
    f: &Multiplier,
    qbar: &[f64],
    pbar: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let nbar = rsys.reduced_dim();
    let fv = f.eval(qbar)?;
    let df = f.grad(qbar);
    let k = rsys.xi_matrix(qbar, pbar)?;
    let mut s = DMatrix::zeros(nbar, nbar);
    for i in 0..nbar {
        for j in 0..nbar {
            s[(i, j)] = df[i] * pbar[j] - df[j] * pbar[i] - fv * k[(i, j)];
        }
    }
    Ok(s)
}

/// Pointwise residual of the sufficient multiplier condition
/// `df ∧ Θ̄ = f Ξ` on a pair of base tangent directions.
pub fn sufficient_condition_residual(
    rsys: &ReducedSystem,
    f: &Multiplier,
    qbar: &[f64],
    pbar: &DVector<f64>,
    ubar: &DVector<f64>,
    wbar: &DVector<f64>,
) -> Result<f64> {
    let s = condition_matrix(rsys, f, qbar, pbar)?;
    Ok((ubar.transpose() * s * wbar)[(0, 0)])
}

/// The contraction `i_{X̄_C}(df ∧ Θ̄ − f Ξ)`: a one-form on phase space whose
/// vanishing is equivalent to the Hamiltonized field being canonical.  The
/// dp̄-components are identically zero (the two-form is semibasic); they are
/// returned anyway so the output is a full phase-space covector.
pub fn ns_condition_residual(
    rsys: &ReducedSystem,
    f: &Multiplier,
    qbar: &[f64],
    pbar: &DVector<f64>,
    engine: &DiffEngine,
) -> Result<DVector<f64>> {
    let nbar = rsys.reduced_dim();
    let s = condition_matrix(rsys, f, qbar, pbar)?;
    let (a, _) = hamiltonized_field(rsys, f, qbar, pbar, engine)?;
    let mut out = DVector::zeros(2 * nbar);
    for j in 0..nbar {
        out[j] = (0..nbar).map(|i| a[i] * s[(i, j)]).sum();
    }
    Ok(out)
}

/// Divergence of a phase-space field with respect to the measure
/// `density · (coordinate volume)`: trace of the finite-difference Jacobian
/// plus the field's derivative of log-density.
pub fn divergence_in_measure<F, G>(
    field: F,
    log_density_grad: G,
    z: &[f64],
    engine: &DiffEngine,
) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<DVector<f64>>,
    G: Fn(&[f64]) -> DVector<f64>,
{
    let n = z.len();
    let jac = engine.jacobian(
        |x| field(x).unwrap_or_else(|_| DVector::from_element(n, f64::NAN)),
        z,
    );
    if jac.iter().any(|x| !x.is_finite()) {
        return Err(NhkError::DomainViolation(format!(
            "field Jacobian not finite near {}",
            fmt_point(z)
        )));
    }
    Ok(jac.trace() + field(z)?.dot(&log_density_grad(z)))
}

/// Divergence of the reduced field against the measure `f^exponent Λ̄`; zero
/// (to differencing accuracy) exactly when the measure is invariant.
pub fn measure_divergence(
    rsys: &ReducedSystem,
    density: &MeasureDensity,
    qbar: &[f64],
    pbar: &DVector<f64>,
    engine: &DiffEngine,
) -> Result<f64> {
    let nbar = rsys.reduced_dim();
    // The divergence trace differences the reduced field, itself built from
    // inner solves and differences; a coarser step keeps that inner noise
    // from being amplified above the 1e-6 acceptance threshold.
    let jac_engine = DiffEngine::with_step(DiffEngine::DIVERGENCE_STEP);
    let field = |z: &[f64]| -> Result<DVector<f64>> {
        let pb = DVector::from_column_slice(&z[nbar..]);
        let (dq, dp) = rsys.reduced_vector_field(&z[..nbar], &pb, engine)?;
        let mut out = DVector::zeros(2 * nbar);
        out.rows_mut(0, nbar).copy_from(&dq);
        out.rows_mut(nbar, nbar).copy_from(&dp);
        Ok(out)
    };
    let exponent = density.exponent;
    let f = density.multiplier.clone();
    f.eval(qbar)?;
    let log_density_grad = move |z: &[f64]| {
        let qb = &z[..nbar];
        let fv = (f.value)(qb);
        let mut g = DVector::zeros(2 * nbar);
        g.rows_mut(0, nbar)
            .copy_from(&(f.grad(qb) * (f64::from(exponent) / fv)));
        g
    };
    let mut z = Vec::with_capacity(2 * nbar);
    z.extend_from_slice(qbar);
    z.extend(pbar.iter().copied());
    divergence_in_measure(field, log_density_grad, &z, &jac_engine)
}

fn integrate_phase_field<F>(
    field: F,
    qbar0: &[f64],
    pbar0: &DVector<f64>,
    dt: f64,
    t_end: f64,
) -> Result<DVector<f64>>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    let nbar = qbar0.len();
    let mut z = DVector::zeros(2 * nbar);
    for (i, &v) in qbar0.iter().enumerate() {
        z[i] = v;
    }
    z.rows_mut(nbar, nbar).copy_from(pbar0);
    let steps = (t_end / dt).round() as usize;
    for _ in 0..steps {
        z = rk4_step(&field, &z, dt)?;
    }
    Ok(z)
}

/// Compare the time-t flow of the Hamiltonized field against conjugating the
/// time-t flow of the rescaled reduced field by the fiber scaling; the two
/// agree whenever both are defined.
pub fn flow_conjugacy_check(
    rsys: &ReducedSystem,
    f: &Multiplier,
    qbar0: &[f64],
    pbar0: &DVector<f64>,
    t: f64,
    dt: f64,
    engine: &DiffEngine,
) -> Result<f64> {
    let nbar = rsys.reduced_dim();
    let unpack = |z: &DVector<f64>| -> (Vec<f64>, DVector<f64>) {
        (
            z.rows(0, nbar).iter().copied().collect(),
            z.rows(nbar, nbar).into_owned(),
        )
    };
    let field_c = |z: &DVector<f64>| -> Result<DVector<f64>> {
        let (qb, pb) = unpack(z);
        let (dq, dp) = hamiltonized_field(rsys, f, &qb, &pb, engine)?;
        let mut out = DVector::zeros(2 * nbar);
        out.rows_mut(0, nbar).copy_from(&dq);
        out.rows_mut(nbar, nbar).copy_from(&dp);
        Ok(out)
    };
    let field_scaled = |z: &DVector<f64>| -> Result<DVector<f64>> {
        let (qb, pb) = unpack(z);
        let fv = f.eval(&qb)?;
        let (dq, dp) = rsys.reduced_vector_field(&qb, &pb, engine)?;
        let mut out = DVector::zeros(2 * nbar);
        out.rows_mut(0, nbar).copy_from(&(dq / fv));
        out.rows_mut(nbar, nbar).copy_from(&(dp / fv));
        Ok(out)
    };

    let left = integrate_phase_field(field_c, qbar0, pbar0, dt, t)?;

    let scaled0 = psi_f(f, qbar0, pbar0, PsiDirection::Inverse)?;
    let mid = integrate_phase_field(field_scaled, qbar0, &scaled0, dt, t)?;
    let (qb_mid, pb_mid) = unpack(&mid);
    let back = psi_f(f, &qb_mid, &pb_mid, PsiDirection::Forward)?;
    let mut right = DVector::zeros(2 * nbar);
    for (i, &v) in qb_mid.iter().enumerate() {
        right[i] = v;
    }
    right.rows_mut(nbar, nbar).copy_from(&back);

    Ok((left - right).norm())
}

/// Sup-norm of the exterior derivative of the rescaled structure form
/// `f (Ω̄ − Ξ)` over all coordinate 3-planes at the point.  Closedness of
/// this form is the conformal reformulation of the multiplier condition:
/// it holds for a valid multiplier and fails for `f ≡ 1` whenever Ξ is not
/// closed.
pub fn conformal_form_residual(
    rsys: &ReducedSystem,
    f: &Multiplier,
    qbar: &[f64],
    pbar: &DVector<f64>,
) -> Result<f64> {
    let nbar = rsys.reduced_dim();
    let dim = 2 * nbar;
    f.eval(qbar)?;
    let sigma = |z: &[f64]| -> DMatrix<f64> {
        let qb = &z[..nbar];
        let pb = DVector::from_column_slice(&z[nbar..]);
        let fv = (f.value)(qb);
        let k = match rsys.xi_matrix(qb, &pb) {
            Ok(k) => k,
            Err(_) => return DMatrix::from_element(dim, dim, f64::NAN),
        };
        let mut s = DMatrix::zeros(dim, dim);
        for i in 0..nbar {
            for j in 0..nbar {
                s[(i, j)] = -fv * k[(i, j)];
            }
            s[(i, nbar + i)] = fv;
            s[(nbar + i, i)] = -fv;
        }
        s
    };
    let mut z = Vec::with_capacity(dim);
    z.extend_from_slice(qbar);
    z.extend(pbar.iter().copied());

    // Outer differentiation of a matrix already produced by inner solves and
    // differences: the coarse step caps noise amplification.
    let engine = DiffEngine::with_step(DiffEngine::FIELD_JACOBIAN_STEP);
    let grads: Vec<DMatrix<f64>> = (0..dim).map(|i| engine.partial_mat(sigma, &z, i)).collect();
    let mut sup: f64 = 0.0;
    for a in 0..dim {
        for b in (a + 1)..dim {
            for c in (b + 1)..dim {
                let d3 = grads[a][(b, c)] - grads[b][(a, c)] + grads[c][(a, b)];
                if !d3.is_finite() {
                    return Err(NhkError::DomainViolation(format!(
                        "structure-form differentiation left the domain near {}",
                        fmt_point(qbar)
                    )));
                }
                sup = sup.max(d3.abs());
            }
        }
    }
    Ok(sup)
}

/// The fiber-scaling map on packed phase points, for numeric tangent maps.
fn psi_phase_map(
    f: &Multiplier,
    nbar: usize,
    direction: PsiDirection,
) -> impl Fn(&[f64]) -> DVector<f64> + '_ {
    move |z: &[f64]| {
        let fv = (f.value)(&z[..nbar]);
        let scale = match direction {
            PsiDirection::Forward => fv,
            PsiDirection::Inverse => 1.0 / fv,
        };
        let mut out = DVector::from_column_slice(z);
        for i in nbar..z.len() {
            out[i] *= scale;
        }
        out
    }
}

/// Tautological one-form at a packed phase point on a phase tangent vector.
fn theta_eval(nbar: usize, z: &DVector<f64>, v: &DVector<f64>) -> f64 {
    (0..nbar).map(|i| z[nbar + i] * v[i]).sum()
}

/// Residual of `Ψ*_{1/f} Θ̄ = Θ̄ / f` at a point on a tangent vector, with the
/// pullback evaluated through a finite-difference tangent map.
pub fn pullback_theta_residual(
    f: &Multiplier,
    qbar: &[f64],
    pbar: &DVector<f64>,
    v: &DVector<f64>,
    engine: &DiffEngine,
) -> Result<f64> {
    let nbar = qbar.len();
    let fv = f.eval(qbar)?;
    let mut z = Vec::with_capacity(2 * nbar);
    z.extend_from_slice(qbar);
    z.extend(pbar.iter().copied());
    let map = psi_phase_map(f, nbar, PsiDirection::Inverse);
    let jac = engine.jacobian(&map, &z);
    let pulled = theta_eval(nbar, &map(&z), &(&jac * v));
    let direct = theta_eval(nbar, &DVector::from_column_slice(&z), v) / fv;
    Ok((pulled - direct).abs())
}

/// Residual of `Ψ*_{1/f} Ξ = Ξ / f` at a point on a pair of tangent vectors.
pub fn pullback_xi_residual(
    rsys: &ReducedSystem,
    f: &Multiplier,
    qbar: &[f64],
    pbar: &DVector<f64>,
    v: &DVector<f64>,
    w: &DVector<f64>,
    engine: &DiffEngine,
) -> Result<f64> {
    let nbar = rsys.reduced_dim();
    let fv = f.eval(qbar)?;
    let mut z = Vec::with_capacity(2 * nbar);
    z.extend_from_slice(qbar);
    z.extend(pbar.iter().copied());
    let map = psi_phase_map(f, nbar, PsiDirection::Inverse);
    let jac = engine.jacobian(&map, &z);
    let zi = map(&z);
    let (vi, wi) = (&jac * v, &jac * w);
    let xi_at = |zz: &DVector<f64>, a: &DVector<f64>, b: &DVector<f64>| -> Result<f64> {
        let qb: Vec<f64> = zz.rows(0, nbar).iter().copied().collect();
        let pb = zz.rows(nbar, nbar).into_owned();
        let k = rsys.xi_matrix(&qb, &pb)?;
        let (aq, bq) = (a.rows(0, nbar), b.rows(0, nbar));
        Ok((aq.transpose() * k * bq)[(0, 0)])
    };
    let pulled = xi_at(&zi, &vi, &wi)?;
    let direct = xi_at(&DVector::from_column_slice(&z), v, w)? / fv;
    Ok((pulled - direct).abs())
}

/// Canonical two-form on packed phase tangents.
fn canonical_omega(nbar: usize, u: &DVector<f64>, w: &DVector<f64>) -> f64 {
    (0..nbar)
        .map(|i| u[i] * w[nbar + i] - u[nbar + i] * w[i])
        .sum()
}

/// Wedge square of a two-form on an ordered 4-frame.
fn wedge_square<F: Fn(&DVector<f64>, &DVector<f64>) -> f64>(
    alpha: F,
    frame: &[DVector<f64>; 4],
) -> f64 {
    let a = |i: usize, j: usize| alpha(&frame[i], &frame[j]);
    2.0 * (a(0, 1) * a(2, 3) - a(0, 2) * a(1, 3) + a(0, 3) * a(1, 2))
}

/// Residual of the wedge-power identity `(Ψ*_f Ω̄)² = f² Ω̄²` on a 4-frame
/// (two-degree-of-freedom base), with the pullback differenced numerically.
pub fn wedge_power_residual(
    f: &Multiplier,
    qbar: &[f64],
    pbar: &DVector<f64>,
    frame: &[DVector<f64>; 4],
    engine: &DiffEngine,
) -> Result<f64> {
    let nbar = qbar.len();
    let fv = f.eval(qbar)?;
    let mut z = Vec::with_capacity(2 * nbar);
    z.extend_from_slice(qbar);
    z.extend(pbar.iter().copied());
    let map = psi_phase_map(f, nbar, PsiDirection::Forward);
    let jac = engine.jacobian(&map, &z);
    let pulled =
        |u: &DVector<f64>, w: &DVector<f64>| canonical_omega(nbar, &(&jac * u), &(&jac * w));
    let lhs = wedge_square(pulled, frame);
    let rhs = fv * fv * wedge_square(|u, w| canonical_omega(nbar, u, w), frame);
    Ok((lhs - rhs).abs())
}

/// Integrate the Hamiltonized field, recording the rescaled energy.
pub fn integrate_hamiltonized(
    rsys: &ReducedSystem,
    f: &Multiplier,
    qbar0: &[f64],
    pbar0: &DVector<f64>,
    dt: f64,
    t_end: f64,
    engine: &DiffEngine,
) -> Result<ReducedTrajectory> {
    let nbar = rsys.reduced_dim();
    let field = |z: &DVector<f64>| -> Result<DVector<f64>> {
        let qb: Vec<f64> = z.rows(0, nbar).iter().copied().collect();
        let pb = z.rows(nbar, nbar).into_owned();
        let (dq, dp) = hamiltonized_field(rsys, f, &qb, &pb, engine)?;
        let mut out = DVector::zeros(2 * nbar);
        out.rows_mut(0, nbar).copy_from(&dq);
        out.rows_mut(nbar, nbar).copy_from(&dp);
        Ok(out)
    };
    let mut z = DVector::zeros(2 * nbar);
    for (i, &v) in qbar0.iter().enumerate() {
        z[i] = v;
    }
    z.rows_mut(nbar, nbar).copy_from(pbar0);

    let mut traj = ReducedTrajectory {
        times: Vec::new(),
        states: Vec::new(),
        energies: Vec::new(),
    };
    let record = |t: f64, z: &DVector<f64>, traj: &mut ReducedTrajectory| -> Result<()> {
        let qb: Vec<f64> = z.rows(0, nbar).iter().copied().collect();
        let pb = z.rows(nbar, nbar).into_owned();
        traj.energies
            .push(chaplygin_hamiltonian(rsys, f, &qb, &pb)?);
        traj.times.push(t);
        traj.states.push((DVector::from_vec(qb), pb));
        Ok(())
    };
    record(0.0, &z, &mut traj)?;
    let steps = (t_end / dt).round() as usize;
    for k in 1..=steps {
        z = rk4_step(&field, &z, dt)?;
        record(k as f64 * dt, &z, &mut traj)?;
    }
    Ok(traj)
}
