//! Second-stage reduction: when the once-reduced system retains a residual
//! translational symmetry whose momentum is conserved, fix a momentum level
//! μ, shift by the mechanical connection, and descend to the double quotient.
//!
//! The key maps: the residual momentum `J_K`, the locked inertia tensor `𝕀`,
//! the mechanical connection `A_K = 𝕀⁻¹ J_K ∘ FL̄`, its μ-component one-form
//! `α_μ`, the level identification `φ_μ` onto the double quotient, and the
//! resulting Hamiltonian, gyroscopic forms, and multiplier condition on the
//! smaller space.  Quotient classes are represented on a canonical slice
//! (translated coordinates set to zero).

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::chart::{DomainBox, GroupAction};
use crate::diff::DiffEngine;
use crate::dynamics::rk4_step;
use crate::error::{fmt_point, NhkError, Result};
use crate::hamiltonization::{divergence_in_measure, Multiplier};
use crate::reduction::ReducedSystem;

/// Everything needed to instantiate the second stage on a quotient system:
/// the residual symmetry, the momentum level, the candidate multiplier on the
/// double quotient, and the verification box there.
#[derive(Debug, Clone)]
pub struct SecondStageConfig {
    /// Residual translations, indexed into the reduced coordinates.
    pub k_action: GroupAction,
    pub mu: DVector<f64>,
    pub multiplier: Multiplier,
    pub tilde_domain: DomainBox,
}

/// A quotient system together with a residual symmetry and momentum level.
#[derive(Debug, Clone)]
pub struct SecondStageSetup {
    pub rsys: ReducedSystem,
    pub k_action: GroupAction,
    pub mu: DVector<f64>,
    tilde_indices: Vec<usize>,
}

impl SecondStageSetup {
    pub fn new(rsys: ReducedSystem, k_action: GroupAction, mu: DVector<f64>) -> Result<Self> {
        let nbar = rsys.reduced_dim();
        if k_action.translated_coords.iter().any(|&i| i >= nbar) {
            return Err(NhkError::InvalidParameters(
                "residual symmetry index out of range of the reduced coordinates".to_string(),
            ));
        }
        if mu.len() != k_action.dim() {
            return Err(NhkError::InvalidParameters(format!(
                "momentum level has {} components but the residual symmetry has dimension {}",
                mu.len(),
                k_action.dim()
            )));
        }
        let tilde_indices = (0..nbar)
            .filter(|i| !k_action.translated_coords.contains(i))
            .collect();
        Ok(SecondStageSetup {
            rsys,
            k_action,
            mu,
            tilde_indices,
        })
    }

    pub fn k_dim(&self) -> usize {
        self.k_action.dim()
    }

    pub fn tilde_dim(&self) -> usize {
        self.tilde_indices.len()
    }

    pub fn tilde_indices(&self) -> &[usize] {
        &self.tilde_indices
    }

    /// Canonical-slice representative of a double-quotient point.
    pub fn embed_tilde(&self, qtilde: &[f64]) -> Vec<f64> {
        let mut qbar = vec![0.0; self.rsys.reduced_dim()];
        for (k, &i) in self.tilde_indices.iter().enumerate() {
            qbar[i] = qtilde[k];
        }
        qbar
    }

    pub fn project_tilde(&self, qbar: &[f64]) -> Vec<f64> {
        self.tilde_indices.iter().map(|&i| qbar[i]).collect()
    }

    fn inject_tilde_covector(&self, ptilde: &DVector<f64>) -> DVector<f64> {
        let mut pbar = DVector::zeros(self.rsys.reduced_dim());
        for (k, &i) in self.tilde_indices.iter().enumerate() {
            pbar[i] = ptilde[k];
        }
        pbar
    }

    /// Momentum of the residual action: components of p̄ over its translated
    /// coordinates.
    pub fn k_momentum(&self, pbar: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.k_dim(),
            self.k_action.translated_coords.iter().map(|&i| pbar[i]),
        )
    }

    /// Locked inertia: the quotient metric restricted to the symmetry
    /// directions.
    pub fn locked_inertia(&self, qbar: &[f64]) -> Result<DMatrix<f64>> {
        let g = self.rsys.reduced_metric(qbar)?;
        let k = self.k_dim();
        let mut inertia = DMatrix::zeros(k, k);
        for (a, &ia) in self.k_action.translated_coords.iter().enumerate() {
            for (b, &ib) in self.k_action.translated_coords.iter().enumerate() {
                inertia[(a, b)] = g[(ia, ib)];
            }
        }
        Ok(inertia)
    }

    fn inertia_cholesky(&self, qbar: &[f64]) -> Result<Cholesky<f64, nalgebra::Dyn>> {
        Cholesky::new(self.locked_inertia(qbar)?).ok_or_else(|| {
            NhkError::SingularInertia(format!(
                "locked inertia not positive definite at {}",
                fmt_point(qbar)
            ))
        })
    }

    /// The mechanical connection: symmetry component of a velocity after
    /// converting to momentum and weighting by the inverse locked inertia.
    pub fn mechanical_connection(&self, qbar: &[f64], vbar: &DVector<f64>) -> Result<DVector<f64>> {
        let g = self.rsys.reduced_metric(qbar)?;
        let jk = self.k_momentum(&(g * vbar));
        Ok(self.inertia_cholesky(qbar)?.solve(&jk))
    }

    /// The μ-component of the mechanical connection, as a covector on the
    /// quotient: ⟨α_μ, v̄⟩ = ⟨μ, A_K(v̄)⟩.
    pub fn alpha_mu(&self, qbar: &[f64]) -> Result<DVector<f64>> {
        let g = self.rsys.reduced_metric(qbar)?;
        let lam = self.inertia_cholesky(qbar)?.solve(&self.mu);
        let nbar = self.rsys.reduced_dim();
        let mut e_lam = DVector::zeros(nbar);
        for (a, &ia) in self.k_action.translated_coords.iter().enumerate() {
            e_lam[ia] = lam[a];
        }
        Ok(g * e_lam)
    }

    /// Exterior derivative of α_μ as an antisymmetric n̄×n̄ matrix.
    fn d_alpha_mu(&self, qbar: &[f64], engine: &DiffEngine) -> Result<DMatrix<f64>> {
        let nbar = self.rsys.reduced_dim();
        let d = engine.exterior_derivative_matrix(
            |x| {
                self.alpha_mu(x)
                    .unwrap_or_else(|_| DVector::from_element(nbar, f64::NAN))
            },
            qbar,
        );
        if d.iter().any(|x| !x.is_finite()) {
            return Err(NhkError::DomainViolation(format!(
                "connection one-form differentiation failed near {}",
                fmt_point(qbar)
            )));
        }
        Ok(d)
    }

    /// The curvature two-form of α_μ dropped to the double quotient,
    /// evaluated on tilde tangent vectors.  Errors with `NotBasic` when dα_μ
    /// fails to annihilate the symmetry directions.
    pub fn b_k_mu(
        &self,
        qtilde: &[f64],
        utilde: &DVector<f64>,
        wtilde: &DVector<f64>,
    ) -> Result<f64> {
        let d = self.b_k_mu_matrix(qtilde)?;
        Ok((utilde.transpose() * d * wtilde)[(0, 0)])
    }

    /// Coefficient matrix of the dropped curvature form on the double
    /// quotient (ñ×ñ, antisymmetric).
    pub fn b_k_mu_matrix(&self, qtilde: &[f64]) -> Result<DMatrix<f64>> {
        let qbar = self.embed_tilde(qtilde);
        let engine = DiffEngine::default();
        let d = self.d_alpha_mu(&qbar, &engine)?;
        for &t in &self.k_action.translated_coords {
            let vertical = d.row(t).amax();
            if vertical > 1e-9 {
                return Err(NhkError::NotBasic(format!(
                    "dα_μ pairs with a symmetry direction (magnitude {vertical:.3e} at {})",
                    fmt_point(qtilde)
                )));
            }
        }
        let nt = self.tilde_dim();
        let mut out = DMatrix::zeros(nt, nt);
        for (i, &ti) in self.tilde_indices.iter().enumerate() {
            for (j, &tj) in self.tilde_indices.iter().enumerate() {
                out[(i, j)] = d[(ti, tj)];
            }
        }
        Ok(out)
    }

    /// Momentum shift by the connection's μ-component.
    pub fn shift(&self, qbar: &[f64], pbar: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(pbar - self.alpha_mu(qbar)?)
    }

    pub fn unshift(&self, qbar: &[f64], pbar: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(pbar + self.alpha_mu(qbar)?)
    }

    /// Identify a level-μ covector with a double-quotient covector: shift by
    /// α_μ, then read off the surviving components.
    pub fn phi_mu(&self, qbar: &[f64], pbar: &DVector<f64>) -> Result<(Vec<f64>, DVector<f64>)> {
        let level = self.k_momentum(pbar) - &self.mu;
        if level.amax() > 1e-9 {
            return Err(NhkError::WrongLevel(format!(
                "momentum level off by {:.3e} at {}",
                level.amax(),
                fmt_point(qbar)
            )));
        }
        let shifted = self.shift(qbar, pbar)?;
        let ptilde = DVector::from_iterator(
            self.tilde_dim(),
            self.tilde_indices.iter().map(|&i| shifted[i]),
        );
        Ok((self.project_tilde(qbar), ptilde))
    }

    /// Rebuild the canonical-slice level-μ covector from quotient data.
    pub fn phi_mu_inverse(
        &self,
        qtilde: &[f64],
        ptilde: &DVector<f64>,
    ) -> Result<(Vec<f64>, DVector<f64>)> {
        let qbar = self.embed_tilde(qtilde);
        let pbar = self.unshift(&qbar, &self.inject_tilde_covector(ptilde))?;
        Ok((qbar, pbar))
    }

    /// Kinetic metric on the double quotient: the Schur complement of the
    /// locked inertia block.
    pub fn tilde_metric(&self, qtilde: &[f64]) -> Result<DMatrix<f64>> {
        let qbar = self.embed_tilde(qtilde);
        let g = self.rsys.reduced_metric(&qbar)?;
        let nt = self.tilde_dim();
        let k = self.k_dim();
        let mut t = DMatrix::zeros(nt, nt);
        let mut c = DMatrix::zeros(nt, k);
        for (i, &ti) in self.tilde_indices.iter().enumerate() {
            for (j, &tj) in self.tilde_indices.iter().enumerate() {
                t[(i, j)] = g[(ti, tj)];
            }
            for (b, &tb) in self.k_action.translated_coords.iter().enumerate() {
                c[(i, b)] = g[(ti, tb)];
            }
        }
        let inv_ct = self.inertia_cholesky(&qbar)?.solve(&c.transpose());
        Ok(t - c * inv_ct)
    }

    /// Horizontal lift of a double-quotient velocity into the quotient:
    /// symmetry components chosen so the lifted velocity is metric-orthogonal
    /// to the symmetry directions.
    pub fn bar_horizontal_lift_vel(
        &self,
        qbar: &[f64],
        vtilde: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        let g = self.rsys.reduced_metric(qbar)?;
        let k = self.k_dim();
        let nt = self.tilde_dim();
        let mut c_t = DMatrix::zeros(k, nt);
        for (b, &tb) in self.k_action.translated_coords.iter().enumerate() {
            for (i, &ti) in self.tilde_indices.iter().enumerate() {
                c_t[(b, i)] = g[(tb, ti)];
            }
        }
        let h = -self.inertia_cholesky(qbar)?.solve(&(c_t * vtilde));
        let mut out = DVector::zeros(self.rsys.reduced_dim());
        for (i, &ti) in self.tilde_indices.iter().enumerate() {
            out[ti] = vtilde[i];
        }
        for (b, &tb) in self.k_action.translated_coords.iter().enumerate() {
            out[tb] = h[b];
        }
        Ok(out)
    }

    /// Momentum horizontal lift into the zero level set of the residual
    /// momentum: convert to velocity downstairs, lift, convert back.
    pub fn bar_horizontal_lift_mom(
        &self,
        qbar: &[f64],
        ptilde: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        let qtilde = self.project_tilde(qbar);
        let gt = self.tilde_metric(&qtilde)?;
        let vt = Cholesky::new(gt)
            .ok_or_else(|| {
                NhkError::SingularMetric(format!(
                    "double-quotient metric not positive definite at {}",
                    fmt_point(&qtilde)
                ))
            })?
            .solve(ptilde);
        let lifted = self.bar_horizontal_lift_vel(qbar, &vt)?;
        Ok(self.rsys.reduced_metric(qbar)? * lifted)
    }

    /// Hamiltonian on the double quotient at level μ, evaluated by pulling
    /// the point back into the quotient phase space.
    pub fn tilde_hamiltonian(&self, qtilde: &[f64], ptilde: &DVector<f64>) -> Result<f64> {
        let (qbar, pbar) = self.phi_mu_inverse(qtilde, ptilde)?;
        self.rsys.reduced_hamiltonian(&qbar, &pbar)
    }

    /// The gyroscopic two-form dropped to the double quotient, evaluated on
    /// tilde tangent vectors through the level-μ identification.
    pub fn tilde_xi(
        &self,
        qtilde: &[f64],
        ptilde: &DVector<f64>,
        utilde: &DVector<f64>,
        wtilde: &DVector<f64>,
    ) -> Result<f64> {
        let k = self.tilde_xi_matrix(qtilde, ptilde)?;
        Ok((utilde.transpose() * k * wtilde)[(0, 0)])
    }

    /// Coefficient matrix of the dropped gyroscopic form (ñ×ñ).
    pub fn tilde_xi_matrix(&self, qtilde: &[f64], ptilde: &DVector<f64>) -> Result<DMatrix<f64>> {
        let (qbar, pbar) = self.phi_mu_inverse(qtilde, ptilde)?;
        let full = self.rsys.xi_matrix(&qbar, &pbar)?;
        let nt = self.tilde_dim();
        let mut out = DMatrix::zeros(nt, nt);
        for (i, &ti) in self.tilde_indices.iter().enumerate() {
            for (j, &tj) in self.tilde_indices.iter().enumerate() {
                out[(i, j)] = full[(ti, tj)];
            }
        }
        Ok(out)
    }

    /// Numerical check of the descent conditions at a sample: the quotient
    /// Hamiltonian must be invariant along the residual symmetry and the
    /// gyroscopic form must annihilate its directions.
    pub fn condition_residuals(
        &self,
        qbar: &[f64],
        pbar: &DVector<f64>,
        engine: &DiffEngine,
    ) -> Result<(f64, f64)> {
        let mut invariance: f64 = 0.0;
        for &t in &self.k_action.translated_coords {
            let d = engine.partial(
                |x| self.rsys.reduced_hamiltonian(x, pbar).unwrap_or(f64::NAN),
                qbar,
                t,
            );
            invariance = invariance.max(d.abs());
        }
        let k = self.rsys.xi_matrix(qbar, pbar)?;
        let mut vertical: f64 = 0.0;
        for &t in &self.k_action.translated_coords {
            vertical = vertical.max(k.row(t).amax()).max(k.column(t).amax());
        }
        Ok((invariance, vertical))
    }
}

/// The doubly reduced system with its candidate multiplier.
#[derive(Debug, Clone)]
pub struct TildeSystem {
    pub setup: SecondStageSetup,
    pub multiplier: Multiplier,
}

impl TildeSystem {
    pub fn new(setup: SecondStageSetup, multiplier: Multiplier) -> Self {
        TildeSystem { setup, multiplier }
    }

    pub fn from_config(rsys: ReducedSystem, config: &SecondStageConfig) -> Result<Self> {
        let setup = SecondStageSetup::new(rsys, config.k_action.clone(), config.mu.clone())?;
        Ok(TildeSystem::new(setup, config.multiplier.clone()))
    }

    /// Equations of motion on the double quotient: the canonical structure
    /// deformed by both dropped two-forms, solved as a 2ñ×2ñ linear system.
    pub fn tilde_vector_field(
        &self,
        qtilde: &[f64],
        ptilde: &DVector<f64>,
        engine: &DiffEngine,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        let nt = self.setup.tilde_dim();
        let gyro =
            self.setup.b_k_mu_matrix(qtilde)? + self.setup.tilde_xi_matrix(qtilde, ptilde)?;

        let mut s = DMatrix::zeros(2 * nt, 2 * nt);
        for i in 0..nt {
            for j in 0..nt {
                s[(i, j)] = -gyro[(i, j)];
            }
            s[(i, nt + i)] = 1.0;
            s[(nt + i, i)] = -1.0;
        }
        let dh_dq = engine.gradient(
            |x| self.setup.tilde_hamiltonian(x, ptilde).unwrap_or(f64::NAN),
            qtilde,
        );
        if dh_dq.iter().any(|x| !x.is_finite()) {
            return Err(NhkError::DomainViolation(format!(
                "double-quotient Hamiltonian gradient not finite at {}",
                fmt_point(qtilde)
            )));
        }
        let gt = self.setup.tilde_metric(qtilde)?;
        let dh_dp = Cholesky::new(gt)
            .ok_or_else(|| NhkError::SingularMetric(fmt_point(qtilde)))?
            .solve(ptilde);
        let mut rhs = DVector::zeros(2 * nt);
        rhs.rows_mut(0, nt).copy_from(&(-&dh_dq));
        rhs.rows_mut(nt, nt).copy_from(&(-&dh_dp));
        let x = nalgebra::LU::new(s)
            .solve(&rhs)
            .ok_or_else(|| NhkError::DegenerateAlmostSymplectic(fmt_point(qtilde)))?;
        Ok((x.rows(0, nt).into_owned(), x.rows(nt, nt).into_owned()))
    }

    /// Rescaled Hamiltonian on the double quotient.
    pub fn second_chaplygin_hamiltonian(
        &self,
        qtilde: &[f64],
        ptilde: &DVector<f64>,
    ) -> Result<f64> {
        let f = self.multiplier.eval(qtilde)?;
        self.setup.tilde_hamiltonian(qtilde, &(ptilde / f))
    }

    /// Pointwise residual of the second-stage multiplier condition
    /// `df_μ ∧ Θ̃ = f_μ² (B^K_μ + Ψ̃*_{1/f_μ} Ξ̃_μ)` on a pair of tilde
    /// directions; the pullback term is evaluated by fiber rescale.
    pub fn second_sufficient_residual(
        &self,
        qtilde: &[f64],
        ptilde: &DVector<f64>,
        utilde: &DVector<f64>,
        wtilde: &DVector<f64>,
    ) -> Result<f64> {
        let f = self.multiplier.eval(qtilde)?;
        let df = self.multiplier.grad(qtilde);
        let lhs = df.dot(utilde) * ptilde.dot(wtilde) - df.dot(wtilde) * ptilde.dot(utilde);
        let b = self.setup.b_k_mu(qtilde, utilde, wtilde)?;
        let xi_scaled = self.setup.tilde_xi(qtilde, &(ptilde / f), utilde, wtilde)?;
        Ok(lhs - f * f * (b + xi_scaled))
    }

    /// Degree-one fiber homogeneity defect of the dropped gyroscopic form;
    /// the fiber-rescale evaluation above is exact precisely when this
    /// vanishes.
    pub fn tilde_xi_linearity_residual(
        &self,
        qtilde: &[f64],
        ptilde: &DVector<f64>,
    ) -> Result<f64> {
        let double = self.setup.tilde_xi_matrix(qtilde, &(ptilde * 2.0))?;
        let single = self.setup.tilde_xi_matrix(qtilde, ptilde)?;
        Ok((double - single * 2.0).amax())
    }

    /// Canonical Hamilton's equations of the rescaled Hamiltonian.
    pub fn canonical_tilde_field(
        &self,
        qtilde: &[f64],
        ptilde: &DVector<f64>,
        engine: &DiffEngine,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        let nt = self.setup.tilde_dim();
        let mut z = Vec::with_capacity(2 * nt);
        z.extend_from_slice(qtilde);
        z.extend(ptilde.iter().copied());
        let grad = engine.gradient(
            |zz: &[f64]| {
                let pt = DVector::from_column_slice(&zz[nt..]);
                self.second_chaplygin_hamiltonian(&zz[..nt], &pt)
                    .unwrap_or(f64::NAN)
            },
            &z,
        );
        if grad.iter().any(|x| !x.is_finite()) {
            return Err(NhkError::DomainViolation(format!(
                "rescaled Hamiltonian gradient not finite at {}",
                fmt_point(qtilde)
            )));
        }
        Ok((
            grad.rows(nt, nt).into_owned(),
            -grad.rows(0, nt).into_owned(),
        ))
    }

    /// Divergence of the double-quotient field against `f_μ^exponent Λ̃`.
    pub fn tilde_measure_divergence(
        &self,
        exponent: i32,
        qtilde: &[f64],
        ptilde: &DVector<f64>,
        engine: &DiffEngine,
    ) -> Result<f64> {
        let nt = self.setup.tilde_dim();
        let jac_engine = DiffEngine::with_step(DiffEngine::DIVERGENCE_STEP);
        let field = |z: &[f64]| -> Result<DVector<f64>> {
            let pt = DVector::from_column_slice(&z[nt..]);
            let (dq, dp) = self.tilde_vector_field(&z[..nt], &pt, engine)?;
            let mut out = DVector::zeros(2 * nt);
            out.rows_mut(0, nt).copy_from(&dq);
            out.rows_mut(nt, nt).copy_from(&dp);
            Ok(out)
        };
        let f = self.multiplier.clone();
        f.eval(qtilde)?;
        let log_density_grad = move |z: &[f64]| {
            let qt = &z[..nt];
            let fv = (f.value)(qt);
            let mut g = DVector::zeros(2 * nt);
            g.rows_mut(0, nt)
                .copy_from(&(f.grad(qt) * (f64::from(exponent) / fv)));
            g
        };
        let mut z = Vec::with_capacity(2 * nt);
        z.extend_from_slice(qtilde);
        z.extend(ptilde.iter().copied());
        divergence_in_measure(field, log_density_grad, &z, &jac_engine)
    }
}

/// End-to-end dynamics equivalence: integrate the canonical field of the
/// rescaled double-quotient Hamiltonian in the rescaled time, undo the fiber
/// scaling and the time reparameterization (`dt = dτ / f_μ`), and compare
/// against the level identification of the directly integrated quotient
/// dynamics at matching original times.  Returns the sup deviation over
/// checkpoints.
pub fn dynamics_equivalence_residual(
    tsys: &TildeSystem,
    qbar0: &[f64],
    pbar0: &DVector<f64>,
    t_end: f64,
    dt: f64,
    engine: &DiffEngine,
) -> Result<f64> {
    let setup = &tsys.setup;
    let nt = setup.tilde_dim();
    let nbar = setup.rsys.reduced_dim();

    let (qt0, pt0) = setup.phi_mu(qbar0, pbar0)?;
    let f0 = tsys.multiplier.eval(&qt0)?;

    // Augmented rescaled state: (q̃, f p̃, t) driven by the canonical field
    // and dt/dτ = 1/f_μ.
    let mut zc = DVector::zeros(2 * nt + 1);
    for (i, &v) in qt0.iter().enumerate() {
        zc[i] = v;
    }
    zc.rows_mut(nt, nt).copy_from(&(&pt0 * f0));
    let aug_field = |z: &DVector<f64>| -> Result<DVector<f64>> {
        let qt: Vec<f64> = z.rows(0, nt).iter().copied().collect();
        let pt = z.rows(nt, nt).into_owned();
        let (dq, dp) = tsys.canonical_tilde_field(&qt, &pt, engine)?;
        let mut out = DVector::zeros(2 * nt + 1);
        out.rows_mut(0, nt).copy_from(&dq);
        out.rows_mut(nt, nt).copy_from(&dp);
        out[2 * nt] = 1.0 / tsys.multiplier.eval(&qt)?;
        Ok(out)
    };

    // Reference quotient state advanced exactly to each checkpoint time.
    let mut ref_state = DVector::zeros(2 * nbar);
    for (i, &v) in qbar0.iter().enumerate() {
        ref_state[i] = v;
    }
    ref_state.rows_mut(nbar, nbar).copy_from(pbar0);
    let ref_field = |z: &DVector<f64>| -> Result<DVector<f64>> {
        let qb: Vec<f64> = z.rows(0, nbar).iter().copied().collect();
        let pb = z.rows(nbar, nbar).into_owned();
        let (dq, dp) = setup.rsys.reduced_vector_field(&qb, &pb, engine)?;
        let mut out = DVector::zeros(2 * nbar);
        out.rows_mut(0, nbar).copy_from(&dq);
        out.rows_mut(nbar, nbar).copy_from(&dp);
        Ok(out)
    };

    let checkpoint_every = 100usize;
    let mut t_ref = 0.0;
    let mut sup: f64 = 0.0;
    let mut step = 0usize;
    loop {
        let t_now = zc[2 * nt];
        if step.is_multiple_of(checkpoint_every) || t_now >= t_end {
            // Advance the reference to exactly t_now with substeps ≤ dt.
            let gap = t_now - t_ref;
            if gap > 1e-15 {
                let n_sub = (gap / dt).ceil().max(1.0) as usize;
                let h = gap / n_sub as f64;
                for _ in 0..n_sub {
                    ref_state = rk4_step(&ref_field, &ref_state, h)?;
                }
                t_ref = t_now;
            }
            let qb: Vec<f64> = ref_state.rows(0, nbar).iter().copied().collect();
            let pb = ref_state.rows(nbar, nbar).into_owned();
            let (qt_ref, pt_ref) = setup.phi_mu(&qb, &pb)?;

            let qt: Vec<f64> = zc.rows(0, nt).iter().copied().collect();
            let f = tsys.multiplier.eval(&qt)?;
            let pt = zc.rows(nt, nt).into_owned() / f;
            let mut dev: f64 = 0.0;
            for i in 0..nt {
                dev = dev
                    .max((qt[i] - qt_ref[i]).abs())
                    .max((pt[i] - pt_ref[i]).abs());
            }
            sup = sup.max(dev);
        }
        if zc[2 * nt] >= t_end {
            break;
        }
        zc = rk4_step(&aug_field, &zc, dt)?;
        step += 1;
    }
    Ok(sup)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chart::ChartSystem;
    use crate::systems;
    use std::sync::Arc;

    /// Unconstrained three-coordinate system whose metric couples the
    /// symmetry direction to the base, giving a curved mechanical connection.
    fn synthetic(zeta_coupled: bool) -> SecondStageSetup {
        let metric: crate::chart::MatrixFn = if zeta_coupled {
            Arc::new(|q: &[f64]| {
                DMatrix::from_row_slice(
                    3,
                    3,
                    &[
                        3.0,
                        0.0,
                        1.0 + 0.3 * q[2],
                        0.0,
                        3.0,
                        q[0],
                        1.0 + 0.3 * q[2],
                        q[0],
                        1.0,
                    ],
                )
            })
        } else {
            Arc::new(|q: &[f64]| {
                DMatrix::from_row_slice(3, 3, &[3.0, 0.0, 1.0, 0.0, 3.0, q[0], 1.0, q[0], 1.0])
            })
        };
        let sys = ChartSystem {
            dim: 3,
            coord_names: vec!["theta".into(), "phi".into(), "zeta".into()],
            periodic: vec![false, false, false],
            metric,
            potential: Arc::new(|_| 0.0),
            constraint_forms: vec![],
            group: GroupAction::new(vec![], vec![]),
        };
        let rsys = ReducedSystem::new(&sys).unwrap();
        SecondStageSetup::new(
            rsys,
            GroupAction::new(vec![2], vec!["zeta".into()]),
            DVector::from_vec(vec![0.7]),
        )
        .unwrap()
    }

    fn board() -> TildeSystem {
        let bundle = systems::build("snakeboard", &Default::default()).unwrap();
        let rsys = ReducedSystem::new(&bundle.system).unwrap();
        let cfg = bundle.second.expect("snakeboard carries a second stage");
        TildeSystem::from_config(rsys, &cfg).unwrap()
    }

    #[test]
    fn synthetic_connection_and_curvature() {
        let s = synthetic(false);
        let qb = [0.4, -0.6, 0.0];
        let inertia = s.locked_inertia(&qb).unwrap();
        assert_eq!(inertia.nrows(), 1);
        assert!((inertia[(0, 0)] - 1.0).abs() < 1e-14);
        // A_K = dθ + θ dφ + dζ.
        let a = s
            .mechanical_connection(&qb, &DVector::from_vec(vec![1.0, 0.0, 0.0]))
            .unwrap();
        assert!((a[0] - 1.0).abs() < 1e-13);
        let a = s
            .mechanical_connection(&qb, &DVector::from_vec(vec![0.0, 1.0, 0.0]))
            .unwrap();
        assert!((a[0] - 0.4).abs() < 1e-13);
        let a = s
            .mechanical_connection(&qb, &DVector::from_vec(vec![0.0, 0.0, 1.0]))
            .unwrap();
        assert!((a[0] - 1.0).abs() < 1e-13);

        let alpha = s.alpha_mu(&qb).unwrap();
        assert!((alpha - DVector::from_vec(vec![0.7, 0.7 * 0.4, 0.7])).amax() < 1e-13);
        assert!((s.k_momentum(&s.alpha_mu(&qb).unwrap())[0] - 0.7).abs() < 1e-13);

        // dα_μ = μ dθ∧dφ: coefficient −μ on the (∂φ, ∂θ) slot.
        let qt = [0.4, -0.6];
        let b = s
            .b_k_mu(
                &qt,
                &DVector::from_vec(vec![0.0, 1.0]),
                &DVector::from_vec(vec![1.0, 0.0]),
            )
            .unwrap();
        assert!((b - (-0.7)).abs() < 1e-9, "b = {b}");
    }

    #[test]
    fn vertical_dependence_is_flagged_not_basic() {
        let s = synthetic(true);
        let err = s
            .b_k_mu(
                &[0.3, 0.2],
                &DVector::from_vec(vec![1.0, 0.0]),
                &DVector::from_vec(vec![0.0, 1.0]),
            )
            .unwrap_err();
        assert!(matches!(err, NhkError::NotBasic(_)));
    }

    #[test]
    fn board_inertia_connection_and_alpha() {
        let t = board();
        let s = &t.setup;
        let qb = [0.3, 1.2, 0.0];
        let inertia = s.locked_inertia(&qb).unwrap();
        assert!((inertia[(0, 0)] - 1.0).abs() < 1e-12, "J0 = 1");
        // A_K = dθ + dψ on reduced coords (θ, φ, ψ).
        for (v, expect) in [
            (DVector::from_vec(vec![1.0, 0.0, 0.0]), 1.0),
            (DVector::from_vec(vec![0.0, 1.0, 0.0]), 0.0),
            (DVector::from_vec(vec![0.0, 0.0, 1.0]), 1.0),
        ] {
            let a = s.mechanical_connection(&qb, &v).unwrap();
            assert!((a[0] - expect).abs() < 1e-12);
        }
        let alpha = s.alpha_mu(&qb).unwrap();
        let mu = s.mu[0];
        assert!((alpha - DVector::from_vec(vec![mu, 0.0, mu])).amax() < 1e-12);
        // Curvature of α_μ drops to zero.
        let b = s.b_k_mu_matrix(&[0.3, 1.2]).unwrap();
        assert!(b.amax() < 1e-9);
    }

    #[test]
    fn board_level_identification_closed_form() {
        let t = board();
        let s = &t.setup;
        let mu = s.mu[0];
        let qb = [0.4, 1.1, 0.0];
        let pb = DVector::from_vec(vec![0.8, -0.3, mu]);
        let (qt, pt) = s.phi_mu(&qb, &pb).unwrap();
        assert_eq!(qt, vec![0.4, 1.1]);
        assert!((pt[0] - (0.8 - mu)).abs() < 1e-12);
        assert!((pt[1] - (-0.3)).abs() < 1e-12);
        let (qb2, pb2) = s.phi_mu_inverse(&qt, &pt).unwrap();
        assert_eq!(qb2, vec![0.4, 1.1, 0.0]);
        assert!((pb2 - pb).amax() < 1e-12);

        let off = DVector::from_vec(vec![0.8, -0.3, mu + 0.5]);
        assert!(matches!(
            s.phi_mu(&qb, &off).unwrap_err(),
            NhkError::WrongLevel(_)
        ));
    }

    #[test]
    fn board_shift_matches_component_arithmetic() {
        let t = board();
        let s = &t.setup;
        let mu = s.mu[0];
        let qb = [0.2, 0.9, 0.4];
        let pb = DVector::from_vec(vec![1.3, 0.5, mu]);
        let shifted = s.shift(&qb, &pb).unwrap();
        assert!((shifted[0] - (1.3 - mu)).abs() < 1e-12);
        assert!((shifted[1] - 0.5).abs() < 1e-12);
        assert!((shifted[2] - 0.0).abs() < 1e-12);
        assert!(s.k_momentum(&shifted).amax() < 1e-12);
        let back = s.unshift(&qb, &shifted).unwrap();
        assert!((back - pb).amax() < 1e-12);
    }

    #[test]
    fn board_tilde_metric_and_hamiltonian_closed_forms() {
        let t = board();
        let s = &t.setup;
        let (m, r, j0, j1) = (2.0, 1.0, 1.0, 0.25);
        let mu = s.mu[0];
        let phi = 0.9_f64;
        let qt = [0.3, phi];
        let gt = s.tilde_metric(&qt).unwrap();
        let expect_00 = (m * r * r - j0 * phi.sin().powi(2)) / phi.sin().powi(2);
        assert!((gt[(0, 0)] - expect_00).abs() < 1e-10);
        assert!((gt[(1, 1)] - 2.0 * j1).abs() < 1e-12);
        assert!(gt[(0, 1)].abs() < 1e-12);

        let pt = DVector::from_vec(vec![0.6, -0.4]);
        let h = s.tilde_hamiltonian(&qt, &pt).unwrap();
        let expect = 0.5
            * (phi.sin().powi(2) / (m * r * r - j0 * phi.sin().powi(2)) * pt[0] * pt[0]
                + pt[1] * pt[1] / (2.0 * j1)
                + mu * mu / j0);
        assert!((h - expect).abs() < 1e-10, "h={h} expect={expect}");
    }

    #[test]
    fn board_dropped_gyroscopic_form_closed_form() {
        let t = board();
        let s = &t.setup;
        let (m, r, j0) = (2.0, 1.0, 1.0);
        let phi = 1.2_f64;
        let qt = [0.5, phi];
        let pt = DVector::from_vec(vec![0.9, 0.2]);
        let xi = s
            .tilde_xi(
                &qt,
                &pt,
                &DVector::from_vec(vec![1.0, 0.0]),
                &DVector::from_vec(vec![0.0, 1.0]),
            )
            .unwrap();
        let expect =
            -m * r * r * pt[0] * (phi.cos() / phi.sin()) / (m * r * r - j0 * phi.sin().powi(2));
        assert!((xi - expect).abs() < 1e-8, "xi={xi} expect={expect}");
        // Fiber linearity (no affine offset survives the level shift).
        assert!(t.tilde_xi_linearity_residual(&qt, &pt).unwrap() < 1e-9);
    }

    #[test]
    fn board_descent_conditions_hold() {
        let t = board();
        let s = &t.setup;
        let (inv, vert) = s
            .condition_residuals(
                &[0.4, 1.0, 0.7],
                &DVector::from_vec(vec![0.5, -0.2, 0.3]),
                &DiffEngine::default(),
            )
            .unwrap();
        assert!(inv < 1e-8, "invariance residual {inv}");
        assert!(vert < 1e-10, "vertical contraction {vert}");
    }

    #[test]
    fn board_momentum_lift_lands_on_zero_level_and_round_trips() {
        let t = board();
        let s = &t.setup;
        let qb = [0.6, 1.3, 0.0];
        let pt = DVector::from_vec(vec![0.7, -0.5]);
        let lifted = s.bar_horizontal_lift_mom(&qb, &pt).unwrap();
        assert!(s.k_momentum(&lifted).amax() < 1e-12);
        // Round trip: surviving components recover p̃ exactly.
        let qt = s.project_tilde(&qb);
        let back = DVector::from_iterator(2, s.tilde_indices().iter().map(|&i| lifted[i]));
        assert!((back - &pt).amax() < 1e-11, "qt={qt:?}");
        // Pairing with the velocity lift.
        let vt = DVector::from_vec(vec![-0.8, 0.35]);
        let vl = s.bar_horizontal_lift_vel(&qb, &vt).unwrap();
        assert!((lifted.dot(&vl) - pt.dot(&vt)).abs() < 1e-11);
    }

    #[test]
    fn board_second_multiplier_condition() {
        let t = board();
        let qt = [0.4, 1.0];
        let pt = DVector::from_vec(vec![0.8, -0.6]);
        let ut = DVector::from_vec(vec![1.0, 0.4]);
        let wt = DVector::from_vec(vec![-0.2, 1.0]);
        let res = t.second_sufficient_residual(&qt, &pt, &ut, &wt).unwrap();
        assert!(res.abs() < 1e-8, "residual {res}");
        // The trivial multiplier leaves the gyroscopic term unmatched.
        let one = TildeSystem::new(t.setup.clone(), Multiplier::one());
        let bad = one.second_sufficient_residual(&qt, &pt, &ut, &wt).unwrap();
        let xi = t.setup.tilde_xi(&qt, &pt, &ut, &wt).unwrap();
        assert!((bad + xi).abs() < 1e-10);
        assert!(bad.abs() > 1e-3);
    }

    #[test]
    fn board_rescaled_hamiltonian_closed_form() {
        let t = board();
        let (m, r, j0, j1) = (2.0, 1.0, 1.0, 0.25);
        let mu = t.setup.mu[0];
        let phi = 0.8_f64;
        let qt = [0.1, phi];
        let pt = DVector::from_vec(vec![0.5, 1.1]);
        let h = t.second_chaplygin_hamiltonian(&qt, &pt).unwrap();
        let g2 = m * r * r - j0 * phi.sin().powi(2);
        let expect = 0.5
            * (pt[0] * pt[0] + g2 / (2.0 * j1 * phi.sin().powi(2)) * pt[1] * pt[1] + mu * mu / j0);
        assert!((h - expect).abs() < 1e-10, "h={h} expect={expect}");
        // At p̃ = 0 only the locked term survives.
        let h0 = t
            .second_chaplygin_hamiltonian(&qt, &DVector::zeros(2))
            .unwrap();
        assert!((h0 - 0.5 * mu * mu / j0).abs() < 1e-12);
    }

    #[test]
    fn board_tilde_measure_is_invariant() {
        let t = board();
        let div = t
            .tilde_measure_divergence(
                1,
                &[0.2, 1.1],
                &DVector::from_vec(vec![0.4, 0.7]),
                &DiffEngine::default(),
            )
            .unwrap();
        assert!(div.abs() < 1e-6, "divergence {div}");
        let wrong = t
            .tilde_measure_divergence(
                3,
                &[0.2, 1.1],
                &DVector::from_vec(vec![0.4, 0.7]),
                &DiffEngine::default(),
            )
            .unwrap();
        assert!(wrong.abs() > 1e-4, "divergence {wrong}");
    }

    #[test]
    fn board_dynamics_equivalence_short_run() {
        let t = board();
        let mu = t.setup.mu[0];
        let qb0 = [0.2, std::f64::consts::FRAC_PI_2, 0.0];
        let pb0 = DVector::from_vec(vec![0.25, 0.08, mu]);
        let res = dynamics_equivalence_residual(&t, &qb0, &pb0, 0.5, 1e-3, &DiffEngine::default())
            .unwrap();
        assert!(res < 1e-6, "equivalence residual {res}");
    }
}
