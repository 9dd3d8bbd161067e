//! Reduction of a constrained system with translational symmetry to an
//! unconstrained almost-Hamiltonian system on the quotient.
//!
//! When the symmetry directions complement the constraint distribution, every
//! admissible velocity is the horizontal lift of a velocity on the quotient.
//! The machinery here builds that lift, the induced metric and Hamiltonian on
//! the quotient, the connection curvature, and the gyroscopic two-form Ξ that
//! deforms the canonical symplectic structure.  The reduced equations of
//! motion are recovered by a 2n̄×2n̄ linear solve against the deformed
//! structure matrix.

use nalgebra::{Cholesky, DMatrix, DVector, LU};

use crate::chart::ChartSystem;
use crate::diff::DiffEngine;
use crate::dynamics::rk4_step;
use crate::error::{fmt_point, NhkError, Result};

/// The quotient of a constrained system by its translational symmetry.
///
/// All evaluators are pure; the struct is freely shareable across threads.
#[derive(Clone)]
pub struct ReducedSystem {
    pub full: ChartSystem,
    /// Indices of the coordinates that survive on the quotient.
    pub reduced_indices: Vec<usize>,
    /// Indices of the translated (symmetry) coordinates, in group order.
    pub translated: Vec<usize>,
    pub reduced_coords: Vec<String>,
    /// Engine used for curvature differentiation.  Coarser than the default
    /// step: the connection coefficients feed residuals checked at 1e-10,
    /// which a 1e-6 step's cancellation noise would swamp.
    curvature_engine: DiffEngine,
}

impl std::fmt::Debug for ReducedSystem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ReducedSystem")
            .field("reduced_coords", &self.reduced_coords)
            .field("translated", &self.translated)
            .finish()
    }
}

impl ReducedSystem {
    pub fn new(full: &ChartSystem) -> Result<Self> {
        let m = full.num_constraints();
        if full.group.dim() != m {
            return Err(NhkError::InvalidParameters(format!(
                "symmetry dimension {} must equal the number of constraints {}",
                full.group.dim(),
                m
            )));
        }
        let translated = full.group.translated_coords.clone();
        if translated.iter().any(|&i| i >= full.dim) {
            return Err(NhkError::InvalidParameters(
                "translated coordinate index out of range".to_string(),
            ));
        }
        let reduced_indices = full.reduced_indices();
        let reduced_coords = reduced_indices
            .iter()
            .map(|&i| full.coord_names[i].clone())
            .collect();
        Ok(ReducedSystem {
            full: full.clone(),
            reduced_indices,
            translated,
            reduced_coords,
            curvature_engine: DiffEngine::with_step(DiffEngine::CURVATURE_STEP),
        })
    }

    pub fn reduced_dim(&self) -> usize {
        self.reduced_indices.len()
    }

    /// Lift a quotient point to the full space, translated coordinates zero.
    /// Every invariant quantity is independent of this choice.
    pub fn embed(&self, qbar: &[f64]) -> Vec<f64> {
        let mut q = vec![0.0; self.full.dim];
        for (k, &i) in self.reduced_indices.iter().enumerate() {
            q[i] = qbar[k];
        }
        q
    }

    /// Quotient coordinates of a full point.
    pub fn project_q(&self, q: &[f64]) -> Vec<f64> {
        self.reduced_indices.iter().map(|&i| q[i]).collect()
    }

    /// Quotient momentum of `p` in the constrained momentum space:
    /// the pairing-dual of the horizontal lift.
    pub fn project_p(&self, q: &[f64], p: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.lift_matrix(q)?.transpose() * p)
    }

    fn translated_lu(&self, q: &[f64]) -> Result<LU<f64, nalgebra::Dyn, nalgebra::Dyn>> {
        let w = self.full.translated_block(q);
        let lu = LU::new(w);
        if !lu.is_invertible() {
            return Err(NhkError::SingularConstraintGram(format!(
                "constraint forms degenerate on the symmetry directions at {}",
                fmt_point(q)
            )));
        }
        Ok(lu)
    }

    /// Symmetry component of a velocity: the unique ξ with v − ξ_Q(v) ∈ D.
    /// Vanishes exactly on admissible velocities; is the identity on
    /// symmetry generators.
    pub fn connection(&self, q: &[f64], v: &DVector<f64>) -> Result<DVector<f64>> {
        if self.full.num_constraints() == 0 {
            return Ok(DVector::zeros(0));
        }
        let omega_v = self.full.constraint_matrix(q) * v;
        self.translated_lu(q)?
            .solve(&omega_v)
            .ok_or_else(|| NhkError::SingularConstraintGram(fmt_point(q)))
    }

    /// Coefficient matrix of the connection one-form: m×n, row s holding the
    /// dq-components of the s-th symmetry coefficient.
    pub fn coefficient_matrix(&self, q: &[f64]) -> Result<DMatrix<f64>> {
        let omega = self.full.constraint_matrix(q);
        self.translated_lu(q)?
            .solve(&omega)
            .ok_or_else(|| NhkError::SingularConstraintGram(fmt_point(q)))
    }

    /// n×n̄ matrix whose columns are the horizontal lifts of the quotient
    /// coordinate directions.
    pub fn lift_matrix(&self, q: &[f64]) -> Result<DMatrix<f64>> {
        let n = self.full.dim;
        let nbar = self.reduced_dim();
        let m = self.full.num_constraints();
        let mut h = DMatrix::zeros(n, nbar);
        for (k, &i) in self.reduced_indices.iter().enumerate() {
            h[(i, k)] = 1.0;
        }
        if m == 0 {
            return Ok(h);
        }
        let omega = self.full.constraint_matrix(q);
        let mut omega_red = DMatrix::zeros(m, nbar);
        for (k, &i) in self.reduced_indices.iter().enumerate() {
            omega_red.set_column(k, &omega.column(i));
        }
        let fill = self
            .translated_lu(q)?
            .solve(&(-omega_red))
            .ok_or_else(|| NhkError::SingularConstraintGram(fmt_point(q)))?;
        for (a, &t) in self.translated.iter().enumerate() {
            for k in 0..nbar {
                h[(t, k)] = fill[(a, k)];
            }
        }
        Ok(h)
    }

    /// Horizontal lift of a quotient velocity: the unique admissible velocity
    /// projecting onto it.
    pub fn hl_d(&self, q: &[f64], vbar: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.lift_matrix(q)? * vbar)
    }

    /// Quotient metric at a full point: the pullback of the kinetic metric
    /// through the horizontal lift.
    pub fn reduced_metric_at(&self, q: &[f64]) -> Result<DMatrix<f64>> {
        let h = self.lift_matrix(q)?;
        let g = (self.full.metric)(q);
        Ok(h.transpose() * g * h)
    }

    pub fn reduced_metric(&self, qbar: &[f64]) -> Result<DMatrix<f64>> {
        self.reduced_metric_at(&self.embed(qbar))
    }

    pub fn reduced_potential(&self, qbar: &[f64]) -> f64 {
        (self.full.potential)(&self.embed(qbar))
    }

    fn reduced_cholesky(&self, q: &[f64]) -> Result<Cholesky<f64, nalgebra::Dyn>> {
        Cholesky::new(self.reduced_metric_at(q)?).ok_or_else(|| {
            NhkError::SingularMetric(format!(
                "quotient metric not positive definite at {}",
                fmt_point(q)
            ))
        })
    }

    /// Quotient Hamiltonian ½ p̄ᵀ ḡ(q̄)⁻¹ p̄ + V̄(q̄).
    pub fn reduced_hamiltonian(&self, qbar: &[f64], pbar: &DVector<f64>) -> Result<f64> {
        let q = self.embed(qbar);
        let pv = self.reduced_cholesky(&q)?.solve(pbar);
        Ok(0.5 * pbar.dot(&pv) + (self.full.potential)(&q))
    }

    /// Momentum-space horizontal lift of a quotient covector at `q`.
    pub fn hl_m(&self, q: &[f64], pbar: &DVector<f64>) -> Result<DVector<f64>> {
        let h = self.lift_matrix(q)?;
        let vbar = self.reduced_cholesky(q)?.solve(pbar);
        Ok((self.full.metric)(q) * (h * vbar))
    }

    /// Momentum of the symmetry action: the components of `p` over the
    /// translated coordinates, in group order.
    pub fn momentum_map(&self, p: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.translated.len(), self.translated.iter().map(|&t| p[t]))
    }

    /// Curvature coefficient tensor at `q`: one antisymmetric n×n matrix per
    /// symmetry direction, `F_a[i][j] = dA^a(∂_i, ∂_j)`, obtained by
    /// finite-difference exterior differentiation of the connection
    /// coefficients.
    pub fn curvature_tensor(&self, q: &[f64]) -> Result<Vec<DMatrix<f64>>> {
        let n = self.full.dim;
        let m = self.full.num_constraints();
        // grad[i] = ∂_i C, each m×n.
        let mut grad = Vec::with_capacity(n);
        for i in 0..n {
            grad.push(self.curvature_engine.partial_mat(
                |x| {
                    self.coefficient_matrix(x)
                        .unwrap_or_else(|_| DMatrix::from_element(m, n, f64::NAN))
                },
                q,
                i,
            ));
        }
        let mut tensors = Vec::with_capacity(m);
        for a in 0..m {
            let mut f = DMatrix::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    f[(i, j)] = grad[i][(a, j)] - grad[j][(a, i)];
                }
            }
            if f.iter().any(|x| !x.is_finite()) {
                return Err(NhkError::DomainViolation(format!(
                    "curvature differentiation left the metric's domain near {}",
                    fmt_point(q)
                )));
            }
            tensors.push(f);
        }
        Ok(tensors)
    }

    /// Curvature of the connection on a pair of (horizontal) vectors.
    pub fn curvature(&self, q: &[f64], u: &DVector<f64>, w: &DVector<f64>) -> Result<DVector<f64>> {
        let tensors = self.curvature_tensor(q)?;
        Ok(DVector::from_iterator(
            tensors.len(),
            tensors.iter().map(|f| (u.transpose() * f * w)[(0, 0)]),
        ))
    }

    /// The gyroscopic two-form on quotient tangent vectors, evaluated through
    /// an explicit lift point `q` (callers verifying well-definedness vary
    /// the lift point; `xi` below uses the canonical one).
    pub fn xi_at_lift(
        &self,
        q: &[f64],
        pbar: &DVector<f64>,
        ubar: &DVector<f64>,
        wbar: &DVector<f64>,
    ) -> Result<f64> {
        let k = self.xi_matrix_at_lift(q, pbar)?;
        Ok((ubar.transpose() * k * wbar)[(0, 0)])
    }

    /// Ξ(q̄, p̄)(ū, w̄): the symmetry momentum of the lifted covector paired
    /// with the curvature of the lifted tangent vectors.
    pub fn xi(
        &self,
        qbar: &[f64],
        pbar: &DVector<f64>,
        ubar: &DVector<f64>,
        wbar: &DVector<f64>,
    ) -> Result<f64> {
        self.xi_at_lift(&self.embed(qbar), pbar, ubar, wbar)
    }

    /// Coefficient matrix of Ξ at a quotient point: antisymmetric n̄×n̄,
    /// linear in p̄.
    pub fn xi_matrix(&self, qbar: &[f64], pbar: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.xi_matrix_at_lift(&self.embed(qbar), pbar)
    }

    fn xi_matrix_at_lift(&self, q: &[f64], pbar: &DVector<f64>) -> Result<DMatrix<f64>> {
        let nbar = self.reduced_dim();
        if self.full.num_constraints() == 0 {
            return Ok(DMatrix::zeros(nbar, nbar));
        }
        let h = self.lift_matrix(q)?;
        let j = self.momentum_map(&self.hl_m(q, pbar)?);
        let tensors = self.curvature_tensor(q)?;
        let mut k = DMatrix::zeros(nbar, nbar);
        for (a, f) in tensors.iter().enumerate() {
            k += (h.transpose() * f * &h) * j[a];
        }
        Ok(k)
    }

    /// The reduced equations of motion: contraction of the deformed
    /// symplectic structure with the unknown field equals dH̄, assembled and
    /// solved as a 2n̄×2n̄ linear system.
    pub fn reduced_vector_field(
        &self,
        qbar: &[f64],
        pbar: &DVector<f64>,
        engine: &DiffEngine,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        let nbar = self.reduced_dim();
        let k = self.xi_matrix(qbar, pbar)?;

        // Structure matrix of Ω̄ − Ξ in (q̄, p̄) block order.
        let mut s = DMatrix::zeros(2 * nbar, 2 * nbar);
        for i in 0..nbar {
            for j in 0..nbar {
                s[(i, j)] = -k[(i, j)];
            }
            s[(i, nbar + i)] = 1.0;
            s[(nbar + i, i)] = -1.0;
        }

        let dh_dq = engine.gradient(
            |x| self.reduced_hamiltonian(x, pbar).unwrap_or(f64::NAN),
            qbar,
        );
        if dh_dq.iter().any(|x| !x.is_finite()) {
            return Err(NhkError::DomainViolation(format!(
                "quotient Hamiltonian gradient not finite at {}",
                fmt_point(qbar)
            )));
        }
        let dh_dp = self.reduced_cholesky(&self.embed(qbar))?.solve(pbar);
        let mut rhs = DVector::zeros(2 * nbar);
        rhs.rows_mut(0, nbar).copy_from(&(-&dh_dq));
        rhs.rows_mut(nbar, nbar).copy_from(&(-&dh_dp));

        let x = LU::new(s)
            .solve(&rhs)
            .ok_or_else(|| NhkError::DegenerateAlmostSymplectic(fmt_point(qbar)))?;
        Ok((
            x.rows(0, nbar).into_owned(),
            x.rows(nbar, nbar).into_owned(),
        ))
    }
}

/// A reduced-phase-space trajectory with energy and symmetry-momentum
/// diagnostics.
#[derive(Debug, Clone)]
pub struct ReducedTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<(DVector<f64>, DVector<f64>)>,
    pub energies: Vec<f64>,
}

/// Fixed-step RK4 integration of the reduced field.
pub fn integrate_reduced(
    rsys: &ReducedSystem,
    qbar0: &[f64],
    pbar0: &DVector<f64>,
    dt: f64,
    t_end: f64,
    engine: &DiffEngine,
) -> Result<ReducedTrajectory> {
    if dt <= 0.0 || dt.is_nan() || t_end < 0.0 || t_end.is_nan() {
        return Err(NhkError::Config(format!(
            "reduced integrator needs dt > 0 and t_end >= 0, got dt={dt}, t_end={t_end}"
        )));
    }
    let nbar = rsys.reduced_dim();
    let field = |z: &DVector<f64>| -> Result<DVector<f64>> {
        let qb: Vec<f64> = z.rows(0, nbar).iter().copied().collect();
        let pb = z.rows(nbar, nbar).into_owned();
        let (dq, dp) = rsys.reduced_vector_field(&qb, &pb, engine)?;
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
        traj.energies.push(rsys.reduced_hamiltonian(&qb, &pb)?);
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
