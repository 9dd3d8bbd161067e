//! Coordinate-chart representation of a nonholonomic mechanical system.
//!
//! A [`ChartSystem`] is one global chart carrying a kinetic-energy metric
//! `g(q)`, a potential `V(q)`, a set of constraint one-forms `ω^s(q)`, and an
//! abelian symmetry acting by translation on designated coordinates.  The
//! Lagrangian is `L(q, v) = ½ g_q(v, v) − V(q)` and the Hamiltonian is its
//! Legendre dual `H(q, p) = ½ pᵀ g(q)⁻¹ p + V(q)`.
//!
//! Velocities satisfying `ω^s(v) = 0` span the constraint distribution `D`;
//! its image under the Legendre transform is the constrained momentum space
//! `M`, where all physical momenta live.

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;

use crate::diff::DiffEngine;
use crate::error::{fmt_point, NhkError, Result};

pub type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type OneFormFn = Arc<dyn Fn(&[f64]) -> DVector<f64> + Send + Sync>;
pub type MatrixFn = Arc<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>;

/// Abelian symmetry acting by translation on a subset of chart coordinates.
#[derive(Debug, Clone)]
pub struct GroupAction {
    /// Indices of the coordinates the group translates, in Lie-algebra
    /// basis order.
    pub translated_coords: Vec<usize>,
    /// Labels for the Lie-algebra basis (e.g. `xi`, `eta`).
    pub lie_algebra_labels: Vec<String>,
}

impl GroupAction {
    pub fn new(translated_coords: Vec<usize>, lie_algebra_labels: Vec<String>) -> Self {
        GroupAction {
            translated_coords,
            lie_algebra_labels,
        }
    }

    pub fn dim(&self) -> usize {
        self.translated_coords.len()
    }
}

/// A point of phase space: chart coordinates plus conjugate momenta.
#[derive(Debug, Clone, PartialEq)]
pub struct PhasePoint {
    pub q: DVector<f64>,
    pub p: DVector<f64>,
}

impl PhasePoint {
    pub fn new(q: DVector<f64>, p: DVector<f64>) -> Self {
        PhasePoint { q, p }
    }

    pub fn from_slices(q: &[f64], p: &[f64]) -> Self {
        PhasePoint {
            q: DVector::from_column_slice(q),
            p: DVector::from_column_slice(p),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().all(|x| x.is_finite()) && self.p.iter().all(|x| x.is_finite())
    }
}

/// Axis-aligned sampling box for a coordinate domain.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DomainBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl DomainBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Self {
        assert_eq!(lower.len(), upper.len());
        DomainBox { lower, upper }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, q: &[f64]) -> bool {
        q.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(x, (lo, hi))| x >= lo && x <= hi)
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> DVector<f64> {
        DVector::from_fn(self.dim(), |i, _| {
            if self.upper[i] > self.lower[i] {
                rng.gen_range(self.lower[i]..self.upper[i])
            } else {
                self.lower[i]
            }
        })
    }

    /// Restrict the box to a subset of coordinates (used to project a
    /// full-chart box onto reduced coordinates).
    pub fn select(&self, indices: &[usize]) -> DomainBox {
        DomainBox {
            lower: indices.iter().map(|&i| self.lower[i]).collect(),
            upper: indices.iter().map(|&i| self.upper[i]).collect(),
        }
    }
}

/// A nonholonomic mechanical system in a single global coordinate chart.
#[derive(Clone)]
pub struct ChartSystem {
    pub dim: usize,
    pub coord_names: Vec<String>,
    pub periodic: Vec<bool>,
    /// `q ↦ g(q)`, symmetric positive definite.
    pub metric: MatrixFn,
    /// `q ↦ V(q)`.
    pub potential: ScalarFn,
    /// `q ↦ ω^s(q)` for `s = 1..m`, each a covector of length `dim`.
    pub constraint_forms: Vec<OneFormFn>,
    pub group: GroupAction,
}

impl std::fmt::Debug for ChartSystem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ChartSystem")
            .field("dim", &self.dim)
            .field("coord_names", &self.coord_names)
            .field("periodic", &self.periodic)
            .field("constraints", &self.constraint_forms.len())
            .field("group", &self.group)
            .finish()
    }
}

impl ChartSystem {
    /// Number of constraints `m`.
    pub fn num_constraints(&self) -> usize {
        self.constraint_forms.len()
    }

    /// The constraint forms stacked into an `m × n` matrix `Ω(q)` whose rows
    /// are `ω^s(q)`.
    pub fn constraint_matrix(&self, q: &[f64]) -> DMatrix<f64> {
        let m = self.num_constraints();
        let mut omega = DMatrix::zeros(m, self.dim);
        for (s, form) in self.constraint_forms.iter().enumerate() {
            let row = form(q);
            omega.row_mut(s).copy_from(&row.transpose());
        }
        omega
    }

    /// Cholesky factorization of `g(q)`, with finiteness and SPD guards.
    pub fn metric_cholesky(&self, q: &[f64]) -> Result<Cholesky<f64, nalgebra::Dyn>> {
        let g = (self.metric)(q);
        if g.iter().any(|x| !x.is_finite()) {
            return Err(NhkError::DomainViolation(format!(
                "metric has non-finite entries at {}",
                fmt_point(q)
            )));
        }
        Cholesky::new(g).ok_or_else(|| NhkError::SingularMetric(fmt_point(q)))
    }

    /// Legendre transform: `v ↦ p = g(q) v`.
    pub fn legendre(&self, q: &[f64], v: &DVector<f64>) -> DVector<f64> {
        (self.metric)(q) * v
    }

    /// Inverse Legendre transform: `p ↦ v = g(q)⁻¹ p`.
    pub fn legendre_inverse(&self, q: &[f64], p: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.metric_cholesky(q)?.solve(p))
    }

    /// `H(q, p) = ½ pᵀ g(q)⁻¹ p + V(q)`.
    pub fn hamiltonian(&self, q: &[f64], p: &DVector<f64>) -> Result<f64> {
        let v = self.legendre_inverse(q, p)?;
        Ok(0.5 * p.dot(&v) + (self.potential)(q))
    }

    /// `L(q, v) = ½ g_q(v, v) − V(q)`.
    pub fn lagrangian(&self, q: &[f64], v: &DVector<f64>) -> f64 {
        0.5 * ((self.metric)(q) * v).dot(v) - (self.potential)(q)
    }

    /// Constraint values `ω^s(q)(v)`, one component per constraint.
    pub fn constraint_residual(&self, q: &[f64], v: &DVector<f64>) -> DVector<f64> {
        if self.num_constraints() == 0 {
            return DVector::zeros(0);
        }
        self.constraint_matrix(q) * v
    }

    /// Residual measuring whether `p` lies in the constrained momentum space
    /// `M`: the norm of `ω^s(g⁻¹ p)` over all constraints.  `p ∈ M` iff the
    /// kinematic velocity it represents is constraint-admissible.
    pub fn m_projection_residual(&self, q: &[f64], p: &DVector<f64>) -> Result<f64> {
        let v = self.legendre_inverse(q, p)?;
        Ok(self.constraint_residual(q, &v).norm())
    }

    /// Project `p` onto `M` orthogonally with respect to the kinetic
    /// cometric: `p ↦ p − Ωᵀ μ` with `(Ω g⁻¹ Ωᵀ) μ = Ω g⁻¹ p`.
    pub fn m_project(&self, q: &[f64], p: &DVector<f64>) -> Result<DVector<f64>> {
        let m = self.num_constraints();
        if m == 0 {
            return Ok(p.clone());
        }
        let chol = self.metric_cholesky(q)?;
        let omega = self.constraint_matrix(q);
        // Columns of g⁻¹ Ωᵀ.
        let ginv_omega_t = chol.solve(&omega.transpose());
        let gram = &omega * &ginv_omega_t;
        let rhs = &omega * chol.solve(p);
        let mu = Cholesky::new(gram)
            .ok_or_else(|| NhkError::SingularConstraintGram(fmt_point(q)))?
            .solve(&rhs);
        Ok(p - omega.transpose() * mu)
    }

    /// Verify the structural invariants that make the chart a Chaplygin
    /// system, by finite differences at the given sample points:
    ///
    /// * `g`, `V`, and the constraint coefficients are independent of the
    ///   translated coordinates;
    /// * the translated-slot block `[ω^s(∂_a)]` is invertible (the group
    ///   orbit complements the constraint distribution);
    /// * `g(q)` is SPD and the constraint covectors are independent.
    pub fn validate_chaplygin(&self, samples: &[DVector<f64>], engine: &DiffEngine) -> Result<()> {
        let m = self.num_constraints();
        if self.group.dim() != m {
            return Err(NhkError::InvalidParameters(format!(
                "group dimension {} does not match constraint count {m}",
                self.group.dim()
            )));
        }
        const INVARIANCE_TOL: f64 = 1e-8;
        for q in samples {
            let qs = q.as_slice();
            self.metric_cholesky(qs)?;
            for &a in &self.group.translated_coords {
                let dg = engine.partial_mat(|x| (self.metric)(x), qs, a);
                let dv = engine.partial(|x| (self.potential)(x), qs, a);
                let dw = engine.partial_mat(|x| self.constraint_matrix(x), qs, a);
                if dg.amax() > INVARIANCE_TOL || dv.abs() > INVARIANCE_TOL || {
                    m > 0 && dw.amax() > INVARIANCE_TOL
                } {
                    return Err(NhkError::InvalidParameters(format!(
                        "system data depends on translated coordinate {} at {}",
                        self.coord_names[a],
                        fmt_point(qs)
                    )));
                }
            }
            if m > 0 {
                let w = self.translated_block(qs);
                if w.clone().lu().try_inverse().is_none() {
                    return Err(NhkError::SingularConstraintGram(fmt_point(qs)));
                }
            }
        }
        Ok(())
    }

    /// The `m × m` block `W` with `W[(s, a)] = ω^s(∂/∂q^{t_a})` over the
    /// translated coordinates `t_a`.
    pub fn translated_block(&self, q: &[f64]) -> DMatrix<f64> {
        let m = self.num_constraints();
        let mut w = DMatrix::zeros(m, m);
        for (s, form) in self.constraint_forms.iter().enumerate() {
            let row = form(q);
            for (a, &ta) in self.group.translated_coords.iter().enumerate() {
                w[(s, a)] = row[ta];
            }
        }
        w
    }

    /// Indices of the non-translated coordinates, in chart order.  These are
    /// the coordinates of the reduced shape space.
    pub fn reduced_indices(&self) -> Vec<usize> {
        (0..self.dim)
            .filter(|i| !self.group.translated_coords.contains(i))
            .collect()
    }
}
