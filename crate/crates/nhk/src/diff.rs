//! Finite-difference engine: directional derivatives, gradients, Jacobians,
//! and the numerical exterior derivative of one-forms.
//!
//! Every derivative in the crate flows through [`DiffEngine`] so the stencil
//! and step policy live in exactly one place.  The default is a 4th-order
//! central stencil with relative step `1e-6`, which keeps truncation and
//! roundoff error both near `1e-10` for well-scaled smooth functions.
//!
//! Call sites that differentiate quantities which are themselves outputs of
//! finite differences (e.g. the trace of the Jacobian of a vector field whose
//! assembly already differentiates the metric) must use a larger step: the
//! inner roundoff noise (~1e-10) would otherwise be amplified by the outer
//! `1/h`.  [`DiffEngine::FIELD_JACOBIAN_STEP`] is tuned for that case.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiffScheme {
    /// 4th-order central stencil `[1, -8, 0, 8, -1] / 12h`.
    CentralDifference,
    /// 4th-order one-sided forward stencil `[-25, 48, -36, 16, -3] / 12h`;
    /// useful when the domain is bounded below in the step direction.
    ForwardAlgorithmic,
}

#[derive(Debug, Clone, Copy)]
pub struct DiffEngine {
    pub scheme: DiffScheme,
    /// Relative step: the actual step at coordinate value `x` is
    /// `step * max(1, |x|)`.
    pub step: f64,
}

impl Default for DiffEngine {
    fn default() -> Self {
        DiffEngine {
            scheme: DiffScheme::CentralDifference,
            step: 1e-6,
        }
    }
}

impl DiffEngine {
    /// Step for differentiating smooth closed-form data (default policy).
    pub const DEFAULT_STEP: f64 = 1e-6;

    /// Step for differentiating connection coefficients when assembling
    /// curvature.  The curvature feeds tolerance-critical residuals
    /// (vanishing checks at 1e-10), so the step sits at the optimum of the
    /// noise/truncation tradeoff for first derivatives of trigonometric
    /// coefficient matrices: roundoff ~ eps/h and truncation ~ h^4 balance
    /// near 1e-4, giving ~1e-10 total error instead of ~1e-9 at 1e-6.
    pub const CURVATURE_STEP: f64 = 1e-4;

    /// Step for differentiating vector fields that are themselves assembled
    /// with inner finite differences (divergence traces, flow Jacobians).
    /// The inner noise floor (~1e-10) divided by the outer step must stay
    /// below the 1e-6 acceptance tolerances.
    pub const FIELD_JACOBIAN_STEP: f64 = 1e-3;

    /// Step for divergence traces of Hamiltonian-type fields.  Every trace
    /// entry is differentiated along its own coordinate, where the field
    /// component is polynomial (base-diagonal entries constant, fiber
    /// entries at most quadratic), so the stencil has no truncation error
    /// and only the inner evaluation noise matters: a coarse step divides
    /// it down without any accuracy cost.
    pub const DIVERGENCE_STEP: f64 = 1e-2;

    pub fn new(scheme: DiffScheme, step: f64) -> Self {
        DiffEngine { scheme, step }
    }

    pub fn with_step(step: f64) -> Self {
        DiffEngine {
            scheme: DiffScheme::CentralDifference,
            step,
        }
    }

    fn h(&self, x: f64) -> f64 {
        self.step * x.abs().max(1.0)
    }

    /// Partial derivative of a scalar function along coordinate `i`.
    pub fn partial<F>(&self, f: F, x: &[f64], i: usize) -> f64
    where
        F: Fn(&[f64]) -> f64,
    {
        let h = self.h(x[i]);
        let mut pt = x.to_vec();
        let mut at = |offset: f64| {
            pt[i] = x[i] + offset;
            f(&pt)
        };
        match self.scheme {
            DiffScheme::CentralDifference => {
                (at(-2.0 * h) - 8.0 * at(-h) + 8.0 * at(h) - at(2.0 * h)) / (12.0 * h)
            }
            DiffScheme::ForwardAlgorithmic => {
                (-25.0 * at(0.0) + 48.0 * at(h) - 36.0 * at(2.0 * h) + 16.0 * at(3.0 * h)
                    - 3.0 * at(4.0 * h))
                    / (12.0 * h)
            }
        }
    }

    /// Gradient of a scalar function.
    pub fn gradient<F>(&self, f: F, x: &[f64]) -> DVector<f64>
    where
        F: Fn(&[f64]) -> f64,
    {
        DVector::from_fn(x.len(), |i, _| self.partial(&f, x, i))
    }

    /// Partial derivative of a vector-valued function along coordinate `i`.
    pub fn partial_vec<F>(&self, f: F, x: &[f64], i: usize) -> DVector<f64>
    where
        F: Fn(&[f64]) -> DVector<f64>,
    {
        let h = self.h(x[i]);
        let mut pt = x.to_vec();
        let mut at = |offset: f64| {
            pt[i] = x[i] + offset;
            f(&pt)
        };
        match self.scheme {
            DiffScheme::CentralDifference => {
                (at(-2.0 * h) - at(-h) * 8.0 + at(h) * 8.0 - at(2.0 * h)) / (12.0 * h)
            }
            DiffScheme::ForwardAlgorithmic => {
                (at(0.0) * -25.0 + at(h) * 48.0 - at(2.0 * h) * 36.0 + at(3.0 * h) * 16.0
                    - at(4.0 * h) * 3.0)
                    / (12.0 * h)
            }
        }
    }

    /// Jacobian `J[(r, c)] = ∂f_r/∂x_c` of a vector-valued function.
    pub fn jacobian<F>(&self, f: F, x: &[f64]) -> DMatrix<f64>
    where
        F: Fn(&[f64]) -> DVector<f64>,
    {
        let cols: Vec<DVector<f64>> = (0..x.len()).map(|i| self.partial_vec(&f, x, i)).collect();
        DMatrix::from_columns(&cols)
    }

    /// Partial derivative of a matrix-valued function along coordinate `i`.
    pub fn partial_mat<F>(&self, f: F, x: &[f64], i: usize) -> DMatrix<f64>
    where
        F: Fn(&[f64]) -> DMatrix<f64>,
    {
        let h = self.h(x[i]);
        let mut pt = x.to_vec();
        let mut at = |offset: f64| {
            pt[i] = x[i] + offset;
            f(&pt)
        };
        match self.scheme {
            DiffScheme::CentralDifference => {
                (at(-2.0 * h) - at(-h) * 8.0 + at(h) * 8.0 - at(2.0 * h)) / (12.0 * h)
            }
            DiffScheme::ForwardAlgorithmic => {
                (at(0.0) * -25.0 + at(h) * 48.0 - at(2.0 * h) * 36.0 + at(3.0 * h) * 16.0
                    - at(4.0 * h) * 3.0)
                    / (12.0 * h)
            }
        }
    }

    /// Numerical exterior derivative of a one-form evaluated on a pair of
    /// constant coordinate vectors:
    ///
    /// `dσ(u, w) = Σ_{i,j} ∂_i σ_j (u_i w_j − w_i u_j)`.
    ///
    /// Exact for one-forms with linear coefficients; antisymmetric in
    /// `(u, w)` by construction.
    pub fn exterior_derivative_oneform<F>(&self, sigma: F, x: &[f64], u: &[f64], w: &[f64]) -> f64
    where
        F: Fn(&[f64]) -> DVector<f64>,
    {
        let jac = self.jacobian(&sigma, x); // jac[(j, i)] = ∂_i σ_j
        let u = DVector::from_column_slice(u);
        let w = DVector::from_column_slice(w);
        (w.transpose() * &jac * &u - u.transpose() * &jac * &w)[(0, 0)]
    }

    /// All antisymmetrized coefficient pairs `∂_i σ_j − ∂_j σ_i` as a matrix;
    /// `dσ(u, w) = uᵀ A w` with `A` the returned matrix.
    pub fn exterior_derivative_matrix<F>(&self, sigma: F, x: &[f64]) -> DMatrix<f64>
    where
        F: Fn(&[f64]) -> DVector<f64>,
    {
        let jac = self.jacobian(&sigma, x);
        // A[(i, j)] = ∂_i σ_j − ∂_j σ_i = jac[(j, i)] − jac[(i, j)]
        jac.transpose() - jac
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const LINEAR_TOL: f64 = 1e-10;

    #[test]
    fn linear_function_exact() {
        // Both stencils are exact on linear functions up to roundoff.  The
        // rounding noise scales like eps/h, so a 1e-3 step keeps it well
        // under the 1e-10 bound (1e-6 would leave ~3e-9 of noise).
        let f = |x: &[f64]| 3.0 * x[0] - 2.5 * x[1] + 7.0;
        let x = [0.3, -1.2];
        for scheme in [
            DiffScheme::CentralDifference,
            DiffScheme::ForwardAlgorithmic,
        ] {
            let eng = DiffEngine::new(scheme, 1e-3);
            assert!((eng.partial(f, &x, 0) - 3.0).abs() < LINEAR_TOL);
            assert!((eng.partial(f, &x, 1) + 2.5).abs() < LINEAR_TOL);
        }
    }

    #[test]
    fn quadratic_gradient_accuracy() {
        // Analytic gradients of quadratics reproduced to 1e-7 relative.
        let f = |x: &[f64]| 0.5 * x[0] * x[0] + 2.0 * x[0] * x[1] - x[1] * x[1];
        let x = [1.7, -0.4];
        let eng = DiffEngine::default();
        let g = eng.gradient(f, &x);
        let exact = [x[0] + 2.0 * x[1], 2.0 * x[0] - 2.0 * x[1]];
        for i in 0..2 {
            assert!(
                (g[i] - exact[i]).abs() <= 1e-7 * exact[i].abs().max(1.0),
                "component {i}: {} vs {}",
                g[i],
                exact[i]
            );
        }
    }

    #[test]
    fn exterior_derivative_of_exact_form_vanishes() {
        // σ = dW for W = sin(x) cos(y) + x y²: dσ ≡ 0.
        let eng = DiffEngine::default();
        let sigma = |x: &[f64]| {
            DVector::from_vec(vec![
                x[0].cos() * x[1].cos() + x[1] * x[1],
                -x[0].sin() * x[1].sin() + 2.0 * x[0] * x[1],
            ])
        };
        let val = eng.exterior_derivative_oneform(sigma, &[0.7, -0.3], &[1.0, 0.0], &[0.0, 1.0]);
        assert!(val.abs() < 1e-8, "d(dW) = {val}");
    }

    #[test]
    fn exterior_derivative_x_dy() {
        // σ = x dy in 2D: dσ(∂x, ∂y) = 1.
        let eng = DiffEngine::default();
        let sigma = |x: &[f64]| DVector::from_vec(vec![0.0, x[0]]);
        let val = eng.exterior_derivative_oneform(sigma, &[0.4, 1.1], &[1.0, 0.0], &[0.0, 1.0]);
        assert!((val - 1.0).abs() < 1e-10, "d(x dy)(∂x,∂y) = {val}");
        let anti = eng.exterior_derivative_oneform(sigma, &[0.4, 1.1], &[0.0, 1.0], &[1.0, 0.0]);
        assert!((anti + 1.0).abs() < 1e-10, "antisymmetry failed: {anti}");
    }

    #[test]
    fn exterior_derivative_polynomial_oracle() {
        // σ = (x²y) dx + (x³ − y) dy: dσ(∂x,∂y) = ∂x(x³−y) − ∂y(x²y) = 3x² − x².
        let eng = DiffEngine::default();
        let sigma =
            |x: &[f64]| DVector::from_vec(vec![x[0] * x[0] * x[1], x[0] * x[0] * x[0] - x[1]]);
        let pt = [1.3, -0.8];
        let val = eng.exterior_derivative_oneform(sigma, &pt, &[1.0, 0.0], &[0.0, 1.0]);
        let exact = 3.0 * pt[0] * pt[0] - pt[0] * pt[0];
        assert!((val - exact).abs() < 1e-7, "{val} vs {exact}");
    }

    #[test]
    fn jacobian_matches_component_partials() {
        let eng = DiffEngine::default();
        let f = |x: &[f64]| DVector::from_vec(vec![x[0] * x[1], x[1].sin()]);
        let x = [0.9, 0.4];
        let jac = eng.jacobian(f, &x);
        assert!((jac[(0, 0)] - x[1]).abs() < 1e-9);
        assert!((jac[(0, 1)] - x[0]).abs() < 1e-9);
        assert!((jac[(1, 0)]).abs() < 1e-9);
        assert!((jac[(1, 1)] - x[1].cos()).abs() < 1e-9);
    }
}
