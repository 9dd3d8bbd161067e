//! # nhk — nonholonomic mechanics kit
//!
//! A library (and CLI) for mechanical systems subject to nonholonomic
//! constraints, covering the full pipeline from constrained dynamics to
//! Hamilton–Jacobi integration:
//!
//! 1. **Full dynamics** ([`dynamics`]): Hamilton's equations with Lagrange
//!    multipliers obtained by index reduction, plus conservation monitoring.
//! 2. **Symmetry reduction** ([`reduction`]): for systems whose symmetry
//!    orbits complement the constraint distribution, builds the quotient
//!    system — reduced metric and Hamiltonian, the connection and its
//!    curvature, and the semi-basic two-form `Ξ` that obstructs the reduced
//!    dynamics from being canonically Hamiltonian.
//! 3. **Hamiltonization** ([`hamiltonization`]): multiplies momenta by a
//!    fiber-wise constant function `f` so the rescaled dynamics becomes
//!    canonical; verifies the governing condition `df ∧ Θ̄ = f Ξ`, invariant
//!    measures, and flow conjugacy.
//! 4. **Second-stage reduction** ([`second_stage`]): a further quotient by a
//!    residual symmetry at a fixed momentum level, with the shift map,
//!    cotangent-bundle identification, and the second Hamiltonization
//!    condition.
//! 5. **Hamilton–Jacobi transfer** ([`hamilton_jacobi`]): separable solutions
//!    of the Hamiltonized H–J equation, transferred back to one-forms `γ` on
//!    the original configuration space satisfying `H ∘ γ = E` and
//!    `dγ|_{D×D} = 0`, and used to integrate the full dynamics by quadrature
//!    of `q̇ = g⁻¹ γ(q)`.
//!
//! Three built-in systems ([`systems`]) exercise every stage: a vertically
//! rolling disk, a knife edge on an inclined plane, and the snakeboard.
//! Each carries closed-form cross-check oracles, and the `verify` machinery
//! ([`report`]) evaluates every structural identity on seeded random grids.
//!
//! All evaluators are pure functions of immutable system descriptions and
//! are safe to call concurrently.

pub mod chart;
pub mod diff;
pub mod dynamics;
pub mod error;
pub mod expr;
pub mod hamilton_jacobi;
pub mod hamiltonization;
pub mod reduction;
pub mod report;
pub mod sample;
pub mod second_stage;
pub mod sysdef;
pub mod systems;

pub use chart::{ChartSystem, DomainBox, GroupAction, PhasePoint};
pub use diff::{DiffEngine, DiffScheme};
pub use error::{NhkError, Result};
