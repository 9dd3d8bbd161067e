//! Randomized invariants of the geometric pipeline: identities that must
//! hold for every admissible input, not just the worked examples' data.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use nalgebra::DVector;
use proptest::prelude::*;

use nhk::diff::DiffEngine;
use nhk::error::NhkError;
use nhk::hamilton_jacobi::separable_solve;
use nhk::hamiltonization::{chaplygin_hamiltonian, psi_f, PsiDirection};
use nhk::reduction::integrate_reduced;
use nhk::second_stage::TildeSystem;
use nhk::systems::{build, SystemBundle};

fn knife() -> &'static SystemBundle {
    static CELL: OnceLock<SystemBundle> = OnceLock::new();
    CELL.get_or_init(|| build("knife-edge", &BTreeMap::new()).unwrap())
}

fn disk() -> &'static SystemBundle {
    static CELL: OnceLock<SystemBundle> = OnceLock::new();
    CELL.get_or_init(|| build("vrd", &BTreeMap::new()).unwrap())
}

fn snake() -> &'static SystemBundle {
    static CELL: OnceLock<SystemBundle> = OnceLock::new();
    CELL.get_or_init(|| build("snakeboard", &BTreeMap::new()).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    /// Velocity-momentum duality: the two Legendre maps invert each other
    /// and satisfy H(q, FL(v)) + L(q, v) = <FL(v), v>.
    #[test]
    fn legendre_duality(
        phi in 0.2f64..1.3,
        x in -1.5f64..1.5,
        y in -1.5f64..1.5,
        v0 in -2.0f64..2.0,
        v1 in -2.0f64..2.0,
        v2 in -2.0f64..2.0,
    ) {
        let sys = &knife().system;
        let q = [phi, x, y];
        let v = DVector::from_vec(vec![v0, v1, v2]);
        let p = sys.legendre(&q, &v);
        let back = sys.legendre_inverse(&q, &p).unwrap();
        prop_assert!((back - &v).amax() < 1e-10);
        let pairing = sys.hamiltonian(&q, &p).unwrap() + sys.lagrangian(&q, &v);
        prop_assert!((pairing - p.dot(&v)).abs() < 1e-10);
    }

    /// Horizontal lifts of base velocities are admissible, and momentum
    /// lifts land on the constrained momentum space.
    #[test]
    fn lifts_respect_the_constraints(
        phi in 0.2f64..1.3,
        x in -1.5f64..1.5,
        y in -1.5f64..1.5,
        a0 in -2.0f64..2.0,
        a1 in -2.0f64..2.0,
    ) {
        let b = knife();
        let q = [phi, x, y];
        let vbar = DVector::from_vec(vec![a0, a1]);
        let lifted = b.reduced.hl_d(&q, &vbar).unwrap();
        prop_assert!(b.system.constraint_residual(&q, &lifted).amax() < 1e-12);
        let pbar = DVector::from_vec(vec![a0, a1]);
        let pm = b.reduced.hl_m(&q, &pbar).unwrap();
        prop_assert!(b.system.m_projection_residual(&q, &pm).unwrap() < 1e-10);
        // Lift followed by fiber projection is the identity.
        let round = b.reduced.project_p(&q, &pm).unwrap();
        prop_assert!((round - &pbar).amax() < 1e-10);
    }

    /// The gyroscopic two-form is antisymmetric and scales linearly with
    /// the momentum argument.
    #[test]
    fn gyroscopic_form_is_antisymmetric_and_fiber_linear(
        phi in 0.2f64..1.3,
        x in -1.5f64..1.5,
        p0 in -2.0f64..2.0,
        p1 in -2.0f64..2.0,
        c in -3.0f64..3.0,
    ) {
        let b = knife();
        let qb = [phi, x];
        let pb = DVector::from_vec(vec![p0, p1]);
        let k = b.reduced.xi_matrix(&qb, &pb).unwrap();
        prop_assert!((&k + k.transpose()).amax() < 1e-12);
        let scaled = b.reduced.xi_matrix(&qb, &(&pb * c)).unwrap();
        prop_assert!((scaled - k * c).amax() < 1e-9);
    }

    /// The fiber scaling and its inverse compose to the identity.
    #[test]
    fn fiber_scaling_round_trips(
        phi in 0.2f64..1.3,
        x in -1.5f64..1.5,
        p0 in -3.0f64..3.0,
        p1 in -3.0f64..3.0,
    ) {
        let b = knife();
        let f = b.multiplier.as_ref().unwrap();
        let qb = [phi, x];
        let pb = DVector::from_vec(vec![p0, p1]);
        let up = psi_f(f, &qb, &pb, PsiDirection::Forward).unwrap();
        let back = psi_f(f, &qb, &up, PsiDirection::Inverse).unwrap();
        prop_assert!((back - &pb).amax() < 1e-12);
    }

    /// Separable solutions satisfy the rescaled equation pointwise at the
    /// requested level, for any admissible constants.
    #[test]
    fn knife_edge_solutions_hold_at_any_admissible_level(
        energy in 0.6f64..2.0,
        gamma_phi0 in -0.5f64..0.5,
        s in 0.0f64..1.0,
        u in 0.0f64..1.0,
    ) {
        let b = knife();
        let f = b.multiplier.as_ref().unwrap();
        let consts: BTreeMap<String, f64> =
            [("gamma_phi0".to_string(), gamma_phi0)].into_iter().collect();
        let sol = separable_solve(b, energy, &consts).unwrap();
        prop_assert!((sol.constants["energy"] - energy).abs() < 1e-12);
        // An interior point of the (possibly x-restricted) solution domain.
        let dom = &sol.form.domain;
        let qb = [
            dom.lower[0] + s * (dom.upper[0] - dom.lower[0]),
            dom.lower[1] + u * (dom.upper[1] - dom.lower[1]),
        ];
        let sigma = sol.form.at(&qb);
        let h = chaplygin_hamiltonian(&b.reduced, f, &qb, &sigma).unwrap();
        prop_assert!((h - energy).abs() < 1e-9);
    }

    /// The disk's energy relation gates the constants: matching energies
    /// solve, mismatched ones are rejected.
    #[test]
    fn disk_energy_relation_is_enforced(
        gamma_phi0 in -1.0f64..1.0,
        gamma_psi0 in -1.0f64..1.0,
        off in 0.01f64..0.5,
    ) {
        let b = disk();
        let consts: BTreeMap<String, f64> = [
            ("gamma_phi0".to_string(), gamma_phi0),
            ("gamma_psi0".to_string(), gamma_psi0),
        ]
        .into_iter()
        .collect();
        let energy = 0.5 * gamma_phi0 * gamma_phi0 + gamma_psi0 * gamma_psi0;
        let sol = separable_solve(b, energy, &consts).unwrap();
        prop_assert!((sol.energy - energy).abs() < 1e-12);
        let err = separable_solve(b, energy + off, &consts).unwrap_err();
        prop_assert!(matches!(err, NhkError::InvalidConstants(_)));
    }

    /// Level identification and its inverse are mutually inverse on the
    /// momentum level.
    #[test]
    fn level_identification_round_trips(
        theta in -3.0f64..3.0,
        phi in 0.4f64..2.7,
        p0 in -2.0f64..2.0,
        p1 in -2.0f64..2.0,
    ) {
        let b = snake();
        let cfg = b.second.as_ref().unwrap();
        let tsys = TildeSystem::from_config(b.reduced.clone(), cfg).unwrap();
        let qb = [theta, phi, 0.0];
        let pb = DVector::from_vec(vec![p0, p1, cfg.mu[0]]);
        let (qt, pt) = tsys.setup.phi_mu(&qb, &pb).unwrap();
        let (qb2, pb2) = tsys.setup.phi_mu_inverse(&qt, &pt).unwrap();
        prop_assert!((qb2[0] - qb[0]).abs() < 1e-12);
        prop_assert!((qb2[1] - qb[1]).abs() < 1e-12);
        prop_assert!((pb2 - &pb).amax() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    /// Short reduced-flow runs conserve the quotient energy for arbitrary
    /// admissible starts (kept clear of the chart's coordinate pole).
    #[test]
    fn reduced_flow_conserves_energy(
        phi in 0.2f64..1.2,
        x in -1.0f64..1.0,
        p0 in -0.5f64..0.5,
        p1 in -1.0f64..1.0,
    ) {
        let b = knife();
        let engine = DiffEngine::default();
        let pb = DVector::from_vec(vec![p0, p1]);
        let traj = integrate_reduced(&b.reduced, &[phi, x], &pb, 1e-3, 0.2, &engine).unwrap();
        let e0 = traj.energies[0];
        let drift = traj
            .energies
            .iter()
            .map(|e| (e - e0).abs())
            .fold(0.0_f64, f64::max);
        prop_assert!(drift < 1e-9, "energy drift {drift:.3e}");
    }
}
