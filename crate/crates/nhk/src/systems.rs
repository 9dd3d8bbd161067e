//! Built-in system registry: the vertical rolling disk, the knife edge on an
//! inclined plane, and the snakeboard.
//!
//! Each builder assembles the chart data (metric, potential, constraint
//! forms, symmetry), an admissible sampling box, a default on-constraint
//! initial state, and a set of closed-form reference functions used to
//! cross-check every numerically constructed object: the momentum-space
//! horizontal lift, the gyroscopic two-form, the quotient Hamiltonians, and
//! the exact-solution one-form on the full chart.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::chart::{ChartSystem, DomainBox, GroupAction, PhasePoint};
use crate::error::{NhkError, Result};
use crate::hamiltonization::Multiplier;
use crate::reduction::ReducedSystem;
use crate::second_stage::SecondStageConfig;

/// `(q, p̄) ↦` full-chart covector.
pub type LiftOracle = Arc<dyn Fn(&[f64], &DVector<f64>) -> DVector<f64> + Send + Sync>;
/// `(q̄, p̄) ↦` antisymmetric matrix `K` with `Ξ(u, w) = uᵀ K w`.
pub type GyroOracle = Arc<dyn Fn(&[f64], &DVector<f64>) -> DMatrix<f64> + Send + Sync>;
/// `(q̄, p̄) ↦` scalar energy.
pub type EnergyOracle = Arc<dyn Fn(&[f64], &DVector<f64>) -> f64 + Send + Sync>;
/// `(q, constants) ↦` exact-solution covector on the full chart.
pub type GammaOracle = Arc<dyn Fn(&[f64], &BTreeMap<String, f64>) -> DVector<f64> + Send + Sync>;

/// Closed-form reference functions transcribed per system.  Every numerical
/// construction in the library is checked against these; they are written
/// directly from the worked examples and share no code with the generic
/// machinery.
#[derive(Clone)]
pub struct Oracles {
    /// Horizontal lift of a quotient covector into the constrained momentum
    /// space, `hl^M(q, p̄)`.
    pub momentum_lift: LiftOracle,
    /// Gyroscopic-form matrix on the quotient, `K(q̄, p̄)`.
    pub xi_matrix: GyroOracle,
    /// Quotient Hamiltonian `H̄(q̄, p̄)`.
    pub reduced_hamiltonian: EnergyOracle,
    /// Rescaled Hamiltonian `H̄_C`, where a first-stage multiplier exists.
    pub chaplygin_hamiltonian: Option<EnergyOracle>,
    /// Rescaled Hamiltonian on the double quotient `H̃^μ_C`, where a second
    /// stage exists; takes `(q̃, p̃)`.
    pub second_chaplygin_hamiltonian: Option<EnergyOracle>,
    /// The exact-solution one-form `γ(q)` for given named constants
    /// (`gamma_phi0`, `gamma_psi0`, `mu_psi`, `energy` as applicable).
    pub gamma: GammaOracle,
}

impl std::fmt::Debug for Oracles {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Oracles")
            .field(
                "chaplygin_hamiltonian",
                &self.chaplygin_hamiltonian.is_some(),
            )
            .field(
                "second_chaplygin_hamiltonian",
                &self.second_chaplygin_hamiltonian.is_some(),
            )
            .finish()
    }
}

/// A fully assembled built-in system: chart, quotient, sampling domain,
/// candidate multiplier, optional second stage, reference functions, and a
/// default initial state lying on the constrained momentum space.
#[derive(Debug)]
pub struct SystemBundle {
    pub name: String,
    pub params: BTreeMap<String, f64>,
    pub system: ChartSystem,
    pub reduced: ReducedSystem,
    /// Sampling box over the full chart; quotient boxes are obtained with
    /// [`DomainBox::select`].
    pub domain: DomainBox,
    /// First-stage multiplier, when one exists on the quotient.
    pub multiplier: Option<Multiplier>,
    /// Second-stage data, when the quotient retains a residual symmetry.
    pub second: Option<SecondStageConfig>,
    pub oracles: Oracles,
    pub default_state: PhasePoint,
    /// Exponent `e` of the invariant density `f^e` on the hamiltonized
    /// level (one less than the dimension of the base it lives on).
    pub measure_exponent: i32,
}

impl SystemBundle {
    /// The sampling box over the quotient coordinates.
    pub fn reduced_domain(&self) -> DomainBox {
        self.domain.select(&self.system.reduced_indices())
    }
}

/// Build a named system, applying parameter overrides on top of the
/// per-system defaults.  Unknown names are a configuration error; unknown or
/// inadmissible parameters are rejected.
pub fn build(name: &str, params: &BTreeMap<String, f64>) -> Result<SystemBundle> {
    match name {
        "vrd" => vertical_disk(params),
        "knife-edge" => knife_edge(params),
        "snakeboard" => snakeboard(params),
        other => Err(NhkError::Config(format!(
            "unknown system `{other}` (expected vrd, knife-edge, or snakeboard)"
        ))),
    }
}

/// Names accepted by [`build`].
pub const SYSTEM_NAMES: [&str; 3] = ["vrd", "knife-edge", "snakeboard"];

fn resolve_params(
    name: &str,
    defaults: &[(&str, f64)],
    overrides: &BTreeMap<String, f64>,
) -> Result<BTreeMap<String, f64>> {
    let mut params: BTreeMap<String, f64> =
        defaults.iter().map(|(k, v)| (k.to_string(), *v)).collect();
    for (k, v) in overrides {
        if !params.contains_key(k) {
            return Err(NhkError::InvalidParameters(format!(
                "unknown parameter `{k}` for system `{name}`"
            )));
        }
        if !v.is_finite() {
            return Err(NhkError::InvalidParameters(format!(
                "parameter `{k}` must be finite"
            )));
        }
        params.insert(k.clone(), *v);
    }
    Ok(params)
}

fn require_positive(name: &str, params: &BTreeMap<String, f64>, keys: &[&str]) -> Result<()> {
    for k in keys {
        if params[*k] <= 0.0 {
            return Err(NhkError::InvalidParameters(format!(
                "parameter `{k}` of system `{name}` must be positive (got {})",
                params[*k]
            )));
        }
    }
    Ok(())
}

/// Vertical rolling disk: a disk of mass `m` and radius `R` rolling upright
/// on the plane, coordinates `(φ, x, y, ψ)` (heading, contact point, rolling
/// angle), inertia `J` about the vertical and `I` about the rolling axis.
/// Rolling without slipping ties the contact velocity to the rolling rate.
fn vertical_disk(overrides: &BTreeMap<String, f64>) -> Result<SystemBundle> {
    let params = resolve_params(
        "vrd",
        &[("m", 1.0), ("R", 1.0), ("I", 1.0), ("J", 1.0)],
        overrides,
    )?;
    require_positive("vrd", &params, &["m", "R", "I", "J"])?;
    let (m, r, i, j) = (params["m"], params["R"], params["I"], params["J"]);

    let system = ChartSystem {
        dim: 4,
        coord_names: vec!["phi".into(), "x".into(), "y".into(), "psi".into()],
        periodic: vec![true, false, false, true],
        metric: Arc::new(move |_q: &[f64]| {
            DMatrix::from_diagonal(&DVector::from_vec(vec![j, m, m, i]))
        }),
        potential: Arc::new(|_q: &[f64]| 0.0),
        constraint_forms: vec![
            Arc::new(move |q: &[f64]| DVector::from_vec(vec![0.0, 1.0, 0.0, -r * q[0].cos()])),
            Arc::new(move |q: &[f64]| DVector::from_vec(vec![0.0, 0.0, 1.0, -r * q[0].sin()])),
        ],
        group: GroupAction::new(vec![1, 2], vec!["xi".into(), "eta".into()]),
    };
    let reduced = ReducedSystem::new(&system)?;

    let domain = DomainBox::new(
        vec![-std::f64::consts::PI, -2.0, -2.0, -std::f64::consts::PI],
        vec![std::f64::consts::PI, 2.0, 2.0, std::f64::consts::PI],
    );

    // Quotient coordinates (φ, ψ); the lift distributes the rolling momentum
    // over the contact-point slots.
    let lift: LiftOracle = Arc::new(move |q: &[f64], pbar: &DVector<f64>| {
        let denom = i + m * r * r;
        let coef = m * r * pbar[1] / denom;
        DVector::from_vec(vec![
            pbar[0],
            coef * q[0].cos(),
            coef * q[0].sin(),
            i * pbar[1] / denom,
        ])
    });
    let xi: GyroOracle = Arc::new(|_q: &[f64], _p: &DVector<f64>| DMatrix::zeros(2, 2));
    let hbar: EnergyOracle = Arc::new(move |_q: &[f64], pbar: &DVector<f64>| {
        0.5 * (pbar[0] * pbar[0] / j + pbar[1] * pbar[1] / (i + m * r * r))
    });
    let gamma: GammaOracle = Arc::new(move |q: &[f64], c: &BTreeMap<String, f64>| {
        let gp = c.get("gamma_phi0").copied().unwrap_or(f64::NAN);
        let gs = c.get("gamma_psi0").copied().unwrap_or(f64::NAN);
        DVector::from_vec(vec![
            gp,
            m * r / i * q[0].cos() * gs,
            m * r / i * q[0].sin() * gs,
            gs,
        ])
    });

    let q0 = vec![0.3, 0.0, 0.0, 0.1];
    let p0 = lift(&q0, &DVector::from_vec(vec![0.4, 0.6]));

    Ok(SystemBundle {
        name: "vrd".into(),
        params,
        system,
        reduced,
        domain,
        multiplier: Some(Multiplier::one()),
        second: None,
        oracles: Oracles {
            momentum_lift: lift,
            xi_matrix: xi,
            reduced_hamiltonian: hbar.clone(),
            chaplygin_hamiltonian: Some(hbar),
            second_chaplygin_hamiltonian: None,
            gamma,
        },
        default_state: PhasePoint::new(DVector::from_vec(q0), p0),
        measure_exponent: 1,
    })
}

/// Knife edge sliding on a plane inclined at angle `α`: coordinates
/// `(φ, x, y)` (blade heading and contact point, with `x` pointing down the
/// slope), mass `m`, moment of inertia `J` about the contact normal,
/// gravitational acceleration `g`.  The blade admits no sideways velocity.
fn knife_edge(overrides: &BTreeMap<String, f64>) -> Result<SystemBundle> {
    let params = resolve_params(
        "knife-edge",
        &[
            ("m", 1.0),
            ("J", 1.0),
            ("alpha", std::f64::consts::FRAC_PI_6),
            ("g", 9.81),
        ],
        overrides,
    )?;
    require_positive("knife-edge", &params, &["m", "J", "g"])?;
    let (m, j, alpha, grav) = (params["m"], params["J"], params["alpha"], params["g"]);
    let slope = m * grav * alpha.sin();

    let system = ChartSystem {
        dim: 3,
        coord_names: vec!["phi".into(), "x".into(), "y".into()],
        periodic: vec![true, false, false],
        metric: Arc::new(move |_q: &[f64]| {
            DMatrix::from_diagonal(&DVector::from_vec(vec![j, m, m]))
        }),
        potential: Arc::new(move |q: &[f64]| -slope * q[1]),
        constraint_forms: vec![Arc::new(|q: &[f64]| {
            DVector::from_vec(vec![0.0, q[0].sin(), -q[0].cos()])
        })],
        group: GroupAction::new(vec![2], vec!["eta".into()]),
    };
    let reduced = ReducedSystem::new(&system)?;

    // The blade heading stays away from the constraint-degenerate headings
    // 0 and π/2, where the lift loses rank or the multiplier vanishes.
    let domain = DomainBox::new(
        vec![0.15, -2.0, -2.0],
        vec![std::f64::consts::FRAC_PI_2 - 0.15, 2.0, 2.0],
    );

    // Quotient coordinates (φ, x).
    let lift: LiftOracle = Arc::new(|q: &[f64], pbar: &DVector<f64>| {
        let (s, c) = q[0].sin_cos();
        DVector::from_vec(vec![pbar[0], c * c * pbar[1], s * c * pbar[1]])
    });
    let xi: GyroOracle = Arc::new(|q: &[f64], pbar: &DVector<f64>| {
        let t = pbar[1] * q[0].tan();
        DMatrix::from_row_slice(2, 2, &[0.0, -t, t, 0.0])
    });
    let hbar: EnergyOracle = Arc::new(move |q: &[f64], pbar: &DVector<f64>| {
        let c = q[0].cos();
        0.5 * (pbar[0] * pbar[0] / j + c * c * pbar[1] * pbar[1] / m) - slope * q[1]
    });
    let hbar_c: EnergyOracle = Arc::new(move |q: &[f64], pbar: &DVector<f64>| {
        let c = q[0].cos();
        0.5 * (pbar[0] * pbar[0] / (j * c * c) + pbar[1] * pbar[1] / m) - slope * q[1]
    });
    let gamma: GammaOracle = Arc::new(move |q: &[f64], c: &BTreeMap<String, f64>| {
        let gp = c.get("gamma_phi0").copied().unwrap_or(f64::NAN);
        let e = c.get("energy").copied().unwrap_or(f64::NAN);
        let s = (m * (2.0 * e - gp * gp / j) + 2.0 * m * slope * q[1]).sqrt();
        DVector::from_vec(vec![gp, s * q[0].cos(), s * q[0].sin()])
    });

    let multiplier = Multiplier::new(
        Arc::new(|qbar: &[f64]| qbar[0].cos()),
        Arc::new(|qbar: &[f64]| DVector::from_vec(vec![-qbar[0].sin(), 0.0])),
    );

    let q0 = vec![0.5, 0.2, -0.1];
    let p0 = lift(&q0, &DVector::from_vec(vec![0.3, 0.4]));

    Ok(SystemBundle {
        name: "knife-edge".into(),
        params,
        system,
        reduced,
        domain,
        multiplier: Some(multiplier),
        second: None,
        oracles: Oracles {
            momentum_lift: lift,
            xi_matrix: xi,
            reduced_hamiltonian: hbar,
            chaplygin_hamiltonian: Some(hbar_c),
            second_chaplygin_hamiltonian: None,
            gamma,
        },
        default_state: PhasePoint::new(DVector::from_vec(q0), p0),
        measure_exponent: 1,
    })
}

/// Snakeboard: a rider platform on two steerable wheel axles, coordinates
/// `(θ, x, y, φ, ψ)` (board heading, board center, wheel steering angle,
/// rotor angle).  Total mass `m`, board inertia `J`, rotor inertia `J0`,
/// wheel inertia `J1` each, axle half-distance `r`, with the inertias tied
/// by `J + J0 + 2 J1 = m r²`.  The wheels admit no sideways slipping.
fn snakeboard(overrides: &BTreeMap<String, f64>) -> Result<SystemBundle> {
    let params = resolve_params(
        "snakeboard",
        &[
            ("m", 2.0),
            ("r", 1.0),
            ("J", 0.5),
            ("J0", 1.0),
            ("J1", 0.25),
            ("mu_psi", 0.3),
        ],
        overrides,
    )?;
    require_positive("snakeboard", &params, &["m", "r", "J", "J0", "J1"])?;
    let (m, r, j0, j1) = (params["m"], params["r"], params["J0"], params["J1"]);
    let mu_psi = params["mu_psi"];
    let relation = params["J"] + j0 + 2.0 * j1 - m * r * r;
    if relation.abs() > 1e-9 {
        return Err(NhkError::InvalidParameters(format!(
            "snakeboard inertias must satisfy J + J0 + 2 J1 = m r^2 \
             (violated by {relation:.3e})"
        )));
    }
    let mr2 = m * r * r;

    let system = ChartSystem {
        dim: 5,
        coord_names: vec![
            "theta".into(),
            "x".into(),
            "y".into(),
            "phi".into(),
            "psi".into(),
        ],
        periodic: vec![true, false, false, true, true],
        metric: Arc::new(move |_q: &[f64]| {
            let mut g = DMatrix::zeros(5, 5);
            g[(0, 0)] = mr2;
            g[(0, 4)] = j0;
            g[(4, 0)] = j0;
            g[(1, 1)] = m;
            g[(2, 2)] = m;
            g[(3, 3)] = 2.0 * j1;
            g[(4, 4)] = j0;
            g
        }),
        potential: Arc::new(|_q: &[f64]| 0.0),
        constraint_forms: vec![
            Arc::new(move |q: &[f64]| {
                DVector::from_vec(vec![r / q[3].tan() * q[0].cos(), 1.0, 0.0, 0.0, 0.0])
            }),
            Arc::new(move |q: &[f64]| {
                DVector::from_vec(vec![r / q[3].tan() * q[0].sin(), 0.0, 1.0, 0.0, 0.0])
            }),
        ],
        group: GroupAction::new(vec![1, 2], vec!["xi".into(), "eta".into()]),
    };
    let reduced = ReducedSystem::new(&system)?;

    // Steering angles near 0 or π make the constraint coefficients blow up.
    let domain = DomainBox::new(
        vec![
            -std::f64::consts::PI,
            -2.0,
            -2.0,
            0.3,
            -std::f64::consts::PI,
        ],
        vec![
            std::f64::consts::PI,
            2.0,
            2.0,
            std::f64::consts::PI - 0.3,
            std::f64::consts::PI,
        ],
    );

    // Quotient coordinates (θ, φ, ψ); denominator D = m r² − J0 sin²φ is
    // positive for all φ because J, J1 > 0 force m r² > J0.
    let lift: LiftOracle = Arc::new(move |q: &[f64], pbar: &DVector<f64>| {
        let (st, ct) = q[0].sin_cos();
        let (sp, cp) = q[3].sin_cos();
        let d = mr2 - j0 * sp * sp;
        let rel = pbar[0] - pbar[2];
        DVector::from_vec(vec![
            pbar[2] + (mr2 - j0) * sp * sp / d * rel,
            -m * r * cp * sp * ct / d * rel,
            -m * r * cp * sp * st / d * rel,
            pbar[1],
            pbar[2],
        ])
    });
    let xi: GyroOracle = Arc::new(move |q: &[f64], pbar: &DVector<f64>| {
        let sp = q[1].sin();
        let d = mr2 - j0 * sp * sp;
        let c = -mr2 * (pbar[0] - pbar[2]) / (q[1].tan() * d);
        let mut k = DMatrix::zeros(3, 3);
        k[(0, 1)] = c;
        k[(1, 0)] = -c;
        k
    });
    let hbar: EnergyOracle = Arc::new(move |q: &[f64], pbar: &DVector<f64>| {
        let sp = q[1].sin();
        let d = mr2 - j0 * sp * sp;
        let rel = pbar[0] - pbar[2];
        0.5 * (sp * sp / d * rel * rel + pbar[1] * pbar[1] / (2.0 * j1) + pbar[2] * pbar[2] / j0)
    });
    let h_tilde_c: EnergyOracle = Arc::new(move |q: &[f64], ptilde: &DVector<f64>| {
        let sp = q[1].sin();
        let d = mr2 - j0 * sp * sp;
        0.5 * (ptilde[0] * ptilde[0]
            + d / (2.0 * j1 * sp * sp) * ptilde[1] * ptilde[1]
            + mu_psi * mu_psi / j0)
    });
    let gamma: GammaOracle = Arc::new(move |q: &[f64], c: &BTreeMap<String, f64>| {
        let gp = c.get("gamma_phi0").copied().unwrap_or(f64::NAN);
        let mu = c.get("mu_psi").copied().unwrap_or(f64::NAN);
        let e = c.get("energy").copied().unwrap_or(f64::NAN);
        let big_c = (e - gp * gp / (4.0 * j1) - mu * mu / (2.0 * j0)).sqrt();
        let (st, ct) = q[0].sin_cos();
        let sp = q[3].sin();
        let gphi = ((mr2 - j0 * sp * sp) / 2.0).sqrt();
        let trans = -m * r * big_c * sp / (q[3].tan() * gphi);
        DVector::from_vec(vec![
            mu + (mr2 - j0) * big_c * sp / gphi,
            trans * ct,
            trans * st,
            gp,
            mu,
        ])
    });

    // Second stage: the rotor angle ψ (index 2 of the quotient coordinates)
    // still translates; its multiplier lives on (θ, φ).
    let f_mu = Multiplier::new(
        Arc::new(move |qt: &[f64]| {
            let sp = qt[1].sin();
            sp / (mr2 - j0 * sp * sp).sqrt()
        }),
        Arc::new(move |qt: &[f64]| {
            let (sp, cp) = qt[1].sin_cos();
            let d = mr2 - j0 * sp * sp;
            DVector::from_vec(vec![0.0, mr2 * cp / (d * d.sqrt())])
        }),
    );
    let second = SecondStageConfig {
        k_action: GroupAction::new(vec![2], vec!["psi".into()]),
        mu: DVector::from_vec(vec![mu_psi]),
        multiplier: f_mu,
        tilde_domain: DomainBox::new(
            vec![-std::f64::consts::PI, 0.3],
            vec![std::f64::consts::PI, std::f64::consts::PI - 0.3],
        ),
    };

    let q0 = vec![0.2, 0.0, 0.0, 0.9, 0.4];
    let p0 = lift(&q0, &DVector::from_vec(vec![0.25, 0.08, mu_psi]));

    Ok(SystemBundle {
        name: "snakeboard".into(),
        params,
        system,
        reduced,
        domain,
        multiplier: None,
        second: Some(second),
        oracles: Oracles {
            momentum_lift: lift,
            xi_matrix: xi,
            reduced_hamiltonian: hbar,
            chaplygin_hamiltonian: None,
            second_chaplygin_hamiltonian: Some(h_tilde_c),
            gamma,
        },
        default_state: PhasePoint::new(DVector::from_vec(q0), p0),
        measure_exponent: 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::DiffEngine;
    use crate::sample::Sampler;
    use crate::second_stage::TildeSystem;

    fn defaults() -> BTreeMap<String, f64> {
        BTreeMap::new()
    }

    #[test]
    fn registry_shapes() {
        let vrd = build("vrd", &defaults()).unwrap();
        assert_eq!(vrd.system.dim, 4);
        assert_eq!(vrd.system.num_constraints(), 2);
        assert_eq!(vrd.system.group.dim(), 2);

        let knife = build("knife-edge", &defaults()).unwrap();
        assert_eq!(knife.system.dim, 3);
        assert_eq!(knife.system.num_constraints(), 1);

        let board = build("snakeboard", &defaults()).unwrap();
        assert_eq!(board.system.dim, 5);
        assert_eq!(board.system.num_constraints(), 2);
        assert!(board.second.is_some());

        assert!(matches!(
            build("sleigh", &defaults()),
            Err(NhkError::Config(_))
        ));
    }

    #[test]
    fn parameter_validation() {
        let mut p = defaults();
        p.insert("m".into(), -1.0);
        assert!(matches!(
            build("vrd", &p),
            Err(NhkError::InvalidParameters(_))
        ));

        let mut p = defaults();
        p.insert("radius".into(), 1.0);
        assert!(matches!(
            build("vrd", &p),
            Err(NhkError::InvalidParameters(_))
        ));

        // Breaking the snakeboard inertia relation is rejected.
        let mut p = defaults();
        p.insert("J".into(), 0.6);
        assert!(matches!(
            build("snakeboard", &p),
            Err(NhkError::InvalidParameters(_))
        ));

        // Rescaling consistently is accepted.
        let mut p = defaults();
        p.insert("m".into(), 1.0);
        p.insert("r".into(), 2.0);
        p.insert("J".into(), 2.0);
        p.insert("J0".into(), 1.5);
        p.insert("J1".into(), 0.25);
        build("snakeboard", &p).unwrap();
    }

    #[test]
    fn default_states_lie_on_constraint_surface() {
        for name in SYSTEM_NAMES {
            let b = build(name, &defaults()).unwrap();
            let st = &b.default_state;
            let res = b
                .system
                .m_projection_residual(st.q.as_slice(), &st.p)
                .unwrap();
            assert!(res < 1e-12, "{name}: residual {res:e}");
        }
    }

    #[test]
    fn chaplygin_structure_validates() {
        let mut sampler = Sampler::new(5);
        let engine = DiffEngine::default();
        for name in SYSTEM_NAMES {
            let b = build(name, &defaults()).unwrap();
            let samples: Vec<DVector<f64>> = (0..5)
                .map(|_| DVector::from_vec(sampler.point_in(&b.domain)))
                .collect();
            b.system.validate_chaplygin(&samples, &engine).unwrap();
        }
    }

    #[test]
    fn lift_oracles_match_numeric_lift() {
        let mut sampler = Sampler::new(11);
        for name in SYSTEM_NAMES {
            let b = build(name, &defaults()).unwrap();
            let nbar = b.reduced.reduced_dim();
            for _ in 0..10 {
                let q = sampler.point_in(&b.domain);
                let pbar = sampler.fiber(nbar, 2.0);
                let numeric = b.reduced.hl_m(&q, &pbar).unwrap();
                let closed = (b.oracles.momentum_lift)(&q, &pbar);
                assert!(
                    (numeric - closed).amax() < 1e-9,
                    "{name}: lift mismatch at {q:?}"
                );
            }
        }
    }

    #[test]
    fn gyroscopic_oracles_match_numeric_form() {
        let mut sampler = Sampler::new(12);
        for name in SYSTEM_NAMES {
            let b = build(name, &defaults()).unwrap();
            let nbar = b.reduced.reduced_dim();
            let ridx = b.system.reduced_indices();
            for _ in 0..10 {
                let q = sampler.point_in(&b.domain);
                let qbar: Vec<f64> = ridx.iter().map(|&i| q[i]).collect();
                let pbar = sampler.fiber(nbar, 2.0);
                let numeric = b.reduced.xi_matrix(&qbar, &pbar).unwrap();
                let closed = (b.oracles.xi_matrix)(&qbar, &pbar);
                assert!(
                    (numeric - closed).amax() < 1e-9,
                    "{name}: gyroscopic form mismatch at {qbar:?}"
                );
            }
        }
    }

    #[test]
    fn energy_oracles_match_numeric_hamiltonians() {
        let mut sampler = Sampler::new(13);
        for name in SYSTEM_NAMES {
            let b = build(name, &defaults()).unwrap();
            let nbar = b.reduced.reduced_dim();
            let ridx = b.system.reduced_indices();
            for _ in 0..10 {
                let q = sampler.point_in(&b.domain);
                let qbar: Vec<f64> = ridx.iter().map(|&i| q[i]).collect();
                let pbar = sampler.fiber(nbar, 2.0);
                let numeric = b.reduced.reduced_hamiltonian(&qbar, &pbar).unwrap();
                let closed = (b.oracles.reduced_hamiltonian)(&qbar, &pbar);
                assert!((numeric - closed).abs() < 1e-9, "{name}: energy mismatch");
            }
        }
    }

    #[test]
    fn knife_rescaled_oracle_matches() {
        let b = build("knife-edge", &defaults()).unwrap();
        let f = b.multiplier.as_ref().unwrap();
        let oracle = b.oracles.chaplygin_hamiltonian.as_ref().unwrap();
        let mut sampler = Sampler::new(14);
        let rbox = b.reduced_domain();
        for _ in 0..10 {
            let qbar = sampler.point_in(&rbox);
            let pbar = sampler.fiber(2, 2.0);
            let numeric =
                crate::hamiltonization::chaplygin_hamiltonian(&b.reduced, f, &qbar, &pbar).unwrap();
            assert!((numeric - oracle(&qbar, &pbar)).abs() < 1e-9);
        }
    }

    #[test]
    fn snakeboard_second_oracle_matches() {
        let b = build("snakeboard", &defaults()).unwrap();
        let cfg = b.second.as_ref().unwrap();
        let tsys = TildeSystem::from_config(b.reduced.clone(), cfg).unwrap();
        let oracle = b.oracles.second_chaplygin_hamiltonian.as_ref().unwrap();
        let mut sampler = Sampler::new(15);
        for _ in 0..10 {
            let qt = sampler.point_in(&cfg.tilde_domain);
            let pt = sampler.fiber(2, 2.0);
            let numeric = tsys.second_chaplygin_hamiltonian(&qt, &pt).unwrap();
            assert!((numeric - oracle(&qt, &pt)).abs() < 1e-9);
        }
    }

    #[test]
    fn parameter_overrides_flow_through() {
        let mut p = defaults();
        p.insert("alpha".into(), 0.0);
        let flat = build("knife-edge", &p).unwrap();
        assert_eq!((flat.system.potential)(&[0.4, 1.3, -0.2]), 0.0);

        let mut p = defaults();
        p.insert("R".into(), 2.0);
        let big = build("vrd", &p).unwrap();
        let q = [0.0, 0.0, 0.0, 0.0];
        let pbar = DVector::from_vec(vec![0.0, 1.0]);
        // Lift of pure rolling momentum: x-slot gets m R p̄_ψ / (I + m R²).
        let lifted = (big.oracles.momentum_lift)(&q, &pbar);
        assert!((lifted[1] - 2.0 / 5.0).abs() < 1e-15);
    }
}
