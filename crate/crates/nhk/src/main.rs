//! Command-line interface: simulate trajectories, scan verification suites,
//! solve and transfer exact solutions, and emit aggregate reports.
//!
//! Artifacts are written into `--out DIR` when given (plus a manifest), or
//! printed to stdout.  All sampling is seeded, so identical invocations
//! produce byte-identical output.  Exit codes: 0 all checks pass, 1 a check
//! failed or a numerical operation broke down, 2 configuration error.

use std::collections::BTreeMap;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use serde::Serialize;

use nhk::diff::DiffEngine;
use nhk::dynamics::{self, IntegratorConfig, RunManifest, Scheme};
use nhk::error::{NhkError, Result};
use nhk::hamiltonization::integrate_hamiltonized;
use nhk::reduction::{integrate_reduced, ReducedTrajectory};
use nhk::report::{self, CheckLine, MultiplierMode, VerifyOptions};
use nhk::sample::Sampler;
use nhk::sysdef::{self, FileConfig, LoadedSystem, SystemSpec};
use nhk::systems::SystemBundle;
use nhk::{ChartSystem, PhasePoint};

#[derive(Parser)]
#[command(
    name = "nhk",
    version,
    about = "Nonholonomic mechanics kit: constrained dynamics, symmetry reduction, \
             Hamiltonization, and exact-solution transfer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Built-in system name: vrd, knife-edge, or snakeboard.
    #[arg(long)]
    system: Option<String>,

    /// Parameter override, repeatable: --param m=2.0
    #[arg(long = "param", value_name = "KEY=VALUE")]
    params: Vec<String>,

    /// JSON run/system document (may define a custom system).
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Directory for artifacts; stdout when omitted.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Seed for all sample grids.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate a trajectory on the full chart, the quotient, or the
    /// Hamiltonized quotient, exporting CSV diagnostics.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
        /// Integration horizon.
        #[arg(long)]
        t_end: Option<f64>,
        /// Step size (initial step for the adaptive scheme).
        #[arg(long)]
        dt: Option<f64>,
        /// Stepper: rk4 or rk45.
        #[arg(long)]
        scheme: Option<String>,
        /// Re-project momenta onto the constraint momentum space per step.
        #[arg(long)]
        projection: bool,
        /// Phase space to integrate: full, reduced, or hamiltonized.
        #[arg(long, default_value = "full")]
        space: String,
        /// Initial position, comma-separated (defaults to the built-in
        /// system's reference state).
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        q0: Option<Vec<f64>>,
        /// Initial momentum, comma-separated.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        p0: Option<Vec<f64>>,
    },
    /// Scan every pointwise condition and closed-form cross-check on a
    /// seeded grid.
    Verify {
        #[command(flatten)]
        common: CommonArgs,
        /// Multiplier under test: builtin, or one (negative control).
        #[arg(long, default_value = "builtin")]
        multiplier: String,
        /// Number of base points in the grid.
        #[arg(long)]
        domain_points: Option<usize>,
        /// Momentum/direction draws per base point.
        #[arg(long)]
        fiber_draws: Option<usize>,
    },
    /// Solve the separable rescaled equation, transfer the solution to the
    /// full chart, and validate the resulting one-form.
    Hj {
        #[command(flatten)]
        common: CommonArgs,
        /// Energy level of the solution.
        #[arg(long, allow_hyphen_values = true)]
        energy: f64,
        /// First separation constant.
        #[arg(long, allow_hyphen_values = true)]
        gamma_phi0: Option<f64>,
        /// Second separation constant (vertical rolling disk).
        #[arg(long, allow_hyphen_values = true)]
        gamma_psi0: Option<f64>,
        /// Residual-symmetry momentum level (snakeboard).
        #[arg(long, allow_hyphen_values = true)]
        mu_psi: Option<f64>,
        /// Extra named constant, repeatable: --constant sign_x=-1
        #[arg(long = "constant", value_name = "KEY=VALUE")]
        constants: Vec<String>,
        /// Sample count for the validation grids.
        #[arg(long, default_value_t = 200)]
        samples: usize,
        /// Multiplier used in the transfer: builtin or one.
        #[arg(long, default_value = "builtin")]
        multiplier: String,
        /// If positive, also export this many sampled values of the
        /// one-form as CSV.
        #[arg(long, default_value_t = 0)]
        gamma_samples: usize,
    },
    /// Aggregate verification: condition scans, conservation along long
    /// runs, the default exact solution, and flow closure.
    Report {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        domain_points: Option<usize>,
        #[arg(long)]
        fiber_draws: Option<usize>,
    },
}

fn main() {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => std::process::exit(code),
        // A consumer closing the pipe early (`nhk simulate | head`) is not an
        // error worth reporting.
        Err(NhkError::Io(e)) if e.kind() == std::io::ErrorKind::BrokenPipe => std::process::exit(0),
        Err(err) => {
            let payload = serde_json::json!({
                "error": err.to_string(),
                "exit_code": err.exit_code(),
            });
            eprintln!(
                "{}",
                serde_json::to_string_pretty(&payload).expect("error payload serializes")
            );
            std::process::exit(err.exit_code());
        }
    }
}

/// Everything resolved from flags and the optional config document.
struct Resolved {
    loaded: LoadedSystem,
    params: BTreeMap<String, f64>,
    seed: u64,
    out: Option<PathBuf>,
    file: FileConfig,
}

fn parse_key_value(raw: &str, what: &str) -> Result<(String, f64)> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| NhkError::Config(format!("{what} `{raw}` is not of the form KEY=VALUE")))?;
    let parsed: f64 = value
        .parse()
        .map_err(|_| NhkError::Config(format!("{what} `{raw}` has a non-numeric value")))?;
    Ok((key.to_string(), parsed))
}

fn resolve(common: &CommonArgs) -> Result<Resolved> {
    let file = match &common.config {
        Some(path) => sysdef::load_config(path)?,
        None => FileConfig::default(),
    };
    let mut params = file.params.clone();
    for raw in &common.params {
        let (k, v) = parse_key_value(raw, "parameter override")?;
        params.insert(k, v);
    }
    let spec = match (&common.system, &file.system) {
        (Some(name), _) => SystemSpec::Name(name.clone()),
        (None, Some(spec)) => spec.clone(),
        (None, None) => {
            return Err(NhkError::Config(
                "no system given (use --system or a config document)".to_string(),
            ))
        }
    };
    let loaded = sysdef::build_system(&spec, &params)?;
    Ok(Resolved {
        loaded,
        params,
        seed: common.seed.or(file.seed).unwrap_or(17),
        out: common
            .out
            .clone()
            .or_else(|| file.out.as_ref().map(PathBuf::from)),
        file,
    })
}

fn require_builtin<'a>(loaded: &'a LoadedSystem, what: &str) -> Result<&'a SystemBundle> {
    match loaded {
        LoadedSystem::Builtin(bundle) => Ok(bundle),
        LoadedSystem::Custom(custom) => Err(NhkError::Config(format!(
            "{what} requires a built-in system with closed-form references; `{}` is custom",
            custom.name
        ))),
    }
}

fn emit_json<T: Serialize>(out: &Option<PathBuf>, filename: &str, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join(filename), text)?;
        }
        None => {
            use std::io::Write;
            std::io::stdout().lock().write_all(text.as_bytes())?;
        }
    }
    Ok(())
}

fn emit_manifest(resolved: &Resolved, command: serde_json::Value) -> Result<()> {
    if resolved.out.is_none() {
        return Ok(());
    }
    let manifest = RunManifest::new(resolved.loaded.name(), resolved.params.clone(), command);
    emit_json(&resolved.out, "manifest.json", &manifest)
}

fn integrator_config(
    file: &FileConfig,
    t_end: Option<f64>,
    dt: Option<f64>,
    scheme: Option<&str>,
    projection: bool,
) -> Result<IntegratorConfig> {
    let mut cfg = IntegratorConfig::default();
    if let Some(spec) = &file.integrator {
        if let Some(s) = spec.scheme {
            cfg.scheme = s;
        }
        if let Some(v) = spec.dt {
            cfg.dt = v;
        }
        if let Some(v) = spec.t_end {
            cfg.t_end = v;
        }
        if let Some(v) = spec.projection {
            cfg.projection = v;
        }
    }
    if let Some(v) = t_end {
        cfg.t_end = v;
    }
    if let Some(v) = dt {
        cfg.dt = v;
    }
    if let Some(name) = scheme {
        cfg.scheme = match name {
            "rk4" => Scheme::Rk4,
            "rk45" => Scheme::Rk45,
            other => {
                return Err(NhkError::Config(format!(
                    "unknown scheme `{other}` (expected rk4 or rk45)"
                )))
            }
        };
    }
    if projection {
        cfg.projection = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn grid_options(
    file: &FileConfig,
    seed: u64,
    domain_points: Option<usize>,
    fiber_draws: Option<usize>,
    multiplier: MultiplierMode,
) -> VerifyOptions {
    let defaults = VerifyOptions::default();
    let file_grid = file.grid.as_ref();
    VerifyOptions {
        domain_points: domain_points
            .or(file_grid.and_then(|g| g.domain_points))
            .unwrap_or(defaults.domain_points),
        fiber_draws: fiber_draws
            .or(file_grid.and_then(|g| g.fiber_draws))
            .unwrap_or(defaults.fiber_draws),
        seed,
        multiplier,
    }
}

fn parse_vector(values: Option<Vec<f64>>, dim: usize, what: &str) -> Result<Option<DVector<f64>>> {
    match values {
        None => Ok(None),
        Some(v) if v.len() == dim => Ok(Some(DVector::from_vec(v))),
        Some(v) => Err(NhkError::Config(format!(
            "{what} needs {dim} components, got {}",
            v.len()
        ))),
    }
}

/// CSV export for quotient-space trajectories: `t, coords…, momenta…, H`.
fn write_reduced_csv<W: std::io::Write>(
    writer: W,
    traj: &ReducedTrajectory,
    coord_names: &[String],
) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = vec!["t".into()];
    header.extend(coord_names.iter().cloned());
    header.extend(coord_names.iter().map(|c| format!("p_{c}")));
    header.push("H".into());
    wtr.write_record(&header)?;
    for i in 0..traj.times.len() {
        let (q, p) = &traj.states[i];
        let mut row: Vec<String> = vec![format!("{}", traj.times[i])];
        row.extend(q.iter().map(|x| format!("{x}")));
        row.extend(p.iter().map(|x| format!("{x}")));
        row.push(format!("{}", traj.energies[i]));
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

fn emit_csv(
    out: &Option<PathBuf>,
    filename: &str,
    write: impl Fn(&mut dyn std::io::Write) -> Result<()>,
) -> Result<()> {
    match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let mut file = std::fs::File::create(dir.join(filename))?;
            write(&mut file)
        }
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            write(&mut lock)
        }
    }
}

fn all_pass(lines: &[CheckLine]) -> bool {
    lines.iter().all(|l| l.pass)
}

#[allow(clippy::too_many_arguments)]
fn run_simulate(
    common: CommonArgs,
    t_end: Option<f64>,
    dt: Option<f64>,
    scheme: Option<String>,
    projection: bool,
    space: String,
    q0: Option<Vec<f64>>,
    p0: Option<Vec<f64>>,
) -> Result<i32> {
    let resolved = resolve(&common)?;
    let cfg = integrator_config(&resolved.file, t_end, dt, scheme.as_deref(), projection)?;
    let engine = DiffEngine::default();
    let system = resolved.loaded.system();
    let reduced = resolved.loaded.reduced();

    let default_state = match &resolved.loaded {
        LoadedSystem::Builtin(b) => Some(&b.default_state),
        LoadedSystem::Custom(_) => None,
    };

    match space.as_str() {
        "full" => {
            let n = system.dim;
            let q = parse_vector(q0, n, "--q0")?
                .or_else(|| default_state.map(|s| s.q.clone()))
                .ok_or_else(|| {
                    NhkError::Config("custom systems need an explicit --q0".to_string())
                })?;
            let p = parse_vector(p0, n, "--p0")?
                .or_else(|| default_state.map(|s| s.p.clone()))
                .unwrap_or_else(|| DVector::zeros(n));
            let state0 = PhasePoint::new(q, p);
            let traj = dynamics::integrate(system, &state0, &cfg, &engine)?;
            let monitor = dynamics::monitor(&traj, system);
            emit_csv(&resolved.out, "trajectory.csv", |w| {
                dynamics::write_trajectory_csv(w, &traj, system)
            })?;
            emit_manifest(
                &resolved,
                serde_json::json!({
                    "command": "simulate",
                    "space": space,
                    "integrator": cfg,
                    "initial_q": state0.q.as_slice(),
                    "initial_p": state0.p.as_slice(),
                    "monitor": monitor,
                    "seed": resolved.seed,
                }),
            )?;
            Ok(0)
        }
        "reduced" | "hamiltonized" => {
            let nbar = reduced.reduced_dim();
            let (qbar, pbar) = match (
                parse_vector(q0, nbar, "--q0")?,
                parse_vector(p0, nbar, "--p0")?,
            ) {
                (Some(q), Some(p)) => (q, p),
                (q_opt, p_opt) => {
                    let state = default_state.ok_or_else(|| {
                        NhkError::Config("custom systems need explicit --q0 and --p0".to_string())
                    })?;
                    let qd = DVector::from_vec(reduced.project_q(state.q.as_slice()));
                    let pd = reduced.project_p(state.q.as_slice(), &state.p)?;
                    (q_opt.unwrap_or(qd), p_opt.unwrap_or(pd))
                }
            };
            let traj = if space == "reduced" {
                integrate_reduced(reduced, qbar.as_slice(), &pbar, cfg.dt, cfg.t_end, &engine)?
            } else {
                let f = resolved.loaded.multiplier().ok_or_else(|| {
                    NhkError::Config(format!(
                        "system `{}` declares no multiplier to Hamiltonize with",
                        resolved.loaded.name()
                    ))
                })?;
                integrate_hamiltonized(
                    reduced,
                    f,
                    qbar.as_slice(),
                    &pbar,
                    cfg.dt,
                    cfg.t_end,
                    &engine,
                )?
            };
            emit_csv(&resolved.out, "trajectory.csv", |w| {
                write_reduced_csv(w, &traj, &reduced.reduced_coords)
            })?;
            emit_manifest(
                &resolved,
                serde_json::json!({
                    "command": "simulate",
                    "space": space,
                    "integrator": cfg,
                    "initial_q": qbar.as_slice(),
                    "initial_p": pbar.as_slice(),
                    "seed": resolved.seed,
                }),
            )?;
            Ok(0)
        }
        other => Err(NhkError::Config(format!(
            "unknown space `{other}` (expected full, reduced, or hamiltonized)"
        ))),
    }
}

fn run_verify(
    common: CommonArgs,
    multiplier: String,
    domain_points: Option<usize>,
    fiber_draws: Option<usize>,
) -> Result<i32> {
    let resolved = resolve(&common)?;
    let mode: MultiplierMode = multiplier.parse()?;
    let opts = grid_options(
        &resolved.file,
        resolved.seed,
        domain_points,
        fiber_draws,
        mode,
    );
    let reports = match &resolved.loaded {
        LoadedSystem::Builtin(bundle) => report::verify_suite(bundle, &opts)?,
        LoadedSystem::Custom(custom) => report::custom_suite(custom, &opts)?,
    };
    emit_json(&resolved.out, "verify.json", &reports)?;
    emit_manifest(
        &resolved,
        serde_json::json!({
            "command": "verify",
            "multiplier": multiplier,
            "domain_points": opts.domain_points,
            "fiber_draws": opts.fiber_draws,
            "seed": opts.seed,
        }),
    )?;
    Ok(if reports.iter().all(|r| r.pass) { 0 } else { 1 })
}

#[allow(clippy::too_many_arguments)]
fn run_hj(
    common: CommonArgs,
    energy: f64,
    gamma_phi0: Option<f64>,
    gamma_psi0: Option<f64>,
    mu_psi: Option<f64>,
    extra: Vec<String>,
    samples: usize,
    multiplier: String,
    gamma_samples: usize,
) -> Result<i32> {
    let resolved = resolve(&common)?;
    let bundle = require_builtin(&resolved.loaded, "exact-solution transfer")?;
    let mode: MultiplierMode = multiplier.parse()?;

    let mut constants = BTreeMap::new();
    if let Some(v) = gamma_phi0 {
        constants.insert("gamma_phi0".to_string(), v);
    }
    if let Some(v) = gamma_psi0 {
        constants.insert("gamma_psi0".to_string(), v);
    }
    if let Some(v) = mu_psi {
        constants.insert("mu_psi".to_string(), v);
    }
    for raw in &extra {
        let (k, v) = parse_key_value(raw, "constant")?;
        constants.insert(k, v);
    }

    let outcome = report::hj_checks(bundle, energy, &constants, samples, resolved.seed, mode)?;
    let pass = all_pass(&outcome.checks);
    emit_json(
        &resolved.out,
        "hj.json",
        &serde_json::json!({
            "system": bundle.name,
            "energy": outcome.energy,
            "constants": outcome.constants,
            "checks": outcome.checks,
            "pass": pass,
        }),
    )?;

    if gamma_samples > 0 {
        let gamma = &outcome.gamma;
        emit_csv(&resolved.out, "gamma.csv", |w| {
            write_gamma_csv(
                w,
                bundle,
                gamma,
                &mut Sampler::new(resolved.seed),
                gamma_samples,
            )
        })?;
    }

    emit_manifest(
        &resolved,
        serde_json::json!({
            "command": "hj",
            "energy": energy,
            "constants": constants,
            "samples": samples,
            "multiplier": multiplier,
            "gamma_samples": gamma_samples,
            "seed": resolved.seed,
        }),
    )?;
    Ok(if pass { 0 } else { 1 })
}

fn write_gamma_csv(
    writer: &mut dyn std::io::Write,
    bundle: &SystemBundle,
    gamma: &nhk::hamilton_jacobi::OneFormField,
    sampler: &mut Sampler,
    count: usize,
) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let system: &ChartSystem = &bundle.system;
    let mut header: Vec<String> = system.coord_names.clone();
    header.extend(system.coord_names.iter().map(|c| format!("gamma_{c}")));
    wtr.write_record(&header)?;
    for _ in 0..count {
        let q = sampler.point_in(&gamma.domain);
        let sigma = gamma.at(&q);
        let mut row: Vec<String> = q.iter().map(|x| format!("{x}")).collect();
        row.extend(sigma.iter().map(|x| format!("{x}")));
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

fn run_report(
    common: CommonArgs,
    domain_points: Option<usize>,
    fiber_draws: Option<usize>,
) -> Result<i32> {
    let resolved = resolve(&common)?;
    let bundle = require_builtin(&resolved.loaded, "the aggregate report")?;
    let opts = grid_options(
        &resolved.file,
        resolved.seed,
        domain_points,
        fiber_draws,
        MultiplierMode::Builtin,
    );
    let lines = report::aggregate_report(bundle, &opts)?;
    let pass = all_pass(&lines);
    emit_json(
        &resolved.out,
        "report.json",
        &serde_json::json!({
            "system": bundle.name,
            "parameters": bundle.params,
            "checks": lines,
            "pass": pass,
        }),
    )?;
    emit_manifest(
        &resolved,
        serde_json::json!({
            "command": "report",
            "domain_points": opts.domain_points,
            "fiber_draws": opts.fiber_draws,
            "seed": opts.seed,
        }),
    )?;
    Ok(if pass { 0 } else { 1 })
}

fn run(command: Command) -> Result<i32> {
    match command {
        Command::Simulate {
            common,
            t_end,
            dt,
            scheme,
            projection,
            space,
            q0,
            p0,
        } => run_simulate(common, t_end, dt, scheme, projection, space, q0, p0),
        Command::Verify {
            common,
            multiplier,
            domain_points,
            fiber_draws,
        } => run_verify(common, multiplier, domain_points, fiber_draws),
        Command::Hj {
            common,
            energy,
            gamma_phi0,
            gamma_psi0,
            mu_psi,
            constants,
            samples,
            multiplier,
            gamma_samples,
        } => run_hj(
            common,
            energy,
            gamma_phi0,
            gamma_psi0,
            mu_psi,
            constants,
            samples,
            multiplier,
            gamma_samples,
        ),
        Command::Report {
            common,
            domain_points,
            fiber_draws,
        } => run_report(common, domain_points, fiber_draws),
    }
}
