//! JSON run/system documents: a built-in system referenced by name with
//! parameter overrides, or a full inline definition whose metric, potential,
//! constraint coefficients, and multipliers are trig-polynomial coefficient
//! tables (see [`crate::expr`]).

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::chart::{ChartSystem, DomainBox, GroupAction};
use crate::diff::DiffEngine;
use crate::dynamics::Scheme;
use crate::error::{NhkError, Result};
use crate::expr::{CompiledExpr, Expr};
use crate::hamiltonization::Multiplier;
use crate::reduction::ReducedSystem;
use crate::sample::Sampler;
use crate::second_stage::SecondStageConfig;
use crate::systems::{self, SystemBundle};

/// Top-level document accepted by `--config`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    /// Built-in name or inline definition.
    #[serde(default)]
    pub system: Option<SystemSpec>,
    /// Parameter overrides for a built-in system.
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub out: Option<String>,
    #[serde(default)]
    pub grid: Option<GridConfig>,
    #[serde(default)]
    pub integrator: Option<IntegratorSpec>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default)]
    pub domain_points: Option<usize>,
    #[serde(default)]
    pub fiber_draws: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorSpec {
    #[serde(default)]
    pub scheme: Option<Scheme>,
    #[serde(default)]
    pub dt: Option<f64>,
    #[serde(default)]
    pub t_end: Option<f64>,
    #[serde(default)]
    pub projection: Option<bool>,
}

/// Either a registry name or an inline definition.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SystemSpec {
    Name(String),
    Inline(Box<SystemDef>),
}

/// An inline system definition.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemDef {
    #[serde(default)]
    pub name: Option<String>,
    pub dim: usize,
    pub coords: Vec<String>,
    #[serde(default)]
    pub periodic: Option<Vec<bool>>,
    pub metric: MetricSpec,
    #[serde(default)]
    pub potential: Option<Expr>,
    /// Constraint one-forms, one coefficient row (length `dim`) per form.
    #[serde(default)]
    pub constraints: Vec<Vec<Expr>>,
    pub group: GroupSpec,
    pub domain: BoxSpec,
    /// First-stage multiplier, an expression in the reduced coordinates.
    #[serde(default)]
    pub multiplier: Option<Expr>,
    #[serde(default)]
    pub second_stage: Option<SecondStageSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MetricSpec {
    /// `"identity"` is the only named metric.
    Named(String),
    Diag {
        diag: Vec<Expr>,
    },
    Entries {
        entries: Vec<MetricEntry>,
    },
}

/// One symmetric metric entry `g_ij`; the mirror entry is implied.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricEntry {
    pub i: String,
    pub j: String,
    pub expr: Expr,
}

/// Translations along named coordinates.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupSpec {
    pub translated: Vec<String>,
    #[serde(default)]
    pub labels: Option<Vec<String>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// Residual symmetry on the quotient: names refer to reduced coordinates;
/// the multiplier is an expression in the double-quotient coordinates.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SecondStageSpec {
    pub translated: Vec<String>,
    #[serde(default)]
    pub labels: Option<Vec<String>>,
    pub mu: Vec<f64>,
    pub multiplier: Expr,
    pub domain: BoxSpec,
}

/// A system assembled from an inline definition: everything the generic
/// pipeline needs, without closed-form reference functions.
#[derive(Debug)]
pub struct CustomBundle {
    pub name: String,
    pub system: ChartSystem,
    pub reduced: ReducedSystem,
    pub domain: DomainBox,
    pub multiplier: Option<Multiplier>,
    pub second: Option<SecondStageConfig>,
}

impl CustomBundle {
    pub fn reduced_domain(&self) -> DomainBox {
        self.domain.select(&self.system.reduced_indices())
    }
}

/// A loaded system: a registry bundle with oracles, or a custom one without.
#[derive(Debug)]
pub enum LoadedSystem {
    Builtin(SystemBundle),
    Custom(CustomBundle),
}

impl LoadedSystem {
    pub fn name(&self) -> &str {
        match self {
            LoadedSystem::Builtin(b) => &b.name,
            LoadedSystem::Custom(c) => &c.name,
        }
    }

    pub fn system(&self) -> &ChartSystem {
        match self {
            LoadedSystem::Builtin(b) => &b.system,
            LoadedSystem::Custom(c) => &c.system,
        }
    }

    pub fn reduced(&self) -> &ReducedSystem {
        match self {
            LoadedSystem::Builtin(b) => &b.reduced,
            LoadedSystem::Custom(c) => &c.reduced,
        }
    }

    pub fn domain(&self) -> &DomainBox {
        match self {
            LoadedSystem::Builtin(b) => &b.domain,
            LoadedSystem::Custom(c) => &c.domain,
        }
    }

    pub fn multiplier(&self) -> Option<&Multiplier> {
        match self {
            LoadedSystem::Builtin(b) => b.multiplier.as_ref(),
            LoadedSystem::Custom(c) => c.multiplier.as_ref(),
        }
    }

    pub fn second(&self) -> Option<&SecondStageConfig> {
        match self {
            LoadedSystem::Builtin(b) => b.second.as_ref(),
            LoadedSystem::Custom(c) => c.second.as_ref(),
        }
    }
}

pub fn parse_config(text: &str) -> Result<FileConfig> {
    Ok(serde_json::from_str(text)?)
}

pub fn load_config(path: &Path) -> Result<FileConfig> {
    parse_config(&std::fs::read_to_string(path)?)
}

/// Resolve a system spec: registry lookup for names, assembly for inline
/// definitions.  Parameter overrides apply to registry systems only.
pub fn build_system(spec: &SystemSpec, params: &BTreeMap<String, f64>) -> Result<LoadedSystem> {
    match spec {
        SystemSpec::Name(name) => Ok(LoadedSystem::Builtin(systems::build(name, params)?)),
        SystemSpec::Inline(def) => {
            if !params.is_empty() {
                return Err(NhkError::Config(
                    "parameter overrides apply to built-in systems only".to_string(),
                ));
            }
            Ok(LoadedSystem::Custom(build_custom(def)?))
        }
    }
}

fn resolve_names(names: &[String], pool: &[String], what: &str) -> Result<Vec<usize>> {
    let mut indices = Vec::with_capacity(names.len());
    for name in names {
        let i = pool
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| NhkError::Config(format!("unknown {what} coordinate `{name}`")))?;
        if indices.contains(&i) {
            return Err(NhkError::Config(format!(
                "{what} coordinate `{name}` repeated"
            )));
        }
        indices.push(i);
    }
    Ok(indices)
}

fn build_box(spec: &BoxSpec, dim: usize, what: &str) -> Result<DomainBox> {
    if spec.lower.len() != dim || spec.upper.len() != dim {
        return Err(NhkError::Config(format!(
            "{what} box needs {dim} bounds per side, got {} / {}",
            spec.lower.len(),
            spec.upper.len()
        )));
    }
    if spec
        .lower
        .iter()
        .zip(&spec.upper)
        .any(|(lo, hi)| lo > hi || lo.is_nan() || hi.is_nan())
    {
        return Err(NhkError::Config(format!("{what} box has lower > upper")));
    }
    Ok(DomainBox::new(spec.lower.clone(), spec.upper.clone()))
}

fn compile_metric(spec: &MetricSpec, coords: &[String]) -> Result<crate::chart::MatrixFn> {
    let n = coords.len();
    match spec {
        MetricSpec::Named(name) => {
            if name != "identity" {
                return Err(NhkError::Config(format!(
                    "unknown metric `{name}` (expected identity or a coefficient table)"
                )));
            }
            Ok(Arc::new(move |_q: &[f64]| DMatrix::identity(n, n)))
        }
        MetricSpec::Diag { diag } => {
            if diag.len() != n {
                return Err(NhkError::Config(format!(
                    "diagonal metric needs {n} entries, got {}",
                    diag.len()
                )));
            }
            let compiled = diag
                .iter()
                .map(|e| CompiledExpr::compile(e, coords))
                .collect::<Result<Vec<_>>>()?;
            Ok(Arc::new(move |q: &[f64]| {
                DMatrix::from_diagonal(&DVector::from_iterator(
                    compiled.len(),
                    compiled.iter().map(|e| e.eval(q)),
                ))
            }))
        }
        MetricSpec::Entries { entries } => {
            let mut compiled: Vec<(usize, usize, CompiledExpr)> = Vec::new();
            for entry in entries {
                let i = resolve_names(std::slice::from_ref(&entry.i), coords, "metric")?[0];
                let j = resolve_names(std::slice::from_ref(&entry.j), coords, "metric")?[0];
                let (i, j) = (i.min(j), i.max(j));
                if compiled.iter().any(|&(a, b, _)| (a, b) == (i, j)) {
                    return Err(NhkError::Config(format!(
                        "metric entry ({}, {}) given twice",
                        entry.i, entry.j
                    )));
                }
                compiled.push((i, j, CompiledExpr::compile(&entry.expr, coords)?));
            }
            Ok(Arc::new(move |q: &[f64]| {
                let mut g = DMatrix::zeros(n, n);
                for (i, j, e) in &compiled {
                    let v = e.eval(q);
                    g[(*i, *j)] = v;
                    g[(*j, *i)] = v;
                }
                g
            }))
        }
    }
}

fn build_custom(def: &SystemDef) -> Result<CustomBundle> {
    let n = def.dim;
    if n == 0 {
        return Err(NhkError::Config(
            "system dimension must be positive".to_string(),
        ));
    }
    if def.coords.len() != n {
        return Err(NhkError::Config(format!(
            "expected {n} coordinate names, got {}",
            def.coords.len()
        )));
    }
    for (k, c) in def.coords.iter().enumerate() {
        if def.coords[..k].contains(c) {
            return Err(NhkError::Config(format!("coordinate `{c}` repeated")));
        }
    }
    let periodic = match &def.periodic {
        None => vec![false; n],
        Some(p) if p.len() == n => p.clone(),
        Some(p) => {
            return Err(NhkError::Config(format!(
                "periodic flags must have length {n}, got {}",
                p.len()
            )))
        }
    };

    let metric = compile_metric(&def.metric, &def.coords)?;
    let potential: crate::chart::ScalarFn = match &def.potential {
        None => Arc::new(|_q: &[f64]| 0.0),
        Some(expr) => {
            let e = CompiledExpr::compile(expr, &def.coords)?;
            Arc::new(move |q: &[f64]| e.eval(q))
        }
    };

    let mut constraint_forms: Vec<crate::chart::OneFormFn> = Vec::new();
    for (s, row) in def.constraints.iter().enumerate() {
        if row.len() != n {
            return Err(NhkError::Config(format!(
                "constraint {s} needs {n} coefficients, got {}",
                row.len()
            )));
        }
        let compiled = row
            .iter()
            .map(|e| CompiledExpr::compile(e, &def.coords))
            .collect::<Result<Vec<_>>>()?;
        constraint_forms.push(Arc::new(move |q: &[f64]| {
            DVector::from_iterator(compiled.len(), compiled.iter().map(|e| e.eval(q)))
        }));
    }

    let translated = resolve_names(&def.group.translated, &def.coords, "translated")?;
    let labels = match &def.group.labels {
        Some(l) if l.len() == translated.len() => l.clone(),
        Some(_) => {
            return Err(NhkError::Config(
                "group labels must match the translated coordinate count".to_string(),
            ))
        }
        None => def.group.translated.clone(),
    };

    let system = ChartSystem {
        dim: n,
        coord_names: def.coords.clone(),
        periodic,
        metric,
        potential,
        constraint_forms,
        group: GroupAction::new(translated, labels),
    };
    let domain = build_box(&def.domain, n, "domain")?;

    // Establish the structural requirements before handing the system out.
    let mut sampler = Sampler::new(11);
    let samples: Vec<DVector<f64>> = (0..5)
        .map(|_| DVector::from_vec(sampler.point_in(&domain)))
        .collect();
    system.validate_chaplygin(&samples, &DiffEngine::default())?;

    let reduced = ReducedSystem::new(&system)?;
    let reduced_coords = reduced.reduced_coords.clone();

    let multiplier = match &def.multiplier {
        None => None,
        Some(expr) => {
            let e = CompiledExpr::compile(expr, &reduced_coords)?;
            Some(Multiplier::from_value(
                Arc::new(move |q: &[f64]| e.eval(q)),
                DiffEngine::default(),
            ))
        }
    };

    let second = match &def.second_stage {
        None => None,
        Some(spec) => {
            let k_translated = resolve_names(&spec.translated, &reduced_coords, "residual")?;
            let k_labels = match &spec.labels {
                Some(l) if l.len() == k_translated.len() => l.clone(),
                Some(_) => {
                    return Err(NhkError::Config(
                        "second-stage labels must match its translation count".to_string(),
                    ))
                }
                None => spec.translated.clone(),
            };
            if spec.mu.len() != k_translated.len() {
                return Err(NhkError::Config(format!(
                    "second-stage momentum level needs {} components, got {}",
                    k_translated.len(),
                    spec.mu.len()
                )));
            }
            let tilde_coords: Vec<String> = reduced_coords
                .iter()
                .enumerate()
                .filter(|(k, _)| !k_translated.contains(k))
                .map(|(_, c)| c.clone())
                .collect();
            let e = CompiledExpr::compile(&spec.multiplier, &tilde_coords)?;
            let f_mu =
                Multiplier::from_value(Arc::new(move |q: &[f64]| e.eval(q)), DiffEngine::default());
            Some(SecondStageConfig {
                k_action: GroupAction::new(k_translated, k_labels),
                mu: DVector::from_vec(spec.mu.clone()),
                multiplier: f_mu,
                tilde_domain: build_box(&spec.domain, tilde_coords.len(), "second-stage")?,
            })
        }
    };

    Ok(CustomBundle {
        name: def.name.clone().unwrap_or_else(|| "custom".to_string()),
        system,
        reduced,
        domain,
        multiplier,
        second,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// A knife-edge-style definition written as a JSON document.
    fn sliding_edge_json() -> &'static str {
        r#"{
          "system": {
            "name": "sliding-edge",
            "dim": 3,
            "coords": ["phi", "x", "y"],
            "periodic": [true, false, false],
            "metric": { "diag": [2.0, 1.0, 1.0] },
            "potential": { "terms": [{ "c": -3.0, "factors": [{ "var": "x" }] }] },
            "constraints": [[
              0.0,
              { "terms": [{ "c": 1.0, "factors": [{ "var": "phi", "fn": "sin" }] }] },
              { "terms": [{ "c": -1.0, "factors": [{ "var": "phi", "fn": "cos" }] }] }
            ]],
            "group": { "translated": ["y"] },
            "domain": { "lower": [0.2, -1.0, -1.0], "upper": [1.3, 1.0, 1.0] },
            "multiplier": { "terms": [{ "c": 1.0, "factors": [{ "var": "phi", "fn": "cos" }] }] }
          },
          "seed": 3
        }"#
    }

    #[test]
    fn inline_definition_builds_a_working_system() {
        let cfg = parse_config(sliding_edge_json()).unwrap();
        let loaded = build_system(cfg.system.as_ref().unwrap(), &cfg.params).unwrap();
        assert_eq!(loaded.name(), "sliding-edge");
        let system = loaded.system();
        assert_eq!(system.dim, 3);
        assert_eq!(system.num_constraints(), 1);

        // The compiled pieces evaluate as written.
        let q = [0.6, 0.3, -0.2];
        let omega = system.constraint_matrix(&q);
        assert!((omega[(0, 1)] - 0.6_f64.sin()).abs() < 1e-15);
        assert!((omega[(0, 2)] + 0.6_f64.cos()).abs() < 1e-15);
        assert!(((system.potential)(&q) + 0.9).abs() < 1e-15);

        // The declared multiplier satisfies its defining condition, so the
        // custom path produces the same Hamiltonizable quotient as the
        // hand-built analogue.
        let rsys = loaded.reduced();
        let f = loaded.multiplier().unwrap();
        let qbar = [0.7, 0.1];
        let pbar = DVector::from_vec(vec![0.4, -0.8]);
        let u = DVector::from_vec(vec![1.0, 0.0]);
        let w = DVector::from_vec(vec![0.0, 1.0]);
        let res =
            crate::hamiltonization::sufficient_condition_residual(rsys, f, &qbar, &pbar, &u, &w)
                .unwrap();
        assert!(res.abs() < 1e-9, "residual {res:e}");
    }

    #[test]
    fn name_reference_resolves_to_the_registry() {
        let cfg = parse_config(r#"{ "system": "vrd", "params": { "R": 2.0 } }"#).unwrap();
        let loaded = build_system(cfg.system.as_ref().unwrap(), &cfg.params).unwrap();
        match loaded {
            LoadedSystem::Builtin(b) => assert_eq!(b.params["R"], 2.0),
            LoadedSystem::Custom(_) => panic!("expected a registry system"),
        }
    }

    #[test]
    fn malformed_documents_are_configuration_errors() {
        // Unknown top-level key.
        assert!(matches!(
            parse_config(r#"{ "sytem": "vrd" }"#),
            Err(NhkError::Json(_))
        ));
        // Metric row referencing an unknown coordinate.
        let bad = r#"{
          "system": {
            "dim": 2, "coords": ["a", "b"],
            "metric": { "diag": [1.0, { "terms": [{ "c": 1.0, "factors": [{ "var": "zz" }] }] }] },
            "constraints": [[1.0, 1.0]],
            "group": { "translated": ["b"] },
            "domain": { "lower": [0.0, 0.0], "upper": [1.0, 1.0] }
          }
        }"#;
        let cfg = parse_config(bad).unwrap();
        let err = build_system(cfg.system.as_ref().unwrap(), &cfg.params).unwrap_err();
        assert_eq!(err.exit_code(), 2, "got {err}");
        // Box with inverted bounds.
        let inverted = r#"{
          "system": {
            "dim": 1, "coords": ["a"], "metric": "identity",
            "group": { "translated": [] },
            "domain": { "lower": [2.0], "upper": [1.0] }
          }
        }"#;
        let cfg = parse_config(inverted).unwrap();
        assert!(build_system(cfg.system.as_ref().unwrap(), &cfg.params).is_err());
    }

    #[test]
    fn dependence_on_a_translated_coordinate_is_rejected() {
        let bad = r#"{
          "system": {
            "dim": 2, "coords": ["a", "b"],
            "metric": { "diag": [1.0, { "terms": [{ "c": 1.0, "factors": [{ "var": "b", "fn": "cos" }] }, { "c": 2.0 }] }] },
            "constraints": [[0.5, 1.0]],
            "group": { "translated": ["b"] },
            "domain": { "lower": [0.0, 0.0], "upper": [1.0, 1.0] }
          }
        }"#;
        let cfg = parse_config(bad).unwrap();
        let err = build_system(cfg.system.as_ref().unwrap(), &cfg.params).unwrap_err();
        assert!(matches!(err, NhkError::InvalidParameters(_)), "got {err}");
    }
}
