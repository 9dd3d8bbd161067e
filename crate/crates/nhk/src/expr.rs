//! Tiny closed-form expression tables for JSON system definitions.
//!
//! Metric entries, potentials, constraint coefficients, and multipliers can
//! be described as sums of terms, each term a constant times a product of
//! powers of `sin`, `cos`, or the identity applied to a single coordinate.
//! Negative powers are allowed, so `cot φ = cos φ · sin⁻¹ φ` and
//! `sec² φ = cos⁻² φ` are expressible.  This is deliberately not a CAS —
//! just enough to describe trigonometric-polynomial coefficient tables.

use serde::{Deserialize, Serialize};

use crate::error::{NhkError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaseFn {
    /// The coordinate itself.
    Id,
    Sin,
    Cos,
}

/// One multiplicative factor: `fn(var)^pow`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Factor {
    /// Coordinate name; resolved to an index against the chart's coordinate
    /// list when the expression is compiled.
    pub var: String,
    #[serde(default = "default_fn")]
    pub r#fn: BaseFn,
    #[serde(default = "default_pow")]
    pub pow: i32,
}

fn default_fn() -> BaseFn {
    BaseFn::Id
}

fn default_pow() -> i32 {
    1
}

/// `c · Π factors`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Term {
    pub c: f64,
    #[serde(default)]
    pub factors: Vec<Factor>,
}

/// A sum of terms, or a bare constant.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Expr {
    Const(f64),
    Sum { terms: Vec<Term> },
}

impl Expr {
    pub fn zero() -> Self {
        Expr::Const(0.0)
    }
}

/// A [`Factor`] with its variable resolved to a coordinate index.
type ResolvedFactor = (usize, BaseFn, i32);

/// An [`Expr`] with variable names resolved to coordinate indices.
#[derive(Debug, Clone)]
pub struct CompiledExpr {
    terms: Vec<(f64, Vec<ResolvedFactor>)>,
}

impl CompiledExpr {
    pub fn compile(expr: &Expr, coord_names: &[String]) -> Result<Self> {
        let resolve = |name: &str| -> Result<usize> {
            coord_names.iter().position(|c| c == name).ok_or_else(|| {
                NhkError::Config(format!("unknown coordinate `{name}` in expression"))
            })
        };
        let terms = match expr {
            Expr::Const(c) => {
                if *c == 0.0 {
                    vec![]
                } else {
                    vec![(*c, vec![])]
                }
            }
            Expr::Sum { terms } => terms
                .iter()
                .map(|t| {
                    let factors = t
                        .factors
                        .iter()
                        .map(|f| Ok((resolve(&f.var)?, f.r#fn, f.pow)))
                        .collect::<Result<Vec<_>>>()?;
                    Ok((t.c, factors))
                })
                .collect::<Result<Vec<_>>>()?,
        };
        Ok(CompiledExpr { terms })
    }

    pub fn eval(&self, q: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|(c, factors)| {
                c * factors
                    .iter()
                    .map(|&(i, f, pow)| {
                        let base = match f {
                            BaseFn::Id => q[i],
                            BaseFn::Sin => q[i].sin(),
                            BaseFn::Cos => q[i].cos(),
                        };
                        base.powi(pow)
                    })
                    .product::<f64>()
            })
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn coords() -> Vec<String> {
        vec!["theta".into(), "phi".into()]
    }

    #[test]
    fn constant_expression() {
        let e = CompiledExpr::compile(&Expr::Const(2.5), &coords()).unwrap();
        assert_eq!(e.eval(&[0.4, 1.0]), 2.5);
    }

    #[test]
    fn cot_times_cos_term() {
        // r cot(phi) cos(theta) with r = 1.
        let e = Expr::Sum {
            terms: vec![Term {
                c: 1.0,
                factors: vec![
                    Factor {
                        var: "phi".into(),
                        r#fn: BaseFn::Cos,
                        pow: 1,
                    },
                    Factor {
                        var: "phi".into(),
                        r#fn: BaseFn::Sin,
                        pow: -1,
                    },
                    Factor {
                        var: "theta".into(),
                        r#fn: BaseFn::Cos,
                        pow: 1,
                    },
                ],
            }],
        };
        let c = CompiledExpr::compile(&e, &coords()).unwrap();
        let (th, ph) = (0.7_f64, 1.1_f64);
        let expect = ph.cos() / ph.sin() * th.cos();
        assert!((c.eval(&[th, ph]) - expect).abs() < 1e-15);
    }

    #[test]
    fn unknown_variable_rejected() {
        let e = Expr::Sum {
            terms: vec![Term {
                c: 1.0,
                factors: vec![Factor {
                    var: "nope".into(),
                    r#fn: BaseFn::Id,
                    pow: 1,
                }],
            }],
        };
        assert!(CompiledExpr::compile(&e, &coords()).is_err());
    }

    #[test]
    fn json_round_trip() {
        let json = r#"{"terms":[{"c":-3.0,"factors":[{"var":"phi","fn":"sin","pow":2}]}]}"#;
        let e: Expr = serde_json::from_str(json).unwrap();
        let c = CompiledExpr::compile(&e, &coords()).unwrap();
        assert!((c.eval(&[0.0, 0.5]) + 3.0 * 0.5_f64.sin().powi(2)).abs() < 1e-15);

        let bare: Expr = serde_json::from_str("4.0").unwrap();
        let cb = CompiledExpr::compile(&bare, &coords()).unwrap();
        assert_eq!(cb.eval(&[1.0, 2.0]), 4.0);
    }
}
