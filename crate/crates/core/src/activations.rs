//! Surrogate activations and the admissibility check.
//!
//! An activation `sigma` turns a score gap `d = f(u, j) - f(u, i)` into a
//! positive magnitude that the losses temper (`sigma(d)^(1/tau)`) and pool.
//! The family:
//!
//! | kind | `sigma(d)` | role |
//! |---|---|---|
//! | `exp` | `e^d` | recovers the plain softmax loss |
//! | `tanh_plus_one` | `tanh(d) + 1` | bounded surrogate |
//! | `atan_plus_one` | `arctan(d) + 1` | bounded surrogate |
//! | `relu_shift` | `max(d + 1, 0)` | piecewise-linear surrogate |
//! | `softplus_style` | `e^d + 1` | deliberately *inadmissible* control |
//! | `exp_exp` | `e^(e^d)` | dominating (looser) end of the surrogate chain |
//!
//! A kind is *admissible* when `step(d) <= sigma(d) <= e^d` on `[-1, 1]`,
//! where `step(d)` is 1 for `d >= 0` and 0 otherwise.  Admissibility is what
//! makes the pooled loss an upper bound on the rank-based objective while the
//! exponential envelope keeps it no looser than the softmax loss.
//! [`ActivationKind::check_admissible`] tests the two envelopes on a uniform
//! grid and reports every violation; nothing is assumed from the algebra.
//!
//! Raw values are clamped below at [`SIGMA_FLOOR`] so that logarithms and
//! fractional powers stay defined even where a surrogate saturates to zero
//! (or, for `atan_plus_one` outside the unit window, goes negative).  The
//! log-space accessors [`ActivationKind::log_value`] / [`ActivationKind::log_deriv`]
//! are exact rewritings, not `ln(value)` — they survive arguments where the
//! plain forms over- or underflow, which matters once gaps are divided by
//! small temperatures.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::Error;

/// Lower clamp applied to every activation value.
pub const SIGMA_FLOOR: f64 = 1e-12;

/// `ln(SIGMA_FLOOR)`, the floor in log space.
pub const LN_SIGMA_FLOOR: f64 = -27.631021115928547; // ln(1e-12)

/// `ln(1 + e^x)` without overflow for large `x` or cancellation for small.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// The activation family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Exp,
    TanhPlusOne,
    AtanPlusOne,
    ReluShift,
    SoftplusStyle,
    ExpExp,
}

impl ActivationKind {
    /// Every kind, in a fixed report order.
    pub const ALL: [ActivationKind; 6] = [
        ActivationKind::Exp,
        ActivationKind::TanhPlusOne,
        ActivationKind::AtanPlusOne,
        ActivationKind::ReluShift,
        ActivationKind::SoftplusStyle,
        ActivationKind::ExpExp,
    ];

    /// The bounded surrogates this family is built around (everything except
    /// the softmax-recovering `exp` and the two control kinds).
    pub const BOUNDED: [ActivationKind; 3] = [
        ActivationKind::TanhPlusOne,
        ActivationKind::AtanPlusOne,
        ActivationKind::ReluShift,
    ];

    /// `sigma(d)`, clamped below at [`SIGMA_FLOOR`].
    pub fn value(self, d: f64) -> f64 {
        let raw = match self {
            ActivationKind::Exp => d.exp(),
            ActivationKind::TanhPlusOne => d.tanh() + 1.0,
            ActivationKind::AtanPlusOne => d.atan() + 1.0,
            ActivationKind::ReluShift => (d + 1.0).max(0.0),
            ActivationKind::SoftplusStyle => d.exp() + 1.0,
            ActivationKind::ExpExp => d.exp().exp(),
        };
        raw.max(SIGMA_FLOOR)
    }

    /// `sigma'(d)` of the raw (unclamped) activation.
    ///
    /// `relu_shift` uses the one-sided convention `sigma'(-1) = 0`: at the
    /// kink the weight a pair receives is zero, matching the clamp below it.
    pub fn deriv(self, d: f64) -> f64 {
        match self {
            ActivationKind::Exp => d.exp(),
            ActivationKind::TanhPlusOne => {
                let t = d.tanh();
                1.0 - t * t
            }
            ActivationKind::AtanPlusOne => 1.0 / (1.0 + d * d),
            ActivationKind::ReluShift => {
                if d > -1.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::SoftplusStyle => d.exp(),
            ActivationKind::ExpExp => (d + d.exp()).exp(),
        }
    }

    /// `ln(sigma(d))` with the clamp honored, computed without forming
    /// `sigma(d)` where that would over- or underflow.
    pub fn log_value(self, d: f64) -> f64 {
        let ln_raw = match self {
            ActivationKind::Exp => d,
            // ln(1 + tanh d) = ln 2 + 2d - ln(1 + e^{2d})
            ActivationKind::TanhPlusOne => std::f64::consts::LN_2 + 2.0 * d - softplus(2.0 * d),
            ActivationKind::AtanPlusOne => {
                let v = d.atan() + 1.0;
                if v <= SIGMA_FLOOR {
                    return LN_SIGMA_FLOOR;
                }
                v.ln()
            }
            ActivationKind::ReluShift => {
                let v = d + 1.0;
                if v <= SIGMA_FLOOR {
                    return LN_SIGMA_FLOOR;
                }
                v.ln()
            }
            ActivationKind::SoftplusStyle => softplus(d),
            ActivationKind::ExpExp => d.exp(),
        };
        ln_raw.max(LN_SIGMA_FLOOR)
    }

    /// `ln(sigma'(d))`; `-inf` where the derivative is zero.
    pub fn log_deriv(self, d: f64) -> f64 {
        match self {
            ActivationKind::Exp => d,
            // ln(sech^2 d) = 2 (ln 2 - |d| - ln(1 + e^{-2|d|}))
            ActivationKind::TanhPlusOne => {
                2.0 * (std::f64::consts::LN_2 - d.abs() - (-2.0 * d.abs()).exp().ln_1p())
            }
            ActivationKind::AtanPlusOne => -(1.0 + d * d).ln(),
            ActivationKind::ReluShift => {
                if d > -1.0 {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            }
            ActivationKind::SoftplusStyle => d,
            ActivationKind::ExpExp => d + d.exp(),
        }
    }

    /// Whether the clamp is active at `d`, i.e. the raw activation value sits
    /// at or below [`SIGMA_FLOOR`].  In that region the clamped activation is
    /// constant, so losses built on it carry zero gradient there.
    pub fn is_floored(self, d: f64) -> bool {
        self.log_value(d) <= LN_SIGMA_FLOOR
    }

    /// Check `step(d) <= sigma(d) <= e^d` on a `resolution`-point uniform grid
    /// over `[-1, 1]` (endpoints included) and report every violation.
    ///
    /// Comparisons allow `1e-12` absolute slack so that exact-equality kinds
    /// (`exp` against its own envelope, the bounded kinds at `d = 0`) are not
    /// failed on rounding.
    pub fn check_admissible(self, resolution: usize) -> AdmissibilityReport {
        assert!(resolution >= 2, "grid needs at least the two endpoints");
        const TOL: f64 = 1e-12;
        let mut violations = Vec::new();
        for k in 0..resolution {
            let d = -1.0 + 2.0 * (k as f64) / ((resolution - 1) as f64);
            let sigma = self.value(d);
            let lower = if d >= 0.0 { 1.0 } else { 0.0 };
            let upper = d.exp();
            if sigma < lower - TOL {
                violations.push(AdmissibilityViolation {
                    d,
                    sigma,
                    side: BoundSide::Lower,
                    bound: lower,
                });
            }
            if sigma > upper + TOL {
                violations.push(AdmissibilityViolation {
                    d,
                    sigma,
                    side: BoundSide::Upper,
                    bound: upper,
                });
            }
        }
        AdmissibilityReport {
            kind: self,
            resolution,
            admissible: violations.is_empty(),
            violations,
        }
    }
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            ActivationKind::Exp => "exp",
            ActivationKind::TanhPlusOne => "tanh_plus_one",
            ActivationKind::AtanPlusOne => "atan_plus_one",
            ActivationKind::ReluShift => "relu_shift",
            ActivationKind::SoftplusStyle => "softplus_style",
            ActivationKind::ExpExp => "exp_exp",
        };
        f.write_str(name)
    }
}

impl FromStr for ActivationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "exp" => Ok(ActivationKind::Exp),
            "tanh_plus_one" => Ok(ActivationKind::TanhPlusOne),
            "atan_plus_one" => Ok(ActivationKind::AtanPlusOne),
            "relu_shift" => Ok(ActivationKind::ReluShift),
            "softplus_style" => Ok(ActivationKind::SoftplusStyle),
            "exp_exp" => Ok(ActivationKind::ExpExp),
            other => Err(Error::config(format!(
                "unknown activation `{other}` (expected one of: exp, tanh_plus_one, \
                 atan_plus_one, relu_shift, softplus_style, exp_exp)"
            ))),
        }
    }
}

/// Which envelope a grid point violated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundSide {
    /// `sigma(d) < step(d)`.
    Lower,
    /// `sigma(d) > e^d`.
    Upper,
}

/// A single grid point where an envelope failed.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdmissibilityViolation {
    pub d: f64,
    pub sigma: f64,
    pub side: BoundSide,
    pub bound: f64,
}

/// Outcome of [`ActivationKind::check_admissible`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdmissibilityReport {
    pub kind: ActivationKind,
    pub resolution: usize,
    pub admissible: bool,
    pub violations: Vec<AdmissibilityViolation>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn known_values() {
        // Frozen against direct evaluation of the defining formulas.
        assert_relative_eq!(
            ActivationKind::AtanPlusOne.value(1.0),
            1.7853981633974483, // 1 + pi/4
            max_relative = 1e-15
        );
        assert_relative_eq!(
            ActivationKind::Exp.value(0.3),
            1.3498588075760032,
            max_relative = 1e-15
        );
        assert_eq!(ActivationKind::TanhPlusOne.value(0.0), 1.0);
        assert_eq!(ActivationKind::ReluShift.value(0.0), 1.0);
        assert_eq!(ActivationKind::SoftplusStyle.value(0.0), 2.0);
        assert_relative_eq!(
            ActivationKind::ExpExp.value(0.0),
            std::f64::consts::E,
            max_relative = 1e-15
        );
    }

    #[test]
    fn clamp_floors_saturated_values() {
        assert_eq!(ActivationKind::TanhPlusOne.value(-50.0), SIGMA_FLOOR);
        assert_eq!(ActivationKind::ReluShift.value(-2.0), SIGMA_FLOOR);
        // atan_plus_one is negative below d = tan(-1); the clamp keeps it usable.
        assert_eq!(ActivationKind::AtanPlusOne.value(-10.0), SIGMA_FLOOR);
        assert_eq!(ActivationKind::Exp.value(-100.0), SIGMA_FLOOR);
    }

    #[test]
    fn relu_derivative_is_zero_at_and_below_kink() {
        assert_eq!(ActivationKind::ReluShift.deriv(-1.0), 0.0);
        assert_eq!(ActivationKind::ReluShift.deriv(-1.5), 0.0);
        assert_eq!(ActivationKind::ReluShift.deriv(-0.999), 1.0);
        assert_eq!(ActivationKind::ReluShift.log_deriv(-1.0), f64::NEG_INFINITY);
        assert_eq!(ActivationKind::ReluShift.log_deriv(0.25), 0.0);
    }

    #[test]
    fn derivatives_match_finite_differences() {
        // Central differences on the raw forms, away from the relu kink.
        let eps = 1e-6;
        for kind in ActivationKind::ALL {
            for &d in &[-1.5f64, -0.7, -0.2, 0.0, 0.4, 1.1, 1.9] {
                if kind == ActivationKind::ReluShift && (d + 1.0).abs() < 1e-2 {
                    continue;
                }
                let fd = (kind.value(d + eps) - kind.value(d - eps)) / (2.0 * eps);
                assert_relative_eq!(kind.deriv(d), fd, max_relative = 1e-7, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn admissible_kinds_pass_on_fine_grid() {
        for kind in [
            ActivationKind::Exp,
            ActivationKind::TanhPlusOne,
            ActivationKind::AtanPlusOne,
            ActivationKind::ReluShift,
        ] {
            let report = kind.check_admissible(10_001);
            assert!(
                report.admissible,
                "{kind} should satisfy both envelopes, got {} violations",
                report.violations.len()
            );
        }
    }

    #[test]
    fn softplus_style_violates_upper_envelope_everywhere() {
        let report = ActivationKind::SoftplusStyle.check_admissible(10_001);
        assert!(!report.admissible);
        assert_eq!(report.violations.len(), 10_001);
        assert!(report.violations.iter().all(|v| v.side == BoundSide::Upper));
    }

    #[test]
    fn exp_exp_violates_upper_envelope_everywhere() {
        // e^{e^d} > e^d for every d: this kind dominates the softmax loss, it
        // does not lower-bound it.
        let report = ActivationKind::ExpExp.check_admissible(10_001);
        assert!(!report.admissible);
        assert_eq!(report.violations.len(), 10_001);
        assert!(report.violations.iter().all(|v| v.side == BoundSide::Upper));
    }

    #[test]
    fn parse_roundtrip() {
        for kind in ActivationKind::ALL {
            let name = kind.to_string();
            assert_eq!(name.parse::<ActivationKind>().unwrap(), kind);
        }
        assert!("sigmoid".parse::<ActivationKind>().is_err());
    }

    proptest! {
        #[test]
        fn value_respects_floor_and_is_never_nan(
            kind in prop::sample::select(ActivationKind::ALL.to_vec()),
            d in -1e3f64..1e3f64,
        ) {
            let v = kind.value(d);
            prop_assert!(v >= SIGMA_FLOOR);
            prop_assert!(!v.is_nan());
        }

        #[test]
        fn log_value_matches_ln_of_value(
            kind in prop::sample::select(ActivationKind::ALL.to_vec()),
            d in -20.0f64..3.0f64,
        ) {
            // In the saturated tail the direct route computes ln(1 - x) with
            // x near 1 and sheds a digit for every decade value() drops, so
            // the comparison is only meaningful away from the floor;
            // log_value is the accurate side of it.
            prop_assume!(kind.value(d) >= 1e-9);
            let direct = kind.value(d).ln();
            let logged = kind.log_value(d);
            prop_assert!(
                (direct - logged).abs() <= 1e-6 + 1e-10 * (1.0 + direct.abs()),
                "kind={kind} d={d} direct={direct} logged={logged}"
            );
        }

        #[test]
        fn log_deriv_matches_ln_of_deriv(
            kind in prop::sample::select(ActivationKind::ALL.to_vec()),
            d in -5.0f64..3.0f64,
        ) {
            let deriv = kind.deriv(d);
            let logged = kind.log_deriv(d);
            if deriv == 0.0 {
                prop_assert_eq!(logged, f64::NEG_INFINITY);
            } else {
                let direct = deriv.ln();
                prop_assert!(
                    (direct - logged).abs() <= 1e-10 * (1.0 + direct.abs()),
                    "kind={kind} d={d} direct={direct} logged={logged}"
                );
            }
        }
    }
}
