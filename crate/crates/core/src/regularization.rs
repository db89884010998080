//! Regularization functions and the smoothed unit-vector map.
//!
//! `e(v) = v/|v|` is replaced by `e_psi(v; eps) = v / sqrt(|v|^2 + eps^2 psi(|v|^2/eps^2))`
//! where `psi` is positive, non-increasing and `psi(0) = 1`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::{self, Compiled, Env};
use crate::linalg::{Mat2, Vec2};

const SINHSQ_SERIES_VALUE: f64 = 1e-8;
const SINHSQ_SERIES_DERIV: f64 = 1e-4;
const CUSTOM_GRID: usize = 1000;
const CUSTOM_GRID_MAX: f64 = 1e3;

/// A regularization function. Built-in kinds have closed-form derivatives;
/// `Custom` is differentiated numerically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PsiSpec", into = "PsiSpec")]
pub enum Regularization {
    Constant,
    Rational,
    Exponential,
    SinhSq,
    Power(u32),
    Custom(CustomPsi),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CustomPsi {
    source: String,
    compiled: Compiled,
}

impl CustomPsi {
    pub fn source(&self) -> &str {
        &self.source
    }
}

/// Config representation: `"constant" | "rational" | "exp" | "sinhsq" | {"power": n} | {"custom": "<expr in s>"}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum PsiSpec {
    Constant,
    Rational,
    Exp,
    Sinhsq,
    Power(u32),
    Custom(String),
}

impl TryFrom<PsiSpec> for Regularization {
    type Error = Error;

    fn try_from(spec: PsiSpec) -> Result<Self> {
        Ok(match spec {
            PsiSpec::Constant => Regularization::Constant,
            PsiSpec::Rational => Regularization::Rational,
            PsiSpec::Exp => Regularization::Exponential,
            PsiSpec::Sinhsq => Regularization::SinhSq,
            PsiSpec::Power(n) => Regularization::power(n)?,
            PsiSpec::Custom(src) => Regularization::custom(&src)?,
        })
    }
}

impl From<Regularization> for PsiSpec {
    fn from(r: Regularization) -> Self {
        match r {
            Regularization::Constant => PsiSpec::Constant,
            Regularization::Rational => PsiSpec::Rational,
            Regularization::Exponential => PsiSpec::Exp,
            Regularization::SinhSq => PsiSpec::Sinhsq,
            Regularization::Power(n) => PsiSpec::Power(n),
            Regularization::Custom(c) => PsiSpec::Custom(c.source),
        }
    }
}

impl fmt::Display for Regularization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Regularization::Constant => write!(f, "constant"),
            Regularization::Rational => write!(f, "rational"),
            Regularization::Exponential => write!(f, "exp"),
            Regularization::SinhSq => write!(f, "sinhsq"),
            Regularization::Power(n) => write!(f, "power({n})"),
            Regularization::Custom(c) => write!(f, "custom({})", c.source),
        }
    }
}

impl Regularization {
    /// The four fixed built-in kinds (the power family is parameterized separately).
    pub const BUILTIN: [Regularization; 4] = [
        Regularization::Constant,
        Regularization::Rational,
        Regularization::Exponential,
        Regularization::SinhSq,
    ];

    pub fn power(n: u32) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidRegularization(
                "power family requires n >= 1".into(),
            ));
        }
        Ok(Regularization::Power(n))
    }

    /// Parse and validate a user expression in `s`.
    pub fn custom(source: &str) -> Result<Self> {
        let parsed = expr::parse(source)?;
        let compiled = parsed.compile(&["s"], &Env::new())?;
        let psi = Regularization::Custom(CustomPsi {
            source: source.to_string(),
            compiled,
        });
        psi.validate()?;
        Ok(psi)
    }

    /// Grid check of `psi(0) = 1`, positivity and monotonicity.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidRegularization(format!("{self}: {msg}")));
        let p0 = self.value(0.0);
        if (p0 - 1.0).abs() > 1e-9 {
            return bad(format!("psi(0) = {p0}, expected 1"));
        }
        let mut prev = p0;
        for i in 1..=CUSTOM_GRID {
            let s = CUSTOM_GRID_MAX * i as f64 / CUSTOM_GRID as f64;
            let p = self.value(s);
            if !p.is_finite() {
                return bad(format!("psi({s}) is not finite"));
            }
            // exact zero is accepted only as underflow of an already negligible tail
            if p < 0.0 || (p == 0.0 && prev > 1e-290) {
                return bad(format!("psi({s}) = {p} is not positive"));
            }
            if p > prev * (1.0 + 1e-12) {
                return bad(format!("psi increases near s = {s}"));
            }
            let dp = self.derivative(s);
            if dp > 1e-9 {
                return bad(format!("psi'({s}) = {dp} is positive"));
            }
            prev = p;
        }
        Ok(())
    }

    /// `psi(s)` with the domain checked.
    pub fn psi(&self, s: f64) -> Result<f64> {
        if s < 0.0 || s.is_nan() {
            return Err(Error::NegativeArgument(s));
        }
        Ok(self.value(s))
    }

    /// `psi(s)` for `s >= 0`. Tiny negative round-off is clamped to zero.
    pub fn value(&self, s: f64) -> f64 {
        let s = s.max(0.0);
        match self {
            Regularization::Constant => 1.0,
            Regularization::Rational => 1.0 / (1.0 + s),
            Regularization::Exponential => (-s).exp(),
            Regularization::SinhSq => {
                if s < SINHSQ_SERIES_VALUE {
                    1.0 - s / 3.0 + s * s / 15.0
                } else {
                    let r = s.sqrt();
                    let q = (-2.0 * r).exp();
                    let one_minus_q = -(-2.0 * r).exp_m1();
                    4.0 * s * q / (one_minus_q * one_minus_q)
                }
            }
            Regularization::Power(n) => 3.0 / (3.0 + (4.0 * s).powi(*n as i32)),
            Regularization::Custom(c) => c.compiled.eval(&[s]),
        }
    }

    /// `psi'(s)`.
    pub fn derivative(&self, s: f64) -> f64 {
        let s = s.max(0.0);
        match self {
            Regularization::Constant => 0.0,
            Regularization::Rational => -1.0 / ((1.0 + s) * (1.0 + s)),
            Regularization::Exponential => -(-s).exp(),
            Regularization::SinhSq => {
                if s < SINHSQ_SERIES_DERIV {
                    -1.0 / 3.0 + 2.0 * s / 15.0 - 2.0 * s * s / 63.0
                } else {
                    // (sinh r - r cosh r) / sinh^3 r, rewritten in q = e^{-2r}
                    let r = s.sqrt();
                    let q = (-2.0 * r).exp();
                    let one_minus_q = -(-2.0 * r).exp_m1();
                    4.0 * q * (one_minus_q - r * (1.0 + q)) / one_minus_q.powi(3)
                }
            }
            Regularization::Power(n) => {
                let n = *n as i32;
                let p = (4.0 * s).powi(n);
                let denom = 3.0 + p;
                let dp = if n == 1 {
                    4.0
                } else {
                    4.0 * n as f64 * (4.0 * s).powi(n - 1)
                };
                -3.0 * dp / (denom * denom)
            }
            Regularization::Custom(c) => {
                let h = 1e-6 * s.max(1.0);
                if s >= h {
                    (c.compiled.eval(&[s + h]) - c.compiled.eval(&[s - h])) / (2.0 * h)
                } else {
                    (c.compiled.eval(&[s + h]) - c.compiled.eval(&[s])) / h
                }
            }
        }
    }

    /// `lim_{s -> inf} psi(s)`, estimated for custom kinds.
    pub fn psi_inf(&self) -> f64 {
        match self {
            Regularization::Constant => 1.0,
            Regularization::Custom(c) => c.compiled.eval(&[1e12]),
            _ => 0.0,
        }
    }
}

/// Unit vector `v/|v|`.
pub fn e_map(v: Vec2) -> Result<Vec2> {
    let n = v.norm();
    if n == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok(Vec2::new(v.x / n, v.y / n))
}

/// `D = |v|^2 + eps^2 psi(|v|^2/eps^2)`.
fn denom(v: Vec2, eps: f64, psi: &Regularization) -> f64 {
    let r2 = v.norm_sq();
    r2 + eps * eps * psi.value(r2 / (eps * eps))
}

/// Smoothed unit vector; `|e_psi| < 1` for every finite input.
pub fn e_psi(v: Vec2, eps: f64, psi: &Regularization) -> Vec2 {
    v * (1.0 / denom(v, eps, psi).sqrt())
}

/// The scalar profile `l / sqrt(l^2 + eps^2 psi(l^2/eps^2))`.
pub fn l_psi(l: f64, eps: f64, psi: &Regularization) -> f64 {
    let l2 = l * l;
    l / (l2 + eps * eps * psi.value(l2 / (eps * eps))).sqrt()
}

/// Jacobian of `e_psi(., 1)`.
pub fn e_psi_jacobian(v2: Vec2, psi: &Regularization) -> Mat2 {
    let zeta2 = v2.norm_sq();
    let d = zeta2 + psi.value(zeta2);
    let sd = d.sqrt();
    let k = (1.0 + psi.derivative(zeta2)) / (d * sd);
    Mat2::scaled_identity(1.0 / sd) - v2.outer(v2) * k
}

/// Solve `e_psi(v, 1) = target` for `v`.
pub fn e_psi_invert(target: Vec2, psi: &Regularization) -> Result<Vec2> {
    let u = target.norm();
    if !u.is_finite() || u >= 1.0 {
        return Err(Error::NoCriticalSet(u));
    }
    if u == 0.0 {
        return Ok(Vec2::ZERO);
    }
    let r = invert_radius(u, psi);
    Ok(target * (r / u))
}

/// Radius `r` with `r / sqrt(r^2 + psi(r^2)) = u`, by bracketed bisection.
fn invert_radius(u: f64, psi: &Regularization) -> f64 {
    let g = |r: f64| l_psi(r, 1.0, psi);
    let mut lo = 0.0;
    let mut hi = 1.0;
    let mut grow = 0;
    while g(hi) < u && grow < 1100 {
        lo = hi;
        hi *= 2.0;
        grow += 1;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if g(mid) < u {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (glo, ghi) = (g(lo), g(hi));
    if (u - glo).abs() <= (ghi - u).abs() {
        lo
    } else {
        hi
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn all_psi() -> Vec<Regularization> {
        let mut v = Regularization::BUILTIN.to_vec();
        v.extend((1..=4).map(Regularization::Power));
        v
    }

    #[test]
    fn builtin_values() {
        assert_eq!(Regularization::Constant.psi(5.0).unwrap(), 1.0);
        assert_eq!(Regularization::Rational.psi(1.0).unwrap(), 0.5);
        for n in 1..=6 {
            assert!((Regularization::Power(n).value(0.25) - 0.75).abs() < 1e-15);
        }
        assert_eq!(Regularization::SinhSq.value(0.0), 1.0);
        assert!(Regularization::Rational.psi(-1.0).is_err());
        assert!(Regularization::power(0).is_err());
    }

    #[test]
    fn sinhsq_branches_are_continuous() {
        let p = Regularization::SinhSq;
        for s in [1e-9_f64, 1e-8, 1e-5, 1e-4, 0.5, 4.0, 100.0] {
            let r: f64 = s.sqrt();
            let direct = s / r.sinh().powi(2);
            assert!((p.value(s) - direct).abs() < 1e-12 * direct.max(1e-300), "s={s}");
        }
        let far = 4e4 * (-200.0_f64).exp();
        assert!(p.value(1e4) > 0.0);
        assert!((p.value(1e4) - far).abs() < 1e-12 * far);
    }

    #[test]
    fn derivatives_match_finite_differences() {
        for psi in all_psi() {
            for s in [0.01, 0.3, 1.0, 2.5, 7.0] {
                let h = 1e-6;
                let fd = (psi.value(s + h) - psi.value(s - h)) / (2.0 * h);
                let d = psi.derivative(s);
                assert!((fd - d).abs() < 1e-7, "{psi} at {s}: {fd} vs {d}");
            }
        }
    }

    #[test]
    fn builtins_validate() {
        for psi in all_psi() {
            psi.validate().unwrap();
        }
    }

    #[test]
    fn custom_validation() {
        let ok = Regularization::custom("1/(1+s)^2").unwrap();
        assert!((ok.value(1.0) - 0.25).abs() < 1e-15);
        assert!(Regularization::custom("1+s").is_err());
        assert!(Regularization::custom("2/(1+s)").is_err());
        assert!(Regularization::custom("cos(s)").is_err());
        assert!(Regularization::custom("1/(1+x)").is_err());
    }

    #[test]
    fn config_spellings() {
        let parse = |t: &str| serde_json::from_str::<Regularization>(t);
        assert_eq!(parse("\"exp\"").unwrap(), Regularization::Exponential);
        assert_eq!(parse("{\"power\": 3}").unwrap(), Regularization::Power(3));
        assert!(matches!(parse("{\"custom\": \"exp(-2*s)\"}").unwrap(), Regularization::Custom(_)));
        assert!(parse("\"gaussian\"").is_err());
        let back = serde_json::to_string(&Regularization::SinhSq).unwrap();
        assert_eq!(back, "\"sinhsq\"");
    }

    #[test]
    fn e_map_examples() {
        assert_eq!(e_map(Vec2::new(3.0, 4.0)).unwrap(), Vec2::new(0.6, 0.8));
        assert_eq!(e_map(Vec2::new(-1.0, 0.0)).unwrap(), Vec2::new(-1.0, 0.0));
        let e = e_map(Vec2::polar(1.2) * 7.5).unwrap();
        assert!((e - Vec2::polar(1.2)).norm() < 1e-15);
        assert!(e_map(Vec2::ZERO).is_err());
    }

    #[test]
    fn e_psi_examples() {
        let r = Regularization::Rational;
        assert_eq!(e_psi(Vec2::ZERO, 0.3, &r), Vec2::ZERO);
        let a = e_psi(Vec2::new(1.0, 0.0), 1.0, &r);
        assert!((a.x - 1.0 / 1.5_f64.sqrt()).abs() < 1e-15);
        let b = e_psi(Vec2::new(2.0, 0.0), 2.0, &r);
        assert!((a - b).norm() < 1e-15);
    }

    #[test]
    fn l_psi_examples() {
        assert_eq!(l_psi(0.0, 1.0, &Regularization::Rational), 0.0);
        assert!((l_psi(1.0, 1.0, &Regularization::SinhSq) - 1.0_f64.tanh()).abs() < 1e-14);
        assert!((1.0 - l_psi(1e6, 1.0, &Regularization::Rational)).abs() < 1e-6);
    }

    #[test]
    fn jacobian_at_origin_is_identity() {
        let j = e_psi_jacobian(Vec2::ZERO, &Regularization::Constant);
        assert!((j - Mat2::IDENTITY).max_abs() < 1e-15);
    }

    #[test]
    fn inversion_examples() {
        let c = Regularization::Constant;
        assert_eq!(e_psi_invert(Vec2::ZERO, &c).unwrap(), Vec2::ZERO);
        let t = Vec2::new((1.0 - 5f64.sqrt()) / 4.0, 0.0);
        let v = e_psi_invert(t, &c).unwrap();
        assert!((v.x + (1.0 - 2.0 / 5f64.sqrt()).sqrt()).abs() < 1e-12);
        assert!((e_psi(v, 1.0, &c) - t).norm() < 1e-12);
        assert!(e_psi_invert(Vec2::new(1.0, 0.0), &c).is_err());
    }
}
