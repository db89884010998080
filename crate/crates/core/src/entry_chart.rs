//! Dynamics near the equator of the blown-up discontinuity.
//!
//! In polar-type coordinates `x = rho xi cos(theta)`, `y = rho xi sin(theta)`,
//! `eps = rho eps1`, `xi = sqrt(1 - eps1^2)`, and after dividing time by `rho`:
//!
//! ```text
//! rho'   =  rho xi (c, s).U
//! theta' =  Theta / xi
//! eps1'  = -eps1 xi (c, s).U
//! z'     =  rho W
//! ```
//!
//! where `U` is evaluated at `(L (c, s), rho xi (c, s), z)` with the radial profile
//! `L = xi / sqrt(xi^2 + eps1^2 psi(xi^2/eps1^2))` and `Theta = (-s, c).U`.

use std::f64::consts::{PI, TAU};

use nalgebra::{Complex, DMatrix, Schur};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{angle_diff, wrap_angle, Vec2};
use crate::regularization::Regularization;
use crate::system::{ELinearSystem, SystemDef};

pub const HYPERBOLIC_TOL: f64 = 1e-9;
pub const DEFAULT_GRID: usize = 2048;
pub const DEFAULT_ROOT_TOL: f64 = 1e-12;
const FD_STEP: f64 = 1e-6;
const EVEN_ROOT_TOL: f64 = 1e-10;
const DEGENERACY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Class {
    Attracting,
    Repelling,
    NonHyperbolic,
}

impl Class {
    pub fn of(lambda: f64) -> Self {
        if lambda.abs() < HYPERBOLIC_TOL || !lambda.is_finite() {
            Class::NonHyperbolic
        } else if lambda < 0.0 {
            Class::Attracting
        } else {
            Class::Repelling
        }
    }
}

/// An equilibrium of the angular flow on the equator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitDirection {
    pub theta0: f64,
    pub lambda_rho: f64,
    pub lambda_theta: f64,
    pub radial: Class,
    pub angular: Class,
    pub multiplicity: u32,
}

impl LimitDirection {
    pub fn is_hyperbolic(&self) -> bool {
        self.radial != Class::NonHyperbolic && self.angular != Class::NonHyperbolic
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquatorReport {
    pub z: Vec<f64>,
    pub directions: Vec<LimitDirection>,
    /// Stability integral of the equator cycle; present iff there are no directions.
    pub cycle_integral: Option<f64>,
    /// `Theta` vanishes identically: every direction is an equilibrium.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub continuum: bool,
}

/// `Theta(rho, theta, z)` on the plane `eps1 = 0`.
pub fn theta_fn(sys: &SystemDef, rho: f64, theta: f64, z: &[f64]) -> f64 {
    let e = Vec2::polar(theta);
    e.perp().dot(sys.u(e, e * rho, z))
}

/// `(c, s).U((c, s), 0, 0, z)`.
pub fn lambda_rho(sys: &SystemDef, theta: f64, z: &[f64]) -> f64 {
    let e = Vec2::polar(theta);
    e.dot(sys.u(e, Vec2::ZERO, z))
}

/// `dTheta/dtheta` at `rho = 0` by central difference.
pub fn lambda_theta(sys: &SystemDef, theta: f64, z: &[f64]) -> f64 {
    (theta_fn(sys, 0.0, theta + FD_STEP, z) - theta_fn(sys, 0.0, theta - FD_STEP, z))
        / (2.0 * FD_STEP)
}

fn direction_at(sys: &SystemDef, theta: f64, z: &[f64], multiplicity: u32) -> LimitDirection {
    let lambda_rho = lambda_rho(sys, theta, z);
    let lambda_theta = lambda_theta(sys, theta, z);
    LimitDirection {
        theta0: theta,
        lambda_rho,
        lambda_theta,
        radial: Class::of(lambda_rho),
        angular: Class::of(lambda_theta),
        multiplicity,
    }
}

/// Limit directions with the default grid and tolerance.
pub fn limit_directions(sys: &SystemDef, z: &[f64]) -> EquatorReport {
    limit_directions_with(sys, z, DEFAULT_ROOT_TOL, DEFAULT_GRID)
}

/// Roots of `theta -> Theta(0, theta, z)` by grid sampling and bisection.
///
/// Root pairs closer than about `2 pi / grid` can be missed; raise `grid` if needed.
pub fn limit_directions_with(sys: &SystemDef, z: &[f64], tol: f64, grid: usize) -> EquatorReport {
    let f = |th: f64| theta_fn(sys, 0.0, th, z);
    let h = TAU / grid as f64;
    let thetas: Vec<f64> = (0..=grid).map(|i| i as f64 * h).collect();
    let vals: Vec<f64> = thetas.iter().map(|&t| f(t)).collect();
    let scale = vals.iter().fold(0.0_f64, |m, v| m.max(v.abs()));

    if scale <= tol {
        return EquatorReport {
            z: z.to_vec(),
            directions: vec![],
            cycle_integral: None,
            continuum: true,
        };
    }

    let mut roots: Vec<(f64, bool)> = Vec::new();
    for i in 0..grid {
        let (a, b) = (thetas[i], thetas[i + 1]);
        let (fa, fb) = (vals[i], vals[i + 1]);
        if fa == 0.0 {
            let odd = vals[(i + grid - 1) % grid] * fb < 0.0;
            roots.push((a, odd));
        } else if fb != 0.0 && fa * fb < 0.0 {
            roots.push((bisect(&f, a, b, fa, tol), true));
        }
    }

    // even-multiplicity roots: grid minima of |Theta| without a sign change
    for i in 0..grid {
        let prev = vals[(i + grid - 1) % grid];
        let (cur, next) = (vals[i], vals[i + 1]);
        let same_sign = prev * cur > 0.0 && cur * next > 0.0;
        if same_sign && cur.abs() <= prev.abs() && cur.abs() <= next.abs() {
            let (tmin, fmin) = golden_min(|t| f(t).abs(), thetas[i] - h, thetas[i] + h, tol);
            if fmin < EVEN_ROOT_TOL * (1.0 + scale) {
                roots.push((tmin, false));
            }
        }
    }

    let mut directions: Vec<LimitDirection> = Vec::new();
    let mut wrapped: Vec<(f64, bool)> = roots.into_iter().map(|(t, o)| (wrap_angle(t), o)).collect();
    wrapped.sort_by(|a, b| a.0.total_cmp(&b.0));
    // tangential roots are only located to ~sqrt(eps), so they merge within a grid cell
    let merge = |a: (f64, bool), b: (f64, bool)| {
        let radius = if a.1 && b.1 { 10.0 * tol } else { h };
        angle_diff(a.0, b.0).abs() <= radius
    };
    let mut kept: Vec<(f64, bool)> = Vec::new();
    for cand in wrapped {
        if kept.iter().any(|k| merge(*k, cand)) {
            continue;
        }
        kept.push(cand);
    }
    for (t, odd) in kept {
        let mut dir = direction_at(sys, t, z, 1);
        if dir.angular == Class::NonHyperbolic {
            dir.multiplicity = if odd { 3 } else { 2 };
        }
        directions.push(dir);
    }

    let cycle_integral = if directions.is_empty() {
        Some(cycle_integral_unchecked(sys, z))
    } else {
        None
    };
    EquatorReport {
        z: z.to_vec(),
        directions,
        cycle_integral,
        continuum: false,
    }
}

fn bisect(f: &impl Fn(f64) -> f64, mut a: f64, mut b: f64, mut fa: f64, tol: f64) -> f64 {
    while b - a > tol {
        let m = 0.5 * (a + b);
        if m <= a || m >= b {
            break;
        }
        let fm = f(m);
        if fm == 0.0 {
            return m;
        }
        if fa * fm < 0.0 {
            b = m;
        } else {
            a = m;
            fa = fm;
        }
    }
    0.5 * (a + b)
}

fn golden_min(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> (f64, f64) {
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..200 {
        if b - a <= tol {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    let t = 0.5 * (a + b);
    (t, f(t))
}

/// Roots of the e-linear equator function
/// `(d - a) sin cos + f2 cos - f1 sin + b` via the half-angle quartic.
pub fn conic_roots(a: f64, b: f64, d: f64, f1: f64, f2: f64) -> Vec<f64> {
    let theta = |t: f64| {
        let (s, c) = t.sin_cos();
        (d - a) * s * c + f2 * c - f1 * s + b
    };
    let dtheta = |t: f64| {
        let (s, c) = t.sin_cos();
        (d - a) * (c * c - s * s) - f2 * s - f1 * c
    };
    // coefficients of t^4 .. t^0 after multiplying by (1 + t^2)^2
    let coeffs = [
        b - f2,
        -2.0 * (d - a) - 2.0 * f1,
        2.0 * b,
        2.0 * (d - a) - 2.0 * f1,
        b + f2,
    ];
    let scale = coeffs.iter().fold(0.0_f64, |m, c| m.max(c.abs()));
    if scale == 0.0 {
        return vec![];
    }
    let mut out = Vec::new();
    // t -> infinity is theta = pi
    if coeffs[0].abs() <= 1e-14 * scale {
        out.push(PI);
    }
    for t in real_poly_roots(&coeffs, scale) {
        let mut th = 2.0 * t.atan();
        for _ in 0..3 {
            let (v, dv) = (theta(th), dtheta(th));
            if dv.abs() > 1e-12 {
                let step = v / dv;
                if step.abs() < 1e-3 {
                    th -= step;
                }
            }
        }
        if theta(th).abs() <= 1e-7 * (1.0 + scale) {
            out.push(wrap_angle(th));
        }
    }
    out.sort_by(f64::total_cmp);
    let mut dedup: Vec<f64> = Vec::new();
    for t in out {
        let dup = dedup.iter().any(|&u| angle_diff(t, u).abs() < 1e-7);
        if !dup {
            dedup.push(t);
        }
    }
    dedup
}

/// Real roots of `c[0] t^n + ... + c[n]` from companion-matrix eigenvalues.
fn real_poly_roots(coeffs: &[f64], scale: f64) -> Vec<f64> {
    let start = coeffs
        .iter()
        .position(|c| c.abs() > 1e-14 * scale)
        .unwrap_or(coeffs.len());
    let c = &coeffs[start..];
    let n = c.len().saturating_sub(1);
    if n == 0 {
        return vec![];
    }
    let lead = c[0];
    let mut m = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        m[(0, j)] = -c[j + 1] / lead;
    }
    for i in 1..n {
        m[(i, i - 1)] = 1.0;
    }
    // the plain Schur iteration has no cap and can stall on exact companion structure
    let Some(schur) = Schur::try_new(m, f64::EPSILON, 10_000) else {
        log::debug!("companion Schur did not converge, falling back to Durand-Kerner");
        return durand_kerner(c)
            .into_iter()
            .filter(|z| z.im.abs() <= 1e-6 * (1.0 + z.re.abs()))
            .map(|z| z.re)
            .collect();
    };
    schur
        .complex_eigenvalues()
        .iter()
        .filter(|z| z.im.abs() <= 1e-6 * (1.0 + z.re.abs()))
        .map(|z| z.re)
        .collect()
}

fn durand_kerner(c: &[f64]) -> Vec<Complex<f64>> {
    let n = c.len() - 1;
    let lead = c[0];
    let eval = |z: Complex<f64>| {
        c.iter()
            .fold(Complex::new(0.0, 0.0), |acc, &k| acc * z + k / lead)
    };
    let seed = Complex::new(0.4, 0.9);
    let mut roots: Vec<Complex<f64>> = (0..n).map(|k| seed.powu(k as u32)).collect();
    for _ in 0..500 {
        let mut moved = 0.0_f64;
        for i in 0..n {
            let mut denom = Complex::new(1.0, 0.0);
            for j in 0..n {
                if i != j {
                    denom *= roots[i] - roots[j];
                }
            }
            let step = eval(roots[i]) / denom;
            roots[i] -= step;
            moved = moved.max(step.norm());
        }
        if moved < 1e-15 {
            break;
        }
    }
    roots
}

/// Closed-form equator roots in the degenerate cases `a = d` (D1) and
/// `b = f2 = 0` (D2). Returns `None` when neither holds.
pub fn degenerate_closed_forms(sys: &ELinearSystem, z: &[f64]) -> Option<Vec<f64>> {
    let (a, b, d) = sys.abd(z);
    let f = sys.f0(z);
    let mut out = Vec::new();
    if (a - d).abs() <= DEGENERACY_TOL {
        let fr = f.norm();
        if b.abs() > fr || fr == 0.0 {
            return Some(out);
        }
        let alpha = f.y.atan2(f.x);
        let base = (b / fr).asin();
        out.push(wrap_angle(alpha + base));
        if b.abs() < fr {
            out.push(wrap_angle(alpha + PI - base));
        }
    } else if b.abs() <= DEGENERACY_TOL && f.y.abs() <= DEGENERACY_TOL {
        out.push(0.0);
        out.push(PI);
        let ratio = f.x / (d - a);
        if ratio.abs() < 1.0 {
            let t = ratio.acos();
            out.push(t);
            out.push(TAU - t);
        }
    } else {
        return None;
    }
    out.sort_by(f64::total_cmp);
    Some(out)
}

/// The three nontrivial eigenvalues of the blown-up Jacobian at a direction;
/// the remaining `m` are zero.
pub fn entry_jacobian_spectrum(dir: &LimitDirection) -> [f64; 3] {
    [dir.lambda_rho, dir.lambda_theta, -dir.lambda_rho]
}

/// `int_0^{2 pi} lambda_rho / |Theta| dtheta`; requires an equator without roots.
pub fn equator_cycle_integral(sys: &SystemDef, z: &[f64]) -> Result<f64> {
    let report = limit_directions(sys, z);
    if report.continuum || !report.directions.is_empty() {
        return Err(Error::Contract(format!(
            "equator cycle integral needs a root-free equator, found {} directions",
            report.directions.len()
        )));
    }
    Ok(report
        .cycle_integral
        .unwrap_or_else(|| cycle_integral_unchecked(sys, z)))
}

fn cycle_integral_unchecked(sys: &SystemDef, z: &[f64]) -> f64 {
    let f = |t: f64| lambda_rho(sys, t, z) / theta_fn(sys, 0.0, t, z).abs();
    // split so the initial Simpson estimate cannot alias a periodic integrand
    let n = 8;
    (0..n)
        .map(|k| {
            let a = TAU * k as f64 / n as f64;
            let b = TAU * (k + 1) as f64 / n as f64;
            adaptive_simpson(&f, a, b, 1e-8)
        })
        .sum()
}

/// Adaptive Simpson quadrature with relative tolerance `rel`.
///
/// Refinement stops after `SIMPSON_BUDGET` evaluations, which only matters
/// for near-singular integrands.
pub fn adaptive_simpson(f: &impl Fn(f64) -> f64, a: f64, b: f64, rel: f64) -> f64 {
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    let tol = rel * whole.abs().max(1e-300);
    let mut budget = SIMPSON_BUDGET;
    simpson_rec(f, [a, b], [fa, fm, fb], whole, tol, 50, &mut budget)
}

const SIMPSON_BUDGET: usize = 200_000;

fn simpson_rec(
    f: &impl Fn(f64) -> f64,
    [a, b]: [f64; 2],
    [fa, fm, fb]: [f64; 3],
    whole: f64,
    tol: f64,
    depth: u32,
    budget: &mut usize,
) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    *budget = budget.saturating_sub(2);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    // below this the difference is rounding noise
    let floor = 64.0 * f64::EPSILON * (left.abs() + right.abs());
    if depth == 0 || *budget == 0 || delta.abs() <= 15.0 * tol.max(floor) {
        return left + right + delta / 15.0;
    }
    simpson_rec(f, [a, m], [fa, flm, fm], left, 0.5 * tol, depth - 1, budget)
        + simpson_rec(f, [m, b], [fm, frm, fb], right, 0.5 * tol, depth - 1, budget)
}

/// State in the entry chart.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntryPoint {
    pub rho: f64,
    pub theta: f64,
    pub eps1: f64,
}

/// Right-hand side of the desingularized entry-chart system.
/// Returns `(rho', theta', eps1', z')`.
pub fn entry_rhs(
    sys: &SystemDef,
    psi: &Regularization,
    p: EntryPoint,
    z: &[f64],
) -> (f64, f64, f64, Vec<f64>) {
    let EntryPoint { rho, theta, eps1 } = p;
    let xi = (1.0 - eps1 * eps1).max(0.0).sqrt();
    let dir = Vec2::polar(theta);
    let profile = if eps1 == 0.0 {
        1.0
    } else {
        xi / (xi * xi + eps1 * eps1 * psi.value(xi * xi / (eps1 * eps1))).sqrt()
    };
    let e = dir * profile;
    let xy = dir * (rho * xi);
    let u = sys.u(e, xy, z);
    let radial = dir.dot(u);
    let big_theta = dir.perp().dot(u);
    let w = sys.w(e, xy, z);
    let drho = rho * xi * radial;
    let deps = -eps1 * xi * radial;
    let dz = w.into_iter().map(|v| rho * v).collect();
    (drho, big_theta / xi, deps, dz)
}
