//! The scaling chart `(x2, y2) = (x, y)/eps`: layer problem, critical sets,
//! slow flow and layer limit cycles.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Mat2, Vec2};
use crate::ode::{self, Options, Solver};
use crate::regularization::{e_psi, e_psi_invert, e_psi_jacobian, Regularization};
use crate::system::{convexity_margin, filippov_sigma, sliding_direction, ELinearSystem, SystemDef};

pub const HYPERBOLIC_TOL: f64 = 1e-9;
const DISC_MARGIN: f64 = 1e-6;
const NEWTON_GRID: usize = 64;
const NEWTON_ITERS: usize = 60;
const NEWTON_HALVINGS: usize = 40;
const DEDUPE: f64 = 1e-6;
const FD_STEP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stability {
    StableNode,
    StableFocus,
    UnstableNode,
    UnstableFocus,
    Saddle,
    NonHyperbolic,
}

impl Stability {
    pub fn is_stable(self) -> bool {
        matches!(self, Stability::StableNode | Stability::StableFocus)
    }
}

/// Classify a planar equilibrium from its Jacobian.
pub fn stability_class(j: &Mat2) -> Stability {
    let (tr, det) = (j.trace(), j.det());
    if det.abs() < HYPERBOLIC_TOL || !det.is_finite() {
        return Stability::NonHyperbolic;
    }
    if det < 0.0 {
        return Stability::Saddle;
    }
    if tr.abs() < HYPERBOLIC_TOL {
        return Stability::NonHyperbolic;
    }
    let focus = j.discriminant() < 0.0;
    match (tr < 0.0, focus) {
        (true, false) => Stability::StableNode,
        (true, true) => Stability::StableFocus,
        (false, false) => Stability::UnstableNode,
        (false, true) => Stability::UnstableFocus,
    }
}

/// An equilibrium of the layer problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticalPoint {
    pub location: Vec2,
    pub direction: Vec2,
    pub jacobian: Mat2,
    pub stability: Stability,
    pub slow_velocity: Vec<f64>,
}

/// Result of the critical-set search, with seed coverage for general systems.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticalCensus {
    pub points: Vec<CriticalPoint>,
    /// Roots of `U(., 0, 0, z)` on the unit circle: critical sets at infinity.
    pub boundary_roots: Vec<Vec2>,
    pub seeds: usize,
    pub converged: usize,
}

/// A periodic orbit of the layer problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCycle {
    pub samples: Vec<Vec2>,
    pub period: f64,
    pub mean_e: Vec2,
}

/// Fast-flow velocity `U(e_psi(v2; 1), 0, 0, z)`.
pub fn layer_rhs(sys: &SystemDef, v2: Vec2, z: &[f64], psi: &Regularization) -> Vec2 {
    sys.u(e_psi(v2, 1.0, psi), Vec2::ZERO, z)
}

/// `D_(c,s) U((c, s), 0, 0, z)`.
fn u_jacobian(sys: &SystemDef, cs: Vec2, z: &[f64]) -> Mat2 {
    if let Some(el) = sys.as_elinear() {
        if !el.is_folded() {
            return el.a_matrix(z);
        }
    }
    let h = FD_STEP;
    let dx = (sys.u(cs + Vec2::new(h, 0.0), Vec2::ZERO, z) - sys.u(cs - Vec2::new(h, 0.0), Vec2::ZERO, z))
        * (0.5 / h);
    let dy = (sys.u(cs + Vec2::new(0.0, h), Vec2::ZERO, z) - sys.u(cs - Vec2::new(0.0, h), Vec2::ZERO, z))
        * (0.5 / h);
    Mat2::new(dx.x, dy.x, dx.y, dy.y)
}

fn point_at(sys: &SystemDef, cs: Vec2, z: &[f64], psi: &Regularization) -> Result<CriticalPoint> {
    let location = e_psi_invert(cs, psi)?;
    let jacobian = u_jacobian(sys, cs, z) * e_psi_jacobian(location, psi);
    Ok(CriticalPoint {
        location,
        direction: cs,
        jacobian,
        stability: stability_class(&jacobian),
        slow_velocity: sys.w(cs, Vec2::ZERO, z),
    })
}

/// All critical points of the layer problem at `z`.
pub fn critical_points(sys: &SystemDef, z: &[f64], psi: &Regularization) -> Result<Vec<CriticalPoint>> {
    Ok(critical_census(sys, z, psi)?.points)
}

pub fn critical_census(sys: &SystemDef, z: &[f64], psi: &Regularization) -> Result<CriticalCensus> {
    if let Some(el) = sys.as_elinear() {
        let margin = convexity_margin(el, z)?;
        let cs = sliding_direction(el, z)?;
        let (points, boundary_roots) = if margin < 0.0 {
            (vec![point_at(sys, cs, z, psi)?], vec![])
        } else if margin.abs() < 1e-12 {
            (vec![], vec![cs])
        } else {
            (vec![], vec![])
        };
        return Ok(CriticalCensus {
            points,
            boundary_roots,
            seeds: 0,
            converged: 0,
        });
    }
    general_census(sys, z, psi)
}

fn general_census(sys: &SystemDef, z: &[f64], psi: &Regularization) -> Result<CriticalCensus> {
    let u = |cs: Vec2| sys.u(cs, Vec2::ZERO, z);
    let mut roots: Vec<Vec2> = Vec::new();
    let mut boundary: Vec<Vec2> = Vec::new();
    let mut seeds = 0;
    let mut converged = 0;
    for i in 0..NEWTON_GRID {
        for j in 0..NEWTON_GRID {
            let seed = Vec2::new(
                -1.0 + (2 * i + 1) as f64 / NEWTON_GRID as f64,
                -1.0 + (2 * j + 1) as f64 / NEWTON_GRID as f64,
            );
            if seed.norm() > 1.0 - DISC_MARGIN {
                continue;
            }
            seeds += 1;
            let Some(root) = damped_newton(&u, seed, sys, z) else {
                log::trace!("newton did not converge from seed {seed:?}");
                continue;
            };
            converged += 1;
            let r = root.norm();
            let bucket = if r <= 1.0 - DISC_MARGIN {
                &mut roots
            } else if r <= 1.0 + DISC_MARGIN {
                &mut boundary
            } else {
                continue;
            };
            if !bucket.iter().any(|q| (*q - root).norm() < DEDUPE) {
                bucket.push(root);
            }
        }
    }
    roots.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    let points = roots
        .into_iter()
        .map(|cs| point_at(sys, cs, z, psi))
        .collect::<Result<Vec<_>>>()?;
    Ok(CriticalCensus {
        points,
        boundary_roots: boundary,
        seeds,
        converged,
    })
}

fn damped_newton(u: &impl Fn(Vec2) -> Vec2, seed: Vec2, sys: &SystemDef, z: &[f64]) -> Option<Vec2> {
    let mut x = seed;
    let mut fx = u(x);
    for _ in 0..NEWTON_ITERS {
        let res = fx.norm();
        if !res.is_finite() {
            return None;
        }
        if res < 1e-14 {
            return Some(x);
        }
        let j = u_jacobian(sys, x, z);
        let step = -(j.inverse()?.mul_vec(fx));
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..NEWTON_HALVINGS {
            let trial = x + step * lambda;
            let ft = u(trial);
            if ft.norm() < res {
                x = trial;
                fx = ft;
                accepted = true;
                break;
            }
            lambda *= 0.5;
        }
        if !accepted {
            break;
        }
        if (step * lambda).norm() < 1e-15 {
            break;
        }
    }
    (fx.norm() < 1e-10).then_some(x)
}

/// The root of `U(., 0, 0, z)` continued from `guess`. Not restricted to the
/// unit disc; callers check `|cs| < 1` themselves.
pub fn critical_direction_near(sys: &SystemDef, z: &[f64], guess: Vec2) -> Option<Vec2> {
    match sys.as_elinear() {
        Some(el) => sliding_direction(el, z).ok(),
        None => damped_newton(&|cs| sys.u(cs, Vec2::ZERO, z), guess, sys, z),
    }
}

/// Slow (sliding) velocity of `z`. With `cs` given, evaluates `W(cs, 0, 0, z)`;
/// otherwise uses the critical set at `z`, which must exist.
pub fn slow_flow(sys: &SystemDef, z: &[f64], cs: Option<Vec2>) -> Result<Vec<f64>> {
    if let Some(cs) = cs {
        return Ok(sys.w(cs, Vec2::ZERO, z));
    }
    if let Some(el) = sys.as_elinear() {
        if convexity_margin(el, z)? >= 0.0 {
            return Err(Error::Crossing(z.to_vec()));
        }
        return filippov_sigma(el, z);
    }
    // the slow flow does not depend on psi; any kind locates the same (c, s)
    let census = general_census(sys, z, &Regularization::Constant)?;
    let first = census
        .points
        .first()
        .ok_or_else(|| Error::Crossing(z.to_vec()))?;
    Ok(sys.w(first.direction, Vec2::ZERO, z))
}

/// Divergence of the e-linear layer vector field at `v2`.
pub fn layer_divergence(sys: &ELinearSystem, v2: Vec2, z: &[f64], psi: &Regularization) -> f64 {
    let (a, _, d) = sys.abd(z);
    let (x, y) = (v2.x, v2.y);
    let zeta2 = v2.norm_sq();
    let p = psi.value(zeta2);
    let dp = psi.derivative(zeta2);
    let big_d = zeta2 + p;
    ((a + d) * p + a * y * y + d * x * x - dp * (a * x * x + d * y * y)) / big_d.powf(1.5)
}

#[derive(Debug, Clone, Copy)]
pub struct CycleOptions {
    pub t_max: f64,
    pub return_tol: f64,
    pub diverge: f64,
    pub samples: usize,
    pub rtol: f64,
}

impl Default for CycleOptions {
    fn default() -> Self {
        Self {
            t_max: 1e3,
            return_tol: 1e-8,
            diverge: 1e6,
            samples: 512,
            rtol: 1e-11,
        }
    }
}

/// Look for a periodic orbit by integrating the layer problem from `seed`.
pub fn detect_layer_cycle(
    sys: &SystemDef,
    z: &[f64],
    psi: &Regularization,
    seed: Vec2,
) -> Option<LayerCycle> {
    let center = cycle_center(sys, z, psi, seed);
    detect_layer_cycle_with(sys, z, psi, seed, center, CycleOptions::default())
}

fn cycle_center(sys: &SystemDef, z: &[f64], psi: &Regularization, seed: Vec2) -> Vec2 {
    critical_points(sys, z, psi)
        .ok()
        .and_then(|pts| {
            pts.into_iter()
                .map(|p| p.location)
                .min_by(|a, b| (*a - seed).norm().total_cmp(&(*b - seed).norm()))
        })
        .unwrap_or(Vec2::ZERO)
}

pub fn detect_layer_cycle_with(
    sys: &SystemDef,
    z: &[f64],
    psi: &Regularization,
    seed: Vec2,
    center: Vec2,
    opts: CycleOptions,
) -> Option<LayerCycle> {
    let rhs = |_: f64, y: &[f64], dy: &mut [f64]| {
        let v = layer_rhs(sys, Vec2::new(y[0], y[1]), z, psi);
        dy[0] = v.x;
        dy[1] = v.y;
    };
    let mut solver = Solver::new(rhs, 0.0, vec![seed.x, seed.y], Options::tol(opts.rtol, opts.rtol * 1e-2));
    let mut crossings: Vec<(f64, f64)> = Vec::new();
    let mut direction = 0.0;
    while solver.t() < opts.t_max {
        let y_prev = solver.y().to_vec();
        if solver.step(opts.t_max, f64::INFINITY).is_err() {
            return None;
        }
        let y = solver.y();
        if !(y[0].is_finite() && y[1].is_finite()) || y[0].hypot(y[1]) > opts.diverge {
            return None;
        }
        let (g0, g1) = (y_prev[1] - center.y, y[1] - center.y);
        if g0 == g1 || g0 * g1 > 0.0 || g0 == 0.0 {
            continue;
        }
        let sign = (g1 - g0).signum();
        let dense = solver.last_step()?.clone();
        let (mut lo, mut hi) = (dense.t0, dense.t1());
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            let gm = dense.eval(mid)[1] - center.y;
            if gm * g0 > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let tc = 0.5 * (lo + hi);
        let xc = dense.eval(tc)[0];
        if xc <= center.x {
            continue;
        }
        if direction == 0.0 {
            direction = sign;
        } else if sign != direction {
            continue;
        }
        if (xc - center.x).abs() < 1e-6 {
            // spiralling into the equilibrium
            return None;
        }
        if let Some(&(tp, xp)) = crossings.last() {
            if (xc - xp).abs() < opts.return_tol {
                return sample_cycle(sys, z, psi, Vec2::new(xc, center.y), tc - tp, opts);
            }
        }
        crossings.push((tc, xc));
    }
    None
}

fn sample_cycle(
    sys: &SystemDef,
    z: &[f64],
    psi: &Regularization,
    start: Vec2,
    period: f64,
    opts: CycleOptions,
) -> Option<LayerCycle> {
    // state (x2, y2, int e1, int e2)
    let rhs = |_: f64, y: &[f64], dy: &mut [f64]| {
        let v = Vec2::new(y[0], y[1]);
        let e = e_psi(v, 1.0, psi);
        let u = sys.u(e, Vec2::ZERO, z);
        dy[0] = u.x;
        dy[1] = u.y;
        dy[2] = e.x;
        dy[3] = e.y;
    };
    let n = opts.samples.max(2);
    let times: Vec<f64> = (0..n).map(|k| period * k as f64 / (n - 1) as f64).collect();
    let states = ode::solve_at(
        rhs,
        0.0,
        vec![start.x, start.y, 0.0, 0.0],
        &times,
        Options::tol(opts.rtol, opts.rtol * 1e-2),
    )
    .ok()?;
    let samples: Vec<Vec2> = states.iter().map(|s| Vec2::new(s[0], s[1])).collect();
    let last = states.last()?;
    let closure = (samples[0] - samples[n - 1]).norm();
    if closure > 1e-6 {
        log::debug!("cycle closure {closure:e} too large");
        return None;
    }
    Some(LayerCycle {
        samples,
        period,
        mean_e: Vec2::new(last[2] / period, last[3] / period),
    })
}

/// Try the default seed ring (12 points at radius 3 around the critical point)
/// followed by `extra` seeds; returns the first cycle found.
pub fn find_layer_cycle(
    sys: &SystemDef,
    z: &[f64],
    psi: &Regularization,
    extra: &[Vec2],
) -> Option<LayerCycle> {
    let center = cycle_center(sys, z, psi, Vec2::ZERO);
    let ring = (0..12).map(|k| center + Vec2::polar(std::f64::consts::TAU * k as f64 / 12.0) * 3.0);
    ring.chain(extra.iter().copied())
        .find_map(|seed| detect_layer_cycle_with(sys, z, psi, seed, center, CycleOptions::default()))
}

/// Flow of `z` averaged over a layer cycle: `B(z) mean_e + g(0, 0, z)`.
pub fn averaged_slow_flow(sys: &ELinearSystem, cycle: &LayerCycle, z: &[f64]) -> Vec<f64> {
    sys.b_rows(z)
        .iter()
        .zip(sys.g0(z))
        .map(|(row, g)| row.dot(cycle.mean_e) + g)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn elinear(a: f64, b: f64, d: f64, f1: f64, f2: f64) -> SystemDef {
        SystemDef::from_json(&format!(
            r#"{{"kind":"elinear","m":1,"a":{a},"b":{b},"d":{d},"f":[{f1},{f2}],"B":[[1,0]]}}"#
        ))
        .unwrap()
    }

    fn ar_system() -> SystemDef {
        SystemDef::from_json(
            r#"{"kind":"general","m":1,"U":["-e1 + 2*e1^2 - 1/2","-e2"],"W":["-z1"]}"#,
        )
        .unwrap()
    }

    #[test]
    fn classification_table() {
        assert_eq!(stability_class(&Mat2::scaled_identity(-1.0)), Stability::StableNode);
        assert_eq!(stability_class(&Mat2::new(1.0, 0.0, 0.0, -1.0)), Stability::Saddle);
        assert_eq!(stability_class(&Mat2::new(-0.1, -1.0, 1.0, -0.1)), Stability::StableFocus);
        assert_eq!(stability_class(&Mat2::new(0.1, -1.0, 1.0, 0.1)), Stability::UnstableFocus);
        assert_eq!(stability_class(&Mat2::scaled_identity(2.0)), Stability::UnstableNode);
        assert_eq!(stability_class(&Mat2::new(0.0, -1.0, 1.0, 0.0)), Stability::NonHyperbolic);
        assert_eq!(stability_class(&Mat2::new(1.0, 0.0, 0.0, 0.0)), Stability::NonHyperbolic);
    }

    #[test]
    fn layer_rhs_examples() {
        let sys = elinear(-1.0, 0.5, -2.0, 0.0, 0.0);
        let psi = Regularization::Rational;
        assert_eq!(layer_rhs(&sys, Vec2::ZERO, &[0.0], &psi), Vec2::ZERO);
        let ar = ar_system();
        let u = (1.0 + 5f64.sqrt()) / 4.0;
        let x2 = u / (1.0 - u * u).sqrt();
        let v = layer_rhs(&ar, Vec2::new(x2, 0.0), &[0.0], &Regularization::Constant);
        assert!(v.norm() < 1e-14);
    }

    #[test]
    fn general_critical_points() {
        let pts = critical_points(&ar_system(), &[0.0], &Regularization::Constant).unwrap();
        assert_eq!(pts.len(), 2);
        assert!((pts[0].location.x + 0.32492).abs() < 1e-5);
        assert_eq!(pts[0].stability, Stability::StableNode);
        assert!((pts[1].location.x - 1.37638).abs() < 1e-5);
        assert_eq!(pts[1].stability, Stability::Saddle);
    }

    #[test]
    fn crossing_has_no_slow_flow() {
        let sys = elinear(-1.0, 0.0, -1.0, 1.1, 0.0);
        assert!(critical_points(&sys, &[0.0], &Regularization::Rational).unwrap().is_empty());
        assert!(matches!(slow_flow(&sys, &[0.0], None), Err(Error::Crossing(_))));
    }

    #[test]
    fn divergence_at_origin() {
        let sys = elinear(-1.0, 3.0, -1.0, 0.0, 0.0);
        let div = layer_divergence(sys.as_elinear().unwrap(), Vec2::ZERO, &[0.0], &Regularization::Constant);
        assert!((div + 2.0).abs() < 1e-15);
    }

    #[test]
    fn node_has_no_cycle() {
        let sys = elinear(-1.0, 0.2, -1.5, 0.3, 0.1);
        assert!(find_layer_cycle(&sys, &[0.0], &Regularization::Rational, &[]).is_none());
    }
}

#[cfg(test)]
mod case3_tests {
    use super::*;

    fn case3() -> SystemDef {
        SystemDef::from_json(
            r#"{"kind":"elinear","m":1,"a":172,"b":186,"d":-200,"f":[-86,-93],"B":[[1,2]],"g":[0.5]}"#,
        )
        .unwrap()
    }

    #[test]
    fn power_family_stability() {
        let sys = case3();
        let expect = [
            Stability::StableNode,
            Stability::StableFocus,
            Stability::UnstableFocus,
            Stability::UnstableNode,
        ];
        for (n, want) in (1..=4).zip(expect) {
            let pts = critical_points(&sys, &[0.0], &Regularization::power(n).unwrap()).unwrap();
            assert_eq!(pts.len(), 1);
            assert_eq!(pts[0].stability, want, "n = {n}");
        }
    }

    #[test]
    fn power_family_cycles() {
        let sys = case3();
        let el = sys.as_elinear().unwrap();
        for n in 1..=4 {
            let psi = Regularization::power(n).unwrap();
            let c = critical_points(&sys, &[0.0], &psi).unwrap()[0].location;
            let extra = [c + Vec2::new(0.05, 0.0), c + Vec2::new(0.3, 0.0)];
            let found = find_layer_cycle(&sys, &[0.0], &psi, &extra);
            assert_eq!(found.is_some(), n >= 3, "n = {n}");
            if let Some(cycle) = found {
                let r = el.a_matrix(&[0.0]).mul_vec(cycle.mean_e) + el.f0(&[0.0]);
                assert!(r.norm() < 1e-4, "residual {r:?}");
                let avg = averaged_slow_flow(el, &cycle, &[0.0]);
                let slow = slow_flow(&sys, &[0.0], None).unwrap();
                assert!((avg[0] - slow[0]).abs() < 1e-4);
            }
        }
    }
}
