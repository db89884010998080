//! Case classification, portrait labels and bifurcation sweeps.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::entry_chart::{lambda_theta, limit_directions, theta_fn, Class};
use crate::error::{Error, Result};
use crate::linalg::Vec2;
use crate::regularization::Regularization;
use crate::scaling_chart::{critical_census, find_layer_cycle, Stability};
use crate::system::{convexity_margin, ELinearSystem, SystemDef};

const BOUNDARY_TOL: f64 = 1e-9;
const LOCATE_TOL: f64 = 1e-9;
const RESIDUAL_GRID: usize = 1024;
const WINDOW: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Case {
    I,
    II,
    III,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseOf {
    pub case: Case,
    /// `a`, `d` or `det A` within `1e-9` of zero.
    pub degenerate: bool,
}

pub fn case_of(sys: &ELinearSystem, z: &[f64]) -> CaseOf {
    let (a, _, d) = sys.abd(z);
    let det = sys.det_a(z);
    let degenerate = a.abs() <= BOUNDARY_TOL || d.abs() <= BOUNDARY_TOL || det.abs() <= BOUNDARY_TOL;
    let case = if (a < 0.0) == (d < 0.0) {
        Case::I
    } else if det < 0.0 {
        Case::II
    } else {
        Case::III
    };
    CaseOf { case, degenerate }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortraitClass {
    /// `None` for systems not in e-linear form.
    pub case: Option<Case>,
    pub n_equator: usize,
    pub has_critical_set: bool,
    pub label: String,
    pub degenerate: bool,
    pub critical_stability: Vec<Stability>,
    /// Case III only: whether a layer cycle was found under the given psi.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cycle: Option<bool>,
}

pub const BIFURCATION: &str = "BIFURCATION";

/// Name the phase portrait at `z` under `psi`.
pub fn portrait(sys: &SystemDef, z: &[f64], psi: &Regularization) -> Result<PortraitClass> {
    let report = limit_directions(sys, z);
    let census = critical_census(sys, z, psi)?;
    let n_equator = report.directions.len();
    let has_critical_set = !census.points.is_empty();
    let critical_stability: Vec<Stability> = census.points.iter().map(|p| p.stability).collect();

    let mut degenerate = report.continuum
        || !census.boundary_roots.is_empty()
        || report.directions.iter().any(|d| !d.is_hyperbolic())
        || critical_stability.contains(&Stability::NonHyperbolic);
    let mut case = None;
    let mut cycle = None;
    if let Some(el) = sys.as_elinear() {
        let c = case_of(el, z);
        degenerate |= c.degenerate || convexity_margin(el, z)?.abs() <= BOUNDARY_TOL;
        case = Some(c.case);
        if c.case == Case::III && has_critical_set {
            let centre = census.points[0].location;
            let extra = [centre + Vec2::new(0.05, 0.0), centre + Vec2::new(0.3, 0.0)];
            cycle = Some(find_layer_cycle(sys, z, psi, &extra).is_some());
        }
    }
    let prefix = if has_critical_set { "CM" } else { "NCM" };
    let label = if degenerate {
        BIFURCATION.to_string()
    } else {
        match case {
            Some(Case::II) if has_critical_set => "II-saddle".to_string(),
            Some(Case::II) => format!("II-{prefix}{n_equator}"),
            Some(Case::III) => "III-regularization-sensitive".to_string(),
            _ => format!("{prefix}{n_equator}"),
        }
    };
    Ok(PortraitClass {
        case,
        n_equator,
        has_critical_set,
        label,
        degenerate,
        critical_stability,
        cycle,
    })
}

/// `(f1, f2)` making `theta` a double root of the equator equation.
pub fn tangency_locus(theta: f64, a: f64, b: f64, d: f64) -> (f64, f64) {
    let (s, c) = theta.sin_cos();
    (b * s - (a - d) * c.powi(3), (a - d) * s.powi(3) - b * c)
}

/// A straight path through `z`-space or through one parameter, with
/// path parameter `t` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum SweepPath {
    Z {
        from: Vec<f64>,
        to: Vec<f64>,
    },
    Param {
        name: String,
        from: f64,
        to: f64,
        z: Vec<f64>,
    },
}

impl SweepPath {
    fn check(&self, sys: &SystemDef) -> Result<()> {
        let m = sys.m();
        match self {
            SweepPath::Z { from, to } if from.len() != m || to.len() != m => Err(Error::Config(
                format!("sweep path endpoints must have {m} components"),
            )),
            SweepPath::Param { z, .. } if z.len() != m => {
                Err(Error::Config(format!("sweep z must have {m} components")))
            }
            SweepPath::Param { name, .. } if sys.param(name).is_none() => {
                Err(Error::Config(format!("unknown parameter `{name}`")))
            }
            _ => Ok(()),
        }
    }

    /// Point on the path in user coordinates: `z`, or `[value]` for parameters.
    pub fn point(&self, t: f64) -> Vec<f64> {
        match self {
            SweepPath::Z { from, to } => from.iter().zip(to).map(|(a, b)| a + t * (b - a)).collect(),
            SweepPath::Param { from, to, .. } => vec![from + t * (to - from)],
        }
    }

    pub fn at(&self, sys: &SystemDef, t: f64) -> Result<(SystemDef, Vec<f64>)> {
        match self {
            SweepPath::Z { .. } => Ok((sys.clone(), self.point(t))),
            SweepPath::Param { name, z, .. } => Ok((sys.with_param(name, self.point(t)[0])?, z.clone())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    EllipseBoundary,
    SaddleNodeEquator,
    PitchforkEquator,
    Degenerate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BifurcationEvent {
    pub kind: EventKind,
    pub t: f64,
    pub point: Vec<f64>,
    /// Residuals at the reported point: the locating function, then the
    /// saddle-node residual.
    pub residuals: Vec<f64>,
    pub confirmed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub t: f64,
    pub point: Vec<f64>,
    /// Convexity margin; `NaN` for non e-linear systems.
    pub ellipse: f64,
    pub saddle_node: f64,
    pub det_a: f64,
    pub n_equator: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub events: Vec<BifurcationEvent>,
}

/// `min_theta max(|Theta|, |dTheta/dtheta|)` on a uniform grid.
pub fn saddle_node_residual(sys: &SystemDef, z: &[f64]) -> f64 {
    let h = TAU / RESIDUAL_GRID as f64;
    let vals: Vec<f64> = (0..RESIDUAL_GRID).map(|i| theta_fn(sys, 0.0, i as f64 * h, z)).collect();
    (0..RESIDUAL_GRID)
        .map(|i| {
            let next = vals[(i + 1) % RESIDUAL_GRID];
            let prev = vals[(i + RESIDUAL_GRID - 1) % RESIDUAL_GRID];
            let slope = (next - prev) / (2.0 * h);
            vals[i].abs().max(slope.abs())
        })
        .fold(f64::INFINITY, f64::min)
}

fn argmin_sn(sys: &SystemDef, z: &[f64]) -> f64 {
    let h = TAU / RESIDUAL_GRID as f64;
    let mut best = (f64::INFINITY, 0.0);
    for i in 0..RESIDUAL_GRID {
        let th = i as f64 * h;
        let r = theta_fn(sys, 0.0, th, z).abs().max(lambda_theta(sys, th, z).abs());
        if r < best.0 {
            best = (r, th);
        }
    }
    best.1
}

fn sample(base: &SystemDef, path: &SweepPath, t: f64) -> Result<SweepRow> {
    let (sys, z) = path.at(base, t)?;
    let (ellipse, det_a) = match sys.as_elinear() {
        Some(el) => (convexity_margin(el, &z).unwrap_or(f64::NAN), el.det_a(&z)),
        None => (f64::NAN, f64::NAN),
    };
    Ok(SweepRow {
        t,
        point: path.point(t),
        ellipse,
        saddle_node: saddle_node_residual(&sys, &z),
        det_a,
        n_equator: limit_directions(&sys, &z).directions.len(),
    })
}

/// Bisection down to adjacent floats, so the residual is as small as the
/// arithmetic allows.
fn bisect(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> Result<f64>) -> Result<f64> {
    let f_lo = f(lo)?;
    loop {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let fm = f(mid)?;
        if fm == 0.0 {
            return Ok(mid);
        }
        if (fm > 0.0) == (f_lo > 0.0) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Evaluate residuals along `path` at `samples` points and locate events.
pub fn sweep(sys: &SystemDef, path: &SweepPath, samples: usize) -> Result<SweepResult> {
    if samples < 2 {
        return Err(Error::Config("sweep needs at least 2 samples".into()));
    }
    path.check(sys)?;
    let ts: Vec<f64> = (0..samples).map(|i| i as f64 / (samples - 1) as f64).collect();
    let pts = ts.iter().map(|&t| sample(sys, path, t)).collect::<Result<Vec<_>>>()?;
    let mut events = Vec::new();

    let margin_at = |t: f64| -> Result<f64> {
        let (s, z) = path.at(sys, t)?;
        convexity_margin(s.elinear()?, &z)
    };
    let det_at = |t: f64| -> Result<f64> {
        let (s, z) = path.at(sys, t)?;
        Ok(s.elinear()?.det_a(&z))
    };

    for (k, w) in pts.windows(2).enumerate() {
        let (l, r) = (&w[0], &w[1]);
        if l.det_a * r.det_a < 0.0 {
            let t = bisect(l.t, r.t, det_at)?;
            events.push(event_at(sys, path, EventKind::Degenerate, t, det_at(t)?)?);
            continue;
        }
        if l.ellipse * r.ellipse < 0.0 {
            let t = bisect(l.t, r.t, margin_at)?;
            events.push(event_at(sys, path, EventKind::EllipseBoundary, t, margin_at(t)?)?);
        } else if r.ellipse == 0.0 && l.ellipse != 0.0 && k + 2 < pts.len() {
            // a sample sits exactly on the boundary
            let mut ev = event_at(sys, path, EventKind::EllipseBoundary, r.t, 0.0)?;
            ev.confirmed = pts[k + 2].ellipse * l.ellipse < 0.0;
            events.push(ev);
        }
        if l.n_equator != r.n_equator {
            if let Some(ev) = locate_root_change(sys, path, l, r)? {
                events.push(ev);
            }
        }
        for (end, at_start) in [(l, k == 0), (r, k + 2 == pts.len())] {
            if !at_start {
                continue;
            }
            let on_boundary = end.ellipse.abs() < BOUNDARY_TOL || end.saddle_node < BOUNDARY_TOL;
            if on_boundary && !events.iter().any(|e| (e.t - end.t).abs() < LOCATE_TOL) {
                let kind = if end.ellipse.abs() < BOUNDARY_TOL {
                    EventKind::EllipseBoundary
                } else {
                    EventKind::SaddleNodeEquator
                };
                let mut ev = event_at(sys, path, kind, end.t, end.ellipse)?;
                ev.confirmed = false;
                events.push(ev);
            }
        }
    }
    events.sort_by(|a, b| a.t.total_cmp(&b.t));
    Ok(SweepResult {
        rows: pts,
        events,
    })
}

fn event_at(sys: &SystemDef, path: &SweepPath, kind: EventKind, t: f64, value: f64) -> Result<BifurcationEvent> {
    let (s, z) = path.at(sys, t)?;
    Ok(BifurcationEvent {
        kind,
        t,
        point: path.point(t),
        residuals: vec![value, saddle_node_residual(&s, &z)],
        confirmed: true,
    })
}

fn count_at(sys: &SystemDef, path: &SweepPath, t: f64) -> Result<usize> {
    let (s, z) = path.at(sys, t)?;
    Ok(limit_directions(&s, &z).directions.len())
}

/// Bisection on the equator root count, then refinement on a smooth signed
/// residual: `dTheta/dtheta` at the symmetric root for a pitchfork, `Theta`
/// at its local extremum for a saddle-node.
fn locate_root_change(
    sys: &SystemDef,
    path: &SweepPath,
    left: &SweepRow,
    right: &SweepRow,
) -> Result<Option<BifurcationEvent>> {
    let n_lo = left.n_equator;
    let (mut lo, mut hi) = (left.t, right.t);
    while hi - lo > 1e-7 {
        let mid = 0.5 * (lo + hi);
        if count_at(sys, path, mid)? == n_lo {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mid = 0.5 * (lo + hi);
    let (s_mid, z_mid) = path.at(sys, mid)?;
    let theta_star = argmin_sn(&s_mid, &z_mid);

    let parity_odd = |t: f64| -> Result<bool> {
        let (s, z) = path.at(sys, t)?;
        let a = theta_fn(&s, 0.0, theta_star - WINDOW, &z);
        let b = theta_fn(&s, 0.0, theta_star + WINDOW, &z);
        Ok(a * b < 0.0)
    };
    let pitchfork = parity_odd(left.t)? && parity_odd(right.t)?;
    let (kind, signed): (EventKind, Box<dyn Fn(f64) -> Result<f64>>) = if pitchfork {
        (
            EventKind::PitchforkEquator,
            Box::new(move |t| {
                let (s, z) = path.at(sys, t)?;
                Ok(lambda_theta(&s, theta_star, &z))
            }),
        )
    } else {
        (
            EventKind::SaddleNodeEquator,
            Box::new(move |t| {
                let (s, z) = path.at(sys, t)?;
                Ok(local_extremum_value(&s, &z, theta_star))
            }),
        )
    };
    let pad = 1e-3 * (right.t - left.t).max(1e-6);
    let (a, b) = ((lo - pad).max(left.t), (hi + pad).min(right.t));
    let (fa, fb) = (signed(a)?, signed(b)?);
    if fa * fb > 0.0 || !fa.is_finite() || !fb.is_finite() {
        log::debug!("root-count change near t = {mid} not confirmed by residual");
        let (s, z) = path.at(sys, mid)?;
        return Ok(Some(BifurcationEvent {
            kind,
            t: mid,
            point: path.point(mid),
            residuals: vec![signed(mid)?, saddle_node_residual(&s, &z)],
            confirmed: false,
        }));
    }
    let t = bisect(a, b, &signed)?;
    let mut ev = event_at(sys, path, kind, t, signed(t)?)?;
    ev.confirmed = true;
    Ok(Some(ev))
}

/// `Theta` at the zero of `dTheta/dtheta` closest to `theta_star`.
fn local_extremum_value(sys: &SystemDef, z: &[f64], theta_star: f64) -> f64 {
    let d = |th: f64| lambda_theta(sys, th, z);
    let (mut lo, mut hi) = (theta_star - WINDOW, theta_star + WINDOW);
    if d(lo) * d(hi) > 0.0 {
        return theta_fn(sys, 0.0, theta_star, z);
    }
    let d_lo = d(lo);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if (d(mid) > 0.0) == (d_lo > 0.0) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    theta_fn(sys, 0.0, 0.5 * (lo + hi), z)
}

/// Number of limit directions by radial class: `(attracting, repelling)`.
pub fn radial_counts(sys: &SystemDef, z: &[f64]) -> (usize, usize) {
    let report = limit_directions(sys, z);
    let att = report.directions.iter().filter(|d| d.radial == Class::Attracting).count();
    let rep = report.directions.iter().filter(|d| d.radial == Class::Repelling).count();
    (att, rep)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn elinear(a: f64, b: f64, d: f64, f1: f64, f2: f64) -> SystemDef {
        SystemDef::from_json(&format!(
            r#"{{"kind":"elinear","m":1,"a":{a},"b":{b},"d":{d},"f":[{f1},{f2}],"B":[[0,0]]}}"#
        ))
        .unwrap()
    }

    fn label(sys: &SystemDef) -> String {
        portrait(sys, &[0.0], &Regularization::Rational).unwrap().label
    }

    #[test]
    fn cases() {
        let c = |a, b, d| case_of(elinear(a, b, d, 0.0, 0.0).as_elinear().unwrap(), &[0.0]);
        assert_eq!(c(-1.0, 0.0, -1.0).case, Case::I);
        assert_eq!(c(1.0, 0.0, -1.0).case, Case::II);
        assert_eq!(c(172.0, 186.0, -200.0).case, Case::III);
        assert!(c(0.0, 1.0, -1.0).degenerate);
    }

    #[test]
    fn case_one_labels() {
        assert_eq!(label(&elinear(-1.0, 1.0, -1.0, 0.0, 0.0)), "CM0");
        assert_eq!(label(&elinear(-1.0, 0.0, -1.5, -0.6, 0.0)), "CM2");
        assert_eq!(label(&elinear(-1.0, 0.0, -1.5, -0.5, 0.0)), BIFURCATION);
        assert_eq!(label(&elinear(-2.0, 0.0, -1.0, -0.5, 0.0)), "CM4");
        assert_eq!(label(&elinear(-1.0, 0.0, -1.0, 1.1, 0.0)), "NCM2");
        assert_eq!(label(&elinear(-0.3, 0.0, -1.0, 0.5, 0.0)), "NCM4");
    }

    #[test]
    fn case_two_saddle() {
        let p = portrait(&elinear(1.0, 0.0, -1.0, 0.5, 0.0), &[0.0], &Regularization::Rational).unwrap();
        assert_eq!(p.label, "II-saddle");
        assert_eq!(p.n_equator, 4);
        assert_eq!(p.critical_stability, vec![Stability::Saddle]);
    }

    #[test]
    fn tangency_is_double_root() {
        for &(th, a, b, d) in &[(2.0 * TAU / 6.0, -2.0, 0.0, -1.0), (0.7, -1.0, 0.4, -3.0), (4.0, 2.0, -1.0, 0.5)] {
            let (f1, f2) = tangency_locus(th, a, b, d);
            let sys = elinear(a, b, d, f1, f2);
            assert!(theta_fn(&sys, 0.0, th, &[0.0]).abs() < 1e-12);
            assert!(lambda_theta(&sys, th, &[0.0]).abs() < 1e-8);
        }
        assert_eq!(tangency_locus(1.3, -1.0, 0.0, -1.0), (0.0, 0.0));
    }

    #[test]
    fn pitchfork_sweep() {
        let sys = SystemDef::from_json(
            r#"{"kind":"elinear","m":1,"params":{"f1":0.5},"a":-1,"b":0,"d":-2,"f":["f1",0],"B":[[0,0]]}"#,
        )
        .unwrap();
        let path = SweepPath::Param { name: "f1".into(), from: 0.5, to: 1.5, z: vec![0.0] };
        let res = sweep(&sys, &path, 11).unwrap();
        let forks: Vec<_> = res.events.iter().filter(|e| e.kind == EventKind::PitchforkEquator).collect();
        assert_eq!(forks.len(), 1, "{:?}", res.events);
        assert!((forks[0].point[0] - 1.0).abs() < 1e-8, "{:?}", forks[0]);
        assert!(forks[0].confirmed);
    }

    #[test]
    fn constant_path_is_quiet() {
        let sys = elinear(-1.0, 0.3, -2.0, 0.2, 0.1);
        let path = SweepPath::Z { from: vec![0.0], to: vec![1.0] };
        assert!(sweep(&sys, &path, 5).unwrap().events.is_empty());
    }

    #[test]
    fn ellipse_on_a_sample() {
        // margin = f1^2 - 1 vanishes exactly at the middle sample
        let sys = SystemDef::from_json(
            r#"{"kind":"elinear","m":1,"params":{"f1":0.5},"a":-1,"b":0,"d":-1,"f":["f1",0],"B":[[0,0]]}"#,
        )
        .unwrap();
        let path = SweepPath::Param { name: "f1".into(), from: 0.5, to: 1.5, z: vec![0.0] };
        let res = sweep(&sys, &path, 11).unwrap();
        let hits: Vec<_> = res.events.iter().filter(|e| e.kind == EventKind::EllipseBoundary).collect();
        assert_eq!(hits.len(), 1, "{:?}", res.events);
        assert_eq!(hits[0].point[0], 1.0);
        assert!(hits[0].confirmed);
    }
}
