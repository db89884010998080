//! Trajectories: the regularized system, the entry chart, the slow flow, and
//! singular-limit (composite) trajectories built from them.

use std::cell::Cell;
use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::classify::{case_of, Case};
use crate::entry_chart::{entry_rhs, limit_directions, theta_fn, Class, EntryPoint, LimitDirection};
use crate::error::{Error, Result};
use crate::linalg::{angle_diff, wrap_angle, Vec2};
use crate::ode::{DenseStep, Options, Solver, Stats};
use crate::regularization::{e_map, e_psi, Regularization};
use crate::scaling_chart::{critical_direction_near, critical_points, layer_rhs, CriticalPoint};
use crate::system::SystemDef;

/// Largest `eps1` handled by the entry chart before handing off.
pub const HANDOFF_EPS1: f64 = 0.9;
const LOCATE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cartesian {
    pub x: f64,
    pub y: f64,
    pub z: Vec<f64>,
    pub t: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryState {
    pub rho: f64,
    pub theta: f64,
    pub eps1: f64,
    pub z: Vec<f64>,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingState {
    pub x2: f64,
    pub y2: f64,
    pub z: Vec<f64>,
    pub t: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "chart", rename_all = "lowercase")]
pub enum State {
    Cartesian(Cartesian),
    Entry(EntryState),
    Scaling(ScalingState),
}

impl State {
    pub fn z(&self) -> &[f64] {
        match self {
            State::Cartesian(s) => &s.z,
            State::Entry(s) => &s.z,
            State::Scaling(s) => &s.z,
        }
    }

    /// The chart's own clock: `t`, `T` or the fast time.
    pub fn clock(&self) -> f64 {
        match self {
            State::Cartesian(s) => s.t,
            State::Entry(s) => s.tau,
            State::Scaling(s) => s.t,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    Approach,
    Equator,
    Slide,
    Cross,
    Exit,
    Degenerate,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::Approach => "Approach",
            Regime::Equator => "Equator",
            Regime::Slide => "Slide",
            Regime::Cross => "Cross",
            Regime::Exit => "Exit",
            Regime::Degenerate => "Degenerate",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        [
            Regime::Approach,
            Regime::Equator,
            Regime::Slide,
            Regime::Cross,
            Regime::Exit,
            Regime::Degenerate,
        ]
        .into_iter()
        .find(|r| r.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub state: State,
    pub regime: Option<Regime>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Completed,
    /// `eps1` reached the entry-chart limit; continue in the scaling chart.
    Handoff,
    /// The critical set was lost during sliding.
    Exit,
    Degenerate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub samples: Vec<Sample>,
    pub stats: Stats,
    pub outcome: Outcome,
    /// `z` where the critical set was lost, and the exit angle.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exit: Option<(Vec<f64>, f64)>,
    /// How a crossing picked its exit direction, when one occurred.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub crossing_rule: Option<String>,
}

impl Trajectory {
    fn new() -> Self {
        Self {
            samples: Vec::new(),
            stats: Stats::default(),
            outcome: Outcome::Completed,
            exit: None,
            crossing_rule: None,
        }
    }

    pub fn last(&self) -> &Sample {
        self.samples.last().expect("trajectory has at least one sample")
    }

    pub fn regimes(&self) -> Vec<Regime> {
        let mut out: Vec<Regime> = Vec::new();
        for r in self.samples.iter().filter_map(|s| s.regime) {
            if out.last() != Some(&r) {
                out.push(r);
            }
        }
        out
    }

    fn push(&mut self, state: State, regime: Option<Regime>) {
        self.samples.push(Sample { state, regime });
    }
}

/// Column names of the trajectory CSV for `m` slow variables.
pub fn csv_header(m: usize) -> Vec<String> {
    let mut h: Vec<String> = ["chart", "t_or_T", "x", "y", "rho", "theta", "eps1"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    h.extend((1..=m).map(|i| format!("z{i}")));
    h.push("regime".into());
    h
}

fn fmt(v: f64) -> String {
    format!("{v:?}")
}

impl Sample {
    /// One CSV record. Values not defined in the sample's chart are blank.
    pub fn csv_record(&self) -> Vec<String> {
        let blank = String::new;
        let (chart, clock, x, y, rho, theta, eps1) = match &self.state {
            State::Cartesian(s) => (
                "cartesian",
                s.t,
                fmt(s.x),
                fmt(s.y),
                fmt(s.x.hypot(s.y)),
                fmt(s.y.atan2(s.x)),
                blank(),
            ),
            State::Entry(s) => {
                let xi = (1.0 - s.eps1 * s.eps1).sqrt();
                (
                    "entry",
                    s.tau,
                    fmt(s.rho * xi * s.theta.cos()),
                    fmt(s.rho * xi * s.theta.sin()),
                    fmt(s.rho),
                    fmt(s.theta),
                    fmt(s.eps1),
                )
            }
            State::Scaling(s) => (
                "scaling",
                s.t,
                fmt(s.x2),
                fmt(s.y2),
                blank(),
                fmt(s.y2.atan2(s.x2)),
                fmt(1.0 / (1.0 + s.x2 * s.x2 + s.y2 * s.y2).sqrt()),
            ),
        };
        let mut rec = vec![chart.to_string(), fmt(clock), x, y, rho, theta, eps1];
        rec.extend(self.state.z().iter().map(|v| fmt(*v)));
        rec.push(self.regime.map(|r| r.name().to_string()).unwrap_or_default());
        rec
    }

    /// Inverse of [`Sample::csv_record`].
    pub fn from_csv_record(rec: &[String]) -> Result<Self> {
        let bad = |what: &str| Error::Config(format!("trajectory csv: {what}"));
        if rec.len() < 8 {
            return Err(bad("too few columns"));
        }
        let num = |i: usize| -> Result<f64> {
            rec[i]
                .parse::<f64>()
                .map_err(|_| bad(&format!("column {i} is not a number: `{}`", rec[i])))
        };
        let m = rec.len() - 8;
        let z = (7..7 + m).map(num).collect::<Result<Vec<_>>>()?;
        let clock = num(1)?;
        let state = match rec[0].as_str() {
            "cartesian" => State::Cartesian(Cartesian { x: num(2)?, y: num(3)?, z, t: clock }),
            "entry" => State::Entry(EntryState {
                rho: num(4)?,
                theta: num(5)?,
                eps1: num(6)?,
                z,
                tau: clock,
            }),
            "scaling" => State::Scaling(ScalingState { x2: num(2)?, y2: num(3)?, z, t: clock }),
            other => return Err(bad(&format!("unknown chart `{other}`"))),
        };
        let last = &rec[rec.len() - 1];
        let regime = if last.is_empty() {
            None
        } else {
            Some(Regime::from_name(last).ok_or_else(|| bad(&format!("unknown regime `{last}`")))?)
        };
        Ok(Sample { state, regime })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    pub rtol: f64,
    pub atol: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { rtol: 1e-8, atol: 1e-10 }
    }
}

impl Tolerances {
    fn options(self) -> Options {
        Options::tol(self.rtol, self.atol)
    }
}

fn check_z(sys: &SystemDef, z: &[f64]) -> Result<()> {
    if z.len() != sys.m() {
        return Err(Error::Config(format!("z has {} components, the system has {}", z.len(), sys.m())));
    }
    Ok(())
}

fn cartesian(y: &[f64], t: f64) -> State {
    State::Cartesian(Cartesian { x: y[0], y: y[1], z: y[2..].to_vec(), t })
}

/// Integrate the regularized system with `e = e_psi(x, y; eps)`.
///
/// Records every accepted step, or only `times` when given.
pub fn integrate_full(
    sys: &SystemDef,
    psi: &Regularization,
    eps: f64,
    x0: &Cartesian,
    t_end: f64,
    tol: Tolerances,
    times: Option<&[f64]>,
) -> Result<Trajectory> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Contract(format!("epsilon must be positive, got {eps}")));
    }
    check_z(sys, &x0.z)?;
    let rhs = |_: f64, y: &[f64], dy: &mut [f64]| {
        let xy = Vec2::new(y[0], y[1]);
        let z = &y[2..];
        let e = e_psi(xy, eps, psi);
        let u = sys.u(e, xy, z);
        dy[0] = u.x;
        dy[1] = u.y;
        for (d, w) in dy[2..].iter_mut().zip(sys.w(e, xy, z)) {
            *d = w;
        }
    };
    let cap = |y: &[f64]| {
        if y[0] * y[0] + y[1] * y[1] < 10.0 * eps * eps {
            eps / 4.0
        } else {
            f64::INFINITY
        }
    };
    let mut y0 = vec![x0.x, x0.y];
    y0.extend_from_slice(&x0.z);
    let mut solver = Solver::new(rhs, x0.t, y0, tol.options());
    let mut traj = Trajectory::new();
    match times {
        None => {
            traj.push(cartesian(solver.y(), solver.t()), None);
            while solver.t() != t_end {
                let h = cap(solver.y());
                solver.step(t_end, h)?;
                traj.push(cartesian(solver.y(), solver.t()), None);
            }
        }
        Some(ts) => {
            let dir = (t_end - x0.t).signum();
            for &t in ts {
                if (t - x0.t) * dir < 0.0 || (t - t_end) * dir > 0.0 {
                    return Err(Error::Config(format!("output time {t} outside the integration span")));
                }
                while (t - solver.t()) * dir > 0.0 {
                    let h = cap(solver.y());
                    solver.step(t_end, h)?;
                }
                let y = if solver.t() == t {
                    solver.y().to_vec()
                } else {
                    solver.last_step().map(|d| d.eval(t)).unwrap_or_else(|| solver.y().to_vec())
                };
                traj.push(cartesian(&y, t), None);
            }
        }
    }
    traj.stats = solver.stats();
    Ok(traj)
}

fn entry_state(y: &[f64], tau: f64) -> State {
    State::Entry(EntryState { rho: y[0], theta: y[1], eps1: y[2], z: y[3..].to_vec(), tau })
}

/// Integrate the desingularized entry-chart system in the time `T`.
///
/// Stops with [`Outcome::Handoff`] once `eps1` reaches [`HANDOFF_EPS1`].
pub fn integrate_entry(
    sys: &SystemDef,
    psi: &Regularization,
    s0: &EntryState,
    tau_end: f64,
    rtol: f64,
) -> Result<Trajectory> {
    check_z(sys, &s0.z)?;
    if !(0.0..=HANDOFF_EPS1).contains(&s0.eps1) {
        return Err(Error::Contract(format!("eps1 must lie in [0, {HANDOFF_EPS1}], got {}", s0.eps1)));
    }
    if s0.rho < 0.0 {
        return Err(Error::Contract(format!("rho must be non-negative, got {}", s0.rho)));
    }
    let (rho_zero, eps_zero) = (s0.rho == 0.0, s0.eps1 == 0.0);
    let rhs = |_: f64, y: &[f64], dy: &mut [f64]| {
        let p = EntryPoint { rho: y[0], theta: y[1], eps1: y[2] };
        let (dr, dt, de, dz) = entry_rhs(sys, psi, p, &y[3..]);
        dy[0] = if rho_zero { 0.0 } else { dr };
        dy[1] = dt;
        dy[2] = if eps_zero { 0.0 } else { de };
        dy[3..].copy_from_slice(&dz);
    };
    let mut y0 = vec![s0.rho, s0.theta, s0.eps1];
    y0.extend_from_slice(&s0.z);
    let mut solver = Solver::new(rhs, s0.tau, y0, Options::tol(rtol, rtol * 1e-2));
    let mut traj = Trajectory::new();
    traj.push(entry_state(solver.y(), solver.t()), None);
    while solver.t() != tau_end {
        let prev_eps = solver.y()[2];
        solver.step(tau_end, f64::INFINITY)?;
        if solver.y()[2] >= HANDOFF_EPS1 && prev_eps < HANDOFF_EPS1 {
            let dense = solver.last_step().expect("a step was taken");
            let tc = locate(dense, |y| y[2] - HANDOFF_EPS1);
            let mut y = dense.eval(tc);
            y[2] = HANDOFF_EPS1;
            traj.push(entry_state(&y, tc), None);
            traj.outcome = Outcome::Handoff;
            break;
        }
        traj.push(entry_state(solver.y(), solver.t()), None);
    }
    traj.stats = solver.stats();
    Ok(traj)
}

/// Time in the last step where `g` changes sign, by bisection on the
/// continuous extension.
fn locate(dense: &DenseStep, g: impl Fn(&[f64]) -> f64) -> f64 {
    let (mut lo, mut hi) = (dense.t0, dense.t1());
    let g_lo = g(&dense.eval(lo));
    for _ in 0..200 {
        if (hi - lo).abs() <= LOCATE_TOL * (1.0 + lo.abs()) * 1e-3 {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if (g(&dense.eval(mid)) > 0.0) == (g_lo > 0.0) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Scaling chart to entry chart. `rho2 = eps`; the clock carries over.
pub fn chart_12(s: &ScalingState, rho2: f64) -> EntryState {
    let r = (1.0 + s.x2 * s.x2 + s.y2 * s.y2).sqrt();
    let theta = if s.x2 == 0.0 && s.y2 == 0.0 { 0.0 } else { s.y2.atan2(s.x2) };
    EntryState { rho: rho2 * r, theta, eps1: 1.0 / r, z: s.z.clone(), tau: s.t }
}

/// Entry chart to scaling chart, returning the state and `rho2`.
pub fn chart_21(s: &EntryState) -> Result<(ScalingState, f64)> {
    if s.eps1.is_nan() || s.eps1 <= 0.0 {
        return Err(Error::Contract("eps1 = 0 is at infinity in the scaling chart".into()));
    }
    let xi = (1.0 - s.eps1 * s.eps1).max(0.0).sqrt();
    let (sn, cs) = s.theta.sin_cos();
    Ok((
        ScalingState { x2: xi * cs / s.eps1, y2: xi * sn / s.eps1, z: s.z.clone(), t: s.tau },
        s.rho * s.eps1,
    ))
}

fn slide_state(z: &[f64], t: f64) -> State {
    State::Cartesian(Cartesian { x: 0.0, y: 0.0, z: z.to_vec(), t })
}

fn on_disc(cs: Option<Vec2>) -> Option<Vec2> {
    cs.filter(|c| c.norm() < 1.0)
}

/// Integrate the slow flow `z' = W(cs(z), 0, 0, z)` on the critical set.
///
/// `cs0` picks the branch for systems with several critical sets. Ends with
/// [`Outcome::Exit`] when `|cs|` reaches 1, located by bisection.
pub fn integrate_slow(
    sys: &SystemDef,
    z0: &[f64],
    t0: f64,
    t_end: f64,
    rtol: f64,
    cs0: Option<Vec2>,
) -> Result<Trajectory> {
    check_z(sys, z0)?;
    let seed = match cs0 {
        Some(c) => c,
        None => critical_points(sys, z0, &Regularization::Constant)?
            .first()
            .map(|p| p.direction)
            .ok_or_else(|| Error::Crossing(z0.to_vec()))?,
    };
    let start = on_disc(critical_direction_near(sys, z0, seed)).ok_or_else(|| Error::Crossing(z0.to_vec()))?;
    let guess = Cell::new(start);
    let rhs = |_: f64, z: &[f64], dz: &mut [f64]| match critical_direction_near(sys, z, guess.get()) {
        Some(cs) => dz.copy_from_slice(&sys.w(cs, Vec2::ZERO, z)),
        None => dz.fill(f64::NAN),
    };
    let mut solver = Solver::new(rhs, t0, z0.to_vec(), Options::tol(rtol, rtol * 1e-2));
    let mut traj = Trajectory::new();
    traj.push(slide_state(z0, t0), Some(Regime::Slide));
    while solver.t() != t_end {
        solver.step(t_end, f64::INFINITY)?;
        match on_disc(critical_direction_near(sys, solver.y(), guess.get())) {
            Some(cs) => {
                guess.set(cs);
                traj.push(slide_state(solver.y(), solver.t()), Some(Regime::Slide));
            }
            None => {
                let dense = solver.last_step().expect("a step was taken").clone();
                let ok = |t: f64| on_disc(critical_direction_near(sys, &dense.eval(t), guess.get()));
                let (mut lo, mut hi) = (dense.t0, dense.t1());
                while (hi - lo).abs() > LOCATE_TOL {
                    let mid = 0.5 * (lo + hi);
                    if ok(mid).is_some() {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                let z = dense.eval(lo);
                let cs = ok(lo).unwrap_or(guess.get());
                traj.push(slide_state(&z, lo), Some(Regime::Exit));
                traj.outcome = Outcome::Exit;
                traj.exit = Some((z, cs.y.atan2(cs.x)));
                break;
            }
        }
    }
    traj.stats = solver.stats();
    Ok(traj)
}

/// Integrate the layer problem at frozen `z` from `v0` for fast time `t_end`.
pub fn integrate_layer(
    sys: &SystemDef,
    psi: &Regularization,
    z: &[f64],
    v0: Vec2,
    t_end: f64,
    tol: Tolerances,
) -> Result<Vec<ScalingState>> {
    check_z(sys, z)?;
    let rhs = |_: f64, y: &[f64], dy: &mut [f64]| {
        let v = layer_rhs(sys, Vec2::new(y[0], y[1]), z, psi);
        dy[0] = v.x;
        dy[1] = v.y;
    };
    let mut solver = Solver::new(rhs, 0.0, vec![v0.x, v0.y], tol.options());
    let state = |y: &[f64], t: f64| ScalingState { x2: y[0], y2: y[1], z: z.to_vec(), t };
    let mut out = vec![state(solver.y(), 0.0)];
    while solver.t() != t_end {
        solver.step(t_end, f64::INFINITY)?;
        out.push(state(solver.y(), solver.t()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompositeOptions {
    /// Distance to the discontinuity set that counts as arrival.
    pub delta: f64,
    pub tol: Tolerances,
    /// Radius in the scaling chart where the layer flow starts.
    pub layer_radius: f64,
    /// Minimum fast-time budget of the layer flow.
    pub layer_t_max: f64,
    /// Maximum tolerated angle between the equator flow's end point and a limit direction.
    pub match_tol: f64,
    pub max_phases: usize,
}

impl Default for CompositeOptions {
    fn default() -> Self {
        Self {
            delta: 1e-6,
            tol: Tolerances::default(),
            layer_radius: 1e3,
            layer_t_max: 1e4,
            match_tol: 1e-2,
            max_phases: 16,
        }
    }
}

pub const RULE_EQUATOR: &str = "equator: reached direction is radially repelling";
pub const RULE_LAYER: &str = "layer-flow continuation from the entry direction";

/// Nonsmooth flow (`e = (x, y)/|(x, y)|`) until `|(x, y)| < delta` or `t_end`.
/// Returns the arrival state if the discontinuity set was reached.
fn nonsmooth_phase(
    sys: &SystemDef,
    start: &Cartesian,
    t_end: f64,
    opts: &CompositeOptions,
    regime: Regime,
    traj: &mut Trajectory,
) -> Result<Option<Cartesian>> {
    let rhs = |_: f64, y: &[f64], dy: &mut [f64]| {
        let xy = Vec2::new(y[0], y[1]);
        let z = &y[2..];
        let e = e_map(xy).unwrap_or(Vec2::ZERO);
        let u = sys.u(e, xy, z);
        dy[0] = u.x;
        dy[1] = u.y;
        for (d, w) in dy[2..].iter_mut().zip(sys.w(e, xy, z)) {
            *d = w;
        }
    };
    let rho = |y: &[f64]| y[0].hypot(y[1]);
    let mut y0 = vec![start.x, start.y];
    y0.extend_from_slice(&start.z);
    traj.push(cartesian(&y0, start.t), Some(regime));
    if rho(&y0) < opts.delta {
        return Ok(Some(start.clone()));
    }
    let speed = |y: &[f64]| sys.u(e_map(Vec2::new(y[0], y[1])).unwrap_or(Vec2::ZERO), Vec2::new(y[0], y[1]), &y[2..]).norm();
    let mut solver = Solver::new(rhs, start.t, y0, opts.tol.options());
    while solver.t() != t_end {
        let y = solver.y();
        let h_max = 0.5 * rho(y) / speed(y).max(1e-300);
        solver.step(t_end, h_max)?;
        if rho(solver.y()) < opts.delta {
            let dense = solver.last_step().expect("a step was taken").clone();
            let tc = locate(&dense, |y| rho(y) - opts.delta);
            let y = dense.eval(tc);
            traj.push(cartesian(&y, tc), Some(regime));
            traj.stats += solver.stats();
            return Ok(Some(Cartesian { x: y[0], y: y[1], z: y[2..].to_vec(), t: tc }));
        }
        traj.push(cartesian(solver.y(), solver.t()), Some(regime));
    }
    traj.stats += solver.stats();
    Ok(None)
}

/// Angular flow on the equator (`rho = eps1 = 0`) until it settles.
fn equator_phase(sys: &SystemDef, theta0: f64, z: &[f64], traj: &mut Trajectory) -> Result<f64> {
    let rhs = |_: f64, y: &[f64], dy: &mut [f64]| dy[0] = theta_fn(sys, 0.0, y[0], z);
    let push = |traj: &mut Trajectory, th: f64, tau: f64| {
        traj.push(
            State::Entry(EntryState { rho: 0.0, theta: th, eps1: 0.0, z: z.to_vec(), tau }),
            Some(Regime::Equator),
        )
    };
    push(traj, theta0, 0.0);
    let mut solver = Solver::new(rhs, 0.0, vec![theta0], Options::tol(1e-12, 1e-14));
    let tau_max = 1e4;
    while solver.t() < tau_max && theta_fn(sys, 0.0, solver.y()[0], z).abs() > 1e-13 {
        solver.step(tau_max, f64::INFINITY)?;
        push(traj, solver.y()[0], solver.t());
    }
    traj.stats += solver.stats();
    Ok(solver.y()[0])
}

enum LayerEnd {
    Critical(CriticalPoint),
    Escape(f64),
    Undecided,
}

/// Layer flow from far out along `theta` until it settles on a stable critical
/// point or leaves through the equator again.
fn layer_phase(
    sys: &SystemDef,
    psi: &Regularization,
    z: &[f64],
    dir: &LimitDirection,
    opts: &CompositeOptions,
    buffer: &mut Vec<State>,
) -> Result<LayerEnd> {
    let theta = dir.theta0;
    // far out the radial speed is about |lambda_rho|
    let t_max = opts.layer_t_max.max(10.0 * opts.layer_radius / dir.lambda_rho.abs());
    let stable: Vec<CriticalPoint> = critical_points(sys, z, psi)?
        .into_iter()
        .filter(|p| p.stability.is_stable())
        .collect();
    let rhs = |_: f64, y: &[f64], dy: &mut [f64]| {
        let v = layer_rhs(sys, Vec2::new(y[0], y[1]), z, psi);
        dy[0] = v.x;
        dy[1] = v.y;
    };
    let r0 = opts.layer_radius;
    let v0 = Vec2::polar(theta) * r0;
    let mut solver = Solver::new(rhs, 0.0, vec![v0.x, v0.y], Options::tol(1e-10, 1e-12));
    let state = |y: &[f64], t: f64| State::Scaling(ScalingState { x2: y[0], y2: y[1], z: z.to_vec(), t });
    buffer.push(state(solver.y(), 0.0));
    while solver.t() < t_max {
        solver.step(t_max, f64::INFINITY)?;
        let v = Vec2::new(solver.y()[0], solver.y()[1]);
        buffer.push(state(solver.y(), solver.t()));
        if let Some(p) = stable.iter().find(|p| (v - p.location).norm() < 1e-6 * (1.0 + p.location.norm())) {
            return Ok(LayerEnd::Critical(p.clone()));
        }
        if v.norm() > 2.0 * r0 {
            return Ok(LayerEnd::Escape(v.y.atan2(v.x)));
        }
    }
    Ok(LayerEnd::Undecided)
}

fn nearest_direction(dirs: &[LimitDirection], theta: f64, tol: f64) -> Option<&LimitDirection> {
    dirs.iter()
        .map(|d| (angle_diff(d.theta0, theta).abs(), d))
        .filter(|(gap, _)| *gap <= tol)
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, d)| d)
}

/// The singular-limit candidate trajectory from `x0` up to `t_end`.
pub fn composite_trajectory(
    sys: &SystemDef,
    psi: &Regularization,
    x0: &Cartesian,
    t_end: f64,
    opts: &CompositeOptions,
) -> Result<Trajectory> {
    check_z(sys, &x0.z)?;
    let mut traj = Trajectory::new();
    let mut start = x0.clone();
    let mut regime = Regime::Approach;
    for _ in 0..opts.max_phases {
        let Some(arrival) = nonsmooth_phase(sys, &start, t_end, opts, regime, &mut traj)? else {
            return Ok(traj);
        };
        let z = arrival.z.clone();
        let t = arrival.t;
        let theta_a = if arrival.x == 0.0 && arrival.y == 0.0 { 0.0 } else { arrival.y.atan2(arrival.x) };
        let theta = equator_phase(sys, theta_a, &z, &mut traj)?;
        let report = limit_directions(sys, &z);
        let Some(dir) = nearest_direction(&report.directions, theta, opts.match_tol).cloned() else {
            return Ok(degenerate(traj, &z, t));
        };
        if !dir.is_hyperbolic() {
            return Ok(degenerate(traj, &z, t));
        }
        let leave = |theta: f64, regime: Regime| -> (Cartesian, Regime) {
            let p = Vec2::polar(theta) * (2.0 * opts.delta);
            (Cartesian { x: p.x, y: p.y, z: z.clone(), t }, regime)
        };
        if dir.radial == Class::Repelling {
            traj.crossing_rule = Some(RULE_EQUATOR.into());
            (start, regime) = leave(dir.theta0, Regime::Cross);
            continue;
        }

        let mut buffer = Vec::new();
        let shortcut = sys
            .as_elinear()
            .is_some_and(|el| case_of(el, &z).case == Case::III);
        let end = if shortcut {
            // every orbit of the layer problem ends on the critical point or its cycle
            match critical_points(sys, &z, psi)?.into_iter().next() {
                Some(p) => LayerEnd::Critical(p),
                None => layer_phase(sys, psi, &z, &dir, opts, &mut buffer)?,
            }
        } else {
            layer_phase(sys, psi, &z, &dir, opts, &mut buffer)?
        };
        match end {
            LayerEnd::Critical(p) => {
                for s in buffer {
                    traj.push(s, Some(Regime::Slide));
                }
                let slow = integrate_slow(sys, &z, t, t_end, opts.tol.rtol, Some(p.direction))?;
                traj.stats += slow.stats;
                traj.samples.extend(slow.samples);
                if slow.outcome != Outcome::Exit {
                    return Ok(traj);
                }
                let (z_exit, theta_exit) = slow.exit.clone().expect("exit recorded");
                let t_exit = traj.last().state.clock();
                traj.exit = slow.exit;
                let p = Vec2::polar(theta_exit) * (2.0 * opts.delta);
                start = Cartesian { x: p.x, y: p.y, z: z_exit, t: t_exit };
                regime = Regime::Exit;
            }
            LayerEnd::Escape(theta_out) => {
                for s in buffer {
                    traj.push(s, Some(Regime::Cross));
                }
                let out = nearest_direction(&report.directions, theta_out, opts.match_tol)
                    .filter(|d| d.radial == Class::Repelling)
                    .map_or(theta_out, |d| d.theta0);
                traj.crossing_rule = Some(RULE_LAYER.into());
                (start, regime) = leave(wrap_angle(out), Regime::Cross);
            }
            LayerEnd::Undecided => return Ok(degenerate(traj, &z, t)),
        }
    }
    log::warn!("composite trajectory stopped after {} phases", opts.max_phases);
    let last = traj.last().state.clone();
    Ok(degenerate(traj, last.z(), last.clock()))
}

fn degenerate(mut traj: Trajectory, z: &[f64], t: f64) -> Trajectory {
    traj.push(slide_state(z, t), Some(Regime::Degenerate));
    traj.outcome = Outcome::Degenerate;
    traj
}

/// Points `(x2, y2)` on a circle of radius `r` around the origin.
pub fn ring(r: f64, n: usize) -> Vec<Vec2> {
    (0..n).map(|k| Vec2::polar(TAU * k as f64 / n as f64) * r).collect()
}
