use std::f64::consts::PI;

use codim2::classify::{portrait, sweep, Case, SweepPath, SweepResult};
use codim2::entry_chart::{limit_directions, LimitDirection};
use codim2::integrate::{
    composite_trajectory, csv_header, integrate_full, Cartesian, CompositeOptions, State, Trajectory,
};
use codim2::linalg::Mat2;
use codim2::regularization::{e_psi, e_psi_invert};
use codim2::scaling_chart::{averaged_slow_flow, critical_points, find_layer_cycle, slow_flow, CriticalPoint};
use codim2::scenarios::builtin_scenarios;
use codim2::system::convexity_margin;
use codim2::{Error, Regularization, Vec2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::config::{Config, Method, SimulateConfig};
use crate::error::CliError;
use crate::portrait;
use crate::{Artifact, Format};

#[derive(Debug, Serialize)]
pub struct CycleSummary {
    pub period: f64,
    pub mean_e: Vec2,
    pub averaged_slow_flow: Option<Vec<f64>>,
}

#[derive(Debug, Serialize)]
pub struct AnalyzeReport {
    pub z: Vec<f64>,
    pub regularization: String,
    pub case: Option<Case>,
    pub label: String,
    pub degenerate: bool,
    pub n_equator: usize,
    pub directions: Vec<LimitDirection>,
    pub cycle_integral: Option<f64>,
    pub continuum: bool,
    pub critical_points: Vec<CriticalPoint>,
    pub slow_flow: Option<Vec<f64>>,
    pub convexity_margin: Option<f64>,
    pub det_a: Option<f64>,
    pub layer_cycle: Option<CycleSummary>,
}

/// `Ok(None)` for the errors that just mean "there is no sliding flow here".
fn optional<T>(r: codim2::Result<T>) -> Result<Option<T>, CliError> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::NoCriticalSet(_) | Error::Crossing(_) | Error::SingularMatrix(_)) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

pub fn analyze_report(cfg: &Config) -> Result<AnalyzeReport, CliError> {
    let sys = cfg.system()?;
    let z = cfg.z()?;
    let psi = &cfg.regularization;
    let class = portrait(&sys, z, psi)?;
    let report = limit_directions(&sys, z);
    let points = critical_points(&sys, z, psi)?;
    let el = sys.as_elinear();
    let layer_cycle = if class.cycle == Some(true) {
        let centre = points[0].location;
        let extra = [centre + Vec2::new(0.05, 0.0), centre + Vec2::new(0.3, 0.0)];
        find_layer_cycle(&sys, z, psi, &extra).map(|c| CycleSummary {
            period: c.period,
            mean_e: c.mean_e,
            averaged_slow_flow: el.map(|el| averaged_slow_flow(el, &c, z)),
        })
    } else {
        None
    };
    Ok(AnalyzeReport {
        z: z.to_vec(),
        regularization: psi.to_string(),
        case: class.case,
        label: class.label,
        degenerate: class.degenerate,
        n_equator: class.n_equator,
        directions: report.directions,
        cycle_integral: report.cycle_integral,
        continuum: report.continuum,
        critical_points: points,
        slow_flow: optional(slow_flow(&sys, z, None))?,
        convexity_margin: el.map(|el| convexity_margin(el, z)).transpose()?,
        det_a: el.map(|el| el.det_a(z)),
        layer_cycle,
    })
}

pub fn analyze(cfg: &Config) -> Result<Vec<Artifact>, CliError> {
    let report = analyze_report(cfg)?;
    let mut w = csv_writer();
    w.write_record(["theta0", "lambda_rho", "lambda_theta", "radial", "angular", "multiplicity"])
        .map_err(numeric)?;
    for d in &report.directions {
        w.write_record([
            fmt(d.theta0),
            fmt(d.lambda_rho),
            fmt(d.lambda_theta),
            format!("{:?}", d.radial),
            format!("{:?}", d.angular),
            d.multiplicity.to_string(),
        ])
        .map_err(numeric)?;
    }
    Ok(vec![
        Artifact::new("analysis.json", Format::Json, to_json(&report)?),
        Artifact::new("directions.csv", Format::Csv, finish(w)?),
    ])
}

pub fn portrait_cmd(cfg: &Config, seed: u64) -> Result<Vec<Artifact>, CliError> {
    let sys = cfg.system()?;
    let z = cfg.z()?;
    let data = portrait::build(&sys, z, &cfg.regularization, &cfg.portrait, cfg.tolerances, seed)?;
    Ok(vec![
        Artifact::new("portrait.svg", Format::Svg, portrait::to_svg(&data)),
        Artifact::new("portrait.csv", Format::Csv, portrait::to_csv(&data)?),
        Artifact::new("portrait.json", Format::Json, to_json(&data)?),
    ])
}

fn simulate_config(cfg: &Config) -> Result<&SimulateConfig, CliError> {
    cfg.simulate.as_ref().ok_or_else(|| CliError::config("/simulate", "missing"))
}

fn end_state(tr: &Trajectory) -> Result<Vec<f64>, CliError> {
    match &tr.last().state {
        State::Cartesian(c) => {
            let mut v = vec![c.x, c.y];
            v.extend(&c.z);
            Ok(v)
        }
        other => Err(CliError::Numeric(format!("trajectory ended off the Cartesian chart: {other:?}"))),
    }
}

pub fn simulate(cfg: &Config) -> Result<Vec<Artifact>, CliError> {
    let sys = cfg.system()?;
    let sim = simulate_config(cfg)?;
    let psi = &cfg.regularization;
    let x0 = Cartesian { x: sim.x0[0], y: sim.x0[1], z: cfg.z()?.to_vec(), t: 0.0 };
    let opts = CompositeOptions { tol: cfg.tolerances, ..CompositeOptions::default() };

    let traj = if sim.t_end == 0.0 {
        integrate_full(&sys, psi, cfg.epsilon, &x0, 0.0, cfg.tolerances, Some(&[0.0]))?
    } else {
        match sim.method {
            Method::Full => {
                let n = sim.samples.max(1);
                let times: Vec<f64> = (0..=n).map(|k| sim.t_end * k as f64 / n as f64).collect();
                integrate_full(&sys, psi, cfg.epsilon, &x0, sim.t_end, cfg.tolerances, Some(&times))?
            }
            Method::Composite => composite_trajectory(&sys, psi, &x0, sim.t_end, &opts)?,
        }
    };
    let mut w = csv_writer();
    w.write_record(csv_header(sys.m())).map_err(numeric)?;
    for s in &traj.samples {
        w.write_record(s.csv_record()).map_err(numeric)?;
    }
    let mut out = vec![
        Artifact::new("trajectory.csv", Format::Csv, finish(w)?),
        Artifact::new(
            "trajectory.json",
            Format::Json,
            to_json(&json!({
                "outcome": traj.outcome,
                "regimes": traj.regimes(),
                "exit": traj.exit,
                "crossing_rule": traj.crossing_rule,
                "stats": traj.stats,
                "samples": traj.samples.len(),
            }))?,
        ),
    ];

    if !sim.epsilons.is_empty() && sim.t_end > 0.0 {
        let target = end_state(&composite_trajectory(&sys, psi, &x0, sim.t_end, &opts)?)?;
        let mut w = csv_writer();
        w.write_record(["epsilon", "error"]).map_err(numeric)?;
        for &eps in &sim.epsilons {
            let full = integrate_full(&sys, psi, eps, &x0, sim.t_end, cfg.tolerances, Some(&[sim.t_end]))?;
            let err = end_state(&full)?
                .iter()
                .zip(&target)
                .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
            w.write_record([fmt(eps), fmt(err)]).map_err(numeric)?;
        }
        out.push(Artifact::new("convergence.csv", Format::Csv, finish(w)?));
    }
    Ok(out)
}

pub fn sweep_header(path: &SweepPath, m: usize) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    match path {
        SweepPath::Z { .. } => h.extend((1..=m).map(|i| format!("z{i}"))),
        SweepPath::Param { name, .. } => h.push(name.clone()),
    }
    h.extend(["ellipse", "saddle_node", "det_a", "n_equator"].map(String::from));
    h
}

pub fn sweep_cmd(cfg: &Config) -> Result<Vec<Artifact>, CliError> {
    let sys = cfg.system()?;
    let sw = cfg.sweep.as_ref().ok_or_else(|| CliError::config("/sweep", "missing"))?;
    let result: SweepResult = sweep(&sys, &sw.path, sw.samples).map_err(|e| match e {
        Error::Config(msg) => CliError::config("/sweep/path", msg),
        other => other.into(),
    })?;
    let mut w = csv_writer();
    w.write_record(sweep_header(&sw.path, sys.m())).map_err(numeric)?;
    for r in &result.rows {
        let mut rec = vec![fmt(r.t)];
        rec.extend(r.point.iter().map(|v| fmt(*v)));
        rec.extend([fmt(r.ellipse), fmt(r.saddle_node), fmt(r.det_a), r.n_equator.to_string()]);
        w.write_record(rec).map_err(numeric)?;
    }
    Ok(vec![
        Artifact::new("events.json", Format::Json, to_json(&json!({"path": sw.path, "events": result.events}))?),
        Artifact::new("sweep.csv", Format::Csv, finish(w)?),
    ])
}

pub fn scenarios_cmd(name: Option<&str>) -> Result<Vec<Artifact>, CliError> {
    if let Some(name) = name {
        let doc = crate::config::scenario_value(name)?;
        return Ok(vec![Artifact::new(&format!("{name}.json"), Format::Json, to_json(&doc)?)]);
    }
    let list = builtin_scenarios();
    let mut w = csv_writer();
    w.write_record(["name", "label", "regularization", "description"]).map_err(numeric)?;
    for s in &list {
        w.write_record([&s.name, &s.expected_label, &s.regularization.to_string(), &s.description])
            .map_err(numeric)?;
    }
    let summary: Vec<_> = list
        .iter()
        .map(|s| {
            json!({
                "name": s.name,
                "description": s.description,
                "label": s.expected_label,
                "regularization": s.regularization,
                "z": s.z,
            })
        })
        .collect();
    Ok(vec![
        Artifact::new("scenarios.json", Format::Json, to_json(&summary)?),
        Artifact::new("scenarios.csv", Format::Csv, finish(w)?),
    ])
}

#[derive(Debug, Serialize)]
pub struct PsiCheck {
    pub name: &'static str,
    pub value: f64,
    pub limit: f64,
    pub pass: bool,
}

/// Random-sample checks of the smoothed unit-vector map. The radius is kept
/// to `|v|/eps <= 2.5`, where every built-in kind stays well conditioned.
pub fn validate_psi(psi: &Regularization, seed: u64, samples: usize) -> (Vec<PsiCheck>, bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = [0.0_f64; 3];
    let mut max_norm = 0.0_f64;
    for _ in 0..samples {
        let eps = 10f64.powf(rng.gen_range(-3.0..0.0));
        let v = Vec2::polar(rng.gen_range(-PI..PI)) * (eps * rng.gen_range(0.0..2.5));
        let k = 10f64.powf(rng.gen_range(-2.0..2.0));
        let r = Mat2::rotation(rng.gen_range(-PI..PI));
        let e = e_psi(v, eps, psi);
        worst[0] = worst[0].max((e_psi(r.mul_vec(v), eps, psi) - r.mul_vec(e)).norm());
        worst[1] = worst[1].max((e_psi(v * k, eps * k, psi) - e).norm());
        let v2 = v * (1.0 / eps);
        let unit = e_psi(v2, 1.0, psi);
        let back = e_psi_invert(unit, psi).map(|b| (b - v2).norm()).unwrap_or(f64::INFINITY);
        worst[2] = worst[2].max(back);
        max_norm = max_norm.max(unit.norm());
    }
    let checks = vec![
        PsiCheck { name: "equivariance", value: worst[0], limit: 1e-10, pass: worst[0] < 1e-10 },
        PsiCheck { name: "homogeneity", value: worst[1], limit: 1e-10, pass: worst[1] < 1e-10 },
        PsiCheck { name: "round_trip", value: worst[2], limit: 1e-10, pass: worst[2] < 1e-10 },
        PsiCheck { name: "inside_disc", value: max_norm, limit: 1.0, pass: max_norm < 1.0 },
    ];
    let ok = checks.iter().all(|c| c.pass);
    (checks, ok)
}

pub fn validate_psi_cmd(cfg: &Config, seed: u64) -> Result<(Vec<Artifact>, bool), CliError> {
    let psi = &cfg.regularization;
    let (checks, ok) = validate_psi(psi, seed, 1000);
    let doc = json!({
        "regularization": psi,
        "psi_inf": psi.psi_inf(),
        "checks": checks,
        "ok": ok,
    });
    Ok((vec![Artifact::new("psi.json", Format::Json, to_json(&doc)?)], ok))
}

pub fn fmt(v: f64) -> String {
    format!("{v:?}")
}

pub fn numeric(e: impl std::fmt::Display) -> CliError {
    CliError::Numeric(e.to_string())
}

pub fn to_json<T: Serialize>(v: &T) -> Result<String, CliError> {
    let mut s = serde_json::to_string_pretty(v).map_err(numeric)?;
    s.push('\n');
    Ok(s)
}

pub fn csv_writer() -> csv::Writer<Vec<u8>> {
    csv::Writer::from_writer(Vec::new())
}

pub fn finish(w: csv::Writer<Vec<u8>>) -> Result<String, CliError> {
    let bytes = w.into_inner().map_err(numeric)?;
    String::from_utf8(bytes).map_err(numeric)
}
