//! Phase portraits on the compactified scaling chart.
//!
//! A point `v` of the scaling chart is drawn at `v / sqrt(1 + |v|^2)`, so the
//! chart fills the open unit disc and the equator of the blowup is the unit
//! circle.

use std::fmt::Write;

use codim2::classify::portrait as classify_portrait;
use codim2::entry_chart::{limit_directions, Class};
use codim2::integrate::{integrate_layer, Tolerances};
use codim2::scaling_chart::{critical_points, find_layer_cycle, Stability};
use codim2::{Regularization, SystemDef, Vec2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::commands::{csv_writer, finish, fmt, numeric};
use crate::config::PortraitConfig;
use crate::error::CliError;

/// Seeds are drawn inside this radius of the disc.
const SEED_RADIUS: f64 = 0.95;
/// Minimum spacing of kept polyline vertices, in disc units.
const VERTEX_SPACING: f64 = 5e-3;
/// Streamlines are cut after this arc length, so orbits winding onto a
/// cycle or focus do not repeat themselves.
const MAX_ARC: f64 = 8.0;
const SIZE: f64 = 480.0;

#[derive(Debug, Clone, Serialize)]
pub struct DirectionMarker {
    pub theta: f64,
    pub point: [f64; 2],
    pub radial: Class,
    pub angular: Class,
}

#[derive(Debug, Clone, Serialize)]
pub struct CriticalMarker {
    pub point: [f64; 2],
    pub stability: Stability,
}

#[derive(Debug, Clone, Serialize)]
pub struct PortraitData {
    pub label: String,
    pub streamlines: Vec<Vec<[f64; 2]>>,
    pub directions: Vec<DirectionMarker>,
    pub critical: Vec<CriticalMarker>,
    pub cycle: Option<Vec<[f64; 2]>>,
}

pub fn project(v: Vec2) -> [f64; 2] {
    let s = 1.0 / (1.0 + v.norm_sq()).sqrt();
    [v.x * s, v.y * s]
}

fn unproject(p: [f64; 2]) -> Vec2 {
    let s = 1.0 / (1.0 - p[0] * p[0] - p[1] * p[1]).sqrt();
    Vec2::new(p[0] * s, p[1] * s)
}

fn thin(points: impl Iterator<Item = [f64; 2]>) -> Vec<[f64; 2]> {
    let mut out: Vec<[f64; 2]> = Vec::new();
    let mut pending = None;
    let mut arc = 0.0;
    for p in points {
        match out.last() {
            Some(q) if (p[0] - q[0]).hypot(p[1] - q[1]) < VERTEX_SPACING => pending = Some(p),
            Some(_) if arc > MAX_ARC => break,
            q => {
                arc += q.map_or(0.0, |q| (p[0] - q[0]).hypot(p[1] - q[1]));
                out.push(p);
                pending = None;
            }
        }
    }
    out.extend(pending);
    out
}

pub fn build(
    sys: &SystemDef,
    z: &[f64],
    psi: &Regularization,
    opts: &PortraitConfig,
    tol: Tolerances,
    seed: u64,
) -> Result<PortraitData, CliError> {
    let class = classify_portrait(sys, z, psi)?;
    let report = limit_directions(sys, z);
    let points = critical_points(sys, z, psi)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut streamlines = Vec::with_capacity(opts.streamlines);
    for _ in 0..opts.streamlines {
        let r = SEED_RADIUS * rng.gen_range(0.0_f64..1.0).sqrt();
        let a = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let v0 = unproject([r * a.cos(), r * a.sin()]);
        match integrate_layer(sys, psi, z, v0, opts.t_max, tol) {
            Ok(path) => {
                let line = thin(path.iter().map(|s| project(Vec2::new(s.x2, s.y2))));
                if line.len() > 1 {
                    streamlines.push(line);
                }
            }
            Err(e) => log::warn!("streamline from {v0:?} dropped: {e}"),
        }
    }

    let directions = report
        .directions
        .iter()
        .map(|d| DirectionMarker {
            theta: d.theta0,
            point: [d.theta0.cos(), d.theta0.sin()],
            radial: d.radial,
            angular: d.angular,
        })
        .collect();
    let critical = points
        .iter()
        .map(|p| CriticalMarker { point: project(p.location), stability: p.stability })
        .collect();
    let cycle = if class.cycle == Some(true) {
        let centre = points[0].location;
        let extra = [centre + Vec2::new(0.05, 0.0), centre + Vec2::new(0.3, 0.0)];
        find_layer_cycle(sys, z, psi, &extra).map(|c| thin(c.samples.iter().map(|v| project(*v))))
    } else {
        None
    };
    Ok(PortraitData { label: class.label, streamlines, directions, critical, cycle })
}

fn class_name(c: Class) -> &'static str {
    match c {
        Class::Attracting => "attracting",
        Class::Repelling => "repelling",
        Class::NonHyperbolic => "nonhyperbolic",
    }
}

fn stability_name(s: Stability) -> &'static str {
    match s {
        Stability::StableNode => "stable-node",
        Stability::StableFocus => "stable-focus",
        Stability::UnstableNode => "unstable-node",
        Stability::UnstableFocus => "unstable-focus",
        Stability::Saddle => "saddle",
        Stability::NonHyperbolic => "nonhyperbolic",
    }
}

fn radial_colour(c: Class) -> &'static str {
    match c {
        Class::Attracting => "#1f5fbf",
        Class::Repelling => "#c0392b",
        Class::NonHyperbolic => "#7f7f7f",
    }
}

/// Disc coordinates to SVG user units (y grows downwards).
fn px(p: [f64; 2]) -> (f64, f64) {
    let half = SIZE / 2.0;
    (half + 0.9 * half * p[0], half - 0.9 * half * p[1])
}

fn polyline(out: &mut String, class: &str, pts: &[[f64; 2]], style: &str) {
    let coords: Vec<String> = pts
        .iter()
        .map(|p| {
            let (x, y) = px(*p);
            format!("{x:.2},{y:.2}")
        })
        .collect();
    let _ = writeln!(out, r#"<polyline class="{class}" points="{}" {style}/>"#, coords.join(" "));
}

pub fn to_svg(data: &PortraitData) -> String {
    let mut s = String::new();
    let half = SIZE / 2.0;
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(s, "<title>{}</title>", data.label);
    let _ = writeln!(s, r##"<rect width="{SIZE}" height="{SIZE}" fill="#ffffff"/>"##);
    let _ = writeln!(
        s,
        r##"<circle class="equator" cx="{half:.2}" cy="{half:.2}" r="{:.2}" fill="none" stroke="#000000" stroke-width="1.5"/>"##,
        0.9 * half
    );
    let _ = writeln!(s, r#"<g class="streamlines">"#);
    for line in &data.streamlines {
        polyline(&mut s, "streamline", line, r##"fill="none" stroke="#9a9a9a" stroke-width="0.8""##);
        if let [.., a, b] = line.as_slice() {
            let (x0, y0) = px(*a);
            let (x1, y1) = px(*b);
            let len = (x1 - x0).hypot(y1 - y0);
            if len > 0.0 {
                let (ux, uy) = ((x1 - x0) / len, (y1 - y0) / len);
                let (bx, by) = (x1 - 6.0 * ux, y1 - 6.0 * uy);
                let _ = writeln!(
                    s,
                    r##"<path class="arrow" d="M{x1:.2},{y1:.2} L{:.2},{:.2} L{:.2},{:.2} Z" fill="#9a9a9a"/>"##,
                    bx - 2.5 * uy,
                    by + 2.5 * ux,
                    bx + 2.5 * uy,
                    by - 2.5 * ux
                );
            }
        }
    }
    let _ = writeln!(s, "</g>");
    if let Some(cycle) = &data.cycle {
        polyline(&mut s, "cycle", cycle, r##"fill="none" stroke="#2e8b57" stroke-width="2""##);
    }
    for c in &data.critical {
        let (x, y) = px(c.point);
        let fill = if c.stability.is_stable() { "#000000" } else { "#ffffff" };
        let _ = writeln!(
            s,
            r##"<rect class="critical {}" x="{:.2}" y="{:.2}" width="9" height="9" fill="{fill}" stroke="#000000"/>"##,
            stability_name(c.stability),
            x - 4.5,
            y - 4.5
        );
    }
    for d in &data.directions {
        let (x, y) = px(d.point);
        let colour = radial_colour(d.radial);
        let fill = if d.angular == Class::Attracting { colour } else { "#ffffff" };
        let _ = writeln!(
            s,
            r#"<circle class="direction radial-{} angular-{}" cx="{x:.2}" cy="{y:.2}" r="6" fill="{fill}" stroke="{colour}" stroke-width="2"/>"#,
            class_name(d.radial),
            class_name(d.angular)
        );
    }
    let _ = writeln!(s, "</svg>");
    s
}

/// One row per vertex: `kind, index, x, y, class`.
pub fn to_csv(data: &PortraitData) -> Result<String, CliError> {
    let mut w = csv_writer();
    w.write_record(["kind", "index", "x", "y", "class"]).map_err(numeric)?;
    let mut row = |kind: &str, i: usize, p: [f64; 2], class: &str| {
        w.write_record([kind, &i.to_string(), &fmt(p[0]), &fmt(p[1]), class])
    };
    for (i, line) in data.streamlines.iter().enumerate() {
        for p in line {
            row("streamline", i, *p, "").map_err(numeric)?;
        }
    }
    for (i, d) in data.directions.iter().enumerate() {
        let class = format!("{}/{}", class_name(d.radial), class_name(d.angular));
        row("direction", i, d.point, &class).map_err(numeric)?;
    }
    for (i, c) in data.critical.iter().enumerate() {
        row("critical", i, c.point, stability_name(c.stability)).map_err(numeric)?;
    }
    for p in data.cycle.iter().flatten() {
        row("cycle", 0, *p, "").map_err(numeric)?;
    }
    finish(w)
}
