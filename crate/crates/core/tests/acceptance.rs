//! One PASS/FAIL line per acceptance criterion; exits non-zero if any fails.

use std::f64::consts::{PI, TAU};
use std::time::{Duration, Instant};

use codim2::classify::{portrait, sweep, EventKind, SweepPath};
use codim2::entry_chart::{lambda_rho, limit_directions, Class};
use codim2::integrate::{
    composite_trajectory, integrate_full, integrate_slow, Cartesian, CompositeOptions, Regime, State,
    Tolerances, Trajectory,
};
use codim2::linalg::angle_diff;
use codim2::regularization::{e_psi, e_psi_invert, e_psi_jacobian};
use codim2::scaling_chart::{
    averaged_slow_flow, critical_points, find_layer_cycle, layer_divergence, slow_flow, Stability,
};
use codim2::scenarios::{
    ball_in_pool, case3, case_one_system, chi, example_ar, example_nonunique, BALL_DEFAULTS,
    CASE_ONE_SETS,
};
use codim2::system::{convexity_margin, filippov_sigma};
use codim2::{Mat2, Regularization, SystemDef, Vec2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit_s: f64) -> Result<(), String> {
    check(
        elapsed.as_secs_f64() < limit_s,
        format!("runtime {:.2}s exceeds {limit_s}s", elapsed.as_secs_f64()),
    )
}

fn elinear(a: f64, b: f64, d: f64, f: Vec2, brow: Vec2, g: f64) -> SystemDef {
    SystemDef::from_json(&format!(
        r#"{{"kind":"elinear","m":1,"a":{a:?},"b":{b:?},"d":{d:?},"f":[{:?},{:?}],"B":[[{:?},{:?}]],"g":[{g:?}]}}"#,
        f.x, f.y, brow.x, brow.y
    ))
    .unwrap()
}

/// Random `(a, b, d)` with `-A^{-1} f` placed inside the unit disc.
fn sliding_system(rng: &mut ChaCha8Rng, det_negative: bool) -> SystemDef {
    loop {
        let a: f64 = rng.gen_range(-3.0..3.0);
        let b: f64 = rng.gen_range(-3.0..3.0);
        let d: f64 = rng.gen_range(-3.0..3.0);
        let det = a * d + b * b;
        if det.abs() < 1e-2 || (det_negative && det > 0.0) {
            continue;
        }
        let cs = Vec2::polar(rng.gen_range(-PI..PI)) * rng.gen_range(0.0..0.95);
        let f = -Mat2::new(a, -b, b, d).mul_vec(cs);
        let brow = Vec2::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        return elinear(a, b, d, f, brow, rng.gen_range(-1.0..1.0));
    }
}

fn ac1() -> Outcome {
    let start = Instant::now();
    let sc = example_ar();
    let sys = sc.system().unwrap();
    let report = limit_directions(&sys, &[0.0]);
    let dirs = &report.directions;
    check(dirs.len() == 6, format!("{} directions", dirs.len()))?;
    let mut worst: f64 = 0.0;
    for (k, dir) in dirs.iter().enumerate() {
        let expected = k as f64 * PI / 3.0;
        worst = worst.max(angle_diff(dir.theta0, expected).abs());
        let radial = if k == 0 { Class::Repelling } else { Class::Attracting };
        check(dir.radial == radial, format!("radial class at {expected}: {:?}", dir.radial))?;
        let angular = if k % 2 == 0 { Class::Attracting } else { Class::Repelling };
        check(dir.angular == angular, format!("angular class at {expected}: {:?}", dir.angular))?;
    }
    check(worst < 1e-10, format!("root error {worst:e}"))?;

    let pts = critical_points(&sys, &[0.0], &Regularization::Constant).unwrap();
    // x2^2 = 1 +- 2/sqrt(5) when psi is constant
    let find = |x: f64| pts.iter().find(|p| (p.location.x - x).abs() < 1e-6 && p.location.y.abs() < 1e-6);
    let plus = (1.0 + 2.0 / 5f64.sqrt()).sqrt();
    let minus = -(1.0 - 2.0 / 5f64.sqrt()).sqrt();
    let saddle = find(plus).ok_or(format!("no critical point at {plus}"))?;
    let node = find(minus).ok_or(format!("no critical point at {minus}"))?;
    check((saddle.location.x - 1.37638).abs() < 5e-6 && (node.location.x + 0.32492).abs() < 5e-6, "printed digits")?;
    check(pts.len() == 2, format!("{} critical points", pts.len()))?;
    check(saddle.stability == Stability::Saddle, format!("{:?}", saddle.stability))?;
    check(node.stability == Stability::StableNode, format!("{:?}", node.stability))?;
    within(start.elapsed(), 1.0)?;
    Ok(format!("6 roots within {worst:.1e}; saddle at {:.6}, node at {:.6}", saddle.location.x, node.location.x))
}

fn ac2() -> Outcome {
    let start = Instant::now();
    let p = BALL_DEFAULTS;
    let sys = ball_in_pool(p).system().unwrap();
    let zc = p.z_crit();
    let mut rng = ChaCha8Rng::seed_from_u64(2);

    let mut worst_lambda: f64 = 0.0;
    for _ in 0..50 {
        let z = Vec2::polar(rng.gen_range(-PI..PI)) * rng.gen_range(0.05..0.95) * zc;
        let zs = [z.x, z.y];
        let dirs = limit_directions(&sys, &zs).directions;
        check(dirs.len() == 2, format!("{} directions at {zs:?}", dirs.len()))?;
        let th2 = z.y.atan2(z.x) + PI;
        for target in [z.y.atan2(z.x), th2] {
            check(
                dirs.iter().any(|d| angle_diff(d.theta0, target).abs() < 1e-8),
                format!("no direction at {target}"),
            )?;
        }
        let closed = -3.5 * p.mu * p.g + p.k / p.m * z.norm();
        worst_lambda = worst_lambda.max((lambda_rho(&sys, th2, &zs) - closed).abs());
    }
    check(worst_lambda < 1e-8, format!("lambda_rho error {worst_lambda:e}"))?;

    let u = Vec2::polar(0.7);
    let path = SweepPath::Z {
        from: vec![0.5 * zc * u.x, 0.5 * zc * u.y],
        to: vec![1.5 * zc * u.x, 1.5 * zc * u.y],
    };
    let res = sweep(&sys, &path, 40).unwrap();
    let ev = res
        .events
        .iter()
        .find(|e| e.kind == EventKind::EllipseBoundary)
        .ok_or(format!("no stick-slip event in {:?}", res.events))?;
    let at = Vec2::new(ev.point[0], ev.point[1]).norm();
    let rel = (at - zc).abs() / zc;
    check(rel < 1e-8, format!("event at |z| = {at}, z_crit = {zc}"))?;

    let z0 = [1.0, -0.5];
    let tr = integrate_slow(&sys, &z0, 0.0, 2.0, 1e-11, None).unwrap();
    let rate = 5.0 * p.k / (7.0 * p.m);
    let mut worst_slow: f64 = 0.0;
    for s in &tr.samples {
        let t = s.state.clock();
        let decay = (-rate * t).exp();
        for (zi, z0i) in s.state.z().iter().zip(z0) {
            worst_slow = worst_slow.max((zi - decay * z0i).abs() / (decay * z0i).abs());
        }
    }
    check(tr.last().state.clock() == 2.0, "slow flow stopped early")?;
    check(worst_slow < 1e-8, format!("slow flow relative error {worst_slow:e}"))?;
    within(start.elapsed(), 5.0)?;
    Ok(format!(
        "lambda_rho err {worst_lambda:.1e}; event rel err {rel:.1e}; slow-flow rel err {worst_slow:.1e}"
    ))
}

fn ac3() -> Outcome {
    let start = Instant::now();
    let expected = [
        Stability::StableNode,
        Stability::StableFocus,
        Stability::UnstableFocus,
        Stability::UnstableNode,
    ];
    let mut found = Vec::new();
    for (n, want) in (1..=4).zip(expected) {
        let sc = case3(n).unwrap();
        let sys = sc.system().unwrap();
        let pts = critical_points(&sys, &sc.z, &sc.regularization).unwrap();
        check(pts.len() == 1, format!("n = {n}: {} critical points", pts.len()))?;
        check(pts[0].stability == want, format!("n = {n}: {:?}", pts[0].stability))?;
        let c = pts[0].location;
        let extra = [c + Vec2::new(0.05, 0.0), c + Vec2::new(0.3, 0.0)];
        let cycle = find_layer_cycle(&sys, &sc.z, &sc.regularization, &extra);
        check(cycle.is_some() == (n >= 3), format!("n = {n}: cycle found = {}", cycle.is_some()))?;
        if let Some(c) = cycle {
            found.push(format!("n={n} period {:.4}", c.period));
        }
    }
    within(start.elapsed(), 10.0)?;
    Ok(format!("stabilities match; cycles: {}", found.join(", ")))
}

fn ac4() -> Outcome {
    let start = Instant::now();
    let mut labels = Vec::new();
    for (name, p, want) in CASE_ONE_SETS {
        let sys = SystemDef::from_spec(case_one_system(p)).unwrap();
        let got = portrait(&sys, &[0.0], &Regularization::Rational).unwrap();
        check(got.label == want, format!("{name}: {} (expected {want})", got.label))?;
        labels.push(format!("{name}={}", got.label));
    }
    within(start.elapsed(), 2.0)?;
    Ok(labels.join(" "))
}

fn ac5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let sys = sliding_system(&mut rng, false);
        let el = sys.elinear().unwrap();
        check(convexity_margin(el, &[0.0]).unwrap() < 0.0, "sampled system has no critical set")?;
        let s = slow_flow(&sys, &[0.0], None).unwrap();
        let f = filippov_sigma(el, &[0.0]).unwrap();
        worst = worst.max((s[0] - f[0]).abs());
    }
    check(worst < 1e-12, format!("slow flow vs Filippov {worst:e}"))?;
    for _ in 0..100 {
        let sys = sliding_system(&mut rng, true);
        for psi in Regularization::BUILTIN {
            let pts = critical_points(&sys, &[0.0], &psi).unwrap();
            check(pts.len() == 1, format!("{} critical points", pts.len()))?;
            check(pts[0].stability == Stability::Saddle, format!("{psi:?}: {:?}", pts[0].stability))?;
        }
    }
    Ok(format!("max |slow - Filippov| = {worst:.1e}; 400 saddles"))
}

// The disc bound and the round trip use |v| / eps <= 2.5: the exponential
// profile saturates to 1 in floating point for larger arguments.
fn ac6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = [0.0_f64; 3];
    let mut max_norm: f64 = 0.0;
    for psi in Regularization::BUILTIN {
        for _ in 0..1000 {
            let v = Vec2::polar(rng.gen_range(-PI..PI)) * rng.gen_range(0.0..2.5);
            let eps = rng.gen_range(1e-3..2.0);
            let r = Mat2::rotation(rng.gen_range(-PI..PI));
            let k = rng.gen_range(1e-2..1e2);
            let e = e_psi(v, eps, &psi);
            worst[0] = worst[0].max((e_psi(r.mul_vec(v), eps, &psi) - r.mul_vec(e)).norm());
            worst[1] = worst[1].max((e_psi(v * k, eps * k, &psi) - e).norm());
            let unit = e_psi(v, 1.0, &psi);
            worst[2] = worst[2].max((e_psi_invert(unit, &psi).unwrap() - v).norm());
            max_norm = max_norm.max(unit.norm());
        }
    }
    check(worst.iter().all(|w| *w < 1e-10), format!("equivariance/homogeneity/round trip {worst:?}"))?;
    check(max_norm < 1.0, format!("max |e_psi| = {max_norm}"))?;
    Ok(format!(
        "equivariance {:.1e}, homogeneity {:.1e}, round trip {:.1e}, max |e| {max_norm:.6}",
        worst[0], worst[1], worst[2]
    ))
}

fn ac7() -> Outcome {
    let sc = case3(3).unwrap();
    let sys = sc.system().unwrap();
    let el = sys.elinear().unwrap();
    let c = critical_points(&sys, &sc.z, &sc.regularization).unwrap()[0].location;
    let extra = [c + Vec2::new(0.05, 0.0), c + Vec2::new(0.3, 0.0)];
    let cycle = find_layer_cycle(&sys, &sc.z, &sc.regularization, &extra).ok_or("no cycle for n = 3")?;
    let avg = averaged_slow_flow(el, &cycle, &sc.z);
    let sigma = filippov_sigma(el, &sc.z).unwrap();
    let err = (avg[0] - sigma[0]).abs();
    check(err < 1e-4, format!("averaged {} vs {}", avg[0], sigma[0]))?;
    Ok(format!("averaged {:.6} vs -BA^-1 f {:.6} (err {err:.1e})", avg[0], sigma[0]))
}

fn final_xy(tr: &Trajectory) -> Vec<f64> {
    let State::Cartesian(c) = &tr.last().state else { panic!("expected a Cartesian end state") };
    let mut v = vec![c.x, c.y];
    v.extend(&c.z);
    v
}

fn ac8() -> Outcome {
    let start = Instant::now();
    let sys = ball_in_pool(BALL_DEFAULTS).system().unwrap();
    let psi = Regularization::Rational;
    let x0 = Cartesian { x: 1.0, y: 0.5, z: vec![1.0, -0.5], t: 0.0 };
    let comp = composite_trajectory(&sys, &psi, &x0, 1.0, &CompositeOptions::default()).unwrap();
    let target = final_xy(&comp);
    let mut errs = Vec::new();
    for eps in [1e-1, 1e-2, 1e-3] {
        let tol = Tolerances { rtol: 1e-9, atol: 1e-12 };
        let full = integrate_full(&sys, &psi, eps, &x0, 1.0, tol, None).unwrap();
        let err = final_xy(&full)
            .iter()
            .zip(&target)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
        check(err < 10.0 * eps, format!("eps {eps}: error {err:e}"))?;
        errs.push(err);
    }
    check(errs.windows(2).all(|w| w[1] < w[0]), format!("errors not decreasing: {errs:?}"))?;
    within(start.elapsed(), 30.0)?;
    Ok(format!("errors {:.2e}, {:.2e}, {:.2e}", errs[0], errs[1], errs[2]))
}

fn ac9() -> Outcome {
    let sc = example_nonunique();
    let sys = sc.system().unwrap();
    let opts = CompositeOptions::default();
    let mut speeds = Vec::new();
    for x in [0.5, -0.5] {
        let x0 = Cartesian { x, y: 0.0, z: vec![0.0], t: 0.0 };
        let tr = composite_trajectory(&sys, &sc.regularization, &x0, 5.0, &opts).unwrap();
        let slides: Vec<_> = tr
            .samples
            .iter()
            .filter(|s| s.regime == Some(Regime::Slide) && matches!(s.state, State::Cartesian(_)))
            .collect();
        check(slides.len() >= 2, format!("x0 = {x}: no slide ({:?})", tr.regimes()))?;
        let (a, b) = (&slides[0].state, &slides[1].state);
        let speed = (b.z()[0] - a.z()[0]) / (b.clock() - a.clock());
        let zm = 0.5 * (a.z()[0] + b.z()[0]);
        let expected = if x > 0.0 { -chi(zm) + 0.25 } else { chi(zm) + 0.25 };
        check((speed - expected).abs() < 1e-3, format!("x0 = {x}: {speed} vs {expected}"))?;
        speeds.push(speed);
    }
    check(speeds[0] < 0.0 && speeds[1] > 0.0, format!("speeds {speeds:?}"))?;
    let n0 = limit_directions(&sys, &[0.0]).directions.len();
    check(n0 == 8, format!("{n0} directions at z = 0"))?;
    let n12 = limit_directions(&sys, &[1.2]).directions.len();
    Ok(format!(
        "slide speeds {:.4} / {:.4}; 8 directions at z = 0; {n12} directions at |z| = 1.2 (reported)",
        speeds[0], speeds[1]
    ))
}

fn ac10() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for psi in Regularization::BUILTIN {
        for _ in 0..1000 {
            let v = Vec2::polar(rng.gen_range(-PI..PI)) * rng.gen_range(0.0..3.0);
            let j = e_psi_jacobian(v, &psi);
            let scale = j.max_abs();
            for (col, dv) in [Vec2::new(h, 0.0), Vec2::new(0.0, h)].into_iter().enumerate() {
                let fd = (e_psi(v + dv, 1.0, &psi) - e_psi(v - dv, 1.0, &psi)) * (0.5 / h);
                let err = (fd.x - j.m[0][col]).abs().max((fd.y - j.m[1][col]).abs()) / scale;
                worst = worst.max(err);
            }
        }
    }
    check(worst < 1e-6, format!("Jacobian relative error {worst:e}"))?;

    let mut max_div = f64::NEG_INFINITY;
    for _ in 0..20 {
        let a = rng.gen_range(-3.0..-0.05);
        let d = rng.gen_range(-3.0..-0.05);
        let b = rng.gen_range(-3.0..3.0);
        let f = Vec2::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
        let sys = elinear(a, b, d, f, Vec2::ZERO, 0.0);
        let el = sys.elinear().unwrap();
        for _ in 0..1000 {
            let v = Vec2::polar(rng.gen_range(0.0..TAU)) * rng.gen_range(0.0..20.0);
            let psi = &Regularization::BUILTIN[rng.gen_range(0..4)];
            max_div = max_div.max(layer_divergence(el, v, &[0.0], psi));
        }
    }
    check(max_div < 0.0, format!("layer divergence reached {max_div}"))?;
    Ok(format!("Jacobian rel err {worst:.1e}; max divergence {max_div:.3e}"))
}

type Criterion = fn() -> Outcome;

fn main() {
    let criteria: [(&str, Criterion); 10] = [
        ("AC1 attracting/repelling directions", ac1),
        ("AC2 ball in pool", ac2),
        ("AC3 regularization-sensitive stability", ac3),
        ("AC4 Case I labels", ac4),
        ("AC5 Filippov equivalence and saddles", ac5),
        ("AC6 regularization map properties", ac6),
        ("AC7 averaged cycle flow", ac7),
        ("AC8 singular-limit convergence", ac8),
        ("AC9 non-unique sliding", ac9),
        ("AC10 Jacobian and layer divergence", ac10),
    ];
    let mut failed = Vec::new();
    for (name, run) in criteria {
        let start = Instant::now();
        let outcome = run();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name} [{secs:.2}s]: {detail}"),
            Err(why) => {
                println!("FAIL {name} [{secs:.2}s]: {why}");
                failed.push(name);
            }
        }
    }
    if !failed.is_empty() {
        eprintln!("failed: {failed:?}");
        std::process::exit(1);
    }
}
