use codim2::integrate::{
    composite_trajectory, integrate_full, CompositeOptions, Cartesian, Outcome, Regime, State, Tolerances,
};
use codim2::scenarios::{ball_in_pool, chi, example_ar, example_nonunique, BALL_DEFAULTS};
use codim2::Regularization;

/// Slide velocity over the first slow step, and `z` at its midpoint.
fn slide_velocity(tr: &codim2::integrate::Trajectory) -> (f64, f64) {
    let slides: Vec<_> = tr
        .samples
        .iter()
        .filter(|s| s.regime == Some(Regime::Slide) && matches!(s.state, State::Cartesian(_)))
        .collect();
    assert!(slides.len() >= 2, "{:?} {:?}", tr.regimes(), tr.samples.last());
    let (a, b) = (&slides[0].state, &slides[1].state);
    ((b.z()[0] - a.z()[0]) / (b.clock() - a.clock()), 0.5 * (a.z()[0] + b.z()[0]))
}

#[test]
fn attracting_repelling_example() {
    let sc = example_ar();
    let sys = sc.system().unwrap();
    let opts = CompositeOptions::default();

    let x0 = Cartesian { x: -1.0, y: 0.0, z: vec![0.5], t: 0.0 };
    let tr = composite_trajectory(&sys, &sc.regularization, &x0, 2.0, &opts).unwrap();
    assert!(tr.regimes().contains(&Regime::Slide), "{:?}", tr.regimes());
    assert_eq!(tr.outcome, Outcome::Completed);

    for th in [0.3_f64, -0.9, 1.0] {
        let r = 1e-7;
        let x0 = Cartesian { x: r * th.cos(), y: r * th.sin(), z: vec![0.5], t: 0.0 };
        let tr = composite_trajectory(&sys, &sc.regularization, &x0, 1.0, &opts).unwrap();
        assert!(tr.regimes().contains(&Regime::Cross), "{th}: {:?}", tr.regimes());
        let State::Cartesian(end) = &tr.last().state else { panic!() };
        assert!(end.y.atan2(end.x).abs() < 1e-6, "{th}: exit angle {}", end.y.atan2(end.x));
    }
}

#[test]
fn nonunique_sliding_signs() {
    let sc = example_nonunique();
    let sys = sc.system().unwrap();
    let opts = CompositeOptions::default();
    let mut v = Vec::new();
    for x in [0.5, -0.5] {
        let x0 = Cartesian { x, y: 0.0, z: vec![0.0], t: 0.0 };
        let tr = composite_trajectory(&sys, &sc.regularization, &x0, 5.0, &opts).unwrap();
        assert!(tr.regimes().contains(&Regime::Slide), "{:?}", tr.regimes());
        let (ez, z) = slide_velocity(&tr);
        let expected = if x > 0.0 { -chi(z) + 0.25 } else { chi(z) + 0.25 };
        assert!((ez - expected).abs() < 1e-3, "{ez} vs {expected}");
        v.push(ez);
    }
    assert!(v[0] < 0.0 && v[1] > 0.0);
}

#[test]
fn ball_converges_to_singular_limit() {
    let sc = ball_in_pool(BALL_DEFAULTS);
    let sys = sc.system().unwrap();
    let psi = Regularization::Rational;
    let x0 = Cartesian { x: 1.0, y: 0.5, z: vec![1.0, -0.5], t: 0.0 };
    let t_end = 1.0;
    let comp = composite_trajectory(&sys, &psi, &x0, t_end, &CompositeOptions::default()).unwrap();
    let State::Cartesian(c) = &comp.last().state else { panic!() };
    let mut errs = Vec::new();
    for eps in [1e-1, 1e-2, 1e-3] {
        let tol = Tolerances { rtol: 1e-9, atol: 1e-12 };
        let full = integrate_full(&sys, &psi, eps, &x0, t_end, tol, None).unwrap();
        let State::Cartesian(f) = &full.last().state else { panic!() };
        let err = [f.x - c.x, f.y - c.y, f.z[0] - c.z[0], f.z[1] - c.z[1]]
            .iter()
            .fold(0.0_f64, |m, v| m.max(v.abs()));
        eprintln!("eps {eps}: err {err:e}, steps {}", full.stats.accepted);
        assert!(err < 10.0 * eps);
        errs.push(err);
    }
    assert!(errs[0] > errs[1] && errs[1] > errs[2]);
}

