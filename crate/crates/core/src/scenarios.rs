//! Built-in example systems.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::regularization::Regularization;
use crate::system::{SystemDef, SystemSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub description: String,
    pub system: SystemSpec,
    pub regularization: Regularization,
    pub z: Vec<f64>,
    pub epsilon: f64,
    /// Initial `(x, y)` for simulations.
    pub x0: [f64; 2],
    pub t_end: f64,
    /// Portrait label at `z` under `regularization`.
    pub expected_label: String,
}

impl Scenario {
    pub fn system(&self) -> Result<SystemDef> {
        SystemDef::from_spec(self.system.clone())
    }
}

pub const BALL_DEFAULTS: BallParams = BallParams { mu: 0.3, k: 1.0, m: 1.0, g: 9.81 };

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BallParams {
    pub mu: f64,
    pub k: f64,
    pub m: f64,
    pub g: f64,
}

impl BallParams {
    /// Speed at which stick-slip switches: `7 mu m g / (2 K)`.
    pub fn z_crit(&self) -> f64 {
        7.0 * self.mu * self.m * self.g / (2.0 * self.k)
    }
}

fn spec(json: &str) -> SystemSpec {
    serde_json::from_str(json).expect("built-in scenario parses")
}

/// Rolling ball with Coulomb and viscous friction.
pub fn ball_in_pool_system(p: BallParams) -> SystemSpec {
    spec(&format!(
        r#"{{"kind":"elinear","m":2,
            "params":{{"mu":{mu:?},"K":{k:?},"mass":{m:?},"grav":{g:?}}},
            "a":"-7/2*mu*grav","b":0,"d":"-7/2*mu*grav",
            "f":["-K/mass*z1","-K/mass*z2"],
            "B":[["-mu*grav",0],[0,"-mu*grav"]],
            "g":["-K/mass*z1","-K/mass*z2"]}}"#,
        mu = p.mu,
        k = p.k,
        m = p.m,
        g = p.g
    ))
}

pub fn ball_in_pool(p: BallParams) -> Scenario {
    Scenario {
        name: "ball_in_pool".into(),
        description: "ball slipping at the bottom of a pool (Coulomb and viscous friction)".into(),
        system: ball_in_pool_system(p),
        regularization: Regularization::Rational,
        z: vec![0.5 * p.z_crit(), 0.0],
        epsilon: 1e-2,
        x0: [1.0, 0.5],
        t_end: 1.0,
        expected_label: "CM2".into(),
    }
}

pub fn example_ar() -> Scenario {
    Scenario {
        name: "example_ar".into(),
        description: "nonlinear in e, with attracting and repelling limit directions".into(),
        system: spec(r#"{"kind":"general","m":1,"U":["-e1 + 2*e1^2 - 1/2","-e2"],"W":["-z1"]}"#),
        regularization: Regularization::Constant,
        z: vec![0.0],
        epsilon: 1e-2,
        x0: [-1.0, 0.0],
        t_end: 1.0,
        expected_label: "CM6".into(),
    }
}

/// `chi(z) = (1 + 2 z^2)/(1 + z^2)`.
pub fn chi(z: f64) -> f64 {
    (1.0 + 2.0 * z * z) / (1.0 + z * z)
}

pub fn example_nonunique() -> Scenario {
    Scenario {
        name: "example_nonunique".into(),
        description: "two stable critical sets with different slow flows".into(),
        system: spec(
            r#"{"kind":"general","m":1,
                "params":{"half":0.5},
                "U":["-e1*(e1 - half*chi)*(e1 + half*chi)","-e2/2"],
                "W":["-2*e1 + 1/4"]}"#
                .replace("chi", "((1 + 2*z1^2)/(1 + z1^2))")
                .as_str(),
        ),
        regularization: Regularization::Rational,
        z: vec![0.0],
        epsilon: 1e-2,
        x0: [0.5, 0.0],
        t_end: 0.5,
        expected_label: "CM8".into(),
    }
}

pub fn case3_system() -> SystemSpec {
    spec(r#"{"kind":"elinear","m":1,"a":172,"b":186,"d":-200,"f":[-86,-93],"B":[[1,0]],"g":[0]}"#)
}

pub fn case3(n: u32) -> Result<Scenario> {
    Ok(Scenario {
        name: "case3".into(),
        description: format!("stability of the critical set depends on psi (power family, n = {n})"),
        system: case3_system(),
        regularization: Regularization::power(n)?,
        z: vec![0.0],
        epsilon: 1e-3,
        x0: [1.0, 1.0],
        t_end: 0.1,
        expected_label: "III-regularization-sensitive".into(),
    })
}

/// The Case I parameter sets `(a, b, d, f1, f2)` with their labels.
pub const CASE_ONE_SETS: [(&str, [f64; 5], &str); 6] = [
    ("cm0", [-1.0, 1.0, -1.0, 0.0, 0.0], "CM0"),
    ("cm2", [-1.0, 0.0, -1.5, -0.6, 0.0], "CM2"),
    ("cm2_printed", [-1.0, 0.0, -1.5, -0.5, 0.0], "BIFURCATION"),
    ("cm4", [-2.0, 0.0, -1.0, -0.5, 0.0], "CM4"),
    ("ncm2", [-1.0, 0.0, -1.0, 1.1, 0.0], "NCM2"),
    ("ncm4", [-0.3, 0.0, -1.0, 0.5, 0.0], "NCM4"),
];

pub fn case_one_system(p: [f64; 5]) -> SystemSpec {
    let [a, b, d, f1, f2] = p;
    spec(&format!(
        r#"{{"kind":"elinear","m":1,"a":{a:?},"b":{b:?},"d":{d:?},"f":[{f1:?},{f2:?}],"B":[[0,0]],"g":[0]}}"#
    ))
}

fn case_one(name: &str, p: [f64; 5], label: &str) -> Scenario {
    Scenario {
        name: name.into(),
        description: format!("Case I: a = {}, b = {}, d = {}, f = ({}, {})", p[0], p[1], p[2], p[3], p[4]),
        system: case_one_system(p),
        regularization: Regularization::Rational,
        z: vec![0.0],
        epsilon: 1e-2,
        x0: [1.0, 0.5],
        t_end: 1.0,
        expected_label: label.into(),
    }
}

pub fn builtin_scenarios() -> Vec<Scenario> {
    let mut out = vec![
        ball_in_pool(BALL_DEFAULTS),
        example_ar(),
        example_nonunique(),
        case3(3).expect("n = 3 is valid"),
    ];
    out.extend(CASE_ONE_SETS.iter().map(|(n, p, l)| case_one(n, *p, l)));
    out
}

pub fn scenario(name: &str) -> Result<Scenario> {
    builtin_scenarios()
        .into_iter()
        .find(|s| s.name == name)
        .ok_or_else(|| Error::Config(format!("unknown scenario `{name}`")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classify::portrait;
    use crate::linalg::Vec2;

    #[test]
    fn labels() {
        for s in builtin_scenarios() {
            let sys = s.system().unwrap();
            let p = portrait(&sys, &s.z, &s.regularization).unwrap();
            assert_eq!(p.label, s.expected_label, "{}", s.name);
        }
    }

    #[test]
    fn chi_at_zero() {
        assert_eq!(chi(0.0), 1.0);
        let sys = example_nonunique().system().unwrap();
        let u = sys.u(Vec2::new(0.5, 0.0), Vec2::ZERO, &[0.0]);
        assert!(u.norm() < 1e-15);
    }

    #[test]
    fn case3_parameters() {
        let sys = case3(3).unwrap().system().unwrap();
        assert_eq!(sys.elinear().unwrap().abd(&[0.0]), (172.0, 186.0, -200.0));
        assert_eq!(sys.elinear().unwrap().f0(&[0.0]), Vec2::new(-86.0, -93.0));
    }
}
