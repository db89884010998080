//! System definitions.
//!
//! Every system has the form
//!
//! ```text
//! (x', y') = U(e(x, y), x, y, z)
//!  z'      = W(e(x, y), x, y, z)
//! ```
//!
//! with `z` of dimension `m`. An e-linear system has `U = A(z) e + f(x, y, z)` and
//! `W = B(z) e + g(x, y, z)` with `A = [[a, -b], [b, d]]`.
//!
//! All expressions are compiled against the slot layout `[e1, e2, x, y, z1, .., zm]`
//! with user parameters folded in as constants.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::{self, BinOp, Compiled, Env, Expr};
use crate::linalg::{angle_diff, Mat2, Vec2};

const PHI_VARIATION_TOL: f64 = 1e-8;
const PHI_FD_STEP: f64 = 1e-6;

/// An expression in config: either a JSON number or a string.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ExprSrc {
    Num(f64),
    Text(String),
}

impl ExprSrc {
    pub fn text(s: &str) -> Self {
        ExprSrc::Text(s.to_string())
    }

    fn parse(&self, field: &str) -> Result<Expr> {
        match self {
            ExprSrc::Num(v) => Ok(Expr::Num(*v)),
            ExprSrc::Text(t) => {
                expr::parse(t).map_err(|e| Error::Config(format!("{field}: {e}")))
            }
        }
    }
}

impl From<f64> for ExprSrc {
    fn from(v: f64) -> Self {
        ExprSrc::Num(v)
    }
}

impl From<&str> for ExprSrc {
    fn from(s: &str) -> Self {
        ExprSrc::text(s)
    }
}

fn zero() -> ExprSrc {
    ExprSrc::Num(0.0)
}

/// JSON form of a system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SystemSpec {
    Elinear(ELinearSpec),
    General(GeneralSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ELinearSpec {
    pub m: usize,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<ExprSrc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<ExprSrc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<ExprSrc>,
    #[serde(rename = "A_raw", default, skip_serializing_if = "Option::is_none")]
    pub a_raw: Option<[[ExprSrc; 2]; 2]>,
    /// Accept a z-dependent normal-form rotation by folding its drift into `f`.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub fold_in: bool,
    #[serde(rename = "B", default)]
    pub b_matrix: Vec<[ExprSrc; 2]>,
    #[serde(default = "default_f")]
    pub f: [ExprSrc; 2],
    #[serde(default)]
    pub g: Vec<ExprSrc>,
}

fn default_f() -> [ExprSrc; 2] {
    [zero(), zero()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneralSpec {
    pub m: usize,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    #[serde(rename = "U")]
    pub u: [ExprSrc; 2],
    #[serde(rename = "W")]
    pub w: Vec<ExprSrc>,
}

impl SystemSpec {
    pub fn m(&self) -> usize {
        match self {
            SystemSpec::Elinear(s) => s.m,
            SystemSpec::General(s) => s.m,
        }
    }

    pub fn params(&self) -> &BTreeMap<String, f64> {
        match self {
            SystemSpec::Elinear(s) => &s.params,
            SystemSpec::General(s) => &s.params,
        }
    }

    fn params_mut(&mut self) -> &mut BTreeMap<String, f64> {
        match self {
            SystemSpec::Elinear(s) => &mut s.params,
            SystemSpec::General(s) => &mut s.params,
        }
    }
}

fn slot_names(m: usize) -> Vec<String> {
    let mut v: Vec<String> = ["e1", "e2", "x", "y"].iter().map(|s| s.to_string()).collect();
    v.extend((1..=m).map(|i| format!("z{i}")));
    v
}

struct Compiler {
    names: Vec<String>,
    consts: Env,
}

impl Compiler {
    fn new(m: usize, params: &BTreeMap<String, f64>) -> Result<Self> {
        let names = slot_names(m);
        for p in params.keys() {
            if names.contains(p) {
                return Err(Error::Config(format!(
                    "parameter `{p}` shadows a state variable"
                )));
            }
        }
        Ok(Self {
            names,
            consts: params.iter().map(|(k, v)| (k.as_str(), *v)).collect(),
        })
    }

    fn compile(&self, e: &Expr, field: &str, allow_e: bool, allow_xy: bool) -> Result<Compiled> {
        for v in e.variables() {
            let forbidden = (!allow_e && (v == "e1" || v == "e2"))
                || (!allow_xy && (v == "x" || v == "y"));
            if forbidden {
                return Err(Error::Config(format!(
                    "{field}: variable `{v}` is not allowed here"
                )));
            }
        }
        let slots: Vec<&str> = self.names.iter().map(String::as_str).collect();
        e.compile(&slots, &self.consts)
            .map_err(|err| Error::Config(format!("{field}: {err}")))
    }
}

/// Evaluation buffer `[e1, e2, x, y, z..]`.
fn inputs(e: Vec2, xy: Vec2, z: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(4 + z.len());
    v.extend_from_slice(&[e.x, e.y, xy.x, xy.y]);
    v.extend_from_slice(z);
    v
}

#[derive(Debug, Clone)]
pub struct GeneralSystem {
    m: usize,
    u: [Compiled; 2],
    w: Vec<Compiled>,
}

impl GeneralSystem {
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn u(&self, e: Vec2, xy: Vec2, z: &[f64]) -> Vec2 {
        let x = inputs(e, xy, z);
        Vec2::new(self.u[0].eval(&x), self.u[1].eval(&x))
    }

    pub fn w(&self, e: Vec2, xy: Vec2, z: &[f64]) -> Vec<f64> {
        let x = inputs(e, xy, z);
        self.w.iter().map(|c| c.eval(&x)).collect()
    }
}

#[derive(Debug, Clone)]
enum Coefficients {
    /// `a`, `b`, `d` already in normal form.
    Normal { a: Compiled, b: Compiled, d: Compiled },
    /// Raw `A(z)` rotated per z; `f`, `g`, `B` stay in the original frame.
    Rotating { raw: [[Compiled; 2]; 2] },
}

/// `(x', y') = A(z) e + f(x, y, z)`, `z' = B(z) e + g(x, y, z)`.
#[derive(Debug, Clone)]
pub struct ELinearSystem {
    m: usize,
    coeffs: Coefficients,
    b_rows: Vec<[Compiled; 2]>,
    f: [Compiled; 2],
    g: Vec<Compiled>,
    rotation: Option<f64>,
}

impl ELinearSystem {
    pub fn m(&self) -> usize {
        self.m
    }

    /// Normal-form rotation applied at load time, if the config gave a raw matrix
    /// with z-independent rotation angle.
    pub fn rotation(&self) -> Option<f64> {
        self.rotation
    }

    /// True when the rotation depends on z and its drift was folded into `f`.
    pub fn is_folded(&self) -> bool {
        matches!(self.coeffs, Coefficients::Rotating { .. })
    }

    fn raw_at(raw: &[[Compiled; 2]; 2], z: &[f64]) -> Mat2 {
        let x = inputs(Vec2::ZERO, Vec2::ZERO, z);
        Mat2::new(
            raw[0][0].eval(&x),
            raw[0][1].eval(&x),
            raw[1][0].eval(&x),
            raw[1][1].eval(&x),
        )
    }

    fn phi_at(&self, z: &[f64]) -> f64 {
        match &self.coeffs {
            Coefficients::Normal { .. } => 0.0,
            Coefficients::Rotating { raw } => normal_form(Self::raw_at(raw, z)).0,
        }
    }

    /// `(a, b, d)` at z.
    pub fn abd(&self, z: &[f64]) -> (f64, f64, f64) {
        match &self.coeffs {
            Coefficients::Normal { a, b, d } => {
                let x = inputs(Vec2::ZERO, Vec2::ZERO, z);
                (a.eval(&x), b.eval(&x), d.eval(&x))
            }
            Coefficients::Rotating { raw } => {
                let (_, nf) = normal_form(Self::raw_at(raw, z));
                (nf.m[0][0], 0.5 * (nf.m[1][0] - nf.m[0][1]), nf.m[1][1])
            }
        }
    }

    /// `A(z) = [[a, -b], [b, d]]`.
    pub fn a_matrix(&self, z: &[f64]) -> Mat2 {
        let (a, b, d) = self.abd(z);
        Mat2::new(a, -b, b, d)
    }

    /// `det A = a d + b^2`.
    pub fn det_a(&self, z: &[f64]) -> f64 {
        let (a, b, d) = self.abd(z);
        a * d + b * b
    }

    /// Rows of `B(z)` in the normal-form frame.
    pub fn b_rows(&self, z: &[f64]) -> Vec<Vec2> {
        let x = inputs(Vec2::ZERO, Vec2::ZERO, z);
        let rows = self
            .b_rows
            .iter()
            .map(|r| Vec2::new(r[0].eval(&x), r[1].eval(&x)));
        match &self.coeffs {
            Coefficients::Normal { .. } => rows.collect(),
            Coefficients::Rotating { .. } => {
                // row vector times R^T
                let rot = Mat2::rotation(self.phi_at(z));
                rows.map(|r| rot.mul_vec(r)).collect()
            }
        }
    }

    fn b_times(&self, e: Vec2, z: &[f64]) -> Vec<f64> {
        self.b_rows(z).into_iter().map(|r| r.dot(e)).collect()
    }

    fn f_g_frame(&self, xy: Vec2, z: &[f64]) -> (Vec2, Vec<f64>) {
        let x = inputs(Vec2::ZERO, xy, z);
        let f = Vec2::new(self.f[0].eval(&x), self.f[1].eval(&x));
        let g = self.g.iter().map(|c| c.eval(&x)).collect();
        (f, g)
    }

    /// `f(x, y, z)` in the normal-form frame, without the rotation drift.
    pub fn f(&self, xy: Vec2, z: &[f64]) -> Vec2 {
        match &self.coeffs {
            Coefficients::Normal { .. } => self.f_g_frame(xy, z).0,
            Coefficients::Rotating { .. } => {
                let r = Mat2::rotation(self.phi_at(z));
                r.mul_vec(self.f_g_frame(r.transpose().mul_vec(xy), z).0)
            }
        }
    }

    pub fn g(&self, xy: Vec2, z: &[f64]) -> Vec<f64> {
        match &self.coeffs {
            Coefficients::Normal { .. } => self.f_g_frame(xy, z).1,
            Coefficients::Rotating { .. } => {
                let r = Mat2::rotation(self.phi_at(z));
                self.f_g_frame(r.transpose().mul_vec(xy), z).1
            }
        }
    }

    /// `f(0, 0, z)`.
    pub fn f0(&self, z: &[f64]) -> Vec2 {
        self.f(Vec2::ZERO, z)
    }

    /// `g(0, 0, z)`.
    pub fn g0(&self, z: &[f64]) -> Vec<f64> {
        self.g(Vec2::ZERO, z)
    }

    pub fn u(&self, e: Vec2, xy: Vec2, z: &[f64]) -> Vec2 {
        let base = self.a_matrix(z).mul_vec(e) + self.f(xy, z);
        match &self.coeffs {
            Coefficients::Normal { .. } => base,
            Coefficients::Rotating { .. } => {
                // d/dt (R(phi(z)) x) adds (grad phi . z') R(pi/2) x_tilde
                let zdot = self.w(e, xy, z);
                let grad = self.phi_gradient(z);
                let rate: f64 = grad.iter().zip(&zdot).map(|(a, b)| a * b).sum();
                base + xy.perp() * rate
            }
        }
    }

    pub fn w(&self, e: Vec2, xy: Vec2, z: &[f64]) -> Vec<f64> {
        let mut out = self.b_times(e, z);
        for (o, gi) in out.iter_mut().zip(self.g(xy, z)) {
            *o += gi;
        }
        out
    }

    fn phi_gradient(&self, z: &[f64]) -> Vec<f64> {
        let mut zp = z.to_vec();
        (0..z.len())
            .map(|i| {
                zp[i] = z[i] + PHI_FD_STEP;
                let hi = self.phi_at(&zp);
                zp[i] = z[i] - PHI_FD_STEP;
                let lo = self.phi_at(&zp);
                zp[i] = z[i];
                0.5 * angle_diff(2.0 * hi, 2.0 * lo) / (2.0 * PHI_FD_STEP)
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
enum Kind {
    General(GeneralSystem),
    ELinear(ELinearSystem),
}

/// A compiled system together with the spec it came from.
#[derive(Debug, Clone)]
pub struct SystemDef {
    spec: SystemSpec,
    kind: Kind,
}

impl SystemDef {
    pub fn from_spec(spec: SystemSpec) -> Result<Self> {
        let kind = match &spec {
            SystemSpec::General(g) => Kind::General(build_general(g)?),
            SystemSpec::Elinear(e) => Kind::ELinear(build_elinear(e)?),
        };
        Ok(Self { spec, kind })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: SystemSpec =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_spec(spec)
    }

    pub fn spec(&self) -> &SystemSpec {
        &self.spec
    }

    pub fn m(&self) -> usize {
        self.spec.m()
    }

    pub fn param(&self, name: &str) -> Option<f64> {
        self.spec.params().get(name).copied()
    }

    /// Rebuild with one parameter overridden.
    pub fn with_param(&self, name: &str, value: f64) -> Result<Self> {
        let mut spec = self.spec.clone();
        spec.params_mut().insert(name.to_string(), value);
        Self::from_spec(spec)
    }

    pub fn as_elinear(&self) -> Option<&ELinearSystem> {
        match &self.kind {
            Kind::ELinear(e) => Some(e),
            Kind::General(_) => None,
        }
    }

    pub fn elinear(&self) -> Result<&ELinearSystem> {
        self.as_elinear()
            .ok_or_else(|| Error::Contract("operation requires an e-linear system".into()))
    }

    pub fn u(&self, e: Vec2, xy: Vec2, z: &[f64]) -> Vec2 {
        match &self.kind {
            Kind::General(s) => s.u(e, xy, z),
            Kind::ELinear(s) => s.u(e, xy, z),
        }
    }

    pub fn w(&self, e: Vec2, xy: Vec2, z: &[f64]) -> Vec<f64> {
        match &self.kind {
            Kind::General(s) => s.w(e, xy, z),
            Kind::ELinear(s) => s.w(e, xy, z),
        }
    }
}

fn check_len<T>(v: &[T], want: usize, field: &str) -> Result<()> {
    if v.len() != want {
        return Err(Error::Config(format!(
            "{field}: expected {want} entries, got {}",
            v.len()
        )));
    }
    Ok(())
}

fn build_general(spec: &GeneralSpec) -> Result<GeneralSystem> {
    if spec.m == 0 {
        return Err(Error::Config("m: must be at least 1".into()));
    }
    check_len(&spec.w, spec.m, "W")?;
    let c = Compiler::new(spec.m, &spec.params)?;
    let u = [
        c.compile(&spec.u[0].parse("U/0")?, "U/0", true, true)?,
        c.compile(&spec.u[1].parse("U/1")?, "U/1", true, true)?,
    ];
    let w = spec
        .w
        .iter()
        .enumerate()
        .map(|(i, src)| {
            let field = format!("W/{i}");
            c.compile(&src.parse(&field)?, &field, true, true)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GeneralSystem { m: spec.m, u, w })
}

fn lin(terms: &[(f64, &Expr)]) -> Expr {
    let mut acc: Option<Expr> = None;
    for (k, e) in terms {
        if *k == 0.0 {
            continue;
        }
        let term = if *k == 1.0 {
            (*e).clone()
        } else {
            Expr::binary(BinOp::Mul, Expr::Num(*k), (*e).clone())
        };
        acc = Some(match acc {
            None => term,
            Some(a) => Expr::binary(BinOp::Add, a, term),
        });
    }
    acc.unwrap_or(Expr::Num(0.0))
}

/// Deterministic z-samples used to decide whether a raw matrix has constant rotation.
fn z_samples(m: usize) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; m]];
    for i in 0..m {
        for v in [-2.0, -0.5, 0.5, 2.0] {
            let mut z = vec![0.0; m];
            z[i] = v;
            out.push(z);
        }
    }
    out.push(vec![0.7; m]);
    out
}

fn build_elinear(spec: &ELinearSpec) -> Result<ELinearSystem> {
    let m = spec.m;
    if m == 0 {
        return Err(Error::Config("m: must be at least 1".into()));
    }
    let b_src: Vec<[ExprSrc; 2]> = if spec.b_matrix.is_empty() {
        vec![[zero(), zero()]; m]
    } else {
        spec.b_matrix.clone()
    };
    check_len(&b_src, m, "B")?;
    let g_src: Vec<ExprSrc> = if spec.g.is_empty() {
        vec![zero(); m]
    } else {
        spec.g.clone()
    };
    check_len(&g_src, m, "g")?;

    let c = Compiler::new(m, &spec.params)?;
    let mut b_expr = Vec::with_capacity(m);
    for (i, row) in b_src.iter().enumerate() {
        b_expr.push([
            row[0].parse(&format!("B/{i}/0"))?,
            row[1].parse(&format!("B/{i}/1"))?,
        ]);
    }
    let mut f_expr = [spec.f[0].parse("f/0")?, spec.f[1].parse("f/1")?];
    let mut g_expr = g_src
        .iter()
        .enumerate()
        .map(|(i, s)| s.parse(&format!("g/{i}")))
        .collect::<Result<Vec<_>>>()?;

    let mut rotation = None;
    let coeffs_expr: Option<[Expr; 3]>;
    let mut rotating_raw = None;

    match (&spec.a_raw, &spec.a, &spec.d) {
        (Some(_), Some(_), _) | (Some(_), _, Some(_)) => {
            return Err(Error::Config(
                "A_raw: give either A_raw or a/b/d, not both".into(),
            ))
        }
        (Some(raw), None, None) => {
            if spec.b.is_some() {
                return Err(Error::Config(
                    "A_raw: give either A_raw or a/b/d, not both".into(),
                ));
            }
            let raw_expr = [
                [raw[0][0].parse("A_raw/0/0")?, raw[0][1].parse("A_raw/0/1")?],
                [raw[1][0].parse("A_raw/1/0")?, raw[1][1].parse("A_raw/1/1")?],
            ];
            let mut raw_c = Vec::new();
            for (i, row) in raw_expr.iter().enumerate() {
                for (j, e) in row.iter().enumerate() {
                    raw_c.push(c.compile(e, &format!("A_raw/{i}/{j}"), false, false)?);
                }
            }
            let raw_c: [[Compiled; 2]; 2] = [
                [raw_c[0].clone(), raw_c[1].clone()],
                [raw_c[2].clone(), raw_c[3].clone()],
            ];
            let phis: Vec<f64> = z_samples(m)
                .iter()
                .map(|z| normal_form(ELinearSystem::raw_at(&raw_c, z)).0)
                .collect();
            let variation = phis
                .iter()
                .map(|p| 0.5 * angle_diff(2.0 * p, 2.0 * phis[0]).abs())
                .fold(0.0, f64::max);
            if variation > PHI_VARIATION_TOL {
                if !spec.fold_in {
                    return Err(Error::Config(format!(
                        "A_raw: normal-form rotation varies with z by {variation:.3e}; set fold_in to accept the approximate drift correction"
                    )));
                }
                log::warn!("A_raw rotation depends on z; drift folded into f (reduced accuracy)");
                rotating_raw = Some(raw_c);
                coeffs_expr = None;
            } else {
                let phi = phis[0];
                rotation = Some(phi);
                let (s, co) = phi.sin_cos();
                let r = [[co, -s], [s, co]];
                let nf: [[Expr; 2]; 2] = std::array::from_fn(|i| {
                    std::array::from_fn(|j| {
                        let mut terms = Vec::new();
                        for (k, raw_row) in raw_expr.iter().enumerate() {
                            for (l, e) in raw_row.iter().enumerate() {
                                terms.push((r[i][k] * r[j][l], e));
                            }
                        }
                        lin(&terms)
                    })
                });
                let b_anti = Expr::binary(
                    BinOp::Mul,
                    Expr::Num(0.5),
                    Expr::binary(BinOp::Sub, nf[1][0].clone(), nf[0][1].clone()),
                );
                coeffs_expr = Some([nf[0][0].clone(), b_anti, nf[1][1].clone()]);

                // x = c x~ + s y~, y = -s x~ + c y~
                let xt = Expr::var("x");
                let yt = Expr::var("y");
                let mut bind = HashMap::new();
                bind.insert("x".to_string(), lin(&[(co, &xt), (s, &yt)]));
                bind.insert("y".to_string(), lin(&[(-s, &xt), (co, &yt)]));
                let f0 = f_expr[0].substitute(&bind);
                let f1 = f_expr[1].substitute(&bind);
                f_expr = [lin(&[(co, &f0), (-s, &f1)]), lin(&[(s, &f0), (co, &f1)])];
                g_expr = g_expr.iter().map(|e| e.substitute(&bind)).collect();
                for row in b_expr.iter_mut() {
                    let (b0, b1) = (row[0].clone(), row[1].clone());
                    *row = [lin(&[(co, &b0), (-s, &b1)]), lin(&[(s, &b0), (co, &b1)])];
                }
            }
        }
        (None, Some(a), Some(d)) => {
            let b = spec.b.clone().unwrap_or_else(zero);
            coeffs_expr = Some([a.parse("a")?, b.parse("b")?, d.parse("d")?]);
        }
        (None, _, _) => {
            return Err(Error::Config(
                "a: e-linear systems need a and d (or A_raw)".into(),
            ))
        }
    }

    let coeffs = match (coeffs_expr, rotating_raw) {
        (Some([a, b, d]), _) => Coefficients::Normal {
            a: c.compile(&a, "a", false, false)?,
            b: c.compile(&b, "b", false, false)?,
            d: c.compile(&d, "d", false, false)?,
        },
        (None, Some(raw)) => Coefficients::Rotating { raw },
        (None, None) => unreachable!(),
    };
    let b_rows = b_expr
        .iter()
        .enumerate()
        .map(|(i, row)| {
            Ok([
                c.compile(&row[0], &format!("B/{i}/0"), false, false)?,
                c.compile(&row[1], &format!("B/{i}/1"), false, false)?,
            ])
        })
        .collect::<Result<Vec<_>>>()?;
    let f = [
        c.compile(&f_expr[0], "f/0", false, true)?,
        c.compile(&f_expr[1], "f/1", false, true)?,
    ];
    let g = g_expr
        .iter()
        .enumerate()
        .map(|(i, e)| c.compile(e, &format!("g/{i}"), false, true))
        .collect::<Result<Vec<_>>>()?;
    Ok(ELinearSystem {
        m,
        coeffs,
        b_rows,
        f,
        g,
        rotation,
    })
}

/// Rotate `raw` so that its off-diagonal part is antisymmetric:
/// returns `(phi, R(phi) raw R(phi)^T)`.
pub fn normal_form(raw: Mat2) -> (f64, Mat2) {
    let [[a, b], [c, d]] = raw.m;
    // tan(2 phi) = (b + c)/(d - a); pick the root in (-pi/4, pi/4]
    let mut phi = 0.5 * (b + c).atan2(d - a);
    let quarter = std::f64::consts::FRAC_PI_4;
    if phi > quarter {
        phi -= 2.0 * quarter;
    } else if phi <= -quarter {
        phi += 2.0 * quarter;
    }
    let r = Mat2::rotation(phi);
    (phi, r * raw * r.transpose())
}

/// Directional limit of the full vector field along angle `theta` at `x = y = 0`.
pub fn limit_field(sys: &SystemDef, theta: f64, z: &[f64]) -> Vec<f64> {
    let e = Vec2::polar(theta);
    let u = sys.u(e, Vec2::ZERO, z);
    let mut out = vec![u.x, u.y];
    out.extend(sys.w(e, Vec2::ZERO, z));
    out
}

fn a_inv_f(sys: &ELinearSystem, z: &[f64]) -> Result<Vec2> {
    let inv = sys
        .a_matrix(z)
        .inverse()
        .ok_or_else(|| Error::SingularMatrix(z.to_vec()))?;
    Ok(inv.mul_vec(sys.f0(z)))
}

/// Sliding direction `(c, s) = -A^{-1} f(0, 0, z)`.
pub fn sliding_direction(sys: &ELinearSystem, z: &[f64]) -> Result<Vec2> {
    Ok(-a_inv_f(sys, z)?)
}

/// Filippov sliding velocity of `z`: `-B A^{-1} f + g` at `x = y = 0`.
pub fn filippov_sigma(sys: &ELinearSystem, z: &[f64]) -> Result<Vec<f64>> {
    let cs = sliding_direction(sys, z)?;
    Ok(sys
        .b_rows(z)
        .iter()
        .zip(sys.g0(z))
        .map(|(row, g)| row.dot(cs) + g)
        .collect())
}

/// `(A^{-1} f)^T (A^{-1} f) - 1`; negative iff a critical set exists.
pub fn convexity_margin(sys: &ELinearSystem, z: &[f64]) -> Result<f64> {
    Ok(a_inv_f(sys, z)?.norm_sq() - 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn elinear(a: f64, b: f64, d: f64, f: (f64, f64)) -> SystemDef {
        SystemDef::from_spec(SystemSpec::Elinear(ELinearSpec {
            m: 1,
            params: BTreeMap::new(),
            a: Some(a.into()),
            b: Some(b.into()),
            d: Some(d.into()),
            a_raw: None,
            fold_in: false,
            b_matrix: vec![],
            f: [f.0.into(), f.1.into()],
            g: vec![],
        }))
        .unwrap()
    }

    #[test]
    fn normal_form_of_normal_matrix_is_identity_rotation() {
        let a = Mat2::new(-1.0, -2.0, 2.0, -3.0);
        let (phi, nf) = normal_form(a);
        assert_eq!(phi, 0.0);
        assert!((nf - a).max_abs() < 1e-15);
    }

    #[test]
    fn normal_form_of_nilpotent() {
        let (phi, nf) = normal_form(Mat2::new(0.0, 1.0, 0.0, 0.0));
        assert!((phi.abs() - std::f64::consts::FRAC_PI_4).abs() < 1e-15);
        assert!((nf.m[0][1] + nf.m[1][0]).abs() < 1e-12);
        assert!((nf.m[0][1].abs() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn limit_field_of_contracting_system() {
        let sys = elinear(-1.0, 0.0, -1.0, (0.0, 0.0));
        for th in [0.0, 1.0, 2.5, -0.3] {
            let v = limit_field(&sys, th, &[0.0]);
            assert!((v[0] + th.cos()).abs() < 1e-15);
            assert!((v[1] + th.sin()).abs() < 1e-15);
            assert_eq!(v[2], 0.0);
            let w = limit_field(&sys, th + std::f64::consts::TAU, &[0.0]);
            assert!((w[0] - v[0]).abs() < 1e-14);
        }
    }

    #[test]
    fn margin_examples() {
        let sys = elinear(-1.0, 0.0, -1.0, (1.1, 0.0));
        let el = sys.as_elinear().unwrap();
        assert!((convexity_margin(el, &[0.0]).unwrap() - 0.21).abs() < 1e-12);
        let sys = elinear(-1.0, 0.3, -2.0, (0.0, 0.0));
        assert_eq!(convexity_margin(sys.as_elinear().unwrap(), &[0.0]).unwrap(), -1.0);
        let sys = elinear(0.0, 0.0, 1.0, (0.0, 0.0));
        assert!(matches!(
            convexity_margin(sys.as_elinear().unwrap(), &[0.0]),
            Err(Error::SingularMatrix(_))
        ));
    }

    #[test]
    fn json_schema() {
        let sys = SystemDef::from_json(
            r#"{"kind":"elinear","m":1,"params":{"k":2},"a":"-k","d":-1,"f":["0.5*z1","0"],"g":["-z1"],"B":[["1","0"]]}"#,
        )
        .unwrap();
        let el = sys.as_elinear().unwrap();
        assert_eq!(el.abd(&[1.0]), (-2.0, 0.0, -1.0));
        assert_eq!(el.f0(&[2.0]), Vec2::new(1.0, 0.0));
        assert_eq!(filippov_sigma(el, &[2.0]).unwrap(), vec![0.5 - 2.0]);
        let sys2 = sys.with_param("k", 4.0).unwrap();
        assert_eq!(sys2.as_elinear().unwrap().abd(&[0.0]).0, -4.0);

        let bad = SystemDef::from_json(r#"{"kind":"elinear","m":1,"a":-1,"d":-1,"bogus":1}"#);
        assert!(bad.is_err());
        let bad = SystemDef::from_json(r#"{"kind":"elinear","m":1,"a":"x","d":-1}"#);
        assert!(matches!(bad, Err(Error::Config(_))));
        let bad = SystemDef::from_json(r#"{"kind":"general","m":1,"U":["e1","q"],"W":["0"]}"#);
        assert!(matches!(bad, Err(Error::Config(_))));
    }

    #[test]
    fn raw_matrix_is_rotated() {
        let sys = SystemDef::from_json(
            r#"{"kind":"elinear","m":1,"A_raw":[[-1,1],[0,-2]],"f":["0.3","0.1"]}"#,
        )
        .unwrap();
        let el = sys.as_elinear().unwrap();
        let phi = el.rotation().unwrap();
        let (_, nf) = normal_form(Mat2::new(-1.0, 1.0, 0.0, -2.0));
        let a = el.a_matrix(&[0.0]);
        assert!((a - nf).max_abs() < 1e-12);
        let f = el.f0(&[0.0]);
        let want = Mat2::rotation(phi).mul_vec(Vec2::new(0.3, 0.1));
        assert!((f - want).norm() < 1e-12);
    }

    #[test]
    fn z_dependent_rotation_requires_opt_in() {
        let text = r#"{"kind":"elinear","m":1,"A_raw":[[-1,"z1"],[0,-2]]}"#;
        assert!(matches!(SystemDef::from_json(text), Err(Error::Config(_))));
        let text = r#"{"kind":"elinear","m":1,"A_raw":[[-1,"z1"],[0,-2]],"fold_in":true}"#;
        let sys = SystemDef::from_json(text).unwrap();
        let el = sys.as_elinear().unwrap();
        assert!(el.is_folded());
        let a = el.a_matrix(&[0.7]);
        assert!((a.m[0][1] + a.m[1][0]).abs() < 1e-12);
    }
}
