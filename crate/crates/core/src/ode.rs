//! Dormand-Prince 5(4) with PI step control and continuous output.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;

const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;

const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

const BETA: f64 = 0.04;
const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 10.0;

#[derive(Debug, Clone, Copy)]
pub struct Options {
    pub rtol: f64,
    pub atol: f64,
    /// Initial step; chosen automatically when `None`.
    pub h0: Option<f64>,
    pub h_min: f64,
    pub max_steps: usize,
}

impl Default for Options {
    fn default() -> Self {
        Self {
            rtol: 1e-8,
            atol: 1e-10,
            h0: None,
            h_min: 1e-14,
            max_steps: 5_000_000,
        }
    }
}

impl Options {
    pub fn tol(rtol: f64, atol: f64) -> Self {
        Self {
            rtol,
            atol,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stats {
    pub accepted: usize,
    pub rejected: usize,
    pub evals: usize,
}

impl std::ops::AddAssign for Stats {
    fn add_assign(&mut self, rhs: Stats) {
        self.accepted += rhs.accepted;
        self.rejected += rhs.rejected;
        self.evals += rhs.evals;
    }
}

/// Continuous extension over the last accepted step.
#[derive(Debug, Clone)]
pub struct DenseStep {
    pub t0: f64,
    pub h: f64,
    r: [Vec<f64>; 5],
}

impl DenseStep {
    pub fn t1(&self) -> f64 {
        self.t0 + self.h
    }

    pub fn eval(&self, t: f64) -> Vec<f64> {
        let th = (t - self.t0) / self.h;
        let th1 = 1.0 - th;
        (0..self.r[0].len())
            .map(|i| {
                self.r[0][i]
                    + th * (self.r[1][i]
                        + th1 * (self.r[2][i] + th * (self.r[3][i] + th1 * self.r[4][i])))
            })
            .collect()
    }
}

pub struct Solver<F> {
    f: F,
    opts: Options,
    t: f64,
    y: Vec<f64>,
    k1: Vec<f64>,
    h: f64,
    err_old: f64,
    stats: Stats,
    last: Option<DenseStep>,
}

fn rms_norm(v: &[f64], y0: &[f64], y1: &[f64], opts: &Options) -> f64 {
    let n = v.len().max(1) as f64;
    let s: f64 = v
        .iter()
        .zip(y0.iter().zip(y1))
        .map(|(e, (a, b))| {
            let sc = opts.atol + opts.rtol * a.abs().max(b.abs());
            (e / sc).powi(2)
        })
        .sum();
    (s / n).sqrt()
}

impl<F: FnMut(f64, &[f64], &mut [f64])> Solver<F> {
    pub fn new(mut f: F, t0: f64, y0: Vec<f64>, opts: Options) -> Self {
        let mut k1 = vec![0.0; y0.len()];
        f(t0, &y0, &mut k1);
        Self {
            f,
            opts,
            t: t0,
            y: y0,
            k1,
            h: opts.h0.unwrap_or(0.0),
            err_old: 1e-4,
            stats: Stats {
                evals: 1,
                ..Stats::default()
            },
            last: None,
        }
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn stats(&self) -> Stats {
        self.stats
    }

    pub fn last_step(&self) -> Option<&DenseStep> {
        self.last.as_ref()
    }

    fn initial_step(&mut self, dir: f64, h_max: f64) -> f64 {
        let n = self.y.len();
        let zero = vec![0.0; n];
        let d0 = rms_norm(&self.y, &self.y, &zero, &self.opts);
        let d1 = rms_norm(&self.k1, &self.y, &zero, &self.opts);
        let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
        let h0 = h0.min(h_max);
        let y1: Vec<f64> = self.y.iter().zip(&self.k1).map(|(y, k)| y + dir * h0 * k).collect();
        let mut f1 = vec![0.0; n];
        (self.f)(self.t + dir * h0, &y1, &mut f1);
        self.stats.evals += 1;
        let diff: Vec<f64> = f1.iter().zip(&self.k1).map(|(a, b)| a - b).collect();
        let d2 = rms_norm(&diff, &self.y, &zero, &self.opts) / h0;
        let h1 = if d1.max(d2) <= 1e-15 {
            (h0 * 1e-3).max(1e-6)
        } else {
            (0.01 / d1.max(d2)).powf(0.2)
        };
        (100.0 * h0).min(h1).min(h_max)
    }

    /// Take one accepted step towards `t_end` (never past it) with `|h| <= h_max`.
    pub fn step(&mut self, t_end: f64, h_max: f64) -> Result<()> {
        let dir = if t_end >= self.t { 1.0 } else { -1.0 };
        let span = (t_end - self.t).abs();
        if span == 0.0 {
            return Ok(());
        }
        let h_max = h_max.min(span).max(0.0);
        if self.h <= 0.0 {
            self.h = self.initial_step(dir, h_max);
        }
        let n = self.y.len();
        let mut k2 = vec![0.0; n];
        let mut k3 = vec![0.0; n];
        let mut k4 = vec![0.0; n];
        let mut k5 = vec![0.0; n];
        let mut k6 = vec![0.0; n];
        let mut k7 = vec![0.0; n];
        let mut ys = vec![0.0; n];
        let mut y_new = vec![0.0; n];
        let mut err = vec![0.0; n];
        loop {
            if self.stats.accepted + self.stats.rejected >= self.opts.max_steps {
                return Err(Error::StepUnderflow {
                    t: self.t,
                    h: self.h,
                    state: self.y.clone(),
                });
            }
            let mut h = self.h.min(h_max);
            let last_step = h >= span * (1.0 - 1e-12);
            if last_step {
                h = span;
            }
            if h < self.opts.h_min {
                return Err(Error::StepUnderflow {
                    t: self.t,
                    h,
                    state: self.y.clone(),
                });
            }
            let hs = dir * h;
            let (t, y, k1) = (self.t, &self.y, &self.k1);
            let f = &mut self.f;

            for i in 0..n {
                ys[i] = y[i] + hs * A21 * k1[i];
            }
            f(t + C2 * hs, &ys, &mut k2);
            for i in 0..n {
                ys[i] = y[i] + hs * (A31 * k1[i] + A32 * k2[i]);
            }
            f(t + C3 * hs, &ys, &mut k3);
            for i in 0..n {
                ys[i] = y[i] + hs * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
            }
            f(t + C4 * hs, &ys, &mut k4);
            for i in 0..n {
                ys[i] = y[i] + hs * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
            }
            f(t + C5 * hs, &ys, &mut k5);
            for i in 0..n {
                ys[i] = y[i]
                    + hs * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
            }
            f(t + hs, &ys, &mut k6);
            for i in 0..n {
                y_new[i] = y[i]
                    + hs * (A71 * k1[i] + A73 * k3[i] + A74 * k4[i] + A75 * k5[i] + A76 * k6[i]);
            }
            let t_new = if last_step { t_end } else { t + hs };
            f(t_new, &y_new, &mut k7);
            self.stats.evals += 6;
            for i in 0..n {
                err[i] = hs
                    * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
            }
            let mut e = rms_norm(&err, y, &y_new, &self.opts);
            if !e.is_finite() || y_new.iter().any(|v| !v.is_finite()) {
                e = f64::INFINITY;
            }

            let expo = 0.2 - 0.75 * BETA;
            if e <= 1.0 {
                let fac = (SAFETY * e.max(1e-300).powf(-expo) * self.err_old.powf(BETA))
                    .clamp(FAC_MIN, FAC_MAX);
                self.err_old = e.max(1e-4);
                let ydiff: Vec<f64> = y_new.iter().zip(y).map(|(a, b)| a - b).collect();
                let bspl: Vec<f64> = (0..n).map(|i| hs * k1[i] - ydiff[i]).collect();
                let r4: Vec<f64> = (0..n).map(|i| ydiff[i] - hs * k7[i] - bspl[i]).collect();
                let r5: Vec<f64> = (0..n)
                    .map(|i| {
                        hs * (D1 * k1[i]
                            + D3 * k3[i]
                            + D4 * k4[i]
                            + D5 * k5[i]
                            + D6 * k6[i]
                            + D7 * k7[i])
                    })
                    .collect();
                self.last = Some(DenseStep {
                    t0: t,
                    h: t_new - t,
                    r: [y.clone(), ydiff, bspl, r4, r5],
                });
                self.t = t_new;
                self.y.copy_from_slice(&y_new);
                self.k1.copy_from_slice(&k7);
                self.stats.accepted += 1;
                self.h = h * fac;
                return Ok(());
            }
            self.stats.rejected += 1;
            let fac = if e.is_finite() {
                (SAFETY * e.powf(-expo)).clamp(FAC_MIN, 1.0)
            } else {
                0.1
            };
            self.h = h * fac;
        }
    }

    /// Integrate to `t_end`, recording the state at every accepted step.
    pub fn run_to(
        &mut self,
        t_end: f64,
        mut h_max: impl FnMut(f64, &[f64]) -> f64,
        mut record: impl FnMut(f64, &[f64]),
    ) -> Result<()> {
        while self.t != t_end {
            let hm = h_max(self.t, &self.y);
            self.step(t_end, hm)?;
            record(self.t, &self.y);
        }
        Ok(())
    }
}

/// Solve and return the states at `times` (monotone, starting at or after `t0`).
pub fn solve_at<F: FnMut(f64, &[f64], &mut [f64])>(
    f: F,
    t0: f64,
    y0: Vec<f64>,
    times: &[f64],
    opts: Options,
) -> Result<Vec<Vec<f64>>> {
    let mut solver = Solver::new(f, t0, y0, opts);
    let mut out = Vec::with_capacity(times.len());
    for &t in times {
        while solver.t() != t && (t - solver.t()) * (t - t0) > 0.0 {
            solver.step(t, f64::INFINITY)?;
        }
        if solver.t() == t {
            out.push(solver.y().to_vec());
        } else {
            out.push(solver.last_step().map(|d| d.eval(t)).unwrap_or_else(|| solver.y().to_vec()));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_decay() {
        let out = solve_at(
            |_, y, dy| dy[0] = -y[0],
            0.0,
            vec![1.0],
            &[0.5, 1.0, 3.0],
            Options::tol(1e-10, 1e-12),
        )
        .unwrap();
        for (t, y) in [0.5_f64, 1.0, 3.0].iter().zip(&out) {
            assert!((y[0] - (-t).exp()).abs() < 1e-9);
        }
    }

    #[test]
    fn harmonic_oscillator_dense_output() {
        let mut s = Solver::new(
            |_, y: &[f64], dy: &mut [f64]| {
                dy[0] = y[1];
                dy[1] = -y[0];
            },
            0.0,
            vec![1.0, 0.0],
            Options::tol(1e-10, 1e-12),
        );
        s.step(10.0, 0.7).unwrap();
        let d = s.last_step().unwrap().clone();
        for k in 0..=10 {
            let t = d.t0 + d.h * k as f64 / 10.0;
            let y = d.eval(t);
            assert!((y[0] - t.cos()).abs() < 1e-8, "t={t}");
        }
        s.run_to(2.0 * std::f64::consts::PI, |_, _| f64::INFINITY, |_, _| {}).unwrap();
        assert!((s.y()[0] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn backward_integration_returns() {
        let f = |_: f64, y: &[f64], dy: &mut [f64]| dy[0] = y[0] * (1.0 - y[0]);
        let fwd = solve_at(f, 0.0, vec![0.1], &[2.0], Options::tol(1e-11, 1e-13)).unwrap();
        let back = solve_at(f, 2.0, fwd[0].clone(), &[0.0], Options::tol(1e-11, 1e-13)).unwrap();
        assert!((back[0][0] - 0.1).abs() < 1e-9);
    }

    #[test]
    fn underflow_is_reported() {
        let mut s = Solver::new(
            |_, y: &[f64], dy: &mut [f64]| dy[0] = 1.0 / (1.0 - y[0]),
            0.0,
            vec![0.0],
            Options::tol(1e-10, 1e-12),
        );
        let r = s.run_to(1.0, |_, _| f64::INFINITY, |_, _| {});
        assert!(matches!(r, Err(Error::StepUnderflow { .. })));
    }
}
