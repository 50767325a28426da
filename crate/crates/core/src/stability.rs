//! Linearized flow `ż = i(Ω + B(x₀ + ωt))z` around a torus: fixed-step RK4,
//! norm conservation and Lyapunov estimates.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::fourier::{dot, FourierSeries, C64, I, ZERO};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearTrajectory {
    pub times: Vec<f64>,
    pub z: Vec<Vec<C64>>,
    pub x: Vec<Vec<f64>>,
}

impl LinearTrajectory {
    pub fn norm_sq(&self, i: usize) -> f64 {
        self.z[i].iter().map(|v| v.norm_sqr()).sum()
    }

    /// Columns `t, Re z_j, Im z_j, |z|²`.
    pub fn csv(&self) -> String {
        let n = self.z.first().map_or(0, |v| v.len());
        let mut out = String::from("t");
        for j in 0..n {
            out.push_str(&format!(",re_z{j},im_z{j}"));
        }
        out.push_str(",norm_sq\n");
        for (i, t) in self.times.iter().enumerate() {
            out.push_str(&format!("{t:.6}"));
            for v in &self.z[i] {
                out.push_str(&format!(",{:.15e},{:.15e}", v.re, v.im));
            }
            out.push_str(&format!(",{:.15e}\n", self.norm_sq(i)));
        }
        out
    }
}

/// Fixed-step classical RK4 for `ż = A(t)z`, storing every `stride`-th step.
pub fn integrate_with(
    generator: impl Fn(f64) -> DMatrix<C64>,
    z0: &[C64],
    t_end: f64,
    dt: f64,
    stride: usize,
) -> (Vec<f64>, Vec<Vec<C64>>) {
    assert!(dt > 0.0, "dt must be positive");
    let steps = (t_end / dt).round() as usize;
    let stride = stride.max(1);
    let mut z = DVector::from_column_slice(z0);
    let mut times = vec![0.0];
    let mut out = vec![z0.to_vec()];
    let h = C64::new(dt, 0.0);
    let half = C64::new(dt / 2.0, 0.0);
    let mut a0 = generator(0.0);
    for s in 0..steps {
        let t = s as f64 * dt;
        let am = generator(t + dt / 2.0);
        let a1 = generator(t + dt);
        let k1 = &a0 * &z;
        let k2 = &am * (&z + &k1 * half);
        let k3 = &am * (&z + &k2 * half);
        let k4 = &a1 * (&z + &k3 * h);
        z += (k1 + (k2 + k3) * C64::new(2.0, 0.0) + k4) * C64::new(dt / 6.0, 0.0);
        a0 = a1;
        if (s + 1) % stride == 0 || s + 1 == steps {
            times.push((s + 1) as f64 * dt);
            out.push(z.iter().copied().collect());
        }
    }
    (times, out)
}

/// `i(Ω + B(x))` evaluated along `x = x₀ + ωt`.
struct Linearization<'a> {
    omega: &'a [f64],
    big_omega: &'a [f64],
    b: &'a FourierSeries,
    x0: Vec<f64>,
    modes: Vec<(Vec<i32>, Vec<C64>)>,
}

impl<'a> Linearization<'a> {
    fn new(omega: &'a [f64], big_omega: &'a [f64], b: &'a FourierSeries, x0: &[f64]) -> Self {
        let modes = b
            .modes()
            .map(|(k, blk)| (k, blk.to_vec()))
            .collect();
        Linearization {
            omega,
            big_omega,
            b,
            x0: x0.to_vec(),
            modes,
        }
    }

    fn at(&self, t: f64) -> DMatrix<C64> {
        let n = self.big_omega.len();
        let (rows, cols) = self.b.shape();
        assert_eq!((rows, cols), (n, n), "B must be n×n");
        let x: Vec<f64> = self.x0.iter().zip(self.omega).map(|(a, w)| a + w * t).collect();
        let mut m = DMatrix::from_element(n, n, ZERO);
        for (k, blk) in &self.modes {
            let ph = C64::from_polar(1.0, dot(k, &x));
            for r in 0..n {
                for c in 0..n {
                    m[(r, c)] += blk[r * n + c] * ph;
                }
            }
        }
        for j in 0..n {
            m[(j, j)] += C64::new(self.big_omega[j], 0.0);
        }
        m * I
    }
}

/// RK4 for `ż = i(Ω + B(x₀ + ωt))z` from `x₀ = 0`, keeping every step.
pub fn integrate_linearized(
    omega: &[f64],
    big_omega: &[f64],
    b: &FourierSeries,
    z0: &[C64],
    t_end: f64,
    dt: f64,
) -> LinearTrajectory {
    integrate_linearized_from(omega, big_omega, b, z0, &vec![0.0; omega.len()], t_end, dt, 1)
}

#[allow(clippy::too_many_arguments)]
pub fn integrate_linearized_from(
    omega: &[f64],
    big_omega: &[f64],
    b: &FourierSeries,
    z0: &[C64],
    x0: &[f64],
    t_end: f64,
    dt: f64,
    stride: usize,
) -> LinearTrajectory {
    let lin = Linearization::new(omega, big_omega, b, x0);
    let (times, z) = integrate_with(|t| lin.at(t), z0, t_end, dt, stride);
    let x = times
        .iter()
        .map(|t| {
            x0.iter()
                .zip(omega)
                .map(|(a, w)| (a + w * t).rem_euclid(2.0 * std::f64::consts::PI))
                .collect()
        })
        .collect();
    LinearTrajectory { times, z, x }
}

/// `max_t | |z(t)|² − |z₀|² |`.
pub fn l2_drift(traj: &LinearTrajectory) -> f64 {
    let n0 = traj.norm_sq(0);
    (0..traj.times.len())
        .map(|i| (traj.norm_sq(i) - n0).abs())
        .fold(0.0, f64::max)
}

/// `ln(|z(T)|/|z₀|)/T`.
pub fn lyapunov_estimate(traj: &LinearTrajectory) -> f64 {
    let last = traj.times.len() - 1;
    let t = traj.times[last];
    if t == 0.0 {
        return 0.0;
    }
    0.5 * (traj.norm_sq(last) / traj.norm_sq(0)).ln() / t
}

/// Estimates over `[0, T/2]` and `[0, T]`; agreement indicates the quotient has settled.
pub fn lyapunov_halves(traj: &LinearTrajectory) -> (f64, f64) {
    let last = traj.times.len() - 1;
    let t_end = traj.times[last];
    let mid = traj
        .times
        .iter()
        .position(|&t| t >= t_end / 2.0)
        .unwrap_or(last);
    let est = |i: usize| {
        if traj.times[i] == 0.0 {
            0.0
        } else {
            0.5 * (traj.norm_sq(i) / traj.norm_sq(0)).ln() / traj.times[i]
        }
    };
    (est(mid), est(last))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftVerdict {
    pub max_drift: f64,
    /// Least-squares slope of `|z(t)|² − |z₀|²` against `t`.
    pub rate: f64,
    pub fires: bool,
}

/// Flags a trajectory whose norm drifts beyond `tol`.
pub fn drift_detector(traj: &LinearTrajectory, tol: f64) -> DriftVerdict {
    let n0 = traj.norm_sq(0);
    let pts: Vec<(f64, f64)> = traj
        .times
        .iter()
        .enumerate()
        .map(|(i, &t)| (t, traj.norm_sq(i) - n0))
        .collect();
    let m = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let mv = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - mv)).sum();
    let max_drift = l2_drift(traj);
    DriftVerdict {
        max_drift,
        rate: if sxx > 0.0 { sxy / sxx } else { 0.0 },
        fires: max_drift > tol,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderRow {
    pub dt: f64,
    pub max_error: f64,
    pub drift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderStudy {
    pub rows: Vec<OrderRow>,
    /// Log-log slope of the trajectory error against `dt`.
    pub error_order: f64,
    /// Log-log slope of the norm drift against `dt`.
    pub drift_order: f64,
}

fn loglog_slope(pts: &[(f64, f64)]) -> f64 {
    let pts: Vec<(f64, f64)> = pts
        .iter()
        .filter(|p| p.0 > 0.0 && p.1 > 0.0)
        .map(|p| (p.0.ln(), p.1.ln()))
        .collect();
    if pts.len() < 2 {
        return f64::NAN;
    }
    let m = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// Runs each `dt` in `dts` (each an integer multiple of the smallest) and compares
/// against a run with the smallest step divided by 8, at the shared grid times.
pub fn order_study(
    omega: &[f64],
    big_omega: &[f64],
    b: &FourierSeries,
    z0: &[C64],
    t_end: f64,
    dts: &[f64],
) -> OrderStudy {
    let fine = dts.iter().copied().fold(f64::INFINITY, f64::min) / 8.0;
    let reference = integrate_linearized(omega, big_omega, b, z0, t_end, fine);
    let mut rows = Vec::new();
    for &dt in dts {
        let traj = integrate_linearized(omega, big_omega, b, z0, t_end, dt);
        let ratio = (dt / fine).round() as usize;
        let mut err: f64 = 0.0;
        for (i, zi) in traj.z.iter().enumerate() {
            let r = &reference.z[(i * ratio).min(reference.z.len() - 1)];
            let e: f64 = zi.iter().zip(r).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt();
            err = err.max(e);
        }
        rows.push(OrderRow {
            dt,
            max_error: err,
            drift: l2_drift(&traj),
        });
    }
    let error_order = loglog_slope(&rows.iter().map(|r| (r.dt, r.max_error)).collect::<Vec<_>>());
    let drift_order = loglog_slope(&rows.iter().map(|r| (r.dt, r.drift)).collect::<Vec<_>>());
    OrderStudy {
        rows,
        error_order,
        drift_order,
    }
}
