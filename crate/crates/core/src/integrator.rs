//! Initial value simulation with standard (SC) and position-based (PC)
//! collocation.
//!
//! SC collocates the augmented first-order system with a Lagrange polynomial
//! for `x = (q, v)`; its stage unknowns are the states at `τ_1..τ_d`. PC
//! collocates `q̈ = f` directly with a semi-Hermite position polynomial of
//! degree `d + 1`; its stage unknowns are the positions at `τ_1..τ_d` and the
//! velocity is the scaled derivative of that polynomial.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::{CollocationScheme, LagrangeBasis, PointFamily, SemiHermiteBasis};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::model::{AccelJacobian, FirstOrderView, Ivp, SecondOrderOde};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Standard collocation on the state-augmented system.
    #[serde(rename = "sc")]
    Standard,
    /// Position-based collocation on the second-order system.
    #[serde(rename = "pc")]
    PositionBased,
}

impl Method {
    pub fn short_name(self) -> &'static str {
        match self {
            Method::Standard => "sc",
            Method::PositionBased => "pc",
        }
    }

    /// Stage unknowns per interval: `2 d nq` for SC, `d nq` for PC.
    pub fn internals_per_interval(self, d: usize, nq: usize) -> usize {
        match self {
            Method::Standard => 2 * d * nq,
            Method::PositionBased => d * nq,
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.short_name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sc" | "standard" => Ok(Method::Standard),
            "pc" | "position" | "position-based" => Ok(Method::PositionBased),
            other => Err(Error::Config(format!("unknown method `{other}`"))),
        }
    }
}

/// Stage unknowns `z_k` of one interval, stored point-major.
#[derive(Debug, Clone, PartialEq)]
pub struct StageInternals {
    pub method: Method,
    /// Width of one point block: `2 nq` (SC) or `nq` (PC).
    pub width: usize,
    pub values: Vec<f64>,
}

impl StageInternals {
    pub fn point(&self, i: usize) -> &[f64] {
        &self.values[i * self.width..(i + 1) * self.width]
    }

    pub fn order(&self) -> usize {
        self.values.len() / self.width
    }
}

/// Inner Newton settings for the stage equations.
#[derive(Debug, Clone, Copy)]
pub struct NewtonOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            tol: 1e-12,
            max_iter: 50,
        }
    }
}

/// Either polynomial basis, matching the method.
#[derive(Debug, Clone)]
pub enum Interpolant {
    Lagrange(LagrangeBasis),
    SemiHermite(SemiHermiteBasis),
}

impl Interpolant {
    pub fn for_method(method: Method, scheme: &CollocationScheme) -> Result<Self> {
        Ok(match method {
            Method::Standard => Interpolant::Lagrange(LagrangeBasis::new(scheme)),
            Method::PositionBased => Interpolant::SemiHermite(SemiHermiteBasis::new(scheme)?),
        })
    }
}

/// Damped Newton on `R(z) = 0` with a halving line search on `‖R‖∞`.
///
/// `eval` writes the residual and, when asked, the Jacobian.
fn newton(
    z: &mut [f64],
    opts: NewtonOptions,
    scale: f64,
    mut eval: impl FnMut(&[f64], &mut [f64], Option<&mut DMatrix<f64>>),
) -> Result<()> {
    let n = z.len();
    let tol = opts.tol * scale.max(1.0);
    let mut res = vec![0.0; n];
    let mut jac = DMatrix::<f64>::zeros(n, n);
    eval(z, &mut res, Some(&mut jac));
    let mut norm = inf_norm(&res);
    let mut trial = vec![0.0; n];
    let mut trial_res = vec![0.0; n];
    for it in 0..opts.max_iter {
        if norm <= tol {
            return Ok(());
        }
        let rhs = DVector::from_iterator(n, res.iter().map(|r| -r));
        let step = jac.clone().lu().solve(&rhs).ok_or(Error::StepFailure {
            residual: norm,
            iterations: it,
        })?;
        let mut alpha = 1.0;
        loop {
            for i in 0..n {
                trial[i] = z[i] + alpha * step[i];
            }
            eval(&trial, &mut trial_res, None);
            let trial_norm = inf_norm(&trial_res);
            if trial_norm < norm || alpha < 1e-4 {
                break;
            }
            alpha *= 0.5;
        }
        z.copy_from_slice(&trial);
        eval(z, &mut res, Some(&mut jac));
        let new_norm = inf_norm(&res);
        if !new_norm.is_finite() {
            return Err(Error::StepFailure {
                residual: new_norm,
                iterations: it + 1,
            });
        }
        norm = new_norm;
    }
    if norm <= tol {
        Ok(())
    } else {
        Err(Error::StepFailure {
            residual: norm,
            iterations: opts.max_iter,
        })
    }
}

pub(crate) fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| if x.is_nan() { f64::NAN } else { m.max(x.abs()) })
}

/// One SC step: solves
/// `x_k ṗ_0(τ_i) + Σ_j z_j ṗ_j(τ_i) = h f̄(t_k + h τ_i, z_i, u, p)` for `i = 1..d`
/// and returns `x_{k+1} = x_k p_0(1) + Σ_j z_j p_j(1)`.
#[allow(clippy::too_many_arguments)]
pub fn sc_step(
    fov: FirstOrderView<'_>,
    basis: &LagrangeBasis,
    x_k: &[f64],
    u: &[f64],
    p: &[f64],
    t_k: f64,
    h: f64,
    opts: NewtonOptions,
) -> Result<(Vec<f64>, StageInternals)> {
    let dims = fov.dims();
    let nx = dims.nx();
    let tau = basis.points();
    let d = tau.len();
    // dp[i][j] = ṗ_j(τ_i), j = 0..=d
    let dp: Vec<Vec<f64>> = tau
        .iter()
        .map(|&t| (0..=d).map(|j| basis.poly(j).deriv(t)).collect())
        .collect();

    let mut z: Vec<f64> = (0..d).flat_map(|_| x_k.iter().copied()).collect();
    let mut fbar = vec![0.0; nx];
    let mut scratch = AccelJacobian::zeros(dims);
    let scale = inf_norm(x_k);
    newton(&mut z, opts, scale, |z, res, jac| {
        for i in 0..d {
            let zi = &z[i * nx..(i + 1) * nx];
            let t = t_k + h * tau[i];
            fov.eval(t, zi, u, p, &mut fbar);
            for c in 0..nx {
                let mut r = x_k[c] * dp[i][0];
                for j in 0..d {
                    r += z[j * nx + c] * dp[i][j + 1];
                }
                res[i * nx + c] = r - h * fbar[c];
            }
        }
        if let Some(jac) = jac {
            jac.fill(0.0);
            for i in 0..d {
                let zi = &z[i * nx..(i + 1) * nx];
                let fj = fov.jacobian(t_k + h * tau[i], zi, u, p, &mut scratch);
                for j in 0..d {
                    for c in 0..nx {
                        jac[(i * nx + c, j * nx + c)] += dp[i][j + 1];
                    }
                }
                for r in 0..nx {
                    for c in 0..nx {
                        jac[(i * nx + r, i * nx + c)] -= h * fj.dx[(r, c)];
                    }
                }
            }
        }
    })?;

    let end: Vec<f64> = (0..=d).map(|j| basis.poly(j).eval(1.0)).collect();
    let next = (0..nx)
        .map(|c| x_k[c] * end[0] + (0..d).map(|j| z[j * nx + c] * end[j + 1]).sum::<f64>())
        .collect();
    Ok((
        next,
        StageInternals {
            method: Method::Standard,
            width: nx,
            values: z,
        },
    ))
}

/// Precomputed semi-Hermite values used by PC steps and the PC transcription.
#[derive(Debug, Clone)]
pub(crate) struct PcTables {
    pub d: usize,
    /// `[i][j]` = `p̈*_j(τ_i)` for `j = 0..=d`, then `p̈*_v(τ_i)` at index `d + 1`.
    pub dd: Vec<Vec<f64>>,
    /// `[i][j]` = `ṗ*_j(τ_i)`, same layout.
    pub dv: Vec<Vec<f64>>,
    /// Values at `τ = 1`, same layout.
    pub end_val: Vec<f64>,
    /// First derivatives at `τ = 1`, same layout.
    pub end_der: Vec<f64>,
}

impl PcTables {
    pub fn new(basis: &SemiHermiteBasis) -> Self {
        let tau = basis.points();
        let d = tau.len();
        let poly = |j: usize| if j <= d { basis.poly(j) } else { basis.velocity() };
        let row = |f: &dyn Fn(&crate::basis::Poly) -> f64| (0..=d + 1).map(|j| f(poly(j))).collect::<Vec<_>>();
        Self {
            d,
            dd: tau.iter().map(|&t| row(&|p| p.deriv2(t))).collect(),
            dv: tau.iter().map(|&t| row(&|p| p.deriv(t))).collect(),
            end_val: row(&|p| p.eval(1.0)),
            end_der: row(&|p| p.deriv(1.0)),
        }
    }

    /// Velocity at `τ_i`: `(q_k ṗ*_0 + Σ z_j ṗ*_j) / h + v_k ṗ*_v`.
    pub fn velocity_at(&self, i: usize, q_k: &[f64], v_k: &[f64], z: &[f64], h: f64, out: &mut [f64]) {
        let nq = q_k.len();
        let row = &self.dv[i];
        for c in 0..nq {
            let mut s = q_k[c] * row[0];
            for j in 0..self.d {
                s += z[j * nq + c] * row[j + 1];
            }
            out[c] = s / h + v_k[c] * row[self.d + 1];
        }
    }

    /// [`Self::velocity_at`] in terms of the offsets `z_j − q_k`, which avoids
    /// dividing rounding errors of `q_k` by `h`.
    fn offset_velocity(&self, i: usize, v_k: &[f64], dz: &[f64], h: f64, out: &mut [f64]) {
        let nq = v_k.len();
        let row = &self.dv[i];
        for c in 0..nq {
            let s: f64 = (0..self.d).map(|j| dz[j * nq + c] * row[j + 1]).sum();
            out[c] = s / h + v_k[c] * row[self.d + 1];
        }
    }

    /// [`Self::end_state`] in terms of the offsets `z_j − q_k`.
    fn offset_end_state(&self, q_k: &[f64], v_k: &[f64], dz: &[f64], h: f64) -> Vec<f64> {
        let nq = q_k.len();
        let d = self.d;
        let mut out = vec![0.0; 2 * nq];
        for c in 0..nq {
            let mut dq = h * v_k[c] * self.end_val[d + 1];
            let mut v = 0.0;
            for j in 0..d {
                dq += dz[j * nq + c] * self.end_val[j + 1];
                v += dz[j * nq + c] * self.end_der[j + 1];
            }
            out[c] = q_k[c] + dq;
            out[nq + c] = v / h + v_k[c] * self.end_der[d + 1];
        }
        out
    }

    /// State at `τ = 1` from the position polynomial.
    pub fn end_state(&self, q_k: &[f64], v_k: &[f64], z: &[f64], h: f64) -> Vec<f64> {
        let nq = q_k.len();
        let d = self.d;
        let mut out = vec![0.0; 2 * nq];
        for c in 0..nq {
            let mut q = q_k[c] * self.end_val[0] + h * v_k[c] * self.end_val[d + 1];
            let mut v = q_k[c] * self.end_der[0];
            for j in 0..d {
                q += z[j * nq + c] * self.end_val[j + 1];
                v += z[j * nq + c] * self.end_der[j + 1];
            }
            out[c] = q;
            out[nq + c] = v / h + v_k[c] * self.end_der[d + 1];
        }
        out
    }
}

/// One PC step: solves
/// `q_k p̈*_0(τ_i) + Σ_j z_j p̈*_j(τ_i) + h v_k p̈*_v(τ_i) = h² f(t_k + h τ_i, z_i, w_i, u, p)`
/// with `w_i` the polynomial velocity at `τ_i`, then evaluates the position
/// polynomial and its scaled derivative at `τ = 1`.
#[allow(clippy::too_many_arguments)]
pub fn pc_step(
    ode: &dyn SecondOrderOde,
    basis: &SemiHermiteBasis,
    x_k: &[f64],
    u: &[f64],
    p: &[f64],
    t_k: f64,
    h: f64,
    opts: NewtonOptions,
) -> Result<(Vec<f64>, StageInternals)> {
    let tables = PcTables::new(basis);
    pc_step_with(ode, basis.points(), &tables, x_k, u, p, t_k, h, opts)
}

#[allow(clippy::too_many_arguments)]
fn pc_step_with(
    ode: &dyn SecondOrderOde,
    tau: &[f64],
    tables: &PcTables,
    x_k: &[f64],
    u: &[f64],
    p: &[f64],
    t_k: f64,
    h: f64,
    opts: NewtonOptions,
) -> Result<(Vec<f64>, StageInternals)> {
    let dims = ode.dims();
    let nq = dims.nq;
    let d = tau.len();
    let (q_k, v_k) = x_k.split_at(nq);
    let h2 = h * h;

    // Unknowns are the offsets z_i − q_k; the positions themselves would feed
    // O(ε |q|) rounding into the velocity, amplified by 1/h.
    let mut dz: Vec<f64> = tau
        .iter()
        .flat_map(|&t| (0..nq).map(move |c| h * t * v_k[c]))
        .collect();
    let mut w = vec![0.0; nq];
    let mut zi = vec![0.0; nq];
    let mut acc = vec![0.0; nq];
    let mut jac_f = AccelJacobian::zeros(dims);
    let vel_dep = ode.velocity_dependent();
    let scale = inf_norm(x_k) * h.max(h2);
    newton(&mut dz, opts, scale, |dz, res, jac| {
        for i in 0..d {
            for c in 0..nq {
                zi[c] = q_k[c] + dz[i * nq + c];
            }
            tables.offset_velocity(i, v_k, dz, h, &mut w);
            ode.accel(t_k + h * tau[i], &zi, &w, u, p, &mut acc);
            let row = &tables.dd[i];
            for c in 0..nq {
                let mut r = h * v_k[c] * row[d + 1];
                for j in 0..d {
                    r += dz[j * nq + c] * row[j + 1];
                }
                res[i * nq + c] = r - h2 * acc[c];
            }
        }
        if let Some(jac) = jac {
            jac.fill(0.0);
            for i in 0..d {
                for c in 0..nq {
                    zi[c] = q_k[c] + dz[i * nq + c];
                }
                tables.offset_velocity(i, v_k, dz, h, &mut w);
                jac_f.fill_zero();
                ode.accel_jacobian(t_k + h * tau[i], &zi, &w, u, p, &mut jac_f);
                for j in 0..d {
                    let lin = tables.dd[i][j + 1];
                    let dw = tables.dv[i][j + 1] / h;
                    for r in 0..nq {
                        jac[(i * nq + r, j * nq + r)] += lin;
                        if vel_dep {
                            for c in 0..nq {
                                jac[(i * nq + r, j * nq + c)] -= h2 * jac_f.dv[(r, c)] * dw;
                            }
                        }
                    }
                }
                for r in 0..nq {
                    for c in 0..nq {
                        jac[(i * nq + r, i * nq + c)] -= h2 * jac_f.dq[(r, c)];
                    }
                }
            }
        }
    })?;

    let next = tables.offset_end_state(q_k, v_k, &dz, h);
    let values = dz.iter().enumerate().map(|(t, o)| q_k[t % nq] + o).collect();
    Ok((
        next,
        StageInternals {
            method: Method::PositionBased,
            width: nq,
            values,
        },
    ))
}

/// Piecewise-polynomial numerical solution on an equidistant grid.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub scheme: CollocationScheme,
    pub method: Method,
    pub nq: usize,
    pub h: f64,
    pub horizon: f64,
    /// Grid states `x_0..x_N`, each `(q, v)`.
    pub states: Vec<Vec<f64>>,
    /// Stage unknowns `z_0..z_{N-1}`.
    pub internals: Vec<StageInternals>,
    interpolant: Interpolant,
}

impl Trajectory {
    pub fn intervals(&self) -> usize {
        self.internals.len()
    }

    fn locate(&self, t: f64) -> Result<(usize, f64)> {
        let eps = 1e-12 * self.horizon.max(1.0);
        if !(t >= -eps && t <= self.horizon + eps) {
            return Err(Error::OutOfHorizon { t, horizon: self.horizon });
        }
        let n = self.intervals();
        let k = ((t / self.h).floor().max(0.0) as usize).min(n - 1);
        Ok((k, (t - k as f64 * self.h) / self.h))
    }

    /// `(q, v)` of the interval polynomial at time `t`.
    pub fn dense_eval(&self, t: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let (k, tau) = self.locate(t)?;
        Ok(self.eval_local(k, tau, 0))
    }

    /// Time derivative `(q̇̃, ṽ)` of the interval polynomial.
    pub fn dense_derivative(&self, t: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let (k, tau) = self.locate(t)?;
        Ok(self.eval_local(k, tau, 1))
    }

    /// Evaluates interval `k` at local time `tau`; `order` 1 returns time derivatives.
    pub fn eval_local(&self, k: usize, tau: f64, order: usize) -> (Vec<f64>, Vec<f64>) {
        let nq = self.nq;
        let x = &self.states[k];
        let z = &self.internals[k];
        let d = z.order();
        let scale = if order == 0 { 1.0 } else { 1.0 / self.h };
        match &self.interpolant {
            Interpolant::Lagrange(b) => {
                let w: Vec<f64> = (0..=d).map(|j| b.poly(j).eval_order(tau, order)).collect();
                let mut out = vec![0.0; 2 * nq];
                for (c, o) in out.iter_mut().enumerate() {
                    *o = scale * (x[c] * w[0] + (0..d).map(|j| z.point(j)[c] * w[j + 1]).sum::<f64>());
                }
                let v = out.split_off(nq);
                (out, v)
            }
            Interpolant::SemiHermite(b) => {
                let poly = |j: usize| if j <= d { b.poly(j) } else { b.velocity() };
                let pos_w: Vec<f64> = (0..=d + 1).map(|j| poly(j).eval_order(tau, order)).collect();
                let vel_w: Vec<f64> = (0..=d + 1).map(|j| poly(j).eval_order(tau, order + 1)).collect();
                let combine = |w: &[f64], c: usize| {
                    x[c] * w[0] + (0..d).map(|j| z.point(j)[c] * w[j + 1]).sum::<f64>() + self.h * x[nq + c] * w[d + 1]
                };
                let q = (0..nq).map(|c| scale * combine(&pos_w, c)).collect();
                let v = (0..nq).map(|c| scale * combine(&vel_w, c) / self.h).collect();
                (q, v)
            }
        }
    }
}

/// Simulates with per-interval controls `controls[k]` (length `N`, each `nu`).
#[allow(clippy::too_many_arguments)]
pub fn simulate_controls(
    ode: &dyn SecondOrderOde,
    method: Method,
    scheme: &CollocationScheme,
    x0: &[f64],
    horizon: f64,
    controls: &[Vec<f64>],
    p: &[f64],
    opts: NewtonOptions,
) -> Result<Trajectory> {
    let n = controls.len();
    if n == 0 {
        return Err(Error::InvalidProblem("need at least one interval".into()));
    }
    let dims = ode.dims();
    crate::model::check_len("initial state", dims.nx(), x0.len())?;
    let h = horizon / n as f64;
    let interpolant = Interpolant::for_method(method, scheme)?;
    let pc_tables = match &interpolant {
        Interpolant::SemiHermite(b) => Some(PcTables::new(b)),
        _ => None,
    };
    let mut states = Vec::with_capacity(n + 1);
    let mut internals = Vec::with_capacity(n);
    states.push(x0.to_vec());
    for (k, u) in controls.iter().enumerate() {
        let t_k = k as f64 * h;
        let x_k = &states[k];
        let step = match (&interpolant, &pc_tables) {
            (Interpolant::Lagrange(b), _) => sc_step(FirstOrderView::new(ode), b, x_k, u, p, t_k, h, opts),
            (Interpolant::SemiHermite(_), Some(tab)) => pc_step_with(ode, scheme.points(), tab, x_k, u, p, t_k, h, opts),
            _ => unreachable!(),
        };
        let (next, z) = step.map_err(|e| Error::Simulation {
            interval: k,
            source: Box::new(e),
        })?;
        states.push(next);
        internals.push(z);
    }
    Ok(Trajectory {
        scheme: scheme.clone(),
        method,
        nq: dims.nq,
        h,
        horizon,
        states,
        internals,
        interpolant,
    })
}

/// Simulates an IVP with its fixed controls and parameters.
pub fn simulate(ivp: &Ivp<'_>, method: Method, scheme: &CollocationScheme) -> Result<Trajectory> {
    ivp.validate()?;
    let x0: Vec<f64> = ivp.q0.iter().chain(&ivp.v0).copied().collect();
    let controls = vec![ivp.u.clone(); ivp.intervals];
    simulate_controls(ivp.ode, method, scheme, &x0, ivp.horizon, &controls, &ivp.p, NewtonOptions::default())
}

/// Samples per interval used by [`dense_l1_error`].
pub const SAMPLES_PER_INTERVAL: usize = 20;

/// L1 distance between the grid states and `reference` over `[0, T]`
/// (trapezoidal rule on the grid), summed over all position and velocity
/// components.
pub fn global_error(traj: &Trajectory, reference: impl Fn(f64) -> (Vec<f64>, Vec<f64>)) -> f64 {
    let n = traj.intervals();
    let nq = traj.nq;
    let pointwise: Vec<f64> = (0..=n)
        .map(|k| {
            let (q, v) = reference(k as f64 * traj.h);
            let x = &traj.states[k];
            (0..nq).map(|c| (x[c] - q[c]).abs() + (x[nq + c] - v[c]).abs()).sum()
        })
        .collect();
    trapezoid(&pointwise, traj.h)
}

/// L1 distance between the dense output and `reference`, using
/// [`SAMPLES_PER_INTERVAL`] uniform sub-intervals per grid interval.
pub fn dense_l1_error(traj: &Trajectory, reference: impl Fn(f64) -> (Vec<f64>, Vec<f64>)) -> f64 {
    dense_component_errors(traj, reference).iter().sum()
}

/// Dense L1 error split into `(position, velocity)` parts.
pub fn dense_component_errors(traj: &Trajectory, reference: impl Fn(f64) -> (Vec<f64>, Vec<f64>)) -> [f64; 2] {
    let m = SAMPLES_PER_INTERVAL;
    let dt = traj.h / m as f64;
    let mut total = [0.0; 2];
    for k in 0..traj.intervals() {
        let (pq, pv): (Vec<f64>, Vec<f64>) = (0..=m)
            .map(|s| {
                let tau = s as f64 / m as f64;
                let (q, v) = traj.eval_local(k, tau, 0);
                let (qr, vr) = reference((k as f64 + tau) * traj.h);
                let eq: f64 = q.iter().zip(&qr).map(|(a, b)| (a - b).abs()).sum();
                let ev: f64 = v.iter().zip(&vr).map(|(a, b)| (a - b).abs()).sum();
                (eq, ev)
            })
            .unzip();
        total[0] += trapezoid(&pq, dt);
        total[1] += trapezoid(&pv, dt);
    }
    total
}

fn trapezoid(values: &[f64], dt: f64) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let inner: f64 = values[1..values.len() - 1].iter().sum();
    dt * (inner + 0.5 * (values[0] + values[values.len() - 1]))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub method: Method,
    pub family: PointFamily,
    pub d: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub h: f64,
    pub error: f64,
    /// Least-squares order for the row's (method, family, d) group.
    pub slope: Option<f64>,
}

/// Errors below this floor are excluded from slope fitting.
pub const SLOPE_FLOOR: f64 = 1e-12;

/// Least-squares slope of `log(error)` against `log(h)`.
pub fn fitted_slope(points: &[(f64, f64)]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(_, e)| *e > SLOPE_FLOOR && e.is_finite())
        .map(|(h, e)| (h.ln(), e.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Runs every `(method, scheme)` configuration at every `N` and fits the
/// observed order per configuration.
pub fn convergence_study<R>(
    ivp: &Ivp<'_>,
    reference: R,
    configs: &[(Method, CollocationScheme)],
    n_list: &[usize],
    exec: Execution,
) -> Result<Vec<ConvergenceRow>>
where
    R: Fn(f64) -> (Vec<f64>, Vec<f64>) + Sync,
{
    let jobs: Vec<(usize, usize)> = (0..configs.len())
        .flat_map(|c| n_list.iter().map(move |&n| (c, n)))
        .collect();
    let results = exec::map(exec, &jobs, |&(c, n)| -> Result<ConvergenceRow> {
        let (method, scheme) = &configs[c];
        let run = ivp.with_intervals(n);
        let traj = simulate(&run, *method, scheme)?;
        Ok(ConvergenceRow {
            method: *method,
            family: scheme.family(),
            d: scheme.order(),
            n,
            h: run.step_size(),
            error: global_error(&traj, &reference),
            slope: None,
        })
    });
    let mut rows = results.into_iter().collect::<Result<Vec<_>>>()?;
    for chunk in rows.chunks_mut(n_list.len().max(1)) {
        let pts: Vec<(f64, f64)> = chunk.iter().map(|r| (r.h, r.error)).collect();
        let slope = fitted_slope(&pts);
        for r in chunk.iter_mut() {
            r.slope = slope;
        }
    }
    Ok(rows)
}

/// Writes convergence rows as CSV with header `method,family,d,N,h,error,slope`.
pub fn write_convergence_csv<W: std::io::Write>(rows: &[ConvergenceRow], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(["method", "family", "d", "N", "h", "error", "slope"])?;
    for r in rows {
        w.write_record([
            r.method.short_name().to_string(),
            r.family.short_name().to_string(),
            r.d.to_string(),
            r.n.to_string(),
            format!("{:e}", r.h),
            format!("{:e}", r.error),
            r.slope.map(|s| format!("{s:.4}")).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
