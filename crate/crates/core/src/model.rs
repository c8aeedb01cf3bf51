//! Second-order controlled ODEs `q̈ = f(t, q, q̇, u, p)` and the optimal
//! control problem class built on them.
//!
//! States are always ordered `x = (q, v)`: components `0..nq` are positions,
//! `nq..2nq` velocities. Problem authors supply analytic first derivatives;
//! [`verify_derivatives`] checks them against central differences.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OdeDims {
    pub nq: usize,
    pub nu: usize,
    pub np: usize,
}

impl OdeDims {
    pub fn new(nq: usize, nu: usize, np: usize) -> Self {
        Self { nq, nu, np }
    }

    pub fn nx(&self) -> usize {
        2 * self.nq
    }
}

/// Partial derivatives of the acceleration, each with `nq` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct AccelJacobian {
    pub dq: DMatrix<f64>,
    pub dv: DMatrix<f64>,
    pub du: DMatrix<f64>,
    pub dp: DMatrix<f64>,
}

impl AccelJacobian {
    pub fn zeros(dims: OdeDims) -> Self {
        Self {
            dq: DMatrix::zeros(dims.nq, dims.nq),
            dv: DMatrix::zeros(dims.nq, dims.nq),
            du: DMatrix::zeros(dims.nq, dims.nu),
            dp: DMatrix::zeros(dims.nq, dims.np),
        }
    }

    pub fn fill_zero(&mut self) {
        self.dq.fill(0.0);
        self.dv.fill(0.0);
        self.du.fill(0.0);
        self.dp.fill(0.0);
    }
}

/// Controlled second-order ODE.
///
/// Implementations must be pure: identical inputs give identical outputs.
pub trait SecondOrderOde: Send + Sync {
    fn dims(&self) -> OdeDims;

    /// True iff the acceleration reads the velocity.
    fn velocity_dependent(&self) -> bool;

    fn accel(&self, t: f64, q: &[f64], v: &[f64], u: &[f64], p: &[f64], out: &mut [f64]);

    /// Writes all four Jacobian blocks. Blocks the model does not depend on
    /// must be left (or set to) zero.
    fn accel_jacobian(&self, t: f64, q: &[f64], v: &[f64], u: &[f64], p: &[f64], jac: &mut AccelJacobian);
}

/// The state-augmented view `ẋ = f̄(t, x, u, p) = (v, f(t, q, v, u, p))`.
#[derive(Clone, Copy)]
pub struct FirstOrderView<'a> {
    ode: &'a dyn SecondOrderOde,
}

/// Jacobian of `f̄` with respect to `x`, `u` and `p`.
#[derive(Debug, Clone)]
pub struct FirstOrderJacobian {
    pub dx: DMatrix<f64>,
    pub du: DMatrix<f64>,
    pub dp: DMatrix<f64>,
}

impl<'a> FirstOrderView<'a> {
    pub fn new(ode: &'a dyn SecondOrderOde) -> Self {
        Self { ode }
    }

    pub fn ode(&self) -> &'a dyn SecondOrderOde {
        self.ode
    }

    pub fn dims(&self) -> OdeDims {
        self.ode.dims()
    }

    pub fn eval(&self, t: f64, x: &[f64], u: &[f64], p: &[f64], out: &mut [f64]) {
        let nq = self.ode.dims().nq;
        let (q, v) = x.split_at(nq);
        out[..nq].copy_from_slice(v);
        self.ode.accel(t, q, v, u, p, &mut out[nq..2 * nq]);
    }

    /// Block structure `[[0, I], [∂f/∂q, ∂f/∂v]]` plus control and parameter columns.
    pub fn jacobian(&self, t: f64, x: &[f64], u: &[f64], p: &[f64], scratch: &mut AccelJacobian) -> FirstOrderJacobian {
        let dims = self.ode.dims();
        let nq = dims.nq;
        let (q, v) = x.split_at(nq);
        scratch.fill_zero();
        self.ode.accel_jacobian(t, q, v, u, p, scratch);
        let mut dx = DMatrix::zeros(2 * nq, 2 * nq);
        let mut du = DMatrix::zeros(2 * nq, dims.nu);
        let mut dp = DMatrix::zeros(2 * nq, dims.np);
        for i in 0..nq {
            dx[(i, nq + i)] = 1.0;
        }
        dx.view_mut((nq, 0), (nq, nq)).copy_from(&scratch.dq);
        dx.view_mut((nq, nq), (nq, nq)).copy_from(&scratch.dv);
        du.view_mut((nq, 0), (nq, dims.nu)).copy_from(&scratch.du);
        dp.view_mut((nq, 0), (nq, dims.np)).copy_from(&scratch.dp);
        FirstOrderJacobian { dx, du, dp }
    }
}

/// Initial value problem on the equidistant grid `t_k = k h`, `h = T / N`,
/// with fixed controls and parameters.
#[derive(Clone)]
pub struct Ivp<'a> {
    pub ode: &'a dyn SecondOrderOde,
    pub q0: Vec<f64>,
    pub v0: Vec<f64>,
    pub horizon: f64,
    pub intervals: usize,
    pub u: Vec<f64>,
    pub p: Vec<f64>,
}

impl<'a> Ivp<'a> {
    pub fn new(ode: &'a dyn SecondOrderOde, q0: Vec<f64>, v0: Vec<f64>, horizon: f64, intervals: usize) -> Result<Self> {
        let dims = ode.dims();
        let ivp = Self {
            ode,
            q0,
            v0,
            horizon,
            intervals,
            u: vec![0.0; dims.nu],
            p: vec![0.0; dims.np],
        };
        ivp.validate()?;
        Ok(ivp)
    }

    pub fn with_intervals(&self, intervals: usize) -> Self {
        Self {
            intervals,
            ..self.clone()
        }
    }

    pub fn step_size(&self) -> f64 {
        self.horizon / self.intervals as f64
    }

    pub fn validate(&self) -> Result<()> {
        let dims = self.ode.dims();
        if !(self.horizon > 0.0) {
            return Err(Error::InvalidProblem("horizon must be positive".into()));
        }
        if self.intervals == 0 {
            return Err(Error::InvalidProblem("need at least one interval".into()));
        }
        check_len("initial position", dims.nq, self.q0.len())?;
        check_len("initial velocity", dims.nq, self.v0.len())?;
        check_len("controls", dims.nu, self.u.len())?;
        check_len("parameters", dims.np, self.p.len())?;
        Ok(())
    }
}

pub(crate) fn check_len(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Dimension { context, expected, got });
    }
    Ok(())
}

/// Optimal control problem over `[0, T]` with `N` equal intervals:
///
/// ```text
/// minimize   ∫ L(x, u, p) dt + E(x(T))
/// subject to q̈ = f(t, q, q̇, u, p)
///            g(x, u, p) ≥ 0
///            r(x(T), x(0), p) = 0
/// ```
pub trait OptimalControlProblem: Send + Sync {
    fn ode(&self) -> &dyn SecondOrderOde;
    fn horizon(&self) -> f64;
    fn intervals(&self) -> usize;
    /// Number of path constraints `nc`.
    fn n_path(&self) -> usize;
    /// Number of boundary constraints `nr`.
    fn n_boundary(&self) -> usize;

    fn stage_cost_velocity_dependent(&self) -> bool;
    fn stage_cost(&self, x: &[f64], u: &[f64], p: &[f64]) -> f64;
    fn stage_cost_gradient(&self, x: &[f64], u: &[f64], p: &[f64], gx: &mut [f64], gu: &mut [f64], gp: &mut [f64]);

    fn terminal_cost(&self, x: &[f64]) -> f64;
    fn terminal_cost_gradient(&self, x: &[f64], gx: &mut [f64]);

    fn path(&self, x: &[f64], u: &[f64], p: &[f64], out: &mut [f64]);
    fn path_jacobian(&self, x: &[f64], u: &[f64], p: &[f64], dx: &mut DMatrix<f64>, du: &mut DMatrix<f64>, dp: &mut DMatrix<f64>);

    fn boundary(&self, x_end: &[f64], x_start: &[f64], p: &[f64], out: &mut [f64]);
    fn boundary_jacobian(
        &self,
        x_end: &[f64],
        x_start: &[f64],
        p: &[f64],
        d_end: &mut DMatrix<f64>,
        d_start: &mut DMatrix<f64>,
        dp: &mut DMatrix<f64>,
    );

    fn nominal_parameters(&self) -> Vec<f64> {
        vec![0.0; self.ode().dims().np]
    }

    /// Start and end states pinned by `r`, when the problem knows them.
    /// Used only to build initial guesses.
    fn fixed_endpoints(&self) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
        (None, None)
    }
}

/// Planar overhead crane with a massless load and rope friction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CraneParams {
    pub r_min: f64,
    pub r_max: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub beta: f64,
    pub a: f64,
    #[serde(rename = "N")]
    pub intervals: usize,
}

impl Default for CraneParams {
    fn default() -> Self {
        Self {
            r_min: -3.0,
            r_max: 3.0,
            horizon: 10.0,
            beta: 0.1,
            a: 9.81,
            intervals: 20,
        }
    }
}

impl CraneParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.r_min < self.r_max) {
            return Err(Error::InvalidProblem(format!(
                "r_min ({}) must be below r_max ({})",
                self.r_min, self.r_max
            )));
        }
        if !(self.horizon > 0.0) {
            return Err(Error::InvalidProblem("horizon T must be positive".into()));
        }
        if self.intervals == 0 {
            return Err(Error::InvalidProblem("N must be at least 1".into()));
        }
        if !self.beta.is_finite() || !self.a.is_finite() {
            return Err(Error::InvalidProblem("beta and a must be finite".into()));
        }
        Ok(())
    }
}

/// `r̈ = u`, `θ̈ = -u cos θ - a sin θ - β θ̇` with `q = (r, θ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CraneDynamics {
    pub a: f64,
    pub beta: f64,
}

impl SecondOrderOde for CraneDynamics {
    fn dims(&self) -> OdeDims {
        OdeDims::new(2, 1, 0)
    }

    fn velocity_dependent(&self) -> bool {
        self.beta != 0.0
    }

    fn accel(&self, _t: f64, q: &[f64], v: &[f64], u: &[f64], _p: &[f64], out: &mut [f64]) {
        let theta = q[1];
        out[0] = u[0];
        out[1] = -u[0] * theta.cos() - self.a * theta.sin() - self.beta * v[1];
    }

    fn accel_jacobian(&self, _t: f64, q: &[f64], _v: &[f64], u: &[f64], _p: &[f64], jac: &mut AccelJacobian) {
        let theta = q[1];
        jac.dq.fill(0.0);
        jac.dq[(1, 1)] = u[0] * theta.sin() - self.a * theta.cos();
        jac.dv.fill(0.0);
        jac.dv[(1, 1)] = -self.beta;
        jac.du[(0, 0)] = 1.0;
        jac.du[(1, 0)] = -theta.cos();
    }
}

/// The crane regulation problem: drive `(r, θ)` from `(r0, θ0)` at rest to the
/// origin at rest while minimizing `∫ u² + r² + θ²`, with `r_min ≤ r ≤ r_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct CraneOcp {
    pub params: CraneParams,
    pub r0: f64,
    pub theta0: f64,
    dynamics: CraneDynamics,
}

pub fn make_crane_ocp(r0: f64, theta0: f64, params: CraneParams) -> Result<CraneOcp> {
    params.validate()?;
    if !r0.is_finite() || !theta0.is_finite() {
        return Err(Error::InvalidProblem("initial crane state must be finite".into()));
    }
    Ok(CraneOcp {
        params,
        r0,
        theta0,
        dynamics: CraneDynamics {
            a: params.a,
            beta: params.beta,
        },
    })
}

impl CraneOcp {
    pub fn dynamics(&self) -> &CraneDynamics {
        &self.dynamics
    }

    fn initial_state(&self) -> [f64; 4] {
        [self.r0, self.theta0, 0.0, 0.0]
    }
}

impl OptimalControlProblem for CraneOcp {
    fn ode(&self) -> &dyn SecondOrderOde {
        &self.dynamics
    }

    fn horizon(&self) -> f64 {
        self.params.horizon
    }

    fn intervals(&self) -> usize {
        self.params.intervals
    }

    fn n_path(&self) -> usize {
        2
    }

    fn n_boundary(&self) -> usize {
        8
    }

    fn stage_cost_velocity_dependent(&self) -> bool {
        false
    }

    fn stage_cost(&self, x: &[f64], u: &[f64], _p: &[f64]) -> f64 {
        u[0] * u[0] + x[0] * x[0] + x[1] * x[1]
    }

    fn stage_cost_gradient(&self, x: &[f64], u: &[f64], _p: &[f64], gx: &mut [f64], gu: &mut [f64], _gp: &mut [f64]) {
        gx.fill(0.0);
        gx[0] = 2.0 * x[0];
        gx[1] = 2.0 * x[1];
        gu[0] = 2.0 * u[0];
    }

    fn terminal_cost(&self, _x: &[f64]) -> f64 {
        0.0
    }

    fn terminal_cost_gradient(&self, _x: &[f64], gx: &mut [f64]) {
        gx.fill(0.0);
    }

    fn path(&self, x: &[f64], _u: &[f64], _p: &[f64], out: &mut [f64]) {
        out[0] = x[0] - self.params.r_min;
        out[1] = self.params.r_max - x[0];
    }

    fn path_jacobian(&self, _x: &[f64], _u: &[f64], _p: &[f64], dx: &mut DMatrix<f64>, du: &mut DMatrix<f64>, _dp: &mut DMatrix<f64>) {
        dx.fill(0.0);
        du.fill(0.0);
        dx[(0, 0)] = 1.0;
        dx[(1, 0)] = -1.0;
    }

    fn boundary(&self, x_end: &[f64], x_start: &[f64], _p: &[f64], out: &mut [f64]) {
        let init = self.initial_state();
        for i in 0..4 {
            out[i] = x_start[i] - init[i];
            out[4 + i] = x_end[i];
        }
    }

    fn boundary_jacobian(
        &self,
        _x_end: &[f64],
        _x_start: &[f64],
        _p: &[f64],
        d_end: &mut DMatrix<f64>,
        d_start: &mut DMatrix<f64>,
        _dp: &mut DMatrix<f64>,
    ) {
        d_end.fill(0.0);
        d_start.fill(0.0);
        for i in 0..4 {
            d_start[(i, i)] = 1.0;
            d_end[(4 + i, i)] = 1.0;
        }
    }

    fn fixed_endpoints(&self) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
        (Some(self.initial_state().to_vec()), Some(vec![0.0; 4]))
    }
}

/// A handful of closed-form test dynamics.
pub mod library {
    use super::*;

    /// `q̈ = cos t - q`; with zero initial data the solution is `q = t sin(t) / 2`.
    #[derive(Debug, Clone, Copy, Default)]
    pub struct ForcedOscillator;

    impl ForcedOscillator {
        pub fn exact(t: f64) -> (f64, f64) {
            (0.5 * t * t.sin(), 0.5 * (t.sin() + t * t.cos()))
        }
    }

    impl SecondOrderOde for ForcedOscillator {
        fn dims(&self) -> OdeDims {
            OdeDims::new(1, 0, 0)
        }
        fn velocity_dependent(&self) -> bool {
            false
        }
        fn accel(&self, t: f64, q: &[f64], _v: &[f64], _u: &[f64], _p: &[f64], out: &mut [f64]) {
            out[0] = t.cos() - q[0];
        }
        fn accel_jacobian(&self, _t: f64, _q: &[f64], _v: &[f64], _u: &[f64], _p: &[f64], jac: &mut AccelJacobian) {
            jac.dq[(0, 0)] = -1.0;
        }
    }

    /// `q̈ = t^power` in one dimension.
    #[derive(Debug, Clone, Copy)]
    pub struct PowerForcing {
        pub power: i32,
    }

    impl PowerForcing {
        /// Exact solution from rest at the origin.
        pub fn exact(&self, t: f64) -> (f64, f64) {
            let m = self.power as f64;
            (t.powi(self.power + 2) / ((m + 1.0) * (m + 2.0)), t.powi(self.power + 1) / (m + 1.0))
        }
    }

    impl SecondOrderOde for PowerForcing {
        fn dims(&self) -> OdeDims {
            OdeDims::new(1, 0, 0)
        }
        fn velocity_dependent(&self) -> bool {
            false
        }
        fn accel(&self, t: f64, _q: &[f64], _v: &[f64], _u: &[f64], _p: &[f64], out: &mut [f64]) {
            out[0] = t.powi(self.power);
        }
        fn accel_jacobian(&self, _t: f64, _q: &[f64], _v: &[f64], _u: &[f64], _p: &[f64], _jac: &mut AccelJacobian) {}
    }

    /// `q̈ = 0` in `nq` dimensions.
    #[derive(Debug, Clone, Copy)]
    pub struct FreeMotion {
        pub nq: usize,
    }

    impl SecondOrderOde for FreeMotion {
        fn dims(&self) -> OdeDims {
            OdeDims::new(self.nq, 0, 0)
        }
        fn velocity_dependent(&self) -> bool {
            false
        }
        fn accel(&self, _t: f64, _q: &[f64], _v: &[f64], _u: &[f64], _p: &[f64], out: &mut [f64]) {
            out.fill(0.0);
        }
        fn accel_jacobian(&self, _t: f64, _q: &[f64], _v: &[f64], _u: &[f64], _p: &[f64], _jac: &mut AccelJacobian) {}
    }

    /// `q̈ = -q`.
    #[derive(Debug, Clone, Copy)]
    pub struct Spring {
        pub nq: usize,
    }

    impl SecondOrderOde for Spring {
        fn dims(&self) -> OdeDims {
            OdeDims::new(self.nq, 0, 0)
        }
        fn velocity_dependent(&self) -> bool {
            false
        }
        fn accel(&self, _t: f64, q: &[f64], _v: &[f64], _u: &[f64], _p: &[f64], out: &mut [f64]) {
            for (o, qi) in out.iter_mut().zip(q) {
                *o = -qi;
            }
        }
        fn accel_jacobian(&self, _t: f64, _q: &[f64], _v: &[f64], _u: &[f64], _p: &[f64], jac: &mut AccelJacobian) {
            jac.dq.fill_with_identity();
            jac.dq.neg_mut();
        }
    }

    /// Sizes of a [`DenseProblem`].
    #[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
    pub struct DenseSizes {
        pub nq: usize,
        pub nu: usize,
        pub np: usize,
        pub nc: usize,
        pub nr: usize,
        pub intervals: usize,
    }

    /// Smooth OCP whose every derivative block is dense, with random
    /// coefficients. Used to exercise transcription structure and
    /// derivatives in tests and benchmarks.
    ///
    /// ```text
    /// f = A sin(q) + B atan(v) + C u + (D p) ∘ q
    /// L = ½|q|² + ½ c_v |v|² + ½|u|² + Σp · Σq
    /// g = G sin(x) + H u + P p
    /// r = R_e x_T² + R_s x_0 + S p      (squares taken componentwise)
    /// E = ½|x_T|²
    /// ```
    #[derive(Debug, Clone)]
    pub struct DenseProblem {
        pub sizes: DenseSizes,
        pub horizon: f64,
        /// Include the `B atan(v)` term.
        pub accel_reads_v: bool,
        /// Weight `c_v` of the velocity cost; zero means `L` ignores `v`.
        pub velocity_cost: f64,
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        dmat: DMatrix<f64>,
        g: DMatrix<f64>,
        hmat: DMatrix<f64>,
        pmat: DMatrix<f64>,
        re: DMatrix<f64>,
        rs: DMatrix<f64>,
        s: DMatrix<f64>,
    }

    impl DenseProblem {
        pub fn new(sizes: DenseSizes, seed: u64, accel_reads_v: bool, velocity_cost: f64) -> Self {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut m = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.gen_range(0.5..1.5) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 });
            let DenseSizes { nq, nu, np, nc, nr, .. } = sizes;
            Self {
                sizes,
                horizon: 1.0,
                accel_reads_v,
                velocity_cost,
                a: m(nq, nq),
                b: m(nq, nq),
                c: m(nq, nu),
                dmat: m(nq, np),
                g: m(nc, 2 * nq),
                hmat: m(nc, nu),
                pmat: m(nc, np),
                re: m(nr, 2 * nq),
                rs: m(nr, 2 * nq),
                s: m(nr, np),
            }
        }
    }

    impl SecondOrderOde for DenseProblem {
        fn dims(&self) -> OdeDims {
            OdeDims::new(self.sizes.nq, self.sizes.nu, self.sizes.np)
        }
        fn velocity_dependent(&self) -> bool {
            self.accel_reads_v
        }
        fn accel(&self, _t: f64, q: &[f64], v: &[f64], u: &[f64], p: &[f64], out: &mut [f64]) {
            let nq = self.sizes.nq;
            for r in 0..nq {
                let mut s = 0.0;
                for a in 0..nq {
                    s += self.a[(r, a)] * q[a].sin();
                    if self.accel_reads_v {
                        s += self.b[(r, a)] * v[a].atan();
                    }
                }
                for a in 0..self.sizes.nu {
                    s += self.c[(r, a)] * u[a];
                }
                let dp: f64 = (0..self.sizes.np).map(|a| self.dmat[(r, a)] * p[a]).sum();
                out[r] = s + dp * q[r];
            }
        }
        fn accel_jacobian(&self, _t: f64, q: &[f64], v: &[f64], _u: &[f64], p: &[f64], jac: &mut AccelJacobian) {
            let nq = self.sizes.nq;
            for r in 0..nq {
                for a in 0..nq {
                    jac.dq[(r, a)] = self.a[(r, a)] * q[a].cos();
                    jac.dv[(r, a)] = if self.accel_reads_v {
                        self.b[(r, a)] * (1.0 + v[a] * v[a]).recip()
                    } else {
                        0.0
                    };
                }
                let dp: f64 = (0..self.sizes.np).map(|a| self.dmat[(r, a)] * p[a]).sum();
                jac.dq[(r, r)] += dp;
                for a in 0..self.sizes.nu {
                    jac.du[(r, a)] = self.c[(r, a)];
                }
                for a in 0..self.sizes.np {
                    jac.dp[(r, a)] = self.dmat[(r, a)] * q[r];
                }
            }
        }
    }

    impl OptimalControlProblem for DenseProblem {
        fn ode(&self) -> &dyn SecondOrderOde {
            self
        }
        fn horizon(&self) -> f64 {
            self.horizon
        }
        fn intervals(&self) -> usize {
            self.sizes.intervals
        }
        fn n_path(&self) -> usize {
            self.sizes.nc
        }
        fn n_boundary(&self) -> usize {
            self.sizes.nr
        }
        fn stage_cost_velocity_dependent(&self) -> bool {
            self.velocity_cost != 0.0
        }
        fn stage_cost(&self, x: &[f64], u: &[f64], p: &[f64]) -> f64 {
            let nq = self.sizes.nq;
            let sq = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>();
            let sp: f64 = p.iter().sum();
            let sx: f64 = x[..nq].iter().sum();
            0.5 * sq(&x[..nq]) + 0.5 * self.velocity_cost * sq(&x[nq..]) + 0.5 * sq(u) + sp * sx
        }
        fn stage_cost_gradient(&self, x: &[f64], u: &[f64], p: &[f64], gx: &mut [f64], gu: &mut [f64], gp: &mut [f64]) {
            let nq = self.sizes.nq;
            let sp: f64 = p.iter().sum();
            let sx: f64 = x[..nq].iter().sum();
            for a in 0..nq {
                gx[a] = x[a] + sp;
                gx[nq + a] = self.velocity_cost * x[nq + a];
            }
            gu.copy_from_slice(u);
            gp.fill(sx);
        }
        fn terminal_cost(&self, x: &[f64]) -> f64 {
            0.5 * x.iter().map(|a| a * a).sum::<f64>()
        }
        fn terminal_cost_gradient(&self, x: &[f64], gx: &mut [f64]) {
            gx.copy_from_slice(x);
        }
        fn path(&self, x: &[f64], u: &[f64], p: &[f64], out: &mut [f64]) {
            for r in 0..self.sizes.nc {
                let mut s = 0.0;
                for (a, xa) in x.iter().enumerate() {
                    s += self.g[(r, a)] * xa.sin();
                }
                for (a, ua) in u.iter().enumerate() {
                    s += self.hmat[(r, a)] * ua;
                }
                for (a, pa) in p.iter().enumerate() {
                    s += self.pmat[(r, a)] * pa;
                }
                out[r] = s;
            }
        }
        fn path_jacobian(&self, x: &[f64], _u: &[f64], _p: &[f64], dx: &mut DMatrix<f64>, du: &mut DMatrix<f64>, dp: &mut DMatrix<f64>) {
            for r in 0..self.sizes.nc {
                for (a, xa) in x.iter().enumerate() {
                    dx[(r, a)] = self.g[(r, a)] * xa.cos();
                }
            }
            du.copy_from(&self.hmat);
            dp.copy_from(&self.pmat);
        }
        fn boundary(&self, x_end: &[f64], x_start: &[f64], p: &[f64], out: &mut [f64]) {
            for r in 0..self.sizes.nr {
                let mut s = 0.0;
                for a in 0..x_end.len() {
                    s += self.re[(r, a)] * x_end[a] * x_end[a] + self.rs[(r, a)] * x_start[a];
                }
                for (a, pa) in p.iter().enumerate() {
                    s += self.s[(r, a)] * pa;
                }
                out[r] = s;
            }
        }
        fn boundary_jacobian(
            &self,
            x_end: &[f64],
            _x_start: &[f64],
            _p: &[f64],
            d_end: &mut DMatrix<f64>,
            d_start: &mut DMatrix<f64>,
            dp: &mut DMatrix<f64>,
        ) {
            for r in 0..self.sizes.nr {
                for a in 0..x_end.len() {
                    d_end[(r, a)] = 2.0 * self.re[(r, a)] * x_end[a];
                }
            }
            d_start.copy_from(&self.rs);
            dp.copy_from(&self.s);
        }
    }
}

/// Maximum relative error of each analytic derivative against central
/// differences.
#[derive(Debug, Clone, Default, Serialize)]
pub struct DerivativeReport {
    pub max_relative_error: BTreeMap<String, f64>,
}

impl DerivativeReport {
    fn record(&mut self, name: &str, err: f64) {
        let e = self.max_relative_error.entry(name.to_string()).or_insert(0.0);
        if err > *e || err.is_nan() {
            *e = err;
        }
    }

    pub fn worst(&self) -> Option<(&str, f64)> {
        self.max_relative_error
            .iter()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(k, v)| (k.as_str(), *v))
    }

    /// Fails naming the first derivative above `tol`.
    pub fn check(&self, tol: f64) -> std::result::Result<(), String> {
        for (name, err) in &self.max_relative_error {
            if !(*err <= tol) {
                return Err(format!("derivative `{name}` mismatch: relative error {err:e} > {tol:e}"));
            }
        }
        Ok(())
    }
}

/// Finite-difference step used by the derivative oracle.
pub const FD_STEP: f64 = 1e-6;

fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / fd.abs().max(analytic.abs()).max(1.0)
}

/// Central-difference derivative of `f` (vector valued, `m` outputs) with
/// respect to entry `j` of `arg`.
fn central_column(arg: &[f64], j: usize, m: usize, mut f: impl FnMut(&[f64], &mut [f64])) -> Vec<f64> {
    let mut a = arg.to_vec();
    let mut plus = vec![0.0; m];
    let mut minus = vec![0.0; m];
    a[j] = arg[j] + FD_STEP;
    f(&a, &mut plus);
    a[j] = arg[j] - FD_STEP;
    f(&a, &mut minus);
    plus.iter().zip(&minus).map(|(p, m)| (p - m) / (2.0 * FD_STEP)).collect()
}

fn compare_block(report: &mut DerivativeReport, name: &str, analytic: &DMatrix<f64>, arg: &[f64], m: usize, mut f: impl FnMut(&[f64], &mut [f64])) {
    for j in 0..arg.len() {
        let col = central_column(arg, j, m, &mut f);
        for i in 0..m {
            report.record(name, rel_err(analytic[(i, j)], col[i]));
        }
    }
    if arg.is_empty() {
        report.record(name, 0.0);
    }
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Checks the ODE Jacobians at `n_samples` random points in `[-1, 1]`.
pub fn verify_ode_derivatives(ode: &dyn SecondOrderOde, n_samples: usize, seed: u64) -> DerivativeReport {
    let dims = ode.dims();
    let nq = dims.nq;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = DerivativeReport::default();
    let mut jac = AccelJacobian::zeros(dims);
    for _ in 0..n_samples {
        let t = rng.gen_range(0.0..1.0);
        let q = random_vec(&mut rng, nq);
        let v = random_vec(&mut rng, nq);
        let u = random_vec(&mut rng, dims.nu);
        let p = random_vec(&mut rng, dims.np);
        jac.fill_zero();
        ode.accel_jacobian(t, &q, &v, &u, &p, &mut jac);
        compare_block(&mut report, "accel/q", &jac.dq, &q, nq, |a, o| ode.accel(t, a, &v, &u, &p, o));
        compare_block(&mut report, "accel/v", &jac.dv, &v, nq, |a, o| ode.accel(t, &q, a, &u, &p, o));
        compare_block(&mut report, "accel/u", &jac.du, &u, nq, |a, o| ode.accel(t, &q, &v, a, &p, o));
        compare_block(&mut report, "accel/p", &jac.dp, &p, nq, |a, o| ode.accel(t, &q, &v, &u, a, o));
        if !ode.velocity_dependent() {
            // a velocity-independent model must show no velocity sensitivity at all
            let fd_norm = (0..nq)
                .flat_map(|j| central_column(&v, j, nq, |a, o| ode.accel(t, &q, a, &u, &p, o)))
                .fold(0.0f64, |m, x| m.max(x.abs()));
            report.record("accel/v (declared zero)", fd_norm.max(jac.dv.amax()));
        }
    }
    report
}

/// Checks every analytic derivative of an optimal control problem, including
/// its dynamics.
pub fn verify_derivatives(problem: &dyn OptimalControlProblem, n_samples: usize, seed: u64) -> DerivativeReport {
    let mut report = verify_ode_derivatives(problem.ode(), n_samples, seed);
    let dims = problem.ode().dims();
    let nx = dims.nx();
    let (nc, nr) = (problem.n_path(), problem.n_boundary());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    for _ in 0..n_samples {
        let x = random_vec(&mut rng, nx);
        let x0 = random_vec(&mut rng, nx);
        let u = random_vec(&mut rng, dims.nu);
        let p = random_vec(&mut rng, dims.np);

        let mut gx = vec![0.0; nx];
        let mut gu = vec![0.0; dims.nu];
        let mut gp = vec![0.0; dims.np];
        problem.stage_cost_gradient(&x, &u, &p, &mut gx, &mut gu, &mut gp);
        let as_row = |g: &[f64]| DMatrix::from_row_slice(1, g.len(), g);
        compare_block(&mut report, "stage_cost/x", &as_row(&gx), &x, 1, |a, o| o[0] = problem.stage_cost(a, &u, &p));
        compare_block(&mut report, "stage_cost/u", &as_row(&gu), &u, 1, |a, o| o[0] = problem.stage_cost(&x, a, &p));
        compare_block(&mut report, "stage_cost/p", &as_row(&gp), &p, 1, |a, o| o[0] = problem.stage_cost(&x, &u, a));
        if !problem.stage_cost_velocity_dependent() {
            report.record("stage_cost/v (declared zero)", gx[dims.nq..].iter().fold(0.0f64, |m, g| m.max(g.abs())));
        }

        let mut ge = vec![0.0; nx];
        problem.terminal_cost_gradient(&x, &mut ge);
        compare_block(&mut report, "terminal_cost/x", &as_row(&ge), &x, 1, |a, o| o[0] = problem.terminal_cost(a));

        let mut dx = DMatrix::zeros(nc, nx);
        let mut du = DMatrix::zeros(nc, dims.nu);
        let mut dp = DMatrix::zeros(nc, dims.np);
        problem.path_jacobian(&x, &u, &p, &mut dx, &mut du, &mut dp);
        compare_block(&mut report, "path/x", &dx, &x, nc, |a, o| problem.path(a, &u, &p, o));
        compare_block(&mut report, "path/u", &du, &u, nc, |a, o| problem.path(&x, a, &p, o));
        compare_block(&mut report, "path/p", &dp, &p, nc, |a, o| problem.path(&x, &u, a, o));

        let mut d_end = DMatrix::zeros(nr, nx);
        let mut d_start = DMatrix::zeros(nr, nx);
        let mut dpr = DMatrix::zeros(nr, dims.np);
        problem.boundary_jacobian(&x, &x0, &p, &mut d_end, &mut d_start, &mut dpr);
        compare_block(&mut report, "boundary/x_end", &d_end, &x, nr, |a, o| problem.boundary(a, &x0, &p, o));
        compare_block(&mut report, "boundary/x_start", &d_start, &x0, nr, |a, o| problem.boundary(&x, a, &p, o));
        compare_block(&mut report, "boundary/p", &dpr, &p, nr, |a, o| problem.boundary(&x, &x0, a, o));
    }
    report
}
