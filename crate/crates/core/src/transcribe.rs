//! Direct-collocation transcription of an [`OptimalControlProblem`].
//!
//! Decision vector, interleaved per interval:
//!
//! ```text
//! [x_0, z_0, u_0,  x_1, z_1, u_1,  …,  x_{N−1}, z_{N−1}, u_{N−1},  x_N,  p]
//! ```
//!
//! Constraint rows: dynamics (`x_{k+1} − F(x_k, z_k) = 0`), stage systems,
//! boundary conditions `r = 0`, then path constraints `g(x_k, u_k, p) ≥ 0` at
//! `k = 0..N−1`. The objective is `Σ_k h Σ_i b_i L(ξ_{k,i}, u_k, p) + E(x_N)`
//! with `ξ_{k,i}` the method's state at the collocation point.
//!
//! Jacobian entries are declared from the generic dense structure of the
//! model blocks: every model derivative is assumed structurally nonzero,
//! and velocity couplings are dropped when the model does not read `v`.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::basis::{quadrature_weights, CollocationScheme, LagrangeBasis, PointFamily, SemiHermiteBasis};
use crate::error::{Error, Result};
use crate::integrator::{Method, PcTables, Trajectory};
use crate::model::{AccelJacobian, OptimalControlProblem};
use crate::nlpsolve::{HessianElement, KktNode, Nlp};

/// Offsets of every block in the decision vector and in the constraint list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Layout {
    pub nq: usize,
    pub nu: usize,
    pub np: usize,
    pub nc: usize,
    pub nr: usize,
    pub d: usize,
    /// Values stored per collocation point: `2nq` for SC, `nq` for PC.
    pub width: usize,
    pub intervals: usize,
}

impl Layout {
    pub fn nx(&self) -> usize {
        2 * self.nq
    }

    /// Stage internals per interval.
    pub fn n_int(&self) -> usize {
        self.d * self.width
    }

    fn block(&self) -> usize {
        self.nx() + self.n_int() + self.nu
    }

    /// Offset of `x_k`, `k = 0..=N`.
    pub fn x(&self, k: usize) -> usize {
        k * self.block()
    }

    pub fn z(&self, k: usize) -> usize {
        self.x(k) + self.nx()
    }

    /// Offset of `z_{k,i}` (0-based `i`).
    pub fn z_at(&self, k: usize, i: usize) -> usize {
        self.z(k) + i * self.width
    }

    pub fn u(&self, k: usize) -> usize {
        self.z(k) + self.n_int()
    }

    pub fn p(&self) -> usize {
        self.x(self.intervals) + self.nx()
    }

    pub fn n_var(&self) -> usize {
        self.p() + self.np
    }

    pub fn dynamics_row(&self, k: usize) -> usize {
        k * self.nx()
    }

    pub fn stage_row(&self, k: usize) -> usize {
        self.intervals * self.nx() + k * self.n_int()
    }

    pub fn boundary_row(&self) -> usize {
        self.intervals * (self.nx() + self.n_int())
    }

    pub fn path_row(&self, k: usize) -> usize {
        self.boundary_row() + self.nr + k * self.nc
    }

    pub fn n_eq(&self) -> usize {
        self.boundary_row() + self.nr
    }

    pub fn n_ineq(&self) -> usize {
        self.intervals * self.nc
    }

    pub fn n_constraints(&self) -> usize {
        self.n_eq() + self.n_ineq()
    }
}

#[derive(Debug, Clone)]
enum Tables {
    /// `dp[i][j] = ṗ_j(τ_i)`, `end[j] = p_j(1)`.
    Standard { dp: Vec<Vec<f64>>, end: Vec<f64> },
    Position(PcTables),
}

/// The NLP produced by [`transcribe`].
pub struct TranscribedNlp<'a> {
    ocp: &'a dyn OptimalControlProblem,
    method: Method,
    scheme: CollocationScheme,
    layout: Layout,
    h: f64,
    weights: Vec<f64>,
    tables: Tables,
    accel_reads_v: bool,
    cost_reads_v: bool,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    elements: Vec<HessianElement>,
}

/// Builds the collocation NLP for `ocp` with the given method and scheme.
pub fn transcribe<'a>(
    ocp: &'a dyn OptimalControlProblem,
    method: Method,
    scheme: &CollocationScheme,
) -> Result<TranscribedNlp<'a>> {
    let dims = ocp.ode().dims();
    let intervals = ocp.intervals();
    if intervals == 0 {
        return Err(Error::InvalidProblem("number of intervals must be at least 1".into()));
    }
    if !(ocp.horizon() > 0.0) || !ocp.horizon().is_finite() {
        return Err(Error::InvalidProblem(format!("horizon must be positive, got {}", ocp.horizon())));
    }
    if dims.nq == 0 {
        return Err(Error::InvalidProblem("position dimension must be positive".into()));
    }
    let d = scheme.order();
    let layout = Layout {
        nq: dims.nq,
        nu: dims.nu,
        np: dims.np,
        nc: ocp.n_path(),
        nr: ocp.n_boundary(),
        d,
        width: method.internals_per_interval(1, dims.nq),
        intervals,
    };
    let tables = match method {
        Method::Standard => {
            let basis = LagrangeBasis::new(scheme);
            let tau = basis.points();
            Tables::Standard {
                dp: tau.iter().map(|&t| (0..=d).map(|j| basis.poly(j).deriv(t)).collect()).collect(),
                end: (0..=d).map(|j| basis.poly(j).eval(1.0)).collect(),
            }
        }
        Method::PositionBased => Tables::Position(PcTables::new(&SemiHermiteBasis::new(scheme)?)),
    };
    let mut nlp = TranscribedNlp {
        ocp,
        method,
        scheme: scheme.clone(),
        layout,
        h: ocp.horizon() / intervals as f64,
        weights: quadrature_weights(scheme),
        tables,
        accel_reads_v: ocp.ode().velocity_dependent(),
        cost_reads_v: ocp.stage_cost_velocity_dependent(),
        row_ptr: Vec::new(),
        cols: Vec::new(),
        elements: Vec::new(),
    };
    nlp.build_pattern();
    nlp.elements = nlp.build_elements();
    Ok(nlp)
}

/// Per-block structural counts of a transcribed NLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BlockCounts {
    pub rows: usize,
    pub nnz: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Blocks {
    pub dynamics: BlockCounts,
    pub stage: BlockCounts,
    pub boundary: BlockCounts,
    pub path: BlockCounts,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct StructureCounts {
    pub n_var: usize,
    pub n_constraints: usize,
    pub jac_nnz: usize,
    pub blocks: Blocks,
    /// The model reads velocities in `f` or `L`, outside the closed forms' assumption.
    pub assumption_violated: bool,
}

/// Closed-form complexity counts for velocity-independent models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ClosedFormCounts {
    pub c1: usize,
    pub c2: usize,
    pub c3: usize,
    pub n_var: usize,
    pub n_constraints: usize,
    pub jac_nnz: usize,
}

/// Dimensions entering the closed-form counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CountDims {
    pub nq: usize,
    pub nu: usize,
    pub np: usize,
    pub nc: usize,
    pub nr: usize,
    pub intervals: usize,
    pub d: usize,
}

/// The published complexity formulas, evaluated verbatim.
pub fn closed_form_counts(method: Method, dims: CountDims) -> ClosedFormCounts {
    let CountDims {
        nq,
        nu,
        np,
        nc,
        nr,
        intervals: n,
        d,
    } = dims;
    let c1 = n * (2 * nq + nu) + np + 2 * nq;
    let c2 = 2 * nq + nr + n * nc + 2 * n * nq;
    let c3 = n * nq * d * (nq + nu + np) + n * nc * (nu + 2 * nq) + 2 * nq * (2 * nq + nr);
    let (extra, nnz) = match method {
        Method::Standard => (2 * n * nq * d, n * nq * (2 * d * d + 5 * d + 4)),
        Method::PositionBased => (n * nq * d, n * nq * (d * d + 3 * d + 6)),
    };
    ClosedFormCounts {
        c1,
        c2,
        c3,
        n_var: c1 + extra,
        n_constraints: c2 + extra,
        jac_nnz: c3 + nnz,
    }
}

/// All first-order quantities at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct FullEvaluation {
    pub objective: f64,
    pub gradient: Vec<f64>,
    pub constraints: Vec<f64>,
    /// Aligned with [`TranscribedNlp::pattern`].
    pub jacobian: Vec<f64>,
}

fn check_finite(values: &[f64], block: &'static str, interval: Option<usize>) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { block, interval })
    }
}

impl<'a> TranscribedNlp<'a> {
    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn scheme(&self) -> &CollocationScheme {
        &self.scheme
    }

    pub fn family(&self) -> PointFamily {
        self.scheme.family()
    }

    pub fn step_size(&self) -> f64 {
        self.h
    }

    pub fn ocp(&self) -> &'a dyn OptimalControlProblem {
        self.ocp
    }

    /// Jacobian coordinates, sorted by row then column.
    pub fn pattern(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.cols.len());
        for r in 0..self.layout.n_constraints() {
            for &c in &self.cols[self.row_ptr[r]..self.row_ptr[r + 1]] {
                out.push((r, c));
            }
        }
        out
    }

    pub fn jac_nnz(&self) -> usize {
        self.cols.len()
    }

    fn rows_nnz(&self, rows: std::ops::Range<usize>) -> BlockCounts {
        BlockCounts {
            rows: rows.len(),
            nnz: self.row_ptr[rows.end] - self.row_ptr[rows.start],
        }
    }

    pub fn structure_counts(&self) -> StructureCounts {
        let l = &self.layout;
        let n = l.intervals;
        StructureCounts {
            n_var: l.n_var(),
            n_constraints: l.n_constraints(),
            jac_nnz: self.jac_nnz(),
            blocks: Blocks {
                dynamics: self.rows_nnz(0..l.stage_row(0)),
                stage: self.rows_nnz(l.stage_row(0)..l.boundary_row()),
                boundary: self.rows_nnz(l.boundary_row()..l.path_row(0)),
                path: self.rows_nnz(l.path_row(0)..l.path_row(n)),
            },
            assumption_violated: self.accel_reads_v || self.cost_reads_v,
        }
    }

    pub fn closed_form(&self) -> ClosedFormCounts {
        let l = &self.layout;
        closed_form_counts(
            self.method,
            CountDims {
                nq: l.nq,
                nu: l.nu,
                np: l.np,
                nc: l.nc,
                nr: l.nr,
                intervals: l.intervals,
                d: l.d,
            },
        )
    }

    fn time(&self, k: usize, i: usize) -> f64 {
        self.h * (k as f64 + self.scheme.points()[i])
    }

    fn velocity_couples(&self) -> bool {
        self.method == Method::PositionBased && (self.accel_reads_v || self.cost_reads_v)
    }

    /// Visits every Jacobian entry `(row, col, value)`; entries may repeat
    /// and are summed. The set of coordinates never depends on `w`.
    fn walk_jacobian(&self, w: &[f64], sink: &mut dyn FnMut(usize, usize, f64)) -> Result<()> {
        let l = self.layout;
        let (nq, nu, np, nx, d, h) = (l.nq, l.nu, l.np, l.nx(), l.d, self.h);
        let ode = self.ocp.ode();
        let mut jf = AccelJacobian::zeros(ode.dims());
        let p = &w[l.p()..l.p() + np];
        let mut vel = vec![0.0; nq];
        for k in 0..l.intervals {
            let xk = &w[l.x(k)..l.x(k) + nx];
            let z = &w[l.z(k)..l.z(k) + l.n_int()];
            let u = &w[l.u(k)..l.u(k) + nu];
            match &self.tables {
                Tables::Standard { dp, end } => {
                    for c in 0..nx {
                        let row = l.dynamics_row(k) + c;
                        sink(row, l.x(k + 1) + c, 1.0);
                        sink(row, l.x(k) + c, -end[0]);
                        for j in 0..d {
                            sink(row, l.z_at(k, j) + c, -end[j + 1]);
                        }
                    }
                    for i in 0..d {
                        let zi = &z[i * nx..(i + 1) * nx];
                        jf.fill_zero();
                        ode.accel_jacobian(self.time(k, i), &zi[..nq], &zi[nq..], u, p, &mut jf);
                        for c in 0..nx {
                            let row = l.stage_row(k) + i * nx + c;
                            sink(row, l.x(k) + c, dp[i][0]);
                            for j in 0..d {
                                sink(row, l.z_at(k, j) + c, dp[i][j + 1]);
                            }
                            if c < nq {
                                sink(row, l.z_at(k, i) + nq + c, -h);
                                continue;
                            }
                            let r = c - nq;
                            for a in 0..nq {
                                sink(row, l.z_at(k, i) + a, -h * jf.dq[(r, a)]);
                                if self.accel_reads_v {
                                    sink(row, l.z_at(k, i) + nq + a, -h * jf.dv[(r, a)]);
                                }
                            }
                            for a in 0..nu {
                                sink(row, l.u(k) + a, -h * jf.du[(r, a)]);
                            }
                            for a in 0..np {
                                sink(row, l.p() + a, -h * jf.dp[(r, a)]);
                            }
                        }
                    }
                }
                Tables::Position(t) => {
                    for c in 0..nq {
                        let row = l.dynamics_row(k) + c;
                        sink(row, l.x(k + 1) + c, 1.0);
                        sink(row, l.x(k) + c, -t.end_val[0]);
                        sink(row, l.x(k) + nq + c, -h * t.end_val[d + 1]);
                        for j in 0..d {
                            sink(row, l.z_at(k, j) + c, -t.end_val[j + 1]);
                        }
                        let row = row + nq;
                        sink(row, l.x(k + 1) + nq + c, 1.0);
                        sink(row, l.x(k) + c, -t.end_der[0] / h);
                        sink(row, l.x(k) + nq + c, -t.end_der[d + 1]);
                        for j in 0..d {
                            sink(row, l.z_at(k, j) + c, -t.end_der[j + 1] / h);
                        }
                    }
                    let h2 = h * h;
                    for i in 0..d {
                        let zi = &z[i * nq..(i + 1) * nq];
                        t.velocity_at(i, &xk[..nq], &xk[nq..], z, h, &mut vel);
                        jf.fill_zero();
                        ode.accel_jacobian(self.time(k, i), zi, &vel, u, p, &mut jf);
                        for c in 0..nq {
                            let row = l.stage_row(k) + i * nq + c;
                            sink(row, l.x(k) + c, t.dd[i][0]);
                            sink(row, l.x(k) + nq + c, h * t.dd[i][d + 1]);
                            for j in 0..d {
                                sink(row, l.z_at(k, j) + c, t.dd[i][j + 1]);
                            }
                            for a in 0..nq {
                                sink(row, l.z_at(k, i) + a, -h2 * jf.dq[(c, a)]);
                            }
                            if self.accel_reads_v {
                                for a in 0..nq {
                                    let coef = -h2 * jf.dv[(c, a)];
                                    sink(row, l.x(k) + a, coef * t.dv[i][0] / h);
                                    sink(row, l.x(k) + nq + a, coef * t.dv[i][d + 1]);
                                    for j in 0..d {
                                        sink(row, l.z_at(k, j) + a, coef * t.dv[i][j + 1] / h);
                                    }
                                }
                            }
                            for a in 0..nu {
                                sink(row, l.u(k) + a, -h2 * jf.du[(c, a)]);
                            }
                            for a in 0..np {
                                sink(row, l.p() + a, -h2 * jf.dp[(c, a)]);
                            }
                        }
                    }
                }
            }
        }

        let (nr, nc) = (l.nr, l.nc);
        let mut d_end = DMatrix::zeros(nr, nx);
        let mut d_start = DMatrix::zeros(nr, nx);
        let mut d_p = DMatrix::zeros(nr, np);
        let x0 = &w[l.x(0)..l.x(0) + nx];
        let xn = &w[l.x(l.intervals)..l.x(l.intervals) + nx];
        self.ocp.boundary_jacobian(xn, x0, p, &mut d_end, &mut d_start, &mut d_p);
        for r in 0..nr {
            let row = l.boundary_row() + r;
            for a in 0..nx {
                sink(row, l.x(l.intervals) + a, d_end[(r, a)]);
                sink(row, l.x(0) + a, d_start[(r, a)]);
            }
            for a in 0..np {
                sink(row, l.p() + a, d_p[(r, a)]);
            }
        }

        let mut gx = DMatrix::zeros(nc, nx);
        let mut gu = DMatrix::zeros(nc, nu);
        let mut gp = DMatrix::zeros(nc, np);
        for k in 0..l.intervals {
            let xk = &w[l.x(k)..l.x(k) + nx];
            let u = &w[l.u(k)..l.u(k) + nu];
            self.ocp.path_jacobian(xk, u, p, &mut gx, &mut gu, &mut gp);
            for r in 0..nc {
                let row = l.path_row(k) + r;
                for a in 0..nx {
                    sink(row, l.x(k) + a, gx[(r, a)]);
                }
                for a in 0..nu {
                    sink(row, l.u(k) + a, gu[(r, a)]);
                }
                for a in 0..np {
                    sink(row, l.p() + a, gp[(r, a)]);
                }
            }
        }
        Ok(())
    }

    fn build_pattern(&mut self) {
        let l = self.layout;
        let mut rows: Vec<Vec<usize>> = vec![Vec::new(); l.n_constraints()];
        let mut probe = vec![0.0; l.n_var()];
        let nominal = self.ocp.nominal_parameters();
        probe[l.p()..l.p() + l.np].copy_from_slice(&nominal[..l.np]);
        // The walk only records coordinates here; model values are irrelevant.
        let _ = self.walk_jacobian(&probe, &mut |r, c, _| rows[r].push(c));
        self.row_ptr = Vec::with_capacity(rows.len() + 1);
        self.row_ptr.push(0);
        for mut r in rows {
            r.sort_unstable();
            r.dedup();
            self.cols.extend_from_slice(&r);
            self.row_ptr.push(self.cols.len());
        }
    }

    /// Block name and interval of a constraint row.
    pub fn row_block(&self, row: usize) -> (&'static str, Option<usize>) {
        let l = &self.layout;
        if row < l.stage_row(0) {
            ("dynamics", Some(row / l.nx()))
        } else if row < l.boundary_row() {
            ("stage", Some((row - l.stage_row(0)) / l.n_int()))
        } else if row < l.path_row(0) {
            ("boundary", None)
        } else {
            ("path", Some((row - l.path_row(0)) / l.nc.max(1)))
        }
    }

    fn slot(&self, row: usize, col: usize) -> usize {
        let start = self.row_ptr[row];
        let seg = &self.cols[start..self.row_ptr[row + 1]];
        start + seg.binary_search(&col).expect("entry declared in the Jacobian pattern")
    }

    /// Objective value; when `sink` is given, also every gradient term
    /// `(element, column, value)`.
    fn walk_objective(&self, w: &[f64], mut sink: Option<&mut dyn FnMut(usize, usize, f64)>) -> Result<f64> {
        let l = self.layout;
        let (nq, nu, np, nx, d, h) = (l.nq, l.nu, l.np, l.nx(), l.d, self.h);
        let p = &w[l.p()..l.p() + np];
        let mut xi = vec![0.0; nx];
        let mut gx = vec![0.0; nx];
        let mut gu = vec![0.0; nu];
        let mut gp = vec![0.0; np];
        let mut total = 0.0;
        for k in 0..l.intervals {
            let xk = &w[l.x(k)..l.x(k) + nx];
            let z = &w[l.z(k)..l.z(k) + l.n_int()];
            let u = &w[l.u(k)..l.u(k) + nu];
            for i in 0..d {
                match &self.tables {
                    Tables::Standard { .. } => xi.copy_from_slice(&z[i * nx..(i + 1) * nx]),
                    Tables::Position(t) => {
                        xi[..nq].copy_from_slice(&z[i * nq..(i + 1) * nq]);
                        t.velocity_at(i, &xk[..nq], &xk[nq..], z, h, &mut xi[nq..]);
                    }
                }
                let wgt = h * self.weights[i];
                let val = self.ocp.stage_cost(&xi, u, p);
                if !val.is_finite() {
                    return Err(Error::NonFinite {
                        block: "stage cost",
                        interval: Some(k),
                    });
                }
                total += wgt * val;
                let Some(sink) = sink.as_deref_mut() else { continue };
                let e = k * d + i;
                gx.fill(0.0);
                gu.fill(0.0);
                gp.fill(0.0);
                self.ocp.stage_cost_gradient(&xi, u, p, &mut gx, &mut gu, &mut gp);
                check_finite(&gx, "stage cost", Some(k))?;
                match &self.tables {
                    Tables::Standard { .. } => {
                        for a in 0..nx {
                            sink(e, l.z_at(k, i) + a, wgt * gx[a]);
                        }
                    }
                    Tables::Position(t) => {
                        for a in 0..nq {
                            sink(e, l.z_at(k, i) + a, wgt * gx[a]);
                        }
                        if self.cost_reads_v {
                            for a in 0..nq {
                                let g = wgt * gx[nq + a];
                                sink(e, l.x(k) + a, g * t.dv[i][0] / h);
                                sink(e, l.x(k) + nq + a, g * t.dv[i][d + 1]);
                                for j in 0..d {
                                    sink(e, l.z_at(k, j) + a, g * t.dv[i][j + 1] / h);
                                }
                            }
                        }
                    }
                }
                for a in 0..nu {
                    sink(e, l.u(k) + a, wgt * gu[a]);
                }
                for a in 0..np {
                    sink(e, l.p() + a, wgt * gp[a]);
                }
            }
        }
        let xn = &w[l.x(l.intervals)..l.x(l.intervals) + nx];
        let term = self.ocp.terminal_cost(xn);
        if !term.is_finite() {
            return Err(Error::NonFinite {
                block: "terminal cost",
                interval: None,
            });
        }
        total += term;
        if let Some(sink) = sink {
            let mut g = vec![0.0; nx];
            self.ocp.terminal_cost_gradient(xn, &mut g);
            check_finite(&g, "terminal cost", None)?;
            let e = self.boundary_element();
            for a in 0..nx {
                sink(e, l.x(l.intervals) + a, g[a]);
            }
        }
        Ok(total)
    }

    fn boundary_element(&self) -> usize {
        self.elements.len() - 1
    }

    fn build_elements(&self) -> Vec<HessianElement> {
        let l = self.layout;
        let (nq, nu, np, nx, d) = (l.nq, l.nu, l.np, l.nx(), l.d);
        let range = |start: usize, len: usize| start..start + len;
        let mut out = Vec::new();
        for k in 0..l.intervals {
            for i in 0..d {
                let mut cols: Vec<usize> = Vec::new();
                let rows: Vec<usize> = range(l.stage_row(k) + i * l.width, l.width).collect();
                match self.method {
                    Method::Standard => cols.extend(range(l.z_at(k, i), nx)),
                    Method::PositionBased => {
                        cols.extend(range(l.z_at(k, i), nq));
                        if self.velocity_couples() {
                            cols.extend(range(l.x(k), nx));
                            cols.extend(range(l.z(k), l.n_int()));
                        }
                    }
                }
                cols.extend(range(l.u(k), nu));
                cols.extend(range(l.p(), np));
                cols.sort_unstable();
                cols.dedup();
                out.push(HessianElement { cols, rows });
            }
        }
        for k in 0..l.intervals {
            let mut cols: Vec<usize> = range(l.x(k), nx).collect();
            cols.extend(range(l.u(k), nu));
            cols.extend(range(l.p(), np));
            out.push(HessianElement {
                cols,
                rows: range(l.path_row(k), l.nc).collect(),
            });
        }
        let mut cols: Vec<usize> = range(l.x(0), nx).collect();
        cols.extend(range(l.x(l.intervals), nx));
        cols.extend(range(l.p(), np));
        out.push(HessianElement {
            cols,
            rows: range(l.boundary_row(), l.nr).collect(),
        });
        out
    }

    /// Initial guess: linear position homotopy between pinned endpoints,
    /// matching velocities, stage internals on that interpolant, zero
    /// controls, nominal parameters.
    pub fn initial_guess(&self) -> Vec<f64> {
        let l = self.layout;
        let (nq, nx) = (l.nq, l.nx());
        let horizon = self.ocp.horizon();
        let state_at: Box<dyn Fn(f64) -> Vec<f64>> = match self.ocp.fixed_endpoints() {
            (Some(start), Some(end)) => Box::new(move |t: f64| {
                let s = t / horizon;
                let mut x = vec![0.0; nx];
                for c in 0..nq {
                    x[c] = start[c] + s * (end[c] - start[c]);
                    x[nq + c] = (end[c] - start[c]) / horizon;
                }
                x
            }),
            (Some(start), None) => Box::new(move |_| start.clone()),
            _ => Box::new(move |_| vec![0.0; nx]),
        };
        let mut w = vec![0.0; l.n_var()];
        for k in 0..=l.intervals {
            let x = state_at(k as f64 * self.h);
            w[l.x(k)..l.x(k) + nx].copy_from_slice(&x);
            if k == l.intervals {
                break;
            }
            for i in 0..l.d {
                let xi = state_at(self.time(k, i));
                w[l.z_at(k, i)..l.z_at(k, i) + l.width].copy_from_slice(&xi[..l.width]);
            }
        }
        let p0 = self.ocp.nominal_parameters();
        w[l.p()..l.p() + l.np].copy_from_slice(&p0[..l.np]);
        w
    }

    /// Decision vector holding a simulated trajectory, its controls and `p`.
    pub fn embed(&self, traj: &Trajectory, controls: &[Vec<f64>], p: &[f64]) -> Result<Vec<f64>> {
        let l = self.layout;
        if traj.method != self.method || traj.intervals() != l.intervals || traj.nq != l.nq {
            return Err(Error::InvalidProblem("trajectory does not match the transcription".into()));
        }
        crate::model::check_len("controls", l.intervals, controls.len())?;
        crate::model::check_len("parameters", l.np, p.len())?;
        let mut w = vec![0.0; l.n_var()];
        for (k, x) in traj.states.iter().enumerate() {
            w[l.x(k)..l.x(k) + l.nx()].copy_from_slice(x);
        }
        for k in 0..l.intervals {
            crate::model::check_len("control", l.nu, controls[k].len())?;
            w[l.z(k)..l.z(k) + l.n_int()].copy_from_slice(&traj.internals[k].values);
            w[l.u(k)..l.u(k) + l.nu].copy_from_slice(&controls[k]);
        }
        w[l.p()..].copy_from_slice(p);
        Ok(w)
    }

    /// Controls `u_0..u_{N−1}` stored in `w`.
    pub fn controls(&self, w: &[f64]) -> Vec<Vec<f64>> {
        let l = self.layout;
        (0..l.intervals).map(|k| w[l.u(k)..l.u(k) + l.nu].to_vec()).collect()
    }

    /// Grid states `x_0..x_N` stored in `w`.
    pub fn states(&self, w: &[f64]) -> Vec<Vec<f64>> {
        let l = self.layout;
        (0..=l.intervals).map(|k| w[l.x(k)..l.x(k) + l.nx()].to_vec()).collect()
    }

    fn check_w(&self, w: &[f64]) -> Result<()> {
        crate::model::check_len("decision vector", self.layout.n_var(), w.len())
    }

    pub fn eval_full(&self, w: &[f64]) -> Result<FullEvaluation> {
        self.check_w(w)?;
        let mut gradient = vec![0.0; self.layout.n_var()];
        let objective = self.walk_objective(w, Some(&mut |_, c, v| gradient[c] += v))?;
        let mut constraints = vec![0.0; self.layout.n_constraints()];
        self.constraints(w, &mut constraints)?;
        let mut jacobian = vec![0.0; self.jac_nnz()];
        self.jacobian_values(w, &mut jacobian)?;
        Ok(FullEvaluation {
            objective,
            gradient,
            constraints,
            jacobian,
        })
    }
}

impl Nlp for TranscribedNlp<'_> {
    fn n_var(&self) -> usize {
        self.layout.n_var()
    }

    fn n_eq(&self) -> usize {
        self.layout.n_eq()
    }

    fn n_ineq(&self) -> usize {
        self.layout.n_ineq()
    }

    fn objective(&self, w: &[f64]) -> Result<f64> {
        self.check_w(w)?;
        self.walk_objective(w, None)
    }

    fn gradient(&self, w: &[f64], grad: &mut [f64]) -> Result<()> {
        self.check_w(w)?;
        grad.fill(0.0);
        self.walk_objective(w, Some(&mut |_, c, v| grad[c] += v))?;
        Ok(())
    }

    fn constraints(&self, w: &[f64], out: &mut [f64]) -> Result<()> {
        self.check_w(w)?;
        let l = self.layout;
        let (nq, nu, np, nx, d, h) = (l.nq, l.nu, l.np, l.nx(), l.d, self.h);
        let ode = self.ocp.ode();
        let p = &w[l.p()..l.p() + np];
        let mut acc = vec![0.0; nq];
        let mut vel = vec![0.0; nq];
        for k in 0..l.intervals {
            let xk = &w[l.x(k)..l.x(k) + nx];
            let xk1 = &w[l.x(k + 1)..l.x(k + 1) + nx];
            let z = &w[l.z(k)..l.z(k) + l.n_int()];
            let u = &w[l.u(k)..l.u(k) + nu];
            let dyn_out = &mut out[l.dynamics_row(k)..l.dynamics_row(k) + nx];
            match &self.tables {
                Tables::Standard { end, .. } => {
                    for c in 0..nx {
                        let mut next = xk[c] * end[0];
                        for j in 0..d {
                            next += z[j * nx + c] * end[j + 1];
                        }
                        dyn_out[c] = xk1[c] - next;
                    }
                }
                Tables::Position(t) => {
                    let next = t.end_state(&xk[..nq], &xk[nq..], z, h);
                    for c in 0..nx {
                        dyn_out[c] = xk1[c] - next[c];
                    }
                }
            }
            let stage = &mut out[l.stage_row(k)..l.stage_row(k) + l.n_int()];
            match &self.tables {
                Tables::Standard { dp, .. } => {
                    for i in 0..d {
                        let zi = &z[i * nx..(i + 1) * nx];
                        ode.accel(self.time(k, i), &zi[..nq], &zi[nq..], u, p, &mut acc);
                        for c in 0..nx {
                            let mut r = xk[c] * dp[i][0];
                            for j in 0..d {
                                r += z[j * nx + c] * dp[i][j + 1];
                            }
                            let rhs = if c < nq { zi[nq + c] } else { acc[c - nq] };
                            stage[i * nx + c] = r - h * rhs;
                        }
                    }
                }
                Tables::Position(t) => {
                    let h2 = h * h;
                    for i in 0..d {
                        let zi = &z[i * nq..(i + 1) * nq];
                        t.velocity_at(i, &xk[..nq], &xk[nq..], z, h, &mut vel);
                        ode.accel(self.time(k, i), zi, &vel, u, p, &mut acc);
                        for c in 0..nq {
                            let mut r = xk[c] * t.dd[i][0] + h * xk[nq + c] * t.dd[i][d + 1];
                            for j in 0..d {
                                r += z[j * nq + c] * t.dd[i][j + 1];
                            }
                            stage[i * nq + c] = r - h2 * acc[c];
                        }
                    }
                }
            }
            check_finite(stage, "stage", Some(k))?;
        }
        let x0 = &w[l.x(0)..l.x(0) + nx];
        let xn = &w[l.x(l.intervals)..l.x(l.intervals) + nx];
        let bnd = &mut out[l.boundary_row()..l.boundary_row() + l.nr];
        self.ocp.boundary(xn, x0, p, bnd);
        check_finite(bnd, "boundary", None)?;
        for k in 0..l.intervals {
            let xk = &w[l.x(k)..l.x(k) + nx];
            let u = &w[l.u(k)..l.u(k) + nu];
            let g = &mut out[l.path_row(k)..l.path_row(k) + l.nc];
            self.ocp.path(xk, u, p, g);
            check_finite(g, "path", Some(k))?;
        }
        Ok(())
    }

    fn jacobian_pattern(&self) -> Vec<(usize, usize)> {
        self.pattern()
    }

    fn jacobian_values(&self, w: &[f64], vals: &mut [f64]) -> Result<()> {
        self.check_w(w)?;
        vals.fill(0.0);
        self.walk_jacobian(w, &mut |r, c, v| vals[self.slot(r, c)] += v)?;
        match vals.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(t) => {
                let row = self.row_ptr.partition_point(|&s| s <= t) - 1;
                let (block, interval) = self.row_block(row);
                Err(Error::NonFinite { block, interval })
            }
        }
    }

    fn hessian_elements(&self) -> Vec<HessianElement> {
        self.elements.clone()
    }

    fn element_objective_gradients(&self, w: &[f64], out: &mut [Vec<f64>]) -> Result<()> {
        for g in out.iter_mut() {
            g.fill(0.0);
        }
        let elements = &self.elements;
        self.walk_objective(
            w,
            Some(&mut |e, c, v| {
                let local = elements[e].cols.binary_search(&c).expect("objective term inside its element");
                out[e][local] += v;
            }),
        )?;
        Ok(())
    }

    fn kkt_order(&self) -> Option<Vec<KktNode>> {
        let l = self.layout;
        let vars = |start: usize, len: usize| (start..start + len).map(KktNode::Var);
        let rows = |start: usize, len: usize| (start..start + len).map(KktNode::Row);
        let mut order = Vec::with_capacity(l.n_var() + l.n_constraints());
        for k in 0..l.intervals {
            order.extend(vars(l.x(k), l.nx()));
            order.extend(vars(l.z(k), l.n_int()));
            order.extend(vars(l.u(k), l.nu));
            order.extend(rows(l.stage_row(k), l.n_int()));
            order.extend(rows(l.path_row(k), l.nc));
            order.extend(rows(l.dynamics_row(k), l.nx()));
        }
        order.extend(vars(l.x(l.intervals), l.nx()));
        order.extend(rows(l.boundary_row(), l.nr));
        order.extend(vars(l.p(), l.np));
        Some(order)
    }
}

#[cfg(test)]
mod tests;
