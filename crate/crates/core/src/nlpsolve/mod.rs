//! Primal-dual interior-point solver for smooth NLPs of the form
//!
//! ```text
//! minimize f(w)  subject to  c(w) = 0,  g(w) ≥ 0
//! ```
//!
//! Inequalities get slacks `g(w) − s = 0, s ≥ 0` under a log barrier. The
//! Lagrangian Hessian is a partitioned damped-BFGS model, so only first
//! derivatives are needed. Each iteration factors the reduced quasi-definite
//! KKT matrix
//!
//! ```text
//! [ B + δ_w I   J_Eᵀ      J_Iᵀ          ]
//! [ J_E        −δ_c I     0             ]
//! [ J_I         0        −(S/Z + δ_c I) ]
//! ```
//!
//! with a sparse LDLᵀ, and globalizes with an ℓ1 merit line search.

mod bfgs;
mod ldl;

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use bfgs::PartitionedBfgs;
use ldl::{upper_csc, SparseLdl};

/// Group of variables and constraint rows whose nonlinear part gets its
/// own quasi-Newton block.
///
/// Constraint rows outside every element are treated as linear. Each
/// element's objective share is reported by
/// [`Nlp::element_objective_gradients`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HessianElement {
    /// Sorted variable indices.
    pub cols: Vec<usize>,
    /// Constraint rows (equalities first, then inequalities).
    pub rows: Vec<usize>,
}

/// Node of the KKT matrix, used to hand the solver an elimination order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KktNode {
    Var(usize),
    Row(usize),
}

/// A smooth NLP with analytic first derivatives.
///
/// Constraint rows are numbered with the `n_eq` equalities first.
/// Evaluators return an error when the model produces non-finite values.
pub trait Nlp: Sync {
    fn n_var(&self) -> usize;
    fn n_eq(&self) -> usize;
    fn n_ineq(&self) -> usize;

    fn objective(&self, w: &[f64]) -> Result<f64>;
    fn gradient(&self, w: &[f64], grad: &mut [f64]) -> Result<()>;
    fn constraints(&self, w: &[f64], out: &mut [f64]) -> Result<()>;

    /// Coordinates `(row, col)` of the constraint Jacobian, without duplicates.
    fn jacobian_pattern(&self) -> Vec<(usize, usize)>;
    /// Values aligned with [`Nlp::jacobian_pattern`].
    fn jacobian_values(&self, w: &[f64], vals: &mut [f64]) -> Result<()>;

    /// Default: a single dense element over everything.
    fn hessian_elements(&self) -> Vec<HessianElement> {
        vec![HessianElement {
            cols: (0..self.n_var()).collect(),
            rows: (0..self.n_eq() + self.n_ineq()).collect(),
        }]
    }

    /// Gradient of each element's objective share, restricted to its columns.
    /// Must be overridden together with [`Nlp::hessian_elements`].
    fn element_objective_gradients(&self, w: &[f64], out: &mut [Vec<f64>]) -> Result<()> {
        self.gradient(w, &mut out[0])
    }

    /// Elimination order for the KKT factorization; `None` keeps variables
    /// first, then rows.
    fn kkt_order(&self) -> Option<Vec<KktNode>> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolveOptions {
    pub kkt_tol: f64,
    pub max_iter: usize,
    pub mu0: f64,
    pub mu_shrink: f64,
    pub fraction_to_boundary: f64,
    pub delta0: f64,
    /// Keep the per-iteration log in the report.
    pub record_log: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            kkt_tol: 1e-8,
            max_iter: 500,
            mu0: 0.1,
            mu_shrink: 0.2,
            fraction_to_boundary: 0.995,
            delta0: 1e-8,
            record_log: false,
        }
    }
}

impl SolveOptions {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.kkt_tol, self.mu0, self.mu_shrink, self.fraction_to_boundary, self.delta0];
        if positive.iter().any(|v| !(*v > 0.0) || !v.is_finite()) || self.max_iter == 0 {
            return Err(Error::Config("solver options must be positive".into()));
        }
        if self.fraction_to_boundary >= 1.0 || self.mu_shrink >= 1.0 {
            return Err(Error::Config("fraction_to_boundary and mu_shrink must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    MaxIter,
    LineSearchFailure,
}

impl SolveStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            SolveStatus::Optimal => "optimal",
            SolveStatus::MaxIter => "max_iter",
            SolveStatus::LineSearchFailure => "line_search_failure",
        }
    }
}

impl std::fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iter: usize,
    pub mu: f64,
    pub merit: f64,
    pub kkt_residual: f64,
    pub step_length: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub status: SolveStatus,
    pub objective: f64,
    pub iterations: usize,
    pub stationarity: f64,
    pub primal_feasibility: f64,
    pub complementarity: f64,
    /// Mean wall time per iteration in milliseconds.
    pub ms_per_iter: f64,
    pub solution: Vec<f64>,
    /// Constraint multipliers in the convention `∇f + Jᵀy = 0`.
    pub multipliers: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub log: Vec<IterationLog>,
}

impl SolveReport {
    pub fn kkt_residual(&self) -> f64 {
        self.stationarity.max(self.primal_feasibility).max(self.complementarity)
    }

    /// Writes the iteration log as CSV (`iter,mu,merit,kkt_residual,step_length`).
    pub fn write_log_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
        wtr.write_record(["iter", "mu", "merit", "kkt_residual", "step_length"])?;
        for row in &self.log {
            wtr.write_record([
                row.iter.to_string(),
                format!("{:e}", row.mu),
                format!("{:e}", row.merit),
                format!("{:e}", row.kkt_residual),
                format!("{:e}", row.step_length),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Signed objective error `v − v_ref`.
pub fn objective_error(v: f64, v_ref: f64) -> f64 {
    v - v_ref
}

const ARMIJO: f64 = 1e-4;
const MIN_STEP: f64 = 1e-12;
const MAX_BACKTRACKS: usize = 60;
const MAX_REGULARIZATIONS: usize = 10;
const Z_SAFEGUARD: f64 = 1e10;
const PENALTY_RHO: f64 = 0.1;

fn inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

fn l1(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

/// Point-dependent quantities.
#[derive(Clone)]
struct Eval {
    f: f64,
    grad: Vec<f64>,
    c: Vec<f64>,
    jac: Vec<f64>,
    elem_grad: Vec<Vec<f64>>,
}

struct Kkt {
    ldl: SparseLdl,
    /// Factored values, including the `δ_c` constraint regularization.
    ax: Vec<f64>,
    /// Same matrix without `δ_c`; refinement targets this one.
    ax_target: Vec<f64>,
    /// Permuted position of each original node (vars then rows).
    pos: Vec<usize>,
    jac_slot: Vec<usize>,
    diag_slot: Vec<usize>,
    /// Per element, slots of the upper triangle in row-major local order.
    hess_slot: Vec<Vec<usize>>,
}

impl Kkt {
    fn new(nlp: &dyn Nlp, pattern: &[(usize, usize)], elements: &[HessianElement]) -> Result<Self> {
        let n = nlp.n_var();
        let m = nlp.n_eq() + nlp.n_ineq();
        let nk = n + m;
        // Coordinates in original node numbering: Jacobian, diagonal, Hessian elements.
        let mut pairs: Vec<(usize, usize)> = pattern.iter().map(|&(r, c)| (n + r, c)).collect();
        let n_jac = pairs.len();
        pairs.extend((0..nk).map(|node| (node, node)));
        let mut hess_ranges = Vec::with_capacity(elements.len());
        for el in elements {
            let start = pairs.len();
            for (a, &ca) in el.cols.iter().enumerate() {
                for &cb in &el.cols[a..] {
                    pairs.push((ca, cb));
                }
            }
            hess_ranges.push(start..pairs.len());
        }

        // Candidates: minimum degree, and the problem's own order if it has one.
        // The one with fewer factorization flops wins.
        let mut candidates = vec![minimum_degree_order(n, nk, &pairs, pattern)];
        if let Some(nodes) = nlp.kkt_order() {
            candidates.push(
                nodes
                    .iter()
                    .map(|node| match *node {
                        KktNode::Var(j) => j,
                        KktNode::Row(r) => n + r,
                    })
                    .collect(),
            );
        }
        let mut best: Option<(f64, Vec<usize>, SparseLdl, Vec<usize>)> = None;
        for order in candidates {
            let pos = inverse_permutation(&order, nk)?;
            let permuted: Vec<(usize, usize)> = pairs.iter().map(|&(a, b)| (pos[a], pos[b])).collect();
            let (ap, ai, slot) = upper_csc(nk, &permuted);
            let ldl = SparseLdl::new(nk, ap, ai);
            let flops = ldl.flops();
            if best.as_ref().is_none_or(|b| flops < b.0) {
                best = Some((flops, pos, ldl, slot));
            }
        }
        let (_, pos, ldl, slot) = best.expect("at least one candidate ordering");
        let ax = vec![0.0; ldl.stored_nnz()];
        Ok(Self {
            ldl,
            ax_target: ax.clone(),
            ax,
            pos,
            jac_slot: slot[..n_jac].to_vec(),
            diag_slot: slot[n_jac..n_jac + nk].to_vec(),
            hess_slot: hess_ranges.into_iter().map(|r| slot[r].to_vec()).collect(),
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(&mut self, n: usize, n_eq: usize, bfgs: &PartitionedBfgs, jac: &[f64], sigma_inv: &[f64], dw: f64, dc: f64) {
        self.ax.iter_mut().for_each(|v| *v = 0.0);
        for (blk, slots) in bfgs.blocks.iter().zip(&self.hess_slot) {
            let ne = blk.cols.len();
            let mut t = 0;
            for a in 0..ne {
                for b in a..ne {
                    self.ax[slots[t]] += blk.b[(a, b)];
                    t += 1;
                }
            }
        }
        for (v, &s) in jac.iter().zip(&self.jac_slot) {
            self.ax[s] += v;
        }
        for j in 0..n {
            self.ax[self.diag_slot[j]] += dw;
        }
        let m = self.diag_slot.len() - n;
        for r in 0..m {
            let extra = if r < n_eq { 0.0 } else { sigma_inv[r - n_eq] };
            self.ax[self.diag_slot[n + r]] -= extra;
        }
        self.ax_target.copy_from_slice(&self.ax);
        for r in 0..m {
            self.ax[self.diag_slot[n + r]] -= dc;
        }
    }

    fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let nk = rhs.len();
        let mut prhs = vec![0.0; nk];
        for i in 0..nk {
            prhs[self.pos[i]] = rhs[i];
        }
        let mut px = vec![0.0; nk];
        self.ldl.solve_refined(&self.ax_target, &prhs, &mut px, 10);
        (0..nk).map(|i| px[self.pos[i]]).collect()
    }
}

fn inverse_permutation(order: &[usize], nk: usize) -> Result<Vec<usize>> {
    let mut pos = vec![usize::MAX; nk];
    if order.len() != nk {
        return Err(Error::InvalidProblem("KKT order is not a permutation".into()));
    }
    for (new, &old) in order.iter().enumerate() {
        if old >= nk || pos[old] != usize::MAX {
            return Err(Error::InvalidProblem("KKT order is not a permutation".into()));
        }
        pos[old] = new;
    }
    Ok(pos)
}

/// Approximate minimum degree ordering of the symmetric pattern spanned by
/// `pairs`, adjusted so each constraint row (node `≥ n`) follows every
/// variable in its Jacobian row. A row pivoted early would sit on a diagonal
/// of only `−δ_c`, which the unpivoted factorization cannot absorb.
fn minimum_degree_order(n: usize, nk: usize, pairs: &[(usize, usize)], jac: &[(usize, usize)]) -> Vec<usize> {
    let mut cols: Vec<Vec<usize>> = vec![Vec::new(); nk];
    for &(a, b) in pairs {
        cols[a].push(b);
        cols[b].push(a);
    }
    let mut ap = Vec::with_capacity(nk + 1);
    let mut ai = Vec::new();
    ap.push(0);
    for c in &mut cols {
        c.sort_unstable();
        c.dedup();
        ai.extend_from_slice(c);
        ap.push(ai.len());
    }
    let Ok((amd_order, _, _)) = amd::order(nk, &ap, &ai, &amd::Control::default()) else {
        return (0..nk).collect();
    };

    let mut rows_of_var: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut remaining = vec![0usize; nk - n];
    for &(r, c) in jac {
        rows_of_var[c].push(r);
        remaining[r] += 1;
    }
    let mut deferred = vec![false; nk - n];
    let mut order = Vec::with_capacity(nk);
    for node in amd_order {
        if node < n {
            order.push(node);
            for &r in &rows_of_var[node] {
                remaining[r] -= 1;
                if remaining[r] == 0 && deferred[r] {
                    order.push(n + r);
                }
            }
        } else if remaining[node - n] == 0 {
            order.push(node);
        } else {
            deferred[node - n] = true;
        }
    }
    order
}

struct Problem<'a> {
    nlp: &'a dyn Nlp,
    n: usize,
    n_eq: usize,
    n_ineq: usize,
    pattern: Vec<(usize, usize)>,
    elements: Vec<HessianElement>,
    /// Per element: (jacobian entry, local column, row).
    elem_jac: Vec<Vec<(usize, usize, usize)>>,
}

impl<'a> Problem<'a> {
    fn new(nlp: &'a dyn Nlp) -> Result<Self> {
        let n = nlp.n_var();
        let n_eq = nlp.n_eq();
        let n_ineq = nlp.n_ineq();
        let m = n_eq + n_ineq;
        let pattern = nlp.jacobian_pattern();
        if let Some(&(r, c)) = pattern.iter().find(|&&(r, c)| r >= m || c >= n) {
            return Err(Error::InvalidProblem(format!("Jacobian entry ({r}, {c}) out of range")));
        }
        let mut by_row: Vec<Vec<usize>> = vec![Vec::new(); m];
        for (t, &(r, _)) in pattern.iter().enumerate() {
            by_row[r].push(t);
        }
        let elements = nlp.hessian_elements();
        let mut elem_jac = Vec::with_capacity(elements.len());
        for el in &elements {
            if el.cols.windows(2).any(|w| w[0] >= w[1]) || el.cols.iter().any(|&c| c >= n) {
                return Err(Error::InvalidProblem("element columns must be sorted, unique and in range".into()));
            }
            let mut list = Vec::new();
            for &r in &el.rows {
                for &t in &by_row[r] {
                    if let Ok(local) = el.cols.binary_search(&pattern[t].1) {
                        list.push((t, local, r));
                    }
                }
            }
            elem_jac.push(list);
        }
        Ok(Self {
            nlp,
            n,
            n_eq,
            n_ineq,
            pattern,
            elements,
            elem_jac,
        })
    }

    fn m(&self) -> usize {
        self.n_eq + self.n_ineq
    }

    fn values(&self, w: &[f64]) -> Result<(f64, Vec<f64>)> {
        let f = self.nlp.objective(w)?;
        let mut c = vec![0.0; self.m()];
        self.nlp.constraints(w, &mut c)?;
        if !f.is_finite() || c.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                block: "nlp",
                interval: None,
            });
        }
        Ok((f, c))
    }

    fn derivatives(&self, w: &[f64], f: f64, c: Vec<f64>) -> Result<Eval> {
        let mut grad = vec![0.0; self.n];
        self.nlp.gradient(w, &mut grad)?;
        let mut jac = vec![0.0; self.pattern.len()];
        self.nlp.jacobian_values(w, &mut jac)?;
        let mut elem_grad: Vec<Vec<f64>> = self.elements.iter().map(|e| vec![0.0; e.cols.len()]).collect();
        self.nlp.element_objective_gradients(w, &mut elem_grad)?;
        if grad.iter().chain(&jac).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                block: "derivatives",
                interval: None,
            });
        }
        Ok(Eval {
            f,
            grad,
            c,
            jac,
            elem_grad,
        })
    }

    /// `∇f + Jᵀy`.
    fn lagrangian_gradient(&self, ev: &Eval, y: &[f64]) -> Vec<f64> {
        let mut g = ev.grad.clone();
        for (t, &(r, c)) in self.pattern.iter().enumerate() {
            g[c] += ev.jac[t] * y[r];
        }
        g
    }

    /// Local Lagrangian gradient of element `e` at `ev` with multipliers `y`.
    fn element_gradient(&self, e: usize, ev: &Eval, y: &[f64]) -> Vec<f64> {
        let mut g = ev.elem_grad[e].clone();
        for &(t, local, r) in &self.elem_jac[e] {
            g[local] += ev.jac[t] * y[r];
        }
        g
    }
}

struct Residuals {
    stationarity: f64,
    feasibility: f64,
    complementarity: f64,
    /// `‖s∘z − μ‖∞`
    centrality: f64,
}

fn residuals(pb: &Problem<'_>, ev: &Eval, s: &[f64], y: &[f64], z: &[f64], mu: f64) -> Residuals {
    let gl = pb.lagrangian_gradient(ev, y);
    let mut stat = inf(&gl);
    let mut feas = inf(&ev.c[..pb.n_eq]);
    let mut comp = 0.0f64;
    let mut cent = 0.0f64;
    for j in 0..pb.n_ineq {
        stat = stat.max((y[pb.n_eq + j] + z[j]).abs());
        feas = feas.max((ev.c[pb.n_eq + j] - s[j]).abs());
        comp = comp.max((s[j] * z[j]).abs());
        cent = cent.max((s[j] * z[j] - mu).abs());
    }
    Residuals {
        stationarity: stat,
        feasibility: feas,
        complementarity: comp,
        centrality: cent,
    }
}

/// `Σ_r (|c_r| + Σ_j |J_rj w_j|)`: first-order size of the terms summed
/// when evaluating the constraints.
fn evaluation_scale(pb: &Problem<'_>, ev: &Eval, w: &[f64]) -> f64 {
    let terms: f64 = pb.pattern.iter().zip(&ev.jac).map(|(&(_, c), j)| (j * w[c]).abs()).sum();
    terms + l1(&ev.c)
}

fn infeasibility(pb: &Problem<'_>, c: &[f64], s: &[f64]) -> f64 {
    l1(&c[..pb.n_eq]) + (0..pb.n_ineq).map(|j| (c[pb.n_eq + j] - s[j]).abs()).sum::<f64>()
}

fn merit(pb: &Problem<'_>, f: f64, c: &[f64], s: &[f64], mu: f64, nu: f64) -> f64 {
    f - mu * s.iter().map(|v| v.ln()).sum::<f64>() + nu * infeasibility(pb, c, s)
}

/// Largest `α ∈ (0, 1]` keeping `x + α dx ≥ (1 − τ) x`.
fn max_step(x: &[f64], dx: &[f64], tau: f64) -> f64 {
    x.iter()
        .zip(dx)
        .filter(|(_, d)| **d < 0.0)
        .map(|(x, d)| -tau * x / d)
        .fold(1.0, f64::min)
}

/// Solves the NLP from `guess`. Deterministic; never panics on model
/// failures, which surface as a non-optimal status.
pub fn solve(nlp: &dyn Nlp, guess: &[f64], opts: &SolveOptions) -> Result<SolveReport> {
    opts.validate()?;
    let pb = Problem::new(nlp)?;
    let (n, n_eq, n_ineq) = (pb.n, pb.n_eq, pb.n_ineq);
    let m = pb.m();
    if guess.len() != n {
        return Err(Error::Dimension {
            context: "initial guess",
            expected: n,
            got: guess.len(),
        });
    }
    let mut kkt = Kkt::new(nlp, &pb.pattern, &pb.elements)?;
    let mut bfgs = PartitionedBfgs::new(pb.elements.iter().map(|e| e.cols.clone()));

    let mut w = guess.to_vec();
    let (f0, c0) = pb.values(&w)?;
    let mut ev = pb.derivatives(&w, f0, c0)?;
    let mut mu = opts.mu0;
    let mu_min = 0.1 * opts.kkt_tol;
    let mut s: Vec<f64> = (0..n_ineq).map(|j| ev.c[n_eq + j].max(1e-2)).collect();
    let mut z: Vec<f64> = s.iter().map(|sj| mu / sj).collect();
    let mut y = vec![0.0; m];
    for j in 0..n_ineq {
        y[n_eq + j] = -z[j];
    }
    let mut nu = 1.0f64;
    let mut delta_w = opts.delta0;
    let delta_c = opts.delta0;
    let mut log = Vec::new();
    let mut status = SolveStatus::MaxIter;
    let mut message = None;
    let mut iterations = 0;
    let mut fresh_bfgs = true;

    let start = Instant::now();
    let mut res = residuals(&pb, &ev, &s, &y, &z, mu);
    loop {
        if res.stationarity.max(res.feasibility).max(res.complementarity) <= opts.kkt_tol {
            status = SolveStatus::Optimal;
            break;
        }
        if iterations >= opts.max_iter {
            break;
        }
        while mu > mu_min && res.stationarity.max(res.feasibility).max(res.centrality) <= 10.0 * mu {
            mu = (mu * opts.mu_shrink).max(mu_min);
            res = residuals(&pb, &ev, &s, &y, &z, mu);
        }

        // Newton system right-hand side.
        let gl = pb.lagrangian_gradient(&ev, &y);
        let sigma_inv: Vec<f64> = (0..n_ineq).map(|j| s[j] / z[j]).collect();
        let mut rhs = vec![0.0; n + m];
        for i in 0..n {
            rhs[i] = -gl[i];
        }
        for r in 0..n_eq {
            rhs[n + r] = -ev.c[r];
        }
        for j in 0..n_ineq {
            let yi = y[n_eq + j];
            rhs[n + n_eq + j] = -(ev.c[n_eq + j] - s[j]) + sigma_inv[j] * yi + mu / z[j];
        }

        let mut factored = false;
        for attempt in 0..=MAX_REGULARIZATIONS {
            kkt.assemble(n, n_eq, &bfgs, &ev.jac, &sigma_inv, delta_w, delta_c);
            match kkt.ldl.factor(&kkt.ax) {
                Ok(inertia) if inertia.positive == n && inertia.negative == m => {
                    factored = true;
                    break;
                }
                _ => {
                    if attempt == MAX_REGULARIZATIONS {
                        break;
                    }
                    delta_w = (delta_w * 10.0).max(opts.delta0);
                }
            }
        }
        if !factored {
            status = SolveStatus::LineSearchFailure;
            message = Some(format!("KKT factorization failed after {MAX_REGULARIZATIONS} regularization increases"));
            break;
        }
        let sol = kkt.solve(&rhs);
        let dw = &sol[..n];
        let dy = &sol[n..];
        let ds: Vec<f64> = (0..n_ineq)
            .map(|j| sigma_inv[j] * (dy[n_eq + j] + y[n_eq + j]) + mu / z[j])
            .collect();
        let dz: Vec<f64> = (0..n_ineq).map(|j| mu / s[j] - z[j] - z[j] / s[j] * ds[j]).collect();

        let alpha_max = max_step(&s, &ds, opts.fraction_to_boundary);
        let alpha_z = max_step(&z, &dz, opts.fraction_to_boundary);

        // Penalty parameter and directional derivative of the merit function.
        let theta = infeasibility(&pb, &ev.c, &s);
        let barrier_slope: f64 =
            ev.grad.iter().zip(dw).map(|(g, d)| g * d).sum::<f64>() - mu * (0..n_ineq).map(|j| ds[j] / s[j]).sum::<f64>();
        let curvature = bfgs.quad_form(dw) + (0..n_ineq).map(|j| ds[j] * ds[j] / sigma_inv[j]).sum::<f64>();
        if theta > 0.0 {
            let nu_trial = (barrier_slope + 0.5 * curvature.max(0.0)) / ((1.0 - PENALTY_RHO) * theta);
            if nu < nu_trial {
                nu = nu_trial + 1.0;
            }
        }
        let slope = (barrier_slope - nu * theta).min(0.0);
        let phi0 = merit(&pb, ev.f, &ev.c, &s, mu, nu);

        // Rounding in f, c and s bounds how finely the merit can be compared.
        let noise = 10.0 * f64::EPSILON * (ev.f.abs() + nu * (evaluation_scale(&pb, &ev, &w) + s.iter().sum::<f64>()));
        let mut alpha = alpha_max;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let w_trial: Vec<f64> = (0..n).map(|i| w[i] + alpha * dw[i]).collect();
            let s_trial: Vec<f64> = (0..n_ineq).map(|j| s[j] + alpha * ds[j]).collect();
            if let Ok((f, c)) = pb.values(&w_trial) {
                let phi = merit(&pb, f, &c, &s_trial, mu, nu);
                if phi.is_finite() && phi <= phi0 + ARMIJO * alpha * slope + noise {
                    accepted = Some((w_trial, s_trial, f, c));
                    break;
                }
            }
            alpha *= 0.5;
            if alpha < MIN_STEP {
                break;
            }
        }
        let Some((w_new, s_new, f_new, c_new)) = accepted else {
            if !fresh_bfgs {
                bfgs.reset();
                fresh_bfgs = true;
                iterations += 1;
                continue;
            }
            status = SolveStatus::LineSearchFailure;
            message = Some("no acceptable step along the search direction".into());
            break;
        };
        let ev_new = match pb.derivatives(&w_new, f_new, c_new) {
            Ok(e) => e,
            Err(e) => {
                status = SolveStatus::LineSearchFailure;
                message = Some(e.to_string());
                break;
            }
        };
        for r in 0..m {
            y[r] += alpha * dy[r];
        }
        for j in 0..n_ineq {
            z[j] += alpha_z * dz[j];
            let sj = s_new[j];
            z[j] = z[j].clamp(mu / (Z_SAFEGUARD * sj), Z_SAFEGUARD * mu / sj);
        }

        for e in 0..pb.elements.len() {
            let cols = &pb.elements[e].cols;
            let step: Vec<f64> = cols.iter().map(|&c| w_new[c] - w[c]).collect();
            let g_new = pb.element_gradient(e, &ev_new, &y);
            let g_old = pb.element_gradient(e, &ev, &y);
            let diff: Vec<f64> = g_new.iter().zip(&g_old).map(|(a, b)| a - b).collect();
            bfgs.update(e, &step, &diff);
        }
        fresh_bfgs = false;
        // Relax regularization once the matrix factors cleanly again.
        delta_w = (delta_w * 0.1).max(opts.delta0);

        w = w_new;
        s = s_new;
        ev = ev_new;
        iterations += 1;
        res = residuals(&pb, &ev, &s, &y, &z, mu);
        if opts.record_log {
            log.push(IterationLog {
                iter: iterations,
                mu,
                merit: merit(&pb, ev.f, &ev.c, &s, mu, nu),
                kkt_residual: res.stationarity.max(res.feasibility).max(res.complementarity),
                step_length: alpha,
            });
        }
    }
    let elapsed = start.elapsed().as_secs_f64() * 1e3;
    let ms_per_iter = if iterations > 0 { elapsed / iterations as f64 } else { 0.0 };
    Ok(SolveReport {
        status,
        objective: ev.f,
        iterations,
        stationarity: res.stationarity,
        primal_feasibility: res.feasibility,
        complementarity: res.complementarity,
        ms_per_iter,
        solution: w,
        multipliers: y,
        message,
        log,
    })
}
