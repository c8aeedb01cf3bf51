//! Helpers shared by the integration and acceptance tests.
#![allow(dead_code)]

use dircol::nlpsolve::Nlp;
use dircol::transcribe::TranscribedNlp;
use dircol::Result;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// `min ½ wᵀQw + cᵀw  s.t.  A w = b` with dense data.
pub struct EqualityQp {
    pub q: DMatrix<f64>,
    pub c: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl EqualityQp {
    /// Random instance with `Q = MᵀM + I` and a full-row-rank `A` (almost surely).
    pub fn random(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Self {
        let mut draw = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0));
        let mm = draw(n, n);
        Self {
            q: mm.transpose() * &mm + DMatrix::identity(n, n),
            c: draw(n, 1).column(0).into_owned(),
            a: draw(m, n),
            b: draw(m, 1).column(0).into_owned(),
        }
    }

    /// Solution of the dense KKT system `[Q Aᵀ; A 0] (w, −λ) = (−c, b)`.
    pub fn oracle(&self) -> DVector<f64> {
        let (n, m) = (self.q.ncols(), self.a.nrows());
        let mut k = DMatrix::zeros(n + m, n + m);
        k.view_mut((0, 0), (n, n)).copy_from(&self.q);
        k.view_mut((n, 0), (m, n)).copy_from(&self.a);
        k.view_mut((0, n), (n, m)).copy_from(&self.a.transpose());
        let mut rhs = DVector::zeros(n + m);
        rhs.rows_mut(0, n).copy_from(&(-&self.c));
        rhs.rows_mut(n, m).copy_from(&self.b);
        k.lu().solve(&rhs).expect("nonsingular KKT").rows(0, n).into_owned()
    }
}

impl Nlp for EqualityQp {
    fn n_var(&self) -> usize {
        self.q.ncols()
    }
    fn n_eq(&self) -> usize {
        self.a.nrows()
    }
    fn n_ineq(&self) -> usize {
        0
    }
    fn objective(&self, w: &[f64]) -> Result<f64> {
        let w = DVector::from_column_slice(w);
        Ok(0.5 * w.dot(&(&self.q * &w)) + self.c.dot(&w))
    }
    fn gradient(&self, w: &[f64], grad: &mut [f64]) -> Result<()> {
        let g = &self.q * DVector::from_column_slice(w) + &self.c;
        grad.copy_from_slice(g.as_slice());
        Ok(())
    }
    fn constraints(&self, w: &[f64], out: &mut [f64]) -> Result<()> {
        let r = &self.a * DVector::from_column_slice(w) - &self.b;
        out.copy_from_slice(r.as_slice());
        Ok(())
    }
    fn jacobian_pattern(&self) -> Vec<(usize, usize)> {
        let n = self.q.ncols();
        (0..self.a.nrows()).flat_map(|r| (0..n).map(move |c| (r, c))).collect()
    }
    fn jacobian_values(&self, _w: &[f64], vals: &mut [f64]) -> Result<()> {
        let n = self.q.ncols();
        for r in 0..self.a.nrows() {
            for c in 0..n {
                vals[r * n + c] = self.a[(r, c)];
            }
        }
        Ok(())
    }
}

const FD_STEP: f64 = 1e-6;

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

/// Worst relative gap between the analytic gradient and central differences.
pub fn gradient_fd_error(nlp: &dyn Nlp, w: &[f64]) -> f64 {
    let mut g = vec![0.0; w.len()];
    nlp.gradient(w, &mut g).unwrap();
    let mut wp = w.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..w.len() {
        wp[i] = w[i] + FD_STEP;
        let fp = nlp.objective(&wp).unwrap();
        wp[i] = w[i] - FD_STEP;
        let fm = nlp.objective(&wp).unwrap();
        wp[i] = w[i];
        worst = worst.max(rel(g[i], (fp - fm) / (2.0 * FD_STEP)));
    }
    worst
}

/// Worst relative gap between the analytic Jacobian and central differences,
/// over all entries (undeclared ones compared against zero).
pub fn jacobian_fd_error(nlp: &dyn Nlp, w: &[f64]) -> f64 {
    let m = nlp.n_eq() + nlp.n_ineq();
    let n = w.len();
    let mut analytic = DMatrix::<f64>::zeros(m, n);
    let pattern = nlp.jacobian_pattern();
    let mut vals = vec![0.0; pattern.len()];
    nlp.jacobian_values(w, &mut vals).unwrap();
    for (&(r, c), v) in pattern.iter().zip(&vals) {
        analytic[(r, c)] = *v;
    }
    let mut wp = w.to_vec();
    let (mut cp, mut cm) = (vec![0.0; m], vec![0.0; m]);
    let mut worst: f64 = 0.0;
    for i in 0..n {
        wp[i] = w[i] + FD_STEP;
        nlp.constraints(&wp, &mut cp).unwrap();
        wp[i] = w[i] - FD_STEP;
        nlp.constraints(&wp, &mut cm).unwrap();
        wp[i] = w[i];
        for r in 0..m {
            worst = worst.max(rel(analytic[(r, i)], (cp[r] - cm[r]) / (2.0 * FD_STEP)));
        }
    }
    worst
}

/// Random point around the NLP's own initial guess.
pub fn random_point(nlp: &TranscribedNlp<'_>, rng: &mut ChaCha8Rng, spread: f64) -> Vec<f64> {
    nlp.initial_guess().iter().map(|g| g + rng.gen_range(-spread..spread)).collect()
}

pub fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}
