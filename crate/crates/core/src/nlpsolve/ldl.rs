//! Up-looking sparse LDLᵀ without pivoting for quasi-definite matrices.
//!
//! The matrix is given by its upper triangle in compressed-column form.
//! Symbolic analysis (elimination tree and column counts) runs once; the
//! numeric factorization is repeated with new values on the same pattern.

const NONE: usize = usize::MAX;

#[derive(Debug, Clone)]
pub(crate) struct SparseLdl {
    n: usize,
    ap: Vec<usize>,
    ai: Vec<usize>,
    parent: Vec<usize>,
    lp: Vec<usize>,
    li: Vec<usize>,
    lx: Vec<f64>,
    d: Vec<f64>,
    // workspaces
    y: Vec<f64>,
    flag: Vec<usize>,
    pattern: Vec<usize>,
    lnz: Vec<usize>,
}

/// Outcome of a numeric factorization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Inertia {
    pub positive: usize,
    pub negative: usize,
}

impl SparseLdl {
    /// `ap`/`ai`: upper-triangular CSC pattern, row indices sorted, diagonal present.
    pub fn new(n: usize, ap: Vec<usize>, ai: Vec<usize>) -> Self {
        let mut parent = vec![NONE; n];
        let mut flag = vec![NONE; n];
        let mut lnz = vec![0usize; n];
        for k in 0..n {
            flag[k] = k;
            for &row in &ai[ap[k]..ap[k + 1]] {
                let mut i = row;
                if i >= k {
                    continue;
                }
                while flag[i] != k {
                    if parent[i] == NONE {
                        parent[i] = k;
                    }
                    lnz[i] += 1;
                    flag[i] = k;
                    i = parent[i];
                }
            }
        }
        let mut lp = vec![0usize; n + 1];
        for k in 0..n {
            lp[k + 1] = lp[k] + lnz[k];
        }
        let nnz = lp[n];
        Self {
            n,
            ap,
            ai,
            parent,
            lp,
            li: vec![0; nnz],
            lx: vec![0.0; nnz],
            d: vec![0.0; n],
            y: vec![0.0; n],
            flag,
            pattern: vec![0; n],
            lnz,
        }
    }

    /// Entries stored for the input matrix.
    pub fn stored_nnz(&self) -> usize {
        self.ap[self.n]
    }

    /// Multiply-adds of one numeric factorization, `Σ_k |L_{:,k}|²`.
    pub fn flops(&self) -> f64 {
        self.lnz_counts().map(|c| (c * c) as f64).sum()
    }

    fn lnz_counts(&self) -> impl Iterator<Item = usize> + '_ {
        self.lp.windows(2).map(|w| w[1] - w[0])
    }

    /// Numeric factorization of the matrix with values `ax` on the stored
    /// pattern. Fails with the column index of an exactly zero or non-finite
    /// pivot.
    pub fn factor(&mut self, ax: &[f64]) -> Result<Inertia, usize> {
        let n = self.n;
        let mut inertia = Inertia {
            positive: 0,
            negative: 0,
        };
        for k in 0..n {
            self.y[k] = 0.0;
            let mut top = n;
            self.flag[k] = k;
            self.lnz[k] = 0;
            for p in self.ap[k]..self.ap[k + 1] {
                let mut i = self.ai[p];
                if i > k {
                    continue;
                }
                self.y[i] += ax[p];
                let mut len = 0;
                while self.flag[i] != k {
                    self.pattern[len] = i;
                    len += 1;
                    self.flag[i] = k;
                    i = self.parent[i];
                }
                while len > 0 {
                    top -= 1;
                    len -= 1;
                    self.pattern[top] = self.pattern[len];
                }
            }
            let mut dk = self.y[k];
            self.y[k] = 0.0;
            for &i in &self.pattern[top..n] {
                let yi = self.y[i];
                self.y[i] = 0.0;
                let start = self.lp[i];
                let end = start + self.lnz[i];
                for p in start..end {
                    self.y[self.li[p]] -= self.lx[p] * yi;
                }
                let l_ki = yi / self.d[i];
                dk -= l_ki * yi;
                self.li[end] = k;
                self.lx[end] = l_ki;
                self.lnz[i] += 1;
            }
            if dk == 0.0 || !dk.is_finite() {
                return Err(k);
            }
            if dk > 0.0 {
                inertia.positive += 1;
            } else {
                inertia.negative += 1;
            }
            self.d[k] = dk;
        }
        Ok(inertia)
    }

    /// Solves `L D Lᵀ x = b` in place.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.n;
        for j in 0..n {
            let bj = b[j];
            for p in self.lp[j]..self.lp[j + 1] {
                b[self.li[p]] -= self.lx[p] * bj;
            }
        }
        for j in 0..n {
            b[j] /= self.d[j];
        }
        for j in (0..n).rev() {
            let mut s = b[j];
            for p in self.lp[j]..self.lp[j + 1] {
                s -= self.lx[p] * b[self.li[p]];
            }
            b[j] = s;
        }
    }

    /// `out = A x` for the symmetric matrix whose upper triangle is stored.
    pub fn sym_matvec(&self, ax: &[f64], x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for j in 0..self.n {
            for p in self.ap[j]..self.ap[j + 1] {
                let i = self.ai[p];
                out[i] += ax[p] * x[j];
                if i != j {
                    out[j] += ax[p] * x[i];
                }
            }
        }
    }

    /// Solve followed by iterative refinement against the same matrix.
    /// Returns the final residual infinity norm.
    pub fn solve_refined(&self, ax: &[f64], rhs: &[f64], x: &mut [f64], max_steps: usize) -> f64 {
        let n = self.n;
        x.copy_from_slice(rhs);
        self.solve_in_place(x);
        let scale = rhs.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
        let mut r = vec![0.0; n];
        let mut kx = vec![0.0; n];
        let mut prev = f64::INFINITY;
        for step in 0..=max_steps {
            self.sym_matvec(ax, x, &mut kx);
            for i in 0..n {
                r[i] = rhs[i] - kx[i];
            }
            let res = r.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            // Stop at round-off level, or once a correction stops paying off.
            if res <= 1e-15 * scale || !res.is_finite() || res > 0.25 * prev || step == max_steps {
                return res;
            }
            prev = res;
            self.solve_in_place(&mut r);
            for i in 0..n {
                x[i] += r[i];
            }
        }
        prev
    }
}

/// Builds an upper-triangular CSC pattern from coordinate pairs, merging
/// duplicates. Returns `(ap, ai, slot)` where `slot[t]` is the storage index
/// of input pair `t`.
pub(crate) fn upper_csc(n: usize, pairs: &[(usize, usize)]) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut cols: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &(a, b) in pairs {
        let (i, j) = if a <= b { (a, b) } else { (b, a) };
        cols[j].push(i);
    }
    let mut ap = vec![0usize; n + 1];
    let mut ai = Vec::new();
    for (j, c) in cols.iter_mut().enumerate() {
        c.sort_unstable();
        c.dedup();
        ai.extend_from_slice(c);
        ap[j + 1] = ai.len();
    }
    let slot = pairs
        .iter()
        .map(|&(a, b)| {
            let (i, j) = if a <= b { (a, b) } else { (b, a) };
            let seg = &ai[ap[j]..ap[j + 1]];
            ap[j] + seg.binary_search(&i).expect("pair present in pattern")
        })
        .collect();
    (ap, ai, slot)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};

    fn build(dense: &DMatrix<f64>) -> (SparseLdl, Vec<f64>) {
        let n = dense.nrows();
        let mut pairs = Vec::new();
        for j in 0..n {
            for i in 0..=j {
                if dense[(i, j)] != 0.0 || i == j {
                    pairs.push((i, j));
                }
            }
        }
        let (ap, ai, slot) = upper_csc(n, &pairs);
        let mut ax = vec![0.0; ai.len()];
        for (t, &(i, j)) in pairs.iter().enumerate() {
            ax[slot[t]] = dense[(i, j)];
        }
        (SparseLdl::new(n, ap, ai), ax)
    }

    #[test]
    fn solves_quasi_definite_system() {
        // [[H, Aᵀ], [A, -δI]] with H = diag(2, 3, 4), A = [[1, 1, 0]]
        let mut k = DMatrix::<f64>::zeros(4, 4);
        k[(0, 0)] = 2.0;
        k[(1, 1)] = 3.0;
        k[(2, 2)] = 4.0;
        k[(3, 3)] = -1e-8;
        k[(0, 3)] = 1.0;
        k[(3, 0)] = 1.0;
        k[(1, 3)] = 1.0;
        k[(3, 1)] = 1.0;
        let (mut ldl, ax) = build(&k);
        let inertia = ldl.factor(&ax).unwrap();
        assert_eq!((inertia.positive, inertia.negative), (3, 1));
        let b = [1.0, -2.0, 0.5, 3.0];
        let mut x = vec![0.0; 4];
        ldl.solve_refined(&ax, &b, &mut x, 3);
        let oracle = k.clone().lu().solve(&DVector::from_column_slice(&b)).unwrap();
        for i in 0..4 {
            assert!((x[i] - oracle[i]).abs() < 1e-10, "{i}: {} vs {}", x[i], oracle[i]);
        }
    }

    #[test]
    fn zero_pivot_is_reported() {
        let k = DMatrix::<f64>::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let (mut ldl, ax) = build(&k);
        assert_eq!(ldl.factor(&ax), Err(0));
    }

    #[test]
    fn duplicate_pairs_share_a_slot() {
        let (ap, ai, slot) = upper_csc(2, &[(0, 1), (1, 0), (1, 1), (0, 0)]);
        assert_eq!(ap, vec![0, 1, 3]);
        assert_eq!(ai, vec![0, 0, 1]);
        assert_eq!(slot[0], slot[1]);
    }
}
