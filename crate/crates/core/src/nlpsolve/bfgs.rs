//! Partitioned damped BFGS: one dense quasi-Newton block per Hessian element.

use nalgebra::{DMatrix, DVector};

/// Fraction of `sᵀBs` that the damped curvature `sᵀr` must reach.
const DAMPING: f64 = 0.2;

#[derive(Debug, Clone)]
pub(crate) struct Block {
    pub cols: Vec<usize>,
    pub b: DMatrix<f64>,
    scaled: bool,
}

#[derive(Debug, Clone)]
pub(crate) struct PartitionedBfgs {
    pub blocks: Vec<Block>,
    pub updates: usize,
    pub skips: usize,
}

impl PartitionedBfgs {
    pub fn new(cols: impl IntoIterator<Item = Vec<usize>>) -> Self {
        let blocks = cols
            .into_iter()
            .map(|c| {
                let n = c.len();
                Block {
                    cols: c,
                    b: DMatrix::identity(n, n),
                    scaled: false,
                }
            })
            .collect();
        Self {
            blocks,
            updates: 0,
            skips: 0,
        }
    }

    pub fn reset(&mut self) {
        for blk in &mut self.blocks {
            let n = blk.cols.len();
            blk.b = DMatrix::identity(n, n);
            blk.scaled = false;
        }
    }

    /// `Σ_e dw_eᵀ B_e dw_e`.
    pub fn quad_form(&self, dw: &[f64]) -> f64 {
        self.blocks
            .iter()
            .map(|blk| {
                let s = DVector::from_iterator(blk.cols.len(), blk.cols.iter().map(|&c| dw[c]));
                s.dot(&(&blk.b * &s))
            })
            .sum()
    }

    /// Damped update of block `e` with local step `s` and gradient change `y`.
    pub fn update(&mut self, e: usize, s: &[f64], y: &[f64]) {
        let blk = &mut self.blocks[e];
        let n = s.len();
        let s = DVector::from_column_slice(s);
        let mut y = DVector::from_column_slice(y);
        let ss = s.norm_squared();
        if ss <= 1e-28 {
            self.skips += 1;
            return;
        }
        let sy = s.dot(&y);
        if !blk.scaled {
            // Shanno-Phua scaling of the first update.
            let yy = y.norm_squared();
            if sy > 0.0 && yy > 0.0 {
                blk.b = DMatrix::identity(n, n) * (yy / sy);
            }
            blk.scaled = true;
        }
        let bs = &blk.b * &s;
        let sbs = s.dot(&bs);
        if !(sbs > 0.0) || !sbs.is_finite() {
            blk.b = DMatrix::identity(n, n);
            blk.scaled = false;
            self.skips += 1;
            return;
        }
        if sy < DAMPING * sbs {
            let theta = (1.0 - DAMPING) * sbs / (sbs - sy);
            y = &y * theta + &bs * (1.0 - theta);
        }
        let sr = s.dot(&y);
        blk.b.ger(-1.0 / sbs, &bs, &bs, 1.0);
        blk.b.ger(1.0 / sr, &y, &y, 1.0);
        if blk.b.iter().all(|v| v.is_finite()) {
            self.updates += 1;
        } else {
            blk.b = DMatrix::identity(n, n);
            blk.scaled = false;
            self.skips += 1;
        }
    }
}
