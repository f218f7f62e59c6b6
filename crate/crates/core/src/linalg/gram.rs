use super::matrix::DenseMatrix;
use crate::error::{Error, Result};

/// Running `K^T K` built from one outer product per absorbed row.
#[derive(Debug, Clone, PartialEq)]
pub struct GramState {
    dim: usize,
    gram: Vec<f64>,
    count: usize,
}

impl GramState {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            gram: vec![0.0; dim * dim],
            count: 0,
        }
    }

    /// Gram of all rows of `k`, accumulated in row order.
    pub fn from_matrix(k: &DenseMatrix) -> Self {
        let mut g = Self::new(k.cols());
        for row in k.iter_rows() {
            g.add_row_unchecked(row);
        }
        g
    }

    pub fn accumulate(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::dim("gram_accumulate", self.dim, row.len()));
        }
        self.add_row_unchecked(row);
        Ok(())
    }

    fn add_row_unchecked(&mut self, row: &[f64]) {
        let d = self.dim;
        for (i, &ri) in row.iter().enumerate() {
            if ri == 0.0 {
                continue;
            }
            let g = &mut self.gram[i * d..(i + 1) * d];
            for (gij, &rj) in g.iter_mut().zip(row) {
                *gij += ri * rj;
            }
        }
        self.count += 1;
    }

    /// Adds another Gram (same dimension) into this one.
    pub fn merge(&mut self, other: &GramState) -> Result<()> {
        if other.dim != self.dim {
            return Err(Error::dim("gram merge", self.dim, other.dim));
        }
        for (a, b) in self.gram.iter_mut().zip(&other.gram) {
            *a += b;
        }
        self.count += other.count;
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn entries(&self) -> &[f64] {
        &self.gram
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.gram[i * self.dim + j]
    }

    pub fn to_matrix(&self) -> DenseMatrix {
        DenseMatrix::new(self.dim, self.dim, self.gram.clone()).expect("gram entries are finite")
    }

    /// Rebuilds a state from raw entries, e.g. after a broadcast.
    pub fn from_entries(dim: usize, entries: Vec<f64>, count: usize) -> Result<Self> {
        if entries.len() != dim * dim {
            return Err(Error::dim(
                "GramState::from_entries",
                dim * dim,
                entries.len(),
            ));
        }
        Ok(Self {
            dim,
            gram: entries,
            count,
        })
    }

    /// `v^T G v`.
    pub fn quadratic_form(&self, v: &[f64]) -> f64 {
        let d = self.dim;
        let mut s = 0.0;
        for i in 0..d {
            let gi = &self.gram[i * d..(i + 1) * d];
            s += v[i] * super::matrix::dot(gi, v);
        }
        s
    }

    /// Largest relative asymmetry `|G_ij - G_ji| / max|G|`.
    pub fn asymmetry(&self) -> f64 {
        let scale = self.gram.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
        if scale == 0.0 {
            return 0.0;
        }
        let d = self.dim;
        let mut worst = 0.0_f64;
        for i in 0..d {
            for j in i + 1..d {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst / scale
    }

    /// Smallest eigenvalue divided by the spectral norm (0 for an empty Gram).
    pub fn min_relative_eigenvalue(&self) -> f64 {
        let m = self.to_matrix().to_nalgebra();
        let eig = m.symmetric_eigen();
        let max = eig.eigenvalues.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
        if max == 0.0 {
            return 0.0;
        }
        eig.eigenvalues.iter().fold(f64::INFINITY, |m, &x| m.min(x)) / max
    }
}
