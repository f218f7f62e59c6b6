use nalgebra::DMatrix;

use super::gram::GramState;
use super::matrix::{dot, DenseMatrix};
use crate::error::{Error, Result};

/// Singular values `sigma_i <= SVD_RCOND * sigma_max` of `K` are treated as zero.
pub const SVD_RCOND: f64 = 1e-10;

/// Eigenvalues `lambda_i <= GRAM_RCOND * lambda_max` of `K^T K` are treated as
/// zero on the Gram route. Forming the Gram squares the condition number and a
/// symmetric eigensolver leaves null eigenvalues at roughly `d * eps *
/// lambda_max`, so the Gram route cannot resolve the `(1e-10)^2` level.
pub const GRAM_RCOND: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactorizationKind {
    /// `K = QR`, followed by an SVD of the small triangular factor.
    OrthogonalTriangular,
    /// Thin SVD of `K` itself.
    SingularValue,
    /// Eigendecomposition of an accumulated `K^T K`; yields the same `Sigma V^T`.
    GramEigen,
}

/// The `Sigma V^T` part of a (rank-truncated) SVD of `K`, enough to apply the
/// pseudoinverse of `K^T K` and to evaluate `||K q||` in `O(rank * d)` work.
#[derive(Debug, Clone)]
pub struct Factorization {
    kind: FactorizationKind,
    dim: usize,
    /// Retained singular values, descending.
    sigma: Vec<f64>,
    /// Retained right singular vectors as rows (`rank x dim`).
    vt: DenseMatrix,
    sigma_max: f64,
    /// Left singular vectors (`n x rank`), when requested.
    left: Option<DenseMatrix>,
}

impl Factorization {
    pub fn from_gram(gram: &GramState) -> Self {
        Self::from_gram_entries(gram.dim(), gram.entries())
    }

    pub fn from_gram_matrix(g: &DenseMatrix) -> Result<Self> {
        if g.rows() != g.cols() {
            return Err(Error::dim(
                "Factorization::from_gram_matrix",
                g.rows(),
                g.cols(),
            ));
        }
        Ok(Self::from_gram_entries(g.rows(), g.data()))
    }

    fn from_gram_entries(dim: usize, entries: &[f64]) -> Self {
        if dim == 0 {
            return Self::empty(FactorizationKind::GramEigen, 0);
        }
        let m = DMatrix::from_row_slice(dim, dim, entries);
        let eig = m.symmetric_eigen();
        let mut order: Vec<usize> = (0..dim).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let lambda_max = eig.eigenvalues[order[0]].max(0.0);
        let cutoff = GRAM_RCOND * lambda_max;
        let mut sigma = Vec::new();
        let mut vt = Vec::new();
        for &idx in &order {
            let lambda = eig.eigenvalues[idx];
            if lambda_max == 0.0 || lambda <= cutoff {
                break;
            }
            sigma.push(lambda.sqrt());
            vt.extend(eig.eigenvectors.column(idx).iter().copied());
        }
        let rank = sigma.len();
        Self {
            kind: FactorizationKind::GramEigen,
            dim,
            sigma,
            vt: DenseMatrix::new(rank, dim, vt).expect("finite eigenvectors"),
            sigma_max: lambda_max.sqrt(),
            left: None,
        }
    }

    /// Thin SVD of `k`; `keep_left` retains `U` for one-shot leverage scores.
    pub fn svd(k: &DenseMatrix, keep_left: bool) -> Self {
        if k.rows() == 0 || k.cols() == 0 {
            return Self::empty(FactorizationKind::SingularValue, k.cols());
        }
        let svd = k.to_nalgebra().svd(keep_left, true);
        let u = svd.u.as_ref();
        let v_t = svd.v_t.as_ref().expect("requested V^T");
        Self::truncate(
            FactorizationKind::SingularValue,
            k.cols(),
            svd.singular_values.as_slice(),
            v_t,
            u,
        )
    }

    /// Householder QR of `k`, then an SVD of the small factor `R`.
    pub fn qr(k: &DenseMatrix, keep_left: bool) -> Self {
        if k.rows() == 0 || k.cols() == 0 {
            return Self::empty(FactorizationKind::OrthogonalTriangular, k.cols());
        }
        let qr = k.to_nalgebra().qr();
        let r = qr.r();
        let svd = r.svd(keep_left, true);
        let v_t = svd.v_t.as_ref().expect("requested V^T");
        let left = if keep_left {
            Some(qr.q() * svd.u.as_ref().expect("requested U"))
        } else {
            None
        };
        Self::truncate(
            FactorizationKind::OrthogonalTriangular,
            k.cols(),
            svd.singular_values.as_slice(),
            v_t,
            left.as_ref(),
        )
    }

    fn truncate(
        kind: FactorizationKind,
        dim: usize,
        singular: &[f64],
        v_t: &DMatrix<f64>,
        u: Option<&DMatrix<f64>>,
    ) -> Self {
        let mut order: Vec<usize> = (0..singular.len()).collect();
        order.sort_by(|&a, &b| singular[b].total_cmp(&singular[a]));
        let sigma_max = order.first().map_or(0.0, |&i| singular[i]);
        let kept: Vec<usize> = order
            .into_iter()
            .take_while(|&i| sigma_max > 0.0 && singular[i] > SVD_RCOND * sigma_max)
            .collect();
        let rank = kept.len();
        let mut vt = Vec::with_capacity(rank * dim);
        for &i in &kept {
            vt.extend(v_t.row(i).iter().copied());
        }
        let left = u.map(|u| {
            let n = u.nrows();
            let mut data = Vec::with_capacity(n * rank);
            for r in 0..n {
                for &i in &kept {
                    data.push(u[(r, i)]);
                }
            }
            DenseMatrix::new(n, rank, data).expect("finite singular vectors")
        });
        Self {
            kind,
            dim,
            sigma: kept.iter().map(|&i| singular[i]).collect(),
            vt: DenseMatrix::new(rank, dim, vt).expect("finite singular vectors"),
            sigma_max,
            left,
        }
    }

    fn empty(kind: FactorizationKind, dim: usize) -> Self {
        Self {
            kind,
            dim,
            sigma: Vec::new(),
            vt: DenseMatrix::zeros(0, dim),
            sigma_max: 0.0,
            left: None,
        }
    }

    pub fn kind(&self) -> FactorizationKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.sigma
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigma_max
    }

    /// Largest eigenvalue of `K^T K`, i.e. `sigma_max^2`.
    pub fn lambda_max(&self) -> f64 {
        self.sigma_max * self.sigma_max
    }

    pub fn right_vectors(&self) -> &DenseMatrix {
        &self.vt
    }

    fn check(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::dim("factorization", self.dim, v.len()));
        }
        Ok(())
    }

    /// `v^T (K^T K)^+ v`; directions outside the retained row space contribute nothing.
    pub fn pinv_quadratic_form(&self, v: &[f64]) -> Result<f64> {
        self.check(v)?;
        Ok(self
            .vt
            .iter_rows()
            .zip(&self.sigma)
            .map(|(vi, s)| {
                let c = dot(vi, v) / s;
                c * c
            })
            .sum())
    }

    /// `||K q||^2 = ||Sigma V^T q||^2`.
    pub fn norm_sq(&self, q: &[f64]) -> Result<f64> {
        self.check(q)?;
        Ok(self
            .vt
            .iter_rows()
            .zip(&self.sigma)
            .map(|(vi, s)| {
                let c = s * dot(vi, q);
                c * c
            })
            .sum())
    }

    /// Squared norm of the part of `v` outside the retained row space.
    pub fn out_of_span_sq(&self, v: &[f64]) -> Result<f64> {
        self.check(v)?;
        // explicit residual; `|v|^2 - |V^T v|^2` cancels catastrophically
        let mut r = v.to_vec();
        for vi in self.vt.iter_rows() {
            let c = dot(vi, v);
            for (rk, &vik) in r.iter_mut().zip(vi) {
                *rk -= c * vik;
            }
        }
        Ok(dot(&r, &r))
    }

    /// The `rank x dim` matrix `Sigma V^T`.
    pub fn sigma_vt(&self) -> DenseMatrix {
        let mut m = self.vt.clone();
        for (i, &s) in self.sigma.iter().enumerate() {
            for x in m.row_mut(i) {
                *x *= s;
            }
        }
        m
    }

    /// `V Sigma^2 V^T`, which equals `K^T K` up to the truncated directions.
    pub fn reconstruct_gram(&self) -> DenseMatrix {
        let svt = self.sigma_vt();
        svt.transpose().matmul(&svt).expect("square product")
    }

    /// Per-row leverage scores `||U_j||^2`, available when left vectors were kept.
    pub fn row_leverage(&self) -> Option<Vec<f64>> {
        self.left
            .as_ref()
            .map(|u| u.iter_rows().map(|r| dot(r, r)).collect())
    }
}
