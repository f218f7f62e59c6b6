//! Dense reference attention and structural statistics of attention matrices.
//!
//! Everything here is `O(n^2)` and exists to check the fast paths.

use std::collections::HashSet;
use std::io::Write;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{dot, DenseMatrix};
use crate::universal::FeatureMap;

/// Default cap on the number of query and key rows for dense attention.
pub const DEFAULT_DENSE_CAP: usize = 4096;

/// Attention function applied to inner products before row normalization.
#[derive(Debug, Clone)]
pub enum AttentionFn {
    /// `f(x) = |x|^p`.
    Power(f64),
    /// `<psi(q), phi(k)>^2` with `psi = query_map`, `phi = key_map`.
    Gap {
        query_map: FeatureMap,
        key_map: FeatureMap,
    },
}

impl AttentionFn {
    /// Same map on both sides, as in polynomial attention.
    pub fn symmetric(map: FeatureMap) -> Self {
        AttentionFn::Gap {
            query_map: map.clone(),
            key_map: map,
        }
    }
}

/// `|x|^p`, using repeated multiplication for integral `p`.
pub fn abs_pow(x: f64, p: f64) -> f64 {
    let a = x.abs();
    if p == 2.0 {
        a * a
    } else if p.fract() == 0.0 && p <= 64.0 {
        a.powi(p as i32)
    } else {
        a.powf(p)
    }
}

/// Unnormalized scores `f(<q, K_j>)` of one query against every key.
pub(crate) fn raw_scores(
    queries: &DenseMatrix,
    keys: &DenseMatrix,
    f: &AttentionFn,
) -> Result<DenseMatrix> {
    let (q, k, p) = match f {
        AttentionFn::Power(p) => {
            if keys.cols() != queries.cols() {
                return Err(Error::dim("dense attention", keys.cols(), queries.cols()));
            }
            (queries.clone(), keys.clone(), *p)
        }
        AttentionFn::Gap { query_map, key_map } => {
            let q = query_map.apply_matrix(queries)?;
            let k = key_map.apply_matrix(keys)?;
            if q.cols() != k.cols() {
                return Err(Error::dim("feature map output", k.cols(), q.cols()));
            }
            (q, k, 2.0)
        }
    };
    let rows: Vec<Vec<f64>> = (0..q.rows())
        .into_par_iter()
        .map(|i| {
            let qi = q.row(i);
            k.iter_rows().map(|kj| abs_pow(dot(qi, kj), p)).collect()
        })
        .collect();
    DenseMatrix::new(q.rows(), k.rows(), rows.concat())
}

/// Row-stochastic attention `D^-1 f(Q K^T)`.
#[derive(Debug, Clone)]
pub struct AttentionMatrix {
    a: DenseMatrix,
    degenerate: Vec<bool>,
}

impl AttentionMatrix {
    /// Wraps a matrix read from disk; rows summing to zero are flagged degenerate.
    pub fn from_matrix(a: DenseMatrix) -> Result<Self> {
        if let Some(x) = a.data().iter().find(|&&x| x < 0.0) {
            return Err(Error::invalid(
                "attention matrix",
                format!("negative entry {x}"),
            ));
        }
        let degenerate = a.iter_rows().map(|r| r.iter().all(|&x| x == 0.0)).collect();
        Ok(Self { a, degenerate })
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.a
    }

    pub fn rows(&self) -> usize {
        self.a.rows()
    }

    pub fn cols(&self) -> usize {
        self.a.cols()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.a.get(i, j)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.a.row(i)
    }

    pub fn is_degenerate(&self, i: usize) -> bool {
        self.degenerate[i]
    }

    pub fn degenerate_rows(&self) -> &[bool] {
        &self.degenerate
    }

    /// Largest `|row sum - 1|` over non-degenerate rows.
    pub fn stochasticity_error(&self) -> f64 {
        self.a
            .iter_rows()
            .zip(&self.degenerate)
            .filter(|(_, &deg)| !deg)
            .map(|(r, _)| (r.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Dense attention of queries `Q` against keys `K`; rows with zero
/// normalization are flagged and left at zero.
pub fn dense_attention(
    q: &DenseMatrix,
    k: &DenseMatrix,
    f: &AttentionFn,
) -> Result<AttentionMatrix> {
    dense_attention_capped(q, k, f, DEFAULT_DENSE_CAP)
}

pub fn dense_attention_capped(
    q: &DenseMatrix,
    k: &DenseMatrix,
    f: &AttentionFn,
    cap: usize,
) -> Result<AttentionMatrix> {
    if q.rows() > cap || k.rows() > cap {
        return Err(Error::SizeCap {
            rows: q.rows(),
            cols: k.rows(),
            cap,
        });
    }
    let mut a = raw_scores(q, k, f)?;
    let mut degenerate = vec![false; a.rows()];
    for (i, deg) in degenerate.iter_mut().enumerate() {
        let row = a.row_mut(i);
        let total: f64 = row.iter().sum();
        if total > 0.0 {
            row.iter_mut().for_each(|x| *x /= total);
        } else {
            row.iter_mut().for_each(|x| *x = 0.0);
            *deg = true;
        }
    }
    Ok(AttentionMatrix { a, degenerate })
}

/// `A V`.
pub fn apply_values(a: &AttentionMatrix, v: &DenseMatrix) -> Result<DenseMatrix> {
    a.matrix().matmul(v)
}

/// Indices of a row sorted by value descending, ties by lower index.
fn ranked(row: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx
}

/// Per-row sum of the `k` largest entries.
pub fn top_k_mass(a: &AttentionMatrix, k: usize) -> Result<Vec<f64>> {
    if k == 0 || k > a.cols() {
        return Err(Error::invalid(
            "k",
            format!("must be in 1..={}, got {k}", a.cols()),
        ));
    }
    Ok(a.matrix()
        .iter_rows()
        .map(|r| ranked(r).into_iter().take(k).map(|j| r[j]).sum())
        .collect())
}

/// Patch grid with Manhattan-radius neighborhoods, plus an optional global token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridSpec {
    pub side: usize,
    pub radius: usize,
    /// Token index adjacent to every token; the remaining tokens are the
    /// patches in row-major order.
    pub class_token: Option<usize>,
}

impl GridSpec {
    pub fn tokens(&self) -> usize {
        self.side * self.side + usize::from(self.class_token.is_some())
    }

    fn patch(&self, t: usize) -> (usize, usize) {
        let p = match self.class_token {
            Some(c) if t > c => t - 1,
            _ => t,
        };
        (p / self.side, p % self.side)
    }

    pub fn is_neighbor(&self, i: usize, j: usize) -> bool {
        if self.class_token.is_some_and(|c| c == i || c == j) {
            return true;
        }
        let (ri, ci) = self.patch(i);
        let (rj, cj) = self.patch(j);
        ri.abs_diff(rj) + ci.abs_diff(cj) <= self.radius
    }
}

#[derive(Debug, Clone)]
pub enum Adjacency {
    Grid(GridSpec),
    /// Unordered neighbor pairs; a token neighbors itself only if listed.
    Pairs(HashSet<(usize, usize)>),
}

impl Adjacency {
    pub fn pairs<I: IntoIterator<Item = (usize, usize)>>(pairs: I) -> Self {
        Adjacency::Pairs(
            pairs
                .into_iter()
                .map(|(a, b)| (a.min(b), a.max(b)))
                .collect(),
        )
    }

    pub fn is_neighbor(&self, i: usize, j: usize) -> bool {
        match self {
            Adjacency::Grid(g) => g.is_neighbor(i, j),
            Adjacency::Pairs(set) => set.contains(&(i.min(j), i.max(j))),
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        match self {
            Adjacency::Grid(g) => {
                if g.class_token.is_some_and(|c| c > g.side * g.side) {
                    return Err(Error::invalid(
                        "grid",
                        "class token index past the last patch",
                    ));
                }
                if g.tokens() != n {
                    return Err(Error::invalid(
                        "grid",
                        format!(
                            "{}x{} grid{} has {} tokens, matrix has {n}",
                            g.side,
                            g.side,
                            if g.class_token.is_some() {
                                " + class token"
                            } else {
                                ""
                            },
                            g.tokens()
                        ),
                    ));
                }
            }
            Adjacency::Pairs(set) => {
                if let Some(&(a, b)) = set.iter().find(|&&(_, b)| b >= n) {
                    return Err(Error::invalid(
                        "pairs",
                        format!("pair ({a}, {b}) out of range for {n}"),
                    ));
                }
            }
        }
        Ok(())
    }
}

fn check_square(a: &AttentionMatrix, adj: &Adjacency) -> Result<()> {
    if a.rows() != a.cols() {
        return Err(Error::dim(
            "neighbor statistics need square A",
            a.rows(),
            a.cols(),
        ));
    }
    adj.validate(a.rows())
}

/// Per-row attention mass on neighboring tokens.
pub fn local_mass(a: &AttentionMatrix, adj: &Adjacency) -> Result<Vec<f64>> {
    check_square(a, adj)?;
    Ok((0..a.rows())
        .map(|i| {
            a.row(i)
                .iter()
                .enumerate()
                .filter(|&(j, _)| adj.is_neighbor(i, j))
                .map(|(_, &x)| x)
                .sum()
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportantKeys {
    /// The `m` keys with the largest non-local weight, best first.
    pub keys: Vec<usize>,
    /// `W_j = sum over non-neighbor i of A_ij`, for every key.
    pub weights: Vec<f64>,
}

/// Keys capturing the most non-local attention.
pub fn important_keys(a: &AttentionMatrix, adj: &Adjacency, m: usize) -> Result<ImportantKeys> {
    check_square(a, adj)?;
    let n = a.rows();
    if m == 0 || m > n {
        return Err(Error::invalid("m", format!("must be in 1..={n}, got {m}")));
    }
    let mut weights = vec![0.0; n];
    for i in 0..n {
        for (j, (w, &x)) in weights.iter_mut().zip(a.row(i)).enumerate() {
            if !adj.is_neighbor(i, j) {
                *w += x;
            }
        }
    }
    let keys = ranked(&weights).into_iter().take(m).collect();
    Ok(ImportantKeys { keys, weights })
}

/// Per-row mass on neighbors together with the given key set.
pub fn local_plus_keys_mass(
    a: &AttentionMatrix,
    adj: &Adjacency,
    keys: &[usize],
) -> Result<Vec<f64>> {
    check_square(a, adj)?;
    let keys: HashSet<usize> = keys.iter().copied().collect();
    Ok((0..a.rows())
        .map(|i| {
            a.row(i)
                .iter()
                .enumerate()
                .filter(|&(j, _)| adj.is_neighbor(i, j) || keys.contains(&j))
                .map(|(_, &x)| x)
                .sum()
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Equal-width histogram over `[lo, hi]`; the last bin is closed.
pub fn histogram(values: &[f64], bins: usize, lo: f64, hi: f64) -> Result<Vec<Bin>> {
    if bins == 0 || !(hi > lo) {
        return Err(Error::invalid("histogram", "need bins >= 1 and hi > lo"));
    }
    let width = (hi - lo) / bins as f64;
    let mut out: Vec<Bin> = (0..bins)
        .map(|b| Bin {
            lo: lo + b as f64 * width,
            hi: if b + 1 == bins {
                hi
            } else {
                lo + (b + 1) as f64 * width
            },
            count: 0,
        })
        .collect();
    for &v in values {
        if v < lo || v > hi {
            continue;
        }
        let b = (((v - lo) / width) as usize).min(bins - 1);
        out[b].count += 1;
    }
    Ok(out)
}

pub fn write_histogram_csv<W: Write>(w: &mut W, bins: &[Bin]) -> std::io::Result<()> {
    writeln!(w, "bin_lo,bin_hi,count")?;
    for b in bins {
        writeln!(w, "{:?},{:?},{}", b.lo, b.hi, b.count)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from;

    fn row_close(a: &[f64], b: &[f64]) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn identity_queries_and_keys() {
        let i2 = DenseMatrix::identity(2);
        let a = dense_attention(&i2, &i2, &AttentionFn::Power(2.0)).unwrap();
        assert_eq!(a.matrix(), &i2);
    }

    #[test]
    fn squared_scores_by_hand() {
        let q = DenseMatrix::from_rows(&[[1.0, 1.0]]).unwrap();
        let k = DenseMatrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]).unwrap();
        let a = dense_attention(&q, &k, &AttentionFn::Power(2.0)).unwrap();
        assert!(row_close(a.row(0), &[1.0 / 6.0, 1.0 / 6.0, 4.0 / 6.0]));
    }

    #[test]
    fn absolute_value_scores() {
        let e = 0.1;
        let q = DenseMatrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let k = DenseMatrix::from_rows(&[[e, 0.0], [1.0, 0.0], [0.0, 1.0]]).unwrap();
        let a = dense_attention(&q, &k, &AttentionFn::Power(1.0)).unwrap();
        assert!(row_close(a.row(0), &[e / (1.0 + e), 1.0 / (1.0 + e), 0.0]));
    }

    #[test]
    fn degenerate_rows_flagged() {
        let q = DenseMatrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap();
        let k = DenseMatrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let a = dense_attention(&q, &k, &AttentionFn::Power(2.0)).unwrap();
        assert_eq!(a.degenerate_rows(), &[true, false]);
        assert_eq!(a.row(0), &[0.0]);
    }

    #[test]
    fn size_cap() {
        let q = DenseMatrix::zeros(5, 1);
        assert!(matches!(
            dense_attention_capped(&q, &q, &AttentionFn::Power(2.0), 4),
            Err(Error::SizeCap { .. })
        ));
    }

    #[test]
    fn gap_with_polynomial_map_is_fourth_power() {
        let mut rng = rng_from(1);
        let q = DenseMatrix::gaussian(6, 3, 1.0, &mut rng);
        let k = DenseMatrix::gaussian(9, 3, 1.0, &mut rng);
        let lifted =
            dense_attention(&q, &k, &AttentionFn::symmetric(FeatureMap::Polynomial(2))).unwrap();
        let direct = dense_attention(&q, &k, &AttentionFn::Power(4.0)).unwrap();
        for (x, y) in lifted.matrix().data().iter().zip(direct.matrix().data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn values_product() {
        let a = AttentionMatrix::from_matrix(DenseMatrix::identity(3)).unwrap();
        let v = DenseMatrix::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]).unwrap();
        assert_eq!(apply_values(&a, &v).unwrap(), v);
        let bad = DenseMatrix::zeros(2, 2);
        assert!(apply_values(&a, &bad).is_err());
    }

    #[test]
    fn top_k_examples() {
        let uniform =
            AttentionMatrix::from_matrix(DenseMatrix::new(1, 100, vec![0.01; 100]).unwrap())
                .unwrap();
        assert!((top_k_mass(&uniform, 32).unwrap()[0] - 0.32).abs() < 1e-12);
        assert!((top_k_mass(&uniform, 100).unwrap()[0] - 1.0).abs() < 1e-12);
        let mut one_hot = vec![0.0; 10];
        one_hot[7] = 1.0;
        let a = AttentionMatrix::from_matrix(DenseMatrix::new(1, 10, one_hot).unwrap()).unwrap();
        assert_eq!(top_k_mass(&a, 1).unwrap(), vec![1.0]);
        assert!(top_k_mass(&a, 0).is_err());
        assert!(top_k_mass(&a, 11).is_err());
    }

    #[test]
    fn grid_neighbor_count() {
        let g = GridSpec {
            side: 14,
            radius: 3,
            class_token: None,
        };
        let center = 7 * 14 + 7;
        assert_eq!((0..196).filter(|&j| g.is_neighbor(center, j)).count(), 25);
        let corner = 0;
        assert_eq!((0..196).filter(|&j| g.is_neighbor(corner, j)).count(), 10);
    }

    #[test]
    fn class_token_neighbors_everything() {
        let g = GridSpec {
            side: 14,
            radius: 0,
            class_token: Some(0),
        };
        assert_eq!(g.tokens(), 197);
        assert!((0..197).all(|j| g.is_neighbor(0, j) && g.is_neighbor(j, 0)));
        // token 1 is patch (0,0), token 2 is patch (0,1)
        assert!(g.is_neighbor(1, 1));
        assert!(!g.is_neighbor(1, 2));
    }

    #[test]
    fn local_mass_limits() {
        let mut rng = rng_from(3);
        let q = DenseMatrix::gaussian(16, 4, 1.0, &mut rng);
        let k = DenseMatrix::gaussian(16, 4, 1.0, &mut rng);
        let a = dense_attention(&q, &k, &AttentionFn::Power(2.0)).unwrap();
        let wide = Adjacency::Grid(GridSpec {
            side: 4,
            radius: 6,
            class_token: None,
        });
        for m in local_mass(&a, &wide).unwrap() {
            assert!((m - 1.0).abs() < 1e-12);
        }
        let tight = Adjacency::Grid(GridSpec {
            side: 4,
            radius: 0,
            class_token: None,
        });
        for (i, m) in local_mass(&a, &tight).unwrap().into_iter().enumerate() {
            assert_eq!(m, a.get(i, i));
        }
        let wrong = Adjacency::Grid(GridSpec {
            side: 5,
            radius: 0,
            class_token: None,
        });
        assert!(local_mass(&a, &wrong).is_err());
    }

    #[test]
    fn important_keys_examples() {
        let a = AttentionMatrix::from_matrix(DenseMatrix::identity(9)).unwrap();
        let adj = Adjacency::Grid(GridSpec {
            side: 3,
            radius: 0,
            class_token: None,
        });
        let imp = important_keys(&a, &adj, 3).unwrap();
        assert_eq!(imp.keys, vec![0, 1, 2]);
        assert!(imp.weights.iter().all(|&w| w == 0.0));

        // every row sends half its mass to key 5
        let mut data = vec![0.0; 81];
        for i in 0..9 {
            data[i * 9 + i] += 0.5;
            data[i * 9 + 5] += 0.5;
        }
        let a = AttentionMatrix::from_matrix(DenseMatrix::new(9, 9, data).unwrap()).unwrap();
        assert_eq!(important_keys(&a, &adj, 1).unwrap().keys, vec![5]);
        assert!(important_keys(&a, &adj, 0).is_err());
    }

    #[test]
    fn histogram_bins() {
        let bins = histogram(&[0.0, 0.1, 0.5, 1.0, 1.5], 2, 0.0, 1.0).unwrap();
        assert_eq!(bins.iter().map(|b| b.count).collect::<Vec<_>>(), vec![2, 2]);
        let mut buf = Vec::new();
        write_histogram_csv(&mut buf, &bins).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "bin_lo,bin_hi,count\n0.0,0.5,2\n0.5,1.0,2\n"
        );
    }
}
