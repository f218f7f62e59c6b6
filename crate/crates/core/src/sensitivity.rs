//! Per-row importance scores.
//!
//! For `f(x) = |x|^p` the f-sensitivity of row `i` is
//! `sup_y f(<K_i, y>) / sum_j f(<K_j, y>)`. For `p = 2` it is the leverage
//! score `K_i^T (K^T K)^+ K_i`. For other `p` the l_p Lewis weights `w`
//! bound it: `sigma_i <= w_i` when `p <= 2` and `sigma_i <= d^(p/2-1) w_i`
//! when `p > 2`.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{dot, DenseMatrix, Factorization, FactorizationKind, GramState, GRAM_RCOND};
use crate::seed::rng_from;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Estimator {
    Leverage,
    OnlineLeverage,
    Lewis,
    SensitivityUpperBound,
}

impl Estimator {
    pub fn as_str(self) -> &'static str {
        match self {
            Estimator::Leverage => "leverage",
            Estimator::OnlineLeverage => "online-leverage",
            Estimator::Lewis => "lewis",
            Estimator::SensitivityUpperBound => "sensitivity-upper-bound",
        }
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "leverage" => Ok(Estimator::Leverage),
            "online-leverage" => Ok(Estimator::OnlineLeverage),
            "lewis" => Ok(Estimator::Lewis),
            "sensitivity-upper-bound" => Ok(Estimator::SensitivityUpperBound),
            other => Err(Error::Format(format!("unknown estimator `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityVector {
    pub scores: Vec<f64>,
    pub estimator: Estimator,
    pub p: Option<f64>,
    pub iterations: Option<usize>,
    pub tolerance: Option<f64>,
    /// Final fixed-point residual for iterative estimators.
    pub residual: Option<f64>,
}

impl SensitivityVector {
    fn plain(scores: Vec<f64>, estimator: Estimator, p: Option<f64>) -> Self {
        Self {
            scores,
            estimator,
            p,
            iterations: None,
            tolerance: None,
            residual: None,
        }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.scores.iter().sum()
    }

    /// `# estimator p tol` header, then `index,score` per row.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let opt = |x: Option<f64>| x.map_or_else(|| "-".to_string(), |v| format!("{v:?}"));
        writeln!(
            w,
            "# {} {} {}",
            self.estimator,
            opt(self.p),
            opt(self.tolerance)
        )?;
        for (i, s) in self.scores.iter().enumerate() {
            writeln!(w, "{i},{s:?}")?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty sensitivity file".into()))??;
        let fields: Vec<&str> = header
            .trim()
            .strip_prefix('#')
            .ok_or_else(|| Error::Format("missing `# estimator p tol` header".into()))?
            .split_whitespace()
            .collect();
        let [est, p, tol] = fields.as_slice() else {
            return Err(Error::Format("header needs `estimator p tol`".into()));
        };
        let opt = |s: &str| -> Result<Option<f64>> {
            if s == "-" {
                Ok(None)
            } else {
                s.parse()
                    .map(Some)
                    .map_err(|e| Error::Format(format!("header value `{s}`: {e}")))
            }
        };
        let mut out = Self::plain(Vec::new(), est.parse()?, opt(p)?);
        out.tolerance = opt(tol)?;
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let (idx, score) = line
                .split_once(',')
                .ok_or_else(|| Error::Format(format!("expected `index,score`, got `{line}`")))?;
            let idx: usize = idx
                .trim()
                .parse()
                .map_err(|e| Error::Format(format!("index: {e}")))?;
            if idx != out.scores.len() {
                return Err(Error::Format(format!(
                    "indices must be consecutive, got {idx}"
                )));
            }
            out.scores.push(
                score
                    .trim()
                    .parse()
                    .map_err(|e| Error::Format(format!("score: {e}")))?,
            );
        }
        Ok(out)
    }
}

/// Exact leverage scores through the accumulated Gram.
///
/// The Gram is summed in row order, which makes the result bit-identical to
/// the streaming and two-pass paths over the same rows.
pub fn leverage_scores(k: &DenseMatrix) -> SensitivityVector {
    let fact = Factorization::from_gram(&GramState::from_matrix(k));
    leverage_with(&fact, k)
}

pub(crate) fn leverage_with(fact: &Factorization, k: &DenseMatrix) -> SensitivityVector {
    let scores = k
        .iter_rows()
        .map(|r| {
            fact.pinv_quadratic_form(r)
                .expect("factorization built from the same matrix")
                .clamp(0.0, 1.0)
        })
        .collect();
    SensitivityVector::plain(scores, Estimator::Leverage, Some(2.0))
}

/// Leverage scores in one shot from a QR or SVD of the full `n x d` matrix,
/// as squared row norms of the orthonormal left factor.
pub fn leverage_scores_direct(k: &DenseMatrix, kind: FactorizationKind) -> SensitivityVector {
    let fact = match kind {
        FactorizationKind::OrthogonalTriangular => Factorization::qr(k, true),
        FactorizationKind::SingularValue => Factorization::svd(k, true),
        FactorizationKind::GramEigen => return leverage_scores(k),
    };
    let scores = fact
        .row_leverage()
        .unwrap_or_else(|| vec![0.0; k.rows()])
        .into_iter()
        .map(|s| s.clamp(0.0, 1.0))
        .collect();
    SensitivityVector::plain(scores, Estimator::Leverage, Some(2.0))
}

/// Online leverage scores of a row stream.
///
/// Row `j` is scored against the Gram of rows `0..j`. A row with a
/// component outside the span of the previous rows scores 1 (this includes
/// the first nonzero row); all scores are capped at 1. With `ridge > 0`
/// the score is `x^T (G + ridge I)^{-1} x`, capped at 1.
#[derive(Debug, Clone)]
pub struct OnlineLeverage {
    gram: GramState,
    ridge: f64,
}

impl OnlineLeverage {
    pub fn new(dim: usize, ridge: f64) -> Result<Self> {
        if !(ridge >= 0.0 && ridge.is_finite()) {
            return Err(Error::invalid(
                "ridge",
                format!("must be finite and >= 0, got {ridge}"),
            ));
        }
        Ok(Self {
            gram: GramState::new(dim),
            ridge,
        })
    }

    pub fn gram(&self) -> &GramState {
        &self.gram
    }

    pub fn into_gram(self) -> GramState {
        self.gram
    }

    /// Score of `row` against the rows absorbed so far.
    pub fn score(&self, row: &[f64]) -> Result<f64> {
        let d = self.gram.dim();
        if row.len() != d {
            return Err(Error::dim("online leverage", d, row.len()));
        }
        if row.iter().all(|&x| x == 0.0) {
            return Ok(0.0);
        }
        if self.ridge > 0.0 {
            let mut entries = self.gram.entries().to_vec();
            for i in 0..d {
                entries[i * d + i] += self.ridge;
            }
            let shifted = GramState::from_entries(d, entries, self.gram.count())?;
            let q = Factorization::from_gram(&shifted).pinv_quadratic_form(row)?;
            return Ok(q.min(1.0));
        }
        let fact = Factorization::from_gram(&self.gram);
        if fact.rank() == 0 {
            return Ok(1.0);
        }
        if fact.out_of_span_sq(row)? > GRAM_RCOND * fact.lambda_max() {
            return Ok(1.0);
        }
        Ok(fact.pinv_quadratic_form(row)?.min(1.0))
    }

    pub fn absorb(&mut self, row: &[f64]) -> Result<()> {
        self.gram.accumulate(row)
    }

    /// Scores `row`, then adds it to the prefix.
    pub fn push(&mut self, row: &[f64]) -> Result<f64> {
        let s = self.score(row)?;
        self.absorb(row)?;
        Ok(s)
    }
}

/// Online leverage scores of `rows` in the given order.
pub fn online_leverage_scores<I, R>(dim: usize, rows: I, ridge: f64) -> Result<SensitivityVector>
where
    I: IntoIterator<Item = R>,
    R: AsRef<[f64]>,
{
    let mut state = OnlineLeverage::new(dim, ridge)?;
    let scores = rows
        .into_iter()
        .map(|r| state.push(r.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    Ok(SensitivityVector::plain(
        scores,
        Estimator::OnlineLeverage,
        Some(2.0),
    ))
}

/// Step size of the log-space Lewis update `w <- w^(1-a) T(w)^a`, where
/// `T_i(w) = (K_i^T (K^T W^(1-2/p) K)^+ K_i)^(p/2)`. The undamped map
/// contracts only for `p < 4`; `a = 4/(p+2)` contracts for every `p >= 4`.
pub fn lewis_step(p: f64) -> f64 {
    if p < 4.0 {
        1.0
    } else {
        4.0 / (p + 2.0)
    }
}

struct LewisEval {
    /// `K_i^T M(w)^+ K_i`
    quad: Vec<f64>,
    /// leverage scores of `W^(1/2-1/p) K`
    rescaled_leverage: Vec<f64>,
}

fn lewis_eval(k: &DenseMatrix, w: &[f64], p: f64) -> LewisEval {
    let exponent = 1.0 - 2.0 / p;
    let mut gram = GramState::new(k.cols());
    let mut scaled = vec![0.0; k.cols()];
    for (row, &wi) in k.iter_rows().zip(w) {
        if wi <= 0.0 {
            continue;
        }
        let s = wi.powf(exponent / 2.0);
        for (dst, &x) in scaled.iter_mut().zip(row) {
            *dst = s * x;
        }
        gram.accumulate(&scaled).expect("same dimension");
    }
    let fact = Factorization::from_gram(&gram);
    let quad: Vec<f64> = k
        .iter_rows()
        .map(|r| fact.pinv_quadratic_form(r).expect("same dimension"))
        .collect();
    let rescaled_leverage = quad
        .iter()
        .zip(w)
        .map(|(&q, &wi)| {
            if wi <= 0.0 {
                0.0
            } else {
                wi.powf(exponent) * q
            }
        })
        .collect();
    LewisEval {
        quad,
        rescaled_leverage,
    }
}

/// l_p Lewis weights by a residual-certified fixed-point iteration.
///
/// Returns weights `w` with `max_i |w_i - tau_i(W^(1/2-1/p) K)| <= tol`.
/// `iterations` counts weight updates; for `p = 2` a single update lands on
/// the leverage scores.
pub fn lewis_weights(
    k: &DenseMatrix,
    p: f64,
    tol: f64,
    max_iter: usize,
) -> Result<SensitivityVector> {
    if !(p.is_finite() && p >= 1.0) {
        return Err(Error::invalid(
            "p",
            format!("must be finite and >= 1, got {p}"),
        ));
    }
    if !(tol > 0.0) {
        return Err(Error::invalid("tol", format!("must be > 0, got {tol}")));
    }
    let n = k.rows();
    let finish = |scores: Vec<f64>, iterations: usize, residual: f64| SensitivityVector {
        scores,
        estimator: Estimator::Lewis,
        p: Some(p),
        iterations: Some(iterations),
        tolerance: Some(tol),
        residual: Some(residual),
    };
    if n == 0 {
        return Ok(finish(Vec::new(), 0, 0.0));
    }
    let step = lewis_step(p);
    let mut w = vec![k.cols() as f64 / n as f64; n];
    let mut updates = 0;
    loop {
        let eval = lewis_eval(k, &w, p);
        let residual = w
            .iter()
            .zip(&eval.rescaled_leverage)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        // at least one update, so p = 2 always lands on leverage scores
        if updates > 0 && residual <= tol {
            return Ok(finish(w, updates, residual));
        }
        if updates == max_iter {
            return Err(Error::NoConvergence {
                iterations: updates,
                residual,
            });
        }
        for (wi, &q) in w.iter_mut().zip(&eval.quad) {
            let target = q.max(0.0).powf(p / 2.0);
            *wi = if target == 0.0 || *wi <= 0.0 || step == 1.0 {
                target
            } else {
                wi.powf(1.0 - step) * target.powf(step)
            };
        }
        updates += 1;
    }
}

/// Largest fixed-point residual of `w` as Lewis weights of `k`.
pub fn lewis_residual(k: &DenseMatrix, w: &[f64], p: f64) -> f64 {
    let eval = lewis_eval(k, w, p);
    w.iter()
        .zip(&eval.rescaled_leverage)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

/// Scale turning Lewis weights into |x|^p sensitivity bounds: 1 for `p <= 2`,
/// `d^(p/2 - 1)` above.
pub fn upper_bound_scale(d: usize, p: f64) -> f64 {
    if p <= 2.0 {
        1.0
    } else {
        (d as f64).powf(p / 2.0 - 1.0)
    }
}

/// Upper bounds on the |x|^p sensitivities from Lewis weights.
pub fn sensitivity_upper_bounds(
    k: &DenseMatrix,
    p: f64,
    tol: f64,
    max_iter: usize,
) -> Result<SensitivityVector> {
    let mut v = lewis_weights(k, p, tol, max_iter)?;
    let scale = upper_bound_scale(k.cols(), p);
    for s in &mut v.scores {
        *s *= scale;
    }
    v.estimator = Estimator::SensitivityUpperBound;
    Ok(v)
}

fn power_ratio(k: &DenseMatrix, i: usize, y: &[f64], p: f64) -> Option<f64> {
    let f = |x: f64| x.abs().powf(p);
    let total: f64 = k.iter_rows().map(|r| f(dot(r, y))).sum();
    if total > 0.0 {
        Some(f(dot(k.row(i), y)) / total)
    } else {
        None
    }
}

/// Certified lower bound on the |x|^p sensitivity of row `i`.
///
/// Evaluates the ratio at `y = K_i`, at `y = (K^T K)^+ K_i` (the exact
/// maximizer for `p = 2`), at `trials` Gaussian directions, and along a
/// `trials`-step random local search from the best of those. Every value is
/// attained by some `y`, so the result never exceeds the true supremum.
pub fn sensitivity_oracle(
    k: &DenseMatrix,
    i: usize,
    p: f64,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    if i >= k.rows() {
        return Err(Error::invalid(
            "i",
            format!("row {i} out of range for {} rows", k.rows()),
        ));
    }
    if !(p.is_finite() && p > 0.0) {
        return Err(Error::invalid(
            "p",
            format!("must be finite and > 0, got {p}"),
        ));
    }
    let ki = k.row(i);
    if ki.iter().all(|&x| x == 0.0) {
        return Ok(0.0);
    }
    let d = k.cols();
    let fact = Factorization::from_gram(&GramState::from_matrix(k));
    let mut pinv_dir = vec![0.0; d];
    for (vi, s) in fact.right_vectors().iter_rows().zip(fact.singular_values()) {
        let c = dot(vi, ki) / (s * s);
        for (t, &v) in pinv_dir.iter_mut().zip(vi) {
            *t += c * v;
        }
    }
    let mut best = 0.0_f64;
    let mut best_y = ki.to_vec();
    for y in [ki.to_vec(), pinv_dir] {
        if let Some(r) = power_ratio(k, i, &y, p) {
            if r > best {
                best = r;
                best_y = y;
            }
        }
    }
    let mut rng = rng_from(seed);
    let gaussian = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
        (0..d).map(|_| StandardNormal.sample(rng)).collect()
    };
    for _ in 0..trials {
        let y = gaussian(&mut rng);
        if let Some(r) = power_ratio(k, i, &y, p) {
            if r > best {
                best = r;
                best_y = y;
            }
        }
    }
    let mut step = 0.5;
    for _ in 0..trials {
        let scale = step * dot(&best_y, &best_y).sqrt();
        let y: Vec<f64> = best_y
            .iter()
            .zip(gaussian(&mut rng))
            .map(|(b, g)| b + scale * g / (d as f64).sqrt())
            .collect();
        match power_ratio(k, i, &y, p) {
            Some(r) if r > best => {
                best = r;
                best_y = y;
            }
            _ => step *= 0.97,
        }
    }
    Ok(best)
}
