//! Universal sets: key indices that contain every heavy attention score for
//! every possible query.
//!
//! Three routes build the set:
//!
//! * `|x|^2`: rows with leverage score at least `epsilon`; at most `d/epsilon` rows.
//! * `|x|^p`, any `p >= 1`: rows whose Lewis-weight sensitivity bound is at
//!   least `epsilon/slack`. For even `p` the rows can instead be lifted to
//!   their `p/2`-fold tensor power and thresholded by leverage there.
//! * `<psi(q), phi(k)>^2`: lift the keys with `phi`, then threshold leverage.
//!   The query map plays no role in the set.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg::{khatri_rao_row_power, lift_matrix, lifted_dim, DenseMatrix, DEFAULT_LIFT_CAP};
use crate::oracle::{dense_attention, AttentionFn};
use crate::sensitivity::{leverage_scores, sensitivity_upper_bounds, upper_bound_scale};

/// Relative slack on every `score >= epsilon` comparison, so that the batch,
/// streaming and distributed paths agree on rows sitting exactly at the
/// threshold. It can only enlarge a set.
pub const THRESHOLD_RTOL: f64 = 1e-12;

pub fn meets_threshold(score: f64, epsilon: f64) -> bool {
    score >= epsilon * (1.0 - THRESHOLD_RTOL)
}

pub(crate) fn check_epsilon(epsilon: f64) -> Result<()> {
    if epsilon > 0.0 && epsilon <= 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(
            "epsilon",
            format!("must lie in (0, 1], got {epsilon}"),
        ))
    }
}

pub type RowMap = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

#[derive(Clone)]
pub enum FeatureMap {
    Identity,
    /// `h`-fold Khatri-Rao power of the row, `d -> d^h`.
    Polynomial(usize),
    /// Arbitrary row transform with a fixed output dimension. This is also the
    /// hook for finite-dimensional approximations of softmax kernels.
    Custom {
        name: String,
        output_dim: usize,
        map: RowMap,
    },
}

impl fmt::Debug for FeatureMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureMap::Identity => write!(f, "Identity"),
            FeatureMap::Polynomial(h) => write!(f, "Polynomial({h})"),
            FeatureMap::Custom {
                name, output_dim, ..
            } => write!(f, "Custom({name}, dim {output_dim})"),
        }
    }
}

impl fmt::Display for FeatureMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureMap::Identity => write!(f, "identity"),
            FeatureMap::Polynomial(h) => write!(f, "poly:{h}"),
            FeatureMap::Custom { name, .. } => write!(f, "custom:{name}"),
        }
    }
}

impl FromStr for FeatureMap {
    type Err = Error;

    /// `identity` or `poly:h`.
    fn from_str(s: &str) -> Result<Self> {
        if s == "identity" {
            return Ok(FeatureMap::Identity);
        }
        let h = s
            .strip_prefix("poly:")
            .and_then(|h| h.parse::<usize>().ok())
            .filter(|&h| h >= 1)
            .ok_or_else(|| {
                Error::invalid(
                    "feature-map",
                    format!("expected `identity` or `poly:h`, got `{s}`"),
                )
            })?;
        Ok(FeatureMap::Polynomial(h))
    }
}

impl FeatureMap {
    pub fn custom<F>(name: impl Into<String>, output_dim: usize, map: F) -> Self
    where
        F: Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    {
        FeatureMap::Custom {
            name: name.into(),
            output_dim,
            map: Arc::new(map),
        }
    }

    pub fn output_dim(&self, d: usize) -> Result<usize> {
        match self {
            FeatureMap::Identity => Ok(d),
            FeatureMap::Polynomial(h) => lifted_dim(d, *h, DEFAULT_LIFT_CAP),
            FeatureMap::Custom { output_dim, .. } => Ok(*output_dim),
        }
    }

    pub fn apply(&self, row: &[f64]) -> Result<Vec<f64>> {
        match self {
            FeatureMap::Identity => Ok(row.to_vec()),
            FeatureMap::Polynomial(h) => khatri_rao_row_power(row, *h, DEFAULT_LIFT_CAP),
            FeatureMap::Custom {
                output_dim,
                map,
                name,
            } => {
                let out = map(row);
                if out.len() != *output_dim {
                    return Err(Error::invalid(
                        "feature-map",
                        format!(
                            "`{name}` returned {} values, declared {output_dim}",
                            out.len()
                        ),
                    ));
                }
                Ok(out)
            }
        }
    }

    pub fn apply_matrix(&self, k: &DenseMatrix) -> Result<DenseMatrix> {
        match self {
            FeatureMap::Identity => Ok(k.clone()),
            FeatureMap::Polynomial(h) => lift_matrix(k, *h, DEFAULT_LIFT_CAP),
            FeatureMap::Custom { .. } => {
                let dim = self.output_dim(k.cols())?;
                let mut data = Vec::with_capacity(k.rows() * dim);
                for row in k.iter_rows() {
                    data.extend(self.apply(row)?);
                }
                DenseMatrix::new(k.rows(), dim, data)
            }
        }
    }
}

/// How a universal set for `|x|^p` is derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PowerRoute {
    /// Leverage scores for `p = 2`, Lewis-weight bounds otherwise.
    #[default]
    Auto,
    /// Lewis-weight sensitivity bounds with a slack factor.
    Lewis,
    /// Leverage scores of the `p/2`-fold Khatri-Rao lift; even `p` only.
    Lift,
}

impl FromStr for PowerRoute {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(PowerRoute::Auto),
            "lewis" => Ok(PowerRoute::Lewis),
            "lift" => Ok(PowerRoute::Lift),
            other => Err(Error::invalid(
                "route",
                format!("expected auto|lewis|lift, got `{other}`"),
            )),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BuildOptions {
    pub route: PowerRoute,
    /// Lewis thresholds are lowered to `epsilon / slack`.
    pub slack: f64,
    pub lewis_tol: f64,
    pub lewis_max_iter: usize,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            route: PowerRoute::Auto,
            slack: 2.0,
            lewis_tol: 1e-10,
            lewis_max_iter: 2000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SetEstimator {
    Leverage,
    LewisBound,
    LiftedLeverage,
    FeatureMapLeverage,
}

impl SetEstimator {
    pub fn as_str(self) -> &'static str {
        match self {
            SetEstimator::Leverage => "leverage",
            SetEstimator::LewisBound => "lewis-bound",
            SetEstimator::LiftedLeverage => "lifted-leverage",
            SetEstimator::FeatureMapLeverage => "feature-map-leverage",
        }
    }
}

impl FromStr for SetEstimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "leverage" => Ok(SetEstimator::Leverage),
            "lewis-bound" => Ok(SetEstimator::LewisBound),
            "lifted-leverage" => Ok(SetEstimator::LiftedLeverage),
            "feature-map-leverage" => Ok(SetEstimator::FeatureMapLeverage),
            other => Err(Error::Format(format!("unknown set estimator `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UniversalSet {
    /// Sorted, distinct key indices.
    pub indices: Vec<usize>,
    pub epsilon: f64,
    /// Size certificate: `|indices| <= budget`.
    pub budget: f64,
    pub estimator: SetEstimator,
    /// Estimator score of each kept index, aligned with `indices`.
    pub scores: Vec<f64>,
    /// Threshold applied to the scores (`epsilon`, or `epsilon/slack`).
    pub threshold: f64,
}

impl UniversalSet {
    /// Keeps every row whose score meets `threshold`.
    pub(crate) fn from_scores(
        scores: &[f64],
        epsilon: f64,
        threshold: f64,
        budget: f64,
        estimator: SetEstimator,
    ) -> Self {
        let (indices, kept): (Vec<usize>, Vec<f64>) = scores
            .iter()
            .enumerate()
            .filter(|&(_, &s)| meets_threshold(s, threshold))
            .map(|(i, &s)| (i, s))
            .unzip();
        Self {
            indices,
            epsilon,
            budget,
            estimator,
            scores: kept,
            threshold,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, j: usize) -> bool {
        self.indices.binary_search(&j).is_ok()
    }

    /// `# epsilon budget estimator`, then one index per line.
    pub fn write_text<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(
            w,
            "# {:?} {:?} {}",
            self.epsilon,
            self.budget,
            self.estimator.as_str()
        )?;
        for i in &self.indices {
            writeln!(w, "{i}")?;
        }
        Ok(())
    }

    /// Reads the text format; per-index scores are not stored and come back empty.
    pub fn read_text<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty universal set file".into()))??;
        let fields: Vec<&str> = header
            .trim()
            .strip_prefix('#')
            .ok_or_else(|| Error::Format("missing `# epsilon budget estimator` header".into()))?
            .split_whitespace()
            .collect();
        let [eps, budget, est] = fields.as_slice() else {
            return Err(Error::Format(
                "header needs `epsilon budget estimator`".into(),
            ));
        };
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| Error::Format(format!("`{s}`: {e}")))
        };
        let epsilon = num(eps)?;
        let mut indices = Vec::new();
        for line in lines {
            let line = line?;
            let t = line.trim();
            if t.is_empty() {
                continue;
            }
            indices.push(
                t.parse::<usize>()
                    .map_err(|e| Error::Format(format!("index `{t}`: {e}")))?,
            );
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Format("indices must be strictly increasing".into()));
        }
        Ok(Self {
            indices,
            epsilon,
            budget: num(budget)?,
            estimator: est.parse()?,
            scores: Vec::new(),
            threshold: epsilon,
        })
    }
}

fn even_half(p: f64) -> Option<usize> {
    (p >= 2.0 && p.fract() == 0.0 && (p as usize).is_multiple_of(2)).then_some(p as usize / 2)
}

/// Builds the universal set of `k` for attention function `f`.
pub fn build_universal_set(
    k: &DenseMatrix,
    epsilon: f64,
    f: &AttentionFn,
    opts: &BuildOptions,
) -> Result<UniversalSet> {
    check_epsilon(epsilon)?;
    let d = k.cols();
    match f {
        AttentionFn::Power(p) => {
            let p = *p;
            if !(p.is_finite() && p >= 1.0) {
                return Err(Error::invalid(
                    "p",
                    format!("must be finite and >= 1, got {p}"),
                ));
            }
            let route = match opts.route {
                PowerRoute::Auto if p == 2.0 => None,
                PowerRoute::Auto | PowerRoute::Lewis => Some(PowerRoute::Lewis),
                PowerRoute::Lift => Some(PowerRoute::Lift),
            };
            match route {
                None => {
                    let lev = leverage_scores(k);
                    Ok(UniversalSet::from_scores(
                        &lev.scores,
                        epsilon,
                        epsilon,
                        d as f64 / epsilon,
                        SetEstimator::Leverage,
                    ))
                }
                Some(PowerRoute::Lift) => {
                    let h = even_half(p).ok_or_else(|| {
                        Error::invalid(
                            "p",
                            format!("the lift route needs an even integer p, got {p}"),
                        )
                    })?;
                    let lifted = lift_matrix(k, h, DEFAULT_LIFT_CAP)?;
                    let lev = leverage_scores(&lifted);
                    Ok(UniversalSet::from_scores(
                        &lev.scores,
                        epsilon,
                        epsilon,
                        lifted.cols() as f64 / epsilon,
                        SetEstimator::LiftedLeverage,
                    ))
                }
                Some(_) => {
                    if !(opts.slack >= 1.0 && opts.slack.is_finite()) {
                        return Err(Error::invalid(
                            "slack",
                            format!("must be >= 1, got {}", opts.slack),
                        ));
                    }
                    let bounds =
                        sensitivity_upper_bounds(k, p, opts.lewis_tol, opts.lewis_max_iter)?;
                    let threshold = epsilon / opts.slack;
                    let budget = opts.slack * (d as f64) * upper_bound_scale(d, p) / epsilon;
                    Ok(UniversalSet::from_scores(
                        &bounds.scores,
                        epsilon,
                        threshold,
                        budget,
                        SetEstimator::LewisBound,
                    ))
                }
            }
        }
        AttentionFn::Gap { key_map, .. } => {
            let lifted = key_map.apply_matrix(k)?;
            let lev = leverage_scores(&lifted);
            Ok(UniversalSet::from_scores(
                &lev.scores,
                epsilon,
                epsilon,
                lifted.cols() as f64 / epsilon,
                SetEstimator::FeatureMapLeverage,
            ))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub query: usize,
    pub key: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Default)]
pub struct CoverageReport {
    /// Heavy entries whose key is missing from the set.
    pub violations: Vec<Violation>,
    /// Entries with `A_ij >= epsilon + tolerance`.
    pub heavy_entries: usize,
    pub degenerate_queries: usize,
}

impl CoverageReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks `{j : A_ij >= epsilon} ⊆ U` for every query against the dense oracle.
/// Entries count as heavy when `A_ij >= epsilon + tolerance`.
pub fn coverage_check(
    k: &DenseMatrix,
    q: &DenseMatrix,
    epsilon: f64,
    f: &AttentionFn,
    set: &UniversalSet,
    tolerance: f64,
) -> Result<CoverageReport> {
    let a = dense_attention(q, k, f)?;
    let mut report = CoverageReport::default();
    for i in 0..a.rows() {
        if a.is_degenerate(i) {
            report.degenerate_queries += 1;
            continue;
        }
        for (j, &x) in a.row(i).iter().enumerate() {
            if x >= epsilon + tolerance {
                report.heavy_entries += 1;
                if !set.contains(j) {
                    report.violations.push(Violation {
                        query: i,
                        key: j,
                        score: x,
                    });
                }
            }
        }
    }
    Ok(report)
}
