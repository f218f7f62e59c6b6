//! Planted key/query model and sublinear relevant-key recovery.
//!
//! A set `S` of keys stands out: keys in `S` are nearly orthogonal to each
//! other (correlation at most `delta1`) and to every key outside `S`
//! (at most `delta2`). A query is a positively weighted sum of a hidden
//! subset `S(q)` of `S` plus small noise. Every key of `S` then has a large
//! self-attention ratio `A_ii^2 / sum_j A_ij^2 >= rho`, so the candidate set
//! `U' = {i : ratio_i >= rho}` contains `S`, and a single threshold test on
//! `q K_i^T` over `U'` recovers `S(q)` exactly.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::RngExt;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{dot, gaussian_sketch, norm_sq, DenseMatrix};
use crate::seed::{derive_seed, rng_from};

pub const DEFAULT_MAX_ATTEMPTS: usize = 50;
pub const DEFAULT_THRESHOLD_FACTOR: f64 = 2.0;
pub const DEFAULT_NOISE_FRACTION: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantedParams {
    pub n: usize,
    pub d: usize,
    /// Dimension of the latent subspace holding the keys of `S`.
    pub k: usize,
    /// Fraction of keys in `S`.
    pub eps0: f64,
    /// Leakage variance between the two coordinate blocks.
    pub eps1: f64,
    pub delta1: f64,
    pub delta2: f64,
}

impl PlantedParams {
    pub fn validate(&self) -> Result<()> {
        let p = self;
        if p.n == 0 || p.d == 0 {
            return Err(Error::invalid("n/d", "must be positive"));
        }
        if p.k == 0 || 4 * p.k > p.d {
            return Err(Error::invalid(
                "k",
                format!("need 1 <= k <= d/4, got k={} d={}", p.k, p.d),
            ));
        }
        if !(p.delta2 > 0.0 && p.delta2 <= p.delta1 && p.delta1 <= 0.25) {
            return Err(Error::invalid(
                "delta",
                format!(
                    "need 0 < delta2 <= delta1 <= 1/4, got {} and {}",
                    p.delta1, p.delta2
                ),
            ));
        }
        if p.delta1 < 4.0 / p.k as f64 {
            return Err(Error::invalid(
                "delta1",
                format!("need delta1 >= 4/k = {}", 4.0 / p.k as f64),
            ));
        }
        if !(p.eps1 > 0.0 && p.eps1 <= 1.0) {
            return Err(Error::invalid(
                "eps1",
                format!("must lie in (0, 1], got {}", p.eps1),
            ));
        }
        if p.delta2 < 4.0 * p.eps1 / p.k as f64 {
            return Err(Error::invalid(
                "delta2",
                format!("need delta2 >= 4 eps1/k = {}", 4.0 * p.eps1 / p.k as f64),
            ));
        }
        if !(p.eps0 > 0.0 && p.eps0 <= 1.0) || self.planted_count() == 0 {
            return Err(Error::invalid(
                "eps0",
                format!("eps0 * n must round to at least 1, got {}", p.eps0),
            ));
        }
        Ok(())
    }

    /// `|S| = round(eps0 * n)`.
    pub fn planted_count(&self) -> usize {
        ((self.eps0 * self.n as f64).round() as usize).min(self.n)
    }
}

/// Worst normalized correlation for one of the two separation conditions.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct WorstPair {
    /// `|K_a K_b^T| / min(|K_a|^2, |K_b|^2)`.
    pub ratio: f64,
    pub rows: (usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Verification {
    /// Pairs inside `S`; bounded by `delta1`.
    pub within: WorstPair,
    /// Pairs across `S` and its complement; bounded by `delta2`.
    pub across: WorstPair,
    pub delta1: f64,
    pub delta2: f64,
    pub attempts: usize,
}

impl Verification {
    pub fn within_ok(&self) -> bool {
        self.within.ratio <= self.delta1
    }

    pub fn across_ok(&self) -> bool {
        self.across.ratio <= self.delta2
    }

    pub fn passed(&self) -> bool {
        self.within_ok() && self.across_ok()
    }

    fn to_error(self) -> Error {
        let (check, worst, bound) = if !self.within_ok() {
            (1, self.within, self.delta1)
        } else {
            (2, self.across, self.delta2)
        };
        Error::PlantedVerification {
            check,
            attempts: self.attempts,
            row_a: worst.rows.0,
            row_b: worst.rows.1,
            ratio: worst.ratio,
            bound,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlantedInstance {
    pub keys: DenseMatrix,
    /// Sorted indices of `S`.
    pub planted: Vec<usize>,
    pub delta1: f64,
    pub delta2: f64,
    /// Generator parameters, when the instance was drawn.
    pub params: Option<PlantedParams>,
    pub norms_sq: Vec<f64>,
    pub verification: Verification,
}

fn normalized_corr(k: &DenseMatrix, norms: &[f64], a: usize, b: usize) -> f64 {
    let m = norms[a].min(norms[b]);
    let c = dot(k.row(a), k.row(b)).abs();
    if m > 0.0 {
        c / m
    } else if c == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

/// Largest normalized correlations inside `S` and across `S` and its complement.
pub fn verify_separation(
    k: &DenseMatrix,
    planted: &[usize],
    delta1: f64,
    delta2: f64,
) -> Verification {
    let norms: Vec<f64> = k.iter_rows().map(norm_sq).collect();
    let mut in_s = vec![false; k.rows()];
    for &j in planted {
        in_s[j] = true;
    }
    let mut within = WorstPair::default();
    let mut across = WorstPair::default();
    for (t, &j) in planted.iter().enumerate() {
        for &l in &planted[t + 1..] {
            let r = normalized_corr(k, &norms, j, l);
            if r > within.ratio {
                within = WorstPair {
                    ratio: r,
                    rows: (j, l),
                };
            }
        }
        let (r, l) = (0..k.rows())
            .into_par_iter()
            .filter(|&l| !in_s[l])
            .map(|l| (normalized_corr(k, &norms, j, l), l))
            .reduce(
                || (0.0, usize::MAX),
                |a, b| {
                    if b.0 > a.0 || (b.0 == a.0 && b.1 < a.1) {
                        b
                    } else {
                        a
                    }
                },
            );
        if r > across.ratio {
            across = WorstPair {
                ratio: r,
                rows: (j, l),
            };
        }
    }
    Verification {
        within,
        across,
        delta1,
        delta2,
        attempts: 1,
    }
}

impl PlantedInstance {
    /// Wraps a user-supplied key matrix and planted set.
    pub fn from_parts(
        keys: DenseMatrix,
        mut planted: Vec<usize>,
        delta1: f64,
        delta2: f64,
    ) -> Result<Self> {
        if !(delta2 > 0.0 && delta2 <= delta1 && delta1 <= 0.25) {
            return Err(Error::invalid("delta", "need 0 < delta2 <= delta1 <= 1/4"));
        }
        planted.sort_unstable();
        planted.dedup();
        if let Some(&bad) = planted.iter().find(|&&j| j >= keys.rows()) {
            return Err(Error::invalid(
                "planted",
                format!("index {bad} out of range for {} keys", keys.rows()),
            ));
        }
        let verification = verify_separation(&keys, &planted, delta1, delta2);
        Ok(Self {
            norms_sq: keys.iter_rows().map(norm_sq).collect(),
            keys,
            planted,
            delta1,
            delta2,
            params: None,
            verification,
        })
    }

    pub fn n(&self) -> usize {
        self.keys.rows()
    }

    /// `rho = 1 / (1 + delta1^2 |S| + delta2^2 n)`.
    pub fn rho(&self) -> f64 {
        1.0 / (1.0
            + self.delta1 * self.delta1 * self.planted.len() as f64
            + self.delta2 * self.delta2 * self.n() as f64)
    }

    /// Bound `|U'| <= d (1 + delta1^2 |S| + delta2^2 n)` on the candidate set.
    pub fn candidate_bound(&self) -> f64 {
        self.keys.cols() as f64 / self.rho()
    }

    pub fn contains(&self, j: usize) -> bool {
        self.planted.binary_search(&j).is_ok()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerateOptions {
    pub max_attempts: usize,
    /// Fail instead of returning the last unverified draw.
    pub require_verified: bool,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            max_attempts: DEFAULT_MAX_ATTEMPTS,
            require_verified: true,
        }
    }
}

fn draw_keys(p: &PlantedParams, seed: u64) -> (DenseMatrix, Vec<usize>) {
    let mut rng = rng_from(seed);
    let mut planted = sample(&mut rng, p.n, p.planted_count()).into_vec();
    planted.sort_unstable();
    let mut in_s = vec![false; p.n];
    for &j in &planted {
        in_s[j] = true;
    }
    let rest = (p.d - p.k) as f64;
    let k = p.k as f64;
    // variances: S rows (1/k, eps1/(d-k)); others (eps1/k, 1/(d-k))
    let sd = |var: f64| var.sqrt();
    let mut data = Vec::with_capacity(p.n * p.d);
    for &s in &in_s {
        let (head, tail) = if s {
            (sd(1.0 / k), sd(p.eps1 / rest))
        } else {
            (sd(p.eps1 / k), sd(1.0 / rest))
        };
        for c in 0..p.d {
            let z: f64 = StandardNormal.sample(&mut rng);
            data.push(z * if c < p.k { head } else { tail });
        }
    }
    (
        DenseMatrix::new(p.n, p.d, data).expect("finite Gaussian draws"),
        planted,
    )
}

/// Draws from the four-block Gaussian model until both separation conditions
/// hold, for at most `max_attempts` fresh seeds.
pub fn generate_stochastic(
    params: &PlantedParams,
    seed: u64,
    opts: &GenerateOptions,
) -> Result<PlantedInstance> {
    params.validate()?;
    if opts.max_attempts == 0 {
        return Err(Error::invalid("max-attempts", "must be at least 1"));
    }
    let mut last = None;
    for attempt in 0..opts.max_attempts {
        let (keys, planted) = draw_keys(
            params,
            derive_seed(seed, &format!("planted/attempt/{attempt}")),
        );
        let mut inst = PlantedInstance::from_parts(keys, planted, params.delta1, params.delta2)?;
        inst.params = Some(*params);
        inst.verification.attempts = attempt + 1;
        if inst.verification.passed() {
            return Ok(inst);
        }
        last = Some(inst);
    }
    let inst = last.expect("at least one attempt");
    if opts.require_verified {
        Err(inst.verification.to_error())
    } else {
        Ok(inst)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedQuery {
    pub q: Vec<f64>,
    /// Sorted hidden subset `S(q)`.
    pub subset: Vec<usize>,
    /// Weights aligned with `subset`.
    pub weights: Vec<f64>,
    pub noise: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueryCheck {
    pub weight_sum: f64,
    pub min_weight: f64,
    /// `max_l |z K_l^T| / ((delta1/4) |K_l|^2)`; at most 1 under the model.
    pub noise_ratio: f64,
    /// `|q - sum_j w_j K_j - z|_inf`.
    pub residual: f64,
    pub delta1: f64,
}

impl QueryCheck {
    pub fn passed(&self) -> bool {
        self.weight_sum <= 1.0 + 1e-12
            && self.min_weight >= 4.0 * self.delta1 * (1.0 - 1e-12)
            && self.noise_ratio <= 1.0
            && self.residual <= 1e-12
    }
}

fn noise_ratio(inst: &PlantedInstance, z: &[f64]) -> f64 {
    inst.keys
        .iter_rows()
        .zip(&inst.norms_sq)
        .filter(|(_, &n)| n > 0.0)
        .map(|(row, &n)| dot(z, row).abs() / (inst.delta1 / 4.0 * n))
        .fold(0.0, f64::max)
}

/// Draws `S(q)` uniformly from `S`, weights uniformly on `[4 delta1, 1/|S(q)|]`,
/// and Gaussian noise rescaled so its worst correlation uses `noise_fraction`
/// of the `delta1/4` budget.
pub fn generate_query(
    inst: &PlantedInstance,
    subset_size: usize,
    noise_fraction: f64,
    seed: u64,
) -> Result<PlantedQuery> {
    let lo = 4.0 * inst.delta1;
    if subset_size == 0 || subset_size > inst.planted.len() {
        return Err(Error::invalid(
            "subset-size",
            format!("must lie in 1..={}, got {subset_size}", inst.planted.len()),
        ));
    }
    let hi = 1.0 / subset_size as f64;
    if lo > hi * (1.0 + 1e-12) {
        return Err(Error::invalid(
            "subset-size",
            format!("{subset_size} keys with weight >= 4 delta1 = {lo} cannot sum to at most 1"),
        ));
    }
    if !(0.0..=1.0).contains(&noise_fraction) {
        return Err(Error::invalid(
            "noise-fraction",
            format!("must lie in [0, 1], got {noise_fraction}"),
        ));
    }
    let mut rng = rng_from(seed);
    let mut picks: Vec<usize> = sample(&mut rng, inst.planted.len(), subset_size)
        .into_iter()
        .map(|t| inst.planted[t])
        .collect();
    picks.sort_unstable();
    let weights: Vec<f64> = picks
        .iter()
        .map(|_| {
            if hi > lo {
                rng.random_range(lo..=hi)
            } else {
                lo.min(hi)
            }
        })
        .collect();
    let d = inst.keys.cols();
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let mut noise: Vec<f64> = (0..d).map(|_| unit.sample(&mut rng)).collect();
    let r = noise_ratio(inst, &noise);
    let scale = if r > 0.0 { noise_fraction / r } else { 0.0 };
    for z in &mut noise {
        *z *= scale;
    }
    let mut q = noise.clone();
    for (&j, &w) in picks.iter().zip(&weights) {
        for (qc, &kc) in q.iter_mut().zip(inst.keys.row(j)) {
            *qc += w * kc;
        }
    }
    Ok(PlantedQuery {
        q,
        subset: picks,
        weights,
        noise,
    })
}

pub fn verify_query(inst: &PlantedInstance, query: &PlantedQuery) -> QueryCheck {
    let mut rebuilt = query.noise.clone();
    for (&j, &w) in query.subset.iter().zip(&query.weights) {
        for (qc, &kc) in rebuilt.iter_mut().zip(inst.keys.row(j)) {
            *qc += w * kc;
        }
    }
    QueryCheck {
        weight_sum: query.weights.iter().sum(),
        min_weight: query.weights.iter().copied().fold(f64::INFINITY, f64::min),
        noise_ratio: noise_ratio(inst, &query.noise),
        residual: rebuilt
            .iter()
            .zip(&query.q)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max),
        delta1: inst.delta1,
    }
}

/// Smallest relevance margin `q K_j^T / |K_j|^2` over `S(q)` and largest
/// `|q K_l^T| / |K_l|^2` outside it, in units of `delta1`.
pub fn separation(inst: &PlantedInstance, query: &PlantedQuery) -> (f64, f64) {
    let mut relevant = f64::INFINITY;
    let mut other: f64 = 0.0;
    for (j, (row, &n)) in inst.keys.iter_rows().zip(&inst.norms_sq).enumerate() {
        if n == 0.0 {
            continue;
        }
        let r = dot(&query.q, row) / n / inst.delta1;
        if query.subset.binary_search(&j).is_ok() {
            relevant = relevant.min(r);
        } else {
            other = other.max(r.abs());
        }
    }
    (relevant, other)
}

/// `A_ii^2 / sum_j A_ij^2` with `A = K K^T`; 0 for a zero row.
pub fn self_attention_ratio(k: &DenseMatrix, i: usize) -> f64 {
    let ki = k.row(i);
    let aii = norm_sq(ki);
    if aii == 0.0 {
        return 0.0;
    }
    let total: f64 = k.iter_rows().map(|r| dot(r, ki).powi(2)).sum();
    aii * aii / total
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CandidateMode {
    Exact,
    /// Row norms of `K K^T B` for a Gaussian `B` with `sketch_cols` columns;
    /// estimated ratios are compared against `rho / (1 + gamma)`.
    Jl {
        sketch_cols: usize,
        gamma: f64,
        seed: u64,
    },
}

/// Sketch width `ceil(8 ln n / gamma^2)`.
pub fn jl_sketch_cols(n: usize, gamma: f64) -> usize {
    ((8.0 * (n.max(2) as f64).ln() / (gamma * gamma)).ceil() as usize).max(1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub indices: Vec<usize>,
    /// Ratio (exact or estimated) of each candidate.
    pub ratios: Vec<f64>,
    pub rho: f64,
}

pub fn candidate_set(k: &DenseMatrix, rho: f64, mode: CandidateMode) -> Result<CandidateSet> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::invalid(
            "rho",
            format!("must lie in (0, 1], got {rho}"),
        ));
    }
    let (ratios, cut): (Vec<f64>, f64) = match mode {
        CandidateMode::Exact => (
            (0..k.rows())
                .into_par_iter()
                .map(|i| self_attention_ratio(k, i))
                .collect(),
            rho,
        ),
        CandidateMode::Jl {
            sketch_cols,
            gamma,
            seed,
        } => {
            if !(gamma > 0.0 && gamma < 1.0) || sketch_cols == 0 {
                return Err(Error::invalid(
                    "gamma",
                    "need 0 < gamma < 1 and at least one sketch column",
                ));
            }
            // (K K^T B)_i = (S K) K_i with B = S^T
            let s = gaussian_sketch(sketch_cols, k.rows(), seed)?;
            let sk = s.matmul(k)?;
            let ratios = (0..k.rows())
                .into_par_iter()
                .map(|i| {
                    let ki = k.row(i);
                    let aii = norm_sq(ki);
                    if aii == 0.0 {
                        return 0.0;
                    }
                    let est = norm_sq(&sk.mul_vec(ki).expect("same dimension"));
                    if est > 0.0 {
                        aii * aii / est
                    } else {
                        f64::INFINITY
                    }
                })
                .collect();
            (ratios, rho / (1.0 + gamma))
        }
    };
    let (indices, kept) = ratios
        .iter()
        .enumerate()
        .filter(|&(_, &r)| r >= cut)
        .map(|(i, &r)| (i, r))
        .unzip();
    Ok(CandidateSet {
        indices,
        ratios: kept,
        rho,
    })
}

/// Candidate keys and their squared norms, ready for per-query recovery.
#[derive(Debug, Clone)]
pub struct RecoveryIndex {
    pub candidates: Vec<usize>,
    keys: DenseMatrix,
    norms_sq: Vec<f64>,
    pub delta1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Recovery {
    pub indices: Vec<usize>,
    /// Arithmetic operations spent on this query.
    pub ops: u64,
}

pub fn check_threshold_factor(t: f64) -> Result<()> {
    if t > 1.25 && t <= 2.75 {
        Ok(())
    } else {
        Err(Error::invalid(
            "threshold-factor",
            format!("must lie in (5/4, 11/4], got {t}"),
        ))
    }
}

impl RecoveryIndex {
    pub fn new(inst: &PlantedInstance, candidates: &[usize]) -> Result<Self> {
        if let Some(&bad) = candidates.iter().find(|&&j| j >= inst.n()) {
            return Err(Error::invalid(
                "candidates",
                format!("index {bad} out of range"),
            ));
        }
        Ok(Self {
            candidates: candidates.to_vec(),
            keys: inst.keys.select_rows(candidates),
            norms_sq: candidates.iter().map(|&j| inst.norms_sq[j]).collect(),
            delta1: inst.delta1,
        })
    }

    /// `{i in U' : q K_i^T >= threshold_factor * delta1 * |K_i|^2}`.
    pub fn recover(&self, q: &[f64], threshold_factor: f64) -> Result<Recovery> {
        check_threshold_factor(threshold_factor)?;
        if q.len() != self.keys.cols() {
            return Err(Error::dim("query", self.keys.cols(), q.len()));
        }
        let d = q.len() as u64;
        let mut ops = 0;
        let mut indices = Vec::new();
        for ((&j, row), &n) in self
            .candidates
            .iter()
            .zip(self.keys.iter_rows())
            .zip(&self.norms_sq)
        {
            ops += 2 * d + 2;
            if n > 0.0 && dot(q, row) >= threshold_factor * self.delta1 * n {
                indices.push(j);
            }
        }
        Ok(Recovery { indices, ops })
    }
}

pub fn recover_relevant_keys(
    inst: &PlantedInstance,
    candidates: &[usize],
    q: &[f64],
    threshold_factor: f64,
) -> Result<Recovery> {
    RecoveryIndex::new(inst, candidates)?.recover(q, threshold_factor)
}

/// One index per line after an optional `#` header.
pub fn write_indices<W: Write>(w: &mut W, header: &str, indices: &[usize]) -> std::io::Result<()> {
    writeln!(w, "# {header}")?;
    for i in indices {
        writeln!(w, "{i}")?;
    }
    Ok(())
}

pub fn read_indices<R: BufRead>(r: R) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        out.push(
            t.parse()
                .map_err(|e| Error::Format(format!("index `{t}`: {e}")))?,
        );
    }
    Ok(out)
}

/// `key: value` manifest written by the generator.
pub fn write_params<W: Write>(w: &mut W, inst: &PlantedInstance, seed: u64) -> std::io::Result<()> {
    if let Some(p) = inst.params {
        writeln!(w, "n: {}", p.n)?;
        writeln!(w, "d: {}", p.d)?;
        writeln!(w, "k: {}", p.k)?;
        writeln!(w, "eps0: {:?}", p.eps0)?;
        writeln!(w, "eps1: {:?}", p.eps1)?;
    }
    writeln!(w, "delta1: {:?}", inst.delta1)?;
    writeln!(w, "delta2: {:?}", inst.delta2)?;
    writeln!(w, "planted: {}", inst.planted.len())?;
    writeln!(w, "seed: {seed}")?;
    writeln!(w, "attempts: {}", inst.verification.attempts)?;
    writeln!(w, "verified: {}", inst.verification.passed())?;
    writeln!(w, "max_within: {:?}", inst.verification.within.ratio)?;
    writeln!(w, "max_across: {:?}", inst.verification.across.ratio)?;
    writeln!(w, "rho: {:?}", inst.rho())
}

pub fn read_params(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path)?;
    let mut out = BTreeMap::new();
    for line in text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
    {
        let (k, v) = line
            .split_once(':')
            .ok_or_else(|| Error::Format(format!("expected `key: value`, got `{line}`")))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

pub fn param_f64(params: &BTreeMap<String, String>, key: &str) -> Result<f64> {
    params
        .get(key)
        .ok_or_else(|| Error::Format(format!("manifest is missing `{key}`")))?
        .parse()
        .map_err(|e| Error::Format(format!("`{key}`: {e}")))
}
