//! Per-query heavy-attention answers in time independent of the number of keys.
//!
//! Preprocessing builds the universal set and a normalizer. The exact
//! normalizer factorizes the (lifted) key matrix `K' = U' Sigma V^T` and keeps
//! only `Sigma V^T`, so `sum_j f(<q, K_j>) = ||Sigma V^T q'||^2`. The sampled
//! normalizer keeps a Lewis-weight row sample rescaled so that
//! `sum_s w_s |<S_s, q>|^p` estimates the same sum for any `p >= 1`.

use std::io::{Read, Write};

use rand::RngExt;

use crate::error::{Error, Result};
use crate::linalg::{dot, norm_sq, DenseMatrix, Factorization};
use crate::oracle::{abs_pow, AttentionFn};
use crate::seed::rng_from;
use crate::sensitivity::sensitivity_upper_bounds;
use crate::universal::{
    build_universal_set, check_epsilon, BuildOptions, FeatureMap, SetEstimator, UniversalSet,
};

pub const LENG_MAGIC: &[u8; 4] = b"LENG";
pub const LENG_VERSION: u32 = 1;
/// Default oversampling constant for the sampled normalizer.
pub const DEFAULT_SAMPLE_CONSTANT: f64 = 40.0;

/// Normalizations below this fraction of `sigma_max^2 ||q'||^2` are treated
/// as zero: the query is orthogonal to every key up to rounding.
const DEGENERATE_RTOL: f64 = 1e-28;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NormalizationMode {
    Exact,
    Sampled { eps_norm: f64, c: f64 },
}

impl NormalizationMode {
    pub fn sampled(eps_norm: f64) -> Self {
        NormalizationMode::Sampled {
            eps_norm,
            c: DEFAULT_SAMPLE_CONSTANT,
        }
    }
}

/// Lewis-weight row sample: row `i` kept with probability
/// `min(1, c * u_i / eps_norm^2)`, where `u_i` is its sensitivity upper bound,
/// and scaled by `(1/p_i)^(1/p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledNormalizer {
    pub p: f64,
    pub eps_norm: f64,
    pub c: f64,
    /// Source row of each sample.
    pub indices: Vec<usize>,
    /// Rescaled sampled rows.
    pub rows: DenseMatrix,
    /// Expected sample count `sum_i p_i`.
    pub expected_count: f64,
}

impl SampledNormalizer {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Estimate of `sum_j |<K_j, x>|^p`.
    pub fn estimate(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.rows.cols() {
            return Err(Error::dim(
                "sampled normalizer query",
                self.rows.cols(),
                x.len(),
            ));
        }
        Ok(self
            .rows
            .iter_rows()
            .map(|r| abs_pow(dot(r, x), self.p))
            .sum())
    }
}

pub fn sample_normalizer(
    k: &DenseMatrix,
    p: f64,
    eps_norm: f64,
    c: f64,
    seed: u64,
) -> Result<SampledNormalizer> {
    if !(eps_norm > 0.0 && eps_norm.is_finite()) {
        return Err(Error::invalid(
            "eps-norm",
            format!("must be > 0, got {eps_norm}"),
        ));
    }
    if !(c > 0.0) {
        return Err(Error::invalid("c", format!("must be > 0, got {c}")));
    }
    let bounds = sensitivity_upper_bounds(k, p, 1e-10, 2000)?;
    let mut rng = rng_from(seed);
    let mut indices = Vec::new();
    let mut data = Vec::new();
    let mut expected_count = 0.0;
    for (i, (&u, row)) in bounds.scores.iter().zip(k.iter_rows()).enumerate() {
        let prob = (c * u / (eps_norm * eps_norm)).min(1.0);
        expected_count += prob;
        // one draw per row regardless of outcome keeps the stream aligned
        let draw: f64 = rng.random();
        if prob > 0.0 && draw < prob {
            let scale = (1.0 / prob).powf(1.0 / p);
            indices.push(i);
            data.extend(row.iter().map(|x| x * scale));
        }
    }
    Ok(SampledNormalizer {
        p,
        eps_norm,
        c,
        rows: DenseMatrix::new(indices.len(), k.cols(), data)?,
        indices,
        expected_count,
    })
}

#[derive(Debug, Clone)]
enum Normalizer {
    Exact {
        /// `Sigma V^T` of the lifted keys, `rank x D`.
        sigma_vt: DenseMatrix,
        sigma_max: f64,
    },
    Sampled(SampledNormalizer),
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult {
    /// `(key index, score)` for every key with score at least epsilon, by index.
    pub heavy: Vec<(usize, f64)>,
    pub normalization: f64,
    /// The query is orthogonal to every key; no attention row exists.
    pub degenerate: bool,
    /// Arithmetic operations spent on this query.
    pub ops: u64,
}

/// Immutable preprocessed state; safe to query from many threads.
#[derive(Debug, Clone)]
pub struct QueryEngine {
    f: AttentionFn,
    epsilon: f64,
    dim: usize,
    source_rows: usize,
    set: UniversalSet,
    /// Key-side features of the rows in `set`: `K_j` for `|x|^p`, `phi(K_j)` for feature maps.
    keys: DenseMatrix,
    normalizer: Normalizer,
}

fn even_half(p: f64) -> Option<usize> {
    (p >= 2.0 && p.fract() == 0.0 && (p as u64).is_multiple_of(2)).then_some(p as usize / 2)
}

impl QueryEngine {
    pub fn preprocess(
        k: &DenseMatrix,
        epsilon: f64,
        f: &AttentionFn,
        mode: NormalizationMode,
        opts: &BuildOptions,
        seed: u64,
    ) -> Result<Self> {
        check_epsilon(epsilon)?;
        let set = build_universal_set(k, epsilon, f, opts)?;
        let (query_map, key_map) = match (f, mode) {
            (AttentionFn::Power(p), NormalizationMode::Exact) => {
                let h = even_half(*p).ok_or_else(|| {
                    Error::invalid(
                        "p",
                        format!("exact normalization needs an even integer p, got {p}"),
                    )
                })?;
                (FeatureMap::Polynomial(h), FeatureMap::Identity)
            }
            (AttentionFn::Power(_), NormalizationMode::Sampled { .. }) => {
                (FeatureMap::Identity, FeatureMap::Identity)
            }
            (AttentionFn::Gap { query_map, key_map }, NormalizationMode::Exact) => {
                (query_map.clone(), key_map.clone())
            }
            (AttentionFn::Gap { .. }, NormalizationMode::Sampled { .. }) => {
                return Err(Error::invalid(
                    "mode",
                    "sampled normalization supports |x|^p only",
                ));
            }
        };
        let normalizer = match mode {
            NormalizationMode::Exact => {
                let lifted = match f {
                    AttentionFn::Power(_) => query_map.apply_matrix(k)?,
                    AttentionFn::Gap { .. } => key_map.apply_matrix(k)?,
                };
                let fact = Factorization::svd(&lifted, false);
                Normalizer::Exact {
                    sigma_vt: fact.sigma_vt(),
                    sigma_max: fact.sigma_max(),
                }
            }
            NormalizationMode::Sampled { eps_norm, c } => {
                let AttentionFn::Power(p) = f else {
                    unreachable!()
                };
                Normalizer::Sampled(sample_normalizer(k, *p, eps_norm, c, seed)?)
            }
        };
        let kept = k.select_rows(&set.indices);
        let keys = match f {
            AttentionFn::Power(_) => kept,
            AttentionFn::Gap { .. } => key_map.apply_matrix(&kept)?,
        };
        Ok(Self {
            f: f.clone(),
            epsilon,
            dim: k.cols(),
            source_rows: k.rows(),
            set,
            keys,
            normalizer,
        })
    }

    pub fn universal_set(&self) -> &UniversalSet {
        &self.set
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Rows of the matrix the engine was built from.
    pub fn source_rows(&self) -> usize {
        self.source_rows
    }

    pub fn attention_fn(&self) -> &AttentionFn {
        &self.f
    }

    pub fn sampled(&self) -> Option<&SampledNormalizer> {
        match &self.normalizer {
            Normalizer::Sampled(s) => Some(s),
            Normalizer::Exact { .. } => None,
        }
    }

    /// Query-side features `q'` such that key scores are `<q', key>^2`
    /// (feature maps / exact lift) or `|<q, key>|^p`.
    fn query_features(&self, q: &[f64]) -> Result<Vec<f64>> {
        match &self.f {
            AttentionFn::Power(p) => match &self.normalizer {
                Normalizer::Exact { .. } => {
                    FeatureMap::Polynomial(even_half(*p).expect("validated")).apply(q)
                }
                Normalizer::Sampled(_) => Ok(q.to_vec()),
            },
            AttentionFn::Gap { query_map, .. } => query_map.apply(q),
        }
    }

    /// Returns the normalization `sum_j f(<q, K_j>)` (exact or estimated) and the ops spent.
    pub fn normalization(&self, q: &[f64]) -> Result<(f64, bool, u64)> {
        if q.len() != self.dim {
            return Err(Error::dim("query", self.dim, q.len()));
        }
        match &self.normalizer {
            Normalizer::Exact {
                sigma_vt,
                sigma_max,
            } => {
                let lifted = self.query_features(q)?;
                let mut ops = lifted.len() as u64;
                let projected = sigma_vt.mul_vec(&lifted)?;
                ops += 2 * (sigma_vt.rows() * sigma_vt.cols()) as u64;
                let norm = norm_sq(&projected);
                ops += 2 * projected.len() as u64;
                let floor = DEGENERATE_RTOL * sigma_max * sigma_max * norm_sq(&lifted);
                Ok((norm, norm <= floor, ops))
            }
            Normalizer::Sampled(s) => {
                let norm = s.estimate(q)?;
                let ops = (s.rows.rows() * (2 * self.dim + 1)) as u64;
                Ok((norm, norm <= 0.0, ops))
            }
        }
    }

    /// All keys in the universal set whose score against `q` is at least epsilon.
    pub fn query(&self, q: &[f64]) -> Result<QueryResult> {
        let (normalization, degenerate, mut ops) = self.normalization(q)?;
        if degenerate {
            return Ok(QueryResult {
                heavy: Vec::new(),
                normalization,
                degenerate,
                ops,
            });
        }
        let features = match &self.f {
            AttentionFn::Power(_) => q.to_vec(),
            AttentionFn::Gap { query_map, .. } => {
                let x = query_map.apply(q)?;
                ops += x.len() as u64;
                x
            }
        };
        let mut heavy = Vec::new();
        for (&j, key) in self.set.indices.iter().zip(self.keys.iter_rows()) {
            let ip = dot(&features, key);
            let raw = match &self.f {
                AttentionFn::Power(p) => abs_pow(ip, *p),
                AttentionFn::Gap { .. } => ip * ip,
            };
            let score = raw / normalization;
            ops += 2 * key.len() as u64 + 2;
            if score >= self.epsilon {
                heavy.push((j, score));
            }
        }
        Ok(QueryResult {
            heavy,
            normalization,
            degenerate,
            ops,
        })
    }

    pub fn save<W: Write>(&self, w: &mut W) -> Result<()> {
        let map_name = |m: &FeatureMap| -> Result<String> {
            match m {
                FeatureMap::Custom { name, .. } => Err(Error::Format(format!(
                    "custom feature map `{name}` cannot be persisted"
                ))),
                other => Ok(other.to_string()),
            }
        };
        w.write_all(LENG_MAGIC)?;
        put_u32(w, LENG_VERSION)?;
        match &self.f {
            AttentionFn::Power(p) => {
                put_u8(w, 0)?;
                put_f64(w, *p)?;
            }
            AttentionFn::Gap { query_map, key_map } => {
                put_u8(w, 1)?;
                put_str(w, &map_name(query_map)?)?;
                put_str(w, &map_name(key_map)?)?;
            }
        }
        put_f64(w, self.epsilon)?;
        put_u64(w, self.dim as u64)?;
        put_u64(w, self.source_rows as u64)?;
        put_f64(w, self.set.budget)?;
        put_f64(w, self.set.threshold)?;
        put_str(w, self.set.estimator.as_str())?;
        put_u64(w, self.set.indices.len() as u64)?;
        for (&i, &s) in self.set.indices.iter().zip(&self.set.scores) {
            put_u64(w, i as u64)?;
            put_f64(w, s)?;
        }
        put_matrix(w, &self.keys)?;
        match &self.normalizer {
            Normalizer::Exact {
                sigma_vt,
                sigma_max,
            } => {
                put_u8(w, 0)?;
                put_f64(w, *sigma_max)?;
                put_matrix(w, sigma_vt)?;
            }
            Normalizer::Sampled(s) => {
                put_u8(w, 1)?;
                put_f64(w, s.p)?;
                put_f64(w, s.eps_norm)?;
                put_f64(w, s.c)?;
                put_f64(w, s.expected_count)?;
                put_u64(w, s.indices.len() as u64)?;
                for &i in &s.indices {
                    put_u64(w, i as u64)?;
                }
                put_matrix(w, &s.rows)?;
            }
        }
        Ok(())
    }

    pub fn load<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != LENG_MAGIC {
            return Err(Error::Format("not an engine file (bad magic)".into()));
        }
        let version = get_u32(r)?;
        if version != LENG_VERSION {
            return Err(Error::Format(format!(
                "unsupported engine version {version}"
            )));
        }
        let f = match get_u8(r)? {
            0 => AttentionFn::Power(get_f64(r)?),
            1 => AttentionFn::Gap {
                query_map: get_str(r)?.parse()?,
                key_map: get_str(r)?.parse()?,
            },
            t => return Err(Error::Format(format!("unknown attention tag {t}"))),
        };
        let epsilon = get_f64(r)?;
        let dim = get_usize(r)?;
        let source_rows = get_usize(r)?;
        let budget = get_f64(r)?;
        let threshold = get_f64(r)?;
        let estimator: SetEstimator = get_str(r)?.parse()?;
        let count = get_usize(r)?;
        let mut indices = Vec::with_capacity(count.min(1 << 20));
        let mut scores = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            indices.push(get_usize(r)?);
            scores.push(get_f64(r)?);
        }
        let keys = get_matrix(r)?;
        let normalizer = match get_u8(r)? {
            0 => Normalizer::Exact {
                sigma_max: get_f64(r)?,
                sigma_vt: get_matrix(r)?,
            },
            1 => {
                let p = get_f64(r)?;
                let eps_norm = get_f64(r)?;
                let c = get_f64(r)?;
                let expected_count = get_f64(r)?;
                let m = get_usize(r)?;
                let mut idx = Vec::with_capacity(m.min(1 << 20));
                for _ in 0..m {
                    idx.push(get_usize(r)?);
                }
                Normalizer::Sampled(SampledNormalizer {
                    p,
                    eps_norm,
                    c,
                    indices: idx,
                    rows: get_matrix(r)?,
                    expected_count,
                })
            }
            t => return Err(Error::Format(format!("unknown normalizer tag {t}"))),
        };
        if keys.rows() != indices.len() {
            return Err(Error::Format(
                "key rows do not match the universal set".into(),
            ));
        }
        Ok(Self {
            f,
            epsilon,
            dim,
            source_rows,
            set: UniversalSet {
                indices,
                epsilon,
                budget,
                estimator,
                scores,
                threshold,
            },
            keys,
            normalizer,
        })
    }
}

fn put_u8<W: Write>(w: &mut W, v: u8) -> Result<()> {
    Ok(w.write_all(&[v])?)
}

fn put_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn put_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn put_f64<W: Write>(w: &mut W, v: f64) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn put_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    put_u64(w, s.len() as u64)?;
    Ok(w.write_all(s.as_bytes())?)
}

fn put_matrix<W: Write>(w: &mut W, m: &DenseMatrix) -> Result<()> {
    put_u64(w, m.rows() as u64)?;
    put_u64(w, m.cols() as u64)?;
    for &x in m.data() {
        put_f64(w, x)?;
    }
    Ok(())
}

fn get_bytes<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn get_u8<R: Read>(r: &mut R) -> Result<u8> {
    Ok(get_bytes::<R, 1>(r)?[0])
}

fn get_u32<R: Read>(r: &mut R) -> Result<u32> {
    Ok(u32::from_le_bytes(get_bytes(r)?))
}

fn get_usize<R: Read>(r: &mut R) -> Result<usize> {
    let v = u64::from_le_bytes(get_bytes(r)?);
    usize::try_from(v).map_err(|_| Error::Format(format!("count {v} does not fit in memory")))
}

fn get_f64<R: Read>(r: &mut R) -> Result<f64> {
    Ok(f64::from_le_bytes(get_bytes(r)?))
}

fn get_str<R: Read>(r: &mut R) -> Result<String> {
    let len = get_usize(r)?;
    if len > 1 << 16 {
        return Err(Error::Format("string field too long".into()));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))
}

fn get_matrix<R: Read>(r: &mut R) -> Result<DenseMatrix> {
    let rows = get_usize(r)?;
    let cols = get_usize(r)?;
    let len = rows
        .checked_mul(cols)
        .filter(|&l| l <= 1 << 32)
        .ok_or_else(|| Error::Format("matrix too large".into()))?;
    let mut data = Vec::with_capacity(len.min(1 << 20));
    for _ in 0..len {
        data.push(get_f64(r)?);
    }
    DenseMatrix::new(rows, cols, data).map_err(|e| Error::Format(e.to_string()))
}
