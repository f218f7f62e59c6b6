//! Universal sets over a one-way stream of key rows.
//!
//! * Two passes: accumulate `K^T K`, then score every row against it.
//!   `O(d^2)` words.
//! * One pass: accumulate `K^T K` while storing rows whose online leverage
//!   clears epsilon; at the end rescore the stored rows against the final
//!   Gram. Online scores never undershoot the final ones, so no row of the
//!   batch set is missed.
//!
//! Both paths sum the Gram in row order and score with the same
//! factorization, so they agree exactly with the batch set.

use std::fmt;

use crate::error::{Error, Result};
use crate::linalg::io::MatrixFileRows;
use crate::linalg::{DenseMatrix, Factorization};
use crate::sensitivity::OnlineLeverage;
use crate::universal::{check_epsilon, meets_threshold, SetEstimator, UniversalSet};

/// A forward-only source of equal-length rows.
pub trait RowStream {
    fn dim(&self) -> usize;
    fn next_row(&mut self) -> Option<Result<Vec<f64>>>;
}

/// A stream that can be restarted from its first row.
pub trait ReplayableStream: RowStream {
    fn rewind(&mut self) -> Result<()>;
}

/// Rows of an in-memory matrix.
#[derive(Debug, Clone)]
pub struct MatrixRows<'a> {
    matrix: &'a DenseMatrix,
    next: usize,
}

impl<'a> MatrixRows<'a> {
    pub fn new(matrix: &'a DenseMatrix) -> Self {
        Self { matrix, next: 0 }
    }
}

impl RowStream for MatrixRows<'_> {
    fn dim(&self) -> usize {
        self.matrix.cols()
    }

    fn next_row(&mut self) -> Option<Result<Vec<f64>>> {
        (self.next < self.matrix.rows()).then(|| {
            self.next += 1;
            Ok(self.matrix.row(self.next - 1).to_vec())
        })
    }
}

impl ReplayableStream for MatrixRows<'_> {
    fn rewind(&mut self) -> Result<()> {
        self.next = 0;
        Ok(())
    }
}

impl RowStream for MatrixFileRows {
    fn dim(&self) -> usize {
        self.cols()
    }

    fn next_row(&mut self) -> Option<Result<Vec<f64>>> {
        MatrixFileRows::next_row(self)
    }
}

impl ReplayableStream for MatrixFileRows {
    fn rewind(&mut self) -> Result<()> {
        MatrixFileRows::rewind(self)
    }
}

/// Memory accounting in 64-bit words. Persistent float state only: the Gram
/// (or its factorization once the Gram is released), stored candidate rows
/// and the current row. Candidate indices are counted separately.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MemoryReport {
    pub passes: u8,
    pub dim: usize,
    pub rows: usize,
    pub candidates: usize,
    pub kept: usize,
    pub gram_words: usize,
    pub candidate_words: usize,
    pub row_buffer_words: usize,
    pub factor_words: usize,
    pub peak_words: usize,
    pub index_words: usize,
    /// Sum of online leverage scores (one pass only).
    pub online_score_sum: f64,
}

impl MemoryReport {
    /// `d^2 + candidates * d + slack`.
    pub fn bound(&self, slack: usize) -> usize {
        self.dim * self.dim + self.candidates * self.dim + slack
    }

    fn observe(&mut self, words: usize) {
        self.peak_words = self.peak_words.max(words);
    }
}

impl fmt::Display for MemoryReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "passes: {}", self.passes)?;
        writeln!(f, "dim: {}", self.dim)?;
        writeln!(f, "rows: {}", self.rows)?;
        writeln!(f, "candidates: {}", self.candidates)?;
        writeln!(f, "kept: {}", self.kept)?;
        writeln!(f, "gram_words: {}", self.gram_words)?;
        writeln!(f, "candidate_words: {}", self.candidate_words)?;
        writeln!(f, "row_buffer_words: {}", self.row_buffer_words)?;
        writeln!(f, "factor_words: {}", self.factor_words)?;
        writeln!(f, "peak_words: {}", self.peak_words)?;
        writeln!(f, "index_words: {}", self.index_words)?;
        writeln!(f, "online_score_sum: {:?}", self.online_score_sum)
    }
}

#[derive(Debug, Clone)]
pub struct StreamOutcome {
    pub set: UniversalSet,
    /// Rows stored during the pass (one pass only), in stream order.
    pub candidates: Vec<usize>,
    pub memory: MemoryReport,
}

fn factor_words(fact: &Factorization) -> usize {
    fact.rank() * (fact.dim() + 1)
}

fn leverage(fact: &Factorization, row: &[f64]) -> Result<f64> {
    Ok(fact.pinv_quadratic_form(row)?.clamp(0.0, 1.0))
}

fn finish(indices: Vec<usize>, scores: Vec<f64>, epsilon: f64, dim: usize) -> UniversalSet {
    UniversalSet {
        indices,
        epsilon,
        budget: dim as f64 / epsilon,
        estimator: SetEstimator::Leverage,
        scores,
        threshold: epsilon,
    }
}

pub fn two_pass_universal_set<S: ReplayableStream + ?Sized>(
    stream: &mut S,
    epsilon: f64,
) -> Result<StreamOutcome> {
    check_epsilon(epsilon)?;
    let d = stream.dim();
    let mut mem = MemoryReport {
        passes: 2,
        dim: d,
        gram_words: d * d,
        row_buffer_words: d,
        ..MemoryReport::default()
    };
    let mut online = OnlineLeverage::new(d, 0.0)?;
    let mut first = 0;
    while let Some(row) = stream.next_row() {
        online.absorb(&row?)?;
        first += 1;
        mem.observe(d * d + d);
    }
    let fact = Factorization::from_gram(&online.into_gram());
    // the Gram is released once factored
    mem.factor_words = factor_words(&fact);
    stream.rewind()?;
    let mut second = 0;
    let (mut indices, mut scores) = (Vec::new(), Vec::new());
    while let Some(row) = stream.next_row() {
        let row = row?;
        if row.len() != d {
            return Err(Error::dim("stream row", d, row.len()));
        }
        let s = leverage(&fact, &row)?;
        if meets_threshold(s, epsilon) {
            indices.push(second);
            scores.push(s);
        }
        second += 1;
        mem.observe(mem.factor_words + d);
    }
    if first != second {
        return Err(Error::StreamLengthMismatch { first, second });
    }
    mem.rows = first;
    mem.kept = indices.len();
    mem.index_words = indices.len();
    Ok(StreamOutcome {
        set: finish(indices, scores, epsilon, d),
        candidates: Vec::new(),
        memory: mem,
    })
}

pub fn one_pass_universal_set<S: RowStream + ?Sized>(
    stream: &mut S,
    epsilon: f64,
) -> Result<StreamOutcome> {
    check_epsilon(epsilon)?;
    let d = stream.dim();
    let mut mem = MemoryReport {
        passes: 1,
        dim: d,
        gram_words: d * d,
        row_buffer_words: d,
        ..MemoryReport::default()
    };
    let mut online = OnlineLeverage::new(d, 0.0)?;
    let mut stored: Vec<(usize, Vec<f64>)> = Vec::new();
    let mut n = 0;
    while let Some(row) = stream.next_row() {
        let row = row?;
        let s = online.push(&row)?;
        mem.online_score_sum += s;
        if meets_threshold(s, epsilon) {
            stored.push((n, row));
        }
        n += 1;
        mem.observe(d * d + stored.len() * d + d);
    }
    let fact = Factorization::from_gram(&online.into_gram());
    mem.factor_words = factor_words(&fact);
    mem.observe(mem.factor_words + stored.len() * d);
    let (mut indices, mut scores) = (Vec::new(), Vec::new());
    for (j, row) in &stored {
        let s = leverage(&fact, row)?;
        if meets_threshold(s, epsilon) {
            indices.push(*j);
            scores.push(s);
        }
    }
    mem.rows = n;
    mem.candidates = stored.len();
    mem.candidate_words = stored.len() * d;
    mem.kept = indices.len();
    mem.index_words = stored.len();
    Ok(StreamOutcome {
        set: finish(indices, scores, epsilon, d),
        candidates: stored.into_iter().map(|(j, _)| j).collect(),
        memory: mem,
    })
}
