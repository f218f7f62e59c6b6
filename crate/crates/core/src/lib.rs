//! Universal key sets for large attention scores.
//!
//! Given a key matrix `K` (n x d) and an attention function `f`, the crate
//! computes a set `U` of key indices, whose size does not depend on `n`, such
//! that for *any* query `q` every normalized score
//! `f(<q, K_j>) / sum_l f(<q, K_l>)` that is at least `epsilon` has `j` in `U`.
//!
//! For `f(x) = x^2` the set is exactly the rows with leverage score at least
//! `epsilon`; for `f(x) = |x|^p` it is derived from l_p Lewis weights; for
//! kernel-style attention `<psi(q), phi(k)>^2` the keys are lifted with `phi`
//! first. On top of the set the crate provides streaming (one and two pass),
//! a simulated distributed protocol, a per-query engine that reports exact
//! heavy scores in time independent of `n`, a planted key/query model with
//! sublinear relevant-key recovery, and a dense reference oracle.

pub mod cli;
pub mod distributed;
pub mod error;
pub mod linalg;
pub mod oracle;
pub mod planted;
pub mod query;
pub mod seed;
pub mod sensitivity;
pub mod streaming;
pub mod universal;

pub use error::{Error, Result};
pub use linalg::{DenseMatrix, Factorization, FactorizationKind, GramState};
pub use oracle::{AttentionFn, AttentionMatrix};
pub use query::{NormalizationMode, QueryEngine};
pub use sensitivity::{Estimator, SensitivityVector};
pub use universal::{FeatureMap, PowerRoute, UniversalSet};
