//! Simulated protocol for keys sharded across `s` servers.
//!
//! Server 0 coordinates. Every other server sends its local Gram
//! `(K^i)^T K^i` up; the coordinator sums them in shard order and broadcasts
//! `K^T K` to all `s` servers (itself included); each server returns the
//! rows whose leverage against the global Gram clears epsilon. Servers run
//! on their own threads and talk only through channels.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{mpsc, Arc};
use std::thread;

use crate::error::{Error, Result};
use crate::linalg::io::read_matrix;
use crate::linalg::{DenseMatrix, Factorization, GramState};
use crate::universal::{check_epsilon, meets_threshold, SetEstimator, UniversalSet};

#[derive(Debug, Clone)]
pub struct Shard {
    pub server: usize,
    pub keys: DenseMatrix,
}

impl Shard {
    pub fn local_gram(&self) -> GramState {
        GramState::from_matrix(&self.keys)
    }
}

/// Splits `k` into consecutive shards of the given row counts.
pub fn split_rows(k: &DenseMatrix, sizes: &[usize]) -> Result<Vec<Shard>> {
    let total: usize = sizes.iter().sum();
    if total != k.rows() {
        return Err(Error::dim("shard sizes", k.rows(), total));
    }
    let mut start = 0;
    Ok(sizes
        .iter()
        .enumerate()
        .map(|(server, &len)| {
            let idx: Vec<usize> = (start..start + len).collect();
            start += len;
            Shard {
                server,
                keys: k.select_rows(&idx),
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PayloadKind {
    LocalGram,
    GlobalGram,
    Candidates,
}

impl PayloadKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PayloadKind::LocalGram => "local-gram",
            PayloadKind::GlobalGram => "global-gram",
            PayloadKind::Candidates => "candidates",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub sender: usize,
    pub receiver: usize,
    pub kind: PayloadKind,
    /// Payload size in 64-bit float words (row indices are not counted).
    pub words: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ProtocolTranscript {
    pub messages: Vec<Message>,
}

impl ProtocolTranscript {
    pub fn total_words(&self) -> usize {
        self.messages.iter().map(|m| m.words).sum()
    }

    /// `(s-1) d^2 + s d^2 + sum_i |U^i| d`.
    pub fn closed_form(servers: usize, dim: usize, local_set_sizes: &[usize]) -> usize {
        let d2 = dim * dim;
        servers.saturating_sub(1) * d2 + servers * d2 + local_set_sizes.iter().sum::<usize>() * dim
    }
}

impl fmt::Display for ProtocolTranscript {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "sender,receiver,kind,words")?;
        for m in &self.messages {
            writeln!(
                f,
                "{},{},{},{}",
                m.sender,
                m.receiver,
                m.kind.as_str(),
                m.words
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DistributedOutcome {
    pub set: UniversalSet,
    pub transcript: ProtocolTranscript,
    /// `|U^i|` per server.
    pub local_set_sizes: Vec<usize>,
}

/// `(global index, leverage, row)` returned by one server.
type Candidates = Vec<(usize, f64, Vec<f64>)>;

pub fn distributed_universal_set(shards: &[Shard], epsilon: f64) -> Result<DistributedOutcome> {
    check_epsilon(epsilon)?;
    let Some(first) = shards.first() else {
        return Err(Error::invalid("shards", "need at least one shard"));
    };
    let d = first.keys.cols();
    for s in shards {
        if s.keys.cols() != d {
            return Err(Error::dim("shard columns", d, s.keys.cols()));
        }
    }
    let offsets: Vec<usize> = shards
        .iter()
        .scan(0, |acc, s| {
            let o = *acc;
            *acc += s.keys.rows();
            Some(o)
        })
        .collect();
    let s = shards.len();

    let (up_tx, up_rx) = mpsc::channel::<(usize, GramState)>();
    let (cand_tx, cand_rx) = mpsc::channel::<(usize, Candidates)>();
    let mut down_txs = Vec::with_capacity(s);
    let mut down_rxs = Vec::with_capacity(s);
    for _ in 0..s {
        let (tx, rx) = mpsc::channel::<Arc<GramState>>();
        down_txs.push(tx);
        down_rxs.push(rx);
    }

    let mut transcript = ProtocolTranscript::default();
    let results = thread::scope(|scope| -> Result<Vec<Candidates>> {
        // owned here so an early return hangs up on servers still waiting
        let down_txs = down_txs;
        for ((i, shard), down) in shards.iter().enumerate().zip(down_rxs) {
            let up = up_tx.clone();
            let cand = cand_tx.clone();
            let offset = offsets[i];
            scope.spawn(move || {
                // a send only fails if the coordinator bailed out; nothing to report then
                let _ = up.send((i, shard.local_gram()));
                let Ok(global) = down.recv() else { return };
                let fact = Factorization::from_gram(&global);
                let picked = shard
                    .keys
                    .iter_rows()
                    .enumerate()
                    .filter_map(|(r, row)| {
                        let lev = fact.pinv_quadratic_form(row).ok()?.clamp(0.0, 1.0);
                        meets_threshold(lev, epsilon).then(|| (offset + r, lev, row.to_vec()))
                    })
                    .collect();
                let _ = cand.send((i, picked));
            });
        }
        drop(up_tx);
        drop(cand_tx);

        let mut locals: Vec<Option<GramState>> = vec![None; s];
        for (i, g) in up_rx.iter().take(s) {
            locals[i] = Some(g);
        }
        // deterministic reduction: shard order, independent of arrival order
        let mut global = GramState::new(d);
        for (i, g) in locals.into_iter().enumerate() {
            let g =
                g.ok_or_else(|| Error::invalid("shards", format!("server {i} never reported")))?;
            if i != 0 {
                transcript.messages.push(Message {
                    sender: i,
                    receiver: 0,
                    kind: PayloadKind::LocalGram,
                    words: d * d,
                });
            }
            global.merge(&g)?;
        }
        let global = Arc::new(global);
        for (i, tx) in down_txs.iter().enumerate() {
            transcript.messages.push(Message {
                sender: 0,
                receiver: i,
                kind: PayloadKind::GlobalGram,
                words: d * d,
            });
            tx.send(Arc::clone(&global))
                .map_err(|_| Error::invalid("shards", format!("server {i} hung up")))?;
        }
        let mut replies: Vec<Option<Candidates>> = vec![None; s];
        for (i, c) in cand_rx.iter().take(s) {
            replies[i] = Some(c);
        }
        replies
            .into_iter()
            .enumerate()
            .map(|(i, c)| {
                c.ok_or_else(|| Error::invalid("shards", format!("server {i} never answered")))
            })
            .collect()
    })?;

    let mut indices = Vec::new();
    let mut scores = Vec::new();
    let mut local_set_sizes = Vec::with_capacity(s);
    for (i, picked) in results.into_iter().enumerate() {
        transcript.messages.push(Message {
            sender: i,
            receiver: 0,
            kind: PayloadKind::Candidates,
            words: picked.len() * d,
        });
        local_set_sizes.push(picked.len());
        for (j, lev, _) in picked {
            indices.push(j);
            scores.push(lev);
        }
    }
    Ok(DistributedOutcome {
        set: UniversalSet {
            indices,
            epsilon,
            budget: d as f64 / epsilon,
            estimator: SetEstimator::Leverage,
            scores,
            threshold: epsilon,
        },
        transcript,
        local_set_sizes,
    })
}

/// Reads a manifest: one shard matrix path per line, in shard order. Blank
/// lines and `#` comments are skipped; relative paths resolve against the
/// manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<PathBuf>> {
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let paths: Vec<PathBuf> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            let p = PathBuf::from(l);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        })
        .collect();
    if paths.is_empty() {
        return Err(Error::Format(format!(
            "manifest {} lists no shards",
            path.display()
        )));
    }
    Ok(paths)
}

pub fn load_shards(manifest: &Path) -> Result<Vec<Shard>> {
    read_manifest(manifest)?
        .iter()
        .enumerate()
        .map(|(server, p)| {
            Ok(Shard {
                server,
                keys: read_matrix(p)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::AttentionFn;
    use crate::seed::rng_from;
    use crate::universal::{build_universal_set, BuildOptions};

    #[test]
    fn two_identity_shards() {
        let shards: Vec<Shard> = (0..2)
            .map(|server| Shard {
                server,
                keys: DenseMatrix::identity(2),
            })
            .collect();
        let out = distributed_universal_set(&shards, 0.4).unwrap();
        assert_eq!(out.set.indices, vec![0, 1, 2, 3]);
        assert!(out.set.scores.iter().all(|&s| (s - 0.5).abs() < 1e-12));
        assert_eq!(
            out.transcript.total_words(),
            ProtocolTranscript::closed_form(2, 2, &[2, 2])
        );
        assert_eq!(out.transcript.total_words(), 4 + 8 + 8);
    }

    #[test]
    fn single_shard_is_batch() {
        let mut rng = rng_from(3);
        let k = DenseMatrix::gaussian(200, 5, 1.0, &mut rng);
        let out = distributed_universal_set(&split_rows(&k, &[200]).unwrap(), 0.02).unwrap();
        let batch =
            build_universal_set(&k, 0.02, &AttentionFn::Power(2.0), &BuildOptions::default())
                .unwrap();
        assert_eq!(out.set.indices, batch.indices);
        assert_eq!(out.set.scores, batch.scores);
    }

    #[test]
    fn uneven_shards_match_batch() {
        let mut rng = rng_from(4);
        let k = DenseMatrix::gaussian(1000, 8, 1.0, &mut rng);
        let sizes = [1, 300, 17, 0, 250, 400, 32];
        let out = distributed_universal_set(&split_rows(&k, &sizes).unwrap(), 0.01).unwrap();
        let batch =
            build_universal_set(&k, 0.01, &AttentionFn::Power(2.0), &BuildOptions::default())
                .unwrap();
        assert_eq!(out.set.indices, batch.indices);
        assert_eq!(
            out.transcript.total_words(),
            ProtocolTranscript::closed_form(7, 8, &out.local_set_sizes)
        );
    }

    #[test]
    fn dimension_mismatch() {
        let shards = vec![
            Shard {
                server: 0,
                keys: DenseMatrix::identity(2),
            },
            Shard {
                server: 1,
                keys: DenseMatrix::identity(3),
            },
        ];
        assert!(matches!(
            distributed_universal_set(&shards, 0.5),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(distributed_universal_set(&[], 0.5).is_err());
    }
}
