//! Leave-one-out ranking evaluation: HR@K and NDCG@K over the held-out
//! item and its sampled negatives.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::data::{EvalCase, PreparedDataset};
use crate::error::{Error, Result};
use crate::models::{Batch, Model};
use crate::numerics::Real;
use crate::training::pad_sequence;

/// 1 when the ground truth is within the top `k`.
pub fn hr_at_k(rank: usize, k: usize) -> f64 {
    assert!(rank >= 1, "ranks are 1-based");
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

/// `log 2 / log(rank + 1)` within the top `k`, else 0.
pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    assert!(rank >= 1, "ranks are 1-based");
    if rank <= k {
        std::f64::consts::LN_2 / ((rank + 1) as f64).ln()
    } else {
        0.0
    }
}

/// 1-based rank of `candidates[target]` under descending score; equal
/// scores go to the smaller item id first.
pub fn rank_of<T: PartialOrd>(candidates: &[(u32, T)], target: usize) -> usize {
    let (gt_item, gt_score) = &candidates[target];
    1 + candidates
        .iter()
        .filter(|(item, score)| score > gt_score || (score == gt_score && item < gt_item))
        .count()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub k: usize,
    pub hr: f64,
    pub ndcg: f64,
}

/// Mean HR@K and NDCG@K over ranks.
pub fn metrics_from_ranks(ranks: &[usize], k: usize) -> Result<Metrics> {
    if ranks.is_empty() {
        return Err(Error::Data("no evaluation cases".into()));
    }
    let n = ranks.len() as f64;
    Ok(Metrics {
        k,
        hr: ranks.iter().map(|&r| hr_at_k(r, k)).sum::<f64>() / n,
        ndcg: ranks.iter().map(|&r| ndcg_at_k(r, k)).sum::<f64>() / n,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    /// One rank per case, in case order.
    pub ranks: Vec<usize>,
}

impl Evaluation {
    pub fn metrics(&self, k: usize) -> Result<Metrics> {
        metrics_from_ranks(&self.ranks, k)
    }

    pub fn sweep(&self, ks: impl IntoIterator<Item = usize>) -> Result<Vec<Metrics>> {
        ks.into_iter().map(|k| self.metrics(k)).collect()
    }
}

/// Evaluation inputs for one case: every candidate paired with the user
/// and, for sequence models, the padded history. Padding draws from a
/// generator keyed by `(seed, user)` so results do not depend on order or
/// thread count.
pub fn case_batch(dataset: &PreparedDataset, case: &EvalCase, seq_len: usize, seed: u64) -> Batch {
    let candidates = case.candidates();
    let mut batch = Batch {
        users: vec![case.user as usize; candidates.len()],
        items: candidates.iter().map(|&i| i as usize).collect(),
        sequences: Vec::new(),
    };
    if seq_len > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (case.user as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let observed = dataset.observed_items(case);
        let seq = pad_sequence(&case.history, seq_len, dataset.train.num_items(), &observed, &mut rng);
        batch.sequences.reserve(seq.len() * candidates.len());
        for _ in 0..candidates.len() {
            batch.sequences.extend(seq.iter().map(|&i| i as usize));
        }
    }
    batch
}

/// Ranks of every case's ground truth under `x̂·ŷ`, with dropout off.
pub fn evaluate<T: Real>(
    model: &Model<T>,
    dataset: &PreparedDataset,
    workers: usize,
    seed: u64,
) -> Result<Evaluation> {
    if dataset.cases.is_empty() {
        return Err(Error::Data("dataset has no evaluation cases".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))?;
    let rank_case = |case: &EvalCase| -> Result<usize> {
        let batch = case_batch(dataset, case, model.seq_len(), seed);
        let scores = model.score(&batch, dataset.side.as_ref())?;
        let scored: Vec<(u32, T)> = case.candidates().into_iter().zip(scores).collect();
        Ok(rank_of(&scored, 0))
    };
    let ranks = pool.install(|| dataset.cases.par_iter().map(rank_case).collect::<Result<Vec<_>>>())?;
    Ok(Evaluation { ranks })
}
