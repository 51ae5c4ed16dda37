use std::collections::HashSet;

use log::warn;
use rand::Rng;

use crate::data::{Behaviour, InteractionStore, ItemSet};
use crate::error::{Error, Result};

/// Up to `count` distinct items from `[0, num_items)` outside `observed`,
/// uniformly without replacement. Returns fewer when not enough items are
/// eligible.
pub fn sample_unobserved<R: Rng + ?Sized>(num_items: usize, observed: &ItemSet, count: usize, rng: &mut R) -> Vec<u32> {
    let blocked = observed.iter().filter(|&i| (i as usize) < num_items).count();
    let eligible = num_items - blocked;
    let count = count.min(eligible);
    if count == 0 {
        return Vec::new();
    }
    if count * 4 <= eligible {
        // sparse draw: rejection sampling stays cheap
        let mut seen = HashSet::with_capacity(count);
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let i = rng.random_range(0..num_items as u32);
            if !observed.contains(i) && seen.insert(i) {
                out.push(i);
            }
        }
        out
    } else {
        let pool: Vec<u32> = (0..num_items as u32).filter(|&i| !observed.contains(i)).collect();
        rand::seq::index::sample(rng, pool.len(), count)
            .into_iter()
            .map(|k| pool[k])
            .collect()
    }
}

/// `count` items with no entry for user `u` in the chosen matrix, sampled
/// uniformly without replacement. When fewer are eligible the remainder is
/// drawn again from the eligible items with replacement.
pub fn sample_negatives<R: Rng + ?Sized>(
    store: &InteractionStore,
    u: u32,
    matrix: Behaviour,
    count: usize,
    rng: &mut R,
) -> Result<Vec<u32>> {
    let observed = store.observed(u, matrix);
    let mut out = sample_unobserved(store.num_items(), observed, count, rng);
    if out.len() < count {
        if out.is_empty() {
            return Err(Error::Data(format!(
                "user {} has interacted with every item; no negatives exist",
                store.user_id(u)
            )));
        }
        warn!(
            "user {}: only {} unobserved items for {count} negatives, sampling with replacement",
            store.user_id(u),
            out.len()
        );
        let eligible = out.clone();
        while out.len() < count {
            out.push(eligible[rng.random_range(0..eligible.len())]);
        }
    }
    Ok(out)
}

/// Fixed-length input sequence: the `n` most recent history items, or the
/// whole history preceded by `n - m` random items the user never touched.
pub fn pad_sequence<R: Rng + ?Sized>(
    history: &[u32],
    n: usize,
    num_items: usize,
    observed: &ItemSet,
    rng: &mut R,
) -> Vec<u32> {
    let m = history.len();
    if m >= n {
        return history[m - n..].to_vec();
    }
    let need = n - m;
    let mut pad = sample_unobserved(num_items, observed, need, rng);
    // Tiny catalogs: reuse pad items, or any item if the user saw them all.
    let fallback: Vec<u32> = if pad.is_empty() {
        (0..num_items as u32).collect()
    } else {
        pad.clone()
    };
    while pad.len() < need {
        pad.push(fallback[rng.random_range(0..fallback.len())]);
    }
    pad.extend_from_slice(history);
    pad
}
