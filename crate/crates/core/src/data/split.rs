use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Behaviour, InteractionStore};
use crate::training::sample_unobserved;

/// One held-out ranking task: the ground-truth item, the sampled negatives
/// it is ranked against, and the user's training history before it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalCase {
    pub user: u32,
    pub item: u32,
    pub negatives: Vec<u32>,
    /// Training items before the ground truth, oldest first, consecutive
    /// repeats collapsed. Not padded.
    pub history: Vec<u32>,
}

impl EvalCase {
    /// Ground truth first, then negatives.
    pub fn candidates(&self) -> Vec<u32> {
        let mut c = Vec::with_capacity(self.negatives.len() + 1);
        c.push(self.item);
        c.extend_from_slice(&self.negatives);
        c
    }
}

#[derive(Clone, Debug)]
pub struct SplitOptions {
    /// Negatives per case; fewer are used when the user has fewer
    /// never-interacted items.
    pub negatives: usize,
    pub seed: u64,
    /// Longest history kept per case.
    pub max_history: usize,
}

impl Default for SplitOptions {
    fn default() -> Self {
        SplitOptions {
            negatives: 999,
            seed: 42,
            max_history: 200,
        }
    }
}

/// Collapses consecutive repeats of the same item.
pub(crate) fn dedup_consecutive(items: impl IntoIterator<Item = u32>) -> Vec<u32> {
    let mut out: Vec<u32> = Vec::new();
    for i in items {
        if out.last() != Some(&i) {
            out.push(i);
        }
    }
    out
}

/// Holds out each user's last explicitly interacted item. All of that
/// user's events on the item leave the training view. Users with no
/// explicit event contribute training data only.
///
/// Equal timestamps resolve by file order: the later row is "last".
pub fn leave_one_out_split(store: &InteractionStore, opts: &SplitOptions) -> (InteractionStore, Vec<EvalCase>) {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut held_out: Vec<Option<u32>> = vec![None; store.num_users()];
    let mut cases = Vec::new();
    let mut short = 0usize;
    for u in 0..store.num_users() as u32 {
        let events = store.events(u);
        let Some(pos) = events.iter().rposition(|e| e.behaviour == Behaviour::Explicit) else {
            continue;
        };
        let item = events[pos].item;
        held_out[u as usize] = Some(item);
        let mut history = dedup_consecutive(events[..pos].iter().filter(|e| e.item != item).map(|e| e.item));
        if history.len() > opts.max_history {
            history.drain(..history.len() - opts.max_history);
        }
        let negatives = sample_unobserved(store.num_items(), store.implicit(u), opts.negatives, &mut rng);
        if negatives.len() < opts.negatives {
            short += 1;
        }
        cases.push(EvalCase {
            user: u,
            item,
            negatives,
            history,
        });
    }
    if short > 0 {
        warn!(
            "{short} evaluation cases have fewer than {} negatives (catalog too small)",
            opts.negatives
        );
    }
    let train = store.filter_events(|u, e| held_out[u as usize] != Some(e.item));
    (train, cases)
}
