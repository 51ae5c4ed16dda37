//! Event-log ingestion, interaction matrices, category side information and
//! the leave-one-out split.

mod ingest;
mod prepared;
mod side;
pub(crate) mod split;
pub mod synthetic;

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

pub use ingest::{ingest, ingest_reader, Classification, ColumnNames, IngestOptions};
pub use prepared::PreparedDataset;
pub use side::{build_side_info, convert_item_properties, read_category_file, CategoryMap, SideInfo};
pub use split::{leave_one_out_split, EvalCase, SplitOptions};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Behaviour {
    Implicit,
    Explicit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Event {
    /// Epoch milliseconds.
    pub timestamp: i64,
    pub item: u32,
    pub behaviour: Behaviour,
}

/// Sorted set of item indices.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ItemSet(Vec<u32>);

impl ItemSet {
    pub fn from_unsorted(mut items: Vec<u32>) -> Self {
        items.sort_unstable();
        items.dedup();
        ItemSet(items)
    }

    pub fn contains(&self, item: u32) -> bool {
        self.0.binary_search(&item).is_ok()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = u32> + '_ {
        self.0.iter().copied()
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }
}

/// Users and items indexed densely, with each user's time-ordered events
/// and the binary implicit (X⁺) and explicit (Y⁺) membership sets.
///
/// Every explicit interaction is also an implicit one.
#[derive(Clone, Debug, Default)]
pub struct InteractionStore {
    user_ids: Vec<String>,
    item_ids: Vec<String>,
    user_index: HashMap<String, u32>,
    item_index: HashMap<String, u32>,
    events: Vec<Vec<Event>>,
    implicit: Vec<ItemSet>,
    explicit: Vec<ItemSet>,
}

impl InteractionStore {
    /// Builds a store from per-user event lists already in time order.
    pub fn from_events(user_ids: Vec<String>, item_ids: Vec<String>, events: Vec<Vec<Event>>) -> Self {
        assert_eq!(user_ids.len(), events.len(), "one event list per user");
        let user_index = user_ids
            .iter()
            .enumerate()
            .map(|(i, u)| (u.clone(), i as u32))
            .collect();
        let item_index = item_ids
            .iter()
            .enumerate()
            .map(|(i, u)| (u.clone(), i as u32))
            .collect();
        let mut store = InteractionStore {
            user_ids,
            item_ids,
            user_index,
            item_index,
            events,
            implicit: Vec::new(),
            explicit: Vec::new(),
        };
        store.rebuild_sets();
        store
    }

    fn rebuild_sets(&mut self) {
        self.implicit = self
            .events
            .iter()
            .map(|ev| ItemSet::from_unsorted(ev.iter().map(|e| e.item).collect()))
            .collect();
        self.explicit = self
            .events
            .iter()
            .map(|ev| {
                ItemSet::from_unsorted(
                    ev.iter()
                        .filter(|e| e.behaviour == Behaviour::Explicit)
                        .map(|e| e.item)
                        .collect(),
                )
            })
            .collect();
    }

    /// Same users and items with each user's events filtered by `keep`.
    pub fn filter_events(&self, mut keep: impl FnMut(u32, &Event) -> bool) -> Self {
        let events = self
            .events
            .iter()
            .enumerate()
            .map(|(u, ev)| ev.iter().filter(|e| keep(u as u32, e)).copied().collect())
            .collect();
        InteractionStore::from_events(self.user_ids.clone(), self.item_ids.clone(), events)
    }

    pub fn num_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn num_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn user_id(&self, u: u32) -> &str {
        &self.user_ids[u as usize]
    }

    pub fn item_id(&self, i: u32) -> &str {
        &self.item_ids[i as usize]
    }

    pub fn user_ids(&self) -> &[String] {
        &self.user_ids
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }

    pub fn user_index(&self, external: &str) -> Option<u32> {
        self.user_index.get(external).copied()
    }

    pub fn item_index(&self, external: &str) -> Option<u32> {
        self.item_index.get(external).copied()
    }

    pub fn events(&self, u: u32) -> &[Event] {
        &self.events[u as usize]
    }

    /// Items with an implicit entry for `u` (includes explicit ones).
    pub fn implicit(&self, u: u32) -> &ItemSet {
        &self.implicit[u as usize]
    }

    pub fn explicit(&self, u: u32) -> &ItemSet {
        &self.explicit[u as usize]
    }

    pub fn observed(&self, u: u32, behaviour: Behaviour) -> &ItemSet {
        match behaviour {
            Behaviour::Implicit => self.implicit(u),
            Behaviour::Explicit => self.explicit(u),
        }
    }

    pub fn implicit_count(&self) -> usize {
        self.implicit.iter().map(ItemSet::len).sum()
    }

    pub fn explicit_count(&self) -> usize {
        self.explicit.iter().map(ItemSet::len).sum()
    }

    pub fn event_count(&self) -> usize {
        self.events.iter().map(Vec::len).sum()
    }

    pub fn stats(&self, categories: Option<usize>) -> DatasetStats {
        let (m, n) = (self.num_users(), self.num_items());
        let (x, y) = (self.implicit_count(), self.explicit_count());
        let cells = (m as f64) * (n as f64);
        DatasetStats {
            users: m,
            items: n,
            implicit: x,
            explicit: y,
            categories,
            sparsity: if cells > 0.0 { 1.0 - (x + y) as f64 / cells } else { 1.0 },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub implicit: usize,
    pub explicit: usize,
    pub categories: Option<usize>,
    /// `1 − (|X⁺| + |Y⁺|) / (M·N)`.
    pub sparsity: f64,
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "implicit  {}", self.implicit)?;
        writeln!(f, "explicit  {}", self.explicit)?;
        writeln!(f, "users     {}", self.users)?;
        writeln!(f, "items     {}", self.items)?;
        match self.categories {
            Some(c) => writeln!(f, "labels    {c}")?,
            None => writeln!(f, "labels    -")?,
        }
        write!(f, "sparsity  {:.3}%", self.sparsity * 100.0)
    }
}
