//! Synthetic event logs with planted category preferences.
//!
//! Items are split into equal contiguous category blocks and every user
//! prefers one category: most of their clicks and all of their explicit
//! actions fall inside it. The last explicit action is therefore always a
//! preferred-category item, which is what a model has to recover.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Behaviour, CategoryMap, Event, InteractionStore};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct SyntheticConfig {
    pub users: usize,
    pub items: usize,
    pub categories: usize,
    /// Distinct preferred-category items each user clicks.
    pub clicks_in_category: usize,
    /// Distinct clicks outside the preferred category.
    pub noise_clicks: usize,
    /// Explicit actions, each on an already-clicked preferred item.
    pub explicit: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            users: 50,
            items: 100,
            categories: 5,
            clicks_in_category: 15,
            noise_clicks: 2,
            explicit: 4,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub store: InteractionStore,
    pub categories: CategoryMap,
    /// Planted category per user.
    pub preferred: Vec<usize>,
    /// Category per item.
    pub item_category: Vec<usize>,
}

pub fn generate(cfg: &SyntheticConfig) -> SyntheticData {
    assert!(cfg.categories > 0 && cfg.items >= cfg.categories, "need at least one item per category");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let block = cfg.items / cfg.categories;
    let item_category: Vec<usize> = (0..cfg.items).map(|i| (i / block).min(cfg.categories - 1)).collect();
    let members: Vec<Vec<u32>> = (0..cfg.categories)
        .map(|c| (0..cfg.items as u32).filter(|&i| item_category[i as usize] == c).collect())
        .collect();

    let mut events = Vec::with_capacity(cfg.users);
    let mut preferred = Vec::with_capacity(cfg.users);
    for u in 0..cfg.users {
        let cat = u % cfg.categories;
        preferred.push(cat);
        let mut inside = members[cat].clone();
        inside.shuffle(&mut rng);
        inside.truncate(cfg.clicks_in_category.min(inside.len()));
        let mut outside: Vec<u32> = (0..cfg.items as u32)
            .filter(|&i| item_category[i as usize] != cat)
            .collect();
        outside.shuffle(&mut rng);
        outside.truncate(cfg.noise_clicks);

        let mut clicks: Vec<u32> = inside.iter().chain(&outside).copied().collect();
        clicks.shuffle(&mut rng);
        let mut ev: Vec<Event> = Vec::new();
        let mut t = 1_000 * (u as i64 + 1);
        for &item in &clicks {
            t += rng.random_range(1..60);
            ev.push(Event {
                timestamp: t,
                item,
                behaviour: Behaviour::Implicit,
            });
        }
        let mut bought = inside.clone();
        bought.shuffle(&mut rng);
        bought.truncate(cfg.explicit);
        for &item in &bought {
            t += rng.random_range(1..60);
            ev.push(Event {
                timestamp: t,
                item,
                behaviour: Behaviour::Explicit,
            });
        }
        events.push(ev);
    }

    let mut categories = CategoryMap::default();
    for (i, &c) in item_category.iter().enumerate() {
        categories.insert(&format!("item{i}"), &format!("cat{c}"));
    }
    let store = InteractionStore::from_events(
        (0..cfg.users).map(|u| format!("user{u}")).collect(),
        (0..cfg.items).map(|i| format!("item{i}")).collect(),
        events,
    );
    SyntheticData {
        store,
        categories,
        preferred,
        item_category,
    }
}

impl SyntheticData {
    /// Writes `events.csv` in the Retail Rocket schema and `categories.csv`.
    pub fn write_csv(&self, events_path: &Path, categories_path: &Path) -> Result<()> {
        let file = File::create(events_path).map_err(|e| Error::io(events_path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(events_path, e);
        writeln!(w, "timestamp,visitorid,event,itemid,transactionid").map_err(io)?;
        for u in 0..self.store.num_users() as u32 {
            for e in self.store.events(u) {
                let kind = match e.behaviour {
                    Behaviour::Implicit => "view",
                    Behaviour::Explicit => "addtocart",
                };
                writeln!(w, "{},{},{},{},", e.timestamp, self.store.user_id(u), kind, self.store.item_id(e.item))
                    .map_err(io)?;
            }
        }
        w.flush().map_err(io)?;

        let file = File::create(categories_path).map_err(|e| Error::io(categories_path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(categories_path, e);
        writeln!(w, "itemid,categoryid").map_err(io)?;
        for (i, c) in self.item_category.iter().enumerate() {
            writeln!(w, "item{i},cat{c}").map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn planted_structure() {
        let cfg = SyntheticConfig::default();
        let d = generate(&cfg);
        assert_eq!(d.store.num_users(), 50);
        for u in 0..50u32 {
            let cat = d.preferred[u as usize];
            assert_eq!(d.store.implicit(u).len(), cfg.clicks_in_category + cfg.noise_clicks);
            assert_eq!(d.store.explicit(u).len(), cfg.explicit);
            let last = d.store.events(u).last().unwrap();
            assert_eq!(last.behaviour, Behaviour::Explicit);
            assert_eq!(d.item_category[last.item as usize], cat);
        }
    }

    #[test]
    fn deterministic() {
        let a = generate(&SyntheticConfig::default());
        let b = generate(&SyntheticConfig::default());
        for u in 0..50u32 {
            assert_eq!(a.store.events(u), b.store.events(u));
        }
    }
}
