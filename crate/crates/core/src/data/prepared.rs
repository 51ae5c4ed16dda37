use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    build_side_info, leave_one_out_split, Behaviour, CategoryMap, DatasetStats, EvalCase, Event, InteractionStore,
    SideInfo, SplitOptions,
};
use crate::container::{Container, Entry};
use crate::error::{Error, Result};

const KIND: &str = "dataset";
const VERSION: u32 = 1;

/// Everything training and evaluation need, so raw logs are parsed once.
#[derive(Clone, Debug)]
pub struct PreparedDataset {
    /// Statistics of the filtered store before the split.
    pub stats: DatasetStats,
    pub train: InteractionStore,
    pub cases: Vec<EvalCase>,
    pub side: Option<SideInfo>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    version: u32,
    stats: DatasetStats,
    users: Vec<String>,
    items: Vec<String>,
    categories: Option<Vec<String>>,
}

impl PreparedDataset {
    pub fn prepare(store: &InteractionStore, categories: Option<&CategoryMap>, split: &SplitOptions) -> Self {
        let (train, cases) = leave_one_out_split(store, split);
        let side = categories.map(|c| build_side_info(&train, c));
        let stats = store.stats(side.as_ref().map(SideInfo::num_categories));
        PreparedDataset {
            stats,
            train,
            cases,
            side,
        }
    }

    /// Items the user interacted with anywhere, held-out item included.
    pub fn observed_items(&self, case: &EvalCase) -> super::ItemSet {
        let mut all: Vec<u32> = self.train.implicit(case.user).iter().collect();
        all.push(case.item);
        super::ItemSet::from_unsorted(all)
    }

    pub fn to_container(&self) -> Result<Container> {
        let header = Header {
            kind: KIND.into(),
            version: VERSION,
            stats: self.stats.clone(),
            users: self.train.user_ids().to_vec(),
            items: self.train.item_ids().to_vec(),
            categories: self.side.as_ref().map(|s| s.labels.clone()),
        };
        let header = serde_json::to_string(&header).map_err(|e| Error::Data(e.to_string()))?;
        let mut c = Container::new(header);

        let mut offsets = vec![0u32];
        let (mut items, mut kinds, mut lo, mut hi) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for u in 0..self.train.num_users() as u32 {
            for e in self.train.events(u) {
                items.push(e.item);
                kinds.push(u32::from(e.behaviour == Behaviour::Explicit));
                let bits = e.timestamp as u64;
                lo.push(bits as u32);
                hi.push((bits >> 32) as u32);
            }
            offsets.push(items.len() as u32);
        }
        c.push(Entry::from_u32("train.offsets", offsets));
        c.push(Entry::from_u32("train.items", items));
        c.push(Entry::from_u32("train.behaviour", kinds));
        c.push(Entry::from_u32("train.ts_lo", lo));
        c.push(Entry::from_u32("train.ts_hi", hi));

        let (mut neg_off, mut negs, mut hist_off, mut hist) = (vec![0u32], Vec::new(), vec![0u32], Vec::new());
        for case in &self.cases {
            negs.extend_from_slice(&case.negatives);
            neg_off.push(negs.len() as u32);
            hist.extend_from_slice(&case.history);
            hist_off.push(hist.len() as u32);
        }
        c.push(Entry::from_u32("eval.users", self.cases.iter().map(|c| c.user).collect()));
        c.push(Entry::from_u32("eval.items", self.cases.iter().map(|c| c.item).collect()));
        c.push(Entry::from_u32("eval.neg_offsets", neg_off));
        c.push(Entry::from_u32("eval.negatives", negs));
        c.push(Entry::from_u32("eval.hist_offsets", hist_off));
        c.push(Entry::from_u32("eval.history", hist));

        if let Some(side) = &self.side {
            let mut off = vec![0u32];
            let mut cats = Vec::new();
            for ic in &side.item_categories {
                cats.extend_from_slice(ic);
                off.push(cats.len() as u32);
            }
            c.push(Entry::from_u32("side.offsets", off));
            c.push(Entry::from_u32("side.categories", cats));
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?, path)
    }

    pub fn from_container(c: &Container, origin: &Path) -> Result<Self> {
        let bad = |reason: String| Error::format(origin, reason);
        let header: Header =
            serde_json::from_str(&c.header).map_err(|e| bad(format!("dataset header: {e}")))?;
        if header.kind != KIND || header.version != VERSION {
            return Err(bad(format!(
                "expected a {KIND} v{VERSION} file, found {} v{}",
                header.kind, header.version
            )));
        }
        let get = |name: &str| -> Result<&[u32]> {
            c.get(name)
                .map(|e| e.words.as_slice())
                .ok_or_else(|| bad(format!("missing entry {name}")))
        };
        let (m, n) = (header.users.len(), header.items.len());
        let check_item = |i: u32| -> Result<u32> {
            if (i as usize) < n {
                Ok(i)
            } else {
                Err(bad(format!("item index {i} out of range")))
            }
        };
        let split_csr = |off: &[u32], vals: &[u32], rows: usize, what: &str| -> Result<Vec<(usize, usize)>> {
            if off.len() != rows + 1 || off[0] != 0 || *off.last().unwrap() as usize != vals.len() {
                return Err(bad(format!("inconsistent {what} offsets")));
            }
            off.windows(2)
                .map(|w| {
                    if w[0] > w[1] {
                        Err(bad(format!("decreasing {what} offsets")))
                    } else {
                        Ok((w[0] as usize, w[1] as usize))
                    }
                })
                .collect()
        };

        let items = get("train.items")?;
        let kinds = get("train.behaviour")?;
        let (lo, hi) = (get("train.ts_lo")?, get("train.ts_hi")?);
        if kinds.len() != items.len() || lo.len() != items.len() || hi.len() != items.len() {
            return Err(bad("train arrays differ in length".into()));
        }
        let mut events = Vec::with_capacity(m);
        for (a, b) in split_csr(get("train.offsets")?, items, m, "train")? {
            let mut ev = Vec::with_capacity(b - a);
            for k in a..b {
                ev.push(Event {
                    timestamp: ((hi[k] as u64) << 32 | lo[k] as u64) as i64,
                    item: check_item(items[k])?,
                    behaviour: if kinds[k] == 1 {
                        Behaviour::Explicit
                    } else {
                        Behaviour::Implicit
                    },
                });
            }
            events.push(ev);
        }
        let train = InteractionStore::from_events(header.users, header.items, events);

        let users = get("eval.users")?;
        let gts = get("eval.items")?;
        if users.len() != gts.len() {
            return Err(bad("eval arrays differ in length".into()));
        }
        let negs = get("eval.negatives")?;
        let hist = get("eval.history")?;
        let neg_rows = split_csr(get("eval.neg_offsets")?, negs, users.len(), "negative")?;
        let hist_rows = split_csr(get("eval.hist_offsets")?, hist, users.len(), "history")?;
        let mut cases = Vec::with_capacity(users.len());
        for k in 0..users.len() {
            if users[k] as usize >= m {
                return Err(bad(format!("user index {} out of range", users[k])));
            }
            let (na, nb) = neg_rows[k];
            let (ha, hb) = hist_rows[k];
            cases.push(EvalCase {
                user: users[k],
                item: check_item(gts[k])?,
                negatives: negs[na..nb].iter().map(|&i| check_item(i)).collect::<Result<_>>()?,
                history: hist[ha..hb].iter().map(|&i| check_item(i)).collect::<Result<_>>()?,
            });
        }

        let side = match header.categories {
            None => None,
            Some(labels) => {
                let cats = get("side.categories")?;
                let t = labels.len() as u32;
                let mut item_categories = Vec::with_capacity(n);
                for (a, b) in split_csr(get("side.offsets")?, cats, n, "side")? {
                    if cats[a..b].iter().any(|&c| c >= t) {
                        return Err(bad("category index out of range".into()));
                    }
                    item_categories.push(cats[a..b].to_vec());
                }
                Some(SideInfo::from_item_categories(labels, item_categories, &train))
            }
        };
        Ok(PreparedDataset {
            stats: header.stats,
            train,
            cases,
            side,
        })
    }
}
