use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use log::warn;

use super::InteractionStore;
use crate::error::{Error, Result};
use crate::layers::SideVector;
use crate::models::encode_side_user;
use crate::numerics::Real;

/// External item id → category labels, in file order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CategoryMap {
    pub items: HashMap<String, Vec<String>>,
    /// Rows that could not be parsed.
    pub skipped: usize,
}

impl CategoryMap {
    pub fn insert(&mut self, item: &str, category: &str) {
        let cats = self.items.entry(item.to_string()).or_default();
        if !cats.iter().any(|c| c == category) {
            cats.push(category.to_string());
        }
    }
}

fn is_header(a: &str, b: &str) -> bool {
    let norm = |s: &str| s.trim().to_ascii_lowercase().replace('_', "");
    norm(a) == "itemid" && norm(b) == "categoryid"
}

/// Reads `item_id,category_id` rows. An item may appear on several rows.
pub fn read_category_file(path: &Path, delimiter: u8) -> Result<CategoryMap> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_categories(file, delimiter)
}

pub(crate) fn read_categories<R: Read>(reader: R, delimiter: u8) -> Result<CategoryMap> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut map = CategoryMap::default();
    for (row, rec) in rdr.records().enumerate() {
        let rec = match rec {
            Ok(r) => r,
            Err(_) => {
                map.skipped += 1;
                continue;
            }
        };
        let (item, cat) = match (rec.get(0).map(str::trim), rec.get(1).map(str::trim)) {
            (Some(i), Some(c)) if rec.len() == 2 && !i.is_empty() && !c.is_empty() => (i, c),
            _ => {
                map.skipped += 1;
                continue;
            }
        };
        if row == 0 && is_header(item, cat) {
            continue;
        }
        map.insert(item, cat);
    }
    if map.skipped > 0 {
        warn!("skipped {} malformed category rows", map.skipped);
    }
    Ok(map)
}

/// Converts Retail Rocket `item_properties` dumps
/// (`timestamp,itemid,property,value`) into `itemid,categoryid` rows,
/// keeping the latest `categoryid` value per item. Returns the number of
/// items written.
pub fn convert_item_properties(inputs: &[&Path], out: &Path) -> Result<usize> {
    let mut latest: HashMap<String, (i64, String)> = HashMap::new();
    for path in inputs {
        let file = File::open(path).map_err(|e| Error::io(*path, e))?;
        collect_latest_categories(file, &mut latest)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    }
    let mut rows: Vec<(&String, &String)> = latest.iter().map(|(k, (_, v))| (k, v)).collect();
    rows.sort();
    let file = File::create(out).map_err(|e| Error::io(out, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(out, e);
    writeln!(w, "itemid,categoryid").map_err(io)?;
    for (item, cat) in &rows {
        writeln!(w, "{item},{cat}").map_err(io)?;
    }
    w.flush().map_err(io)?;
    Ok(rows.len())
}

pub(crate) fn collect_latest_categories<R: Read>(
    reader: R,
    latest: &mut HashMap<String, (i64, String)>,
) -> Result<()> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Data(e.to_string()))?;
        if rec.get(2) != Some("categoryid") {
            continue;
        }
        let (Some(ts), Some(item), Some(value)) = (rec.get(0), rec.get(1), rec.get(3)) else {
            continue;
        };
        let Ok(ts) = ts.trim().parse::<i64>() else { continue };
        match latest.get(item) {
            Some((prev, _)) if *prev > ts => {}
            _ => {
                latest.insert(item.to_string(), (ts, value.trim().to_string()));
            }
        }
    }
    Ok(())
}

/// Category multi-hot vectors for items and category-frequency vectors for
/// users.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SideInfo {
    /// Category labels; position is the category index.
    pub labels: Vec<String>,
    /// Per item, sorted category indices (the non-zeros of its multi-hot).
    pub item_categories: Vec<Vec<u32>>,
    /// Per user, non-zero entries of the frequency vector.
    pub user_profiles: Vec<Vec<(u32, f32)>>,
}

impl SideInfo {
    pub fn from_item_categories(labels: Vec<String>, item_categories: Vec<Vec<u32>>, store: &InteractionStore) -> Self {
        let t = labels.len();
        let user_profiles = (0..store.num_users() as u32)
            .map(|u| {
                let items: Vec<u32> = store.implicit(u).iter().collect();
                encode_side_user(&items, &item_categories, t)
                    .into_iter()
                    .enumerate()
                    .filter(|(_, v)| *v != 0.0)
                    .map(|(c, v)| (c as u32, v as f32))
                    .collect()
            })
            .collect();
        SideInfo {
            labels,
            item_categories,
            user_profiles,
        }
    }

    pub fn num_categories(&self) -> usize {
        self.labels.len()
    }

    pub fn item_vector(&self, item: u32) -> Vec<f32> {
        let mut v = vec![0.0; self.num_categories()];
        for &c in &self.item_categories[item as usize] {
            v[c as usize] = 1.0;
        }
        v
    }

    pub fn user_vector(&self, user: u32) -> Vec<f32> {
        let mut v = vec![0.0; self.num_categories()];
        for &(c, w) in &self.user_profiles[user as usize] {
            v[c as usize] = w;
        }
        v
    }

    pub fn item_side<T: Real>(&self, item: usize) -> SideVector<T> {
        self.item_categories[item]
            .iter()
            .map(|&c| (c as usize, T::one()))
            .collect()
    }

    pub fn user_side<T: Real>(&self, user: usize) -> SideVector<T> {
        self.user_profiles[user]
            .iter()
            .map(|&(c, w)| (c as usize, T::from_f64_lossy(w as f64)))
            .collect()
    }

    /// Users whose frequency vector is all zero (no categorized items).
    pub fn uncategorized_users(&self) -> usize {
        self.user_profiles.iter().filter(|p| p.is_empty()).count()
    }
}

/// Indexes the categories of the store's items (in order of first
/// appearance over items) and computes each user's frequency vector from
/// the store's interactions. Pass the training view so held-out items do
/// not leak into user profiles.
pub fn build_side_info(store: &InteractionStore, categories: &CategoryMap) -> SideInfo {
    let mut label_index: HashMap<&str, u32> = HashMap::new();
    let mut labels = Vec::new();
    let mut item_categories = Vec::with_capacity(store.num_items());
    for i in 0..store.num_items() as u32 {
        let mut cats: Vec<u32> = categories
            .items
            .get(store.item_id(i))
            .map(|cs| {
                cs.iter()
                    .map(|c| {
                        *label_index.entry(c.as_str()).or_insert_with(|| {
                            labels.push(c.clone());
                            (labels.len() - 1) as u32
                        })
                    })
                    .collect()
            })
            .unwrap_or_default();
        cats.sort_unstable();
        cats.dedup();
        item_categories.push(cats);
    }
    let info = SideInfo::from_item_categories(labels, item_categories, store);
    let flagged = info.uncategorized_users();
    if flagged > 0 {
        warn!("{flagged} users have no categorized interactions; their side vector is zero");
    }
    info
}
