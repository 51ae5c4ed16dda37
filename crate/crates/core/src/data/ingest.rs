use std::collections::HashMap;
use std::fs::File;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Behaviour, Event, InteractionStore};
use crate::error::{Error, Result};

/// Header names of the four columns the ingester reads.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnNames {
    pub timestamp: String,
    pub user: String,
    pub event: String,
    pub item: String,
}

impl Default for ColumnNames {
    /// Retail Rocket `events.csv`.
    fn default() -> Self {
        ColumnNames {
            timestamp: "timestamp".into(),
            user: "visitorid".into(),
            event: "event".into(),
            item: "itemid".into(),
        }
    }
}

/// Maps raw event-type strings to implicit or explicit behaviour.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Classification(pub HashMap<String, Behaviour>);

impl Classification {
    /// Views/clicks are implicit; add-to-cart and transactions are explicit.
    pub fn retail_rocket() -> Self {
        let mut m = HashMap::new();
        m.insert("view".into(), Behaviour::Implicit);
        m.insert("click".into(), Behaviour::Implicit);
        m.insert("addtocart".into(), Behaviour::Explicit);
        m.insert("transaction".into(), Behaviour::Explicit);
        Classification(m)
    }

    /// Parses `name=implicit,name=explicit,...`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut m = HashMap::new();
        for part in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (name, kind) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected name=implicit|explicit, got {part:?}")))?;
            let kind = match kind.trim() {
                "implicit" => Behaviour::Implicit,
                "explicit" => Behaviour::Explicit,
                other => return Err(Error::Config(format!("unknown behaviour {other:?}"))),
            };
            m.insert(name.trim().to_string(), kind);
        }
        if m.is_empty() {
            return Err(Error::Config("empty event classification".into()));
        }
        Ok(Classification(m))
    }

    pub fn classify(&self, event: &str) -> Option<Behaviour> {
        self.0.get(event).copied()
    }
}

impl Default for Classification {
    fn default() -> Self {
        Classification::retail_rocket()
    }
}

#[derive(Clone, Debug)]
pub struct IngestOptions {
    pub columns: ColumnNames,
    pub delimiter: u8,
    pub classification: Classification,
    /// Users with fewer events than this (implicit and explicit together)
    /// are dropped.
    pub min_interactions: usize,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions {
            columns: ColumnNames::default(),
            delimiter: b',',
            classification: Classification::default(),
            min_interactions: 5,
        }
    }
}

pub fn ingest(path: &Path, opts: &IngestOptions) -> Result<InteractionStore> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_reader(file, opts).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

fn find_column(headers: &csv::StringRecord, wanted: &str, fallbacks: &[&str]) -> Result<usize> {
    let pos = |name: &str| headers.iter().position(|h| h.trim() == name);
    pos(wanted)
        .or_else(|| fallbacks.iter().find_map(|f| pos(f)))
        .ok_or_else(|| Error::Data(format!("missing column {wanted:?} (header: {headers:?})")))
}

struct RawEvent {
    user: u32,
    item: String,
    timestamp: i64,
    behaviour: Behaviour,
}

/// Reads an event log, drops users under the interaction threshold and
/// reindexes users and items by first appearance.
pub fn ingest_reader<R: Read>(reader: R, opts: &IngestOptions) -> Result<InteractionStore> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(opts.delimiter)
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Data(format!("unreadable header: {e}")))?
        .clone();
    let c = &opts.columns;
    let ts_col = find_column(&headers, &c.timestamp, &[])?;
    let user_col = find_column(&headers, &c.user, &["userid", "user_id", "visitorid"])?;
    let event_col = find_column(&headers, &c.event, &["event_type"])?;
    let item_col = find_column(&headers, &c.item, &["item_id", "itemid"])?;

    let mut user_first: HashMap<String, u32> = HashMap::new();
    let mut user_names: Vec<String> = Vec::new();
    let mut raw = Vec::new();
    let mut record = csv::StringRecord::new();
    let mut line = 1usize;
    while rdr
        .read_record(&mut record)
        .map_err(|e| Error::Data(format!("line {}: {e}", line + 1)))?
    {
        line += 1;
        let field = |i: usize| -> Result<&str> {
            record
                .get(i)
                .map(str::trim)
                .ok_or_else(|| Error::Data(format!("line {line}: missing field {i}")))
        };
        let timestamp: i64 = field(ts_col)?
            .parse()
            .map_err(|_| Error::Data(format!("line {line}: bad timestamp {:?}", record.get(ts_col))))?;
        let event = field(event_col)?;
        let behaviour = opts
            .classification
            .classify(event)
            .ok_or_else(|| Error::Data(format!("line {line}: unknown event type {event:?}")))?;
        let user_name = field(user_col)?;
        let user = match user_first.get(user_name) {
            Some(&u) => u,
            None => {
                let u = user_names.len() as u32;
                user_first.insert(user_name.to_string(), u);
                user_names.push(user_name.to_string());
                u
            }
        };
        raw.push(RawEvent {
            user,
            item: field(item_col)?.to_string(),
            timestamp,
            behaviour,
        });
    }
    if raw.is_empty() {
        return Err(Error::Data("event log has no records".into()));
    }

    let mut counts = vec![0usize; user_names.len()];
    for e in &raw {
        counts[e.user as usize] += 1;
    }

    let mut new_user: Vec<Option<u32>> = vec![None; user_names.len()];
    let mut user_ids = Vec::new();
    let mut item_index: HashMap<String, u32> = HashMap::new();
    let mut item_ids = Vec::new();
    let mut events: Vec<Vec<Event>> = Vec::new();
    for e in raw {
        if counts[e.user as usize] < opts.min_interactions {
            continue;
        }
        let u = *new_user[e.user as usize].get_or_insert_with(|| {
            user_ids.push(user_names[e.user as usize].clone());
            events.push(Vec::new());
            (user_ids.len() - 1) as u32
        });
        let item = match item_index.get(&e.item) {
            Some(&i) => i,
            None => {
                let i = item_ids.len() as u32;
                item_index.insert(e.item.clone(), i);
                item_ids.push(e.item);
                i
            }
        };
        events[u as usize].push(Event {
            timestamp: e.timestamp,
            item,
            behaviour: e.behaviour,
        });
    }
    for ev in &mut events {
        // stable: equal timestamps keep file order
        ev.sort_by_key(|e| e.timestamp);
    }
    Ok(InteractionStore::from_events(user_ids, item_ids, events))
}
