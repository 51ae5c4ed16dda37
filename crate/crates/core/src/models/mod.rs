//! The implicit-to-explicit models: a NeuMF-based one and a transformer
//! session encoder variant, each optionally fed with category side
//! information.
//!
//! Both produce, per (user, item) pair, the implicit probability `x̂` and
//! the explicit probability `ŷ`; items are ranked by `x̂·ŷ`.

mod bert;
pub mod checkpoint;
mod ite;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use bert::{bert_ite_forward, BertIteModel};
pub use ite::{ite_forward, IteModel};

use crate::data::SideInfo;
use crate::error::{Error, Result};
use crate::layers::{EmbeddingTable, SideVector};
use crate::numerics::{ModelParams, ParamId, Real, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "ite")]
    Ite,
    #[serde(rename = "ite-si")]
    IteSi,
    #[serde(rename = "ite-ossi")]
    IteOssi,
    #[serde(rename = "bert-ite")]
    BertIte,
    #[serde(rename = "bert-ite-si")]
    BertIteSi,
    #[serde(rename = "bert-ite-ossi")]
    BertIteOssi,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Architecture {
    Ite,
    BertIte,
}

/// Which representations receive category side vectors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SideMode {
    None,
    ItemOnly,
    UserAndItem,
}

impl SideMode {
    pub fn user(self) -> bool {
        self == SideMode::UserAndItem
    }

    pub fn item(self) -> bool {
        self != SideMode::None
    }
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Ite,
        Variant::IteSi,
        Variant::IteOssi,
        Variant::BertIte,
        Variant::BertIteSi,
        Variant::BertIteOssi,
    ];

    pub fn architecture(self) -> Architecture {
        match self {
            Variant::Ite | Variant::IteSi | Variant::IteOssi => Architecture::Ite,
            _ => Architecture::BertIte,
        }
    }

    pub fn side_mode(self) -> SideMode {
        match self {
            Variant::Ite | Variant::BertIte => SideMode::None,
            Variant::IteOssi | Variant::BertIteOssi => SideMode::ItemOnly,
            Variant::IteSi | Variant::BertIteSi => SideMode::UserAndItem,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Ite => "ite",
            Variant::IteSi => "ite-si",
            Variant::IteOssi => "ite-ossi",
            Variant::BertIte => "bert-ite",
            Variant::BertIteSi => "bert-ite-si",
            Variant::BertIteOssi => "bert-ite-ossi",
        }
    }

    /// Tuned batch sizes: 512 for the transformer models, 2048 otherwise.
    pub fn default_batch_size(self) -> usize {
        match self.architecture() {
            Architecture::Ite => 2048,
            Architecture::BertIte => 512,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown model variant {s:?}")))
    }
}

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Embedding size `K`.
    pub embedding_dim: usize,
    /// Items of history fed to the transformer (`n`).
    pub seq_len: usize,
    /// Transformer layers (`L`).
    pub layers: usize,
    pub heads: usize,
    /// Widths in the implicit MLP tower, input included (`X`).
    pub implicit_depth: usize,
    /// Widths in the explicit MLP tower, input included (`Y`).
    pub explicit_depth: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embedding_dim: 8,
            seq_len: 20,
            layers: 2,
            heads: 2,
            implicit_depth: 3,
            explicit_depth: 3,
            dropout: 0.1,
        }
    }
}

/// Tower widths `[base, base/2, base/4, ...]` of the given depth.
pub fn tower_widths(base: usize, depth: usize) -> Result<Vec<usize>> {
    if depth == 0 {
        return Err(Error::Config("MLP tower depth must be at least 1".into()));
    }
    let div = 1usize << (depth - 1);
    if base == 0 || !base.is_multiple_of(div) {
        return Err(Error::Config(format!(
            "tower starting at width {base} cannot halve {} times",
            depth - 1
        )));
    }
    Ok((0..depth).map(|j| base >> j).collect())
}

impl ModelConfig {
    pub fn validate(&self, variant: Variant) -> Result<()> {
        let k = self.embedding_dim;
        if k == 0 {
            return Err(Error::Config("embedding_dim must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        match variant.architecture() {
            Architecture::Ite => {
                self.implicit_widths()?;
                tower_widths(2 * k, self.explicit_depth)?;
            }
            Architecture::BertIte => {
                if self.heads == 0 || !k.is_multiple_of(self.heads) {
                    return Err(Error::Config(format!(
                        "embedding_dim {k} is not divisible by {} heads",
                        self.heads
                    )));
                }
                if self.seq_len == 0 {
                    return Err(Error::Config("seq_len must be at least 1".into()));
                }
                tower_widths(k, self.explicit_depth)?;
            }
        }
        Ok(())
    }

    /// Implicit tower: input `concat(p_M, q_M)` down to `K`.
    pub fn implicit_widths(&self) -> Result<Vec<usize>> {
        let k = self.embedding_dim;
        let top = k << (self.implicit_depth.max(1) - 1);
        if !top.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "implicit tower input width {top} must be even (two embeddings)"
            )));
        }
        tower_widths(top, self.implicit_depth)
    }
}

/// Catalog sizes a model is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub users: usize,
    pub items: usize,
    pub categories: usize,
}

/// Rows to score: user `users[b]` against item `items[b]`, and for the
/// transformer models the `seq_len` history items of row `b` at
/// `sequences[b·n..(b+1)·n]`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Batch {
    pub users: Vec<usize>,
    pub items: Vec<usize>,
    pub sequences: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Outputs {
    /// `[B × 1]` implicit probabilities.
    pub x_hat: Var,
    /// `[B × 1]` explicit probabilities.
    pub y_hat: Var,
    /// Explicit-module input (`φ^I` / `φ_I`), `[B × ·]`.
    pub implicit_layer: Var,
}

pub enum Model<T: Real> {
    Ite(IteModel<T>),
    Bert(BertIteModel<T>),
}

impl<T: Real> Model<T> {
    pub fn new<R: Rng + ?Sized>(variant: Variant, cfg: &ModelConfig, vocab: Vocab, rng: &mut R) -> Result<Self> {
        cfg.validate(variant)?;
        if variant.side_mode() != SideMode::None && vocab.categories == 0 {
            return Err(Error::Config(format!(
                "{variant} needs category side information, but the dataset has none"
            )));
        }
        Ok(match variant.architecture() {
            Architecture::Ite => Model::Ite(IteModel::new(variant, cfg.clone(), vocab, rng)?),
            Architecture::BertIte => Model::Bert(BertIteModel::new(variant, cfg.clone(), vocab, rng)?),
        })
    }

    pub fn variant(&self) -> Variant {
        match self {
            Model::Ite(m) => m.variant,
            Model::Bert(m) => m.variant,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            Model::Ite(m) => &m.config,
            Model::Bert(m) => &m.config,
        }
    }

    pub fn vocab(&self) -> Vocab {
        match self {
            Model::Ite(m) => m.vocab,
            Model::Bert(m) => m.vocab,
        }
    }

    pub fn params(&self) -> &ModelParams<T> {
        match self {
            Model::Ite(m) => &m.params,
            Model::Bert(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ModelParams<T> {
        match self {
            Model::Ite(m) => &mut m.params,
            Model::Bert(m) => &mut m.params,
        }
    }

    /// The implicit output head `h_I`.
    pub fn implicit_head(&self) -> ParamId {
        match self {
            Model::Ite(m) => m.h_implicit,
            Model::Bert(m) => m.h_implicit,
        }
    }

    /// History length the model consumes; zero for the NeuMF-based models.
    pub fn seq_len(&self) -> usize {
        match self {
            Model::Ite(_) => 0,
            Model::Bert(m) => m.config.seq_len,
        }
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_, T>,
        batch: &Batch,
        side: Option<&SideInfo>,
        training: bool,
        rng: &mut R,
    ) -> Result<Outputs> {
        match self {
            Model::Ite(m) => m.forward(tape, batch, side),
            Model::Bert(m) => m.forward(tape, batch, side, training, rng),
        }
    }

    /// Sum of squared norms of the user and item embedding rows the batch
    /// touches.
    pub fn regularizer(&self, tape: &mut Tape<'_, T>, batch: &Batch) -> Result<Var> {
        match self {
            Model::Ite(m) => m.regularizer(tape, batch),
            Model::Bert(m) => m.regularizer(tape, batch),
        }
    }

    /// Evaluation-mode scores `x̂·ŷ` for each row of the batch.
    pub fn score(&self, batch: &Batch, side: Option<&SideInfo>) -> Result<Vec<T>> {
        let mut tape = Tape::new(self.params());
        // dropout is off, so the generator is never drawn from
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let out = self.forward(&mut tape, batch, side, false, &mut rng)?;
        let (x, y) = (tape.value(out.x_hat).data(), tape.value(out.y_hat).data());
        Ok(x.iter().zip(y).map(|(&a, &b)| predict_score(a, b)).collect())
    }
}

/// Final ranking score `r̂ = x̂·ŷ`.
pub fn predict_score<T: Real>(x_hat: T, y_hat: T) -> T {
    x_hat * y_hat
}

/// Category-frequency vector of a user: entry `j` is the share of the
/// user's distinct items that belong to category `j`, with an item in
/// several categories counted once per category. All zero when none of the
/// items is categorized.
pub fn encode_side_user(items: &[u32], item_categories: &[Vec<u32>], num_categories: usize) -> Vec<f64> {
    let mut distinct = items.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    let mut counts = vec![0usize; num_categories];
    for &i in &distinct {
        for &c in &item_categories[i as usize] {
            counts[c as usize] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return vec![0.0; num_categories];
    }
    counts.iter().map(|&c| c as f64 / total as f64).collect()
}

/// Side vectors for a list of ids, or `None` when the mode does not use
/// them for this role.
pub(crate) fn side_bags<T: Real>(
    side: Option<&SideInfo>,
    wanted: bool,
    ids: &[usize],
    user: bool,
    variant: Variant,
) -> Result<Option<Vec<SideVector<T>>>> {
    if !wanted {
        return Ok(None);
    }
    let side = side.ok_or_else(|| Error::Config(format!("{variant} requires side information")))?;
    let bags = ids
        .iter()
        .map(|&i| {
            let n = if user { side.user_profiles.len() } else { side.item_categories.len() };
            if i >= n {
                return Err(Error::Index {
                    what: if user { "user side vector" } else { "item side vector" },
                    index: i,
                    len: n,
                });
            }
            Ok(if user { side.user_side(i) } else { side.item_side(i) })
        })
        .collect::<Result<_>>()?;
    Ok(Some(bags))
}

/// Squared norms of the distinct rows of `table` named in `ids`.
pub(crate) fn touched_rows_l2<T: Real>(tape: &mut Tape<'_, T>, table: &EmbeddingTable, ids: &[usize]) -> Result<Var> {
    let mut unique = ids.to_vec();
    unique.sort_unstable();
    unique.dedup();
    let rows = tape.gather(table.rows, &unique)?;
    Ok(tape.l2_sq(rows))
}
