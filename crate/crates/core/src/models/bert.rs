use rand::Rng;

use super::ite::{run_tower, tower};
use super::{side_bags, touched_rows_l2, Batch, ModelConfig, Outputs, Variant, Vocab};
use crate::data::SideInfo;
use crate::error::{Error, Result};
use crate::layers::{glorot_uniform, DenseLayer, EmbeddingTable, TransformerLayer};
use crate::numerics::{ModelParams, ParamId, Real, Tape, Var};

/// Transformer implicit module over `[user; history; target]` feeding an
/// MLP explicit module.
pub struct BertIteModel<T: Real> {
    pub variant: Variant,
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub params: ModelParams<T>,
    pub users: EmbeddingTable,
    pub items: EmbeddingTable,
    pub layers: Vec<TransformerLayer>,
    pub explicit_tower: Vec<DenseLayer>,
    pub h_implicit: ParamId,
    pub h_explicit: ParamId,
}

impl<T: Real> BertIteModel<T> {
    pub fn new<R: Rng + ?Sized>(variant: Variant, config: ModelConfig, vocab: Vocab, rng: &mut R) -> Result<Self> {
        config.validate(variant)?;
        let k = config.embedding_dim;
        let mode = variant.side_mode();
        let side = |on: bool| on.then_some(vocab.categories);
        let explicit = super::tower_widths(k, config.explicit_depth)?;

        let mut params = ModelParams::new();
        let users = EmbeddingTable::new(&mut params, "user_emb", vocab.users, k, side(mode.user()), rng)?;
        let items = EmbeddingTable::new(&mut params, "item_emb", vocab.items, k, side(mode.item()), rng)?;
        let layers = (0..config.layers)
            .map(|l| TransformerLayer::new(&mut params, &format!("layer{l}"), k, config.heads, config.dropout, rng))
            .collect::<Result<Vec<_>>>()?;
        let explicit_tower = tower(&mut params, "explicit_mlp", &explicit, rng)?;
        let h_implicit = params.register("h_implicit", glorot_uniform(rng, k, 1))?;
        let h_explicit = params.register("h_explicit", glorot_uniform(rng, *explicit.last().unwrap(), 1))?;
        Ok(BertIteModel {
            variant,
            config,
            vocab,
            params,
            users,
            items,
            layers,
            explicit_tower,
            h_implicit,
            h_explicit,
        })
    }

    /// Rows per example fed to the transformer: user, history, target.
    pub fn group(&self) -> usize {
        self.config.seq_len + 2
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_, T>,
        batch: &Batch,
        side: Option<&SideInfo>,
        training: bool,
        rng: &mut R,
    ) -> Result<Outputs> {
        let b = batch.len();
        let n = self.config.seq_len;
        if batch.items.len() != b || batch.sequences.len() != b * n {
            return Err(Error::Shape {
                op: "bert-ite batch",
                left: vec![b, b, b * n],
                right: vec![batch.users.len(), batch.items.len(), batch.sequences.len()],
            });
        }
        let mode = self.variant.side_mode();
        let user_side = side_bags::<T>(side, mode.user(), &batch.users, true, self.variant)?;
        let seq_side = side_bags::<T>(side, mode.item(), &batch.sequences, false, self.variant)?;
        let target_side = side_bags::<T>(side, mode.item(), &batch.items, false, self.variant)?;

        let u = self.users.lookup(tape, &batch.users, user_side)?;
        let s = self.items.lookup(tape, &batch.sequences, seq_side)?;
        let target = self.items.lookup(tape, &batch.items, target_side)?;

        // Stack [U; S; targets] and reorder into per-example blocks.
        let us = tape.concat(u, s, 0)?;
        let all = tape.concat(us, target, 0)?;
        let group = self.group();
        let mut order = Vec::with_capacity(b * group);
        for r in 0..b {
            order.push(r);
            order.extend((0..n).map(|j| b + r * n + j));
            order.push(b + b * n + r);
        }
        let mut h = tape.gather_rows(all, &order)?;
        for layer in &self.layers {
            h = layer.forward(tape, h, group, training, rng)?;
        }
        let firsts: Vec<usize> = (0..b).map(|r| r * group).collect();
        let u_rep = tape.gather_rows(h, &firsts)?;

        let phi = tape.mul(u_rep, target)?;
        let hi = tape.param(self.h_implicit);
        let logit = tape.matmul(phi, hi)?;
        let x_hat = tape.sigmoid(logit);

        let e = run_tower(tape, &self.explicit_tower, phi)?;
        let he = tape.param(self.h_explicit);
        let logit = tape.matmul(e, he)?;
        let y_hat = tape.sigmoid(logit);
        Ok(Outputs {
            x_hat,
            y_hat,
            implicit_layer: phi,
        })
    }

    pub fn regularizer(&self, tape: &mut Tape<'_, T>, batch: &Batch) -> Result<Var> {
        let user = touched_rows_l2(tape, &self.users, &batch.users)?;
        let mut items = batch.items.clone();
        items.extend_from_slice(&batch.sequences);
        let item = touched_rows_l2(tape, &self.items, &items)?;
        tape.add(user, item)
    }
}

/// `(x̂, ŷ)` for one user, padded history of length `n`, and target, in
/// evaluation mode.
pub fn bert_ite_forward<T: Real>(
    model: &BertIteModel<T>,
    user: usize,
    sequence: &[usize],
    target: usize,
    side: Option<&SideInfo>,
) -> Result<(T, T)> {
    let mut tape = Tape::new(&model.params);
    let batch = Batch {
        users: vec![user],
        items: vec![target],
        sequences: sequence.to_vec(),
    };
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let out = model.forward(&mut tape, &batch, side, false, &mut rng)?;
    Ok((tape.scalar(out.x_hat), tape.scalar(out.y_hat)))
}
