use rand::Rng;

use super::{side_bags, touched_rows_l2, Batch, ModelConfig, Outputs, Variant, Vocab};
use crate::data::SideInfo;
use crate::error::{Error, Result};
use crate::layers::{glorot_uniform, Activation, DenseLayer, EmbeddingTable};
use crate::numerics::{ModelParams, ParamId, Real, Tape, Var};

/// NeuMF implicit module (GMF and MLP branches) feeding an MLP explicit
/// module.
pub struct IteModel<T: Real> {
    pub variant: Variant,
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub params: ModelParams<T>,
    pub user_gmf: EmbeddingTable,
    pub item_gmf: EmbeddingTable,
    pub user_mlp: EmbeddingTable,
    pub item_mlp: EmbeddingTable,
    pub implicit_tower: Vec<DenseLayer>,
    pub explicit_tower: Vec<DenseLayer>,
    pub h_implicit: ParamId,
    pub h_explicit: ParamId,
}

pub(super) fn tower<T: Real, R: Rng + ?Sized>(
    params: &mut ModelParams<T>,
    name: &str,
    widths: &[usize],
    rng: &mut R,
) -> Result<Vec<DenseLayer>> {
    widths
        .windows(2)
        .enumerate()
        .map(|(j, w)| DenseLayer::new(params, &format!("{name}.{j}"), w[0], w[1], Activation::Relu, rng))
        .collect()
}

pub(super) fn run_tower<T: Real>(tape: &mut Tape<'_, T>, layers: &[DenseLayer], mut x: Var) -> Result<Var> {
    for layer in layers {
        x = layer.forward(tape, x)?;
    }
    Ok(x)
}

impl<T: Real> IteModel<T> {
    pub fn new<R: Rng + ?Sized>(variant: Variant, config: ModelConfig, vocab: Vocab, rng: &mut R) -> Result<Self> {
        config.validate(variant)?;
        let k = config.embedding_dim;
        let mode = variant.side_mode();
        let side = |on: bool| on.then_some(vocab.categories);
        let implicit = config.implicit_widths()?;
        let explicit = super::tower_widths(2 * k, config.explicit_depth)?;
        let mlp_dim = implicit[0] / 2;

        let mut params = ModelParams::new();
        let user_gmf = EmbeddingTable::new(&mut params, "user_gmf", vocab.users, k, side(mode.user()), rng)?;
        let item_gmf = EmbeddingTable::new(&mut params, "item_gmf", vocab.items, k, side(mode.item()), rng)?;
        let user_mlp = EmbeddingTable::new(&mut params, "user_mlp", vocab.users, mlp_dim, side(mode.user()), rng)?;
        let item_mlp = EmbeddingTable::new(&mut params, "item_mlp", vocab.items, mlp_dim, side(mode.item()), rng)?;
        let implicit_tower = tower(&mut params, "implicit_mlp", &implicit, rng)?;
        let explicit_tower = tower(&mut params, "explicit_mlp", &explicit, rng)?;
        let h_implicit = params.register("h_implicit", glorot_uniform(rng, 2 * k, 1))?;
        let h_explicit = params.register("h_explicit", glorot_uniform(rng, *explicit.last().unwrap(), 1))?;
        Ok(IteModel {
            variant,
            config,
            vocab,
            params,
            user_gmf,
            item_gmf,
            user_mlp,
            item_mlp,
            implicit_tower,
            explicit_tower,
            h_implicit,
            h_explicit,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_, T>, batch: &Batch, side: Option<&SideInfo>) -> Result<Outputs> {
        if batch.items.len() != batch.users.len() {
            return Err(Error::Shape {
                op: "ite batch",
                left: vec![batch.users.len()],
                right: vec![batch.items.len()],
            });
        }
        let mode = self.variant.side_mode();
        let user_side = side_bags::<T>(side, mode.user(), &batch.users, true, self.variant)?;
        let item_side = side_bags::<T>(side, mode.item(), &batch.items, false, self.variant)?;

        let pg = self.user_gmf.lookup(tape, &batch.users, user_side.clone())?;
        let qg = self.item_gmf.lookup(tape, &batch.items, item_side.clone())?;
        let gmf = tape.mul(pg, qg)?;

        let pm = self.user_mlp.lookup(tape, &batch.users, user_side)?;
        let qm = self.item_mlp.lookup(tape, &batch.items, item_side)?;
        let z = tape.concat(pm, qm, 1)?;
        let mlp = run_tower(tape, &self.implicit_tower, z)?;

        let phi = tape.concat(gmf, mlp, 1)?;
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
        let mut total = touched_rows_l2(tape, &self.user_gmf, &batch.users)?;
        for (table, ids) in [
            (&self.user_mlp, &batch.users),
            (&self.item_gmf, &batch.items),
            (&self.item_mlp, &batch.items),
        ] {
            let r = touched_rows_l2(tape, table, ids)?;
            total = tape.add(total, r)?;
        }
        Ok(total)
    }
}

/// `(x̂, ŷ)` for a single pair in evaluation mode.
pub fn ite_forward<T: Real>(model: &IteModel<T>, user: usize, item: usize, side: Option<&SideInfo>) -> Result<(T, T)> {
    let mut tape = Tape::new(&model.params);
    let batch = Batch {
        users: vec![user],
        items: vec![item],
        sequences: Vec::new(),
    };
    let out = model.forward(&mut tape, &batch, side)?;
    Ok((tape.scalar(out.x_hat), tape.scalar(out.y_hat)))
}
