//! Joint implicit/explicit objective, negative sampling and the epoch loop.

mod adam;
mod sampling;

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use adam::Adam;
pub use sampling::{pad_sequence, sample_negatives, sample_unobserved};

use crate::data::split::dedup_consecutive;
use crate::data::{Behaviour, InteractionStore, SideInfo};
use crate::error::{Error, Result};
use crate::models::{Batch, Model};
use crate::numerics::{Real, Tape, Var};

/// Probabilities are clamped to this range before taking logarithms.
pub const PROB_CLAMP: (f64, f64) = (1e-7, 1.0 - 1e-7);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub lr: f64,
    /// Defaults by architecture when unset.
    pub batch_size: Option<usize>,
    /// Weight of the implicit loss term.
    pub eta: f64,
    /// Weight of the embedding L2 term.
    pub lambda: f64,
    pub negatives: usize,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            lr: 0.001,
            batch_size: None,
            eta: 0.5,
            lambda: 1e-6,
            negatives: 9,
            epochs: 50,
            seed: 42,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl TrainingConfig {
    // negated comparisons so that NaN is rejected too
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lr > 0.0) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(self.eta >= 0.0) {
            return bad(format!("eta must be non-negative, got {}", self.eta));
        }
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if self.batch_size == Some(0) {
            return bad("batch_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return bad("Adam needs beta1, beta2 in [0, 1) and epsilon > 0".into());
        }
        Ok(())
    }
}

/// `η·L_I + L_E + λ·R`, where `L_I` is the summed cross-entropy of `x̂` on
/// implicit rows, `L_E` that of `ŷ` on explicit rows, and `reg` (if any)
/// the squared-norm penalty.
#[allow(clippy::too_many_arguments)]
pub fn joint_loss<T: Real>(
    tape: &mut Tape<'_, T>,
    x_hat: Var,
    y_hat: Var,
    labels: &[T],
    explicit: &[bool],
    reg: Option<Var>,
    eta: f64,
    lambda: f64,
) -> Result<Var> {
    let eta = T::from_f64_lossy(eta);
    let lo = T::from_f64_lossy(PROB_CLAMP.0);
    let hi = T::from_f64_lossy(PROB_CLAMP.1);
    let wi = explicit.iter().map(|&e| if e { T::zero() } else { eta }).collect();
    let we = explicit.iter().map(|&e| if e { T::one() } else { T::zero() }).collect();
    let li = tape.bce(x_hat, labels.to_vec(), wi, lo, hi)?;
    let le = tape.bce(y_hat, labels.to_vec(), we, lo, hi)?;
    let mut loss = tape.add(li, le)?;
    if let Some(r) = reg {
        let r = tape.scale(r, T::from_f64_lossy(lambda));
        loss = tape.add(loss, r)?;
    }
    Ok(loss)
}

/// One labelled training row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Example {
    pub user: u32,
    pub item: u32,
    pub positive: bool,
    pub explicit: bool,
    /// Length of the user's sequence prefix that precedes this example.
    pub history: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub mean_loss: f64,
    pub steps: usize,
    pub examples: usize,
}

/// Per-user interaction sequence (consecutive repeats collapsed) and the
/// position of each item's first occurrence in it.
struct UserSequence {
    items: Vec<u32>,
    first: HashMap<u32, u32>,
}

pub struct Trainer<'a, T: Real> {
    store: &'a InteractionStore,
    side: Option<&'a SideInfo>,
    pub config: TrainingConfig,
    pub batch_size: usize,
    sequences: Vec<UserSequence>,
    optimizer: Adam<T>,
    epoch: usize,
}

impl<'a, T: Real> Trainer<'a, T> {
    pub fn new(
        model: &Model<T>,
        store: &'a InteractionStore,
        side: Option<&'a SideInfo>,
        config: TrainingConfig,
    ) -> Result<Self> {
        config.validate()?;
        if (0..store.num_users() as u32).all(|u| store.implicit(u).is_empty()) {
            return Err(Error::Config("training set is empty".into()));
        }
        let vocab = model.vocab();
        if vocab.users != store.num_users() || vocab.items != store.num_items() {
            return Err(Error::Config(format!(
                "model built for {}x{} users x items, data has {}x{}",
                vocab.users,
                vocab.items,
                store.num_users(),
                store.num_items()
            )));
        }
        let sequences = (0..store.num_users() as u32)
            .map(|u| {
                let items = dedup_consecutive(store.events(u).iter().map(|e| e.item));
                let mut first = HashMap::new();
                for (p, &i) in items.iter().enumerate() {
                    first.entry(i).or_insert(p as u32);
                }
                UserSequence { items, first }
            })
            .collect();
        let batch_size = config.batch_size.unwrap_or(model.variant().default_batch_size());
        let optimizer = Adam::new(config.lr, config.beta1, config.beta2, config.epsilon);
        Ok(Trainer {
            store,
            side,
            config,
            batch_size,
            sequences,
            optimizer,
            epoch: 0,
        })
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    /// Positives of both matrices, each followed by freshly sampled
    /// negatives from the same matrix, shuffled together.
    pub fn sample_examples<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<Example>> {
        let mut out = Vec::new();
        for u in 0..self.store.num_users() as u32 {
            let seq = &self.sequences[u as usize];
            for (matrix, explicit) in [(Behaviour::Implicit, false), (Behaviour::Explicit, true)] {
                for item in self.store.observed(u, matrix).iter() {
                    let history = seq.first[&item];
                    out.push(Example {
                        user: u,
                        item,
                        positive: true,
                        explicit,
                        history,
                    });
                    for neg in sample_negatives(self.store, u, matrix, self.config.negatives, rng)? {
                        out.push(Example {
                            user: u,
                            item: neg,
                            positive: false,
                            explicit,
                            history,
                        });
                    }
                }
            }
        }
        out.shuffle(rng);
        Ok(out)
    }

    /// Model inputs for a slice of examples; histories are padded to the
    /// model's sequence length.
    pub fn batch<R: Rng + ?Sized>(&self, examples: &[Example], seq_len: usize, rng: &mut R) -> Batch {
        let mut batch = Batch {
            users: examples.iter().map(|e| e.user as usize).collect(),
            items: examples.iter().map(|e| e.item as usize).collect(),
            sequences: Vec::with_capacity(examples.len() * seq_len),
        };
        if seq_len > 0 {
            for e in examples {
                let seq = &self.sequences[e.user as usize];
                let hist = &seq.items[..e.history as usize];
                let padded = pad_sequence(hist, seq_len, self.store.num_items(), self.store.implicit(e.user), rng);
                batch.sequences.extend(padded.iter().map(|&i| i as usize));
            }
        }
        batch
    }

    /// Loss of one batch recorded on `tape`, which may hold different
    /// parameter values of the same shapes as the model's own.
    pub fn batch_loss<R: Rng + ?Sized>(
        &self,
        model: &Model<T>,
        tape: &mut Tape<'_, T>,
        examples: &[Example],
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let batch = self.batch(examples, model.seq_len(), rng);
        let out = model.forward(tape, &batch, self.side, training, rng)?;
        let labels: Vec<T> = examples
            .iter()
            .map(|e| if e.positive { T::one() } else { T::zero() })
            .collect();
        let explicit: Vec<bool> = examples.iter().map(|e| e.explicit).collect();
        let reg = if self.config.lambda > 0.0 {
            Some(model.regularizer(tape, &batch)?)
        } else {
            None
        };
        joint_loss(tape, out.x_hat, out.y_hat, &labels, &explicit, reg, self.config.eta, self.config.lambda)
    }

    /// One pass over freshly sampled examples with an Adam step per batch.
    pub fn train_epoch<R: Rng + ?Sized>(&mut self, model: &mut Model<T>, rng: &mut R) -> Result<EpochReport> {
        let examples = self.sample_examples(rng)?;
        let mut total = 0.0;
        let mut steps = 0;
        for chunk in examples.chunks(self.batch_size) {
            let grads = {
                let mut tape = Tape::new(model.params());
                let loss = self.batch_loss(model, &mut tape, chunk, true, rng)?;
                let value = tape.scalar(loss).to_f64_lossy();
                if !value.is_finite() {
                    return Err(Error::Data(format!("loss became {value} in epoch {}", self.epoch + 1)));
                }
                total += value;
                tape.backward(loss)?
            };
            model.params_mut().accumulate(&grads);
            self.optimizer.step(model.params_mut());
            steps += 1;
        }
        self.epoch += 1;
        Ok(EpochReport {
            epoch: self.epoch,
            mean_loss: total / steps.max(1) as f64,
            steps,
            examples: examples.len(),
        })
    }
}
