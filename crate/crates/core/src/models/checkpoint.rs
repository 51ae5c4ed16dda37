//! Model checkpoints: the variant, hyper-parameters and catalog sizes in
//! the header, then every parameter as `f32` in registration order.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, Variant, Vocab};
use crate::container::{Container, Entry};
use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

const KIND: &str = "checkpoint";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    version: u32,
    variant: Variant,
    model: ModelConfig,
    vocab: Vocab,
}

pub fn to_container<T: Real>(model: &Model<T>) -> Result<Container> {
    let header = Header {
        kind: KIND.into(),
        version: VERSION,
        variant: model.variant(),
        model: model.config().clone(),
        vocab: model.vocab(),
    };
    let header = serde_json::to_string(&header).map_err(|e| Error::Data(e.to_string()))?;
    let mut c = Container::new(header);
    for p in model.params().iter() {
        let data: Vec<f32> = p.value.data().iter().map(|v| v.to_f64_lossy() as f32).collect();
        c.push(Entry::from_f32(p.name.clone(), p.value.shape().to_vec(), &data));
    }
    Ok(c)
}

pub fn save<T: Real>(model: &Model<T>, path: &Path) -> Result<()> {
    to_container(model)?.save(path)
}

pub fn load(path: &Path) -> Result<Model<f32>> {
    from_container(&Container::load(path)?, path)
}

/// Rebuilds the architecture from the header, then overwrites every
/// parameter. Names, order and shapes must match exactly.
pub fn from_container(c: &Container, origin: &Path) -> Result<Model<f32>> {
    let bad = |reason: String| Error::format(origin, reason);
    let header: Header = serde_json::from_str(&c.header).map_err(|e| bad(format!("checkpoint header: {e}")))?;
    if header.kind != KIND || header.version != VERSION {
        return Err(bad(format!(
            "expected a {KIND} v{VERSION} file, found {} v{}",
            header.kind, header.version
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = Model::<f32>::new(header.variant, &header.model, header.vocab, &mut rng)
        .map_err(|e| bad(format!("checkpoint describes an invalid model: {e}")))?;
    if c.entries.len() != model.params().len() {
        return Err(bad(format!(
            "{} tensors stored, model has {}",
            c.entries.len(),
            model.params().len()
        )));
    }
    for (p, e) in model.params_mut().iter_mut().zip(&c.entries) {
        if p.name != e.name || p.value.shape() != e.shape.as_slice() {
            return Err(bad(format!(
                "tensor {} {:?} does not match expected {} {:?}",
                e.name,
                e.shape,
                p.name,
                p.value.shape()
            )));
        }
        let mut t = Tensor::new(e.shape.clone(), e.to_f32())?;
        t.set_requires_grad(true);
        p.value = t;
    }
    Ok(model)
}
