//! Desk-scale differentiable models with hand-written backward passes.
//!
//! Everything is double precision. Parameters live in a [`ParamRegistry`]
//! owned by the model; `backward` writes gradients into that registry so
//! clipping strategies can operate on them directly.

mod data;
mod mlp;
mod transformer;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::registry::ParamRegistry;

pub use data::{MarkovTask, RegressionTask};
pub use mlp::{Mlp, MlpBatch};
pub use transformer::{LmBatch, TinyTransformer, TransformerConfig};

pub trait Model {
    type Batch;

    fn registry(&self) -> &ParamRegistry;

    fn registry_mut(&mut self) -> &mut ParamRegistry;

    /// Scalar loss on `batch`. Caches activations for [`backward`](Self::backward).
    fn forward(&mut self, batch: &Self::Batch) -> Result<f64>;

    /// Overwrites the gradient of every parameter with d(loss)/d(param) for
    /// the batch of the most recent `forward`.
    ///
    /// Fails with [`Error::StaleForwardState`] if there was no forward pass,
    /// it was on a different batch, or the parameters changed since.
    fn backward(&mut self, batch: &Self::Batch) -> Result<()>;
}

/// Activations of one forward pass, tagged with what produced them.
#[derive(Debug, Clone)]
struct ForwardCache<B, A> {
    version: u64,
    batch: B,
    acts: A,
}

impl<B: PartialEq, A> ForwardCache<B, A> {
    fn fresh<'a>(cache: &'a Option<Self>, registry: &ParamRegistry, batch: &B) -> Result<&'a A> {
        match cache {
            Some(c) if c.version == registry.version() && c.batch == *batch => Ok(&c.acts),
            _ => Err(Error::StaleForwardState),
        }
    }
}

/// `n` draws from `U(-limit, limit)` with `limit = sqrt(6 / fan_in)`.
fn he_uniform(rng: &mut ChaCha8Rng, fan_in: usize, n: usize) -> Vec<f64> {
    uniform(rng, (6.0 / fan_in as f64).sqrt(), n)
}

fn uniform(rng: &mut ChaCha8Rng, limit: f64, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-limit..limit)).collect()
}
