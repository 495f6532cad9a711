use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{he_uniform, ForwardCache, Model};
use crate::error::{Error, Result};
use crate::registry::{ParamId, ParamRegistry};

#[derive(Debug, Clone, PartialEq)]
pub struct MlpBatch {
    /// `[batch, input_dim]`
    pub inputs: Array2<f64>,
    /// `[batch, output_dim]`
    pub targets: Array2<f64>,
}

/// Fully connected regressor: tanh hidden layers, linear output, mean
/// squared error over every output element.
///
/// Layer `i` registers `layers.{i}.weight` with shape `[fan_in, fan_out]`
/// and `layers.{i}.bias` with shape `[fan_out]`.
#[derive(Debug, Clone)]
pub struct Mlp {
    sizes: Vec<usize>,
    registry: ParamRegistry,
    weights: Vec<ParamId>,
    biases: Vec<ParamId>,
    /// Layer activations, input first and output last.
    cache: Option<ForwardCache<MlpBatch, Vec<Array2<f64>>>>,
}

impl Mlp {
    /// He-uniform weights and zero biases.
    pub fn new(sizes: &[usize], seed: u64) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::config(
                "workload.layers",
                format!("need at least two positive layer sizes, got {sizes:?}"),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut registry = ParamRegistry::new();
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (i, pair) in sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            weights.push(registry.register(
                format!("layers.{i}.weight"),
                &[fan_in, fan_out],
                he_uniform(&mut rng, fan_in, fan_in * fan_out),
            )?);
            biases.push(registry.register(
                format!("layers.{i}.bias"),
                &[fan_out],
                vec![0.0; fan_out],
            )?);
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            registry,
            weights,
            biases,
            cache: None,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    fn check(&self, batch: &MlpBatch) -> Result<()> {
        let n = batch.inputs.nrows();
        let (input, output) = (self.sizes[0], *self.sizes.last().unwrap());
        if n == 0 || batch.inputs.ncols() != input {
            return Err(Error::ShapeMismatch {
                what: "inputs".into(),
                expected: vec![n.max(1), input],
                got: batch.inputs.shape().to_vec(),
            });
        }
        if batch.targets.dim() != (n, output) {
            return Err(Error::ShapeMismatch {
                what: "targets".into(),
                expected: vec![n, output],
                got: batch.targets.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn activations(&self, inputs: &Array2<f64>) -> Vec<Array2<f64>> {
        let layers = self.weights.len();
        let mut acts = vec![inputs.clone()];
        for (i, (&w, &b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = acts[i].dot(&self.registry.matrix(w)) + self.registry.vector(b);
            if i + 1 < layers {
                z.mapv_inplace(f64::tanh);
            }
            acts.push(z);
        }
        acts
    }

    pub fn predict(&self, inputs: &Array2<f64>) -> Result<Array2<f64>> {
        let out = *self.sizes.last().unwrap();
        self.check(&MlpBatch {
            inputs: inputs.clone(),
            targets: Array2::zeros((inputs.nrows(), out)),
        })?;
        Ok(self.activations(inputs).pop().unwrap())
    }
}

impl Model for Mlp {
    type Batch = MlpBatch;

    fn registry(&self) -> &ParamRegistry {
        &self.registry
    }

    fn registry_mut(&mut self) -> &mut ParamRegistry {
        &mut self.registry
    }

    fn forward(&mut self, batch: &MlpBatch) -> Result<f64> {
        self.check(batch)?;
        let acts = self.activations(&batch.inputs);
        let out = acts.last().unwrap();
        let loss = (out - &batch.targets).mapv(|e| e * e).sum() / out.len() as f64;
        self.cache = Some(ForwardCache {
            version: self.registry.version(),
            batch: batch.clone(),
            acts,
        });
        Ok(loss)
    }

    fn backward(&mut self, batch: &MlpBatch) -> Result<()> {
        let acts = ForwardCache::fresh(&self.cache, &self.registry, batch)?;
        let out = acts.last().unwrap();
        let mut delta = (out - &batch.targets) * (2.0 / out.len() as f64);
        let mut grads: Vec<(ParamId, Vec<f64>)> = Vec::new();
        for i in (0..self.weights.len()).rev() {
            let dw = acts[i].t().dot(&delta);
            let db: Array1<f64> = delta.sum_axis(Axis(0));
            grads.push((self.weights[i], dw.iter().copied().collect()));
            grads.push((self.biases[i], db.to_vec()));
            if i > 0 {
                let upstream = delta.dot(&self.registry.matrix(self.weights[i]).t());
                delta = upstream * acts[i].mapv(|a| 1.0 - a * a);
            }
        }
        for (id, g) in grads {
            self.registry.set_grad(id, g)?;
        }
        Ok(())
    }
}
