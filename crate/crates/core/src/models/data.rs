//! Seeded data sources. Every batch is a pure function of `(seed, step)`.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{LmBatch, MlpBatch};

fn batch_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // stream 0 is reserved for the task's own fixed randomness
    rng.set_stream(step + 1);
    rng
}

/// Regression onto a fixed random teacher `y = tanh(x A) B` with Gaussian inputs.
#[derive(Debug, Clone)]
pub struct RegressionTask {
    seed: u64,
    proj: Array2<f64>,
    readout: Array2<f64>,
}

impl RegressionTask {
    const TEACHER_WIDTH: usize = 8;

    pub fn new(input_dim: usize, output_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Self::TEACHER_WIDTH;
        let proj = Array2::from_shape_fn((input_dim, w), |_| {
            rng.sample::<f64, _>(StandardNormal) / (input_dim as f64).sqrt()
        });
        let readout = Array2::from_shape_fn((w, output_dim), |_| {
            rng.sample::<f64, _>(StandardNormal) / (w as f64).sqrt()
        });
        Self {
            seed,
            proj,
            readout,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.proj.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.readout.ncols()
    }

    pub fn batch(&self, step: u64, size: usize) -> MlpBatch {
        let mut rng = batch_rng(self.seed, step);
        let inputs =
            Array2::from_shape_fn((size, self.input_dim()), |_| rng.sample(StandardNormal));
        let targets = inputs.dot(&self.proj).mapv(f64::tanh).dot(&self.readout);
        MlpBatch { inputs, targets }
    }
}

/// Integer sequences from a sparse random Markov chain: each token has
/// `branching` possible successors with random probabilities.
#[derive(Debug, Clone)]
pub struct MarkovTask {
    seed: u64,
    vocab: usize,
    /// Per token, `(successor, cumulative probability)` in increasing order.
    transitions: Vec<Vec<(usize, f64)>>,
}

impl MarkovTask {
    pub fn new(vocab: usize, branching: usize, seed: u64) -> Self {
        assert!(
            vocab > 0 && branching > 0,
            "vocab and branching must be positive"
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let transitions = (0..vocab)
            .map(|_| {
                let weights: Vec<(usize, f64)> = (0..branching)
                    .map(|_| (rng.random_range(0..vocab), rng.random_range(0.1..1.0)))
                    .collect();
                let total: f64 = weights.iter().map(|(_, w)| w).sum();
                let mut acc = 0.0;
                weights
                    .into_iter()
                    .map(|(next, w)| {
                        acc += w / total;
                        (next, acc)
                    })
                    .collect()
            })
            .collect();
        Self {
            seed,
            vocab,
            transitions,
        }
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    fn next(&self, token: usize, rng: &mut ChaCha8Rng) -> usize {
        let u: f64 = rng.random();
        let row = &self.transitions[token];
        row.iter()
            .find(|(_, cum)| u < *cum)
            .unwrap_or(&row[row.len() - 1])
            .0
    }

    /// `size` sequences of `seq_len + 1` tokens, split into inputs and
    /// next-token targets.
    pub fn batch(&self, step: u64, size: usize, seq_len: usize) -> LmBatch {
        let mut rng = batch_rng(self.seed, step);
        let mut inputs = Array2::zeros((size, seq_len));
        let mut targets = Array2::zeros((size, seq_len));
        for b in 0..size {
            let mut token = rng.random_range(0..self.vocab);
            for t in 0..seq_len {
                inputs[[b, t]] = token;
                token = self.next(token, &mut rng);
                targets[[b, t]] = token;
            }
        }
        LmBatch { inputs, targets }
    }
}
