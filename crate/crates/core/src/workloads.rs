//! Synthetic per-group gradient streams with log-normal noise, drift and
//! injected spikes, plus a paired-run harness for the spill-over contrast.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::clip::{
    views_of, ClipStrategy, Group, GroupGradients, GroupId, GroupPartition, StepContext,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Spike {
    pub step: u64,
    pub multiplier: f64,
}

/// Norm process of one group:
/// `base_norm * drift^t * exp(noise_sigma * z_t) * spike(t)` with `z_t ~ N(0, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupStreamSpec {
    pub group_id: String,
    pub base_norm: f64,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub spikes: Vec<Spike>,
    #[serde(default = "default_drift")]
    pub drift: f64,
    #[serde(default = "default_tensors")]
    pub tensors: usize,
    #[serde(default = "default_tensor_len")]
    pub tensor_len: usize,
}

fn default_drift() -> f64 {
    1.0
}

fn default_tensors() -> usize {
    2
}

fn default_tensor_len() -> usize {
    64
}

impl GroupStreamSpec {
    pub fn new(group_id: impl Into<String>, base_norm: f64) -> Self {
        Self {
            group_id: group_id.into(),
            base_norm,
            noise_sigma: 0.0,
            spikes: Vec::new(),
            drift: default_drift(),
            tensors: default_tensors(),
            tensor_len: default_tensor_len(),
        }
    }

    pub fn with_noise(mut self, sigma: f64) -> Self {
        self.noise_sigma = sigma;
        self
    }

    pub fn with_spike(mut self, step: u64, multiplier: f64) -> Self {
        self.spikes.push(Spike { step, multiplier });
        self
    }

    pub fn with_drift(mut self, drift: f64) -> Self {
        self.drift = drift;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let field = |name: &str| format!("workload.groups.{}.{name}", self.group_id);
        if self.group_id.is_empty() {
            return Err(Error::config(
                "workload.groups.group_id",
                "must not be empty",
            ));
        }
        if !(self.base_norm.is_finite() && self.base_norm > 0.0) {
            return Err(Error::config(
                field("base_norm"),
                format!("must be positive, got {}", self.base_norm),
            ));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::config(
                field("noise_sigma"),
                format!("must be nonnegative, got {}", self.noise_sigma),
            ));
        }
        if !(self.drift.is_finite() && self.drift > 0.0) {
            return Err(Error::config(
                field("drift"),
                format!("must be positive, got {}", self.drift),
            ));
        }
        if let Some(s) = self
            .spikes
            .iter()
            .find(|s| !(s.multiplier.is_finite() && s.multiplier >= 1.0))
        {
            return Err(Error::config(
                field("spikes"),
                format!(
                    "multiplier at step {} must be at least 1, got {}",
                    s.step, s.multiplier
                ),
            ));
        }
        if self.tensors == 0 || self.tensor_len == 0 {
            return Err(Error::config(
                field("tensors"),
                "tensor count and length must be positive",
            ));
        }
        Ok(())
    }

    /// Product of the multipliers scheduled at `step` (1 if none).
    pub fn spike_factor(&self, step: u64) -> f64 {
        self.spikes
            .iter()
            .filter(|s| s.step == step)
            .map(|s| s.multiplier)
            .product()
    }

    /// Noise-free norm at `step`.
    pub fn envelope(&self, step: u64) -> f64 {
        self.base_norm * self.drift.powf(step as f64) * self.spike_factor(step)
    }

    pub fn tensor_names(&self) -> Vec<String> {
        (0..self.tensors)
            .map(|i| format!("{}.t{i}", self.group_id))
            .collect()
    }
}

/// Seeded multi-group gradient stream. Each `(group, step)` draw uses its
/// own ChaCha stream, so changing one group's spec never perturbs another
/// group's gradients.
#[derive(Debug, Clone)]
pub struct SyntheticStream {
    specs: Vec<GroupStreamSpec>,
    seed: u64,
}

impl SyntheticStream {
    pub fn new(specs: Vec<GroupStreamSpec>, seed: u64) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::config("workload.groups", "need at least one group"));
        }
        let mut seen = BTreeSet::new();
        for s in &specs {
            s.validate()?;
            if !seen.insert(s.group_id.as_str()) {
                return Err(Error::config(
                    "workload.groups",
                    format!("duplicate group `{}`", s.group_id),
                ));
            }
        }
        Ok(Self { specs, seed })
    }

    pub fn specs(&self) -> &[GroupStreamSpec] {
        &self.specs
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn partition(&self) -> GroupPartition {
        GroupPartition::new(
            self.specs
                .iter()
                .map(|s| Group {
                    id: GroupId::from(s.group_id.as_str()),
                    members: s.tensor_names(),
                })
                .collect(),
        )
        .expect("specs validated at construction")
    }

    fn rng(&self, group: usize, step: u64) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&(group as u64).to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(step);
        rng
    }

    /// Target norm of `group` at `step`, noise included.
    pub fn norm(&self, group: usize, step: u64) -> f64 {
        let z: f64 = self.rng(group, step).sample(StandardNormal);
        let spec = &self.specs[group];
        spec.envelope(step) * (spec.noise_sigma * z).exp()
    }

    /// Gradients of every group at `step`: a uniformly random direction
    /// rescaled to exactly [`norm`](Self::norm).
    pub fn generate(&self, step: u64) -> Vec<GroupGradients> {
        self.specs
            .iter()
            .enumerate()
            .map(|(j, spec)| {
                let mut rng = self.rng(j, step);
                let z: f64 = rng.sample(StandardNormal);
                let target = spec.envelope(step) * (spec.noise_sigma * z).exp();
                let mut tensors: Vec<(String, Vec<f64>)> = spec
                    .tensor_names()
                    .into_iter()
                    .map(|name| {
                        let data = (0..spec.tensor_len)
                            .map(|_| rng.sample(StandardNormal))
                            .collect();
                        (name, data)
                    })
                    .collect();
                let raw: f64 = tensors
                    .iter()
                    .flat_map(|(_, d)| d.iter())
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt();
                let factor = target / raw;
                for (_, d) in &mut tensors {
                    d.iter_mut().for_each(|v| *v *= factor);
                }
                GroupGradients {
                    group_id: GroupId::from(spec.group_id.as_str()),
                    tensors,
                }
            })
            .collect()
    }
}

/// Per-step, per-group traces of a strategy on a spiked stream.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpilloverReport {
    pub strategy: String,
    pub group_ids: Vec<String>,
    /// `[step][group]`
    pub scales: Vec<Vec<f64>>,
    pub pre_norms: Vec<Vec<f64>>,
    pub post_norms: Vec<Vec<f64>>,
    /// Steps at which any group is spiked.
    pub spike_steps: Vec<u64>,
    /// Indices of groups with no spikes.
    pub stable_groups: Vec<usize>,
}

impl SpilloverReport {
    /// Scale factors of every stable group at every spike step.
    pub fn stable_scales_at_spikes(&self) -> Vec<f64> {
        self.spike_steps
            .iter()
            .filter_map(|&t| self.scales.get(t as usize))
            .flat_map(|row| self.stable_groups.iter().map(move |&j| row[j]))
            .collect()
    }

    /// `max / median` of one group's trace.
    pub fn peak_to_median(trace: impl IntoIterator<Item = f64>) -> f64 {
        let mut v: Vec<f64> = trace.into_iter().collect();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        };
        v[n - 1] / median
    }

    pub fn pre_trace(&self, group: usize) -> impl Iterator<Item = f64> + '_ {
        self.pre_norms.iter().map(move |row| row[group])
    }

    pub fn post_trace(&self, group: usize) -> impl Iterator<Item = f64> + '_ {
        self.post_norms.iter().map(move |row| row[group])
    }
}

/// Drives `strategy` over `steps` steps of `stream` and records the scale
/// each group received.
pub fn spillover_experiment(
    strategy: &mut dyn ClipStrategy,
    stream: &SyntheticStream,
    steps: u64,
) -> Result<SpilloverReport> {
    let specs = stream.specs();
    let stable_groups: Vec<usize> = (0..specs.len())
        .filter(|&j| specs[j].spikes.is_empty())
        .collect();
    if specs.len() < 2 || stable_groups.len() == specs.len() {
        return Err(Error::config(
            "workload.groups",
            "need at least two groups, at least one of them spiked",
        ));
    }
    let spike_steps: Vec<u64> = specs
        .iter()
        .flat_map(|s| s.spikes.iter().map(|sp| sp.step))
        .filter(|&t| t < steps)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();

    let mut report = SpilloverReport {
        strategy: strategy.name().to_string(),
        group_ids: specs.iter().map(|s| s.group_id.clone()).collect(),
        scales: Vec::with_capacity(steps as usize),
        pre_norms: Vec::with_capacity(steps as usize),
        post_norms: Vec::with_capacity(steps as usize),
        spike_steps,
        stable_groups,
    };
    for t in 0..steps {
        let mut grads = stream.generate(t);
        let decisions = strategy.step(&mut views_of(&mut grads), StepContext::new(t, steps)?)?;
        report
            .scales
            .push(decisions.iter().map(|d| d.scale_factor).collect());
        report
            .pre_norms
            .push(decisions.iter().map(|d| d.pre_norm).collect());
        report
            .post_norms
            .push(grads.iter_mut().map(|g| g.norm()).collect::<Result<_>>()?);
    }
    Ok(report)
}
