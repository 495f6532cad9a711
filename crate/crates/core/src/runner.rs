//! Experiment loop and its `compare` / `sweep` drivers.
//!
//! Per step: produce gradients (forward + backward, or a synthetic draw),
//! clip them, take an optimizer step when there is a model, and log one
//! [`StepRecord`] per group.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::thread;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::baseline::{GlobalClip, NoClip, StaticGroupClip};
use crate::clip::{
    group_norm, views_of, AggcClipper, ClipDecision, ClipStrategy, GroupPartition, StepContext,
};
use crate::config::{apply_override, set_path, under, RunConfig, StrategyConfig, WorkloadConfig};
use crate::error::{Error, Result};
use crate::models::{MarkovTask, Mlp, Model, RegressionTask, TinyTransformer};
use crate::optim::Optimizer;
use crate::registry::{build_partition, collect_group_views};
use crate::telemetry::{summarize, CsvSink, JsonlSink, RunSummary, StepRecord, Telemetry};
use crate::workloads::SyntheticStream;

pub const STEPS_CSV: &str = "steps.csv";
pub const STEPS_JSONL: &str = "steps.jsonl";
pub const SUMMARY_JSON: &str = "summary.json";
pub const CLIPPER_STATE_JSON: &str = "clipper_state.json";
pub const RESOLVED_CONFIG: &str = "config.toml";
pub const PAIRED_CSV: &str = "paired.csv";
pub const COMPARISON_JSON: &str = "comparison.json";
pub const SWEEP_SUMMARY_CSV: &str = "sweep_summary.csv";

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub summary: RunSummary,
    pub records: Vec<StepRecord>,
}

pub fn build_strategy(
    cfg: &StrategyConfig,
    partition: &GroupPartition,
) -> Result<Box<dyn ClipStrategy>> {
    let strategy: Box<dyn ClipStrategy> = match cfg {
        StrategyConfig::None => Box::new(NoClip::new(partition)),
        StrategyConfig::Global(c) => Box::new(GlobalClip::new(*c, partition)?),
        StrategyConfig::StaticGroup(c) => Box::new(StaticGroupClip::new(c.clone(), partition)?),
        StrategyConfig::Aggc(c) => Box::new(AggcClipper::new(*c, partition)?),
    };
    Ok(strategy)
}

struct StepOutcome {
    decisions: Vec<ClipDecision>,
    post_norms: Vec<f64>,
    loss: Option<f64>,
}

enum Engine {
    Synthetic(SyntheticStream),
    Mlp {
        model: Box<Mlp>,
        task: RegressionTask,
        batch_size: usize,
        optimizer: Optimizer,
    },
    Lm {
        model: Box<TinyTransformer>,
        task: MarkovTask,
        batch_size: usize,
        optimizer: Optimizer,
    },
}

impl Engine {
    /// The workload and the partition its gradients are clipped under.
    ///
    /// Model weights are seeded with `seed`, data with `seed + 1`.
    fn build(cfg: &RunConfig) -> Result<(Self, GroupPartition)> {
        let data_seed = cfg.seed.wrapping_add(1);
        let grouping = cfg.effective_grouping();
        match &cfg.workload {
            WorkloadConfig::Synthetic { groups } => {
                let stream = SyntheticStream::new(groups.clone(), cfg.seed)?;
                let partition = stream.partition();
                Ok((Engine::Synthetic(stream), partition))
            }
            WorkloadConfig::MlpRegression { layers, batch_size } => {
                let model = Mlp::new(layers, cfg.seed)?;
                let task = RegressionTask::new(layers[0], *layers.last().unwrap(), data_seed);
                let partition = build_partition(
                    model.registry(),
                    &grouping.expect("model workloads have a grouping"),
                )?;
                let engine = Engine::Mlp {
                    model: Box::new(model),
                    task,
                    batch_size: *batch_size,
                    optimizer: cfg.optimizer.build()?,
                };
                Ok((engine, partition))
            }
            WorkloadConfig::TinyLm {
                model,
                batch_size,
                branching,
            } => {
                let lm = TinyTransformer::new(*model, cfg.seed)?;
                let task = MarkovTask::new(model.vocab, *branching, data_seed);
                let partition = build_partition(
                    lm.registry(),
                    &grouping.expect("model workloads have a grouping"),
                )?;
                let engine = Engine::Lm {
                    model: Box::new(lm),
                    task,
                    batch_size: *batch_size,
                    optimizer: cfg.optimizer.build()?,
                };
                Ok((engine, partition))
            }
        }
    }

    fn step(
        &mut self,
        strategy: &mut dyn ClipStrategy,
        partition: &GroupPartition,
        ctx: StepContext,
    ) -> Result<StepOutcome> {
        let t = ctx.step();
        match self {
            Engine::Synthetic(stream) => {
                let mut grads = stream.generate(t);
                let mut views = views_of(&mut grads);
                let decisions = strategy.step(&mut views, ctx)?;
                let post_norms = views.iter().map(|v| group_norm(v)).collect::<Result<_>>()?;
                Ok(StepOutcome {
                    decisions,
                    post_norms,
                    loss: None,
                })
            }
            Engine::Mlp {
                model,
                task,
                batch_size,
                optimizer,
            } => {
                let batch = task.batch(t, *batch_size);
                train_step(model.as_mut(), &batch, optimizer, strategy, partition, ctx)
            }
            Engine::Lm {
                model,
                task,
                batch_size,
                optimizer,
            } => {
                let batch = task.batch(t, *batch_size, model.config().seq_len);
                train_step(model.as_mut(), &batch, optimizer, strategy, partition, ctx)
            }
        }
    }
}

fn train_step<M: Model>(
    model: &mut M,
    batch: &M::Batch,
    optimizer: &mut Optimizer,
    strategy: &mut dyn ClipStrategy,
    partition: &GroupPartition,
    ctx: StepContext,
) -> Result<StepOutcome> {
    let loss = model.forward(batch)?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { step: ctx.step() });
    }
    model.backward(batch)?;
    let (decisions, post_norms) = {
        let mut views = collect_group_views(model.registry_mut(), partition)?;
        let decisions = strategy.step(&mut views, ctx)?;
        let post = views
            .iter()
            .map(|v| group_norm(v))
            .collect::<Result<Vec<_>>>()?;
        (decisions, post)
    };
    optimizer.step(model.registry_mut())?;
    Ok(StepOutcome {
        decisions,
        post_norms,
        loss: Some(loss),
    })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

/// Runs one experiment and writes its logs into [`RunConfig::output_dir`].
///
/// A numerical failure aborts the run; the step logs written so far are
/// flushed and kept, but no summary is produced.
pub fn run(cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let dir = cfg.output_dir();
    fs::create_dir_all(&dir)?;
    let resolved = toml::to_string(cfg).map_err(|e| Error::config("config", e.to_string()))?;
    fs::write(dir.join(RESOLVED_CONFIG), resolved)?;

    let (mut engine, partition) = Engine::build(cfg)?;
    let mut strategy =
        build_strategy(&cfg.strategy, &partition).map_err(|e| under("strategy", e))?;
    let flush_every = cfg.output.flush_every;
    let mut telemetry = Telemetry::new()
        .with_sink(CsvSink::create(dir.join(STEPS_CSV), flush_every)?)
        .with_sink(JsonlSink::create(dir.join(STEPS_JSONL), flush_every)?);

    let mut records = Vec::with_capacity(cfg.steps as usize * partition.len());
    let outcome = (|| -> Result<()> {
        for t in 0..cfg.steps {
            let ctx = StepContext::new(t, cfg.steps)?;
            let step = engine.step(strategy.as_mut(), &partition, ctx)?;
            for (d, post) in step.decisions.iter().zip(step.post_norms) {
                let record = StepRecord::from_decision(&cfg.run_id, t, d, post, step.loss);
                telemetry.record(&record)?;
                records.push(record);
            }
        }
        Ok(())
    })();
    telemetry.flush()?;
    outcome?;

    let summary = summarize(&records)?;
    write_json(&dir.join(SUMMARY_JSON), &summary)?;
    if let Some(snapshot) = strategy.snapshot() {
        snapshot.save(dir.join(CLIPPER_STATE_JSON))?;
    }
    Ok(RunOutput {
        dir,
        summary,
        records,
    })
}

/// Mean loss over the last `fraction` of logged steps.
pub fn tail_mean_loss(records: &[StepRecord], fraction: f64) -> Option<f64> {
    let first_group = &records.first()?.group_id;
    let losses: Vec<f64> = records
        .iter()
        .filter(|r| &r.group_id == first_group)
        .filter_map(|r| r.loss)
        .collect();
    let n = ((losses.len() as f64 * fraction).ceil() as usize).clamp(1, losses.len().max(1));
    let tail = losses.get(losses.len().checked_sub(n)?..)?;
    Some(tail.iter().sum::<f64>() / tail.len() as f64)
}

/// One row of `paired.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedRow {
    pub step: u64,
    pub group_id: String,
    pub scale_a: f64,
    pub scale_b: f64,
    pub scale_delta: f64,
    pub pre_norm_a: f64,
    pub pre_norm_b: f64,
    pub post_norm_a: f64,
    pub post_norm_b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupComparison {
    pub group_id: String,
    pub mean_scale_a: f64,
    pub mean_scale_b: f64,
    pub min_scale_a: f64,
    pub min_scale_b: f64,
    pub max_abs_delta: f64,
}

/// Scale received by unspiked groups at the steps where some group spikes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpilloverDelta {
    pub spike_steps: Vec<u64>,
    pub stable_groups: Vec<String>,
    pub mean_stable_scale_a: f64,
    pub mean_stable_scale_b: f64,
    /// `mean_stable_scale_b - mean_stable_scale_a`
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub run_a: String,
    pub run_b: String,
    pub strategy_a: String,
    pub strategy_b: String,
    pub steps: u64,
    pub max_abs_delta: f64,
    pub groups: Vec<GroupComparison>,
    pub spillover: Option<SpilloverDelta>,
}

fn check_comparable(a: &RunConfig, b: &RunConfig) -> Result<()> {
    if a.seed != b.seed {
        return Err(Error::WorkloadMismatch(format!(
            "seeds differ ({} vs {})",
            a.seed, b.seed
        )));
    }
    if a.steps != b.steps {
        return Err(Error::WorkloadMismatch(format!(
            "step counts differ ({} vs {})",
            a.steps, b.steps
        )));
    }
    if a.workload != b.workload {
        return Err(Error::WorkloadMismatch("workloads differ".into()));
    }
    if a.effective_grouping() != b.effective_grouping() {
        return Err(Error::WorkloadMismatch("grouping rules differ".into()));
    }
    Ok(())
}

/// Runs `a` and `b` in parallel under `out/a` and `out/b` and writes paired
/// per-group scale traces to `out/paired.csv` plus `out/comparison.json`.
pub fn compare(a: &RunConfig, b: &RunConfig, out: &Path) -> Result<ComparisonReport> {
    a.validate()?;
    b.validate()?;
    check_comparable(a, b)?;
    let place = |cfg: &RunConfig, sub: &str| {
        let mut c = cfg.clone();
        c.output.dir = Some(out.join(sub));
        c
    };
    let (cfg_a, cfg_b) = (place(a, "a"), place(b, "b"));
    let (ra, rb) = thread::scope(|s| {
        let ha = s.spawn(|| run(&cfg_a));
        let hb = s.spawn(|| run(&cfg_b));
        (
            ha.join().expect("run a panicked"),
            hb.join().expect("run b panicked"),
        )
    });
    let (ra, rb) = (ra?, rb?);

    let rows: Vec<PairedRow> = ra
        .records
        .iter()
        .zip(&rb.records)
        .map(|(x, y)| {
            debug_assert_eq!((x.step, &x.group_id), (y.step, &y.group_id));
            PairedRow {
                step: x.step,
                group_id: x.group_id.clone(),
                scale_a: x.scale_factor,
                scale_b: y.scale_factor,
                scale_delta: y.scale_factor - x.scale_factor,
                pre_norm_a: x.pre_norm,
                pre_norm_b: y.pre_norm,
                post_norm_a: x.post_norm,
                post_norm_b: y.post_norm,
            }
        })
        .collect();
    let mut w = csv::Writer::from_path(out.join(PAIRED_CSV))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;

    let mut groups: Vec<GroupComparison> = Vec::new();
    for r in &rows {
        let g = match groups.iter_mut().position(|g| g.group_id == r.group_id) {
            Some(i) => &mut groups[i],
            None => {
                groups.push(GroupComparison {
                    group_id: r.group_id.clone(),
                    mean_scale_a: 0.0,
                    mean_scale_b: 0.0,
                    min_scale_a: f64::INFINITY,
                    min_scale_b: f64::INFINITY,
                    max_abs_delta: 0.0,
                });
                groups.last_mut().unwrap()
            }
        };
        g.mean_scale_a += r.scale_a;
        g.mean_scale_b += r.scale_b;
        g.min_scale_a = g.min_scale_a.min(r.scale_a);
        g.min_scale_b = g.min_scale_b.min(r.scale_b);
        g.max_abs_delta = g.max_abs_delta.max(r.scale_delta.abs());
    }
    for g in &mut groups {
        g.mean_scale_a /= a.steps as f64;
        g.mean_scale_b /= a.steps as f64;
    }

    let spillover = match &a.workload {
        WorkloadConfig::Synthetic { groups: specs } => {
            let mut spike_steps: Vec<u64> = specs
                .iter()
                .flat_map(|s| s.spikes.iter().map(|sp| sp.step))
                .filter(|&t| t < a.steps)
                .collect();
            spike_steps.sort_unstable();
            spike_steps.dedup();
            let stable: Vec<String> = specs
                .iter()
                .filter(|s| s.spikes.is_empty())
                .map(|s| s.group_id.clone())
                .collect();
            let picked: Vec<&PairedRow> = rows
                .iter()
                .filter(|r| spike_steps.contains(&r.step) && stable.contains(&r.group_id))
                .collect();
            (!picked.is_empty()).then(|| {
                let n = picked.len() as f64;
                let mean_a = picked.iter().map(|r| r.scale_a).sum::<f64>() / n;
                let mean_b = picked.iter().map(|r| r.scale_b).sum::<f64>() / n;
                SpilloverDelta {
                    spike_steps,
                    stable_groups: stable,
                    mean_stable_scale_a: mean_a,
                    mean_stable_scale_b: mean_b,
                    delta: mean_b - mean_a,
                }
            })
        }
        _ => None,
    };

    let report = ComparisonReport {
        run_a: a.run_id.clone(),
        run_b: b.run_id.clone(),
        strategy_a: a.strategy.kind().to_string(),
        strategy_b: b.strategy.kind().to_string(),
        steps: a.steps,
        max_abs_delta: groups.iter().map(|g| g.max_abs_delta).fold(0.0, f64::max),
        groups,
        spillover,
    };
    write_json(&out.join(COMPARISON_JSON), &report)?;
    Ok(report)
}

/// One row of `sweep_summary.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: String,
    pub value: String,
    pub run_id: String,
    pub steps: usize,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    /// Mean loss over the last tenth of the run.
    pub tail_loss: Option<f64>,
    pub clip_frequency: f64,
    pub boost_frequency: f64,
    pub dir: String,
}

/// Runs `base` once per value of `key`, each in its own subdirectory of
/// the base output directory, and writes `sweep_summary.csv` there.
pub fn sweep(base: &Table, key: &str, values: &[String]) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::config("values", "need at least one value to sweep"));
    }
    let base_cfg = RunConfig::from_table(base.clone())?;
    let root = base_cfg.output_dir();
    fs::create_dir_all(&root)?;
    let mut rows = Vec::with_capacity(values.len());
    for value in values {
        let label = format!("{key}={value}").replace(['/', '\\', ' '], "_");
        let mut table = base.clone();
        apply_override(&mut table, &format!("{key}={value}"))?;
        set_path(
            &mut table,
            "run_id",
            Value::String(format!("{}_{label}", base_cfg.run_id)),
        )?;
        let dir = root.join(&label);
        set_path(
            &mut table,
            "output.dir",
            Value::String(dir.display().to_string()),
        )?;
        let cfg = RunConfig::from_table(table)?;
        let out = run(&cfg)?;
        rows.push(SweepRow {
            param: key.to_string(),
            value: value.clone(),
            run_id: cfg.run_id.clone(),
            steps: out.summary.steps,
            initial_loss: out.summary.initial_loss,
            final_loss: out.summary.final_loss,
            tail_loss: tail_mean_loss(&out.records, 0.1),
            clip_frequency: out.summary.clip_frequency(),
            boost_frequency: out.summary.boost_frequency(),
            dir: out.dir.display().to_string(),
        });
    }
    let mut w = csv::Writer::from_path(root.join(SWEEP_SUMMARY_CSV))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(rows)
}
