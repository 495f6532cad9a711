//! Per-step, per-group records and their CSV / JSONL sinks.
//!
//! CSV column order is fixed by [`CSV_HEADER`]. JSONL lines carry the same
//! field names, with `action` as a string and absent values as `null`.
//! Floats are written in shortest round-trip form in both formats.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clip::{ClipAction, ClipDecision, DecisionBounds, GroupId};
use crate::error::{Error, Result};

pub const CSV_HEADER: [&str; 13] = [
    "run_id",
    "step",
    "group_id",
    "pre_norm",
    "post_norm",
    "ema_scale",
    "lower",
    "upper",
    "alpha_low",
    "alpha_high",
    "scale_factor",
    "action",
    "loss",
];

/// One row of telemetry: what happened to one group at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub run_id: String,
    pub step: u64,
    pub group_id: String,
    pub pre_norm: f64,
    pub post_norm: f64,
    pub ema_scale: Option<f64>,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub alpha_low: Option<f64>,
    pub alpha_high: Option<f64>,
    pub scale_factor: f64,
    pub action: ClipAction,
    pub loss: Option<f64>,
}

impl StepRecord {
    pub fn from_decision(
        run_id: &str,
        step: u64,
        decision: &ClipDecision,
        post_norm: f64,
        loss: Option<f64>,
    ) -> Self {
        let (ema_scale, lower, upper, alpha_low, alpha_high) = match decision.bounds {
            DecisionBounds::Adaptive {
                ema_scale,
                interval,
            } => (
                Some(ema_scale),
                Some(interval.lower),
                Some(interval.upper),
                Some(interval.alpha_low),
                Some(interval.alpha_high),
            ),
            DecisionBounds::UpperOnly { max_norm } => (None, None, Some(max_norm), None, None),
            DecisionBounds::Global { .. } | DecisionBounds::Unbounded => {
                (None, None, None, None, None)
            }
        };
        Self {
            run_id: run_id.to_string(),
            step,
            group_id: decision.group_id.to_string(),
            pre_norm: decision.pre_norm,
            post_norm,
            ema_scale,
            lower,
            upper,
            alpha_low,
            alpha_high,
            scale_factor: decision.scale_factor,
            action: decision.action,
            loss,
        }
    }
}

pub trait RecordSink {
    fn record(&mut self, record: &StepRecord) -> Result<()>;
    fn flush(&mut self) -> Result<()>;
}

/// CSV sink; flushes every `flush_every` records (0 = only on demand).
pub struct CsvSink<W: Write> {
    writer: csv::Writer<W>,
    flush_every: usize,
    pending: usize,
}

impl CsvSink<File> {
    pub fn create(path: impl AsRef<Path>, flush_every: usize) -> Result<Self> {
        Self::new(File::create(path)?, flush_every)
    }
}

impl<W: Write> CsvSink<W> {
    pub fn new(inner: W, flush_every: usize) -> Result<Self> {
        let mut writer = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(inner);
        writer.write_record(CSV_HEADER)?;
        Ok(Self {
            writer,
            flush_every,
            pending: 0,
        })
    }

    pub fn into_inner(self) -> Result<W> {
        self.writer
            .into_inner()
            .map_err(|e| Error::Io(e.into_error()))
    }
}

impl<W: Write> RecordSink for CsvSink<W> {
    fn record(&mut self, record: &StepRecord) -> Result<()> {
        self.writer.serialize(record)?;
        self.pending += 1;
        if self.flush_every > 0 && self.pending >= self.flush_every {
            self.flush()?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        self.writer.flush()?;
        self.pending = 0;
        Ok(())
    }
}

/// JSON-lines sink, one object per record.
pub struct JsonlSink<W: Write> {
    writer: BufWriter<W>,
    flush_every: usize,
    pending: usize,
}

impl JsonlSink<File> {
    pub fn create(path: impl AsRef<Path>, flush_every: usize) -> Result<Self> {
        Ok(Self::new(File::create(path)?, flush_every))
    }
}

impl<W: Write> JsonlSink<W> {
    pub fn new(inner: W, flush_every: usize) -> Self {
        Self {
            writer: BufWriter::new(inner),
            flush_every,
            pending: 0,
        }
    }

    pub fn into_inner(self) -> Result<W> {
        self.writer
            .into_inner()
            .map_err(|e| Error::Io(e.into_error()))
    }
}

impl<W: Write> RecordSink for JsonlSink<W> {
    fn record(&mut self, record: &StepRecord) -> Result<()> {
        serde_json::to_writer(&mut self.writer, record)?;
        self.writer.write_all(b"\n")?;
        self.pending += 1;
        if self.flush_every > 0 && self.pending >= self.flush_every {
            self.flush()?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        self.writer.flush()?;
        self.pending = 0;
        Ok(())
    }
}

/// Keeps records in memory.
#[derive(Debug, Default, Clone)]
pub struct MemorySink {
    pub records: Vec<StepRecord>,
}

impl RecordSink for MemorySink {
    fn record(&mut self, record: &StepRecord) -> Result<()> {
        self.records.push(record.clone());
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        Ok(())
    }
}

/// Fans records out to several sinks.
#[derive(Default)]
pub struct Telemetry {
    sinks: Vec<Box<dyn RecordSink + Send>>,
}

impl Telemetry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_sink(mut self, sink: impl RecordSink + Send + 'static) -> Self {
        self.sinks.push(Box::new(sink));
        self
    }

    pub fn record(&mut self, record: &StepRecord) -> Result<()> {
        for sink in &mut self.sinks {
            sink.record(record)?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        for sink in &mut self.sinks {
            sink.flush()?;
        }
        Ok(())
    }
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<Vec<StepRecord>> {
    let mut reader = csv::Reader::from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header != CSV_HEADER {
        return Err(Error::config(
            "csv header",
            format!("unexpected header {header:?}"),
        ));
    }
    reader
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<StepRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub group_id: String,
    pub steps: usize,
    /// Fraction of steps with a `clipped_high` action.
    pub clip_frequency: f64,
    /// Fraction of steps with a `boosted_low` action.
    pub boost_frequency: f64,
    pub mean_pre_norm: f64,
    pub max_pre_norm: f64,
    pub final_ema_scale: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub steps: usize,
    pub groups: Vec<GroupSummary>,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
}

impl RunSummary {
    /// Clip frequency averaged over groups.
    pub fn clip_frequency(&self) -> f64 {
        mean(self.groups.iter().map(|g| g.clip_frequency))
    }

    pub fn boost_frequency(&self) -> f64 {
        mean(self.groups.iter().map(|g| g.boost_frequency))
    }

    pub fn group(&self, id: &str) -> Option<&GroupSummary> {
        self.groups.iter().find(|g| g.group_id == id)
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Aggregates records in step order. Groups appear in first-seen order.
pub fn summarize(records: &[StepRecord]) -> Result<RunSummary> {
    let first = records.first().ok_or(Error::EmptyInput)?;

    struct Acc {
        id: String,
        steps: usize,
        clipped: usize,
        boosted: usize,
        sum: f64,
        max: f64,
        last_ema: Option<f64>,
    }
    let mut groups: Vec<Acc> = Vec::new();
    let mut steps = BTreeSet::new();
    for r in records {
        let acc = match groups.iter_mut().position(|g| g.id == r.group_id) {
            Some(i) => &mut groups[i],
            None => {
                groups.push(Acc {
                    id: r.group_id.clone(),
                    steps: 0,
                    clipped: 0,
                    boosted: 0,
                    sum: 0.0,
                    max: f64::NEG_INFINITY,
                    last_ema: None,
                });
                groups.last_mut().unwrap()
            }
        };
        acc.steps += 1;
        match r.action {
            ClipAction::ClippedHigh => acc.clipped += 1,
            ClipAction::BoostedLow => acc.boosted += 1,
            ClipAction::None => {}
        }
        acc.sum += r.pre_norm;
        acc.max = acc.max.max(r.pre_norm);
        acc.last_ema = r.ema_scale;
        steps.insert(r.step);
    }
    let losses: Vec<f64> = records.iter().filter_map(|r| r.loss).collect();
    Ok(RunSummary {
        run_id: first.run_id.clone(),
        steps: steps.len(),
        groups: groups
            .into_iter()
            .map(|a| GroupSummary {
                clip_frequency: a.clipped as f64 / a.steps as f64,
                boost_frequency: a.boosted as f64 / a.steps as f64,
                mean_pre_norm: a.sum / a.steps as f64,
                max_pre_norm: a.max,
                final_ema_scale: a.last_ema,
                steps: a.steps,
                group_id: a.id,
            })
            .collect(),
        initial_loss: losses.first().copied(),
        final_loss: losses.last().copied(),
    })
}

/// Serializable clipper state for checkpoint / resume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipperSnapshot {
    pub beta: f64,
    /// Last step the clipper processed, if any.
    pub step: Option<u64>,
    pub groups: Vec<GroupScaleSnapshot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupScaleSnapshot {
    pub group_id: GroupId,
    pub ema_scale: f64,
    pub initialized: bool,
}

impl ClipperSnapshot {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n")?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
    }
}
