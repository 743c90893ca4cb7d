//! 1F1B pipeline-parallel training with weight stashing.
//!
//! Stage `s` of `S` admits `S − s` forwards before its first backward, then
//! alternates backward/forward, then drains. Each forward runs on a deep
//! copy of the newest committed parameters; the copy is stashed so that the
//! matching backward differentiates exactly the weights used forward. The
//! resulting gradient is applied to the current parameters, committing a new
//! version.
//!
//! Time is virtual: every message carries the sender's clock, a stage starts
//! an event at `max(own clock, message time + link latency)`, and event
//! durations come from the attention strategy's reported time.

use std::collections::{HashSet, VecDeque};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{AttentionStrategy, HeadMode};
use crate::model::{accuracy, Batch, EncoderConfig, ModelError, StageInput, StageModel};
use crate::tensor::{backward, backward_with, graph_bytes, sgd_step, Scalar, Tensor, TensorError};
use crate::transport::{loopback_pair, Link, MsgType, PipeMessage, TransportError, WireTensor};

pub use crate::partition::StageSpec;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("stage {stage}: no stashed weights for batch {batch}")]
    StashMiss { stage: usize, batch: u64 },
    #[error("stage {stage}: stash full ({capacity} entries)")]
    StashOverflow { stage: usize, capacity: usize },
    #[error("stage {stage}: protocol violation: {detail}")]
    Protocol { stage: usize, detail: String },
    #[error("stage {stage}: {source}")]
    Transport {
        stage: usize,
        #[source]
        source: TransportError,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid pipeline setup: {0}")]
    Setup(String),
    #[error("stage thread panicked")]
    Panicked,
}

pub type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Forward,
    Backward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    pub phase: Phase,
    pub batch: usize,
}

impl Event {
    fn f(batch: usize) -> Self {
        Self {
            phase: Phase::Forward,
            batch,
        }
    }

    fn b(batch: usize) -> Self {
        Self {
            phase: Phase::Backward,
            batch,
        }
    }
}

/// Forwards admitted at stage `s` before its first backward.
pub fn warmup(stages: usize, stage: usize, batches: usize) -> usize {
    (stages - stage).min(batches)
}

/// Per-stage 1F1B event order; every stage has `2·batches` events.
pub fn build_schedule(stages: usize, batches: usize) -> Vec<Vec<Event>> {
    (0..stages)
        .map(|s| {
            let w = warmup(stages, s, batches);
            let mut ev: Vec<Event> = (0..w).map(Event::f).collect();
            for i in 0..batches {
                ev.push(Event::b(i));
                if w + i < batches {
                    ev.push(Event::f(w + i));
                }
            }
            ev
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct StashEntry<T: Scalar> {
    pub batch: u64,
    pub version: u64,
    pub values: Vec<Tensor<T>>,
}

/// Bounded FIFO of parameter snapshots awaiting their backward.
#[derive(Debug)]
pub struct WeightStash<T: Scalar> {
    stage: usize,
    capacity: usize,
    entries: VecDeque<StashEntry<T>>,
}

impl<T: Scalar> WeightStash<T> {
    pub fn new(stage: usize, capacity: usize) -> Self {
        Self {
            stage,
            capacity,
            entries: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, entry: StashEntry<T>) -> Result<()> {
        if self.entries.len() >= self.capacity {
            return Err(PipelineError::StashOverflow {
                stage: self.stage,
                capacity: self.capacity,
            });
        }
        self.entries.push_back(entry);
        Ok(())
    }

    /// Removes the entry for `batch`, which must be the oldest.
    pub fn take(&mut self, batch: u64) -> Result<StashEntry<T>> {
        match self.entries.front() {
            Some(e) if e.batch == batch => Ok(self.entries.pop_front().expect("non-empty")),
            _ => Err(PipelineError::StashMiss {
                stage: self.stage,
                batch,
            }),
        }
    }

    pub fn peek(&self, batch: u64) -> Option<&StashEntry<T>> {
        self.entries.iter().find(|e| e.batch == batch)
    }

    pub fn occupancy(&self) -> usize {
        self.entries.len()
    }

    pub fn distinct_versions(&self) -> usize {
        self.entries.iter().map(|e| e.version).collect::<HashSet<_>>().len()
    }

    pub fn bytes(&self) -> usize {
        self.entries
            .iter()
            .flat_map(|e| &e.values)
            .map(|t| t.numel() * T::BYTES)
            .sum()
    }

    fn value_ids(&self) -> HashSet<u64> {
        self.entries.iter().flat_map(|e| &e.values).map(Tensor::id).collect()
    }
}

/// Saved state of a forwarded batch until its backward.
#[derive(Debug)]
pub struct BatchTicket<T: Scalar> {
    pub batch: u64,
    pub forward_version: u64,
    /// Stage output (hidden state, or the loss on the last stage).
    pub root: Tensor<T>,
    /// Gradient-collecting copy of the received activation (not on stage 0).
    pub input: Option<Tensor<T>>,
    pub forward_ms: f64,
}

/// Virtual-time parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimingModel {
    /// Backward duration as a multiple of the matching forward.
    pub backward_factor: f64,
    /// Added per encoder block to each forward.
    pub block_overhead_ms: f64,
    /// One-way latency of every inter-stage link.
    pub link_ms: f64,
}

impl Default for TimingModel {
    fn default() -> Self {
        Self {
            backward_factor: 2.0,
            block_overhead_ms: 0.0,
            link_ms: 0.0,
        }
    }
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub stage: usize,
    pub batch: u64,
    pub phase: Phase,
    /// Weight version used: committed version for forwards, stashed version
    /// for backwards.
    pub version: u64,
    pub ms: f64,
    /// Stage high-water mark of tracked bytes so far.
    pub peak_bytes: usize,
    pub end_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip)]
    pub stash_occupancy: usize,
    #[serde(skip)]
    pub distinct_versions: usize,
}

#[derive(Debug, Clone, Default)]
pub struct StageMetrics {
    pub stage: usize,
    pub records: Vec<TraceRecord>,
    pub peak_bytes: usize,
    pub clock_ms: f64,
    pub final_version: u64,
}

impl StageMetrics {
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }
}

/// Everything one stage needs for one run of `batches` batches.
pub struct StageRun<'a, T: Scalar> {
    pub spec: StageSpec,
    pub num_stages: usize,
    pub model: &'a mut StageModel<T>,
    pub strategy: AttentionStrategy,
    pub upstream: Option<&'a mut dyn Link>,
    pub downstream: Option<&'a mut dyn Link>,
    /// Batch source; required on stage 0.
    pub data: Option<&'a (dyn Fn(u64) -> Batch + Sync)>,
    pub batches: usize,
    /// Global id of the first batch of this run.
    pub first_batch: u64,
    pub lr: f64,
    pub timing: TimingModel,
    pub clock_start_ms: f64,
}

fn labels_tensor(labels: &[usize]) -> WireTensor {
    WireTensor::f64_vector(labels.iter().map(|&l| l as f64).collect())
}

fn clock_tensor(ms: f64) -> WireTensor {
    WireTensor::f64_vector(vec![ms])
}

struct StageState<'a, T: Scalar> {
    run: StageRun<'a, T>,
    stash: WeightStash<T>,
    tickets: VecDeque<BatchTicket<T>>,
    clock: f64,
    peak: usize,
    metrics: StageMetrics,
}

impl<'a, T: Scalar> StageState<'a, T> {
    fn stage(&self) -> usize {
        self.run.spec.stage_index
    }

    fn is_last(&self) -> bool {
        self.stage() + 1 == self.run.num_stages
    }

    fn protocol(&self, detail: String) -> PipelineError {
        PipelineError::Protocol {
            stage: self.stage(),
            detail,
        }
    }

    fn recv(&mut self, up: bool, kind: MsgType, batch: u64) -> Result<PipeMessage> {
        let stage = self.stage();
        let link = if up {
            self.run.upstream.as_deref_mut()
        } else {
            self.run.downstream.as_deref_mut()
        }
        .ok_or_else(|| PipelineError::Protocol {
            stage,
            detail: format!("missing {} link", if up { "upstream" } else { "downstream" }),
        })?;
        let m = link
            .recv()
            .map_err(|source| PipelineError::Transport { stage, source })?;
        if m.msg_type != kind || m.batch_id as u64 != batch {
            return Err(self.protocol(format!(
                "expected {kind:?} for batch {batch}, got {:?} for batch {}",
                m.msg_type, m.batch_id
            )));
        }
        Ok(m)
    }

    fn send(&mut self, up: bool, m: &PipeMessage) -> Result<()> {
        let stage = self.stage();
        let link = if up {
            self.run.upstream.as_deref_mut()
        } else {
            self.run.downstream.as_deref_mut()
        }
        .ok_or_else(|| PipelineError::Protocol {
            stage,
            detail: "missing link for send".into(),
        })?;
        link.send(m).map_err(|source| PipelineError::Transport { stage, source })
    }

    fn message_time(&self, m: &PipeMessage, at: usize) -> Result<f64> {
        m.tensors
            .get(at)
            .and_then(|t| t.data.to_f64().first().copied())
            .ok_or_else(|| self.protocol("message without clock".into()))
    }

    /// Tracked bytes: live parameters, stash snapshots, saved graphs of
    /// in-flight batches and `scratch`.
    fn tracked_bytes(&self, scratch: usize) -> usize {
        let exclude = self.stash.value_ids();
        self.run.model.param_bytes()
            + self.stash.bytes()
            + self.tickets.iter().map(|t| graph_bytes(&t.root, &exclude)).sum::<usize>()
            + scratch
    }

    fn note_peak(&mut self, bytes: usize) {
        self.peak = self.peak.max(bytes);
    }

    fn forward(&mut self, batch: u64) -> Result<()> {
        let (input, labels, not_before) = if self.run.spec.stage_index == 0 {
            let data = self.run.data.ok_or_else(|| self.protocol("stage 0 has no data source".into()))?;
            let b = data(batch);
            (StageInput::Tokens(b.tokens), b.labels, self.clock)
        } else {
            let m = self.recv(true, MsgType::Activation, batch)?;
            let [h, l, _] = m.tensors.as_slice() else {
                return Err(self.protocol(format!("activation with {} tensors", m.tensors.len())));
            };
            let hidden = h.to_tensor::<T>().map_err(|source| PipelineError::Transport {
                stage: self.stage(),
                source,
            })?;
            let labels = l.data.to_f64().into_iter().map(|v| v as usize).collect();
            let ts = self.message_time(&m, 2)?;
            (StageInput::Hidden(hidden.detach_param()), labels, ts + self.run.timing.link_ms)
        };
        let input_leaf = match &input {
            StageInput::Hidden(h) => Some(h.clone()),
            StageInput::Tokens(_) => None,
        };
        let start = self.clock.max(not_before);
        let version = self.run.model.version();
        let values = self.run.model.snapshot();
        self.stash.push(StashEntry {
            batch,
            version,
            values: values.clone(),
        })?;
        let out = self
            .run
            .model
            .forward_with(&values, input, Some(&labels), &self.run.strategy)?;
        let ms = out.attention_ms + self.run.timing.block_overhead_ms * self.run.spec.blocks() as f64;
        let end = start + ms;
        self.clock = end;
        let (loss, acc) = match &out.logits {
            Some(logits) => (Some(out.output.item().as_f64()), Some(accuracy(logits, &labels))),
            None => (None, None),
        };
        self.tickets.push_back(BatchTicket {
            batch,
            forward_version: version,
            root: out.output.clone(),
            input: input_leaf,
            forward_ms: ms,
        });
        if !self.is_last() {
            let m = PipeMessage::new(
                MsgType::Activation,
                batch as u32,
                version as u32,
                vec![WireTensor::from_tensor(&out.output), labels_tensor(&labels), clock_tensor(end)],
            );
            self.send(false, &m)?;
        }
        let bytes = self.tracked_bytes(0);
        self.note_peak(bytes);
        self.record(batch, Phase::Forward, version, ms, end, loss, acc);
        Ok(())
    }

    fn backward(&mut self, batch: u64) -> Result<()> {
        let (seed, not_before) = if self.is_last() {
            (None, self.clock)
        } else {
            let m = self.recv(false, MsgType::Gradient, batch)?;
            let g = m
                .tensors
                .first()
                .ok_or_else(|| self.protocol("gradient without payload".into()))?
                .to_tensor::<T>()
                .map_err(|source| PipelineError::Transport {
                    stage: self.stage(),
                    source,
                })?;
            let ts = self.message_time(&m, 1)?;
            (Some(g), ts + self.run.timing.link_ms)
        };
        let stage = self.stage();
        if self.tickets.front().map(|t| t.batch) != Some(batch) {
            return Err(PipelineError::StashMiss { stage, batch });
        }
        let entry = self.stash.peek(batch).ok_or(PipelineError::StashMiss { stage, batch })?.clone();
        let ticket = self.tickets.front().expect("checked above");
        if entry.version != ticket.forward_version {
            return Err(self.protocol(format!(
                "batch {batch}: stash holds version {} but forward used {}",
                entry.version, ticket.forward_version
            )));
        }
        let grads = match &seed {
            None => backward(&ticket.root)?,
            Some(g) => {
                if g.shape() != ticket.root.shape() {
                    return Err(self.protocol(format!("gradient shape {:?}", g.shape())));
                }
                backward_with(&ticket.root, g.data())?
            }
        };
        let param_grads: Vec<Tensor<T>> = entry.values.iter().map(|v| grads.tensor_for(v)).collect();
        let scratch = param_grads.iter().map(|g| g.numel() * T::BYTES).sum();
        let bytes = self.tracked_bytes(scratch);
        self.note_peak(bytes);

        let ticket = self.tickets.pop_front().expect("checked above");
        self.stash.take(batch)?;
        let start = self.clock.max(not_before);
        let ms = self.run.timing.backward_factor * ticket.forward_ms;
        let end = start + ms;
        self.clock = end;
        if let Some(input) = &ticket.input {
            let m = PipeMessage::new(
                MsgType::Gradient,
                batch as u32,
                entry.version as u32,
                vec![WireTensor::from_tensor(&grads.tensor_for(input)), clock_tensor(end)],
            );
            self.send(true, &m)?;
        }
        sgd_step(&mut self.run.model.params, self.run.lr, &param_grads)?;
        self.record(batch, Phase::Backward, entry.version, ms, end, None, None);
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn record(&mut self, batch: u64, phase: Phase, version: u64, ms: f64, end: f64, loss: Option<f64>, acc: Option<f64>) {
        self.metrics.records.push(TraceRecord {
            stage: self.stage(),
            batch,
            phase,
            version,
            ms,
            peak_bytes: self.peak,
            end_ms: end,
            loss,
            accuracy: acc,
            stash_occupancy: self.stash.occupancy(),
            distinct_versions: self.stash.distinct_versions(),
        });
    }
}

/// Runs one stage's event loop to completion.
pub fn run_stage<T: Scalar>(run: StageRun<'_, T>) -> Result<StageMetrics> {
    let s = run.spec.stage_index;
    if s >= run.num_stages {
        return Err(PipelineError::Setup(format!("stage {s} of {}", run.num_stages)));
    }
    let capacity = run.num_stages - s;
    let schedule = build_schedule(run.num_stages, run.batches).swap_remove(s);
    let first = run.first_batch;
    let clock = run.clock_start_ms;
    let mut st = StageState {
        run,
        stash: WeightStash::new(s, capacity),
        tickets: VecDeque::new(),
        clock,
        peak: 0,
        metrics: StageMetrics {
            stage: s,
            ..Default::default()
        },
    };
    for ev in schedule {
        let batch = first + ev.batch as u64;
        match ev.phase {
            Phase::Forward => st.forward(batch)?,
            Phase::Backward => st.backward(batch)?,
        }
    }
    st.metrics.peak_bytes = st.peak;
    st.metrics.clock_ms = st.clock;
    st.metrics.final_version = st.run.model.version();
    log::debug!("stage {s} done at {:.3} ms, version {}", st.clock, st.metrics.final_version);
    Ok(st.metrics)
}

/// Settings shared by every stage of a local run.
#[derive(Debug, Clone, Copy)]
pub struct LocalRunOptions {
    pub batches: usize,
    pub first_batch: u64,
    pub lr: f64,
    pub timing: TimingModel,
    pub clock_start_ms: f64,
}

/// Runs every stage on its own thread over loopback links.
pub fn run_local<T: Scalar>(
    stages: &mut [StageModel<T>],
    strategies: &[AttentionStrategy],
    data: &(dyn Fn(u64) -> Batch + Sync),
    opts: LocalRunOptions,
) -> Result<Vec<StageMetrics>> {
    let n = stages.len();
    if n == 0 || strategies.len() != n {
        return Err(PipelineError::Setup(format!("{n} stages, {} strategies", strategies.len())));
    }
    let mut ups: Vec<Option<Box<dyn Link>>> = (0..n).map(|_| None).collect();
    let mut downs: Vec<Option<Box<dyn Link>>> = (0..n).map(|_| None).collect();
    for s in 0..n - 1 {
        let (a, b) = loopback_pair();
        downs[s] = Some(Box::new(a));
        ups[s + 1] = Some(Box::new(b));
    }
    std::thread::scope(|scope| {
        let handles: Vec<_> = stages
            .iter_mut()
            .zip(strategies)
            .zip(ups.iter_mut().zip(downs.iter_mut()))
            .enumerate()
            .map(|(s, ((model, strategy), (up, down)))| {
                let spec = StageSpec {
                    stage_index: s,
                    layer_range: model.blocks.clone(),
                    is_central: s == 0,
                };
                scope.spawn(move || {
                    let run = StageRun {
                        spec,
                        num_stages: n,
                        model,
                        strategy: strategy.clone(),
                        upstream: up.as_deref_mut().map(|l| l as &mut dyn Link),
                        downstream: down.as_deref_mut().map(|l| l as &mut dyn Link),
                        data: (s == 0).then_some(data),
                        batches: opts.batches,
                        first_batch: opts.first_batch,
                        lr: opts.lr,
                        timing: opts.timing,
                        clock_start_ms: opts.clock_start_ms,
                    };
                    let out = run_stage(run);
                    if out.is_err() {
                        // Unblock neighbours waiting on this stage.
                        *up = None;
                        *down = None;
                    }
                    out
                })
            })
            .collect();
        let mut results = Vec::with_capacity(n);
        for h in handles {
            results.push(h.join().map_err(|_| PipelineError::Panicked)?);
        }
        // Report the root cause, not the disconnects it triggered downstream.
        if let Some(i) = results.iter().position(|r| matches!(r, Err(e) if !matches!(e, PipelineError::Transport { source: TransportError::TransportClosed, .. }))) {
            return Err(results.swap_remove(i).unwrap_err());
        }
        results.into_iter().collect()
    })
}

/// Violations of the 1F1B protocol found in a trace.
pub fn check_trace(metrics: &[StageMetrics], batches: usize) -> Vec<String> {
    let stages = metrics.len();
    let schedule = build_schedule(stages, batches);
    let mut bad = Vec::new();
    for (s, m) in metrics.iter().enumerate() {
        let events: Vec<(Phase, u64)> = m.records.iter().map(|r| (r.phase, r.batch)).collect();
        let first = m.records.first().map_or(0, |r| r.batch);
        let expected: Vec<(Phase, u64)> = schedule[s].iter().map(|e| (e.phase, first + e.batch as u64)).collect();
        if events != expected {
            bad.push(format!("stage {s}: event order differs from the 1F1B schedule"));
        }
        let w = warmup(stages, s, batches);
        let steady = &m.records[w.min(m.records.len())..m.records.len().saturating_sub(w)];
        for pair in steady.windows(2) {
            if pair[0].phase == pair[1].phase {
                bad.push(format!(
                    "stage {s}: consecutive {:?} at batches {} and {}",
                    pair[0].phase, pair[0].batch, pair[1].batch
                ));
            }
        }
        for r in &m.records {
            if r.phase == Phase::Backward {
                let fwd = m.records.iter().find(|f| f.phase == Phase::Forward && f.batch == r.batch);
                match fwd {
                    Some(f) if f.version == r.version => {}
                    Some(f) => bad.push(format!(
                        "stage {s}: batch {} forward v{} backward v{}",
                        r.batch, f.version, r.version
                    )),
                    None => bad.push(format!("stage {s}: backward without forward for batch {}", r.batch)),
                }
            }
            if r.stash_occupancy > stages - s {
                bad.push(format!("stage {s}: stash occupancy {} > {}", r.stash_occupancy, stages - s));
            }
        }
        if m.records.len() != 2 * batches {
            bad.push(format!("stage {s}: {} events, expected {}", m.records.len(), 2 * batches));
        }
    }
    bad
}

/// Steady-state time between consecutive batch completions at stage 0:
/// median gap over the second half of the run. `records` may hold every
/// stage; only stage 0 backwards are used.
pub fn steady_state_latency_ms(records: &[TraceRecord]) -> Option<f64> {
    let ends: Vec<f64> = records
        .iter()
        .filter(|r| r.stage == 0 && r.phase == Phase::Backward)
        .map(|r| r.end_ms)
        .collect();
    let gaps: Vec<f64> = ends.windows(2).map(|w| w[1] - w[0]).collect();
    if gaps.is_empty() {
        let start = records.iter().find(|r| r.stage == 0).map(|r| r.end_ms - r.ms)?;
        return ends.first().map(|&e| e - start);
    }
    let mut tail = gaps[gaps.len() / 2..].to_vec();
    tail.sort_by(f64::total_cmp);
    Some(tail[tail.len() / 2])
}

/// Analytic byte accounting for one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryBreakdown {
    pub stage: usize,
    pub param_bytes: usize,
    pub stash_depth: usize,
    pub stash_bytes: usize,
    /// Saved activations of one in-flight batch.
    pub activation_bytes: usize,
    pub in_flight: usize,
    /// Parameter gradients held while a backward runs.
    pub scratch_bytes: usize,
    pub total_bytes: usize,
}

/// Elements saved by one attention layer: its output node. The layer's
/// backward recomputes per-head intermediates instead of keeping them.
fn attention_elems(cfg: &EncoderConfig, rows: usize) -> usize {
    rows * cfg.heads * cfg.d_head()
}

/// Elements saved by one forward of `model`-shaped stage for a batch.
pub fn activation_elems(
    cfg: &EncoderConfig,
    blocks: usize,
    first: bool,
    last: bool,
    batch: usize,
) -> usize {
    let rows = batch * cfg.seq_len;
    let (d, f) = (cfg.d_model, cfg.d_ff);
    let ln = 2 * rows * d + rows;
    let block = ln + attention_elems(cfg, rows) + rows * d // residual
        + ln + 3 * rows * f + 3 * rows * d;
    let prefix = if first { 3 * rows * d } else { rows * d };
    let suffix = if last {
        ln + batch * d + 2 * batch * cfg.classes + 1 + batch * cfg.classes
    } else {
        0
    };
    prefix + blocks * block + suffix
}

/// Per-stage memory model:
/// `params·(1 + stash_depth) + activations·in_flight + scratch`.
pub fn account_memory(
    spec: &StageSpec,
    cfg: &EncoderConfig,
    batch: usize,
    stages: usize,
    bytes_per_scalar: usize,
) -> MemoryBreakdown {
    let first = spec.stage_index == 0;
    let last = spec.stage_index + 1 == stages;
    let params = spec.blocks() * cfg.block_param_count()
        + if first { cfg.embedding_param_count() } else { 0 }
        + if last { cfg.head_param_count() } else { 0 };
    let depth = stages - spec.stage_index;
    let param_bytes = params * bytes_per_scalar;
    let activation_bytes = activation_elems(cfg, spec.blocks(), first, last, batch) * bytes_per_scalar;
    let stash_bytes = depth * param_bytes;
    MemoryBreakdown {
        stage: spec.stage_index,
        param_bytes,
        stash_depth: depth,
        stash_bytes,
        activation_bytes,
        in_flight: depth,
        scratch_bytes: param_bytes,
        total_bytes: param_bytes + stash_bytes + depth * activation_bytes + param_bytes,
    }
}

/// Convenience for building a split strategy from lane counts.
pub fn split_strategy(
    counts: &[(usize, usize, HeadMode)],
    lanes: Arc<crate::lanes::LaneSet>,
) -> AttentionStrategy {
    AttentionStrategy::Split {
        plan: crate::attention::ExecutionPlan::from_counts(counts),
        lanes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{train_sequential, SyntheticTask};

    fn phases(ev: &[Event]) -> String {
        ev.iter()
            .map(|e| format!("{}{}", if e.phase == Phase::Forward { 'F' } else { 'B' }, e.batch))
            .collect::<Vec<_>>()
            .join(",")
    }

    #[test]
    fn single_stage_is_sequential() {
        assert_eq!(phases(&build_schedule(1, 3)[0]), "F0,B0,F1,B1,F2,B2");
    }

    #[test]
    fn three_stage_prefix() {
        let s = build_schedule(3, 6);
        assert!(phases(&s[0]).starts_with("F0,F1,F2,B0,F3,B1,F4,B2"));
        assert_eq!(phases(&s[2]), "F0,B0,F1,B1,F2,B2,F3,B3,F4,B4,F5,B5");
    }

    #[test]
    fn two_stage_two_batches_last_alternates() {
        let s = build_schedule(2, 2);
        assert_eq!(phases(&s[1]), "F0,B0,F1,B1");
        assert_eq!(phases(&s[0]), "F0,F1,B0,B1");
    }

    #[test]
    fn schedule_sizes() {
        for st in 1..5 {
            for n in 1..8 {
                for ev in build_schedule(st, n) {
                    assert_eq!(ev.len(), 2 * n);
                }
            }
        }
    }

    #[test]
    fn stash_is_bounded_fifo() {
        let mut s = WeightStash::<f32>::new(0, 2);
        let e = |b| StashEntry {
            batch: b,
            version: b,
            values: vec![Tensor::zeros(vec![2])],
        };
        s.push(e(0)).unwrap();
        s.push(e(1)).unwrap();
        assert!(matches!(s.push(e(2)), Err(PipelineError::StashOverflow { .. })));
        assert!(matches!(s.take(1), Err(PipelineError::StashMiss { batch: 1, .. })));
        assert_eq!(s.take(0).unwrap().version, 0);
        assert_eq!(s.bytes(), 8);
    }

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            layers: 3,
            heads: 2,
            d_model: 8,
            d_ff: 12,
            vocab: 16,
            seq_len: 4,
            classes: 4,
            seed: 9,
            scale_scores: true,
        }
    }

    fn opts(batches: usize) -> LocalRunOptions {
        LocalRunOptions {
            batches,
            first_batch: 0,
            lr: 0.05,
            timing: TimingModel::default(),
            clock_start_ms: 0.0,
        }
    }

    #[test]
    fn one_stage_pipeline_matches_sequential_bits() {
        let cfg = tiny();
        let task = SyntheticTask::new(&cfg, 1);
        let mut seq = StageModel::<f32>::build(&cfg).unwrap();
        train_sequential(&mut seq, &task, 4, 3, 0.05, &AttentionStrategy::Fused).unwrap();
        let mut stages = StageModel::<f32>::build(&cfg).unwrap().split(&[0..3]).unwrap();
        let data = |i| task.batch(i, 3);
        run_local(&mut stages, &[AttentionStrategy::Fused], &data, opts(4)).unwrap();
        for (p, q) in seq.params.iter().zip(&stages[0].params) {
            assert_eq!(p.value.data(), q.value.data(), "{}", p.name);
            assert_eq!(p.version, q.version);
        }
    }

    #[test]
    fn three_stage_trace_is_clean() {
        let cfg = tiny();
        let task = SyntheticTask::new(&cfg, 1);
        let mut stages = StageModel::<f32>::build(&cfg).unwrap().split(&[0..1, 1..2, 2..3]).unwrap();
        let data = |i| task.batch(i, 2);
        let strategies = vec![AttentionStrategy::Fused; 3];
        let m = run_local(&mut stages, &strategies, &data, opts(7)).unwrap();
        assert!(check_trace(&m, 7).is_empty(), "{:?}", check_trace(&m, 7));
        assert!(m[0].records.iter().all(|r| r.distinct_versions <= 3));
        assert!(m.iter().all(|s| s.final_version == 7));
        // Stage 0 forwards batch 1 with the weights batch 0 used.
        assert_eq!(m[0].records[0].version, 0);
        assert_eq!(m[0].records[1].version, 0);
    }

    #[test]
    fn tracked_memory_matches_analytic_model() {
        let cfg = tiny();
        let task = SyntheticTask::new(&cfg, 1);
        let ranges = [0..1, 1..2, 2..3];
        let mut stages = StageModel::<f32>::build(&cfg).unwrap().split(&ranges).unwrap();
        let data = |i| task.batch(i, 2);
        for strategy in [AttentionStrategy::Fused, AttentionStrategy::PerHead] {
            let strategies = vec![strategy.clone(); 3];
            let m = run_local(&mut stages, &strategies, &data, opts(5)).unwrap();
            for (s, r) in ranges.iter().enumerate() {
                let spec = StageSpec {
                    stage_index: s,
                    layer_range: r.clone(),
                    is_central: s == 0,
                };
                let a = account_memory(&spec, &cfg, 2, 3, 4);
                assert_eq!(m[s].peak_bytes, a.total_bytes, "stage {s} {strategy:?}");
            }
        }
    }
}
