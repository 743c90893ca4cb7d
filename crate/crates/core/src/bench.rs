//! Run configuration, the four evaluation arms, multi-process coordination
//! and the comparison report.
//!
//! | arm          | stages          | lanes per device |
//! |--------------|-----------------|------------------|
//! | `single`     | 1 (device 0)    | first lane       |
//! | `single-mbs` | 1 (device 0)    | all lanes        |
//! | `pipeline`   | one per device  | first lane       |
//! | `confidant`  | one per device  | all lanes        |
//!
//! Every epoch the coordinator profiles each device's lanes, allocates
//! heads with the binary-search scheduler, calibrates one block per device
//! to estimate capacity, partitions the blocks, and then trains
//! `batches_per_epoch` batches through the pipeline.

use std::fmt;
use std::net::{SocketAddr, TcpListener};
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{AttentionStrategy, ExecutionPlan, HeadMode};
use crate::lanes::{descriptor_violations, discover_lanes, LaneDescriptor, LaneError, LaneSet, LayerDims, ProfileOptions, ProfileTable};
use crate::model::{evaluate, Batch, EncoderConfig, ModelError, StageInput, StageModel, StepResult, SyntheticTask};
use crate::partition::{partition, CapacityEstimate, PartitionDecision, PartitionError, StageSpec};
use crate::pipeline::{
    account_memory, run_local, run_stage, steady_state_latency_ms, LocalRunOptions, MemoryBreakdown, PipelineError,
    StageMetrics, StageRun, TimingModel, TraceRecord,
};
use crate::scheduler::{allocate, AllocationPlan, SchedulerError, TimeTable};
use crate::tensor::{backward, TensorError};
use crate::transport::{ControlKind, Link, MsgType, PipeMessage, StreamLink, TransportError, WireTensor};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Lane(#[from] LaneError),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl BenchError {
    /// 2 for configuration and input problems (including a device with no
    /// usable lane), 1 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            BenchError::Config(_)
            | BenchError::Input(_)
            | BenchError::Lane(LaneError::AllLanesFailed | LaneError::EmptyLaneSet) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, BenchError>;

fn io_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> BenchError {
    let context = context.into();
    move |source| BenchError::Io { context, source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Coordinator,
    Worker,
    AllInOne,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    Single,
    SingleMbs,
    Pipeline,
    Confidant,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::Single, Arm::SingleMbs, Arm::Pipeline, Arm::Confidant];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Single => "single",
            Arm::SingleMbs => "single-mbs",
            Arm::Pipeline => "pipeline",
            Arm::Confidant => "confidant",
        }
    }

    pub fn stages(self, devices: usize) -> usize {
        match self {
            Arm::Single | Arm::SingleMbs => 1,
            Arm::Pipeline | Arm::Confidant => devices,
        }
    }

    pub fn all_lanes(self) -> bool {
        matches!(self, Arm::SingleMbs | Arm::Confidant)
    }

    /// Lane ids this arm uses on a device.
    pub fn lane_ids(self, lanes: &[LaneDescriptor]) -> Vec<usize> {
        let ids = lanes.iter().enumerate().map(|(pos, d)| d.id.unwrap_or(pos));
        if self.all_lanes() {
            ids.collect()
        } else {
            ids.take(1).collect()
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arm {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Arm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown arm {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceConfig {
    pub name: String,
    pub lanes: Vec<LaneDescriptor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub eval_batches: usize,
    pub eval_batch_size: usize,
    pub timing: TimingModel,
    /// Receive and connect deadline for inter-process links.
    pub link_timeout_ms: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            batches_per_epoch: 200,
            batch_size: 8,
            lr: 0.05,
            eval_batches: 8,
            eval_batch_size: 32,
            timing: TimingModel::default(),
            link_timeout_ms: 60_000,
        }
    }
}

/// Tolerances for the allocator. Absolute values win over fractions; the
/// fraction of ε is taken of the best single-lane time for all heads, the
/// fraction of σ is taken of ε.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerConfig {
    pub epsilon_ms: Option<f64>,
    pub sigma_ms: Option<f64>,
    pub epsilon_fraction: f64,
    pub sigma_fraction: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            epsilon_ms: None,
            sigma_ms: None,
            epsilon_fraction: 0.05,
            sigma_fraction: 0.1,
        }
    }
}

impl SchedulerConfig {
    pub fn tolerances(&self, table: &TimeTable, heads: usize) -> (f64, f64) {
        let eps = self
            .epsilon_ms
            .unwrap_or_else(|| self.epsilon_fraction * table.best_single_lane(heads).1);
        let sigma = self.sigma_ms.unwrap_or(self.sigma_fraction * eps);
        (eps, sigma)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileConfig {
    pub repetitions: usize,
    pub warmup: usize,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        Self {
            repetitions: 5,
            warmup: 2,
        }
    }
}

fn default_role() -> Role {
    Role::AllInOne
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

/// Top-level run description. `seed` drives model initialisation (it
/// overrides `encoder.seed`), profiling and the synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_role")]
    pub role: Role,
    /// `host:port` per stage; stage `s` listens on entry `s` for stage `s+1`.
    #[serde(default)]
    pub stage_endpoints: Vec<String>,
    pub devices: Vec<DeviceConfig>,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub scheduler: SchedulerConfig,
    #[serde(default)]
    pub profile: ProfileConfig,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| BenchError::Config(vec![e.to_string()]))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BenchError::Input(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            seed: self.seed,
            ..self.encoder.clone()
        }
    }

    /// Every problem with this config for `arm`.
    pub fn violations(&self, arm: Arm) -> Vec<String> {
        let mut v = Vec::new();
        if self.devices.is_empty() {
            v.push("devices: at least one device is required".to_string());
        }
        for (d, dev) in self.devices.iter().enumerate() {
            for e in descriptor_violations(&dev.lanes) {
                v.push(format!("devices[{d}] ({}): {e}", dev.name));
            }
        }
        v.extend(self.encoder.violations().into_iter().map(|e| format!("encoder: {e}")));
        let t = &self.training;
        for (name, value) in [
            ("epochs", t.epochs),
            ("batches_per_epoch", t.batches_per_epoch),
            ("batch_size", t.batch_size),
            ("eval_batches", t.eval_batches),
            ("eval_batch_size", t.eval_batch_size),
        ] {
            if value == 0 {
                v.push(format!("training.{name} must be positive"));
            }
        }
        if !(t.lr.is_finite() && t.lr > 0.0) {
            v.push(format!("training.lr must be positive, got {}", t.lr));
        }
        let tm = &t.timing;
        if !(tm.backward_factor.is_finite() && tm.backward_factor >= 0.0) {
            v.push("training.timing.backward_factor must be non-negative".into());
        }
        if !(tm.block_overhead_ms >= 0.0 && tm.link_ms >= 0.0) {
            v.push("training.timing overheads must be non-negative".into());
        }
        let s = &self.scheduler;
        if s.epsilon_ms.is_some_and(|e| !(e > 0.0)) || !(s.epsilon_fraction > 0.0) {
            v.push("scheduler: epsilon must be positive".into());
        }
        if s.sigma_ms.is_some_and(|e| !(e > 0.0)) || !(s.sigma_fraction > 0.0) {
            v.push("scheduler: sigma must be positive".into());
        }
        if self.profile.repetitions < 3 || self.profile.repetitions.is_multiple_of(2) {
            v.push(format!("profile.repetitions must be odd and >= 3, got {}", self.profile.repetitions));
        }
        let stages = arm.stages(self.devices.len());
        if stages > 0 && self.encoder.layers < stages {
            v.push(format!("encoder.layers {} < {stages} stages", self.encoder.layers));
        }
        if self.role != Role::AllInOne && stages > 1 {
            if self.stage_endpoints.len() != stages {
                v.push(format!(
                    "stage_endpoints: {} entries for {stages} stages",
                    self.stage_endpoints.len()
                ));
            }
            for e in &self.stage_endpoints {
                if e.parse::<SocketAddr>().is_err() {
                    v.push(format!("stage_endpoints: {e:?} is not host:port"));
                }
            }
        }
        v
    }

    pub fn validate(&self, arm: Arm) -> Result<()> {
        let v = self.violations(arm);
        if v.is_empty() {
            Ok(())
        } else {
            Err(BenchError::Config(v))
        }
    }

    fn layer_dims(&self) -> LayerDims {
        LayerDims {
            heads: self.encoder.heads,
            d_model: self.encoder.d_model,
            seq_len: self.encoder.seq_len,
            batch: self.training.batch_size,
        }
    }

    fn link_timeout(&self) -> Duration {
        Duration::from_millis(self.training.link_timeout_ms)
    }
}

/// Profiles every lane of every device, in device order.
pub fn profile_devices(cfg: &RunConfig) -> Result<Vec<ProfileTable>> {
    cfg.validate(Arm::Single)?;
    cfg.devices
        .iter()
        .enumerate()
        .map(|(d, dev)| {
            let lanes = discover_lanes(&dev.lanes)?;
            let opts = ProfileOptions {
                repetitions: cfg.profile.repetitions,
                warmup: cfg.profile.warmup,
                seed: cfg.seed.wrapping_add(d as u64),
            };
            Ok(crate::lanes::profile(&lanes, cfg.layer_dims(), opts)?)
        })
        .collect()
}

/// Lanes of each device the arm uses, in stage order.
pub fn arm_lanes(cfg: &RunConfig, arm: Arm) -> Result<Vec<Arc<LaneSet>>> {
    cfg.devices[..arm.stages(cfg.devices.len())]
        .iter()
        .map(|d| {
            let all = discover_lanes(&d.lanes)?;
            Ok(Arc::new(all.subset(&arm.lane_ids(&d.lanes))?))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanSlot {
    pub lane: usize,
    pub k: usize,
    pub mode: HeadMode,
}

/// Profiling, allocation and calibration results for one device.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DevicePlan {
    pub device: String,
    pub profile: ProfileTable,
    pub plan: AllocationPlan,
    pub slots: Vec<PlanSlot>,
    pub capacity: CapacityEstimate,
}

pub fn slots_strategy(slots: &[PlanSlot], lanes: Arc<LaneSet>) -> AttentionStrategy {
    let counts: Vec<(usize, usize, HeadMode)> = slots.iter().map(|s| (s.lane, s.k, s.mode)).collect();
    AttentionStrategy::Split {
        plan: ExecutionPlan::from_counts(&counts),
        lanes,
    }
}

/// Profiles, allocates and calibrates one device.
pub fn plan_device(cfg: &RunConfig, device: usize, lanes: &Arc<LaneSet>, seed: u64) -> Result<DevicePlan> {
    let heads = cfg.encoder.heads;
    let opts = ProfileOptions {
        repetitions: cfg.profile.repetitions,
        warmup: cfg.profile.warmup,
        seed,
    };
    let profile = crate::lanes::profile(lanes, cfg.layer_dims(), opts)?;
    let table = TimeTable::from_profile(&profile, heads)?;
    let (eps, sigma) = cfg.scheduler.tolerances(&table, heads);
    let plan = allocate(&table, heads, eps, sigma)?;
    let slots: Vec<PlanSlot> = plan
        .entries
        .iter()
        .filter(|e| e.k > 0)
        .map(|e| PlanSlot {
            lane: e.lane,
            k: e.k,
            mode: profile.mode(e.lane, e.k).unwrap_or(HeadMode::Fused),
        })
        .collect();
    let capacity = calibrate(cfg, device, &slots_strategy(&slots, Arc::clone(lanes)))?;
    log::info!(
        "device {device}: plan {:?}, makespan {:.3} ms, {:.2} blocks/s",
        slots.iter().map(|s| (s.lane, s.k)).collect::<Vec<_>>(),
        plan.makespan_ms,
        capacity.blocks_per_sec
    );
    Ok(DevicePlan {
        device: cfg.devices[device].name.clone(),
        profile,
        plan,
        slots,
        capacity,
    })
}

/// Times one forward and backward of a single encoder block.
pub fn calibrate(cfg: &RunConfig, device: usize, strategy: &AttentionStrategy) -> Result<CapacityEstimate> {
    let enc = EncoderConfig {
        layers: 1,
        ..cfg.encoder_config()
    };
    let model = StageModel::<f32>::build(&enc)?;
    let batch = SyntheticTask::new(&enc, cfg.seed).batch(0, cfg.training.batch_size);
    let out = model.forward_with(&model.values(), StageInput::Tokens(batch.tokens), Some(&batch.labels), strategy)?;
    backward(&out.output)?;
    let t = &cfg.training.timing;
    let forward_ms = out.attention_ms + t.block_overhead_ms;
    Ok(CapacityEstimate::from_block_ms(device, forward_ms * (1.0 + t.backward_factor)))
}

/// Shared by every stage for one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochPlan {
    pub epoch: usize,
    pub first_batch: u64,
    pub batches: usize,
    pub clock_start_ms: f64,
    pub ranges: Vec<Range<usize>>,
    pub capacities: Vec<f64>,
    pub slots: Vec<Vec<PlanSlot>>,
    pub makespans_ms: Vec<f64>,
}

impl EpochPlan {
    pub fn specs(&self) -> Vec<StageSpec> {
        PartitionDecision {
            capacities: self.capacities.clone(),
            ranges: self.ranges.clone(),
        }
        .stages()
    }

    /// Bottleneck stage time: blocks × per-block forward and backward.
    pub fn predicted_latency_ms(&self, timing: &TimingModel) -> f64 {
        self.ranges
            .iter()
            .zip(&self.makespans_ms)
            .map(|(r, m)| r.len() as f64 * (m + timing.block_overhead_ms) * (1.0 + timing.backward_factor))
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub arm: Arm,
    pub stages: usize,
    pub epochs: usize,
    pub batches: usize,
    pub parameter_count: usize,
    pub ranges: Vec<Range<usize>>,
    pub steady_latency_ms: f64,
    pub predicted_latency_ms: f64,
    pub initial_train_loss: f64,
    pub final_train_loss: f64,
    pub initial_eval: StepResult,
    pub final_eval: StepResult,
    pub tracked_peak_bytes: Vec<usize>,
    pub memory: Vec<MemoryBreakdown>,
}

pub struct RunOutcome {
    pub summary: RunSummary,
    /// Per stage, every epoch's records in order.
    pub metrics: Vec<StageMetrics>,
    pub device_plans: Vec<DevicePlan>,
    pub partitions: Vec<PartitionDecision>,
    pub model: StageModel<f32>,
}

/// How an epoch's stages are executed.
trait EpochExecutor {
    fn run_epoch(
        &mut self,
        plan: &EpochPlan,
        stages: &mut [StageModel<f32>],
        strategies: &[AttentionStrategy],
        data: &(dyn Fn(u64) -> Batch + Sync),
        timing: TimingModel,
        lr: f64,
    ) -> Result<Vec<StageMetrics>>;

    fn finish(&mut self) -> Result<()> {
        Ok(())
    }
}

struct LocalExecutor;

impl EpochExecutor for LocalExecutor {
    fn run_epoch(
        &mut self,
        plan: &EpochPlan,
        stages: &mut [StageModel<f32>],
        strategies: &[AttentionStrategy],
        data: &(dyn Fn(u64) -> Batch + Sync),
        timing: TimingModel,
        lr: f64,
    ) -> Result<Vec<StageMetrics>> {
        let opts = LocalRunOptions {
            batches: plan.batches,
            first_batch: plan.first_batch,
            lr,
            timing,
            clock_start_ms: plan.clock_start_ms,
        };
        Ok(run_local(stages, strategies, data, opts)?)
    }
}

fn weights_message(stage: usize, model: &StageModel<f32>) -> PipeMessage {
    PipeMessage::new(
        MsgType::Weights,
        stage as u32,
        model.version() as u32,
        model.params.iter().map(|p| WireTensor::from_tensor(&p.value)).collect(),
    )
}

fn apply_weights(model: &mut StageModel<f32>, m: &PipeMessage) -> Result<()> {
    if m.tensors.len() != model.params.len() {
        return Err(BenchError::Input(format!(
            "weights for {} tensors, stage has {}",
            m.tensors.len(),
            model.params.len()
        )));
    }
    for (p, t) in model.params.iter_mut().zip(&m.tensors) {
        let v = t.to_tensor::<f32>()?;
        if v.shape() != p.value.shape() {
            return Err(BenchError::Input(format!("weights for {} have shape {:?}", p.name, v.shape())));
        }
        p.value = v.detach_param();
        p.version = m.version as u64;
    }
    Ok(())
}

fn expect(link: &mut dyn Link, kind: MsgType) -> Result<PipeMessage> {
    let m = link.recv()?;
    if m.msg_type != kind {
        return Err(BenchError::Pipeline(PipelineError::Protocol {
            stage: usize::MAX,
            detail: format!("expected {kind:?}, got {:?}", m.msg_type),
        }));
    }
    Ok(m)
}

fn metrics_from_jsonl(stage: usize, doc: &str, version: u64) -> Result<StageMetrics> {
    let records = doc
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str::<TraceRecord>)
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| BenchError::Input(format!("bad metrics from stage {stage}: {e}")))?;
    Ok(StageMetrics {
        stage,
        peak_bytes: records.iter().map(|r| r.peak_bytes).max().unwrap_or(0),
        clock_ms: records.iter().map(|r| r.end_ms).fold(0.0, f64::max),
        final_version: version,
        records,
    })
}

/// Coordinator side of a multi-process run: stage 0 runs here, the other
/// stages are reached through the stream link to stage 1.
struct RemoteExecutor {
    down: Option<StreamLink>,
}

impl EpochExecutor for RemoteExecutor {
    fn run_epoch(
        &mut self,
        plan: &EpochPlan,
        stages: &mut [StageModel<f32>],
        strategies: &[AttentionStrategy],
        data: &(dyn Fn(u64) -> Batch + Sync),
        timing: TimingModel,
        lr: f64,
    ) -> Result<Vec<StageMetrics>> {
        let n = stages.len();
        if let Some(down) = self.down.as_mut() {
            let doc = serde_json::to_string(plan).expect("plan serializes");
            down.send(&PipeMessage::control(ControlKind::Start, Some(&doc)))?;
            for (s, st) in stages.iter().enumerate().skip(1) {
                down.send(&weights_message(s, st))?;
            }
        }
        let (first, rest) = stages.split_first_mut().expect("at least one stage");
        let m0 = run_stage(StageRun {
            spec: plan.specs()[0].clone(),
            num_stages: n,
            model: first,
            strategy: strategies[0].clone(),
            upstream: None,
            downstream: self.down.as_mut().map(|l| l as &mut dyn Link),
            data: Some(data),
            batches: plan.batches,
            first_batch: plan.first_batch,
            lr,
            timing,
            clock_start_ms: plan.clock_start_ms,
        })?;
        let mut metrics = vec![m0];
        if let Some(down) = self.down.as_mut() {
            let mut versions = vec![0; n];
            for _ in 1..n {
                let m = expect(down, MsgType::Weights)?;
                let s = m.batch_id as usize;
                let target = rest
                    .get_mut(s.wrapping_sub(1))
                    .ok_or_else(|| BenchError::Input(format!("weights for unknown stage {s}")))?;
                apply_weights(target, &m)?;
                versions[s] = m.version as u64;
            }
            let mut others = Vec::new();
            for _ in 1..n {
                let m = expect(down, MsgType::Control)?;
                let doc = m.control_document()?.unwrap_or_default();
                let stage = doc
                    .lines()
                    .next()
                    .and_then(|l| serde_json::from_str::<TraceRecord>(l).ok())
                    .map(|r| r.stage)
                    .ok_or_else(|| BenchError::Input("empty metrics document".into()))?;
                others.push(metrics_from_jsonl(stage, &doc, versions[stage])?);
            }
            others.sort_by_key(|m| m.stage);
            metrics.extend(others);
        }
        Ok(metrics)
    }

    fn finish(&mut self) -> Result<()> {
        if let Some(down) = self.down.as_mut() {
            down.send(&PipeMessage::control(ControlKind::Stop, None))?;
        }
        Ok(())
    }
}

fn train_with(cfg: &RunConfig, arm: Arm, exec: &mut dyn EpochExecutor) -> Result<RunOutcome> {
    cfg.validate(arm)?;
    let enc = cfg.encoder_config();
    let mut full = StageModel::<f32>::build(&enc)?;
    let task = SyntheticTask::new(&enc, cfg.seed);
    let lanes = arm_lanes(cfg, arm)?;
    let t = &cfg.training;
    let initial_eval = evaluate(&full, &task, t.eval_batches, t.eval_batch_size, &AttentionStrategy::Fused)?;
    let data = |i: u64| task.batch(i, t.batch_size);

    let mut clock = 0.0;
    let mut all: Vec<StageMetrics> = Vec::new();
    let mut partitions = Vec::new();
    let mut device_plans = Vec::new();
    let mut last_plan = None;
    for epoch in 0..t.epochs {
        device_plans = lanes
            .iter()
            .enumerate()
            .map(|(d, l)| plan_device(cfg, d, l, cfg.seed.wrapping_add(epoch as u64)))
            .collect::<Result<Vec<_>>>()?;
        let capacities: Vec<f64> = device_plans.iter().map(|p| p.capacity.blocks_per_sec).collect();
        let specs = partition(enc.layers, &capacities)?;
        let decision = PartitionDecision::new(&capacities, &specs);
        log::info!("epoch {epoch}: partition {:?}", decision.ranges);
        let plan = EpochPlan {
            epoch,
            first_batch: (epoch * t.batches_per_epoch) as u64,
            batches: t.batches_per_epoch,
            clock_start_ms: clock,
            ranges: decision.ranges.clone(),
            capacities,
            slots: device_plans.iter().map(|p| p.slots.clone()).collect(),
            makespans_ms: device_plans.iter().map(|p| p.plan.makespan_ms).collect(),
        };
        let strategies: Vec<AttentionStrategy> = plan
            .slots
            .iter()
            .zip(&lanes)
            .map(|(s, l)| slots_strategy(s, Arc::clone(l)))
            .collect();
        let mut stages = full.split(&plan.ranges)?;
        let metrics = exec.run_epoch(&plan, &mut stages, &strategies, &data, t.timing, t.lr)?;
        full = StageModel::merge(stages)?;
        clock = metrics.iter().map(|m| m.clock_ms).fold(clock, f64::max);
        if all.is_empty() {
            all = metrics;
        } else {
            for (acc, m) in all.iter_mut().zip(metrics) {
                acc.records.extend(m.records);
                acc.peak_bytes = acc.peak_bytes.max(m.peak_bytes);
                acc.clock_ms = m.clock_ms;
                acc.final_version = m.final_version;
            }
        }
        partitions.push(decision);
        last_plan = Some(plan);
    }
    exec.finish()?;
    let plan = last_plan.expect("at least one epoch");
    let final_eval = evaluate(&full, &task, t.eval_batches, t.eval_batch_size, &AttentionStrategy::Fused)?;
    let records: Vec<TraceRecord> = all.iter().flat_map(|m| m.records.iter().cloned()).collect();
    let losses: Vec<f64> = records.iter().filter_map(|r| r.loss).collect();
    let memory = plan
        .specs()
        .iter()
        .map(|spec| account_memory(spec, &enc, t.batch_size, plan.ranges.len(), 4))
        .collect();
    let summary = RunSummary {
        arm,
        stages: plan.ranges.len(),
        epochs: t.epochs,
        batches: t.epochs * t.batches_per_epoch,
        parameter_count: full.param_count(),
        ranges: plan.ranges.clone(),
        steady_latency_ms: steady_state_latency_ms(&records).unwrap_or(0.0),
        predicted_latency_ms: plan.predicted_latency_ms(&t.timing),
        initial_train_loss: losses.first().copied().unwrap_or(f64::NAN),
        final_train_loss: losses.last().copied().unwrap_or(f64::NAN),
        initial_eval,
        final_eval,
        tracked_peak_bytes: all.iter().map(|m| m.peak_bytes).collect(),
        memory,
    };
    Ok(RunOutcome {
        summary,
        metrics: all,
        device_plans,
        partitions,
        model: full,
    })
}

/// Trains `arm` with every stage in this process over loopback links.
pub fn train_local(cfg: &RunConfig, arm: Arm) -> Result<RunOutcome> {
    train_with(cfg, arm, &mut LocalExecutor)
}

/// Trains `arm` as the coordinator (stage 0) of a multi-process run.
pub fn train_coordinator(cfg: &RunConfig, arm: Arm) -> Result<RunOutcome> {
    cfg.validate(arm)?;
    let stages = arm.stages(cfg.devices.len());
    let down = if stages > 1 {
        let listener = TcpListener::bind(&cfg.stage_endpoints[0]).map_err(io_err(format!("bind {}", cfg.stage_endpoints[0])))?;
        let mut link = StreamLink::accept_timeout(&listener, cfg.link_timeout())?;
        link.set_timeout(Some(cfg.link_timeout()))?;
        Some(link)
    } else {
        None
    };
    train_with(cfg, arm, &mut RemoteExecutor { down })
}

/// Runs one worker stage until the coordinator sends Stop.
pub fn run_worker(cfg: &RunConfig, arm: Arm, stage: usize) -> Result<()> {
    cfg.validate(arm)?;
    let n = arm.stages(cfg.devices.len());
    if stage == 0 || stage >= n {
        return Err(BenchError::Config(vec![format!("worker stage must be in 1..{n}, got {stage}")]));
    }
    let timeout = cfg.link_timeout();
    let listener = if stage + 1 < n {
        let addr = &cfg.stage_endpoints[stage];
        Some(TcpListener::bind(addr).map_err(io_err(format!("bind {addr}")))?)
    } else {
        None
    };
    let mut up = StreamLink::connect(&cfg.stage_endpoints[stage - 1], timeout)?;
    up.set_timeout(Some(timeout))?;
    let mut down = match &listener {
        Some(l) => {
            let mut link = StreamLink::accept_timeout(l, timeout)?;
            link.set_timeout(Some(timeout))?;
            Some(link)
        }
        None => None,
    };
    let enc = cfg.encoder_config();
    let lanes = Arc::clone(&arm_lanes(cfg, arm)?[stage]);
    loop {
        let ctl = expect(&mut up, MsgType::Control)?;
        if let Some(d) = down.as_mut() {
            d.send(&ctl)?;
        }
        match ctl.control_kind() {
            Some(ControlKind::Stop) => return Ok(()),
            Some(ControlKind::Start) => {}
            other => return Err(BenchError::Input(format!("unexpected control {other:?}"))),
        }
        let doc = ctl.control_document()?.ok_or_else(|| BenchError::Input("start without plan".into()))?;
        let plan: EpochPlan =
            serde_json::from_str(&doc).map_err(|e| BenchError::Input(format!("bad epoch plan: {e}")))?;
        let mut model = StageModel::<f32>::build(&enc)?.split(&plan.ranges)?.swap_remove(stage);
        let own = expect(&mut up, MsgType::Weights)?;
        if own.batch_id as usize != stage {
            return Err(BenchError::Input(format!("stage {stage} got weights for {}", own.batch_id)));
        }
        apply_weights(&mut model, &own)?;
        for _ in stage + 1..n {
            let m = expect(&mut up, MsgType::Weights)?;
            down.as_mut().expect("relay needs a downstream link").send(&m)?;
        }
        let metrics = run_stage(StageRun {
            spec: plan.specs()[stage].clone(),
            num_stages: n,
            model: &mut model,
            strategy: slots_strategy(&plan.slots[stage], Arc::clone(&lanes)),
            upstream: Some(&mut up),
            downstream: down.as_mut().map(|l| l as &mut dyn Link),
            data: None,
            batches: plan.batches,
            first_batch: plan.first_batch,
            lr: cfg.training.lr,
            timing: cfg.training.timing,
            clock_start_ms: plan.clock_start_ms,
        })?;
        up.send(&weights_message(stage, &model))?;
        for _ in stage + 1..n {
            let m = expect(down.as_mut().expect("downstream"), MsgType::Weights)?;
            up.send(&m)?;
        }
        up.send(&PipeMessage::control(ControlKind::Metrics, Some(&metrics.to_jsonl())))?;
        for _ in stage + 1..n {
            let m = expect(down.as_mut().expect("downstream"), MsgType::Control)?;
            up.send(&m)?;
        }
    }
}

/// Writes metrics, plans, partitions, memory, summary and checkpoint.
pub fn write_outputs(dir: &Path, out: &RunOutcome) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(format!("create {}", dir.display())))?;
    let write = |name: &str, text: String| {
        let p = dir.join(name);
        std::fs::write(&p, text).map_err(io_err(format!("write {}", p.display())))
    };
    write("metrics.jsonl", out.metrics.iter().map(StageMetrics::to_jsonl).collect())?;
    for (d, p) in out.device_plans.iter().enumerate() {
        write(&format!("profile_device{d}.json"), p.profile.to_json())?;
        write(&format!("plan_device{d}.json"), p.plan.to_json())?;
    }
    write(
        "partitions.jsonl",
        out.partitions
            .iter()
            .map(|p| serde_json::to_string(p).expect("partition serializes") + "\n")
            .collect(),
    )?;
    write("summary.json", serde_json::to_string_pretty(&out.summary).expect("summary serializes"))?;
    out.model.save(&dir.join("model.ckpt"))?;
    Ok(())
}

/// Reads a metrics JSONL file.
pub fn load_metrics(path: &Path) -> Result<Vec<TraceRecord>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| BenchError::Input(format!("cannot read metrics {}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| BenchError::Input(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub run: String,
    pub stages: usize,
    pub latency_ms: f64,
    /// Baseline latency over this run's latency.
    pub speedup: f64,
    /// Largest per-stage peak.
    pub peak_bytes: usize,
    /// This run's peak over the baseline's.
    pub memory_ratio: f64,
}

/// Compares runs against the first one.
pub fn report(paths: &[PathBuf]) -> Result<Vec<ReportRow>> {
    if paths.is_empty() {
        return Err(BenchError::Input("report needs at least one metrics file".into()));
    }
    let mut raw = Vec::with_capacity(paths.len());
    for p in paths {
        let records = load_metrics(p)?;
        let latency = steady_state_latency_ms(&records)
            .ok_or_else(|| BenchError::Input(format!("{}: no stage-0 backward records", p.display())))?;
        let stages = records.iter().map(|r| r.stage + 1).max().unwrap_or(0);
        let peak = records.iter().map(|r| r.peak_bytes).max().unwrap_or(0);
        raw.push((p.display().to_string(), stages, latency, peak));
    }
    let (base_lat, base_peak) = (raw[0].2, raw[0].3);
    Ok(raw
        .into_iter()
        .map(|(run, stages, latency_ms, peak_bytes)| ReportRow {
            run,
            stages,
            latency_ms,
            speedup: base_lat / latency_ms,
            peak_bytes,
            memory_ratio: peak_bytes as f64 / base_peak as f64,
        })
        .collect())
}

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("in-memory csv write");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv is utf-8")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lanes::{LaneKind, ModeCost};

    fn sim(name: &str, base: f64, per: f64) -> LaneDescriptor {
        LaneDescriptor::new(name, LaneKind::simulated(ModeCost::affine(base, per), ModeCost::affine(base, per)))
    }

    fn small_config(devices: usize) -> RunConfig {
        RunConfig {
            role: Role::AllInOne,
            stage_endpoints: vec![],
            devices: (0..devices)
                .map(|d| DeviceConfig {
                    name: format!("dev{d}"),
                    lanes: vec![sim("cpu", 0.0, 1.0), sim("gpu", 3.0, 0.5)],
                })
                .collect(),
            encoder: EncoderConfig {
                layers: 3,
                heads: 4,
                d_model: 8,
                d_ff: 12,
                vocab: 16,
                seq_len: 4,
                classes: 4,
                seed: 0,
                scale_scores: true,
            },
            training: TrainingConfig {
                batches_per_epoch: 6,
                batch_size: 4,
                eval_batches: 2,
                eval_batch_size: 8,
                ..TrainingConfig::default()
            },
            scheduler: SchedulerConfig::default(),
            profile: ProfileConfig {
                repetitions: 3,
                warmup: 1,
            },
            output_dir: PathBuf::from("out"),
            seed: 5,
        }
    }

    #[test]
    fn arm_names_round_trip() {
        for a in Arm::ALL {
            assert_eq!(a.name().parse::<Arm>().unwrap(), a);
            assert_eq!(serde_json::to_string(&a).unwrap(), format!("\"{}\"", a.name()));
        }
        assert!("both".parse::<Arm>().is_err());
    }

    #[test]
    fn validation_lists_every_violation() {
        let mut cfg = small_config(3);
        cfg.devices[1].lanes.clear();
        cfg.training.lr = 0.0;
        cfg.profile.repetitions = 4;
        cfg.encoder.layers = 2;
        let v = cfg.violations(Arm::Confidant);
        assert_eq!(v.len(), 4, "{v:?}");
        assert!(small_config(3).violations(Arm::Confidant).is_empty());
        let mut multi = small_config(2);
        multi.role = Role::Coordinator;
        multi.stage_endpoints = vec!["127.0.0.1:1".into(), "nope".into()];
        assert_eq!(multi.violations(Arm::Pipeline).len(), 1);
        assert!(multi.violations(Arm::Single).is_empty());
    }

    #[test]
    fn unknown_config_fields_rejected() {
        let err = RunConfig::from_json(r#"{"devices": [], "sed": 1}"#).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn local_arms_run_and_are_reproducible() {
        let cfg = small_config(3);
        let a = train_local(&cfg, Arm::Confidant).unwrap();
        let b = train_local(&cfg, Arm::Confidant).unwrap();
        assert_eq!(a.summary.stages, 3);
        assert_eq!(a.metrics.len(), 3);
        let ja: String = a.metrics.iter().map(StageMetrics::to_jsonl).collect();
        let jb: String = b.metrics.iter().map(StageMetrics::to_jsonl).collect();
        assert_eq!(ja, jb);
        let single = train_local(&cfg, Arm::Single).unwrap();
        assert_eq!(single.summary.initial_train_loss, a.summary.initial_train_loss);
    }

    #[test]
    fn report_single_file_is_all_ones_and_missing_file_is_input_error() {
        let dir = tempfile::tempdir().unwrap();
        let out = train_local(&small_config(2), Arm::Pipeline).unwrap();
        write_outputs(dir.path(), &out).unwrap();
        let rows = report(&[dir.path().join("metrics.jsonl")]).unwrap();
        assert_eq!(rows[0].speedup, 1.0);
        assert_eq!(rows[0].memory_ratio, 1.0);
        assert!(report_csv(&rows).starts_with("run,stages,latency_ms,speedup,peak_bytes,memory_ratio\n"));
        let err = report(&[dir.path().join("absent.jsonl")]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn multi_process_matches_all_in_one() {
        let mut cfg = small_config(3);
        let ports: Vec<String> = (0..3)
            .map(|_| {
                let l = TcpListener::bind("127.0.0.1:0").unwrap();
                l.local_addr().unwrap().to_string()
            })
            .collect();
        cfg.stage_endpoints = ports;
        cfg.role = Role::Coordinator;
        let local = train_local(&cfg, Arm::Confidant).unwrap();
        let workers: Vec<_> = (1..3)
            .map(|s| {
                let c = RunConfig {
                    role: Role::Worker,
                    ..cfg.clone()
                };
                std::thread::spawn(move || run_worker(&c, Arm::Confidant, s))
            })
            .collect();
        let remote = train_coordinator(&cfg, Arm::Confidant).unwrap();
        for w in workers {
            w.join().unwrap().unwrap();
        }
        for (p, q) in local.model.params.iter().zip(&remote.model.params) {
            assert_eq!(p.value.data(), q.value.data(), "{}", p.name);
        }
        assert_eq!(local.summary.steady_latency_ms, remote.summary.steady_latency_ms);
        assert_eq!(remote.metrics.len(), 3);
    }
}
