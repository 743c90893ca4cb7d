//! Execution lanes and backend profiling.
//!
//! A lane is a serial worker thread standing in for one compute backend.
//! Real lanes report measured wall time (divided by a speed factor);
//! simulated lanes compute the same math but report time from a cost model,
//! which keeps timing-dependent behavior deterministic.

use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, unbounded, Receiver, Sender};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{AttentionLayer, HeadMode, Segment};
use crate::tensor::{Scalar, Tensor};
use crate::fixtures::{random_layer, random_tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LaneError {
    #[error("duplicate lane id {0}")]
    DuplicateLaneId(usize),
    #[error("lane set is empty")]
    EmptyLaneSet,
    #[error("lane {id} is misconfigured: {reason}")]
    InvalidLane { id: usize, reason: String },
    #[error("lane {lane} failed: {reason}")]
    LaneFailure { lane: usize, reason: String },
    #[error("every lane failed during profiling")]
    AllLanesFailed,
    #[error("invalid profiling request: {0}")]
    InvalidRequest(String),
}

pub type Result<T> = std::result::Result<T, LaneError>;

/// Cost of computing `k` heads in one mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModeCost {
    Affine { base_ms: f64, per_head_ms: f64 },
    Table { table_ms: Vec<f64> },
}

impl ModeCost {
    pub fn affine(base_ms: f64, per_head_ms: f64) -> Self {
        ModeCost::Affine { base_ms, per_head_ms }
    }

    pub fn at(&self, k: usize) -> Option<f64> {
        match self {
            ModeCost::Affine { base_ms, per_head_ms } => Some(base_ms + per_head_ms * k as f64),
            ModeCost::Table { table_ms } => k.checked_sub(1).and_then(|i| table_ms.get(i)).copied(),
        }
    }

    fn validate(&self) -> std::result::Result<(), String> {
        match self {
            ModeCost::Affine { base_ms, per_head_ms } => {
                if !(base_ms.is_finite() && per_head_ms.is_finite()) || *base_ms < 0.0 || *per_head_ms < 0.0 {
                    return Err(format!("affine cost ({base_ms}, {per_head_ms}) must be finite and non-negative"));
                }
                if base_ms + per_head_ms <= 0.0 {
                    return Err("cost for one head must be positive".into());
                }
            }
            ModeCost::Table { table_ms } => {
                if table_ms.is_empty() {
                    return Err("empty cost table".into());
                }
                if table_ms.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                    return Err("cost table entries must be positive".into());
                }
                if table_ms.windows(2).any(|w| w[1] < w[0]) {
                    return Err("cost table must be non-decreasing".into());
                }
            }
        }
        Ok(())
    }
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LaneKind {
    Real {
        /// Reported time is wall time divided by this factor.
        #[serde(default = "one")]
        speed: f64,
        /// Extra sleep per computed head, for calibrated tests.
        #[serde(default)]
        sleep_per_head_ms: f64,
    },
    Simulated {
        fused: ModeCost,
        per_head: ModeCost,
        #[serde(default = "one")]
        contention: f64,
        /// Fault injection: every run on this lane fails.
        #[serde(default)]
        fail: bool,
    },
}

impl LaneKind {
    pub fn simulated(fused: ModeCost, per_head: ModeCost) -> Self {
        LaneKind::Simulated {
            fused,
            per_head,
            contention: 1.0,
            fail: false,
        }
    }

    pub fn real(speed: f64) -> Self {
        LaneKind::Real {
            speed,
            sleep_per_head_ms: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaneDescriptor {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<usize>,
    pub name: String,
    #[serde(flatten)]
    pub kind: LaneKind,
}

impl LaneDescriptor {
    pub fn new(name: impl Into<String>, kind: LaneKind) -> Self {
        Self {
            id: None,
            name: name.into(),
            kind,
        }
    }
}

type Job = Box<dyn FnOnce() + Send>;

/// One execution lane backed by a dedicated worker thread.
pub struct Lane {
    id: usize,
    name: String,
    kind: LaneKind,
    jobs: Option<Sender<Job>>,
    worker: Mutex<Option<JoinHandle<()>>>,
}

impl std::fmt::Debug for Lane {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Lane").field("id", &self.id).field("name", &self.name).finish()
    }
}

impl Drop for Lane {
    fn drop(&mut self) {
        self.jobs.take();
        if let Some(h) = self.worker.lock().ok().and_then(|mut w| w.take()) {
            let _ = h.join();
        }
    }
}

/// Output of one segment run and the time the lane reports for it.
#[derive(Debug, Clone)]
pub struct SegmentRun<T: Scalar> {
    pub output: Tensor<T>,
    pub elapsed_ms: f64,
}

type SegmentReply<T> = (std::result::Result<Tensor<T>, String>, Duration);

/// A segment submitted to a lane whose result has not been collected yet.
pub struct PendingSegment<T: Scalar> {
    lane: usize,
    reported_ms: Option<f64>,
    speed: f64,
    rx: Receiver<SegmentReply<T>>,
}

impl<T: Scalar> PendingSegment<T> {
    pub fn wait(self) -> Result<SegmentRun<T>> {
        let (out, wall) = self.rx.recv().map_err(|_| LaneError::LaneFailure {
            lane: self.lane,
            reason: "worker thread exited".into(),
        })?;
        let output = out.map_err(|reason| LaneError::LaneFailure {
            lane: self.lane,
            reason,
        })?;
        let elapsed_ms = self
            .reported_ms
            .unwrap_or_else(|| wall.as_secs_f64() * 1e3 / self.speed);
        Ok(SegmentRun { output, elapsed_ms })
    }
}

impl Lane {
    fn spawn(id: usize, name: String, kind: LaneKind) -> Self {
        let (tx, rx) = unbounded::<Job>();
        let handle = std::thread::Builder::new()
            .name(format!("lane-{id}-{name}"))
            .spawn(move || {
                for job in rx {
                    job();
                }
            })
            .expect("spawn lane worker");
        Self {
            id,
            name,
            kind,
            jobs: Some(tx),
            worker: Mutex::new(Some(handle)),
        }
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> &LaneKind {
        &self.kind
    }

    pub fn is_simulated(&self) -> bool {
        matches!(self.kind, LaneKind::Simulated { .. })
    }

    /// Model-clock cost for simulated lanes; `None` for real lanes.
    pub fn modeled_ms(&self, k: usize, mode: HeadMode) -> Option<f64> {
        match &self.kind {
            LaneKind::Simulated {
                fused,
                per_head,
                contention,
                ..
            } => {
                let c = match mode {
                    HeadMode::Fused => fused,
                    HeadMode::PerHead => per_head,
                };
                c.at(k).map(|ms| ms * contention)
            }
            LaneKind::Real { .. } => None,
        }
    }

    /// Queues a segment on this lane's worker.
    pub fn submit_segment<T: Scalar>(
        &self,
        layer: AttentionLayer<T>,
        x: Tensor<T>,
        seq_len: usize,
        segment: Segment,
    ) -> Result<PendingSegment<T>> {
        let k = segment.heads.len();
        let (reported_ms, speed, sleep_ms) = match &self.kind {
            LaneKind::Simulated { fail: true, .. } => {
                return Err(LaneError::LaneFailure {
                    lane: self.id,
                    reason: "injected failure".into(),
                })
            }
            LaneKind::Simulated { .. } => {
                let ms = self.modeled_ms(k, segment.mode).ok_or_else(|| LaneError::LaneFailure {
                    lane: self.id,
                    reason: format!("cost model has no entry for {k} heads"),
                })?;
                (Some(ms), 1.0, 0.0)
            }
            LaneKind::Real {
                speed,
                sleep_per_head_ms,
            } => (None, *speed, sleep_per_head_ms * k as f64),
        };
        let (tx, rx) = bounded(1);
        let job: Job = Box::new(move || {
            let start = Instant::now();
            if sleep_ms > 0.0 {
                std::thread::sleep(Duration::from_secs_f64(sleep_ms / 1e3));
            }
            let out = layer
                .segment_forward(&x, seq_len, segment.heads.clone(), segment.mode)
                .map_err(|e| e.to_string());
            let _ = tx.send((out, start.elapsed()));
        });
        let sender = self.jobs.as_ref().ok_or_else(|| LaneError::LaneFailure {
            lane: self.id,
            reason: "lane shut down".into(),
        })?;
        sender.send(job).map_err(|_| LaneError::LaneFailure {
            lane: self.id,
            reason: "worker thread exited".into(),
        })?;
        Ok(PendingSegment {
            lane: self.id,
            reported_ms,
            speed,
            rx,
        })
    }
}

/// Executes one segment on `lane` and waits for it.
pub fn run_segment<T: Scalar>(
    lane: &Lane,
    layer: &AttentionLayer<T>,
    x: &Tensor<T>,
    seq_len: usize,
    segment: &Segment,
) -> Result<SegmentRun<T>> {
    lane.submit_segment(layer.clone(), x.clone(), seq_len, segment.clone())?
        .wait()
}

/// Ordered collection of lanes with unique ids.
#[derive(Debug, Clone)]
pub struct LaneSet {
    lanes: Vec<Arc<Lane>>,
}

impl LaneSet {
    pub fn get(&self, id: usize) -> Option<&Lane> {
        self.lanes.iter().find(|l| l.id == id).map(|l| l.as_ref())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Lane> {
        self.lanes.iter().map(|l| l.as_ref())
    }

    pub fn len(&self) -> usize {
        self.lanes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lanes.is_empty()
    }

    pub fn ids(&self) -> Vec<usize> {
        self.lanes.iter().map(|l| l.id).collect()
    }

    /// Shares the listed lanes (and their workers) in a new set.
    pub fn subset(&self, ids: &[usize]) -> Result<LaneSet> {
        let lanes = ids
            .iter()
            .map(|&id| {
                self.lanes
                    .iter()
                    .find(|l| l.id == id)
                    .cloned()
                    .ok_or(LaneError::InvalidLane {
                        id,
                        reason: "not in lane set".into(),
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        if lanes.is_empty() {
            return Err(LaneError::EmptyLaneSet);
        }
        Ok(LaneSet { lanes })
    }
}

fn check_descriptor(id: usize, d: &LaneDescriptor) -> Result<()> {
    match &d.kind {
        LaneKind::Simulated {
            fused,
            per_head,
            contention,
            ..
        } => {
            for c in [fused, per_head] {
                c.validate().map_err(|reason| LaneError::InvalidLane { id, reason })?;
            }
            if !(contention.is_finite() && *contention > 0.0) {
                return Err(LaneError::InvalidLane {
                    id,
                    reason: format!("contention {contention} must be positive"),
                });
            }
        }
        LaneKind::Real {
            speed,
            sleep_per_head_ms,
        } => {
            if !(speed.is_finite() && *speed > 0.0) || !(*sleep_per_head_ms >= 0.0) {
                return Err(LaneError::InvalidLane {
                    id,
                    reason: "speed must be positive and sleep non-negative".into(),
                });
            }
        }
    }
    Ok(())
}

/// Every problem with a descriptor list, without starting any lane.
pub fn descriptor_violations(config: &[LaneDescriptor]) -> Vec<LaneError> {
    if config.is_empty() {
        return vec![LaneError::EmptyLaneSet];
    }
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for (pos, d) in config.iter().enumerate() {
        let id = d.id.unwrap_or(pos);
        if !seen.insert(id) {
            out.push(LaneError::DuplicateLaneId(id));
        }
        if let Err(e) = check_descriptor(id, d) {
            out.push(e);
        }
    }
    out
}

/// Builds a lane set from descriptors. Missing ids are assigned by position.
pub fn discover_lanes(config: &[LaneDescriptor]) -> Result<LaneSet> {
    if let Some(e) = descriptor_violations(config).into_iter().next() {
        return Err(e);
    }
    let mut lanes = Vec::with_capacity(config.len());
    for (pos, d) in config.iter().enumerate() {
        let id = d.id.unwrap_or(pos);
        lanes.push(Arc::new(Lane::spawn(id, d.name.clone(), d.kind.clone())));
    }
    Ok(LaneSet { lanes })
}

/// Shape of the attention layer used while profiling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerDims {
    pub heads: usize,
    pub d_model: usize,
    pub seq_len: usize,
    pub batch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileOptions {
    pub repetitions: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for ProfileOptions {
    fn default() -> Self {
        Self {
            repetitions: 5,
            warmup: 2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaneInfo {
    pub id: usize,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileEntry {
    pub lane: usize,
    pub k: usize,
    /// Cleaned time: faster mode's median, repaired to be non-decreasing in k.
    pub ms: f64,
    pub mode: HeadMode,
    /// Faster mode's median before monotone repair.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fused_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_head_ms: Option<f64>,
}

/// Measured time per (lane, head count) and the mode that achieved it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileTable {
    pub lanes: Vec<LaneInfo>,
    #[serde(rename = "K")]
    pub heads: usize,
    #[serde(rename = "R")]
    pub repetitions: usize,
    #[serde(default)]
    pub warmup: usize,
    pub entries: Vec<ProfileEntry>,
}

impl ProfileTable {
    /// Table from explicit times `times[j][k-1]`; lane ids are `0..M`.
    pub fn from_times(times: &[Vec<f64>]) -> Self {
        let heads = times.first().map_or(0, Vec::len);
        let lanes = (0..times.len())
            .map(|id| LaneInfo {
                id,
                name: format!("lane{id}"),
            })
            .collect();
        let entries = times
            .iter()
            .enumerate()
            .flat_map(|(lane, row)| {
                row.iter().enumerate().map(move |(i, &ms)| ProfileEntry {
                    lane,
                    k: i + 1,
                    ms,
                    mode: HeadMode::Fused,
                    raw_ms: None,
                    fused_ms: None,
                    per_head_ms: None,
                })
            })
            .collect();
        Self {
            lanes,
            heads,
            repetitions: 1,
            warmup: 0,
            entries,
        }
    }

    pub fn entry(&self, lane: usize, k: usize) -> Option<&ProfileEntry> {
        self.entries.iter().find(|e| e.lane == lane && e.k == k)
    }

    pub fn time(&self, lane: usize, k: usize) -> Option<f64> {
        self.entry(lane, k).map(|e| e.ms)
    }

    pub fn mode(&self, lane: usize, k: usize) -> Option<HeadMode> {
        self.entry(lane, k).map(|e| e.mode)
    }

    pub fn lane_ids(&self) -> Vec<usize> {
        self.lanes.iter().map(|l| l.id).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("profile table serializes")
    }

    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        serde_json::from_str(s)
    }
}

/// Running-max repair so times never decrease with more heads.
pub fn isotonic_repair(times: &mut [f64]) {
    for i in 1..times.len() {
        if times[i] < times[i - 1] {
            times[i] = times[i - 1];
        }
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

struct LaneProfile {
    rows: Vec<(f64, f64, HeadMode, f64)>,
}

fn profile_lane(lane: &Lane, dims: LayerDims, opts: ProfileOptions) -> Result<LaneProfile> {
    let layer = random_layer::<f32>(dims.heads, dims.d_model, opts.seed);
    let x = random_tensor::<f32>(&[dims.batch * dims.seq_len, dims.d_model], opts.seed ^ 0x5eed, 1.0);
    let mut rows = Vec::with_capacity(dims.heads);
    for k in 1..=dims.heads {
        let mut medians = [0.0; 2];
        for (slot, mode) in HeadMode::ALL.into_iter().enumerate() {
            let seg = Segment {
                lane_id: lane.id,
                heads: 0..k,
                mode,
            };
            for _ in 0..opts.warmup {
                run_segment(lane, &layer, &x, dims.seq_len, &seg)?;
            }
            let times = (0..opts.repetitions)
                .map(|_| run_segment(lane, &layer, &x, dims.seq_len, &seg).map(|r| r.elapsed_ms))
                .collect::<Result<Vec<_>>>()?;
            medians[slot] = median(times);
        }
        let (best, mode) = if medians[0] <= medians[1] {
            (medians[0], HeadMode::Fused)
        } else {
            (medians[1], HeadMode::PerHead)
        };
        rows.push((medians[0], medians[1], mode, best));
    }
    Ok(LaneProfile { rows })
}

/// Times every head count on every lane in both modes, keeping the faster
/// mode's median. Lanes are profiled in parallel; a failing lane is dropped
/// from the table with a warning.
pub fn profile(lanes: &LaneSet, dims: LayerDims, opts: ProfileOptions) -> Result<ProfileTable> {
    if dims.heads == 0 || !dims.d_model.is_multiple_of(dims.heads) || dims.seq_len == 0 || dims.batch == 0 {
        return Err(LaneError::InvalidRequest(format!("bad layer dims {dims:?}")));
    }
    if opts.repetitions < 3 || opts.repetitions.is_multiple_of(2) {
        return Err(LaneError::InvalidRequest(format!(
            "repetitions must be odd and >= 3, got {}",
            opts.repetitions
        )));
    }
    let results: Vec<Result<LaneProfile>> = std::thread::scope(|scope| {
        let handles: Vec<_> = lanes
            .iter()
            .map(|lane| scope.spawn(move || profile_lane(lane, dims, opts)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or(Err(LaneError::AllLanesFailed)))
            .collect()
    });

    let mut infos = Vec::new();
    let mut entries = Vec::new();
    for (lane, result) in lanes.iter().zip(results) {
        let prof = match result {
            Ok(p) => p,
            Err(e) => {
                log::warn!("excluding lane {} ({}) from profile: {e}", lane.id(), lane.name());
                continue;
            }
        };
        infos.push(LaneInfo {
            id: lane.id(),
            name: lane.name().to_string(),
        });
        let mut cleaned: Vec<f64> = prof.rows.iter().map(|r| r.3).collect();
        isotonic_repair(&mut cleaned);
        for (i, (&(fused, per_head, mode, raw), ms)) in prof.rows.iter().zip(cleaned).enumerate() {
            entries.push(ProfileEntry {
                lane: lane.id(),
                k: i + 1,
                ms,
                mode,
                raw_ms: Some(raw),
                fused_ms: Some(fused),
                per_head_ms: Some(per_head),
            });
        }
    }
    if infos.is_empty() {
        return Err(LaneError::AllLanesFailed);
    }
    Ok(ProfileTable {
        lanes: infos,
        heads: dims.heads,
        repetitions: opts.repetitions,
        warmup: opts.warmup,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::per_head_forward;

    fn sim(name: &str, fused: ModeCost, per_head: ModeCost) -> LaneDescriptor {
        LaneDescriptor::new(name, LaneKind::simulated(fused, per_head))
    }

    fn small_dims(heads: usize) -> LayerDims {
        LayerDims {
            heads,
            d_model: heads * 2,
            seq_len: 3,
            batch: 1,
        }
    }

    #[test]
    fn discovers_lanes_in_order() {
        let one = discover_lanes(&[LaneDescriptor::new("cpu", LaneKind::real(1.0))]).unwrap();
        assert_eq!(one.len(), 1);
        let c = ModeCost::affine(1.0, 1.0);
        let three = discover_lanes(&[
            sim("cpu", c.clone(), c.clone()),
            sim("gpu_metal", c.clone(), c.clone()),
            sim("gpu_opencl", c.clone(), c.clone()),
        ])
        .unwrap();
        assert_eq!(three.ids(), vec![0, 1, 2]);
        assert_eq!(three.get(1).unwrap().name(), "gpu_metal");
    }

    #[test]
    fn duplicate_and_empty_rejected() {
        let c = ModeCost::affine(1.0, 1.0);
        let mut a = sim("a", c.clone(), c.clone());
        a.id = Some(3);
        let mut b = sim("b", c.clone(), c);
        b.id = Some(3);
        assert_eq!(discover_lanes(&[a, b]).unwrap_err(), LaneError::DuplicateLaneId(3));
        assert_eq!(discover_lanes(&[]).unwrap_err(), LaneError::EmptyLaneSet);
    }

    #[test]
    fn non_monotone_cost_table_rejected() {
        let bad = sim(
            "x",
            ModeCost::Table { table_ms: vec![3.0, 2.0] },
            ModeCost::affine(1.0, 1.0),
        );
        assert!(matches!(discover_lanes(&[bad]), Err(LaneError::InvalidLane { .. })));
    }

    #[test]
    fn simulated_segment_reports_model_time_and_real_math() {
        let lanes = discover_lanes(&[sim("cpu", ModeCost::affine(2.0, 1.0), ModeCost::affine(0.0, 3.0))]).unwrap();
        let layer = random_layer::<f64>(4, 8, 1);
        let x = random_tensor::<f64>(&[6, 8], 2, 1.0);
        let seg = Segment {
            lane_id: 0,
            heads: 0..4,
            mode: HeadMode::Fused,
        };
        let run = run_segment(lanes.get(0).unwrap(), &layer, &x, 3, &seg).unwrap();
        assert_eq!(run.elapsed_ms, 6.0);
        let reference = per_head_forward(&layer, &x, 3).unwrap();
        assert!(run.output.max_abs_diff(&reference).unwrap() < 1e-12);
    }

    #[test]
    fn segment_output_matches_restricted_heads() {
        let lanes = discover_lanes(&[LaneDescriptor::new("cpu", LaneKind::real(1.0))]).unwrap();
        let layer = random_layer::<f64>(4, 8, 5);
        let x = random_tensor::<f64>(&[4, 8], 6, 1.0);
        let seg = Segment {
            lane_id: 0,
            heads: 1..3,
            mode: HeadMode::PerHead,
        };
        let run = run_segment(lanes.get(0).unwrap(), &layer, &x, 2, &seg).unwrap();
        assert!(run.elapsed_ms > 0.0);
        let full = per_head_forward(&layer, &x, 2).unwrap();
        // heads 1..3 are columns 2..6
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(run.output.data()[r * 4 + c], full.data()[r * 8 + 2 + c]);
            }
        }
    }

    #[test]
    fn profile_picks_faster_mode() {
        let lanes = discover_lanes(&[sim("l", ModeCost::affine(2.0, 1.0), ModeCost::affine(0.0, 3.0))]).unwrap();
        let t = profile(&lanes, small_dims(4), ProfileOptions::default()).unwrap();
        // k=1: min(3, 3) = 3 (tie goes to fused); k>=2: 2 + k fused
        assert_eq!(t.time(0, 1), Some(3.0));
        for k in 2..=4 {
            assert_eq!(t.time(0, k), Some(2.0 + k as f64));
            assert_eq!(t.mode(0, k), Some(HeadMode::Fused));
        }
        assert_eq!(t.entries.len(), 4);
    }

    #[test]
    fn profile_single_head_single_lane() {
        let lanes = discover_lanes(&[sim("l", ModeCost::affine(1.0, 1.0), ModeCost::affine(0.5, 1.0))]).unwrap();
        let t = profile(&lanes, small_dims(1), ProfileOptions::default()).unwrap();
        assert_eq!(t.entries.len(), 1);
        let e = &t.entries[0];
        assert_eq!((e.fused_ms, e.per_head_ms), (Some(2.0), Some(1.5)));
        assert_eq!(e.mode, HeadMode::PerHead);
    }

    #[test]
    fn isotonic_repair_example() {
        let mut v = vec![5.0, 4.0, 6.0];
        isotonic_repair(&mut v);
        assert_eq!(v, vec![5.0, 5.0, 6.0]);
    }

    #[test]
    fn simulated_profiles_are_deterministic() {
        let lanes = discover_lanes(&[
            sim("a", ModeCost::affine(1.0, 0.5), ModeCost::affine(0.0, 2.0)),
            sim("b", ModeCost::affine(0.0, 1.0), ModeCost::affine(0.0, 1.0)),
        ])
        .unwrap();
        let first = profile(&lanes, small_dims(3), ProfileOptions::default()).unwrap();
        let second = profile(&lanes, small_dims(3), ProfileOptions::default()).unwrap();
        assert_eq!(first, second);
        assert_eq!(ProfileTable::from_json(&first.to_json()).unwrap(), first);
    }

    #[test]
    fn failing_lane_is_excluded() {
        let c = ModeCost::affine(1.0, 1.0);
        let bad = LaneDescriptor::new(
            "bad",
            LaneKind::Simulated {
                fused: c.clone(),
                per_head: c.clone(),
                contention: 1.0,
                fail: true,
            },
        );
        let lanes = discover_lanes(&[sim("ok", c.clone(), c.clone()), bad.clone()]).unwrap();
        let t = profile(&lanes, small_dims(2), ProfileOptions::default()).unwrap();
        assert_eq!(t.lane_ids(), vec![0]);
        let only_bad = discover_lanes(&[bad]).unwrap();
        assert_eq!(
            profile(&only_bad, small_dims(2), ProfileOptions::default()).unwrap_err(),
            LaneError::AllLanesFailed
        );
    }

    #[test]
    fn profile_rejects_even_repetitions() {
        let c = ModeCost::affine(1.0, 1.0);
        let lanes = discover_lanes(&[sim("l", c.clone(), c)]).unwrap();
        let opts = ProfileOptions {
            repetitions: 4,
            ..Default::default()
        };
        assert!(matches!(profile(&lanes, small_dims(2), opts), Err(LaneError::InvalidRequest(_))));
    }

    #[test]
    fn descriptor_json_shape() {
        let d: LaneDescriptor = serde_json::from_str(
            r#"{"name":"gpu","kind":"simulated","fused":{"base_ms":3.0,"per_head_ms":0.5},"per_head":{"table_ms":[3.5,7.0]}}"#,
        )
        .unwrap();
        assert_eq!(d.kind, LaneKind::simulated(ModeCost::affine(3.0, 0.5), ModeCost::Table { table_ms: vec![3.5, 7.0] }));
        let r: LaneDescriptor = serde_json::from_str(r#"{"id":4,"name":"cpu","kind":"real"}"#).unwrap();
        assert_eq!(r.kind, LaneKind::real(1.0));
    }
}
