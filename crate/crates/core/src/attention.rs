//! Multi-head self-attention with three interchangeable execution strategies.
//!
//! * **fused**: the per-head projection matrices are concatenated so Q, K and V
//!   come out of one matmul each, followed by a single block-diagonal attention
//!   call covering every head.
//! * **per-head**: every head is projected and attended independently, then
//!   the outputs are concatenated.
//! * **split**: contiguous head ranges are dispatched to execution lanes that
//!   run concurrently; each lane uses the mode recorded in the plan.
//!
//! Outputs are always concatenated in head-index order. There is no output
//! projection after the concatenation.
//!
//! [`AttentionStrategy::run`] evaluates values with the chosen strategy but
//! records the layer as a single graph node whose backward is the same for
//! every strategy, so training trajectories do not depend on the strategy.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lanes::{LaneError, LaneSet};
use crate::tensor::{attention_core, backward_with, concat_cols, matmul, Scalar, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum AttentionError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid attention layer: {0}")]
    InvalidLayer(String),
    #[error("invalid execution plan: {0}")]
    InvalidPlan(String),
    #[error("plan references unknown lane {0}")]
    UnknownLane(usize),
    #[error(transparent)]
    Lane(#[from] LaneError),
}

pub type Result<T> = std::result::Result<T, AttentionError>;

/// How a lane computes a group of heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    Fused,
    PerHead,
}

impl HeadMode {
    pub const ALL: [HeadMode; 2] = [HeadMode::Fused, HeadMode::PerHead];
}

#[derive(Debug, Clone)]
pub struct HeadWeights<T: Scalar> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub head_index: usize,
}

#[derive(Debug, Clone)]
pub struct AttentionLayer<T: Scalar> {
    heads: Vec<HeadWeights<T>>,
    d_model: usize,
    d_head: usize,
    scale_scores: bool,
}

impl<T: Scalar> AttentionLayer<T> {
    pub fn new(heads: Vec<HeadWeights<T>>, scale_scores: bool) -> Result<Self> {
        let first = heads
            .first()
            .ok_or_else(|| AttentionError::InvalidLayer("no heads".into()))?;
        let (d_model, d_head) = first.wq.dims2("attention layer")?;
        for (i, h) in heads.iter().enumerate() {
            if h.head_index != i {
                return Err(AttentionError::InvalidLayer(format!(
                    "head at position {i} has index {}",
                    h.head_index
                )));
            }
            for w in [&h.wq, &h.wk, &h.wv] {
                if w.shape() != [d_model, d_head] {
                    return Err(AttentionError::InvalidLayer(format!(
                        "head {i} weight shape {:?}, expected [{d_model}, {d_head}]",
                        w.shape()
                    )));
                }
            }
        }
        if heads.len() * d_head != d_model {
            return Err(AttentionError::InvalidLayer(format!(
                "{} heads × d_head {d_head} != d_model {d_model}",
                heads.len()
            )));
        }
        Ok(Self {
            heads,
            d_model,
            d_head,
            scale_scores,
        })
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn d_head(&self) -> usize {
        self.d_head
    }

    pub fn scale_scores(&self) -> bool {
        self.scale_scores
    }

    pub fn heads(&self) -> &[HeadWeights<T>] {
        &self.heads
    }

    /// Same weights with no gradient tracking, for value-only evaluation.
    fn detached(&self) -> Self {
        Self {
            heads: self
                .heads
                .iter()
                .map(|h| HeadWeights {
                    wq: h.wq.detach(),
                    wk: h.wk.detach(),
                    wv: h.wv.detach(),
                    head_index: h.head_index,
                })
                .collect(),
            ..self.clone()
        }
    }

    /// Records precomputed layer output `values` as one node over `x` and
    /// every head weight. Its backward re-derives each head on its own and
    /// sums the input gradient in head order.
    fn attach(&self, x: &Tensor<T>, seq_len: usize, values: Vec<T>) -> Tensor<T> {
        let mut parents = vec![x.clone()];
        for h in &self.heads {
            parents.extend([h.wq.clone(), h.wk.clone(), h.wv.clone()]);
        }
        let (heads, d_head, scaled) = (self.heads.len(), self.d_head, self.scale_scores);
        let rows = x.rows();
        Tensor::record(
            vec![rows, heads * d_head],
            values,
            parents,
            0,
            Box::new(move |g, p| {
                let copy = |t: &Tensor<T>| {
                    let data = t.data().to_vec();
                    let shape = t.shape().to_vec();
                    if t.requires_grad() {
                        Tensor::param(shape, data)
                    } else {
                        Tensor::new(shape, data)
                    }
                    .expect("shape taken from a tensor")
                };
                let x = copy(&p[0]);
                let mut dx = p[0].requires_grad().then(|| vec![T::zero(); x.numel()]);
                let mut grads: Vec<Option<Vec<T>>> = vec![None];
                let width = heads * d_head;
                for h in 0..heads {
                    let w: Vec<Tensor<T>> = p[1 + 3 * h..4 + 3 * h].iter().map(copy).collect();
                    let head = HeadWeights {
                        wq: w[0].clone(),
                        wk: w[1].clone(),
                        wv: w[2].clone(),
                        head_index: h,
                    };
                    let out = head_forward_unchecked(&head, &x, seq_len, scaled).expect("validated in forward");
                    let g_h: Vec<T> = (0..rows)
                        .flat_map(|r| g[r * width + h * d_head..r * width + (h + 1) * d_head].iter().copied())
                        .collect();
                    let hg = backward_with(&out, &g_h).expect("fresh graph");
                    if let (Some(acc), Some(gx)) = (dx.as_mut(), hg.get(&x)) {
                        for (a, &v) in acc.iter_mut().zip(gx) {
                            *a = *a + v;
                        }
                    }
                    grads.extend(w.iter().map(|t| t.requires_grad().then(|| hg.tensor_for(t).data().to_vec())));
                }
                grads[0] = dx;
                grads
            }),
        )
    }

    fn check_input(&self, x: &Tensor<T>, seq_len: usize) -> Result<()> {
        let (rows, cols) = x.dims2("attention input")?;
        if cols != self.d_model {
            return Err(TensorError::ShapeMismatch {
                op: "attention input",
                detail: format!("{cols} columns, d_model {}", self.d_model),
            }
            .into());
        }
        if seq_len == 0 || rows % seq_len != 0 {
            return Err(TensorError::ShapeMismatch {
                op: "attention input",
                detail: format!("{rows} rows not a multiple of seq_len {seq_len}"),
            }
            .into());
        }
        Ok(())
    }

    /// Output for a contiguous range of heads, `[rows × |range|·d_head]`.
    pub fn segment_forward(
        &self,
        x: &Tensor<T>,
        seq_len: usize,
        heads: Range<usize>,
        mode: HeadMode,
    ) -> Result<Tensor<T>> {
        self.check_input(x, seq_len)?;
        if heads.is_empty() || heads.end > self.heads.len() {
            return Err(AttentionError::InvalidPlan(format!(
                "head range {heads:?} for {} heads",
                self.heads.len()
            )));
        }
        let group = &self.heads[heads];
        match mode {
            HeadMode::PerHead => {
                let outs = group
                    .iter()
                    .map(|h| head_forward_unchecked(h, x, seq_len, self.scale_scores))
                    .collect::<Result<Vec<_>>>()?;
                Ok(concat_cols(&outs)?)
            }
            HeadMode::Fused => {
                let cat = |pick: fn(&HeadWeights<T>) -> &Tensor<T>| {
                    concat_cols(&group.iter().map(|h| pick(h).clone()).collect::<Vec<_>>())
                };
                let wq = cat(|h| &h.wq)?;
                let wk = cat(|h| &h.wk)?;
                let wv = cat(|h| &h.wv)?;
                let q = matmul(x, &wq)?;
                let k = matmul(x, &wk)?;
                let v = matmul(x, &wv)?;
                Ok(attention_core(&q, &k, &v, seq_len, group.len(), self.scale_scores)?)
            }
        }
    }
}

fn head_forward_unchecked<T: Scalar>(
    h: &HeadWeights<T>,
    x: &Tensor<T>,
    seq_len: usize,
    scaled: bool,
) -> Result<Tensor<T>> {
    let q = matmul(x, &h.wq)?;
    let k = matmul(x, &h.wk)?;
    let v = matmul(x, &h.wv)?;
    Ok(attention_core(&q, &k, &v, seq_len, 1, scaled)?)
}

/// `softmax(QKᵀ/√d_head)·V` for one head. Rows of `x` are grouped into
/// independent sequences of `seq_len` tokens.
pub fn head_forward<T: Scalar>(
    h: &HeadWeights<T>,
    x: &Tensor<T>,
    seq_len: usize,
    scaled: bool,
) -> Result<Tensor<T>> {
    if h.wq.shape() != h.wk.shape() || h.wq.shape() != h.wv.shape() {
        return Err(AttentionError::InvalidLayer("head weights differ in shape".into()));
    }
    head_forward_unchecked(h, x, seq_len, scaled)
}

pub fn fused_forward<T: Scalar>(layer: &AttentionLayer<T>, x: &Tensor<T>, seq_len: usize) -> Result<Tensor<T>> {
    layer.segment_forward(x, seq_len, 0..layer.num_heads(), HeadMode::Fused)
}

pub fn per_head_forward<T: Scalar>(layer: &AttentionLayer<T>, x: &Tensor<T>, seq_len: usize) -> Result<Tensor<T>> {
    layer.segment_forward(x, seq_len, 0..layer.num_heads(), HeadMode::PerHead)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub lane_id: usize,
    pub heads: Range<usize>,
    pub mode: HeadMode,
}

/// Head ranges assigned to lanes. Segments may be listed in any order; their
/// ranges must tile `[0, K)` and each lane appears at most once.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionPlan {
    pub segments: Vec<Segment>,
}

impl ExecutionPlan {
    pub fn single(lane_id: usize, heads: usize, mode: HeadMode) -> Self {
        Self {
            segments: vec![Segment {
                lane_id,
                heads: 0..heads,
                mode,
            }],
        }
    }

    /// Builds contiguous ranges from per-lane head counts in the given order,
    /// skipping lanes with zero heads.
    pub fn from_counts(counts: &[(usize, usize, HeadMode)]) -> Self {
        let mut start = 0;
        let mut segments = Vec::new();
        for &(lane_id, k, mode) in counts {
            if k == 0 {
                continue;
            }
            segments.push(Segment {
                lane_id,
                heads: start..start + k,
                mode,
            });
            start += k;
        }
        Self { segments }
    }

    pub fn validate(&self, num_heads: usize) -> Result<()> {
        let mut sorted: Vec<&Segment> = self.segments.iter().collect();
        sorted.sort_by_key(|s| s.heads.start);
        let mut next = 0;
        for s in &sorted {
            if s.heads.start != next || s.heads.is_empty() {
                return Err(AttentionError::InvalidPlan(format!(
                    "segments do not tile [0, {num_heads}): expected start {next}, got {:?}",
                    s.heads
                )));
            }
            next = s.heads.end;
        }
        if next != num_heads {
            return Err(AttentionError::InvalidPlan(format!(
                "segments cover [0, {next}) but layer has {num_heads} heads"
            )));
        }
        let mut lanes: Vec<usize> = self.segments.iter().map(|s| s.lane_id).collect();
        lanes.sort_unstable();
        if lanes.windows(2).any(|w| w[0] == w[1]) {
            return Err(AttentionError::InvalidPlan("lane used by two segments".into()));
        }
        Ok(())
    }

    /// Segments ordered by first head.
    pub fn ordered(&self) -> Vec<Segment> {
        let mut segs = self.segments.clone();
        segs.sort_by_key(|s| s.heads.start);
        segs
    }
}

/// Result of a lane-split forward: the concatenated output and the elapsed
/// time of the slowest lane.
#[derive(Debug, Clone)]
pub struct SplitRun<T: Scalar> {
    pub output: Tensor<T>,
    pub elapsed_ms: f64,
    pub lane_ms: Vec<(usize, f64)>,
}

/// Runs every plan segment on its lane concurrently and concatenates the
/// results by head index.
pub fn split_forward<T: Scalar>(
    layer: &AttentionLayer<T>,
    x: &Tensor<T>,
    seq_len: usize,
    plan: &ExecutionPlan,
    lanes: &LaneSet,
) -> Result<SplitRun<T>> {
    plan.validate(layer.num_heads())?;
    layer.check_input(x, seq_len)?;
    let ordered = plan.ordered();
    for s in &ordered {
        if lanes.get(s.lane_id).is_none() {
            return Err(AttentionError::UnknownLane(s.lane_id));
        }
    }
    let pending = ordered
        .iter()
        .map(|s| {
            let lane = lanes.get(s.lane_id).expect("checked above");
            lane.submit_segment(layer.clone(), x.clone(), seq_len, s.clone())
        })
        .collect::<std::result::Result<Vec<_>, LaneError>>()?;
    let mut outputs = Vec::with_capacity(pending.len());
    let mut lane_ms = Vec::with_capacity(pending.len());
    for (seg, p) in ordered.iter().zip(pending) {
        let run = p.wait()?;
        lane_ms.push((seg.lane_id, run.elapsed_ms));
        outputs.push(run.output);
    }
    let elapsed_ms = lane_ms.iter().map(|&(_, ms)| ms).fold(0.0, f64::max);
    Ok(SplitRun {
        output: concat_cols(&outputs)?,
        elapsed_ms,
        lane_ms,
    })
}

/// Strategy used by the encoder to evaluate attention.
#[derive(Debug, Clone)]
pub enum AttentionStrategy {
    Fused,
    PerHead,
    Split {
        plan: ExecutionPlan,
        lanes: std::sync::Arc<LaneSet>,
    },
}

impl AttentionStrategy {
    /// Returns the attention output and the lane-reported elapsed time (zero
    /// for the local strategies).
    pub fn run<T: Scalar>(&self, layer: &AttentionLayer<T>, x: &Tensor<T>, seq_len: usize) -> Result<(Tensor<T>, f64)> {
        let (values, x_values) = (layer.detached(), x.detach());
        let (out, ms) = match self {
            AttentionStrategy::Fused => (fused_forward(&values, &x_values, seq_len)?, 0.0),
            AttentionStrategy::PerHead => (per_head_forward(&values, &x_values, seq_len)?, 0.0),
            AttentionStrategy::Split { plan, lanes } => {
                let run = split_forward(&values, &x_values, seq_len, plan, lanes)?;
                (run.output, run.elapsed_ms)
            }
        };
        Ok((layer.attach(x, seq_len, out.data().to_vec()), ms))
    }

    pub fn plan(&self, num_heads: usize) -> ExecutionPlan {
        match self {
            AttentionStrategy::Fused => ExecutionPlan::single(0, num_heads, HeadMode::Fused),
            AttentionStrategy::PerHead => ExecutionPlan::single(0, num_heads, HeadMode::PerHead),
            AttentionStrategy::Split { plan, .. } => plan.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{random_head, random_layer, random_tensor};

    #[test]
    fn single_token_returns_value_projection() {
        let layer = random_layer::<f64>(1, 4, 1);
        let x = random_tensor::<f64>(&[1, 4], 2, 1.0);
        let z = head_forward(&layer.heads()[0], &x, 1, true).unwrap();
        let xv = matmul(&x, &layer.heads()[0].wv).unwrap();
        assert_eq!(z.data(), xv.data());
    }

    #[test]
    fn zero_query_key_gives_uniform_average() {
        let h = &random_head::<f64>(4, 2, 0, 3);
        let zero = Tensor::<f64>::zeros(vec![4, 2]);
        let h0 = HeadWeights {
            wq: zero.clone(),
            wk: zero,
            wv: h.wv.clone(),
            head_index: 0,
        };
        let x = random_tensor::<f64>(&[3, 4], 4, 1.0);
        let z = head_forward(&h0, &x, 3, true).unwrap();
        let xv = matmul(&x, &h.wv).unwrap();
        for c in 0..2 {
            let mean = (0..3).map(|r| xv.data()[r * 2 + c]).sum::<f64>() / 3.0;
            for r in 0..3 {
                assert!((z.data()[r * 2 + c] - mean).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn fused_equals_per_head_bitwise_in_f32() {
        let layer = random_layer::<f32>(12, 48, 9);
        let x = random_tensor::<f32>(&[10, 48], 10, 1.0);
        let a = fused_forward(&layer, &x, 5).unwrap();
        let b = per_head_forward(&layer, &x, 5).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn layer_rejects_inconsistent_heads() {
        let layer = random_layer::<f64>(2, 4, 1);
        let mut heads = layer.heads().to_vec();
        heads[1].head_index = 5;
        assert!(AttentionLayer::new(heads, true).is_err());
        let mut heads = layer.heads().to_vec();
        heads.pop();
        assert!(matches!(AttentionLayer::new(heads, true), Err(AttentionError::InvalidLayer(_))));
    }

    #[test]
    fn plan_validation() {
        let ok = ExecutionPlan::from_counts(&[(0, 7, HeadMode::Fused), (1, 5, HeadMode::PerHead)]);
        ok.validate(12).unwrap();
        assert!(ok.validate(13).is_err());
        let gap = ExecutionPlan {
            segments: vec![
                Segment { lane_id: 0, heads: 0..3, mode: HeadMode::Fused },
                Segment { lane_id: 1, heads: 4..12, mode: HeadMode::Fused },
            ],
        };
        assert!(matches!(gap.validate(12), Err(AttentionError::InvalidPlan(_))));
        let dup = ExecutionPlan {
            segments: vec![
                Segment { lane_id: 0, heads: 0..6, mode: HeadMode::Fused },
                Segment { lane_id: 0, heads: 6..12, mode: HeadMode::Fused },
            ],
        };
        assert!(dup.validate(12).is_err());
    }

    #[test]
    fn input_width_checked() {
        let layer = random_layer::<f64>(2, 4, 1);
        let x = random_tensor::<f64>(&[2, 3], 1, 1.0);
        assert!(matches!(fused_forward(&layer, &x, 2), Err(AttentionError::Tensor(_))));
    }
}
