//! Small pre-LN transformer encoder for sequence classification, the
//! synthetic dataset it trains on, and checkpoint I/O.
//!
//! Block layout (pre-LN):
//!
//! ```text
//! x = x + Attn(LN1(x))
//! x = x + W2·relu(W1·LN2(x) + b1) + b2
//! ```
//!
//! The classifier reads the final-LN output at position 0 of each sequence.
//! A model can be cut into contiguous stages; stage 0 owns the embeddings
//! and the last stage owns the classifier.

use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{AttentionError, AttentionLayer, AttentionStrategy, HeadWeights};
use crate::tensor::{
    add, add_row, backward, cross_entropy, gather_rows, layer_norm, matmul, relu, sgd_step, Parameter, Scalar,
    Tensor, TensorError,
};
use crate::transport::{self, MsgType, PipeMessage, TransportError, WireTensor};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid encoder config: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error("bad stage input: {0}")]
    BadInput(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub seq_len: usize,
    pub classes: usize,
    pub seed: u64,
    /// Scale attention scores by `1/√d_head`.
    pub scale_scores: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 6,
            heads: 12,
            d_model: 48,
            d_ff: 96,
            vocab: 64,
            seq_len: 16,
            classes: 4,
            seed: 0,
            scale_scores: true,
        }
    }
}

impl EncoderConfig {
    /// Every violation, not just the first.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (name, value) in [
            ("layers", self.layers),
            ("heads", self.heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("vocab", self.vocab),
            ("seq_len", self.seq_len),
            ("classes", self.classes),
        ] {
            if value == 0 {
                v.push(format!("{name} must be positive"));
            }
        }
        if self.heads > 0 && !self.d_model.is_multiple_of(self.heads) {
            v.push(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        if self.classes > 0 && self.vocab < self.classes {
            v.push(format!("vocab {} smaller than classes {}", self.vocab, self.classes));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(ModelError::InvalidConfig(v))
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn block_param_count(&self) -> usize {
        let d = self.d_model;
        4 * d + 3 * d * d + 2 * d * self.d_ff + self.d_ff + d
    }

    pub fn embedding_param_count(&self) -> usize {
        (self.vocab + self.seq_len) * self.d_model
    }

    pub fn head_param_count(&self) -> usize {
        2 * self.d_model + self.d_model * self.classes + self.classes
    }

    pub fn param_count(&self) -> usize {
        self.embedding_param_count() + self.layers * self.block_param_count() + self.head_param_count()
    }
}

/// One training batch: `tokens` is `[batch·seq_len]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub tokens: Vec<usize>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.labels.len()
    }
}

/// Sequences whose label is the token bucket holding a strict plurality of
/// the tokens. Buckets split the vocabulary into `classes` equal ranges.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub vocab: usize,
    pub seq_len: usize,
    pub classes: usize,
    pub seed: u64,
    /// Chance that a token is drawn from the label's bucket.
    pub signal: f64,
}

const EVAL_STREAM: u64 = 1 << 40;

impl SyntheticTask {
    pub fn new(cfg: &EncoderConfig, seed: u64) -> Self {
        Self {
            vocab: cfg.vocab,
            seq_len: cfg.seq_len,
            classes: cfg.classes,
            seed,
            signal: 0.5,
        }
    }

    pub fn bucket_of(&self, token: usize) -> usize {
        (token * self.classes / self.vocab).min(self.classes - 1)
    }

    fn bucket_range(&self, class: usize) -> Range<usize> {
        let lo = (class * self.vocab).div_ceil(self.classes);
        let hi = ((class + 1) * self.vocab).div_ceil(self.classes);
        lo..hi
    }

    fn sequence(&self, label: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let bucket = self.bucket_range(label);
        loop {
            let seq: Vec<usize> = (0..self.seq_len)
                .map(|_| {
                    if rng.gen_bool(self.signal) {
                        rng.gen_range(bucket.clone())
                    } else {
                        rng.gen_range(0..self.vocab)
                    }
                })
                .collect();
            if self.majority(&seq) == Some(label) {
                return seq;
            }
        }
    }

    /// Bucket with a strict plurality, if any.
    pub fn majority(&self, tokens: &[usize]) -> Option<usize> {
        let mut counts = vec![0usize; self.classes];
        for &t in tokens {
            counts[self.bucket_of(t)] += 1;
        }
        let best = (0..self.classes).max_by_key(|&c| (counts[c], std::cmp::Reverse(c)))?;
        (counts.iter().filter(|&&n| n == counts[best]).count() == 1).then_some(best)
    }

    fn batch_from_stream(&self, stream: u64, size: usize) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut labels: Vec<usize> = (0..size).map(|i| i % self.classes).collect();
        labels.shuffle(&mut rng);
        let tokens = labels.iter().flat_map(|&l| self.sequence(l, &mut rng)).collect();
        Batch { tokens, labels }
    }

    /// Training batch `index`; identical for identical (seed, index, size).
    pub fn batch(&self, index: u64, size: usize) -> Batch {
        self.batch_from_stream(index, size)
    }

    /// Held-out batch drawn from a stream disjoint from training batches.
    pub fn eval_batch(&self, index: u64, size: usize) -> Batch {
        self.batch_from_stream(EVAL_STREAM + index, size)
    }
}

/// Input to a stage's forward pass.
#[derive(Debug, Clone)]
pub enum StageInput<T: Scalar> {
    Tokens(Vec<usize>),
    Hidden(Tensor<T>),
}

#[derive(Debug, Clone)]
pub struct StageForward<T: Scalar> {
    /// Hidden state `[batch·seq × d_model]`, or the scalar loss on the last stage.
    pub output: Tensor<T>,
    pub logits: Option<Tensor<T>>,
    /// Sum of the attention times reported by the strategy, one per block.
    pub attention_ms: f64,
}

/// A contiguous slice of the encoder with its parameters.
#[derive(Debug, Clone)]
pub struct StageModel<T: Scalar> {
    pub cfg: EncoderConfig,
    pub blocks: Range<usize>,
    pub has_embedding: bool,
    pub has_head: bool,
    pub params: Vec<Parameter<T>>,
}

fn block_param_names(cfg: &EncoderConfig, l: usize) -> Vec<(String, Vec<usize>)> {
    let (d, dh, f) = (cfg.d_model, cfg.d_head(), cfg.d_ff);
    let mut v = vec![
        (format!("layer{l}.ln1.gain"), vec![d]),
        (format!("layer{l}.ln1.bias"), vec![d]),
    ];
    for h in 0..cfg.heads {
        for w in ["wq", "wk", "wv"] {
            v.push((format!("layer{l}.head{h}.{w}"), vec![d, dh]));
        }
    }
    v.extend([
        (format!("layer{l}.ln2.gain"), vec![d]),
        (format!("layer{l}.ln2.bias"), vec![d]),
        (format!("layer{l}.ffn.w1"), vec![d, f]),
        (format!("layer{l}.ffn.b1"), vec![f]),
        (format!("layer{l}.ffn.w2"), vec![f, d]),
        (format!("layer{l}.ffn.b2"), vec![d]),
    ]);
    v
}

fn param_layout(cfg: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.d_model;
    let mut v = vec![
        ("embed.token".to_string(), vec![cfg.vocab, d]),
        ("embed.position".to_string(), vec![cfg.seq_len, d]),
    ];
    for l in 0..cfg.layers {
        v.extend(block_param_names(cfg, l));
    }
    v.extend([
        ("head.ln.gain".to_string(), vec![d]),
        ("head.ln.bias".to_string(), vec![d]),
        ("head.w".to_string(), vec![d, cfg.classes]),
        ("head.b".to_string(), vec![cfg.classes]),
    ]);
    v
}

fn init_value(name: &str, n: usize, bound: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if name.ends_with(".gain") {
        vec![1.0; n]
    } else if name.ends_with(".bias") || name.ends_with(".b1") || name.ends_with(".b2") || name == "head.b" {
        vec![0.0; n]
    } else {
        (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
    }
}

impl<T: Scalar> StageModel<T> {
    /// Full model (every block, embeddings and classifier) initialised from
    /// `cfg.seed`: weights uniform in ±1/√d_model, LN gains 1, biases 0.
    pub fn build(cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let bound = 1.0 / (cfg.d_model as f64).sqrt();
        let params = param_layout(cfg)
            .into_iter()
            .map(|(name, shape)| {
                let n = shape.iter().product();
                let data = init_value(&name, n, bound, &mut rng).into_iter().map(T::lit).collect();
                Parameter::new(name, shape, data)
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            blocks: 0..cfg.layers,
            has_embedding: true,
            has_head: true,
            params,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn param_bytes(&self) -> usize {
        self.params.iter().map(Parameter::bytes).sum()
    }

    pub fn values(&self) -> Vec<Tensor<T>> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    /// Deep copy of every parameter value (a stash snapshot).
    pub fn snapshot(&self) -> Vec<Tensor<T>> {
        self.params.iter().map(|p| p.value.detach_param()).collect()
    }

    /// Version shared by all parameters (they step together).
    pub fn version(&self) -> u64 {
        self.params.first().map_or(0, |p| p.version)
    }

    pub fn param(&self, name: &str) -> Option<&Parameter<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    fn block_width(&self) -> usize {
        3 * self.cfg.heads + 8
    }

    fn block_offset(&self, l: usize) -> usize {
        (if self.has_embedding { 2 } else { 0 }) + (l - self.blocks.start) * self.block_width()
    }

    /// Cuts a full model into contiguous stages covering every block.
    pub fn split(&self, ranges: &[Range<usize>]) -> Result<Vec<StageModel<T>>> {
        if !(self.has_embedding && self.has_head && self.blocks == (0..self.cfg.layers)) {
            return Err(ModelError::BadInput("only a full model can be split".into()));
        }
        let mut expect = 0;
        for r in ranges {
            if r.start != expect || r.is_empty() {
                return Err(ModelError::BadInput(format!("ranges {ranges:?} do not tile the blocks")));
            }
            expect = r.end;
        }
        if expect != self.cfg.layers {
            return Err(ModelError::BadInput(format!("ranges {ranges:?} do not tile the blocks")));
        }
        let last = ranges.len() - 1;
        Ok(ranges
            .iter()
            .enumerate()
            .map(|(s, r)| {
                let lo = if s == 0 { 0 } else { self.block_offset(r.start) };
                let hi = if s == last {
                    self.params.len()
                } else {
                    self.block_offset(r.end)
                };
                StageModel {
                    cfg: self.cfg.clone(),
                    blocks: r.clone(),
                    has_embedding: s == 0,
                    has_head: s == last,
                    params: self.params[lo..hi].to_vec(),
                }
            })
            .collect())
    }

    /// Reassembles stages produced by [`split`](Self::split).
    pub fn merge(stages: Vec<StageModel<T>>) -> Result<StageModel<T>> {
        let first = stages.first().ok_or_else(|| ModelError::BadInput("no stages".into()))?;
        let cfg = first.cfg.clone();
        let mut expect = 0;
        for (s, st) in stages.iter().enumerate() {
            if st.blocks.start != expect || st.has_embedding != (s == 0) || st.has_head != (s + 1 == stages.len()) {
                return Err(ModelError::BadInput(format!("stage {s} out of place")));
            }
            expect = st.blocks.end;
        }
        if expect != cfg.layers {
            return Err(ModelError::BadInput("stages do not cover every block".into()));
        }
        Ok(StageModel {
            blocks: 0..cfg.layers,
            has_embedding: true,
            has_head: true,
            params: stages.into_iter().flat_map(|s| s.params).collect(),
            cfg,
        })
    }

    /// Forward pass through this stage using `values` (aligned with
    /// `self.params`, e.g. a stash snapshot). The last stage needs `labels`
    /// and returns the mean cross-entropy.
    pub fn forward_with(
        &self,
        values: &[Tensor<T>],
        input: StageInput<T>,
        labels: Option<&[usize]>,
        strategy: &AttentionStrategy,
    ) -> Result<StageForward<T>> {
        if values.len() != self.params.len() {
            return Err(ModelError::BadInput(format!(
                "{} values for {} parameters",
                values.len(),
                self.params.len()
            )));
        }
        let cfg = &self.cfg;
        let seq = cfg.seq_len;
        let mut x = match (input, self.has_embedding) {
            (StageInput::Tokens(tokens), true) => {
                if tokens.is_empty() || tokens.len() % seq != 0 {
                    return Err(ModelError::BadInput(format!("{} tokens, seq_len {seq}", tokens.len())));
                }
                let positions: Vec<usize> = (0..tokens.len()).map(|i| i % seq).collect();
                let tok = gather_rows(&values[0], &tokens)?;
                let pos = gather_rows(&values[1], &positions)?;
                add(&tok, &pos)?
            }
            (StageInput::Hidden(h), false) => h,
            (_, true) => return Err(ModelError::BadInput("stage 0 expects tokens".into())),
            (_, false) => return Err(ModelError::BadInput("stage expects hidden state".into())),
        };
        let mut attention_ms = 0.0;
        for l in self.blocks.clone() {
            let w = &values[self.block_offset(l)..self.block_offset(l) + self.block_width()];
            let heads = (0..cfg.heads)
                .map(|h| HeadWeights {
                    wq: w[2 + 3 * h].clone(),
                    wk: w[3 + 3 * h].clone(),
                    wv: w[4 + 3 * h].clone(),
                    head_index: h,
                })
                .collect();
            let layer = AttentionLayer::new(heads, cfg.scale_scores)?;
            let f = 2 + 3 * cfg.heads;
            let h1 = layer_norm(&x, &w[0], &w[1])?;
            let (a, ms) = strategy.run(&layer, &h1, seq)?;
            attention_ms += ms;
            x = add(&x, &a)?;
            let h2 = layer_norm(&x, &w[f], &w[f + 1])?;
            let u = relu(&add_row(&matmul(&h2, &w[f + 2])?, &w[f + 3])?)?;
            let ff = add_row(&matmul(&u, &w[f + 4])?, &w[f + 5])?;
            x = add(&x, &ff)?;
        }
        if !self.has_head {
            return Ok(StageForward {
                output: x,
                logits: None,
                attention_ms,
            });
        }
        let labels = labels.ok_or_else(|| ModelError::BadInput("last stage needs labels".into()))?;
        let n = values.len();
        let h = layer_norm(&x, &values[n - 4], &values[n - 3])?;
        let cls: Vec<usize> = (0..x.rows() / seq).map(|b| b * seq).collect();
        let pooled = gather_rows(&h, &cls)?;
        let logits = add_row(&matmul(&pooled, &values[n - 2])?, &values[n - 1])?;
        let loss = cross_entropy(&logits, labels)?;
        Ok(StageForward {
            output: loss,
            logits: Some(logits),
            attention_ms,
        })
    }

    /// Full-model loss and accuracy on `batch`.
    pub fn forward_loss(&self, batch: &Batch, strategy: &AttentionStrategy) -> Result<(Tensor<T>, f64)> {
        if !(self.has_embedding && self.has_head) {
            return Err(ModelError::BadInput("forward_loss needs a full model".into()));
        }
        if batch.tokens.len() != batch.size() * self.cfg.seq_len {
            return Err(TensorError::ShapeMismatch {
                op: "forward_loss",
                detail: format!("{} tokens for {} samples", batch.tokens.len(), batch.size()),
            }
            .into());
        }
        let out = self.forward_with(
            &self.values(),
            StageInput::Tokens(batch.tokens.clone()),
            Some(&batch.labels),
            strategy,
        )?;
        let acc = accuracy(out.logits.as_ref().expect("last stage"), &batch.labels);
        Ok((out.output, acc))
    }

    /// Saves config JSON and parameters (transport tensor frame).
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::to_vec(&CheckpointHeader {
            config: self.cfg.clone(),
            names: self.params.iter().map(|p| p.name.clone()).collect(),
            version: self.version(),
        })
        .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let frame = transport::encode(&PipeMessage::new(
            MsgType::Weights,
            0,
            self.version() as u32,
            self.params.iter().map(|p| WireTensor::from_tensor(&p.value)).collect(),
        ))?;
        let mut out = Vec::with_capacity(8 + header.len() + frame.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&frame);
        std::fs::write(path, out)?;
        Ok(())
    }

    /// Loads a full-model checkpoint.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let bad = |m: &str| ModelError::Checkpoint(m.to_string());
        if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad("missing magic"));
        }
        let hlen = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let header: CheckpointHeader = serde_json::from_slice(bytes.get(8..8 + hlen).ok_or_else(|| bad("short header"))?)
            .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let frame = transport::decode(&bytes[8 + hlen..])?;
        let mut model = Self::build(&header.config)?;
        if frame.tensors.len() != model.params.len() || header.names.len() != model.params.len() {
            return Err(bad("parameter count does not match config"));
        }
        for ((p, t), name) in model.params.iter_mut().zip(&frame.tensors).zip(&header.names) {
            let value = t.to_tensor::<T>()?;
            if &p.name != name || value.shape() != p.value.shape() {
                return Err(ModelError::Checkpoint(format!("parameter {name} does not match config")));
            }
            p.value = value.detach_param();
            p.version = header.version;
        }
        Ok(model)
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"HPCK";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: EncoderConfig,
    names: Vec<String>,
    version: u64,
}

/// Fraction of rows whose argmax (first on ties) equals the label.
pub fn accuracy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> f64 {
    let c = logits.cols();
    let hits = logits
        .data()
        .chunks(c)
        .zip(labels)
        .filter(|(row, &l)| {
            let best = (0..c).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            best == l
        })
        .count();
    hits as f64 / labels.len().max(1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub loss: f64,
    pub accuracy: f64,
}

/// One plain SGD step on a full model.
pub fn train_step<T: Scalar>(
    model: &mut StageModel<T>,
    batch: &Batch,
    lr: f64,
    strategy: &AttentionStrategy,
) -> Result<StepResult> {
    let (loss, accuracy) = model.forward_loss(batch, strategy)?;
    let grads = backward(&loss)?;
    let g: Vec<Tensor<T>> = model.params.iter().map(|p| grads.tensor_for(&p.value)).collect();
    sgd_step(&mut model.params, lr, &g)?;
    Ok(StepResult {
        loss: loss.item().as_f64(),
        accuracy,
    })
}

/// Single-device baseline: `steps` batches from `task`, in order.
pub fn train_sequential<T: Scalar>(
    model: &mut StageModel<T>,
    task: &SyntheticTask,
    steps: usize,
    batch_size: usize,
    lr: f64,
    strategy: &AttentionStrategy,
) -> Result<Vec<StepResult>> {
    (0..steps as u64)
        .map(|i| train_step(model, &task.batch(i, batch_size), lr, strategy))
        .collect()
}

/// Mean loss and accuracy over held-out batches.
pub fn evaluate<T: Scalar>(
    model: &StageModel<T>,
    task: &SyntheticTask,
    batches: usize,
    batch_size: usize,
    strategy: &AttentionStrategy,
) -> Result<StepResult> {
    let mut loss = 0.0;
    let mut acc = 0.0;
    for i in 0..batches as u64 {
        let (l, a) = model.forward_loss(&task.eval_batch(i, batch_size), strategy)?;
        loss += l.item().as_f64();
        acc += a;
    }
    let n = batches.max(1) as f64;
    Ok(StepResult {
        loss: loss / n,
        accuracy: acc / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            layers: 2,
            heads: 2,
            d_model: 8,
            d_ff: 12,
            vocab: 16,
            seq_len: 4,
            classes: 4,
            seed: 3,
            scale_scores: true,
        }
    }

    #[test]
    fn default_param_count_matches_closed_form() {
        let cfg = EncoderConfig::default();
        let m = StageModel::<f32>::build(&cfg).unwrap();
        // embeddings (64+16)·48, six blocks of 16464, classifier 2·48+48·4+4
        assert_eq!(m.param_count(), 3840 + 6 * 16464 + 292);
        assert_eq!(m.param_count(), cfg.param_count());
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = StageModel::<f32>::build(&tiny()).unwrap();
        let b = StageModel::<f32>::build(&tiny()).unwrap();
        for (p, q) in a.params.iter().zip(&b.params) {
            assert_eq!(p.name, q.name);
            assert_eq!(p.value.data(), q.value.data());
        }
    }

    #[test]
    fn init_bounds() {
        let m = StageModel::<f64>::build(&tiny()).unwrap();
        let bound = 1.0 / 8f64.sqrt();
        for p in &m.params {
            let d = p.value.to_f64_vec();
            if p.name.ends_with("gain") {
                assert!(d.iter().all(|&v| v == 1.0));
            } else if p.name.contains("bias") || p.name.ends_with(".b1") || p.name.ends_with(".b2") || p.name == "head.b" {
                assert!(d.iter().all(|&v| v == 0.0));
            } else {
                assert!(d.iter().all(|&v| v.abs() <= bound), "{}", p.name);
            }
        }
    }

    #[test]
    fn config_lists_every_violation() {
        let cfg = EncoderConfig {
            layers: 0,
            heads: 5,
            d_model: 48,
            classes: 0,
            ..EncoderConfig::default()
        };
        match cfg.validate() {
            Err(ModelError::InvalidConfig(v)) => assert_eq!(v.len(), 3, "{v:?}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn synthetic_task_is_deterministic_balanced_and_consistent() {
        let cfg = EncoderConfig::default();
        let task = SyntheticTask::new(&cfg, 11);
        let a = task.batch(5, 64);
        assert_eq!(a, task.batch(5, 64));
        assert_ne!(a, task.batch(6, 64));
        let mut counts = [0usize; 4];
        for (i, &l) in a.labels.iter().enumerate() {
            counts[l] += 1;
            assert_eq!(task.majority(&a.tokens[i * 16..(i + 1) * 16]), Some(l));
        }
        assert!(counts.iter().all(|&c| c == 16));
    }

    #[test]
    fn untrained_loss_near_log_classes() {
        let cfg = EncoderConfig::default();
        let m = StageModel::<f32>::build(&cfg).unwrap();
        let task = SyntheticTask::new(&cfg, 1);
        let (loss, _) = m.forward_loss(&task.batch(0, 32), &AttentionStrategy::Fused).unwrap();
        assert!((loss.item() as f64 - 4f64.ln()).abs() < 0.2, "{}", loss.item());
    }

    #[test]
    fn identical_samples_identical_losses() {
        let cfg = tiny();
        let m = StageModel::<f64>::build(&cfg).unwrap();
        let task = SyntheticTask::new(&cfg, 2);
        let one = task.batch(0, 1);
        let (l1, _) = m.forward_loss(&one, &AttentionStrategy::Fused).unwrap();
        let three = Batch {
            tokens: one.tokens.repeat(3),
            labels: one.labels.repeat(3),
        };
        let (l3, _) = m.forward_loss(&three, &AttentionStrategy::Fused).unwrap();
        let logits = m
            .forward_with(&m.values(), StageInput::Tokens(three.tokens.clone()), Some(&three.labels), &AttentionStrategy::Fused)
            .unwrap()
            .logits
            .unwrap();
        let rows: Vec<&[f64]> = logits.data().chunks(cfg.classes).collect();
        assert_eq!(rows[0], rows[1]);
        assert_eq!(rows[1], rows[2]);
        assert!((l1.item() - l3.item()).abs() < 1e-12);
    }

    #[test]
    fn minimal_model_trains() {
        let cfg = EncoderConfig {
            layers: 1,
            heads: 1,
            ..tiny()
        };
        let mut m = StageModel::<f32>::build(&cfg).unwrap();
        let task = SyntheticTask::new(&cfg, 0);
        let steps = train_sequential(&mut m, &task, 5, 4, 0.05, &AttentionStrategy::PerHead).unwrap();
        assert_eq!(steps.len(), 5);
        assert!(steps.iter().all(|s| s.loss.is_finite()));
        assert_eq!(m.version(), 5);
    }

    #[test]
    fn split_merge_round_trip_and_staged_forward() {
        let cfg = EncoderConfig { layers: 3, ..tiny() };
        let full = StageModel::<f64>::build(&cfg).unwrap();
        let stages = full.split(&[0..1, 1..2, 2..3]).unwrap();
        let per_stage: usize = stages.iter().map(|s| s.param_count()).sum();
        assert_eq!(per_stage, full.param_count());
        let batch = SyntheticTask::new(&cfg, 4).batch(0, 2);
        let mut x = StageInput::Tokens(batch.tokens.clone());
        let mut out = None;
        for s in &stages {
            let f = s.forward_with(&s.values(), x, Some(&batch.labels), &AttentionStrategy::Fused).unwrap();
            x = StageInput::Hidden(f.output.clone());
            out = Some(f.output);
        }
        let (loss, _) = full.forward_loss(&batch, &AttentionStrategy::Fused).unwrap();
        assert_eq!(out.unwrap().item(), loss.item());
        let merged = StageModel::merge(stages).unwrap();
        assert_eq!(merged.params.len(), full.params.len());
        assert!(full.split(&[0..1, 2..3]).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut m = StageModel::<f32>::build(&tiny()).unwrap();
        let task = SyntheticTask::new(&tiny(), 0);
        train_sequential(&mut m, &task, 2, 4, 0.05, &AttentionStrategy::Fused).unwrap();
        m.save(&path).unwrap();
        let back = StageModel::<f32>::load(&path).unwrap();
        assert_eq!(back.version(), 2);
        for (p, q) in m.params.iter().zip(&back.params) {
            assert_eq!(p.value.data(), q.value.data());
        }
        std::fs::write(&path, b"junk").unwrap();
        assert!(StageModel::<f32>::load(&path).is_err());
    }
}
