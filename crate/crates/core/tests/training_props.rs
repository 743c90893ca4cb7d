//! Training-level properties of the encoder and the pipeline engine.

use std::sync::Arc;

use headpipe::attention::{fused_forward, per_head_forward, AttentionStrategy, HeadMode};
use headpipe::fixtures::{random_layer, random_tensor};
use headpipe::lanes::{discover_lanes, LaneDescriptor, LaneKind, ModeCost};
use headpipe::model::{evaluate, train_sequential, train_step, EncoderConfig, StageModel, SyntheticTask};
use headpipe::pipeline::{run_local, split_strategy, LocalRunOptions, TimingModel};
use headpipe::tensor::{backward, mul, sum, Tensor};

fn split_lanes() -> AttentionStrategy {
    let sim = |n: &str| LaneDescriptor::new(n, LaneKind::simulated(ModeCost::affine(0.0, 1.0), ModeCost::affine(0.0, 1.0)));
    let lanes = Arc::new(discover_lanes(&[sim("a"), sim("b"), sim("c")]).unwrap());
    split_strategy(&[(2, 5, HeadMode::PerHead), (0, 4, HeadMode::Fused), (1, 3, HeadMode::Fused)], lanes)
}

#[test]
fn synthetic_task_is_learnable_single_device() {
    let cfg = EncoderConfig::default();
    let task = SyntheticTask::new(&cfg, cfg.seed);
    let mut model = StageModel::<f32>::build(&cfg).unwrap();
    let mut best = 0.0;
    for chunk in 0..10u64 {
        for i in 0..50 {
            train_step(&mut model, &task.batch(chunk * 50 + i, 8), 0.05, &AttentionStrategy::Fused).unwrap();
        }
        best = evaluate(&model, &task, 4, 32, &AttentionStrategy::Fused).unwrap().accuracy;
        if best >= 0.8 {
            break;
        }
    }
    assert!(best >= 0.8, "accuracy {best} after 500 steps");
}

#[test]
fn strategies_give_the_same_loss_trajectory() {
    let cfg = EncoderConfig::default();
    let task = SyntheticTask::new(&cfg, 11);
    let losses = |strategy: AttentionStrategy| {
        let mut m = StageModel::<f32>::build(&cfg).unwrap();
        train_sequential(&mut m, &task, 50, 8, 0.05, &strategy).unwrap()
    };
    let fused = losses(AttentionStrategy::Fused);
    for other in [losses(AttentionStrategy::PerHead), losses(split_lanes())] {
        let gap = (fused[49].loss - other[49].loss).abs();
        assert!(gap <= 1e-5, "step-50 loss differs by {gap}");
    }
}

#[test]
fn fused_and_per_head_gradients_agree() {
    for seed in 0..10 {
        let layer = random_layer::<f32>(12, 48, seed);
        let x = random_tensor::<f32>(&[32, 48], seed + 100, 1.0);
        let w = random_tensor::<f32>(&[32, 48], seed + 200, 1.0);
        let grads = |fused: bool| {
            let out = if fused {
                fused_forward(&layer, &x, 16).unwrap()
            } else {
                per_head_forward(&layer, &x, 16).unwrap()
            };
            let g = backward(&sum(&mul(&out, &w).unwrap()).unwrap()).unwrap();
            layer
                .heads()
                .iter()
                .flat_map(|h| [&h.wq, &h.wk, &h.wv])
                .map(|p| g.tensor_for(p))
                .collect::<Vec<Tensor<f32>>>()
        };
        let a = grads(true);
        let b = grads(false);
        for (ga, gb) in a.iter().zip(&b) {
            assert!(ga.max_abs_diff(gb).unwrap() <= 1e-5);
        }
    }
}

fn pipeline_options(batches: usize) -> LocalRunOptions {
    LocalRunOptions {
        batches,
        first_batch: 0,
        lr: 0.05,
        timing: TimingModel::default(),
        clock_start_ms: 0.0,
    }
}

#[test]
fn pipelines_of_one_two_and_three_stages_converge() {
    let cfg = EncoderConfig::default();
    let task = SyntheticTask::new(&cfg, cfg.seed);
    let initial = evaluate(&StageModel::<f32>::build(&cfg).unwrap(), &task, 4, 32, &AttentionStrategy::Fused)
        .unwrap()
        .loss;
    for ranges in [vec![0..6], vec![0..3, 3..6], vec![0..2, 2..4, 4..6]] {
        let s = ranges.len();
        let mut stages = StageModel::<f32>::build(&cfg).unwrap().split(&ranges).unwrap();
        let data = |i| task.batch(i, 8);
        let metrics = run_local(&mut stages, &vec![AttentionStrategy::Fused; s], &data, pipeline_options(200)).unwrap();
        // Progress: one committed version per batch on every stage.
        assert!(metrics.iter().all(|m| m.final_version == 200));
        assert!(stages.iter().all(|m| m.params.iter().all(|p| p.version == 200)));
        let merged = StageModel::merge(stages).unwrap();
        let after = evaluate(&merged, &task, 4, 32, &AttentionStrategy::Fused).unwrap().loss;
        assert!(after <= 0.5 * initial, "S={s}: loss {initial} -> {after}");
    }
}
