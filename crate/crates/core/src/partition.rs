//! Capacity-aware contiguous partitioning of encoder blocks into stages.
//!
//! Blocks have uniform cost, so every composition of `L` into `S` positive
//! parts is a valid contiguous split. The objective is the bottleneck
//! `max_s blocks_s / capacity_s`. Quotas start from largest-remainder
//! rounding of the proportional share and are repaired to the exact optimum.

use std::ops::Range;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PartitionError {
    #[error("{blocks} blocks cannot fill {stages} stages")]
    TooFewBlocks { blocks: usize, stages: usize },
    #[error("capacity {0} is not a positive finite number")]
    BadCapacity(f64),
    #[error("no stages")]
    NoStages,
}

pub type Result<T> = std::result::Result<T, PartitionError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub stage_index: usize,
    pub layer_range: Range<usize>,
    /// Stage 0 coordinates the run and holds the data loader.
    pub is_central: bool,
}

impl StageSpec {
    pub fn blocks(&self) -> usize {
        self.layer_range.len()
    }
}

/// Throughput of one device, in encoder blocks per second.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityEstimate {
    pub device: usize,
    pub blocks_per_sec: f64,
    /// Forward plus backward time of one calibration block.
    pub block_ms: f64,
    pub measured_at_unix_ms: u64,
}

impl CapacityEstimate {
    pub fn from_block_ms(device: usize, block_ms: f64) -> Self {
        let now = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_millis() as u64);
        Self {
            device,
            blocks_per_sec: 1000.0 / block_ms,
            block_ms,
            measured_at_unix_ms: now,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionDecision {
    pub capacities: Vec<f64>,
    pub ranges: Vec<Range<usize>>,
}

impl PartitionDecision {
    pub fn new(capacities: &[f64], stages: &[StageSpec]) -> Self {
        Self {
            capacities: capacities.to_vec(),
            ranges: stages.iter().map(|s| s.layer_range.clone()).collect(),
        }
    }

    pub fn stages(&self) -> Vec<StageSpec> {
        specs_from_sizes(&self.ranges.iter().map(|r| r.len()).collect::<Vec<_>>())
    }
}

pub fn bottleneck(sizes: &[usize], capacities: &[f64]) -> f64 {
    sizes
        .iter()
        .zip(capacities)
        .map(|(&b, &c)| b as f64 / c)
        .fold(0.0, f64::max)
}

fn specs_from_sizes(sizes: &[usize]) -> Vec<StageSpec> {
    let mut lo = 0;
    sizes
        .iter()
        .enumerate()
        .map(|(s, &b)| {
            let spec = StageSpec {
                stage_index: s,
                layer_range: lo..lo + b,
                is_central: s == 0,
            };
            lo += b;
            spec
        })
        .collect()
}

fn check(blocks: usize, capacities: &[f64]) -> Result<()> {
    if capacities.is_empty() {
        return Err(PartitionError::NoStages);
    }
    if let Some(&c) = capacities.iter().find(|c| !(c.is_finite() && **c > 0.0)) {
        return Err(PartitionError::BadCapacity(c));
    }
    if blocks < capacities.len() {
        return Err(PartitionError::TooFewBlocks {
            blocks,
            stages: capacities.len(),
        });
    }
    Ok(())
}

/// Largest-remainder apportionment of `blocks`, each stage at least one.
pub fn largest_remainder(blocks: usize, capacities: &[f64]) -> Result<Vec<usize>> {
    check(blocks, capacities)?;
    let total: f64 = capacities.iter().sum();
    let shares: Vec<f64> = capacities.iter().map(|c| blocks as f64 * c / total).collect();
    let mut sizes: Vec<usize> = shares.iter().map(|s| s.floor() as usize).collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = shares[a] - shares[a].floor();
        let rb = shares[b] - shares[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut left = blocks - sizes.iter().sum::<usize>();
    for &s in order.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[s] += 1;
        left -= 1;
    }
    while let Some(empty) = sizes.iter().position(|&b| b == 0) {
        let donor = (0..sizes.len()).max_by_key(|&s| (sizes[s], std::cmp::Reverse(s))).expect("non-empty");
        sizes[donor] -= 1;
        sizes[empty] += 1;
    }
    Ok(sizes)
}

/// Most blocks stage `s` may hold without exceeding bottleneck `b`.
fn cap_at(b: f64, capacity: f64) -> usize {
    (b * capacity * (1.0 + 1e-12)).floor() as usize
}

/// Smallest achievable bottleneck.
pub fn optimal_bottleneck(blocks: usize, capacities: &[f64]) -> Result<f64> {
    check(blocks, capacities)?;
    let mut candidates: Vec<f64> = capacities
        .iter()
        .flat_map(|&c| (1..=blocks).map(move |n| n as f64 / c))
        .collect();
    candidates.sort_by(f64::total_cmp);
    let feasible = |b: f64| {
        capacities.iter().all(|&c| cap_at(b, c) >= 1)
            && capacities.iter().map(|&c| cap_at(b, c).min(blocks)).sum::<usize>() >= blocks
    };
    let i = candidates.partition_point(|&b| !feasible(b));
    Ok(candidates[i])
}

/// Splits `blocks` encoder blocks into one contiguous range per capacity.
pub fn partition(blocks: usize, capacities: &[f64]) -> Result<Vec<StageSpec>> {
    let mut sizes = largest_remainder(blocks, capacities)?;
    let best = optimal_bottleneck(blocks, capacities)?;
    let limit: Vec<usize> = capacities.iter().map(|&c| cap_at(best, c)).collect();
    for (b, &l) in sizes.iter_mut().zip(&limit) {
        *b = (*b).min(l);
    }
    let mut left = blocks - sizes.iter().sum::<usize>();
    while left > 0 {
        // Stage whose load after one more block stays lowest.
        let s = (0..sizes.len())
            .filter(|&s| sizes[s] < limit[s])
            .min_by(|&a, &b| {
                let la = (sizes[a] + 1) as f64 / capacities[a];
                let lb = (sizes[b] + 1) as f64 / capacities[b];
                la.total_cmp(&lb).then(a.cmp(&b))
            })
            .expect("optimal bottleneck leaves room");
        sizes[s] += 1;
        left -= 1;
    }
    Ok(specs_from_sizes(&sizes))
}

/// Exhaustive minimum bottleneck over all compositions (test oracle).
pub fn brute_force_bottleneck(blocks: usize, capacities: &[f64]) -> Result<f64> {
    check(blocks, capacities)?;
    fn go(left: usize, caps: &[f64], acc: f64, best: &mut f64) {
        if caps.len() == 1 {
            *best = best.min(acc.max(left as f64 / caps[0]));
            return;
        }
        for b in 1..=left - (caps.len() - 1) {
            go(left - b, &caps[1..], acc.max(b as f64 / caps[0]), best);
        }
    }
    let mut best = f64::INFINITY;
    go(blocks, capacities, 0.0, &mut best);
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sizes(specs: &[StageSpec]) -> Vec<usize> {
        specs.iter().map(StageSpec::blocks).collect()
    }

    #[test]
    fn equal_capacities_split_evenly() {
        assert_eq!(sizes(&partition(6, &[1.0, 1.0, 1.0]).unwrap()), [2, 2, 2]);
    }

    #[test]
    fn two_one_one() {
        let p = partition(8, &[2.0, 1.0, 1.0]).unwrap();
        assert_eq!(sizes(&p), [4, 2, 2]);
        assert_eq!(bottleneck(&sizes(&p), &[2.0, 1.0, 1.0]), brute_force_bottleneck(8, &[2.0, 1.0, 1.0]).unwrap());
    }

    #[test]
    fn single_stage() {
        let p = partition(5, &[3.0]).unwrap();
        assert_eq!(p[0].layer_range, 0..5);
        assert!(p[0].is_central);
    }

    #[test]
    fn too_few_blocks() {
        assert_eq!(
            partition(2, &[1.0; 3]),
            Err(PartitionError::TooFewBlocks { blocks: 2, stages: 3 })
        );
        assert!(partition(3, &[1.0, 0.0]).is_err());
    }

    #[test]
    fn every_stage_gets_a_block_even_when_tiny() {
        let p = partition(4, &[100.0, 0.01, 0.01]).unwrap();
        assert_eq!(sizes(&p), [2, 1, 1]);
        assert_eq!(p[2].layer_range, 3..4);
    }

    #[test]
    fn uniform_scaling_does_not_change_partition() {
        let caps = [1.3, 0.7, 2.9];
        let doubled: Vec<f64> = caps.iter().map(|c| c * 2.0).collect();
        assert_eq!(partition(11, &caps).unwrap(), partition(11, &doubled).unwrap());
    }

    #[test]
    fn decision_json_round_trip() {
        let p = partition(6, &[2.0, 1.0]).unwrap();
        let d = PartitionDecision::new(&[2.0, 1.0], &p);
        let back: PartitionDecision = serde_json::from_str(&serde_json::to_string(&d).unwrap()).unwrap();
        assert_eq!(back.stages(), p);
    }
}
