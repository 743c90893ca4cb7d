//! Attention-head allocation across lanes.
//!
//! [`allocate`] binary-searches a target completion time `mid` in
//! `[0, min_j T[j][K]]`. For each candidate it picks, per lane, the head count
//! whose profiled time is closest to `mid`, dropping lanes that miss by more
//! than `ε`; the candidate is feasible when the picked counts cover all `K`
//! heads. The last feasible pick is trimmed down to exactly `K` heads.
//! [`brute_force_allocate`] enumerates every split and is the test oracle.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lanes::ProfileTable;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SchedulerError {
    #[error("profile table has no time for lane {lane} with {k} heads")]
    IncompleteTable { lane: usize, k: usize },
    #[error("profile table has no lanes")]
    NoLanes,
    #[error("{0} compositions exceed the enumeration limit")]
    TooLarge(u128),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

pub type Result<T> = std::result::Result<T, SchedulerError>;

/// Upper bound on splits [`brute_force_allocate`] will enumerate.
pub const BRUTE_FORCE_LIMIT: u128 = 10_000_000;

/// Dense `T[j][k]` view of a profile table, `times[j][k - 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeTable {
    pub lane_ids: Vec<usize>,
    pub times: Vec<Vec<f64>>,
}

impl TimeTable {
    pub fn new(times: Vec<Vec<f64>>) -> Self {
        Self {
            lane_ids: (0..times.len()).collect(),
            times,
        }
    }

    /// Extracts `k = 1..=heads` for every lane of `table`.
    pub fn from_profile(table: &ProfileTable, heads: usize) -> Result<Self> {
        if table.lanes.is_empty() {
            return Err(SchedulerError::NoLanes);
        }
        let mut times = Vec::with_capacity(table.lanes.len());
        for lane in &table.lanes {
            let row = (1..=heads)
                .map(|k| {
                    table
                        .time(lane.id, k)
                        .ok_or(SchedulerError::IncompleteTable { lane: lane.id, k })
                })
                .collect::<Result<Vec<_>>>()?;
            times.push(row);
        }
        Ok(Self {
            lane_ids: table.lane_ids(),
            times,
        })
    }

    pub fn lanes(&self) -> usize {
        self.times.len()
    }

    /// `T[j][k]` for `k >= 1`.
    pub fn at(&self, j: usize, k: usize) -> f64 {
        self.times[j][k - 1]
    }

    fn check(&self, heads: usize) -> Result<()> {
        if self.times.is_empty() {
            return Err(SchedulerError::NoLanes);
        }
        for (j, row) in self.times.iter().enumerate() {
            if row.len() < heads {
                return Err(SchedulerError::IncompleteTable {
                    lane: self.lane_ids[j],
                    k: row.len() + 1,
                });
            }
        }
        Ok(())
    }

    /// Completion time of a per-lane head split; idle lanes cost nothing.
    pub fn makespan(&self, counts: &[usize]) -> f64 {
        counts
            .iter()
            .enumerate()
            .filter(|&(_, &k)| k > 0)
            .map(|(j, &k)| self.at(j, k))
            .fold(0.0, f64::max)
    }

    /// `min_j T[j][K]`, the best single-lane time.
    pub fn best_single_lane(&self, heads: usize) -> (usize, f64) {
        self.times
            .iter()
            .enumerate()
            .map(|(j, row)| (j, row[heads - 1]))
            .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocationEntry {
    pub lane: usize,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationPlan {
    pub epsilon_ms: f64,
    pub sigma_ms: f64,
    pub entries: Vec<AllocationEntry>,
    pub makespan_ms: f64,
}

impl AllocationPlan {
    pub fn total_heads(&self) -> usize {
        self.entries.iter().map(|e| e.k).sum()
    }

    pub fn heads_for(&self, lane: usize) -> usize {
        self.entries.iter().find(|e| e.lane == lane).map_or(0, |e| e.k)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        serde_json::from_str(s)
    }
}

/// Counters from one binary search, for inspection in tests and logs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchTrace {
    pub iterations: usize,
    pub initial_upper_ms: f64,
    pub found_valid: bool,
    pub trimmed: usize,
}

/// Feasibility probe for target time `mid`. Returns whether the per-lane
/// counts sum to at least `K`, and the counts themselves.
pub fn is_valid(mid: f64, heads: usize, table: &TimeTable, epsilon: f64) -> (bool, Vec<usize>) {
    let mut counts = Vec::with_capacity(table.lanes());
    let mut total = 0;
    for j in 0..table.lanes() {
        let mut best_k = 1;
        let mut best_gap = (table.at(j, 1) - mid).abs();
        for k in 2..=heads {
            let gap = (table.at(j, k) - mid).abs();
            if gap < best_gap {
                best_gap = gap;
                best_k = k;
            }
        }
        let k = if best_gap > epsilon { 0 } else { best_k };
        total += k;
        counts.push(k);
    }
    (total >= heads, counts)
}

/// Default tolerances: `ε` is 5% of the best single-lane time, `σ = ε / 10`.
pub fn default_tolerances(table: &TimeTable, heads: usize) -> (f64, f64) {
    let eps = 0.05 * table.best_single_lane(heads).1;
    (eps, eps / 10.0)
}

pub fn allocate(table: &TimeTable, heads: usize, epsilon: f64, sigma: f64) -> Result<AllocationPlan> {
    allocate_traced(table, heads, epsilon, sigma).map(|(p, _)| p)
}

pub fn allocate_default(table: &TimeTable, heads: usize) -> Result<AllocationPlan> {
    table.check(heads.max(1))?;
    let (eps, sigma) = default_tolerances(table, heads);
    allocate(table, heads, eps, sigma)
}

pub fn allocate_traced(
    table: &TimeTable,
    heads: usize,
    epsilon: f64,
    sigma: f64,
) -> Result<(AllocationPlan, SearchTrace)> {
    if heads == 0 {
        return Err(SchedulerError::InvalidParameter("K must be at least 1".into()));
    }
    if !(epsilon > 0.0 && epsilon.is_finite()) || !(sigma > 0.0 && sigma.is_finite()) {
        return Err(SchedulerError::InvalidParameter(format!(
            "ε = {epsilon}, σ = {sigma}; both must be positive"
        )));
    }
    table.check(heads)?;

    let (fastest, r0) = table.best_single_lane(heads);
    let mut lo = 0.0;
    let mut hi = r0;
    let mut chosen: Option<Vec<usize>> = None;
    let mut iterations = 0;
    while lo <= hi {
        iterations += 1;
        let mid = (lo + hi) / 2.0;
        let (ok, counts) = is_valid(mid, heads, table, epsilon);
        if ok {
            chosen = Some(counts);
            hi = mid - sigma;
        } else {
            lo = mid + sigma;
        }
    }

    let found_valid = chosen.is_some();
    let mut counts = chosen.unwrap_or_else(|| {
        let mut c = vec![0; table.lanes()];
        c[fastest] = heads;
        c
    });
    let trimmed = trim(table, &mut counts, heads);
    let plan = AllocationPlan {
        epsilon_ms: epsilon,
        sigma_ms: sigma,
        makespan_ms: table.makespan(&counts),
        entries: table
            .lane_ids
            .iter()
            .zip(&counts)
            .map(|(&lane, &k)| AllocationEntry { lane, k })
            .collect(),
    };
    Ok((
        plan,
        SearchTrace {
            iterations,
            initial_upper_ms: r0,
            found_valid,
            trimmed,
        },
    ))
}

/// Removes surplus heads one at a time from the lane whose current time is
/// largest (first such lane on ties). Returns the number removed.
fn trim(table: &TimeTable, counts: &mut [usize], heads: usize) -> usize {
    let mut removed = 0;
    while counts.iter().sum::<usize>() > heads {
        let mut worst = None;
        for (j, &k) in counts.iter().enumerate() {
            if k == 0 {
                continue;
            }
            let t = table.at(j, k);
            if worst.is_none_or(|(_, wt)| t > wt) {
                worst = Some((j, t));
            }
        }
        let (j, _) = worst.expect("surplus implies a busy lane");
        counts[j] -= 1;
        removed += 1;
    }
    removed
}

/// Number of ways to split `heads` over `lanes` with zeros allowed.
pub fn composition_count(heads: usize, lanes: usize) -> u128 {
    if lanes == 0 {
        return 0;
    }
    // C(heads + lanes - 1, lanes - 1)
    let n = (heads + lanes - 1) as u128;
    let r = (lanes - 1).min(heads) as u128;
    let mut acc: u128 = 1;
    for i in 0..r {
        acc = acc * (n - i) / (i + 1);
    }
    acc
}

/// Exhaustive minimum-makespan split. Ties go to the lexicographically
/// smallest count vector.
pub fn brute_force_allocate(table: &TimeTable, heads: usize) -> Result<AllocationPlan> {
    if heads == 0 {
        return Err(SchedulerError::InvalidParameter("K must be at least 1".into()));
    }
    table.check(heads)?;
    let total = composition_count(heads, table.lanes());
    if total > BRUTE_FORCE_LIMIT {
        return Err(SchedulerError::TooLarge(total));
    }
    let m = table.lanes();
    let mut counts = vec![0usize; m];
    let mut best: Option<(f64, Vec<usize>)> = None;
    enumerate(table, 0, heads, &mut counts, &mut best);
    let (makespan, counts) = best.expect("at least one composition");
    debug_assert_eq!(counts.iter().sum::<usize>(), heads);
    Ok(AllocationPlan {
        epsilon_ms: 0.0,
        sigma_ms: 0.0,
        makespan_ms: makespan,
        entries: table
            .lane_ids
            .iter()
            .zip(&counts)
            .map(|(&lane, &k)| AllocationEntry { lane, k })
            .collect(),
    })
}

fn enumerate(
    table: &TimeTable,
    j: usize,
    remaining: usize,
    counts: &mut Vec<usize>,
    best: &mut Option<(f64, Vec<usize>)>,
) {
    let m = counts.len();
    if j == m - 1 {
        counts[j] = remaining;
        let ms = table.makespan(counts);
        if best.as_ref().is_none_or(|(b, _)| ms < *b) {
            *best = Some((ms, counts.clone()));
        }
        return;
    }
    for k in 0..=remaining {
        counts[j] = k;
        enumerate(table, j + 1, remaining - k, counts, best);
    }
    counts[j] = 0;
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear(m: usize, k: usize) -> TimeTable {
        TimeTable::new(vec![(1..=k).map(|v| v as f64).collect(); m])
    }

    #[test]
    fn is_valid_single_lane_at_full_k() {
        let t = TimeTable::new(vec![vec![1.0, 2.0, 3.0, 4.0]]);
        assert_eq!(is_valid(4.0, 4, &t, 0.5), (true, vec![4]));
    }

    #[test]
    fn is_valid_linear_tables() {
        let t = linear(2, 12);
        assert_eq!(is_valid(6.0, 12, &t, 0.5), (true, vec![6, 6]));
        assert_eq!(is_valid(2.0, 12, &t, 0.5), (false, vec![2, 2]));
    }

    #[test]
    fn is_valid_ties_prefer_fewer_heads_and_bypasses_far_lanes() {
        let t = TimeTable::new(vec![vec![1.0, 2.0], vec![10.0, 20.0]]);
        // 1.5 is equidistant from 1 and 2
        assert_eq!(is_valid(1.5, 2, &t, 0.6), (false, vec![1, 0]));
    }

    #[test]
    fn single_lane_gets_everything() {
        let t = TimeTable::new(vec![vec![2.0, 3.0, 5.0]]);
        let p = allocate(&t, 3, 0.25, 0.025).unwrap();
        assert_eq!(p.entries, vec![AllocationEntry { lane: 0, k: 3 }]);
        assert_eq!(p.makespan_ms, 5.0);
        let b = brute_force_allocate(&t, 3).unwrap();
        assert_eq!(b.entries, p.entries);
    }

    #[test]
    fn two_linear_lanes_split_evenly() {
        let t = linear(2, 12);
        let p = allocate(&t, 12, 0.5, 0.25).unwrap();
        assert_eq!(p.entries, vec![AllocationEntry { lane: 0, k: 6 }, AllocationEntry { lane: 1, k: 6 }]);
        assert_eq!(p.makespan_ms, 6.0);
        assert_eq!(brute_force_allocate(&t, 12).unwrap().makespan_ms, 6.0);
    }

    #[test]
    fn brute_force_prefers_fast_lane_when_mixing_does_not_help() {
        let t = TimeTable::new(vec![
            (1..=4).map(|k| k as f64).collect(),
            (1..=4).map(|k| 10.0 * k as f64).collect(),
        ]);
        let b = brute_force_allocate(&t, 4).unwrap();
        // any head on lane 2 costs at least 10 > T[1][4] = 4
        assert_eq!(b.makespan_ms, 4.0);
        assert_eq!(b.entries[0].k, 4);
        assert_eq!(b.entries[1].k, 0);
    }

    #[test]
    fn trim_removes_from_slowest_entry() {
        let t = TimeTable::new(vec![vec![1.0, 2.0, 3.0], vec![1.5, 2.5, 4.0]]);
        let mut c = vec![2, 3];
        assert_eq!(trim(&t, &mut c, 3), 2);
        // 4.0 (lane 1 @3) goes first, then 2.5 (lane 1 @2) vs 2.0 → lane 1 again
        assert_eq!(c, vec![2, 1]);
    }

    #[test]
    fn fallback_when_nothing_is_valid() {
        // ε too small to ever hit a profiled time exactly
        let t = TimeTable::new(vec![vec![10.0, 20.0], vec![7.0, 30.0]]);
        let (p, trace) = allocate_traced(&t, 2, 1e-9, 1e-3).unwrap();
        assert!(!trace.found_valid);
        assert_eq!(p.entries, vec![AllocationEntry { lane: 0, k: 2 }, AllocationEntry { lane: 1, k: 0 }]);
        assert_eq!(p.makespan_ms, 20.0);
    }

    #[test]
    fn incomplete_table_rejected() {
        let t = TimeTable::new(vec![vec![1.0, 2.0]]);
        assert_eq!(
            allocate(&t, 3, 0.1, 0.01).unwrap_err(),
            SchedulerError::IncompleteTable { lane: 0, k: 3 }
        );
        let p = ProfileTable::from_times(&[vec![1.0, 2.0]]);
        assert!(matches!(TimeTable::from_profile(&p, 3), Err(SchedulerError::IncompleteTable { .. })));
    }

    #[test]
    fn bad_parameters_rejected() {
        let t = linear(1, 2);
        assert!(allocate(&t, 2, 0.0, 0.1).is_err());
        assert!(allocate(&t, 2, 0.1, -1.0).is_err());
        assert!(allocate(&t, 0, 0.1, 0.1).is_err());
    }

    #[test]
    fn composition_counts() {
        assert_eq!(composition_count(12, 1), 1);
        assert_eq!(composition_count(12, 2), 13);
        assert_eq!(composition_count(12, 4), 455);
        assert_eq!(composition_count(3, 3), 10);
        let t = linear(12, 40);
        assert!(matches!(brute_force_allocate(&t, 40), Err(SchedulerError::TooLarge(_))));
    }

    #[test]
    fn plan_json_round_trip() {
        let p = allocate(&linear(2, 12), 12, 0.5, 0.25).unwrap();
        let j = p.to_json();
        assert!(j.contains("epsilon_ms") && j.contains("makespan_ms"));
        assert_eq!(AllocationPlan::from_json(&j).unwrap(), p);
    }
}
