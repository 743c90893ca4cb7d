use headpipe::lanes::isotonic_repair;
use headpipe::scheduler::{
    allocate_traced, brute_force_allocate, default_tolerances, AllocationPlan, TimeTable,
};
use proptest::prelude::*;

fn table_strategy() -> impl Strategy<Value = (TimeTable, usize)> {
    (1usize..=4, 1usize..=12).prop_flat_map(|(m, k)| {
        prop::collection::vec(
            (0.0f64..5.0, 0.5f64..4.0, prop::collection::vec(0.9f64..1.1, k)),
            m,
        )
        .prop_map(move |lanes| {
            let times = lanes
                .into_iter()
                .map(|(base, slope, jitter)| {
                    let mut row: Vec<f64> =
                        jitter.iter().enumerate().map(|(i, j)| base + slope * (i + 1) as f64 * j).collect();
                    isotonic_repair(&mut row);
                    row
                })
                .collect();
            (TimeTable::new(times), k)
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn plan_is_feasible_and_bounded((table, k) in table_strategy()) {
        let (eps, sigma) = default_tolerances(&table, k);
        let (plan, trace) = allocate_traced(&table, k, eps, sigma).unwrap();
        prop_assert_eq!(plan.total_heads(), k);
        let counts: Vec<usize> = (0..table.lanes()).map(|j| plan.heads_for(j)).collect();
        prop_assert!((table.makespan(&counts) - plan.makespan_ms).abs() < 1e-9);
        let oracle = brute_force_allocate(&table, k).unwrap();
        prop_assert!(plan.makespan_ms >= oracle.makespan_ms - 1e-9);
        prop_assert!(plan.makespan_ms <= table.best_single_lane(k).1 + eps + 1e-9);
        let bound = ((trace.initial_upper_ms + sigma) / sigma).log2().ceil() as usize + 1;
        prop_assert!(trace.iterations <= bound);
    }

    #[test]
    fn allocation_is_deterministic_and_serializable((table, k) in table_strategy()) {
        let (eps, sigma) = default_tolerances(&table, k);
        let a = allocate_traced(&table, k, eps, sigma).unwrap().0;
        let b = allocate_traced(&table, k, eps, sigma).unwrap().0;
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(AllocationPlan::from_json(&a.to_json()).unwrap(), a);
    }
}

#[test]
fn zero_heads_rejected() {
    let t = TimeTable::new(vec![vec![1.0, 2.0]]);
    assert!(allocate_traced(&t, 0, 0.1, 0.01).is_err());
}
