use codream::data::{dirichlet_partition, gen_gaussian_mixture, Concentration};
use proptest::prelude::*;

fn alpha_strategy() -> impl Strategy<Value = f64> {
    prop_oneof![
        0.01f64..0.5,
        0.5f64..5.0,
        5.0f64..100.0,
        Just(f64::INFINITY),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 1000, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn partitions_are_disjoint_complete_and_nonempty(
        k in 2usize..12,
        alpha in alpha_strategy(),
        seed in any::<u64>(),
        classes in 2usize..8,
        extra in 0usize..200,
    ) {
        let n = k + extra;
        let labels: Vec<usize> = (0..n).map(|i| (i * 7 + seed as usize % 5) % classes).collect();
        let plan = dirichlet_partition(&labels, k, Concentration::from_f64(alpha).unwrap(), seed).unwrap();
        prop_assert_eq!(plan.clients.len(), k);
        let mut seen = vec![false; n];
        for shard in &plan.clients {
            prop_assert!(!shard.is_empty());
            for &i in shard {
                prop_assert!(i < n && !seen[i]);
                seen[i] = true;
            }
        }
        prop_assert!(seen.iter().all(|&s| s));
    }
}

#[test]
fn label_entropy_orders_by_concentration() {
    let (mut iid, mut one, mut skew) = (0.0, 0.0, 0.0);
    for seed in 0..20 {
        let data = gen_gaussian_mixture(800, 5, 4, 3.0, seed).unwrap();
        let ent = |alpha: f64| {
            dirichlet_partition(&data.labels, 4, Concentration::from_f64(alpha).unwrap(), seed)
                .unwrap()
                .mean_label_entropy(&data.labels, 5)
        };
        iid += ent(f64::INFINITY);
        one += ent(1.0);
        skew += ent(0.1);
    }
    assert!(iid > one && one > skew, "entropies {iid} {one} {skew}");
}
