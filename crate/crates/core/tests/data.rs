use acs_core::data::{
    generate_synthetic, inject_label_noise, noisy_recall, pruned_ids, SyntheticSpec,
};
use acs_core::selection::{baseline_select, Baseline, BaselineState};
use proptest::prelude::*;

fn blobs(per_class: usize, seed: u64) -> acs_core::data::Dataset {
    generate_synthetic(&SyntheticSpec {
        classes: 4,
        dims: 3,
        per_class,
        spread: 0.2,
        seed,
    })
    .unwrap()
}

#[test]
fn random_pruning_recall_is_one_minus_fraction() {
    let data = inject_label_noise(&blobs(250, 1), 0.1, 1).unwrap();
    assert_eq!(data.len(), 1000);
    let mut total = 0.0;
    for seed in 0..100 {
        let state = BaselineState {
            n: 1000,
            round: 0,
            epoch: 0,
            el2n_scores: None,
            forgetting: None,
        };
        let c = baseline_select(Baseline::Random, &state, 0.3, seed).unwrap();
        total += noisy_recall(&pruned_ids(1000, c.ids()), data.noisy_ids()).unwrap();
    }
    let mean = total / 100.0;
    assert!((mean - 0.7).abs() <= 0.05, "mean recall {mean}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn noise_only_touches_labels(rho in 0.0f64..0.9, seed in any::<u64>()) {
        let clean = blobs(10, 3);
        let noisy = inject_label_noise(&clean, rho, seed).unwrap();
        prop_assert_eq!(noisy.len(), clean.len());
        prop_assert_eq!(noisy.features(), clean.features());
        let expected = (rho * clean.len() as f64).round() as usize;
        prop_assert_eq!(noisy.noisy_ids().len(), expected);
        for id in 0..clean.len() {
            let changed = noisy.label(id) != clean.label(id);
            prop_assert_eq!(changed, noisy.noisy_ids().contains(&id));
        }
    }
}
