mod common;

use std::collections::BTreeSet;

use acs_core::data::{noisy_recall, pruned_ids};
use acs_core::experiment::{
    export_score_histogram, prepare, run_qat, run_qat_with, run_sweep, timing_breakdown, Phase,
    RunConfig, ScoreKind, SweepAxis, SweepSeeds,
};
use acs_core::network::{checkpoint_bytes, load_checkpoint};
use acs_core::scoring::{AnnealingStrategy, ScoreRecord};
use acs_core::selection::Selector;
use acs_core::ErrorKind;
use common::small_config;

#[test]
fn identical_configs_give_identical_runs() {
    let c = small_config();
    let a = run_qat(&c).unwrap();
    let b = run_qat(&c).unwrap();
    assert_eq!(a.metrics.to_csv_string(), b.metrics.to_csv_string());
    assert_eq!(a.coresets, b.coresets);
    assert_eq!(
        checkpoint_bytes(&a.model, "s"),
        checkpoint_bytes(&b.model, "s")
    );
}

#[test]
fn coreset_changes_only_on_selection_epochs() {
    let c = small_config();
    let r = run_qat(&c).unwrap();
    let epochs: Vec<usize> = r.coresets.iter().map(|c| c.epoch_created).collect();
    assert_eq!(epochs, vec![0, 3, 6, 9]);
    for row in &r.metrics.rows {
        let expect = if row.epoch % 3 == 0 {
            Phase::Select
        } else {
            Phase::Carry
        };
        assert_eq!(row.phase, expect, "epoch {}", row.epoch);
    }
    assert_eq!(r.counters.selection_rounds, 4);
    assert_eq!(r.counters.scoring_forwards, 4 * 96);
}

#[test]
fn full_fraction_matches_full_data_selector() {
    let mut acs = small_config();
    acs.qat.fraction = 1.0;
    let mut full = acs.clone();
    full.qat.selector = Selector::Full;
    let prepared = prepare(&acs).unwrap();
    let a = run_qat_with(&acs, &prepared).unwrap();
    let b = run_qat_with(&full, &prepared).unwrap();
    assert_eq!(a.metrics.to_csv_string(), b.metrics.to_csv_string());
    assert_eq!(
        checkpoint_bytes(&a.model, "s"),
        checkpoint_bytes(&b.model, "s")
    );
}

#[test]
fn interval_equal_to_epochs_selects_once_by_error_vector() {
    let mut c = small_config();
    c.qat.interval = c.qat.epochs;
    let r = run_qat(&c).unwrap();
    assert_eq!(r.rounds.len(), 1);
    assert_eq!(r.rounds[0].beta, Some(1.0));
    assert!(r.scores[0].iter().all(|s| s.d_acs == s.d_evs));
}

#[test]
fn without_distillation_only_error_vector_is_used() {
    let mut c = small_config();
    c.qat.kd = false;
    c.qat.strategy = AnnealingStrategy::DsOnly;
    let r = run_qat(&c).unwrap();
    assert_eq!(r.strategy, AnnealingStrategy::EvsOnly);
    assert!(r.scores.iter().flatten().all(|s| s.d_ds.is_none()));
}

#[test]
fn invalid_config_is_rejected() {
    let mut c = small_config();
    c.qat.interval = 11;
    assert_eq!(run_qat(&c).unwrap_err().kind(), ErrorKind::Config);
    let mut c = small_config();
    c.qat.fraction = 0.0;
    assert_eq!(run_qat(&c).unwrap_err().kind(), ErrorKind::Config);
    let mut c = small_config();
    c.model.bits_w = 1;
    assert_eq!(run_qat(&c).unwrap_err().kind(), ErrorKind::Config);
    assert_eq!(
        RunConfig::from_toml("seed = 1\nbogus = 2")
            .unwrap_err()
            .kind(),
        ErrorKind::Config
    );
}

#[test]
fn divergence_aborts_and_keeps_last_good_model() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small_config();
    c.qat.lr = 1e300;
    c.out_dir = Some(dir.path().to_path_buf());
    let err = run_qat(&c).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Run);
    let (model, role) = load_checkpoint(dir.path().join("last_good.ckpt")).unwrap();
    assert_eq!(role, "student");
    assert!(model
        .layers()
        .iter()
        .all(|l| l.weight.values().iter().all(|v| v.is_finite())));
}

#[test]
fn every_baseline_runs() {
    let c = small_config();
    let prepared = prepare(&c).unwrap();
    for sel in [
        Selector::Random,
        Selector::El2n,
        Selector::Forgetting,
        Selector::FullCoverage,
        Selector::Full,
    ] {
        let mut cfg = c.clone();
        cfg.qat.selector = sel;
        let r = run_qat_with(&cfg, &prepared).unwrap();
        assert_eq!(r.metrics.rows.len(), 10, "{sel}");
        let size = if sel == Selector::Full { 96 } else { 28 };
        if sel == Selector::FullCoverage {
            // 96 = 3 * 28 + 12
            let sizes: Vec<usize> = r.coresets.iter().map(|c| c.len()).collect();
            assert_eq!(sizes, vec![28, 28, 28, 12]);
        } else {
            assert!(r.coresets.iter().all(|c| c.len() == size), "{sel}");
        }
        assert_eq!(r.counters.scoring_forwards, 0);
    }
}

#[test]
fn full_coverage_visits_every_sample_once_per_cycle() {
    let mut c = small_config();
    c.qat.selector = Selector::FullCoverage;
    c.qat.fraction = 0.25;
    c.qat.epochs = 8;
    c.qat.interval = 2;
    let r = run_qat(&c).unwrap();
    let mut seen = BTreeSet::new();
    for cs in &r.coresets {
        for &id in cs.ids() {
            assert!(seen.insert(id), "id {id} repeated within a cycle");
        }
    }
    assert_eq!(seen.len(), 96);
}

#[test]
fn step_budget_sets_the_epoch_count() {
    let mut c = small_config();
    c.qat.step_budget = Some(20);
    c.qat.interval = 2;
    // 28 samples at batch 16 -> 2 steps per epoch
    let r = run_qat(&c).unwrap();
    assert_eq!(r.epochs, 10);
    assert_eq!(r.metrics.rows.iter().map(|r| r.steps).sum::<usize>(), 20);

    c.qat.fraction = 0.6;
    let r = run_qat(&c).unwrap();
    // 57 samples -> 4 steps per epoch
    assert_eq!(r.epochs, 5);
}

#[test]
fn final_round_recall_matches_complement_of_final_coreset() {
    let mut c = small_config();
    c.noise = 0.1;
    let prepared = prepare(&c).unwrap();
    assert_eq!(prepared.train.noisy_ids().len(), 10);
    let r = run_qat_with(&c, &prepared).unwrap();
    let last = r.coresets.last().unwrap();
    let expected = noisy_recall(&pruned_ids(96, last.ids()), prepared.train.noisy_ids()).unwrap();
    assert_eq!(r.final_recall(), Some(expected));
}

#[test]
fn timing_parts_fit_in_the_total() {
    let r = run_qat(&small_config()).unwrap();
    let t = timing_breakdown(&r.metrics);
    assert!(t.selection >= 0.0 && t.training > 0.0);
    assert!(t.selection + t.training <= t.total);
}

#[test]
fn interval_sweep_reduces_selection_work() {
    let mut base = small_config();
    base.qat.epochs = 20;
    let prepared = prepare(&base).unwrap();
    let values: Vec<String> = ["5", "10", "20"].iter().map(|s| s.to_string()).collect();
    let rows = run_sweep(
        &base,
        &prepared,
        SweepAxis::Interval,
        &values,
        SweepSeeds::Derived,
    );
    assert_eq!(rows.len(), 3);
    let forwards: Vec<u64> = rows
        .iter()
        .map(|r| r.outcome.as_ref().unwrap().counters.scoring_forwards)
        .collect();
    assert_eq!(forwards, vec![4 * 96, 2 * 96, 96]);
    let seeds: BTreeSet<u64> = rows.iter().map(|r| r.seed).collect();
    assert_eq!(seeds.len(), 3);
}

#[test]
fn sweep_records_failures_and_continues() {
    let base = small_config();
    let prepared = prepare(&base).unwrap();
    let values: Vec<String> = ["0.2", "1.7", "x", "0.5"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let rows = run_sweep(
        &base,
        &prepared,
        SweepAxis::Fraction,
        &values,
        SweepSeeds::Shared,
    );
    let ok: Vec<bool> = rows.iter().map(|r| r.outcome.is_ok()).collect();
    assert_eq!(ok, vec![true, false, false, true]);
    assert!(rows.iter().all(|r| r.seed == base.seed));
}

#[test]
fn strategy_sweep_covers_all_variants() {
    let base = small_config();
    let prepared = prepare(&base).unwrap();
    let values: Vec<String> = AnnealingStrategy::ALL
        .iter()
        .map(|s| s.to_string())
        .collect();
    let rows = run_sweep(
        &base,
        &prepared,
        SweepAxis::Strategy,
        &values,
        SweepSeeds::Derived,
    );
    assert_eq!(rows.len(), 7);
    assert!(rows.iter().all(|r| r.outcome.is_ok()));
}

fn records(values: &[f64], epoch: usize) -> Vec<ScoreRecord> {
    values
        .iter()
        .enumerate()
        .map(|(i, &v)| ScoreRecord {
            sample_id: i,
            epoch,
            d_evs: v,
            d_ds: Some(v),
            d_acs: v,
        })
        .collect()
}

#[test]
fn histogram_of_zeros_has_one_bin() {
    let h = export_score_histogram(&records(&[0.0; 50], 3), 3, 8, ScoreKind::Acs).unwrap();
    assert_eq!(h[0].count, 50);
    assert!(h[1..].iter().all(|b| b.count == 0));
}

#[test]
fn histogram_counts_are_conserved() {
    let vals: Vec<f64> = (0..100).map(|i| i as f64 * 0.0141).collect();
    let h = export_score_histogram(&records(&vals, 0), 0, 10, ScoreKind::Ds).unwrap();
    assert_eq!(h.iter().map(|b| b.count).sum::<usize>(), 100);
    assert_eq!(h.last().unwrap().hi, std::f64::consts::SQRT_2);
}

#[test]
fn histogram_of_uniform_scores_is_flat() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    let vals: Vec<f64> = (0..10_000)
        .map(|_| rng.gen_range(0.0..std::f64::consts::SQRT_2))
        .collect();
    let h = export_score_histogram(&records(&vals, 0), 0, 10, ScoreKind::Evs).unwrap();
    let max = h.iter().map(|b| b.count).max().unwrap() as f64;
    let min = h.iter().map(|b| b.count).min().unwrap() as f64;
    assert!(max / min < 2.0);
}

#[test]
fn histogram_of_missing_epoch_is_an_input_error() {
    let err = export_score_histogram(&records(&[0.1], 0), 4, 10, ScoreKind::Acs).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Input);
}
