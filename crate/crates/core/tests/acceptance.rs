//! Acceptance suite, run without the libtest harness so every criterion
//! prints its `criterion N: PASS|FAIL ...` line. Criteria run one after
//! another so the timing checks are not disturbed. Pass criterion numbers as
//! arguments to run a subset.

mod common;

use std::collections::BTreeSet;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use acs_core::data::{generate_synthetic, SyntheticSpec};
use acs_core::experiment::{prepare, run_qat, run_qat_with, RunConfig};
use acs_core::network::{backward, forward, init_model, predict, Mode, Model};
use acs_core::numerics::{cross_entropy, ProbVector, Tensor2};
use acs_core::quant::{quantize, ste_gradient, QuantConfig};
use acs_core::scoring::{
    acs_score, beta, ds, evs, grad_norm_oracle, spearman, AnnealingStrategy, ScoreRecord,
};
use acs_core::selection::{coreset_overlap, full_coverage_blocks, select_topk, Coreset, Selector};

type Verdict = (bool, String);

fn random_quant(rng: &mut ChaCha8Rng) -> QuantConfig {
    let signed = rng.gen_bool(0.5);
    let bits = rng.gen_range(if signed { 2 } else { 1 }..=8);
    let scale = 10f64.powf(rng.gen_range(-3.0..1.0));
    QuantConfig::new(bits, signed)
        .unwrap()
        .with_scale(scale)
        .unwrap()
}

fn levels(c: &QuantConfig) -> (f64, f64) {
    (c.q_n() as f64, c.q_p() as f64)
}

fn sample_value(rng: &mut ChaCha8Rng, c: &QuantConfig) -> f64 {
    let (qn, qp) = levels(c);
    let s = c.scale().unwrap();
    rng.gen_range(-(qn + 3.0) * s..(qp + 3.0) * s)
}

fn criterion_01_quantizer_suite() -> Verdict {
    const CASES: usize = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let start = Instant::now();
    let mut failures = [0usize; 5];
    for _ in 0..CASES {
        let c = random_quant(&mut rng);
        let s = c.scale().unwrap();
        let (qn, qp) = levels(&c);
        let v = sample_value(&mut rng, &c);
        let q = quantize(v, &c).unwrap();

        if quantize(q, &c).unwrap() != q {
            failures[0] += 1;
        }

        let w = sample_value(&mut rng, &c);
        let (lo, hi) = if v <= w { (v, w) } else { (w, v) };
        if quantize(lo, &c).unwrap() > quantize(hi, &c).unwrap() {
            failures[1] += 1;
        }

        let r = (v / s).clamp(-qn, qp) * s;
        let in_range = (-qn..=qp).contains(&(v / s));
        if in_range && (r - q).abs() > s / 2.0 * (1.0 + 1e-12) {
            failures[2] += 1;
        }

        let code = q / s;
        if code < -qn - 1e-9 || code > qp + 1e-9 || (code - code.round()).abs() > 1e-9 {
            failures[3] += 1;
        }

        let upstream = rng.gen_range(-2.0..2.0);
        let expected = if in_range { upstream } else { 0.0 };
        if ste_gradient(v, upstream, &c).unwrap() != expected {
            failures[4] += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let total: usize = failures.iter().sum();
    (
        total == 0 && secs < 5.0,
        format!(
            "{CASES} cases x 5 properties, failures [idem, mono, err, range, ste] = {failures:?}, {secs:.3}s (< 5s)"
        ),
    )
}

fn loss(model: &Model, x: &Tensor2, t: &[ProbVector]) -> f64 {
    predict(model, x, Mode::Fp)
        .unwrap()
        .iter()
        .zip(t)
        .map(|(p, y)| cross_entropy(p, y).unwrap())
        .sum()
}

fn criterion_02_gradient_fidelity() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    let h = 1e-6;
    for pair in 0..20 {
        let depth = rng.gen_range(1..=3);
        let mut arch = vec![rng.gen_range(2..=6)];
        for _ in 0..depth {
            arch.push(rng.gen_range(2..=8));
        }
        arch.push(rng.gen_range(2..=5));
        let mut model = init_model(&arch, 100 + pair).unwrap();
        // zero init biases can park a whole layer exactly on the ReLU kink
        for tensor in model.params_mut() {
            for v in tensor.iter_mut() {
                *v += rng.gen_range(-0.2..0.2);
            }
        }
        let batch = rng.gen_range(1..=4);
        let xs: Vec<f64> = (0..batch * arch[0])
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let x = Tensor2::new(batch, arch[0], xs).unwrap();
        let classes = *arch.last().unwrap();
        let t: Vec<ProbVector> = (0..batch)
            .map(|_| {
                let raw: Vec<f64> = (0..classes).map(|_| rng.gen_range(0.05..1.0)).collect();
                let z: f64 = raw.iter().sum();
                ProbVector::new(raw.iter().map(|v| v / z).collect()).unwrap()
            })
            .collect();
        let trace = forward(&model, &x, Mode::Fp).unwrap();
        let analytic = backward(&model, &trace, &t).unwrap();
        for (k, tensor) in analytic.tensors().iter().enumerate() {
            for (i, &a) in tensor.iter().enumerate() {
                let mut plus = model.clone();
                plus.params_mut()[k][i] += h;
                let mut minus = model.clone();
                minus.params_mut()[k][i] -= h;
                let n = (loss(&plus, &x, &t) - loss(&minus, &x, &t)) / (2.0 * h);
                let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-4);
                worst = worst.max(rel);
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    (
        worst < 1e-5 && secs < 30.0,
        format!("20 model/batch pairs, max relative error {worst:.2e} (< 1e-5, floor 1e-4 on the denominator), {secs:.2}s (< 30s)"),
    )
}

fn random_prob(rng: &mut ChaCha8Rng, m: usize) -> ProbVector {
    match rng.gen_range(0..4) {
        0 => ProbVector::one_hot(rng.gen_range(0..m), m).unwrap(),
        1 => ProbVector::uniform(m),
        _ => {
            let raw: Vec<f64> = (0..m)
                .map(|_| rng.gen::<f64>().powi(rng.gen_range(1..6)))
                .collect();
            let z: f64 = raw.iter().sum();
            if z == 0.0 {
                ProbVector::uniform(m)
            } else {
                let v: Vec<f64> = raw.iter().map(|r| r / z).collect();
                ProbVector::new(v).unwrap()
            }
        }
    }
}

fn criterion_03_score_bounds_and_endpoints() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let root2 = std::f64::consts::SQRT_2;
    let mut failures = 0usize;
    let cases = 100_000;
    for _ in 0..cases {
        let m = rng.gen_range(1..=12);
        let p = random_prob(&mut rng, m);
        let t = random_prob(&mut rng, m);
        let y = ProbVector::one_hot(rng.gen_range(0..m), m).unwrap();
        let e = evs(&p, &y).unwrap();
        let d = ds(&p, &t).unwrap();
        if !(0.0..=root2).contains(&e) || !(0.0..=root2).contains(&d) {
            failures += 1;
        }
        let b: f64 = rng.gen();
        let a = acs_score(e, d, b);
        if a < e.min(d) || a > e.max(d) {
            failures += 1;
        }
    }
    let mut endpoint_failures = 0;
    for total in 1..=500 {
        if beta(0, total, AnnealingStrategy::Cosine).unwrap() != 1.0
            || beta(total, total, AnnealingStrategy::Cosine).unwrap() != 0.0
        {
            endpoint_failures += 1;
        }
    }
    (
        failures == 0 && endpoint_failures == 0,
        format!("{cases} random vector pairs, {failures} bound failures; cosine beta endpoints over E=1..500, {endpoint_failures} failures"),
    )
}

fn criterion_04_evs_tracks_gradient_norm() -> Verdict {
    // the desk model and blob task of the noise experiment, untrained
    let desk = noise_config();
    let acs_core::data::DataSource::Synthetic { spec, .. } = &desk.data else {
        panic!("noise config uses synthetic data");
    };
    let start = Instant::now();
    let mut rhos = Vec::new();
    for seed in 0..5u64 {
        let data = generate_synthetic(&SyntheticSpec {
            per_class: 64 / spec.classes,
            seed: 40 + seed,
            ..*spec
        })
        .unwrap();
        let mut arch = vec![spec.dims];
        arch.extend(&desk.model.hidden);
        arch.push(spec.classes);
        let mut model = init_model(&arch, 50 + seed).unwrap();
        model.attach_quantizers(&desk.quant_spec()).unwrap();
        model.calibrate_weight_scales().unwrap();
        let probs = predict(&model, data.features(), Mode::Quant).unwrap();
        let mut e = Vec::new();
        let mut g = Vec::new();
        for (id, p) in probs.iter().enumerate() {
            let y = data.one_hot(id);
            e.push(evs(p, &y).unwrap());
            g.push(grad_norm_oracle(&model, data.feature(id), &y, Mode::Quant).unwrap());
        }
        rhos.push(spearman(&e, &g).unwrap());
    }
    let mean = rhos.iter().sum::<f64>() / rhos.len() as f64;
    let secs = start.elapsed().as_secs_f64();
    (
        mean >= 0.6 && secs < 60.0,
        format!("64 samples x 5 seeds on an untrained {:?} model, Spearman per seed {rhos:.3?}, mean {mean:.3} (>= 0.6), {secs:.2}s", desk.model.hidden),
    )
}

fn brute_force_topk(scores: &[f64], fraction: f64) -> Vec<usize> {
    let n = scores.len();
    let k = ((fraction * n as f64 + 1e-9).floor() as usize).max(1);
    let mut ids: Vec<usize> = (0..n).collect();
    ids.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut top = ids[..k].to_vec();
    top.sort_unstable();
    top
}

fn criterion_05_selector_matches_brute_force() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatches = 0;
    for _ in 0..500 {
        let n = rng.gen_range(1..=1000);
        let distinct = match rng.gen_range(0..3) {
            0 => 1,
            1 => rng.gen_range(2..=5),
            _ => n,
        };
        let palette: Vec<f64> = (0..distinct).map(|_| rng.gen_range(0.0..1.5)).collect();
        let scores: Vec<f64> = (0..n)
            .map(|_| palette[rng.gen_range(0..distinct)])
            .collect();
        let fraction = match rng.gen_range(0..4) {
            0 => 1.0,
            1 => 1.0 / n as f64,
            _ => rng.gen_range(0.001..1.0),
        };
        let records: Vec<ScoreRecord> = scores
            .iter()
            .enumerate()
            .map(|(i, &s)| ScoreRecord {
                sample_id: i,
                epoch: 0,
                d_evs: s,
                d_ds: None,
                d_acs: s,
            })
            .collect();
        let got = select_topk(&records, fraction, n).unwrap();
        if got.ids() != brute_force_topk(&scores, fraction).as_slice() {
            mismatches += 1;
        }
    }
    (
        mismatches == 0,
        format!("500 instances with ties, {mismatches} mismatches"),
    )
}

fn noise_config() -> RunConfig {
    RunConfig::load(&common::workspace_file("configs/noise.toml")).unwrap()
}

struct Outcome {
    acc: f64,
    recall: f64,
    secs: f64,
}

fn noise_run(fraction: f64, selector: Selector, seed: u64) -> Outcome {
    let mut c = noise_config();
    c.seed = seed;
    c.qat.fraction = fraction;
    c.qat.selector = selector;
    let start = Instant::now();
    let r = run_qat(&c).unwrap();
    Outcome {
        acc: r.final_test_acc(),
        recall: r.final_recall().unwrap_or(0.0),
        secs: start.elapsed().as_secs_f64(),
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

const SEEDS: [u64; 3] = [1, 2, 3];

fn criterion_06_noise_robustness() -> Verdict {
    let acs: Vec<Outcome> = SEEDS
        .iter()
        .map(|&s| noise_run(0.3, Selector::Acs, s))
        .collect();
    let random: Vec<Outcome> = SEEDS
        .iter()
        .map(|&s| noise_run(0.3, Selector::Random, s))
        .collect();
    let recall = mean(acs.iter().map(|o| o.recall));
    let random_recall = mean(random.iter().map(|o| o.recall));
    let acs_acc = mean(acs.iter().map(|o| o.acc));
    let random_acc = mean(random.iter().map(|o| o.acc));
    let slowest = acs
        .iter()
        .chain(&random)
        .map(|o| o.secs)
        .fold(0.0, f64::max);
    let a = recall >= 0.80;
    let b = acs_acc >= random_acc;
    (
        a && b && slowest < 300.0,
        format!(
            "(a) {} mean final-round recall {recall:.3} (>= 0.80; random {random_recall:.3}); \
             (b) {} mean accuracy acs {acs_acc:.4} vs random {random_acc:.4}; slowest run {slowest:.2}s",
            if a { "PASS" } else { "FAIL" },
            if b { "PASS" } else { "FAIL" },
        ),
    )
}

fn criterion_07_half_coreset_vs_full_noisy_data() -> Verdict {
    let acs = mean(SEEDS.iter().map(|&s| noise_run(0.5, Selector::Acs, s).acc));
    let full = mean(SEEDS.iter().map(|&s| noise_run(1.0, Selector::Full, s).acc));
    let win = if acs > full {
        "acs above full data"
    } else {
        "acs not above full data"
    };
    (
        acs >= full - 0.005,
        format!("S=0.5 acs mean accuracy {acs:.4} vs full {full:.4} (tolerance 0.5 pp; {win})"),
    )
}

fn criterion_08_selection_overhead_is_constant() -> Verdict {
    let mut base = RunConfig::from_toml(
        r#"
seed = 8

[data]
kind = "synthetic"
classes = 10
dims = 32
per_class = 500
spread = 0.3
seed = 8

[model]
hidden = [64, 64]
bits_w = 4

[teacher]
epochs = 1
lr = 0.1

[qat]
epochs = 6
interval = 2
fraction = 0.5
lr = 0.05
batch_size = 32
"#,
    )
    .unwrap();
    let prepared = prepare(&base).unwrap();
    let fractions = [0.1, 0.5, 0.9];
    let mut selection = [f64::INFINITY; 3];
    let mut training = [f64::INFINITY; 3];
    let mut forwards = Vec::new();
    // interleaved repetitions, best of each, so drift hits all fractions alike
    for _ in 0..7 {
        for (i, &s) in fractions.iter().enumerate() {
            base.qat.fraction = s;
            let r = run_qat_with(&base, &prepared).unwrap();
            let t = acs_core::experiment::timing_breakdown(&r.metrics);
            selection[i] = selection[i].min(t.selection);
            training[i] = training[i].min(t.training);
            forwards.push(r.counters.scoring_forwards);
        }
    }
    let lo = selection.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = selection.iter().cloned().fold(0.0, f64::max);
    let spread = (hi - lo) / lo;
    let monotone = training.windows(2).all(|w| w[0] < w[1]);
    let same_work = forwards.iter().all(|&f| f == forwards[0]);
    (
        spread < 0.15 && monotone && same_work,
        format!(
            "S = 0.1/0.5/0.9: selection {selection:.4?}s (spread {:.1}% < 15%), training {training:.4?}s (increasing: {monotone}), scoring forwards equal: {same_work}",
            spread * 100.0
        ),
    )
}

fn criterion_09_cadence_and_degenerate_cases() -> Verdict {
    let mut c = common::small_config();
    c.qat.epochs = 12;
    c.qat.interval = 4;
    let r = run_qat(&c).unwrap();
    let cadence = r.coresets.iter().all(|cs| cs.epoch_created % 4 == 0)
        && r.coresets.len() == 3
        && r.metrics.rows.iter().all(|row| {
            let select = row.epoch % 4 == 0;
            select == (row.phase == acs_core::experiment::Phase::Select)
        });

    let mut one = c.clone();
    one.qat.fraction = 1.0;
    let mut full = one.clone();
    full.qat.selector = Selector::Full;
    let prepared = prepare(&one).unwrap();
    let a = run_qat_with(&one, &prepared).unwrap();
    let b = run_qat_with(&full, &prepared).unwrap();
    let bit_match = a.metrics.to_csv_string() == b.metrics.to_csv_string()
        && acs_core::network::checkpoint_bytes(&a.model, "x")
            == acs_core::network::checkpoint_bytes(&b.model, "x");

    let mut once = c.clone();
    once.qat.interval = once.qat.epochs;
    let r = run_qat(&once).unwrap();
    let pure_evs = r.rounds.len() == 1
        && r.rounds[0].beta == Some(1.0)
        && r.scores[0].iter().all(|s| s.d_acs == s.d_evs);
    (
        cadence && bit_match && pure_evs,
        format!("cadence {cadence}, S=1 bit-matches full data {bit_match}, R=E single pure-EVS selection {pure_evs}"),
    )
}

fn criterion_10_golden_metrics() -> Verdict {
    let config = RunConfig::load(&common::workspace_file("configs/golden.toml")).unwrap();
    let produced = run_qat(&config).unwrap().metrics.to_csv_string();
    let committed = std::fs::read_to_string(common::workspace_file(
        "crates/core/tests/golden/metrics.csv",
    ))
    .unwrap();
    (
        produced == committed,
        format!(
            "configs/golden.toml vs committed metrics.csv ({} bytes)",
            committed.len()
        ),
    )
}

fn criterion_11_coverage_partition_and_overlap() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut partition_failures = 0;
    for _ in 0..200 {
        let n = rng.gen_range(1..=2000);
        let fraction = rng.gen_range(0.001..=1.0);
        let blocks = full_coverage_blocks(n, fraction, rng.gen());
        let mut seen = BTreeSet::new();
        let mut ok = true;
        for b in &blocks {
            for &id in b {
                ok &= seen.insert(id);
            }
        }
        if !ok || seen.len() != n || seen.iter().next_back() != Some(&(n - 1)) {
            partition_failures += 1;
        }
    }
    let mut overlap_failures = 0;
    for _ in 0..100 {
        let n = rng.gen_range(2..=500);
        let k = rng.gen_range(1..=n);
        let mut ids: Vec<usize> = (0..n).collect();
        ids.shuffle(&mut rng);
        let a: Vec<usize> = ids[..k].to_vec();
        ids.shuffle(&mut rng);
        let b: Vec<usize> = ids[..k].to_vec();
        let sa: BTreeSet<usize> = a.iter().copied().collect();
        let sb: BTreeSet<usize> = b.iter().copied().collect();
        let oracle = 100.0 * sa.intersection(&sb).count() as f64 / k as f64;
        let ca = Coreset::new(0, a, 0.0, "a", 0).unwrap();
        let cb = Coreset::new(0, b, 0.0, "b", 0).unwrap();
        if coreset_overlap(&ca, &cb).unwrap() != oracle {
            overlap_failures += 1;
        }
    }
    (
        partition_failures == 0 && overlap_failures == 0,
        format!("200 partitions, {partition_failures} failures; 100 overlap pairs, {overlap_failures} mismatches"),
    )
}

fn main() {
    let criteria: [(u32, fn() -> Verdict); 11] = [
        (1, criterion_01_quantizer_suite),
        (2, criterion_02_gradient_fidelity),
        (3, criterion_03_score_bounds_and_endpoints),
        (4, criterion_04_evs_tracks_gradient_norm),
        (5, criterion_05_selector_matches_brute_force),
        (6, criterion_06_noise_robustness),
        (7, criterion_07_half_coreset_vs_full_noisy_data),
        (8, criterion_08_selection_overhead_is_constant),
        (9, criterion_09_cadence_and_degenerate_cases),
        (10, criterion_10_golden_metrics),
        (11, criterion_11_coverage_partition_and_overlap),
    ];
    let wanted: Vec<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = Vec::new();
    for (n, f) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let (pass, detail) = match std::panic::catch_unwind(f) {
            Ok(v) => v,
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                (false, format!("panicked: {msg}"))
            }
        };
        println!(
            "criterion {n}: {} {detail}",
            if pass { "PASS" } else { "FAIL" }
        );
        if !pass {
            failed.push(n);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
