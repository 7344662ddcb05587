//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.
//!
//! Run optimized: `cargo test --release -p trn --test acceptance`.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use trn::analysis::{
    align_videos, class_order_sensitivity, class_separation, early_recognition_eval, export_embeddings,
    representative_tuples,
};
use trn::checkpoint::encode_model;
use trn::data::{encode_features, generate_dataset, SplitDataset, SyntheticSpec, VideoSample};
use trn::gradcheck::{check_multiscale, GradCheckShape, DEFAULT_STEP};
use trn::model::{FrameOrder, Model, ModelConfig, Pooling};
use trn::nn::{Activation, Mlp, Precision};
use trn::relation::{FrameFeature, MultiScaleTrn};
use trn::sampling::{
    binomial, enumerate_tuples, sample_tuples_by_scale, subsample_tuples, tuple_count,
};
use trn::streaming::StreamQueue;
use trn::training::{
    compare_poolings, evaluate, history_json_lines, mix_seed, summarize_comparison, train, GridCell,
    TrainConfig,
};

const DATA_SEED: u64 = 7;
const TRAIN_PER_CLASS: usize = 500;
const VAL_PER_CLASS: usize = 200;
const SEEDS: [u64; 3] = [1, 2, 3];

fn model_config(pooling: Pooling, frames: usize) -> ModelConfig {
    ModelConfig {
        pooling,
        feature_dim: 16,
        hidden: 64,
        classes: 8,
        frames,
        per_scale: 3,
        tuple_seed: 11,
    }
}

fn train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 10,
        seed,
        ..TrainConfig::default()
    }
}

fn split(preset: &str) -> SplitDataset {
    let spec = SyntheticSpec::preset(preset).expect("known preset");
    generate_dataset(&spec, DATA_SEED, TRAIN_PER_CLASS, VAL_PER_CLASS).expect("valid preset")
}

/// Same recipe as `compare_poolings`, but keeps the model.
fn trained(split: &SplitDataset, pooling: Pooling, frames: usize, seed: u64, precision: Precision) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0x1417]));
    let mut model = Model::new(model_config(pooling, frames), &mut rng).unwrap();
    let tc = TrainConfig {
        precision,
        ..train_config(seed)
    };
    train(&mut model, &split.train, &tc).unwrap();
    model
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn within(elapsed: Duration, limit_secs: u64) -> bool {
    elapsed <= Duration::from_secs(limit_secs)
}

// ---------------------------------------------------------------- 1

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let report = check_multiscale(GradCheckShape::default(), 120, 2024, DEFAULT_STEP).unwrap();
    let secs = t.elapsed();
    outcome(
        report.configurations >= 100 && report.max_relative_error < 1e-4 && within(secs, 60),
        format!(
            "{} configurations, {} entries, max relative error {:.3e} (< 1e-4), {:.1}s (< 60s)",
            report.configurations,
            report.entries_checked,
            report.max_relative_error,
            secs.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- 2

/// Independent oracle: all d-subsets of 0..n via bitmasks.
fn subsets(n: usize, d: usize) -> BTreeSet<Vec<usize>> {
    (0u32..1 << n)
        .filter(|m| m.count_ones() as usize == d)
        .map(|m| (0..n).filter(|i| m >> i & 1 == 1).collect())
        .collect()
}

fn criterion_2() -> Outcome {
    let mut cases = 0usize;
    let mut failures = Vec::new();
    for n in 2..=8 {
        for d in 2..=n {
            let oracle = subsets(n, d);
            let full = binomial(n, d) as usize;
            let enumerated: Vec<Vec<usize>> = enumerate_tuples(n, d)
                .unwrap()
                .iter()
                .map(|t| t.indices().to_vec())
                .collect();
            let enum_set: BTreeSet<Vec<usize>> = enumerated.iter().cloned().collect();
            if enum_set != oracle || enumerated.len() != full {
                failures.push(format!("enumerate N={n} d={d}"));
            }
            for k in [full, full + 1, full + 7] {
                for seed in 0..5u64 {
                    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, n as u64, d as u64]));
                    let got: BTreeSet<Vec<usize>> = subsample_tuples(n, d, k, &mut rng)
                        .unwrap()
                        .iter()
                        .map(|t| t.indices().to_vec())
                        .collect();
                    cases += 1;
                    if got != enum_set {
                        failures.push(format!("subsample N={n} d={d} k={k}"));
                    }
                }
            }
        }
    }
    let budgets: Vec<usize> = (0..100u64)
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            tuple_count(&sample_tuples_by_scale(8, 3, &mut rng).unwrap())
        })
        .collect();
    let budget = budgets[0];
    outcome(
        failures.is_empty() && budgets.iter().all(|&b| b == 19),
        format!(
            "{cases} subsample cases match enumeration{}; tuple count (N=8, k=3) = {budget} on all 100 draws (expected 19)",
            if failures.is_empty() { String::new() } else { format!(", mismatches: {failures:?}") }
        ),
    )
}

// ---------------------------------------------------------------- 3, 4, 6

struct OrderCritical {
    split: SplitDataset,
    trn8: Vec<Model>,
    avg8: Vec<Model>,
    scale_means: Vec<(usize, f64)>,
    elapsed: Duration,
}

fn train_order_critical() -> OrderCritical {
    let t = Instant::now();
    let split = split("order-critical");
    let trn8: Vec<Model> = SEEDS
        .iter()
        .map(|&s| trained(&split, Pooling::TemporalRelation, 8, s, Precision::F32))
        .collect();
    let avg8: Vec<Model> = SEEDS
        .iter()
        .map(|&s| trained(&split, Pooling::AveragePool, 8, s, Precision::F32))
        .collect();
    let cells: Vec<GridCell> = (2..=5)
        .map(|frames| GridCell {
            pooling: Pooling::TemporalRelation,
            frames,
        })
        .collect();
    let rows = compare_poolings(
        &split,
        &model_config(Pooling::TemporalRelation, 2),
        &train_config(0),
        &cells,
        &SEEDS,
    )
    .unwrap();
    let scale_means = summarize_comparison(&rows)
        .into_iter()
        .map(|(_, frames, top1)| (frames, top1))
        .collect();
    OrderCritical {
        split,
        trn8,
        avg8,
        scale_means,
        elapsed: t.elapsed(),
    }
}

fn mean_top1(models: &[Model], split: &SplitDataset, order: FrameOrder) -> f64 {
    models
        .iter()
        .map(|m| evaluate(m, &split.val, order).unwrap().top1)
        .sum::<f64>()
        / models.len() as f64
}

fn criterion_3(oc: &OrderCritical) -> Outcome {
    let trn = mean_top1(&oc.trn8, &oc.split, FrameOrder::Ordered);
    let avg = mean_top1(&oc.avg8, &oc.split, FrameOrder::Ordered);
    let spec = SyntheticSpec::order_critical();
    let pair_labels: Vec<usize> = spec.reversal_pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
    let pairs = oc.split.val.filter_labels(&pair_labels);
    let chance = 1.0 / spec.classes as f64;
    let avg_pairs = oc
        .avg8
        .iter()
        .map(|m| evaluate(m, &pairs, FrameOrder::Ordered).unwrap().top1)
        .sum::<f64>()
        / oc.avg8.len() as f64;
    let monotone = oc
        .scale_means
        .windows(2)
        .all(|w| w[1].1 >= w[0].1 - 0.02);
    let scales: Vec<String> = oc
        .scale_means
        .iter()
        .map(|(n, t)| format!("d={n}:{:.1}", 100.0 * t))
        .collect();
    outcome(
        trn - avg >= 0.25 && avg_pairs <= chance + 0.05 && monotone && within(oc.elapsed, 900),
        format!(
            "TRN(N=8) {:.1} vs avg-pool {:.1} (gap {:.1} >= 25); avg-pool on reversal pairs {:.1} (chance {:.1} + 5); TRN by scale [{}] non-decreasing within 2; trained in {:.0}s (< 900s)",
            100.0 * trn,
            100.0 * avg,
            100.0 * (trn - avg),
            100.0 * avg_pairs,
            100.0 * chance,
            scales.join(" "),
            oc.elapsed.as_secs_f64()
        ),
    )
}

struct OrderFree {
    split: SplitDataset,
    trn8: Model,
    avg8: Model,
}

fn train_order_free() -> OrderFree {
    let split = split("order-free");
    let trn8 = trained(&split, Pooling::TemporalRelation, 8, SEEDS[0], Precision::F32);
    let avg8 = trained(&split, Pooling::AveragePool, 8, SEEDS[0], Precision::F32);
    OrderFree { split, trn8, avg8 }
}

fn criterion_4(oc: &OrderCritical, of: &OrderFree) -> Outcome {
    let ordered = mean_top1(&oc.trn8, &oc.split, FrameOrder::Ordered);
    let shuffled = mean_top1(&oc.trn8, &oc.split, FrameOrder::Shuffled);
    let free_ordered = evaluate(&of.trn8, &of.split.val, FrameOrder::Ordered).unwrap().top1;
    let free_shuffled = evaluate(&of.trn8, &of.split.val, FrameOrder::Shuffled).unwrap().top1;
    let gap = ordered - shuffled;
    let free_gap = free_ordered - free_shuffled;
    outcome(
        gap >= 0.20 && free_gap.abs() <= 0.05,
        format!(
            "order-critical ordered {:.1} shuffled {:.1} (gap {:.1} >= 20); order-free ordered {:.1} shuffled {:.1} (|gap| {:.1} <= 5)",
            100.0 * ordered,
            100.0 * shuffled,
            100.0 * gap,
            100.0 * free_ordered,
            100.0 * free_shuffled,
            100.0 * free_gap.abs()
        ),
    )
}

fn criterion_6(oc: &OrderCritical) -> Outcome {
    let model = &oc.trn8[0];
    let tops: Vec<f64> = [0.25, 0.5, 1.0]
        .iter()
        .map(|&f| early_recognition_eval(model, &oc.split.val, f).unwrap().top1)
        .collect();
    let monotone = tops.windows(2).all(|w| w[1] >= w[0] - 0.02);
    let full = early_recognition_eval(model, &oc.split.val, 1.0).unwrap();
    let reference = evaluate(model, &oc.split.val, FrameOrder::Ordered).unwrap();
    let identical = full == reference && full.to_json_lines() == reference.to_json_lines();
    outcome(
        monotone && identical,
        format!(
            "top1 at 25/50/100% = {:.1}/{:.1}/{:.1} (monotone within 2); fraction 1.0 identical to evaluate: {identical}",
            100.0 * tops[0],
            100.0 * tops[1],
            100.0 * tops[2]
        ),
    )
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Outcome {
    let t = Instant::now();
    let mut sequences = 0usize;
    let mut predictions = 0usize;
    let mut mismatches = 0usize;
    for s in 0..1200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[s, 0x5743]));
        let frames = rng.random_range(2..=8);
        let dim = rng.random_range(1..=5);
        let pooling = match s % 5 {
            0 => Pooling::AveragePool,
            _ => Pooling::TemporalRelation,
        };
        let config = ModelConfig {
            pooling,
            feature_dim: dim,
            hidden: rng.random_range(1..=6),
            classes: rng.random_range(2..=5),
            frames,
            per_scale: rng.random_range(1..=4),
            tuple_seed: s,
        };
        let model = Model::new(config, &mut rng).unwrap();
        let stride = rng.random_range(1..=3);
        let pushes = rng.random_range(0..=40);
        let mut queue = StreamQueue::for_model(&model, stride).unwrap();
        // Oracle buffer: the last N key frames seen, rebuilt from scratch.
        let mut keys: Vec<FrameFeature> = Vec::new();
        for p in 1..=pushes {
            let feature: FrameFeature = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
            if p % stride == 0 {
                keys.push(feature.clone());
            }
            let got = queue.push(&model, feature).unwrap();
            let window = (p % stride == 0 && keys.len() >= frames).then(|| keys[keys.len() - frames..].to_vec());
            match (got, window) {
                (None, None) => {}
                (Some(pred), Some(window)) => {
                    predictions += 1;
                    let batch = match model.relation() {
                        Some(trn) => trn.forward(&window, model.inference_tuples()).unwrap().logits,
                        None => model.infer(&window).unwrap().logits,
                    };
                    let same = pred.logits.len() == batch.len()
                        && pred.logits.iter().zip(&batch).all(|(a, b)| a.to_bits() == b.to_bits());
                    mismatches += usize::from(!same);
                }
                _ => mismatches += 1,
            }
        }
        sequences += 1;
    }
    let secs = t.elapsed();
    outcome(
        mismatches == 0 && sequences >= 1000 && within(secs, 60),
        format!(
            "{sequences} push sequences, {predictions} predictions, {mismatches} differ from batch inference; {:.1}s (< 60s)",
            secs.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- 7

fn dense(x: &[f64], w: &[f64], b: &[f64], relu: bool) -> Vec<f64> {
    let n_in = x.len();
    b.iter()
        .enumerate()
        .map(|(o, &bias)| {
            let z = bias + (0..n_in).map(|i| w[o * n_in + i] * x[i]).sum::<f64>();
            if relu {
                z.max(0.0)
            } else {
                z
            }
        })
        .collect()
}

fn mlp_oracle(mlp: &Mlp, x: &[f64]) -> Vec<f64> {
    mlp.layers().iter().fold(x.to_vec(), |h, l| {
        dense(&h, l.weights(), l.bias(), l.activation() == Activation::Relu)
    })
}

/// Exhaustive argmax over d-subsets of the center-sampled frames, written
/// against raw layer weights.
fn brute_force_top1(trn: &MultiScaleTrn, frames: &[FrameFeature], d: usize, class: usize) -> Vec<usize> {
    let module = trn.module(d).unwrap();
    let mut best: Option<(f64, Vec<usize>)> = None;
    for positions in subsets(frames.len(), d) {
        let x: Vec<f64> = positions.iter().flat_map(|&p| frames[p].iter().copied()).collect();
        let g = mlp_oracle(module.g(), &x);
        let r = mlp_oracle(module.h(), &g)[class];
        if best.as_ref().is_none_or(|(b, _)| r > *b) {
            best = Some((r, positions));
        }
    }
    best.unwrap().1
}

fn center_frames(n: usize, frames: usize) -> Vec<usize> {
    (0..frames)
        .map(|i| {
            let (start, len) = trn::sampling::segment_bounds(n, frames, i);
            start + len / 2
        })
        .collect()
}

fn duplicated(video: &VideoSample) -> VideoSample {
    VideoSample {
        frames: video.frames.iter().flat_map(|f| [f.clone(), f.clone()]).collect(),
        label: video.label,
    }
}

fn criterion_7(oc: &OrderCritical) -> Outcome {
    let mut pairs = 0usize;
    let mut ranking_mismatch = Vec::new();
    for s in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[s, 0x7a7a]));
        let n = rng.random_range(5..=8);
        let dim = rng.random_range(1..=4);
        let config = ModelConfig {
            pooling: Pooling::TemporalRelation,
            feature_dim: dim,
            hidden: rng.random_range(2..=8),
            classes: rng.random_range(2..=6),
            frames: n,
            per_scale: 2,
            tuple_seed: s,
        };
        let model = Model::new(config, &mut rng).unwrap();
        let len = rng.random_range(n..=3 * n);
        let video = VideoSample {
            frames: (0..len)
                .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect(),
            label: 0,
        };
        let idx = center_frames(len, n);
        let sampled: Vec<FrameFeature> = idx.iter().map(|&i| video.frames[i].clone()).collect();
        for d in 2..=5 {
            let ranking = representative_tuples(&model, &video, d, 1).unwrap();
            let expected = brute_force_top1(model.relation().unwrap(), &sampled, d, ranking.class);
            if ranking.tuples[0].positions != expected {
                ranking_mismatch.push((s, d));
            }
        }
        pairs += 1;
    }

    // Time dilation: each frame duplicated; anchors should land at 2x.
    let mut alignments = 0usize;
    let mut worst = 0i64;
    let trained = &oc.trn8[0];
    let mut subjects: Vec<(Model, VideoSample)> = oc
        .split
        .val
        .samples
        .iter()
        .step_by(97)
        .take(10)
        .map(|v| (trained.clone(), v.clone()))
        .collect();
    for s in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[s, 0xa119]));
        let model = Model::new(
            ModelConfig {
                pooling: Pooling::TemporalRelation,
                feature_dim: 3,
                hidden: 6,
                classes: 3,
                frames: 6,
                per_scale: 2,
                tuple_seed: s,
            },
            &mut rng,
        )
        .unwrap();
        // Lengths divisible by N, so the dilated video's centers fall on
        // copies of the original centers.
        let len = 6 * rng.random_range(1..=5);
        let video = VideoSample {
            frames: (0..len)
                .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect(),
            label: rng.random_range(0..3),
        };
        subjects.push((model, video));
    }
    for (model, video) in &subjects {
        let pair = [video.clone(), duplicated(video)];
        let map = align_videos(model, &pair, 5).unwrap();
        for (a, b) in map.anchors[0].iter().zip(&map.anchors[1]) {
            worst = worst.max((2 * *a as i64 - *b as i64).abs());
        }
        alignments += 1;
    }
    outcome(
        ranking_mismatch.is_empty() && worst <= 1,
        format!(
            "{pairs} (model, sample) pairs x d=2..5: {} top-1 mismatches vs brute force; {alignments} dilated pairs, max anchor offset from 2x = {worst} frame(s) (<= 1)",
            ranking_mismatch.len()
        ),
    )
}

// ---------------------------------------------------------------- 8

fn preset_run() -> (Vec<u8>, Vec<u8>, String) {
    let split = split("order-critical");
    let features = encode_features(&split.train).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[SEEDS[0], 0x1417]));
    let mut model = Model::new(model_config(Pooling::TemporalRelation, 8), &mut rng).unwrap();
    let tc = TrainConfig {
        precision: Precision::F64,
        ..train_config(SEEDS[0])
    };
    let history = train(&mut model, &split.train, &tc).unwrap();
    let report = evaluate(&model, &split.val, FrameOrder::Ordered).unwrap();
    let text = history_json_lines(&history) + &report.to_json_lines();
    (features, encode_model(&model).unwrap(), text)
}

fn criterion_8() -> Outcome {
    let t = Instant::now();
    let a = preset_run();
    let b = preset_run();
    let data = a.0 == b.0;
    let weights = a.1 == b.1;
    let reports = a.2 == b.2;
    outcome(
        data && weights && reports,
        format!(
            "two full 64-bit preset runs: features identical {data}, checkpoints ({} bytes) identical {weights}, reports identical {reports}; {:.0}s",
            a.1.len(),
            t.elapsed().as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- supplementary

fn supplementary(oc: &OrderCritical, of: &OrderFree) -> Vec<(&'static str, Outcome)> {
    let trn = evaluate(&of.trn8, &of.split.val, FrameOrder::Ordered).unwrap().top1;
    let avg = evaluate(&of.avg8, &of.split.val, FrameOrder::Ordered).unwrap().top1;
    let free = outcome(
        (trn - avg).abs() <= 0.05,
        format!("order-free TRN {:.1} vs avg-pool {:.1} (|diff| <= 5)", 100.0 * trn, 100.0 * avg),
    );

    let table = class_order_sensitivity(&oc.trn8[0], &oc.split.val).unwrap();
    let mean_delta = table.rows.iter().map(|r| r.delta).sum::<f64>() / table.rows.len() as f64;
    let weighted = table.rows.iter().map(|r| r.delta * r.count as f64).sum::<f64>()
        / table.rows.iter().map(|r| r.count).sum::<usize>() as f64;
    let deltas = outcome(
        mean_delta > 0.0 && (weighted - table.gap()).abs() < 1e-12,
        format!(
            "order-critical mean per-class delta {:.1} (> 0); sample-weighted rows {:.4} = gap {:.4}",
            100.0 * mean_delta,
            weighted,
            table.gap()
        ),
    );

    let noiseless = SyntheticSpec {
        noise_sigma: 0.0,
        distractor_rate: 0.0,
        ..SyntheticSpec::order_critical()
    };
    let clean = generate_dataset(&noiseless, DATA_SEED, 0, 20).unwrap().val;
    let vectors = export_embeddings(&oc.trn8[0], &clean, 5).unwrap();
    let labels: Vec<usize> = clean.samples.iter().map(|s| s.label).collect();
    let (within_d, between_d) = class_separation(&labels, &vectors);
    let embed = outcome(
        within_d < between_d,
        format!("d=5 embeddings on noiseless data: within-class {within_d:.3} < between-class {between_d:.3}"),
    );
    vec![
        ("order-free pooling parity", free),
        ("class order deltas", deltas),
        ("embedding separation", embed),
    ]
}

fn main() {
    // `cargo test` passes harness flags; listing must not train anything.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let mut failed = 0;
    let mut report = |n: usize, o: Outcome| {
        println!("criterion {n}: {} | {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    };
    report(1, criterion_1());
    report(2, criterion_2());
    let oc = train_order_critical();
    let of = train_order_free();
    report(3, criterion_3(&oc));
    report(4, criterion_4(&oc, &of));
    report(5, criterion_5());
    report(6, criterion_6(&oc));
    report(7, criterion_7(&oc));
    report(8, criterion_8());
    let mut extra_failed = 0;
    for (name, o) in supplementary(&oc, &of) {
        println!("supplementary {name}: {} | {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        extra_failed += usize::from(!o.pass);
    }
    if failed + extra_failed > 0 {
        println!("acceptance: {failed} criterion(s) and {extra_failed} supplementary check(s) failed");
        std::process::exit(1);
    }
    println!("acceptance: all 8 criteria and supplementary checks passed");
}
