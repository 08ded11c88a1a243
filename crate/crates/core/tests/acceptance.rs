//! Acceptance criteria, one PASS/FAIL line each. Exits non-zero on any failure.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use maf_core::eval::{accuracy, is_correct, iou, union_gt_box, upper_bound};
use maf_core::gradcheck::{grad_check, GradCheckConfig};
use maf_core::inference::{predict_weak_dataset, run_baseline};
use maf_core::model::contrastive_loss;
use maf_core::synth::{generate, Synthetic};
use maf_core::training::{init_for_dataset, train};
use maf_core::{
    AreaConvention, BBox, CaptionRecord, EvalReport, FeatureFlags, ImageRecord, Mat, Method, ModelParams,
    ObjectRecord, PhraseRecord, Rng, SynthConfig, TrainConfig,
};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

const CONV: AreaConvention = AreaConvention::Continuous;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn recovery_config() -> TrainConfig {
    TrainConfig {
        epochs: 25,
        batch_size: 64,
        lr: 1e-3,
        seed: 7,
        ..Default::default()
    }
}

fn weak_accuracy(s: &Synthetic, params: &ModelParams) -> f64 {
    let preds = predict_weak_dataset(&s.dataset, params, &s.table).expect("prediction");
    accuracy(&preds, &s.dataset.images, CONV).expect("scoring").accuracy
}

fn train_and_score(s: &Synthetic, cfg: &TrainConfig) -> (f64, maf_core::Checkpoint) {
    let ck = train(&s.dataset, &s.table, cfg, |_| {}).expect("training");
    (weak_accuracy(s, &ck.params), ck)
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let cfg = GradCheckConfig::default();
    let mut worst = 0.0f64;
    let mut skipped = 0;
    for seed in 0..20 {
        let r = grad_check(seed, &cfg).map_err(|e| e.to_string())?;
        ensure(r.passed, || r.to_string())?;
        worst = worst.max(r.max_rel_err);
        skipped += r.skipped.len();
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(format!("seeds 0-19, max rel err {worst:.2e}, {skipped} tie-skipped"))
}

fn synthetic_recovery() -> Outcome {
    let start = Instant::now();
    let s = generate(&SynthConfig::default()).map_err(|e| e.to_string())?;
    let cfg = recovery_config();
    let untrained = weak_accuracy(&s, &init_for_dataset(&cfg, &s.dataset, &s.table));
    let (trained, _) = train_and_score(&s, &cfg);
    let elapsed = start.elapsed();
    let detail = format!("trained {trained:.4}, untrained {untrained:.4}, {:.1}s", elapsed.as_secs_f64());
    ensure(trained >= 0.95, || detail.clone())?;
    ensure(trained >= 2.0 * untrained, || detail.clone())?;
    ensure(elapsed < Duration::from_secs(300), || detail.clone())?;
    Ok(detail)
}

fn ambiguity_differential() -> Outcome {
    let start = Instant::now();
    let s = generate(&SynthConfig::duplicate_labels()).map_err(|e| e.to_string())?;
    let full_cfg = recovery_config();
    let label_cfg = TrainConfig {
        flags: FeatureFlags {
            use_features: false,
            ..full_cfg.flags
        },
        ..full_cfg.clone()
    };
    let (full, _) = train_and_score(&s, &full_cfg);
    let (label_only, _) = train_and_score(&s, &label_cfg);
    let elapsed = start.elapsed();
    let detail = format!(
        "labels+features {:.2}%, labels only {:.2}%, {:.1}s",
        100.0 * full,
        100.0 * label_only,
        elapsed.as_secs_f64()
    );
    ensure(full - label_only >= 0.10, || detail.clone())?;
    ensure(elapsed < Duration::from_secs(300), || detail.clone())?;
    Ok(detail)
}

fn unsupervised_ordering() -> Outcome {
    let s = generate(&SynthConfig::duplicate_labels()).map_err(|e| e.to_string())?;
    let score = |m: Method| -> Result<f64, String> {
        let preds = run_baseline(&s.dataset, m, Some(&s.table), 0).map_err(|e| e.to_string())?;
        Ok(accuracy(&preds, &s.dataset.images, CONV).map_err(|e| e.to_string())?.accuracy)
    };
    let random = score(Method::Random)?;
    let max = score(Method::Max)?;
    let center = score(Method::Center)?;
    let direct = score(Method::Direct)?;
    let avg = score(Method::GloveAvg)?;
    let att = score(Method::GloveAtt)?;
    let detail = format!(
        "random {random:.3} < max {max:.3} / center {center:.3} < direct {direct:.3} <= avg {avg:.3} <= att {att:.3}"
    );
    let ordered = random < max && random < center && max < direct && center < direct && direct <= avg && avg <= att;
    ensure(ordered, || detail.clone())?;
    Ok(detail)
}

/// Loss for caption `j` written out directly: -ln(e^{s_jj} / sum_i e^{s_ij}).
fn oracle_loss(s: &[Vec<f64>]) -> f64 {
    let b = s.len();
    let mut total = 0.0;
    for (j, row) in s.iter().enumerate() {
        let column: Vec<f64> = s.iter().map(|r| r[j]).collect();
        let shift = column.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = column.iter().map(|x| (x - shift).exp()).sum();
        total += -((row[j] - shift) - denom.ln());
    }
    total / b as f64
}

fn loss_oracle() -> Outcome {
    let mut rng = Rng::new(2024);
    let mut worst = 0.0f64;
    for trial in 0..100 {
        let b = 1 + rng.below(5);
        let rows: Vec<Vec<f64>> = (0..b)
            .map(|_| (0..b).map(|_| rng.uniform(-10.0, 10.0)).collect())
            .collect();
        let got = contrastive_loss(&Mat::from_rows(&rows).map_err(|e| e.to_string())?);
        let want = oracle_loss(&rows);
        let err = (got - want).abs();
        worst = worst.max(err);
        ensure(err <= 1e-10, || format!("trial {trial}: {got} vs {want}"))?;
    }
    let equal = contrastive_loss(&Mat::from_rows(&[vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap());
    ensure((equal - std::f64::consts::LN_2).abs() < 1e-12, || format!("equal sims gave {equal}"))?;
    let worked = contrastive_loss(&Mat::from_rows(&[vec![2.0, 0.0], vec![0.0, 0.0]]).unwrap());
    ensure((worked - 0.410038).abs() < 1e-6, || format!("worked example gave {worked}"))?;
    Ok(format!("100 matrices, max abs err {worst:.1e}"))
}

fn one_phrase_image(id: &str, gt: BBox, objects: &[BBox]) -> ImageRecord {
    ImageRecord {
        image_id: id.into(),
        width: 100,
        height: 100,
        objects: objects
            .iter()
            .map(|&b| ObjectRecord {
                bbox: b,
                label: "thing".into(),
                attributes: vec![],
                confidence: 1.0,
                feature_index: 0,
            })
            .collect(),
        captions: vec![CaptionRecord {
            caption_id: "c".into(),
            phrases: vec![PhraseRecord {
                phrase_id: "p".into(),
                text: "thing".into(),
                words: vec!["thing".into()],
                gt_boxes: vec![gt],
            }],
        }],
    }
}

/// Intersection over union from explicit corner arithmetic.
fn oracle_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area = |r: [f64; 4]| (r[2] - r[0]) * (r[3] - r[1]);
    inter / (area(a) + area(b) - inter)
}

fn eval_protocol() -> Outcome {
    let bx = |c: [f64; 4]| BBox::new(c[0], c[1], c[2], c[3]);
    let a = [0.0, 0.0, 10.0, 10.0];
    let b = [5.0, 5.0, 15.0, 15.0];
    ensure((iou(&bx(a), &bx(b)) - oracle_iou(a, b)).abs() < 1e-9, || "overlap iou".into())?;
    ensure((iou(&bx(a), &bx(b)) - 25.0 / 175.0).abs() < 1e-9, || "25/175".into())?;
    ensure(iou(&bx(a), &bx(a)) == 1.0, || "identity".into())?;
    ensure(iou(&bx(a), &bx([20.0, 20.0, 30.0, 30.0])) == 0.0, || "disjoint".into())?;
    ensure(iou(&bx(a), &bx([3.0, 3.0, 3.0, 8.0])) == 0.0, || "degenerate".into())?;

    let hull = union_gt_box(&[bx([0.0, 0.0, 1.0, 1.0]), bx([2.0, 2.0, 3.0, 3.0])]);
    ensure(hull == Some(bx([0.0, 0.0, 3.0, 3.0])), || format!("hull {hull:?}"))?;
    ensure(union_gt_box(&[bx(a), bx([2.0, 2.0, 4.0, 4.0])]) == Some(bx(a)), || "nested".into())?;
    ensure(union_gt_box(&[]).is_none(), || "empty union".into())?;

    // IoU exactly one half must not count
    let half = bx([0.0, 0.0, 10.0, 5.0]);
    ensure(oracle_iou([0.0, 0.0, 10.0, 10.0], [0.0, 0.0, 10.0, 5.0]) == 0.5, || "oracle half".into())?;
    ensure(!is_correct(&half, &bx(a), CONV), || "iou 0.5 counted correct".into())?;

    // IoUs 0.6 and 0.4
    let gt = bx([0.0, 0.0, 10.0, 10.0]);
    let p6 = bx([0.0, 0.0, 10.0, 6.0]);
    let p4 = bx([0.0, 0.0, 10.0, 4.0]);
    let images = vec![one_phrase_image("x", gt, &[p6]), one_phrase_image("y", gt, &[p4])];
    let preds = vec![
        maf_core::Prediction {
            phrase_id: "p".into(),
            image_id: "x".into(),
            bbox: p6,
            object_index: Some(0),
        },
        maf_core::Prediction {
            phrase_id: "p".into(),
            image_id: "y".into(),
            bbox: p4,
            object_index: Some(0),
        },
    ];
    let score = accuracy(&preds, &images, CONV).map_err(|e| e.to_string())?;
    ensure(score.accuracy == 0.5, || format!("0.6/0.4 gave {}", score.accuracy))?;
    ensure(upper_bound(&images, CONV) == 0.5, || "one of two coverable".into())?;

    // accuracy never exceeds the detector upper bound on generated data
    let mut checked = 0;
    for cfg in [
        SynthConfig::default(),
        SynthConfig::duplicate_labels(),
        SynthConfig {
            objects_per_image: 2,
            phrases_per_caption: 2,
            ..SynthConfig::duplicate_labels()
        },
        SynthConfig {
            n_images: 50,
            feature_noise_sigma: 0.0,
            distractor_rate: 0.0,
            synonym_rate: 0.0,
            seed: 3,
            ..Default::default()
        },
    ] {
        let s = generate(&cfg).map_err(|e| e.to_string())?;
        let untrained = init_for_dataset(&recovery_config(), &s.dataset, &s.table);
        let mut runs = vec![(
            "weak-untrained".to_string(),
            predict_weak_dataset(&s.dataset, &untrained, &s.table).map_err(|e| e.to_string())?,
        )];
        for m in Method::ALL {
            let preds = run_baseline(&s.dataset, m, Some(&s.table), 1).map_err(|e| e.to_string())?;
            runs.push((m.name().to_string(), preds));
        }
        let report = EvalReport::build(&s.dataset.images, &runs, CONV).map_err(|e| e.to_string())?;
        for (name, score) in &report.methods {
            ensure(score.accuracy <= report.upper_bound, || {
                format!("{name}: {} > UB {}", score.accuracy, report.upper_bound)
            })?;
            checked += 1;
        }
    }
    Ok(format!("worked examples hold; accuracy <= UB for {checked} method/dataset pairs"))
}

fn determinism() -> Outcome {
    let cfg = SynthConfig {
        n_images: 80,
        ..Default::default()
    };
    let train_cfg = TrainConfig {
        epochs: 5,
        ..recovery_config()
    };
    let run = |threads: usize| -> Result<(Vec<u8>, String), String> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| e.to_string())?;
        pool.install(|| {
            let s = generate(&cfg).map_err(|e| e.to_string())?;
            let ck = train(&s.dataset, &s.table, &train_cfg, |_| {}).map_err(|e| e.to_string())?;
            let preds = predict_weak_dataset(&s.dataset, &ck.params, &s.table).map_err(|e| e.to_string())?;
            let report = EvalReport::build(&s.dataset.images, &[("weak".into(), preds)], CONV)
                .map_err(|e| e.to_string())?;
            Ok((ck.encode(), report.to_json()))
        })
    };
    let (ck_a, rep_a) = run(1)?;
    let (ck_b, rep_b) = run(4)?;
    ensure(ck_a == ck_b, || "checkpoints differ".into())?;
    ensure(rep_a == rep_b, || "reports differ".into())?;
    Ok(format!("checkpoint {} bytes and report identical across runs (1 and 4 threads)", ck_a.len()))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 7] = [
        ("gradient check", gradient_check),
        ("synthetic recovery", synthetic_recovery),
        ("ambiguity differential", ambiguity_differential),
        ("unsupervised ordering", unsupervised_ordering),
        ("loss oracle", loss_oracle),
        ("evaluation protocol", eval_protocol),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        match run() {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
