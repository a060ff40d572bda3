//! Acceptance suite. Each criterion prints one PASS/FAIL line; the binary
//! exits nonzero if any criterion fails. Criteria run sequentially because
//! the salience call counter is process-global.
//!
//! Run a subset with `cargo test -p sbl-cli --test acceptance -- <substring>`.

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sbl_cli::ablate::AblationReport;
use sbl_core::data::{synthesize_dataset, SynthConfig};
use sbl_core::evaluation::average_precision;
use sbl_core::losses::{
    cross_entropy, focal_loss, focal_loss_with_grad, salience_biased_loss, sigmoid, total_loss, LossConfig,
};
use sbl_core::model::{prepare_samples, training_chips};
use sbl_core::salience::{call_count, compute_stats, normalize_with, rank_scores, score_corpus};
use sbl_core::{
    assign_targets, generate_anchors, nms, AnchorConfig, BBox, BoxDelta, ConvExtractor, Detection, DetectorConfig,
    FocalConfig, FrozenExtractor, ImageChip, ImageWeight, PredictConfig, TapId, TrainConfig, Trainer,
};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within_time(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(elapsed < limit, || format!("took {elapsed:.2?}, limit {limit:?}"))
}

// ---------------------------------------------------------------- losses

fn loss_identities() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let unit = FocalConfig {
        alpha: None,
        gamma: 0.0,
    };
    let paper = FocalConfig::default();
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let p: f64 = rng.random_range(1e-6..1.0 - 1e-6);
        let y: u8 = rng.random_range(0..2);
        let fl = focal_loss(p, y, &unit).map_err(|e| e.to_string())?;
        let ce = cross_entropy(p, y).map_err(|e| e.to_string())?;
        // Independent cross entropy.
        let oracle = if y == 1 { -p.ln() } else { -(1.0 - p).ln() };
        worst = worst.max((fl - ce).abs()).max((ce - oracle).abs());

        let f = focal_loss(p, y, &paper).map_err(|e| e.to_string())?;
        ensure(salience_biased_loss(f, 1.0).unwrap() == f, || {
            format!("SBL(l, 1) != l at p={p}")
        })?;
        let s: f64 = rng.random_range(0.0..2.0);
        let k = 2f64.powi(rng.random_range(-3..4));
        let a = salience_biased_loss(f, s).unwrap();
        ensure(a == s * f, || format!("SBL(l, s) != s*l at p={p}, s={s}"))?;
        ensure(salience_biased_loss(k * f, s).unwrap() == k * a, || {
            format!("SBL not linear in l at p={p}, s={s}, k={k}")
        })?;
    }
    ensure(worst <= 1e-9, || {
        format!("focal(gamma=0, unit alpha) vs CE deviates by {worst:e}")
    })?;

    // The weight multiplies the normalized classification term only.
    let anchors = generate_anchors(
        64,
        64,
        &AnchorConfig {
            base_sizes: vec![16.0, 32.0],
            ..Default::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let gt = [(BBox::new(10.0, 10.0, 40.0, 30.0).unwrap(), 1usize)];
    let map = assign_targets(&anchors, &gt, Default::default()).map_err(|e| e.to_string())?;
    let probs: Vec<f64> = (0..anchors.len() * 3).map(|_| rng.random_range(0.01..0.99)).collect();
    let deltas: Vec<BoxDelta> = (0..anchors.len())
        .map(|_| BoxDelta {
            tx: rng.random_range(-0.5..0.5),
            ty: 0.1,
            tw: -0.2,
            th: 0.3,
        })
        .collect();
    let cfg = LossConfig::default();
    let w = ImageWeight {
        raw: 0.03,
        weight: 0.75,
    };
    let b = total_loss(&map, &probs, 3, &deltas, w, &cfg).map_err(|e| e.to_string())?;
    let npos = b.num_pos.max(1) as f64;
    let sbl_term = salience_biased_loss(b.focal_sum / npos, 0.75).unwrap();
    ensure(b.total == sbl_term + b.l1_sum / npos, || {
        "total != SBL(focal/npos, w) + l1/npos".into()
    })?;
    let unit_w = total_loss(&map, &probs, 3, &deltas, ImageWeight::UNIT, &cfg).map_err(|e| e.to_string())?;
    ensure(unit_w.total == unit_w.focal_sum / npos + unit_w.l1_sum / npos, || {
        "unit weight changes the loss".into()
    })?;

    within_time(t0.elapsed(), Duration::from_secs(1))?;
    Ok(format!("1000 points, max |FL-CE| {worst:.1e}, {:.0?}", t0.elapsed()))
}

fn focal_hand_value() -> Outcome {
    let v = focal_loss(
        0.5,
        1,
        &FocalConfig {
            alpha: Some(0.25),
            gamma: 2.0,
        },
    )
    .map_err(|e| e.to_string())?;
    // alpha * (1 - p)^gamma * -ln p at p = 1/2.
    let hand = 0.25 * 0.25 * std::f64::consts::LN_2;
    ensure((v - 0.0433217).abs() <= 1e-6, || format!("{v} vs 0.0433217"))?;
    ensure((v - hand).abs() <= 1e-15, || format!("{v} vs {hand}"))?;
    Ok(format!("{v:.7}"))
}

fn focal_gradient_check() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let z: f64 = rng.random_range(-4.0..4.0);
        let y: u8 = rng.random_range(0..2);
        let gamma = [0.0, 0.5, 1.0, 2.0, 5.0][rng.random_range(0..5)];
        let cfg = FocalConfig {
            alpha: Some(0.25),
            gamma,
        };
        let (_, g) = focal_loss_with_grad(z, y, &cfg).map_err(|e| e.to_string())?;
        let h = 1e-5;
        let f = |x: f64| focal_loss(sigmoid(x), y, &cfg).unwrap();
        let fd = (f(z + h) - f(z - h)) / (2.0 * h);
        let rel = (g - fd).abs() / fd.abs().max(1e-8);
        worst = worst.max(rel);
    }
    ensure(worst <= 1e-4, || format!("max relative error {worst:e}"))?;
    within_time(t0.elapsed(), Duration::from_secs(5))?;
    Ok(format!("100 points, max relative error {worst:.1e}"))
}

// ---------------------------------------------------------- normalization

fn normalization_contract() -> Outcome {
    let (lo, hi) = (0.02, 0.09);
    ensure(normalize_with(lo, lo, hi, 0.5, 1.0) == 0.5, || {
        "min does not map to new_min".into()
    })?;
    ensure(normalize_with(hi, lo, hi, 0.5, 1.0) == 1.0, || {
        "max does not map to new_max".into()
    })?;
    ensure(normalize_with(0.3, lo, hi, 0.3, 0.8) == 0.8, || {
        "above max not clamped".into()
    })?;
    ensure(normalize_with(-1.0, lo, hi, 0.3, 0.8) == 0.3, || {
        "below min not clamped".into()
    })?;
    let mid = normalize_with((lo + hi) / 2.0, lo, hi, 0.5, 1.0);
    ensure((mid - 0.75).abs() <= 1e-12, || format!("midpoint maps to {mid}"))?;
    ensure(normalize_with(0.4, 0.4, 0.4, 0.5, 1.0) == 1.0, || {
        "min == max must give new_max".into()
    })?;
    ensure(normalize_with(7.0, 0.4, 0.4, 0.3, 0.9) == 0.9, || {
        "min == max must give new_max".into()
    })?;

    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for trial in 0..50 {
        let scores: Vec<(String, f64)> = (0..40)
            .map(|i| (format!("img{i:02}"), rng.random_range(0.0..0.1)))
            .collect();
        let r = rank_scores(&scores, TapId::C2, 40, (0.5, 1.0), None).map_err(|e| e.to_string())?;
        let mut by_norm = r.top.clone();
        by_norm.sort_by(|a, b| {
            b.normalized_s
                .partial_cmp(&a.normalized_s)
                .unwrap()
                .then(a.image_id.cmp(&b.image_id))
        });
        ensure(
            by_norm
                .iter()
                .map(|x| &x.image_id)
                .eq(r.top.iter().map(|x| &x.image_id)),
            || format!("argsort differs under normalization (trial {trial})"),
        )?;
    }
    Ok("endpoints, midpoint, clamping, degenerate range, 50 argsort trials".into())
}

// ---------------------------------------------------------------- oracles

fn ref_iou(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let h = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = w * h;
    let union = (a.x_max - a.x_min) * (a.y_max - a.y_min) + (b.x_max - b.x_min) * (b.y_max - b.y_min) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Repeatedly takes the best surviving box and deletes same-class boxes that overlap it.
fn ref_nms(d: &[Detection], thr: f64) -> Vec<Detection> {
    let mut alive = vec![true; d.len()];
    let mut out = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..d.len() {
            if alive[i] && best.is_none_or(|b| d[i].score > d[b].score) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        alive[b] = false;
        out.push(d[b]);
        for j in 0..d.len() {
            if alive[j] && d[j].class_id == d[b].class_id && ref_iou(&d[b].bbox, &d[j].bbox) > thr {
                alive[j] = false;
            }
        }
    }
    out
}

fn random_box(rng: &mut ChaCha8Rng, extent: f64, min: f64, max: f64) -> BBox {
    let w = rng.random_range(min..max);
    let h = rng.random_range(min..max);
    let x = rng.random_range(0.0..extent);
    let y = rng.random_range(0.0..extent);
    BBox::new(x, y, x + w, y + h).unwrap()
}

/// Full PR enumeration: precision and recall after every prefix of the
/// ranked list, then the 11-point interpolation by integer comparison.
fn ref_ap(dets: &[Detection], gts: &[BBox], thr: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap().then(a.cmp(&b)));
    let mut used = vec![false; gts.len()];
    let mut tp = 0usize;
    let mut prefix = Vec::new();
    for (rank, &i) in order.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            let o = ref_iou(&dets[i].bbox, g);
            if !used[j] && o >= thr && best.is_none_or(|(_, bo)| o > bo) {
                best = Some((j, o));
            }
        }
        if let Some((j, _)) = best {
            used[j] = true;
            tp += 1;
        }
        prefix.push((tp, rank + 1));
    }
    let n = gts.len();
    (0..=10usize)
        .map(|t| {
            prefix
                .iter()
                .filter(|&&(tp, _)| tp * 10 >= t * n)
                .map(|&(tp, k)| tp as f64 / k as f64)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 11.0
}

fn oracle_equivalence() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for trial in 0..1000 {
        let n = rng.random_range(0..=20);
        let thr = rng.random_range(0.05..0.95);
        let dets: Vec<Detection> = (0..n)
            .map(|_| Detection {
                bbox: random_box(&mut rng, 60.0, 5.0, 40.0),
                // Coarse scores so that ties occur.
                score: f64::from(rng.random_range(0..10u8)) / 10.0,
                class_id: rng.random_range(0..3),
            })
            .collect();
        let got = nms(&dets, thr).map_err(|e| e.to_string())?;
        ensure(got == ref_nms(&dets, thr), || format!("NMS mismatch on trial {trial}"))?;
    }
    for trial in 0..500 {
        let ng = rng.random_range(0..=3);
        let gts: Vec<BBox> = (0..ng).map(|_| random_box(&mut rng, 40.0, 8.0, 20.0)).collect();
        let nd = rng.random_range(0..=5);
        let dets: Vec<Detection> = (0..nd)
            .map(|_| {
                let bbox = if !gts.is_empty() && rng.random_bool(0.7) {
                    let g = gts[rng.random_range(0..gts.len())];
                    g.translate(rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0))
                } else {
                    random_box(&mut rng, 40.0, 8.0, 20.0)
                };
                Detection {
                    bbox,
                    score: rng.random(),
                    class_id: 0,
                }
            })
            .collect();
        let got = average_precision(&dets, &gts, 0.5).map_err(|e| e.to_string())?;
        let want = ref_ap(&dets, &gts, 0.5);
        ensure((got - want).abs() <= 1e-12, || {
            format!("AP {got} vs oracle {want} on trial {trial}")
        })?;
    }
    let g = |x: f64| BBox::new(x, 0.0, x + 10.0, 10.0).unwrap();
    let fixture = average_precision(
        &[
            Detection {
                bbox: g(0.0),
                score: 0.9,
                class_id: 0,
            },
            Detection {
                bbox: g(100.0),
                score: 0.8,
                class_id: 0,
            },
        ],
        &[g(0.0), g(30.0)],
        0.5,
    )
    .map_err(|e| e.to_string())?;
    ensure((fixture - 6.0 / 11.0).abs() <= 1e-9, || {
        format!("1-TP/1-FP fixture gives {fixture}")
    })?;
    within_time(t0.elapsed(), Duration::from_secs(30))?;
    Ok(format!(
        "1000 NMS + 500 AP instances, fixture {fixture:.10}, {:.1?}",
        t0.elapsed()
    ))
}

// ---------------------------------------------------------------- anchors

fn anchor_contract() -> Outcome {
    let cfg = AnchorConfig::full_pyramid();
    let ratios = [1.0 / 3.0, 1.0, 3.0];
    let mults = [2.0, 2f64.sqrt(), 0.3];
    ensure(cfg.aspect_ratios == ratios && cfg.scale_multipliers == mults, || {
        "unexpected defaults".into()
    })?;
    let mut total = 0;
    for (w, h) in [(512usize, 512usize), (640, 480), (1000, 600)] {
        let set = generate_anchors(w, h, &cfg).map_err(|e| e.to_string())?;
        for level in &set.levels {
            let s = level.stride;
            let gw = (w as f64 / s).ceil() as usize;
            let gh = (h as f64 / s).ceil() as usize;
            ensure(level.boxes.len() == gw * gh * 9, || {
                format!("{w}x{h} stride {s}: count {}", level.boxes.len())
            })?;
            for (i, b) in level.boxes.iter().enumerate() {
                let cell = i / 9;
                let (row, col) = (cell / gw, cell % gw);
                let (r, m) = (ratios[(i % 9) / 3], mults[i % 3]);
                let (cx, cy) = b.center();
                ensure(
                    (cx - (col as f64 + 0.5) * s).abs() < 1e-9 && (cy - (row as f64 + 0.5) * s).abs() < 1e-9,
                    || format!("anchor {i} off its cell center"),
                )?;
                let area = (level.base_size * m).powi(2);
                ensure((b.area() - area).abs() / area <= 1e-4, || {
                    format!("anchor {i} area {}", b.area())
                })?;
                ensure((b.width() / b.height() - r).abs() <= 1e-6, || {
                    format!("anchor {i} ratio")
                })?;
            }
            total += level.boxes.len();
        }
    }
    Ok(format!("3 image sizes, 5 levels, {total} anchors checked"))
}

// -------------------------------------------------------------- salience

fn synth_chips(n: usize, lambda: f64, seed: u64, prefix: &str) -> Vec<ImageChip> {
    let ds = synthesize_dataset(&SynthConfig {
        num_images: n,
        complexity_min: lambda,
        complexity_max: lambda,
        seed,
        ..SynthConfig::default()
    })
    .unwrap();
    ds.images
        .iter()
        .map(|img| img.load_pixels().unwrap().to_chip(&format!("{prefix}{}", img.id)))
        .collect()
}

fn desk_detector() -> DetectorConfig {
    DetectorConfig {
        input_size: 128,
        anchors: AnchorConfig {
            base_sizes: vec![16.0, 32.0],
            ..AnchorConfig::default()
        },
        ..DetectorConfig::default()
    }
}

fn frozen_extractor() -> Outcome {
    let extractor = ConvExtractor::default();
    let before = extractor.fingerprint();
    let ds = synthesize_dataset(&SynthConfig {
        num_images: 40,
        seed: 21,
        ..SynthConfig::default()
    })
    .unwrap();
    let chips = training_chips(&ds, 128).map_err(|e| e.to_string())?;
    let images: Vec<ImageChip> = chips.iter().map(|(c, _)| c.clone()).collect();
    let hash = sbl_core::data::corpus_hash(&ds).map_err(|e| e.to_string())?;
    let stats = compute_stats(&images, &extractor, &TapId::ALL, (0.5, 1.0), &hash).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        iterations: 300,
        learning_rate: 1e-3,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(desk_detector(), cfg.clone()).map_err(|e| e.to_string())?;
    let samples = prepare_samples(chips, trainer.detector(), &cfg, Some((&stats, &extractor, &hash)))
        .map_err(|e| e.to_string())?;
    let calls_before_fit = call_count();
    trainer.fit(&samples, |_, _| Ok(())).map_err(|e| e.to_string())?;
    let calls_in_fit = call_count() - calls_before_fit;
    ensure(extractor.fingerprint() == before, || {
        "extractor fingerprint changed during training".into()
    })?;
    ensure(ConvExtractor::default().fingerprint() == before, || {
        "default extractor is not reproducible".into()
    })?;

    let before_predict = call_count();
    let mut dets = 0;
    for img in &images {
        dets += trainer
            .detector()
            .predict(img, &PredictConfig::default())
            .map_err(|e| e.to_string())?
            .len();
    }
    let during_predict = call_count() - before_predict;
    ensure(during_predict == 0, || {
        format!("predict made {during_predict} salience calls")
    })?;
    ensure(calls_in_fit == 0, || {
        format!("the training loop made {calls_in_fit} salience calls")
    })?;
    Ok(format!(
        "fingerprint {}… stable over 300 steps; 0 salience calls in {} predictions ({dets} detections)",
        &before[..12],
        images.len()
    ))
}

fn salience_separation() -> Outcome {
    let t0 = Instant::now();
    let extractor = ConvExtractor::default();
    let mut summary = Vec::new();
    for seed in [0u64, 1, 2] {
        let mut corpus = synth_chips(50, 0.9, 100 + seed, "hi-");
        corpus.extend(synth_chips(50, 0.1, 200 + seed, "lo-"));
        let scores = score_corpus(&corpus, &extractor).map_err(|e| e.to_string())?;
        let pairs: Vec<(String, f64)> = corpus
            .iter()
            .zip(&scores)
            .map(|(c, s)| (c.source_id.clone(), s[TapId::C2.index()]))
            .collect();
        let r = rank_scores(&pairs, TapId::C2, 10, (0.5, 1.0), None).map_err(|e| e.to_string())?;
        let hits = r.top.iter().filter(|x| x.image_id.starts_with("hi-")).count();
        ensure(hits >= 9, || {
            format!("seed {seed}: only {hits}/10 high-complexity chips in the top 10")
        })?;
        summary.push(hits.to_string());
    }
    within_time(t0.elapsed(), Duration::from_secs(120))?;
    Ok(format!("top-10 high-complexity hits per seed: {}", summary.join(", ")))
}

// --------------------------------------------------------------- training

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

fn sbl(args: &[&str]) -> u8 {
    let mut v = vec!["sbl"];
    v.extend_from_slice(args);
    sbl_cli::run(v)
}

/// A desk-scale corpus: 200 mixed-complexity training scenes and 50 test scenes.
fn desk_workspace() -> Result<Workspace, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = dir.path().to_path_buf();
    let config = root.join("desk.toml");
    let text = fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml"))
        .map_err(|e| e.to_string())?
        .replace("../data/desk/", "data/");
    fs::write(&config, text).map_err(|e| e.to_string())?;
    let c = config.to_str().unwrap();
    let train = root.join("data/train");
    let test = root.join("data/test");
    ensure(
        sbl(&["synth", "--config", c, "--out", train.to_str().unwrap()]) == 0,
        || "synth train failed".into(),
    )?;
    ensure(
        sbl(&[
            "synth",
            "--config",
            c,
            "--out",
            test.to_str().unwrap(),
            "--set",
            "synth.num_images=50",
            "--seed",
            "1",
        ]) == 0,
        || "synth test failed".into(),
    )?;
    Ok(Workspace {
        _dir: dir,
        root,
        config,
    })
}

fn training_smoke(ws: &Workspace) -> Outcome {
    // Single-image overfit.
    let ds = synthesize_dataset(&SynthConfig {
        num_images: 1,
        seed: 3,
        ..SynthConfig::default()
    })
    .unwrap();
    let chips = training_chips(&ds, 128).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        iterations: 200,
        batch_size: 1,
        learning_rate: 1e-3,
        sbl_enabled: false,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(desk_detector(), cfg.clone()).map_err(|e| e.to_string())?;
    let samples = prepare_samples(chips, trainer.detector(), &cfg, None).map_err(|e| e.to_string())?;
    let mut losses = Vec::new();
    trainer
        .fit(&samples, |r, _| {
            losses.push(r.batch_loss);
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    let (first, last) = (losses[0], *losses.last().unwrap());
    let drop = 1.0 - last / first;
    ensure(drop >= 0.9, || {
        format!("overfit loss {first:.4} -> {last:.4} ({:.1}% drop)", drop * 100.0)
    })?;

    // Full desk run through the command line.
    let c = ws.config.to_str().unwrap();
    let run = ws.root.join("runs/desk");
    let t0 = Instant::now();
    ensure(
        sbl(&["stats", "--config", c]) == 0 && sbl(&["train", "--config", c, "--out", run.to_str().unwrap()]) == 0,
        || "desk training failed".into(),
    )?;
    let train_time = t0.elapsed();
    let ckpt = run.join("model.ckpt");
    let eval_dir = ws.root.join("runs/desk-eval");
    ensure(
        sbl(&[
            "eval",
            "--config",
            c,
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--out",
            eval_dir.to_str().unwrap(),
        ]) == 0,
        || "desk evaluation failed".into(),
    )?;
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(eval_dir.join("eval.json")).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    let map = report["map"].as_f64().ok_or("eval.json has no map")?;
    ensure(map >= 0.5, || format!("desk mAP@0.5 {map:.4} < 0.5"))?;
    within_time(train_time, Duration::from_secs(30 * 60))?;
    Ok(format!(
        "overfit loss -{:.1}% in 200 steps; desk run 2000 steps in {:.0?}, mAP@0.5 {map:.4}",
        drop * 100.0,
        train_time
    ))
}

fn directional_sbl(ws: &Workspace) -> Outcome {
    let c = ws.config.to_str().unwrap();
    let out = ws.root.join("runs/ablate");
    let code = sbl(&[
        "ablate",
        "--config",
        c,
        "--out",
        out.to_str().unwrap(),
        "--set",
        "ablate.new_min=[0.5]",
        "--set",
        "ablate.taps=[\"C2\"]",
        "--set",
        "ablate.seeds=[0, 1, 2]",
    ]);
    ensure(code == 0, || format!("ablate exited {code}"))?;
    let report: AblationReport =
        serde_json::from_str(&fs::read_to_string(out.join("ablation.json")).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    let base = report.row("baseline").ok_or("no baseline row")?;
    let sbl_row = report.row("SBL-C2 new_min=0.5").ok_or("no SBL-C2 row")?;
    let table = fs::read_to_string(out.join("ablation.md")).map_err(|e| e.to_string())?;
    ensure(table.lines().count() == 4 && table.contains("new_min"), || {
        format!("unexpected table:\n{table}")
    })?;
    let round = |maps: &[f64]| maps.iter().map(|m| (m * 1e4).round() / 1e4).collect::<Vec<_>>();
    let detail = format!(
        "baseline {:.4} {:?}, SBL-C2(0.5) {:.4} {:?}",
        base.mean,
        round(&base.maps),
        sbl_row.mean,
        round(&sbl_row.maps)
    );
    ensure(sbl_row.mean >= base.mean - 0.01, || {
        format!("SBL mean below baseline - 0.01: {detail}")
    })?;
    Ok(detail)
}

fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(dir).unwrap().display().to_string(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

fn determinism(ws: &Workspace) -> Outcome {
    let c = ws.config.to_str().unwrap();
    let mut checked = 0;
    // synth
    let dirs: Vec<PathBuf> = (0..2).map(|i| ws.root.join(format!("det/synth{i}"))).collect();
    for d in &dirs {
        ensure(
            sbl(&["synth", "--config", c, "--out", d.to_str().unwrap(), "--seed", "5"]) == 0,
            || "synth failed".into(),
        )?;
    }
    let (a, b) = (read_tree(&dirs[0]), read_tree(&dirs[1]));
    ensure(a == b, || "synth outputs differ".into())?;
    checked += a.len();
    // stats
    let stats: Vec<PathBuf> = (0..2).map(|i| ws.root.join(format!("det/stats{i}.json"))).collect();
    for s in &stats {
        let set = format!("data.stats={}", s.display());
        ensure(sbl(&["stats", "--config", c, "--set", &set]) == 0, || {
            "stats failed".into()
        })?;
    }
    ensure(fs::read(&stats[0]).unwrap() == fs::read(&stats[1]).unwrap(), || {
        "stats outputs differ".into()
    })?;
    checked += 1;
    // seeded train, salience weighting on
    let runs: Vec<PathBuf> = (0..2).map(|i| ws.root.join(format!("det/train{i}"))).collect();
    let set = format!("data.stats={}", stats[0].display());
    for r in &runs {
        let code = sbl(&[
            "train",
            "--config",
            c,
            "--out",
            r.to_str().unwrap(),
            "--seed",
            "7",
            "--set",
            "train.iterations=60",
            "--set",
            &set,
        ]);
        ensure(code == 0, || format!("train exited {code}"))?;
    }
    for f in [
        "model.ckpt",
        "train_log.jsonl",
        "loss.csv",
        "weights.csv",
        "config.toml",
        "summary.json",
    ] {
        ensure(
            fs::read(runs[0].join(f)).unwrap() == fs::read(runs[1].join(f)).unwrap(),
            || format!("{f} differs"),
        )?;
        checked += 1;
    }
    Ok(format!("{checked} artifacts byte-identical across repeated runs"))
}

// ----------------------------------------------------------------- driver

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |name: &str| filters.is_empty() || filters.iter().any(|f| name.contains(f.as_str()));
    panic::set_hook(Box::new(|info| eprintln!("{info}")));

    let mut results: Vec<(&str, Outcome, Duration)> = Vec::new();
    let mut run = |name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        if !wanted(name) {
            return;
        }
        let t0 = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = t0.elapsed();
        match &outcome {
            Ok(detail) => println!("PASS  {name:<26} {detail}"),
            Err(why) => println!("FAIL  {name:<26} {why}"),
        }
        results.push((name, outcome, elapsed));
    };

    run("loss identities", &mut loss_identities);
    run("focal hand value", &mut focal_hand_value);
    run("focal gradient check", &mut focal_gradient_check);
    run("normalization contract", &mut normalization_contract);
    run("oracle equivalence", &mut oracle_equivalence);
    run("anchor contract", &mut anchor_contract);
    run("frozen extractor", &mut frozen_extractor);
    run("salience separation", &mut salience_separation);

    let needs_corpus = ["training smoke", "directional sbl check", "determinism"];
    if needs_corpus.iter().any(|n| wanted(n)) {
        match desk_workspace() {
            Ok(ws) => {
                run("training smoke", &mut || training_smoke(&ws));
                run("directional sbl check", &mut || directional_sbl(&ws));
                run("determinism", &mut || determinism(&ws));
            }
            Err(e) => {
                for n in needs_corpus {
                    run(n, &mut || Err(format!("corpus setup failed: {e}")));
                }
            }
        }
    }

    let failed = results.iter().filter(|r| r.1.is_err()).count();
    let total: Duration = results.iter().map(|r| r.2).sum();
    println!(
        "\nacceptance: {} passed, {failed} failed ({total:.0?})",
        results.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
