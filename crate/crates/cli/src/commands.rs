//! One function per subcommand. Each writes its artifacts into a run
//! directory and returns a short human-readable summary.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use sbl_core::data::{chip_image, corpus_hash, load_annotations, synthesize_dataset, write_native};
use sbl_core::evaluation::evaluate;
use sbl_core::model::{prepare_samples, training_chips, StepRecord};
use sbl_core::salience::{compute_stats, rank_images};
use sbl_core::{
    nms, AnnotatedImage, Annotation, Checkpoint, ConvExtractor, Dataset, Detection, Detector, EvalConfig, EvalResult,
    FrozenExtractor, ImageChip, ImageSource, PredictConfig, RgbPixels, SalienceStats, TapId, Trainer,
};

use crate::config::{LoadedConfig, RunConfig};
use crate::exit::ConfigError;

pub(crate) fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Refuses to clobber a primary artifact unless `force` is set.
fn guard_overwrite(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(ConfigError::new(format!("{} already exists; pass --force to overwrite", path.display())).into());
    }
    Ok(())
}

fn required<'a>(path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    let p = path
        .as_deref()
        .ok_or_else(|| ConfigError::new(format!("`{key}` is not set in the config")))?;
    if !p.exists() {
        return Err(ConfigError::new(format!("`{key}` = {} does not exist", p.display())).into());
    }
    Ok(p)
}

pub fn load_dataset(cfg: &RunConfig, path: &Path) -> Result<Dataset> {
    let ds = load_annotations(path, cfg.data.format).with_context(|| format!("loading dataset {}", path.display()))?;
    Ok(ds.materialize()?)
}

pub fn load_extractor(cfg: &RunConfig) -> Result<ConvExtractor> {
    match &cfg.data.extractor {
        Some(p) => Ok(ConvExtractor::load(p).with_context(|| format!("loading extractor {}", p.display()))?),
        None => Ok(ConvExtractor::default()),
    }
}

/// Detector predictions for every chip, paired with the chip's annotations.
pub fn evaluate_detector(
    detector: &Detector,
    chips: &[(ImageChip, Vec<Annotation>)],
    classes: &[String],
    predict: &PredictConfig,
    eval: &EvalConfig,
) -> Result<EvalResult> {
    let pairs = chips
        .iter()
        .map(|(chip, anns)| Ok((detector.predict(chip, predict)?, anns.clone())))
        .collect::<Result<Vec<_>>>()?;
    Ok(evaluate(&pairs, classes, eval)?)
}

pub fn synth(loaded: &LoadedConfig, out: &Path, force: bool) -> Result<String> {
    let cfg = &loaded.config;
    guard_overwrite(&out.join("annotations.jsonl"), force)?;
    ensure_dir(out)?;
    let ds = synthesize_dataset(&cfg.synth)?;
    write_native(&ds, out)?;
    write_file(&out.join("config.toml"), loaded.snapshot()?)?;
    Ok(format!("wrote {} synthetic images to {}", ds.len(), out.display()))
}

pub fn stats(loaded: &LoadedConfig, out: &Path, force: bool) -> Result<String> {
    let cfg = &loaded.config;
    let train = required(&cfg.data.train, "data.train")?;
    let target = cfg.data.stats.clone().unwrap_or_else(|| out.join("stats.json"));
    guard_overwrite(&target, force)?;
    let ds = load_dataset(cfg, train)?;
    let chips: Vec<ImageChip> = training_chips(&ds, cfg.detector.input_size)?
        .into_iter()
        .map(|(c, _)| c)
        .collect();
    let extractor = load_extractor(cfg)?;
    let stats = compute_stats(
        &chips,
        &extractor,
        &TapId::ALL,
        (cfg.train.new_min, cfg.train.new_max),
        &corpus_hash(&ds)?,
    )?;
    if let Some(parent) = target.parent() {
        ensure_dir(parent)?;
    }
    stats.save(&target)?;
    let mut msg = format!(
        "salience statistics over {} images -> {}\n",
        stats.num_images,
        target.display()
    );
    for t in &stats.taps {
        let _ = writeln!(msg, "  {}: min {:.6} max {:.6}", t.tap_id, t.min, t.max);
    }
    Ok(msg)
}

#[derive(Serialize)]
struct WeightRow<'a> {
    image_id: &'a str,
    raw_salience: f64,
    weight: f64,
}

#[derive(Serialize)]
struct TrainSummary {
    steps: u64,
    num_samples: usize,
    first_loss: f64,
    final_loss: f64,
    extractor_fingerprint: String,
    corpus_hash: String,
}

pub fn train(loaded: &LoadedConfig, out: &Path, force: bool) -> Result<String> {
    let cfg = &loaded.config;
    let train_path = required(&cfg.data.train, "data.train")?;
    guard_overwrite(&out.join("model.ckpt"), force)?;
    let stats = if cfg.train.sbl_enabled {
        let p = cfg.data.stats.as_deref().ok_or_else(|| {
            ConfigError::new("salience weighting is on but `data.stats` is not set; run `sbl stats` first")
        })?;
        if !p.exists() {
            return Err(ConfigError::new(format!(
                "statistics file {} not found; run `sbl stats` first",
                p.display()
            ))
            .into());
        }
        Some(SalienceStats::load(p)?)
    } else {
        None
    };
    let ds = load_dataset(cfg, train_path)?;
    let hash = corpus_hash(&ds)?;
    let extractor = load_extractor(cfg)?;
    let chips = training_chips(&ds, cfg.detector.input_size)?;

    let mut trainer = Trainer::new(cfg.detector.clone(), cfg.train.clone())?;
    let salience = stats
        .as_ref()
        .map(|s| (s, &extractor as &dyn FrozenExtractor, hash.as_str()));
    let samples = prepare_samples(chips, trainer.detector(), &cfg.train, salience)?;

    ensure_dir(out)?;
    write_file(&out.join("config.toml"), loaded.snapshot()?)?;
    let mut weights = String::from("image_id,raw_salience,weight\n");
    for s in &samples {
        let row = WeightRow {
            image_id: &s.chip.source_id,
            raw_salience: s.weight.raw,
            weight: s.weight.weight,
        };
        let _ = writeln!(weights, "{},{},{}", row.image_id, row.raw_salience, row.weight);
    }
    write_file(&out.join("weights.csv"), weights)?;

    let log_path = out.join("train_log.jsonl");
    let mut log = std::io::BufWriter::new(
        fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?,
    );
    let mut curve = String::from("step,lr,loss,focal_sum,l1_sum,num_pos\n");
    let mut first_loss = None;
    let mut last_loss = 0.0;
    let every = cfg.output.checkpoint_every;
    trainer.fit(&samples, |r: &StepRecord, t: &Trainer| {
        serde_json::to_writer(&mut log, r)?;
        log.write_all(b"\n").map_err(|e| sbl_core::Error::Io {
            path: log_path.clone(),
            source: e,
        })?;
        let n = r.images.len() as f64;
        let mean = |f: &dyn Fn(&sbl_core::LossBreakdown) -> f64| r.images.iter().map(|i| f(&i.loss)).sum::<f64>() / n;
        let _ = writeln!(
            curve,
            "{},{},{},{},{},{}",
            r.step,
            r.lr,
            r.batch_loss,
            mean(&|l| l.focal_sum),
            mean(&|l| l.l1_sum),
            mean(&|l| l.num_pos as f64)
        );
        first_loss.get_or_insert(r.batch_loss);
        last_loss = r.batch_loss;
        let done = t.step();
        if every > 0 && done.is_multiple_of(every) && done < t.config().iterations {
            let path = out.join(format!("ckpt-{done:06}.ckpt"));
            Checkpoint::from_trainer(t, &ds.classes, stats.as_ref()).save(&path)?;
        }
        if r.step.is_multiple_of(100) {
            eprintln!("step {:>6}  lr {:.1e}  loss {:.5}", r.step, r.lr, r.batch_loss);
        }
        Ok(())
    })?;
    drop(log);
    write_file(&out.join("loss.csv"), curve)?;
    Checkpoint::from_trainer(&trainer, &ds.classes, stats.as_ref()).save(&out.join("model.ckpt"))?;
    let summary = TrainSummary {
        steps: trainer.step(),
        num_samples: samples.len(),
        first_loss: first_loss.unwrap_or(0.0),
        final_loss: last_loss,
        extractor_fingerprint: extractor.fingerprint(),
        corpus_hash: hash,
    };
    write_file(
        &out.join("summary.json"),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    Ok(format!(
        "trained {} steps on {} images (loss {:.4} -> {:.4}); checkpoint {}",
        summary.steps,
        summary.num_samples,
        summary.first_loss,
        summary.final_loss,
        out.join("model.ckpt").display()
    ))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(ConfigError::new(format!("checkpoint {} does not exist", path.display())).into());
    }
    Ok(Checkpoint::load(path)?)
}

pub fn eval(loaded: &LoadedConfig, out: &Path, checkpoint: &Path) -> Result<String> {
    let cfg = &loaded.config;
    let test = required(&cfg.data.test, "data.test")?;
    let ck = load_checkpoint(checkpoint)?;
    let ds = load_dataset(cfg, test)?;
    let chips = training_chips(&ds, ck.header.detector.input_size)?;
    let result = evaluate_detector(&ck.detector, &chips, &ds.classes, &cfg.predict, &cfg.eval)?;
    ensure_dir(out)?;
    write_file(&out.join("config.toml"), loaded.snapshot()?)?;
    write_file(&out.join("eval.json"), result.to_json()?)?;
    write_file(&out.join("eval.md"), result.to_markdown())?;
    write_file(&out.join("pr_curve.csv"), result.pr_curve_csv())?;
    Ok(result.to_markdown())
}

pub fn rank(loaded: &LoadedConfig, out: &Path, k: usize, tap: Option<TapId>) -> Result<String> {
    let cfg = &loaded.config;
    let train = required(&cfg.data.train, "data.train")?;
    let tap = tap.unwrap_or(cfg.train.tap);
    let ds = load_dataset(cfg, train)?;
    let extractor = load_extractor(cfg)?;
    let stats = match &cfg.data.stats {
        Some(p) if p.exists() => {
            let s = SalienceStats::load(p)?;
            s.check_fresh(&corpus_hash(&ds)?, &extractor.fingerprint())?;
            Some(s)
        }
        _ => None,
    };
    let chips: Vec<ImageChip> = training_chips(&ds, cfg.detector.input_size)?
        .into_iter()
        .map(|(c, _)| c)
        .collect();
    let ranking = rank_images(&chips, &extractor, tap, k, stats.as_ref())?;
    ensure_dir(out)?;
    write_file(&out.join("rank.json"), serde_json::to_string_pretty(&ranking)? + "\n")?;
    write_file(&out.join("histogram.csv"), ranking.histogram.to_csv())?;
    let mut msg = format!("top {} by salience at {tap}:\n", ranking.top.len());
    for r in &ranking.top {
        let _ = writeln!(msg, "  {}  {:.6}  {:.4}", r.image_id, r.raw_s, r.normalized_s);
    }
    let _ = writeln!(msg, "bottom {}:", ranking.bottom.len());
    for r in &ranking.bottom {
        let _ = writeln!(msg, "  {}  {:.6}  {:.4}", r.image_id, r.raw_s, r.normalized_s);
    }
    write_file(&out.join("rank.txt"), &msg)?;
    Ok(msg)
}

#[derive(Serialize)]
struct DetectionRecord<'a> {
    bbox: [f64; 4],
    score: f64,
    class_id: usize,
    class: &'a str,
}

#[derive(Serialize)]
struct ImageDetections<'a> {
    image: String,
    width: usize,
    height: usize,
    detections: Vec<DetectionRecord<'a>>,
}

/// Detections for a whole image. Images larger than the detector input are
/// tiled; per-tile detections are shifted back and merged with a global NMS.
pub fn predict_image(detector: &Detector, px: RgbPixels, id: &str, cfg: &PredictConfig) -> Result<Vec<Detection>> {
    let n = detector.config().input_size;
    if px.width == n && px.height == n {
        return Ok(detector.predict(&px.to_chip(id), cfg)?);
    }
    let img = AnnotatedImage {
        id: id.to_string(),
        width: px.width,
        height: px.height,
        source: ImageSource::Missing,
        objects: Vec::new(),
        complexity: None,
    };
    let mut all = Vec::new();
    for (chip, _) in chip_image(&img, &px, n, n / 4)? {
        let (dx, dy) = (chip.offset.0 as f64, chip.offset.1 as f64);
        for d in detector.predict(&chip, cfg)? {
            all.push(Detection {
                bbox: d.bbox.translate(dx, dy).clip(px.width as f64, px.height as f64),
                ..d
            });
        }
    }
    let mut kept = nms(&all, cfg.nms_threshold)?;
    kept.truncate(cfg.max_detections);
    Ok(kept)
}

fn image_files(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    if !input.is_dir() {
        return Err(ConfigError::new(format!("input {} does not exist", input.display())).into());
    }
    let mut files: Vec<PathBuf> = fs::read_dir(input)
        .with_context(|| format!("listing {}", input.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        })
        .collect();
    files.sort();
    Ok(files)
}

pub fn predict(loaded: &LoadedConfig, out: &Path, checkpoint: &Path, input: &Path) -> Result<String> {
    let cfg = &loaded.config;
    let ck = load_checkpoint(checkpoint)?;
    let files = image_files(input)?;
    let mut lines = String::new();
    let mut total = 0;
    for f in &files {
        let px = RgbPixels::read(f)?;
        let id = f.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string();
        let (w, h) = (px.width, px.height);
        let dets = predict_image(&ck.detector, px, &id, &cfg.predict)?;
        total += dets.len();
        let record = ImageDetections {
            image: f.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string(),
            width: w,
            height: h,
            detections: dets
                .iter()
                .map(|d| DetectionRecord {
                    bbox: d.bbox.to_array(),
                    score: d.score,
                    class_id: d.class_id,
                    class: ck.header.classes.get(d.class_id).map_or("", String::as_str),
                })
                .collect(),
        };
        lines.push_str(&serde_json::to_string(&record)?);
        lines.push('\n');
    }
    ensure_dir(out)?;
    write_file(&out.join("detections.jsonl"), lines)?;
    Ok(format!(
        "{total} detections over {} images -> {}",
        files.len(),
        out.join("detections.jsonl").display()
    ))
}
