use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use sbl_bench::{desk_detector_config, detection_cloud, synthetic_chips};
use sbl_core::losses::{focal_loss_with_grad, total_loss_with_grad};
use sbl_core::{
    assign_targets, generate_anchors, iou, nms, AnchorConfig, BoxDelta, Detector, FocalConfig, ImageWeight, LossConfig,
    MatchThresholds,
};

fn geometry(c: &mut Criterion) {
    let dets = detection_cloud(1000);
    c.bench_function("iou_pairs_1000", |b| {
        b.iter(|| dets.windows(2).map(|w| iou(&w[0].bbox, &w[1].bbox)).sum::<f64>())
    });
    c.bench_function("nms_1000", |b| b.iter(|| nms(black_box(&dets), 0.5).unwrap()));
}

fn anchors(c: &mut Criterion) {
    let cfg = AnchorConfig::full_pyramid();
    c.bench_function("anchors_full_pyramid_640x480", |b| {
        b.iter(|| generate_anchors(black_box(640), black_box(480), &cfg).unwrap())
    });
    let set = generate_anchors(512, 512, &cfg).unwrap();
    let gts: Vec<_> = detection_cloud(12).into_iter().map(|d| (d.bbox, d.class_id)).collect();
    c.bench_function("assign_targets_512", |b| {
        b.iter(|| assign_targets(&set, black_box(&gts), MatchThresholds::default()).unwrap())
    });
}

fn losses(c: &mut Criterion) {
    let cfg = FocalConfig::default();
    c.bench_function("focal_with_grad_10k", |b| {
        b.iter(|| {
            (0..10_000)
                .map(|i| {
                    focal_loss_with_grad(f64::from(i) / 1000.0 - 5.0, (i % 7 == 0) as u8, &cfg)
                        .unwrap()
                        .0
                })
                .sum::<f64>()
        })
    });

    let det_cfg = desk_detector_config();
    let set = generate_anchors(det_cfg.input_size, det_cfg.input_size, &det_cfg.anchors).unwrap();
    let chips = synthetic_chips(1);
    let gts: Vec<_> = chips[0].1.iter().map(|a| (a.bbox, a.class_id)).collect();
    let map = assign_targets(&set, &gts, MatchThresholds::default()).unwrap();
    let k = det_cfg.num_classes;
    let logits: Vec<f64> = (0..set.len() * k).map(|i| (i % 11) as f64 * 0.3 - 3.0).collect();
    let boxes = vec![BoxDelta::new(0.1, -0.1, 0.05, 0.0); set.len()];
    let loss_cfg = LossConfig::default();
    c.bench_function("total_loss_with_grad_desk", |b| {
        b.iter(|| total_loss_with_grad(&map, black_box(&logits), k, &boxes, ImageWeight::UNIT, &loss_cfg).unwrap())
    });
}

fn detector(c: &mut Criterion) {
    let det = Detector::new(desk_detector_config(), 0).unwrap();
    let chips: Vec<_> = synthetic_chips(2).into_iter().map(|(c, _)| c).collect();
    c.bench_function("detector_forward_128", |b| {
        b.iter(|| det.forward(black_box(&chips[..1])).unwrap())
    });
    c.bench_function("detector_predict_128", |b| {
        b.iter(|| det.predict(black_box(&chips[1]), &Default::default()).unwrap())
    });
}

criterion_group!(benches, geometry, anchors, losses, detector);
criterion_main!(benches);
