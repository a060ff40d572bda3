//! Fixtures shared by the benchmarks.

use sbl_core::data::{synthesize_dataset, SynthConfig};
use sbl_core::model::training_chips;
use sbl_core::{AnchorConfig, Annotation, BBox, Detection, DetectorConfig, ImageChip};

/// Small detector matching the desk configuration.
pub fn desk_detector_config() -> DetectorConfig {
    DetectorConfig {
        input_size: 128,
        anchors: AnchorConfig {
            base_sizes: vec![16.0, 32.0],
            strides: vec![8.0, 16.0],
            ..AnchorConfig::default()
        },
        ..DetectorConfig::default()
    }
}

/// A handful of synthetic 128 px chips with their annotations.
pub fn synthetic_chips(n: usize) -> Vec<(ImageChip, Vec<Annotation>)> {
    let ds = synthesize_dataset(&SynthConfig {
        num_images: n,
        image_size: 128,
        seed: 7,
        ..SynthConfig::default()
    })
    .expect("synthetic corpus");
    training_chips(&ds, 128).expect("chips")
}

/// Overlapping detections on a jittered grid, deterministic.
pub fn detection_cloud(n: usize) -> Vec<Detection> {
    (0..n)
        .map(|i| {
            let x = (i % 20) as f64 * 12.0 + (i * 7 % 5) as f64;
            let y = (i / 20) as f64 * 12.0 + (i * 3 % 5) as f64;
            let score = ((i * 2654435761) % 1000) as f64 / 1000.0;
            Detection::new(BBox::from_center(x, y, 24.0, 20.0), score, i % 3)
        })
        .collect()
}
