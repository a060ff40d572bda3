//! Images, annotations, chipping and synthetic scenes.

mod annotations;
mod chip;
mod synth;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

pub use annotations::{
    corpus_hash, load_annotations, load_dota, load_native, write_native, AnnotationFormat, DOTA_CLASSES, NATIVE_FORMAT,
    NATIVE_VERSION,
};
pub use chip::{chip_image, chip_offsets, MIN_RETAINED_AREA};
pub use synth::{synthesize_dataset, SynthConfig, SYNTH_CLASSES};

/// 8-bit RGB pixels, row-major, interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbPixels {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbPixels {
    pub fn new(width: usize, height: usize) -> Self {
        RgbPixels {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn read(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .into_rgb8();
        Ok(RgbPixels {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.into_raw(),
        })
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        image::save_buffer(
            path,
            &self.data,
            self.width as u32,
            self.height as u32,
            image::ColorType::Rgb8,
        )
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Whole image as a chip at offset (0, 0).
    pub fn to_chip(&self, source_id: &str) -> ImageChip {
        ImageChip {
            width: self.width,
            height: self.height,
            pixels: self.data.iter().map(|&v| f32::from(v) / 255.0).collect(),
            source_id: source_id.to_string(),
            offset: (0, 0),
        }
    }
}

/// A fixed-size network input: HxWx3 floats in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageChip {
    pub width: usize,
    pub height: usize,
    /// Row-major, channel-interleaved.
    pub pixels: Vec<f32>,
    pub source_id: String,
    /// Top-left corner in source image coordinates.
    pub offset: (usize, usize),
}

impl ImageChip {
    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut pixels = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            pixels.extend_from_slice(&rgb);
        }
        ImageChip {
            width,
            height,
            pixels,
            source_id: String::new(),
            offset: (0, 0),
        }
    }

    /// Channel-planar copy (CxHxW).
    pub fn to_planar(&self) -> Vec<f32> {
        let plane = self.width * self.height;
        let mut out = vec![0.0; plane * 3];
        for (i, px) in self.pixels.chunks_exact(3).enumerate() {
            out[i] = px[0];
            out[plane + i] = px[1];
            out[2 * plane + i] = px[2];
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub bbox: BBox,
    pub class_id: usize,
    #[serde(default)]
    pub difficult: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ImageSource {
    Pixels(RgbPixels),
    File(PathBuf),
    /// Annotation-only record.
    Missing,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedImage {
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub source: ImageSource,
    pub objects: Vec<Annotation>,
    /// Background complexity used to synthesize the image, if synthetic.
    pub complexity: Option<f64>,
}

impl AnnotatedImage {
    pub fn load_pixels(&self) -> Result<RgbPixels> {
        match &self.source {
            ImageSource::Pixels(p) => Ok(p.clone()),
            ImageSource::File(path) => RgbPixels::read(path),
            ImageSource::Missing => Err(Error::invalid(
                "image",
                format!("image `{}` has no pixel source", self.id),
            )),
        }
    }

    pub fn ground_truth(&self) -> Vec<(BBox, usize)> {
        self.objects.iter().map(|o| (o.bbox, o.class_id)).collect()
    }
}

/// Annotated images sharing one class table.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub images: Vec<AnnotatedImage>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Loads every image into memory.
    pub fn materialize(mut self) -> Result<Self> {
        for img in &mut self.images {
            if !matches!(img.source, ImageSource::Pixels(_)) {
                img.source = ImageSource::Pixels(img.load_pixels()?);
            }
        }
        Ok(self)
    }
}
