use super::{AnnotatedImage, Annotation, ImageChip, RgbPixels};
use crate::error::{Error, Result};

/// Boxes cut by a chip border survive only if this fraction of their area remains.
pub const MIN_RETAINED_AREA: f64 = 0.3;

/// Chip origins along one axis: stride `chip - overlap`, with the last chip
/// shifted inward so it ends exactly at the image border.
pub fn chip_offsets(extent: usize, chip: usize, overlap: usize) -> Vec<usize> {
    if extent <= chip {
        return vec![0];
    }
    let stride = chip - overlap;
    let mut offsets = vec![0];
    let mut x = 0;
    while x + chip < extent {
        x += stride;
        if x + chip > extent {
            x = extent - chip;
        }
        offsets.push(x);
    }
    offsets
}

/// Tiles an image into `chip_size` squares.
///
/// Images smaller than a chip are zero-padded into a single chip. Each box is
/// clipped to every chip it intersects and kept there when at least
/// [`MIN_RETAINED_AREA`] of its original area remains; kept boxes are in chip
/// coordinates.
pub fn chip_image(
    img: &AnnotatedImage,
    pixels: &RgbPixels,
    chip_size: usize,
    overlap: usize,
) -> Result<Vec<(ImageChip, Vec<Annotation>)>> {
    if chip_size == 0 || overlap >= chip_size {
        return Err(Error::invalid(
            "overlap",
            format!("need 0 <= overlap ({overlap}) < chip_size ({chip_size})"),
        ));
    }
    let xs = chip_offsets(pixels.width, chip_size, overlap);
    let ys = chip_offsets(pixels.height, chip_size, overlap);
    let mut chips = Vec::with_capacity(xs.len() * ys.len());
    for &y0 in &ys {
        for &x0 in &xs {
            let mut data = vec![0.0f32; chip_size * chip_size * 3];
            let w = chip_size.min(pixels.width - x0);
            let h = chip_size.min(pixels.height - y0);
            for row in 0..h {
                let src = ((y0 + row) * pixels.width + x0) * 3;
                let dst = row * chip_size * 3;
                for (d, s) in data[dst..dst + w * 3].iter_mut().zip(&pixels.data[src..src + w * 3]) {
                    *d = f32::from(*s) / 255.0;
                }
            }
            let window = crate::geometry::BBox {
                x_min: x0 as f64,
                y_min: y0 as f64,
                x_max: (x0 + w) as f64,
                y_max: (y0 + h) as f64,
            };
            let boxes = img
                .objects
                .iter()
                .filter_map(|o| {
                    let area = o.bbox.area();
                    let clipped = o.bbox.intersect(&window)?;
                    (area > 0.0 && clipped.area() >= MIN_RETAINED_AREA * area).then(|| Annotation {
                        bbox: clipped.translate(-(x0 as f64), -(y0 as f64)),
                        class_id: o.class_id,
                        difficult: o.difficult,
                    })
                })
                .collect();
            chips.push((
                ImageChip {
                    width: chip_size,
                    height: chip_size,
                    pixels: data,
                    source_id: img.id.clone(),
                    offset: (x0, y0),
                },
                boxes,
            ));
        }
    }
    Ok(chips)
}
