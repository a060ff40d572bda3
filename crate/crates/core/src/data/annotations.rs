//! Annotation readers and the native line-delimited writer.
//!
//! Native format (`annotations.jsonl`): the first line is a header
//! `{"format":"sbl-annotations","version":1,"classes":[...]}`, followed by
//! one JSON record per image:
//!
//! ```text
//! {"id":"000001","file":"images/000001.png","width":128,"height":128,
//!  "complexity":0.4,"objects":[{"bbox":[x_min,y_min,x_max,y_max],"class":"disc","difficult":false}]}
//! ```
//!
//! `file` is relative to the annotation file's directory. `complexity` is
//! present only for synthetic images.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AnnotatedImage, Annotation, Dataset, ImageSource, RgbPixels};
use crate::error::{Error, Result};
use crate::geometry::BBox;

pub const NATIVE_FORMAT: &str = "sbl-annotations";
pub const NATIVE_VERSION: u32 = 1;
const NATIVE_FILE: &str = "annotations.jsonl";

/// DOTA v1.0 categories.
pub const DOTA_CLASSES: [&str; 15] = [
    "plane",
    "ship",
    "storage-tank",
    "baseball-diamond",
    "tennis-court",
    "basketball-court",
    "ground-track-field",
    "harbor",
    "bridge",
    "large-vehicle",
    "small-vehicle",
    "helicopter",
    "roundabout",
    "soccer-ball-field",
    "swimming-pool",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnnotationFormat {
    NativeJson,
    DotaHbb,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    classes: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    file: Option<String>,
    width: usize,
    height: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    complexity: Option<f64>,
    objects: Vec<ObjectRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObjectRecord {
    bbox: [f64; 4],
    class: String,
    #[serde(default)]
    difficult: bool,
}

pub fn load_annotations(path: &Path, format: AnnotationFormat) -> Result<Dataset> {
    match format {
        AnnotationFormat::NativeJson => load_native(path),
        AnnotationFormat::DotaHbb => load_dota(path, &DOTA_CLASSES),
    }
}

fn native_file(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(NATIVE_FILE)
    } else {
        path.to_path_buf()
    }
}

/// Reads a native annotation file, or the `annotations.jsonl` inside a directory.
pub fn load_native(path: &Path) -> Result<Dataset> {
    let file = native_file(path);
    let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
    let reader = BufReader::new(fs::File::open(&file).map_err(|e| Error::io(&file, e))?);
    let malformed = |line: usize, reason: String| Error::Malformed {
        path: file.clone(),
        line,
        reason,
    };

    let mut lines = reader.lines().enumerate();
    let header: Header = match lines.next() {
        Some((_, l)) => {
            let l = l.map_err(|e| Error::io(&file, e))?;
            serde_json::from_str(&l).map_err(|e| malformed(1, format!("bad header: {e}")))?
        }
        None => return Err(malformed(1, "missing header".into())),
    };
    if header.format != NATIVE_FORMAT || header.version != NATIVE_VERSION {
        return Err(malformed(
            1,
            format!(
                "unsupported format {} v{} (expected {NATIVE_FORMAT} v{NATIVE_VERSION})",
                header.format, header.version
            ),
        ));
    }

    let mut images = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(&file, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| malformed(line_no, e.to_string()))?;
        let mut objects = Vec::with_capacity(rec.objects.len());
        for o in rec.objects {
            let class_id = class_index(&header.classes, &o.class, &file)?;
            let [a, b, c, d] = o.bbox;
            let bbox = BBox::new(a, b, c, d).map_err(|e| malformed(line_no, e.to_string()))?;
            objects.push(Annotation {
                bbox,
                class_id,
                difficult: o.difficult,
            });
        }
        let source = match rec.file {
            Some(f) => ImageSource::File(root.join(f)),
            None => ImageSource::Missing,
        };
        images.push(AnnotatedImage {
            id: rec.id,
            width: rec.width,
            height: rec.height,
            source,
            objects,
            complexity: rec.complexity,
        });
    }
    Ok(Dataset {
        classes: header.classes,
        images,
    })
}

fn class_index(classes: &[String], name: &str, path: &Path) -> Result<usize> {
    classes
        .iter()
        .position(|c| c == name)
        .ok_or_else(|| Error::UnknownCategory {
            name: name.to_string(),
            path: path.to_path_buf(),
            known: classes.to_vec(),
        })
}

/// Writes `dir/annotations.jsonl`, plus `dir/images/<id>.png` for every
/// in-memory image.
pub fn write_native(dataset: &Dataset, dir: &Path) -> Result<()> {
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let file = dir.join(NATIVE_FILE);
    let mut out = BufWriter::new(fs::File::create(&file).map_err(|e| Error::io(&file, e))?);

    let header = Header {
        format: NATIVE_FORMAT.into(),
        version: NATIVE_VERSION,
        classes: dataset.classes.clone(),
    };
    let mut write_line = |v: String| writeln!(out, "{v}").map_err(|e| Error::io(&file, e));
    write_line(serde_json::to_string(&header)?)?;

    for img in &dataset.images {
        let file_ref = match &img.source {
            ImageSource::Pixels(p) => {
                let rel = format!("images/{}.png", img.id);
                p.write_png(&dir.join(&rel))?;
                Some(rel)
            }
            ImageSource::File(p) => Some(p.to_string_lossy().into_owned()),
            ImageSource::Missing => None,
        };
        let rec = Record {
            id: img.id.clone(),
            file: file_ref,
            width: img.width,
            height: img.height,
            complexity: img.complexity,
            objects: img
                .objects
                .iter()
                .map(|o| ObjectRecord {
                    bbox: o.bbox.to_array(),
                    class: dataset.classes[o.class_id].clone(),
                    difficult: o.difficult,
                })
                .collect(),
        };
        write_line(serde_json::to_string(&rec)?)?;
    }
    out.flush().map_err(|e| Error::io(&file, e))
}

/// Reads DOTA horizontal-box labels.
///
/// `path` is either a directory of per-image `.txt` label files or a DOTA
/// split directory containing `labelTxt/` (and optionally `images/`). Each
/// line holds eight corner coordinates, the category and the difficult flag;
/// the quadrilateral becomes its axis-aligned hull. `imagesource:` and `gsd:`
/// metadata lines are skipped.
pub fn load_dota(path: &Path, classes: &[&str]) -> Result<Dataset> {
    let label_dir = if path.join("labelTxt").is_dir() {
        path.join("labelTxt")
    } else {
        path.to_path_buf()
    };
    let image_dir = label_dir.parent().map(|p| p.join("images")).filter(|p| p.is_dir());
    let classes: Vec<String> = classes.iter().map(|s| s.to_string()).collect();

    let mut label_files: Vec<PathBuf> = fs::read_dir(&label_dir)
        .map_err(|e| Error::io(&label_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .collect();
    label_files.sort();

    let mut images = Vec::with_capacity(label_files.len());
    for file in label_files {
        let id = file
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let mut objects = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with("imagesource:") || line.starts_with("gsd:") {
                continue;
            }
            objects.push(parse_dota_line(line, &classes, &file, i + 1)?);
        }

        let image_path = image_dir.as_ref().and_then(|d| {
            ["png", "jpg", "tif"]
                .iter()
                .map(|ext| d.join(format!("{id}.{ext}")))
                .find(|p| p.is_file())
        });
        let (width, height, source) = match image_path {
            Some(p) => {
                let (w, h) = image::image_dimensions(&p).map_err(|source| Error::Image {
                    path: p.clone(),
                    source,
                })?;
                (w as usize, h as usize, ImageSource::File(p))
            }
            None => {
                let w = objects.iter().map(|o| o.bbox.x_max).fold(0.0, f64::max);
                let h = objects.iter().map(|o| o.bbox.y_max).fold(0.0, f64::max);
                (w.ceil() as usize, h.ceil() as usize, ImageSource::Missing)
            }
        };
        images.push(AnnotatedImage {
            id,
            width,
            height,
            source,
            objects,
            complexity: None,
        });
    }
    Ok(Dataset { classes, images })
}

fn parse_dota_line(line: &str, classes: &[String], file: &Path, line_no: usize) -> Result<Annotation> {
    let malformed = |reason: String| Error::Malformed {
        path: file.to_path_buf(),
        line: line_no,
        reason,
    };
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() < 9 || fields.len() > 10 {
        return Err(malformed(format!(
            "expected 8 coordinates, a category and a difficult flag, got {} fields",
            fields.len()
        )));
    }
    let mut coords = [0.0f64; 8];
    for (c, f) in coords.iter_mut().zip(&fields[..8]) {
        *c = f.parse().map_err(|_| malformed(format!("bad coordinate `{f}`")))?;
    }
    let class_id = class_index(classes, fields[8], file)?;
    let difficult = match fields.get(9) {
        None => false,
        Some(f) => {
            f.parse::<i64>()
                .map_err(|_| malformed(format!("bad difficult flag `{f}`")))?
                != 0
        }
    };
    let xs = coords.iter().step_by(2);
    let ys = coords.iter().skip(1).step_by(2);
    let (x_min, x_max) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    let (y_min, y_max) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    let bbox = BBox::new(x_min, y_min, x_max, y_max).map_err(|e| malformed(e.to_string()))?;
    Ok(Annotation {
        bbox,
        class_id,
        difficult,
    })
}

/// Content hash over the class table, every annotation and every pixel.
pub fn corpus_hash(dataset: &Dataset) -> Result<String> {
    let mut h = Sha256::new();
    for c in &dataset.classes {
        h.update(c.as_bytes());
        h.update([0u8]);
    }
    for img in &dataset.images {
        h.update(img.id.as_bytes());
        h.update([0u8]);
        h.update((img.width as u64).to_le_bytes());
        h.update((img.height as u64).to_le_bytes());
        h.update((img.objects.len() as u64).to_le_bytes());
        for o in &img.objects {
            for v in o.bbox.to_array() {
                h.update(v.to_le_bytes());
            }
            h.update((o.class_id as u64).to_le_bytes());
            h.update([u8::from(o.difficult)]);
        }
        let pixels: Option<RgbPixels> = match &img.source {
            ImageSource::Missing => None,
            _ => Some(img.load_pixels()?),
        };
        match pixels {
            Some(p) => {
                h.update([1u8]);
                h.update(&p.data);
            }
            None => h.update([0u8]),
        }
    }
    Ok(hex::encode(h.finalize()))
}
