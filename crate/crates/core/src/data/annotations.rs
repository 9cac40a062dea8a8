//! JSONL annotation files: one `{"id", "image", "captions", "split"}` object
//! per line. `image` is either a path (relative to the file) to a PPM image
//! or an inline `[H][W][C]` array.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Deserialize;
use serde_json::{json, Value};

use super::{validate_pixels, CaptionRecord, ImageSource, SceneDescriptor, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Deserialize)]
#[serde(untagged)]
enum RawImage {
    Path(String),
    Inline(Vec<Vec<Vec<f64>>>),
}

#[derive(Deserialize)]
struct RawRecord {
    id: String,
    image: RawImage,
    captions: Vec<String>,
    split: String,
    #[serde(default)]
    scene: Option<SceneDescriptor>,
}

/// Decodes a PPM (P3 or P6) file into `[H × W × 3]` values in `[0, 1]`.
pub fn load_ppm(path: &Path) -> Result<Tensor> {
    let bad = |reason: String| Error::Image {
        path: path.to_path_buf(),
        reason,
    };
    if !path.is_file() {
        return Err(bad("file not found".into()));
    }
    let img = image::ImageReader::open(path)
        .map_err(|e| bad(e.to_string()))?
        .with_guessed_format()
        .map_err(|e| bad(e.to_string()))?
        .decode()
        .map_err(|e| bad(e.to_string()))?
        .to_rgb32f();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(f64::from).collect();
    Tensor::new(vec![h as usize, w as usize, 3], data).map_err(|e| bad(e.to_string()))
}

fn inline_pixels(rows: Vec<Vec<Vec<f64>>>) -> std::result::Result<Tensor, String> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    let c = rows.first().and_then(|r| r.first()).map_or(0, Vec::len);
    if h == 0 || w == 0 || c == 0 {
        return Err("inline image must be a nonempty [H][W][C] array".into());
    }
    let mut data = Vec::with_capacity(h * w * c);
    for row in rows {
        if row.len() != w {
            return Err("inline image rows have different widths".into());
        }
        for px in row {
            if px.len() != c {
                return Err("inline image pixels have different channel counts".into());
            }
            data.extend(px);
        }
    }
    Tensor::new(vec![h, w, c], data).map_err(|e| e.to_string())
}

/// Parses one JSONL line; image paths resolve against `base_dir`.
pub fn parse_annotation_line(line: &str, base_dir: &Path) -> Result<CaptionRecord> {
    let raw: RawRecord =
        serde_json::from_str(line).map_err(|e| Error::Input(e.to_string()))?;
    let split = Split::parse(&raw.split)
        .ok_or_else(|| Error::Input(format!("unknown split `{}`", raw.split)))?;
    let pixels = match raw.image {
        RawImage::Path(p) => load_ppm(&base_dir.join(p))?,
        RawImage::Inline(rows) => inline_pixels(rows).map_err(Error::Input)?,
    };
    let image = match raw.scene {
        Some(scene) => {
            if scene.rasterize() != pixels {
                return Err(Error::Input("scene descriptor disagrees with image pixels".into()));
            }
            ImageSource::Scene(scene)
        }
        None => {
            validate_pixels(&pixels)?;
            ImageSource::Pixels(pixels)
        }
    };
    let record = CaptionRecord {
        id: raw.id,
        image,
        captions: raw.captions,
        split,
    };
    record.validate()?;
    Ok(record)
}

/// Reads every non-blank line. Errors carry the 1-based line number, except
/// missing or undecodable image files, which name the image path.
pub fn load_annotations(path: &Path) -> Result<Vec<CaptionRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match parse_annotation_line(line, &base) {
            Ok(r) => out.push(r),
            Err(e @ Error::Image { .. }) => return Err(e),
            Err(e) => {
                return Err(Error::Annotation {
                    path: path.to_path_buf(),
                    line: i + 1,
                    reason: e.to_string(),
                })
            }
        }
    }
    Ok(out)
}

/// Inline-array form; synthetic records also carry their scene descriptor.
pub fn record_to_json(record: &CaptionRecord) -> Result<Value> {
    let pixels = record.pixels()?;
    let [h, w, c] = pixels.shape() else {
        return Err(Error::Input("image must be H×W×C".into()));
    };
    let (h, w, c) = (*h, *w, *c);
    let d = pixels.data();
    let image: Vec<Vec<Vec<f64>>> = (0..h)
        .map(|y| (0..w).map(|x| d[(y * w + x) * c..(y * w + x + 1) * c].to_vec()).collect())
        .collect();
    let mut v = json!({
        "id": record.id,
        "image": image,
        "captions": record.captions,
        "split": record.split.as_str(),
    });
    if let ImageSource::Scene(scene) = &record.image {
        v["scene"] = serde_json::to_value(scene)?;
    }
    Ok(v)
}

pub fn write_jsonl(path: &Path, records: &[CaptionRecord]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(&record_to_json(r)?)?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
