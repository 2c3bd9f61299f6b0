//! Netpbm images and JSON annotations.
//!
//! Layout: `<root>/images/<id>.ppm` and `<root>/annotations/<id>.json`.
//! Masks are not stored; they are rasterized from the polygons on load.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::raster::rasterize_polygon;
use super::{AnnotatedInstance, AnnotationRecord, RgbImage, Sample};
use crate::error::{Error, Result};
use crate::mask::BinaryMask;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationFileInstance {
    pub class_id: usize,
    pub polygon: Vec<[f64; 2]>,
}

/// On-disk annotation schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationFile {
    pub image_id: String,
    pub height: usize,
    pub width: usize,
    pub instances: Vec<AnnotationFileInstance>,
}

impl From<&AnnotationRecord> for AnnotationFile {
    fn from(r: &AnnotationRecord) -> Self {
        AnnotationFile {
            image_id: r.image_id.clone(),
            height: r.height,
            width: r.width,
            instances: r
                .instances
                .iter()
                .map(|i| AnnotationFileInstance { class_id: i.class_id, polygon: i.polygon.clone() })
                .collect(),
        }
    }
}

fn parse_netpbm(bytes: &[u8], magic: &str, what: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |msg: &str| Error::Validation(vec![format!("{}: {msg}", what.display())]);
    let mut fields = Vec::with_capacity(4);
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..i]).map_err(|_| bad("non-ASCII header"))?);
    }
    if fields[0] != magic {
        return Err(bad(&format!("expected {magic} file, found {}", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad(&format!("bad header number {s:?}")));
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if max != 255 {
        return Err(bad("only 8-bit maxval 255 is supported"));
    }
    let body = &bytes[(i + 1).min(bytes.len())..];
    let channels = if magic == "P6" { 3 } else { 1 };
    if body.len() != w * h * channels {
        return Err(bad(&format!("expected {} pixel bytes, found {}", w * h * channels, body.len())));
    }
    Ok((h, w, body.to_vec()))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    let (h, w) = (img.height, img.width);
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    for i in 0..h * w {
        for c in 0..3 {
            bytes.push(to_byte(img.data[c * h * w + i]));
        }
    }
    write(path, &bytes)
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let (h, w, body) = parse_netpbm(&read(path)?, "P6", path)?;
    let mut data = vec![0.0; 3 * h * w];
    for (i, px) in body.chunks(3).enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = f64::from(px[c]) / 255.0;
        }
    }
    RgbImage::new(h, w, data)
}

/// Set pixels are written as 255.
pub fn write_pgm(path: &Path, mask: &BinaryMask) -> Result<()> {
    let mut bytes = format!("P5\n{} {}\n255\n", mask.width, mask.height).into_bytes();
    bytes.extend(mask.data.iter().map(|&v| if v { 255 } else { 0 }));
    write(path, &bytes)
}

/// Any nonzero pixel is set.
pub fn read_pgm(path: &Path) -> Result<BinaryMask> {
    let (h, w, body) = parse_netpbm(&read(path)?, "P5", path)?;
    BinaryMask::new(h, w, body.iter().map(|&b| b != 0).collect())
}

pub(crate) fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Json { path: path.into(), source: e })?;
    s.push('\n');
    write(path, s.as_bytes())
}

pub(crate) fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Json { path: path.into(), source: e })
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes one image and its annotation under `root`.
pub fn save_sample(root: &Path, sample: &Sample) -> Result<()> {
    let id = &sample.record.image_id;
    mkdir(&root.join("images"))?;
    mkdir(&root.join("annotations"))?;
    write_ppm(&root.join("images").join(format!("{id}.ppm")), &sample.image)?;
    save_json(&root.join("annotations").join(format!("{id}.json")), &AnnotationFile::from(&sample.record))
}

pub fn save_dataset(root: &Path, samples: &[Sample]) -> Result<()> {
    mkdir(&root.join("images"))?;
    mkdir(&root.join("annotations"))?;
    samples.iter().try_for_each(|s| save_sample(root, s))
}

fn list_ids(dir: &Path, ext: &str) -> Result<Vec<String>> {
    if !dir.exists() {
        return Ok(vec![]);
    }
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some(ext) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_owned());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

/// Loads every image with its annotation, sorted by id. All problems are
/// gathered into one [`Error::Validation`].
pub fn load_dataset(root: &Path) -> Result<Vec<Sample>> {
    let image_ids = list_ids(&root.join("images"), "ppm")?;
    let mut problems = Vec::new();
    let mut samples = Vec::new();
    for id in &image_ids {
        let ann_path = root.join("annotations").join(format!("{id}.json"));
        if !ann_path.exists() {
            problems.push(format!("image {id}: missing annotation {}", ann_path.display()));
            continue;
        }
        let image = match read_ppm(&root.join("images").join(format!("{id}.ppm"))) {
            Ok(im) => im,
            Err(e) => {
                problems.push(format!("image {id}: {e}"));
                continue;
            }
        };
        let file: AnnotationFile = match load_json(&ann_path) {
            Ok(f) => f,
            Err(e) => {
                problems.push(format!("{e}"));
                continue;
            }
        };
        let before = problems.len();
        if file.image_id != *id {
            problems.push(format!("{}: image_id {:?} does not match file name", ann_path.display(), file.image_id));
        }
        if (file.height, file.width) != (image.height, image.width) {
            problems.push(format!(
                "{}: declared size {}x{} but image is {}x{}",
                ann_path.display(),
                file.height,
                file.width,
                image.height,
                image.width
            ));
        }
        let mut instances = Vec::with_capacity(file.instances.len());
        for (k, inst) in file.instances.iter().enumerate() {
            if inst.polygon.len() < 3 {
                problems.push(format!(
                    "{}: instance {k}: polygon has {} points, need at least 3",
                    ann_path.display(),
                    inst.polygon.len()
                ));
                continue;
            }
            match rasterize_polygon(&inst.polygon, image.height, image.width) {
                Ok(mask) => instances.push(AnnotatedInstance { class_id: inst.class_id, polygon: inst.polygon.clone(), mask }),
                Err(e) => problems.push(format!("{}: instance {k}: {e}", ann_path.display())),
            }
        }
        if problems.len() == before {
            let record = AnnotationRecord { image_id: file.image_id, height: file.height, width: file.width, instances };
            samples.push(Sample { image, record });
        }
    }
    if problems.is_empty() {
        Ok(samples)
    } else {
        Err(Error::Validation(problems))
    }
}
