//! Synthetic two-domain datasets, their on-disk format, and flip augmentation.
//!
//! A dataset directory holds one PNG per image plus `annotations.json`:
//!
//! ```text
//! { "format_version": 1,
//!   "images":      [{"id", "file_name", "width", "height", "domain"}],
//!   "annotations": [{"id", "image_id", "category_id", "bbox": [x, y, w, h]}],
//!   "categories":  [{"id", "name", "domain"}],
//!   "splits":      {"train": [image ids], "val": [image ids]} }
//! ```

pub mod scene;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use scene::{generate_scene, Scene, SceneObject, SceneSpec, ShapeClass, SMALL_AREA};

use crate::detector::GroundTruth;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::nn::Tensor;
use crate::seed;

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const ANNOTATIONS_FILE: &str = "annotations.json";
pub const TRAIN_FRACTION: f64 = 0.8;

/// The two built-in domains: structured source scenes and unstructured target scenes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DomainKind {
    S,
    T,
}

impl DomainKind {
    pub const ALL: [DomainKind; 2] = [DomainKind::S, DomainKind::T];

    pub fn name(self) -> &'static str {
        match self {
            DomainKind::S => "S",
            DomainKind::T => "T",
        }
    }
}

impl fmt::Display for DomainKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DomainKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "S" => Ok(DomainKind::S),
            "T" => Ok(DomainKind::T),
            _ => Err(Error::UnknownDomain {
                name: s.to_string(),
                available: vec!["S".into(), "T".into()],
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Category {
    pub id: u32,
    pub name: String,
    pub domain: String,
}

/// 8-bit interleaved RGB image.
#[derive(Clone, PartialEq, Eq)]
pub struct RgbImage {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl fmt::Debug for RgbImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "RgbImage({}x{})", self.width, self.height)
    }
}

impl RgbImage {
    pub fn new(width: u32, height: u32, data: Vec<u8>) -> Result<Self> {
        if data.len() != width as usize * height as usize * 3 {
            return Err(Error::InvalidDataset(format!(
                "{width}x{height} image needs {} bytes, got {}",
                width as usize * height as usize * 3,
                data.len()
            )));
        }
        Ok(RgbImage { width, height, data })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width as usize + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// `[H, W, 3]` tensor with values in `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.height as usize, self.width as usize, 3],
            self.data.iter().map(|v| *v as f64 / 255.0).collect(),
        )
        .expect("buffer sized for image")
    }

    pub fn flipped(&self) -> RgbImage {
        let (w, h) = (self.width as usize, self.height as usize);
        let mut data = vec![0u8; self.data.len()];
        for y in 0..h {
            for x in 0..w {
                let src = (y * w + x) * 3;
                let dst = (y * w + (w - 1 - x)) * 3;
                data[dst..dst + 3].copy_from_slice(&self.data[src..src + 3]);
            }
        }
        RgbImage {
            width: self.width,
            height: self.height,
            data,
        }
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(BufWriter::new(&mut out), self.width, self.height);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let png_err = |e: png::EncodingError| Error::Png {
                path: PathBuf::new(),
                message: e.to_string(),
            };
            let mut writer = enc.write_header().map_err(png_err)?;
            writer.write_image_data(&self.data).map_err(png_err)?;
        }
        Ok(out)
    }

    /// Decodes an 8-bit RGB or RGBA PNG.
    pub fn decode_png(bytes: &[u8]) -> Result<RgbImage> {
        let err = |m: String| Error::Png {
            path: PathBuf::new(),
            message: m,
        };
        let mut decoder = png::Decoder::new(bytes);
        decoder.set_transformations(png::Transformations::EXPAND);
        let mut reader = decoder.read_info().map_err(|e| err(e.to_string()))?;
        let info = reader.info();
        let (w, h) = (info.width, info.height);
        if w == 0 || h == 0 || (w as u64) * (h as u64) > 4096 * 4096 {
            return Err(err(format!("unsupported dimensions {w}x{h}")));
        }
        let mut buf = vec![0; reader.output_buffer_size()];
        let frame = reader.next_frame(&mut buf).map_err(|e| err(e.to_string()))?;
        if frame.bit_depth != png::BitDepth::Eight {
            return Err(err(format!("unsupported bit depth {:?}", frame.bit_depth)));
        }
        let px = (w * h) as usize;
        let data = match frame.color_type {
            png::ColorType::Rgb => buf[..px * 3].to_vec(),
            png::ColorType::Rgba => buf[..px * 4].chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
            png::ColorType::Grayscale => buf[..px].iter().flat_map(|v| [*v, *v, *v]).collect(),
            png::ColorType::GrayscaleAlpha => buf[..px * 2].chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
            other => return Err(err(format!("unsupported color type {other:?}"))),
        };
        RgbImage::new(w, h, data)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
    pub domain: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u32,
    /// `[x, y, w, h]` in pixels.
    pub bbox: [f64; 4],
}

impl Annotation {
    pub fn to_bbox(&self) -> BBox {
        let [x, y, w, h] = self.bbox;
        BBox {
            x_min: x,
            y_min: y,
            x_max: x + w,
            y_max: y + h,
        }
    }

    pub fn area(&self) -> f64 {
        self.bbox[2] * self.bbox[3]
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<u64>,
    pub val: Vec<u64>,
}

/// Contents of `annotations.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub format_version: u32,
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<Annotation>,
    pub categories: Vec<Category>,
    #[serde(default)]
    pub splits: Splits,
}

impl AnnotationFile {
    /// Checks ids, references, categories and box bounds.
    pub fn validate(&self) -> Result<()> {
        if self.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::InvalidDataset(format!("unsupported format_version {}", self.format_version)));
        }
        let mut images = BTreeMap::new();
        for img in &self.images {
            if images.insert(img.id, img).is_some() {
                return Err(Error::InvalidDataset(format!("duplicate image id {}", img.id)));
            }
            if img.width == 0 || img.height == 0 {
                return Err(Error::InvalidDataset(format!("image {} has zero size", img.id)));
            }
            let name = Path::new(&img.file_name);
            if img.file_name.is_empty() || name.is_absolute() || name.components().count() != 1 || img.file_name == ".." {
                return Err(Error::InvalidDataset(format!("image {}: file name `{}` must be a bare file name", img.id, img.file_name)));
            }
        }
        let mut cats = BTreeMap::new();
        for c in &self.categories {
            if cats.insert(c.id, c).is_some() {
                return Err(Error::InvalidDataset(format!("duplicate category id {}", c.id)));
            }
        }
        let mut ann_ids = BTreeSet::new();
        for a in &self.annotations {
            if !ann_ids.insert(a.id) {
                return Err(Error::InvalidDataset(format!("duplicate annotation id {}", a.id)));
            }
            let Some(img) = images.get(&a.image_id) else {
                return Err(Error::UnknownImage {
                    annotation_id: a.id,
                    image_id: a.image_id,
                });
            };
            let Some(cat) = cats.get(&a.category_id) else {
                return Err(Error::InvalidDataset(format!(
                    "annotation {} references unknown category {}",
                    a.id, a.category_id
                )));
            };
            if cat.domain != img.domain {
                return Err(Error::InvalidDataset(format!(
                    "annotation {}: category {} belongs to domain {}, image {} to domain {}",
                    a.id, a.category_id, cat.domain, img.id, img.domain
                )));
            }
            let [x, y, w, h] = a.bbox;
            let inside = a.bbox.iter().all(|v| v.is_finite())
                && w > 0.0
                && h > 0.0
                && x >= 0.0
                && y >= 0.0
                && x + w <= img.width as f64
                && y + h <= img.height as f64;
            if !inside {
                return Err(Error::BoxOutsideImage {
                    annotation_id: a.id,
                    bbox: a.bbox,
                    width: img.width,
                    height: img.height,
                });
            }
        }
        for id in self.splits.train.iter().chain(&self.splits.val) {
            if !images.contains_key(id) {
                return Err(Error::InvalidDataset(format!("split references unknown image id {id}")));
            }
        }
        Ok(())
    }
}

/// Parses and validates `annotations.json` contents.
pub fn parse_annotations(bytes: &[u8]) -> Result<AnnotationFile> {
    let file: AnnotationFile = serde_json::from_slice(bytes).map_err(|e| Error::json(ANNOTATIONS_FILE, e))?;
    file.validate()?;
    Ok(file)
}

/// An image together with its annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub record: ImageRecord,
    pub image: RgbImage,
    pub annotations: Vec<Annotation>,
}

impl Sample {
    pub fn ground_truth(&self) -> Vec<GroundTruth> {
        self.annotations
            .iter()
            .map(|a| GroundTruth {
                bbox: a.to_bbox(),
                category_id: a.category_id,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub categories: Vec<Category>,
    pub samples: Vec<Sample>,
    pub splits: Splits,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    All,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "all" => Ok(Split::All),
            _ => Err(Error::InvalidConfig(format!("unknown split `{s}`; expected train, val or all"))),
        }
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn split(&self, which: Split) -> Vec<&Sample> {
        let ids: BTreeSet<u64> = match which {
            Split::All => return self.samples.iter().collect(),
            Split::Train => self.splits.train.iter().copied().collect(),
            Split::Val => self.splits.val.iter().copied().collect(),
        };
        self.samples.iter().filter(|s| ids.contains(&s.record.id)).collect()
    }

    pub fn annotation_file(&self) -> AnnotationFile {
        AnnotationFile {
            format_version: DATASET_FORMAT_VERSION,
            images: self.samples.iter().map(|s| s.record.clone()).collect(),
            annotations: self.samples.iter().flat_map(|s| s.annotations.iter().cloned()).collect(),
            categories: self.categories.clone(),
            splits: self.splits.clone(),
        }
    }

    pub fn instances_per_category(&self) -> BTreeMap<u32, usize> {
        let mut m: BTreeMap<u32, usize> = self.categories.iter().map(|c| (c.id, 0)).collect();
        for s in &self.samples {
            for a in &s.annotations {
                *m.entry(a.category_id).or_default() += 1;
            }
        }
        m
    }
}

/// Train/val split by seeded shuffle of the image ids.
pub fn split_ids(ids: &[u64], seed_value: u64) -> Splits {
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut seed::rng(seed_value, "split", 0));
    let n_train = (ids.len() as f64 * TRAIN_FRACTION).round() as usize;
    let mut train = shuffled[..n_train].to_vec();
    let mut val = shuffled[n_train..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    Splits { train, val }
}

/// Generates `count` scenes of one domain.
pub fn generate_dataset(spec: &SceneSpec, count: usize, seed_value: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut samples = Vec::with_capacity(count);
    let mut next_ann = 1u64;
    for i in 0..count {
        let id = i as u64 + 1;
        let scene = generate_scene(spec, seed::derive(seed_value, "data", id))?;
        let annotations = scene
            .objects
            .iter()
            .map(|o| {
                let a = Annotation {
                    id: next_ann,
                    image_id: id,
                    category_id: o.category_id,
                    bbox: o.bbox,
                };
                next_ann += 1;
                a
            })
            .collect();
        samples.push(Sample {
            record: ImageRecord {
                id,
                file_name: format!("{:06}.png", id),
                width: spec.image_size as u32,
                height: spec.image_size as u32,
                domain: spec.domain.name().to_string(),
            },
            image: scene.image,
            annotations,
        });
    }
    let ids: Vec<u64> = samples.iter().map(|s| s.record.id).collect();
    Ok(Dataset {
        categories: scene::categories(spec.domain),
        samples,
        splits: split_ids(&ids, seed_value),
    })
}

/// Mirrors annotations about the vertical axis of a `width`-pixel image.
pub fn flip_annotations(annotations: &[Annotation], width: u32) -> Vec<Annotation> {
    annotations
        .iter()
        .map(|a| {
            let [x, y, w, h] = a.bbox;
            Annotation {
                bbox: [width as f64 - x - w, y, w, h],
                ..a.clone()
            }
        })
        .collect()
}

pub fn horizontal_flip(image: &RgbImage, annotations: &[Annotation]) -> (RgbImage, Vec<Annotation>) {
    (image.flipped(), flip_annotations(annotations, image.width()))
}

/// Flips an `[H, W, 3]` tensor and ground-truth boxes.
pub fn flip_tensor(image: &Tensor, gts: &[GroundTruth]) -> (Tensor, Vec<GroundTruth>) {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let src = image.data();
    let mut data = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            let s = (y * w + x) * 3;
            let d = (y * w + (w - 1 - x)) * 3;
            data[d..d + 3].copy_from_slice(&src[s..s + 3]);
        }
    }
    let wf = w as f64;
    let flipped = gts
        .iter()
        .map(|g| GroundTruth {
            bbox: BBox {
                x_min: wf - g.bbox.x_max,
                y_min: g.bbox.y_min,
                x_max: wf - g.bbox.x_min,
                y_max: g.bbox.y_max,
            },
            category_id: g.category_id,
        })
        .collect();
    (Tensor::new(image.shape().to_vec(), data).expect("same shape"), flipped)
}

pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for s in &dataset.samples {
        let path = dir.join(&s.record.file_name);
        let bytes = s.image.encode_png().map_err(|e| match e {
            Error::Png { message, .. } => Error::Png { path: path.clone(), message },
            other => other,
        })?;
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    let path = dir.join(ANNOTATIONS_FILE);
    let mut json = serde_json::to_vec_pretty(&dataset.annotation_file()).expect("annotations serialize");
    json.push(b'\n');
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(ANNOTATIONS_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let file: AnnotationFile = serde_json::from_slice(&bytes).map_err(|e| Error::json(&path, e))?;
    file.validate()?;
    let mut by_image: BTreeMap<u64, Vec<Annotation>> = BTreeMap::new();
    for a in &file.annotations {
        by_image.entry(a.image_id).or_default().push(a.clone());
    }
    let mut samples = Vec::with_capacity(file.images.len());
    for rec in &file.images {
        let img_path = dir.join(&rec.file_name);
        let bytes = fs::read(&img_path).map_err(|_| Error::MissingImage {
            image_id: rec.id,
            path: img_path.clone(),
        })?;
        let image = RgbImage::decode_png(&bytes).map_err(|e| match e {
            Error::Png { message, .. } => Error::Png { path: img_path.clone(), message },
            other => other,
        })?;
        if image.width() != rec.width || image.height() != rec.height {
            return Err(Error::InvalidDataset(format!(
                "image {} is {}x{}, annotations say {}x{}",
                rec.id,
                image.width(),
                image.height(),
                rec.width,
                rec.height
            )));
        }
        samples.push(Sample {
            record: rec.clone(),
            image,
            annotations: by_image.remove(&rec.id).unwrap_or_default(),
        });
    }
    Ok(Dataset {
        categories: file.categories,
        samples,
        splits: file.splits,
    })
}
