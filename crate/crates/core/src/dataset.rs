//! On-disk dataset splits: frames, flow, per-instance masks and a
//! COCO-like `annotations.json`.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BinaryMask, PixelBox};
use crate::imaging::{FlowField, GrayImage, ImagingError, RgbImage};
use crate::synth::{generate_sample_in_stream, InstanceAnn, SceneConfig, SceneSample, ShapeKind, SynthError, CAMOUFLAGE_DELTA_E, SHAPE_CATEGORY};

pub const ANNOTATIONS_FILE: &str = "annotations.json";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error at {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("annotations: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{path}: {source}")]
    Imaging { path: PathBuf, source: ImagingError },
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("index {index} out of range for a split of {len}")]
    Index { index: usize, len: usize },
    #[error("dataset is empty")]
    Empty,
    #[error("inconsistent dataset: {0}")]
    Inconsistent(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

fn img_err(path: &Path) -> impl FnOnce(ImagingError) -> DatasetError + '_ {
    move |source| DatasetError::Imaging { path: path.to_path_buf(), source }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    /// Generator stream; splits from one seed never share samples.
    pub fn stream(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub split: Split,
    pub seed: u64,
    pub scene: SceneConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: u64,
    pub width: usize,
    pub height: usize,
    pub file_name: String,
    pub next_file_name: String,
    pub flow_file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u32,
    /// `[x, y, w, h]` of the tight mask bounds.
    pub bbox: [f64; 4],
    pub area: usize,
    pub iscrowd: u8,
    pub mask_file: String,
    pub shape: ShapeKind,
    pub velocity: [i32; 2],
    pub delta_e: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryRecord {
    pub id: u32,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotations {
    pub info: DatasetInfo,
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<AnnotationRecord>,
    pub categories: Vec<CategoryRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SplitSummary {
    pub images: usize,
    pub instances: usize,
    pub camouflage_fraction: f64,
}

impl std::fmt::Display for SplitSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} images, {} instances, {:.1}% camouflaged (dE < {CAMOUFLAGE_DELTA_E})",
            self.images,
            self.instances,
            100.0 * self.camouflage_fraction
        )
    }
}

fn frame_name(id: u64, suffix: &str) -> String {
    format!("frames/{id:05}_{suffix}.png")
}

/// Writes `n` samples of `split` under `out`, replacing any previous split
/// files of the same names.
pub fn generate_split(cfg: &SceneConfig, split: Split, n: usize, out: &Path) -> Result<SplitSummary, DatasetError> {
    cfg.validate()?;
    let samples: Vec<SceneSample> = (0..n as u64)
        .into_par_iter()
        .map(|i| generate_sample_in_stream(cfg, split.stream(), i))
        .collect::<Result<_, _>>()?;
    for dir in ["frames", "flow", "masks"] {
        let p = out.join(dir);
        fs::create_dir_all(&p).map_err(io_err(&p))?;
    }
    let mut ann = Annotations {
        info: DatasetInfo {
            split,
            seed: cfg.seed,
            scene: cfg.clone(),
        },
        images: Vec::with_capacity(n),
        annotations: Vec::new(),
        categories: vec![CategoryRecord {
            id: SHAPE_CATEGORY,
            name: "shape".into(),
        }],
    };
    for s in &samples {
        let rec = ImageRecord {
            id: s.index,
            width: s.frame_t.width,
            height: s.frame_t.height,
            file_name: frame_name(s.index, "t"),
            next_file_name: frame_name(s.index, "t1"),
            flow_file: format!("flow/{:05}.flo", s.index),
        };
        for (path, img) in [(&rec.file_name, &s.frame_t), (&rec.next_file_name, &s.frame_t1)] {
            let p = out.join(path);
            img.write_png(&p).map_err(img_err(&p))?;
        }
        let p = out.join(&rec.flow_file);
        s.flow.write_flo(&p).map_err(img_err(&p))?;
        for (k, inst) in s.instances.iter().enumerate() {
            let mask_file = format!("masks/{:05}_{k}.png", s.index);
            let p = out.join(&mask_file);
            GrayImage {
                width: inst.mask.width,
                height: inst.mask.height,
                data: inst.mask.data.iter().map(|&b| if b { 255 } else { 0 }).collect(),
            }
            .write_png(&p)
            .map_err(img_err(&p))?;
            ann.annotations.push(AnnotationRecord {
                id: ann.annotations.len() as u64 + 1,
                image_id: s.index,
                category_id: inst.category_id,
                bbox: inst.bbox.to_xywh(),
                area: inst.mask.area(),
                iscrowd: 0,
                mask_file,
                shape: inst.shape,
                velocity: inst.velocity,
                delta_e: inst.delta_e,
            });
        }
        ann.images.push(rec);
    }
    let p = out.join(ANNOTATIONS_FILE);
    fs::write(&p, serde_json::to_vec_pretty(&ann)?).map_err(io_err(&p))?;
    Ok(summarize(&ann))
}

pub fn summarize(ann: &Annotations) -> SplitSummary {
    let camo = ann.annotations.iter().filter(|a| a.delta_e < CAMOUFLAGE_DELTA_E).count();
    SplitSummary {
        images: ann.images.len(),
        instances: ann.annotations.len(),
        camouflage_fraction: if ann.annotations.is_empty() {
            0.0
        } else {
            camo as f64 / ann.annotations.len() as f64
        },
    }
}

/// A split on disk, loaded lazily per sample.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub annotations: Annotations,
    by_image: Vec<Vec<usize>>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self, DatasetError> {
        let p = root.join(ANNOTATIONS_FILE);
        let annotations: Annotations = serde_json::from_slice(&fs::read(&p).map_err(io_err(&p))?)?;
        if annotations.images.is_empty() {
            return Err(DatasetError::Empty);
        }
        let mut by_image = vec![Vec::new(); annotations.images.len()];
        for (k, a) in annotations.annotations.iter().enumerate() {
            let pos = annotations
                .images
                .iter()
                .position(|im| im.id == a.image_id)
                .ok_or_else(|| DatasetError::Inconsistent(format!("annotation {} has no image {}", a.id, a.image_id)))?;
            by_image[pos].push(k);
        }
        Ok(Self {
            root: root.to_path_buf(),
            annotations,
            by_image,
        })
    }

    pub fn len(&self) -> usize {
        self.annotations.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.annotations.images.is_empty()
    }

    pub fn annotations_of(&self, index: usize) -> impl Iterator<Item = &AnnotationRecord> {
        self.by_image[index].iter().map(|&k| &self.annotations.annotations[k])
    }

    pub fn load(&self, index: usize) -> Result<SceneSample, DatasetError> {
        let rec = self.annotations.images.get(index).ok_or(DatasetError::Index { index, len: self.len() })?;
        let read_rgb = |name: &str| {
            let p = self.root.join(name);
            RgbImage::read_png(&p).map_err(img_err(&p))
        };
        let frame_t = read_rgb(&rec.file_name)?;
        let frame_t1 = read_rgb(&rec.next_file_name)?;
        let p = self.root.join(&rec.flow_file);
        let flow = FlowField::read_flo(&p).map_err(img_err(&p))?;
        let extents = (rec.width, rec.height);
        if (frame_t.width, frame_t.height) != extents || (frame_t1.width, frame_t1.height) != extents || (flow.width, flow.height) != extents {
            return Err(DatasetError::Inconsistent(format!("image {} has mismatched extents", rec.id)));
        }
        let mut instances = Vec::new();
        for a in self.annotations_of(index) {
            let p = self.root.join(&a.mask_file);
            let g = GrayImage::read_png(&p).map_err(img_err(&p))?;
            let mask = BinaryMask {
                width: g.width,
                height: g.height,
                data: g.data.iter().map(|&v| v > 127).collect(),
            };
            instances.push(InstanceAnn {
                mask,
                bbox: PixelBox::from_xywh(a.bbox),
                category_id: a.category_id,
                shape: a.shape,
                velocity: a.velocity,
                delta_e: a.delta_e,
            });
        }
        Ok(SceneSample {
            index: rec.id,
            frame_t,
            frame_t1,
            flow,
            instances,
        })
    }
}
