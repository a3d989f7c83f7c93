//! On-disk layout of sequences and datasets.
//!
//! ```text
//! <root>/manifest.json
//! <root>/<id>/annot.json
//! <root>/<id>/frames/0001.png ... %04d.png
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::GrayImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::{read_json, write_atomic, write_json};
use crate::geometry::LandmarkPair;
use crate::phantom::{generate_sequence, PhantomConfig};
use crate::sequence::CineSequence;

pub const MANIFEST_VERSION: u32 = 1;
pub const ANNOTATION_FILE: &str = "annot.json";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Serialize, Deserialize)]
struct AnnotationFile {
    id: String,
    k: usize,
    height: usize,
    width: usize,
    pixel_spacing_cm: f64,
    annotations: BTreeMap<String, LandmarkPair<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hidden_truth: Option<Vec<LandmarkPair<f64>>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub k: usize,
    pub annotated_frames: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub phantom: Option<PhantomConfig>,
    pub train: Vec<ManifestEntry>,
    pub test: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn entries(&self, split: Split) -> &[ManifestEntry] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    pub fn check_disjoint(&self) -> Result<()> {
        let train: std::collections::HashSet<_> = self.train.iter().map(|e| &e.id).collect();
        if let Some(e) = self.test.iter().find(|e| train.contains(&e.id)) {
            return Err(Error::Shape(format!("sequence {} appears in both splits", e.id)));
        }
        Ok(())
    }
}

fn frame_path(dir: &Path, t: usize) -> PathBuf {
    dir.join("frames").join(format!("{t:04}.png"))
}

pub fn save_sequence(seq: &CineSequence, dir: &Path) -> Result<()> {
    seq.validate()?;
    let frames = dir.join("frames");
    fs::create_dir_all(&frames).map_err(|e| Error::io(&frames, e))?;
    for (i, pixels) in seq.frames.iter().enumerate() {
        let path = frame_path(dir, i + 1);
        let img = GrayImage::from_raw(seq.width as u32, seq.height as u32, pixels.clone())
            .ok_or_else(|| Error::Shape(format!("frame {} of {} has the wrong size", i + 1, seq.id)))?;
        let mut bytes = Vec::new();
        img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
            .map_err(|e| Error::Image { path: path.clone(), reason: e.to_string() })?;
        write_atomic(&path, &bytes)?;
    }
    let mut annotations = BTreeMap::new();
    annotations.insert("1".to_string(), seq.first);
    annotations.insert(seq.k().to_string(), seq.last);
    let file = AnnotationFile {
        id: seq.id.clone(),
        k: seq.k(),
        height: seq.height,
        width: seq.width,
        pixel_spacing_cm: seq.pixel_spacing,
        annotations,
        hidden_truth: seq.hidden_truth.clone(),
    };
    write_json(&dir.join(ANNOTATION_FILE), &file)
}

pub fn load_sequence(dir: &Path) -> Result<CineSequence> {
    let annot_path = dir.join(ANNOTATION_FILE);
    if !annot_path.is_file() {
        return Err(Error::MissingAnnotation(annot_path));
    }
    let annot: AnnotationFile = read_json(&annot_path)?;
    let corrupt = |reason: String| Error::CorruptSequence { path: dir.to_path_buf(), reason };
    if annot.k < 3 {
        return Err(corrupt(format!("k = {} is below 3", annot.k)));
    }
    let key_k = annot.k.to_string();
    let (first, last) = match (annot.annotations.get("1"), annot.annotations.get(&key_k)) {
        (Some(a), Some(b)) => (*a, *b),
        _ => return Err(corrupt(format!("annotations must cover frames 1 and {}", annot.k))),
    };
    let mut frames = Vec::with_capacity(annot.k);
    for t in 1..=annot.k {
        let path = frame_path(dir, t);
        if !path.is_file() {
            return Err(Error::CorruptSequence {
                path: path.clone(),
                reason: format!("frame file {} is missing", path.display()),
            });
        }
        let img = image::open(&path).map_err(|e| Error::CorruptImage { path: path.clone(), reason: e.to_string() })?;
        let img = img.into_luma8();
        let found = (img.height() as usize, img.width() as usize);
        if found != (annot.height, annot.width) {
            return Err(Error::ShapeMismatch { path, expected: (annot.height, annot.width), found });
        }
        frames.push(img.into_raw());
    }
    let seq = CineSequence {
        id: annot.id,
        height: annot.height,
        width: annot.width,
        frames,
        first,
        last,
        hidden_truth: annot.hidden_truth,
        pixel_spacing: annot.pixel_spacing_cm,
    };
    seq.validate().map_err(|e| corrupt(e.to_string()))?;
    Ok(seq)
}

/// Generates `n_train + n_test` sequences under `out_dir`. Train ids are
/// `0..n_train`, test ids follow.
pub fn generate_dataset(cfg: &PhantomConfig, n_train: usize, n_test: usize, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let ids: Vec<u64> = (0..(n_train + n_test) as u64).collect();
    let entries = ids
        .par_iter()
        .map(|&id| {
            let seq = generate_sequence(cfg, id)?;
            save_sequence(&seq, &out_dir.join(&seq.id))?;
            Ok(ManifestEntry { id: seq.id.clone(), k: seq.k(), annotated_frames: seq.annotated_frames() })
        })
        .collect::<Result<Vec<_>>>()?;
    let (train, test) = entries.split_at(n_train);
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        phantom: Some(cfg.clone()),
        train: train.to_vec(),
        test: test.to_vec(),
    };
    manifest.check_disjoint()?;
    write_json(&out_dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// In-memory equivalent of [`generate_dataset`] followed by loading both splits.
pub fn generate_in_memory(cfg: &PhantomConfig, n_train: usize, n_test: usize) -> Result<(Vec<CineSequence>, Vec<CineSequence>)> {
    let all = (0..(n_train + n_test) as u64)
        .into_par_iter()
        .map(|id| generate_sequence(cfg, id))
        .collect::<Result<Vec<_>>>()?;
    let mut train = all;
    let test = train.split_off(n_train);
    Ok((train, test))
}

pub fn load_manifest(root: &Path) -> Result<DatasetManifest> {
    let m: DatasetManifest = read_json(&root.join(MANIFEST_FILE))?;
    if m.version != MANIFEST_VERSION {
        return Err(Error::CorruptSequence {
            path: root.join(MANIFEST_FILE),
            reason: format!("manifest version {} is not supported", m.version),
        });
    }
    m.check_disjoint()?;
    Ok(m)
}

pub fn load_split(root: &Path, split: Split) -> Result<Vec<CineSequence>> {
    let manifest = load_manifest(root)?;
    manifest.entries(split).par_iter().map(|e| load_sequence(&root.join(&e.id))).collect()
}
