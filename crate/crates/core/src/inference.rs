//! Detect in frame 1, then track through the rest of the sequence.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::{read_json, write_json};
use crate::geometry::{LandmarkPair, Motion2, Point2};
use crate::heatmap::{heatmap_argmax, heatmap_to_image};
use crate::losses::TrackRecord;
use crate::network::{FeatureMap, ModelParams};
use crate::scalar::Scalar;
use crate::sequence::CineSequence;
use crate::trainer::encode_sequence;

pub const PREDICTION_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Detected,
    Tracked,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FramePrediction {
    pub t: usize,
    pub il: Point2<f64>,
    pub al: Point2<f64>,
    pub provenance: Provenance,
    /// The tracked position left the frame and was clamped to the border.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub drift: bool,
}

impl FramePrediction {
    pub fn pair(&self) -> LandmarkPair<f64> {
        LandmarkPair::new(self.il, self.al)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub version: u32,
    pub id: String,
    pub k: usize,
    pub pixel_spacing_cm: f64,
    pub frames: Vec<FramePrediction>,
    /// `motions[j]` carries frame `j + 1` to frame `j + 2`, image pixels.
    pub motions: Vec<Motion2<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backward: Option<TrackRecord<f64>>,
    /// Mean landmark distance between frame 1 and the end of the backward
    /// pass, image pixels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cycle_residual_px: Option<f64>,
}

impl Prediction {
    pub fn at(&self, t: usize) -> LandmarkPair<f64> {
        self.frames[t - 1].pair()
    }

    pub fn ed(&self) -> LandmarkPair<f64> {
        self.at(1)
    }

    pub fn es(&self) -> LandmarkPair<f64> {
        self.at(self.k)
    }

    pub fn drift_frames(&self) -> usize {
        self.frames.iter().filter(|f| f.drift).count()
    }
}

fn clamp_pair(p: LandmarkPair<f64>, width: usize, height: usize) -> (LandmarkPair<f64>, bool) {
    let (w, h) = ((width - 1) as f64, (height - 1) as f64);
    let c = p.map(|q| Point2::new(q.x.clamp(0.0, w), q.y.clamp(0.0, h)));
    (c, c != p)
}

/// Tracks from `start` across `order` (indices into `feats`), clamping at
/// the border. Returns positions, effective motions and drift flags.
fn propagate<T: Scalar>(
    params: &ModelParams<T>,
    feats: &[FeatureMap<T>],
    order: impl Iterator<Item = (usize, usize)>,
    start: LandmarkPair<f64>,
    width: usize,
    height: usize,
) -> (Vec<LandmarkPair<f64>>, Vec<Motion2<f64>>, Vec<bool>) {
    let mut pos = vec![start];
    let mut motions = Vec::new();
    let mut drift = vec![false];
    for (from, to) in order {
        let prev = *pos.last().unwrap();
        let m: Motion2<f64> = params.track_between(&feats[from], &feats[to], &prev.cast()).cast();
        let (next, clamped) = clamp_pair(prev.displaced(m), width, height);
        // Store the motion actually applied so positions stay an exact running sum.
        motions.push(Motion2::between(prev, next));
        pos.push(next);
        drift.push(clamped);
    }
    (pos, motions, drift)
}

pub fn predict_sequence<T: Scalar>(seq: &CineSequence, params: &ModelParams<T>, with_cycle: bool) -> Result<Prediction> {
    let k = seq.k();
    if k < 2 {
        return Err(Error::Shape(format!("sequence {} has {k} frames, need at least 2", seq.id)));
    }
    let feats = encode_sequence(params, seq)?;
    let heat = params.detector.detect(&feats[0])?;
    let peaks = heatmap_argmax(&heat);
    if peaks.any_degenerate() {
        return Err(Error::DetectionFailed { frame: 1 });
    }
    let start: LandmarkPair<f64> = heatmap_to_image(peaks.pair).cast();
    let (pos, motions, drift) = propagate(params, &feats, (1..k).map(|t| (t - 1, t)), start, seq.width, seq.height);
    let frames = pos
        .iter()
        .zip(&drift)
        .enumerate()
        .map(|(i, (p, &d))| FramePrediction {
            t: i + 1,
            il: p.inferolateral,
            al: p.anteroseptal,
            provenance: if i == 0 { Provenance::Detected } else { Provenance::Tracked },
            drift: d,
        })
        .collect();
    let (backward, cycle_residual_px) = if with_cycle {
        let (bpos, bmot, _) =
            propagate(params, &feats, (1..k).rev().map(|t| (t, t - 1)), pos[k - 1], seq.width, seq.height);
        let end = *bpos.last().unwrap();
        let residual = 0.5 * (end.inferolateral.distance(start.inferolateral) + end.anteroseptal.distance(start.anteroseptal));
        let record = TrackRecord { frames: (1..=k).rev().collect(), positions: bpos, motions: bmot };
        (Some(record), Some(residual))
    } else {
        (None, None)
    };
    Ok(Prediction {
        version: PREDICTION_VERSION,
        id: seq.id.clone(),
        k,
        pixel_spacing_cm: seq.pixel_spacing,
        frames,
        motions,
        backward,
        cycle_residual_px,
    })
}

/// Predicts every sequence; results keep the input order.
pub fn predict_all<T: Scalar>(seqs: &[CineSequence], params: &ModelParams<T>, with_cycle: bool) -> Vec<Result<Prediction>> {
    seqs.par_iter().map(|s| predict_sequence(s, params, with_cycle)).collect()
}

pub fn export_prediction(pred: &Prediction, path: &Path) -> Result<()> {
    write_json(path, pred)
}

pub fn read_prediction(path: &Path) -> Result<Prediction> {
    let p: Prediction = read_json(path)?;
    if p.version != PREDICTION_VERSION {
        return Err(Error::CorruptSequence {
            path: path.to_path_buf(),
            reason: format!("prediction version {} is not supported", p.version),
        });
    }
    if p.frames.len() != p.k {
        return Err(Error::CorruptSequence {
            path: path.to_path_buf(),
            reason: format!("{} frames listed for k = {}", p.frames.len(), p.k),
        });
    }
    Ok(p)
}

/// Writes one `<id>.json` per prediction under `dir`.
pub fn export_all(preds: &[Prediction], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    preds.iter().try_for_each(|p| export_prediction(p, &dir.join(format!("{}.json", p.id))))
}

/// Reads every `*.json` prediction under `dir`, sorted by id.
pub fn read_all(dir: &Path) -> Result<Vec<Prediction>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "json") {
            out.push(read_prediction(&path)?);
        }
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::NetworkConfig;
    use crate::phantom::{generate_sequence, PhantomConfig};

    fn setup() -> (CineSequence, ModelParams<f32>) {
        let seq = generate_sequence(&PhantomConfig::default(), 1).unwrap();
        let cfg = NetworkConfig {
            encoder_channels: vec![3, 3, 4, 4, 4, 4],
            detector_channels: [4, 8],
            detector_convs_per_stage: 2,
            head_channels: 5,
            tracker_hidden: vec![6, 5],
            ..NetworkConfig::default()
        };
        (seq, ModelParams::new(cfg, 2).unwrap())
    }

    #[test]
    fn contract() {
        let (seq, params) = setup();
        let before = params.fingerprint();
        let p = predict_sequence(&seq, &params, true).unwrap();
        assert_eq!(params.fingerprint(), before);
        assert_eq!(p.frames.len(), seq.k());
        assert_eq!(p.frames[0].provenance, Provenance::Detected);
        assert!(p.frames[1..].iter().all(|f| f.provenance == Provenance::Tracked));
        for j in 0..p.motions.len() {
            assert_eq!(p.at(j + 1).displaced(p.motions[j]), p.at(j + 2));
        }
        assert!(p.cycle_residual_px.is_some());
        assert_eq!(predict_sequence(&seq, &params, true).unwrap(), p);
    }

    #[test]
    fn export_round_trip() {
        let (seq, params) = setup();
        let p = predict_sequence(&seq, &params, true).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        export_prediction(&p, &path).unwrap();
        assert_eq!(read_prediction(&path).unwrap(), p);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"provenance\": \"detected\"") && text.contains("cycle_residual_px"));
    }

    #[test]
    fn degenerate_detection_is_an_error() {
        let (seq, mut params) = setup();
        for s in params.group_mut(crate::network::Group::Detector) {
            s.iter_mut().for_each(|v| *v = 0.0);
        }
        assert!(matches!(predict_sequence(&seq, &params, false), Err(Error::DetectionFailed { frame: 1 })));
    }
}
