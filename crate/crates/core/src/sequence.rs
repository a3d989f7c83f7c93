use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::LandmarkPair;
use crate::network::frame_tensor;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A cine loop between the end-diastolic frame (1) and the end-systolic
/// frame (`k`). Only those two frames carry annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct CineSequence {
    pub id: String,
    pub height: usize,
    pub width: usize,
    /// Row-major 8-bit grayscale frames; index 0 is frame 1.
    pub frames: Vec<Vec<u8>>,
    /// Annotation of frame 1.
    pub first: LandmarkPair<f64>,
    /// Annotation of frame `k`.
    pub last: LandmarkPair<f64>,
    /// Every frame's true landmarks (synthetic data only).
    pub hidden_truth: Option<Vec<LandmarkPair<f64>>>,
    /// Centimetres per pixel.
    pub pixel_spacing: f64,
}

/// Annotation slots of a sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum KeyFrame {
    /// End-diastolic, frame 1.
    Ed,
    /// End-systolic, frame `k`.
    Es,
}

impl CineSequence {
    pub fn k(&self) -> usize {
        self.frames.len()
    }

    /// 1-based indices of the annotated frames.
    pub fn annotated_frames(&self) -> [usize; 2] {
        [1, self.k()]
    }

    pub fn annotation(&self, which: KeyFrame) -> LandmarkPair<f64> {
        match which {
            KeyFrame::Ed => self.first,
            KeyFrame::Es => self.last,
        }
    }

    /// Frame `t` (1-based) scaled to `[0, 1]`.
    pub fn frame_tensor<T: Scalar>(&self, t: usize) -> Tensor<T> {
        frame_tensor(&self.frames[t - 1], self.height, self.width)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k() < 3 {
            return Err(Error::Shape(format!("sequence {} has {} frames, need at least 3", self.id, self.k())));
        }
        let n = self.height * self.width;
        if let Some(i) = self.frames.iter().position(|f| f.len() != n) {
            return Err(Error::Shape(format!("sequence {} frame {} has the wrong size", self.id, i + 1)));
        }
        for (what, pair) in [("frame-1 annotation", self.first), ("frame-k annotation", self.last)] {
            if !pair.within(self.width, self.height) {
                let p = if pair.inferolateral.within(self.width, self.height) { pair.anteroseptal } else { pair.inferolateral };
                return Err(Error::OutOfBounds { what, x: p.x, y: p.y, width: self.width, height: self.height });
            }
        }
        if let Some(truth) = &self.hidden_truth {
            if truth.len() != self.k() {
                return Err(Error::Shape(format!(
                    "sequence {} has {} hidden-truth entries for {} frames",
                    self.id,
                    truth.len(),
                    self.k()
                )));
            }
        }
        if !(self.pixel_spacing > 0.0) {
            return Err(Error::config("pixel_spacing", "must be positive"));
        }
        Ok(())
    }
}
