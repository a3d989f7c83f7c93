//! Training objectives and the forward/backward position algebra.
//!
//! * focal detection loss (penalty-reduced, Gaussian-softened negatives)
//! * motion loss at the last annotated frame
//! * cycle loss after tracking forward to frame `k` and back to frame 1
//! * reciprocal loss between detection and tracking on unannotated frames
//!
//! All losses are non-negative and minimized.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{LandmarkPair, Motion2, Point2};
use crate::heatmap::{render_pair_target, Heatmap, LANDMARKS};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

/// Scores are clamped to `[SCORE_CLAMP, 1 - SCORE_CLAMP]` before logs.
pub const SCORE_CLAMP: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FocalParams<T> {
    /// Exponent on the prediction term.
    pub alpha: T,
    /// Exponent on the penalty-reduction term.
    pub beta: T,
    /// Gaussian radius in heatmap pixels (σ = radius / 3).
    pub radius: T,
}

impl<T: Scalar> Default for FocalParams<T> {
    fn default() -> Self {
        Self { alpha: lit(2.0), beta: lit(4.0), radius: lit(10.0) }
    }
}

impl<T: Scalar> FocalParams<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= T::zero()) {
            return Err(Error::config("alpha", "must be >= 0"));
        }
        if !(self.beta >= T::zero()) {
            return Err(Error::config("beta", "must be >= 0"));
        }
        if !(self.radius > T::zero()) {
            return Err(Error::config("radius", "must be > 0"));
        }
        Ok(())
    }

    pub fn sigma(&self) -> T {
        self.radius / lit(3.0)
    }
}

/// Focal loss of `pred` scores against an explicit target map, with the
/// gradient w.r.t. each score. Pixels with target exactly 1 are positives.
pub fn focal_loss_map<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, fp: &FocalParams<T>) -> (T, Tensor<T>) {
    assert_eq!(pred.shape(), target.shape(), "prediction and target shapes differ");
    let lo = lit::<T>(SCORE_CLAMP);
    let hi = T::one() - lo;
    let (alpha, beta) = (fp.alpha, fp.beta);
    let one = T::one();
    let mut loss = T::zero();
    let mut grad = Tensor::zeros(pred.channels, pred.height, pred.width);
    for ((&p_raw, &y), g) in pred.data.iter().zip(&target.data).zip(grad.data.iter_mut()) {
        let p = p_raw.max(lo).min(hi);
        let (l, dl) = if y == one {
            // -(1-p)^α log p
            let w = (one - p).powf(alpha);
            let l = -w * p.ln();
            let dl = alpha * (one - p).powf(alpha - one) * p.ln() - w / p;
            (l, dl)
        } else {
            // -(1-y)^β p^α log(1-p)
            let r = (one - y).powf(beta);
            if r == T::zero() {
                (T::zero(), T::zero())
            } else {
                let pa = p.powf(alpha);
                let l = -r * pa * (one - p).ln();
                let dpa = if alpha == T::zero() { T::zero() } else { alpha * p.powf(alpha - one) };
                let dl = -r * (dpa * (one - p).ln() - pa / (one - p));
                (l, dl)
            }
        };
        loss += l;
        // Straight-through at the clamp: a saturated positive keeps its pull.
        *g = dl;
    }
    (loss, grad)
}

fn check_targets<T: Scalar>(pred: &Heatmap<T>, targets: &LandmarkPair<T>, fp: &FocalParams<T>) -> Result<Tensor<T>> {
    fp.validate()?;
    render_pair_target(targets, pred.height(), pred.width(), fp.radius)
}

/// Focal detection loss of a heatmap against landmark targets given in
/// heatmap coordinates.
pub fn focal_loss<T: Scalar>(pred: &Heatmap<T>, targets: &LandmarkPair<T>, fp: &FocalParams<T>) -> Result<T> {
    focal_loss_with_grad(pred, targets, fp).map(|(l, _)| l)
}

pub fn focal_loss_with_grad<T: Scalar>(
    pred: &Heatmap<T>,
    targets: &LandmarkPair<T>,
    fp: &FocalParams<T>,
) -> Result<(T, Tensor<T>)> {
    let target = check_targets(pred, targets, fp)?;
    Ok(focal_loss_map(pred.scores(), &target, fp))
}

/// Reciprocal loss: tracked positions (heatmap coordinates) act as the only
/// positives for the detection heatmap. Returns `None` when a tracked
/// position falls outside the heatmap, in which case the frame is skipped.
pub fn reciprocal_loss<T: Scalar>(det: &Heatmap<T>, tracked: &LandmarkPair<T>, fp: &FocalParams<T>) -> Result<Option<T>> {
    Ok(reciprocal_loss_with_grad(det, tracked, fp)?.map(|r| r.loss))
}

#[derive(Clone, Debug)]
pub struct ReciprocalTerm<T> {
    pub loss: T,
    /// Gradient w.r.t. detection scores.
    pub dscores: Tensor<T>,
    /// Gradient w.r.t. the tracked centres through a continuous relaxation
    /// of the Gaussian target (offsets taken from the unrounded centre).
    /// Only used when tracker gradients are requested.
    pub dcenters: LandmarkPair<T>,
}

pub fn reciprocal_loss_with_grad<T: Scalar>(
    det: &Heatmap<T>,
    tracked: &LandmarkPair<T>,
    fp: &FocalParams<T>,
) -> Result<Option<ReciprocalTerm<T>>> {
    fp.validate()?;
    if !tracked.is_finite() {
        return Ok(None);
    }
    let (h, w) = (det.height(), det.width());
    for p in tracked.points() {
        let (x, y) = p.nearest_pixel();
        if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
            return Ok(None);
        }
    }
    let target = render_pair_target(tracked, h, w, fp.radius)?;
    let (loss, dscores) = focal_loss_map(det.scores(), &target, fp);
    let dcenters = target_center_grad(det.scores(), &target, tracked, fp);
    Ok(Some(ReciprocalTerm { loss, dscores, dcenters }))
}

/// d(focal loss)/d(centre) with the target treated as a smooth Gaussian of
/// the continuous centre.
fn target_center_grad<T: Scalar>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    centers: &LandmarkPair<T>,
    fp: &FocalParams<T>,
) -> LandmarkPair<T> {
    let lo = lit::<T>(SCORE_CLAMP);
    let one = T::one();
    let s2 = fp.sigma() * fp.sigma();
    let mut out = [Point2::zero(); LANDMARKS];
    for (c, center) in centers.points().into_iter().enumerate() {
        let (pp, tp) = (pred.plane(c), target.plane(c));
        let mut g = Point2::zero();
        for y in 0..pred.height {
            for x in 0..pred.width {
                let i = y * pred.width + x;
                let t = tp[i];
                if t == one || t == T::zero() {
                    continue;
                }
                let p = pp[i].max(lo).min(one - lo);
                // dL/dy for the negative branch
                let dldy = fp.beta * (one - t).powf(fp.beta - one) * p.powf(fp.alpha) * (one - p).ln();
                let dx = T::from_usize(x).unwrap() - center.x;
                let dy = T::from_usize(y).unwrap() - center.y;
                g = g + Point2::new(dx, dy) * (dldy * t / s2);
            }
        }
        out[c] = g;
    }
    LandmarkPair::from_points(out)
}

/// Frames (1-based) that receive the reciprocal loss for a sequence of
/// `k` frames at the given rate: `t` with `(t-1) mod rate == 0`, excluding
/// the annotated frames 1 and `k`.
pub fn reciprocal_frames(k: usize, rate: usize) -> Vec<usize> {
    if rate == 0 {
        return Vec::new();
    }
    (2..k).filter(|t| (t - 1) % rate == 0).collect()
}

/// Positions and per-step motions of a tracking pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackRecord<T> {
    /// 1-based frame index of each entry, in traversal order.
    pub frames: Vec<usize>,
    pub positions: Vec<LandmarkPair<T>>,
    /// `motions[j]` carries `positions[j]` to `positions[j + 1]`.
    pub motions: Vec<Motion2<T>>,
}

impl<T: Scalar> TrackRecord<T> {
    pub fn last(&self) -> LandmarkPair<T> {
        *self.positions.last().expect("track record is never empty")
    }

    /// Position recorded for 1-based frame `t`.
    pub fn at_frame(&self, t: usize) -> Option<LandmarkPair<T>> {
        self.frames.iter().position(|&f| f == t).map(|i| self.positions[i])
    }
}

fn accumulate<T: Scalar>(start: LandmarkPair<T>, motions: &[Motion2<T>]) -> Vec<LandmarkPair<T>> {
    let mut positions = Vec::with_capacity(motions.len() + 1);
    positions.push(start);
    let mut cur = start;
    for &m in motions {
        cur = cur.displaced(m);
        positions.push(cur);
    }
    positions
}

/// Forward pass from frame 1: `positions[t] = positions[t-1] + motions[t-1]`.
pub fn compose_forward<T: Scalar>(start: LandmarkPair<T>, motions: &[Motion2<T>]) -> TrackRecord<T> {
    let k = motions.len() + 1;
    TrackRecord { frames: (1..=k).collect(), positions: accumulate(start, motions), motions: motions.to_vec() }
}

/// Backward pass from frame `k` down to frame 1; `motions[j]` moves frame
/// `k - j` to frame `k - j - 1`.
pub fn compose_backward<T: Scalar>(start: LandmarkPair<T>, motions: &[Motion2<T>]) -> TrackRecord<T> {
    let k = motions.len() + 1;
    TrackRecord { frames: (1..=k).rev().collect(), positions: accumulate(start, motions), motions: motions.to_vec() }
}

/// Squared Euclidean distance between two pairs as 4-vectors.
pub fn pair_sq_distance<T: Scalar>(a: &LandmarkPair<T>, b: &LandmarkPair<T>) -> T {
    a.to_array().iter().zip(b.to_array()).map(|(&x, y)| (x - y) * (x - y)).sum()
}

/// Gradient of [`pair_sq_distance`] w.r.t. `a`.
pub fn pair_sq_distance_grad<T: Scalar>(a: &LandmarkPair<T>, b: &LandmarkPair<T>) -> LandmarkPair<T> {
    let two = lit::<T>(2.0);
    let (x, y) = (a.to_array(), b.to_array());
    LandmarkPair::from_array([0, 1, 2, 3].map(|i| two * (x[i] - y[i])))
}

/// `‖L_k − L_k*‖²` at the last annotated frame.
pub fn motion_loss<T: Scalar>(predicted_end: &LandmarkPair<T>, truth_end: &LandmarkPair<T>) -> T {
    pair_sq_distance(truth_end, predicted_end)
}

/// `‖L_1 − L_1*‖²` after the forward-then-backward round trip.
pub fn cycle_loss<T: Scalar>(forward_backward_end: &LandmarkPair<T>, truth_start: &LandmarkPair<T>) -> T {
    pair_sq_distance(truth_start, forward_backward_end)
}

/// The closed form printed alongside the cycle loss, `-(motion_k + motion_1)`.
/// It is non-positive and unbounded below, so it is only logged next to the
/// optimized residual form.
pub fn printed_cycle_simplification<T: Scalar>(motion_k: T, motion_1: T) -> T {
    -(motion_k + motion_1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn single_pixel(p: f64) -> Heatmap<f64> {
        Heatmap::new(Tensor::from_vec(2, 1, 1, vec![p, p]).unwrap()).unwrap()
    }

    #[test]
    fn focal_single_positive_pixel() {
        let h = single_pixel(0.5);
        let t = LandmarkPair::new(Point2::zero(), Point2::zero());
        let per_channel = 0.25 * std::f64::consts::LN_2;
        let l = focal_loss(&h, &t, &FocalParams::default()).unwrap();
        assert!((l - 2.0 * per_channel).abs() < 1e-12);
        assert!((per_channel - 0.1733).abs() < 1e-4);
    }

    #[test]
    fn focal_near_zero_on_perfect_prediction() {
        let fp = FocalParams::default();
        let t = LandmarkPair::new(Point2::new(3.0, 4.0), Point2::new(6.0, 1.0));
        let target = render_pair_target(&t, 8, 8, 10.0).unwrap();
        let pred = target.map(|y| if y == 1.0 { 1.0 } else { 0.0 });
        let l = focal_loss(&Heatmap::new(pred).unwrap(), &t, &fp).unwrap();
        assert!(l >= 0.0 && l < 1e-9, "{l}");
    }

    #[test]
    fn focal_defaults() {
        let fp = FocalParams::<f64>::default();
        assert_eq!((fp.alpha, fp.beta, fp.radius), (2.0, 4.0, 10.0));
    }

    #[test]
    fn focal_rejects_out_of_bounds_target() {
        let h = single_pixel(0.5);
        let t = LandmarkPair::new(Point2::new(3.0, 0.0), Point2::zero());
        assert!(matches!(focal_loss(&h, &t, &FocalParams::default()), Err(Error::OutOfBounds { .. })));
    }

    #[test]
    fn reciprocal_skips_out_of_bounds() {
        let h = single_pixel(0.5);
        let t = LandmarkPair::new(Point2::new(-3.0, 0.0), Point2::zero());
        assert!(reciprocal_loss(&h, &t, &FocalParams::default()).unwrap().is_none());
    }

    #[test]
    fn reciprocal_delegates_to_focal() {
        let vals: Vec<f64> = (0..2 * 6 * 5).map(|i| 0.05 + 0.9 * ((i * 37 % 61) as f64 / 61.0)).collect();
        let h = Heatmap::new(Tensor::from_vec(2, 6, 5, vals).unwrap()).unwrap();
        let t = LandmarkPair::new(Point2::new(1.2, 4.6), Point2::new(3.0, 0.4));
        let fp = FocalParams::default();
        assert_eq!(reciprocal_loss(&h, &t, &fp).unwrap().unwrap(), focal_loss(&h, &t, &fp).unwrap());
    }

    #[test]
    fn reciprocal_schedule() {
        assert_eq!(reciprocal_frames(10, 3), vec![4, 7]);
        assert_eq!(reciprocal_frames(5, 2), vec![3]);
        assert_eq!(reciprocal_frames(3, 3), Vec::<usize>::new());
        for rate in [2, 3, 4, 5] {
            assert!(reciprocal_frames(20, rate).iter().all(|&t| t > 1 && t < 20 && (t - 1) % rate == 0));
        }
    }

    #[test]
    fn compose_examples() {
        let start = LandmarkPair::new(Point2::new(10.0, 10.0), Point2::new(20.0, 20.0));
        let m = [
            Motion2::new(Point2::new(1.0, 2.0), Point2::zero()),
            Motion2::new(Point2::new(2.0, -1.0), Point2::zero()),
        ];
        let fwd = compose_forward(start, &m);
        assert_eq!(fwd.frames, vec![1, 2, 3]);
        assert_eq!(fwd.positions[2].inferolateral, Point2::new(13.0, 11.0));
        let zero = compose_forward(start, &[Motion2::zero(); 4]);
        assert!(zero.positions.iter().all(|&p| p == start));
        let bwd = compose_backward(fwd.last(), &[-m[1], -m[0]]);
        assert_eq!(bwd.frames, vec![3, 2, 1]);
        assert_eq!(bwd.last(), start);
    }

    #[test]
    fn loss_examples() {
        let a = LandmarkPair::new(Point2::new(1.0, 1.0), Point2::new(5.0, 5.0));
        assert_eq!(motion_loss(&a, &a), 0.0);
        let b = LandmarkPair::new(Point2::new(4.0, 5.0), Point2::new(5.0, 5.0));
        assert_eq!(motion_loss(&b, &a), 25.0);
        let c = a.translate(Point2::new(1.0, 1.0));
        assert_eq!(cycle_loss(&c, &a), 4.0);
        assert_eq!(printed_cycle_simplification(3.0, 4.0), -7.0);
    }

    proptest! {
        #[test]
        fn losses_translation_invariant(v in proptest::array::uniform8(-50.0f64..50.0), dx in -20.0f64..20.0, dy in -20.0f64..20.0) {
            let a = LandmarkPair::from_array([v[0], v[1], v[2], v[3]]);
            let b = LandmarkPair::from_array([v[4], v[5], v[6], v[7]]);
            let s = Point2::new(dx, dy);
            let (l0, l1) = (motion_loss(&a, &b), motion_loss(&a.translate(s), &b.translate(s)));
            prop_assert!((l0 - l1).abs() <= 1e-9 * (1.0 + l0));
            let (c0, c1) = (cycle_loss(&a, &b), cycle_loss(&a.translate(s), &b.translate(s)));
            prop_assert!((c0 - c1).abs() <= 1e-9 * (1.0 + c0));
        }

        #[test]
        fn focal_nonnegative(vals in proptest::collection::vec(0.0f64..=1.0, 2 * 16), x in 0.0f64..3.4, y in 0.0f64..3.4) {
            let h = Heatmap::new(Tensor::from_vec(2, 4, 4, vals).unwrap()).unwrap();
            let t = LandmarkPair::new(Point2::new(x, y), Point2::new(y, x));
            prop_assert!(focal_loss(&h, &t, &FocalParams::default()).unwrap() >= 0.0);
        }

        #[test]
        fn integer_motions_invert_exactly(ms in proptest::collection::vec(proptest::array::uniform4(-9i32..9), 1..20)) {
            let motions: Vec<Motion2<f64>> = ms.iter().map(|m| Motion2::from_array(m.map(f64::from))).collect();
            let start = LandmarkPair::from_array([3.0, 4.0, 30.0, 40.0]);
            let fwd = compose_forward(start, &motions);
            let back: Vec<_> = motions.iter().rev().map(|&m| -m).collect();
            prop_assert_eq!(compose_backward(fwd.last(), &back).last(), start);
        }
    }
}
