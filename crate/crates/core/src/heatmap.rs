//! Heatmap targets, peak extraction, and image/feature coordinate mapping.

use crate::error::{Error, Result};
use crate::geometry::{LandmarkPair, Point2};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

/// Number of landmark channels in every heatmap.
pub const LANDMARKS: usize = 2;

/// Cumulative stride of the shared encoder.
pub const ENCODER_STRIDE: usize = 2;

/// Gaussian values below this are stored as exact zeros.
pub const TARGET_FLOOR: f64 = 1e-4;

/// Two-channel score map (channel 0 inferolateral, channel 1 anteroseptal).
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap<T> {
    scores: Tensor<T>,
}

impl<T: Scalar> Heatmap<T> {
    pub fn new(scores: Tensor<T>) -> Result<Self> {
        if scores.channels != LANDMARKS {
            return Err(Error::Shape(format!(
                "heatmap needs {LANDMARKS} channels, got {}",
                scores.channels
            )));
        }
        if let Some(bad) = scores.data.iter().find(|&&v| !(v >= T::zero() && v <= T::one())) {
            return Err(Error::Shape(format!("heatmap score {bad} outside [0, 1]")));
        }
        Ok(Self { scores })
    }

    pub fn scores(&self) -> &Tensor<T> {
        &self.scores
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.scores
    }

    pub fn height(&self) -> usize {
        self.scores.height
    }

    pub fn width(&self) -> usize {
        self.scores.width
    }
}

/// Renders the penalty-reduction target for one landmark: exactly 1 at the
/// pixel nearest `center`, `exp(-(dx²+dy²) / 2σ²)` elsewhere with
/// `σ = radius / 3`, offsets measured from that pixel. Values below
/// [`TARGET_FLOOR`] are zeroed. Row-major `height × width`.
pub fn render_gaussian_target<T: Scalar>(
    center: Point2<T>,
    height: usize,
    width: usize,
    radius: T,
) -> Result<Vec<T>> {
    if !(radius > T::zero()) {
        return Err(Error::config("radius", format!("must be positive, got {radius}")));
    }
    let (cx, cy) = center.nearest_pixel();
    if !center.is_finite() || cx < 0 || cy < 0 || cx >= width as i64 || cy >= height as i64 {
        return Err(Error::OutOfBounds {
            what: "gaussian target centre",
            x: center.x.to_f64().unwrap_or(f64::NAN),
            y: center.y.to_f64().unwrap_or(f64::NAN),
            width,
            height,
        });
    }
    let sigma = radius / lit(3.0);
    let denom = lit::<T>(2.0) * sigma * sigma;
    let floor = lit::<T>(TARGET_FLOOR);
    let mut map = vec![T::zero(); height * width];
    for y in 0..height {
        let dy = T::from_i64(y as i64 - cy).unwrap();
        for x in 0..width {
            let dx = T::from_i64(x as i64 - cx).unwrap();
            let v = if dx == T::zero() && dy == T::zero() {
                T::one()
            } else {
                (-(dx * dx + dy * dy) / denom).exp()
            };
            map[y * width + x] = if v < floor { T::zero() } else { v };
        }
    }
    Ok(map)
}

/// Both landmark targets stacked as a 2-channel tensor.
pub fn render_pair_target<T: Scalar>(
    centers: &LandmarkPair<T>,
    height: usize,
    width: usize,
    radius: T,
) -> Result<Tensor<T>> {
    let mut data = render_gaussian_target(centers.inferolateral, height, width, radius)?;
    data.extend(render_gaussian_target(centers.anteroseptal, height, width, radius)?);
    Tensor::from_vec(LANDMARKS, height, width, data)
}

/// Result of [`heatmap_argmax`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Peaks<T> {
    /// Peak locations in heatmap coordinates.
    pub pair: LandmarkPair<T>,
    /// Per channel: every score was equal, so `(0, 0)` was reported.
    pub degenerate: [bool; LANDMARKS],
}

impl<T> Peaks<T> {
    pub fn any_degenerate(&self) -> bool {
        self.degenerate.iter().any(|&d| d)
    }
}

/// Per-channel location of the maximal score. Ties go to the smallest
/// row-major index.
pub fn heatmap_argmax<T: Scalar>(h: &Heatmap<T>) -> Peaks<T> {
    let t = h.scores();
    let mut points = [Point2::zero(); LANDMARKS];
    let mut degenerate = [false; LANDMARKS];
    for c in 0..LANDMARKS {
        let plane = t.plane(c);
        let mut best = 0;
        let mut all_equal = true;
        for (i, &v) in plane.iter().enumerate() {
            if v > plane[best] {
                best = i;
            }
            if v != plane[0] {
                all_equal = false;
            }
        }
        if all_equal {
            degenerate[c] = true;
            best = 0;
        }
        points[c] = Point2::new(
            T::from_usize(best % t.width).unwrap(),
            T::from_usize(best / t.width).unwrap(),
        );
    }
    Peaks { pair: LandmarkPair::from_points(points), degenerate }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Space {
    Image,
    Feature,
}

/// Moves a point between image pixels and encoder feature cells.
/// Image → feature divides by the stride and rounds halves up; feature →
/// image multiplies by the stride.
pub fn map_coords<T: Scalar>(p: Point2<T>, from: Space, to: Space) -> Point2<T> {
    let stride = T::from_usize(ENCODER_STRIDE).unwrap();
    match (from, to) {
        (Space::Image, Space::Feature) => {
            let (x, y) = (p * (T::one() / stride)).nearest_pixel();
            Point2::new(T::from_i64(x).unwrap(), T::from_i64(y).unwrap())
        }
        (Space::Feature, Space::Image) => p * stride,
        _ => p,
    }
}

/// Image-space pair to continuous heatmap coordinates (no rounding).
pub fn image_to_heatmap<T: Scalar>(pair: LandmarkPair<T>) -> LandmarkPair<T> {
    let s = T::one() / T::from_usize(ENCODER_STRIDE).unwrap();
    pair.map(|p| p * s)
}

pub fn heatmap_to_image<T: Scalar>(pair: LandmarkPair<T>) -> LandmarkPair<T> {
    pair.map(|p| map_coords(p, Space::Feature, Space::Image))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one_channel_heatmap(plane: Vec<f64>, h: usize, w: usize) -> Heatmap<f64> {
        let mut data = plane.clone();
        data.extend(plane);
        Heatmap::new(Tensor::from_vec(2, h, w, data).unwrap()).unwrap()
    }

    #[test]
    fn target_is_one_at_centre() {
        let map = render_gaussian_target(Point2::new(4.0f64, 6.0), 12, 10, 10.0).unwrap();
        assert_eq!(map[6 * 10 + 4], 1.0);
        assert!(map.iter().all(|&v| v <= 1.0));
    }

    #[test]
    fn target_one_sigma_offset() {
        // σ = 10/3, so dx = σ lands between pixels; evaluate the closed form
        // at an integer offset and compare.
        let map = render_gaussian_target(Point2::new(10.0f64, 10.0), 21, 21, 10.0).unwrap();
        let sigma: f64 = 10.0 / 3.0;
        let want = (-(3.0f64 * 3.0) / (2.0 * sigma * sigma)).exp();
        assert!((map[10 * 21 + 13] - want).abs() < 1e-15);
        // the value at exactly one σ is e^{-1/2}
        assert!(((-(sigma * sigma) / (2.0 * sigma * sigma)).exp() - 0.60653).abs() < 1e-5);
    }

    #[test]
    fn target_truncates_tail() {
        let map = render_gaussian_target(Point2::new(0.0f64, 0.0), 40, 40, 10.0).unwrap();
        assert_eq!(map[39 * 40 + 39], 0.0);
        assert!(map.iter().all(|&v| v == 0.0 || v >= TARGET_FLOOR));
    }

    #[test]
    fn target_rejects_out_of_bounds() {
        let err = render_gaussian_target(Point2::new(10.0f64, 2.0), 8, 8, 10.0).unwrap_err();
        assert!(matches!(err, Error::OutOfBounds { width: 8, height: 8, .. }));
        assert!(err.to_string().contains("(10, 2)"));
    }

    #[test]
    fn argmax_unique_maximum() {
        let mut plane = vec![0.0; 10 * 10];
        plane[3 * 10 + 7] = 1.0;
        let p = heatmap_argmax(&one_channel_heatmap(plane, 10, 10));
        assert_eq!(p.pair.inferolateral, Point2::new(7.0, 3.0));
        assert!(!p.any_degenerate());
    }

    #[test]
    fn argmax_tie_break_row_major() {
        // equal maxima at (row 0, col 5) and (row 2, col 1): row 0 wins.
        let mut plane = vec![0.0; 8 * 8];
        plane[5] = 0.9;
        plane[2 * 8 + 1] = 0.9;
        let p = heatmap_argmax(&one_channel_heatmap(plane, 8, 8));
        assert_eq!(p.pair.inferolateral, Point2::new(5.0, 0.0));
    }

    #[test]
    fn argmax_degenerate_channel() {
        let p = heatmap_argmax(&one_channel_heatmap(vec![0.3; 16], 4, 4));
        assert_eq!(p.pair.inferolateral, Point2::zero());
        assert_eq!(p.degenerate, [true, true]);
    }

    #[test]
    fn map_coords_examples() {
        let f = map_coords(Point2::new(10.0f64, 6.0), Space::Image, Space::Feature);
        assert_eq!(f, Point2::new(5.0, 3.0));
        assert_eq!(map_coords(f, Space::Feature, Space::Image), Point2::new(10.0, 6.0));
        let g = map_coords(Point2::new(11.0f64, 7.0), Space::Image, Space::Feature);
        assert_eq!(g, Point2::new(6.0, 4.0));
    }

    proptest! {
        #[test]
        fn target_symmetric_and_peaked(cx in 5usize..15, cy in 5usize..15, dx in 0usize..5, dy in 0usize..5) {
            let map = render_gaussian_target(Point2::new(cx as f64, cy as f64), 20, 20, 10.0).unwrap();
            let at = |x: usize, y: usize| map[y * 20 + x];
            prop_assert_eq!(at(cx + dx, cy + dy), at(cx - dx, cy - dy));
            prop_assert_eq!(at(cx + dx, cy - dy), at(cx - dx, cy + dy));
            let max = map.iter().cloned().fold(f64::MIN, f64::max);
            prop_assert_eq!(max, 1.0);
            prop_assert_eq!(at(cx, cy), 1.0);
        }

        #[test]
        fn argmax_recovers_rendered_centre(x in 0.0f64..23.4, y in 0.0f64..15.4) {
            let c = Point2::new(x, y);
            let il = render_gaussian_target(c, 16, 24, 10.0).unwrap();
            let al = render_gaussian_target(Point2::new(3.0, 3.0), 16, 24, 10.0).unwrap();
            let mut data = il;
            data.extend(al);
            let h = Heatmap::new(Tensor::from_vec(2, 16, 24, data).unwrap()).unwrap();
            let (px, py) = c.nearest_pixel();
            prop_assert_eq!(heatmap_argmax(&h).pair.inferolateral, Point2::new(px as f64, py as f64));
        }

        #[test]
        fn map_coords_round_trip_bound(x in 0.0f64..500.0, y in 0.0f64..500.0) {
            let p = Point2::new(x, y);
            let back = map_coords(map_coords(p, Space::Image, Space::Feature), Space::Feature, Space::Image);
            prop_assert!((back.x - x).abs() <= ENCODER_STRIDE as f64);
            prop_assert!((back.y - y).abs() <= ENCODER_STRIDE as f64);
        }

        #[test]
        fn argmax_invariant_under_monotone_rescale(vals in proptest::collection::vec(0.0f64..1.0, 32)) {
            let h = Heatmap::new(Tensor::from_vec(2, 4, 4, vals.clone()).unwrap()).unwrap();
            let g = Heatmap::new(Tensor::from_vec(2, 4, 4, vals.iter().map(|v| v.powi(3) * 0.5 + 0.1).collect()).unwrap()).unwrap();
            prop_assert_eq!(heatmap_argmax(&h), heatmap_argmax(&g));
        }
    }
}
