//! Landmark geometry.
//!
//! Coordinates are `(x = column, y = row)` in pixels, origin at the centre of
//! the top-left pixel.

use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::scalar::{cast, Scalar};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Point2<T> {
    pub x: T,
    pub y: T,
}

impl<T: Serialize> Serialize for Point2<T> {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        (&self.x, &self.y).serialize(s)
    }
}

impl<'de, T: Deserialize<'de>> Deserialize<'de> for Point2<T> {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let (x, y) = <(T, T)>::deserialize(d)?;
        Ok(Self { x, y })
    }
}

impl<T> From<[T; 2]> for Point2<T> {
    fn from([x, y]: [T; 2]) -> Self {
        Self { x, y }
    }
}

impl<T> From<Point2<T>> for [T; 2] {
    fn from(p: Point2<T>) -> Self {
        [p.x, p.y]
    }
}

impl<T: Scalar> Point2<T> {
    pub fn new(x: T, y: T) -> Self {
        Self { x, y }
    }

    pub fn zero() -> Self {
        Self::new(T::zero(), T::zero())
    }

    pub fn norm_sq(self) -> T {
        self.x * self.x + self.y * self.y
    }

    pub fn norm(self) -> T {
        self.norm_sq().sqrt()
    }

    pub fn distance(self, other: Self) -> T {
        (self - other).norm()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn cast<U: Scalar>(self) -> Point2<U> {
        Point2::new(cast(self.x), cast(self.y))
    }

    /// Nearest integer pixel, rounding halves up.
    pub fn nearest_pixel(self) -> (i64, i64) {
        let half = crate::scalar::lit::<T>(0.5);
        (
            (self.x + half).floor().to_i64().unwrap_or(i64::MIN),
            (self.y + half).floor().to_i64().unwrap_or(i64::MIN),
        )
    }

    pub fn within(self, width: usize, height: usize) -> bool {
        let zero = T::zero();
        let (w, h) = (T::from_usize(width).unwrap(), T::from_usize(height).unwrap());
        self.x >= zero && self.y >= zero && self.x <= w - T::one() && self.y <= h - T::one()
    }
}

impl<T: Scalar> Add for Point2<T> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y)
    }
}

impl<T: Scalar> Sub for Point2<T> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y)
    }
}

impl<T: Scalar> Neg for Point2<T> {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.x, -self.y)
    }
}

impl<T: Scalar> Mul<T> for Point2<T> {
    type Output = Self;
    fn mul(self, s: T) -> Self {
        Self::new(self.x * s, self.y * s)
    }
}

/// The inferolateral / anteroseptal wall landmarks bounding the LV internal
/// dimension.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LandmarkPair<T> {
    #[serde(rename = "il")]
    pub inferolateral: Point2<T>,
    #[serde(rename = "al")]
    pub anteroseptal: Point2<T>,
}

impl<T: Scalar> LandmarkPair<T> {
    pub fn new(inferolateral: Point2<T>, anteroseptal: Point2<T>) -> Self {
        Self { inferolateral, anteroseptal }
    }

    /// `(x_il, y_il, x_al, y_al)`.
    pub fn to_array(self) -> [T; 4] {
        let (i, a) = (self.inferolateral, self.anteroseptal);
        [i.x, i.y, a.x, a.y]
    }

    pub fn from_array(v: [T; 4]) -> Self {
        Self::new(Point2::new(v[0], v[1]), Point2::new(v[2], v[3]))
    }

    pub fn points(self) -> [Point2<T>; 2] {
        [self.inferolateral, self.anteroseptal]
    }

    pub fn from_points(p: [Point2<T>; 2]) -> Self {
        Self::new(p[0], p[1])
    }

    /// Length of the segment between the two landmarks.
    pub fn lvid(self) -> T {
        self.inferolateral.distance(self.anteroseptal)
    }

    pub fn map(self, f: impl Fn(Point2<T>) -> Point2<T>) -> Self {
        Self::new(f(self.inferolateral), f(self.anteroseptal))
    }

    pub fn translate(self, by: Point2<T>) -> Self {
        self.map(|p| p + by)
    }

    pub fn displaced(self, m: Motion2<T>) -> Self {
        Self::new(self.inferolateral + m.d_i, self.anteroseptal + m.d_a)
    }

    pub fn is_finite(self) -> bool {
        self.inferolateral.is_finite() && self.anteroseptal.is_finite()
    }

    pub fn within(self, width: usize, height: usize) -> bool {
        self.inferolateral.within(width, height) && self.anteroseptal.within(width, height)
    }

    pub fn cast<U: Scalar>(self) -> LandmarkPair<U> {
        LandmarkPair::new(self.inferolateral.cast(), self.anteroseptal.cast())
    }
}

/// Per-landmark 2-D displacement between consecutive frames.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Motion2<T> {
    pub d_i: Point2<T>,
    pub d_a: Point2<T>,
}

impl<T: Scalar> Motion2<T> {
    pub fn new(d_i: Point2<T>, d_a: Point2<T>) -> Self {
        Self { d_i, d_a }
    }

    pub fn zero() -> Self {
        Self::new(Point2::zero(), Point2::zero())
    }

    pub fn to_array(self) -> [T; 4] {
        [self.d_i.x, self.d_i.y, self.d_a.x, self.d_a.y]
    }

    pub fn from_array(v: [T; 4]) -> Self {
        Self::new(Point2::new(v[0], v[1]), Point2::new(v[2], v[3]))
    }

    pub fn scale(self, s: T) -> Self {
        Self::new(self.d_i * s, self.d_a * s)
    }

    /// Displacement that carries `from` onto `to`.
    pub fn between(from: LandmarkPair<T>, to: LandmarkPair<T>) -> Self {
        Self::new(to.inferolateral - from.inferolateral, to.anteroseptal - from.anteroseptal)
    }

    pub fn is_finite(self) -> bool {
        self.d_i.is_finite() && self.d_a.is_finite()
    }

    pub fn cast<U: Scalar>(self) -> Motion2<U> {
        Motion2::new(self.d_i.cast(), self.d_a.cast())
    }
}

impl<T: Scalar> Neg for Motion2<T> {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.d_i, -self.d_a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_pixel_rounds_half_up() {
        assert_eq!(Point2::new(5.5f64, 3.5).nearest_pixel(), (6, 4));
        assert_eq!(Point2::new(5.49f64, -0.5).nearest_pixel(), (5, 0));
    }

    #[test]
    fn serde_uses_xy_arrays() {
        let pair = LandmarkPair::new(Point2::new(1.5f64, 2.0), Point2::new(3.0, 4.25));
        let json = serde_json::to_string(&pair).unwrap();
        assert_eq!(json, r#"{"il":[1.5,2.0],"al":[3.0,4.25]}"#);
        let back: LandmarkPair<f64> = serde_json::from_str(&json).unwrap();
        assert_eq!(back, pair);
    }
}
