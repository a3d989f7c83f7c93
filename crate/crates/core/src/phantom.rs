//! Synthetic cardiac cine loops.
//!
//! Each loop shows a tilted elliptical chamber (dark blood pool inside a
//! bright wall band) over a smooth tissue background. The two landmarks sit
//! on the inner wall edge at opposite ends of the short axis. The chamber
//! contracts from frame 1 to frame `k` on a half-cosine time profile.

use std::f64::consts::PI;

use image::{ImageBuffer, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{LandmarkPair, Point2};
use crate::sequence::CineSequence;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    /// `(height, width)` in pixels.
    pub image_size: (usize, usize),
    /// Inclusive range of frame counts.
    pub k_range: (usize, usize),
    /// Nominal relative shortening of the LVID between frame 1 and frame k.
    pub contraction_fraction: f64,
    /// Standard deviation of the log-normal speckle.
    pub speckle_strength: f64,
    /// Centimetres per pixel.
    pub pixel_spacing: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            image_size: (64, 64),
            k_range: (5, 20),
            contraction_fraction: 0.3,
            speckle_strength: 0.25,
            pixel_spacing: 0.05,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        if h < 64 || w < 64 {
            return Err(Error::config("image_size", format!("{h}x{w} is below the 64x64 minimum")));
        }
        let (lo, hi) = self.k_range;
        if lo < 3 || hi < lo {
            return Err(Error::config("k_range", format!("({lo}, {hi}) must satisfy 3 <= min <= max")));
        }
        if !(0.0..0.6).contains(&self.contraction_fraction) {
            return Err(Error::config(
                "contraction_fraction",
                format!("{} is outside [0, 0.6)", self.contraction_fraction),
            ));
        }
        if !(self.speckle_strength >= 0.0 && self.speckle_strength.is_finite()) {
            return Err(Error::config("speckle_strength", "must be finite and non-negative"));
        }
        if !(self.pixel_spacing > 0.0 && self.pixel_spacing.is_finite()) {
            return Err(Error::config("pixel_spacing", "must be finite and positive"));
        }
        Ok(())
    }

    /// Same data, but a still heart.
    pub fn static_variant(&self) -> Self {
        Self { contraction_fraction: 0.0, ..self.clone() }
    }
}

/// Per-sequence random draws that fix the anatomy.
#[derive(Clone, Debug)]
struct Anatomy {
    centre: Point2<f64>,
    /// Unit vector from the centre towards the inferolateral landmark.
    axis: Point2<f64>,
    /// Unit vector along the long axis.
    perp: Point2<f64>,
    half_ed: f64,
    half_es: f64,
    elongation: f64,
    wall_il: f64,
    wall_al: f64,
    texture: Vec<f64>,
    texture_side: usize,
}

fn sequence_rng(seed: u64, id: u64) -> ChaCha8Rng {
    let mut z = seed ^ id.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

/// Half-cosine interpolation weight for frame `t` of `k`; 0 at 1, 1 at `k`.
pub fn contraction_profile(t: usize, k: usize) -> f64 {
    if k <= 1 {
        return 0.0;
    }
    let phase = (t - 1) as f64 / (k - 1) as f64;
    0.5 * (1.0 - (PI * phase).cos())
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Anatomy {
    fn draw(cfg: &PhantomConfig, rng: &mut ChaCha8Rng) -> Self {
        let (h, w) = cfg.image_size;
        let scale = h.min(w) as f64 / 64.0;
        let tilt: f64 = rng.random_range(-15.0f64..=15.0).to_radians();
        let axis = Point2::new(-tilt.sin(), tilt.cos());
        let perp = Point2::new(tilt.cos(), tilt.sin());
        let jitter = 3.0 * scale;
        let centre = Point2::new(
            (w as f64 - 1.0) / 2.0 + rng.random_range(-jitter..=jitter),
            (h as f64 - 1.0) / 2.0 + rng.random_range(-jitter..=jitter),
        );
        let half_ed = rng.random_range(11.0..=14.0) * scale;
        let shortening = cfg.contraction_fraction * rng.random_range(0.8..=1.2);
        let half_es = half_ed * (1.0 - shortening);
        let elongation = rng.random_range(1.25..=1.45);
        let wall_il = rng.random_range(4.0..=5.0) * scale;
        let wall_al = rng.random_range(2.5..=3.5) * scale;
        let texture_side = 9;
        let texture = (0..texture_side * texture_side).map(|_| rng.random_range(-1.0..=1.0)).collect();
        Self { centre, axis, perp, half_ed, half_es, elongation, wall_il, wall_al, texture, texture_side }
    }

    fn landmarks(&self, s: f64) -> LandmarkPair<f64> {
        let ed = LandmarkPair::new(self.centre + self.axis * self.half_ed, self.centre - self.axis * self.half_ed);
        let es = LandmarkPair::new(self.centre + self.axis * self.half_es, self.centre - self.axis * self.half_es);
        let lerp = |a: Point2<f64>, b: Point2<f64>| a + (b - a) * s;
        LandmarkPair::new(lerp(ed.inferolateral, es.inferolateral), lerp(ed.anteroseptal, es.anteroseptal))
    }

    fn tissue(&self, x: f64, y: f64, h: usize, w: usize) -> f64 {
        let n = self.texture_side;
        let gx = x / (w - 1) as f64 * (n - 1) as f64;
        let gy = y / (h - 1) as f64 * (n - 1) as f64;
        let (x0, y0) = ((gx.floor() as usize).min(n - 2), (gy.floor() as usize).min(n - 2));
        let (fx, fy) = (gx - x0 as f64, gy - y0 as f64);
        let at = |r: usize, c: usize| self.texture[r * n + c];
        let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
        let bottom = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// Noise-free intensity of frame with contraction weight `s`.
    fn render(&self, s: f64, h: usize, w: usize) -> Vec<f64> {
        let half = self.half_ed + (self.half_es - self.half_ed) * s;
        let long = self.elongation * half;
        let marks = self.landmarks(s);
        let edge = 0.6;
        let mut out = vec![0.0; h * w];
        for r in 0..h {
            for c in 0..w {
                let q = Point2::new(c as f64, r as f64) - self.centre;
                let v = q.x * self.axis.x + q.y * self.axis.y;
                let u = q.x * self.perp.x + q.y * self.perp.y;
                let il_side = logistic(v / 1.5);
                let wall = self.wall_il * il_side + self.wall_al * (1.0 - il_side);
                let rho_in = ((u / long).powi(2) + (v / half).powi(2)).sqrt();
                let rho_out = ((u / (long + wall)).powi(2) + (v / (half + wall)).powi(2)).sqrt();
                let m_in = logistic((rho_in - 1.0) * half / edge);
                let m_out = logistic((1.0 - rho_out) * (half + wall) / edge);
                let blood = 1.0 - m_in;
                let band = m_in * m_out;
                let outside = m_in * (1.0 - m_out);
                let mut bright = 165.0 * (1.0 - il_side) + 210.0 * il_side;
                for (p, gain) in [(marks.inferolateral, 40.0), (marks.anteroseptal, 40.0)] {
                    let d2 = (Point2::new(c as f64, r as f64) - p).norm_sq();
                    bright += gain * (-d2 / (2.0 * 2.0 * 2.0)).exp();
                }
                let tissue = 70.0 + 25.0 * self.tissue(c as f64, r as f64, h, w);
                out[r * w + c] = 12.0 * blood + bright * band + tissue * outside;
            }
        }
        out
    }
}

/// Renders sequence `id`. A pure function of `(cfg, id)`.
pub fn generate_sequence(cfg: &PhantomConfig, id: u64) -> Result<CineSequence> {
    cfg.validate()?;
    let (h, w) = cfg.image_size;
    let mut rng = sequence_rng(cfg.seed, id);
    let k = rng.random_range(cfg.k_range.0..=cfg.k_range.1);
    let anatomy = Anatomy::draw(cfg, &mut rng);

    let truth: Vec<LandmarkPair<f64>> = (1..=k).map(|t| anatomy.landmarks(contraction_profile(t, k))).collect();
    let margin = 2.0;
    for pair in &truth {
        for p in pair.points() {
            if p.x < margin || p.y < margin || p.x > w as f64 - 1.0 - margin || p.y > h as f64 - 1.0 - margin {
                return Err(Error::config(
                    "contraction_fraction",
                    format!(
                        "landmark at ({:.2}, {:.2}) leaves the {h}x{w} frame with contraction {}",
                        p.x, p.y, cfg.contraction_fraction
                    ),
                ));
            }
        }
    }

    let sigma = cfg.speckle_strength;
    let frames = (1..=k)
        .map(|t| {
            let clean = anatomy.render(contraction_profile(t, k), h, w);
            let noisy: Vec<f32> = clean
                .iter()
                .map(|&v| {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    (v * (sigma * n - 0.5 * sigma * sigma).exp()) as f32
                })
                .collect();
            let buf: ImageBuffer<Luma<f32>, Vec<f32>> = ImageBuffer::from_raw(w as u32, h as u32, noisy).unwrap();
            let blurred = image::imageops::blur(&buf, 0.7);
            blurred.into_raw().into_iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect()
        })
        .collect();

    Ok(CineSequence {
        id: sequence_name(id),
        height: h,
        width: w,
        frames,
        first: truth[0],
        last: truth[k - 1],
        hidden_truth: Some(truth),
        pixel_spacing: cfg.pixel_spacing,
    })
}

/// Directory name of sequence `id`.
pub fn sequence_name(id: u64) -> String {
    format!("{id:05}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let cfg = PhantomConfig { seed: 11, ..Default::default() };
        assert_eq!(generate_sequence(&cfg, 3).unwrap(), generate_sequence(&cfg, 3).unwrap());
        assert_ne!(generate_sequence(&cfg, 3).unwrap().frames, generate_sequence(&cfg, 4).unwrap().frames);
    }

    #[test]
    fn k_within_range() {
        let cfg = PhantomConfig::default();
        for id in 0..60 {
            let k = generate_sequence(&cfg, id).unwrap().k();
            assert!((5..=20).contains(&k), "k = {k}");
        }
    }

    #[test]
    fn zero_contraction_is_static() {
        let cfg = PhantomConfig { contraction_fraction: 0.0, ..Default::default() };
        let s = generate_sequence(&cfg, 2).unwrap();
        let truth = s.hidden_truth.unwrap();
        assert!(truth.iter().all(|p| *p == truth[0]));
    }

    #[test]
    fn rejects_bad_config() {
        for cfg in [
            PhantomConfig { image_size: (32, 64), ..Default::default() },
            PhantomConfig { k_range: (9, 4), ..Default::default() },
            PhantomConfig { contraction_fraction: 0.6, ..Default::default() },
            PhantomConfig { pixel_spacing: 0.0, ..Default::default() },
        ] {
            assert!(matches!(generate_sequence(&cfg, 0), Err(Error::InvalidConfig { .. })));
        }
    }

    #[test]
    fn profile_endpoints() {
        assert_eq!(contraction_profile(1, 9), 0.0);
        assert_eq!(contraction_profile(9, 9), 1.0);
        assert!((contraction_profile(5, 9) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn landmarks_sit_on_the_wall() {
        let s = generate_sequence(&PhantomConfig { speckle_strength: 0.0, ..Default::default() }, 5).unwrap();
        let f = &s.frames[0];
        let (cr, cc) = {
            let c = (s.first.inferolateral + s.first.anteroseptal) * 0.5;
            (c.y.round() as usize, c.x.round() as usize)
        };
        let at = |p: Point2<f64>| f[p.y.round() as usize * s.width + p.x.round() as usize];
        assert!(at(s.first.inferolateral) > 80, "{}", at(s.first.inferolateral));
        assert!(at(s.first.anteroseptal) > 80);
        assert!(f[cr * s.width + cc] < 40);
    }
}
