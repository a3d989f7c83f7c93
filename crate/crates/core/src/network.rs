//! Shared encoder, detection head, and tracking head.
//!
//! ```text
//! frame ──► encoder ──► feature map ──► detector ──► 2-channel heatmap (½ res)
//!                           │
//!                           └─ crops at landmarks (t-1, t) ──► tracker ──► motion
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{LandmarkPair, Motion2, Point2};
use crate::heatmap::{map_coords, Heatmap, Space, ENCODER_STRIDE, LANDMARKS};
use crate::layers::{
    cross_correlate, cross_correlate_backward, relu_backward_inplace, relu_inplace, sigmoid, Conv2d,
    ConvCache, Linear, UpCache, UpConv2, LINEAR_GAIN, RELU_GAIN,
};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

/// Encoder output; spatial size is half the input frame.
pub type FeatureMap<T> = Tensor<T>;

/// Layer widths and crop geometry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    /// Output width of each 3×3 encoder convolution.
    pub encoder_channels: Vec<usize>,
    /// Zero-based index of the stride-2 encoder layer.
    pub encoder_stride_layer: usize,
    /// Widths of the two contracting stages of the detection head.
    pub detector_channels: [usize; 2],
    /// Convolutions per contracting stage (the first one has stride 2).
    pub detector_convs_per_stage: usize,
    /// Width of the 3×3 layer feeding the 1×1 classifier.
    pub head_channels: usize,
    pub template_size: usize,
    pub search_size: usize,
    /// Hidden widths of the motion regressor.
    pub tracker_hidden: Vec<usize>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            encoder_channels: vec![16, 16, 32, 32, 32, 32],
            encoder_stride_layer: 2,
            detector_channels: [64, 128],
            detector_convs_per_stage: 3,
            head_channels: 48,
            template_size: 25,
            search_size: 29,
            tracker_hidden: vec![64, 32],
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.encoder_channels.is_empty() || self.encoder_channels.contains(&0) {
            return Err(Error::config("encoder_channels", "need at least one non-zero width"));
        }
        if self.encoder_stride_layer >= self.encoder_channels.len() {
            return Err(Error::config("encoder_stride_layer", "index past the last encoder layer"));
        }
        if self.detector_convs_per_stage == 0 || self.detector_channels.contains(&0) || self.head_channels == 0 {
            return Err(Error::config("detector_channels", "widths and depth must be positive"));
        }
        if self.template_size % 2 == 0 || self.search_size % 2 == 0 {
            return Err(Error::config("template_size", "crop sizes must be odd"));
        }
        if self.template_size >= self.search_size {
            return Err(Error::config("template_size", "template must be smaller than the search patch"));
        }
        if self.tracker_hidden.contains(&0) {
            return Err(Error::config("tracker_hidden", "hidden widths must be positive"));
        }
        Ok(())
    }

    pub fn feature_channels(&self) -> usize {
        *self.encoder_channels.last().expect("validated")
    }

    /// Side length of each landmark's affinity map.
    pub fn affinity_side(&self) -> usize {
        self.search_size - self.template_size + 1
    }

    /// Short digest stored in checkpoints.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// Parameter partition used to freeze or update parts of the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Encoder,
    Detector,
    Tracker,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Encoder, Group::Detector, Group::Tracker];

    pub fn name(self) -> &'static str {
        match self {
            Group::Encoder => "encoder",
            Group::Detector => "detector",
            Group::Tracker => "tracker",
        }
    }
}

// ---------------------------------------------------------------------------
// Encoder

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T> {
    pub convs: Vec<Conv2d<T>>,
}

pub struct EncoderCache<T> {
    layers: Vec<(ConvCache<T>, Tensor<T>)>,
}

impl<T: Scalar> Encoder<T> {
    fn new(cfg: &NetworkConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut cin = 1;
        let convs = cfg
            .encoder_channels
            .iter()
            .enumerate()
            .map(|(i, &cout)| {
                let stride = if i == cfg.encoder_stride_layer { ENCODER_STRIDE } else { 1 };
                let conv = Conv2d::new(cin, cout, 3, stride, RELU_GAIN, rng);
                cin = cout;
                conv
            })
            .collect();
        Self { convs }
    }

    pub fn zeros_like(&self) -> Self {
        Self { convs: self.convs.iter().map(Conv2d::zeros_like).collect() }
    }

    /// Runs the encoder on a `1×H×W` frame with values in `[0, 1]`.
    pub fn encode(&self, frame: &Tensor<T>) -> Result<FeatureMap<T>> {
        self.forward(frame).map(|(f, _)| f)
    }

    pub fn forward(&self, frame: &Tensor<T>) -> Result<(FeatureMap<T>, EncoderCache<T>)> {
        if frame.channels != 1 {
            return Err(Error::Shape(format!("encoder expects 1 channel, got {}", frame.channels)));
        }
        if frame.height % ENCODER_STRIDE != 0 || frame.width % ENCODER_STRIDE != 0 {
            return Err(Error::Shape(format!(
                "frame {}x{} is not divisible by the encoder stride {ENCODER_STRIDE}",
                frame.height, frame.width
            )));
        }
        let mut layers = Vec::with_capacity(self.convs.len());
        let mut x = frame.clone();
        for conv in &self.convs {
            let (mut y, cache) = conv.forward(&x);
            relu_inplace(&mut y.data);
            layers.push((cache, y.clone()));
            x = y;
        }
        Ok((x, EncoderCache { layers }))
    }

    pub fn backward(&self, cache: &EncoderCache<T>, dfeat: &FeatureMap<T>, grad: &mut Self) {
        let mut g = dfeat.clone();
        for (i, (conv, (cc, out))) in self.convs.iter().zip(&cache.layers).enumerate().rev() {
            relu_backward_inplace(&mut g.data, &out.data);
            match conv.backward(cc, &g, &mut grad.convs[i], i > 0) {
                Some(dx) => g = dx,
                None => break,
            }
        }
    }

    fn params(&self) -> Vec<&[T]> {
        self.convs.iter().flat_map(|c| c.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut [T]> {
        self.convs.iter_mut().flat_map(|c| c.params_mut()).collect()
    }
}

// ---------------------------------------------------------------------------
// Detection head

#[derive(Clone, Debug, PartialEq)]
pub struct Detector<T> {
    pub stage1: Vec<Conv2d<T>>,
    pub stage2: Vec<Conv2d<T>>,
    pub up1: UpConv2<T>,
    pub merge1: Conv2d<T>,
    pub up2: UpConv2<T>,
    pub merge2: Conv2d<T>,
    pub classifier: Conv2d<T>,
}

type Layered<T> = Vec<(ConvCache<T>, Tensor<T>)>;

pub struct DetectorCache<T> {
    stage1: Layered<T>,
    stage2: Layered<T>,
    up1: UpCache<T>,
    merge1: (ConvCache<T>, Tensor<T>),
    up2: UpCache<T>,
    merge2: (ConvCache<T>, Tensor<T>),
    classifier: ConvCache<T>,
    up1_channels: usize,
    up2_channels: usize,
    probs: Tensor<T>,
}

fn conv_relu_stack<T: Scalar>(convs: &[Conv2d<T>], x: &Tensor<T>) -> (Tensor<T>, Layered<T>) {
    let mut cur = x.clone();
    let mut caches = Vec::with_capacity(convs.len());
    for conv in convs {
        let (mut y, c) = conv.forward(&cur);
        relu_inplace(&mut y.data);
        caches.push((c, y.clone()));
        cur = y;
    }
    (cur, caches)
}

fn conv_relu_stack_backward<T: Scalar>(
    convs: &[Conv2d<T>],
    caches: &Layered<T>,
    dout: Tensor<T>,
    grads: &mut [Conv2d<T>],
) -> Tensor<T> {
    let mut g = dout;
    for i in (0..convs.len()).rev() {
        let (cc, out) = &caches[i];
        relu_backward_inplace(&mut g.data, &out.data);
        g = convs[i].backward(cc, &g, &mut grads[i], true).expect("input grad requested");
    }
    g
}

impl<T: Scalar> Detector<T> {
    fn new(cfg: &NetworkConfig, rng: &mut ChaCha8Rng) -> Self {
        let feat = cfg.feature_channels();
        let [c1, c2] = cfg.detector_channels;
        let stage = |cin: usize, cout: usize, rng: &mut ChaCha8Rng| {
            (0..cfg.detector_convs_per_stage)
                .map(|i| {
                    let (ci, s) = if i == 0 { (cin, 2) } else { (cout, 1) };
                    Conv2d::new(ci, cout, 3, s, RELU_GAIN, rng)
                })
                .collect::<Vec<_>>()
        };
        let stage1 = stage(feat, c1, rng);
        let stage2 = stage(c1, c2, rng);
        let up1 = UpConv2::new(c2, c2 / 2, rng);
        let merge1 = Conv2d::new(c2 / 2 + c1, c1, 3, 1, RELU_GAIN, rng);
        let up2 = UpConv2::new(c1, c1 / 2, rng);
        let merge2 = Conv2d::new(c1 / 2 + feat, cfg.head_channels, 3, 1, RELU_GAIN, rng);
        let classifier = Conv2d::new(cfg.head_channels, LANDMARKS, 1, 1, LINEAR_GAIN, rng);
        Self { stage1, stage2, up1, merge1, up2, merge2, classifier }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            stage1: self.stage1.iter().map(Conv2d::zeros_like).collect(),
            stage2: self.stage2.iter().map(Conv2d::zeros_like).collect(),
            up1: self.up1.zeros_like(),
            merge1: self.merge1.zeros_like(),
            up2: self.up2.zeros_like(),
            merge2: self.merge2.zeros_like(),
            classifier: self.classifier.zeros_like(),
        }
    }

    pub fn detect(&self, feature: &FeatureMap<T>) -> Result<Heatmap<T>> {
        self.forward(feature).map(|(h, _)| h)
    }

    pub fn forward(&self, feature: &FeatureMap<T>) -> Result<(Heatmap<T>, DetectorCache<T>)> {
        if feature.height % 4 != 0 || feature.width % 4 != 0 {
            return Err(Error::Shape(format!(
                "feature map {}x{} is not divisible by 4",
                feature.height, feature.width
            )));
        }
        let (s1, stage1) = conv_relu_stack(&self.stage1, feature);
        let (s2, stage2) = conv_relu_stack(&self.stage2, &s1);
        let (u1, up1) = self.up1.forward(&s2);
        let cat1 = Tensor::concat_channels(&[&u1, &s1]);
        let (mut m1, mc1) = self.merge1.forward(&cat1);
        relu_inplace(&mut m1.data);
        let (u2, up2) = self.up2.forward(&m1);
        let cat2 = Tensor::concat_channels(&[&u2, feature]);
        let (mut m2, mc2) = self.merge2.forward(&cat2);
        relu_inplace(&mut m2.data);
        let (logits, cls) = self.classifier.forward(&m2);
        let probs = logits.map(sigmoid);
        let cache = DetectorCache {
            stage1,
            stage2,
            up1,
            merge1: (mc1, m1),
            up2,
            merge2: (mc2, m2),
            classifier: cls,
            up1_channels: u1.channels,
            up2_channels: u2.channels,
            probs: probs.clone(),
        };
        Ok((Heatmap::new(probs)?, cache))
    }

    /// Backpropagates a gradient w.r.t. heatmap scores; returns the gradient
    /// w.r.t. the input feature map.
    pub fn backward(&self, cache: &DetectorCache<T>, dprobs: &Tensor<T>, grad: &mut Self) -> FeatureMap<T> {
        // The sigmoid slope is taken at the clamped score, matching the loss,
        // so an underflowed score still passes gradient to its logit.
        let lo = lit::<T>(crate::losses::SCORE_CLAMP);
        let hi = T::one() - lo;
        let mut dlogits = dprobs.clone();
        for (g, &p) in dlogits.data.iter_mut().zip(&cache.probs.data) {
            let p = p.max(lo).min(hi);
            *g *= p * (T::one() - p);
        }
        let mut dm2 = self
            .classifier
            .backward(&cache.classifier, &dlogits, &mut grad.classifier, true)
            .expect("input grad requested");
        relu_backward_inplace(&mut dm2.data, &cache.merge2.1.data);
        let dcat2 = self.merge2.backward(&cache.merge2.0, &dm2, &mut grad.merge2, true).expect("input grad");
        let (du2, mut dfeat) = dcat2.split_channels(cache.up2_channels);
        let mut dm1 = self.up2.backward(&cache.up2, &du2, &mut grad.up2);
        relu_backward_inplace(&mut dm1.data, &cache.merge1.1.data);
        let dcat1 = self.merge1.backward(&cache.merge1.0, &dm1, &mut grad.merge1, true).expect("input grad");
        let (du1, ds1_skip) = dcat1.split_channels(cache.up1_channels);
        let ds2 = self.up1.backward(&cache.up1, &du1, &mut grad.up1);
        let mut ds1 = conv_relu_stack_backward(&self.stage2, &cache.stage2, ds2, &mut grad.stage2);
        ds1.add_assign(&ds1_skip);
        let dmain = conv_relu_stack_backward(&self.stage1, &cache.stage1, ds1, &mut grad.stage1);
        dfeat.add_assign(&dmain);
        dfeat
    }

    fn params(&self) -> Vec<&[T]> {
        let mut v: Vec<&[T]> = Vec::new();
        v.extend(self.stage1.iter().flat_map(|c| c.params()));
        v.extend(self.stage2.iter().flat_map(|c| c.params()));
        v.extend(self.up1.params());
        v.extend(self.merge1.params());
        v.extend(self.up2.params());
        v.extend(self.merge2.params());
        v.extend(self.classifier.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut [T]> {
        let mut v: Vec<&mut [T]> = Vec::new();
        v.extend(self.stage1.iter_mut().flat_map(|c| c.params_mut()));
        v.extend(self.stage2.iter_mut().flat_map(|c| c.params_mut()));
        v.extend(self.up1.params_mut());
        v.extend(self.merge1.params_mut());
        v.extend(self.up2.params_mut());
        v.extend(self.merge2.params_mut());
        v.extend(self.classifier.params_mut());
        v
    }
}

// ---------------------------------------------------------------------------
// Cropping

/// Template and search crops for both landmarks, channel-concatenated
/// (inferolateral channels first).
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPair<T> {
    pub template: Tensor<T>,
    pub search: Tensor<T>,
    /// Integer feature cells the crops were centred on, `[il, al]`.
    pub centers: [(i64, i64); LANDMARKS],
}

/// `size×size` crop of every channel centred on `(cx, cy)`, zero outside.
pub fn crop<T: Scalar>(feat: &Tensor<T>, cx: i64, cy: i64, size: usize) -> Tensor<T> {
    let half = (size / 2) as i64;
    let mut out = Tensor::zeros(feat.channels, size, size);
    let (x0, y0) = (cx - half, cy - half);
    let xs = x0.max(0);
    let xe = (x0 + size as i64).min(feat.width as i64);
    if xs >= xe {
        return out;
    }
    for c in 0..feat.channels {
        for r in 0..size as i64 {
            let y = y0 + r;
            if y < 0 || y >= feat.height as i64 {
                continue;
            }
            let src = &feat.plane(c)[y as usize * feat.width + xs as usize..y as usize * feat.width + xe as usize];
            let off = (r as usize) * size + (xs - x0) as usize;
            out.plane_mut(c)[off..off + src.len()].copy_from_slice(src);
        }
    }
    out
}

/// Adjoint of [`crop`]: adds `grad` back into `dfeat` at the crop window.
pub fn crop_backward<T: Scalar>(grad: &Tensor<T>, cx: i64, cy: i64, dfeat: &mut Tensor<T>) {
    let size = grad.height;
    let half = (size / 2) as i64;
    let (x0, y0) = (cx - half, cy - half);
    let xs = x0.max(0);
    let xe = (x0 + size as i64).min(dfeat.width as i64);
    if xs >= xe {
        return;
    }
    let width = dfeat.width;
    for c in 0..grad.channels {
        for r in 0..size as i64 {
            let y = y0 + r;
            if y < 0 || y >= dfeat.height as i64 {
                continue;
            }
            let off = (r as usize) * size + (xs - x0) as usize;
            let src = &grad.plane(c)[off..off + (xe - xs) as usize];
            let dst = &mut dfeat.plane_mut(c)[y as usize * width + xs as usize..y as usize * width + xe as usize];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
}

/// Crops templates from the previous frame's features and search regions
/// from the current frame's features, both centred on the previous
/// landmark positions (given in image space).
pub fn crop_patches<T: Scalar>(
    cfg: &NetworkConfig,
    feat_prev: &FeatureMap<T>,
    feat_cur: &FeatureMap<T>,
    centers_prev: &LandmarkPair<T>,
) -> PatchPair<T> {
    let mut centers = [(0, 0); LANDMARKS];
    let mut templates = Vec::with_capacity(LANDMARKS);
    let mut searches = Vec::with_capacity(LANDMARKS);
    for (i, p) in centers_prev.points().into_iter().enumerate() {
        let f = map_coords(p, Space::Image, Space::Feature);
        let (cx, cy) = (f.x.to_i64().unwrap_or(i64::MIN / 4), f.y.to_i64().unwrap_or(i64::MIN / 4));
        centers[i] = (cx, cy);
        templates.push(crop(feat_prev, cx, cy, cfg.template_size));
        searches.push(crop(feat_cur, cx, cy, cfg.search_size));
    }
    PatchPair {
        template: Tensor::concat_channels(&[&templates[0], &templates[1]]),
        search: Tensor::concat_channels(&[&searches[0], &searches[1]]),
        centers,
    }
}

/// Scatters patch gradients back into the two feature maps.
pub fn crop_patches_backward<T: Scalar>(
    pp: &PatchPair<T>,
    dtemplate: &Tensor<T>,
    dsearch: &Tensor<T>,
    dfeat_prev: Option<&mut FeatureMap<T>>,
    dfeat_cur: Option<&mut FeatureMap<T>>,
) {
    let c = dtemplate.channels / LANDMARKS;
    if let Some(dp) = dfeat_prev {
        let (t0, t1) = dtemplate.split_channels(c);
        crop_backward(&t0, pp.centers[0].0, pp.centers[0].1, dp);
        crop_backward(&t1, pp.centers[1].0, pp.centers[1].1, dp);
    }
    if let Some(dc) = dfeat_cur {
        let (s0, s1) = dsearch.split_channels(c);
        crop_backward(&s0, pp.centers[0].0, pp.centers[0].1, dc);
        crop_backward(&s1, pp.centers[1].0, pp.centers[1].1, dc);
    }
}

// ---------------------------------------------------------------------------
// Tracking head

#[derive(Clone, Debug, PartialEq)]
pub struct Tracker<T> {
    pub layers: Vec<Linear<T>>,
}

pub struct TrackerCache<T> {
    template: [Tensor<T>; LANDMARKS],
    search: [Tensor<T>; LANDMARKS],
    standardized: Vec<T>,
    inv_std: [T; LANDMARKS],
    inputs: Vec<Vec<T>>,
    outputs: Vec<Vec<T>>,
}

const STANDARDIZE_EPS: f64 = 1e-8;

impl<T: Scalar> Tracker<T> {
    fn new(cfg: &NetworkConfig, rng: &mut ChaCha8Rng) -> Self {
        let side = cfg.affinity_side();
        let mut widths = vec![LANDMARKS * side * side];
        widths.extend(&cfg.tracker_hidden);
        widths.push(2 * LANDMARKS);
        let n = widths.len() - 1;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(w[0], w[1], if i + 1 == n { LINEAR_GAIN } else { RELU_GAIN }, rng))
            .collect();
        Self { layers }
    }

    pub fn zeros_like(&self) -> Self {
        Self { layers: self.layers.iter().map(Linear::zeros_like).collect() }
    }

    /// Raw per-landmark affinity maps (`LANDMARKS × side²`).
    pub fn affinity(pp: &PatchPair<T>) -> [Vec<T>; LANDMARKS] {
        let c = pp.template.channels / LANDMARKS;
        let (t0, t1) = pp.template.split_channels(c);
        let (s0, s1) = pp.search.split_channels(c);
        [cross_correlate(&t0, &s0), cross_correlate(&t1, &s1)]
    }

    /// Predicts both landmark displacements in feature cells.
    pub fn track_step(&self, pp: &PatchPair<T>) -> Motion2<T> {
        self.forward(pp).0
    }

    pub fn forward(&self, pp: &PatchPair<T>) -> (Motion2<T>, TrackerCache<T>) {
        let c = pp.template.channels / LANDMARKS;
        let (t0, t1) = pp.template.split_channels(c);
        let (s0, s1) = pp.search.split_channels(c);
        let raw = [cross_correlate(&t0, &s0), cross_correlate(&t1, &s1)];
        // Each affinity map is standardized to zero mean, unit variance so the
        // regressor sees the shape of the response, not its magnitude.
        let mut standardized = Vec::with_capacity(raw[0].len() * LANDMARKS);
        let mut inv_std = [T::zero(); LANDMARKS];
        for (l, a) in raw.iter().enumerate() {
            let n = T::from_usize(a.len()).unwrap();
            let mean = a.iter().copied().sum::<T>() / n;
            let var = a.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + lit(STANDARDIZE_EPS)).sqrt();
            inv_std[l] = is;
            standardized.extend(a.iter().map(|&v| (v - mean) * is));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut x = standardized.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut y = layer.forward(&x);
            if i < last {
                relu_inplace(&mut y);
            }
            inputs.push(x);
            outputs.push(y.clone());
            x = y;
        }
        let motion = Motion2::from_array([x[0], x[1], x[2], x[3]]);
        let cache = TrackerCache { template: [t0, t1], search: [s0, s1], standardized, inv_std, inputs, outputs };
        (motion, cache)
    }

    /// Returns gradients w.r.t. the template and search stacks.
    pub fn backward(&self, cache: &TrackerCache<T>, dmotion: Motion2<T>, grad: &mut Self) -> (Tensor<T>, Tensor<T>) {
        let mut g = dmotion.to_array().to_vec();
        let last = self.layers.len() - 1;
        for i in (0..self.layers.len()).rev() {
            if i < last {
                for (gv, &y) in g.iter_mut().zip(&cache.outputs[i]) {
                    if y <= T::zero() {
                        *gv = T::zero();
                    }
                }
            }
            g = self.layers[i].backward(&cache.inputs[i], &g, &mut grad.layers[i]);
        }
        let per = g.len() / LANDMARKS;
        let mut dts = Vec::with_capacity(LANDMARKS);
        let mut dss = Vec::with_capacity(LANDMARKS);
        for l in 0..LANDMARKS {
            let dz = &g[l * per..(l + 1) * per];
            let z = &cache.standardized[l * per..(l + 1) * per];
            let n = T::from_usize(per).unwrap();
            let mean_dz = dz.iter().copied().sum::<T>() / n;
            let mean_dzz = dz.iter().zip(z).map(|(&a, &b)| a * b).sum::<T>() / n;
            let da: Vec<T> = dz.iter().zip(z).map(|(&d, &zz)| cache.inv_std[l] * (d - mean_dz - zz * mean_dzz)).collect();
            let (dt, ds) = cross_correlate_backward(&cache.template[l], &cache.search[l], &da);
            dts.push(dt);
            dss.push(ds);
        }
        (
            Tensor::concat_channels(&[&dts[0], &dts[1]]),
            Tensor::concat_channels(&[&dss[0], &dss[1]]),
        )
    }

    fn params(&self) -> Vec<&[T]> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut [T]> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}

// ---------------------------------------------------------------------------
// Whole model

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub config: NetworkConfig,
    pub encoder: Encoder<T>,
    pub detector: Detector<T>,
    pub tracker: Tracker<T>,
}

impl<T: Scalar> ModelParams<T> {
    /// Fan-in scaled normal weights, zero biases, seeded.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::new(&config, &mut rng);
        let detector = Detector::new(&config, &mut rng);
        let tracker = Tracker::new(&config, &mut rng);
        let params = Self { config, encoder, detector, tracker };
        let total: usize = params.all_params().iter().map(|s| s.len()).sum();
        let grouped: usize = Group::ALL.iter().map(|&g| params.group_len(g)).sum();
        assert_eq!(total, grouped, "parameter groups must partition the model");
        Ok(params)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            encoder: self.encoder.zeros_like(),
            detector: self.detector.zeros_like(),
            tracker: self.tracker.zeros_like(),
        }
    }

    pub fn group(&self, g: Group) -> Vec<&[T]> {
        match g {
            Group::Encoder => self.encoder.params(),
            Group::Detector => self.detector.params(),
            Group::Tracker => self.tracker.params(),
        }
    }

    pub fn group_mut(&mut self, g: Group) -> Vec<&mut [T]> {
        match g {
            Group::Encoder => self.encoder.params_mut(),
            Group::Detector => self.detector.params_mut(),
            Group::Tracker => self.tracker.params_mut(),
        }
    }

    /// Disjoint, exhaustive handles over the three parameter groups.
    pub fn parameter_groups(&self) -> [(Group, Vec<&[T]>); 3] {
        Group::ALL.map(|g| (g, self.group(g)))
    }

    pub fn group_len(&self, g: Group) -> usize {
        self.group(g).iter().map(|s| s.len()).sum()
    }

    pub fn all_params(&self) -> Vec<&[T]> {
        Group::ALL.iter().flat_map(|&g| self.group(g)).collect()
    }

    pub fn num_params(&self) -> usize {
        self.all_params().iter().map(|s| s.len()).sum()
    }

    /// Little-endian bytes of one group, for equality checks.
    pub fn group_bytes(&self, g: Group) -> Vec<u8> {
        self.group(g)
            .iter()
            .flat_map(|s| s.iter().flat_map(|v| v.to_f64_exact().to_le_bytes()))
            .collect()
    }

    /// SHA-256 over every parameter, hex encoded.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for g in Group::ALL {
            h.update(self.group_bytes(g));
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// `self += scale * other`, group by group.
    pub fn axpy(&mut self, scale: T, other: &Self) {
        for g in Group::ALL {
            for (dst, src) in self.group_mut(g).into_iter().zip(other.group(g)) {
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += scale * s;
                }
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in Group::ALL {
            for dst in self.group_mut(g) {
                dst.iter_mut().for_each(|v| *v *= s);
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.all_params().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    /// Frame-1 detection in image space.
    pub fn detect_frame(&self, frame: &Tensor<T>) -> Result<crate::heatmap::Peaks<T>> {
        let feat = self.encoder.encode(frame)?;
        let heat = self.detector.detect(&feat)?;
        let mut peaks = crate::heatmap::heatmap_argmax(&heat);
        peaks.pair = crate::heatmap::heatmap_to_image(peaks.pair);
        Ok(peaks)
    }

    /// One tracking step between encoded frames; motion in image pixels.
    pub fn track_between(
        &self,
        feat_prev: &FeatureMap<T>,
        feat_cur: &FeatureMap<T>,
        prev: &LandmarkPair<T>,
    ) -> Motion2<T> {
        let pp = crop_patches(&self.config, feat_prev, feat_cur, prev);
        self.tracker.track_step(&pp).scale(T::from_usize(ENCODER_STRIDE).unwrap())
    }
}

/// Frame pixels (0..=255) to a `1×H×W` tensor in `[0, 1]`.
pub fn frame_tensor<T: Scalar>(pixels: &[u8], height: usize, width: usize) -> Tensor<T> {
    let scale = lit::<T>(1.0 / 255.0);
    Tensor {
        channels: 1,
        height,
        width,
        data: pixels.iter().map(|&p| T::from_u8(p).unwrap() * scale).collect(),
    }
}

/// Offset of an affinity-map cell from the no-motion cell, in feature cells.
pub fn affinity_offset(cfg: &NetworkConfig, flat: usize) -> Point2<i64> {
    let side = cfg.affinity_side() as i64;
    let mid = side / 2;
    Point2 { x: flat as i64 % side - mid, y: flat as i64 / side - mid }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny() -> NetworkConfig {
        NetworkConfig {
            encoder_channels: vec![3, 3, 4, 4, 4, 4],
            detector_channels: [4, 8],
            detector_convs_per_stage: 2,
            head_channels: 5,
            template_size: 5,
            search_size: 9,
            tracker_hidden: vec![6, 5],
            ..NetworkConfig::default()
        }
    }

    #[test]
    fn default_shapes() {
        let p = ModelParams::<f32>::new(NetworkConfig::default(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let frame = Tensor::from_vec(1, 64, 64, (0..4096).map(|_| rng.random_range(0.0..1.0f32)).collect()).unwrap();
        let feat = p.encoder.encode(&frame).unwrap();
        assert_eq!(feat.shape(), (32, 32, 32));
        let heat = p.detector.detect(&feat).unwrap();
        assert_eq!(heat.scores().shape(), (2, 32, 32));
        assert_eq!(p.detector.classifier.in_channels, 48);
        assert_eq!(p.encoder.convs.iter().filter(|c| c.stride == 2).count(), 1);
        assert_eq!(p.encoder.convs[2].stride, 2);
        assert_eq!(p.tracker.layers[0].inputs, 50);
        assert_eq!(p.tracker.layers.len(), 3);
        assert_eq!(p.tracker.layers[2].outputs, 4);
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_feature() {
        let p = ModelParams::<f64>::new(tiny(), 3).unwrap();
        let feat = p.encoder.encode(&Tensor::zeros(1, 16, 16)).unwrap();
        assert!(feat.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn odd_frame_and_feature_rejected() {
        let p = ModelParams::<f64>::new(tiny(), 3).unwrap();
        assert!(matches!(p.encoder.encode(&Tensor::zeros(1, 15, 16)), Err(Error::Shape(_))));
        assert!(matches!(p.detector.detect(&Tensor::zeros(4, 6, 8)), Err(Error::Shape(_))));
    }

    #[test]
    fn crop_border_padding() {
        let feat = Tensor::from_vec(1, 32, 32, (0..1024).map(|v| v as f64 + 1.0).collect()).unwrap();
        let t = crop(&feat, 0, 0, 25);
        // rows/cols 0..12 are padding, (12, 12) is feature (0, 0)
        assert!(t.plane(0)[..12 * 25].iter().all(|&v| v == 0.0));
        assert!((0..25).all(|r| t.at(0, r, 11) == 0.0));
        assert_eq!(t.at(0, 12, 12), 1.0);
        let s = crop(&feat, 0, 0, 29);
        assert!((0..29).all(|r| s.at(0, r, 13) == 0.0));
        assert_eq!(s.at(0, 14, 14), 1.0);
        let inner = crop(&feat, 16, 16, 25);
        assert!(inner.data.iter().all(|&v| v != 0.0));
        assert_eq!(inner.at(0, 0, 0), feat.at(0, 4, 4));
    }

    #[test]
    fn zero_tracker_gives_zero_motion() {
        let mut p = ModelParams::<f64>::new(tiny(), 3).unwrap();
        for s in p.group_mut(Group::Tracker) {
            s.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let feat = Tensor::from_vec(4, 16, 16, (0..1024).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let pair = LandmarkPair::new(Point2::new(10.0, 12.0), Point2::new(14.0, 4.0));
        let pp = crop_patches(&p.config, &feat, &feat, &pair);
        assert_eq!(pp.template.shape(), (8, 5, 5));
        assert_eq!(pp.search.shape(), (8, 9, 9));
        assert_eq!(p.tracker.track_step(&pp), Motion2::zero());
    }

    #[test]
    fn groups_are_disjoint_and_exhaustive() {
        let mut p = ModelParams::<f64>::new(tiny(), 1).unwrap();
        let total = p.num_params();
        let sum: usize = p.parameter_groups().iter().map(|(_, v)| v.iter().map(|s| s.len()).sum::<usize>()).sum();
        assert_eq!(total, sum);
        let enc = p.group_bytes(Group::Encoder);
        let det = p.group_bytes(Group::Detector);
        for s in p.group_mut(Group::Tracker) {
            s.iter_mut().for_each(|v| *v += 1.0);
        }
        assert_eq!(enc, p.group_bytes(Group::Encoder));
        assert_eq!(det, p.group_bytes(Group::Detector));
    }

    /// Whole detector backward checked against finite differences.
    #[test]
    fn detector_backward_matches_finite_differences() {
        let mut p = ModelParams::<f64>::new(tiny(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let feat = Tensor::from_vec(4, 8, 8, (0..256).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let r = Tensor::from_vec(2, 8, 8, (0..128).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let f = |p: &ModelParams<f64>, x: &Tensor<f64>| {
            let h = p.detector.detect(x).unwrap();
            h.scores().data.iter().zip(&r.data).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, cache) = p.detector.forward(&feat).unwrap();
        let mut g = p.zeros_like();
        let dfeat = p.detector.backward(&cache, &r, &mut g.detector);
        let h = 1e-6;
        for i in (0..feat.data.len()).step_by(7) {
            let (mut a, mut b) = (feat.clone(), feat.clone());
            a.data[i] += h;
            b.data[i] -= h;
            let fd = (f(&p, &a) - f(&p, &b)) / (2.0 * h);
            assert!((fd - dfeat.data[i]).abs() < 1e-6, "feat {i}: {fd} vs {}", dfeat.data[i]);
        }
        let grads: Vec<Vec<f64>> = g.group(Group::Detector).iter().map(|s| s.to_vec()).collect();
        for (t, gt) in grads.iter().enumerate() {
            for i in (0..gt.len()).step_by(11) {
                let w0 = p.group(Group::Detector)[t][i];
                p.group_mut(Group::Detector)[t][i] = w0 + h;
                let up = f(&p, &feat);
                p.group_mut(Group::Detector)[t][i] = w0 - h;
                let dn = f(&p, &feat);
                p.group_mut(Group::Detector)[t][i] = w0;
                let fd = (up - dn) / (2.0 * h);
                assert!((fd - gt[i]).abs() < 1e-6, "tensor {t} idx {i}: {fd} vs {}", gt[i]);
            }
        }
    }

    #[test]
    fn encoder_and_tracker_backward_match_finite_differences() {
        let mut p = ModelParams::<f64>::new(tiny(), 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f0 = Tensor::from_vec(1, 16, 16, (0..256).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let f1 = Tensor::from_vec(1, 16, 16, (0..256).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let pair = LandmarkPair::new(Point2::new(6.0, 9.0), Point2::new(11.0, 3.0));
        let w = [0.7, -1.1, 0.4, 0.9];
        let objective = |p: &ModelParams<f64>| {
            let a = p.encoder.encode(&f0).unwrap();
            let b = p.encoder.encode(&f1).unwrap();
            let m = p.tracker.track_step(&crop_patches(&p.config, &a, &b, &pair));
            m.to_array().iter().zip(&w).map(|(x, y)| x * y).sum::<f64>()
        };
        let (a, ca) = p.encoder.forward(&f0).unwrap();
        let (b, cb) = p.encoder.forward(&f1).unwrap();
        let pp = crop_patches(&p.config, &a, &b, &pair);
        let (_, tc) = p.tracker.forward(&pp);
        let mut g = p.zeros_like();
        let (dt, ds) = p.tracker.backward(&tc, Motion2::from_array(w), &mut g.tracker);
        let mut da = Tensor::zeros(a.channels, a.height, a.width);
        let mut db = Tensor::zeros(b.channels, b.height, b.width);
        crop_patches_backward(&pp, &dt, &ds, Some(&mut da), Some(&mut db));
        p.encoder.backward(&ca, &da, &mut g.encoder);
        p.encoder.backward(&cb, &db, &mut g.encoder);
        let h = 1e-6;
        for group in [Group::Encoder, Group::Tracker] {
            let grads: Vec<Vec<f64>> = g.group(group).iter().map(|s| s.to_vec()).collect();
            for (t, gt) in grads.iter().enumerate() {
                for i in (0..gt.len()).step_by(5) {
                    let w0 = p.group(group)[t][i];
                    p.group_mut(group)[t][i] = w0 + h;
                    let up = objective(&p);
                    p.group_mut(group)[t][i] = w0 - h;
                    let dn = objective(&p);
                    p.group_mut(group)[t][i] = w0;
                    let fd = (up - dn) / (2.0 * h);
                    let tol = 1e-5 * (1.0 + fd.abs());
                    assert!((fd - gt[i]).abs() < tol, "{group:?} tensor {t} idx {i}: {fd} vs {}", gt[i]);
                }
            }
        }
    }
}
