//! Adversarial training loop.
//!
//! Every mini-batch runs three phases:
//!
//! * **A**: minimize detection, motion and cycle losses over all groups;
//! * **B**: maximize the reciprocal loss over the encoder only;
//! * **C**: minimize all four losses over detector and tracker, repeated.
//!
//! Sequences are processed one at a time (no padding over variable `k`) and
//! their gradients averaged in a fixed order, so results do not depend on
//! the thread count.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{LandmarkPair, Motion2};
use crate::heatmap::image_to_heatmap;
use crate::losses::{
    cycle_loss, focal_loss_with_grad, motion_loss, pair_sq_distance_grad, printed_cycle_simplification,
    reciprocal_frames, reciprocal_loss_with_grad, FocalParams,
};
use crate::network::{crop_patches, crop_patches_backward, FeatureMap, Group, ModelParams, NetworkConfig, PatchPair};
use crate::scalar::{cast, lit, Scalar};
use crate::sequence::CineSequence;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub det: f64,
    pub motion: f64,
    pub cycle: f64,
    pub rec: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { det: 1.0, motion: 1.0, cycle: 1.0, rec: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainFlags {
    /// Use the reciprocal loss at all.
    pub enable_rec_loss: bool,
    /// Run phase B. When off, phase A also minimizes the reciprocal loss.
    pub enable_adversarial: bool,
    /// Supervise with frame 1 only.
    pub one_frame_mode: bool,
    /// Let reciprocal-loss gradients reach the tracker through a smooth
    /// relaxation of the pseudo-target position.
    pub rec_tracker_grad: bool,
}

impl Default for TrainFlags {
    fn default() -> Self {
        Self { enable_rec_loss: true, enable_adversarial: true, one_frame_mode: false, rec_tracker_grad: false }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_a: f64,
    pub lr_b: f64,
    pub lr_c: f64,
    pub step_c_repeats: usize,
    pub rec_rate: usize,
    pub loss_weights: LossWeights,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub flags: TrainFlags,
    pub focal: FocalParams<f64>,
    pub adam: AdamConfig,
    pub network: NetworkConfig,
    /// Abort when a phase's total loss exceeds this.
    pub divergence_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_a: 1e-3,
            lr_b: 1e-4,
            lr_c: 1e-3,
            step_c_repeats: 3,
            rec_rate: 3,
            loss_weights: LossWeights::default(),
            epochs: 30,
            batch_size: 4,
            seed: 0,
            flags: TrainFlags::default(),
            focal: FocalParams::default(),
            adam: AdamConfig::default(),
            network: NetworkConfig::default(),
            divergence_threshold: 1e6,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, lr) in [("lr_a", self.lr_a), ("lr_b", self.lr_b), ("lr_c", self.lr_c)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::config(field, format!("step size {lr} must be positive")));
            }
        }
        if self.step_c_repeats == 0 {
            return Err(Error::config("step_c_repeats", "must be at least 1"));
        }
        if self.rec_rate < 2 {
            return Err(Error::config("rec_rate", format!("{} is below 2", self.rec_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        let w = self.loss_weights;
        if [w.det, w.motion, w.cycle, w.rec].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::config("loss_weights", "weights must be finite and non-negative"));
        }
        let a = self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(Error::config("adam", "need 0 <= beta < 1 and eps > 0"));
        }
        if !(self.divergence_threshold > 0.0) {
            return Err(Error::config("divergence_threshold", "must be positive"));
        }
        self.focal.validate()?;
        self.network.validate()
    }

    /// Digest of every field that changes training results.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    A,
    B,
    C,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::A, Phase::B, Phase::C];

    pub fn name(self) -> &'static str {
        match self {
            Phase::A => "A",
            Phase::B => "B",
            Phase::C => "C",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Per-term losses of one evaluation, averaged over sequences. Terms that
/// were not part of the objective are `None`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub det: Option<f64>,
    pub motion: Option<f64>,
    pub cycle: Option<f64>,
    pub rec: Option<f64>,
    /// The closed form `-(motion + cycle)`, logged for comparison only.
    pub cycle_printed: Option<f64>,
    /// Weighted sum actually optimized (sign included).
    pub total: f64,
    pub rec_frames: usize,
    pub rec_skipped: usize,
}

impl LossParts {
    fn terms(&self) -> [(&'static str, Option<f64>); 5] {
        [
            ("det", self.det),
            ("motion", self.motion),
            ("cycle", self.cycle),
            ("rec", self.rec),
            ("total", Some(self.total)),
        ]
    }

    fn non_finite(&self) -> Option<String> {
        self.terms()
            .iter()
            .find(|(_, v)| v.is_some_and(|v| !v.is_finite()))
            .map(|(n, v)| format!("{n} = {}", v.unwrap()))
    }

    fn mean(parts: &[LossParts]) -> LossParts {
        let avg = |f: fn(&LossParts) -> Option<f64>| {
            let v: Vec<f64> = parts.iter().filter_map(f).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        LossParts {
            det: avg(|p| p.det),
            motion: avg(|p| p.motion),
            cycle: avg(|p| p.cycle),
            rec: avg(|p| p.rec),
            cycle_printed: avg(|p| p.cycle_printed),
            total: parts.iter().map(|p| p.total).sum::<f64>() / parts.len().max(1) as f64,
            rec_frames: parts.iter().map(|p| p.rec_frames).sum(),
            rec_skipped: parts.iter().map(|p| p.rec_skipped).sum(),
        }
    }
}

/// Which terms enter one objective evaluation and which groups need
/// gradients. A zero weight removes the term entirely.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveSpec {
    pub weights: LossWeights,
    /// Multiplies the reciprocal term; `-1` turns it into a maximization.
    pub rec_sign: f64,
    pub one_frame: bool,
    pub rec_rate: usize,
    pub focal: FocalParams<f64>,
    pub rec_tracker_grad: bool,
    /// Gradients wanted for `[encoder, detector, tracker]`.
    pub grads: [bool; 3],
}

impl ObjectiveSpec {
    fn wants(&self, g: Group) -> bool {
        self.grads[g as usize]
    }

    fn any_grad(&self) -> bool {
        self.grads.iter().any(|&g| g)
    }
}

struct DetTerm<T> {
    frame: usize,
    cache: crate::network::DetectorCache<T>,
    dscores: Tensor<T>,
}

/// Encodes every frame of `seq` (no caches).
pub fn encode_sequence<T: Scalar>(params: &ModelParams<T>, seq: &CineSequence) -> Result<Vec<FeatureMap<T>>> {
    (1..=seq.k()).map(|t| params.encoder.encode(&seq.frame_tensor(t))).collect()
}

/// Forward tracking from `start` at frame 1 over pre-encoded features;
/// positions in image pixels.
pub fn rollout<T: Scalar>(params: &ModelParams<T>, feats: &[FeatureMap<T>], start: LandmarkPair<T>) -> Vec<LandmarkPair<T>> {
    let mut pos = vec![start];
    for t in 1..feats.len() {
        let m = params.track_between(&feats[t - 1], &feats[t], &pos[t - 1]);
        pos.push(pos[t - 1].displaced(m));
    }
    pos
}

/// Evaluates the objective on one sequence. Returns the loss terms and,
/// when any group is requested, a gradient with the same layout as the
/// parameters (entries of unrequested groups are meaningless).
///
/// `cached` may hold the frame features when no encoder gradient is needed.
pub fn sequence_objective<T: Scalar>(
    params: &ModelParams<T>,
    seq: &CineSequence,
    spec: &ObjectiveSpec,
    cached: Option<&[FeatureMap<T>]>,
) -> Result<(LossParts, Option<ModelParams<T>>)> {
    let k = seq.k();
    let cfg = &params.config;
    let two = lit::<T>(2.0);
    let fp = FocalParams::<T> { alpha: cast(spec.focal.alpha), beta: cast(spec.focal.beta), radius: cast(spec.focal.radius) };
    let w = spec.weights;
    let want_enc = spec.wants(Group::Encoder);
    let backprop = spec.any_grad();

    let mut enc_caches = Vec::new();
    let owned;
    let feats: &[FeatureMap<T>] = match cached {
        Some(f) if !want_enc => f,
        _ => {
            let mut v = Vec::with_capacity(k);
            for t in 1..=k {
                if want_enc {
                    let (f, c) = params.encoder.forward(&seq.frame_tensor(t))?;
                    enc_caches.push(c);
                    v.push(f);
                } else {
                    v.push(params.encoder.encode(&seq.frame_tensor(t))?);
                }
            }
            owned = v;
            &owned
        }
    };
    if feats.len() != k {
        return Err(Error::Shape(format!("{} cached feature maps for {k} frames", feats.len())));
    }

    let truth_first: LandmarkPair<T> = seq.first.cast();
    let truth_last: LandmarkPair<T> = seq.last.cast();
    let use_motion = w.motion != 0.0 && !spec.one_frame;
    let use_cycle = w.cycle != 0.0;
    let rec_schedule = if w.rec != 0.0 && spec.rec_sign != 0.0 { reciprocal_frames(k, spec.rec_rate) } else { Vec::new() };
    let use_rec = !rec_schedule.is_empty();
    let need_track = use_motion || use_cycle || use_rec;
    let keep_track_cache = backprop && (use_motion || use_cycle || (use_rec && spec.rec_tracker_grad));

    // Forward rollout from the annotated frame 1.
    let mut pos = vec![truth_first];
    let mut fwd = Vec::new();
    if need_track {
        for t in 1..k {
            let pp = crop_patches(cfg, &feats[t - 1], &feats[t], &pos[t - 1]);
            let (m, cache) = params.tracker.forward(&pp);
            pos.push(pos[t - 1].displaced(m.scale(two)));
            if keep_track_cache {
                fwd.push((pp.centers, cache));
            }
        }
    }

    // Backward rollout from the forward end back to frame 1.
    let mut bwd = Vec::new();
    let mut back_end = LandmarkPair::default();
    if use_cycle {
        let mut cur = pos[k - 1];
        for from in (1..k).rev() {
            let pp = crop_patches(cfg, &feats[from], &feats[from - 1], &cur);
            let (m, cache) = params.tracker.forward(&pp);
            cur = cur.displaced(m.scale(two));
            if keep_track_cache {
                bwd.push((from, pp.centers, cache));
            }
        }
        back_end = cur;
    }

    let mut parts = LossParts::default();
    let mut total = T::zero();
    let mut grad = if backprop { Some(params.zeros_like()) } else { None };
    let mut dfeat: Vec<FeatureMap<T>> = Vec::new();
    if want_enc && backprop {
        dfeat = feats.iter().map(|f| Tensor::zeros(f.channels, f.height, f.width)).collect();
    }
    let mut touched = vec![false; k];

    // Position gradients in image pixels, per frame.
    let mut dpos = vec![[T::zero(); 4]; k];
    let add4 = |a: &mut [T; 4], b: [T; 4], s: T| {
        for i in 0..4 {
            a[i] += b[i] * s;
        }
    };

    if use_motion {
        let m = motion_loss(&pos[k - 1], &truth_last);
        parts.motion = Some(m.to_f64_exact());
        total += lit::<T>(w.motion) * m;
        add4(&mut dpos[k - 1], pair_sq_distance_grad(&pos[k - 1], &truth_last).to_array(), lit(w.motion));
    }
    let mut dcycle = [T::zero(); 4];
    if use_cycle {
        let c = cycle_loss(&back_end, &truth_first);
        parts.cycle = Some(c.to_f64_exact());
        total += lit::<T>(w.cycle) * c;
        add4(&mut dcycle, pair_sq_distance_grad(&back_end, &truth_first).to_array(), lit(w.cycle));
        // The backward rollout starts at the forward end.
        add4(&mut dpos[k - 1], dcycle, T::one());
        let motion_k = motion_loss(&pos[k - 1], &truth_last);
        parts.cycle_printed = Some(printed_cycle_simplification(motion_k, c).to_f64_exact());
    }

    // Detection on annotated frames.
    let mut det_terms: Vec<DetTerm<T>> = Vec::new();
    if w.det != 0.0 {
        let frames: &[(usize, LandmarkPair<T>)] =
            if spec.one_frame { &[(0, truth_first)][..] } else { &[(0, truth_first), (k - 1, truth_last)][..] };
        let n = T::from_usize(frames.len()).unwrap();
        let mut sum = T::zero();
        for &(i, truth) in frames {
            let (heat, cache) = params.detector.forward(&feats[i])?;
            let (l, mut dscores) = focal_loss_with_grad(&heat, &image_to_heatmap(truth), &fp)?;
            sum += l;
            if backprop {
                let s = lit::<T>(w.det) / n;
                dscores.data.iter_mut().for_each(|v| *v *= s);
                det_terms.push(DetTerm { frame: i, cache, dscores });
            }
        }
        let det = sum / n;
        parts.det = Some(det.to_f64_exact());
        total += lit::<T>(w.det) * det;
    }

    // Reciprocal loss on the unannotated schedule.
    if use_rec {
        let mut evaluated = Vec::new();
        for &t in &rec_schedule {
            let i = t - 1;
            let (heat, cache) = params.detector.forward(&feats[i])?;
            match reciprocal_loss_with_grad(&heat, &image_to_heatmap(pos[i]), &fp)? {
                Some(term) => evaluated.push((i, cache, term)),
                None => parts.rec_skipped += 1,
            }
        }
        parts.rec_frames = evaluated.len();
        if !evaluated.is_empty() {
            let n = T::from_usize(evaluated.len()).unwrap();
            let rec = evaluated.iter().map(|(_, _, t)| t.loss).sum::<T>() / n;
            parts.rec = Some(rec.to_f64_exact());
            let coeff = lit::<T>(w.rec * spec.rec_sign);
            total += coeff * rec;
            if backprop {
                let s = coeff / n;
                for (i, cache, term) in evaluated {
                    if spec.rec_tracker_grad {
                        // Heatmap coordinates are image coordinates halved.
                        add4(&mut dpos[i], term.dcenters.to_array(), s / two);
                    }
                    let mut dscores = term.dscores;
                    dscores.data.iter_mut().for_each(|v| *v *= s);
                    det_terms.push(DetTerm { frame: i, cache, dscores });
                }
            }
        }
    }
    parts.total = total.to_f64_exact();

    let Some(mut grad) = grad.take() else {
        return Ok((parts, None));
    };

    for term in &det_terms {
        let df = params.detector.backward(&term.cache, &term.dscores, &mut grad.detector);
        if want_enc {
            dfeat[term.frame].add_assign(&df);
            touched[term.frame] = true;
        }
    }

    if keep_track_cache {
        // Forward step `t` moved frame t-1 to frame t; it affects every later
        // position, so its gradient is the suffix sum of position gradients.
        let mut acc = [T::zero(); 4];
        let mut step_grads = vec![[T::zero(); 4]; k];
        for t in (1..k).rev() {
            add4(&mut acc, dpos[t], T::one());
            step_grads[t] = acc;
        }
        for (j, (centers, cache)) in fwd.iter().enumerate() {
            let t = j + 1;
            let g = step_grads[t];
            if g.iter().all(|v| *v == T::zero()) {
                continue;
            }
            let dm = Motion2::from_array(g).scale(two);
            let (dt, ds) = params.tracker.backward(cache, dm, &mut grad.tracker);
            if want_enc {
                scatter_patches(*centers, &dt, &ds, &mut dfeat, &mut touched, t - 1, t);
            }
        }
        for (from, centers, cache) in &bwd {
            let dm = Motion2::from_array(dcycle).scale(two);
            let (dt, ds) = params.tracker.backward(cache, dm, &mut grad.tracker);
            if want_enc {
                scatter_patches(*centers, &dt, &ds, &mut dfeat, &mut touched, *from, from - 1);
            }
        }
    }

    if want_enc {
        for (i, d) in dfeat.iter().enumerate() {
            if touched[i] {
                params.encoder.backward(&enc_caches[i], d, &mut grad.encoder);
            }
        }
    }
    Ok((parts, Some(grad)))
}

fn scatter_patches<T: Scalar>(
    centers: [(i64, i64); 2],
    dt: &Tensor<T>,
    ds: &Tensor<T>,
    dfeat: &mut [FeatureMap<T>],
    touched: &mut [bool],
    prev: usize,
    cur: usize,
) {
    let pp = PatchPair { template: Tensor::zeros(0, 0, 0), search: Tensor::zeros(0, 0, 0), centers };
    let (p, c) = if prev < cur {
        let (lo, hi) = dfeat.split_at_mut(cur);
        (&mut lo[prev], &mut hi[0])
    } else {
        let (lo, hi) = dfeat.split_at_mut(prev);
        (&mut hi[0], &mut lo[cur])
    };
    crop_patches_backward(&pp, dt, ds, Some(p), Some(c));
    touched[prev] = true;
    touched[cur] = true;
}

/// Adaptive-moment optimizer state for one phase.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub m: ModelParams<T>,
    pub v: ModelParams<T>,
    pub steps: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(like: &ModelParams<T>) -> Self {
        Self { m: like.zeros_like(), v: like.zeros_like(), steps: 0 }
    }

    /// One update of the listed groups; other groups are not touched.
    pub fn update(&mut self, params: &mut ModelParams<T>, grad: &ModelParams<T>, groups: &[Group], lr: f64, hp: &AdamConfig) {
        self.steps += 1;
        let t = self.steps as i32;
        let step = lr * (1.0 - hp.beta2.powi(t)).sqrt() / (1.0 - hp.beta1.powi(t));
        let (b1, b2, eps, step) = (lit::<T>(hp.beta1), lit::<T>(hp.beta2), lit::<T>(hp.eps), lit::<T>(step));
        let one = T::one();
        for &g in groups {
            let slices = params.group_mut(g).into_iter().zip(grad.group(g)).zip(self.m.group_mut(g)).zip(self.v.group_mut(g));
            for (((p, gr), m), v) in slices {
                for i in 0..p.len() {
                    m[i] = b1 * m[i] + (one - b1) * gr[i];
                    v[i] = b2 * v[i] + (one - b2) * gr[i] * gr[i];
                    p[i] -= step * m[i] / (v[i].sqrt() + eps);
                }
            }
        }
    }
}

/// Mean losses of one epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub a: LossParts,
    pub b: Option<LossParts>,
    pub c: LossParts,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    /// Phase-B updates skipped for lack of evaluable unannotated frames.
    pub step_b_skipped: usize,
    /// Reciprocal frames skipped because the tracked position left the map.
    pub rec_frames_skipped: usize,
}

#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub params: ModelParams<T>,
    /// Completed epochs.
    pub epoch: usize,
    /// Batches completed within the current epoch.
    pub batch: usize,
    pub history: Vec<EpochRecord>,
    /// One optimizer per phase, indexed by [`Phase`].
    pub adam: [Adam<T>; 3],
    pub rng: ChaCha8Rng,
    pub counters: Counters,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let params = ModelParams::new(cfg.network.clone(), cfg.seed)?;
        let adam = [Adam::new(&params), Adam::new(&params), Adam::new(&params)];
        Ok(Self {
            params,
            epoch: 0,
            batch: 0,
            history: Vec::new(),
            adam,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x0DA7_A0DE)),
            counters: Counters::default(),
        })
    }

    pub fn adam(&self, phase: Phase) -> &Adam<T> {
        &self.adam[phase.index()]
    }
}

fn spec_for(cfg: &TrainConfig, phase: Phase) -> ObjectiveSpec {
    let f = cfg.flags;
    let mut weights = cfg.loss_weights;
    let mut rec_sign = 1.0;
    let grads = match phase {
        Phase::A => {
            if !(f.enable_rec_loss && !f.enable_adversarial) {
                weights.rec = 0.0;
            }
            [true, true, true]
        }
        Phase::B => {
            weights = LossWeights { det: 0.0, motion: 0.0, cycle: 0.0, rec: weights.rec };
            rec_sign = -1.0;
            [true, false, false]
        }
        Phase::C => {
            if !f.enable_rec_loss {
                weights.rec = 0.0;
            }
            [false, true, true]
        }
    };
    ObjectiveSpec {
        weights,
        rec_sign,
        one_frame: f.one_frame_mode,
        rec_rate: cfg.rec_rate,
        focal: cfg.focal,
        rec_tracker_grad: f.rec_tracker_grad,
        grads,
    }
}

/// Mean loss and gradient over a batch, reduced in batch order. Sequences
/// where the objective has no terms (phase B without reciprocal frames) do
/// not count towards the mean.
fn batch_gradient<T: Scalar>(
    params: &ModelParams<T>,
    batch: &[&CineSequence],
    spec: &ObjectiveSpec,
    cached: Option<&[Vec<FeatureMap<T>>]>,
) -> Result<(LossParts, Option<ModelParams<T>>)> {
    let results: Vec<Result<(LossParts, Option<ModelParams<T>>)>> = (0..batch.len())
        .into_par_iter()
        .map(|i| sequence_objective(params, batch[i], spec, cached.map(|c| c[i].as_slice())))
        .collect();
    let mut parts = Vec::with_capacity(batch.len());
    let mut sum: Option<ModelParams<T>> = None;
    let mut n = 0usize;
    let rec_only = spec.weights.det == 0.0 && spec.weights.motion == 0.0 && spec.weights.cycle == 0.0;
    for r in results {
        let (p, g) = r?;
        let counts = !rec_only || p.rec_frames > 0;
        parts.push(p);
        if !counts {
            continue;
        }
        n += 1;
        if let Some(g) = g {
            match &mut sum {
                Some(s) => s.axpy(T::one(), &g),
                None => sum = Some(g),
            }
        }
    }
    let contributing: Vec<LossParts> =
        parts.iter().copied().filter(|p| !rec_only || p.rec_frames > 0).collect();
    let mut mean = LossParts::mean(&contributing);
    mean.rec_skipped = parts.iter().map(|p| p.rec_skipped).sum();
    if let Some(s) = &mut sum {
        s.scale(T::one() / T::from_usize(n).unwrap());
    }
    Ok((mean, if n == 0 { None } else { sum }))
}

fn check_finite<T>(state: &TrainState<T>, phase: Phase, parts: &LossParts, threshold: f64) -> Result<()> {
    if let Some(detail) = parts.non_finite() {
        return Err(Error::NonFinite { phase: phase.name(), epoch: state.epoch, batch: state.batch, detail });
    }
    if parts.total.abs() > threshold {
        return Err(Error::Diverged { phase: phase.name(), epoch: state.epoch, batch: state.batch, loss: parts.total });
    }
    Ok(())
}

fn check_grad<T: Scalar>(state: &TrainState<T>, phase: Phase, grad: &ModelParams<T>) -> Result<()> {
    if !grad.is_finite() {
        return Err(Error::NonFinite {
            phase: phase.name(),
            epoch: state.epoch,
            batch: state.batch,
            detail: "gradient has non-finite entries".into(),
        });
    }
    Ok(())
}

/// Phase A: one descent step on every group against the annotated-frame losses.
pub fn step_a<T: Scalar>(state: &mut TrainState<T>, cfg: &TrainConfig, batch: &[&CineSequence]) -> Result<LossParts> {
    let spec = spec_for(cfg, Phase::A);
    let (parts, grad) = batch_gradient(&state.params, batch, &spec, None)?;
    check_finite(state, Phase::A, &parts, cfg.divergence_threshold)?;
    if let Some(grad) = grad {
        check_grad(state, Phase::A, &grad)?;
        state.adam[Phase::A.index()].update(&mut state.params, &grad, &Group::ALL, cfg.lr_a, &cfg.adam);
    }
    state.counters.rec_frames_skipped += parts.rec_skipped;
    Ok(parts)
}

/// Phase B: one ascent step of the reciprocal loss on the encoder only.
/// Returns `None` when the phase is disabled or had nothing to evaluate.
pub fn step_b<T: Scalar>(state: &mut TrainState<T>, cfg: &TrainConfig, batch: &[&CineSequence]) -> Result<Option<LossParts>> {
    if !(cfg.flags.enable_adversarial && cfg.flags.enable_rec_loss) {
        return Ok(None);
    }
    let spec = spec_for(cfg, Phase::B);
    let (parts, grad) = batch_gradient(&state.params, batch, &spec, None)?;
    state.counters.rec_frames_skipped += parts.rec_skipped;
    let Some(grad) = grad else {
        state.counters.step_b_skipped += 1;
        return Ok(None);
    };
    check_finite(state, Phase::B, &parts, cfg.divergence_threshold)?;
    check_grad(state, Phase::B, &grad)?;
    state.adam[Phase::B.index()].update(&mut state.params, &grad, &[Group::Encoder], cfg.lr_b, &cfg.adam);
    Ok(Some(parts))
}

/// Phase C: `step_c_repeats` descent steps on detector and tracker against
/// all losses. Frame features are computed once since the encoder is frozen.
pub fn step_c<T: Scalar>(state: &mut TrainState<T>, cfg: &TrainConfig, batch: &[&CineSequence]) -> Result<Vec<LossParts>> {
    let spec = spec_for(cfg, Phase::C);
    let feats: Vec<Vec<FeatureMap<T>>> = batch
        .par_iter()
        .map(|s| encode_sequence(&state.params, s))
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(cfg.step_c_repeats);
    for _ in 0..cfg.step_c_repeats {
        let (parts, grad) = batch_gradient(&state.params, batch, &spec, Some(&feats))?;
        check_finite(state, Phase::C, &parts, cfg.divergence_threshold)?;
        if let Some(grad) = grad {
            check_grad(state, Phase::C, &grad)?;
            state.adam[Phase::C.index()].update(
                &mut state.params,
                &grad,
                &[Group::Detector, Group::Tracker],
                cfg.lr_c,
                &cfg.adam,
            );
        }
        state.counters.rec_frames_skipped += parts.rec_skipped;
        out.push(parts);
    }
    Ok(out)
}

/// One line of the JSON-lines training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub step: usize,
    pub phase: Phase,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repeat: Option<usize>,
    #[serde(flatten)]
    pub losses: LossParts,
    pub wall_time_s: f64,
}

/// Where training writes its artifacts. Everything is optional.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    pub log_path: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    /// Print one line per epoch to stderr.
    pub progress: bool,
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:03}.ckpt")
}

fn validate_data(data: &[CineSequence]) -> Result<()> {
    let first = data.first().ok_or(Error::Empty("training set"))?;
    for s in data {
        s.validate()?;
        if (s.height, s.width) != (first.height, first.width) {
            return Err(Error::Shape(format!(
                "sequence {} is {}x{}, expected {}x{}",
                s.id, s.height, s.width, first.height, first.width
            )));
        }
    }
    Ok(())
}

/// Trains from scratch for `cfg.epochs` epochs.
pub fn train<T: Scalar>(data: &[CineSequence], cfg: &TrainConfig, out: &TrainOutputs) -> Result<TrainState<T>> {
    let state = TrainState::new(cfg)?;
    resume(data, cfg, state, out)
}

/// Continues training from `state` until `cfg.epochs` epochs are complete.
pub fn resume<T: Scalar>(
    data: &[CineSequence],
    cfg: &TrainConfig,
    mut state: TrainState<T>,
    out: &TrainOutputs,
) -> Result<TrainState<T>> {
    cfg.validate()?;
    validate_data(data)?;
    if let Some(dir) = &out.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut log = match &out.log_path {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            Some((OpenOptions::new().create(true).append(true).open(p).map_err(|e| Error::io(p, e))?, p.clone()))
        }
        None => None,
    };
    let started = Instant::now();
    let mut emit = |rec: LogRecord| -> Result<()> {
        if let Some((f, p)) = &mut log {
            let mut line = serde_json::to_vec(&rec).expect("log record serializes");
            line.push(b'\n');
            f.write_all(&line).map_err(|e| Error::io(p.as_path(), e))?;
        }
        Ok(())
    };

    while state.epoch < cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut state.rng);
        state.batch = 0;
        let (mut ea, mut eb, mut ec) = (Vec::new(), Vec::new(), Vec::new());
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&CineSequence> = chunk.iter().map(|&i| &data[i]).collect();
            let result = run_batch(&mut state, cfg, &batch);
            let (a, b, c) = match result {
                Ok(v) => v,
                Err(e) => {
                    dump_failure(&state, cfg, &batch, &e, out);
                    return Err(e);
                }
            };
            let wall = started.elapsed().as_secs_f64();
            let (epoch, step) = (state.epoch, state.batch);
            emit(LogRecord { epoch, step, phase: Phase::A, repeat: None, losses: a, wall_time_s: wall })?;
            if let Some(b) = b {
                emit(LogRecord { epoch, step, phase: Phase::B, repeat: None, losses: b, wall_time_s: wall })?;
                eb.push(b);
            }
            for (r, c) in c.iter().enumerate() {
                emit(LogRecord { epoch, step, phase: Phase::C, repeat: Some(r), losses: *c, wall_time_s: wall })?;
            }
            ea.push(a);
            ec.push(*c.last().expect("at least one repeat"));
            state.batch += 1;
        }
        let record = EpochRecord {
            epoch: state.epoch,
            a: LossParts::mean(&ea),
            b: (!eb.is_empty()).then(|| LossParts::mean(&eb)),
            c: LossParts::mean(&ec),
        };
        if out.progress {
            eprintln!(
                "epoch {:>3}  A {:>10.3}  B {:>10}  C {:>10.3}  ({:.0}s)",
                state.epoch + 1,
                record.a.total,
                record.b.map(|b| format!("{:.3}", b.rec.unwrap_or(0.0))).unwrap_or_else(|| "-".into()),
                record.c.total,
                started.elapsed().as_secs_f64()
            );
        }
        state.history.push(record);
        state.epoch += 1;
        state.batch = 0;
        if let Some(dir) = &out.checkpoint_dir {
            crate::checkpoint::save(&dir.join(checkpoint_name(state.epoch)), &state, cfg)?;
        }
    }
    Ok(state)
}

type BatchLosses = (LossParts, Option<LossParts>, Vec<LossParts>);

fn run_batch<T: Scalar>(state: &mut TrainState<T>, cfg: &TrainConfig, batch: &[&CineSequence]) -> Result<BatchLosses> {
    let a = step_a(state, cfg, batch)?;
    let b = step_b(state, cfg, batch)?;
    let c = step_c(state, cfg, batch)?;
    Ok((a, b, c))
}

#[derive(Serialize)]
struct FailureDump<'a> {
    error: String,
    epoch: usize,
    batch: usize,
    sequences: Vec<&'a str>,
    counters: Counters,
    history: &'a [EpochRecord],
}

/// Best effort: the original error is what the caller sees.
fn dump_failure<T: Scalar>(state: &TrainState<T>, cfg: &TrainConfig, batch: &[&CineSequence], err: &Error, out: &TrainOutputs) {
    let Some(dir) = &out.checkpoint_dir else { return };
    let dump = FailureDump {
        error: err.to_string(),
        epoch: state.epoch,
        batch: state.batch,
        sequences: batch.iter().map(|s| s.id.as_str()).collect(),
        counters: state.counters,
        history: &state.history,
    };
    let _ = crate::fsutil::write_json(&dir.join("failure.json"), &dump);
    let _ = crate::checkpoint::save(&dir.join("failure.ckpt"), state, cfg);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_sequence, PhantomConfig};
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

    fn tiny_cfg() -> TrainConfig {
        TrainConfig { network: tiny(), batch_size: 2, epochs: 1, ..TrainConfig::default() }
    }

    fn seqs(n: u64) -> Vec<CineSequence> {
        let cfg = PhantomConfig { k_range: (7, 9), seed: 3, ..Default::default() };
        (0..n).map(|i| generate_sequence(&cfg, i).unwrap()).collect()
    }

    fn flat_get(p: &ModelParams<f64>, g: Group, i: usize) -> f64 {
        let mut i = i;
        for s in p.group(g) {
            if i < s.len() {
                return s[i];
            }
            i -= s.len();
        }
        unreachable!()
    }

    fn flat_set(p: &mut ModelParams<f64>, g: Group, i: usize, v: f64) {
        let mut i = i;
        for s in p.group_mut(g) {
            if i < s.len() {
                s[i] = v;
                return;
            }
            i -= s.len();
        }
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let seq = &seqs(1)[0];
        let mut params = ModelParams::<f64>::new(tiny(), 5).unwrap();
        // Non-zero biases so ReLUs are not all sitting on their kinks.
        for g in Group::ALL {
            for s in params.group_mut(g) {
                for v in s.iter_mut() {
                    *v += 1e-3;
                }
            }
        }
        let spec = ObjectiveSpec {
            weights: LossWeights::default(),
            rec_sign: 1.0,
            one_frame: false,
            rec_rate: 3,
            focal: FocalParams::default(),
            rec_tracker_grad: false,
            grads: [true, true, true],
        };
        let (parts, grad) = sequence_objective(&params, seq, &spec, None).unwrap();
        assert!(parts.rec_frames > 0);
        let grad = grad.unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = 1e-6;
        for g in Group::ALL {
            let n = params.group_len(g);
            let mut worst = 0.0f64;
            for _ in 0..12 {
                let i = rng.random_range(0..n);
                let x = flat_get(&params, g, i);
                flat_set(&mut params, g, i, x + h);
                let up = sequence_objective(&params, seq, &ObjectiveSpec { grads: [false; 3], ..spec }, None).unwrap().0.total;
                flat_set(&mut params, g, i, x - h);
                let dn = sequence_objective(&params, seq, &ObjectiveSpec { grads: [false; 3], ..spec }, None).unwrap().0.total;
                flat_set(&mut params, g, i, x);
                let fd = (up - dn) / (2.0 * h);
                let an = flat_get(&grad, g, i);
                let err = (fd - an).abs() / (fd.abs() + an.abs()).max(1e-3);
                worst = worst.max(err);
            }
            assert!(worst < 1e-4, "{g:?}: relative error {worst}");
        }
    }

    #[test]
    fn phase_b_and_c_freeze_groups() {
        let data = seqs(2);
        let batch: Vec<&CineSequence> = data.iter().collect();
        let cfg = tiny_cfg();
        let mut state = TrainState::<f32>::new(&cfg).unwrap();
        step_a(&mut state, &cfg, &batch).unwrap();
        let before = state.params.clone();
        step_b(&mut state, &cfg, &batch).unwrap().expect("phase B ran");
        assert_ne!(before.group_bytes(Group::Encoder), state.params.group_bytes(Group::Encoder));
        assert_eq!(before.group_bytes(Group::Detector), state.params.group_bytes(Group::Detector));
        assert_eq!(before.group_bytes(Group::Tracker), state.params.group_bytes(Group::Tracker));
        let before = state.params.clone();
        let c = step_c(&mut state, &cfg, &batch).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(state.adam(Phase::C).steps, 3);
        assert_eq!(before.group_bytes(Group::Encoder), state.params.group_bytes(Group::Encoder));
        assert_ne!(before.group_bytes(Group::Detector), state.params.group_bytes(Group::Detector));
    }

    #[test]
    fn zero_step_size_leaves_parameters() {
        let data = seqs(1);
        let cfg = TrainConfig { lr_a: 0.0, ..tiny_cfg() };
        let mut state = TrainState::<f32>::new(&tiny_cfg()).unwrap();
        let before = state.params.fingerprint();
        let parts = step_a(&mut state, &cfg, &[&data[0]]).unwrap();
        assert!(parts.det.is_some() && parts.motion.is_some() && parts.cycle.is_some());
        assert!(parts.rec.is_none());
        assert_eq!(state.params.fingerprint(), before);
    }

    #[test]
    fn ablation_switches() {
        let data = seqs(1);
        let batch = [&data[0]];
        let cfg = TrainConfig { flags: TrainFlags { enable_adversarial: false, ..Default::default() }, ..tiny_cfg() };
        let mut state = TrainState::<f32>::new(&cfg).unwrap();
        let fp = state.params.fingerprint();
        assert!(step_b(&mut state, &cfg, &batch).unwrap().is_none());
        assert_eq!(state.params.fingerprint(), fp);
        let cfg = TrainConfig { flags: TrainFlags { enable_rec_loss: false, ..Default::default() }, ..tiny_cfg() };
        let c = step_c(&mut state, &cfg, &batch).unwrap();
        assert!(c.iter().all(|p| p.rec.is_none() && p.det.is_some() && p.motion.is_some() && p.cycle.is_some()));
        let cfg = TrainConfig { flags: TrainFlags { one_frame_mode: true, ..Default::default() }, ..tiny_cfg() };
        let c = step_c(&mut state, &cfg, &batch).unwrap();
        assert!(c.iter().all(|p| p.motion.is_none() && p.cycle.is_some() && p.rec.is_some()));
    }

    #[test]
    fn training_is_deterministic() {
        let data = seqs(3);
        let cfg = TrainConfig { epochs: 2, ..tiny_cfg() };
        let a = train::<f32>(&data, &cfg, &TrainOutputs::default()).unwrap();
        let b = train::<f32>(&data, &cfg, &TrainOutputs::default()).unwrap();
        assert_eq!(a.params.fingerprint(), b.params.fingerprint());
        assert_eq!(a.history, b.history);
        assert_eq!(crate::checkpoint::state_digest(&a, &cfg), crate::checkpoint::state_digest(&b, &cfg));
    }

    #[test]
    fn checkpoint_round_trip_and_resume() {
        let dir = tempfile::tempdir().unwrap();
        let data = seqs(2);
        let cfg = TrainConfig { epochs: 2, ..tiny_cfg() };
        let out = TrainOutputs { checkpoint_dir: Some(dir.path().to_path_buf()), ..Default::default() };
        let full = train::<f32>(&data, &cfg, &out).unwrap();
        let (mid, header) = crate::checkpoint::load_state::<f32>(&dir.path().join(checkpoint_name(1))).unwrap();
        assert_eq!(header.epoch, 1);
        let resumed = resume(&data, &cfg, mid, &TrainOutputs::default()).unwrap();
        assert_eq!(resumed.params.fingerprint(), full.params.fingerprint());
        let (last, _) = crate::checkpoint::load_state::<f32>(&dir.path().join(checkpoint_name(2))).unwrap();
        assert_eq!(crate::checkpoint::state_digest(&last, &cfg), crate::checkpoint::state_digest(&full, &cfg));
    }
}
