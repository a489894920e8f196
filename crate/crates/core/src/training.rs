//! Supervised training: loss, backward pass through the whole network,
//! Adam with cosine warm restarts, and the crop-sampling loop.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::bgnet::{correct_low_freq_backward, grid_to_fused};
use crate::error::{Error, Result};
use crate::gradcheck::{self, GradCheckOptions, TensorCheck};
use crate::model::{ModelConfig, ModelParams, Network, Trace, TraceKind, Variant};
use crate::params::Params;
use crate::pyramid::{
    decompose_learnable_backward, reconstruct_fixed_backward, reconstruct_learnable_backward,
};
use crate::tensor::{relu_backward, resize_bilinear, resize_bilinear_backward, Tensor};
use crate::weights::{read_header, read_records, write_header, write_records, Reader};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    /// Cosine cycle length in epochs.
    pub restart_period: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    /// Side of the square training crops.
    pub crop: usize,
    pub crops_per_image: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_max: 1e-3,
            lr_min: 1e-7,
            restart_period: 5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 8,
            crop: 512,
            crops_per_image: 30,
            epochs: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr_min < self.lr_max) || self.lr_min < 0.0 {
            return bad("need 0 <= lr_min < lr_max");
        }
        if self.restart_period == 0 {
            return bad("restart period must be at least one epoch");
        }
        if self.batch_size == 0 || self.crop == 0 || self.crops_per_image == 0 {
            return bad("batch size, crop and crops per image must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        Ok(())
    }

    /// Optimizer steps in one epoch over `images` training images.
    pub fn steps_per_epoch(&self, images: usize) -> usize {
        (images * self.crops_per_image).div_ceil(self.batch_size)
    }
}

/// An input image and its well-exposed target.
#[derive(Clone, Debug)]
pub struct SamplePair {
    pub name: String,
    pub input: Tensor,
    pub target: Tensor,
}

impl SamplePair {
    pub fn new(name: impl Into<String>, input: Tensor, target: Tensor) -> Result<Self> {
        if input.shape() != target.shape() {
            return Err(Error::Dimension(format!(
                "pair dims differ: {:?} vs {:?}",
                input.shape(),
                target.shape()
            )));
        }
        Ok(Self {
            name: name.into(),
            input,
            target,
        })
    }
}

/// Mean squared error and its gradient `2(O − T)/N`.
pub fn mse_loss(o: &Tensor, t: &Tensor) -> Result<(f64, Tensor)> {
    if o.shape() != t.shape() {
        return Err(Error::Dimension(format!(
            "loss operands differ: {:?} vs {:?}",
            o.shape(),
            t.shape()
        )));
    }
    let n = o.data().len() as f64;
    let sum: f64 = o
        .data()
        .iter()
        .zip(t.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    let loss = sum / n;
    let scale = (2.0 / n) as f32;
    Ok((loss, o.zip_map(t, |a, b| scale * (a - b))?))
}

/// Learning rate at `global_step` under cosine annealing with warm restarts
/// every `restart_period` epochs.
pub fn cosine_lr(global_step: usize, steps_per_epoch: usize, cfg: &TrainConfig) -> f64 {
    let period = (cfg.restart_period * steps_per_epoch.max(1)) as f64;
    let p = (global_step as f64 % period) / period;
    cosine_at(p, cfg)
}

/// Learning rate at cycle fraction `p ∈ [0, 1]`.
pub fn cosine_at(p: f64, cfg: &TrainConfig) -> f64 {
    cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + (PI * p).cos())
}

/// First and second moments for every parameter, plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub t: u64,
}

pub const ADAM_MAGIC: &[u8; 6] = b"MSLTA\0";

impl AdamState {
    pub fn new(like: &ModelParams) -> Self {
        Self {
            m: like.zeros_like(),
            v: like.zeros_like(),
            t: 0,
        }
    }

    /// Sidecar layout: the weight-file header, the step counter as u64, then
    /// `m.*` and `v.*` records.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        write_header(&mut buf, ADAM_MAGIC, self.m.variant, &self.m.config);
        buf.extend_from_slice(&self.t.to_le_bytes());
        write_records(&mut buf, &[("m.", self.m.tensors()), ("v.", self.v.tensors())]);
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let (variant, config) = read_header(&mut r, ADAM_MAGIC)?;
        let t = r.u64()?;
        let mut m = ModelParams::zeros(variant, config)?;
        let mut v = m.clone();
        read_records(&mut r, &mut [("m.", &mut m), ("v.", &mut v)])?;
        r.finish()?;
        Ok(Self { m, v, t })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes())
            .map_err(|e| Error::io(format!("writing optimizer state `{}`", path.display()), e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path)
            .map_err(|e| Error::io(format!("reading optimizer state `{}`", path.display()), e))?;
        Self::from_bytes(&bytes)
    }
}

fn check_layout(a: &ModelParams, b: &ModelParams) -> Result<()> {
    if a.variant != b.variant {
        return Err(Error::VariantMismatch {
            expected: a.variant,
            found: b.variant,
        });
    }
    for (x, y) in a.tensors().iter().zip(b.tensors()) {
        if x.name != y.name || x.dims != y.dims {
            return Err(Error::ShapeMismatch {
                name: y.name,
                expected: x.dims.clone(),
                found: y.dims,
            });
        }
    }
    if a.tensors().len() != b.tensors().len() {
        return Err(Error::Dimension("parameter sets differ in length".into()));
    }
    Ok(())
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    check_layout(params, grads)?;
    check_layout(params, &state.m)?;
    check_layout(params, &state.v)?;
    state.t += 1;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    let g = grads.tensors();
    let mut ms = state.m.tensors_mut();
    let mut vs = state.v.tensors_mut();
    for (((p, g), m), v) in params.tensors_mut().iter_mut().zip(&g).zip(&mut ms).zip(&mut vs) {
        for i in 0..p.data.len() {
            let gi = g.data[i] as f64;
            let mi = b1 * m.data[i] as f64 + (1.0 - b1) * gi;
            let vi = b2 * v.data[i] as f64 + (1.0 - b2) * gi * gi;
            m.data[i] = mi as f32;
            v.data[i] = vi as f32;
            let step = lr * (mi / c1) / ((vi / c2).sqrt() + cfg.eps);
            p.data[i] = (p.data[i] as f64 - step) as f32;
        }
    }
    Ok(())
}

/// Gradients of every named tensor given `dout`, the loss gradient w.r.t.
/// the clamped output of the forward call that produced `trace`.
pub fn backward(mp: &ModelParams, trace: &Trace, dout: &Tensor) -> Result<ModelParams> {
    if trace.fingerprint != mp.fingerprint() {
        return Err(Error::Contract(
            "trace was produced with different parameters".into(),
        ));
    }
    if dout.shape() != trace.raw.shape() {
        return Err(Error::Dimension(format!(
            "output gradient {:?} does not match output {:?}",
            dout.shape(),
            trace.raw.shape()
        )));
    }
    // The clamp passes gradient wherever the raw output lies in [0, 1].
    let draw = trace
        .raw
        .zip_map(dout, |r, d| if (0.0..=1.0).contains(&r) { d } else { 0.0 })?;
    let mut grad = mp.zeros_like();
    match (&mp.net, &mut grad.net, &trace.kind) {
        (Network::ChannelMlp(p), Network::ChannelMlp(g), TraceKind::ChannelMlp(t)) => {
            let mut d = draw;
            for (l, (input, pre)) in t.layers.iter().enumerate().rev() {
                let dpre = relu_backward(pre, &d)?;
                d = p.layers[l].backward(input, &dpre, &mut g.layers[l])?;
            }
        }
        (Network::Mslt(m), Network::Mslt(g), TraceKind::Mslt(t)) => {
            let n = mp.config.levels;
            let (dbars, mut dlow_bar) = match &m.pyramid {
                None => reconstruct_fixed_backward(&t.corrected, &draw)?,
                Some(pp) => reconstruct_learnable_backward(
                    &t.corrected,
                    t.reconstruct.as_ref().expect("traced reconstruction"),
                    pp,
                    &draw,
                    g.pyramid.as_mut().expect("pyramid gradient slot"),
                )?,
            };
            let low = &t.pyramid.low;
            let first = n - 2;
            let mut dhighs = Vec::with_capacity(n - 1);
            let mut dlow = Tensor::zeros(low.height(), low.width(), 3);
            // Gradient reaching M_i through the auxiliary input of level i-1.
            let mut carry: Option<Tensor> = None;
            for i in 0..n - 1 {
                let h = &t.pyramid.highs[i];
                let Some(cache) = &t.masks[i] else {
                    dhighs.push(dbars[i].clone());
                    continue;
                };
                let mut dh = dbars[i].mul(&cache.out)?;
                let mut dm = dbars[i].mul(h)?;
                if let Some(c) = carry.take() {
                    dm.add_assign(&c)?;
                }
                if i == first {
                    let daux = m.hf_first.backward(cache, &dm, &mut g.hf_first)?;
                    let parts = daux.split_channels(&[3, 3, 3])?;
                    dh.add_assign(&parts[0])?;
                    dlow.add_assign(&resize_bilinear_backward(&parts[1], low.height(), low.width()))?;
                    dlow_bar.add_assign(&resize_bilinear_backward(&parts[2], low.height(), low.width()))?;
                } else {
                    let daux = m.rest_for(i).backward(cache, &dm, g.rest_for_mut(i))?;
                    let coarse = &t.pyramid.highs[i + 1];
                    carry = Some(resize_bilinear_backward(&daux, coarse.height(), coarse.width()));
                }
                dhighs.push(dh);
            }
            let dln = correct_low_freq_backward(
                &t.low,
                &m.guidance,
                &m.hfd,
                mp.config.hfd(),
                &dlow_bar,
                &mut g.guidance,
                &mut g.hfd,
            )?;
            dlow.add_assign(&dln)?;
            if let Some(pp) = &m.pyramid {
                decompose_learnable_backward(
                    t.decompose.as_ref().expect("traced decomposition"),
                    pp,
                    &dhighs,
                    &dlow,
                    g.pyramid.as_mut().expect("pyramid gradient slot"),
                    (t.pyramid.height, t.pyramid.width),
                )?;
            }
        }
        _ => return Err(Error::Contract("trace does not match the model variant".into())),
    }
    Ok(grad)
}

/// Adds `b` into `a` tensor by tensor.
pub fn accumulate(a: &mut ModelParams, b: &ModelParams) -> Result<()> {
    check_layout(a, b)?;
    let src = b.tensors();
    for (dst, s) in a.tensors_mut().iter_mut().zip(&src) {
        dst.data.iter_mut().zip(s.data).for_each(|(x, y)| *x += y);
    }
    Ok(())
}

/// Loss and gradients of the MSE between the model output and `target`.
pub fn loss_and_grad(mp: &ModelParams, input: &Tensor, target: &Tensor) -> Result<(f64, ModelParams)> {
    let (out, trace) = mp.forward(input)?;
    let (loss, dout) = mse_loss(&out, target)?;
    Ok((loss, backward(mp, &trace, &dout)?))
}

/// Compares [`backward`] against central differences of the MSE loss.
pub fn gradcheck_model(
    mp: &ModelParams,
    input: &Tensor,
    target: &Tensor,
    opts: &GradCheckOptions,
) -> Result<Vec<TensorCheck>> {
    let (_, grad) = loss_and_grad(mp, input, target)?;
    Ok(gradcheck::check(mp, &grad, opts, |q| {
        let out = q.infer(input).expect("forward at perturbed point");
        mse_loss(&out, target).expect("matching dims").0
    }))
}

/// Seed at which the default-configuration check point of
/// [`gradcheck_setup`] is well conditioned for both MSLT and MSLT+.
pub const GRADCHECK_SEED: u64 = 9;

/// A point for finite-difference checks on a 32×32 input, returned as
/// `(params, input, target)`.
///
/// Rectifier biases of the grid predictor sit in wide gaps between their
/// pre-activations. Every mask MLP unit is active at every pixel, so the
/// masks are smooth in their parameters, and masks have mean one and a fixed
/// spread. Guidance stays between the two middle depth bin centres, and the
/// grid predictor's stem is shrunk until its features are moderate. The
/// target is the output of a teacher whose tensors are each perturbed to move
/// the output by the same amount, so every tensor has a share of the
/// residual.
pub fn gradcheck_setup(
    variant: Variant,
    config: ModelConfig,
    seed: u64,
) -> Result<(ModelParams, Tensor, Tensor)> {
    let mut mp = ModelParams::init(variant, config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5eed));
    for t in mp.tensors_mut() {
        if t.name.starts_with("pyramid") {
            t.data.iter_mut().for_each(|v| *v += rng.gen_range(-0.02..0.02));
        } else if t.name == "hfd.fuse.weight" {
            t.data.iter_mut().for_each(|v| *v *= 3.0);
        } else if t.name == "hfd.fuse.bias" {
            t.data.iter_mut().for_each(|v| *v += rng.gen_range(-0.05..0.05));
        } else if t.name.ends_with("out.bias") {
            t.data.iter_mut().for_each(|v| *v = 1.0 + rng.gen_range(-0.2..0.2));
        } else if t.dims.len() == 1 {
            t.data.iter_mut().for_each(|v| {
                let m: f32 = rng.gen_range(0.5..1.0);
                *v = if rng.gen_bool(0.5) { m } else { -m };
            });
        }
    }
    // Noise at every pyramid scale, weighted towards coarse ones, within (0.2, 0.8).
    let mut input = Tensor::filled(32, 32, 3, 0.5);
    for (side, amp) in [(4, 0.1), (8, 0.1), (16, 0.06), (32, 0.04)] {
        let coarse = Tensor::from_fn(side, side, 3, |_, _, _| rng.gen_range(-amp..amp));
        input = input.add(&resize_bilinear(&coarse, 32, 32)?)?;
    }
    // Alternate small corrections until the statistics below settle; the
    // fuse bias is re-centred so the mean fused map equals its initial bias.
    let fuse_target = match &mp.net {
        Network::Mslt(p) => p.hfd.fuse.bias.clone(),
        Network::ChannelMlp(_) => Vec::new(),
    };
    for _ in 0..GAP_PASSES {
        let trace = mp.forward(&input)?.1;
        let pre = channel_values(trace.rectifier_inputs(&mp.config));
        let masks = channel_values(trace.mask_outputs(&mp.config));
        for t in mp.tensors_mut() {
            if let Some((_, chans)) = pre.iter().find(|(n, _)| *n == t.name) {
                // Mask MLPs feed nothing back, so each of their units is made
                // active everywhere; elsewhere zero moves into a wide gap.
                let linear = t.name.starts_with("hf_");
                for (b, v) in t.data.iter_mut().zip(chans) {
                    let mut v = v.clone();
                    *b -= if linear {
                        let lo = v.iter().copied().fold(f32::INFINITY, f32::min);
                        let hi = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                        lo - MASK_MARGIN.max(0.5 * (hi - lo))
                    } else {
                        widest_gap(&mut v, GAP_REACH, GAP_CLEARANCE)
                    };
                }
            }
            // Masks are held at mean one with spread `MASK_STD`.
            if let Some(owner) = t.name.strip_suffix(".out.weight") {
                if let Some((_, chans)) = masks.iter().find(|(n, _)| n.starts_with(owner)) {
                    let cin = t.data.len() / chans.len();
                    for (row, v) in t.data.chunks_mut(cin).zip(chans) {
                        let k = settle(MASK_STD, mean_std(v).1);
                        row.iter_mut().for_each(|w| *w *= k as f32);
                    }
                }
            }
            if let Some((_, chans)) = masks.iter().find(|(n, _)| *n == t.name) {
                for (b, v) in t.data.iter_mut().zip(chans) {
                    let (mean, std) = mean_std(v);
                    // The spread is rescaled above, which moves the mean too.
                    let scaled = (mean - *b as f64) * settle(MASK_STD, std) + *b as f64;
                    *b += (1.0 - scaled) as f32;
                }
            }
        }
        // The guidance map spans the interval between the two middle depth
        // bin centres, where slicing is linear in it.
        if let (Some(g), Network::Mslt(p)) = (trace.guidance(), &mut mp.net) {
            let mean = mean_std(g.data()).0;
            let reach = g.data().iter().map(|&v| (v as f64 - mean).abs()).fold(0.0, f64::max);
            let k = settle(GUIDE_REACH, reach);
            let head = p.guidance.head.as_mut().expect("guidance head");
            let b = head.bias[0] as f64;
            let logit = (mean / (1.0 - mean)).ln();
            head.weight.data.iter_mut().for_each(|w| *w *= k as f32);
            head.bias[0] = (-(logit - b) * k) as f32;
        }
        if let (Some(grid), Network::Mslt(p)) = (trace.grid(), &mut mp.net) {
            let fused = grid_to_fused(grid);
            let c = fused.channels();
            let n = (fused.height() * fused.width()) as f64;
            let mut mean = vec![0.0f64; c];
            for px in fused.data().chunks_exact(c) {
                mean.iter_mut().zip(px).for_each(|(m, &v)| *m += v as f64 / n);
            }
            // The feature-driven part of the fused map is kept moderate by
            // shrinking the stem, which damps every product downstream.
            let drive = fused
                .data()
                .chunks_exact(c)
                .flat_map(|px| px.iter().zip(&p.hfd.fuse.bias).map(|(&v, &b)| (v as f64 - b as f64).powi(2)))
                .sum::<f64>()
                / (n * c as f64);
            let k = (FUSE_DRIVE / drive.sqrt().max(1e-12)).clamp(0.5, 1.0) as f32;
            p.hfd.stem.weight.data.iter_mut().chain(&mut p.hfd.stem.bias).for_each(|w| *w *= k);
            for ((b, &t), m) in p.hfd.fuse.bias.iter_mut().zip(&fuse_target).zip(mean) {
                *b = (*b as f64 + t as f64 - m) as f32;
            }
        }
    }
    // The target comes from a teacher with every tensor perturbed so that it
    // alone moves the output by `TEACHER_RMS`; the residual then lies in the
    // span of each tensor's Jacobian.
    let base = mp.infer(&input)?;
    let mut teacher = mp.clone();
    for ti in 0..mp.tensors().len() {
        let dir: Vec<f32> = (0..mp.tensors()[ti].data.len())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let mut probe = mp.clone();
        probe.tensors_mut()[ti]
            .data
            .iter_mut()
            .zip(&dir)
            .for_each(|(v, d)| *v += TEACHER_PROBE * d);
        let moved = rms_diff(&probe.infer(&input)?, &base);
        if moved < 1e-7 {
            continue;
        }
        let step = (TEACHER_PROBE * (TEACHER_RMS / moved) as f32).min(TEACHER_MAX_STEP);
        teacher.tensors_mut()[ti]
            .data
            .iter_mut()
            .zip(&dir)
            .for_each(|(v, d)| *v += step * d);
    }
    // Shrink the teacher towards the student until its output is unclamped.
    for _ in 0..TEACHER_HALVINGS {
        let (_, trace) = teacher.forward(&input)?;
        if trace.raw_output().data().iter().all(|v| (0.0..=1.0).contains(v)) {
            break;
        }
        for (t, s) in teacher.tensors_mut().into_iter().zip(mp.tensors()) {
            t.data.iter_mut().zip(s.data).for_each(|(v, &o)| *v = 0.5 * (*v + o));
        }
    }
    let target = teacher.infer(&input)?;
    Ok((mp, input, target))
}

/// Factor taking spread `std` towards `goal`, limited so that masks fed by
/// not-yet-settled coarser masks cannot blow up.
fn settle(goal: f64, std: f64) -> f64 {
    if std > 0.0 {
        (goal / std).clamp(0.125, 8.0)
    } else {
        1.0
    }
}

fn mean_std(v: &[f32]) -> (f64, f64) {
    let n = v.len().max(1) as f64;
    let mean = v.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = v.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

const TEACHER_PROBE: f32 = 1e-2;
const TEACHER_RMS: f64 = 0.01;
const TEACHER_MAX_STEP: f32 = 0.5;
const TEACHER_HALVINGS: usize = 8;

fn rms_diff(a: &Tensor, b: &Tensor) -> f64 {
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum();
    (s / a.data().len() as f64).sqrt()
}

const MASK_STD: f64 = 0.25;
const FUSE_DRIVE: f64 = 1.0;
const GUIDE_REACH: f64 = 0.06;
const MASK_MARGIN: f32 = 0.1;
const GAP_PASSES: usize = 16;
const GAP_REACH: f32 = 0.25;
const GAP_CLEARANCE: f32 = 0.05;

/// Per-channel values of tensors sharing a name, pooled over pixels.
fn channel_values(named: Vec<(String, &Tensor)>) -> Vec<(String, Vec<Vec<f32>>)> {
    let mut values: Vec<(String, Vec<Vec<f32>>)> = Vec::new();
    for (name, t) in named {
        let c = t.channels();
        let idx = match values.iter().position(|(n, _)| *n == name) {
            Some(i) => i,
            None => {
                values.push((name, vec![Vec::new(); c]));
                values.len() - 1
            }
        };
        for px in t.data().chunks_exact(c) {
            values[idx].1.iter_mut().zip(px).for_each(|(v, &x)| v.push(x));
        }
    }
    values
}

/// Offset within `[-reach, reach]` to subtract from `v` (sorted in place) so
/// that zero is at least `clear` from every value, or as far as possible;
/// the smallest such offset wins.
fn widest_gap(v: &mut [f32], reach: f32, clear: f32) -> f32 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f32::total_cmp);
    let mut best = (f32::MIN, 0.0f32);
    let mut consider = |lo: f32, hi: f32| {
        let z = if hi - lo >= 2.0 * clear {
            0.0f32.clamp(lo + clear, hi - clear)
        } else {
            0.5 * (lo + hi)
        }
        .clamp(-reach, reach);
        if z <= lo || z >= hi {
            return;
        }
        let score = (z - lo).min(hi - z).min(clear);
        if score > best.0 || (score == best.0 && z.abs() < best.1.abs()) {
            best = (score, z);
        }
    };
    let start = v.partition_point(|&x| x < -reach);
    let end = v.partition_point(|&x| x <= reach);
    let mut prev = if start > 0 { v[start - 1] } else { f32::NEG_INFINITY };
    for &x in &v[start..end] {
        consider(prev, x);
        prev = x;
    }
    consider(prev, v.get(end).copied().unwrap_or(f32::INFINITY));
    best.1
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistoryRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub params: ModelParams,
    pub adam: AdamState,
    pub history: Vec<HistoryRecord>,
}

/// A crop location: image index, top-left corner and size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Crop {
    pub image: usize,
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Random crops for one epoch: `crops_per_image` per image, shuffled.
pub fn sample_crops(dataset: &[SamplePair], cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Vec<Crop> {
    let mut order: Vec<usize> = (0..dataset.len())
        .flat_map(|i| std::iter::repeat(i).take(cfg.crops_per_image))
        .collect();
    order.shuffle(rng);
    order
        .into_iter()
        .map(|image| {
            let img = &dataset[image].input;
            let (height, width) = (cfg.crop.min(img.height()), cfg.crop.min(img.width()));
            Crop {
                image,
                top: rng.gen_range(0..=img.height() - height),
                left: rng.gen_range(0..=img.width() - width),
                height,
                width,
            }
        })
        .collect()
}

/// Trains from a fresh optimizer state.
pub fn fit(
    dataset: &[SamplePair],
    mp: ModelParams,
    cfg: &TrainConfig,
) -> Result<(ModelParams, Vec<HistoryRecord>)> {
    let r = fit_with(dataset, mp, None, cfg, |_| {})?;
    Ok((r.params, r.history))
}

/// Trains `mp`, optionally resuming `adam`, calling `on_step` after every
/// optimizer step. Batches are evaluated in parallel and their gradients
/// summed in batch order, so results do not depend on the thread count.
pub fn fit_with(
    dataset: &[SamplePair],
    mp: ModelParams,
    adam: Option<AdamState>,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&HistoryRecord),
) -> Result<FitResult> {
    fit_until(dataset, mp, adam, cfg, |rec, _| {
        on_step(rec);
        false
    })
}

/// As [`fit_with`], but stops early once `stop` returns true. `stop` sees
/// the parameters after the step it is called for.
pub fn fit_until(
    dataset: &[SamplePair],
    mut mp: ModelParams,
    adam: Option<AdamState>,
    cfg: &TrainConfig,
    mut stop: impl FnMut(&HistoryRecord, &ModelParams) -> bool,
) -> Result<FitResult> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut adam = adam.unwrap_or_else(|| AdamState::new(&mp));
    check_layout(&mp, &adam.m)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let steps_per_epoch = cfg.steps_per_epoch(dataset.len());
    let mut history = Vec::with_capacity(steps_per_epoch * cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let crops = sample_crops(dataset, cfg, &mut rng);
        for batch in crops.chunks(cfg.batch_size) {
            let results = batch
                .par_iter()
                .map(|c| {
                    let pair = &dataset[c.image];
                    let input = pair.input.window(c.top, c.left, c.height, c.width)?;
                    let target = pair.target.window(c.top, c.left, c.height, c.width)?;
                    loss_and_grad(&mp, &input, &target)
                })
                .collect::<Result<Vec<_>>>()?;
            let mut grad = mp.zeros_like();
            let mut loss = 0.0;
            for (l, g) in &results {
                loss += l;
                accumulate(&mut grad, g)?;
            }
            let b = results.len() as f32;
            grad.scale_all(1.0 / b);
            let lr = cosine_lr(step, steps_per_epoch, cfg);
            adam_step(&mut mp, &grad, &mut adam, lr, cfg)?;
            let rec = HistoryRecord {
                step,
                epoch,
                lr,
                loss: loss / b as f64,
            };
            let done = stop(&rec, &mp);
            history.push(rec);
            step += 1;
            if done {
                return Ok(FitResult {
                    params: mp,
                    adam,
                    history,
                });
            }
        }
    }
    Ok(FitResult {
        params: mp,
        adam,
        history,
    })
}
