//! Network assembly: the three pyramid variants and the per-pixel MLP
//! baseline, high-frequency mask correction, parameter and MAC counting.

use std::fmt;
use std::hash::{Hash, Hasher};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::bgnet::{
    correct_low_freq_traced, HfdConfig, HfdParams, LowFreqTrace, PoolingMode, SfeParams,
    BilateralGrid, FUSE_CHANNELS, GRID_INPUT, GUIDE_WIDTH, HFD_WIDTH,
};
use crate::error::{Error, Result};
use crate::params::{join, ParamMut, ParamRef, Params};
use crate::pyramid::{
    decompose_fixed, decompose_learnable_traced, reconstruct_fixed, reconstruct_learnable_traced,
    LearnableDecomposeCache, LearnableReconstructCache, Pyramid, PyramidParams, MAX_LEVELS,
    MIN_LEVELS,
};
use crate::tensor::{
    leaky_relu, relu, resize_bilinear, Conv1x1, Matrix, Tensor, LEAKY_RELU_SLOPE,
};

/// Hidden width of the per-pixel MLP baseline.
pub const CHANNEL_MLP_WIDTH: usize = 60;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Mslt,
    MsltPlus,
    MsltPlusPlus,
    ChannelMlp,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Mslt,
        Variant::MsltPlus,
        Variant::MsltPlusPlus,
        Variant::ChannelMlp,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Variant::Mslt => "mslt",
            Variant::MsltPlus => "mslt+",
            Variant::MsltPlusPlus => "mslt++",
            Variant::ChannelMlp => "channel-mlp",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Variant::Mslt => 0,
            Variant::MsltPlus => 1,
            Variant::MsltPlusPlus => 2,
            Variant::ChannelMlp => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.code() == code)
    }

    /// Uses the learnable 3×3 pyramid.
    pub fn learnable_pyramid(self) -> bool {
        matches!(self, Variant::MsltPlus | Variant::MsltPlusPlus)
    }

    /// Leaves the finest high-frequency layer uncorrected.
    pub fn skips_finest(self) -> bool {
        self == Variant::MsltPlusPlus
    }

    /// Published parameter total for the variant.
    pub fn reference_params(self) -> usize {
        match self {
            Variant::Mslt => 7_594,
            Variant::MsltPlus | Variant::MsltPlusPlus => 8_098,
            Variant::ChannelMlp => 7_683,
        }
    }

    /// Published GFLOPs at 1024×1024 and 3840×2160.
    pub fn reference_gflops(self) -> (f64, f64) {
        match self {
            Variant::Mslt => (0.08, 0.42),
            Variant::MsltPlus => (0.17, 1.10),
            Variant::MsltPlusPlus => (0.14, 0.88),
            Variant::ChannelMlp => (8.05, 63.73),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.tag() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant `{s}`; expected one of mslt, mslt+, mslt++, channel-mlp"
                ))
            })
    }
}

/// Architecture knobs shared by every variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ModelConfig {
    pub levels: usize,
    pub cfd_count: usize,
    pub pooling: PoolingMode,
    pub hf_shared: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            cfd_count: 3,
            pooling: PoolingMode::GapGsp,
            hf_shared: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(MIN_LEVELS..=MAX_LEVELS).contains(&self.levels) {
            return Err(Error::Config(format!(
                "levels must be in {MIN_LEVELS}..={MAX_LEVELS}, got {}",
                self.levels
            )));
        }
        if !(1..=5).contains(&self.cfd_count) {
            return Err(Error::Config(format!(
                "cfd count must be in 1..=5, got {}",
                self.cfd_count
            )));
        }
        Ok(())
    }

    pub fn hfd(&self) -> HfdConfig {
        HfdConfig {
            cfd_count: self.cfd_count,
            pooling: self.pooling,
        }
    }

    /// Number of 3→3→3 mask MLPs stored for levels `H_{n-2}..H_1`.
    pub fn hf_rest_count(&self) -> usize {
        let levels = self.levels.saturating_sub(2);
        if self.hf_shared {
            levels.min(1)
        } else {
            levels
        }
    }
}

/// Two 1×1 convs with a LeakyReLU between them, predicting a 3-channel mask.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskMlp {
    pub hidden: Conv1x1,
    pub out: Conv1x1,
}

impl MaskMlp {
    pub fn zeros(cin: usize) -> Self {
        Self {
            hidden: Conv1x1::zeros(cin, cin),
            out: Conv1x1::zeros(cin, 3),
        }
    }

    /// Predicts the all-ones mask for any input.
    pub fn unit(cin: usize) -> Self {
        let mut m = Self::zeros(cin);
        m.out.bias.fill(1.0);
        m
    }

    pub fn cin(&self) -> usize {
        self.hidden.cin()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_traced(x)?.out)
    }

    pub fn forward_traced(&self, x: &Tensor) -> Result<MaskCache> {
        let pre = self.hidden.forward(x)?;
        let act = leaky_relu(&pre, LEAKY_RELU_SLOPE);
        let out = self.out.forward(&act)?;
        Ok(MaskCache {
            x: x.clone(),
            pre,
            act,
            out,
        })
    }

    /// Returns the gradient w.r.t. the MLP input.
    pub fn backward(&self, cache: &MaskCache, dmask: &Tensor, grad: &mut MaskMlp) -> Result<Tensor> {
        let dact = self.out.backward(&cache.act, dmask, &mut grad.out)?;
        let dpre = crate::tensor::leaky_relu_backward(&cache.pre, &dact, LEAKY_RELU_SLOPE)?;
        self.hidden.backward(&cache.x, &dpre, &mut grad.hidden)
    }
}

impl Params for MaskMlp {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        self.hidden.visit(&join(prefix, "hidden"), out);
        self.out.visit(&join(prefix, "out"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        self.hidden.visit_mut(&join(prefix, "hidden"), out);
        self.out.visit_mut(&join(prefix, "out"), out);
    }
}

#[derive(Clone, Debug)]
pub struct MaskCache {
    pub(crate) x: Tensor,
    pub(crate) pre: Tensor,
    pub(crate) act: Tensor,
    pub(crate) out: Tensor,
}

impl MaskCache {
    pub fn mask(&self) -> &Tensor {
        &self.out
    }
}

/// Corrects one high-frequency layer: `M = mlp(aux)`, `H̄ = H ⊙ M`.
pub fn correct_high_freq(h: &Tensor, aux: &Tensor, p: &MaskMlp) -> Result<(Tensor, Tensor)> {
    if aux.channels() != p.cin() {
        return Err(Error::Dimension(format!(
            "mask MLP expects {} channels, got {}",
            p.cin(),
            aux.channels()
        )));
    }
    if h.channels() != 3 || (h.height(), h.width()) != (aux.height(), aux.width()) {
        return Err(Error::Dimension(format!(
            "high layer {:?} does not match auxiliary input {:?}",
            h.shape(),
            aux.shape()
        )));
    }
    let m = p.forward(aux)?;
    Ok((h.mul(&m)?, m))
}

/// Per-pixel MLP baseline: four 1×1 convs, each followed by a ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelMlp {
    pub layers: Vec<Conv1x1>,
}

impl ChannelMlp {
    pub fn zeros() -> Self {
        let w = CHANNEL_MLP_WIDTH;
        Self {
            layers: vec![
                Conv1x1::zeros(3, w),
                Conv1x1::zeros(w, w),
                Conv1x1::zeros(w, w),
                Conv1x1::zeros(w, 3),
            ],
        }
    }

    /// Passes the first three channels straight through. Exact on
    /// non-negative inputs because every ReLU sees only copies of them.
    pub fn identity() -> Self {
        let mut p = Self::zeros();
        for layer in &mut p.layers {
            for c in 0..3 {
                let cols = layer.weight.cols;
                layer.weight.data[c * cols + c] = 1.0;
            }
        }
        p
    }

    pub fn param_count(&self) -> usize {
        self.param_len()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = relu(&layer.forward(&h)?);
        }
        Ok(h)
    }

    /// Same result as [`ChannelMlp::forward`], one pixel at a time, so no
    /// full-resolution hidden activations are held.
    pub fn forward_fused(&self, x: &Tensor) -> Result<Tensor> {
        let cin = self.layers.first().map_or(0, Conv1x1::cin);
        let cout = self.layers.last().map_or(0, Conv1x1::cout);
        if x.channels() != cin || self.layers.windows(2).any(|p| p[0].cout() != p[1].cin()) {
            return Err(Error::Dimension(format!("channel MLP applied to {} channels", x.channels())));
        }
        let wts: Vec<Matrix> = self.layers.iter().map(|l| l.weight.transpose()).collect();
        let widest = self.layers.iter().map(Conv1x1::cout).max().unwrap_or(0);
        let mut out = Tensor::zeros(x.height(), x.width(), cout);
        let (row_in, row_out) = (x.width() * cin, x.width() * cout);
        out.data_mut()
            .par_chunks_mut(row_out.max(1))
            .zip(x.data().par_chunks(row_in.max(1)))
            .for_each(|(yrow, xrow)| {
                let (mut a, mut b) = (vec![0.0f32; widest], vec![0.0f32; widest]);
                for (yp, xp) in yrow.chunks_exact_mut(cout).zip(xrow.chunks_exact(cin)) {
                    a[..cin].copy_from_slice(xp);
                    let mut width = cin;
                    for (layer, wt) in self.layers.iter().zip(&wts) {
                        let co = layer.cout();
                        let y = &mut b[..co];
                        y.copy_from_slice(&layer.bias);
                        for (ci, &xv) in a[..width].iter().enumerate() {
                            for (yv, &wv) in y.iter_mut().zip(&wt.data[ci * co..(ci + 1) * co]) {
                                *yv += wv * xv;
                            }
                        }
                        for v in y.iter_mut() {
                            *v = v.max(0.0);
                        }
                        std::mem::swap(&mut a, &mut b);
                        width = co;
                    }
                    yp.copy_from_slice(&a[..cout]);
                }
            });
        Ok(out)
    }
}

impl Params for ChannelMlp {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        self.layers.visit(prefix, out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        self.layers.visit_mut(prefix, out);
    }
}

/// Runs the baseline on an image, output clamped to `[0, 1]`.
pub fn channel_mlp_forward(img: &Tensor, p: &ChannelMlp) -> Result<Tensor> {
    Ok(p.forward(img)?.clamp01())
}

/// Parameters of the pyramid networks.
#[derive(Clone, Debug, PartialEq)]
pub struct MsltParams {
    pub guidance: SfeParams,
    pub hfd: HfdParams,
    pub hf_first: MaskMlp,
    /// One MLP when shared, otherwise one per level `H_1..H_{n-2}`.
    pub hf_rest: Vec<MaskMlp>,
    pub pyramid: Option<PyramidParams>,
}

impl MsltParams {
    /// MLP that corrects level index `i` (0 for `H_1`), `i < n - 2`.
    pub fn rest_for(&self, i: usize) -> &MaskMlp {
        if self.hf_rest.len() == 1 {
            &self.hf_rest[0]
        } else {
            &self.hf_rest[i]
        }
    }

    pub(crate) fn rest_for_mut(&mut self, i: usize) -> &mut MaskMlp {
        if self.hf_rest.len() == 1 {
            &mut self.hf_rest[0]
        } else {
            &mut self.hf_rest[i]
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Network {
    Mslt(MsltParams),
    ChannelMlp(ChannelMlp),
}

/// All learnable tensors of one model plus the architecture they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub variant: Variant,
    pub config: ModelConfig,
    pub net: Network,
}

impl ModelParams {
    /// All-zero parameters with the right shapes (gradient buffers).
    pub fn zeros(variant: Variant, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let net = match variant {
            Variant::ChannelMlp => Network::ChannelMlp(ChannelMlp::zeros()),
            _ => Network::Mslt(MsltParams {
                guidance: SfeParams::guidance_zeros(),
                hfd: HfdParams::zeros(),
                hf_first: MaskMlp::zeros(9),
                hf_rest: (0..config.hf_rest_count()).map(|_| MaskMlp::zeros(3)).collect(),
                pyramid: variant
                    .learnable_pyramid()
                    .then(|| PyramidParams::zeros(config.levels)),
            }),
        };
        Ok(Self {
            variant,
            config,
            net,
        })
    }

    /// Weights for which `forward` is the identity map: identity grid in
    /// every cell, unit masks, Gaussian-initialised pyramid kernels.
    pub fn identity(variant: Variant, config: ModelConfig) -> Result<Self> {
        let mut mp = Self::zeros(variant, config)?;
        match &mut mp.net {
            Network::ChannelMlp(p) => *p = ChannelMlp::identity(),
            Network::Mslt(m) => {
                m.hfd = HfdParams::identity();
                m.hf_first = MaskMlp::unit(9);
                m.hf_rest.iter_mut().for_each(|r| *r = MaskMlp::unit(3));
                if let Some(pp) = &mut m.pyramid {
                    *pp = PyramidParams::gaussian_init(config.levels);
                }
            }
        }
        Ok(mp)
    }

    /// Training initialisation: fan-in scaled uniform weights and biases,
    /// Gaussian pyramid kernels, mask output bias 1 and a fuse layer that
    /// starts from the identity grid.
    pub fn init(variant: Variant, config: ModelConfig, seed: u64) -> Result<Self> {
        let mut mp = Self::zeros(variant, config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fan_in = |c: &mut Conv1x1, rng: &mut ChaCha8Rng, scale: f32| {
            let bound = scale / (c.cin() as f32).sqrt();
            c.weight.data.iter_mut().for_each(|v| *v = rng.gen_range(-bound..bound));
            c.bias.iter_mut().for_each(|v| *v = rng.gen_range(-bound..bound));
        };
        match &mut mp.net {
            Network::ChannelMlp(p) => {
                for layer in &mut p.layers {
                    fan_in(layer, &mut rng, 1.0);
                }
            }
            Network::Mslt(m) => {
                fan_in(&mut m.guidance.conv_a, &mut rng, 1.0);
                fan_in(&mut m.guidance.conv_b, &mut rng, 1.0);
                if let Some(h) = &mut m.guidance.head {
                    fan_in(h, &mut rng, 1.0);
                }
                fan_in(&mut m.hfd.stem, &mut rng, 1.0);
                fan_in(&mut m.hfd.refine, &mut rng, 1.0);
                fan_in(&mut m.hfd.sfe.conv_a, &mut rng, 1.0);
                fan_in(&mut m.hfd.sfe.conv_b, &mut rng, 1.0);
                fan_in(&mut m.hfd.fuse, &mut rng, 0.1);
                m.hfd.fuse.bias.fill(0.0);
                m.hfd.fuse.bias[0] = 1.0;
                m.hfd.fuse.bias[1] = 1.0;
                for mlp in std::iter::once(&mut m.hf_first).chain(m.hf_rest.iter_mut()) {
                    fan_in(&mut mlp.hidden, &mut rng, 1.0);
                    fan_in(&mut mlp.out, &mut rng, 0.1);
                    mlp.out.bias.fill(1.0);
                }
                if let Some(pp) = &mut m.pyramid {
                    *pp = PyramidParams::gaussian_init(config.levels);
                }
            }
        }
        Ok(mp)
    }

    /// A zeroed copy with identical layout.
    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        g.zero();
        g
    }

    pub fn param_count(&self) -> usize {
        self.param_len()
    }

    /// Parameters held by the learnable pyramid, 0 for fixed variants.
    pub fn pyramid_param_count(&self) -> usize {
        match &self.net {
            Network::Mslt(m) => m.pyramid.as_ref().map_or(0, PyramidParams::param_count),
            Network::ChannelMlp(_) => 0,
        }
    }

    /// Checks that the stored tensors fit the declared variant and config.
    pub fn check(&self) -> Result<()> {
        let want = Self::zeros(self.variant, self.config)?;
        let (a, b) = (want.tensors(), self.tensors());
        if a.len() != b.len() {
            return Err(Error::Malformed(format!(
                "expected {} tensors, found {}",
                a.len(),
                b.len()
            )));
        }
        for (w, t) in a.iter().zip(&b) {
            if w.name != t.name || w.dims != t.dims || w.data.len() != t.data.len() {
                return Err(Error::ShapeMismatch {
                    name: t.name.clone(),
                    expected: w.dims.clone(),
                    found: t.dims.clone(),
                });
            }
        }
        Ok(())
    }

    /// Hash of the variant, config and every parameter bit.
    pub fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.variant.hash(&mut h);
        self.config.hash(&mut h);
        for t in self.tensors() {
            t.name.hash(&mut h);
            for v in t.data {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    /// Corrects `img` and keeps every intermediate needed for backward.
    pub fn forward(&self, img: &Tensor) -> Result<(Tensor, Trace)> {
        let (out, trace) = self.run(img, true)?;
        Ok((out, trace.expect("trace requested")))
    }

    /// Corrects `img`, dropping intermediates as soon as they are consumed.
    pub fn infer(&self, img: &Tensor) -> Result<Tensor> {
        Ok(self.run(img, false)?.0)
    }

    fn run(&self, img: &Tensor, keep: bool) -> Result<(Tensor, Option<Trace>)> {
        check_image(img)?;
        let fingerprint = if keep { self.fingerprint() } else { 0 };
        let (raw, kind) = match &self.net {
            Network::ChannelMlp(p) if !keep => (p.forward_fused(img)?, TraceKind::ChannelMlp(MlpTrace { layers: Vec::new() })),
            Network::ChannelMlp(p) => {
                let mut inputs = Vec::with_capacity(p.layers.len());
                let mut h = img.clone();
                for layer in &p.layers {
                    let pre = layer.forward(&h)?;
                    let next = relu(&pre);
                    if keep {
                        inputs.push((h, pre));
                    }
                    h = next;
                }
                (h, TraceKind::ChannelMlp(MlpTrace { layers: inputs }))
            }
            Network::Mslt(m) => {
                let (raw, t) = self.run_mslt(m, img, keep)?;
                (raw, TraceKind::Mslt(Box::new(t)))
            }
        };
        let out = raw.clamp01();
        let trace = keep.then(|| Trace {
            fingerprint,
            raw,
            kind,
        });
        Ok((out, trace))
    }

    fn run_mslt(&self, m: &MsltParams, img: &Tensor, keep: bool) -> Result<(Tensor, MsltTrace)> {
        let n = self.config.levels;
        let (pyramid, decompose) = match &m.pyramid {
            None => (decompose_fixed(img, n)?, None),
            Some(pp) => {
                let (p, c) = decompose_learnable_traced(img, n, pp)?;
                (p, keep.then_some(c))
            }
        };
        let low = correct_low_freq_traced(&pyramid.low, &m.guidance, &m.hfd, self.config.hfd())?;

        let first = n - 2;
        let mut masks: Vec<Option<MaskCache>> = (0..n - 1).map(|_| None).collect();
        let mut bars: Vec<Option<Tensor>> = (0..n - 1).map(|_| None).collect();
        let h_first = &pyramid.highs[first];
        let (fh, fw) = (h_first.height(), h_first.width());
        let aux = Tensor::concat_channels(&[
            h_first,
            &resize_bilinear(&pyramid.low, fh, fw)?,
            &resize_bilinear(&low.corrected, fh, fw)?,
        ])?;
        let cache = m.hf_first.forward_traced(&aux)?;
        drop(aux);
        bars[first] = Some(h_first.mul(&cache.out)?);
        masks[first] = Some(cache);
        for i in (0..first).rev() {
            if i == 0 && self.variant.skips_finest() {
                break;
            }
            let h = &pyramid.highs[i];
            let prev = masks[i + 1].as_ref().expect("coarser mask computed").out.clone();
            if !keep {
                masks[i + 1] = None;
            }
            let aux = resize_bilinear(&prev, h.height(), h.width())?;
            let cache = m.rest_for(i).forward_traced(&aux)?;
            bars[i] = Some(h.mul(&cache.out)?);
            masks[i] = Some(cache);
        }
        if !keep {
            masks.iter_mut().for_each(|c| *c = None);
        }

        let highs = bars
            .into_iter()
            .zip(&pyramid.highs)
            .map(|(b, h)| b.unwrap_or_else(|| h.clone()))
            .collect();
        let corrected = Pyramid {
            highs,
            low: low.corrected.clone(),
            height: pyramid.height,
            width: pyramid.width,
        };
        let (raw, reconstruct) = match &m.pyramid {
            None => (reconstruct_fixed(&corrected)?, None),
            Some(pp) => {
                let (o, c) = reconstruct_learnable_traced(&corrected, pp)?;
                (o, keep.then_some(c))
            }
        };
        Ok((
            raw,
            MsltTrace {
                pyramid,
                corrected,
                low,
                masks,
                decompose,
                reconstruct,
            },
        ))
    }
}

fn check_image(img: &Tensor) -> Result<()> {
    if img.channels() != 3 {
        return Err(Error::Dimension(format!(
            "expected a 3-channel image, got {} channels",
            img.channels()
        )));
    }
    if img.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Contract("input values must lie in [0, 1]".into()));
    }
    Ok(())
}

impl Params for ModelParams {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        match &self.net {
            Network::ChannelMlp(p) => p.visit(&join(prefix, "mlp"), out),
            Network::Mslt(m) => {
                m.guidance.visit(&join(prefix, "guidance"), out);
                m.hfd.visit(&join(prefix, "hfd"), out);
                m.hf_first.visit(&join(prefix, "hf_first"), out);
                if self.config.hf_shared {
                    for r in &m.hf_rest {
                        r.visit(&join(prefix, "hf_shared"), out);
                    }
                } else {
                    m.hf_rest.visit(&join(prefix, "hf_levels"), out);
                }
                if let Some(pp) = &m.pyramid {
                    pp.down.visit(&join(prefix, "pyramid.down"), out);
                    pp.up.visit(&join(prefix, "pyramid.up"), out);
                }
            }
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        let shared = self.config.hf_shared;
        match &mut self.net {
            Network::ChannelMlp(p) => p.visit_mut(&join(prefix, "mlp"), out),
            Network::Mslt(m) => {
                m.guidance.visit_mut(&join(prefix, "guidance"), out);
                m.hfd.visit_mut(&join(prefix, "hfd"), out);
                m.hf_first.visit_mut(&join(prefix, "hf_first"), out);
                if shared {
                    for r in &mut m.hf_rest {
                        r.visit_mut(&join(prefix, "hf_shared"), out);
                    }
                } else {
                    m.hf_rest.visit_mut(&join(prefix, "hf_levels"), out);
                }
                if let Some(pp) = &mut m.pyramid {
                    pp.down.visit_mut(&join(prefix, "pyramid.down"), out);
                    pp.up.visit_mut(&join(prefix, "pyramid.up"), out);
                }
            }
        }
    }
}

/// Intermediates of one forward call.
#[derive(Clone, Debug)]
pub struct Trace {
    pub(crate) fingerprint: u64,
    /// Output before the final clamp.
    pub(crate) raw: Tensor,
    pub(crate) kind: TraceKind,
}

#[derive(Clone, Debug)]
pub(crate) enum TraceKind {
    Mslt(Box<MsltTrace>),
    ChannelMlp(MlpTrace),
}

#[derive(Clone, Debug)]
pub(crate) struct MsltTrace {
    pub pyramid: Pyramid,
    pub corrected: Pyramid,
    pub low: LowFreqTrace,
    /// Indexed by level, finest first; `None` where no mask was predicted.
    pub masks: Vec<Option<MaskCache>>,
    pub decompose: Option<LearnableDecomposeCache>,
    pub reconstruct: Option<LearnableReconstructCache>,
}

#[derive(Clone, Debug)]
pub(crate) struct MlpTrace {
    /// `(input, pre-activation)` of every layer.
    pub layers: Vec<(Tensor, Tensor)>,
}

impl MsltTrace {
    /// Computed mask caches with the name of the MLP that produced each.
    fn mask_caches(&self, config: &ModelConfig) -> Vec<(String, &MaskCache)> {
        let first = self.masks.len() - 1;
        self.masks
            .iter()
            .enumerate()
            .filter_map(|(i, m)| {
                let owner = if i == first {
                    "hf_first".to_string()
                } else if config.hf_shared {
                    "hf_shared".to_string()
                } else {
                    format!("hf_levels.{i}")
                };
                m.as_ref().map(|m| (owner, m))
            })
            .collect()
    }
}

impl Trace {
    /// Inputs of every rectifier, keyed by the bias tensor that shifts them.
    pub(crate) fn rectifier_inputs(&self, config: &ModelConfig) -> Vec<(String, &Tensor)> {
        match &self.kind {
            TraceKind::Mslt(t) => {
                let mut v: Vec<(String, &Tensor)> =
                    t.low.relu_inputs().into_iter().map(|(n, x)| (n.to_string(), x)).collect();
                for (owner, m) in t.mask_caches(config) {
                    v.push((format!("{owner}.hidden.bias"), &m.pre));
                }
                v
            }
            TraceKind::ChannelMlp(t) => t
                .layers
                .iter()
                .enumerate()
                .map(|(i, (_, pre))| (format!("mlp.{i}.bias"), pre))
                .collect(),
        }
    }

    /// Mask MLP outputs, keyed by the bias tensor that shifts them.
    pub(crate) fn mask_outputs(&self, config: &ModelConfig) -> Vec<(String, &Tensor)> {
        match &self.kind {
            TraceKind::Mslt(t) => t
                .mask_caches(config)
                .into_iter()
                .map(|(owner, m)| (format!("{owner}.out.bias"), &m.out))
                .collect(),
            TraceKind::ChannelMlp(_) => Vec::new(),
        }
    }

    fn mslt(&self) -> Option<&MsltTrace> {
        match &self.kind {
            TraceKind::Mslt(t) => Some(t),
            TraceKind::ChannelMlp(_) => None,
        }
    }

    pub fn raw_output(&self) -> &Tensor {
        &self.raw
    }

    /// Decomposition of the input.
    pub fn pyramid(&self) -> Option<&Pyramid> {
        self.mslt().map(|t| &t.pyramid)
    }

    /// Pyramid after correction, as fed to the reconstruction.
    pub fn corrected(&self) -> Option<&Pyramid> {
        self.mslt().map(|t| &t.corrected)
    }

    pub fn guidance(&self) -> Option<&Tensor> {
        self.mslt().map(|t| &t.low.guidance)
    }

    pub fn grid(&self) -> Option<&BilateralGrid> {
        self.mslt().map(|t| &t.low.grid)
    }

    /// Predicted masks by level, finest first.
    pub fn masks(&self) -> Vec<Option<&Tensor>> {
        self.mslt()
            .map(|t| t.masks.iter().map(|m| m.as_ref().map(MaskCache::mask)).collect())
            .unwrap_or_default()
    }
}

/// Published MFLOPs of MSLT on a 1024×1024 image.
pub const MSLT_REFERENCE_MFLOPS: f64 = 83.45;

/// Multiply-accumulate counts per stage. Bias additions, residual sums and
/// clamps are not counted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlopReport {
    pub stages: Vec<(&'static str, u64)>,
    /// MACs of the fixed Gaussian filtering (MSLT only), reported separately
    /// and excluded from [`FlopReport::total`].
    pub fixed_filter: u64,
}

impl FlopReport {
    /// Headline multiply-accumulate count.
    pub fn total(&self) -> u64 {
        self.stages.iter().map(|(_, v)| v).sum()
    }

    pub fn stage(&self, name: &str) -> u64 {
        self.stages
            .iter()
            .filter(|(s, _)| *s == name)
            .map(|(_, v)| v)
            .sum()
    }
}

/// MACs for one forward pass at `h × w`.
pub fn flop_count(mp: &ModelParams, h: usize, w: usize) -> FlopReport {
    flop_count_for(mp.variant, &mp.config, h, w)
}

pub fn flop_count_for(variant: Variant, cfg: &ModelConfig, h: usize, w: usize) -> FlopReport {
    let mut stages = Vec::new();
    if variant == Variant::ChannelMlp {
        let c = CHANNEL_MLP_WIDTH as u64;
        stages.push(("mlp", (h * w) as u64 * (3 * c + 2 * c * c + c * 3)));
        return FlopReport {
            stages,
            fixed_filter: 0,
        };
    }
    let n = cfg.levels;
    let m = 1usize << (n - 1);
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    // Pixels at level i, 1-based.
    let px = |i: usize| ((ph >> (i - 1)) * (pw >> (i - 1))) as u64;

    let mut fixed_filter = 0;
    if variant.learnable_pyramid() {
        // 3→3 conv: 81 MACs per output pixel; bilinear ×2: 4 taps × 3 channels.
        let down: u64 = (1..n).map(|i| 81 * px(i + 1)).sum();
        let up: u64 = (1..n).map(|i| 81 * px(i + 1) + 12 * px(i)).sum();
        stages.push(("pyramid", down + 2 * up));
    } else {
        // Depthwise 5×5 on 3 channels; the upsampler filters the zero-inserted grid.
        let down: u64 = (1..n).map(|i| 75 * px(i + 1)).sum();
        let up: u64 = (1..n).map(|i| 75 * px(i)).sum();
        fixed_filter = down + 2 * up;
    }

    let pn = px(n);
    let g = GUIDE_WIDTH as u64;
    stages.push(("guidance", pn * (3 * g + g + g + g * g + g)));

    let grid_px = (GRID_INPUT * GRID_INPUT) as u64;
    let c = HFD_WIDTH as u64;
    let pooling = match cfg.pooling {
        PoolingMode::Gap => 1,
        PoolingMode::Gsp => 2,
        PoolingMode::GapGsp => 3,
    };
    let stage = pooling * c + c + c * c + (c * c + c + c + c * c);
    let hfd = grid_px * (3 * c + cfg.cfd_count as u64 * stage + c * FUSE_CHANNELS as u64);
    stages.push(("grid_input", grid_px * 12));
    stages.push(("hfd", hfd));
    stages.push(("slice", pn * 8 * 12));
    stages.push(("affine", pn * 9));

    stages.push(("hf_first", px(n - 1) * (2 * 12 + 81 + 27 + 3)));
    let rest: u64 = (1..n - 1)
        .filter(|&i| !(i == 1 && variant.skips_finest()))
        .map(|i| px(i) * (12 + 9 + 9 + 3))
        .sum();
    stages.push(("hf_rest", rest));
    FlopReport {
        stages,
        fixed_filter,
    }
}
