//! Low-frequency correction through a learned bilateral grid of affine
//! colour transforms.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::params::{join, ParamMut, ParamRef, Params};
use crate::tensor::{
    channel_dot, channel_moments, global_avg_pool_backward, global_std_pool_backward, mul_channels,
    relu, relu_backward, resize_bilinear, resize_bilinear_backward, sigmoid, sigmoid_backward,
    Conv1x1, Tensor,
};

pub const GRID_H: usize = 16;
pub const GRID_W: usize = 16;
pub const GRID_D: usize = 6;
pub const COEFFS: usize = 12;
pub const GRID_LEN: usize = GRID_H * GRID_W * GRID_D * COEFFS;
/// Side of the square input of the grid predictor.
pub const GRID_INPUT: usize = 48;
pub const HFD_WIDTH: usize = 40;
pub const FUSE_CHANNELS: usize = 8;
pub const GUIDE_WIDTH: usize = 8;
const BLOCK: usize = GRID_INPUT / GRID_H;

/// Coefficients carried by fused channels 2..8, in block order.
const OFFDIAG: [usize; 9] = [1, 2, 3, 4, 6, 7, 8, 9, 11];

/// 16×16×6 cells of 3×4 affine matrices, stored `[i][j][k][c]`.
///
/// Coefficient `c` of a cell is row `c / 4`, column `c % 4` of the matrix,
/// the last column being the bias.
#[derive(Clone, Debug, PartialEq)]
pub struct BilateralGrid {
    pub data: Vec<f32>,
}

impl BilateralGrid {
    pub fn constant(v: f32) -> Self {
        Self {
            data: vec![v; GRID_LEN],
        }
    }

    pub fn identity() -> Self {
        let mut data = vec![0.0; GRID_LEN];
        for cell in data.chunks_exact_mut(COEFFS) {
            cell[0] = 1.0;
            cell[5] = 1.0;
            cell[10] = 1.0;
        }
        Self { data }
    }

    pub fn from_data(data: Vec<f32>) -> Result<Self> {
        if data.len() != GRID_LEN {
            return Err(Error::Dimension(format!(
                "bilateral grid needs {GRID_LEN} values, got {}",
                data.len()
            )));
        }
        Ok(Self { data })
    }

    pub fn index(i: usize, j: usize, k: usize, c: usize) -> usize {
        ((i * GRID_W + j) * GRID_D + k) * COEFFS + c
    }

    pub fn at(&self, i: usize, j: usize, k: usize, c: usize) -> f32 {
        self.data[Self::index(i, j, k, c)]
    }
}

/// Global pooling used inside the feature decomposition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum PoolingMode {
    Gap,
    Gsp,
    #[default]
    GapGsp,
}

impl PoolingMode {
    pub const ALL: [PoolingMode; 3] = [PoolingMode::Gap, PoolingMode::Gsp, PoolingMode::GapGsp];

    pub fn tag(self) -> &'static str {
        match self {
            PoolingMode::Gap => "gap",
            PoolingMode::Gsp => "gsp",
            PoolingMode::GapGsp => "gap+gsp",
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

impl fmt::Display for PoolingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for PoolingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.tag() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown pooling mode `{s}`; expected one of gap, gsp, gap+gsp")))
    }
}

/// Shape knobs of the grid predictor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HfdConfig {
    pub cfd_count: usize,
    pub pooling: PoolingMode,
}

impl Default for HfdConfig {
    fn default() -> Self {
        Self {
            cfd_count: 3,
            pooling: PoolingMode::GapGsp,
        }
    }
}

/// Self-modulated feature extraction: two 1×1 convs with a channel-mean
/// modulation between them, plus an optional sigmoid head.
#[derive(Clone, Debug, PartialEq)]
pub struct SfeParams {
    pub conv_a: Conv1x1,
    pub conv_b: Conv1x1,
    pub head: Option<Conv1x1>,
}

impl SfeParams {
    pub fn zeros(c1: usize, c2: usize, head: bool) -> Self {
        Self {
            conv_a: Conv1x1::zeros(c1, c2),
            conv_b: Conv1x1::zeros(c2, c2),
            head: head.then(|| Conv1x1::zeros(c2, 1)),
        }
    }

    /// Zero-valued guidance extractor (3 → 8 → 8 → 1).
    pub fn guidance_zeros() -> Self {
        Self::zeros(3, GUIDE_WIDTH, true)
    }

    pub fn param_count(&self) -> usize {
        self.param_len()
    }
}

impl Params for SfeParams {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        self.conv_a.visit(&join(prefix, "conv_a"), out);
        self.conv_b.visit(&join(prefix, "conv_b"), out);
        if let Some(h) = &self.head {
            h.visit(&join(prefix, "head"), out);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        self.conv_a.visit_mut(&join(prefix, "conv_a"), out);
        self.conv_b.visit_mut(&join(prefix, "conv_b"), out);
        if let Some(h) = &mut self.head {
            h.visit_mut(&join(prefix, "head"), out);
        }
    }
}

#[derive(Clone, Debug)]
pub struct SfeCache {
    x: Tensor,
    a: Tensor,
    t: Tensor,
    m: Vec<f32>,
    u: Tensor,
    y: Tensor,
    out: Tensor,
}

impl SfeCache {
    pub fn output(&self) -> &Tensor {
        &self.out
    }
}

pub fn sfe_forward(x: &Tensor, p: &SfeParams) -> Result<Tensor> {
    sfe_forward_traced(x, p).map(|c| c.out)
}

pub fn sfe_forward_traced(x: &Tensor, p: &SfeParams) -> Result<SfeCache> {
    let a = p.conv_a.forward(x)?;
    let t = relu(&a);
    let m: Vec<f32> = channel_moments(&t).into_iter().map(|(m, _)| m as f32).collect();
    let u = mul_channels(&t, &m)?;
    let y = p.conv_b.forward(&u)?;
    let out = match &p.head {
        Some(h) => sigmoid(&h.forward(&y)?),
        None => y.clone(),
    };
    Ok(SfeCache {
        x: x.clone(),
        a,
        t,
        m,
        u,
        y,
        out,
    })
}

pub fn sfe_backward(cache: &SfeCache, p: &SfeParams, dout: &Tensor, grad: &mut SfeParams) -> Result<Tensor> {
    let dy = match (&p.head, &mut grad.head) {
        (Some(h), Some(gh)) => {
            let dz = sigmoid_backward(&cache.out, dout)?;
            h.backward(&cache.y, &dz, gh)?
        }
        (None, None) => dout.clone(),
        _ => return Err(Error::Contract("SFE gradient layout differs from parameters".into())),
    };
    let du = p.conv_b.backward(&cache.u, &dy, &mut grad.conv_b)?;
    // u = t ⊙ mean(t): direct path plus the path through the mean.
    let dm = channel_dot(&du, &cache.t)?;
    let dt = mul_channels(&du, &cache.m)?.add(&global_avg_pool_backward(&cache.t, &dm))?;
    let da = relu_backward(&cache.a, &dt)?;
    p.conv_a.backward(&cache.x, &da, &mut grad.conv_a)
}

/// Per-channel statistic `s` used by the feature decomposition.
fn cfd_stat(x: &Tensor, mode: PoolingMode) -> Vec<f32> {
    channel_moments(x)
        .into_iter()
        .map(|(m, v)| match mode {
            PoolingMode::Gap => m as f32,
            PoolingMode::Gsp => v.sqrt() as f32,
            PoolingMode::GapGsp => (m + v.sqrt()) as f32,
        })
        .collect()
}

/// Context-aware feature decomposition with mean+std pooling.
pub fn cfd_forward(x: &Tensor) -> Result<(Tensor, Tensor)> {
    cfd_forward_mode(x, PoolingMode::GapGsp)
}

/// [`cfd_forward`] with a selectable pooling statistic.
pub fn cfd_forward_mode(x: &Tensor, mode: PoolingMode) -> Result<(Tensor, Tensor)> {
    let s = cfd_stat(x, mode);
    let ctx = mul_channels(x, &s)?;
    let res = x.sub(&ctx)?;
    Ok((ctx, res))
}

fn cfd_backward(x: &Tensor, s: &[f32], mode: PoolingMode, dctx: &Tensor, dres: &Tensor) -> Result<Tensor> {
    // ctx = x ⊙ s, res = x − ctx.
    let dc = dctx.sub(dres)?;
    let mut dx = dres.add(&mul_channels(&dc, s)?)?;
    let ds = channel_dot(&dc, x)?;
    if mode != PoolingMode::Gsp {
        dx.add_assign(&global_avg_pool_backward(x, &ds))?;
    }
    if mode != PoolingMode::Gap {
        dx.add_assign(&global_std_pool_backward(x, &ds))?;
    }
    Ok(dx)
}

/// Parameters of the hierarchical grid predictor. `refine` and `sfe` are
/// shared by every decomposition stage.
#[derive(Clone, Debug, PartialEq)]
pub struct HfdParams {
    pub stem: Conv1x1,
    pub refine: Conv1x1,
    pub sfe: SfeParams,
    pub fuse: Conv1x1,
}

impl HfdParams {
    pub fn zeros() -> Self {
        Self {
            stem: Conv1x1::zeros(3, HFD_WIDTH),
            refine: Conv1x1::zeros(HFD_WIDTH, HFD_WIDTH),
            sfe: SfeParams::zeros(HFD_WIDTH, HFD_WIDTH, false),
            fuse: Conv1x1::zeros(HFD_WIDTH, FUSE_CHANNELS),
        }
    }

    /// Zero weights with the fuse bias set so the predicted grid is the
    /// identity transform in every cell.
    pub fn identity() -> Self {
        let mut p = Self::zeros();
        p.fuse.bias[0] = 1.0;
        p.fuse.bias[1] = 1.0;
        p
    }

    pub fn param_count(&self) -> usize {
        self.param_len()
    }
}

impl Params for HfdParams {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        self.stem.visit(&join(prefix, "stem"), out);
        self.refine.visit(&join(prefix, "refine"), out);
        self.sfe.visit(&join(prefix, "sfe"), out);
        self.fuse.visit(&join(prefix, "fuse"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        self.stem.visit_mut(&join(prefix, "stem"), out);
        self.refine.visit_mut(&join(prefix, "refine"), out);
        self.sfe.visit_mut(&join(prefix, "sfe"), out);
        self.fuse.visit_mut(&join(prefix, "fuse"), out);
    }
}

#[derive(Clone, Debug)]
struct HfdStage {
    input: Tensor,
    stat: Vec<f32>,
    ctx: Tensor,
    refined_pre: Tensor,
    sfe: SfeCache,
}

#[derive(Clone, Debug)]
pub struct HfdCache {
    input: Tensor,
    stages: Vec<HfdStage>,
    sum: Tensor,
}

/// Maps fused channel `ch` at block offset `b` (0..9) to `(depth, coeff)`.
///
/// Channels 0 and 1 carry the diagonal gains of all six depth bins; channel
/// `2 + k` carries the remaining nine coefficients of depth bin `k`.
pub fn fused_slot(ch: usize, b: usize) -> (usize, usize) {
    let q = ch * BLOCK * BLOCK + b;
    if q < 18 {
        (q / 3, 5 * (q % 3))
    } else {
        let q = q - 18;
        (q / 9, OFFDIAG[q % 9])
    }
}

/// Space-to-depth reshape of the fused 48×48×8 map into the grid.
pub fn fused_to_grid(fused: &Tensor) -> Result<BilateralGrid> {
    if fused.shape() != (GRID_INPUT, GRID_INPUT, FUSE_CHANNELS) {
        return Err(Error::Dimension(format!(
            "fused map must be {GRID_INPUT}x{GRID_INPUT}x{FUSE_CHANNELS}, got {:?}",
            fused.shape()
        )));
    }
    let mut grid = BilateralGrid::constant(0.0);
    for y in 0..GRID_INPUT {
        for x in 0..GRID_INPUT {
            let b = (y % BLOCK) * BLOCK + x % BLOCK;
            for ch in 0..FUSE_CHANNELS {
                let (k, c) = fused_slot(ch, b);
                grid.data[BilateralGrid::index(y / BLOCK, x / BLOCK, k, c)] = fused.at(y, x, ch);
            }
        }
    }
    Ok(grid)
}

/// Inverse of [`fused_to_grid`].
pub fn grid_to_fused(grid: &BilateralGrid) -> Tensor {
    Tensor::from_fn(GRID_INPUT, GRID_INPUT, FUSE_CHANNELS, |y, x, ch| {
        let (k, c) = fused_slot(ch, (y % BLOCK) * BLOCK + x % BLOCK);
        grid.at(y / BLOCK, x / BLOCK, k, c)
    })
}

pub fn hfd_forward(l_hat: &Tensor, p: &HfdParams, cfg: HfdConfig) -> Result<BilateralGrid> {
    hfd_forward_traced(l_hat, p, cfg).map(|(g, _)| g)
}

pub fn hfd_forward_traced(l_hat: &Tensor, p: &HfdParams, cfg: HfdConfig) -> Result<(BilateralGrid, HfdCache)> {
    if l_hat.shape() != (GRID_INPUT, GRID_INPUT, 3) {
        return Err(Error::Dimension(format!(
            "grid predictor input must be {GRID_INPUT}x{GRID_INPUT}x3, got {:?}",
            l_hat.shape()
        )));
    }
    if cfg.cfd_count == 0 {
        return Err(Error::Config("cfd_count must be at least 1".into()));
    }
    let mut f = p.stem.forward(l_hat)?;
    let mut sum = Tensor::zeros(GRID_INPUT, GRID_INPUT, HFD_WIDTH);
    let mut stages = Vec::with_capacity(cfg.cfd_count);
    for _ in 0..cfg.cfd_count {
        let stat = cfd_stat(&f, cfg.pooling);
        let ctx = mul_channels(&f, &stat)?;
        let res = f.sub(&ctx)?;
        let refined_pre = p.refine.forward(&ctx)?;
        sum.add_assign(&relu(&refined_pre))?;
        let sfe = sfe_forward_traced(&res, &p.sfe)?;
        let next = sfe.out.clone();
        stages.push(HfdStage {
            input: f,
            stat,
            ctx,
            refined_pre,
            sfe,
        });
        f = next;
    }
    sum.add_assign(&f)?;
    let fused = p.fuse.forward(&sum)?;
    let grid = fused_to_grid(&fused)?;
    Ok((
        grid,
        HfdCache {
            input: l_hat.clone(),
            stages,
            sum,
        },
    ))
}

/// Backward of [`hfd_forward`]; returns the gradient w.r.t. the 48×48 input.
pub fn hfd_backward(
    cache: &HfdCache,
    p: &HfdParams,
    cfg: HfdConfig,
    dgrid: &BilateralGrid,
    grad: &mut HfdParams,
) -> Result<Tensor> {
    let dfused = grid_to_fused(dgrid);
    let dsum = p.fuse.backward(&cache.sum, &dfused, &mut grad.fuse)?;
    let mut df = dsum.clone();
    for st in cache.stages.iter().rev() {
        let dpre = relu_backward(&st.refined_pre, &dsum)?;
        let dctx = p.refine.backward(&st.ctx, &dpre, &mut grad.refine)?;
        let dres = sfe_backward(&st.sfe, &p.sfe, &df, &mut grad.sfe)?;
        df = cfd_backward(&st.input, &st.stat, cfg.pooling, &dctx, &dres)?;
    }
    p.stem.backward(&cache.input, &df, &mut grad.stem)
}

fn axis_taps(pos: f32, n: usize) -> (usize, f32) {
    let p = pos.clamp(0.0, (n - 1) as f32);
    let i0 = (p.floor() as usize).min(n - 2);
    (i0, p - i0 as f32)
}

/// Continuous grid coordinates `(u, v, w)` of pixel `(y, x)` with guidance `g`
/// on an `h × w` map. Cell centres sit at integer coordinates; values are
/// clamped to the grid extent.
pub fn slice_coords(y: usize, x: usize, g: f32, h: usize, w: usize) -> (f32, f32, f32) {
    let u = (GRID_H as f32 * (y as f32 + 0.5) / h as f32 - 0.5).clamp(0.0, (GRID_H - 1) as f32);
    let v = (GRID_W as f32 * (x as f32 + 0.5) / w as f32 - 0.5).clamp(0.0, (GRID_W - 1) as f32);
    let d = (GRID_D as f32 * g - 0.5).clamp(0.0, (GRID_D - 1) as f32);
    (u, v, d)
}

/// Tent interpolation kernel `max(1 − |t|, 0)`.
pub fn tent(t: f32) -> f32 {
    (1.0 - t.abs()).max(0.0)
}

fn check_guidance(guide: &Tensor) -> Result<()> {
    if guide.channels() != 1 {
        return Err(Error::Dimension(format!(
            "guidance must have 1 channel, got {}",
            guide.channels()
        )));
    }
    if let Some(v) = guide.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Contract(format!("guidance value {v} outside [0, 1]")));
    }
    Ok(())
}

/// Trilinear lookup of the grid at every pixel of the guidance map.
pub fn slice(grid: &BilateralGrid, guide: &Tensor) -> Result<Tensor> {
    check_guidance(guide)?;
    let (h, w) = (guide.height(), guide.width());
    let mut out = Tensor::zeros(h, w, COEFFS);
    out.data_mut()
        .par_chunks_mut(w * COEFFS)
        .enumerate()
        .for_each(|(y, row)| {
            for x in 0..w {
                let (u, v, d) = slice_coords(y, x, guide.at(y, x, 0), h, w);
                let (i0, fu) = axis_taps(u, GRID_H);
                let (j0, fv) = axis_taps(v, GRID_W);
                let (k0, fd) = axis_taps(d, GRID_D);
                let o = &mut row[x * COEFFS..(x + 1) * COEFFS];
                for (di, wi) in [(0, 1.0 - fu), (1, fu)] {
                    for (dj, wj) in [(0, 1.0 - fv), (1, fv)] {
                        for (dk, wk) in [(0, 1.0 - fd), (1, fd)] {
                            let wt = wi * wj * wk;
                            let base = BilateralGrid::index(i0 + di, j0 + dj, k0 + dk, 0);
                            for (ov, &gv) in o.iter_mut().zip(&grid.data[base..base + COEFFS]) {
                                *ov += wt * gv;
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Backward of [`slice`]: returns `(dgrid, dguide)`.
pub fn slice_backward(grid: &BilateralGrid, guide: &Tensor, dcoeff: &Tensor) -> Result<(BilateralGrid, Tensor)> {
    check_guidance(guide)?;
    let (h, w) = (guide.height(), guide.width());
    if dcoeff.shape() != (h, w, COEFFS) {
        return Err(Error::Dimension(format!(
            "slice gradient has shape {:?}, expected {:?}",
            dcoeff.shape(),
            (h, w, COEFFS)
        )));
    }
    let mut dgrid = vec![0.0f64; GRID_LEN];
    let mut dguide = Tensor::zeros(h, w, 1);
    for y in 0..h {
        for x in 0..w {
            let g = guide.at(y, x, 0);
            let (u, v, d) = slice_coords(y, x, g, h, w);
            let (i0, fu) = axis_taps(u, GRID_H);
            let (j0, fv) = axis_taps(v, GRID_W);
            let (k0, fd) = axis_taps(d, GRID_D);
            let dc = dcoeff.pixel(y, x);
            let raw = GRID_D as f32 * g - 0.5;
            let inside = raw > 0.0 && raw < (GRID_D - 1) as f32;
            let mut dd = 0.0f32;
            for (di, wi) in [(0, 1.0 - fu), (1, fu)] {
                for (dj, wj) in [(0, 1.0 - fv), (1, fv)] {
                    let wij = wi * wj;
                    let b0 = BilateralGrid::index(i0 + di, j0 + dj, k0, 0);
                    let b1 = b0 + COEFFS;
                    for c in 0..COEFFS {
                        dgrid[b0 + c] += (wij * (1.0 - fd) * dc[c]) as f64;
                        dgrid[b1 + c] += (wij * fd * dc[c]) as f64;
                        if inside {
                            dd += wij * (grid.data[b1 + c] - grid.data[b0 + c]) * dc[c];
                        }
                    }
                }
            }
            dguide.set(y, x, 0, if inside { dd * GRID_D as f32 } else { 0.0 });
        }
    }
    let dgrid = BilateralGrid {
        data: dgrid.into_iter().map(|v| v as f32).collect(),
    };
    Ok((dgrid, dguide))
}

/// Per-pixel `A · [r, g, b, 1]ᵀ` with `A` read from the 12 coefficients.
pub fn apply_affine(l: &Tensor, coeff: &Tensor) -> Result<Tensor> {
    check_affine(l, coeff)?;
    let (h, w, _) = l.shape();
    let mut out = Tensor::zeros(h, w, 3);
    out.data_mut()
        .par_chunks_mut(3)
        .enumerate()
        .for_each(|(p, o)| {
            let x = &l.data()[p * 3..p * 3 + 3];
            let a = &coeff.data()[p * COEFFS..(p + 1) * COEFFS];
            for (r, ov) in o.iter_mut().enumerate() {
                let m = &a[r * 4..r * 4 + 4];
                *ov = m[0] * x[0] + m[1] * x[1] + m[2] * x[2] + m[3];
            }
        });
    Ok(out)
}

fn check_affine(l: &Tensor, coeff: &Tensor) -> Result<()> {
    if l.channels() != 3
        || coeff.channels() != COEFFS
        || (l.height(), l.width()) != (coeff.height(), coeff.width())
    {
        return Err(Error::Dimension(format!(
            "affine application of {:?} coefficients to {:?} image",
            coeff.shape(),
            l.shape()
        )));
    }
    Ok(())
}

/// Backward of [`apply_affine`]: returns `(dl, dcoeff)`.
pub fn apply_affine_backward(l: &Tensor, coeff: &Tensor, dout: &Tensor) -> Result<(Tensor, Tensor)> {
    check_affine(l, coeff)?;
    l.check_same_shape(dout, "apply_affine backward")?;
    let (h, w, _) = l.shape();
    let mut dl = Tensor::zeros(h, w, 3);
    let mut dc = Tensor::zeros(h, w, COEFFS);
    dl.data_mut()
        .par_chunks_mut(3)
        .zip(dc.data_mut().par_chunks_mut(COEFFS))
        .enumerate()
        .for_each(|(p, (dlp, dcp))| {
            let x = &l.data()[p * 3..p * 3 + 3];
            let a = &coeff.data()[p * COEFFS..(p + 1) * COEFFS];
            let g = &dout.data()[p * 3..p * 3 + 3];
            for r in 0..3 {
                for k in 0..3 {
                    dlp[k] += a[r * 4 + k] * g[r];
                    dcp[r * 4 + k] = x[k] * g[r];
                }
                dcp[r * 4 + 3] = g[r];
            }
        });
    Ok((dl, dc))
}

/// Everything the low-frequency path computes, kept for backward and for
/// inspection.
#[derive(Clone, Debug)]
pub struct LowFreqTrace {
    pub corrected: Tensor,
    pub guidance: Tensor,
    pub grid: BilateralGrid,
    pub coeffs: Tensor,
    input: Tensor,
    guide_cache: SfeCache,
    hfd_cache: HfdCache,
}

impl LowFreqTrace {
    /// Inputs of every ReLU, keyed by the bias tensor that shifts them.
    pub(crate) fn relu_inputs(&self) -> Vec<(&'static str, &Tensor)> {
        let mut v = vec![("guidance.conv_a.bias", &self.guide_cache.a)];
        for st in &self.hfd_cache.stages {
            v.push(("hfd.refine.bias", &st.refined_pre));
            v.push(("hfd.sfe.conv_a.bias", &st.sfe.a));
        }
        v
    }
}

/// Corrects `L_n`: guidance map, grid prediction at 48×48, slicing, affine.
pub fn correct_low_freq(
    ln: &Tensor,
    guidance_p: &SfeParams,
    hfd_p: &HfdParams,
    cfg: HfdConfig,
) -> Result<(Tensor, Tensor, BilateralGrid)> {
    let t = correct_low_freq_traced(ln, guidance_p, hfd_p, cfg)?;
    Ok((t.corrected, t.guidance, t.grid))
}

pub fn correct_low_freq_traced(
    ln: &Tensor,
    guidance_p: &SfeParams,
    hfd_p: &HfdParams,
    cfg: HfdConfig,
) -> Result<LowFreqTrace> {
    if ln.channels() != 3 {
        return Err(Error::Dimension(format!(
            "low-frequency layer must have 3 channels, got {}",
            ln.channels()
        )));
    }
    if guidance_p.head.is_none() {
        return Err(Error::Contract("guidance extractor needs a head".into()));
    }
    let guide_cache = sfe_forward_traced(ln, guidance_p)?;
    let guidance = guide_cache.out.clone();
    let l_hat = resize_bilinear(ln, GRID_INPUT, GRID_INPUT)?;
    let (grid, hfd_cache) = hfd_forward_traced(&l_hat, hfd_p, cfg)?;
    let coeffs = slice(&grid, &guidance)?;
    let corrected = apply_affine(ln, &coeffs)?;
    Ok(LowFreqTrace {
        corrected,
        guidance,
        grid,
        coeffs,
        input: ln.clone(),
        guide_cache,
        hfd_cache,
    })
}

/// Backward of [`correct_low_freq`]; returns the gradient w.r.t. `L_n`.
pub fn correct_low_freq_backward(
    trace: &LowFreqTrace,
    guidance_p: &SfeParams,
    hfd_p: &HfdParams,
    cfg: HfdConfig,
    dcorrected: &Tensor,
    grad_guidance: &mut SfeParams,
    grad_hfd: &mut HfdParams,
) -> Result<Tensor> {
    let (mut dln, dcoeff) = apply_affine_backward(&trace.input, &trace.coeffs, dcorrected)?;
    let (dgrid, dguide) = slice_backward(&trace.grid, &trace.guidance, &dcoeff)?;
    let dl_hat = hfd_backward(&trace.hfd_cache, hfd_p, cfg, &dgrid, grad_hfd)?;
    dln.add_assign(&resize_bilinear_backward(&dl_hat, trace.input.height(), trace.input.width()))?;
    dln.add_assign(&sfe_backward(&trace.guide_cache, guidance_p, &dguide, grad_guidance)?)?;
    Ok(dln)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{self, GradCheckOptions};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize, lo: f32, hi: f32) -> Tensor {
        Tensor::from_fn(h, w, c, |_, _, _| rng.gen_range(lo..hi))
    }

    fn randomize<P: Params>(p: &mut P, rng: &mut ChaCha8Rng, scale: f32) {
        for t in p.tensors_mut() {
            let fan = t.dims.get(1).copied().unwrap_or(1).max(1) as f32;
            t.data.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0) * scale / fan.sqrt());
        }
    }

    fn dot(a: &Tensor, b: &Tensor) -> f64 {
        a.data().iter().zip(b.data()).map(|(&x, &y)| x as f64 * y as f64).sum()
    }

    fn brute_slice(grid: &BilateralGrid, guide: &Tensor) -> Tensor {
        let (h, w) = (guide.height(), guide.width());
        Tensor::from_fn(h, w, COEFFS, |y, x, c| {
            let (u, v, d) = slice_coords(y, x, guide.at(y, x, 0), h, w);
            let mut s = 0.0f64;
            for i in 0..GRID_H {
                for j in 0..GRID_W {
                    for k in 0..GRID_D {
                        let wt = tent(u - i as f32) * tent(v - j as f32) * tent(d - k as f32);
                        s += wt as f64 * grid.at(i, j, k, c) as f64;
                    }
                }
            }
            s as f32
        })
    }

    #[test]
    fn grid_element_count() {
        assert_eq!(GRID_INPUT * GRID_INPUT * FUSE_CHANNELS, GRID_LEN);
        assert_eq!(GRID_LEN, 18_432);
    }

    #[test]
    fn fused_slots_are_a_bijection() {
        let mut seen = vec![false; GRID_D * COEFFS];
        for ch in 0..FUSE_CHANNELS {
            for b in 0..9 {
                let (k, c) = fused_slot(ch, b);
                assert!(!seen[k * COEFFS + c]);
                seen[k * COEFFS + c] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = rand_tensor(&mut rng, 48, 48, 8, -1.0, 1.0);
        assert_eq!(grid_to_fused(&fused_to_grid(&f).unwrap()), f);
    }

    #[test]
    fn sfe_examples() {
        let x = Tensor::zeros(4, 4, 3);
        let p = SfeParams::zeros(3, 8, false);
        assert!(sfe_forward(&x, &p).unwrap().data().iter().all(|&v| v == 0.0));
        let p = SfeParams::guidance_zeros();
        assert!(sfe_forward(&x, &p).unwrap().data().iter().all(|&v| v == 0.5));

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = SfeParams::guidance_zeros();
        randomize(&mut p, &mut rng, 3.0);
        let c = Tensor::filled(5, 6, 3, 0.3);
        let y = sfe_forward(&c, &p).unwrap();
        assert!(y.data().iter().all(|&v| v == y.data()[0]));
        let r = rand_tensor(&mut rng, 7, 7, 3, 0.0, 1.0);
        assert!(sfe_forward(&r, &p).unwrap().data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(p.param_count(), 113);
    }

    #[test]
    fn cfd_examples() {
        let x = Tensor::filled(3, 3, 2, 0.4);
        let (ctx, res) = cfd_forward(&x).unwrap();
        assert!(ctx.data().iter().all(|&v| (v - 0.16).abs() < 1e-6));
        assert!(res.data().iter().all(|&v| (v - 0.24).abs() < 1e-6));

        let (ctx, res) = cfd_forward(&Tensor::zeros(3, 3, 2)).unwrap();
        assert!(ctx.max_abs() == 0.0 && res.max_abs() == 0.0);
    }

    #[test]
    fn hfd_zero_weights_give_zero_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let l = rand_tensor(&mut rng, 48, 48, 3, 0.0, 1.0);
        let g = hfd_forward(&l, &HfdParams::zeros(), HfdConfig::default()).unwrap();
        assert!(g.data.iter().all(|&v| v == 0.0));
        let g = hfd_forward(&l, &HfdParams::identity(), HfdConfig::default()).unwrap();
        assert_eq!(g, BilateralGrid::identity());
        assert!(hfd_forward(&Tensor::zeros(32, 48, 3), &HfdParams::zeros(), HfdConfig::default()).is_err());
    }

    #[test]
    fn hfd_parameter_count_independent_of_stages() {
        assert_eq!(HfdParams::zeros().param_count(), 160 + 1640 + 3280 + 328);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = HfdParams::zeros();
        randomize(&mut p, &mut rng, 1.0);
        let l = rand_tensor(&mut rng, 48, 48, 3, 0.0, 1.0);
        for k in 1..=5 {
            let cfg = HfdConfig {
                cfd_count: k,
                pooling: PoolingMode::GapGsp,
            };
            assert_eq!(hfd_forward(&l, &p, cfg).unwrap().data.len(), GRID_LEN);
        }
    }

    #[test]
    fn tent_values() {
        assert_eq!(tent(0.0), 1.0);
        assert_eq!(tent(1.0), 0.0);
        assert_eq!(tent(-1.0), 0.0);
        assert_eq!(tent(0.5), 0.5);
    }

    #[test]
    fn constant_grid_slices_to_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = rand_tensor(&mut rng, 13, 21, 1, 0.0, 1.0);
        let b = slice(&BilateralGrid::constant(0.7), &g).unwrap();
        assert!(b.data().iter().all(|&v| (v - 0.7).abs() < 1e-6));
    }

    #[test]
    fn guidance_out_of_range_is_contract_error() {
        let g = Tensor::filled(4, 4, 1, 1.2);
        assert!(matches!(slice(&BilateralGrid::identity(), &g), Err(Error::Contract(_))));
    }

    #[test]
    fn slice_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..3 {
            let grid = BilateralGrid {
                data: (0..GRID_LEN).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            };
            let g = rand_tensor(&mut rng, 20, 17, 1, 0.0, 1.0);
            let fast = slice(&grid, &g).unwrap();
            assert!(fast.max_abs_diff(&brute_slice(&grid, &g)).unwrap() < 1e-6);
        }
    }

    #[test]
    fn depth_weights_partition_unity_everywhere() {
        // Clamped coordinates keep every guidance value inside the grid.
        for step in 0..=1000 {
            let g = step as f32 / 1000.0;
            let (_, _, d) = slice_coords(0, 0, g, 1, 1);
            let total: f32 = (0..GRID_D).map(|k| tent(d - k as f32)).sum();
            assert!((total - 1.0).abs() < 1e-6, "g = {g}");
        }
    }

    #[test]
    fn affine_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let l = rand_tensor(&mut rng, 6, 5, 3, 0.0, 1.0);
        let id = slice(&BilateralGrid::identity(), &Tensor::filled(6, 5, 1, 0.3)).unwrap();
        assert!(apply_affine(&l, &id).unwrap().max_abs_diff(&l).unwrap() < 1e-6);

        let gray = Tensor::from_fn(6, 5, COEFFS, |_, _, c| if c % 4 == 3 { 0.5 } else { 0.0 });
        assert!(apply_affine(&l, &gray).unwrap().data().iter().all(|&v| v == 0.5));

        let coeff = rand_tensor(&mut rng, 6, 5, COEFFS, -1.0, 1.0);
        let out = apply_affine(&l, &coeff).unwrap();
        for y in 0..6 {
            for x in 0..5 {
                for r in 0..3 {
                    let mut s = coeff.at(y, x, r * 4 + 3) as f64;
                    for k in 0..3 {
                        s += coeff.at(y, x, r * 4 + k) as f64 * l.at(y, x, k) as f64;
                    }
                    assert!((out.at(y, x, r) as f64 - s).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn affine_bias_raises_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let l = rand_tensor(&mut rng, 8, 8, 3, 0.0, 1.0);
        let coeff = rand_tensor(&mut rng, 8, 8, COEFFS, -1.0, 1.0);
        let delta = Tensor::from_fn(8, 8, COEFFS, |_, _, c| if c % 4 == 3 { 0.01 } else { 0.0 });
        let bumped = coeff.add(&delta).unwrap();
        assert!(apply_affine(&l, &bumped).unwrap().mean() > apply_affine(&l, &coeff).unwrap().mean());
    }

    #[derive(Clone)]
    struct LowFreq {
        guide: SfeParams,
        hfd: HfdParams,
    }

    impl Params for LowFreq {
        fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
            self.guide.visit(&join(prefix, "guidance"), out);
            self.hfd.visit(&join(prefix, "hfd"), out);
        }
        fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
            self.guide.visit_mut(&join(prefix, "guidance"), out);
            self.hfd.visit_mut(&join(prefix, "hfd"), out);
        }
    }

    /// Fan-in scaled weights; biases bounded away from zero so few ReLU
    /// pre-activations sit within a perturbation of their kink.
    fn randomize_with_margin<P: Params>(p: &mut P, rng: &mut ChaCha8Rng) {
        for t in p.tensors_mut() {
            if t.dims.len() == 1 {
                t.data.iter_mut().for_each(|v| {
                    let m: f32 = rng.gen_range(0.5..1.0);
                    *v = if rng.gen_bool(0.5) { m } else { -m };
                });
            } else {
                let fan = t.dims[1] as f32;
                t.data.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0) / fan.sqrt());
            }
        }
    }

    #[test]
    fn low_freq_gradients_match_finite_differences() {
        for (seed, pooling) in [(10u64, PoolingMode::GapGsp), (11, PoolingMode::Gap), (12, PoolingMode::Gsp)] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cfg = HfdConfig { cfd_count: 2, pooling };
            let mut p = LowFreq {
                guide: SfeParams::guidance_zeros(),
                hfd: HfdParams::zeros(),
            };
            randomize_with_margin(&mut p, &mut rng);
            // Guidance near the middle of a depth bin; grid near identity.
            p.guide.head.as_mut().unwrap().bias[0] = 0.0;
            p.hfd.fuse.bias[0] += 1.0;
            p.hfd.fuse.bias[1] += 1.0;
            let ln = rand_tensor(&mut rng, 32, 24, 3, 0.0, 1.0);
            let r = rand_tensor(&mut rng, 32, 24, 3, 0.5, 1.0);

            let trace = correct_low_freq_traced(&ln, &p.guide, &p.hfd, cfg).unwrap();
            let mut grad = p.clone();
            grad.zero();
            correct_low_freq_backward(&trace, &p.guide, &p.hfd, cfg, &r, &mut grad.guide, &mut grad.hfd).unwrap();

            let loss = |q: &LowFreq| dot(&correct_low_freq(&ln, &q.guide, &q.hfd, cfg).unwrap().0, &r);
            let opts = GradCheckOptions { seed, max_entries: 24, ..Default::default() };
            let report = gradcheck::check(&p, &grad, &opts, loss);
            for t in &report {
                assert!(t.rel_err < 1e-3, "{} rel err {} ({:?})", t.name, t.rel_err, pooling);
            }

        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn cfd_parts_sum_to_input(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = rand_tensor(&mut rng, 6, 7, 5, -1.0, 1.0);
            for mode in PoolingMode::ALL {
                let (ctx, res) = cfd_forward_mode(&x, mode).unwrap();
                prop_assert!(ctx.add(&res).unwrap().max_abs_diff(&x).unwrap() < 1e-6);
            }
        }

        #[test]
        fn slice_is_linear(seed in 0u64..10_000, a in -1.0f32..1.0, b in -1.0f32..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g1 = BilateralGrid { data: (0..GRID_LEN).map(|_| rng.gen_range(-1.0..1.0)).collect() };
            let g2 = BilateralGrid { data: (0..GRID_LEN).map(|_| rng.gen_range(-1.0..1.0)).collect() };
            let mix = BilateralGrid { data: g1.data.iter().zip(&g2.data).map(|(x, y)| a * x + b * y).collect() };
            let guide = rand_tensor(&mut rng, 9, 11, 1, 0.0, 1.0);
            let want = slice(&g1, &guide).unwrap().scale(a).add(&slice(&g2, &guide).unwrap().scale(b)).unwrap();
            prop_assert!(slice(&mix, &guide).unwrap().max_abs_diff(&want).unwrap() <= 1e-6);
        }

        #[test]
        fn identity_coefficients_are_identity(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let l = rand_tensor(&mut rng, 5, 9, 3, 0.0, 1.0);
            let guide = rand_tensor(&mut rng, 5, 9, 1, 0.0, 1.0);
            let c = slice(&BilateralGrid::identity(), &guide).unwrap();
            prop_assert!(apply_affine(&l, &c).unwrap().max_abs_diff(&l).unwrap() < 1e-6);
        }

        #[test]
        fn slice_backward_is_adjoint_in_grid(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let grid = BilateralGrid { data: (0..GRID_LEN).map(|_| rng.gen_range(-1.0..1.0)).collect() };
            let guide = rand_tensor(&mut rng, 7, 6, 1, 0.0, 1.0);
            let dc = rand_tensor(&mut rng, 7, 6, COEFFS, -1.0, 1.0);
            let (dg, _) = slice_backward(&grid, &guide, &dc).unwrap();
            let lhs = dot(&slice(&grid, &guide).unwrap(), &dc);
            let rhs: f64 = grid.data.iter().zip(&dg.data).map(|(&a, &b)| a as f64 * b as f64).sum();
            prop_assert!((lhs - rhs).abs() < 1e-4 * lhs.abs().max(1.0));
        }
    }
}
