//! Laplacian pyramids: the fixed Gaussian form and the learnable 3×3 form.
//!
//! Inputs are reflect-padded on the bottom/right edges to a multiple of
//! `2^(n-1)`; the original extent is stored on the [`Pyramid`] and cropped off
//! again by the reconstruction functions.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{
    reflect_index, resize_bilinear, resize_bilinear_backward, Conv3x3, Matrix, Padding,
    Tensor,
};

pub const MIN_LEVELS: usize = 2;
pub const MAX_LEVELS: usize = 5;

/// High-frequency layers `H_1..H_{n-1}` (finest first) plus the low layer `L_n`.
#[derive(Clone, Debug, PartialEq)]
pub struct Pyramid {
    pub highs: Vec<Tensor>,
    pub low: Tensor,
    /// Extent of the image before padding.
    pub height: usize,
    pub width: usize,
}

impl Pyramid {
    pub fn levels(&self) -> usize {
        self.highs.len() + 1
    }

    /// Extent after padding, i.e. the shape of `H_1`.
    pub fn padded_dims(&self) -> (usize, usize) {
        match self.highs.first() {
            Some(h) => (h.height(), h.width()),
            None => (self.low.height(), self.low.width()),
        }
    }

    fn check_shapes(&self) -> Result<()> {
        let n = self.levels();
        if n < MIN_LEVELS {
            return Err(Error::Dimension("pyramid has no high-frequency layers".into()));
        }
        let (ph, pw) = self.padded_dims();
        for (i, h) in self.highs.iter().enumerate() {
            let want = (ph >> i, pw >> i, 3);
            if h.shape() != want {
                return Err(Error::Dimension(format!(
                    "high layer {} has shape {:?}, expected {:?}",
                    i + 1,
                    h.shape(),
                    want
                )));
            }
        }
        let want = (ph >> (n - 1), pw >> (n - 1), 3);
        if self.low.shape() != want {
            return Err(Error::Dimension(format!(
                "low layer has shape {:?}, expected {:?}",
                self.low.shape(),
                want
            )));
        }
        if self.height > ph || self.width > pw || ph % (1 << (n - 1)) != 0 || pw % (1 << (n - 1)) != 0 {
            return Err(Error::Dimension(format!(
                "recorded extent {}x{} inconsistent with padded extent {ph}x{pw}",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

/// The 5×5 binomial kernel, `outer([1,4,6,4,1]) / 256`.
pub fn gaussian_kernel() -> Matrix {
    const TAPS: [f32; 5] = [1.0, 4.0, 6.0, 4.0, 1.0];
    let mut data = Vec::with_capacity(25);
    for a in TAPS {
        for b in TAPS {
            data.push(a * b / 256.0);
        }
    }
    Matrix { rows: 5, cols: 5, data }
}

fn check_input(img: &Tensor, n: usize) -> Result<()> {
    if !(MIN_LEVELS..=MAX_LEVELS).contains(&n) {
        return Err(Error::Config(format!(
            "pyramid levels must be in {MIN_LEVELS}..={MAX_LEVELS}, got {n}"
        )));
    }
    if img.channels() != 3 {
        return Err(Error::Dimension(format!(
            "pyramid input must have 3 channels, got {}",
            img.channels()
        )));
    }
    let m = 1usize << (n - 1);
    if img.height() < m || img.width() < m {
        return Err(Error::Size(format!(
            "{}x{} image is smaller than {m}x{m} required for {n} levels",
            img.height(),
            img.width()
        )));
    }
    Ok(())
}

fn round_up(v: usize, m: usize) -> usize {
    v.div_ceil(m) * m
}

/// Reflect-pads the bottom/right edges up to `h × w`.
fn pad_to(x: &Tensor, h: usize, w: usize) -> Tensor {
    if x.height() == h && x.width() == w {
        return x.clone();
    }
    let (xh, xw, c) = x.shape();
    Tensor::from_fn(h, w, c, |y, xx, k| {
        x.at(reflect_index(y as isize, xh), reflect_index(xx as isize, xw), k)
    })
}

/// Adjoint of [`pad_to`].
fn pad_to_backward(d: &Tensor, h: usize, w: usize) -> Tensor {
    if d.height() == h && d.width() == w {
        return d.clone();
    }
    let c = d.channels();
    let mut out = Tensor::zeros(h, w, c);
    for y in 0..d.height() {
        let sy = reflect_index(y as isize, h);
        for x in 0..d.width() {
            let sx = reflect_index(x as isize, w);
            for k in 0..c {
                let v = out.at(sy, sx, k) + d.at(y, x, k);
                out.set(sy, sx, k, v);
            }
        }
    }
    out
}

/// Depthwise 5×5 Gaussian filter with reflect padding 2, `stride` 1 or 2,
/// output scaled by `gain`.
fn gauss5(x: &Tensor, stride: usize, gain: f32) -> Tensor {
    let k = gaussian_kernel();
    let kd: Vec<f32> = k.data.iter().map(|v| v * gain).collect();
    let (h, w, c) = x.shape();
    let xp = crate::tensor::pad(x, 2, Padding::Reflect);
    let (oh, ow) = ((h - 1) / stride + 1, (w - 1) / stride + 1);
    let mut out = Tensor::zeros(oh, ow, c);
    let pw = xp.width();
    let src = xp.data();
    out.data_mut()
        .par_chunks_mut(ow * c)
        .enumerate()
        .for_each(|(oy, row)| {
            for ox in 0..ow {
                let o = &mut row[ox * c..(ox + 1) * c];
                for ky in 0..5 {
                    let base = ((oy * stride + ky) * pw + ox * stride) * c;
                    for kx in 0..5 {
                        let kv = kd[ky * 5 + kx];
                        let s = &src[base + kx * c..base + (kx + 1) * c];
                        for (ov, &sv) in o.iter_mut().zip(s) {
                            *ov += kv * sv;
                        }
                    }
                }
            }
        });
    out
}

/// Adjoint of [`gauss5`] for an input of `h × w`.
fn gauss5_backward(dy: &Tensor, h: usize, w: usize, stride: usize, gain: f32) -> Tensor {
    let k = gaussian_kernel();
    let c = dy.channels();
    let mut dxp = Tensor::zeros(h + 4, w + 4, c);
    let pw = w + 4;
    let buf = dxp.data_mut();
    for oy in 0..dy.height() {
        for ox in 0..dy.width() {
            let g = dy.pixel(oy, ox);
            for ky in 0..5 {
                for kx in 0..5 {
                    let kv = k.data[ky * 5 + kx] * gain;
                    let base = ((oy * stride + ky) * pw + ox * stride + kx) * c;
                    for (d, &gv) in buf[base..base + c].iter_mut().zip(g) {
                        *d += kv * gv;
                    }
                }
            }
        }
    }
    crate::tensor::pad_backward(&dxp, h, w, 2, Padding::Reflect)
}

/// Gaussian blur followed by dropping every other row and column.
pub fn pyr_down(x: &Tensor) -> Tensor {
    gauss5(x, 2, 1.0)
}

/// Zero insertion to `2h × 2w` followed by the Gaussian filter with gain 4.
pub fn pyr_up(x: &Tensor) -> Tensor {
    gauss5(&zero_insert(x), 1, 4.0)
}

fn zero_insert(x: &Tensor) -> Tensor {
    let (h, w, c) = x.shape();
    let mut z = Tensor::zeros(2 * h, 2 * w, c);
    for y in 0..h {
        for xx in 0..w {
            let dst = z.index(2 * y, 2 * xx, 0);
            z.data_mut()[dst..dst + c].copy_from_slice(x.pixel(y, xx));
        }
    }
    z
}

/// Adjoint of [`pyr_up`].
fn pyr_up_backward(dy: &Tensor) -> Tensor {
    let (h, w) = (dy.height(), dy.width());
    let dz = gauss5_backward(dy, h, w, 1, 4.0);
    Tensor::from_fn(h / 2, w / 2, dy.channels(), |y, x, k| dz.at(2 * y, 2 * x, k))
}

/// Laplacian decomposition with the fixed Gaussian kernel.
pub fn decompose_fixed(img: &Tensor, n: usize) -> Result<Pyramid> {
    check_input(img, n)?;
    let m = 1 << (n - 1);
    let mut g = pad_to(img, round_up(img.height(), m), round_up(img.width(), m));
    let mut highs = Vec::with_capacity(n - 1);
    for _ in 0..n - 1 {
        let next = pyr_down(&g);
        highs.push(g.sub(&pyr_up(&next))?);
        g = next;
    }
    Ok(Pyramid {
        highs,
        low: g,
        height: img.height(),
        width: img.width(),
    })
}

/// Inverse of [`decompose_fixed`].
pub fn reconstruct_fixed(p: &Pyramid) -> Result<Tensor> {
    p.check_shapes()?;
    let mut x = p.low.clone();
    for h in p.highs.iter().rev() {
        x = pyr_up(&x).add(h)?;
    }
    x.crop(p.height, p.width)
}

/// Gradient of [`reconstruct_fixed`]: returns `(dhighs, dlow)` for an output
/// gradient `dout` of the cropped extent. `p` only supplies shapes.
pub fn reconstruct_fixed_backward(p: &Pyramid, dout: &Tensor) -> Result<(Vec<Tensor>, Tensor)> {
    p.check_shapes()?;
    let (ph, pw) = p.padded_dims();
    let mut d = dout.uncrop(ph, pw);
    let mut dhighs = Vec::with_capacity(p.highs.len());
    for _ in 0..p.highs.len() {
        let next = pyr_up_backward(&d);
        dhighs.push(d);
        d = next;
    }
    Ok((dhighs, d))
}

/// Learnable down/up kernels of the MSLT+ pyramid, one pair per level.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidParams {
    pub down: Vec<Conv3x3>,
    pub up: Vec<Conv3x3>,
}

impl PyramidParams {
    /// All-zero parameters for `n` levels (gradient buffers).
    pub fn zeros(n: usize) -> Self {
        Self {
            down: (1..n).map(|_| Conv3x3::zeros(3, 3)).collect(),
            up: (1..n).map(|_| Conv3x3::zeros(3, 3)).collect(),
        }
    }

    /// Starts at the fixed pyramid: down = centre 3×3 of the Gaussian,
    /// renormalised and applied per channel; up = identity tap.
    pub fn gaussian_init(n: usize) -> Self {
        let g = gaussian_kernel();
        let mut centre = [0.0f32; 9];
        for ky in 0..3 {
            for kx in 0..3 {
                centre[ky * 3 + kx] = g.data[(ky + 1) * 5 + kx + 1];
            }
        }
        let total: f32 = centre.iter().sum();
        let mut down = Conv3x3::zeros(3, 3);
        let mut up = Conv3x3::zeros(3, 3);
        for c in 0..3 {
            for t in 0..9 {
                down.kernel.data[(c * 3 + c) * 9 + t] = centre[t] / total;
            }
            up.kernel.data[(c * 3 + c) * 9 + 4] = 1.0;
        }
        Self {
            down: vec![down; n - 1],
            up: vec![up; n - 1],
        }
    }

    pub fn levels(&self) -> usize {
        self.down.len() + 1
    }

    pub fn param_count(&self) -> usize {
        self.down
            .iter()
            .chain(&self.up)
            .map(Conv3x3::param_count)
            .sum()
    }

    fn check(&self, n: usize) -> Result<()> {
        if self.down.len() != n - 1 || self.up.len() != n - 1 {
            return Err(Error::Dimension(format!(
                "pyramid parameters cover {} levels, expected {n}",
                self.levels()
            )));
        }
        Ok(())
    }
}

/// Learnable upsampler: 3×3 conv at the coarse level, then bilinear ×2.
fn learn_up(x: &Tensor, conv: &Conv3x3) -> Result<Tensor> {
    let y = conv.forward(x, 1, Padding::Reflect)?;
    resize_bilinear(&y, 2 * x.height(), 2 * x.width())
}

fn learn_up_backward(x: &Tensor, conv: &Conv3x3, dy: &Tensor, grad: &mut Conv3x3) -> Result<Tensor> {
    let dmid = resize_bilinear_backward(dy, x.height(), x.width());
    conv.backward(x, 1, Padding::Reflect, &dmid, grad)
}

/// Intermediate Gaussian levels `G_1..G_n` kept for the backward pass.
#[derive(Clone, Debug)]
pub struct LearnableDecomposeCache {
    pub gaussians: Vec<Tensor>,
}

/// Laplacian decomposition with learnable kernels.
pub fn decompose_learnable(img: &Tensor, n: usize, pp: &PyramidParams) -> Result<Pyramid> {
    decompose_learnable_traced(img, n, pp).map(|(p, _)| p)
}

pub fn decompose_learnable_traced(
    img: &Tensor,
    n: usize,
    pp: &PyramidParams,
) -> Result<(Pyramid, LearnableDecomposeCache)> {
    check_input(img, n)?;
    pp.check(n)?;
    let m = 1 << (n - 1);
    let g1 = pad_to(img, round_up(img.height(), m), round_up(img.width(), m));
    let mut gaussians = vec![g1];
    let mut highs = Vec::with_capacity(n - 1);
    for i in 0..n - 1 {
        let g = &gaussians[i];
        let next = pp.down[i].forward(g, 2, Padding::Reflect)?;
        highs.push(g.sub(&learn_up(&next, &pp.up[i])?)?);
        gaussians.push(next);
    }
    let p = Pyramid {
        highs,
        low: gaussians[n - 1].clone(),
        height: img.height(),
        width: img.width(),
    };
    Ok((p, LearnableDecomposeCache { gaussians }))
}

/// Backward of [`decompose_learnable`]. Accumulates kernel gradients into
/// `grad` and returns the gradient w.r.t. the (unpadded) input image.
pub fn decompose_learnable_backward(
    cache: &LearnableDecomposeCache,
    pp: &PyramidParams,
    dhighs: &[Tensor],
    dlow: &Tensor,
    grad: &mut PyramidParams,
    input_dims: (usize, usize),
) -> Result<Tensor> {
    let n = cache.gaussians.len();
    pp.check(n)?;
    grad.check(n)?;
    if dhighs.len() != n - 1 {
        return Err(Error::Dimension("wrong number of high-layer gradients".into()));
    }
    let mut dg = dlow.clone();
    for i in (0..n - 1).rev() {
        // dG_{i+1} also receives the gradient through the upsampler of H_i.
        let neg = dhighs[i].scale(-1.0);
        let via_up = learn_up_backward(&cache.gaussians[i + 1], &pp.up[i], &neg, &mut grad.up[i])?;
        dg.add_assign(&via_up)?;
        let via_down = pp.down[i].backward(
            &cache.gaussians[i],
            2,
            Padding::Reflect,
            &dg,
            &mut grad.down[i],
        )?;
        dg = dhighs[i].add(&via_down)?;
    }
    Ok(pad_to_backward(&dg, input_dims.0, input_dims.1))
}

/// Reconstruction inputs of every learnable upsampler, coarsest first.
#[derive(Clone, Debug)]
pub struct LearnableReconstructCache {
    pub levels: Vec<Tensor>,
}

/// Inverse of [`decompose_learnable`] given the same kernels.
pub fn reconstruct_learnable(p: &Pyramid, pp: &PyramidParams) -> Result<Tensor> {
    reconstruct_learnable_traced(p, pp).map(|(o, _)| o)
}

pub fn reconstruct_learnable_traced(
    p: &Pyramid,
    pp: &PyramidParams,
) -> Result<(Tensor, LearnableReconstructCache)> {
    p.check_shapes()?;
    pp.check(p.levels())?;
    let mut x = p.low.clone();
    let mut levels = Vec::with_capacity(p.highs.len());
    for (i, h) in p.highs.iter().enumerate().rev() {
        let up = learn_up(&x, &pp.up[i])?;
        levels.push(x);
        x = up.add(h)?;
    }
    Ok((x.crop(p.height, p.width)?, LearnableReconstructCache { levels }))
}

/// Backward of [`reconstruct_learnable`]: returns `(dhighs, dlow)` and
/// accumulates upsampler gradients into `grad`.
pub fn reconstruct_learnable_backward(
    p: &Pyramid,
    cache: &LearnableReconstructCache,
    pp: &PyramidParams,
    dout: &Tensor,
    grad: &mut PyramidParams,
) -> Result<(Vec<Tensor>, Tensor)> {
    p.check_shapes()?;
    let n = p.levels();
    pp.check(n)?;
    grad.check(n)?;
    let (ph, pw) = p.padded_dims();
    let mut d = dout.uncrop(ph, pw);
    let mut dhighs = vec![Tensor::zeros(0, 0, 3); n - 1];
    for i in 0..n - 1 {
        let x = &cache.levels[n - 2 - i];
        let next = learn_up_backward(x, &pp.up[i], &d, &mut grad.up[i])?;
        dhighs[i] = d;
        d = next;
    }
    Ok((dhighs, d))
}
