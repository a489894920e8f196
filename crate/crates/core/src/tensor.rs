//! Dense `f32` image tensors and the small set of kernels the networks need.
//!
//! Layout is row-major `(height, width, channels)` with channels innermost.
//! Every differentiable kernel has a matching `*_backward` that returns the
//! input gradient and accumulates parameter gradients into caller-owned
//! buffers. Reductions accumulate in `f64` and combine per-row partials in row
//! order, so results never depend on the rayon thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// H×W×C raster of `f32` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Dimension(format!(
                "buffer of {} values cannot hold {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Self::zeros(other.height, other.width, other.channels)
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `(height, width, channels)`
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        let i = self.index(y, x, c);
        self.data[i] = v;
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let i = self.index(y, x, 0);
        &self.data[i..i + self.channels]
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape() == other.shape()
    }

    pub(crate) fn check_same_shape(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Dimension(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )))
        }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32 + Sync) -> Tensor {
        Tensor {
            data: self.data.par_iter().map(|&v| f(v)).collect(),
            ..self.empty_like()
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32 + Sync) -> Result<Tensor> {
        self.check_same_shape(other, "elementwise operands")?;
        Ok(Tensor {
            data: self
                .data
                .par_iter()
                .zip(other.data.par_iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
            ..self.empty_like()
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f32) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.check_same_shape(other, "accumulation operands")?;
        self.data
            .par_iter_mut()
            .zip(other.data.par_iter())
            .for_each(|(a, &b)| *a += b);
        Ok(())
    }

    pub fn clamp01(&self) -> Tensor {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        self.check_same_shape(other, "difference operands")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0f32, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// Concatenates tensors with identical spatial dims along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Dimension("nothing to concatenate".into()))?;
        let (h, w) = (first.height, first.width);
        if let Some(p) = parts.iter().find(|p| p.height != h || p.width != w) {
            return Err(Error::Dimension(format!(
                "concat of {h}x{w} with {}x{}",
                p.height, p.width
            )));
        }
        let channels: usize = parts.iter().map(|p| p.channels).sum();
        let mut data = Vec::with_capacity(h * w * channels);
        for px in 0..h * w {
            for p in parts {
                data.extend_from_slice(&p.data[px * p.channels..(px + 1) * p.channels]);
            }
        }
        Tensor::new(h, w, channels, data)
    }

    /// Splits channels into consecutive groups of the given sizes.
    pub fn split_channels(&self, sizes: &[usize]) -> Result<Vec<Tensor>> {
        if sizes.iter().sum::<usize>() != self.channels {
            return Err(Error::Dimension(format!(
                "cannot split {} channels into {sizes:?}",
                self.channels
            )));
        }
        let mut out: Vec<Vec<f32>> = sizes
            .iter()
            .map(|&s| Vec::with_capacity(self.pixels() * s))
            .collect();
        for px in self.data.chunks_exact(self.channels) {
            let mut off = 0;
            for (buf, &s) in out.iter_mut().zip(sizes) {
                buf.extend_from_slice(&px[off..off + s]);
                off += s;
            }
        }
        out.into_iter()
            .zip(sizes)
            .map(|(d, &s)| Tensor::new(self.height, self.width, s, d))
            .collect()
    }

    /// Top-left `height × width` window.
    pub fn crop(&self, height: usize, width: usize) -> Result<Tensor> {
        if height > self.height || width > self.width {
            return Err(Error::Dimension(format!(
                "crop {height}x{width} exceeds {}x{}",
                self.height, self.width
            )));
        }
        self.window(0, 0, height, width)
    }

    /// Copy of the window starting at `(top, left)`.
    pub fn window(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Tensor> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::Dimension(format!(
                "window {height}x{width}+{top}+{left} exceeds {}x{}",
                self.height, self.width
            )));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(height * width * c);
        for y in top..top + height {
            let start = self.index(y, left, 0);
            data.extend_from_slice(&self.data[start..start + width * c]);
        }
        Tensor::new(height, width, c, data)
    }

    /// Inverse of [`Tensor::crop`]: embeds `self` in the top-left of a zero tensor.
    pub fn uncrop(&self, height: usize, width: usize) -> Tensor {
        let c = self.channels;
        let mut out = Tensor::zeros(height, width, c);
        for y in 0..self.height {
            let src = self.index(y, 0, 0);
            let dst = out.index(y, 0, 0);
            out.data[dst..dst + self.width * c]
                .copy_from_slice(&self.data[src..src + self.width * c]);
        }
        out
    }

    fn empty_like(&self) -> Tensor {
        Tensor {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: Vec::new(),
        }
    }
}

/// Row-major `rows × cols` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "buffer of {} values cannot hold a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }
}

/// Border handling for padded convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Zero,
    /// Mirror without repeating the edge sample (`dcb|abcd|cba`).
    Reflect,
}

/// Maps a possibly out-of-range coordinate into `0..n` by mirroring.
#[inline]
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

/// Pads the spatial border by `pad` on every side.
pub fn pad(x: &Tensor, pad: usize, mode: Padding) -> Tensor {
    let (h, w, c) = x.shape();
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut out = Tensor::zeros(ph, pw, c);
    let p = pad as isize;
    out.data
        .par_chunks_mut(pw * c)
        .enumerate()
        .for_each(|(py, row)| {
            let sy = py as isize - p;
            let sy = match mode {
                Padding::Zero if sy < 0 || sy >= h as isize => return,
                Padding::Zero => sy as usize,
                Padding::Reflect => reflect_index(sy, h),
            };
            for px in 0..pw {
                let sx = px as isize - p;
                let sx = match mode {
                    Padding::Zero if sx < 0 || sx >= w as isize => continue,
                    Padding::Zero => sx as usize,
                    Padding::Reflect => reflect_index(sx, w),
                };
                let src = (sy * w + sx) * c;
                row[px * c..(px + 1) * c].copy_from_slice(&x.data[src..src + c]);
            }
        });
    out
}

/// Adjoint of [`pad`]: folds the gradient of the padded tensor back onto the
/// `h × w` interior.
pub fn pad_backward(dpadded: &Tensor, h: usize, w: usize, pad: usize, mode: Padding) -> Tensor {
    let c = dpadded.channels;
    let mut out = Tensor::zeros(h, w, c);
    let p = pad as isize;
    for py in 0..dpadded.height {
        let sy = py as isize - p;
        let sy = match mode {
            Padding::Zero if sy < 0 || sy >= h as isize => continue,
            Padding::Zero => sy as usize,
            Padding::Reflect => reflect_index(sy, h),
        };
        for px in 0..dpadded.width {
            let sx = px as isize - p;
            let sx = match mode {
                Padding::Zero if sx < 0 || sx >= w as isize => continue,
                Padding::Zero => sx as usize,
                Padding::Reflect => reflect_index(sx, w),
            };
            let src = dpadded.index(py, px, 0);
            let dst = (sy * w + sx) * c;
            for k in 0..c {
                out.data[dst + k] += dpadded.data[src + k];
            }
        }
    }
    out
}

/// Sums per-row partials into an `f64` total, in row order.
fn ordered_sum<T: Into<f64>>(partials: Vec<Vec<T>>, len: usize) -> Vec<f64> {
    let mut total = vec![0.0f64; len];
    for part in partials {
        for (t, v) in total.iter_mut().zip(part) {
            *t += v.into();
        }
    }
    total
}

/// Pixel-wise linear map: `y[h,w,:] = w · x[h,w,:] + b`.
pub fn conv1x1(x: &Tensor, w: &Matrix, b: &[f32]) -> Result<Tensor> {
    let (cin, cout) = (w.cols, w.rows);
    if x.channels != cin || b.len() != cout {
        return Err(Error::Dimension(format!(
            "conv1x1 {cin}->{cout} (bias {}) applied to {} channels",
            b.len(),
            x.channels
        )));
    }
    // Transposed weights turn the inner loop into an axpy over output channels.
    let wt = w.transpose();
    let mut out = Tensor::zeros(x.height, x.width, cout);
    let row_in = x.width * cin;
    let row_out = x.width * cout;
    out.data
        .par_chunks_mut(row_out.max(1))
        .zip(x.data.par_chunks(row_in.max(1)))
        .for_each(|(yrow, xrow)| {
            for (yp, xp) in yrow.chunks_exact_mut(cout).zip(xrow.chunks_exact(cin)) {
                yp.copy_from_slice(b);
                for (ci, &xv) in xp.iter().enumerate() {
                    let wcol = &wt.data[ci * cout..(ci + 1) * cout];
                    for (yv, &wv) in yp.iter_mut().zip(wcol) {
                        *yv += wv * xv;
                    }
                }
            }
        });
    Ok(out)
}

/// Backward of [`conv1x1`]. Accumulates into `dw`/`db`, returns `dx`.
pub fn conv1x1_backward(
    x: &Tensor,
    w: &Matrix,
    dy: &Tensor,
    dw: &mut Matrix,
    db: &mut [f32],
) -> Result<Tensor> {
    let (cin, cout) = (w.cols, w.rows);
    if x.channels != cin || dy.channels != cout || dy.pixels() != x.pixels() {
        return Err(Error::Dimension(format!(
            "conv1x1 backward {cin}->{cout} with x {:?}, dy {:?}",
            x.shape(),
            dy.shape()
        )));
    }
    let mut dx = Tensor::zeros(x.height, x.width, cin);
    let row_in = x.width * cin;
    let row_out = x.width * cout;
    let partials: Vec<Vec<f32>> = dx
        .data
        .par_chunks_mut(row_in.max(1))
        .zip(x.data.par_chunks(row_in.max(1)))
        .zip(dy.data.par_chunks(row_out.max(1)))
        .map(|((dxrow, xrow), dyrow)| {
            // [dw (cout*cin) | db (cout)]
            let mut part = vec![0.0f32; cout * cin + cout];
            for ((dxp, xp), dyp) in dxrow
                .chunks_exact_mut(cin)
                .zip(xrow.chunks_exact(cin))
                .zip(dyrow.chunks_exact(cout))
            {
                for (co, &g) in dyp.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    let wrow = &w.data[co * cin..(co + 1) * cin];
                    for (d, &wv) in dxp.iter_mut().zip(wrow) {
                        *d += wv * g;
                    }
                    let drow = &mut part[co * cin..(co + 1) * cin];
                    for (d, &xv) in drow.iter_mut().zip(xp) {
                        *d += g * xv;
                    }
                    part[cout * cin + co] += g;
                }
            }
            part
        })
        .collect();
    let total = ordered_sum(partials, cout * cin + cout);
    for (d, t) in dw.data.iter_mut().zip(&total[..cout * cin]) {
        *d += *t as f32;
    }
    for (d, t) in db.iter_mut().zip(&total[cout * cin..]) {
        *d += *t as f32;
    }
    Ok(dx)
}

/// `cout × cin × 3 × 3` cross-correlation kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel3x3 {
    pub cout: usize,
    pub cin: usize,
    /// Indexed `[co][ci][ky][kx]`.
    pub data: Vec<f32>,
}

impl Kernel3x3 {
    pub fn zeros(cout: usize, cin: usize) -> Self {
        Self {
            cout,
            cin,
            data: vec![0.0; cout * cin * 9],
        }
    }

    #[inline]
    pub fn idx(&self, co: usize, ci: usize, ky: usize, kx: usize) -> usize {
        ((co * self.cin + ci) * 3 + ky) * 3 + kx
    }

    /// Kernel whose only nonzero tap is the center, with the given channel mixing.
    pub fn center(m: &Matrix) -> Self {
        let mut k = Self::zeros(m.rows, m.cols);
        for co in 0..m.rows {
            for ci in 0..m.cols {
                let i = k.idx(co, ci, 1, 1);
                k.data[i] = m.at(co, ci);
            }
        }
        k
    }
}

/// Output extent of a 3×3 convolution with padding 1.
pub fn conv3x3_out_dim(n: usize, stride: usize) -> usize {
    (n + 2 - 3) / stride + 1
}

/// 3×3 cross-correlation with padding 1 and stride 1 or 2.
pub fn conv3x3(x: &Tensor, k: &Kernel3x3, b: &[f32], stride: usize, padding: Padding) -> Result<Tensor> {
    check_conv3x3(x, k, b, stride)?;
    let xp = pad(x, 1, padding);
    let (cin, cout) = (k.cin, k.cout);
    let oh = conv3x3_out_dim(x.height, stride);
    let ow = conv3x3_out_dim(x.width, stride);
    // [ky][kx][ci][co] so the innermost loop runs over output channels.
    let mut kt = vec![0.0f32; 9 * cin * cout];
    for co in 0..cout {
        for ci in 0..cin {
            for t in 0..9 {
                kt[(t * cin + ci) * cout + co] = k.data[(co * cin + ci) * 9 + t];
            }
        }
    }
    let mut out = Tensor::zeros(oh, ow, cout);
    out.data
        .par_chunks_mut((ow * cout).max(1))
        .enumerate()
        .for_each(|(oy, row)| {
            for (ox, yp) in row.chunks_exact_mut(cout).enumerate() {
                yp.copy_from_slice(b);
                for ky in 0..3 {
                    let sy = oy * stride + ky;
                    for kx in 0..3 {
                        let sx = ox * stride + kx;
                        let src = xp.index(sy, sx, 0);
                        let taps = &kt[(ky * 3 + kx) * cin * cout..(ky * 3 + kx + 1) * cin * cout];
                        for ci in 0..cin {
                            let xv = xp.data[src + ci];
                            for (yv, &kv) in yp.iter_mut().zip(&taps[ci * cout..(ci + 1) * cout]) {
                                *yv += kv * xv;
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

fn check_conv3x3(x: &Tensor, k: &Kernel3x3, b: &[f32], stride: usize) -> Result<()> {
    if x.channels != k.cin || b.len() != k.cout {
        return Err(Error::Dimension(format!(
            "conv3x3 {}->{} (bias {}) applied to {} channels",
            k.cin,
            k.cout,
            b.len(),
            x.channels
        )));
    }
    if stride != 1 && stride != 2 {
        return Err(Error::Contract(format!("conv3x3 stride must be 1 or 2, got {stride}")));
    }
    if x.height == 0 || x.width == 0 {
        return Err(Error::Size("conv3x3 on an empty tensor".into()));
    }
    Ok(())
}

/// Backward of [`conv3x3`]. Accumulates into `dk`/`db`, returns `dx`.
pub fn conv3x3_backward(
    x: &Tensor,
    k: &Kernel3x3,
    stride: usize,
    padding: Padding,
    dy: &Tensor,
    dk: &mut Kernel3x3,
    db: &mut [f32],
) -> Result<Tensor> {
    check_conv3x3(x, k, db, stride)?;
    let (cin, cout) = (k.cin, k.cout);
    let oh = conv3x3_out_dim(x.height, stride);
    let ow = conv3x3_out_dim(x.width, stride);
    if dy.shape() != (oh, ow, cout) {
        return Err(Error::Dimension(format!(
            "conv3x3 backward expects dy {:?}, got {:?}",
            (oh, ow, cout),
            dy.shape()
        )));
    }
    let xp = pad(x, 1, padding);
    let nk = cout * cin * 9;

    // Parameter gradients: per output row partials, summed in row order.
    let partials: Vec<Vec<f32>> = dy
        .data
        .par_chunks((ow * cout).max(1))
        .enumerate()
        .map(|(oy, dyrow)| {
            let mut part = vec![0.0f32; nk + cout];
            for (ox, g) in dyrow.chunks_exact(cout).enumerate() {
                for (co, &gv) in g.iter().enumerate() {
                    if gv == 0.0 {
                        continue;
                    }
                    part[nk + co] += gv;
                    for ci in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let xv = xp.at(oy * stride + ky, ox * stride + kx, ci);
                                part[((co * cin + ci) * 3 + ky) * 3 + kx] += gv * xv;
                            }
                        }
                    }
                }
            }
            part
        })
        .collect();
    let total = ordered_sum(partials, nk + cout);
    for (d, t) in dk.data.iter_mut().zip(&total[..nk]) {
        *d += *t as f32;
    }
    for (d, t) in db.iter_mut().zip(&total[nk..]) {
        *d += *t as f32;
    }

    // Input gradient: scatter into the padded frame, then fold the border.
    let mut dxp = Tensor::zeros(xp.height, xp.width, cin);
    for oy in 0..oh {
        for ox in 0..ow {
            let g = dy.pixel(oy, ox);
            for ky in 0..3 {
                for kx in 0..3 {
                    let dst = dxp.index(oy * stride + ky, ox * stride + kx, 0);
                    for (co, &gv) in g.iter().enumerate() {
                        if gv == 0.0 {
                            continue;
                        }
                        for ci in 0..cin {
                            dxp.data[dst + ci] += k.data[((co * cin + ci) * 3 + ky) * 3 + kx] * gv;
                        }
                    }
                }
            }
        }
    }
    Ok(pad_backward(&dxp, x.height, x.width, 1, padding))
}

/// Per-channel spatial mean.
pub fn global_avg_pool(x: &Tensor) -> Vec<f32> {
    channel_moments(x).into_iter().map(|(m, _)| m as f32).collect()
}

/// Per-channel population standard deviation (divides by N).
pub fn global_std_pool(x: &Tensor) -> Vec<f32> {
    channel_moments(x)
        .into_iter()
        .map(|(_, var)| var.sqrt() as f32)
        .collect()
}

/// Two-pass per-channel `(mean, population variance)` in `f64`.
pub fn channel_moments(x: &Tensor) -> Vec<(f64, f64)> {
    let c = x.channels;
    let n = x.pixels().max(1) as f64;
    let row = (x.width * c).max(1);
    let sums = ordered_sum(
        x.data
            .par_chunks(row)
            .map(|r| {
                let mut s = vec![0.0f64; c];
                for p in r.chunks_exact(c) {
                    for (a, &v) in s.iter_mut().zip(p) {
                        *a += v as f64;
                    }
                }
                s
            })
            .collect(),
        c,
    );
    let means: Vec<f64> = sums.iter().map(|s| s / n).collect();
    let mut sq = vec![0.0f64; c];
    for p in x.data.chunks_exact(c.max(1)) {
        for ((a, &v), m) in sq.iter_mut().zip(p).zip(&means) {
            let d = v as f64 - m;
            *a += d * d;
        }
    }
    means
        .into_iter()
        .zip(sq)
        .map(|(m, s)| (m, s / n))
        .collect()
}

/// Gradient of [`global_avg_pool`]: spreads `dmean[c] / N` over channel `c`.
pub fn global_avg_pool_backward(x: &Tensor, dmean: &[f32]) -> Tensor {
    let n = x.pixels().max(1) as f32;
    let per: Vec<f32> = dmean.iter().map(|g| g / n).collect();
    let mut dx = Tensor::zeros_like(x);
    for p in dx.data.chunks_exact_mut(x.channels.max(1)) {
        p.copy_from_slice(&per);
    }
    dx
}

/// Gradient of [`global_std_pool`]: `dstd[c] · (x − μ) / (N σ)`; zero where σ = 0.
pub fn global_std_pool_backward(x: &Tensor, dstd: &[f32]) -> Tensor {
    let c = x.channels;
    let n = x.pixels().max(1) as f64;
    let coef: Vec<(f32, f32)> = channel_moments(x)
        .into_iter()
        .zip(dstd)
        .map(|((m, var), &g)| {
            let sd = var.sqrt();
            if sd > 0.0 {
                (m as f32, (g as f64 / (n * sd)) as f32)
            } else {
                (m as f32, 0.0)
            }
        })
        .collect();
    let mut dx = Tensor::zeros_like(x);
    for (dp, xp) in dx.data.chunks_exact_mut(c.max(1)).zip(x.data.chunks_exact(c.max(1))) {
        for ((d, &v), &(m, k)) in dp.iter_mut().zip(xp).zip(&coef) {
            *d = k * (v - m);
        }
    }
    dx
}

/// Two-tap interpolation table for one axis (half-pixel centers).
#[derive(Clone, Debug)]
pub(crate) struct AxisTaps {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f32>,
}

impl AxisTaps {
    pub fn new(n_in: usize, n_out: usize) -> Self {
        let scale = n_in as f64 / n_out as f64;
        let mut lo = Vec::with_capacity(n_out);
        let mut hi = Vec::with_capacity(n_out);
        let mut frac = Vec::with_capacity(n_out);
        for o in 0..n_out {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            lo.push(i0);
            hi.push(i1);
            frac.push(if i1 == i0 { 0.0 } else { (src - i0 as f64) as f32 });
        }
        Self { lo, hi, frac }
    }
}

/// Bilinear resampling with half-pixel centers (align-corners off).
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Size(format!("resize target {out_h}x{out_w}")));
    }
    if x.height == 0 || x.width == 0 {
        return Err(Error::Size("resize of an empty tensor".into()));
    }
    let c = x.channels;
    let ty = AxisTaps::new(x.height, out_h);
    let tx = AxisTaps::new(x.width, out_w);
    let mut out = Tensor::zeros(out_h, out_w, c);
    out.data
        .par_chunks_mut((out_w * c).max(1))
        .enumerate()
        .for_each(|(oy, row)| {
            let (y0, y1, fy) = (ty.lo[oy], ty.hi[oy], ty.frac[oy]);
            for ox in 0..out_w {
                let (x0, x1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
                let a = x.index(y0, x0, 0);
                let b = x.index(y0, x1, 0);
                let cc = x.index(y1, x0, 0);
                let d = x.index(y1, x1, 0);
                for k in 0..c {
                    let top = x.data[a + k] + (x.data[b + k] - x.data[a + k]) * fx;
                    let bot = x.data[cc + k] + (x.data[d + k] - x.data[cc + k]) * fx;
                    row[ox * c + k] = top + (bot - top) * fy;
                }
            }
        });
    Ok(out)
}

/// Adjoint of [`resize_bilinear`] for an input of `in_h × in_w`.
pub fn resize_bilinear_backward(dy: &Tensor, in_h: usize, in_w: usize) -> Tensor {
    let c = dy.channels;
    let ty = AxisTaps::new(in_h, dy.height);
    let tx = AxisTaps::new(in_w, dy.width);
    let mut dx = Tensor::zeros(in_h, in_w, c);
    for oy in 0..dy.height {
        let (y0, y1, fy) = (ty.lo[oy], ty.hi[oy], ty.frac[oy]);
        for ox in 0..dy.width {
            let (x0, x1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
            let w00 = (1.0 - fy) * (1.0 - fx);
            let w01 = (1.0 - fy) * fx;
            let w10 = fy * (1.0 - fx);
            let w11 = fy * fx;
            let g = dy.index(oy, ox, 0);
            for k in 0..c {
                let gv = dy.data[g + k];
                let i = (y0 * in_w + x0) * c + k;
                dx.data[i] += w00 * gv;
                let i = (y0 * in_w + x1) * c + k;
                dx.data[i] += w01 * gv;
                let i = (y1 * in_w + x0) * c + k;
                dx.data[i] += w10 * gv;
                let i = (y1 * in_w + x1) * c + k;
                dx.data[i] += w11 * gv;
            }
        }
    }
    dx
}

pub const LEAKY_RELU_SLOPE: f32 = 0.01;

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Gradient of [`relu`] given its input.
pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Result<Tensor> {
    x.zip_map(dy, |v, g| if v > 0.0 { g } else { 0.0 })
}

pub fn leaky_relu(x: &Tensor, slope: f32) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { v * slope })
}

/// Gradient of [`leaky_relu`] given its input.
pub fn leaky_relu_backward(x: &Tensor, dy: &Tensor, slope: f32) -> Result<Tensor> {
    x.zip_map(dy, |v, g| if v > 0.0 { g } else { g * slope })
}

#[inline]
pub fn sigmoid_scalar(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

/// Gradient of [`sigmoid`] given its output `s`.
pub fn sigmoid_backward(s: &Tensor, dy: &Tensor) -> Result<Tensor> {
    s.zip_map(dy, |s, g| g * s * (1.0 - s))
}

/// Multiplies channel `c` of every pixel by `s[c]`.
pub fn mul_channels(x: &Tensor, s: &[f32]) -> Result<Tensor> {
    if s.len() != x.channels {
        return Err(Error::Dimension(format!(
            "channel scale of length {} for {} channels",
            s.len(),
            x.channels
        )));
    }
    let mut out = x.clone();
    out.data
        .par_chunks_mut(s.len().max(1))
        .for_each(|p| p.iter_mut().zip(s).for_each(|(v, &k)| *v *= k));
    Ok(out)
}

/// Per-channel `Σ_pixels a·b`, accumulated in `f64` row by row.
pub fn channel_dot(a: &Tensor, b: &Tensor) -> Result<Vec<f32>> {
    a.check_same_shape(b, "channel_dot")?;
    let c = a.channels;
    let row = (a.width * c).max(1);
    let partials: Vec<Vec<f64>> = a
        .data
        .par_chunks(row)
        .zip(b.data.par_chunks(row))
        .map(|(ra, rb)| {
            let mut s = vec![0.0f64; c];
            for (pa, pb) in ra.chunks_exact(c).zip(rb.chunks_exact(c)) {
                for k in 0..c {
                    s[k] += pa[k] as f64 * pb[k] as f64;
                }
            }
            s
        })
        .collect();
    Ok(ordered_sum(partials, c).into_iter().map(|v| v as f32).collect())
}

/// A 1×1 convolution layer: weight `Cout × Cin` plus bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv1x1 {
    pub weight: Matrix,
    pub bias: Vec<f32>,
}

impl Conv1x1 {
    pub fn zeros(cin: usize, cout: usize) -> Self {
        Self {
            weight: Matrix::zeros(cout, cin),
            bias: vec![0.0; cout],
        }
    }

    pub fn cin(&self) -> usize {
        self.weight.cols
    }

    pub fn cout(&self) -> usize {
        self.weight.rows
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv1x1(x, &self.weight, &self.bias)
    }

    pub fn backward(&self, x: &Tensor, dy: &Tensor, grad: &mut Conv1x1) -> Result<Tensor> {
        conv1x1_backward(x, &self.weight, dy, &mut grad.weight, &mut grad.bias)
    }

    pub fn param_count(&self) -> usize {
        self.weight.data.len() + self.bias.len()
    }
}

/// A 3×3 convolution layer with fixed stride and padding mode.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv3x3 {
    pub kernel: Kernel3x3,
    pub bias: Vec<f32>,
}

impl Conv3x3 {
    pub fn zeros(cin: usize, cout: usize) -> Self {
        Self {
            kernel: Kernel3x3::zeros(cout, cin),
            bias: vec![0.0; cout],
        }
    }

    pub fn forward(&self, x: &Tensor, stride: usize, padding: Padding) -> Result<Tensor> {
        conv3x3(x, &self.kernel, &self.bias, stride, padding)
    }

    pub fn backward(
        &self,
        x: &Tensor,
        stride: usize,
        padding: Padding,
        dy: &Tensor,
        grad: &mut Conv3x3,
    ) -> Result<Tensor> {
        conv3x3_backward(x, &self.kernel, stride, padding, dy, &mut grad.kernel, &mut grad.bias)
    }

    pub fn param_count(&self) -> usize {
        self.kernel.data.len() + self.bias.len()
    }
}
