//! Image quality metrics and the lightness-correction heatmap.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// SSIM window side and Gaussian width.
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Peak signal-to-noise ratio in dB for images in `[0, 1]`. Identical
/// images give `f64::INFINITY`.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_pair(a, b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    let mse = sum / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

fn check_pair(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "metric operands differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.data().is_empty() {
        return Err(Error::Size("metric operands are empty".into()));
    }
    Ok(())
}

/// Rec. 601 luma; single-channel inputs pass through.
pub fn luminance(img: &Tensor) -> Vec<f64> {
    match img.channels() {
        1 => img.data().iter().map(|&v| v as f64).collect(),
        c => img
            .data()
            .chunks_exact(c)
            .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
            .collect(),
    }
}

/// Normalised 1-D Gaussian taps of the SSIM window.
pub fn ssim_taps() -> [f64; SSIM_WINDOW] {
    let mut t = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, v) in t.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = t.iter().sum();
    t.iter_mut().for_each(|v| *v /= s);
    t
}

/// Valid-mode separable filtering of an `h × w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let horiz: Vec<f64> = (0..h)
        .into_par_iter()
        .flat_map_iter(|y| {
            let row = &x[y * w..(y + 1) * w];
            (0..ow).map(move |ox| taps.iter().zip(&row[ox..ox + k]).map(|(t, v)| t * v).sum())
        })
        .collect();
    (0..oh)
        .into_par_iter()
        .flat_map_iter(|oy| {
            let horiz = &horiz;
            (0..ow).map(move |ox| {
                taps.iter()
                    .enumerate()
                    .map(|(i, t)| t * horiz[(oy + i) * ow + ox])
                    .sum()
            })
        })
        .collect()
}

/// Mean structural similarity on luminance, 11×11 Gaussian window (σ = 1.5),
/// valid windows only.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_pair(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Size(format!(
            "{h}x{w} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let (x, y) = (luminance(a), luminance(b));
    let taps = ssim_taps();
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(u, v)| u * v).collect() };
    let mx = filter_valid(&x, h, w, &taps);
    let my = filter_valid(&y, h, w, &taps);
    let mxx = filter_valid(&prod(&x, &x), h, w, &taps);
    let myy = filter_valid(&prod(&y, &y), h, w, &taps);
    let mxy = filter_valid(&prod(&x, &y), h, w, &taps);
    let total: f64 = (0..mx.len())
        .map(|i| ssim_index(mx[i], my[i], mxx[i], myy[i], mxy[i]))
        .sum();
    Ok(total / mx.len() as f64)
}

/// SSIM of one window from its first and second moments.
pub fn ssim_index(mx: f64, my: f64, mxx: f64, myy: f64, mxy: f64) -> f64 {
    let vx = mxx - mx * mx;
    let vy = myy - my * my;
    let cxy = mxy - mx * my;
    ((2.0 * (mx * my) + SSIM_C1) * (2.0 * cxy + SSIM_C2))
        / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2))
}

// sRGB primaries to XYZ under D65; the white point is the row sums.
const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

fn srgb_to_linear(v: f64) -> f64 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

fn lab_f(t: f64) -> f64 {
    const D: f64 = 6.0 / 29.0;
    if t > D * D * D {
        t.cbrt()
    } else {
        t / (3.0 * D * D) + 4.0 / 29.0
    }
}

/// CIELAB of one sRGB pixel in `[0, 1]`.
pub fn srgb_pixel_to_lab(rgb: [f32; 3]) -> [f64; 3] {
    let lin = rgb.map(|v| srgb_to_linear(v as f64));
    let mut f = [0.0; 3];
    for (k, row) in RGB_TO_XYZ.iter().enumerate() {
        let white: f64 = row.iter().sum();
        let xyz: f64 = row.iter().zip(&lin).map(|(m, v)| m * v).sum();
        f[k] = lab_f(xyz / white);
    }
    [116.0 * f[1] - 16.0, 500.0 * (f[0] - f[1]), 200.0 * (f[1] - f[2])]
}

/// sRGB → linear RGB → XYZ (D65) → CIELAB, with L in `[0, 100]`.
pub fn srgb_to_lab(img: &Tensor) -> Result<Tensor> {
    if img.channels() != 3 {
        return Err(Error::Dimension(format!(
            "expected 3 channels, got {}",
            img.channels()
        )));
    }
    let data = img
        .data()
        .par_chunks_exact(3)
        .flat_map_iter(|p| srgb_pixel_to_lab([p[0], p[1], p[2]]).map(|v| v as f32))
        .collect();
    Tensor::new(img.height(), img.width(), 3, data)
}

/// Lightness residual normalised into `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapR {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
    pub r_max: f32,
}

impl HeatmapR {
    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.width + x]
    }

    /// Renders through a blue–white–red diverging palette: negative values
    /// (darkened) towards blue, positive (brightened) towards red.
    pub fn render(&self) -> Tensor {
        let data = self
            .values
            .iter()
            .flat_map(|&v| heat_color(v))
            .collect();
        Tensor::new(self.height, self.width, 3, data).expect("3 values per pixel")
    }
}

/// Palette colour for a value in `[-1, 1]`; 0 maps to white.
pub fn heat_color(v: f32) -> [f32; 3] {
    let v = v.clamp(-1.0, 1.0);
    if v >= 0.0 {
        [1.0, 1.0 - v, 1.0 - v]
    } else {
        [1.0 + v, 1.0 + v, 1.0]
    }
}

/// `R = O_L − I_L` divided by `max |R|` (all zeros when `R ≡ 0`).
pub fn correction_heatmap(input: &Tensor, output: &Tensor) -> Result<HeatmapR> {
    check_pair(input, output)?;
    if input.channels() != 3 {
        return Err(Error::Dimension(format!(
            "expected 3 channels, got {}",
            input.channels()
        )));
    }
    let lightness = |p: &[f32]| srgb_pixel_to_lab([p[0], p[1], p[2]])[0];
    let r: Vec<f64> = input
        .data()
        .par_chunks_exact(3)
        .zip(output.data().par_chunks_exact(3))
        .map(|(i, o)| lightness(o) - lightness(i))
        .collect();
    let r_max = r.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let values = if r_max == 0.0 {
        vec![0.0; r.len()]
    } else {
        r.iter().map(|v| (v / r_max) as f32).collect()
    };
    Ok(HeatmapR {
        height: input.height(),
        width: input.width(),
        values,
        r_max: r_max as f32,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_image(seed: u64, h: usize, w: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(h, w, 3, |_, _, _| rng.gen_range(0.0..1.0))
    }

    fn naive_ssim(a: &Tensor, b: &Tensor) -> f64 {
        let (x, y) = (luminance(a), luminance(b));
        let (h, w) = (a.height(), a.width());
        let t = ssim_taps();
        let mut total = 0.0;
        let mut count = 0;
        for oy in 0..=h - SSIM_WINDOW {
            for ox in 0..=w - SSIM_WINDOW {
                let (mut mx, mut my, mut mxx, mut myy, mut mxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..SSIM_WINDOW {
                    for j in 0..SSIM_WINDOW {
                        let wt = t[i] * t[j];
                        let k = (oy + i) * w + ox + j;
                        mx += wt * x[k];
                        my += wt * y[k];
                        mxx += wt * x[k] * x[k];
                        myy += wt * y[k] * y[k];
                        mxy += wt * x[k] * y[k];
                    }
                }
                total += ssim_index(mx, my, mxx, myy, mxy);
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn psnr_examples() {
        let a = rand_image(1, 8, 8);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let a = Tensor::filled(8, 8, 3, 0.3);
        let b = Tensor::filled(8, 8, 3, 0.4);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 0.01);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }

    #[test]
    fn psnr_decreases_with_difference() {
        let a = Tensor::filled(4, 4, 3, 0.2);
        let mut last = f64::INFINITY;
        for k in 1..10 {
            let b = Tensor::filled(4, 4, 3, 0.2 + 0.05 * k as f32);
            let p = psnr(&a, &b).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = rand_image(1, 8, 8);
        let b = rand_image(1, 8, 9);
        assert!(matches!(psnr(&a, &b), Err(Error::Dimension(_))));
        assert!(matches!(ssim(&a, &b), Err(Error::Dimension(_))));
        assert!(matches!(ssim(&a, &a), Err(Error::Size(_))));
    }

    #[test]
    fn ssim_identity_and_inversion() {
        let a = rand_image(2, 32, 32);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let inv = a.map(|v| 1.0 - v);
        assert!(ssim(&a, &inv).unwrap() < 1.0);
    }

    #[test]
    fn ssim_matches_naive_windows() {
        for seed in 0..4 {
            let a = rand_image(seed, 32, 32);
            let b = rand_image(seed + 100, 32, 32);
            let fast = ssim(&a, &b).unwrap();
            assert!((fast - naive_ssim(&a, &b)).abs() < 1e-6);
            assert!((-1.0..=1.0).contains(&fast));
        }
    }

    #[test]
    fn lab_reference_points() {
        let black = srgb_pixel_to_lab([0.0; 3]);
        assert_eq!(black[0], 0.0);
        let white = srgb_pixel_to_lab([1.0; 3]);
        assert!((white[0] - 100.0).abs() < 1e-3);
        let gray = srgb_pixel_to_lab([0.5; 3]);
        assert!(gray[1].abs() < 0.01 && gray[2].abs() < 0.01);
    }

    #[test]
    fn heatmap_examples() {
        let a = rand_image(3, 8, 8);
        let h = correction_heatmap(&a, &a).unwrap();
        assert_eq!(h.r_max, 0.0);
        assert!(h.values.iter().all(|&v| v == 0.0));
        let render = h.render();
        assert!(render.data().iter().all(|&v| v == 1.0));

        let dark = Tensor::filled(4, 4, 3, 0.2);
        let bright = Tensor::filled(4, 4, 3, 0.6);
        let up = correction_heatmap(&dark, &bright).unwrap();
        assert!(up.values.iter().all(|&v| v == 1.0));
        let down = correction_heatmap(&bright, &dark).unwrap();
        assert!(down.values.iter().all(|&v| v == -1.0));
    }

    #[test]
    fn heatmap_sign_follows_lightness() {
        let a = rand_image(4, 6, 6);
        let b = rand_image(5, 6, 6);
        let h = correction_heatmap(&a, &b).unwrap();
        let (la, lb) = (srgb_to_lab(&a).unwrap(), srgb_to_lab(&b).unwrap());
        let max = h.values.iter().fold(0.0f32, |m, v| m.max(v.abs()));
        assert!((max - 1.0).abs() < 1e-6);
        for y in 0..6 {
            for x in 0..6 {
                let d = lb.at(y, x, 0) - la.at(y, x, 0);
                assert!(d == 0.0 || d.signum() == h.at(y, x).signum());
            }
        }
    }

    proptest! {
        #[test]
        fn grays_are_achromatic(v in 0.0f32..=1.0) {
            let lab = srgb_pixel_to_lab([v, v, v]);
            prop_assert!(lab[1].abs() < 1e-6 && lab[2].abs() < 1e-6);
        }

        #[test]
        fn ssim_is_symmetric(seed in 0u64..1000) {
            let a = rand_image(seed, 16, 16);
            let b = rand_image(seed ^ 0x55, 16, 16);
            prop_assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        }
    }
}
