//! Image files, pair manifests and synthetic test scenes.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn image_err(path: &Path, message: impl ToString) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: message.to_string(),
    }
}

/// 8-bit value to `[0, 1]`.
pub fn dequantize(v: u8) -> f32 {
    v as f32 / 255.0
}

/// `[0, 1]` to 8 bits: `round(v · 255)`, clamped.
pub fn quantize(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Decodes an 8-bit PNG or binary PPM into an RGB tensor.
pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading `{}`", path.display()), e))?;
    let img = image::load_from_memory(&bytes).map_err(|e| image_err(path, e))?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let data = rgb.into_raw().into_iter().map(dequantize).collect();
    Tensor::new(h as usize, w as usize, 3, data)
}

/// Encodes an RGB tensor as PNG or binary PPM, chosen by extension.
pub fn write_image(path: impl AsRef<Path>, img: &Tensor) -> Result<()> {
    let path = path.as_ref();
    if img.channels() != 3 {
        return Err(Error::Dimension(format!(
            "can only write 3-channel images, got {}",
            img.channels()
        )));
    }
    let format = ImageFormat::from_path(path).map_err(|e| image_err(path, e))?;
    let bytes: Vec<u8> = img.data().iter().map(|&v| quantize(v)).collect();
    let (w, h) = (img.width() as u32, img.height() as u32);
    let file =
        fs::File::create(path).map_err(|e| Error::io(format!("creating `{}`", path.display()), e))?;
    let out = BufWriter::new(file);
    let res = match format {
        ImageFormat::Png => image::codecs::png::PngEncoder::new(out).write_image(
            &bytes,
            w,
            h,
            ExtendedColorType::Rgb8,
        ),
        ImageFormat::Pnm => PnmEncoder::new(out)
            .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
            .write_image(&bytes, w, h, ExtendedColorType::Rgb8),
        other => return Err(image_err(path, format!("unsupported output format {other:?}"))),
    };
    res.map_err(|e| image_err(path, e))
}

/// Parses a manifest of tab-separated path pairs. Blank lines and lines
/// starting with `#` are skipped; relative paths resolve against the
/// manifest's directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<(PathBuf, PathBuf)>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading manifest `{}`", path.display()), e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut pairs = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 2 || cols.iter().any(|c| c.is_empty()) {
            return Err(Error::Manifest {
                path: path.to_path_buf(),
                line: no + 1,
                message: "expected two tab-separated paths".into(),
            });
        }
        pairs.push((base.join(cols[0]), base.join(cols[1])));
    }
    Ok(pairs)
}

/// Writes a manifest with paths relative to its directory when possible.
pub fn write_manifest(path: impl AsRef<Path>, pairs: &[(PathBuf, PathBuf)]) -> Result<()> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new(""));
    let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
    let text: String = pairs
        .iter()
        .map(|(a, b)| format!("{}\t{}\n", rel(a), rel(b)))
        .collect();
    fs::write(path, text).map_err(|e| Error::io(format!("writing manifest `{}`", path.display()), e))
}

/// Applies `v ↦ v^gamma` to every value.
pub fn apply_gamma(img: &Tensor, gamma: f32) -> Tensor {
    img.map(|v| v.max(0.0).powf(gamma))
}

/// Uniform noise image from a seeded generator.
pub fn random_image(seed: u64, height: usize, width: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..height * width * 3).map(|_| rng.gen::<f32>()).collect();
    Tensor::new(height, width, 3, data).expect("sized buffer")
}

/// A procedural outdoor-like scene: sky gradient over ground, soft blobs,
/// a few hard-edged shapes and fine texture. Values stay in `[0.02, 0.98]`.
pub fn synthetic_scene(seed: u64, height: usize, width: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sky_top: [f32; 3] = [rng.gen_range(0.3..0.6), rng.gen_range(0.5..0.7), rng.gen_range(0.7..0.95)];
    let sky_low: [f32; 3] = [rng.gen_range(0.7..0.9), rng.gen_range(0.7..0.9), rng.gen_range(0.75..0.95)];
    let ground: [f32; 3] = [rng.gen_range(0.2..0.5), rng.gen_range(0.25..0.5), rng.gen_range(0.1..0.3)];
    let horizon = rng.gen_range(0.35..0.65f32);
    let tilt = rng.gen_range(-0.15..0.15f32);

    struct Blob {
        cy: f32,
        cx: f32,
        r: f32,
        color: [f32; 3],
        hard: bool,
    }
    let blobs: Vec<Blob> = (0..rng.gen_range(6..12))
        .map(|_| Blob {
            cy: rng.gen_range(0.0..1.0),
            cx: rng.gen_range(0.0..1.0),
            r: rng.gen_range(0.04..0.2),
            color: [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)],
            hard: rng.gen_bool(0.4),
        })
        .collect();
    let waves: Vec<(f32, f32, f32, f32)> = (0..4)
        .map(|_| {
            (
                rng.gen_range(8.0..60.0),
                rng.gen_range(8.0..60.0),
                rng.gen_range(0.0..std::f32::consts::TAU),
                rng.gen_range(0.01..0.04),
            )
        })
        .collect();

    Tensor::from_fn(height, width, 3, |y, x, c| {
        let (fy, fx) = ((y as f32 + 0.5) / height as f32, (x as f32 + 0.5) / width as f32);
        let line = horizon + tilt * (fx - 0.5);
        let mut v = if fy < line {
            let t = fy / line;
            sky_top[c] * (1.0 - t) + sky_low[c] * t
        } else {
            ground[c] * (1.2 - 0.4 * (fy - line) / (1.0 - line))
        };
        for b in &blobs {
            let d = ((fy - b.cy).powi(2) + (fx - b.cx).powi(2)).sqrt() / b.r;
            let a = if b.hard {
                if d < 1.0 {
                    0.9
                } else {
                    0.0
                }
            } else {
                0.8 * (-d * d).exp()
            };
            v = v * (1.0 - a) + b.color[c] * a;
        }
        let texture: f32 = waves
            .iter()
            .map(|&(ky, kx, ph, amp)| amp * (ky * fy + kx * fx + ph + c as f32 * 0.3).sin())
            .sum();
        (v + texture).clamp(0.02, 0.98)
    })
}
