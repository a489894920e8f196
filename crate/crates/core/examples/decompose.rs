//! Laplacian decomposition of a synthetic scene, layer statistics and the
//! reconstruction error.

use mslt::io::synthetic_scene;
use mslt::pyramid::{decompose_fixed, reconstruct_fixed};

fn main() -> mslt::Result<()> {
    let img = synthetic_scene(1, 256, 256);
    for levels in 2..=5 {
        let p = decompose_fixed(&img, levels)?;
        let back = reconstruct_fixed(&p)?;
        let err = back
            .data()
            .iter()
            .zip(img.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        println!("levels {levels}  max err {err:.2e}");
        for (i, h) in p.highs.iter().enumerate() {
            let rms = (h.data().iter().map(|v| (v * v) as f64).sum::<f64>() / h.data().len() as f64).sqrt();
            println!("  H{} {:>3}x{:<3} rms {rms:.4}", i + 1, h.width(), h.height());
        }
        println!("  L{levels} {:>3}x{:<3}", p.low.width(), p.low.height());
    }
    Ok(())
}
