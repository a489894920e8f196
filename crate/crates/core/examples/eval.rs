//! Scores identity and gamma-corrected outputs against synthetic targets.

use mslt::cli::evaluate;
use mslt::io::{apply_gamma, synthetic_scene};
use mslt::training::SamplePair;
use mslt::{ModelConfig, ModelParams, Variant};

fn main() -> mslt::Result<()> {
    let pairs = (0..4)
        .map(|i| {
            let target = synthetic_scene(i, 128, 192);
            let gamma = if i % 2 == 0 { 0.6 } else { 1.6 };
            SamplePair::new(format!("scene{i}_g{gamma}"), apply_gamma(&target, gamma), target)
        })
        .collect::<mslt::Result<Vec<_>>>()?;
    let mp = ModelParams::identity(Variant::MsltPlus, ModelConfig::default())?;
    for row in evaluate(&pairs, &mp)? {
        println!("{:<16} {:>7.3} dB  ssim {:.4}", row.name, row.psnr_db, row.ssim);
    }
    Ok(())
}
