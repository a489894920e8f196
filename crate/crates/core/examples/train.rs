//! Overfits MSLT on four gamma-distorted synthetic scenes and reports the
//! mean training PSNR as it goes.
//!
//! `cargo run --release --example train -- [max_steps] [lr] [crops_per_image]`

use std::time::Instant;

use mslt::io::{apply_gamma, synthetic_scene};
use mslt::metrics::psnr;
use mslt::training::{fit_until, SamplePair, TrainConfig};
use mslt::{ModelConfig, ModelParams, Variant};

fn mean_psnr(mp: &ModelParams, pairs: &[SamplePair]) -> f64 {
    let total: f64 = pairs
        .iter()
        .map(|p| psnr(&mp.infer(&p.input).unwrap(), &p.target).unwrap())
        .sum();
    total / pairs.len() as f64
}

fn main() -> mslt::Result<()> {
    let mut args = std::env::args().skip(1);
    let max_steps: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(2000);
    let lr: f64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(3e-3);
    let crops_per_image: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(100);
    let pairs = [0.4f32, 2.5, 0.4, 2.5]
        .iter()
        .enumerate()
        .map(|(i, &g)| {
            let target = synthetic_scene(i as u64, 256, 256);
            SamplePair::new(format!("scene{i}"), apply_gamma(&target, g), target)
        })
        .collect::<mslt::Result<Vec<_>>>()?;
    let cfg = TrainConfig {
        lr_max: lr,
        batch_size: 2,
        crop: 256,
        crops_per_image,
        epochs: max_steps.div_ceil(2 * crops_per_image),
        seed: 0,
        ..Default::default()
    };
    let mp = ModelParams::init(Variant::Mslt, ModelConfig::default(), 0)?;
    println!("start: {:.2} dB", mean_psnr(&mp, &pairs));
    let t0 = Instant::now();
    let r = fit_until(&pairs, mp, None, &cfg, |rec, mp| {
        if (rec.step + 1) % 50 != 0 {
            return rec.step + 1 >= max_steps;
        }
        let p = mean_psnr(mp, &pairs);
        println!(
            "step {:>5}  lr {:.2e}  loss {:.5}  psnr {p:.2} dB  {:.0} s",
            rec.step + 1,
            rec.lr,
            rec.loss,
            t0.elapsed().as_secs_f64()
        );
        p >= 30.0 || rec.step + 1 >= max_steps
    })?;
    for p in &pairs {
        println!("{}  {:.2} dB", p.name, psnr(&r.params.infer(&p.input)?, &p.target)?);
    }
    println!("{} steps, {:.2} dB", r.history.len(), mean_psnr(&r.params, &pairs));
    Ok(())
}
