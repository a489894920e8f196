//! Analytic gradients against central differences, per parameter tensor.
//!
//! `cargo run --release --example gradcheck -- [variant] [seed]`

use mslt::gradcheck::GradCheckOptions;
use mslt::training::{gradcheck_model, gradcheck_setup, GRADCHECK_SEED};
use mslt::{ModelConfig, Variant};

fn main() -> mslt::Result<()> {
    let mut args = std::env::args().skip(1);
    let variant: Variant = args.next().map_or(Ok(Variant::Mslt), |s| s.parse())?;
    let seed = args.next().and_then(|s| s.parse().ok()).unwrap_or(GRADCHECK_SEED);
    let (mp, x, y) = gradcheck_setup(variant, ModelConfig::default(), seed)?;
    let opts = GradCheckOptions {
        seed,
        ..Default::default()
    };
    let report = gradcheck_model(&mp, &x, &y, &opts)?;
    for c in &report {
        println!("{:<28} n={:<3} |g|={:.3e} rel err {:.2e}", c.name, c.checked, c.analytic_norm, c.rel_err);
    }
    let worst = report.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err)).unwrap();
    println!("{variant} seed {seed}: max rel err {:.2e} ({})", worst.rel_err, worst.name);
    Ok(())
}
