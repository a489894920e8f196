//! Corrects an image with identity weights or a trained weight file.
//!
//! `cargo run --release --example correct -- <input> <output> [weights] [variant]`
//!
//! Without an input path a gamma-darkened synthetic scene is written to
//! `scene.png` and corrected.

use mslt::cli::{load_model, IDENTITY_WEIGHTS};
use mslt::io::{apply_gamma, read_image, synthetic_scene, write_image};
use mslt::metrics::psnr;
use mslt::Variant;

fn main() -> mslt::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (input, output) = match args.as_slice() {
        [i, o, ..] => (i.clone(), o.clone()),
        _ => {
            write_image("scene.png", &apply_gamma(&synthetic_scene(0, 240, 320), 2.2))?;
            ("scene.png".into(), "corrected.png".into())
        }
    };
    let weights = args.get(2).map_or(IDENTITY_WEIGHTS, String::as_str);
    let variant: Variant = args.get(3).map_or(Ok(Variant::Mslt), |s| s.parse())?;

    let mp = load_model(weights, variant)?;
    let img = read_image(&input)?;
    let out = mp.infer(&img)?;
    write_image(&output, &out)?;
    println!(
        "{variant} {}x{} -> {output} ({:.2} dB from input)",
        img.width(),
        img.height(),
        psnr(&out, &img)?
    );
    Ok(())
}
