//! Renders the lightness change between a scene and a brightened copy.
//!
//! Writes `heat_in.png`, `heat_out.png` and `heatmap.png`.

use mslt::io::{apply_gamma, synthetic_scene, write_image};
use mslt::metrics::correction_heatmap;

fn main() -> mslt::Result<()> {
    let scene = synthetic_scene(3, 160, 240);
    let dark = apply_gamma(&scene, 1.8);
    let hm = correction_heatmap(&dark, &scene)?;
    write_image("heat_in.png", &dark)?;
    write_image("heat_out.png", &scene)?;
    write_image("heatmap.png", &hm.render())?;
    let mean = hm.values.iter().map(|&v| v as f64).sum::<f64>() / hm.values.len() as f64;
    println!("r_max {:.4}  mean {mean:+.4}  centre {:+.4}", hm.r_max, hm.at(80, 120));
    Ok(())
}
