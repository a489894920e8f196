//! Forward-pass timing for every variant at 1024×1024 and 3840×2160.
//!
//! `cargo run --release --example bench -- [iters]`

use mslt::cli::bench;
use mslt::Variant;

fn main() -> mslt::Result<()> {
    let iters = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    for (w, h) in [(1024, 1024), (3840, 2160)] {
        for v in [Variant::Mslt, Variant::MsltPlus, Variant::MsltPlusPlus, Variant::ChannelMlp] {
            let r = bench(v, w, h, iters, 1, 0)?;
            println!(
                "{w}x{h} {:<12} median {:>9.2} ms  mean {:>9.2} ms  {:>8.2}M MACs",
                r.variant,
                r.median_ms,
                r.mean_ms,
                r.macs as f64 / 1e6
            );
        }
    }
    Ok(())
}
