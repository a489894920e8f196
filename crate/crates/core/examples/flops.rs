//! Parameter and multiply-accumulate counts beside the published figures.

use mslt::model::{flop_count_for, MSLT_REFERENCE_MFLOPS};
use mslt::{ModelConfig, ModelParams, Variant};

fn main() -> mslt::Result<()> {
    let cfg = ModelConfig::default();
    for v in [Variant::Mslt, Variant::MsltPlus, Variant::MsltPlusPlus, Variant::ChannelMlp] {
        let params = ModelParams::init(v, cfg, 0)?.param_count();
        let (g1k, g4k) = v.reference_gflops();
        let at_1k = flop_count_for(v, &cfg, 1024, 1024);
        let at_4k = flop_count_for(v, &cfg, 2160, 3840);
        println!(
            "{v:<12} params {params:>5} (ref {:>5})  1024² {:>8.2}M (ref {g1k}G)  4K {:>8.2}M (ref {g4k}G)",
            v.reference_params(),
            at_1k.total() as f64 / 1e6,
            at_4k.total() as f64 / 1e6
        );
        for (stage, macs) in &at_1k.stages {
            println!("    {stage:<16} {:>8.2}M", *macs as f64 / 1e6);
        }
    }
    println!("MSLT reference at 1024²: {MSLT_REFERENCE_MFLOPS}M");
    Ok(())
}
