use mslt::gradcheck::{GradCheckOptions, TensorCheck};
use mslt::params::Params;
use mslt::training::{gradcheck_model, gradcheck_setup, loss_and_grad, GRADCHECK_SEED};
use mslt::{ModelConfig, ModelParams, Variant};

/// Check point for MSLT++, which is noise limited at [`GRADCHECK_SEED`].
const MSLT_PLUS_PLUS_SEED: u64 = 1;

fn run(variant: Variant, config: ModelConfig, seed: u64) -> Vec<TensorCheck> {
    let (mp, x, y) = gradcheck_setup(variant, config, seed).unwrap();
    let opts = GradCheckOptions {
        seed,
        ..Default::default()
    };
    gradcheck_model(&mp, &x, &y, &opts).unwrap()
}

fn assert_close(report: &[TensorCheck], skip: &[&str]) {
    for c in report {
        assert!(c.analytic_norm.is_finite() && c.numeric_norm.is_finite(), "{}: non-finite", c.name);
        if skip.contains(&c.name.as_str()) {
            continue;
        }
        assert!(c.rel_err < 1e-3, "{}: rel err {:.3e}", c.name, c.rel_err);
    }
}

#[test]
fn mslt_with_per_level_masks() {
    let cfg = ModelConfig {
        hf_shared: false,
        ..Default::default()
    };
    let report = run(Variant::Mslt, cfg, GRADCHECK_SEED);
    assert!(report.iter().any(|c| c.name.starts_with("hf_levels.1.")));
    assert_close(&report, &[]);
}

#[test]
fn mslt_plus_plus() {
    let report = run(Variant::MsltPlusPlus, ModelConfig::default(), MSLT_PLUS_PLUS_SEED);
    // The finest up-kernel bias is added to the finest level before it is
    // subtracted again, so its gradient is exactly zero.
    let up0 = report.iter().find(|c| c.name == "pyramid.up.0.bias").unwrap();
    assert_eq!(up0.analytic_norm, 0.0);
    assert!(up0.numeric_norm < 1e-6, "{:.3e}", up0.numeric_norm);
    assert_close(&report, &["pyramid.up.0.bias"]);
}

#[test]
fn channel_mlp() {
    assert_close(&run(Variant::ChannelMlp, ModelConfig::default(), GRADCHECK_SEED), &[]);
}

#[test]
fn shared_mask_gradient_is_sum_of_per_level_gradients() {
    let shared_cfg = ModelConfig::default();
    assert!(shared_cfg.hf_shared);
    let shared = ModelParams::init(Variant::Mslt, shared_cfg, 5).unwrap();
    let mut shadow = ModelParams::init(
        Variant::Mslt,
        ModelConfig {
            hf_shared: false,
            ..shared_cfg
        },
        11,
    )
    .unwrap();
    let source: Vec<(String, Vec<f32>)> = shared
        .tensors()
        .iter()
        .map(|t| (t.name.clone(), t.data.to_vec()))
        .collect();
    let lookup = |name: &str| source.iter().find(|(n, _)| n == name).map(|(_, d)| d.clone());
    for t in shadow.tensors_mut() {
        let tied = match t.name.strip_prefix("hf_levels.") {
            Some(rest) => format!("hf_shared.{}", rest.split_once('.').unwrap().1),
            None => t.name.clone(),
        };
        t.data.copy_from_slice(&lookup(&tied).unwrap());
    }

    let img = mslt::io::synthetic_scene(2, 48, 48);
    let target = mslt::io::apply_gamma(&img, 0.7);
    let (la, ga) = loss_and_grad(&shared, &img, &target).unwrap();
    let (lb, gb) = loss_and_grad(&shadow, &img, &target).unwrap();
    assert_eq!(la, lb);

    let per_level: Vec<(String, Vec<f32>)> = gb
        .tensors()
        .iter()
        .map(|t| (t.name.clone(), t.data.to_vec()))
        .collect();
    for t in ga.tensors() {
        let Some(rest) = t.name.strip_prefix("hf_shared.") else {
            let twin = per_level.iter().find(|(n, _)| *n == t.name).unwrap();
            assert_eq!(t.data, &twin.1[..], "{}", t.name);
            continue;
        };
        let sites: Vec<&Vec<f32>> = per_level
            .iter()
            .filter(|(n, _)| n.starts_with("hf_levels.") && n.ends_with(&format!(".{rest}")))
            .map(|(_, d)| d)
            .collect();
        assert_eq!(sites.len(), shadow.config.hf_rest_count());
        for (i, &g) in t.data.iter().enumerate() {
            let sum: f64 = sites.iter().map(|d| d[i] as f64).sum();
            let scale = sites.iter().map(|d| (d[i] as f64).abs()).sum::<f64>().max(1e-12);
            assert!((g as f64 - sum).abs() <= 1e-5 * scale, "{}[{i}]: {g} vs {sum}", t.name);
        }
    }
}
