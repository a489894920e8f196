use mslt::io::{apply_gamma, synthetic_scene};
use mslt::training::{fit_with, SamplePair, TrainConfig};
use mslt::weights::to_bytes;
use mslt::{ModelConfig, ModelParams, Variant};

/// Two whole images per step, so every step sees the same batch.
fn fixed_batch(seed: u64) -> (Vec<SamplePair>, TrainConfig) {
    let pairs = [0.5f32, 2.0]
        .iter()
        .enumerate()
        .map(|(i, &g)| {
            let target = synthetic_scene(seed * 10 + i as u64, 64, 64);
            SamplePair::new(format!("s{i}"), apply_gamma(&target, g), target).unwrap()
        })
        .collect();
    let cfg = TrainConfig {
        batch_size: 2,
        crop: 64,
        crops_per_image: 1,
        epochs: 50,
        restart_period: 50,
        seed,
        ..Default::default()
    };
    (pairs, cfg)
}

#[test]
fn fixed_batch_loss_does_not_increase() {
    let mut monotone = 0;
    for seed in 1..=5 {
        let (pairs, cfg) = fixed_batch(seed);
        let mp = ModelParams::init(Variant::Mslt, ModelConfig::default(), seed).unwrap();
        let r = fit_with(&pairs, mp, None, &cfg, |_| {}).unwrap();
        let loss: Vec<f64> = r.history.iter().map(|h| h.loss).collect();
        assert_eq!(loss.len(), 50);
        let rises = loss.windows(2).filter(|w| w[1] > w[0]).count();
        println!("seed {seed}: {:.5} -> {:.5}, {rises} rises", loss[0], loss[49]);
        if rises == 0 {
            monotone += 1;
        }
    }
    assert!(monotone >= 4, "{monotone}/5 seeds monotone");
}

fn ten_steps(threads: usize) -> Vec<u8> {
    let (pairs, mut cfg) = fixed_batch(7);
    cfg.epochs = 10;
    let mp = ModelParams::init(Variant::MsltPlus, ModelConfig::default(), 7).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    let r = pool.install(|| fit_with(&pairs, mp, None, &cfg, |_| {})).unwrap();
    assert_eq!(r.adam.t, 10);
    to_bytes(&r.params)
}

#[test]
fn ten_adam_steps_are_bit_identical() {
    let a = ten_steps(1);
    assert_eq!(a, ten_steps(1));
    assert_eq!(a, ten_steps(3));
}

#[test]
fn history_length_counts_batches() {
    let pairs: Vec<SamplePair> = (0..3)
        .map(|i| {
            let t = synthetic_scene(i, 40, 40);
            SamplePair::new(format!("p{i}"), apply_gamma(&t, 0.6), t).unwrap()
        })
        .collect();
    let cfg = TrainConfig {
        batch_size: 4,
        crop: 32,
        crops_per_image: 5,
        epochs: 2,
        ..Default::default()
    };
    let mp = ModelParams::init(Variant::MsltPlusPlus, ModelConfig::default(), 1).unwrap();
    let r = fit_with(&pairs, mp, None, &cfg, |_| {}).unwrap();
    assert_eq!(r.history.len(), 2 * 15usize.div_ceil(4));
    let steps: Vec<usize> = r.history.iter().map(|h| h.step).collect();
    assert_eq!(steps, (0..8).collect::<Vec<_>>());
    assert!(r.history.iter().all(|h| h.loss.is_finite() && h.lr > 0.0));
}

#[test]
fn empty_dataset_is_rejected() {
    let mp = ModelParams::init(Variant::Mslt, ModelConfig::default(), 1).unwrap();
    let e = fit_with(&[], mp, None, &TrainConfig::default(), |_| {}).unwrap_err();
    assert_eq!(e.exit_code(), 2);
}
