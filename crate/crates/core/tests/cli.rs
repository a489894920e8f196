use std::path::{Path, PathBuf};
use std::process::Command;

use mslt::io::{apply_gamma, read_image, synthetic_scene, write_image, write_manifest};
use mslt::metrics::psnr;
use tempfile::TempDir;

/// Runs the binary inside `dir` and returns its exit code.
fn mslt(dir: &Path, args: &[&str]) -> i32 {
    let out = Command::new(env!("CARGO_BIN_EXE_mslt"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap();
    out.status.code().unwrap()
}

fn scene(dir: &Path, name: &str, seed: u64, h: usize, w: usize) -> PathBuf {
    let p = dir.join(name);
    write_image(&p, &synthetic_scene(seed, h, w)).unwrap();
    p
}

#[test]
fn identity_correct_is_lossless_and_repeatable() {
    let dir = TempDir::new().unwrap();
    let input = scene(dir.path(), "in.png", 1, 72, 100);
    for variant in ["mslt", "mslt+", "mslt++", "channel-mlp"] {
        for out in ["a.png", "b.png"] {
            let code = mslt(
                dir.path(),
                &["correct", "--input", "in.png", "--output", out, "--weights", "identity", "--variant", variant],
            );
            assert_eq!(code, 0, "{variant}");
        }
        let a = std::fs::read(dir.path().join("a.png")).unwrap();
        assert_eq!(a, std::fs::read(dir.path().join("b.png")).unwrap(), "{variant}");
        let (i, o) = (read_image(&input).unwrap(), read_image(dir.path().join("a.png")).unwrap());
        assert_eq!(o.shape(), i.shape());
        assert!(psnr(&o, &i).unwrap() > 50.0, "{variant}");
    }
    assert!(dir.path().join("correct.run.json").exists());
}

#[test]
fn train_then_correct() {
    let dir = TempDir::new().unwrap();
    let mut pairs = Vec::new();
    for (i, g) in [0.5f32, 1.8].into_iter().enumerate() {
        let t = synthetic_scene(i as u64, 48, 48);
        let (ip, tp) = (dir.path().join(format!("in{i}.ppm")), dir.path().join(format!("gt{i}.ppm")));
        write_image(&ip, &apply_gamma(&t, g)).unwrap();
        write_image(&tp, &t).unwrap();
        pairs.push((ip, tp));
    }
    write_manifest(dir.path().join("pairs.tsv"), &pairs).unwrap();
    let train = |weights: &str| {
        mslt(
            dir.path(),
            &[
                "train", "--manifest", "pairs.tsv", "--out-weights", weights, "--variant", "mslt+", "--epochs", "2",
                "--batch", "2", "--crop", "32", "--crops-per-image", "2", "--seed", "3", "--history-csv", "hist.csv",
            ],
        )
    };
    assert_eq!(train("a.msltw"), 0);
    assert_eq!(train("b.msltw"), 0);
    let a = std::fs::read(dir.path().join("a.msltw")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("b.msltw")).unwrap());
    let hist = std::fs::read_to_string(dir.path().join("hist.csv")).unwrap();
    assert_eq!(hist.lines().count(), 1 + 2 * 2);

    let code = mslt(
        dir.path(),
        &["correct", "--input", "in0.ppm", "--output", "out.png", "--weights", "a.msltw", "--variant", "mslt+"],
    );
    assert_eq!(code, 0);
    let code = mslt(
        dir.path(),
        &["correct", "--input", "in0.ppm", "--output", "out.png", "--weights", "a.msltw", "--variant", "mslt"],
    );
    assert_eq!(code, 4);
}

#[test]
fn eval_of_self_pairs() {
    let dir = TempDir::new().unwrap();
    let pairs: Vec<(PathBuf, PathBuf)> = (0..3)
        .map(|i| {
            let p = scene(dir.path(), &format!("s{i}.png"), i, 40, 56);
            (p.clone(), p)
        })
        .collect();
    write_manifest(dir.path().join("self.tsv"), &pairs).unwrap();
    let code = mslt(
        dir.path(),
        &["eval", "--pairs-manifest", "self.tsv", "--weights", "identity", "--csv-out", "scores.csv"],
    );
    assert_eq!(code, 0);
    let mut r = csv::Reader::from_path(dir.path().join("scores.csv")).unwrap();
    assert_eq!(r.headers().unwrap(), vec!["name", "psnr_db", "ssim"]);
    let rows: Vec<csv::StringRecord> = r.records().map(Result::unwrap).collect();
    let names: Vec<&str> = rows.iter().map(|r| &r[0]).collect();
    assert_eq!(names, ["s0", "s1", "s2", "mean"]);
    for row in &rows {
        assert_eq!(row[1].parse::<f64>().unwrap(), f64::INFINITY);
        assert_eq!(row[2].parse::<f64>().unwrap(), 1.0);
    }
}

#[test]
fn heatmap_of_identical_images_is_neutral() {
    let dir = TempDir::new().unwrap();
    scene(dir.path(), "a.png", 4, 30, 20);
    let code = mslt(dir.path(), &["heatmap", "--input", "a.png", "--corrected", "a.png", "--out", "h.png"]);
    assert_eq!(code, 0);
    let h = read_image(dir.path().join("h.png")).unwrap();
    assert_eq!((h.height(), h.width()), (30, 20));
    let first = &h.data()[..3];
    assert!(h.data().chunks(3).all(|p| p == first));
}

#[test]
fn decompose_writes_one_file_per_layer() {
    let dir = TempDir::new().unwrap();
    scene(dir.path(), "a.png", 5, 64, 48);
    let code = mslt(dir.path(), &["decompose", "--input", "a.png", "--levels", "4", "--out-dir", "layers"]);
    assert_eq!(code, 0);
    let mut names: Vec<String> = std::fs::read_dir(dir.path().join("layers"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(names, ["h1.png", "h2.png", "h3.png", "l4.png"]);
    let low = read_image(dir.path().join("layers/l4.png")).unwrap();
    assert_eq!((low.height(), low.width()), (8, 6));
}

#[test]
fn exit_codes() {
    let dir = TempDir::new().unwrap();
    scene(dir.path(), "a.png", 6, 12, 12);
    let d = dir.path();
    assert_eq!(mslt(d, &["train", "--manifest", "m", "--out-weights", "w", "--pooling", "max"]), 2);
    assert_eq!(mslt(d, &["train", "--manifest", "m", "--out-weights", "w", "--levels", "6"]), 2);
    assert_eq!(mslt(d, &["bench", "--iters", "0", "--width", "16", "--height", "16"]), 2);
    assert_eq!(mslt(d, &["correct", "--input", "missing.png", "--output", "o.png", "--weights", "identity"]), 3);
    assert_eq!(mslt(d, &["correct", "--input", "a.png", "--output", "o.png", "--weights", "missing.msltw"]), 3);
    std::fs::write(d.join("junk.msltw"), b"not weights").unwrap();
    assert_eq!(mslt(d, &["correct", "--input", "a.png", "--output", "o.png", "--weights", "junk.msltw"]), 4);
    assert_eq!(mslt(d, &["decompose", "--input", "a.png", "--levels", "5", "--out-dir", "x"]), 4);
}
