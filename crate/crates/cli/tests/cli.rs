use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use rsfactor_core::synth::{generate, SynthConfig};
use rsfactor_core::{
    read_image, write_image, BitDepth, Checkpoint, FusionConfig, FusionMode, Image64, ParamVector,
};

fn rsfactor(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rsfactor"))
        .args(args)
        .current_dir(cwd)
        .env("RSFACTOR_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_dark(dir: &Path, count: usize, size: usize) {
    fs::create_dir_all(dir).unwrap();
    let pairs = generate(&SynthConfig {
        count,
        height: size,
        width: size,
        seed: 11,
    })
    .unwrap();
    for (i, p) in pairs.iter().enumerate() {
        write_image(&dir.join(format!("img{i}.png")), &p.low, BitDepth::Eight).unwrap();
    }
}

#[test]
fn help_lists_every_flag_with_a_default() {
    let tmp = tempfile::tempdir().unwrap();
    for sub in ["factorize", "enhance", "train", "eval", "synth"] {
        let o = rsfactor(&[sub, "--help"], tmp.path());
        assert_eq!(code(&o), 0);
        let text = String::from_utf8_lossy(&o.stdout);
        let mut flags = 0;
        for line in text.lines().map(str::trim_start) {
            if !line.starts_with("--") {
                continue;
            }
            flags += 1;
            assert!(line.contains("[default:"), "{sub}: {line}");
        }
        assert!(flags >= 3, "{sub}");
    }
}

#[test]
fn usage_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&rsfactor(&["bogus"], tmp.path())), 1);
    assert_eq!(code(&rsfactor(&["synth", "--count", "x"], tmp.path())), 1);
    fs::write(tmp.path().join("cfg.json"), r#"{"k": 3, "surprise": true}"#).unwrap();
    let o = rsfactor(
        &["synth", "--config", "cfg.json", "--outdir", "out"],
        tmp.path(),
    );
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("surprise"));
    assert!(!tmp.path().join("out").exists());
}

#[test]
fn missing_input_is_a_data_error_without_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let o = rsfactor(&["factorize", "nope.png", "--outdir", "out"], tmp.path());
    assert_eq!(code(&o), 2);
    fs::write(tmp.path().join("broken.png"), b"not a png").unwrap();
    let o = rsfactor(&["enhance", "broken.png", "--outdir", "out"], tmp.path());
    assert_eq!(code(&o), 2);
    assert!(!stderr(&o).is_empty());
    assert!(!tmp.path().join("out").exists());
}

#[test]
fn factorize_writes_k_layers_and_sidecar() {
    let tmp = tempfile::tempdir().unwrap();
    write_dark(&tmp.path().join("in"), 1, 24);
    let o = rsfactor(&["factorize", "in/img0.png", "--outdir", "f5"], tmp.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for k in 1..=5 {
        assert!(tmp.path().join(format!("f5/img0_E{k}.png")).is_file());
    }
    assert!(!tmp.path().join("f5/img0_E6.png").exists());
    let meta: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("f5/img0_meta.json")).unwrap())
            .unwrap();
    assert_eq!(meta["k_factors"], 5);

    let o = rsfactor(
        &["factorize", "in/img0.png", "--k", "1", "--outdir", "f1"],
        tmp.path(),
    );
    assert_eq!(code(&o), 0);
    let input: Image64 = read_image(&tmp.path().join("in/img0.png")).unwrap();
    let layer: Image64 = read_image(&tmp.path().join("f1/img0_E1.png")).unwrap();
    let (lo, hi) = input.min_max();
    let rescaled = input.map(|v| (v - lo) / (hi - lo));
    assert!(layer.max_abs_diff(&rescaled) <= 0.5 / 255.0 + 1e-9);
}

#[test]
fn enhance_identity_checkpoint_reproduces_input() {
    let tmp = tempfile::tempdir().unwrap();
    write_dark(&tmp.path().join("in"), 1, 16);
    let mut fusion = FusionConfig::new(5);
    fusion.mode = FusionMode::Curve;
    fusion.gammas = vec![0.0; 5];
    fusion.bilateral.window = 1;
    Checkpoint::new(ParamVector::default(), fusion, None)
        .save(&tmp.path().join("id.json"))
        .unwrap();
    let o = rsfactor(
        &[
            "enhance",
            "in/img0.png",
            "--checkpoint",
            "id.json",
            "--outdir",
            "out",
        ],
        tmp.path(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(
        fs::read(tmp.path().join("out/img0.png")).unwrap(),
        fs::read(tmp.path().join("in/img0.png")).unwrap()
    );
}

#[test]
fn enhance_directory_with_demo_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    write_dark(&tmp.path().join("in"), 3, 48);
    let o = rsfactor(&["enhance", "in", "--outdir", "out"], tmp.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for i in 0..3 {
        let input: Image64 = read_image(&tmp.path().join(format!("in/img{i}.png"))).unwrap();
        let out: Image64 = read_image(&tmp.path().join(format!("out/img{i}.png"))).unwrap();
        assert!((input.mean() - 0.05).abs() < 0.02);
        assert!(out.mean() > 0.25, "{}", out.mean());
    }
    assert_eq!(fs::read_dir(tmp.path().join("out")).unwrap().count(), 3);
}

#[test]
fn enhance_rejects_other_checkpoint_versions() {
    let tmp = tempfile::tempdir().unwrap();
    write_dark(&tmp.path().join("in"), 1, 16);
    let text = Checkpoint::new(ParamVector::default(), FusionConfig::new(5), None)
        .to_json()
        .unwrap()
        .replace("\"format_version\": 1", "\"format_version\": 9");
    fs::write(tmp.path().join("old.json"), text).unwrap();
    let o = rsfactor(
        &[
            "enhance",
            "in",
            "--checkpoint",
            "old.json",
            "--outdir",
            "out",
        ],
        tmp.path(),
    );
    assert_ne!(code(&o), 0);
    let err = stderr(&o);
    assert!(
        err.contains("expected 1") && err.contains("found 9"),
        "{err}"
    );
    assert!(!tmp.path().join("out").exists());
}

#[test]
fn enhance_flags_override_checkpoint_fusion() {
    let tmp = tempfile::tempdir().unwrap();
    write_dark(&tmp.path().join("in"), 1, 16);
    let a = rsfactor(
        &[
            "enhance",
            "in",
            "--outdir",
            "a",
            "--mode",
            "running_average",
        ],
        tmp.path(),
    );
    let b = rsfactor(
        &[
            "enhance",
            "in",
            "--outdir",
            "b",
            "--mode",
            "running_average",
            "--weights",
            "1,1,1,1,1",
        ],
        tmp.path(),
    );
    assert_eq!(code(&a), 0);
    assert_eq!(code(&b), 0);
    assert_ne!(
        fs::read(tmp.path().join("a/img0.png")).unwrap(),
        fs::read(tmp.path().join("b/img0.png")).unwrap()
    );
    let bad = rsfactor(
        &["enhance", "in", "--outdir", "c", "--weights", "1,2"],
        tmp.path(),
    );
    assert_eq!(code(&bad), 1);
}

#[test]
fn train_writes_checkpoint_and_history() {
    let tmp = tempfile::tempdir().unwrap();
    let o = rsfactor(
        &["synth", "--outdir", "data", "--count", "3", "--size", "16"],
        tmp.path(),
    );
    assert_eq!(code(&o), 0);
    let o = rsfactor(
        &[
            "train",
            "data",
            "--outdir",
            "run",
            "--k",
            "2",
            "--t",
            "2",
            "--epochs",
            "3",
            "--freeze-epoch",
            "2",
            "--batch-size",
            "2",
        ],
        tmp.path(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ck = Checkpoint::load(&tmp.path().join("run/checkpoint.json")).unwrap();
    assert_eq!((ck.k_factors, ck.t_iters), (2, 2));
    let hist = fs::read_to_string(tmp.path().join("run/history.csv")).unwrap();
    let lines: Vec<&str> = hist.lines().collect();
    assert_eq!(lines[0], "epoch,phase,L_f,L_c,L_e,L_s,total");
    assert!(lines[2].starts_with("1,1,") && lines[3].starts_with("2,2,"));

    let o = rsfactor(
        &["train", "data", "--outdir", "zero", "--epochs", "0"],
        tmp.path(),
    );
    assert_eq!(code(&o), 0);
    let ck = Checkpoint::load(&tmp.path().join("zero/checkpoint.json")).unwrap();
    assert_eq!(ck.params, ParamVector::default());

    fs::create_dir(tmp.path().join("empty")).unwrap();
    let o = rsfactor(&["train", "empty", "--outdir", "e"], tmp.path());
    assert_eq!(code(&o), 2);
    assert!(!tmp.path().join("e").exists());
}

#[test]
fn train_config_file_is_overridden_by_flags() {
    let tmp = tempfile::tempdir().unwrap();
    rsfactor(
        &["synth", "--outdir", "data", "--count", "2", "--size", "12"],
        tmp.path(),
    );
    fs::write(
        tmp.path().join("cfg.json"),
        r#"{"k": 2, "t": 1, "train": {"epochs": 1, "freeze_epoch": 1, "batch_size": 2}}"#,
    )
    .unwrap();
    let o = rsfactor(
        &[
            "train", "data", "--config", "cfg.json", "--t", "2", "--outdir", "run",
        ],
        tmp.path(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ck = Checkpoint::load(&tmp.path().join("run/checkpoint.json")).unwrap();
    assert_eq!((ck.k_factors, ck.t_iters), (2, 2));
    assert_eq!(ck.train_config.unwrap().epochs, 1);
}

#[test]
fn eval_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let base = Image64::filled(16, 16, 3, 0.5);
    for d in ["pred", "gt", "same"] {
        fs::create_dir(tmp.path().join(d)).unwrap();
    }
    for i in 0..3 {
        write_image(
            &tmp.path().join(format!("gt/p{i}.pgm")),
            &base.cast::<f64>(),
            BitDepth::Sixteen,
        )
        .unwrap();
        let shifted = base.map(|v| v + 0.1);
        write_image(
            &tmp.path().join(format!("pred/p{i}.pgm")),
            &shifted,
            BitDepth::Sixteen,
        )
        .unwrap();
        write_image(
            &tmp.path().join(format!("same/p{i}.pgm")),
            &base,
            BitDepth::Sixteen,
        )
        .unwrap();
    }
    let o = rsfactor(&["eval", "pred", "gt"], tmp.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = String::from_utf8_lossy(&o.stdout).into_owned();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 5);
    assert!(rows[4].starts_with("mean,"));
    // 16-bit storage moves 0.1 by at most 1/65535
    let psnr_c: f64 = rows[1].split(',').nth(2).unwrap().parse().unwrap();
    assert!((psnr_c - 20.0).abs() < 1e-3, "{psnr_c}");

    let o = rsfactor(&["eval", "same", "gt", "--outdir", "m"], tmp.path());
    let csv = String::from_utf8_lossy(&o.stdout).into_owned();
    assert!(csv
        .lines()
        .nth(1)
        .unwrap()
        .starts_with("p0,inf,inf,1.000000,"));
    assert_eq!(
        fs::read_to_string(tmp.path().join("m/metrics.csv")).unwrap(),
        csv
    );

    fs::remove_file(tmp.path().join("gt/p1.pgm")).unwrap();
    let o = rsfactor(&["eval", "pred", "gt"], tmp.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("p1"));
}

#[test]
fn synth_is_seeded_and_paired() {
    let tmp = tempfile::tempdir().unwrap();
    for d in ["a", "b"] {
        let o = rsfactor(
            &[
                "synth", "--outdir", d, "--count", "2", "--size", "20", "--seed", "4",
            ],
            tmp.path(),
        );
        assert_eq!(code(&o), 0);
    }
    for side in ["low", "high"] {
        for i in 0..2 {
            let name = format!("{side}/synth_{i:04}.png");
            assert_eq!(
                fs::read(tmp.path().join("a").join(&name)).unwrap(),
                fs::read(tmp.path().join("b").join(&name)).unwrap()
            );
        }
    }
}

#[test]
fn jobs_do_not_change_results() {
    let tmp = tempfile::tempdir().unwrap();
    write_dark(&tmp.path().join("in"), 3, 20);
    for (d, j) in [("j1", "1"), ("j3", "3")] {
        assert_eq!(
            code(&rsfactor(
                &["enhance", "in", "--outdir", d, "--jobs", j],
                tmp.path()
            )),
            0
        );
        assert_eq!(
            code(&rsfactor(
                &["factorize", "in", "--outdir", &format!("{d}f"), "--jobs", j],
                tmp.path()
            )),
            0
        );
    }
    for sub in ["", "f"] {
        let list = |d: &str| {
            let mut v: Vec<_> = fs::read_dir(tmp.path().join(d))
                .unwrap()
                .map(|e| e.unwrap().path())
                .collect();
            v.sort();
            v
        };
        let (a, b) = (list(&format!("j1{sub}")), list(&format!("j3{sub}")));
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(
                fs::read(x).unwrap(),
                fs::read(y).unwrap(),
                "{}",
                x.display()
            );
        }
    }
}
