use std::path::Path;
use std::process::{Command, Output};

fn fogcount(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fogcount"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn fogcount")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn synth(dir: &Path, seed: &str) -> Output {
    fogcount(&["synth", "--seed", seed, "--out", dir.to_str().unwrap(), "--train", "4", "--val", "2", "--test", "2"])
}

#[test]
fn synth_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(synth(&a, "7").status.success());
    assert!(synth(&b, "7").status.success());
    let ma = std::fs::read_to_string(a.join("manifest.txt")).unwrap();
    assert_eq!(ma, std::fs::read_to_string(b.join("manifest.txt")).unwrap());
    assert_eq!(ma.lines().filter(|l| !l.starts_with('#')).count(), 8 * 4);
    assert!(synth(&b, "8").status.success());
    assert_ne!(ma, std::fs::read_to_string(b.join("manifest.txt")).unwrap());
}

#[test]
fn unknown_flag_is_named() {
    let o = fogcount(&["synth", "--bogus", "3"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("--bogus"), "{}", stderr(&o));
}

#[test]
fn missing_files_are_named() {
    let o = fogcount(&["train", "--bench", "/nonexistent/bench", "--config", "/nonexistent/cfg.txt"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("/nonexistent/cfg.txt"), "{}", stderr(&o));

    let o = fogcount(&["eval", "--checkpoint", "/nonexistent/m.fckp", "--bench", "/tmp"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("--checkpoint") && stderr(&o).contains("/nonexistent/m.fckp"));

    let tmp = tempfile::tempdir().unwrap();
    let o = fogcount(&["train", "--bench", tmp.path().to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("manifest.txt"), "{}", stderr(&o));
}

#[test]
fn bad_config_values_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.txt");
    std::fs::write(&cfg, "dcp_window = 4\n").unwrap();
    let o = fogcount(&["train", "--config", cfg.to_str().unwrap(), "--bench", "/tmp"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("cfg.txt"), "{}", stderr(&o));

    let o = fogcount(&["train", "--set", "epochs", "--bench", "/tmp"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("--set"));
}

#[test]
fn train_eval_infer_dehaze_round() {
    let tmp = tempfile::tempdir().unwrap();
    let bench = tmp.path().join("bench");
    let run = tmp.path().join("run");
    assert!(synth(&bench, "3").status.success());
    let p = |x: &Path| x.to_str().unwrap().to_string();

    let cfg = tmp.path().join("cfg.txt");
    std::fs::write(&cfg, "# tiny run\nepochs = 1\nbatch = 2\n").unwrap();
    let o = fogcount(&["train", "--bench", &p(&bench), "--config", &p(&cfg), "--seed", "5", "--out", &p(&run)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("best val MAE"));
    for f in ["best.fckp", "last_good.fckp", "train_log.tsv", "config.txt"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    assert!(std::fs::read_to_string(run.join("config.txt")).unwrap().contains("seed = 5"));

    let ck = p(&run.join("best.fckp"));
    let ev = tmp.path().join("eval");
    let o = fogcount(&["eval", "--checkpoint", &ck, "--bench", &p(&bench), "--tier", "none", "--out", &p(&ev)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = stdout(&o);
    assert!(table.contains("none\t0\t2") && !table.contains("severe"), "{table}");
    assert_eq!(std::fs::read_to_string(ev.join("plot_mae.txt")).unwrap().lines().count(), 1);
    let o = fogcount(&["eval", "--checkpoint", &ck, "--bench", &p(&bench), "--tier", "dense"]);
    assert!(!o.status.success() && stderr(&o).contains("--tier"));

    let image = p(&bench.join("items/test-0000.moderate.png"));
    let inf = tmp.path().join("infer");
    let o = fogcount(&["infer", "--checkpoint", &ck, "--image", &image, "--out", &p(&inf)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let count: f64 = stdout(&o).lines().next().unwrap().trim_start_matches("count ").parse().unwrap();
    let map = fogcount::io::read_fcdm(&inf.join("density.fcdm")).unwrap();
    assert!((map.sum() - count).abs() < 1e-3);
    assert_eq!(map.shape(), &[64, 64]);

    let dh = tmp.path().join("dehaze");
    let o = fogcount(&["dehaze", "--checkpoint", &ck, "--image", &image, "--out", &p(&dh)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dh.join("dehazed.png").is_file());
    let t = fogcount::io::read_fcdm(&dh.join("t.fcdm")).unwrap();
    assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));

    let o = fogcount(&["infer", "--checkpoint", &ck, "--image", "/nonexistent.png"]);
    assert!(!o.status.success() && stderr(&o).contains("--image"));
}

#[test]
fn ablate_runs_selected_variants() {
    let tmp = tempfile::tempdir().unwrap();
    let bench = tmp.path().join("bench");
    assert!(synth(&bench, "4").status.success());
    let out = tmp.path().join("ab");
    let o = fogcount(&[
        "ablate",
        "--bench",
        bench.to_str().unwrap(),
        "--set",
        "epochs=1",
        "--seeds",
        "0",
        "--variants",
        "no_physics,no_wgcn",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = std::fs::read_to_string(out.join("ablation.tsv")).unwrap();
    assert!(table.contains("no_physics\tsevere") && table.contains("no_wgcn\tnone") && !table.contains("\tfull\t"));
    assert!(out.join("no_physics-s0/best.fckp").is_file());

    let o = fogcount(&["ablate", "--bench", bench.to_str().unwrap(), "--variants", "no_foo"]);
    assert!(!o.status.success() && stderr(&o).contains("--variants"));
}

#[test]
fn gradcheck_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let o = fogcount(&["gradcheck", "--out", tmp.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let line = stdout(&o);
    let err: f64 = line.split("max relative error ").nth(1).unwrap().split_whitespace().next().unwrap().parse().unwrap();
    assert!(err < 1e-4, "{line}");
    assert!(tmp.path().join("gradcheck.tsv").is_file());
}
