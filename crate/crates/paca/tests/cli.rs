use std::path::Path;
use std::process::{Command, Output};

fn paca(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_paca"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn train(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "train",
        "--steps",
        "30",
        "--eval-every",
        "10",
        "--seed",
        "5",
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    paca(&args)
}

#[test]
fn exit_codes() {
    assert_eq!(paca(&["--help"]).status.code(), Some(0));
    assert_eq!(paca(&["bogus"]).status.code(), Some(1));
    assert_eq!(
        paca(&["profile", "--mechanism", "paca"]).status.code(),
        Some(1)
    );
    assert_eq!(
        paca(&["profile", "--mechanism", "paca", "--n", "16,64"])
            .status
            .code(),
        Some(1)
    );
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.paca");
    let o = paca(&["eval", "--checkpoint", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("none.paca"));
}

#[test]
fn param_count_of_presets() {
    let o = paca(&["param-count", "--model", "b0", "--geometry", "in1k"]);
    assert!(o.status.success());
    let n: f64 = stdout(&o).trim().parse().unwrap();
    assert!((n / 3.4e6 - 1.0).abs() < 0.05, "{n}");
}

#[test]
fn tiny_debug_is_labelled_unpublished() {
    let help = stdout(&paca(&["train", "--help"]));
    assert!(help.contains("tiny-debug") && help.contains("not a published configuration"));
}

#[test]
fn profile_prints_linear_slope() {
    let dir = tempfile::tempdir().unwrap();
    let o = paca(&[
        "profile",
        "--mechanism",
        "paca",
        "--n",
        "256,1024,4096",
        "--c",
        "64",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let text = stdout(&o);
    let footer = text.lines().last().unwrap();
    let slope: f64 = footer.split(',').nth(4).unwrap().parse().unwrap();
    assert!((slope - 1.0).abs() < 0.05);
    assert_eq!(
        std::fs::read_to_string(dir.path().join("profile.csv")).unwrap(),
        text
    );
}

#[test]
fn training_is_reproducible_and_checkpoints_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(train(&a, &[]).status.success());
    assert!(train(&b, &[]).status.success());
    let ma = std::fs::read(a.join("metrics.csv")).unwrap();
    assert_eq!(ma, std::fs::read(b.join("metrics.csv")).unwrap());
    assert_eq!(
        std::fs::read(a.join("final.paca")).unwrap(),
        std::fs::read(b.join("final.paca")).unwrap()
    );
    let header = String::from_utf8(ma).unwrap();
    assert!(header.starts_with("step,lr,loss,eval_top1\n"));
    assert_eq!(header.lines().count(), 31);

    let ckpt = a.join("final.paca");
    let o = paca(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--seed",
        "5",
    ]);
    assert!(o.status.success());
    let top1: f64 = stdout(&o)
        .trim()
        .strip_prefix("top1=")
        .unwrap()
        .parse()
        .unwrap();
    assert!((0.0..=1.0).contains(&top1));

    // wrong class count for this checkpoint
    let o = paca(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--classes",
        "7",
    ]);
    assert_eq!(o.status.code(), Some(2));

    let ex = dir.path().join("ex");
    let o = paca(&[
        "explain",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--seed",
        "5",
        "--index",
        "3",
        "--layer",
        "0",
        "--top-k",
        "2",
        "--out",
        ex.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "input.ppm",
        "heatmap_000.pgm",
        "heatmap_003.pgm",
        "importance.csv",
    ] {
        assert!(ex.join(f).is_file(), "{f}");
    }
    let hm = paca::netpbm::read(&ex.join("heatmap_000.pgm")).unwrap();
    assert_eq!((hm.width, hm.height, hm.channels), (8, 8, 1));
    let overlays = std::fs::read_dir(&ex)
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .file_name()
                .to_string_lossy()
                .starts_with("overlay_rank")
        })
        .count();
    assert_eq!(overlays, 2);
    let csv = std::fs::read_to_string(ex.join("importance.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# short run\nsteps = 12\neval_every=6\nseed=5\n").unwrap();
    let out = dir.path().join("c");
    let o = paca(&[
        "--config",
        cfg.to_str().unwrap(),
        "train",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        std::fs::read_to_string(out.join("metrics.csv"))
            .unwrap()
            .lines()
            .count(),
        13
    );

    let out = dir.path().join("d");
    let o = paca(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--steps",
        "8",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    assert_eq!(
        std::fs::read_to_string(out.join("metrics.csv"))
            .unwrap()
            .lines()
            .count(),
        9
    );

    std::fs::write(&cfg, "not a pair\n").unwrap();
    assert_eq!(
        paca(&["--config", cfg.to_str().unwrap(), "train", "--out", "x"])
            .status
            .code(),
        Some(1)
    );
}
