use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;
use wsban::config::RunConfig;
use wsban::localization::{self, BoundingBox};
use wsban::viz;

const TINY_MODEL: [&str; 6] = ["--set", "parts=2", "--set", "channels=4,6", "--set", "batch_size=8"];

fn wsban(args: &[&str]) -> Output {
    wsban_env(args, &[])
}

fn wsban_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_wsban"));
    cmd.args(args).env_remove("WSBAN_SEED");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn assert_ok(o: &Output) {
    assert!(
        o.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status,
        stdout(o),
        String::from_utf8_lossy(&o.stderr)
    );
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small 16×16 two-class dataset under `dir/data`.
fn tiny_data(dir: &Path) -> PathBuf {
    let out = dir.join("data");
    let o = wsban(&[
        "gen-data", "--classes", "2", "--train", "16", "--test", "8", "--seed", "3", "--set", "image_size=16",
        "--out", path(&out),
    ]);
    assert_ok(&o);
    out
}

/// Trains a tiny model for one epoch and returns the checkpoint path.
fn tiny_checkpoint(dir: &Path, extra: &[&str]) -> PathBuf {
    let data = tiny_data(dir);
    let ck = dir.join("model.wsbc");
    let train = data.join("train.wsbd");
    let test = data.join("test.wsbd");
    let mut args = vec![
        "train", "--train-data", path(&train), "--test-data", path(&test), "--set", "epochs=1", "--checkpoint",
        path(&ck),
    ];
    args.extend_from_slice(&TINY_MODEL);
    args.extend_from_slice(extra);
    assert_ok(&wsban(&args));
    ck
}

fn echoed(o: &Output, key: &str) -> String {
    let prefix = format!("{key} = ");
    stdout(o)
        .lines()
        .find_map(|l| l.strip_prefix(&prefix).map(str::to_string))
        .unwrap_or_else(|| panic!("{key} not echoed"))
}

#[test]
fn gen_data_is_deterministic_and_writes_a_manifest() {
    let dir = TempDir::new().unwrap();
    let a = tiny_data(&dir.path().join("a"));
    let b = tiny_data(&dir.path().join("b"));
    for name in ["train.wsbd", "test.wsbd", "manifest.txt"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    let manifest = fs::read_to_string(a.join("manifest.txt")).unwrap();
    assert!(manifest.contains("num_classes = 2"));
}

#[test]
fn gen_data_without_out_is_a_usage_error() {
    let o = wsban(&["gen-data", "--classes", "8"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn overrides_presets_and_seeds_show_in_the_echo() {
    let dir = TempDir::new().unwrap();
    let data = tiny_data(dir.path());
    let train = data.join("train.wsbd");
    let test = data.join("test.wsbd");
    let base = ["train", "--train-data", path(&train), "--test-data", path(&test), "--set", "epochs=0"];

    let o = wsban(&[&base[..], &["--set", "lambda=0"]].concat());
    assert_ok(&o);
    assert_eq!(echoed(&o, "lambda"), "0");
    assert_eq!(echoed(&o, "keep_prob"), "0.8");
    assert_eq!(echoed(&o, "beta"), "0.05");

    let o = wsban(&[&base[..], &["--ablation", "row1"]].concat());
    assert_ok(&o);
    for key in ["attention_pooling", "regularization", "dropout", "refinement"] {
        assert_eq!(echoed(&o, key), "false", "{key}");
    }

    let o = wsban_env(&base, &[("WSBAN_SEED", "9")]);
    assert_eq!(echoed(&o, "seed"), "9");
    let o = wsban_env(&[&base[..], &["--seed", "4"]].concat(), &[("WSBAN_SEED", "9")]);
    assert_eq!(echoed(&o, "seed"), "4");

    let o = wsban(&[&base[..], &["--set", "nonsense=1"]].concat());
    assert!(!o.status.success());
}

#[test]
fn echoed_config_file_reproduces_the_run_config() {
    let dir = TempDir::new().unwrap();
    let data = tiny_data(dir.path());
    let train = data.join("train.wsbd");
    let test = data.join("test.wsbd");
    let log = dir.path().join("run.log");
    let o = wsban(&[
        "train", "--train-data", path(&train), "--test-data", path(&test), "--set", "epochs=0", "--set", "theta=0.3",
        "--log", path(&log),
    ]);
    assert_ok(&o);
    let text = fs::read_to_string(&log).unwrap();
    let config: String = text
        .lines()
        .filter_map(|l| l.strip_prefix("# "))
        .map(|l| format!("{l}\n"))
        .collect();
    let parsed = RunConfig::parse(&config).unwrap();
    assert_eq!(parsed.echo(), config);
    assert_eq!(parsed.train.theta, 0.3);

    let cfg_file = dir.path().join("echo.cfg");
    fs::write(&cfg_file, &config).unwrap();
    let again = wsban(&["train", "--config", path(&cfg_file)]);
    assert_ok(&again);
    assert_eq!(stdout(&again).lines().take(config.lines().count()).collect::<Vec<_>>().join("\n") + "\n", config);
}

#[test]
fn eval_is_repeatable_and_its_box_dump_recomputes_the_metrics() {
    let dir = TempDir::new().unwrap();
    let ck = tiny_checkpoint(dir.path(), &[]);
    let test = dir.path().join("data/test.wsbd");
    let dump = dir.path().join("boxes.txt");
    let args = ["eval", "--checkpoint", path(&ck), "--test-data", path(&test), "--dump-boxes", path(&dump)];
    let first = wsban(&args);
    assert_ok(&first);
    let second = wsban(&args);
    assert_eq!(stdout(&first), stdout(&second));

    let rows = localization::parse_box_list(&fs::read_to_string(&dump).unwrap()).unwrap();
    assert_eq!(rows.len(), 8);
    let data = wsban::data::Dataset::load(&test).unwrap();
    let ious: Vec<f64> = rows
        .iter()
        .map(|(i, b, _)| localization::iou(b, &data.samples[*i].object_box))
        .collect();
    for ((_, _, dumped), recomputed) in rows.iter().zip(&ious) {
        assert_eq!(dumped, recomputed);
    }
    let m = localization::metrics_from_ious(&ious);
    let report = stdout(&first);
    let value = |key: &str| -> f64 {
        report
            .lines()
            .find_map(|l| l.strip_prefix(&format!("{key}\t")))
            .unwrap()
            .parse()
            .unwrap()
    };
    assert_eq!(value("mIoU"), m.miou);
    assert_eq!(value("loc_error"), m.loc_error);
}

#[test]
fn eval_rejects_mismatched_or_damaged_checkpoints() {
    let dir = TempDir::new().unwrap();
    let ck = tiny_checkpoint(dir.path(), &[]);
    let other = dir.path().join("other");
    assert_ok(&wsban(&[
        "gen-data", "--classes", "3", "--train", "3", "--test", "3", "--set", "image_size=16", "--out",
        path(&other),
    ]));
    let o = wsban(&["eval", "--checkpoint", path(&ck), "--test-data", path(&other.join("test.wsbd"))]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("classes"));

    let mut bytes = fs::read(&ck).unwrap();
    bytes[4] = 99;
    let bad = dir.path().join("bad.wsbc");
    fs::write(&bad, bytes).unwrap();
    let o = wsban(&["eval", "--checkpoint", path(&bad)]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("version"));
}

fn green_bounds(ppm: &[u8]) -> (usize, usize, usize, usize) {
    let (_, w, h, px) = viz::parse_pnm(ppm).unwrap();
    let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0, 0);
    for y in 0..h {
        for x in 0..w {
            let o = (y * w + x) * 3;
            if px[o..o + 3] == viz::PREDICTED_COLOR {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    (x0, y0, x1, y1)
}

#[test]
fn visualize_writes_every_map_and_draws_the_evaluated_box() {
    let dir = TempDir::new().unwrap();
    let ck = tiny_checkpoint(dir.path(), &[]);
    let test = dir.path().join("data/test.wsbd");
    let out = dir.path().join("viz");
    let o = wsban(&[
        "visualize", "--checkpoint", path(&ck), "--data", path(&test), "--samples", "1,5", "--out", path(&out),
    ]);
    assert_ok(&o);
    let files: Vec<String> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert_eq!(files.iter().filter(|f| f.starts_with("sample1_")).count(), 2 + 1 + 2);
    assert_eq!(files.iter().filter(|f| f.ends_with(".pgm")).count(), 2 * 3);
    assert_eq!(files.iter().filter(|f| f.ends_with(".ppm")).count(), 2 * 2);

    let dump = dir.path().join("boxes.txt");
    assert_ok(&wsban(&["eval", "--checkpoint", path(&ck), "--test-data", path(&test), "--dump-boxes", path(&dump)]));
    let rows = localization::parse_box_list(&fs::read_to_string(&dump).unwrap()).unwrap();
    for i in [1usize, 5] {
        let bx: BoundingBox = rows[i].1;
        let overlay = fs::read(out.join(format!("sample{i}_overlay.ppm"))).unwrap();
        assert_eq!(green_bounds(&overlay), bx.pixel_bounds(16, 16), "sample {i}");
    }

    let o = wsban(&["visualize", "--checkpoint", path(&ck), "--data", path(&test), "--samples", "8", "--out", path(&out)]);
    assert!(!o.status.success());
}

#[test]
fn gradcheck_passes_and_notices_a_broken_backward() {
    let o = wsban(&["gradcheck", "--op", "conv2d"]);
    assert_ok(&o);
    assert!(stdout(&o).contains("conv2d"));
    let o = wsban(&["gradcheck", "--op", "matmul", "--corrupt", "1.01"]);
    assert!(!o.status.success());
    let o = wsban(&["gradcheck", "--op", "no_such_op"]);
    assert!(!o.status.success());
}

#[test]
fn ablate_prints_one_row_per_preset() {
    let dir = TempDir::new().unwrap();
    let data = tiny_data(dir.path());
    let train = data.join("train.wsbd");
    let test = data.join("test.wsbd");
    let mut args = vec!["ablate", "--train-data", path(&train), "--test-data", path(&test), "--set", "epochs=1"];
    args.extend_from_slice(&TINY_MODEL);
    let o = wsban(&args);
    assert_ok(&o);
    let text = stdout(&o);
    for row in ["row1", "row2", "row3", "row4", "row5"] {
        assert!(text.lines().any(|l| l.starts_with(row)), "{row} missing:\n{text}");
    }
}
