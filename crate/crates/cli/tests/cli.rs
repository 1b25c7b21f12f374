//! End-to-end runs of the `fcsin` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fcsin_core::synthetic::{render, Shape};
use fcsin_core::training::{Checkpoint, TrainConfig, CONFIG_KEYS};
use fcsin_core::Raster;

fn fcsin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fcsin"))
        .args(args)
        .env_remove(fcsin_cli::SEED_ENV)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A clip of gray sketch frames: a ring moving 2 px per frame.
fn write_clip(dir: &Path, frames: usize) {
    std::fs::create_dir_all(dir).unwrap();
    for k in 0..frames {
        let r = render(32, 32, &[(Shape::Ring, (10.0 + 2.0 * k as f64, 16.0), 6.0)], 2.0).unwrap();
        r.save_png(dir.join(format!("{k:03}.png"))).unwrap();
    }
}

/// Colour frames with a filled disc on a tinted background.
fn write_colour_frames(dir: &Path, n: usize) {
    std::fs::create_dir_all(dir).unwrap();
    for k in 0..n {
        let (h, w) = (24, 32);
        let mut data = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                let d = ((x as f64 - 10.0 - k as f64).powi(2) + (y as f64 - 12.0).powi(2)).sqrt();
                if d < 6.0 {
                    data.extend([0.8, 0.2, 0.1]);
                } else {
                    data.extend([0.9, 0.95, 1.0]);
                }
            }
        }
        Raster::new(h, w, 3, data).unwrap().save_png(dir.join(format!("f{k:02}.png"))).unwrap();
    }
}

const TINY: &str = "net.channels = 8\nnet.scales = 2\nnet.window = 4\ndata.crop_width = 32\ndata.crop_height = 32\ntrain.batch_size = 2\n";

/// Dataset + a 2-step checkpoint in a temp dir.
fn trained(extra: &[&str]) -> (tempfile::TempDir, PathBuf, PathBuf) {
    let tmp = tempfile::tempdir().unwrap();
    let frames = tmp.path().join("frames");
    write_clip(&frames.join("clipA"), 5);
    let data = tmp.path().join("data");
    let o = fcsin(&["build-dataset", s(&frames), s(&data)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cfg = tmp.path().join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let run = tmp.path().join("run");
    let mut args = vec!["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run), "--max-steps", "2"];
    args.extend_from_slice(extra);
    let o = fcsin(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let ck = run.join("checkpoint.ckpt");
    (tmp, data, ck)
}

#[test]
fn every_flag_names_a_config_key() {
    let root = fcsin_cli::command();
    let mut seen = 0;
    for sub in root.get_subcommands() {
        for arg in sub.get_arguments().chain(root.get_arguments()) {
            let Some(long) = arg.get_long() else { continue };
            if long == "help" || long == "version" {
                continue;
            }
            let help = arg.get_help().map(|h| h.to_string()).unwrap_or_default();
            let key = help
                .rsplit_once("[config: ")
                .and_then(|(_, k)| k.strip_suffix(']'))
                .unwrap_or_else(|| panic!("{} --{long}: help lacks a config key: {help}", sub.get_name()));
            let known = CONFIG_KEYS.iter().any(|(k, _)| *k == key) || matches!(key, "all keys" | "any key");
            assert!(known, "{} --{long} -> unknown key {key}", sub.get_name());
            seen += 1;
        }
    }
    assert!(seen > 20);
}

#[test]
fn sketchize_maps_frames_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("in");
    write_colour_frames(&input.join("clip"), 10);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let o = fcsin(&["sketchize", s(&input), s(&a)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("clip: 10 frames"));
    let pngs = |d: &Path| {
        let mut v: Vec<PathBuf> = std::fs::read_dir(d.join("clip")).unwrap().map(|e| e.unwrap().path()).collect();
        v.sort();
        v
    };
    assert_eq!(pngs(&a).len(), 10);
    assert!(fcsin(&["sketchize", s(&input), s(&b)]).status.success());
    for (x, y) in pngs(&a).iter().zip(pngs(&b)) {
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
    }
}

#[test]
fn sketchize_input_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("does-not-exist");
    let o = fcsin(&["sketchize", s(&missing), s(&tmp.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("does-not-exist"), "{}", stderr(&o));
    let empty = tmp.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let o = fcsin(&["sketchize", s(&empty), s(&tmp.path().join("o"))]);
    assert_ne!(o.status.code(), Some(0));
}

#[test]
fn usage_errors_exit_two() {
    let o = fcsin(&["train", "--ablate", "no-foo", "--data", "x"]);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr(&o);
    for name in ["no-pixel", "no-sketch", "no-region", "no-ccb"] {
        assert!(e.contains(name), "{e}");
    }
    assert_eq!(fcsin(&["train", "--bogus-flag"]).status.code(), Some(2));
    assert_eq!(fcsin(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(fcsin(&["train", "--set", "net.nothing=1"]).status.code(), Some(2));
    assert_eq!(fcsin(&["train"]).status.code(), Some(2), "no dataset");
    assert_eq!(fcsin(&["--help"]).status.code(), Some(0));
}

#[test]
fn train_interpolate_evaluate_round_trip() {
    let (tmp, data, ck) = trained(&["--trace-times", "0.25,0.5,0.75", "--seed", "4"]);
    let c = Checkpoint::load(&ck).unwrap();
    assert_eq!(c.config.net_config().trace_depth, 3);
    assert_eq!(c.seed, 4);
    assert_eq!(c.optim.step, 2);
    let log = std::fs::read_to_string(ck.with_file_name("loss.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("step,l1,lpips,total"));
    assert_eq!(log.lines().count(), 3);

    let f0 = data.join("clipA/t00000/frame0.png");
    let f1 = data.join("clipA/t00000/frame2.png");
    let (o1, o2) = (tmp.path().join("mid1.png"), tmp.path().join("mid2.png"));
    let o = fcsin(&["interpolate", s(&ck), s(&f0), s(&f1), s(&o1), "--dump-guidance"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(fcsin(&["interpolate", s(&ck), s(&f0), s(&f1), s(&o2)]).status.success());
    assert_eq!(std::fs::read(&o1).unwrap(), std::fs::read(&o2).unwrap());
    let img = fcsin_core::frames_io::load_raster(&o1).unwrap();
    assert_eq!((img.height(), img.width()), (32, 32));
    let dumped = std::fs::read_dir(tmp.path().join("mid1_guidance")).unwrap().count();
    assert_eq!(dumped, 7);

    let eval = tmp.path().join("eval");
    let o = fcsin(&["evaluate", s(&ck), s(&data), s(&eval), "--predict-target"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("SSIM 1.0000"), "{}", stdout(&o));
    let csv = std::fs::read_to_string(eval.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("id,PSNR,SSIM,IE,CD"));
    assert_eq!(csv.lines().count(), 4);
    assert!(eval.join("summary.txt").is_file());

    let o = fcsin(&["evaluate", s(&ck), s(&data), s(&tmp.path().join("eval2"))]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn interpolate_rejects_mismatched_frames() {
    let (tmp, data, ck) = trained(&[]);
    let f0 = data.join("clipA/t00000/frame0.png");
    let other = tmp.path().join("wide.png");
    Raster::filled(32, 40, 1, 1.0).unwrap().save_png(&other).unwrap();
    let o = fcsin(&["interpolate", s(&ck), s(&f0), s(&other), s(&tmp.path().join("x.png"))]);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr(&o);
    assert!(e.contains("32x32") && e.contains("40x32"), "{e}");
    let o = fcsin(&["interpolate", s(&tmp.path().join("nope.ckpt")), s(&f0), s(&f0), s(&tmp.path().join("x.png"))]);
    assert_ne!(o.status.code(), Some(0));
}

#[test]
fn seed_env_is_a_fallback() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.cfg");
    std::fs::write(&cfg, "train.seed = 11\n").unwrap();
    let m = fcsin_cli::command().get_matches_from(["fcsin", "train", "--config", s(&cfg)]);
    let (_, sub) = m.subcommand().unwrap();
    std::env::set_var(fcsin_cli::SEED_ENV, "99");
    let from_file = fcsin_cli::resolve_config("train", sub, TrainConfig::default()).unwrap();
    let m = fcsin_cli::command().get_matches_from(["fcsin", "train"]);
    let from_env = fcsin_cli::resolve_config("train", m.subcommand().unwrap().1, TrainConfig::default()).unwrap();
    let m = fcsin_cli::command().get_matches_from(["fcsin", "train", "--seed", "5"]);
    let from_flag = fcsin_cli::resolve_config("train", m.subcommand().unwrap().1, TrainConfig::default()).unwrap();
    std::env::remove_var(fcsin_cli::SEED_ENV);
    assert_eq!((from_file.seed, from_env.seed, from_flag.seed), (11, 99, 5));
}
