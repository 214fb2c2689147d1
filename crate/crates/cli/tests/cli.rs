use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use physlatent::eval::parse_metrics_csv;
use physlatent::scenarios::{ScenarioConfig, FRAME_MAGIC};
use physlatent::training::TrainConfig;
use sha2::{Digest, Sha256};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_physlatent"))
        .args(args)
        .env_remove("PHYSLATENT_OUT_ROOT")
        .env_remove("PHYSLATENT_THREADS")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

const TINY: &str = "kind = \"decaying_turbulence\"\nresolution = [32, 32]\ndt = 1.0\nnu = 0.1\nframes = 6\n\
simulations = 2\nseed = 11\nvalidation_fraction = 0.0\n";

const TINY_TRAIN: &str = "model_kind = \"ato\"\nscenario = \"decaying_turbulence\"\nsteps = 2\nepochs = 1\n\
windows_per_epoch = 2\nbatch_size = 2\nseed = 4\n";

/// Tiny dataset plus a one-epoch ATO checkpoint.
fn tiny_run(tmp: &Path) -> (PathBuf, PathBuf) {
    let data = tmp.join("data");
    let model = tmp.join("model");
    ok(&["generate-data", "--config", s(&write(tmp, "tiny.toml", TINY)), "--out", s(&data)]);
    ok(&["train", "--config", s(&write(tmp, "train.toml", TINY_TRAIN)), "--data", s(&data), "--out", s(&model)]);
    (data, model.join("model.ckpt"))
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "manifest.json" {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn read_rollout(path: &Path) -> (usize, usize, Vec<f32>) {
    let b = std::fs::read(path).unwrap();
    assert_eq!(&b[..8], b"PLROLL01");
    let count = u32::from_le_bytes(b[8..12].try_into().unwrap()) as usize;
    let len = u32::from_le_bytes(b[12..16].try_into().unwrap()) as usize;
    let values: Vec<f32> = b[16..].chunks(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    assert_eq!(values.len(), count * len);
    (count, len, values)
}

#[test]
fn missing_kind_names_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "bad.toml", "resolution = [32, 32]\ndt = 1.0\nframes = 2\nsimulations = 1\nseed = 0\n");
    let out = run(&["generate-data", "--config", s(&cfg), "--out", s(&tmp.path().join("d"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("`kind`"));
}

#[test]
fn desk_decaying_config_writes_four_simulations_of_fifty_frames() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("data");
    let out = ok(&["generate-data", "--config", s(&configs().join("decaying.toml")), "--out", s(&dir)]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("4 simulations"));
    let sims: Vec<_> = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_dir())
        .collect();
    assert_eq!(sims.len(), 4);
    // Header, then u and v faces of a 64² grid as f32 per frame.
    let expected = 8 + 5 * 4 + 50 * (65 * 64 * 2) * 4;
    for sim in &sims {
        let bytes = std::fs::read(sim.join("frames.bin")).unwrap();
        assert_eq!(&bytes[..8], FRAME_MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[20..24].try_into().unwrap()), 50);
        assert_eq!(bytes.len(), expected);
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    let stored = std::fs::read(dir.join("config.toml")).unwrap();
    let hash: String = Sha256::digest(&stored).iter().map(|b| format!("{b:02x}")).collect();
    assert_eq!(manifest["config_hash"], hash);
    assert_eq!(manifest["command"], "generate-data");
    assert_eq!(manifest["seed"], 7);
}

#[test]
fn same_seed_reruns_are_bit_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "tiny.toml", TINY);
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    ok(&["generate-data", "--config", s(&cfg), "--out", s(&a)]);
    ok(&["generate-data", "--config", s(&cfg), "--out", s(&b), "--threads", "1"]);
    ok(&["generate-data", "--config", s(&cfg), "--out", s(&c), "--seed", "12"]);
    assert_eq!(files(&a), files(&b));
    assert_ne!(files(&a), files(&c));
}

#[test]
fn output_directory_is_not_overwritten_without_force() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "tiny.toml", TINY);
    let dir = tmp.path().join("d");
    ok(&["generate-data", "--config", s(&cfg), "--out", s(&dir)]);
    let out = run(&["generate-data", "--config", s(&cfg), "--out", s(&dir)]);
    assert_eq!(out.status.code(), Some(7));
    ok(&["generate-data", "--config", s(&cfg), "--out", s(&dir), "--force"]);
}

#[test]
fn output_root_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "tiny.toml", TINY);
    let out = Command::new(env!("CARGO_BIN_EXE_physlatent"))
        .args(["generate-data", "--config", s(&cfg), "--out", "rel"])
        .env("PHYSLATENT_OUT_ROOT", tmp.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(tmp.path().join("rel/dataset.json").exists());
}

#[test]
fn train_evaluate_rollout_and_benchmark_write_their_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, ckpt) = tiny_run(tmp.path());
    let model_dir = ckpt.parent().unwrap();
    for f in ["manifest.json", "config.toml", "train_log.csv", "stage_n2.ckpt"] {
        assert!(model_dir.join(f).exists(), "{f}");
    }

    let eval = tmp.path().join("eval");
    ok(&["evaluate", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&eval)]);
    let rows = parse_metrics_csv(&eval.join("metrics.csv")).unwrap();
    assert!(rows.iter().any(|r| r.model == "ato" && r.trajectory == "pooled"));
    for f in ["curves.csv", "runtime.csv", "maps.csv", "report.json", "manifest.json"] {
        assert!(eval.join(f).exists(), "{f}");
    }

    let roll = tmp.path().join("roll");
    let frame = data.join("sim_0000/frames.bin");
    ok(&["rollout", "--checkpoint", s(&ckpt), "--frame", s(&frame), "--steps", "3", "--out", s(&roll)]);
    let (count, len, values) = read_rollout(&roll.join("decoded.bin"));
    assert_eq!((count, len), (4, 2 * 32 * 32));
    assert!(values.iter().all(|v| v.is_finite()));
    assert_eq!(read_rollout(&roll.join("latent.bin")).0, 4);

    let bench = tmp.path().join("bench");
    ok(&["benchmark", "--checkpoint", s(&ckpt), "--data", s(&data), "--steps", "2", "--repeats", "2", "--out", s(&bench)]);
    let csv = std::fs::read_to_string(bench.join("runtime.csv")).unwrap();
    let models: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(models, ["ato", "baseline", "reference"]);
}

#[test]
fn rollout_of_zero_steps_emits_only_the_decoded_initial_frame() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, ckpt) = tiny_run(tmp.path());
    let roll = tmp.path().join("roll");
    let frame = data.join("sim_0001/frames.bin");
    ok(&["rollout", "--checkpoint", s(&ckpt), "--frame", s(&frame), "--index", "2", "--steps", "0", "--out", s(&roll)]);
    let (count, len, _) = read_rollout(&roll.join("decoded.bin"));
    assert_eq!((count, len), (1, 2 * 32 * 32));
    assert_eq!(read_rollout(&roll.join("latent.bin")).0, 1);

    let out = run(&["rollout", "--checkpoint", s(&ckpt), "--frame", s(&frame), "--index", "6", "--steps", "0", "--out", s(&tmp.path().join("r2"))]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn baseline_pseudo_checkpoint_reports_zero_improvement() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&["generate-data", "--config", s(&write(tmp.path(), "tiny.toml", TINY)), "--out", s(&data)]);
    let eval = tmp.path().join("eval");
    ok(&["evaluate", "--checkpoint", "baseline", "--data", s(&data), "--out", s(&eval)]);
    let rows = parse_metrics_csv(&eval.join("metrics.csv")).unwrap();
    assert!(!rows.is_empty());
    for r in &rows {
        assert_eq!(r.improvement_velocity_mae, 0.0);
        assert_eq!(r.improvement_vorticity_mse, 0.0);
        assert!(r.velocity_mae > 0.0);
    }
}

#[test]
fn checkpoint_from_another_scenario_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, ckpt) = tiny_run(tmp.path());
    let forced = TINY.replace("decaying_turbulence", "forced_turbulence") + "[forced]\n";
    let data = tmp.path().join("forced");
    ok(&["generate-data", "--config", s(&write(tmp.path(), "forced.toml", &forced)), "--out", s(&data)]);
    let out = run(&["evaluate", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&tmp.path().join("e"))]);
    assert_eq!(out.status.code(), Some(5));
    assert!(String::from_utf8_lossy(&out.stderr).contains("incompatible checkpoint"));

    let garbage = write(tmp.path(), "garbage.ckpt", "not a checkpoint");
    let out = run(&["evaluate", "--checkpoint", s(&garbage), "--data", s(&data), "--out", s(&tmp.path().join("g"))]);
    assert_eq!(out.status.code(), Some(5));
}

#[test]
fn missing_inputs_and_bad_flags_have_distinct_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["evaluate", "--checkpoint", "baseline", "--data", s(&tmp.path().join("nope")), "--out", s(&tmp.path().join("e"))]);
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(run(&["generate-data", "--bogus"]).status.code(), Some(2));
}

#[test]
fn shipped_configs_validate() {
    let mut n = 0;
    for e in std::fs::read_dir(configs()).unwrap() {
        let p = e.unwrap().path();
        let text = std::fs::read_to_string(&p).unwrap();
        let name = p.file_name().unwrap().to_str().unwrap();
        if name.starts_with("train_") {
            TrainConfig::from_toml(&text).unwrap_or_else(|e| panic!("{name}: {e}"));
        } else {
            ScenarioConfig::from_toml(&text).unwrap_or_else(|e| panic!("{name}: {e}"));
        }
        n += 1;
    }
    assert!(n >= 8);
}
