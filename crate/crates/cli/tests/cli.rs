use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mfdiff_core::dataset::{read_f32, write_f32, MultiFidelityDataset};
use mfdiff_core::sampler::{generate_ensemble, SamplerConfig};
use mfdiff_core::score_net::FidelityMode;
use mfdiff_core::trainer::load_checkpoint;
use serde_json::json;

fn mfdiff(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfdiff"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .env_remove("MFDIFF_JOBS")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn small_config(dir: &Path, name: &str, mode: &str) -> PathBuf {
    let cfg = json!({
        "dataset_dir": "data/train",
        "out_dir": format!("runs/{name}"),
        "fidelity_mode": mode,
        "seed": 5,
        "data": {"pde": "heat", "fidelities": [8, 16], "counts": [6, 3], "test_count": 2},
        "model": {"channel_schedule": [4, 4, 8], "attention_resolutions": [4]},
        "train": {"total_steps": 6, "batch_size": 3, "checkpoint_every": 3},
        "sampler": {"num_steps": 8, "ensemble_k": 2}
    });
    let path = dir.join(format!("{name}.json"));
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn gen_small(dir: &Path) {
    ok(&mfdiff(dir, &["gen-data", "--pde", "heat", "--fidelities", "8,16", "--counts", "6,3", "--seed", "1", "--out", "data/train"]));
    ok(&mfdiff(dir, &["gen-data", "--pde", "heat", "--fidelities", "16", "--counts", "2", "--seed", "2", "--out", "data/test"]));
}

#[test]
fn gen_data_follows_the_heat_protocol() {
    let dir = tempfile::tempdir().unwrap();
    let out = mfdiff(
        dir.path(),
        &["gen-data", "--pde", "heat", "--fidelities", "8,16,32,64", "--counts", "128,64,32,8", "--seed", "1", "--out", "train"],
    );
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("232 examples"));
    let ds = MultiFidelityDataset::load(&dir.path().join("train")).unwrap();
    assert_eq!(ds.len(), 232);
    assert_eq!(ds.grid(), 64);

    ok(&mfdiff(dir.path(), &["gen-data", "--pde", "heat", "--fidelities", "64", "--counts", "128", "--seed", "2", "--out", "test"]));
    let test = MultiFidelityDataset::load(&dir.path().join("test")).unwrap();
    assert_eq!(test.len(), 128);
    assert!(test.examples.iter().all(|e| e.fidelity == 0));
}

#[test]
fn gen_data_rejects_bad_flags() {
    let dir = tempfile::tempdir().unwrap();
    let out = mfdiff(dir.path(), &["gen-data", "--pde", "heat", "--fidelities", "8,16", "--counts", "4", "--out", "d"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    let out = mfdiff(dir.path(), &["gen-data", "--pde", "wave", "--fidelities", "8", "--counts", "4", "--out", "d"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    let out = mfdiff(dir.path(), &["gen-data", "--pde", "heat"]);
    assert_eq!(out.status.code(), Some(2));
    let out = mfdiff(dir.path(), &["--jobs", "0", "gen-data", "--pde", "heat", "--fidelities", "8", "--counts", "1", "--out", "d"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn malformed_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, r#"{"fidelity_mode": "discrete", "train": {"steps": 3}}"#).unwrap();
    let out = mfdiff(dir.path(), &["train", "--config", "bad.json"]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("dataset_dir") && err.contains("train.steps"), "{err}");
}

#[test]
fn train_modes_set_fidelity_conditioning() {
    let dir = tempfile::tempdir().unwrap();
    gen_small(dir.path());
    for (mode, expect) in [("discrete", FidelityMode::Discrete { levels: 2 }), ("continuous", FidelityMode::Continuous)] {
        let cfg = small_config(dir.path(), mode, mode);
        ok(&mfdiff(dir.path(), &["train", "--config", cfg.to_str().unwrap()]));
        let run = dir.path().join("runs").join(mode);
        for f in ["config.json", "provenance.json", "train_log.csv", "checkpoints/checkpoint_00000003.mfdf"] {
            assert!(run.join(f).exists(), "{f} missing");
        }
        let state = load_checkpoint(&run.join("checkpoints/checkpoint_00000006.mfdf")).unwrap();
        assert_eq!(state.model.config().fidelity_mode, expect);
        assert_eq!(state.step, 6);
        let log = fs::read_to_string(run.join("train_log.csv")).unwrap();
        assert!(log.starts_with("step,loss,wall_time_s"));
    }
}

#[test]
fn sample_and_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen_small(d);
    let cfg = small_config(d, "exp", "discrete");
    ok(&mfdiff(d, &["train", "--config", cfg.to_str().unwrap()]));

    let help = mfdiff(d, &["sample", "--help"]);
    assert!(String::from_utf8_lossy(&help.stdout).contains("[default: 2000]"));

    ok(&mfdiff(
        d,
        &["sample", "--checkpoint", "runs/exp", "--x", "0.05,0.5,0.5", "--ensemble-k", "5", "--steps", "6", "--seed", "9", "--out", "single.f32"],
    ));
    let got = read_f32(&d.join("single.f32"), 256).unwrap();
    let state = load_checkpoint(&d.join("runs/exp/checkpoints/checkpoint_00000006.mfdf")).unwrap();
    let cond = state.norm.condition(&[0.05, 0.5, 0.5], 16, state.model.config().fidelity_mode, None).unwrap();
    let sampler = SamplerConfig { num_steps: 6, ensemble_k: 5, ..SamplerConfig::default() };
    let want = generate_ensemble(&state.model, state.model.sde(), &cond, &sampler, 5, 9, &state.norm).unwrap();
    let want32: Vec<f64> = want.data().iter().map(|&v| v as f32 as f64).collect();
    assert_eq!(got, want32);

    let out = mfdiff(d, &["sample", "--checkpoint", "runs/exp", "--x", "0.05,0.5,0.5", "--tau", "0.5", "--out", "t.f32"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));

    ok(&mfdiff(d, &["sample", "--checkpoint", "runs/exp", "--test-set", "data/test", "--steps", "6", "--out", "preds"]));
    ok(&mfdiff(d, &["eval", "--pred", "preds", "--truth", "data/test", "--out", "report"]));
    let rows: Vec<String> = fs::read_to_string(d.join("report/results.csv")).unwrap().lines().map(String::from).collect();
    assert_eq!(rows[0], "method_tag,pde,fidelity_mode,ensemble_k,run,rel_l2");
    assert_eq!(rows.len(), 3);

    let out = mfdiff(d, &["eval", "--pred", "preds", "--truth", "nowhere", "--out", "r2"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn checkpoint_config_mismatch_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen_small(d);
    let cfg = small_config(d, "exp", "discrete");
    ok(&mfdiff(d, &["train", "--config", cfg.to_str().unwrap()]));
    let other = small_config(d, "other", "continuous");
    let out = mfdiff(
        d,
        &["sample", "--checkpoint", "runs/exp", "--config", other.to_str().unwrap(), "--x", "0.05,0.5,0.5", "--steps", "2", "--out", "p.f32"],
    );
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
    assert!(!d.join("p.f32").exists());
}

fn write_predictions(dir: &Path, fields: &[Vec<f64>], shape: (usize, usize, usize)) {
    fs::create_dir_all(dir).unwrap();
    for (i, f) in fields.iter().enumerate() {
        write_f32(&dir.join(format!("pred_{i}.f32")), f).unwrap();
    }
    let meta = json!({
        "method_tag": "oracle", "pde": "heat1d", "fidelity_mode": "discrete",
        "ensemble_k": 1, "count": fields.len(), "shape": [shape.0, shape.1, shape.2]
    });
    fs::write(dir.join("predictions.json"), meta.to_string()).unwrap();
}

#[test]
fn eval_of_exact_predictions_is_zero_and_aggregates_runs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen_small(d);
    let truth = MultiFidelityDataset::load(&d.join("data/test")).unwrap();
    let fields: Vec<Vec<f64>> = truth.examples.iter().map(|e| e.field.data().to_vec()).collect();
    let mut args = vec!["eval".to_string()];
    for run in 0..5 {
        let p = format!("p{run}");
        write_predictions(&d.join(&p), &fields, (16, 16, 1));
        args.extend(["--pred".into(), p]);
    }
    args.extend(["--truth", "data/test", "--out", "report"].map(String::from));
    let argv: Vec<&str> = args.iter().map(String::as_str).collect();
    ok(&mfdiff(d, &argv));
    let text = fs::read_to_string(d.join("report/results.csv")).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 10);
    assert!(rows.iter().all(|r| r.ends_with(",0.0")), "{text}");
    let summary = fs::read_to_string(d.join("report/summary.csv")).unwrap();
    assert!(summary.contains("oracle,heat1d,discrete,1,5,0.0,0.0"), "{summary}");

    write_predictions(&d.join("bad"), &vec![vec![0.0; 64]; 2], (8, 8, 1));
    let out = mfdiff(d, &["eval", "--pred", "bad", "--truth", "data/test", "--out", "r3"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("shape"), "{}", stderr(&out));
}

#[test]
fn reproduce_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = small_config(d, "repro", "discrete");
    let c = cfg.to_str().unwrap();
    ok(&mfdiff(d, &["reproduce", "--config", c, "--out", "a"]));
    let out = Command::new(env!("CARGO_BIN_EXE_mfdiff"))
        .args(["reproduce", "--config", c, "--out", "b"])
        .current_dir(d)
        .env("RUST_LOG", "warn")
        .env("MFDIFF_JOBS", "1")
        .output()
        .unwrap();
    ok(&out);
    let a = fs::read(d.join("a/report/results.csv")).unwrap();
    assert_eq!(a, fs::read(d.join("b/report/results.csv")).unwrap());
    assert_eq!(
        fs::read(d.join("a/run_0/checkpoints/checkpoint_00000006.mfdf")).unwrap(),
        fs::read(d.join("b/run_0/checkpoints/checkpoint_00000006.mfdf")).unwrap()
    );
}
