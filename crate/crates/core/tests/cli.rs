use std::fs;
use std::path::Path;
use std::process::Command;

use butterfly_moe::checkpoint;
use butterfly_moe::cli::{self, EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK};
use butterfly_moe::model::{Ffn, Model, ModelConfig};

fn run(args: &[&str]) -> i32 {
    cli::run(std::iter::once("bmoe").chain(args.iter().copied()))
}

fn small_train(dir: &Path, extra: &[&str]) -> i32 {
    let out = dir.to_str().unwrap();
    let mut args = vec!["train", "--seed", "5", "--out", out, "--train-samples", "128", "--eval-samples", "32", "--batch", "32"];
    args.extend_from_slice(extra);
    run(&args)
}

fn csv_rows(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path).unwrap().records().map(|r| r.unwrap()).collect()
}

#[test]
fn zero_epochs_writes_init_metrics_and_a_complete_manifest() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(small_train(dir.path(), &["--epochs", "0"]), EXIT_OK);
    let rows = csv_rows(&dir.path().join(cli::REPORT_CSV));
    assert_eq!(rows.len(), 1);
    assert_eq!(&rows[0][0], "0");

    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join(cli::MANIFEST_FILE)).unwrap()).unwrap();
    let listed: Vec<String> = manifest["artifacts"].as_array().unwrap().iter().map(|v| v.as_str().unwrap().to_string()).collect();
    let mut on_disk: Vec<String> = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n != cli::MANIFEST_FILE)
        .collect();
    on_disk.sort();
    let mut sorted = listed.clone();
    sorted.sort();
    sorted.dedup();
    assert_eq!(sorted.len(), listed.len(), "artifact listed twice");
    assert_eq!(sorted, on_disk);
    assert_eq!(manifest["seed"], 5);
    assert_eq!(manifest["config"]["epochs"], 0);
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn same_config_and_seed_give_identical_reports() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        assert_eq!(small_train(d.path(), &["--epochs", "1", "--task", "reverse"]), EXIT_OK);
    }
    for f in [cli::REPORT_CSV, cli::REPORT_JSON, cli::CHECKPOINT_FILE] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn config_file_and_overrides_combine() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "task = \"sort\"\nepochs = 3\nvariant = \"dense\"\n").unwrap();
    let c = cli::resolve_config(Some(&cfg), &["--epochs".into(), "0".into()], 9).unwrap();
    assert_eq!((c.epochs, c.seed), (0, 9));
    assert_eq!(c.task.name(), "sort");
    assert_eq!(c.variant.name(), "dense");
    fs::write(&cfg, "unknown_key = 1\n").unwrap();
    assert_eq!(run(&["train", "--seed", "1", "--config", cfg.to_str().unwrap()]), EXIT_CONFIG);
    assert_eq!(run(&["train", "--seed", "1", "--config", "/nonexistent/run.toml"]), EXIT_CONFIG);
}

#[test]
fn bad_config_and_divergence_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(small_train(dir.path(), &["--d-model", "48"]), EXIT_CONFIG);
    assert_eq!(small_train(dir.path(), &["--variant", "huge"]), EXIT_CONFIG);
    assert_eq!(small_train(dir.path(), &["--epochs", "1", "--lr", "1e30", "--grad-clip", "0"]), EXIT_NUMERIC);
    assert_eq!(run(&["train", "--task", "copy"]), EXIT_CONFIG, "seed is mandatory");
}

#[test]
fn binary_reports_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_bmoe");
    let st = Command::new(bin).args(["quant-error", "--checkpoint", "/nonexistent.bmoe"]).output().unwrap();
    assert_eq!(st.status.code(), Some(EXIT_CONFIG));
    assert!(String::from_utf8_lossy(&st.stderr).contains("cannot read checkpoint"));
    let st = Command::new(bin).args(["report-memory", "--experts", "64"]).output().unwrap();
    assert_eq!(st.status.code(), Some(EXIT_OK));
    let text = String::from_utf8(st.stdout).unwrap();
    assert_eq!(text.lines().next(), Some("N_E,standard_bytes,butterfly_bytes,ratio"));
    assert!(text.lines().nth(1).unwrap().starts_with("64,268435456,"));
    assert_eq!(Command::new(bin).arg("--help").output().unwrap().status.code(), Some(EXIT_OK));
}

#[test]
fn memory_sweep_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("mem.csv");
    assert_eq!(run(&["report-memory", "--experts", "8,16,32,64,128,256", "--output", out.to_str().unwrap()]), EXIT_OK);
    let rows = csv_rows(&out);
    assert_eq!(rows.len(), 6);
    let ratios: Vec<f64> = rows.iter().map(|r| r[3].parse().unwrap()).collect();
    assert!(ratios.windows(2).all(|w| w[1] > w[0]));
    let r64 = rows.iter().find(|r| &r[0] == "64").unwrap();
    assert_eq!(&r64[1], "268435456");
    let mb: f64 = r64[2].parse::<f64>().unwrap() / 1e6;
    assert!((1.93..=1.95).contains(&mb));
    assert_eq!(run(&["report-memory", "--d-model", "500", "--output", out.to_str().unwrap()]), EXIT_CONFIG);
}

#[test]
fn diversity_of_cloned_experts_is_all_ones() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = Model::<f32>::new(ModelConfig {
        d_model: 16,
        d_ff: 32,
        n_experts: 4,
        layers_in: 4,
        layers_out: 5,
        seed: 2,
        ..Default::default()
    })
    .unwrap();
    for b in &mut m.blocks {
        if let Ffn::Butterfly { moe, .. } = &mut b.ffn {
            let (theta, phi) = moe.expert(0).unwrap();
            for e in 1..4 {
                moe.set_expert(e, &theta, &phi).unwrap();
            }
        }
    }
    let ckpt = dir.path().join("clone.bmoe");
    checkpoint::save(&m, &ckpt).unwrap();
    let out = dir.path().join("div.csv");
    assert_eq!(run(&["diversity", "--checkpoint", ckpt.to_str().unwrap(), "--probe-seed", "1", "--output", out.to_str().unwrap()]), EXIT_OK);
    let rows = csv_rows(&out);
    assert_eq!(rows.len(), 2 * 4);
    for r in &rows {
        for v in r.iter().skip(2) {
            assert!((v.parse::<f64>().unwrap() - 1.0).abs() < 1e-9, "{r:?}");
        }
    }
}

#[test]
fn quant_error_reads_a_trained_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(small_train(dir.path(), &["--epochs", "1"]), EXIT_OK);
    let ckpt = dir.path().join(cli::CHECKPOINT_FILE);
    let rows = cli::cmd_quant_error(&ckpt, Some(&dir.path().join("q.csv"))).unwrap();
    assert_eq!(rows.len(), 2);
    for r in &rows {
        assert!(r.init_error > 0.0 && r.trained_error > 0.0);
        assert!((r.reduction - (1.0 - r.trained_error / r.init_error)).abs() < 1e-15);
    }
    let dense = tempfile::tempdir().unwrap();
    assert_eq!(small_train(dense.path(), &["--epochs", "0", "--variant", "dense"]), EXIT_OK);
    assert_eq!(run(&["quant-error", "--checkpoint", dense.path().join(cli::CHECKPOINT_FILE).to_str().unwrap()]), EXIT_CONFIG);
}

#[test]
fn bench_rows_and_depth_validation() {
    let args = cli::BenchArgs {
        layers: vec![2, 4],
        dim: 64,
        experts: 4,
        k: 2,
        tokens: 8,
        repeats: 2,
        seed: 0,
        output: Some(tempfile::tempdir().unwrap().path().join("missing-dir/b.csv")),
    };
    // unwritable destination is an input error, not a panic
    assert!(cli::cmd_bench(&args).is_err());
    let dir = tempfile::tempdir().unwrap();
    let rows = cli::cmd_bench(&cli::BenchArgs {
        output: Some(dir.path().join("b.csv")),
        layers: vec![2, 4, 6],
        ..args.clone()
    })
    .unwrap();
    assert_eq!(rows.iter().map(|r| r.layers).collect::<Vec<_>>(), vec![2, 4, 6]);
    assert_eq!(rows.iter().map(|r| r.params_per_expert).collect::<Vec<_>>(), vec![128, 256, 384]);
    assert_eq!(rows[2].speedup, 1.0);
    assert!(rows.iter().all(|r| r.tokens_per_sec > 0.0 && r.workers == 1));
    assert_eq!(run(&["bench", "--dim", "64", "--layers", "7", "--tokens", "4", "--repeats", "1"]), EXIT_CONFIG);
}

#[test]
fn copy_training_reaches_high_accuracy_in_five_epochs() {
    let dir = tempfile::tempdir().unwrap();
    let code = run(&["train", "--seed", "0", "--out", dir.path().to_str().unwrap(), "--task", "copy", "--variant", "butterfly_moe", "--epochs", "5"]);
    assert_eq!(code, EXIT_OK);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join(cli::REPORT_JSON)).unwrap()).unwrap();
    let last = report["epochs"].as_array().unwrap().last().unwrap();
    assert!(last["token_accuracy"].as_f64().unwrap() > 0.9, "{last}");
}
