use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mindkit::pipeline::PipelineConfig;

fn mindkit(config: &Path, dataset: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mindkit"))
        .arg("--config")
        .arg(config)
        .arg("--dataset")
        .arg(dataset)
        .args(args)
        .env_remove("MINDKIT_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "exit {:?}\n{}", out.status.code(), String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.json");
    std::fs::write(&p, serde_json::to_string_pretty(&PipelineConfig::tiny()).unwrap()).unwrap();
    p
}

fn pipeline(cfg: &Path, data: &Path) {
    ok(mindkit(cfg, data, &["gen-data"]));
    ok(mindkit(cfg, data, &["train"]));
    ok(mindkit(cfg, data, &["fit-decoders"]));
    ok(mindkit(cfg, data, &["reconstruct", "--subject", "0"]));
    ok(mindkit(cfg, data, &["reconstruct", "--subject", "0", "--ablate", "without-z"]));
    ok(mindkit(cfg, data, &["report"]));
}

fn files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "timing.json" {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn full_pipeline_is_bitwise_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    pipeline(&cfg, &a);
    pipeline(&cfg, &b);
    let (fa, fb) = (files(&a), files(&b));
    assert!(fa.len() > 20);
    assert_eq!(fa.keys().collect::<Vec<_>>(), fb.keys().collect::<Vec<_>>());
    for (k, v) in &fa {
        assert!(fb[k] == *v, "{} differs", k.display());
    }
    let m: serde_json::Value = serde_json::from_slice(&fa[Path::new("manifest.json")]).unwrap();
    let seed = m["subjects"][0].as_u64().unwrap();
    assert!(fa.contains_key(&PathBuf::from(format!("report/table_{seed}.csv"))));
    assert!(fa.contains_key(&PathBuf::from(format!("report/grid_{seed}.ppm"))));
}

#[test]
fn zero_test_items_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = mindkit(&cfg, &tmp.path().join("d"), &["gen-data", "--test", "0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gen_data_lists_subject_seeds_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let args = ["gen-data", "--train", "20", "--test", "3", "--subjects", "4", "--seed", "7"];
    let h1 = ok(mindkit(&cfg, &tmp.path().join("a"), &args));
    let h2 = ok(mindkit(&cfg, &tmp.path().join("b"), &args));
    assert_eq!(h1, h2);
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(tmp.path().join("a/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["subjects"].as_array().unwrap().len(), 4);
}

#[test]
fn missing_upstream_exits_3_and_names_the_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let data = tmp.path().join("d");
    let out = mindkit(&cfg, &data, &["train"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("gen-data"));
    ok(mindkit(&cfg, &data, &["gen-data"]));
    let out = mindkit(&cfg, &data, &["reconstruct", "--subject", "0"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("`train`"));
    let out = mindkit(&cfg, &data, &["report"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn single_stage_training_writes_one_loss_row_per_epoch() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let data = tmp.path().join("d");
    ok(mindkit(&cfg, &data, &["gen-data"]));
    ok(mindkit(&cfg, &data, &["train", "--stage", "autoencoder", "--epochs", "3"]));
    let curve = std::fs::read_to_string(data.join("models/autoencoder_loss.csv")).unwrap();
    assert_eq!(curve.lines().count(), 1 + 3);
    assert!(!data.join("models/denoiser_loss.csv").exists());
}

#[test]
fn evaluating_ground_truth_gives_perfect_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let data = tmp.path().join("d");
    ok(mindkit(&cfg, &data, &["gen-data"]));
    ok(mindkit(&cfg, &data, &["train"]));
    ok(mindkit(&cfg, &data, &["fit-decoders", "--subject", "0"]));
    let run = tmp.path().join("run");
    ok(mindkit(&cfg, &data, &["reconstruct", "--subject", "0", "--out", run.to_str().unwrap(), "--jobs", "2"]));
    for e in std::fs::read_dir(run.join("recon")).unwrap() {
        let p = e.unwrap().path();
        std::fs::copy(data.join("images").join(p.file_name().unwrap()), &p).unwrap();
    }
    let agg: serde_json::Value = serde_json::from_str(&ok(mindkit(&cfg, &data, &["evaluate", "--run", run.to_str().unwrap()]))).unwrap();
    assert_eq!(agg["count"], 4);
    for k in ["clip_cosine", "ssim", "pcc"] {
        let v = agg[k].as_f64().unwrap();
        assert!((v - 1.0).abs() < 1e-6, "{k} = {v}");
    }
}

#[test]
fn flags_override_the_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let shown: PipelineConfig = serde_json::from_str(&ok(mindkit(&cfg, tmp.path(), &["show-config"]))).unwrap();
    assert_eq!(shown, PipelineConfig::tiny());
    let data = tmp.path().join("d");
    ok(mindkit(&cfg, &data, &["gen-data", "--train", "30"]));
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(data.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["config"]["n_train"], 30);
    let bad = mindkit(&tmp.path().join("absent.json"), &data, &["show-config"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn check_writes_results_and_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let results = tmp.path().join("results.json");
    ok(mindkit(&cfg, tmp.path(), &["check", "--module", "decode", "--out", results.to_str().unwrap()]));
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&results).unwrap()).unwrap();
    assert_eq!(r.as_array().unwrap().len(), 6);
    assert!(r.as_array().unwrap().iter().all(|c| c["status"] == "passed"));
    let none = mindkit(&cfg, tmp.path(), &["check", "--module", "nothing"]);
    assert_eq!(none.status.code(), Some(2));
}
