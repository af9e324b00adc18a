use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use glare_core::augmentation::TransformRecord;
use glare_core::checkpoint::save_encoder;
use glare_core::correspondence::match_patches;
use glare_core::data::{save_rgb, synthetic_shapes};
use glare_core::training::{analytic_trainable_count, TrainerState};
use glare_core::vit::PatchGrid;
use serde_json::Value;

/// Shrinks the run to the tiny model on a handful of 32-pixel images.
const SMALL: &[&str] = &[
    "model.patch_size=4",
    "model.embed_dim=8",
    "model.depth=2",
    "model.heads=2",
    "model.mlp_hidden=16",
    "model.pos_grid=4",
    "model.adapter_rank=4",
    "head.out_dim=16",
    "head.hidden=16",
    "head.bottleneck=8",
    "augment.global_size=16",
    "augment.local_size=8",
    "augment.n_local=2",
    "regions.count=2",
    "regions.min_p=1",
    "regions.max_p=2",
    "batch_size=4",
    "optim.reference_batch=4",
    "data.synthetic.train_count=8",
    "data.synthetic.val_count=4",
    "data.synthetic.size=32",
    "probe.hidden=8",
    "probe.batch_size=4",
    "max_steps=4",
    "output.checkpoint_every=2",
];

fn toy_toml() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml")
}

fn glare(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_glare")).env("GLARE_RUN_ROOT", root).args(args).output().unwrap()
}

fn with_small(args: &[&str], extra: &[&str]) -> Vec<String> {
    let mut v: Vec<String> = args.iter().map(|s| s.to_string()).collect();
    for s in SMALL.iter().chain(extra) {
        v.push("--set".into());
        v.push(s.to_string());
    }
    v
}

fn run(root: &Path, args: &[String]) -> Output {
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    let out = glare(root, &refs);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn metrics(dir: &Path) -> Vec<Value> {
    std::fs::read_to_string(dir.join("metrics.ndjson"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn small_pretrain(root: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let name = format!("output.name={name}");
    let mut e = vec![name.as_str()];
    e.extend(extra);
    run(root, &with_small(&["pretrain"], &e));
    root.join(name.trim_start_matches("output.name="))
}

#[test]
fn pretrain_one_epoch_of_toy_config() {
    let root = tempfile::tempdir().unwrap();
    let toy = toy_toml();
    run(root.path(), &["pretrain", "--config", toy.to_str().unwrap(), "--set", "epochs=1"].map(String::from));
    let dir = root.path().join("run");
    assert!(dir.join("checkpoint.ckpt").exists());
    assert!(dir.join("config.toml").exists());
    let log = metrics(&dir);
    assert_eq!(log.len(), 256 / 16);
    assert!(log.iter().all(|m| m["total"].as_f64().unwrap().is_finite()));
}

#[test]
fn run_directory_config_reproduces_metrics() {
    let root = tempfile::tempdir().unwrap();
    let dir = small_pretrain(root.path(), "first", &[]);
    let copy = dir.join("config.toml");
    run(root.path(), &["pretrain", "--config", copy.to_str().unwrap(), "--set", "output.name=second"].map(String::from));
    let a = std::fs::read(dir.join("metrics.ndjson")).unwrap();
    let b = std::fs::read(root.path().join("second/metrics.ndjson")).unwrap();
    assert_eq!(a, b);
    assert_eq!(metrics(&dir).len(), 4);
    assert!(dir.join("checkpoints/step_000002.ckpt").exists());
}

#[test]
fn global_only_ablation_logs_zero_local_and_regional_terms() {
    let root = tempfile::tempdir().unwrap();
    let dir = small_pretrain(root.path(), "global", &["loss.regional=0", "loss.local=0"]);
    for m in metrics(&dir) {
        for k in ["l_reg", "l_loc1", "l_loc2"] {
            assert_eq!(m[k].as_f64(), Some(0.0), "{k} in {m}");
        }
        assert!(m["l_glob"].as_f64().unwrap() > 0.0);
        assert_eq!(m["total"], m["l_glob"]);
    }
}

#[test]
fn unknown_keys_fail_with_their_names() {
    let root = tempfile::tempdir().unwrap();
    let out = glare(root.path(), &["pretrain", "--set", "loss.regionl=0", "--set", "epochz=1"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("loss.regionl") && err.contains("epochz"), "{err}");
    assert!(!root.path().join("run").exists());
}

#[test]
fn missing_data_and_checkpoint_are_user_errors() {
    let root = tempfile::tempdir().unwrap();
    let out = glare(root.path(), &["pretrain", "--set", "data.root=/nonexistent/images"]);
    assert_eq!(out.status.code(), Some(1));
    let out = glare(root.path(), &["probe", "--checkpoint", "/nonexistent.ckpt"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nonexistent.ckpt"));
}

#[test]
fn probe_reports_are_deterministic() {
    let root = tempfile::tempdir().unwrap();
    let dir = small_pretrain(root.path(), "p", &[]);
    let ckpt = dir.join("checkpoint.ckpt");
    let report = |name: &str, iters: &str| {
        let out = root.path().join(name);
        run(
            root.path(),
            &with_small(
                &["probe", "--checkpoint", ckpt.to_str().unwrap(), "--iters", iters, "--seeds", "0,1,2", "--out", out.to_str().unwrap()],
                &[],
            ),
        );
        std::fs::read_to_string(out).unwrap()
    };
    let a = report("a.json", "3");
    assert_eq!(a, report("b.json", "3"));
    let doc: Value = serde_json::from_str(&a).unwrap();
    let runs = doc["report"]["runs"].as_array().unwrap();
    assert_eq!(runs.len(), 3);
    let mean = runs.iter().map(|r| r["metrics"]["miou"].as_f64().unwrap()).sum::<f64>() / 3.0;
    assert!((doc["report"]["miou"]["mean"].as_f64().unwrap() - mean).abs() < 1e-12);

    let untrained: Value = serde_json::from_str(&report("zero.json", "0")).unwrap();
    assert_eq!(untrained["report"]["iters"], 0);
    assert_eq!(untrained["report"]["runs"].as_array().unwrap().len(), 3);
}

fn write_image(dir: &Path, name: &str, seed: u64) -> PathBuf {
    let img = synthetic_shapes::<f32>(1, 32, seed).remove(0).image;
    let p = dir.join(name);
    save_rgb(&p, &img).unwrap();
    p
}

#[test]
fn visualize_modes_write_outputs() {
    let root = tempfile::tempdir().unwrap();
    let ckpt = small_pretrain(root.path(), "v", &[]).join("checkpoint.ckpt");
    let img = write_image(root.path(), "shape.png", 1);
    let img2 = write_image(root.path(), "other.png", 2);
    let vis = |mode: &str, images: &[&Path]| {
        let out = root.path().join(format!("vis_{mode}"));
        let mut args = vec!["visualize", "--checkpoint", ckpt.to_str().unwrap(), "--mode", mode, "--out", out.to_str().unwrap()];
        for i in images {
            args.extend(["--image", i.to_str().unwrap()]);
        }
        run(root.path(), &with_small(&args, &[]));
        out
    };
    let att = vis("attention", &[&img]);
    for f in ["head_0.png", "head_1.png", "mean.png"] {
        assert!(att.join("shape").join(f).exists(), "{f}");
    }
    let pca = vis("pca", &[&img, &img2]);
    assert!(pca.join("pca_0.png").exists() && pca.join("pca_1.png").exists());
    let reg = vis("regions", &[&img]);
    let regions: Value = serde_json::from_str(&std::fs::read_to_string(reg.join("shape.regions.json")).unwrap()).unwrap();
    assert_eq!(regions.as_array().unwrap().len(), 2);
    assert!(regions.as_array().unwrap().iter().all(|r| !r["head"].is_null()));
    assert!(reg.join("shape.regions.png").exists());

    let cor = vis("correspondence", &[&img]);
    let doc: Value = serde_json::from_str(&std::fs::read_to_string(cor.join("correspondence.json")).unwrap()).unwrap();
    let rec = |k: &str| -> (TransformRecord, PatchGrid) {
        (serde_json::from_value(doc[k]["record"].clone()).unwrap(), serde_json::from_value(doc[k]["grid"].clone()).unwrap())
    };
    let ((rs, gs), (rt, gt)) = (rec("student"), rec("teacher"));
    let cmap = match_patches(&rs, &gs, &rt, &gt, doc["min_overlap"].as_f64().unwrap());
    assert_eq!(serde_json::to_value(&cmap.entries).unwrap(), doc["matches"]);
    assert!(cor.join("correspondence.png").exists());

    let out = glare(root.path(), &["visualize", "--checkpoint", ckpt.to_str().unwrap(), "--mode", "depth", "--image", img.to_str().unwrap(), "--out", "x"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn inspect_source_full_and_truncated_checkpoints() {
    let root = tempfile::tempdir().unwrap();
    let dir = small_pretrain(root.path(), "i", &[]);
    let full = dir.join("checkpoint.ckpt");
    let out = run(root.path(), &["inspect".into(), "--checkpoint".into(), full.to_str().unwrap().into()]);
    let text = String::from_utf8_lossy(&out.stdout);
    let cfg = glare_core::config::resolve_file(Some(&dir.join("config.toml")), &[]).unwrap().train;
    let analytic = analytic_trainable_count(&cfg);
    assert!(text.contains(&format!("trainable: {analytic} (analytic {analytic})")), "{text}");
    assert!(text.contains("--- config ---") && text.contains("embed_dim = 8"));

    let state = TrainerState::<f32>::init(&cfg).unwrap();
    let source = root.path().join("source.ckpt");
    save_encoder(&source, &state.student.encoder, false).unwrap();
    let out = run(root.path(), &["inspect".into(), "--checkpoint".into(), source.to_str().unwrap().into()]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("adapters: absent (will initialize)"));

    let bytes = std::fs::read(&full).unwrap();
    let cut = root.path().join("cut.ckpt");
    std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
    let out = glare(root.path(), &["inspect", "--checkpoint", cut.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error:") && !err.contains("panicked"), "{err}");
}

#[test]
fn shipped_toy_config_is_the_toy_preset() {
    let cfg = glare_core::config::resolve_file(Some(&toy_toml()), &[]).unwrap();
    assert_eq!(cfg, glare_core::config::RunConfig::toy());
}
