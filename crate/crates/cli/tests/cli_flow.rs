//! End-to-end command flow on a miniature configuration.

use scsd_cli::commands::{
    cmd_ablate, cmd_eval, cmd_generate, cmd_train, cmd_viz, load_config, split_domains,
};
use scsd_core::config::RunConfig;
use scsd_core::Error;
use std::path::Path;

fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model.num_queries = 6;
    cfg.model.d_q = 16;
    cfg.model.d_emb = 8;
    cfg.model.d_style = 8;
    cfg.model.heads = 2;
    cfg.model.backbone_channels = [4, 6, 8, 12];
    cfg.dataset.n_per_domain = 3;
    cfg.train.steps = 4;
    cfg.train.batch_size = 1;
    cfg.train.eval_interval = 2;
    cfg.train.checkpoint_interval = 2;
    cfg
}

fn file_bytes(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap()
}

#[test]
fn generate_writes_domain_dirs_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let manifest = cmd_generate(&cfg, dir.path()).unwrap();
    // Default config: two training domains plus one held-out domain.
    assert_eq!(manifest.domains.len(), 3);
    for domain in &manifest.domains {
        assert!(dir.path().join(domain).join("img_0000.png").exists());
        assert!(dir.path().join(domain).join("lab_0000.png").exists());
    }
    assert!(dir.path().join("manifest.json").exists());

    let before = file_bytes(&dir.path().join("meadow/img_0001.png"));
    cmd_generate(&cfg, dir.path()).unwrap();
    let after = file_bytes(&dir.path().join("meadow/img_0001.png"));
    assert_eq!(before, after, "regeneration must be byte-identical");
}

#[test]
fn train_eval_viz_flow() {
    let run_dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    cmd_generate(&cfg, &run_dir.path().join("dataset")).unwrap();

    let ckpt = cmd_train(&cfg, run_dir.path(), None, None).unwrap();
    assert!(ckpt.exists());
    let metrics = std::fs::read_to_string(run_dir.path().join("metrics.jsonl")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines.len(), 4);
    let first: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
    for key in ["step", "L_cls", "L_seg", "L_sc", "L_sa", "w_sc", "w_sa"] {
        assert!(first.get(key).is_some(), "metrics line missing {key}");
    }
    // Eval-interval records carry the extra mIoU key.
    let second: serde_json::Value = serde_json::from_str(lines[1]).unwrap();
    assert!(second.get("mIoU").is_some());

    // Deterministic evaluation, tagged with the held-out domain.
    let report_path = run_dir.path().join("eval.json");
    let a = cmd_eval(&ckpt, "eval", Some(&report_path)).unwrap();
    let b = cmd_eval(&ckpt, "eval", None).unwrap();
    assert_eq!(a.report.miou, b.report.miou);
    assert_eq!(a.domains, vec!["night".to_string()]);
    assert!(report_path.exists());
    let night = cmd_eval(&ckpt, "night", None).unwrap();
    assert_eq!(night.split, "night");
    assert!((night.report.miou - a.report.miou).abs() < 1e-12);

    // Every viz kind renders.
    let viz_dir = run_dir.path().join("viz");
    for kind in ["layer-masks", "similarity-map", "spectrum", "embedding-2d"] {
        let files = cmd_viz(&ckpt, 0, kind, &viz_dir).unwrap();
        assert!(!files.is_empty());
        for f in &files {
            assert!(f.exists(), "{} missing", f.display());
        }
    }
    // The legend lists each domain exactly once.
    let legend: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(viz_dir.join("embedding_2d.legend.json")).unwrap())
            .unwrap();
    let domains: Vec<String> = legend["domains"]
        .as_array()
        .unwrap()
        .iter()
        .map(|d| d["name"].as_str().unwrap().to_string())
        .collect();
    let mut unique = domains.clone();
    unique.sort();
    unique.dedup();
    assert_eq!(domains.len(), unique.len(), "duplicate domain in legend");
    assert!(!domains.is_empty());

    let bad = cmd_viz(&ckpt, 0, "nonsense", &viz_dir);
    assert!(matches!(bad, Err(Error::InvalidArgument(_))));
}

#[test]
fn train_resume_continues_step_counter() {
    let run_dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.train.steps = 2;
    cmd_generate(&cfg, &run_dir.path().join("dataset")).unwrap();
    let ckpt = cmd_train(&cfg, run_dir.path(), None, None).unwrap();

    // Resume with a larger budget: picks up at step 2 and ends at 5.
    let mut more = cfg.clone();
    more.train.steps = 5;
    let run2 = tempfile::tempdir().unwrap();
    cmd_generate(&more, &run2.path().join("dataset")).unwrap();
    let ckpt2 = cmd_train(&more, run2.path(), Some(&ckpt), None).unwrap();
    let loaded = scsd_core::pipeline::checkpoint::load_checkpoint(&ckpt2).unwrap();
    assert_eq!(loaded.step, 5);
}

#[test]
fn train_without_dataset_is_a_config_error() {
    let run_dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let err = cmd_train(&cfg, run_dir.path(), None, None).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    assert_eq!(scsd_cli::exit_code(&err), 2);
}

#[test]
fn broken_config_error_names_the_missing_domain() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.toml");
    std::fs::write(
        &path,
        "[dataset]\ntrain_domains = [\"meadow\", \"atlantis\"]\n",
    )
    .unwrap();
    let err = load_config(Some(&path)).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("atlantis"), "error must name the key: {msg}");
    assert_eq!(scsd_cli::exit_code(&err), 2);
}

#[test]
fn split_resolution() {
    let cfg = tiny_config();
    assert_eq!(split_domains(&cfg, "train").unwrap().len(), 2);
    assert_eq!(split_domains(&cfg, "eval").unwrap().len(), 1);
    assert_eq!(split_domains(&cfg, "meadow").unwrap(), vec!["meadow"]);
    assert!(split_domains(&cfg, "atlantis").is_err());
}

#[test]
fn ablate_emits_four_rows() {
    let out = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.train.steps = 2;
    cfg.dataset.n_per_domain = 2;
    let summary = cmd_ablate(&cfg, out.path(), 0, 1).unwrap();
    assert_eq!(summary.rows.len(), 4);
    assert_eq!(summary.rows[0].name, "baseline");
    assert_eq!(summary.rows[3].flags, [true, true, true]);
    for row in &summary.rows {
        assert_eq!(row.runs.len(), 1);
        assert!(row.mean_held_out.is_finite());
    }
    assert!(out.path().join("ablation.json").exists());
}
