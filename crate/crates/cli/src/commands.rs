//! Command implementations behind the CLI verbs.
//!
//! Every command is reproducible from (config, seed) alone: datasets are
//! deterministic renders, so `eval` and `viz` regenerate the samples from
//! the config embedded in a checkpoint (snapped to the same 8-bit pixel
//! grid as the on-disk rasters).

use ndarray::ArrayD;
use scsd_core::config::RunConfig;
use scsd_core::error::{Error, Result};
use scsd_core::pipeline::checkpoint::{load_checkpoint, resume_trainer, save_trainer, Checkpoint};
use scsd_core::pipeline::dataset::{
    generate_dataset, load_domains, load_manifest, quantize_images, save_dataset, Manifest, Sample,
    CLASS_NAMES,
};
use scsd_core::pipeline::eval::{evaluate_miou, MiouReport};
use scsd_core::pipeline::train::{usable_samples, Trainer};
use scsd_core::pipeline::SegModel;
use serde::Serialize;
use std::io::Write;
use std::path::{Path, PathBuf};

pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn class_names() -> Vec<String> {
    CLASS_NAMES.iter().map(|s| s.to_string()).collect()
}

/// Regenerate the full dataset for a config, in manifest order, snapped to
/// raster precision.
pub fn dataset_for_config(cfg: &RunConfig) -> Result<Vec<Sample>> {
    let domains = cfg.ordered_domains();
    let mut samples = generate_dataset(
        &domains,
        cfg.dataset.n_per_domain,
        cfg.dataset.layout_seed,
        cfg.dataset.image_size,
    )?;
    quantize_images(&mut samples);
    Ok(samples)
}

/// Resolve a `--split` value to domain names: `train`, `eval`, or one
/// specific domain.
pub fn split_domains(cfg: &RunConfig, split: &str) -> Result<Vec<String>> {
    match split {
        "train" => Ok(cfg.dataset.train_domains.clone()),
        "eval" => Ok(cfg.dataset.eval_domains.clone()),
        name => {
            if cfg.dataset.domains.contains_key(name) {
                Ok(vec![name.to_string()])
            } else {
                Err(Error::Config(format!(
                    "unknown split {name:?}: expected train, eval, or a domain name"
                )))
            }
        }
    }
}

pub fn filter_split(samples: &[Sample], domains: &[String]) -> Vec<Sample> {
    samples
        .iter()
        .filter(|s| domains.contains(&s.domain))
        .cloned()
        .collect()
}

/// `generate`: render the dataset to one directory per domain plus a
/// manifest. Idempotent for fixed seeds.
pub fn cmd_generate(cfg: &RunConfig, out_dir: &Path) -> Result<Manifest> {
    let domains = cfg.ordered_domains();
    let samples = generate_dataset(
        &domains,
        cfg.dataset.n_per_domain,
        cfg.dataset.layout_seed,
        cfg.dataset.image_size,
    )?;
    let manifest = Manifest {
        class_names: class_names(),
        image_size: cfg.dataset.image_size,
        n_per_domain: cfg.dataset.n_per_domain,
        layout_seed: cfg.dataset.layout_seed,
        domains: domains.iter().map(|(n, _)| n.clone()).collect(),
        train_domains: cfg.dataset.train_domains.clone(),
        eval_domains: cfg.dataset.eval_domains.clone(),
    };
    save_dataset(out_dir, &samples, &manifest)?;
    Ok(manifest)
}

/// `train`: expects the dataset under `<out>/dataset`; writes
/// `metrics.jsonl` and periodic `checkpoint.bin` snapshots into `<out>`.
pub fn cmd_train(
    cfg: &RunConfig,
    out_dir: &Path,
    resume_from: Option<&Path>,
    seed_override: Option<u64>,
) -> Result<PathBuf> {
    let mut cfg = cfg.clone();
    if let Some(seed) = seed_override {
        cfg.train.seed = seed;
    }
    let dataset_dir = out_dir.join("dataset");
    let manifest = load_manifest(&dataset_dir).map_err(|_| {
        Error::Config(format!(
            "no dataset at {}; run `scsd generate --out {}` first",
            dataset_dir.display(),
            dataset_dir.display()
        ))
    })?;
    if manifest.class_names != class_names() {
        return Err(Error::Config(format!(
            "manifest lists {} classes but the model is built for {}",
            manifest.class_names.len(),
            CLASS_NAMES.len()
        )));
    }
    let train_samples = usable_samples(load_domains(
        &dataset_dir,
        &manifest,
        &cfg.dataset.train_domains,
    )?);

    let mut trainer = match resume_from {
        Some(ckpt_path) => {
            let ckpt = load_checkpoint(ckpt_path)?;
            resume_trainer(ckpt, train_samples)?
        }
        None => Trainer::new(SegModel::new(&cfg)?, train_samples)?,
    };

    std::fs::create_dir_all(out_dir)?;
    let metrics_path = out_dir.join("metrics.jsonl");
    let mut metrics_file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)?;
    let checkpoint_path = out_dir.join("checkpoint.bin");

    // The checkpoint's config stays authoritative for the model; the
    // invoking config sets the step budget and logging cadence.
    let total_steps = cfg.train.steps as u64;
    let eval_interval = cfg.train.eval_interval as u64;
    let checkpoint_interval = cfg.train.checkpoint_interval as u64;
    let names = class_names();

    while trainer.step < total_steps {
        let mut metrics = match trainer.train_step() {
            Ok(m) => m,
            Err(e) => {
                // Leave the last good checkpoint in place.
                return Err(Error::Runtime(format!(
                    "{e}; last checkpoint retained at {}",
                    checkpoint_path.display()
                )));
            }
        };
        let step = trainer.step;
        if eval_interval > 0 && step % eval_interval == 0 {
            let report = evaluate_miou(&trainer.model, &trainer.train_samples, &names)?;
            metrics.miou = Some(report.miou);
        }
        let line = serde_json::to_string(&metrics)
            .map_err(|e| Error::Runtime(format!("metrics encode: {e}")))?;
        writeln!(metrics_file, "{line}")?;
        if checkpoint_interval > 0 && step % checkpoint_interval == 0 {
            save_trainer(&trainer, &checkpoint_path)?;
        }
    }
    save_trainer(&trainer, &checkpoint_path)?;
    Ok(checkpoint_path)
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub split: String,
    pub domains: Vec<String>,
    #[serde(flatten)]
    pub report: MiouReport,
}

/// Build a model from a checkpoint's embedded config and stored weights.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<SegModel> {
    let model = SegModel::new(&ckpt.config)?;
    let stored: std::collections::HashMap<&str, &ArrayD<f64>> = ckpt
        .params
        .iter()
        .map(|(n, a)| (n.as_str(), a))
        .collect();
    for (name, tensor) in model.all_params() {
        if let Some(data) = stored.get(name.as_str()) {
            if tensor.shape() != data.shape() {
                return Err(Error::shape(
                    &tensor.shape(),
                    data.shape(),
                    &format!("checkpoint parameter {name}"),
                ));
            }
            tensor.set_data((*data).clone());
        }
    }
    Ok(model)
}

/// `eval`: per-class IoU and mean on a split, printed and returned.
pub fn cmd_eval(checkpoint: &Path, split: &str, out: Option<&Path>) -> Result<EvalReport> {
    let ckpt = load_checkpoint(checkpoint)?;
    let model = model_from_checkpoint(&ckpt)?;
    let domains = split_domains(&ckpt.config, split)?;
    let samples = filter_split(&dataset_for_config(&ckpt.config)?, &domains);
    let names = class_names();
    let report = evaluate_miou(&model, &samples, &names)?;
    let eval_report = EvalReport {
        split: split.to_string(),
        domains,
        report,
    };
    println!("{}", format_report(&eval_report));
    if let Some(path) = out {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let json = serde_json::to_string_pretty(&eval_report)
            .map_err(|e| Error::Runtime(format!("report encode: {e}")))?;
        std::fs::write(path, json)?;
    }
    Ok(eval_report)
}

pub fn format_report(report: &EvalReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "split {:?} (domains: {}) over {} samples\n",
        report.split,
        report.domains.join(", "),
        report.report.num_samples
    ));
    for (name, iou) in report
        .report
        .class_names
        .iter()
        .zip(&report.report.per_class)
    {
        match iou {
            Some(v) => out.push_str(&format!("  {name:<12} {:6.2}\n", v * 100.0)),
            None => out.push_str(&format!("  {name:<12}    n/a\n")),
        }
    }
    out.push_str(&format!("  {:<12} {:6.2}", "mIoU", report.report.miou * 100.0));
    out
}

/// One ablation row: which components are on.
pub const ABLATION_ROWS: [(&str, [bool; 3]); 4] = [
    ("baseline", [false, false, false]),
    ("+sqb", [true, false, false]),
    ("+sqb+tdst", [true, true, false]),
    ("+sqb+tdst+sso", [true, true, true]),
];

#[derive(Debug, Clone, Serialize)]
pub struct AblationRun {
    pub seed: u64,
    pub per_domain: Vec<(String, f64)>,
    pub held_out_mean: f64,
    pub train_miou: f64,
    /// Per-decoder-layer mIoU on the training split (layer 1 and 6).
    pub train_miou_layer1: f64,
    pub train_miou_layer6: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub name: String,
    pub flags: [bool; 3],
    pub runs: Vec<AblationRun>,
    pub mean_held_out: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationSummary {
    pub rows: Vec<AblationRow>,
    pub seeds: Vec<u64>,
    pub eval_domains: Vec<String>,
}

/// Train and evaluate one flag combination for one seed.
pub fn run_ablation_cell(
    base: &RunConfig,
    flags: [bool; 3],
    seed: u64,
    train_samples: &[Sample],
    eval_samples: &[Sample],
) -> Result<AblationRun> {
    let mut cfg = base.clone();
    cfg.ablation.sqb = flags[0];
    cfg.ablation.tdst = flags[1];
    cfg.ablation.sso = flags[2];
    cfg.train.seed = seed;
    let model = SegModel::new(&cfg)?;
    let mut trainer = Trainer::new(model, train_samples.to_vec())?;
    trainer.run(cfg.train.steps, |_| {})?;

    let names = class_names();
    let mut per_domain = Vec::new();
    for domain in &cfg.dataset.eval_domains {
        let subset = filter_split(eval_samples, std::slice::from_ref(domain));
        let report = evaluate_miou(&trainer.model, &subset, &names)?;
        per_domain.push((domain.clone(), report.miou));
    }
    let held_out_mean =
        per_domain.iter().map(|(_, v)| v).sum::<f64>() / per_domain.len().max(1) as f64;
    let train_report = evaluate_miou(&trainer.model, train_samples, &names)?;
    let layer1 = scsd_core::pipeline::eval::evaluate_miou_at_layer(
        &trainer.model,
        train_samples,
        &names,
        Some(0),
    )?;
    Ok(AblationRun {
        seed,
        per_domain,
        held_out_mean,
        train_miou: train_report.miou,
        train_miou_layer1: layer1.miou,
        train_miou_layer6: train_report.miou,
    })
}

/// `ablate`: the four-row component sweep over several seeds, evaluated on
/// the held-out domains. Rows/seeds run in parallel; each run is
/// independently seeded so the results do not depend on scheduling.
pub fn cmd_ablate(cfg: &RunConfig, out_dir: &Path, base_seed: u64, num_seeds: usize) -> Result<AblationSummary> {
    if cfg.dataset.eval_domains.is_empty() {
        return Err(Error::Config(
            "ablation needs at least one held-out domain in dataset.eval_domains".into(),
        ));
    }
    let samples = dataset_for_config(cfg)?;
    let train_samples = usable_samples(filter_split(&samples, &cfg.dataset.train_domains));
    let eval_samples = filter_split(&samples, &cfg.dataset.eval_domains);
    let seeds: Vec<u64> = (0..num_seeds as u64).map(|i| base_seed + i).collect();

    let cells: Vec<(usize, u64)> = (0..ABLATION_ROWS.len())
        .flat_map(|row| seeds.iter().map(move |&s| (row, s)))
        .collect();
    let results: Vec<Result<(usize, AblationRun)>> = {
        use rayon::prelude::*;
        cells
            .par_iter()
            .map(|&(row, seed)| {
                let run = run_ablation_cell(
                    cfg,
                    ABLATION_ROWS[row].1,
                    seed,
                    &train_samples,
                    &eval_samples,
                )?;
                Ok((row, run))
            })
            .collect()
    };

    let mut rows: Vec<AblationRow> = ABLATION_ROWS
        .iter()
        .map(|(name, flags)| AblationRow {
            name: name.to_string(),
            flags: *flags,
            runs: Vec::new(),
            mean_held_out: 0.0,
        })
        .collect();
    for result in results {
        let (row, run) = result?;
        rows[row].runs.push(run);
    }
    for row in &mut rows {
        row.runs.sort_by_key(|r| r.seed);
        row.mean_held_out =
            row.runs.iter().map(|r| r.held_out_mean).sum::<f64>() / row.runs.len() as f64;
    }
    let summary = AblationSummary {
        rows,
        seeds,
        eval_domains: cfg.dataset.eval_domains.clone(),
    };

    std::fs::create_dir_all(out_dir)?;
    let json = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::Runtime(format!("summary encode: {e}")))?;
    std::fs::write(out_dir.join("ablation.json"), json)?;
    println!("{}", format_ablation(&summary));
    Ok(summary)
}

/// `viz`: render one visualization kind for one eval-split sample.
/// Returns the written file paths.
pub fn cmd_viz(
    checkpoint: &Path,
    sample_index: usize,
    kind: &str,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let ckpt = load_checkpoint(checkpoint)?;
    let model = model_from_checkpoint(&ckpt)?;
    let all = dataset_for_config(&ckpt.config)?;
    let eval_samples = filter_split(&all, &ckpt.config.dataset.eval_domains);
    let samples = if eval_samples.is_empty() { &all } else { &eval_samples };
    let sample = samples.get(sample_index).ok_or_else(|| {
        Error::invalid(format!(
            "sample index {sample_index} out of range (split has {} samples)",
            samples.len()
        ))
    })?;
    std::fs::create_dir_all(out_dir)?;

    let save_png = |img: &image::RgbImage, name: &str| -> Result<PathBuf> {
        let path = out_dir.join(name);
        img.save(&path)
            .map_err(|e| Error::Runtime(format!("png write failed: {e}")))?;
        Ok(path)
    };

    match kind {
        "layer-masks" => {
            let img = crate::viz::layer_masks(&model, sample)?;
            Ok(vec![save_png(&img, &format!("layer_masks_{sample_index:03}.png"))?])
        }
        "similarity-map" => {
            let img = crate::viz::similarity_panels(&model, sample)?;
            Ok(vec![save_png(&img, &format!("similarity_map_{sample_index:03}.png"))?])
        }
        "spectrum" => {
            // Use the first non-empty conditional phrase so the window has
            // something to modulate.
            let condition = ckpt
                .config
                .prompts
                .conditions
                .iter()
                .position(|c| !c.is_empty())
                .unwrap_or(0);
            let img = crate::viz::spectrum_panels(&model, sample, condition)?;
            Ok(vec![save_png(&img, &format!("spectrum_{sample_index:03}.png"))?])
        }
        "embedding-2d" => {
            let scatter = crate::viz::embedding_scatter(&model, samples)?;
            let img_path = save_png(&scatter.image, "embedding_2d.png")?;
            let legend_path = out_dir.join("embedding_2d.legend.json");
            std::fs::write(
                &legend_path,
                serde_json::to_string_pretty(&scatter.legend)
                    .map_err(|e| Error::Runtime(format!("legend encode: {e}")))?,
            )?;
            Ok(vec![img_path, legend_path])
        }
        other => Err(Error::invalid(format!(
            "unknown viz kind {other:?}: expected layer-masks, similarity-map, spectrum, or embedding-2d"
        ))),
    }
}

pub fn format_ablation(summary: &AblationSummary) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<16}{}  {:>8}  {:>8}\n",
        "components",
        summary
            .eval_domains
            .iter()
            .map(|d| format!("{d:>8}"))
            .collect::<Vec<_>>()
            .join("  "),
        "avg",
        "delta"
    ));
    let mut prev: Option<f64> = None;
    for row in &summary.rows {
        let mut domain_means = vec![0.0; summary.eval_domains.len()];
        for run in &row.runs {
            for (i, (_, v)) in run.per_domain.iter().enumerate() {
                domain_means[i] += v / row.runs.len() as f64;
            }
        }
        let delta = prev.map(|p| row.mean_held_out - p);
        out.push_str(&format!(
            "{:<16}{}  {:>8.2}  {:>8}\n",
            row.name,
            domain_means
                .iter()
                .map(|v| format!("{:>8.2}", v * 100.0))
                .collect::<Vec<_>>()
                .join("  "),
            row.mean_held_out * 100.0,
            delta
                .map(|d| format!("{:+.2}", d * 100.0))
                .unwrap_or_else(|| "-".to_string()),
        ));
        prev = Some(row.mean_held_out);
    }
    out
}
