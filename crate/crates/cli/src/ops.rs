//! Command implementations. Each one validates its inputs, writes its
//! outputs, and records a run manifest with content hashes.

use std::fs::{self, File};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use milcal::calibrate::{
    apply_thresholds, calibration_report, challenge_metric, sweep_global, sweep_per_source,
    ThresholdMap,
};
use milcal::checkpoint;
use milcal::data::io::{
    load_dataset, load_metadata_csv, load_predictions_csv, save_dataset, write_metadata_csv,
    write_predictions_csv,
};
use milcal::data::synth::{generate_synthetic, ShiftSpec};
use milcal::data::{Dataset, SourceId, Split};
use milcal::scoring::{
    fuse_majority, fuse_uniform, fuse_weighted, mil_score, read_score_csv, slice_model_score,
    write_score_csv, EnsembleManifest, ModelScores,
};
use milcal::train::{train_phase1, train_phase2, EpochEvent, TrainConfig};
use milcal::{Error, Result};

use crate::manifest::ManifestBuilder;

/// Summary written by `gen-data` and consumed by the other commands, so they
/// do not need the source count or input width re-specified.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub version: u32,
    pub source_count: usize,
    pub d_in: usize,
    pub seed: u64,
    pub slice_range: (usize, usize),
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::InvalidData(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

pub fn load_info(data_dir: &Path) -> Result<DatasetInfo> {
    read_json(&data_dir.join("dataset.json"))
}

pub fn cmd_gen_data(
    spec_path: &Path,
    out: &Path,
    seed: u64,
    d_in: usize,
    slice_range: (usize, usize),
) -> Result<()> {
    let mut mb = ManifestBuilder::new("gen-data");
    mb.input(spec_path)?;
    mb.seed(seed);
    let spec: ShiftSpec = read_json(spec_path)?;
    mb.config(&spec)?;
    let data = generate_synthetic(&spec, seed, d_in, slice_range)?;

    fs::create_dir_all(out)?;
    for split in [&data.train, &data.val, &data.test] {
        save_dataset(out, split)?;
        mb.output(&out.join(format!("metadata_{}.csv", split.split)));
    }
    // Held-out truth for the unlabeled test split, in metadata format.
    let mut truth = data.test.clone();
    for bag in &mut truth.bags {
        let label = data
            .test_truth
            .iter()
            .find(|(id, _)| id == &bag.scan_id)
            .map(|&(_, l)| l);
        bag.label = label;
    }
    let truth_path = out.join("truth_test.csv");
    write_metadata_csv(&truth_path, &truth)?;
    mb.output(&truth_path);

    let info = DatasetInfo {
        version: 1,
        source_count: spec.sources.len(),
        d_in,
        seed,
        slice_range,
    };
    let info_path = out.join("dataset.json");
    write_json(&info_path, &info)?;
    mb.output(&info_path);
    mb.write(&out.join("manifest_gen_data.json"))?;
    Ok(())
}

fn open_log(path: &Path) -> Result<File> {
    Ok(File::create(path)?)
}

fn log_event(file: &mut File, event: &EpochEvent) {
    if let Ok(line) = serde_json::to_string(event) {
        let _ = writeln!(file, "{line}");
    }
    log::info!(
        "phase {} epoch {} loss {:.6} val {:?}",
        event.phase,
        event.epoch,
        event.train_loss,
        event.val_metric
    );
}

fn load_config(path: &Path, seed_override: Option<u64>) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = read_json(path)?;
    if let Some(seed) = seed_override {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_pretrain(
    config_path: &Path,
    data_dir: &Path,
    out: &Path,
    seed_override: Option<u64>,
) -> Result<()> {
    let mut mb = ManifestBuilder::new("pretrain");
    mb.input(config_path)?;
    let cfg = load_config(config_path, seed_override)?;
    mb.config(&cfg)?;
    mb.seed(cfg.seed);
    let info = load_info(data_dir)?;
    let train = load_dataset(data_dir, Split::Train, info.source_count)?;

    fs::create_dir_all(out)?;
    let mut log_file = open_log(&out.join("pretrain_log.jsonl"))?;
    let result = train_phase1(&train, &cfg, |e| log_event(&mut log_file, e))?;
    let stem = out.join("slice_model");
    checkpoint::save_slice(&stem, &result.model, cfg.seed)?;
    mb.output(&stem.with_extension("json"));
    mb.output(&stem.with_extension("bin"));
    mb.output(&out.join("pretrain_log.jsonl"));
    mb.write(&out.join("manifest_pretrain.json"))?;
    Ok(())
}

pub fn cmd_train_mil(
    config_path: &Path,
    data_dir: &Path,
    encoder_stem: Option<&Path>,
    out: &Path,
    seed_override: Option<u64>,
) -> Result<()> {
    let mut mb = ManifestBuilder::new("train-mil");
    mb.input(config_path)?;
    let cfg = load_config(config_path, seed_override)?;
    mb.config(&cfg)?;
    mb.seed(cfg.seed);
    let info = load_info(data_dir)?;
    let train = load_dataset(data_dir, Split::Train, info.source_count)?;
    let val = load_dataset(data_dir, Split::Val, info.source_count)?;

    let encoder = match encoder_stem {
        Some(stem) => {
            mb.input(&stem.with_extension("json"))?;
            mb.input(&stem.with_extension("bin"))?;
            Some(checkpoint::load_slice(stem)?.encoder)
        }
        None => None,
    };

    fs::create_dir_all(out)?;
    let mut log_file = open_log(&out.join("train_log.jsonl"))?;
    let result = train_phase2(&train, &val, encoder, &cfg, |e| log_event(&mut log_file, e))?;

    let best_stem = out.join("mil_best");
    checkpoint::save_mil(&best_stem, &result.model, cfg.seed)?;
    mb.output(&best_stem.with_extension("json"));
    mb.output(&best_stem.with_extension("bin"));
    if let Some(swa) = &result.swa {
        let swa_stem = out.join("mil_swa");
        checkpoint::save_mil(&swa_stem, swa, cfg.seed)?;
        mb.output(&swa_stem.with_extension("json"));
        mb.output(&swa_stem.with_extension("bin"));
    }
    mb.output(&out.join("train_log.jsonl"));
    let summary = serde_json::json!({
        "best_val_metric": result.best_metric,
        "epochs_run": result.history.iter().filter(|e| e.phase == 2).count(),
    });
    write_json(&out.join("train_summary.json"), &summary)?;
    mb.output(&out.join("train_summary.json"));
    mb.write(&out.join("manifest_train_mil.json"))?;
    Ok(())
}

fn score_one(stem: &Path, data: &Dataset, k_eval: usize) -> Result<Vec<(String, SourceId, f64)>> {
    let manifest = checkpoint::load_manifest(stem)?;
    let mut out = Vec::with_capacity(data.bags.len());
    match manifest.kind.as_str() {
        "mil" => {
            let model = checkpoint::load_mil(stem)?;
            for bag in &data.bags {
                out.push((bag.scan_id.clone(), bag.source, mil_score(&model, bag, k_eval)?));
            }
        }
        "slice" => {
            let model = checkpoint::load_slice(stem)?;
            for bag in &data.bags {
                out.push((bag.scan_id.clone(), bag.source, slice_model_score(&model, bag)?));
            }
        }
        other => return Err(Error::InvalidData(format!("unknown model kind `{other}`"))),
    }
    Ok(out)
}

/// Score one or more models over a split. With one model, `out` is the CSV
/// path; with several it is a directory receiving `<model stem>.csv`. Models
/// run on `threads` worker threads, one model per worker.
pub fn cmd_score(
    model_stems: &[PathBuf],
    data_dir: &Path,
    split: Split,
    out: &Path,
    k_eval: usize,
    threads: usize,
) -> Result<()> {
    if model_stems.is_empty() {
        return Err(Error::EmptyInput("no models given".into()));
    }
    let mut mb = ManifestBuilder::new("score");
    for stem in model_stems {
        mb.input(&stem.with_extension("json"))?;
        mb.input(&stem.with_extension("bin"))?;
    }
    let info = load_info(data_dir)?;
    let data = load_dataset(data_dir, split, info.source_count)?;

    let out_paths: Vec<PathBuf> = if model_stems.len() == 1 {
        vec![out.to_path_buf()]
    } else {
        fs::create_dir_all(out)?;
        model_stems
            .iter()
            .map(|s| {
                let name = s.file_name().map(|n| n.to_string_lossy().into_owned());
                out.join(format!("{}.csv", name.unwrap_or_else(|| "model".into())))
            })
            .collect()
    };

    let results: Vec<Result<Vec<(String, SourceId, f64)>>> = std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for chunk in model_stems.chunks(threads.max(1)) {
            let mut batch = Vec::new();
            for stem in chunk {
                let data = &data;
                batch.push(scope.spawn(move || score_one(stem, data, k_eval)));
            }
            for h in batch {
                handles.push(h.join().expect("scoring worker panicked"));
            }
        }
        handles
    });

    for (rows, path) in results.into_iter().zip(&out_paths) {
        let rows = rows?;
        let scores = rows
            .into_iter()
            .map(|(id, s, p)| (id, (s, p)))
            .collect::<std::collections::BTreeMap<_, _>>();
        write_score_csv(path, "model", &scores)?;
        mb.output(path);
    }
    let manifest_path = if model_stems.len() == 1 {
        out.with_extension("manifest.json")
    } else {
        out.join("manifest_score.json")
    };
    mb.write(&manifest_path)?;
    Ok(())
}

fn load_models(score_paths: &[PathBuf]) -> Result<Vec<ModelScores>> {
    score_paths
        .iter()
        .map(|p| {
            let id = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| p.display().to_string());
            read_score_csv(p, &id)
        })
        .collect()
}

pub fn cmd_fuse(
    score_paths: &[PathBuf],
    rule: &str,
    weights: Option<&[f64]>,
    thresholds_path: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let mut mb = ManifestBuilder::new("fuse");
    for p in score_paths {
        mb.input(p)?;
    }
    let mut models = load_models(score_paths)?;

    match rule {
        "uniform" => {
            let fused = fuse_uniform(&models)?;
            write_score_csv(out, "ensemble", &fused)?;
        }
        "weighted" => {
            let w = weights.ok_or_else(|| {
                Error::InvalidParam("--weights required for weighted fusion".into())
            })?;
            if w.len() != models.len() {
                return Err(Error::InvalidParam(format!(
                    "{} weights for {} score files",
                    w.len(),
                    models.len()
                )));
            }
            for (m, &wi) in models.iter_mut().zip(w) {
                m.weight = Some(wi);
            }
            let fused = fuse_weighted(&models)?;
            write_score_csv(out, "ensemble", &fused)?;
        }
        "majority" => {
            let maps: Vec<ThresholdMap> = match thresholds_path {
                Some(p) => {
                    mb.input(p)?;
                    read_json(p)?
                }
                None => vec![ThresholdMap::Global { threshold: 0.5 }; models.len()],
            };
            let decisions = fuse_majority(&models, &maps)?;
            let preds: Vec<(String, u8)> = decisions
                .into_iter()
                .map(|(id, (_, label))| (id, label))
                .collect();
            write_predictions_csv(out, &preds)?;
        }
        other => {
            return Err(Error::InvalidParam(format!(
                "unknown fusion rule `{other}` (uniform|weighted|majority)"
            )))
        }
    }
    mb.output(out);
    let ens = EnsembleManifest {
        model_ids: models.iter().map(|m| m.model_id.clone()).collect(),
        weights: weights.map(|w| w.to_vec()),
        rule: rule.to_string(),
    };
    mb.config(&ens)?;
    mb.write(&out.with_extension("manifest.json"))?;
    Ok(())
}

/// Join scores against a metadata CSV. Every scored scan must have a label.
fn join_labels(
    scores: &ModelScores,
    labels_path: &Path,
    source_count: usize,
) -> Result<(Vec<f64>, Vec<u8>, Vec<SourceId>)> {
    let metas = load_metadata_csv(labels_path, source_count)?;
    let by_id: std::collections::BTreeMap<&str, _> =
        metas.iter().map(|m| (m.scan_id.as_str(), m)).collect();
    let mut s = Vec::new();
    let mut t = Vec::new();
    let mut src = Vec::new();
    for (id, (source, prob)) in &scores.scores {
        let meta = by_id
            .get(id.as_str())
            .ok_or_else(|| Error::InvalidData(format!("scan {id} missing from labels")))?;
        let label = meta
            .label
            .ok_or_else(|| Error::InvalidData(format!("scan {id} has no label")))?;
        if meta.source != *source {
            return Err(Error::InvalidData(format!(
                "scan {id}: source mismatch between scores and labels"
            )));
        }
        s.push(*prob);
        t.push(label);
        src.push(*source);
    }
    Ok((s, t, src))
}

pub fn cmd_calibrate(
    scores_path: &Path,
    labels_path: &Path,
    source_count: usize,
    mode: &str,
    out: &Path,
) -> Result<()> {
    let mut mb = ManifestBuilder::new("calibrate");
    mb.input(scores_path)?;
    mb.input(labels_path)?;
    let scores = read_score_csv(scores_path, "scores")?;
    let (s, t, src) = join_labels(&scores, labels_path, source_count)?;
    let map = match mode {
        "global" => {
            let (threshold, _) = sweep_global(&s, &t, &src, source_count)?;
            ThresholdMap::Global { threshold }
        }
        "per-source" => sweep_per_source(&s, &t, &src, source_count)?.0,
        other => {
            return Err(Error::InvalidParam(format!(
                "unknown mode `{other}` (global|per-source)"
            )))
        }
    };
    let report = calibration_report(&s, &t, &src, source_count, map)?;
    write_json(out, &report)?;
    mb.output(out);
    mb.write(&out.with_extension("manifest.json"))?;
    println!("calibrated ({mode}): challenge metric {:.4}", report.p);
    Ok(())
}

pub fn cmd_evaluate(
    predictions_path: Option<&Path>,
    scores_path: Option<&Path>,
    thresholds_path: Option<&Path>,
    labels_path: &Path,
    source_count: usize,
    out: &Path,
) -> Result<()> {
    let mut mb = ManifestBuilder::new("evaluate");
    mb.input(labels_path)?;
    let metas = load_metadata_csv(labels_path, source_count)?;
    let by_id: std::collections::BTreeMap<&str, _> =
        metas.iter().map(|m| (m.scan_id.as_str(), m)).collect();

    let (preds, truths, sources) = match (predictions_path, scores_path, thresholds_path) {
        (Some(p), None, None) => {
            mb.input(p)?;
            let rows = load_predictions_csv(p)?;
            let mut preds = Vec::new();
            let mut truths = Vec::new();
            let mut sources = Vec::new();
            for (id, label) in rows {
                let meta = by_id
                    .get(id.as_str())
                    .ok_or_else(|| Error::InvalidData(format!("scan {id} missing from labels")))?;
                let truth = meta
                    .label
                    .ok_or_else(|| Error::InvalidData(format!("scan {id} has no label")))?;
                preds.push(label);
                truths.push(truth);
                sources.push(meta.source);
            }
            (preds, truths, sources)
        }
        (None, Some(sp), Some(tp)) => {
            mb.input(sp)?;
            mb.input(tp)?;
            let scores = read_score_csv(sp, "scores")?;
            let map: ThresholdMap = match read_json::<milcal::calibrate::CalibrationReport>(tp) {
                Ok(report) => report.thresholds,
                Err(_) => read_json(tp)?,
            };
            let (s, t, src) = join_labels(&scores, labels_path, source_count)?;
            (apply_thresholds(&s, &src, &map), t, src)
        }
        _ => {
            return Err(Error::InvalidParam(
                "give either --predictions, or --scores with --thresholds".into(),
            ))
        }
    };

    let report = challenge_metric(&preds, &truths, &sources, source_count)?;
    write_json(out, &report)?;
    mb.output(out);
    mb.write(&out.with_extension("manifest.json"))?;
    println!("challenge metric P = {:.4}", report.p);
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub rule: String,
    pub mode: String,
    pub p: f64,
}

/// Strategy comparison on validation scores: {uniform, weighted, majority}
/// fusion × {global, per-source} thresholds. Weighted fusion weights default
/// to each member's own globally calibrated challenge metric.
pub fn cmd_ablation(
    score_paths: &[PathBuf],
    labels_path: &Path,
    source_count: usize,
    weights: Option<&[f64]>,
    out: &Path,
) -> Result<Vec<AblationRow>> {
    if score_paths.len() < 2 {
        return Err(Error::InvalidParam("ablation needs at least 2 models".into()));
    }
    let mut mb = ManifestBuilder::new("ablation");
    for p in score_paths {
        mb.input(p)?;
    }
    mb.input(labels_path)?;
    let mut models = load_models(score_paths)?;

    // Per-member calibration (also the default fusion weights).
    let mut member_global = Vec::new();
    let mut member_maps_global = Vec::new();
    let mut member_maps_per_source = Vec::new();
    for m in &models {
        let (s, t, src) = join_labels(m, labels_path, source_count)?;
        let (threshold, p) = sweep_global(&s, &t, &src, source_count)?;
        member_global.push(p);
        member_maps_global.push(ThresholdMap::Global { threshold });
        member_maps_per_source.push(sweep_per_source(&s, &t, &src, source_count)?.0);
    }
    let weights: Vec<f64> = match weights {
        Some(w) if w.len() == models.len() => w.to_vec(),
        Some(w) => {
            return Err(Error::InvalidParam(format!(
                "{} weights for {} score files",
                w.len(),
                models.len()
            )))
        }
        None => member_global.clone(),
    };
    for (m, &w) in models.iter_mut().zip(&weights) {
        m.weight = Some(w);
    }

    let mut rows = Vec::new();
    for (rule, fused) in [
        ("uniform", fuse_uniform(&models)?),
        ("weighted", fuse_weighted(&models)?),
    ] {
        let fused_model = ModelScores {
            model_id: rule.to_string(),
            weight: None,
            scores: fused,
        };
        let (s, t, src) = join_labels(&fused_model, labels_path, source_count)?;
        let (_, p_global) = sweep_global(&s, &t, &src, source_count)?;
        let (_, p_per_source) = sweep_per_source(&s, &t, &src, source_count)?;
        rows.push(AblationRow {
            rule: rule.into(),
            mode: "global".into(),
            p: p_global,
        });
        rows.push(AblationRow {
            rule: rule.into(),
            mode: "per-source".into(),
            p: p_per_source,
        });
    }

    for (mode, maps) in [
        ("global", &member_maps_global),
        ("per-source", &member_maps_per_source),
    ] {
        let decisions = fuse_majority(&models, maps)?;
        let metas = load_metadata_csv(labels_path, source_count)?;
        let by_id: std::collections::BTreeMap<&str, _> =
            metas.iter().map(|m| (m.scan_id.as_str(), m)).collect();
        let mut preds = Vec::new();
        let mut truths = Vec::new();
        let mut sources = Vec::new();
        for (id, (source, label)) in &decisions {
            let meta = by_id
                .get(id.as_str())
                .ok_or_else(|| Error::InvalidData(format!("scan {id} missing from labels")))?;
            let truth = meta
                .label
                .ok_or_else(|| Error::InvalidData(format!("scan {id} has no label")))?;
            preds.push(*label);
            truths.push(truth);
            sources.push(*source);
        }
        let report = challenge_metric(&preds, &truths, &sources, source_count)?;
        rows.push(AblationRow {
            rule: "majority".into(),
            mode: mode.into(),
            p: report.p,
        });
    }

    write_json(out, &rows)?;
    mb.output(out);
    mb.write(&out.with_extension("manifest.json"))?;

    println!("{:<10} {:<12} {:>8}", "rule", "thresholds", "P");
    for r in &rows {
        println!("{:<10} {:<12} {:>8.4}", r.rule, r.mode, r.p);
    }
    Ok(rows)
}
