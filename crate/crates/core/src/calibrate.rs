//! The per-source macro-F1 challenge metric and decision-threshold
//! calibration by exhaustive grid sweep over [0.20, 0.80] step 0.005.

use serde::{Deserialize, Serialize};

use crate::data::SourceId;
use crate::error::{Error, Result};

pub const GRID_LO: f64 = 0.20;
pub const GRID_HI: f64 = 0.80;
pub const GRID_STEP: f64 = 0.005;

/// All 121 grid thresholds, exactly representable as i·0.005.
pub fn grid() -> impl Iterator<Item = f64> {
    (40..=160).map(|i| i as f64 * GRID_STEP)
}

/// Default threshold for a source with no calibration scans: grid midpoint.
pub const GRID_DEFAULT: f64 = 0.50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum ThresholdMap {
    Global { threshold: f64 },
    PerSource { thresholds: Vec<f64> },
}

impl ThresholdMap {
    pub fn threshold_for(&self, source: SourceId) -> f64 {
        match self {
            ThresholdMap::Global { threshold } => *threshold,
            ThresholdMap::PerSource { thresholds } => thresholds[source.0],
        }
    }
}

/// Decision rule: positive iff score >= threshold.
pub fn apply_thresholds(scores: &[f64], sources: &[SourceId], map: &ThresholdMap) -> Vec<u8> {
    scores
        .iter()
        .zip(sources)
        .map(|(&p, &s)| u8::from(p >= map.threshold_for(s)))
        .collect()
}

/// F1 = 2tp/(2tp+fp+fn). Conventions for empty classes: a class that is
/// absent and never predicted scores 1.0; tp = 0 with any fp or fn scores 0.
pub fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp == 0 && fp == 0 && fn_ == 0 {
        return 1.0;
    }
    2.0 * tp as f64 / (2.0 * tp as f64 + fp as f64 + fn_ as f64)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SourceMetrics {
    pub f1_covid: f64,
    pub f1_noncovid: f64,
    pub macro_f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

/// Per-source F1 pairs and the source-averaged challenge metric P.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_source: Vec<SourceMetrics>,
    pub p: f64,
}

/// P = (1/S) Σ_s (F1ˢ_covid + F1ˢ_noncovid)/2 over the declared sources.
pub fn challenge_metric(
    predictions: &[u8],
    truths: &[u8],
    sources: &[SourceId],
    source_count: usize,
) -> Result<MetricReport> {
    if predictions.len() != truths.len() || predictions.len() != sources.len() {
        return Err(Error::ShapeMismatch(format!(
            "challenge_metric: {} predictions, {} truths, {} sources",
            predictions.len(),
            truths.len(),
            sources.len()
        )));
    }
    if source_count == 0 {
        return Err(Error::InvalidParam("source_count = 0".into()));
    }
    let mut confusion = vec![[0usize; 4]; source_count]; // tp, fp, fn, tn
    for ((&pred, &truth), &src) in predictions.iter().zip(truths).zip(sources) {
        if src.0 >= source_count {
            return Err(Error::InvalidData(format!(
                "source {} out of range (S={source_count})",
                src.0
            )));
        }
        let cell = &mut confusion[src.0];
        match (pred, truth) {
            (1, 1) => cell[0] += 1,
            (1, 0) => cell[1] += 1,
            (0, 1) => cell[2] += 1,
            (0, 0) => cell[3] += 1,
            _ => {
                return Err(Error::InvalidData(format!(
                    "labels must be binary, got pred={pred} truth={truth}"
                )))
            }
        }
    }
    let per_source: Vec<SourceMetrics> = confusion
        .iter()
        .map(|&[tp, fp, fn_, tn]| {
            let f1_covid = f1(tp, fp, fn_);
            // Non-COVID is the negative class: its tp are the tn above.
            let f1_noncovid = f1(tn, fn_, fp);
            SourceMetrics {
                f1_covid,
                f1_noncovid,
                macro_f1: 0.5 * (f1_covid + f1_noncovid),
                tp,
                fp,
                fn_,
                tn,
            }
        })
        .collect();
    let p = per_source.iter().map(|m| m.macro_f1).sum::<f64>() / source_count as f64;
    Ok(MetricReport { per_source, p })
}

/// Challenge metric at a single global threshold.
pub fn metric_at(
    scores: &[f64],
    truths: &[u8],
    sources: &[SourceId],
    source_count: usize,
    map: &ThresholdMap,
) -> Result<f64> {
    let preds = apply_thresholds(scores, sources, map);
    Ok(challenge_metric(&preds, truths, sources, source_count)?.p)
}

/// Exhaustive global sweep. Ties break toward the smallest grid value.
pub fn sweep_global(
    scores: &[f64],
    truths: &[u8],
    sources: &[SourceId],
    source_count: usize,
) -> Result<(f64, f64)> {
    if scores.is_empty() {
        return Err(Error::EmptyInput("sweep on empty score set".into()));
    }
    let mut best = (GRID_DEFAULT, f64::NEG_INFINITY);
    for t in grid() {
        let p = metric_at(
            scores,
            truths,
            sources,
            source_count,
            &ThresholdMap::Global { threshold: t },
        )?;
        if p > best.1 {
            best = (t, p);
        }
    }
    Ok(best)
}

/// Per-source sweep: each source's macro F1 is maximized independently over
/// the grid; a source with no calibration scans gets the grid midpoint.
/// Returns the threshold map and the challenge metric at those thresholds.
pub fn sweep_per_source(
    scores: &[f64],
    truths: &[u8],
    sources: &[SourceId],
    source_count: usize,
) -> Result<(ThresholdMap, f64)> {
    if scores.is_empty() {
        return Err(Error::EmptyInput("sweep on empty score set".into()));
    }
    let mut thresholds = Vec::with_capacity(source_count);
    for s in 0..source_count {
        let idx: Vec<usize> = (0..scores.len()).filter(|&i| sources[i].0 == s).collect();
        if idx.is_empty() {
            thresholds.push(GRID_DEFAULT);
            continue;
        }
        let s_scores: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
        let s_truths: Vec<u8> = idx.iter().map(|&i| truths[i]).collect();
        let s_sources = vec![SourceId(0); idx.len()];
        let mut best = (GRID_DEFAULT, f64::NEG_INFINITY);
        for t in grid() {
            let preds: Vec<u8> = s_scores.iter().map(|&p| u8::from(p >= t)).collect();
            let m = challenge_metric(&preds, &s_truths, &s_sources, 1)?.p;
            if m > best.1 {
                best = (t, m);
            }
        }
        thresholds.push(best.0);
    }
    let map = ThresholdMap::PerSource { thresholds };
    let p = metric_at(scores, truths, sources, source_count, &map)?;
    Ok((map, p))
}

/// JSON calibration report.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub thresholds: ThresholdMap,
    pub per_source_macro_f1: Vec<f64>,
    pub p: f64,
    pub grid: GridSpec,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridSpec {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            lo: GRID_LO,
            hi: GRID_HI,
            step: GRID_STEP,
        }
    }
}

pub fn calibration_report(
    scores: &[f64],
    truths: &[u8],
    sources: &[SourceId],
    source_count: usize,
    map: ThresholdMap,
) -> Result<CalibrationReport> {
    let preds = apply_thresholds(scores, sources, &map);
    let report = challenge_metric(&preds, truths, sources, source_count)?;
    Ok(CalibrationReport {
        thresholds: map,
        per_source_macro_f1: report.per_source.iter().map(|m| m.macro_f1).collect(),
        p: report.p,
        grid: GridSpec::default(),
    })
}
