//! Scan-level score production for both paradigms (slice-sigmoid averaging
//! and MIL softmax), view averaging, and ensemble fusion rules.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calibrate::ThresholdMap;
use crate::data::{uniform_subsample, ScanBag, SourceId};
use crate::error::{Error, Result};
use crate::model::{MilModel, Mode, SliceModel};
use crate::numerics::{sigmoid_raw, softmax_raw, Vector};

/// One model's per-scan probabilities, with an optional validation score
/// used as its fusion weight.
#[derive(Clone, Debug)]
pub struct ModelScores {
    pub model_id: String,
    pub weight: Option<f64>,
    /// scan_id → (source, probability)
    pub scores: BTreeMap<String, (SourceId, f64)>,
}

/// Mean of per-slice sigmoid probabilities over slice logits.
pub fn slice_average_score(slice_logits: &[f64]) -> Result<f64> {
    if slice_logits.is_empty() {
        return Err(Error::EmptyInput("slice_average_score of empty scan".into()));
    }
    if slice_logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("slice logits".into()));
    }
    Ok(slice_logits.iter().map(|&l| sigmoid_raw(l)).sum::<f64>() / slice_logits.len() as f64)
}

/// COVID probability from the MIL softmax head, deterministic (eval mode).
pub fn mil_score(model: &MilModel, bag: &ScanBag, k_eval: usize) -> Result<f64> {
    let sub = uniform_subsample(bag, k_eval)?;
    let (logits, _) = model.forward(&sub.slices, Mode::Eval);
    Ok(softmax_raw(logits.as_slice())[1])
}

/// Scan score under the slice-averaging paradigm: the slice classifier's
/// binary logit (logit₁ − logit₀) per slice, sigmoid, then the mean.
pub fn slice_model_score(model: &SliceModel, bag: &ScanBag) -> Result<f64> {
    let logits: Vec<f64> = bag
        .slices
        .iter()
        .map(|x| {
            let cache = model.forward(x, None);
            cache.logits[1] - cache.logits[0]
        })
        .collect();
    slice_average_score(&logits)
}

/// Arithmetic mean of per-view probabilities.
pub fn average_views_prob(view_scores: &[f64]) -> Result<f64> {
    if view_scores.is_empty() {
        return Err(Error::EmptyInput("no views".into()));
    }
    Ok(view_scores.iter().sum::<f64>() / view_scores.len() as f64)
}

/// MIL view averaging: 2-class logits are averaged across views before the
/// final softmax; returns the COVID probability.
pub fn average_views_logits(views: &[Vector]) -> Result<f64> {
    if views.is_empty() {
        return Err(Error::EmptyInput("no views".into()));
    }
    let n = views[0].len();
    if views.iter().any(|v| v.len() != n) {
        return Err(Error::ShapeMismatch("view logit lengths differ".into()));
    }
    let mut mean = Vector::zeros(n);
    for v in views {
        mean.add_scaled(v, 1.0 / views.len() as f64);
    }
    Ok(softmax_raw(mean.as_slice())[1])
}

fn check_complete(models: &[ModelScores]) -> Result<Vec<String>> {
    if models.is_empty() {
        return Err(Error::EmptyInput("no models to fuse".into()));
    }
    let ids: Vec<String> = models[0].scores.keys().cloned().collect();
    for m in models {
        if m.scores.len() != ids.len() || !ids.iter().all(|id| m.scores.contains_key(id)) {
            let missing = ids
                .iter()
                .find(|id| !m.scores.contains_key(*id))
                .cloned()
                .unwrap_or_else(|| m.scores.keys().next().cloned().unwrap_or_default());
            return Err(Error::InvalidData(format!(
                "model {} is missing scan {missing}",
                m.model_id
            )));
        }
    }
    Ok(ids)
}

fn fuse_with_weights(
    models: &[ModelScores],
    weights: &[f64],
) -> Result<BTreeMap<String, (SourceId, f64)>> {
    let ids = check_complete(models)?;
    let total: f64 = weights.iter().sum();
    let mut out = BTreeMap::new();
    for id in ids {
        let mut p = 0.0;
        let source = models[0].scores[&id].0;
        for (m, &w) in models.iter().zip(weights) {
            let (src, prob) = m.scores[&id];
            if src != source {
                return Err(Error::InvalidData(format!(
                    "scan {id}: source disagreement across models"
                )));
            }
            p += w / total * prob;
        }
        out.insert(id, (source, p));
    }
    Ok(out)
}

/// Equal-weight probability averaging.
pub fn fuse_uniform(models: &[ModelScores]) -> Result<BTreeMap<String, (SourceId, f64)>> {
    fuse_with_weights(models, &vec![1.0; models.len()])
}

/// Score-weighted probability averaging: p = Σ (s_m/Σ s_j) p_m.
/// Every model must carry a positive validation score.
pub fn fuse_weighted(models: &[ModelScores]) -> Result<BTreeMap<String, (SourceId, f64)>> {
    let weights: Vec<f64> = models
        .iter()
        .map(|m| {
            m.weight.ok_or_else(|| {
                Error::InvalidParam(format!("model {} has no fusion weight", m.model_id))
            })
        })
        .collect::<Result<_>>()?;
    if weights.iter().any(|&w| !(w > 0.0)) {
        return Err(Error::InvalidParam("fusion weights must be > 0".into()));
    }
    fuse_with_weights(models, &weights)
}

/// Majority vote: each model casts a hard decision with its own threshold
/// map; ties (even model counts) resolve positive iff the uniform-average
/// probability is at least 0.5.
pub fn fuse_majority(
    models: &[ModelScores],
    thresholds: &[ThresholdMap],
) -> Result<BTreeMap<String, (SourceId, u8)>> {
    let ids = check_complete(models)?;
    if thresholds.len() != models.len() {
        return Err(Error::InvalidParam(format!(
            "{} threshold maps for {} models",
            thresholds.len(),
            models.len()
        )));
    }
    let mut out = BTreeMap::new();
    for id in ids {
        let source = models[0].scores[&id].0;
        let mut votes = 0usize;
        let mut prob_sum = 0.0;
        for (m, map) in models.iter().zip(thresholds) {
            let (_, prob) = m.scores[&id];
            if prob >= map.threshold_for(source) {
                votes += 1;
            }
            prob_sum += prob;
        }
        let n = models.len();
        let label = if 2 * votes > n {
            1
        } else if 2 * votes < n {
            0
        } else {
            u8::from(prob_sum / n as f64 >= 0.5)
        };
        out.insert(id, (source, label));
    }
    Ok(out)
}

/// Score CSV per model: `scan_id,source,prob`.
pub fn write_score_csv(path: &Path, model_id: &str, scores: &BTreeMap<String, (SourceId, f64)>) -> Result<()> {
    let _ = model_id;
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["scan_id", "source", "prob"])?;
    for (scan_id, (source, prob)) in scores {
        writer.write_record([scan_id.as_str(), &source.0.to_string(), &format!("{prob:.17}")])?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_score_csv(path: &Path, model_id: &str) -> Result<ModelScores> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["scan_id", "source", "prob"] {
        return Err(Error::InvalidData(format!(
            "{}: expected header `scan_id,source,prob`",
            path.display()
        )));
    }
    let mut scores = BTreeMap::new();
    for record in reader.records() {
        let record = record?;
        let scan_id = record.get(0).unwrap_or("").to_string();
        let source: usize = record
            .get(1)
            .unwrap_or("")
            .parse()
            .map_err(|_| Error::InvalidData(format!("bad source for {scan_id}")))?;
        let prob: f64 = record
            .get(2)
            .unwrap_or("")
            .parse()
            .map_err(|_| Error::InvalidData(format!("bad prob for {scan_id}")))?;
        if !(0.0..=1.0).contains(&prob) {
            return Err(Error::InvalidData(format!(
                "scan {scan_id}: probability {prob} outside [0,1]"
            )));
        }
        if scores.insert(scan_id.clone(), (SourceId(source), prob)).is_some() {
            return Err(Error::DuplicateScanId(scan_id));
        }
    }
    Ok(ModelScores {
        model_id: model_id.to_string(),
        weight: None,
        scores,
    })
}

/// Ensemble manifest: the fused models, their weights, and the rule.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub model_ids: Vec<String>,
    pub weights: Option<Vec<f64>>,
    pub rule: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Dims;
    use crate::numerics::RngStream;

    #[test]
    fn slice_average_trivial_points() {
        assert_eq!(slice_average_score(&[0.0]).unwrap(), 0.5);
        // [0, ln 3] → (0.5 + 0.75)/2 = 0.625
        let got = slice_average_score(&[0.0, 3.0_f64.ln()]).unwrap();
        assert!((got - 0.625).abs() < 1e-15);
        // Constant logits → σ(c).
        let c = 1.3;
        let got = slice_average_score(&[c; 7]).unwrap();
        assert!((got - sigmoid_raw(c)).abs() < 1e-15);
        assert!(slice_average_score(&[]).is_err());
    }

    fn toy_bag(rng: &mut RngStream, id: &str) -> ScanBag {
        let slices = (0..5)
            .map(|_| Vector((0..4).map(|_| rng.normal()).collect()))
            .collect();
        ScanBag::new(id.into(), SourceId(0), Some(1), slices).unwrap()
    }

    #[test]
    fn zero_mil_model_scores_half() {
        let dims = Dims {
            d_in: 4,
            enc_hidden: 3,
            d: 4,
            attn_dim: 2,
            head_hidden: 3,
        };
        let model = MilModel::zeros(dims, 0.5);
        let mut rng = RngStream::new(0, 0);
        let bag = toy_bag(&mut rng, "a");
        assert_eq!(mil_score(&model, &bag, 3).unwrap(), 0.5);
    }

    #[test]
    fn mil_score_is_deterministic() {
        let dims = Dims {
            d_in: 4,
            enc_hidden: 3,
            d: 4,
            attn_dim: 2,
            head_hidden: 3,
        };
        let mut rng = RngStream::new(1, 0);
        let model = MilModel::init(dims, 0.5, &mut rng);
        let bag = toy_bag(&mut rng, "a");
        let s1 = mil_score(&model, &bag, 3).unwrap();
        let s2 = mil_score(&model, &bag, 3).unwrap();
        assert_eq!(s1, s2);
        assert!((0.0..=1.0).contains(&s1));
    }

    #[test]
    fn view_averaging() {
        assert_eq!(average_views_prob(&[0.7]).unwrap(), 0.7);
        assert_eq!(average_views_prob(&[0.4, 0.6]).unwrap(), 0.5);
        // MIL logits {[1,0],[0,1]} → softmax([0.5,0.5]) → 0.5.
        let views = vec![
            Vector(vec![1.0, 0.0]),
            Vector(vec![0.0, 1.0]),
        ];
        assert_eq!(average_views_logits(&views).unwrap(), 0.5);
        assert!(average_views_prob(&[]).is_err());
    }

    #[test]
    fn view_averaging_permutation_invariant() {
        let mut rng = RngStream::new(2, 0);
        let views: Vec<f64> = (0..6).map(|_| rng.next_f64()).collect();
        let mut reversed = views.clone();
        reversed.reverse();
        assert!(
            (average_views_prob(&views).unwrap() - average_views_prob(&reversed).unwrap()).abs()
                < 1e-15
        );
    }

    fn model_with(id: &str, weight: Option<f64>, probs: &[(&str, usize, f64)]) -> ModelScores {
        ModelScores {
            model_id: id.into(),
            weight,
            scores: probs
                .iter()
                .map(|&(scan, src, p)| (scan.to_string(), (SourceId(src), p)))
                .collect(),
        }
    }

    #[test]
    fn equal_weights_reduce_to_uniform() {
        let models = vec![
            model_with("a", Some(0.5), &[("x", 0, 0.2)]),
            model_with("b", Some(0.5), &[("x", 0, 0.4)]),
            model_with("c", Some(0.5), &[("x", 0, 0.6)]),
        ];
        let w = fuse_weighted(&models).unwrap();
        let u = fuse_uniform(&models).unwrap();
        assert!((w["x"].1 - 0.4).abs() < 1e-15);
        assert!((w["x"].1 - u["x"].1).abs() < 1e-15);
    }

    #[test]
    fn published_weight_example() {
        // Weighted-mean oracle on the reported per-family validation scores.
        let s = [0.856, 0.865, 0.869, 0.877, 0.910];
        let p = [0.6, 0.7, 0.5, 0.8, 0.9];
        let models: Vec<ModelScores> = s
            .iter()
            .zip(&p)
            .enumerate()
            .map(|(i, (&w, &prob))| model_with(&format!("m{i}"), Some(w), &[("x", 0, prob)]))
            .collect();
        let fused = fuse_weighted(&models).unwrap()["x"].1;
        let oracle =
            s.iter().zip(&p).map(|(w, q)| w * q).sum::<f64>() / s.iter().sum::<f64>();
        assert!((fused - oracle).abs() < 1e-15);
        assert!((fused - 0.70236).abs() < 1e-4, "fused = {fused}");
    }

    #[test]
    fn weight_scale_invariance_and_convexity() {
        let mut rng = RngStream::new(5, 0);
        for _ in 0..20 {
            let m = 2 + rng.below(5);
            let probs: Vec<f64> = (0..m).map(|_| rng.next_f64()).collect();
            let weights: Vec<f64> = (0..m).map(|_| 0.1 + rng.next_f64()).collect();
            let models: Vec<ModelScores> = probs
                .iter()
                .zip(&weights)
                .enumerate()
                .map(|(i, (&p, &w))| model_with(&format!("m{i}"), Some(w), &[("x", 0, p)]))
                .collect();
            let fused = fuse_weighted(&models).unwrap()["x"].1;
            let lo = probs.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(fused >= lo - 1e-12 && fused <= hi + 1e-12);

            let scaled: Vec<ModelScores> = models
                .iter()
                .map(|m| ModelScores {
                    weight: m.weight.map(|w| w * 37.5),
                    ..m.clone()
                })
                .collect();
            let fused2 = fuse_weighted(&scaled).unwrap()["x"].1;
            assert!((fused - fused2).abs() < 1e-12);
        }
    }

    #[test]
    fn single_model_fusion_is_identity() {
        let models = vec![model_with("a", Some(0.9), &[("x", 0, 0.37), ("y", 1, 0.81)])];
        let fused = fuse_weighted(&models).unwrap();
        assert_eq!(fused["x"].1, 0.37);
        assert_eq!(fused["y"].1, 0.81);
    }

    #[test]
    fn majority_vote_counts() {
        let models: Vec<ModelScores> = (0..9)
            .map(|i| {
                let p = if i < 5 { 0.9 } else { 0.1 };
                model_with(&format!("m{i}"), None, &[("x", 0, p)])
            })
            .collect();
        let maps = vec![ThresholdMap::Global { threshold: 0.5 }; 9];
        let out = fuse_majority(&models, &maps).unwrap();
        assert_eq!(out["x"].1, 1);
    }

    #[test]
    fn majority_tie_resolved_by_uniform_average() {
        let models = vec![
            model_with("a", None, &[("x", 0, 0.9)]),
            model_with("b", None, &[("x", 0, 0.2)]),
        ];
        let maps = vec![ThresholdMap::Global { threshold: 0.5 }; 2];
        let out = fuse_majority(&models, &maps).unwrap();
        // 1 vote each; uniform average 0.55 >= 0.5 → positive.
        assert_eq!(out["x"].1, 1);
    }

    #[test]
    fn missing_scan_rejected() {
        let models = vec![
            model_with("a", Some(1.0), &[("x", 0, 0.5), ("y", 0, 0.5)]),
            model_with("b", Some(1.0), &[("x", 0, 0.5)]),
        ];
        assert!(fuse_uniform(&models).is_err());
    }

    #[test]
    fn nonpositive_weight_rejected() {
        let models = vec![
            model_with("a", Some(0.0), &[("x", 0, 0.5)]),
            model_with("b", Some(1.0), &[("x", 0, 0.5)]),
        ];
        assert!(fuse_weighted(&models).is_err());
    }

    #[test]
    fn score_csv_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("scores.csv");
        let scores: BTreeMap<String, (SourceId, f64)> = [
            ("a".to_string(), (SourceId(0), 0.123456789)),
            ("b".to_string(), (SourceId(2), 0.987)),
        ]
        .into();
        write_score_csv(&path, "m", &scores).unwrap();
        let back = read_score_csv(&path, "m").unwrap();
        assert_eq!(back.scores, scores);
    }
}
