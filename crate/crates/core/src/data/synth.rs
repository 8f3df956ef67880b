//! Synthetic multi-source dataset generator.
//!
//! Slice embeddings are drawn from two Gaussian clusters: a background
//! cluster at the origin and a "lesion" cluster shifted by `separation`
//! along a fixed unit direction. Positive bags contain ceil(rho_s · N)
//! lesion slices; every slice of a bag then receives its source's affine
//! transform plus a per-source bias along the lesion direction, which shifts
//! that source's score distribution and emulates miscalibration.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, ScanBag, SourceId, Split};
use crate::error::{Error, Result};
use crate::numerics::{RngStream, Vector};

/// Per-source generation parameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSpec {
    /// Multiplicative scale of the source's affine transform (> 0).
    #[serde(default = "default_scale")]
    pub scale: f64,
    /// Additive offset: empty = none, one entry = broadcast constant,
    /// otherwise must have length d_in.
    #[serde(default)]
    pub offset: Vec<f64>,
    /// Fraction of lesion slices in a positive bag, in (0, 1].
    #[serde(default = "default_rho")]
    pub positive_fraction: f64,
    /// Bias along the lesion direction applied to every slice of this
    /// source; emulates per-source score miscalibration.
    #[serde(default)]
    pub score_bias: f64,
    pub train_pos: usize,
    pub train_neg: usize,
    pub val_pos: usize,
    pub val_neg: usize,
    #[serde(default)]
    pub test_pos: usize,
    #[serde(default)]
    pub test_neg: usize,
}

fn default_scale() -> f64 {
    1.0
}

fn default_rho() -> f64 {
    0.5
}

/// Domain-shift parameters for the generator.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftSpec {
    pub version: u32,
    /// Distance between background and lesion cluster means.
    pub separation: f64,
    /// Cluster standard deviation (isotropic), default 1.
    #[serde(default = "default_noise")]
    pub noise: f64,
    pub sources: Vec<SourceSpec>,
}

fn default_noise() -> f64 {
    1.0
}

impl ShiftSpec {
    pub fn validate(&self, d_in: usize) -> Result<()> {
        if self.sources.is_empty() {
            return Err(Error::InvalidParam("spec has no sources".into()));
        }
        if !(self.noise > 0.0) {
            return Err(Error::InvalidParam("noise must be > 0".into()));
        }
        let mut total = 0usize;
        for (s, src) in self.sources.iter().enumerate() {
            if !(src.scale > 0.0) {
                return Err(Error::InvalidParam(format!("source {s}: scale <= 0")));
            }
            if !(src.positive_fraction > 0.0 && src.positive_fraction <= 1.0) {
                return Err(Error::InvalidParam(format!(
                    "source {s}: positive_fraction must be in (0, 1]"
                )));
            }
            if !(src.offset.len() <= 1 || src.offset.len() == d_in) {
                return Err(Error::ShapeMismatch(format!(
                    "source {s}: offset length {} vs d_in {d_in}",
                    src.offset.len()
                )));
            }
            total += src.train_pos
                + src.train_neg
                + src.val_pos
                + src.val_neg
                + src.test_pos
                + src.test_neg;
        }
        if total == 0 {
            return Err(Error::InvalidParam("spec generates zero scans".into()));
        }
        Ok(())
    }
}

/// Output of the generator: one dataset per split, plus held-out truth labels
/// for the (unlabeled) test split.
#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub test_truth: Vec<(String, u8)>,
}

/// Unit direction separating the lesion cluster from the background.
pub fn lesion_direction(d_in: usize) -> Vector {
    Vector(vec![1.0 / (d_in as f64).sqrt(); d_in])
}

/// Generate a multi-source dataset. Pure function of (spec, seed, d_in,
/// slice range): replay is byte-identical.
pub fn generate_synthetic(
    spec: &ShiftSpec,
    seed: u64,
    d_in: usize,
    slice_range: (usize, usize),
) -> Result<SyntheticData> {
    spec.validate(d_in)?;
    let (lo, hi) = slice_range;
    if lo == 0 || hi < lo {
        return Err(Error::InvalidParam(format!(
            "slice range ({lo}, {hi}) invalid"
        )));
    }
    let dir = lesion_direction(d_in);
    let mut rng = RngStream::new(seed, 0xDA7A);

    let mut datasets = Vec::new();
    let mut test_truth = Vec::new();
    for split in [Split::Train, Split::Val, Split::Test] {
        let mut bags = Vec::new();
        for (s, src) in spec.sources.iter().enumerate() {
            let (pos, neg) = match split {
                Split::Train => (src.train_pos, src.train_neg),
                Split::Val => (src.val_pos, src.val_neg),
                Split::Test => (src.test_pos, src.test_neg),
            };
            for (label, count) in [(1u8, pos), (0u8, neg)] {
                for i in 0..count {
                    let cls = if label == 1 { "p" } else { "n" };
                    let scan_id = format!("{split}-s{s}-{cls}{i:04}");
                    let n = lo + rng.below(hi - lo + 1);
                    let n_lesion = if label == 1 {
                        ((src.positive_fraction * n as f64).ceil() as usize).clamp(1, n)
                    } else {
                        0
                    };
                    let mut slices = Vec::with_capacity(n);
                    for k in 0..n {
                        let lesion = k < n_lesion;
                        let mut x = Vector::zeros(d_in);
                        for j in 0..d_in {
                            let mean = if lesion { spec.separation * dir[j] } else { 0.0 };
                            x[j] = mean + spec.noise * rng.normal();
                        }
                        // Source affine transform + miscalibration bias.
                        for j in 0..d_in {
                            let off = match src.offset.len() {
                                0 => 0.0,
                                1 => src.offset[0],
                                _ => src.offset[j],
                            };
                            x[j] = src.scale * x[j] + off + src.score_bias * dir[j];
                        }
                        slices.push(x);
                    }
                    rng.shuffle(&mut slices);
                    let stored_label = if split == Split::Test { None } else { Some(label) };
                    if split == Split::Test {
                        test_truth.push((scan_id.clone(), label));
                    }
                    bags.push(ScanBag::new(scan_id, SourceId(s), stored_label, slices)?);
                }
            }
        }
        datasets.push(Dataset::new(split, bags, spec.sources.len())?);
    }
    let mut it = datasets.into_iter();
    Ok(SyntheticData {
        train: it.next().unwrap(),
        val: it.next().unwrap(),
        test: it.next().unwrap(),
        test_truth,
    })
}
