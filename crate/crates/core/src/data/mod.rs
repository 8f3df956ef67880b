//! Dataset representation: scans as bags of slice embeddings with labels and
//! source ids, plus a synthetic multi-source generator with controllable
//! domain shift.

pub mod io;
pub mod synth;

pub use synth::{generate_synthetic, ShiftSpec, SourceSpec, SyntheticData};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Vector;

/// Hospital center id, in [0, source_count).
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SourceId(pub usize);

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
            Split::Test => write!(f, "test"),
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidParam(format!("unknown split `{other}`"))),
        }
    }
}

/// One scan: an ordered bag of slice embedding vectors plus label and source.
/// The label is absent only for test-split bags.
#[derive(Clone, Debug)]
pub struct ScanBag {
    pub scan_id: String,
    pub source: SourceId,
    pub label: Option<u8>,
    pub slices: Vec<Vector>,
}

impl ScanBag {
    pub fn new(
        scan_id: String,
        source: SourceId,
        label: Option<u8>,
        slices: Vec<Vector>,
    ) -> Result<Self> {
        if slices.is_empty() {
            return Err(Error::EmptyInput(format!("bag {scan_id} has no slices")));
        }
        let d = slices[0].len();
        if slices.iter().any(|s| s.len() != d) {
            return Err(Error::ShapeMismatch(format!(
                "bag {scan_id}: slices of differing dimension"
            )));
        }
        if let Some(l) = label {
            if l > 1 {
                return Err(Error::InvalidData(format!("bag {scan_id}: label {l}")));
            }
        }
        Ok(ScanBag {
            scan_id,
            source,
            label,
            slices,
        })
    }

    pub fn num_slices(&self) -> usize {
        self.slices.len()
    }

    pub fn dim(&self) -> usize {
        self.slices[0].len()
    }
}

/// A split's worth of scans. Scan ids are unique within a dataset.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub split: Split,
    pub bags: Vec<ScanBag>,
    pub source_count: usize,
}

impl Dataset {
    pub fn new(split: Split, bags: Vec<ScanBag>, source_count: usize) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for bag in &bags {
            if !seen.insert(bag.scan_id.as_str()) {
                return Err(Error::DuplicateScanId(bag.scan_id.clone()));
            }
            if bag.source.0 >= source_count {
                return Err(Error::InvalidData(format!(
                    "bag {}: source {} out of range (S={source_count})",
                    bag.scan_id, bag.source.0
                )));
            }
        }
        Ok(Dataset {
            split,
            bags,
            source_count,
        })
    }

    /// (positive, negative, unlabeled) counts per source.
    pub fn per_source_counts(&self) -> Vec<(usize, usize, usize)> {
        let mut counts = vec![(0usize, 0usize, 0usize); self.source_count];
        for bag in &self.bags {
            let c = &mut counts[bag.source.0];
            match bag.label {
                Some(1) => c.0 += 1,
                Some(_) => c.1 += 1,
                None => c.2 += 1,
            }
        }
        counts
    }

    pub fn total_counts(&self) -> (usize, usize, usize) {
        self.per_source_counts()
            .iter()
            .fold((0, 0, 0), |acc, c| (acc.0 + c.0, acc.1 + c.1, acc.2 + c.2))
    }
}

/// Metadata-only view of a scan (CSV skeleton without embeddings).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScanMeta {
    pub scan_id: String,
    pub label: Option<u8>,
    pub source: SourceId,
}

/// Retain K uniformly spaced slices. If the bag has at most K slices it is
/// returned unchanged; otherwise indices floor(j·N/K) for j = 0..K-1 are kept
/// (strictly increasing, first index 0, spanning the full extent).
pub fn uniform_subsample(bag: &ScanBag, k: usize) -> Result<ScanBag> {
    if k == 0 {
        return Err(Error::InvalidParam("subsample K = 0".into()));
    }
    let n = bag.num_slices();
    if n <= k {
        return Ok(bag.clone());
    }
    let slices = (0..k).map(|j| bag.slices[j * n / k].clone()).collect();
    ScanBag::new(
        bag.scan_id.clone(),
        bag.source,
        bag.label,
        slices,
    )
}

/// Indices kept by `uniform_subsample` for a bag of length n.
pub fn subsample_indices(n: usize, k: usize) -> Vec<usize> {
    if n <= k {
        (0..n).collect()
    } else {
        (0..k).map(|j| j * n / k).collect()
    }
}
