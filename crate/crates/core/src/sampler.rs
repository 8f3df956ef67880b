//! Center-stratified epoch construction.
//!
//! At the start of each epoch every source's pool is shuffled and smaller
//! pools are oversampled with replacement until they match the largest
//! source. Batches are then assembled by interleaving the pools round-robin
//! (so per-source counts within any batch differ by at most one) and
//! shuffling within each batch. The last partial batch is kept.

use crate::data::SourceId;
use crate::error::{Error, Result};
use crate::numerics::RngStream;

const STREAM_SAMPLER: u64 = 0x5A_3159;

/// One epoch's batches: sample indices tagged with their source.
#[derive(Clone, Debug)]
pub struct EpochPlan {
    pub batches: Vec<Vec<(usize, SourceId)>>,
    pub seed: u64,
}

impl EpochPlan {
    pub fn total_items(&self) -> usize {
        self.batches.iter().map(|b| b.len()).sum()
    }
}

fn assemble(
    mut pools: Vec<Vec<(usize, SourceId)>>,
    batch_size: usize,
    rng: &mut RngStream,
    seed: u64,
) -> EpochPlan {
    let target = pools.iter().map(|p| p.len()).max().unwrap_or(0);
    for pool in &mut pools {
        rng.shuffle(pool);
        // Oversample with replacement until the pool matches the largest.
        let base = pool.len();
        while pool.len() < target {
            let pick = pool[rng.below(base)];
            pool.push(pick);
        }
    }
    // Round-robin interleave, then chunk and shuffle within each batch.
    let mut stream = Vec::with_capacity(target * pools.len());
    for k in 0..target {
        for pool in &pools {
            stream.push(pool[k]);
        }
    }
    let mut batches: Vec<Vec<(usize, SourceId)>> = stream
        .chunks(batch_size)
        .map(|c| c.to_vec())
        .collect();
    for batch in &mut batches {
        rng.shuffle(batch);
    }
    EpochPlan { batches, seed }
}

/// Source-stratified epoch. Every declared source must contribute at least
/// one item; the largest source's items each appear exactly once.
pub fn build_epoch(
    items: &[(usize, SourceId)],
    source_count: usize,
    batch_size: usize,
    seed: u64,
) -> Result<EpochPlan> {
    if batch_size < source_count.max(1) {
        return Err(Error::InvalidParam(format!(
            "batch size {batch_size} smaller than source count {source_count}"
        )));
    }
    let mut pools: Vec<Vec<(usize, SourceId)>> = vec![Vec::new(); source_count];
    for &(idx, src) in items {
        if src.0 >= source_count {
            return Err(Error::InvalidData(format!(
                "item {idx}: source {} out of range",
                src.0
            )));
        }
        pools[src.0].push((idx, src));
    }
    if let Some(s) = pools.iter().position(|p| p.is_empty()) {
        return Err(Error::InvalidData(format!(
            "declared source {s} has no items"
        )));
    }
    let mut rng = RngStream::new(seed, STREAM_SAMPLER);
    Ok(assemble(pools, batch_size, &mut rng, seed))
}

/// Class-and-center balanced epoch: balancing is over (source × class)
/// cells. An empty cell is skipped with a warning rather than an error
/// (a source may legitimately have no positives in a split).
pub fn build_balanced_epoch(
    items: &[(usize, SourceId, u8)],
    source_count: usize,
    batch_size: usize,
    seed: u64,
) -> Result<EpochPlan> {
    if batch_size == 0 {
        return Err(Error::InvalidParam("batch size 0".into()));
    }
    let mut cells: Vec<Vec<(usize, SourceId)>> = vec![Vec::new(); source_count * 2];
    for &(idx, src, class) in items {
        if src.0 >= source_count {
            return Err(Error::InvalidData(format!(
                "item {idx}: source {} out of range",
                src.0
            )));
        }
        if class > 1 {
            return Err(Error::InvalidData(format!("item {idx}: class {class}")));
        }
        cells[src.0 * 2 + class as usize].push((idx, src));
    }
    let mut nonempty = Vec::new();
    for (i, cell) in cells.into_iter().enumerate() {
        if cell.is_empty() {
            log::warn!(
                "balanced sampler: empty cell (source {}, class {}), skipping",
                i / 2,
                i % 2
            );
        } else {
            nonempty.push(cell);
        }
    }
    if nonempty.is_empty() {
        return Err(Error::EmptyInput("no items to sample".into()));
    }
    let mut rng = RngStream::new(seed, STREAM_SAMPLER ^ 0xBA1A);
    Ok(assemble(nonempty, batch_size, &mut rng, seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn items(sizes: &[usize]) -> Vec<(usize, SourceId)> {
        let mut out = Vec::new();
        let mut idx = 0;
        for (s, &n) in sizes.iter().enumerate() {
            for _ in 0..n {
                out.push((idx, SourceId(s)));
                idx += 1;
            }
        }
        out
    }

    fn per_source_counts(plan: &EpochPlan, s: usize) -> Vec<usize> {
        let mut counts = vec![0; s];
        for batch in &plan.batches {
            for &(_, src) in batch {
                counts[src.0] += 1;
            }
        }
        counts
    }

    #[test]
    fn balanced_input_stays_balanced() {
        let plan = build_epoch(&items(&[4, 4]), 2, 4, 0).unwrap();
        assert_eq!(plan.batches.len(), 2);
        for batch in &plan.batches {
            assert_eq!(batch.len(), 4);
            let c0 = batch.iter().filter(|(_, s)| s.0 == 0).count();
            assert_eq!(c0, 2);
        }
    }

    #[test]
    fn oversampling_covers_small_source() {
        // Oracle: count multiplicities in the emitted plan.
        let plan = build_epoch(&items(&[6, 2]), 2, 4, 1).unwrap();
        let counts = per_source_counts(&plan, 2);
        assert_eq!(counts, vec![6, 6]);
        let mut mult: BTreeMap<usize, usize> = BTreeMap::new();
        for batch in &plan.batches {
            for &(idx, _) in batch {
                *mult.entry(idx).or_default() += 1;
            }
        }
        // Each largest-source item appears exactly once. The small pool keeps
        // its own items and appends replacement draws, so every source-1 item
        // appears at least once and the pool totals six.
        for idx in 0..6 {
            assert_eq!(mult.get(&idx).copied().unwrap_or(0), 1, "index {idx}");
        }
        for idx in 6..8 {
            assert!(mult.get(&idx).copied().unwrap_or(0) >= 1, "index {idx}");
        }
        let small: usize = (6..8).map(|i| mult.get(&i).copied().unwrap_or(0)).sum();
        assert_eq!(small, 6);
    }

    #[test]
    fn single_source_is_plain_partition() {
        let plan = build_epoch(&items(&[5]), 1, 2, 3).unwrap();
        let mut all: Vec<usize> = plan
            .batches
            .iter()
            .flatten()
            .map(|&(i, _)| i)
            .collect();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3, 4]);
        assert_eq!(plan.batches.last().unwrap().len(), 1); // kept partial batch
    }

    #[test]
    fn per_batch_source_balance_within_one() {
        let plan = build_epoch(&items(&[10, 3, 7]), 3, 6, 9).unwrap();
        for batch in &plan.batches {
            let mut counts = vec![0i64; 3];
            for &(_, s) in batch {
                counts[s.0] += 1;
            }
            let max = counts.iter().max().unwrap();
            let min = counts.iter().min().unwrap();
            assert!(max - min <= 1, "batch counts {counts:?}");
        }
    }

    #[test]
    fn same_seed_replays_different_seed_varies() {
        let xs = items(&[8, 5]);
        let a = build_epoch(&xs, 2, 4, 42).unwrap();
        let b = build_epoch(&xs, 2, 4, 42).unwrap();
        assert_eq!(a.batches, b.batches);
        let c = build_epoch(&xs, 2, 4, 43).unwrap();
        assert_ne!(a.batches, c.batches);
    }

    #[test]
    fn empty_declared_source_is_error() {
        assert!(build_epoch(&items(&[4, 0]), 2, 4, 0).is_err());
    }

    fn class_items(cells: &[((usize, u8), usize)]) -> Vec<(usize, SourceId, u8)> {
        let mut out = Vec::new();
        let mut idx = 0;
        for &((src, class), n) in cells {
            for _ in 0..n {
                out.push((idx, SourceId(src), class));
                idx += 1;
            }
        }
        out
    }

    #[test]
    fn balanced_no_oversampling_when_even() {
        let xs = class_items(&[((0, 1), 2), ((0, 0), 2)]);
        let plan = build_balanced_epoch(&xs, 1, 4, 0).unwrap();
        assert_eq!(plan.total_items(), 4);
    }

    #[test]
    fn balanced_oversamples_minority_class() {
        // Oracle: multiplicity count. Cell (0,+) has 1 item, (0,−) has 3.
        let xs = class_items(&[((0, 1), 1), ((0, 0), 3)]);
        let plan = build_balanced_epoch(&xs, 1, 6, 1).unwrap();
        assert_eq!(plan.total_items(), 6);
        let pos_draws = plan
            .batches
            .iter()
            .flatten()
            .filter(|&&(i, _)| i == 0)
            .count();
        assert_eq!(pos_draws, 3);
    }

    #[test]
    fn balanced_skips_empty_cell() {
        // Source 1 has no positives; the plan is built from remaining cells.
        let xs = class_items(&[((0, 1), 2), ((0, 0), 2), ((1, 0), 2)]);
        let plan = build_balanced_epoch(&xs, 2, 3, 0).unwrap();
        assert_eq!(plan.total_items(), 6);
    }

    #[test]
    fn balanced_cell_totals_equal() {
        let xs = class_items(&[((0, 1), 5), ((0, 0), 2), ((1, 1), 3), ((1, 0), 1)]);
        let plan = build_balanced_epoch(&xs, 2, 4, 7).unwrap();
        let mut per_cell: BTreeMap<(usize, u8), usize> = BTreeMap::new();
        let class_of = |i: usize| xs[i].2;
        for batch in &plan.batches {
            for &(i, s) in batch {
                *per_cell.entry((s.0, class_of(i))).or_default() += 1;
            }
        }
        let counts: Vec<usize> = per_cell.values().copied().collect();
        assert!(counts.iter().all(|&c| c == counts[0]), "{per_cell:?}");
    }
}
