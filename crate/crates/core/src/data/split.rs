use rand::seq::SliceRandom;

use super::Samples;
use crate::error::{invalid, Result};
use crate::rng::{self, tag};

/// Seeded split stratified by class. The test side receives
/// `round(len * test_ratio)` samples, apportioned across classes by largest
/// remainder so per-class halves differ by at most one.
pub fn train_test_split(data: &Samples, test_ratio: f64, seed: u64) -> Result<(Samples, Samples)> {
    if !(test_ratio > 0.0 && test_ratio < 1.0) {
        return invalid("test_ratio must lie in (0, 1)");
    }
    let n_classes = data.y.iter().max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &y) in data.y.iter().enumerate() {
        by_class[y].push(i);
    }
    if let Some(c) = by_class.iter().position(|m| m.len() == 1) {
        return invalid(format!("class {c} has a single sample and cannot be split"));
    }

    let total = (data.len() as f64 * test_ratio).round() as usize;
    let ideal: Vec<f64> = by_class.iter().map(|m| m.len() as f64 * test_ratio).collect();
    let mut take: Vec<usize> = ideal.iter().map(|v| v.floor() as usize).collect();
    let assigned: usize = take.iter().sum();
    let mut order: Vec<usize> = (0..n_classes).filter(|&c| !by_class[c].is_empty()).collect();
    order.sort_by(|&a, &b| {
        let fa = ideal[a] - ideal[a].floor();
        let fb = ideal[b] - ideal[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &c in order.iter().take(total.saturating_sub(assigned)) {
        take[c] += 1;
    }

    let mut r = rng::stream(seed, &[tag::SPLIT]);
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for (members, &t) in by_class.iter_mut().zip(&take) {
        members.shuffle(&mut r);
        let (te, tr) = members.split_at(t);
        test_idx.extend_from_slice(te);
        train_idx.extend_from_slice(tr);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok((data.subset(&train_idx), data.subset(&test_idx)))
}
