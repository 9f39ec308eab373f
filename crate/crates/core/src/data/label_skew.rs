use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Gamma};

use super::Samples;
use crate::error::{invalid, Error, Result};
use crate::rng::{self, Rng};

const MAX_RESAMPLES: usize = 10;

fn dirichlet(alpha: f64, k: usize, r: &mut Rng) -> Result<Vec<f64>> {
    let g = Gamma::new(alpha, 1.0).map_err(|e| Error::Invalid(e.to_string()))?;
    for _ in 0..MAX_RESAMPLES {
        let draws: Vec<f64> = (0..k).map(|_| g.sample(r)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 && total.is_finite() {
            return Ok(draws.into_iter().map(|d| d / total).collect());
        }
    }
    invalid("Dirichlet draw underflowed; alpha is too small")
}

/// Largest-remainder rounding of `p * n`.
fn apportion(p: &[f64], n: usize) -> Vec<usize> {
    let ideal: Vec<f64> = p.iter().map(|v| v * n as f64).collect();
    let mut counts: Vec<usize> = ideal.iter().map(|v| v.floor() as usize).collect();
    let rest = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = ideal[a] - ideal[a].floor();
        let fb = ideal[b] - ideal[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(rest) {
        counts[i] += 1;
    }
    counts
}

/// Folds singleton classes into the largest class so each present class can
/// be split. Returns `None` when fewer than two classes remain.
fn repair(mut counts: Vec<usize>) -> Option<Vec<usize>> {
    let largest = (0..counts.len()).max_by_key(|&i| (counts[i], usize::MAX - i))?;
    for i in 0..counts.len() {
        if counts[i] == 1 && i != largest {
            counts[i] = 0;
            counts[largest] += 1;
        }
    }
    (counts.iter().filter(|&&c| c >= 2).count() >= 2).then_some(counts)
}

/// Per-client class counts with proportions drawn from `Dirichlet(alpha)`.
/// `classes_available[k]` restricts which classes client `k` may receive.
fn draw_counts(
    sizes: &[usize],
    available: &[Vec<bool>],
    alpha: f64,
    r: &mut Rng,
) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::with_capacity(sizes.len());
    for (k, (&n, avail)) in sizes.iter().zip(available).enumerate() {
        let classes: Vec<usize> = (0..avail.len()).filter(|&c| avail[c]).collect();
        let mut got = None;
        for _ in 0..MAX_RESAMPLES {
            let p = dirichlet(alpha, classes.len(), r)?;
            if let Some(c) = repair(apportion(&p, n)) {
                got = Some(c);
                break;
            }
        }
        let Some(local) = got else {
            return invalid(format!(
                "client {k}: label skew with alpha={alpha} left fewer than two usable classes after {MAX_RESAMPLES} draws"
            ));
        };
        let mut full = vec![0; avail.len()];
        for (&c, v) in classes.iter().zip(local) {
            full[c] = v;
        }
        out.push(full);
    }
    Ok(out)
}

/// Class counts for `n_clients` clients of `n` samples each.
pub fn dirichlet_class_counts(
    n_clients: usize,
    n: usize,
    n_classes: usize,
    alpha: f64,
    r: &mut Rng,
) -> Result<Vec<Vec<usize>>> {
    if alpha.is_nan() || alpha <= 0.0 {
        return invalid("dirichlet alpha must be > 0");
    }
    draw_counts(
        &vec![n; n_clients],
        &vec![vec![true; n_classes]; n_clients],
        alpha,
        r,
    )
}

/// Resamples each client's pool to Dirichlet class proportions, keeping `n_k`.
/// Classes absent from a pool stay absent; short classes are topped up by
/// sampling with replacement.
pub fn apply_label_skew(pools: &[Samples], alpha: f64, seed: u64) -> Result<Vec<Samples>> {
    if alpha.is_nan() || alpha <= 0.0 {
        return invalid("dirichlet alpha must be > 0");
    }
    let n_classes = pools
        .iter()
        .flat_map(|p| p.y.iter().copied())
        .max()
        .map_or(0, |m| m + 1);
    let sizes: Vec<usize> = pools.iter().map(Samples::len).collect();
    let available: Vec<Vec<bool>> = pools
        .iter()
        .map(|p| p.class_counts(n_classes).iter().map(|&c| c > 0).collect())
        .collect();
    let mut r = rng::stream(seed, &[rng::tag::LABEL_SKEW]);
    let counts = draw_counts(&sizes, &available, alpha, &mut r)?;
    let mut out = Vec::with_capacity(pools.len());
    for (pool, target) in pools.iter().zip(counts) {
        let mut idx = Vec::with_capacity(pool.len());
        for (c, &want) in target.iter().enumerate() {
            let mut members: Vec<usize> = (0..pool.len()).filter(|&i| pool.y[i] == c).collect();
            members.shuffle(&mut r);
            let have = members.len();
            idx.extend(members.iter().copied().take(want));
            for _ in have..want {
                idx.push(members[r.random_range(0..have)]);
            }
        }
        out.push(pool.subset(&idx));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn apportion_is_exact() {
        assert_eq!(apportion(&[0.5, 0.25, 0.25], 10), vec![5, 3, 2]);
        assert_eq!(apportion(&[1.0 / 3.0; 3], 100).iter().sum::<usize>(), 100);
    }

    #[test]
    fn repair_removes_singletons() {
        assert_eq!(repair(vec![1, 5, 4]), Some(vec![0, 6, 4]));
        assert_eq!(repair(vec![9, 1, 0]), None);
    }
}
