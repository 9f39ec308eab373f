use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::label_skew::dirichlet_class_counts;
use super::split::train_test_split;
use super::{ClientDataset, Samples, SkewMode, SyntheticTaskSpec};
use crate::error::{invalid, Result};
use crate::rng::{self, tag};

const TEMPLATE_ATTEMPTS: usize = 10_000;

/// `C` binary templates of `grid * grid` pixels with pairwise Hamming
/// distance at least `grid² / 4`.
pub fn class_templates(spec: &SyntheticTaskSpec) -> Result<Vec<Vec<f64>>> {
    let dim = spec.pattern_dim();
    let min_dist = dim.div_ceil(4);
    let mut r = rng::stream(spec.seed, &[tag::TEMPLATES]);
    let mut out: Vec<Vec<bool>> = Vec::with_capacity(spec.n_classes);
    let mut attempts = 0;
    while out.len() < spec.n_classes {
        attempts += 1;
        if attempts > TEMPLATE_ATTEMPTS || min_dist == 0 {
            return invalid(format!(
                "cannot place {} templates {min_dist} bits apart on a {}x{} grid; increase grid",
                spec.n_classes, spec.grid, spec.grid
            ));
        }
        let cand: Vec<bool> = (0..dim).map(|_| r.random_bool(0.5)).collect();
        let far = out
            .iter()
            .all(|t| t.iter().zip(&cand).filter(|(a, b)| a != b).count() >= min_dist);
        if far {
            out.push(cand);
        }
    }
    Ok(out
        .into_iter()
        .map(|t| t.into_iter().map(|b| if b { 1.0 } else { 0.0 }).collect())
        .collect())
}

/// Color channel that client `k` ties to label `y`.
pub fn color_channel(client: usize, label: usize, attr_dim: usize) -> usize {
    (label + client) % attr_dim
}

fn client_scale(spec: &SyntheticTaskSpec, client: usize) -> f64 {
    if spec.scale_skew == 0.0 {
        return 1.0;
    }
    let t = client as f64 / (spec.n_clients - 1) as f64 - 0.5;
    1.0 + 2.0 * spec.scale_skew * t
}

fn balanced_counts(n: usize, classes: usize) -> Vec<usize> {
    (0..classes).map(|c| n / classes + usize::from(c < n % classes)).collect()
}

/// Per-client sample pools before the train/test split.
pub fn generate_client_pools(spec: &SyntheticTaskSpec) -> Result<Vec<Samples>> {
    spec.validate()?;
    let templates = class_templates(spec)?;
    let counts: Vec<Vec<usize>> = match spec.label_skew_alpha {
        None => vec![balanced_counts(spec.samples_per_client, spec.n_classes); spec.n_clients],
        Some(alpha) => {
            let mut r = rng::stream(spec.seed, &[tag::LABEL_SKEW]);
            dirichlet_class_counts(spec.n_clients, spec.samples_per_client, spec.n_classes, alpha, &mut r)?
        }
    };
    let noise = Normal::new(0.0, spec.noise).map_err(|e| crate::Error::Invalid(e.to_string()))?;
    let pd = spec.pattern_dim();
    let mut pools = Vec::with_capacity(spec.n_clients);
    for (k, per_class) in counts.iter().enumerate() {
        let mut r = rng::stream(spec.seed, &[tag::CLIENT_DATA, k as u64]);
        let scale = client_scale(spec, k);
        let mut samples = Samples::new(spec.input_dim());
        let mut feat = vec![0.0; spec.input_dim()];
        for (y, &n) in per_class.iter().enumerate() {
            for _ in 0..n {
                for (f, &t) in feat[..pd].iter_mut().zip(&templates[y]) {
                    *f = scale * (t + noise.sample(&mut r));
                }
                let tied = spec.skew != SkewMode::None && r.random_bool(spec.rho);
                let channel = if tied {
                    color_channel(k, y, spec.attr_dim)
                } else {
                    r.random_range(0..spec.attr_dim)
                };
                let intensity = match spec.skew {
                    SkewMode::Foreground => {
                        let mass = feat[..pd].iter().map(|v| v.clamp(0.0, 1.0)).sum::<f64>() / pd as f64;
                        spec.attr_scale * mass
                    }
                    _ => spec.attr_scale,
                };
                feat[pd..].fill(0.0);
                feat[pd + channel] = intensity;
                samples.push(&feat, y);
            }
        }
        pools.push(samples);
    }
    Ok(pools)
}

/// Generates every client's stratified train/test data.
pub fn generate_federation_data(spec: &SyntheticTaskSpec) -> Result<Vec<ClientDataset>> {
    generate_client_pools(spec)?
        .into_iter()
        .enumerate()
        .map(|(k, pool)| {
            let seed = rng::derive(spec.seed, &[tag::SPLIT, k as u64]);
            let (train, test) = train_test_split(&pool, spec.test_ratio, seed)?;
            Ok(ClientDataset { client: k, train, test })
        })
        .collect()
}
