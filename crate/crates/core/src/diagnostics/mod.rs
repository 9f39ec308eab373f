//! Observers for the convergence-analysis quantities: inexactness of local
//! solves, gradient dissimilarity across clients, second moments of the MI
//! gradients, and the decrease behaviour of the global objective.
//!
//! Nothing here mutates training state.

pub mod convex;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::scalar::{l2_norm, squared_norm};

/// Below this squared norm a mean gradient is treated as zero.
pub const STATIONARY_EPS: f64 = 1e-24;

/// Measured inexactness `‖∇h(candidate)‖ / ‖∇h(reference)‖`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaEstimate {
    pub gamma: f64,
    /// The reference point was already stationary; `gamma` is reported as 0.
    pub stationary: bool,
}

/// Ratio of gradient norms given the two gradients directly.
pub fn gamma_from_grads(candidate: &[f64], reference: &[f64]) -> GammaEstimate {
    let r = l2_norm(reference);
    if r * r <= STATIONARY_EPS {
        return GammaEstimate {
            gamma: 0.0,
            stationary: true,
        };
    }
    GammaEstimate {
        gamma: l2_norm(candidate) / r,
        stationary: false,
    }
}

/// `γ̂` for a local objective with gradient `grad`.
pub fn gamma_inexactness<F>(grad: F, candidate: &[f64], reference: &[f64]) -> Result<GammaEstimate>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    if candidate.len() != reference.len() {
        return invalid("candidate and reference differ in length");
    }
    Ok(gamma_from_grads(&grad(candidate)?, &grad(reference)?))
}

/// Local dissimilarity `B = sqrt(E_k ‖g_k‖² / ‖E_k g_k‖²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dissimilarity {
    Value(f64),
    /// Mean gradient vanished.
    Stationary,
}

impl Dissimilarity {
    pub fn value(self) -> Option<f64> {
        match self {
            Self::Value(v) => Some(v),
            Self::Stationary => None,
        }
    }
}

/// Weighted mean of gradient vectors; weights are normalised to sum to one.
pub fn weighted_mean(grads: &[Vec<f64>], weights: &[f64]) -> Result<Vec<f64>> {
    if grads.is_empty() {
        return invalid("need at least one gradient");
    }
    if grads.len() != weights.len() {
        return invalid("one weight per gradient required");
    }
    let dim = grads[0].len();
    if grads.iter().any(|g| g.len() != dim) {
        return invalid("gradients differ in length");
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || weights.iter().any(|&w| w < 0.0) {
        return invalid("weights must be non-negative with a positive sum");
    }
    let mut mean = vec![0.0; dim];
    for (g, &w) in grads.iter().zip(weights) {
        let w = w / total;
        for (m, &v) in mean.iter_mut().zip(g) {
            *m += w * v;
        }
    }
    Ok(mean)
}

pub fn b_dissimilarity(grads: &[Vec<f64>], weights: &[f64]) -> Result<Dissimilarity> {
    let mean = weighted_mean(grads, weights)?;
    let total: f64 = weights.iter().sum();
    let second: f64 = grads
        .iter()
        .zip(weights)
        .map(|(g, &w)| w / total * squared_norm(g))
        .sum();
    let denom = squared_norm(&mean);
    if denom <= STATIONARY_EPS * second.max(1.0) {
        return Ok(Dissimilarity::Stationary);
    }
    Ok(Dissimilarity::Value((second / denom).sqrt()))
}

/// Running means of `‖∇I_s‖²` and `‖∇I_c‖²`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MomentAccumulator {
    sum_s: f64,
    n_s: usize,
    sum_c: f64,
    n_c: usize,
}

impl MomentAccumulator {
    pub fn push_s(&mut self, norm_sq: f64) {
        self.sum_s += norm_sq;
        self.n_s += 1;
    }

    pub fn push_c(&mut self, norm_sq: f64) {
        self.sum_c += norm_sq;
        self.n_c += 1;
    }

    pub fn merge(&mut self, other: &Self) {
        self.sum_s += other.sum_s;
        self.n_s += other.n_s;
        self.sum_c += other.sum_c;
        self.n_c += other.n_c;
    }

    /// `(ε̂_s², ε̂_c²)`; a side with no samples reports `None`.
    pub fn moments(&self) -> (Option<f64>, Option<f64>) {
        let m = |s: f64, n: usize| (n > 0).then(|| s / n as f64);
        (m(self.sum_s, self.n_s), m(self.sum_c, self.n_c))
    }
}

/// Second moments from logged per-batch squared gradient norms.
pub fn mi_grad_moments(s_norms_sq: &[f64], c_norms_sq: &[f64]) -> (Option<f64>, Option<f64>) {
    let mut acc = MomentAccumulator::default();
    s_norms_sq.iter().for_each(|&v| acc.push_s(v));
    c_norms_sq.iter().for_each(|&v| acc.push_c(v));
    acc.moments()
}

/// Per-round constants of the expected-decrease bound.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceConstants {
    pub gamma_hat: Option<f64>,
    pub b_hat: Option<Dissimilarity>,
    pub eps_s_hat: Option<f64>,
    pub eps_c_hat: Option<f64>,
    pub grad_f_norm: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub round: usize,
    pub f: f64,
    pub grad_f_norm: f64,
    pub constants: ConvergenceConstants,
}

/// Append-only per-round record of the global objective.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceSeries {
    points: Vec<SeriesPoint>,
}

impl ConvergenceSeries {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends the next round; rounds must arrive in order without gaps.
    pub fn push(&mut self, point: SeriesPoint) -> Result<()> {
        if point.round != self.points.len() {
            return invalid(format!(
                "expected round {}, got {}",
                self.points.len(),
                point.round
            ));
        }
        self.points.push(point);
        Ok(())
    }

    pub fn points(&self) -> &[SeriesPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecreaseReport {
    /// Fraction of consecutive rounds with `f(t+1) < f(t)`.
    pub decrease_fraction: f64,
    /// Least-squares slope of the running mean of `‖∇f‖` against the round.
    pub cesaro_slope: f64,
    /// Windowed means of `‖∇f‖`, one per window start.
    pub windowed_means: Vec<f64>,
    /// Windowed mean never increases.
    pub windowed_non_increasing: bool,
}

impl DecreaseReport {
    /// Whether the windowed mean is non-increasing from window `start` on.
    pub fn non_increasing_from(&self, start: usize) -> bool {
        non_increasing(self.windowed_means.get(start..).unwrap_or(&[]))
    }
}

fn non_increasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] <= w[0] + 1e-12 * w[0].abs())
}

fn slope(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    if ys.len() < 2 {
        return 0.0;
    }
    let mx = (n - 1.0) / 2.0;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, &y) in ys.iter().enumerate() {
        let dx = i as f64 - mx;
        sxy += dx * (y - my);
        sxx += dx * dx;
    }
    sxy / sxx
}

pub fn expected_decrease_check(series: &ConvergenceSeries, window: usize) -> Result<DecreaseReport> {
    let pts = series.points();
    if window == 0 || pts.len() < window {
        return invalid(format!(
            "series of length {} is shorter than window {window}",
            pts.len()
        ));
    }
    let decreases = pts.windows(2).filter(|w| w[1].f < w[0].f).count();
    let decrease_fraction = if pts.len() > 1 {
        decreases as f64 / (pts.len() - 1) as f64
    } else {
        0.0
    };
    let g: Vec<f64> = pts.iter().map(|p| p.grad_f_norm).collect();
    let mut acc = 0.0;
    let running: Vec<f64> = g
        .iter()
        .enumerate()
        .map(|(i, v)| {
            acc += v;
            acc / (i + 1) as f64
        })
        .collect();
    let windowed_means: Vec<f64> = g.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect();
    Ok(DecreaseReport {
        decrease_fraction,
        cesaro_slope: slope(&running),
        windowed_non_increasing: non_increasing(&windowed_means),
        windowed_means,
    })
}
