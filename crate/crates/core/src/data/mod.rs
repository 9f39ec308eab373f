//! Synthetic attribute-skew federations.
//!
//! Each sample is a noisy binary class template (the causal pattern) followed
//! by a small block of attribute ("color") channels. Within a client the color
//! can be tied to the label; across clients the tie differs, so it is
//! decision-correlated locally but carries no transferable signal.

mod csv_io;
mod label_skew;
mod split;
mod synth;

pub use csv_io::{read_csv, write_csv};
pub use label_skew::{apply_label_skew, dirichlet_class_counts};
pub use split::train_test_split;
pub use synth::{class_templates, color_channel, generate_client_pools, generate_federation_data};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SkewMode {
    /// Every client draws colors from the same uniform distribution.
    None,
    /// Color channels encode a client-specific function of the label.
    Background,
    /// As `Background`, but the color is modulated by the sample's foreground mass.
    Foreground,
}

/// Generator configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTaskSpec {
    pub n_classes: usize,
    /// Side of the square class template; pattern dim is `grid * grid`.
    pub grid: usize,
    /// Number of color channels.
    pub attr_dim: usize,
    pub n_clients: usize,
    pub samples_per_client: usize,
    pub skew: SkewMode,
    /// Probability that a sample's color is the client's label-tied color.
    pub rho: f64,
    /// Dirichlet concentration for label skew; `None` keeps classes balanced.
    pub label_skew_alpha: Option<f64>,
    /// Std-dev of the Gaussian pixel noise.
    pub noise: f64,
    /// Intensity of the active color channel.
    pub attr_scale: f64,
    /// Spread of per-client multiplicative pattern scale (0 disables).
    pub scale_skew: f64,
    pub test_ratio: f64,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            n_classes: 4,
            grid: 6,
            attr_dim: 6,
            n_clients: 8,
            samples_per_client: 200,
            skew: SkewMode::Background,
            rho: 1.0,
            label_skew_alpha: None,
            noise: 1.5,
            attr_scale: 3.0,
            scale_skew: 0.0,
            test_ratio: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn pattern_dim(&self) -> usize {
        self.grid * self.grid
    }

    pub fn input_dim(&self) -> usize {
        self.pattern_dim() + self.attr_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return invalid("n_classes must be >= 2");
        }
        if self.n_clients < 2 {
            return invalid("n_clients must be >= 2");
        }
        if self.samples_per_client < 2 * self.n_classes {
            return invalid("samples_per_client must be >= 2 * n_classes");
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return invalid("rho must lie in [0, 1]");
        }
        if self.noise.is_nan() || self.noise < 0.0 {
            return invalid("noise must be >= 0");
        }
        if self.attr_dim == 0 {
            return invalid("attr_dim must be >= 1");
        }
        if self.skew != SkewMode::None && self.attr_dim < self.n_classes {
            return invalid("label-tied colors need attr_dim >= n_classes");
        }
        if let Some(a) = self.label_skew_alpha {
            if a.is_nan() || a <= 0.0 {
                return invalid("label_skew_alpha must be > 0");
            }
        }
        if !(self.test_ratio > 0.0 && self.test_ratio < 1.0) {
            return invalid("test_ratio must lie in (0, 1)");
        }
        Ok(())
    }
}

/// Row-major feature matrix with labels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Samples {
    pub dim: usize,
    pub x: Vec<f64>,
    pub y: Vec<usize>,
}

impl Samples {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            x: Vec::new(),
            y: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn push(&mut self, features: &[f64], label: usize) {
        debug_assert_eq!(features.len(), self.dim);
        self.x.extend_from_slice(features);
        self.y.push(label);
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        let mut out = Self::new(self.dim);
        for &i in idx {
            out.push(self.row(i), self.y[i]);
        }
        out
    }

    /// Feature tensor and labels for the given rows.
    pub fn batch(&self, idx: &[usize]) -> (Tensor<f64>, Vec<usize>) {
        let mut x = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            x.extend_from_slice(self.row(i));
        }
        let y = idx.iter().map(|&i| self.y[i]).collect();
        (Tensor::matrix(idx.len(), self.dim, x).expect("layout"), y)
    }

    pub fn all(&self) -> (Tensor<f64>, Vec<usize>) {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }

    pub fn class_counts(&self, n_classes: usize) -> Vec<usize> {
        let mut c = vec![0; n_classes];
        for &y in &self.y {
            c[y] += 1;
        }
        c
    }
}

/// One client's local data `D_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub client: usize,
    pub train: Samples,
    pub test: Samples,
}

impl ClientDataset {
    /// `n_k`, the number of local training samples.
    pub fn n_k(&self) -> usize {
        self.train.len()
    }
}
