use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Dfl,
    #[serde(rename = "fedavg")]
    FedAvg,
    #[serde(rename = "fedprox")]
    FedProx,
    DflNoDiversity,
    DflNoInvariantAgg,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] = [
        Self::Dfl,
        Self::FedAvg,
        Self::FedProx,
        Self::DflNoDiversity,
        Self::DflNoInvariantAgg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Dfl => "dfl",
            Self::FedAvg => "fedavg",
            Self::FedProx => "fedprox",
            Self::DflNoDiversity => "dfl-no-diversity",
            Self::DflNoInvariantAgg => "dfl-no-invariant-agg",
        }
    }

    /// Runs the two-branch protocol rather than a single-branch baseline.
    pub fn is_two_branch(self) -> bool {
        matches!(self, Self::Dfl | Self::DflNoDiversity | Self::DflNoInvariantAgg)
    }

    pub fn aggregates_invariant(self) -> bool {
        matches!(self, Self::Dfl | Self::DflNoDiversity)
    }

    pub fn transfers_diversity(self) -> bool {
        matches!(self, Self::Dfl | Self::DflNoInvariantAgg)
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown algorithm `{s}`")))
    }
}

/// Protocol and optimisation settings for one federated run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationConfig {
    pub algorithm: Algorithm,
    /// Communication rounds `T`.
    pub rounds: usize,
    /// Clients sampled per round `K`; `None` selects every client.
    pub clients_per_round: Option<usize>,
    /// Local epochs `E` per stage.
    pub local_epochs: usize,
    pub batch_size: usize,
    /// Invariant learning rate `η_c`; also the baselines' learning rate.
    pub lr_c: f64,
    /// Specific learning rate `η_s`.
    pub lr_s: f64,
    /// Ascent rate of the statistics networks.
    pub stats_lr: f64,
    pub mu_prox: f64,
    /// Diversity weight `λ`.
    pub lambda: f64,
    /// Peers relayed per client; `None` relays every other participant.
    pub diversity_peers: Option<usize>,
    /// Weight of the disentanglement term `I_s`.
    pub w_s: f64,
    /// Weight of the alignment term `I_c`.
    pub w_c: f64,
    /// Average invariant parameters with `1/K` instead of `n_k / Σ n_k`.
    pub uniform_agg: bool,
    /// Also train the predictor during the invariant stage.
    pub predictor_both_stages: bool,
    /// Compute the convergence diagnostics.
    pub diagnostics: bool,
    /// Every this many rounds, `‖∇f‖` is recomputed over all clients.
    pub full_eval_every: usize,
    /// Record measured wall time per round (makes CSVs run-dependent).
    pub record_wall_time: bool,
    pub seed: u64,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Dfl,
            rounds: 100,
            clients_per_round: None,
            local_epochs: 2,
            batch_size: 32,
            lr_c: 0.05,
            lr_s: 0.1,
            stats_lr: 0.05,
            mu_prox: 0.01,
            lambda: 1.0,
            diversity_peers: None,
            w_s: 1.0,
            w_c: 1.0,
            uniform_agg: false,
            predictor_both_stages: false,
            diagnostics: true,
            full_eval_every: 10,
            record_wall_time: false,
            seed: 0,
        }
    }
}

impl FederationConfig {
    /// `K` for a federation of `n_clients`.
    pub fn participants(&self, n_clients: usize) -> usize {
        self.clients_per_round.unwrap_or(n_clients)
    }

    /// Effective diversity weight after the algorithm's ablations.
    pub fn effective_lambda(&self) -> f64 {
        if self.algorithm.transfers_diversity() {
            self.lambda
        } else {
            0.0
        }
    }

    /// Peers relayed to each participant.
    pub fn peer_count(&self, n_clients: usize) -> usize {
        if self.effective_lambda() == 0.0 {
            return 0;
        }
        self.diversity_peers
            .unwrap_or_else(|| self.participants(n_clients).saturating_sub(1))
    }

    pub fn validate(&self, n_clients: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.rounds == 0 {
            return bad("rounds must be >= 1".into());
        }
        let k = self.participants(n_clients);
        if k == 0 || k > n_clients {
            return bad(format!("clients_per_round must lie in 1..={n_clients}, got {k}"));
        }
        if self.local_epochs == 0 {
            return bad("local_epochs must be >= 1".into());
        }
        if self.batch_size < 2 {
            return bad("batch_size must be >= 2".into());
        }
        for (name, v) in [
            ("lr_c", self.lr_c),
            ("lr_s", self.lr_s),
            ("stats_lr", self.stats_lr),
            ("mu_prox", self.mu_prox),
            ("lambda", self.lambda),
            ("w_s", self.w_s),
            ("w_c", self.w_c),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be >= 0"));
            }
        }
        if let Some(p) = self.diversity_peers {
            if self.effective_lambda() > 0.0 && p > k - 1 {
                return bad(format!("diversity_peers {p} exceeds participants - 1 = {}", k - 1));
            }
        }
        if self.full_eval_every == 0 {
            return bad("full_eval_every must be >= 1".into());
        }
        Ok(())
    }
}
