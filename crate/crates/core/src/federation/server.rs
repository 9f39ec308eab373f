use rand::seq::index;

use crate::error::{invalid, Error, Result};
use crate::models::{Component, ParamVector};
use crate::rng::{self, tag};

/// An invariant-partition update sent from a client to the server.
#[derive(Debug, Clone, PartialEq)]
pub struct InvariantUpdate {
    pub client: usize,
    pub omega_c: ParamVector<f64>,
    pub n_k: usize,
}

/// A full-parameter update, used only by the single-branch baselines.
#[derive(Debug, Clone, PartialEq)]
pub struct FullUpdate {
    pub client: usize,
    pub omega: ParamVector<f64>,
    pub n_k: usize,
}

/// A specific-extractor snapshot relayed for diversity transfer.
#[derive(Debug, Clone, PartialEq)]
pub struct PeerSnapshot {
    pub client: usize,
    pub encoder_s: Vec<f64>,
}

/// Server side of the two-branch protocol. It never holds a full or
/// specific parameter vector except the relayed specific extractors.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub round: usize,
    pub omega_c: ParamVector<f64>,
    pub sizes: Vec<usize>,
    /// Latest specific-extractor snapshot per client.
    pub repository: Vec<Vec<f64>>,
}

impl ServerState {
    pub fn new(omega_c: ParamVector<f64>, sizes: Vec<usize>, repository: Vec<Vec<f64>>) -> Result<Self> {
        if omega_c.component() != Component::Invariant {
            return invalid("server state holds invariant parameters only");
        }
        if sizes.len() != repository.len() {
            return invalid("one repository entry per client required");
        }
        Ok(Self {
            round: 0,
            omega_c,
            sizes,
            repository,
        })
    }

    pub fn n_clients(&self) -> usize {
        self.sizes.len()
    }
}

/// Uniform sample of `k` distinct clients for round `round`, sorted ascending.
pub fn sample_clients(n_clients: usize, k: usize, seed: u64, round: usize) -> Result<Vec<usize>> {
    if k == 0 || k > n_clients {
        return Err(Error::Config(format!(
            "cannot select {k} clients out of {n_clients}"
        )));
    }
    if k == n_clients {
        return Ok((0..n_clients).collect());
    }
    let mut r = rng::stream(seed, &[tag::SAMPLE_CLIENTS, round as u64]);
    let mut ids = index::sample(&mut r, n_clients, k).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// Picks `p` peers for every participant from the other participants and
/// returns their repository snapshots.
pub fn diversity_exchange(
    server: &ServerState,
    participants: &[usize],
    p: usize,
    seed: u64,
) -> Result<Vec<Vec<PeerSnapshot>>> {
    if p > 0 && p + 1 > participants.len() {
        return invalid(format!(
            "{p} peers requested but only {} other participants",
            participants.len().saturating_sub(1)
        ));
    }
    Ok(participants
        .iter()
        .map(|&k| {
            if p == 0 {
                return Vec::new();
            }
            let others: Vec<usize> = participants.iter().copied().filter(|&j| j != k).collect();
            let mut r = rng::stream(seed, &[tag::PEERS, server.round as u64, k as u64]);
            let mut pick = index::sample(&mut r, others.len(), p).into_vec();
            pick.sort_unstable();
            pick.into_iter()
                .map(|i| PeerSnapshot {
                    client: others[i],
                    encoder_s: server.repository[others[i]].clone(),
                })
                .collect()
        })
        .collect())
}

/// Coordinatewise weighted mean, summed in ascending client order.
fn weighted_average<'a>(
    items: impl Iterator<Item = (usize, &'a [f64], usize)>,
    uniform: bool,
) -> Result<Option<Vec<f64>>> {
    let mut items: Vec<_> = items.collect();
    if items.is_empty() {
        return Ok(None);
    }
    items.sort_by_key(|(k, _, _)| *k);
    let len = items[0].1.len();
    if items.iter().any(|(_, v, _)| v.len() != len) {
        return invalid("updates differ in length");
    }
    let total: usize = items.iter().map(|(_, _, n)| n).sum();
    if !uniform && total == 0 {
        return invalid("aggregation weights sum to zero");
    }
    let mut out = vec![0.0; len];
    for (_, v, n) in &items {
        let w = if uniform {
            1.0 / items.len() as f64
        } else {
            *n as f64 / total as f64
        };
        for (o, x) in out.iter_mut().zip(v.iter()) {
            *o += w * x;
        }
    }
    Ok(Some(out))
}

/// `ω_c^{t+1} = Σ_k (n_k / Σ n) ω_{k,c}` over the received updates. An empty
/// update set leaves `ω_c` unchanged and logs a warning.
pub fn invariant_aggregate(server: &mut ServerState, updates: &[InvariantUpdate], uniform: bool) -> Result<()> {
    for u in updates {
        if u.omega_c.component() != Component::Invariant || u.omega_c.len() != server.omega_c.len() {
            return Err(Error::Length {
                what: "invariant update",
                expected: server.omega_c.len(),
                got: u.omega_c.len(),
            });
        }
    }
    let avg = weighted_average(
        updates.iter().map(|u| (u.client, u.omega_c.as_slice(), u.n_k)),
        uniform,
    )?;
    match avg {
        Some(v) => server.omega_c = ParamVector::new(v, Component::Invariant),
        None => log::warn!("round {}: no invariant updates, keeping previous aggregate", server.round),
    }
    Ok(())
}

/// FedAvg aggregation of full parameter vectors.
pub fn full_aggregate(current: &ParamVector<f64>, updates: &[FullUpdate], uniform: bool) -> Result<ParamVector<f64>> {
    for u in updates {
        if u.omega.len() != current.len() {
            return Err(Error::Length {
                what: "full update",
                expected: current.len(),
                got: u.omega.len(),
            });
        }
    }
    let avg = weighted_average(updates.iter().map(|u| (u.client, u.omega.as_slice(), u.n_k)), uniform)?;
    Ok(match avg {
        Some(v) => ParamVector::new(v, Component::Full),
        None => current.clone(),
    })
}
