use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::client::{
    evaluate_single, evaluate_two_branch, invariant_gradients, local_stage1_specific, local_stage2_invariant,
    local_train_single, single_gradient, RoundInputs, Stage, StageReport,
};
use super::config::{Algorithm, FederationConfig};
use super::server::{
    diversity_exchange, full_aggregate, invariant_aggregate, sample_clients, FullUpdate, InvariantUpdate,
    PeerSnapshot, ServerState,
};
use crate::data::ClientDataset;
use crate::diagnostics::{b_dissimilarity, gamma_from_grads, weighted_mean, ConvergenceSeries, Dissimilarity,
    MomentAccumulator, SeriesPoint, ConvergenceConstants};
use crate::error::{Error, Result};
use crate::mi::marginal_permutation;
use crate::models::{ModelSpec, Segment, SingleBranchArch, SingleBranchModel, TwoBranchArch, TwoBranchModel};
use crate::rng::{self, tag};
use crate::scalar::l2_norm;

/// Callbacks for auditing a run from the outside. Called on the driving
/// thread in ascending client order after each round's barrier.
pub trait RoundObserver {
    /// Full parameter vectors of a participant around one local stage.
    fn stage_finished(&mut self, _round: usize, _client: usize, _stage: Stage, _before: &[f64], _after: &[f64]) {}

    /// Updates about to be averaged by the server.
    fn aggregating(&mut self, _round: usize, _updates: &[InvariantUpdate]) {}
}

/// Observer that does nothing.
pub struct NoObserver;

impl RoundObserver for NoObserver {}

/// How participants are scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Execution {
    /// Worker threads; `None` uses rayon's default.
    pub threads: Option<usize>,
    /// Run clients strictly one after another on the calling thread.
    pub single_thread: bool,
}

/// Everything logged about one communication round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    /// 1-based: the record after `round` communication rounds.
    pub round: usize,
    pub algorithm: Algorithm,
    pub global_loss: f64,
    pub mean_test_acc: f64,
    pub per_client_acc: Vec<f64>,
    pub grad_norm_f: Option<f64>,
    pub gamma_hat: Option<f64>,
    pub b_hat: Option<Dissimilarity>,
    pub i_s_mean: Option<f64>,
    pub i_c_mean: Option<f64>,
    pub wall_ms: u64,
    pub grad_h_hat: Option<f64>,
    pub eps_s_hat: Option<f64>,
    pub eps_c_hat: Option<f64>,
    pub participants: Vec<usize>,
    pub dropped: Vec<usize>,
}

#[derive(Debug, Clone)]
enum Arm {
    TwoBranch {
        server: ServerState,
        clients: Vec<TwoBranchModel<f64>>,
    },
    Single {
        global: SingleBranchModel<f64>,
    },
}

struct Diag {
    grad_f: Vec<f64>,
    gamma: f64,
    grad_h: f64,
}

struct TwoBranchWork {
    client: usize,
    start: Vec<f64>,
    after_stage1: Vec<f64>,
    model: TwoBranchModel<f64>,
    stage1: StageReport,
    stage2: StageReport,
    moments: MomentAccumulator,
    diag: Option<Diag>,
}

struct SingleWork {
    client: usize,
    model: SingleBranchModel<f64>,
    diag: Option<Diag>,
}

/// A federation of clients plus the server, advanced one round at a time.
#[derive(Debug)]
pub struct Federation {
    cfg: FederationConfig,
    data: Vec<ClientDataset>,
    arm: Arm,
    round: usize,
    exec: Execution,
    pool: Option<Arc<rayon::ThreadPool>>,
    series: ConvergenceSeries,
}

fn parallel_map<T, R, F>(pool: Option<&rayon::ThreadPool>, single: bool, items: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync + Send,
{
    if single {
        return items.into_iter().map(f).collect();
    }
    match pool {
        Some(p) => p.install(|| items.into_par_iter().map(&f).collect()),
        None => items.into_par_iter().map(f).collect(),
    }
}

impl Federation {
    pub fn new(cfg: FederationConfig, model: ModelSpec, data: Vec<ClientDataset>, exec: Execution) -> Result<Self> {
        let n = data.len();
        cfg.validate(n)?;
        if n == 0 {
            return Err(Error::Config("federation needs at least one client".into()));
        }
        for (k, d) in data.iter().enumerate() {
            if d.client != k {
                return Err(Error::Config(format!("client ids must be 0..{n} in order")));
            }
            if d.train.dim != model.input_dim || d.test.dim != model.input_dim {
                return Err(Error::Config(format!(
                    "client {k}: feature dim {} does not match model input_dim {}",
                    d.train.dim, model.input_dim
                )));
            }
            if d.train.y.iter().chain(&d.test.y).any(|&y| y >= model.n_classes) {
                return Err(Error::Config(format!("client {k}: label exceeds n_classes")));
            }
            if d.train.len() < 2 || d.test.is_empty() {
                return Err(Error::Config(format!("client {k}: needs >= 2 train and >= 1 test samples")));
            }
        }
        let arm = if cfg.algorithm.is_two_branch() {
            let arch = TwoBranchArch::new(model)?;
            let clients: Vec<TwoBranchModel<f64>> = (0..n)
                .map(|k| TwoBranchModel::init(arch.clone(), rng::derive(cfg.seed, &[tag::INIT, k as u64 + 1])))
                .collect();
            let origin = TwoBranchModel::<f64>::init(arch, rng::derive(cfg.seed, &[tag::INIT, 0]));
            let repository = clients.iter().map(|m| m.segment(Segment::EncoderS).to_vec()).collect();
            let sizes = data.iter().map(ClientDataset::n_k).collect();
            Arm::TwoBranch {
                server: ServerState::new(origin.invariant(), sizes, repository)?,
                clients,
            }
        } else {
            let arch = SingleBranchArch::new(model)?;
            Arm::Single {
                global: SingleBranchModel::init(arch, rng::derive(cfg.seed, &[tag::INIT, 0])),
            }
        };
        let pool = match (exec.single_thread, exec.threads) {
            (false, Some(t)) => Some(Arc::new(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(t.max(1))
                    .build()
                    .map_err(|e| Error::Invalid(e.to_string()))?,
            )),
            _ => None,
        };
        Ok(Self {
            cfg,
            data,
            arm,
            round: 0,
            exec,
            pool,
            series: ConvergenceSeries::new(),
        })
    }

    pub fn config(&self) -> &FederationConfig {
        &self.cfg
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn is_finished(&self) -> bool {
        self.round >= self.cfg.rounds
    }

    pub fn data(&self) -> &[ClientDataset] {
        &self.data
    }

    pub fn series(&self) -> &ConvergenceSeries {
        &self.series
    }

    pub fn server(&self) -> Option<&ServerState> {
        match &self.arm {
            Arm::TwoBranch { server, .. } => Some(server),
            Arm::Single { .. } => None,
        }
    }

    pub fn client_model(&self, k: usize) -> Option<&TwoBranchModel<f64>> {
        match &self.arm {
            Arm::TwoBranch { clients, .. } => clients.get(k),
            Arm::Single { .. } => None,
        }
    }

    pub fn global_model(&self) -> Option<&SingleBranchModel<f64>> {
        match &self.arm {
            Arm::Single { global } => Some(global),
            Arm::TwoBranch { .. } => None,
        }
    }

    /// The model client `k` is evaluated with: the aggregated invariant
    /// extractor combined with its own specific branch.
    pub fn evaluation_model(&self, k: usize) -> Result<TwoBranchModel<f64>> {
        let Arm::TwoBranch { server, clients } = &self.arm else {
            return Err(Error::Invalid("single-branch run has no per-client model".into()));
        };
        let mut m = clients[k].clone();
        if self.cfg.algorithm.aggregates_invariant() {
            m.set_invariant(&server.omega_c)?;
        }
        Ok(m)
    }

    pub fn run(&mut self, observer: &mut dyn RoundObserver) -> Result<Vec<RoundRecord>> {
        let mut out = Vec::with_capacity(self.cfg.rounds);
        while !self.is_finished() {
            out.push(self.run_round(observer)?);
        }
        Ok(out)
    }

    /// Runs one round. On failure of every participant the state is left as
    /// it was at the start of the round and the error is returned.
    pub fn run_round(&mut self, observer: &mut dyn RoundObserver) -> Result<RoundRecord> {
        if self.is_finished() {
            return Err(Error::Invalid(format!("all {} rounds already run", self.cfg.rounds)));
        }
        let started = Instant::now();
        let t = self.round;
        let n = self.data.len();
        let participants = sample_clients(n, self.cfg.participants(n), self.cfg.seed, t)?;
        let full_eval = self.cfg.diagnostics && t.is_multiple_of(self.cfg.full_eval_every);
        let mut rec = match self.arm {
            Arm::TwoBranch { .. } => self.two_branch_round(t, &participants, full_eval, observer)?,
            Arm::Single { .. } => self.single_round(t, &participants, full_eval)?,
        };
        if self.cfg.record_wall_time {
            rec.wall_ms = started.elapsed().as_millis() as u64;
        }
        self.series.push(SeriesPoint {
            round: t,
            f: rec.global_loss,
            grad_f_norm: rec.grad_norm_f.unwrap_or(f64::NAN),
            constants: ConvergenceConstants {
                gamma_hat: rec.gamma_hat,
                b_hat: rec.b_hat,
                eps_s_hat: rec.eps_s_hat.map(f64::sqrt),
                eps_c_hat: rec.eps_c_hat.map(f64::sqrt),
                grad_f_norm: rec.grad_norm_f,
            },
        })?;
        self.round += 1;
        Ok(rec)
    }

    fn two_branch_round(
        &mut self,
        t: usize,
        participants: &[usize],
        full_eval: bool,
        observer: &mut dyn RoundObserver,
    ) -> Result<RoundRecord> {
        let cfg = self.cfg.clone();
        let aggregates = cfg.algorithm.aggregates_invariant();
        let lambda = cfg.effective_lambda();
        let Arm::TwoBranch { server, clients } = &mut self.arm else {
            unreachable!()
        };
        let global_c: Option<Vec<f64>> = aggregates.then(|| server.omega_c.as_slice().to_vec());
        let peers = diversity_exchange(server, participants, cfg.peer_count(self.data.len()), cfg.seed)?;

        let jobs: Vec<(usize, TwoBranchModel<f64>, Vec<PeerSnapshot>)> = participants
            .iter()
            .zip(peers)
            .map(|(&k, p)| {
                let mut m = clients[k].clone();
                if aggregates {
                    m.set_invariant(&server.omega_c).expect("server vector has invariant length");
                }
                (k, m, p)
            })
            .collect();
        let data = &self.data;
        let global_ref = global_c.as_deref();
        let results = parallel_map(self.pool.as_deref(), self.exec.single_thread, jobs, |(k, mut model, peers)| {
            let inputs = RoundInputs {
                cfg: &cfg,
                peers: &peers,
                global_c: global_ref,
            };
            let train = &data[k].train;
            let mut batches = rng::stream(cfg.seed, &[tag::BATCHES, t as u64, k as u64]);
            let mut marginals = rng::stream(cfg.seed, &[tag::MARGINALS, t as u64, k as u64]);
            let mut moments = MomentAccumulator::default();
            let track = cfg.diagnostics.then_some(&mut moments);
            let start = model.params().to_vec();
            let stage1 = local_stage1_specific(&mut model, train, inputs, k, t, &mut batches, &mut marginals, track)?;
            let after_stage1 = model.params().to_vec();

            let peer_refs: Vec<&[f64]> = peers.iter().map(|p| p.encoder_s.as_slice()).collect();
            let diag_perm = cfg.diagnostics.then(|| {
                marginal_permutation(train.len(), &mut rng::stream(cfg.seed, &[tag::DIAGNOSTICS, t as u64, k as u64]))
            });
            let before = match &diag_perm {
                Some(perm) => Some(invariant_gradients(&model, train, &peer_refs, lambda, global_ref, cfg.w_c, perm)?),
                None => None,
            };
            let track = cfg.diagnostics.then_some(&mut moments);
            let stage2 = local_stage2_invariant(&mut model, train, inputs, k, t, &mut batches, &mut marginals, track)?;
            let diag = match (before, &diag_perm) {
                (Some((grad_f, h_start)), Some(perm)) => {
                    let (_, h_end) = invariant_gradients(&model, train, &peer_refs, lambda, global_ref, cfg.w_c, perm)?;
                    Some(Diag {
                        grad_f,
                        gamma: gamma_from_grads(&h_end, &h_start).gamma,
                        grad_h: l2_norm(&h_end),
                    })
                }
                _ => None,
            };
            Ok(TwoBranchWork {
                client: k,
                start,
                after_stage1,
                model,
                stage1,
                stage2,
                moments,
                diag,
            })
        });

        let mut done = Vec::new();
        let mut dropped = Vec::new();
        let mut first_err = None;
        for (res, &k) in results.into_iter().zip(participants) {
            match res {
                Ok(w) => done.push(w),
                Err(e) => {
                    log::warn!("round {t}: client {k} dropped ({e}); consider lowering lr_c / lr_s / stats_lr");
                    dropped.push(k);
                    first_err.get_or_insert(e);
                }
            }
        }
        if done.is_empty() {
            return Err(first_err.unwrap_or(Error::NonFinite { client: 0, round: t }));
        }

        for w in &done {
            observer.stage_finished(t, w.client, Stage::Specific, &w.start, &w.after_stage1);
            observer.stage_finished(t, w.client, Stage::Invariant, &w.after_stage1, w.model.params());
        }
        let updates: Vec<InvariantUpdate> = done
            .iter()
            .map(|w| InvariantUpdate {
                client: w.client,
                omega_c: w.model.invariant(),
                n_k: server.sizes[w.client],
            })
            .collect();
        let omega_start = global_c.clone();
        if aggregates {
            observer.aggregating(t, &updates);
            invariant_aggregate(server, &updates, cfg.uniform_agg)?;
        }
        server.round = t + 1;
        let mut moments = MomentAccumulator::default();
        for w in &done {
            server.repository[w.client] = w.model.segment(Segment::EncoderS).to_vec();
            moments.merge(&w.moments);
        }

        let mut grads: Vec<(usize, Vec<f64>)> = Vec::new();
        let (mut gamma_sum, mut grad_h_sum, mut n_diag) = (0.0, 0.0, 0usize);
        let (mut is_sum, mut ic_sum, mut n_ic) = (0.0, 0.0, 0usize);
        for w in &done {
            if let Some(d) = &w.diag {
                grads.push((w.client, d.grad_f.clone()));
                gamma_sum += d.gamma;
                grad_h_sum += d.grad_h;
                n_diag += 1;
            }
            is_sum += w.stage1.mi_mean.unwrap_or(0.0);
            if let Some(ic) = w.stage2.mi_mean {
                ic_sum += ic;
                n_ic += 1;
            }
        }
        for w in done {
            clients[w.client] = w.model;
        }

        if full_eval {
            let rest: Vec<usize> = (0..self.data.len()).filter(|k| !participants.contains(k)).collect();
            let jobs: Vec<(usize, TwoBranchModel<f64>)> = rest
                .into_iter()
                .map(|k| {
                    let mut m = clients[k].clone();
                    if let Some(g) = &omega_start {
                        m.segment_mut(Segment::EncoderC).copy_from_slice(g);
                    }
                    (k, m)
                })
                .collect();
            let extra = parallel_map(self.pool.as_deref(), self.exec.single_thread, jobs, |(k, m)| {
                invariant_gradients(&m, &data[k].train, &[], 0.0, None, 0.0, &[]).map(|(g, _)| (k, g))
            });
            for e in extra {
                grads.push(e?);
            }
            grads.sort_by_key(|(k, _)| *k);
        }

        let eval_models: Vec<(usize, TwoBranchModel<f64>)> = (0..self.data.len())
            .map(|k| {
                let mut m = clients[k].clone();
                if aggregates {
                    m.set_invariant(&server.omega_c).expect("server vector has invariant length");
                }
                (k, m)
            })
            .collect();
        let evals = parallel_map(self.pool.as_deref(), self.exec.single_thread, eval_models, |(k, m)| {
            let (train_loss, _) = evaluate_two_branch(&m, &data[k].train)?;
            let (_, acc) = evaluate_two_branch(&m, &data[k].test)?;
            Ok::<_, Error>((train_loss, acc))
        });
        let (eps_s, eps_c) = moments.moments();
        let mut rec = self.finish_record(t, participants, dropped, evals, &grads)?;
        rec.gamma_hat = (n_diag > 0).then(|| gamma_sum / n_diag as f64);
        rec.grad_h_hat = (n_diag > 0).then(|| grad_h_sum / n_diag as f64);
        let n_done = rec.participants.len() - rec.dropped.len();
        rec.i_s_mean = Some(is_sum / n_done as f64);
        rec.i_c_mean = (n_ic > 0).then(|| ic_sum / n_ic as f64);
        rec.eps_s_hat = eps_s;
        rec.eps_c_hat = eps_c;
        Ok(rec)
    }

    fn single_round(&mut self, t: usize, participants: &[usize], full_eval: bool) -> Result<RoundRecord> {
        let cfg = self.cfg.clone();
        let mu = if cfg.algorithm == Algorithm::FedProx { cfg.mu_prox } else { 0.0 };
        let Arm::Single { global } = &mut self.arm else {
            unreachable!()
        };
        let anchor = global.params().to_vec();
        let data = &self.data;
        let start_model = global.clone();
        let jobs: Vec<usize> = participants.to_vec();
        let results = parallel_map(self.pool.as_deref(), self.exec.single_thread, jobs, |k| {
            let train = &data[k].train;
            let mut model = start_model.clone();
            let mut batches = rng::stream(cfg.seed, &[tag::BATCHES, t as u64, k as u64]);
            let g_start = cfg
                .diagnostics
                .then(|| single_gradient(&model, train, &anchor, mu))
                .transpose()?;
            local_train_single(&mut model, train, &cfg, mu, k, t, &mut batches)?;
            let diag = match g_start {
                Some(g0) => {
                    let g1 = single_gradient(&model, train, &anchor, mu)?;
                    Some(Diag {
                        gamma: gamma_from_grads(&g1, &g0).gamma,
                        grad_h: l2_norm(&g1),
                        grad_f: g0,
                    })
                }
                None => None,
            };
            Ok::<_, Error>(SingleWork { client: k, model, diag })
        });

        let mut done = Vec::new();
        let mut dropped = Vec::new();
        let mut first_err = None;
        for (res, &k) in results.into_iter().zip(participants) {
            match res {
                Ok(w) => done.push(w),
                Err(e) => {
                    log::warn!("round {t}: client {k} dropped ({e}); consider lowering lr_c");
                    dropped.push(k);
                    first_err.get_or_insert(e);
                }
            }
        }
        if done.is_empty() {
            return Err(first_err.unwrap_or(Error::NonFinite { client: 0, round: t }));
        }
        let updates: Vec<FullUpdate> = done
            .iter()
            .map(|w| FullUpdate {
                client: w.client,
                omega: w.model.flatten(),
                n_k: data[w.client].n_k(),
            })
            .collect();
        let mut grads: Vec<(usize, Vec<f64>)> = Vec::new();
        let (mut gamma_sum, mut grad_h_sum, mut n_diag) = (0.0, 0.0, 0usize);
        for w in &done {
            if let Some(d) = &w.diag {
                grads.push((w.client, d.grad_f.clone()));
                gamma_sum += d.gamma;
                grad_h_sum += d.grad_h;
                n_diag += 1;
            }
        }
        if full_eval {
            let rest: Vec<usize> = (0..data.len()).filter(|k| !participants.contains(k)).collect();
            let extra = parallel_map(self.pool.as_deref(), self.exec.single_thread, rest, |k| {
                single_gradient(&start_model, &data[k].train, &anchor, 0.0).map(|g| (k, g))
            });
            for e in extra {
                grads.push(e?);
            }
            grads.sort_by_key(|(k, _)| *k);
        }
        let next = full_aggregate(&global.flatten(), &updates, cfg.uniform_agg)?;
        global.set_params(&next)?;
        let g = global.clone();
        let evals = parallel_map(self.pool.as_deref(), self.exec.single_thread, (0..data.len()).collect(), |k| {
            let (train_loss, _) = evaluate_single(&g, &data[k].train)?;
            let (_, acc) = evaluate_single(&g, &data[k].test)?;
            Ok::<_, Error>((train_loss, acc))
        });
        let mut rec = self.finish_record(t, participants, dropped, evals, &grads)?;
        rec.gamma_hat = (n_diag > 0).then(|| gamma_sum / n_diag as f64);
        rec.grad_h_hat = (n_diag > 0).then(|| grad_h_sum / n_diag as f64);
        Ok(rec)
    }

    fn finish_record(
        &self,
        t: usize,
        participants: &[usize],
        dropped: Vec<usize>,
        evals: Vec<Result<(f64, f64)>>,
        grads: &[(usize, Vec<f64>)],
    ) -> Result<RoundRecord> {
        let mut per_client_acc = Vec::with_capacity(evals.len());
        let (mut loss, mut total) = (0.0, 0usize);
        for (k, e) in evals.into_iter().enumerate() {
            let (l, a) = e?;
            let n_k = self.data[k].n_k();
            loss += l * n_k as f64;
            total += n_k;
            per_client_acc.push(a);
        }
        let (grad_norm_f, b_hat) = if grads.is_empty() {
            (None, None)
        } else {
            let g: Vec<Vec<f64>> = grads.iter().map(|(_, g)| g.clone()).collect();
            let w: Vec<f64> = grads.iter().map(|(k, _)| self.data[*k].n_k() as f64).collect();
            (Some(l2_norm(&weighted_mean(&g, &w)?)), Some(b_dissimilarity(&g, &w)?))
        };
        Ok(RoundRecord {
            round: t + 1,
            algorithm: self.cfg.algorithm,
            global_loss: loss / total as f64,
            mean_test_acc: per_client_acc.iter().sum::<f64>() / per_client_acc.len() as f64,
            per_client_acc,
            grad_norm_f,
            gamma_hat: None,
            b_hat,
            i_s_mean: None,
            i_c_mean: None,
            wall_ms: 0,
            grad_h_hat: None,
            eps_s_hat: None,
            eps_c_hat: None,
            participants: participants.to_vec(),
            dropped,
        })
    }
}
