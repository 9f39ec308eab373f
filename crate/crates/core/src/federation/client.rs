use rand::seq::SliceRandom;

use super::config::FederationConfig;
use super::server::PeerSnapshot;
use crate::autodiff::{Tape, Tensor, Var};
use crate::data::Samples;
use crate::diagnostics::MomentAccumulator;
use crate::error::{Error, Result};
use crate::mi::{jsd_bound, marginal_permutation};
use crate::models::{BoundMlp, BoundTwoBranch, Segment, SingleBranchModel, Trainable, TwoBranchArch, TwoBranchModel};
use crate::rng::Rng;
use crate::scalar::squared_norm;

/// Which half of the alternating local optimisation is running.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Specific branch trained, invariant branch frozen.
    Specific,
    /// Invariant branch trained, specific branch frozen.
    Invariant,
}

/// Per-round inputs a participant receives from the server.
#[derive(Debug, Clone, Copy)]
pub struct RoundInputs<'a> {
    pub cfg: &'a FederationConfig,
    pub peers: &'a [PeerSnapshot],
    /// Frozen broadcast snapshot of the invariant extractor.
    pub global_c: Option<&'a [f64]>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageReport {
    pub loss_mean: f64,
    /// Mean MI estimate over the stage's batches (`I_s` or `I_c`).
    pub mi_mean: Option<f64>,
}

/// Shuffled mini-batches; a trailing singleton joins the previous batch so
/// every batch has the two rows the MI bound needs.
pub fn epoch_batches(n: usize, batch: usize, r: &mut Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(r);
    let mut out: Vec<Vec<usize>> = idx.chunks(batch).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        let tail = out.pop().unwrap_or_default();
        if let Some(prev) = out.last_mut() {
            prev.extend(tail);
        }
    }
    out
}

fn check_peers(arch: &TwoBranchArch, peers: &[&[f64]]) -> Result<()> {
    let expected = arch.range(Segment::EncoderS).len();
    for p in peers {
        if p.len() != expected {
            return Err(Error::Length {
                what: "peer specific extractor",
                expected,
                got: p.len(),
            });
        }
    }
    Ok(())
}

fn bind_peers(tape: &mut Tape<f64>, arch: &TwoBranchArch, peers: &[&[f64]]) -> Vec<BoundMlp> {
    peers.iter().map(|p| arch.encoder_s.bind(tape, p, false)).collect()
}

struct LossParts {
    f: Var,
    rep_c: Var,
    rep_s: Var,
}

/// `F_k = CE(P(E_c ⊕ E_s)) + λ/p Σ_j CE(P(E_c ⊕ E_s^j))` on the tape.
fn f_on_tape(
    tape: &mut Tape<f64>,
    bound: &BoundTwoBranch,
    peers: &[BoundMlp],
    x: Var,
    y: &[usize],
    lambda: f64,
) -> Result<LossParts> {
    let (rep_c, rep_s, logits) = bound.forward(tape, x)?;
    let ce = tape.cross_entropy(logits, y)?;
    if lambda == 0.0 || peers.is_empty() {
        return Ok(LossParts { f: ce, rep_c, rep_s });
    }
    let mut acc: Option<Var> = None;
    for peer in peers {
        let rs = peer.forward(tape, x)?;
        let logits = bound.predict(tape, rep_c, rs)?;
        let ce_j = tape.cross_entropy(logits, y)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, ce_j)?,
            None => ce_j,
        });
    }
    let aug = tape.scale(acc.expect("peers non-empty"), lambda / peers.len() as f64);
    let f = tape.add(ce, aug)?;
    Ok(LossParts { f, rep_c, rep_s })
}

/// Value of `F_k` on a batch. `peers` are specific-extractor parameter
/// vectors; an empty slice drops the augmentation term.
pub fn client_loss(
    model: &TwoBranchModel<f64>,
    x: &Tensor<f64>,
    y: &[usize],
    peers: &[&[f64]],
    lambda: f64,
) -> Result<Tensor<f64>> {
    let arch = model.arch();
    check_peers(arch, peers)?;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, Trainable::none());
    let pb = bind_peers(&mut tape, arch, peers);
    let xv = tape.constant(x.clone());
    let parts = f_on_tape(&mut tape, &bound, &pb, xv, y, lambda)?;
    Ok(tape.value(parts.f).clone())
}

fn finite(v: f64, client: usize, round: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { client, round })
    }
}

fn peer_slices(peers: &[PeerSnapshot]) -> Vec<&[f64]> {
    peers.iter().map(|p| p.encoder_s.as_slice()).collect()
}

fn mean(sum: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Stage 1: descend `F_k + w_s I_s` on the specific extractor and predictor
/// with the invariant extractor frozen; one ascent step on each statistics
/// net per batch. `T_c` learns on `(E_c(x), E_c^G(x))` here because the
/// invariant stage must leave every specific coordinate untouched.
#[allow(clippy::too_many_arguments)]
pub fn local_stage1_specific(
    model: &mut TwoBranchModel<f64>,
    data: &Samples,
    inputs: RoundInputs<'_>,
    client: usize,
    round: usize,
    batches: &mut Rng,
    marginals: &mut Rng,
    mut moments: Option<&mut MomentAccumulator>,
) -> Result<StageReport> {
    let cfg = inputs.cfg;
    let arch = model.arch().clone();
    let peers = peer_slices(inputs.peers);
    check_peers(&arch, &peers)?;
    let lambda = cfg.effective_lambda();
    let descend = Trainable {
        encoder_s: true,
        predictor: true,
        ..Trainable::none()
    };
    let bind_as = Trainable {
        encoder_s: true,
        predictor: true,
        stats_s: true,
        stats_c: inputs.global_c.is_some(),
        encoder_c: false,
    };
    let (mut loss_sum, mut mi_sum, mut steps) = (0.0, 0.0, 0usize);
    for _ in 0..cfg.local_epochs {
        for idx in epoch_batches(data.len(), cfg.batch_size, batches) {
            let (x, y) = data.batch(&idx);
            let rows = idx.len();
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, bind_as);
            let pb = bind_peers(&mut tape, &arch, &peers);
            let xv = tape.constant(x);
            let parts = f_on_tape(&mut tape, &bound, &pb, xv, &y, lambda)?;
            let perm_s = marginal_permutation(rows, marginals);
            let i_s = jsd_bound(&mut tape, &bound.stats_s, parts.rep_s, parts.rep_c, &perm_s)?;
            let loss = if cfg.w_s > 0.0 {
                let w = tape.scale(i_s, cfg.w_s);
                tape.add(parts.f, w)?
            } else {
                parts.f
            };
            loss_sum += finite(tape.value(loss).item(), client, round)?;
            mi_sum += tape.value(i_s).item();
            tape.backward(loss)?;
            let g_model = bound.gradient(&tape, &arch);

            tape.zero_grad();
            let aux = match inputs.global_c {
                Some(global) => {
                    let g = arch.encoder_c.bind(&mut tape, global, false);
                    let rep_g = g.forward(&mut tape, xv)?;
                    let perm_c = marginal_permutation(rows, marginals);
                    let i_c = jsd_bound(&mut tape, &bound.stats_c, parts.rep_c, rep_g, &perm_c)?;
                    tape.add(i_s, i_c)?
                }
                None => i_s,
            };
            tape.backward(aux)?;
            let g_stats = bound.gradient(&tape, &arch);
            if let Some(m) = moments.as_deref_mut() {
                m.push_s(squared_norm(&g_stats[arch.range(Segment::EncoderS)]));
            }

            model.apply_gradient(&g_model, cfg.lr_s, descend);
            model.ascend_segment(Segment::StatsS, &g_stats, cfg.stats_lr);
            if inputs.global_c.is_some() {
                model.ascend_segment(Segment::StatsC, &g_stats, cfg.stats_lr);
            }
            steps += 1;
        }
    }
    Ok(StageReport {
        loss_mean: mean(loss_sum, steps),
        mi_mean: Some(mean(mi_sum, steps)),
    })
}

/// Stage 2: descend `F_k − w_c I_c` on the invariant extractor with the
/// specific branch frozen. Without a broadcast snapshot the `I_c` term is
/// absent.
#[allow(clippy::too_many_arguments)]
pub fn local_stage2_invariant(
    model: &mut TwoBranchModel<f64>,
    data: &Samples,
    inputs: RoundInputs<'_>,
    client: usize,
    round: usize,
    batches: &mut Rng,
    marginals: &mut Rng,
    mut moments: Option<&mut MomentAccumulator>,
) -> Result<StageReport> {
    let cfg = inputs.cfg;
    let arch = model.arch().clone();
    let peers = peer_slices(inputs.peers);
    check_peers(&arch, &peers)?;
    let lambda = cfg.effective_lambda();
    let train = Trainable {
        encoder_c: true,
        predictor: cfg.predictor_both_stages,
        ..Trainable::none()
    };
    let (mut loss_sum, mut mi_sum, mut steps) = (0.0, 0.0, 0usize);
    for _ in 0..cfg.local_epochs {
        for idx in epoch_batches(data.len(), cfg.batch_size, batches) {
            let (x, y) = data.batch(&idx);
            let rows = idx.len();
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, train);
            let pb = bind_peers(&mut tape, &arch, &peers);
            let xv = tape.constant(x);
            let parts = f_on_tape(&mut tape, &bound, &pb, xv, &y, lambda)?;
            let i_c = match inputs.global_c {
                Some(global) => {
                    let g = arch.encoder_c.bind(&mut tape, global, false);
                    let rep_g = g.forward(&mut tape, xv)?;
                    let perm_c = marginal_permutation(rows, marginals);
                    Some(jsd_bound(&mut tape, &bound.stats_c, parts.rep_c, rep_g, &perm_c)?)
                }
                None => None,
            };
            let loss = match i_c {
                Some(ic) if cfg.w_c > 0.0 => {
                    let w = tape.scale(ic, cfg.w_c);
                    tape.sub(parts.f, w)?
                }
                _ => parts.f,
            };
            loss_sum += finite(tape.value(loss).item(), client, round)?;
            if let Some(ic) = i_c {
                mi_sum += tape.value(ic).item();
            }
            tape.backward(loss)?;
            let g = bound.gradient(&tape, &arch);
            if let (Some(m), Some(ic)) = (moments.as_deref_mut(), i_c) {
                tape.zero_grad();
                tape.backward(ic)?;
                let gi = bound.gradient(&tape, &arch);
                m.push_c(squared_norm(&gi[arch.range(Segment::EncoderC)]));
            }
            model.apply_gradient(&g, cfg.lr_c, train);
            steps += 1;
        }
    }
    Ok(StageReport {
        loss_mean: mean(loss_sum, steps),
        mi_mean: inputs.global_c.map(|_| mean(mi_sum, steps)),
    })
}

/// Full-batch invariant-extractor gradients `(∇_c F_k, ∇_c h_k)` where the
/// invariant-stage objective is `h_k = F_k − w_c I_c`. Uses a fixed
/// marginal permutation so repeated calls are comparable.
pub fn invariant_gradients(
    model: &TwoBranchModel<f64>,
    data: &Samples,
    peers: &[&[f64]],
    lambda: f64,
    global_c: Option<&[f64]>,
    w_c: f64,
    perm: &[usize],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let arch = model.arch().clone();
    check_peers(&arch, peers)?;
    let train = Trainable {
        encoder_c: true,
        ..Trainable::none()
    };
    let (x, y) = data.all();
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, train);
    let pb = bind_peers(&mut tape, &arch, peers);
    let xv = tape.constant(x);
    let parts = f_on_tape(&mut tape, &bound, &pb, xv, &y, lambda)?;
    tape.backward(parts.f)?;
    let g_f = bound.gradient(&tape, &arch)[arch.range(Segment::EncoderC)].to_vec();
    let Some(global) = global_c.filter(|_| w_c > 0.0) else {
        return Ok((g_f.clone(), g_f));
    };
    let g = arch.encoder_c.bind(&mut tape, global, false);
    let rep_g = g.forward(&mut tape, xv)?;
    let i_c = jsd_bound(&mut tape, &bound.stats_c, parts.rep_c, rep_g, perm)?;
    let w = tape.scale(i_c, w_c);
    let h = tape.sub(parts.f, w)?;
    tape.zero_grad();
    tape.backward(h)?;
    let g_h = bound.gradient(&tape, &arch)[arch.range(Segment::EncoderC)].to_vec();
    Ok((g_f, g_h))
}

fn accuracy(logits: &Tensor<f64>, y: &[usize]) -> f64 {
    let c = logits.cols();
    let hits = y
        .iter()
        .enumerate()
        .filter(|(i, &t)| {
            let row = &logits.data()[i * c..(i + 1) * c];
            let best = (0..c).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            best == t
        })
        .count();
    hits as f64 / y.len().max(1) as f64
}

/// Plain cross-entropy and accuracy of a two-branch model.
pub fn evaluate_two_branch(model: &TwoBranchModel<f64>, data: &Samples) -> Result<(f64, f64)> {
    let (x, y) = data.all();
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, Trainable::none());
    let xv = tape.constant(x);
    let (_, _, logits) = bound.forward(&mut tape, xv)?;
    let ce = tape.cross_entropy(logits, &y)?;
    Ok((tape.value(ce).item(), accuracy(tape.value(logits), &y)))
}

pub fn evaluate_single(model: &SingleBranchModel<f64>, data: &Samples) -> Result<(f64, f64)> {
    let (x, y) = data.all();
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let xv = tape.constant(x);
    let logits = bound.forward(&mut tape, xv)?;
    let ce = tape.cross_entropy(logits, &y)?;
    Ok((tape.value(ce).item(), accuracy(tape.value(logits), &y)))
}

fn prox_penalty(params: &[f64], anchor: &[f64], mu: f64) -> f64 {
    0.5 * mu
        * params
            .iter()
            .zip(anchor)
            .map(|(w, a)| (w - a) * (w - a))
            .sum::<f64>()
}

/// `CE + μ/2 ‖ω − ω^t‖²` on a batch.
pub fn fedprox_loss(
    model: &SingleBranchModel<f64>,
    x: &Tensor<f64>,
    y: &[usize],
    anchor: &[f64],
    mu: f64,
) -> Result<Tensor<f64>> {
    if anchor.len() != model.params().len() {
        return Err(Error::Length {
            what: "proximal anchor",
            expected: model.params().len(),
            got: anchor.len(),
        });
    }
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let logits = bound.forward(&mut tape, xv)?;
    let ce = tape.cross_entropy(logits, y)?;
    let ce = tape.value(ce).item();
    let total = if mu > 0.0 {
        ce + prox_penalty(model.params(), anchor, mu)
    } else {
        ce
    };
    Ok(Tensor::scalar(total))
}

/// Loss and gradient of `CE + μ/2 ‖ω − ω^t‖²`; the proximal part is added
/// only when `μ > 0`.
fn single_loss_grad(
    model: &SingleBranchModel<f64>,
    x: Tensor<f64>,
    y: &[usize],
    anchor: &[f64],
    mu: f64,
) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let xv = tape.constant(x);
    let logits = bound.forward(&mut tape, xv)?;
    let ce = tape.cross_entropy(logits, y)?;
    tape.backward(ce)?;
    let mut g = bound.gradient(&tape, model.params().len());
    let mut loss = tape.value(ce).item();
    if mu > 0.0 {
        for ((gi, w), a) in g.iter_mut().zip(model.params()).zip(anchor) {
            *gi += mu * (w - a);
        }
        loss += prox_penalty(model.params(), anchor, mu);
    }
    Ok((loss, g))
}

/// Full-batch gradient of the baseline's local objective.
pub fn single_gradient(model: &SingleBranchModel<f64>, data: &Samples, anchor: &[f64], mu: f64) -> Result<Vec<f64>> {
    let (x, y) = data.all();
    Ok(single_loss_grad(model, x, &y, anchor, mu)?.1)
}

/// One local phase of FedAvg (`mu = 0`) or FedProx.
pub fn local_train_single(
    model: &mut SingleBranchModel<f64>,
    data: &Samples,
    cfg: &FederationConfig,
    mu: f64,
    client: usize,
    round: usize,
    batches: &mut Rng,
) -> Result<f64> {
    let anchor = model.params().to_vec();
    let (mut loss_sum, mut steps) = (0.0, 0usize);
    for _ in 0..cfg.local_epochs {
        for idx in epoch_batches(data.len(), cfg.batch_size, batches) {
            let (x, y) = data.batch(&idx);
            let (loss, g) = single_loss_grad(model, x, &y, &anchor, mu)?;
            loss_sum += finite(loss, client, round)?;
            for (w, gi) in model.params_mut().iter_mut().zip(g) {
                *w -= cfg.lr_c * gi;
            }
            steps += 1;
        }
    }
    Ok(mean(loss_sum, steps))
}
