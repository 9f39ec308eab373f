//! Jensen-Shannon mutual-information lower bound (Deep InfoMax style):
//!
//! `Î = mean_joint[-softplus(-T(a, b))] - mean_marginal[softplus(T(a, b'))]`
//!
//! where `b'` is `b` with its rows permuted, approximating samples from the
//! product of marginals. All values are in nats. With `T ≡ 0` the bound is
//! exactly `-2 ln 2`; it approaches `0` from below as `T` separates joint from
//! marginal pairs.

use rand::seq::SliceRandom;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::models::{BoundMlp, MlpSpec, Segment, Trainable, TwoBranchModel};
use crate::rng::{self, Rng};
use crate::scalar::Scalar;

/// Within-batch shuffle with no fixed points for every batch of at least 2 rows.
pub fn marginal_permutation(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    if n >= 2 {
        for i in 0..n {
            if p[i] == i {
                let j = (i + 1) % n;
                p.swap(i, j);
            }
        }
    }
    p
}

/// Aligned representation pairs plus the permutation that builds marginal pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct MiBatch<S> {
    a: Tensor<S>,
    b: Tensor<S>,
    perm: Vec<usize>,
}

impl<S: Scalar> MiBatch<S> {
    pub fn new(a: Tensor<S>, b: Tensor<S>, rng: &mut Rng) -> Result<Self> {
        let perm = marginal_permutation(a.rows(), rng);
        Self::with_permutation(a, b, perm)
    }

    pub fn with_permutation(a: Tensor<S>, b: Tensor<S>, perm: Vec<usize>) -> Result<Self> {
        if a.rows() != b.rows() {
            return Err(Error::Shape {
                op: "mi batch",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        if a.rows() < 2 {
            return invalid("MI batch needs at least 2 rows");
        }
        let mut seen = vec![false; perm.len()];
        if perm.len() != a.rows() || perm.iter().any(|&i| i >= seen.len() || std::mem::replace(&mut seen[i], true)) {
            return invalid("marginal permutation is not a permutation of the batch rows");
        }
        Ok(Self { a, b, perm })
    }

    pub fn rows(&self) -> usize {
        self.a.rows()
    }

    pub fn a(&self) -> &Tensor<S> {
        &self.a
    }

    pub fn b(&self) -> &Tensor<S> {
        &self.b
    }

    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MiEstimate {
    pub value: f64,
    pub n_joint: usize,
    pub n_marginal: usize,
}

/// Statistics network `T(a, b)` scoring the concatenated pair.
#[derive(Debug, Clone, PartialEq)]
pub struct StatsNet<S> {
    pub spec: MlpSpec,
    pub params: Vec<S>,
}

impl<S: Scalar> StatsNet<S> {
    pub fn new(pair_dim: usize, hidden: usize, seed: u64) -> Result<Self> {
        let spec = MlpSpec::relu(vec![pair_dim, hidden, 1])?;
        let params = spec.init(&mut rng::stream(seed, &[rng::tag::INIT, 200]));
        Ok(Self { spec, params })
    }

    /// The `T ≡ 0` network.
    pub fn zeros(pair_dim: usize, hidden: usize) -> Result<Self> {
        let spec = MlpSpec::relu(vec![pair_dim, hidden, 1])?;
        let params = vec![S::zero(); spec.param_count()];
        Ok(Self { spec, params })
    }
}

/// Differentiable bound on the tape. Gradients reach `stats` (if bound
/// trainable) and whatever produced `a` and `b`.
pub fn jsd_bound<S: Scalar>(tape: &mut Tape<S>, stats: &BoundMlp, a: Var, b: Var, perm: &[usize]) -> Result<Var> {
    let joint = tape.concat(&[a, b])?;
    let t_joint = stats.forward(tape, joint)?;
    let b_marg = tape.select_rows(b, perm)?;
    let marg = tape.concat(&[a, b_marg])?;
    let t_marg = stats.forward(tape, marg)?;

    let neg = tape.neg(t_joint);
    let sp_joint = tape.softplus(neg);
    let e_joint = tape.mean(sp_joint);
    let sp_marg = tape.softplus(t_marg);
    let e_marg = tape.mean(sp_marg);
    let total = tape.add(e_joint, e_marg)?;
    Ok(tape.neg(total))
}

fn estimate(value: f64, rows: usize) -> MiEstimate {
    MiEstimate {
        value,
        n_joint: rows,
        n_marginal: rows,
    }
}

/// Evaluates the bound for a statistics net on a batch.
pub fn jsd_lower_bound<S: Scalar>(stats: &StatsNet<S>, batch: &MiBatch<S>) -> Result<MiEstimate> {
    let mut tape = Tape::new();
    let t = stats.spec.bind(&mut tape, &stats.params, false);
    let a = tape.constant(batch.a.clone());
    let b = tape.constant(batch.b.clone());
    let v = jsd_bound(&mut tape, &t, a, b, &batch.perm)?;
    Ok(estimate(tape.value(v).item().as_f64(), batch.rows()))
}

/// One gradient-ascent step on the bound w.r.t. the statistics net only.
/// Returns the bound evaluated before the step.
pub fn train_stats_step<S: Scalar>(stats: &mut StatsNet<S>, batch: &MiBatch<S>, lr: S) -> Result<MiEstimate> {
    if lr < S::zero() {
        return invalid("statistics-net learning rate must be non-negative");
    }
    let mut tape = Tape::new();
    let t = stats.spec.bind(&mut tape, &stats.params, true);
    let a = tape.constant(batch.a.clone());
    let b = tape.constant(batch.b.clone());
    let v = jsd_bound(&mut tape, &t, a, b, &batch.perm)?;
    tape.backward(v)?;
    let mut g = vec![S::zero(); stats.params.len()];
    t.write_grad(&tape, &mut g);
    for (p, gi) in stats.params.iter_mut().zip(g) {
        *p += lr * gi;
    }
    Ok(estimate(tape.value(v).item().as_f64(), batch.rows()))
}

/// Disentanglement term `I_s(E_s(x), E_c(x))` and alignment term
/// `I_c(E_c(x), E_c^G(x))` for one batch, using the model's own statistics
/// nets. `global_encoder_c` is the frozen broadcast snapshot.
pub fn mi_terms<S: Scalar>(
    model: &TwoBranchModel<S>,
    x: &Tensor<S>,
    global_encoder_c: Option<&[S]>,
    rng: &mut Rng,
) -> Result<(MiEstimate, MiEstimate)> {
    let Some(global) = global_encoder_c else {
        return invalid("I_c needs the frozen global invariant extractor");
    };
    let arch = model.arch();
    if global.len() != arch.range(Segment::EncoderC).len() {
        return Err(Error::Length {
            what: "global invariant extractor",
            expected: arch.range(Segment::EncoderC).len(),
            got: global.len(),
        });
    }
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, Trainable::none());
    let xv = tape.constant(x.clone());
    let rc = bound.encode_c(&mut tape, xv)?;
    let rs = bound.encode_s(&mut tape, xv)?;
    let g = arch.encoder_c.bind(&mut tape, global, false);
    let rg = g.forward(&mut tape, xv)?;
    let rows = x.rows();
    let perm_s = marginal_permutation(rows, rng);
    let perm_c = marginal_permutation(rows, rng);
    let is = jsd_bound(&mut tape, &bound.stats_s, rs, rc, &perm_s)?;
    let ic = jsd_bound(&mut tape, &bound.stats_c, rc, rg, &perm_c)?;
    Ok((
        estimate(tape.value(is).item().as_f64(), rows),
        estimate(tape.value(ic).item().as_f64(), rows),
    ))
}
