use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::mlp::{BoundMlp, MlpSpec};
use super::params::{Component, ParamVector, PartitionMasks};
use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::rng;
use crate::scalar::Scalar;

/// Shape of a client model. Both extractors share the hidden widths.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    /// Invariant representation width `d_c`.
    pub rep_c: usize,
    /// Specific representation width `d_s`.
    pub rep_s: usize,
    pub predictor_hidden: Vec<usize>,
    pub n_classes: usize,
    /// Hidden width of the two statistics networks.
    pub stats_hidden: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            input_dim: 42,
            hidden: vec![32],
            rep_c: 8,
            rep_s: 8,
            predictor_hidden: vec![16],
            n_classes: 4,
            stats_hidden: 32,
        }
    }
}

/// Named parameter blocks of a two-branch model, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Segment {
    EncoderC,
    EncoderS,
    Predictor,
    StatsS,
    StatsC,
}

impl Segment {
    pub const ALL: [Segment; 5] = [
        Segment::EncoderC,
        Segment::EncoderS,
        Segment::Predictor,
        Segment::StatsS,
        Segment::StatsC,
    ];
}

/// Derived layout of a [`ModelSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct TwoBranchArch {
    pub spec: ModelSpec,
    pub encoder_c: MlpSpec,
    pub encoder_s: MlpSpec,
    pub predictor: MlpSpec,
    pub stats_s: MlpSpec,
    pub stats_c: MlpSpec,
    ranges: [Range<usize>; 5],
    masks: PartitionMasks,
}

fn stack(first: usize, hidden: &[usize], last: usize) -> Result<MlpSpec> {
    let mut w = Vec::with_capacity(hidden.len() + 2);
    w.push(first);
    w.extend_from_slice(hidden);
    w.push(last);
    MlpSpec::relu(w)
}

impl TwoBranchArch {
    pub fn new(spec: ModelSpec) -> Result<Arc<Self>> {
        if spec.rep_s == 0 || spec.rep_c == 0 {
            return invalid("representation widths must be >= 1");
        }
        if spec.n_classes < 2 {
            return invalid("at least two classes required");
        }
        let encoder_c = stack(spec.input_dim, &spec.hidden, spec.rep_c)?;
        let encoder_s = stack(spec.input_dim, &spec.hidden, spec.rep_s)?;
        let predictor = stack(spec.rep_c + spec.rep_s, &spec.predictor_hidden, spec.n_classes)?;
        let stats_s = stack(spec.rep_s + spec.rep_c, &[spec.stats_hidden], 1)?;
        let stats_c = stack(2 * spec.rep_c, &[spec.stats_hidden], 1)?;
        let mut ranges: [Range<usize>; 5] = Default::default();
        let mut off = 0;
        for (r, m) in ranges
            .iter_mut()
            .zip([&encoder_c, &encoder_s, &predictor, &stats_s, &stats_c])
        {
            *r = off..off + m.param_count();
            off = r.end;
        }
        // Only the invariant extractor is ever aggregated.
        let masks = PartitionMasks::from_range(ranges[0].clone(), off)?;
        Ok(Arc::new(Self {
            spec,
            encoder_c,
            encoder_s,
            predictor,
            stats_s,
            stats_c,
            ranges,
            masks,
        }))
    }

    pub fn range(&self, seg: Segment) -> Range<usize> {
        self.ranges[seg as usize].clone()
    }

    pub fn mlp(&self, seg: Segment) -> &MlpSpec {
        match seg {
            Segment::EncoderC => &self.encoder_c,
            Segment::EncoderS => &self.encoder_s,
            Segment::Predictor => &self.predictor,
            Segment::StatsS => &self.stats_s,
            Segment::StatsC => &self.stats_c,
        }
    }

    pub fn full_len(&self) -> usize {
        self.ranges[4].end
    }

    pub fn masks(&self) -> &PartitionMasks {
        &self.masks
    }
}

/// Which segments get gradients when binding a model to a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Trainable {
    pub encoder_c: bool,
    pub encoder_s: bool,
    pub predictor: bool,
    pub stats_s: bool,
    pub stats_c: bool,
}

impl Trainable {
    pub fn all() -> Self {
        Self {
            encoder_c: true,
            encoder_s: true,
            predictor: true,
            stats_s: true,
            stats_c: true,
        }
    }

    pub fn none() -> Self {
        Self::default()
    }

    pub fn get(&self, seg: Segment) -> bool {
        match seg {
            Segment::EncoderC => self.encoder_c,
            Segment::EncoderS => self.encoder_s,
            Segment::Predictor => self.predictor,
            Segment::StatsS => self.stats_s,
            Segment::StatsC => self.stats_c,
        }
    }
}

/// Invariant extractor, specific extractor, predictor and the two
/// statistics networks, stored as one flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoBranchModel<S> {
    arch: Arc<TwoBranchArch>,
    params: Vec<S>,
}

impl<S: Scalar> TwoBranchModel<S> {
    /// Seeded initialisation; the same seed always yields the same vector.
    pub fn init(arch: Arc<TwoBranchArch>, seed: u64) -> Self {
        let mut params = Vec::with_capacity(arch.full_len());
        for seg in Segment::ALL {
            let mut r = rng::stream(seed, &[rng::tag::INIT, seg as u64]);
            params.extend(arch.mlp(seg).init::<S>(&mut r));
        }
        Self { arch, params }
    }

    pub fn arch(&self) -> &Arc<TwoBranchArch> {
        &self.arch
    }

    pub fn params(&self) -> &[S] {
        &self.params
    }

    pub fn segment(&self, seg: Segment) -> &[S] {
        &self.params[self.arch.range(seg)]
    }

    pub fn segment_mut(&mut self, seg: Segment) -> &mut [S] {
        let r = self.arch.range(seg);
        &mut self.params[r]
    }

    pub fn flatten(&self) -> ParamVector<S> {
        ParamVector::new(self.params.clone(), Component::Full)
    }

    pub fn unflatten(arch: Arc<TwoBranchArch>, full: &ParamVector<S>) -> Result<Self> {
        if full.len() != arch.full_len() {
            return Err(Error::Length {
                what: "two-branch parameters",
                expected: arch.full_len(),
                got: full.len(),
            });
        }
        Ok(Self {
            arch,
            params: full.as_slice().to_vec(),
        })
    }

    pub fn invariant(&self) -> ParamVector<S> {
        ParamVector::new(
            self.arch.masks().gather(&self.params, Component::Invariant),
            Component::Invariant,
        )
    }

    pub fn specific(&self) -> ParamVector<S> {
        ParamVector::new(
            self.arch.masks().gather(&self.params, Component::Specific),
            Component::Specific,
        )
    }

    pub fn set_invariant(&mut self, inv: &ParamVector<S>) -> Result<()> {
        let masks = self.arch.masks().clone();
        masks.scatter(&mut self.params, Component::Invariant, inv.as_slice())
    }

    pub fn set_specific(&mut self, spec: &ParamVector<S>) -> Result<()> {
        let masks = self.arch.masks().clone();
        masks.scatter(&mut self.params, Component::Specific, spec.as_slice())
    }

    pub fn bind(&self, tape: &mut Tape<S>, trainable: Trainable) -> BoundTwoBranch {
        BoundTwoBranch {
            encoder_c: self.arch.encoder_c.bind(tape, self.segment(Segment::EncoderC), trainable.encoder_c),
            encoder_s: self.arch.encoder_s.bind(tape, self.segment(Segment::EncoderS), trainable.encoder_s),
            predictor: self.arch.predictor.bind(tape, self.segment(Segment::Predictor), trainable.predictor),
            stats_s: self.arch.stats_s.bind(tape, self.segment(Segment::StatsS), trainable.stats_s),
            stats_c: self.arch.stats_c.bind(tape, self.segment(Segment::StatsC), trainable.stats_c),
        }
    }

    /// Binds every parameter as a leaf and runs the model:
    /// `logits = P(concat(E_c(x), E_s(x)))`.
    pub fn forward(&self, tape: &mut Tape<S>, x: Var) -> Result<(Var, Var, Var)> {
        let bound = self.bind(tape, Trainable::all());
        bound.forward(tape, x)
    }

    /// Descends every segment marked trainable by `lr * grad`; other segments
    /// are left bit-identical.
    pub fn apply_gradient(&mut self, grad: &[S], lr: S, trainable: Trainable) {
        for seg in Segment::ALL {
            if !trainable.get(seg) {
                continue;
            }
            let r = self.arch.range(seg);
            for (p, &g) in self.params[r.clone()].iter_mut().zip(&grad[r]) {
                *p -= lr * g;
            }
        }
    }

    /// Adds `lr * grad` to one segment (gradient ascent).
    pub fn ascend_segment(&mut self, seg: Segment, grad: &[S], lr: S) {
        let r = self.arch.range(seg);
        for (p, &g) in self.params[r.clone()].iter_mut().zip(&grad[r]) {
            *p += lr * g;
        }
    }
}

/// A two-branch model placed on a tape.
#[derive(Debug, Clone)]
pub struct BoundTwoBranch {
    pub encoder_c: BoundMlp,
    pub encoder_s: BoundMlp,
    pub predictor: BoundMlp,
    pub stats_s: BoundMlp,
    pub stats_c: BoundMlp,
}

impl BoundTwoBranch {
    pub fn encode_c<S: Scalar>(&self, tape: &mut Tape<S>, x: Var) -> Result<Var> {
        self.encoder_c.forward(tape, x)
    }

    pub fn encode_s<S: Scalar>(&self, tape: &mut Tape<S>, x: Var) -> Result<Var> {
        self.encoder_s.forward(tape, x)
    }

    /// Predictor applied to `rep_c ⊕ rep_s`.
    pub fn predict<S: Scalar>(&self, tape: &mut Tape<S>, rep_c: Var, rep_s: Var) -> Result<Var> {
        let joint = tape.concat(&[rep_c, rep_s])?;
        self.predictor.forward(tape, joint)
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, x: Var) -> Result<(Var, Var, Var)> {
        let rc = self.encode_c(tape, x)?;
        let rs = self.encode_s(tape, x)?;
        let logits = self.predict(tape, rc, rs)?;
        Ok((rc, rs, logits))
    }

    /// Full-length gradient, zeros on frozen segments.
    pub fn gradient<S: Scalar>(&self, tape: &Tape<S>, arch: &TwoBranchArch) -> Vec<S> {
        let mut g = vec![S::zero(); arch.full_len()];
        for (seg, m) in [
            (Segment::EncoderC, &self.encoder_c),
            (Segment::EncoderS, &self.encoder_s),
            (Segment::Predictor, &self.predictor),
            (Segment::StatsS, &self.stats_s),
            (Segment::StatsC, &self.stats_c),
        ] {
            if m.is_trainable() {
                m.write_grad(tape, &mut g[arch.range(seg)]);
            }
        }
        g
    }
}
