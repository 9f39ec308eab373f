use std::sync::Arc;

use super::mlp::{BoundMlp, MlpSpec};
use super::params::{Component, ParamVector};
use super::two_branch::ModelSpec;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;

/// Extractor + predictor baseline used by FedAvg / FedProx. The extractor
/// output width is `rep_c + rep_s` so capacity matches the two-branch model.
#[derive(Debug, Clone, PartialEq)]
pub struct SingleBranchArch {
    pub spec: ModelSpec,
    pub extractor: MlpSpec,
    pub predictor: MlpSpec,
}

impl SingleBranchArch {
    pub fn new(spec: ModelSpec) -> Result<Arc<Self>> {
        let rep = spec.rep_c + spec.rep_s;
        let mut w = vec![spec.input_dim];
        w.extend_from_slice(&spec.hidden);
        w.push(rep);
        let extractor = MlpSpec::relu(w)?;
        let mut w = vec![rep];
        w.extend_from_slice(&spec.predictor_hidden);
        w.push(spec.n_classes);
        let predictor = MlpSpec::relu(w)?;
        Ok(Arc::new(Self {
            spec,
            extractor,
            predictor,
        }))
    }

    pub fn full_len(&self) -> usize {
        self.extractor.param_count() + self.predictor.param_count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SingleBranchModel<S> {
    arch: Arc<SingleBranchArch>,
    params: Vec<S>,
}

impl<S: Scalar> SingleBranchModel<S> {
    pub fn init(arch: Arc<SingleBranchArch>, seed: u64) -> Self {
        let mut params = arch.extractor.init(&mut rng::stream(seed, &[rng::tag::INIT, 100]));
        params.extend(arch.predictor.init::<S>(&mut rng::stream(seed, &[rng::tag::INIT, 101])));
        Self { arch, params }
    }

    pub fn arch(&self) -> &Arc<SingleBranchArch> {
        &self.arch
    }

    pub fn params(&self) -> &[S] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [S] {
        &mut self.params
    }

    pub fn flatten(&self) -> ParamVector<S> {
        ParamVector::new(self.params.clone(), Component::Full)
    }

    pub fn set_params(&mut self, full: &ParamVector<S>) -> Result<()> {
        if full.len() != self.params.len() {
            return Err(Error::Length {
                what: "single-branch parameters",
                expected: self.params.len(),
                got: full.len(),
            });
        }
        self.params.copy_from_slice(full.as_slice());
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape<S>) -> BoundSingleBranch {
        let split = self.arch.extractor.param_count();
        BoundSingleBranch {
            extractor: self.arch.extractor.bind(tape, &self.params[..split], true),
            predictor: self.arch.predictor.bind(tape, &self.params[split..], true),
            split,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BoundSingleBranch {
    extractor: BoundMlp,
    predictor: BoundMlp,
    split: usize,
}

impl BoundSingleBranch {
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, x: Var) -> Result<Var> {
        let h = self.extractor.forward(tape, x)?;
        self.predictor.forward(tape, h)
    }

    pub fn gradient<S: Scalar>(&self, tape: &Tape<S>, full_len: usize) -> Vec<S> {
        let mut g = vec![S::zero(); full_len];
        self.extractor.write_grad(tape, &mut g[..self.split]);
        self.predictor.write_grad(tape, &mut g[self.split..]);
        g
    }
}
