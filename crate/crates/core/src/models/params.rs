use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;

/// Which part of a client model a parameter vector holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Full,
    Invariant,
    Specific,
}

/// Flat, ordered parameter storage; the unit of aggregation and exchange.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector<S> {
    values: Vec<S>,
    component: Component,
}

impl<S: Scalar> ParamVector<S> {
    pub fn new(values: Vec<S>, component: Component) -> Self {
        Self { values, component }
    }

    pub fn zeros(len: usize, component: Component) -> Self {
        Self::new(vec![S::zero(); len], component)
    }

    pub fn component(&self) -> Component {
        self.component
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[S] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [S] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<S> {
        self.values
    }

    /// `self - lr * grads`, keeping the component tag.
    pub fn sgd_step(&self, grads: &ParamVector<S>, lr: S) -> Result<Self> {
        let values = crate::autodiff::sgd_step(&self.values, &grads.values, lr)?;
        Ok(Self::new(values, self.component))
    }
}

/// Complementary coordinate sets realising the invariant / specific split of
/// the full client parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionMasks {
    invariant: Vec<usize>,
    specific: Vec<usize>,
}

impl PartitionMasks {
    /// Validates that the two sorted sets are disjoint and cover `0..full_len`.
    pub fn new(mut invariant: Vec<usize>, mut specific: Vec<usize>, full_len: usize) -> Result<Self> {
        invariant.sort_unstable();
        specific.sort_unstable();
        if invariant.len() + specific.len() != full_len {
            return invalid(format!(
                "partition sizes {} + {} do not cover {full_len} coordinates",
                invariant.len(),
                specific.len()
            ));
        }
        let mut seen = vec![false; full_len];
        for &i in invariant.iter().chain(&specific) {
            if i >= full_len || std::mem::replace(&mut seen[i], true) {
                return invalid(format!("coordinate {i} duplicated or out of range"));
            }
        }
        Ok(Self { invariant, specific })
    }

    /// Invariant set is `range`, everything else is specific.
    pub fn from_range(range: std::ops::Range<usize>, full_len: usize) -> Result<Self> {
        let specific = (0..full_len).filter(|i| !range.contains(i)).collect();
        Self::new(range.collect(), specific, full_len)
    }

    pub fn invariant(&self) -> &[usize] {
        &self.invariant
    }

    pub fn specific(&self) -> &[usize] {
        &self.specific
    }

    pub fn full_len(&self) -> usize {
        self.invariant.len() + self.specific.len()
    }

    /// Scatter `ω_c` into invariant coordinates and `ω_s` into specific ones.
    pub fn combine<S: Scalar>(&self, inv: &ParamVector<S>, spec: &ParamVector<S>) -> Result<ParamVector<S>> {
        check_len("combine invariant", self.invariant.len(), inv.len())?;
        check_len("combine specific", self.specific.len(), spec.len())?;
        let mut full = vec![S::zero(); self.full_len()];
        for (&i, &v) in self.invariant.iter().zip(inv.as_slice()) {
            full[i] = v;
        }
        for (&i, &v) in self.specific.iter().zip(spec.as_slice()) {
            full[i] = v;
        }
        Ok(ParamVector::new(full, Component::Full))
    }

    /// Inverse of [`combine`](Self::combine).
    pub fn split<S: Scalar>(&self, full: &ParamVector<S>) -> Result<(ParamVector<S>, ParamVector<S>)> {
        check_len("split", self.full_len(), full.len())?;
        Ok((
            ParamVector::new(self.gather(full.as_slice(), Component::Invariant), Component::Invariant),
            ParamVector::new(self.gather(full.as_slice(), Component::Specific), Component::Specific),
        ))
    }

    /// Coordinates of `full` belonging to one side.
    pub fn gather<S: Scalar>(&self, full: &[S], side: Component) -> Vec<S> {
        let idx = match side {
            Component::Invariant => &self.invariant,
            Component::Specific => &self.specific,
            Component::Full => return full.to_vec(),
        };
        idx.iter().map(|&i| full[i]).collect()
    }

    /// Overwrites one side of `full` in place.
    pub fn scatter<S: Scalar>(&self, full: &mut [S], side: Component, values: &[S]) -> Result<()> {
        let idx = match side {
            Component::Invariant => &self.invariant,
            Component::Specific => &self.specific,
            Component::Full => {
                check_len("scatter full", full.len(), values.len())?;
                full.copy_from_slice(values);
                return Ok(());
            }
        };
        check_len("scatter", idx.len(), values.len())?;
        for (&i, &v) in idx.iter().zip(values) {
            full[i] = v;
        }
        Ok(())
    }
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Length { what, expected, got });
    }
    Ok(())
}
