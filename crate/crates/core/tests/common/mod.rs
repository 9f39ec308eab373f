//! Independent oracles shared by integration tests.
#![allow(dead_code)]

use dfl::autodiff::{Tape, Tensor};
use dfl::rng::{self, Rng};
use rand::Rng as _;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Act {
    Relu,
    Sigmoid,
    Softplus,
    Identity,
}

/// Random dense stack with a cross-entropy head.
#[derive(Debug, Clone)]
pub struct RandomMlp {
    pub widths: Vec<usize>,
    pub acts: Vec<Act>,
    pub params: Vec<f64>,
    pub x: Vec<f64>,
    pub batch: usize,
    pub labels: Vec<usize>,
}

impl RandomMlp {
    pub fn sample(seed: u64) -> Self {
        let mut r = rng::stream(seed, &[0xAD]);
        let layers = r.random_range(1..=3);
        let mut widths = vec![r.random_range(1..=32)];
        for _ in 0..layers - 1 {
            widths.push(r.random_range(1..=32));
        }
        widths.push(r.random_range(2..=8));
        let acts = (0..layers)
            .map(|i| {
                if i + 1 == layers {
                    Act::Identity
                } else {
                    [Act::Relu, Act::Sigmoid, Act::Softplus][r.random_range(0..3)]
                }
            })
            .collect();
        let n: usize = widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        let params = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let batch = r.random_range(1..=6);
        let x = (0..batch * widths[0]).map(|_| r.random_range(-2.0..2.0)).collect();
        let classes = *widths.last().unwrap();
        let labels = (0..batch).map(|_| r.random_range(0..classes)).collect();
        Self {
            widths,
            acts,
            params,
            x,
            batch,
            labels,
        }
    }

    /// Plain-loop forward pass; also returns the sign pattern of every ReLU input.
    pub fn scalar_loss(&self, params: &[f64]) -> (f64, Vec<bool>) {
        let mut h = self.x.clone();
        let mut off = 0;
        let mut mask = Vec::new();
        for (l, w) in self.widths.windows(2).enumerate() {
            let (fi, fo) = (w[0], w[1]);
            let wt = &params[off..off + fi * fo];
            let b = &params[off + fi * fo..off + fi * fo + fo];
            off += fi * fo + fo;
            let mut z = vec![0.0; self.batch * fo];
            for r in 0..self.batch {
                for j in 0..fo {
                    let mut acc = b[j];
                    for i in 0..fi {
                        acc += h[r * fi + i] * wt[i * fo + j];
                    }
                    z[r * fo + j] = match self.acts[l] {
                        Act::Relu => {
                            mask.push(acc > 0.0);
                            acc.max(0.0)
                        }
                        Act::Sigmoid => 1.0 / (1.0 + (-acc).exp()),
                        Act::Softplus => (1.0 + acc.exp()).ln(),
                        Act::Identity => acc,
                    };
                }
            }
            h = z;
        }
        let c = *self.widths.last().unwrap();
        let mut loss = 0.0;
        for r in 0..self.batch {
            let row = &h[r * c..(r + 1) * c];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            loss -= (row[self.labels[r]].exp() / z).ln();
        }
        (loss / self.batch as f64, mask)
    }

    /// Same function through the autodiff tape; returns (loss, d loss / d params).
    pub fn tape_grad(&self) -> (f64, Vec<f64>) {
        let mut tape = Tape::new();
        let mut h = tape.constant(Tensor::matrix(self.batch, self.widths[0], self.x.clone()).unwrap());
        let mut leaves = Vec::new();
        let mut off = 0;
        for (l, w) in self.widths.windows(2).enumerate() {
            let (fi, fo) = (w[0], w[1]);
            let wv = tape.leaf(Tensor::matrix(fi, fo, self.params[off..off + fi * fo].to_vec()).unwrap());
            let bv = tape.leaf(Tensor::row(self.params[off + fi * fo..off + fi * fo + fo].to_vec()));
            off += fi * fo + fo;
            leaves.push(wv);
            leaves.push(bv);
            let z = tape.matmul(h, wv).unwrap();
            let z = tape.add_row(z, bv).unwrap();
            h = match self.acts[l] {
                Act::Relu => tape.relu(z),
                Act::Sigmoid => tape.sigmoid(z),
                Act::Softplus => tape.softplus(z),
                Act::Identity => z,
            };
        }
        let loss = tape.cross_entropy(h, &self.labels).unwrap();
        tape.backward(loss).unwrap();
        let grad = leaves.iter().flat_map(|&v| tape.grad_or_zeros(v)).collect();
        (tape.value(loss).item(), grad)
    }
}

pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinates whose ±h perturbation flips a ReLU; the function is not
    /// differentiable at that scale, so finite differences are meaningless there.
    pub kinks: usize,
}

/// Relative error; the 1e-5 denominator floor keeps finite-difference
/// round-off (about 1e-10 absolute at step 1e-5) from dominating near-zero
/// gradients.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-5)
}

/// Central finite differences, step `h`, over every parameter.
pub fn finite_difference_check(mlp: &RandomMlp, h: f64) -> GradCheck {
    let (_, grad) = mlp.tape_grad();
    let (_, base_mask) = mlp.scalar_loss(&mlp.params);
    let mut out = GradCheck {
        max_rel_err: 0.0,
        checked: 0,
        kinks: 0,
    };
    let mut p = mlp.params.clone();
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + h;
        let (fp, mp) = mlp.scalar_loss(&p);
        p[i] = orig - h;
        let (fm, mm) = mlp.scalar_loss(&p);
        p[i] = orig;
        if mp != base_mask || mm != base_mask {
            out.kinks += 1;
            continue;
        }
        let fd = (fp - fm) / (2.0 * h);
        out.max_rel_err = out.max_rel_err.max(rel_err(fd, grad[i]));
        out.checked += 1;
    }
    out
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn rng_for(seed: u64) -> Rng {
    rng::stream(seed, &[0xC0])
}
