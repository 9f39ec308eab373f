//! Linear-quadratic federation where every smoothness and convexity
//! assumption holds by construction.
//!
//! Client `k` owns `h_k(ω_c, ω_s) = ‖A_k ω_c + B_k ω_s − b_k‖² / 2m + ρ_s/2 ‖ω_s‖²`.
//! The global objective is `f(ω_c) = Σ_k w_k min_{ω_s} h_k(ω_c, ω_s)`; its
//! gradient is computed exactly by solving the inner problem. The protocol
//! mirrors the neural one: several steps on `ω_s` with `ω_c` frozen, then
//! steps on `ω_c` with `ω_s` frozen, then a weighted average of `ω_c` only.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{b_dissimilarity, gamma_from_grads, ConvergenceSeries, SeriesPoint, ConvergenceConstants};
use crate::error::Result;
use crate::rng::{self, tag};
use crate::scalar::{l2_norm, squared_norm};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConvexSpec {
    pub n_clients: usize,
    pub dim_c: usize,
    pub dim_s: usize,
    /// Rows per client.
    pub rows: usize,
    /// Ridge on the specific block.
    pub ridge_s: f64,
    /// Proximal weight pulling `ω_c` toward the round-start value during local steps.
    pub prox_c: f64,
    /// Scale of client-specific shifts in `A_k` and `b_k`.
    pub heterogeneity: f64,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    /// `None` picks `1 / L` from the data.
    pub lr_s: Option<f64>,
    pub lr_c: Option<f64>,
    pub rounds: usize,
    pub seed: u64,
}

impl Default for ConvexSpec {
    fn default() -> Self {
        Self {
            n_clients: 8,
            dim_c: 6,
            dim_s: 3,
            rows: 24,
            ridge_s: 0.1,
            prox_c: 0.0,
            heterogeneity: 1.0,
            stage1_steps: 20,
            stage2_steps: 1,
            lr_s: None,
            lr_c: None,
            rounds: 200,
            seed: 0,
        }
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone)]
struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    fn gaussian(r: &mut rng::Rng, rows: usize, cols: usize, scale: f64) -> Self {
        let data = (0..rows * cols)
            .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, r))
            .collect::<Vec<f64>>();
        Self { rows, cols, data }
    }

    fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|i| self.data[i * self.cols..(i + 1) * self.cols].iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    fn tmul_vec(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (i, &vi) in v.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(&self.data[i * self.cols..(i + 1) * self.cols]) {
                *o += a * vi;
            }
        }
        out
    }

    /// `AᵀA / m + ridge I`.
    fn gram(&self, ridge: f64) -> Mat {
        let n = self.cols;
        let m = self.rows as f64;
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let dot: f64 = (0..self.rows).map(|r| self.at(r, i) * self.at(r, j)).sum();
                data[i * n + j] = dot / m + if i == j { ridge } else { 0.0 };
            }
        }
        Mat { rows: n, cols: n, data }
    }

    /// Solves `self x = b` for symmetric positive definite `self`.
    fn cholesky_solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.rows;
        let mut l = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let s: f64 = (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum();
                if i == j {
                    l[i * n + i] = (self.at(i, i) - s).sqrt();
                } else {
                    l[i * n + j] = (self.at(i, j) - s) / l[j * n + j];
                }
            }
        }
        let mut y = vec![0.0; n];
        for i in 0..n {
            let s: f64 = (0..i).map(|k| l[i * n + k] * y[k]).sum();
            y[i] = (b[i] - s) / l[i * n + i];
        }
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|k| l[k * n + i] * x[k]).sum();
            x[i] = (y[i] - s) / l[i * n + i];
        }
        x
    }

    /// Largest eigenvalue of a symmetric positive semi-definite matrix.
    fn lambda_max(&self) -> f64 {
        let mut v = vec![1.0; self.rows];
        let mut lambda = 0.0;
        for _ in 0..500 {
            let w = self.mul_vec(&v);
            let norm = l2_norm(&w);
            if norm == 0.0 {
                return 0.0;
            }
            lambda = norm / l2_norm(&v);
            v = w.into_iter().map(|x| x / norm).collect();
        }
        lambda
    }
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

struct Client {
    a: Mat,
    b: Mat,
    y: Vec<f64>,
    weight: f64,
    /// `BᵀB/m + ρ_s I`, the inner Hessian.
    inner: Mat,
}

impl Client {
    fn m(&self) -> f64 {
        self.a.rows as f64
    }

    fn residual(&self, wc: &[f64], ws: &[f64]) -> Vec<f64> {
        let mut r = self.a.mul_vec(wc);
        axpy(&mut r, 1.0, &self.b.mul_vec(ws));
        axpy(&mut r, -1.0, &self.y);
        r
    }

    fn h(&self, wc: &[f64], ws: &[f64], ridge: f64) -> f64 {
        squared_norm(&self.residual(wc, ws)) / (2.0 * self.m()) + 0.5 * ridge * squared_norm(ws)
    }

    fn grad_c(&self, wc: &[f64], ws: &[f64]) -> Vec<f64> {
        let m = self.m();
        self.a.tmul_vec(&self.residual(wc, ws)).into_iter().map(|g| g / m).collect()
    }

    fn grad_s(&self, wc: &[f64], ws: &[f64], ridge: f64) -> Vec<f64> {
        let m = self.m();
        let mut g: Vec<f64> = self.b.tmul_vec(&self.residual(wc, ws)).into_iter().map(|g| g / m).collect();
        axpy(&mut g, ridge, ws);
        g
    }

    fn best_s(&self, wc: &[f64]) -> Vec<f64> {
        let mut target = self.y.clone();
        axpy(&mut target, -1.0, &self.a.mul_vec(wc));
        let m = self.m();
        let rhs: Vec<f64> = self.b.tmul_vec(&target).into_iter().map(|v| v / m).collect();
        self.inner.cholesky_solve(&rhs)
    }
}

/// One round of the convex harness, measured at the round-start point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvexRun {
    pub series: ConvergenceSeries,
    pub omega_c: Vec<f64>,
    pub lr_s: f64,
    pub lr_c: f64,
}

impl ConvexRun {
    pub fn final_grad_norm(&self) -> f64 {
        self.series.points().last().map_or(f64::NAN, |p| p.grad_f_norm)
    }
}

pub struct ConvexHarness {
    spec: ConvexSpec,
    clients: Vec<Client>,
    lr_s: f64,
    lr_c: f64,
}
impl ConvexSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(crate::Error::Config(m.into()));
        if self.n_clients == 0 || self.dim_c == 0 || self.dim_s == 0 || self.rows == 0 {
            return bad("convex harness needs clients, rows and both blocks");
        }
        if !(self.ridge_s > 0.0) {
            return bad("ridge_s must be > 0");
        }
        if self.stage1_steps == 0 || self.stage2_steps == 0 {
            return bad("both stages need at least one step");
        }
        if self.rounds == 0 {
            return bad("rounds must be >= 1");
        }
        for lr in [self.lr_s, self.lr_c].into_iter().flatten() {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad("explicit learning rates must be > 0");
            }
        }
        Ok(())
    }
}

impl ConvexHarness {
    pub fn new(spec: ConvexSpec) -> Result<Self> {
        spec.validate()?;
        let mut shared = rng::stream(spec.seed, &[tag::CONVEX]);
        let rows = spec.rows;
        let a0 = Mat::gaussian(&mut shared, rows, spec.dim_c, 1.0);
        let truth_c = Mat::gaussian(&mut shared, spec.dim_c, 1, 1.0).data;
        let mut clients = Vec::with_capacity(spec.n_clients);
        for k in 0..spec.n_clients {
            let mut r = rng::stream(spec.seed, &[tag::CONVEX, k as u64 + 1]);
            let mut a = Mat::gaussian(&mut r, rows, spec.dim_c, 0.5 * spec.heterogeneity);
            axpy(&mut a.data, 1.0, &a0.data);
            let b = Mat::gaussian(&mut r, rows, spec.dim_s, 1.0);
            let truth_s = Mat::gaussian(&mut r, spec.dim_s, 1, 1.0).data;
            let noise = Mat::gaussian(&mut r, rows, 1, spec.heterogeneity / (rows as f64).sqrt()).data;
            let mut y = a.mul_vec(&truth_c);
            axpy(&mut y, 1.0, &b.mul_vec(&truth_s));
            axpy(&mut y, 1.0, &noise);
            let inner = b.gram(spec.ridge_s);
            clients.push(Client {
                a,
                b,
                y,
                weight: 1.0 / spec.n_clients as f64,
                inner,
            });
        }
        let lr_s = spec
            .lr_s
            .unwrap_or_else(|| 1.0 / clients.iter().map(|c| c.inner.lambda_max()).fold(0.0, f64::max));
        let lr_c = spec.lr_c.unwrap_or_else(|| {
            1.0 / clients
                .iter()
                .map(|c| c.a.gram(0.0).lambda_max() + spec.prox_c)
                .fold(0.0, f64::max)
        });
        Ok(Self {
            spec,
            clients,
            lr_s,
            lr_c,
        })
    }

    /// Exact `(f, ∇f)` at `ω_c`.
    pub fn objective(&self, wc: &[f64]) -> (f64, Vec<f64>) {
        let mut f = 0.0;
        let mut g = vec![0.0; wc.len()];
        for c in &self.clients {
            let s = c.best_s(wc);
            f += c.weight * c.h(wc, &s, self.spec.ridge_s);
            axpy(&mut g, c.weight, &c.grad_c(wc, &s));
        }
        (f, g)
    }

    pub fn run(&self) -> Result<ConvexRun> {
        let spec = &self.spec;
        let mut wc = vec![0.0; spec.dim_c];
        let mut ws = vec![vec![0.0; spec.dim_s]; self.clients.len()];
        let weights: Vec<f64> = self.clients.iter().map(|c| c.weight).collect();
        let mut series = ConvergenceSeries::new();
        for t in 0..=spec.rounds {
            let (f, grad) = self.objective(&wc);
            let grad_f_norm = l2_norm(&grad);
            let mut point = SeriesPoint {
                round: t,
                f,
                grad_f_norm,
                constants: ConvergenceConstants {
                    grad_f_norm: Some(grad_f_norm),
                    ..ConvergenceConstants::default()
                },
            };
            if t == spec.rounds {
                series.push(point)?;
                break;
            }
            let mut next = vec![0.0; spec.dim_c];
            let mut local_grads = Vec::with_capacity(self.clients.len());
            let mut gamma_sum = 0.0;
            for (c, s) in self.clients.iter().zip(ws.iter_mut()) {
                for _ in 0..spec.stage1_steps {
                    let g = c.grad_s(&wc, s, spec.ridge_s);
                    axpy(s, -self.lr_s, &g);
                }
                let local_grad = |w: &[f64]| {
                    let mut g = c.grad_c(w, s);
                    for ((gi, wi), w0) in g.iter_mut().zip(w).zip(&wc) {
                        *gi += spec.prox_c * (wi - w0);
                    }
                    g
                };
                let g_start = local_grad(&wc);
                let mut local = wc.clone();
                for _ in 0..spec.stage2_steps {
                    let g = local_grad(&local);
                    axpy(&mut local, -self.lr_c, &g);
                }
                gamma_sum += gamma_from_grads(&local_grad(&local), &g_start).gamma;
                axpy(&mut next, c.weight, &local);
                local_grads.push(g_start);
            }
            point.constants.gamma_hat = Some(gamma_sum / self.clients.len() as f64);
            point.constants.b_hat = Some(b_dissimilarity(&local_grads, &weights)?);
            series.push(point)?;
            wc = next;
        }
        Ok(ConvexRun {
            series,
            omega_c: wc,
            lr_s: self.lr_s,
            lr_c: self.lr_c,
        })
    }
}
