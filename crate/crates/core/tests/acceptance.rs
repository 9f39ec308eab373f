//! End-to-end acceptance checks. Runs as a plain binary so every criterion
//! reports a line even when an earlier one fails.
//!
//! `cargo test --release --test acceptance -- 3 9` runs only criteria 3 and 9.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{finite_difference_check, median, RandomMlp};
use dfl::autodiff::Tensor;
use dfl::data::{generate_federation_data, SyntheticTaskSpec};
use dfl::diagnostics::convex::{ConvexHarness, ConvexSpec};
use dfl::diagnostics::{b_dissimilarity, expected_decrease_check, gamma_inexactness, Dissimilarity};
use dfl::federation::metrics::{rounds_to_threshold, write_metrics};
use dfl::federation::{
    invariant_aggregate, Algorithm, Execution, Federation, FederationConfig, InvariantUpdate, NoObserver,
    RoundObserver, RoundRecord, ServerState, Stage,
};
use dfl::mi::{jsd_lower_bound, train_stats_step, MiBatch, StatsNet};
use dfl::models::{Component, ModelSpec, ParamVector, Segment};
use dfl::rng::{self, Rng};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

const SEEDS: [u64; 3] = [0, 1, 2];
const FLOOR: f64 = -2.0 * std::f64::consts::LN_2;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn model_for(task: &SyntheticTaskSpec) -> ModelSpec {
    ModelSpec {
        input_dim: task.input_dim(),
        n_classes: task.n_classes,
        ..ModelSpec::default()
    }
}

fn single() -> Execution {
    Execution {
        threads: Some(1),
        single_thread: true,
    }
}

fn csv_bytes(records: &[RoundRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    write_metrics(&mut out, records).unwrap();
    out
}

struct Run {
    acc: Vec<f64>,
    wall: Duration,
}

impl Run {
    fn final_acc(&self) -> f64 {
        *self.acc.last().unwrap()
    }
}

/// Default-task runs shared by the reproduction criteria, keyed by
/// (algorithm, rho, seed).
#[derive(Default)]
struct Runs {
    done: BTreeMap<(&'static str, u64, u64), Run>,
}

impl Runs {
    fn get(&mut self, algorithm: Algorithm, rho: f64, seed: u64) -> &Run {
        self.done.entry((algorithm.name(), rho.to_bits(), seed)).or_insert_with(|| {
            let task = SyntheticTaskSpec {
                rho,
                seed,
                ..SyntheticTaskSpec::default()
            };
            let cfg = FederationConfig {
                algorithm,
                seed,
                ..FederationConfig::default()
            };
            let start = Instant::now();
            let data = generate_federation_data(&task).unwrap();
            let mut fed = Federation::new(cfg, model_for(&task), data, single()).unwrap();
            let records = fed.run(&mut NoObserver).unwrap();
            Run {
                acc: records.iter().map(|r| r.mean_test_acc).collect(),
                wall: start.elapsed(),
            }
        })
    }

    fn finals(&mut self, algorithm: Algorithm, rho: f64) -> Vec<f64> {
        SEEDS.iter().map(|&s| self.get(algorithm, rho, s).final_acc()).collect()
    }
}

fn fmt_accs(v: &[f64]) -> String {
    v.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>().join("/")
}

fn autodiff_oracle() -> Verdict {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut kinks = 0;
    for seed in 0..200 {
        let r = finite_difference_check(&RandomMlp::sample(1000 + seed), 1e-5);
        worst = worst.max(r.max_rel_err);
        checked += r.checked;
        kinks += r.kinks;
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst < 1e-4 && secs < 30.0 && checked > 0,
        format!("max rel err {worst:.2e} over {checked} coordinates ({kinks} at ReLU kinks skipped), {secs:.1} s"),
    )
}

fn gaussian(rows: usize, cols: usize, rng: &mut Rng) -> Tensor<f64> {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

fn trained_bound(seed: u64, dependent: bool) -> f64 {
    let mut rng = rng::stream(seed, &[77]);
    let mut t = StatsNet::new(4, 64, seed).unwrap();
    let draw = |rows: usize, rng: &mut Rng| {
        let a = gaussian(rows, 2, rng);
        let b = if dependent { a.clone() } else { gaussian(rows, 2, rng) };
        MiBatch::new(a, b, rng).unwrap()
    };
    for _ in 0..200 {
        let batch = draw(64, &mut rng);
        train_stats_step(&mut t, &batch, 0.1).unwrap();
    }
    let held_out = draw(512, &mut rng);
    jsd_lower_bound(&t, &held_out).unwrap().value
}

fn mi_floor_and_separation() -> Verdict {
    let mut rng = rng::stream(2, &[]);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let rows = rng.random_range(2..=64);
        let (da, db) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let hidden = rng.random_range(1..=32);
        let a = gaussian(rows, da, &mut rng);
        let b = gaussian(rows, db, &mut rng);
        let batch = MiBatch::new(a, b, &mut rng).unwrap();
        let t = StatsNet::<f64>::zeros(da + db, hidden).unwrap();
        worst = worst.max((jsd_lower_bound(&t, &batch).unwrap().value - FLOOR).abs());
    }
    let margins: Vec<f64> = SEEDS
        .iter()
        .map(|&s| trained_bound(s, true) - trained_bound(s, false))
        .collect();
    let m = median(margins.clone());
    verdict(
        worst <= 1e-9 && m >= 0.3,
        format!("floor error {worst:.1e}; dependent minus independent {} nats (median {m:.3})", fmt_accs(&margins)),
    )
}

fn scalar_loop_mean(updates: &[(Vec<f64>, usize)]) -> Vec<f64> {
    let total: usize = updates.iter().map(|u| u.1).sum();
    let mut out = vec![0.0; updates[0].0.len()];
    for (v, n) in updates {
        for (o, x) in out.iter_mut().zip(v) {
            *o += x * *n as f64 / total as f64;
        }
    }
    out
}

fn aggregate(rows: &[(Vec<f64>, usize)]) -> Vec<f64> {
    let dim = rows[0].0.len();
    let mut server = ServerState::new(
        ParamVector::zeros(dim, Component::Invariant),
        vec![1; rows.len()],
        vec![vec![]; rows.len()],
    )
    .unwrap();
    let updates: Vec<InvariantUpdate> = rows
        .iter()
        .enumerate()
        .map(|(k, (v, n))| InvariantUpdate {
            client: k,
            omega_c: ParamVector::new(v.clone(), Component::Invariant),
            n_k: *n,
        })
        .collect();
    invariant_aggregate(&mut server, &updates, false).unwrap();
    server.omega_c.as_slice().to_vec()
}

fn aggregation_exactness() -> Verdict {
    let mut rng = rng::stream(3, &[]);
    let mut oracle_err = 0.0f64;
    let mut fixed_err = 0.0f64;
    for _ in 0..500 {
        let k = rng.random_range(1..=10);
        let dim = rng.random_range(1..=20);
        let rows: Vec<(Vec<f64>, usize)> = (0..k)
            .map(|_| {
                let v = (0..dim).map(|_| rng.random_range(-10.0..10.0)).collect();
                (v, rng.random_range(1..=500))
            })
            .collect();
        for (a, b) in aggregate(&rows).iter().zip(scalar_loop_mean(&rows)) {
            oracle_err = oracle_err.max((a - b).abs());
        }
        let same: Vec<(Vec<f64>, usize)> = rows.iter().map(|r| (rows[0].0.clone(), r.1)).collect();
        for (a, b) in aggregate(&same).iter().zip(&rows[0].0) {
            fixed_err = fixed_err.max((a - b).abs());
        }
    }
    let hand = aggregate(&[(vec![1.0, 3.0], 1), (vec![3.0, 5.0], 3)]);
    let hand_ok = (hand[0] - 2.5).abs() < 1e-12 && (hand[1] - 4.5).abs() < 1e-12;
    verdict(
        oracle_err <= 1e-12 && fixed_err <= 1e-12 && hand_ok,
        format!("oracle err {oracle_err:.1e}, fixed-point err {fixed_err:.1e}, n=[1,3] gives {hand:?}"),
    )
}

/// Records every violation of the freeze and partition contracts.
struct Auditor {
    inv: std::ops::Range<usize>,
    full_len: usize,
    broadcast: Vec<f64>,
    stage2_out: BTreeMap<usize, Vec<f64>>,
    checks: usize,
    violations: Vec<String>,
}

fn bit_equal(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

impl RoundObserver for Auditor {
    fn stage_finished(&mut self, round: usize, client: usize, stage: Stage, before: &[f64], after: &[f64]) {
        self.checks += 1;
        if before.len() != self.full_len || after.len() != self.full_len {
            self.violations.push(format!("round {round} client {client}: wrong parameter length"));
            return;
        }
        let r = self.inv.clone();
        match stage {
            Stage::Specific => {
                if !bit_equal(&before[r.clone()], &after[r.clone()]) {
                    self.violations.push(format!("round {round} client {client}: stage 1 moved an invariant coordinate"));
                }
                if !bit_equal(&before[r], &self.broadcast) {
                    self.violations.push(format!("round {round} client {client}: missed the broadcast"));
                }
            }
            Stage::Invariant => {
                if !bit_equal(&before[..r.start], &after[..r.start]) || !bit_equal(&before[r.end..], &after[r.end..]) {
                    self.violations.push(format!("round {round} client {client}: stage 2 moved a specific coordinate"));
                }
                self.stage2_out.insert(client, after[r].to_vec());
            }
        }
    }

    fn aggregating(&mut self, round: usize, updates: &[InvariantUpdate]) {
        for u in updates {
            let sent = u.omega_c.as_slice();
            let own = self.stage2_out.get(&u.client).map(Vec::as_slice).unwrap_or(&[]);
            if u.omega_c.component() != Component::Invariant || sent.len() != self.inv.len() || !bit_equal(sent, own) {
                self.violations.push(format!("round {round} client {}: upload is not its invariant block", u.client));
            }
        }
    }
}

fn partition_and_freeze() -> Verdict {
    let task = SyntheticTaskSpec::default();
    let cfg = FederationConfig::default();
    let data = generate_federation_data(&task).unwrap();
    let mut fed = Federation::new(cfg.clone(), model_for(&task), data, single()).unwrap();
    let arch = fed.client_model(0).unwrap().arch().clone();
    let mut audit = Auditor {
        inv: arch.range(Segment::EncoderC),
        full_len: arch.full_len(),
        broadcast: vec![],
        stage2_out: BTreeMap::new(),
        checks: 0,
        violations: vec![],
    };
    let mut server_ok = true;
    while !fed.is_finished() {
        audit.broadcast = fed.server().unwrap().omega_c.as_slice().to_vec();
        audit.stage2_out.clear();
        fed.run_round(&mut audit).unwrap();
        let s = fed.server().unwrap();
        server_ok &= s.omega_c.component() == Component::Invariant && s.omega_c.len() == audit.inv.len();
    }
    let expected = 2 * cfg.rounds * task.n_clients;
    let pass = audit.violations.is_empty() && server_ok && audit.checks == expected;
    let first = audit.violations.first().cloned().unwrap_or_default();
    verdict(
        pass,
        format!(
            "{} stage audits over {} rounds, {} violations {first}",
            audit.checks,
            cfg.rounds,
            audit.violations.len()
        ),
    )
}

fn clarification(runs: &mut Runs) -> Verdict {
    let skew = runs.finals(Algorithm::FedAvg, 1.0);
    let flat = runs.finals(Algorithm::FedAvg, 0.0);
    let slowest = SEEDS
        .iter()
        .flat_map(|&s| [runs.get(Algorithm::FedAvg, 1.0, s).wall, runs.get(Algorithm::FedAvg, 0.0, s).wall])
        .max()
        .unwrap();
    let drop = 100.0 * (median(flat.clone()) - median(skew.clone()));
    verdict(
        drop >= 5.0 && slowest < Duration::from_secs(120),
        format!(
            "FedAvg rho=1 {} vs rho=0 {}: median drop {drop:.2} points (need >= 5), slowest run {:.1} s",
            fmt_accs(&skew),
            fmt_accs(&flat),
            slowest.as_secs_f64()
        ),
    )
}

fn verification(runs: &mut Runs) -> Verdict {
    let dfl = median(runs.finals(Algorithm::Dfl, 1.0));
    let avg = median(runs.finals(Algorithm::FedAvg, 1.0));
    let prox = median(runs.finals(Algorithm::FedProx, 1.0));
    verdict(
        dfl >= avg + 0.03 && dfl >= prox + 0.03,
        format!("median final accuracy DFL {dfl:.3}, FedAvg {avg:.3}, FedProx {prox:.3}"),
    )
}

fn fewer_rounds(runs: &mut Runs) -> Verdict {
    let total = FederationConfig::default().rounds;
    let mut needed = Vec::new();
    for &s in &SEEDS {
        let target = runs.get(Algorithm::FedAvg, 1.0, s).final_acc();
        let hit = rounds_to_threshold(&runs.get(Algorithm::Dfl, 1.0, s).acc, target);
        needed.push(hit.map_or(f64::INFINITY, |r| r as f64));
    }
    let m = median(needed.clone());
    verdict(
        m <= 0.7 * total as f64,
        format!("DFL rounds to FedAvg's final accuracy {needed:?}, median {m} of {total}"),
    )
}

fn ablation(runs: &mut Runs) -> Verdict {
    let full = median(runs.finals(Algorithm::Dfl, 1.0));
    let inv_only = median(runs.finals(Algorithm::DflNoDiversity, 1.0));
    let div_only = median(runs.finals(Algorithm::DflNoInvariantAgg, 1.0));
    verdict(
        full >= inv_only - 0.005 && full >= div_only - 0.005,
        format!("median final accuracy full {full:.3}, invariant aggregation only {inv_only:.3}, diversity only {div_only:.3}"),
    )
}

fn convex_harness() -> Verdict {
    let spec = ConvexSpec::default();
    let run = ConvexHarness::new(spec.clone()).unwrap().run().unwrap();
    let report = expected_decrease_check(&run.series, 5).unwrap();
    let monotone = report.non_increasing_from(5);
    let g = run.final_grad_norm();
    verdict(
        monotone && g < 1e-3 && spec.rounds <= 200,
        format!(
            "windowed grad-norm mean non-increasing after burn-in: {monotone}; final |grad f| {g:.2e} after {} rounds",
            spec.rounds
        ),
    )
}

fn diagnostics_oracles() -> Verdict {
    let b = b_dissimilarity(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[1.0, 1.0]).unwrap();
    let b_ok = matches!(b, Dissimilarity::Value(v) if (v - 2f64.sqrt()).abs() < 1e-12);
    let same = b_dissimilarity(&[vec![0.3, -2.0], vec![0.3, -2.0], vec![0.3, -2.0]], &[1.0, 5.0, 2.0]).unwrap();
    let same_ok = matches!(same, Dissimilarity::Value(v) if (v - 1.0).abs() < 1e-12);

    let star = [1.0, -2.0, 0.5];
    let w0 = [3.0, 1.0, -1.0];
    let grad = |w: &[f64]| -> dfl::Result<Vec<f64>> { Ok(w.iter().zip(&star).map(|(a, b)| a - b).collect()) };
    let w1: Vec<f64> = w0.iter().zip(&star).map(|(w, s)| w - 0.5 * (w - s)).collect();
    let gamma = gamma_inexactness(grad, &w1, &w0).unwrap().gamma;
    let gamma_ok = (gamma - 0.5).abs() < 1e-12;

    let task = SyntheticTaskSpec {
        n_clients: 4,
        samples_per_client: 80,
        ..SyntheticTaskSpec::default()
    };
    let mut identical = true;
    for alg in Algorithm::ALL {
        let mut outcome = Vec::new();
        for diagnostics in [true, false] {
            let cfg = FederationConfig {
                algorithm: alg,
                rounds: 6,
                clients_per_round: Some(3),
                full_eval_every: 2,
                diagnostics,
                ..FederationConfig::default()
            };
            let data = generate_federation_data(&task).unwrap();
            let mut fed = Federation::new(cfg, model_for(&task), data, single()).unwrap();
            let records = fed.run(&mut NoObserver).unwrap();
            let curve: Vec<(u64, u64, Vec<u64>)> = records
                .iter()
                .map(|r| {
                    let acc = r.per_client_acc.iter().map(|a| a.to_bits()).collect();
                    (r.global_loss.to_bits(), r.mean_test_acc.to_bits(), acc)
                })
                .collect();
            let params: Vec<Vec<f64>> = if alg.is_two_branch() {
                (0..task.n_clients)
                    .map(|k| fed.evaluation_model(k).unwrap().params().to_vec())
                    .collect()
            } else {
                vec![fed.global_model().unwrap().params().to_vec()]
            };
            outcome.push((curve, params));
        }
        identical &= outcome[0].0 == outcome[1].0
            && outcome[0].1.iter().zip(&outcome[1].1).all(|(a, b)| bit_equal(a, b));
    }
    verdict(
        b_ok && same_ok && gamma_ok && identical,
        format!("B([1,0],[0,1]) = {b:?}, B(identical) = {same:?}, quadratic gamma = {gamma}, trajectories identical: {identical}"),
    )
}

fn determinism() -> Verdict {
    let task = SyntheticTaskSpec {
        seed: 5,
        ..SyntheticTaskSpec::default()
    };
    let mut mismatched = Vec::new();
    for alg in Algorithm::ALL {
        let cfg = FederationConfig {
            algorithm: alg,
            rounds: 8,
            clients_per_round: Some(5),
            full_eval_every: 3,
            seed: 5,
            ..FederationConfig::default()
        };
        let bytes = |threads: usize| {
            let data = generate_federation_data(&task).unwrap();
            let exec = Execution {
                threads: Some(threads),
                single_thread: false,
            };
            let mut fed = Federation::new(cfg.clone(), model_for(&task), data, exec).unwrap();
            csv_bytes(&fed.run(&mut NoObserver).unwrap())
        };
        if bytes(1) != bytes(8) {
            mismatched.push(alg.name());
        }
    }
    verdict(
        mismatched.is_empty(),
        format!("1 vs 8 threads, {} algorithms, mismatched: {mismatched:?}", Algorithm::ALL.len()),
    )
}

fn main() -> ExitCode {
    type Check<'a> = Box<dyn FnMut() -> Verdict + 'a>;
    let runs = std::cell::RefCell::new(Runs::default());
    let criteria: Vec<(u32, &str, Check)> = vec![
        (1, "autodiff matches finite differences", Box::new(autodiff_oracle)),
        (2, "MI floor and separation", Box::new(mi_floor_and_separation)),
        (3, "aggregation exactness", Box::new(aggregation_exactness)),
        (4, "partition and freeze exactness", Box::new(partition_and_freeze)),
        (5, "attribute skew degrades FedAvg", Box::new(|| clarification(&mut runs.borrow_mut()))),
        (6, "DFL beats FedAvg and FedProx", Box::new(|| verification(&mut runs.borrow_mut()))),
        (7, "DFL needs fewer rounds", Box::new(|| fewer_rounds(&mut runs.borrow_mut()))),
        (8, "ablation direction", Box::new(|| ablation(&mut runs.borrow_mut()))),
        (9, "convex harness convergence", Box::new(convex_harness)),
        (10, "diagnostics oracles", Box::new(diagnostics_oracles)),
        (11, "thread-count determinism", Box::new(determinism)),
    ];
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = Vec::new();
    for (id, name, mut check) in criteria {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let v = catch_unwind(AssertUnwindSafe(&mut check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        });
        let status = if v.pass { "PASS" } else { "FAIL" };
        println!(
            "{status} criterion {id:>2} ({name}): {} [{:.1} s]",
            v.detail,
            start.elapsed().as_secs_f64()
        );
        if !v.pass {
            failed.push(id);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed criteria {failed:?}");
        ExitCode::FAILURE
    }
}
