//! Experiment plans: a TOML file naming a scenario, shared settings, and the
//! arms to compare, expanded into one federated run per arm and seed.

mod plot;

use std::collections::BTreeSet;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub use plot::{emit_plot, emit_plot_from_csv, render_svg, Panel, Series};

use crate::data::{generate_federation_data, SyntheticTaskSpec};
use crate::diagnostics::convex::{ConvexHarness, ConvexSpec};
use crate::diagnostics::expected_decrease_check;
use crate::federation::metrics::{MetricsWriter, RunSummary};
use crate::federation::{Algorithm, Execution, Federation, FederationConfig, NoObserver};
use crate::models::{ModelSpec, TwoBranchArch};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    /// Each algorithm on the configured skew and on `rho = 0`.
    Clarification,
    /// DFL against FedAvg and FedProx.
    Verification,
    /// DFL against its two single-component variants.
    Ablation,
    /// Linear models with quadratic losses under partial aggregation.
    ConvexHarness,
    /// Arms exactly as listed.
    Custom,
}

impl Scenario {
    fn default_arms(self) -> &'static [Algorithm] {
        match self {
            Scenario::Clarification => &[Algorithm::FedAvg, Algorithm::FedProx],
            Scenario::Verification => &[Algorithm::Dfl, Algorithm::FedAvg, Algorithm::FedProx],
            Scenario::Ablation => &[Algorithm::Dfl, Algorithm::DflNoDiversity, Algorithm::DflNoInvariantAgg],
            Scenario::ConvexHarness | Scenario::Custom => &[],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub scenario: Scenario,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            scenario: Scenario::Verification,
            seeds: vec![0, 1, 2],
        }
    }
}

/// Model widths; input and output sizes follow the task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
    pub rep_c: usize,
    pub rep_s: usize,
    pub predictor_hidden: Vec<usize>,
    pub stats_hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelSpec::default();
        Self {
            hidden: d.hidden,
            rep_c: d.rep_c,
            rep_s: d.rep_s,
            predictor_hidden: d.predictor_hidden,
            stats_hidden: d.stats_hidden,
        }
    }
}

impl ModelSection {
    pub fn for_task(&self, task: &SyntheticTaskSpec) -> ModelSpec {
        ModelSpec {
            input_dim: task.input_dim(),
            hidden: self.hidden.clone(),
            rep_c: self.rep_c,
            rep_s: self.rep_s,
            predictor_hidden: self.predictor_hidden.clone(),
            n_classes: task.n_classes,
            stats_hidden: self.stats_hidden,
        }
    }
}

/// One compared configuration. `task` and `federation` hold keys that
/// override the shared sections for this arm only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmSpec {
    #[serde(default)]
    pub name: Option<String>,
    pub algorithm: Algorithm,
    #[serde(default)]
    pub task: toml::Table,
    #[serde(default)]
    pub federation: toml::Table,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub task: SyntheticTaskSpec,
    pub model: ModelSection,
    pub federation: FederationConfig,
    pub convex: ConvexSpec,
    pub arm: Vec<ArmSpec>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Expands the scenario into concrete arms and validates every one.
    pub fn plan(&self) -> Result<Plan> {
        let seeds = &self.experiment.seeds;
        if seeds.is_empty() {
            return Err(Error::Config("experiment.seeds must not be empty".into()));
        }
        if seeds.iter().collect::<BTreeSet<_>>().len() != seeds.len() {
            return Err(Error::Config("experiment.seeds must be distinct".into()));
        }
        let scenario = self.experiment.scenario;
        if scenario == Scenario::ConvexHarness {
            self.convex.validate()?;
            return Ok(Plan {
                scenario,
                seeds: seeds.clone(),
                arms: vec![],
            });
        }
        let specs: Vec<ArmSpec> = if self.arm.is_empty() {
            scenario
                .default_arms()
                .iter()
                .map(|&algorithm| ArmSpec {
                    name: None,
                    algorithm,
                    task: toml::Table::new(),
                    federation: toml::Table::new(),
                })
                .collect()
        } else {
            self.arm.clone()
        };
        if specs.is_empty() {
            return Err(Error::Config("scenario `custom` needs at least one [[arm]]".into()));
        }
        let mut arms = Vec::new();
        for spec in &specs {
            let name = spec.name.clone().unwrap_or_else(|| spec.algorithm.name().to_string());
            let task: SyntheticTaskSpec = overlay(&self.task, &spec.task, &name, "task")?;
            let mut federation: FederationConfig = overlay(&self.federation, &spec.federation, &name, "federation")?;
            federation.algorithm = spec.algorithm;
            if scenario == Scenario::Clarification {
                let flat = SyntheticTaskSpec { rho: 0.0, ..task.clone() };
                arms.push(PlannedArm::new(format!("{name}-skew"), task, federation.clone(), &self.model)?);
                arms.push(PlannedArm::new(format!("{name}-noskew"), flat, federation, &self.model)?);
            } else {
                arms.push(PlannedArm::new(name, task, federation, &self.model)?);
            }
        }
        let mut seen = BTreeSet::new();
        for a in &arms {
            if !seen.insert(a.name.as_str()) {
                return Err(Error::Config(format!("duplicate arm name `{}`", a.name)));
            }
        }
        Ok(Plan {
            scenario,
            seeds: seeds.clone(),
            arms,
        })
    }
}

fn overlay<T: Serialize + DeserializeOwned>(base: &T, over: &toml::Table, arm: &str, section: &str) -> Result<T> {
    let mut table = toml::Table::try_from(base).map_err(|e| Error::Config(e.to_string()))?;
    for (k, v) in over {
        table.insert(k.clone(), v.clone());
    }
    table
        .try_into()
        .map_err(|e| Error::Config(format!("arm `{arm}`, {section} override: {e}")))
}

fn message(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

/// A fully resolved arm; the seed is applied per run.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannedArm {
    pub name: String,
    pub task: SyntheticTaskSpec,
    pub federation: FederationConfig,
    pub model: ModelSpec,
}

impl PlannedArm {
    fn new(name: String, task: SyntheticTaskSpec, federation: FederationConfig, model: &ModelSection) -> Result<Self> {
        if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
            return Err(Error::Config(format!(
                "arm name `{name}` may only use letters, digits, `-` and `_`"
            )));
        }
        let ctx = |e: Error| Error::Config(format!("arm `{name}`: {}", message(e)));
        task.validate().map_err(ctx)?;
        federation.validate(task.n_clients).map_err(ctx)?;
        let model = model.for_task(&task);
        TwoBranchArch::new(model.clone()).map_err(ctx)?;
        Ok(Self {
            name,
            task,
            federation,
            model,
        })
    }

    /// Task and federation settings for one seed.
    pub fn seeded(&self, seed: u64) -> (SyntheticTaskSpec, FederationConfig) {
        let task = SyntheticTaskSpec {
            seed,
            ..self.task.clone()
        };
        let federation = FederationConfig {
            seed,
            ..self.federation.clone()
        };
        (task, federation)
    }

    /// Runs this arm for one seed, handing every record to `sink` as it is produced.
    pub fn run(
        &self,
        seed: u64,
        exec: Execution,
        mut sink: impl FnMut(&crate::federation::RoundRecord) -> Result<()>,
    ) -> Result<RunSummary> {
        let (task, cfg) = self.seeded(seed);
        let data = generate_federation_data(&task)?;
        let mut fed = Federation::new(cfg, self.model.clone(), data, exec)?;
        let mut records = Vec::new();
        while !fed.is_finished() {
            let rec = fed.run_round(&mut NoObserver)?;
            sink(&rec)?;
            records.push(rec);
        }
        RunSummary::from_records(&self.name, seed, &records)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub scenario: Scenario,
    pub seeds: Vec<u64>,
    pub arms: Vec<PlannedArm>,
}

impl Plan {
    /// Keeps only the named arms, in plan order.
    pub fn select_arms(&mut self, names: &[String]) -> Result<()> {
        for n in names {
            if !self.arms.iter().any(|a| &a.name == n) {
                let known: Vec<&str> = self.arms.iter().map(|a| a.name.as_str()).collect();
                return Err(Error::Config(format!("unknown arm `{n}`; plan has {known:?}")));
            }
        }
        self.arms.retain(|a| names.contains(&a.name));
        Ok(())
    }

    pub fn set_seeds(&mut self, seeds: Vec<u64>) -> Result<()> {
        if seeds.is_empty() || seeds.iter().collect::<BTreeSet<_>>().len() != seeds.len() {
            return Err(Error::Config("seeds must be non-empty and distinct".into()));
        }
        self.seeds = seeds;
        Ok(())
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: String,
    pub algorithm: String,
    pub median_final_acc: f64,
    pub median_best_acc: f64,
    pub runs: Vec<RunSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkewDelta {
    pub arm: String,
    pub skew_final_acc: f64,
    pub noskew_final_acc: f64,
    /// `noskew - skew`, in accuracy points.
    pub degradation_points: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvexSummary {
    pub seed: u64,
    pub rounds: usize,
    pub final_grad_norm: f64,
    pub decrease_fraction: f64,
    pub cesaro_slope: f64,
    pub non_increasing_after_burn_in: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub scenario: Scenario,
    pub seeds: Vec<u64>,
    pub config: ExperimentConfig,
    pub arms: Vec<ArmSummary>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub skew_deltas: Vec<SkewDelta>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub convex: Vec<ConvexSummary>,
}

pub fn metrics_path(out: &Path, arm: &str, seed: u64) -> PathBuf {
    out.join(format!("metrics_{arm}_{seed}.csv"))
}

/// Burn-in rounds before the windowed gradient-norm mean must stop rising.
pub const BURN_IN: usize = 5;

/// Runs every arm for every seed, writing `metrics_<arm>_<seed>.csv`,
/// `summary.json` and `curves.svg` into `out`. Files already written stay
/// in place if a later run fails.
pub fn run_experiment(config: &ExperimentConfig, plan: &Plan, out: &Path, exec: Execution) -> Result<ExperimentSummary> {
    std::fs::create_dir_all(out)?;
    let mut summary = ExperimentSummary {
        scenario: plan.scenario,
        seeds: plan.seeds.clone(),
        config: config.clone(),
        arms: vec![],
        skew_deltas: vec![],
        convex: vec![],
    };
    let svg = if plan.scenario == Scenario::ConvexHarness {
        let mut panels = [
            Panel::new("objective", "round", "f(w_c)"),
            Panel::new("gradient norm", "round", "log10 |grad f|"),
        ];
        for &seed in &plan.seeds {
            let spec = ConvexSpec {
                seed,
                ..config.convex.clone()
            };
            let run = ConvexHarness::new(spec)?.run()?;
            let path = metrics_path(out, "convex", seed);
            let mut w = csv::Writer::from_writer(BufWriter::new(File::create(&path)?));
            w.write_record(["round", "f", "grad_norm_f"])?;
            for p in run.series.points() {
                w.write_record([p.round.to_string(), p.f.to_string(), p.grad_f_norm.to_string()])?;
            }
            w.flush()?;
            let report = expected_decrease_check(&run.series, BURN_IN)?;
            let pts = run.series.points();
            panels[0].series.push(Series {
                label: format!("seed {seed}"),
                points: pts.iter().map(|p| (p.round as f64, p.f)).collect(),
            });
            panels[1].series.push(Series {
                label: format!("seed {seed}"),
                points: pts.iter().map(|p| (p.round as f64, p.grad_f_norm.max(1e-300).log10())).collect(),
            });
            summary.convex.push(ConvexSummary {
                seed,
                rounds: pts.len() - 1,
                final_grad_norm: run.final_grad_norm(),
                decrease_fraction: report.decrease_fraction,
                cesaro_slope: report.cesaro_slope,
                non_increasing_after_burn_in: report.non_increasing_from(BURN_IN),
            });
        }
        render_svg(&panels)?
    } else {
        let mut groups = Vec::new();
        for arm in &plan.arms {
            let mut runs = Vec::new();
            let mut paths = Vec::new();
            for &seed in &plan.seeds {
                let path = metrics_path(out, &arm.name, seed);
                let mut writer = MetricsWriter::new(BufWriter::new(File::create(&path)?))?;
                log::info!("arm {} seed {seed}: {} rounds", arm.name, arm.federation.rounds);
                let run = arm.run(seed, exec, |r| writer.write(r))?;
                log::info!("arm {} seed {seed}: final accuracy {:.4}", arm.name, run.final_acc);
                runs.push(run);
                paths.push(path);
            }
            let finals: Vec<f64> = runs.iter().map(|r| r.final_acc).collect();
            let bests: Vec<f64> = runs.iter().map(|r| r.best_acc).collect();
            summary.arms.push(ArmSummary {
                arm: arm.name.clone(),
                algorithm: arm.federation.algorithm.name().to_string(),
                median_final_acc: median(&finals),
                median_best_acc: median(&bests),
                runs,
            });
            groups.push((arm.name.clone(), paths));
        }
        summary.skew_deltas = skew_deltas(&summary.arms);
        emit_plot_from_csv(&groups)?
    };
    serde_json::to_writer_pretty(BufWriter::new(File::create(out.join("summary.json"))?), &summary)?;
    std::fs::write(out.join("curves.svg"), svg)?;
    Ok(summary)
}

fn skew_deltas(arms: &[ArmSummary]) -> Vec<SkewDelta> {
    arms.iter()
        .filter_map(|a| {
            let base = a.arm.strip_suffix("-skew")?;
            let off = arms.iter().find(|b| b.arm == format!("{base}-noskew"))?;
            Some(SkewDelta {
                arm: base.to_string(),
                skew_final_acc: a.median_final_acc,
                noskew_final_acc: off.median_final_acc,
                degradation_points: 100.0 * (off.median_final_acc - a.median_final_acc),
            })
        })
        .collect()
}
