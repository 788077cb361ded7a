//! Multi-arm training comparisons on one shared dataset.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feeder::{build_sensitivities, load_feeder, FeederError, FeederModel, SensitivityPair};
use crate::nn::{LossMode, PolicyParams};
use crate::opf::{
    generate_dataset, generate_profiles, read_profiles_csv, Dataset, DatasetError, OperatingCondition,
    ProfileConfig, ProfileError,
};
use crate::risk::Histogram;
use crate::trainer::{evaluate, init_params, train, EvalReport, TrainConfig, TrainError, TrainLog, TrainTotals};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArmSpec {
    pub name: String,
    pub mode: LossMode,
    pub selection_enabled: bool,
}

impl ArmSpec {
    pub fn new(name: &str, mode: LossMode, selection_enabled: bool) -> Self {
        Self {
            name: name.to_string(),
            mode,
            selection_enabled,
        }
    }
}

/// Plain prediction, prediction risk, and prediction risk with batch selection.
pub fn prediction_risk_arms() -> Vec<ArmSpec> {
    vec![
        ArmSpec::new("MSE", LossMode::Mse, false),
        ArmSpec::new("CVaR(qg)", LossMode::CvarQ, false),
        ArmSpec::new("CVaR(qg)+select", LossMode::CvarQ, true),
    ]
}

/// The prediction-risk arms followed by the joint voltage-risk arms.
pub fn voltage_risk_arms() -> Vec<ArmSpec> {
    let mut arms = prediction_risk_arms();
    arms.push(ArmSpec::new("CVaR(qg,dv)", LossMode::CvarQV, false));
    arms.push(ArmSpec::new("CVaR(qg,dv)+select", LossMode::CvarQV, true));
    arms
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileSource {
    Synthetic(ProfileConfig),
    Csv(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub feeder: PathBuf,
    pub profiles: ProfileSource,
    pub train_fraction: f64,
    pub opf_tol: f64,
    /// Shared settings; each arm overrides the mode and selection flag.
    pub train: TrainConfig,
    pub arms: Vec<ArmSpec>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub seed: u64,
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("duplicate arm name {0:?}")]
    DuplicateArm(String),
    #[error("no arms given")]
    NoArms,
    #[error("arm {arm}")]
    Arm {
        arm: String,
        #[source]
        source: TrainError,
    },
    #[error("arms were trained on different feeders")]
    FeederMismatch,
    #[error("cannot build histogram: {0}")]
    Histogram(#[from] crate::risk::RiskError),
    #[error(transparent)]
    Feeder(#[from] FeederError),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("{}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Independent seeds for profile synthesis and training, derived from one
/// experiment seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedPlan {
    pub profiles: u64,
    pub train: u64,
}

impl SeedPlan {
    pub fn expand(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            profiles: rng.next_u64(),
            train: rng.next_u64(),
        }
    }
}

impl ExperimentConfig {
    /// Reads a JSON config; relative paths inside it resolve against the
    /// config file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ExperimentError> {
        let path = path.as_ref();
        let io = |source| ExperimentError::Io {
            path: path.to_path_buf(),
            source,
        };
        let text = std::fs::read_to_string(path).map_err(io)?;
        let mut cfg: Self = serde_json::from_str(&text).map_err(|e| io(e.into()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.feeder = base.join(&cfg.feeder);
        if let ProfileSource::Csv(p) = &mut cfg.profiles {
            *p = base.join(&*p);
        }
        Ok(cfg)
    }

    /// Training settings with the seed taken from the experiment seed plan.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: SeedPlan::expand(self.seed).train,
            ..self.train.clone()
        }
    }

    /// Loads the feeder and builds the labeled dataset every arm shares.
    pub fn prepare(&self) -> Result<(FeederModel, Dataset), ExperimentError> {
        let model = load_feeder(&self.feeder)?;
        let profiles: Vec<OperatingCondition> = match &self.profiles {
            ProfileSource::Synthetic(p) => {
                let cfg = ProfileConfig {
                    seed: SeedPlan::expand(self.seed).profiles,
                    ..p.clone()
                };
                generate_profiles(&model, &cfg)?
            }
            ProfileSource::Csv(path) => {
                let f = std::fs::File::open(path).map_err(|source| ExperimentError::Io {
                    path: path.clone(),
                    source,
                })?;
                read_profiles_csv(&model, std::io::BufReader::new(f))?
            }
        };
        let dataset = generate_dataset(&model, &profiles, self.opf_tol, self.train_fraction)?;
        Ok((model, dataset))
    }

    /// Prepares the data and trains every arm.
    pub fn run(&self) -> Result<ExperimentOutcome, ExperimentError> {
        check_arms(&self.arms)?;
        let (model, dataset) = self.prepare()?;
        let s = build_sensitivities(&model);
        let arms = run_arms(&dataset, &model, &s, &self.train_config(), &self.arms)?;
        Ok(ExperimentOutcome {
            model,
            dataset,
            arms,
        })
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub model: FeederModel,
    pub dataset: Dataset,
    pub arms: Vec<ArmResult>,
}

impl ExperimentOutcome {
    pub fn arm(&self, name: &str) -> Option<&ArmResult> {
        self.arms.iter().find(|a| a.spec.name == name)
    }

    pub fn rows(&self) -> Vec<ComparisonRow> {
        self.arms.iter().map(ComparisonRow::from_result).collect()
    }
}

pub fn check_arms(arms: &[ArmSpec]) -> Result<(), ExperimentError> {
    if arms.is_empty() {
        return Err(ExperimentError::NoArms);
    }
    let mut seen = BTreeSet::new();
    for a in arms {
        if !seen.insert(a.name.as_str()) {
            return Err(ExperimentError::DuplicateArm(a.name.clone()));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmResult {
    pub spec: ArmSpec,
    pub config: TrainConfig,
    pub params: PolicyParams,
    pub log: TrainLog,
    pub eval: EvalReport,
}

pub fn arm_config(base: &TrainConfig, arm: &ArmSpec) -> TrainConfig {
    TrainConfig {
        mode: arm.mode,
        selection_enabled: arm.selection_enabled,
        ..base.clone()
    }
}

/// Trains one arm from the shared seeded initialization and scores it on the
/// test split.
pub fn run_arm(
    dataset: &Dataset,
    model: &FeederModel,
    s: &SensitivityPair,
    base: &TrainConfig,
    arm: &ArmSpec,
) -> Result<ArmResult, ExperimentError> {
    let wrap = |source| ExperimentError::Arm {
        arm: arm.name.clone(),
        source,
    };
    let cfg = arm_config(base, arm);
    let init = init_params(dataset, model, &cfg).map_err(wrap)?;
    let (params, log) = train(dataset, model, s, &init, &cfg).map_err(wrap)?;
    let eval = evaluate(&params, dataset.test(), s, model, cfg.alpha).map_err(wrap)?;
    Ok(ArmResult {
        spec: arm.clone(),
        config: cfg,
        params,
        log,
        eval,
    })
}

pub fn run_arms(
    dataset: &Dataset,
    model: &FeederModel,
    s: &SensitivityPair,
    base: &TrainConfig,
    arms: &[ArmSpec],
) -> Result<Vec<ArmResult>, ExperimentError> {
    check_arms(arms)?;
    arms.iter().map(|a| run_arm(dataset, model, s, base, a)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub arm: String,
    pub epochs: usize,
    pub epoch_time: f64,
    pub total_time: f64,
    pub batches_drawn: usize,
    pub gradient_updates: usize,
    pub qg_error_pct: f64,
    pub max_abs_v: f64,
    pub violating_samples: usize,
    pub node_violations: usize,
    pub voltage_cvar: f64,
}

impl ComparisonRow {
    pub fn new(arm: &str, totals: &TrainTotals, eval: &EvalReport) -> Self {
        Self {
            arm: arm.to_string(),
            epochs: totals.epochs,
            epoch_time: totals.wall_time / totals.epochs.max(1) as f64,
            total_time: totals.wall_time,
            batches_drawn: totals.batches_drawn,
            gradient_updates: totals.gradient_updates,
            qg_error_pct: eval.qg_error_pct,
            max_abs_v: eval.max_abs_v,
            violating_samples: eval.violating_samples,
            node_violations: eval.node_violations,
            voltage_cvar: eval.voltage_risk.cvar,
        }
    }

    pub fn from_result(r: &ArmResult) -> Self {
        Self::new(&r.spec.name, &r.log.totals, &r.eval)
    }
}

const CSV_HEADER: &str = "arm,epochs,epoch_time_s,total_time_s,batches_drawn,gradient_updates,qg_error_pct,max_abs_v,violating_samples,node_violations,voltage_cvar";

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.arm,
            r.epochs,
            r.epoch_time,
            r.total_time,
            r.batches_drawn,
            r.gradient_updates,
            r.qg_error_pct,
            r.max_abs_v,
            r.violating_samples,
            r.node_violations,
            r.voltage_cvar
        );
    }
    out
}

/// Fixed-width text table for the terminal.
pub fn comparison_table(rows: &[ComparisonRow]) -> String {
    let width = rows.iter().map(|r| r.arm.len()).max().unwrap_or(3).max(3);
    let mut out = format!(
        "{:<width$}  {:>9}  {:>9}  {:>8}  {:>8}  {:>8}  {:>8}  {:>6}  {:>8}\n",
        "arm", "epoch[s]", "total[s]", "updates", "drawn", "qg err%", "max|v|", "viol", "CVaR|v|"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:>9.4}  {:>9.3}  {:>8}  {:>8}  {:>8.3}  {:>8.5}  {:>6}  {:>8.5}",
            r.arm,
            r.epoch_time,
            r.total_time,
            r.gradient_updates,
            r.batches_drawn,
            r.qg_error_pct,
            r.max_abs_v,
            r.violating_samples,
            r.voltage_cvar
        );
    }
    out
}

/// Worst-bus deviation histograms on a shared bin grid, one count column per arm.
pub fn deviation_histogram_csv(arms: &[(&str, &EvalReport)], bins: usize) -> Result<String, ExperimentError> {
    let hi = arms
        .iter()
        .flat_map(|(_, e)| e.worst_deviation.iter().copied())
        .fold(0.0, f64::max);
    let hi = if hi > 0.0 { hi } else { 1.0 };
    let hists = arms
        .iter()
        .map(|(_, e)| Histogram::with_range(&e.worst_deviation, bins, 0.0, hi))
        .collect::<Result<Vec<_>, _>>()?;
    let mut out = String::from("bin_lo,bin_hi");
    for (name, _) in arms {
        let _ = write!(out, ",{name}");
    }
    out.push('\n');
    for b in 0..bins {
        let _ = write!(out, "{},{}", hists[0].edges[b], hists[0].edges[b + 1]);
        for h in &hists {
            let _ = write!(out, ",{}", h.counts[b]);
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn node_error_csv(arms: &[(&str, &EvalReport)]) -> String {
    let mut out = String::from("arm,bus,mean_abs_error,std_abs_error\n");
    for (name, e) in arms {
        for n in &e.node_errors {
            let _ = writeln!(out, "{name},{},{},{}", n.bus, n.mean_abs, n.std_abs);
        }
    }
    out
}
