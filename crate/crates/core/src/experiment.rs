//! Configuration, closed-loop episodes and parameter-grid evaluation.

use std::io::Write;
use std::time::Instant;

use log::warn;
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapt::{adapt_step, init_from_meta, AdaptConfig, AdaptMode, DEFAULT_LAMBDA_MAX};
use crate::data::{generate_meta_dataset_with, MetaDataset, TaskSampling};
use crate::error::{MakoError, Result};
use crate::mpc::{MpcConfig, MpcController};
use crate::network::Activation;
use crate::qp::QpSettings;
use crate::seed::derive_seed;
use crate::systems::{param_grid_with, PhysicalConstants, SystemKind, SystemParams};
use crate::trainer::{train, MakoModel, OutputInit, TrainConfig, TrainReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Desk,
    Paper,
}

impl std::str::FromStr for Scale {
    type Err = MakoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Self::Desk),
            "paper" => Ok(Self::Paper),
            other => Err(MakoError::InvalidArgument(format!("unknown scale '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub num_tasks: usize,
    pub samples_per_task: usize,
    pub trajectory_length: usize,
    #[serde(default)]
    pub task_sampling: TaskSampling,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    pub obs_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub horizon: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub epochs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptationSection {
    pub alpha: f64,
    pub mode: AdaptMode,
    pub eps_w: f64,
    pub eps_v: f64,
    pub lambda_max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlSection {
    pub q: Vec<f64>,
    pub r: Vec<f64>,
    pub horizon: usize,
    pub terminal_weight: f64,
    pub penalize_first_move: bool,
    pub solver_tol: f64,
    pub solver_max_iter: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationSection {
    pub episode_length: usize,
    pub grid_size: usize,
    pub include_nominal: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: SystemKind,
    pub scale: Scale,
    pub seed: u64,
    pub data: DataSection,
    pub network: NetworkSection,
    pub training: TrainingSection,
    pub adaptation: AdaptationSection,
    pub control: ControlSection,
    pub evaluation: EvaluationSection,
}

impl ExperimentConfig {
    pub fn defaults(system: SystemKind, scale: Scale) -> Self {
        use SystemKind::*;
        let pick = |c: f64, g: f64, p: f64| match system {
            Cartpole => c,
            Grn => g,
            ReactorSeparator => p,
        };
        let trajectory_length = pick(250.0, 400.0, 500.0) as usize;
        let (alpha, q, r): (f64, Vec<f64>, Vec<f64>) = match system {
            Cartpole => (1.995, vec![0.01, 0.0, 1.0, 0.2], vec![0.01]),
            Grn => (1.1, vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0], vec![0.01; 3]),
            ReactorSeparator => (1.98, vec![1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 0.0], vec![1e-3; 3]),
        };
        let adaptation = AdaptationSection {
            alpha,
            mode: AdaptMode::Nominal,
            eps_w: pick(1e-6, 1e-6, 1e-8),
            eps_v: pick(1e-4, 1e-4, 1e-8),
            lambda_max: DEFAULT_LAMBDA_MAX,
        };
        let control = ControlSection {
            q,
            r,
            horizon: 16,
            terminal_weight: 3.0,
            penalize_first_move: true,
            solver_tol: 1e-6,
            solver_max_iter: 4000,
        };
        let evaluation = EvaluationSection {
            episode_length: trajectory_length,
            grid_size: 9,
            include_nominal: true,
        };
        match scale {
            Scale::Paper => Self {
                system,
                scale,
                seed: 0,
                data: DataSection {
                    num_tasks: pick(10.0, 10.0, 20.0) as usize,
                    samples_per_task: 50_000,
                    trajectory_length,
                    task_sampling: TaskSampling::Iid,
                },
                network: NetworkSection {
                    obs_dim: pick(128.0, 128.0, 256.0) as usize,
                    hidden: vec![128, 128],
                    activation: Activation::Relu,
                },
                training: TrainingSection {
                    horizon: 16,
                    batch_size: 128,
                    learning_rate: 1e-4,
                    l2: 1e-3,
                    epochs: 400,
                },
                adaptation,
                control,
                evaluation,
            },
            Scale::Desk => Self {
                system,
                scale,
                seed: 0,
                data: DataSection {
                    num_tasks: 4,
                    samples_per_task: pick(5000.0, 4800.0, 5000.0) as usize,
                    trajectory_length,
                    task_sampling: TaskSampling::Stratified,
                },
                network: NetworkSection {
                    obs_dim: 32,
                    hidden: vec![128, 128],
                    activation: Activation::Relu,
                },
                training: TrainingSection {
                    horizon: 16,
                    batch_size: 128,
                    learning_rate: 3e-4,
                    l2: 1e-3,
                    epochs: 50,
                },
                adaptation,
                control,
                evaluation,
            },
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| MakoError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a possibly partial config: `system` is required, `scale` comes
    /// from `scale_override` or the file, and every field the file sets
    /// replaces the default of that system and scale.
    pub fn from_toml_layered(text: &str, scale_override: Option<Scale>) -> Result<Self> {
        let cfg_err = |e: &dyn std::fmt::Display| MakoError::Config(e.to_string());
        let mut file: toml::Table = text.parse().map_err(|e| cfg_err(&e))?;
        let system: SystemKind = file
            .get("system")
            .ok_or_else(|| MakoError::Config("missing `system`".into()))?
            .clone()
            .try_into()
            .map_err(|e| cfg_err(&e))?;
        let scale = match (scale_override, file.get("scale")) {
            (Some(s), _) => s,
            (None, Some(v)) => v.clone().try_into().map_err(|e| cfg_err(&e))?,
            (None, None) => return Err(MakoError::Config("missing `scale`".into())),
        };
        file.insert("scale".into(), toml::Value::try_from(scale).map_err(|e| cfg_err(&e))?);
        let mut merged = toml::Table::try_from(Self::defaults(system, scale)).map_err(|e| cfg_err(&e))?;
        merge_tables(&mut merged, file);
        let cfg: Self = toml::Value::Table(merged).try_into().map_err(|e| cfg_err(&e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let (n, m) = (self.system.state_dim(), self.system.input_dim());
        self.mpc_config().validate(n, m)?;
        self.adapt_config().validate()?;
        let bad = |msg: &str| Err(MakoError::Config(msg.to_string()));
        if self.data.num_tasks == 0 || self.data.trajectory_length == 0 {
            return bad("data sizes must be positive");
        }
        if self.data.samples_per_task % self.data.trajectory_length != 0 {
            return bad("samples_per_task must be a multiple of trajectory_length");
        }
        if self.training.horizon == 0 || self.training.batch_size == 0 {
            return bad("horizon and batch size must be positive");
        }
        if !(self.training.learning_rate > 0.0) || !(self.training.l2 >= 0.0) {
            return bad("learning rate must be positive and l2 nonnegative");
        }
        if self.network.obs_dim == 0 || self.network.hidden.contains(&0) {
            return bad("network widths must be positive");
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            horizon: self.training.horizon,
            batch_size: self.training.batch_size,
            learning_rate: self.training.learning_rate,
            l2: self.training.l2,
            epochs: self.training.epochs,
            hidden: self.network.hidden.clone(),
            obs_dim: self.network.obs_dim,
            activation: self.network.activation,
            seed: derive_seed(self.seed, &[0x7a1]),
            output_init: OutputInit::LeastSquares,
            warmup_samples: 1024,
        }
    }

    pub fn adapt_config(&self) -> AdaptConfig {
        self.adapt_config_for(self.adaptation.mode)
    }

    pub fn adapt_config_for(&self, mode: AdaptMode) -> AdaptConfig {
        AdaptConfig {
            alpha: self.adaptation.alpha,
            mode,
            eps_w: self.adaptation.eps_w,
            eps_v: self.adaptation.eps_v,
            lambda_max: self.adaptation.lambda_max,
        }
    }

    pub fn mpc_config(&self) -> MpcConfig {
        MpcConfig {
            horizon: self.control.horizon,
            q: self.control.q.clone(),
            r: self.control.r.clone(),
            terminal_weight: self.control.terminal_weight,
            penalize_first_move: self.control.penalize_first_move,
            solver: QpSettings {
                tol: self.control.solver_tol,
                max_iter: self.control.solver_max_iter,
                ..QpSettings::default()
            },
        }
    }

    pub fn generate_data(&self, constants: &PhysicalConstants) -> Result<MetaDataset> {
        generate_meta_dataset_with(
            constants,
            self.system,
            self.data.num_tasks,
            self.data.samples_per_task,
            self.data.trajectory_length,
            derive_seed(self.seed, &[0xda7a]),
            self.data.task_sampling,
        )
    }

    pub fn train(&self, meta: &MetaDataset) -> Result<(MakoModel, TrainReport)> {
        train(meta, &self.train_config())
    }
}

fn merge_tables(base: &mut toml::Table, over: toml::Table) {
    for (key, value) in over {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub k: usize,
    /// State after applying `u`.
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub tracking_error: f64,
    pub stage_cost: Option<f64>,
    pub solver_iterations: usize,
    pub solver_converged: bool,
    pub lambda: f64,
    pub g_resid_norm: f64,
    pub x_resid_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub params: Vec<f64>,
    pub mode: AdaptMode,
    pub initial_state: Vec<f64>,
    pub steps: Vec<StepRecord>,
    /// Step at which the benchmark's termination rule fired.
    pub terminated_at: Option<usize>,
    /// Step index and message of a simulator or solver failure.
    pub failure: Option<(usize, String)>,
    pub cumulative_error: f64,
    /// Wall time of each controller call; kept apart from the trajectory
    /// since it varies between runs.
    pub solve_seconds: Vec<f64>,
}

impl EpisodeRecord {
    pub fn completed(&self, requested: usize) -> bool {
        self.terminated_at.is_none() && self.failure.is_none() && self.steps.len() == requested
    }

    pub fn mean_solve_seconds(&self) -> f64 {
        if self.solve_seconds.is_empty() {
            return 0.0;
        }
        self.solve_seconds.iter().sum::<f64>() / self.solve_seconds.len() as f64
    }

    pub fn final_state(&self) -> &[f64] {
        self.steps.last().map(|s| s.x.as_slice()).unwrap_or(&self.initial_state)
    }

    pub fn trajectory_eq(&self, other: &Self) -> bool {
        self.params == other.params
            && self.mode == other.mode
            && self.initial_state == other.initial_state
            && self.steps == other.steps
            && self.terminated_at == other.terminated_at
            && self.failure == other.failure
            && self.cumulative_error.to_bits() == other.cumulative_error.to_bits()
    }
}

/// Euclidean norm of the normalized tracking error over the weighted
/// coordinates.
pub fn tracking_error(model: &MakoModel, q: &[f64], x: &[f64], setpoint: &[f64]) -> f64 {
    let xn = model.norm.normalize_state(x);
    let sn = model.norm.normalize_state(setpoint);
    xn.iter()
        .zip(&sn)
        .zip(q)
        .filter(|(_, w)| **w > 0.0)
        .map(|((a, b), _)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt()
}

#[derive(Clone, Debug)]
pub struct ClosedLoopConfig {
    pub mpc: MpcConfig,
    pub adapt: AdaptConfig,
    pub steps: usize,
    pub seed: u64,
}

/// Measure, lift, solve, apply, adapt, for `cfg.steps` steps or until the
/// benchmark terminates or fails. Failures are recorded, not returned.
pub fn run_closed_loop(model: &MakoModel, params: &SystemParams, cfg: &ClosedLoopConfig) -> Result<EpisodeRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let initial_state = params.sample_initial_state(&mut rng);
    run_closed_loop_from(model, params, cfg, initial_state)
}

pub fn run_closed_loop_from(
    model: &MakoModel,
    params: &SystemParams,
    cfg: &ClosedLoopConfig,
    initial_state: Vec<f64>,
) -> Result<EpisodeRecord> {
    cfg.adapt.validate()?;
    cfg.mpc.validate(params.state_dim(), params.input_dim())?;
    let mut ops = init_from_meta(&model.ops)?;
    let mut mpc = MpcController::new(cfg.mpc.clone());
    let setpoint = params.setpoint();
    let (lo, hi) = params.input_bounds();
    let bounds: Vec<(f64, f64)> = lo.iter().copied().zip(hi.iter().copied()).collect();
    let norm = &model.norm;
    let mut record = EpisodeRecord {
        params: params.uncertain.clone(),
        mode: cfg.adapt.mode,
        initial_state: initial_state.clone(),
        steps: Vec::with_capacity(cfg.steps),
        terminated_at: None,
        failure: None,
        cumulative_error: 0.0,
        solve_seconds: Vec::with_capacity(cfg.steps),
    };
    let mut x = initial_state;
    let mut u_prev = params.clamp_input(&norm.input_mean);
    for k in 0..cfg.steps {
        let start = Instant::now();
        let step = match mpc.action(&ops, &model.theta, norm, &x, &u_prev, &setpoint, &bounds) {
            Ok(s) => s,
            Err(e) => {
                record.failure = Some((k, e.to_string()));
                break;
            }
        };
        record.solve_seconds.push(start.elapsed().as_secs_f64());
        let x_next = match params.step(&x, &step.input) {
            Ok(v) => v,
            Err(e) => {
                record.failure = Some((k, e.to_string()));
                break;
            }
        };
        let xn = DVector::from_vec(norm.normalize_state(&x_next));
        let g_next = model.theta.forward(xn.as_slice())?;
        let un = DVector::from_vec(norm.normalize_input(&step.input));
        let adapt = match adapt_step(&mut ops, &step.lifted, &un, &g_next, &xn, &cfg.adapt) {
            Ok(r) => r,
            Err(e) => {
                record.failure = Some((k, e.to_string()));
                break;
            }
        };
        let err = tracking_error(model, &cfg.mpc.q, &x_next, &setpoint);
        record.cumulative_error += err;
        let terminal = params.is_terminal(&x_next);
        record.steps.push(StepRecord {
            k,
            stage_cost: params.stage_cost(&x_next),
            x: x_next.clone(),
            u: step.input.clone(),
            tracking_error: err,
            solver_iterations: step.solution.iterations,
            solver_converged: step.solution.converged,
            lambda: adapt.lambda,
            g_resid_norm: adapt.g_resid_norm,
            x_resid_norm: adapt.x_resid_norm,
        });
        if terminal {
            record.terminated_at = Some(k);
            break;
        }
        x = x_next;
        u_prev = step.input;
    }
    if let Some((k, msg)) = &record.failure {
        warn!("episode {:?} failed at step {k}: {msg}", record.params);
    }
    Ok(record)
}

pub const EPISODE_CSV_HEADER: &str = "# mako episode-trace v1";

pub fn write_episode_csv<W: Write>(rec: &EpisodeRecord, mut out: W) -> std::io::Result<()> {
    writeln!(out, "{EPISODE_CSV_HEADER}")?;
    let n = rec.initial_state.len();
    let m = rec.steps.first().map(|s| s.u.len()).unwrap_or(0);
    let mut cols = vec!["k".to_string()];
    cols.extend((0..n).map(|i| format!("x{i}")));
    cols.extend((0..m).map(|i| format!("u{i}")));
    cols.extend(
        ["tracking_error", "stage_cost", "solver_iterations", "solver_converged", "lambda", "g_resid_norm", "x_resid_norm"]
            .map(String::from),
    );
    writeln!(out, "{}", cols.join(","))?;
    for s in &rec.steps {
        let mut row = vec![s.k.to_string()];
        row.extend(s.x.iter().map(|v| format!("{v:e}")));
        row.extend(s.u.iter().map(|v| format!("{v:e}")));
        row.push(format!("{:e}", s.tracking_error));
        row.push(s.stage_cost.map(|c| format!("{c:e}")).unwrap_or_default());
        row.push(s.solver_iterations.to_string());
        row.push(u8::from(s.solver_converged).to_string());
        row.push(format!("{:e}", s.lambda));
        row.push(format!("{:e}", s.g_resid_norm));
        row.push(format!("{:e}", s.x_resid_norm));
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct GridEntry {
    pub index: usize,
    pub nominal_setting: bool,
    pub params: Vec<f64>,
    /// One record per requested mode, in the order requested.
    pub records: Vec<EpisodeRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: AdaptMode,
    pub mean_cumulative_error: f64,
    pub max_cumulative_error: f64,
    pub stabilized: usize,
    pub episodes: usize,
    pub mean_step_seconds: f64,
}

#[derive(Clone, Debug)]
pub struct GridReport {
    pub kind: SystemKind,
    pub modes: Vec<AdaptMode>,
    pub steps: usize,
    pub entries: Vec<GridEntry>,
}

/// Stabilization for reporting: the episode ran to completion; for the
/// cartpole the final pole angle must also be within 2 degrees.
pub fn stabilized(kind: SystemKind, rec: &EpisodeRecord, steps: usize) -> bool {
    if !rec.completed(steps) {
        return false;
    }
    match kind {
        SystemKind::Cartpole => rec.final_state()[2].abs() < 2f64.to_radians(),
        _ => true,
    }
}

impl GridReport {
    pub fn record(&self, entry: usize, mode: AdaptMode) -> Option<&EpisodeRecord> {
        let slot = self.modes.iter().position(|m| *m == mode)?;
        self.entries.get(entry).and_then(|e| e.records.get(slot))
    }

    /// Aggregates over the grid points, excluding the optional nominal
    /// setting.
    pub fn summary(&self, mode: AdaptMode) -> Option<ModeSummary> {
        let slot = self.modes.iter().position(|m| *m == mode)?;
        let recs: Vec<&EpisodeRecord> = self
            .entries
            .iter()
            .filter(|e| !e.nominal_setting)
            .map(|e| &e.records[slot])
            .collect();
        let count = recs.len().max(1) as f64;
        let mut steps_total = 0usize;
        let mut secs_total = 0.0;
        for r in &recs {
            steps_total += r.solve_seconds.len();
            secs_total += r.solve_seconds.iter().sum::<f64>();
        }
        Some(ModeSummary {
            mode,
            mean_cumulative_error: recs.iter().map(|r| r.cumulative_error).sum::<f64>() / count,
            max_cumulative_error: recs.iter().map(|r| r.cumulative_error).fold(0.0, f64::max),
            stabilized: recs.iter().filter(|r| stabilized(self.kind, r, self.steps)).count(),
            episodes: recs.len(),
            mean_step_seconds: secs_total / steps_total.max(1) as f64,
        })
    }

    /// One row per grid point with the per-mode outcomes side by side.
    pub fn write_summary_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{GRID_SUMMARY_CSV_HEADER}")?;
        let mut cols = vec!["index".to_string(), "nominal_setting".into(), "p0".into(), "p1".into()];
        for m in &self.modes {
            for c in ["cumulative_error", "steps", "terminated_at", "failed", "stabilized"] {
                cols.push(format!("{}_{c}", m.name()));
            }
        }
        if self.modes.len() == 2 {
            cols.push(format!("{}_over_{}", self.modes[1].name(), self.modes[0].name()));
        }
        writeln!(out, "{}", cols.join(","))?;
        for e in &self.entries {
            let mut row = vec![
                e.index.to_string(),
                u8::from(e.nominal_setting).to_string(),
                format!("{:e}", e.params[0]),
                format!("{:e}", e.params[1]),
            ];
            for r in &e.records {
                row.push(format!("{:e}", r.cumulative_error));
                row.push(r.steps.len().to_string());
                row.push(r.terminated_at.map(|k| k.to_string()).unwrap_or_default());
                row.push(u8::from(r.failure.is_some()).to_string());
                row.push(u8::from(stabilized(self.kind, r, self.steps)).to_string());
            }
            if e.records.len() == 2 {
                row.push(format!("{:e}", e.records[1].cumulative_error / e.records[0].cumulative_error));
            }
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }

    /// Per-mode aggregates over the grid points.
    pub fn write_aggregate_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{GRID_AGGREGATE_CSV_HEADER}")?;
        writeln!(out, "mode,episodes,stabilized,mean_cumulative_error,max_cumulative_error")?;
        for m in &self.modes {
            let s = self.summary(*m).expect("mode evaluated");
            writeln!(
                out,
                "{},{},{},{:e},{:e}",
                m.name(),
                s.episodes,
                s.stabilized,
                s.mean_cumulative_error,
                s.max_cumulative_error
            )?;
        }
        Ok(())
    }

    /// Controller wall time per grid point and mode. Unlike the other
    /// outputs this varies between runs.
    pub fn write_timing_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{TIMING_CSV_HEADER}")?;
        writeln!(out, "index,mode,steps,mean_step_seconds,max_step_seconds")?;
        for e in &self.entries {
            for (m, r) in self.modes.iter().zip(&e.records) {
                let max = r.solve_seconds.iter().copied().fold(0.0, f64::max);
                writeln!(
                    out,
                    "{},{},{},{:e},{:e}",
                    e.index,
                    m.name(),
                    r.solve_seconds.len(),
                    r.mean_solve_seconds(),
                    max
                )?;
            }
        }
        Ok(())
    }
}

pub const GRID_SUMMARY_CSV_HEADER: &str = "# mako grid-summary v1";
pub const GRID_AGGREGATE_CSV_HEADER: &str = "# mako grid-aggregate v1";
pub const TIMING_CSV_HEADER: &str = "# mako timing v1";

/// Closed-loop evaluation over the `grid_size`-point parameter grid (plus
/// the nominal setting when configured), one episode per point and mode.
/// Every point of a row starts from the same seeded initial state.
pub fn evaluate_param_grid(
    model: &MakoModel,
    constants: &PhysicalConstants,
    cfg: &ExperimentConfig,
    modes: &[AdaptMode],
) -> Result<GridReport> {
    let kind = cfg.system;
    let mut settings: Vec<(bool, SystemParams)> = param_grid_with(constants, kind, cfg.evaluation.grid_size)?
        .into_iter()
        .map(|p| (false, p))
        .collect();
    if cfg.evaluation.include_nominal {
        let nominal = SystemParams::with_constants(constants.for_kind(kind), kind.nominal_values().to_vec())?;
        settings.push((true, nominal));
    }
    let steps = cfg.evaluation.episode_length;
    let jobs: Vec<(usize, usize)> = (0..settings.len())
        .flat_map(|i| (0..modes.len()).map(move |j| (i, j)))
        .collect();
    let results: Vec<Result<EpisodeRecord>> = jobs
        .par_iter()
        .map(|&(i, j)| {
            let cl = ClosedLoopConfig {
                mpc: cfg.mpc_config(),
                adapt: cfg.adapt_config_for(modes[j]),
                steps,
                seed: derive_seed(cfg.seed, &[0xe5a1, i as u64]),
            };
            run_closed_loop(model, &settings[i].1, &cl)
        })
        .collect();
    let mut entries: Vec<GridEntry> = settings
        .iter()
        .enumerate()
        .map(|(i, (nominal_setting, p))| GridEntry {
            index: i,
            nominal_setting: *nominal_setting,
            params: p.uncertain.clone(),
            records: Vec::with_capacity(modes.len()),
        })
        .collect();
    for (&(i, _), r) in jobs.iter().zip(results) {
        entries[i].records.push(r?);
    }
    Ok(GridReport {
        kind,
        modes: modes.to_vec(),
        steps,
        entries,
    })
}
