//! Joint training of the shared lifting and the per-task Koopman operators
//! against the multi-step prediction loss.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::{ByteReader, ByteWriter};
use crate::data::{MetaDataset, NormStats, Split, Window};
use crate::error::{shape_err, MakoError, Result};
use crate::network::{Activation, AdamConfig, AdamState, MlpGrads, MlpParams, Moments};
use crate::seed::derive_seed;

const MODEL_MAGIC: &[u8; 8] = b"MAKOMODL";
pub const MODEL_VERSION: u32 = 1;

/// Lifted linear model of one task: `g+ = A g + B u`, `x = C g`.
#[derive(Clone, Debug, PartialEq)]
pub struct KoopmanOps {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub task_index: usize,
}

impl KoopmanOps {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, task_index: usize) -> Result<Self> {
        let h = a.nrows();
        if a.ncols() != h || b.nrows() != h || c.ncols() != h {
            return Err(shape_err(
                "koopman_ops",
                format!("A {h}x{h}, B {h}xm, C nx{h}"),
                format!("A {:?}, B {:?}, C {:?}", a.shape(), b.shape(), c.shape()),
            ));
        }
        Ok(Self { a, b, c, task_index })
    }

    pub fn obs_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn state_dim(&self) -> usize {
        self.c.nrows()
    }

    pub fn is_finite(&self) -> bool {
        self.a.iter().chain(self.b.iter()).chain(self.c.iter()).all(|v| v.is_finite())
    }
}

/// Predicted states `C g_1, ..., C g_H` of the lifted recursion started
/// from `g0` under `u_seq`.
pub fn rollout_predict(ops: &KoopmanOps, g0: &DVector<f64>, u_seq: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
    if g0.len() != ops.obs_dim() {
        return Err(shape_err("rollout_predict", ops.obs_dim(), g0.len()));
    }
    let mut g = g0.clone();
    let mut out = Vec::with_capacity(u_seq.len());
    for u in u_seq {
        if u.len() != ops.input_dim() {
            return Err(shape_err("rollout_predict input", ops.input_dim(), u.len()));
        }
        g = &ops.a * &g + &ops.b * u;
        out.push(&ops.c * &g);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MakoModel {
    pub theta: MlpParams,
    pub ops: Vec<KoopmanOps>,
    pub norm: NormStats,
    pub horizon: usize,
    pub seed: u64,
}

impl MakoModel {
    pub fn obs_dim(&self) -> usize {
        self.theta.output_dim()
    }

    pub fn state_dim(&self) -> usize {
        self.theta.input_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.norm.input_dim()
    }

    /// Lift of a normalized state.
    pub fn lift(&self, x_norm: &[f64]) -> Result<DVector<f64>> {
        self.theta.forward(x_norm)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(MODEL_MAGIC);
        w.u32(MODEL_VERSION);
        w.u64(self.horizon as u64);
        w.u64(self.seed);
        self.theta.write_to(&mut w);
        let (n, m) = (self.norm.state_dim(), self.norm.input_dim());
        w.u64(n as u64);
        w.u64(m as u64);
        w.f64s(&self.norm.state_mean);
        w.f64s(&self.norm.state_std);
        w.f64s(&self.norm.input_mean);
        w.f64s(&self.norm.input_std);
        w.u64(self.ops.len() as u64);
        w.u64(self.obs_dim() as u64);
        for op in &self.ops {
            w.u64(op.task_index as u64);
            w.f64s(op.a.as_slice());
            w.f64s(op.b.as_slice());
            w.f64s(op.c.as_slice());
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(MODEL_MAGIC)?;
        let version = r.u32()?;
        if version != MODEL_VERSION {
            return Err(MakoError::Format(format!(
                "model version {version}, expected {MODEL_VERSION}"
            )));
        }
        let horizon = r.usize()?;
        let seed = r.u64()?;
        let theta = MlpParams::read_from(&mut r)?;
        let (n, m) = (r.usize()?, r.usize()?);
        if n != theta.input_dim() {
            return Err(MakoError::Format("norm stats do not match the network".into()));
        }
        let norm = NormStats {
            state_mean: r.f64s(n)?,
            state_std: r.f64s(n)?,
            input_mean: r.f64s(m)?,
            input_std: r.f64s(m)?,
        };
        let count = r.usize()?;
        let h = r.usize()?;
        if h != theta.output_dim() {
            return Err(MakoError::Format("operator size does not match the network".into()));
        }
        let mut ops = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let task_index = r.usize()?;
            let a = DMatrix::from_vec(h, h, r.f64s(h * h)?);
            let b = DMatrix::from_vec(h, m, r.f64s(h * m)?);
            let c = DMatrix::from_vec(n, h, r.f64s(n * h)?);
            ops.push(KoopmanOps { a, b, c, task_index });
        }
        r.expect_end()?;
        Ok(Self {
            theta,
            ops,
            norm,
            horizon,
            seed,
        })
    }
}

/// Windows of one task, stacked column-wise.
#[derive(Clone, Debug)]
pub struct TaskBatch {
    pub task: usize,
    /// Anchor states, `n × b`.
    pub anchors: DMatrix<f64>,
    /// `inputs[t]` is `u_{k+t}` for every window, `m × b`.
    pub inputs: Vec<DMatrix<f64>>,
    /// `targets[t]` is `x_{k+t+1}`, `n × b`.
    pub targets: Vec<DMatrix<f64>>,
}

/// A minibatch of anchored windows grouped by task. Each sample carries the
/// split of the episode it came from.
#[derive(Clone, Debug)]
pub struct Batch {
    pub groups: Vec<TaskBatch>,
    pub splits: Vec<Split>,
    pub horizon: usize,
}

impl Batch {
    /// Gathers `windows` from a normalized dataset.
    pub fn gather(meta: &MetaDataset, windows: &[Window], horizon: usize) -> Result<Self> {
        let (n, m) = (meta.state_dim(), meta.input_dim());
        let mut by_task: Vec<Vec<&Window>> = vec![Vec::new(); meta.num_tasks()];
        for w in windows {
            let ep = meta
                .subdatasets
                .get(w.task)
                .and_then(|s| s.episodes.get(w.episode))
                .ok_or_else(|| MakoError::InvalidArgument(format!("no episode for {w:?}")))?;
            if !ep.window_valid(w.start, horizon) {
                return Err(MakoError::InvalidArgument(format!(
                    "window {w:?} crosses an episode boundary"
                )));
            }
            by_task[w.task].push(w);
        }
        let mut groups = Vec::new();
        for (task, ws) in by_task.into_iter().enumerate() {
            if ws.is_empty() {
                continue;
            }
            let b = ws.len();
            let eps = &meta.subdatasets[task].episodes;
            let anchors = DMatrix::from_fn(n, b, |r, j| eps[ws[j].episode].state(ws[j].start)[r]);
            let inputs = (0..horizon)
                .map(|t| DMatrix::from_fn(m, b, |r, j| eps[ws[j].episode].input(ws[j].start + t)[r]))
                .collect();
            let targets = (0..horizon)
                .map(|t| {
                    DMatrix::from_fn(n, b, |r, j| eps[ws[j].episode].state(ws[j].start + t + 1)[r])
                })
                .collect();
            groups.push(TaskBatch {
                task,
                anchors,
                inputs,
                targets,
            });
        }
        Ok(Self {
            groups,
            splits: windows.iter().map(|w| w.split).collect(),
            horizon,
        })
    }

    pub fn len(&self) -> usize {
        self.groups.iter().map(|g| g.anchors.ncols()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpsGrads {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
}

impl OpsGrads {
    fn zeros_like(op: &KoopmanOps) -> Self {
        Self {
            a: DMatrix::zeros(op.a.nrows(), op.a.ncols()),
            b: DMatrix::zeros(op.b.nrows(), op.b.ncols()),
            c: DMatrix::zeros(op.c.nrows(), op.c.ncols()),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.a.amax().max(self.b.amax()).max(self.c.amax())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads {
    pub theta: MlpGrads,
    /// One entry per task; zero for tasks absent from the batch.
    pub ops: Vec<OpsGrads>,
}

struct GroupResult {
    task: usize,
    sq_err: f64,
    ops: OpsGrads,
    theta: MlpGrads,
}

/// Mean over windows and steps of `||x_{k+t} - C g_{k+t|k}||^2`, plus
/// `l2 ||theta||^2`, with exact gradients for the network and for every
/// task's operators.
pub fn meta_loss_and_grads(model: &MakoModel, batch: &Batch, l2: f64) -> Result<(f64, ModelGrads)> {
    let total = batch.len();
    if total == 0 {
        return Err(MakoError::InvalidArgument("empty batch".into()));
    }
    let horizon = batch.horizon;
    let scale = 1.0 / (total * horizon) as f64;

    let results: Vec<GroupResult> = batch
        .groups
        .par_iter()
        .map(|group| group_loss_and_grads(model, group, horizon, scale))
        .collect::<Result<_>>()?;

    let mut theta = MlpGrads::zeros_like(&model.theta);
    let mut ops: Vec<OpsGrads> = model.ops.iter().map(OpsGrads::zeros_like).collect();
    let mut sq_err = 0.0;
    for r in results {
        sq_err += r.sq_err;
        for (acc, g) in theta.layers.iter_mut().zip(&r.theta.layers) {
            acc.weight += &g.weight;
            acc.bias += &g.bias;
        }
        ops[r.task] = r.ops;
    }
    let mut loss = sq_err * scale;
    if l2 > 0.0 {
        loss += l2 * model.theta.squared_norm();
        theta.add_scaled_params(&model.theta, 2.0 * l2);
    }
    Ok((loss, ModelGrads { theta, ops }))
}

fn group_loss_and_grads(
    model: &MakoModel,
    group: &TaskBatch,
    horizon: usize,
    scale: f64,
) -> Result<GroupResult> {
    let op = model
        .ops
        .get(group.task)
        .ok_or_else(|| MakoError::InvalidArgument(format!("no operators for task {}", group.task)))?;
    let cache = model.theta.forward_batch(&group.anchors)?;

    // forward recursion, keeping g_0..g_H
    let mut gs = Vec::with_capacity(horizon + 1);
    gs.push(cache.output.clone());
    let mut errs = Vec::with_capacity(horizon);
    let mut sq_err = 0.0;
    for t in 0..horizon {
        let g = &op.a * &gs[t] + &op.b * &group.inputs[t];
        let e = &op.c * &g - &group.targets[t];
        sq_err += e.norm_squared();
        errs.push(e);
        gs.push(g);
    }

    // adjoint recursion
    let mut grads = OpsGrads::zeros_like(op);
    let mut lam: Option<DMatrix<f64>> = None;
    for t in (1..=horizon).rev() {
        let de = &errs[t - 1] * (2.0 * scale);
        grads.c += &de * gs[t].transpose();
        let mut l = op.c.transpose() * &de;
        if let Some(next) = &lam {
            l += op.a.transpose() * next;
        }
        grads.a += &l * gs[t - 1].transpose();
        grads.b += &l * group.inputs[t - 1].transpose();
        lam = Some(l);
    }
    let upstream = match &lam {
        Some(l) => op.a.transpose() * l,
        None => DMatrix::zeros(op.obs_dim(), group.anchors.ncols()),
    };
    let (theta, _) = model.theta.backward_batch(&cache, &upstream)?;
    Ok(GroupResult {
        task: group.task,
        sq_err,
        ops: grads,
        theta,
    })
}

/// Sum of squared multi-step errors over a batch, forward pass only.
fn batch_squared_error(model: &MakoModel, batch: &Batch) -> Result<f64> {
    let parts: Vec<f64> = batch
        .groups
        .par_iter()
        .map(|group| {
            let op = &model.ops[group.task];
            let mut g = model.theta.forward_batch(&group.anchors)?.output;
            let mut acc = 0.0;
            for t in 0..batch.horizon {
                g = &op.a * &g + &op.b * &group.inputs[t];
                acc += (&op.c * &g - &group.targets[t]).norm_squared();
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    Ok(parts.iter().sum())
}

/// Mean `H`-step squared prediction error over every anchored window of
/// `split` (normalized units). Multiply by `H` for the summed-over-steps
/// convention.
pub fn eval_prediction_error(model: &MakoModel, meta: &MetaDataset, split: Split) -> Result<f64> {
    let data = if meta.normalized { None } else { Some(meta.normalized()) };
    let meta = data.as_ref().unwrap_or(meta);
    let windows = meta.windows(model.horizon, split);
    if windows.is_empty() {
        return Err(MakoError::InvalidArgument(format!(
            "no {} windows of length {}",
            split.name(),
            model.horizon
        )));
    }
    let mut total = 0.0;
    for chunk in windows.chunks(4096) {
        let batch = Batch::gather(meta, chunk, model.horizon)?;
        total += batch_squared_error(model, &batch)?;
    }
    Ok(total / (windows.len() * model.horizon) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputInit {
    /// Least-squares fit of `x` on `psi(x)` over a warm-up sample.
    LeastSquares,
    Zero,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub horizon: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub epochs: usize,
    pub hidden: Vec<usize>,
    pub obs_dim: usize,
    pub activation: Activation,
    pub seed: u64,
    pub output_init: OutputInit,
    pub warmup_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            horizon: 16,
            batch_size: 128,
            learning_rate: 1e-4,
            l2: 1e-3,
            epochs: 400,
            hidden: vec![128, 128],
            obs_dim: 128,
            activation: Activation::Relu,
            seed: 0,
            output_init: OutputInit::LeastSquares,
            warmup_samples: 1024,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: f64,
    pub validation: f64,
    pub test: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    /// Epoch at which a non-finite loss stopped training.
    pub aborted_at: Option<usize>,
}

pub const TRAIN_CSV_HEADER: &str = "# mako epoch-curves v1";

impl TrainReport {
    /// Error columns only; the wall-clock column varies run to run.
    pub fn errors(&self) -> Vec<[f64; 3]> {
        self.epochs
            .iter()
            .map(|e| [e.train, e.validation, e.test])
            .collect()
    }

    pub fn best_validation(&self) -> Option<f64> {
        self.epochs.iter().map(|e| e.validation).reduce(f64::min)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{TRAIN_CSV_HEADER}")?;
        writeln!(out, "epoch,train,validation,test,seconds")?;
        for e in &self.epochs {
            writeln!(
                out,
                "{},{:e},{:e},{:e},{:.6}",
                e.epoch, e.train, e.validation, e.test, e.seconds
            )?;
        }
        Ok(())
    }
}

/// Operators before training: `A = I`, `B = 0`, `C` per `init`.
pub fn initial_operators(
    theta: &MlpParams,
    meta: &MetaDataset,
    init: OutputInit,
    warmup: usize,
) -> Result<Vec<KoopmanOps>> {
    let (n, m, h) = (meta.state_dim(), meta.input_dim(), theta.output_dim());
    let c = match init {
        OutputInit::Zero => DMatrix::zeros(n, h),
        OutputInit::LeastSquares => {
            let states: Vec<&[f64]> = meta
                .episodes_in(Split::Train)
                .flat_map(|(_, _, ep)| ep.states.chunks_exact(n))
                .collect();
            let stride = (states.len() / warmup.max(1)).max(1);
            let picked: Vec<&[f64]> = states.iter().step_by(stride).take(warmup).copied().collect();
            let x = DMatrix::from_fn(n, picked.len(), |r, j| picked[j][r]);
            let g = theta.forward_batch(&x)?.output;
            // ridge-regularized normal equations: C (G G^T + eps I) = X G^T
            let mut gram = &g * g.transpose();
            let ridge = 1e-6 * (gram.trace() / h as f64).max(1e-12);
            for i in 0..h {
                gram[(i, i)] += ridge;
            }
            let rhs = &g * x.transpose();
            let sol = gram
                .cholesky()
                .ok_or(MakoError::NonFinite("warm-up gram matrix"))?
                .solve(&rhs);
            sol.transpose()
        }
    };
    (0..meta.num_tasks())
        .map(|i| KoopmanOps::new(DMatrix::identity(h, h), DMatrix::zeros(h, m), c.clone(), i))
        .collect()
}

struct OpsMoments {
    a: Moments,
    b: Moments,
    c: Moments,
}

/// Meta-training loop: shuffled minibatches of anchored training windows,
/// one Adam instance over the network and every task's operators, with
/// the best-validation model retained.
pub fn train(meta: &MetaDataset, cfg: &TrainConfig) -> Result<(MakoModel, TrainReport)> {
    let data = meta.normalized();
    let meta = &data;
    let n = meta.state_dim();
    let mut sizes = vec![n];
    sizes.extend(&cfg.hidden);
    sizes.push(cfg.obs_dim);
    let theta = MlpParams::init(&sizes, cfg.activation, derive_seed(cfg.seed, &[0x1417]))?;
    let ops = initial_operators(&theta, meta, cfg.output_init, cfg.warmup_samples)?;
    let mut model = MakoModel {
        theta,
        ops,
        norm: meta.norm.clone(),
        horizon: cfg.horizon,
        seed: cfg.seed,
    };

    let mut windows = meta.windows(cfg.horizon, Split::Train);
    if windows.is_empty() {
        return Err(MakoError::InvalidArgument(format!(
            "no training windows of length {}",
            cfg.horizon
        )));
    }
    let has_val = !meta.windows(cfg.horizon, Split::Validation).is_empty();
    let has_test = !meta.windows(cfg.horizon, Split::Test).is_empty();
    info!(
        "training on {} windows from {} tasks, {} network parameters",
        windows.len(),
        meta.num_tasks(),
        model.theta.num_params()
    );

    let adam_cfg = AdamConfig::default();
    let mut theta_opt = AdamState::new(&model.theta);
    let mut ops_opt: Vec<OpsMoments> = model
        .ops
        .iter()
        .map(|op| OpsMoments {
            a: Moments::zeros(op.a.len()),
            b: Moments::zeros(op.b.len()),
            c: Moments::zeros(op.c.len()),
        })
        .collect();

    let mut report = TrainReport::default();
    let mut best: Option<(f64, MakoModel)> = None;
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0x5417, epoch as u64]));
        windows.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut weight = 0usize;
        let mut failed = false;
        for chunk in windows.chunks(cfg.batch_size.max(1)) {
            let batch = Batch::gather(meta, chunk, cfg.horizon)?;
            assert!(
                batch.splits.iter().all(|s| *s == Split::Train),
                "non-training window in a gradient batch"
            );
            let (loss, grads) = meta_loss_and_grads(&model, &batch, cfg.l2)?;
            if !loss.is_finite() || !grads.theta.is_finite() {
                failed = true;
                break;
            }
            let data_loss = loss - cfg.l2 * model.theta.squared_norm();
            loss_sum += data_loss * chunk.len() as f64;
            weight += chunk.len();

            // the L2 term is already inside the network gradient
            theta_opt.apply(&mut model.theta, &grads.theta, cfg.learning_rate, 0.0)?;
            let step = theta_opt.step;
            let touched: Vec<usize> = batch.groups.iter().map(|g| g.task).collect();
            for task in touched {
                let (op, g, mo) = (&mut model.ops[task], &grads.ops[task], &mut ops_opt[task]);
                mo.a.update(&adam_cfg, step, cfg.learning_rate, 0.0, op.a.as_mut_slice(), g.a.as_slice());
                mo.b.update(&adam_cfg, step, cfg.learning_rate, 0.0, op.b.as_mut_slice(), g.b.as_slice());
                mo.c.update(&adam_cfg, step, cfg.learning_rate, 0.0, op.c.as_mut_slice(), g.c.as_slice());
            }
        }
        if failed {
            warn!("non-finite loss in epoch {epoch}; keeping the last good checkpoint");
            report.aborted_at = Some(epoch);
            break;
        }
        let validation = if has_val {
            eval_prediction_error(&model, meta, Split::Validation)?
        } else {
            f64::NAN
        };
        let test = if has_test {
            eval_prediction_error(&model, meta, Split::Test)?
        } else {
            f64::NAN
        };
        let record = EpochRecord {
            epoch,
            train: loss_sum / weight.max(1) as f64,
            validation,
            test,
            seconds: start.elapsed().as_secs_f64(),
        };
        info!(
            "epoch {epoch}: train {:.3e} validation {:.3e} test {:.3e} ({:.1}s)",
            record.train, record.validation, record.test, record.seconds
        );
        let score = if has_val { validation } else { record.train };
        if best.as_ref().is_none_or(|(b, _)| score < *b) {
            best = Some((score, model.clone()));
            report.best_epoch = Some(epoch);
        }
        report.epochs.push(record);
    }
    let model = best.map(|(_, m)| m).unwrap_or(model);
    Ok((model, report))
}
