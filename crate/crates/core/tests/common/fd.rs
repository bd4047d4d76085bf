//! Finite-difference oracle for the meta-loss gradients.

use super::{random_matrix, rng};
use mako::data::{NormStats, Split};
use mako::network::{Activation, MlpParams};
use mako::trainer::{meta_loss_and_grads, Batch, KoopmanOps, MakoModel, ModelGrads, TaskBatch};

pub fn tiny_model(seed: u64, n: usize, h: usize, m: usize, tasks: usize) -> MakoModel {
    let mut r = rng(seed);
    let theta = MlpParams::init(&[n, 6, h], Activation::Tanh, seed).unwrap();
    let ops = (0..tasks)
        .map(|i| {
            KoopmanOps::new(
                random_matrix(h, h, 0.6, &mut r),
                random_matrix(h, m, 0.6, &mut r),
                random_matrix(n, h, 0.6, &mut r),
                i,
            )
            .unwrap()
        })
        .collect();
    MakoModel {
        theta,
        ops,
        norm: NormStats::identity(n, m),
        horizon: 2,
        seed,
    }
}

pub fn random_batch(seed: u64, n: usize, m: usize, horizon: usize, per_task: &[usize]) -> Batch {
    let mut r = rng(seed ^ 0xbeef);
    let groups = per_task
        .iter()
        .enumerate()
        .filter(|(_, &b)| b > 0)
        .map(|(task, &b)| TaskBatch {
            task,
            anchors: random_matrix(n, b, 1.0, &mut r),
            inputs: (0..horizon).map(|_| random_matrix(m, b, 1.0, &mut r)).collect(),
            targets: (0..horizon).map(|_| random_matrix(n, b, 1.0, &mut r)).collect(),
        })
        .collect();
    Batch {
        groups,
        splits: vec![Split::Train; per_task.iter().sum()],
        horizon,
    }
}

/// Every scalar parameter of the model as (getter, setter) by flat index.
pub fn param_slices(model: &mut MakoModel) -> Vec<&mut [f64]> {
    let mut out: Vec<&mut [f64]> = Vec::new();
    for layer in &mut model.theta.layers {
        out.push(layer.weight.as_mut_slice());
        out.push(layer.bias.as_mut_slice());
    }
    for op in &mut model.ops {
        out.push(op.a.as_mut_slice());
        out.push(op.b.as_mut_slice());
        out.push(op.c.as_mut_slice());
    }
    out
}

pub fn grad_slices(grads: &ModelGrads) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for layer in &grads.theta.layers {
        out.push(layer.weight.as_slice().to_vec());
        out.push(layer.bias.as_slice().to_vec());
    }
    for op in &grads.ops {
        out.push(op.a.as_slice().to_vec());
        out.push(op.b.as_slice().to_vec());
        out.push(op.c.as_slice().to_vec());
    }
    out
}

/// Largest relative error of the analytic gradient against central
/// differences, per parameter block.
pub fn fd_block_errors(model: &MakoModel, batch: &Batch, l2: f64) -> Vec<f64> {
    let (_, grads) = meta_loss_and_grads(model, batch, l2).unwrap();
    let analytic = grad_slices(&grads);
    let step = 1e-6;
    let blocks = param_slices(&mut model.clone()).len();
    let mut errors = Vec::with_capacity(blocks);
    for block in 0..blocks {
        let len = analytic[block].len();
        let mut fd = vec![0.0; len];
        for (j, slot) in fd.iter_mut().enumerate() {
            let mut plus = model.clone();
            param_slices(&mut plus)[block][j] += step;
            let mut minus = model.clone();
            param_slices(&mut minus)[block][j] -= step;
            let lp = meta_loss_and_grads(&plus, batch, l2).unwrap().0;
            let lm = meta_loss_and_grads(&minus, batch, l2).unwrap().0;
            *slot = (lp - lm) / (2.0 * step);
        }
        let diff: f64 = fd.iter().zip(&analytic[block]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-8);
        errors.push(diff / norm);
    }
    errors
}

