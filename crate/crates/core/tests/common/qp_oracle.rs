//! Random box QPs and an exhaustive active-set oracle.

use super::{random_matrix, rng};
use mako::qp::QpProblem;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

/// Random strictly convex box QP: P = M'M + delta I, bounds around zero so
/// that a mix of free and active coordinates occurs.
pub fn random_qp(seed: u64) -> QpProblem {
    let mut r = rng(seed);
    let n = r.random_range(1..=6);
    let m = random_matrix(n, n, 1.0, &mut r);
    let p = m.transpose() * &m + DMatrix::identity(n, n) * 0.05;
    let q = DVector::from_fn(n, |_, _| r.random_range(-3.0..3.0));
    let lower = DVector::from_fn(n, |_, _| r.random_range(-1.5..0.0));
    let upper = DVector::from_fn(n, |i, _| lower[i] + r.random_range(0.0..2.0));
    QpProblem {
        p,
        q,
        lower,
        upper,
        offset: r.random_range(-1.0..1.0),
    }
}

/// Exhaustive active-set oracle: every coordinate free, at its lower or at
/// its upper bound; each pattern is an equality-constrained solve, and the
/// best feasible candidate is the optimum of a strictly convex problem.
pub fn brute_force(qp: &QpProblem) -> (DVector<f64>, f64) {
    let n = qp.dim();
    let mut best: Option<(DVector<f64>, f64)> = None;
    for code in 0..3usize.pow(n as u32) {
        let mut pattern = Vec::with_capacity(n);
        let mut c = code;
        for _ in 0..n {
            pattern.push(c % 3);
            c /= 3;
        }
        let free: Vec<usize> = (0..n).filter(|&i| pattern[i] == 0).collect();
        let mut z = DVector::from_fn(n, |i, _| match pattern[i] {
            1 => qp.lower[i],
            2 => qp.upper[i],
            _ => 0.0,
        });
        if !free.is_empty() {
            let k = free.len();
            let pff = DMatrix::from_fn(k, k, |a, b| qp.p[(free[a], free[b])]);
            let pz = &qp.p * &z;
            let rhs = DVector::from_fn(k, |a, _| -(qp.q[free[a]] + pz[free[a]]));
            let Some(sol) = pff.lu().solve(&rhs) else { continue };
            for (a, &i) in free.iter().enumerate() {
                z[i] = sol[a];
            }
        }
        if (0..n).any(|i| z[i] < qp.lower[i] - 1e-12 || z[i] > qp.upper[i] + 1e-12) {
            continue;
        }
        let f = qp.objective(&z);
        if best.as_ref().is_none_or(|(_, b)| f < *b) {
            best = Some((z, f));
        }
    }
    best.expect("a vertex of the box is always feasible")
}

