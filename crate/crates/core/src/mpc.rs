//! Lifted-space tracking MPC condensed into a box QP over the stacked
//! input sequence `u_k, ..., u_{k+T}`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::adapt::AdaptiveOps;
use crate::data::NormStats;
use crate::error::{shape_err, MakoError, Result};
use crate::network::MlpParams;
use crate::qp::{solve_box_qp, QpProblem, QpSettings, QpSolution};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MpcConfig {
    pub horizon: usize,
    /// Diagonal of the stage weight on the state error.
    pub q: Vec<f64>,
    /// Diagonal of the weight on input increments.
    pub r: Vec<f64>,
    /// Penalty replacing the terminal equality; it acts on the
    /// coordinates with a positive stage weight.
    pub terminal_weight: f64,
    /// Also penalize `u_k - u_prev`.
    pub penalize_first_move: bool,
    pub solver: QpSettings,
}

impl MpcConfig {
    pub fn new(q: Vec<f64>, r: Vec<f64>) -> Self {
        Self {
            horizon: 16,
            q,
            r,
            terminal_weight: 1e4,
            penalize_first_move: false,
            solver: QpSettings::default(),
        }
    }

    pub fn validate(&self, state_dim: usize, input_dim: usize) -> Result<()> {
        if self.q.len() != state_dim {
            return Err(shape_err("Q diagonal", state_dim, self.q.len()));
        }
        if self.r.len() != input_dim {
            return Err(shape_err("R diagonal", input_dim, self.r.len()));
        }
        if self.horizon == 0 {
            return Err(MakoError::InvalidArgument("MPC horizon must be at least 1".into()));
        }
        if self.q.iter().any(|v| !(*v >= 0.0)) || self.r.iter().any(|v| !(*v >= 0.0)) {
            return Err(MakoError::InvalidArgument("Q and R diagonals must be nonnegative".into()));
        }
        if !(self.terminal_weight >= 0.0) {
            return Err(MakoError::InvalidArgument("terminal weight must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Builds the QP whose objective equals the MPC cost of the stacked input
/// sequence. All quantities are in normalized units; `lower`/`upper` are
/// the per-step input bounds.
#[allow(clippy::too_many_arguments)]
pub fn condense_qp(
    ops: &AdaptiveOps,
    g_k: &DVector<f64>,
    x_s: &DVector<f64>,
    u_prev: &DVector<f64>,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
    cfg: &MpcConfig,
) -> Result<QpProblem> {
    let (h, m, n) = (ops.obs_dim(), ops.input_dim(), ops.state_dim());
    cfg.validate(n, m)?;
    if !ops.is_finite() {
        return Err(MakoError::NonFinite("operator estimate"));
    }
    for (name, len, want) in [
        ("observable", g_k.len(), h),
        ("setpoint", x_s.len(), n),
        ("previous input", u_prev.len(), m),
        ("input lower bound", lower.len(), m),
        ("input upper bound", upper.len(), m),
    ] {
        if len != want {
            return Err(shape_err(name, want, len));
        }
    }
    let t_len = cfg.horizon;
    let dim = m * (t_len + 1);
    let (a, b, c) = (ops.a(), ops.b(), &ops.c);

    let stage_w = DVector::from_vec(cfg.q.clone());
    let terminal_w = DVector::from_fn(n, |i, _| if cfg.q[i] > 0.0 { cfg.terminal_weight } else { 0.0 });

    // g_t = free_t + gamma_t z, with gamma_t the input-to-lifted-state map
    let mut free = g_k.clone();
    let mut gamma = DMatrix::<f64>::zeros(h, dim);
    let mut hess = DMatrix::<f64>::zeros(dim, dim);
    let mut lin = DVector::<f64>::zeros(dim);
    let mut offset = 0.0;
    for t in 1..=t_len + 1 {
        free = &a * &free;
        gamma = &a * &gamma;
        let mut block = gamma.columns_mut((t - 1) * m, m);
        block += &b;
        let w = if t <= t_len { &stage_w } else { &terminal_w };
        let cg = c * &gamma;
        let e0 = c * &free - x_s;
        // sum_i w_i (cg_i z + e0_i)^2
        let weighted = DMatrix::from_fn(n, dim, |i, j| w[i] * cg[(i, j)]);
        hess += cg.transpose() * &weighted;
        lin += weighted.transpose() * &e0;
        offset += e0.iter().zip(w.iter()).map(|(e, wi)| wi * e * e).sum::<f64>();
    }

    // input increments u_t - u_{t-1}, t = 1..T, plus optionally u_0 - u_prev
    for t in 1..=t_len {
        for i in 0..m {
            let (cur, prev) = (t * m + i, (t - 1) * m + i);
            let r = cfg.r[i];
            hess[(cur, cur)] += r;
            hess[(prev, prev)] += r;
            hess[(cur, prev)] -= r;
            hess[(prev, cur)] -= r;
        }
    }
    if cfg.penalize_first_move {
        for i in 0..m {
            let r = cfg.r[i];
            hess[(i, i)] += r;
            lin[i] -= r * u_prev[i];
            offset += r * u_prev[i] * u_prev[i];
        }
    }

    // 1/2 z'Pz convention, symmetrized against rounding
    let p = &hess + hess.transpose();
    let lower = DVector::from_fn(dim, |k, _| lower[k % m]);
    let upper = DVector::from_fn(dim, |k, _| upper[k % m]);
    Ok(QpProblem {
        p,
        q: lin * 2.0,
        lower,
        upper,
        offset,
    })
}

#[derive(Clone, Debug)]
pub struct MpcStep {
    /// First input of the optimal sequence, in raw units, clamped to the box.
    pub input: Vec<f64>,
    pub solution: QpSolution,
    /// The lifted state the QP was built around.
    pub lifted: DVector<f64>,
}

/// Receding-horizon controller holding the previous solution for warm
/// starts.
#[derive(Clone, Debug)]
pub struct MpcController {
    pub cfg: MpcConfig,
    warm: Option<DVector<f64>>,
}

impl MpcController {
    pub fn new(cfg: MpcConfig) -> Self {
        Self { cfg, warm: None }
    }

    pub fn reset(&mut self) {
        self.warm = None;
    }

    /// Normalizes and lifts `x_raw`, condenses and solves the QP, and
    /// returns the denormalized, clamped first input. A solve that hits the
    /// iteration limit still yields its best iterate.
    #[allow(clippy::too_many_arguments)]
    pub fn action(
        &mut self,
        ops: &AdaptiveOps,
        theta: &MlpParams,
        norm: &NormStats,
        x_raw: &[f64],
        u_prev_raw: &[f64],
        setpoint_raw: &[f64],
        bounds_raw: &[(f64, f64)],
    ) -> Result<MpcStep> {
        let m = ops.input_dim();
        if bounds_raw.len() != m {
            return Err(shape_err("input bounds", m, bounds_raw.len()));
        }
        let x = norm.normalize_state(x_raw);
        let g = theta.forward(&x)?;
        let x_s = DVector::from_vec(norm.normalize_state(setpoint_raw));
        let u_prev = DVector::from_vec(norm.normalize_input(u_prev_raw));
        let lo: Vec<f64> = bounds_raw.iter().map(|b| b.0).collect();
        let hi: Vec<f64> = bounds_raw.iter().map(|b| b.1).collect();
        let lower = DVector::from_vec(norm.normalize_input(&lo));
        let upper = DVector::from_vec(norm.normalize_input(&hi));
        let qp = condense_qp(ops, &g, &x_s, &u_prev, &lower, &upper, &self.cfg)?;
        let solution = solve_box_qp(&qp, self.warm.as_ref(), &self.cfg.solver)?;
        self.warm = Some(shift_warm_start(&solution.z, m));
        let first: Vec<f64> = solution.z.rows(0, m).iter().copied().collect();
        let input = norm
            .denormalize_input(&first)
            .iter()
            .zip(bounds_raw)
            .map(|(u, (l, h))| u.clamp(*l, *h))
            .collect();
        Ok(MpcStep {
            input,
            solution,
            lifted: g,
        })
    }
}

/// Drops the first input block and repeats the last one.
pub fn shift_warm_start(z: &DVector<f64>, m: usize) -> DVector<f64> {
    let len = z.len();
    if m == 0 || len <= m {
        return z.clone();
    }
    DVector::from_fn(len, |k, _| if k + m < len { z[k + m] } else { z[k] })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_ops(a: f64, b: f64, c: f64) -> AdaptiveOps {
        AdaptiveOps::new(DMatrix::from_row_slice(1, 2, &[a, b]), DMatrix::from_element(1, 1, c)).unwrap()
    }

    fn one(v: f64) -> DVector<f64> {
        DVector::from_element(1, v)
    }

    #[test]
    fn one_dimensional_expansion() {
        // cost = Q g1^2 + R (u1 - u0)^2 + w g2^2 with g1 = u0, g2 = u1
        let (q, r, w) = (1.5, 0.3, 7.0);
        let cfg = MpcConfig {
            horizon: 1,
            terminal_weight: w,
            ..MpcConfig::new(vec![q], vec![r])
        };
        let qp = condense_qp(&scalar_ops(0.0, 1.0, 1.0), &one(1.0), &one(0.0), &one(0.0), &one(-5.0), &one(5.0), &cfg).unwrap();
        let expect = DMatrix::from_row_slice(2, 2, &[2.0 * (q + r), -2.0 * r, -2.0 * r, 2.0 * (w + r)]);
        assert!((&qp.p - expect).amax() < 1e-14);
        assert_eq!(qp.q.amax(), 0.0);
        assert_eq!(qp.offset, 0.0);
    }

    #[test]
    fn delta_only_problem_is_minimized_at_zero() {
        let cfg = MpcConfig {
            horizon: 4,
            terminal_weight: 0.0,
            ..MpcConfig::new(vec![0.0], vec![1.0])
        };
        let qp = condense_qp(&scalar_ops(0.9, 1.0, 1.0), &one(2.0), &one(1.0), &one(0.0), &one(-3.0), &one(3.0), &cfg).unwrap();
        let sol = solve_box_qp(&qp, None, &cfg.solver).unwrap();
        assert!(sol.z.amax() < 1e-9);
        assert!(sol.objective.abs() < 1e-12);
    }

    #[test]
    fn weights_scale_the_quadratic_linearly() {
        let ops = AdaptiveOps::new(
            DMatrix::from_row_slice(2, 3, &[0.9, 0.1, 0.5, -0.2, 0.8, 1.0]),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 2.0]),
        )
        .unwrap();
        let g = DVector::from_vec(vec![0.3, -0.7]);
        let xs = DVector::from_vec(vec![1.0, 0.0]);
        let cfg = MpcConfig {
            horizon: 3,
            ..MpcConfig::new(vec![1.0, 0.5], vec![0.2])
        };
        let doubled = MpcConfig {
            q: vec![2.0, 1.0],
            r: vec![0.4],
            terminal_weight: 2.0 * cfg.terminal_weight,
            ..cfg.clone()
        };
        let lo = one(-1.0);
        let hi = one(1.0);
        let a = condense_qp(&ops, &g, &xs, &one(0.0), &lo, &hi, &cfg).unwrap();
        let b = condense_qp(&ops, &g, &xs, &one(0.0), &lo, &hi, &doubled).unwrap();
        assert!((&a.p * 2.0 - &b.p).amax() <= 1e-9 * a.p.amax());
        assert!((&a.q * 2.0 - &b.q).amax() <= 1e-9 * a.q.amax().max(1.0));
    }

    #[test]
    fn non_finite_operators_are_rejected() {
        let cfg = MpcConfig::new(vec![1.0], vec![1.0]);
        let bad = scalar_ops(f64::NAN, 1.0, 1.0);
        assert!(condense_qp(&bad, &one(1.0), &one(0.0), &one(0.0), &one(-1.0), &one(1.0), &cfg).is_err());
    }

    #[test]
    fn warm_start_shift() {
        let z = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(shift_warm_start(&z, 2).as_slice(), &[3.0, 4.0, 5.0, 6.0, 5.0, 6.0]);
    }
}
