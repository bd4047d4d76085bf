mod common;

use common::{random_matrix, random_rotation, rng};
use mako::adapt::AdaptiveOps;
use mako::data::NormStats;
use mako::mpc::{condense_qp, MpcConfig, MpcController};
use mako::network::MlpParams;
use mako::qp::{solve_box_qp, QpProblem};
use mako::trainer::KoopmanOps;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

/// MPC cost of an input sequence evaluated by simulating the lifted model.
#[allow(clippy::too_many_arguments)]
fn direct_cost(
    ops: &KoopmanOps,
    g0: &DVector<f64>,
    xs: &DVector<f64>,
    u_prev: &DVector<f64>,
    us: &[DVector<f64>],
    cfg: &MpcConfig,
) -> f64 {
    let t_len = cfg.horizon;
    let mut g = g0.clone();
    let mut cost = 0.0;
    for t in 1..=t_len + 1 {
        g = &ops.a * &g + &ops.b * &us[t - 1];
        let e = &ops.c * &g - xs;
        for i in 0..e.len() {
            let w = if t <= t_len {
                cfg.q[i]
            } else if cfg.q[i] > 0.0 {
                cfg.terminal_weight
            } else {
                0.0
            };
            cost += w * e[i] * e[i];
        }
    }
    for t in 1..=t_len {
        let d = &us[t] - &us[t - 1];
        cost += d.iter().zip(&cfg.r).map(|(v, r)| r * v * v).sum::<f64>();
    }
    if cfg.penalize_first_move {
        let d = &us[0] - u_prev;
        cost += d.iter().zip(&cfg.r).map(|(v, r)| r * v * v).sum::<f64>();
    }
    cost
}

#[test]
fn condensed_objective_matches_simulated_cost() {
    for seed in 0..20 {
        let mut r = rng(seed);
        let (h, m, n) = (5, 2, 3);
        let truth = KoopmanOps::new(
            random_rotation(h, 0.9, &mut r),
            random_matrix(h, m, 1.0, &mut r),
            random_matrix(n, h, 1.0, &mut r),
            0,
        )
        .unwrap();
        let cfg = MpcConfig {
            horizon: 1 + (seed as usize % 6),
            terminal_weight: 50.0,
            penalize_first_move: seed % 2 == 0,
            ..MpcConfig::new(vec![1.0, 0.0, 0.3], vec![0.2, 0.7])
        };
        let g0 = DVector::from_fn(h, |_, _| r.random_range(-1.0..1.0));
        let xs = DVector::from_fn(n, |_, _| r.random_range(-1.0..1.0));
        let u_prev = DVector::from_fn(m, |_, _| r.random_range(-1.0..1.0));
        let ops = AdaptiveOps::from_koopman(&truth);
        let lo = DVector::from_element(m, -1.0);
        let hi = DVector::from_element(m, 1.0);
        let qp = condense_qp(&ops, &g0, &xs, &u_prev, &lo, &hi, &cfg).unwrap();
        assert!((&qp.p - qp.p.transpose()).amax() <= 1e-12 * qp.p.amax());
        for _ in 0..5 {
            let us: Vec<DVector<f64>> = (0..=cfg.horizon)
                .map(|_| DVector::from_fn(m, |_, _| r.random_range(-2.0..2.0)))
                .collect();
            let z = DVector::from_iterator(us.len() * m, us.iter().flat_map(|u| u.iter().copied()));
            let direct = direct_cost(&truth, &g0, &xs, &u_prev, &us, &cfg);
            let condensed = qp.objective(&z);
            assert!((direct - condensed).abs() <= 1e-9 * direct.max(1.0), "seed {seed}: {direct} vs {condensed}");
        }
    }
}

/// Linear plant observed through an exact identity lift.
struct Plant {
    truth: KoopmanOps,
    theta: MlpParams,
}

impl Plant {
    fn new(seed: u64) -> Self {
        let mut r = rng(seed);
        let n = 3;
        let truth = KoopmanOps::new(
            random_rotation(n, 0.9, &mut r),
            random_matrix(n, 1, 1.0, &mut r),
            DMatrix::identity(n, n),
            0,
        )
        .unwrap();
        Self {
            truth,
            theta: MlpParams::passthrough(n, &[6]).unwrap(),
        }
    }

    fn step(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let g = &self.truth.a * DVector::from_column_slice(x) + &self.truth.b * DVector::from_column_slice(u);
        g.as_slice().to_vec()
    }

    fn equilibrium(&self, u_s: f64) -> Vec<f64> {
        let n = self.truth.a.nrows();
        let lhs = DMatrix::identity(n, n) - &self.truth.a;
        let g = lhs.lu().solve(&(&self.truth.b * u_s)).unwrap();
        g.as_slice().to_vec()
    }
}

#[test]
fn equilibrium_is_held() {
    let plant = Plant::new(1);
    let u_s = 0.4;
    let xs = plant.equilibrium(u_s);
    let ops = AdaptiveOps::from_koopman(&plant.truth);
    let mut mpc = MpcController::new(MpcConfig::new(vec![1.0; 3], vec![0.1]));
    let norm = NormStats::identity(3, 1);
    let step = mpc
        .action(&ops, &plant.theta, &norm, &xs, &[u_s], &xs, &[(-1.0, 1.0)])
        .unwrap();
    let next = plant.step(&xs, &step.input);
    let dist: f64 = next.iter().zip(&xs).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    assert!(dist < 1e-6, "moved {dist:e}");
}

#[test]
fn point_box_and_determinism() {
    let plant = Plant::new(2);
    let ops = AdaptiveOps::from_koopman(&plant.truth);
    let norm = NormStats {
        state_mean: vec![0.1, -0.2, 0.3],
        state_std: vec![2.0, 0.5, 1.0],
        input_mean: vec![0.3],
        input_std: vec![1.7],
    };
    let cfg = MpcConfig::new(vec![1.0; 3], vec![0.1]);
    let x = [0.5, -0.3, 0.8];
    let mut mpc = MpcController::new(cfg.clone());
    let step = mpc.action(&ops, &plant.theta, &norm, &x, &[0.0], &[0.0; 3], &[(0.7, 0.7)]).unwrap();
    assert_eq!(step.input, vec![0.7]);
    let mut a = MpcController::new(cfg.clone());
    let mut b = MpcController::new(cfg);
    let ua = a.action(&ops, &plant.theta, &norm, &x, &[0.0], &[0.0; 3], &[(-1.0, 1.0)]).unwrap();
    let ub = b.action(&ops, &plant.theta, &norm, &x, &[0.0], &[0.0; 3], &[(-1.0, 1.0)]).unwrap();
    assert_eq!(ua.input, ub.input);
    assert_eq!(ua.solution, ub.solution);
}

#[test]
fn optimal_value_decreases_along_the_closed_loop() {
    let plant = Plant::new(3);
    let ops = AdaptiveOps::from_koopman(&plant.truth);
    let cfg = MpcConfig::new(vec![1.0; 3], vec![0.1]);
    let mut mpc = MpcController::new(cfg.clone());
    let norm = NormStats::identity(3, 1);
    let xs = vec![0.0; 3];
    let mut x = vec![1.0, -0.5, 0.7];
    let mut u_prev = vec![0.0];
    let mut prev_value = f64::INFINITY;
    for k in 0..60 {
        let step = mpc.action(&ops, &plant.theta, &norm, &x, &u_prev, &xs, &[(-1.0, 1.0)]).unwrap();
        let v = step.solution.objective;
        assert!(v <= prev_value + 1e-8, "step {k}: {v:e} after {prev_value:e}");
        prev_value = v;
        x = plant.step(&x, &step.input);
        u_prev = step.input;
    }
    assert!(x.iter().map(|v| v.abs()).fold(0.0, f64::max) < 1e-3);
}

#[test]
fn large_terminal_weight_enforces_the_terminal_condition() {
    let ops = AdaptiveOps::new(DMatrix::from_row_slice(1, 2, &[0.9, 1.0]), DMatrix::from_element(1, 1, 1.0)).unwrap();
    let g = DVector::from_element(1, 2.0);
    let xs = DVector::from_element(1, 0.5);
    let one = |v: f64| DVector::from_element(1, v);
    let mut errors = Vec::new();
    for w in [1e0, 1e2, 1e4, 1e6, 1e8] {
        let cfg = MpcConfig {
            horizon: 3,
            terminal_weight: w,
            ..MpcConfig::new(vec![1.0], vec![1.0])
        };
        let qp = condense_qp(&ops, &g, &xs, &one(0.0), &one(-5.0), &one(5.0), &cfg).unwrap();
        let sol = solve_box_qp(&qp, None, &cfg.solver).unwrap();
        // terminal prediction from the solved inputs
        let mut gt = g[0];
        for u in sol.z.iter() {
            gt = 0.9 * gt + u;
        }
        errors.push((gt - xs[0]).abs());
    }
    assert!(errors.windows(2).all(|p| p[1] <= p[0] + 1e-12), "{errors:?}");
    assert!(*errors.last().unwrap() < 1e-3, "{errors:?}");
}

#[test]
fn dump_round_trips_a_condensed_problem() {
    let plant = Plant::new(4);
    let ops = AdaptiveOps::from_koopman(&plant.truth);
    let cfg = MpcConfig::new(vec![1.0, 0.0, 2.0], vec![0.1]);
    let one = |v: f64| DVector::from_element(1, v);
    let qp = condense_qp(&ops, &DVector::from_element(3, 0.3), &DVector::zeros(3), &one(0.0), &one(-1.0), &one(1.0), &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("qp.txt");
    qp.save(&path).unwrap();
    let back = QpProblem::from_text(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(back, qp);
}
