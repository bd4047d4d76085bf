use mako::systems::{
    nominal_params, param_grid, sample_params, SystemConstants, SystemKind, SystemParams,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

/// Damped Newton on the continuous-time vector field with a central
/// difference Jacobian. Returns the root and the final residual norm.
fn newton_steady_state(p: &SystemParams, x0: &[f64], u: &[f64]) -> (Vec<f64>, f64) {
    let n = x0.len();
    let f = |x: &DVector<f64>| {
        let mut out = vec![0.0; n];
        p.deriv(x.as_slice(), u, &mut out);
        DVector::from_vec(out)
    };
    let mut x = DVector::from_column_slice(x0);
    let mut fx = f(&x);
    for _ in 0..200 {
        if fx.norm() < 1e-11 {
            break;
        }
        let mut jac = DMatrix::zeros(n, n);
        for j in 0..n {
            let h = 1e-7 * x[j].abs().max(1.0);
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            jac.set_column(j, &((f(&xp) - f(&xm)) / (2.0 * h)));
        }
        let dx = jac.lu().solve(&(-&fx)).expect("nonsingular jacobian");
        let mut t = 1.0;
        loop {
            let cand = &x + &dx * t;
            let fc = f(&cand);
            if fc.norm() < fx.norm() || t < 1e-6 {
                x = cand;
                fx = fc;
                break;
            }
            t *= 0.5;
        }
    }
    let r = fx.norm();
    (x.as_slice().to_vec(), r)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

#[test]
fn process_steady_state_is_preserved() {
    let p = nominal_params(SystemKind::ReactorSeparator);
    let SystemConstants::ReactorSeparator(c) = &p.constants else {
        unreachable!()
    };
    let (xs, resid) = newton_steady_state(&p, &c.setpoint, &c.steady_input);
    assert!(resid < 1e-8, "newton residual {resid}");
    let next = p.step(&xs, &c.steady_input).unwrap();
    assert!(dist(&next, &xs) < 1e-6, "drift {}", dist(&next, &xs));

    // the located equilibrium sits near the published setpoint
    for i in [0, 1, 3, 4, 6, 7] {
        assert!((xs[i] - c.setpoint[i]).abs() < 0.1, "fraction {i}: {}", xs[i]);
    }
    for i in [2, 5, 8] {
        assert!((xs[i] - c.setpoint[i]).abs() < 15.0, "temperature {i}: {}", xs[i]);
    }
}

#[test]
fn grn_and_cartpole_equilibria_are_preserved() {
    let grn = nominal_params(SystemKind::Grn);
    let (xs, resid) = newton_steady_state(&grn, &[10.0; 6], &[0.0; 3]);
    assert!(resid < 1e-9);
    assert!(dist(&grn.step(&xs, &[0.0; 3]).unwrap(), &xs) < 1e-6);

    let cp = nominal_params(SystemKind::Cartpole);
    assert!(dist(&cp.step(&[0.0; 4], &[0.0]).unwrap(), &[0.0; 4]) < 1e-6);
}

#[test]
fn rk4_measured_order() {
    let decay = |x: &[f64], _: &[f64], out: &mut [f64]| out[0] = -x[0];
    let err = |dt: f64| {
        let y = mako::systems::rk4_integrate(decay, &[1.0], &[], dt).unwrap()[0];
        (y - (-dt).exp()).abs()
    };
    let dts = [0.4, 0.2, 0.1, 0.05];
    for w in dts.windows(2) {
        let order = (err(w[0]) / err(w[1])).log2();
        assert!(order >= 3.8, "order {order} at dt {}", w[1]);
    }
}

#[test]
fn step_is_bitwise_deterministic() {
    for kind in SystemKind::ALL {
        let p = sample_params(kind, 11);
        let x = p.setpoint().iter().map(|v| v + 0.1).collect::<Vec<_>>();
        let (lo, hi) = p.input_bounds();
        let u: Vec<f64> = lo.iter().zip(&hi).map(|(l, h)| 0.3 * l + 0.7 * h).collect();
        let a = p.step(&x, &u).unwrap();
        let b = p.step(&x, &u).unwrap();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}

#[test]
fn process_fractions_stay_in_unit_interval() {
    for p in param_grid(SystemKind::ReactorSeparator, 9).unwrap() {
        let mut x = p.setpoint();
        for k in 0..200 {
            let u = if k % 2 == 0 {
                vec![4.87e6, 0.0, 4.87e6]
            } else {
                vec![0.0, 1.68e6, 0.0]
            };
            x = p.step(&x, &u).unwrap();
            for i in [0, 1, 3, 4, 6, 7] {
                assert!((0.0..=1.0).contains(&x[i]));
            }
        }
    }
}

#[test]
fn divergence_is_reported() {
    let p = nominal_params(SystemKind::Cartpole);
    let err = p.step(&[0.0, 2e9, 0.0, 0.0], &[0.0]).unwrap_err();
    assert!(matches!(err, mako::MakoError::Divergence { .. }));
}

proptest! {
    #[test]
    fn clamp_is_idempotent(u in prop::collection::vec(-1e7f64..1e7, 3), kind in 0usize..3) {
        let kind = SystemKind::ALL[kind];
        let p = nominal_params(kind);
        let u = &u[..kind.input_dim()];
        let once = p.clamp_input(u);
        prop_assert_eq!(p.clamp_input(&once), once.clone());
        let (lo, hi) = p.input_bounds();
        for i in 0..once.len() {
            prop_assert!(lo[i] <= once[i] && once[i] <= hi[i]);
        }
    }
}
