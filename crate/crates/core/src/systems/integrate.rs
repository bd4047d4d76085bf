use crate::error::{MakoError, Result};

/// One classical fourth-order Runge–Kutta step of `dx/dt = f(x, u)` with `u`
/// held constant over the step.
pub fn rk4_integrate<F>(deriv: F, x: &[f64], u: &[f64], dt: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64], &[f64], &mut [f64]),
{
    if !(dt > 0.0) {
        return Err(MakoError::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    let n = x.len();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];

    let eval = |state: &[f64], out: &mut [f64]| -> Result<()> {
        deriv(state, u, out);
        match out.iter().position(|v| !v.is_finite()) {
            Some(component) => Err(MakoError::Integration { component }),
            None => Ok(()),
        }
    };

    eval(x, &mut k1)?;
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * dt * k1[i];
    }
    eval(&tmp, &mut k2)?;
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * dt * k2[i];
    }
    eval(&tmp, &mut k3)?;
    for i in 0..n {
        tmp[i] = x[i] + dt * k3[i];
    }
    eval(&tmp, &mut k4)?;

    Ok((0..n)
        .map(|i| x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decay(x: &[f64], _u: &[f64], out: &mut [f64]) {
        out[0] = -x[0];
    }

    #[test]
    fn exponential_decay() {
        let y = rk4_integrate(decay, &[1.0], &[], 0.1).unwrap();
        assert!((y[0] - (-0.1f64).exp()).abs() < 1e-7);
        assert!((y[0] - 0.9048375).abs() < 1e-7);
    }

    #[test]
    fn zero_field_is_identity() {
        let x = [0.3, -2.0, 7.5];
        let y = rk4_integrate(|_, _, out| out.fill(0.0), &x, &[1.0], 0.5).unwrap();
        assert_eq!(y, x.to_vec());
    }

    #[test]
    fn fourth_order_convergence() {
        let err = |dt: f64| {
            let y = rk4_integrate(decay, &[1.0], &[], dt).unwrap()[0];
            (y - (-dt).exp()).abs()
        };
        // local error is O(dt^5); halving dt must shrink it by at least 2^3.8
        let (e1, e2) = (err(0.2), err(0.1));
        assert!(e1 / e2 >= 2f64.powf(3.8), "ratio {}", e1 / e2);
    }

    #[test]
    fn nan_derivative_reports_component() {
        let err = rk4_integrate(
            |_, _, out: &mut [f64]| {
                out[0] = 0.0;
                out[1] = f64::NAN;
            },
            &[0.0, 0.0],
            &[],
            0.1,
        )
        .unwrap_err();
        assert!(matches!(err, MakoError::Integration { component: 1 }));
    }

    #[test]
    fn rejects_nonpositive_dt() {
        assert!(rk4_integrate(decay, &[1.0], &[], 0.0).is_err());
    }
}
