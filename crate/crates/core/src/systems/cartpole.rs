use super::CartpoleConstants;

/// Frictionless cart–pendulum with `theta = 0` upright. `pole_length` is the
/// pivot-to-centre-of-mass distance used in the classic control benchmark.
pub fn cartpole_deriv(
    c: &CartpoleConstants,
    pole_length: f64,
    pole_mass: f64,
    x: &[f64],
    u: &[f64],
    out: &mut [f64],
) {
    let (theta, theta_dot) = (x[2], x[3]);
    let total = c.cart_mass + pole_mass;
    let (sin, cos) = theta.sin_cos();
    let temp = (u[0] + pole_mass * pole_length * theta_dot * theta_dot * sin) / total;
    let theta_acc = (c.gravity * sin - cos * temp)
        / (pole_length * (4.0 / 3.0 - pole_mass * cos * cos / total));
    let x_acc = temp - pole_mass * pole_length * theta_acc * cos / total;
    out[0] = x[1];
    out[1] = x_acc;
    out[2] = theta_dot;
    out[3] = theta_acc;
}
