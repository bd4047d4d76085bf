use super::ProcessConstants;

/// Two CSTRs in series followed by a flash separator recycling to the first
/// reactor. State `[X_A1, X_B1, T1, X_A2, X_B2, T2, X_A3, X_B3, T3]`, input
/// `[Q1, Q2, Q3]` heat rates in kJ/h, time in hours.
pub fn process_deriv(
    c: &ProcessConstants,
    feed_temp_1: f64,
    feed_temp_2: f64,
    x: &[f64],
    u: &[f64],
    out: &mut [f64],
) {
    let [xa1, xb1, t1, xa2, xb2, t2, xa3, xb3, t3] =
        <[f64; 9]>::try_from(x).expect("process state has 9 entries");

    // separator vapour composition
    let xc3 = 1.0 - xa3 - xb3;
    let denom = c.volatility_a * xa3 + c.volatility_b * xb3 + c.volatility_c * xc3;
    let xar = c.volatility_a * xa3 / denom;
    let xbr = c.volatility_b * xb3 / denom;

    let f10 = c.feed_flow_1;
    let f20 = c.feed_flow_2;
    let fr = c.recycle_flow;
    let f1 = f10 + fr;
    let f2 = f1 + f20;
    let f3 = fr + c.purge_flow;
    let (v1, v2, v3) = (c.volume_1, c.volume_2, c.volume_3);

    let r1 = |t: f64, xa: f64| c.rate_1 * (-c.activation_1 / (c.gas_constant * t)).exp() * xa;
    let r2 = |t: f64, xb: f64| c.rate_2 * (-c.activation_2 / (c.gas_constant * t)).exp() * xb;
    // temperature rise per unit of reacted mass fraction
    let heat_1 = -c.enthalpy_1 / (c.heat_capacity * c.molecular_weight);
    let heat_2 = -c.enthalpy_2 / (c.heat_capacity * c.molecular_weight);
    let rho_cp = c.density * c.heat_capacity;
    let xa0 = c.feed_fraction_a;

    let (ra1, rb1) = (r1(t1, xa1), r2(t1, xb1));
    out[0] = f10 / v1 * (xa0 - xa1) + fr / v1 * (xar - xa1) - ra1;
    out[1] = f10 / v1 * (0.0 - xb1) + fr / v1 * (xbr - xb1) + ra1 - rb1;
    out[2] = f10 / v1 * (feed_temp_1 - t1) + fr / v1 * (t3 - t1)
        + heat_1 * ra1
        + heat_2 * rb1
        + u[0] / (rho_cp * v1);

    let (ra2, rb2) = (r1(t2, xa2), r2(t2, xb2));
    out[3] = f1 / v2 * (xa1 - xa2) + f20 / v2 * (xa0 - xa2) - ra2;
    out[4] = f1 / v2 * (xb1 - xb2) + f20 / v2 * (0.0 - xb2) + ra2 - rb2;
    out[5] = f1 / v2 * (t1 - t2) + f20 / v2 * (feed_temp_2 - t2)
        + heat_1 * ra2
        + heat_2 * rb2
        + u[1] / (rho_cp * v2);

    out[6] = f2 / v3 * (xa2 - xa3) - f3 / v3 * (xar - xa3);
    out[7] = f2 / v3 * (xb2 - xb3) - f3 / v3 * (xbr - xb3);
    out[8] = f2 / v3 * (t2 - t3) + u[2] / (rho_cp * v3);
}
