use super::GrnConstants;

/// Three-gene repressilator with light-driven transcription inputs.
/// State `[m1, m2, m3, p1, p2, p3]`; gene `i` is repressed by the protein of
/// the previous gene in the ring.
pub fn grn_deriv(
    c: &GrnConstants,
    dissociation: f64,
    input_scale: f64,
    x: &[f64],
    u: &[f64],
    out: &mut [f64],
) {
    let gains = [input_scale, c.input_gain_2, c.input_gain_3];
    for i in 0..3 {
        let repressor = x[3 + (i + 2) % 3].max(0.0);
        let hill = (repressor / dissociation).powf(c.hill);
        out[i] = c.leak + c.max_rate / (1.0 + hill) - c.mrna_decay * x[i] + gains[i] * u[i];
        out[3 + i] = c.protein_rate * (x[i] - x[3 + i]);
    }
}
