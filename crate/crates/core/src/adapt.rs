//! Online refinement of the lifted operators from streaming data.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, MakoError, Result};
use crate::trainer::KoopmanOps;

/// Squared norms below this trigger the step-size cap.
pub const NORM_FLOOR: f64 = 1e-12;
pub const DEFAULT_LAMBDA_MAX: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptMode {
    Nominal,
    Robust,
}

impl std::str::FromStr for AdaptMode {
    type Err = MakoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nominal" => Ok(Self::Nominal),
            "robust" => Ok(Self::Robust),
            other => Err(MakoError::InvalidArgument(format!("unknown adaptation mode '{other}'"))),
        }
    }
}

impl AdaptMode {
    pub fn name(self) -> &'static str {
        match self {
            AdaptMode::Nominal => "nominal",
            AdaptMode::Robust => "robust",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    pub alpha: f64,
    pub mode: AdaptMode,
    pub eps_w: f64,
    pub eps_v: f64,
    pub lambda_max: f64,
}

impl AdaptConfig {
    pub fn nominal(alpha: f64) -> Self {
        Self {
            alpha,
            mode: AdaptMode::Nominal,
            eps_w: 0.0,
            eps_v: 0.0,
            lambda_max: DEFAULT_LAMBDA_MAX,
        }
    }

    pub fn robust(alpha: f64, eps_w: f64, eps_v: f64) -> Self {
        Self {
            alpha,
            mode: AdaptMode::Robust,
            eps_w,
            eps_v,
            lambda_max: DEFAULT_LAMBDA_MAX,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 2.0) {
            return Err(MakoError::InvalidArgument(format!(
                "alpha must lie in (0, 2), got {}",
                self.alpha
            )));
        }
        if !(self.eps_w >= 0.0 && self.eps_v >= 0.0) {
            return Err(MakoError::InvalidArgument("noise bounds must be nonnegative".into()));
        }
        if !(self.lambda_max > 0.0) {
            return Err(MakoError::InvalidArgument("lambda_max must be positive".into()));
        }
        Ok(())
    }
}

/// Running estimate `Psi = [A, B]` and `C`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptiveOps {
    pub psi: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub k: u64,
}

impl AdaptiveOps {
    pub fn new(psi: DMatrix<f64>, c: DMatrix<f64>) -> Result<Self> {
        let h = psi.nrows();
        if psi.ncols() < h || c.ncols() != h {
            return Err(shape_err(
                "adaptive ops",
                format!("Psi {h}x(h+m), C nx{h}"),
                format!("Psi {:?}, C {:?}", psi.shape(), c.shape()),
            ));
        }
        Ok(Self { psi, c, k: 0 })
    }

    pub fn from_koopman(ops: &KoopmanOps) -> Self {
        let (h, m) = (ops.obs_dim(), ops.input_dim());
        let mut psi = DMatrix::zeros(h, h + m);
        psi.columns_mut(0, h).copy_from(&ops.a);
        psi.columns_mut(h, m).copy_from(&ops.b);
        Self {
            psi,
            c: ops.c.clone(),
            k: 0,
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.psi.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.psi.ncols() - self.psi.nrows()
    }

    pub fn state_dim(&self) -> usize {
        self.c.nrows()
    }

    pub fn a(&self) -> DMatrix<f64> {
        self.psi.columns(0, self.obs_dim()).into_owned()
    }

    pub fn b(&self) -> DMatrix<f64> {
        self.psi.columns(self.obs_dim(), self.input_dim()).into_owned()
    }

    pub fn to_koopman(&self) -> KoopmanOps {
        KoopmanOps {
            a: self.a(),
            b: self.b(),
            c: self.c.clone(),
            task_index: 0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.psi.iter().chain(self.c.iter()).all(|v| v.is_finite())
    }

    fn extended(&self, g: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        let (h, m) = (self.obs_dim(), self.input_dim());
        if g.len() != h {
            return Err(shape_err("observable", h, g.len()));
        }
        if u.len() != m {
            return Err(shape_err("input", m, u.len()));
        }
        let mut x = DVector::zeros(h + m);
        x.rows_mut(0, h).copy_from(g);
        x.rows_mut(h, m).copy_from(u);
        Ok(x)
    }
}

/// Elementwise mean of the per-task operators.
pub fn init_from_meta(ops_list: &[KoopmanOps]) -> Result<AdaptiveOps> {
    let first = ops_list
        .first()
        .ok_or_else(|| MakoError::InvalidArgument("no operators to average".into()))?;
    let mut acc = AdaptiveOps::from_koopman(first);
    for op in &ops_list[1..] {
        let next = AdaptiveOps::from_koopman(op);
        if next.psi.shape() != acc.psi.shape() || next.c.shape() != acc.c.shape() {
            return Err(shape_err(
                "init_from_meta",
                format!("{:?}", acc.psi.shape()),
                format!("{:?}", next.psi.shape()),
            ));
        }
        acc.psi += next.psi;
        acc.c += next.c;
    }
    let scale = 1.0 / ops_list.len() as f64;
    acc.psi *= scale;
    acc.c *= scale;
    Ok(acc)
}

/// Step size `min((2 - alpha)/|X|^2, (2 - alpha)/|g+|^2)`. A branch whose
/// squared norm falls below [`NORM_FLOOR`] is dropped and the result is
/// capped at `lambda_max`; the flag reports that case.
pub fn learning_rate(x: &DVector<f64>, g_next: &DVector<f64>, alpha: f64, lambda_max: f64) -> (f64, bool) {
    let num = 2.0 - alpha;
    let mut lambda = f64::INFINITY;
    let mut capped = false;
    for sq in [x.norm_squared(), g_next.norm_squared()] {
        if sq < NORM_FLOOR {
            capped = true;
        } else {
            lambda = lambda.min(num / sq);
        }
    }
    if capped {
        lambda = lambda.min(lambda_max);
    }
    (lambda, capped)
}

/// Projection of each residual onto its noise ball.
pub fn ideal_noise(
    g_resid: &DVector<f64>,
    x_resid: &DVector<f64>,
    eps_w: f64,
    eps_v: f64,
) -> (DVector<f64>, DVector<f64>) {
    (ball_project(g_resid, eps_w), ball_project(x_resid, eps_v))
}

fn ball_project(r: &DVector<f64>, eps: f64) -> DVector<f64> {
    let norm = r.norm();
    if norm <= eps {
        r.clone()
    } else {
        r * (eps / norm)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptRecord {
    pub k: u64,
    pub lambda: f64,
    /// `|g+ - Psi X|` before the update.
    pub g_resid_norm: f64,
    /// `|x+ - C g+|` before the update.
    pub x_resid_norm: f64,
    /// Squared norm of the residuals after the noise projection.
    pub effective_sq: f64,
    pub capped: bool,
    pub lyapunov: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdaptTrace {
    pub records: Vec<AdaptRecord>,
}

pub const ADAPT_CSV_HEADER: &str = "# mako adapt-trace v1";

impl AdaptTrace {
    pub fn push(&mut self, r: AdaptRecord) {
        self.records.push(r);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{ADAPT_CSV_HEADER}")?;
        writeln!(out, "k,lambda,g_resid_norm,x_resid_norm,V_if_known")?;
        for r in &self.records {
            let v = r.lyapunov.map(|v| format!("{v:e}")).unwrap_or_default();
            writeln!(
                out,
                "{},{:e},{:e},{:e},{}",
                r.k, r.lambda, r.g_resid_norm, r.x_resid_norm, v
            )?;
        }
        Ok(())
    }
}

/// Gradient update of `Psi` and `C` from one transition.
pub fn nominal_step(
    ops: &mut AdaptiveOps,
    g_k: &DVector<f64>,
    u_k: &DVector<f64>,
    g_next: &DVector<f64>,
    x_next: &DVector<f64>,
    cfg: &AdaptConfig,
) -> Result<AdaptRecord> {
    update(ops, g_k, u_k, g_next, x_next, cfg, false)
}

/// Update with the residuals reduced by their ball projections, leaving a
/// dead zone of radius `eps` around zero.
pub fn robust_step(
    ops: &mut AdaptiveOps,
    g_k: &DVector<f64>,
    u_k: &DVector<f64>,
    g_next: &DVector<f64>,
    x_next: &DVector<f64>,
    cfg: &AdaptConfig,
) -> Result<AdaptRecord> {
    update(ops, g_k, u_k, g_next, x_next, cfg, true)
}

/// Nominal or robust update according to `cfg.mode`.
pub fn adapt_step(
    ops: &mut AdaptiveOps,
    g_k: &DVector<f64>,
    u_k: &DVector<f64>,
    g_next: &DVector<f64>,
    x_next: &DVector<f64>,
    cfg: &AdaptConfig,
) -> Result<AdaptRecord> {
    update(ops, g_k, u_k, g_next, x_next, cfg, cfg.mode == AdaptMode::Robust)
}

fn update(
    ops: &mut AdaptiveOps,
    g_k: &DVector<f64>,
    u_k: &DVector<f64>,
    g_next: &DVector<f64>,
    x_next: &DVector<f64>,
    cfg: &AdaptConfig,
    robust: bool,
) -> Result<AdaptRecord> {
    cfg.validate()?;
    let x = ops.extended(g_k, u_k)?;
    if g_next.len() != ops.obs_dim() {
        return Err(shape_err("next observable", ops.obs_dim(), g_next.len()));
    }
    if x_next.len() != ops.state_dim() {
        return Err(shape_err("next state", ops.state_dim(), x_next.len()));
    }
    let g_resid = g_next - &ops.psi * &x;
    let x_resid = x_next - &ops.c * g_next;
    let (g_norm, x_norm) = (g_resid.norm(), x_resid.norm());
    if !g_norm.is_finite() || !x_norm.is_finite() {
        return Err(MakoError::NonFinite("adaptation residual"));
    }
    let (lambda, capped) = learning_rate(&x, g_next, cfg.alpha, cfg.lambda_max);
    let (g_eff, x_eff) = if robust {
        let (w, v) = ideal_noise(&g_resid, &x_resid, cfg.eps_w, cfg.eps_v);
        (g_resid - w, x_resid - v)
    } else {
        (g_resid, x_resid)
    };
    ops.psi += lambda * &g_eff * x.transpose();
    ops.c += lambda * &x_eff * g_next.transpose();
    ops.k += 1;
    Ok(AdaptRecord {
        k: ops.k,
        lambda,
        g_resid_norm: g_norm,
        x_resid_norm: x_norm,
        effective_sq: g_eff.norm_squared() + x_eff.norm_squared(),
        capped,
        lyapunov: None,
    })
}

/// `|Psi_true - Psi|_F^2 + |C_true - C|_F^2`.
pub fn lyapunov_value(ops: &AdaptiveOps, truth: &KoopmanOps) -> Result<f64> {
    let t = AdaptiveOps::from_koopman(truth);
    if t.psi.shape() != ops.psi.shape() || t.c.shape() != ops.c.shape() {
        return Err(MakoError::InvalidArgument(format!(
            "truth shapes {:?}/{:?} differ from estimate {:?}/{:?}",
            t.psi.shape(),
            t.c.shape(),
            ops.psi.shape(),
            ops.c.shape()
        )));
    }
    Ok((t.psi - &ops.psi).norm_squared() + (t.c - &ops.c).norm_squared())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(a: f64) -> KoopmanOps {
        KoopmanOps::new(
            DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, 2.0 * a),
            DMatrix::from_element(1, 1, -a),
            0,
        )
        .unwrap()
    }

    #[test]
    fn meta_mean_of_two_scalars() {
        let ops = init_from_meta(&[scalar(1.0), scalar(3.0)]).unwrap();
        assert_eq!(ops.a()[(0, 0)], 2.0);
        assert_eq!(ops.b()[(0, 0)], 4.0);
        assert_eq!(ops.c[(0, 0)], -2.0);
        assert!(init_from_meta(&[]).is_err());
    }

    #[test]
    fn meta_mean_of_one_or_identical() {
        let one = init_from_meta(&[scalar(1.7)]).unwrap();
        assert_eq!(one.to_koopman(), scalar(1.7));
        let same = init_from_meta(&vec![scalar(0.25); 5]).unwrap();
        assert_eq!(same.to_koopman(), scalar(0.25));
    }

    #[test]
    fn step_size_direct_evaluation() {
        let x = DVector::from_vec(vec![1.0, 1.0]);
        let g = DVector::from_vec(vec![1.0]);
        let (l, capped) = learning_rate(&x, &g, 1.995, 10.0);
        assert!((l - 0.0025).abs() < 1e-15);
        assert!(!capped);
        let (l1, _) = learning_rate(&x, &x, 1.0, 10.0);
        assert_eq!(l1, 0.5);
        let (tiny, _) = learning_rate(&x, &g, 2.0 - 1e-12, 10.0);
        assert!(tiny > 0.0 && tiny < 1e-11);
    }

    #[test]
    fn step_size_cap_on_vanishing_signal() {
        let z = DVector::zeros(2);
        let g = DVector::from_vec(vec![1e-7]);
        let (l, capped) = learning_rate(&z, &g, 1.0, 10.0);
        assert_eq!(l, 10.0);
        assert!(capped);
        let x = DVector::from_vec(vec![1.0, 0.0]);
        let (l, capped) = learning_rate(&x, &g, 1.0, 10.0);
        assert_eq!(l, 1.0);
        assert!(capped);
    }

    #[test]
    fn scalar_update_reaches_zero_residual() {
        let mut ops = AdaptiveOps::new(DMatrix::zeros(1, 1), DMatrix::from_element(1, 1, 1.0)).unwrap();
        let one = DVector::from_element(1, 1.0);
        let u = DVector::zeros(0);
        let rec = nominal_step(&mut ops, &one, &u, &one, &one, &AdaptConfig::nominal(1.0)).unwrap();
        assert_eq!(rec.lambda, 1.0);
        assert_eq!(ops.psi[(0, 0)], 1.0);
        assert_eq!((&one - &ops.psi * &one).norm(), 0.0);
    }

    #[test]
    fn exact_operators_are_a_fixed_point() {
        let truth = scalar(0.5);
        let mut ops = AdaptiveOps::from_koopman(&truth);
        let g = DVector::from_element(1, 0.8);
        let u = DVector::from_element(1, -0.3);
        let g_next = &truth.a * &g + &truth.b * &u;
        let x_next = &truth.c * &g_next;
        let before = ops.clone();
        let rec = nominal_step(&mut ops, &g, &u, &g_next, &x_next, &AdaptConfig::nominal(1.5)).unwrap();
        assert_eq!(rec.g_resid_norm, 0.0);
        assert_eq!(ops.psi, before.psi);
        assert_eq!(ops.c, before.c);
    }

    #[test]
    fn ball_projection_cases() {
        let r = DVector::from_vec(vec![3.0, 4.0]);
        let (w, v) = ideal_noise(&r, &r, 1.0, 10.0);
        assert!((w[0] - 0.6).abs() < 1e-15 && (w[1] - 0.8).abs() < 1e-15);
        assert_eq!(v, r);
        let (w0, _) = ideal_noise(&r, &r, 0.0, 0.0);
        assert_eq!(w0.norm(), 0.0);
    }

    #[test]
    fn zero_bounds_reduce_to_nominal() {
        let truth = scalar(0.5);
        let start = init_from_meta(&[scalar(0.1), scalar(0.3)]).unwrap();
        let g = DVector::from_element(1, 0.8);
        let u = DVector::from_element(1, -0.3);
        let g_next = &truth.a * &g + &truth.b * &u;
        let x_next = &truth.c * &g_next;
        let mut a = start.clone();
        let mut b = start.clone();
        nominal_step(&mut a, &g, &u, &g_next, &x_next, &AdaptConfig::nominal(1.2)).unwrap();
        robust_step(&mut b, &g, &u, &g_next, &x_next, &AdaptConfig::robust(1.2, 0.0, 0.0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dead_zone_leaves_operators_unchanged() {
        let mut ops = AdaptiveOps::from_koopman(&scalar(0.5));
        let before = ops.clone();
        let g = DVector::from_element(1, 1.0);
        let u = DVector::from_element(1, 0.0);
        let g_next = DVector::from_element(1, 0.5 + 1e-4);
        let x_next = DVector::from_element(1, -0.5 * g_next[0] + 1e-4);
        let rec = robust_step(&mut ops, &g, &u, &g_next, &x_next, &AdaptConfig::robust(1.0, 1e-3, 1e-3)).unwrap();
        assert!(rec.g_resid_norm > 0.0);
        assert_eq!(rec.effective_sq, 0.0);
        assert_eq!(ops.psi, before.psi);
        assert_eq!(ops.c, before.c);
    }

    #[test]
    fn lyapunov_value_cases() {
        let truth = KoopmanOps::new(
            DMatrix::from_element(1, 1, 2.0),
            DMatrix::zeros(1, 0),
            DMatrix::from_element(1, 1, 1.0),
            0,
        )
        .unwrap();
        let ops = AdaptiveOps::new(DMatrix::zeros(1, 1), DMatrix::zeros(1, 1)).unwrap();
        assert_eq!(lyapunov_value(&ops, &truth).unwrap(), 5.0);
        assert_eq!(lyapunov_value(&AdaptiveOps::from_koopman(&truth), &truth).unwrap(), 0.0);
        assert!(lyapunov_value(&AdaptiveOps::from_koopman(&scalar(1.0)), &truth).is_err());
    }

    #[test]
    fn non_finite_residual_rejects_update() {
        let mut ops = AdaptiveOps::from_koopman(&scalar(0.5));
        let before = ops.clone();
        let one = DVector::from_element(1, 1.0);
        let bad = DVector::from_element(1, f64::NAN);
        assert!(nominal_step(&mut ops, &one, &one, &bad, &one, &AdaptConfig::nominal(1.0)).is_err());
        assert_eq!(ops, before);
    }

    #[test]
    fn alpha_outside_open_interval_is_rejected() {
        assert!(AdaptConfig::nominal(2.0).validate().is_err());
        assert!(AdaptConfig::nominal(0.0).validate().is_err());
        assert!(AdaptConfig::robust(1.0, -1.0, 0.0).validate().is_err());
        assert!("robust".parse::<AdaptMode>().is_ok());
        assert!("fast".parse::<AdaptMode>().is_err());
    }
}
