//! Lifted-linear plants with known operators, used for adaptation studies.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapt::{adapt_step, lyapunov_value, AdaptConfig, AdaptTrace, AdaptiveOps};
use crate::error::{MakoError, Result};
use crate::seed::derive_seed;
use crate::trainer::KoopmanOps;

/// Random plant `g+ = A g + B u`, `x = C g` where `A` is `rho` times a
/// random orthogonal matrix, so every eigenvalue has modulus `rho` and the
/// inputs excite all lifted directions.
pub fn random_plant(h: usize, m: usize, n: usize, rho: f64, seed: u64) -> KoopmanOps {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = |r: usize, c: usize| DMatrix::<f64>::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
    let a = uniform(h, h).qr().q() * rho;
    let b = uniform(h, m);
    let c = uniform(n, h);
    KoopmanOps { a, b, c, task_index: 0 }
}

/// Uniform sample from the Euclidean ball of radius `eps`.
pub fn sample_ball<R: Rng>(dim: usize, eps: f64, rng: &mut R) -> DVector<f64> {
    if dim == 0 || eps == 0.0 {
        return DVector::zeros(dim);
    }
    loop {
        let v = DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0));
        let n = v.norm();
        if n > 0.0 && n <= 1.0 {
            // radial correction for a uniform-in-volume draw
            let r = rng.random_range(0.0f64..1.0).powf(1.0 / dim as f64);
            return v * (eps * r / n);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticStudyConfig {
    pub obs_dim: usize,
    pub input_dim: usize,
    pub state_dim: usize,
    pub spectral_radius: f64,
    pub steps: usize,
    pub input_amplitude: f64,
    /// Bounds on the injected lifted and output noise.
    pub noise_w: f64,
    pub noise_v: f64,
    /// Scale of the random offset between the initial estimate and truth.
    pub init_offset: f64,
    pub seed: u64,
    pub adapt: AdaptConfig,
}

impl Default for SyntheticStudyConfig {
    fn default() -> Self {
        Self {
            obs_dim: 8,
            input_dim: 2,
            state_dim: 4,
            spectral_radius: 0.95,
            steps: 5000,
            input_amplitude: 1.0,
            noise_w: 0.0,
            noise_v: 0.0,
            init_offset: 0.5,
            seed: 0,
            adapt: AdaptConfig::nominal(1.0),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticStudy {
    pub truth: KoopmanOps,
    pub initial: AdaptiveOps,
    pub last: AdaptiveOps,
    /// Records carry `V` after each update; `v0` is the value before the
    /// first one.
    pub trace: AdaptTrace,
    pub v0: f64,
}

impl SyntheticStudy {
    /// Largest violation of `V_{k+1} <= V_k - alpha * lambda_k * |r_eff|^2`
    /// over the run (the nominal case has `r_eff` equal to the raw
    /// residuals, and the bound is also checked without the decrease term).
    pub fn max_lyapunov_violation(&self, alpha: f64) -> f64 {
        let mut prev = self.v0;
        let mut worst = f64::NEG_INFINITY;
        for r in &self.trace.records {
            let v = r.lyapunov.unwrap_or(f64::NAN);
            worst = worst.max(v - (prev - alpha * r.lambda * r.effective_sq));
            prev = v;
        }
        worst
    }

    pub fn trailing_mean_x_resid(&self, count: usize) -> f64 {
        let recs = &self.trace.records;
        let tail = &recs[recs.len().saturating_sub(count)..];
        tail.iter().map(|r| r.x_resid_norm).sum::<f64>() / tail.len().max(1) as f64
    }
}

/// Drives the plant with i.i.d. uniform inputs and bounded noise, adapting
/// from an offset initial estimate, recording `V` at every step.
pub fn run_synthetic_study(cfg: &SyntheticStudyConfig) -> Result<SyntheticStudy> {
    cfg.adapt.validate()?;
    if cfg.obs_dim == 0 || cfg.state_dim == 0 {
        return Err(MakoError::InvalidArgument("plant dimensions must be positive".into()));
    }
    let (h, m, n) = (cfg.obs_dim, cfg.input_dim, cfg.state_dim);
    let truth = random_plant(h, m, n, cfg.spectral_radius, derive_seed(cfg.seed, &[1]));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[2]));
    let mut ops = AdaptiveOps::from_koopman(&truth);
    let off = cfg.init_offset;
    ops.psi += DMatrix::from_fn(h, h + m, |_, _| rng.random_range(-off..=off));
    ops.c += DMatrix::from_fn(n, h, |_, _| rng.random_range(-off..=off));
    let initial = ops.clone();
    let v0 = lyapunov_value(&ops, &truth)?;

    let amp = cfg.input_amplitude;
    let mut g = DVector::from_fn(h, |_, _| rng.random_range(-1.0..1.0));
    let mut trace = AdaptTrace::default();
    for _ in 0..cfg.steps {
        let u = DVector::from_fn(m, |_, _| rng.random_range(-amp..=amp));
        let w = sample_ball(h, cfg.noise_w, &mut rng);
        let v = sample_ball(n, cfg.noise_v, &mut rng);
        let g_next = &truth.a * &g + &truth.b * &u + w;
        let x_next = &truth.c * &g_next + v;
        let mut rec = adapt_step(&mut ops, &g, &u, &g_next, &x_next, &cfg.adapt)?;
        rec.lyapunov = Some(lyapunov_value(&ops, &truth)?);
        trace.push(rec);
        g = g_next;
    }
    Ok(SyntheticStudy {
        truth,
        initial,
        last: ops,
        trace,
        v0,
    })
}
