#![allow(dead_code)]

pub mod fd;
pub mod qp_oracle;

use mako::data::{Episode, MetaDataset, SubDataset};
use mako::systems::{nominal_params, SystemKind};
use mako::trainer::KoopmanOps;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
}

pub fn random_vector(len: usize, scale: f64, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(len, |_, _| rng.random_range(-scale..scale))
}

/// Random square matrix rescaled to spectral norm `rho`, so its spectral
/// radius is at most `rho`.
pub fn random_stable(n: usize, rho: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let m = random_matrix(n, n, 1.0, rng);
    let sigma = m.clone().singular_values().max();
    m * (rho / sigma)
}

/// `rho` times a random orthogonal matrix: every eigenvalue has modulus
/// `rho`.
pub fn random_rotation(n: usize, rho: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    random_matrix(n, n, 1.0, rng).qr().q() * rho
}

/// Lifted-linear plant `g+ = A g + B u`, `x = C g`, built independently of
/// the library's own generator.
pub fn random_plant(h: usize, m: usize, n: usize, rho: f64, seed: u64) -> KoopmanOps {
    let mut r = rng(seed);
    let a = random_rotation(h, rho, &mut r);
    let b = random_matrix(h, m, 1.0, &mut r);
    let c = random_matrix(n, h, 1.0, &mut r);
    KoopmanOps::new(a, b, c, 0).unwrap()
}

/// Meta-dataset whose tasks are linear systems `x+ = A_i x + B_i u` under
/// uniform inputs on `[-1, 1]`, labelled as cartpole data for shape
/// purposes (n = 4, m = 1).
pub fn linear_meta_dataset(
    systems: &[(DMatrix<f64>, DMatrix<f64>)],
    episodes: usize,
    len: usize,
    seed: u64,
) -> MetaDataset {
    let kind = SystemKind::Cartpole;
    let (n, m) = (kind.state_dim(), kind.input_dim());
    let mut subs = Vec::new();
    for (i, (a, b)) in systems.iter().enumerate() {
        let mut r = rng(seed.wrapping_add(1000 * i as u64));
        let eps = (0..episodes)
            .map(|_| {
                let mut x = random_vector(n, 1.0, &mut r);
                let (mut xs, mut us) = (Vec::new(), Vec::new());
                for _ in 0..len {
                    let u = random_vector(m, 1.0, &mut r);
                    xs.extend(x.iter());
                    us.extend(u.iter());
                    x = a * &x + b * &u;
                }
                Episode::from_parts(xs, us, vec![0; len], n, m).unwrap()
            })
            .collect();
        subs.push(SubDataset {
            params: nominal_params(kind),
            episodes: eps,
            regenerated: 0,
        });
    }
    MetaDataset::new(kind, seed, len, subs).unwrap()
}

/// Forward-difference linearization of the cartpole about the upright
/// equilibrium, wrapped as a model with an identity lifting. Coordinates
/// are scaled like randomly excited cartpole data so that the MPC weights
/// act as they do on trained models.
pub fn linearized_cartpole_model(params: &mako::systems::SystemParams) -> mako::trainer::MakoModel {
    use mako::data::NormStats;
    use mako::network::MlpParams;
    use mako::trainer::MakoModel;
    let n = 4;
    let h = 1e-6;
    let zero = vec![0.0; n];
    let f0 = params.step(&zero, &[0.0]).unwrap();
    let mut a = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut x = zero.clone();
        x[j] = h;
        let f = params.step(&x, &[0.0]).unwrap();
        for i in 0..n {
            a[(i, j)] = (f[i] - f0[i]) / h;
        }
    }
    let fu = params.step(&zero, &[h]).unwrap();
    let b = DMatrix::from_fn(n, 1, |i, _| (fu[i] - f0[i]) / h);
    let state_std = vec![0.1, 0.6, 0.15, 1.75];
    let input_std = 11.5;
    let s = DMatrix::from_diagonal(&DVector::from_vec(state_std.clone()));
    let s_inv = DMatrix::from_diagonal(&DVector::from_iterator(n, state_std.iter().map(|v| 1.0 / v)));
    let a_n = &s_inv * a * &s;
    let b_n = &s_inv * b * input_std;
    MakoModel {
        theta: MlpParams::passthrough(n, &[2 * n]).unwrap(),
        ops: vec![KoopmanOps::new(a_n, b_n, DMatrix::identity(n, n), 0).unwrap()],
        norm: NormStats {
            state_mean: vec![0.0; n],
            state_std,
            input_mean: vec![0.0],
            input_std: vec![input_std],
        },
        horizon: 16,
        seed: 0,
    }
}
