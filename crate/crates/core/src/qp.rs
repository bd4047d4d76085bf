//! Box-constrained convex quadratic programs
//! `min 1/2 z'Pz + q'z + c  s.t.  l <= z <= u`, solved by operator splitting
//! with an active-set polish.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, MakoError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct QpProblem {
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    pub offset: f64,
}

impl QpProblem {
    pub fn dim(&self) -> usize {
        self.q.len()
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.p * z)) + self.q.dot(z) + self.offset
    }

    pub fn gradient(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.p * z + &self.q
    }

    pub fn project(&self, z: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(z.len(), |i, _| z[i].clamp(self.lower[i], self.upper[i]))
    }

    /// `|z - proj(z - grad f(z))|_inf`, zero exactly at a minimizer.
    pub fn projected_gradient_norm(&self, z: &DVector<f64>) -> f64 {
        let step = z - self.gradient(z);
        (z - self.project(&step)).amax()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.dim();
        if self.p.shape() != (n, n) || self.lower.len() != n || self.upper.len() != n {
            return Err(shape_err(
                "qp",
                format!("P {n}x{n}, bounds {n}"),
                format!("P {:?}, bounds {}/{}", self.p.shape(), self.lower.len(), self.upper.len()),
            ));
        }
        if let Some(i) = (0..n).find(|&i| !(self.lower[i] <= self.upper[i])) {
            return Err(MakoError::InvalidArgument(format!(
                "infeasible box at {i}: [{}, {}]",
                self.lower[i], self.upper[i]
            )));
        }
        if !self.p.iter().chain(self.q.iter()).all(|v| v.is_finite()) {
            return Err(MakoError::NonFinite("qp data"));
        }
        Ok(())
    }

    /// Plain-text dump: a header line, the dimension, then `P` row by
    /// row, `q`, `lower`, `upper` and the offset, one vector per line.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# mako qp v1\n");
        let n = self.dim();
        let row = |s: &mut String, it: &mut dyn Iterator<Item = f64>| {
            let items: Vec<String> = it.map(|v| format!("{v:e}")).collect();
            let _ = writeln!(s, "{}", items.join(" "));
        };
        let _ = writeln!(s, "{n}");
        for i in 0..n {
            row(&mut s, &mut self.p.row(i).iter().copied());
        }
        row(&mut s, &mut self.q.iter().copied());
        row(&mut s, &mut self.lower.iter().copied());
        row(&mut s, &mut self.upper.iter().copied());
        let _ = writeln!(s, "{:e}", self.offset);
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.starts_with('#'));
        let bad = |what: &str| MakoError::Format(format!("qp dump: {what}"));
        let n: usize = lines
            .next()
            .and_then(|l| l.trim().parse().ok())
            .ok_or_else(|| bad("missing dimension"))?;
        let mut vec_line = |len: usize| -> Result<Vec<f64>> {
            let line = lines.next().ok_or_else(|| bad("truncated"))?;
            let v: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|_| bad("bad number")))
                .collect::<Result<_>>()?;
            if v.len() != len {
                return Err(bad("row length"));
            }
            Ok(v)
        };
        let mut rows = Vec::with_capacity(n * n);
        for _ in 0..n {
            rows.extend(vec_line(n)?);
        }
        let p = DMatrix::from_row_slice(n, n, &rows);
        let q = DVector::from_vec(vec_line(n)?);
        let lower = DVector::from_vec(vec_line(n)?);
        let upper = DVector::from_vec(vec_line(n)?);
        let offset = vec_line(1)?[0];
        Ok(Self {
            p,
            q,
            lower,
            upper,
            offset,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QpSettings {
    pub tol: f64,
    pub max_iter: usize,
    pub rho: f64,
    pub sigma: f64,
    /// Over-relaxation factor.
    pub relaxation: f64,
    pub adapt_interval: usize,
    pub polish: bool,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 4000,
            rho: 0.1,
            sigma: 1e-6,
            relaxation: 1.6,
            adapt_interval: 25,
            polish: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QpSolution {
    pub z: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub converged: bool,
    pub polished: bool,
}

struct Factor {
    rho: f64,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

fn factor(p: &DMatrix<f64>, sigma: f64, rho: f64) -> Result<Factor> {
    let n = p.nrows();
    let mut k = p.clone();
    for i in 0..n {
        k[(i, i)] += sigma + rho;
    }
    let chol = k.cholesky().ok_or(MakoError::NonFinite("qp hessian is not positive semidefinite"))?;
    Ok(Factor { rho, chol })
}

/// Solves `qp` from `warm_start` (or zero). Returns the best iterate with
/// `converged = false` when `max_iter` runs out.
pub fn solve_box_qp(qp: &QpProblem, warm_start: Option<&DVector<f64>>, settings: &QpSettings) -> Result<QpSolution> {
    qp.validate()?;
    let n = qp.dim();
    if n == 0 {
        return Ok(QpSolution {
            z: DVector::zeros(0),
            objective: qp.offset,
            iterations: 0,
            primal_residual: 0.0,
            dual_residual: 0.0,
            converged: true,
            polished: false,
        });
    }
    let start = match warm_start {
        Some(w) if w.len() == n => qp.project(w),
        Some(w) => return Err(shape_err("warm start", n, w.len())),
        None => qp.project(&DVector::zeros(n)),
    };
    let (sigma, alpha) = (settings.sigma, settings.relaxation);
    let mut fac = factor(&qp.p, sigma, settings.rho)?;
    let mut x = start.clone();
    let mut z = start;
    let mut y = DVector::zeros(n);

    let mut best = (f64::INFINITY, z.clone(), 0.0, 0.0);
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=settings.max_iter.max(1) {
        iterations = it;
        let rhs = sigma * &x - &qp.q + fac.rho * &z - &y;
        let x_tilde = fac.chol.solve(&rhs);
        let x_relax = alpha * &x_tilde + (1.0 - alpha) * &z;
        x = alpha * &x_tilde + (1.0 - alpha) * &x;
        let z_new = qp.project(&(&x_relax + &y / fac.rho));
        y += fac.rho * (&x_relax - &z_new);
        z = z_new;

        let r_prim = (&x - &z).amax();
        let px = &qp.p * &x;
        let r_dual = (&px + &qp.q + &y).amax();
        let scale_p = x.amax().max(z.amax());
        let scale_d = px.amax().max(qp.q.amax()).max(y.amax());
        let eps_p = settings.tol * (1.0 + scale_p);
        let eps_d = settings.tol * (1.0 + scale_d);
        let merit = (r_prim / eps_p).max(r_dual / eps_d);
        if merit < best.0 {
            best = (merit, z.clone(), r_prim, r_dual);
        }
        if r_prim <= eps_p && r_dual <= eps_d {
            converged = true;
            break;
        }
        if settings.adapt_interval > 0 && it % settings.adapt_interval == 0 {
            let num = r_prim / scale_p.max(1e-30);
            let den = r_dual / scale_d.max(1e-30);
            if num > 0.0 && den > 0.0 {
                let rho_new = (fac.rho * (num / den).sqrt()).clamp(1e-6, 1e6);
                if rho_new > 5.0 * fac.rho || rho_new < 0.2 * fac.rho {
                    fac = factor(&qp.p, sigma, rho_new)?;
                }
            }
        }
    }
    let (_, z_best, r_prim, r_dual) = if converged {
        (0.0, z.clone(), (&x - &z).amax(), (&qp.p * &x + &qp.q + &y).amax())
    } else {
        best
    };

    let mut sol = QpSolution {
        objective: qp.objective(&z_best),
        z: z_best,
        iterations,
        primal_residual: r_prim,
        dual_residual: r_dual,
        converged,
        polished: false,
    };
    if settings.polish {
        if let Some(zp) = polish(qp, &sol.z, &y, settings.tol) {
            let obj = qp.objective(&zp);
            if obj <= sol.objective + settings.tol * (1.0 + sol.objective.abs()) {
                sol.polished = true;
                sol.converged = true;
                sol.objective = obj;
                sol.z = zp;
                sol.primal_residual = 0.0;
                sol.dual_residual = qp.projected_gradient_norm(&sol.z);
            }
        }
    }
    Ok(sol)
}

/// Guesses the active set from the iterate and its multipliers, solves the
/// reduced equality system exactly and keeps the result when it satisfies
/// the optimality conditions.
fn polish(qp: &QpProblem, z: &DVector<f64>, y: &DVector<f64>, tol: f64) -> Option<DVector<f64>> {
    let n = qp.dim();
    let mut fixed: Vec<Option<f64>> = vec![None; n];
    for i in 0..n {
        if qp.lower[i] == qp.upper[i] {
            fixed[i] = Some(qp.lower[i]);
        } else if z[i] - qp.lower[i] < -y[i] {
            fixed[i] = Some(qp.lower[i]);
        } else if qp.upper[i] - z[i] < y[i] {
            fixed[i] = Some(qp.upper[i]);
        }
    }
    // a few passes of primal active-set correction starting from the guess
    for _ in 0..4 {
        let cand = solve_reduced(qp, &fixed)?;
        let grad = qp.gradient(&cand);
        let gscale = 1e-9 * (1.0 + grad.amax());
        let mut changed = false;
        for i in 0..n {
            match fixed[i] {
                None => {
                    let span = 1e-9 * (1.0 + qp.lower[i].abs().max(qp.upper[i].abs()));
                    if cand[i] < qp.lower[i] - span {
                        fixed[i] = Some(qp.lower[i]);
                        changed = true;
                    } else if cand[i] > qp.upper[i] + span {
                        fixed[i] = Some(qp.upper[i]);
                        changed = true;
                    }
                }
                Some(b) if qp.lower[i] < qp.upper[i] => {
                    let at_lower = b == qp.lower[i];
                    if (at_lower && grad[i] < -gscale) || (!at_lower && grad[i] > gscale) {
                        fixed[i] = None;
                        changed = true;
                    }
                }
                Some(_) => {}
            }
        }
        if !changed {
            let cand = qp.project(&cand);
            return (qp.projected_gradient_norm(&cand) <= tol.max(1e-9) * (1.0 + grad.amax())).then_some(cand);
        }
    }
    None
}

fn solve_reduced(qp: &QpProblem, fixed: &[Option<f64>]) -> Option<DVector<f64>> {
    let n = qp.dim();
    let free: Vec<usize> = (0..n).filter(|&i| fixed[i].is_none()).collect();
    let mut z = DVector::from_fn(n, |i, _| fixed[i].unwrap_or(0.0));
    if free.is_empty() {
        return Some(z);
    }
    let k = free.len();
    let pff = DMatrix::from_fn(k, k, |a, b| qp.p[(free[a], free[b])]);
    let pz = &qp.p * &z;
    let rhs = DVector::from_fn(k, |a, _| -(qp.q[free[a]] + pz[free[a]]));
    let reg = 1e-12 * (1.0 + pff.diagonal().amax());
    let mut shifted = pff.clone();
    for i in 0..k {
        shifted[(i, i)] += reg;
    }
    let chol = shifted.cholesky()?;
    let mut sol = chol.solve(&rhs);
    for _ in 0..3 {
        let resid = &rhs - &pff * &sol;
        sol += chol.solve(&resid);
    }
    for (a, &i) in free.iter().enumerate() {
        z[i] = sol[a];
    }
    z.iter().all(|v| v.is_finite()).then_some(z)
}
