//! Nonlinear solvers: preconditioned L-BFGS for energy minimisation and a
//! Jacobian-free Newton-GMRES method for force-balance equations.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::precond::Preconditioner;
use crate::{Error, Result};

/// A differentiable energy on `R^dim`.
pub trait Objective {
    fn dim(&self) -> usize;
    fn energy_gradient(&self, u: &[f64], grad: &mut [f64]) -> Result<f64>;
    fn energy(&self, u: &[f64]) -> Result<f64> {
        let mut g = vec![0.0; self.dim()];
        self.energy_gradient(u, &mut g)
    }
}

/// A nonlinear residual map `R^dim -> R^dim`.
pub trait Residual {
    fn dim(&self) -> usize;
    fn residual(&self, u: &[f64], out: &mut [f64]) -> Result<()>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Stop when the max-norm of the gradient or residual is below this.
    pub grad_tol: f64,
    pub max_iter: usize,
    /// L-BFGS memory.
    pub history: usize,
    pub armijo_c1: f64,
    pub max_backtracks: usize,
    /// Largest max-norm step of the first iteration.
    pub initial_step: f64,
    pub gmres_restart: usize,
    pub gmres_max_iter: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            grad_tol: 1e-8,
            max_iter: 5000,
            history: 8,
            armijo_c1: 1e-4,
            max_backtracks: 30,
            initial_step: 0.05,
            gmres_restart: 60,
            gmres_max_iter: 600,
        }
    }
}

/// One row of the iteration log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub energy: f64,
    pub grad_norm: f64,
    pub step: f64,
}

#[derive(Clone, Debug)]
pub struct SolveResult {
    pub u: Vec<f64>,
    /// Final energy (`NaN` for residual solves).
    pub energy: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub log: Vec<IterRecord>,
}

/// Writes an iteration log as CSV.
pub fn write_iteration_log<W: Write>(log: &[IterRecord], mut w: W) -> Result<()> {
    writeln!(w, "iter,energy,grad_norm,step")?;
    for r in log {
        writeln!(w, "{},{:.17e},{:.6e},{:.6e}", r.iter, r.energy, r.grad_norm, r.step)?;
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn precondition(p: Option<&dyn Preconditioner>, r: &[f64], z: &mut [f64]) {
    match p {
        Some(p) => p.apply(r, z),
        None => z.copy_from_slice(r),
    }
}

/// Minimises `obj` from `u0` with preconditioned L-BFGS.
///
/// The line search backtracks on the Armijo condition; when energy
/// differences fall below round-off it accepts steps satisfying an
/// approximate Wolfe condition on the directional derivative instead.
pub fn minimize(
    obj: &dyn Objective,
    u0: &[f64],
    cfg: &SolverConfig,
    precond: Option<&dyn Preconditioner>,
) -> Result<SolveResult> {
    let n = obj.dim();
    if u0.len() != n {
        return Err(Error::InvalidInput(format!("initial guess has length {}, expected {n}", u0.len())));
    }
    if !(cfg.grad_tol > 0.0) || cfg.history == 0 {
        return Err(Error::InvalidInput("invalid solver configuration".into()));
    }
    let mut u = u0.to_vec();
    let mut g = vec![0.0; n];
    let mut e = obj.energy_gradient(&u, &mut g)?;
    if !e.is_finite() {
        return Err(Error::NonFinite("initial energy".into()));
    }
    let mut s_hist: std::collections::VecDeque<(Vec<f64>, Vec<f64>, f64)> = Default::default();
    let mut d = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut u_new = vec![0.0; n];
    let mut g_new = vec![0.0; n];
    let mut log = vec![IterRecord { iter: 0, energy: e, grad_norm: max_norm(&g), step: 0.0 }];
    let mut alphas = vec![0.0; cfg.history];

    for it in 0..cfg.max_iter {
        let gn = max_norm(&g);
        if gn <= cfg.grad_tol {
            return Ok(SolveResult { u, energy: e, grad_norm: gn, iterations: it, converged: true, log });
        }
        // two-loop recursion
        d.copy_from_slice(&g);
        for (k, (s, y, rho)) in s_hist.iter().enumerate().rev() {
            alphas[k] = rho * dot(s, &d);
            axpy(-alphas[k], y, &mut d);
        }
        precondition(precond, &d, &mut z);
        if let Some((s, y, _)) = s_hist.back() {
            precondition(precond, y, &mut u_new);
            let yhy = dot(y, &u_new);
            if yhy > 0.0 {
                let gamma = dot(s, y) / yhy;
                z.iter_mut().for_each(|x| *x *= gamma);
            }
        }
        for (k, (s, y, rho)) in s_hist.iter().enumerate() {
            let beta = rho * dot(y, &z);
            axpy(alphas[k] - beta, s, &mut z);
        }
        for (di, zi) in d.iter_mut().zip(&z) {
            *di = -zi;
        }
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            s_hist.clear();
            precondition(precond, &g, &mut z);
            for (di, zi) in d.iter_mut().zip(&z) {
                *di = -zi;
            }
            slope = dot(&g, &d);
            if !(slope < 0.0) {
                return Err(Error::Solver { iterations: it, reason: "no descent direction".into() });
            }
        }
        let mut alpha = 1.0;
        if s_hist.is_empty() {
            let dn = max_norm(&d);
            if dn > cfg.initial_step {
                alpha = cfg.initial_step / dn;
            }
        }
        let noise = 1e-13 * (1.0 + e.abs()) * (n as f64).sqrt().max(1.0);
        let mut accepted = None;
        for _ in 0..cfg.max_backtracks {
            for i in 0..n {
                u_new[i] = u[i] + alpha * d[i];
            }
            if let Ok(en) = obj.energy_gradient(&u_new, &mut g_new) {
                if en.is_finite() {
                    let armijo = en <= e + cfg.armijo_c1 * alpha * slope;
                    let slope_new = dot(&g_new, &d);
                    let approx_wolfe = en <= e + noise && slope_new >= 0.9 * slope && slope_new <= -0.9 * slope;
                    if armijo || approx_wolfe {
                        accepted = Some(en);
                        break;
                    }
                }
            }
            alpha *= 0.5;
        }
        let Some(en) = accepted else {
            if !s_hist.is_empty() {
                s_hist.clear();
                continue;
            }
            return Ok(SolveResult { u, energy: e, grad_norm: gn, iterations: it, converged: false, log });
        };
        let mut s = vec![0.0; n];
        let mut y = vec![0.0; n];
        for i in 0..n {
            s[i] = u_new[i] - u[i];
            y[i] = g_new[i] - g[i];
        }
        let sy = dot(&s, &y);
        std::mem::swap(&mut u, &mut u_new);
        std::mem::swap(&mut g, &mut g_new);
        e = en;
        let step = max_norm(&s);
        log.push(IterRecord { iter: it + 1, energy: e, grad_norm: max_norm(&g), step });
        if sy > 1e-300 {
            if s_hist.len() == cfg.history {
                s_hist.pop_front();
            }
            s_hist.push_back((s, y, 1.0 / sy));
        }
    }
    let gn = max_norm(&g);
    Ok(SolveResult { u, energy: e, grad_norm: gn, iterations: cfg.max_iter, converged: gn <= cfg.grad_tol, log })
}

/// Right-preconditioned restarted GMRES for `J x = b` with `J` given as a
/// matrix-free product. Returns the solution and the final relative residual.
pub fn gmres(
    apply: &mut dyn FnMut(&[f64], &mut [f64]) -> Result<()>,
    b: &[f64],
    precond: Option<&dyn Preconditioner>,
    rel_tol: f64,
    restart: usize,
    max_iter: usize,
) -> Result<(Vec<f64>, f64)> {
    let n = b.len();
    let bn = dot(b, b).sqrt();
    let mut x = vec![0.0; n];
    if bn == 0.0 {
        return Ok((x, 0.0));
    }
    let restart = restart.max(1);
    let mut total = 0;
    let mut r = b.to_vec();
    let mut w = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut rel = 1.0;
    while total < max_iter {
        let beta = dot(&r, &r).sqrt();
        rel = beta / bn;
        if rel <= rel_tol {
            break;
        }
        let mut v: Vec<Vec<f64>> = vec![r.iter().map(|x| x / beta).collect()];
        let mut h = vec![vec![0.0; restart]; restart + 1];
        let mut cs = vec![0.0; restart];
        let mut sn = vec![0.0; restart];
        let mut gvec = vec![0.0; restart + 1];
        gvec[0] = beta;
        let mut k_done = 0;
        for k in 0..restart {
            precondition(precond, &v[k], &mut z);
            apply(&z, &mut w)?;
            for i in 0..=k {
                h[i][k] = dot(&w, &v[i]);
                axpy(-h[i][k], &v[i], &mut w);
            }
            let wn = dot(&w, &w).sqrt();
            h[k + 1][k] = wn;
            for i in 0..k {
                let t = cs[i] * h[i][k] + sn[i] * h[i + 1][k];
                h[i + 1][k] = -sn[i] * h[i][k] + cs[i] * h[i + 1][k];
                h[i][k] = t;
            }
            let denom = (h[k][k] * h[k][k] + h[k + 1][k] * h[k + 1][k]).sqrt();
            if denom == 0.0 {
                k_done = k;
                break;
            }
            cs[k] = h[k][k] / denom;
            sn[k] = h[k + 1][k] / denom;
            h[k][k] = denom;
            h[k + 1][k] = 0.0;
            gvec[k + 1] = -sn[k] * gvec[k];
            gvec[k] *= cs[k];
            k_done = k + 1;
            total += 1;
            rel = gvec[k + 1].abs() / bn;
            if rel <= rel_tol || wn == 0.0 || total >= max_iter {
                break;
            }
            v.push(w.iter().map(|x| x / wn).collect());
        }
        // back substitution
        let mut yk = vec![0.0; k_done];
        for i in (0..k_done).rev() {
            let mut s = gvec[i];
            for j in i + 1..k_done {
                s -= h[i][j] * yk[j];
            }
            yk[i] = s / h[i][i];
        }
        let mut corr = vec![0.0; n];
        for (j, c) in yk.iter().enumerate() {
            axpy(*c, &v[j], &mut corr);
        }
        precondition(precond, &corr, &mut z);
        axpy(1.0, &z, &mut x);
        apply(&x, &mut w)?;
        for i in 0..n {
            r[i] = b[i] - w[i];
        }
        if k_done == 0 {
            break;
        }
    }
    Ok((x, rel))
}

/// Solves `R(u) = 0` by Newton's method with finite-difference
/// Jacobian-vector products, GMRES inner solves and a residual-norm
/// backtracking line search.
pub fn force_balance(
    res: &dyn Residual,
    u0: &[f64],
    cfg: &SolverConfig,
    precond: Option<&dyn Preconditioner>,
) -> Result<SolveResult> {
    let n = res.dim();
    if u0.len() != n {
        return Err(Error::InvalidInput(format!("initial guess has length {}, expected {n}", u0.len())));
    }
    let mut u = u0.to_vec();
    let mut r = vec![0.0; n];
    res.residual(&u, &mut r)?;
    let mut log = vec![IterRecord { iter: 0, energy: f64::NAN, grad_norm: max_norm(&r), step: 0.0 }];
    let mut trial = vec![0.0; n];
    let mut r_trial = vec![0.0; n];
    for it in 0..cfg.max_iter {
        let rn = max_norm(&r);
        if !rn.is_finite() {
            return Err(Error::NonFinite("residual".into()));
        }
        if rn <= cfg.grad_tol {
            return Ok(SolveResult { u, energy: f64::NAN, grad_norm: rn, iterations: it, converged: true, log });
        }
        let r2 = dot(&r, &r).sqrt();
        let un = dot(&u, &u).sqrt();
        let base = r.clone();
        let mut jv = |v: &[f64], out: &mut [f64]| -> Result<()> {
            let vn = dot(v, v).sqrt();
            if vn == 0.0 {
                out.iter_mut().for_each(|x| *x = 0.0);
                return Ok(());
            }
            let eps = 1e-7 * (1.0 + un) / vn;
            let up: Vec<f64> = u.iter().zip(v).map(|(a, b)| a + eps * b).collect();
            res.residual(&up, out)?;
            for (o, b) in out.iter_mut().zip(&base) {
                *o = (*o - b) / eps;
            }
            Ok(())
        };
        let rhs: Vec<f64> = r.iter().map(|x| -x).collect();
        let eta = (0.1_f64).min(r2.sqrt()).max(1e-4);
        let (delta, _) = gmres(&mut jv, &rhs, precond, eta, cfg.gmres_restart, cfg.gmres_max_iter)?;
        let mut alpha = 1.0;
        let mut ok = false;
        for _ in 0..cfg.max_backtracks.min(20) {
            for i in 0..n {
                trial[i] = u[i] + alpha * delta[i];
            }
            if res.residual(&trial, &mut r_trial).is_ok() {
                let tn = dot(&r_trial, &r_trial).sqrt();
                if tn.is_finite() && tn <= (1.0 - 1e-4 * alpha) * r2 {
                    ok = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !ok {
            return Ok(SolveResult { u, energy: f64::NAN, grad_norm: rn, iterations: it, converged: false, log });
        }
        std::mem::swap(&mut u, &mut trial);
        std::mem::swap(&mut r, &mut r_trial);
        log.push(IterRecord { iter: it + 1, energy: f64::NAN, grad_norm: max_norm(&r), step: alpha * max_norm(&delta) });
    }
    let rn = max_norm(&r);
    Ok(SolveResult { u, energy: f64::NAN, grad_norm: rn, iterations: cfg.max_iter, converged: rn <= cfg.grad_tol, log })
}
