//! Low-rank coding of target features by source features,
//!
//! ```text
//! min ‖Z‖_* + λ‖E‖₁   s.t.   X = A·Z + E
//! ```
//!
//! solved by the inexact augmented Lagrange multiplier method with an
//! auxiliary copy `J` of `Z`. `A` and `X` are the feature-as-column views of
//! the source and target batches (`A = xsᵀ`, `X = xtᵀ`), so `Z` is
//! `n_source × n_target`. `E` and `Y1` are reported in the row-sample
//! layout of `xt`.

use serde::{Deserialize, Serialize};

use crate::discrepancy::LossWithGrad;
use crate::error::{Error, Result};
use crate::linalg::{nuclear_norm, svd, Cholesky, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlmConfig {
    /// Weight of the ℓ1 noise term.
    pub lambda_e: f64,
    pub mu0: f64,
    pub rho: f64,
    pub mu_max: f64,
    /// Relative residual tolerance for both constraints.
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for AlmConfig {
    fn default() -> Self {
        Self {
            lambda_e: 1.0,
            mu0: 1e-3,
            rho: 1.2,
            mu_max: 1e8,
            tol: 1e-6,
            max_iters: 500,
        }
    }
}

impl AlmConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::invalid(name, format!("must be positive, got {v}")))
            }
        };
        positive("lambda_e", self.lambda_e)?;
        positive("mu0", self.mu0)?;
        positive("mu_max", self.mu_max)?;
        positive("tol", self.tol)?;
        if !(self.rho > 1.0 && self.rho.is_finite()) {
            return Err(Error::invalid(
                "rho",
                format!("must exceed 1, got {}", self.rho),
            ));
        }
        if self.mu0 >= self.mu_max {
            return Err(Error::invalid("mu0", "must be smaller than mu_max"));
        }
        if self.max_iters == 0 {
            return Err(Error::invalid("max_iters", "must be at least 1"));
        }
        Ok(())
    }
}

/// Solver output. On non-convergence this holds the iterate with the
/// smallest relative residual.
#[derive(Debug, Clone)]
pub struct AlmState {
    /// n_source × n_target coefficients.
    pub z: Matrix,
    /// Auxiliary copy of `z` carrying the nuclear-norm prox.
    pub j: Matrix,
    /// Noise term in the layout of `xt` (n_target × features).
    pub e: Matrix,
    /// Multiplier of `X = A·Z + E`, in the layout of `xt`.
    pub y1: Matrix,
    /// Multiplier of `Z = J`.
    pub y2: Matrix,
    pub mu: f64,
    pub iterations: usize,
    /// `‖X − A·Z − E‖_F / max(1, ‖X‖_F)`.
    pub residual_primal: f64,
    /// `‖Z − J‖_F / max(1, ‖Z‖_F)`.
    pub residual_coupling: f64,
    pub converged: bool,
    /// `‖Z‖_* + λ‖E‖₁`.
    pub objective: f64,
    /// Absolute primal residual `‖X − A·Z − E‖_F` after every iteration.
    pub primal_history: Vec<f64>,
}

/// Singular value thresholding, the proximal operator of `tau·‖·‖_*`.
pub fn svt(a: &Matrix, tau: f64) -> Result<Matrix> {
    if tau.is_nan() || tau < 0.0 {
        return Err(Error::invalid(
            "tau",
            format!("must be non-negative, got {tau}"),
        ));
    }
    let d = svd(a)?;
    let shrunk: Vec<f64> = d
        .singular_values
        .iter()
        .map(|s| (s - tau).max(0.0))
        .collect();
    Ok(d.reconstruct_with(&shrunk))
}

/// Entrywise `sign(a)·max(|a| − tau, 0)`.
pub fn soft_threshold(a: &Matrix, tau: f64) -> Matrix {
    a.map(|v| {
        let mag = v.abs() - tau;
        if mag > 0.0 {
            mag.copysign(v)
        } else {
            0.0
        }
    })
}

fn check_pair(xs: &Matrix, xt: &Matrix) -> Result<()> {
    if xs.cols() != xt.cols() {
        return Err(Error::shape(
            "low-rank coding",
            format!("{} features", xs.cols()),
            xt.cols(),
        ));
    }
    if xs.rows() == 0 || xt.rows() == 0 {
        return Err(Error::Degenerate {
            op: "low-rank coding",
            reason: "both domains need at least one row".into(),
        });
    }
    Ok(())
}

struct Iterate {
    z: Matrix,
    j: Matrix,
    e: Matrix,
    y1: Matrix,
    y2: Matrix,
    mu: f64,
    iterations: usize,
    r1: f64,
    r2: f64,
}

/// Inexact ALM for the low-rank coding problem.
pub fn solve_lrr(xs: &Matrix, xt: &Matrix, cfg: &AlmConfig) -> Result<AlmState> {
    cfg.validate()?;
    check_pair(xs, xt)?;
    let (ns, nt, m) = (xs.rows(), xt.rows(), xs.cols());

    // Column views: A = xsᵀ (m×ns), X = xtᵀ (m×nt); Aᵀ·M = xs·M.
    let x = xt.transpose();
    let x_norm = x.frobenius_norm().max(1.0);
    let mut gram = xs.matmul_t(xs)?;
    for i in 0..ns {
        let v = gram.get(i, i);
        gram.set(i, i, v + 1.0);
    }
    let chol = Cholesky::factor(&gram)?;
    let at_x = xs.matmul_t(xt)?;

    let mut z = Matrix::zeros(ns, nt);
    let mut e = Matrix::zeros(m, nt);
    let mut y1 = Matrix::zeros(m, nt);
    let mut y2 = Matrix::zeros(ns, nt);
    let mut mu = cfg.mu0;
    let mut history = Vec::with_capacity(cfg.max_iters);
    let mut best: Option<Iterate> = None;
    let mut converged = false;

    for iter in 1..=cfg.max_iters {
        let mut zy = z.clone();
        zy.axpy(1.0 / mu, &y2)?;
        let j = svt(&zy, 1.0 / mu)?;

        let mut rhs = at_x.sub(&xs.matmul(&e)?)?;
        rhs.axpy(1.0, &j)?;
        let mut dual = xs.matmul(&y1)?;
        dual.axpy(-1.0, &y2)?;
        rhs.axpy(1.0 / mu, &dual)?;
        z = chol.solve(&rhs)?;

        let az = xs.t_matmul(&z)?;
        let mut target = x.sub(&az)?;
        target.axpy(1.0 / mu, &y1)?;
        e = soft_threshold(&target, cfg.lambda_e / mu);

        let mut r1 = x.sub(&az)?;
        r1.axpy(-1.0, &e)?;
        let r2 = z.sub(&j)?;
        y1.axpy(mu, &r1)?;
        y2.axpy(mu, &r2)?;

        let r1_abs = r1.frobenius_norm();
        if !r1_abs.is_finite() || !y1.is_finite() {
            return Err(Error::NumericFailure {
                op: "solve_lrr",
                reason: format!("iterate overflowed at iteration {iter}"),
            });
        }
        history.push(r1_abs);
        let rel1 = r1_abs / x_norm;
        let rel2 = r2.frobenius_norm() / z.frobenius_norm().max(1.0);
        mu = (cfg.rho * mu).min(cfg.mu_max);

        converged = rel1 <= cfg.tol && rel2 <= cfg.tol;
        let better = best
            .as_ref()
            .is_none_or(|b| rel1.max(rel2) < b.r1.max(b.r2));
        if converged || better {
            best = Some(Iterate {
                z: z.clone(),
                j: j.clone(),
                e: e.clone(),
                y1: y1.clone(),
                y2: y2.clone(),
                mu,
                iterations: iter,
                r1: rel1,
                r2: rel2,
            });
        }
        if converged {
            break;
        }
    }

    let b = best.expect("max_iters >= 1");
    let objective = nuclear_norm(&b.z)? + cfg.lambda_e * b.e.l1_norm();
    let iterations = if converged {
        b.iterations
    } else {
        history.len()
    };
    Ok(AlmState {
        z: b.z,
        j: b.j,
        e: b.e.transpose(),
        y1: b.y1.transpose(),
        y2: b.y2,
        mu: b.mu,
        iterations,
        residual_primal: b.r1,
        residual_coupling: b.r2,
        converged,
        objective,
        primal_history: history,
    })
}

/// `½‖xt − zᵀ·xs − e‖²_F` with `z` and `e` held fixed, and its gradients
/// with respect to `xs` and `xt`.
pub fn residual_surrogate(
    xs: &Matrix,
    xt: &Matrix,
    z: &Matrix,
    e: &Matrix,
) -> Result<LossWithGrad> {
    check_pair(xs, xt)?;
    if z.shape() != (xs.rows(), xt.rows()) || e.shape() != xt.shape() {
        return Err(Error::shape(
            "residual_surrogate",
            format!(
                "z {}x{}, e {}x{}",
                xs.rows(),
                xt.rows(),
                xt.rows(),
                xt.cols()
            ),
            format!("z {}x{}, e {}x{}", z.rows(), z.cols(), e.rows(), e.cols()),
        ));
    }
    let mut r = xt.sub(&z.t_matmul(xs)?)?;
    r.axpy(-1.0, e)?;
    let value = 0.5 * r.as_slice().iter().map(|v| v * v).sum::<f64>();
    let grad_source = z.matmul(&r)?.scale(-1.0);
    Ok(LossWithGrad {
        value,
        grad_source,
        grad_target: r,
    })
}

/// Low-rank discrepancy: the value is the solved objective; the gradient is
/// that of the residual surrogate at the frozen solution.
pub fn lowrank_penalty(xs: &Matrix, xt: &Matrix, cfg: &AlmConfig) -> Result<LossWithGrad> {
    let state = solve_lrr(xs, xt, cfg)?;
    if !state.converged {
        log::debug!(
            "low-rank coding stopped after {} iterations (residuals {:.2e}, {:.2e})",
            state.iterations,
            state.residual_primal,
            state.residual_coupling
        );
    }
    let mut out = residual_surrogate(xs, xt, &state.z, &state.e)?;
    out.value = state.objective;
    Ok(out)
}
