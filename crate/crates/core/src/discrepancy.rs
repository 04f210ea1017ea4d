//! Domain discrepancy penalties with analytic gradients: kernel MMD, its
//! class-conditional variant, and CORAL. The low-rank penalty lives in
//! [`crate::lowrank`] and is dispatched from [`adaptation_loss`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{covariance, median_sq_dist, sq_dist, Matrix};
use crate::lowrank::{lowrank_penalty, AlmConfig};

/// A discrepancy value together with its gradients with respect to the
/// source and target feature matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWithGrad {
    pub value: f64,
    pub grad_source: Matrix,
    pub grad_target: Matrix,
}

impl LossWithGrad {
    pub fn zero(source_shape: (usize, usize), target_shape: (usize, usize)) -> Self {
        Self {
            value: 0.0,
            grad_source: Matrix::zeros(source_shape.0, source_shape.1),
            grad_target: Matrix::zeros(target_shape.0, target_shape.1),
        }
    }
}

/// Gaussian kernel bandwidths (the `σ²` in `exp(−d²/2σ²)`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Bandwidths {
    /// Multiples of the pooled median squared distance, recomputed per call.
    Median { scales: Vec<f64> },
    /// Explicit values.
    Fixed { values: Vec<f64> },
}

impl Default for Bandwidths {
    fn default() -> Self {
        Bandwidths::Median {
            scales: vec![0.25, 0.5, 1.0, 2.0, 4.0],
        }
    }
}

impl Bandwidths {
    pub fn validate(&self) -> Result<()> {
        let list = match self {
            Bandwidths::Median { scales } => scales,
            Bandwidths::Fixed { values } => values,
        };
        if list.is_empty() {
            return Err(Error::invalid("bandwidths", "list must be non-empty"));
        }
        if let Some(v) = list.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return Err(Error::invalid(
                "bandwidths",
                format!("entries must be positive, got {v}"),
            ));
        }
        Ok(())
    }

    /// Concrete bandwidths for this source/target pair. Treated as constants
    /// by the gradient.
    pub fn resolve(&self, xs: &Matrix, xt: &Matrix) -> Result<Vec<f64>> {
        self.validate()?;
        match self {
            Bandwidths::Fixed { values } => Ok(values.clone()),
            Bandwidths::Median { scales } => {
                let med = median_sq_dist(xs, xt)?;
                Ok(scales.iter().map(|s| s * med).collect())
            }
        }
    }
}

/// Which discrepancy a base learner minimises.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "tag", rename_all = "lowercase")]
pub enum DiscrepancyMethod {
    Mmd {
        bandwidths: Bandwidths,
    },
    Cmmd {
        bandwidths: Bandwidths,
    },
    #[serde(rename = "lowrank")]
    LowRank {
        alm: AlmConfig,
    },
    Coral,
}

impl DiscrepancyMethod {
    pub fn mmd() -> Self {
        DiscrepancyMethod::Mmd {
            bandwidths: Bandwidths::default(),
        }
    }

    pub fn cmmd() -> Self {
        DiscrepancyMethod::Cmmd {
            bandwidths: Bandwidths::default(),
        }
    }

    pub fn lowrank() -> Self {
        DiscrepancyMethod::LowRank {
            alm: AlmConfig::default(),
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            DiscrepancyMethod::Mmd { .. } => "mmd",
            DiscrepancyMethod::Cmmd { .. } => "cmmd",
            DiscrepancyMethod::LowRank { .. } => "lowrank",
            DiscrepancyMethod::Coral => "coral",
        }
    }

    /// Parses a method tag, using default parameters.
    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag.to_ascii_lowercase().as_str() {
            "mmd" => Ok(Self::mmd()),
            "cmmd" => Ok(Self::cmmd()),
            "lowrank" | "low-rank" | "low_rank" => Ok(Self::lowrank()),
            "coral" => Ok(Self::Coral),
            other => Err(Error::invalid(
                "method",
                format!("unknown tag `{other}` (expected mmd, cmmd, lowrank or coral)"),
            )),
        }
    }

    pub fn needs_pseudo_labels(&self) -> bool {
        matches!(self, DiscrepancyMethod::Cmmd { .. })
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DiscrepancyMethod::Mmd { bandwidths } | DiscrepancyMethod::Cmmd { bandwidths } => {
                bandwidths.validate()
            }
            DiscrepancyMethod::LowRank { alm } => alm.validate(),
            DiscrepancyMethod::Coral => Ok(()),
        }
    }
}

fn check_cols(xs: &Matrix, xt: &Matrix, op: &'static str) -> Result<()> {
    if xs.cols() != xt.cols() {
        return Err(Error::shape(
            op,
            format!("{} columns", xs.cols()),
            format!("{} columns", xt.cols()),
        ));
    }
    Ok(())
}

/// Biased multi-kernel MMD² between the empirical distributions of `xs`
/// and `xt`, summed over `bandwidths`.
pub fn mmd_with_bandwidths(xs: &Matrix, xt: &Matrix, bandwidths: &[f64]) -> Result<LossWithGrad> {
    check_cols(xs, xt, "mmd")?;
    if xs.rows() == 0 || xt.rows() == 0 {
        return Err(Error::Degenerate {
            op: "mmd",
            reason: "both domains need at least one row".into(),
        });
    }
    if let Some(b) = bandwidths.iter().find(|b| b.is_nan() || **b <= 0.0) {
        return Err(Error::invalid(
            "bandwidth",
            format!("must be positive, got {b}"),
        ));
    }
    let (ns, nt) = (xs.rows(), xt.rows());
    let n = ns + nt;
    let dim = xs.cols();
    let row = |i: usize| if i < ns { xs.row(i) } else { xt.row(i - ns) };
    let weight = |i: usize| {
        if i < ns {
            1.0 / ns as f64
        } else {
            -1.0 / nt as f64
        }
    };

    // The value is Σ_pq w_p w_q k(z_p, z_q) over the pooled rows.
    let diag: f64 = (0..n).map(|p| weight(p) * weight(p)).sum::<f64>() * bandwidths.len() as f64;
    let mut off_diag = 0.0;
    let mut grad = vec![0.0; n * dim];
    for p in 0..n {
        let (zp, wp) = (row(p), weight(p));
        for q in p + 1..n {
            let (zq, wq) = (row(q), weight(q));
            let d2 = sq_dist(zp, zq);
            let mut k_sum = 0.0;
            let mut k_over_b = 0.0;
            for &b in bandwidths {
                let k = (-d2 / (2.0 * b)).exp();
                k_sum += k;
                k_over_b += k / b;
            }
            let wpq = wp * wq;
            off_diag += wpq * k_sum;
            // ∂/∂z_p of 2·w_p w_q k(z_p, z_q) is −2 w_p w_q (k/b)(z_p − z_q).
            let c = -2.0 * wpq * k_over_b;
            for j in 0..dim {
                let diff = zp[j] - zq[j];
                grad[p * dim + j] += c * diff;
                grad[q * dim + j] -= c * diff;
            }
        }
    }
    let value = diag + 2.0 * off_diag;
    let grad_target = grad.split_off(ns * dim);
    Ok(LossWithGrad {
        value,
        grad_source: Matrix::from_raw(ns, dim, grad),
        grad_target: Matrix::from_raw(nt, dim, grad_target),
    })
}

/// Marginal MMD with bandwidths resolved from `bandwidths`.
pub fn mmd(xs: &Matrix, xt: &Matrix, bandwidths: &Bandwidths) -> Result<LossWithGrad> {
    check_cols(xs, xt, "mmd")?;
    let bw = bandwidths.resolve(xs, xt)?;
    mmd_with_bandwidths(xs, xt, &bw)
}

fn check_labels(labels: &[usize], rows: usize, n_classes: usize, what: &'static str) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::shape(what, format!("{rows} labels"), labels.len()));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::LabelOutOfRange { label, n_classes });
    }
    Ok(())
}

/// Class-conditional MMD averaged over the classes present on both sides.
/// Rows of classes missing on either side receive zero gradient.
pub fn cmmd(
    xs: &Matrix,
    ys: &[usize],
    xt: &Matrix,
    yt_pseudo: &[usize],
    n_classes: usize,
    bandwidths: &Bandwidths,
) -> Result<LossWithGrad> {
    check_cols(xs, xt, "cmmd")?;
    check_labels(ys, xs.rows(), n_classes, "cmmd source labels")?;
    check_labels(yt_pseudo, xt.rows(), n_classes, "cmmd pseudo labels")?;
    let bw = bandwidths.resolve(xs, xt)?;

    let mut out = LossWithGrad::zero(xs.shape(), xt.shape());
    let mut present = 0usize;
    for c in 0..n_classes {
        let is: Vec<usize> = (0..ys.len()).filter(|&i| ys[i] == c).collect();
        let it: Vec<usize> = (0..yt_pseudo.len())
            .filter(|&i| yt_pseudo[i] == c)
            .collect();
        if is.is_empty() || it.is_empty() {
            continue;
        }
        present += 1;
        let part = mmd_with_bandwidths(&xs.select_rows(&is), &xt.select_rows(&it), &bw)?;
        out.value += part.value;
        scatter_add(&mut out.grad_source, &is, &part.grad_source);
        scatter_add(&mut out.grad_target, &it, &part.grad_target);
    }
    if present == 0 {
        return Err(Error::NoOverlappingClass);
    }
    if present > 1 {
        let inv = 1.0 / present as f64;
        out.value *= inv;
        out.grad_source
            .as_mut_slice()
            .iter_mut()
            .for_each(|g| *g *= inv);
        out.grad_target
            .as_mut_slice()
            .iter_mut()
            .for_each(|g| *g *= inv);
    }
    Ok(out)
}

fn scatter_add(dst: &mut Matrix, rows: &[usize], src: &Matrix) {
    for (k, &r) in rows.iter().enumerate() {
        for (d, s) in dst.row_mut(r).iter_mut().zip(src.row(k)) {
            *d += s;
        }
    }
}

/// CORAL: `‖Cov(xs) − Cov(xt)‖²_F / (4m²)`.
pub fn coral(xs: &Matrix, xt: &Matrix) -> Result<LossWithGrad> {
    check_cols(xs, xt, "coral")?;
    if xs.rows() < 2 || xt.rows() < 2 {
        return Err(Error::Degenerate {
            op: "coral",
            reason: format!(
                "need at least 2 rows per domain, got {} and {}",
                xs.rows(),
                xt.rows()
            ),
        });
    }
    let m = xs.cols() as f64;
    let diff = covariance(xs)?.sub(&covariance(xt)?)?;
    let value = diff.as_slice().iter().map(|v| v * v).sum::<f64>() / (4.0 * m * m);

    // dValue/dCov = D / (2m²); dCov/dX pulls back as 2·Xc·G / (n − 1).
    // Centred columns sum to zero, so the centring projection drops out.
    let grad = |x: &Matrix, sign: f64| -> Result<Matrix> {
        let c = sign / ((x.rows() - 1) as f64 * m * m);
        Ok(x.centered().matmul(&diff)?.scale(c))
    };
    Ok(LossWithGrad {
        value,
        grad_source: grad(xs, 1.0)?,
        grad_target: grad(xt, -1.0)?,
    })
}

/// Class information needed by the conditional method.
#[derive(Debug, Clone, Copy)]
pub struct ClassLabels<'a> {
    pub source: &'a [usize],
    pub target_pseudo: &'a [usize],
    pub n_classes: usize,
}

/// The adaptation term for one representation pair, dispatched on `method`.
pub fn adaptation_loss(
    xs: &Matrix,
    xt: &Matrix,
    labels: Option<ClassLabels<'_>>,
    method: &DiscrepancyMethod,
) -> Result<LossWithGrad> {
    match method {
        DiscrepancyMethod::Mmd { bandwidths } => mmd(xs, xt, bandwidths),
        DiscrepancyMethod::Cmmd { bandwidths } => {
            let l = labels.ok_or_else(|| {
                Error::Config("conditional MMD needs source labels and target pseudo-labels".into())
            })?;
            cmmd(xs, l.source, xt, l.target_pseudo, l.n_classes, bandwidths)
        }
        DiscrepancyMethod::LowRank { alm } => lowrank_penalty(xs, xt, alm),
        DiscrepancyMethod::Coral => coral(xs, xt),
    }
}
