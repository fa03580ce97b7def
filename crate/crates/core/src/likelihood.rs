//! Log-likelihood of uploaded prompt sets under the generative model.
//!
//! For one client with local prompts `ω_k` assigned to pool members `a[k]`:
//!
//! ```text
//! log P(ω, z | φ) = Σ_k log N(ω_k; φ_a[k], diag α(φ_a[k]))      (L1)
//!                 + Σ_k g(φ_a[k])                               (L2, linear part)
//!                 + Σ_i log(1 - σ(g(φ_i)))                      (L2, constant part)
//! ```
//!
//! Both parts are linear in the one-hot assignment variables, which is what
//! makes exact inference by bipartite matching possible. The selection
//! log-odds `log(σ/(1-σ))` is always taken as the raw logit `g`.

use serde::{Deserialize, Serialize};

use crate::model::{validate_row, Assignment, GenerativeParams, LocalPromptSet, MlpParams};
use crate::numeric::{log1m_sigmoid, sigmoid};
use crate::{PfptError, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// How local prompts may be matched.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum AssignmentMode {
    /// Every local prompt is assigned to exactly one pool member.
    #[default]
    Full,
    /// A local prompt may stay unassigned; it is then scored against a
    /// zero-mean Gaussian with variance `α(0)` and earns no selection reward.
    Dummy,
}

/// Decomposition of the joint objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveBreakdown {
    pub l1: f64,
    pub l2_linear: f64,
    pub l2_const: f64,
    pub total: f64,
}

/// Diagonal-covariance normal log-density.
pub fn gaussian_logpdf(omega: &[f64], mean: &[f64], variances: &[f64]) -> Result<f64> {
    if omega.len() != mean.len() || variances.len() != mean.len() {
        return Err(PfptError::Shape {
            context: "gaussian log-density",
            expected: mean.len(),
            actual: if omega.len() != mean.len() { omega.len() } else { variances.len() },
        });
    }
    let mut acc = 0.0;
    for ((w, m), v) in omega.iter().zip(mean).zip(variances) {
        if !(*v > 0.0) {
            return Err(PfptError::Domain(format!("variance must be positive, got {v}")));
        }
        let r = w - m;
        acc += LN_2PI + v.ln() + r * r / v;
    }
    Ok(-0.5 * acc)
}

/// Per-pool quantities that every cost and objective evaluation needs.
#[derive(Clone, Debug)]
pub struct PoolStats {
    pub logits: Vec<f64>,
    pub variances: Vec<Vec<f64>>,
    /// `α(0)`, used by the dummy branch.
    pub zero_variances: Vec<f64>,
}

impl PoolStats {
    pub fn compute(gp: &GenerativeParams) -> Result<Self> {
        Ok(Self {
            logits: gp.pool_logits()?,
            variances: gp.pool_variances()?,
            zero_variances: gp.variances(&vec![0.0; gp.dim()])?,
        })
    }
}

fn check_dim(set: &LocalPromptSet, gp: &GenerativeParams) -> Result<()> {
    if set.dim() != gp.dim() {
        return Err(PfptError::Shape {
            context: "local prompt set",
            expected: gp.dim(),
            actual: set.dim(),
        });
    }
    Ok(())
}

fn set_loglik_with(
    set: &LocalPromptSet,
    row: &[Option<usize>],
    gp: &GenerativeParams,
    stats: &PoolStats,
) -> Result<f64> {
    let zeros = vec![0.0; gp.dim()];
    let mut acc = 0.0;
    for (omega, a) in set.prompts().iter().zip(row) {
        acc += match *a {
            Some(i) => gaussian_logpdf(
                omega.as_slice(),
                gp.pool.prompts()[i].as_slice(),
                &stats.variances[i],
            )?,
            None => gaussian_logpdf(omega.as_slice(), &zeros, &stats.zero_variances)?,
        };
    }
    Ok(acc)
}

/// `log P(ω_t | z_t, φ)`.
pub fn local_set_loglik(set: &LocalPromptSet, row: &[Option<usize>], gp: &GenerativeParams) -> Result<f64> {
    check_dim(set, gp)?;
    validate_row(row, set.len(), gp.pool.len())?;
    set_loglik_with(set, row, gp, &PoolStats::compute(gp)?)
}

/// `log P(z_t | φ)` under the Bernoulli point process.
pub fn assignment_logprior(row: &[Option<usize>], gp: &GenerativeParams) -> Result<f64> {
    validate_row(row, row.len(), gp.pool.len())?;
    let logits = gp.pool_logits()?;
    let linear: f64 = row.iter().flatten().map(|&i| logits[i]).sum();
    let constant: f64 = logits.iter().map(|&g| log1m_sigmoid(g)).sum();
    Ok(linear + constant)
}

/// Sum over clients of `log P(ω_t, z_t | φ)`, split into its linear pieces.
pub fn joint_objective(sets: &[LocalPromptSet], a: &Assignment, gp: &GenerativeParams) -> Result<ObjectiveBreakdown> {
    for set in sets {
        check_dim(set, gp)?;
    }
    a.validate(sets, gp.pool.len())?;
    let stats = PoolStats::compute(gp)?;
    objective_with(sets, a, gp, &stats)
}

pub(crate) fn objective_with(
    sets: &[LocalPromptSet],
    a: &Assignment,
    gp: &GenerativeParams,
    stats: &PoolStats,
) -> Result<ObjectiveBreakdown> {
    let mut l1 = 0.0;
    let mut l2_linear = 0.0;
    for (set, row) in sets.iter().zip(a.rows()) {
        l1 += set_loglik_with(set, row, gp, stats)?;
        l2_linear += row.iter().flatten().map(|&i| stats.logits[i]).sum::<f64>();
    }
    let per_client: f64 = stats.logits.iter().map(|&g| log1m_sigmoid(g)).sum();
    let l2_const = sets.len() as f64 * per_client;
    Ok(ObjectiveBreakdown {
        l1,
        l2_linear,
        l2_const,
        total: l1 + l2_linear + l2_const,
    })
}

/// Row-major `n_t x n` matrix of assignment gains for one client.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(PfptError::Shape {
                context: "cost matrix",
                expected: rows * cols,
                actual: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(PfptError::NonFinite("cost matrix"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(PfptError::Shape {
                context: "cost matrix rows",
                expected: cols,
                actual: rows.iter().map(Vec::len).find(|&l| l != cols).unwrap_or(cols),
            });
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, k: usize, i: usize) -> f64 {
        self.data[k * self.cols + i]
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.data[k * self.cols..(k + 1) * self.cols]
    }
}

/// `C[k][i] = log N(ω_k; φ_i, α(φ_i)) + g(φ_i)`.
///
/// The per-client constant `Σ_i log(1 - σ(g_i))` does not depend on the
/// assignment and is left out.
pub fn cost_matrix(set: &LocalPromptSet, gp: &GenerativeParams) -> Result<CostMatrix> {
    check_dim(set, gp)?;
    cost_matrix_with(set, gp, &PoolStats::compute(gp)?)
}

pub(crate) fn cost_matrix_with(set: &LocalPromptSet, gp: &GenerativeParams, stats: &PoolStats) -> Result<CostMatrix> {
    let n = gp.pool.len();
    if n == 0 {
        return Err(PfptError::Empty("pool"));
    }
    let mut data = Vec::with_capacity(set.len() * n);
    for omega in set.prompts() {
        for (i, phi) in gp.pool.prompts().iter().enumerate() {
            data.push(gaussian_logpdf(omega.as_slice(), phi.as_slice(), &stats.variances[i])? + stats.logits[i]);
        }
    }
    CostMatrix::new(set.len(), n, data)
}

/// Score of leaving local prompt `ω` unassigned in dummy mode.
pub(crate) fn dummy_cost(omega: &[f64], stats: &PoolStats) -> Result<f64> {
    gaussian_logpdf(omega, &vec![0.0; omega.len()], &stats.zero_variances)
}

/// Gradient of the joint objective, shaped like [`GenerativeParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct GenerativeGrad {
    pub pool: Vec<Vec<f64>>,
    pub selection: MlpParams,
    pub variance: MlpParams,
}

impl GenerativeGrad {
    pub fn is_finite(&self) -> bool {
        self.pool.iter().flatten().all(|v| v.is_finite())
            && self.selection.as_slice().iter().all(|v| v.is_finite())
            && self.variance.as_slice().iter().all(|v| v.is_finite())
    }

    pub fn norm_sq(&self) -> f64 {
        let p: f64 = self.pool.iter().flatten().map(|v| v * v).sum();
        let s: f64 = self.selection.as_slice().iter().map(|v| v * v).sum();
        let v: f64 = self.variance.as_slice().iter().map(|v| v * v).sum();
        p + s + v
    }
}

/// Objective and its exact gradient with respect to the pool coordinates and
/// both networks, holding the assignment fixed.
///
/// Each pool member contributes through three paths: the Gaussian mean, the
/// variance network evaluated at the member, and the selection network
/// evaluated at the member (assigned count minus `m σ(g)` per unit logit).
pub fn grad_params(
    sets: &[LocalPromptSet],
    a: &Assignment,
    gp: &GenerativeParams,
) -> Result<(ObjectiveBreakdown, GenerativeGrad)> {
    for set in sets {
        check_dim(set, gp)?;
    }
    a.validate(sets, gp.pool.len())?;
    let stats = PoolStats::compute(gp)?;
    let objective = objective_with(sets, a, gp, &stats)?;

    let d = gp.dim();
    let n = gp.pool.len();
    let m = sets.len() as f64;
    let mut mean_grad = vec![vec![0.0; d]; n];
    let mut var_grad = vec![vec![0.0; d]; n];
    let mut zero_var_grad = vec![0.0; d];
    let mut counts = vec![0usize; n];
    let mut any_dummy = false;

    for (set, row) in sets.iter().zip(a.rows()) {
        for (omega, slot) in set.prompts().iter().zip(row) {
            let omega = omega.as_slice();
            match *slot {
                Some(i) => {
                    counts[i] += 1;
                    let mean = gp.pool.prompts()[i].as_slice();
                    let v = &stats.variances[i];
                    for j in 0..d {
                        let r = omega[j] - mean[j];
                        mean_grad[i][j] += r / v[j];
                        var_grad[i][j] += 0.5 * (r * r / (v[j] * v[j]) - 1.0 / v[j]);
                    }
                }
                None => {
                    any_dummy = true;
                    let v = &stats.zero_variances;
                    for j in 0..d {
                        let r = omega[j];
                        zero_var_grad[j] += 0.5 * (r * r / (v[j] * v[j]) - 1.0 / v[j]);
                    }
                }
            }
        }
    }

    let mut grad = GenerativeGrad {
        pool: mean_grad,
        selection: MlpParams::zeros(d, gp.nets.selection.hidden_dim(), 1),
        variance: MlpParams::zeros(d, gp.nets.variance.hidden_dim(), d),
    };

    for i in 0..n {
        let phi = gp.pool.prompts()[i].as_slice();

        if counts[i] > 0 {
            let raw = gp.raw_variance(phi)?;
            let raw_grad: Vec<f64> = var_grad[i].iter().zip(&raw).map(|(g, r)| g * sigmoid(*r)).collect();
            let (pg, xg) = gp.nets.variance.backward(phi, &raw_grad)?;
            grad.variance.axpy(1.0, &pg);
            for (acc, x) in grad.pool[i].iter_mut().zip(&xg) {
                *acc += x;
            }
        }

        let logit_grad = counts[i] as f64 - m * sigmoid(stats.logits[i]);
        if logit_grad != 0.0 {
            let (pg, xg) = gp.nets.selection.backward(phi, &[logit_grad])?;
            grad.selection.axpy(1.0, &pg);
            for (acc, x) in grad.pool[i].iter_mut().zip(&xg) {
                *acc += x;
            }
        }
    }

    if any_dummy {
        let zeros = vec![0.0; d];
        let raw = gp.raw_variance(&zeros)?;
        let raw_grad: Vec<f64> = zero_var_grad.iter().zip(&raw).map(|(g, r)| g * sigmoid(*r)).collect();
        let (pg, _) = gp.nets.variance.backward(&zeros, &raw_grad)?;
        grad.variance.axpy(1.0, &pg);
    }

    if !grad.is_finite() {
        return Err(PfptError::Numerical(format!(
            "non-finite gradient (objective {:e}, pool size {n})",
            objective.total
        )));
    }
    Ok((objective, grad))
}
