//! Domain types and the two small networks of the generative model.
//!
//! A pool member `φ` is selected by a client with probability `σ(g(φ))`, where
//! `g` is the selection network, and a local prompt generated from it is
//! Gaussian around `φ` with diagonal covariance `α(φ)`, where `α` is the
//! softplus of the variance network's output plus [`VARIANCE_FLOOR`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numeric::{sigmoid, softplus, softplus_inv};
use crate::{PfptError, Result};

/// Lower bound added to every variance produced by the variance network.
pub const VARIANCE_FLOOR: f64 = 1e-6;

/// Default hidden width of both networks.
pub const DEFAULT_HIDDEN: usize = 32;

/// A prompt: a finite, non-empty real vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Prompt(Vec<f64>);

impl Prompt {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(PfptError::Empty("prompt"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(PfptError::NonFinite("prompt"));
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        assert!(dim > 0, "prompt dimension must be positive");
        Self(vec![0.0; dim])
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    #[cfg(test)]
    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn distance(&self, other: &Prompt) -> f64 {
        crate::numeric::distance(&self.0, &other.0)
    }
}

impl TryFrom<Vec<f64>> for Prompt {
    type Error = PfptError;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Prompt::new(values)
    }
}

impl From<Prompt> for Vec<f64> {
    fn from(p: Prompt) -> Self {
        p.0
    }
}

fn common_dim(prompts: &[Prompt], context: &'static str) -> Result<usize> {
    let first = prompts.first().ok_or(PfptError::Empty(context))?;
    let d = first.dim();
    for p in prompts {
        if p.dim() != d {
            return Err(PfptError::Shape {
                context,
                expected: d,
                actual: p.dim(),
            });
        }
    }
    Ok(d)
}

/// The prompts one client uploads in one round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalPromptSet {
    pub client_id: usize,
    prompts: Vec<Prompt>,
}

impl LocalPromptSet {
    pub fn new(client_id: usize, prompts: Vec<Prompt>) -> Result<Self> {
        common_dim(&prompts, "local prompt set")?;
        Ok(Self { client_id, prompts })
    }

    pub fn prompts(&self) -> &[Prompt] {
        &self.prompts
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.prompts[0].dim()
    }
}

/// The server's pool of summarizing prompts. Identities are positional.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalPool {
    prompts: Vec<Prompt>,
    pub generation: u64,
}

impl GlobalPool {
    pub fn new(prompts: Vec<Prompt>) -> Result<Self> {
        Self::with_generation(prompts, 0)
    }

    pub fn with_generation(prompts: Vec<Prompt>, generation: u64) -> Result<Self> {
        common_dim(&prompts, "global pool")?;
        Ok(Self { prompts, generation })
    }

    pub fn prompts(&self) -> &[Prompt] {
        &self.prompts
    }

    #[cfg(test)]
    pub(crate) fn prompts_mut(&mut self) -> &mut [Prompt] {
        &mut self.prompts
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.prompts[0].dim()
    }

    /// Coordinate-wise mean of the pool members.
    pub fn centroid(&self) -> Vec<f64> {
        let d = self.dim();
        let mut c = vec![0.0; d];
        for p in &self.prompts {
            for (acc, v) in c.iter_mut().zip(p.as_slice()) {
                *acc += v;
            }
        }
        let n = self.len() as f64;
        c.iter_mut().for_each(|v| *v /= n);
        c
    }

    pub fn into_prompts(self) -> Vec<Prompt> {
        self.prompts
    }
}

/// Parameters of a one-hidden-layer tanh network `R^input -> R^output`.
///
/// Stored flat as `[W1 (hidden x input, row-major) | b1 | W2 (output x hidden) | b2]`
/// so that gradients share the same type and optimizers can treat the whole
/// network as one vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    input: usize,
    hidden: usize,
    output: usize,
    theta: Vec<f64>,
}

impl MlpParams {
    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        assert!(input > 0 && hidden > 0 && output > 0, "network widths must be positive");
        let len = hidden * input + hidden + output * hidden + output;
        Self {
            input,
            hidden,
            output,
            theta: vec![0.0; len],
        }
    }

    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero.
    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(input, hidden, output);
        let a1 = 1.0 / (input as f64).sqrt();
        for w in p.w1_mut() {
            *w = rng.random_range(-a1..=a1);
        }
        let a2 = 1.0 / (hidden as f64).sqrt();
        for w in p.w2_mut() {
            *w = rng.random_range(-a2..=a2);
        }
        p
    }

    /// Rebuild from a flat parameter vector in the documented layout.
    pub fn from_flat(input: usize, hidden: usize, output: usize, theta: Vec<f64>) -> Result<Self> {
        let expected = Self::zeros(input, hidden, output).theta.len();
        if theta.len() != expected {
            return Err(PfptError::Shape {
                context: "network parameters",
                expected,
                actual: theta.len(),
            });
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(PfptError::NonFinite("network parameters"));
        }
        Ok(Self {
            input,
            hidden,
            output,
            theta,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden
    }

    pub fn output_dim(&self) -> usize {
        self.output
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.theta
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    fn offsets(&self) -> [usize; 4] {
        let w1 = 0;
        let b1 = self.hidden * self.input;
        let w2 = b1 + self.hidden;
        let b2 = w2 + self.output * self.hidden;
        [w1, b1, w2, b2]
    }

    pub fn w1(&self) -> &[f64] {
        let [w1, b1, _, _] = self.offsets();
        &self.theta[w1..b1]
    }

    pub fn b1(&self) -> &[f64] {
        let [_, b1, w2, _] = self.offsets();
        &self.theta[b1..w2]
    }

    pub fn w2(&self) -> &[f64] {
        let [_, _, w2, b2] = self.offsets();
        &self.theta[w2..b2]
    }

    pub fn b2(&self) -> &[f64] {
        let [_, _, _, b2] = self.offsets();
        &self.theta[b2..]
    }

    pub fn w1_mut(&mut self) -> &mut [f64] {
        let [w1, b1, _, _] = self.offsets();
        &mut self.theta[w1..b1]
    }

    pub fn b1_mut(&mut self) -> &mut [f64] {
        let [_, b1, w2, _] = self.offsets();
        &mut self.theta[b1..w2]
    }

    pub fn w2_mut(&mut self) -> &mut [f64] {
        let [_, _, w2, b2] = self.offsets();
        &mut self.theta[w2..b2]
    }

    pub fn b2_mut(&mut self) -> &mut [f64] {
        let [_, _, _, b2] = self.offsets();
        &mut self.theta[b2..]
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input {
            return Err(PfptError::Shape {
                context: "network input",
                expected: self.input,
                actual: x.len(),
            });
        }
        Ok(())
    }

    fn hidden_activations(&self, x: &[f64]) -> Vec<f64> {
        self.w1()
            .chunks_exact(self.input)
            .zip(self.b1())
            .map(|(row, b)| (row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>() + b).tanh())
            .collect()
    }

    fn output_from_hidden(&self, h: &[f64]) -> Vec<f64> {
        self.w2()
            .chunks_exact(self.hidden)
            .zip(self.b2())
            .map(|(row, b)| row.iter().zip(h).map(|(w, hi)| w * hi).sum::<f64>() + b)
            .collect()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let h = self.hidden_activations(x);
        Ok(self.output_from_hidden(&h))
    }

    /// Reverse-mode gradients of `out_grad · forward(x)` with respect to every
    /// parameter (returned in the same layout) and to `x`.
    pub fn backward(&self, x: &[f64], out_grad: &[f64]) -> Result<(MlpParams, Vec<f64>)> {
        self.check_input(x)?;
        if out_grad.len() != self.output {
            return Err(PfptError::Shape {
                context: "network output gradient",
                expected: self.output,
                actual: out_grad.len(),
            });
        }
        let h = self.hidden_activations(x);
        let mut grads = MlpParams::zeros(self.input, self.hidden, self.output);

        grads.b2_mut().copy_from_slice(out_grad);
        for (row, &go) in grads.w2_mut().chunks_exact_mut(self.hidden).zip(out_grad) {
            for (g, hi) in row.iter_mut().zip(&h) {
                *g = go * hi;
            }
        }

        // through W2 and tanh
        let mut pre = vec![0.0; self.hidden];
        for (row, &go) in self.w2().chunks_exact(self.hidden).zip(out_grad) {
            for (acc, w) in pre.iter_mut().zip(row) {
                *acc += go * w;
            }
        }
        for (p, hi) in pre.iter_mut().zip(&h) {
            *p *= 1.0 - hi * hi;
        }

        grads.b1_mut().copy_from_slice(&pre);
        for (row, &gp) in grads.w1_mut().chunks_exact_mut(self.input).zip(&pre) {
            for (g, xi) in row.iter_mut().zip(x) {
                *g = gp * xi;
            }
        }

        let mut input_grad = vec![0.0; self.input];
        for (row, &gp) in self.w1().chunks_exact(self.input).zip(&pre) {
            for (acc, w) in input_grad.iter_mut().zip(row) {
                *acc += gp * w;
            }
        }
        Ok((grads, input_grad))
    }

    /// `self += scale * other`, shapes assumed equal.
    pub fn axpy(&mut self, scale: f64, other: &MlpParams) {
        debug_assert_eq!(self.theta.len(), other.theta.len());
        for (a, b) in self.theta.iter_mut().zip(&other.theta) {
            *a += scale * b;
        }
    }

    pub fn same_shape(&self, other: &MlpParams) -> bool {
        self.input == other.input && self.hidden == other.hidden && self.output == other.output
    }
}

/// The selection and variance networks, carried across rounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Nets {
    /// Selection-logit network `g`, output width 1.
    pub selection: MlpParams,
    /// Raw variance network, output width `d`; `α = softplus(raw) + floor`.
    pub variance: MlpParams,
}

impl Nets {
    /// Fresh networks; the variance output bias starts at `softplus⁻¹(1)` so
    /// that initial variances are close to one.
    pub fn fresh<R: Rng + ?Sized>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        let selection = MlpParams::init(dim, hidden, 1, rng);
        let mut variance = MlpParams::init(dim, hidden, dim, rng);
        variance.b2_mut().fill(softplus_inv(1.0));
        Self { selection, variance }
    }

    pub fn dim(&self) -> usize {
        self.selection.input_dim()
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        let ok = self.selection.input_dim() == dim
            && self.selection.output_dim() == 1
            && self.variance.input_dim() == dim
            && self.variance.output_dim() == dim;
        if !ok {
            return Err(PfptError::Shape {
                context: "generative networks",
                expected: dim,
                actual: self.selection.input_dim(),
            });
        }
        Ok(())
    }
}

/// All parameters of the generative model: the pool plus both networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerativeParams {
    pub pool: GlobalPool,
    pub nets: Nets,
}

impl GenerativeParams {
    pub fn new(pool: GlobalPool, nets: Nets) -> Result<Self> {
        nets.validate(pool.dim())?;
        Ok(Self { pool, nets })
    }

    pub fn dim(&self) -> usize {
        self.pool.dim()
    }

    /// Raw (pre-softplus) variance network output.
    pub fn raw_variance(&self, psi: &[f64]) -> Result<Vec<f64>> {
        self.nets.variance.forward(psi)
    }

    /// `α(ψ)`: per-coordinate variances, each at least [`VARIANCE_FLOOR`].
    pub fn variances(&self, psi: &[f64]) -> Result<Vec<f64>> {
        Ok(self
            .raw_variance(psi)?
            .into_iter()
            .map(|r| softplus(r) + VARIANCE_FLOOR)
            .collect())
    }

    /// `g(φ)`: the selection logit.
    pub fn selection_logit(&self, phi: &[f64]) -> Result<f64> {
        Ok(self.nets.selection.forward(phi)?[0])
    }

    /// `σ(g(φ))`.
    pub fn selection_probability(&self, phi: &[f64]) -> Result<f64> {
        self.selection_logit(phi).map(sigmoid)
    }

    /// Logits of every pool member, in pool order.
    pub fn pool_logits(&self) -> Result<Vec<f64>> {
        self.pool
            .prompts()
            .iter()
            .map(|p| self.selection_logit(p.as_slice()))
            .collect()
    }

    /// Variances of every pool member, in pool order.
    pub fn pool_variances(&self) -> Result<Vec<Vec<f64>>> {
        self.pool
            .prompts()
            .iter()
            .map(|p| self.variances(p.as_slice()))
            .collect()
    }
}

/// Per-client maps from local prompt index to pool index.
///
/// `None` marks a local prompt left unassigned, which only the optional
/// dummy-column mode produces.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    rows: Vec<Vec<Option<usize>>>,
}

impl Assignment {
    pub fn new(rows: Vec<Vec<Option<usize>>>) -> Self {
        Self { rows }
    }

    /// Every local prompt assigned.
    pub fn full(rows: Vec<Vec<usize>>) -> Self {
        Self {
            rows: rows
                .into_iter()
                .map(|r| r.into_iter().map(Some).collect())
                .collect(),
        }
    }

    pub fn rows(&self) -> &[Vec<Option<usize>>] {
        &self.rows
    }

    pub fn row(&self, t: usize) -> &[Option<usize>] {
        &self.rows[t]
    }

    pub fn num_clients(&self) -> usize {
        self.rows.len()
    }

    pub fn is_full(&self) -> bool {
        self.rows.iter().flatten().all(Option::is_some)
    }

    /// Number of local prompts matched to each pool index.
    pub fn column_counts(&self, pool_size: usize) -> Vec<usize> {
        let mut counts = vec![0; pool_size];
        for i in self.rows.iter().flatten().flatten() {
            counts[*i] += 1;
        }
        counts
    }

    /// Rewrite pool indices through `remap` (`None` entries of `remap` must
    /// not be referenced).
    pub fn remapped(&self, remap: &[Option<usize>]) -> Assignment {
        Assignment {
            rows: self
                .rows
                .iter()
                .map(|r| r.iter().map(|a| a.and_then(|i| remap[i])).collect())
                .collect(),
        }
    }

    /// Check row lengths, index range and per-client injectivity.
    pub fn validate(&self, sets: &[LocalPromptSet], pool_size: usize) -> Result<()> {
        if self.rows.len() != sets.len() {
            return Err(PfptError::Assignment(format!(
                "{} assignment rows for {} clients",
                self.rows.len(),
                sets.len()
            )));
        }
        for (t, (row, set)) in self.rows.iter().zip(sets).enumerate() {
            validate_row(row, set.len(), pool_size).map_err(|e| match e {
                PfptError::Assignment(msg) => PfptError::Assignment(format!("client {t}: {msg}")),
                other => other,
            })?;
        }
        Ok(())
    }
}

pub(crate) fn validate_row(row: &[Option<usize>], n_local: usize, pool_size: usize) -> Result<()> {
    if row.len() != n_local {
        return Err(PfptError::Assignment(format!(
            "row has {} entries for {} local prompts",
            row.len(),
            n_local
        )));
    }
    let mut seen = vec![false; pool_size];
    for &i in row.iter().flatten() {
        if i >= pool_size {
            return Err(PfptError::Assignment(format!(
                "pool index {i} out of range for pool of {pool_size}"
            )));
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(PfptError::Assignment(format!("pool index {i} used twice")));
        }
    }
    Ok(())
}
