//! Simulated clients: prompt selection and two local-tuning stand-ins.
//!
//! Generative mode samples local sets from a known ground truth so that
//! aggregation can be scored exactly. Drift mode pulls selected prompts
//! toward class prototypes of the client's data, mimicking local fitting on
//! skewed data.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::model::{GenerativeParams, GlobalPool, LocalPromptSet, MlpParams, Nets, Prompt, VARIANCE_FLOOR};
use crate::numeric::{distance, softplus_inv, squared_distance};
use crate::partition::ClientProfile;
use crate::seed::{rng_for, stream};
use crate::{PfptError, Result};

/// Attempts at drawing a non-empty local set before forcing one inclusion.
const MAX_RESAMPLES: usize = 1000;

/// Parameters of a synthetic ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthConfig {
    pub n_star: usize,
    pub dim: usize,
    pub separation: f64,
    /// Output bias of the true selection network.
    pub inclusion_logit: f64,
    /// Variance the true variance network produces (up to small input dependence).
    pub variance: f64,
    pub hidden: usize,
    pub seed: u64,
}

impl TruthConfig {
    pub fn new(n_star: usize, dim: usize, separation: f64, seed: u64) -> Self {
        Self {
            n_star,
            dim,
            separation,
            inclusion_logit: 3.0,
            variance: 1.0,
            hidden: 8,
            seed,
        }
    }
}

/// Known generative parameters. True prompt `i` belongs to class `i mod s`.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub params: GenerativeParams,
}

impl GroundTruth {
    pub fn pool(&self) -> &GlobalPool {
        &self.params.pool
    }

    pub fn len(&self) -> usize {
        self.params.pool.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.pool.is_empty()
    }

    pub fn inclusion_probability(&self, i: usize) -> Result<f64> {
        self.params.selection_probability(self.params.pool.prompts()[i].as_slice())
    }

    pub fn variances(&self, i: usize) -> Result<Vec<f64>> {
        self.params.variances(self.params.pool.prompts()[i].as_slice())
    }

    /// Smallest pairwise distance between true prompts, `None` for a single prompt.
    pub fn min_separation(&self) -> Option<f64> {
        min_pairwise(self.params.pool.prompts())
    }
}

/// Which true prompt produced each local prompt of one client.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub client_id: usize,
    pub sources: Vec<usize>,
}

pub(crate) fn min_pairwise(prompts: &[Prompt]) -> Option<f64> {
    let mut best: Option<f64> = None;
    for i in 0..prompts.len() {
        for j in i + 1..prompts.len() {
            let d = prompts[i].distance(&prompts[j]);
            best = Some(best.map_or(d, |b| b.min(d)));
        }
    }
    best
}

fn gaussian_vec<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

/// Farthest-point sample of `n` points from a standard normal cloud,
/// scaled up if needed so every pair is at least `separation` apart.
pub fn separated_points<R: Rng + ?Sized>(n: usize, dim: usize, separation: f64, rng: &mut R) -> Vec<Vec<f64>> {
    let cloud_size = (8 * n).max(64);
    let cloud: Vec<Vec<f64>> = (0..cloud_size).map(|_| gaussian_vec(dim, rng)).collect();
    let mut chosen = vec![0usize];
    let mut gap: Vec<f64> = cloud.iter().map(|p| squared_distance(p, &cloud[0])).collect();
    while chosen.len() < n {
        let (next, _) = gap
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
        chosen.push(next);
        for (g, p) in gap.iter_mut().zip(&cloud) {
            *g = g.min(squared_distance(p, &cloud[next]));
        }
    }
    let mut points: Vec<Vec<f64>> = chosen.iter().map(|&i| cloud[i].clone()).collect();
    let mut min = f64::INFINITY;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            min = min.min(distance(&points[i], &points[j]));
        }
    }
    if min.is_finite() && min < separation {
        let scale = separation / min * (1.0 + 1e-9);
        for p in &mut points {
            p.iter_mut().for_each(|x| *x *= scale);
        }
    }
    points
}

pub fn make_ground_truth(n_star: usize, dim: usize, separation: f64, seed: u64) -> Result<GroundTruth> {
    make_ground_truth_with(&TruthConfig::new(n_star, dim, separation, seed))
}

pub fn make_ground_truth_with(cfg: &TruthConfig) -> Result<GroundTruth> {
    if cfg.n_star == 0 || cfg.dim == 0 {
        return Err(PfptError::Domain("ground truth needs n* >= 1 and d >= 1".into()));
    }
    if !(cfg.separation > 0.0) || !(cfg.variance > VARIANCE_FLOOR) {
        return Err(PfptError::Domain(format!(
            "separation and variance must be positive (got {}, {})",
            cfg.separation, cfg.variance
        )));
    }
    let mut rng = rng_for(cfg.seed, &[stream::TRUTH]);
    let points = separated_points(cfg.n_star, cfg.dim, cfg.separation, &mut rng);
    let pool = GlobalPool::new(points.into_iter().map(Prompt::new).collect::<Result<_>>()?)?;

    let mut selection = MlpParams::init(cfg.dim, cfg.hidden, 1, &mut rng);
    selection.w2_mut().iter_mut().for_each(|w| *w *= 0.1);
    selection.b2_mut()[0] = cfg.inclusion_logit;
    let mut variance = MlpParams::init(cfg.dim, cfg.hidden, cfg.dim, &mut rng);
    variance.w2_mut().iter_mut().for_each(|w| *w *= 0.01);
    variance.b2_mut().fill(softplus_inv(cfg.variance - VARIANCE_FLOOR));

    Ok(GroundTruth {
        params: GenerativeParams::new(pool, Nets { selection, variance })?,
    })
}

/// How a client turns its selected prompts into an upload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum TuningMode {
    /// Sample from the ground truth; `noise_std` scales the true standard deviation.
    Generative { noise_std: f64 },
    /// Convex steps toward the nearest relevant prototype plus Gaussian jitter.
    Drift { steps: usize, step_size: f64, jitter: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientState {
    pub profile: ClientProfile,
    /// One anchor per class.
    pub prototypes: Vec<Vec<f64>>,
    pub k: usize,
    pub mode: TuningMode,
    /// Share of the client's data its dominant classes must cover.
    pub dominant_mass: f64,
}

impl ClientState {
    pub fn new(profile: ClientProfile, prototypes: Vec<Vec<f64>>, k: usize, mode: TuningMode) -> Result<Self> {
        if k == 0 {
            return Err(PfptError::Domain("selection size k must be at least 1".into()));
        }
        if let TuningMode::Generative { noise_std } = mode {
            if !(noise_std >= 0.0) {
                return Err(PfptError::Domain(format!("noise_std must be non-negative, got {noise_std}")));
            }
        }
        if prototypes.len() != profile.class_counts.len() {
            return Err(PfptError::Shape {
                context: "class prototypes",
                expected: profile.class_counts.len(),
                actual: prototypes.len(),
            });
        }
        Ok(Self {
            profile,
            prototypes,
            k,
            mode,
            dominant_mass: 0.9,
        })
    }

    pub fn client_id(&self) -> usize {
        self.profile.client_id
    }

    /// Dominant classes, or every class when the client holds no data.
    pub fn relevant_classes(&self) -> Vec<usize> {
        let dom = self.profile.dominant_classes(self.dominant_mass);
        if dom.is_empty() {
            (0..self.profile.class_counts.len()).collect()
        } else {
            dom
        }
    }

    /// Proportion-weighted mean of the class prototypes.
    pub fn query(&self) -> Vec<f64> {
        let d = self.prototypes.first().map_or(0, Vec::len);
        let mut q = vec![0.0; d];
        for (w, proto) in self.profile.proportions.iter().zip(&self.prototypes) {
            for (acc, x) in q.iter_mut().zip(proto) {
                *acc += w * x;
            }
        }
        q
    }
}

/// Class anchors drawn from `N(0, scale^2 I)`.
pub fn make_prototypes(classes: usize, dim: usize, scale: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng_for(seed, &[stream::PROTOTYPES]);
    (0..classes)
        .map(|_| gaussian_vec(dim, &mut rng).into_iter().map(|x| x * scale).collect())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Selection {
    pub indices: Vec<usize>,
    /// Set when the query vanished and the lowest indices were returned instead.
    pub zero_query: bool,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// The `min(k, n)` pool members most aligned with the client query.
pub fn select_prompts(state: &ClientState, pool: &GlobalPool) -> Result<Selection> {
    if pool.is_empty() {
        return Err(PfptError::Empty("pool"));
    }
    let take = state.k.min(pool.len());
    let q = state.query();
    if q.len() != pool.dim() {
        return Err(PfptError::Shape {
            context: "client query",
            expected: pool.dim(),
            actual: q.len(),
        });
    }
    if q.iter().all(|x| *x == 0.0) {
        log::warn!("client {}: zero query, selecting the first {take} prompts", state.client_id());
        return Ok(Selection {
            indices: (0..take).collect(),
            zero_query: true,
        });
    }
    let scores: Vec<f64> = pool.prompts().iter().map(|p| cosine(&q, p.as_slice())).collect();
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(take);
    Ok(Selection {
        indices: idx,
        zero_query: false,
    })
}

/// Samples a local set from the ground truth.
///
/// Only true prompts of the client's dominant classes are candidates; each
/// is included with its true selection probability and perturbed with
/// Gaussian noise of standard deviation `noise_std * sqrt(α*)`. Draws are
/// repeated until the set is non-empty. The returned order is shuffled.
pub fn local_tune_generative<R: Rng + ?Sized>(
    state: &ClientState,
    truth: &GroundTruth,
    rng: &mut R,
) -> Result<(LocalPromptSet, GenerationRecord)> {
    let noise_std = match state.mode {
        TuningMode::Generative { noise_std } => noise_std,
        TuningMode::Drift { .. } => 0.0,
    };
    let s = state.profile.class_counts.len().max(1);
    let classes = state.relevant_classes();
    let relevant: Vec<usize> = (0..truth.len()).filter(|i| classes.contains(&(i % s))).collect();
    let relevant = if relevant.is_empty() { (0..truth.len()).collect() } else { relevant };
    let probs: Vec<f64> = relevant
        .iter()
        .map(|&i| truth.inclusion_probability(i))
        .collect::<Result<_>>()?;

    let mut sources = Vec::new();
    for _ in 0..MAX_RESAMPLES {
        sources = relevant
            .iter()
            .zip(&probs)
            .filter(|(_, &p)| rng.random::<f64>() < p)
            .map(|(&i, _)| i)
            .collect();
        if !sources.is_empty() {
            break;
        }
    }
    if sources.is_empty() {
        let (best, _) = relevant
            .iter()
            .zip(&probs)
            .fold((relevant[0], f64::NEG_INFINITY), |(bi, bp), (&i, &p)| if p > bp { (i, p) } else { (bi, bp) });
        sources.push(best);
    }
    sources.shuffle(rng);

    let mut prompts = Vec::with_capacity(sources.len());
    for &i in &sources {
        let mean = truth.pool().prompts()[i].as_slice();
        let var = truth.variances(i)?;
        let values = mean
            .iter()
            .zip(&var)
            .map(|(m, v)| {
                let e: f64 = StandardNormal.sample(rng);
                m + noise_std * v.sqrt() * e
            })
            .collect();
        prompts.push(Prompt::new(values)?);
    }
    let id = state.client_id();
    Ok((
        LocalPromptSet::new(id, prompts)?,
        GenerationRecord { client_id: id, sources },
    ))
}

/// Moves each selected prompt toward its nearest relevant prototype.
pub fn local_tune_drift<R: Rng + ?Sized>(
    state: &ClientState,
    selected: &[Prompt],
    rng: &mut R,
) -> Result<LocalPromptSet> {
    if selected.is_empty() {
        return Err(PfptError::Empty("selected prompts"));
    }
    let (steps, eta, jitter) = match state.mode {
        TuningMode::Drift {
            steps,
            step_size,
            jitter,
        } => (steps, step_size, jitter),
        TuningMode::Generative { .. } => (0, 0.0, 0.0),
    };
    let anchors: Vec<&Vec<f64>> = state.relevant_classes().iter().map(|&c| &state.prototypes[c]).collect();
    let mut out = Vec::with_capacity(selected.len());
    for p in selected {
        let mut x = p.as_slice().to_vec();
        for _ in 0..steps {
            let target = anchors
                .iter()
                .fold((anchors[0], f64::INFINITY), |(best, bd), a| {
                    let d = squared_distance(&x, a);
                    if d < bd {
                        (a, d)
                    } else {
                        (best, bd)
                    }
                })
                .0;
            for (xi, ti) in x.iter_mut().zip(target.iter()) {
                *xi = (1.0 - eta) * *xi + eta * ti;
                if jitter > 0.0 {
                    let e: f64 = StandardNormal.sample(rng);
                    *xi += jitter * e;
                }
            }
        }
        out.push(Prompt::new(x)?);
    }
    LocalPromptSet::new(state.client_id(), out)
}
