//! Multi-round federated simulation.
//!
//! Each round samples clients without replacement, lets them produce
//! uploads concurrently, aggregates with the chosen method and records
//! metrics. All randomness is derived from the master seed, the round and
//! the client id, so results do not depend on thread scheduling.

use std::time::Instant;

use rand::seq::index::sample;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{server_aggregate, AggregationConfig, AggregationReport, NetInit};
use crate::baselines::{default_gmm_k, fedavg_prompts, gmm_aggregate};
use crate::clients::{
    local_tune_drift, local_tune_generative, make_ground_truth_with, make_prototypes, min_pairwise, select_prompts,
    ClientState, GenerationRecord, GroundTruth, TruthConfig, TuningMode,
};
use crate::likelihood::CostMatrix;
use crate::matching::hungarian_max;
use crate::model::{Assignment, GenerativeParams, GlobalPool, LocalPromptSet, Nets, Prompt, DEFAULT_HIDDEN};
use crate::numeric::distance;
use crate::partition::{partition, ClientProfile, PartitionSpec};
use crate::seed::{derive_seed, rng_for, stream};
use crate::{PfptError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregator {
    Pfpt,
    Fedavg,
    Gmm,
}

impl std::str::FromStr for Aggregator {
    type Err = PfptError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pfpt" => Ok(Self::Pfpt),
            "fedavg" => Ok(Self::Fedavg),
            "gmm" => Ok(Self::Gmm),
            other => Err(PfptError::Domain(format!(
                "unknown aggregator `{other}` (expected pfpt, fedavg or gmm)"
            ))),
        }
    }
}

/// Settings shared by every simulated client.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientTemplate {
    pub k: usize,
    pub mode: TuningMode,
    pub dominant_mass: f64,
    /// Standard deviation of the class prototypes.
    pub prototype_scale: f64,
}

impl Default for ClientTemplate {
    fn default() -> Self {
        Self {
            k: 10,
            mode: TuningMode::Generative { noise_std: 0.05 },
            dominant_mass: 0.9,
            prototype_scale: 3.0,
        }
    }
}

/// Ground-truth settings for generative clients; the seed comes from the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthSettings {
    pub n_star: usize,
    pub separation: f64,
    pub inclusion_logit: f64,
    pub variance: f64,
    pub hidden: usize,
}

impl Default for TruthSettings {
    fn default() -> Self {
        Self {
            n_star: 12,
            separation: 1.0,
            inclusion_logit: 3.0,
            variance: 1.0,
            hidden: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub rounds: usize,
    pub sampled_per_round: usize,
    pub dim: usize,
    /// Its `clients` field is the total client population.
    pub partition: PartitionSpec,
    pub client: ClientTemplate,
    pub truth: TruthSettings,
    pub aggregator: Aggregator,
    /// Mixture size for the GMM aggregator; `None` means the median upload size.
    pub gmm_k: Option<usize>,
    pub aggregation: AggregationConfig,
    pub hidden: usize,
    /// Re-initialise the networks every round instead of carrying them over.
    pub reinit_nets: bool,
    /// Size of the random pool that exists before the first round.
    pub init_pool_size: usize,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            rounds: 120,
            sampled_per_round: 10,
            dim: 16,
            partition: PartitionSpec {
                alpha: 10.0,
                ..PartitionSpec::uniform(crate::partition::Scheme::Dirichlet, 4, 100, 500, 0)
            },
            client: ClientTemplate::default(),
            truth: TruthSettings::default(),
            aggregator: Aggregator::Pfpt,
            gmm_k: None,
            aggregation: AggregationConfig::default(),
            hidden: DEFAULT_HIDDEN,
            reinit_nets: false,
            init_pool_size: 10,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn total_clients(&self) -> usize {
        self.partition.clients
    }

    pub fn is_recovery(&self) -> bool {
        matches!(self.client.mode, TuningMode::Generative { .. })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PfptError::Domain(m));
        if self.rounds == 0 {
            return bad("rounds must be at least 1".into());
        }
        if self.sampled_per_round == 0 || self.sampled_per_round > self.total_clients() {
            return bad(format!(
                "sampled clients per round ({}) must lie in 1..={}",
                self.sampled_per_round,
                self.total_clients()
            ));
        }
        if self.dim == 0 || self.hidden == 0 {
            return bad("dim and hidden width must be positive".into());
        }
        if self.init_pool_size == 0 {
            return bad("init_pool_size must be positive".into());
        }
        if !(self.client.dominant_mass > 0.0 && self.client.dominant_mass <= 1.0) {
            return bad(format!("dominant_mass must lie in (0, 1], got {}", self.client.dominant_mass));
        }
        self.aggregation.validate()
    }
}

/// Per-round summary. Recovery metrics are present only for generative clients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub pool_size: usize,
    pub objective: Option<f64>,
    pub alignment_accuracy: Option<f64>,
    pub pool_recovery_error: Option<f64>,
    pub centroid_shift: f64,
}

/// Everything an observer sees after a round.
pub struct RoundOutput<'a> {
    pub metrics: &'a RoundMetrics,
    pub pool: &'a GlobalPool,
    pub report: Option<&'a AggregationReport>,
    pub sampled: &'a [usize],
    pub wall_ms: u64,
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub metrics: Vec<RoundMetrics>,
    pub final_pool: GlobalPool,
    pub final_params: Option<GenerativeParams>,
    pub class_totals: Vec<u64>,
    pub profiles: Vec<ClientProfile>,
    pub truth: Option<GroundTruth>,
    pub wall_ms: Vec<u64>,
}

/// Sorted ids of the clients taking part in `round`.
pub fn sample_clients(total: usize, per_round: usize, seed: u64, round: usize) -> Vec<usize> {
    let mut rng = rng_for(seed, &[stream::SAMPLING, round as u64]);
    let mut ids = sample(&mut rng, total, per_round.min(total)).into_vec();
    ids.sort_unstable();
    ids
}

fn initial_pool(size: usize, dim: usize, seed: u64) -> Result<GlobalPool> {
    let mut rng = rng_for(seed, &[stream::INIT_POOL]);
    let prompts = (0..size)
        .map(|_| Prompt::new((0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()))
        .collect::<Result<Vec<_>>>()?;
    GlobalPool::with_generation(prompts, 0)
}

/// Maps each true prompt to a pool index (or `None`) by minimum total distance.
pub fn truth_to_pool(pool: &GlobalPool, truth: &GlobalPool) -> Result<Vec<Option<usize>>> {
    let (n, ns) = (pool.len(), truth.len());
    if n == 0 || ns == 0 {
        return Ok(vec![None; ns]);
    }
    let dist = |i: usize, j: usize| distance(truth.prompts()[i].as_slice(), pool.prompts()[j].as_slice());
    let mut map = vec![None; ns];
    if ns <= n {
        let rows: Vec<Vec<f64>> = (0..ns).map(|i| (0..n).map(|j| -dist(i, j)).collect()).collect();
        for (i, j) in hungarian_max(&CostMatrix::from_rows(&rows)?)?.row_to_col.into_iter().enumerate() {
            map[i] = Some(j);
        }
    } else {
        let rows: Vec<Vec<f64>> = (0..n).map(|j| (0..ns).map(|i| -dist(i, j)).collect()).collect();
        for (j, i) in hungarian_max(&CostMatrix::from_rows(&rows)?)?.row_to_col.into_iter().enumerate() {
            map[i] = Some(j);
        }
    }
    Ok(map)
}

/// Fraction of local prompts whose pool prompt is the match of their
/// generating true prompt. `None` when there are no local prompts.
pub fn alignment_accuracy(
    assignment: &Assignment,
    records: &[GenerationRecord],
    pool: &GlobalPool,
    truth: &GlobalPool,
) -> Result<Option<f64>> {
    let map = truth_to_pool(pool, truth)?;
    let mut hits = 0usize;
    let mut total = 0usize;
    for (row, rec) in assignment.rows().iter().zip(records) {
        for (slot, &src) in row.iter().zip(&rec.sources) {
            total += 1;
            if slot.is_some() && *slot == map[src] {
                hits += 1;
            }
        }
    }
    Ok((total > 0).then(|| hits as f64 / total as f64))
}

/// Mean distance between pool and truth under the optimal matching. Each
/// surplus or missing prompt costs the truth's minimum pairwise distance
/// (1 when the truth has a single prompt); the sum is divided by the larger
/// of the two sizes.
pub fn pool_recovery_error(pool: &GlobalPool, truth: &GlobalPool) -> Result<f64> {
    let (n, ns) = (pool.len(), truth.len());
    let penalty = min_pairwise(truth.prompts()).unwrap_or(1.0);
    let map = truth_to_pool(pool, truth)?;
    let matched: f64 = map
        .iter()
        .enumerate()
        .filter_map(|(i, j)| j.map(|j| distance(truth.prompts()[i].as_slice(), pool.prompts()[j].as_slice())))
        .sum();
    let surplus = n.abs_diff(ns) as f64;
    let denom = n.max(ns).max(1) as f64;
    Ok((matched + surplus * penalty) / denom)
}

fn nearest_rows(uploads: &[LocalPromptSet], pool: &GlobalPool) -> Assignment {
    Assignment::new(
        uploads
            .iter()
            .map(|s| {
                s.prompts()
                    .iter()
                    .map(|w| {
                        pool.prompts()
                            .iter()
                            .enumerate()
                            .map(|(j, p)| (j, p.distance(w)))
                            .fold(None, |best: Option<(usize, f64)>, (j, d)| match best {
                                Some((_, bd)) if bd <= d => best,
                                _ => Some((j, d)),
                            })
                            .map(|(j, _)| j)
                    })
                    .collect()
            })
            .collect(),
    )
}

fn positional_rows(uploads: &[LocalPromptSet], pool_size: usize) -> Assignment {
    Assignment::new(
        uploads
            .iter()
            .map(|s| (0..s.len()).map(|k| (k < pool_size).then_some(k)).collect())
            .collect(),
    )
}

/// Runs every round, calling `observer` after each one.
pub fn run_experiment<F>(cfg: &ExperimentConfig, mut observer: F) -> Result<ExperimentResult>
where
    F: FnMut(&RoundOutput<'_>) -> Result<()>,
{
    cfg.validate()?;
    let seed = cfg.seed;
    let spec = PartitionSpec {
        seed: derive_seed(seed, &[stream::PARTITION]),
        ..cfg.partition.clone()
    };
    let (class_totals, profiles) = partition(&spec)?;
    let prototypes = make_prototypes(spec.classes, cfg.dim, cfg.client.prototype_scale, seed);
    let states = profiles
        .iter()
        .map(|p| {
            let mut st = ClientState::new(p.clone(), prototypes.clone(), cfg.client.k, cfg.client.mode.clone())?;
            st.dominant_mass = cfg.client.dominant_mass;
            Ok(st)
        })
        .collect::<Result<Vec<_>>>()?;

    let truth = if cfg.is_recovery() {
        Some(make_ground_truth_with(&TruthConfig {
            n_star: cfg.truth.n_star,
            dim: cfg.dim,
            separation: cfg.truth.separation,
            inclusion_logit: cfg.truth.inclusion_logit,
            variance: cfg.truth.variance,
            hidden: cfg.truth.hidden,
            seed: derive_seed(seed, &[stream::TRUTH]),
        })?)
    } else {
        None
    };

    let mut pool = initial_pool(cfg.init_pool_size, cfg.dim, seed)?;
    let mut nets: Option<Nets> = None;
    let mut params: Option<GenerativeParams> = None;
    let mut metrics = Vec::with_capacity(cfg.rounds);
    let mut wall = Vec::with_capacity(cfg.rounds);

    for round in 1..=cfg.rounds {
        let started = Instant::now();
        let wrap = |e: PfptError| PfptError::Round {
            round,
            source: Box::new(e),
        };
        let sampled = sample_clients(cfg.total_clients(), cfg.sampled_per_round, seed, round);

        let work: Vec<(LocalPromptSet, Option<GenerationRecord>)> = sampled
            .par_iter()
            .map(|&id| {
                let st = &states[id];
                let mut rng = rng_for(seed, &[stream::CLIENT, round as u64, id as u64]);
                match (&st.mode, &truth) {
                    (TuningMode::Generative { .. }, Some(t)) => {
                        let (set, rec) = local_tune_generative(st, t, &mut rng)?;
                        Ok((set, Some(rec)))
                    }
                    _ => {
                        let sel = select_prompts(st, &pool)?;
                        let chosen: Vec<Prompt> = sel.indices.iter().map(|&i| pool.prompts()[i].clone()).collect();
                        Ok((local_tune_drift(st, &chosen, &mut rng)?, None))
                    }
                }
            })
            .collect::<Result<Vec<_>>>()
            .map_err(wrap)?;
        let (uploads, records): (Vec<_>, Vec<_>) = work.into_iter().unzip();
        let records: Vec<GenerationRecord> = records.into_iter().flatten().collect();

        let (next_pool, assignment, report) = match cfg.aggregator {
            Aggregator::Pfpt => {
                let init = match (&nets, cfg.reinit_nets) {
                    (Some(n), false) => NetInit::Carry(n.clone()),
                    _ => NetInit::Fresh {
                        hidden: cfg.hidden,
                        seed: derive_seed(seed, &[stream::NETS, round as u64]),
                    },
                };
                let (p, gp, a, rep) = server_aggregate(Some(&pool), &uploads, init, &cfg.aggregation).map_err(wrap)?;
                nets = Some(gp.nets.clone());
                params = Some(gp);
                (p, a, Some(rep))
            }
            Aggregator::Fedavg => {
                let p = fedavg_prompts(&uploads, None).map_err(wrap)?.pool;
                let p = GlobalPool::with_generation(p.into_prompts(), round as u64).map_err(wrap)?;
                let a = positional_rows(&uploads, p.len());
                (p, a, None)
            }
            Aggregator::Gmm => {
                let k = cfg.gmm_k.unwrap_or_else(|| default_gmm_k(&uploads));
                let p = gmm_aggregate(&uploads, k, derive_seed(seed, &[stream::GMM, round as u64])).map_err(wrap)?;
                let p = GlobalPool::with_generation(p.into_prompts(), round as u64).map_err(wrap)?;
                let a = nearest_rows(&uploads, &p);
                (p, a, None)
            }
        };

        let (alignment, recovery) = match &truth {
            Some(t) => (
                alignment_accuracy(&assignment, &records, &next_pool, t.pool()).map_err(wrap)?,
                Some(pool_recovery_error(&next_pool, t.pool()).map_err(wrap)?),
            ),
            None => (None, None),
        };
        let m = RoundMetrics {
            round,
            pool_size: next_pool.len(),
            objective: report.as_ref().map(AggregationReport::final_objective),
            alignment_accuracy: alignment,
            pool_recovery_error: recovery,
            centroid_shift: distance(&pool.centroid(), &next_pool.centroid()),
        };
        pool = next_pool;
        let wall_ms = started.elapsed().as_millis() as u64;
        observer(&RoundOutput {
            metrics: &m,
            pool: &pool,
            report: report.as_ref(),
            sampled: &sampled,
            wall_ms,
        })?;
        log::info!(
            "round {round}: pool {} objective {:?} recovery {:?}",
            m.pool_size,
            m.objective,
            m.pool_recovery_error
        );
        metrics.push(m);
        wall.push(wall_ms);
    }

    Ok(ExperimentResult {
        metrics,
        final_pool: pool,
        final_params: params,
        class_totals,
        profiles,
        truth,
        wall_ms: wall,
    })
}
