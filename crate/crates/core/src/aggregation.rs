//! Server-side aggregation: candidate pool, alternating maximization, pruning.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::likelihood::{grad_params, joint_objective, AssignmentMode, GenerativeGrad};
use crate::matching::solve_assignments_with;
use crate::model::{Assignment, GenerativeParams, GlobalPool, LocalPromptSet, Nets, Prompt};
use crate::numeric::{distance, median};
use crate::seed::{rng_for, stream};
use crate::{PfptError, Result};

/// Optimizer schedule for [`server_aggregate`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregationConfig {
    pub max_alternations: usize,
    pub param_steps_per_alt: usize,
    pub initial_step_size: f64,
    pub backtrack_factor: f64,
    pub backtrack_max: usize,
    pub objective_tol: f64,
    pub dedup_radius_frac: f64,
    /// When off, local prompts may stay unassigned (see [`AssignmentMode::Dummy`]).
    pub full_assignment: bool,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        Self {
            max_alternations: 50,
            param_steps_per_alt: 10,
            initial_step_size: 0.05,
            backtrack_factor: 0.5,
            backtrack_max: 20,
            objective_tol: 1e-8,
            dedup_radius_frac: 0.25,
            full_assignment: true,
        }
    }
}

impl AggregationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(PfptError::Domain(format!("aggregation config: {what}")));
        if self.max_alternations == 0 {
            return bad("max_alternations must be positive");
        }
        if !(self.initial_step_size > 0.0 && self.initial_step_size.is_finite()) {
            return bad("initial_step_size must be positive");
        }
        if !(self.backtrack_factor > 0.0 && self.backtrack_factor < 1.0) {
            return bad("backtrack_factor must lie in (0, 1)");
        }
        if !(self.objective_tol > 0.0) {
            return bad("objective_tol must be positive");
        }
        if !(self.dedup_radius_frac >= 0.0 && self.dedup_radius_frac.is_finite()) {
            return bad("dedup_radius_frac must be non-negative");
        }
        Ok(())
    }

    pub fn mode(&self) -> AssignmentMode {
        if self.full_assignment {
            AssignmentMode::Full
        } else {
            AssignmentMode::Dummy
        }
    }
}

/// Diagnostics for one aggregation call.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregationReport {
    /// Objective after every assignment step, starting with the initial one.
    pub objective_trace: Vec<f64>,
    pub pool_size_before: usize,
    pub pool_size_after: usize,
    pub pruned_count: usize,
    pub alternations_run: usize,
}

impl AggregationReport {
    pub fn final_objective(&self) -> f64 {
        *self.objective_trace.last().expect("trace has the initial entry")
    }
}

/// Where the selection and variance networks come from.
#[derive(Clone, Debug)]
pub enum NetInit {
    Carry(Nets),
    Fresh { hidden: usize, seed: u64 },
}

/// Which parameter groups a step may move.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UpdateMask {
    pub pool: bool,
    pub selection: bool,
    pub variance: bool,
}

impl Default for UpdateMask {
    fn default() -> Self {
        Self {
            pool: true,
            selection: true,
            variance: true,
        }
    }
}

/// Step sizes remembered separately for each parameter block.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepSizes {
    pub pool: f64,
    pub selection: f64,
    pub variance: f64,
}

impl StepSizes {
    pub fn uniform(step: f64) -> Self {
        Self {
            pool: step,
            selection: step,
            variance: step,
        }
    }
}

/// Result of one line-searched ascent step.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub params: GenerativeParams,
    pub objective: f64,
    /// Suggested step sizes for the next call.
    pub steps: StepSizes,
    /// Whether any block moved.
    pub accepted: bool,
}

fn upload_order(a: &LocalPromptSet, b: &LocalPromptSet) -> Ordering {
    a.client_id.cmp(&b.client_id).then_with(|| {
        let fa = a.prompts().iter().flat_map(|p| p.as_slice());
        let fb = b.prompts().iter().flat_map(|p| p.as_slice());
        fa.zip(fb)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or_else(|| a.len().cmp(&b.len()))
    })
}

/// Indices that put `uploads` into canonical order (client id, then content).
pub fn canonical_order(uploads: &[LocalPromptSet]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..uploads.len()).collect();
    idx.sort_by(|&i, &j| upload_order(&uploads[i], &uploads[j]));
    idx
}

/// Dedup radius: `frac` times the median pairwise distance among all uploaded prompts.
pub fn dedup_radius(uploads: &[LocalPromptSet], frac: f64) -> f64 {
    let all: Vec<&[f64]> = uploads.iter().flat_map(|s| s.prompts()).map(Prompt::as_slice).collect();
    let mut d = Vec::with_capacity(all.len() * all.len().saturating_sub(1) / 2);
    for i in 0..all.len() {
        for j in i + 1..all.len() {
            d.push(distance(all[i], all[j]));
        }
    }
    median(&mut d).map_or(0.0, |m| frac * m)
}

/// Previous pool plus every upload farther than the dedup radius from all
/// current members, topped up with the farthest remaining uploads until the
/// pool can host the largest upload set.
pub fn build_candidate_pool(
    previous: Option<&GlobalPool>,
    uploads: &[LocalPromptSet],
    cfg: &AggregationConfig,
) -> Result<GlobalPool> {
    let first = uploads.first().ok_or(PfptError::Empty("uploads"))?;
    let d = first.dim();
    if let Some(bad) = uploads.iter().find(|s| s.dim() != d) {
        return Err(PfptError::Shape {
            context: "uploaded prompt set",
            expected: d,
            actual: bad.dim(),
        });
    }
    if let Some(prev) = previous.filter(|p| !p.is_empty()) {
        if prev.dim() != d {
            return Err(PfptError::Shape {
                context: "previous pool",
                expected: d,
                actual: prev.dim(),
            });
        }
    }

    let order = canonical_order(uploads);
    let flat: Vec<&Prompt> = order.iter().flat_map(|&i| uploads[i].prompts()).collect();
    let eps = dedup_radius(uploads, cfg.dedup_radius_frac);

    let mut pool: Vec<Prompt> = previous.map(|p| p.prompts().to_vec()).unwrap_or_default();
    let mut taken = vec![false; flat.len()];
    for (q, w) in flat.iter().enumerate() {
        if pool.iter().all(|p| p.distance(w) > eps) {
            pool.push((*w).clone());
            taken[q] = true;
        }
    }

    let need = uploads.iter().map(LocalPromptSet::len).max().unwrap_or(0);
    while pool.len() < need {
        let mut best: Option<(usize, f64)> = None;
        for (q, w) in flat.iter().enumerate() {
            if taken[q] {
                continue;
            }
            let gap = pool.iter().map(|p| p.distance(w)).fold(f64::INFINITY, f64::min);
            if best.is_none_or(|(_, g)| gap > g) {
                best = Some((q, gap));
            }
        }
        let (q, _) = best.expect("uploads hold at least `need` prompts");
        pool.push(flat[q].clone());
        taken[q] = true;
    }
    GlobalPool::with_generation(pool, previous.map_or(0, |p| p.generation))
}

const MAX_STEP: f64 = 1e8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Block {
    Pool,
    Variance,
    Selection,
}

fn moved(gp: &GenerativeParams, dir: &GenerativeGrad, step: f64, block: Block) -> Result<GenerativeParams> {
    let mut next = gp.clone();
    match block {
        Block::Pool => {
            let prompts = gp
                .pool
                .prompts()
                .iter()
                .zip(&dir.pool)
                .map(|(p, g)| Prompt::new(p.as_slice().iter().zip(g).map(|(x, dx)| x + step * dx).collect()))
                .collect::<Result<Vec<_>>>()?;
            next.pool = GlobalPool::with_generation(prompts, gp.pool.generation)?;
        }
        Block::Selection => next.nets.selection.axpy(step, &dir.selection),
        Block::Variance => next.nets.variance.axpy(step, &dir.variance),
    }
    Ok(next)
}

/// One round of block-wise gradient ascent with backtracking, holding the
/// assignment fixed.
///
/// The pool, the variance network and the selection network are updated in
/// turn, each with a fresh gradient and its own step size. The pool
/// direction is the gradient scaled by `α(φ_i) / max(1, count_i)`, which
/// makes a unit step move each member onto the mean of its assigned prompts
/// when the networks are constant. Each block tries its remembered step and
/// shrinks it by `backtrack_factor` until the objective does not decrease;
/// an accepted step is doubled for the next call, and a block with no
/// acceptable step is left unchanged.
pub fn param_step(
    sets: &[LocalPromptSet],
    a: &Assignment,
    gp: &GenerativeParams,
    steps: StepSizes,
    cfg: &AggregationConfig,
    mask: UpdateMask,
) -> Result<StepOutcome> {
    let mut cur = gp.clone();
    let mut steps = steps;
    let mut objective = None;
    let mut accepted = false;
    let blocks = [
        (Block::Pool, mask.pool),
        (Block::Variance, mask.variance),
        (Block::Selection, mask.selection),
    ];
    for (block, on) in blocks {
        if !on {
            continue;
        }
        let (obj, mut dir) = grad_params(sets, a, &cur)?;
        let base = obj.total;
        objective = Some(base);
        if block == Block::Pool {
            let counts = a.column_counts(cur.pool.len());
            let variances = cur.pool_variances()?;
            for ((g, v), &c) in dir.pool.iter_mut().zip(&variances).zip(&counts) {
                let w = 1.0 / c.max(1) as f64;
                g.iter_mut().zip(v).for_each(|(gi, vi)| *gi *= vi * w);
            }
        }
        let slot = match block {
            Block::Pool => &mut steps.pool,
            Block::Variance => &mut steps.variance,
            Block::Selection => &mut steps.selection,
        };
        let mut trial = *slot;
        let mut done = false;
        for _ in 0..=cfg.backtrack_max {
            if let Ok(candidate) = moved(&cur, &dir, trial, block) {
                if let Ok(next) = joint_objective(sets, a, &candidate) {
                    if next.total.is_finite() && next.total >= base {
                        cur = candidate;
                        objective = Some(next.total);
                        *slot = (trial * 2.0).min(MAX_STEP);
                        accepted = true;
                        done = true;
                        break;
                    }
                }
            }
            trial *= cfg.backtrack_factor;
        }
        if !done {
            *slot = trial.max(f64::MIN_POSITIVE);
        }
    }
    let objective = match objective {
        Some(v) => v,
        None => joint_objective(sets, a, &cur)?.total,
    };
    Ok(StepOutcome {
        params: cur,
        objective,
        steps,
        accepted,
    })
}

/// Drops pool members no local prompt is assigned to.
///
/// The remap sends each old index to its new index, or `None` if pruned.
pub fn prune_inactive(pool: &GlobalPool, a: &Assignment) -> (GlobalPool, Vec<Option<usize>>) {
    let counts = a.column_counts(pool.len());
    let mut remap = vec![None; pool.len()];
    let mut kept = Vec::new();
    for (i, p) in pool.prompts().iter().enumerate() {
        if counts[i] > 0 {
            remap[i] = Some(kept.len());
            kept.push(p.clone());
        }
    }
    let pruned = if kept.is_empty() {
        // nothing assigned at all; keep the pool rather than return an empty one
        return (pool.clone(), (0..pool.len()).map(Some).collect());
    } else {
        GlobalPool::with_generation(kept, pool.generation).expect("subset of a valid pool")
    };
    (pruned, remap)
}

fn restrict_params(gp: &GenerativeParams, pool: GlobalPool) -> GenerativeParams {
    GenerativeParams {
        pool,
        nets: gp.nets.clone(),
    }
}

/// Fits the pool and networks to one round of uploads.
///
/// Alternates exact assignment with `param_steps_per_alt` line-searched
/// ascent steps until the objective gain of a full alternation drops below
/// `objective_tol`, then prunes unused pool members. The result does not
/// depend on the order of `uploads`; the returned assignment rows follow
/// the input order.
pub fn server_aggregate(
    previous: Option<&GlobalPool>,
    uploads: &[LocalPromptSet],
    nets: NetInit,
    cfg: &AggregationConfig,
) -> Result<(GlobalPool, GenerativeParams, Assignment, AggregationReport)> {
    cfg.validate()?;
    let order = canonical_order(uploads);
    let sets: Vec<LocalPromptSet> = order.iter().map(|&i| uploads[i].clone()).collect();
    let candidates = build_candidate_pool(previous, &sets, cfg)?;
    let d = candidates.dim();
    let nets = match nets {
        NetInit::Carry(n) => {
            n.validate(d)?;
            n
        }
        NetInit::Fresh { hidden, seed } => Nets::fresh(d, hidden, &mut rng_for(seed, &[stream::NETS])),
    };
    let mode = cfg.mode();
    let pool_size_before = candidates.len();
    let mut gp = GenerativeParams::new(candidates, nets)?;

    let mut a = solve_assignments_with(&sets, &gp, mode)?;
    let mut current = joint_objective(&sets, &a, &gp)?.total;
    let mut trace = vec![current];
    let mut steps = StepSizes::uniform(cfg.initial_step_size);
    let mut alternations = 0;

    while alternations < cfg.max_alternations {
        alternations += 1;
        let start = current;
        for _ in 0..cfg.param_steps_per_alt {
            let out = param_step(&sets, &a, &gp, steps, cfg, UpdateMask::default())?;
            steps = out.steps;
            if out.accepted {
                gp = out.params;
                current = out.objective;
            }
        }
        let next_a = solve_assignments_with(&sets, &gp, mode)?;
        let next = joint_objective(&sets, &next_a, &gp)?.total;
        if next > current {
            a = next_a;
            current = next;
        }
        trace.push(current);
        if current - start < cfg.objective_tol {
            break;
        }
    }

    let (pool, remap) = prune_inactive(&gp.pool, &a);
    let pool_size_after = pool.len();
    let a = a.remapped(&remap);
    let generation = previous.map_or(0, |p| p.generation) + 1;
    let pool = GlobalPool::with_generation(pool.into_prompts(), generation)?;
    let gp = restrict_params(&gp, pool.clone());

    let mut rows = vec![Vec::new(); uploads.len()];
    for (sorted_pos, &orig) in order.iter().enumerate() {
        rows[orig] = a.row(sorted_pos).to_vec();
    }
    let report = AggregationReport {
        objective_trace: trace,
        pool_size_before,
        pool_size_after,
        pruned_count: pool_size_before - pool_size_after,
        alternations_run: alternations,
    };
    Ok((pool, gp, Assignment::new(rows), report))
}
