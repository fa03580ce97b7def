//! Assignment inference by maximum-weight bipartite matching.
//!
//! The cost matrix of one client does not depend on any other client's
//! assignment, so solving each client independently yields the joint optimum.

use rayon::prelude::*;

use crate::likelihood::{cost_matrix_with, dummy_cost, AssignmentMode, CostMatrix, PoolStats};
use crate::model::{Assignment, GenerativeParams, LocalPromptSet};
use crate::{PfptError, Result};

/// Upper bound on joint candidates enumerated by [`brute_force_assignments`].
pub const BRUTE_FORCE_LIMIT: u128 = 1_000_000;

/// Optimal injective row-to-column map and its total gain.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    pub row_to_col: Vec<usize>,
    pub total: f64,
}

struct Solution {
    cols: Vec<usize>,
    u: Vec<f64>,
    v: Vec<f64>,
}

/// Shortest-augmenting-path Hungarian method with potentials, minimizing
/// `cost(r, c)` over injective maps of `rows` into `cols` (rows <= cols).
fn solve_min(rows: usize, cols: usize, cost: impl Fn(usize, usize) -> f64) -> Solution {
    let (n, m) = (rows, cols);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0usize; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    Solution {
        cols: out,
        u: u[1..].to_vec(),
        v: v[1..].to_vec(),
    }
}

fn gain(c: &CostMatrix, cols: &[usize]) -> f64 {
    cols.iter().enumerate().map(|(k, &j)| c.get(k, j)).sum()
}

/// Maximum-gain injective assignment of rows to columns.
///
/// Among optimal assignments (up to a relative tolerance of 1e-9) the
/// lexicographically smallest `row_to_col` is returned.
pub fn hungarian_max(c: &CostMatrix) -> Result<MatchResult> {
    let (r, n) = (c.rows(), c.cols());
    if r > n {
        return Err(PfptError::Infeasible { rows: r, cols: n });
    }
    if r == 0 {
        return Ok(MatchResult {
            row_to_col: Vec::new(),
            total: 0.0,
        });
    }
    let scale = (0..r)
        .flat_map(|k| c.row(k).iter().map(|x| x.abs()))
        .fold(0.0f64, f64::max);
    let tight_tol = 1e-9 * (1.0 + scale);
    let total_tol = tight_tol * r as f64;

    let sol = solve_min(r, n, |k, j| -c.get(k, j));
    let mut cols = sol.cols.clone();
    let best = gain(c, &cols);

    for k in 0..r {
        let current = cols[k];
        let prefix: f64 = (0..k).map(|q| c.get(q, cols[q])).sum();
        for j in 0..current {
            if cols[..k].contains(&j) {
                continue;
            }
            let reduced = -c.get(k, j) - sol.u[k] - sol.v[j];
            if reduced > tight_tol {
                continue;
            }
            let free: Vec<usize> = (0..n).filter(|q| *q != j && !cols[..k].contains(q)).collect();
            let rest = r - k - 1;
            let sub = solve_min(rest, free.len(), |a, b| -c.get(k + 1 + a, free[b]));
            let sub_gain: f64 = sub.cols.iter().enumerate().map(|(a, &b)| c.get(k + 1 + a, free[b])).sum();
            if prefix + c.get(k, j) + sub_gain >= best - total_tol {
                cols[k] = j;
                for (a, &b) in sub.cols.iter().enumerate() {
                    cols[k + 1 + a] = free[b];
                }
                break;
            }
        }
    }
    let total = gain(c, &cols);
    Ok(MatchResult { row_to_col: cols, total })
}

fn padded_cost(set: &LocalPromptSet, gp: &GenerativeParams, stats: &PoolStats) -> Result<CostMatrix> {
    let base = cost_matrix_with(set, gp, stats)?;
    let (r, n) = (base.rows(), base.cols());
    let dummies: Vec<f64> = set
        .prompts()
        .iter()
        .map(|w| dummy_cost(w.as_slice(), stats))
        .collect::<Result<_>>()?;
    let scale = (0..r)
        .flat_map(|k| base.row(k).iter().copied())
        .chain(dummies.iter().copied())
        .fold(0.0f64, |a, x| a.max(x.abs()));
    let forbidden = -(1.0 + scale) * (2.0 + r as f64) * 1e3;
    let mut data = Vec::with_capacity(r * (n + r));
    for (k, &own) in dummies.iter().enumerate().take(r) {
        data.extend_from_slice(base.row(k));
        data.extend((0..r).map(|q| if q == k { own } else { forbidden }));
    }
    CostMatrix::new(r, n + r, data)
}

fn solve_client(
    set: &LocalPromptSet,
    gp: &GenerativeParams,
    stats: &PoolStats,
    mode: AssignmentMode,
) -> Result<Vec<Option<usize>>> {
    if set.dim() != gp.dim() {
        return Err(PfptError::Shape {
            context: "local prompt set",
            expected: gp.dim(),
            actual: set.dim(),
        });
    }
    let n = gp.pool.len();
    match mode {
        AssignmentMode::Full => {
            let c = cost_matrix_with(set, gp, stats)?;
            Ok(hungarian_max(&c)?.row_to_col.into_iter().map(Some).collect())
        }
        AssignmentMode::Dummy => {
            let c = padded_cost(set, gp, stats)?;
            Ok(hungarian_max(&c)?
                .row_to_col
                .into_iter()
                .map(|j| (j < n).then_some(j))
                .collect())
        }
    }
}

/// Optimal full assignment for every client.
pub fn solve_assignments(sets: &[LocalPromptSet], gp: &GenerativeParams) -> Result<Assignment> {
    solve_assignments_with(sets, gp, AssignmentMode::Full)
}

/// Optimal assignment for every client under the given mode; clients are
/// solved concurrently and combined in input order.
pub fn solve_assignments_with(
    sets: &[LocalPromptSet],
    gp: &GenerativeParams,
    mode: AssignmentMode,
) -> Result<Assignment> {
    let stats = PoolStats::compute(gp)?;
    let rows = sets
        .par_iter()
        .map(|set| solve_client(set, gp, &stats, mode))
        .collect::<Result<Vec<_>>>()?;
    Ok(Assignment::new(rows))
}

/// Solves once, then replays coordinate-wise best responses over clients
/// until nothing changes. Fails if the replay moves away from the single
/// pass, which would indicate coupling between clients.
pub fn solve_assignments_checked(
    sets: &[LocalPromptSet],
    gp: &GenerativeParams,
    mode: AssignmentMode,
) -> Result<Assignment> {
    let first = solve_assignments_with(sets, gp, mode)?;
    let stats = PoolStats::compute(gp)?;
    let mut rows = first.rows().to_vec();
    for (t, set) in sets.iter().enumerate() {
        let again = solve_client(set, gp, &stats, mode)?;
        if again != rows[t] {
            return Err(PfptError::Assignment(format!(
                "client {t}: best response {again:?} differs from single pass {:?}",
                rows[t]
            )));
        }
        rows[t] = again;
    }
    Ok(first)
}

fn injective_maps(n_local: usize, pool: usize) -> Vec<Vec<usize>> {
    fn rec(k: usize, n_local: usize, pool: usize, cur: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if k == n_local {
            out.push(cur.clone());
            return;
        }
        for j in 0..pool {
            if !used[j] {
                used[j] = true;
                cur.push(j);
                rec(k + 1, n_local, pool, cur, used, out);
                cur.pop();
                used[j] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(0, n_local, pool, &mut Vec::new(), &mut vec![false; pool], &mut out);
    out
}

fn permutations_count(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    ((n - k + 1)..=n).fold(1u128, |acc, x| acc.saturating_mul(x as u128))
}

/// Exhaustive search over all joint full assignments.
///
/// Returns the first maximizer in odometer order (client 0 varies slowest).
pub fn brute_force_assignments(sets: &[LocalPromptSet], gp: &GenerativeParams) -> Result<Assignment> {
    let n = gp.pool.len();
    let mut candidates: u128 = 1;
    for set in sets {
        if set.len() > n {
            return Err(PfptError::Infeasible { rows: set.len(), cols: n });
        }
        candidates = candidates.saturating_mul(permutations_count(n, set.len()));
    }
    if candidates > BRUTE_FORCE_LIMIT {
        return Err(PfptError::TooLarge {
            candidates,
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    let logits = gp.pool_logits()?;
    let variances = gp.pool_variances()?;

    let mut per_client: Vec<Vec<(Vec<usize>, f64)>> = Vec::with_capacity(sets.len());
    for set in sets {
        let mut scored = Vec::new();
        for map in injective_maps(set.len(), n) {
            let mut s = 0.0;
            for (omega, &i) in set.prompts().iter().zip(&map) {
                let phi = gp.pool.prompts()[i].as_slice();
                for ((w, p), v) in omega.as_slice().iter().zip(phi).zip(&variances[i]) {
                    s += -0.5 * ((2.0 * std::f64::consts::PI * v).ln() + (w - p) * (w - p) / v);
                }
                s += logits[i];
            }
            scored.push((map, s));
        }
        per_client.push(scored);
    }

    let mut idx = vec![0usize; sets.len()];
    let mut best_idx = idx.clone();
    let mut best = f64::NEG_INFINITY;
    loop {
        let total: f64 = idx.iter().enumerate().map(|(t, &q)| per_client[t][q].1).sum();
        if total > best {
            best = total;
            best_idx.clone_from(&idx);
        }
        let mut t = sets.len();
        loop {
            if t == 0 {
                let rows = best_idx
                    .iter()
                    .enumerate()
                    .map(|(t, &q)| per_client[t][q].0.clone())
                    .collect();
                return Ok(Assignment::full(rows));
            }
            t -= 1;
            idx[t] += 1;
            if idx[t] < per_client[t].len() {
                break;
            }
            idx[t] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> CostMatrix {
        CostMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn single_cell() {
        let r = hungarian_max(&m(&[&[5.0]])).unwrap();
        assert_eq!(r.row_to_col, vec![0]);
        assert_eq!(r.total, 5.0);
    }

    #[test]
    fn diagonal_dominance() {
        let r = hungarian_max(&m(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap();
        assert_eq!(r.row_to_col, vec![0, 1]);
        assert_eq!(r.total, 2.0);
    }

    #[test]
    fn more_rows_than_columns_is_infeasible() {
        assert!(matches!(
            hungarian_max(&m(&[&[1.0], &[2.0]])),
            Err(PfptError::Infeasible { rows: 2, cols: 1 })
        ));
    }

    #[test]
    fn ties_resolve_to_smallest_columns() {
        let r = hungarian_max(&m(&[&[1.0, 1.0, 1.0], &[1.0, 1.0, 1.0]])).unwrap();
        assert_eq!(r.row_to_col, vec![0, 1]);
        let r = hungarian_max(&m(&[&[0.0, 0.0, 0.0], &[0.0, 0.0, 0.0]])).unwrap();
        assert_eq!(r.row_to_col, vec![0, 1]);
        let r = hungarian_max(&m(&[&[0.0, 3.0, 3.0], &[3.0, 0.0, 3.0]])).unwrap();
        assert_eq!(r.row_to_col, vec![1, 0]);
    }

    #[test]
    fn rectangular_picks_best_columns() {
        let r = hungarian_max(&m(&[&[1.0, 9.0, 2.0, 8.0], &[7.0, 9.5, 1.0, 0.0]])).unwrap();
        assert_eq!(r.row_to_col, vec![3, 1]);
        assert_eq!(r.total, 17.5);
    }

    #[test]
    fn injective_map_counts() {
        assert_eq!(injective_maps(2, 4).len(), 12);
        assert_eq!(permutations_count(4, 2), 12);
        assert_eq!(permutations_count(3, 4), 0);
        assert_eq!(injective_maps(0, 3), vec![Vec::<usize>::new()]);
    }
}
