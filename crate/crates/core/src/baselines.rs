//! Reference aggregators: position-wise averaging and GMM centroids.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::model::{GlobalPool, LocalPromptSet, Prompt, VARIANCE_FLOOR};
use crate::numeric::{median, squared_distance};
use crate::seed::{rng_for, stream};
use crate::{PfptError, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub const GMM_MAX_ITER: usize = 500;
pub const GMM_TOL: f64 = 1e-7;
const DEGENERATE_WEIGHT: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct FedAvgResult {
    pub pool: GlobalPool,
    /// Set when uploads had different lengths and were cut to the shortest.
    pub truncated: bool,
}

/// Position-wise weighted mean of the uploaded prompt lists.
///
/// Weights default to the upload sizes. Lists of unequal length are cut to
/// the shortest one.
pub fn fedavg_prompts(uploads: &[LocalPromptSet], weights: Option<&[f64]>) -> Result<FedAvgResult> {
    let first = uploads.first().ok_or(PfptError::Empty("uploads"))?;
    let d = first.dim();
    if let Some(bad) = uploads.iter().find(|s| s.dim() != d) {
        return Err(PfptError::Shape {
            context: "uploaded prompt set",
            expected: d,
            actual: bad.dim(),
        });
    }
    let w: Vec<f64> = match weights {
        Some(w) if w.len() != uploads.len() => {
            return Err(PfptError::Shape {
                context: "averaging weights",
                expected: uploads.len(),
                actual: w.len(),
            })
        }
        Some(w) => w.to_vec(),
        None => uploads.iter().map(|s| s.len() as f64).collect(),
    };
    let z: f64 = w.iter().sum();
    if !(z > 0.0) || w.iter().any(|x| *x < 0.0 || !x.is_finite()) {
        return Err(PfptError::Domain("averaging weights must be non-negative with positive sum".into()));
    }
    let len = uploads.iter().map(LocalPromptSet::len).min().unwrap_or(0);
    let truncated = uploads.iter().any(|s| s.len() != len);
    if truncated {
        log::warn!("fedavg: uploads of unequal length, truncating to {len}");
    }
    let mut pool = Vec::with_capacity(len);
    for j in 0..len {
        let mut acc = vec![0.0; d];
        for (set, wt) in uploads.iter().zip(&w) {
            for (a, x) in acc.iter_mut().zip(set.prompts()[j].as_slice()) {
                *a += wt / z * x;
            }
        }
        pool.push(Prompt::new(acc)?);
    }
    Ok(FedAvgResult {
        pool: GlobalPool::new(pool)?,
        truncated,
    })
}

/// Diagonal Gaussian mixture fitted by EM.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmState {
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    /// Per point, per component posterior from the last E-step.
    pub responsibilities: Vec<Vec<f64>>,
    pub log_likelihood_trace: Vec<f64>,
    pub reseeded: bool,
}

impl GmmState {
    pub fn k(&self) -> usize {
        self.means.len()
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let top = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if top == f64::NEG_INFINITY {
        return top;
    }
    top + v.iter().map(|x| (x - top).exp()).sum::<f64>().ln()
}

fn diag_logpdf(x: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    -0.5 * x
        .iter()
        .zip(mean)
        .zip(var)
        .map(|((x, m), v)| LN_2PI + v.ln() + (x - m) * (x - m) / v)
        .sum::<f64>()
}

fn kmeans_pp<R: Rng + ?Sized>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut centers = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| squared_distance(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = d2.iter().rposition(|&v| v > 0.0).unwrap_or(0);
            for (i, &v) in d2.iter().enumerate() {
                if v > 0.0 && u < v {
                    chosen = i;
                    break;
                }
                u -= v;
            }
            chosen
        } else {
            centers.len() % points.len()
        };
        centers.push(points[pick].clone());
        for (g, p) in d2.iter_mut().zip(points) {
            *g = g.min(squared_distance(p, &centers[centers.len() - 1]));
        }
    }
    centers
}

fn global_variance(points: &[Vec<f64>]) -> Vec<f64> {
    let n = points.len() as f64;
    let d = points[0].len();
    let mut mean = vec![0.0; d];
    for p in points {
        for (m, x) in mean.iter_mut().zip(p) {
            *m += x / n;
        }
    }
    let mut var = vec![0.0; d];
    for p in points {
        for ((v, x), m) in var.iter_mut().zip(p).zip(&mean) {
            *v += (x - m) * (x - m) / n;
        }
    }
    var.into_iter().map(|v| v.max(VARIANCE_FLOOR)).collect()
}

fn e_step(points: &[Vec<f64>], st: &GmmState) -> (Vec<Vec<f64>>, f64, Vec<f64>) {
    let mut resp = Vec::with_capacity(points.len());
    let mut ll = 0.0;
    let mut point_ll = Vec::with_capacity(points.len());
    for x in points {
        let logs: Vec<f64> = (0..st.k())
            .map(|c| st.weights[c].ln() + diag_logpdf(x, &st.means[c], &st.variances[c]))
            .collect();
        let lse = log_sum_exp(&logs);
        ll += lse;
        point_ll.push(lse);
        resp.push(logs.iter().map(|l| (l - lse).exp()).collect());
    }
    (resp, ll, point_ll)
}

/// EM for a diagonal Gaussian mixture with k-means++ seeding.
///
/// A component whose weight collapses below 1e-8 is re-seeded once at the
/// worst-explained point; a second collapse is an error.
pub fn gmm_fit(points: &[Vec<f64>], k: usize, seed: u64) -> Result<GmmState> {
    if k == 0 {
        return Err(PfptError::Domain("GMM needs at least one component".into()));
    }
    if points.len() < k {
        return Err(PfptError::Domain(format!(
            "GMM with {k} components needs at least {k} points, got {}",
            points.len()
        )));
    }
    let mut rng = rng_for(seed, &[stream::GMM]);
    let gvar = global_variance(points);
    let mut st = GmmState {
        means: kmeans_pp(points, k, &mut rng),
        variances: vec![gvar.clone(); k],
        weights: vec![1.0 / k as f64; k],
        responsibilities: Vec::new(),
        log_likelihood_trace: Vec::new(),
        reseeded: false,
    };
    let n = points.len() as f64;
    let d = points[0].len();
    let mut reseeded = vec![false; k];
    for _ in 0..GMM_MAX_ITER {
        let (resp, ll, point_ll) = e_step(points, &st);
        let prev = st.log_likelihood_trace.last().copied();
        st.log_likelihood_trace.push(ll);
        st.responsibilities = resp;
        if prev.is_some_and(|p| ll - p < GMM_TOL) {
            break;
        }

        for c in 0..k {
            let nk: f64 = st.responsibilities.iter().map(|r| r[c]).sum();
            if nk / n < DEGENERATE_WEIGHT {
                if reseeded[c] {
                    return Err(PfptError::Degenerate(format!(
                        "GMM component {c} collapsed twice (weight {:e})",
                        nk / n
                    )));
                }
                reseeded[c] = true;
                st.reseeded = true;
                let worst = point_ll
                    .iter()
                    .enumerate()
                    .fold((0, f64::INFINITY), |(bi, bv), (i, &v)| if v < bv { (i, v) } else { (bi, bv) })
                    .0;
                st.means[c] = points[worst].clone();
                st.variances[c] = gvar.clone();
                st.weights[c] = 1.0 / k as f64;
                continue;
            }
            let mut mean = vec![0.0; d];
            for (x, r) in points.iter().zip(&st.responsibilities) {
                for (m, xi) in mean.iter_mut().zip(x) {
                    *m += r[c] * xi;
                }
            }
            mean.iter_mut().for_each(|m| *m /= nk);
            let mut var = vec![0.0; d];
            for (x, r) in points.iter().zip(&st.responsibilities) {
                for ((v, xi), m) in var.iter_mut().zip(x).zip(&mean) {
                    *v += r[c] * (xi - m) * (xi - m);
                }
            }
            st.variances[c] = var.into_iter().map(|v| (v / nk).max(VARIANCE_FLOOR)).collect();
            st.means[c] = mean;
            st.weights[c] = nk / n;
        }
        let z: f64 = st.weights.iter().sum();
        st.weights.iter_mut().for_each(|w| *w /= z);
    }
    Ok(st)
}

/// Median upload size, the default number of mixture components.
pub fn default_gmm_k(uploads: &[LocalPromptSet]) -> usize {
    let mut sizes: Vec<f64> = uploads.iter().map(|s| s.len() as f64).collect();
    median(&mut sizes).map_or(1, |m| (m.round() as usize).max(1))
}

/// Fits a `k`-component mixture to all uploaded prompts and returns its
/// means ordered by first coordinate.
pub fn gmm_aggregate(uploads: &[LocalPromptSet], k: usize, seed: u64) -> Result<GlobalPool> {
    let points: Vec<Vec<f64>> = uploads
        .iter()
        .flat_map(|s| s.prompts())
        .map(|p| p.as_slice().to_vec())
        .collect();
    if points.is_empty() {
        return Err(PfptError::Empty("uploads"));
    }
    let st = gmm_fit(&points, k, seed)?;
    let mut means = st.means;
    means.sort_by(|a, b| {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    GlobalPool::new(means.into_iter().map(Prompt::new).collect::<Result<_>>()?)
}
