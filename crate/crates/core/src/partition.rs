//! Client data partitions: Dirichlet, dominant-class imbalance, long tail.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::seed::{rng_for, stream};
use crate::{PfptError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Dirichlet,
    Imbalance,
    Longtail,
}

impl std::str::FromStr for Scheme {
    type Err = PfptError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dirichlet" => Ok(Self::Dirichlet),
            "imbalance" => Ok(Self::Imbalance),
            "longtail" => Ok(Self::Longtail),
            other => Err(PfptError::Domain(format!(
                "unknown partition scheme `{other}` (expected dirichlet, imbalance or longtail)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub scheme: Scheme,
    pub classes: usize,
    pub clients: usize,
    /// Dirichlet concentration (dirichlet and longtail).
    pub alpha: f64,
    pub dominant_frac: f64,
    pub dominant_share: f64,
    pub imbalance_factor: f64,
    /// Examples per class. For the long-tail scheme only the largest entry is used.
    pub class_totals: Vec<u64>,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn uniform(scheme: Scheme, classes: usize, clients: usize, per_class: u64, seed: u64) -> Self {
        Self {
            scheme,
            classes,
            clients,
            alpha: 0.5,
            dominant_frac: 0.10,
            dominant_share: 0.99,
            imbalance_factor: 1.0,
            class_totals: vec![per_class; classes],
            seed,
        }
    }

    fn check_common(&self) -> Result<()> {
        if self.classes == 0 || self.clients == 0 {
            return Err(PfptError::Partition("need at least one class and one client".into()));
        }
        if self.scheme != Scheme::Longtail && self.class_totals.len() != self.classes {
            return Err(PfptError::Shape {
                context: "class totals",
                expected: self.classes,
                actual: self.class_totals.len(),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientProfile {
    pub client_id: usize,
    pub class_counts: Vec<u64>,
    pub proportions: Vec<f64>,
}

impl ClientProfile {
    pub fn from_counts(client_id: usize, class_counts: Vec<u64>) -> Self {
        let total: u64 = class_counts.iter().sum();
        let proportions = if total == 0 {
            vec![0.0; class_counts.len()]
        } else {
            class_counts.iter().map(|&c| c as f64 / total as f64).collect()
        };
        Self {
            client_id,
            class_counts,
            proportions,
        }
    }

    pub fn total(&self) -> u64 {
        self.class_counts.iter().sum()
    }

    /// Classes by decreasing count, ties by lower index.
    pub fn classes_by_count(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.class_counts.len()).collect();
        idx.sort_by(|&a, &b| self.class_counts[b].cmp(&self.class_counts[a]).then(a.cmp(&b)));
        idx
    }

    /// Smallest set of top classes whose combined share reaches `mass`.
    pub fn dominant_classes(&self, mass: f64) -> Vec<usize> {
        let mut out = Vec::new();
        let mut acc = 0.0;
        for c in self.classes_by_count() {
            if self.proportions[c] <= 0.0 || acc >= mass - 1e-12 {
                break;
            }
            acc += self.proportions[c];
            out.push(c);
        }
        out
    }
}

/// Sample from a symmetric Dirichlet(alpha, ..., alpha) of dimension `k`.
///
/// Works in log space so that very small concentrations do not underflow
/// every component to zero.
pub fn sample_dirichlet<R: Rng + ?Sized>(alpha: f64, k: usize, rng: &mut R) -> Result<Vec<f64>> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(PfptError::Domain(format!("dirichlet concentration must be positive, got {alpha}")));
    }
    let gamma = Gamma::new(alpha + 1.0, 1.0).map_err(|e| PfptError::Domain(e.to_string()))?;
    let logs: Vec<f64> = (0..k)
        .map(|_| {
            let g: f64 = gamma.sample(rng);
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            g.ln() + u.ln() / alpha
        })
        .collect();
    let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
    let z: f64 = weights.iter().sum();
    Ok(weights.into_iter().map(|w| w / z).collect())
}

/// Integer apportionment of `total` proportional to `weights` by largest
/// remainder; ties go to the lower index.
pub fn largest_remainder(total: u64, weights: &[f64]) -> Vec<u64> {
    let z: f64 = weights.iter().sum();
    if weights.is_empty() || z <= 0.0 {
        return vec![0; weights.len()];
    }
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w / z).collect();
    let mut out: Vec<u64> = exact.iter().map(|x| x.floor() as u64).collect();
    let assigned: u64 = out.iter().sum();
    let mut left = total.saturating_sub(assigned);
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        out[i] += 1;
        left -= 1;
    }
    out
}

fn dirichlet_counts(totals: &[u64], clients: usize, alpha: f64, seed: u64) -> Result<Vec<ClientProfile>> {
    let mut counts = vec![vec![0u64; totals.len()]; clients];
    for (c, &total) in totals.iter().enumerate() {
        let mut rng = rng_for(seed, &[stream::PARTITION, c as u64]);
        let shares = sample_dirichlet(alpha, clients, &mut rng)?;
        for (t, n) in largest_remainder(total, &shares).into_iter().enumerate() {
            counts[t][c] = n;
        }
    }
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(t, row)| ClientProfile::from_counts(t, row))
        .collect())
}

/// Per class, client shares drawn from Dirichlet(alpha) and rounded so the
/// class total is conserved exactly.
pub fn dirichlet_partition(spec: &PartitionSpec) -> Result<Vec<ClientProfile>> {
    spec.check_common()?;
    dirichlet_counts(&spec.class_totals, spec.clients, spec.alpha, spec.seed)
}

/// Size of the dominant class subset of every client.
pub fn dominant_subset_size(spec: &PartitionSpec) -> Result<usize> {
    let raw = spec.classes as f64 * spec.dominant_frac;
    if !(raw >= 1.0 - 1e-9) {
        return Err(PfptError::Partition(format!(
            "dominant subset would be empty: {} classes x fraction {} < 1",
            spec.classes, spec.dominant_frac
        )));
    }
    Ok((raw.round() as usize).clamp(1, spec.classes))
}

/// Dominant classes of client `t` (round-robin over the class list).
pub fn dominant_subset(t: usize, r: usize, classes: usize) -> Vec<usize> {
    (0..r).map(|j| (t * r + j) % classes).collect()
}

/// Every client draws `dominant_share` of its data from a rotating subset
/// of classes and the rest evenly from the other classes. Targets are
/// rescaled per class to the class totals and rounded class by class,
/// steering remainders toward clients that are short overall.
pub fn imbalance_partition(spec: &PartitionSpec) -> Result<Vec<ClientProfile>> {
    spec.check_common()?;
    if !(spec.dominant_share > 0.0 && spec.dominant_share <= 1.0) {
        return Err(PfptError::Partition(format!(
            "dominant share must lie in (0, 1], got {}",
            spec.dominant_share
        )));
    }
    let (s, m) = (spec.classes, spec.clients);
    let r = dominant_subset_size(spec)?;
    let grand: u64 = spec.class_totals.iter().sum();
    let sizes = largest_remainder(grand, &vec![1.0; m]);

    let mut target = vec![vec![0.0f64; s]; m];
    for t in 0..m {
        let dom = dominant_subset(t, r, s);
        let n = sizes[t] as f64;
        for (c, cell) in target[t].iter_mut().enumerate() {
            *cell = if dom.contains(&c) {
                let share = if r == s { 1.0 } else { spec.dominant_share };
                n * share / r as f64
            } else {
                n * (1.0 - spec.dominant_share) / (s - r) as f64
            };
        }
    }
    for c in 0..s {
        let col: f64 = (0..m).map(|t| target[t][c]).sum();
        let total = spec.class_totals[c] as f64;
        if col <= 0.0 {
            if total > 0.0 {
                return Err(PfptError::Partition(format!(
                    "class {c} has {total} examples but no client wants any"
                )));
            }
            continue;
        }
        for row in target.iter_mut() {
            row[c] *= total / col;
        }
    }

    let mut counts = vec![vec![0u64; s]; m];
    let mut deficit = vec![0.0f64; m];
    for c in 0..s {
        let mut assigned = 0u64;
        for t in 0..m {
            counts[t][c] = target[t][c].floor() as u64;
            assigned += counts[t][c];
        }
        let left = spec.class_totals[c].saturating_sub(assigned);
        let mut order: Vec<usize> = (0..m).collect();
        let priority = |t: usize| target[t][c] - target[t][c].floor() + deficit[t];
        order.sort_by(|&a, &b| priority(b).total_cmp(&priority(a)).then(a.cmp(&b)));
        for &t in order.iter().take(left as usize) {
            counts[t][c] += 1;
        }
        for t in 0..m {
            deficit[t] += target[t][c] - counts[t][c] as f64;
        }
    }
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(t, row)| ClientProfile::from_counts(t, row))
        .collect())
}

/// Exponentially decaying class totals `n_max * IF^(-c / (s - 1))`.
pub fn longtail_totals(n_max: u64, classes: usize, imbalance_factor: f64) -> Result<Vec<u64>> {
    if !(imbalance_factor >= 1.0 && imbalance_factor.is_finite()) {
        return Err(PfptError::Domain(format!(
            "imbalance factor must be at least 1, got {imbalance_factor}"
        )));
    }
    if classes <= 1 {
        return Ok(vec![n_max; classes]);
    }
    let totals: Vec<u64> = (0..classes)
        .map(|c| (n_max as f64 * imbalance_factor.powf(-(c as f64) / (classes - 1) as f64)).round() as u64)
        .collect();
    if totals.contains(&0) {
        return Err(PfptError::Partition(format!(
            "largest class ({n_max}) too small for imbalance factor {imbalance_factor}"
        )));
    }
    Ok(totals)
}

/// Long-tailed class totals, then a Dirichlet split across clients.
pub fn longtail_partition(spec: &PartitionSpec) -> Result<(Vec<u64>, Vec<ClientProfile>)> {
    spec.check_common()?;
    let n_max = spec
        .class_totals
        .iter()
        .copied()
        .max()
        .ok_or_else(|| PfptError::Partition("long-tail scheme needs a largest class size".into()))?;
    let totals = longtail_totals(n_max, spec.classes, spec.imbalance_factor)?;
    let profiles = dirichlet_counts(&totals, spec.clients, spec.alpha, spec.seed)?;
    Ok((totals, profiles))
}

/// Dispatches on the scheme; returns the global class totals and profiles.
pub fn partition(spec: &PartitionSpec) -> Result<(Vec<u64>, Vec<ClientProfile>)> {
    match spec.scheme {
        Scheme::Dirichlet => Ok((spec.class_totals.clone(), dirichlet_partition(spec)?)),
        Scheme::Imbalance => Ok((spec.class_totals.clone(), imbalance_partition(spec)?)),
        Scheme::Longtail => longtail_partition(spec),
    }
}

/// Column sums of the profile counts.
pub fn class_totals(profiles: &[ClientProfile]) -> Vec<u64> {
    let s = profiles.first().map_or(0, |p| p.class_counts.len());
    let mut out = vec![0u64; s];
    for p in profiles {
        for (acc, c) in out.iter_mut().zip(&p.class_counts) {
            *acc += c;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionSummary {
    pub class_totals: Vec<u64>,
    pub conserved: bool,
    /// Share of each client's data held by its `top` largest classes.
    pub dominant_shares: Vec<f64>,
    pub max_min_class_ratio: f64,
}

pub fn summarize(expected_totals: &[u64], profiles: &[ClientProfile], top: usize) -> PartitionSummary {
    let totals = class_totals(profiles);
    let dominant_shares = profiles
        .iter()
        .map(|p| {
            let n = p.total();
            if n == 0 {
                return 0.0;
            }
            let held: u64 = p.classes_by_count().iter().take(top).map(|&c| p.class_counts[c]).sum();
            held as f64 / n as f64
        })
        .collect();
    let max = totals.iter().copied().max().unwrap_or(0) as f64;
    let min = totals.iter().copied().min().unwrap_or(0) as f64;
    PartitionSummary {
        conserved: totals == expected_totals,
        class_totals: totals,
        dominant_shares,
        max_min_class_ratio: if min > 0.0 { max / min } else { f64::INFINITY },
    }
}

/// `client_id,class,count` rows with a header.
pub fn profiles_csv(profiles: &[ClientProfile]) -> String {
    let mut out = String::from("client_id,class,count\n");
    for p in profiles {
        for (c, n) in p.class_counts.iter().enumerate() {
            let _ = writeln!(out, "{},{},{}", p.client_id, c, n);
        }
    }
    out
}
