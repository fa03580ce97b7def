//! Instance generators and independent reference implementations.
#![allow(dead_code, clippy::needless_range_loop)]

use pfpt_core::likelihood::{grad_params, joint_objective};
use pfpt_core::model::{MlpParams, Nets, VARIANCE_FLOOR};
use pfpt_core::{Assignment, GenerativeParams, GlobalPool, LocalPromptSet, Prompt};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller keeps the oracle independent of the library's sampler.
    let u: f64 = rng.random::<f64>().max(1e-300);
    let v: f64 = rng.random();
    (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos()
}

pub fn vector<R: Rng>(rng: &mut R, d: usize, scale: f64) -> Vec<f64> {
    (0..d).map(|_| scale * gaussian(rng)).collect()
}

pub fn prompt<R: Rng>(rng: &mut R, d: usize, scale: f64) -> Prompt {
    Prompt::new(vector(rng, d, scale)).unwrap()
}

/// Random pool and networks whose weights are scaled so that logits and
/// variances vary visibly across the pool.
pub fn random_params<R: Rng>(rng: &mut R, n: usize, d: usize, hidden: usize) -> GenerativeParams {
    let pool = GlobalPool::new((0..n).map(|_| prompt(rng, d, 1.0)).collect()).unwrap();
    let mut nets = Nets::fresh(d, hidden, rng);
    for net in [&mut nets.selection, &mut nets.variance] {
        for w in net.as_mut_slice() {
            *w = 0.7 * gaussian(rng);
        }
    }
    GenerativeParams::new(pool, nets).unwrap()
}

/// `m` clients, each holding between 1 and `max_local` prompts (at most `n`).
pub fn random_sets<R: Rng>(rng: &mut R, m: usize, max_local: usize, n: usize, d: usize) -> Vec<LocalPromptSet> {
    (0..m)
        .map(|t| {
            let nt = rng.random_range(1..=max_local.min(n));
            LocalPromptSet::new(t, (0..nt).map(|_| prompt(rng, d, 1.0)).collect()).unwrap()
        })
        .collect()
}

/// A uniformly random full injective assignment.
pub fn random_assignment<R: Rng>(rng: &mut R, sets: &[LocalPromptSet], n: usize) -> Assignment {
    Assignment::full(
        sets.iter()
            .map(|s| {
                let mut cols: Vec<usize> = (0..n).collect();
                cols.shuffle(rng);
                cols.truncate(s.len());
                cols
            })
            .collect(),
    )
}

/// Network forward pass written out from the stored blocks.
pub fn mlp(net: &MlpParams, x: &[f64]) -> Vec<f64> {
    let (i, h, o) = (net.input_dim(), net.hidden_dim(), net.output_dim());
    let mut hidden = vec![0.0; h];
    for r in 0..h {
        let mut a = net.b1()[r];
        for c in 0..i {
            a += net.w1()[r * i + c] * x[c];
        }
        hidden[r] = a.tanh();
    }
    (0..o)
        .map(|r| net.b2()[r] + (0..h).map(|c| net.w2()[r * h + c] * hidden[c]).sum::<f64>())
        .collect()
}

pub fn variances(gp: &GenerativeParams, x: &[f64]) -> Vec<f64> {
    mlp(&gp.nets.variance, x)
        .into_iter()
        .map(|r| (1.0 + r.exp()).ln() + VARIANCE_FLOOR)
        .collect()
}

pub fn logit(gp: &GenerativeParams, x: &[f64]) -> f64 {
    mlp(&gp.nets.selection, x)[0]
}

/// Diagonal normal log-density as a sum of scalar densities.
pub fn logpdf(x: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    x.iter()
        .zip(mean)
        .zip(var)
        .map(|((xi, mi), vi)| {
            let dens = (-(xi - mi) * (xi - mi) / (2.0 * vi)).exp() / (2.0 * std::f64::consts::PI * vi).sqrt();
            dens.ln()
        })
        .sum()
}

/// One-hot matrix `z[k][i]` for a full row.
pub fn one_hot(row: &[Option<usize>], n: usize) -> Vec<Vec<f64>> {
    row.iter()
        .map(|a| (0..n).map(|i| if *a == Some(i) { 1.0 } else { 0.0 }).collect())
        .collect()
}

/// `log P(ω_t | z_t, Φ)` evaluated through the selected means
/// `ψ_k = Σ_i z_ki φ_i` with variances `α(ψ_k)`.
pub fn direct_set_loglik(set: &LocalPromptSet, row: &[Option<usize>], gp: &GenerativeParams) -> f64 {
    let n = gp.pool.len();
    let d = gp.dim();
    let z = one_hot(row, n);
    set.prompts()
        .iter()
        .zip(&z)
        .map(|(omega, zk)| {
            let mut psi = vec![0.0; d];
            for (i, phi) in gp.pool.prompts().iter().enumerate() {
                for (p, x) in psi.iter_mut().zip(phi.as_slice()) {
                    *p += zk[i] * x;
                }
            }
            logpdf(omega.as_slice(), &psi, &variances(gp, &psi))
        })
        .sum()
}

/// `log P(z_t | Φ)` as the log of the Bernoulli product over pool members.
pub fn direct_logprior(row: &[Option<usize>], gp: &GenerativeParams) -> f64 {
    let mut prod = 1.0f64;
    for (i, phi) in gp.pool.prompts().iter().enumerate() {
        let p = 1.0 / (1.0 + (-logit(gp, phi.as_slice())).exp());
        let chosen = row.iter().filter(|a| **a == Some(i)).count() as i32;
        prod *= p.powi(chosen) * (1.0 - p).powi(1 - chosen);
    }
    prod.ln()
}

pub fn direct_objective(sets: &[LocalPromptSet], a: &Assignment, gp: &GenerativeParams) -> (f64, f64) {
    let l1 = sets.iter().zip(a.rows()).map(|(s, r)| direct_set_loglik(s, r, gp)).sum();
    let l2 = a.rows().iter().map(|r| direct_logprior(r, gp)).sum();
    (l1, l2)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (1.0 + a.abs().max(b.abs()))
}

/// Every injective map from `k` rows into `n` columns.
pub fn injective_maps(k: usize, n: usize) -> Vec<Vec<usize>> {
    fn rec(k: usize, n: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for c in 0..n {
            if !cur.contains(&c) {
                cur.push(c);
                rec(k, n, cur, out);
                cur.pop();
            }
        }
    }
    let mut out = Vec::new();
    rec(k, n, &mut Vec::new(), &mut out);
    out
}

/// Hungarian-free minimum-cost matching distance between two equally sized pools.
pub fn matched_distance(a: &GlobalPool, b: &GlobalPool) -> f64 {
    assert_eq!(a.len(), b.len());
    injective_maps(a.len(), b.len())
        .iter()
        .map(|m| {
            m.iter()
                .enumerate()
                .map(|(i, &j)| a.prompts()[i].distance(&b.prompts()[j]))
                .sum::<f64>()
        })
        .fold(f64::INFINITY, f64::min)
}

pub fn perturbed(gp: &GenerativeParams, coord: usize, h: f64) -> GenerativeParams {
    let n = gp.pool.len();
    let d = gp.dim();
    let mut out = gp.clone();
    if coord < n * d {
        let mut prompts: Vec<Vec<f64>> = gp.pool.prompts().iter().map(|p| p.as_slice().to_vec()).collect();
        prompts[coord / d][coord % d] += h;
        out.pool = GlobalPool::new(prompts.into_iter().map(|v| Prompt::new(v).unwrap()).collect()).unwrap();
        return out;
    }
    let c = coord - n * d;
    let s = gp.nets.selection.len();
    if c < s {
        out.nets.selection.as_mut_slice()[c] += h;
    } else {
        out.nets.variance.as_mut_slice()[c - s] += h;
    }
    out
}

/// Relative error with a denominator floor: near-zero partial derivatives
/// are compared on an absolute scale of `FD_FLOOR`.
pub const FD_FLOOR: f64 = 1e-3;

pub fn worst_fd_error(sets: &[LocalPromptSet], a: &Assignment, gp: &GenerativeParams) -> f64 {
    let (_, g) = grad_params(sets, a, gp).unwrap();
    let analytic: Vec<f64> = g
        .pool
        .iter()
        .flatten()
        .chain(g.selection.as_slice())
        .chain(g.variance.as_slice())
        .copied()
        .collect();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (coord, &an) in analytic.iter().enumerate() {
        let up = joint_objective(sets, a, &perturbed(gp, coord, h)).unwrap().total;
        let down = joint_objective(sets, a, &perturbed(gp, coord, -h)).unwrap().total;
        let fd = (up - down) / (2.0 * h);
        worst = worst.max((an - fd).abs() / an.abs().max(fd.abs()).max(FD_FLOOR));
    }
    worst
}

/// Best full assignment by enumerating every combination of per-client injective maps,
/// scored with the direct objective.
pub fn joint_brute_force(sets: &[LocalPromptSet], gp: &GenerativeParams) -> f64 {
    let n = gp.pool.len();
    let options: Vec<Vec<Vec<usize>>> = sets.iter().map(|s| injective_maps(s.len(), n)).collect();
    let mut pick = vec![0usize; sets.len()];
    let mut best = f64::NEG_INFINITY;
    loop {
        let rows = pick.iter().zip(&options).map(|(&i, o)| o[i].clone()).collect();
        let (l1, l2) = direct_objective(sets, &Assignment::full(rows), gp);
        best = best.max(l1 + l2);
        let mut t = 0;
        while t < pick.len() {
            pick[t] += 1;
            if pick[t] < options[t].len() {
                break;
            }
            pick[t] = 0;
            t += 1;
        }
        if t == pick.len() {
            return best;
        }
    }
}
