//! Acceptance suite: one pass/fail line per criterion, non-zero exit if any fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use common::*;
use pfpt_core::aggregation::{server_aggregate, AggregationConfig, NetInit};
use pfpt_core::baselines::{fedavg_prompts, gmm_aggregate};
use pfpt_core::clients::make_ground_truth;
use pfpt_core::likelihood::{joint_objective, CostMatrix};
use pfpt_core::matching::{hungarian_max, solve_assignments};
use pfpt_core::model::DEFAULT_HIDDEN;
use pfpt_core::partition::{
    dominant_subset_size, imbalance_partition, longtail_totals, partition, summarize, PartitionSpec, Scheme,
};
use pfpt_core::runner::{pool_recovery_error, run_experiment, ExperimentConfig, RoundMetrics};
use pfpt_core::seed::rng_for;
use pfpt_core::{LocalPromptSet, Prompt};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use std::fs;
use std::process::Command;
use std::time::Instant;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn strict_rel(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

fn linearized_forms() -> Verdict {
    let start = Instant::now();
    let mut r = rng(101);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let d = r.random_range(1..=6);
        let n = r.random_range(1..=8);
        let m = r.random_range(1..=5);
        let hidden = r.random_range(1..=8);
        let gp = random_params(&mut r, n, d, hidden);
        let sets = random_sets(&mut r, m, 4, n, d);
        let a = random_assignment(&mut r, &sets, n);
        let obj = joint_objective(&sets, &a, &gp).unwrap();
        let (l1, l2) = direct_objective(&sets, &a, &gp);
        worst = worst.max(strict_rel(obj.l1, l1)).max(strict_rel(obj.l2_linear + obj.l2_const, l2));
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst <= 1e-9 && secs < 1.0,
        format!("100 instances, worst relative error {worst:.2e} (limit 1e-9), {secs:.3} s (limit 1 s)"),
    )
}

fn matching_optimality() -> Verdict {
    let start = Instant::now();
    let mut r = rng(102);
    let mut exact = 0;
    for _ in 0..200 {
        let cols = r.random_range(1..=8);
        let rows = r.random_range(1..=cols.min(7));
        let data: Vec<Vec<f64>> = (0..rows)
            .map(|_| (0..cols).map(|_| r.random_range(-10.0..10.0)).collect())
            .collect();
        let c = CostMatrix::from_rows(&data).unwrap();
        let best = injective_maps(rows, cols)
            .iter()
            .map(|m| m.iter().enumerate().map(|(k, &i)| c.get(k, i)).sum::<f64>())
            .fold(f64::NEG_INFINITY, f64::max);
        if hungarian_max(&c).unwrap().total == best {
            exact += 1;
        }
    }
    let mut joint_ok = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let d = r.random_range(1..=4);
        let n = r.random_range(1..=4);
        let m = r.random_range(1..=3);
        let gp = random_params(&mut r, n, d, 3);
        let sets = random_sets(&mut r, m, 3, n, d);
        let got = joint_objective(&sets, &solve_assignments(&sets, &gp).unwrap(), &gp).unwrap().total;
        let err = strict_rel(got, joint_brute_force(&sets, &gp));
        worst = worst.max(err);
        if err <= 1e-12 {
            joint_ok += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        exact == 200 && joint_ok == 50 && secs < 10.0,
        format!(
            "{exact}/200 exact Hungarian totals, {joint_ok}/50 joint optima (worst {worst:.1e}), {secs:.2} s (limit 10 s)"
        ),
    )
}

fn gradient_fidelity() -> Verdict {
    let start = Instant::now();
    let mut r = rng(103);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let d = r.random_range(1..=8);
        let n = r.random_range(1..=6);
        let hidden = r.random_range(1..=8);
        let gp = random_params(&mut r, n, d, hidden);
        let m = r.random_range(1..=4);
        let sets = random_sets(&mut r, m, 4, n, d);
        let a = random_assignment(&mut r, &sets, n);
        worst = worst.max(worst_fd_error(&sets, &a, &gp));
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst <= 1e-4 && secs < 30.0,
        format!(
            "50 configurations, worst coordinate error {worst:.2e} (limit 1e-4, denominators floored at {FD_FLOOR:e}), {secs:.2} s (limit 30 s)"
        ),
    )
}

fn recovery_config(rounds: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        rounds,
        ..ExperimentConfig::default()
    };
    cfg.partition.clients = 30;
    cfg
}

fn simulate(cfg: &ExperimentConfig, threads: usize, traces: &mut Vec<Vec<f64>>) -> (Vec<RoundMetrics>, f64) {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    let start = Instant::now();
    let res = pool
        .install(|| {
            run_experiment(cfg, |o| {
                if let Some(rep) = o.report {
                    traces.push(rep.objective_trace.clone());
                }
                Ok(())
            })
        })
        .unwrap();
    (res.metrics, start.elapsed().as_secs_f64())
}

fn exact_recovery(traces: &mut Vec<Vec<f64>>) -> Verdict {
    let cfg = recovery_config(40);
    let (metrics, secs) = simulate(&cfg, 1, traces);
    let last = metrics.last().unwrap();
    let err = last.pool_recovery_error.unwrap();
    let acc = last.alignment_accuracy.unwrap();
    verdict(
        last.pool_size == 12 && err < 0.1 && acc >= 0.95 && secs < 60.0,
        format!(
            "pool size {} (want 12), recovery error {err:.4} (limit 0.1), alignment {acc:.3} (min 0.95), {secs:.1} s single-threaded (limit 60 s)",
            last.pool_size
        ),
    )
}

fn pool_convergence(traces: &mut Vec<Vec<f64>>) -> Verdict {
    let (metrics, _) = simulate(&recovery_config(120), 0, traces);
    let sizes: Vec<usize> = metrics[100..].iter().map(|m| m.pool_size).collect();
    let stable = sizes.iter().all(|&s| s == sizes[0]);
    let mean = |ms: &[RoundMetrics]| ms.iter().map(|m| m.centroid_shift).sum::<f64>() / ms.len() as f64;
    let early = mean(&metrics[..10]);
    let late = mean(&metrics[110..]);
    verdict(
        stable && late < early,
        format!(
            "pool size over rounds 101-120: {:?}; mean centroid shift first 10 rounds {early:.4}, last 10 rounds {late:.2e}",
            sizes.iter().collect::<std::collections::BTreeSet<_>>()
        ),
    )
}

fn misalignment_advantage(traces: &mut Vec<Vec<f64>>) -> Verdict {
    let (n_star, d, seed) = (8, 16, 0);
    let truth = make_ground_truth(n_star, d, 1.0, seed).unwrap();
    let mut noise = rng_for(seed, &[99]);
    let identity: Vec<usize> = (0..n_star).collect();
    let mut permuted = identity.clone();
    permuted.shuffle(&mut noise);
    let mut upload = |id: usize, order: &[usize]| {
        let prompts = order
            .iter()
            .map(|&i| {
                let v = truth.pool().prompts()[i].as_slice().iter().map(|x| {
                    let e: f64 = StandardNormal.sample(&mut noise);
                    x + 0.02 * e
                });
                Prompt::new(v.collect()).unwrap()
            })
            .collect();
        LocalPromptSet::new(id, prompts).unwrap()
    };
    let uploads = vec![upload(0, &identity), upload(1, &permuted)];
    let init = NetInit::Fresh {
        hidden: DEFAULT_HIDDEN,
        seed,
    };
    let (pool, _, _, rep) = server_aggregate(None, &uploads, init, &AggregationConfig::default()).unwrap();
    traces.push(rep.objective_trace);
    let e_pfpt = pool_recovery_error(&pool, truth.pool()).unwrap();
    let e_fedavg = pool_recovery_error(&fedavg_prompts(&uploads, None).unwrap().pool, truth.pool()).unwrap();
    let e_gmm = pool_recovery_error(&gmm_aggregate(&uploads, n_star, seed).unwrap(), truth.pool()).unwrap();
    verdict(
        5.0 * e_pfpt <= e_fedavg && e_gmm >= e_pfpt,
        format!("recovery error pfpt {e_pfpt:.6}, fedavg {e_fedavg:.4} ({:.1}x), gmm {e_gmm:.6}", e_fedavg / e_pfpt),
    )
}

fn monotone_ascent(traces: &mut Vec<Vec<f64>>) -> Verdict {
    let mut r = rng(104);
    for i in 0..60 {
        let d = r.random_range(1..=4);
        let m = r.random_range(1..=5);
        let uploads = random_sets(&mut r, m, 4, 4, d);
        let cfg = AggregationConfig {
            full_assignment: i % 2 == 0,
            ..AggregationConfig::default()
        };
        let init = NetInit::Fresh { hidden: 8, seed: i };
        traces.push(server_aggregate(None, &uploads, init, &cfg).unwrap().3.objective_trace);
    }
    let steps: usize = traces.iter().map(|t| t.len().saturating_sub(1)).sum();
    let worst = traces
        .iter()
        .flat_map(|t| t.windows(2).map(|w| w[0] - w[1]))
        .fold(f64::NEG_INFINITY, f64::max);
    verdict(
        worst <= 1e-8,
        format!("{} aggregation runs, {steps} steps, largest single-step decrease {worst:.2e} (limit 1e-8)", traces.len()),
    )
}

fn partition_fidelity() -> Verdict {
    let mut problems = Vec::new();
    let mut worst_share: f64 = 0.0;
    for (classes, clients, per_class) in [(10usize, 100usize, 5000u64), (20, 50, 2000), (100, 100, 600)] {
        let s = PartitionSpec::uniform(Scheme::Imbalance, classes, clients, per_class, 7);
        let top = dominant_subset_size(&s).unwrap();
        if top * 10 != classes {
            problems.push(format!("{classes} classes gave a dominant subset of {top}"));
        }
        let profiles = imbalance_partition(&s).unwrap();
        let summary = summarize(&s.class_totals, &profiles, top);
        for (p, share) in profiles.iter().zip(&summary.dominant_shares) {
            let n = p.total() as f64;
            let gap = (share * n - 0.99 * n).abs();
            worst_share = worst_share.max(gap);
            if gap > 1.0 {
                problems.push(format!("client {} share {share}", p.client_id));
            }
        }
    }
    let mut worst_ratio: f64 = 0.0;
    for (n_max, classes, factor) in [(500u64, 10usize, 100.0), (5000, 100, 100.0), (600, 10, 50.0), (1000, 10, 10.0)] {
        let totals = longtail_totals(n_max, classes, factor).unwrap();
        let max = *totals.iter().max().unwrap() as f64;
        let min = *totals.iter().min().unwrap();
        // Rounding the smallest class by at most half an example bounds the ratio.
        let lo = max / (n_max as f64 / factor + 0.5);
        let hi = max / (n_max as f64 / factor - 0.5);
        let ratio = max / min as f64;
        worst_ratio = worst_ratio.max((ratio - factor).abs() / factor);
        if ratio < lo - 1e-9 || ratio > hi + 1e-9 {
            problems.push(format!("long tail ratio {ratio} for factor {factor}"));
        }
    }
    let mut runs = 0;
    for scheme in [Scheme::Dirichlet, Scheme::Imbalance, Scheme::Longtail] {
        for seed in 0..20 {
            let mut s = PartitionSpec::uniform(scheme, 10, 25, 300, seed);
            s.imbalance_factor = 20.0;
            let (totals, profiles) = partition(&s).unwrap();
            runs += 1;
            if !summarize(&totals, &profiles, 1).conserved {
                problems.push(format!("{scheme:?} seed {seed} lost examples"));
            }
        }
    }
    verdict(
        problems.is_empty(),
        format!(
            "dominant share within {worst_share:.2} examples of 0.99 (limit 1), subset = 10% of classes, long-tail ratio within {:.1}% of the factor, {runs} partitions conserve totals{}",
            100.0 * worst_ratio,
            if problems.is_empty() { String::new() } else { format!("; {}", problems.join("; ")) }
        ),
    )
}

fn determinism() -> Verdict {
    let dir = tempfile::TempDir::new().unwrap();
    let conf = dir.path().join("run.conf");
    fs::write(&conf, "[run]\nrounds = 6\nclients_per_round = 10\n\n[partition]\nclients = 30\n").unwrap();
    let run = |workers: &str| {
        let out = dir.path().join(format!("w{workers}"));
        let status = Command::new(env!("CARGO_BIN_EXE_pfpt"))
            .args(["simulate", "--config", conf.to_str().unwrap(), "--seed", "5", "--workers", workers, "--out"])
            .arg(&out)
            .output()
            .unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        ["metrics.jsonl", "pool.csv", "profiles.csv"].map(|f| fs::read(out.join(f)).unwrap())
    };
    let one = run("1");
    let four = run("4");
    let again = run("4");
    let same = one == four && four == again;
    verdict(
        same,
        format!(
            "metrics.jsonl, pool.csv and profiles.csv {} across --workers 1, 4, 4",
            if same { "byte-identical" } else { "differ" }
        ),
    )
}

fn main() {
    let mut traces = Vec::new();
    let mut results = vec![
        (1, linearized_forms()),
        (2, matching_optimality()),
        (3, gradient_fidelity()),
        (5, exact_recovery(&mut traces)),
        (6, pool_convergence(&mut traces)),
        (7, misalignment_advantage(&mut traces)),
    ];
    results.push((4, monotone_ascent(&mut traces)));
    results.push((8, partition_fidelity()));
    results.push((9, determinism()));
    results.sort_by_key(|(k, _)| *k);

    let names = [
        "linearized likelihood forms",
        "matching optimality",
        "gradient fidelity",
        "monotone ascent",
        "exact recovery",
        "pool convergence",
        "misalignment advantage",
        "partition fidelity",
        "determinism",
    ];
    let mut failed = 0;
    for (k, v) in &results {
        println!("criterion {k} {}: {}: {}", if v.pass { "PASS" } else { "FAIL" }, names[k - 1], v.detail);
        failed += usize::from(!v.pass);
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
