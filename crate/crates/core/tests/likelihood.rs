mod common;

use common::*;
use pfpt_core::likelihood::{
    assignment_logprior, cost_matrix, gaussian_logpdf, grad_params, joint_objective, local_set_loglik,
};
use pfpt_core::{Assignment, LocalPromptSet};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn linear_forms_match_direct_evaluation() {
    let mut r = rng(11);
    for _ in 0..100 {
        let d = r.random_range(1..=6);
        let n = r.random_range(1..=8);
        let m = r.random_range(1..=5);
        let hidden = r.random_range(1..=6);
        let gp = random_params(&mut r, n, d, hidden);
        let sets = random_sets(&mut r, m, 4, n, d);
        let a = random_assignment(&mut r, &sets, n);
        let obj = joint_objective(&sets, &a, &gp).unwrap();
        let (l1, l2) = direct_objective(&sets, &a, &gp);
        assert!(rel_err(obj.l1, l1) <= 1e-9, "l1 {} vs {}", obj.l1, l1);
        assert!(rel_err(obj.l2_linear + obj.l2_const, l2) <= 1e-9);
        assert!(rel_err(obj.total, l1 + l2) <= 1e-9);
        for (set, row) in sets.iter().zip(a.rows()) {
            let direct = direct_set_loglik(set, row, &gp);
            assert!(rel_err(local_set_loglik(set, row, &gp).unwrap(), direct) <= 1e-9);
            assert!(rel_err(assignment_logprior(row, &gp).unwrap(), direct_logprior(row, &gp)) <= 1e-9);
        }
    }
}

#[test]
fn one_hot_selection_passes_through_any_function() {
    let mut r = rng(5);
    let f = |x: f64| x.sin() + x * x - 0.3 * x.powi(3);
    for n in 1..=6 {
        let values: Vec<f64> = (0..n).map(|_| gaussian(&mut r)).collect();
        for chosen in std::iter::once(None).chain((0..n).map(Some)) {
            let zeta: Vec<f64> = (0..n).map(|i| if chosen == Some(i) { 1.0 } else { 0.0 }).collect();
            let mixed: f64 = zeta.iter().zip(&values).map(|(z, v)| z * v).sum();
            let total: f64 = zeta.iter().sum();
            let split: f64 = zeta.iter().zip(&values).map(|(z, v)| z * f(*v)).sum::<f64>() + (1.0 - total) * f(0.0);
            assert_eq!(f(mixed), split);
        }
    }
}

#[test]
fn cost_entries_are_single_assignment_gains() {
    let mut r = rng(21);
    for _ in 0..30 {
        let d = r.random_range(1..=5);
        let n = r.random_range(1..=6);
        let gp = random_params(&mut r, n, d, 4);
        let set = random_sets(&mut r, 1, 4, n, d).remove(0);
        let c = cost_matrix(&set, &gp).unwrap();
        let empty = vec![None; set.len()];
        let base = local_set_loglik(&set, &empty, &gp).unwrap() + assignment_logprior(&empty, &gp).unwrap();
        let zero = vec![0.0; d];
        let unassigned_var = variances(&gp, &zero);
        for k in 0..set.len() {
            let omega = set.prompts()[k].as_slice();
            for i in 0..n {
                let mut row = empty.clone();
                row[k] = Some(i);
                let with = local_set_loglik(&set, &row, &gp).unwrap() + assignment_logprior(&row, &gp).unwrap();
                // The unassigned branch of prompt k does not depend on which column it later takes.
                let gain = with - base + logpdf(omega, &zero, &unassigned_var);
                assert!(rel_err(c.get(k, i), gain) <= 1e-9);
            }
        }
    }
}

#[test]
fn gaussian_density_examples() {
    let half_log_two_pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    assert!((gaussian_logpdf(&[0.0], &[0.0], &[1.0]).unwrap() + half_log_two_pi).abs() < 1e-12);
    assert!((gaussian_logpdf(&[1.0, 0.0], &[0.0, 0.0], &[1.0, 1.0]).unwrap() + 2.3378771).abs() < 1e-7);
    let got = gaussian_logpdf(&[1.0, 2.0], &[0.0, 0.0], &[2.0, 0.5]).unwrap();
    assert!((got - logpdf(&[1.0, 2.0], &[0.0, 0.0], &[2.0, 0.5])).abs() < 1e-12);
    assert!(gaussian_logpdf(&[0.0], &[0.0], &[0.0]).is_err());
}

#[test]
fn identical_rows_give_identical_costs() {
    let mut r = rng(8);
    let gp = random_params(&mut r, 4, 3, 4);
    let p = prompt(&mut r, 3, 1.0);
    let set = LocalPromptSet::new(0, vec![p.clone(), prompt(&mut r, 3, 1.0), p]).unwrap();
    let c = cost_matrix(&set, &gp).unwrap();
    assert_eq!(c.row(0), c.row(2));
}

#[test]
fn gradients_match_central_differences() {
    let mut r = rng(3);
    for _ in 0..50 {
        let d = r.random_range(1..=8);
        let n = r.random_range(1..=6);
        let hidden = r.random_range(1..=8);
        let gp = random_params(&mut r, n, d, hidden);
        let m = r.random_range(1..=4);
        let sets = random_sets(&mut r, m, 4, n, d);
        let a = random_assignment(&mut r, &sets, n);
        let worst = worst_fd_error(&sets, &a, &gp);
        assert!(worst <= 1e-4, "worst relative error {worst}");
    }
}

#[test]
fn unassigned_member_only_feels_the_constant_term() {
    let mut r = rng(4);
    let gp = random_params(&mut r, 3, 2, 3);
    let set = LocalPromptSet::new(0, vec![prompt(&mut r, 2, 1.0)]).unwrap();
    let a = Assignment::full(vec![vec![0]]);
    let (_, g) = grad_params(std::slice::from_ref(&set), &a, &gp).unwrap();
    // Member 2 carries no Gaussian term: its gradient is -σ(g) ∂g/∂φ.
    let phi = gp.pool.prompts()[2].as_slice();
    let sig = 1.0 / (1.0 + (-logit(&gp, phi)).exp());
    let h = 1e-6;
    for j in 0..2 {
        let mut up = phi.to_vec();
        up[j] += h;
        let mut dn = phi.to_vec();
        dn[j] -= h;
        let dg = (logit(&gp, &up) - logit(&gp, &dn)) / (2.0 * h);
        assert!((g.pool[2][j] + sig * dg).abs() < 1e-7);
    }
}

#[test]
fn duplicating_clients_doubles_the_objective() {
    let mut r = rng(6);
    for _ in 0..20 {
        let gp = random_params(&mut r, 5, 3, 4);
        let sets = random_sets(&mut r, 3, 3, 5, 3);
        let a = random_assignment(&mut r, &sets, 5);
        let once = joint_objective(&sets, &a, &gp).unwrap().total;
        let twice_sets: Vec<LocalPromptSet> = sets.iter().chain(&sets).cloned().collect();
        let twice_rows: Vec<Vec<Option<usize>>> = a.rows().iter().chain(a.rows()).cloned().collect();
        let twice = joint_objective(&twice_sets, &Assignment::new(twice_rows), &gp).unwrap().total;
        assert!(rel_err(twice, 2.0 * once) <= 1e-12);
    }
}

proptest! {
    #[test]
    fn shifting_both_arguments_keeps_the_density(
        w in prop::collection::vec(-64i32..64, 1..6),
        shift in -8i32..8,
        v in 0.05f64..4.0,
    ) {
        // Multiples of 1/8 shifted by integers keep every difference exact.
        let omega: Vec<f64> = w.iter().map(|&x| x as f64 / 8.0).collect();
        let mean: Vec<f64> = w.iter().rev().map(|&x| x as f64 / 8.0).collect();
        let var = vec![v; omega.len()];
        let c = shift as f64;
        let so: Vec<f64> = omega.iter().map(|x| x + c).collect();
        let sm: Vec<f64> = mean.iter().map(|x| x + c).collect();
        prop_assert_eq!(gaussian_logpdf(&omega, &mean, &var).unwrap(), gaussian_logpdf(&so, &sm, &var).unwrap());
    }

    #[test]
    fn breakdown_parts_sum_to_total(seed in any::<u64>()) {
        let mut r = rng(seed);
        let gp = random_params(&mut r, 4, 3, 3);
        let sets = random_sets(&mut r, 3, 3, 4, 3);
        let a = random_assignment(&mut r, &sets, 4);
        let o = joint_objective(&sets, &a, &gp).unwrap();
        prop_assert_eq!(o.total, o.l1 + o.l2_linear + o.l2_const);
        prop_assert!(o.total.is_finite());
    }
}
