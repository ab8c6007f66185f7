use augsearch::augment::OpKind;
use augsearch::estimators::{
    bias_table, enumerate_exact_grad, estimator_variance, relax_grad_batch, EstimatorKind, Surrogate, ToyProblem,
};
use augsearch::policy::{build_space, init_params, sample_policy, PairingMode, Relaxation};
use proptest::prelude::*;
use proptest::test_runner::RngSeed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const THREE_OPS: [OpKind; 3] = [OpKind::Rotate, OpKind::Invert, OpKind::Cutout];

#[test]
fn relax_on_bernoulli_matches_closed_form() {
    let beta: f64 = 0.3;
    let toy = ToyProblem::bernoulli(beta).unwrap();
    let rows = bias_table(&toy, &[EstimatorKind::Relax], Relaxation::uniform(0.5), 100_000, 1).unwrap();
    assert_eq!(rows.len(), 1);
    assert!((rows[0].exact - beta * (1.0 - beta)).abs() < 1e-12);
    assert!(rows[0].bias_sigma.abs() < 3.0, "{:?}", rows[0]);
}

#[test]
fn matched_constant_surrogate_gives_exact_zero() {
    let mut toy = ToyProblem::random_table(&THREE_OPS, 2, PairingMode::Unordered, 4).unwrap();
    let kappa = 0.37;
    toy.table.iter_mut().for_each(|l| *l = kappa);
    toy.params.phi = Surrogate::constant(toy.params.n() + toy.params.k, kappa);
    let temps = Relaxation::uniform(0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let draws: Vec<_> = (0..200).map(|_| toy.sample(temps, &mut rng).unwrap()).collect();
    for e in toy.estimates(EstimatorKind::Relax, &draws, temps).unwrap() {
        assert!(e.iter().all(|&x| x == 0.0), "{e:?}");
    }
}

#[test]
fn zero_estimate_gives_zero_surrogate_gradient() {
    let toy = {
        let mut t = ToyProblem::random_table(&THREE_OPS, 2, PairingMode::Unordered, 5).unwrap();
        t.table.iter_mut().for_each(|l| *l = 0.0);
        t.params.phi = Surrogate::constant(t.params.n() + t.params.k, 0.0);
        t
    };
    let temps = Relaxation::uniform(0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let draws: Vec<_> = (0..16).map(|_| toy.sample(temps, &mut rng).unwrap()).collect();
    let (_, phi) = relax_grad_batch(&vec![0.0; 16], &draws, &toy.params, temps, true).unwrap();
    assert!(phi.unwrap().iter().flatten().all(|&g| g == 0.0));
}

#[test]
fn exact_gradient_of_a_constant_is_zero() {
    let space = build_space(&THREE_OPS, 2, PairingMode::Unordered).unwrap();
    let mut params = init_params(&space, &mut ChaCha8Rng::seed_from_u64(0));
    params.alpha = vec![0.3, -1.0, 2.0];
    let g = enumerate_exact_grad(&space, &params, |_, _| 4.2).unwrap();
    assert!(g.d_alpha.iter().chain(&g.d_beta).all(|x| x.abs() < 1e-12));
}

#[test]
fn exact_gradient_of_an_indicator() {
    let space = build_space(&[OpKind::Rotate, OpKind::Invert], 1, PairingMode::Unordered).unwrap();
    let mut params = init_params(&space, &mut ChaCha8Rng::seed_from_u64(0));
    params.alpha = vec![0.4, -0.3];
    let pi = params.probs();
    let g = enumerate_exact_grad(&space, &params, |c, _| if c == 1 { 1.0 } else { 0.0 }).unwrap();
    assert!((g.d_alpha[1] - pi[1] * (1.0 - pi[1])).abs() < 1e-15);
    assert!((g.d_alpha[0] + pi[0] * pi[1]).abs() < 1e-15);
}

#[test]
fn exact_gradient_matches_finite_differences() {
    let toy = ToyProblem::random_table(&THREE_OPS, 2, PairingMode::Unordered, 8).unwrap();
    let exact = enumerate_exact_grad(&toy.space, &toy.params, |c, b| toy.loss(c, b)).unwrap();
    let expect = |p: &augsearch::policy::PolicyParams| {
        enumerate_exact_grad(&toy.space, p, |c, b| toy.loss(c, b)).unwrap().diagnostics.loss_mean
    };
    let h = 1e-5;
    for s in 0..3 {
        let (mut a, mut b) = (toy.params.clone(), toy.params.clone());
        a.alpha[s] += h;
        b.alpha[s] -= h;
        assert!(((expect(&a) - expect(&b)) / (2.0 * h) - exact.d_alpha[s]).abs() < 1e-6);
    }
    for j in 0..6 {
        let (mut a, mut b) = (toy.params.clone(), toy.params.clone());
        a.beta_logits[j] += h;
        b.beta_logits[j] -= h;
        assert!(((expect(&a) - expect(&b)) / (2.0 * h) - exact.d_beta[j]).abs() < 1e-6);
    }
}

#[test]
fn enumeration_refuses_large_spaces() {
    let ops = augsearch::augment::DEFAULT_OPS;
    let space = build_space(&ops, 4, PairingMode::Unordered).unwrap();
    let params = init_params(&space, &mut ChaCha8Rng::seed_from_u64(0));
    assert!(enumerate_exact_grad(&space, &params, |_, _| 0.0).is_err());
}

#[test]
fn unsampled_subpolicies_get_zero() {
    let toy = ToyProblem::random_table(&[OpKind::Rotate, OpKind::Invert, OpKind::Cutout, OpKind::Equalize], 2, PairingMode::Unordered, 2).unwrap();
    let temps = Relaxation::uniform(0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let draws: Vec<_> = (0..3).map(|_| toy.sample(temps, &mut rng).unwrap()).collect();
    let losses: Vec<f64> = draws.iter().map(|s| toy.loss(s.subpolicy_index, &s.bits())).collect();
    let (g, _) = relax_grad_batch(&losses, &draws, &toy.params, temps, false).unwrap();
    let k = toy.space.k;
    for s in 0..toy.space.len() {
        if draws.iter().all(|d| d.subpolicy_index != s) {
            assert!(g.d_beta[s * k..(s + 1) * k].iter().all(|&x| x == 0.0));
            assert!(g.d_m[s * k..(s + 1) * k].iter().all(|&x| x == 0.0));
        }
    }
}

#[test]
fn gumbel_st_is_biased_on_the_bernoulli_toy() {
    let toy = ToyProblem::bernoulli(0.5).unwrap();
    let rows = bias_table(&toy, &[EstimatorKind::GumbelSt], Relaxation::uniform(0.5), 100_000, 7).unwrap();
    assert!(rows[0].bias_sigma.abs() > 3.0, "{:?}", rows[0]);
}

#[test]
fn straight_through_vanishes_at_high_temperature() {
    let toy = ToyProblem::random_table(&THREE_OPS, 2, PairingMode::Unordered, 1).unwrap();
    let temps = Relaxation::uniform(1e6);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let draws: Vec<_> = (0..50).map(|_| toy.sample(temps, &mut rng).unwrap()).collect();
    for e in toy.estimates(EstimatorKind::GumbelSt, &draws, temps).unwrap() {
        assert!(e.iter().all(|x| x.abs() < 1e-5), "{e:?}");
    }
}

#[test]
fn straight_through_ignores_a_saturated_choice() {
    let mut toy = ToyProblem::random_table(&THREE_OPS, 2, PairingMode::Unordered, 6).unwrap();
    toy.params.alpha = vec![50.0, 0.0, 0.0];
    let temps = Relaxation::uniform(0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let draws: Vec<_> = (0..50).map(|_| toy.sample(temps, &mut rng).unwrap()).collect();
    for e in toy.estimates(EstimatorKind::GumbelSt, &draws, temps).unwrap() {
        assert!(e[1].abs() < 1e-6 && e[2].abs() < 1e-6, "{e:?}");
    }
}

#[test]
fn trained_surrogate_reduces_variance() {
    let temps = Relaxation::uniform(0.5);
    let mut toy = ToyProblem::bernoulli(0.5).unwrap();
    toy.train_surrogate(2000, 1, 5e-3, temps, 3).unwrap();
    let relax = estimator_variance(&toy, EstimatorKind::Relax, temps, 10_000, 4).unwrap();
    let score = estimator_variance(&toy, EstimatorKind::Score, temps, 10_000, 4).unwrap();
    assert!(relax[0] < score[0], "{relax:?} vs {score:?}");
}

fn within(toy: &ToyProblem, kind: EstimatorKind, samples: usize, seed: u64, sigmas: f64) -> Result<(), String> {
    let rows = bias_table(toy, &[kind], Relaxation::uniform(0.5), samples, seed).map_err(|e| e.to_string())?;
    match rows.iter().find(|r| r.bias_sigma.abs() > sigmas) {
        Some(r) => Err(format!("{r:?}")),
        None => Ok(()),
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 6, rng_seed: RngSeed::Fixed(20), ..ProptestConfig::default() })]

    #[test]
    fn relax_is_unbiased_for_any_table(seed in 0u64..10_000) {
        let toy = ToyProblem::random_table(&THREE_OPS, 2, PairingMode::Unordered, seed).unwrap();
        prop_assert!(within(&toy, EstimatorKind::Relax, 30_000, seed, 3.0).is_ok());
        prop_assert!(within(&toy, EstimatorKind::Score, 30_000, seed, 3.0).is_ok());
    }

    #[test]
    fn surrogate_changes_do_not_move_the_mean(seed in 0u64..10_000, hidden in 2usize..12) {
        let mut toy = ToyProblem::random_table(&THREE_OPS, 2, PairingMode::Unordered, seed).unwrap();
        let d = toy.params.n() + toy.params.k;
        toy.params.phi = Surrogate::mlp(d, hidden, &mut ChaCha8Rng::seed_from_u64(seed ^ 0xabc));
        prop_assert!(within(&toy, EstimatorKind::Relax, 30_000, seed + 1, 3.0).is_ok());
    }

    #[test]
    fn relaxed_samples_harden_to_the_draw(seed in 0u64..10_000, tau in 0.05f64..5.0) {
        let space = build_space(&THREE_OPS, 2, PairingMode::Unordered).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = init_params(&space, &mut rng);
        params.alpha.iter_mut().for_each(|a| *a = rng.gen_range(-2.0..2.0));
        let s = sample_policy(&params, &space, Relaxation::uniform(tau), &mut rng).unwrap();
        let z = &s.categorical_sample.z;
        let argmax = (0..z.len()).max_by(|&a, &b| z[a].total_cmp(&z[b])).unwrap();
        prop_assert_eq!(argmax, s.subpolicy_index);
        for b in &s.bernoulli_samples {
            prop_assert_eq!(b.z[0] > 0.5, b.bit());
            prop_assert!((0.0..=1.0).contains(&b.z[0]));
        }
    }
}
