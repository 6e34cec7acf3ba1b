mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use parasim::bayes::{
    fit_reward_model, fit_with_noise_estimate, make_default_prior, posterior_update,
    DayObservation, PosteriorState,
};
use parasim::interestingness::ScoreConfig;
use parasim::model::{ContextFeatures, DecisionPoint, PhiVector, Trajectory, PHI_DIM};
use parasim::policy::ThresholdPolicy;
use parasim::study::observed_summary;
use parasim::generative::AlgorithmConfig;
use parasim::synth::{generate_user, planted_cohort, PlantTarget, SynthSpec};

use common::*;

fn observation(rng: &mut ChaCha8Rng) -> DayObservation {
    DayObservation {
        phi: PhiVector::from_fn(|_, _| rng.random_range(-3.0..=3.0)),
        reward: rng.random_range(-5.0..5.0),
        available: true,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn recursive_posterior_matches_batch(seed in any::<u64>(), days in 1usize..8, noise_var in 0.25f64..4.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prior = make_default_prior().with_noise_var(noise_var);
        let mut state = PosteriorState::from_prior(&prior, ThresholdPolicy::default());
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for _ in 0..days {
            let n = rng.random_range(0..=5);
            let batch: Vec<_> = (0..n).map(|_| observation(&mut rng)).collect();
            for o in &batch {
                xs.push(o.phi.iter().copied().collect::<Vec<_>>());
                ys.push(o.reward);
            }
            state = posterior_update(&state, &prior, &batch).unwrap();
        }
        let mu0: Vec<f64> = prior.mu0().iter().copied().collect();
        let s0 = prior.sigma0();
        let sigma0: Dense = (0..PHI_DIM).map(|i| (0..PHI_DIM).map(|j| s0[(i, j)]).collect()).collect();
        let (mu, sigma) = batch_posterior(&mu0, &sigma0, &xs, &ys, noise_var);
        prop_assert!(max_abs_diff(state.mu.iter().copied(), mu) < 1e-8);
        let flat: Vec<f64> = (0..PHI_DIM).flat_map(|i| (0..PHI_DIM).map(move |j| (i, j))).map(|ij| state.sigma[ij]).collect();
        prop_assert!(max_abs_diff(flat, sigma.into_iter().flatten()) < 1e-8);
        prop_assert_eq!(state.day, days);
    }

    #[test]
    fn update_is_invariant_to_batch_order(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prior = make_default_prior();
        let state = PosteriorState::from_prior(&prior, ThresholdPolicy::default());
        let batch: Vec<_> = (0..5).map(|_| observation(&mut rng)).collect();
        let mut reversed = batch.clone();
        reversed.reverse();
        let a = posterior_update(&state, &prior, &batch).unwrap();
        let b = posterior_update(&state, &prior, &reversed).unwrap();
        prop_assert!((a.mu - b.mu).abs().max() < 1e-10);
        prop_assert!((a.sigma - b.sigma).abs().max() < 1e-10);
    }

    #[test]
    fn ridge_matches_stacked_design(seed in any::<u64>(), days in 2usize..15) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points = (1..=days * 5).map(|t| {
            let ctx = ContextFeatures {
                engagement: rng.random_bool(0.5),
                variation: rng.random_bool(0.5),
                location: rng.random_bool(0.5),
                temperature: rng.random_range(-3.0..3.0),
                prior_30min_steps: rng.random_range(-3.0..3.0),
                yesterday_steps: rng.random_range(-3.0..3.0),
            };
            let mut p = DecisionPoint::new(t, rng.random_bool(0.7), ctx);
            p.anti_sedentary = rng.random_bool(0.2);
            p.action = Some(p.available && rng.random_bool(0.5));
            if p.available {
                p.action_prob = Some(0.5);
                p.reward = Some(rng.random_range(-3.0..3.0));
            }
            p
        }).collect();
        let traj = Trajectory::with_recomputed_dosage("p", points).unwrap();
        prop_assume!(traj.points.iter().any(|p| p.available));
        let prior = make_default_prior().with_noise_var(1.3);
        let fit = fit_reward_model(&traj, &prior).unwrap();
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for p in traj.points.iter().filter(|p| p.available) {
            let a = if p.treated() { 1.0 } else { 0.0 };
            let mut x = g_oracle(&p.context, p.dosage);
            x.extend(f_oracle(&p.context, p.dosage).into_iter().map(|v| a * v));
            xs.push(x);
            ys.push(p.reward.unwrap());
        }
        let center: Vec<f64> = prior.mu_alpha.iter().chain(prior.mu_beta.iter()).copied().collect();
        let scale: Vec<f64> = prior.sigma_alpha.diagonal().iter().chain(prior.sigma_beta.diagonal().iter()).copied().collect();
        let theta = stacked_ridge(&xs, &ys, &center, &scale, 1.3);
        prop_assert!(max_abs_diff(fit.alpha.iter().chain(fit.beta.iter()).copied(), theta) < 1e-8);
    }
}

#[test]
fn large_synthetic_user_recovers_coefficients() {
    let spec = SynthSpec {
        horizon: 2000,
        noise_sd: 0.1,
        seed: 17,
        ..Default::default()
    };
    let beta = [0.5, -0.1, 0.3, 0.2, -0.4];
    let traj = generate_user(&spec, "big", beta).unwrap();
    let fitted = fit_with_noise_estimate(&traj, &make_default_prior(), None).unwrap();
    let err = max_abs_diff(
        fitted.fit.alpha.iter().chain(fitted.fit.beta.iter()).copied(),
        spec.true_alpha.iter().chain(beta.iter()).copied(),
    );
    assert!(err < 0.05, "max-abs coefficient error {err}");
    assert!((fitted.noise_var - 0.01).abs() < 0.005, "σ² = {}", fitted.noise_var);
}

#[test]
fn planted_effect_raises_mean_type1_score() {
    let spec = SynthSpec {
        seed: 23,
        ..Default::default()
    };
    let cohort = planted_cohort(&spec, 8, 8, 2.0 * spec.noise_sd, PlantTarget::Intercept).unwrap();
    let algo = AlgorithmConfig::default();
    let mut sums = [0.0f64; 2];
    let mut counts = [0usize; 2];
    for (traj, &planted) in cohort.trajectories.iter().zip(&cohort.planted) {
        let fitted = fit_with_noise_estimate(traj, &algo.prior, None).unwrap();
        let s = observed_summary(traj, &fitted, &algo, &ScoreConfig::default()).unwrap();
        if let Some(score) = s.score {
            sums[usize::from(planted)] += score;
            counts[usize::from(planted)] += 1;
        }
    }
    let null_mean = sums[0] / counts[0] as f64;
    let effect_mean = sums[1] / counts[1] as f64;
    assert!(effect_mean > null_mean, "effect {effect_mean} vs null {null_mean}");
    assert!(effect_mean > 0.9, "effect users mean score {effect_mean}");
}
