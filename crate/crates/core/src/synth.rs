//! Synthetic micro-randomized trials with known reward coefficients.
//!
//! Actions are assigned by actually running the warmup + Thompson-sampling
//! algorithm, so generated data carry the same adaptive dependence as a
//! deployed trial.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bayes::{RewardFit, NOISE_VAR_FLOOR};
use crate::error::{Error, Result};
use crate::generative::{parasim_run, AlgorithmConfig, ExogenousPoint, GroundTruthModel};
use crate::model::{
    BinaryFeature, ContextFeatures, DecisionPoint, Feature, Trajectory, F_DIM, G_DIM,
    SLOTS_PER_DAY,
};
use crate::rng::labeled_stream;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Gaussian {
    pub mean: f64,
    pub sd: f64,
}

impl Default for Gaussian {
    fn default() -> Self {
        Self { mean: 0.0, sd: 1.0 }
    }
}

/// Marginal laws of the context features, i.i.d. over decision times unless
/// `persistence` is set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureProcess {
    pub engagement_prob: f64,
    pub variation_prob: f64,
    pub location_prob: f64,
    pub temperature: Gaussian,
    pub prior_30min_steps: Gaussian,
    pub yesterday_steps: Gaussian,
    /// Probability that variation and location keep their previous value
    /// (otherwise they are redrawn from their marginal).
    pub persistence: Option<f64>,
}

impl Default for FeatureProcess {
    fn default() -> Self {
        Self {
            engagement_prob: 0.5,
            variation_prob: 0.5,
            location_prob: 0.5,
            temperature: Gaussian::default(),
            prior_30min_steps: Gaussian::default(),
            yesterday_steps: Gaussian::default(),
            persistence: None,
        }
    }
}

/// Parameters of a synthetic trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_users: usize,
    pub horizon: usize,
    pub availability_rate: f64,
    pub features: FeatureProcess,
    pub true_alpha: [f64; G_DIM],
    pub true_beta: [f64; F_DIM],
    pub noise_sd: f64,
    pub antised_rate: f64,
    pub seed: u64,
    /// σ² of the algorithm that assigns treatments; defaults to `noise_sd²`.
    pub algorithm_noise_var: Option<f64>,
    pub user_prefix: String,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_users: 10,
            horizon: 450,
            availability_rate: 0.8,
            features: FeatureProcess::default(),
            true_alpha: [0.82, 1.95, 3.81, -0.19, 0.76, 0.0, -0.92, 0.0],
            true_beta: [0.0; F_DIM],
            noise_sd: 1.0,
            antised_rate: 0.1,
            seed: 0,
            algorithm_noise_var: None,
            user_prefix: "user".into(),
        }
    }
}

fn check_prob(name: &str, p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("{name} = {p} is not a probability")))
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        check_prob("availability_rate", self.availability_rate)?;
        check_prob("antised_rate", self.antised_rate)?;
        check_prob("engagement_prob", self.features.engagement_prob)?;
        check_prob("variation_prob", self.features.variation_prob)?;
        check_prob("location_prob", self.features.location_prob)?;
        if let Some(p) = self.features.persistence {
            check_prob("persistence", p)?;
        }
        for (name, g) in [
            ("temperature", self.features.temperature),
            ("prior_30min_steps", self.features.prior_30min_steps),
            ("yesterday_steps", self.features.yesterday_steps),
        ] {
            if !(g.mean.is_finite() && g.sd.is_finite() && g.sd >= 0.0) {
                return Err(Error::InvalidConfig(format!("{name} needs a finite mean and sd ≥ 0")));
            }
        }
        if !(self.noise_sd.is_finite() && self.noise_sd >= 0.0) {
            return Err(Error::InvalidConfig(format!("noise_sd = {} must be ≥ 0", self.noise_sd)));
        }
        if self.true_alpha.iter().chain(&self.true_beta).any(|x| !x.is_finite()) {
            return Err(Error::InvalidConfig("true coefficients must be finite".into()));
        }
        Ok(())
    }

    fn algorithm(&self) -> AlgorithmConfig {
        let noise_var = self
            .algorithm_noise_var
            .unwrap_or(self.noise_sd * self.noise_sd)
            .max(NOISE_VAR_FLOOR);
        let mut algo = AlgorithmConfig::default();
        algo.prior.noise_var = noise_var;
        algo.warmup_days = algo.warmup_days.min(self.horizon / SLOTS_PER_DAY);
        algo
    }

    pub fn user_id(&self, i: usize) -> String {
        format!("{}{:03}", self.user_prefix, i)
    }
}

fn draw_gaussian<R: Rng + ?Sized>(g: Gaussian, rng: &mut R) -> f64 {
    if g.sd == 0.0 {
        return g.mean;
    }
    Normal::new(g.mean, g.sd).expect("validated sd").sample(rng)
}

fn draw_binary<R: Rng + ?Sized>(p: f64, prev: Option<bool>, persistence: Option<f64>, rng: &mut R) -> bool {
    if let (Some(prev), Some(keep)) = (prev, persistence) {
        if rng.random::<f64>() < keep {
            return prev;
        }
    }
    rng.random::<f64>() < p
}

/// Generates one user with coefficients `(alpha, beta)`.
pub fn generate_user(spec: &SynthSpec, user_id: &str, beta: [f64; F_DIM]) -> Result<Trajectory> {
    spec.validate()?;
    let mut rng = labeled_stream(spec.seed, "synth-exogenous", user_id, 0);
    let f = &spec.features;
    let noise = Normal::new(0.0, spec.noise_sd.max(0.0)).map_err(|e| Error::InvalidConfig(e.to_string()))?;

    let mut exogenous = Vec::with_capacity(spec.horizon);
    let mut residuals = Vec::with_capacity(spec.horizon);
    let mut prev: Option<ContextFeatures> = None;
    for t in 1..=spec.horizon {
        let context = ContextFeatures {
            engagement: rng.random::<f64>() < f.engagement_prob,
            variation: draw_binary(f.variation_prob, prev.map(|c| c.variation), f.persistence, &mut rng),
            location: draw_binary(f.location_prob, prev.map(|c| c.location), f.persistence, &mut rng),
            temperature: draw_gaussian(f.temperature, &mut rng),
            prior_30min_steps: draw_gaussian(f.prior_30min_steps, &mut rng),
            yesterday_steps: draw_gaussian(f.yesterday_steps, &mut rng),
        };
        let available = rng.random::<f64>() < spec.availability_rate;
        let anti_sedentary = rng.random::<f64>() < spec.antised_rate;
        let eps = noise.sample(&mut rng);
        exogenous.push(ExogenousPoint {
            t,
            available,
            context,
            anti_sedentary,
            missing: false,
        });
        residuals.push(available.then_some(eps));
        prev = Some(context);
    }

    let model = GroundTruthModel {
        user_id: user_id.to_string(),
        exogenous,
        residuals,
        coefficients: RewardFit::from_slices(&spec.true_alpha, &beta)?,
        algorithm: spec.algorithm(),
    };
    model.validate()?;
    let mut action_rng = labeled_stream(spec.seed, "synth-actions", user_id, 0);
    let run = parasim_run(&model, &mut action_rng)?;

    let points = run
        .points
        .iter()
        .map(|s| DecisionPoint {
            t: s.t,
            day: crate::model::day_of(s.t),
            available: s.available,
            context: s.context,
            anti_sedentary: s.anti_sedentary,
            dosage: s.dosage,
            action: Some(s.action),
            action_prob: s.prob,
            reward: s.reward,
            missing: false,
        })
        .collect();
    Trajectory::new(user_id, points)
}

/// Generates `spec.n_users` users sharing `spec.true_beta`.
pub fn generate_trial(spec: &SynthSpec) -> Result<Vec<Trajectory>> {
    spec.validate()?;
    (0..spec.n_users)
        .map(|i| generate_user(spec, &spec.user_id(i), spec.true_beta))
        .collect()
}

/// Coordinate of `β` that carries a planted effect.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlantTarget {
    Intercept,
    #[serde(untagged)]
    Feature(Feature),
}

impl PlantTarget {
    fn index(self) -> usize {
        match self {
            PlantTarget::Intercept => 0,
            PlantTarget::Feature(f) => f.f_index(),
        }
    }
}

impl From<BinaryFeature> for PlantTarget {
    fn from(b: BinaryFeature) -> Self {
        PlantTarget::Feature(b.into())
    }
}

/// Users with known labels: `planted[i]` is true for effect users.
#[derive(Debug, Clone)]
pub struct Cohort {
    pub trajectories: Vec<Trajectory>,
    pub planted: Vec<bool>,
}

/// `n_null` users whose `target` coefficient is 0 and `n_effect` users whose
/// `target` coefficient is `effect_size`; other coefficients come from
/// `spec.true_beta`. Null users are named `null-NNN`, effect users `effect-NNN`,
/// so adding effect users never changes the null users' data.
pub fn planted_cohort(
    spec: &SynthSpec,
    n_null: usize,
    n_effect: usize,
    effect_size: f64,
    target: PlantTarget,
) -> Result<Cohort> {
    if !(effect_size.is_finite() && effect_size >= 0.0) {
        return Err(Error::InvalidConfig(format!("effect_size {effect_size} must be ≥ 0")));
    }
    let mut null_beta = spec.true_beta;
    null_beta[target.index()] = 0.0;
    let mut effect_beta = spec.true_beta;
    effect_beta[target.index()] = effect_size;

    let mut trajectories = Vec::with_capacity(n_null + n_effect);
    let mut planted = Vec::with_capacity(n_null + n_effect);
    for i in 0..n_null {
        trajectories.push(generate_user(spec, &format!("null-{i:03}"), null_beta)?);
        planted.push(false);
    }
    for i in 0..n_effect {
        trajectories.push(generate_user(spec, &format!("effect-{i:03}"), effect_beta)?);
        planted.push(true);
    }
    Ok(Cohort {
        trajectories,
        planted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{f_vector, g_vector, update_dosage};

    fn small(seed: u64) -> SynthSpec {
        SynthSpec {
            n_users: 3,
            horizon: 100,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn no_availability_means_no_treatment() {
        let spec = SynthSpec {
            availability_rate: 0.0,
            ..small(1)
        };
        for traj in generate_trial(&spec).unwrap() {
            assert!(traj.points.iter().all(|p| !p.treated() && p.reward.is_none()));
        }
    }

    #[test]
    fn noiseless_null_rewards_are_baseline_means() {
        let spec = SynthSpec {
            noise_sd: 0.0,
            ..small(2)
        };
        let alpha = nalgebra::SVector::<f64, G_DIM>::from(spec.true_alpha);
        for traj in generate_trial(&spec).unwrap() {
            for p in traj.points.iter().filter(|p| p.available) {
                assert_eq!(p.reward, Some(alpha.dot(&g_vector(&p.context, p.dosage))));
            }
        }
    }

    #[test]
    fn generated_data_satisfy_model_invariants() {
        let spec = SynthSpec {
            features: FeatureProcess {
                persistence: Some(0.7),
                ..Default::default()
            },
            true_beta: [0.5, 0.0, 0.2, 0.0, -0.3],
            ..small(3)
        };
        let trial = generate_trial(&spec).unwrap();
        assert_eq!(trial.len(), 3);
        for traj in &trial {
            traj.validate().unwrap();
            let mut x = 0.0;
            for (i, p) in traj.points.iter().enumerate() {
                if i > 0 {
                    let q = &traj.points[i - 1];
                    x = update_dosage(x, q.treated(), q.anti_sedentary);
                }
                assert_eq!(p.dosage, x);
                assert!(p.dosage < 20.0);
                if p.available {
                    let pr = p.action_prob.unwrap();
                    if p.t <= 35 {
                        assert_eq!(pr, 0.25);
                    } else {
                        assert!((0.2..=0.8).contains(&pr));
                    }
                    let _ = f_vector(&p.context, p.dosage);
                }
            }
        }
    }

    #[test]
    fn deterministic_under_seed() {
        assert_eq!(generate_trial(&small(4)).unwrap(), generate_trial(&small(4)).unwrap());
        assert_ne!(generate_trial(&small(4)).unwrap(), generate_trial(&small(5)).unwrap());
    }

    #[test]
    fn cohort_labels_partition() {
        let c = planted_cohort(&small(6), 3, 2, 1.0, PlantTarget::Intercept).unwrap();
        assert_eq!(c.trajectories.len(), 5);
        assert_eq!(c.planted, vec![false, false, false, true, true]);
        let nulls = planted_cohort(&small(6), 3, 0, 1.0, PlantTarget::Intercept).unwrap();
        assert_eq!(&c.trajectories[..3], &nulls.trajectories[..]);

        // zero effect: effect users are generated exactly like null users
        let z = planted_cohort(&small(6), 0, 2, 0.0, PlantTarget::Intercept).unwrap();
        let beta0 = small(6).true_beta;
        let direct = generate_user(&small(6), "effect-000", beta0).unwrap();
        assert_eq!(z.trajectories[0], direct);
        assert!(planted_cohort(&small(6), 1, 1, -1.0, PlantTarget::Intercept).is_err());
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(SynthSpec { availability_rate: 1.5, ..small(0) }.validate().is_err());
        assert!(SynthSpec { noise_sd: -1.0, ..small(0) }.validate().is_err());
    }
}
