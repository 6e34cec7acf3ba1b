//! Conjugate Gaussian machinery for the action-centered working model:
//! prior assembly, nightly recursive posterior updates, the β marginal used
//! by the policy, and the ridge fit of the (non-centered) reward model.

use nalgebra::{Cholesky, SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    build_g, f_vector, phi_tilde_from_parts, FVector, GVector, PhiVector, Trajectory, F_DIM,
    G_DIM, PHI_DIM, PHI_TILDE_DIM,
};
use crate::policy::ThresholdPolicy;

pub type PhiMatrix = SMatrix<f64, PHI_DIM, PHI_DIM>;
pub type GMatrix = SMatrix<f64, G_DIM, G_DIM>;
pub type FMatrix = SMatrix<f64, F_DIM, F_DIM>;

/// Diagonal load added once when a factorization fails.
pub const JITTER: f64 = 1e-10;
/// Floor for the residual-variance estimate of σ².
pub const NOISE_VAR_FLOOR: f64 = 1e-6;

const PRIOR_MU_ALPHA: [f64; G_DIM] = [0.82, 1.95, 3.81, -0.19, 0.76, 0.0, -0.92, 0.0];
const PRIOR_MU_BETA: [f64; F_DIM] = [0.47, 0.0, 0.0, 0.0, 0.0];
const PRIOR_VAR_ALPHA: [f64; G_DIM] = [14.24, 13.35, 3.24, 0.57, 19.00, 0.26, 17.00, 7.35];
const PRIOR_VAR_BETA: [f64; F_DIM] = [4.93, 24.56, 4.95, 0.67, 0.82];

/// Gaussian prior over `θ = (α₀, α₁, β)` with blocks `(μ_α, μ_β, μ_β)` and
/// `diag(Σ_α, Σ_β, Σ_β)`, plus the working-model noise variance σ².
#[derive(Debug, Clone, PartialEq)]
pub struct Prior {
    pub mu_alpha: GVector,
    pub sigma_alpha: GMatrix,
    pub mu_beta: FVector,
    pub sigma_beta: FMatrix,
    pub noise_var: f64,
}

impl Default for Prior {
    fn default() -> Self {
        make_default_prior()
    }
}

/// The deployed prior, with σ² = 1 until a data-driven value is set.
pub fn make_default_prior() -> Prior {
    Prior {
        mu_alpha: GVector::from(PRIOR_MU_ALPHA),
        sigma_alpha: GMatrix::from_diagonal(&GVector::from(PRIOR_VAR_ALPHA)),
        mu_beta: FVector::from(PRIOR_MU_BETA),
        sigma_beta: FMatrix::from_diagonal(&FVector::from(PRIOR_VAR_BETA)),
        noise_var: 1.0,
    }
}

impl Prior {
    pub fn with_noise_var(mut self, noise_var: f64) -> Self {
        self.noise_var = noise_var;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_var.is_finite() && self.noise_var > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "noise variance must be positive, got {}",
                self.noise_var
            )));
        }
        let finite = self.mu_alpha.iter().chain(self.mu_beta.iter()).all(|x| x.is_finite());
        if !finite {
            return Err(Error::InvalidConfig("prior means must be finite".into()));
        }
        for (name, ok) in [
            ("sigma_alpha", is_spd(&self.sigma_alpha)),
            ("sigma_beta", is_spd(&self.sigma_beta)),
        ] {
            if !ok {
                return Err(Error::InvalidConfig(format!(
                    "prior {name} must be symmetric positive definite"
                )));
            }
        }
        Ok(())
    }

    /// Stacked mean `(μ_α, μ_β, μ_β)`.
    pub fn mu0(&self) -> PhiVector {
        let mut mu = PhiVector::zeros();
        mu.fixed_rows_mut::<G_DIM>(0).copy_from(&self.mu_alpha);
        mu.fixed_rows_mut::<F_DIM>(G_DIM).copy_from(&self.mu_beta);
        mu.fixed_rows_mut::<F_DIM>(G_DIM + F_DIM).copy_from(&self.mu_beta);
        mu
    }

    /// Block-diagonal covariance `diag(Σ_α, Σ_β, Σ_β)`.
    pub fn sigma0(&self) -> PhiMatrix {
        let mut s = PhiMatrix::zeros();
        s.fixed_view_mut::<G_DIM, G_DIM>(0, 0).copy_from(&self.sigma_alpha);
        s.fixed_view_mut::<F_DIM, F_DIM>(G_DIM, G_DIM).copy_from(&self.sigma_beta);
        s.fixed_view_mut::<F_DIM, F_DIM>(G_DIM + F_DIM, G_DIM + F_DIM)
            .copy_from(&self.sigma_beta);
        s
    }

    /// Mean of the ridge fit's regularizer, `(μ_α, μ_β)`.
    pub fn fit_center(&self) -> SVector<f64, PHI_TILDE_DIM> {
        let mut m = SVector::<f64, PHI_TILDE_DIM>::zeros();
        m.fixed_rows_mut::<G_DIM>(0).copy_from(&self.mu_alpha);
        m.fixed_rows_mut::<F_DIM>(G_DIM).copy_from(&self.mu_beta);
        m
    }

    /// Covariance of the ridge fit's regularizer, `diag(Σ_α, Σ_β)`.
    pub fn fit_scale(&self) -> SMatrix<f64, PHI_TILDE_DIM, PHI_TILDE_DIM> {
        let mut s = SMatrix::<f64, PHI_TILDE_DIM, PHI_TILDE_DIM>::zeros();
        s.fixed_view_mut::<G_DIM, G_DIM>(0, 0).copy_from(&self.sigma_alpha);
        s.fixed_view_mut::<F_DIM, F_DIM>(G_DIM, G_DIM).copy_from(&self.sigma_beta);
        s
    }
}

fn is_spd<const N: usize>(m: &SMatrix<f64, N, N>) -> bool {
    (m - m.transpose()).abs().max() <= 1e-12 * m.abs().max().max(1.0) && Cholesky::new(*m).is_some()
}

/// Cholesky with a single jittered retry.
fn factor<const N: usize>(m: SMatrix<f64, N, N>, day: usize) -> Result<Cholesky<f64, nalgebra::Const<N>>> {
    if let Some(c) = Cholesky::new(m) {
        return Ok(c);
    }
    Cholesky::new(m + SMatrix::<f64, N, N>::identity() * JITTER).ok_or(Error::SingularCovariance { day })
}

fn symmetrize<const N: usize>(m: &mut SMatrix<f64, N, N>) {
    for i in 0..N {
        for j in (i + 1)..N {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Inverse of a symmetric positive-definite matrix, symmetrized.
pub fn spd_inverse<const N: usize>(m: &SMatrix<f64, N, N>, day: usize) -> Result<SMatrix<f64, N, N>> {
    let mut inv = factor(*m, day)?.inverse();
    symmetrize(&mut inv);
    Ok(inv)
}

/// One decision time's contribution to a nightly update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DayObservation {
    pub phi: PhiVector,
    pub reward: f64,
    pub available: bool,
}

/// Gaussian posterior `N(μ̄_d, Σ̄_d)` together with the threshold in effect.
#[derive(Debug, Clone)]
pub struct PosteriorState {
    /// Number of nightly updates applied since the prior.
    pub day: usize,
    pub mu: PhiVector,
    pub sigma: PhiMatrix,
    pub eta: ThresholdPolicy,
}

impl PosteriorState {
    pub fn from_prior(prior: &Prior, eta: ThresholdPolicy) -> Self {
        Self {
            day: 0,
            mu: prior.mu0(),
            sigma: prior.sigma0(),
            eta,
        }
    }
}

/// Nightly conjugate update:
/// `Σ̄_d = (σ⁻²·Σ I_t φφᵀ + Σ̄_{d−1}⁻¹)⁻¹`,
/// `μ̄_d = Σ̄_d·(σ⁻²·Σ I_t φR + Σ̄_{d−1}⁻¹μ̄_{d−1})`.
///
/// Callers pass only points with an observed reward and state.
pub fn posterior_update(
    state: &PosteriorState,
    prior: &Prior,
    batch: &[DayObservation],
) -> Result<PosteriorState> {
    let day = state.day + 1;
    let scale = 1.0 / prior.noise_var;
    let mut gram = PhiMatrix::zeros();
    let mut xty = PhiVector::zeros();
    let mut any = false;
    for obs in batch.iter().filter(|o| o.available) {
        if !obs.reward.is_finite() || obs.phi.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteReward { day });
        }
        gram.ger(scale, &obs.phi, &obs.phi, 1.0);
        xty.axpy(scale * obs.reward, &obs.phi, 1.0);
        any = true;
    }
    let eta = state.eta.next(day, batch);
    if !any {
        return Ok(PosteriorState {
            day,
            mu: state.mu,
            sigma: state.sigma,
            eta,
        });
    }
    let prev_precision = spd_inverse(&state.sigma, day)?;
    let precision = prev_precision + gram;
    let rhs = xty + prev_precision * state.mu;
    let chol = factor(precision, day)?;
    let mut sigma = chol.inverse();
    symmetrize(&mut sigma);
    let mu = chol.solve(&rhs);
    Ok(PosteriorState { day, mu, sigma, eta })
}

/// Trailing `F_DIM` block of the posterior: the marginal of β.
pub fn beta_marginal(state: &PosteriorState) -> (FVector, FMatrix) {
    let off = G_DIM + F_DIM;
    (
        state.mu.fixed_rows::<F_DIM>(off).into_owned(),
        state.sigma.fixed_view::<F_DIM, F_DIM>(off, off).into_owned(),
    )
}

/// Fitted reward-model coefficients `(α̂, β̂)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardFit {
    pub alpha: GVector,
    pub beta: FVector,
}

impl RewardFit {
    /// Mean reward `αᵀg + A·βᵀf`.
    pub fn mean_reward(&self, g: &GVector, f: &FVector, action: bool) -> f64 {
        self.alpha.dot(g) + if action { self.beta.dot(f) } else { 0.0 }
    }
}

/// Ridge fit with features `[g; A·f]`, regularized toward `(μ_α, μ_β)`
/// with scale `diag(Σ_α, Σ_β)` and noise variance `prior.noise_var`.
pub fn fit_reward_model(traj: &Trajectory, prior: &Prior) -> Result<RewardFit> {
    let scale = 1.0 / prior.noise_var;
    let mut gram = SMatrix::<f64, PHI_TILDE_DIM, PHI_TILDE_DIM>::zeros();
    let mut xty = SVector::<f64, PHI_TILDE_DIM>::zeros();
    let mut n = 0usize;
    for p in traj.points.iter().filter(|p| p.usable()) {
        let g = build_g(p)?;
        let f = f_vector(&p.context, p.dosage);
        let x = phi_tilde_from_parts(&g, &f, p.treated());
        let r = p.reward.expect("usable points carry a reward");
        gram.ger(scale, &x, &x, 1.0);
        xty.axpy(scale * r, &x, 1.0);
        n += 1;
    }
    if n == 0 {
        return Err(Error::NoUsablePoints {
            user_id: traj.user_id.clone(),
        });
    }
    let reg = spd_inverse(&prior.fit_scale(), 0)?;
    let lhs = gram + reg;
    let rhs = xty + reg * prior.fit_center();
    let theta = factor(lhs, 0)?.solve(&rhs);
    Ok(RewardFit {
        alpha: theta.fixed_rows::<G_DIM>(0).into_owned(),
        beta: theta.fixed_rows::<F_DIM>(G_DIM).into_owned(),
    })
}

/// Summary of in-sample residuals of a fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualSummary {
    pub count: usize,
    pub mean: f64,
    /// Mean squared residual.
    pub mean_square: f64,
}

/// A fit together with the σ² it was computed under.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FittedModel {
    pub fit: RewardFit,
    pub noise_var: f64,
    pub residuals: ResidualSummary,
}

pub fn residual_summary(traj: &Trajectory, fit: &RewardFit) -> Result<ResidualSummary> {
    let mut count = 0usize;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for p in traj.points.iter().filter(|p| p.usable()) {
        let g = build_g(p)?;
        let f = f_vector(&p.context, p.dosage);
        let e = p.reward.unwrap_or_default() - fit.mean_reward(&g, &f, p.treated());
        count += 1;
        sum += e;
        sum_sq += e * e;
    }
    if count == 0 {
        return Err(Error::NoUsablePoints {
            user_id: traj.user_id.clone(),
        });
    }
    Ok(ResidualSummary {
        count,
        mean: sum / count as f64,
        mean_square: sum_sq / count as f64,
    })
}

/// Fits the reward model. With `noise_var = None`, σ² is estimated by a
/// two-pass scheme: fit at σ² = 1, take the mean squared residual (floored),
/// and refit under that value.
pub fn fit_with_noise_estimate(
    traj: &Trajectory,
    prior: &Prior,
    noise_var: Option<f64>,
) -> Result<FittedModel> {
    let noise_var = match noise_var {
        Some(v) => v,
        None => {
            let pilot = fit_reward_model(traj, &prior.clone().with_noise_var(1.0))?;
            residual_summary(traj, &pilot)?.mean_square.max(NOISE_VAR_FLOOR)
        }
    };
    let prior = prior.clone().with_noise_var(noise_var);
    let fit = fit_reward_model(traj, &prior)?;
    let residuals = residual_summary(traj, &fit)?;
    Ok(FittedModel {
        fit,
        noise_var,
        residuals,
    })
}
