//! Guided fast initialization for clients that join after training began.
//!
//! Each initialization round alternates one local update with a short burst
//! of denoising in which the estimator output is corrected by the client's
//! most recent parameter change:
//!
//! `ε̃ = ε_φ(θ, t) − (1 + ω)·(θ_{l−1} − θ_l)`
//!
//! The current parameters are diffused to `start_step` with fresh noise and
//! denoised for `denoise_steps` steps with that corrected output.

use alloc::vec::Vec;

use rand::Rng;

use crate::client::{ClientState, LocalUpdateConfig};
use crate::diffusion::{forward_marginal, posterior_mean, predict_one};
use crate::error::{Error, Result};
use crate::estimator::EpsModel;
use crate::federated::ServerModel;
use crate::rng;
use crate::schedule::NoiseSchedule;
use crate::tensor::{all_finite, check_len};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum DeltaScale {
    /// The parameter change as is.
    #[default]
    Raw,
    /// The parameter change divided by the local learning rate.
    PerLr,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GuidanceConfig {
    pub omega: f64,
    pub init_rounds: usize,
    pub denoise_steps: usize,
    /// `None` starts at `denoise_steps`.
    pub start_step: Option<usize>,
    pub delta_scale: DeltaScale,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            omega: 0.5,
            init_rounds: 5,
            denoise_steps: 10,
            start_step: None,
            delta_scale: DeltaScale::Raw,
        }
    }
}

impl GuidanceConfig {
    pub fn start(&self) -> usize {
        self.start_step.unwrap_or(self.denoise_steps)
    }

    pub fn validate(&self, s: &NoiseSchedule) -> Result<()> {
        if self.denoise_steps == 0 || self.denoise_steps > s.steps() {
            return Err(Error::InvalidArgument(alloc::format!(
                "denoise_steps must be in 1..={}, got {}",
                s.steps(),
                self.denoise_steps
            )));
        }
        let start = self.start();
        if start < self.denoise_steps || start > s.steps() {
            return Err(Error::InvalidArgument(alloc::format!(
                "start_step must be in {}..={}, got {start}",
                self.denoise_steps,
                s.steps()
            )));
        }
        if !self.omega.is_finite() {
            return Err(Error::InvalidArgument("omega must be finite".into()));
        }
        Ok(())
    }
}

/// `ε_φ(θ, t) − (1 + ω)·delta`
pub fn guided_eps<M: EpsModel + ?Sized>(
    est: &M,
    theta: &[f64],
    t: usize,
    delta: &[f64],
    omega: f64,
) -> Result<Vec<f64>> {
    check_len("guided_eps", delta.len(), theta.len())?;
    let mut eps = predict_one(est, theta, t)?;
    let c = 1.0 + omega;
    for (e, d) in eps.iter_mut().zip(delta) {
        *e -= c * d;
    }
    Ok(eps)
}

/// Denoises `x` from `start` for `steps` reverse steps using the guided
/// output at every step.
#[allow(clippy::too_many_arguments)]
pub fn guided_denoise<M: EpsModel + ?Sized, R: Rng + ?Sized>(
    est: &M,
    x: &[f64],
    delta: &[f64],
    omega: f64,
    start: usize,
    steps: usize,
    s: &NoiseSchedule,
    rng: &mut R,
) -> Result<Vec<f64>> {
    s.check_step(start)?;
    if steps > start {
        return Err(Error::InvalidArgument(alloc::format!(
            "cannot denoise {steps} steps from step {start}"
        )));
    }
    let mut x = x.to_vec();
    for t in ((start + 1 - steps)..=start).rev() {
        let eps = guided_eps(est, &x, t, delta, omega)?;
        x = posterior_mean(&x, &eps, t, s)?;
        let sigma = s.sigma(t);
        if sigma != 0.0 {
            for v in x.iter_mut() {
                *v += sigma * rng::normal(rng);
            }
        }
        if !all_finite(&x) {
            return Err(Error::NonFiniteStep { step: t });
        }
    }
    Ok(x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitOutcome {
    /// Parameters after the final local update.
    pub params: Vec<f64>,
    /// Guided parameters θ̂_1..θ̂_I, one per initialization round.
    pub rounds: Vec<Vec<f64>>,
}

/// Runs the initialization loop for a joining client starting from its
/// current parameters. The client's stored parameters end at the result.
pub fn initialize_new_client<R: Rng + ?Sized>(
    server: &ServerModel,
    client: &mut ClientState,
    gcfg: &GuidanceConfig,
    lcfg: &LocalUpdateConfig,
    rng: &mut R,
) -> Result<InitOutcome> {
    let theta0 = client.params.clone();
    if gcfg.init_rounds == 0 {
        let params = client.local_update(&theta0, lcfg)?;
        return Ok(InitOutcome {
            params,
            rounds: Vec::new(),
        });
    }
    gcfg.validate(&server.schedule)?;
    check_len("new client parameters", theta0.len(), server.space.layout.total())?;
    if server.estimator.dim() != server.space.dim() {
        return Err(Error::Layout(alloc::format!(
            "estimator works on {} dims, parameter space has {}",
            server.estimator.dim(),
            server.space.dim()
        )));
    }
    let scale = match gcfg.delta_scale {
        DeltaScale::Raw => 1.0,
        DeltaScale::PerLr => 1.0 / lcfg.lr,
    };
    let start = gcfg.start();
    let mut prev_local = theta0.clone();
    let mut hat = theta0;
    let mut rounds = Vec::with_capacity(gcfg.init_rounds);
    for _ in 0..gcfg.init_rounds {
        let local = client.local_update(&hat, lcfg)?;
        let z_prev = server.space.encode(&prev_local)?;
        let z_local = server.space.encode(&local)?;
        let delta: Vec<f64> = z_prev.iter().zip(&z_local).map(|(a, b)| scale * (a - b)).collect();
        let noise = rng::normal_vec(rng, z_local.len());
        let diffused = forward_marginal(&z_local, start, &noise, &server.schedule)?;
        let z = guided_denoise(
            &server.estimator,
            &diffused,
            &delta,
            gcfg.omega,
            start,
            gcfg.denoise_steps,
            &server.schedule,
            rng,
        )?;
        hat = server.space.decode(&z, &local)?;
        if !all_finite(&hat) {
            return Err(Error::NonFinite {
                op_index: 0,
                op: "guided initialization",
            });
        }
        rounds.push(hat.clone());
        prev_local = local;
    }
    let params = client.local_update(&hat, lcfg)?;
    Ok(InitOutcome { params, rounds })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::ZeroEps;
    use crate::rng::seeded;
    use crate::schedule::ScheduleKind;
    use alloc::vec;

    #[test]
    fn coefficient_zero_and_zero_delta_are_unguided() {
        let est = ZeroEps(3);
        let th = [1.0, 2.0, 3.0];
        assert_eq!(guided_eps(&est, &th, 4, &[9.0, 9.0, 9.0], -1.0).unwrap(), vec![0.0; 3]);
        assert_eq!(guided_eps(&est, &th, 4, &[0.0; 3], 0.5).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn single_step_from_step_one_is_rescaling() {
        let s = NoiseSchedule::new(5, 0.1, 0.2, ScheduleKind::Linear).unwrap();
        let x = [0.4, -1.0];
        let y = guided_denoise(&ZeroEps(2), &x, &[3.0, 3.0], -1.0, 1, 1, &s, &mut seeded(0)).unwrap();
        let c = 1.0 / libm::sqrt(s.alpha(1));
        assert_eq!(y, vec![0.4 * c, -1.0 * c]);
    }

    #[test]
    fn validation() {
        let s = NoiseSchedule::rescaled_linear(20).unwrap();
        let ok = GuidanceConfig::default();
        assert!(ok.validate(&s).is_ok());
        let too_many = GuidanceConfig {
            denoise_steps: 21,
            ..ok
        };
        assert!(too_many.validate(&s).is_err());
        let bad_start = GuidanceConfig {
            start_step: Some(5),
            ..ok
        };
        assert!(bad_start.validate(&s).is_err());
    }
}
