//! Parameter inversion.
//!
//! A vector θ_0 is pushed through the stepwise forward chain and every step's
//! noise is recovered as `ε̃_t = (θ_t − √(1−β_t)·θ_{t−1}) / √β_t`. The pair
//! `(θ_T, ε̃_T..ε̃_1)` is the latent code. Running the forward algebra
//! backwards reconstructs θ_0; replacing the forward inverse with the learned
//! reverse mean and injecting the recorded noises generates a new vector that
//! keeps the source's idiosyncrasies.

use alloc::vec::Vec;

use rand::Rng;

use crate::diffusion::{forward_step, posterior_mean};
use crate::error::{Error, Result};
use crate::estimator::EpsModel;
use crate::rng;
use crate::schedule::NoiseSchedule;
use crate::tensor::{all_finite, check_len, Tensor};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LatentCode {
    pub theta_t: Vec<f64>,
    /// `eps_tilde[0]` is ε̃_T, `eps_tilde[T-1]` is ε̃_1.
    pub eps_tilde: Vec<Vec<f64>>,
    pub schedule_id: u64,
}

impl LatentCode {
    pub fn dim(&self) -> usize {
        self.theta_t.len()
    }

    pub fn steps(&self) -> usize {
        self.eps_tilde.len()
    }

    /// ε̃_t for `t ∈ 1..=T`.
    pub fn eps(&self, t: usize) -> &[f64] {
        &self.eps_tilde[self.steps() - t]
    }

    fn check(&self, s: &NoiseSchedule) -> Result<()> {
        if self.schedule_id != s.id() || self.steps() != s.steps() {
            return Err(Error::ScheduleMismatch);
        }
        for e in &self.eps_tilde {
            check_len("latent code", e.len(), self.dim())?;
        }
        Ok(())
    }
}

/// Runs the stochastic forward chain from `theta0` and records the noise of
/// every step.
pub fn extract_latent<R: Rng + ?Sized>(theta0: &[f64], s: &NoiseSchedule, rng: &mut R) -> Result<LatentCode> {
    if !all_finite(theta0) {
        return Err(Error::InvalidArgument("latent extraction needs a finite vector".into()));
    }
    let mut prev = theta0.to_vec();
    let mut eps = Vec::with_capacity(s.steps());
    for t in 1..=s.steps() {
        let z = rng::normal_vec(rng, theta0.len());
        // (θ_t − √(1−β_t)·θ_{t−1}) / √β_t is z itself; keep it bit-exact.
        let next = forward_step(&prev, t, &z, s)?;
        if !all_finite(&next) {
            return Err(Error::NonFiniteStep { step: t });
        }
        eps.push(z);
        prev = next;
    }
    eps.reverse();
    Ok(LatentCode {
        theta_t: prev,
        eps_tilde: eps,
        schedule_id: s.id(),
    })
}

/// Inverts the forward chain exactly: `θ_{t−1} = (θ_t − √β_t·ε̃_t) / √(1−β_t)`.
pub fn reconstruct(latent: &LatentCode, s: &NoiseSchedule) -> Result<Vec<f64>> {
    latent.check(s)?;
    let mut theta = latent.theta_t.clone();
    for t in (1..=s.steps()).rev() {
        let (a, b) = (libm::sqrt(1.0 - s.beta(t)), libm::sqrt(s.beta(t)));
        for (x, e) in theta.iter_mut().zip(latent.eps(t)) {
            *x = (*x - b * e) / a;
        }
    }
    Ok(theta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum NoiseSign {
    /// `θ̃_{t−1} = μ_φ − σ_t·ε̃_t`
    #[default]
    Minus,
    /// `θ̃_{t−1} = μ_φ + σ_t·ε̃_t`, the ancestral-sampling sign.
    Plus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct InvertOptions {
    pub sign: NoiseSign,
    /// Forces every σ_t to 0: plain mean-only denoising from θ_T.
    pub suppress_sigma: bool,
}

/// Semantic-injection sampling for one latent code.
pub fn invert_generate<M: EpsModel + ?Sized>(
    est: &M,
    latent: &LatentCode,
    s: &NoiseSchedule,
    opts: InvertOptions,
) -> Result<Vec<f64>> {
    let mut out = invert_generate_batch(est, core::slice::from_ref(latent), s, opts)?;
    Ok(out.pop().expect("one latent in, one vector out"))
}

/// Semantic-injection sampling for many latents, one estimator call per step.
pub fn invert_generate_batch<M: EpsModel + ?Sized>(
    est: &M,
    latents: &[LatentCode],
    s: &NoiseSchedule,
    opts: InvertOptions,
) -> Result<Vec<Vec<f64>>> {
    if latents.is_empty() {
        return Ok(Vec::new());
    }
    for l in latents {
        l.check(s)?;
        check_len("invert_generate", l.dim(), est.dim())?;
    }
    let mut xs: Vec<Vec<f64>> = latents.iter().map(|l| l.theta_t.clone()).collect();
    let sign = match opts.sign {
        NoiseSign::Minus => -1.0,
        NoiseSign::Plus => 1.0,
    };
    let ts = alloc::vec![0usize; latents.len()];
    let mut ts = ts;
    for t in (1..=s.steps()).rev() {
        ts.iter_mut().for_each(|x| *x = t);
        let eps = est.predict(&Tensor::from_rows(&xs)?, &ts)?;
        let sigma = if opts.suppress_sigma { 0.0 } else { s.sigma(t) };
        for (i, x) in xs.iter_mut().enumerate() {
            let mut next = posterior_mean(x, eps.row(i), t, s)?;
            if sigma != 0.0 {
                for (v, e) in next.iter_mut().zip(latents[i].eps(t)) {
                    *v += sign * sigma * e;
                }
            }
            if !all_finite(&next) {
                return Err(Error::NonFiniteStep { step: t });
            }
            *x = next;
        }
    }
    Ok(xs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::ZeroEps;
    use crate::rng::seeded;
    use crate::schedule::ScheduleKind;
    use crate::tensor::max_rel_error;
    use alloc::vec;

    #[test]
    fn zero_previous_state_recovers_noise() {
        let s = NoiseSchedule::new(1, 0.3, 0.3, ScheduleKind::Linear).unwrap();
        let mut r = seeded(4);
        let l = extract_latent(&[0.0; 6], &s, &mut r).unwrap();
        let z = rng::normal_vec(&mut seeded(4), 6);
        for (a, b) in l.eps(1).iter().zip(&z) {
            assert!((a - b).abs() <= 1e-15 * b.abs().max(1.0));
        }
    }

    #[test]
    fn round_trip_is_tight() {
        let s = NoiseSchedule::new(1000, 1e-4, 0.02, ScheduleKind::Linear).unwrap();
        let mut r = seeded(11);
        let theta0 = rng::normal_vec(&mut r, 64);
        let l = extract_latent(&theta0, &s, &mut r).unwrap();
        assert_eq!(l.steps(), 1000);
        let back = reconstruct(&l, &s).unwrap();
        assert!(max_rel_error(&back, &theta0, 1e-12) <= 1e-8);

        let l0 = extract_latent(&[0.0; 8], &s, &mut r).unwrap();
        assert!(reconstruct(&l0, &s).unwrap().iter().all(|v| v.abs() <= 1e-10));
    }

    #[test]
    fn zero_noise_latent_has_closed_form() {
        let s = NoiseSchedule::rescaled_linear(50).unwrap();
        let l = LatentCode {
            theta_t: vec![1.0, -3.0],
            eps_tilde: vec![vec![0.0, 0.0]; 50],
            schedule_id: s.id(),
        };
        let got = reconstruct(&l, &s).unwrap();
        let c = libm::sqrt(s.alpha_bar(50));
        assert!(max_rel_error(&got, &[1.0 / c, -3.0 / c], 0.0) <= 1e-12);
    }

    #[test]
    fn schedule_mismatch_is_rejected() {
        let a = NoiseSchedule::rescaled_linear(20).unwrap();
        let b = NoiseSchedule::new(20, 1e-4, 0.02, ScheduleKind::Linear).unwrap();
        let l = extract_latent(&[1.0], &a, &mut seeded(0)).unwrap();
        assert_eq!(reconstruct(&l, &b), Err(Error::ScheduleMismatch));
        assert_eq!(
            invert_generate(&ZeroEps(1), &l, &b, InvertOptions::default()),
            Err(Error::ScheduleMismatch)
        );
    }

    #[test]
    fn suppressed_sigma_ignores_noises() {
        let s = NoiseSchedule::rescaled_linear(10).unwrap();
        let mut l = extract_latent(&[0.5, 1.5], &s, &mut seeded(1)).unwrap();
        let opts = InvertOptions {
            suppress_sigma: true,
            ..Default::default()
        };
        let a = invert_generate(&ZeroEps(2), &l, &s, opts).unwrap();
        l.eps_tilde.iter_mut().for_each(|e| e.iter_mut().for_each(|v| *v = 7.0));
        let b = invert_generate(&ZeroEps(2), &l, &s, opts).unwrap();
        assert_eq!(a, b);
    }
}
