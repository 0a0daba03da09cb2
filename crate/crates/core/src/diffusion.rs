//! Forward diffusion, the noise-prediction objective, ancestral sampling and
//! estimator training.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::estimator::{EpsModel, EstimatorArch, NoiseEstimator};
use crate::optim::{Optimizer, OptimizerKind};
use crate::record::Record;
use crate::rng;
use crate::schedule::NoiseSchedule;
use crate::tensor::{check_len, Tensor};

/// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε`
pub fn forward_marginal(x0: &[f64], t: usize, eps: &[f64], s: &NoiseSchedule) -> Result<Vec<f64>> {
    s.check_step(t)?;
    check_len("forward_marginal", eps.len(), x0.len())?;
    let (a, b) = (libm::sqrt(s.alpha_bar(t)), libm::sqrt(1.0 - s.alpha_bar(t)));
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

/// `x_t = √(1−β_t)·x_{t−1} + √β_t·z`
pub fn forward_step(x_prev: &[f64], t: usize, z: &[f64], s: &NoiseSchedule) -> Result<Vec<f64>> {
    s.check_step(t)?;
    check_len("forward_step", z.len(), x_prev.len())?;
    let (a, b) = (libm::sqrt(1.0 - s.beta(t)), libm::sqrt(s.beta(t)));
    Ok(x_prev.iter().zip(z).map(|(x, z)| a * x + b * z).collect())
}

/// Reverse-chain mean `μ(x_t, t) = (x_t − β_t/√(1−ᾱ_t)·ε) / √α_t`.
pub fn posterior_mean(x_t: &[f64], eps: &[f64], t: usize, s: &NoiseSchedule) -> Result<Vec<f64>> {
    s.check_step(t)?;
    check_len("posterior_mean", eps.len(), x_t.len())?;
    let c = s.beta(t) / libm::sqrt(1.0 - s.alpha_bar(t));
    let inv = 1.0 / libm::sqrt(s.alpha(t));
    Ok(x_t.iter().zip(eps).map(|(x, e)| inv * (x - c * e)).collect())
}

/// Evaluates the estimator on a single vector at step `t`.
pub fn predict_one<M: EpsModel + ?Sized>(est: &M, x: &[f64], t: usize) -> Result<Vec<f64>> {
    check_len("estimator input", x.len(), est.dim())?;
    let xs = Tensor::new(vec![1, x.len()], x.to_vec())?;
    Ok(est.predict(&xs, &[t])?.into_data())
}

/// One ancestral step `x_{t−1} = μ_φ(x_t, t) + σ_t·z`.
pub fn reverse_step<M: EpsModel + ?Sized>(
    est: &M,
    x_t: &[f64],
    t: usize,
    z: &[f64],
    s: &NoiseSchedule,
) -> Result<Vec<f64>> {
    s.check_step(t)?;
    check_len("reverse_step", z.len(), x_t.len())?;
    let eps = predict_one(est, x_t, t)?;
    let mut out = posterior_mean(x_t, &eps, t, s)?;
    let sigma = s.sigma(t);
    for (o, z) in out.iter_mut().zip(z) {
        *o += sigma * z;
    }
    Ok(out)
}

/// Draws `n` chains from `N(0, I)` at step T and denoises them to step 0,
/// evaluating all chains as one batch per step.
pub fn sample<M: EpsModel + ?Sized, R: Rng + ?Sized>(
    est: &M,
    s: &NoiseSchedule,
    rng: &mut R,
    n: usize,
) -> Result<Vec<Vec<f64>>> {
    let d = est.dim();
    let mut xs: Vec<Vec<f64>> = (0..n).map(|_| rng::normal_vec(rng, d)).collect();
    for t in (1..=s.steps()).rev() {
        let batch = Tensor::from_rows(&xs)?;
        let eps = est.predict(&batch, &vec![t; n])?;
        for (i, x) in xs.iter_mut().enumerate() {
            let mut next = posterior_mean(x, eps.row(i), t, s)?;
            if t > 1 {
                let sigma = s.sigma(t);
                for v in next.iter_mut() {
                    *v += sigma * rng::normal(rng);
                }
            }
            if !crate::tensor::all_finite(&next) {
                return Err(Error::NonFiniteStep { step: t });
            }
            *x = next;
        }
    }
    Ok(xs)
}

/// `s_φ(x_t, t) = −ε / √(1−ᾱ_t)`
pub fn score_from_eps(eps_out: &[f64], t: usize, s: &NoiseSchedule) -> Result<Vec<f64>> {
    s.check_step(t)?;
    let c = -1.0 / libm::sqrt(1.0 - s.alpha_bar(t));
    Ok(eps_out.iter().map(|e| c * e).collect())
}

/// A noised training batch: `(x_t, t, ε)` per row.
pub struct NoisedBatch {
    pub xt: Tensor,
    pub ts: Vec<usize>,
    pub eps: Tensor,
}

/// Draws `t ~ U{1..T}` and `ε ~ N(0, I)` per row and diffuses the rows.
pub fn noise_batch<V: AsRef<[f64]>, R: Rng + ?Sized>(
    x0: &[V],
    s: &NoiseSchedule,
    rng: &mut R,
) -> Result<NoisedBatch> {
    if x0.is_empty() {
        return Err(Error::Empty("diffusion batch"));
    }
    let d = x0[0].as_ref().len();
    let mut xt = Vec::with_capacity(x0.len() * d);
    let mut eps = Vec::with_capacity(x0.len() * d);
    let mut ts = Vec::with_capacity(x0.len());
    for x in x0 {
        let x = x.as_ref();
        check_len("diffusion batch", x.len(), d)?;
        let t = rng.random_range(1..=s.steps());
        let e = rng::normal_vec(rng, d);
        xt.extend(forward_marginal(x, t, &e, s)?);
        eps.extend(e);
        ts.push(t);
    }
    Ok(NoisedBatch {
        xt: Tensor::new(vec![x0.len(), d], xt)?,
        ts,
        eps: Tensor::new(vec![x0.len(), d], eps)?,
    })
}

/// Monte Carlo estimate of the noise-prediction objective: the batch mean of
/// `‖ε − ε_φ(x_t, t)‖²` with one `(t, ε)` draw per vector.
pub fn ddpm_loss<M: EpsModel + ?Sized, V: AsRef<[f64]>, R: Rng + ?Sized>(
    est: &M,
    batch_x0: &[V],
    s: &NoiseSchedule,
    rng: &mut R,
) -> Result<f64> {
    let b = noise_batch(batch_x0, s, rng)?;
    let pred = est.predict(&b.xt, &b.ts)?;
    let total: f64 = pred
        .data()
        .iter()
        .zip(b.eps.data())
        .map(|(p, e)| (e - p) * (e - p))
        .sum();
    let loss = total / batch_x0.len() as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            op_index: 0,
            op: "ddpm_loss",
        });
    }
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DiffusionTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    /// `None` picks [`EstimatorArch::auto`] from the data dimension.
    pub arch: Option<EstimatorArch>,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 64,
            lr: 1e-4,
            optimizer: OptimizerKind::adam(),
            arch: None,
        }
    }
}

/// Consecutive steps above `10 × initial` loss that abort training.
pub const DIVERGENCE_PATIENCE: usize = 100;
pub const DIVERGENCE_FACTOR: f64 = 10.0;

/// An estimator together with its optimizer state, so training can resume
/// across calls (the server trains a few steps every round).
#[derive(Debug, Clone)]
pub struct DiffusionTrainer {
    pub estimator: NoiseEstimator,
    optimizer: Optimizer,
    cfg: DiffusionTrainConfig,
    initial_loss: Option<f64>,
    above: usize,
    steps_done: usize,
}

impl DiffusionTrainer {
    pub fn new<R: Rng + ?Sized>(dim: usize, cfg: DiffusionTrainConfig, rng: &mut R) -> Result<Self> {
        if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "diffusion training needs batch_size > 0 and lr > 0, got {} and {}",
                cfg.batch_size, cfg.lr
            )));
        }
        let arch = cfg.arch.unwrap_or_else(|| EstimatorArch::auto(dim));
        let estimator = NoiseEstimator::new(arch, dim, rng)?;
        let optimizer = Optimizer::new(cfg.optimizer, cfg.lr, estimator.params.len());
        Ok(Self {
            estimator,
            optimizer,
            cfg,
            initial_loss: None,
            above: 0,
            steps_done: 0,
        })
    }

    pub fn config(&self) -> &DiffusionTrainConfig {
        &self.cfg
    }

    pub fn steps_done(&self) -> usize {
        self.steps_done
    }

    /// Runs `steps` optimizer steps on minibatches drawn with replacement
    /// from `data` and returns the per-step loss trace.
    pub fn train<V: AsRef<[f64]>, R: Rng + ?Sized>(
        &mut self,
        data: &[V],
        s: &NoiseSchedule,
        steps: usize,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        if data.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "diffusion training needs at least 2 vectors, got {}",
                data.len()
            )));
        }
        let d = self.estimator.dim();
        for v in data {
            check_len("diffusion training vector", v.as_ref().len(), d)?;
        }
        let bs = self.cfg.batch_size;
        let mut trace = Vec::with_capacity(steps);
        let mut rows: Vec<&[f64]> = Vec::with_capacity(bs);
        for _ in 0..steps {
            rows.clear();
            for _ in 0..bs {
                rows.push(data[rng.random_range(0..data.len())].as_ref());
            }
            let b = noise_batch(&rows, s, rng)?;
            let est = &self.estimator;
            let (loss, grads) = crate::record::value_and_grad(&est.params, |rec: &mut Record, p| {
                est.loss(rec, p, &b.xt, &b.ts, &b.eps)
            })?;
            self.optimizer.step(&mut self.estimator.params, &grads)?;
            self.steps_done += 1;
            let initial = *self.initial_loss.get_or_insert(loss);
            if loss > DIVERGENCE_FACTOR * initial {
                self.above += 1;
                if self.above >= DIVERGENCE_PATIENCE {
                    return Err(Error::Diverged {
                        step: self.steps_done,
                        loss,
                        initial,
                    });
                }
            } else {
                self.above = 0;
            }
            trace.push(loss);
        }
        Ok(trace)
    }
}

/// Trains a fresh estimator for `cfg.steps` steps; returns it with its loss trace.
pub fn train_diffusion<V: AsRef<[f64]>, R: Rng + ?Sized>(
    dataset: &[V],
    cfg: &DiffusionTrainConfig,
    s: &NoiseSchedule,
    rng: &mut R,
) -> Result<(NoiseEstimator, Vec<f64>)> {
    let dim = dataset
        .first()
        .map(|v| v.as_ref().len())
        .ok_or(Error::Empty("diffusion dataset"))?;
    let mut trainer = DiffusionTrainer::new(dim, *cfg, rng)?;
    let trace = trainer.train(dataset, s, cfg.steps, rng)?;
    Ok((trainer.estimator, trace))
}

/// Test double that always predicts zero noise.
#[derive(Debug, Clone, Copy)]
pub struct ZeroEps(pub usize);

impl EpsModel for ZeroEps {
    fn dim(&self) -> usize {
        self.0
    }

    fn predict(&self, xs: &Tensor, _ts: &[usize]) -> Result<Tensor> {
        Ok(Tensor::zeros(xs.shape().to_vec()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::schedule::ScheduleKind;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::rescaled_linear(100).unwrap()
    }

    /// Knows the clean vector, so it can solve the marginal for ε exactly.
    struct Oracle<'a> {
        x0: &'a [f64],
        s: &'a NoiseSchedule,
    }

    impl EpsModel for Oracle<'_> {
        fn dim(&self) -> usize {
            self.x0.len()
        }

        fn predict(&self, xs: &Tensor, ts: &[usize]) -> Result<Tensor> {
            let mut out = Vec::new();
            for (row, &t) in xs.rows().zip(ts) {
                let ab = self.s.alpha_bar(t);
                out.extend(
                    row.iter()
                        .zip(self.x0)
                        .map(|(x, x0)| (x - libm::sqrt(ab) * x0) / libm::sqrt(1.0 - ab)),
                );
            }
            Tensor::new(xs.shape().to_vec(), out)
        }
    }

    #[test]
    fn marginal_degenerate_cases() {
        let s = sched();
        let x0 = [1.0, -2.0];
        let e = [0.5, 0.25];
        let a = forward_marginal(&x0, 10, &[0.0, 0.0], &s).unwrap();
        assert_eq!(a, vec![libm::sqrt(s.alpha_bar(10)), -2.0 * libm::sqrt(s.alpha_bar(10))]);
        let b = forward_marginal(&[0.0, 0.0], 10, &e, &s).unwrap();
        let c = libm::sqrt(1.0 - s.alpha_bar(10));
        assert_eq!(b, vec![0.5 * c, 0.25 * c]);
        assert!(forward_marginal(&x0, 0, &e, &s).is_err());
        assert!(forward_marginal(&x0, 101, &e, &s).is_err());
    }

    #[test]
    fn forward_step_small_beta_and_zero_input() {
        let s = NoiseSchedule::new(10, 1e-6, 1e-6, ScheduleKind::Linear).unwrap();
        let x = [3.0, -1.0];
        let y = forward_step(&x, 1, &[0.0, 0.0], &s).unwrap();
        for (a, b) in y.iter().zip(&x) {
            assert!((a - b).abs() <= s.beta(1) * b.abs());
        }
        let z = [0.7, -0.2];
        let y = forward_step(&[0.0, 0.0], 3, &z, &s).unwrap();
        assert_eq!(y, vec![libm::sqrt(s.beta(3)) * 0.7, libm::sqrt(s.beta(3)) * -0.2]);
    }

    #[test]
    fn oracle_estimator_gives_zero_loss() {
        let s = sched();
        let x0 = [0.3, -1.2, 2.0];
        let est = Oracle { x0: &x0, s: &s };
        let loss = ddpm_loss(&est, &[x0; 16], &s, &mut seeded(3)).unwrap();
        assert!(loss < 1e-20, "loss {loss}");
    }

    #[test]
    fn reverse_step_special_cases() {
        let s = sched();
        let x = [1.0, 2.0];
        let zero = ZeroEps(2);
        let y = reverse_step(&zero, &x, 5, &[0.0, 0.0], &s).unwrap();
        let inv = 1.0 / libm::sqrt(s.alpha(5));
        assert_eq!(y, vec![inv, 2.0 * inv]);
        // σ_1 = 0 makes the last step ignore z
        let a = reverse_step(&zero, &x, 1, &[5.0, -5.0], &s).unwrap();
        let b = reverse_step(&zero, &x, 1, &[0.0, 0.0], &s).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn score_matches_analytic_gaussian_score() {
        let s = sched();
        let mut r = seeded(9);
        let x0 = rng::normal_vec(&mut r, 5);
        let eps = rng::normal_vec(&mut r, 5);
        let t = 37;
        let xt = forward_marginal(&x0, t, &eps, &s).unwrap();
        let got = score_from_eps(&eps, t, &s).unwrap();
        let ab = s.alpha_bar(t);
        for i in 0..5 {
            let want = -(xt[i] - libm::sqrt(ab) * x0[i]) / (1.0 - ab);
            assert!((got[i] - want).abs() <= 1e-12 * want.abs().max(1.0));
        }
        assert_eq!(score_from_eps(&[0.0; 3], t, &s).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn training_needs_two_vectors() {
        let cfg = DiffusionTrainConfig {
            steps: 1,
            ..Default::default()
        };
        let err = train_diffusion(&[vec![1.0]], &cfg, &sched(), &mut seeded(0)).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn sample_is_finite_and_shaped() {
        let out = sample(&ZeroEps(3), &sched(), &mut seeded(1), 4).unwrap();
        assert_eq!(out.len(), 4);
        assert!(out.iter().all(|v| v.len() == 3 && crate::tensor::all_finite(v)));
    }
}
