//! Server-side pieces of the federation: linear aggregation, client sampling,
//! the rolling upload window and the generative aggregator.
//!
//! Round orchestration (warm-up, dispatch, parallel local updates, metrics)
//! is left to the caller; this module is the sequential, deterministic core
//! it drives.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::autoencoder::{self, Autoencoder, AutoencoderConfig};
use crate::codec::{fit_norm, merge_by_mask, split_by_mask, LayerMask, Layout, NormStats, DEFAULT_STD_FLOOR};
use crate::diffusion::{self, DiffusionTrainConfig, DiffusionTrainer};
use crate::error::{Error, Result};
use crate::estimator::NoiseEstimator;
use crate::inversion::{extract_latent, invert_generate_batch, InvertOptions, LatentCode};
use crate::schedule::NoiseSchedule;
use crate::tensor::{all_finite, check_len};

/// `Σ (m_i / N)·θ_i` with `N = Σ m_i`.
pub fn fedavg_aggregate<V: AsRef<[f64]>>(params: &[V], weights: &[f64]) -> Result<Vec<f64>> {
    if params.is_empty() {
        return Err(Error::Empty("fedavg inputs"));
    }
    check_len("fedavg weights", weights.len(), params.len())?;
    if weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
        return Err(Error::InvalidArgument("fedavg weights must be positive".into()));
    }
    let d = params[0].as_ref().len();
    let total: f64 = weights.iter().sum();
    let mut out = alloc::vec![0.0; d];
    for (p, w) in params.iter().zip(weights) {
        let p = p.as_ref();
        check_len("fedavg inputs", p.len(), d)?;
        let c = w / total;
        for (o, x) in out.iter_mut().zip(p) {
            *o += c * x;
        }
    }
    Ok(out)
}

/// `⌈fraction·n⌉` distinct client indices, sorted.
pub fn sample_clients<R: Rng + ?Sized>(rng: &mut R, n: usize, fraction: f64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "participation fraction must be in (0, 1], got {fraction}"
        )));
    }
    // guard against 0.3 * 10 = 3.0000000000000004
    let k = (libm::ceil(fraction * n as f64 - 1e-9) as usize).clamp(1, n.max(1));
    if n == 0 {
        return Ok(Vec::new());
    }
    if k == n {
        return Ok((0..n).collect());
    }
    Ok(crate::rng::choose_distinct(rng, n, k))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Upload {
    pub round: usize,
    pub client: usize,
    /// Generated-layer subvector.
    pub vector: Vec<f64>,
}

/// Uploads from the most recent `window` rounds.
#[derive(Debug, Clone)]
pub struct UploadWindow {
    window: usize,
    entries: VecDeque<Upload>,
}

impl UploadWindow {
    pub fn new(window: usize) -> Result<Self> {
        if window == 0 {
            return Err(Error::InvalidArgument("window must hold at least one round".into()));
        }
        Ok(Self {
            window,
            entries: VecDeque::new(),
        })
    }

    pub fn push(&mut self, upload: Upload) {
        let newest = upload.round;
        self.entries.push_back(upload);
        while let Some(front) = self.entries.front() {
            if front.round + self.window <= newest {
                self.entries.pop_front();
            } else {
                break;
            }
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn rounds(&self) -> Vec<usize> {
        let mut r: Vec<usize> = self.entries.iter().map(|u| u.round).collect();
        r.dedup();
        r
    }

    pub fn uploads(&self) -> impl Iterator<Item = &Upload> {
        self.entries.iter()
    }

    pub fn vectors(&self) -> Vec<&[f64]> {
        self.entries.iter().map(|u| u.vector.as_slice()).collect()
    }
}

/// Maps full client parameter vectors to the space the diffusion model
/// lives in (generated layers, normalized, optionally AE-encoded) and back.
#[derive(Debug, Clone)]
pub struct GenerativeSpace {
    pub layout: Layout,
    pub mask: LayerMask,
    pub norm: NormStats,
    pub ae: Option<Autoencoder>,
}

impl GenerativeSpace {
    pub fn dim(&self) -> usize {
        match &self.ae {
            Some(ae) => ae.latent_dim(),
            None => self.norm.dim(),
        }
    }

    pub fn encode_generated(&self, generated: &[f64]) -> Result<Vec<f64>> {
        let z = self.norm.normalize(generated)?;
        match &self.ae {
            Some(ae) => ae.encode(&z),
            None => Ok(z),
        }
    }

    pub fn decode_generated(&self, z: &[f64]) -> Result<Vec<f64>> {
        let z = match &self.ae {
            Some(ae) => ae.decode(z)?,
            None => z.to_vec(),
        };
        self.norm.denormalize(&z)
    }

    pub fn encode(&self, full: &[f64]) -> Result<Vec<f64>> {
        let (generated, _) = split_by_mask(full, &self.layout, &self.mask)?;
        self.encode_generated(&generated)
    }

    /// Decodes `z` and merges it with the retained layers of `template`.
    pub fn decode(&self, z: &[f64], template: &[f64]) -> Result<Vec<f64>> {
        let generated = self.decode_generated(z)?;
        let (_, retained) = split_by_mask(template, &self.layout, &self.mask)?;
        merge_by_mask(&generated, &retained, &self.layout, &self.mask)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum Aggregator {
    /// Latent extraction followed by semantic-injection sampling.
    #[default]
    Inversion,
    /// A fresh unconditional sample per client.
    Unconditional,
    /// The upload is returned unchanged.
    PassThrough,
}

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub window: usize,
    pub train: DiffusionTrainConfig,
    pub steps_per_round: usize,
    /// Steps of the first training call, when the estimator is created.
    pub bootstrap_steps: usize,
    pub normalize: bool,
    pub std_floor: f64,
    pub autoencoder: Option<AutoencoderConfig>,
    pub ae_steps_per_round: usize,
    pub invert: InvertOptions,
    pub aggregator: Aggregator,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            window: 20,
            train: DiffusionTrainConfig::default(),
            steps_per_round: 200,
            bootstrap_steps: 2000,
            normalize: true,
            std_floor: DEFAULT_STD_FLOOR,
            autoencoder: None,
            ae_steps_per_round: 100,
            invert: InvertOptions::default(),
            aggregator: Aggregator::Inversion,
        }
    }
}

/// Frozen server state used to generate parameters: safe to share across
/// threads while clients are personalized concurrently.
#[derive(Debug, Clone)]
pub struct ServerModel {
    pub schedule: NoiseSchedule,
    pub space: GenerativeSpace,
    pub estimator: NoiseEstimator,
    pub invert: InvertOptions,
    pub aggregator: Aggregator,
}

impl ServerModel {
    /// Latent code of a full parameter vector in the estimator's space.
    pub fn latent<R: Rng + ?Sized>(&self, full: &[f64], rng: &mut R) -> Result<LatentCode> {
        extract_latent(&self.space.encode(full)?, &self.schedule, rng)
    }

    /// Personalized parameters for each upload. `rngs[i]` is used only for
    /// client `i`, so results do not depend on how clients are batched.
    pub fn personalize<V: AsRef<[f64]>, R: Rng>(&self, uploads: &[V], rngs: &mut [R]) -> Result<Vec<Vec<f64>>> {
        check_len("personalize streams", rngs.len(), uploads.len())?;
        let zs: Vec<Vec<f64>> = match self.aggregator {
            Aggregator::PassThrough => return Ok(uploads.iter().map(|u| u.as_ref().to_vec()).collect()),
            Aggregator::Inversion => {
                let latents = uploads
                    .iter()
                    .zip(rngs.iter_mut())
                    .map(|(u, r)| self.latent(u.as_ref(), r))
                    .collect::<Result<Vec<_>>>()?;
                invert_generate_batch(&self.estimator, &latents, &self.schedule, self.invert)?
            }
            Aggregator::Unconditional => {
                let mut out = Vec::with_capacity(uploads.len());
                for r in rngs.iter_mut() {
                    out.extend(diffusion::sample(&self.estimator, &self.schedule, r, 1)?);
                }
                out
            }
        };
        let mut out = Vec::with_capacity(uploads.len());
        for (z, u) in zs.iter().zip(uploads) {
            let full = self.space.decode(z, u.as_ref())?;
            if !all_finite(&full) {
                return Err(Error::NonFinite {
                    op_index: 0,
                    op: "personalize",
                });
            }
            out.push(full);
        }
        Ok(out)
    }
}

/// The evolving server: upload window, normalization, autoencoder and
/// diffusion trainer.
#[derive(Debug, Clone)]
pub struct ServerState {
    pub cfg: ServerConfig,
    pub schedule: NoiseSchedule,
    layout: Layout,
    mask: LayerMask,
    window: UploadWindow,
    norm: Option<NormStats>,
    ae: Option<Autoencoder>,
    trainer: Option<DiffusionTrainer>,
    pub loss_trace: Vec<f64>,
}

impl ServerState {
    pub fn new(cfg: ServerConfig, schedule: NoiseSchedule, layout: Layout, mask: LayerMask) -> Result<Self> {
        if cfg.steps_per_round == 0 && cfg.bootstrap_steps == 0 {
            return Err(Error::InvalidArgument("server needs a diffusion training budget".into()));
        }
        let window = UploadWindow::new(cfg.window)?;
        Ok(Self {
            cfg,
            schedule,
            layout,
            mask,
            window,
            norm: None,
            ae: None,
            trainer: None,
            loss_trace: Vec::new(),
        })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn mask(&self) -> &LayerMask {
        &self.mask
    }

    pub fn window(&self) -> &UploadWindow {
        &self.window
    }

    pub fn norm(&self) -> Option<&NormStats> {
        self.norm.as_ref()
    }

    pub fn autoencoder(&self) -> Option<&Autoencoder> {
        self.ae.as_ref()
    }

    pub fn trainer(&self) -> Option<&DiffusionTrainer> {
        self.trainer.as_ref()
    }

    pub fn is_trained(&self) -> bool {
        self.trainer.is_some()
    }

    /// Stores the generated-layer part of each full upload.
    pub fn record_uploads(&mut self, round: usize, uploads: &[(usize, &[f64])]) -> Result<()> {
        for (client, full) in uploads {
            check_len("upload", full.len(), self.layout.total())?;
            if !all_finite(full) {
                return Err(Error::InvalidArgument(format!("client {client} uploaded non-finite parameters")));
            }
            let (generated, _) = split_by_mask(full, &self.layout, &self.mask)?;
            self.window.push(Upload {
                round,
                client: *client,
                vector: generated,
            });
        }
        Ok(())
    }

    /// Refits normalization (and the autoencoder) on the window, then runs
    /// the round's diffusion training steps. Returns that round's loss trace.
    pub fn train<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<Vec<f64>> {
        let vectors = self.window.vectors();
        if vectors.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "server window holds {} vectors, diffusion training needs at least 2",
                vectors.len()
            )));
        }
        let norm = if self.cfg.normalize {
            fit_norm(&vectors, self.cfg.std_floor)?
        } else {
            NormStats::identity(vectors[0].len())
        };
        let normalized = vectors
            .iter()
            .map(|v| norm.normalize(v))
            .collect::<Result<Vec<_>>>()?;
        self.norm = Some(norm);
        let data = match &self.cfg.autoencoder {
            None => normalized,
            Some(ae_cfg) => {
                match &mut self.ae {
                    None => {
                        self.ae = Some(autoencoder::train_autoencoder(&normalized, ae_cfg, rng)?.0);
                    }
                    Some(ae) => {
                        autoencoder::continue_training(ae, &normalized, ae_cfg, self.cfg.ae_steps_per_round, rng)?;
                    }
                }
                let ae = self.ae.as_ref().expect("trained above");
                normalized.iter().map(|v| ae.encode(v)).collect::<Result<Vec<_>>>()?
            }
        };
        let (trainer, steps) = match &mut self.trainer {
            Some(t) => (t, self.cfg.steps_per_round),
            None => {
                let t = DiffusionTrainer::new(data[0].len(), self.cfg.train, rng)?;
                (self.trainer.insert(t), self.cfg.bootstrap_steps)
            }
        };
        let trace = trainer.train(&data, &self.schedule, steps, rng)?;
        self.loss_trace.extend_from_slice(&trace);
        Ok(trace)
    }

    pub fn snapshot(&self) -> Result<ServerModel> {
        let trainer = self.trainer.as_ref().ok_or(Error::NotTrained)?;
        let norm = self.norm.clone().ok_or(Error::NotTrained)?;
        Ok(ServerModel {
            schedule: self.schedule.clone(),
            space: GenerativeSpace {
                layout: self.layout.clone(),
                mask: self.mask.clone(),
                norm,
                ae: self.ae.clone(),
            },
            estimator: trainer.estimator.clone(),
            invert: self.cfg.invert,
            aggregator: self.cfg.aggregator,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use alloc::vec;

    #[test]
    fn fedavg_examples() {
        assert_eq!(fedavg_aggregate(&[[2.0], [4.0]], &[1.0, 1.0]).unwrap(), vec![3.0]);
        assert_eq!(fedavg_aggregate(&[[0.0], [4.0]], &[1.0, 3.0]).unwrap(), vec![3.0]);
        let same = vec![vec![1.5, -2.0]; 3];
        assert_eq!(fedavg_aggregate(&same, &[2.0, 5.0, 1.0]).unwrap(), vec![1.5, -2.0]);
        assert!(fedavg_aggregate::<Vec<f64>>(&[], &[]).is_err());
        assert!(fedavg_aggregate(&[[1.0]], &[0.0]).is_err());
    }

    #[test]
    fn sampling_counts() {
        let mut r = seeded(1);
        assert_eq!(sample_clients(&mut r, 10, 0.3).unwrap().len(), 3);
        assert_eq!(sample_clients(&mut r, 10, 1.0).unwrap(), (0..10).collect::<Vec<_>>());
        assert_eq!(sample_clients(&mut r, 7, 0.5).unwrap().len(), 4);
        assert!(sample_clients(&mut r, 10, 0.0).is_err());
    }

    #[test]
    fn window_evicts_old_rounds() {
        let mut w = UploadWindow::new(3).unwrap();
        for round in 1..=4 {
            for client in 0..2 {
                w.push(Upload {
                    round,
                    client,
                    vector: vec![round as f64],
                });
            }
        }
        assert_eq!(w.rounds(), vec![2, 3, 4]);
        assert_eq!(w.len(), 6);
    }
}
