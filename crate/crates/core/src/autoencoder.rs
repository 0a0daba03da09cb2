//! Optional latent stage: an autoencoder that compresses parameter vectors so
//! the diffusion model can work in a smaller space.
//!
//! The `Conv` variant sums a linear path and a 1-D convolutional path in both
//! the encoder and the decoder. Each convolutional path has three stride-2
//! blocks with SiLU activations; the decoder mirrors them with nearest
//! upsampling. Inputs are zero-padded to a multiple of 8.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::codec::Layout;
use crate::diffusion::{DIVERGENCE_FACTOR, DIVERGENCE_PATIENCE};
use crate::error::{Error, Result};
use crate::optim::{Optimizer, OptimizerKind};
use crate::record::{value_and_grad, NodeId, Record};
use crate::rng;
use crate::tensor::{check_len, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum AutoencoderKind {
    Linear,
    Conv,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AutoencoderConfig {
    pub kind: AutoencoderKind,
    pub latent_dim: usize,
    /// Conv-path channel count.
    pub channels: usize,
    pub augment_sigma_input: f64,
    pub augment_sigma_latent: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    /// Linear kind with `latent_dim == dim` only: start from the identity map.
    pub identity_init: bool,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            kind: AutoencoderKind::Conv,
            latent_dim: 256,
            channels: 8,
            augment_sigma_input: 1e-3,
            augment_sigma_latent: 1e-3,
            steps: 500,
            batch_size: 32,
            lr: 1e-3,
            optimizer: OptimizerKind::adam(),
            identity_init: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Autoencoder {
    kind: AutoencoderKind,
    dim: usize,
    latent_dim: usize,
    channels: usize,
    layout: Layout,
    pub params: Vec<f64>,
    pub augment_sigma_input: f64,
    pub augment_sigma_latent: f64,
}

fn padded(dim: usize) -> usize {
    dim.div_ceil(8) * 8
}

impl Autoencoder {
    pub fn new<R: Rng + ?Sized>(dim: usize, cfg: &AutoencoderConfig, rng: &mut R) -> Result<Self> {
        if cfg.latent_dim == 0 || cfg.latent_dim > dim {
            return Err(Error::InvalidArgument(format!(
                "latent_dim must be in 1..={dim}, got {}",
                cfg.latent_dim
            )));
        }
        if cfg.kind == AutoencoderKind::Conv && cfg.channels == 0 {
            return Err(Error::InvalidArgument("conv autoencoder needs channels".into()));
        }
        let layout = Self::layout_for(cfg.kind, dim, cfg.latent_dim, cfg.channels)?;
        let mut params = Vec::with_capacity(layout.total());
        for l in layout.layers() {
            if l.name.ends_with(".bias") {
                params.extend(core::iter::repeat_n(0.0, l.len));
            } else {
                let fan_in: usize = l.shape[1..].iter().product();
                let bound = 1.0 / libm::sqrt(fan_in as f64);
                params.extend((0..l.len).map(|_| rng.random_range(-bound..bound)));
            }
        }
        let mut ae = Self {
            kind: cfg.kind,
            dim,
            latent_dim: cfg.latent_dim,
            channels: cfg.channels,
            layout,
            params,
            augment_sigma_input: cfg.augment_sigma_input,
            augment_sigma_latent: cfg.augment_sigma_latent,
        };
        if cfg.identity_init {
            if cfg.kind != AutoencoderKind::Linear || cfg.latent_dim != dim {
                return Err(Error::InvalidArgument(
                    "identity init needs a linear autoencoder with latent_dim == dim".into(),
                ));
            }
            for name in ["enc.weight", "dec.weight"] {
                let off = ae.layout.offset_of(name)?;
                let w = &mut ae.params[off..off + dim * dim];
                w.iter_mut().for_each(|v| *v = 0.0);
                for i in 0..dim {
                    w[i * dim + i] = 1.0;
                }
            }
        }
        Ok(ae)
    }

    pub fn from_parts(
        kind: AutoencoderKind,
        dim: usize,
        latent_dim: usize,
        channels: usize,
        params: Vec<f64>,
    ) -> Result<Self> {
        let layout = Self::layout_for(kind, dim, latent_dim, channels)?;
        check_len("autoencoder parameters", params.len(), layout.total())?;
        Ok(Self {
            kind,
            dim,
            latent_dim,
            channels,
            layout,
            params,
            augment_sigma_input: 0.0,
            augment_sigma_latent: 0.0,
        })
    }

    fn layout_for(kind: AutoencoderKind, dim: usize, latent: usize, c: usize) -> Result<Layout> {
        let mut e: Vec<(String, Vec<usize>)> = vec![
            ("enc.weight".into(), vec![latent, dim]),
            ("enc.bias".into(), vec![latent]),
            ("dec.weight".into(), vec![dim, latent]),
            ("dec.bias".into(), vec![dim]),
        ];
        if kind == AutoencoderKind::Conv {
            let short = padded(dim) / 8;
            let mut cin = 1;
            for i in 0..3 {
                e.push((format!("enc.conv{i}.weight"), vec![c, cin, 3]));
                e.push((format!("enc.conv{i}.bias"), vec![c]));
                cin = c;
            }
            e.push(("enc.proj.weight".into(), vec![latent, c * short]));
            e.push(("dec.proj.weight".into(), vec![c * short, latent]));
            e.push(("dec.proj.bias".into(), vec![c * short]));
            for i in 0..3 {
                let cout = if i == 2 { 1 } else { c };
                e.push((format!("dec.conv{i}.weight"), vec![cout, c, 3]));
                e.push((format!("dec.conv{i}.bias"), vec![cout]));
            }
        }
        Layout::new(e)
    }

    pub fn kind(&self) -> AutoencoderKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    fn p(&self, rec: &mut Record, params: &[f64], name: &str) -> Result<NodeId> {
        let l = self
            .layout
            .get(name)
            .ok_or_else(|| Error::UnknownLayer(name.into()))?;
        rec.param(params, l.offset, l.shape.clone())
    }

    fn pad_rows(&self, x: &Tensor) -> Result<Tensor> {
        let n = x.shape()[0];
        let len = padded(self.dim);
        let mut d = Vec::with_capacity(n * len);
        for row in x.rows() {
            d.extend_from_slice(row);
            d.extend(core::iter::repeat_n(0.0, len - self.dim));
        }
        Tensor::new(vec![n, 1, len], d)
    }

    fn encoder(&self, rec: &mut Record, params: &[f64], x: &Tensor) -> Result<NodeId> {
        let n = x.shape()[0];
        let xin = rec.input(x.clone());
        let (w, b) = (self.p(rec, params, "enc.weight")?, self.p(rec, params, "enc.bias")?);
        let lin = rec.affine(xin, w, Some(b))?;
        if self.kind == AutoencoderKind::Linear {
            return Ok(lin);
        }
        let mut h = rec.input(self.pad_rows(x)?);
        for i in 0..3 {
            let w = self.p(rec, params, &format!("enc.conv{i}.weight"))?;
            let b = self.p(rec, params, &format!("enc.conv{i}.bias"))?;
            h = rec.conv1d(h, w, Some(b), 2, 1)?;
            h = rec.silu(h);
        }
        let flat = self.channels * padded(self.dim) / 8;
        h = rec.reshape(h, vec![n, flat])?;
        let pw = self.p(rec, params, "enc.proj.weight")?;
        let conv = rec.affine(h, pw, None)?;
        rec.add(lin, conv)
    }

    /// Returns the reconstruction, `[N, padded]` for the conv kind and
    /// `[N, dim]` for the linear kind.
    fn decoder(&self, rec: &mut Record, params: &[f64], z: NodeId, n: usize) -> Result<NodeId> {
        let (w, b) = (self.p(rec, params, "dec.weight")?, self.p(rec, params, "dec.bias")?);
        let lin = rec.affine(z, w, Some(b))?;
        if self.kind == AutoencoderKind::Linear {
            return Ok(lin);
        }
        let short = padded(self.dim) / 8;
        let (pw, pb) = (self.p(rec, params, "dec.proj.weight")?, self.p(rec, params, "dec.proj.bias")?);
        let mut h = rec.affine(z, pw, Some(pb))?;
        h = rec.reshape(h, vec![n, self.channels, short])?;
        for i in 0..3 {
            h = rec.upsample1d(h)?;
            let w = self.p(rec, params, &format!("dec.conv{i}.weight"))?;
            let b = self.p(rec, params, &format!("dec.conv{i}.bias"))?;
            h = rec.conv1d(h, w, Some(b), 1, 1)?;
            if i < 2 {
                h = rec.silu(h);
            }
        }
        let conv = rec.reshape(h, vec![n, padded(self.dim)])?;
        if padded(self.dim) == self.dim {
            return rec.add(lin, conv);
        }
        // zero-pad the linear path with a fixed embedding matrix
        let len = padded(self.dim);
        let mut embed = vec![0.0; len * self.dim];
        for i in 0..self.dim {
            embed[i * self.dim + i] = 1.0;
        }
        let p = rec.input(Tensor::new(vec![len, self.dim], embed)?);
        let wide = rec.affine(lin, p, None)?;
        rec.add(wide, conv)
    }

    fn recon_len(&self) -> usize {
        match self.kind {
            AutoencoderKind::Linear => self.dim,
            AutoencoderKind::Conv => padded(self.dim),
        }
    }

    fn check_batch(&self, x: &Tensor) -> Result<()> {
        if x.rank() != 2 || x.shape()[1] != self.dim {
            return Err(Error::shape(
                "autoencoder input",
                format!("expected [N, {}], got {:?}", self.dim, x.shape()),
            ));
        }
        Ok(())
    }

    pub fn encode_batch(&self, x: &Tensor) -> Result<Tensor> {
        self.check_batch(x)?;
        let mut rec = Record::new();
        let z = self.encoder(&mut rec, &self.params, x)?;
        Ok(rec.value(z).clone())
    }

    pub fn decode_batch(&self, z: &Tensor) -> Result<Tensor> {
        if z.rank() != 2 || z.shape()[1] != self.latent_dim {
            return Err(Error::shape(
                "autoencoder latent",
                format!("expected [N, {}], got {:?}", self.latent_dim, z.shape()),
            ));
        }
        let n = z.shape()[0];
        let mut rec = Record::new();
        let zin = rec.input(z.clone());
        let out = self.decoder(&mut rec, &self.params, zin, n)?;
        let v = rec.value(out);
        if self.recon_len() == self.dim {
            return Ok(v.clone());
        }
        let mut d = Vec::with_capacity(n * self.dim);
        for row in v.rows() {
            d.extend_from_slice(&row[..self.dim]);
        }
        Tensor::new(vec![n, self.dim], d)
    }

    /// Deterministic encoding.
    pub fn encode(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_len("autoencoder input", v.len(), self.dim)?;
        Ok(self.encode_batch(&Tensor::new(vec![1, self.dim], v.to_vec())?)?.into_data())
    }

    /// Encoding plus Gaussian latent noise of `augment_sigma_latent`.
    pub fn encode_augmented<R: Rng + ?Sized>(&self, v: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        let mut z = self.encode(v)?;
        for x in z.iter_mut() {
            *x += self.augment_sigma_latent * rng::normal(rng);
        }
        Ok(z)
    }

    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        check_len("autoencoder latent", z.len(), self.latent_dim)?;
        Ok(self
            .decode_batch(&Tensor::new(vec![1, self.latent_dim], z.to_vec())?)?
            .into_data())
    }

    /// Records the augmented reconstruction loss: batch mean of the
    /// per-vector mean squared error.
    fn loss<R: Rng + ?Sized>(
        &self,
        rec: &mut Record,
        params: &[f64],
        x: &Tensor,
        rng: &mut R,
    ) -> Result<NodeId> {
        let n = x.shape()[0];
        let mut noisy = x.clone();
        if self.augment_sigma_input > 0.0 {
            for v in noisy.data_mut() {
                *v += self.augment_sigma_input * rng::normal(rng);
            }
        }
        let mut z = self.encoder(rec, params, &noisy)?;
        if self.augment_sigma_latent > 0.0 {
            let nz = rng::normal_vec(rng, n * self.latent_dim)
                .into_iter()
                .map(|v| v * self.augment_sigma_latent)
                .collect();
            let nz = rec.input(Tensor::new(vec![n, self.latent_dim], nz)?);
            z = rec.add(z, nz)?;
        }
        let out = self.decoder(rec, params, z, n)?;
        let target = if self.recon_len() == self.dim {
            x.clone()
        } else {
            self.pad_rows(x)?.reshaped(vec![n, self.recon_len()])?
        };
        let t = rec.input(target);
        let diff = rec.sub(out, t)?;
        let sq = rec.mul(diff, diff)?;
        let total = rec.sum(sq)?;
        Ok(rec.scale(total, 1.0 / (n * self.dim) as f64))
    }
}

/// Trains a fresh autoencoder; returns it with the per-step loss trace.
pub fn train_autoencoder<V: AsRef<[f64]>, R: Rng + ?Sized>(
    vectors: &[V],
    cfg: &AutoencoderConfig,
    rng: &mut R,
) -> Result<(Autoencoder, Vec<f64>)> {
    let dim = vectors
        .first()
        .map(|v| v.as_ref().len())
        .ok_or(Error::Empty("autoencoder training set"))?;
    let mut ae = Autoencoder::new(dim, cfg, rng)?;
    let trace = continue_training(&mut ae, vectors, cfg, cfg.steps, rng)?;
    Ok((ae, trace))
}

/// Further optimizer steps on an existing autoencoder (fresh optimizer state).
pub fn continue_training<V: AsRef<[f64]>, R: Rng + ?Sized>(
    ae: &mut Autoencoder,
    vectors: &[V],
    cfg: &AutoencoderConfig,
    steps: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if vectors.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "autoencoder training needs at least 2 vectors, got {}",
            vectors.len()
        )));
    }
    for v in vectors {
        check_len("autoencoder training vector", v.as_ref().len(), ae.dim)?;
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("autoencoder batch size must be positive".into()));
    }
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, ae.params.len());
    let mut trace = Vec::with_capacity(steps);
    let mut initial = None;
    let mut above = 0;
    for step in 1..=steps {
        let rows: Vec<&[f64]> = (0..cfg.batch_size)
            .map(|_| vectors[rng.random_range(0..vectors.len())].as_ref())
            .collect();
        let x = Tensor::from_rows(&rows)?;
        let model = &*ae;
        let (loss, grads) = value_and_grad(&model.params, |rec, p| model.loss(rec, p, &x, rng))?;
        opt.step(&mut ae.params, &grads)?;
        let init = *initial.get_or_insert(loss);
        if loss > DIVERGENCE_FACTOR * init {
            above += 1;
            if above >= DIVERGENCE_PATIENCE {
                return Err(Error::Diverged {
                    step,
                    loss,
                    initial: init,
                });
            }
        } else {
            above = 0;
        }
        trace.push(loss);
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::tensor::{norm2, sub};

    #[test]
    fn identity_linear_reconstructs_immediately() {
        let cfg = AutoencoderConfig {
            kind: AutoencoderKind::Linear,
            latent_dim: 5,
            identity_init: true,
            augment_sigma_input: 0.0,
            augment_sigma_latent: 0.0,
            steps: 3,
            ..Default::default()
        };
        let mut r = seeded(2);
        let vs: Vec<Vec<f64>> = (0..8).map(|_| rng::normal_vec(&mut r, 5)).collect();
        let (ae, trace) = train_autoencoder(&vs, &cfg, &mut r).unwrap();
        assert!(trace[0] < 1e-20);
        let back = ae.decode(&ae.encode(&vs[0]).unwrap()).unwrap();
        assert!(norm2(&sub(&back, &vs[0])) < 1e-6);
    }

    #[test]
    fn conv_shapes_round_trip() {
        let cfg = AutoencoderConfig {
            latent_dim: 4,
            channels: 2,
            ..Default::default()
        };
        let ae = Autoencoder::new(21, &cfg, &mut seeded(0)).unwrap();
        let z = ae.encode(&[0.5; 21]).unwrap();
        assert_eq!(z.len(), 4);
        assert_eq!(ae.decode(&z).unwrap().len(), 21);
        assert!(ae.encode(&[0.5; 20]).is_err());
    }

    #[test]
    fn augmentation_is_stream_dependent() {
        let cfg = AutoencoderConfig {
            kind: AutoencoderKind::Linear,
            latent_dim: 3,
            ..Default::default()
        };
        let ae = Autoencoder::new(6, &cfg, &mut seeded(0)).unwrap();
        let v = [1.0; 6];
        assert_eq!(ae.encode(&v).unwrap(), ae.encode(&v).unwrap());
        let a = ae.encode_augmented(&v, &mut seeded(1)).unwrap();
        let b = ae.encode_augmented(&v, &mut seeded(2)).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn rejects_oversized_latent() {
        let cfg = AutoencoderConfig {
            latent_dim: 9,
            ..Default::default()
        };
        assert!(Autoencoder::new(8, &cfg, &mut seeded(0)).is_err());
    }
}
