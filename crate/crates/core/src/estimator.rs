//! Trainable noise estimators ε_φ(x_t, t).
//!
//! Two architectures share one interface:
//!
//! - a residual MLP (input projection, `depth` blocks `h + silu(W h + b + temb)`,
//!   output projection) plus a time-gated per-coordinate skip `g(t) ⊙ x`,
//!   used for vectors up to [`UNET_THRESHOLD`] entries;
//! - a 1-D convolutional U-Net (stride-2 downsampling, nearest upsampling,
//!   skip connections, per-block time injection) for longer vectors.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::codec::Layout;
use crate::error::{Error, Result};
use crate::record::{NodeId, Record};
use crate::tensor::Tensor;

/// Vectors longer than this use the U-Net by default.
pub const UNET_THRESHOLD: usize = 4096;
pub const TIME_EMBED_DIM: usize = 64;

/// Anything that predicts the injected noise for a batch of noisy vectors.
pub trait EpsModel {
    fn dim(&self) -> usize;

    /// `xs [N, dim]` at per-row steps `ts` → predicted noise `[N, dim]`.
    fn predict(&self, xs: &Tensor, ts: &[usize]) -> Result<Tensor>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case", tag = "kind"))]
pub enum EstimatorArch {
    Mlp { width: usize, depth: usize },
    Unet1d { base_channels: usize, levels: usize },
}

impl EstimatorArch {
    /// MLP (width 128, 3 hidden blocks) up to [`UNET_THRESHOLD`] dims, a
    /// two-level U-Net with 16 base channels above.
    pub fn auto(dim: usize) -> Self {
        if dim <= UNET_THRESHOLD {
            EstimatorArch::Mlp {
                width: 128,
                depth: 3,
            }
        } else {
            EstimatorArch::Unet1d {
                base_channels: 16,
                levels: 2,
            }
        }
    }
}

/// Sinusoidal embedding of integer steps: `[sin(t·f_i), cos(t·f_i)]` with
/// geometrically spaced frequencies `f_i = 10000^(-i/half)`.
pub fn time_embedding(ts: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| libm::exp(-libm::log(10000.0) * i as f64 / half as f64))
        .collect();
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let t = t as f64;
        data.extend(freqs.iter().map(|f| libm::sin(t * f)));
        data.extend(freqs.iter().map(|f| libm::cos(t * f)));
        data.extend(core::iter::repeat_n(0.0, dim - 2 * half));
    }
    Tensor::new(vec![ts.len(), dim], data).expect("rows of `dim` values")
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseEstimator {
    arch: EstimatorArch,
    dim: usize,
    layout: Layout,
    pub params: Vec<f64>,
}

impl NoiseEstimator {
    pub fn new<R: Rng + ?Sized>(arch: EstimatorArch, dim: usize, rng: &mut R) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("estimator dimension must be positive".into()));
        }
        let layout = Self::layout_for(arch, dim)?;
        let mut params = Vec::with_capacity(layout.total());
        for l in layout.layers() {
            let fan_in: usize = if l.shape.len() > 1 { l.shape[1..].iter().product() } else { 1 };
            let bound = if l.name.ends_with(".bias") { 0.0 } else { 1.0 / libm::sqrt(fan_in as f64) };
            if l.name.ends_with(".gain") {
                params.extend(core::iter::repeat_n(1.0, l.len));
            } else if bound == 0.0 {
                params.extend(core::iter::repeat_n(0.0, l.len));
            } else {
                params.extend((0..l.len).map(|_| rng.random_range(-bound..bound)));
            }
        }
        Ok(Self {
            arch,
            dim,
            layout,
            params,
        })
    }

    pub fn from_parts(arch: EstimatorArch, dim: usize, params: Vec<f64>) -> Result<Self> {
        let layout = Self::layout_for(arch, dim)?;
        if params.len() != layout.total() {
            return Err(Error::Layout(format!(
                "estimator expects {} parameters, got {}",
                layout.total(),
                params.len()
            )));
        }
        Ok(Self {
            arch,
            dim,
            layout,
            params,
        })
    }

    pub fn arch(&self) -> EstimatorArch {
        self.arch
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Internal length: the U-Net pads to a multiple of `2^levels`.
    fn padded(arch: EstimatorArch, dim: usize) -> usize {
        match arch {
            EstimatorArch::Mlp { .. } => dim,
            EstimatorArch::Unet1d { levels, .. } => {
                let m = 1usize << levels;
                dim.div_ceil(m) * m
            }
        }
    }

    fn layout_for(arch: EstimatorArch, dim: usize) -> Result<Layout> {
        let te = TIME_EMBED_DIM;
        let mut e: Vec<(String, Vec<usize>)> = Vec::new();
        match arch {
            EstimatorArch::Mlp { width, depth } => {
                if width == 0 || depth == 0 {
                    return Err(Error::InvalidArgument("MLP width and depth must be positive".into()));
                }
                e.push(("time.weight".into(), vec![width, te]));
                e.push(("time.bias".into(), vec![width]));
                e.push(("in.weight".into(), vec![width, dim]));
                e.push(("in.bias".into(), vec![width]));
                for k in 0..depth {
                    e.push((format!("block{k}.weight"), vec![width, width]));
                    e.push((format!("block{k}.bias"), vec![width]));
                }
                e.push(("out.weight".into(), vec![dim, width]));
                e.push(("out.bias".into(), vec![dim]));
                e.push(("skip.weight".into(), vec![dim, width]));
                e.push(("skip.bias".into(), vec![dim]));
            }
            EstimatorArch::Unet1d { base_channels, levels } => {
                if base_channels == 0 || levels == 0 {
                    return Err(Error::InvalidArgument("U-Net needs channels and levels".into()));
                }
                let ch = |i: usize| base_channels << i;
                e.push(("time.weight".into(), vec![ch(levels), te]));
                e.push(("time.bias".into(), vec![ch(levels)]));
                e.push(("stem.weight".into(), vec![ch(0), 1, 3]));
                e.push(("stem.bias".into(), vec![ch(0)]));
                for i in 0..levels {
                    e.push((format!("down{i}.conv.weight"), vec![ch(i), ch(i), 3]));
                    e.push((format!("down{i}.conv.bias"), vec![ch(i)]));
                    e.push((format!("down{i}.temb.weight"), vec![ch(i), ch(levels)]));
                    e.push((format!("down{i}.pool.weight"), vec![ch(i + 1), ch(i), 3]));
                    e.push((format!("down{i}.pool.bias"), vec![ch(i + 1)]));
                }
                e.push(("mid.conv.weight".into(), vec![ch(levels), ch(levels), 3]));
                e.push(("mid.conv.bias".into(), vec![ch(levels)]));
                e.push(("mid.temb.weight".into(), vec![ch(levels), ch(levels)]));
                for i in (0..levels).rev() {
                    e.push((format!("up{i}.conv.weight"), vec![ch(i), ch(i + 1) + ch(i), 3]));
                    e.push((format!("up{i}.conv.bias"), vec![ch(i)]));
                    e.push((format!("up{i}.temb.weight"), vec![ch(i), ch(levels)]));
                }
                e.push(("head.weight".into(), vec![1, ch(0), 3]));
                e.push(("head.bias".into(), vec![1]));
            }
        }
        Layout::new(e)
    }

    fn p(&self, rec: &mut Record, params: &[f64], name: &str) -> Result<NodeId> {
        let l = self
            .layout
            .get(name)
            .ok_or_else(|| Error::UnknownLayer(name.into()))?;
        rec.param(params, l.offset, l.shape.clone())
    }

    /// Records ε_φ(xs, ts) and returns the prediction node, shaped
    /// `[N, padded_dim]` (equal to `dim` for the MLP).
    pub fn forward(&self, rec: &mut Record, params: &[f64], xs: &Tensor, ts: &[usize]) -> Result<NodeId> {
        let n = ts.len();
        if xs.rank() != 2 || xs.shape()[0] != n || xs.shape()[1] != self.dim {
            return Err(Error::shape(
                "estimator input",
                format!("expected [{}, {}], got {:?}", n, self.dim, xs.shape()),
            ));
        }
        let temb_in = rec.input(time_embedding(ts, TIME_EMBED_DIM));
        let (tw, tb) = (self.p(rec, params, "time.weight")?, self.p(rec, params, "time.bias")?);
        let temb = rec.affine(temb_in, tw, Some(tb))?;
        let temb = rec.silu(temb);
        match self.arch {
            EstimatorArch::Mlp { depth, .. } => {
                let x = rec.input(xs.clone());
                let (iw, ib) = (self.p(rec, params, "in.weight")?, self.p(rec, params, "in.bias")?);
                let mut h = rec.affine(x, iw, Some(ib))?;
                for k in 0..depth {
                    let w = self.p(rec, params, &format!("block{k}.weight"))?;
                    let b = self.p(rec, params, &format!("block{k}.bias"))?;
                    let a = rec.affine(h, w, Some(b))?;
                    let s = rec.add(a, temb)?;
                    let s = rec.silu(s);
                    h = rec.add(h, s)?;
                }
                let (w, b) = (self.p(rec, params, "out.weight")?, self.p(rec, params, "out.bias")?);
                let o = rec.affine(h, w, Some(b))?;
                let (gw, gb) = (self.p(rec, params, "skip.weight")?, self.p(rec, params, "skip.bias")?);
                let g = rec.affine(temb, gw, Some(gb))?;
                let gx = rec.mul(g, x)?;
                rec.add(o, gx)
            }
            EstimatorArch::Unet1d { levels, .. } => {
                let len = Self::padded(self.arch, self.dim);
                let mut padded = Vec::with_capacity(n * len);
                for row in xs.rows() {
                    padded.extend_from_slice(row);
                    padded.extend(core::iter::repeat_n(0.0, len - self.dim));
                }
                let x = rec.input(Tensor::new(vec![n, 1, len], padded)?);
                let (sw, sb) = (self.p(rec, params, "stem.weight")?, self.p(rec, params, "stem.bias")?);
                let mut h = rec.conv1d(x, sw, Some(sb), 1, 1)?;
                let mut skips = Vec::with_capacity(levels);
                let block = |rec: &mut Record, h: NodeId, pre: &str| -> Result<NodeId> {
                    let w = self.p(rec, params, &format!("{pre}.conv.weight"))?;
                    let b = self.p(rec, params, &format!("{pre}.conv.bias"))?;
                    let tp = self.p(rec, params, &format!("{pre}.temb.weight"))?;
                    let c = rec.conv1d(h, w, Some(b), 1, 1)?;
                    let t = rec.affine(temb, tp, None)?;
                    let s = rec.add_channel(c, t)?;
                    Ok(rec.silu(s))
                };
                for i in 0..levels {
                    h = block(rec, h, &format!("down{i}"))?;
                    skips.push(h);
                    let pw = self.p(rec, params, &format!("down{i}.pool.weight"))?;
                    let pb = self.p(rec, params, &format!("down{i}.pool.bias"))?;
                    h = rec.conv1d(h, pw, Some(pb), 2, 1)?;
                }
                h = block(rec, h, "mid")?;
                for i in (0..levels).rev() {
                    h = rec.upsample1d(h)?;
                    h = rec.concat(h, skips[i])?;
                    h = block(rec, h, &format!("up{i}"))?;
                }
                let (hw, hb) = (self.p(rec, params, "head.weight")?, self.p(rec, params, "head.bias")?);
                let out = rec.conv1d(h, hw, Some(hb), 1, 1)?;
                rec.reshape(out, vec![n, len])
            }
        }
    }

    /// Mean over the batch of `‖ε − ε_φ(x_t, t)‖²`.
    pub fn loss(
        &self,
        rec: &mut Record,
        params: &[f64],
        xt: &Tensor,
        ts: &[usize],
        eps: &Tensor,
    ) -> Result<NodeId> {
        let pred = self.forward(rec, params, xt, ts)?;
        let len = Self::padded(self.arch, self.dim);
        let target = if len == self.dim {
            eps.clone()
        } else {
            let mut d = Vec::with_capacity(ts.len() * len);
            for row in eps.rows() {
                d.extend_from_slice(row);
                d.extend(core::iter::repeat_n(0.0, len - self.dim));
            }
            Tensor::new(vec![ts.len(), len], d)?
        };
        let target = rec.input(target);
        let diff = rec.sub(pred, target)?;
        let sq = rec.mul(diff, diff)?;
        let total = rec.sum(sq)?;
        Ok(rec.scale(total, 1.0 / ts.len() as f64))
    }
}

impl EpsModel for NoiseEstimator {
    fn dim(&self) -> usize {
        self.dim
    }

    fn predict(&self, xs: &Tensor, ts: &[usize]) -> Result<Tensor> {
        let mut rec = Record::new();
        let out = self.forward(&mut rec, &self.params, xs, ts)?;
        let v = rec.value(out);
        let len = Self::padded(self.arch, self.dim);
        if len == self.dim {
            return Ok(v.clone());
        }
        let mut d = Vec::with_capacity(ts.len() * self.dim);
        for row in v.rows() {
            d.extend_from_slice(&row[..self.dim]);
        }
        Tensor::new(vec![ts.len(), self.dim], d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn output_shape_matches_input_for_every_step() {
        for (arch, dim) in [
            (EstimatorArch::Mlp { width: 16, depth: 2 }, 7),
            (EstimatorArch::Unet1d { base_channels: 4, levels: 2 }, 10),
        ] {
            let est = NoiseEstimator::new(arch, dim, &mut seeded(0)).unwrap();
            for t in [1, 50, 100] {
                let x = Tensor::zeros(vec![3, dim]);
                let y = est.predict(&x, &[t, t, t]).unwrap();
                assert_eq!(y.shape(), &[3, dim]);
                assert!(y.all_finite());
            }
        }
    }

    #[test]
    fn auto_arch_switches_at_threshold() {
        assert!(matches!(EstimatorArch::auto(4096), EstimatorArch::Mlp { .. }));
        assert!(matches!(EstimatorArch::auto(4097), EstimatorArch::Unet1d { .. }));
    }

    #[test]
    fn time_embedding_is_bounded() {
        let e = time_embedding(&[1, 999], TIME_EMBED_DIM);
        assert_eq!(e.shape(), &[2, TIME_EMBED_DIM]);
        assert!(e.data().iter().all(|v| v.abs() <= 1.0));
        assert_ne!(e.row(0), e.row(1));
    }
}
