//! Binary checkpoint container.
//!
//! A file is a header followed by tagged sections. Everything is little
//! endian. See `docs/checkpoint-format.md` for the byte-level layout.
//!
//! ```text
//! magic   "GENAGGCK"          8 bytes
//! version u32                 currently 1
//! count   u32                 number of sections
//! section { tag [u8; 4], len u64, payload [u8; len] } × count
//! ```
//!
//! Readers skip tags they do not know and reject versions newer than their
//! own.

use std::io::{Read, Write};
use std::path::Path;

use genagg_core::autoencoder::{Autoencoder, AutoencoderKind};
use genagg_core::codec::{Layout, NormStats};
use genagg_core::estimator::{EstimatorArch, NoiseEstimator};
use genagg_core::federated::ServerState;
use genagg_core::inversion::LatentCode;
use genagg_core::schedule::{NoiseSchedule, ScheduleKind};
use serde::{Deserialize, Serialize};

use crate::config::Precision;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"GENAGGCK";
pub const VERSION: u32 = 1;

pub type Tag = [u8; 4];

pub mod tags {
    use super::Tag;

    /// JSON metadata.
    pub const META: Tag = *b"META";
    /// Layout of the values in `VALS`.
    pub const LAYOUT: Tag = *b"LAYT";
    pub const VALUES: Tag = *b"VALS";
    /// Names of the generated layers.
    pub const MASK: Tag = *b"MASK";
    pub const NORM: Tag = *b"NORM";
    pub const SCHEDULE: Tag = *b"SCHD";
    pub const LATENTS: Tag = *b"LATN";
    /// JSON list of the `(round, client)` pairs in the upload window.
    pub const MANIFEST: Tag = *b"MNFT";
    pub const AE_LAYOUT: Tag = *b"ALAY";
    pub const AE_VALUES: Tag = *b"AVAL";
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub sections: Vec<(Tag, Vec<u8>)>,
}

impl Container {
    pub fn push(&mut self, tag: Tag, payload: Vec<u8>) {
        self.sections.push((tag, payload));
    }

    /// First section with `tag`.
    pub fn get(&self, tag: Tag) -> Option<&[u8]> {
        self.sections.iter().find(|(t, _)| *t == tag).map(|(_, p)| p.as_slice())
    }

    pub fn require(&self, tag: Tag) -> Result<&[u8]> {
        self.get(tag)
            .ok_or_else(|| Error::format("container", format!("missing section {}", tag_name(tag))))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for (tag, payload) in &self.sections {
            out.extend_from_slice(tag);
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(payload);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "container");
        if r.take(8)? != MAGIC {
            return Err(Error::format("container", "bad magic"));
        }
        let version = r.u32()?;
        if version > VERSION {
            return Err(Error::VersionAhead {
                found: version,
                supported: VERSION,
            });
        }
        let count = r.u32()?;
        let mut sections = Vec::new();
        for _ in 0..count {
            let tag: Tag = r.take(4)?.try_into().expect("four bytes");
            let len = r.len_u64()?;
            sections.push((tag, r.take(len)?.to_vec()));
        }
        if !r.is_done() {
            return Err(Error::format("container", "trailing bytes after last section"));
        }
        Ok(Self { sections })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn tag_name(tag: Tag) -> String {
    String::from_utf8_lossy(&tag).into_owned()
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], what: &'static str) -> Self {
        Self { buf, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                self.what,
                format!("truncated: need {n} bytes at offset {}", self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }

    /// A u64 length that must fit in the remaining buffer.
    fn len_u64(&mut self) -> Result<usize> {
        let n = self.u64()?;
        if n > (self.buf.len() - self.pos) as u64 {
            return Err(Error::format(self.what, format!("length {n} exceeds remaining bytes")));
        }
        Ok(n as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format(self.what, "invalid UTF-8"))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        if n.checked_mul(8).is_none_or(|b| b > self.buf.len() - self.pos) {
            return Err(Error::format(self.what, format!("{n} values exceed remaining bytes")));
        }
        (0..n).map(|_| self.f64()).collect()
    }

    fn is_done(&self) -> bool {
        self.pos == self.buf.len()
    }

    fn finish(self) -> Result<()> {
        if !self.is_done() {
            return Err(Error::format(self.what, "trailing bytes"));
        }
        Ok(())
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode_layout(layout: &Layout) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(layout.layers().len() as u32).to_le_bytes());
    for l in layout.layers() {
        put_str(&mut out, &l.name);
        out.extend_from_slice(&(l.shape.len() as u32).to_le_bytes());
        for d in &l.shape {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
    }
    out
}

pub fn decode_layout(bytes: &[u8]) -> Result<Layout> {
    let mut r = Reader::new(bytes, "layout section");
    let n = r.u32()?;
    let mut entries = Vec::new();
    for _ in 0..n {
        let name = r.str()?;
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        entries.push((name, shape));
    }
    r.finish()?;
    Ok(Layout::new(entries)?)
}

/// `u8 width (4 | 8), u64 count, values`.
pub fn encode_values(values: &[f64], precision: Precision) -> Vec<u8> {
    let mut out = Vec::with_capacity(9 + values.len() * 8);
    match precision {
        Precision::F32 => {
            out.push(4);
            out.extend_from_slice(&(values.len() as u64).to_le_bytes());
            for v in values {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        Precision::F64 => {
            out.push(8);
            out.extend_from_slice(&(values.len() as u64).to_le_bytes());
            put_f64s(&mut out, values);
        }
    }
    out
}

pub fn decode_values(bytes: &[u8]) -> Result<(Vec<f64>, Precision)> {
    let mut r = Reader::new(bytes, "values section");
    let width = r.u8()?;
    let n = r.u64()? as usize;
    let (vals, p) = match width {
        4 => {
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::format("values section", "count overflow"))?)?;
            let v = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4")) as f64)
                .collect();
            (v, Precision::F32)
        }
        8 => (r.f64s(n)?, Precision::F64),
        w => return Err(Error::format("values section", format!("unsupported width {w}"))),
    };
    r.finish()?;
    Ok((vals, p))
}

pub fn encode_names<S: AsRef<str>>(names: &[S]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(names.len() as u32).to_le_bytes());
    for n in names {
        put_str(&mut out, n.as_ref());
    }
    out
}

pub fn decode_names(bytes: &[u8]) -> Result<Vec<String>> {
    let mut r = Reader::new(bytes, "mask section");
    let n = r.u32()?;
    let names = (0..n).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Ok(names)
}

/// `f64 floor, u64 dim, dim × f64 mean, dim × f64 std`.
pub fn encode_norm(n: &NormStats) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&n.floor.to_le_bytes());
    out.extend_from_slice(&(n.dim() as u64).to_le_bytes());
    put_f64s(&mut out, &n.mean);
    put_f64s(&mut out, &n.std);
    out
}

pub fn decode_norm(bytes: &[u8]) -> Result<NormStats> {
    let mut r = Reader::new(bytes, "norm section");
    let floor = r.f64()?;
    let dim = r.u64()? as usize;
    let mean = r.f64s(dim)?;
    let std = r.f64s(dim)?;
    r.finish()?;
    Ok(NormStats { mean, std, floor })
}

/// `u8 kind, u64 T, f64 beta_start, f64 beta_end, u64 schedule id`.
pub fn encode_schedule(s: &NoiseSchedule) -> Vec<u8> {
    let (b0, b1) = s.beta_range();
    let mut out = vec![s.kind().code()];
    out.extend_from_slice(&(s.steps() as u64).to_le_bytes());
    out.extend_from_slice(&b0.to_le_bytes());
    out.extend_from_slice(&b1.to_le_bytes());
    out.extend_from_slice(&s.id().to_le_bytes());
    out
}

pub fn decode_schedule(bytes: &[u8]) -> Result<NoiseSchedule> {
    let mut r = Reader::new(bytes, "schedule section");
    let kind = ScheduleKind::from_code(r.u8()?).ok_or_else(|| Error::format("schedule section", "unknown kind"))?;
    let steps = r.u64()? as usize;
    let (b0, b1) = (r.f64()?, r.f64()?);
    let id = r.u64()?;
    r.finish()?;
    let s = NoiseSchedule::new(steps, b0, b1, kind)?;
    if s.id() != id {
        return Err(Error::format("schedule section", "schedule id does not match its parameters"));
    }
    Ok(s)
}

/// `u64 count`, then per code `u64 dim, u64 T, u64 schedule id, θ_T, ε̃_T..ε̃_1`.
pub fn encode_latents(codes: &[LatentCode]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(codes.len() as u64).to_le_bytes());
    for c in codes {
        out.extend_from_slice(&(c.dim() as u64).to_le_bytes());
        out.extend_from_slice(&(c.steps() as u64).to_le_bytes());
        out.extend_from_slice(&c.schedule_id.to_le_bytes());
        put_f64s(&mut out, &c.theta_t);
        for e in &c.eps_tilde {
            put_f64s(&mut out, e);
        }
    }
    out
}

pub fn decode_latents(bytes: &[u8]) -> Result<Vec<LatentCode>> {
    let mut r = Reader::new(bytes, "latent section");
    let n = r.u64()?;
    let mut out = Vec::new();
    for _ in 0..n {
        let dim = r.u64()? as usize;
        let steps = r.u64()? as usize;
        let schedule_id = r.u64()?;
        let theta_t = r.f64s(dim)?;
        let eps_tilde = (0..steps).map(|_| r.f64s(dim)).collect::<Result<Vec<_>>>()?;
        out.push(LatentCode {
            theta_t,
            eps_tilde,
            schedule_id,
        });
    }
    r.finish()?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AeMeta {
    pub kind: AutoencoderKind,
    pub dim: usize,
    pub latent_dim: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: String,
    pub round: usize,
    pub seed: u64,
    pub estimator_arch: EstimatorArch,
    pub estimator_dim: usize,
    pub diffusion_steps_trained: usize,
    pub autoencoder: Option<AeMeta>,
}

/// Everything needed to rebuild the server's generative model.
#[derive(Debug, Clone)]
pub struct ServerCheckpoint {
    pub meta: CheckpointMeta,
    pub schedule: NoiseSchedule,
    pub estimator: NoiseEstimator,
    pub mask: Vec<String>,
    pub norm: NormStats,
    pub ae: Option<Autoencoder>,
    pub window: Vec<(usize, usize)>,
    pub latents: Vec<LatentCode>,
}

impl ServerCheckpoint {
    pub fn from_server(server: &ServerState, round: usize, seed: u64) -> Result<Self> {
        let trainer = server.trainer().ok_or(genagg_core::Error::NotTrained)?;
        let norm = server.norm().cloned().ok_or(genagg_core::Error::NotTrained)?;
        let est = trainer.estimator.clone();
        let ae = server.autoencoder().cloned();
        Ok(Self {
            meta: CheckpointMeta {
                kind: "server".into(),
                round,
                seed,
                estimator_arch: est.arch(),
                estimator_dim: genagg_core::estimator::EpsModel::dim(&est),
                diffusion_steps_trained: trainer.steps_done(),
                autoencoder: ae.as_ref().map(|a| AeMeta {
                    kind: a.kind(),
                    dim: a.dim(),
                    latent_dim: a.latent_dim(),
                    channels: a.channels(),
                }),
            },
            schedule: server.schedule.clone(),
            estimator: est,
            mask: server.mask().names().map(String::from).collect(),
            norm,
            ae,
            window: server.window().uploads().map(|u| (u.round, u.client)).collect(),
            latents: Vec::new(),
        })
    }

    pub fn to_container(&self, precision: Precision) -> Container {
        let mut c = Container::default();
        c.push(tags::META, serde_json::to_vec(&self.meta).expect("meta serializes"));
        c.push(tags::SCHEDULE, encode_schedule(&self.schedule));
        c.push(tags::LAYOUT, encode_layout(self.estimator.layout()));
        c.push(tags::VALUES, encode_values(&self.estimator.params, precision));
        c.push(tags::MASK, encode_names(&self.mask));
        c.push(tags::NORM, encode_norm(&self.norm));
        c.push(tags::MANIFEST, serde_json::to_vec(&self.window).expect("manifest serializes"));
        if let Some(ae) = &self.ae {
            c.push(tags::AE_LAYOUT, encode_layout(ae.layout()));
            c.push(tags::AE_VALUES, encode_values(&ae.params, precision));
        }
        if !self.latents.is_empty() {
            c.push(tags::LATENTS, encode_latents(&self.latents));
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_slice(c.require(tags::META)?)
            .map_err(|e| Error::format("checkpoint metadata", e.to_string()))?;
        let schedule = decode_schedule(c.require(tags::SCHEDULE)?)?;
        let layout = decode_layout(c.require(tags::LAYOUT)?)?;
        let (params, _) = decode_values(c.require(tags::VALUES)?)?;
        let estimator = NoiseEstimator::from_parts(meta.estimator_arch, meta.estimator_dim, params)?;
        if estimator.layout() != &layout {
            return Err(Error::format("checkpoint", "estimator layout does not match its architecture"));
        }
        let ae = match (&meta.autoencoder, c.get(tags::AE_VALUES)) {
            (Some(m), Some(bytes)) => {
                let (p, _) = decode_values(bytes)?;
                Some(Autoencoder::from_parts(m.kind, m.dim, m.latent_dim, m.channels, p)?)
            }
            (None, None) => None,
            _ => return Err(Error::format("checkpoint", "autoencoder metadata and values disagree")),
        };
        let window = match c.get(tags::MANIFEST) {
            Some(b) => serde_json::from_slice(b).map_err(|e| Error::format("window manifest", e.to_string()))?,
            None => Vec::new(),
        };
        let latents = match c.get(tags::LATENTS) {
            Some(b) => decode_latents(b)?,
            None => Vec::new(),
        };
        Ok(Self {
            meta,
            schedule,
            estimator,
            mask: decode_names(c.require(tags::MASK)?)?,
            norm: decode_norm(c.require(tags::NORM)?)?,
            ae,
            window,
            latents,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn values_round_trip_in_both_widths() {
        let v = vec![1.0, -2.5, 1e-300, f64::MAX];
        assert_eq!(decode_values(&encode_values(&v, Precision::F64)).unwrap(), (v.clone(), Precision::F64));
        let (w, p) = decode_values(&encode_values(&[0.5, -3.0], Precision::F32)).unwrap();
        assert_eq!((w, p), (vec![0.5, -3.0], Precision::F32));
    }

    #[test]
    fn header_checks() {
        let mut c = Container::default();
        c.push(*b"ZZZZ", vec![1, 2, 3]);
        let mut bytes = c.to_bytes();
        assert_eq!(Container::from_bytes(&bytes).unwrap(), c);
        bytes[8] = 2;
        assert!(matches!(Container::from_bytes(&bytes), Err(Error::VersionAhead { found: 2, .. })));
        assert!(Container::from_bytes(b"GENAGGC").is_err());
        let truncated = &c.to_bytes()[..20];
        assert!(Container::from_bytes(truncated).is_err());
    }
}
