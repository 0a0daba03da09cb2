//! Flattening of structured weights into 1-D parameter vectors, selection of
//! the layers the server generates, and per-dimension normalization.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

/// Ordered, contiguous description of a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Layout {
    layers: Vec<LayerSpec>,
    total: usize,
}

impl Layout {
    pub fn new<S: Into<String>>(entries: impl IntoIterator<Item = (S, Vec<usize>)>) -> Result<Self> {
        let mut layers = Vec::new();
        let mut offset = 0;
        let mut seen = BTreeSet::new();
        for (name, shape) in entries {
            let name = name.into();
            if !seen.insert(name.clone()) {
                return Err(Error::Layout(format!("duplicate layer name `{}`", name)));
            }
            let len = shape.iter().product();
            layers.push(LayerSpec {
                name,
                shape,
                offset,
                len,
            });
            offset += len;
        }
        Ok(Self {
            layers,
            total: offset,
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn get(&self, name: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn offset_of(&self, name: &str) -> Result<usize> {
        self.get(name)
            .map(|l| l.offset)
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.layers.iter().map(|l| l.name.as_str())
    }
}

/// Concatenates `weights` in layout order.
pub fn flatten(weights: &[Tensor], layout: &Layout) -> Result<Vec<f64>> {
    if weights.len() != layout.layers.len() {
        return Err(Error::Layout(format!(
            "{} tensors for a layout of {} layers",
            weights.len(),
            layout.layers.len()
        )));
    }
    let mut out = Vec::with_capacity(layout.total);
    for (w, spec) in weights.iter().zip(&layout.layers) {
        if w.shape() != spec.shape.as_slice() {
            return Err(Error::Layout(format!(
                "layer `{}` expects shape {:?}, got {:?}",
                spec.name,
                spec.shape,
                w.shape()
            )));
        }
        out.extend_from_slice(w.data());
    }
    Ok(out)
}

pub fn unflatten(vec: &[f64], layout: &Layout) -> Result<Vec<Tensor>> {
    if vec.len() != layout.total {
        return Err(Error::Layout(format!(
            "vector of length {} for a layout of total {}",
            vec.len(),
            layout.total
        )));
    }
    layout
        .layers
        .iter()
        .map(|l| Tensor::new(l.shape.clone(), vec[l.offset..l.offset + l.len].to_vec()))
        .collect()
}

/// The set of layers the server generates; the complement is retained by the
/// client unchanged.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerMask {
    generated: BTreeSet<String>,
}

impl LayerMask {
    pub fn new<S: AsRef<str>>(layout: &Layout, names: impl IntoIterator<Item = S>) -> Result<Self> {
        let mut generated = BTreeSet::new();
        for n in names {
            let n = n.as_ref();
            if layout.get(n).is_none() {
                return Err(Error::UnknownLayer(n.to_string()));
            }
            generated.insert(n.to_string());
        }
        if generated.is_empty() {
            return Err(Error::InvalidArgument("layer mask must not be empty".into()));
        }
        Ok(Self { generated })
    }

    pub fn all(layout: &Layout) -> Self {
        Self {
            generated: layout.names().map(String::from).collect(),
        }
    }

    /// Every layer whose name starts with one of `prefixes` (e.g. `"fc1"`).
    pub fn from_prefixes<S: AsRef<str>>(layout: &Layout, prefixes: &[S]) -> Result<Self> {
        let names: Vec<&str> = layout
            .names()
            .filter(|n| prefixes.iter().any(|p| n.starts_with(p.as_ref())))
            .collect();
        if names.is_empty() {
            let p: Vec<&str> = prefixes.iter().map(|p| p.as_ref()).collect();
            return Err(Error::UnknownLayer(p.join(",")));
        }
        Self::new(layout, names)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.generated.contains(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.generated.iter().map(String::as_str)
    }

    pub fn generated_len(&self, layout: &Layout) -> usize {
        layout
            .layers
            .iter()
            .filter(|l| self.contains(&l.name))
            .map(|l| l.len)
            .sum()
    }

    fn check(&self, layout: &Layout) -> Result<()> {
        match self.generated.iter().find(|n| layout.get(n).is_none()) {
            Some(n) => Err(Error::UnknownLayer(n.clone())),
            None => Ok(()),
        }
    }
}

/// Splits a full vector into (generated, retained) parts, each concatenated
/// in layout order.
pub fn split_by_mask(vec: &[f64], layout: &Layout, mask: &LayerMask) -> Result<(Vec<f64>, Vec<f64>)> {
    mask.check(layout)?;
    if vec.len() != layout.total {
        return Err(Error::Layout(format!(
            "vector of length {} for a layout of total {}",
            vec.len(),
            layout.total
        )));
    }
    let mut gen = Vec::new();
    let mut ret = Vec::new();
    for l in &layout.layers {
        let s = &vec[l.offset..l.offset + l.len];
        if mask.contains(&l.name) {
            gen.extend_from_slice(s);
        } else {
            ret.extend_from_slice(s);
        }
    }
    Ok((gen, ret))
}

pub fn merge_by_mask(
    generated: &[f64],
    retained: &[f64],
    layout: &Layout,
    mask: &LayerMask,
) -> Result<Vec<f64>> {
    mask.check(layout)?;
    let glen = mask.generated_len(layout);
    if generated.len() != glen || retained.len() != layout.total - glen {
        return Err(Error::Layout(format!(
            "parts of length ({}, {}) for a mask splitting {} into ({}, {})",
            generated.len(),
            retained.len(),
            layout.total,
            glen,
            layout.total - glen
        )));
    }
    let mut out = Vec::with_capacity(layout.total);
    let (mut gi, mut ri) = (0, 0);
    for l in &layout.layers {
        if mask.contains(&l.name) {
            out.extend_from_slice(&generated[gi..gi + l.len]);
            gi += l.len;
        } else {
            out.extend_from_slice(&retained[ri..ri + l.len]);
            ri += l.len;
        }
    }
    Ok(out)
}

/// Per-dimension mean and (population) standard deviation, floored.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub floor: f64,
}

impl NormStats {
    /// Mean zero, unit scale: normalization becomes the identity.
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: alloc::vec![0.0; dim],
            std: alloc::vec![1.0; dim],
            floor: DEFAULT_STD_FLOOR,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, v: &[f64]) -> Result<Vec<f64>> {
        crate::tensor::check_len("normalize", v.len(), self.dim())?;
        Ok(v.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((x, m), s)| (x - m) / s)
            .collect())
    }

    pub fn denormalize(&self, v: &[f64]) -> Result<Vec<f64>> {
        crate::tensor::check_len("denormalize", v.len(), self.dim())?;
        Ok(v.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((x, m), s)| x * s + m)
            .collect())
    }

    /// Maps a displacement (not a point) into normalized coordinates.
    pub fn scale_delta(&self, d: &[f64]) -> Result<Vec<f64>> {
        crate::tensor::check_len("scale_delta", d.len(), self.dim())?;
        Ok(d.iter().zip(&self.std).map(|(x, s)| x / s).collect())
    }
}

pub fn fit_norm<V: AsRef<[f64]>>(vectors: &[V], floor: f64) -> Result<NormStats> {
    if vectors.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "normalization needs at least 2 vectors, got {}",
            vectors.len()
        )));
    }
    if !(floor > 0.0) {
        return Err(Error::InvalidArgument("std floor must be positive".into()));
    }
    let d = vectors[0].as_ref().len();
    if vectors.iter().any(|v| v.as_ref().len() != d) {
        return Err(Error::Layout("vectors of differing length".into()));
    }
    let n = vectors.len() as f64;
    let mut mean = alloc::vec![0.0; d];
    for v in vectors {
        for (m, x) in mean.iter_mut().zip(v.as_ref()) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = alloc::vec![0.0; d];
    for v in vectors {
        for ((s, x), m) in var.iter_mut().zip(v.as_ref()).zip(&mean) {
            *s += (x - m) * (x - m);
        }
    }
    let std = var.iter().map(|s| libm::sqrt(s / n).max(floor)).collect();
    Ok(NormStats { mean, std, floor })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn two_layer() -> Layout {
        Layout::new([("a", vec![2, 2]), ("b", vec![3])]).unwrap()
    }

    #[test]
    fn flatten_offsets() {
        let l = two_layer();
        assert_eq!(l.total(), 7);
        assert_eq!(l.offset_of("b").unwrap(), 4);
        let w = vec![
            Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            Tensor::new(vec![3], vec![5.0, 6.0, 7.0]).unwrap(),
        ];
        let v = flatten(&w, &l).unwrap();
        assert_eq!(v, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
        assert_eq!(unflatten(&v, &l).unwrap(), w);
    }

    #[test]
    fn flatten_zero_and_mismatch() {
        let l = two_layer();
        let z = vec![Tensor::zeros(vec![2, 2]), Tensor::zeros(vec![3])];
        assert_eq!(flatten(&z, &l).unwrap(), vec![0.0; 7]);
        let bad = vec![Tensor::zeros(vec![4]), Tensor::zeros(vec![3])];
        assert!(flatten(&bad, &l).is_err());
        assert!(unflatten(&[0.0; 6], &l).is_err());
    }

    #[test]
    fn single_layer_identity() {
        let l = Layout::new([("only", vec![5])]).unwrap();
        let v = vec![0.5, -1.0, 2.0, 3.0, 0.0];
        let w = unflatten(&v, &l).unwrap();
        assert_eq!(flatten(&w, &l).unwrap(), v);
    }

    #[test]
    fn mask_all_leaves_nothing_retained() {
        let l = two_layer();
        let v: Vec<f64> = (0..7).map(|i| i as f64).collect();
        let (g, r) = split_by_mask(&v, &l, &LayerMask::all(&l)).unwrap();
        assert_eq!(g, v);
        assert!(r.is_empty());
    }

    #[test]
    fn mask_last_layer_partitions_total() {
        let l = Layout::new([
            ("fc0.weight", vec![4, 3]),
            ("fc1.weight", vec![2, 4]),
            ("fc2.weight", vec![3, 2]),
        ])
        .unwrap();
        let m = LayerMask::new(&l, ["fc2.weight"]).unwrap();
        let v: Vec<f64> = (0..l.total()).map(|i| i as f64).collect();
        let (g, r) = split_by_mask(&v, &l, &m).unwrap();
        assert_eq!(g.len() + r.len(), l.total());
        assert_eq!(g.len(), 6);
        assert_eq!(merge_by_mask(&g, &r, &l, &m).unwrap(), v);
    }

    #[test]
    fn unknown_layer_is_rejected() {
        let l = two_layer();
        assert_eq!(
            LayerMask::new(&l, ["zzz"]).unwrap_err(),
            Error::UnknownLayer("zzz".into())
        );
        assert!(LayerMask::new::<&str>(&l, []).is_err());
    }

    #[test]
    fn identical_vectors_hit_the_floor() {
        let v = vec![vec![1.5, -2.0], vec![1.5, -2.0], vec![1.5, -2.0]];
        let s = fit_norm(&v, DEFAULT_STD_FLOOR).unwrap();
        assert_eq!(s.std, vec![DEFAULT_STD_FLOOR; 2]);
        assert_eq!(s.normalize(&v[0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn two_point_statistics() {
        // Per dimension {-1, +1}: mean 0, population std 1.
        let v = vec![vec![-1.0, 3.0], vec![1.0, 5.0]];
        let s = fit_norm(&v, DEFAULT_STD_FLOOR).unwrap();
        assert_eq!(s.mean, vec![0.0, 4.0]);
        assert_eq!(s.std, vec![1.0, 1.0]);
        assert_eq!(s.normalize(&v[0]).unwrap(), vec![-1.0, -1.0]);
        assert_eq!(s.normalize(&v[1]).unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn fit_needs_two_vectors() {
        assert!(fit_norm(&[vec![1.0]], DEFAULT_STD_FLOOR).is_err());
    }
}
