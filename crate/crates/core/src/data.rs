//! Labeled example sets, the synthetic Gaussian-blob generator, and the
//! non-IID partitioner.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{normal, shuffle};
use crate::tensor::Tensor;

/// Row-major feature matrix with integer labels in `0..classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: usize,
    classes: usize,
    x: Vec<f64>,
    y: Vec<usize>,
}

impl Dataset {
    pub fn new(features: usize, classes: usize, x: Vec<f64>, y: Vec<usize>) -> Result<Self> {
        if features == 0 || x.len() != features * y.len() {
            return Err(Error::shape(
                "dataset",
                format!("{} values for {} rows of {} features", x.len(), y.len(), features),
            ));
        }
        if let Some(&bad) = y.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidArgument(format!(
                "label {} out of range for {} classes",
                bad, classes
            )));
        }
        Ok(Self {
            features,
            classes,
            x,
            y,
        })
    }

    pub fn empty(features: usize, classes: usize) -> Self {
        Self {
            features,
            classes,
            x: Vec::new(),
            y: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.y
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.features..(i + 1) * self.features]
    }

    pub fn push(&mut self, row: &[f64], label: usize) {
        debug_assert_eq!(row.len(), self.features);
        self.x.extend_from_slice(row);
        self.y.push(label);
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        let mut out = Self::empty(self.features, self.classes);
        for &i in idx {
            out.push(self.row(i), self.y[i]);
        }
        out
    }

    /// Features of the selected rows as `[idx.len(), features]` plus labels.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let mut x = Vec::with_capacity(idx.len() * self.features);
        for &i in idx {
            x.extend_from_slice(self.row(i));
        }
        let t = Tensor::new(vec![idx.len(), self.features], x).expect("rows have fixed width");
        (t, idx.iter().map(|&i| self.y[i]).collect())
    }

    pub fn all(&self) -> (Tensor, Vec<usize>) {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batch(&idx)
    }

    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &l in &self.y {
            h[l] += 1;
        }
        h
    }

    fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by = vec![Vec::new(); self.classes];
        for (i, &l) in self.y.iter().enumerate() {
            by[l].push(i);
        }
        by
    }
}

/// Isotropic Gaussian classes whose means sit evenly on a circle of
/// `radius` in the first two feature dimensions; remaining dimensions carry
/// only noise. Overlap is controlled by `noise_std / radius`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct BlobSpec {
    pub classes: usize,
    pub features: usize,
    pub radius: f64,
    pub noise_std: f64,
    pub per_class: usize,
}

impl Default for BlobSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            features: 2,
            radius: 1.0,
            noise_std: 0.6,
            per_class: 8000,
        }
    }
}

impl BlobSpec {
    pub fn class_mean(&self, class: usize) -> Vec<f64> {
        let mut m = vec![0.0; self.features];
        let angle = 2.0 * core::f64::consts::PI * class as f64 / self.classes as f64;
        m[0] = self.radius * libm::cos(angle);
        if self.features > 1 {
            m[1] = self.radius * libm::sin(angle);
        }
        m
    }

    pub fn sample_one<R: Rng + ?Sized>(&self, class: usize, rng: &mut R) -> Vec<f64> {
        let mut v = self.class_mean(class);
        for x in v.iter_mut() {
            *x += self.noise_std * normal(rng);
        }
        v
    }

    pub fn generate<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Dataset> {
        if self.classes < 2 || self.features == 0 {
            return Err(Error::InvalidArgument(
                "blobs need at least 2 classes and 1 feature".into(),
            ));
        }
        let mut ds = Dataset::empty(self.features, self.classes);
        for _ in 0..self.per_class {
            for c in 0..self.classes {
                let row = self.sample_one(c, rng);
                ds.push(&row, c);
            }
        }
        Ok(ds)
    }
}

/// `s_percent`% of each client's examples are drawn uniformly from the pool;
/// the rest come from the dominant classes of the client's group.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct PartitionSpec {
    pub s_percent: u32,
    pub dominant_classes_per_client: usize,
    pub samples_per_client: usize,
    pub test_per_client: usize,
    pub n_groups: usize,
}

impl Default for PartitionSpec {
    fn default() -> Self {
        Self {
            s_percent: 20,
            dominant_classes_per_client: 2,
            samples_per_client: 600,
            test_per_client: 200,
            n_groups: 2,
        }
    }
}

impl PartitionSpec {
    pub fn validate(&self, classes: usize) -> Result<()> {
        if self.s_percent > 100 {
            return Err(Error::InvalidArgument(format!(
                "s_percent must be in 0..=100, got {}",
                self.s_percent
            )));
        }
        if self.dominant_classes_per_client == 0 || self.dominant_classes_per_client > classes {
            return Err(Error::InvalidArgument(format!(
                "dominant_classes_per_client must be in 1..={}",
                classes
            )));
        }
        if self.n_groups == 0 || self.samples_per_client == 0 {
            return Err(Error::InvalidArgument(
                "n_groups and samples_per_client must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn group_of(&self, client: usize) -> usize {
        client % self.n_groups
    }

    pub fn dominant_classes(&self, group: usize, classes: usize) -> Vec<usize> {
        (0..self.dominant_classes_per_client)
            .map(|j| (group * self.dominant_classes_per_client + j) % classes)
            .collect()
    }

    /// Number of uniformly drawn examples out of `total`.
    pub fn uniform_count(&self, total: usize) -> usize {
        total * self.s_percent as usize / 100
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientData {
    pub group: usize,
    pub dominant: Vec<usize>,
    pub train: Dataset,
    pub test: Dataset,
}

struct Drawer<'a> {
    pool: &'a Dataset,
    used: Vec<bool>,
    order: Vec<usize>,
    cursor: usize,
    by_class: Vec<Vec<usize>>,
    class_cursor: Vec<usize>,
}

impl<'a> Drawer<'a> {
    fn new<R: Rng + ?Sized>(pool: &'a Dataset, rng: &mut R) -> Self {
        let mut order: Vec<usize> = (0..pool.len()).collect();
        shuffle(rng, &mut order);
        let mut by_class = pool.indices_by_class();
        for c in by_class.iter_mut() {
            shuffle(rng, c);
        }
        Self {
            pool,
            used: vec![false; pool.len()],
            order,
            cursor: 0,
            class_cursor: vec![0; by_class.len()],
            by_class,
        }
    }

    fn uniform(&mut self) -> Result<usize> {
        while self.cursor < self.order.len() {
            let i = self.order[self.cursor];
            self.cursor += 1;
            if !self.used[i] {
                self.used[i] = true;
                return Ok(i);
            }
        }
        Err(Error::InsufficientPool(format!(
            "pool of {} examples exhausted",
            self.pool.len()
        )))
    }

    fn from_class(&mut self, c: usize) -> Result<usize> {
        let list = &self.by_class[c];
        while self.class_cursor[c] < list.len() {
            let i = list[self.class_cursor[c]];
            self.class_cursor[c] += 1;
            if !self.used[i] {
                self.used[i] = true;
                return Ok(i);
            }
        }
        Err(Error::InsufficientPool(format!(
            "class {} has only {} examples",
            c,
            list.len()
        )))
    }

    fn draw(&mut self, total: usize, spec: &PartitionSpec, dominant: &[usize]) -> Result<Vec<usize>> {
        let n_uniform = spec.uniform_count(total);
        let n_dom = total - n_uniform;
        let mut idx = Vec::with_capacity(total);
        for k in 0..dominant.len() {
            let share = n_dom / dominant.len() + usize::from(k < n_dom % dominant.len());
            for _ in 0..share {
                idx.push(self.from_class(dominant[k])?);
            }
        }
        for _ in 0..n_uniform {
            idx.push(self.uniform()?);
        }
        Ok(idx)
    }
}

/// Splits `pool` into `n` client datasets (train and test drawn from the same
/// per-client mixture, disjoint within a client).
pub fn partition_non_iid<R: Rng + ?Sized>(
    pool: &Dataset,
    spec: &PartitionSpec,
    n: usize,
    rng: &mut R,
) -> Result<Vec<ClientData>> {
    spec.validate(pool.classes())?;
    let need = spec.samples_per_client + spec.test_per_client;
    if pool.len() < need {
        return Err(Error::InsufficientPool(format!(
            "each client needs {} examples, pool has {}",
            need,
            pool.len()
        )));
    }
    let mut out = Vec::with_capacity(n);
    for client in 0..n {
        let group = spec.group_of(client);
        let dominant = spec.dominant_classes(group, pool.classes());
        let mut drawer = Drawer::new(pool, rng);
        let mut train_idx = drawer.draw(spec.samples_per_client, spec, &dominant)?;
        let mut test_idx = drawer.draw(spec.test_per_client, spec, &dominant)?;
        shuffle(rng, &mut train_idx);
        shuffle(rng, &mut test_idx);
        out.push(ClientData {
            group,
            dominant,
            train: pool.subset(&train_idx),
            test: pool.subset(&test_idx),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn pool(per_class: usize) -> Dataset {
        BlobSpec {
            per_class,
            ..BlobSpec::default()
        }
        .generate(&mut seeded(3))
        .unwrap()
    }

    #[test]
    fn default_spec_exact_counts() {
        let p = pool(2000);
        let spec = PartitionSpec::default();
        let clients = partition_non_iid(&p, &spec, 4, &mut seeded(1)).unwrap();
        for c in &clients {
            assert_eq!(c.train.len(), 600);
            assert_eq!(c.test.len(), 200);
            let h = c.train.histogram();
            let dom: usize = c.dominant.iter().map(|&k| h[k]).sum();
            assert!(dom * 100 >= 600 * 80, "dominant share {}", dom);
        }
        assert_eq!(clients[0].dominant, vec![0, 1]);
        assert_eq!(clients[1].dominant, vec![2, 3]);
        assert_eq!(clients[2].group, 0);
    }

    #[test]
    fn zero_uniform_single_dominant_is_single_class() {
        let p = pool(1000);
        let spec = PartitionSpec {
            s_percent: 0,
            dominant_classes_per_client: 1,
            n_groups: 4,
            ..PartitionSpec::default()
        };
        let clients = partition_non_iid(&p, &spec, 4, &mut seeded(2)).unwrap();
        for (i, c) in clients.iter().enumerate() {
            assert!(c.train.labels().iter().all(|&l| l == i));
            assert!(c.test.labels().iter().all(|&l| l == i));
        }
    }

    #[test]
    fn full_uniform_matches_pool_histogram() {
        let p = pool(2000);
        let spec = PartitionSpec {
            s_percent: 100,
            ..PartitionSpec::default()
        };
        let clients = partition_non_iid(&p, &spec, 3, &mut seeded(5)).unwrap();
        for c in &clients {
            // balanced pool: each class ~ Binomial(600, 1/4); 5 sd ≈ 53
            for &count in &c.train.histogram() {
                assert!((count as f64 - 150.0).abs() < 53.0, "{count}");
            }
        }
    }

    #[test]
    fn insufficient_pool() {
        let p = pool(50);
        let err = partition_non_iid(&p, &PartitionSpec::default(), 1, &mut seeded(0)).unwrap_err();
        assert!(matches!(err, Error::InsufficientPool(_)));
    }
}
