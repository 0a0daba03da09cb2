//! Client-side local training (mini-batch SGD on cross-entropy) and
//! evaluation.

use alloc::format;
use alloc::vec::Vec;

use crate::codec::Layout;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::optim::{Optimizer, OptimizerKind};
use crate::record::value_and_grad;
use crate::rng::{shuffle, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct LocalUpdateConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Constant local learning rate.
    pub lr: f64,
    /// Heavy-ball momentum; 0 is plain SGD.
    pub momentum: f64,
}

impl Default for LocalUpdateConfig {
    fn default() -> Self {
        Self {
            epochs: 2,
            batch_size: 50,
            lr: 0.01,
            momentum: 0.0,
        }
    }
}

impl LocalUpdateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "local epochs and batch_size must be positive".into(),
            ));
        }
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!(
                "invalid lr {} / momentum {}",
                self.lr, self.momentum
            )));
        }
        Ok(())
    }
}

/// One federation participant: its data, architecture, current parameters and
/// private random stream.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub train: Dataset,
    pub test: Dataset,
    pub model: ModelSpec,
    pub params: Vec<f64>,
    pub rng: Stream,
    layout: Layout,
}

impl ClientState {
    pub fn new(
        id: usize,
        train: Dataset,
        test: Dataset,
        model: ModelSpec,
        params: Vec<f64>,
        rng: Stream,
    ) -> Result<Self> {
        let layout = model.layout();
        if params.len() != layout.total() {
            return Err(Error::Layout(format!(
                "client {}: {} parameters for a layout of {}",
                id,
                params.len(),
                layout.total()
            )));
        }
        for d in [&train, &test] {
            if !d.is_empty() && (d.features() != model.input_dim() || d.classes() != model.classes()) {
                return Err(Error::InvalidArgument(format!(
                    "client {}: data ({} features, {} classes) does not fit the model",
                    id,
                    d.features(),
                    d.classes()
                )));
            }
        }
        Ok(Self {
            id,
            train,
            test,
            model,
            params,
            rng,
            layout,
        })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// m_i, the number of local training examples.
    pub fn sample_count(&self) -> usize {
        self.train.len()
    }

    fn check_params(&self, p: &[f64]) -> Result<()> {
        if p.len() != self.layout.total() {
            return Err(Error::Layout(format!(
                "client {}: {} parameters for a layout of {}",
                self.id,
                p.len(),
                self.layout.total()
            )));
        }
        Ok(())
    }

    /// `cfg.epochs` passes of mini-batch SGD starting from `init`. The
    /// result also becomes the client's stored parameters.
    pub fn local_update(&mut self, init: &[f64], cfg: &LocalUpdateConfig) -> Result<Vec<f64>> {
        self.local_update_traced(init, cfg).map(|(p, _)| p)
    }

    /// As [`Self::local_update`], also returning the mean training loss of
    /// each epoch.
    pub fn local_update_traced(
        &mut self,
        init: &[f64],
        cfg: &LocalUpdateConfig,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_params(init)?;
        cfg.validate()?;
        if self.train.is_empty() {
            return Err(Error::Empty("client training data"));
        }
        if cfg.batch_size > self.train.len() {
            return Err(Error::InvalidArgument(format!(
                "batch size {} exceeds {} training examples",
                cfg.batch_size,
                self.train.len()
            )));
        }
        let mut params = init.to_vec();
        let mut opt = Optimizer::new(
            OptimizerKind::Momentum {
                momentum: cfg.momentum,
            },
            cfg.lr,
            params.len(),
        );
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        let mut epoch_losses = Vec::with_capacity(cfg.epochs);
        let mut batch_no = 0;
        for _ in 0..cfg.epochs {
            shuffle(&mut self.rng, &mut order);
            let mut total = 0.0;
            let mut seen = 0;
            for chunk in order.chunks(cfg.batch_size) {
                let (x, y) = self.train.batch(chunk);
                let model = &self.model;
                let res = value_and_grad(&params, |rec, p| model.loss(rec, p, &x, &y));
                let (loss, grads) = match res {
                    Ok(v) => v,
                    Err(Error::NonFinite { .. }) => {
                        return Err(Error::ClientDiverged {
                            client: self.id,
                            batch: batch_no,
                        })
                    }
                    Err(e) => return Err(e),
                };
                opt.step(&mut params, &grads)?;
                total += loss * chunk.len() as f64;
                seen += chunk.len();
                batch_no += 1;
            }
            epoch_losses.push(total / seen as f64);
        }
        self.params.clone_from(&params);
        Ok((params, epoch_losses))
    }

    /// Test accuracy and mean cross-entropy of `params`.
    pub fn evaluate(&self, params: &[f64]) -> Result<(f64, f64)> {
        evaluate_on(&self.model, params, &self.test)
    }

    /// Training-set accuracy and mean loss.
    pub fn evaluate_train(&self, params: &[f64]) -> Result<(f64, f64)> {
        evaluate_on(&self.model, params, &self.train)
    }

    /// Gradient of the mean log-likelihood of `batch` (the negative
    /// cross-entropy gradient).
    pub fn loss_gradient(&self, params: &[f64], batch: &Dataset) -> Result<Vec<f64>> {
        self.check_params(params)?;
        if batch.is_empty() {
            return Err(Error::Empty("gradient batch"));
        }
        let (x, y) = batch.all();
        let (_, g) = value_and_grad(params, |rec, p| self.model.loss(rec, p, &x, &y))?;
        Ok(g.into_iter().map(|v| -v).collect())
    }
}

/// Accuracy and mean cross-entropy of `model(params)` on `data`.
pub fn evaluate_on(model: &ModelSpec, params: &[f64], data: &Dataset) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let mut correct = 0usize;
    let mut loss = 0.0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(1024) {
        let (x, y) = data.batch(chunk);
        let z = model.predict(params, &x)?;
        for (row, &label) in z.rows().zip(&y) {
            if argmax(row) == label {
                correct += 1;
            }
            loss += crate::record::log_sum_exp(row) - row[label];
        }
    }
    Ok((correct as f64 / data.len() as f64, loss / data.len() as f64))
}

/// Index of the first maximal entry.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Predicted labels for every row of `x`.
pub fn predict_labels(model: &ModelSpec, params: &[f64], x: &Tensor) -> Result<Vec<usize>> {
    Ok(model.predict(params, x)?.rows().map(argmax).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::BlobSpec;
    use crate::rng::seeded;
    use alloc::vec;

    fn tiny_client(train: Dataset, test: Dataset, seed: u64) -> ClientState {
        let model = ModelSpec::Mlp {
            input: train.features(),
            hidden: 32,
            classes: train.classes(),
        };
        let p = model.init(&mut seeded(99));
        ClientState::new(0, train, test, model, p, seeded(seed)).unwrap()
    }

    fn blobs(per_class: usize, seed: u64) -> Dataset {
        BlobSpec {
            per_class,
            noise_std: 0.3,
            ..BlobSpec::default()
        }
        .generate(&mut seeded(seed))
        .unwrap()
    }

    #[test]
    fn zero_lr_returns_init() {
        let mut c = tiny_client(blobs(25, 1), blobs(5, 2), 0);
        let init = c.params.clone();
        let cfg = LocalUpdateConfig {
            lr: 0.0,
            ..Default::default()
        };
        assert_eq!(c.local_update(&init, &cfg).unwrap(), init);
    }

    #[test]
    fn memorizes_a_single_example() {
        let mut one = Dataset::empty(2, 4);
        one.push(&[0.3, -0.7], 2);
        let mut c = tiny_client(one.clone(), one, 0);
        let cfg = LocalUpdateConfig {
            epochs: 500,
            batch_size: 1,
            lr: 0.1,
            momentum: 0.0,
        };
        let init = c.params.clone();
        let (p, losses) = c.local_update_traced(&init, &cfg).unwrap();
        assert!(*losses.last().unwrap() <= 0.01, "{:?}", losses.last());
        assert_eq!(c.evaluate(&p).unwrap().0, 1.0);
        assert_eq!(c.params, p);
    }

    #[test]
    fn identical_clients_are_bit_identical() {
        let mut a = tiny_client(blobs(25, 1), blobs(5, 2), 42);
        let mut b = tiny_client(blobs(25, 1), blobs(5, 2), 42);
        let init = a.params.clone();
        let cfg = LocalUpdateConfig::default();
        assert_eq!(a.local_update(&init, &cfg).unwrap(), b.local_update(&init, &cfg).unwrap());
    }

    #[test]
    fn constant_model_is_at_chance() {
        // Balanced 10-class test set; zero weights give equal logits, argmax 0.
        let mut test = Dataset::empty(3, 10);
        for c in 0..10 {
            for _ in 0..7 {
                test.push(&[1.0, 2.0, 3.0], c);
            }
        }
        let model = ModelSpec::Mlp {
            input: 3,
            hidden: 4,
            classes: 10,
        };
        let p = vec![0.0; model.n_params()];
        let (acc, loss) = evaluate_on(&model, &p, &test).unwrap();
        assert_eq!(acc, 7.0 / 70.0);
        assert!((loss - libm::log(10.0)).abs() < 1e-12);
    }

    #[test]
    fn accuracy_is_order_invariant() {
        let test = blobs(30, 7);
        let c = tiny_client(blobs(10, 1), test.clone(), 0);
        let mut idx: Vec<usize> = (0..test.len()).collect();
        idx.reverse();
        let c2 = tiny_client(blobs(10, 1), test.subset(&idx), 0);
        let (a1, l1) = c.evaluate(&c.params).unwrap();
        let (a2, l2) = c2.evaluate(&c.params).unwrap();
        assert_eq!(a1, a2);
        assert!((l1 - l2).abs() < 1e-12);
    }

    #[test]
    fn log_likelihood_gradient_is_negated_loss_gradient() {
        let c = tiny_client(blobs(10, 1), blobs(5, 2), 0);
        let (x, y) = c.train.all();
        let (_, g) = value_and_grad(&c.params, |rec, p| c.model.loss(rec, p, &x, &y)).unwrap();
        let ll = c.loss_gradient(&c.params, &c.train).unwrap();
        assert!(g.iter().zip(&ll).all(|(a, b)| *a == -*b));
    }

    #[test]
    fn error_paths() {
        let mut c = tiny_client(blobs(10, 1), Dataset::empty(2, 4), 0);
        assert!(matches!(c.evaluate(&c.params.clone()), Err(Error::Empty(_))));
        let short = vec![0.0; 3];
        assert!(matches!(
            c.local_update(&short, &LocalUpdateConfig::default()),
            Err(Error::Layout(_))
        ));
        let mut empty = tiny_client(Dataset::empty(2, 4), blobs(5, 2), 0);
        let p = empty.params.clone();
        assert!(matches!(
            empty.local_update(&p, &LocalUpdateConfig::default()),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn diverging_update_reports_batch() {
        let mut c = tiny_client(blobs(25, 1), blobs(5, 2), 0);
        let init = c.params.clone();
        let cfg = LocalUpdateConfig {
            lr: 1e200,
            ..Default::default()
        };
        match c.local_update(&init, &cfg) {
            Err(Error::ClientDiverged { client: 0, batch }) => assert!(batch >= 1),
            other => panic!("expected divergence, got {:?}", other.map(|_| ())),
        }
    }
}
