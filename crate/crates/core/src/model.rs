//! Client classifier architectures.
//!
//! Three named reference layouts are provided:
//!
//! - `mlp-tiny`: input → 32 → classes, ReLU.
//! - `cnn-small`: two stride-2 3×3 convolutions (8, 16 channels), then
//!   fully connected 64 → classes.
//! - `cnn-med`: three stride-2 3×3 convolutions (16, 32, 64 channels), then
//!   fully connected 128 → classes.
//!
//! The fully connected layers are always named `fc1` and `fc2`, so
//! "generate the final two fully connected layers" is the prefix mask
//! `["fc1", "fc2"]` regardless of architecture.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::codec::Layout;
use crate::error::{Error, Result};
use crate::record::{NodeId, Record};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModelSpec {
    Mlp {
        input: usize,
        hidden: usize,
        classes: usize,
    },
    Cnn {
        /// `(channels, height, width)` of the input image.
        image: (usize, usize, usize),
        conv: Vec<usize>,
        fc_hidden: usize,
        classes: usize,
    },
}

fn halve(n: usize) -> usize {
    // 3×3 kernel, stride 2, padding 1
    (n + 2 - 3) / 2 + 1
}

impl ModelSpec {
    /// `name` is one of `mlp-tiny`, `cnn-small`, `cnn-med`. CNNs need the
    /// input image shape; for the MLP only its flattened size matters.
    pub fn named(name: &str, image: (usize, usize, usize), classes: usize) -> Result<Self> {
        let input = image.0 * image.1 * image.2;
        match name {
            "mlp-tiny" => Ok(ModelSpec::Mlp {
                input,
                hidden: 32,
                classes,
            }),
            "cnn-small" => Ok(ModelSpec::Cnn {
                image,
                conv: vec![8, 16],
                fc_hidden: 64,
                classes,
            }),
            "cnn-med" => Ok(ModelSpec::Cnn {
                image,
                conv: vec![16, 32, 64],
                fc_hidden: 128,
                classes,
            }),
            other => Err(Error::InvalidArgument(format!("unknown model `{}`", other))),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            ModelSpec::Mlp { input, .. } => *input,
            ModelSpec::Cnn { image, .. } => image.0 * image.1 * image.2,
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            ModelSpec::Mlp { classes, .. } | ModelSpec::Cnn { classes, .. } => *classes,
        }
    }

    fn conv_flat(&self) -> usize {
        match self {
            ModelSpec::Mlp { .. } => 0,
            ModelSpec::Cnn { image, conv, .. } => {
                let (mut h, mut w) = (image.1, image.2);
                for _ in conv {
                    h = halve(h);
                    w = halve(w);
                }
                conv.last().copied().unwrap_or(image.0) * h * w
            }
        }
    }

    pub fn layout(&self) -> Layout {
        let mut entries: Vec<(String, Vec<usize>)> = Vec::new();
        match self {
            ModelSpec::Mlp {
                input,
                hidden,
                classes,
            } => {
                entries.push(("fc1.weight".into(), vec![*hidden, *input]));
                entries.push(("fc1.bias".into(), vec![*hidden]));
                entries.push(("fc2.weight".into(), vec![*classes, *hidden]));
                entries.push(("fc2.bias".into(), vec![*classes]));
            }
            ModelSpec::Cnn {
                image,
                conv,
                fc_hidden,
                classes,
            } => {
                let mut cin = image.0;
                for (i, &c) in conv.iter().enumerate() {
                    entries.push((format!("conv{}.weight", i + 1), vec![c, cin, 3, 3]));
                    entries.push((format!("conv{}.bias", i + 1), vec![c]));
                    cin = c;
                }
                entries.push(("fc1.weight".into(), vec![*fc_hidden, self.conv_flat()]));
                entries.push(("fc1.bias".into(), vec![*fc_hidden]));
                entries.push(("fc2.weight".into(), vec![*classes, *fc_hidden]));
                entries.push(("fc2.bias".into(), vec![*classes]));
            }
        }
        Layout::new(entries).expect("architecture layer names are unique")
    }

    pub fn n_params(&self) -> usize {
        self.layout().total()
    }

    /// Uniform(-1/√fan_in, 1/√fan_in) for every weight and bias.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let layout = self.layout();
        let mut out = Vec::with_capacity(layout.total());
        let mut fan_in = 1;
        for l in layout.layers() {
            if l.shape.len() > 1 {
                fan_in = l.shape[1..].iter().product();
            }
            let bound = 1.0 / libm::sqrt(fan_in as f64);
            out.extend((0..l.len).map(|_| rng.random_range(-bound..bound)));
        }
        out
    }

    /// Records the forward pass for `x [N, input_dim]` and returns the logits node.
    pub fn logits(&self, rec: &mut Record, params: &[f64], x: &Tensor) -> Result<NodeId> {
        let layout = self.layout();
        if params.len() != layout.total() {
            return Err(Error::Layout(format!(
                "model expects {} parameters, got {}",
                layout.total(),
                params.len()
            )));
        }
        if x.rank() != 2 || x.shape()[1] != self.input_dim() {
            return Err(Error::shape(
                "model input",
                format!("expected [N, {}], got {:?}", self.input_dim(), x.shape()),
            ));
        }
        let n = x.shape()[0];
        let p = |rec: &mut Record, name: &str| -> Result<NodeId> {
            let l = layout.get(name).ok_or_else(|| Error::UnknownLayer(name.into()))?;
            rec.param(params, l.offset, l.shape.clone())
        };
        let mut h = rec.input(x.clone());
        if let ModelSpec::Cnn { image, conv, .. } = self {
            h = rec.reshape(h, vec![n, image.0, image.1, image.2])?;
            for i in 0..conv.len() {
                let w = p(rec, &format!("conv{}.weight", i + 1))?;
                let b = p(rec, &format!("conv{}.bias", i + 1))?;
                h = rec.conv2d(h, w, Some(b), 2, 1)?;
                h = rec.relu(h);
            }
            h = rec.reshape(h, vec![n, self.conv_flat()])?;
        }
        let (w1, b1) = (p(rec, "fc1.weight")?, p(rec, "fc1.bias")?);
        h = rec.affine(h, w1, Some(b1))?;
        h = rec.relu(h);
        let (w2, b2) = (p(rec, "fc2.weight")?, p(rec, "fc2.bias")?);
        rec.affine(h, w2, Some(b2))
    }

    /// Mean cross-entropy of the model on `(x, labels)`.
    pub fn loss(&self, rec: &mut Record, params: &[f64], x: &Tensor, labels: &[usize]) -> Result<NodeId> {
        let z = self.logits(rec, params, x)?;
        rec.softmax_cross_entropy(z, labels)
    }

    /// Class scores without gradient bookkeeping.
    pub fn predict(&self, params: &[f64], x: &Tensor) -> Result<Tensor> {
        let mut rec = Record::new();
        let z = self.logits(&mut rec, params, x)?;
        Ok(rec.value(z).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn reference_sizes() {
        let mlp = ModelSpec::named("mlp-tiny", (1, 1, 32), 10).unwrap();
        assert_eq!(mlp.n_params(), 32 * 32 + 32 + 32 * 10 + 10);
        let cnn = ModelSpec::named("cnn-small", (1, 28, 28), 10).unwrap();
        // 28 -> 14 -> 7
        assert_eq!(cnn.layout().get("fc1.weight").unwrap().shape, vec![64, 16 * 7 * 7]);
        let med = ModelSpec::named("cnn-med", (3, 32, 32), 10).unwrap();
        assert_eq!(med.layout().get("fc1.weight").unwrap().shape, vec![128, 64 * 4 * 4]);
        assert!(ModelSpec::named("resnet", (1, 1, 1), 2).is_err());
    }

    #[test]
    fn logits_shape() {
        let cnn = ModelSpec::named("cnn-small", (1, 6, 6), 3).unwrap();
        let p = cnn.init(&mut rng::seeded(0));
        let x = Tensor::zeros(vec![4, 36]);
        assert_eq!(cnn.predict(&p, &x).unwrap().shape(), &[4, 3]);
        assert!(cnn.predict(&p[1..], &x).is_err());
    }
}
