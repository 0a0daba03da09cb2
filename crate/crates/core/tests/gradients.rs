use genagg_core::estimator::{EstimatorArch, NoiseEstimator};
use genagg_core::model::ModelSpec;
use genagg_core::record::{gradient_check, NodeId, Record};
use genagg_core::rng::{normal_vec, seeded};
use genagg_core::tensor::Tensor;
use genagg_core::Result;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

/// Contracts `y` with a fixed random tensor so every output entry reaches the loss.
fn project(rec: &mut Record, y: NodeId, seed: u64) -> Result<NodeId> {
    let shape = rec.value(y).shape().to_vec();
    let n: usize = shape.iter().product();
    let c = rec.input(Tensor::new(shape, normal_vec(&mut seeded(seed), n))?);
    let m = rec.mul(y, c)?;
    rec.sum(m)
}

fn params(n: usize, seed: u64) -> Vec<f64> {
    normal_vec(&mut seeded(seed), n).into_iter().map(|v| 0.5 * v).collect()
}

fn check<F>(name: &str, p: &[f64], build: F)
where
    F: Fn(&mut Record, &[f64]) -> Result<NodeId>,
{
    let err = gradient_check(p, H, build).unwrap();
    assert!(err <= TOL, "{name}: relative gradient error {err:.3e}");
}

#[test]
fn affine() {
    check("affine", &params(3 * 4 + 2 * 4 + 2, 1), |rec, p| {
        let x = rec.param(p, 0, vec![3, 4])?;
        let w = rec.param(p, 12, vec![2, 4])?;
        let b = rec.param(p, 20, vec![2])?;
        let y = rec.affine(x, w, Some(b))?;
        project(rec, y, 10)
    });
}

#[test]
fn conv1d_with_stride_and_padding() {
    for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
        check("conv1d", &params(2 * 2 * 7 + 3 * 2 * 3 + 3, 2), |rec, p| {
            let x = rec.param(p, 0, vec![2, 2, 7])?;
            let w = rec.param(p, 28, vec![3, 2, 3])?;
            let b = rec.param(p, 46, vec![3])?;
            let y = rec.conv1d(x, w, Some(b), stride, pad)?;
            project(rec, y, 11)
        });
    }
}

#[test]
fn conv2d_with_stride_and_padding() {
    for (stride, pad) in [(1, 1), (2, 1)] {
        check("conv2d", &params(2 * 5 * 5 + 2 * 2 * 3 * 3 + 2, 3), |rec, p| {
            let x = rec.param(p, 0, vec![1, 2, 5, 5])?;
            let w = rec.param(p, 50, vec![2, 2, 3, 3])?;
            let b = rec.param(p, 86, vec![2])?;
            let y = rec.conv2d(x, w, Some(b), stride, pad)?;
            project(rec, y, 12)
        });
    }
}

#[test]
fn activations() {
    // keep relu inputs away from the kink
    let mut p = params(12, 4);
    p.iter_mut().for_each(|v| {
        if v.abs() < 0.05 {
            *v += 0.1
        }
    });
    check("relu", &p, |rec, p| {
        let x = rec.param(p, 0, vec![3, 4])?;
        let y = rec.relu(x);
        project(rec, y, 13)
    });
    check("gelu", &p, |rec, p| {
        let x = rec.param(p, 0, vec![3, 4])?;
        let y = rec.gelu(x);
        project(rec, y, 14)
    });
    check("silu", &p, |rec, p| {
        let x = rec.param(p, 0, vec![3, 4])?;
        let y = rec.silu(x);
        project(rec, y, 15)
    });
}

#[test]
fn elementwise_arithmetic() {
    let p = params(16, 5);
    check("scale", &p, |rec, p| {
        let x = rec.param(p, 0, vec![2, 4])?;
        let y = rec.scale(x, -1.7);
        project(rec, y, 16)
    });
    check("add/sub/mul", &p, |rec, p| {
        let a = rec.param(p, 0, vec![2, 4])?;
        let b = rec.param(p, 8, vec![2, 4])?;
        let s = rec.add(a, b)?;
        let d = rec.sub(a, b)?;
        let y = rec.mul(s, d)?;
        project(rec, y, 17)
    });
}

#[test]
fn shape_operations() {
    let p = params(2 * 3 * 4 + 2 * 3 + 2 * 2 * 4, 6);
    check("add_channel", &p, |rec, p| {
        let x = rec.param(p, 0, vec![2, 3, 4])?;
        let e = rec.param(p, 24, vec![2, 3])?;
        let y = rec.add_channel(x, e)?;
        project(rec, y, 18)
    });
    check("reshape/concat/upsample", &p, |rec, p| {
        let x = rec.param(p, 0, vec![2, 3, 4])?;
        let z = rec.param(p, 30, vec![2, 2, 4])?;
        let c = rec.concat(x, z)?;
        let u = rec.upsample1d(c)?;
        let y = rec.reshape(u, vec![2, 40])?;
        project(rec, y, 19)
    });
}

#[test]
fn layer_norm() {
    check("layer_norm", &params(3 * 5 + 5 + 5, 7), |rec, p| {
        let x = rec.param(p, 0, vec![3, 5])?;
        let g = rec.param(p, 15, vec![5])?;
        let b = rec.param(p, 20, vec![5])?;
        let y = rec.layer_norm(x, g, b)?;
        project(rec, y, 20)
    });
}

#[test]
fn reductions_and_cross_entropy() {
    let p = params(4 * 3, 8);
    check("softmax_cross_entropy", &p, |rec, p| {
        let x = rec.param(p, 0, vec![4, 3])?;
        rec.softmax_cross_entropy(x, &[0, 2, 1, 2])
    });
    check("mean", &p, |rec, p| {
        let x = rec.param(p, 0, vec![4, 3])?;
        let sq = rec.mul(x, x)?;
        rec.mean(sq)
    });
}

#[test]
fn client_model_losses() {
    let mlp = ModelSpec::Mlp {
        input: 4,
        hidden: 6,
        classes: 3,
    };
    let x = Tensor::new(vec![5, 4], normal_vec(&mut seeded(30), 20)).unwrap();
    let labels = [0, 1, 2, 1, 0];
    let p = mlp.init(&mut seeded(31));
    assert!(p.len() <= 200);
    check("mlp loss", &p, |rec, p| mlp.loss(rec, p, &x, &labels));

    let cnn = ModelSpec::Cnn {
        image: (1, 4, 4),
        conv: vec![2, 3],
        fc_hidden: 4,
        classes: 2,
    };
    let xi = Tensor::new(vec![3, 16], normal_vec(&mut seeded(32), 48)).unwrap();
    let p = cnn.init(&mut seeded(33));
    assert!(p.len() <= 200, "cnn fixture has {} parameters", p.len());
    check("cnn loss", &p, |rec, p| cnn.loss(rec, p, &xi, &[0, 1, 1]));
}

#[test]
fn estimator_losses() {
    for (arch, dim) in [
        (EstimatorArch::Mlp { width: 3, depth: 2 }, 3),
        (EstimatorArch::Unet1d { base_channels: 1, levels: 1 }, 4),
    ] {
        let est = NoiseEstimator::new(arch, dim, &mut seeded(40)).unwrap();
        let xt = Tensor::new(vec![2, dim], normal_vec(&mut seeded(41), 2 * dim)).unwrap();
        let eps = Tensor::new(vec![2, dim], normal_vec(&mut seeded(42), 2 * dim)).unwrap();
        check("estimator loss", &est.params, |rec, p| est.loss(rec, p, &xt, &[1, 7], &eps));
    }
}
