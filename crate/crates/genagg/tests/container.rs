use genagg::container::{self, tags, Container, ServerCheckpoint};
use genagg::core::codec::{LayerMask, Layout, NormStats};
use genagg::core::diffusion::DiffusionTrainConfig;
use genagg::core::estimator::EstimatorArch;
use genagg::core::federated::{ServerConfig, ServerState};
use genagg::core::inversion::extract_latent;
use genagg::core::rng::{normal_vec, seeded};
use genagg::core::schedule::{NoiseSchedule, ScheduleKind};
use genagg::config::Precision;

fn trained() -> ServerState {
    let layout = Layout::new([("w", vec![3, 2]), ("b", vec![3])]).unwrap();
    let mask = LayerMask::all(&layout);
    let cfg = ServerConfig {
        window: 2,
        bootstrap_steps: 10,
        train: DiffusionTrainConfig {
            arch: Some(EstimatorArch::Mlp { width: 8, depth: 1 }),
            ..DiffusionTrainConfig::default()
        },
        ..ServerConfig::default()
    };
    let mut s = ServerState::new(cfg, NoiseSchedule::rescaled_linear(10).unwrap(), layout, mask).unwrap();
    for round in 1..=2 {
        let ups: Vec<Vec<f64>> = (0..3).map(|i| normal_vec(&mut seeded(round * 10 + i), 9)).collect();
        let refs: Vec<(usize, &[f64])> = ups.iter().enumerate().map(|(i, u)| (i, u.as_slice())).collect();
        s.record_uploads(round as usize, &refs).unwrap();
    }
    s.train(&mut seeded(1)).unwrap();
    s
}

#[test]
fn checkpoint_round_trips_bit_exactly_at_f64() {
    let server = trained();
    let mut ck = ServerCheckpoint::from_server(&server, 2, 9).unwrap();
    ck.latents = vec![extract_latent(&[0.5; 9], &ck.schedule, &mut seeded(3)).unwrap()];
    let bytes = ck.to_container(Precision::F64).to_bytes();
    let back = ServerCheckpoint::from_container(&Container::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(back.meta, ck.meta);
    assert_eq!(back.estimator, ck.estimator);
    assert_eq!(back.norm, ck.norm);
    assert_eq!(back.mask, ck.mask);
    assert_eq!(back.window, ck.window);
    assert_eq!(back.latents, ck.latents);
    assert_eq!(back.schedule.id(), ck.schedule.id());
}

#[test]
fn f32_checkpoint_is_close() {
    let ck = ServerCheckpoint::from_server(&trained(), 2, 9).unwrap();
    let bytes = ck.to_container(Precision::F32).to_bytes();
    let back = ServerCheckpoint::from_container(&Container::from_bytes(&bytes).unwrap()).unwrap();
    for (a, b) in back.estimator.params.iter().zip(&ck.estimator.params) {
        assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
    }
}

#[test]
fn unknown_sections_are_skipped_and_required_ones_enforced() {
    let ck = ServerCheckpoint::from_server(&trained(), 1, 0).unwrap();
    let mut c = ck.to_container(Precision::F64);
    c.push(*b"XTRA", vec![9; 5]);
    let again = Container::from_bytes(&c.to_bytes()).unwrap();
    assert!(ServerCheckpoint::from_container(&again).is_ok());

    let mut missing = Container::default();
    for (tag, payload) in &again.sections {
        if *tag != tags::NORM {
            missing.push(*tag, payload.clone());
        }
    }
    assert!(ServerCheckpoint::from_container(&missing).is_err());
}

#[test]
fn schedule_and_norm_codecs() {
    let s = NoiseSchedule::new(50, 1e-4, 0.02, ScheduleKind::Cosine).unwrap();
    let back = container::decode_schedule(&container::encode_schedule(&s)).unwrap();
    assert_eq!(back.betas(), s.betas());
    let n = NormStats {
        mean: vec![1.0, -2.0],
        std: vec![0.5, 1e-6],
        floor: 1e-6,
    };
    assert_eq!(container::decode_norm(&container::encode_norm(&n)).unwrap(), n);
    let mut bad = container::encode_schedule(&s);
    let last = bad.len() - 1;
    bad[last] ^= 1;
    assert!(container::decode_schedule(&bad).is_err());
}
