//! Desk-scale demonstrations with PASS/FAIL verdicts.
//!
//! Each demo returns its verdict, a few printable summary lines, named
//! scalar results and CSV files with the underlying data.

use std::fmt::Write as _;

use rand::Rng;

use genagg_core::client::{ClientState, LocalUpdateConfig};
use genagg_core::codec::{LayerMask, Layout};
use genagg_core::data::{BlobSpec, Dataset};
use genagg_core::diffusion::{sample, train_diffusion, DiffusionTrainConfig};
use genagg_core::estimator::EstimatorArch;
use genagg_core::federated::{fedavg_aggregate, ServerConfig, ServerState};
use genagg_core::guidance::initialize_new_client;
use genagg_core::inversion::{extract_latent, reconstruct};
use genagg_core::model::ModelSpec;
use genagg_core::optim::OptimizerKind;
use genagg_core::rng::{self, tag, Stream};
use genagg_core::schedule::{NoiseSchedule, ScheduleKind};
use genagg_core::tensor::max_rel_error;

use crate::config::{ArchName, ExperimentConfig, Method};
use crate::datasets::Pool;
use crate::error::{Error, Result};
use crate::harness::{run_experiment, RunOptions};

pub const NAMES: [&str; 4] = ["collapse", "inversion-roundtrip", "mixture-ddpm", "new-client"];

/// Seeds used by the median-over-seeds demos.
pub const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

#[derive(Debug, Clone)]
pub struct DemoReport {
    pub name: &'static str,
    pub passed: bool,
    pub summary: Vec<String>,
    pub values: Vec<(String, f64)>,
    /// `(file name, CSV contents)`
    pub files: Vec<(String, String)>,
}

impl DemoReport {
    pub fn value(&self, key: &str) -> Option<f64> {
        self.values.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }
}

pub fn run(name: &str) -> Result<DemoReport> {
    match name {
        "collapse" => collapse(&SEEDS),
        "inversion-roundtrip" => inversion_roundtrip(0),
        "mixture-ddpm" => mixture_ddpm(0),
        "new-client" => new_client(&SEEDS),
        other => Err(Error::Config(format!(
            "unknown demo `{other}`; expected one of {}",
            NAMES.join(", ")
        ))),
    }
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Mean absolute difference of sorted samples of equal size.
pub fn wasserstein1(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let (mut a, mut b) = (a.to_vec(), b.to_vec());
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// Round-trip of 20 random vectors (dims 16..=4096) through latent
/// extraction and reconstruction under several schedules.
pub fn inversion_roundtrip(seed: u64) -> Result<DemoReport> {
    const TOL: f64 = 1e-8;
    let schedules = [
        NoiseSchedule::rescaled_linear(100)?,
        NoiseSchedule::new(100, 1e-4, 0.02, ScheduleKind::Linear)?,
        NoiseSchedule::new(1000, 1e-4, 0.02, ScheduleKind::Linear)?,
        NoiseSchedule::new(1000, 1e-4, 0.02, ScheduleKind::Cosine)?,
    ];
    let mut r = rng::derive(seed, &[tag::INVERSION]);
    let mut csv = String::from("vector,dim,steps,schedule,max_rel_error\n");
    let mut worst = 0.0f64;
    for v in 0..20 {
        // log-spaced between 16 and 4096
        let dim = (16.0 * 256f64.powf(v as f64 / 19.0)).round() as usize;
        let scale = r.random_range(0.1..10.0);
        let theta: Vec<f64> = rng::normal_vec(&mut r, dim).iter().map(|x| x * scale).collect();
        for s in &schedules {
            let latent = extract_latent(&theta, s, &mut r)?;
            let err = max_rel_error(&reconstruct(&latent, s)?, &theta, 1e-300);
            worst = worst.max(err);
            let _ = writeln!(csv, "{v},{dim},{},{:?},{err:e}", s.steps(), s.kind());
        }
    }
    let passed = worst <= TOL;
    Ok(DemoReport {
        name: "inversion-roundtrip",
        passed,
        summary: vec![format!(
            "max relative reconstruction error {worst:.3e} over 20 vectors x {} schedules (threshold {TOL:e})",
            schedules.len()
        )],
        values: vec![("max_rel_error".into(), worst)],
        files: vec![("roundtrip.csv".into(), csv)],
    })
}

fn mixture<R: Rng + ?Sized>(r: &mut R, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = if r.random_bool(0.5) { 2.0 } else { -2.0 };
            m + 0.25 * rng::normal(r)
        })
        .collect()
}

/// DDPM on the 1-D mixture `0.5·N(−2, 0.25²) + 0.5·N(2, 0.25²)`.
pub fn mixture_ddpm(seed: u64) -> Result<DemoReport> {
    const W1_MAX: f64 = 0.2;
    const MODE_MIN: f64 = 0.3;
    let n = 2000;
    let mut data_rng = rng::derive(seed, &[tag::DATA]);
    let data: Vec<Vec<f64>> = mixture(&mut data_rng, n).into_iter().map(|v| vec![v]).collect();
    let s = NoiseSchedule::rescaled_linear(100)?;
    let cfg = DiffusionTrainConfig {
        steps: 3000,
        batch_size: 256,
        lr: 1e-3,
        optimizer: OptimizerKind::adam(),
        arch: Some(EstimatorArch::Mlp { width: 64, depth: 3 }),
    };
    let mut train_rng = rng::derive(seed, &[tag::SERVER]);
    let (est, trace) = train_diffusion(&data, &cfg, &s, &mut train_rng)?;
    let generated: Vec<f64> = sample(&est, &s, &mut rng::derive(seed, &[tag::SAMPLING]), n)?
        .into_iter()
        .map(|v| v[0])
        .collect();
    let oracle = mixture(&mut rng::derive(seed, &[tag::DATA, 1]), n);
    let w1 = wasserstein1(&generated, &oracle);
    let right = generated.iter().filter(|v| **v > 0.0).count() as f64 / n as f64;
    let passed = w1 <= W1_MAX && right >= MODE_MIN && 1.0 - right >= MODE_MIN;

    let mut samples = String::from("index,generated,oracle\n");
    for (i, (g, o)) in generated.iter().zip(&oracle).enumerate() {
        let _ = writeln!(samples, "{i},{g},{o}");
    }
    Ok(DemoReport {
        name: "mixture-ddpm",
        passed,
        summary: vec![
            format!("Wasserstein-1 distance {w1:.4} (threshold {W1_MAX})"),
            format!(
                "mass left of 0: {:.3}, right of 0: {right:.3} (each must be >= {MODE_MIN})",
                1.0 - right
            ),
        ],
        values: vec![
            ("w1".into(), w1),
            ("mass_right".into(), right),
            ("mass_left".into(), 1.0 - right),
        ],
        files: vec![
            ("samples.csv".into(), samples),
            ("diffusion_loss.csv".into(), crate::runner::loss_csv(&trace)),
        ],
    })
}

/// Two clients share inputs but have mirrored labels (`x₀ > 0` vs `x₀ < 0`).
fn mirrored_client(id: usize, seed: u64, init: &[f64], model: &ModelSpec) -> Result<ClientState> {
    let mut r = rng::derive(seed, &[tag::DATA, 7, id as u64]);
    let mut draw = |n: usize| {
        let mut d = Dataset::empty(2, 2);
        for _ in 0..n {
            let x = [rng::normal(&mut r), rng::normal(&mut r)];
            let positive = x[0] > 0.0;
            d.push(&x, usize::from(positive != (id == 1)));
        }
        d
    };
    let (train, test) = (draw(600), draw(200));
    let stream = rng::derive(seed, &[tag::CLIENT, id as u64]);
    Ok(ClientState::new(id, train, test, model.clone(), init.to_vec(), stream)?)
}

#[derive(Debug, Clone, Copy)]
struct CollapseSeed {
    local: [f64; 2],
    midpoint: [f64; 2],
    generated: [f64; 2],
}

fn collapse_seed(seed: u64) -> Result<CollapseSeed> {
    let model = ModelSpec::named("mlp-tiny", (1, 1, 2), 2)?;
    let init = model.init(&mut rng::derive(seed, &[tag::INIT]));
    let mut clients = [
        mirrored_client(0, seed, &init, &model)?,
        mirrored_client(1, seed, &init, &model)?,
    ];
    let layout: Layout = model.layout();
    let mask = LayerMask::all(&layout);
    let cfg = ServerConfig {
        window: 10,
        train: DiffusionTrainConfig {
            steps: 0,
            batch_size: 32,
            lr: 1e-3,
            optimizer: OptimizerKind::adam(),
            arch: Some(EstimatorArch::Mlp { width: 128, depth: 3 }),
        },
        steps_per_round: 0,
        bootstrap_steps: 1500,
        ..ServerConfig::default()
    };
    let mut server = ServerState::new(cfg, NoiseSchedule::rescaled_linear(100)?, layout, mask)?;
    let local = LocalUpdateConfig {
        lr: 0.05,
        ..LocalUpdateConfig::default()
    };
    for round in 1..=20 {
        let mut ups = Vec::new();
        for c in clients.iter_mut() {
            let p = c.params.clone();
            ups.push((c.id, c.local_update(&p, &local)?));
        }
        let refs: Vec<(usize, &[f64])> = ups.iter().map(|(i, p)| (*i, p.as_slice())).collect();
        server.record_uploads(round, &refs)?;
    }
    server.train(&mut rng::derive(seed, &[tag::SERVER]))?;
    let snapshot = server.snapshot()?;
    let mid = fedavg_aggregate(&[&clients[0].params, &clients[1].params], &[1.0, 1.0])?;
    let mut out = CollapseSeed {
        local: [0.0; 2],
        midpoint: [0.0; 2],
        generated: [0.0; 2],
    };
    for (k, c) in clients.iter().enumerate() {
        let mut streams = [rng::derive(seed, &[tag::INVERSION, 0, k as u64])];
        let generated = snapshot.personalize(&[c.params.as_slice()], &mut streams)?.remove(0);
        out.local[k] = c.evaluate(&c.params)?.0;
        out.midpoint[k] = c.evaluate(&mid)?.0;
        out.generated[k] = c.evaluate(&generated)?.0;
    }
    Ok(out)
}

/// Parameter collapse: the FedAvg midpoint of two well-trained mirrored
/// models is worse than either; inversion-generated parameters are not.
pub fn collapse(seeds: &[u64]) -> Result<DemoReport> {
    let runs = seeds.iter().map(|&s| collapse_seed(s)).collect::<Result<Vec<_>>>()?;
    let med = |f: &dyn Fn(&CollapseSeed) -> f64| median(&runs.iter().map(f).collect::<Vec<_>>());
    let local = [med(&|r| r.local[0]), med(&|r| r.local[1])];
    let mid = [med(&|r| r.midpoint[0]), med(&|r| r.midpoint[1])];
    let generated = [med(&|r| r.generated[0]), med(&|r| r.generated[1])];
    let mid_avg = 0.5 * (mid[0] + mid[1]);
    let trained = local.iter().all(|a| *a >= 0.9);
    let collapsed = mid_avg < local[0].min(local[1]);
    let recovered = (0..2).all(|k| generated[k] >= mid[k]);
    let mut csv = String::from("seed,client,local,midpoint,generated\n");
    for (s, r) in seeds.iter().zip(&runs) {
        for k in 0..2 {
            let _ = writeln!(csv, "{s},{k},{},{},{}", r.local[k], r.midpoint[k], r.generated[k]);
        }
    }
    Ok(DemoReport {
        name: "collapse",
        passed: trained && collapsed && recovered,
        summary: vec![
            format!(
                "median local accuracy {:.3} / {:.3} (each must be >= 0.9)",
                local[0], local[1]
            ),
            format!("median FedAvg midpoint accuracy {:.3} / {:.3}, average {mid_avg:.3}", mid[0], mid[1]),
            format!("median inversion-generated accuracy {:.3} / {:.3}", generated[0], generated[1]),
        ],
        values: vec![
            ("local_0".into(), local[0]),
            ("local_1".into(), local[1]),
            ("midpoint_0".into(), mid[0]),
            ("midpoint_1".into(), mid[1]),
            ("midpoint_avg".into(), mid_avg),
            ("generated_0".into(), generated[0]),
            ("generated_1".into(), generated[1]),
        ],
        files: vec![("collapse.csv".into(), csv)],
    })
}

/// The scaled non-IID fixture: 10 clients, 4 blob classes, 20% uniform
/// share, 600 training examples each, `mlp-tiny`, 100 diffusion steps.
pub fn scaled_fixture(seed: u64, method: Method) -> ExperimentConfig {
    let mut c = ExperimentConfig {
        seed,
        method,
        rounds: 20,
        n_clients: 10,
        workers: 1,
        ..ExperimentConfig::default()
    };
    c.data.blobs = BlobSpec {
        classes: 4,
        features: 2,
        radius: 1.0,
        noise_std: 0.6,
        per_class: 3000,
    };
    c.partition.s_percent = 20;
    c.partition.samples_per_client = 600;
    c.partition.test_per_client = 200;
    c.diffusion.steps = 100;
    c.diffusion.rescale = true;
    c.diffusion.lr = 1e-3;
    c.diffusion.arch = ArchName::Mlp;
    c.diffusion.width = 256;
    c.diffusion.bootstrap_steps = 2000;
    c.diffusion.train_steps_per_round = 200;
    c.server.window = 5;
    c
}

/// Rounds until `trace` first reaches `target`; `trace.len() + 1` if never.
pub fn rounds_to(trace: &[f64], target: f64) -> usize {
    trace
        .iter()
        .position(|a| *a >= target)
        .map_or(trace.len() + 1, |p| p + 1)
}

#[derive(Debug, Clone)]
pub struct NewClientSeed {
    pub plateau: f64,
    pub guided: Vec<f64>,
    pub unguided: Vec<f64>,
    pub guided_rounds: usize,
    pub unguided_rounds: usize,
}

/// Trajectories of a joining client with and without guided
/// initialization. Both run `horizon` rounds; the guided one continues with
/// plain local updates after its initialization rounds.
pub fn new_client_trajectories(
    cfg: &ExperimentConfig,
    pool: &Pool,
    horizon: usize,
) -> Result<NewClientSeed> {
    let mut cfg = cfg.clone();
    cfg.method = Method::Pfedgpa;
    cfg.guidance.new_clients = 1;
    let report = run_experiment(&cfg, pool, &RunOptions::default())?;
    let server = report.server_model.as_ref().ok_or(genagg_core::Error::NotTrained)?;
    let client = report.newcomers[0].clone();
    new_client_from(server, &client, &cfg, horizon)
}

pub fn new_client_from(
    server: &genagg_core::federated::ServerModel,
    client: &ClientState,
    cfg: &ExperimentConfig,
    horizon: usize,
) -> Result<NewClientSeed> {
    let local = &cfg.local;
    let gcfg = cfg.guidance.core_config();

    let mut plain = client.clone();
    let mut p = client.params.clone();
    let mut unguided = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        p = plain.local_update(&p, local)?;
        unguided.push(plain.evaluate(&p)?.0);
    }
    let tail = 5.min(horizon);
    let plateau = unguided[horizon - tail..].iter().sum::<f64>() / tail as f64;

    let mut guided_client = client.clone();
    let mut stream: Stream = rng::derive(cfg.seed, &[tag::GUIDANCE, client.id as u64]);
    let out = initialize_new_client(server, &mut guided_client, &gcfg, local, &mut stream)?;
    let mut guided: Vec<f64> = out
        .rounds
        .iter()
        .map(|th| client.evaluate(th).map(|e| e.0))
        .collect::<genagg_core::Result<_>>()?;
    let mut q = out.params;
    guided.push(client.evaluate(&q)?.0);
    while guided.len() < horizon {
        q = guided_client.local_update(&q, local)?;
        guided.push(client.evaluate(&q)?.0);
    }
    guided.truncate(horizon);
    let target = 0.95 * plateau;
    Ok(NewClientSeed {
        plateau,
        guided_rounds: rounds_to(&guided, target),
        unguided_rounds: rounds_to(&unguided, target),
        guided,
        unguided,
    })
}

pub fn new_client_report(seeds: &[u64], runs: &[NewClientSeed]) -> DemoReport {
    let g = median(&runs.iter().map(|r| r.guided_rounds as f64).collect::<Vec<_>>());
    let u = median(&runs.iter().map(|r| r.unguided_rounds as f64).collect::<Vec<_>>());
    let ratio = g / u;
    let mut csv = String::from("seed,mode,round,accuracy\n");
    for (s, r) in seeds.iter().zip(runs) {
        for (mode, t) in [("guided", &r.guided), ("unguided", &r.unguided)] {
            for (i, a) in t.iter().enumerate() {
                let _ = writeln!(csv, "{s},{mode},{},{a}", i + 1);
            }
        }
    }
    DemoReport {
        name: "new-client",
        passed: g <= u,
        summary: vec![
            format!("median rounds to 95% of plateau: guided {g}, unguided {u} (ratio {ratio:.3})"),
            format!(
                "median plateau accuracy {:.3}",
                median(&runs.iter().map(|r| r.plateau).collect::<Vec<_>>())
            ),
        ],
        values: vec![
            ("guided_rounds".into(), g),
            ("unguided_rounds".into(), u),
            ("ratio".into(), ratio),
        ],
        files: vec![("new_client.csv".into(), csv)],
    }
}

/// Guided vs unguided initialization of an 11th client on the scaled
/// fixture.
pub fn new_client(seeds: &[u64]) -> Result<DemoReport> {
    let mut runs = Vec::new();
    for &s in seeds {
        let cfg = scaled_fixture(s, Method::Pfedgpa);
        let pool = crate::datasets::load(&cfg.data, s)?;
        runs.push(new_client_trajectories(&cfg, &pool, 30)?);
    }
    Ok(new_client_report(seeds, &runs))
}
