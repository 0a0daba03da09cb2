//! Round orchestration for every method: local-only, FedAvg, FedAvg with
//! fine-tuning, and generative aggregation.
//!
//! Every round, each sampled client receives a dispatched parameter vector,
//! evaluates it (`beforeFT`), runs its local update from it, and evaluates
//! the result (`afterFT`). Methods differ only in what is dispatched:
//!
//! | method      | dispatch                                                   |
//! |-------------|------------------------------------------------------------|
//! | local-only  | the client's own parameters                                |
//! | fedavg(-ft) | the FedAvg aggregate of the previous round                 |
//! | pfedgpa     | FedAvg during warm-up, then the client's generated vector  |
//!
//! Local updates and per-client generation run on a worker pool. Every
//! client, and every (round, client) inversion, draws from its own derived
//! stream, so results are identical for any worker count.

use std::path::PathBuf;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use genagg_core::client::ClientState;
use genagg_core::codec::LayerMask;
use genagg_core::data::partition_non_iid;
use genagg_core::federated::{fedavg_aggregate, sample_clients, Aggregator, ServerModel, ServerState};
use genagg_core::guidance::initialize_new_client;
use genagg_core::model::ModelSpec;
use genagg_core::rng::{self, tag};

use crate::config::{ExperimentConfig, GenerationMode, Method};
use crate::container::ServerCheckpoint;
use crate::datasets::Pool;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Phase {
    #[serde(rename = "beforeFT")]
    BeforeFt,
    #[serde(rename = "afterFT")]
    AfterFt,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::BeforeFt => "beforeFT",
            Phase::AfterFt => "afterFT",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub round: usize,
    pub client_id: usize,
    pub phase: Phase,
    pub accuracy: f64,
    pub loss: f64,
}

/// One evaluation during a joining client's initialization.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InitRow {
    pub client_id: usize,
    /// `guided` or `unguided`.
    pub mode: &'static str,
    pub round: usize,
    pub accuracy: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClientSummary {
    pub client_id: usize,
    pub group: usize,
    pub last_round: usize,
    pub before_ft: f64,
    pub after_ft: f64,
}

#[derive(Debug, Clone)]
pub struct Report {
    pub method: Method,
    pub seed: u64,
    pub rounds: usize,
    pub warmup_rounds: usize,
    pub rows: Vec<MetricRow>,
    pub clients: Vec<ClientSummary>,
    /// Method-specific headline: before-FT for `fedavg`, after-FT otherwise.
    pub final_accuracy: f64,
    pub final_before_ft: f64,
    pub final_after_ft: f64,
    /// Clients whose final before-FT accuracy is below chance + 10 points.
    pub failures_before_ft: usize,
    /// Rounds in which generated parameters were dispatched.
    pub generated_rounds: Vec<usize>,
    pub diffusion_loss: Vec<f64>,
    pub init_rows: Vec<InitRow>,
    /// Generative model after the last training round (generative method).
    pub server_model: Option<ServerModel>,
    /// Held-out clients as they were before joining.
    pub newcomers: Vec<ClientState>,
    pub wall_clock_seconds: f64,
}

impl Report {
    /// `(round, client, phase, accuracy)` for every row.
    pub fn accuracy_trace(&self) -> Vec<(usize, usize, Phase, f64)> {
        self.rows
            .iter()
            .map(|r| (r.round, r.client_id, r.phase, r.accuracy))
            .collect()
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Directory for periodic server checkpoints.
    pub checkpoint_dir: Option<PathBuf>,
}

struct Setup {
    clients: Vec<ClientState>,
    groups: Vec<usize>,
    newcomers: Vec<ClientState>,
    init: Vec<f64>,
}

fn build_clients(cfg: &ExperimentConfig, pool: &Pool) -> Result<Setup> {
    let classes = pool.data.classes();
    let model = ModelSpec::named(&cfg.model.name, pool.image, classes)?;
    let total = cfg.n_clients + cfg.guidance.new_clients;
    let parts = partition_non_iid(
        &pool.data,
        &cfg.partition,
        total,
        &mut rng::derive(cfg.seed, &[tag::DATA, 1]),
    )?;
    let init = model.init(&mut rng::derive(cfg.seed, &[tag::INIT]));
    let mut clients = Vec::with_capacity(cfg.n_clients);
    let mut groups = Vec::with_capacity(cfg.n_clients);
    let mut newcomers = Vec::new();
    for (i, p) in parts.into_iter().enumerate() {
        let stream = rng::derive(cfg.seed, &[tag::CLIENT, i as u64]);
        if i < cfg.n_clients {
            groups.push(p.group);
            clients.push(ClientState::new(i, p.train, p.test, model.clone(), init.clone(), stream)?);
        } else {
            let fresh = model.init(&mut rng::derive(cfg.seed, &[tag::INIT, i as u64]));
            newcomers.push(ClientState::new(i, p.train, p.test, model.clone(), fresh, stream)?);
        }
    }
    Ok(Setup {
        clients,
        groups,
        newcomers,
        init,
    })
}

fn worker_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))
}

struct Outcome {
    before: (f64, f64),
    after: (f64, f64),
    params: Vec<f64>,
}

/// Runs `cfg.rounds` rounds of `cfg.method` on clients partitioned from
/// `pool`.
pub fn run_experiment(cfg: &ExperimentConfig, pool: &Pool, opts: &RunOptions) -> Result<Report> {
    cfg.validate()?;
    let started = Instant::now();
    let workers = worker_pool(cfg.workers)?;
    let Setup {
        mut clients,
        groups,
        newcomers,
        init,
    } = build_clients(cfg, pool)?;
    let n = clients.len();
    let layout = clients[0].layout().clone();
    let mask = LayerMask::from_prefixes(&layout, &cfg.server.generate_layers)?;
    let generated_dim = mask.generated_len(&layout);
    let schedule = cfg.diffusion.schedule()?;
    let mut server = match cfg.method {
        Method::Pfedgpa => Some(ServerState::new(
            cfg.server_config(generated_dim),
            schedule,
            layout,
            mask,
        )?),
        _ => None,
    };
    let aggregator = cfg.server.aggregator;
    let warmup = cfg.server.warmup();
    let mut global = init;
    let mut uploaded = vec![false; n];
    let mut sampling = rng::derive(cfg.seed, &[tag::SAMPLING]);
    let mut server_rng = rng::derive(cfg.seed, &[tag::SERVER]);
    let mut rows = Vec::new();
    let mut generated_rounds = Vec::new();
    let mut last: Vec<Option<(usize, f64, f64)>> = vec![None; n];

    for round in 1..=cfg.rounds {
        let at = |e: genagg_core::Error| Error::Round { round, source: e };
        let selected = sample_clients(&mut sampling, n, cfg.participation).map_err(at)?;
        let mut dispatch: Vec<Vec<f64>> = selected
            .iter()
            .map(|&i| match cfg.method {
                Method::LocalOnly => clients[i].params.clone(),
                _ => global.clone(),
            })
            .collect();

        let generate = cfg.method == Method::Pfedgpa
            && round > warmup
            && (cfg.server.generation == GenerationMode::EveryRound || round == cfg.rounds);
        if generate {
            let server = server.as_ref().expect("pfedgpa has a server");
            let targets: Vec<(usize, usize)> = selected
                .iter()
                .enumerate()
                .filter(|(_, &i)| uploaded[i])
                .map(|(slot, &i)| (slot, i))
                .collect();
            if aggregator == Aggregator::PassThrough {
                for &(slot, i) in &targets {
                    dispatch[slot] = clients[i].params.clone();
                }
                generated_rounds.push(round);
            } else if server.is_trained() {
                let snapshot = server.snapshot().map_err(at)?;
                let clients_ref = &clients;
                let produced: Vec<Result<Vec<f64>>> = workers.install(|| {
                    targets
                        .par_iter()
                        .map(|&(_, i)| {
                            let mut streams = [rng::derive(cfg.seed, &[tag::INVERSION, round as u64, i as u64])];
                            snapshot
                                .personalize(&[clients_ref[i].params.as_slice()], &mut streams)
                                .map(|mut v| v.pop().expect("one upload in, one vector out"))
                                .map_err(at)
                        })
                        .collect()
                });
                for (&(slot, _), p) in targets.iter().zip(produced) {
                    dispatch[slot] = p?;
                }
                generated_rounds.push(round);
            }
        }

        let local = &cfg.local;
        let outcomes: Vec<Result<Outcome>> = workers.install(|| {
            let mut chosen: Vec<&mut ClientState> = Vec::with_capacity(selected.len());
            let mut next = selected.iter().peekable();
            for (i, c) in clients.iter_mut().enumerate() {
                if next.peek() == Some(&&i) {
                    chosen.push(c);
                    next.next();
                }
            }
            chosen
                .into_par_iter()
                .zip(dispatch.par_iter())
                .map(|(c, d)| {
                    let before = c.evaluate(d).map_err(at)?;
                    let params = c.local_update(d, local).map_err(at)?;
                    let after = c.evaluate(&params).map_err(at)?;
                    Ok(Outcome { before, after, params })
                })
                .collect()
        });
        let outcomes = outcomes.into_iter().collect::<Result<Vec<_>>>()?;

        for (&i, o) in selected.iter().zip(&outcomes) {
            for (phase, (acc, loss)) in [(Phase::BeforeFt, o.before), (Phase::AfterFt, o.after)] {
                rows.push(MetricRow {
                    round,
                    client_id: i,
                    phase,
                    accuracy: acc,
                    loss,
                });
            }
            last[i] = Some((round, o.before.0, o.after.0));
        }

        if cfg.method != Method::LocalOnly {
            let params: Vec<&[f64]> = outcomes.iter().map(|o| o.params.as_slice()).collect();
            let weights: Vec<f64> = selected.iter().map(|&i| clients[i].sample_count() as f64).collect();
            global = fedavg_aggregate(&params, &weights).map_err(at)?;
        }

        if let Some(server) = server.as_mut() {
            let ups: Vec<(usize, &[f64])> = selected
                .iter()
                .zip(&outcomes)
                .map(|(&i, o)| (i, o.params.as_slice()))
                .collect();
            server.record_uploads(round, &ups).map_err(at)?;
            for &i in &selected {
                uploaded[i] = true;
            }
            let needed_later = round < cfg.rounds || cfg.guidance.new_clients > 0;
            if aggregator != Aggregator::PassThrough && round >= warmup && needed_later {
                server.train(&mut server_rng).map_err(at)?;
            }
            if let Some(dir) = &opts.checkpoint_dir {
                let every = cfg.output.checkpoint_every;
                if every > 0 && round % every == 0 && server.is_trained() {
                    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                    let ck = ServerCheckpoint::from_server(server, round, cfg.seed)?;
                    ck.to_container(cfg.output.checkpoint_precision)
                        .write(&dir.join(format!("round-{round:04}.ggck")))?;
                }
            }
        }
    }

    let server_model = match &server {
        Some(s) if s.is_trained() => Some(s.snapshot()?),
        _ => None,
    };
    let init_rows = match &server_model {
        Some(m) if !newcomers.is_empty() => initialize_newcomers(cfg, m, newcomers.clone(), &workers)?,
        _ => Vec::new(),
    };

    let chance = 1.0 / pool.data.classes() as f64;
    let clients_summary: Vec<ClientSummary> = last
        .iter()
        .enumerate()
        .filter_map(|(i, l)| {
            l.map(|(round, before, after)| ClientSummary {
                client_id: i,
                group: groups[i],
                last_round: round,
                before_ft: before,
                after_ft: after,
            })
        })
        .collect();
    let mean = |f: fn(&ClientSummary) -> f64| {
        clients_summary.iter().map(f).sum::<f64>() / clients_summary.len().max(1) as f64
    };
    let final_before_ft = mean(|c| c.before_ft);
    let final_after_ft = mean(|c| c.after_ft);
    let final_accuracy = match cfg.method {
        Method::Fedavg => final_before_ft,
        _ => final_after_ft,
    };
    let failures_before_ft = clients_summary
        .iter()
        .filter(|c| c.before_ft < chance + 0.1)
        .count();
    Ok(Report {
        method: cfg.method,
        seed: cfg.seed,
        rounds: cfg.rounds,
        warmup_rounds: warmup,
        rows,
        clients: clients_summary,
        final_accuracy,
        final_before_ft,
        final_after_ft,
        failures_before_ft,
        generated_rounds,
        diffusion_loss: server.map(|s| s.loss_trace).unwrap_or_default(),
        init_rows,
        server_model,
        newcomers,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    })
}

/// Guided initialization of each held-out client next to a plain
/// local-training baseline with the same number of local updates.
fn initialize_newcomers(
    cfg: &ExperimentConfig,
    server: &ServerModel,
    newcomers: Vec<ClientState>,
    workers: &rayon::ThreadPool,
) -> Result<Vec<InitRow>> {
    let gcfg = cfg.guidance.core_config();
    let local = &cfg.local;
    let per_client: Vec<Result<Vec<InitRow>>> = workers.install(|| {
        newcomers
            .into_par_iter()
            .map(|client| {
                let id = client.id;
                let row = |mode, round, (accuracy, loss): (f64, f64)| InitRow {
                    client_id: id,
                    mode,
                    round,
                    accuracy,
                    loss,
                };
                let start = client.params.clone();
                let mut rows = vec![row("guided", 0, client.evaluate(&start)?)];
                let mut guided = client.clone();
                let mut stream = rng::derive(cfg.seed, &[tag::GUIDANCE, id as u64]);
                let out = initialize_new_client(server, &mut guided, &gcfg, local, &mut stream)?;
                for (l, p) in out.rounds.iter().enumerate() {
                    rows.push(row("guided", l + 1, client.evaluate(p)?));
                }
                rows.push(row("guided", out.rounds.len() + 1, client.evaluate(&out.params)?));

                let mut plain = client.clone();
                let mut p = start;
                rows.push(row("unguided", 0, plain.evaluate(&p)?));
                for l in 1..=gcfg.init_rounds + 1 {
                    p = plain.local_update(&p, local)?;
                    rows.push(row("unguided", l, plain.evaluate(&p)?));
                }
                Ok(rows)
            })
            .collect()
    });
    let mut out = Vec::new();
    for r in per_client {
        out.extend(r?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phase_names() {
        assert_eq!(Phase::BeforeFt.as_str(), "beforeFT");
        assert_eq!(Phase::AfterFt.as_str(), "afterFT");
    }
}
