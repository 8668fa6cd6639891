//! Round orchestration.
//!
//! A round selects `m` clients, decides the FedSwitch downlink from the
//! previous round's aggregated KL statistics, runs every selected client
//! from the downlinked snapshot, averages the returned deltas, optionally
//! trains on the server's labeled pool, and finally updates the global
//! teacher. Results are always merged in ascending client-id order, so the
//! outcome does not depend on whether clients ran in parallel.
//!
//! Clients are stateless: everything a client uses arrives in its downlink
//! or is part of its (immutable) shard. The only per-client bookkeeping the
//! server keeps is how many times a client has participated, which selects
//! the streaming segment it sees.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{strong_augment, weak_augment, AugmentConfig, ClientShard, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{
    evaluate, kl_ratio_stats, mean_ratio, record_transmission, CommLedger, Direction, Payload,
    RoundReport, TransmissionLog,
};
use crate::nn::{
    forward_probs, init_params, loss_and_grad, sgd_step, ModelSpec, OptimState, ParamVector,
};
use crate::seed::derive_rng;
use crate::ssl::{
    class_counts, combined_client_grad, KlAccumulator, KlStats, LabeledView, SslHyper,
};
use crate::variants::{
    initial_kl, switch_decide, variant_batch_hook, variant_downlink, variant_post_step_hook,
    variant_server_merge, variant_uplink, Downlink, LocalTeacher, SwitchDecision, VariantConfig,
    VariantKind,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    LabelsAtClient,
    LabelsAtServerSequential,
    LabelsAtServerParallel,
}

impl Topology {
    pub fn labels_at_server(self) -> bool {
        self != Topology::LabelsAtClient
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundPlan {
    pub participation_rate: f64,
    pub local_epochs: usize,
    pub server_epochs: usize,
    pub topology: Topology,
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
    pub server_batch: usize,
    pub client_lr: f64,
    pub server_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl RoundPlan {
    /// `m = max(floor(C K), 1)`.
    pub fn clients_per_round(&self, num_clients: usize) -> usize {
        let m = (self.participation_rate * num_clients as f64 + 1e-9).floor() as usize;
        m.clamp(1, num_clients.max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.participation_rate > 0.0 && self.participation_rate <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "participation rate must be in (0, 1], got {}",
                self.participation_rate
            )));
        }
        if self.labeled_batch == 0 || self.unlabeled_batch == 0 || self.server_batch == 0 {
            return Err(Error::InvalidArgument("batch sizes must be >= 1".into()));
        }
        // Surfaces lr / momentum / weight-decay errors up front.
        OptimState::new(1, self.client_lr, self.momentum, self.weight_decay)?;
        OptimState::new(1, self.server_lr, self.momentum, self.weight_decay)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub global_student: ParamVector,
    pub global_teacher: Option<ParamVector>,
    pub round: usize,
    pub last_kl: KlStats,
    pub server_labeled_pool: Option<Dataset>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdateResult {
    pub client_id: usize,
    pub delta: ParamVector,
    pub teacher_delta: Option<ParamVector>,
    pub kl: KlStats,
    /// Teacher KL was measured on the student's weak view (no teacher present).
    pub teacher_kl_fallback: bool,
    pub num_examples: usize,
    /// Models sent back to the server, in transmission order.
    pub uploads: Vec<Payload>,
    /// Argmax histogram of the pseudo-label source over every unlabeled
    /// example processed. Simulator-side diagnostic, never transmitted.
    pub pseudo_counts: Vec<usize>,
    /// True-label histogram of the same examples. Simulator-side diagnostic.
    pub true_counts: Vec<usize>,
    pub confident: usize,
    pub processed: usize,
}

/// Read-only inputs shared by every client in a run.
#[derive(Debug, Clone, Copy)]
pub struct ClientContext<'a> {
    pub spec: &'a ModelSpec,
    pub train: &'a Dataset,
    pub variant: &'a VariantConfig,
    pub plan: &'a RoundPlan,
    pub hyper: &'a SslHyper,
    pub augment: &'a AugmentConfig,
}

/// Uniform sample of `m` distinct clients for `round`, sorted by id.
pub fn select_clients(num_clients: usize, m: usize, round: usize, seed: u64) -> Result<Vec<usize>> {
    if m == 0 || m > num_clients {
        return Err(Error::InvalidArgument(format!(
            "cannot select {m} of {num_clients} clients"
        )));
    }
    let mut rng = derive_rng(seed, "select", &[round as u64]);
    let mut ids = index::sample(&mut rng, num_clients, m).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

fn with_context(round: usize, client: usize, batch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(what) => Error::NonFinite(format!(
            "{what} (round {round}, client {client}, batch {batch})"
        )),
        other => other,
    }
}

/// Local training on one client, starting from the downlinked snapshot.
pub fn client_update(
    ctx: &ClientContext<'_>,
    shard: &ClientShard,
    participation: usize,
    downlink: &Downlink,
    round: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ClientUpdateResult> {
    let spec = ctx.spec;
    let num_classes = spec.num_classes;
    let snapshot = &downlink.student;
    let mut student = snapshot.clone();
    let mut local_teacher = downlink.teacher.clone().map(LocalTeacher::new);
    let mut opt = OptimState::new(
        student.len(),
        ctx.plan.client_lr,
        ctx.plan.momentum,
        ctx.plan.weight_decay,
    )?;

    let visible = shard.visible_unlabeled(participation);
    let use_labels = ctx.plan.topology == Topology::LabelsAtClient && !shard.labeled_idx.is_empty();
    let mut labeled_order = shard.labeled_idx.clone();
    let mut labeled_cursor = 0;

    let mut kl = KlAccumulator::default();
    let mut teacher_kl_fallback = false;
    let mut pseudo_counts = vec![0; num_classes];
    let mut true_counts = vec![0; num_classes];
    let mut confident = 0;
    let mut processed = 0;
    let mut batch_no = 0;

    for _ in 0..ctx.plan.local_epochs {
        let mut order = visible.to_vec();
        order.shuffle(rng);
        if use_labels {
            labeled_order.shuffle(rng);
            labeled_cursor = 0;
        }
        for chunk in order.chunks(ctx.plan.unlabeled_batch) {
            let ctx_err = with_context(round, shard.client_id, batch_no);
            let u = ctx.train.inputs().select_rows(chunk);
            let weak = weak_augment(&u, ctx.augment, rng);
            let strong = strong_augment(&u, ctx.augment, rng);

            let labeled = if use_labels {
                let idx: Vec<usize> = (0..ctx.plan.labeled_batch)
                    .map(|k| labeled_order[(labeled_cursor + k) % labeled_order.len()])
                    .collect();
                labeled_cursor = (labeled_cursor + ctx.plan.labeled_batch) % labeled_order.len();
                let x = weak_augment(&ctx.train.inputs().select_rows(&idx), ctx.augment, rng);
                let y: Vec<usize> = idx.iter().map(|&i| ctx.train.labels()[i]).collect();
                Some((x, y))
            } else {
                None
            };

            let student_weak = forward_probs(&student, spec, &weak)?;
            let teacher_weak = local_teacher
                .as_ref()
                .map(|t| forward_probs(&t.params, spec, &weak))
                .transpose()?;
            let pseudo = variant_batch_hook(
                ctx.variant.kind,
                local_teacher.as_ref(),
                teacher_weak.as_ref(),
                &student_weak,
                ctx.hyper,
            )?;

            let student_strong = forward_probs(&student, spec, &strong)?;
            let teacher_view = match &teacher_weak {
                Some(t) => t,
                None => {
                    teacher_kl_fallback = true;
                    &student_weak
                }
            };
            kl.push(teacher_view, &student_strong)?;

            let source_probs = teacher_weak
                .as_ref()
                .filter(|_| pseudo.source == crate::ssl::LabelSource::Teacher)
                .unwrap_or(&student_weak);
            for (p, c) in pseudo_counts.iter_mut().zip(class_counts(source_probs)) {
                *p += c;
            }
            for &i in chunk {
                true_counts[ctx.train.labels()[i]] += 1;
            }
            confident += pseudo.num_confident();
            processed += chunk.len();

            let (_, grad) = combined_client_grad(
                &student,
                snapshot,
                spec,
                labeled.as_ref().map(|(x, y)| LabeledView {
                    inputs: x,
                    labels: y,
                }),
                &strong,
                &pseudo,
                ctx.hyper,
            )
            .map_err(&ctx_err)?;
            student = sgd_step(&student, &grad, &mut opt)?;
            if !student.is_finite() {
                return Err(ctx_err(Error::NonFinite("client parameters".into())));
            }
            variant_post_step_hook(ctx.variant, local_teacher.as_mut(), &student)?;
            batch_no += 1;
        }
    }

    let kl = if batch_no == 0 {
        KlStats {
            dkl_teacher: 0.0,
            dkl_student: 0.0,
            num_batches: 0,
            sum_teacher: 0.0,
            sum_student: 0.0,
        }
    } else {
        kl.finish()?
    };
    let delta = student.sub(snapshot)?;
    let uplink = variant_uplink(
        ctx.variant.kind,
        delta,
        local_teacher.as_ref(),
        downlink.teacher.as_ref(),
    )?;
    let mut uploads = vec![Payload::Student];
    if uplink.teacher_delta.is_some() {
        uploads.push(Payload::Teacher);
    }
    Ok(ClientUpdateResult {
        client_id: shard.client_id,
        delta: uplink.student_delta,
        teacher_delta: uplink.teacher_delta,
        kl,
        teacher_kl_fallback,
        num_examples: visible.len()
            + if use_labels {
                shard.labeled_idx.len()
            } else {
                0
            },
        uploads,
        pseudo_counts,
        true_counts,
        confident,
        processed,
    })
}

/// `base + mean(deltas)`, summing in the given order.
pub fn aggregate(base: &ParamVector, deltas: &[&ParamVector]) -> Result<ParamVector> {
    let Some(first) = deltas.first() else {
        return Err(Error::InvalidArgument(
            "no client results to aggregate".into(),
        ));
    };
    let mut sum = (*first).clone();
    for d in &deltas[1..] {
        sum.axpy(1.0, d)?;
    }
    sum.scale(1.0 / deltas.len() as f64);
    base.add(&sum)
}

/// Mean of the deltas (used for uploaded teacher deltas).
pub fn mean_delta(deltas: &[&ParamVector]) -> Result<ParamVector> {
    let Some(first) = deltas.first() else {
        return Err(Error::InvalidArgument("no deltas to average".into()));
    };
    let mut sum = (*first).clone();
    for d in &deltas[1..] {
        sum.axpy(1.0, d)?;
    }
    sum.scale(1.0 / deltas.len() as f64);
    Ok(sum)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ServerTraining {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Supervised epochs over the server's labeled pool.
pub fn server_update<R: Rng + ?Sized>(
    params: &ParamVector,
    spec: &ModelSpec,
    pool: &Dataset,
    cfg: &ServerTraining,
    rng: &mut R,
) -> Result<ParamVector> {
    if pool.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.batch == 0 {
        return Err(Error::InvalidArgument(
            "server batch size must be >= 1".into(),
        ));
    }
    let mut opt = OptimState::new(params.len(), cfg.lr, cfg.momentum, cfg.weight_decay)?;
    let mut theta = params.clone();
    let mut order: Vec<usize> = (0..pool.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch) {
            let x = pool.inputs().select_rows(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| pool.labels()[i]).collect();
            let (_, g) = loss_and_grad(&theta, spec, &x, &y, &vec![1.0; y.len()])?;
            theta = sgd_step(&theta, &g, &mut opt)?;
        }
    }
    if !theta.is_finite() {
        return Err(Error::NonFinite("server update parameters".into()));
    }
    Ok(theta)
}

/// Independent randomness for each concern of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimSeeds {
    pub init: u64,
    pub select: u64,
    pub client: u64,
    pub server: u64,
}

#[derive(Debug, Clone)]
pub struct SimulationSetup {
    pub spec: ModelSpec,
    pub train: Dataset,
    pub test: Dataset,
    pub shards: Vec<ClientShard>,
    pub server_pool: Option<Dataset>,
    pub variant: VariantConfig,
    pub plan: RoundPlan,
    pub hyper: SslHyper,
    pub augment: AugmentConfig,
    pub bytes_per_param: usize,
    pub seeds: SimSeeds,
}

pub struct Simulation {
    setup: SimulationSetup,
    state: ServerState,
    participations: Vec<usize>,
    log: TransmissionLog,
    decisions: Vec<SwitchDecision>,
}

impl Simulation {
    pub fn new(setup: SimulationSetup) -> Result<Self> {
        setup.spec.validate()?;
        setup.plan.validate()?;
        setup.hyper.validate()?;
        setup.augment.validate()?;
        setup.variant.validate()?;
        if setup.shards.is_empty() {
            return Err(Error::InvalidArgument("no clients".into()));
        }
        if setup.train.dim() != setup.spec.input_dim || setup.test.dim() != setup.spec.input_dim {
            return Err(Error::Shape {
                context: "dataset features vs model input",
                expected: setup.spec.input_dim,
                actual: setup.train.dim(),
            });
        }
        if setup.plan.topology.labels_at_server() && setup.server_pool.is_none() {
            return Err(Error::InvalidArgument(
                "labels-at-server topology needs a server labeled pool".into(),
            ));
        }
        for (k, shard) in setup.shards.iter().enumerate() {
            if shard.client_id != k {
                return Err(Error::InvalidArgument(format!(
                    "shard {k} carries client id {}",
                    shard.client_id
                )));
            }
        }
        let student = init_params(&setup.spec, setup.seeds.init)?;
        let teacher = setup.variant.kind.has_teacher().then(|| student.clone());
        let state = ServerState {
            global_student: student,
            global_teacher: teacher,
            round: 0,
            last_kl: initial_kl(setup.variant.iidness_prior),
            server_labeled_pool: setup.server_pool.clone(),
        };
        Ok(Simulation {
            participations: vec![0; setup.shards.len()],
            log: TransmissionLog::new(setup.bytes_per_param),
            decisions: Vec::new(),
            setup,
            state,
        })
    }

    pub fn state(&self) -> &ServerState {
        &self.state
    }

    pub fn setup(&self) -> &SimulationSetup {
        &self.setup
    }

    pub fn log(&self) -> &TransmissionLog {
        &self.log
    }

    pub fn switch_decisions(&self) -> &[SwitchDecision] {
        &self.decisions
    }

    pub fn client_context(&self) -> ClientContext<'_> {
        ClientContext {
            spec: &self.setup.spec,
            train: &self.setup.train,
            variant: &self.setup.variant,
            plan: &self.setup.plan,
            hyper: &self.setup.hyper,
            augment: &self.setup.augment,
        }
    }

    /// RNG stream for `client` in `round`.
    pub fn client_rng(&self, round: usize, client: usize) -> ChaCha8Rng {
        derive_rng(
            self.setup.seeds.client,
            "client",
            &[round as u64, client as u64],
        )
    }

    fn server_training(&self) -> ServerTraining {
        ServerTraining {
            epochs: self.setup.plan.server_epochs,
            batch: self.setup.plan.server_batch,
            lr: self.setup.plan.server_lr,
            momentum: self.setup.plan.momentum,
            weight_decay: self.setup.plan.weight_decay,
        }
    }

    pub fn run_round(&mut self) -> Result<RoundReport> {
        let round = self.state.round;
        let kind = self.setup.variant.kind;
        let num_params = self.state.global_student.len();
        let k = self.setup.shards.len();
        let m = self.setup.plan.clients_per_round(k);
        let selected = select_clients(k, m, round, self.setup.seeds.select)?;

        let decision = (kind == VariantKind::Fedswitch)
            .then(|| switch_decide(&self.state.last_kl, self.setup.variant.iidness_prior, round));
        if let Some(d) = decision {
            self.decisions.push(d);
        }
        let downlink = variant_downlink(
            kind,
            &self.state.global_student,
            self.state.global_teacher.as_ref(),
            decision.as_ref(),
        )?;
        for &c in &selected {
            record_transmission(
                &mut self.log,
                round,
                Direction::Downlink,
                Payload::Student,
                c,
                num_params,
            );
            if downlink.teacher.is_some() {
                record_transmission(
                    &mut self.log,
                    round,
                    Direction::Downlink,
                    Payload::Teacher,
                    c,
                    num_params,
                );
            }
        }

        let ctx = self.client_context();
        let results: Vec<ClientUpdateResult> = selected
            .par_iter()
            .map(|&c| {
                let mut rng = self.client_rng(round, c);
                client_update(
                    &ctx,
                    &self.setup.shards[c],
                    self.participations[c],
                    &downlink,
                    round,
                    &mut rng,
                )
            })
            .collect::<Result<_>>()?;

        for r in &results {
            for &payload in &r.uploads {
                record_transmission(
                    &mut self.log,
                    round,
                    Direction::Uplink,
                    payload,
                    r.client_id,
                    num_params,
                );
            }
            record_transmission(
                &mut self.log,
                round,
                Direction::Uplink,
                Payload::KlScalars,
                r.client_id,
                2,
            );
        }

        let deltas: Vec<&ParamVector> = results.iter().map(|r| &r.delta).collect();
        let client_avg = aggregate(&self.state.global_student, &deltas)?;
        let new_student = match self.setup.plan.topology {
            Topology::LabelsAtClient => client_avg,
            Topology::LabelsAtServerSequential => {
                let pool = self.pool()?;
                let mut rng = derive_rng(self.setup.seeds.server, "server", &[round as u64]);
                server_update(
                    &client_avg,
                    &self.setup.spec,
                    pool,
                    &self.server_training(),
                    &mut rng,
                )?
            }
            Topology::LabelsAtServerParallel => {
                let pool = self.pool()?;
                let mut rng = derive_rng(self.setup.seeds.server, "server", &[round as u64]);
                let server_params = server_update(
                    &self.state.global_student,
                    &self.setup.spec,
                    pool,
                    &self.server_training(),
                    &mut rng,
                )?;
                let n_clients: usize = results.iter().map(|r| r.num_examples).sum();
                parallel_merge(&server_params, pool.len(), &client_avg, n_clients)?
            }
        };

        let teacher_deltas: Vec<&ParamVector> = results
            .iter()
            .filter_map(|r| r.teacher_delta.as_ref())
            .collect();
        let mean_teacher_delta = if teacher_deltas.is_empty() {
            None
        } else {
            Some(mean_delta(&teacher_deltas)?)
        };
        let new_teacher = variant_server_merge(
            &self.setup.variant,
            self.state.global_teacher.as_ref(),
            &new_student,
            mean_teacher_delta.as_ref(),
        )?;

        let kls: Vec<KlStats> = results.iter().map(|r| r.kl).collect();
        let round_kl = KlStats::average(&kls)?;

        let ratio_stats = kl_ratio_stats(
            &selected,
            &results
                .iter()
                .map(|r| r.pseudo_counts.clone())
                .collect::<Vec<_>>(),
            &results
                .iter()
                .map(|r| r.true_counts.clone())
                .collect::<Vec<_>>(),
        )?;
        let processed: usize = results.iter().map(|r| r.processed).sum();
        let confident: usize = results.iter().map(|r| r.confident).sum();

        self.state.global_student = new_student;
        self.state.global_teacher = new_teacher;
        self.state.last_kl = round_kl;
        for &c in &selected {
            self.participations[c] += 1;
        }

        let acc_student = evaluate(
            &self.state.global_student,
            &self.setup.spec,
            &self.setup.test,
        )?;
        let acc_teacher = self
            .state
            .global_teacher
            .as_ref()
            .map(|t| evaluate(t, &self.setup.spec, &self.setup.test))
            .transpose()?;

        let ledger_delta = CommLedger::from_log(&self.log).round(round);
        self.state.round += 1;
        Ok(RoundReport {
            round,
            eval_accuracy_student: acc_student,
            eval_accuracy_teacher: acc_teacher,
            dkl_teacher: round_kl.dkl_teacher,
            dkl_student: round_kl.dkl_student,
            dkl_teacher_sum: round_kl.sum_teacher,
            dkl_student_sum: round_kl.sum_student,
            teacher_kl_fallbacks: results.iter().filter(|r| r.teacher_kl_fallback).count(),
            send_teacher: decision.map(|d| d.send_teacher),
            clients: selected,
            ledger_delta,
            kl_ratio: mean_ratio(&ratio_stats),
            mask_rate: if processed == 0 {
                0.0
            } else {
                confident as f64 / processed as f64
            },
        })
    }

    pub fn run(&mut self, rounds: usize) -> Result<Vec<RoundReport>> {
        (0..rounds).map(|_| self.run_round()).collect()
    }

    fn pool(&self) -> Result<&Dataset> {
        self.state
            .server_labeled_pool
            .as_ref()
            .ok_or(Error::EmptyDataset)
    }
}

/// Convex merge for the parallel labels-at-server topology:
/// `w θ_server + (1 - w) θ_clients` with `w = n_s / (n_s + n_clients)`.
pub fn parallel_merge(
    server_params: &ParamVector,
    server_examples: usize,
    client_avg: &ParamVector,
    client_examples: usize,
) -> Result<ParamVector> {
    let total = server_examples + client_examples;
    if total == 0 {
        return Err(Error::InvalidArgument(
            "parallel merge over zero examples".into(),
        ));
    }
    let w = server_examples as f64 / total as f64;
    let mut out = server_params.clone();
    out.scale(w);
    out.axpy(1.0 - w, client_avg)?;
    Ok(out)
}
