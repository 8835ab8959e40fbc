//! Round-driven simulation of prefetch-enabled federated training.
//!
//! Each round runs the prepare phase for a future cohort, the train phase for
//! the cohort due now, aggregation, and then lets every prefetching client
//! download in the background for as long as the round lasted.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::compress::{decompress, CompressedUpdate, CompressorConfig};
use crate::model::{weighted_sum, ParamVector, RngStream, SERVER};
use crate::sampling::{presample, replace_offline, ClientRegistry, RoundPlan};
use crate::scheduler::{est_fetch_time, fixed_window, schedule_prefetch, DurationEstimator};
use crate::store::ServerStore;
use crate::workload::{accuracy, local_train, AvailabilityTrace, SynthTask};
use crate::{ClientId, Error, Result, Round};

/// Static description of one client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientProfile {
    pub id: ClientId,
    /// Download bandwidth in bytes/s.
    pub bw_dl: f64,
    /// Upload bandwidth in bytes/s.
    pub bw_ul: f64,
    /// Seconds of local computation per round.
    pub compute_s: f64,
    /// Aggregation weight, used with [`Weighting::Proportional`].
    pub weight: f64,
}

impl ClientProfile {
    pub fn validate(&self) -> Result<()> {
        if !(self.bw_dl > 0.0 && self.bw_dl.is_finite() && self.bw_ul > 0.0 && self.bw_ul.is_finite()) {
            return Err(Error::config("bandwidth", format!("client {}: rates must be positive", self.id)));
        }
        if !(self.compute_s >= 0.0 && self.compute_s.is_finite()) {
            return Err(Error::config("compute", format!("client {}: negative compute time", self.id)));
        }
        if !(self.weight >= 0.0 && self.weight.is_finite()) {
            return Err(Error::config("weight", format!("client {}: negative weight", self.id)));
        }
        Ok(())
    }
}

macro_rules! string_serde {
    ($t:ty) => {
        impl TryFrom<String> for $t {
            type Error = Error;
            fn try_from(s: String) -> Result<Self> {
                s.parse()
            }
        }

        impl From<$t> for String {
            fn from(v: $t) -> String {
                v.to_string()
            }
        }
    };
}

/// How prefetch start rounds are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum SchedulerMode {
    /// Per-client start rounds from the fetch-time estimator.
    FedFetch,
    /// Every client starts the given number of rounds before training.
    Fixed(u64),
    /// No presampling: the cohort is drawn and fetches in its train round.
    None,
}

impl fmt::Display for SchedulerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SchedulerMode::FedFetch => write!(f, "fedfetch"),
            SchedulerMode::Fixed(k) => write!(f, "fixed:{k}"),
            SchedulerMode::None => write!(f, "none"),
        }
    }
}

impl FromStr for SchedulerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "fedfetch" => Ok(SchedulerMode::FedFetch),
            "none" => Ok(SchedulerMode::None),
            other => other
                .strip_prefix("fixed:")
                .and_then(|k| k.parse().ok())
                .map(SchedulerMode::Fixed)
                .ok_or_else(|| Error::config("scheduler", format!("unknown scheduler `{other}`"))),
        }
    }
}

string_serde!(SchedulerMode);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum AvailabilityMode {
    /// Every client is always online.
    Full,
    /// Offline clients miss their round.
    Trace,
    /// Offline cohort members are replaced before their round.
    TraceReplace,
}

impl fmt::Display for AvailabilityMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AvailabilityMode::Full => "full",
            AvailabilityMode::Trace => "trace",
            AvailabilityMode::TraceReplace => "trace+replace",
        })
    }
}

impl FromStr for AvailabilityMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "full" => Ok(AvailabilityMode::Full),
            "trace" => Ok(AvailabilityMode::Trace),
            "trace+replace" => Ok(AvailabilityMode::TraceReplace),
            other => Err(Error::config("availability", format!("unknown mode `{other}`"))),
        }
    }
}

string_serde!(AvailabilityMode);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    #[default]
    Uniform,
    /// Proportional to [`ClientProfile::weight`].
    Proportional,
}

/// Protocol parameters of one simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub clients_per_round: usize,
    pub over_commitment: f64,
    pub prefetch_rounds: u64,
    pub beta: f64,
    pub alpha: f64,
    pub scheduler: SchedulerMode,
    pub availability: AvailabilityMode,
    pub downlink: CompressorConfig,
    pub uplink: CompressorConfig,
    pub weighting: Weighting,
    pub seed: u64,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clients_per_round == 0 {
            return Err(Error::config("clients_per_round", "must be >= 1"));
        }
        if !(self.over_commitment >= 1.0 && self.over_commitment.is_finite()) {
            return Err(Error::config("over_commitment", "must be >= 1"));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::config("beta", "must be >= 0"));
        }
        DurationEstimator::new(self.alpha)?;
        self.downlink.validate()?;
        self.uplink.validate()?;
        Ok(())
    }

    /// Rounds between presampling and training.
    pub fn lookahead(&self) -> u64 {
        match self.scheduler {
            SchedulerMode::None => 0,
            _ => self.prefetch_rounds,
        }
    }
}

/// A downstream transfer: a dense model or an accumulated update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Item {
    Base(Round),
    Delta { from: Round, to: Round },
}

impl Item {
    /// Round whose model the client holds once the item is applied.
    pub fn target(&self) -> Round {
        match *self {
            Item::Base(r) => r,
            Item::Delta { to, .. } => to + 1,
        }
    }
}

#[derive(Debug, Clone)]
enum Content {
    Model(ParamVector),
    Update(CompressedUpdate),
}

#[derive(Debug, Clone)]
struct Download {
    item: Item,
    bytes: u64,
    remaining: u64,
    content: Content,
}

/// A client's local copy of the server model and its download queue.
#[derive(Debug, Clone, Default)]
pub struct ClientSync {
    local: Option<ParamVector>,
    synced: Option<Round>,
    queue: VecDeque<Download>,
    moved: u64,
    settled: u64,
}

impl ClientSync {
    pub fn local(&self) -> Option<&ParamVector> {
        self.local.as_ref()
    }

    /// Round whose model the client holds, if any.
    pub fn synced(&self) -> Option<Round> {
        self.synced
    }

    /// Round the client will hold once its queue drains.
    pub fn target(&self) -> Option<Round> {
        self.queue.back().map(|d| d.item.target()).or(self.synced)
    }

    pub fn pending_bytes(&self) -> u64 {
        self.queue.iter().map(|d| d.remaining).sum()
    }

    pub fn queued(&self) -> Vec<(Item, u64)> {
        self.queue.iter().map(|d| (d.item, d.remaining)).collect()
    }

    /// Bytes moved so far, and bytes accounted to completed or abandoned
    /// items. The two agree whenever the queue is empty.
    pub fn ledger(&self) -> (u64, u64) {
        (self.moved, self.settled)
    }

    fn push_base(&mut self, store: &ServerStore, round: Round) -> Result<()> {
        let (model, bytes) = store.combined_base(round)?;
        self.queue.push_back(Download {
            item: Item::Base(round),
            bytes,
            remaining: bytes,
            content: Content::Model(model),
        });
        Ok(())
    }

    /// Queues whatever brings the client to the model of round `avail`:
    /// the dense model on first contact, otherwise the accumulated update,
    /// unless that is larger than the dense model.
    fn enqueue_catch_up(&mut self, store: &mut ServerStore, avail: Round) -> Result<()> {
        match self.target() {
            None => self.push_base(store, avail),
            Some(s) if s < avail => {
                let cu = store.accumulated(s, avail - 1)?;
                let bytes = cu.wire_size();
                if bytes > store.base_model_size() {
                    self.push_base(store, avail)
                } else {
                    store.record_served(&cu);
                    self.queue.push_back(Download {
                        item: Item::Delta { from: s, to: avail - 1 },
                        bytes,
                        remaining: bytes,
                        content: Content::Update(cu),
                    });
                    Ok(())
                }
            }
            Some(_) => Ok(()),
        }
    }

    fn complete_front(&mut self) -> Result<()> {
        let d = self.queue.pop_front().expect("queue is non-empty");
        debug_assert_eq!(d.remaining, 0);
        self.settled += d.bytes;
        match d.content {
            Content::Model(m) => self.local = Some(m),
            Content::Update(cu) => {
                let local = self.local.as_mut().ok_or(Error::Empty("local model before delta"))?;
                local.axpy_in_place(1.0, &decompress(&cu, cu.dim())?)?;
            }
        }
        self.synced = Some(d.item.target());
        Ok(())
    }

    /// Downloads greedily with `budget` bytes while the model of round
    /// `avail` is the newest one published. Returns bytes moved.
    pub fn advance(&mut self, budget: u64, store: &mut ServerStore, avail: Round) -> Result<u64> {
        let mut moved = 0;
        loop {
            if self.queue.is_empty() {
                if moved == budget {
                    break;
                }
                self.enqueue_catch_up(store, avail)?;
                if self.queue.is_empty() {
                    break;
                }
            }
            let front = self.queue.front_mut().expect("queue is non-empty");
            let take = front.remaining.min(budget - moved);
            front.remaining -= take;
            moved += take;
            if front.remaining > 0 {
                break;
            }
            self.complete_front()?;
        }
        self.moved += moved;
        Ok(moved)
    }

    /// Completes the queue and catches up to round `round`, or drops the
    /// queue for a fresh dense model when that is cheaper. Returns bytes
    /// moved.
    pub fn train_fetch(&mut self, store: &mut ServerStore, round: Round) -> Result<u64> {
        let base = store.base_model_size();
        let cost = match self.target() {
            None => None,
            Some(s) if s < round => Some(self.pending_bytes() + store.accumulated(s, round - 1)?.wire_size()),
            Some(_) => Some(self.pending_bytes()),
        };
        if cost.is_none_or(|c| c > base) {
            let abandoned: u64 = self.queue.drain(..).map(|d| d.bytes - d.remaining).sum();
            self.settled += abandoned;
            self.push_base(store, round)?;
        } else {
            self.enqueue_catch_up(store, round)?;
        }
        self.advance(u64::MAX, store, round)
    }
}

/// One cohort member's slot.
#[derive(Debug, Clone)]
pub struct Slot {
    pub client: ClientId,
    pub start: Round,
    pub replacement: bool,
    /// Fetch time predicted when the slot was scheduled.
    pub estimate: Option<f64>,
    pub sync: ClientSync,
}

#[derive(Debug, Clone)]
struct ActivePlan {
    plan: RoundPlan,
    slots: Vec<Slot>,
}

/// Outcome of one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: Round,
    pub start_time: f64,
    pub duration: f64,
    pub fetch_time: f64,
    pub compute_time: f64,
    pub upload_time: f64,
    pub fetch_bytes: u64,
    pub prefetch_bytes: u64,
    pub upload_bytes: u64,
    pub participants: usize,
    pub aggregated: Vec<ClientId>,
    pub dropped: Vec<ClientId>,
    pub replaced: usize,
    pub degraded: bool,
    pub accuracy: Option<f64>,
    /// Largest scheduled fetch-time estimate over the aggregated clients,
    /// when all of them had one.
    pub estimated_fetch_time: Option<f64>,
    /// Largest relative deviation of a participant's synced model from the
    /// server model it should hold.
    pub sync_error: f64,
}

impl RoundReport {
    pub fn total_bytes(&self) -> u64 {
        self.fetch_bytes + self.prefetch_bytes + self.upload_bytes
    }
}

/// Cumulative fetch time, training time, fetch volume and transmission
/// volume.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rounds: usize,
    pub fetch_time: f64,
    pub compute_time: f64,
    pub upload_time: f64,
    pub total_time: f64,
    pub fetch_volume: u64,
    pub prefetch_volume: u64,
    pub upload_volume: u64,
    pub total_volume: u64,
}

pub fn finalize_metrics(history: &[RoundReport]) -> Result<Metrics> {
    if history.is_empty() {
        return Err(Error::Empty("round history"));
    }
    let mut m = Metrics::default();
    for r in history {
        m.rounds += 1;
        m.fetch_time += r.fetch_time;
        m.compute_time += r.compute_time;
        m.upload_time += r.upload_time;
        m.total_time += r.duration;
        m.fetch_volume += r.fetch_bytes;
        m.prefetch_volume += r.prefetch_bytes;
        m.upload_volume += r.upload_bytes;
    }
    m.total_volume = m.fetch_volume + m.prefetch_volume + m.upload_volume;
    Ok(m)
}

/// Shared inputs of a simulation.
#[derive(Debug, Clone)]
pub struct World {
    pub registry: ClientRegistry,
    pub task: Arc<SynthTask>,
    pub availability: Option<Arc<AvailabilityTrace>>,
}

pub struct Simulation {
    cfg: SimConfig,
    world: World,
    store: ServerStore,
    estimator: DurationEstimator,
    plans: BTreeMap<Round, ActivePlan>,
    round: Round,
    clock: f64,
    root: RngStream,
    evaluate: bool,
}

impl Simulation {
    pub fn new(cfg: SimConfig, world: World) -> Result<Self> {
        cfg.validate()?;
        if world.registry.len() != world.task.clients.len() {
            return Err(Error::config(
                "clients",
                format!("{} profiles for {} datasets", world.registry.len(), world.task.clients.len()),
            ));
        }
        if cfg.availability != AvailabilityMode::Full && world.availability.is_none() {
            return Err(Error::config("availability", "trace mode without a trace"));
        }
        let shape = world.task.config.shape();
        let store = ServerStore::new(
            ParamVector::zeros(shape.dim()),
            shape,
            cfg.downlink,
            1,
            cfg.lookahead() + 2,
        )?;
        Ok(Self {
            estimator: DurationEstimator::new(cfg.alpha)?,
            root: RngStream::new(cfg.seed),
            cfg,
            world,
            store,
            plans: BTreeMap::new(),
            round: 1,
            clock: 0.0,
            evaluate: true,
        })
    }

    /// Skip test-set evaluation (reports carry no accuracy).
    pub fn without_evaluation(mut self) -> Self {
        self.evaluate = false;
        self
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ServerStore {
        &self.store
    }

    pub fn estimator(&self) -> &DurationEstimator {
        &self.estimator
    }

    /// Next round to run.
    pub fn round(&self) -> Round {
        self.round
    }

    pub fn clock(&self) -> f64 {
        self.clock
    }

    /// Slots of the cohort due in `train_round`, if it is planned.
    pub fn slots(&self, train_round: Round) -> Option<&[Slot]> {
        self.plans.get(&train_round).map(|p| p.slots.as_slice())
    }

    fn online(&self) -> BTreeSet<ClientId> {
        let all = 0..self.world.registry.len();
        match (&self.world.availability, self.cfg.availability) {
            (Some(trace), AvailabilityMode::Trace | AvailabilityMode::TraceReplace) => {
                all.filter(|&c| trace.online_at(c, self.clock)).collect()
            }
            _ => all.collect(),
        }
    }

    fn plan_round(&mut self, train_round: Round, online: &BTreeSet<ClientId>) {
        let t = self.round;
        let plan = presample(
            online,
            self.cfg.clients_per_round,
            self.cfg.over_commitment,
            train_round,
            &self.root.fork(train_round, SERVER, "presample"),
        );
        let starts: BTreeMap<ClientId, Round> = if train_round == t {
            plan.cohort.iter().map(|&c| (c, t)).collect()
        } else {
            match (self.cfg.scheduler, self.estimator.estimate()) {
                (SchedulerMode::Fixed(k), _) => fixed_window(&plan.cohort, t, train_round, k).starts,
                (_, None) => plan.cohort.iter().map(|&c| (c, t)).collect(),
                (_, Some(d_avg)) => {
                    let cohort: Vec<(ClientId, f64)> = plan
                        .cohort
                        .iter()
                        .map(|&c| (c, self.world.registry.get(c).bw_dl))
                        .collect();
                    schedule_prefetch(
                        &cohort,
                        t,
                        train_round,
                        d_avg,
                        self.store.profiler(),
                        self.store.base_model_size() as f64,
                        self.cfg.beta,
                        self.cfg.over_commitment,
                    )
                    .starts
                }
            }
        };
        let d_avg = self.estimator.estimate();
        let base = self.store.base_model_size() as f64;
        let slots = plan
            .cohort
            .iter()
            .map(|&c| Slot {
                client: c,
                start: starts[&c],
                replacement: false,
                estimate: d_avg.map(|d| {
                    let bw = self.world.registry.get(c).bw_dl;
                    est_fetch_time(bw, starts[&c], train_round, d, self.store.profiler(), base)
                }),
                sync: ClientSync::default(),
            })
            .collect();
        self.plans.insert(train_round, ActivePlan { plan, slots });
    }

    fn replace_offline_members(&mut self, online: &BTreeSet<ClientId>) -> usize {
        let t = self.round;
        let mut replaced = 0;
        for (&train_round, active) in self.plans.iter_mut() {
            let rng = self.root.fork(train_round, t, "replace");
            let before = active.plan.cohort.clone();
            let reps = replace_offline(&mut active.plan, online, &rng);
            if reps.is_empty() {
                continue;
            }
            replaced += reps.iter().filter(|r| r.replacement.is_some()).count();
            let mut old: BTreeMap<ClientId, Slot> = active.slots.drain(..).map(|s| (s.client, s)).collect();
            debug_assert_eq!(old.len(), before.len());
            active.slots = active
                .plan
                .cohort
                .iter()
                .map(|&c| {
                    old.remove(&c).unwrap_or(Slot {
                        client: c,
                        start: t,
                        replacement: true,
                        estimate: None,
                        sync: ClientSync::default(),
                    })
                })
                .collect();
        }
        replaced
    }

    /// Runs one round and returns its report.
    pub fn run_round(&mut self) -> Result<RoundReport> {
        let t = self.round;
        let start_time = self.clock;
        let online = self.online();
        let shape = self.store.shape();

        // Prepare.
        let lookahead = self.cfg.lookahead();
        if !self.plans.contains_key(&t) {
            self.plan_round(t, &online);
        }
        if lookahead > 0 {
            self.plan_round(t + lookahead, &online);
        }
        let replaced = if self.cfg.availability == AvailabilityMode::TraceReplace {
            self.replace_offline_members(&online)
        } else {
            0
        };

        // Train phase.
        let ActivePlan { plan, mut slots } = self.plans.remove(&t).expect("current round is planned");
        let mut dropped = Vec::new();
        struct Finisher {
            pos: usize,
            client: ClientId,
            fetch_bytes: u64,
            fetch_time: f64,
            estimate: Option<f64>,
            compute: f64,
            upload_time: f64,
        }
        let up_bytes = self.cfg.uplink.single_round_size(shape);
        let mut finishers = Vec::new();
        let mut sync_error = 0.0f64;
        let model_t = self.store.model(t)?.clone();
        let scale = model_t.max_abs().max(1.0);
        for (pos, slot) in slots.iter_mut().enumerate() {
            if !online.contains(&slot.client) {
                dropped.push(slot.client);
                continue;
            }
            let profile = self.world.registry.get(slot.client);
            let fetch_bytes = slot.sync.train_fetch(&mut self.store, t)?;
            let local = slot.sync.local().expect("synced after train fetch");
            sync_error = sync_error.max(local.sub(&model_t)?.max_abs() / scale);
            finishers.push(Finisher {
                pos,
                client: slot.client,
                fetch_bytes,
                fetch_time: fetch_bytes as f64 / profile.bw_dl,
                estimate: slot.estimate,
                compute: profile.compute_s,
                upload_time: up_bytes as f64 / profile.bw_ul,
            });
        }
        finishers.sort_by(|a, b| {
            let ta = a.fetch_time + a.compute + a.upload_time;
            let tb = b.fetch_time + b.compute + b.upload_time;
            ta.total_cmp(&tb).then(a.pos.cmp(&b.pos))
        });
        let n_agg = finishers.len().min(plan.target);
        let mut agg = finishers[..n_agg].iter().collect::<Vec<_>>();
        agg.sort_by_key(|f| f.pos);
        let fold_max = |f: fn(&&Finisher) -> f64| agg.iter().map(f).fold(0.0f64, f64::max);
        let fetch_time = fold_max(|f| f.fetch_time);
        let compute_time = fold_max(|f| f.compute);
        let upload_time = fold_max(|f| f.upload_time);
        let duration = fetch_time + compute_time + upload_time;
        let estimated_fetch_time = agg
            .iter()
            .map(|f| f.estimate)
            .try_fold(0.0f64, |m, e| e.map(|e| m.max(e)))
            .filter(|_| !agg.is_empty());
        // Local training and aggregation.
        let task = Arc::clone(&self.world.task);
        let rate = task.config.rate_at(t);
        let updates = agg
            .iter()
            .map(|f| {
                let trained = local_train(
                    &model_t,
                    &task.config,
                    &task.clients[f.client],
                    task.config.local_steps,
                    rate,
                    &self.root.fork(t, f.client as u64, "train"),
                );
                let delta = trained.sub(&model_t)?;
                let cu = crate::compress::compress(
                    &self.cfg.uplink,
                    t,
                    &delta,
                    shape,
                    &self.root.fork(t, f.client as u64, "uplink"),
                )?;
                decompress(&cu, shape.dim())
            })
            .collect::<Result<Vec<_>>>()?;
        let aggregated = if updates.is_empty() {
            ParamVector::zeros(shape.dim())
        } else {
            let raw: Vec<f64> = match self.cfg.weighting {
                Weighting::Uniform => vec![1.0; agg.len()],
                Weighting::Proportional => agg.iter().map(|f| self.world.registry.get(f.client).weight).collect(),
            };
            let total: f64 = raw.iter().sum();
            let weights: Vec<f64> = if total > 0.0 {
                raw.iter().map(|w| w / total).collect()
            } else {
                vec![1.0 / agg.len() as f64; agg.len()]
            };
            weighted_sum(&updates.iter().collect::<Vec<_>>(), &weights)?
        };
        self.store
            .commit_round(&aggregated, &self.root.fork(t, SERVER, "downlink"))?;

        // Background prefetch for later cohorts.
        let mut prefetch_bytes = 0u64;
        for (&train_round, active) in self.plans.iter_mut() {
            debug_assert!(train_round > t);
            for slot in active.slots.iter_mut() {
                if slot.start > t || !online.contains(&slot.client) {
                    continue;
                }
                let bw = self.world.registry.get(slot.client).bw_dl;
                let budget = (duration * bw).floor() as u64;
                prefetch_bytes += slot.sync.advance(budget, &mut self.store, t)?;
            }
        }

        if duration > 0.0 {
            self.estimator.update(duration)?;
        }
        let accuracy = self
            .evaluate
            .then(|| accuracy(self.store.current_model(), task.config.classes, &task.test));

        self.clock += duration;
        self.round += 1;
        Ok(RoundReport {
            round: t,
            start_time,
            duration,
            fetch_time,
            compute_time,
            upload_time,
            fetch_bytes: finishers.iter().map(|f| f.fetch_bytes).sum(),
            prefetch_bytes,
            upload_bytes: up_bytes * finishers.len() as u64,
            participants: finishers.len(),
            aggregated: agg.iter().map(|f| f.client).collect(),
            dropped,
            replaced,
            degraded: plan.degraded || n_agg < plan.target,
            accuracy,
            estimated_fetch_time,
            sync_error,
        })
    }

    /// Runs `rounds` rounds.
    pub fn run(&mut self, rounds: u64) -> Result<Vec<RoundReport>> {
        (0..rounds).map(|_| self.run_round()).collect()
    }
}
