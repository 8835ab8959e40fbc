//! Experiment configuration, paired and swept runs, and result files.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::compress::CompressorConfig;
use crate::model::{RngStream, SERVER};
use crate::sampling::ClientRegistry;
use crate::sim::{
    finalize_metrics, AvailabilityMode, ClientProfile, Metrics, RoundReport, SchedulerMode, SimConfig, Simulation,
    Weighting, World,
};
use crate::workload::{
    gen_synth_task, synth_bandwidth, synth_churn, synth_compute_times, AvailabilityTrace, BandwidthTrace, TaskConfig,
};
use crate::{Error, Result};

/// Trailing window for the target-accuracy test.
pub const ACCURACY_WINDOW: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum BandwidthSource {
    /// Log-normal download rates; upload is `ul_ratio` times download.
    Synthetic {
        median_dl_bps: f64,
        sigma: f64,
        ul_ratio: f64,
    },
    /// `download_mbps,upload_mbps` CSV sampled with replacement.
    Trace { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum AvailabilitySource {
    /// Clients go offline independently per time slot.
    Synthetic { offline_prob: f64, slot_s: f64, horizon_s: f64 },
    /// `client_id,start_s,end_s` CSV.
    Trace { path: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComputeModel {
    pub median_s: f64,
    /// Log standard deviation; 0 gives every client `median_s`.
    pub sigma: f64,
}

/// Everything needed to reproduce one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub rounds: u64,
    pub num_clients: usize,
    pub clients_per_round: usize,
    pub over_commitment: f64,
    pub prefetch_rounds: u64,
    pub alpha: f64,
    pub beta: f64,
    pub scheduler: SchedulerMode,
    pub availability: AvailabilityMode,
    pub downlink: CompressorConfig,
    pub uplink: CompressorConfig,
    pub weighting: Weighting,
    pub task: TaskConfig,
    pub bandwidth: BandwidthSource,
    /// Divides every bandwidth, emulating a model this many times larger.
    pub bandwidth_scale: f64,
    pub compute: ComputeModel,
    pub availability_source: Option<AvailabilitySource>,
    /// Stop once the trailing mean test accuracy reaches this value.
    pub target_accuracy: Option<f64>,
    pub stop_at_target: bool,
    pub evaluate: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            rounds: 100,
            num_clients: 100,
            clients_per_round: 10,
            over_commitment: 1.3,
            prefetch_rounds: 3,
            alpha: crate::scheduler::DEFAULT_ALPHA,
            beta: 0.0,
            scheduler: SchedulerMode::FedFetch,
            availability: AvailabilityMode::Full,
            downlink: CompressorConfig::TopK { ratio: 0.2 },
            uplink: CompressorConfig::TopK { ratio: 0.2 },
            weighting: Weighting::Uniform,
            task: TaskConfig::default(),
            bandwidth: BandwidthSource::Synthetic {
                median_dl_bps: 1_000.0,
                sigma: 1.9,
                ul_ratio: 0.25,
            },
            bandwidth_scale: 1.0,
            compute: ComputeModel {
                median_s: 15.0,
                sigma: 0.5,
            },
            availability_source: None,
            target_accuracy: None,
            stop_at_target: false,
            evaluate: true,
        }
    }
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.clients_per_round == 0 || self.clients_per_round > self.num_clients {
            return Err(Error::config("clients_per_round", "need 1 <= K <= num_clients"));
        }
        if self.rounds == 0 {
            return Err(Error::config("rounds", "must be >= 1"));
        }
        if !(self.over_commitment >= 1.0) {
            return Err(Error::config("over_commitment", "must be >= 1"));
        }
        if !(self.beta >= 0.0) || 1.0 + self.beta > self.over_commitment + 1e-12 {
            return Err(Error::config("beta", "need 0 <= beta and 1 + beta <= over_commitment"));
        }
        if let SchedulerMode::Fixed(k) = self.scheduler {
            if k > self.prefetch_rounds {
                return Err(Error::config("scheduler", "fixed window longer than prefetch_rounds"));
            }
        }
        if !(self.bandwidth_scale > 0.0 && self.bandwidth_scale.is_finite()) {
            return Err(Error::config("bandwidth_scale", "must be > 0"));
        }
        if let BandwidthSource::Synthetic {
            median_dl_bps,
            sigma,
            ul_ratio,
        } = self.bandwidth
        {
            if !(median_dl_bps > 0.0 && sigma >= 0.0 && ul_ratio > 0.0) {
                return Err(Error::config("bandwidth", "need median > 0, sigma >= 0, ul_ratio > 0"));
            }
        }
        if !(self.compute.median_s >= 0.0 && self.compute.sigma >= 0.0) {
            return Err(Error::config("compute", "need median_s >= 0 and sigma >= 0"));
        }
        if self.compute.sigma > 0.0 && self.compute.median_s == 0.0 {
            return Err(Error::config("compute", "log-normal compute needs median_s > 0"));
        }
        if self.availability != AvailabilityMode::Full && self.availability_source.is_none() {
            return Err(Error::config("availability_source", "required unless availability is `full`"));
        }
        if let Some(AvailabilitySource::Synthetic {
            offline_prob,
            slot_s,
            horizon_s,
        }) = self.availability_source
        {
            if !((0.0..1.0).contains(&offline_prob) && slot_s > 0.0 && horizon_s > 0.0) {
                return Err(Error::config("availability_source", "need 0 <= offline_prob < 1, slot and horizon > 0"));
            }
        }
        if let Some(a) = self.target_accuracy {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::config("target_accuracy", "must lie in [0, 1]"));
            }
        }
        self.task.validate()?;
        self.sim_config().validate()
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            clients_per_round: self.clients_per_round,
            over_commitment: self.over_commitment,
            prefetch_rounds: self.prefetch_rounds,
            beta: self.beta,
            alpha: self.alpha,
            scheduler: self.scheduler,
            availability: self.availability,
            downlink: self.downlink,
            uplink: self.uplink,
            weighting: self.weighting,
            seed: self.seed,
        }
    }

    /// Builds the clients, task and availability of this configuration.
    pub fn build_world(&self) -> Result<(World, Vec<TraceHash>)> {
        let root = RngStream::new(self.seed);
        let mut hashes = Vec::new();
        let rates = match &self.bandwidth {
            BandwidthSource::Synthetic {
                median_dl_bps,
                sigma,
                ul_ratio,
            } => synth_bandwidth(
                self.num_clients,
                *median_dl_bps,
                *sigma,
                *ul_ratio,
                &root.fork(0, SERVER, "bandwidth"),
            ),
            BandwidthSource::Trace { path } => {
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                hashes.push(TraceHash::of(path, &text));
                BandwidthTrace::parse(path, &text)?.sample(self.num_clients, &root.fork(0, SERVER, "bandwidth"))
            }
        };
        let compute = synth_compute_times(
            self.num_clients,
            self.compute.median_s,
            self.compute.sigma,
            &root.fork(0, SERVER, "compute"),
        );
        let task = gen_synth_task(self.num_clients, &self.task, self.seed)?;
        let profiles = (0..self.num_clients)
            .map(|id| ClientProfile {
                id,
                bw_dl: rates[id].0 / self.bandwidth_scale,
                bw_ul: rates[id].1 / self.bandwidth_scale,
                compute_s: compute[id],
                weight: task.clients[id].len() as f64,
            })
            .collect();
        let availability = match &self.availability_source {
            None => None,
            Some(AvailabilitySource::Synthetic {
                offline_prob,
                slot_s,
                horizon_s,
            }) => Some(synth_churn(
                self.num_clients,
                *horizon_s,
                *slot_s,
                *offline_prob,
                &root.fork(0, SERVER, "availability"),
            )),
            Some(AvailabilitySource::Trace { path }) => {
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                hashes.push(TraceHash::of(path, &text));
                Some(AvailabilityTrace::parse(path, &text)?)
            }
        };
        let world = World {
            registry: ClientRegistry::new(profiles)?,
            task: Arc::new(task),
            availability: availability.map(Arc::new),
        };
        Ok((world, hashes))
    }
}

/// Content hash of a trace file, computed like a git blob id but with
/// SHA-256.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceHash {
    pub path: PathBuf,
    pub sha256: String,
}

impl TraceHash {
    pub fn of(path: &Path, content: &str) -> Self {
        let mut h = Sha256::new();
        h.update(format!("blob {}\0", content.len()).as_bytes());
        h.update(content.as_bytes());
        Self {
            path: path.to_path_buf(),
            sha256: hex::encode(h.finalize()),
        }
    }
}

/// First round at which the mean accuracy of the last
/// [`ACCURACY_WINDOW`] rounds reaches `target`.
pub fn rounds_to_target(reports: &[RoundReport], target: f64) -> Option<u64> {
    let acc: Vec<f64> = reports.iter().map_while(|r| r.accuracy).collect();
    (ACCURACY_WINDOW..=acc.len())
        .find(|&end| acc[end - ACCURACY_WINDOW..end].iter().sum::<f64>() / ACCURACY_WINDOW as f64 >= target)
        .map(|end| reports[end - 1].round)
}

/// One row of `rounds.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRow {
    pub round: u64,
    pub start_time: f64,
    pub duration: f64,
    pub fetch_time: f64,
    pub compute_time: f64,
    pub upload_time: f64,
    pub fetch_bytes: u64,
    pub prefetch_bytes: u64,
    pub upload_bytes: u64,
    pub participants: usize,
    pub aggregated: usize,
    pub dropped: usize,
    pub replaced: usize,
    pub accuracy: Option<f64>,
}

impl From<&RoundReport> for RoundRow {
    fn from(r: &RoundReport) -> Self {
        Self {
            round: r.round,
            start_time: r.start_time,
            duration: r.duration,
            fetch_time: r.fetch_time,
            compute_time: r.compute_time,
            upload_time: r.upload_time,
            fetch_bytes: r.fetch_bytes,
            prefetch_bytes: r.prefetch_bytes,
            upload_bytes: r.upload_bytes,
            participants: r.participants,
            aggregated: r.aggregated.len(),
            dropped: r.dropped.len(),
            replaced: r.replaced,
            accuracy: r.accuracy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config: ExperimentConfig,
    pub traces: Vec<TraceHash>,
    pub seed: u64,
    pub metrics: Metrics,
    pub rounds_to_target: Option<u64>,
    pub final_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub reports: Vec<RoundReport>,
    pub summary: Summary,
}

impl RunOutput {
    pub fn metrics(&self) -> &Metrics {
        &self.summary.metrics
    }

    /// Accuracy of the server model after each round.
    pub fn accuracy_trace(&self) -> Vec<Option<f64>> {
        self.reports.iter().map(|r| r.accuracy).collect()
    }

    pub fn rounds_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.reports {
            w.serialize(RoundRow::from(r))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::io(Path::new("rounds.csv"), e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn summary_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.summary)?)
    }

    /// Writes `rounds.csv` and `summary.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let rounds = dir.join("rounds.csv");
        fs::write(&rounds, self.rounds_csv()?).map_err(|e| Error::io(&rounds, e))?;
        let summary = dir.join("summary.json");
        fs::write(&summary, self.summary_json()?).map_err(|e| Error::io(&summary, e))?;
        Ok(())
    }
}

pub fn run(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let (world, traces) = cfg.build_world()?;
    run_in(cfg, world, traces)
}

/// Runs `cfg` against an already built world.
pub fn run_in(cfg: &ExperimentConfig, world: World, traces: Vec<TraceHash>) -> Result<RunOutput> {
    let mut sim = Simulation::new(cfg.sim_config(), world)?;
    if !cfg.evaluate {
        sim = sim.without_evaluation();
    }
    let mut reports = Vec::with_capacity(cfg.rounds as usize);
    let mut reached = None;
    for _ in 0..cfg.rounds {
        reports.push(sim.run_round()?);
        if reached.is_none() {
            reached = cfg.target_accuracy.and_then(|a| rounds_to_target(&reports, a));
            if reached.is_some() && cfg.stop_at_target {
                break;
            }
        }
    }
    log::debug!("seed {}: {} rounds", cfg.seed, reports.len());
    let summary = Summary {
        config: cfg.clone(),
        traces,
        seed: cfg.seed,
        metrics: finalize_metrics(&reports)?,
        rounds_to_target: reached,
        final_accuracy: reports.last().and_then(|r| r.accuracy),
    };
    Ok(RunOutput { reports, summary })
}

/// Runs every configuration, in parallel, returning outputs in input order.
pub fn run_many(cfgs: &[ExperimentConfig]) -> Result<Vec<RunOutput>> {
    cfgs.par_iter().map(run).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepParam {
    #[serde(rename = "R")]
    PrefetchRounds,
    #[serde(rename = "alpha")]
    Alpha,
    #[serde(rename = "beta")]
    Beta,
    #[serde(rename = "oc")]
    OverCommitment,
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "R" | "r" => Ok(SweepParam::PrefetchRounds),
            "alpha" => Ok(SweepParam::Alpha),
            "beta" => Ok(SweepParam::Beta),
            "oc" | "OC" => Ok(SweepParam::OverCommitment),
            other => Err(Error::config("param", format!("unknown sweep parameter `{other}`"))),
        }
    }
}

impl std::fmt::Display for SweepParam {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SweepParam::PrefetchRounds => "R",
            SweepParam::Alpha => "alpha",
            SweepParam::Beta => "beta",
            SweepParam::OverCommitment => "oc",
        })
    }
}

impl SweepParam {
    pub fn apply(&self, base: &ExperimentConfig, value: f64) -> Result<ExperimentConfig> {
        let mut cfg = base.clone();
        match self {
            SweepParam::PrefetchRounds => {
                if value < 0.0 || value.fract() != 0.0 {
                    return Err(Error::config("R", format!("{value} is not a round count")));
                }
                cfg.prefetch_rounds = value as u64;
            }
            SweepParam::Alpha => cfg.alpha = value,
            SweepParam::Beta => cfg.beta = value,
            SweepParam::OverCommitment => cfg.over_commitment = value,
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One row of `sweep.csv` or `compare.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub variant: String,
    pub seed: u64,
    pub fetch_time: f64,
    pub total_time: f64,
    pub fetch_volume: u64,
    pub total_volume: u64,
    pub rounds_to_target: Option<u64>,
    pub final_accuracy: Option<f64>,
}

impl ComparisonRow {
    fn new(variant: String, out: &RunOutput) -> Self {
        let m = out.metrics();
        Self {
            variant,
            seed: out.summary.seed,
            fetch_time: m.fetch_time,
            total_time: m.total_time,
            fetch_volume: m.fetch_volume,
            total_volume: m.total_volume,
            rounds_to_target: out.summary.rounds_to_target,
            final_accuracy: out.summary.final_accuracy,
        }
    }
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(Path::new("sweep.csv"), e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// One run per value of `param`, all with the base seed.
pub fn sweep(base: &ExperimentConfig, param: SweepParam, values: &[f64]) -> Result<Vec<(ComparisonRow, RunOutput)>> {
    let cfgs = values
        .iter()
        .map(|&v| param.apply(base, v))
        .collect::<Result<Vec<_>>>()?;
    let outs = run_many(&cfgs)?;
    Ok(values
        .iter()
        .zip(outs)
        .map(|(v, out)| (ComparisonRow::new(format!("{param}={v}"), &out), out))
        .collect())
}

/// Paired runs of the fixed one-round window, the fixed `R`-round window and
/// the adaptive scheduler.
pub fn compare_naive(base: &ExperimentConfig) -> Result<Vec<(ComparisonRow, RunOutput)>> {
    if base.prefetch_rounds == 0 {
        return Err(Error::config("prefetch_rounds", "naive comparison needs R >= 1"));
    }
    let variants = [
        SchedulerMode::Fixed(1),
        SchedulerMode::Fixed(base.prefetch_rounds),
        SchedulerMode::FedFetch,
    ];
    let cfgs: Vec<ExperimentConfig> = variants
        .iter()
        .map(|&s| ExperimentConfig {
            scheduler: s,
            ..base.clone()
        })
        .collect();
    let outs = run_many(&cfgs)?;
    Ok(variants
        .iter()
        .zip(outs)
        .map(|(s, out)| (ComparisonRow::new(s.to_string(), &out), out))
        .collect())
}
