//! Trace ingestion and the synthetic learning task.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Read;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Gamma, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::model::{MatrixShape, ParamVector, RngStream};
use crate::{ClientId, Error, Result};

pub const MBPS_TO_BYTES_PER_SEC: f64 = 125_000.0;

/// Rows of `(download, upload)` rates in Mbps.
#[derive(Debug, Clone, PartialEq)]
pub struct BandwidthTrace {
    rows: Vec<(f64, f64)>,
}

/// Splits CSV records, skipping a leading header row when its first field is
/// not numeric. Yields `(1-based row number, fields)`.
fn csv_rows(path: &Path, text: &str) -> Result<Vec<(usize, Vec<String>)>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .flexible(true)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Trace {
            path: path.to_path_buf(),
            row: i + 1,
            reason: e.to_string(),
        })?;
        let row = rec.position().map_or(i + 1, |p| p.line() as usize);
        let fields: Vec<String> = rec.iter().map(str::to_owned).collect();
        if rows.is_empty() && i == 0 && fields.first().is_some_and(|f| f.parse::<f64>().is_err()) {
            continue;
        }
        rows.push((row, fields));
    }
    Ok(rows)
}

fn read_text(path: &Path) -> Result<String> {
    let mut s = String::new();
    File::open(path)
        .and_then(|mut f| f.read_to_string(&mut s))
        .map_err(|e| Error::io(path, e))?;
    Ok(s)
}

fn parse_field(path: &Path, row: usize, fields: &[String], i: usize, name: &str) -> Result<f64> {
    let raw = fields.get(i).ok_or_else(|| Error::Trace {
        path: path.to_path_buf(),
        row,
        reason: format!("missing column `{name}`"),
    })?;
    raw.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::Trace {
            path: path.to_path_buf(),
            row,
            reason: format!("`{raw}` is not a number ({name})"),
        })
}

impl BandwidthTrace {
    pub fn new(rows: Vec<(f64, f64)>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Empty("bandwidth trace"));
        }
        if let Some(i) = rows.iter().position(|&(d, u)| !(d > 0.0 && u > 0.0)) {
            return Err(Error::config("bandwidth", format!("row {} has a non-positive rate", i + 1)));
        }
        Ok(Self { rows })
    }

    /// Parses `download_mbps,upload_mbps` rows; the header is optional.
    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (row, fields) in csv_rows(path, text)? {
            let dl = parse_field(path, row, &fields, 0, "download_mbps")?;
            let ul = parse_field(path, row, &fields, 1, "upload_mbps")?;
            if dl <= 0.0 || ul <= 0.0 {
                return Err(Error::Trace {
                    path: path.to_path_buf(),
                    row,
                    reason: format!("non-positive rate ({dl}, {ul})"),
                });
            }
            rows.push((dl, ul));
        }
        if rows.is_empty() {
            return Err(Error::Trace {
                path: path.to_path_buf(),
                row: 0,
                reason: "no data rows".into(),
            });
        }
        Ok(Self { rows })
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::parse(path, &read_text(path)?)
    }

    pub fn rows(&self) -> &[(f64, f64)] {
        &self.rows
    }

    /// Draws `n` rows with replacement, converted to bytes/s.
    pub fn sample(&self, n: usize, rng: &RngStream) -> Vec<(f64, f64)> {
        let mut r = rng.rng();
        (0..n)
            .map(|_| {
                let (d, u) = self.rows[r.random_range(0..self.rows.len())];
                (d * MBPS_TO_BYTES_PER_SEC, u * MBPS_TO_BYTES_PER_SEC)
            })
            .collect()
    }
}

/// Loads a bandwidth CSV and assigns `n` clients a `(download, upload)` pair
/// in bytes/s.
pub fn load_bandwidth(path: &Path, rng: &RngStream, n: usize) -> Result<Vec<(f64, f64)>> {
    Ok(BandwidthTrace::from_path(path)?.sample(n, rng))
}

/// Log-normal download bandwidths with the given median (bytes/s) and log
/// standard deviation; upload is `ul_ratio` times download.
pub fn synth_bandwidth(n: usize, median_dl: f64, sigma: f64, ul_ratio: f64, rng: &RngStream) -> Vec<(f64, f64)> {
    let dist = LogNormal::new(median_dl.ln(), sigma).expect("valid log-normal parameters");
    let mut r = rng.rng();
    (0..n)
        .map(|_| {
            let d = dist.sample(&mut r);
            (d, d * ul_ratio)
        })
        .collect()
}

/// Per-client compute seconds per round: log-normal, or constant when
/// `sigma == 0`.
pub fn synth_compute_times(n: usize, median: f64, sigma: f64, rng: &RngStream) -> Vec<f64> {
    if sigma == 0.0 {
        return vec![median; n];
    }
    let dist = LogNormal::new(median.ln(), sigma).expect("valid log-normal parameters");
    let mut r = rng.rng();
    (0..n).map(|_| dist.sample(&mut r)).collect()
}

/// Per-client online intervals `[start, end)` in seconds. Clients without
/// intervals are always online.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AvailabilityTrace {
    intervals: BTreeMap<ClientId, Vec<(f64, f64)>>,
}

impl AvailabilityTrace {
    pub fn new(mut intervals: BTreeMap<ClientId, Vec<(f64, f64)>>) -> Result<Self> {
        for (client, list) in intervals.iter_mut() {
            list.sort_by(|a, b| a.0.total_cmp(&b.0));
            for w in list.windows(2) {
                if w[1].0 < w[0].1 {
                    return Err(Error::config(
                        "availability",
                        format!("client {client}: overlapping intervals {:?} and {:?}", w[0], w[1]),
                    ));
                }
            }
            if let Some(bad) = list.iter().find(|(s, e)| !(s < e)) {
                return Err(Error::config("availability", format!("client {client}: empty interval {bad:?}")));
            }
        }
        Ok(Self { intervals })
    }

    /// Parses `client_id,start_s,end_s` rows; the header is optional.
    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        let mut map: BTreeMap<ClientId, Vec<(f64, f64)>> = BTreeMap::new();
        for (row, fields) in csv_rows(path, text)? {
            let id = parse_field(path, row, &fields, 0, "client_id")?;
            let start = parse_field(path, row, &fields, 1, "start_s")?;
            let end = parse_field(path, row, &fields, 2, "end_s")?;
            if id < 0.0 || id.fract() != 0.0 {
                return Err(Error::Trace {
                    path: path.to_path_buf(),
                    row,
                    reason: format!("bad client id {id}"),
                });
            }
            if !(start < end) {
                return Err(Error::Trace {
                    path: path.to_path_buf(),
                    row,
                    reason: format!("interval start {start} is not before end {end}"),
                });
            }
            map.entry(id as ClientId).or_default().push((start, end));
        }
        Self::new(map)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::parse(path, &read_text(path)?)
    }

    pub fn online_at(&self, client: ClientId, second: f64) -> bool {
        match self.intervals.get(&client) {
            None => true,
            Some(list) => {
                let i = list.partition_point(|&(s, _)| s <= second);
                i > 0 && second < list[i - 1].1
            }
        }
    }

    pub fn intervals(&self) -> &BTreeMap<ClientId, Vec<(f64, f64)>> {
        &self.intervals
    }
}

/// Independent churn: time is cut into `slot` second slots and every client
/// is offline during a slot with probability `offline_prob`. Past `horizon`
/// every client is online.
pub fn synth_churn(n: usize, horizon: f64, slot: f64, offline_prob: f64, rng: &RngStream) -> AvailabilityTrace {
    let slots = (horizon / slot).ceil().max(1.0) as usize;
    let mut intervals = BTreeMap::new();
    for c in 0..n {
        let mut r = rng.fork(0, c as u64, "churn").rng();
        let mut list: Vec<(f64, f64)> = Vec::new();
        for s in 0..slots {
            if r.random::<f64>() < offline_prob {
                continue;
            }
            let (a, b) = (s as f64 * slot, (s + 1) as f64 * slot);
            match list.last_mut() {
                Some(last) if last.1 == a => last.1 = b,
                _ => list.push((a, b)),
            }
        }
        // Everyone stays online past the horizon.
        let end = slots as f64 * slot;
        match list.last_mut() {
            Some(last) if last.1 == end => last.1 = f64::INFINITY,
            _ => list.push((end, f64::INFINITY)),
        }
        intervals.insert(c, list);
    }
    AvailabilityTrace { intervals }
}

/// Hyperparameters of the synthetic multinomial logistic-regression task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskConfig {
    pub features: usize,
    pub classes: usize,
    pub samples_per_client: usize,
    /// Concentration of the per-client class mixture; large is near iid.
    pub skew: f64,
    /// Scale of the class centres relative to the unit feature noise.
    pub separation: f64,
    pub test_samples: usize,
    pub local_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub lr_decay_every: u64,
    pub momentum: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            features: 199,
            classes: 10,
            samples_per_client: 60,
            skew: 0.5,
            separation: 0.25,
            test_samples: 2000,
            local_steps: 10,
            batch_size: 20,
            learning_rate: 0.01,
            lr_decay: 0.98,
            lr_decay_every: 10,
            momentum: 0.9,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("features", self.features),
            ("classes", self.classes),
            ("samples_per_client", self.samples_per_client),
            ("test_samples", self.test_samples),
            ("batch_size", self.batch_size),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be >= 1"));
            }
        }
        if !(self.skew > 0.0) {
            return Err(Error::config("skew", "must be > 0"));
        }
        if !(self.learning_rate >= 0.0) || !(self.lr_decay > 0.0) || self.lr_decay_every == 0 {
            return Err(Error::config("learning_rate", "needs rate >= 0, decay > 0, interval >= 1"));
        }
        Ok(())
    }

    /// `(features + 1) × classes`, bias in the last row.
    pub fn shape(&self) -> MatrixShape {
        MatrixShape {
            rows: self.features + 1,
            cols: self.classes,
        }
    }

    pub fn dim(&self) -> usize {
        self.shape().dim()
    }

    /// Step size in (1-based) round `round`.
    pub fn rate_at(&self, round: u64) -> f64 {
        let decays = round.saturating_sub(1) / self.lr_decay_every;
        self.learning_rate * self.lr_decay.powi(decays as i32)
    }
}

/// Labelled samples, features row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: usize,
    pub x: Vec<f64>,
    pub y: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.features..(i + 1) * self.features]
    }

    fn concat(parts: &[Dataset]) -> Dataset {
        let features = parts[0].features;
        Dataset {
            features,
            x: parts.iter().flat_map(|p| p.x.iter().copied()).collect(),
            y: parts.iter().flat_map(|p| p.y.iter().copied()).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthTask {
    pub config: TaskConfig,
    pub clients: Vec<Dataset>,
    pub test: Dataset,
    /// Per-client class mixture.
    pub mixtures: Vec<Vec<f64>>,
}

fn class_mixture(classes: usize, skew: f64, r: &mut impl Rng) -> Vec<f64> {
    let gamma = Gamma::new(skew, 1.0).expect("skew > 0");
    let draws: Vec<f64> = (0..classes).map(|_| gamma.sample(r)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        draws.into_iter().map(|g| g / total).collect()
    } else {
        // Every gamma draw underflowed: the limit is a single class.
        let mut p = vec![0.0; classes];
        p[r.random_range(0..classes)] = 1.0;
        p
    }
}

fn draw_samples(centres: &[Vec<f64>], mixture: &[f64], n: usize, r: &mut impl Rng) -> Dataset {
    let features = centres[0].len();
    let labels = WeightedIndex::new(mixture).expect("mixture has positive mass");
    let mut x = Vec::with_capacity(n * features);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let c = labels.sample(r);
        y.push(c);
        x.extend(centres[c].iter().map(|m| m + r.sample::<f64, _>(StandardNormal)));
    }
    Dataset { features, x, y }
}

/// Gaussian class clusters; each client's labels follow a gamma-normalised
/// (Dirichlet) mixture with concentration `skew`.
pub fn gen_synth_task(n_clients: usize, config: &TaskConfig, seed: u64) -> Result<SynthTask> {
    config.validate()?;
    if n_clients == 0 {
        return Err(Error::config("num_clients", "must be >= 1"));
    }
    let root = RngStream::new(seed).fork(0, crate::model::SERVER, "task");
    let mut r = root.fork(0, crate::model::SERVER, "centres").rng();
    let centres: Vec<Vec<f64>> = (0..config.classes)
        .map(|_| {
            (0..config.features)
                .map(|_| config.separation * r.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    let mut mixtures = Vec::with_capacity(n_clients);
    let mut clients = Vec::with_capacity(n_clients);
    for c in 0..n_clients {
        let mut r = root.fork(0, c as u64, "client-data").rng();
        let mix = class_mixture(config.classes, config.skew, &mut r);
        clients.push(draw_samples(&centres, &mix, config.samples_per_client, &mut r));
        mixtures.push(mix);
    }
    let mut r = root.fork(0, crate::model::SERVER, "test").rng();
    let uniform = vec![1.0 / config.classes as f64; config.classes];
    let test = draw_samples(&centres, &uniform, config.test_samples, &mut r);
    Ok(SynthTask {
        config: config.clone(),
        clients,
        test,
        mixtures,
    })
}

fn logits(model: &[f64], classes: usize, x: &[f64], out: &mut [f64]) {
    let d = x.len();
    out.copy_from_slice(&model[d * classes..(d + 1) * classes]);
    for (j, &xj) in x.iter().enumerate() {
        if xj == 0.0 {
            continue;
        }
        let row = &model[j * classes..(j + 1) * classes];
        for (o, w) in out.iter_mut().zip(row) {
            *o += w * xj;
        }
    }
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

/// Mean softmax cross-entropy over `data`.
pub fn loss(model: &ParamVector, classes: usize, data: &Dataset) -> f64 {
    let mut z = vec![0.0; classes];
    let mut total = 0.0;
    for i in 0..data.len() {
        logits(model.as_slice(), classes, data.row(i), &mut z);
        let max = z.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - z[data.y[i]];
    }
    total / data.len() as f64
}

/// Gradient of the mean cross-entropy over the samples `batch`.
pub fn gradient(model: &ParamVector, classes: usize, data: &Dataset, batch: &[usize]) -> Vec<f64> {
    let d = data.features;
    let mut g = vec![0.0; (d + 1) * classes];
    let mut z = vec![0.0; classes];
    let scale = 1.0 / batch.len() as f64;
    for &i in batch {
        let x = data.row(i);
        logits(model.as_slice(), classes, x, &mut z);
        softmax_in_place(&mut z);
        z[data.y[i]] -= 1.0;
        for (j, &xj) in x.iter().enumerate() {
            let row = &mut g[j * classes..(j + 1) * classes];
            for (gv, e) in row.iter_mut().zip(&z) {
                *gv += scale * e * xj;
            }
        }
        for (gv, e) in g[d * classes..].iter_mut().zip(&z) {
            *gv += scale * e;
        }
    }
    g
}

pub fn accuracy(model: &ParamVector, classes: usize, data: &Dataset) -> f64 {
    let mut z = vec![0.0; classes];
    let correct = (0..data.len())
        .filter(|&i| {
            logits(model.as_slice(), classes, data.row(i), &mut z);
            let pred = (0..classes).max_by(|&a, &b| z[a].total_cmp(&z[b]).then(b.cmp(&a))).unwrap();
            pred == data.y[i]
        })
        .count();
    correct as f64 / data.len() as f64
}

/// `steps` mini-batch SGD steps with heavy-ball momentum on softmax
/// cross-entropy. Batches are drawn without replacement from `rng`.
pub fn local_train(
    model: &ParamVector,
    config: &TaskConfig,
    data: &Dataset,
    steps: usize,
    rate: f64,
    rng: &RngStream,
) -> ParamVector {
    let mut w = model.as_slice().to_vec();
    if rate == 0.0 || steps == 0 {
        return model.clone();
    }
    let mut velocity = vec![0.0; w.len()];
    let mut r = rng.rng();
    let batch = config.batch_size.min(data.len());
    for _ in 0..steps {
        let idx = index::sample(&mut r, data.len(), batch).into_vec();
        let g = gradient(&ParamVector::from_finite(w.clone()), config.classes, data, &idx);
        for ((wi, vi), gi) in w.iter_mut().zip(velocity.iter_mut()).zip(&g) {
            *vi = config.momentum * *vi + gi;
            *wi -= rate * *vi;
        }
    }
    ParamVector::from_finite(w)
}

/// Test accuracy of plain SGD on the pooled client data, used as the
/// reference federated training is measured against.
pub fn centralized_reference(task: &SynthTask, epochs: usize, seed: u64) -> f64 {
    let pooled = Dataset::concat(&task.clients);
    let cfg = &task.config;
    let steps_per_epoch = pooled.len().div_ceil(cfg.batch_size);
    let mut model = ParamVector::zeros(cfg.dim());
    let root = RngStream::new(seed).fork(0, crate::model::SERVER, "central");
    for e in 0..epochs {
        let rate = cfg.learning_rate * cfg.lr_decay.powi(e as i32);
        model = local_train(&model, cfg, &pooled, steps_per_epoch, rate, &root.fork(e as u64, 0, "epoch"));
    }
    accuracy(&model, cfg.classes, &task.test)
}
