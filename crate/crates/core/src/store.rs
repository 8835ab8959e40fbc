//! Server model timeline and accumulated downstream updates.

use std::collections::BTreeMap;

use crate::compress::{self, CompressedUpdate, CompressorConfig, VALUE_BYTES};
use crate::model::{check_dim, MatrixShape, ParamVector, RngStream};
use crate::{Error, Result, Round};

/// Running means of observed accumulated-update sizes, keyed by the number
/// of rounds an update spans.
#[derive(Debug, Clone)]
pub struct SizeProfiler {
    cfg: CompressorConfig,
    shape: MatrixShape,
    by_span: BTreeMap<u64, (f64, u64)>,
}

impl SizeProfiler {
    pub fn new(cfg: CompressorConfig, shape: MatrixShape) -> Self {
        Self {
            cfg,
            shape,
            by_span: BTreeMap::new(),
        }
    }

    /// Size of the dense model, `4·dim`.
    pub fn base_model_size(&self) -> u64 {
        VALUE_BYTES * self.shape.dim() as u64
    }

    pub fn observe(&mut self, span: u64, bytes: u64) {
        if span == 0 {
            return;
        }
        let e = self.by_span.entry(span).or_insert((0.0, 0));
        e.0 += bytes as f64;
        e.1 += 1;
    }

    pub fn observations(&self, span: u64) -> u64 {
        self.by_span.get(&span).map_or(0, |e| e.1)
    }

    fn mean(&self, span: u64) -> Option<f64> {
        self.by_span.get(&span).map(|&(sum, n)| sum / n as f64)
    }

    /// Expected size in bytes of an update accumulated over `span` rounds.
    ///
    /// Uses the observed mean when one exists and an analytic estimate
    /// otherwise. For masking compressors the result is clamped to be
    /// non-decreasing in `span`.
    pub fn profiled_size(&self, span: u64) -> f64 {
        if span == 0 {
            return 0.0;
        }
        let raw = self.mean(span).unwrap_or_else(|| self.fallback(span));
        if self.cfg.is_masking() && span > 1 {
            raw.max(self.profiled_size(span - 1))
        } else {
            raw
        }
    }

    fn fallback(&self, span: u64) -> f64 {
        let base = self.base_model_size() as f64;
        let single = self.cfg.single_round_size(self.shape) as f64;
        match self.cfg {
            CompressorConfig::TopK { .. } => {
                let one = self.mean(1).unwrap_or(single);
                (span as f64 * one).min(base)
            }
            CompressorConfig::Quant { .. } | CompressorConfig::LowRank { .. } => {
                (span as f64 * single).min(base)
            }
            CompressorConfig::Identity => base,
        }
    }
}

/// Server-side history: models `w_t`, compressed per-round deltas and the
/// size profiler.
///
/// `models[t + 1] == models[t] + decompress(deltas[t])` by construction.
/// Deltas and models older than the retention horizon are evicted.
#[derive(Debug, Clone)]
pub struct ServerStore {
    shape: MatrixShape,
    cfg: CompressorConfig,
    models: BTreeMap<Round, ParamVector>,
    deltas: BTreeMap<Round, CompressedUpdate>,
    current: Round,
    horizon: u64,
    profiler: SizeProfiler,
}

impl ServerStore {
    /// `initial` becomes the model at `start_round`. `horizon` is the number
    /// of past rounds whose deltas stay available (at least 1).
    pub fn new(
        initial: ParamVector,
        shape: MatrixShape,
        cfg: CompressorConfig,
        start_round: Round,
        horizon: u64,
    ) -> Result<Self> {
        check_dim(shape.dim(), initial.dim())?;
        cfg.validate()?;
        let mut models = BTreeMap::new();
        models.insert(start_round, initial);
        Ok(Self {
            shape,
            cfg,
            models,
            deltas: BTreeMap::new(),
            current: start_round,
            horizon: horizon.max(1),
            profiler: SizeProfiler::new(cfg, shape),
        })
    }

    pub fn dim(&self) -> usize {
        self.shape.dim()
    }

    pub fn shape(&self) -> MatrixShape {
        self.shape
    }

    pub fn compressor(&self) -> CompressorConfig {
        self.cfg
    }

    /// Round whose model is the newest committed one.
    pub fn current_round(&self) -> Round {
        self.current
    }

    pub fn current_model(&self) -> &ParamVector {
        &self.models[&self.current]
    }

    pub fn profiler(&self) -> &SizeProfiler {
        &self.profiler
    }

    pub fn base_model_size(&self) -> u64 {
        self.profiler.base_model_size()
    }

    fn oldest_model(&self) -> Round {
        *self.models.keys().next().expect("store always holds a model")
    }

    pub fn model(&self, round: Round) -> Result<&ParamVector> {
        self.models.get(&round).ok_or(Error::Evicted {
            round,
            oldest: self.oldest_model(),
            newest: self.current,
        })
    }

    pub fn delta(&self, round: Round) -> Result<&CompressedUpdate> {
        self.deltas.get(&round).ok_or_else(|| Error::Evicted {
            round,
            oldest: self.deltas.keys().next().copied().unwrap_or(self.current),
            newest: self.current.saturating_sub(1),
        })
    }

    /// Compresses the aggregated update of the current round, applies it and
    /// advances to the next round.
    pub fn commit_round(&mut self, aggregated: &ParamVector, rng: &RngStream) -> Result<&CompressedUpdate> {
        check_dim(self.dim(), aggregated.dim())?;
        let t = self.current;
        let cu = compress::compress(&self.cfg, t, aggregated, self.shape, rng)?;
        let decoded = compress::decompress(&cu, self.dim())?;
        let next = self.models[&t].axpy(1.0, &decoded)?;
        self.profiler.observe(1, cu.wire_size());
        self.deltas.insert(t, cu);
        self.models.insert(t + 1, next);
        self.current = t + 1;

        let keep_from = self.current.saturating_sub(self.horizon);
        self.deltas.retain(|&r, _| r >= keep_from);
        self.models.retain(|&r, _| r >= keep_from);
        Ok(&self.deltas[&t])
    }

    /// Accumulated deltas of rounds `t1..=t2` without touching the profiler.
    pub fn accumulated(&self, t1: Round, t2: Round) -> Result<CompressedUpdate> {
        if t1 == t2 + 1 {
            return Ok(CompressedUpdate::zero(self.dim()));
        }
        if t1 > t2 || t2 >= self.current {
            return Err(Error::InvalidRange { t1, t2 });
        }
        let parts = (t1..=t2)
            .map(|r| self.delta(r).cloned())
            .collect::<Result<Vec<_>>>()?;
        compress::accumulate(&parts)
    }

    /// Accumulated deltas of rounds `t1..=t2`; records the served size.
    /// `t1 == t2 + 1` yields the zero update.
    pub fn delta_range(&mut self, t1: Round, t2: Round) -> Result<CompressedUpdate> {
        let cu = self.accumulated(t1, t2)?;
        if t1 <= t2 {
            self.profiler.observe(t2 - t1 + 1, cu.wire_size());
        }
        Ok(cu)
    }

    /// Records that `cu` was served to a client.
    pub fn record_served(&mut self, cu: &CompressedUpdate) {
        if let Some((t1, t2)) = cu.span() {
            self.profiler.observe(t2 - t1 + 1, cu.wire_size());
        }
    }

    /// The dense model of round `p` and its download size.
    pub fn combined_base(&self, p: Round) -> Result<(ParamVector, u64)> {
        Ok((self.model(p)?.clone(), self.base_model_size()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compress::decompress;

    fn line(dim: usize) -> MatrixShape {
        MatrixShape::new(1, dim).unwrap()
    }

    fn update(dim: usize, r: u64) -> ParamVector {
        let v: Vec<f64> = (0..dim).map(|i| ((i as f64 + 1.0) * (r as f64 + 0.37)).sin()).collect();
        ParamVector::new(v).unwrap()
    }

    fn store(cfg: &str, dim: usize, horizon: u64) -> ServerStore {
        let init = ParamVector::new((0..dim).map(|i| i as f64 * 0.01).collect()).unwrap();
        ServerStore::new(init, line(dim), cfg.parse().unwrap(), 0, horizon).unwrap()
    }

    fn rng(r: u64) -> RngStream {
        RngStream::new(5).fork(r, crate::model::SERVER, "dl")
    }

    #[test]
    fn zero_update_keeps_model() {
        let mut s = store("topk:0.2", 10, 4);
        s.commit_round(&ParamVector::zeros(10), &rng(0)).unwrap();
        assert_eq!(s.model(1).unwrap(), s.model(0).unwrap());
    }

    #[test]
    fn identity_commit_adds_rounded_delta() {
        let mut s = store("identity", 10, 4);
        let d = update(10, 1);
        s.commit_round(&d, &rng(0)).unwrap();
        let diff = s.model(1).unwrap().sub(s.model(0).unwrap()).unwrap();
        for (a, b) in diff.as_slice().iter().zip(d.as_slice()) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1e-3));
        }
    }

    #[test]
    fn commit_rejects_wrong_dim() {
        let mut s = store("topk:0.2", 10, 4);
        assert!(matches!(
            s.commit_round(&ParamVector::zeros(9), &rng(0)),
            Err(Error::DimMismatch { .. })
        ));
    }

    #[test]
    fn telescoping_after_three_commits() {
        let mut s = store("topk:0.3", 40, 5);
        for r in 0..3 {
            s.commit_round(&update(40, r), &rng(r)).unwrap();
        }
        let mut expect = s.model(0).unwrap().clone();
        for r in 0..3 {
            expect.axpy_in_place(1.0, &decompress(s.delta(r).unwrap(), 40).unwrap()).unwrap();
        }
        assert!(expect.bit_eq(s.model(3).unwrap()));
    }

    #[test]
    fn delta_range_edge_cases() {
        let mut s = store("topk:0.3", 40, 5);
        for r in 0..3 {
            s.commit_round(&update(40, r), &rng(r)).unwrap();
        }
        let empty = s.delta_range(2, 1).unwrap();
        assert_eq!(empty.wire_size(), 0);
        assert_eq!(empty.span(), None);
        assert_eq!(&s.delta_range(1, 1).unwrap(), s.delta(1).unwrap());

        let acc = s.delta_range(0, 2).unwrap();
        let mut sum = vec![0.0; 40];
        for r in 0..3 {
            for (a, v) in sum.iter_mut().zip(decompress(s.delta(r).unwrap(), 40).unwrap().as_slice()) {
                *a += v;
            }
        }
        assert_eq!(decompress(&acc, 40).unwrap().as_slice(), sum.as_slice());
        assert_eq!(acc, s.delta_range(0, 2).unwrap());
        assert!(matches!(s.delta_range(0, 3), Err(Error::InvalidRange { .. })));
        assert!(matches!(s.delta_range(2, 0), Err(Error::InvalidRange { .. })));
    }

    #[test]
    fn telescoping_identity_holds_for_every_start() {
        let mut s = store("topk:0.25", 64, 10);
        for r in 0..8 {
            s.commit_round(&update(64, r), &rng(r)).unwrap();
        }
        for t in 1..=8 {
            for t1 in 0..t {
                let (base, bytes) = s.combined_base(t1).unwrap();
                assert_eq!(bytes, 256);
                let d = decompress(&s.accumulated(t1, t - 1).unwrap(), 64).unwrap();
                let rebuilt = base.axpy(1.0, &d).unwrap();
                let target = s.model(t).unwrap();
                let scale = 1.0 + target.max_abs();
                for (a, b) in rebuilt.as_slice().iter().zip(target.as_slice()) {
                    assert!((a - b).abs() <= 1e-12 * scale, "t1={t1} t={t}");
                }
            }
        }
    }

    #[test]
    fn combined_base_initial_model() {
        let s = store("identity", 1000, 3);
        let (w, bytes) = s.combined_base(0).unwrap();
        assert_eq!(bytes, 4000);
        assert_eq!(&w, s.model(0).unwrap());
    }

    #[test]
    fn old_rounds_are_evicted() {
        let mut s = store("topk:0.2", 10, 2);
        for r in 0..5 {
            s.commit_round(&update(10, r), &rng(r)).unwrap();
        }
        assert_eq!(s.current_round(), 5);
        assert!(s.model(3).is_ok());
        assert!(matches!(s.model(2), Err(Error::Evicted { round: 2, .. })));
        assert!(s.delta_range(3, 4).is_ok());
        assert!(matches!(s.delta_range(2, 4), Err(Error::Evicted { .. })));
        assert!(matches!(s.combined_base(1), Err(Error::Evicted { .. })));
    }

    #[test]
    fn profiler_means_and_fallbacks() {
        let shape = line(800);
        let mut p = SizeProfiler::new("quant:4".parse().unwrap(), shape);
        p.observe(2, 100);
        p.observe(2, 300);
        assert_eq!(p.profiled_size(2), 200.0);
        assert_eq!(p.profiled_size(0), 0.0);
        // Analytic fallback: k segments of (4 + 400) bytes, capped at 3200.
        assert_eq!(p.profiled_size(3), 3.0 * 404.0);
        assert_eq!(p.profiled_size(8), 3200.0);

        let mut m = SizeProfiler::new("topk:0.2".parse().unwrap(), shape);
        assert_eq!(m.profiled_size(1), 740.0);
        m.observe(1, 700);
        assert_eq!(m.profiled_size(3), 2100.0);
        assert_eq!(m.profiled_size(6), 3200.0);
        // Observed span-3 mean below span-2 is clamped up.
        m.observe(2, 1300);
        m.observe(3, 1200);
        assert_eq!(m.profiled_size(3), 1300.0);
        for k in 1..10 {
            assert!(m.profiled_size(k + 1) >= m.profiled_size(k));
        }
    }

    #[test]
    fn commit_and_range_feed_profiler() {
        let mut s = store("topk:0.2", 100, 4);
        for r in 0..3 {
            s.commit_round(&update(100, r), &rng(r)).unwrap();
        }
        assert_eq!(s.profiler().observations(1), 3);
        let two = s.delta_range(1, 2).unwrap();
        assert_eq!(s.profiler().observations(2), 1);
        assert_eq!(s.profiler().profiled_size(2), two.wire_size() as f64);
        s.accumulated(0, 2).unwrap();
        assert_eq!(s.profiler().observations(3), 0);
    }
}
