//! Prefetch scheduling: round-duration smoothing, fetch-time estimation and
//! per-client prefetch start rounds.

use std::collections::BTreeMap;

use crate::store::SizeProfiler;
use crate::{ClientId, Error, Result, Round};

pub const DEFAULT_ALPHA: f64 = 0.125;

/// Exponentially weighted moving average of round durations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DurationEstimator {
    alpha: f64,
    estimate: Option<f64>,
}

impl Default for DurationEstimator {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            estimate: None,
        }
    }
}

impl DurationEstimator {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::config("alpha", format!("{alpha} not in (0, 1]")));
        }
        Ok(Self {
            alpha,
            estimate: None,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Current estimate in seconds; `None` before the first observation.
    pub fn estimate(&self) -> Option<f64> {
        self.estimate
    }

    /// `D ← α·d + (1 − α)·D`, or `D ← d` for the first observation.
    pub fn update(&mut self, observed: f64) -> Result<f64> {
        if !(observed > 0.0 && observed.is_finite()) {
            return Err(Error::Duration(observed));
        }
        let next = match self.estimate {
            None => observed,
            Some(prev) => self.alpha * observed + (1.0 - self.alpha) * prev,
        };
        self.estimate = Some(next);
        Ok(next)
    }
}

/// Expected download size of an update accumulated over a number of rounds.
pub trait SpanSizes {
    /// Bytes for `span` rounds; `span == 0` must be 0.
    fn span_size(&self, span: u64) -> f64;
}

impl SpanSizes for SizeProfiler {
    fn span_size(&self, span: u64) -> f64 {
        self.profiled_size(span)
    }
}

impl SpanSizes for BTreeMap<u64, f64> {
    fn span_size(&self, span: u64) -> f64 {
        if span == 0 {
            0.0
        } else {
            self[&span]
        }
    }
}

/// Estimated train-phase fetch time, in seconds, for a client with download
/// bandwidth `bw` (bytes/s) that starts prefetching in round `start` and
/// trains in `train_round`.
///
/// The prefetch phase is simulated round by round with a fixed round length
/// `d_avg`: first the dense base model, then whichever accumulated update is
/// newest once the client's budget frees up. The result is capped at the
/// cost of fetching a fresh dense model.
pub fn est_fetch_time(
    bw: f64,
    start: Round,
    train_round: Round,
    d_avg: f64,
    sizes: &impl SpanSizes,
    base_size: f64,
) -> f64 {
    debug_assert!(bw > 0.0 && start <= train_round);
    let mut remaining = base_size;
    let mut budget = 0.0f64;
    // The client holds the model of round `synced` once `remaining` drains.
    let mut synced = start;
    for j in start..train_round {
        budget = (budget + d_avg - remaining / bw).max(0.0);
        if budget > 0.0 {
            remaining = (sizes.span_size(j - synced) - budget * bw).max(0.0);
            synced = j;
        } else {
            remaining = (remaining - d_avg * bw).max(0.0);
        }
    }
    // A client never fetches more than a fresh dense model at training time.
    (remaining + sizes.span_size(train_round - synced)).min(base_size) / bw
}

/// Per-client prefetch start rounds for one cohort.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefetchSchedule {
    pub starts: BTreeMap<ClientId, Round>,
    /// Latest round at which every client still met the time limit.
    pub common_start: Round,
    /// Time limit in force after the last iteration (seconds).
    pub limit: f64,
}

/// 1-based nearest-rank index of the `(1+β)/OC` percentile among `n` values.
pub fn percentile_rank(n: usize, beta: f64, oc: f64) -> usize {
    let p = (1.0 + beta) / oc;
    ((p * n as f64 - 1e-9).ceil() as usize).clamp(1, n)
}

/// Assigns each cohort member the latest start round whose estimated
/// train-phase fetch time stays within the time limit.
///
/// Rounds are scanned from `presample_round` to `train_round`. Whenever every
/// member meets the current limit, the limit is reset to the `(1+β)/OC`
/// nearest-rank percentile of that round's estimates. Members that meet the
/// limit in a round move their start to it; the others keep their earlier
/// start.
#[allow(clippy::too_many_arguments)]
pub fn schedule_prefetch(
    cohort: &[(ClientId, f64)],
    presample_round: Round,
    train_round: Round,
    d_avg: f64,
    sizes: &impl SpanSizes,
    base_size: f64,
    beta: f64,
    oc: f64,
) -> PrefetchSchedule {
    let mut starts = BTreeMap::new();
    let mut limit = f64::INFINITY;
    let mut common_start = presample_round;
    for t in presample_round..=train_round {
        let est: Vec<f64> = cohort
            .iter()
            .map(|&(_, bw)| est_fetch_time(bw, t, train_round, d_avg, sizes, base_size))
            .collect();
        let fits: Vec<bool> = est.iter().map(|&e| e <= limit).collect();
        if fits.iter().all(|&f| f) && !cohort.is_empty() {
            common_start = t;
            let mut sorted = est.clone();
            sorted.sort_by(f64::total_cmp);
            limit = sorted[percentile_rank(sorted.len(), beta, oc) - 1];
        }
        for (&(id, _), fit) in cohort.iter().zip(fits) {
            if fit {
                starts.insert(id, t);
            }
        }
    }
    PrefetchSchedule {
        starts,
        common_start,
        limit,
    }
}

/// Every member starts `window` rounds before training (clamped to the
/// presampling round).
pub fn fixed_window(cohort: &[ClientId], presample_round: Round, train_round: Round, window: u64) -> PrefetchSchedule {
    let start = train_round.saturating_sub(window).max(presample_round);
    PrefetchSchedule {
        starts: cohort.iter().map(|&c| (c, start)).collect(),
        common_start: start,
        limit: f64::INFINITY,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sizes() -> BTreeMap<u64, f64> {
        [(1, 20.0), (2, 35.0), (3, 45.0)].into_iter().collect()
    }

    #[test]
    fn ewma_examples() {
        let mut e = DurationEstimator::new(0.125).unwrap();
        assert_eq!(e.update(60.0).unwrap(), 60.0);
        let mut e = DurationEstimator::new(0.125).unwrap();
        e.update(100.0).unwrap();
        assert_eq!(e.update(100.0).unwrap(), 100.0);
        assert_eq!(e.update(200.0).unwrap(), 112.5);
    }

    #[test]
    fn ewma_rejects_bad_input() {
        assert!(DurationEstimator::new(0.0).is_err());
        assert!(DurationEstimator::new(1.5).is_err());
        let mut e = DurationEstimator::default();
        assert!(matches!(e.update(0.0), Err(Error::Duration(_))));
        assert!(matches!(e.update(-3.0), Err(Error::Duration(_))));
        assert_eq!(e.estimate(), None);
    }

    // Each case below was executed by hand with base = 100 bytes,
    // D_avg = 10 s and span sizes {1: 20, 2: 35, 3: 45}.
    #[test]
    fn est_fetch_time_hand_executed() {
        let s = sizes();
        // No prefetch rounds: base / BW.
        assert_eq!(est_fetch_time(5.0, 3, 3, 10.0, &s, 100.0), 20.0);
        // j=2: B=9.9, U=0, l=2  =>  20/1000.
        assert_eq!(est_fetch_time(1000.0, 2, 3, 10.0, &s, 100.0), 0.02);
        // j=3: B=0, U=0; j=4: B=10, U=0, l=4  =>  20/10.
        assert_eq!(est_fetch_time(10.0, 3, 5, 10.0, &s, 100.0), 2.0);
        // j=0: U=60; j=1: U=20; j=2: B=5, U=35-20=15, l=2  =>  (15+20)/4.
        assert_eq!(est_fetch_time(4.0, 0, 3, 10.0, &s, 100.0), 8.75);
        // Budget accumulates: B=5, 15, 25 with U=0 throughout, l=2  =>  20/20.
        assert_eq!(est_fetch_time(20.0, 0, 3, 10.0, &s, 100.0), 1.0);
        // j=1: U=20; j=2: B=7.5, U=0, l=2  =>  20/8.
        assert_eq!(est_fetch_time(8.0, 1, 3, 10.0, &s, 100.0), 2.5);
        // Never catches up: U=80, 60, 40  =>  (40+45)/2.
        assert_eq!(est_fetch_time(2.0, 0, 3, 10.0, &s, 100.0), 42.5);
    }

    #[test]
    fn est_fetch_time_monotone_in_bandwidth() {
        let s = sizes();
        for start in 0..=3 {
            let mut prev = f64::INFINITY;
            for k in 1..400 {
                let bw = k as f64 * 0.25;
                let e = est_fetch_time(bw, start, 3, 10.0, &s, 100.0);
                assert!(e <= prev + 1e-12, "start={start} bw={bw}");
                assert!(e <= 100.0 / bw + 1e-12);
                prev = e;
            }
        }
    }

    #[test]
    fn percentile_ranks() {
        assert_eq!(percentile_rank(26, 0.0, 1.3), 20);
        assert_eq!(percentile_rank(39, 0.0, 1.3), 30);
        assert_eq!(percentile_rank(26, 0.3, 1.3), 26);
        assert_eq!(percentile_rank(10, 0.0, 1.0), 10);
        assert_eq!(percentile_rank(1, 0.0, 5.0), 1);
    }

    #[test]
    fn homogeneous_cohort_moves_together() {
        let cohort: Vec<(ClientId, f64)> = (0..5).map(|i| (i, 4.0)).collect();
        let sched = schedule_prefetch(&cohort, 0, 3, 10.0, &sizes(), 100.0, 0.0, 1.0);
        let first = sched.starts[&0];
        assert!(sched.starts.values().all(|&p| p == first));
        // The shared start is the latest round whose estimate stays within the
        // limit set by the earlier rounds.
        let est = |t| est_fetch_time(4.0, t, 3, 10.0, &sizes(), 100.0);
        assert!(est(first) <= sched.limit);
        for later in first + 1..=3 {
            assert!(est(later) > sched.limit);
        }
    }

    #[test]
    fn ample_identity_bandwidth_delays_everyone_to_train_round() {
        // Identity downlink: every accumulated update is a full model.
        let full: BTreeMap<u64, f64> = [(1, 100.0), (2, 100.0), (3, 100.0)].into_iter().collect();
        let cohort: Vec<(ClientId, f64)> = (0..4).map(|i| (i, 1e6)).collect();
        let sched = schedule_prefetch(&cohort, 0, 3, 10.0, &full, 100.0, 0.0, 1.0);
        assert!(sched.starts.values().all(|&p| p == 3));
        assert_eq!(sched.common_start, 3);
    }

    #[test]
    fn slow_straggler_starts_first() {
        // Fast, typical and straggler: the straggler still benefits from
        // every extra round it is given.
        let cohort = vec![(0, 50.0), (1, 12.0), (2, 3.0)];
        let sched = schedule_prefetch(&cohort, 4, 7, 10.0, &sizes(), 100.0, 0.0, 1.0);
        assert_eq!(sched.starts[&2], 4);
        assert!(sched.starts[&0] >= sched.starts[&1]);
        assert!(sched.starts[&1] >= sched.starts[&2]);
        assert_eq!(sched.starts.len(), 3);
    }

    #[test]
    fn no_progress_client_gains_nothing_from_prefetch() {
        // Once the base model cannot be fetched within the window, the
        // estimate is the fresh-model cost from every start round.
        let e: Vec<f64> = (4..=7)
            .map(|t| est_fetch_time(1e-6, t, 7, 10.0, &sizes(), 100.0))
            .collect();
        assert!(e.iter().all(|&v| v == 100.0 / 1e-6));
    }

    #[test]
    fn fixed_window_starts() {
        let s = fixed_window(&[1, 2], 5, 8, 1);
        assert!(s.starts.values().all(|&p| p == 7));
        let s = fixed_window(&[1, 2], 5, 8, 10);
        assert!(s.starts.values().all(|&p| p == 5));
    }
}
