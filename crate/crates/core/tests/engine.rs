use std::collections::BTreeSet;
use std::sync::Arc;

use fedfetch::compress::CompressorConfig;
use fedfetch::model::{MatrixShape, ParamVector, RngStream};
use fedfetch::sampling::ClientRegistry;
use fedfetch::sim::{
    finalize_metrics, AvailabilityMode, ClientProfile, ClientSync, Item, RoundReport, SchedulerMode, SimConfig,
    Simulation, Weighting, World,
};
use fedfetch::store::ServerStore;
use fedfetch::workload::{gen_synth_task, AvailabilityTrace, TaskConfig};

fn task_cfg() -> TaskConfig {
    TaskConfig {
        features: 9,
        classes: 4,
        samples_per_client: 20,
        test_samples: 100,
        batch_size: 10,
        ..TaskConfig::default()
    }
}

fn world(profiles: Vec<ClientProfile>, availability: Option<AvailabilityTrace>) -> World {
    let n = profiles.len();
    World {
        registry: ClientRegistry::new(profiles).unwrap(),
        task: Arc::new(gen_synth_task(n, &task_cfg(), 7).unwrap()),
        availability: availability.map(Arc::new),
    }
}

fn profile(id: usize, bw_dl: f64, bw_ul: f64, compute_s: f64) -> ClientProfile {
    ClientProfile {
        id,
        bw_dl,
        bw_ul,
        compute_s,
        weight: 1.0,
    }
}

fn heterogeneous(n: usize) -> Vec<ClientProfile> {
    (0..n)
        .map(|i| {
            let bw = 20.0 * 1.6f64.powi((i % 9) as i32);
            profile(i, bw, bw / 4.0, 2.0 + (i % 3) as f64)
        })
        .collect()
}

fn sim_cfg(k: usize, oc: f64, r: u64, comp: &str) -> SimConfig {
    SimConfig {
        clients_per_round: k,
        over_commitment: oc,
        prefetch_rounds: r,
        beta: 0.0,
        alpha: 0.125,
        scheduler: SchedulerMode::FedFetch,
        availability: AvailabilityMode::Full,
        downlink: comp.parse().unwrap(),
        uplink: comp.parse().unwrap(),
        weighting: Weighting::Uniform,
        seed: 11,
    }
}

fn dim() -> usize {
    task_cfg().dim()
}

fn check_identities(reports: &[RoundReport]) {
    for r in reports {
        assert_eq!(r.duration, r.fetch_time + r.compute_time + r.upload_time);
    }
    let m = finalize_metrics(reports).unwrap();
    assert_eq!(m.total_time, reports.iter().map(|r| r.duration).sum::<f64>());
    assert_eq!(m.total_volume, reports.iter().map(|r| r.total_bytes()).sum::<u64>());
    assert!(m.total_volume >= m.fetch_volume);
}

#[test]
fn single_client_closed_form() {
    let mut sim = Simulation::new(
        sim_cfg(1, 1.0, 0, "identity"),
        world(vec![profile(0, 400.0, 100.0, 3.0)], None),
    )
    .unwrap();
    let full = 4.0 * dim() as f64;
    for r in sim.run(3).unwrap() {
        assert_eq!(r.duration, full / 400.0 + 3.0 + full / 100.0);
        assert_eq!(r.prefetch_bytes, 0);
        assert_eq!(r.fetch_bytes, 4 * dim() as u64);
    }
}

#[test]
fn compute_time_is_the_slowest_aggregated() {
    let profiles = vec![profile(0, 100.0, 100.0, 2.0), profile(1, 100.0, 100.0, 4.0)];
    let mut sim = Simulation::new(sim_cfg(2, 1.0, 0, "identity"), world(profiles, None)).unwrap();
    let r = sim.run_round().unwrap();
    assert_eq!(r.compute_time, 4.0);
    assert_eq!(r.aggregated.len(), 2);
}

#[test]
fn over_commitment_discards_the_slowest() {
    let profiles: Vec<ClientProfile> = (0..60).map(|i| profile(i, 100.0, 50.0, 1.0 + i as f64)).collect();
    let mut sim = Simulation::new(sim_cfg(30, 1.3, 0, "topk:0.2"), world(profiles, None)).unwrap();
    let r = sim.run_round().unwrap();
    assert_eq!(r.participants, 39);
    assert_eq!(r.aggregated.len(), 30);
    // Network times are equal for everyone, so the cut is by compute time.
    let slowest_kept = r.aggregated.iter().max().unwrap();
    assert_eq!(r.compute_time, 1.0 + *slowest_kept as f64);
    assert_eq!(r.upload_bytes, 39 * CompressorConfig::TopK { ratio: 0.2 }.single_round_size(task_cfg().shape()));
}

fn line_store(cfg: &str, dim: usize) -> ServerStore {
    let shape = MatrixShape::new(1, dim).unwrap();
    ServerStore::new(ParamVector::zeros(dim), shape, cfg.parse().unwrap(), 1, 8).unwrap()
}

fn commit(store: &mut ServerStore, r: u64) {
    let dim = store.dim();
    let v: Vec<f64> = (0..dim).map(|i| ((i * 7 + r as usize) as f64).sin()).collect();
    store.commit_round(&ParamVector::new(v).unwrap(), &RngStream::new(r)).unwrap();
}

#[test]
fn prefetch_drains_budget_proportionally() {
    let mut store = line_store("topk:0.25", 40);
    commit(&mut store, 1);
    let base = store.base_model_size();
    let mut c = ClientSync::default();
    assert_eq!(c.advance(base / 2, &mut store, 2).unwrap(), base / 2);
    assert_eq!(c.synced(), None);
    assert_eq!(c.queued(), vec![(Item::Base(2), base / 2)]);
    assert_eq!(c.advance(10 * base, &mut store, 2).unwrap(), base - base / 2);
    assert_eq!(c.synced(), Some(2));
    assert!(c.queued().is_empty());
    assert!(c.local().unwrap().bit_eq(store.model(2).unwrap()));
}

#[test]
fn greedy_prefetch_follows_newest_update() {
    // Base model in round 1, the one-round update in round 2, the next one
    // in the train round 3.
    let mut store = line_store("topk:0.25", 40);
    let mut c = ClientSync::default();
    let base = store.base_model_size();
    commit(&mut store, 1);
    assert_eq!(c.advance(base, &mut store, 1).unwrap(), base);
    assert_eq!(c.synced(), Some(1));
    commit(&mut store, 2);
    let d11 = store.accumulated(1, 1).unwrap().wire_size();
    assert_eq!(c.advance(d11, &mut store, 2).unwrap(), d11);
    assert_eq!(c.synced(), Some(2));
    let d22 = store.accumulated(2, 2).unwrap().wire_size();
    assert_eq!(c.train_fetch(&mut store, 3).unwrap(), d22);
    assert_eq!(c.synced(), Some(3));
    let (moved, settled) = c.ledger();
    assert_eq!(moved, base + d11 + d22);
    assert_eq!(moved, settled);
    let err = c.local().unwrap().sub(store.model(3).unwrap()).unwrap().max_abs();
    assert!(err <= 1e-12, "{err}");
}

#[test]
fn train_fetch_pays_pending_plus_new_round() {
    let mut store = line_store("topk:0.25", 40);
    let mut c = ClientSync::default();
    let base = store.base_model_size();
    commit(&mut store, 1);
    c.advance(base, &mut store, 1).unwrap();
    commit(&mut store, 2);
    let d11 = store.accumulated(1, 1).unwrap().wire_size();
    c.advance(d11 / 2, &mut store, 2).unwrap();
    let pending = c.pending_bytes();
    assert_eq!(pending, d11 - d11 / 2);
    commit(&mut store, 3);
    let d22 = store.accumulated(2, 2).unwrap().wire_size();
    assert_eq!(c.train_fetch(&mut store, 3).unwrap(), pending + d22);
    let (moved, settled) = c.ledger();
    assert_eq!(moved, settled);
}

#[test]
fn fresh_client_fetches_dense_model() {
    let mut store = line_store("quant:4", 40);
    commit(&mut store, 1);
    let mut c = ClientSync::default();
    assert_eq!(c.train_fetch(&mut store, 2).unwrap(), 160);
    assert!(c.local().unwrap().bit_eq(store.model(2).unwrap()));
}

#[test]
fn up_to_date_client_fetches_nothing() {
    let mut store = line_store("topk:0.25", 40);
    commit(&mut store, 1);
    let mut c = ClientSync::default();
    c.advance(1_000, &mut store, 2).unwrap();
    assert_eq!(c.synced(), Some(2));
    assert_eq!(c.train_fetch(&mut store, 2).unwrap(), 0);
}

#[test]
fn stale_client_falls_back_to_dense_model() {
    // Identity updates: catching up two rounds costs twice the dense model.
    let mut store = line_store("identity", 40);
    let mut c = ClientSync::default();
    commit(&mut store, 1);
    c.advance(10_000, &mut store, 1).unwrap();
    commit(&mut store, 2);
    commit(&mut store, 3);
    assert_eq!(c.train_fetch(&mut store, 3).unwrap(), 160);
    assert!(c.local().unwrap().bit_eq(store.model(3).unwrap()));
}

fn run(cfg: SimConfig, profiles: Vec<ClientProfile>, rounds: u64) -> (Vec<RoundReport>, Vec<ParamVector>) {
    let mut sim = Simulation::new(cfg, world(profiles, None)).unwrap();
    let mut models = Vec::new();
    let mut reports = Vec::new();
    for _ in 0..rounds {
        reports.push(sim.run_round().unwrap());
        models.push(sim.store().current_model().clone());
    }
    (reports, models)
}

#[test]
fn prefetch_never_changes_the_model_sequence() {
    for comp in ["topk:0.2", "quant:4", "lowrank:2", "identity"] {
        let (base_r, base_m) = run(sim_cfg(5, 1.0, 0, comp), heterogeneous(30), 25);
        let (pre_r, pre_m) = run(sim_cfg(5, 1.0, 3, comp), heterogeneous(30), 25);
        for (a, b) in base_m.iter().zip(&pre_m) {
            assert!(a.bit_eq(b), "{comp}");
        }
        for (a, b) in base_r.iter().zip(&pre_r) {
            assert_eq!(a.accuracy, b.accuracy);
            assert_eq!(a.aggregated, b.aggregated);
            assert!(b.fetch_time <= a.fetch_time, "{comp} round {}", a.round);
            assert!(b.sync_error <= 1e-9, "{comp}: {}", b.sync_error);
        }
        check_identities(&base_r);
        check_identities(&pre_r);
        assert!(base_r.iter().all(|r| r.prefetch_bytes == 0));
        let ft = |rs: &[RoundReport]| rs.iter().map(|r| r.fetch_time).sum::<f64>();
        // A dense downlink leaves nothing to gain from fetching early.
        if comp == "identity" {
            assert_eq!(ft(&pre_r), ft(&base_r));
        } else {
            assert!(ft(&pre_r) < ft(&base_r), "{comp}");
        }
    }
}

#[test]
fn zero_lookahead_matches_no_scheduler() {
    let cfg = sim_cfg(5, 1.3, 0, "topk:0.2");
    let none = SimConfig {
        scheduler: SchedulerMode::None,
        prefetch_rounds: 3,
        ..cfg.clone()
    };
    let (a, _) = run(cfg, heterogeneous(30), 10);
    let (b, _) = run(none, heterogeneous(30), 10);
    assert_eq!(a, b);
}

#[test]
fn runs_are_deterministic() {
    let cfg = sim_cfg(6, 1.3, 3, "quant:4");
    let (a, _) = run(cfg.clone(), heterogeneous(40), 12);
    let (b, _) = run(cfg, heterogeneous(40), 12);
    assert_eq!(a, b);
}

#[test]
fn fixed_window_prefetches_more_than_one_round_window() {
    let mut cfg = sim_cfg(5, 1.0, 3, "topk:0.2");
    cfg.scheduler = SchedulerMode::Fixed(1);
    let (one, _) = run(cfg.clone(), heterogeneous(30), 20);
    cfg.scheduler = SchedulerMode::Fixed(3);
    let (three, _) = run(cfg, heterogeneous(30), 20);
    let pv = |rs: &[RoundReport]| rs.iter().map(|r| r.prefetch_bytes).sum::<u64>();
    assert!(pv(&three) > pv(&one));
    check_identities(&one);
    check_identities(&three);
}

#[test]
fn first_rounds_train_without_prefetch() {
    let mut sim = Simulation::new(sim_cfg(5, 1.0, 3, "topk:0.2"), world(heterogeneous(30), None)).unwrap();
    for _ in 0..3 {
        let r = sim.run_round().unwrap();
        assert_eq!(r.fetch_bytes, 5 * 4 * dim() as u64);
    }
    let r = sim.run_round().unwrap();
    assert!(r.fetch_bytes < 5 * 4 * dim() as u64);
}

fn churn(off: &[(usize, f64, f64)]) -> AvailabilityTrace {
    // Clients in `off` are offline during [from, to); everyone else is always
    // online.
    let mut map = std::collections::BTreeMap::new();
    for &(c, from, to) in off {
        map.insert(c, vec![(0.0, from), (to, f64::INFINITY)]);
    }
    AvailabilityTrace::new(map).unwrap()
}

#[test]
fn offline_members_are_dropped_or_replaced() {
    let profiles: Vec<ClientProfile> = (0..20).map(|i| profile(i, 1e5, 1e5, 10.0)).collect();
    // Even clients leave shortly after the first round starts.
    let mut cfg = sim_cfg(4, 1.0, 2, "topk:0.2");
    let off: Vec<(usize, f64, f64)> = (0..20).filter(|c| c % 2 == 0).map(|c| (c, 5.0, 1e9)).collect();
    let trace = churn(&off);

    cfg.availability = AvailabilityMode::Trace;
    let mut sim = Simulation::new(cfg.clone(), world(profiles.clone(), Some(trace.clone()))).unwrap();
    let reports = sim.run(8).unwrap();
    let later = &reports[1..];
    assert!(later.iter().all(|r| r.dropped.iter().all(|c| c % 2 == 0)));
    assert!(later.iter().any(|r| !r.dropped.is_empty()));
    assert!(later.iter().all(|r| r.aggregated.iter().all(|c| c % 2 == 1)));

    cfg.availability = AvailabilityMode::TraceReplace;
    let mut sim = Simulation::new(cfg, world(profiles, Some(trace))).unwrap();
    let reports = sim.run(8).unwrap();
    for r in &reports[1..] {
        assert!(r.dropped.is_empty());
        assert_eq!(r.aggregated.len(), 4);
        let set: BTreeSet<_> = r.aggregated.iter().collect();
        assert_eq!(set.len(), 4);
        assert!(r.aggregated.iter().all(|c| c % 2 == 1));
    }
    assert!(reports.iter().map(|r| r.replaced).sum::<usize>() > 0);
    check_identities(&reports);
}

#[test]
fn finalize_single_round_and_empty() {
    let (reports, _) = run(sim_cfg(3, 1.0, 0, "quant:4"), heterogeneous(10), 1);
    let m = finalize_metrics(&reports).unwrap();
    let r = &reports[0];
    assert_eq!(m.fetch_time, r.fetch_time);
    assert_eq!(m.total_time, r.duration);
    assert_eq!(m.fetch_volume, r.fetch_bytes);
    assert_eq!(m.total_volume, r.total_bytes());
    assert_eq!(m.prefetch_volume, 0);
    assert!(finalize_metrics(&[]).is_err());
}

#[test]
fn homogeneous_population_equalizes_schedulers() {
    let profiles: Vec<ClientProfile> = (0..30).map(|i| profile(i, 300.0, 75.0, 4.0)).collect();
    let mut ft = Vec::new();
    for s in [SchedulerMode::Fixed(1), SchedulerMode::Fixed(3), SchedulerMode::FedFetch] {
        let mut cfg = sim_cfg(5, 1.0, 3, "topk:0.2");
        cfg.scheduler = s;
        let (r, _) = run(cfg, profiles.clone(), 30);
        ft.push(r.iter().map(|x| x.fetch_time).sum::<f64>());
    }
    let lo = ft.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = ft.iter().copied().fold(0.0, f64::max);
    assert!(hi <= 1.01 * lo, "{ft:?}");
}
