//! Presampling of future cohorts and replacement of clients that went
//! offline before their training round.

use std::collections::BTreeSet;

use rand::seq::index;
use rand::Rng;

use crate::model::RngStream;
use crate::sim::ClientProfile;
use crate::{ClientId, Error, Result, Round};

/// All clients of a run, indexed densely by id.
#[derive(Debug, Clone)]
pub struct ClientRegistry {
    profiles: Vec<ClientProfile>,
}

impl ClientRegistry {
    pub fn new(profiles: Vec<ClientProfile>) -> Result<Self> {
        if profiles.is_empty() {
            return Err(Error::Empty("client registry"));
        }
        for (i, p) in profiles.iter().enumerate() {
            if p.id != i {
                return Err(Error::config("clients", format!("profile {i} has id {}", p.id)));
            }
            p.validate()?;
        }
        Ok(Self { profiles })
    }

    pub fn len(&self) -> usize {
        self.profiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.profiles.is_empty()
    }

    pub fn get(&self, id: ClientId) -> &ClientProfile {
        &self.profiles[id]
    }

    pub fn profiles(&self) -> &[ClientProfile] {
        &self.profiles
    }
}

/// Number of clients sampled for a target of `k` aggregated updates.
pub fn cohort_size(k: usize, oc: f64) -> usize {
    // 30 * 1.3 is 39.000000000000007 in binary floating point.
    ((k as f64 * oc) - 1e-9).ceil().max(k as f64) as usize
}

/// Clients chosen to train in `train_round`.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundPlan {
    pub train_round: Round,
    pub cohort: Vec<ClientId>,
    pub target: usize,
    /// Fewer clients than requested could be sampled or replaced.
    pub degraded: bool,
}

impl RoundPlan {
    pub fn contains(&self, id: ClientId) -> bool {
        self.cohort.contains(&id)
    }
}

/// Uniformly samples `ceil(k·oc)` distinct clients from `online` to train in
/// `train_round`. If too few clients are online, all of them are taken and
/// the plan is flagged as degraded.
pub fn presample(
    online: &BTreeSet<ClientId>,
    k: usize,
    oc: f64,
    train_round: Round,
    rng: &RngStream,
) -> RoundPlan {
    let want = cohort_size(k, oc);
    let pool: Vec<ClientId> = online.iter().copied().collect();
    let take = want.min(pool.len());
    let mut r = rng.rng();
    let cohort = index::sample(&mut r, pool.len(), take)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    RoundPlan {
        train_round,
        cohort,
        target: k,
        degraded: take < want,
    }
}

/// A departed cohort member and the client that took its place.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Replacement {
    pub departed: ClientId,
    pub replacement: Option<ClientId>,
}

/// Replaces every cohort member missing from `online` by a uniform draw from
/// the online clients outside the cohort. When the pool runs dry the member
/// is dropped and the plan flagged.
pub fn replace_offline(plan: &mut RoundPlan, online: &BTreeSet<ClientId>, rng: &RngStream) -> Vec<Replacement> {
    let mut out = Vec::new();
    let mut r = rng.rng();
    let mut slot = 0;
    while slot < plan.cohort.len() {
        let departed = plan.cohort[slot];
        if online.contains(&departed) {
            slot += 1;
            continue;
        }
        let pool: Vec<ClientId> = online.iter().copied().filter(|c| !plan.contains(*c)).collect();
        if pool.is_empty() {
            plan.cohort.remove(slot);
            plan.degraded = true;
            out.push(Replacement {
                departed,
                replacement: None,
            });
        } else {
            let pick = pool[r.random_range(0..pool.len())];
            plan.cohort[slot] = pick;
            out.push(Replacement {
                departed,
                replacement: Some(pick),
            });
            slot += 1;
        }
    }
    out
}
