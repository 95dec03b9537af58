//! Equivalent changes of measure on the lattice.
//!
//! A [`ControlPolicy`] assigns a drift tilt `theta` to every non-terminal
//! node; the tilt at `(t, j)` governs the step `t -> t + 1` and moves the
//! branch probabilities to `q_up = (1 + theta sqrt(dt)) / 2` and
//! `q_down = (1 - theta sqrt(dt)) / 2`, so the one-step mean of the Brownian
//! increment becomes exactly `theta dt`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{LatticeModel, NodeTable, StoppingRule};
use crate::penalty::PenaltySpec;

/// Distance kept between `|theta| sqrt(dt)` and 1.
pub const TILT_MARGIN: f64 = 1e-6;

/// Largest tilt magnitude admissible on a lattice with step `dt`.
pub fn max_tilt(dt: f64) -> f64 {
    (1.0 - TILT_MARGIN) / dt.sqrt()
}

pub fn tilt_probabilities(theta: f64, dt: f64) -> Result<(f64, f64)> {
    if !(dt > 0.0) {
        return Err(Error::param("measures", "dt", "must be positive"));
    }
    let s = theta * dt.sqrt();
    if !(s.abs() <= 1.0 - TILT_MARGIN) {
        return Err(Error::param(
            "measures",
            "theta",
            format!("|theta| sqrt(dt) = {} exceeds 1 - {TILT_MARGIN}", s.abs()),
        ));
    }
    Ok(((1.0 + s) / 2.0, (1.0 - s) / 2.0))
}

/// Unchecked branch probabilities; callers validate tilts on construction.
#[inline]
pub(crate) fn branch_probs(theta: f64, sqrt_dt: f64) -> (f64, f64) {
    let s = theta * sqrt_dt;
    ((1.0 + s) / 2.0, (1.0 - s) / 2.0)
}

/// Markov drift tilt, one value per node. Terminal entries are unused and
/// held at zero; tilts before `active_from` are zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlPolicy {
    theta: NodeTable<f64>,
    active_from: usize,
}

impl ControlPolicy {
    pub fn new(model: &LatticeModel, theta: NodeTable<f64>, active_from: usize) -> Result<Self> {
        if !theta.matches(model) {
            return Err(Error::shape(
                "measures",
                format!("policy has {} steps, lattice has {}", theta.n_steps(), model.n_steps()),
            ));
        }
        if active_from > model.n_steps() {
            return Err(Error::param("measures", "active_from", "exceeds the horizon"));
        }
        let n = model.n_steps();
        let limit = max_tilt(model.dt());
        for t in 0..n {
            for (j, &th) in theta.level(t).iter().enumerate() {
                if !(th.abs() <= limit) {
                    return Err(Error::param(
                        "measures",
                        "theta",
                        format!("tilt {th} at (t={t}, j={j}) exceeds the admissible bound {limit}"),
                    ));
                }
                if t < active_from && th != 0.0 {
                    return Err(Error::param(
                        "measures",
                        "theta",
                        format!("tilt at (t={t}, j={j}) must be zero before active_from={active_from}"),
                    ));
                }
            }
        }
        let mut theta = theta;
        theta.level_mut(n).iter_mut().for_each(|v| *v = 0.0);
        Ok(Self { theta, active_from })
    }

    pub fn zero(model: &LatticeModel, active_from: usize) -> Self {
        Self {
            theta: NodeTable::filled(model.n_steps(), 0.0),
            active_from: active_from.min(model.n_steps()),
        }
    }

    /// Same tilt at every node from `active_from` on.
    pub fn constant(model: &LatticeModel, theta: f64, active_from: usize) -> Result<Self> {
        let n = model.n_steps();
        Self::new(
            model,
            NodeTable::from_fn(n, |t, _| if t >= active_from && t < n { theta } else { 0.0 }),
            active_from,
        )
    }

    pub fn from_fn(model: &LatticeModel, active_from: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let n = model.n_steps();
        Self::new(
            model,
            NodeTable::from_fn(n, |t, j| if t >= active_from && t < n { f(t, j) } else { 0.0 }),
            active_from,
        )
    }

    pub fn theta(&self) -> &NodeTable<f64> {
        &self.theta
    }

    #[inline]
    pub fn at(&self, t: usize, j: usize) -> f64 {
        self.theta.at(t, j)
    }

    pub fn active_from(&self) -> usize {
        self.active_from
    }

    pub fn n_steps(&self) -> usize {
        self.theta.n_steps()
    }
}

/// Density of the tilted measure against the reference measure, stored per
/// path: level `t` holds `2^t` entries, bit `s` of the index set when step
/// `s` moved up. A Markov tilt makes the density path-dependent even though
/// the tilt itself is node-indexed, hence the path storage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureDensity {
    levels: Vec<Vec<f64>>,
}

/// Largest horizon for which densities are materialized per path.
pub const MAX_DENSITY_STEPS: usize = 20;

impl MeasureDensity {
    pub fn n_steps(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn level(&self, t: usize) -> &[f64] {
        &self.levels[t]
    }

    /// Density along the path prefix encoded by `bits` at level `t`.
    pub fn at(&self, t: usize, bits: usize) -> f64 {
        self.levels[t][bits]
    }

    /// Reference-measure mean of the density at level `t`.
    pub fn level_mean(&self, t: usize) -> f64 {
        self.levels[t].iter().sum::<f64>() / (1u64 << t) as f64
    }

    /// Ratio `Q(t, j) / P(t, j)` of node probabilities.
    pub fn node_marginals(&self) -> NodeTable<f64> {
        let n = self.n_steps();
        let mut sums = NodeTable::filled(n, 0.0);
        let mut counts = NodeTable::filled(n, 0.0);
        for t in 0..=n {
            for (bits, &z) in self.levels[t].iter().enumerate() {
                let j = (bits as u64).count_ones() as usize;
                sums.set(t, j, sums.at(t, j) + z);
                counts.set(t, j, counts.at(t, j) + 1.0);
            }
        }
        sums.map(|t, j, &s| s / counts.at(t, j))
    }
}

pub fn density_process(model: &LatticeModel, policy: &ControlPolicy) -> Result<MeasureDensity> {
    let n = model.n_steps();
    if n > MAX_DENSITY_STEPS {
        return Err(Error::param(
            "measures",
            "n_steps",
            format!("path densities are materialized only up to {MAX_DENSITY_STEPS} steps, got {n}"),
        ));
    }
    if policy.n_steps() != n {
        return Err(Error::shape("measures", "policy and lattice differ in steps"));
    }
    let sq = model.increment();
    let mut levels = vec![vec![1.0]];
    let mut ups = vec![0usize];
    for t in 0..n {
        let prev = &levels[t];
        let mut next = vec![0.0; prev.len() * 2];
        let mut next_ups = vec![0usize; prev.len() * 2];
        for (bits, (&z, &j)) in prev.iter().zip(&ups).enumerate() {
            let (qu, qd) = branch_probs(policy.at(t, j), sq);
            next[bits] = z * 2.0 * qd;
            next_ups[bits] = j;
            next[bits | 1 << t] = z * 2.0 * qu;
            next_ups[bits | 1 << t] = j + 1;
        }
        levels.push(next);
        ups = next_ups;
    }
    Ok(MeasureDensity { levels })
}

/// Whether each node lies at or after the rule's stopping time on every path
/// through it (`Some(true)`), on none (`Some(false)`), or on some but not all
/// (`None`).
pub fn stopped_by(rule: &StoppingRule) -> NodeTable<Option<bool>> {
    let n = rule.n_steps();
    // (reached unstopped, reached already stopped)
    let mut flags = NodeTable::filled(n, (false, false));
    flags.set(0, 0, (true, false));
    for t in 0..n {
        for j in 0..=t {
            let (live, done) = flags.at(t, j);
            let stops = live && rule.stops_at(t, j);
            let out_live = live && !stops;
            let out_done = done || stops;
            for c in [j, j + 1] {
                let (l, d) = flags.at(t + 1, c);
                flags.set(t + 1, c, (l || out_live, d || out_done));
            }
        }
    }
    flags.map(|t, j, &(live, done)| {
        let at_or_after = done || (live && rule.stops_at(t, j));
        let before = live && !rule.stops_at(t, j);
        match (at_or_after, before) {
            (true, true) => None,
            (true, false) => Some(true),
            _ => Some(false),
        }
    })
}

/// Follows `policy_q` on steps taken before `gamma` stops and `policy_qtilde`
/// on steps taken at or after it.
pub fn paste(
    model: &LatticeModel,
    policy_q: &ControlPolicy,
    policy_qtilde: &ControlPolicy,
    gamma: &StoppingRule,
) -> Result<ControlPolicy> {
    if policy_q.active_from != policy_qtilde.active_from {
        return Err(Error::param(
            "measures",
            "active_from",
            "pasted policies must share active_from",
        ));
    }
    if policy_q.active_from > gamma.floor() {
        return Err(Error::param(
            "measures",
            "active_from",
            "must not exceed the pasting rule's floor",
        ));
    }
    let n = model.n_steps();
    let stopped = stopped_by(gamma);
    let mut theta = NodeTable::filled(n, 0.0);
    for t in 0..n {
        for j in 0..=t {
            let v = match stopped.at(t, j) {
                Some(true) => policy_qtilde.at(t, j),
                Some(false) => policy_q.at(t, j),
                None => return Err(Error::UnsupportedRule { t, j }),
            };
            theta.set(t, j, v);
        }
    }
    ControlPolicy::new(model, theta, policy_q.active_from)
}

/// Zeroes the tilt wherever `|theta| > k` or `f(t, theta) > k`.
pub fn truncate_policy(policy: &ControlPolicy, spec: &PenaltySpec, k: f64) -> ControlPolicy {
    let theta = policy.theta.map(|t, _, &th| {
        if th.abs() > k || spec.f_eval(t, th) > k {
            0.0
        } else {
            th
        }
    });
    ControlPolicy {
        theta,
        active_from: policy.active_from,
    }
}

/// Start of a penalty accumulation window.
#[derive(Debug, Clone, Copy)]
pub enum Start<'a> {
    Level(usize),
    Rule(&'a StoppingRule),
}

/// Expected accumulated penalty `sum f(t, theta) dt` under the tilted
/// measure over the steps taken in `[start, stop)`, from the root.
pub fn penalty_cost(
    model: &LatticeModel,
    spec: &PenaltySpec,
    policy: &ControlPolicy,
    start: Start<'_>,
    stop: &StoppingRule,
) -> f64 {
    let n = model.n_steps();
    let sq = model.increment();
    let dt = model.dt();
    // Masses of paths that have not started yet, and of running paths.
    let mut waiting = NodeTable::filled(n, 0.0);
    let mut running = NodeTable::filled(n, 0.0);
    waiting.set(0, 0, 1.0);
    let mut total = 0.0;
    for t in 0..n {
        for j in 0..=t {
            let mut w = waiting.at(t, j);
            let mut r = running.at(t, j);
            let starts_here = match start {
                Start::Level(s) => t >= s,
                Start::Rule(rule) => rule.stops_at(t, j),
            };
            if starts_here {
                r += w;
                w = 0.0;
            }
            if stop.stops_at(t, j) {
                // A path that meets the stop rule before starting has an
                // empty window.
                r = 0.0;
                w = 0.0;
            }
            let th = policy.at(t, j);
            total += r * spec.f_eval(t, th) * dt;
            let (qu, qd) = branch_probs(th, sq);
            waiting.set(t + 1, j + 1, waiting.at(t + 1, j + 1) + w * qu);
            waiting.set(t + 1, j, waiting.at(t + 1, j) + w * qd);
            running.set(t + 1, j + 1, running.at(t + 1, j + 1) + r * qu);
            running.set(t + 1, j, running.at(t + 1, j) + r * qd);
        }
    }
    total
}

/// Whether the tilted measure's expected total penalty fits the `k T`
/// budget of the truncated family.
pub fn within_truncation_budget(model: &LatticeModel, spec: &PenaltySpec, policy: &ControlPolicy, k: f64) -> bool {
    let terminal = StoppingRule::at_level(model, model.n_steps()).expect("terminal level is valid");
    penalty_cost(model, spec, policy, Start::Level(0), &terminal) <= k * model.horizon()
}
