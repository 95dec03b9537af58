//! Exhaustive ground truth on a full binary tree of histories.
//!
//! Every adapted stopping rule and every history-dependent grid policy is
//! enumerated; game payoffs are computed by path arithmetic (products of
//! one-step probabilities along each history). On a full tree each history
//! node has a single path to it, so a policy fixes the probability of
//! reaching every node and the penalty accumulated on the way there.
//!
//! History node `(t, bits)` has flat index `2^t - 1 + bits`, where bit `s` of
//! `bits` is set when step `s` moved up.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{LatticeModel, PayoffProcess};
use crate::measures::branch_probs;
use crate::penalty::PenaltySpec;
use crate::rbsde::SaddleCertificate;
use crate::stopping::ThetaGrid;

pub const MAX_TREE_STEPS: usize = 5;
pub const DEFAULT_POLICY_CAP: u128 = 10_000_000;
pub const DEFAULT_RULE_CAP: u128 = 1_000_000;

#[inline]
fn index(t: usize, bits: usize) -> usize {
    (1 << t) - 1 + bits
}

#[inline]
fn depth(idx: usize) -> usize {
    (usize::BITS - 1 - (idx + 1).leading_zeros()) as usize
}

#[inline]
fn children(idx: usize) -> (usize, usize) {
    let t = depth(idx);
    let bits = idx + 1 - (1 << t);
    (index(t + 1, bits), index(t + 1, bits | 1 << t))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FullTree {
    n_steps: usize,
    dt: f64,
    payoff: Vec<f64>,
}

impl FullTree {
    /// `payoff` is indexed by flat history index and must have `2^(N+1) - 1`
    /// entries.
    pub fn new(n_steps: usize, dt: f64, payoff: Vec<f64>) -> Result<Self> {
        if n_steps == 0 || n_steps > MAX_TREE_STEPS {
            return Err(Error::param(
                "oracle",
                "n_steps",
                format!("full trees support 1..={MAX_TREE_STEPS} steps, got {n_steps}"),
            ));
        }
        if !(dt > 0.0) {
            return Err(Error::param("oracle", "dt", "must be positive"));
        }
        let nodes = (1usize << (n_steps + 1)) - 1;
        if payoff.len() != nodes {
            return Err(Error::shape(
                "oracle",
                format!("payoff has {} entries, tree has {nodes} nodes", payoff.len()),
            ));
        }
        if payoff.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("oracle", "payoff", "must be finite"));
        }
        Ok(Self { n_steps, dt, payoff })
    }

    /// Lifts a lattice payoff to histories: `(t, bits) -> Y(t, popcount(bits))`.
    pub fn from_payoff(model: &LatticeModel, y: &PayoffProcess) -> Result<Self> {
        let n = model.n_steps();
        if y.n_steps() != n {
            return Err(Error::shape("oracle", "payoff and lattice differ in steps"));
        }
        let mut payoff = Vec::new();
        for t in 0..=n.min(MAX_TREE_STEPS) {
            for bits in 0..1usize << t {
                payoff.push(y.at(t, bits.count_ones() as usize));
            }
        }
        Self::new(n, model.dt(), payoff)
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn node_count(&self) -> usize {
        self.payoff.len()
    }

    pub fn payoff(&self, t: usize, bits: usize) -> f64 {
        self.payoff[index(t, bits)]
    }

    pub fn bound(&self) -> f64 {
        self.payoff.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    fn model(&self) -> LatticeModel {
        LatticeModel::new(self.n_steps, self.dt).expect("tree parameters validated on construction")
    }

    /// Reach probability and accumulated penalty at every history node
    /// under the history-indexed tilts.
    fn path_measure(&self, spec: &PenaltySpec, tilts: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let sq = self.dt.sqrt();
        let nodes = self.node_count();
        let mut prob = vec![0.0; nodes];
        let mut cost = vec![0.0; nodes];
        prob[0] = 1.0;
        let internal = (1usize << self.n_steps) - 1;
        for idx in 0..internal {
            let t = depth(idx);
            let th = tilts[idx];
            let (qu, qd) = branch_probs(th, sq);
            let c = cost[idx] + spec.f_eval(t, th) * self.dt;
            let (dn, up) = children(idx);
            prob[dn] = prob[idx] * qd;
            prob[up] = prob[idx] * qu;
            cost[dn] = c;
            cost[up] = c;
        }
        (prob, cost)
    }

    fn payoff_of(&self, rule: &TreeRule, prob: &[f64], cost: &[f64]) -> f64 {
        rule.stop_nodes
            .iter()
            .map(|&s| prob[s] * (self.payoff[s] + cost[s]))
            .sum()
    }
}

/// An adapted stopping rule, stored as the set of history nodes where paths
/// stop. The set meets every root-to-leaf path exactly once.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeRule {
    pub stop_nodes: Vec<usize>,
}

impl TreeRule {
    /// Stop nodes as `(t, bits)` pairs.
    pub fn histories(&self) -> Vec<(usize, usize)> {
        self.stop_nodes
            .iter()
            .map(|&i| {
                let t = depth(i);
                (t, i + 1 - (1 << t))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnumeratedGame {
    pub n_steps: usize,
    pub nu: usize,
    pub grid: Vec<f64>,
    pub stopping_rules: Vec<TreeRule>,
    /// History nodes where the adversary chooses a tilt (depth in `nu..N`).
    pub decision_nodes: Vec<usize>,
    pub policy_count: u64,
}

impl EnumeratedGame {
    /// Tilts of the `i`-th policy, one per history node, decoded in mixed
    /// radix over the decision nodes.
    pub fn policy(&self, mut i: u64) -> Vec<f64> {
        let nodes = (1usize << (self.n_steps + 1)) - 1;
        let mut tilts = vec![0.0; nodes];
        let g = self.grid.len() as u64;
        for &d in &self.decision_nodes {
            tilts[d] = self.grid[(i % g) as usize];
            i /= g;
        }
        tilts
    }
}

/// `c(leaf) = 1`, `c(node) = [depth >= nu] + c(left) c(right)`.
pub fn rule_count(n_steps: usize, nu: usize) -> u128 {
    fn go(remaining: usize, depth: usize, nu: usize) -> u128 {
        if remaining == 0 {
            return 1;
        }
        let sub = go(remaining - 1, depth + 1, nu);
        u128::from(depth >= nu) + sub * sub
    }
    go(n_steps, 0, nu)
}

pub fn policy_count(n_steps: usize, nu: usize, grid_size: usize) -> u128 {
    let decisions: u32 = (nu.min(n_steps)..n_steps).map(|t| 1u32 << t).sum();
    (grid_size as u128).checked_pow(decisions).unwrap_or(u128::MAX)
}

fn enumerate_rules(tree: &FullTree, idx: usize, nu: usize) -> Vec<Vec<usize>> {
    let t = depth(idx);
    if t == tree.n_steps {
        return vec![vec![idx]];
    }
    let (dn, up) = children(idx);
    let left = enumerate_rules(tree, dn, nu);
    let right = enumerate_rules(tree, up, nu);
    let mut out = Vec::with_capacity(left.len() * right.len() + 1);
    if t >= nu {
        out.push(vec![idx]);
    }
    for l in &left {
        for r in &right {
            let mut s = l.clone();
            s.extend_from_slice(r);
            out.push(s);
        }
    }
    out
}

pub fn enumerate_game(tree: &FullTree, spec: &PenaltySpec, grid: &ThetaGrid, nu: usize) -> Result<EnumeratedGame> {
    enumerate_game_with_cap(tree, spec, grid, nu, DEFAULT_POLICY_CAP)
}

pub fn enumerate_game_with_cap(
    tree: &FullTree,
    spec: &PenaltySpec,
    grid: &ThetaGrid,
    nu: usize,
    cap: u128,
) -> Result<EnumeratedGame> {
    let n = tree.n_steps;
    if nu > n {
        return Err(Error::param("oracle", "nu", format!("{nu} exceeds horizon {n}")));
    }
    grid.validate(&tree.model(), spec)?;
    let rules = rule_count(n, nu);
    let policies = policy_count(n, nu, grid.len());
    if policies > cap || rules > DEFAULT_RULE_CAP {
        return Err(Error::Budget { rules, policies, cap });
    }
    let stopping_rules: Vec<TreeRule> = enumerate_rules(tree, 0, nu)
        .into_iter()
        .map(|stop_nodes| TreeRule { stop_nodes })
        .collect();
    debug_assert_eq!(stopping_rules.len() as u128, rules);
    let decision_nodes: Vec<usize> = (0..(1usize << n) - 1).filter(|&i| depth(i) >= nu).collect();
    Ok(EnumeratedGame {
        n_steps: n,
        nu,
        grid: grid.values().to_vec(),
        stopping_rules,
        decision_nodes,
        policy_count: policies as u64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleValues {
    /// `max_rule min_policy E_Q[Y_rule + sum f dt]`.
    pub lower: f64,
    /// `min_policy max_rule E_Q[Y_rule + sum f dt]`.
    pub upper: f64,
    /// Index of the rule attaining `lower`.
    pub maximizing_rule: usize,
    /// Index of the policy attaining `upper`.
    pub minimizing_policy: u64,
}

pub fn brute_force_values(game: &EnumeratedGame, tree: &FullTree, spec: &PenaltySpec) -> Result<OracleValues> {
    if game.n_steps != tree.n_steps {
        return Err(Error::shape("oracle", "game and tree differ in steps"));
    }
    let n_rules = game.stopping_rules.len();
    let init = || (vec![f64::INFINITY; n_rules], f64::INFINITY, 0u64);
    let (per_rule_min, upper, minimizing_policy) = (0..game.policy_count)
        .into_par_iter()
        .fold(init, |(mut mins, best_max, best_idx), i| {
            let (prob, cost) = tree.path_measure(spec, &game.policy(i));
            let mut worst = f64::NEG_INFINITY;
            for (m, rule) in mins.iter_mut().zip(&game.stopping_rules) {
                let v = tree.payoff_of(rule, &prob, &cost);
                *m = m.min(v);
                worst = worst.max(v);
            }
            if worst < best_max || (worst == best_max && i < best_idx) {
                (mins, worst, i)
            } else {
                (mins, best_max, best_idx)
            }
        })
        .reduce(init, |a, b| {
            let mins = a.0.iter().zip(&b.0).map(|(x, y)| x.min(*y)).collect();
            let pick_b = b.1 < a.1 || (b.1 == a.1 && b.2 < a.2);
            if pick_b {
                (mins, b.1, b.2)
            } else {
                (mins, a.1, a.2)
            }
        });
    let (maximizing_rule, lower) =
        per_rule_min.iter().enumerate().fold(
            (0, f64::NEG_INFINITY),
            |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) },
        );
    Ok(OracleValues {
        lower,
        upper,
        maximizing_rule,
        minimizing_policy,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinimaxReport {
    pub lower: f64,
    pub upper: f64,
    pub dp_value: f64,
    /// `upper - lower`.
    pub duality_gap: f64,
    /// `|lower - dp_value|`.
    pub dp_gap: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub rule_count: usize,
    pub policy_count: u64,
    /// Stop histories `(t, bits)` of the maximizing rule.
    pub witness_rule: Vec<(usize, usize)>,
    /// Tilts of the minimizing policy, by flat history index.
    pub witness_policy: Vec<f64>,
}

/// Gaps are judged against `1e-10 * max(1, ||Y|| + T)`.
pub fn verify_minimax(
    game: &EnumeratedGame,
    tree: &FullTree,
    spec: &PenaltySpec,
    value_from_dp: f64,
) -> Result<MinimaxReport> {
    let vals = brute_force_values(game, tree, spec)?;
    let tolerance = 1e-10 * (tree.bound() + tree.n_steps as f64 * tree.dt).max(1.0);
    let duality_gap = vals.upper - vals.lower;
    let dp_gap = (vals.lower - value_from_dp).abs();
    Ok(MinimaxReport {
        lower: vals.lower,
        upper: vals.upper,
        dp_value: value_from_dp,
        duality_gap,
        dp_gap,
        tolerance,
        passed: duality_gap.abs() <= tolerance && dp_gap <= tolerance,
        rule_count: game.stopping_rules.len(),
        policy_count: game.policy_count,
        witness_rule: game.stopping_rules[vals.maximizing_rule].histories(),
        witness_policy: game.policy(vals.minimizing_policy),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaddleReport {
    /// `E_{Q*}[Y^{Q*}_{sigma*}]` on the tree.
    pub saddle_payoff: f64,
    /// `min_nu E_{Q*}[Y^{Q*}_{sigma*}] - E_{Q*}[Y^{Q*}_nu]`.
    pub left_slack: f64,
    /// `min_Q E_Q[Y^Q_{sigma*}] - E_{Q*}[Y^{Q*}_{sigma*}]`.
    pub right_slack: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub rules_checked: usize,
    pub policies_checked: u64,
    /// Stop histories of the rule with the smallest left slack.
    pub left_witness: Vec<(usize, usize)>,
    /// Tilts of the policy with the smallest right slack.
    pub right_witness: Vec<f64>,
}

/// Lifts the certificate's Markov `theta*` and `sigma*` to histories and
/// checks both saddle inequalities against every enumerated deviation.
pub fn verify_saddle_exhaustive(
    cert: &SaddleCertificate,
    game: &EnumeratedGame,
    tree: &FullTree,
    spec: &PenaltySpec,
) -> Result<SaddleReport> {
    let n = tree.n_steps;
    if cert.theta_star.n_steps() != n || game.n_steps != n {
        return Err(Error::shape("oracle", "certificate, game and tree differ in steps"));
    }
    let nodes = tree.node_count();
    let mut star_tilts = vec![0.0; nodes];
    let mut sigma_nodes = Vec::new();
    // Walk histories; `live` marks nodes reached before sigma* stops.
    let mut live = vec![false; nodes];
    live[0] = true;
    for idx in 0..nodes {
        let t = depth(idx);
        let j = (idx + 1 - (1 << t)).count_ones() as usize;
        if t < n {
            star_tilts[idx] = cert.theta_star.at(t, j);
        }
        if !live[idx] {
            continue;
        }
        if cert.sigma_star.stops_at(t, j) {
            sigma_nodes.push(idx);
        } else {
            let (dn, up) = children(idx);
            live[dn] = true;
            live[up] = true;
        }
    }
    let sigma = TreeRule {
        stop_nodes: sigma_nodes,
    };
    let (prob_star, cost_star) = tree.path_measure(spec, &star_tilts);
    let base = tree.payoff_of(&sigma, &prob_star, &cost_star);

    let (left_slack, left_idx) = game
        .stopping_rules
        .par_iter()
        .enumerate()
        .map(|(i, r)| (base - tree.payoff_of(r, &prob_star, &cost_star), i))
        .reduce(
            || (f64::INFINITY, 0),
            |a, b| if b.0 < a.0 || (b.0 == a.0 && b.1 < a.1) { b } else { a },
        );

    let (right_slack, right_idx) = (0..game.policy_count)
        .into_par_iter()
        .map(|i| {
            let (prob, cost) = tree.path_measure(spec, &game.policy(i));
            (tree.payoff_of(&sigma, &prob, &cost) - base, i)
        })
        .reduce(
            || (f64::INFINITY, 0),
            |a, b| if b.0 < a.0 || (b.0 == a.0 && b.1 < a.1) { b } else { a },
        );

    let tolerance = 1e-9 * cert.scale;
    Ok(SaddleReport {
        saddle_payoff: base,
        left_slack,
        right_slack,
        tolerance,
        passed: left_slack >= -tolerance && right_slack >= -tolerance,
        rules_checked: game.stopping_rules.len(),
        policies_checked: game.policy_count,
        left_witness: game.stopping_rules[left_idx].histories(),
        right_witness: game.policy(right_idx),
    })
}
