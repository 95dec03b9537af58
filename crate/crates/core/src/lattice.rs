//! Recombining binomial discretization of a one-dimensional Brownian motion.
//!
//! Node `(t, j)` sits at time `t * dt` after `j` up-moves; its Brownian state
//! is `(2j - t) * sqrt(dt)`. The up child of `(t, j)` is `(t + 1, j + 1)` and
//! the down child is `(t + 1, j)`. Under the reference measure both branches
//! carry probability one half.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatticeModel {
    n_steps: usize,
    dt: f64,
    sqrt_dt: f64,
}

impl LatticeModel {
    pub fn new(n_steps: usize, dt: f64) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::param("lattice", "n_steps", "must be at least 1"));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::param(
                "lattice",
                "dt",
                format!("must be positive and finite, got {dt}"),
            ));
        }
        Ok(Self {
            n_steps,
            dt,
            sqrt_dt: dt.sqrt(),
        })
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Size of one Brownian increment, `sqrt(dt)`.
    pub fn increment(&self) -> f64 {
        self.sqrt_dt
    }

    pub fn horizon(&self) -> f64 {
        self.n_steps as f64 * self.dt
    }

    pub fn node_count(&self) -> usize {
        (self.n_steps + 1) * (self.n_steps + 2) / 2
    }

    pub fn time(&self, t: usize) -> f64 {
        t as f64 * self.dt
    }

    pub fn state(&self, t: usize, j: usize) -> f64 {
        (2.0 * j as f64 - t as f64) * self.sqrt_dt
    }

    /// Iterates over every node `(t, j)` level by level.
    pub fn nodes(&self) -> impl Iterator<Item = (usize, usize)> {
        let n = self.n_steps;
        (0..=n).flat_map(|t| (0..=t).map(move |j| (t, j)))
    }
}

/// Free-function form of [`LatticeModel::new`].
pub fn build_lattice(n_steps: usize, dt: f64) -> Result<LatticeModel> {
    LatticeModel::new(n_steps, dt)
}

#[inline]
fn flat(t: usize, j: usize) -> usize {
    t * (t + 1) / 2 + j
}

/// Dense storage for one value per lattice node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeTable<T> {
    n_steps: usize,
    data: Vec<T>,
}

impl<T: Clone> NodeTable<T> {
    pub fn filled(n_steps: usize, value: T) -> Self {
        Self {
            n_steps,
            data: vec![value; (n_steps + 1) * (n_steps + 2) / 2],
        }
    }
}

impl<T> NodeTable<T> {
    pub fn from_fn(n_steps: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity((n_steps + 1) * (n_steps + 2) / 2);
        for t in 0..=n_steps {
            for j in 0..=t {
                data.push(f(t, j));
            }
        }
        Self { n_steps, data }
    }

    /// Builds a table from per-level rows; row `t` must hold `t + 1` entries.
    pub fn from_levels(levels: Vec<Vec<T>>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::shape("lattice", "node table needs at least one level"));
        }
        let n_steps = levels.len() - 1;
        let mut data = Vec::with_capacity((n_steps + 1) * (n_steps + 2) / 2);
        for (t, row) in levels.into_iter().enumerate() {
            if row.len() != t + 1 {
                return Err(Error::shape(
                    "lattice",
                    format!("level {t} has {} entries, expected {}", row.len(), t + 1),
                ));
            }
            data.extend(row);
        }
        Ok(Self { n_steps, data })
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    #[inline]
    pub fn get(&self, t: usize, j: usize) -> &T {
        debug_assert!(t <= self.n_steps && j <= t);
        &self.data[flat(t, j)]
    }

    #[inline]
    pub fn set(&mut self, t: usize, j: usize, value: T) {
        debug_assert!(t <= self.n_steps && j <= t);
        self.data[flat(t, j)] = value;
    }

    pub fn level(&self, t: usize) -> &[T] {
        let start = flat(t, 0);
        &self.data[start..start + t + 1]
    }

    pub fn level_mut(&mut self, t: usize) -> &mut [T] {
        let start = flat(t, 0);
        &mut self.data[start..start + t + 1]
    }

    pub fn values(&self) -> &[T] {
        &self.data
    }

    pub fn map<U>(&self, mut f: impl FnMut(usize, usize, &T) -> U) -> NodeTable<U> {
        NodeTable::from_fn(self.n_steps, |t, j| f(t, j, self.get(t, j)))
    }

    pub fn matches(&self, model: &LatticeModel) -> bool {
        self.n_steps == model.n_steps()
    }
}

impl<T: Copy> NodeTable<T> {
    #[inline]
    pub fn at(&self, t: usize, j: usize) -> T {
        *self.get(t, j)
    }
}

impl NodeTable<f64> {
    pub fn sup_norm(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Largest absolute node-wise difference.
    pub fn max_abs_diff(&self, other: &NodeTable<f64>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// Bounded payoff process `Y` hosted on the lattice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PayoffProcess {
    values: NodeTable<f64>,
    bound: f64,
}

impl PayoffProcess {
    /// Wraps a node table, checking `|value| <= bound` everywhere.
    pub fn from_table(values: NodeTable<f64>, bound: f64) -> Result<Self> {
        if !(bound >= 0.0 && bound.is_finite()) {
            return Err(Error::param(
                "lattice",
                "bound",
                format!("must be finite and non-negative, got {bound}"),
            ));
        }
        for t in 0..=values.n_steps() {
            for (j, &v) in values.level(t).iter().enumerate() {
                if !v.is_finite() || v.abs() > bound {
                    return Err(Error::BoundViolation { t, j, value: v, bound });
                }
            }
        }
        Ok(Self { values, bound })
    }

    /// Payoff table with the bound set to its own sup norm.
    pub fn from_table_tight(values: NodeTable<f64>) -> Result<Self> {
        let bound = values.sup_norm();
        Self::from_table(values, bound)
    }

    pub fn constant(model: &LatticeModel, c: f64) -> Result<Self> {
        Self::from_table(NodeTable::filled(model.n_steps(), c), c.abs())
    }

    pub fn values(&self) -> &NodeTable<f64> {
        &self.values
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn n_steps(&self) -> usize {
        self.values.n_steps()
    }

    #[inline]
    pub fn at(&self, t: usize, j: usize) -> f64 {
        self.values.at(t, j)
    }

    pub fn terminal(&self) -> &[f64] {
        self.values.level(self.values.n_steps())
    }
}

/// Evaluates `g(time, state)` at every node.
pub fn payoff_from_function(model: &LatticeModel, g: impl Fn(f64, f64) -> f64, bound: f64) -> Result<PayoffProcess> {
    let values = NodeTable::from_fn(model.n_steps(), |t, j| g(model.time(t), model.state(t, j)));
    PayoffProcess::from_table(values, bound)
}

/// Node-indexed stop/continue decisions with absorption: a path stops at the
/// first node (at level `floor` or later) whose decision is `true`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoppingRule {
    decision: NodeTable<bool>,
    floor: usize,
}

impl StoppingRule {
    pub fn floor(&self) -> usize {
        self.floor
    }

    pub fn n_steps(&self) -> usize {
        self.decision.n_steps()
    }

    pub fn decisions(&self) -> &NodeTable<bool> {
        &self.decision
    }

    /// Whether a path arriving unstopped at `(t, j)` stops there.
    #[inline]
    pub fn stops_at(&self, t: usize, j: usize) -> bool {
        self.decision.at(t, j)
    }

    /// Deterministic rule stopping every path at `level`.
    pub fn at_level(model: &LatticeModel, level: usize) -> Result<Self> {
        if level > model.n_steps() {
            return Err(Error::param(
                "lattice",
                "level",
                format!("{level} exceeds horizon {}", model.n_steps()),
            ));
        }
        let region = NodeTable::from_fn(model.n_steps(), |t, _| t == level);
        first_hitting_rule(model, &region, level)
    }

    /// Flags the nodes that some path reaches before it has stopped.
    pub fn reachable_unstopped(&self) -> NodeTable<bool> {
        let n = self.n_steps();
        let mut reach = NodeTable::filled(n, false);
        reach.set(0, 0, true);
        for t in 0..n {
            for j in 0..=t {
                if reach.at(t, j) && !self.stops_at(t, j) {
                    reach.set(t + 1, j, true);
                    reach.set(t + 1, j + 1, true);
                }
            }
        }
        reach
    }

    /// Nodes where some path actually stops.
    pub fn stop_nodes(&self) -> NodeTable<bool> {
        let reach = self.reachable_unstopped();
        reach.map(|t, j, &r| r && self.stops_at(t, j))
    }

    /// Stopping level along a path given as up/down moves (`true` = up).
    pub fn stop_level_on_path(&self, path: &[bool]) -> usize {
        let mut j = 0;
        for (t, &up) in path.iter().enumerate().take(self.n_steps()) {
            if self.stops_at(t, j) {
                return t;
            }
            if up {
                j += 1;
            }
        }
        if self.stops_at(self.n_steps(), j) {
            return self.n_steps();
        }
        unreachable!("terminal decisions always stop")
    }
}

/// Stops at the first node at level `floor` or later where `region` is true;
/// every path is forced to stop at the terminal level.
pub fn first_hitting_rule(model: &LatticeModel, region: &NodeTable<bool>, floor: usize) -> Result<StoppingRule> {
    if !region.matches(model) {
        return Err(Error::shape(
            "lattice",
            format!("region has {} steps, lattice has {}", region.n_steps(), model.n_steps()),
        ));
    }
    let n = model.n_steps();
    if floor > n {
        return Err(Error::param("lattice", "floor", format!("{floor} exceeds horizon {n}")));
    }
    let decision = NodeTable::from_fn(n, |t, j| t == n || (t >= floor && region.at(t, j)));
    Ok(StoppingRule { decision, floor })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn build_small_lattices() {
        let m = build_lattice(1, 1.0).unwrap();
        assert_eq!(m.node_count(), 3);
        assert_eq!(m.state(0, 0), 0.0);
        assert_eq!(m.state(1, 0), -1.0);
        assert_eq!(m.state(1, 1), 1.0);

        let m = build_lattice(2, 0.25).unwrap();
        assert_eq!(m.node_count(), 6);
        let terminal: Vec<f64> = (0..=2).map(|j| m.state(2, j)).collect();
        assert_eq!(terminal, vec![-1.0, 0.0, 1.0]);
        assert_eq!(m.horizon(), 0.5);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(matches!(
            build_lattice(0, 1.0),
            Err(Error::Parameter { field: "n_steps", .. })
        ));
        assert!(matches!(
            build_lattice(3, 0.0),
            Err(Error::Parameter { field: "dt", .. })
        ));
        assert!(build_lattice(3, -1.0).is_err());
        assert!(build_lattice(3, f64::NAN).is_err());
    }

    #[test]
    fn payoff_examples() {
        let m = build_lattice(1, 1.0).unwrap();
        let y = payoff_from_function(&m, |_, _| 3.0, 3.0).unwrap();
        assert!(y.values().values().iter().all(|&v| v == 3.0));
        assert_eq!(y.bound(), 3.0);

        let put = payoff_from_function(&m, |_, x| (1.0 - x).max(0.0), 2.0).unwrap();
        assert_eq!(put.at(0, 0), 1.0);
        assert_eq!(put.at(1, 1), 0.0);
        assert_eq!(put.at(1, 0), 2.0);

        let err = payoff_from_function(&m, |_, x| x, 0.5).unwrap_err();
        assert!(matches!(err, Error::BoundViolation { .. }));
    }

    #[test]
    fn payoff_reads_back_exactly() {
        let m = build_lattice(7, 0.13).unwrap();
        let g = |t: f64, x: f64| (x * 1.7 - t).sin();
        let y = payoff_from_function(&m, g, 1.0).unwrap();
        for (t, j) in m.nodes() {
            assert_eq!(y.at(t, j), g(m.time(t), m.state(t, j)));
        }
    }

    #[test]
    fn hitting_rule_examples() {
        let m = build_lattice(3, 1.0).unwrap();
        let all = NodeTable::filled(3, true);
        let r = first_hitting_rule(&m, &all, 0).unwrap();
        assert!(r.stops_at(0, 0));
        assert_eq!(r.stop_level_on_path(&[true, false, true]), 0);

        let none = NodeTable::filled(3, false);
        let r = first_hitting_rule(&m, &none, 0).unwrap();
        for bits in 0..8u32 {
            let path: Vec<bool> = (0..3).map(|s| bits >> s & 1 == 1).collect();
            assert_eq!(r.stop_level_on_path(&path), 3);
        }

        let level2 = NodeTable::from_fn(3, |t, _| t == 2);
        let r = first_hitting_rule(&m, &level2, 1).unwrap();
        for bits in 0..8u32 {
            let path: Vec<bool> = (0..3).map(|s| bits >> s & 1 == 1).collect();
            assert_eq!(r.stop_level_on_path(&path), 2);
        }
    }

    #[test]
    fn floor_blocks_early_stopping() {
        let m = build_lattice(3, 1.0).unwrap();
        let all = NodeTable::filled(3, true);
        let r = first_hitting_rule(&m, &all, 2).unwrap();
        assert!(!r.stops_at(0, 0));
        assert!(!r.stops_at(1, 1));
        assert!(r.stops_at(2, 0));
        let stops = r.stop_nodes();
        assert!(stops.level(2).iter().all(|&s| s));
        assert!(stops.level(3).iter().all(|&s| !s));
    }

    #[test]
    fn level_rows_roundtrip() {
        let t = NodeTable::from_levels(vec![vec![1.0], vec![2.0, 3.0]]).unwrap();
        assert_eq!(t.at(1, 1), 3.0);
        assert!(NodeTable::from_levels(vec![vec![1.0], vec![2.0]]).is_err());
    }
}
