//! Backward inductions for the stopper: per-measure Snell envelopes, the
//! robust value over a finite tilt grid or over all tilts (through the
//! transform `f~`), the associated hitting rules, strategy evaluation and
//! the dynamic risk measure `rho`.
//!
//! Every induction takes a floor `nu`: stopping is only allowed at levels
//! `>= nu`, and before `nu` the measure is the reference one (zero tilt).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{first_hitting_rule, LatticeModel, NodeTable, PayoffProcess, StoppingRule};
use crate::measures::{branch_probs, max_tilt, ControlPolicy};
use crate::penalty::PenaltySpec;

/// Relative tolerance used to decide membership in `{V = Y}`.
pub const DEFAULT_HIT_REL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    /// `tol_hit = hit_rel * max(1, ||Y||)`.
    pub hit_rel: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            hit_rel: DEFAULT_HIT_REL,
        }
    }
}

impl Tolerances {
    pub fn hit(&self, bound: f64) -> f64 {
        self.hit_rel * bound.max(1.0)
    }
}

/// Finite set of tilts available to the adversary, all inside the truncated
/// family with bound `k` (`|theta| <= k` and `f(theta) <= k`). The zero tilt
/// is always present. Values are kept in tie-break order: smallest `|theta|`
/// first, negative before positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaGrid {
    k: f64,
    values: Vec<f64>,
}

impl ThetaGrid {
    pub fn new(k: f64, values: &[f64]) -> Result<Self> {
        if !(k >= 0.0 && k.is_finite()) {
            return Err(Error::param(
                "stopping",
                "k",
                "truncation bound must be finite and non-negative",
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("stopping", "grid", "tilts must be finite"));
        }
        let mut v: Vec<f64> = values.to_vec();
        if !v.contains(&0.0) {
            return Err(Error::param("stopping", "grid", "must contain the zero tilt"));
        }
        v.sort_by(|a, b| a.abs().total_cmp(&b.abs()).then(a.total_cmp(b)));
        v.dedup();
        Ok(Self { k, values: v })
    }

    /// Uniform grid `{-k, .., k}` with `points` entries (odd counts include 0).
    pub fn uniform(k: f64, points: usize) -> Result<Self> {
        if points < 1 || points.is_multiple_of(2) {
            return Err(Error::param("stopping", "grid_points", "must be an odd positive count"));
        }
        let half = (points / 2) as f64;
        let vals: Vec<f64> = (0..points)
            .map(|i| if half == 0.0 { 0.0 } else { k * (i as f64 - half) / half })
            .collect();
        Self::new(k, &vals)
    }

    pub fn k(&self) -> f64 {
        self.k
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Checks admissibility on the lattice and membership in the truncated
    /// family at every time level.
    pub fn validate(&self, model: &LatticeModel, spec: &PenaltySpec) -> Result<()> {
        let limit = max_tilt(model.dt());
        for &th in &self.values {
            if th.abs() > limit {
                return Err(Error::param(
                    "stopping",
                    "grid",
                    format!("tilt {th} exceeds the lattice bound {limit}"),
                ));
            }
            if th.abs() > self.k {
                return Err(Error::param(
                    "stopping",
                    "grid",
                    format!("|{th}| exceeds k = {}", self.k),
                ));
            }
            for t in 0..model.n_steps() {
                let f = spec.f_eval(t, th);
                if f > self.k {
                    return Err(Error::param(
                        "stopping",
                        "grid",
                        format!("f({t}, {th}) = {f} exceeds k = {}", self.k),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn is_subset_of(&self, other: &ThetaGrid) -> bool {
        self.values.iter().all(|v| other.values.contains(v))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnellResult {
    pub r: NodeTable<f64>,
    pub tau_region: NodeTable<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ValueMode {
    Grid { k: f64, values: Vec<f64> },
    Exact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueSurface {
    pub v: NodeTable<f64>,
    pub stop_region: NodeTable<bool>,
    /// Adversary's tilt at each node: the grid argmin, or `z*` of the slope
    /// in exact mode. Zero before the floor and at terminal nodes.
    pub minimizer: NodeTable<f64>,
    pub mode: ValueMode,
    pub nu: usize,
}

impl ValueSurface {
    pub fn root(&self) -> f64 {
        self.v.at(0, 0)
    }

    /// `Y <= V` from the floor on, `V = Y` at the horizon and
    /// `-||Y|| <= V <= ||Y|| + T`.
    pub fn satisfies_bounds(&self, model: &LatticeModel, y: &PayoffProcess, tol: f64) -> bool {
        let n = model.n_steps();
        let lo = -y.bound() - tol;
        let hi = y.bound() + model.horizon() + tol;
        model.nodes().all(|(t, j)| {
            let v = self.v.at(t, j);
            let yy = y.at(t, j);
            (t < self.nu || v >= yy - tol) && v >= lo && v <= hi && (t < n || (v - yy).abs() <= tol)
        })
    }
}

fn check_shapes(model: &LatticeModel, y: &PayoffProcess, nu: usize) -> Result<()> {
    if y.n_steps() != model.n_steps() {
        return Err(Error::shape(
            "stopping",
            format!("payoff has {} steps, lattice has {}", y.n_steps(), model.n_steps()),
        ));
    }
    if nu > model.n_steps() {
        return Err(Error::param(
            "stopping",
            "nu",
            format!("{nu} exceeds horizon {}", model.n_steps()),
        ));
    }
    Ok(())
}

fn check_policy(model: &LatticeModel, policy: &ControlPolicy, nu: usize) -> Result<()> {
    if policy.n_steps() != model.n_steps() {
        return Err(Error::shape("stopping", "policy and lattice differ in steps"));
    }
    for t in 0..nu.min(model.n_steps()) {
        if policy.theta().level(t).iter().any(|&th| th != 0.0) {
            return Err(Error::param(
                "stopping",
                "policy",
                format!("tilt must vanish before nu = {nu}, nonzero at level {t}"),
            ));
        }
    }
    Ok(())
}

/// Snell envelope of `Y` plus accumulated penalty under a fixed policy.
pub fn snell_envelope(
    model: &LatticeModel,
    y: &PayoffProcess,
    spec: &PenaltySpec,
    policy: &ControlPolicy,
    nu: usize,
    tol: &Tolerances,
) -> Result<SnellResult> {
    check_shapes(model, y, nu)?;
    check_policy(model, policy, nu)?;
    let n = model.n_steps();
    let (dt, sq) = (model.dt(), model.increment());
    let mut r = NodeTable::filled(n, 0.0);
    r.level_mut(n).copy_from_slice(y.terminal());
    for t in (0..n).rev() {
        for j in 0..=t {
            let th = policy.at(t, j);
            let (qu, qd) = branch_probs(th, sq);
            let cont = spec.f_eval(t, th) * dt + qu * r.at(t + 1, j + 1) + qd * r.at(t + 1, j);
            let val = if t >= nu { cont.max(y.at(t, j)) } else { cont };
            r.set(t, j, val);
        }
    }
    let h = tol.hit(y.bound());
    let tau_region = r.map(|t, j, &v| t >= nu && v - y.at(t, j) <= h);
    Ok(SnellResult { r, tau_region })
}

/// Robust lower value over a finite tilt grid.
pub fn robust_value_grid(
    model: &LatticeModel,
    y: &PayoffProcess,
    spec: &PenaltySpec,
    grid: &ThetaGrid,
    nu: usize,
    tol: &Tolerances,
) -> Result<ValueSurface> {
    check_shapes(model, y, nu)?;
    grid.validate(model, spec)?;
    let n = model.n_steps();
    let (dt, sq) = (model.dt(), model.increment());
    let mut v = NodeTable::filled(n, 0.0);
    let mut arg = NodeTable::filled(n, 0.0);
    v.level_mut(n).copy_from_slice(y.terminal());
    // Penalty per grid tilt, per level.
    let costs: Vec<Vec<f64>> = (0..n)
        .map(|t| grid.values().iter().map(|&th| spec.f_eval(t, th) * dt).collect())
        .collect();
    for t in (0..n).rev() {
        for j in 0..=t {
            let (up, dn) = (v.at(t + 1, j + 1), v.at(t + 1, j));
            let (cont, th_best) = if t >= nu {
                let mut best = f64::INFINITY;
                let mut th_best = 0.0;
                for (&th, &c) in grid.values().iter().zip(&costs[t]) {
                    let (qu, qd) = branch_probs(th, sq);
                    let val = c + qu * up + qd * dn;
                    if val < best {
                        best = val;
                        th_best = th;
                    }
                }
                (best, th_best)
            } else {
                (spec.f_eval(t, 0.0) * dt + 0.5 * up + 0.5 * dn, 0.0)
            };
            arg.set(t, j, th_best);
            v.set(t, j, if t >= nu { cont.max(y.at(t, j)) } else { cont });
        }
    }
    let h = tol.hit(y.bound());
    let stop_region = v.map(|t, j, &val| t >= nu && val - y.at(t, j) <= h);
    Ok(ValueSurface {
        v,
        stop_region,
        minimizer: arg,
        mode: ValueMode::Grid {
            k: grid.k(),
            values: grid.values().to_vec(),
        },
        nu,
    })
}

/// Robust value over all tilts: the continuation value is
/// `mean + f~(t, Z) dt` with `Z = (V_up - V_down) / (2 sqrt(dt))`.
pub fn robust_value_exact(
    model: &LatticeModel,
    y: &PayoffProcess,
    spec: &PenaltySpec,
    nu: usize,
    tol: &Tolerances,
) -> Result<ValueSurface> {
    check_shapes(model, y, nu)?;
    let n = model.n_steps();
    let (dt, sq) = (model.dt(), model.increment());
    let mut v = NodeTable::filled(n, 0.0);
    let mut arg = NodeTable::filled(n, 0.0);
    v.level_mut(n).copy_from_slice(y.terminal());
    for t in (0..n).rev() {
        for j in 0..=t {
            let (up, dn) = (v.at(t + 1, j + 1), v.at(t + 1, j));
            let mean = 0.5 * (up + dn);
            if t >= nu {
                let slope = (up - dn) / (2.0 * sq);
                let (z, fc) = spec.minimize(t, slope);
                arg.set(t, j, z);
                v.set(t, j, (mean + fc * dt).max(y.at(t, j)));
            } else {
                v.set(t, j, mean);
            }
        }
    }
    let h = tol.hit(y.bound());
    let stop_region = v.map(|t, j, &val| t >= nu && val - y.at(t, j) <= h);
    Ok(ValueSurface {
        v,
        stop_region,
        minimizer: arg,
        mode: ValueMode::Exact,
        nu,
    })
}

/// First time at or after `nu` where the value meets the payoff.
pub fn tau_v(model: &LatticeModel, surface: &ValueSurface, nu: usize) -> Result<StoppingRule> {
    first_hitting_rule(model, &surface.stop_region, nu)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauFamily {
    pub rules: Vec<StoppingRule>,
    /// Index from which every later rule coincides with the last one.
    pub stabilized_from: usize,
}

impl TauFamily {
    pub fn last(&self) -> &StoppingRule {
        self.rules.last().expect("tau family is nonempty")
    }
}

/// `tau_k` for an increasing sequence of grids: the pathwise minimum over
/// the grid's Markov policies `Q` of the hitting times of `{R^Q = Y}`.
///
/// A node lies in some policy's stop region iff the grid's robust value
/// equals `Y` there: `R^Q >= V >= Y` for every `Q`, and the argmin policy
/// has `R^Q = V`. The union of stop regions is therefore `{V_k = Y}`, and
/// the minimum of the hitting times is the hitting time of that union.
pub fn tau_family(
    model: &LatticeModel,
    y: &PayoffProcess,
    spec: &PenaltySpec,
    grids: &[ThetaGrid],
    nu: usize,
    tol: &Tolerances,
) -> Result<TauFamily> {
    if grids.is_empty() {
        return Err(Error::param("stopping", "grids", "need at least one grid"));
    }
    for w in grids.windows(2) {
        if w[1].k() < w[0].k() || !w[0].is_subset_of(&w[1]) {
            return Err(Error::param(
                "stopping",
                "grids",
                "grids must be nested with non-decreasing truncation bounds",
            ));
        }
    }
    let mut rules = Vec::with_capacity(grids.len());
    for grid in grids {
        let surface = robust_value_grid(model, y, spec, grid, nu, tol)?;
        rules.push(tau_v(model, &surface, nu)?);
    }
    let last = rules.last().unwrap();
    let mut stabilized_from = rules.len() - 1;
    while stabilized_from > 0 && rules[stabilized_from - 1] == *last {
        stabilized_from -= 1;
    }
    Ok(TauFamily { rules, stabilized_from })
}

/// Node table of `E_Q[ reward_stop + sum f dt | node ]` for a path that
/// arrives unstopped at each node, with `reward` read where `stop` stops.
pub fn strategy_values(
    model: &LatticeModel,
    reward: &NodeTable<f64>,
    spec: &PenaltySpec,
    policy: &ControlPolicy,
    stop: &StoppingRule,
) -> Result<NodeTable<f64>> {
    if !reward.matches(model) || stop.n_steps() != model.n_steps() || policy.n_steps() != model.n_steps() {
        return Err(Error::shape(
            "stopping",
            "reward, rule and policy must match the lattice",
        ));
    }
    let n = model.n_steps();
    let (dt, sq) = (model.dt(), model.increment());
    let mut w = NodeTable::filled(n, 0.0);
    w.level_mut(n).copy_from_slice(reward.level(n));
    for t in (0..n).rev() {
        for j in 0..=t {
            let val = if stop.stops_at(t, j) {
                reward.at(t, j)
            } else {
                let th = policy.at(t, j);
                let (qu, qd) = branch_probs(th, sq);
                spec.f_eval(t, th) * dt + qu * w.at(t + 1, j + 1) + qd * w.at(t + 1, j)
            };
            w.set(t, j, val);
        }
    }
    Ok(w)
}

/// Conditional game payoff `E_Q[Y_stop + sum_{nu <= s < stop} f(s, theta_s) dt]`
/// at every level-`nu` node.
pub fn evaluate_strategy(
    model: &LatticeModel,
    y: &PayoffProcess,
    spec: &PenaltySpec,
    policy: &ControlPolicy,
    stop: &StoppingRule,
    nu: usize,
) -> Result<Vec<f64>> {
    check_shapes(model, y, nu)?;
    check_policy(model, policy, nu)?;
    if stop.floor() < nu {
        return Err(Error::param("stopping", "stop", "rule floor lies before nu"));
    }
    let w = strategy_values(model, y.values(), spec, policy, stop)?;
    Ok(w.level(nu).to_vec())
}

/// `rho_{nu,gamma}(xi) = max_Q E_Q[-xi_gamma - sum f dt]` over the grid's
/// tilts, one value per level-`nu` node.
pub fn evaluate_rho(
    model: &LatticeModel,
    spec: &PenaltySpec,
    grid: &ThetaGrid,
    nu: usize,
    gamma: &StoppingRule,
    xi: &NodeTable<f64>,
) -> Result<Vec<f64>> {
    if !xi.matches(model) || gamma.n_steps() != model.n_steps() {
        return Err(Error::shape("stopping", "xi and gamma must match the lattice"));
    }
    if nu > model.n_steps() || gamma.floor() < nu {
        return Err(Error::param("stopping", "nu", "gamma must not stop before nu"));
    }
    grid.validate(model, spec)?;
    let n = model.n_steps();
    let (dt, sq) = (model.dt(), model.increment());
    let mut w = NodeTable::filled(n, 0.0);
    w.level_mut(n).copy_from_slice(xi.level(n));
    for t in (nu..n).rev() {
        let costs: Vec<f64> = grid.values().iter().map(|&th| spec.f_eval(t, th) * dt).collect();
        for j in 0..=t {
            let val = if gamma.stops_at(t, j) {
                xi.at(t, j)
            } else {
                let (up, dn) = (w.at(t + 1, j + 1), w.at(t + 1, j));
                grid.values()
                    .iter()
                    .zip(&costs)
                    .map(|(&th, &c)| {
                        let (qu, qd) = branch_probs(th, sq);
                        c + qu * up + qd * dn
                    })
                    .fold(f64::INFINITY, f64::min)
            };
            w.set(t, j, val);
        }
    }
    Ok(w.level(nu).iter().map(|v| -v).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::build_lattice;
    use approx::assert_abs_diff_eq;

    fn one_step(y0: f64) -> (LatticeModel, PayoffProcess) {
        let m = build_lattice(1, 1.0).unwrap();
        let y =
            PayoffProcess::from_table(NodeTable::from_levels(vec![vec![y0], vec![0.0, 1.0]]).unwrap(), 1.0).unwrap();
        (m, y)
    }

    fn tol() -> Tolerances {
        Tolerances::default()
    }

    #[test]
    fn snell_examples() {
        let m = build_lattice(4, 0.25).unwrap();
        let e = PenaltySpec::entropic(1.0).unwrap();
        let c = PayoffProcess::constant(&m, 0.7).unwrap();
        let s = snell_envelope(&m, &c, &e, &ControlPolicy::zero(&m, 0), 0, &tol()).unwrap();
        assert!(s.r.values().iter().all(|&v| v == 0.7));
        assert!(s.tau_region.at(0, 0));

        let (m, y) = one_step(0.4);
        let s = snell_envelope(&m, &y, &e, &ControlPolicy::zero(&m, 0), 0, &tol()).unwrap();
        assert_eq!(s.r.at(0, 0), 0.5);
        assert!(!s.tau_region.at(0, 0));

        let (m, y) = one_step(0.6);
        let s = snell_envelope(&m, &y, &e, &ControlPolicy::zero(&m, 0), 0, &tol()).unwrap();
        assert_eq!(s.r.at(0, 0), 0.6);
        assert!(s.tau_region.at(0, 0));
    }

    #[test]
    fn grid_value_examples() {
        let (m, y) = one_step(0.0);
        let e = PenaltySpec::entropic(1.0).unwrap();
        let g = ThetaGrid::new(1.0, &[-0.5, 0.0, 0.5]).unwrap();
        let vs = robust_value_grid(&m, &y, &e, &g, 0, &tol()).unwrap();
        assert_abs_diff_eq!(vs.root(), 0.375, epsilon = 1e-15);
        assert_eq!(vs.minimizer.at(0, 0), -0.5);

        let zero = ThetaGrid::new(0.0, &[0.0]).unwrap();
        let vs0 = robust_value_grid(&m, &y, &e, &zero, 0, &tol()).unwrap();
        let sn = snell_envelope(&m, &y, &e, &ControlPolicy::zero(&m, 0), 0, &tol()).unwrap();
        assert_eq!(vs0.v, sn.r);
        assert!(vs.root() <= vs0.root());
    }

    #[test]
    fn exact_value_examples() {
        let (m, y) = one_step(0.0);
        let e = PenaltySpec::entropic(1.0).unwrap();
        let vs = robust_value_exact(&m, &y, &e, 0, &tol()).unwrap();
        assert_abs_diff_eq!(vs.root(), 0.375, epsilon = 1e-15);
        assert_eq!(vs.minimizer.at(0, 0), -0.5);

        let m = build_lattice(5, 0.2).unwrap();
        let c = PayoffProcess::constant(&m, -0.3).unwrap();
        let vs = robust_value_exact(&m, &c, &e, 0, &tol()).unwrap();
        assert!(vs.v.values().iter().all(|&v| v == -0.3));
    }

    #[test]
    fn grid_rejects_out_of_family_tilts() {
        let m = build_lattice(2, 0.25).unwrap();
        let e = PenaltySpec::entropic(1.0).unwrap();
        let y = PayoffProcess::constant(&m, 0.0).unwrap();
        let g = ThetaGrid::new(0.4, &[-0.5, 0.0, 0.5]).unwrap();
        assert!(robust_value_grid(&m, &y, &e, &g, 0, &tol()).is_err());
        let g = ThetaGrid::new(10.0, &[0.0, 2.5]).unwrap();
        assert!(robust_value_grid(&m, &y, &e, &g, 0, &tol()).is_err());
        assert!(ThetaGrid::new(1.0, &[0.5]).is_err());
    }

    #[test]
    fn tau_v_examples() {
        let (m, y) = one_step(0.0);
        let e = PenaltySpec::entropic(1.0).unwrap();
        let vs = robust_value_exact(&m, &y, &e, 0, &tol()).unwrap();
        let rule = tau_v(&m, &vs, 0).unwrap();
        assert!(!rule.stops_at(0, 0));
        assert!(rule.stops_at(1, 0) && rule.stops_at(1, 1));

        let m = build_lattice(3, 0.5).unwrap();
        let c = PayoffProcess::constant(&m, 1.0).unwrap();
        let vs = robust_value_exact(&m, &c, &e, 1, &tol()).unwrap();
        let rule = tau_v(&m, &vs, 1).unwrap();
        assert!(!rule.stops_at(0, 0));
        assert!(rule.stops_at(1, 0) && rule.stops_at(1, 1));

        // Increasing-in-time payoff: the classical Snell envelope only
        // touches it at the horizon.
        let y = crate::lattice::payoff_from_function(&m, |t, _| t, 1.5).unwrap();
        let zero = ThetaGrid::new(0.0, &[0.0]).unwrap();
        let vs = robust_value_grid(&m, &y, &e, &zero, 0, &tol()).unwrap();
        let rule = tau_v(&m, &vs, 0).unwrap();
        for bits in 0..8usize {
            let path: Vec<bool> = (0..3).map(|s| bits >> s & 1 == 1).collect();
            assert_eq!(rule.stop_level_on_path(&path), 3);
        }
    }

    #[test]
    fn tau_family_examples() {
        let (m, y) = one_step(0.0);
        let e = PenaltySpec::entropic(1.0).unwrap();
        let g0 = ThetaGrid::new(0.0, &[0.0]).unwrap();
        let g1 = ThetaGrid::new(1.0, &[-0.5, 0.0, 0.5]).unwrap();
        let fam = tau_family(&m, &y, &e, &[g0.clone(), g1.clone()], 0, &tol()).unwrap();
        assert_eq!(fam.rules.len(), 2);
        let classical = snell_envelope(&m, &y, &e, &ControlPolicy::zero(&m, 0), 0, &tol()).unwrap();
        assert_eq!(fam.rules[0], first_hitting_rule(&m, &classical.tau_region, 0).unwrap());
        for bits in 0..2usize {
            let path = [bits == 1];
            assert!(fam.rules[1].stop_level_on_path(&path) <= fam.rules[0].stop_level_on_path(&path));
        }
        assert!(tau_family(&m, &y, &e, &[g1, g0], 0, &tol()).is_err());

        let m = build_lattice(3, 0.25).unwrap();
        let c = PayoffProcess::constant(&m, 0.2).unwrap();
        let g = ThetaGrid::new(1.0, &[-1.0, 0.0, 1.0]).unwrap();
        let fam = tau_family(&m, &c, &e, &[g], 2, &tol()).unwrap();
        assert!(fam.last().stops_at(2, 0) && !fam.last().stops_at(1, 0));
    }

    #[test]
    fn evaluate_strategy_examples() {
        let (m, y) = one_step(0.0);
        let e = PenaltySpec::entropic(1.0).unwrap();
        let at0 = StoppingRule::at_level(&m, 0).unwrap();
        let p = ControlPolicy::constant(&m, -0.5, 0).unwrap();
        assert_eq!(evaluate_strategy(&m, &y, &e, &p, &at0, 0).unwrap(), vec![0.0]);
        let at1 = StoppingRule::at_level(&m, 1).unwrap();
        assert_abs_diff_eq!(
            evaluate_strategy(&m, &y, &e, &p, &at1, 0).unwrap()[0],
            0.375,
            epsilon = 1e-15
        );
    }

    #[test]
    fn snell_hitting_rule_attains_envelope() {
        let m = build_lattice(6, 0.15).unwrap();
        let e = PenaltySpec::entropic(0.7).unwrap();
        let y =
            crate::lattice::payoff_from_function(&m, |t, x| (0.8 - x.exp() + 0.2 * t).clamp(-0.5, 0.9), 1.0).unwrap();
        let p = ControlPolicy::from_fn(&m, 2, |t, j| 0.3 * (t as f64 - j as f64) - 0.4).unwrap();
        let s = snell_envelope(&m, &y, &e, &p, 2, &tol()).unwrap();
        let rule = first_hitting_rule(&m, &s.tau_region, 2).unwrap();
        let vals = evaluate_strategy(&m, &y, &e, &p, &rule, 2).unwrap();
        for (j, v) in vals.iter().enumerate() {
            assert_abs_diff_eq!(*v, s.r.at(2, j), epsilon = 1e-12);
        }
    }

    #[test]
    fn rho_examples() {
        let m = build_lattice(1, 1.0).unwrap();
        let e = PenaltySpec::entropic(1.0).unwrap();
        let g = ThetaGrid::new(1.0, &[-0.5, 0.0, 0.5]).unwrap();
        let end = StoppingRule::at_level(&m, 1).unwrap();
        let zero = NodeTable::filled(1, 0.0);
        assert_eq!(evaluate_rho(&m, &e, &g, 0, &end, &zero).unwrap(), vec![0.0]);
        let c = NodeTable::filled(1, 0.8);
        assert_abs_diff_eq!(evaluate_rho(&m, &e, &g, 0, &end, &c).unwrap()[0], -0.8, epsilon = 1e-15);
        let xi = NodeTable::from_levels(vec![vec![0.0], vec![0.0, 1.0]]).unwrap();
        assert_abs_diff_eq!(
            evaluate_rho(&m, &e, &g, 0, &end, &xi).unwrap()[0],
            -0.375,
            epsilon = 1e-15
        );
    }

    #[test]
    fn floor_forces_reference_measure_before_nu() {
        let m = build_lattice(2, 0.25).unwrap();
        let e = PenaltySpec::entropic(1.0).unwrap();
        let p = ControlPolicy::constant(&m, 0.5, 0).unwrap();
        let y = PayoffProcess::constant(&m, 0.0).unwrap();
        assert!(snell_envelope(&m, &y, &e, &p, 1, &tol()).is_err());
    }
}
