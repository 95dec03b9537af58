//! Penalty functions `f(t, z)` charged to the adversary for tilting the
//! reference measure by `z`, together with the concave transform
//! `f~(t, u) = inf_z ( f(t, z) + u z )` and a minimizer `z*(t, u)`.
//!
//! Three families are supported:
//!
//! * entropic, `f(z) = (r / 2) z^2`, with closed-form `f~(u) = -u^2 / (2r)`
//!   and `z*(u) = -u / r`;
//! * power, `f(z) = max(L_t (|z - U_t|^(2+p) - |U_t|^(2+p)), 0)`, minimized
//!   numerically by golden-section search;
//! * tabulated, piecewise linear on a `z` grid and `+inf` outside it, whose
//!   transform is an exact minimum over grid vertices.
//!
//! The assumption parameters (`eps`, `upsilon_bound`, `ell`, `psi_bound`,
//! `growth_m`) describe the quadratic lower bound
//! `f(t, z) >= eps |z - U_t|^2 - ell` and the growth bound
//! `|z*(t, u)| <= psi + M |u|` that the solvers rely on.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default argument tolerance of the golden-section search.
pub const DEFAULT_TOL_OPT: f64 = 1e-10;
const MAX_GOLDEN_ITERS: usize = 200;
const INV_PHI: f64 = 0.618_033_988_749_894_9;

/// A parameter that is either constant in time or given per time level.
/// Levels past the end of a per-level table reuse its last entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TimeParam {
    Constant(f64),
    PerLevel(Vec<f64>),
}

impl TimeParam {
    pub fn at(&self, t: usize) -> f64 {
        match self {
            TimeParam::Constant(v) => *v,
            TimeParam::PerLevel(v) => v[t.min(v.len() - 1)],
        }
    }

    fn sup_abs(&self) -> f64 {
        match self {
            TimeParam::Constant(v) => v.abs(),
            TimeParam::PerLevel(v) => v.iter().fold(0.0_f64, |m, x| m.max(x.abs())),
        }
    }

    fn min(&self) -> f64 {
        match self {
            TimeParam::Constant(v) => *v,
            TimeParam::PerLevel(v) => v.iter().copied().fold(f64::INFINITY, f64::min),
        }
    }

    fn levels(&self) -> usize {
        match self {
            TimeParam::Constant(_) => 1,
            TimeParam::PerLevel(v) => v.len(),
        }
    }

    fn validate(&self, field: &'static str) -> Result<()> {
        let ok = match self {
            TimeParam::Constant(v) => v.is_finite(),
            TimeParam::PerLevel(v) => !v.is_empty() && v.iter().all(|x| x.is_finite()),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::param(
                "penalty",
                field,
                "must be finite (and non-empty when given per level)",
            ))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum PenaltyFamily {
    /// `f(z) = (r / 2) z^2`; `r` is the risk tolerance.
    Entropic { r: f64 },
    /// `f(z) = max(scale_t (|z - shift_t|^(2+exponent) - |shift_t|^(2+exponent)), 0)`.
    Power {
        scale: TimeParam,
        exponent: f64,
        shift: TimeParam,
    },
    /// Piecewise-linear `f` on a sorted `z` grid, one row of values per time
    /// level (the last row is reused for later levels).
    Tabulated { z_grid: Vec<f64>, values: Vec<Vec<f64>> },
}

/// Constants appearing in the quadratic lower bound and minimizer growth
/// assumptions. `psi_bound` is a constant stand-in for the BMO process `psi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssumptionParams {
    pub eps: f64,
    pub upsilon_bound: f64,
    pub ell: f64,
    pub psi_bound: f64,
    pub growth_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltySpec {
    family: PenaltyFamily,
    assumptions: AssumptionParams,
    tol_opt: f64,
}

impl PenaltySpec {
    pub fn entropic(r: f64) -> Result<Self> {
        if !(r > 0.0 && r.is_finite()) {
            return Err(Error::param(
                "penalty",
                "r",
                format!("risk tolerance must be positive, got {r}"),
            ));
        }
        Ok(Self {
            family: PenaltyFamily::Entropic { r },
            assumptions: AssumptionParams {
                eps: r / 2.0,
                upsilon_bound: 0.0,
                ell: 0.0,
                psi_bound: 0.0,
                growth_m: 1.0 / r,
            },
            tol_opt: DEFAULT_TOL_OPT,
        })
    }

    /// Power family with assumption constants derived from the parameters:
    /// `eps = min scale`, `ell = max(sup scale * (1 + |U|^(2+p)), eps |U|^2)`,
    /// `M = ((2+p) eps)^(-1/(1+p))` and `psi = M + 3 |U|`.
    pub fn power(scale: TimeParam, exponent: f64, shift: TimeParam) -> Result<Self> {
        scale.validate("scale")?;
        shift.validate("shift")?;
        if scale.min() <= 0.0 {
            return Err(Error::param("penalty", "scale", "must be positive at every level"));
        }
        if !(exponent >= 0.0 && exponent.is_finite()) {
            return Err(Error::param(
                "penalty",
                "exponent",
                format!("must be non-negative, got {exponent}"),
            ));
        }
        let eps = scale.min();
        let ub = shift.sup_abs();
        let ell = (scale.sup_abs() * (1.0 + ub.powf(2.0 + exponent))).max(eps * ub * ub);
        let growth_m = ((2.0 + exponent) * eps).powf(-1.0 / (1.0 + exponent));
        Ok(Self {
            family: PenaltyFamily::Power { scale, exponent, shift },
            assumptions: AssumptionParams {
                eps,
                upsilon_bound: ub,
                ell,
                psi_bound: growth_m + 3.0 * ub,
                growth_m,
            },
            tol_opt: DEFAULT_TOL_OPT,
        })
    }

    pub fn tabulated(z_grid: Vec<f64>, values: Vec<Vec<f64>>, assumptions: AssumptionParams) -> Result<Self> {
        if z_grid.len() < 2 {
            return Err(Error::param("penalty", "z_grid", "needs at least two points"));
        }
        if z_grid.windows(2).any(|w| !(w[0] < w[1])) || z_grid.iter().any(|z| !z.is_finite()) {
            return Err(Error::param(
                "penalty",
                "z_grid",
                "must be strictly increasing and finite",
            ));
        }
        if values.is_empty() {
            return Err(Error::param("penalty", "values", "needs at least one time level"));
        }
        for row in &values {
            if row.len() != z_grid.len() {
                return Err(Error::shape(
                    "penalty",
                    format!("value row has {} entries, z grid has {}", row.len(), z_grid.len()),
                ));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::param("penalty", "values", "must be finite on the grid"));
            }
        }
        Self::from_parts(PenaltyFamily::Tabulated { z_grid, values }, assumptions)
    }

    /// Builds a spec from an explicit family and assumption constants.
    pub fn from_parts(family: PenaltyFamily, assumptions: AssumptionParams) -> Result<Self> {
        let a = assumptions;
        if !(a.eps > 0.0) {
            return Err(Error::param("penalty", "eps", "must be positive"));
        }
        if !(a.growth_m > 0.0) {
            return Err(Error::param("penalty", "growth_m", "must be positive"));
        }
        if a.upsilon_bound < 0.0 || a.psi_bound < 0.0 {
            return Err(Error::param("penalty", "upsilon_bound", "bounds must be non-negative"));
        }
        Ok(Self {
            family,
            assumptions,
            tol_opt: DEFAULT_TOL_OPT,
        })
    }

    pub fn with_assumptions(mut self, assumptions: AssumptionParams) -> Result<Self> {
        let family = std::mem::replace(&mut self.family, PenaltyFamily::Entropic { r: 1.0 });
        let mut spec = Self::from_parts(family, assumptions)?;
        spec.tol_opt = self.tol_opt;
        Ok(spec)
    }

    pub fn with_tol_opt(mut self, tol_opt: f64) -> Result<Self> {
        if !(tol_opt > 0.0) {
            return Err(Error::param("penalty", "tol_opt", "must be positive"));
        }
        self.tol_opt = tol_opt;
        Ok(self)
    }

    pub fn family(&self) -> &PenaltyFamily {
        &self.family
    }

    pub fn assumptions(&self) -> &AssumptionParams {
        &self.assumptions
    }

    pub fn tol_opt(&self) -> f64 {
        self.tol_opt
    }

    /// Number of distinct time levels the family carries (1 if homogeneous).
    pub fn time_levels(&self) -> usize {
        match &self.family {
            PenaltyFamily::Entropic { .. } => 1,
            PenaltyFamily::Power { scale, shift, .. } => scale.levels().max(shift.levels()),
            PenaltyFamily::Tabulated { values, .. } => values.len(),
        }
    }

    /// Centre `U_t` of the quadratic lower bound.
    pub fn upsilon(&self, t: usize) -> f64 {
        match &self.family {
            PenaltyFamily::Power { shift, .. } => shift.at(t),
            _ => 0.0,
        }
    }

    pub fn f_eval(&self, t: usize, z: f64) -> f64 {
        match &self.family {
            PenaltyFamily::Entropic { r } => 0.5 * r * z * z,
            PenaltyFamily::Power { scale, exponent, shift } => {
                let (l, u) = (scale.at(t), shift.at(t));
                let p = 2.0 + exponent;
                (l * ((z - u).abs().powf(p) - u.abs().powf(p))).max(0.0)
            }
            PenaltyFamily::Tabulated { z_grid, values } => {
                let row = &values[t.min(values.len() - 1)];
                interpolate(z_grid, row, z)
            }
        }
    }

    pub fn f_conjugate(&self, t: usize, u: f64) -> f64 {
        self.minimize(t, u).1
    }

    /// Minimizer of `z -> f(t, z) + u z`, checked against the growth bound.
    pub fn z_star(&self, t: usize, u: f64) -> Result<f64> {
        let (z, _) = self.minimize(t, u);
        let bound = self.growth_bound(u);
        if z.abs() > bound * (1.0 + 1e-12) + 1e-12 || self.at_bracket_edge(t, u, z) {
            return Err(Error::Assumption {
                assumption: "(H3)",
                detail: format!("minimizer at t={t}, u={u} is {z}, outside psi + M|u| = {bound}"),
            });
        }
        Ok(z)
    }

    /// `psi + M |u|`.
    pub fn growth_bound(&self, u: f64) -> f64 {
        self.assumptions.psi_bound + self.assumptions.growth_m * u.abs()
    }

    /// Lower bound `-((1+eps)/(4 eps)) u^2 - |U|^2 - ell` on the transform.
    pub fn conjugate_lower_bound(&self, u: f64) -> f64 {
        let a = &self.assumptions;
        -((1.0 + a.eps) / (4.0 * a.eps)) * u * u - a.upsilon_bound * a.upsilon_bound - a.ell
    }

    /// `kappa = (1+eps)/(4 eps) v (|U|^2 + ell)`, the exponent scale of the
    /// BMO estimate on the slope of the reflected equation.
    pub fn kappa(&self) -> f64 {
        let a = &self.assumptions;
        ((1.0 + a.eps) / (4.0 * a.eps)).max(a.upsilon_bound * a.upsilon_bound + a.ell)
    }

    fn bracket(&self, u: f64) -> f64 {
        self.growth_bound(u) + 1.0
    }

    fn at_bracket_edge(&self, _t: usize, u: f64, z: f64) -> bool {
        match self.family {
            PenaltyFamily::Power { .. } => self.bracket(u) - z.abs() <= 10.0 * self.tol_opt,
            _ => false,
        }
    }

    /// Returns `(z*, f~)` for the given time level and slope.
    pub fn minimize(&self, t: usize, u: f64) -> (f64, f64) {
        if u == 0.0 {
            // f >= 0 and f(0) = 0 for every admissible family; the smallest
            // minimizer in absolute value is 0.
            return match &self.family {
                PenaltyFamily::Tabulated { .. } => self.tabulated_min(t, u),
                _ => (0.0, 0.0),
            };
        }
        match &self.family {
            PenaltyFamily::Entropic { r } => (-u / r, -u * u / (2.0 * r)),
            PenaltyFamily::Power { .. } => self.golden_min(t, u),
            PenaltyFamily::Tabulated { .. } => self.tabulated_min(t, u),
        }
    }

    fn golden_min(&self, t: usize, u: f64) -> (f64, f64) {
        let obj = |z: f64| self.f_eval(t, z) + u * z;
        let b = self.bracket(u);
        let (mut lo, mut hi) = (-b, b);
        let mut x1 = hi - INV_PHI * (hi - lo);
        let mut x2 = lo + INV_PHI * (hi - lo);
        let (mut f1, mut f2) = (obj(x1), obj(x2));
        for _ in 0..MAX_GOLDEN_ITERS {
            if hi - lo <= self.tol_opt {
                break;
            }
            if f1 <= f2 {
                hi = x2;
                x2 = x1;
                f2 = f1;
                x1 = hi - INV_PHI * (hi - lo);
                f1 = obj(x1);
            } else {
                lo = x1;
                x1 = x2;
                f1 = f2;
                x2 = lo + INV_PHI * (hi - lo);
                f2 = obj(x2);
            }
        }
        let mid = 0.5 * (lo + hi);
        let mut best = (mid, obj(mid));
        for (z, v) in [(x1, f1), (x2, f2)] {
            if v < best.1 {
                best = (z, v);
            }
        }
        // Objective values stop resolving the argument near sqrt(eps); polish
        // by bisecting the sign of the one-sided slope around the bracket.
        let w = 1e-6 * (1.0 + best.0.abs());
        let (mut a, mut c) = ((best.0 - w).max(-b), (best.0 + w).min(b));
        if self.power_slope(t, a, u) < 0.0 && self.power_slope(t, c, u) >= 0.0 {
            while c - a > f64::EPSILON * (1.0 + a.abs().max(c.abs())) {
                let m = 0.5 * (a + c);
                if m <= a || m >= c {
                    break;
                }
                if self.power_slope(t, m, u) < 0.0 {
                    a = m;
                } else {
                    c = m;
                }
            }
            let v = obj(c);
            if v <= best.1 + f64::EPSILON * (1.0 + best.1.abs()) {
                best = (c, v);
            }
        }
        if best.1 >= 0.0 {
            (0.0, 0.0)
        } else {
            best
        }
    }

    /// Right derivative of `z -> f(t, z) + u z` for the power family.
    fn power_slope(&self, t: usize, z: f64, u: f64) -> f64 {
        let PenaltyFamily::Power { scale, exponent, shift } = &self.family else {
            unreachable!()
        };
        let (l, s) = (scale.at(t), shift.at(t));
        let p = 2.0 + exponent;
        let d = z - s;
        let raw = l * (d.abs().powf(p) - s.abs().powf(p));
        // At the kink (raw == 0, outside the flat stretch) the right slope is
        // that of the raw term when moving away from the shift.
        let active = raw > 0.0 || (raw == 0.0 && d != 0.0 && d.signum() == 1.0 && d.abs() >= s.abs());
        let g = if active {
            l * p * d.abs().powf(p - 1.0) * d.signum()
        } else {
            0.0
        };
        g + u
    }

    fn tabulated_min(&self, t: usize, u: f64) -> (f64, f64) {
        let PenaltyFamily::Tabulated { z_grid, values } = &self.family else {
            unreachable!()
        };
        let row = &values[t.min(values.len() - 1)];
        let mut best_v = f64::INFINITY;
        for (&z, &f) in z_grid.iter().zip(row) {
            best_v = best_v.min(f + u * z);
        }
        let tie = 1e-14 * (1.0 + best_v.abs());
        let ties: Vec<f64> = z_grid
            .iter()
            .zip(row)
            .filter(|(&z, &f)| f + u * z <= best_v + tie)
            .map(|(&z, _)| z)
            .collect();
        let lo = ties.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = ties.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        // Ties at vertices on both sides of 0 mean the objective is flat
        // across 0 (it is convex along the tied stretch only if the table
        // is convex; otherwise fall back to the vertex closest to 0).
        if lo < 0.0 && hi > 0.0 {
            let v0 = interpolate(z_grid, row, 0.0);
            if v0 <= best_v + tie {
                return (0.0, v0);
            }
        }
        let z = ties
            .iter()
            .copied()
            .min_by(|a, b| a.abs().total_cmp(&b.abs()).then(a.total_cmp(b)))
            .unwrap_or(0.0);
        (z, best_v)
    }
}

fn interpolate(grid: &[f64], row: &[f64], z: f64) -> f64 {
    let n = grid.len();
    if z < grid[0] || z > grid[n - 1] || z.is_nan() {
        return f64::INFINITY;
    }
    let i = grid.partition_point(|&g| g <= z);
    if i == 0 {
        return row[0];
    }
    if i >= n {
        return row[n - 1];
    }
    let (z0, z1) = (grid[i - 1], grid[i]);
    let w = (z - z0) / (z1 - z0);
    row[i - 1] + w * (row[i] - row[i - 1])
}

/// Outcome of one assumption check. For equality checks `worst_margin` is
/// the largest absolute deviation; for inequality checks it is the smallest
/// slack, so a negative value is a violation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssumptionCheck {
    pub passed: bool,
    pub worst_margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    /// `f(t, 0) = 0`.
    pub normalization: AssumptionCheck,
    /// `f >= 0`.
    pub nonnegativity: AssumptionCheck,
    /// `ell >= eps |U|^2`.
    pub ell_dominates: AssumptionCheck,
    /// `f(t, z) >= eps |z - U_t|^2 - ell`.
    pub quadratic_lower_bound: AssumptionCheck,
    /// `|z*(t, u)| <= psi + M |u|`.
    pub minimizer_growth: AssumptionCheck,
}

impl AssumptionReport {
    pub fn all_passed(&self) -> bool {
        self.normalization.passed
            && self.nonnegativity.passed
            && self.ell_dominates.passed
            && self.quadratic_lower_bound.passed
            && self.minimizer_growth.passed
    }
}

/// Checks the penalty assumptions at the supplied samples and every time
/// level the family carries. Violations are reported, never raised.
pub fn check_assumptions(spec: &PenaltySpec, z_samples: &[f64], u_samples: &[f64]) -> Result<AssumptionReport> {
    if z_samples.is_empty() || u_samples.is_empty() {
        return Err(Error::param("penalty", "samples", "sample lists must be nonempty"));
    }
    let a = spec.assumptions();
    let slack_tol = 1e-12;
    let mut f0_dev = 0.0_f64;
    let mut min_f = f64::INFINITY;
    let mut h2 = f64::INFINITY;
    let mut h3 = f64::INFINITY;
    for t in 0..spec.time_levels() {
        f0_dev = f0_dev.max(spec.f_eval(t, 0.0).abs());
        let ups = spec.upsilon(t);
        for &z in z_samples {
            let f = spec.f_eval(t, z);
            min_f = min_f.min(f);
            let lower = a.eps * (z - ups).powi(2) - a.ell;
            h2 = h2.min(if f.is_infinite() { f64::INFINITY } else { f - lower });
        }
        for &u in u_samples {
            let (z, _) = spec.minimize(t, u);
            let mut slack = spec.growth_bound(u) - z.abs();
            if spec.at_bracket_edge(t, u, z) {
                slack = slack.min(-spec.tol_opt());
            }
            h3 = h3.min(slack);
        }
    }
    let ell_slack = a.ell - a.eps * a.upsilon_bound * a.upsilon_bound;
    let scale = |m: f64| slack_tol * (1.0 + m.abs());
    Ok(AssumptionReport {
        normalization: AssumptionCheck {
            passed: f0_dev <= slack_tol,
            worst_margin: f0_dev,
        },
        nonnegativity: AssumptionCheck {
            passed: min_f >= 0.0,
            worst_margin: min_f,
        },
        ell_dominates: AssumptionCheck {
            passed: ell_slack >= -scale(a.ell),
            worst_margin: ell_slack,
        },
        quadratic_lower_bound: AssumptionCheck {
            passed: h2 >= -scale(a.ell),
            worst_margin: h2,
        },
        minimizer_growth: AssumptionCheck {
            passed: h3 >= -scale(a.psi_bound),
            worst_margin: h3,
        },
    })
}
