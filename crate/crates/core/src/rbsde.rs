//! Reflected backward equation on the binomial lattice, comparison and BMO
//! diagnostics, and construction of the saddle point `(theta*, sigma*)`.
//!
//! The scheme is explicit: with `E = (G_up + G_down) / 2` and
//! `Z = (G_up - G_down) / (2 sqrt(dt))`,
//!
//! ```text
//! G^ = E + h(t, E, Z) dt,   G = max(S, G^),   dK = G - G^ >= 0.
//! ```
//!
//! `dK` is positive only where `G = S`, which is the discrete flat-off
//! condition.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{first_hitting_rule, LatticeModel, NodeTable, PayoffProcess, StoppingRule};
use crate::measures::{density_process, max_tilt, ControlPolicy, MeasureDensity, MAX_DENSITY_STEPS};
use crate::penalty::PenaltySpec;
use crate::stopping::{snell_envelope, strategy_values, ThetaGrid, Tolerances};

/// Generator `h(t, j, value, slope)` of the backward equation.
pub trait Generator: Sync {
    fn eval(&self, t: usize, j: usize, value: f64, slope: f64) -> f64;
}

impl<F> Generator for F
where
    F: Fn(usize, usize, f64, f64) -> f64 + Sync,
{
    fn eval(&self, t: usize, j: usize, value: f64, slope: f64) -> f64 {
        self(t, j, value, slope)
    }
}

/// `h = 0`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroGenerator;

impl Generator for ZeroGenerator {
    fn eval(&self, _: usize, _: usize, _: f64, _: f64) -> f64 {
        0.0
    }
}

/// `h(t, z) = f~(t, z)`, whose solution is the robust value.
#[derive(Debug, Clone, Copy)]
pub struct ConjugateGenerator<'a> {
    pub spec: &'a PenaltySpec,
}

impl Generator for ConjugateGenerator<'_> {
    fn eval(&self, t: usize, _: usize, _: f64, slope: f64) -> f64 {
        self.spec.f_conjugate(t, slope)
    }
}

/// `h_Q(t, z) = f(t, theta_t) + z theta_t` for a fixed policy.
#[derive(Debug, Clone, Copy)]
pub struct PolicyGenerator<'a> {
    pub spec: &'a PenaltySpec,
    pub policy: &'a ControlPolicy,
}

impl Generator for PolicyGenerator<'_> {
    fn eval(&self, t: usize, j: usize, _: f64, slope: f64) -> f64 {
        let th = self.policy.at(t, j);
        self.spec.f_eval(t, th) + slope * th
    }
}

pub fn generator_for_policy<'a>(spec: &'a PenaltySpec, policy: &'a ControlPolicy) -> PolicyGenerator<'a> {
    PolicyGenerator { spec, policy }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RBSDESolution {
    pub gamma: NodeTable<f64>,
    /// Slope at levels `0..N-1`; terminal entries are zero.
    pub z: NodeTable<f64>,
    /// Reflection increments at levels `0..N-1`; terminal entries are zero.
    pub dk: NodeTable<f64>,
}

impl RBSDESolution {
    pub fn n_steps(&self) -> usize {
        self.gamma.n_steps()
    }

    /// Largest `dK * (G - S)` over the lattice.
    pub fn flat_off_violation(&self, obstacle: &PayoffProcess) -> f64 {
        let n = self.n_steps();
        let mut worst = 0.0_f64;
        for t in 0..n {
            for j in 0..=t {
                let dk = self.dk.at(t, j);
                if dk > 0.0 {
                    worst = worst.max(dk * (self.gamma.at(t, j) - obstacle.at(t, j)).abs());
                }
            }
        }
        worst
    }

    /// Nodes with `dK > 0` whose value is off the obstacle by more than `tol`.
    pub fn flat_off_holds(&self, obstacle: &PayoffProcess, tol: f64) -> bool {
        let n = self.n_steps();
        (0..n)
            .all(|t| (0..=t).all(|j| self.dk.at(t, j) <= 0.0 || (self.gamma.at(t, j) - obstacle.at(t, j)).abs() <= tol))
    }
}

pub fn solve_rbsde(
    model: &LatticeModel,
    xi: &[f64],
    h: &impl Generator,
    obstacle: &PayoffProcess,
) -> Result<RBSDESolution> {
    let n = model.n_steps();
    if xi.len() != n + 1 || obstacle.n_steps() != n {
        return Err(Error::shape(
            "rbsde",
            "terminal values and obstacle must match the lattice",
        ));
    }
    for (j, (&x, &s)) in xi.iter().zip(obstacle.terminal()).enumerate() {
        if x < s {
            return Err(Error::ObstacleViolation { j, xi: x, obstacle: s });
        }
    }
    let (dt, sq) = (model.dt(), model.increment());
    let mut gamma = NodeTable::filled(n, 0.0);
    let mut z = NodeTable::filled(n, 0.0);
    let mut dk = NodeTable::filled(n, 0.0);
    gamma.level_mut(n).copy_from_slice(xi);
    for t in (0..n).rev() {
        for j in 0..=t {
            let (up, dn) = (gamma.at(t + 1, j + 1), gamma.at(t + 1, j));
            let mean = 0.5 * (up + dn);
            let slope = (up - dn) / (2.0 * sq);
            let unreflected = mean + h.eval(t, j, mean, slope) * dt;
            let g = unreflected.max(obstacle.at(t, j));
            gamma.set(t, j, g);
            z.set(t, j, slope);
            dk.set(t, j, g - unreflected);
        }
    }
    Ok(RBSDESolution { gamma, z, dk })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub holds: bool,
    /// Minimum of `G' - G` over all nodes.
    pub worst_margin: f64,
}

/// Checks `G <= G'` node-wise (within `1e-10`).
pub fn compare_rbsde(sol: &RBSDESolution, sol_prime: &RBSDESolution) -> Result<Comparison> {
    if sol.n_steps() != sol_prime.n_steps() {
        return Err(Error::shape("rbsde", "solutions live on different lattices"));
    }
    let worst_margin = sol
        .gamma
        .values()
        .iter()
        .zip(sol_prime.gamma.values())
        .map(|(a, b)| b - a)
        .fold(f64::INFINITY, f64::min);
    Ok(Comparison {
        holds: worst_margin >= -1e-10,
        worst_margin,
    })
}

/// `sup` over nodes of `E[sum_{s >= t} Z_s^2 dt | node]^(1/2)` under the
/// reference measure. Conditioning on a node is the same as conditioning on
/// any stopping time that hits it, so node starts give the full supremum.
pub fn bmo_norm(model: &LatticeModel, slope: &NodeTable<f64>) -> f64 {
    let n = model.n_steps();
    let dt = model.dt();
    let mut acc = vec![0.0; n + 1];
    let mut worst = 0.0_f64;
    for t in (0..n).rev() {
        let next = acc.clone();
        for j in 0..=t {
            let z = slope.at(t, j);
            acc[j] = z * z * dt + 0.5 * (next[j] + next[j + 1]);
            worst = worst.max(acc[j]);
        }
    }
    worst.sqrt()
}

/// `exp(4 kappa ||G||) (1 / (4 kappa^2) + T)^(1/2)`.
pub fn bmo_bound(spec: &PenaltySpec, gamma_sup: f64, horizon: f64) -> f64 {
    let k = spec.kappa();
    (4.0 * k * gamma_sup).exp() * (1.0 / (4.0 * k * k) + horizon).sqrt()
}

/// Deviations against which the saddle inequalities are checked.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviationSet {
    pub rules: Vec<StoppingRule>,
    pub policies: Vec<ControlPolicy>,
    pub rules_exhaustive: bool,
    pub policies_exhaustive: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaddleOptions {
    /// Tilts available to deviating policies.
    pub grid: ThetaGrid,
    /// Largest fraction of non-terminal nodes at which `theta*` may be clipped.
    pub max_clip_fraction: f64,
    /// Node-region rules are enumerated exhaustively up to this horizon.
    pub exhaustive_max_steps: usize,
    /// Markov grid policies are enumerated exhaustively up to this count.
    pub policy_cap: u64,
    /// Random rules/policies drawn when enumeration is not exhaustive.
    pub samples: usize,
    pub seed: u64,
    pub tol: Tolerances,
}

impl SaddleOptions {
    pub fn new(grid: ThetaGrid) -> Self {
        Self {
            grid,
            max_clip_fraction: 0.05,
            exhaustive_max_steps: 4,
            policy_cap: 100_000,
            samples: 200,
            seed: 0,
            tol: Tolerances::default(),
        }
    }
}

fn region_from_bits(n: usize, bits: u64) -> NodeTable<bool> {
    let mut k = 0;
    NodeTable::from_fn(n, |t, _| {
        if t == n {
            true
        } else {
            let b = bits >> k & 1 == 1;
            k += 1;
            b
        }
    })
}

/// Node-region stopping rules and Markov grid policies, enumerated
/// exhaustively when small enough and sampled otherwise.
pub fn deviation_set(model: &LatticeModel, opts: &SaddleOptions) -> Result<DeviationSet> {
    let n = model.n_steps();
    let inner = n * (n + 1) / 2;
    let mut rng = StdRng::seed_from_u64(opts.seed);

    let rules_exhaustive = n <= opts.exhaustive_max_steps;
    let rules = if rules_exhaustive {
        (0..1u64 << inner)
            .map(|bits| first_hitting_rule(model, &region_from_bits(n, bits), 0))
            .collect::<Result<Vec<_>>>()?
    } else {
        let mut rules = (0..=n)
            .map(|level| StoppingRule::at_level(model, level))
            .collect::<Result<Vec<_>>>()?;
        for _ in 0..opts.samples {
            let p: f64 = rng.gen_range(0.05..0.6);
            let region = NodeTable::from_fn(n, |_, _| rng.gen_bool(p));
            rules.push(first_hitting_rule(model, &region, 0)?);
        }
        rules
    };

    let g = opts.grid.values();
    let count = (g.len() as f64).powi(inner as i32);
    let policies_exhaustive = count <= opts.policy_cap as f64;
    let policies = if policies_exhaustive {
        let total = count as u64;
        (0..total)
            .map(|mut idx| {
                let mut theta = NodeTable::filled(n, 0.0);
                for t in 0..n {
                    for j in 0..=t {
                        theta.set(t, j, g[(idx % g.len() as u64) as usize]);
                        idx /= g.len() as u64;
                    }
                }
                ControlPolicy::new(model, theta, 0)
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        let mut policies = g
            .iter()
            .map(|&th| ControlPolicy::constant(model, th, 0))
            .collect::<Result<Vec<_>>>()?;
        for _ in 0..opts.samples {
            let theta = NodeTable::from_fn(n, |t, _| if t < n { g[rng.gen_range(0..g.len())] } else { 0.0 });
            policies.push(ControlPolicy::new(model, theta, 0)?);
        }
        policies
    };
    Ok(DeviationSet {
        rules,
        policies,
        rules_exhaustive,
        policies_exhaustive,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaddleCertificate {
    pub theta_star: ControlPolicy,
    pub sigma_star: StoppingRule,
    /// Path density of `Q*`; absent when the horizon is too long to store
    /// per-path values.
    pub q_star_density: Option<MeasureDensity>,
    pub rbsde: RBSDESolution,
    /// Game value at the root, `G(0)`.
    pub value: f64,
    /// `E_{Q*}[Y_{sigma*} + sum f(theta*) dt]`.
    pub saddle_payoff: f64,
    pub clipped_nodes: usize,
    /// Slack of conditions (i) `Y = R^{Q*}` on the stop set of `sigma*`,
    /// (ii) `V(0) <= E_Q[V^Q(sigma*)]`, (iii) `V^{Q*}` is a `Q*`-martingale
    /// up to `sigma*`. Equalities report minus the largest deviation.
    pub condition_margins: [f64; 3],
    /// Worst slack of `E_{Q*}[Y^{Q*}_nu] <= E_{Q*}[Y^{Q*}_{sigma*}]` and of
    /// `E_{Q*}[Y^{Q*}_{sigma*}] <= E_Q[Y^Q_{sigma*}]` over the deviations.
    pub saddle_margins: [f64; 2],
    pub rules_tested: usize,
    pub policies_tested: usize,
    pub rules_exhaustive: bool,
    pub policies_exhaustive: bool,
    /// Payoff scale used for the `-1e-9 * scale` acceptance threshold.
    pub scale: f64,
}

impl SaddleCertificate {
    pub fn threshold(&self) -> f64 {
        -1e-9 * self.scale
    }

    pub fn passes(&self) -> bool {
        let th = self.threshold();
        self.condition_margins
            .iter()
            .chain(&self.saddle_margins)
            .all(|&m| m >= th)
    }
}

/// Solves the reflected equation with generator `f~`, builds
/// `theta* = z*(t, Z)` and `sigma* = inf{t : G = Y}`, and verifies the
/// sufficient conditions and both saddle inequalities.
pub fn extract_saddle(
    model: &LatticeModel,
    y: &PayoffProcess,
    spec: &PenaltySpec,
    opts: &SaddleOptions,
) -> Result<SaddleCertificate> {
    let deviations = deviation_set(model, opts)?;
    extract_saddle_with(model, y, spec, opts, &deviations)
}

pub fn extract_saddle_with(
    model: &LatticeModel,
    y: &PayoffProcess,
    spec: &PenaltySpec,
    opts: &SaddleOptions,
    deviations: &DeviationSet,
) -> Result<SaddleCertificate> {
    opts.grid.validate(model, spec)?;
    let n = model.n_steps();
    let sol = solve_rbsde(model, y.terminal(), &ConjugateGenerator { spec }, y)?;

    let limit = max_tilt(model.dt());
    let mut clipped = 0;
    let mut theta = NodeTable::filled(n, 0.0);
    for t in 0..n {
        for j in 0..=t {
            let z = spec.z_star(t, sol.z.at(t, j))?;
            let c = z.clamp(-limit, limit);
            if c != z {
                clipped += 1;
            }
            theta.set(t, j, c);
        }
    }
    let inner = n * (n + 1) / 2;
    if clipped as f64 > opts.max_clip_fraction * inner as f64 {
        return Err(Error::LatticeTooCoarse {
            clipped,
            total: inner,
            limit_fraction: opts.max_clip_fraction,
        });
    }
    let theta_star = ControlPolicy::new(model, theta, 0)?;
    let h = opts.tol.hit(y.bound());
    let region = sol.gamma.map(|t, j, &g| g - y.at(t, j) <= h);
    let sigma_star = first_hitting_rule(model, &region, 0)?;
    let q_star_density = if n <= MAX_DENSITY_STEPS {
        Some(density_process(model, &theta_star)?)
    } else {
        None
    };

    // (i) Y = R^{Q*} where sigma* stops.
    let snell = snell_envelope(model, y, spec, &theta_star, 0, &opts.tol)?;
    let stops = sigma_star.stop_nodes();
    let mut dev_i = 0.0_f64;
    for (t, j) in model.nodes() {
        if stops.at(t, j) {
            dev_i = dev_i.max((snell.r.at(t, j) - y.at(t, j)).abs());
        }
    }

    // (iii) V + accumulated cost is a Q*-martingale up to sigma*.
    let w_star = strategy_values(model, &sol.gamma, spec, &theta_star, &sigma_star)?;
    let reach = sigma_star.reachable_unstopped();
    let mut dev_iii = 0.0_f64;
    for (t, j) in model.nodes() {
        if reach.at(t, j) {
            dev_iii = dev_iii.max((w_star.at(t, j) - sol.gamma.at(t, j)).abs());
        }
    }

    let value = sol.gamma.at(0, 0);
    let base = strategy_values(model, y.values(), spec, &theta_star, &sigma_star)?.at(0, 0);

    // (ii) and the right saddle inequality range over deviating policies.
    let (margin_ii, margin_right) = deviations
        .policies
        .par_iter()
        .map(|q| -> Result<(f64, f64)> {
            let vq = strategy_values(model, &sol.gamma, spec, q, &sigma_star)?.at(0, 0);
            let yq = strategy_values(model, y.values(), spec, q, &sigma_star)?.at(0, 0);
            Ok((vq - value, yq - base))
        })
        .try_reduce(
            || (f64::INFINITY, f64::INFINITY),
            |a, b| Ok((a.0.min(b.0), a.1.min(b.1))),
        )?;

    let margin_left = deviations
        .rules
        .par_iter()
        .map(|rule| -> Result<f64> { Ok(base - strategy_values(model, y.values(), spec, &theta_star, rule)?.at(0, 0)) })
        .try_reduce(|| f64::INFINITY, |a, b| Ok(a.min(b)))?;

    Ok(SaddleCertificate {
        theta_star,
        sigma_star,
        q_star_density,
        value,
        saddle_payoff: base,
        rbsde: sol,
        clipped_nodes: clipped,
        condition_margins: [-dev_i, margin_ii, -dev_iii],
        saddle_margins: [margin_left, margin_right],
        rules_tested: deviations.rules.len(),
        policies_tested: deviations.policies.len(),
        rules_exhaustive: deviations.rules_exhaustive,
        policies_exhaustive: deviations.policies_exhaustive,
        scale: (y.bound() + model.horizon()).max(1.0),
    })
}
