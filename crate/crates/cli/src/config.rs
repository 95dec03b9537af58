//! Experiment configuration: a single JSON document.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use robust_stopper::lattice::{LatticeModel, NodeTable, PayoffProcess, StoppingRule};
use robust_stopper::penalty::{AssumptionParams, PenaltySpec, TimeParam};
use robust_stopper::stopping::{ThetaGrid, Tolerances};

use crate::output::Failure;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub lattice: LatticeConfig,
    pub payoff: PayoffConfig,
    pub penalty: PenaltyConfig,
    #[serde(default)]
    pub grid: GridConfig,
    /// Floor before which stopping is not allowed.
    #[serde(default)]
    pub nu: usize,
    pub job: Option<String>,
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub tolerances: ToleranceConfig,
    pub converge: Option<ConvergeConfig>,
    pub rho: Option<RhoConfig>,
    #[serde(default)]
    pub saddle: SaddleConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeConfig {
    pub n_steps: usize,
    pub dt: f64,
}

#[derive(Debug, Clone, Deserialize)]
pub struct PayoffConfig {
    #[serde(flatten)]
    pub kind: PayoffKind,
    /// Declared `||Y||`; the tight bound is used when absent.
    pub bound: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "function", rename_all = "snake_case")]
pub enum PayoffKind {
    Constant {
        value: f64,
    },
    /// `scale * min(max(strike - x, 0), cap) + drift * t`.
    Put {
        strike: f64,
        #[serde(default = "one")]
        scale: f64,
        #[serde(default = "infinite")]
        cap: f64,
        #[serde(default)]
        drift: f64,
    },
    /// `scale * min(max(x - strike, 0), cap) + drift * t`.
    Call {
        strike: f64,
        #[serde(default = "one")]
        scale: f64,
        #[serde(default = "infinite")]
        cap: f64,
        #[serde(default)]
        drift: f64,
    },
    /// `amplitude * sin(frequency * x + phase) + drift * t`.
    Sine {
        amplitude: f64,
        #[serde(default = "one")]
        frequency: f64,
        #[serde(default)]
        phase: f64,
        #[serde(default)]
        drift: f64,
    },
    /// Node values level by level.
    Table {
        values: Vec<Vec<f64>>,
    },
    /// CSV file with one row per time level.
    Csv {
        path: PathBuf,
    },
}

fn one() -> f64 {
    1.0
}

fn infinite() -> f64 {
    f64::INFINITY
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum PenaltyConfig {
    Entropic {
        r: f64,
        assumptions: Option<AssumptionParams>,
    },
    Power {
        scale: TimeParam,
        exponent: f64,
        shift: TimeParam,
        assumptions: Option<AssumptionParams>,
    },
    /// Values inline, or a CSV whose first row is the `z` grid and each
    /// further row the values at one time level.
    Tabulated {
        z_grid: Option<Vec<f64>>,
        values: Option<Vec<Vec<f64>>>,
        csv: Option<PathBuf>,
        assumptions: AssumptionParams,
    },
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(untagged)]
pub enum GridConfig {
    #[default]
    #[serde(skip)]
    Missing,
    Named(String),
    Explicit {
        k: f64,
        theta: Vec<f64>,
    },
    Uniform {
        k: f64,
        points: usize,
    },
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToleranceConfig {
    pub tol_hit: Option<f64>,
    pub tol_opt: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergeConfig {
    pub n_steps: Vec<usize>,
    pub horizon: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RhoConfig {
    pub nu: usize,
    pub gamma: GammaConfig,
    pub xi: PayoffConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum GammaConfig {
    /// Stop at this level on every path.
    Level(usize),
    /// First hitting time of a node region given level by level; terminal
    /// nodes always stop.
    Region(Vec<Vec<bool>>),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaddleConfig {
    #[serde(default = "default_clip")]
    pub max_clip_fraction: f64,
    #[serde(default = "default_samples")]
    pub samples: usize,
}

impl Default for SaddleConfig {
    fn default() -> Self {
        Self {
            max_clip_fraction: default_clip(),
            samples: default_samples(),
        }
    }
}

fn default_clip() -> f64 {
    0.05
}

fn default_samples() -> usize {
    200
}

/// Grid resolved from the config: a tilt grid, or the closed-form transform.
pub enum ValueSpec {
    Grid(ThetaGrid),
    Exact,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<(Self, Vec<u8>), Failure> {
        let bytes = std::fs::read(path).map_err(|e| {
            Failure::config(
                "config",
                "path",
                format!("cannot read {}: {e}", path.display()),
                "check the --config path",
            )
        })?;
        let cfg: Self = serde_json::from_slice(&bytes).map_err(|e| {
            Failure::config(
                "config",
                "json",
                e.to_string(),
                "fix the config document at the reported line and column",
            )
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Ok((cfg.resolve_paths(base), bytes))
    }

    fn resolve_paths(mut self, base: &Path) -> Self {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let PayoffKind::Csv { path } = &mut self.payoff.kind {
            fix(path);
        }
        if let Some(rho) = &mut self.rho {
            if let PayoffKind::Csv { path } = &mut rho.xi.kind {
                fix(path);
            }
        }
        if let PenaltyConfig::Tabulated { csv: Some(p), .. } = &mut self.penalty {
            fix(p);
        }
        self
    }

    pub fn model(&self) -> Result<LatticeModel, Failure> {
        LatticeModel::new(self.lattice.n_steps, self.lattice.dt)
            .map_err(|e| Failure::from_core(e, "set lattice.n_steps >= 1 and lattice.dt > 0"))
    }

    pub fn tolerances(&self) -> Result<Tolerances, Failure> {
        let mut tol = Tolerances::default();
        if let Some(h) = self.tolerances.tol_hit {
            if !(h > 0.0 && h.is_finite()) {
                return Err(Failure::config(
                    "config",
                    "tolerances.tol_hit",
                    "must be positive",
                    "use a small positive value such as 1e-9",
                ));
            }
            tol.hit_rel = h;
        }
        Ok(tol)
    }

    pub fn penalty(&self) -> Result<PenaltySpec, Failure> {
        let hint = "check the penalty parameters and assumption constants";
        let wrap = |e| Failure::from_core(e, hint);
        let spec = match &self.penalty {
            PenaltyConfig::Entropic { r, assumptions } => {
                let s = PenaltySpec::entropic(*r).map_err(wrap)?;
                match assumptions {
                    Some(a) => s.with_assumptions(*a).map_err(wrap)?,
                    None => s,
                }
            }
            PenaltyConfig::Power {
                scale,
                exponent,
                shift,
                assumptions,
            } => {
                let s = PenaltySpec::power(scale.clone(), *exponent, shift.clone()).map_err(wrap)?;
                match assumptions {
                    Some(a) => s.with_assumptions(*a).map_err(wrap)?,
                    None => s,
                }
            }
            PenaltyConfig::Tabulated {
                z_grid,
                values,
                csv,
                assumptions,
            } => {
                let (z, v) = match (z_grid, values, csv) {
                    (Some(z), Some(v), None) => (z.clone(), v.clone()),
                    (None, None, Some(p)) => {
                        let mut rows = read_csv_rows(p, "penalty.csv")?;
                        if rows.len() < 2 {
                            return Err(Failure::config(
                                "config",
                                "penalty.csv",
                                "needs a z-grid row and at least one value row",
                                "put the z grid on the first line",
                            ));
                        }
                        let z = rows.remove(0);
                        (z, rows)
                    }
                    _ => {
                        return Err(Failure::config(
                            "config",
                            "penalty",
                            "tabulated penalty needs either z_grid and values or csv",
                            "give exactly one of the two forms",
                        ))
                    }
                };
                PenaltySpec::tabulated(z, v, *assumptions).map_err(wrap)?
            }
        };
        match self.tolerances.tol_opt {
            Some(t) => spec
                .with_tol_opt(t)
                .map_err(|e| Failure::from_core(e, "use a small positive tol_opt")),
            None => Ok(spec),
        }
    }

    pub fn value_spec(&self) -> Result<ValueSpec, Failure> {
        let hint = "grid must be \"exact\", {\"k\", \"theta\"} or {\"k\", \"points\"}";
        let wrap = |e| Failure::from_core(e, hint);
        match &self.grid {
            GridConfig::Missing => Err(Failure::config("config", "grid", "missing", hint)),
            GridConfig::Named(s) if s == "exact" => Ok(ValueSpec::Exact),
            GridConfig::Named(s) => Err(Failure::config("config", "grid", format!("unknown grid `{s}`"), hint)),
            GridConfig::Explicit { k, theta } => Ok(ValueSpec::Grid(ThetaGrid::new(*k, theta).map_err(wrap)?)),
            GridConfig::Uniform { k, points } => Ok(ValueSpec::Grid(ThetaGrid::uniform(*k, *points).map_err(wrap)?)),
        }
    }

    /// A tilt grid is required by jobs that enumerate or sample deviations.
    pub fn theta_grid(&self, job: &str) -> Result<ThetaGrid, Failure> {
        match self.value_spec()? {
            ValueSpec::Grid(g) => Ok(g),
            ValueSpec::Exact => Err(Failure::config(
                "config",
                "grid",
                format!("job `{job}` needs a tilt grid"),
                "replace \"exact\" with {\"k\": ..., \"theta\": [...]}",
            )),
        }
    }
}

pub fn build_payoff(cfg: &PayoffConfig, model: &LatticeModel, field: &'static str) -> Result<PayoffProcess, Failure> {
    let n = model.n_steps();
    let at = |g: &dyn Fn(f64, f64) -> f64| NodeTable::from_fn(n, |t, j| g(model.time(t), model.state(t, j)));
    let table = match &cfg.kind {
        PayoffKind::Constant { value } => NodeTable::filled(n, *value),
        PayoffKind::Put {
            strike,
            scale,
            cap,
            drift,
        } => at(&|t, x| scale * (strike - x).clamp(0.0, *cap) + drift * t),
        PayoffKind::Call {
            strike,
            scale,
            cap,
            drift,
        } => at(&|t, x| scale * (x - strike).clamp(0.0, *cap) + drift * t),
        PayoffKind::Sine {
            amplitude,
            frequency,
            phase,
            drift,
        } => at(&|t, x| amplitude * (frequency * x + phase).sin() + drift * t),
        PayoffKind::Table { values } => levels_to_table(values.clone(), field)?,
        PayoffKind::Csv { path } => levels_to_table(read_csv_rows(path, field)?, field)?,
    };
    if table.n_steps() != n {
        return Err(Failure::config(
            "config",
            field,
            format!("payoff has {} levels, lattice has {}", table.n_steps() + 1, n + 1),
            "give one row per time level 0..=n_steps",
        ));
    }
    let built = match cfg.bound {
        Some(b) => PayoffProcess::from_table(table, b),
        None => PayoffProcess::from_table_tight(table),
    };
    built.map_err(|e| Failure::from_core(e, "raise the payoff bound or rescale the payoff"))
}

fn levels_to_table(levels: Vec<Vec<f64>>, field: &'static str) -> Result<NodeTable<f64>, Failure> {
    NodeTable::from_levels(levels)
        .map_err(|e| Failure::config("config", field, e.to_string(), "row t must hold t + 1 values"))
}

pub fn read_csv_rows(path: &Path, field: &'static str) -> Result<Vec<Vec<f64>>, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Failure::config(
            "config",
            field,
            format!("cannot read {}: {e}", path.display()),
            "check that the file exists",
        )
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            line.split(',')
                .map(|cell| {
                    cell.trim().parse::<f64>().map_err(|e| {
                        Failure::config(
                            "config",
                            field,
                            format!("{}:{}: `{}` is not a number ({e})", path.display(), i + 1, cell.trim()),
                            "use plain decimal numbers separated by commas",
                        )
                    })
                })
                .collect()
        })
        .collect()
}

pub fn build_gamma(cfg: &GammaConfig, model: &LatticeModel, nu: usize) -> Result<StoppingRule, Failure> {
    let hint = "gamma must stop at or after rho.nu";
    match cfg {
        GammaConfig::Level(l) => StoppingRule::at_level(model, *l).map_err(|e| Failure::from_core(e, hint)),
        GammaConfig::Region(rows) => {
            let region = NodeTable::from_levels(rows.clone()).map_err(|e| {
                Failure::config(
                    "config",
                    "rho.gamma.region",
                    e.to_string(),
                    "row t must hold t + 1 flags",
                )
            })?;
            robust_stopper::lattice::first_hitting_rule(model, &region, nu).map_err(|e| Failure::from_core(e, hint))
        }
    }
}
