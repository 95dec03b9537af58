use serde::Serialize;

use robust_stopper::lattice::{LatticeModel, PayoffProcess};
use robust_stopper::oracle::{enumerate_game, verify_minimax, verify_saddle_exhaustive, FullTree};
use robust_stopper::penalty::PenaltySpec;
use robust_stopper::rbsde::{extract_saddle, SaddleOptions};
use robust_stopper::stopping::{evaluate_rho, robust_value_exact, robust_value_grid, tau_v, Tolerances, ValueSurface};

use crate::config::{build_gamma, build_payoff, ExperimentConfig, ValueSpec};
use crate::output::{num, Artifacts, Csv, Failure};

pub struct Context<'a> {
    pub cfg: &'a ExperimentConfig,
    pub out: &'a mut Artifacts,
    pub seed: u64,
}

fn value_surface(
    model: &LatticeModel,
    y: &PayoffProcess,
    spec: &PenaltySpec,
    how: &ValueSpec,
    nu: usize,
    tol: &Tolerances,
) -> Result<ValueSurface, Failure> {
    let r = match how {
        ValueSpec::Grid(g) => robust_value_grid(model, y, spec, g, nu, tol),
        ValueSpec::Exact => robust_value_exact(model, y, spec, nu, tol),
    };
    r.map_err(|e| Failure::from_core(e, "check nu, the grid and the penalty against the lattice"))
}

fn node_csv<T>(header: &[&str], model: &LatticeModel, mut cells: impl FnMut(usize, usize) -> Vec<T>) -> Csv
where
    T: Into<String>,
{
    let mut csv = Csv::new(header);
    for (t, j) in model.nodes() {
        let mut row = vec![t.to_string(), j.to_string()];
        row.extend(cells(t, j).into_iter().map(Into::into));
        csv.row(&row);
    }
    csv
}

fn flag(b: bool) -> String {
    u8::from(b).to_string()
}

pub fn value(ctx: &mut Context) -> Result<(), Failure> {
    let cfg = ctx.cfg;
    let model = cfg.model()?;
    let y = build_payoff(&cfg.payoff, &model, "payoff")?;
    let spec = cfg.penalty()?;
    let tol = cfg.tolerances()?;
    let surface = value_surface(&model, &y, &spec, &cfg.value_spec()?, cfg.nu, &tol)?;
    let tau = tau_v(&model, &surface, cfg.nu).map_err(|e| Failure::from_core(e, "check nu"))?;
    let stops = tau.stop_nodes();

    ctx.out.csv(
        "value_surface.csv",
        node_csv(&["t", "j", "state", "payoff", "value", "minimizer"], &model, |t, j| {
            vec![
                num(model.state(t, j)),
                num(y.at(t, j)),
                num(surface.v.at(t, j)),
                num(surface.minimizer.at(t, j)),
            ]
        }),
    )?;
    ctx.out.csv(
        "stop_region.csv",
        node_csv(&["t", "j", "in_region", "tau_stops"], &model, |t, j| {
            vec![flag(surface.stop_region.at(t, j)), flag(stops.at(t, j))]
        }),
    )?;
    let bounds_ok = surface.satisfies_bounds(&model, &y, tol.hit(y.bound()));

    #[derive(Serialize)]
    struct Summary {
        root_value: f64,
        nu: usize,
        payoff_bound: f64,
        bounds_hold: bool,
    }
    ctx.out.json(
        "summary.json",
        &Summary {
            root_value: surface.root(),
            nu: cfg.nu,
            payoff_bound: y.bound(),
            bounds_hold: bounds_ok,
        },
    )?;
    if !bounds_ok {
        return Err(Failure::invariant(
            "stopping",
            "value",
            "value surface violates Y <= V <= ||Y|| + T",
            "tighten tol_opt or inspect value_surface.csv",
        ));
    }
    Ok(())
}

fn saddle_options(ctx: &Context, job: &str) -> Result<SaddleOptions, Failure> {
    let cfg = ctx.cfg;
    if cfg.nu != 0 {
        return Err(Failure::config(
            "config",
            "nu",
            format!("job `{job}` runs the game from time 0"),
            "set nu to 0",
        ));
    }
    let mut opts = SaddleOptions::new(cfg.theta_grid(job)?);
    opts.seed = ctx.seed;
    opts.tol = cfg.tolerances()?;
    opts.max_clip_fraction = cfg.saddle.max_clip_fraction;
    opts.samples = cfg.saddle.samples;
    Ok(opts)
}

pub fn saddle(ctx: &mut Context) -> Result<(), Failure> {
    let cfg = ctx.cfg;
    let model = cfg.model()?;
    let y = build_payoff(&cfg.payoff, &model, "payoff")?;
    let spec = cfg.penalty()?;
    let opts = saddle_options(ctx, "saddle")?;
    let cert = extract_saddle(&model, &y, &spec, &opts).map_err(|e| Failure::from_core(e, "check the grid"))?;
    let sol = &cert.rbsde;
    ctx.out.csv(
        "rbsde.csv",
        node_csv(&["t", "j", "gamma", "z", "dk"], &model, |t, j| {
            vec![num(sol.gamma.at(t, j)), num(sol.z.at(t, j)), num(sol.dk.at(t, j))]
        }),
    )?;
    ctx.out.csv(
        "theta_star.csv",
        node_csv(&["t", "j", "theta"], &model, |t, j| vec![num(cert.theta_star.at(t, j))]),
    )?;
    let stops = cert.sigma_star.stop_nodes();
    ctx.out.csv(
        "sigma_star.csv",
        node_csv(&["t", "j", "stops"], &model, |t, j| vec![flag(stops.at(t, j))]),
    )?;
    ctx.out.json("certificate.json", &cert)?;
    if !cert.passes() {
        return Err(Failure::invariant(
            "rbsde",
            "certificate",
            format!(
                "saddle check failed: condition margins {:?}, saddle margins {:?}",
                cert.condition_margins, cert.saddle_margins
            ),
            "inspect certificate.json; a finer lattice reduces clipping",
        ));
    }
    Ok(())
}

pub fn oracle_check(ctx: &mut Context) -> Result<(), Failure> {
    let cfg = ctx.cfg;
    let model = cfg.model()?;
    let y = build_payoff(&cfg.payoff, &model, "payoff")?;
    let spec = cfg.penalty()?;
    let grid = cfg.theta_grid("oracle-check")?;
    let tol = cfg.tolerances()?;
    let hint = "the oracle supports n_steps <= 5 and a small grid";
    let tree = FullTree::from_payoff(&model, &y).map_err(|e| Failure::from_core(e, hint))?;
    let game = enumerate_game(&tree, &spec, &grid, cfg.nu).map_err(|e| Failure::from_core(e, hint))?;
    let dp = value_surface(&model, &y, &spec, &ValueSpec::Grid(grid), cfg.nu, &tol)?.root();
    let minimax = verify_minimax(&game, &tree, &spec, dp).map_err(|e| Failure::from_core(e, hint))?;
    ctx.out.json("minimax_report.json", &minimax)?;
    let mut passed = minimax.passed;
    if cfg.nu == 0 {
        let opts = saddle_options(ctx, "oracle-check")?;
        let cert = extract_saddle(&model, &y, &spec, &opts).map_err(|e| Failure::from_core(e, hint))?;
        let rep = verify_saddle_exhaustive(&cert, &game, &tree, &spec).map_err(|e| Failure::from_core(e, hint))?;
        passed &= rep.passed;
        ctx.out.json("saddle_report.json", &rep)?;
    }
    if !passed {
        return Err(Failure::invariant(
            "oracle",
            "report",
            format!(
                "minimax gap {:.3e}, dp gap {:.3e} (tolerance {:.3e})",
                minimax.duality_gap, minimax.dp_gap, minimax.tolerance
            ),
            "inspect minimax_report.json and saddle_report.json",
        ));
    }
    Ok(())
}

pub fn converge(ctx: &mut Context) -> Result<(), Failure> {
    let cfg = ctx.cfg;
    let conv = cfg.converge.as_ref().ok_or_else(|| {
        Failure::config(
            "config",
            "converge",
            "missing",
            "add {\"n_steps\": [...], \"horizon\": T}",
        )
    })?;
    if conv.n_steps.is_empty() || conv.horizon.is_nan() || conv.horizon <= 0.0 {
        return Err(Failure::config(
            "config",
            "converge",
            "needs a nonempty n_steps list and a positive horizon",
            "for example {\"n_steps\": [25, 50, 100], \"horizon\": 1}",
        ));
    }
    let spec = cfg.penalty()?;
    let tol = cfg.tolerances()?;
    let how = cfg.value_spec()?;
    let mut rows: Vec<(usize, f64, f64)> = Vec::new();
    for &n in &conv.n_steps {
        let model = LatticeModel::new(n, conv.horizon / n as f64)
            .map_err(|e| Failure::from_core(e, "n_steps entries must be positive"))?;
        let y = build_payoff(&cfg.payoff, &model, "payoff")?;
        let root = value_surface(&model, &y, &spec, &how, cfg.nu, &tol)?.root();
        rows.push((n, model.dt(), root));
    }
    let mut csv = Csv::new(&["n_steps", "dt", "root_value", "difference", "order"]);
    let diffs: Vec<Option<f64>> = (0..rows.len())
        .map(|i| (i > 0).then(|| rows[i].2 - rows[i - 1].2))
        .collect();
    for (i, &(n, dt, root)) in rows.iter().enumerate() {
        let order = match (i.checked_sub(1).and_then(|k| diffs[k]), diffs[i]) {
            (Some(a), Some(b)) if a != 0.0 && b != 0.0 => {
                Some((a / b).abs().ln() / (rows[i - 2].1 / rows[i - 1].1).ln())
            }
            _ => None,
        };
        csv.row(&[
            n.to_string(),
            num(dt),
            num(root),
            diffs[i].map(num).unwrap_or_default(),
            order.map(num).unwrap_or_default(),
        ]);
    }
    ctx.out.csv("convergence.csv", csv)?;
    Ok(())
}

pub fn rho(ctx: &mut Context) -> Result<(), Failure> {
    let cfg = ctx.cfg;
    let rc = cfg.rho.as_ref().ok_or_else(|| {
        Failure::config(
            "config",
            "rho",
            "missing",
            "add {\"nu\": ..., \"gamma\": ..., \"xi\": ...}",
        )
    })?;
    let model = cfg.model()?;
    let spec = cfg.penalty()?;
    let grid = cfg.theta_grid("rho")?;
    let xi = build_payoff(&rc.xi, &model, "rho.xi")?;
    let gamma = build_gamma(&rc.gamma, &model, rc.nu)?;
    let vals: Vec<f64> = evaluate_rho(&model, &spec, &grid, rc.nu, &gamma, xi.values())
        .map_err(|e| Failure::from_core(e, "gamma must not stop before rho.nu"))?;
    let mut csv = Csv::new(&["nu", "j", "state", "rho"]);
    for (j, v) in vals.iter().enumerate() {
        csv.row(&[rc.nu.to_string(), j.to_string(), num(model.state(rc.nu, j)), num(*v)]);
    }
    ctx.out.csv("rho.csv", csv)?;
    Ok(())
}
