use std::fs;
use std::path::Path as FsPath;

use serde::Serialize;
use serde_json::json;

use switchdiff::averaging::{self, Path};
use switchdiff::experiments::{self, CompareOptions, EventSpec, SweepResult};
use switchdiff::io;
use switchdiff::model::{build_model, validate_model, ProbeSpec};
use switchdiff::perturb::{self, PerturbOptions, PerturbResult, UniquenessTolerances};
use switchdiff::ratefn::{self, LocalRateOptions};
use switchdiff::simulator::{self, SimSpec};
use switchdiff::{fastchain, with_threads, Error, Model, StreamId};

use crate::args::{Cli, Command, EventArgs, LocalArgs, PerturbInput, StartArgs, TripleKind};
use crate::manifest::{sha256_hex, OutDir, RunManifest};
use crate::Failure;

pub const THREADS_ENV: &str = "SWITCHDIFF_THREADS";

type Outcome = Result<(), Failure>;

/// Worker count from `--threads`, else from the environment.
fn thread_count(flag: Option<usize>) -> Result<Option<usize>, Error> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) if !v.trim().is_empty() => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        _ => Ok(None),
    }
}

pub fn run(cli: Cli) -> Outcome {
    let threads = thread_count(cli.common.threads)?;
    with_threads(threads, || dispatch(cli, threads))?
}

struct Context {
    model: Model,
    config_sha256: String,
    out: OutDir,
    seed: u64,
    threads: Option<usize>,
}

impl Context {
    fn finish(self, subcommand: &str, parameters: &impl Serialize) -> Outcome {
        self.out.finish(RunManifest {
            subcommand: subcommand.to_string(),
            config_sha256: Some(self.config_sha256),
            seed: self.seed,
            threads: self.threads,
            parameters: serde_json::to_value(parameters).map_err(Error::from)?,
            artifacts: Vec::new(),
            wall_clock_seconds: 0.0,
        })?;
        Ok(())
    }
}

fn dispatch(cli: Cli, threads: Option<usize>) -> Outcome {
    let config_path = cli
        .common
        .config
        .as_deref()
        .ok_or_else(|| Error::Config("--config is required".into()))?;
    let bytes = fs::read(config_path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", config_path.display())))?;
    let text = String::from_utf8(bytes.clone()).map_err(|_| Error::Config("config is not UTF-8".into()))?;
    let config = io::parse_config(&text)?;
    let model = build_model(&config)?;
    let mut ctx = Context {
        model,
        config_sha256: sha256_hex(&bytes),
        out: OutDir::create(&cli.common.out)?,
        seed: cli.common.seed,
        threads,
    };

    match cli.command {
        Command::Validate(a) => {
            let report = validate_model(&ctx.model, &ProbeSpec::cube(ctx.model.d(), a.half_width, a.samples));
            ctx.out.json("validation.json", &report)?;
            let failures: Vec<String> = report.failures().map(|c| format!("{}: {}", c.name, c.detail)).collect();
            println!("validation {}", if report.passed { "passed" } else { "failed" });
            ctx.finish("validate", &a)?;
            if !failures.is_empty() {
                return Err(Failure::Assumptions(failures.join("; ")));
            }
        }
        Command::Simulate(a) => {
            let spec = sim_spec(&ctx.model, &a.start, a.eps)?;
            if a.n <= 1 {
                let traj = simulator::simulate(&ctx.model, &spec, StreamId::new(ctx.seed, a.stream))?;
                ctx.out.table("trajectory.csv", &io::trajectory_table(&traj))?;
                ctx.out.table("jumps.csv", &io::jumps_table(&traj))?;
                println!("{} jumps, X(T) = {:?}", traj.jumps.len(), traj.path.end());
            } else {
                let reference = averaging::solve_averaged_ode(&ctx.model, &spec.x0, spec.t_end, spec.h)?;
                let stats = simulator::batch_simulate(&ctx.model, &spec, a.n, ctx.seed, None, Some(&reference))?;
                ctx.out.table("ensemble.csv", &io::ensemble_table(&stats, ctx.model.d()))?;
                if let Some((m, s)) = stats.mean_sup_dev() {
                    println!("mean sup deviation from the averaged path {m:.6} +- {s:.6}");
                }
            }
            ctx.finish("simulate", &a)?;
        }
        Command::Average(a) => {
            let x0 = start_point(&ctx.model, &a.start)?;
            let path = averaging::solve_averaged_ode(&ctx.model, &x0, a.start.t_end, a.start.h)?;
            ctx.out.table("averaged_path.csv", &io::path_table(&path))?;
            if !a.eps.is_empty() {
                let y0 = fast_state(&ctx.model, a.start.y0)?;
                let rows = averaging::lln_diagnostic(&ctx.model, &x0, y0, &a.eps, a.n, ctx.seed, a.start.h, a.start.t_end)?;
                ctx.out.table("lln.csv", &io::lln_table(&rows))?;
            }
            ctx.finish("average", &a)?;
        }
        Command::Occupation(a) => {
            let spec = sim_spec(&ctx.model, &a.start, a.eps)?;
            let traj = simulator::simulate(&ctx.model, &spec, StreamId::new(ctx.seed, a.stream))?;
            let occ = simulator::occupation_measure(&traj, ctx.model.n_states(), a.t.unwrap_or(spec.t_end))?;
            let nu = fastchain::nu(&ctx.model, &spec.x0)?;
            let mut table = io::Table::new(["state", "fraction", "nu_at_x0"].map(String::from).to_vec());
            for (i, (o, n)) in occ.iter().zip(&nu).enumerate() {
                table.push(vec![(i + 1).to_string(), io::fmt_f64(*o), io::fmt_f64(*n)]);
            }
            ctx.out.table("occupation.csv", &table)?;
            ctx.finish("occupation", &a)?;
        }
        Command::Ratefn(a) => {
            let path = io::load_path(&a.path)?;
            let rate = ratefn::path_rate(&ctx.model, &path, &local_options(a.local, ctx.seed))?;
            ctx.out.table("path_rate.csv", &io::path_rate_table(&rate, &ctx.model))?;
            ctx.out.json(
                "rate.json",
                &json!({ "I": finite_or_null(rate.value), "infeasible_interval": rate.infeasible_interval.map(|k| k + 1) }),
            )?;
            println!("I = {}", rate.value);
            ctx.finish("ratefn", &a)?;
        }
        Command::Perturb(a) => {
            let result = run_perturb(&mut ctx, &a.input)?;
            println!(
                "delta* = {:e}, sup deviation {:e}, cost {:e} (input {:e})",
                result.delta_star, result.sup_deviation, result.cost_star, result.cost_input
            );
            ctx.finish("perturb", &a)?;
        }
        Command::Sweep(a) => {
            let event = parse_event(&a.event)?;
            let sweep = run_sweep(&mut ctx, &a.start, &event, &a.eps, &a.n)?;
            if let Some(fit) = &sweep.fit {
                println!("fitted slope {:.6} over {} points", fit.slope, fit.points);
            }
            ctx.finish("sweep", &a)?;
        }
        Command::Compare(a) => {
            let event = parse_event(&a.event)?;
            let sweep = if a.eps.is_empty() {
                None
            } else {
                Some(run_sweep(&mut ctx, &a.start, &event, &a.eps, &a.n)?)
            };
            let x0 = start_point(&ctx.model, &a.start)?;
            let opts = CompareOptions {
                k_nodes: a.k_nodes,
                refine: !a.no_refine,
                seed: ctx.seed,
                ..CompareOptions::default()
            };
            let rep = experiments::ldp_compare(&ctx.model, &x0, a.start.t_end, &event, sweep.as_ref(), &opts)?;
            ctx.out.table("compare_path.csv", &io::path_table(&rep.path))?;
            ctx.out.json(
                "compare.json",
                &json!({
                    "I_star": rep.i_star,
                    "slope_fit": rep.slope_fit,
                    "relative_gap": rep.relative_gap,
                    "diagnostics": rep.diagnostics,
                }),
            )?;
            println!("I* = {:.8}", rep.i_star);
            ctx.finish("compare", &a)?;
        }
        Command::Tilt(a) => {
            let result = run_perturb(&mut ctx, &a.input)?;
            let y0 = fast_state(&ctx.model, a.input.start.y0)?;
            let h = a.h_sim.unwrap_or(a.input.start.h);
            let rows = experiments::tilted_convergence(&ctx.model, &result, y0, &a.eps, a.n, ctx.seed, h)?;
            ctx.out.table("tilt.csv", &io::tilt_table(&rows))?;
            ctx.finish("tilt", &a)?;
        }
    }
    Ok(())
}

fn finite_or_null(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

fn local_options(a: LocalArgs, seed: u64) -> LocalRateOptions {
    LocalRateOptions {
        multistart: a.multistart,
        seed,
        ..LocalRateOptions::default()
    }
}

fn start_point(model: &Model, a: &StartArgs) -> Result<Vec<f64>, Error> {
    if a.x0.is_empty() {
        return Ok(vec![0.0; model.d()]);
    }
    if a.x0.len() != model.d() {
        return Err(Error::Config(format!("--x0 has {} entries, the model has d = {}", a.x0.len(), model.d())));
    }
    Ok(a.x0.clone())
}

fn fast_state(model: &Model, y0: usize) -> Result<usize, Error> {
    if y0 == 0 || y0 > model.n_states() {
        return Err(Error::Config(format!("--y0 must lie in 1..={}", model.n_states())));
    }
    Ok(y0 - 1)
}

fn sim_spec(model: &Model, a: &StartArgs, eps: f64) -> Result<SimSpec, Error> {
    Ok(SimSpec::new(eps, start_point(model, a)?, fast_state(model, a.y0)?, a.t_end, a.h))
}

fn parse_event(a: &EventArgs) -> Result<EventSpec, Error> {
    let text = match a.event.strip_prefix('@') {
        Some(file) => fs::read_to_string(FsPath::new(file))
            .map_err(|e| Error::Config(format!("cannot read event file {file}: {e}")))?,
        None => a.event.clone(),
    };
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("event: {e}")))
}

fn run_sweep(ctx: &mut Context, start: &StartArgs, event: &EventSpec, eps: &[f64], n: &[u64]) -> Result<SweepResult, Error> {
    let n_list: Vec<u64> = match n.len() {
        1 => vec![n[0]; eps.len()],
        k if k == eps.len() => n.to_vec(),
        _ => return Err(Error::Config("--n needs one value or one per eps".into())),
    };
    let base = sim_spec(&ctx.model, start, eps.first().copied().unwrap_or(1.0))?;
    let sweep = experiments::eps_sweep(&ctx.model, &base, event, eps, &n_list, ctx.seed)?;
    ctx.out.table("sweep.csv", &io::sweep_table(&sweep))?;
    ctx.out.json("sweep.json", &sweep)?;
    Ok(sweep)
}

fn run_perturb(ctx: &mut Context, a: &PerturbInput) -> Result<PerturbResult, Error> {
    let model = &ctx.model;
    let path: Path = match &a.path {
        Some(p) => io::load_path(p)?,
        None => {
            let x0 = start_point(model, &a.start)?;
            averaging::solve_averaged_ode(model, &x0, a.start.t_end, a.start.h)?
        }
    };
    let table = match a.triple {
        TripleKind::ZeroCost => perturb::zero_cost_triple(model, &path)?,
        TripleKind::Optimal => perturb::optimal_triple(model, &path, &LocalRateOptions::default())?,
    };
    let opts = PerturbOptions {
        cap_rates: !a.no_cap,
        delta_override: a.delta,
        ..PerturbOptions::default()
    };
    let result = perturb::perturb_triple(model, &path, &table, a.gamma, &opts)?;
    let uniqueness = perturb::uniqueness_check(model, &result, UniquenessTolerances::default())?;
    ctx.out.table("perturb_controls.csv", &io::perturb_table(&result, model))?;
    ctx.out.table("xi_star.csv", &io::path_table(&result.xi_star))?;
    ctx.out.json(
        "perturb.json",
        &json!({
            "delta_star": result.delta_star,
            "halvings": result.halvings,
            "m2": result.m2,
            "m3": result.m3,
            "gamma": result.gamma,
            "cost_input": result.cost_input,
            "cost_star": result.cost_star,
            "sup_deviation": result.sup_deviation,
            "invariants_hold": result.invariants_hold,
            "constants": result.constants,
            "stationary_floor": perturb::stationary_floor(model, &result),
            "uniqueness": uniqueness,
        }),
    )?;
    Ok(result)
}
