//! `hallci`: batch runner for block verification, single iteration steps and the
//! background experiments. Every run writes its resolved config, a JSON report and,
//! where it has one, a CSV ledger. The exit status is 0 exactly when every check passed.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use hallci::blocks::{build_blocks, verify_block, ResolutionPolicy};
use hallci::geometry::{calibrate_delta, Family, GammaSolver, ScalePolicy, IDENTITY};
use hallci::iterate::{
    background_magnetic, helicity_slice, inductive_report, mollification_limit, psi, run_step,
    Background, Check, NewSample, ParamSchedule, StepConfig,
};
use hallci::norms::{lp_slice, Quadrature};
use hallci::stress::{self, PdeParams};
use hallci::{Error, Grid, Rank, Result, Slice, Symmetry, TorusField};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "hallci", version, about = "Single-step convex-integration runs for 2.5D Hall-MHD")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check the building-block identities with spectral and closed-form derivatives.
    VerifyBlocks(Opts),
    /// Run one step on the background and write the per-part stress ledger.
    Decompose(Opts),
    /// Run one step on the background with the inductive estimates and optional snapshots.
    Iterate(Opts),
    /// Residual of the background with its initial stresses, strong and weak form.
    Residual(Opts),
    /// Helicity of the background magnetic field at one time.
    Helicity(Opts),
    /// Stresses of the mollified background as the mollification frequency grows.
    MollifyLimit(Opts),
    /// Sampled radius of the geometric-lemma ball.
    CalibrateDelta(Opts),
    /// Summarize the JSON reports in a run directory.
    Report(Opts),
}

#[derive(Args, Debug)]
struct Opts {
    /// Flat key=value config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, env = "HALLCI_OUT")]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long)]
    threads: Option<usize>,
    /// Any config key, as key=value; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long)]
    nt: Option<usize>,
    #[arg(long)]
    m: Option<u32>,
    #[arg(long)]
    t: Option<f64>,
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    sigma: Option<i64>,
    #[arg(long)]
    l: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    /// 1 or velocity, 2 or magnetic, all.
    #[arg(long)]
    family: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    samples: Option<usize>,
    /// Comma-separated mollification frequencies.
    #[arg(long)]
    lambdas: Option<String>,
    /// Run directory for `report`.
    #[arg(long)]
    dir: Option<PathBuf>,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::VerifyBlocks(_) => "verify-blocks",
            Command::Decompose(_) => "decompose",
            Command::Iterate(_) => "iterate",
            Command::Residual(_) => "residual",
            Command::Helicity(_) => "helicity",
            Command::MollifyLimit(_) => "mollify-limit",
            Command::CalibrateDelta(_) => "calibrate-delta",
            Command::Report(_) => "report",
        }
    }

    fn opts(&self) -> &Opts {
        match self {
            Command::VerifyBlocks(o)
            | Command::Decompose(o)
            | Command::Iterate(o)
            | Command::Residual(o)
            | Command::Helicity(o)
            | Command::MollifyLimit(o)
            | Command::CalibrateDelta(o)
            | Command::Report(o) => o,
        }
    }

    fn defaults(&self) -> &'static [(&'static str, &'static str)] {
        const STEP: &[(&str, &str)] = &[
            ("grid", "512"),
            ("nt", "65"),
            ("m", "1"),
            ("mu", "16"),
            ("sigma", "2"),
            ("l", "0.05"),
            ("seed", "7"),
            ("samples", "10000"),
            ("scale", "per-family"),
            ("schedule", "desk"),
            ("m_const", "1"),
            ("snapshots", "false"),
        ];
        match self {
            Command::VerifyBlocks(_) => &[("grid", "1024"), ("mu", "8"), ("sigma", "2"), ("family", "all"), ("scale", "per-family")],
            Command::Decompose(_) | Command::Iterate(_) => STEP,
            Command::Residual(_) => &[("grid", "128"), ("nt", "65"), ("m", "1"), ("weak_tests", "4"), ("seed", "7")],
            Command::Helicity(_) => &[("grid", "256"), ("m", "1"), ("t", "0.55")],
            Command::MollifyLimit(_) => &[("grid", "128"), ("nt", "65"), ("m", "1"), ("lambdas", "4,8,16")],
            Command::CalibrateDelta(_) => &[("family", "all"), ("samples", "10000"), ("seed", "7")],
            Command::Report(_) => &[],
        }
    }
}

fn resolve(cmd: &Command) -> Result<RunConfig> {
    let o = cmd.opts();
    let mut c = RunConfig::with_defaults(cmd.defaults());
    c.set("out", "hallci-out")?;
    for (k, v) in [("nu1", "1"), ("nu2", "1"), ("alpha1", "0.5"), ("alpha2", "1")] {
        c.set(k, v)?;
    }
    if let Some(path) = &o.config {
        c.merge_file(path)?;
    }
    for kv in &o.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Param(format!("--set expects key=value, got '{kv}'")))?;
        c.set(k.trim(), v.trim())?;
    }
    c.set_opt("out", &o.out.as_ref().map(|p| p.display()))?;
    c.set_opt("threads", &o.threads)?;
    c.set_opt("grid", &o.grid)?;
    c.set_opt("nt", &o.nt)?;
    c.set_opt("m", &o.m)?;
    c.set_opt("t", &o.t)?;
    c.set_opt("mu", &o.mu)?;
    c.set_opt("sigma", &o.sigma)?;
    c.set_opt("l", &o.l)?;
    c.set_opt("delta", &o.delta)?;
    c.set_opt("family", &o.family)?;
    c.set_opt("seed", &o.seed)?;
    c.set_opt("samples", &o.samples)?;
    c.set_opt("lambdas", &o.lambdas)?;
    c.set_opt("dir", &o.dir.as_ref().map(|p| p.display()))?;
    Ok(c)
}

fn families(c: &RunConfig) -> Result<Vec<Family>> {
    match c.raw("family")? {
        "1" | "velocity" => Ok(vec![Family::Velocity]),
        "2" | "magnetic" => Ok(vec![Family::Magnetic]),
        "all" => Ok(Family::all().to_vec()),
        other => Err(Error::Param(format!("unknown family '{other}'"))),
    }
}

fn scale_policy(c: &RunConfig) -> Result<ScalePolicy> {
    match c.raw("scale")? {
        "per-family" => Ok(ScalePolicy::PerFamily),
        "global" => Ok(ScalePolicy::Global),
        other => Err(Error::Param(format!("unknown scale policy '{other}'"))),
    }
}

fn pde(c: &RunConfig) -> Result<PdeParams> {
    PdeParams::new(c.get("nu1")?, c.get("nu2")?, c.get("alpha1")?, c.get("alpha2")?)
}

/// Result of one subcommand before it is written out.
struct Outcome {
    checks: Vec<Check>,
    result: Value,
}

fn relative(value: f64, expected: f64) -> f64 {
    let d = (value - expected).abs();
    if expected == 0.0 {
        d
    } else {
        d / expected.abs()
    }
}

fn verify_blocks(c: &RunConfig) -> Result<Outcome> {
    let n: usize = c.get("grid")?;
    let set = build_blocks(n, c.get("mu")?, c.get("sigma")?, scale_policy(c)?, ResolutionPolicy::Warn)?;
    let mut checks = Vec::new();
    let mut reports = Vec::new();
    for fam in families(c)? {
        for b in set.family(fam) {
            let r = verify_block(b);
            for ic in &r.checks {
                checks.push(Check::at_most(&format!("{} {} (spectral)", r.direction, ic.name), ic.spectral, 1e-10));
                checks.push(Check::at_most(&format!("{} {} (closed form)", r.direction, ic.name), ic.closed_form, 1e-10));
            }
            reports.push(r);
        }
    }
    Ok(Outcome { checks, result: json!({ "blocks": reports, "shifts": set.plan }) })
}

fn step_config(c: &RunConfig) -> Result<StepConfig> {
    let mut cfg = StepConfig::new(c.get("mu")?, c.get("sigma")?, c.get("l")?, pde(c)?);
    cfg.scale = scale_policy(c)?;
    cfg.delta = c.get_opt("delta")?;
    cfg.seed = c.get("seed")?;
    cfg.delta_samples = c.get("samples")?;
    Ok(cfg)
}

fn schedule(c: &RunConfig, cfg: &StepConfig) -> Result<ParamSchedule> {
    match c.raw("schedule")? {
        "desk" => ParamSchedule::desk(cfg.mu, cfg.sigma, cfg.l, c.get("grid")?, cfg.scale),
        "formula" => ParamSchedule::formula(c.get("a")?, c.get("b")?, c.get("beta")?, c.get("epsilon")?, c.get("q")?),
        "paper" => ParamSchedule::paper(c.get("a")?, c.get("b")?, c.get("beta")?, c.get("epsilon")?, c.get("q")?, &cfg.pde),
        other => Err(Error::Param(format!("unknown schedule mode '{other}'"))),
    }
}

fn step(c: &RunConfig, out: &Path, inductive: bool) -> Result<Outcome> {
    let cfg = step_config(c)?;
    let sched = schedule(c, &cfg)?;
    let grid = Grid::new(c.get("grid")?, c.get("nt")?)?;
    let level = Background::new(c.get("m")?, grid, cfg.pde)?;
    let snapshots = inductive && c.get::<bool>("snapshots")?;
    let mut kept: Vec<Option<NewSample>> = Vec::new();
    let report = run_step(&level, &cfg, &mut |j, s| {
        if snapshots {
            kept.resize(kept.len().max(j + 1), None);
            kept[j] = Some(s);
        }
        Ok(())
    })?;
    report.write_ledger_csv(&out.join("ledger.csv"))?;
    let mut checks = report.checks();
    let mut result = json!({
        "schedule": sched,
        "r0": report.r0,
        "delta": report.delta,
        "family_deltas": report.family_deltas,
        "collar": report.collar,
        "magnetic_cutoff": report.magnetic_cutoff,
        "velocity_cutoff": report.velocity_cutoff,
        "support_old": report.support_old,
        "support_new": report.support_new,
        "support_gap": report.support_gap,
        "cancellation": report.cancellation(),
        "residual_old": report.residual_old,
        "residual_new": report.residual_new,
        "warnings": report.warnings,
        "summary": report.summary(),
    });
    if inductive {
        let ind = inductive_report(&report, Some(&sched), c.get("m_const")?);
        checks.push(Check {
            name: "temporal support inclusion".into(),
            tolerance: ind.support_collar,
            value: ind.support_gap,
            pass: ind.support_inclusion,
        });
        result["inductive"] = serde_json::to_value(&ind)?;
        if snapshots {
            let mut cols: [Vec<Slice>; 4] = Default::default();
            for s in kept {
                let s = s.ok_or_else(|| Error::Param("missing time sample".into()))?;
                cols[0].push(s.u);
                cols[1].push(s.b);
                cols[2].push(s.r_u);
                cols[3].push(s.r_b);
            }
            let [u, b, r_u, r_b] = cols;
            let vec = |v| TorusField::from_slices(grid, Rank::Vector, Symmetry::None, v);
            let ten = |v| TorusField::from_slices(grid, Rank::Tensor, Symmetry::SymmetricTraceless, v);
            hallci::field::save_snapshot(&vec(u)?, &out.join("u_next"))?;
            hallci::field::save_snapshot(&vec(b)?, &out.join("b_next"))?;
            hallci::field::save_snapshot(&ten(r_u)?, &out.join("r_u_next"))?;
            hallci::field::save_snapshot(&ten(r_b)?, &out.join("r_b_next"))?;
        }
    } else {
        let mut w = String::from("t,part,l1,l2\n");
        for s in &report.samples {
            for (name, v) in &s.parts_l1 {
                w.push_str(&format!("{},{},{},{}\n", s.t, name, v, s.parts_l2.get(name).copied().unwrap_or(0.0)));
            }
        }
        std::fs::write(out.join("parts.csv"), w)?;
    }
    Ok(Outcome { checks, result })
}

fn residual(c: &RunConfig) -> Result<Outcome> {
    let pde = pde(c)?;
    let grid = Grid::new(c.get("grid")?, c.get("nt")?)?;
    let state = Background::new(c.get("m")?, grid, pde)?.materialize()?;
    let strong = stress::residual(&state.u, &state.b, &state.r_u, &state.r_b, &pde)?;
    let count: usize = c.get("weak_tests")?;
    let mut checks = vec![Check::at_most("strong-form residual", strong.worst_relative(), 1e-6)];
    let mut result = json!({ "strong": strong });
    if count > 0 {
        let tests = stress::trig_test_functions(grid, count, c.get("seed")?)?;
        let weak = stress::weak_form_check(&state.u, &state.b, Some(&state.r_u), Some(&state.r_b), &pde, &tests)?;
        checks.push(Check::at_most("weak-form defect", weak.max_defect(), 1e-10));
        result["weak"] = serde_json::to_value(&weak)?;
    }
    Ok(Outcome { checks, result })
}

fn helicity(c: &RunConfig) -> Result<Outcome> {
    let n: usize = c.get("grid")?;
    let m: u32 = c.get("m")?;
    let t: f64 = c.get("t")?;
    let b = background_magnetic(n, m as f64, t);
    let value = helicity_slice(&b)?;
    let p = psi(t);
    let expected = 8.0 * std::f64::consts::PI.powi(2) * (m as f64).powi(2) * p * p;
    let energy = lp_slice(&b, 2.0, Quadrature::Rectangle).powi(2);
    let checks = vec![
        Check::at_most("helicity against the closed form", relative(value, expected), 1e-8),
        Check::at_most("helicity against the energy of a curl eigenfield", relative(value, energy), 1e-10),
    ];
    Ok(Outcome { checks, result: json!({ "m": m, "t": t, "psi": p, "value": value, "expected": expected, "energy": energy }) })
}

fn mollify_limit(c: &RunConfig) -> Result<Outcome> {
    let grid = Grid::new(c.get("grid")?, c.get("nt")?)?;
    let r = mollification_limit(c.get("m")?, grid, &c.list("lambdas")?, &pde(c)?)?;
    let ratio = r.worst_ratio();
    let checks = vec![
        Check { name: "stresses strictly decreasing".into(), tolerance: 1.0, value: ratio, pass: ratio < 1.0 },
        Check::at_most("velocity stress decay exponent", r.exponents[0], -0.5),
        Check::at_most("magnetic stress decay exponent", r.exponents[1], -0.5),
    ];
    Ok(Outcome { checks, result: serde_json::to_value(&r)? })
}

fn calibrate(c: &RunConfig) -> Result<Outcome> {
    let mut checks = Vec::new();
    let mut out = Vec::new();
    for fam in families(c)? {
        let cal = calibrate_delta(fam, c.get("samples")?, c.get("seed")?)?;
        let solver = GammaSolver::new(fam);
        let half = solver.gamma_sq(&IDENTITY).iter().map(|g| (g - 0.5).abs()).fold(0.0, f64::max);
        checks.push(Check::at_most(&format!("{fam:?} weights of the identity"), half, 1e-12));
        // The sampled radius can only overestimate the exact one.
        checks.push(Check::at_most(&format!("{fam:?} exact radius within sampled radius"), cal.exact_radius, cal.sampled_radius));
        out.push(cal);
    }
    Ok(Outcome { checks, result: serde_json::to_value(&out)? })
}

fn report(c: &RunConfig) -> Result<Outcome> {
    let dir = if c.has("dir") { c.path("dir")? } else { c.path("out")? };
    if !dir.is_dir() {
        return Err(Error::Param(format!("run directory not found: {}", dir.display())));
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map_or(false, |e| e == "json") && !p.to_string_lossy().ends_with(".tfd.json"))
        .filter(|p| p.file_name().map_or(false, |f| f != "report.json"))
        .collect();
    paths.sort();
    let mut checks = Vec::new();
    let mut runs = Vec::new();
    for p in &paths {
        let v: Value = serde_json::from_slice(&std::fs::read(p)?)?;
        let Some(list) = v.get("checks").and_then(Value::as_array) else { continue };
        let command = v.get("command").and_then(Value::as_str).unwrap_or("?").to_string();
        for ch in list {
            let mut ch: Check = serde_json::from_value(ch.clone())?;
            ch.name = format!("{command}: {}", ch.name);
            checks.push(ch);
        }
        runs.push(command);
    }
    if runs.is_empty() {
        return Err(Error::Param(format!("no reports in {}", dir.display())));
    }
    Ok(Outcome { checks, result: json!({ "runs": runs }) })
}

fn run(cmd: &Command) -> Result<bool> {
    let c = resolve(cmd)?;
    if let Some(t) = c.get_opt::<usize>("threads")? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| Error::Param(format!("thread pool: {e}")))?;
    }
    let out = c.path("out")?;
    std::fs::create_dir_all(&out)?;
    let name = cmd.name();
    let outcome = match cmd {
        Command::VerifyBlocks(_) => verify_blocks(&c)?,
        Command::Decompose(_) => step(&c, &out, false)?,
        Command::Iterate(_) => step(&c, &out, true)?,
        Command::Residual(_) => residual(&c)?,
        Command::Helicity(_) => helicity(&c)?,
        Command::MollifyLimit(_) => mollify_limit(&c)?,
        Command::CalibrateDelta(_) => calibrate(&c)?,
        Command::Report(_) => report(&c)?,
    };
    let all_pass = outcome.checks.iter().all(|ch| ch.pass);
    let doc = json!({
        "command": name,
        "config": c.map(),
        "checks": outcome.checks,
        "all_pass": all_pass,
        "result": outcome.result,
    });
    let file = if name == "report" { "report.json".to_string() } else { format!("{name}.json") };
    std::fs::write(out.join(file), serde_json::to_string_pretty(&doc)?)?;
    std::fs::write(out.join(format!("{name}.cfg")), c.render())?;
    for ch in &outcome.checks {
        eprintln!("{} {:<60} {:e} <= {:e}", if ch.pass { "PASS" } else { "FAIL" }, ch.name, ch.value, ch.tolerance);
    }
    println!("{}", serde_json::to_string_pretty(&doc)?);
    Ok(all_pass)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
