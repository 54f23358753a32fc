//! Command-line front end.
//!
//! Every subcommand except `demo` reads a JSON [`RunConfig`] and writes its
//! artifacts into the output directory. Exit codes: 0 on success, 1 on
//! config or data errors, 2 when the final audit fails.

pub mod config;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::audit::{batch_error_gamma, batch_error_v, joint_error, CalibrationReport, JointCalibrationReport};
use crate::batch::{batch_multicalibrate, BatchOptions, DiscretizedPredictor};
use crate::dataset::{find_cvar_cxls_violation, make_variance_counterexample, CVAR_SEARCH_ATOMS, CVAR_SEARCH_PROBS};
use crate::error::{Error, Result};
use crate::joint::{joint_multicalibrate, JointConfig, JointOptions, JointPredictor};
use crate::online::adversary::default_contexts;
use crate::online::{online_bound, thread_cap, OnlineExperiment, OnlineOptions};
use crate::properties::{
    parse_property, ConditionalIdFamily, FiniteDistribution, Functional, PropertySelection, PropertySpec,
};
pub use config::{DatasetSource, GeneratorSpec, OnlineConfig, RunConfig, SCHEMA_VERSION};

#[derive(Debug, Parser)]
#[command(name = "calibra", version, about = "Multicalibration for elicitable properties")]
pub struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides the config's `out`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Suppress the summary on standard output.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Batch multicalibration of a single property.
    CalibrateBatch,
    /// Joint multicalibration of a property pair.
    CalibrateJoint,
    /// Online multicalibration over a list of seeds.
    SimulateOnline,
    /// Audit a saved predictor on a dataset.
    Audit,
    /// Print a counterexample certificate: `variance` or `cvar`.
    Demo { which: String },
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(true) => 0,
        Ok(false) => 2,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Runs a parsed command; `Ok(false)` means the audit failed.
pub fn execute(cli: &Cli) -> Result<bool> {
    let ctx = Context { quiet: cli.quiet };
    if let Command::Demo { which } = &cli.command {
        return cmd_demo(which, cli.out.as_deref(), &ctx);
    }
    let path = cli.config.as_ref().ok_or_else(|| Error::Config("--config is required".into()))?;
    let cfg = RunConfig::load(path)?;
    let out = Output::new(cli.out.clone().or_else(|| cfg.out.clone()))?;
    match cli.command {
        Command::CalibrateBatch => cmd_calibrate_batch(&cfg, &out, &ctx),
        Command::CalibrateJoint => cmd_calibrate_joint(&cfg, &out, &ctx),
        Command::SimulateOnline => cmd_simulate_online(&cfg, &out, &ctx),
        Command::Audit => cmd_audit(&cfg, &out, &ctx),
        Command::Demo { .. } => unreachable!(),
    }
}

/// Console settings shared by the commands.
pub struct Context {
    pub quiet: bool,
}

impl Context {
    fn say(&self, line: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", line.as_ref());
        }
    }
}

/// Output directory with atomic file writes.
pub struct Output {
    dir: PathBuf,
}

impl Output {
    pub fn new(dir: Option<PathBuf>) -> Result<Self> {
        let dir = dir.ok_or_else(|| Error::Config("no output directory (use --out or `out`)".into()))?;
        std::fs::create_dir_all(&dir)?;
        Ok(Output { dir })
    }

    /// Writes `name` through a temporary file and a rename.
    pub fn write(&self, name: &str, contents: &str) -> Result<()> {
        let tmp = self.dir.join(format!(".{name}.tmp"));
        std::fs::write(&tmp, contents)?;
        std::fs::rename(&tmp, self.dir.join(name))?;
        Ok(())
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.write(name, &s)
    }
}

fn single_property(cfg: &RunConfig) -> Result<PropertySpec> {
    match parse_property(cfg.require_property()?)? {
        PropertySelection::Single(p) => Ok(p),
        PropertySelection::Pair(f) => {
            Err(Error::Config(format!("`{}` is a property pair; use calibrate-joint", f.name)))
        }
    }
}

fn pair_property(cfg: &RunConfig) -> Result<ConditionalIdFamily> {
    match parse_property(cfg.require_property()?)? {
        PropertySelection::Pair(f) => Ok(f),
        PropertySelection::Single(p) => {
            Err(Error::Config(format!("`{}` is a single property; use calibrate-batch", p.name)))
        }
    }
}

fn batch_reports(
    values: &[f64],
    cfg: &RunConfig,
    prop: &PropertySpec,
    out: &Output,
) -> Result<(CalibrationReport, CalibrationReport)> {
    let data = cfg.load_dataset()?;
    let groups = cfg.load_groups(&data)?;
    let v = batch_error_v(values, &data, &groups, prop);
    let g = batch_error_gamma(values, &data, &groups, prop.functional())?;
    out.write("report_v.csv", &v.to_csv_string())?;
    out.write("report_gamma.csv", &g.to_csv_string())?;
    Ok((v, g))
}

/// Runs batch multicalibration and audits the result.
pub fn cmd_calibrate_batch(cfg: &RunConfig, out: &Output, ctx: &Context) -> Result<bool> {
    let prop = single_property(cfg)?;
    let m = cfg.require_m()?;
    let data = cfg.load_dataset()?;
    let groups = cfg.load_groups(&data)?;
    let opts = BatchOptions { alpha: cfg.alpha, f_init: cfg.f_init.clone(), ..Default::default() };
    let run = batch_multicalibrate(&prop, &data, &groups, m, &opts)?;
    let alpha = run.trace.alpha;
    out.write("predictor.json", &run.predictor.to_json_string())?;
    out.write("trace.csv", &run.trace.to_csv_string())?;
    let (v, g) = batch_reports(&run.predictor.current, cfg, &prop, out)?;
    let passed = v.passes(alpha);
    out.write_json(
        "summary.json",
        &json!({
            "command": "calibrate-batch",
            "property": prop.name,
            "m": m,
            "alpha": alpha,
            "updates": run.predictor.log.len(),
            "budget": run.trace.budget,
            "max_alpha_v": v.max_alpha_equivalent(),
            "max_alpha_gamma": g.max_alpha_equivalent(),
            "passed": passed,
        }),
    )?;
    ctx.say(format!("{} on {} cells, {} groups, m = {m}", prop.name, data.len(), groups.len()));
    ctx.say(format!("updates {} (budget {:.3})", run.predictor.log.len(), run.trace.budget));
    print_report(ctx, &v);
    print_report(ctx, &g);
    ctx.say(format!("alpha {alpha}: {}", if passed { "PASS" } else { "FAIL" }));
    Ok(passed)
}

fn print_report(ctx: &Context, r: &CalibrationReport) {
    for g in &r.groups {
        ctx.say(format!("  {:<11} {:<12} alpha_equivalent {:.6e}", r.mode.as_str(), g.group_id, g.alpha_equivalent));
    }
}

/// `α¹_*` for the thresholds actually used, both readings of `L⁰_a`.
fn alpha1_target(family: &ConditionalIdFamily, alpha0: f64, alpha1: f64) -> f64 {
    let o = &family.outer;
    let la = o.anti_lipschitz_la.unwrap_or(1.0);
    let lc = family.cross_lipschitz_lc;
    let k = (la * lc).powi(2).max((lc / la).powi(2));
    2.0 * k * alpha0 + 2.0 * alpha1
}

#[derive(Serialize)]
struct JointReportFile<'a> {
    property: &'a str,
    config: &'a JointConfig,
    alpha0: f64,
    alpha1: f64,
    alpha1_target: f64,
    alpha0_equivalent: f64,
    alpha1_equivalent: f64,
    gamma_space0: f64,
    gamma_space1: Option<f64>,
}

/// Runs joint multicalibration and audits the result.
pub fn cmd_calibrate_joint(cfg: &RunConfig, out: &Output, ctx: &Context) -> Result<bool> {
    let family = pair_property(cfg)?;
    let m = cfg.require_m()?;
    let data = cfg.load_dataset()?;
    let groups = cfg.load_groups(&data)?;
    let config = JointConfig::new(&family, m)?;
    let f_init = match (&cfg.f_init, &cfg.f1_init) {
        (None, None) => None,
        (Some(a), Some(b)) => Some((a.clone(), b.clone())),
        _ => return Err(Error::Config("give both `f_init` and `f1_init` or neither".into())),
    };
    let opts = JointOptions {
        alpha0: cfg.alpha0,
        alpha1: cfg.alpha1,
        f_init,
        parallel: thread_cap() > 1,
        ..Default::default()
    };
    let run = joint_multicalibrate(&family, &data, &groups, m, &opts)?;
    let (f0, f1) = (&run.predictor.f0.current, &run.predictor.f1.current);
    let report = joint_error(f0, f1, &data, &groups, &family)?;
    let alpha0 = cfg.alpha0.unwrap_or(config.alpha0);
    let alpha1 = cfg.alpha1.unwrap_or(config.alpha1);
    let target = alpha1_target(&family, alpha0, alpha1);
    let budget_ok = run.trace.total_updates() as f64 <= config.budget;
    let passed = report.alpha0_equivalent <= alpha0 && report.alpha1_equivalent <= target && budget_ok;
    out.write("predictor.json", &run.predictor.to_json_string())?;
    out.write("trace.csv", &run.trace.to_csv_string())?;
    out.write("joint_slices.csv", &report.slices_csv_string())?;
    write_joint_report(out, &family.name, &config, alpha0, alpha1, target, &report)?;
    out.write_json(
        "summary.json",
        &json!({
            "command": "calibrate-joint",
            "property": family.name,
            "m": m,
            "outer_iterations": run.trace.outer_iterations,
            "f0_updates": run.trace.f0_updates,
            "f1_updates": run.trace.f1_updates,
            "budget": config.budget,
            "alpha0": alpha0,
            "alpha1_target": target,
            "alpha0_equivalent": report.alpha0_equivalent,
            "alpha1_equivalent": report.alpha1_equivalent,
            "passed": passed,
        }),
    )?;
    ctx.say(format!("{} on {} cells, {} groups, m = {m}", family.name, data.len(), groups.len()));
    ctx.say(format!(
        "updates f0 {} + f1 {} over {} outer iterations (budget {:.3})",
        run.trace.f0_updates, run.trace.f1_updates, run.trace.outer_iterations, config.budget
    ));
    ctx.say(format!("outer error {:.6e} (alpha0 {alpha0:.6})", report.alpha0_equivalent));
    ctx.say(format!("inner error {:.6e} (target {target:.6})", report.alpha1_equivalent));
    ctx.say(if passed { "PASS" } else { "FAIL" });
    Ok(passed)
}

fn write_joint_report(
    out: &Output,
    name: &str,
    config: &JointConfig,
    alpha0: f64,
    alpha1: f64,
    target: f64,
    r: &JointCalibrationReport,
) -> Result<()> {
    out.write_json(
        "joint_report.json",
        &JointReportFile {
            property: name,
            config,
            alpha0,
            alpha1,
            alpha1_target: target,
            alpha0_equivalent: r.alpha0_equivalent,
            alpha1_equivalent: r.alpha1_equivalent,
            gamma_space0: r.gamma_space0,
            gamma_space1: r.gamma_space1,
        },
    )
}

/// Runs the online learner once per seed and tabulates `K₂/T` against the bound.
pub fn cmd_simulate_online(cfg: &RunConfig, out: &Output, ctx: &Context) -> Result<bool> {
    let prop = single_property(cfg)?;
    let m = cfg.require_m()?;
    let oc = cfg.online.as_ref().ok_or_else(|| Error::Config("`online` block is required".into()))?;
    let adversary = oc.adversary.clone().ok_or_else(|| Error::Config("`online.adversary` is required".into()))?;
    if oc.seeds.is_empty() {
        return Err(Error::Config("`online.seeds` is empty".into()));
    }
    let (default_ids, default_ctx) = default_contexts();
    let group_ids = oc.group_ids.clone().unwrap_or(default_ids);
    let contexts = oc.contexts.clone().unwrap_or(default_ctx);
    let c = oc.c.unwrap_or(prop.id_bound_c);
    let exp = OnlineExperiment {
        id: &prop,
        c,
        m,
        horizon: oc.horizon,
        group_ids: group_ids.clone(),
        contexts,
        adversary: adversary.clone(),
        options: OnlineOptions { label_points: oc.label_points, instrument: false },
    };
    let runs = exp.run_seeds(&oc.seeds, thread_cap())?;
    let l = oc.lipschitz.unwrap_or_else(|| adversary.declared_lipschitz());
    let bound = online_bound(c, l, m, oc.horizon, group_ids.len());

    let mut table = csv::Writer::from_writer(Vec::new());
    table.write_record(["seed", "group_id", "k2", "alpha", "bound"])?;
    for run in &runs {
        let r = &run.report;
        for (g, id) in r.group_ids.iter().enumerate() {
            table.write_record([
                r.seed.to_string(),
                id.clone(),
                r.k2[g].to_string(),
                r.alpha[g].to_string(),
                bound.to_string(),
            ])?;
        }
        if oc.transcripts {
            out.write(&format!("transcript_seed{}.csv", r.seed), &run.transcript.to_csv_string())?;
        }
    }
    let table =
        String::from_utf8(table.into_inner().map_err(|e| Error::Io(e.into_error()))?).expect("csv output is utf-8");
    out.write("alpha_table.csv", &table)?;
    let maxes: Vec<f64> = runs.iter().map(|r| r.report.max_alpha).collect();
    let mean = maxes.iter().sum::<f64>() / maxes.len() as f64;
    let passed = mean <= bound;
    out.write_json(
        "summary.json",
        &json!({
            "command": "simulate-online",
            "property": prop.name,
            "m": m,
            "horizon": oc.horizon,
            "c": c,
            "lipschitz": l,
            "groups": group_ids,
            "seeds": oc.seeds,
            "max_alpha_per_seed": maxes,
            "mean_max_alpha": mean,
            "bound": bound,
            "passed": passed,
        }),
    )?;
    ctx.say(format!("{} online, T = {}, m = {m}, {} seeds", prop.name, oc.horizon, oc.seeds.len()));
    ctx.say(format!("mean max-group alpha {mean:.6} vs bound {bound:.6}: {}", if passed { "PASS" } else { "FAIL" }));
    Ok(passed)
}

/// Audits a saved batch or joint predictor.
pub fn cmd_audit(cfg: &RunConfig, out: &Output, ctx: &Context) -> Result<bool> {
    let path = cfg.predictor.as_ref().ok_or_else(|| Error::Config("`predictor` is required".into()))?;
    let text = std::fs::read_to_string(path)?;
    let raw: serde_json::Value = serde_json::from_str(&text)?;
    let data = cfg.load_dataset()?;
    let groups = cfg.load_groups(&data)?;
    let check_m = |found: usize| match cfg.m {
        Some(m) if m != found => Err(Error::Config(format!("config has m = {m} but the predictor has m = {found}"))),
        _ => Ok(()),
    };
    if raw.get("f0").is_some() {
        let family = pair_property(cfg)?;
        let pred = JointPredictor::from_json_str(&text)?;
        check_m(pred.m)?;
        let (f0, f1) = pred.replay_on_cells(&data, &groups)?;
        let report = joint_error(&f0, &f1, &data, &groups, &family)?;
        let config = JointConfig::new(&family, pred.m)?;
        let alpha0 = cfg.alpha0.unwrap_or(config.alpha0);
        let alpha1 = cfg.alpha1.unwrap_or(config.alpha1);
        let target = alpha1_target(&family, alpha0, alpha1);
        out.write("joint_slices.csv", &report.slices_csv_string())?;
        write_joint_report(out, &family.name, &config, alpha0, alpha1, target, &report)?;
        ctx.say(format!("outer error {:.6e}, inner error {:.6e}", report.alpha0_equivalent, report.alpha1_equivalent));
        if cfg.alpha0.is_some() || cfg.alpha1.is_some() {
            return Ok(report.alpha0_equivalent <= alpha0 && report.alpha1_equivalent <= target);
        }
        return Ok(true);
    }
    let prop = single_property(cfg)?;
    let pred = DiscretizedPredictor::from_json_str(&text)?;
    check_m(pred.m)?;
    let values = pred.replay_on_cells(&data, &groups)?;
    let (v, g) = batch_reports(&values, cfg, &prop, out)?;
    print_report(ctx, &v);
    print_report(ctx, &g);
    Ok(cfg.alpha.is_none_or(|a| v.passes(a)))
}

#[derive(Serialize)]
struct VarianceCertificate {
    cells: Vec<(String, f64, f64)>,
    mixture_mean: f64,
    mixture_variance: f64,
}

/// Prints the variance or CVaR counterexample.
pub fn cmd_demo(which: &str, out: Option<&Path>, ctx: &Context) -> Result<bool> {
    match which {
        "variance" => {
            let data = make_variance_counterexample();
            let cells: Vec<(String, f64, f64)> = data
                .cells()
                .iter()
                .map(|c| (c.id.clone(), Functional::Mean.eval(&c.dist), Functional::Variance.eval(&c.dist)))
                .collect();
            let parts: Vec<(f64, &FiniteDistribution)> = data.cells().iter().map(|c| (c.weight, &c.dist)).collect();
            let mix = FiniteDistribution::mixture(parts)?;
            let cert = VarianceCertificate {
                cells,
                mixture_mean: Functional::Mean.eval(&mix),
                mixture_variance: Functional::Variance.eval(&mix),
            };
            for (id, mean, var) in &cert.cells {
                ctx.say(format!("cell {id}: mean {mean}, variance {var}"));
            }
            ctx.say(format!("mixture: mean {}, variance {}", cert.mixture_mean, cert.mixture_variance));
            if let Some(dir) = out {
                Output::new(Some(dir.to_path_buf()))?.write_json("demo_variance.json", &cert)?;
            }
            Ok(true)
        }
        "cvar" => {
            let w = find_cvar_cxls_violation(0.5, &CVAR_SEARCH_ATOMS, &CVAR_SEARCH_PROBS)?;
            ctx.say(format!("P1: support {:?} probs {:?}", w.p1.support(), w.p1.probs()));
            ctx.say(format!("P2: support {:?} probs {:?}", w.p2.support(), w.p2.probs()));
            ctx.say(format!(
                "CVaR_0.5(P1) = {}, CVaR_0.5(P2) = {}, CVaR_0.5 of the {} mixture = {}",
                w.cvar1, w.cvar2, w.lambda, w.cvar_mix
            ));
            if let Some(dir) = out {
                Output::new(Some(dir.to_path_buf()))?.write_json("demo_cvar.json", &w)?;
            }
            Ok(true)
        }
        other => Err(Error::Config(format!("unknown demo `{other}` (expected variance or cvar)"))),
    }
}
