//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines always reach the console:
//! `cargo test --test acceptance`.

mod common;

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use calibra::audit::{batch_error_v, joint_error, online_k2_prefix};
use calibra::batch::{batch_multicalibrate, grid_points, BatchOptions, BatchRun, DiscretizedPredictor, InitAssignment};
use calibra::dataset::{
    find_cvar_cxls_violation, make_bernoulli_dataset, make_permuted_grid_dataset, make_variance_counterexample,
    synth_bounded_density, ExactDataset, GroupFamily, GroupPredicate, CVAR_SEARCH_ATOMS, CVAR_SEARCH_PROBS,
};
use calibra::joint::{joint_multicalibrate, JointConfig, JointOptions, JointPredictor, JointRun};
use calibra::online::adversary::{default_contexts, AdversarySpec};
use calibra::online::amf::{run_amf_matrix_game, BilinearGame};
use calibra::online::{online_bound, thread_cap, OnlineExperiment, OnlineOptions};
use calibra::properties::{
    lower_quantile, mean_property, mean_variance_family, quantile_cvar_family, quantile_property, FiniteDistribution,
    Functional, IdFunction,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use common::{amf_matrix, enumerate_value};

/// Outcome of one criterion.
struct Outcome {
    pass: bool,
    detail: String,
    /// Everything the run produced, serialized, for the determinism check.
    artifacts: String,
    /// Replay checks performed along the way: `(label, bit-exact)`.
    replays: Vec<(String, bool)>,
}

impl Outcome {
    fn new() -> Self {
        Outcome { pass: true, detail: String::new(), artifacts: String::new(), replays: Vec::new() }
    }

    fn check(&mut self, ok: bool, what: impl AsRef<str>) {
        if !ok {
            self.pass = false;
            let _ = write!(self.detail, "[failed: {}] ", what.as_ref());
        }
    }

    fn note(&mut self, s: impl AsRef<str>) {
        let _ = write!(self.detail, "{}; ", s.as_ref());
    }

    fn within(&mut self, started: Instant, limit: Duration) {
        let took = started.elapsed();
        self.note(format!("{:.2}s", took.as_secs_f64()));
        self.check(took < limit, format!("runtime over {limit:?}"));
    }
}

fn batch_artifacts(
    out: &mut Outcome,
    label: &str,
    run: &BatchRun,
    data: &ExactDataset,
    groups: &GroupFamily,
    id: &dyn IdFunction,
) {
    let report = batch_error_v(&run.predictor.current, data, groups, id);
    let _ = write!(
        out.artifacts,
        "{label}\n{}\n{}\n{}\n",
        run.predictor.to_json_string(),
        run.trace.to_csv_string(),
        report.to_csv_string()
    );
    let stored = DiscretizedPredictor::from_json_str(&run.predictor.to_json_string()).unwrap();
    let same = stored
        .replay_on_cells(data, groups)
        .map(|v| v.iter().zip(&run.predictor.current).all(|(a, b)| a.to_bits() == b.to_bits()))
        .unwrap_or(false);
    out.replays.push((label.to_string(), same));
}

fn joint_artifacts(out: &mut Outcome, label: &str, run: &JointRun, data: &ExactDataset, groups: &GroupFamily) {
    let _ = write!(out.artifacts, "{label}\n{}\n{}\n", run.predictor.to_json_string(), run.trace.to_csv_string());
    let stored = JointPredictor::from_json_str(&run.predictor.to_json_string()).unwrap();
    let same = stored
        .replay_on_cells(data, groups)
        .map(|(a, b)| {
            let bits = |x: &[f64], y: &[f64]| x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits());
            bits(&a, &run.predictor.f0.current) && bits(&b, &run.predictor.f1.current)
        })
        .unwrap_or(false);
    out.replays.push((label.to_string(), same));
}

/// Five half-open intervals on tag `x`.
fn interval_groups(data: &ExactDataset) -> GroupFamily {
    let preds: Vec<GroupPredicate> =
        (0..5).map(|k| GroupPredicate::in_range(&format!("i{k}"), "x", k as f64 / 5.0, (k + 1) as f64 / 5.0)).collect();
    GroupFamily::from_predicates(data, &preds).unwrap()
}

/// Halves of `x` and the parity tag `b`.
fn tag_groups(data: &ExactDataset) -> GroupFamily {
    let preds = [
        GroupPredicate::in_range("left", "x", 0.0, 0.5),
        GroupPredicate::in_range("right", "x", 0.5, 1.0),
        GroupPredicate::equals("even", "b", 0.0),
        GroupPredicate::equals("odd", "b", 1.0),
    ];
    GroupFamily::from_predicates(data, &preds).unwrap()
}

/// Lowest grid point, as far as possible from the centre start.
fn far_start(m: usize) -> Option<InitAssignment> {
    Some(InitAssignment::Constant(grid_points(m)[0]))
}

fn far_pair(m: usize) -> Option<(InitAssignment, InitAssignment)> {
    let g = grid_points(m)[0];
    Some((InitAssignment::Constant(g), InitAssignment::Constant(g)))
}

fn criterion_1() -> Outcome {
    let mut out = Outcome::new();
    let started = Instant::now();
    let data = make_permuted_grid_dataset(16, 7).unwrap();
    let groups = interval_groups(&data);
    let prop = mean_property();
    let m = 19;
    let alpha = 4.0 / 19.0;
    for (label, f_init) in [("centre start", None), ("far start", far_start(m))] {
        let opts = BatchOptions { f_init, ..Default::default() };
        let run = match batch_multicalibrate(&prop, &data, &groups, m, &opts) {
            Ok(r) => r,
            Err(e) => {
                out.check(false, format!("{label}: {e}"));
                continue;
            }
        };
        let report = batch_error_v(&run.predictor.current, &data, &groups, &prop);
        let worst = report.max_alpha_equivalent();
        let t = &run.trace;
        let updates = run.predictor.log.len();
        let limit = (t.c_init - t.c_opt_bound) * 361.0;
        let phi = t.potentials();
        let min_drop = phi.windows(2).map(|w| w[0] - w[1]).fold(f64::INFINITY, f64::min);
        out.note(format!("{label}: {updates} updates (limit {limit:.2}), max alpha {worst:.5}"));
        out.check(worst <= alpha + 1e-9, format!("{label}: alpha {worst} > 4/19"));
        out.check(updates as f64 <= limit, format!("{label}: {updates} updates > {limit}"));
        if updates > 0 {
            out.note(format!("min potential drop {min_drop:.6} vs 1/361 = {:.6}", 1.0 / 361.0));
            out.check(min_drop >= 1.0 / 361.0 - 1e-9, format!("{label}: potential drop {min_drop}"));
        }
        batch_artifacts(&mut out, &format!("c1 {label}"), &run, &data, &groups, &prop);
    }
    out.within(started, Duration::from_secs(1));
    out
}

fn criterion_2() -> Outcome {
    let mut out = Outcome::new();
    let started = Instant::now();
    let data = synth_bounded_density(8, 200, 0.5, 2.0, 7).unwrap();
    let groups = tag_groups(&data);
    let m = 20;
    let alpha = 4.0 * 2.0 * 2.0 / m as f64;
    for tau in [0.5, 0.9] {
        let prop = quantile_property(tau, 2.0).unwrap();
        for (label, f_init) in [("centre", None), ("far", far_start(m))] {
            let opts = BatchOptions { f_init, ..Default::default() };
            match batch_multicalibrate(&prop, &data, &groups, m, &opts) {
                Ok(run) => {
                    let worst = batch_error_v(&run.predictor.current, &data, &groups, &prop).max_alpha_equivalent();
                    out.note(format!("tau {tau} {label}: {} updates, max alpha {worst:.5}", run.predictor.log.len()));
                    out.check(worst <= alpha, format!("tau {tau} {label}: {worst} > {alpha}"));
                    batch_artifacts(&mut out, &format!("c2 tau {tau} {label}"), &run, &data, &groups, &prop);
                }
                Err(e) => out.check(false, format!("tau {tau} {label}: {e}")),
            }
        }
    }
    out.within(started, Duration::from_secs(5));
    out
}

fn criterion_3() -> Outcome {
    let mut out = Outcome::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mean = mean_property();
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let k = rng.gen_range(1..=8);
        let support: Vec<f64> = (0..k).map(|_| rng.gen::<f64>()).collect();
        let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.01..1.0)).collect();
        let s: f64 = raw.iter().sum();
        let d = FiniteDistribution::new(support, raw.iter().map(|r| r / s).collect()).unwrap();
        let g: f64 = rng.gen();
        let truth = d.mean();
        let v = mean.expected_id(g, &d);
        let gap = mean.expected_score(g, &d) - mean.expected_score(truth, &d);
        worst = worst.max((gap - v * v / 2.0).abs()).max((gap - (v * (g - truth) - v * v / 2.0)).abs());
    }
    out.note(format!("mean: largest deviation from equality {worst:.2e}"));
    out.check(worst <= 1e-12, "mean equalities");

    let atoms = 2000;
    let mut slack = f64::INFINITY;
    for _ in 0..50 {
        let raw: Vec<f64> = (0..atoms).map(|_| rng.gen_range(0.5..2.0)).collect();
        let s: f64 = raw.iter().sum();
        let support = (0..atoms).map(|k| (k as f64 + 0.5) / atoms as f64).collect();
        let d = FiniteDistribution::new(support, raw.iter().map(|r| r / s).collect()).unwrap();
        let lip = d.probs().iter().copied().fold(0.0, f64::max) * atoms as f64;
        let tau = rng.gen_range(0.1..0.9);
        let q = quantile_property(tau, 2.0).unwrap();
        let truth = lower_quantile(&d, tau);
        for _ in 0..20 {
            let g: f64 = rng.gen();
            let v = q.expected_id(g, &d);
            let gap = q.expected_score(g, &d) - q.expected_score(truth, &d);
            slack = slack.min(gap - v * v / (2.0 * lip)).min(v * (g - truth) - v * v / (2.0 * lip) - gap);
        }
    }
    out.note(format!("quantile surrogates: smallest slack {slack:.2e}"));
    out.check(slack >= -1e-6, "quantile inequalities");
    let _ = write!(out.artifacts, "{worst:e} {slack:e}");
    out
}

fn mixed_bernoulli() -> ExactDataset {
    // the two deterministic cells of the variance counterexample plus six mixed ones
    make_bernoulli_dataset(&[0.0, 1.0, 0.1, 0.9, 0.3, 0.7, 0.5, 0.2]).unwrap()
}

fn bernoulli_groups(data: &ExactDataset) -> GroupFamily {
    let preds = [
        GroupPredicate::equals("even", "b", 0.0),
        GroupPredicate::equals("odd", "b", 1.0),
        GroupPredicate::in_range("low", "x", 0.0, 4.0),
        GroupPredicate::in_range("high", "x", 4.0, 8.0),
        GroupPredicate::equals("x0", "x", 0.0),
        GroupPredicate::equals("x1", "x", 1.0),
    ];
    GroupFamily::from_predicates(data, &preds).unwrap()
}

fn criterion_4() -> Outcome {
    let mut out = Outcome::new();
    let started = Instant::now();
    let data = mixed_bernoulli();
    let groups = bernoulli_groups(&data);
    let fam = mean_variance_family();
    let m = 19;
    let config = JointConfig::new(&fam, m).unwrap();
    out.check(fam.outer.lipschitz_l == 1.0 && fam.outer.anti_lipschitz_la == Some(1.0), "L0 = L0_a = 1");
    out.check(fam.level_lipschitz_l1 == 1.0 && fam.cross_lipschitz_lc == 2.0, "L1 = 1, L_c = 2");
    let (a0, a1) = (4.0 / 19.0, 40.0 / 19.0);
    let budget = 0.5 * 0.5 * 19f64.powi(4);
    out.check((config.alpha1_star - a1).abs() < 1e-12 && config.budget == budget, "constants");
    for (label, f_init) in [("centre", None), ("far", far_pair(m))] {
        let opts = JointOptions { f_init, ..Default::default() };
        match joint_multicalibrate(&fam, &data, &groups, m, &opts) {
            Ok(run) => {
                let r =
                    joint_error(&run.predictor.f0.current, &run.predictor.f1.current, &data, &groups, &fam).unwrap();
                let total = run.trace.total_updates();
                out.note(format!(
                    "{label}: errors ({:.5}, {:.5}), {total} updates",
                    r.alpha0_equivalent, r.alpha1_equivalent
                ));
                out.check(r.alpha0_equivalent <= a0, format!("{label}: outer error"));
                out.check(r.alpha1_equivalent <= a1, format!("{label}: inner error"));
                out.check(total as f64 <= budget, format!("{label}: budget"));
                joint_artifacts(&mut out, &format!("c4 {label}"), &run, &data, &groups);
            }
            Err(e) => out.check(false, format!("{label}: {e}")),
        }
    }
    out.within(started, Duration::from_secs(10));
    out
}

fn criterion_5() -> Outcome {
    let mut out = Outcome::new();
    let started = Instant::now();
    let data = synth_bounded_density(8, 200, 0.5, 2.0, 7).unwrap();
    let groups = tag_groups(&data);
    let fam = quantile_cvar_family(0.5, 0.5, 2.0).unwrap();
    let m = 20;
    let config = JointConfig::new(&fam, m).unwrap();
    let a0 = 4.0 * 2.0 * 2.0 / m as f64;
    let a1 = config.alpha1_bound();
    out.note(format!("alpha1 candidates {:.4} and {:.4}, using {a1:.4}", config.alpha1_star, config.alpha1_star_alt));
    for (label, f_init) in [("centre", None), ("far", far_pair(m))] {
        let opts = JointOptions { f_init, ..Default::default() };
        match joint_multicalibrate(&fam, &data, &groups, m, &opts) {
            Ok(run) => {
                let r =
                    joint_error(&run.predictor.f0.current, &run.predictor.f1.current, &data, &groups, &fam).unwrap();
                let total = run.trace.total_updates();
                out.note(format!(
                    "{label}: errors ({:.5}, {:.5}), {total} updates",
                    r.alpha0_equivalent, r.alpha1_equivalent
                ));
                out.check(r.alpha0_equivalent <= a0, format!("{label}: outer error"));
                out.check(r.alpha1_equivalent <= a1, format!("{label}: inner error"));
                out.check(total as f64 <= config.budget, format!("{label}: budget"));
                joint_artifacts(&mut out, &format!("c5 {label}"), &run, &data, &groups);
            }
            Err(e) => out.check(false, format!("{label}: {e}")),
        }
    }
    out.within(started, Duration::from_secs(30));
    out
}

fn criterion_6() -> Outcome {
    let mut out = Outcome::new();
    let started = Instant::now();
    let id = quantile_property(0.5, 2.0).unwrap();
    let (group_ids, contexts) = default_contexts();
    let (m, horizon) = (20, 20_000);
    let bound = online_bound(1.0, 2.0, m, horizon, group_ids.len());
    out.note(format!("bound {bound:.4}"));
    out.check((bound - 0.378).abs() < 1e-3, "bound arithmetic");
    let seeds: Vec<u64> = (0..20).collect();
    for (label, adversary) in [("iid", AdversarySpec::sinusoid_iid()), ("two-phase", AdversarySpec::shifting_median())]
    {
        let exp = OnlineExperiment {
            id: &id,
            c: 1.0,
            m,
            horizon,
            group_ids: group_ids.clone(),
            contexts: contexts.clone(),
            adversary,
            options: OnlineOptions::default(),
        };
        match exp.run_seeds(&seeds, thread_cap()) {
            Ok(runs) => {
                let mean = runs.iter().map(|r| r.report.max_alpha).sum::<f64>() / runs.len() as f64;
                out.note(format!("{label}: mean max-group alpha {mean:.4}"));
                out.check(mean <= bound, format!("{label}: {mean} > {bound}"));
                for r in &runs {
                    let _ = writeln!(out.artifacts, "{label} {} {:?}", r.report.seed, r.report.k2);
                    let _ = writeln!(out.artifacts, "{}", r.transcript.to_csv_string().len());
                }
                let _ = write!(out.artifacts, "{}", runs[0].transcript.to_csv_string());
            }
            Err(e) => out.check(false, format!("{label}: {e}")),
        }
    }
    out.within(started, Duration::from_secs(300));
    out
}

fn criterion_7() -> Outcome {
    let mut out = Outcome::new();
    let started = Instant::now();
    let bound = 4.0 * (2000.0 * 3f64.ln()).sqrt();
    let mut worst = f64::NEG_INFINITY;
    for seq in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seq);
        let games: Vec<BilinearGame> = (0..2000).map(|_| BilinearGame::random(&mut rng, 3, 4, 4, 1.0)).collect();
        match run_amf_matrix_game(&games, 1.0) {
            Ok(r) => {
                // Σ w_A by support enumeration, independent of the LP solver
                let values: Vec<f64> = games.par_iter().map(|g| enumerate_value(&amf_matrix(g))).collect();
                let exact: f64 = values.iter().sum();
                let regret = r.cumulative.iter().copied().fold(f64::NEG_INFINITY, f64::max) - exact;
                worst = worst.max(regret);
                out.check(regret <= bound, format!("sequence {seq}: regret {regret}"));
                out.check(
                    (r.amf_total - exact).abs() <= 1e-6 * 2000.0,
                    format!("sequence {seq}: LP total {}", r.amf_total),
                );
                let _ = writeln!(out.artifacts, "{seq} {} {:?}", r.regret, r.cumulative);
            }
            Err(e) => out.check(false, format!("sequence {seq}: {e}")),
        }
    }
    out.note(format!("largest regret {worst:.3} vs bound {bound:.3}"));
    out.within(started, Duration::from_secs(60));
    out
}

fn criterion_8() -> Outcome {
    let mut out = Outcome::new();
    let started = Instant::now();
    let data = make_variance_counterexample();
    let per_cell: Vec<f64> = data.cells().iter().map(|c| Functional::Variance.eval(&c.dist)).collect();
    let mix = FiniteDistribution::mixture(data.cells().iter().map(|c| (c.weight, &c.dist))).unwrap();
    let var = Functional::Variance.eval(&mix);
    out.note(format!("cell variances {per_cell:?}, mixture variance {var}"));
    out.check(per_cell.iter().all(|&v| v == 0.0) && var == 0.25, "variance certificate");
    match find_cvar_cxls_violation(0.5, &CVAR_SEARCH_ATOMS, &CVAR_SEARCH_PROBS) {
        Ok(w) => {
            let gap = (w.cvar_mix - w.cvar1).abs();
            out.note(format!("cvar gap {gap}"));
            out.check(gap > 1e-3, "cvar gap");
            let pinned = (
                FiniteDistribution::new(vec![0.25], vec![1.0]).unwrap(),
                FiniteDistribution::new(vec![0.0, 0.5], vec![0.75, 0.25]).unwrap(),
            );
            out.check(w.p1 == pinned.0 && w.p2 == pinned.1 && w.cvar_mix == 0.3125, "pinned witness");
            let _ = write!(out.artifacts, "{var} {}", serde_json::to_string(&w).unwrap());
        }
        Err(e) => out.check(false, format!("cvar search: {e}")),
    }
    out.within(started, Duration::from_secs(10));
    out
}

fn criterion_9(replays: &[(String, bool)]) -> Outcome {
    let mut out = Outcome::new();
    let id = quantile_property(0.5, 2.0).unwrap();
    let (group_ids, contexts) = default_contexts();
    let mut prefixes = 0;
    for seed in 0..100u64 {
        let exp = OnlineExperiment {
            id: &id,
            c: 1.0,
            m: 8,
            horizon: 10 + (seed as usize % 40),
            group_ids: group_ids.clone(),
            contexts: contexts.clone(),
            adversary: if seed % 2 == 0 { AdversarySpec::sinusoid_iid() } else { AdversarySpec::shifting_median() },
            options: OnlineOptions { instrument: true, ..Default::default() },
        };
        let run = match exp.run_seed(seed) {
            Ok(r) => r,
            Err(e) => {
                out.check(false, format!("seed {seed}: {e}"));
                continue;
            }
        };
        let inst = run.instrumentation.as_ref().unwrap();
        for (t, k2) in inst.k2_history.iter().enumerate() {
            prefixes += 1;
            if *k2 != online_k2_prefix(&run.transcript, &id, t + 1) {
                out.check(false, format!("seed {seed} prefix {}", t + 1));
            }
        }
        out.check(inst.increment_violations == 0, format!("seed {seed}: increment bound"));
        out.check(inst.value_violations == 0, format!("seed {seed}: stage value bound"));
        let _ = writeln!(out.artifacts, "{seed} {:?}", run.report.k2);
    }
    out.note(format!("{prefixes} prefixes equal"));
    let bad: Vec<&str> = replays.iter().filter(|r| !r.1).map(|r| r.0.as_str()).collect();
    out.note(format!("{} replays checked", replays.len()));
    out.check(!replays.is_empty() && bad.is_empty(), format!("replay mismatch in {bad:?}"));
    out
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let suite: Vec<Criterion> = vec![
        ("1 batch mean convergence", criterion_1),
        ("2 batch quantile", criterion_2),
        ("3 score sandwich", criterion_3),
        ("4 joint mean-variance", criterion_4),
        ("5 joint quantile-CVaR", criterion_5),
        ("6 online quantile", criterion_6),
        ("7 AMF regret", criterion_7),
        ("8 counterexample certificates", criterion_8),
    ];
    let mut all_pass = true;
    let mut replays = Vec::new();
    let mut artifacts = Vec::new();
    let report = |name: &str, o: &Outcome| {
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail.trim_end_matches("; "));
        o.pass
    };
    for (name, f) in &suite {
        let o = f();
        all_pass &= report(name, &o);
        replays.extend(o.replays.clone());
        artifacts.push(o.artifacts);
    }
    let c9 = criterion_9(&replays);
    all_pass &= report("9 bookkeeping oracles", &c9);

    let mut c10 = Outcome::new();
    for ((name, f), first) in suite.iter().zip(&artifacts) {
        let again = f();
        c10.check(again.artifacts == *first, format!("{name} differs on rerun"));
    }
    c10.check(criterion_9(&replays).artifacts == c9.artifacts, "9 differs on rerun");
    c10.note(format!("{} criteria rerun", suite.len() + 1));
    all_pass &= report("10 determinism", &c10);

    if !all_pass {
        std::process::exit(1);
    }
}
