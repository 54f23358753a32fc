//! Online multicalibration against an adaptive adversary.
//!
//! Each round the adversary presents a context and commits to a label
//! distribution; the learner mixes over the grid by solving a zero-sum
//! stage game whose payoffs are exponential-weights-averaged K₂ increments,
//! samples a prediction and then sees the label.

pub mod adversary;
pub mod amf;
pub mod game;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::batch::grid_points;
use crate::error::{Error, Result};
use crate::properties::{FiniteDistribution, IdFunction};
use adversary::{Adversary, AdversarySpec, ContextSpec};
use amf::{amf_eta, ExpWeights};
use game::{solve_stage_game, Matrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Round {
    pub t: usize,
    pub cell: String,
    pub membership: Vec<bool>,
    /// Grid index of the prediction.
    pub p: usize,
    pub y: f64,
}

/// The interaction record. Running sums live in [`OnlineState`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub grid: Vec<f64>,
    pub group_ids: Vec<String>,
    pub rounds: Vec<Round>,
}

impl Transcript {
    pub fn new(grid: Vec<f64>, group_ids: Vec<String>) -> Self {
        Transcript { grid, group_ids, rounds: Vec::new() }
    }

    /// CSV `t,cell,groups,p,y` with member groups joined by `;`.
    pub fn to_csv_string(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["t", "cell", "groups", "p", "y"]).unwrap();
        for r in &self.rounds {
            let groups: Vec<&str> =
                self.group_ids.iter().zip(&r.membership).filter(|(_, &m)| m).map(|(g, _)| g.as_str()).collect();
            w.write_record([
                r.t.to_string(),
                r.cell.clone(),
                groups.join(";"),
                self.grid[r.p].to_string(),
                r.y.to_string(),
            ])
            .unwrap();
        }
        String::from_utf8(w.into_inner().unwrap()).unwrap()
    }
}

/// Running counts `n` and sums `R` per `(group, grid index)`, stored at
/// `g·m + i`.
#[derive(Clone, Debug, PartialEq)]
pub struct OnlineState {
    pub m: usize,
    pub n: Vec<u64>,
    pub r: Vec<f64>,
}

impl OnlineState {
    pub fn new(groups: usize, m: usize) -> Self {
        OnlineState { m, n: vec![0; groups * m], r: vec![0.0; groups * m] }
    }

    /// `K₂` per group from the running sums.
    pub fn k2(&self) -> Vec<f64> {
        let groups = self.n.len() / self.m;
        (0..groups).map(|g| self.k2_group(g)).collect()
    }

    pub fn k2_group(&self, g: usize) -> f64 {
        let m = self.m;
        (0..m)
            .filter(|&i| self.n[g * m + i] > 0)
            .map(|i| self.r[g * m + i] * self.r[g * m + i] / self.n[g * m + i] as f64)
            .sum()
    }

    /// `1[x ∈ G, p = γ]·(2V·R + V²)/max(n, 1)` for coordinate `(g, i)`.
    pub fn stage_loss(&self, g: usize, i: usize, member: bool, p: usize, v: f64) -> f64 {
        if !member || p != i {
            return 0.0;
        }
        let k = g * self.m + i;
        (2.0 * v * self.r[k] + v * v) / self.n[k].max(1) as f64
    }

    fn record(&mut self, membership: &[bool], p: usize, v: f64) {
        for (g, &inside) in membership.iter().enumerate() {
            if inside {
                self.r[g * self.m + p] += v;
                self.n[g * self.m + p] += 1;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OnlineOptions {
    /// Label grid size (points `k/(n−1)`).
    pub label_points: usize,
    /// Check the per-round bookkeeping and stage-value bounds.
    pub instrument: bool,
}

impl Default for OnlineOptions {
    fn default() -> Self {
        OnlineOptions { label_points: 101, instrument: false }
    }
}

/// Per-run checks collected with [`OnlineOptions::instrument`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Instrumentation {
    /// Rounds whose K₂ increment exceeded `(2V·R + V²)/max(n, 1) + 1e-12`.
    pub increment_violations: usize,
    /// Rounds whose revealed-label stage value exceeded its bound.
    pub value_violations: usize,
    /// Largest `value − bound` seen.
    pub max_value_slack: f64,
    /// Rounds where χ did not sum to one within 1e-12.
    pub weight_violations: usize,
    /// K₂ per group after every round.
    pub k2_history: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OnlineReport {
    pub seed: u64,
    pub t: usize,
    pub m: usize,
    pub c: f64,
    /// Declared average Lipschitz constant of the adversary.
    pub lipschitz: f64,
    pub eta: f64,
    pub group_ids: Vec<String>,
    pub k2: Vec<f64>,
    /// `K₂/T` per group.
    pub alpha: Vec<f64>,
    pub max_alpha: f64,
    pub bound: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OnlineRun {
    pub transcript: Transcript,
    pub state: OnlineState,
    pub report: OnlineReport,
    pub instrumentation: Option<Instrumentation>,
}

/// `2CL/m + 2C² ln T / T + 12C²√(ln(|G| m)/T)`
pub fn online_bound(c: f64, l: f64, m: usize, t: usize, groups: usize) -> f64 {
    let (mf, tf) = (m as f64, t as f64);
    2.0 * c * l / mf + 2.0 * c * c * tf.ln() / tf + 12.0 * c * c * (((groups * m) as f64).ln() / tf).sqrt()
}

fn sample_index<R: Rng>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Moves every atom to its nearest label grid point.
fn snap_to_grid(dist: &FiniteDistribution, k: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    let scale = (k - 1) as f64;
    let mut probs = vec![0.0; k];
    for (y, p) in dist.iter() {
        probs[(y * scale).round() as usize] += p;
    }
    let idx: Vec<usize> = (0..k).filter(|&i| probs[i] > 0.0).collect();
    let ps = idx.iter().map(|&i| probs[i]).collect();
    Ok((idx, ps))
}

/// Runs the learner for `horizon` rounds against `adversary`.
#[allow(clippy::too_many_arguments)]
pub fn run_online(
    id: &dyn IdFunction,
    c: f64,
    group_ids: &[String],
    m: usize,
    horizon: usize,
    adversary: &mut dyn Adversary,
    seed: u64,
    opts: &OnlineOptions,
) -> Result<OnlineRun> {
    if m == 0 || group_ids.is_empty() {
        return Err(Error::InvalidParameter("need m ≥ 1 and at least one group".into()));
    }
    if opts.label_points < 2 {
        return Err(Error::InvalidParameter("label grid needs at least two points".into()));
    }
    let ng = group_ids.len();
    let d = ng * m;
    if horizon == 0 || (horizon as f64) < (d as f64).ln() {
        return Err(Error::InvalidParameter(format!("T = {horizon} is below ln(|G|·m) = {:.3}", (d as f64).ln())));
    }
    let grid = grid_points(m);
    let kl = opts.label_points;
    let labels: Vec<f64> = (0..kl).map(|k| k as f64 / (kl - 1) as f64).collect();

    // Labels with identical id columns give identical payoff columns.
    let vtab: Vec<Vec<f64>> = labels.iter().map(|&y| grid.iter().map(|&g| id.id(g, y)).collect()).collect();
    let mut classes: Vec<usize> = Vec::new();
    let mut class_of = vec![0usize; kl];
    for k in 0..kl {
        match classes.iter().position(|&j| vtab[j] == vtab[k]) {
            Some(c) => class_of[k] = c,
            None => {
                class_of[k] = classes.len();
                classes.push(k);
            }
        }
    }
    let nc = classes.len();

    let eta = amf_eta(d, horizon, 3.0 * c * c);
    let mut learner = ExpWeights::new(d, eta);
    let mut state = OnlineState::new(ng, m);
    let mut transcript = Transcript::new(grid.clone(), group_ids.to_vec());
    let mut rng_learner = ChaCha8Rng::seed_from_u64(seed);
    rng_learner.set_stream(0);
    let mut rng_labels = ChaCha8Rng::seed_from_u64(seed);
    rng_labels.set_stream(1);
    let mut inst = opts.instrument.then(Instrumentation::default);
    let mut payoff = vec![0.0; m * nc];
    let mut losses = vec![0.0; d];

    for t in 0..horizon {
        let mv = adversary.next(t, &transcript)?;
        if mv.membership.len() != ng {
            return Err(Error::Adversary(format!(
                "round {t}: membership has {} entries for {ng} groups",
                mv.membership.len()
            )));
        }
        let (label_idx, label_probs) = snap_to_grid(&mv.dist, kl)?;
        let chi = learner.weights();
        for i in 0..m {
            for (cix, &rep) in classes.iter().enumerate() {
                let v = vtab[rep][i];
                let mut a = 0.0;
                for g in (0..ng).filter(|&g| mv.membership[g]) {
                    let k = g * m + i;
                    a += chi[k] * (2.0 * v * state.r[k] + v * v) / state.n[k].max(1) as f64;
                }
                payoff[i * nc + cix] = a;
            }
        }
        let sol = solve_stage_game(Matrix::new(&payoff, m, nc))?;
        let p = sample_index(&mut rng_learner, &sol.row);
        let y = labels[label_idx[sample_index(&mut rng_labels, &label_probs)]];
        let v = id.id(grid[p], y);

        if let Some(inst) = inst.as_mut() {
            if (chi.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                inst.weight_violations += 1;
            }
            // value against the committed distribution and its bound
            let value = (0..m)
                .map(|i| {
                    label_idx.iter().zip(&label_probs).map(|(&k, &q)| q * payoff[i * nc + class_of[k]]).sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min);
            let ev = |i: usize| label_idx.iter().zip(&label_probs).map(|(&k, &q)| q * vtab[k][i]).sum::<f64>();
            let star = (0..m).min_by(|&a, &b| ev(a).abs().total_cmp(&ev(b).abs())).unwrap();
            let n_min = (0..ng).filter(|&g| mv.membership[g]).map(|g| state.n[g * m + star]).min().unwrap_or(0);
            let bound = 2.0 * c * mv.lipschitz / m as f64 + c * c / n_min.max(1) as f64 + 1e-7;
            if value > bound {
                inst.value_violations += 1;
            }
            inst.max_value_slack = if t == 0 { value - bound } else { inst.max_value_slack.max(value - bound) };
        }

        let before = inst.as_ref().map(|_| state.k2());
        losses.iter_mut().for_each(|l| *l = 0.0);
        for g in 0..ng {
            losses[g * m + p] = state.stage_loss(g, p, mv.membership[g], p, v);
        }
        learner.update(&losses);
        state.record(&mv.membership, p, v);
        if let (Some(inst), Some(before)) = (inst.as_mut(), before) {
            let after = state.k2();
            for g in 0..ng {
                if mv.membership[g] {
                    let k = g * m + p;
                    let n_prev = state.n[k] - 1;
                    let r_prev = state.r[k] - v;
                    let formula = (2.0 * v * r_prev + v * v) / n_prev.max(1) as f64;
                    if after[g] - before[g] > formula + 1e-12 {
                        inst.increment_violations += 1;
                    }
                }
            }
            inst.k2_history.push(after);
        }
        transcript.rounds.push(Round { t, cell: mv.cell, membership: mv.membership, p, y });
    }

    let k2 = state.k2();
    let alpha: Vec<f64> = k2.iter().map(|k| k / horizon as f64).collect();
    let max_alpha = alpha.iter().copied().fold(0.0, f64::max);
    let lipschitz = adversary.avg_lipschitz();
    let report = OnlineReport {
        seed,
        t: horizon,
        m,
        c,
        lipschitz,
        eta,
        group_ids: group_ids.to_vec(),
        k2,
        alpha,
        max_alpha,
        bound: online_bound(c, lipschitz, m, horizon, ng),
    };
    Ok(OnlineRun { transcript, state, report, instrumentation: inst })
}

/// A complete online experiment description.
#[derive(Clone)]
pub struct OnlineExperiment<'a> {
    pub id: &'a dyn IdFunction,
    pub c: f64,
    pub m: usize,
    pub horizon: usize,
    pub group_ids: Vec<String>,
    pub contexts: Vec<ContextSpec>,
    pub adversary: AdversarySpec,
    pub options: OnlineOptions,
}

impl OnlineExperiment<'_> {
    pub fn run_seed(&self, seed: u64) -> Result<OnlineRun> {
        let labels: Vec<f64> =
            (0..self.options.label_points).map(|k| k as f64 / (self.options.label_points - 1) as f64).collect();
        let mut adv = self.adversary.build(&self.group_ids, &self.contexts, &labels, self.horizon, seed)?;
        run_online(self.id, self.c, &self.group_ids, self.m, self.horizon, adv.as_mut(), seed, &self.options)
    }

    /// Runs every seed, in parallel on at most `threads` workers; results
    /// come back in seed order.
    pub fn run_seeds(&self, seeds: &[u64], threads: usize) -> Result<Vec<OnlineRun>> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| seeds.par_iter().map(|&s| self.run_seed(s)).collect())
    }
}

/// Worker count from `CALIBRA_THREADS`, capped by available parallelism.
pub fn thread_cap() -> usize {
    let avail = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    match std::env::var("CALIBRA_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        Some(n) if n > 0 => n.min(avail),
        _ => avail,
    }
}
