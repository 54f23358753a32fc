//! Joint multicalibration of a conditionally elicitable pair.
//!
//! The outer coordinate `f⁰` is recalibrated against groups sliced by the
//! current levels of `f¹`; then on every level set of `f⁰` the inner
//! coordinate `f¹` is recalibrated with the identification function of that
//! level. The two steps repeat until neither finds a violating region.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audit::{level_slices, region_expected_id};
use crate::batch::{
    default_init, grid_points, guard_limit, run_region_scan, DiscretizedPredictor, InitAssignment, LevelCondition,
    RegionUpdate, UpdateRecord,
};
use crate::dataset::{ExactDataset, Group, GroupFamily, Point};
use crate::error::{Error, Result};
use crate::properties::{ConditionalIdFamily, IdFunction};

/// Thresholds and budgets for one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointConfig {
    pub m: usize,
    /// `4(L⁰)²/m`
    pub alpha0: f64,
    /// `4(L¹)²/m`
    pub alpha1: f64,
    /// `8((L⁰·L⁰_a·L_c)² + (L¹)²)/m`
    pub alpha1_star: f64,
    /// Same with `L⁰_a` replaced by `1/L⁰_a` (density-lower-bound reading).
    pub alpha1_star_alt: f64,
    /// `B⁰B¹m⁴/(L⁰L¹)`
    pub budget: f64,
    /// `B⁰m²/L⁰`
    pub f0_budget: f64,
    /// `B¹m²/L¹`
    pub f1_budget: f64,
}

impl JointConfig {
    pub fn new(family: &ConditionalIdFamily, m: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::InvalidParameter("m must be at least 1".into()));
        }
        let o = &family.outer;
        let la = o.anti_lipschitz_la.ok_or_else(|| {
            Error::InvalidParameter(format!("`{}` needs an anti-Lipschitz constant for joint calibration", o.name))
        })?;
        let (l0, l1, lc) = (o.lipschitz_l, family.level_lipschitz_l1, family.cross_lipschitz_lc);
        for (name, v) in [("L0", l0), ("L0_a", la), ("L1", l1), ("L_c", lc)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
            }
        }
        let mf = m as f64;
        let (b0, b1) = (o.score_range_b, family.cond_score_range_b1);
        Ok(JointConfig {
            m,
            alpha0: 4.0 * l0 * l0 / mf,
            alpha1: 4.0 * l1 * l1 / mf,
            alpha1_star: 8.0 * ((l0 * la * lc).powi(2) + l1 * l1) / mf,
            alpha1_star_alt: 8.0 * ((l0 * lc / la).powi(2) + l1 * l1) / mf,
            budget: b0 * b1 * mf.powi(4) / (l0 * l1),
            f0_budget: b0 * mf * mf / l0,
            f1_budget: b1 * mf * mf / l1,
        })
    }

    /// The larger of the two `α¹_*` readings.
    pub fn alpha1_bound(&self) -> f64 {
        self.alpha1_star.max(self.alpha1_star_alt)
    }
}

/// `G ∩ {f = γ}` for every base group and every occupied level, ordered
/// by group then level; ids are `G×γ`. Returns the family and, per derived
/// group, `(base position, level value)`.
pub fn build_level_set_groups(
    base: &GroupFamily,
    data: &ExactDataset,
    values: &[f64],
) -> (GroupFamily, Vec<(usize, f64)>) {
    let mut groups = Vec::new();
    let mut meta = Vec::new();
    for (gi, g) in base.groups().iter().enumerate() {
        for s in level_slices(data, values, g) {
            let mut mask = vec![false; values.len()];
            for &i in &s.members {
                mask[i] = true;
            }
            groups.push(Group { id: format!("{}×{}", g.id, s.gamma), mask, rule: None });
            meta.push((gi, s.gamma));
        }
    }
    (GroupFamily::from_raw(groups), meta)
}

/// Base groups intersected with one level set `{f = level}`.
fn restrict_to_level(base: &GroupFamily, values: &[f64], level: f64) -> (GroupFamily, Vec<usize>) {
    let mut groups = Vec::new();
    let mut meta = Vec::new();
    for (gi, g) in base.groups().iter().enumerate() {
        let mask: Vec<bool> = g.mask.iter().zip(values).map(|(&b, v)| b && v.to_bits() == level.to_bits()).collect();
        if mask.iter().any(|&b| b) {
            groups.push(Group { id: format!("{}×{}", g.id, level), mask, rule: None });
            meta.push(gi);
        }
    }
    (GroupFamily::from_raw(groups), meta)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointPredictor {
    pub m: usize,
    pub f0: DiscretizedPredictor,
    pub f1: DiscretizedPredictor,
    /// Component updated at each global step.
    pub interleave: Vec<u8>,
}

impl JointPredictor {
    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("predictor serializes")
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(s)?;
        if p.f0.m != p.m || p.f1.m != p.m || p.f0.grid != grid_points(p.m) || p.f1.grid != grid_points(p.m) {
            return Err(Error::InvalidParameter("component grids disagree with m".into()));
        }
        let ones = p.interleave.iter().filter(|&&c| c == 1).count();
        if p.interleave.iter().any(|&c| c > 1) || ones != p.f1.log.len() || p.interleave.len() - ones != p.f0.log.len()
        {
            return Err(Error::InvalidParameter("interleave does not match the component logs".into()));
        }
        Ok(p)
    }

    fn replay_with<F>(&self, n: usize, ids: &[&str], mut contains: F) -> Result<(Vec<f64>, Vec<f64>)>
    where
        F: FnMut(&str, usize) -> Result<bool>,
    {
        let init =
            |p: &DiscretizedPredictor| -> Result<Vec<f64>> { ids.iter().map(|id| init_value(&p.init, id)).collect() };
        let mut vals = [init(&self.f0)?, init(&self.f1)?];
        let mut next = [0usize, 0usize];
        for &c in &self.interleave {
            let c = c as usize;
            let log = if c == 0 { &self.f0.log } else { &self.f1.log };
            let r = &log[next[c]];
            next[c] += 1;
            let cond =
                r.on.as_ref()
                    .ok_or_else(|| Error::InvalidParameter(format!("record {} lacks its level condition", r.step)))?;
            for i in 0..n {
                let [ref a, ref b] = vals;
                let (own, other) = if c == 0 { (a[i], b[i]) } else { (b[i], a[i]) };
                if own.to_bits() == r.from.to_bits()
                    && other.to_bits() == cond.value.to_bits()
                    && contains(&r.group, i)?
                {
                    vals[c][i] = r.to;
                }
            }
        }
        let [a, b] = vals;
        Ok((a, b))
    }

    /// Replays both components over the training cells.
    pub fn replay_on_cells(&self, data: &ExactDataset, groups: &GroupFamily) -> Result<(Vec<f64>, Vec<f64>)> {
        let ids: Vec<&str> = data.cells().iter().map(|c| c.id.as_str()).collect();
        self.replay_with(data.len(), &ids, |gid, i| {
            let g = groups.get(gid).ok_or_else(|| Error::InvalidGroups(format!("log names unknown group `{gid}`")))?;
            Ok(g.mask[i])
        })
    }

    /// Replays both components on new points through group predicates.
    pub fn apply(&self, points: &[Point], groups: &GroupFamily) -> Result<(Vec<f64>, Vec<f64>)> {
        let ids: Vec<&str> = points.iter().map(|p| p.id.as_str()).collect();
        self.replay_with(points.len(), &ids, |gid, i| {
            let g = groups.get(gid).ok_or_else(|| Error::InvalidGroups(format!("log names unknown group `{gid}`")))?;
            let rule = g.rule.as_ref().ok_or_else(|| Error::PredicateUnavailable(gid.to_string()))?;
            rule.contains(&points[i].id, &points[i].tags)
        })
    }
}

fn init_value(init: &InitAssignment, id: &str) -> Result<f64> {
    match init {
        InitAssignment::Constant(v) => Ok(*v),
        InitAssignment::PerCell(map) => {
            map.get(id).copied().ok_or_else(|| Error::InvalidParameter(format!("no initial value for `{id}`")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointTraceStep {
    pub step: usize,
    pub component: u8,
    pub gamma: f64,
    pub group: String,
    /// Level of the other component the update was restricted to.
    pub on: f64,
    pub mass: f64,
    pub exp_v: f64,
    pub gamma_to: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointTrace {
    pub config: JointConfig,
    pub outer_iterations: usize,
    pub f0_updates: usize,
    pub f1_updates: usize,
    /// f¹ updates made in each outer iteration.
    pub f1_updates_per_outer: Vec<usize>,
    pub steps: Vec<JointTraceStep>,
}

impl JointTrace {
    pub fn total_updates(&self) -> usize {
        self.f0_updates + self.f1_updates
    }

    pub fn f0_budget_respected(&self) -> bool {
        self.f0_updates as f64 <= self.config.f0_budget
    }

    pub fn f1_budget_respected(&self) -> bool {
        self.f1_updates_per_outer.iter().all(|&n| n as f64 <= self.config.f1_budget)
    }

    pub fn to_csv_string(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["step", "component", "gamma", "group", "on", "mass", "expV", "gamma_to"]).unwrap();
        for s in &self.steps {
            w.write_record([
                s.step.to_string(),
                s.component.to_string(),
                s.gamma.to_string(),
                s.group.clone(),
                s.on.to_string(),
                s.mass.to_string(),
                s.exp_v.to_string(),
                s.gamma_to.to_string(),
            ])
            .unwrap();
        }
        String::from_utf8(w.into_inner().unwrap()).unwrap()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct JointOptions {
    pub alpha0: Option<f64>,
    pub alpha1: Option<f64>,
    /// Initial `(f⁰, f¹)`; both default to the grid point nearest 0.5.
    pub f_init: Option<(InitAssignment, InitAssignment)>,
    pub guard_factor: f64,
    /// Run the per-level f¹ recalibrations on the rayon pool.
    pub parallel: bool,
}

impl Default for JointOptions {
    fn default() -> Self {
        JointOptions { alpha0: None, alpha1: None, f_init: None, guard_factor: 10.0, parallel: false }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct JointRun {
    pub predictor: JointPredictor,
    pub trace: JointTrace,
}

fn values_of(grid: &[f64], idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&k| grid[k]).collect()
}

/// Some `(γ⁰, γ¹, G)` slice with `Pr·V⁰(γ⁰, Y)² ≥ threshold`.
fn outer_violated(
    data: &ExactDataset,
    groups: &GroupFamily,
    v0: &[f64],
    v1: &[f64],
    id: &dyn IdFunction,
    threshold: f64,
) -> bool {
    let (sliced, _) = build_level_set_groups(groups, data, v1);
    sliced.groups().iter().any(|g| {
        level_slices(data, v0, g).iter().any(|s| {
            let v = region_expected_id(data, &s.members, s.mass, id, s.gamma);
            s.mass * v * v >= threshold
        })
    })
}

/// Some level `γ⁰` of `f⁰` with a `(γ¹, G)` slice where
/// `Pr·V¹_{γ⁰}(γ¹, Y)² ≥ threshold`.
fn inner_violated(
    data: &ExactDataset,
    groups: &GroupFamily,
    family: &ConditionalIdFamily,
    v0: &[f64],
    v1: &[f64],
    threshold: f64,
) -> bool {
    let (sliced, meta) = build_level_set_groups(groups, data, v0);
    sliced.groups().iter().zip(&meta).any(|(g, &(_, level))| {
        let id = family.level(level);
        level_slices(data, v1, g).iter().any(|s| {
            let v = region_expected_id(data, &s.members, s.mass, &id, s.gamma);
            s.mass * v * v >= threshold
        })
    })
}

struct LevelRun {
    level: f64,
    members: Vec<usize>,
    idx: Vec<usize>,
    updates: Vec<RegionUpdate>,
    meta: Vec<usize>,
}

/// Jointly calibrates `(f⁰, f¹)` for `family` against `groups`.
pub fn joint_multicalibrate(
    family: &ConditionalIdFamily,
    data: &ExactDataset,
    groups: &GroupFamily,
    m: usize,
    opts: &JointOptions,
) -> Result<JointRun> {
    let config = JointConfig::new(family, m)?;
    let alpha0 = opts.alpha0.unwrap_or(config.alpha0);
    let alpha1 = opts.alpha1.unwrap_or(config.alpha1);
    for a in [alpha0, alpha1] {
        if !(a.is_finite() && a > 0.0) {
            return Err(Error::InvalidParameter(format!("alpha must be positive, got {a}")));
        }
    }
    let mf = m as f64;
    let grid = grid_points(m);
    let (init0, init1) = opts.f_init.clone().unwrap_or_else(|| (default_init(&grid), default_init(&grid)));
    let mut idx0 = init0.indices(data, &grid)?;
    let mut idx1 = init1.indices(data, &grid)?;
    let outer = &family.outer;
    let guard0 = guard_limit(config.f0_budget, opts.guard_factor);
    let guard1 = guard_limit(config.f1_budget, opts.guard_factor);
    let guard_total = guard_limit(config.budget, opts.guard_factor);

    let mut log0 = Vec::new();
    let mut log1 = Vec::new();
    let mut interleave = Vec::new();
    let mut steps = Vec::new();
    let mut per_outer = Vec::new();
    let mut outer_iterations = 0;
    loop {
        let v0 = values_of(&grid, &idx0);
        let v1 = values_of(&grid, &idx1);
        if !outer_violated(data, groups, &v0, &v1, outer, alpha0 / mf)
            && !inner_violated(data, groups, family, &v0, &v1, alpha1 / mf)
        {
            break;
        }
        outer_iterations += 1;

        let (sliced, meta) = build_level_set_groups(groups, data, &v1);
        let ups = run_region_scan(data, &sliced, &grid, &mut idx0, outer, alpha0, guard0, config.f0_budget)?;
        for u in ups {
            let (gi, level) = meta[u.group_pos];
            let step = interleave.len() + 1;
            let group = groups.groups()[gi].id.clone();
            let on = LevelCondition { component: 1, value: level };
            log0.push(UpdateRecord {
                step,
                from: grid[u.k_from],
                group: group.clone(),
                to: grid[u.k_to],
                on: Some(on),
            });
            steps.push(JointTraceStep {
                step,
                component: 0,
                gamma: grid[u.k_from],
                group,
                on: level,
                mass: u.mass,
                exp_v: u.exp_v,
                gamma_to: grid[u.k_to],
            });
            interleave.push(0);
        }

        let v0 = values_of(&grid, &idx0);
        let mut levels: Vec<usize> = idx0.clone();
        levels.sort_unstable();
        levels.dedup();
        let run_level = |k0: usize, mut idx: Vec<usize>| -> Result<LevelRun> {
            let level = grid[k0];
            let (fam, meta) = restrict_to_level(groups, &v0, level);
            let updates =
                run_region_scan(data, &fam, &grid, &mut idx, &family.level(level), alpha1, guard1, config.f1_budget)?;
            let members = (0..idx.len()).filter(|&i| idx0[i] == k0).collect();
            Ok(LevelRun { level, members, idx, updates, meta })
        };
        // Level sets are disjoint, so each run may start from the same f¹.
        let runs: Vec<LevelRun> = if opts.parallel {
            levels.par_iter().map(|&k0| run_level(k0, idx1.clone())).collect::<Result<_>>()?
        } else {
            levels.iter().map(|&k0| run_level(k0, idx1.clone())).collect::<Result<_>>()?
        };
        let mut inner_count = 0;
        for r in runs {
            for &i in &r.members {
                idx1[i] = r.idx[i];
            }
            for u in r.updates {
                let gi = r.meta[u.group_pos];
                let step = interleave.len() + 1;
                let group = groups.groups()[gi].id.clone();
                let on = LevelCondition { component: 0, value: r.level };
                log1.push(UpdateRecord {
                    step,
                    from: grid[u.k_from],
                    group: group.clone(),
                    to: grid[u.k_to],
                    on: Some(on),
                });
                steps.push(JointTraceStep {
                    step,
                    component: 1,
                    gamma: grid[u.k_from],
                    group,
                    on: r.level,
                    mass: u.mass,
                    exp_v: u.exp_v,
                    gamma_to: grid[u.k_to],
                });
                interleave.push(1);
                inner_count += 1;
            }
        }
        per_outer.push(inner_count);
        if interleave.len() > guard_total {
            return Err(Error::NonTermination { updates: interleave.len(), budget: config.budget });
        }
    }

    let f0_updates = log0.len();
    let f1_updates = log1.len();
    let predictor = JointPredictor {
        m,
        f0: DiscretizedPredictor { m, grid: grid.clone(), init: init0, log: log0, current: values_of(&grid, &idx0) },
        f1: DiscretizedPredictor { m, grid: grid.clone(), init: init1, log: log1, current: values_of(&grid, &idx1) },
        interleave,
    };
    Ok(JointRun {
        predictor,
        trace: JointTrace { config, outer_iterations, f0_updates, f1_updates, f1_updates_per_outer: per_outer, steps },
    })
}
