//! Batch multicalibration on a discretized grid.
//!
//! [`batch_multicalibrate`] patches the worst `(level, group)` region until
//! every group's V-space error is within `α`. [`batch_multicalibrate_v`]
//! uses the stricter per-region test and patches the first violating region
//! in `(level, group)` order. Both produce a [`DiscretizedPredictor`] whose
//! update log replays onto new points through group predicates.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::audit::{group_v_alpha, level_slices, region_expected_id};
use crate::dataset::{ExactDataset, GroupFamily, Point};
use crate::error::{Error, Result};
use crate::properties::{IdFunction, PropertySpec};

/// `{1/(m+1), …, m/(m+1)}`
pub fn grid_points(m: usize) -> Vec<f64> {
    (1..=m).map(|k| k as f64 / (m + 1) as f64).collect()
}

/// Index of the grid point nearest `x`; ties go to the smaller point.
pub fn nearest_grid_index(grid: &[f64], x: f64) -> usize {
    let mut best = 0;
    for (k, &g) in grid.iter().enumerate() {
        if (g - x).abs() < (grid[best] - x).abs() {
            best = k;
        }
    }
    best
}

fn grid_index_of(grid: &[f64], x: f64) -> Result<usize> {
    let k = nearest_grid_index(grid, x);
    if (grid[k] - x).abs() <= 1e-12 {
        Ok(k)
    } else {
        Err(Error::InvalidParameter(format!("{x} is not a point of the {}-grid", grid.len())))
    }
}

/// Initial assignment: one grid value for every cell, or a value per cell id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InitAssignment {
    Constant(f64),
    PerCell(BTreeMap<String, f64>),
}

impl InitAssignment {
    fn value_for(&self, id: &str) -> Result<f64> {
        match self {
            InitAssignment::Constant(v) => Ok(*v),
            InitAssignment::PerCell(map) => {
                map.get(id).copied().ok_or_else(|| Error::InvalidParameter(format!("no initial value for `{id}`")))
            }
        }
    }

    pub(crate) fn indices(&self, data: &ExactDataset, grid: &[f64]) -> Result<Vec<usize>> {
        data.cells().iter().map(|c| grid_index_of(grid, self.value_for(&c.id)?)).collect()
    }
}

/// Restricts an update to points whose other component has `value`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelCondition {
    pub component: u8,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub step: usize,
    pub from: f64,
    pub group: String,
    pub to: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub on: Option<LevelCondition>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscretizedPredictor {
    pub m: usize,
    pub grid: Vec<f64>,
    pub init: InitAssignment,
    pub log: Vec<UpdateRecord>,
    /// Grid values on the training cells; empty after deserialization.
    #[serde(skip)]
    pub current: Vec<f64>,
}

impl DiscretizedPredictor {
    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("predictor serializes")
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(s)?;
        if p.grid != grid_points(p.m) {
            return Err(Error::InvalidParameter(format!("grid does not match m = {}", p.m)));
        }
        Ok(p)
    }

    /// Replays the log over the training cells using group masks.
    pub fn replay_on_cells(&self, data: &ExactDataset, groups: &GroupFamily) -> Result<Vec<f64>> {
        let mut values: Vec<f64> = data.cells().iter().map(|c| self.init.value_for(&c.id)).collect::<Result<_>>()?;
        for r in &self.log {
            if r.on.is_some() {
                return Err(Error::InvalidParameter("conditional record in a single predictor".into()));
            }
            let g = groups
                .get(&r.group)
                .ok_or_else(|| Error::InvalidGroups(format!("log names unknown group `{}`", r.group)))?;
            for i in g.members() {
                if values[i].to_bits() == r.from.to_bits() {
                    values[i] = r.to;
                }
            }
        }
        Ok(values)
    }
}

/// Replays `predictor` on arbitrary points using group predicates.
pub fn apply_predictor(predictor: &DiscretizedPredictor, points: &[Point], groups: &GroupFamily) -> Result<Vec<f64>> {
    let mut values: Vec<f64> = points.iter().map(|p| predictor.init.value_for(&p.id)).collect::<Result<_>>()?;
    for r in &predictor.log {
        let g = groups
            .get(&r.group)
            .ok_or_else(|| Error::InvalidGroups(format!("log names unknown group `{}`", r.group)))?;
        let rule = g.rule.as_ref().ok_or_else(|| Error::PredicateUnavailable(g.id.clone()))?;
        for (v, p) in values.iter_mut().zip(points) {
            if v.to_bits() == r.from.to_bits() && rule.contains(&p.id, &p.tags)? {
                *v = r.to;
            }
        }
    }
    Ok(values)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    pub gamma: f64,
    pub group: String,
    pub mass: f64,
    pub exp_v: f64,
    pub gamma_to: f64,
    /// Potential `E[S(f(x), y)]` after the update.
    pub phi: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTrace {
    pub alpha: f64,
    pub c_init: f64,
    /// `Σ_x w_x·min_γ E[S(γ, Y_x)]` over the grid; no grid predictor scores lower.
    pub c_opt_bound: f64,
    /// `(c_init − c_opt_bound)·m²/L`, or `B·m²/L` for the per-region variant.
    pub budget: f64,
    pub steps: Vec<TraceStep>,
}

impl ConvergenceTrace {
    pub fn to_csv_string(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["step", "gamma", "group", "mass", "expV", "gamma_to", "phi"]).unwrap();
        for s in &self.steps {
            w.write_record([
                s.step.to_string(),
                s.gamma.to_string(),
                s.group.clone(),
                s.mass.to_string(),
                s.exp_v.to_string(),
                s.gamma_to.to_string(),
                s.phi.to_string(),
            ])
            .unwrap();
        }
        String::from_utf8(w.into_inner().unwrap()).unwrap()
    }

    /// Potential before each step followed by the final value.
    pub fn potentials(&self) -> Vec<f64> {
        std::iter::once(self.c_init).chain(self.steps.iter().map(|s| s.phi)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchOptions {
    /// Overrides `α = 4L²/m`.
    pub alpha: Option<f64>,
    /// Defaults to the grid point nearest 0.5.
    pub f_init: Option<InitAssignment>,
    /// Abort after this many multiples of the update budget.
    pub guard_factor: f64,
}

impl Default for BatchOptions {
    fn default() -> Self {
        BatchOptions { alpha: None, f_init: None, guard_factor: 10.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchRun {
    pub predictor: DiscretizedPredictor,
    pub trace: ConvergenceTrace,
}

pub(crate) fn default_init(grid: &[f64]) -> InitAssignment {
    InitAssignment::Constant(grid[nearest_grid_index(grid, 0.5)])
}

pub(crate) fn guard_limit(budget: f64, factor: f64) -> usize {
    (factor * budget.ceil().max(1.0)) as usize
}

/// `E[S(f(x), y)]`
pub fn potential(data: &ExactDataset, values: &[f64], id: &dyn IdFunction) -> f64 {
    data.cells().iter().zip(values).map(|(c, &v)| c.weight * id.expected_score(v, &c.dist)).sum()
}

/// `Σ_x w_x·min_γ E[S(γ, Y_x)]` over `grid`.
pub fn c_opt_bound(data: &ExactDataset, grid: &[f64], id: &dyn IdFunction) -> f64 {
    data.cells()
        .iter()
        .map(|c| c.weight * grid.iter().map(|&g| id.expected_score(g, &c.dist)).fold(f64::INFINITY, f64::min))
        .sum()
}

/// Grid index minimizing `|E V(γ, Y_region)|`, ties to the smaller value.
pub(crate) fn retarget(data: &ExactDataset, members: &[usize], mass: f64, id: &dyn IdFunction, grid: &[f64]) -> usize {
    let mut best = 0;
    let mut best_abs = f64::INFINITY;
    for (k, &g) in grid.iter().enumerate() {
        let a = region_expected_id(data, members, mass, id, g).abs();
        if a < best_abs {
            best = k;
            best_abs = a;
        }
    }
    best
}

fn check_alpha(alpha: f64) -> Result<f64> {
    if alpha.is_finite() && alpha > 0.0 {
        Ok(alpha)
    } else {
        Err(Error::InvalidParameter(format!("alpha must be positive, got {alpha}")))
    }
}

fn check_m(m: usize) -> Result<()> {
    if m == 0 {
        Err(Error::InvalidParameter("m must be at least 1".into()))
    } else {
        Ok(())
    }
}

fn values_of(grid: &[f64], idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&k| grid[k]).collect()
}

/// Patches the worst region until each group's error sum is within `α`.
pub fn batch_multicalibrate(
    prop: &PropertySpec,
    data: &ExactDataset,
    groups: &GroupFamily,
    m: usize,
    opts: &BatchOptions,
) -> Result<BatchRun> {
    check_m(m)?;
    let l = prop.lipschitz_l;
    let alpha = check_alpha(opts.alpha.unwrap_or(4.0 * l * l / m as f64))?;
    let grid = grid_points(m);
    let init = opts.f_init.clone().unwrap_or_else(|| default_init(&grid));
    let mut idx = init.indices(data, &grid)?;
    let mut values = values_of(&grid, &idx);
    let c_init = potential(data, &values, prop);
    let c_opt = c_opt_bound(data, &grid, prop);
    let budget = (c_init - c_opt) * (m * m) as f64 / l;
    let guard = guard_limit(budget, opts.guard_factor);
    let mut log = Vec::new();
    let mut steps = Vec::new();
    loop {
        let violated = groups.groups().iter().any(|g| group_v_alpha(data, &values, g, prop) > alpha);
        if !violated {
            break;
        }
        // (grid index, group position) ascending; strict improvement keeps the first maximum.
        let mut candidates = Vec::new();
        for (gi, g) in groups.groups().iter().enumerate() {
            for s in level_slices(data, &values, g) {
                let v = region_expected_id(data, &s.members, s.mass, prop, s.gamma);
                let k = grid_index_of(&grid, s.gamma)?;
                candidates.push((k, gi, s, v));
            }
        }
        candidates.sort_by_key(|c| (c.0, c.1));
        let mut best = 0;
        let term = |c: &(usize, usize, crate::audit::Slice, f64)| c.2.mass * c.3 * c.3;
        for (i, c) in candidates.iter().enumerate() {
            if term(c) > term(&candidates[best]) {
                best = i;
            }
        }
        let (k, gi, slice, v) = &candidates[best];
        let step = log.len() + 1;
        let group = &groups.groups()[*gi].id;
        let k_to = retarget(data, &slice.members, slice.mass, prop, &grid);
        if k_to == *k {
            return Err(Error::Stalled { step, gamma: grid[*k], group: group.clone() });
        }
        for &i in &slice.members {
            idx[i] = k_to;
        }
        values = values_of(&grid, &idx);
        let phi = potential(data, &values, prop);
        log.push(UpdateRecord { step, from: grid[*k], group: group.clone(), to: grid[k_to], on: None });
        steps.push(TraceStep {
            step,
            gamma: grid[*k],
            group: group.clone(),
            mass: slice.mass,
            exp_v: *v,
            gamma_to: grid[k_to],
            phi,
        });
        if log.len() > guard {
            return Err(Error::NonTermination { updates: log.len(), budget });
        }
    }
    Ok(BatchRun {
        predictor: DiscretizedPredictor { m, grid, init, log, current: values },
        trace: ConvergenceTrace { alpha, c_init, c_opt_bound: c_opt, budget, steps },
    })
}

/// One region patch made by [`run_region_scan`].
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct RegionUpdate {
    pub group_pos: usize,
    pub k_from: usize,
    pub k_to: usize,
    pub mass: f64,
    pub exp_v: f64,
}

/// First `(grid index, group position)` region with
/// `Pr[f = γ, G]·V(γ, Y)² ≥ threshold`, if any.
pub(crate) fn first_violation(
    data: &ExactDataset,
    groups: &GroupFamily,
    grid: &[f64],
    idx: &[usize],
    id: &dyn IdFunction,
    threshold: f64,
) -> Result<Option<(usize, usize, crate::audit::Slice, f64)>> {
    let values = values_of(grid, idx);
    let mut first: Option<(usize, usize, crate::audit::Slice, f64)> = None;
    for (gi, g) in groups.groups().iter().enumerate() {
        for s in level_slices(data, &values, g) {
            let k = grid_index_of(grid, s.gamma)?;
            if let Some(f) = &first {
                if (k, gi) >= (f.0, f.1) {
                    // later groups cannot beat an earlier level in this group
                    break;
                }
            }
            let v = region_expected_id(data, &s.members, s.mass, id, s.gamma);
            if s.mass * v * v >= threshold {
                first = Some((k, gi, s, v));
                break;
            }
        }
    }
    Ok(first)
}

/// The per-region scan loop shared with the joint learner. Mutates `idx`
/// in place and returns the patches in order.
pub(crate) fn run_region_scan(
    data: &ExactDataset,
    groups: &GroupFamily,
    grid: &[f64],
    idx: &mut [usize],
    id: &dyn IdFunction,
    alpha: f64,
    guard: usize,
    budget: f64,
) -> Result<Vec<RegionUpdate>> {
    let m = grid.len();
    let threshold = alpha / m as f64;
    let mut out = Vec::new();
    while let Some((k, gi, slice, v)) = first_violation(data, groups, grid, idx, id, threshold)? {
        let k_to = retarget(data, &slice.members, slice.mass, id, grid);
        if k_to == k {
            return Err(Error::Stalled { step: out.len() + 1, gamma: grid[k], group: groups.groups()[gi].id.clone() });
        }
        for &i in &slice.members {
            idx[i] = k_to;
        }
        out.push(RegionUpdate { group_pos: gi, k_from: k, k_to, mass: slice.mass, exp_v: v });
        if out.len() > guard {
            return Err(Error::NonTermination { updates: out.len(), budget });
        }
    }
    Ok(out)
}

/// Patches the first region (in `(level, group)` order) whose joint-mass
/// error reaches `α/m`, until none does. `α` defaults to `4L²/m`.
#[allow(clippy::too_many_arguments)]
pub fn batch_multicalibrate_v(
    id: &dyn IdFunction,
    lipschitz_l: f64,
    score_range_b: f64,
    data: &ExactDataset,
    groups: &GroupFamily,
    m: usize,
    opts: &BatchOptions,
) -> Result<BatchRun> {
    check_m(m)?;
    let alpha = check_alpha(opts.alpha.unwrap_or(4.0 * lipschitz_l * lipschitz_l / m as f64))?;
    let grid = grid_points(m);
    let init = opts.f_init.clone().unwrap_or_else(|| default_init(&grid));
    let mut idx = init.indices(data, &grid)?;
    let c_init = potential(data, &values_of(&grid, &idx), id);
    let budget = score_range_b * (m * m) as f64 / lipschitz_l;
    let guard = guard_limit(budget, opts.guard_factor);
    let start = idx.clone();
    let updates = run_region_scan(data, groups, &grid, &mut idx, id, alpha, guard, budget)?;
    // Rebuild the potential trace by replaying the patches.
    let mut replay = start;
    let mut log = Vec::new();
    let mut steps = Vec::new();
    for (n, u) in updates.iter().enumerate() {
        let g = &groups.groups()[u.group_pos];
        for i in g.members() {
            if replay[i] == u.k_from {
                replay[i] = u.k_to;
            }
        }
        let phi = potential(data, &values_of(&grid, &replay), id);
        log.push(UpdateRecord { step: n + 1, from: grid[u.k_from], group: g.id.clone(), to: grid[u.k_to], on: None });
        steps.push(TraceStep {
            step: n + 1,
            gamma: grid[u.k_from],
            group: g.id.clone(),
            mass: u.mass,
            exp_v: u.exp_v,
            gamma_to: grid[u.k_to],
            phi,
        });
    }
    debug_assert_eq!(replay, idx);
    let c_opt = c_opt_bound(data, &grid, id);
    Ok(BatchRun {
        predictor: DiscretizedPredictor { m, grid: grid.clone(), init, log, current: values_of(&grid, &idx) },
        trace: ConvergenceTrace { alpha, c_init, c_opt_bound: c_opt, budget, steps },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audit::batch_error_v;
    use crate::dataset::make_variance_counterexample;
    use crate::properties::{mean_property, FiniteDistribution};

    #[test]
    fn grid_basics() {
        assert_eq!(grid_points(3), vec![0.25, 0.5, 0.75]);
        let g = grid_points(20);
        assert_eq!(nearest_grid_index(&g, 0.5), 9);
        assert_eq!(nearest_grid_index(&grid_points(9), 0.0), 0);
    }

    #[test]
    fn already_calibrated_is_untouched() {
        let data = make_variance_counterexample();
        let groups = GroupFamily::all_only(&data);
        let run = batch_multicalibrate(&mean_property(), &data, &groups, 9, &BatchOptions::default()).unwrap();
        assert!(run.predictor.log.is_empty());
        assert_eq!(run.predictor.current, vec![0.5, 0.5]);
    }

    #[test]
    fn default_alpha_two_cell_from_low_start_halts_immediately() {
        // 0.16 = (0.1 − 0.5)² sits below α = 4/9
        let data = make_variance_counterexample();
        let groups = GroupFamily::all_only(&data);
        let opts = BatchOptions { f_init: Some(InitAssignment::Constant(0.1)), ..Default::default() };
        let run = batch_multicalibrate(&mean_property(), &data, &groups, 9, &opts).unwrap();
        assert!(run.predictor.log.is_empty());
        let opts = BatchOptions { alpha: Some(0.1), ..opts };
        let run = batch_multicalibrate(&mean_property(), &data, &groups, 9, &opts).unwrap();
        assert_eq!(run.predictor.log.len(), 1);
        assert_eq!(run.predictor.current, vec![0.5, 0.5]);
        assert_eq!(run.trace.steps[0].gamma_to, 0.5);
    }

    #[test]
    fn alpha_huge_means_no_updates() {
        let data = make_variance_counterexample();
        let groups = GroupFamily::from_cell_sets(&data, &[("x0", &["x0"]), ("x1", &["x1"])]).unwrap();
        let opts = BatchOptions { alpha: Some(10.0), ..Default::default() };
        let run = batch_multicalibrate_v(&mean_property(), 1.0, 0.5, &data, &groups, 9, &opts).unwrap();
        assert!(run.predictor.log.is_empty());
    }

    #[test]
    fn single_cell_one_update() {
        let data = crate::dataset::ExactDataset::new(vec![crate::dataset::Cell {
            id: "a".into(),
            weight: 1.0,
            dist: FiniteDistribution::new(vec![0.8, 1.0], vec![0.5, 0.5]).unwrap(),
            tags: Default::default(),
        }])
        .unwrap();
        let groups = GroupFamily::all_only(&data);
        let run =
            batch_multicalibrate_v(&mean_property(), 1.0, 0.5, &data, &groups, 9, &BatchOptions::default()).unwrap();
        assert_eq!(run.predictor.log.len(), 1);
        assert_eq!(run.predictor.current, vec![0.9]);
    }

    #[test]
    fn replay_and_json() {
        let data = make_variance_counterexample();
        let groups = GroupFamily::from_cell_sets(&data, &[("x0", &["x0"]), ("x1", &["x1"])]).unwrap();
        let opts = BatchOptions { alpha: Some(0.01), ..Default::default() };
        let run = batch_multicalibrate(&mean_property(), &data, &groups, 9, &opts).unwrap();
        assert_eq!(run.predictor.current, vec![0.1, 0.9]);
        let back = DiscretizedPredictor::from_json_str(&run.predictor.to_json_string()).unwrap();
        assert_eq!(back.replay_on_cells(&data, &groups).unwrap(), run.predictor.current);
        let report = batch_error_v(&run.predictor.current, &data, &groups, &mean_property());
        assert!(report.passes(0.01));
    }

    #[test]
    fn apply_needs_predicates() {
        let data = make_variance_counterexample();
        let mut groups = GroupFamily::from_cell_sets(&data, &[("x0", &["x0"])]).unwrap();
        let pred = DiscretizedPredictor {
            m: 9,
            grid: grid_points(9),
            init: InitAssignment::Constant(0.5),
            log: vec![UpdateRecord { step: 1, from: 0.5, group: "x0".into(), to: 0.1, on: None }],
            current: vec![],
        };
        let pts = vec![Point { id: "x0".into(), tags: Default::default() }];
        assert_eq!(apply_predictor(&pred, &pts, &groups).unwrap(), vec![0.1]);
        let g = crate::dataset::Group { id: "x0".into(), mask: vec![true, false], rule: None };
        groups = GroupFamily::new(2, vec![g]).unwrap();
        assert!(matches!(apply_predictor(&pred, &pts, &groups), Err(Error::PredicateUnavailable(_))));
    }
}
