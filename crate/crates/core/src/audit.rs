//! Property evaluation and calibration-error metrics.
//!
//! All batch metrics are computed exactly on [`ExactDataset`]s. Empty
//! slices contribute nothing. Besides the raw conditional error each
//! report carries `alpha_equivalent`, the error multiplied by the group's
//! mass, which is the quantity compared against `α` thresholds.

use serde::{Deserialize, Serialize};

use crate::dataset::{mixture_distribution, ExactDataset, Group, GroupFamily};
use crate::error::Result;
use crate::online::Transcript;
use crate::properties::{ConditionalIdFamily, FiniteDistribution, Functional, IdFunction};

/// Evaluates a functional exactly.
pub fn eval_property(kind: Functional, dist: &FiniteDistribution) -> f64 {
    kind.eval(dist)
}

/// One level set of a predictor inside a group.
#[derive(Clone, Debug, PartialEq)]
pub struct Slice {
    pub gamma: f64,
    pub members: Vec<usize>,
    pub mass: f64,
}

/// Members of `group` bucketed by `values`, ascending in value.
pub fn level_slices(data: &ExactDataset, values: &[f64], group: &Group) -> Vec<Slice> {
    let mut idx: Vec<usize> = group.members().collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut out: Vec<Slice> = Vec::new();
    for i in idx {
        let w = data.cells()[i].weight;
        match out.last_mut() {
            Some(s) if s.gamma.to_bits() == values[i].to_bits() => {
                s.members.push(i);
                s.mass += w;
            }
            _ => out.push(Slice { gamma: values[i], members: vec![i], mass: w }),
        }
    }
    for s in &mut out {
        s.members.sort_unstable();
        s.mass = s.members.iter().map(|&i| data.cells()[i].weight).sum();
    }
    out
}

/// `E[V(γ, Y)]` over the region spanned by `members`, as the mass-weighted
/// average of per-cell expectations (members ascending).
pub fn region_expected_id(data: &ExactDataset, members: &[usize], mass: f64, id: &dyn IdFunction, gamma: f64) -> f64 {
    let cells = data.cells();
    let s: f64 = members.iter().map(|&i| cells[i].weight * id.expected_id(gamma, &cells[i].dist)).sum();
    s / mass
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    GammaSpace,
    VSpace,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::GammaSpace => "gamma_space",
            Mode::VSpace => "v_space",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupError {
    pub group_id: String,
    pub mass: f64,
    /// `Σ_γ Pr[f = γ | G]·e(γ, G)²`
    pub error: f64,
    /// `Σ_γ Pr[f = γ, G]·e(γ, G)²`
    pub alpha_equivalent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub mode: Mode,
    pub groups: Vec<GroupError>,
}

impl CalibrationReport {
    pub fn max_alpha_equivalent(&self) -> f64 {
        self.groups.iter().map(|g| g.alpha_equivalent).fold(0.0, f64::max)
    }

    pub fn get(&self, group_id: &str) -> Option<&GroupError> {
        self.groups.iter().find(|g| g.group_id == group_id)
    }

    /// Every group within `alpha`.
    pub fn passes(&self, alpha: f64) -> bool {
        self.groups.iter().all(|g| g.alpha_equivalent <= alpha)
    }

    pub fn to_csv_string(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["group_id", "mode", "error", "alpha_equivalent"]).unwrap();
        for g in &self.groups {
            w.write_record([
                g.group_id.clone(),
                self.mode.as_str().to_string(),
                g.error.to_string(),
                g.alpha_equivalent.to_string(),
            ])
            .unwrap();
        }
        String::from_utf8(w.into_inner().unwrap()).unwrap()
    }
}

/// Per-group `Σ_γ Pr[f=γ, G]·V(γ, Y_{γ,G})²` for one group.
pub fn group_v_alpha(data: &ExactDataset, values: &[f64], group: &Group, id: &dyn IdFunction) -> f64 {
    level_slices(data, values, group)
        .iter()
        .map(|s| {
            let v = region_expected_id(data, &s.members, s.mass, id, s.gamma);
            s.mass * v * v
        })
        .sum()
}

fn group_mass(data: &ExactDataset, group: &Group) -> f64 {
    group.members().map(|i| data.cells()[i].weight).sum()
}

/// V-space error of `values` for every group.
pub fn batch_error_v(
    values: &[f64],
    data: &ExactDataset,
    groups: &GroupFamily,
    id: &dyn IdFunction,
) -> CalibrationReport {
    let groups = groups
        .groups()
        .iter()
        .map(|g| {
            let mass = group_mass(data, g);
            let a = group_v_alpha(data, values, g, id);
            GroupError { group_id: g.id.clone(), mass, error: a / mass, alpha_equivalent: a }
        })
        .collect();
    CalibrationReport { mode: Mode::VSpace, groups }
}

/// Γ-space error `Σ_γ Pr[f=γ | G]·(γ − Γ(Y_{γ,G}))²` for every group.
pub fn batch_error_gamma(
    values: &[f64],
    data: &ExactDataset,
    groups: &GroupFamily,
    functional: Functional,
) -> Result<CalibrationReport> {
    let mut out = Vec::new();
    for g in groups.groups() {
        let mass = group_mass(data, g);
        let mut a = 0.0;
        for s in level_slices(data, values, g) {
            let truth = functional.eval(&mixture_distribution(data, &s.members)?);
            a += s.mass * (s.gamma - truth) * (s.gamma - truth);
        }
        out.push(GroupError { group_id: g.id.clone(), mass, error: a / mass, alpha_equivalent: a });
    }
    Ok(CalibrationReport { mode: Mode::GammaSpace, groups: out })
}

/// `(Σ_γ Pr[f=γ | G]·|γ − Γ|)²` per group, the ℓ₁ counterpart of
/// [`batch_error_gamma`].
pub fn batch_error_gamma_l1_squared(
    values: &[f64],
    data: &ExactDataset,
    groups: &GroupFamily,
    functional: Functional,
) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for g in groups.groups() {
        let mass = group_mass(data, g);
        let mut a = 0.0;
        for s in level_slices(data, values, g) {
            let truth = functional.eval(&mixture_distribution(data, &s.members)?);
            a += s.mass / mass * (s.gamma - truth).abs();
        }
        out.push(a * a);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointSlice {
    pub group_id: String,
    pub gamma0: f64,
    pub gamma1: f64,
    pub mass: f64,
    /// `V⁰(γ⁰, Y_slice)`
    pub v0: f64,
    /// `Γ⁰(Y_slice)`
    pub gamma0_true: f64,
    /// `V¹_{Γ⁰(Y_slice)}(γ¹, Y_slice)`
    pub v1: f64,
    /// Bayes risk of the slice, when the family names one.
    pub gamma1_true: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointCalibrationReport {
    /// Max over `(G, γ¹)` of `Σ_{γ⁰} Pr[G, γ⁰, γ¹]·V⁰²`.
    pub alpha0_equivalent: f64,
    /// Max over `(G, γ⁰)` of `Σ_{γ¹} Pr[G, γ⁰, γ¹]·(V¹_{Γ⁰})²`.
    pub alpha1_equivalent: f64,
    /// Same maxima with `(γ − Γ)²` in place of the squared id values.
    pub gamma_space0: f64,
    pub gamma_space1: Option<f64>,
    pub slices: Vec<JointSlice>,
}

impl JointCalibrationReport {
    pub fn slices_csv_string(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["group_id", "gamma0", "gamma1", "mass", "v0", "gamma0_true", "v1", "gamma1_true"]).unwrap();
        for s in &self.slices {
            w.write_record([
                s.group_id.clone(),
                s.gamma0.to_string(),
                s.gamma1.to_string(),
                s.mass.to_string(),
                s.v0.to_string(),
                s.gamma0_true.to_string(),
                s.v1.to_string(),
                s.gamma1_true.map(|v| v.to_string()).unwrap_or_default(),
            ])
            .unwrap();
        }
        String::from_utf8(w.into_inner().unwrap()).unwrap()
    }
}

/// Joint calibration error of the pair `(f0, f1)`.
pub fn joint_error(
    f0: &[f64],
    f1: &[f64],
    data: &ExactDataset,
    groups: &GroupFamily,
    family: &ConditionalIdFamily,
) -> Result<JointCalibrationReport> {
    let outer = &family.outer;
    let functional = outer.functional();
    let cells = data.cells();
    let mut slices = Vec::new();
    let (mut a0, mut a1, mut g0, mut g1) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for g in groups.groups() {
        let mut idx: Vec<usize> = g.members().collect();
        idx.sort_by(|&a, &b| f0[a].total_cmp(&f0[b]).then(f1[a].total_cmp(&f1[b])).then(a.cmp(&b)));
        let mut start = 0;
        let mut group_slices: Vec<JointSlice> = Vec::new();
        while start < idx.len() {
            let (x0, x1) = (f0[idx[start]], f1[idx[start]]);
            let mut end = start;
            while end < idx.len() && f0[idx[end]].to_bits() == x0.to_bits() && f1[idx[end]].to_bits() == x1.to_bits() {
                end += 1;
            }
            let mut members = idx[start..end].to_vec();
            members.sort_unstable();
            let mass: f64 = members.iter().map(|&i| cells[i].weight).sum();
            let v0 = region_expected_id(data, &members, mass, outer, x0);
            let mix = mixture_distribution(data, &members)?;
            let truth0 = functional.eval(&mix);
            let v1 = region_expected_id(data, &members, mass, &family.level(truth0), x1);
            let truth1 = family.inner_functional.map(|_| mix.expectation(|y| family.pair_score.eval(truth0, y)));
            group_slices.push(JointSlice {
                group_id: g.id.clone(),
                gamma0: x0,
                gamma1: x1,
                mass,
                v0,
                gamma0_true: truth0,
                v1,
                gamma1_true: truth1,
            });
            start = end;
        }
        // outer error: condition on γ¹, sum over γ⁰
        let mut by1: Vec<&JointSlice> = group_slices.iter().collect();
        by1.sort_by(|a, b| a.gamma1.total_cmp(&b.gamma1).then(a.gamma0.total_cmp(&b.gamma0)));
        for chunk in by1.chunk_by(|a, b| a.gamma1.to_bits() == b.gamma1.to_bits()) {
            let s: f64 = chunk.iter().map(|s| s.mass * s.v0 * s.v0).sum();
            let sg: f64 = chunk.iter().map(|s| s.mass * (s.gamma0 - s.gamma0_true).powi(2)).sum();
            a0 = a0.max(s);
            g0 = g0.max(sg);
        }
        // inner error: condition on γ⁰, sum over γ¹; slices are already ordered by γ⁰
        for chunk in group_slices.chunk_by(|a, b| a.gamma0.to_bits() == b.gamma0.to_bits()) {
            let s: f64 = chunk.iter().map(|s| s.mass * s.v1 * s.v1).sum();
            a1 = a1.max(s);
            if family.inner_functional.is_some() {
                let sg: f64 = chunk.iter().map(|s| s.mass * (s.gamma1 - s.gamma1_true.unwrap()).powi(2)).sum();
                g1 = g1.max(sg);
            }
        }
        slices.extend(group_slices);
    }
    Ok(JointCalibrationReport {
        alpha0_equivalent: a0,
        alpha1_equivalent: a1,
        gamma_space0: g0,
        gamma_space1: family.inner_functional.map(|_| g1),
        slices,
    })
}

/// `K₂(G, π) = Σ_γ (Σ_{t: p_t = γ, x_t ∈ G} V(γ, y_t))² / n` for every
/// group, recomputed from the rounds of `transcript`.
pub fn online_k2(transcript: &Transcript, id: &dyn IdFunction) -> Vec<f64> {
    online_k2_prefix(transcript, id, transcript.rounds.len())
}

/// [`online_k2`] over the first `len` rounds.
pub fn online_k2_prefix(transcript: &Transcript, id: &dyn IdFunction, len: usize) -> Vec<f64> {
    let m = transcript.grid.len();
    let ng = transcript.group_ids.len();
    let mut r = vec![0.0; ng * m];
    let mut n = vec![0u64; ng * m];
    for round in &transcript.rounds[..len] {
        let gamma = transcript.grid[round.p];
        let v = id.id(gamma, round.y);
        for (g, &inside) in round.membership.iter().enumerate() {
            if inside {
                r[g * m + round.p] += v;
                n[g * m + round.p] += 1;
            }
        }
    }
    (0..ng)
        .map(|g| (0..m).filter(|&i| n[g * m + i] > 0).map(|i| r[g * m + i] * r[g * m + i] / n[g * m + i] as f64).sum())
        .collect()
}
