//! Exact and sample datasets, group families, regions and generators.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::properties::{FiniteDistribution, Functional};

const WEIGHT_SUM_TOL: f64 = 1e-9;

/// Feature attributes used by group predicates.
pub type Tags = BTreeMap<String, f64>;

#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub id: String,
    pub weight: f64,
    pub dist: FiniteDistribution,
    pub tags: Tags,
}

/// Finitely many feature cells, each with an exact label distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDataset", into = "RawDataset")]
pub struct ExactDataset {
    cells: Vec<Cell>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCell {
    id: String,
    weight: f64,
    dist: FiniteDistribution,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDataset {
    cells: Vec<RawCell>,
    #[serde(default)]
    tags: BTreeMap<String, Tags>,
}

impl TryFrom<RawDataset> for ExactDataset {
    type Error = Error;
    fn try_from(raw: RawDataset) -> Result<Self> {
        let ids: BTreeSet<&str> = raw.cells.iter().map(|c| c.id.as_str()).collect();
        if let Some(unknown) = raw.tags.keys().find(|k| !ids.contains(k.as_str())) {
            return Err(Error::InvalidDataset(format!("tags for unknown cell `{unknown}`")));
        }
        let mut tags = raw.tags;
        let cells = raw
            .cells
            .into_iter()
            .map(|c| Cell { tags: tags.remove(&c.id).unwrap_or_default(), id: c.id, weight: c.weight, dist: c.dist })
            .collect();
        ExactDataset::new(cells)
    }
}

impl From<ExactDataset> for RawDataset {
    fn from(d: ExactDataset) -> Self {
        let mut tags = BTreeMap::new();
        let mut cells = Vec::with_capacity(d.cells.len());
        for c in d.cells {
            if !c.tags.is_empty() {
                tags.insert(c.id.clone(), c.tags);
            }
            cells.push(RawCell { id: c.id, weight: c.weight, dist: c.dist });
        }
        RawDataset { cells, tags }
    }
}

impl ExactDataset {
    /// Checks ids and weights; weights within 1e-9 of summing to one are
    /// renormalized.
    pub fn new(mut cells: Vec<Cell>) -> Result<Self> {
        if cells.is_empty() {
            return Err(Error::InvalidDataset("no cells".into()));
        }
        let mut seen = BTreeSet::new();
        for c in &cells {
            if !seen.insert(c.id.as_str()) {
                return Err(Error::InvalidDataset(format!("duplicate cell id `{}`", c.id)));
            }
            if !(c.weight.is_finite() && c.weight > 0.0) {
                return Err(Error::InvalidDataset(format!("cell `{}` has weight {}", c.id, c.weight)));
            }
        }
        let total: f64 = cells.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::InvalidDataset(format!("weights sum to {total}, expected 1")));
        }
        if total != 1.0 {
            for c in &mut cells {
                c.weight /= total;
            }
        }
        Ok(ExactDataset { cells })
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.cells.iter().map(|c| c.weight).collect()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.cells.iter().position(|c| c.id == id)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("dataset serializes")
    }

    /// The true value of `functional` on every cell.
    pub fn true_values(&self, functional: Functional) -> Vec<f64> {
        self.cells.iter().map(|c| functional.eval(&c.dist)).collect()
    }
}

/// A set of cells with its mass and conditional label distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct Region {
    pub members: Vec<usize>,
    pub mass: f64,
    pub mixture: FiniteDistribution,
}

/// Weight-renormalized merge of the members' label distributions.
pub fn mixture_distribution(data: &ExactDataset, indices: &[usize]) -> Result<FiniteDistribution> {
    if indices.is_empty() {
        return Err(Error::EmptyRegion("no member cells".into()));
    }
    let cells = data.cells();
    if let Some(&bad) = indices.iter().find(|&&i| i >= cells.len()) {
        return Err(Error::InvalidDataset(format!("cell index {bad} out of range")));
    }
    FiniteDistribution::mixture(indices.iter().map(|&i| (cells[i].weight, &cells[i].dist)))
}

pub fn region(data: &ExactDataset, indices: Vec<usize>) -> Result<Region> {
    let mixture = mixture_distribution(data, &indices)?;
    let mass = indices.iter().map(|&i| data.cells()[i].weight).sum();
    Ok(Region { members: indices, mass, mixture })
}

/// Membership rule usable on points outside the training cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule")]
pub enum GroupRule {
    All,
    InRange { column: String, lo: f64, hi: f64 },
    Equals { column: String, value: f64 },
    Cells { ids: Vec<String> },
}

/// A point to be scored by a trained predictor.
#[derive(Clone, Debug, PartialEq)]
pub struct Point {
    pub id: String,
    pub tags: Tags,
}

impl GroupRule {
    pub fn contains(&self, id: &str, tags: &Tags) -> Result<bool> {
        let col = |c: &str| tags.get(c).copied().ok_or_else(|| Error::MissingColumn(c.to_string()));
        Ok(match self {
            GroupRule::All => true,
            GroupRule::InRange { column, lo, hi } => {
                let v = col(column)?;
                *lo <= v && v < *hi
            }
            GroupRule::Equals { column, value } => col(column)? == *value,
            GroupRule::Cells { ids } => ids.iter().any(|i| i == id),
        })
    }
}

/// Group config entry: `{id, column, op: in_range|equals, args}`.
/// `in_range` is the half-open interval `[args[0], args[1])`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupPredicate {
    pub id: String,
    pub column: String,
    pub op: PredicateOp,
    pub args: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredicateOp {
    InRange,
    Equals,
}

impl GroupPredicate {
    pub fn in_range(id: &str, column: &str, lo: f64, hi: f64) -> Self {
        GroupPredicate { id: id.into(), column: column.into(), op: PredicateOp::InRange, args: vec![lo, hi] }
    }

    pub fn equals(id: &str, column: &str, value: f64) -> Self {
        GroupPredicate { id: id.into(), column: column.into(), op: PredicateOp::Equals, args: vec![value] }
    }

    pub fn to_rule(&self) -> Result<GroupRule> {
        match (self.op, self.args.as_slice()) {
            (PredicateOp::InRange, &[lo, hi]) => Ok(GroupRule::InRange { column: self.column.clone(), lo, hi }),
            (PredicateOp::Equals, &[value]) => Ok(GroupRule::Equals { column: self.column.clone(), value }),
            (op, args) => Err(Error::InvalidGroups(format!(
                "group `{}`: {op:?} takes {} argument(s), got {}",
                self.id,
                if op == PredicateOp::InRange { 2 } else { 1 },
                args.len()
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Group {
    pub id: String,
    pub mask: Vec<bool>,
    pub rule: Option<GroupRule>,
}

impl Group {
    pub fn members(&self) -> impl Iterator<Item = usize> + '_ {
        self.mask.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }
}

pub const ALL_GROUP: &str = "all";

/// Ordered groups over one dataset; the first group is always `all`.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupFamily {
    groups: Vec<Group>,
}

impl GroupFamily {
    pub fn all_only(data: &ExactDataset) -> Self {
        GroupFamily { groups: vec![all_group(data.len())] }
    }

    /// `all` followed by `groups`. Empty groups and duplicate ids are rejected.
    pub fn new(n: usize, groups: Vec<Group>) -> Result<Self> {
        let mut out = vec![all_group(n)];
        let mut seen: BTreeSet<String> = [ALL_GROUP.to_string()].into();
        for g in groups {
            if g.mask.len() != n {
                return Err(Error::InvalidGroups(format!(
                    "group `{}` mask has length {}, dataset has {n} cells",
                    g.id,
                    g.mask.len()
                )));
            }
            if !seen.insert(g.id.clone()) {
                return Err(Error::InvalidGroups(format!("duplicate group id `{}`", g.id)));
            }
            if !g.mask.iter().any(|&b| b) {
                return Err(Error::InvalidGroups(format!("group `{}` is empty", g.id)));
            }
            out.push(g);
        }
        Ok(GroupFamily { groups: out })
    }

    /// Groups given as lists of cell ids.
    pub fn from_cell_sets(data: &ExactDataset, sets: &[(&str, &[&str])]) -> Result<Self> {
        let mut groups = Vec::new();
        for (id, members) in sets {
            let mut mask = vec![false; data.len()];
            for m in members.iter() {
                let i = data
                    .index_of(m)
                    .ok_or_else(|| Error::InvalidGroups(format!("group `{id}` names unknown cell `{m}`")))?;
                mask[i] = true;
            }
            let ids = members.iter().map(|s| s.to_string()).collect();
            groups.push(Group { id: id.to_string(), mask, rule: Some(GroupRule::Cells { ids }) });
        }
        Self::new(data.len(), groups)
    }

    /// Materializes predicate groups over the cells' tags.
    pub fn from_predicates(data: &ExactDataset, preds: &[GroupPredicate]) -> Result<Self> {
        let mut groups = Vec::new();
        for p in preds {
            let rule = p.to_rule()?;
            let mask = data.cells().iter().map(|c| rule.contains(&c.id, &c.tags)).collect::<Result<Vec<_>>>()?;
            groups.push(Group { id: p.id.clone(), mask, rule: Some(rule) });
        }
        Self::new(data.len(), groups)
    }

    /// Internal constructor for derived families (level-set intersections).
    /// Keeps order as given and does not insert `all`.
    pub(crate) fn from_raw(groups: Vec<Group>) -> Self {
        GroupFamily { groups }
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Group> {
        self.groups.iter().find(|g| g.id == id)
    }
}

fn all_group(n: usize) -> Group {
    Group { id: ALL_GROUP.into(), mask: vec![true; n], rule: Some(GroupRule::All) }
}

/// `groups_from_config`: predicate groups plus the mandatory `all`.
pub fn groups_from_config(data: &ExactDataset, preds: &[GroupPredicate]) -> Result<GroupFamily> {
    GroupFamily::from_predicates(data, preds)
}

/// Rows of features and a label, each with weight `1/n`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleDataset {
    pub feature_columns: Vec<String>,
    pub rows: Vec<(Vec<f64>, f64)>,
}

pub fn load_csv(path: &Path, feature_columns: &[String], label_column: &str) -> Result<SampleDataset> {
    let file = std::fs::File::open(path)?;
    read_csv(file, feature_columns, label_column)
}

/// As [`load_csv`] from any reader. Row numbers in errors count the header
/// as row 1.
pub fn read_csv<R: std::io::Read>(reader: R, feature_columns: &[String], label_column: &str) -> Result<SampleDataset> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers.iter().position(|h| h.trim() == name).ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let feature_idx: Vec<usize> = feature_columns.iter().map(|c| col(c)).collect::<Result<_>>()?;
    let label_idx = col(label_column)?;
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 2;
        let num = |j: usize, name: &str| -> Result<f64> {
            let raw = rec.get(j).unwrap_or("").trim();
            raw.parse::<f64>()
                .map_err(|_| Error::InvalidDataset(format!("row {row}: column `{name}` value `{raw}` is not a number")))
        };
        let label = num(label_idx, label_column)?;
        if !(0.0..=1.0).contains(&label) {
            return Err(Error::LabelOutOfRange { value: label, row: Some(row) });
        }
        let features =
            feature_idx.iter().zip(feature_columns).map(|(&j, name)| num(j, name)).collect::<Result<Vec<_>>>()?;
        rows.push((features, label));
    }
    if rows.is_empty() {
        return Err(Error::InvalidDataset("CSV has no data rows".into()));
    }
    Ok(SampleDataset { feature_columns: feature_columns.to_vec(), rows })
}

impl SampleDataset {
    /// Collapses rows with identical features into cells carrying the
    /// empirical label distribution, in order of first appearance.
    pub fn to_exact(&self) -> Result<ExactDataset> {
        let n = self.rows.len() as f64;
        let mut order: Vec<Vec<u64>> = Vec::new();
        let mut buckets: BTreeMap<Vec<u64>, Vec<f64>> = BTreeMap::new();
        for (features, label) in &self.rows {
            let key: Vec<u64> = features.iter().map(|f| f.to_bits()).collect();
            let entry = buckets.entry(key.clone()).or_insert_with(|| {
                order.push(key);
                Vec::new()
            });
            entry.push(*label);
        }
        let cells = order
            .iter()
            .enumerate()
            .map(|(i, key)| {
                let labels = &buckets[key];
                let k = labels.len() as f64;
                let dist = FiniteDistribution::new(labels.clone(), vec![1.0 / k; labels.len()])?;
                let tags =
                    self.feature_columns.iter().zip(key).map(|(c, bits)| (c.clone(), f64::from_bits(*bits))).collect();
                Ok(Cell { id: format!("c{i}"), weight: k / n, dist, tags })
            })
            .collect::<Result<Vec<_>>>()?;
        ExactDataset::new(cells)
    }
}

fn tagged(pairs: &[(&str, f64)]) -> Tags {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

/// Two equally likely cells with deterministic labels 0 and 1.
pub fn make_variance_counterexample() -> ExactDataset {
    make_two_point(FiniteDistribution::point(0.0).unwrap(), FiniteDistribution::point(1.0).unwrap(), 0.5, ("x0", "x1"))
        .expect("valid construction")
}

/// Cells `x1` with weight λ and `x2` with weight `1 − λ`.
pub fn make_two_point_dataset(p1: FiniteDistribution, p2: FiniteDistribution, lambda: f64) -> Result<ExactDataset> {
    make_two_point(p1, p2, lambda, ("x1", "x2"))
}

fn make_two_point(
    p1: FiniteDistribution,
    p2: FiniteDistribution,
    lambda: f64,
    ids: (&str, &str),
) -> Result<ExactDataset> {
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::InvalidParameter(format!("lambda must lie in (0, 1), got {lambda}")));
    }
    ExactDataset::new(vec![
        Cell { id: ids.0.into(), weight: lambda, dist: p1, tags: tagged(&[("x", 0.0)]) },
        Cell { id: ids.1.into(), weight: 1.0 - lambda, dist: p2, tags: tagged(&[("x", 1.0)]) },
    ])
}

/// Equally weighted cells `x0, x1, …` with Bernoulli(p) labels.
pub fn make_bernoulli_dataset(ps: &[f64]) -> Result<ExactDataset> {
    if ps.is_empty() {
        return Err(Error::InvalidParameter("need at least one cell".into()));
    }
    let w = 1.0 / ps.len() as f64;
    let cells = ps
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidParameter(format!("Bernoulli parameter {p} outside [0, 1]")));
            }
            let dist = FiniteDistribution::new(vec![0.0, 1.0], vec![1.0 - p, p])?;
            Ok(Cell { id: format!("x{i}"), weight: w, dist, tags: tagged(&[("x", i as f64), ("b", (i % 2) as f64)]) })
        })
        .collect::<Result<Vec<_>>>()?;
    ExactDataset::new(cells)
}

/// `cells` equally weighted cells; cell `c` has the point label
/// `((stride·c) mod cells) / cells` and tag `x = c / cells`.
pub fn make_permuted_grid_dataset(cells: usize, stride: usize) -> Result<ExactDataset> {
    if cells == 0 {
        return Err(Error::InvalidParameter("need at least one cell".into()));
    }
    let w = 1.0 / cells as f64;
    let out = (0..cells)
        .map(|c| {
            let y = ((stride * c) % cells) as f64 / cells as f64;
            Ok(Cell {
                id: format!("x{c}"),
                weight: w,
                dist: FiniteDistribution::point(y)?,
                tags: tagged(&[("x", c as f64 / cells as f64)]),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ExactDataset::new(out)
}

/// Cells whose label distributions are atom grids on `[0, 1]` with
/// density between `m1` and `m2`.
///
/// Atoms sit at `(k + 0.5)/atoms`. Raw densities are drawn uniformly in
/// `[m1, m2]` and then shrunk affinely toward whichever bound keeps them
/// inside `[m1, m2]` while averaging to one. Tags: `x = (c + 0.5)/cells`,
/// `b = c mod 2`.
pub fn synth_bounded_density(cells: usize, atoms: usize, m1: f64, m2: f64, seed: u64) -> Result<ExactDataset> {
    if cells == 0 || atoms == 0 {
        return Err(Error::InvalidParameter("cells and atoms must be positive".into()));
    }
    if !((0.0..=1.0).contains(&m1) && 1.0 <= m2 && m2.is_finite()) {
        return Err(Error::InvalidParameter(format!("no density on [0, 1] lies between {m1} and {m2}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let support: Vec<f64> = (0..atoms).map(|k| (k as f64 + 0.5) / atoms as f64).collect();
    let a = atoms as f64;
    let w = 1.0 / cells as f64;
    let mut out = Vec::with_capacity(cells);
    for c in 0..cells {
        let mut u: Vec<f64> = (0..atoms).map(|_| if m1 == m2 { m1 } else { rng.gen_range(m1..=m2) }).collect();
        let sum: f64 = u.iter().sum();
        if sum > a {
            let s = (a - a * m1) / (sum - a * m1);
            u.iter_mut().for_each(|v| *v = m1 + (*v - m1) * s);
        } else if sum < a {
            let s = (a * m2 - a) / (a * m2 - sum);
            u.iter_mut().for_each(|v| *v = m2 - (m2 - *v) * s);
        }
        let total: f64 = u.iter().sum();
        let probs: Vec<f64> = u.iter().map(|v| v / total).collect();
        out.push(Cell {
            id: format!("c{c}"),
            weight: w,
            dist: FiniteDistribution::new(support.clone(), probs)?,
            tags: tagged(&[("x", (c as f64 + 0.5) / cells as f64), ("b", (c % 2) as f64)]),
        });
    }
    ExactDataset::new(out)
}

/// Default atom grid for [`find_cvar_cxls_violation`].
pub const CVAR_SEARCH_ATOMS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];
/// Default mass grid for [`find_cvar_cxls_violation`].
pub const CVAR_SEARCH_PROBS: [f64; 4] = [0.25, 0.5, 0.75, 1.0];

/// Two distributions with equal CVaR whose even mixture has a different
/// CVaR.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CvarWitness {
    pub p1: FiniteDistribution,
    pub p2: FiniteDistribution,
    pub lambda: f64,
    pub cvar1: f64,
    pub cvar2: f64,
    pub cvar_mix: f64,
}

/// Exhaustive search over distributions with at most three atoms from
/// `atom_grid` and masses from `prob_grid`. Candidates are enumerated by
/// atom set (ascending, lexicographic) then by mass vector; the first
/// qualifying pair `(i < j)` is returned.
pub fn find_cvar_cxls_violation(tau: f64, atom_grid: &[f64], prob_grid: &[f64]) -> Result<CvarWitness> {
    if !(0.0..1.0).contains(&tau) {
        return Err(Error::InvalidParameter(format!("tau must lie in [0, 1), got {tau}")));
    }
    let mut atoms: Vec<f64> = atom_grid.to_vec();
    atoms.sort_by(f64::total_cmp);
    atoms.dedup();
    let probs: Vec<f64> = prob_grid.iter().copied().filter(|&p| p > 0.0).collect();
    let mut candidates: Vec<FiniteDistribution> = Vec::new();
    let n = atoms.len();
    let mut subsets: Vec<Vec<usize>> = Vec::new();
    for i in 0..n {
        subsets.push(vec![i]);
        for j in i + 1..n {
            subsets.push(vec![i, j]);
            for k in j + 1..n {
                subsets.push(vec![i, j, k]);
            }
        }
    }
    subsets.sort_by_key(|s| s.len());
    for s in &subsets {
        let mut assign = vec![0usize; s.len()];
        loop {
            let ps: Vec<f64> = assign.iter().map(|&i| probs[i]).collect();
            if (ps.iter().sum::<f64>() - 1.0).abs() <= 1e-12 {
                let support = s.iter().map(|&i| atoms[i]).collect();
                candidates.push(FiniteDistribution::new(support, ps)?);
            }
            let mut pos = 0;
            loop {
                if pos == assign.len() {
                    break;
                }
                assign[pos] += 1;
                if assign[pos] < probs.len() {
                    break;
                }
                assign[pos] = 0;
                pos += 1;
            }
            if pos == assign.len() {
                break;
            }
        }
    }
    let cvar = |d: &FiniteDistribution| {
        if tau == 0.0 {
            d.mean()
        } else {
            Functional::Cvar { tau }.eval(d)
        }
    };
    let values: Vec<f64> = candidates.iter().map(cvar).collect();
    for i in 0..candidates.len() {
        for j in i + 1..candidates.len() {
            if (values[i] - values[j]).abs() > 1e-9 || candidates[i] == candidates[j] {
                continue;
            }
            let mix = FiniteDistribution::mixture([(0.5, &candidates[i]), (0.5, &candidates[j])])?;
            let cm = cvar(&mix);
            if (cm - values[i]).abs() > 1e-3 {
                return Ok(CvarWitness {
                    p1: candidates[i].clone(),
                    p2: candidates[j].clone(),
                    lambda: 0.5,
                    cvar1: values[i],
                    cvar2: values[j],
                    cvar_mix: cm,
                });
            }
        }
    }
    Err(Error::NotFound)
}
