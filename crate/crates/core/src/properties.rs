//! Identification functions, scoring functions and the built-in properties.
//!
//! Everything here is an immutable value. A [`PropertySpec`] bundles an
//! identification function `V(γ, y)` with a score `S` satisfying `∂S/∂γ = V`,
//! plus the Lipschitz metadata the learners consume. A
//! [`ConditionalIdFamily`] describes the second coordinate of a Bayes pair:
//! for every level `γ⁰` of the outer property it yields an identification
//! function in `γ¹`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Labels closer than this are merged into one atom.
pub const ATOM_MERGE_TOL: f64 = 1e-12;

const PROB_SUM_TOL: f64 = 1e-9;

/// A probability distribution with finitely many atoms in `[0, 1]`.
///
/// Support is strictly increasing, every atom has positive mass and the
/// masses sum to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDistribution", into = "RawDistribution")]
pub struct FiniteDistribution {
    support: Vec<f64>,
    probs: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawDistribution {
    support: Vec<f64>,
    probs: Vec<f64>,
}

impl TryFrom<RawDistribution> for FiniteDistribution {
    type Error = Error;
    fn try_from(raw: RawDistribution) -> Result<Self> {
        FiniteDistribution::new(raw.support, raw.probs)
    }
}

impl From<FiniteDistribution> for RawDistribution {
    fn from(d: FiniteDistribution) -> Self {
        RawDistribution { support: d.support, probs: d.probs }
    }
}

impl FiniteDistribution {
    /// Validates, sorts and merges atoms. Masses may sum to one within 1e-9;
    /// they are renormalized when they do not sum to exactly one.
    pub fn new(support: Vec<f64>, probs: Vec<f64>) -> Result<Self> {
        if support.len() != probs.len() {
            return Err(Error::InvalidDistribution(format!(
                "{} support points but {} probabilities",
                support.len(),
                probs.len()
            )));
        }
        if support.is_empty() {
            return Err(Error::InvalidDistribution("empty support".into()));
        }
        for &y in &support {
            if !(0.0..=1.0).contains(&y) {
                return Err(Error::LabelOutOfRange { value: y, row: None });
            }
        }
        for &p in &probs {
            if !p.is_finite() || p < 0.0 {
                return Err(Error::InvalidDistribution(format!("bad probability {p}")));
            }
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::InvalidDistribution(format!("probabilities sum to {total}, expected 1")));
        }
        let mut atoms: Vec<(f64, f64)> = support.into_iter().zip(probs).collect();
        Ok(Self::from_atoms(&mut atoms, total))
    }

    fn from_atoms(atoms: &mut [(f64, f64)], total: f64) -> Self {
        atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut support: Vec<f64> = Vec::with_capacity(atoms.len());
        let mut probs: Vec<f64> = Vec::with_capacity(atoms.len());
        for &(y, p) in atoms.iter() {
            if p == 0.0 {
                continue;
            }
            match support.last() {
                Some(&last) if y - last <= ATOM_MERGE_TOL => {
                    *probs.last_mut().unwrap() += p;
                }
                _ => {
                    support.push(y);
                    probs.push(p);
                }
            }
        }
        if (total - 1.0).abs() > 1e-12 {
            for p in &mut probs {
                *p /= total;
            }
        }
        FiniteDistribution { support, probs }
    }

    /// Point mass at `y`.
    pub fn point(y: f64) -> Result<Self> {
        Self::new(vec![y], vec![1.0])
    }

    /// Equal mass on every given label.
    pub fn uniform(labels: &[f64]) -> Result<Self> {
        let n = labels.len() as f64;
        Self::new(labels.to_vec(), vec![1.0 / n; labels.len()])
    }

    /// Weighted mixture. Weights must be non-negative with a positive sum;
    /// they are renormalized.
    pub fn mixture<'a, I>(parts: I) -> Result<Self>
    where
        I: IntoIterator<Item = (f64, &'a FiniteDistribution)>,
    {
        let mut atoms = Vec::new();
        let mut total = 0.0;
        for (w, d) in parts {
            if !(w >= 0.0) {
                return Err(Error::InvalidDistribution(format!("bad mixture weight {w}")));
            }
            total += w;
            for (y, p) in d.iter() {
                atoms.push((y, w * p));
            }
        }
        if !(total > 0.0) {
            return Err(Error::EmptyRegion("mixture with zero total weight".into()));
        }
        let mass: f64 = atoms.iter().map(|a| a.1).sum();
        Ok(Self::from_atoms(&mut atoms, mass))
    }

    pub fn support(&self) -> &[f64] {
        &self.support
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.support.iter().copied().zip(self.probs.iter().copied())
    }

    pub fn mean(&self) -> f64 {
        self.iter().map(|(y, p)| p * y).sum()
    }

    /// `F(y) = P[Y ≤ y]`.
    pub fn cdf(&self, y: f64) -> f64 {
        self.iter().take_while(|&(s, _)| s <= y).map(|(_, p)| p).sum()
    }

    pub fn expectation(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.iter().map(|(y, p)| p * f(y)).sum()
    }
}

/// Anything that acts as an identification function on `[0, 1]²` together
/// with its antiderivative in `γ`.
pub trait IdFunction: Send + Sync {
    fn id(&self, gamma: f64, y: f64) -> f64;
    fn score(&self, gamma: f64, y: f64) -> f64;

    fn expected_id(&self, gamma: f64, dist: &FiniteDistribution) -> f64 {
        dist.iter().map(|(y, p)| p * self.id(gamma, y)).sum()
    }

    fn expected_score(&self, gamma: f64, dist: &FiniteDistribution) -> f64 {
        dist.iter().map(|(y, p)| p * self.score(gamma, y)).sum()
    }
}

/// Scoring functions used by the built-ins.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Score {
    /// `(γ − y)² / 2`
    HalfSquared,
    /// `(γ − y)²`
    Squared,
    /// `(1 − τ)γ + (y − γ)₊`
    Pinball { tau: f64 },
    /// `γ + (y − γ)₊ / (1 − τ)`
    RescaledPinball { tau: f64 },
}

impl Score {
    pub fn eval(&self, gamma: f64, y: f64) -> f64 {
        match *self {
            Score::HalfSquared => 0.5 * (gamma - y) * (gamma - y),
            Score::Squared => (gamma - y) * (gamma - y),
            Score::Pinball { tau } => (1.0 - tau) * gamma + (y - gamma).max(0.0),
            Score::RescaledPinball { tau } => gamma + (y - gamma).max(0.0) / (1.0 - tau),
        }
    }

    /// Lipschitz constant in `γ` over `[0, 1]²`.
    pub fn lipschitz(&self) -> f64 {
        match *self {
            Score::HalfSquared => 1.0,
            Score::Squared => 2.0,
            Score::Pinball { tau } => tau.max(1.0 - tau),
            Score::RescaledPinball { tau } => (tau / (1.0 - tau)).max(1.0),
        }
    }

    /// `(inf S, sup S)` over `[0, 1]²`.
    pub fn range(&self) -> (f64, f64) {
        match *self {
            Score::HalfSquared => (0.0, 0.5),
            Score::Squared => (0.0, 1.0),
            Score::Pinball { .. } => (0.0, 1.0),
            Score::RescaledPinball { tau } => (0.0, 1.0 / (1.0 - tau)),
        }
    }
}

/// `γ ↦ γ + (y − γ)₊ / (1 − τ)`, the score whose Bayes risk is CVaR.
pub fn rescaled_pinball_score(tau: f64) -> Result<Score> {
    check_tau(tau)?;
    Ok(Score::RescaledPinball { tau })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PropertyKind {
    Mean,
    Quantile { tau: f64 },
}

/// A one-dimensional elicitable property with its calibration constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropertySpec {
    pub name: String,
    pub kind: PropertyKind,
    pub score: Score,
    /// `L`: Lipschitz constant of `γ ↦ V(γ, Y)` on the data's mixtures.
    pub lipschitz_l: f64,
    /// `L_a`: `|γ − Γ(Y)| ≤ L_a·|V(γ, Y)|`.
    pub anti_lipschitz_la: Option<f64>,
    /// `C`: bound on `|V|`.
    pub id_bound_c: f64,
    /// `B = sup S − inf S`.
    pub score_range_b: f64,
}

impl PropertySpec {
    /// The functional this property identifies.
    pub fn functional(&self) -> Functional {
        match self.kind {
            PropertyKind::Mean => Functional::Mean,
            PropertyKind::Quantile { tau } => Functional::Quantile { tau },
        }
    }
}

impl IdFunction for PropertySpec {
    fn id(&self, gamma: f64, y: f64) -> f64 {
        match self.kind {
            PropertyKind::Mean => gamma - y,
            PropertyKind::Quantile { tau } => {
                if y <= gamma {
                    1.0 - tau
                } else {
                    -tau
                }
            }
        }
    }

    fn score(&self, gamma: f64, y: f64) -> f64 {
        self.score.eval(gamma, y)
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("tau must lie in (0, 1), got {tau}")))
    }
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")))
    }
}

/// Mean with the halved squared loss: `V = γ − y`, `L = L_a = C = 1`, `B = 1/2`.
pub fn mean_property() -> PropertySpec {
    PropertySpec {
        name: "mean".into(),
        kind: PropertyKind::Mean,
        score: Score::HalfSquared,
        lipschitz_l: 1.0,
        anti_lipschitz_la: Some(1.0),
        id_bound_c: 1.0,
        score_range_b: 0.5,
    }
}

/// τ-quantile with the pinball loss. `m2` is the caller's density upper
/// bound and becomes `L`.
pub fn quantile_property(tau: f64, m2: f64) -> Result<PropertySpec> {
    check_tau(tau)?;
    check_positive("m2", m2)?;
    Ok(PropertySpec {
        name: format!("quantile(tau={tau})"),
        kind: PropertyKind::Quantile { tau },
        score: Score::Pinball { tau },
        lipschitz_l: m2,
        anti_lipschitz_la: None,
        id_bound_c: tau.max(1.0 - tau),
        score_range_b: 1.0,
    })
}

/// Same as [`quantile_property`] with the density lower bound `m1`
/// recorded as `L_a = 1/m1`.
pub fn quantile_property_bounded(tau: f64, m1: f64, m2: f64) -> Result<PropertySpec> {
    check_positive("m1", m1)?;
    if m1 > m2 {
        return Err(Error::InvalidParameter(format!("m1 = {m1} exceeds m2 = {m2}")));
    }
    if m1 > 1.0 || m2 < 1.0 {
        return Err(Error::InvalidParameter(format!("no density on [0, 1] lies between {m1} and {m2}")));
    }
    let mut spec = quantile_property(tau, m2)?;
    spec.anti_lipschitz_la = Some(1.0 / m1);
    Ok(spec)
}

/// Second coordinate of a Bayes pair: `V¹_{γ⁰}(γ¹, y) = γ¹ − S(γ⁰, y)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionalIdFamily {
    pub name: String,
    pub outer: PropertySpec,
    /// Score whose Bayes risk is the second property.
    pub pair_score: Score,
    /// `L_c`: Lipschitz constant of `γ⁰ ↦ V¹_{γ⁰}`.
    pub cross_lipschitz_lc: f64,
    /// `L¹`
    pub level_lipschitz_l1: f64,
    /// `B¹`
    pub cond_score_range_b1: f64,
    /// Reported alongside the pair; `None` when only the id function is known.
    pub inner_functional: Option<Functional>,
}

impl ConditionalIdFamily {
    pub fn cond_id(&self, gamma0: f64, gamma1: f64, y: f64) -> f64 {
        gamma1 - self.pair_score.eval(gamma0, y)
    }

    pub fn cond_score(&self, gamma0: f64, gamma1: f64, y: f64) -> f64 {
        let d = gamma1 - self.pair_score.eval(gamma0, y);
        0.5 * d * d
    }

    /// The identification function on the level set `Γ⁰ = γ⁰`.
    pub fn level(&self, gamma0: f64) -> LevelId<'_> {
        LevelId { family: self, gamma0 }
    }

    /// Bayes risk `S(Γ⁰(P), P)`, the value the second coordinate targets.
    pub fn bayes_risk(&self, dist: &FiniteDistribution) -> f64 {
        let g0 = self.outer.functional().eval(dist);
        dist.expectation(|y| self.pair_score.eval(g0, y))
    }
}

/// [`ConditionalIdFamily`] frozen at one outer level.
#[derive(Clone, Copy, Debug)]
pub struct LevelId<'a> {
    pub family: &'a ConditionalIdFamily,
    pub gamma0: f64,
}

impl IdFunction for LevelId<'_> {
    fn id(&self, gamma: f64, y: f64) -> f64 {
        self.family.cond_id(self.gamma0, gamma, y)
    }

    fn score(&self, gamma: f64, y: f64) -> f64 {
        self.family.cond_score(self.gamma0, gamma, y)
    }
}

/// Bayes pair of `base` using its own score.
pub fn bayes_pair_family(base: PropertySpec) -> ConditionalIdFamily {
    let score = base.score;
    bayes_pair_family_with(base, score)
}

/// Bayes pair of `base` with an explicit pair score.
pub fn bayes_pair_family_with(base: PropertySpec, pair_score: Score) -> ConditionalIdFamily {
    let (lo, hi) = pair_score.range();
    let spread = hi.max(1.0 - lo);
    let inner_functional = match (base.kind, pair_score) {
        (PropertyKind::Mean, Score::Squared) => Some(Functional::Variance),
        (PropertyKind::Quantile { tau }, Score::RescaledPinball { tau: t2 }) if tau == t2 => {
            Some(Functional::Cvar { tau })
        }
        _ => None,
    };
    ConditionalIdFamily {
        name: format!("{}_bayes_pair", base.name),
        outer: base,
        pair_score,
        cross_lipschitz_lc: pair_score.lipschitz(),
        level_lipschitz_l1: 1.0,
        cond_score_range_b1: 0.5 * spread * spread,
        inner_functional,
    }
}

/// (mean, variance): the squared loss is unhalved so that the second
/// coordinate is the variance itself; `L_c = 2`.
pub fn mean_variance_family() -> ConditionalIdFamily {
    let mut fam = bayes_pair_family_with(mean_property(), Score::Squared);
    fam.name = "mean_variance".into();
    fam
}

/// (τ-quantile, CVaR_τ) under densities in `[m1, m2]`.
pub fn quantile_cvar_family(tau: f64, m1: f64, m2: f64) -> Result<ConditionalIdFamily> {
    let base = quantile_property_bounded(tau, m1, m2)?;
    let mut fam = bayes_pair_family_with(base, rescaled_pinball_score(tau)?);
    fam.name = format!("quantile_cvar(tau={tau})");
    Ok(fam)
}

/// Distributional functionals evaluated exactly on finite distributions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Functional {
    Mean,
    /// `inf{y : F(y) ≥ τ}`
    Quantile {
        tau: f64,
    },
    Variance,
    /// `q_τ + E(y − q_τ)₊ / (1 − τ)`
    Cvar {
        tau: f64,
    },
    /// `c·inf{F ≥ τ} + (1 − c)·inf{F > τ}`
    QuantileMix {
        tau: f64,
        c: f64,
    },
    /// `c·inf{F > 0} + (1 − c)·inf{F = 1}`
    SupportMix {
        c: f64,
    },
}

impl Functional {
    pub fn eval(&self, dist: &FiniteDistribution) -> f64 {
        match *self {
            Functional::Mean => dist.mean(),
            Functional::Quantile { tau } => lower_quantile(dist, tau),
            Functional::Variance => {
                let mu = dist.mean();
                dist.expectation(|y| (y - mu) * (y - mu))
            }
            Functional::Cvar { tau } => {
                let q = lower_quantile(dist, tau);
                q + dist.expectation(|y| (y - q).max(0.0)) / (1.0 - tau)
            }
            Functional::QuantileMix { tau, c } => c * lower_quantile(dist, tau) + (1.0 - c) * upper_quantile(dist, tau),
            Functional::SupportMix { c } => c * dist.support()[0] + (1.0 - c) * dist.support()[dist.len() - 1],
        }
    }
}

/// Smallest support point with CDF ≥ τ. Cumulative sums are compared with a
/// 1e-12 slack so that e.g. two atoms of mass 0.25 reach τ = 0.5.
pub fn lower_quantile(dist: &FiniteDistribution, tau: f64) -> f64 {
    let mut acc = 0.0;
    for (y, p) in dist.iter() {
        acc += p;
        if acc >= tau - 1e-12 {
            return y;
        }
    }
    dist.support()[dist.len() - 1]
}

/// Smallest support point with CDF > τ.
pub fn upper_quantile(dist: &FiniteDistribution, tau: f64) -> f64 {
    let mut acc = 0.0;
    for (y, p) in dist.iter() {
        acc += p;
        if acc > tau + 1e-12 {
            return y;
        }
    }
    dist.support()[dist.len() - 1]
}

/// A property selected by name in configs.
#[derive(Clone, Debug, PartialEq)]
pub enum PropertySelection {
    Single(PropertySpec),
    Pair(ConditionalIdFamily),
}

impl fmt::Display for PropertySelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PropertySelection::Single(p) => write!(f, "{}", p.name),
            PropertySelection::Pair(fam) => write!(f, "{}", fam.name),
        }
    }
}

/// Parses `mean`, `quantile(tau=…, m2=…)`, `mean_variance` and
/// `quantile_cvar(tau=…, m1=…, m2=…)`.
pub fn parse_property(text: &str) -> Result<PropertySelection> {
    let text = text.trim();
    let (head, args) = match text.find('(') {
        Some(i) => {
            let rest = text[i + 1..]
                .strip_suffix(')')
                .ok_or_else(|| Error::InvalidParameter(format!("unbalanced parentheses in `{text}`")))?;
            (text[..i].trim(), parse_args(rest)?)
        }
        None => (text, Vec::new()),
    };
    let get = |key: &str| -> Result<f64> {
        args.iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::InvalidParameter(format!("`{head}` needs `{key}=`")))
    };
    let allow = |keys: &[&str]| -> Result<()> {
        for (k, _) in &args {
            if !keys.contains(&k.as_str()) {
                return Err(Error::InvalidParameter(format!("unknown argument `{k}` for `{head}`")));
            }
        }
        Ok(())
    };
    match head {
        "mean" => {
            allow(&[])?;
            Ok(PropertySelection::Single(mean_property()))
        }
        "quantile" => {
            allow(&["tau", "m2", "m1"])?;
            let spec = match args.iter().any(|(k, _)| k == "m1") {
                true => quantile_property_bounded(get("tau")?, get("m1")?, get("m2")?)?,
                false => quantile_property(get("tau")?, get("m2")?)?,
            };
            Ok(PropertySelection::Single(spec))
        }
        "mean_variance" => {
            allow(&[])?;
            Ok(PropertySelection::Pair(mean_variance_family()))
        }
        "quantile_cvar" => {
            allow(&["tau", "m1", "m2"])?;
            Ok(PropertySelection::Pair(quantile_cvar_family(get("tau")?, get("m1")?, get("m2")?)?))
        }
        other => Err(Error::InvalidParameter(format!("unknown property `{other}`"))),
    }
}

fn parse_args(s: &str) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, v) =
            part.split_once('=').ok_or_else(|| Error::InvalidParameter(format!("expected key=value, got `{part}`")))?;
        let v: f64 =
            v.trim().parse().map_err(|_| Error::InvalidParameter(format!("`{}` is not a number", v.trim())))?;
        out.push((k.trim().to_string(), v));
    }
    Ok(out)
}
