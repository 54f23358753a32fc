//! Adversaries for the online protocol.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Transcript;
use crate::error::{Error, Result};
use crate::properties::FiniteDistribution;

/// What the adversary commits to in one round.
#[derive(Clone, Debug, PartialEq)]
pub struct AdversaryMove {
    pub cell: String,
    /// Membership in each group of the run, in group order.
    pub membership: Vec<bool>,
    pub dist: FiniteDistribution,
    /// Lipschitz constant of `γ ↦ V(γ, Y_t)` for this round's distribution.
    pub lipschitz: f64,
}

pub trait Adversary: Send {
    fn next(&mut self, t: usize, history: &Transcript) -> Result<AdversaryMove>;
    /// Declared average Lipschitz constant over the run.
    fn avg_lipschitz(&self) -> f64;
}

/// Label density on `[0, 1]`, discretized onto a label grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum DensitySpec {
    Uniform,
    /// `1 + amplitude·sin(2π y)`
    Sinusoid {
        amplitude: f64,
    },
    /// `inside` on `[center − half_width, center + half_width]`, `outside` elsewhere.
    Window {
        center: f64,
        half_width: f64,
        inside: f64,
        outside: f64,
    },
}

impl DensitySpec {
    fn density(&self, y: f64) -> f64 {
        match *self {
            DensitySpec::Uniform => 1.0,
            DensitySpec::Sinusoid { amplitude } => 1.0 + amplitude * (2.0 * std::f64::consts::PI * y).sin(),
            DensitySpec::Window { center, half_width, inside, outside } => {
                if (y - center).abs() <= half_width {
                    inside
                } else {
                    outside
                }
            }
        }
    }

    /// Largest density value, the Lipschitz constant of the quantile id.
    pub fn max_density(&self) -> f64 {
        match *self {
            DensitySpec::Uniform => 1.0,
            DensitySpec::Sinusoid { amplitude } => 1.0 + amplitude.abs(),
            DensitySpec::Window { inside, outside, .. } => inside.max(outside),
        }
    }

    /// Mass proportional to the density at each label grid point.
    pub fn discretize(&self, label_grid: &[f64]) -> Result<FiniteDistribution> {
        let raw: Vec<f64> = label_grid.iter().map(|&y| self.density(y)).collect();
        if raw.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::Adversary(format!("density {self:?} is negative somewhere")));
        }
        let s: f64 = raw.iter().sum();
        FiniteDistribution::new(label_grid.to_vec(), raw.iter().map(|v| v / s).collect())
    }
}

/// A context the adversary can present: a cell id and its groups.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextSpec {
    pub cell: String,
    pub groups: Vec<String>,
}

/// Groups `all, g1, g2, g3` and five contexts covering every group.
pub fn default_contexts() -> (Vec<String>, Vec<ContextSpec>) {
    let ids = ["all", "g1", "g2", "g3"].map(String::from).to_vec();
    let ctx = |cell: &str, gs: &[&str]| ContextSpec {
        cell: cell.into(),
        groups: std::iter::once("all").chain(gs.iter().copied()).map(String::from).collect(),
    };
    let contexts = vec![
        ctx("c0", &["g1"]),
        ctx("c1", &["g1", "g2"]),
        ctx("c2", &["g2"]),
        ctx("c3", &["g2", "g3"]),
        ctx("c4", &["g3"]),
    ];
    (ids, contexts)
}

/// Adversary configuration: a label law per phase and the contexts it
/// draws uniformly from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum AdversarySpec {
    Iid {
        density: DensitySpec,
    },
    /// `first` before round `switch_at` (default `T/2`), `second` after.
    TwoPhase {
        first: DensitySpec,
        second: DensitySpec,
        switch_at: Option<usize>,
    },
}

impl AdversarySpec {
    /// Density `1 + 0.5·sin(2πy)`.
    pub fn sinusoid_iid() -> Self {
        AdversarySpec::Iid { density: DensitySpec::Sinusoid { amplitude: 0.5 } }
    }

    /// Median 0.3 for the first half and 0.7 for the second.
    pub fn shifting_median() -> Self {
        let window = |center| DensitySpec::Window { center, half_width: 1.0 / 6.0, inside: 2.0, outside: 0.5 };
        AdversarySpec::TwoPhase { first: window(0.7 / 3.0), second: window(2.3 / 3.0), switch_at: None }
    }

    pub fn declared_lipschitz(&self) -> f64 {
        match self {
            AdversarySpec::Iid { density } => density.max_density(),
            AdversarySpec::TwoPhase { first, second, .. } => first.max_density().max(second.max_density()),
        }
    }

    /// Builds the adversary for `group_ids`; context draws use `seed`.
    pub fn build(
        &self,
        group_ids: &[String],
        contexts: &[ContextSpec],
        label_grid: &[f64],
        horizon: usize,
        seed: u64,
    ) -> Result<Box<dyn Adversary>> {
        if contexts.is_empty() {
            return Err(Error::Adversary("no contexts".into()));
        }
        let mut ctx = Vec::new();
        for c in contexts {
            let mut membership = vec![false; group_ids.len()];
            for g in &c.groups {
                let i = group_ids
                    .iter()
                    .position(|x| x == g)
                    .ok_or_else(|| Error::Adversary(format!("context `{}` names unknown group `{g}`", c.cell)))?;
                membership[i] = true;
            }
            ctx.push((c.cell.clone(), membership));
        }
        let (phases, lipschitz) = match self {
            AdversarySpec::Iid { density } => {
                (vec![(0, density.discretize(label_grid)?, density.max_density())], density.max_density())
            }
            AdversarySpec::TwoPhase { first, second, switch_at } => {
                let at = switch_at.unwrap_or(horizon / 2);
                (
                    vec![
                        (0, first.discretize(label_grid)?, first.max_density()),
                        (at, second.discretize(label_grid)?, second.max_density()),
                    ],
                    self.declared_lipschitz(),
                )
            }
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        Ok(Box::new(PhasedAdversary { contexts: ctx, phases, lipschitz, rng }))
    }
}

/// Label law switching at fixed rounds; contexts drawn uniformly.
pub struct PhasedAdversary {
    contexts: Vec<(String, Vec<bool>)>,
    /// `(first round, distribution, Lipschitz constant)`, ascending.
    phases: Vec<(usize, FiniteDistribution, f64)>,
    lipschitz: f64,
    rng: ChaCha8Rng,
}

impl Adversary for PhasedAdversary {
    fn next(&mut self, t: usize, _history: &Transcript) -> Result<AdversaryMove> {
        let (cell, membership) = self.contexts[self.rng.gen_range(0..self.contexts.len())].clone();
        let (_, dist, l) = self.phases.iter().rev().find(|p| p.0 <= t).expect("phase 0 starts at round 0");
        Ok(AdversaryMove { cell, membership, dist: dist.clone(), lipschitz: *l })
    }

    fn avg_lipschitz(&self) -> f64 {
        self.lipschitz
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::properties::lower_quantile;

    fn grid() -> Vec<f64> {
        (0..=100).map(|k| k as f64 / 100.0).collect()
    }

    #[test]
    fn shifting_median_phases() {
        let AdversarySpec::TwoPhase { first, second, .. } = AdversarySpec::shifting_median() else { panic!() };
        let a = first.discretize(&grid()).unwrap();
        let b = second.discretize(&grid()).unwrap();
        assert!((lower_quantile(&a, 0.5) - 0.3).abs() <= 0.011);
        assert!((lower_quantile(&b, 0.5) - 0.7).abs() <= 0.011);
        assert_eq!(AdversarySpec::shifting_median().declared_lipschitz(), 2.0);
    }

    #[test]
    fn sinusoid_is_density_bounded() {
        let d = AdversarySpec::sinusoid_iid();
        assert_eq!(d.declared_lipschitz(), 1.5);
        let AdversarySpec::Iid { density } = d else { panic!() };
        let dist = density.discretize(&grid()).unwrap();
        assert!(dist.probs().iter().all(|&p| p <= 1.5 / 100.0));
    }
}
