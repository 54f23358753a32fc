//! Exponential-weights learner for online minimax multiobjective games.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::game::{solve_stage_game, Matrix};
use crate::error::{Error, Result};

/// `√(ln d / (4T·C²))`
pub fn amf_eta(d: usize, t: usize, c: f64) -> f64 {
    ((d as f64).ln() / (4.0 * t as f64 * c * c)).sqrt()
}

/// Softmax weights over cumulative per-coordinate losses.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpWeights {
    pub cumulative: Vec<f64>,
    pub eta: f64,
}

impl ExpWeights {
    pub fn new(d: usize, eta: f64) -> Self {
        ExpWeights { cumulative: vec![0.0; d], eta }
    }

    /// `χ_j ∝ exp(η·Σ_s ℓ_j^s)`
    pub fn weights(&self) -> Vec<f64> {
        let mx = self.cumulative.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut w: Vec<f64> = self.cumulative.iter().map(|c| (self.eta * (c - mx)).exp()).collect();
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x /= s);
        w
    }

    pub fn update(&mut self, losses: &[f64]) {
        for (c, l) in self.cumulative.iter_mut().zip(losses) {
            *c += l;
        }
    }
}

/// `ℓ_j(x, y) = g_jᵀx + xᵀHy` on simplices `Δ_a × Δ_b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BilinearGame {
    /// `d × a`
    pub g: Vec<Vec<f64>>,
    /// `a × b`
    pub h: Vec<Vec<f64>>,
}

impl BilinearGame {
    /// Entries uniform in `[−c/2, c/2]`, so every loss lies in `[−c, c]`.
    pub fn random<R: Rng>(rng: &mut R, d: usize, a: usize, b: usize, c: f64) -> Self {
        let mut draw = |n| (0..n).map(|_| rng.gen_range(-0.5 * c..=0.5 * c)).collect::<Vec<f64>>();
        let g = (0..d).map(|_| draw(a)).collect();
        let h = (0..a).map(|_| draw(b)).collect();
        BilinearGame { g, h }
    }

    pub fn constant(d: usize, a: usize, b: usize, value: f64) -> Self {
        BilinearGame { g: vec![vec![value; a]; d], h: vec![vec![0.0; b]; a] }
    }

    pub fn d(&self) -> usize {
        self.g.len()
    }

    pub fn a(&self) -> usize {
        self.h.len()
    }

    pub fn b(&self) -> usize {
        self.h.first().map_or(0, Vec::len)
    }

    fn check(&self) -> Result<()> {
        let (a, b) = (self.a(), self.b());
        if self.d() == 0
            || a == 0
            || b == 0
            || self.g.iter().any(|r| r.len() != a)
            || self.h.iter().any(|r| r.len() != b)
        {
            return Err(Error::InvalidParameter("bilinear game has inconsistent shape".into()));
        }
        if a > 10 || b > 10 {
            return Err(Error::InvalidParameter("bilinear games are limited to 10 strategies per side".into()));
        }
        Ok(())
    }

    /// `ℓ_j(x, e_k)`
    pub fn loss(&self, j: usize, x: &[f64], k: usize) -> f64 {
        (0..self.a()).map(|i| x[i] * (self.g[j][i] + self.h[i][k])).sum()
    }

    /// `sup_y min_x max_j ℓ_j(x, y)`.
    ///
    /// Because the `g_j` and `H` parts separate, this is the value of the
    /// matrix game with one column per pair `(j, k)` and entries
    /// `g_j[i] + H[i][k]`.
    pub fn amf_value(&self) -> Result<f64> {
        let (a, b, d) = (self.a(), self.b(), self.d());
        let mut m = Vec::with_capacity(a * d * b);
        for i in 0..a {
            for j in 0..d {
                for k in 0..b {
                    m.push(self.g[j][i] + self.h[i][k]);
                }
            }
        }
        Ok(solve_stage_game(Matrix::new(&m, a, d * b))?.value)
    }

    /// `argmin_x max_y Σ_j χ_j ℓ_j(x, y)`
    pub fn learner_play(&self, chi: &[f64]) -> Result<Vec<f64>> {
        let (a, b) = (self.a(), self.b());
        let mut m = Vec::with_capacity(a * b);
        for i in 0..a {
            let base: f64 = (0..self.d()).map(|j| chi[j] * self.g[j][i]).sum();
            for k in 0..b {
                m.push(base + self.h[i][k]);
            }
        }
        Ok(solve_stage_game(Matrix::new(&m, a, b))?.row)
    }

    /// Pure response maximizing the worst coordinate; ties to the lowest index.
    pub fn best_response(&self, x: &[f64]) -> usize {
        let mut best = 0;
        let mut best_v = f64::NEG_INFINITY;
        for k in 0..self.b() {
            let v = (0..self.d()).map(|j| self.loss(j, x, k)).fold(f64::NEG_INFINITY, f64::max);
            if v > best_v {
                best_v = v;
                best = k;
            }
        }
        best
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmfReport {
    pub t: usize,
    pub d: usize,
    pub c: f64,
    pub eta: f64,
    /// `Σ_t ℓ_j(x^t, y^t)` per coordinate.
    pub cumulative: Vec<f64>,
    /// `Σ_t w_A^t`
    pub amf_total: f64,
    /// `max_j Σ_t ℓ_j − Σ_t w_A^t`
    pub regret: f64,
    /// `4C√(T ln d)`
    pub bound: f64,
}

impl AmfReport {
    pub fn within_bound(&self) -> bool {
        self.regret <= self.bound
    }
}

/// Plays the exponential-weights learner against a best-responding
/// adversary over `games`, one per round.
pub fn run_amf_matrix_game(games: &[BilinearGame], c: f64) -> Result<AmfReport> {
    let t = games.len();
    if t == 0 {
        return Err(Error::InvalidParameter("need at least one round".into()));
    }
    let d = games[0].d();
    for g in games {
        g.check()?;
        if g.d() != d {
            return Err(Error::InvalidParameter("every round needs the same number of objectives".into()));
        }
    }
    let eta = amf_eta(d, t, c);
    let mut learner = ExpWeights::new(d, eta);
    let mut amf_total = 0.0;
    for game in games {
        let chi = learner.weights();
        let x = game.learner_play(&chi)?;
        let k = game.best_response(&x);
        let losses: Vec<f64> = (0..d).map(|j| game.loss(j, &x, k)).collect();
        learner.update(&losses);
        amf_total += game.amf_value()?;
    }
    let cumulative = learner.cumulative;
    let regret = cumulative.iter().copied().fold(f64::NEG_INFINITY, f64::max) - amf_total;
    let bound = 4.0 * c * (t as f64 * (d as f64).ln()).sqrt();
    Ok(AmfReport { t, d, c, eta, cumulative, amf_total, regret, bound })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn weights_normalize() {
        let mut w = ExpWeights::new(4, 0.3);
        w.update(&[1.0, -2.0, 500.0, 0.0]);
        let chi = w.weights();
        assert!((chi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(chi.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn trivial_games_have_zero_regret() {
        let zero = vec![BilinearGame::constant(3, 2, 2, 0.0); 50];
        assert_eq!(run_amf_matrix_game(&zero, 1.0).unwrap().regret, 0.0);
        let c = vec![BilinearGame::constant(3, 2, 2, 0.25); 50];
        assert!(run_amf_matrix_game(&c, 1.0).unwrap().regret.abs() < 1e-12);
    }

    #[test]
    fn amf_value_sandwich() {
        // sup over a (λ, y) grid is a lower bound, min over an x grid an upper one
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let g = BilinearGame::random(&mut rng, 2, 2, 2, 1.0);
            let w = g.amf_value().unwrap();
            let steps = 200;
            let mut lower = f64::NEG_INFINITY;
            for s in 0..=steps {
                let y = s as f64 / steps as f64;
                let yv = [y, 1.0 - y];
                // inner min over x of max_j: x is a point on [0, 1]
                let mut inner = f64::INFINITY;
                for r in 0..=steps {
                    let x = [r as f64 / steps as f64, 1.0 - r as f64 / steps as f64];
                    let worst = (0..2)
                        .map(|j| (0..2).map(|k| yv[k] * g.loss(j, &x, k)).sum::<f64>())
                        .fold(f64::NEG_INFINITY, f64::max);
                    inner = inner.min(worst);
                }
                lower = lower.max(inner);
            }
            assert!((w - lower).abs() < 5e-3, "{w} vs {lower}");
        }
    }
}
