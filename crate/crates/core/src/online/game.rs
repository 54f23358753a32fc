//! Exact solver for finite zero-sum games.
//!
//! The row player minimizes `Pᵀ A q`. The matrix is shifted and scaled into
//! `[1, 2]` and the row player's problem `max Σu s.t. Bᵀu ≤ 1, u ≥ 0` is
//! solved with a dense tableau simplex; the column strategy is read off the
//! slack reduced costs. Every answer carries a duality-gap certificate
//! computed on the original matrix.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::error::{Error, Result};

/// Largest accepted duality gap.
pub const GAP_TOL: f64 = 1e-7;

const PIVOT_EPS: f64 = 1e-12;
const MW_ITERATIONS: usize = 200_000;

#[derive(Clone, Debug, PartialEq)]
pub struct GameSolution {
    /// Minimizing row strategy.
    pub row: Vec<f64>,
    /// Maximizing column strategy.
    pub col: Vec<f64>,
    /// `max_k (Pᵀ A)_k`, the value the row strategy guarantees.
    pub value: f64,
    /// `max_k (Pᵀ A)_k − min_i (A q)_i`
    pub gap: f64,
}

/// Row-major matrix view.
#[derive(Clone, Copy, Debug)]
pub struct Matrix<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
}

impl<'a> Matrix<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix shape");
        Matrix { data, rows, cols }
    }

    #[inline]
    pub fn at(&self, i: usize, k: usize) -> f64 {
        self.data[i * self.cols + k]
    }

    /// `max_k (Pᵀ A)_k`
    pub fn row_guarantee(&self, p: &[f64]) -> f64 {
        (0..self.cols)
            .map(|k| (0..self.rows).map(|i| p[i] * self.at(i, k)).sum::<f64>())
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// `min_i (A q)_i`
    pub fn col_guarantee(&self, q: &[f64]) -> f64 {
        (0..self.rows).map(|i| (0..self.cols).map(|k| self.at(i, k) * q[k]).sum::<f64>()).fold(f64::INFINITY, f64::min)
    }

    pub fn hash(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.rows.hash(&mut h);
        self.cols.hash(&mut h);
        for v in self.data {
            v.to_bits().hash(&mut h);
        }
        h.finish()
    }
}

/// Solves `min_P max_q Pᵀ A q` to within [`GAP_TOL`].
pub fn solve_stage_game(a: Matrix<'_>) -> Result<GameSolution> {
    if a.rows == 0 || a.cols == 0 {
        return Err(Error::InvalidParameter("empty game matrix".into()));
    }
    if a.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::SolverNonConvergence { hash: a.hash(), gap: f64::NAN });
    }
    let (reduced, owner) = dedup_columns(a);
    let b = Matrix::new(&reduced, a.rows, owner.len());
    let lo = b.data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = b.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 1e-15 * hi.abs().max(1.0) {
        let row = vec![1.0 / a.rows as f64; a.rows];
        let col = vec![1.0 / a.cols as f64; a.cols];
        return Ok(certify(a, row, col).expect("constant game"));
    }
    // row player's problem on the transpose: max 1ᵀu s.t. Bᵀu ≤ 1
    let mut scaled = vec![0.0; b.data.len()];
    for i in 0..b.rows {
        for k in 0..b.cols {
            scaled[k * b.rows + i] = (b.at(i, k) - lo) / (hi - lo) + 1.0;
        }
    }
    let expand = |q: Vec<f64>| {
        let mut full = vec![0.0; a.cols];
        for (k, &c) in owner.iter().enumerate() {
            full[c] = q[k];
        }
        full
    };
    for bland_only in [false, true] {
        if let Some((q, p)) = simplex(&scaled, owner.len(), a.rows, bland_only) {
            if let Some(sol) = certify(a, p, expand(q)) {
                return Ok(sol);
            }
        }
    }
    let (p, q) = multiplicative_weights(b);
    let (p, q) = (normalize(p), normalize(q).map(expand));
    if let (Some(p), Some(q)) = (p, q) {
        let gap = a.row_guarantee(&p) - a.col_guarantee(&q);
        match certify(a, p, q) {
            Some(sol) => Ok(sol),
            None => Err(Error::SolverNonConvergence { hash: a.hash(), gap }),
        }
    } else {
        Err(Error::SolverNonConvergence { hash: a.hash(), gap: f64::NAN })
    }
}

/// Distinct columns in first-appearance order, with each one's original index.
fn dedup_columns(a: Matrix<'_>) -> (Vec<f64>, Vec<usize>) {
    let mut keep: Vec<usize> = Vec::new();
    'outer: for k in 0..a.cols {
        for &j in &keep {
            if (0..a.rows).all(|i| a.at(i, k).to_bits() == a.at(i, j).to_bits()) {
                continue 'outer;
            }
        }
        keep.push(k);
    }
    let mut out = Vec::with_capacity(a.rows * keep.len());
    for i in 0..a.rows {
        for &k in &keep {
            out.push(a.at(i, k));
        }
    }
    (out, keep)
}

fn normalize(mut v: Vec<f64>) -> Option<Vec<f64>> {
    for x in &mut v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
    let s: f64 = v.iter().sum();
    if !(s > 0.0 && s.is_finite()) {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= s);
    Some(v)
}

fn certify(a: Matrix<'_>, p: Vec<f64>, q: Vec<f64>) -> Option<GameSolution> {
    let p = normalize(p)?;
    let q = normalize(q)?;
    let upper = a.row_guarantee(&p);
    let lower = a.col_guarantee(&q);
    let gap = upper - lower;
    (gap <= GAP_TOL).then_some(GameSolution { row: p, col: q, value: upper, gap })
}

/// `max 1ᵀw s.t. Bw ≤ 1, w ≥ 0` for positive `B`. Returns the dual and
/// primal solutions, unnormalized.
fn simplex(b: &[f64], m: usize, n: usize, bland_only: bool) -> Option<(Vec<f64>, Vec<f64>)> {
    let width = n + m + 1;
    let rhs = n + m;
    let mut t = vec![0.0; m * width];
    for i in 0..m {
        t[i * width..i * width + n].copy_from_slice(&b[i * n..(i + 1) * n]);
        t[i * width + n + i] = 1.0;
        t[i * width + rhs] = 1.0;
    }
    let mut obj = vec![0.0; width];
    obj[..n].iter_mut().for_each(|c| *c = -1.0);
    let mut basis: Vec<usize> = (n..n + m).collect();
    let mut bland = bland_only;
    let mut degenerate_run = 0;
    let max_iter = 50 * (n + m) + 1000;
    for _ in 0..max_iter {
        let entering = if bland {
            (0..n + m).find(|&j| obj[j] < -PIVOT_EPS)
        } else {
            let mut best: Option<usize> = None;
            for j in 0..n + m {
                if obj[j] < -PIVOT_EPS && best.is_none_or(|b| obj[j] < obj[b]) {
                    best = Some(j);
                }
            }
            best
        };
        let Some(e) = entering else {
            let mut w = vec![0.0; n];
            for (i, &bv) in basis.iter().enumerate() {
                if bv < n {
                    w[bv] = t[i * width + rhs];
                }
            }
            let u: Vec<f64> = (0..m).map(|i| obj[n + i]).collect();
            return Some((u, w));
        };
        let mut leave: Option<(usize, f64)> = None;
        for i in 0..m {
            let c = t[i * width + e];
            if c > PIVOT_EPS {
                let ratio = t[i * width + rhs] / c;
                let better = match leave {
                    None => true,
                    Some((li, lr)) => ratio < lr - 1e-15 || (ratio <= lr + 1e-15 && basis[i] < basis[li]),
                };
                if better {
                    leave = Some((i, ratio));
                }
            }
        }
        let (r, ratio) = leave?;
        if ratio <= 1e-15 {
            degenerate_run += 1;
            if degenerate_run > 20 {
                bland = true;
            }
        } else {
            degenerate_run = 0;
        }
        let piv = t[r * width + e];
        for v in &mut t[r * width..(r + 1) * width] {
            *v /= piv;
        }
        let (before, rest) = t.split_at_mut(r * width);
        let (prow, after) = rest.split_at_mut(width);
        for row in before.chunks_exact_mut(width).chain(after.chunks_exact_mut(width)) {
            let f = row[e];
            if f != 0.0 {
                for (x, &pv) in row.iter_mut().zip(prow.iter()) {
                    *x -= f * pv;
                }
                row[e] = 0.0;
            }
        }
        let f = obj[e];
        for (x, &pv) in obj.iter_mut().zip(prow.iter()) {
            *x -= f * pv;
        }
        obj[e] = 0.0;
        basis[r] = e;
    }
    None
}

/// Hedge for the row player against best-responding columns; returns the
/// averaged strategies.
fn multiplicative_weights(a: Matrix<'_>) -> (Vec<f64>, Vec<f64>) {
    let lo = a.data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = a.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = (hi - lo).max(1e-300);
    let eta = ((a.rows as f64).ln().max(1.0) / MW_ITERATIONS as f64).sqrt();
    let mut cum = vec![0.0; a.rows];
    let mut avg_p = vec![0.0; a.rows];
    let mut avg_q = vec![0.0; a.cols];
    for _ in 0..MW_ITERATIONS {
        let mx = cum.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut p: Vec<f64> = cum.iter().map(|c| (-eta * (mx - c)).exp()).collect();
        let s: f64 = p.iter().sum();
        p.iter_mut().for_each(|x| *x /= s);
        let mut best = 0;
        let mut best_v = f64::NEG_INFINITY;
        for k in 0..a.cols {
            let v: f64 = (0..a.rows).map(|i| p[i] * a.at(i, k)).sum();
            if v > best_v {
                best_v = v;
                best = k;
            }
        }
        for i in 0..a.rows {
            avg_p[i] += p[i];
            cum[i] -= (a.at(i, best) - lo) / range;
        }
        avg_q[best] += 1.0;
    }
    (avg_p, avg_q)
}
