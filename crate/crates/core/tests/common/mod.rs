//! Oracles shared by the test targets.

/// Solves the square system `M x = r` by Gaussian elimination with partial
/// pivoting; `None` when singular.
fn solve(mut m: Vec<Vec<f64>>, mut r: Vec<f64>) -> Option<Vec<f64>> {
    let n = r.len();
    for c in 0..n {
        let p = (c..n).max_by(|&a, &b| m[a][c].abs().total_cmp(&m[b][c].abs()))?;
        if m[p][c].abs() < 1e-12 {
            return None;
        }
        m.swap(c, p);
        r.swap(c, p);
        for i in 0..n {
            if i != c {
                let f = m[i][c] / m[c][c];
                for j in c..n {
                    m[i][j] -= f * m[c][j];
                }
                r[i] -= f * r[c];
            }
        }
    }
    Some((0..n).map(|i| r[i] / m[i][i]).collect())
}

fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    (0u32..1 << n)
        .filter(|b| b.count_ones() as usize == k)
        .map(|b| (0..n).filter(|i| b >> i & 1 == 1).collect())
        .collect()
}

/// Game value by support enumeration over equal-size supports.
pub fn enumerate_value(a: &[Vec<f64>]) -> f64 {
    let (rows, cols) = (a.len(), a[0].len());
    for k in 1..=rows.min(cols) {
        for rs in subsets(rows, k) {
            for cs in subsets(cols, k) {
                // row mix p on rs equalizing columns cs: Σ_i p_i a[i][j] − v = 0, Σ p = 1
                let mut mp = vec![vec![0.0; k + 1]; k + 1];
                let mut rp = vec![0.0; k + 1];
                for (e, &j) in cs.iter().enumerate() {
                    for (x, &i) in rs.iter().enumerate() {
                        mp[e][x] = a[i][j];
                    }
                    mp[e][k] = -1.0;
                }
                mp[k][..k].iter_mut().for_each(|x| *x = 1.0);
                rp[k] = 1.0;
                let mut mq = vec![vec![0.0; k + 1]; k + 1];
                for (e, &i) in rs.iter().enumerate() {
                    for (x, &j) in cs.iter().enumerate() {
                        mq[e][x] = a[i][j];
                    }
                    mq[e][k] = -1.0;
                }
                mq[k][..k].iter_mut().for_each(|x| *x = 1.0);
                let (Some(p), Some(q)) = (solve(mp, rp.clone()), solve(mq, rp)) else { continue };
                if p[..k].iter().chain(&q[..k]).any(|&x| x < -1e-12) {
                    continue;
                }
                let v = p[k];
                let mut full_p = vec![0.0; rows];
                let mut full_q = vec![0.0; cols];
                rs.iter().enumerate().for_each(|(x, &i)| full_p[i] = p[x]);
                cs.iter().enumerate().for_each(|(x, &j)| full_q[j] = q[x]);
                let row_ok = (0..cols).all(|j| (0..rows).map(|i| full_p[i] * a[i][j]).sum::<f64>() <= v + 1e-9);
                let col_ok = (0..rows).all(|i| (0..cols).map(|j| a[i][j] * full_q[j]).sum::<f64>() >= v - 1e-9);
                // the value is unique, so the first equilibrium found settles it
                if row_ok && col_ok {
                    return v;
                }
            }
        }
    }
    unreachable!("every finite game has an equilibrium")
}

/// Separable reformulation of a bilinear game: one column per `(j, k)`.
pub fn amf_matrix(g: &calibra::online::amf::BilinearGame) -> Vec<Vec<f64>> {
    (0..g.a())
        .map(|i| (0..g.d()).flat_map(|j| (0..g.b()).map(move |k| (j, k))).map(|(j, k)| g.g[j][i] + g.h[i][k]).collect())
        .collect()
}
