//! Exact Wasserstein-1 between finite weighted point clouds.
//!
//! On the line the optimal coupling is monotone, so `W₁ = ∫|F_μ − F_ν|`.
//! In higher dimension the transport LP is solved by successive shortest
//! paths on the dense bipartite residual graph with Johnson potentials.

use crate::error::{invalid, Result};
use crate::linalg::dist;

/// Largest number of distinct support points per side accepted by the
/// exact solver in dimension `d > 1`.
pub const MAX_EXACT_PARTICLES: usize = 512;

/// `∫ |F_μ(s) − F_ν(s)| ds` for measures on ℝ.
pub(crate) fn w1_sorted(xs: &[f64], wx: &[f64], ys: &[f64], wy: &[f64]) -> f64 {
    let mut events: Vec<(f64, f64)> = xs
        .iter()
        .zip(wx)
        .map(|(&x, &w)| (x, w))
        .chain(ys.iter().zip(wy).map(|(&y, &w)| (y, -w)))
        .collect();
    events.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut cdf_gap = 0.0;
    let mut total = 0.0;
    for pair in events.windows(2) {
        cdf_gap += pair[0].1;
        total += cdf_gap.abs() * (pair[1].0 - pair[0].0);
    }
    total
}

/// Collapses bit-identical points, summing their weights.
pub(crate) fn dedup(points: &[f64], weights: &[f64], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut index: std::collections::HashMap<Vec<u64>, usize> = Default::default();
    let mut out_p = Vec::new();
    let mut out_w: Vec<f64> = Vec::new();
    for (p, &w) in points.chunks(dim).zip(weights) {
        if w == 0.0 {
            continue;
        }
        let key: Vec<u64> = p.iter().map(|v| v.to_bits()).collect();
        match index.get(&key) {
            Some(&k) => out_w[k] += w,
            None => {
                index.insert(key, out_w.len());
                out_p.extend_from_slice(p);
                out_w.push(w);
            }
        }
    }
    (out_p, out_w)
}

/// Optimal transport cost with Euclidean ground cost, solved exactly.
pub(crate) fn w1_exact(
    xs: &[f64],
    wx: &[f64],
    ys: &[f64],
    wy: &[f64],
    dim: usize,
) -> Result<f64> {
    let (xs, wx) = dedup(xs, wx, dim);
    let (ys, wy) = dedup(ys, wy, dim);
    let n = wx.len();
    let m = wy.len();
    if n > MAX_EXACT_PARTICLES || m > MAX_EXACT_PARTICLES {
        return Err(invalid(format!(
            "exact W1 supports at most {MAX_EXACT_PARTICLES} distinct points per side, got {n} and {m}"
        )));
    }
    if n == 0 || m == 0 {
        return Ok(0.0);
    }
    let cost: Vec<f64> = (0..n)
        .flat_map(|i| {
            let xi = &xs[i * dim..(i + 1) * dim];
            let ys = &ys;
            (0..m).map(move |j| dist(xi, &ys[j * dim..(j + 1) * dim]))
        })
        .collect();
    Ok(min_cost_transport(&cost, &wx, &wy).0)
}

/// Successive shortest paths for the transportation problem.
///
/// Returns the optimal cost and the dense `n × m` plan. Supplies and demands
/// are assumed to carry (almost) equal total mass; the run stops when either
/// side is exhausted.
pub(crate) fn min_cost_transport(cost: &[f64], supply: &[f64], demand: &[f64]) -> (f64, Vec<f64>) {
    let n = supply.len();
    let m = demand.len();
    let mut supply = supply.to_vec();
    let mut demand = demand.to_vec();
    let mut flow = vec![0.0; n * m];
    // Node ids: sources 0..n, sinks n..n+m.
    let mut pot = vec![0.0; n + m];
    let mut d = vec![0.0; n + m];
    let mut prev = vec![usize::MAX; n + m];
    let mut done = vec![false; n + m];

    loop {
        if !supply.iter().any(|&s| s > 0.0) || !demand.iter().any(|&s| s > 0.0) {
            break;
        }
        d.iter_mut().for_each(|v| *v = f64::INFINITY);
        prev.iter_mut().for_each(|v| *v = usize::MAX);
        done.iter_mut().for_each(|v| *v = false);
        for i in 0..n {
            if supply[i] > 0.0 {
                d[i] = 0.0;
            }
        }
        // Dense Dijkstra over reduced costs.
        let mut target = usize::MAX;
        loop {
            let mut u = usize::MAX;
            let mut best = f64::INFINITY;
            for (v, (&dv, &fin)) in d.iter().zip(&done).enumerate() {
                if !fin && dv < best {
                    best = dv;
                    u = v;
                }
            }
            if u == usize::MAX {
                break;
            }
            done[u] = true;
            if u >= n && demand[u - n] > 0.0 {
                target = u;
                break;
            }
            if u < n {
                let row = &cost[u * m..(u + 1) * m];
                for (j, &c) in row.iter().enumerate() {
                    let v = n + j;
                    if done[v] {
                        continue;
                    }
                    let nd = d[u] + (c + pot[u] - pot[v]).max(0.0);
                    if nd < d[v] {
                        d[v] = nd;
                        prev[v] = u;
                    }
                }
            } else {
                let j = u - n;
                for i in 0..n {
                    if done[i] || flow[i * m + j] <= 0.0 {
                        continue;
                    }
                    let nd = d[u] + (-cost[i * m + j] + pot[u] - pot[i]).max(0.0);
                    if nd < d[i] {
                        d[i] = nd;
                        prev[i] = u;
                    }
                }
            }
        }
        if target == usize::MAX {
            break;
        }
        let reach = d[target];
        for v in 0..n + m {
            pot[v] += if done[v] { d[v] } else { reach };
        }
        // Bottleneck along the path.
        let mut amount = demand[target - n];
        let mut v = target;
        while prev[v] != usize::MAX {
            let u = prev[v];
            if u >= n {
                amount = amount.min(flow[v * m + (u - n)]);
            }
            v = u;
        }
        let root = v;
        amount = amount.min(supply[root]);
        // Apply.
        let mut v = target;
        while prev[v] != usize::MAX {
            let u = prev[v];
            if u < n {
                flow[u * m + (v - n)] += amount;
            } else {
                let f = &mut flow[v * m + (u - n)];
                *f -= amount;
                if *f <= amount * 1e-15 {
                    *f = 0.0;
                }
            }
            v = u;
        }
        supply[root] -= amount;
        if supply[root] <= amount * 1e-15 {
            supply[root] = 0.0;
        }
        demand[target - n] -= amount;
        if demand[target - n] <= amount * 1e-15 {
            demand[target - n] = 0.0;
        }
    }
    let total = flow.iter().zip(cost).map(|(f, c)| f * c).sum();
    (total, flow)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Brute force over permutations for equal-weight clouds of equal size.
    fn assignment_oracle(cost: &[f64], n: usize) -> f64 {
        fn rec(cost: &[f64], n: usize, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            if row == n {
                *best = best.min(acc);
                return;
            }
            for j in 0..n {
                if !used[j] {
                    used[j] = true;
                    rec(cost, n, row + 1, used, acc + cost[row * n + j], best);
                    used[j] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        rec(cost, n, 0, &mut vec![false; n], 0.0, &mut best);
        best / n as f64
    }

    #[test]
    fn matches_permutation_search() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..30 {
            let n = rng.random_range(1..=6);
            let cost: Vec<f64> = (0..n * n).map(|_| rng.random::<f64>()).collect();
            let w = vec![1.0 / n as f64; n];
            let (got, plan) = min_cost_transport(&cost, &w, &w);
            assert!((got - assignment_oracle(&cost, n)).abs() < 1e-12);
            for i in 0..n {
                let row: f64 = plan[i * n..(i + 1) * n].iter().sum();
                assert!((row - w[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sorted_formula_two_pairs() {
        let got = w1_sorted(&[0.0, 1.0], &[0.5, 0.5], &[2.0, 3.0], &[0.5, 0.5]);
        assert!((got - 2.0).abs() < 1e-15);
    }

    #[test]
    fn dedup_sums_weights() {
        let (p, w) = dedup(&[1.0, 2.0, 1.0], &[0.25, 0.5, 0.25], 1);
        assert_eq!(p, vec![1.0, 2.0]);
        assert_eq!(w, vec![0.5, 0.5]);
    }

    #[test]
    fn rejects_oversized_inputs() {
        let n = MAX_EXACT_PARTICLES + 1;
        let pts: Vec<f64> = (0..2 * n).map(|i| i as f64).collect();
        let w = vec![1.0 / n as f64; n];
        assert!(w1_exact(&pts, &w, &pts, &w, 2).is_err());
    }
}
