//! Least squares over the probability simplex with an optional ridge term:
//! minimize `‖A x − b‖² + η ‖x‖²` subject to `x ≥ 0, Σ x = 1`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    #[default]
    FrankWolfe,
    ProjectedGradient,
}

#[derive(Debug, Clone)]
pub struct SimplexSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    /// Objective after each iteration (Frank–Wolfe only; empty otherwise).
    pub trace: Vec<f64>,
}

/// Column-major dense matrix, `rows × cols`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Dense {
    pub fn from_columns(columns: &[Vec<f64>]) -> Self {
        let rows = columns.first().map_or(0, |c| c.len());
        Dense { rows, cols: columns.len(), data: columns.concat() }
    }

    pub fn col(&self, j: usize) -> &[f64] {
        &self.data[j * self.rows..(j + 1) * self.rows]
    }

    fn times(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows];
        for (j, &xj) in x.iter().enumerate() {
            if xj != 0.0 {
                for (o, a) in out.iter_mut().zip(self.col(j)) {
                    *o += a * xj;
                }
            }
        }
        out
    }

    fn t_times(&self, r: &[f64]) -> Vec<f64> {
        (0..self.cols).map(|j| self.col(j).iter().zip(r).map(|(a, b)| a * b).sum()).collect()
    }
}

fn objective(ax: &[f64], b: &[f64], x: &[f64], eta: f64) -> f64 {
    ax.iter().zip(b).map(|(a, b)| (a - b).powi(2)).sum::<f64>() + eta * x.iter().map(|v| v * v).sum::<f64>()
}

/// `solver` to a relative duality-gap (or step) tolerance `tol`.
pub fn simplex_least_squares(
    a: &Dense,
    b: &[f64],
    eta: f64,
    solver: Solver,
    max_iters: usize,
    tol: f64,
) -> Result<SimplexSolution> {
    if a.cols == 0 {
        return Err(Error::invalid("no donors"));
    }
    if a.rows != b.len() {
        return Err(Error::invalid("target length does not match donor rows"));
    }
    if !(tol > 0.0) || eta < 0.0 {
        return Err(Error::invalid("solver needs tol > 0 and a nonnegative ridge"));
    }
    if a.cols == 1 {
        let ax = a.times(&[1.0]);
        return Ok(SimplexSolution {
            objective: objective(&ax, b, &[1.0], eta),
            x: vec![1.0],
            iterations: 0,
            trace: vec![],
        });
    }
    match solver {
        Solver::FrankWolfe => away_step_fw(a, b, eta, max_iters, tol),
        Solver::ProjectedGradient => projected_gradient(a, b, eta, max_iters, tol),
    }
}

fn away_step_fw(a: &Dense, b: &[f64], eta: f64, max_iters: usize, tol: f64) -> Result<SimplexSolution> {
    let k = a.cols;
    let mut x = vec![1.0 / k as f64; k];
    let mut ax = a.times(&x);
    let f0 = objective(&ax, b, &x, eta);
    let scale = f0.max(b.iter().map(|v| v * v).sum::<f64>()).max(1e-300);
    let mut trace = Vec::new();
    let mut d_ax = vec![0.0; a.rows];
    let (mut best, mut best_at) = (f0, 0);
    for it in 1..=max_iters {
        let r: Vec<f64> = ax.iter().zip(b).map(|(p, q)| p - q).collect();
        let g: Vec<f64> = a.t_times(&r).iter().zip(&x).map(|(v, xi)| 2.0 * (v + eta * xi)).collect();
        let s = (0..k).min_by(|&i, &j| g[i].total_cmp(&g[j])).unwrap();
        let v = (0..k).filter(|&i| x[i] > 0.0).max_by(|&i, &j| g[i].total_cmp(&g[j])).unwrap();
        let gx: f64 = g.iter().zip(&x).map(|(a, b)| a * b).sum();
        let fw_gap = gx - g[s];
        let stalled = it - best_at > STALL_ITERS && fw_gap <= tol.sqrt() * scale;
        if fw_gap <= tol * scale || stalled {
            let f = objective(&ax, b, &x, eta);
            return Ok(SimplexSolution { x, objective: f, iterations: it - 1, trace });
        }
        let away_gap = g[v] - gx;
        // direction d = e_s - x (toward) or x - e_v (away)
        let toward = fw_gap >= away_gap;
        let (gamma_max, sign) = if toward {
            (1.0, 1.0)
        } else {
            let xv = x[v];
            (if xv < 1.0 { xv / (1.0 - xv) } else { f64::INFINITY }, -1.0)
        };
        let target = if toward { s } else { v };
        // A d and ‖d‖² for d = sign (e_target − x)
        let col = a.col(target);
        for i in 0..a.rows {
            d_ax[i] = sign * (col[i] - ax[i]);
        }
        let dd: f64 = (0..k).map(|i| sign * (f64::from(u8::from(i == target)) - x[i])).map(|d| d * d).sum();
        let gd = if toward { -fw_gap } else { -away_gap };
        let curv = 2.0 * (d_ax.iter().map(|v| v * v).sum::<f64>() + eta * dd);
        let gamma = if curv > 0.0 { (-gd / curv).min(gamma_max) } else { gamma_max };
        if !(gamma > 0.0) || !gamma.is_finite() {
            let f = objective(&ax, b, &x, eta);
            return Ok(SimplexSolution { x, objective: f, iterations: it, trace });
        }
        for i in 0..k {
            let e = f64::from(u8::from(i == target));
            x[i] += gamma * sign * (e - x[i]);
            if x[i] < 0.0 {
                x[i] = 0.0;
            }
        }
        if !toward && gamma >= gamma_max {
            x[v] = 0.0;
        }
        let total: f64 = x.iter().sum();
        for xi in &mut x {
            *xi /= total;
        }
        ax = a.times(&x);
        if it % POLISH_EVERY == 0 {
            polish(a, b, eta, &mut x);
            ax = a.times(&x);
        }
        let f = objective(&ax, b, &x, eta);
        if f < best - 1e-14 * scale {
            best = f;
            best_at = it;
        }
        trace.push(f);
    }
    Err(Error::NotConverged { what: "Frank-Wolfe".into(), iterations: max_iters })
}

/// Iterations without objective progress after which a small gap is accepted
/// as the floating-point floor.
const STALL_ITERS: usize = 500;

/// Frank–Wolfe iterations between support polishing steps.
const POLISH_EVERY: usize = 25;

/// Move `x` toward the minimizer of the objective on the affine hull of its
/// support, stopping at the first coordinate that would turn negative. The
/// objective cannot increase along that segment.
fn polish(a: &Dense, b: &[f64], eta: f64, x: &mut [f64]) {
    let support: Vec<usize> = (0..x.len()).filter(|&i| x[i] > 0.0).collect();
    let m = support.len();
    if m < 2 {
        return;
    }
    // KKT system of min ‖A_S z − b‖² + η‖z‖² subject to Σ z = 1
    let mut kkt = DMatrix::zeros(m + 1, m + 1);
    let mut rhs = DVector::zeros(m + 1);
    for (p, &i) in support.iter().enumerate() {
        for (q, &j) in support.iter().enumerate().take(p + 1) {
            let v = 2.0 * a.col(i).iter().zip(a.col(j)).map(|(u, w)| u * w).sum::<f64>();
            kkt[(p, q)] = v;
            kkt[(q, p)] = v;
        }
        kkt[(p, p)] += 2.0 * eta;
        kkt[(p, m)] = 1.0;
        kkt[(m, p)] = 1.0;
        rhs[p] = 2.0 * a.col(i).iter().zip(b).map(|(u, w)| u * w).sum::<f64>();
    }
    rhs[m] = 1.0;
    let svd = kkt.clone().svd(true, true);
    let Ok(mut sol) = svd.solve(&rhs, 1e-12) else { return };
    for _ in 0..3 {
        let r = &rhs - &kkt * &sol;
        let Ok(d) = svd.solve(&r, 1e-12) else { return };
        sol += d;
    }
    if sol.iter().any(|v| !v.is_finite()) {
        return;
    }
    let mut t = 1.0f64;
    let mut blocking = None;
    for (p, &i) in support.iter().enumerate() {
        let d = sol[p] - x[i];
        if d < 0.0 && x[i] + t * d < 0.0 {
            t = x[i] / -d;
            blocking = Some(i);
        }
    }
    let before = {
        let ax = a.times(x);
        objective(&ax, b, x, eta)
    };
    let mut next = x.to_vec();
    for (p, &i) in support.iter().enumerate() {
        next[i] = (x[i] + t * (sol[p] - x[i])).max(0.0);
    }
    if let Some(i) = blocking {
        next[i] = 0.0;
    }
    let total: f64 = next.iter().sum();
    if !(total > 0.0) {
        return;
    }
    next.iter_mut().for_each(|v| *v /= total);
    let after = objective(&a.times(&next), b, &next, eta);
    // guard against round-off in near-singular systems
    if after <= before {
        x.copy_from_slice(&next);
    }
}

/// Euclidean projection onto the simplex (sort-based).
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut css = 0.0;
    let mut theta = 0.0;
    for (i, ui) in u.iter().enumerate() {
        css += ui;
        let t = (css - 1.0) / (i + 1) as f64;
        if ui - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

fn projected_gradient(a: &Dense, b: &[f64], eta: f64, max_iters: usize, tol: f64) -> Result<SimplexSolution> {
    let k = a.cols;
    // Lipschitz constant of the gradient via power iteration on AᵀA
    let mut v = vec![1.0; k];
    let mut lam = 0.0;
    for _ in 0..100 {
        let w = a.t_times(&a.times(&v));
        let n = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 {
            break;
        }
        lam = n / v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v = w.iter().map(|x| x / n).collect();
    }
    let l = 2.0 * (lam * 1.01 + eta) + 1e-12;
    let mut x = vec![1.0 / k as f64; k];
    let mut y = x.clone();
    let mut t = 1.0f64;
    for it in 1..=max_iters {
        let ay = a.times(&y);
        let r: Vec<f64> = ay.iter().zip(b).map(|(p, q)| p - q).collect();
        let g: Vec<f64> = a.t_times(&r).iter().zip(&y).map(|(v, yi)| 2.0 * (v + eta * yi)).collect();
        let step: Vec<f64> = y.iter().zip(&g).map(|(yi, gi)| yi - gi / l).collect();
        let x_new = project_simplex(&step);
        let t_new = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let delta = x_new.iter().zip(&x).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        y = x_new.iter().zip(&x).map(|(p, q)| p + (t - 1.0) / t_new * (p - q)).collect();
        x = x_new;
        t = t_new;
        if delta <= tol {
            let ax = a.times(&x);
            return Ok(SimplexSolution { objective: objective(&ax, b, &x, eta), x, iterations: it, trace: vec![] });
        }
    }
    Err(Error::NotConverged { what: "projected gradient".into(), iterations: max_iters })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_problem(seed: u64, rows: usize, k: usize) -> (Dense, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cols: Vec<Vec<f64>> = (0..k).map(|_| (0..rows).map(|_| rng.random::<f64>() - 0.5).collect()).collect();
        let b = (0..rows).map(|_| rng.random::<f64>() - 0.5).collect();
        (Dense::from_columns(&cols), b)
    }

    #[test]
    fn identical_columns_split_evenly_with_ridge() {
        let a = Dense::from_columns(&[vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0]]);
        let s = simplex_least_squares(&a, &[1.0, 2.0, 3.0], 0.1, Solver::FrankWolfe, 1000, 1e-12).unwrap();
        assert!((s.x[0] - 0.5).abs() < 1e-9 && (s.x[1] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn exact_vertex_recovered() {
        let (a, _) = random_problem(1, 12, 5);
        let b = a.col(3).to_vec();
        for solver in [Solver::FrankWolfe, Solver::ProjectedGradient] {
            let s = simplex_least_squares(&a, &b, 0.0, solver, 100_000, 1e-12).unwrap();
            assert!(s.objective < 1e-10, "{solver:?} {}", s.objective);
        }
    }

    /// Brute-force oracle: enumerate every support set, solve the
    /// equality-constrained least squares on it, keep feasible points.
    fn active_set_oracle(a: &Dense, b: &[f64], eta: f64) -> f64 {
        use nalgebra::{DMatrix, DVector};
        let k = a.cols;
        let mut best = f64::INFINITY;
        for mask in 1u32..(1 << k) {
            let s: Vec<usize> = (0..k).filter(|j| mask >> j & 1 == 1).collect();
            let m = s.len();
            // KKT: [2(AᵀA+ηI) 1; 1ᵀ 0] [x; μ] = [2Aᵀb; 1]
            let mut kkt = DMatrix::<f64>::zeros(m + 1, m + 1);
            let mut rhs = DVector::<f64>::zeros(m + 1);
            for (p, &i) in s.iter().enumerate() {
                for (q, &j) in s.iter().enumerate() {
                    let v: f64 = a.col(i).iter().zip(a.col(j)).map(|(x, y)| x * y).sum();
                    kkt[(p, q)] = 2.0 * (v + if p == q { eta } else { 0.0 });
                }
                kkt[(p, m)] = 1.0;
                kkt[(m, p)] = 1.0;
                rhs[p] = 2.0 * a.col(i).iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
            }
            rhs[m] = 1.0;
            let Some(sol) = kkt.lu().solve(&rhs) else { continue };
            if (0..m).any(|p| sol[p] < -1e-12) {
                continue;
            }
            let mut x = vec![0.0; k];
            for (p, &i) in s.iter().enumerate() {
                x[i] = sol[p].max(0.0);
            }
            best = best.min(objective(&a.times(&x), b, &x, eta));
        }
        best
    }

    #[test]
    fn matches_active_set_oracle_ten_donors() {
        for seed in 0..5 {
            let (a, b) = random_problem(seed, 20, 10);
            let oracle = active_set_oracle(&a, &b, 0.05);
            for solver in [Solver::FrankWolfe, Solver::ProjectedGradient] {
                let s = simplex_least_squares(&a, &b, 0.05, solver, 200_000, 1e-13).unwrap();
                assert!((s.objective - oracle).abs() < 1e-6, "{solver:?} {} vs {oracle}", s.objective);
            }
        }
    }

    proptest! {
        #[test]
        fn feasible_and_monotone(seed in 0u64..500, k in 2usize..8) {
            let (a, b) = random_problem(seed, 9, k);
            let s = simplex_least_squares(&a, &b, 0.01, Solver::FrankWolfe, 100_000, 1e-10).unwrap();
            prop_assert!(s.x.iter().all(|&v| v >= 0.0));
            prop_assert!((s.x.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for w in s.trace.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-12 * w[0].abs().max(1.0));
            }
        }

        #[test]
        fn projection_lands_on_simplex(v in proptest::collection::vec(-3.0f64..3.0, 1..10)) {
            let p = project_simplex(&v);
            prop_assert!(p.iter().all(|&x| x >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
