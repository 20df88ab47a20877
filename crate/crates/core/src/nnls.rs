//! Lawson-Hanson nonnegative least squares on precomputed Gram matrices.
//!
//! Solves `min ‖Ax − b‖₂ s.t. x ≥ 0` given `G = AᵀA` and `f = Aᵀb`. The
//! active-set subproblems are solved by Cholesky with a small diagonal
//! jitter, which is adequate for the smooth Gaussian design matrices the
//! indicator fit produces.

use nalgebra::{DMatrix, DVector};

pub fn nnls_gram(g: &DMatrix<f64>, f: &DVector<f64>, max_iter: usize) -> DVector<f64> {
    let n = f.len();
    let mut x = DVector::zeros(n);
    let mut passive = vec![false; n];
    let tol = 1e-10 * f.amax().max(1e-300);
    let mut w = f.clone();

    for _ in 0..max_iter {
        let mut best = None;
        let mut best_w = tol;
        for j in 0..n {
            if !passive[j] && w[j] > best_w {
                best_w = w[j];
                best = Some(j);
            }
        }
        let Some(j_star) = best else { break };
        passive[j_star] = true;

        loop {
            let idx: Vec<usize> = (0..n).filter(|&j| passive[j]).collect();
            let z = solve_subproblem(g, f, &idx);
            if z.iter().all(|&v| v > 0.0) {
                for (k, &j) in idx.iter().enumerate() {
                    x[j] = z[k];
                }
                for j in 0..n {
                    if !passive[j] {
                        x[j] = 0.0;
                    }
                }
                break;
            }
            // Step toward z until the first passive variable hits zero,
            // then drop it from the passive set.
            let mut alpha = f64::INFINITY;
            for (k, &j) in idx.iter().enumerate() {
                if z[k] <= 0.0 {
                    let denom = x[j] - z[k];
                    if denom > 0.0 {
                        alpha = alpha.min(x[j] / denom);
                    }
                }
            }
            if !alpha.is_finite() {
                alpha = 0.0;
            }
            for (k, &j) in idx.iter().enumerate() {
                x[j] += alpha * (z[k] - x[j]);
                if x[j] <= 1e-14 {
                    x[j] = 0.0;
                    passive[j] = false;
                }
            }
        }
        w = f - g * &x;
    }
    x
}

fn solve_subproblem(g: &DMatrix<f64>, f: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    let k = idx.len();
    let mut sub_g = DMatrix::zeros(k, k);
    let mut sub_f = DVector::zeros(k);
    for (a, &i) in idx.iter().enumerate() {
        sub_f[a] = f[i];
        for (b, &j) in idx.iter().enumerate() {
            sub_g[(a, b)] = g[(i, j)];
        }
    }
    let jitter = 1e-12 * (0..k).map(|a| sub_g[(a, a)]).fold(0.0f64, f64::max).max(1e-300);
    for a in 0..k {
        sub_g[(a, a)] += jitter;
    }
    match sub_g.clone().cholesky() {
        Some(ch) => ch.solve(&sub_f),
        None => {
            for a in 0..k {
                sub_g[(a, a)] += 1e6 * jitter;
            }
            sub_g.cholesky().expect("jittered Gram is SPD").solve(&sub_f)
        }
    }
}
