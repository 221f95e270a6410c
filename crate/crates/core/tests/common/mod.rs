//! Shared test oracles: finite differences, naive matrix products, and
//! brute-force assignment.
#![allow(dead_code)] // each test binary uses a subset of the oracles

use hopper_core::tensor::{Tape, TensorId};

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Analytic gradient vs central finite differences for a scalar loss built
/// from a single input leaf. `build` must reconstruct the whole graph from
/// scratch on every call.
pub fn check_grad(
    shape: &[usize],
    x0: &[f64],
    tol: f64,
    build: impl Fn(&mut Tape, TensorId) -> TensorId,
) {
    let eval = |x: &[f64]| -> f64 {
        let mut tape = Tape::new();
        let leaf = tape.leaf(shape, x.to_vec(), true);
        let loss = build(&mut tape, leaf);
        tape.value(loss)
    };
    let mut tape = Tape::new();
    let leaf = tape.leaf(shape, x0.to_vec(), true);
    let loss = build(&mut tape, leaf);
    tape.backward(loss).expect("backward");
    let grad = tape.grad(leaf).expect("leaf gradient").to_vec();

    let h = 1e-5;
    for i in 0..x0.len() {
        let mut plus = x0.to_vec();
        plus[i] += h;
        let mut minus = x0.to_vec();
        minus[i] -= h;
        let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
        assert!(
            rel_err(grad[i], fd) <= tol || (grad[i].abs() < 1e-7 && fd.abs() < 1e-7),
            "coordinate {i}: analytic {} vs finite-difference {fd}",
            grad[i]
        );
    }
}

/// Naive triple-loop matrix product oracle.
pub fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for l in 0..k {
                c[i * n + j] += a[i * k + l] * b[l * n + j];
            }
        }
    }
    c
}

/// Exhaustive minimum-cost assignment over all permutations.
pub fn brute_force_assignment(cost: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let n = cost.len();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best: Option<(Vec<usize>, f64)> = None;
    permute(&mut perm, 0, &mut |p| {
        let total: f64 = p.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
        let better = match &best {
            None => true,
            Some((bp, bc)) => total < bc - 1e-12 || ((total - bc).abs() <= 1e-12 && p < &bp[..]),
        };
        if better {
            best = Some((p.to_vec(), total));
        }
    });
    best.expect("nonempty matrix")
}

fn permute(items: &mut [usize], k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == items.len() {
        visit(items);
        return;
    }
    for i in k..items.len() {
        items.swap(k, i);
        permute(items, k + 1, visit);
        items.swap(k, i);
    }
}
