//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use swipt_core::constellation::Pmf;
use swipt_core::markov_reward::FiniteChain;
use swipt_core::sqp::QpProblem;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller; test oracles avoid depending on the library's samplers.
    let u1: f64 = rng.gen::<f64>().max(1e-300);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Random pmf with every entry at least `floor`.
pub fn random_pmf<R: Rng>(rng: &mut R, n: usize, floor: f64) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() + 0.05).collect();
    let s: f64 = w.iter().sum();
    let free = 1.0 - floor * n as f64;
    w.iter().map(|x| floor + free * x / s).collect()
}

/// Central differences of `f` along `e_i − 1/n` for every `i`: the gradient
/// projected onto the simplex tangent space.
pub fn projected_fd(theta: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let n = theta.len();
    (0..n)
        .map(|i| {
            let shift = |s: f64| -> Vec<f64> {
                theta
                    .iter()
                    .enumerate()
                    .map(|(j, t)| t + s * (if i == j { 1.0 } else { 0.0 } - 1.0 / n as f64))
                    .collect()
            };
            (f(&shift(h)) - f(&shift(-h))) / (2.0 * h)
        })
        .collect()
}

pub fn project(v: &[f64]) -> Vec<f64> {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| x - m).collect()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// The 2-state, 3-symbol test chain. From state 0, symbols 1 and 2 move to
/// state 1; from state 1, symbols 0 and 1 move back to state 0.
pub fn two_state_chain() -> FiniteChain {
    FiniteChain::new(
        vec![vec![0, 1, 1], vec![0, 0, 1]],
        vec![vec![1.0, 2.0, 0.5], vec![3.0, 0.2, 1.5]],
    )
    .unwrap()
}

/// Stationary average reward of a finite chain under i.i.d. symbols `theta`,
/// from the balance equations.
pub fn finite_chain_average(chain: &FiniteChain, theta: &[f64]) -> f64 {
    let n = chain.n_states();
    let mut p = DMatrix::<f64>::zeros(n, n);
    for s in 0..n {
        for (i, &t) in theta.iter().enumerate() {
            p[(s, chain.next[s][i])] += t;
        }
    }
    // πᵀ(P − I) = 0 with Σπ = 1: replace the last balance equation.
    let mut a = (p.transpose() - DMatrix::identity(n, n)).clone_owned();
    let mut b = DVector::zeros(n);
    for j in 0..n {
        a[(n - 1, j)] = 1.0;
    }
    b[n - 1] = 1.0;
    let pi = a.lu().solve(&b).expect("irreducible chain");
    (0..n)
        .map(|s| pi[s] * theta.iter().zip(&chain.reward[s]).map(|(t, r)| t * r).sum::<f64>())
        .sum()
}

pub fn pmf(v: Vec<f64>) -> Pmf {
    Pmf::new(v).unwrap()
}

/// Solution of a QP found by enumerating every working set.
#[derive(Debug, Clone)]
pub struct OracleSolution {
    pub delta: Vec<f64>,
    pub mi: f64,
    pub ap: f64,
    pub simplex: f64,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Gradients of the constraints active at `delta` are linearly
    /// independent, so the multipliers are unique.
    pub licq: bool,
}

#[derive(Clone, Copy)]
enum Row {
    Mi,
    Ap,
    Lower(usize),
    Upper(usize),
}

/// Maximizes `gᵀδ + ½δᵀHδ` subject to the linearized MI and AP constraints,
/// `Σδ = 0` and the bounds, by trying every candidate active set and keeping
/// the one whose equality-constrained solution is primal and dual feasible.
/// Assumes `δ = 0` is feasible and `H` is negative definite.
pub fn enumerate_qp(p: &QpProblem) -> Option<OracleSolution> {
    let n = p.g.len();
    let r = p.trust_radius.unwrap_or(f64::INFINITY);
    let lower: Vec<f64> = p.theta.iter().map(|t| (-t).max(-r).min(0.0)).collect();
    let upper = vec![r; n];
    let mut rows = vec![Row::Mi, Row::Ap];
    rows.extend((0..n).map(Row::Lower));
    if r.is_finite() {
        rows.extend((0..n).map(Row::Upper));
    }
    let mi_slack = p.mi_val - p.i_req;
    let ap_slack = p.sigma_x2 - p.ap_val;
    // Each row as `aᵀδ ≤ b`.
    let row = |k: Row| -> (Vec<f64>, f64) {
        match k {
            Row::Mi => (p.mi_grad.iter().map(|v| -v).collect(), mi_slack),
            Row::Ap => (p.ap_grad.clone(), ap_slack),
            Row::Lower(j) => {
                let mut a = vec![0.0; n];
                a[j] = -1.0;
                (a, -lower[j])
            }
            Row::Upper(j) => {
                let mut a = vec![0.0; n];
                a[j] = 1.0;
                (a, upper[j])
            }
        }
    };
    let m = rows.len();
    let mut best: Option<(f64, OracleSolution)> = None;
    for mask in 0u32..(1 << m) {
        let k = mask.count_ones() as usize;
        if k + 1 > n {
            continue;
        }
        let active: Vec<Row> = (0..m).filter(|b| mask >> b & 1 == 1).map(|b| rows[b]).collect();
        let dim = n + 1 + k;
        let mut kkt = DMatrix::<f64>::zeros(dim, dim);
        let mut rhs = DVector::<f64>::zeros(dim);
        for i in 0..n {
            for j in 0..n {
                kkt[(i, j)] = -p.h[(i, j)];
            }
            rhs[i] = p.g[i];
            kkt[(i, n)] = 1.0;
            kkt[(n, i)] = 1.0;
        }
        for (c, &a_row) in active.iter().enumerate() {
            let (a, b) = row(a_row);
            for i in 0..n {
                kkt[(i, n + 1 + c)] = a[i];
                kkt[(n + 1 + c, i)] = a[i];
            }
            rhs[n + 1 + c] = b;
        }
        let svd = kkt.clone().svd(false, false);
        let smin = svd.singular_values.min();
        let smax = svd.singular_values.max();
        if smin < 1e-10 * smax {
            continue;
        }
        // Stationarity: −Hδ − g + ν·1 + Σ μ a = 0.
        let Some(sol) = kkt.lu().solve(&rhs) else { continue };
        let delta: Vec<f64> = (0..n).map(|i| sol[i]).collect();
        let mus: Vec<f64> = (0..k).map(|c| sol[n + 1 + c]).collect();
        if mus.iter().any(|&mu| mu < -1e-12) {
            continue;
        }
        let feasible = rows.iter().all(|&rw| {
            let (a, b) = row(rw);
            let lhs: f64 = a.iter().zip(&delta).map(|(x, y)| x * y).sum();
            lhs <= b + 1e-10
        });
        if !feasible {
            continue;
        }
        let mut out = OracleSolution {
            delta: delta.clone(),
            mi: 0.0,
            ap: 0.0,
            simplex: sol[n],
            lower: vec![0.0; n],
            upper: vec![0.0; n],
            licq: false,
        };
        for (c, rw) in active.iter().enumerate() {
            match *rw {
                Row::Mi => out.mi = mus[c],
                Row::Ap => out.ap = mus[c],
                Row::Lower(j) => out.lower[j] = mus[c],
                Row::Upper(j) => out.upper[j] = mus[c],
            }
        }
        let d = DVector::from_column_slice(&delta);
        let obj = DVector::from_column_slice(&p.g).dot(&d) + 0.5 * d.dot(&(&p.h * &d));
        if best.as_ref().is_none_or(|(o, _)| obj > *o + 1e-12) {
            best = Some((obj, out));
        }
    }
    best.map(|(_, mut s)| {
        let mut a = vec![vec![1.0; n]];
        for &rw in &rows {
            let (g, b) = row(rw);
            let lhs: f64 = g.iter().zip(&s.delta).map(|(x, y)| x * y).sum();
            if (b - lhs).abs() <= 1e-9 {
                a.push(g);
            }
        }
        let m = DMatrix::from_fn(a.len(), n, |i, j| a[i][j]);
        let sv = m.svd(false, false).singular_values;
        s.licq = a.len() <= n && sv.min() > 1e-8 * sv.max();
        s
    })
}

/// A random strictly concave QP with `δ = 0` feasible.
pub fn random_qp<R: Rng>(rng: &mut R, n: usize, trust: bool) -> QpProblem {
    let b = DMatrix::from_fn(n, n, |_, _| normal(rng));
    let h = -(&b * b.transpose() + DMatrix::identity(n, n) * 0.1);
    let theta = random_pmf(rng, n, 0.01);
    let mi_grad: Vec<f64> = (0..n).map(|_| normal(rng)).collect();
    let ap_grad: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 4.0).collect();
    let ap_val: f64 = theta.iter().zip(&ap_grad).map(|(t, q)| t * q).sum();
    QpProblem {
        g: (0..n).map(|_| 2.0 * normal(rng)).collect(),
        h,
        shift: 0.0,
        mi_val: 1.0 + rng.gen::<f64>() * 0.3,
        mi_grad,
        i_req: 1.0,
        ap_val,
        ap_grad,
        sigma_x2: ap_val + rng.gen::<f64>() * 0.3,
        theta,
        trust_radius: if trust { Some(0.05 + 0.3 * rng.gen::<f64>()) } else { None },
    }
}

/// Largest deviation between a solver result and the oracle, over the step
/// and every multiplier.
pub fn qp_deviation(s: &swipt_core::sqp::QpSolution, o: &OracleSolution) -> f64 {
    let mut d: f64 = 0.0;
    for (a, b) in s.delta.iter().zip(&o.delta) {
        d = d.max((a - b).abs());
    }
    d = d.max((s.zeta.mi - o.mi).abs());
    d = d.max((s.zeta.ap - o.ap).abs());
    d = d.max((s.zeta.simplex - o.simplex).abs());
    for (a, b) in s.zeta.lower.iter().zip(&o.lower) {
        d = d.max((a - b).abs());
    }
    for (a, b) in s.zeta.upper.iter().zip(&o.upper) {
        d = d.max((a - b).abs());
    }
    d
}
