//! Primal active-set solver for strictly convex quadratic programs
//!
//! ```text
//! minimize ½ xᵀQx + cᵀx   s.t.  A_eq x = b_eq,  A_in x ≤ b_in,  l ≤ x ≤ u
//! ```
//!
//! Bounds are handled by fixing variables. Each equality-constrained
//! subproblem is solved on the free variables by a Cholesky factorization of
//! `Q_FF` and the Schur complement of the active general constraints.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct ConvexQp {
    pub q: DMatrix<f64>,
    pub c: DVector<f64>,
    pub a_eq: Vec<DVector<f64>>,
    pub b_eq: Vec<f64>,
    pub a_in: Vec<DVector<f64>>,
    pub b_in: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// Constraint identifiers, in the order used for tie-breaking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Constraint {
    Ineq(usize),
    Lower(usize),
    Upper(usize),
}

#[derive(Debug, Clone)]
pub struct QpResult {
    pub x: DVector<f64>,
    /// Multipliers of the equality rows (free sign).
    pub mu_eq: Vec<f64>,
    /// Multipliers of the inequality rows (≥ 0).
    pub mu_in: Vec<f64>,
    pub mu_lower: Vec<f64>,
    pub mu_upper: Vec<f64>,
    pub active: Vec<Constraint>,
    pub iterations: usize,
}

impl QpResult {
    /// Stationarity, primal feasibility and complementarity residuals combined
    /// in the infinity norm.
    pub fn kkt_residual(&self, qp: &ConvexQp) -> f64 {
        let n = self.x.len();
        let mut grad = &qp.q * &self.x + &qp.c;
        for (a, m) in qp.a_eq.iter().zip(&self.mu_eq) {
            grad.axpy(*m, a, 1.0);
        }
        for (a, m) in qp.a_in.iter().zip(&self.mu_in) {
            grad.axpy(*m, a, 1.0);
        }
        for j in 0..n {
            grad[j] += self.mu_upper[j] - self.mu_lower[j];
        }
        let mut res = grad.amax();
        for (a, b) in qp.a_eq.iter().zip(&qp.b_eq) {
            res = res.max((a.dot(&self.x) - b).abs());
        }
        for ((a, b), m) in qp.a_in.iter().zip(&qp.b_in).zip(&self.mu_in) {
            let slack = b - a.dot(&self.x);
            res = res.max((-slack).max(0.0)).max((m * slack).abs()).max((-m).max(0.0));
        }
        for j in 0..n {
            let lo = self.x[j] - qp.lower[j];
            let hi = qp.upper[j] - self.x[j];
            if qp.lower[j].is_finite() {
                res = res.max((-lo).max(0.0)).max((self.mu_lower[j] * lo).abs());
            }
            if qp.upper[j].is_finite() {
                res = res.max((-hi).max(0.0)).max((self.mu_upper[j] * hi).abs());
            }
            res = res.max((-self.mu_lower[j]).max(0.0)).max((-self.mu_upper[j]).max(0.0));
        }
        res
    }
}

impl ConvexQp {
    pub fn n(&self) -> usize {
        self.c.len()
    }

    fn check(&self) -> Result<()> {
        let n = self.n();
        if self.q.nrows() != n || self.q.ncols() != n {
            return Err(Error::invalid("QP curvature has wrong shape"));
        }
        if self.a_eq.len() != self.b_eq.len() || self.a_in.len() != self.b_in.len() {
            return Err(Error::invalid("QP constraint rows and bounds disagree"));
        }
        if self.a_eq.iter().chain(&self.a_in).any(|a| a.len() != n) {
            return Err(Error::invalid("QP constraint row has wrong length"));
        }
        if self.lower.len() != n || self.upper.len() != n {
            return Err(Error::invalid("QP bounds have wrong length"));
        }
        if self.lower.iter().zip(&self.upper).any(|(l, u)| l > u) {
            return Err(Error::invalid("QP bounds cross"));
        }
        Ok(())
    }

    /// Largest constraint violation at `x`.
    pub fn infeasibility(&self, x: &DVector<f64>) -> f64 {
        let mut v: f64 = 0.0;
        for (a, b) in self.a_eq.iter().zip(&self.b_eq) {
            v = v.max((a.dot(x) - b).abs());
        }
        for (a, b) in self.a_in.iter().zip(&self.b_in) {
            v = v.max(a.dot(x) - b);
        }
        for j in 0..self.n() {
            v = v.max(self.lower[j] - x[j]).max(x[j] - self.upper[j]);
        }
        v
    }

}

/// Equality-constrained step on the current working set.
struct Eqp {
    p: DVector<f64>,
    /// Multipliers of `[equalities…, active inequality rows…]`.
    mu: Vec<f64>,
}

fn solve_eqp(
    qp: &ConvexQp,
    grad: &DVector<f64>,
    fixed: &[bool],
    rows: &[&DVector<f64>],
) -> Result<Eqp> {
    let n = qp.n();
    let free: Vec<usize> = (0..n).filter(|&j| !fixed[j]).collect();
    let nf = free.len();
    let m = rows.len();
    let mut p = DVector::zeros(n);
    if nf == 0 {
        return Ok(Eqp { p, mu: vec![0.0; m] });
    }
    let qff = DMatrix::from_fn(nf, nf, |a, b| qp.q[(free[a], free[b])]);
    let chol = qff
        .cholesky()
        .ok_or_else(|| Error::numeric("QP curvature is not positive definite on the free set"))?;
    let gf = DVector::from_fn(nf, |a, _| grad[free[a]]);
    let qinv_g = chol.solve(&gf);
    let mut mu = DVector::zeros(m);
    let mut rhs_p = -qinv_g.clone();
    if m > 0 {
        let af = DMatrix::from_fn(m, nf, |r, a| rows[r][free[a]]);
        let qinv_at = chol.solve(&af.transpose());
        let schur = &af * &qinv_at;
        let rhs = -(&af * &qinv_g);
        // The working set is kept linearly independent, so the Schur complement is
        // positive definite; fall back to a pivoted solve when it is only barely so.
        mu = match schur.clone().cholesky() {
            Some(c) => c.solve(&rhs),
            None => schur
                .full_piv_lu()
                .solve(&rhs)
                .ok_or_else(|| Error::numeric("dependent active constraints in QP"))?,
        };
        rhs_p -= qinv_at * &mu;
    }
    for (a, &j) in free.iter().enumerate() {
        p[j] = rhs_p[a];
    }
    Ok(Eqp {
        p,
        mu: mu.iter().copied().collect(),
    })
}

/// Solves `qp` from the feasible point `x0`. Constraints active at `x0`
/// (within `1e-12`) start in the working set when they are bounds.
pub fn solve(qp: &ConvexQp, x0: &DVector<f64>, max_changes: usize) -> Result<QpResult> {
    qp.check()?;
    let n = qp.n();
    let scale = 1.0 + x0.amax();
    let feas_tol = 1e-10 * scale;
    if qp.infeasibility(x0) > feas_tol {
        return Err(Error::invalid("QP start point is infeasible"));
    }
    let mut x = x0.clone();
    let mut at_lower = vec![false; n];
    let mut at_upper = vec![false; n];
    for j in 0..n {
        if qp.lower[j] == qp.upper[j] || (x[j] - qp.lower[j]).abs() <= 1e-12 * scale {
            at_lower[j] = true;
            x[j] = qp.lower[j];
        } else if (x[j] - qp.upper[j]).abs() <= 1e-12 * scale {
            at_upper[j] = true;
            x[j] = qp.upper[j];
        }
    }
    let mut active_in: Vec<usize> = Vec::new();
    let mut changes = 0usize;
    let mut iterations = 0usize;
    let step_tol = 1e-13 * scale;
    let mut full_step = false;

    loop {
        iterations += 1;
        let fixed: Vec<bool> = (0..n).map(|j| at_lower[j] || at_upper[j]).collect();
        let grad = &qp.q * &x + &qp.c;
        let mut rows: Vec<&DVector<f64>> = qp.a_eq.iter().collect();
        rows.extend(active_in.iter().map(|&i| &qp.a_in[i]));
        let eqp = solve_eqp(qp, &grad, &fixed, &rows)?;

        // After an unblocked full step the iterate minimizes the working-set
        // subproblem; what remains of `p` is rounding.
        if full_step || eqp.p.amax() <= step_tol {
            full_step = false;
            // Multipliers on the working set.
            let n_eq = qp.a_eq.len();
            let mut mu_in = vec![0.0; qp.a_in.len()];
            for (k, &i) in active_in.iter().enumerate() {
                mu_in[i] = eqp.mu[n_eq + k];
            }
            let mut full = grad.clone();
            for (r, m) in rows.iter().zip(&eqp.mu) {
                full.axpy(*m, r, 1.0);
            }
            let mut mu_lower = vec![0.0; n];
            let mut mu_upper = vec![0.0; n];
            for j in 0..n {
                if at_lower[j] && qp.lower[j] == qp.upper[j] {
                    // Fixed variable: split the multiplier by sign.
                    if full[j] >= 0.0 {
                        mu_lower[j] = full[j];
                    } else {
                        mu_upper[j] = -full[j];
                    }
                } else if at_lower[j] {
                    mu_lower[j] = full[j];
                } else if at_upper[j] {
                    mu_upper[j] = -full[j];
                }
            }
            let mut worst: Option<(f64, Constraint)> = None;
            let mut consider = |val: f64, k: Constraint| {
                if val < 0.0 {
                    match worst {
                        Some((w, wk)) if val > w || (val == w && k > wk) => {}
                        _ => worst = Some((val, k)),
                    }
                }
            };
            let mult_scale = 1.0 + grad.amax();
            let dual_tol = 1e-12 * mult_scale;
            for &i in &active_in {
                if mu_in[i] < -dual_tol {
                    consider(mu_in[i], Constraint::Ineq(i));
                }
            }
            for j in 0..n {
                if qp.lower[j] == qp.upper[j] {
                    continue;
                }
                if at_lower[j] && mu_lower[j] < -dual_tol {
                    consider(mu_lower[j], Constraint::Lower(j));
                }
                if at_upper[j] && mu_upper[j] < -dual_tol {
                    consider(mu_upper[j], Constraint::Upper(j));
                }
            }
            match worst {
                None => {
                    let mut active: Vec<Constraint> = active_in.iter().map(|&i| Constraint::Ineq(i)).collect();
                    for j in 0..n {
                        if at_lower[j] {
                            active.push(Constraint::Lower(j));
                        }
                        if at_upper[j] {
                            active.push(Constraint::Upper(j));
                        }
                    }
                    active.sort();
                    return Ok(QpResult {
                        x,
                        mu_eq: eqp.mu[..n_eq].to_vec(),
                        mu_in,
                        mu_lower,
                        mu_upper,
                        active,
                        iterations,
                    });
                }
                Some((_, k)) => {
                    match k {
                        Constraint::Ineq(i) => active_in.retain(|&a| a != i),
                        Constraint::Lower(j) => at_lower[j] = false,
                        Constraint::Upper(j) => at_upper[j] = false,
                    }
                    changes += 1;
                }
            }
        } else {
            let p = &eqp.p;
            let mut alpha = 1.0;
            let mut blocking: Option<Constraint> = None;
            let update = |ratio: f64, k: Constraint, alpha: &mut f64, blocking: &mut Option<Constraint>| {
                let ratio = ratio.max(0.0);
                if ratio < *alpha || (ratio == *alpha && blocking.is_some_and(|b| k < b)) {
                    *alpha = ratio;
                    *blocking = Some(k);
                }
            };
            // Components of `p` at rounding level never block.
            let p_tol = 1e-9 * p.amax();
            for (i, (a, b)) in qp.a_in.iter().zip(&qp.b_in).enumerate() {
                if active_in.contains(&i) {
                    continue;
                }
                let ap = a.dot(p);
                if ap > p_tol * a.amax() {
                    update((b - a.dot(&x)) / ap, Constraint::Ineq(i), &mut alpha, &mut blocking);
                }
            }
            for j in 0..n {
                if at_lower[j] || at_upper[j] {
                    continue;
                }
                if p[j] < -p_tol && qp.lower[j].is_finite() {
                    update((qp.lower[j] - x[j]) / p[j], Constraint::Lower(j), &mut alpha, &mut blocking);
                }
                if p[j] > p_tol && qp.upper[j].is_finite() {
                    update((qp.upper[j] - x[j]) / p[j], Constraint::Upper(j), &mut alpha, &mut blocking);
                }
            }
            x.axpy(alpha, p, 1.0);
            for j in 0..n {
                x[j] = x[j].clamp(qp.lower[j], qp.upper[j]);
            }
            full_step = blocking.is_none();
            if let Some(k) = blocking {
                match k {
                    Constraint::Ineq(i) => active_in.push(i),
                    Constraint::Lower(j) => {
                        at_lower[j] = true;
                        x[j] = qp.lower[j];
                    }
                    Constraint::Upper(j) => {
                        at_upper[j] = true;
                        x[j] = qp.upper[j];
                    }
                }
                changes += 1;
            }
        }
        if changes > max_changes {
            return Err(Error::numeric(format!(
                "active-set solver exceeded {max_changes} working-set changes"
            )));
        }
    }
}
