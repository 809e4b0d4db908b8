//! Sequential quadratic programming for
//!
//! ```text
//! maximize P̄(θ)  s.t.  I(θ) ≥ I_req,  Σ θ_i x_i² ≤ σ_x²,  Σ θ_i = 1,  θ ≥ 0
//! ```
//!
//! Each iteration linearizes the constraints at `θᵏ`, models the objective
//! with a quasi-Newton curvature `H` (negative definite), solves the
//! resulting convex QP for a step `δ*`, and updates `H` by damped BFGS.
//! Constraint convention: `I_req − I(θ) ≤ 0`, `E{x²} − σ_x² ≤ 0`,
//! `Σθ − 1 = 0`, with nonnegative inequality multipliers.

pub mod qp;

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::awgn_info::{ap_gradient, mi_value_and_gradient, mutual_information, IrChannel, QuadratureConfig};
use crate::constellation::{second_moment, Constellation, Pmf};
use crate::error::{Error, Result};
use crate::markov_reward::{estimate_gradient, ChainModel, ChainState, EstimatorState};

use qp::{ConvexQp, Constraint};

/// Penalty on constraint violation in elastic mode.
pub const ELASTIC_PENALTY: f64 = 1e6;

#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub constellation: Constellation,
    pub channel: IrChannel,
    pub quadrature: QuadratureConfig,
    /// Required mutual information, bits per symbol.
    pub i_req: f64,
    /// Average-power budget, V².
    pub sigma_x2: f64,
}

impl ProblemSpec {
    pub fn validate(&self) -> Result<()> {
        let max_bits = self.constellation.max_bits();
        if !(self.i_req >= 0.0 && self.i_req <= max_bits) {
            return Err(Error::invalid(format!(
                "I_req = {} outside [0, log2 S = {max_bits}]",
                self.i_req
            )));
        }
        if !(self.sigma_x2 > 0.0 && self.sigma_x2.is_finite()) {
            return Err(Error::invalid("average-power budget must be positive"));
        }
        let min_power = self
            .constellation
            .amplitudes()
            .iter()
            .map(|x| x * x)
            .fold(f64::INFINITY, f64::min);
        if min_power > self.sigma_x2 {
            return Err(Error::invalid(format!(
                "average-power budget {} V² is below the smallest symbol power {min_power} V²",
                self.sigma_x2
            )));
        }
        self.quadrature.validate()
    }
}

/// The local model at `θᵏ`.
#[derive(Debug, Clone)]
pub struct QpProblem {
    pub g: Vec<f64>,
    /// Curvature after regularization (negative definite).
    pub h: DMatrix<f64>,
    /// Diagonal shift applied to make `h` negative definite.
    pub shift: f64,
    pub mi_val: f64,
    pub mi_grad: Vec<f64>,
    pub i_req: f64,
    pub ap_val: f64,
    pub ap_grad: Vec<f64>,
    pub sigma_x2: f64,
    pub theta: Vec<f64>,
    /// Per-coordinate step cap.
    pub trust_radius: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ActiveConstraint {
    Mi,
    Ap,
    /// `δ_j ≥ −θ_j` (or the trust-region floor when that is tighter).
    Lower(usize),
    Upper(usize),
}

impl fmt::Display for ActiveConstraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ActiveConstraint::Mi => write!(f, "MI"),
            ActiveConstraint::Ap => write!(f, "AP"),
            ActiveConstraint::Lower(j) => write!(f, "lb{j}"),
            ActiveConstraint::Upper(j) => write!(f, "ub{j}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Multipliers {
    pub mi: f64,
    pub ap: f64,
    pub simplex: f64,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub delta: Vec<f64>,
    pub zeta: Multipliers,
    pub active: Vec<ActiveConstraint>,
    /// The linearized constraints could not all be met; `delta` minimizes
    /// the penalized violation instead.
    pub relaxed: bool,
    pub kkt_residual: f64,
    pub iterations: usize,
}

fn snap(slack: f64, scale: f64) -> f64 {
    if slack < 0.0 && slack > -1e-10 * scale {
        0.0
    } else {
        slack
    }
}

fn max_eigenvalue(h: &DMatrix<f64>) -> f64 {
    let sym = (h + h.transpose()) * 0.5;
    sym.symmetric_eigenvalues().max()
}

/// Assembles the subproblem; `H` is shifted to `H − (µ + ε)I` when its largest
/// eigenvalue `µ` is not negative.
#[allow(clippy::too_many_arguments)]
pub fn build_qp(
    g: &[f64],
    h: &DMatrix<f64>,
    mi_val: f64,
    mi_grad: &[f64],
    ap_val: f64,
    ap_grad: &[f64],
    theta: &[f64],
    spec: &ProblemSpec,
    trust_radius: Option<f64>,
) -> Result<QpProblem> {
    let n = g.len();
    if h.nrows() != n || h.ncols() != n || mi_grad.len() != n || ap_grad.len() != n || theta.len() != n {
        return Err(Error::invalid("QP inputs have inconsistent dimensions"));
    }
    let mut h = (h + h.transpose()) * 0.5;
    let scale = h.amax().max(1.0);
    let eps = 1e-8 * scale;
    let mu = max_eigenvalue(&h);
    let mut shift = 0.0;
    if mu > -eps {
        shift = mu.max(0.0) + eps;
        for i in 0..n {
            h[(i, i)] -= shift;
        }
    }
    Ok(QpProblem {
        g: g.to_vec(),
        h,
        shift,
        mi_val,
        mi_grad: mi_grad.to_vec(),
        i_req: spec.i_req,
        ap_val,
        ap_grad: ap_grad.to_vec(),
        sigma_x2: spec.sigma_x2,
        theta: theta.to_vec(),
        trust_radius,
    })
}

impl QpProblem {
    pub fn n(&self) -> usize {
        self.g.len()
    }

    /// Whether `δ = 0` satisfies the linearized constraints.
    pub fn start_feasible(&self) -> bool {
        self.mi_slack() >= 0.0 && self.ap_slack() >= 0.0
    }

    /// `I(θ) − I_req`, with violations below rounding level read as zero.
    fn mi_slack(&self) -> f64 {
        snap(self.mi_val - self.i_req, self.i_req.abs().max(1.0))
    }

    /// `σ_x² − θᵀq`, with violations below rounding level read as zero.
    fn ap_slack(&self) -> f64 {
        snap(self.sigma_x2 - self.ap_val, self.sigma_x2.abs().max(1.0))
    }

    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let r = self.trust_radius.unwrap_or(f64::INFINITY);
        let lower = self.theta.iter().map(|t| (-t).max(-r).min(0.0)).collect();
        let upper = vec![r; self.n()];
        (lower, upper)
    }

    fn convex_form(&self, elastic: bool) -> ConvexQp {
        let n = self.n();
        let m = if elastic { n + 2 } else { n };
        let mut q = DMatrix::zeros(m, m);
        q.view_mut((0, 0), (n, n)).copy_from(&(-&self.h));
        let mut c = DVector::zeros(m);
        for i in 0..n {
            c[i] = -self.g[i];
        }
        let mut a_mi = DVector::zeros(m);
        let mut a_ap = DVector::zeros(m);
        let mut a_eq = DVector::zeros(m);
        for i in 0..n {
            a_mi[i] = -self.mi_grad[i];
            a_ap[i] = self.ap_grad[i];
            a_eq[i] = 1.0;
        }
        let (mut lower, mut upper) = self.bounds();
        if elastic {
            let curv = 1.0 + q.amax();
            for k in [n, n + 1] {
                q[(k, k)] = curv;
                c[k] = ELASTIC_PENALTY;
                lower.push(0.0);
                upper.push(f64::INFINITY);
            }
            a_mi[n] = -1.0;
            a_ap[n + 1] = -1.0;
        }
        ConvexQp {
            q,
            c,
            a_eq: vec![a_eq],
            b_eq: vec![0.0],
            a_in: vec![a_mi, a_ap],
            b_in: vec![self.mi_slack(), self.ap_slack()],
            lower,
            upper,
        }
    }
}

/// Solves the subproblem by the active-set method from `δ = 0`, switching to
/// elastic mode when `δ = 0` violates the linearized constraints.
pub fn solve_qp(p: &QpProblem) -> Result<QpSolution> {
    let n = p.n();
    let elastic = !p.start_feasible();
    let cq = p.convex_form(elastic);
    let mut x0 = DVector::zeros(cq.n());
    if elastic {
        x0[n] = (-p.mi_slack()).max(0.0);
        x0[n + 1] = (-p.ap_slack()).max(0.0);
    }
    let res = qp::solve(&cq, &x0, 10 * n.max(1))?;
    let kkt = res.kkt_residual(&cq);
    let relaxed = elastic && (res.x[n] > 1e-9 || res.x[n + 1] > 1e-9);
    let active = res
        .active
        .iter()
        .filter_map(|k| match *k {
            Constraint::Ineq(0) => Some(ActiveConstraint::Mi),
            Constraint::Ineq(_) => Some(ActiveConstraint::Ap),
            Constraint::Lower(j) if j < n => Some(ActiveConstraint::Lower(j)),
            Constraint::Upper(j) if j < n => Some(ActiveConstraint::Upper(j)),
            _ => None,
        })
        .collect();
    Ok(QpSolution {
        delta: res.x.iter().take(n).copied().collect(),
        zeta: Multipliers {
            mi: res.mu_in[0],
            ap: res.mu_in[1],
            simplex: res.mu_eq[0],
            lower: res.mu_lower[..n].to_vec(),
            upper: res.mu_upper[..n].to_vec(),
        },
        active,
        relaxed,
        kkt_residual: kkt,
        iterations: res.iterations,
    })
}

/// `H′ = H − (Hδ)(Hδ)ᵀ/(δᵀHδ) + yyᵀ/(yᵀδ)` with Powell damping: when
/// `s·yᵀδ < 0.2·s·δᵀHδ` for `s = sign(δᵀHδ)`, `y` is replaced by
/// `φy + (1 − φ)Hδ` with `φ = 0.8 δᵀHδ / (δᵀHδ − yᵀδ)`.
pub fn bfgs_update(h: &DMatrix<f64>, delta: &[f64], y: &[f64]) -> DMatrix<f64> {
    let d = DVector::from_column_slice(delta);
    let mut y = DVector::from_column_slice(y);
    let hd = h * &d;
    let dhd = d.dot(&hd);
    if dhd == 0.0 || !dhd.is_finite() {
        return h.clone();
    }
    let s = dhd.signum();
    let yd = y.dot(&d);
    if s * yd < 0.2 * s * dhd {
        let phi = 0.8 * dhd / (dhd - yd);
        y = &y * phi + &hd * (1.0 - phi);
    }
    let yd = y.dot(&d);
    if yd == 0.0 || !yd.is_finite() {
        return h.clone();
    }
    let out = h - (&hd * hd.transpose()) / dhd + (&y * y.transpose()) / yd;
    (&out + out.transpose()) * 0.5
}

/// An objective to maximize: a value and gradient estimate at `θ`.
pub trait Objective {
    fn evaluate(&mut self, theta: &Pmf, n_steps: usize) -> Result<(f64, Vec<f64>)>;
    /// Deterministic objectives get a monotone step safeguard.
    fn is_deterministic(&self) -> bool;
}

/// `P̄(θ) = θᵀq`, a memoryless harvester.
#[derive(Debug, Clone)]
pub struct LinearReward {
    pub q: Vec<f64>,
}

impl Objective for LinearReward {
    fn evaluate(&mut self, theta: &Pmf, _n_steps: usize) -> Result<(f64, Vec<f64>)> {
        let v = theta.probs().iter().zip(&self.q).map(|(t, q)| t * q).sum();
        Ok((v, self.q.clone()))
    }

    fn is_deterministic(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorPersistence {
    /// `f`, `z` and `P̃` carry over between iterations.
    All,
    /// `f` restarts every iteration; `z` and `P̃` carry over.
    ResetDirection,
}

/// Average reward of a Markov reward chain, estimated by simulation.
pub struct ChainObjective<'a, M: ChainModel + ?Sized, R: Rng> {
    pub model: &'a M,
    pub estimator: EstimatorState,
    pub chain: ChainState,
    pub rng: R,
    pub persistence: EstimatorPersistence,
}

impl<'a, M: ChainModel + ?Sized, R: Rng> ChainObjective<'a, M, R> {
    pub fn new(model: &'a M, gamma: f64, alpha: f64, persistence: EstimatorPersistence, rng: R) -> Result<Self> {
        Ok(Self {
            model,
            estimator: EstimatorState::new(model.n_symbols(), gamma, alpha)?,
            chain: ChainState { xi: 0.0 },
            rng,
            persistence,
        })
    }
}

impl<M: ChainModel + ?Sized, R: Rng> Objective for ChainObjective<'_, M, R> {
    fn evaluate(&mut self, theta: &Pmf, n_steps: usize) -> Result<(f64, Vec<f64>)> {
        if self.persistence == EstimatorPersistence::ResetDirection {
            self.estimator.reset_direction();
        }
        let est = estimate_gradient(
            self.model,
            theta,
            n_steps,
            &mut self.estimator,
            &mut self.chain,
            &mut self.rng,
        )?;
        Ok((est.p_tilde, est.direction))
    }

    fn is_deterministic(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub n_max: usize,
    pub gamma: f64,
    pub alpha: f64,
    /// Chain steps per gradient estimate.
    pub n_steps: usize,
    pub n_steps_growth: f64,
    pub n_steps_max: usize,
    pub step_tol: f64,
    pub kkt_tol: f64,
    pub trust_radius: f64,
    /// Apply the full QP step without the trust-region cap.
    pub paper_faithful_steps: bool,
    pub persistence: EstimatorPersistence,
    /// Consecutive relaxed subproblems tolerated before giving up.
    pub max_relaxed: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            n_max: 4000,
            gamma: 0.1,
            alpha: 0.1,
            n_steps: 2000,
            n_steps_growth: 1.5,
            n_steps_max: 64_000,
            step_tol: 1e-6,
            kkt_tol: 1e-4,
            trust_radius: 0.2,
            paper_faithful_steps: false,
            persistence: EstimatorPersistence::All,
            max_relaxed: 25,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_max == 0 || self.n_steps == 0 {
            return Err(Error::invalid("n_max and n_steps must be positive"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::invalid("gamma must lie in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(Error::invalid("alpha must lie in [0, 1)"));
        }
        if !(self.n_steps_growth >= 1.0) {
            return Err(Error::invalid("n_steps_growth must be at least 1"));
        }
        if !(self.trust_radius > 0.0) {
            return Err(Error::invalid("trust radius must be positive"));
        }
        if !(self.step_tol > 0.0 && self.kkt_tol > 0.0) {
            return Err(Error::invalid("tolerances must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub k: usize,
    pub p_tilde: f64,
    pub mi: f64,
    pub step_norm: f64,
    pub kkt_residual: f64,
    pub active: Vec<ActiveConstraint>,
}

pub const TRACE_HEADER: &str = "k,P_tilde_W,I_bits,step_norm,kkt_residual,active_constraints";

pub fn trace_to_csv(rows: &[TraceRow]) -> String {
    let mut s = String::from(TRACE_HEADER);
    s.push('\n');
    for r in rows {
        let active: Vec<String> = r.active.iter().map(|a| a.to_string()).collect();
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.k,
            crate::io::fmt17(r.p_tilde),
            crate::io::fmt17(r.mi),
            crate::io::fmt17(r.step_norm),
            crate::io::fmt17(r.kkt_residual),
            active.join(";")
        ));
    }
    s
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub theta: Pmf,
    /// Objective estimate at `theta`, in the objective's units.
    pub p_bar: f64,
    pub mi: f64,
    pub ap: f64,
    /// Multipliers of the MI, AP and simplex constraints.
    pub lambda: [f64; 3],
    pub iterations: usize,
    pub converged: bool,
    pub diagnostic: Option<String>,
    pub trace: Vec<TraceRow>,
}

/// Maximum-entropy pmf under the AP budget: uniform when affordable,
/// otherwise `θ_i ∝ exp(−β x_i²)` with `β` chosen so `E{x²} = σ_x²`.
pub fn initial_pmf(c: &Constellation, sigma_x2: f64) -> Result<Pmf> {
    let u = Pmf::uniform(c.len());
    if second_moment(c, &u)? <= sigma_x2 {
        return Ok(u);
    }
    let p: Vec<f64> = c.amplitudes().iter().map(|x| x * x).collect();
    let pmin = p.iter().copied().fold(f64::INFINITY, f64::min);
    if pmin > sigma_x2 {
        return Err(Error::invalid("no pmf meets the average-power budget"));
    }
    let scale = p.iter().copied().fold(0.0, f64::max).max(1e-300);
    let gibbs = |beta: f64| -> Vec<f64> {
        let w: Vec<f64> = p.iter().map(|q| (-beta * (q - pmin) / scale).exp()).collect();
        let s: f64 = w.iter().sum();
        w.into_iter().map(|v| v / s).collect()
    };
    let moment = |th: &[f64]| th.iter().zip(&p).map(|(t, q)| t * q).sum::<f64>();
    let (mut lo, mut hi) = (0.0, 1.0);
    while moment(&gibbs(hi)) > sigma_x2 {
        hi *= 2.0;
        if hi > 1e12 {
            break;
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if moment(&gibbs(mid)) > sigma_x2 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Pmf::new(gibbs(hi))
}

fn to_pmf(v: &[f64]) -> Result<Pmf> {
    let clean: Vec<f64> = v.iter().map(|x| x.max(0.0)).collect();
    Pmf::from_weights(&clean)
}

fn mix(a: &[f64], b: &[f64], t: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| (1.0 - t) * x + t * y).collect()
}

struct Restore<'a> {
    spec: &'a ProblemSpec,
    anchor: Vec<f64>,
    anchor_mi: f64,
}

impl Restore<'_> {
    fn mi(&self, th: &[f64]) -> Result<f64> {
        mutual_information(&self.spec.constellation, &to_pmf(th)?, &self.spec.channel, &self.spec.quadrature)
    }

    /// Pulls `theta` toward the anchor until the MI requirement holds again.
    fn apply(&self, theta: Vec<f64>) -> Result<(Vec<f64>, f64)> {
        let mi = self.mi(&theta)?;
        if mi >= self.spec.i_req || self.anchor_mi < self.spec.i_req {
            return Ok((theta, mi));
        }
        // Illinois iteration on f(t) = I(mix(t)) − I_req, f(0) < 0 ≤ f(1).
        let target = self.spec.i_req;
        let (mut lo, mut f_lo) = (0.0, mi - target);
        let (mut hi, mut f_hi) = (1.0, self.anchor_mi - target);
        let mut hi_mi = self.anchor_mi;
        let mut side = 0i8;
        for _ in 0..60 {
            let mut t = (lo * f_hi - hi * f_lo) / (f_hi - f_lo);
            if !(t > lo && t < hi) {
                t = 0.5 * (lo + hi);
            }
            let m = self.mi(&mix(&theta, &self.anchor, t))?;
            let f = m - target;
            if f >= 0.0 {
                hi = t;
                f_hi = f;
                hi_mi = m;
                if side == 1 {
                    f_lo *= 0.5;
                }
                side = 1;
            } else {
                lo = t;
                f_lo = f;
                if side == -1 {
                    f_hi *= 0.5;
                }
                side = -1;
            }
            if f_hi <= 1e-9 * target.max(1.0) || hi - lo < 1e-12 {
                break;
            }
        }
        Ok((mix(&theta, &self.anchor, hi), hi_mi))
    }
}

/// Runs the SQP iteration on `objective` from the maximum-entropy start.
pub fn solve<O: Objective + ?Sized>(spec: &ProblemSpec, cfg: &SolverConfig, objective: &mut O) -> Result<Solution> {
    spec.validate()?;
    cfg.validate()?;
    let c = &spec.constellation;
    let n = c.len();
    let ap_grad = ap_gradient(c);
    let theta0 = initial_pmf(c, spec.sigma_x2)?;
    let restore = Restore {
        spec,
        anchor: theta0.probs().to_vec(),
        anchor_mi: mutual_information(c, &theta0, &spec.channel, &spec.quadrature)?,
    };
    let (start, _) = restore.apply(theta0.probs().to_vec())?;
    let mut theta = to_pmf(&start)?;
    let mut h = -DMatrix::<f64>::identity(n, n);
    let mut lambda = [0.0; 3];
    let mut n_steps = cfg.n_steps;
    let trust = if cfg.paper_faithful_steps {
        None
    } else {
        Some(cfg.trust_radius)
    };
    let deterministic = objective.is_deterministic();

    let (mut value, g_raw) = objective.evaluate(&theta, n_steps)?;
    let p_ref = g_raw.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    let mut g: Vec<f64> = g_raw.iter().map(|v| v / p_ref).collect();
    let (mut mi, mut mi_grad) = mi_value_and_gradient(c, &theta, &spec.channel, &spec.quadrature)?;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut relaxed_run = 0usize;
    let mut diagnostic = None;
    let mut recent_steps: Vec<f64> = Vec::new();
    let mut best_feasible: Option<(Pmf, f64, f64)> = None;
    let mut iterations = 0;

    for k in 1..=cfg.n_max {
        iterations = k;
        let ap_val = second_moment(c, &theta)?;
        let qpp = build_qp(&g, &h, mi, &mi_grad, ap_val, &ap_grad, theta.probs(), spec, trust)?;
        let sol = solve_qp(&qpp)?;
        let step_norm = sol.delta.iter().map(|d| d * d).sum::<f64>().sqrt();
        let hd = &qpp.h * DVector::from_column_slice(&sol.delta);
        let kkt = hd.amax() + sol.kkt_residual;
        trace.push(TraceRow {
            k,
            p_tilde: value,
            mi,
            step_norm,
            kkt_residual: kkt,
            active: sol.active.clone(),
        });
        if mi >= spec.i_req - 1e-9 && ap_val <= spec.sigma_x2 + 1e-8 {
            let better = best_feasible.as_ref().is_none_or(|b| !deterministic || value >= b.1);
            if better {
                best_feasible = Some((theta.clone(), value, mi));
            }
        }
        if sol.relaxed {
            relaxed_run += 1;
            if relaxed_run > cfg.max_relaxed {
                diagnostic = Some(format!(
                    "linearized constraints infeasible for {relaxed_run} consecutive iterations"
                ));
                break;
            }
        } else {
            relaxed_run = 0;
        }
        if step_norm < cfg.step_tol && kkt < cfg.kkt_tol && !sol.relaxed {
            lambda = [sol.zeta.mi, sol.zeta.ap, sol.zeta.simplex];
            converged = true;
            break;
        }

        // Candidate iterate, restored onto the MI-feasible side.
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..if deterministic { 40 } else { 1 } {
            let cand: Vec<f64> = theta
                .probs()
                .iter()
                .zip(&sol.delta)
                .map(|(a, d)| a + t * d)
                .collect();
            let (cand, cand_mi) = restore.apply(cand)?;
            let cand = to_pmf(&cand)?;
            if !deterministic {
                accepted = Some((cand, cand_mi));
                break;
            }
            let (v, _) = objective.evaluate(&cand, n_steps)?;
            if v >= value - 1e-12 * value.abs().max(1e-300) {
                accepted = Some((cand, cand_mi));
                break;
            }
            t *= 0.5;
        }
        let Some((new_theta, _)) = accepted else {
            lambda = [sol.zeta.mi, sol.zeta.ap, sol.zeta.simplex];
            converged = true;
            diagnostic = Some("no ascent along the quadratic-model step".into());
            break;
        };
        let delta: Vec<f64> = new_theta
            .probs()
            .iter()
            .zip(theta.probs())
            .map(|(a, b)| a - b)
            .collect();

        let (new_value, g_new_raw) = objective.evaluate(&new_theta, n_steps)?;
        let g_new: Vec<f64> = g_new_raw.iter().map(|v| v / p_ref).collect();
        let (new_mi, new_mi_grad) = mi_value_and_gradient(c, &new_theta, &spec.channel, &spec.quadrature)?;
        lambda = [sol.zeta.mi, sol.zeta.ap, sol.zeta.simplex];
        // ∇L = g + λ₁∇I − λ₂∇E{x²} − λ₃1; the linear terms cancel in the difference.
        let y: Vec<f64> = (0..n)
            .map(|i| (g_new[i] - g[i]) + lambda[0] * (new_mi_grad[i] - mi_grad[i]))
            .collect();
        if delta.iter().any(|d| *d != 0.0) {
            h = bfgs_update(&h, &delta, &y);
        }
        if !h.iter().all(|v| v.is_finite()) {
            return Err(Error::numeric("quasi-Newton curvature became non-finite"));
        }

        // Longer chain runs once the step size stops shrinking.
        if !deterministic {
            let stalled = recent_steps.len() >= 3
                && step_norm >= 0.95 * recent_steps.iter().copied().fold(f64::INFINITY, f64::min);
            recent_steps.push(step_norm);
            if recent_steps.len() > 3 {
                recent_steps.remove(0);
            }
            if stalled {
                n_steps = ((n_steps as f64 * cfg.n_steps_growth) as usize).min(cfg.n_steps_max.max(cfg.n_steps));
                recent_steps.clear();
            }
        }

        theta = new_theta;
        value = new_value;
        g = g_new;
        mi = new_mi;
        mi_grad = new_mi_grad;
    }

    let feasible_now = mi >= spec.i_req - 1e-9 && second_moment(c, &theta)? <= spec.sigma_x2 + 1e-8;
    if !feasible_now {
        if let Some((th, v, m)) = best_feasible {
            theta = th;
            value = v;
            mi = m;
            diagnostic.get_or_insert_with(|| "returned the best feasible iterate".into());
        }
    }
    let ap = second_moment(c, &theta)?;
    Ok(Solution {
        theta,
        p_bar: value,
        mi,
        ap,
        lambda,
        iterations,
        converged,
        diagnostic,
        trace,
    })
}
