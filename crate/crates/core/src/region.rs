//! Channel sampling, rate-power region sweeps and the memoryless baseline.
//!
//! Every sweep point is keyed by `(realization, regime, T, I_req)`. Work is
//! grouped by `(realization, regime, T)` so a group shares one channel draw
//! and one circuit cache; each group owns named random streams, so results do
//! not depend on scheduling or worker count.

use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::awgn_info::{IrChannel, QuadratureConfig};
use crate::constellation::{Constellation, Pmf};
use crate::eh_circuit::{generate_dataset, CircuitParams, Rectifier};
use crate::error::{Error, Result};
use crate::io::fmt17;
use crate::markov_reward::{average_reward, Backend, ChainState, CircuitBackend, EhModel};
use crate::rng::{derive_seed, stream};
use crate::sqp::{self, ChainObjective, LinearReward, ProblemSpec, Solution, SolverConfig};
use crate::surrogate::{SurrogatePair, TrainConfig, TrainReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Sp,
    Lp,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Sp => "SP",
            Regime::Lp => "LP",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub d_ir: f64,
    pub d_eh: f64,
    pub ir_exponent: f64,
    pub eh_exponent: f64,
    pub rician_k: f64,
    pub regime: Regime,
}

impl Geometry {
    pub fn validate(&self) -> Result<()> {
        if !(self.d_ir > 0.0 && self.d_eh > 0.0) {
            return Err(Error::invalid("distances must be positive"));
        }
        if !(self.rician_k >= 0.0) {
            return Err(Error::invalid("Rician factor must be non-negative"));
        }
        if !(self.ir_exponent.is_finite() && self.eh_exponent.is_finite()) {
            return Err(Error::invalid("pathloss exponents must be finite"));
        }
        Ok(())
    }

    pub fn ir_pathloss(&self) -> f64 {
        self.d_ir.powf(-self.ir_exponent)
    }

    pub fn eh_pathloss(&self) -> f64 {
        self.d_eh.powf(-self.eh_exponent)
    }

    /// Gains from three unit Gaussians `(g₁, g₂)` for the Rayleigh IR link and
    /// `g′` for the Rician EH link.
    pub fn gains(&self, g1: f64, g2: f64, g_eh: f64) -> (f64, f64) {
        let h_i = self.ir_pathloss().sqrt() * ((g1 * g1 + g2 * g2) / 2.0).sqrt();
        let k = self.rician_k;
        let los = (k / (k + 1.0)).sqrt();
        let scatter = (1.0 / (2.0 * (k + 1.0))).sqrt();
        let h_e = self.eh_pathloss().sqrt() * (los + scatter * g_eh).abs();
        (h_i, h_e)
    }
}

/// Draws `(h_I, h_E)`: a Rayleigh amplitude with `E{h_I²}` equal to the IR
/// pathloss and the magnitude of a real Rician EH gain.
pub fn sample_channels<R: Rng + ?Sized>(geo: &Geometry, rng: &mut R) -> (f64, f64) {
    let g1: f64 = rng.sample(StandardNormal);
    let g2: f64 = rng.sample(StandardNormal);
    let g3: f64 = rng.sample(StandardNormal);
    geo.gains(g1, g2, g3)
}

/// Physical setting shared by every point of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub constellation: Constellation,
    /// Average transmit power budget in V² (1 Ω reference).
    pub sigma_x2: f64,
    pub sigma_n2: f64,
    pub quadrature: QuadratureConfig,
    pub d_ir: f64,
    pub d_eh_sp: f64,
    pub d_eh_lp: f64,
    pub ir_exponent: f64,
    pub eh_exponent: f64,
    pub rician_k: f64,
    /// Link gain in dB from the transmit amplitude to the received power.
    pub eh_link_gain_db: f64,
    /// Circuit parameters; `t` is overridden per sweep duration.
    pub circuit: CircuitParams,
}

impl Scenario {
    pub fn geometry(&self, regime: Regime) -> Geometry {
        Geometry {
            d_ir: self.d_ir,
            d_eh: match regime {
                Regime::Sp => self.d_eh_sp,
                Regime::Lp => self.d_eh_lp,
            },
            ir_exponent: self.ir_exponent,
            eh_exponent: self.eh_exponent,
            rician_k: self.rician_k,
            regime,
        }
    }

    /// Antenna EMF amplitude per transmitted volt for EH gain `h_e`: the
    /// received power `(g h_E x)²` into `R_s` has EMF `√(8 R_s)·g h_E x`.
    pub fn eh_gain(&self, h_e: f64) -> f64 {
        (8.0 * self.circuit.r_s).sqrt() * 10f64.powf(self.eh_link_gain_db / 20.0) * h_e
    }

    pub fn circuit_at(&self, t: f64) -> CircuitParams {
        CircuitParams {
            t,
            ..self.circuit.clone()
        }
    }

    pub fn problem(&self, h_i: f64, i_req: f64) -> Result<ProblemSpec> {
        Ok(ProblemSpec {
            constellation: self.constellation.clone(),
            channel: IrChannel::new(h_i, self.sigma_n2)?,
            quadrature: self.quadrature,
            i_req,
            sigma_x2: self.sigma_x2,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry(Regime::Sp).validate()?;
        self.geometry(Regime::Lp).validate()?;
        self.circuit.validate()?;
        self.quadrature.validate()?;
        if !(self.sigma_x2 > 0.0 && self.sigma_n2 > 0.0) {
            return Err(Error::invalid("power budget and noise variance must be positive"));
        }
        if !self.eh_link_gain_db.is_finite() {
            return Err(Error::invalid("EH link gain must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionGrid {
    pub regimes: Vec<Regime>,
    pub symbol_durations: Vec<f64>,
    pub i_req: Vec<f64>,
}

impl RegionGrid {
    pub fn validate(&self, c: &Constellation) -> Result<()> {
        if self.regimes.is_empty() || self.symbol_durations.is_empty() || self.i_req.is_empty() {
            return Err(Error::invalid("sweep grid must be non-empty"));
        }
        if self.symbol_durations.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
            return Err(Error::invalid("symbol durations must be positive"));
        }
        if self.i_req.iter().any(|i| !(*i >= 0.0 && *i <= c.max_bits())) {
            return Err(Error::invalid(format!(
                "rate requirements must lie in [0, {}] bits",
                c.max_bits()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub realizations: usize,
    /// Chain steps of the circuit re-evaluation after burn-in.
    pub eval_steps: usize,
    pub eval_burn_in: usize,
    pub solver: SolverConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            realizations: 100,
            eval_steps: 10_000,
            eval_burn_in: 1_000,
            solver: SolverConfig::default(),
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.realizations == 0 {
            return Err(Error::invalid("at least one channel realization is required"));
        }
        if self.eval_steps < 10_000 {
            return Err(Error::invalid("circuit re-evaluation needs at least 10000 steps"));
        }
        self.solver.validate()
    }
}

/// The model the optimizer runs on. Reported power is always re-evaluated on
/// the circuit.
#[derive(Debug, Clone, Copy)]
pub enum SolverBackend<'a> {
    Circuit,
    /// One trained pair per symbol duration, matched on `t_s`.
    Surrogate(&'a [SurrogatePair]),
}

impl SolverBackend<'_> {
    fn surrogate_for(&self, t: f64) -> Result<Option<SurrogatePair>> {
        match self {
            SolverBackend::Circuit => Ok(None),
            SolverBackend::Surrogate(pairs) => pairs
                .iter()
                .find(|p| (p.t_s - t).abs() <= 1e-9 * t)
                .cloned()
                .map(Some)
                .ok_or_else(|| Error::invalid(format!("no surrogate trained for T = {t:e} s"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Proposed,
    Baseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionPoint {
    pub scheme: Scheme,
    pub regime: Regime,
    pub realization: usize,
    pub t_s: f64,
    pub i_req: f64,
    /// Achieved mutual information in bits per symbol.
    pub i_bits: f64,
    pub rate_bps: f64,
    /// Average harvested power on the circuit, in watts.
    pub avg_power_w: f64,
    /// The optimizer's own objective estimate.
    pub objective_w: f64,
    pub h_i: f64,
    pub h_e: f64,
    pub iterations: usize,
    pub converged: bool,
    pub diagnostic: Option<String>,
    pub theta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointFailure {
    pub scheme: Scheme,
    pub regime: Regime,
    pub realization: usize,
    pub t_s: f64,
    pub i_req: f64,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RegionResult {
    pub points: Vec<RegionPoint>,
    pub failures: Vec<PointFailure>,
}

impl RegionResult {
    fn sort(&mut self) {
        let key = |s: Scheme, g: Regime, r: usize, t: f64, i: f64| (s as u8, g, r, t.to_bits(), i.to_bits());
        self.points
            .sort_by_key(|p| key(p.scheme, p.regime, p.realization, p.t_s, p.i_req));
        self.failures
            .sort_by_key(|p| key(p.scheme, p.regime, p.realization, p.t_s, p.i_req));
    }

    pub fn extend(&mut self, other: RegionResult) {
        self.points.extend(other.points);
        self.failures.extend(other.failures);
        self.sort();
    }

    /// Realization averages per `(scheme, regime, T, I_req)`.
    pub fn means(&self) -> Vec<MeanPoint> {
        let mut out: Vec<MeanPoint> = Vec::new();
        for p in &self.points {
            let slot = out.iter_mut().find(|m| {
                m.scheme == p.scheme && m.regime == p.regime && m.t_s == p.t_s && m.i_req == p.i_req
            });
            let m = match slot {
                Some(m) => m,
                None => {
                    out.push(MeanPoint {
                        scheme: p.scheme,
                        regime: p.regime,
                        t_s: p.t_s,
                        i_req: p.i_req,
                        i_bits: 0.0,
                        rate_bps: 0.0,
                        avg_power_w: 0.0,
                        count: 0,
                    });
                    out.last_mut().expect("just pushed")
                }
            };
            m.i_bits += p.i_bits;
            m.rate_bps += p.rate_bps;
            m.avg_power_w += p.avg_power_w;
            m.count += 1;
        }
        for m in &mut out {
            let n = m.count as f64;
            m.i_bits /= n;
            m.rate_bps /= n;
            m.avg_power_w /= n;
        }
        out.sort_by_key(|m| (m.scheme as u8, m.regime, m.t_s.to_bits(), m.i_req.to_bits()));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanPoint {
    pub scheme: Scheme,
    pub regime: Regime,
    pub t_s: f64,
    pub i_req: f64,
    pub i_bits: f64,
    pub rate_bps: f64,
    pub avg_power_w: f64,
    pub count: usize,
}

struct Group {
    realization: usize,
    regime: Regime,
    t: f64,
}

fn groups(grid: &RegionGrid, realizations: usize) -> Vec<Group> {
    let mut out = Vec::new();
    for r in 0..realizations {
        for &regime in &grid.regimes {
            for &t in &grid.symbol_durations {
                out.push(Group {
                    realization: r,
                    regime,
                    t,
                });
            }
        }
    }
    out
}

fn run_groups<F>(groups: &[Group], f: F) -> RegionResult
where
    F: Fn(&Group) -> RegionResult + Sync,
{
    #[cfg(feature = "parallel")]
    let parts: Vec<RegionResult> = {
        use rayon::prelude::*;
        groups.par_iter().map(&f).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let parts: Vec<RegionResult> = groups.iter().map(&f).collect();
    let mut out = RegionResult::default();
    for p in parts {
        out.points.extend(p.points);
        out.failures.extend(p.failures);
    }
    out.sort();
    out
}

/// Channel draw of realization `r`. SP and LP share the underlying Gaussians.
pub fn realization_channels(sc: &Scenario, seed: u64, regime: Regime, r: usize) -> (f64, f64) {
    let mut rng = stream(seed, &format!("channel-{r}"));
    sample_channels(&sc.geometry(regime), &mut rng)
}

fn tag(regime: Regime, t: f64, i_req: f64, r: usize) -> String {
    format!("{regime}-{t:e}-{i_req}-{r}")
}

/// Time-averaged circuit power of `theta`, with the symbol stream of
/// realization `r` shared by every point that uses it.
fn circuit_power(model: &EhModel, theta: &Pmf, cfg: &SweepConfig, seed: u64, r: usize) -> Result<f64> {
    let mut rng = stream(seed, &format!("evaluate-{r}"));
    let mut chain = ChainState { xi: 0.0 };
    average_reward(model, theta, cfg.eval_burn_in, cfg.eval_steps, &mut chain, &mut rng)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointKey {
    pub regime: Regime,
    pub realization: usize,
    pub t: f64,
    pub i_req: f64,
}

/// One chain-objective solve on `solver_model`, with the solution's power
/// re-evaluated on `circuit`.
pub fn solve_point(
    sc: &Scenario,
    key: &PointKey,
    h_i: f64,
    solver_model: &EhModel,
    circuit: &EhModel,
    cfg: &SweepConfig,
    seed: u64,
) -> Result<(Solution, f64)> {
    let spec = sc.problem(h_i, key.i_req)?;
    let rng = stream(
        seed,
        &format!("solve-{}", tag(key.regime, key.t, key.i_req, key.realization)),
    );
    let mut obj = ChainObjective::new(
        solver_model,
        cfg.solver.gamma,
        cfg.solver.alpha,
        cfg.solver.persistence,
        rng,
    )?;
    let sol = sqp::solve(&spec, &cfg.solver, &mut obj)?;
    let p = circuit_power(circuit, &sol.theta, cfg, seed, key.realization)?;
    Ok((sol, p))
}

/// Result of [`optimize_point`].
#[derive(Debug, Clone)]
pub struct PointSolution {
    pub solution: Solution,
    pub avg_power_w: f64,
    pub h_i: f64,
    pub h_e: f64,
}

/// The sweep point `key` on its own, drawing the same channel and streams as
/// [`trace_region`].
pub fn optimize_point(
    sc: &Scenario,
    key: &PointKey,
    cfg: &SweepConfig,
    surrogate: Option<SurrogatePair>,
    seed: u64,
) -> Result<PointSolution> {
    sc.validate()?;
    cfg.solver.validate()?;
    let c = &sc.constellation;
    let (h_i, h_e) = realization_channels(sc, seed, key.regime, key.realization);
    let gain = sc.eh_gain(h_e);
    let circuit = EhModel::new(
        Backend::Circuit(CircuitBackend::new(Rectifier::new(sc.circuit_at(key.t))?)),
        c,
        gain,
    )?;
    let surrogate = match surrogate {
        Some(pair) => Some(EhModel::new(Backend::Surrogate(pair), c, gain)?),
        None => None,
    };
    let (solution, avg_power_w) = solve_point(
        sc,
        key,
        h_i,
        surrogate.as_ref().unwrap_or(&circuit),
        &circuit,
        cfg,
        seed,
    )?;
    Ok(PointSolution {
        solution,
        avg_power_w,
        h_i,
        h_e,
    })
}

/// Dataset seed for symbol duration `t`.
pub fn dataset_seed(seed: u64, t: f64) -> u64 {
    derive_seed(seed, &format!("dataset-{t:e}"))
}

/// Generates a dataset on the circuit at duration `t` and trains a pair on
/// it, with seeds derived from `seed`.
pub fn train_surrogate(
    sc: &Scenario,
    t: f64,
    samples: usize,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(SurrogatePair, TrainReport, TrainReport)> {
    let rect = Rectifier::new(sc.circuit_at(t))?;
    let data = generate_dataset(&rect, samples, rect.params().amp_max, dataset_seed(seed, t))?;
    let cfg = TrainConfig {
        seed: derive_seed(seed, &format!("train-{t:e}")),
        ..cfg.clone()
    };
    SurrogatePair::train(&rect, &data, &cfg)
}

/// Solves every grid point with the chain objective on `backend` and reports
/// power re-evaluated on the circuit.
pub fn trace_region(
    sc: &Scenario,
    grid: &RegionGrid,
    cfg: &SweepConfig,
    backend: SolverBackend<'_>,
    seed: u64,
) -> Result<RegionResult> {
    sc.validate()?;
    grid.validate(&sc.constellation)?;
    cfg.validate()?;
    for &t in &grid.symbol_durations {
        backend.surrogate_for(t)?;
    }
    let c = &sc.constellation;
    Ok(run_groups(&groups(grid, cfg.realizations), |g| {
        let mut out = RegionResult::default();
        let (h_i, h_e) = realization_channels(sc, seed, g.regime, g.realization);
        let gain = sc.eh_gain(h_e);
        let fail = |i_req: f64, e: Error| PointFailure {
            scheme: Scheme::Proposed,
            regime: g.regime,
            realization: g.realization,
            t_s: g.t,
            i_req,
            error: e.to_string(),
        };
        let build = || -> Result<(EhModel, Option<EhModel>)> {
            let circuit = EhModel::new(
                Backend::Circuit(CircuitBackend::new(Rectifier::new(sc.circuit_at(g.t))?)),
                c,
                gain,
            )?;
            let surrogate = match backend.surrogate_for(g.t)? {
                Some(pair) => Some(EhModel::new(Backend::Surrogate(pair), c, gain)?),
                None => None,
            };
            Ok((circuit, surrogate))
        };
        let (circuit, surrogate) = match build() {
            Ok(m) => m,
            Err(e) => {
                out.failures
                    .extend(grid.i_req.iter().map(|&i| fail(i, Error::numeric(e.to_string()))));
                return out;
            }
        };
        let solver_model = surrogate.as_ref().unwrap_or(&circuit);
        for &i_req in &grid.i_req {
            let point = || -> Result<RegionPoint> {
                let key = PointKey {
                    regime: g.regime,
                    realization: g.realization,
                    t: g.t,
                    i_req,
                };
                let (sol, p) = solve_point(sc, &key, h_i, solver_model, &circuit, cfg, seed)?;
                Ok(RegionPoint {
                    scheme: Scheme::Proposed,
                    regime: g.regime,
                    realization: g.realization,
                    t_s: g.t,
                    i_req,
                    i_bits: sol.mi,
                    rate_bps: sol.mi / g.t,
                    avg_power_w: p,
                    objective_w: sol.p_bar,
                    h_i,
                    h_e,
                    iterations: sol.iterations,
                    converged: sol.converged,
                    diagnostic: sol.diagnostic,
                    theta: sol.theta.into_vec(),
                })
            };
            match point() {
                Ok(p) => out.points.push(p),
                Err(e) => out.failures.push(fail(i_req, e)),
            }
        }
        out
    }))
}

/// Steady-state power of every symbol at EH gain `gain`, the reward of a
/// harvester without memory.
pub fn memoryless_rewards(rect: &Rectifier, c: &Constellation, gain: f64) -> Result<Vec<f64>> {
    c.amplitudes()
        .iter()
        .map(|x| Ok(rect.steady_state_response((gain * x).abs())?.avg_power))
        .collect()
}

/// The sweep with the harvester replaced by its steady-state response; each
/// solution is then re-evaluated on the memory-bearing circuit at every `T`.
pub fn baseline_memoryless(sc: &Scenario, grid: &RegionGrid, cfg: &SweepConfig, seed: u64) -> Result<RegionResult> {
    sc.validate()?;
    grid.validate(&sc.constellation)?;
    cfg.validate()?;
    let c = &sc.constellation;
    let mut keys = Vec::new();
    for r in 0..cfg.realizations {
        for &regime in &grid.regimes {
            keys.push((r, regime));
        }
    }
    let run = |&(r, regime): &(usize, Regime)| -> RegionResult {
        let mut out = RegionResult::default();
        let (h_i, h_e) = realization_channels(sc, seed, regime, r);
        let gain = sc.eh_gain(h_e);
        let fail = |t: f64, i_req: f64, e: &Error| PointFailure {
            scheme: Scheme::Baseline,
            regime,
            realization: r,
            t_s: t,
            i_req,
            error: e.to_string(),
        };
        let setup = || -> Result<Vec<EhModel>> {
            grid.symbol_durations
                .iter()
                .map(|&t| {
                    EhModel::new(
                        Backend::Circuit(CircuitBackend::new(Rectifier::new(sc.circuit_at(t))?)),
                        c,
                        gain,
                    )
                })
                .collect()
        };
        let models = match setup() {
            Ok(m) => m,
            Err(e) => {
                for &t in &grid.symbol_durations {
                    out.failures.extend(grid.i_req.iter().map(|&i| fail(t, i, &e)));
                }
                return out;
            }
        };
        let rect = match &models[0].backend() {
            Backend::Circuit(b) => b.rectifier(),
            Backend::Surrogate(_) => unreachable!("baseline models are circuits"),
        };
        let q = match memoryless_rewards(rect, c, gain) {
            Ok(q) => q,
            Err(e) => {
                for &t in &grid.symbol_durations {
                    out.failures.extend(grid.i_req.iter().map(|&i| fail(t, i, &e)));
                }
                return out;
            }
        };
        for &i_req in &grid.i_req {
            let solved = sc
                .problem(h_i, i_req)
                .and_then(|spec| sqp::solve(&spec, &cfg.solver, &mut LinearReward { q: q.clone() }));
            let sol = match solved {
                Ok(s) => s,
                Err(e) => {
                    out.failures
                        .extend(grid.symbol_durations.iter().map(|&t| fail(t, i_req, &e)));
                    continue;
                }
            };
            for (&t, model) in grid.symbol_durations.iter().zip(&models) {
                match circuit_power(model, &sol.theta, cfg, seed, r) {
                    Ok(p) => out.points.push(RegionPoint {
                        scheme: Scheme::Baseline,
                        regime,
                        realization: r,
                        t_s: t,
                        i_req,
                        i_bits: sol.mi,
                        rate_bps: sol.mi / t,
                        avg_power_w: p,
                        objective_w: sol.p_bar,
                        h_i,
                        h_e,
                        iterations: sol.iterations,
                        converged: sol.converged,
                        diagnostic: sol.diagnostic.clone(),
                        theta: sol.theta.probs().to_vec(),
                    }),
                    Err(e) => out.failures.push(fail(t, i_req, &e)),
                }
            }
        }
        out
    };
    #[cfg(feature = "parallel")]
    let parts: Vec<RegionResult> = {
        use rayon::prelude::*;
        keys.par_iter().map(run).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let parts: Vec<RegionResult> = keys.iter().map(run).collect();
    let mut out = RegionResult::default();
    for p in parts {
        out.points.extend(p.points);
        out.failures.extend(p.failures);
    }
    out.sort();
    Ok(out)
}

/// Width of the `[q_lo, q_hi]` quantile band of `|x|` under `theta`.
pub fn amplitude_band(c: &Constellation, theta: &[f64], q_lo: f64, q_hi: f64) -> f64 {
    let mut pairs: Vec<(f64, f64)> = c.amplitudes().iter().map(|x| x.abs()).zip(theta.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let quantile = |q: f64| {
        let mut acc = 0.0;
        for (x, p) in &pairs {
            acc += p;
            if acc >= q - 1e-12 {
                return *x;
            }
        }
        pairs.last().map_or(0.0, |p| p.0)
    };
    quantile(q_hi) - quantile(q_lo)
}

pub const REGION_HEADER: &str = "regime,T_s,I_req_bits,I_bits,rate_bps,avg_power_W,realization";
pub const MEAN_HEADER: &str = "regime,T_s,I_req_bits,I_bits,rate_bps,avg_power_W,realizations";
pub const DISTRIBUTION_HEADER: &str = "symbol_index,amplitude_V,probability";

pub fn region_to_csv(points: &[RegionPoint]) -> String {
    let mut s = String::from(REGION_HEADER);
    s.push('\n');
    for p in points {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            p.regime,
            fmt17(p.t_s),
            fmt17(p.i_req),
            fmt17(p.i_bits),
            fmt17(p.rate_bps),
            fmt17(p.avg_power_w),
            p.realization
        ));
    }
    s
}

pub fn means_to_csv(means: &[MeanPoint]) -> String {
    let mut s = String::from(MEAN_HEADER);
    s.push('\n');
    for m in means {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            m.regime,
            fmt17(m.t_s),
            fmt17(m.i_req),
            fmt17(m.i_bits),
            fmt17(m.rate_bps),
            fmt17(m.avg_power_w),
            m.count
        ));
    }
    s
}

pub fn distribution_to_csv(c: &Constellation, theta: &[f64]) -> String {
    let mut s = String::from(DISTRIBUTION_HEADER);
    s.push('\n');
    for (i, (x, p)) in c.amplitudes().iter().zip(theta).enumerate() {
        s.push_str(&format!("{i},{},{}\n", fmt17(*x), fmt17(*p)));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geo(k: f64) -> Geometry {
        Geometry {
            d_ir: 30.0,
            d_eh: 10.0,
            ir_exponent: 3.0,
            eh_exponent: 2.0,
            rician_k: k,
            regime: Regime::Lp,
        }
    }

    #[test]
    fn pathloss_example() {
        assert!((geo(1.0).ir_pathloss() - 3.7037037e-5).abs() < 1e-11);
    }

    #[test]
    fn rayleigh_second_moment() {
        let g = geo(1.0);
        let mut rng = stream(5, "moments");
        let n = 1_000_000;
        let m: f64 = (0..n).map(|_| sample_channels(&g, &mut rng).0.powi(2)).sum::<f64>() / n as f64;
        assert!((m / g.ir_pathloss() - 1.0).abs() < 0.01, "{m}");
    }

    #[test]
    fn large_k_is_line_of_sight() {
        let g = geo(1e12);
        let mut rng = stream(5, "los");
        for _ in 0..100 {
            let (_, h_e) = sample_channels(&g, &mut rng);
            assert!((h_e - 0.1).abs() < 1e-6);
        }
    }

    #[test]
    fn rate_is_mi_over_duration() {
        let p = RegionPoint {
            scheme: Scheme::Proposed,
            regime: Regime::Lp,
            realization: 0,
            t_s: 1e-6,
            i_req: 3.0,
            i_bits: 3.0,
            rate_bps: 3.0 / 1e-6,
            avg_power_w: 0.0,
            objective_w: 0.0,
            h_i: 1.0,
            h_e: 1.0,
            iterations: 0,
            converged: true,
            diagnostic: None,
            theta: vec![],
        };
        assert!((p.rate_bps - 3e6).abs() < 1e-6);
        let csv = region_to_csv(&[p]);
        assert!(csv.starts_with(REGION_HEADER));
        assert!(csv.lines().nth(1).unwrap().starts_with("LP,"));
    }

    #[test]
    fn band_of_point_mass_is_zero() {
        let c = Constellation::uniform_pam(4, 1.0).unwrap();
        assert_eq!(amplitude_band(&c, &[0.0, 1.0, 0.0, 0.0], 0.1, 0.9), 0.0);
        let w = amplitude_band(&c, &[0.5, 0.0, 0.5, 0.0], 0.1, 0.9);
        assert!((w - 2.0 / 3.0).abs() < 1e-12);
    }
}
