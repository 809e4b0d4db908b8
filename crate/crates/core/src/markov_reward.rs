//! The harvester as a Markov reward chain over the load voltage at symbol
//! boundaries, and the likelihood-ratio estimator of the gradient of its
//! long-run average reward with respect to the input pmf.

use std::collections::HashMap;
use std::sync::Mutex;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::constellation::{sample_symbol, Constellation, Pmf};
use crate::eh_circuit::{Rectifier, StepResult};
use crate::error::{Error, Result};
use crate::surrogate::SurrogatePair;

/// Largest likelihood ratio fed to the estimator.
pub const RATIO_CLIP: f64 = 1e6;

/// A chain whose transitions are driven by symbol indices.
pub trait ChainModel: Sync {
    fn n_symbols(&self) -> usize;
    fn v_max(&self) -> f64;
    /// Next state and reward when symbol `symbol` is sent in state `xi`.
    fn transition(&self, xi: f64, symbol: usize) -> Result<StepResult>;

    /// Reward of every symbol from state `xi`.
    fn rewards(&self, xi: f64, out: &mut [f64]) -> Result<()> {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.transition(xi, i)?.avg_power;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Circuit,
    Surrogate,
}

/// Direct-circuit transitions memoized at the nearest node of a voltage grid.
#[derive(Debug)]
pub struct CircuitBackend {
    rect: Rectifier,
    resolution: f64,
    cache: Mutex<HashMap<(u32, u32), StepResult>>,
}

impl CircuitBackend {
    pub const DEFAULT_RESOLUTION: f64 = 1e-4;

    pub fn new(rect: Rectifier) -> Self {
        Self::with_resolution(rect, Self::DEFAULT_RESOLUTION)
    }

    /// `resolution = 0` disables the cache.
    pub fn with_resolution(rect: Rectifier, resolution: f64) -> Self {
        Self {
            rect,
            resolution,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn rectifier(&self) -> &Rectifier {
        &self.rect
    }

    /// `level` identifies `amplitude` within the cache.
    fn eval(&self, xi: f64, level: usize, amplitude: f64) -> Result<StepResult> {
        if self.resolution <= 0.0 {
            return self.rect.step(xi, amplitude);
        }
        // Nearest grid point, so the rest state is evaluated exactly.
        let node = (xi / self.resolution).round().max(0.0) as u32;
        let key = (node, level as u32);
        if let Some(hit) = self.cache.lock().expect("cache poisoned").get(&key) {
            return Ok(*hit);
        }
        let v = (node as f64 * self.resolution).min(self.rect.v_max());
        let r = self.rect.step(v, amplitude)?;
        self.cache.lock().expect("cache poisoned").insert(key, r);
        Ok(r)
    }
}

#[derive(Debug)]
pub enum Backend {
    Circuit(CircuitBackend),
    Surrogate(SurrogatePair),
}

impl Backend {
    pub fn kind(&self) -> BackendKind {
        match self {
            Backend::Circuit(_) => BackendKind::Circuit,
            Backend::Surrogate(_) => BackendKind::Surrogate,
        }
    }
}

/// One backend plus the received rectifier amplitude of every symbol.
/// Symbols with equal amplitude share one evaluation.
#[derive(Debug)]
pub struct EhModel {
    backend: Backend,
    amplitudes: Vec<f64>,
    levels: Vec<f64>,
    level_of: Vec<usize>,
    v_max: f64,
}

impl EhModel {
    /// `gain` maps a transmitted amplitude in volts to the antenna EMF at the
    /// harvester.
    pub fn new(backend: Backend, c: &Constellation, gain: f64) -> Result<Self> {
        if !gain.is_finite() {
            return Err(Error::invalid("EH gain must be finite"));
        }
        let v_max = match &backend {
            Backend::Circuit(b) => b.rect.v_max(),
            Backend::Surrogate(p) => p.v_max,
        };
        let amplitudes: Vec<f64> = c.amplitudes().iter().map(|x| (gain * x).abs()).collect();
        let mut levels: Vec<f64> = Vec::new();
        let level_of = amplitudes
            .iter()
            .map(|a| match levels.iter().position(|l| l.to_bits() == a.to_bits()) {
                Some(k) => k,
                None => {
                    levels.push(*a);
                    levels.len() - 1
                }
            })
            .collect();
        Ok(Self {
            backend,
            amplitudes,
            levels,
            level_of,
            v_max,
        })
    }

    pub fn backend(&self) -> &Backend {
        &self.backend
    }

    pub fn amplitudes(&self) -> &[f64] {
        &self.amplitudes
    }

    fn level_transition(&self, xi: f64, level: usize) -> Result<StepResult> {
        let a = self.levels[level];
        let r = match &self.backend {
            Backend::Circuit(b) => b.eval(xi, level, a)?,
            Backend::Surrogate(p) => StepResult {
                v_next: p.predict_next_state(xi, a)?,
                avg_power: p.predict_reward(xi, a)?,
            },
        };
        Ok(StepResult {
            v_next: r.v_next.clamp(0.0, self.v_max),
            avg_power: r.avg_power.max(0.0),
        })
    }

    fn level_reward(&self, xi: f64, level: usize) -> Result<f64> {
        match &self.backend {
            Backend::Surrogate(p) => Ok(p.predict_reward(xi, self.levels[level])?.max(0.0)),
            Backend::Circuit(_) => Ok(self.level_transition(xi, level)?.avg_power),
        }
    }
}

impl ChainModel for EhModel {
    fn n_symbols(&self) -> usize {
        self.amplitudes.len()
    }

    fn v_max(&self) -> f64 {
        self.v_max
    }

    fn transition(&self, xi: f64, symbol: usize) -> Result<StepResult> {
        self.level_transition(xi, self.level_of[symbol])
    }

    fn rewards(&self, xi: f64, out: &mut [f64]) -> Result<()> {
        let mut per_level = [0.0; 64];
        let mut heap;
        let per_level: &mut [f64] = if self.levels.len() <= per_level.len() {
            &mut per_level[..self.levels.len()]
        } else {
            heap = vec![0.0; self.levels.len()];
            &mut heap
        };
        for (k, p) in per_level.iter_mut().enumerate() {
            *p = self.level_reward(xi, k)?;
        }
        for (o, &k) in out.iter_mut().zip(&self.level_of) {
            *o = per_level[k];
        }
        Ok(())
    }
}

/// A chain on finitely many states `0, 1, …` with deterministic
/// `(state, symbol) → state` moves and tabulated rewards.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteChain {
    pub next: Vec<Vec<usize>>,
    pub reward: Vec<Vec<f64>>,
}

impl FiniteChain {
    pub fn new(next: Vec<Vec<usize>>, reward: Vec<Vec<f64>>) -> Result<Self> {
        let n = next.len();
        let s = next.first().map_or(0, Vec::len);
        if n == 0 || s == 0 || reward.len() != n {
            return Err(Error::invalid("finite chain needs states and symbols"));
        }
        for (row, rew) in next.iter().zip(&reward) {
            if row.len() != s || rew.len() != s || row.iter().any(|&j| j >= n) {
                return Err(Error::invalid("inconsistent finite chain tables"));
            }
        }
        Ok(Self { next, reward })
    }

    pub fn n_states(&self) -> usize {
        self.next.len()
    }
}

impl ChainModel for FiniteChain {
    fn n_symbols(&self) -> usize {
        self.next[0].len()
    }

    fn v_max(&self) -> f64 {
        (self.n_states() - 1) as f64
    }

    fn transition(&self, xi: f64, symbol: usize) -> Result<StepResult> {
        let s = xi.round() as usize;
        if s >= self.n_states() {
            return Err(Error::invalid(format!("state {xi} outside the finite chain")));
        }
        Ok(StepResult {
            v_next: self.next[s][symbol] as f64,
            avg_power: self.reward[s][symbol],
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChainState {
    pub xi: f64,
}

/// Result of one chain step.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub state: ChainState,
    pub reward: f64,
    /// Reward of every symbol from the pre-step state.
    pub reward_vector: Vec<f64>,
}

/// Advances the chain with symbol `symbol_index` and evaluates the reward of
/// every symbol from the current state.
pub fn step<M: ChainModel + ?Sized>(model: &M, s: ChainState, symbol_index: usize) -> Result<Step> {
    let n = model.n_symbols();
    if symbol_index >= n {
        return Err(Error::invalid(format!("symbol index {symbol_index} out of range")));
    }
    let mut reward_vector = vec![0.0; n];
    model.rewards(s.xi, &mut reward_vector)?;
    let r = model.transition(s.xi, symbol_index)?;
    Ok(Step {
        state: ChainState {
            xi: r.v_next.clamp(0.0, model.v_max()),
        },
        reward: r.avg_power,
        reward_vector,
    })
}

/// `r` with `1/θ_i` at the drawn index and zeros elsewhere.
pub fn likelihood_ratio_vector(theta: &Pmf, symbol_index: usize) -> Result<Vec<f64>> {
    let p = *theta
        .probs()
        .get(symbol_index)
        .ok_or_else(|| Error::invalid("symbol index out of range"))?;
    if p <= 0.0 {
        return Err(Error::Logic(format!(
            "symbol {symbol_index} was drawn but has probability zero"
        )));
    }
    let mut r = vec![0.0; theta.len()];
    r[symbol_index] = (1.0 / p).min(RATIO_CLIP);
    Ok(r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorState {
    pub f: Vec<f64>,
    pub z: Vec<f64>,
    pub p_tilde: f64,
    pub gamma: f64,
    pub alpha: f64,
    /// Chain steps accumulated into `f`.
    pub steps: u64,
}

impl EstimatorState {
    pub fn new(n: usize, gamma: f64, alpha: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::invalid("gamma must lie in (0, 1]"));
        }
        if !(0.0..1.0).contains(&alpha) {
            return Err(Error::invalid("alpha must lie in [0, 1)"));
        }
        Ok(Self {
            f: vec![0.0; n],
            z: vec![0.0; n],
            p_tilde: 0.0,
            gamma,
            alpha,
            steps: 0,
        })
    }

    pub fn reset_direction(&mut self) {
        self.f.iter_mut().for_each(|v| *v = 0.0);
        self.steps = 0;
    }

    /// `f ← f + p̂ + (θᵀp̂ − P̃) z`, then `P̃ ← P̃ + γ(θᵀp̂ − P̃)`, then
    /// `z ← α z + r`.
    pub fn update(&mut self, theta: &[f64], reward_vector: &[f64], r: &[f64]) {
        let mean: f64 = theta.iter().zip(reward_vector).map(|(t, p)| t * p).sum();
        let excess = mean - self.p_tilde;
        for ((f, p), z) in self.f.iter_mut().zip(reward_vector).zip(&self.z) {
            *f += p + excess * z;
        }
        self.p_tilde += self.gamma * excess;
        for (z, ri) in self.z.iter_mut().zip(r) {
            *z = self.alpha * *z + ri;
        }
        self.steps += 1;
    }

    /// Accumulated direction normalized by the number of steps.
    pub fn direction(&self) -> Vec<f64> {
        let n = self.steps.max(1) as f64;
        self.f.iter().map(|v| v / n).collect()
    }
}

/// Functional form of [`EstimatorState::update`].
pub fn update_estimator(e: &EstimatorState, theta: &Pmf, reward_vector: &[f64], r: &[f64]) -> Result<EstimatorState> {
    let n = e.f.len();
    if theta.len() != n || reward_vector.len() != n || r.len() != n {
        return Err(Error::invalid("estimator dimensions disagree"));
    }
    let mut next = e.clone();
    next.update(theta.probs(), reward_vector, r);
    Ok(next)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate {
    /// `P̃` after the last step.
    pub p_tilde: f64,
    /// Mean of `θᵀp̂` over the steps of this call.
    pub mean_reward: f64,
    /// Mean of `P̃` over the steps of this call.
    pub mean_p_tilde: f64,
    pub direction: Vec<f64>,
}

/// Runs `n_steps` of draw → step → update from the given chain and
/// estimator state, both of which are advanced in place.
pub fn estimate_gradient<M: ChainModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    theta: &Pmf,
    n_steps: usize,
    est: &mut EstimatorState,
    chain: &mut ChainState,
    rng: &mut R,
) -> Result<GradientEstimate> {
    let s = model.n_symbols();
    if n_steps == 0 {
        return Err(Error::invalid("n_steps must be positive"));
    }
    if theta.len() != s || est.f.len() != s {
        return Err(Error::invalid("pmf and estimator sizes must match the model"));
    }
    let probs = theta.probs();
    let mut r = vec![0.0; s];
    let mut sum_reward = 0.0;
    let mut sum_p_tilde = 0.0;
    for _ in 0..n_steps {
        let i = sample_symbol(theta, rng);
        let st = step(model, *chain, i)?;
        if probs[i] <= 0.0 {
            return Err(Error::Logic(format!("drew symbol {i} with probability zero")));
        }
        r[i] = (1.0 / probs[i]).min(RATIO_CLIP);
        est.update(probs, &st.reward_vector, &r);
        r[i] = 0.0;
        if !(est.p_tilde.is_finite() && est.f.iter().all(|v| v.is_finite())) {
            return Err(Error::numeric("gradient estimator became non-finite"));
        }
        sum_reward += probs.iter().zip(&st.reward_vector).map(|(t, p)| t * p).sum::<f64>();
        sum_p_tilde += est.p_tilde;
        *chain = st.state;
    }
    Ok(GradientEstimate {
        p_tilde: est.p_tilde,
        mean_reward: sum_reward / n_steps as f64,
        mean_p_tilde: sum_p_tilde / n_steps as f64,
        direction: est.direction(),
    })
}

/// Time-average of the realized reward over `n_steps` after `burn_in` steps,
/// without gradient bookkeeping.
pub fn average_reward<M: ChainModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    theta: &Pmf,
    burn_in: usize,
    n_steps: usize,
    chain: &mut ChainState,
    rng: &mut R,
) -> Result<f64> {
    if n_steps == 0 {
        return Err(Error::invalid("n_steps must be positive"));
    }
    let mut acc = 0.0;
    for k in 0..burn_in + n_steps {
        let i = sample_symbol(theta, rng);
        let r = model.transition(chain.xi, i)?;
        chain.xi = r.v_next.clamp(0.0, model.v_max());
        if k >= burn_in {
            acc += r.avg_power;
        }
    }
    Ok(acc / n_steps as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn likelihood_ratio_examples() {
        let theta = Pmf::new(vec![0.2, 0.5, 0.3]).unwrap();
        assert_eq!(likelihood_ratio_vector(&theta, 1).unwrap(), vec![0.0, 2.0, 0.0]);
        let u = Pmf::uniform(4);
        assert_eq!(likelihood_ratio_vector(&u, 3).unwrap(), vec![0.0, 0.0, 0.0, 4.0]);
        let pm = Pmf::point_mass(3, 0);
        assert!(matches!(likelihood_ratio_vector(&pm, 1), Err(Error::Logic(_))));
    }

    #[test]
    fn likelihood_ratio_has_unit_mean() {
        let theta = Pmf::new(vec![0.1, 0.25, 0.4, 0.25]).unwrap();
        let mut mean = vec![0.0; 4];
        for (i, p) in theta.probs().iter().enumerate() {
            for (m, r) in mean.iter_mut().zip(likelihood_ratio_vector(&theta, i).unwrap()) {
                *m += p * r;
            }
        }
        for m in mean {
            assert!((m - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn ratio_is_clipped() {
        let theta = Pmf::new(vec![1e-8, 1.0 - 1e-8]).unwrap();
        assert_eq!(likelihood_ratio_vector(&theta, 0).unwrap()[0], RATIO_CLIP);
    }

    #[test]
    fn estimator_update_examples() {
        let half = Pmf::uniform(2);
        let mut e = EstimatorState::new(2, 0.1, 0.1).unwrap();
        e.p_tilde = 7.0;
        let e1 = update_estimator(&e, &half, &[1.0, 2.0], &[0.0, 0.0]).unwrap();
        assert_eq!(e1.f, vec![1.0, 2.0]);

        let mut e = EstimatorState::new(2, 0.1, 0.1).unwrap();
        e.p_tilde = 0.0;
        let e1 = update_estimator(&e, &half, &[1.0, 1.0], &[0.0, 0.0]).unwrap();
        assert!((e1.p_tilde - 0.1).abs() < 1e-15);

        let third = Pmf::uniform(3);
        let e = EstimatorState::new(3, 0.1, 0.1).unwrap();
        let r = [0.0, 2.0, 0.0];
        let e1 = update_estimator(&e, &third, &[0.0; 3], &r).unwrap();
        assert_eq!(e1.z, vec![0.0, 2.0, 0.0]);
        let e2 = update_estimator(&e1, &third, &[0.0; 3], &r).unwrap();
        assert!((e2.z[1] - 2.2).abs() < 1e-15);
        assert_eq!(e2.z[0], 0.0);
    }

    #[test]
    fn update_uses_old_z_and_old_p_tilde() {
        let theta = Pmf::uniform(2);
        let mut e = EstimatorState::new(2, 0.5, 0.0).unwrap();
        e.z = vec![1.0, 0.0];
        e.p_tilde = 1.0;
        let e1 = update_estimator(&e, &theta, &[3.0, 3.0], &[0.0, 4.0]).unwrap();
        // excess = 3 - 1 = 2 with the old z = (1, 0)
        assert_eq!(e1.f, vec![5.0, 3.0]);
        assert_eq!(e1.p_tilde, 2.0);
        assert_eq!(e1.z, vec![0.0, 4.0]);
    }

    #[test]
    fn step_reward_vector_contains_drawn_reward() {
        let chain = FiniteChain::new(
            vec![vec![1, 0, 1], vec![0, 1, 1]],
            vec![vec![0.5, 1.0, 2.0], vec![3.0, 0.25, 1.5]],
        )
        .unwrap();
        let st = step(&chain, ChainState { xi: 1.0 }, 1).unwrap();
        assert_eq!(st.reward, st.reward_vector[1]);
        assert_eq!(st.reward_vector, vec![3.0, 0.25, 1.5]);
        assert_eq!(st.state.xi, 1.0);
        assert!(step(&chain, ChainState { xi: 0.0 }, 3).is_err());
    }
}
