//! Mutual information between a discrete real input and the output of a real
//! AWGN channel, with its gradient with respect to the input pmf.
//!
//! All integrals are evaluated in noise-normalized units `u = y / σ`, which
//! makes the results invariant to a joint rescaling of `h_I` and `σ`. The
//! integration domain is the union of `±W σ` windows around every (scaled)
//! symbol, including symbols with zero probability, partitioned into
//! Gauss–Legendre panels no wider than the configured fraction of `σ`.

use std::f64::consts::{LOG2_E, PI};

use serde::{Deserialize, Serialize};

use crate::constellation::{check_sizes, Constellation, Pmf};
use crate::error::{Error, Result};
use crate::quadrature::GaussLegendre;

/// Floor applied to the normalized mixture density before taking a log.
const DENSITY_FLOOR: f64 = 1e-300;
/// Beyond this many standard deviations a Gaussian term underflows.
const COMPONENT_REACH: f64 = 38.6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IrChannel {
    /// Amplitude gain between TX and IR.
    pub h_i: f64,
    /// Noise variance at the IR.
    pub sigma_n2: f64,
}

impl IrChannel {
    pub fn new(h_i: f64, sigma_n2: f64) -> Result<Self> {
        if !(sigma_n2 > 0.0 && sigma_n2.is_finite()) {
            return Err(Error::invalid(format!("noise variance must be positive, got {sigma_n2}")));
        }
        if !h_i.is_finite() {
            return Err(Error::invalid("channel gain must be finite"));
        }
        Ok(Self { h_i, sigma_n2 })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma_n2.sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadratureConfig {
    /// Integration half-width around each symbol, in noise standard deviations.
    pub half_width_sigmas: f64,
    /// Maximum panel width, in noise standard deviations.
    pub panel_width_sigmas: f64,
    /// Gauss–Legendre nodes per panel.
    pub nodes_per_panel: usize,
    /// Allowed deviation of the integrated output density mass from one.
    pub tolerance: f64,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        Self {
            half_width_sigmas: 10.0,
            panel_width_sigmas: 0.5,
            nodes_per_panel: 8,
            tolerance: 1e-9,
        }
    }
}

impl QuadratureConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.half_width_sigmas >= 6.0) {
            return Err(Error::invalid("quadrature half-width must be at least 6 sigma"));
        }
        if !(self.panel_width_sigmas > 0.0 && self.panel_width_sigmas <= 0.5) {
            return Err(Error::invalid("quadrature panel width must be in (0, 0.5] sigma"));
        }
        if self.nodes_per_panel < 2 {
            return Err(Error::invalid("quadrature needs at least two nodes per panel"));
        }
        if !(self.tolerance > 0.0 && self.tolerance <= 1e-9) {
            return Err(Error::invalid("quadrature tolerance must be in (0, 1e-9]"));
        }
        Ok(())
    }
}

/// `½ log₂(2πe σ²)` in bits.
pub fn noise_entropy(sigma_n2: f64) -> Result<f64> {
    if !(sigma_n2 > 0.0 && sigma_n2.is_finite()) {
        return Err(Error::invalid(format!("noise variance must be positive, got {sigma_n2}")));
    }
    Ok(0.5 * (2.0 * PI * std::f64::consts::E * sigma_n2).log2())
}

/// Differential entropy of the channel output in bits per symbol.
pub fn output_entropy(
    c: &Constellation,
    theta: &Pmf,
    ch: &IrChannel,
    q: &QuadratureConfig,
) -> Result<f64> {
    let eval = MixtureIntegrals::compute(c, theta, ch, q, false)?;
    Ok(eval.neg_f_log2_f + ch.sigma().log2())
}

/// `I(θ) = H_y(θ) - H_n`, clamped to `[0, log₂ S]`.
pub fn mutual_information(
    c: &Constellation,
    theta: &Pmf,
    ch: &IrChannel,
    q: &QuadratureConfig,
) -> Result<f64> {
    let hy = output_entropy(c, theta, ch, q)?;
    let hn = noise_entropy(ch.sigma_n2)?;
    Ok((hy - hn).clamp(0.0, c.max_bits()))
}

/// `∂I/∂θ_i = -(log₂ e + ∫ p_n(y - h x_i) log₂ p_y(y) dy)`.
///
/// Well defined for `θ_i = 0` as well.
pub fn mi_gradient(
    c: &Constellation,
    theta: &Pmf,
    ch: &IrChannel,
    q: &QuadratureConfig,
) -> Result<Vec<f64>> {
    Ok(mi_value_and_gradient(c, theta, ch, q)?.1)
}

/// Mutual information and its gradient from a single quadrature pass.
pub fn mi_value_and_gradient(
    c: &Constellation,
    theta: &Pmf,
    ch: &IrChannel,
    q: &QuadratureConfig,
) -> Result<(f64, Vec<f64>)> {
    let eval = MixtureIntegrals::compute(c, theta, ch, q, true)?;
    let log_sigma = ch.sigma().log2();
    let hy = eval.neg_f_log2_f + log_sigma;
    let hn = noise_entropy(ch.sigma_n2)?;
    let mi = (hy - hn).clamp(0.0, c.max_bits());
    let grad = eval
        .component_log2_f
        .iter()
        .map(|g| -(LOG2_E + g - log_sigma))
        .collect();
    Ok((mi, grad))
}

/// `∂E{x²}/∂θ_i = x_i²`.
pub fn ap_gradient(c: &Constellation) -> Vec<f64> {
    c.amplitudes().iter().map(|x| x * x).collect()
}

struct MixtureIntegrals {
    /// `-∫ f log₂ f du` in normalized units.
    neg_f_log2_f: f64,
    /// `∫ φ(u - μ_i) log₂ f(u) du` for every symbol.
    component_log2_f: Vec<f64>,
}

impl MixtureIntegrals {
    fn compute(
        c: &Constellation,
        theta: &Pmf,
        ch: &IrChannel,
        q: &QuadratureConfig,
        with_gradient: bool,
    ) -> Result<Self> {
        check_sizes(c, theta)?;
        q.validate()?;
        let sigma = ch.sigma();
        // Means in noise units, sorted so neighbour windows are contiguous.
        let mut comps: Vec<(f64, f64, usize)> = c
            .amplitudes()
            .iter()
            .zip(theta.probs())
            .enumerate()
            .map(|(i, (x, p))| (ch.h_i * x / sigma, *p, i))
            .collect();
        comps.sort_by(|a, b| a.0.total_cmp(&b.0));
        let means: Vec<f64> = comps.iter().map(|c| c.0).collect();
        if means.iter().any(|m| !m.is_finite()) {
            return Err(Error::numeric("non-finite scaled symbol positions"));
        }

        let w = q.half_width_sigmas;
        let mut intervals: Vec<(f64, f64)> = Vec::new();
        for &m in &means {
            match intervals.last_mut() {
                Some(last) if m - w <= last.1 => last.1 = m + w,
                _ => intervals.push((m - w, m + w)),
            }
        }

        let gl = GaussLegendre::new(q.nodes_per_panel);
        let norm = 1.0 / (2.0 * PI).sqrt();
        let mut neg_f_log2_f = 0.0;
        let mut mass = 0.0;
        let mut sorted_grad = vec![0.0; comps.len()];
        let mut lo_idx = 0;

        for &(a, b) in &intervals {
            let panels = ((b - a) / q.panel_width_sigmas).ceil().max(1.0) as usize;
            let h = (b - a) / panels as f64;
            for k in 0..panels {
                let mid = a + h * (k as f64 + 0.5);
                let half = 0.5 * h;
                for (x, wt) in gl.nodes.iter().zip(&gl.weights) {
                    let u = mid + half * x;
                    let weight = wt * half;
                    while lo_idx < means.len() && means[lo_idx] < u - COMPONENT_REACH {
                        lo_idx += 1;
                    }
                    let mut f = 0.0;
                    let mut j = lo_idx;
                    while j < means.len() && means[j] <= u + COMPONENT_REACH {
                        let p = comps[j].1;
                        if p > 0.0 {
                            let d = u - means[j];
                            f += p * norm * (-0.5 * d * d).exp();
                        }
                        j += 1;
                    }
                    let log2_f = f.max(DENSITY_FLOOR).log2();
                    mass += weight * f;
                    neg_f_log2_f -= weight * f * log2_f;
                    if with_gradient {
                        let mut j = lo_idx;
                        while j < means.len() && means[j] <= u + w {
                            let d = u - means[j];
                            if d.abs() <= w {
                                sorted_grad[j] += weight * norm * (-0.5 * d * d).exp() * log2_f;
                            }
                            j += 1;
                        }
                    }
                }
            }
            // Restart the neighbour scan at the next merged interval.
            lo_idx = 0;
        }

        let residual = (mass - 1.0).abs();
        if !(residual <= q.tolerance) {
            return Err(Error::numeric(format!(
                "output density integrates to {mass} (residual {residual:.3e})"
            )));
        }

        let mut component_log2_f = vec![0.0; comps.len()];
        for (k, comp) in comps.iter().enumerate() {
            component_log2_f[comp.2] = sorted_grad[k];
        }
        Ok(Self {
            neg_f_log2_f,
            component_log2_f,
        })
    }
}
