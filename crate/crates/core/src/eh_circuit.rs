//! Envelope-domain model of a single-diode rectenna: antenna, matching
//! network, Schottky diode, load capacitor `C_L` and load resistor `R_L`.
//!
//! Within a symbol interval the received carrier has a constant envelope, so
//! the load voltage obeys
//!
//! ```text
//! C_L dv/dt = I_fwd(e, v) - v / R_L - I_br(e, v)
//! ```
//!
//! where `e` is the envelope of the Thevenin source seen by the diode after the
//! matching network. `I_fwd` is the cycle-averaged diode current
//! `I_s (I₀(e/nV_T) e^{-v/nV_T} - 1)`, limited by the current the source can
//! push through its own resistance. `I_br` is the cycle-averaged reverse
//! breakdown current, likewise source limited. Both limits use the conduction
//! angle of an ideal switch driven through the source resistance, which is
//! what makes the load voltage saturate once `e + v` exceeds the breakdown
//! voltage.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bessel;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum MatchingModel {
    /// Lossless match at every input power.
    Ideal,
    /// Match tuned for one input power `p0_w`; power transfer falls off away
    /// from it.
    PowerDependent { p0_w: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CircuitParams {
    /// Antenna resistance.
    pub r_s: f64,
    pub c_l: f64,
    pub r_l: f64,
    /// Diode saturation current.
    pub i_s: f64,
    /// Diode ideality factor.
    pub n: f64,
    /// Thermal voltage.
    pub v_t: f64,
    pub b_v: f64,
    pub g_br: f64,
    pub matching: MatchingModel,
    /// Symbol duration.
    pub t: f64,
    /// Source resistance presented to the diode by the matching network;
    /// `None` selects the zero-bias video resistance `nV_T / I_s`.
    pub r_match: Option<f64>,
    /// Largest antenna EMF amplitude the harvester is expected to see; sets
    /// the state-space ceiling `v_max`.
    pub amp_max: f64,
    /// Include reverse saturation current when the diode is off.
    pub diode_leakage: bool,
    pub rk_substeps: usize,
}

pub const DEFAULT_RK_SUBSTEPS: usize = 400;

impl Default for CircuitParams {
    fn default() -> Self {
        Self {
            r_s: 50.0,
            c_l: 1e-9,
            r_l: 1e4,
            i_s: 5e-6,
            n: 1.05,
            v_t: 25.85e-3,
            b_v: 2.0,
            g_br: 1e-2,
            matching: MatchingModel::PowerDependent {
                p0_w: dbm_to_watts(-16.0),
            },
            t: 1e-5,
            r_match: None,
            amp_max: 0.6,
            diode_leakage: true,
            rk_substeps: DEFAULT_RK_SUBSTEPS,
        }
    }
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

impl CircuitParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("r_s", self.r_s),
            ("c_l", self.c_l),
            ("r_l", self.r_l),
            ("i_s", self.i_s),
            ("n", self.n),
            ("v_t", self.v_t),
            ("b_v", self.b_v),
            ("t", self.t),
            ("amp_max", self.amp_max),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("circuit parameter {name} must be positive, got {v}")));
            }
        }
        if !(self.g_br >= 0.0 && self.g_br.is_finite()) {
            return Err(Error::invalid("breakdown conductance must be nonnegative"));
        }
        if let Some(r) = self.r_match {
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::invalid("matched source resistance must be positive"));
            }
        }
        if let MatchingModel::PowerDependent { p0_w } = self.matching {
            if !(p0_w > 0.0 && p0_w.is_finite()) {
                return Err(Error::invalid("nominal matched power must be positive"));
            }
        }
        if self.rk_substeps == 0 {
            return Err(Error::invalid("rk_substeps must be positive"));
        }
        Ok(())
    }

    /// `n V_T`.
    pub fn thermal_scale(&self) -> f64 {
        self.n * self.v_t
    }

    /// Zero-bias video resistance `nV_T / I_s`.
    pub fn video_resistance(&self) -> f64 {
        self.thermal_scale() / self.i_s
    }

    pub fn source_resistance(&self) -> f64 {
        self.r_match.unwrap_or_else(|| self.video_resistance())
    }

    /// Available power of an antenna EMF with peak amplitude `a`.
    pub fn available_power(&self, amplitude: f64) -> f64 {
        amplitude * amplitude / (8.0 * self.r_s)
    }

    /// Diode RF resistance at the operating point implied by an input power:
    /// the video resistance re-evaluated with the RF current that power drives
    /// through the zero-bias junction added to `I_s`.
    pub fn operating_resistance(&self, p_in: f64) -> f64 {
        let i_rf = (2.0 * p_in.max(0.0) / self.video_resistance()).sqrt();
        self.thermal_scale() / (self.i_s + i_rf)
    }

    /// Power transfer factor `η(P) = 4 R₀ R_d / (R₀ + R_d)²` with
    /// `R₀ = R_d(P₀)`, so `η(P₀) = 1`.
    pub fn transfer_factor(&self, p_in: f64) -> f64 {
        match self.matching {
            MatchingModel::Ideal => 1.0,
            MatchingModel::PowerDependent { p0_w } => {
                let r0 = self.operating_resistance(p0_w);
                let rd = self.operating_resistance(p_in);
                4.0 * r0 * rd / ((r0 + rd) * (r0 + rd))
            }
        }
    }

    /// Envelope of the Thevenin source driving the diode for antenna EMF
    /// amplitude `a`; negative symbols are rectified.
    pub fn source_envelope(&self, amplitude: f64) -> f64 {
        let a = amplitude.abs();
        let eta = self.transfer_factor(self.available_power(a));
        a * (eta * self.source_resistance() / self.r_s).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub v_next: f64,
    pub avg_power: f64,
}

/// Normalized cycle-averaged conduction of an ideal switch that closes while
/// the carrier `cos(ωt)` exceeds `c`: `sin φ − φ cos φ` with `cos φ = c`.
fn conduction(c: f64) -> f64 {
    if c >= 1.0 {
        0.0
    } else if c <= -1.0 {
        -PI * c
    } else {
        (1.0 - c * c).sqrt() - c * c.acos()
    }
}

fn series_limit(a: f64, b: f64) -> f64 {
    if a <= 0.0 || b <= 0.0 {
        0.0
    } else {
        a * b / (a + b)
    }
}

/// Per-interval constants of the load-voltage derivative.
#[derive(Debug, Clone, Copy)]
struct Drive {
    e: f64,
    /// `ln(e^{-z} I₀(z)) + z`, so that `I₀(z) e^{-v/nV_T} = exp(log_b0 - v/nV_T)`.
    log_b0: f64,
    inv_nvt: f64,
    src_scale: f64,
    i_s: f64,
    b_v: f64,
    g_br: f64,
    inv_r_l: f64,
    inv_c: f64,
    leakage: bool,
}

impl Drive {
    fn new(p: &CircuitParams, r_src: f64, amplitude: f64) -> Self {
        let e = p.source_envelope(amplitude);
        let nvt = p.thermal_scale();
        let z = e / nvt;
        Self {
            e,
            log_b0: bessel::i0_scaled(z).ln() + z,
            inv_nvt: 1.0 / nvt,
            src_scale: e / (PI * r_src),
            i_s: p.i_s,
            b_v: p.b_v,
            g_br: p.g_br,
            inv_r_l: 1.0 / p.r_l,
            inv_c: 1.0 / p.c_l,
            leakage: p.diode_leakage,
        }
    }

    fn forward(&self, v: f64) -> f64 {
        let junction = self.i_s * ((self.log_b0 - v * self.inv_nvt).exp() - 1.0);
        if junction > 0.0 {
            if self.e <= 0.0 {
                return 0.0;
            }
            series_limit(junction, self.src_scale * conduction(v / self.e))
        } else if self.leakage {
            junction
        } else {
            0.0
        }
    }

    fn breakdown(&self, v: f64) -> f64 {
        if self.e <= 0.0 {
            return 0.0;
        }
        let linear = self.g_br * (self.e + v - self.b_v).max(0.0);
        series_limit(linear, self.src_scale * conduction((self.b_v - v) / self.e))
    }

    fn net_current(&self, v: f64) -> f64 {
        self.forward(v) - v * self.inv_r_l - self.breakdown(v)
    }

    fn dv_dt(&self, v: f64) -> f64 {
        self.net_current(v) * self.inv_c
    }
}

/// A parameterized rectifier with its derived state-space ceiling.
#[derive(Debug, Clone)]
pub struct Rectifier {
    params: CircuitParams,
    r_src: f64,
    v_max: f64,
}

impl Rectifier {
    pub fn new(params: CircuitParams) -> Result<Self> {
        params.validate()?;
        let r_src = params.source_resistance();
        let mut rect = Self {
            params,
            r_src,
            v_max: f64::INFINITY,
        };
        // Ceiling: largest steady-state voltage over the amplitude range plus 10%.
        let grid = 64;
        let mut peak: f64 = 0.0;
        for k in 1..=grid {
            let a = rect.params.amp_max * k as f64 / grid as f64;
            peak = peak.max(rect.steady_state_response(a)?.v_next);
        }
        rect.v_max = 1.1 * peak.max(f64::MIN_POSITIVE);
        Ok(rect)
    }

    pub fn params(&self) -> &CircuitParams {
        &self.params
    }

    pub fn v_max(&self) -> f64 {
        self.v_max
    }

    /// Largest possible average power, `v_max² / R_L`.
    pub fn p_max(&self) -> f64 {
        self.v_max * self.v_max / self.params.r_l
    }

    /// Integrates one symbol interval with the configured substep count.
    pub fn step(&self, v0: f64, amplitude: f64) -> Result<StepResult> {
        self.simulate_interval(v0, amplitude, self.params.rk_substeps)
    }

    /// Integrates one symbol interval of duration `T` from load voltage `v0`
    /// with classical RK4 on `rk_substeps` equal substeps; the average power is
    /// the trapezoid rule of `v²/R_L` on the same grid.
    pub fn simulate_interval(&self, v0: f64, amplitude: f64, rk_substeps: usize) -> Result<StepResult> {
        let tol = 1e-12 * self.v_max.max(1.0);
        if !(v0 >= -tol && v0 <= self.v_max + tol) {
            return Err(Error::invalid(format!(
                "initial voltage {v0} outside [0, {}]",
                self.v_max
            )));
        }
        if !amplitude.is_finite() {
            return Err(Error::invalid("amplitude must be finite"));
        }
        if rk_substeps == 0 {
            return Err(Error::invalid("rk_substeps must be positive"));
        }
        let drive = Drive::new(&self.params, self.r_src, amplitude);
        let h = self.params.t / rk_substeps as f64;
        let mut v = v0.clamp(0.0, self.v_max);
        let mut acc = 0.5 * v * v;
        for k in 0..rk_substeps {
            let k1 = drive.dv_dt(v);
            let k2 = drive.dv_dt(v + 0.5 * h * k1);
            let k3 = drive.dv_dt(v + 0.5 * h * k2);
            let k4 = drive.dv_dt(v + h * k3);
            v += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            if !v.is_finite() {
                return Err(Error::numeric(format!("load voltage diverged at substep {k}")));
            }
            acc += if k + 1 == rk_substeps { 0.5 * v * v } else { v * v };
        }
        let avg_power = (acc / rk_substeps as f64 / self.params.r_l).max(0.0);
        Ok(StepResult { v_next: v, avg_power })
    }

    /// Load-voltage trajectory over one interval, `rk_substeps + 1` samples.
    pub fn trajectory(&self, v0: f64, amplitude: f64, rk_substeps: usize) -> Vec<f64> {
        let drive = Drive::new(&self.params, self.r_src, amplitude);
        let h = self.params.t / rk_substeps.max(1) as f64;
        let mut v = v0;
        let mut out = Vec::with_capacity(rk_substeps + 1);
        out.push(v);
        for _ in 0..rk_substeps {
            let k1 = drive.dv_dt(v);
            let k2 = drive.dv_dt(v + 0.5 * h * k1);
            let k3 = drive.dv_dt(v + 0.5 * h * k2);
            let k4 = drive.dv_dt(v + h * k3);
            v += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            out.push(v);
        }
        out
    }

    /// Fixed point of the load voltage for a constant envelope (infinitely
    /// long symbol), found by bisection.
    pub fn steady_state_response(&self, amplitude: f64) -> Result<StepResult> {
        if !(amplitude.abs().is_finite()) {
            return Err(Error::invalid("amplitude must be finite"));
        }
        let drive = Drive::new(&self.params, self.r_src, amplitude);
        let f0 = drive.net_current(0.0);
        if f0 <= 0.0 {
            if f0 < -1e-18 {
                return Err(Error::numeric(format!("net current {f0} negative at v = 0")));
            }
            return Ok(StepResult { v_next: 0.0, avg_power: 0.0 });
        }
        // For v at or above the envelope the junction is reverse biased.
        let mut hi = drive.e.max(1e-6);
        while drive.net_current(hi) > 0.0 {
            hi *= 2.0;
            if hi > 1e6 {
                return Err(Error::numeric("no sign change while bracketing the fixed point"));
            }
        }
        let mut lo = 0.0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if drive.net_current(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let v = 0.5 * (lo + hi);
        Ok(StepResult {
            v_next: v,
            avg_power: v * v / self.params.r_l,
        })
    }
}

/// One simulator-generated 4-tuple.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub v0: f64,
    pub x_eh: f64,
    pub v_next: f64,
    pub avg_power: f64,
}

pub type Dataset = Vec<Sample>;

const DATASET_CHUNK: usize = 256;

/// `n` rows with `v0 ~ U[0, v_max]` and `x_EH ~ U[-amp_max, amp_max]`, each
/// simulated over one interval. Rows are generated in fixed-size chunks with
/// their own seeded streams, so the output does not depend on worker count.
pub fn generate_dataset(rect: &Rectifier, n: usize, amp_max: f64, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::invalid("dataset size must be positive"));
    }
    if !(amp_max > 0.0 && amp_max.is_finite()) {
        return Err(Error::invalid("amp_max must be positive"));
    }
    let chunks: Vec<(usize, usize)> = (0..n)
        .step_by(DATASET_CHUNK)
        .map(|start| (start, (start + DATASET_CHUNK).min(n)))
        .collect();
    let run = |&(start, end): &(usize, usize)| -> Result<Vec<Sample>> {
        let mut rng = crate::rng::stream(seed, &format!("dataset-chunk-{start}"));
        (start..end)
            .map(|_| {
                let v0 = rng.gen::<f64>() * rect.v_max();
                let x_eh = (2.0 * rng.gen::<f64>() - 1.0) * amp_max;
                let r = rect.step(v0, x_eh)?;
                Ok(Sample {
                    v0,
                    x_eh,
                    v_next: r.v_next.clamp(0.0, rect.v_max()),
                    avg_power: r.avg_power,
                })
            })
            .collect()
    };
    #[cfg(feature = "parallel")]
    let parts: Vec<Result<Vec<Sample>>> = {
        use rayon::prelude::*;
        chunks.par_iter().map(run).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let parts: Vec<Result<Vec<Sample>>> = chunks.iter().map(run).collect();
    let mut out = Vec::with_capacity(n);
    for part in parts {
        out.extend(part?);
    }
    Ok(out)
}
