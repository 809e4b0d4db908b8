//! WebAssembly bindings for the browser demo: one harvester interval, the
//! information rate of uniform PAM, and a memoryless input design.

use wasm_bindgen::prelude::*;

use swipt_core::awgn_info::{mutual_information, IrChannel, QuadratureConfig};
use swipt_core::constellation::{Constellation, Pmf};
use swipt_core::eh_circuit::{CircuitParams, Rectifier};
use swipt_core::region::memoryless_rewards;
use swipt_core::sqp::{solve, LinearReward, ProblemSpec, SolverConfig};

fn js(e: swipt_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn rectifier(symbol_duration_us: f64) -> Result<Rectifier, JsError> {
    Rectifier::new(CircuitParams {
        t: symbol_duration_us * 1e-6,
        ..CircuitParams::default()
    })
    .map_err(js)
}

/// One symbol interval of the default harvester from load voltage `v0_v`
/// under antenna EMF `amplitude_v`. Returns `[v_next_V, avg_power_W,
/// steady_state_V, v_max_V]`.
#[wasm_bindgen]
pub fn harvest_interval(v0_v: f64, amplitude_v: f64, symbol_duration_us: f64) -> Result<Box<[f64]>, JsError> {
    let rect = rectifier(symbol_duration_us)?;
    let v0 = v0_v.clamp(0.0, rect.v_max());
    let r = rect.step(v0, amplitude_v).map_err(js)?;
    let ss = rect.steady_state_response(amplitude_v).map_err(js)?;
    Ok(vec![r.v_next, r.avg_power, ss.v_next, rect.v_max()].into_boxed_slice())
}

fn channel(snr_db: f64) -> Result<IrChannel, JsError> {
    IrChannel::new(1.0, 10f64.powf(-snr_db / 10.0)).map_err(js)
}

/// Mutual information in bits of uniform `size`-PAM with unit peak at
/// peak-to-noise ratio `snr_db`.
#[wasm_bindgen]
pub fn pam_information(size: usize, snr_db: f64) -> Result<f64, JsError> {
    let c = Constellation::uniform_pam(size, 1.0).map_err(js)?;
    mutual_information(&c, &Pmf::uniform(size), &channel(snr_db)?, &QuadratureConfig::default()).map_err(js)
}

/// Input pmf of unit-peak `size`-PAM that maximizes steady-state harvested
/// power at antenna EMF `eh_gain_v` per transmitted volt, subject to
/// `i_req` bits at `snr_db` and an average power of `avg_to_peak` times the
/// peak. Returns the pmf followed by `[I_bits, avg_power_W]`.
#[wasm_bindgen]
pub fn memoryless_design(
    size: usize,
    i_req: f64,
    snr_db: f64,
    avg_to_peak: f64,
    eh_gain_v: f64,
) -> Result<Box<[f64]>, JsError> {
    let c = Constellation::uniform_pam(size, 1.0).map_err(js)?;
    let rect = rectifier(10.0)?;
    let q = memoryless_rewards(&rect, &c, eh_gain_v).map_err(js)?;
    let spec = ProblemSpec {
        constellation: c,
        channel: channel(snr_db)?,
        quadrature: QuadratureConfig::default(),
        i_req,
        sigma_x2: avg_to_peak,
    };
    let cfg = SolverConfig {
        n_max: 200,
        ..SolverConfig::default()
    };
    let sol = solve(&spec, &cfg, &mut LinearReward { q }).map_err(js)?;
    let mut out = sol.theta.into_vec();
    out.push(sol.mi);
    out.push(sol.p_bar);
    Ok(out.into_boxed_slice())
}
