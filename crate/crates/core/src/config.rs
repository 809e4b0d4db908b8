//! Declarative run configuration.
//!
//! Every physical quantity carries its unit in the key name (`_s`, `_ohm`,
//! `_dbm`, ...). Powers given in dBm are converted once, here, into volts and
//! V² across a configurable reference impedance.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::awgn_info::QuadratureConfig;
use crate::constellation::Constellation;
use crate::eh_circuit::{dbm_to_watts, CircuitParams, MatchingModel, DEFAULT_RK_SUBSTEPS};
use crate::error::{Error, Result};
use crate::markov_reward::BackendKind;
use crate::region::{Regime, RegionGrid, Scenario, SweepConfig};
use crate::sqp::SolverConfig;
use crate::surrogate::TrainConfig;

const UNIT_SUFFIXES: &[&str] = &["s", "ohm", "f", "a", "v", "w", "dbm", "db", "m", "bits"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub backend: BackendKind,
    pub constellation: ConstellationSection,
    pub ir: IrSection,
    pub eh: EhSection,
    pub circuit: CircuitSection,
    pub simulate: SimulateSection,
    pub dataset: DatasetSection,
    pub training: TrainingSection,
    pub solver: SolverConfig,
    pub quadrature: QuadratureConfig,
    pub optimize: OptimizeSection,
    pub region: RegionSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            out_dir: PathBuf::from("out"),
            backend: BackendKind::Surrogate,
            constellation: Default::default(),
            ir: Default::default(),
            eh: Default::default(),
            circuit: Default::default(),
            simulate: Default::default(),
            dataset: Default::default(),
            training: Default::default(),
            solver: SolverConfig::default(),
            quadrature: QuadratureConfig::default(),
            optimize: Default::default(),
            region: Default::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConstellationSection {
    pub size: usize,
    pub peak_power_dbm: f64,
    pub avg_power_dbm: f64,
    /// Impedance across which transmit powers become squared volts.
    pub reference_impedance_ohm: f64,
}

impl Default for ConstellationSection {
    fn default() -> Self {
        Self {
            size: 64,
            peak_power_dbm: 52.0,
            avg_power_dbm: 49.0,
            reference_impedance_ohm: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IrSection {
    pub distance_m: f64,
    pub pathloss_exponent: f64,
    pub noise_power_dbm: f64,
}

impl Default for IrSection {
    fn default() -> Self {
        Self {
            distance_m: 30.0,
            pathloss_exponent: 3.0,
            noise_power_dbm: -80.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EhSection {
    /// Gain from transmit power to available power at the rectenna, apart
    /// from pathloss and fading.
    pub link_gain_db: f64,
    pub pathloss_exponent: f64,
    pub rician_k: f64,
    pub sp_distance_m: f64,
    pub lp_distance_m: f64,
}

impl Default for EhSection {
    fn default() -> Self {
        Self {
            link_gain_db: -42.0,
            pathloss_exponent: 2.0,
            rician_k: 1.0,
            sp_distance_m: 20.0,
            lp_distance_m: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchingKind {
    Ideal,
    PowerDependent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CircuitSection {
    pub source_resistance_ohm: f64,
    pub load_capacitance_f: f64,
    pub load_resistance_ohm: f64,
    pub saturation_current_a: f64,
    pub ideality_factor: f64,
    pub thermal_voltage_v: f64,
    pub breakdown_voltage_v: f64,
    pub breakdown_conductance_s: f64,
    pub matching: MatchingKind,
    pub match_power_dbm: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub match_resistance_ohm: Option<f64>,
    pub amp_max_v: f64,
    pub symbol_duration_s: f64,
    pub diode_leakage: bool,
    pub rk_substeps: usize,
}

impl Default for CircuitSection {
    fn default() -> Self {
        Self::from_params(&CircuitParams::default())
    }
}

impl CircuitSection {
    pub fn from_params(p: &CircuitParams) -> Self {
        let (matching, match_power_dbm) = match p.matching {
            MatchingModel::Ideal => (MatchingKind::Ideal, -16.0),
            MatchingModel::PowerDependent { p0_w } => (MatchingKind::PowerDependent, 10.0 * (p0_w * 1e3).log10()),
        };
        Self {
            source_resistance_ohm: p.r_s,
            load_capacitance_f: p.c_l,
            load_resistance_ohm: p.r_l,
            saturation_current_a: p.i_s,
            ideality_factor: p.n,
            thermal_voltage_v: p.v_t,
            breakdown_voltage_v: p.b_v,
            breakdown_conductance_s: p.g_br,
            matching,
            match_power_dbm,
            match_resistance_ohm: p.r_match,
            amp_max_v: p.amp_max,
            symbol_duration_s: p.t,
            diode_leakage: p.diode_leakage,
            rk_substeps: p.rk_substeps,
        }
    }

    pub fn params(&self) -> CircuitParams {
        CircuitParams {
            r_s: self.source_resistance_ohm,
            c_l: self.load_capacitance_f,
            r_l: self.load_resistance_ohm,
            i_s: self.saturation_current_a,
            n: self.ideality_factor,
            v_t: self.thermal_voltage_v,
            b_v: self.breakdown_voltage_v,
            g_br: self.breakdown_conductance_s,
            matching: match self.matching {
                MatchingKind::Ideal => MatchingModel::Ideal,
                MatchingKind::PowerDependent => MatchingModel::PowerDependent {
                    p0_w: dbm_to_watts(self.match_power_dbm),
                },
            },
            t: self.symbol_duration_s,
            r_match: self.match_resistance_ohm,
            amp_max: self.amp_max_v,
            diode_leakage: self.diode_leakage,
            rk_substeps: if self.rk_substeps == 0 { DEFAULT_RK_SUBSTEPS } else { self.rk_substeps },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimulateMode {
    Interval,
    SteadyState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateSection {
    pub mode: SimulateMode,
    pub v0_v: f64,
    pub amplitude_v: f64,
    /// Also write the within-interval load voltage trajectory.
    pub trajectory: bool,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self {
            mode: SimulateMode::Interval,
            v0_v: 0.0,
            amplitude_v: 0.1,
            trajectory: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub samples: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self { samples: 14_750 }
    }
}

/// Training hyperparameters; the seed comes from the master seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub hidden_layers: usize,
    pub hidden_units: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub warmup_epochs: usize,
    pub stall_epochs: usize,
    pub log_output: bool,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            hidden_layers: t.hidden_layers,
            hidden_units: t.hidden_units,
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            epsilon: t.epsilon,
            batch_size: t.batch_size,
            epochs: t.epochs,
            patience: t.patience,
            warmup_epochs: t.warmup_epochs,
            stall_epochs: t.stall_epochs,
            log_output: t.log_output,
            n_train: t.n_train,
            n_val: t.n_val,
            n_test: t.n_test,
        }
    }
}

impl TrainingSection {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            hidden_layers: self.hidden_layers,
            hidden_units: self.hidden_units,
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            batch_size: self.batch_size,
            epochs: self.epochs,
            patience: self.patience,
            warmup_epochs: self.warmup_epochs,
            stall_epochs: self.stall_epochs,
            log_output: self.log_output,
            n_train: self.n_train,
            n_val: self.n_val,
            n_test: self.n_test,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizeSection {
    pub i_req_bits: f64,
    pub regime: Regime,
    /// Channel realization index; the draw is the one `trace-region` uses.
    pub realization: usize,
    /// Trained surrogate pair; trained in-process when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
}

impl Default for OptimizeSection {
    fn default() -> Self {
        Self {
            i_req_bits: 3.0,
            regime: Regime::Lp,
            realization: 0,
            model: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegionSection {
    pub symbol_durations_s: Vec<f64>,
    pub i_req_bits: Vec<f64>,
    pub regimes: Vec<Regime>,
    pub realizations: usize,
    pub eval_steps: usize,
    pub eval_burn_in: usize,
    /// Trained surrogate pairs, one per symbol duration; trained in-process
    /// when empty.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub models: Vec<PathBuf>,
}

impl Default for RegionSection {
    fn default() -> Self {
        Self {
            symbol_durations_s: vec![1e-6, 1e-5, 1e-4],
            i_req_bits: vec![1.0, 2.0, 3.0, 4.0, 4.5, 5.0, 5.5, 5.96],
            regimes: vec![Regime::Sp, Regime::Lp],
            realizations: 100,
            eval_steps: 10_000,
            eval_burn_in: 1_000,
            models: Vec::new(),
        }
    }
}

/// Names of every unit-suffixed key, per section, for spotting keys written
/// without their unit.
const UNIT_KEYS: &[(&str, &str)] = &[
    ("constellation", "peak_power_dbm"),
    ("constellation", "avg_power_dbm"),
    ("constellation", "reference_impedance_ohm"),
    ("ir", "distance_m"),
    ("ir", "noise_power_dbm"),
    ("eh", "link_gain_db"),
    ("eh", "sp_distance_m"),
    ("eh", "lp_distance_m"),
    ("circuit", "source_resistance_ohm"),
    ("circuit", "load_capacitance_f"),
    ("circuit", "load_resistance_ohm"),
    ("circuit", "saturation_current_a"),
    ("circuit", "thermal_voltage_v"),
    ("circuit", "breakdown_voltage_v"),
    ("circuit", "breakdown_conductance_s"),
    ("circuit", "match_power_dbm"),
    ("circuit", "match_resistance_ohm"),
    ("circuit", "amp_max_v"),
    ("circuit", "symbol_duration_s"),
    ("simulate", "v0_v"),
    ("simulate", "amplitude_v"),
    ("optimize", "i_req_bits"),
    ("region", "symbol_durations_s"),
    ("region", "i_req_bits"),
];

fn check_unit_suffixes(doc: &toml::Table) -> Result<()> {
    for (section, value) in doc {
        let Some(table) = value.as_table() else { continue };
        for key in table.keys() {
            if UNIT_KEYS.iter().any(|(s, k)| s == section && k == key) {
                continue;
            }
            let expected = UNIT_KEYS.iter().find(|(s, k)| {
                s == section
                    && k.strip_prefix(key.as_str())
                        .and_then(|rest| rest.strip_prefix('_'))
                        .is_some_and(|unit| UNIT_SUFFIXES.contains(&unit))
            });
            if let Some((_, k)) = expected {
                return Err(Error::Config(format!(
                    "missing unit suffix on `{section}.{key}`: write `{section}.{k}`"
                )));
            }
        }
    }
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key just written"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies `dotted.key=value`; the value is read as a TOML literal and
/// falls back to a bare string.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("override key `{path}` has an empty component")));
    }
    let (last, parents) = keys.split_last().expect("split yields at least one key");
    let mut table = doc;
    for k in parents {
        let entry = table
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{path}`: `{k}` is not a table")))?;
    }
    table.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Parses a document and applies overrides. Errors carry line and column
    /// when they point into the original text.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        check_unit_suffixes(&doc)?;
        if overrides.is_empty() {
            return toml::from_str(text).map_err(|e| Error::Config(e.to_string()));
        }
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        check_unit_suffixes(&doc)?;
        toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("after overrides: {e}")))
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, overrides).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Peak transmit amplitude in volts.
    pub fn peak_amplitude(&self) -> f64 {
        (self.constellation.reference_impedance_ohm * dbm_to_watts(self.constellation.peak_power_dbm)).sqrt()
    }

    /// Average transmit power budget in V².
    pub fn power_budget(&self) -> f64 {
        self.constellation.reference_impedance_ohm * dbm_to_watts(self.constellation.avg_power_dbm)
    }

    pub fn noise_variance(&self) -> f64 {
        self.constellation.reference_impedance_ohm * dbm_to_watts(self.ir.noise_power_dbm)
    }

    pub fn constellation(&self) -> Result<Constellation> {
        Constellation::uniform_pam(self.constellation.size, self.peak_amplitude())
    }

    pub fn circuit_params(&self) -> CircuitParams {
        self.circuit.params()
    }

    pub fn scenario(&self) -> Result<Scenario> {
        Ok(Scenario {
            constellation: self.constellation()?,
            sigma_x2: self.power_budget(),
            sigma_n2: self.noise_variance(),
            quadrature: self.quadrature,
            d_ir: self.ir.distance_m,
            d_eh_sp: self.eh.sp_distance_m,
            d_eh_lp: self.eh.lp_distance_m,
            ir_exponent: self.ir.pathloss_exponent,
            eh_exponent: self.eh.pathloss_exponent,
            rician_k: self.eh.rician_k,
            eh_link_gain_db: self.eh.link_gain_db,
            circuit: self.circuit_params(),
        })
    }

    pub fn grid(&self) -> RegionGrid {
        RegionGrid {
            regimes: self.region.regimes.clone(),
            symbol_durations: self.region.symbol_durations_s.clone(),
            i_req: self.region.i_req_bits.clone(),
        }
    }

    pub fn sweep(&self) -> SweepConfig {
        SweepConfig {
            realizations: self.region.realizations,
            eval_steps: self.region.eval_steps,
            eval_burn_in: self.region.eval_burn_in,
            solver: self.solver.clone(),
        }
    }

    /// Schema and physics checks. Errors make the configuration unusable;
    /// warnings flag settings that run but are probably unintended.
    pub fn validate(&self) -> ValidationReport {
        let mut r = ValidationReport::default();
        let mut check = |res: Result<()>| {
            if let Err(e) = res {
                r.errors.push(e.to_string());
            }
        };
        check(self.circuit_params().validate());
        check(self.solver.validate());
        check(self.quadrature.validate());
        check(self.training.train_config(0).validate());
        check(self.sweep().validate());
        let c = match self.constellation() {
            Ok(c) => c,
            Err(e) => {
                r.errors.push(e.to_string());
                return r;
            }
        };
        check(self.grid().validate(&c));
        match self.scenario() {
            Ok(sc) => check(sc.validate()),
            Err(e) => r.errors.push(e.to_string()),
        }
        let max_bits = c.max_bits();
        let i_req = self.optimize.i_req_bits;
        if !(i_req >= 0.0 && i_req <= max_bits) {
            r.errors.push(format!(
                "optimize.i_req_bits = {i_req} lies outside [0, log2 S = {max_bits}]"
            ));
        }
        if !(self.constellation.reference_impedance_ohm > 0.0) {
            r.errors.push("reference impedance must be positive".into());
        }

        let budget = self.power_budget();
        let min_x2 = c.amplitudes().iter().map(|x| x * x).fold(f64::INFINITY, f64::min);
        if budget < min_x2 {
            r.errors.push(format!(
                "average power budget {budget:.4e} V² is below the smallest symbol energy {min_x2:.4e} V²"
            ));
        }
        let uniform_x2 = c.amplitudes().iter().map(|x| x * x).sum::<f64>() / c.len() as f64;
        if budget < uniform_x2 {
            let worst = self.region.i_req_bits.iter().copied().fold(i_req, f64::max);
            r.warnings.push(format!(
                "uniform input needs {uniform_x2:.4e} V² but the budget is {budget:.4e} V²; I_req = {worst} may be infeasible"
            ));
        }
        if budget >= c.peak() * c.peak() {
            r.warnings
                .push("average power budget is at or above the peak power; it never binds".into());
        }

        let tau = self.circuit.load_resistance_ohm * self.circuit.load_capacitance_f;
        let mut durations = self.region.symbol_durations_s.clone();
        durations.push(self.circuit.symbol_duration_s);
        for t in durations {
            let ratio = t / tau;
            if ratio > 20.0 {
                r.warnings.push(format!(
                    "T = {t:e} s is {ratio:.0} load time constants; the harvester is effectively memoryless"
                ));
            } else if ratio < 1e-3 {
                r.warnings.push(format!(
                    "T = {t:e} s is {ratio:.1e} load time constants; the load barely moves per symbol"
                ));
            }
        }

        if let Ok(sc) = self.scenario() {
            let los = sc.geometry(Regime::Lp).gains(0.0, 0.0, 0.0).1;
            let peak_emf = sc.eh_gain(los) * c.peak();
            if peak_emf > self.circuit.amp_max_v {
                r.warnings.push(format!(
                    "line-of-sight LP peak EMF {peak_emf:.3} V exceeds circuit.amp_max_v = {} V; the surrogate extrapolates above it",
                    self.circuit.amp_max_v
                ));
            }
        }

        let t = &self.training;
        let needed = t.n_train + t.n_val + t.n_test;
        if self.dataset.samples < needed {
            r.errors.push(format!(
                "dataset.samples = {} is smaller than the training split {needed}",
                self.dataset.samples
            ));
        } else if self.dataset.samples > needed {
            r.warnings.push(format!(
                "dataset.samples = {} exceeds the training split {needed}; extra rows are unused",
                self.dataset.samples
            ));
        }
        if self.region.realizations < 100 {
            r.warnings.push(format!(
                "{} channel realizations give noisy region averages",
                self.region.realizations
            ));
        }
        r
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub errors: Vec<String>,
    pub warnings: Vec<String>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.errors.is_empty()
    }

    pub fn into_result(self) -> Result<Vec<String>> {
        if self.errors.is_empty() {
            Ok(self.warnings)
        } else {
            Err(Error::Config(self.errors.join("; ")))
        }
    }
}
