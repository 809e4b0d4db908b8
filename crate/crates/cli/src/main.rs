use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use swipt_core::config::{RunConfig, SimulateMode};
use swipt_core::eh_circuit::{generate_dataset, Rectifier};
use swipt_core::io::{atomic_write, fmt17, read_dataset, write_dataset};
use swipt_core::markov_reward::BackendKind;
use swipt_core::region::{
    self, amplitude_band, baseline_memoryless, distribution_to_csv, means_to_csv, optimize_point, region_to_csv,
    trace_region, train_surrogate, PointKey, RegionResult, SolverBackend,
};
use swipt_core::rng::derive_seed;
use swipt_core::sqp::trace_to_csv;
use swipt_core::surrogate::{SurrogatePair, TrainReport};
use swipt_core::Error;

#[derive(Parser)]
#[command(name = "swipt", version, about = "Rate-power regions of SWIPT links with a memory-bearing harvester")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one symbol interval or the steady state of the rectifier.
    SimulateCircuit(Common),
    /// Generate a circuit dataset for surrogate training.
    GenDataset(Common),
    /// Train the next-state and reward networks.
    TrainSurrogate {
        #[command(flatten)]
        common: Common,
        /// Existing dataset CSV; generated from the circuit when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Solve for the optimal input distribution at one operating point.
    Optimize(Common),
    /// Sweep the rate requirement, symbol duration and channel realizations.
    TraceRegion(Common),
    /// Sweep with the memoryless steady-state harvester model.
    Baseline(Common),
    /// Check a configuration file and report physics warnings.
    ValidateConfig(Common),
}

#[derive(Args, Clone)]
struct Common {
    /// TOML configuration; built-in defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set region.realizations=10`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, value_enum)]
    backend: Option<BackendArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Circuit,
    Surrogate,
}

struct Run {
    name: &'static str,
    cfg: RunConfig,
    workers: usize,
    started: Instant,
    started_unix: u64,
    outputs: Vec<String>,
    seeds: BTreeMap<String, u64>,
}

impl Run {
    fn new(name: &'static str, common: &Common) -> Result<Self, Error> {
        let mut cfg = match &common.config {
            Some(p) => RunConfig::load(p, &common.set)?,
            None => RunConfig::parse("", &common.set)?,
        };
        if let Some(s) = common.seed {
            cfg.seed = s;
        }
        if let Some(o) = &common.out {
            cfg.out_dir = o.clone();
        }
        if let Some(b) = common.backend {
            cfg.backend = match b {
                BackendArg::Circuit => BackendKind::Circuit,
                BackendArg::Surrogate => BackendKind::Surrogate,
            };
        }
        let workers = match common.workers {
            Some(0) => return Err(Error::InvalidArgument("--workers must be positive".into())),
            Some(n) => n,
            None => std::thread::available_parallelism().map_or(1, |n| n.get()),
        };
        // Fails only if a pool already exists, which cannot happen here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(workers).build_global();
        Ok(Self {
            name,
            cfg,
            workers,
            started: Instant::now(),
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            outputs: Vec::new(),
            seeds: BTreeMap::new(),
        })
    }

    fn validated(self) -> Result<Self, Error> {
        let warnings = self.cfg.validate().into_result()?;
        for w in warnings {
            eprintln!("warning: {w}");
        }
        Ok(self)
    }

    fn out(&self, name: &str) -> PathBuf {
        self.cfg.out_dir.join(name)
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), Error> {
        atomic_write(&self.out(name), bytes)?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    fn seed(&mut self, name: &str) -> u64 {
        let s = derive_seed(self.cfg.seed, name);
        self.seeds.insert(name.to_string(), s);
        s
    }

    fn finish(mut self, result: Value) -> Result<(), Error> {
        self.outputs.push("run.json".into());
        let doc = json!({
            "command": self.name,
            "version": env!("CARGO_PKG_VERSION"),
            "master_seed": self.cfg.seed,
            "derived_seeds": self.seeds,
            "workers": self.workers,
            "started_unix_s": self.started_unix,
            "wall_clock_s": self.started.elapsed().as_secs_f64(),
            "config": serde_json::to_value(&self.cfg).expect("config serializes"),
            "outputs": self.outputs,
            "result": result,
        });
        let text = serde_json::to_string_pretty(&doc).expect("json serializes");
        atomic_write(&self.out("run.json"), text.as_bytes())
    }
}

fn report_json(r: &TrainReport) -> Value {
    json!({
        "target": r.target,
        "best_epoch": r.best_epoch,
        "epochs_run": r.epochs.len(),
        "train_mape": r.train_mape,
        "val_mape": r.val_mape,
        "test_mape": r.test_mape,
    })
}

fn simulate_circuit(common: &Common) -> Result<(), Error> {
    let mut run = Run::new("simulate-circuit", common)?.validated()?;
    let sim = run.cfg.simulate.clone();
    let rect = Rectifier::new(run.cfg.circuit_params())?;
    let r = match sim.mode {
        SimulateMode::Interval => rect.step(sim.v0_v, sim.amplitude_v)?,
        SimulateMode::SteadyState => rect.steady_state_response(sim.amplitude_v)?,
    };
    println!("v_next_V = {}", fmt17(r.v_next));
    println!("avg_power_W = {}", fmt17(r.avg_power));
    if sim.trajectory && sim.mode == SimulateMode::Interval {
        let substeps = rect.params().rk_substeps;
        let v = rect.trajectory(sim.v0_v, sim.amplitude_v, substeps);
        let dt = rect.params().t / substeps as f64;
        let mut csv = String::from("t_s,v_load_V\n");
        for (k, v) in v.iter().enumerate() {
            csv.push_str(&format!("{},{}\n", fmt17(k as f64 * dt), fmt17(*v)));
        }
        run.write("trajectory.csv", csv.as_bytes())?;
        run.finish(json!({ "v_next_V": r.v_next, "avg_power_W": r.avg_power }))?;
    }
    Ok(())
}

fn gen_dataset(common: &Common) -> Result<(), Error> {
    let mut run = Run::new("gen-dataset", common)?.validated()?;
    let rect = Rectifier::new(run.cfg.circuit_params())?;
    let t = rect.params().t;
    let seed = region::dataset_seed(run.cfg.seed, t);
    run.seeds.insert(format!("dataset-{t:e}"), seed);
    let data = generate_dataset(&rect, run.cfg.dataset.samples, rect.params().amp_max, seed)?;
    write_dataset(&run.out("dataset.csv"), &data)?;
    run.outputs.push("dataset.csv".into());
    eprintln!("wrote {} rows to {}", data.len(), run.out("dataset.csv").display());
    run.finish(json!({ "rows": data.len(), "t_s": t, "v_max_V": rect.v_max() }))
}

fn train_surrogate_cmd(common: &Common, data: Option<&Path>) -> Result<(), Error> {
    let mut run = Run::new("train-surrogate", common)?.validated()?;
    let t = run.cfg.circuit.symbol_duration_s;
    let (pair, n1, n2) = match data {
        Some(path) => {
            let rows = read_dataset(path)?;
            let rect = Rectifier::new(run.cfg.circuit_params())?;
            let seed = run.seed(&format!("train-{t:e}"));
            SurrogatePair::train(&rect, &rows, &run.cfg.training.train_config(seed))?
        }
        None => {
            run.seed(&format!("dataset-{t:e}"));
            run.seed(&format!("train-{t:e}"));
            let sc = run.cfg.scenario()?;
            train_surrogate(&sc, t, run.cfg.dataset.samples, &run.cfg.training.train_config(0), run.cfg.seed)?
        }
    };
    run.write("model.json", pair.to_json()?.as_bytes())?;
    eprintln!(
        "test MAPE: next-state {:.3}%, reward {:.3}%",
        100.0 * n1.test_mape,
        100.0 * n2.test_mape
    );
    let training = json!({ "next_state": n1, "reward": n2 });
    run.write(
        "training.json",
        serde_json::to_string_pretty(&training).expect("json serializes").as_bytes(),
    )?;
    run.finish(json!({ "t_s": t, "next_state": report_json(&n1), "reward": report_json(&n2) }))
}

fn load_model(path: &Path, t: f64) -> Result<SurrogatePair, Error> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::InvalidArgument(format!("cannot read {}: {e}", path.display())))?;
    let pair = SurrogatePair::from_json(&text)?;
    if (pair.t_s - t).abs() > 1e-9 * t {
        return Err(Error::InvalidArgument(format!(
            "{} was trained for T = {:e} s, not {t:e} s",
            path.display(),
            pair.t_s
        )));
    }
    Ok(pair)
}

/// Surrogates for every duration in `ts`, loaded from `paths` or trained and
/// saved under `models/`.
fn surrogates(run: &mut Run, ts: &[f64], paths: &[PathBuf]) -> Result<(Vec<SurrogatePair>, Value), Error> {
    if !paths.is_empty() {
        let mut out = Vec::new();
        for &t in ts {
            let pair = paths
                .iter()
                .filter_map(|p| load_model(p, t).ok())
                .next()
                .ok_or_else(|| Error::InvalidArgument(format!("no listed model matches T = {t:e} s")))?;
            out.push(pair);
        }
        return Ok((out, json!("loaded")));
    }
    let sc = run.cfg.scenario()?;
    let mut out = Vec::new();
    let mut reports = Vec::new();
    for &t in ts {
        eprintln!("training surrogate for T = {t:e} s");
        run.seed(&format!("dataset-{t:e}"));
        run.seed(&format!("train-{t:e}"));
        let (pair, n1, n2) = train_surrogate(&sc, t, run.cfg.dataset.samples, &run.cfg.training.train_config(0), run.cfg.seed)?;
        run.write(&format!("models/model_T{t:e}.json"), pair.to_json()?.as_bytes())?;
        reports.push(json!({ "t_s": t, "next_state": report_json(&n1), "reward": report_json(&n2) }));
        out.push(pair);
    }
    Ok((out, Value::Array(reports)))
}

fn optimize(common: &Common) -> Result<(), Error> {
    let mut run = Run::new("optimize", common)?.validated()?;
    let sc = run.cfg.scenario()?;
    let opt = run.cfg.optimize.clone();
    let t = run.cfg.circuit.symbol_duration_s;
    let (pair, training) = match run.cfg.backend {
        BackendKind::Circuit => (None, Value::Null),
        BackendKind::Surrogate => {
            let paths: Vec<PathBuf> = opt.model.iter().cloned().collect();
            let (mut p, rep) = surrogates(&mut run, &[t], &paths)?;
            (p.pop(), rep)
        }
    };
    let key = PointKey {
        regime: opt.regime,
        realization: opt.realization,
        t,
        i_req: opt.i_req_bits,
    };
    let res = optimize_point(&sc, &key, &run.cfg.sweep(), pair, run.cfg.seed)?;
    let sol = &res.solution;
    run.write("trace.csv", trace_to_csv(&sol.trace).as_bytes())?;
    run.write(
        "distribution.csv",
        distribution_to_csv(&sc.constellation, sol.theta.probs()).as_bytes(),
    )?;
    println!("I_bits = {}", fmt17(sol.mi));
    println!("rate_bps = {}", fmt17(sol.mi / t));
    println!("avg_power_W = {}", fmt17(res.avg_power_w));
    println!("iterations = {} converged = {}", sol.iterations, sol.converged);
    run.finish(json!({
        "regime": key.regime,
        "realization": key.realization,
        "t_s": t,
        "i_req_bits": key.i_req,
        "h_i": res.h_i,
        "h_e": res.h_e,
        "i_bits": sol.mi,
        "rate_bps": sol.mi / t,
        "avg_power_W": res.avg_power_w,
        "objective_W": sol.p_bar,
        "ap_V2": sol.ap,
        "lambda": sol.lambda,
        "iterations": sol.iterations,
        "converged": sol.converged,
        "diagnostic": sol.diagnostic,
        "amplitude_band_10_90_V": amplitude_band(&sc.constellation, sol.theta.probs(), 0.1, 0.9),
        "training": training,
    }))
}

/// Writes the region tables and per-point mean distributions under `prefix`.
fn write_region(run: &mut Run, prefix: &str, res: &RegionResult) -> Result<Value, Error> {
    let c = run.cfg.constellation()?;
    run.write(&format!("{prefix}region.csv"), region_to_csv(&res.points).as_bytes())?;
    let means = res.means();
    run.write(&format!("{prefix}region_mean.csv"), means_to_csv(&means).as_bytes())?;
    let mut summary = Vec::new();
    for m in &means {
        let members: Vec<_> = res
            .points
            .iter()
            .filter(|p| p.regime == m.regime && p.t_s == m.t_s && p.i_req == m.i_req)
            .collect();
        let mut theta = vec![0.0; c.len()];
        for p in &members {
            for (a, b) in theta.iter_mut().zip(&p.theta) {
                *a += b / members.len() as f64;
            }
        }
        let band = members
            .iter()
            .map(|p| amplitude_band(&c, &p.theta, 0.1, 0.9))
            .sum::<f64>()
            / members.len() as f64;
        let name = format!("{prefix}distributions/{}_T{:e}_I{}.csv", m.regime, m.t_s, m.i_req);
        run.write(&name, distribution_to_csv(&c, &theta).as_bytes())?;
        summary.push(json!({
            "regime": m.regime,
            "t_s": m.t_s,
            "i_req_bits": m.i_req,
            "i_bits": m.i_bits,
            "rate_bps": m.rate_bps,
            "avg_power_W": m.avg_power_w,
            "realizations": m.count,
            "amplitude_band_10_90_V": band,
        }));
    }
    let unconverged = res.points.iter().filter(|p| !p.converged).count();
    Ok(json!({
        "points": res.points.len(),
        "unconverged": unconverged,
        "failures": res.failures,
        "means": summary,
    }))
}

fn check_failures(res: &RegionResult) -> Result<(), Error> {
    for f in &res.failures {
        eprintln!(
            "point failed: {} realization {} T = {:e} s I_req = {}: {}",
            f.regime, f.realization, f.t_s, f.i_req, f.error
        );
    }
    if res.points.is_empty() {
        return Err(Error::NumericFailure("every sweep point failed".into()));
    }
    Ok(())
}

fn trace_region_cmd(common: &Common) -> Result<(), Error> {
    let mut run = Run::new("trace-region", common)?.validated()?;
    let sc = run.cfg.scenario()?;
    let grid = run.cfg.grid();
    let sweep = run.cfg.sweep();
    let (pairs, training) = match run.cfg.backend {
        BackendKind::Circuit => (Vec::new(), Value::Null),
        BackendKind::Surrogate => {
            let paths = run.cfg.region.models.clone();
            surrogates(&mut run, &grid.symbol_durations, &paths)?
        }
    };
    let backend = match run.cfg.backend {
        BackendKind::Circuit => SolverBackend::Circuit,
        BackendKind::Surrogate => SolverBackend::Surrogate(&pairs),
    };
    eprintln!(
        "tracing {} points on {} workers",
        sweep.realizations * grid.regimes.len() * grid.symbol_durations.len() * grid.i_req.len(),
        run.workers
    );
    let res = trace_region(&sc, &grid, &sweep, backend, run.cfg.seed)?;
    check_failures(&res)?;
    let mut summary = write_region(&mut run, "", &res)?;
    summary["training"] = training;
    run.finish(summary)
}

fn baseline_cmd(common: &Common) -> Result<(), Error> {
    let mut run = Run::new("baseline", common)?.validated()?;
    let sc = run.cfg.scenario()?;
    let res = baseline_memoryless(&sc, &run.cfg.grid(), &run.cfg.sweep(), run.cfg.seed)?;
    check_failures(&res)?;
    let summary = write_region(&mut run, "baseline_", &res)?;
    run.finish(summary)
}

fn validate_config(common: &Common) -> Result<(), Error> {
    let run = Run::new("validate-config", common)?;
    let report = run.cfg.validate();
    for w in &report.warnings {
        println!("warning: {w}");
    }
    for e in &report.errors {
        println!("error: {e}");
    }
    if report.is_ok() {
        println!("ok");
    }
    report.into_result().map(|_| ())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_) | Error::Config(_) | Error::Io(_) => 1,
        Error::NumericFailure(_) | Error::Training { .. } | Error::Logic(_) => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let res = match &cli.command {
        Command::SimulateCircuit(c) => simulate_circuit(c),
        Command::GenDataset(c) => gen_dataset(c),
        Command::TrainSurrogate { common, data } => train_surrogate_cmd(common, data.as_deref()),
        Command::Optimize(c) => optimize(c),
        Command::TraceRegion(c) => trace_region_cmd(c),
        Command::Baseline(c) => baseline_cmd(c),
        Command::ValidateConfig(c) => validate_config(c),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
