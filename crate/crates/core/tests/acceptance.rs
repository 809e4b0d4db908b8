//! Acceptance suite. Prints one verdict line per criterion, with supporting
//! numbers on indented lines, and exits nonzero if any criterion fails.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng;

use swipt_core::awgn_info::{mi_value_and_gradient, mutual_information, IrChannel, QuadratureConfig};
use swipt_core::config::RunConfig;
use swipt_core::constellation::{Constellation, Pmf};
use swipt_core::eh_circuit::{CircuitParams, MatchingModel, Rectifier};
use swipt_core::markov_reward::{estimate_gradient, ChainState, EstimatorState};
use swipt_core::region::{
    amplitude_band, baseline_memoryless, optimize_point, trace_region, train_surrogate, PointKey, Regime,
    RegionGrid, RegionResult, Scenario, SolverBackend, SweepConfig,
};
use swipt_core::sqp::{bfgs_update, solve_qp};
use swipt_core::surrogate::SurrogatePair;

use common::*;

struct Verdict {
    id: u32,
    name: &'static str,
    pass: bool,
    details: Vec<String>,
}

impl Verdict {
    fn new(id: u32, name: &'static str) -> Self {
        Self {
            id,
            name,
            pass: true,
            details: Vec::new(),
        }
    }

    /// Records a sub-check; any failing sub-check fails the criterion.
    fn check(&mut self, ok: bool, msg: String) {
        self.pass &= ok;
        self.details.push(format!("{} {msg}", if ok { "ok  " } else { "FAIL" }));
    }

    fn info(&mut self, msg: String) {
        self.details.push(format!("     {msg}"));
    }

    fn print(&self) {
        for d in &self.details {
            println!("    {d}");
        }
        println!(
            "criterion {} [{}] {}",
            self.id,
            if self.pass { "PASS" } else { "FAIL" },
            self.name
        );
    }
}

fn timed(v: &mut Verdict, start: Instant, limit_s: f64) {
    let s = start.elapsed().as_secs_f64();
    v.check(s < limit_s, format!("runtime {s:.1} s < {limit_s} s"));
}

fn c1_mi_oracle() -> Verdict {
    let mut v = Verdict::new(1, "MI oracle suite");
    let t0 = Instant::now();
    let q = QuadratureConfig::default();
    let c = Constellation::uniform_pam(64, 1.0).unwrap();
    let u = Pmf::uniform(64);
    let ex2 = c.amplitudes().iter().map(|x| x * x).sum::<f64>() / 64.0;
    let at_snr = |snr_db: f64, theta: &Pmf| {
        let ch = IrChannel::new(1.0, ex2 / 10f64.powf(snr_db / 10.0)).unwrap();
        mutual_information(&c, theta, &ch, &q).unwrap()
    };
    let hi = at_snr(60.0, &u);
    v.check((5.99..=6.0).contains(&hi), format!("uniform 64-PAM, SNR 60 dB: I = {hi:.9} in [5.99, 6.00]"));
    let lo = at_snr(-40.0, &u);
    v.check(lo < 1e-3, format!("uniform 64-PAM, SNR -40 dB: I = {lo:.3e} < 1e-3"));
    let pm = Pmf::point_mass(64, 17);
    let point = at_snr(60.0, &pm);
    v.check(point < 1e-9, format!("point mass: I = {point:.3e} < 1e-9"));
    timed(&mut v, t0, 10.0);
    v
}

fn c2_gradient() -> Verdict {
    let mut v = Verdict::new(2, "MI gradient vs simplex-projected central differences");
    let t0 = Instant::now();
    let q = QuadratureConfig::default();
    let mut rng = rng(2);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let s = rng.gen_range(2..=16);
        let c = Constellation::uniform_pam(s, 1.0).unwrap();
        let ex2 = c.amplitudes().iter().map(|x| x * x).sum::<f64>() / s as f64;
        let snr_db = rng.gen_range(-5.0..25.0);
        let ch = IrChannel::new(1.0, ex2 / 10f64.powf(snr_db / 10.0)).unwrap();
        let theta = random_pmf(&mut rng, s, 0.01);
        let (_, g) = mi_value_and_gradient(&c, &pmf(theta.clone()), &ch, &q).unwrap();
        let pg = project(&g);
        let fd = projected_fd(&theta, 1e-5, |t| {
            mutual_information(&c, &Pmf::new(t.to_vec()).unwrap(), &ch, &q).unwrap()
        });
        let scale = pg.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let err = pg.iter().zip(&fd).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())) / scale;
        worst = worst.max(err);
    }
    v.check(worst < 1e-5, format!("50 instances, max relative error {worst:.3e} < 1e-5"));
    timed(&mut v, t0, 60.0);
    v
}

fn c3_qp_oracle() -> Verdict {
    let mut v = Verdict::new(3, "QP solver vs exhaustive active-set enumeration");
    let t0 = Instant::now();
    let mut rng = rng(3);
    let mut worst: f64 = 0.0;
    let mut failures = 0;
    let mut redrawn = 0;
    for k in 0..200 {
        let n = rng.gen_range(2..=6);
        // Instances whose solution violates LICQ have no unique multipliers
        // to compare against; they are redrawn.
        let (p, oracle) = loop {
            let p = random_qp(&mut rng, n, k % 2 == 1);
            match enumerate_qp(&p) {
                Some(o) if !o.licq => redrawn += 1,
                o => break (p, o),
            }
        };
        match (solve_qp(&p), oracle) {
            (Ok(s), Some(o)) if !s.relaxed => worst = worst.max(qp_deviation(&s, &o)),
            (res, o) => {
                failures += 1;
                v.info(format!(
                    "instance {k}: solver {:?}, oracle found {}",
                    res.map(|s| s.delta),
                    o.is_some()
                ));
            }
        }
    }
    v.info(format!("{redrawn} degenerate draws replaced"));
    v.check(failures == 0, format!("{failures} of 200 instances without a comparable solution"));
    v.check(worst < 1e-8, format!("max primal/dual deviation {worst:.3e} < 1e-8"));
    timed(&mut v, t0, 30.0);
    v
}

fn min_eigenvalue(h: &DMatrix<f64>) -> f64 {
    h.clone().symmetric_eigenvalues().min()
}

fn c4_bfgs() -> Verdict {
    let mut v = Verdict::new(4, "BFGS update");
    let h = bfgs_update(&DMatrix::identity(3, 3), &[1.0, 0.0, 0.0], &[2.0, 0.0, 0.0]);
    v.check(
        h == DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![2.0, 1.0, 1.0])),
        format!("H = I, delta = e1, y = 2e1 gives diag(2, 1, 1) exactly: {:?}", h.as_slice()),
    );
    let mut rng = rng(4);
    let mut worst = f64::INFINITY;
    let n = 5;
    let b = DMatrix::from_fn(n, n, |_, _| normal(&mut rng));
    let mut h = &b * b.transpose() + DMatrix::identity(n, n) * 0.1;
    for _ in 0..100 {
        let a = DMatrix::from_fn(n, n, |_, _| normal(&mut rng));
        let spd = &a * a.transpose() + DMatrix::identity(n, n) * 0.01;
        let d = nalgebra::DVector::from_fn(n, |_, _| normal(&mut rng));
        let y = &spd * &d;
        h = bfgs_update(&h, d.as_slice(), y.as_slice());
        worst = worst.min(min_eigenvalue(&h) / h.amax());
    }
    v.check(worst > 0.0, format!("100 chained curvature-consistent updates, min scaled eigenvalue {worst:.3e} > 0"));
    v
}

fn c5_circuit() -> Verdict {
    let mut v = Verdict::new(5, "circuit oracle");
    let rect = Rectifier::new(CircuitParams {
        diode_leakage: false,
        matching: MatchingModel::Ideal,
        ..CircuitParams::default()
    })
    .unwrap();
    let r = rect.step(0.5, 0.0).unwrap();
    let v_ref = 0.5 * (-1f64).exp();
    let p_ref = 0.25 / (2.0 * 1e4) * (1.0 - (-2f64).exp());
    let ev = (r.v_next - v_ref).abs() / v_ref;
    let ep = (r.avg_power - p_ref).abs() / p_ref;
    v.check(ev < 0.01, format!("RC discharge v_next = {:.6} V vs {v_ref:.6} V, rel err {ev:.2e}", r.v_next));
    v.check(ep < 0.01, format!("RC discharge power = {:.5e} W vs {p_ref:.5e} W, rel err {ep:.2e}", r.avg_power));

    let rect = Rectifier::new(CircuitParams::default()).unwrap();
    let mut worst: f64 = 0.0;
    for a in [0.02, 0.05, 0.1, 0.2, 0.3, 0.45, 0.6] {
        let ss = rect.steady_state_response(a).unwrap().v_next;
        let mut x = 0.0;
        for _ in 0..100 {
            x = rect.step(x, a).unwrap().v_next;
        }
        worst = worst.max((x - ss).abs() / ss);
    }
    v.check(worst < 0.005, format!("steady state vs 100 intervals, max rel diff {worst:.2e} < 5e-3"));

    let default_n = rect.params().rk_substeps;
    let mut worst: f64 = 0.0;
    for v0 in [0.0, 0.2, 0.5] {
        for a in [0.05, 0.2, 0.6] {
            let full = rect.simulate_interval(v0, a, default_n).unwrap().v_next;
            let half = rect.simulate_interval(v0, a, default_n / 2).unwrap().v_next;
            worst = worst.max((full - half).abs() / full.abs().max(1e-12));
        }
    }
    v.check(worst < 1e-6, format!("halving {default_n} RK substeps, max rel change {worst:.2e} < 1e-6"));
    v
}

fn c6_markov_gradient() -> Verdict {
    let mut v = Verdict::new(6, "Markov-chain gradient estimate on the 2-state chain");
    let chain = two_state_chain();
    let theta = vec![0.3, 0.5, 0.2];
    let truth = finite_chain_average(&chain, &theta);
    let grad = projected_fd(&theta, 1e-6, |t| finite_chain_average(&chain, t));
    let mut est = EstimatorState::new(3, 0.1, 0.1).unwrap();
    let mut state = ChainState { xi: 0.0 };
    let mut r = rng(6);
    let g = estimate_gradient(&chain, &pmf(theta.clone()), 100_000, &mut est, &mut state, &mut r).unwrap();
    let cos = cosine(&project(&g.direction), &grad);
    v.check(cos > 0.9, format!("cosine(estimate, brute force) = {cos:.4} > 0.9 after 1e5 steps"));
    v.info(format!("brute-force projected gradient {grad:.4?}, estimate {:.4?}", project(&g.direction)));
    let err = (g.mean_p_tilde - truth).abs() / truth;
    v.check(
        err < 0.02,
        format!("mean P~ = {:.5} vs stationary average {truth:.5}, rel err {err:.2e} < 0.02", g.mean_p_tilde),
    );
    v
}

fn desk_sweep(cfg: &RunConfig) -> SweepConfig {
    let mut s = cfg.sweep();
    s.solver.n_max = 30;
    s.solver.n_steps = 1000;
    s.solver.n_steps_max = 2000;
    s
}

const DURATIONS: [f64; 3] = [1e-6, 1e-5, 1e-4];

fn c7_surrogate(cfg: &RunConfig, sc: &Scenario, pairs: &mut Vec<SurrogatePair>) -> Verdict {
    let mut v = Verdict::new(7, "surrogate accuracy and backend agreement");
    let t0 = Instant::now();
    let train = cfg.training.train_config(0);
    for t in DURATIONS {
        match train_surrogate(sc, t, cfg.dataset.samples, &train, cfg.seed) {
            Ok((pair, n1, n2)) => {
                v.check(
                    n1.test_mape <= 5.0 && n2.test_mape <= 5.0,
                    format!(
                        "T = {t:e} s: held-out MAPE next-state {:.3}%, reward {:.3}% (<= 5%; train {:.3}%/{:.3}%, val {:.3}%/{:.3}%)",
                        n1.test_mape,
                        n2.test_mape,
                        n1.train_mape,
                        n2.train_mape,
                        n1.val_mape,
                        n2.val_mape
                    ),
                );
                pairs.push(pair);
            }
            Err(e) => v.check(false, format!("T = {t:e} s: training failed: {e}")),
        }
    }
    let sweep = desk_sweep(cfg);
    let key = PointKey {
        regime: Regime::Lp,
        realization: 0,
        t: 1e-5,
        i_req: 3.0,
    };
    let direct = optimize_point(sc, &key, &sweep, None, cfg.seed);
    let surrogate = pairs
        .iter()
        .find(|p| p.t_s == key.t)
        .cloned()
        .map(|p| optimize_point(sc, &key, &sweep, Some(p), cfg.seed));
    match (direct, surrogate) {
        (Ok(d), Some(Ok(s))) => {
            let rel = (s.avg_power_w - d.avg_power_w).abs() / d.avg_power_w;
            v.check(
                rel <= 0.10,
                format!(
                    "LP, T = 10 us, I_req = 3: P(theta*) surrogate {:.5e} W vs circuit {:.5e} W, rel diff {rel:.3} <= 0.10",
                    s.avg_power_w, d.avg_power_w
                ),
            );
        }
        (d, s) => v.check(
            false,
            format!("backend comparison failed: circuit {:?}, surrogate {:?}", d.err(), s.map(|r| r.err())),
        ),
    }
    timed(&mut v, t0, 1200.0);
    v
}

fn grid() -> RegionGrid {
    RegionGrid {
        regimes: vec![Regime::Sp, Regime::Lp],
        symbol_durations: DURATIONS.to_vec(),
        i_req: vec![3.0, 4.5, 5.96],
    }
}

fn mean_of(res: &RegionResult, regime: Regime, t: f64, i: f64, f: impl Fn(&swipt_core::region::RegionPoint) -> f64) -> f64 {
    let pts: Vec<f64> = res
        .points
        .iter()
        .filter(|p| p.regime == regime && p.t_s == t && p.i_req == i)
        .map(f)
        .collect();
    pts.iter().sum::<f64>() / pts.len() as f64
}

fn c8_trends(cfg: &RunConfig, sc: &Scenario, pairs: &[SurrogatePair], out: &mut Option<RegionResult>) -> Verdict {
    let mut v = Verdict::new(8, "end-to-end rate-power trends");
    let t0 = Instant::now();
    let g = grid();
    let sweep = desk_sweep(cfg);
    if pairs.len() != DURATIONS.len() {
        v.check(false, "surrogates unavailable".into());
        return v;
    }
    let res = match trace_region(sc, &g, &sweep, SolverBackend::Surrogate(pairs), cfg.seed) {
        Ok(r) => r,
        Err(e) => {
            v.check(false, format!("sweep failed: {e}"));
            return v;
        }
    };
    v.info(format!(
        "{} realizations, {} points, {} failed, {} unconverged at n_max = {}",
        sweep.realizations,
        res.points.len(),
        res.failures.len(),
        res.points.iter().filter(|p| !p.converged).count(),
        sweep.solver.n_max
    ));
    let low_mi = res.points.iter().filter(|p| p.i_bits < p.i_req - 1e-3).count();
    v.info(format!("{low_mi} points with I < I_req - 1e-3"));
    let p_mean = |r, t, i| mean_of(&res, r, t, i, |p| p.avg_power_w);
    let r_mean = |r, t, i| mean_of(&res, r, t, i, |p| p.rate_bps);
    for regime in [Regime::Sp, Regime::Lp] {
        for t in DURATIONS {
            let ps: Vec<f64> = g.i_req.iter().map(|&i| p_mean(regime, t, i)).collect();
            let ok = ps.windows(2).all(|w| w[1] <= w[0]);
            v.check(ok, format!("(a) {regime} T = {t:e} s: mean P over I_req {:?} = {} nonincreasing", g.i_req, sci(&ps)));
        }
    }
    for &i in &g.i_req {
        let ps: Vec<f64> = DURATIONS.iter().map(|&t| p_mean(Regime::Lp, t, i)).collect();
        let rs: Vec<f64> = DURATIONS.iter().map(|&t| r_mean(Regime::Lp, t, i)).collect();
        let ok = ps.windows(2).all(|w| w[1] > w[0]) && rs.windows(2).all(|w| w[1] < w[0]);
        v.check(
            ok,
            format!("(b) LP I_req = {i}: over T = 1, 10, 100 us, mean P = {} increasing, R = {} decreasing", sci(&ps), sci(&rs)),
        );
    }
    let mut worst_ratio = f64::INFINITY;
    for t in DURATIONS {
        for &i in &g.i_req {
            worst_ratio = worst_ratio.min(p_mean(Regime::Lp, t, i) / p_mean(Regime::Sp, t, i));
        }
    }
    v.check(worst_ratio > 1.0, format!("(c) min over (T, I_req) of mean P(LP) / mean P(SP) = {worst_ratio:.3} > 1"));
    let c = &sc.constellation;
    let band = |t, i| mean_of(&res, Regime::Lp, t, i, |p| amplitude_band(c, &p.theta, 0.1, 0.9));
    let (w1, w100) = (band(1e-6, 3.0), band(1e-4, 3.0));
    v.check(
        w100 < w1,
        format!("(d) LP I_req = 3: mean 10-90% amplitude band {w100:.4} V at T = 100 us < {w1:.4} V at T = 1 us"),
    );
    for &i in &g.i_req[1..] {
        v.info(format!(
            "LP I_req = {i}: band {:.4} V at T = 100 us, {:.4} V at T = 1 us",
            band(1e-4, i),
            band(1e-6, i)
        ));
    }
    timed(&mut v, t0, 3600.0);
    *out = Some(res);
    v
}

fn sci(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.4e}")).collect();
    format!("[{}]", parts.join(", "))
}

fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

fn c9_baseline(cfg: &RunConfig, sc: &Scenario, proposed: Option<&RegionResult>) -> Verdict {
    let mut v = Verdict::new(9, "memoryless baseline comparison");
    let Some(prop) = proposed else {
        v.check(false, "proposed sweep unavailable".into());
        return v;
    };
    let t0 = Instant::now();
    let g = grid();
    let base = match baseline_memoryless(sc, &g, &desk_sweep(cfg), cfg.seed) {
        Ok(b) => b,
        Err(e) => {
            v.check(false, format!("baseline sweep failed: {e}"));
            return v;
        }
    };
    v.info(format!("baseline: {} points, {} failed", base.points.len(), base.failures.len()));
    let top = *g.i_req.last().unwrap();
    let max_bits = sc.constellation.max_bits();
    let mut tvs = Vec::new();
    for p in prop.points.iter().filter(|p| p.i_req == top) {
        if let Some(b) = base
            .points
            .iter()
            .find(|b| b.regime == p.regime && b.realization == p.realization && b.t_s == p.t_s && b.i_req == top)
        {
            tvs.push(total_variation(&p.theta, &b.theta));
        }
    }
    let max_tv = tvs.iter().copied().fold(0.0, f64::max);
    let mean_tv = tvs.iter().sum::<f64>() / tvs.len().max(1) as f64;
    v.check(
        (max_bits - top) <= 0.05 && !tvs.is_empty() && max_tv <= 0.05,
        format!(
            "I_req = {top}: max total variation {max_tv:.4} <= 0.05 over {} matched points (mean {mean_tv:.4})",
            tvs.len()
        ),
    );
    for &i in g.i_req.iter().filter(|&&i| i <= 3.0) {
        for t in DURATIONS {
            let pp = mean_of(prop, Regime::Lp, t, i, |p| p.avg_power_w);
            let pb = mean_of(&base, Regime::Lp, t, i, |p| p.avg_power_w);
            v.check(
                pp >= pb,
                format!("LP I_req = {i}, T = {t:e} s: mean P proposed {pp:.5e} W >= baseline {pb:.5e} W"),
            );
        }
    }
    v.info(format!("baseline runtime {:.1} s", t0.elapsed().as_secs_f64()));
    v
}

fn main() -> ExitCode {
    let filter: Vec<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let want = |k: u32| filter.is_empty() || filter.contains(&k);
    let cfg = RunConfig::default();
    let sc = cfg.scenario().expect("default scenario");
    let mut verdicts = Vec::new();
    let mut run = |v: Verdict| {
        v.print();
        verdicts.push(v.pass);
    };
    if want(1) {
        run(c1_mi_oracle());
    }
    if want(2) {
        run(c2_gradient());
    }
    if want(3) {
        run(c3_qp_oracle());
    }
    if want(4) {
        run(c4_bfgs());
    }
    if want(5) {
        run(c5_circuit());
    }
    if want(6) {
        run(c6_markov_gradient());
    }
    let mut pairs = Vec::new();
    if want(7) || want(8) || want(9) {
        let v = c7_surrogate(&cfg, &sc, &mut pairs);
        if want(7) {
            run(v);
        }
    }
    let mut proposed = None;
    if want(8) || want(9) {
        let v = c8_trends(&cfg, &sc, &pairs, &mut proposed);
        if want(8) {
            run(v);
        }
    }
    if want(9) {
        run(c9_baseline(&cfg, &sc, proposed.as_ref()));
    }
    let failed = verdicts.iter().filter(|p| !**p).count();
    println!("acceptance: {} of {} criteria passed", verdicts.len() - failed, verdicts.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
