mod common;

use proptest::prelude::*;

use swipt_core::awgn_info::{
    mi_gradient, mutual_information, noise_entropy, output_entropy, IrChannel, QuadratureConfig,
};
use swipt_core::constellation::{Constellation, Pmf};

use common::*;

/// Output entropy of a Gaussian mixture by a fine Riemann sum, in bits.
fn brute_output_entropy(c: &Constellation, theta: &[f64], h: f64, sigma: f64) -> f64 {
    let lo = c.amplitudes().iter().map(|x| h * x).fold(f64::INFINITY, f64::min) - 12.0 * sigma;
    let hi = c.amplitudes().iter().map(|x| h * x).fold(f64::NEG_INFINITY, f64::max) + 12.0 * sigma;
    let n = 400_000;
    let dy = (hi - lo) / n as f64;
    let norm = 1.0 / (sigma * (2.0 * std::f64::consts::PI).sqrt());
    let mut acc = 0.0;
    for k in 0..n {
        let y = lo + (k as f64 + 0.5) * dy;
        let p: f64 = c
            .amplitudes()
            .iter()
            .zip(theta)
            .map(|(x, t)| t * norm * (-(y - h * x).powi(2) / (2.0 * sigma * sigma)).exp())
            .sum();
        if p > 1e-300 {
            acc -= p * p.log2() * dy;
        }
    }
    acc
}

fn bpsk() -> Constellation {
    Constellation::uniform_pam(2, 1.0).unwrap()
}

#[test]
fn noise_entropy_closed_form() {
    assert!((noise_entropy(1.0).unwrap() - 2.047095586).abs() < 1e-8);
    let unit = 1.0 / (2.0 * std::f64::consts::PI * std::f64::consts::E);
    assert!(noise_entropy(unit).unwrap().abs() < 1e-12);
    assert!((noise_entropy(4.0).unwrap() - noise_entropy(1.0).unwrap() - 1.0).abs() < 1e-12);
    assert!(noise_entropy(0.0).is_err());
}

#[test]
fn high_snr_binary_adds_one_bit() {
    let q = QuadratureConfig::default();
    let sigma = 0.01;
    let ch = IrChannel::new(1.0, sigma * sigma).unwrap();
    let theta = Pmf::uniform(2);
    let hy = output_entropy(&bpsk(), &theta, &ch, &q).unwrap();
    let hn = noise_entropy(ch.sigma_n2).unwrap();
    assert!((hy - hn - 1.0).abs() < 1e-4, "H_y − H_n = {}", hy - hn);
    let brute = brute_output_entropy(&bpsk(), &[0.5, 0.5], 1.0, sigma);
    assert!((hy - brute).abs() < 1e-4, "{hy} vs brute {brute}");
    let mi = mutual_information(&bpsk(), &theta, &ch, &q).unwrap();
    assert!((mi - 1.0).abs() < 1e-4);
}

#[test]
fn low_snr_binary_carries_nothing() {
    let q = QuadratureConfig::default();
    let ch = IrChannel::new(1.0, 1e4).unwrap();
    let hy = output_entropy(&bpsk(), &Pmf::uniform(2), &ch, &q).unwrap();
    let hn = noise_entropy(ch.sigma_n2).unwrap();
    assert!(hy - hn < 1e-3);
}

#[test]
fn intermediate_snr_matches_brute_force() {
    let q = QuadratureConfig::default();
    let c = Constellation::uniform_pam(4, 1.0).unwrap();
    let theta = [0.1, 0.4, 0.3, 0.2];
    let sigma = 0.4;
    let ch = IrChannel::new(0.8, sigma * sigma).unwrap();
    let hy = output_entropy(&c, &pmf(theta.to_vec()), &ch, &q).unwrap();
    let brute = brute_output_entropy(&c, &theta, 0.8, sigma);
    assert!((hy - brute).abs() < 1e-6, "{hy} vs brute {brute}");
}

#[test]
fn uniform_64_pam_noiseless_limit() {
    let q = QuadratureConfig::default();
    let c = Constellation::uniform_pam(64, 1.0).unwrap();
    let ch = IrChannel::new(1.0, 1e-8).unwrap();
    let mi = mutual_information(&c, &Pmf::uniform(64), &ch, &q).unwrap();
    assert!((mi - 6.0).abs() < 0.01, "I = {mi}");
}

#[test]
fn point_mass_carries_no_information() {
    let q = QuadratureConfig::default();
    let c = Constellation::uniform_pam(8, 2.0).unwrap();
    let ch = IrChannel::new(0.5, 0.01).unwrap();
    for m in [0, 3, 7] {
        let theta = Pmf::point_mass(8, m);
        assert!(mutual_information(&c, &theta, &ch, &q).unwrap() < 1e-6);
        let hy = output_entropy(&c, &theta, &ch, &q).unwrap();
        assert!((hy - noise_entropy(0.01).unwrap()).abs() < 1e-6);
    }
}

#[test]
fn gradient_at_point_mass_is_a_gaussian_divergence() {
    let q = QuadratureConfig::default();
    let c = Constellation::uniform_pam(4, 1.0).unwrap();
    let (h, n0) = (1.0, 0.09);
    let ch = IrChannel::new(h, n0).unwrap();
    let m = 2;
    let grad = mi_gradient(&c, &Pmf::point_mass(4, m), &ch, &q).unwrap();
    // Moving mass from m toward i raises I at rate D(N(h x_i, N0) || N(h x_m, N0)).
    for i in (0..4).filter(|&i| i != m) {
        let d = h * (c.amplitudes()[i] - c.amplitudes()[m]);
        let kl_bits = d * d / (2.0 * n0 * std::f64::consts::LN_2);
        let analytic = grad[i] - grad[m];
        assert!((analytic - kl_bits).abs() < 1e-6 * kl_bits, "direction {i}: {analytic} vs {kl_bits}");
    }
}

fn snr_case() -> impl Strategy<Value = (usize, Vec<f64>, f64, f64)> {
    (2usize..=6).prop_flat_map(|n| {
        (
            Just(n),
            prop::collection::vec(0.05..1.0f64, n),
            0.2..2.0f64,
            0.05..1.0f64,
        )
    })
}

fn normalized(w: &[f64]) -> Vec<f64> {
    let s: f64 = w.iter().sum();
    w.iter().map(|x| x / s).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn mi_within_bounds((n, w, h, sigma) in snr_case()) {
        let c = Constellation::uniform_pam(n, 1.0).unwrap();
        let ch = IrChannel::new(h, sigma * sigma).unwrap();
        let mi = mutual_information(&c, &pmf(normalized(&w)), &ch, &QuadratureConfig::default()).unwrap();
        prop_assert!(mi >= 0.0 && mi <= c.max_bits());
    }

    #[test]
    fn mi_is_concave_on_segments(
        (n, w1, h, sigma) in snr_case(),
        seed in any::<u64>(),
    ) {
        let q = QuadratureConfig::default();
        let c = Constellation::uniform_pam(n, 1.0).unwrap();
        let ch = IrChannel::new(h, sigma * sigma).unwrap();
        let a = normalized(&w1);
        let b = random_pmf(&mut rng(seed), n, 0.0);
        let mid: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect();
        let ia = mutual_information(&c, &pmf(a), &ch, &q).unwrap();
        let ib = mutual_information(&c, &pmf(b), &ch, &q).unwrap();
        let im = mutual_information(&c, &pmf(mid), &ch, &q).unwrap();
        prop_assert!(im >= 0.5 * (ia + ib) - 1e-8);
    }

    #[test]
    fn snr_scaling_leaves_mi_unchanged((n, w, h, sigma) in snr_case(), k in 0.1..10.0f64) {
        let q = QuadratureConfig::default();
        let c = Constellation::uniform_pam(n, 1.0).unwrap();
        let theta = pmf(normalized(&w));
        let a = mutual_information(&c, &theta, &IrChannel::new(h, sigma * sigma).unwrap(), &q).unwrap();
        let b = mutual_information(&c, &theta, &IrChannel::new(k * h, (k * sigma).powi(2)).unwrap(), &q).unwrap();
        prop_assert!((a - b).abs() < 1e-9, "{} vs {}", a, b);
    }

    #[test]
    fn gradient_matches_projected_finite_differences((n, w, h, sigma) in snr_case()) {
        let q = QuadratureConfig::default();
        let c = Constellation::uniform_pam(n, 1.0).unwrap();
        let ch = IrChannel::new(h, sigma * sigma).unwrap();
        let theta = normalized(&w);
        let grad = mi_gradient(&c, &pmf(theta.clone()), &ch, &q).unwrap();
        let fd = projected_fd(&theta, 1e-5, |t| {
            mutual_information(&c, &Pmf::new(t.to_vec()).unwrap(), &ch, &q).unwrap()
        });
        let analytic = project(&grad);
        let scale = analytic.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-3);
        for (a, b) in analytic.iter().zip(&fd) {
            prop_assert!((a - b).abs() < 1e-5 * scale.max(1.0), "{:?} vs {:?}", analytic, fd);
        }
    }
}
