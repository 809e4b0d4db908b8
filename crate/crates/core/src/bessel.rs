//! Modified Bessel function of the first kind, order zero.

use std::f64::consts::PI;

const SERIES_LIMIT: f64 = 15.0;

/// `I₀(z)` for `z ≥ 0` (even function, so negative arguments use `|z|`).
pub fn i0(z: f64) -> f64 {
    let z = z.abs();
    if z < SERIES_LIMIT {
        series(z)
    } else {
        asymptotic_scaled(z) * z.exp()
    }
}

/// `e^{-|z|} I₀(z)`, finite for every argument.
pub fn i0_scaled(z: f64) -> f64 {
    let z = z.abs();
    if z < SERIES_LIMIT {
        series(z) * (-z).exp()
    } else {
        asymptotic_scaled(z)
    }
}

fn series(z: f64) -> f64 {
    let q = 0.25 * z * z;
    let mut term = 1.0;
    let mut sum = 1.0;
    let mut k = 1.0;
    loop {
        term *= q / (k * k);
        sum += term;
        if term < 1e-17 * sum {
            return sum;
        }
        k += 1.0;
    }
}

/// `e^{-z} I₀(z) ≈ (2πz)^{-1/2} Σ_k ((2k-1)!!)² / (k! 8^k z^k)`, truncated
/// at the smallest term.
fn asymptotic_scaled(z: f64) -> f64 {
    let mut term = 1.0;
    let mut sum = 1.0;
    let mut k = 1.0;
    loop {
        let next = term * (2.0 * k - 1.0) * (2.0 * k - 1.0) / (8.0 * k * z);
        if next.abs() >= term.abs() || next.abs() < 1e-17 * sum {
            if next.abs() < term.abs() {
                sum += next;
            }
            break;
        }
        term = next;
        sum += term;
        k += 1.0;
    }
    sum / (2.0 * PI * z).sqrt()
}
