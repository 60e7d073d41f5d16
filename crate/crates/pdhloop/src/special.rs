//! Bessel functions of the first kind from the ascending series.
//!
//! J_n(x) = Σ_k (-1)^k (x/2)^(2k+n) / (k! (k+n)!)
//!
//! Terms are summed until they fall below 1e-17 of the running sum. For
//! |x| ≤ 5 that takes fewer than 25 terms; the cap of 80 terms keeps the
//! truncation error below 1e-15 up to |x| ≈ 20. Cancellation grows with
//! |x|, so this is not meant for large arguments.

const MAX_TERMS: usize = 80;

pub fn bessel_j(n: u32, x: f64) -> f64 {
    let half = 0.5 * x;
    // (x/2)^n / n!
    let mut term = 1.0;
    for k in 1..=n {
        term *= half / k as f64;
    }
    let q = half * half;
    let mut sum = term;
    for k in 1..MAX_TERMS {
        term *= -q / (k as f64 * (k as f64 + n as f64));
        sum += term;
        if term.abs() <= 1e-17 * sum.abs() {
            break;
        }
    }
    sum
}

pub fn j0(x: f64) -> f64 {
    bessel_j(0, x)
}

pub fn j1(x: f64) -> f64 {
    bessel_j(1, x)
}

pub fn j2(x: f64) -> f64 {
    bessel_j(2, x)
}
