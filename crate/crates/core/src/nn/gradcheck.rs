//! Finite-difference derivative estimates used to audit the backward pass.
//!
//! The estimator is Ridders' extrapolated central difference: a tableau of
//! central differences at geometrically shrinking steps, extrapolated to
//! zero step. It reports its own error estimate, which matters in `f32`
//! where rounding noise and truncation error pull in opposite directions.

#[derive(Clone, Copy, Debug)]
pub struct Derivative {
    pub value: f64,
    pub error: f64,
}

/// Derivative of `f` at the point where `f(0)` is the unperturbed value,
/// i.e. `f(h)` evaluates the function with the coordinate shifted by `h`.
/// Steps halve each round, so a power-of-two `h0` keeps every shifted
/// `f32` coordinate exactly representable for moderate magnitudes.
pub fn ridders(mut f: impl FnMut(f64) -> f64, h0: f64) -> Derivative {
    const CON: f64 = 2.0;
    const CON2: f64 = CON * CON;
    const NTAB: usize = 10;
    const SAFE: f64 = 2.0;
    let mut a = [[0.0f64; NTAB]; NTAB];
    let mut hh = h0;
    a[0][0] = (f(hh) - f(-hh)) / (2.0 * hh);
    let mut best = Derivative {
        value: a[0][0],
        error: f64::INFINITY,
    };
    for i in 1..NTAB {
        hh /= CON;
        a[0][i] = (f(hh) - f(-hh)) / (2.0 * hh);
        let mut fac = CON2;
        for j in 1..=i {
            a[j][i] = (a[j - 1][i] * fac - a[j - 1][i - 1]) / (fac - 1.0);
            fac *= CON2;
            let errt = (a[j][i] - a[j - 1][i])
                .abs()
                .max((a[j][i] - a[j - 1][i - 1]).abs());
            if errt <= best.error {
                best = Derivative {
                    value: a[j][i],
                    error: errt,
                };
            }
        }
        if (a[i][i] - a[i - 1][i - 1]).abs() >= SAFE * best.error {
            break;
        }
    }
    best
}

/// `|a − b| / max(|a|, |b|)`, with `0/0` taken as 0.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let den = analytic.abs().max(numeric.abs());
    if den == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / den
    }
}
