//! Six statistical moments of the sampled relaxation voltages.

/// Below this sample variance skewness and kurtosis are reported as 0.
pub const ZERO_VARIANCE: f64 = 1e-15;

/// `[max, mean, min, sample variance, skewness, excess kurtosis]`.
///
/// Skewness and kurtosis use population central moments; the variance uses
/// the `n - 1` denominator. Returns `None` for fewer than two values.
pub fn moments(values: &[f64]) -> Option<[f64; 6]> {
    let n = values.len();
    if n < 2 {
        return None;
    }
    let nf = n as f64;
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let mean = values.iter().sum::<f64>() / nf;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for v in values {
        let d = v - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    let var = m2 / (nf - 1.0);
    let (skew, kurt) = if var < ZERO_VARIANCE {
        (0.0, 0.0)
    } else {
        let (m2, m3, m4) = (m2 / nf, m3 / nf, m4 / nf);
        (m3 / m2.powf(1.5), m4 / (m2 * m2) - 3.0)
    };
    // mean of nearly-equal values can round just outside [min, max]
    Some([max, mean.clamp(min, max), min, var, skew, kurt])
}
