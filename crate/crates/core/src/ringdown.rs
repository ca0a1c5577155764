//! Logarithmic-decrement fit of a decaying oscillation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RingdownFit {
    /// Envelope decay rate α in `e^{−αt}`, 1/s.
    pub decay_rate: f64,
    pub frequency_hz: f64,
    pub damping_ratio: f64,
    pub extrema: usize,
}

/// Fits `x(t) ≈ a e^{−αt} cos(ω_d t + θ)` from the local extrema of `signal`.
///
/// Extrema are refined by a parabola through three samples; α comes from a
/// least-squares line through `ln|x|` and ω_d from the mean half-period.
/// Extrema smaller than `floor` times the largest one are ignored.
pub fn fit_ringdown(signal: &[f64], dt: f64, floor: f64) -> Result<RingdownFit> {
    if signal.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("ringdown signal".into()));
    }
    let mut peaks: Vec<(f64, f64)> = Vec::new();
    for k in 1..signal.len().saturating_sub(1) {
        let (a, b, c) = (signal[k - 1], signal[k], signal[k + 1]);
        let is_max = b > a && b >= c && b > 0.0;
        let is_min = b < a && b <= c && b < 0.0;
        if !(is_max || is_min) {
            continue;
        }
        let curvature = a - 2.0 * b + c;
        let (offset, value) = if curvature != 0.0 {
            let off = 0.5 * (a - c) / curvature;
            (off, b - 0.25 * (a - c) * off)
        } else {
            (0.0, b)
        };
        peaks.push(((k as f64 + offset) * dt, value));
    }
    let largest = peaks.iter().map(|p| p.1.abs()).fold(0.0, f64::max);
    peaks.retain(|p| p.1.abs() > floor * largest);
    if peaks.len() < 4 {
        return Err(Error::InsufficientData { samples: peaks.len() });
    }
    let m = peaks.len() as f64;
    let (st, sy) = peaks
        .iter()
        .fold((0.0, 0.0), |(st, sy), (t, v)| (st + t, sy + v.abs().ln()));
    let (tm, ym) = (st / m, sy / m);
    let (mut num, mut den) = (0.0, 0.0);
    for (t, v) in &peaks {
        num += (t - tm) * (v.abs().ln() - ym);
        den += (t - tm) * (t - tm);
    }
    let decay_rate = -num / den;
    let half_period = (peaks[peaks.len() - 1].0 - peaks[0].0) / (m - 1.0);
    let omega_d = std::f64::consts::PI / half_period;
    Ok(RingdownFit {
        decay_rate,
        frequency_hz: omega_d / (2.0 * std::f64::consts::PI),
        damping_ratio: decay_rate / (decay_rate * decay_rate + omega_d * omega_d).sqrt(),
        extrema: peaks.len(),
    })
}
