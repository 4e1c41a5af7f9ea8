//! Single-Lorentzian least-squares fit for extracting dephasing times.

use std::f64::consts::PI;

use nalgebra::{Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectra::{lorentzian, Spectrum};

pub const MAX_ITERATIONS: usize = 200;
pub const PARAM_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub center_hz: f64,
    pub fwhm_hz: f64,
    /// Area under the Lorentzian (V^2 for a noise spectrum).
    pub power: f64,
    pub offset: f64,
    /// tau_s = 1 / (pi nu_FWHM) (s)
    pub dephasing_time: f64,
    pub residual_norm: f64,
    pub iterations: usize,
}

fn model(x: f64, p: &Vector4<f64>) -> f64 {
    p[2] * lorentzian(x, p[0], p[1]) + p[3]
}

/// d model / d (center, fwhm, area, offset)
fn gradient(x: f64, p: &Vector4<f64>) -> Vector4<f64> {
    let (d, h) = (x - p[0], 0.5 * p[1]);
    let q = d * d + h * h;
    Vector4::new(
        p[2] * h / PI * 2.0 * d / (q * q),
        p[2] * 0.5 * (d * d - h * h) / (PI * q * q),
        h / PI / q,
        1.0,
    )
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Fits one area-normalized Lorentzian plus a flat offset to the part of
/// `spectrum` inside `window` (Hz).
pub fn fit_lorentzian(spectrum: &Spectrum, window: (f64, f64)) -> Result<FitResult> {
    let (x, y): (Vec<f64>, Vec<f64>) = spectrum
        .axis
        .iter()
        .zip(&spectrum.values)
        .filter(|(x, _)| **x >= window.0 && **x <= window.1)
        .map(|(a, b)| (*a, *b))
        .unzip();
    if x.len() < 8 {
        return Err(Error::Fit(format!(
            "window {}..{} Hz holds {} points, need at least 8",
            window.0,
            window.1,
            x.len()
        )));
    }

    let edge = (x.len() / 10).max(2);
    let offset = median(y[..edge].iter().chain(&y[y.len() - edge..]).copied().collect());
    let (imax, ymax) = y
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |m, (k, &v)| if v > m.1 { (k, v) } else { m });
    let height = ymax - offset;
    let spread = y.iter().fold(0.0_f64, |m, v| m.max((v - offset).abs()));
    if !(height > 0.0) || !(height > 1e-9 * spread.max(offset.abs())) {
        return Err(Error::Fit(format!(
            "no peak in window {}..{} Hz (max {ymax:e}, edge median {offset:e})",
            window.0, window.1
        )));
    }
    let center = x[imax];
    let (mut m0, mut m2) = (0.0, 0.0);
    for (xi, yi) in x.iter().zip(&y) {
        let w = (yi - offset).max(0.0);
        m0 += w;
        m2 += w * (xi - center).powi(2);
    }
    let step = (x[x.len() - 1] - x[0]) / (x.len() - 1) as f64;
    let fwhm = (2.0 * (m2 / m0).sqrt()).clamp(2.0 * step, x[x.len() - 1] - x[0]);
    let mut p = Vector4::new(center, fwhm, height * PI * fwhm / 2.0, offset);

    let cost = |p: &Vector4<f64>| -> f64 { x.iter().zip(&y).map(|(xi, yi)| (yi - model(*xi, p)).powi(2)).sum() };
    let mut current = cost(&p);
    let mut lambda = 1e-3;
    for iter in 1..=MAX_ITERATIONS {
        let mut jtj = Matrix4::<f64>::zeros();
        let mut jtr = Vector4::<f64>::zeros();
        for (xi, yi) in x.iter().zip(&y) {
            let g = gradient(*xi, &p);
            jtj += g * g.transpose();
            jtr += g * (yi - model(*xi, &p));
        }
        let mut accepted = None;
        for _ in 0..40 {
            let mut a = jtj;
            for k in 0..4 {
                a[(k, k)] += lambda * jtj[(k, k)].max(f64::MIN_POSITIVE);
            }
            let Some(dp) = a.lu().solve(&jtr) else {
                lambda *= 10.0;
                continue;
            };
            let trial = p + dp;
            if trial[1] > 0.0 && trial.iter().all(|v| v.is_finite()) {
                let c = cost(&trial);
                if c <= current {
                    accepted = Some((trial, c, dp));
                    break;
                }
            }
            lambda *= 10.0;
        }
        let Some((trial, c, dp)) = accepted else {
            return Err(Error::Fit(format!(
                "no downhill step at iteration {iter}: center {:e} Hz, fwhm {:e} Hz, area {:e}, offset {:e}",
                p[0], p[1], p[2], p[3]
            )));
        };
        let change = (0..4)
            .map(|k| dp[k].abs() / trial[k].abs().max(f64::MIN_POSITIVE))
            .fold(0.0, f64::max);
        p = trial;
        current = c;
        lambda = (lambda / 10.0).max(1e-12);
        if change < PARAM_TOLERANCE {
            return Ok(FitResult {
                center_hz: p[0],
                fwhm_hz: p[1],
                power: p[2],
                offset: p[3],
                dephasing_time: 1.0 / (PI * p[1]),
                residual_norm: current.sqrt(),
                iterations: iter,
            });
        }
    }
    Err(Error::Fit(format!(
        "no convergence after {MAX_ITERATIONS} iterations: center {:e} Hz, fwhm {:e} Hz, residual {:e}",
        p[0],
        p[1],
        current.sqrt()
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectra::uniform_axis;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn synthetic(center: f64, fwhm: f64, area: f64, offset: f64) -> Spectrum {
        let axis = uniform_axis(0.0, 20e6, 20e3).unwrap();
        let values = axis.iter().map(|&x| area * lorentzian(x, center, fwhm) + offset).collect();
        Spectrum::new(axis, values).unwrap()
    }

    #[test]
    fn exact_lorentzian() {
        let s = synthetic(12.6e6, 515e3, 2e-10, 1e-18);
        let r = fit_lorentzian(&s, (10e6, 16e6)).unwrap();
        assert!((r.fwhm_hz - 515e3).abs() / 515e3 < 1e-6, "{r:?}");
        assert!((r.center_hz - 12.6e6).abs() < 1.0);
        assert!((r.dephasing_time - 618e-9).abs() < 1e-9, "{}", r.dephasing_time);
        let tau = 1.0 / (PI * 515e3);
        assert!((r.dephasing_time - tau).abs() / tau < 1e-6);
    }

    #[test]
    fn flat_spectrum_has_no_peak() {
        let s = synthetic(12.6e6, 515e3, 0.0, 3e-16);
        assert!(matches!(fit_lorentzian(&s, (10e6, 16e6)), Err(Error::Fit(_))));
    }

    #[test]
    fn noisy_lorentzian_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut s = synthetic(8.0e6, 640e3, 1e-9, 0.0);
        let peak = s.values.iter().fold(0.0_f64, |m, v| m.max(*v));
        for v in &mut s.values {
            *v += 0.01 * peak * rng.gen_range(-1.0..1.0);
        }
        let r = fit_lorentzian(&s, (4e6, 12e6)).unwrap();
        assert!((r.fwhm_hz - 640e3).abs() / 640e3 < 0.02, "{r:?}");
        assert!((r.center_hz - 8e6).abs() / 8e6 < 0.02);
        assert!((r.power - 1e-9).abs() / 1e-9 < 0.02);
    }

    #[test]
    fn tiny_window_rejected() {
        let s = synthetic(12.6e6, 515e3, 1.0, 0.0);
        assert!(fit_lorentzian(&s, (12.6e6, 12.65e6)).is_err());
    }
}
