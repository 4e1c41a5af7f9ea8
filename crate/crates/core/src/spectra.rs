//! Observables built from steady states: susceptibility, absorption, and the
//! spin-noise spectrum as a sum of Lorentzian components.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::atomic_data::{detuning_reference_hz, Isotope, LevelRef, LevelScheme};
use crate::bloch::DensityMatrix;
use crate::constants::CODATA;
use crate::doppler::{GridSpec, VelocityGrid};
use crate::error::{Error, Result};
use crate::io;
use crate::vapor::rb_number_density;

/// Terrestrial field used as the "zero field" reference (T).
pub const TERRESTRIAL_FIELD: f64 = 45e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AtomDensity {
    /// From the vapor pressure at the cell temperature.
    Auto,
    /// Fixed total density (1/m^3).
    Fixed(f64),
}

/// Physical parameters of one run, SI units throughout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// I_l (W/m^2)
    pub intensity: f64,
    /// P_l (W)
    pub power: f64,
    /// w (m)
    pub beam_radius: f64,
    /// l (m)
    pub cell_length: f64,
    /// k_z (1/m)
    pub wave_number: f64,
    /// T (K)
    pub temperature: f64,
    /// B (T)
    pub field: f64,
    /// Field of the subtracted reference spectrum (T).
    pub reference_field: f64,
    pub density: AtomDensity,
    /// Isotope fractions of the vapor.
    pub mixture: Vec<(Isotope, f64)>,
    /// gamma_B (1/s)
    pub buffer_quench: f64,
    /// gamma_diff (1/s)
    pub transit_rate: f64,
    /// alpha (V/W)
    pub gain: f64,
    pub grid: GridSpec,
    /// Weight each level's noise power with <m_F^2>.
    pub mf_weighting: bool,
    pub rate_calibration: f64,
}

impl ExperimentConfig {
    fn preset(intensity: f64) -> Self {
        let beam_radius = 120e-6;
        Self {
            intensity,
            power: intensity * PI * beam_radius * beam_radius,
            beam_radius,
            cell_length: 50e-3,
            wave_number: 2.0 * PI * detuning_reference_hz() / CODATA.c,
            temperature: 350.0,
            field: 1.8e-3,
            reference_field: TERRESTRIAL_FIELD,
            density: AtomDensity::Auto,
            mixture: vec![(Isotope::Rb87, 1.0)],
            buffer_quench: 0.0,
            transit_rate: 0.0,
            gain: 20.0,
            grid: GridSpec::default(),
            mf_weighting: true,
            rate_calibration: 1.0,
        }
    }

    /// Isotopically pure 87Rb with 1 mbar helium.
    pub fn cell_a(intensity: f64) -> Self {
        Self {
            buffer_quench: 2.0 * PI * 18e6,
            transit_rate: PI * 515e3,
            ..Self::preset(intensity)
        }
    }

    /// Natural rubidium, no buffer gas.
    pub fn cell_b(intensity: f64) -> Self {
        Self {
            mixture: vec![(Isotope::Rb85, 0.7215), (Isotope::Rb87, 0.2785)],
            transit_rate: PI * 640e3,
            ..Self::preset(intensity)
        }
    }

    /// Sets I_l and the matching P_l = I_l pi w^2.
    pub fn with_intensity(mut self, intensity: f64) -> Self {
        self.intensity = intensity;
        self.power = intensity * PI * self.beam_radius * self.beam_radius;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        let positive = [
            ("intensity", self.intensity),
            ("power", self.power),
            ("beam_radius", self.beam_radius),
            ("cell_length", self.cell_length),
            ("wave_number", self.wave_number),
            ("temperature", self.temperature),
            ("transit_rate", self.transit_rate),
            ("gain", self.gain),
            ("rate_calibration", self.rate_calibration),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                bad.push(format!("{name} must be > 0 (got {v})"));
            }
        }
        for (name, v) in [
            ("field", self.field),
            ("reference_field", self.reference_field),
            ("buffer_quench", self.buffer_quench),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                bad.push(format!("{name} must be >= 0 (got {v})"));
            }
        }
        if let AtomDensity::Fixed(n) = self.density {
            if !(n >= 0.0) || !n.is_finite() {
                bad.push(format!("density must be >= 0 (got {n})"));
            }
        }
        if self.mixture.is_empty() {
            bad.push("mixture lists no isotope".into());
        }
        for (k, (iso, frac)) in self.mixture.iter().enumerate() {
            if !(*frac >= 0.0 && *frac <= 1.0) {
                bad.push(format!("fraction of {} must lie in [0, 1] (got {frac})", iso.name()));
            }
            if self.mixture[..k].iter().any(|(other, _)| other == iso) {
                bad.push(format!("{} listed twice in mixture", iso.name()));
            }
        }
        let total: f64 = self.mixture.iter().map(|m| m.1).sum();
        if (total - 1.0).abs() > 1e-6 {
            bad.push(format!("mixture fractions sum to {total}, not 1"));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    /// V = pi w^2 l (m^3)
    pub fn probe_volume(&self) -> f64 {
        PI * self.beam_radius * self.beam_radius * self.cell_length
    }

    /// Optical field amplitude E_0 = sqrt(2 I / (c eps0)) (V/m).
    pub fn field_amplitude(&self) -> f64 {
        (2.0 * self.intensity / (CODATA.c * CODATA.eps0)).sqrt()
    }

    /// Total rubidium density n_A (1/m^3).
    pub fn atom_density(&self) -> Result<f64> {
        match self.density {
            AtomDensity::Auto => rb_number_density(self.temperature),
            AtomDensity::Fixed(n) => Ok(n),
        }
    }

    pub fn fraction(&self, isotope: Isotope) -> f64 {
        self.mixture
            .iter()
            .find(|m| m.0 == isotope)
            .map_or(0.0, |m| m.1)
    }

    /// Density of the isotope a scheme describes.
    pub fn isotope_density(&self, scheme: &LevelScheme) -> Result<f64> {
        let frac = scheme.isotope.map_or(1.0, |iso| self.fraction(iso));
        Ok(self.atom_density()? * frac)
    }

    /// N = n V for the isotope a scheme describes.
    pub fn atom_count(&self, scheme: &LevelScheme) -> Result<f64> {
        Ok(self.isotope_density(scheme)? * self.probe_volume())
    }

    pub fn scheme(&self, isotope: Isotope) -> LevelScheme {
        isotope.scheme().with_rate_calibration(self.rate_calibration)
    }

    pub fn velocity_grid(&self, scheme: &LevelScheme) -> Result<VelocityGrid> {
        VelocityGrid::build(self.temperature, scheme.mass, self.grid)
    }

    /// Hex SHA-256 of the serialized config.
    pub fn digest(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        let hash = Sha256::digest(text.as_bytes());
        hash.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Parameters that change a steady state, hashed.
    pub fn solve_digest(&self) -> String {
        let key = (
            self.intensity,
            self.temperature,
            self.buffer_quench,
            self.transit_rate,
            self.rate_calibration,
            self.grid,
        );
        let text = serde_json::to_string(&key).expect("key serializes");
        Sha256::digest(text.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// sqrt(hbar e^2 / 2m) sum_ij sqrt(f_ij / omega_ij) rho_ij for one atom (C m).
pub fn atomic_polarization(scheme: &LevelScheme, rho: &DensityMatrix) -> Result<Complex64> {
    let c = &CODATA;
    let pre = (c.hbar * c.e * c.e / (2.0 * c.m_e)).sqrt();
    let mut acc = Complex64::new(0.0, 0.0);
    for i in 0..scheme.n_ground() {
        for j in 0..scheme.n_excited() {
            if scheme.is_allowed(i, j) {
                let w = (scheme.branching[i][j] / scheme.transition_angular(i, j)?).sqrt();
                acc += rho.optical_coherence(i, j) * w;
            }
        }
    }
    Ok(acc * pre)
}

/// Doppler-averaged susceptibility of one isotope.
pub fn susceptibility(
    states: &[DensityMatrix],
    scheme: &LevelScheme,
    config: &ExperimentConfig,
    grid: &VelocityGrid,
) -> Result<Complex64> {
    if states.len() != grid.len() {
        return Err(Error::Shape(format!(
            "{} steady states for {} velocity nodes",
            states.len(),
            grid.len()
        )));
    }
    let density = config.isotope_density(scheme)?;
    if density == 0.0 {
        return Ok(Complex64::new(0.0, 0.0));
    }
    let per_node: Vec<Complex64> = states
        .iter()
        .map(|rho| atomic_polarization(scheme, rho))
        .collect::<Result<_>>()?;
    let re = grid.convolve_values(&per_node.iter().map(|z| z.re).collect::<Vec<_>>())?;
    let im = grid.convolve_values(&per_node.iter().map(|z| z.im).collect::<Vec<_>>())?;
    Ok(Complex64::new(re, im) * (density / (CODATA.eps0 * config.field_amplitude())))
}

/// kappa = Im sqrt(1 + chi), principal branch.
pub fn absorption_coefficient(chi: Complex64) -> f64 {
    (Complex64::new(1.0, 0.0) + chi).sqrt().im
}

/// P = P_l exp(-kappa l k_z)
pub fn transmitted_power(kappa: f64, config: &ExperimentConfig) -> f64 {
    config.power * (-kappa * config.cell_length * config.wave_number).exp()
}

/// nu_L = g_F mu_B B / h (Hz), signed.
pub fn larmor_frequency(g_f: f64, field: f64) -> f64 {
    g_f * CODATA.mu_b * field / CODATA.h
}

/// Ground-level spin relaxation rate Gamma_i (rad/s).
pub fn ground_noise_width(
    scheme: &LevelScheme,
    rho: &DensityMatrix,
    config: &ExperimentConfig,
    i: usize,
) -> Result<f64> {
    scheme.level(LevelRef::Ground(i))?;
    let (ng, ne) = (scheme.n_ground(), scheme.n_excited());
    let mut own = 0.0;
    for j in 0..ne {
        own += scheme.spontaneous_rate(i, j)? * rho.excited_population(j);
    }
    let mut others = 0.0;
    for ip in (0..ng).filter(|&ip| ip != i) {
        for j in 0..ne {
            others += scheme.spontaneous_rate(ip, j)? * rho.excited_population(j);
        }
    }
    Ok(2.0 * (config.transit_rate + 2.0 / 3.0 * (own + others)))
}

/// Excited-level spin relaxation rate Gamma_j (rad/s).
pub fn excited_noise_width(
    scheme: &LevelScheme,
    rho: &DensityMatrix,
    config: &ExperimentConfig,
    j: usize,
) -> Result<f64> {
    scheme.level(LevelRef::Excited(j))?;
    let rho_jj = rho.excited_population(j);
    let mut sum = 0.0;
    for i in 0..scheme.n_ground() {
        let g = scheme.spontaneous_rate(i, j)?;
        sum += g + rho_jj * g;
    }
    Ok(2.0 * (config.transit_rate + 2.0 / 3.0 * sum))
}

/// Faraday noise angle d(theta) (rad) of one level, summed over its optical
/// partners.
pub fn faraday_noise_angle(
    scheme: &LevelScheme,
    rho: &DensityMatrix,
    config: &ExperimentConfig,
    level: LevelRef,
) -> Result<f64> {
    scheme.level(level)?;
    let n_atoms = config.atom_count(scheme)?;
    let volume = config.probe_volume();
    let pre = config.wave_number * config.cell_length
        / (3.0 * CODATA.eps0 * config.field_amplitude());
    let pairs: Vec<(usize, usize)> = match level {
        LevelRef::Ground(i) => (0..scheme.n_excited()).map(|j| (i, j)).collect(),
        LevelRef::Excited(j) => (0..scheme.n_ground()).map(|i| (i, j)).collect(),
    };
    let occupation = match level {
        LevelRef::Ground(i) => rho.ground_population(i),
        LevelRef::Excited(j) => rho.excited_population(j),
    }
    .max(0.0);
    let mut sq = 0.0;
    for (i, j) in pairs {
        if !scheme.is_allowed(i, j) {
            continue;
        }
        let mu = scheme.dipole_moment(i, j)?;
        let re = rho.optical_coherence(i, j).re;
        sq += (pre * mu).powi(2) * n_atoms / (volume * volume) * re * re * occupation;
    }
    Ok(sq.sqrt())
}

/// U = alpha P_l sin(d theta) exp(-kappa l k_z) (V).
pub fn noise_amplitude(d_theta: f64, kappa: f64, config: &ExperimentConfig) -> Result<f64> {
    if !(0.0..PI / 2.0).contains(&d_theta) {
        return Err(Error::Domain(format!(
            "Faraday noise angle {d_theta} rad outside [0, pi/2)"
        )));
    }
    Ok(config.gain * transmitted_power(kappa, config) * d_theta.sin())
}

/// One Lorentzian line of the noise spectrum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseComponent {
    pub isotope: Option<Isotope>,
    /// Level index within its manifold.
    pub level: usize,
    pub excited: bool,
    /// Landé factor of the level.
    pub g_f: f64,
    /// |nu_L| (Hz)
    pub center_hz: f64,
    /// Gamma (rad/s); the spectral FWHM is Gamma / 2 pi.
    pub width: f64,
    /// U^2 (V^2), including <m_F^2> and the velocity-class weight.
    pub power: f64,
    /// Velocity class (m/s).
    pub velocity: f64,
}

impl NoiseComponent {
    pub fn fwhm_hz(&self) -> f64 {
        self.width / (2.0 * PI)
    }

    /// Power entering the spectrum (excited levels count twice).
    pub fn spectral_power(&self) -> f64 {
        if self.excited {
            2.0 * self.power
        } else {
            self.power
        }
    }

    /// Same line at a different magnetic field.
    pub fn at_field(&self, field: f64) -> Self {
        Self {
            center_hz: larmor_frequency(self.g_f, field).abs(),
            ..self.clone()
        }
    }

    pub fn level_ref(&self) -> LevelRef {
        if self.excited {
            LevelRef::Excited(self.level)
        } else {
            LevelRef::Ground(self.level)
        }
    }
}

/// Noise components of every level of one isotope at every velocity node,
/// at magnetic field `field`. `kappa` is the Doppler-averaged absorption of
/// the whole vapor at this laser frequency.
pub fn noise_components(
    states: &[DensityMatrix],
    scheme: &LevelScheme,
    config: &ExperimentConfig,
    grid: &VelocityGrid,
    kappa: f64,
    field: f64,
) -> Result<Vec<NoiseComponent>> {
    if states.len() != grid.len() {
        return Err(Error::Shape(format!(
            "{} steady states for {} velocity nodes",
            states.len(),
            grid.len()
        )));
    }
    let levels: Vec<LevelRef> = (0..scheme.n_ground())
        .map(LevelRef::Ground)
        .chain((0..scheme.n_excited()).map(LevelRef::Excited))
        .collect();
    let mut out = Vec::new();
    for (node, rho) in states.iter().enumerate() {
        let (u, w) = (grid.nodes[node], grid.weights[node]);
        for &level in &levels {
            let info = scheme.level(level)?;
            let mf2 = if config.mf_weighting {
                info.mean_square_mf()
            } else {
                1.0
            };
            let d_theta = faraday_noise_angle(scheme, rho, config, level)?;
            let amp = noise_amplitude(d_theta, kappa, config).map_err(|e| {
                Error::Domain(format!("{e} ({} {level:?}, u = {u} m/s)", scheme.name))
            })?;
            let power = amp * amp * mf2 * w;
            if power == 0.0 {
                continue;
            }
            let (index, excited, width) = match level {
                LevelRef::Ground(i) => (i, false, ground_noise_width(scheme, rho, config, i)?),
                LevelRef::Excited(j) => (j, true, excited_noise_width(scheme, rho, config, j)?),
            };
            out.push(NoiseComponent {
                isotope: scheme.isotope,
                level: index,
                excited,
                g_f: info.g_f,
                center_hz: larmor_frequency(info.g_f, field).abs(),
                width,
                power,
                velocity: u,
            });
        }
    }
    Ok(out)
}

/// Area-normalized Lorentzian (1/Hz).
pub fn lorentzian(nu: f64, center: f64, fwhm: f64) -> f64 {
    let hw = 0.5 * fwhm;
    hw / PI / ((nu - center).powi(2) + hw * hw)
}

/// `n` points from `start` in steps of `step`.
pub fn uniform_axis(start: f64, stop: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !(stop > start) || !start.is_finite() || !stop.is_finite() {
        return Err(Error::Config(format!(
            "axis {start}:{stop}:{step} must have start < stop and step > 0"
        )));
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize + 1;
    if n < 2 {
        return Err(Error::Config(format!("axis {start}:{stop}:{step} has fewer than 2 points")));
    }
    Ok((0..n).map(|k| start + k as f64 * step).collect())
}

fn check_uniform(axis: &[f64]) -> Result<f64> {
    if axis.len() < 2 {
        return Err(Error::Shape("axis needs at least 2 points".into()));
    }
    let step = (axis[axis.len() - 1] - axis[0]) / (axis.len() - 1) as f64;
    for (k, w) in axis.windows(2).enumerate() {
        if !(w[1] > w[0]) || ((w[1] - w[0]) - step).abs() > 1e-6 * step {
            return Err(Error::Shape(format!("axis not uniform and increasing at index {k}")));
        }
    }
    Ok(step)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SpectrumMeta {
    pub kind: String,
    pub config_digest: Option<String>,
    pub detuning_hz: Option<f64>,
    pub field_t: Option<f64>,
    pub reference_field_t: Option<f64>,
    pub fractions: Vec<(Isotope, f64)>,
    pub config: Option<ExperimentConfig>,
}

impl SpectrumMeta {
    pub fn for_config(kind: &str, config: &ExperimentConfig, detuning_hz: f64) -> Self {
        Self {
            kind: kind.into(),
            config_digest: Some(config.digest()),
            detuning_hz: Some(detuning_hz),
            field_t: Some(config.field),
            reference_field_t: Some(config.reference_field),
            fractions: config.mixture.clone(),
            config: Some(config.clone()),
        }
    }
}

/// Values on a uniform frequency axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    /// Hz
    pub axis: Vec<f64>,
    pub values: Vec<f64>,
    pub meta: SpectrumMeta,
}

impl Spectrum {
    pub fn new(axis: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if axis.len() != values.len() {
            return Err(Error::Shape(format!(
                "{} axis points for {} values",
                axis.len(),
                values.len()
            )));
        }
        if !axis.windows(2).all(|w| w[1] > w[0]) {
            return Err(Error::Shape("axis must be strictly increasing".into()));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("spectrum value at index {k}")));
        }
        Ok(Self {
            axis,
            values,
            meta: SpectrumMeta::default(),
        })
    }

    pub fn with_meta(mut self, meta: SpectrumMeta) -> Self {
        self.meta = meta;
        self
    }

    /// Trapezoidal integral over the part of the axis with nu > `above`.
    pub fn integral_above(&self, above: f64) -> f64 {
        self.axis
            .windows(2)
            .zip(self.values.windows(2))
            .filter(|(x, _)| x[0] >= above)
            .map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1]))
            .sum()
    }

    pub fn integral(&self) -> f64 {
        self.integral_above(f64::NEG_INFINITY)
    }

    pub fn to_csv(&self) -> String {
        io::columns_to_csv(("nu_hz", "value"), &self.axis, &self.values)
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let (axis, values) = io::csv_to_columns(text)?;
        Self::new(axis, values)
    }

    /// Writes the CSV and its JSON sidecar.
    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv())?;
        io::write_json(&io::sidecar_path(path), &self.meta)
    }

    /// Reads a CSV and, when present, its sidecar.
    pub fn read(path: &Path) -> Result<Self> {
        let mut s = Self::from_csv(&fs::read_to_string(path)?)?;
        let side = io::sidecar_path(path);
        if side.exists() {
            s.meta = serde_json::from_str(&fs::read_to_string(side)?)?;
        }
        Ok(s)
    }
}

const CHUNK: usize = 256;

/// S(nu) = sum_c U_c^2 [L(nu - nu_c) + L(nu + nu_c)] with FWHM Gamma_c / 2 pi.
pub fn assemble_noise_spectrum(components: &[NoiseComponent], axis: &[f64]) -> Result<Spectrum> {
    check_uniform(axis)?;
    if axis[0] < 0.0 {
        return Err(Error::Shape("noise axis must be non-negative".into()));
    }
    if let Some(c) = components.iter().find(|c| !(c.width > 0.0) || !(c.power >= 0.0)) {
        return Err(Error::Domain(format!(
            "noise component with width {} and power {}",
            c.width, c.power
        )));
    }
    // fixed chunking keeps the summation order independent of the thread count
    let partial: Vec<Vec<f64>> = components
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = vec![0.0; axis.len()];
            for c in chunk {
                let (p, fwhm) = (c.spectral_power(), c.fwhm_hz());
                for (v, &nu) in acc.iter_mut().zip(axis) {
                    *v += p * (lorentzian(nu, c.center_hz, fwhm) + lorentzian(nu, -c.center_hz, fwhm));
                }
            }
            acc
        })
        .collect();
    let mut values = vec![0.0; axis.len()];
    for part in partial {
        for (v, p) in values.iter_mut().zip(part) {
            *v += p;
        }
    }
    Spectrum::new(axis.to_vec(), values)
}

/// Pointwise S_field - S_zero.
pub fn difference_spectrum(field: &Spectrum, zero: &Spectrum) -> Result<Spectrum> {
    if field.axis != zero.axis {
        return Err(Error::Shape("difference of spectra on different axes".into()));
    }
    let values = field.values.iter().zip(&zero.values).map(|(a, b)| a - b).collect();
    Ok(Spectrum::new(field.axis.clone(), values)?.with_meta(field.meta.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bloch::{assemble_generator, steady_state, DriveContext};

    fn component(center: f64, fwhm: f64, power: f64, excited: bool) -> NoiseComponent {
        NoiseComponent {
            isotope: Some(Isotope::Rb87),
            level: 1,
            excited,
            g_f: 0.5,
            center_hz: center,
            width: 2.0 * PI * fwhm,
            power,
            velocity: 0.0,
        }
    }

    fn states(config: &ExperimentConfig, scheme: &LevelScheme, detuning: f64) -> (VelocityGrid, Vec<DensityMatrix>) {
        let grid = config.velocity_grid(scheme).unwrap();
        let reference = detuning_reference_hz();
        let rho = grid
            .nodes
            .iter()
            .map(|&u| {
                let ctx = DriveContext::at_detuning(
                    scheme,
                    reference,
                    detuning,
                    u,
                    config.intensity,
                    config.buffer_quench,
                    config.transit_rate,
                )
                .unwrap();
                steady_state(&assemble_generator(scheme, &ctx).unwrap()).unwrap()
            })
            .collect();
        (grid, rho)
    }

    #[test]
    fn presets() {
        let a = ExperimentConfig::cell_a(1.8e4);
        assert_eq!(a.buffer_quench, 2.0 * PI * 18e6);
        assert_eq!(a.transit_rate, PI * 515e3);
        assert_eq!(a.mixture, vec![(Isotope::Rb87, 1.0)]);
        let b = ExperimentConfig::cell_b(7.8e4);
        assert_eq!(b.fraction(Isotope::Rb85), 0.7215);
        assert_eq!(b.fraction(Isotope::Rb87), 0.2785);
        assert_eq!(b.transit_rate, PI * 640e3);
        for c in [&a, &b] {
            c.validate().unwrap();
            assert_eq!(c.temperature, 350.0);
            assert_eq!(c.cell_length, 0.05);
            assert_eq!(2.0 * c.beam_radius, 240e-6);
            assert_eq!(c.gain, 20.0);
            let p = c.intensity * PI * c.beam_radius.powi(2);
            assert!((c.power - p).abs() / p < 0.01);
        }
    }

    #[test]
    fn validation_lists_every_offender() {
        let mut c = ExperimentConfig::cell_b(1.0);
        c.temperature = -3.0;
        c.gain = 0.0;
        c.mixture[0].1 = 0.9;
        let msg = c.validate().unwrap_err().to_string();
        for key in ["temperature", "gain", "sum to"] {
            assert!(msg.contains(key), "{msg}");
        }
    }

    #[test]
    fn atom_count_is_density_times_volume() {
        let mut c = ExperimentConfig::cell_b(1e4);
        c.density = AtomDensity::Fixed(2.0e17);
        let s = LevelScheme::rb85();
        assert_eq!(c.atom_count(&s).unwrap(), 2.0e17 * 0.7215 * c.probe_volume());
    }

    #[test]
    fn absorption_coefficient_limits() {
        assert_eq!(absorption_coefficient(Complex64::new(0.0, 0.0)), 0.0);
        assert_eq!(absorption_coefficient(Complex64::new(0.3, 0.0)), 0.0);
        assert_eq!(absorption_coefficient(Complex64::new(-0.7, 0.0)), 0.0);
        for phase in [0.1, 0.7, 1.3, 2.9] {
            let chi = Complex64::from_polar(1e-3, phase);
            assert!((absorption_coefficient(chi) - chi.im / 2.0).abs() < 1e-6);
        }
    }

    #[test]
    fn transmission() {
        let c = ExperimentConfig::cell_a(1e4);
        assert_eq!(transmitted_power(0.0, &c), c.power);
        let k = std::f64::consts::LN_2 / (c.cell_length * c.wave_number);
        assert!((transmitted_power(k, &c) - c.power / 2.0).abs() < 1e-15);
    }

    #[test]
    fn larmor() {
        assert_eq!(larmor_frequency(0.5, 0.0), 0.0);
        let nu = larmor_frequency(0.5, 1.8e-3);
        // mu_B / h = 13.996 244 936 GHz/T
        assert!((nu - 0.5 * 13.996_244_936e9 * 1.8e-3).abs() < 1.0, "{nu}");
        assert!((12.5e6..12.7e6).contains(&nu));
        let ratio = larmor_frequency(2.0 / 3.0, 1.8e-3) / nu;
        assert!((ratio - 4.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn dark_widths_are_transit_limited() {
        let c = ExperimentConfig::cell_a(1e4);
        let s = LevelScheme::rb87();
        let layout = std::sync::Arc::new(crate::bloch::StateLayout::new(&s));
        let rho = DensityMatrix::equilibrium(layout);
        for i in 0..2 {
            let g = ground_noise_width(&s, &rho, &c, i).unwrap();
            assert_eq!(g, 2.0 * c.transit_rate);
            assert!((g / (2.0 * PI) - 515e3).abs() < 1e-6);
        }
        for j in 0..4 {
            let expect = 2.0 * (c.transit_rate + 2.0 / 3.0 * s.total_decay_rate(j).unwrap());
            let g = excited_noise_width(&s, &rho, &c, j).unwrap();
            assert!((g - expect).abs() <= 1e-12 * expect);
        }
        assert_eq!(faraday_noise_angle(&s, &rho, &c, LevelRef::Ground(1)).unwrap(), 0.0);
    }

    #[test]
    fn widths_grow_with_excitation() {
        let c = ExperimentConfig::cell_a(1.41e5);
        let s = LevelScheme::rb87();
        let (_, rho) = states(&c, &s, 0.0);
        let mid = &rho[rho.len() / 2];
        assert!(mid.excited_population(3) > 1e-3);
        for i in 0..2 {
            let g = ground_noise_width(&s, mid, &c, i).unwrap();
            assert!(g > 2.0 * c.transit_rate);
            for j in 0..4 {
                assert!(excited_noise_width(&s, mid, &c, j).unwrap() >= g);
            }
        }
    }

    #[test]
    fn noise_angle_scales_with_sqrt_n() {
        let mut c = ExperimentConfig::cell_a(1.8e4);
        let s = LevelScheme::rb87();
        let (_, rho) = states(&c, &s, -5e9);
        let rho = &rho[rho.len() / 2];
        c.density = AtomDensity::Fixed(1e17);
        let a = faraday_noise_angle(&s, rho, &c, LevelRef::Ground(1)).unwrap();
        c.density = AtomDensity::Fixed(4e17);
        let b = faraday_noise_angle(&s, rho, &c, LevelRef::Ground(1)).unwrap();
        assert!(a > 0.0);
        assert!((b / a - 2.0).abs() < 1e-12);
    }

    #[test]
    fn amplitude_small_angle_and_range() {
        let c = ExperimentConfig::cell_a(1e4);
        assert_eq!(noise_amplitude(0.0, 0.0, &c).unwrap(), 0.0);
        let u = noise_amplitude(1e-3, 0.0, &c).unwrap();
        assert!((u - c.gain * c.power * 1e-3).abs() / u < 1e-3);
        let mut last = u;
        for kappa in [1e-7, 1e-6, 1e-5] {
            let v = noise_amplitude(1e-3, kappa, &c).unwrap();
            assert!(v < last);
            last = v;
        }
        assert!(matches!(noise_amplitude(2.0, 0.0, &c), Err(Error::Domain(_))));
    }

    #[test]
    fn susceptibility_zero_density_and_far_tail() {
        let mut c = ExperimentConfig::cell_a(1.8e4);
        let s = LevelScheme::rb87();
        let (grid, rho) = states(&c, &s, 50e9);
        let chi = susceptibility(&rho, &s, &c, &grid).unwrap();
        assert!(chi.im.abs() < 0.1 * chi.re.abs(), "{chi}");
        c.density = AtomDensity::Fixed(0.0);
        assert_eq!(susceptibility(&rho, &s, &c, &grid).unwrap(), Complex64::new(0.0, 0.0));
        assert!(susceptibility(&rho[1..], &s, &c, &grid).is_err());
    }

    #[test]
    fn absorption_is_positive_on_resonance() {
        let c = ExperimentConfig::cell_a(1e3);
        let s = LevelScheme::rb87();
        let (grid, rho) = states(&c, &s, 0.0);
        let chi = susceptibility(&rho, &s, &c, &grid).unwrap();
        assert!(chi.im > 0.0, "{chi}");
        assert!(absorption_coefficient(chi) > 0.0);
    }

    #[test]
    fn folded_component_at_zero_doubles() {
        let axis = uniform_axis(0.0, 20e6, 20e3).unwrap();
        let at_zero = assemble_noise_spectrum(&[component(0.0, 515e3, 1.0, false)], &axis).unwrap();
        let shifted = assemble_noise_spectrum(&[component(12e6, 515e3, 1.0, false)], &axis).unwrap();
        let k = axis.iter().position(|&x| x == 12e6).unwrap();
        let ratio = at_zero.values[0] / shifted.values[k];
        assert!((ratio - 2.0).abs() < 1e-3, "{ratio}");
    }

    #[test]
    fn folding_conserves_area() {
        let axis = uniform_axis(0.0, 400e6, 2e3).unwrap();
        let comps = [
            component(0.0, 515e3, 1.0, false),
            component(2e6, 900e3, 0.5, false),
            component(12.6e6, 515e3, 0.25, true),
        ];
        let s = assemble_noise_spectrum(&comps, &axis).unwrap();
        let expect: f64 = comps.iter().map(NoiseComponent::spectral_power).sum();
        assert!((s.integral() - expect).abs() / expect < 5e-3, "{}", s.integral());
    }

    #[test]
    fn mirrored_components_coincide() {
        let axis = uniform_axis(0.0, 20e6, 20e3).unwrap();
        let a = assemble_noise_spectrum(&[component(5e6, 700e3, 1.0, false)], &axis).unwrap();
        let mut neg = component(5e6, 700e3, 1.0, false);
        neg.center_hz = -5e6;
        let b = assemble_noise_spectrum(&[neg], &axis).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - y).abs() <= 1e-15 * x.abs());
        }
    }

    #[test]
    fn difference_properties() {
        let axis = uniform_axis(0.0, 20e6, 20e3).unwrap();
        let a = assemble_noise_spectrum(&[component(12.6e6, 515e3, 1.0, false)], &axis).unwrap();
        let b = assemble_noise_spectrum(&[component(0.63e6, 515e3, 1.0, false)], &axis).unwrap();
        assert!(difference_spectrum(&a, &a).unwrap().values.iter().all(|&v| v == 0.0));
        let ab = difference_spectrum(&a, &b).unwrap();
        let ba = difference_spectrum(&b, &a).unwrap();
        assert!(ab.values.iter().zip(&ba.values).all(|(x, y)| *x == -*y));
        let short = Spectrum::new(axis[..10].to_vec(), vec![0.0; 10]).unwrap();
        assert!(matches!(difference_spectrum(&a, &short), Err(Error::Shape(_))));
    }

    #[test]
    fn bad_axes_and_components() {
        assert!(uniform_axis(1.0, 0.0, 0.1).is_err());
        assert!(assemble_noise_spectrum(&[], &[0.0, 1.0, 3.0]).is_err());
        assert!(assemble_noise_spectrum(&[], &[-1.0, 0.0, 1.0]).is_err());
        let axis = uniform_axis(0.0, 1e6, 1e3).unwrap();
        assert!(assemble_noise_spectrum(&[component(0.0, 0.0, 1.0, false)], &axis).is_err());
    }

    #[test]
    fn csv_round_trip_with_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        let axis = uniform_axis(0.0, 1e6, 1e4).unwrap();
        let s = assemble_noise_spectrum(&[component(3e5, 1e5, 1.7e-9, false)], &axis)
            .unwrap()
            .with_meta(SpectrumMeta::for_config("noise", &ExperimentConfig::cell_a(1e4), -5e9));
        s.write(&path).unwrap();
        let back = Spectrum::read(&path).unwrap();
        assert_eq!(back, s);
        assert!(fs::read_to_string(&path).unwrap().starts_with("nu_hz,value\n"));
    }
}
