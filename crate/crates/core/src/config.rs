//! Run configuration: flat key/value settings with mandatory units.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::atomic_data::Isotope;
use crate::doppler::GridSpec;
use crate::error::{Error, Result};
use crate::spectra::{uniform_axis, AtomDensity, ExperimentConfig};
use crate::sweep::{ComponentFilter, SweepPlan, DEFAULT_EXCLUSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub enum Preset {
    CellA,
    CellB,
    Custom,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "cellA" | "cella" | "A" => Ok(Preset::CellA),
            "cellB" | "cellb" | "B" => Ok(Preset::CellB),
            "custom" => Ok(Preset::Custom),
            other => Err(Error::Config(format!("unknown preset `{other}` (cellA, cellB, custom)"))),
        }
    }
}

/// Every key a config file or the command line may set.
pub const KEYS: &[&str] = &[
    "preset",
    "intensity",
    "power",
    "beam_diameter",
    "cell_length",
    "temperature",
    "field",
    "reference_field",
    "density",
    "mixture",
    "buffer_quench",
    "transit_rate",
    "gain",
    "detuning_axis",
    "noise_axis",
    "detuning",
    "exclusion",
    "components",
    "nodes",
    "span",
    "mf_weighting",
    "rate_calibration",
    "workers",
    "output",
    "cache_dir",
];

/// Keys a cell preset fixes.
const PRESET_KEYS: &[&str] = &["mixture", "buffer_quench", "transit_rate"];

/// Keys a custom configuration must provide.
const CUSTOM_REQUIRED: &[&str] = &[
    "intensity",
    "beam_diameter",
    "cell_length",
    "temperature",
    "field",
    "mixture",
    "buffer_quench",
    "transit_rate",
    "gain",
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AxisSpec {
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

impl AxisSpec {
    pub fn points(&self) -> Result<Vec<f64>> {
        uniform_axis(self.start, self.stop, self.step)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub preset: Preset,
    pub experiment: ExperimentConfig,
    pub detuning_axis: AxisSpec,
    pub noise_axis: AxisSpec,
    /// Single detuning for one spectrum (Hz).
    pub detuning: Option<f64>,
    pub exclusion: f64,
    pub components: ComponentFilter,
    pub output: PathBuf,
    pub workers: Option<usize>,
    pub cache_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn plan(&self) -> Result<SweepPlan> {
        let mut plan = SweepPlan::new(self.experiment.clone());
        plan.detuning = self.detuning_axis.points()?;
        plan.noise_axis = self.noise_axis.points()?;
        plan.exclusion = self.exclusion;
        plan.filter = self.components;
        plan.workers = self.workers;
        plan.validate()?;
        Ok(plan)
    }

    /// Builds a config from raw key/value settings; later layers win.
    pub fn resolve(settings: &BTreeMap<String, String>) -> Result<Self> {
        let unknown: Vec<&str> = settings
            .keys()
            .map(String::as_str)
            .filter(|k| !KEYS.contains(k))
            .collect();
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown key(s): {}", unknown.join(", "))));
        }
        let get = |k: &str| settings.get(k).map(String::as_str);
        let preset = match get("preset") {
            Some(p) => p.parse()?,
            None => Preset::Custom,
        };

        let mut problems = Vec::new();
        match preset {
            Preset::Custom => {
                let missing: Vec<&str> = CUSTOM_REQUIRED
                    .iter()
                    .copied()
                    .filter(|k| !settings.contains_key(*k))
                    .collect();
                if !missing.is_empty() {
                    problems.push(format!("custom configuration is missing: {}", missing.join(", ")));
                }
            }
            _ => {
                let clash: Vec<&str> = PRESET_KEYS
                    .iter()
                    .copied()
                    .filter(|k| settings.contains_key(*k))
                    .collect();
                if !clash.is_empty() {
                    problems.push(format!(
                        "preset {preset:?} fixes {}; use preset custom to set them",
                        clash.join(", ")
                    ));
                }
                if !settings.contains_key("intensity") {
                    problems.push("missing: intensity".into());
                }
            }
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems.join("; ")));
        }

        let intensity = parse_quantity(get("intensity").unwrap_or("0W/m2"), &INTENSITY, "intensity")?;
        let mut exp = match preset {
            Preset::CellA => ExperimentConfig::cell_a(intensity),
            Preset::CellB => ExperimentConfig::cell_b(intensity),
            Preset::Custom => ExperimentConfig::cell_a(intensity),
        };
        if preset != Preset::Custom {
            log::info!(
                "preset {preset:?}: mixture {:?}, buffer quench {:.6e} 1/s, transit rate {:.6e} 1/s",
                exp.mixture,
                exp.buffer_quench,
                exp.transit_rate
            );
        }

        let mut errors = Vec::new();
        let mut take = |key: &str, f: &mut dyn FnMut(&str) -> Result<()>| {
            if let Some(v) = get(key) {
                if let Err(e) = f(v) {
                    errors.push(format!("{key}: {}", strip(&e)));
                }
            }
        };
        take("beam_diameter", &mut |v| {
            exp.beam_radius = parse_quantity(v, &LENGTH, "beam_diameter")? / 2.0;
            Ok(())
        });
        exp = exp.clone().with_intensity(intensity);
        take("power", &mut |v| {
            exp.power = parse_quantity(v, &POWER, "power")?;
            Ok(())
        });
        take("cell_length", &mut |v| {
            exp.cell_length = parse_quantity(v, &LENGTH, "cell_length")?;
            Ok(())
        });
        take("temperature", &mut |v| {
            exp.temperature = parse_quantity(v, &TEMPERATURE, "temperature")?;
            Ok(())
        });
        take("field", &mut |v| {
            exp.field = parse_quantity(v, &FIELD, "field")?;
            Ok(())
        });
        take("reference_field", &mut |v| {
            exp.reference_field = parse_quantity(v, &FIELD, "reference_field")?;
            Ok(())
        });
        take("density", &mut |v| {
            exp.density = if v.trim() == "auto" {
                AtomDensity::Auto
            } else {
                AtomDensity::Fixed(parse_quantity(v, &DENSITY, "density")?)
            };
            Ok(())
        });
        take("mixture", &mut |v| {
            exp.mixture = parse_mixture(v)?;
            Ok(())
        });
        take("buffer_quench", &mut |v| {
            exp.buffer_quench = parse_rate(v)?;
            Ok(())
        });
        take("transit_rate", &mut |v| {
            exp.transit_rate = parse_rate(v)?;
            Ok(())
        });
        take("gain", &mut |v| {
            exp.gain = parse_quantity(v, &GAIN, "gain")?;
            Ok(())
        });
        let mut grid = GridSpec::default();
        take("nodes", &mut |v| {
            grid.nodes = parse_count(v)?;
            Ok(())
        });
        take("span", &mut |v| {
            grid.span = parse_plain(v)?;
            Ok(())
        });
        exp.grid = grid;
        take("mf_weighting", &mut |v| {
            exp.mf_weighting = parse_bool(v)?;
            Ok(())
        });
        take("rate_calibration", &mut |v| {
            exp.rate_calibration = parse_plain(v)?;
            Ok(())
        });

        let mut detuning_axis = AxisSpec {
            start: -7e9,
            stop: 13e9,
            step: 50e6,
        };
        let mut noise_axis = AxisSpec {
            start: 0.0,
            stop: 20e6,
            step: 20e3,
        };
        let mut detuning = None;
        let mut exclusion = DEFAULT_EXCLUSION;
        let mut components = ComponentFilter::All;
        let mut workers = None;
        take("detuning_axis", &mut |v| {
            detuning_axis = parse_axis(v)?;
            Ok(())
        });
        take("noise_axis", &mut |v| {
            noise_axis = parse_axis(v)?;
            Ok(())
        });
        take("detuning", &mut |v| {
            detuning = Some(parse_quantity(v, &FREQUENCY, "detuning")?);
            Ok(())
        });
        take("exclusion", &mut |v| {
            exclusion = parse_quantity(v, &FREQUENCY, "exclusion")?;
            Ok(())
        });
        take("components", &mut |v| {
            components = match v.trim() {
                "all" => ComponentFilter::All,
                "ground" => ComponentFilter::Ground,
                "excited" => ComponentFilter::Excited,
                other => return Err(Error::Config(format!("`{other}` is not all, ground or excited"))),
            };
            Ok(())
        });
        take("workers", &mut |v| {
            workers = Some(parse_count(v)?);
            Ok(())
        });
        if !errors.is_empty() {
            return Err(Error::Config(errors.join("; ")));
        }
        exp.validate()?;
        for (name, axis) in [("detuning_axis", &detuning_axis), ("noise_axis", &noise_axis)] {
            axis.points()
                .map_err(|e| Error::Config(format!("{name}: {}", strip(&e))))?;
        }

        Ok(Self {
            preset,
            experiment: exp,
            detuning_axis,
            noise_axis,
            detuning,
            exclusion,
            components,
            output: get("output").map_or_else(|| PathBuf::from("."), PathBuf::from),
            workers,
            cache_dir: get("cache_dir").map(PathBuf::from),
        })
    }
}

/// Reads a flat TOML table into raw settings.
pub fn read_settings(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)?;
    settings_from_toml(&text)
}

pub fn settings_from_toml(text: &str) -> Result<BTreeMap<String, String>> {
    let table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::Config(format!("config file: {}", e.message())))?;
    let mut out = BTreeMap::new();
    let mut nested = Vec::new();
    for (k, v) in table {
        let s = match v {
            toml::Value::String(s) => s,
            toml::Value::Integer(i) => i.to_string(),
            toml::Value::Float(f) => f.to_string(),
            toml::Value::Boolean(b) => b.to_string(),
            _ => {
                nested.push(k);
                continue;
            }
        };
        out.insert(k, s);
    }
    if !nested.is_empty() {
        return Err(Error::Config(format!(
            "config must be flat; nested value(s): {}",
            nested.join(", ")
        )));
    }
    Ok(out)
}

fn strip(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

type Units = [(&'static str, i32)];

const INTENSITY: [(&str, i32); 4] = [("W/cm2", 4), ("mW/cm2", 1), ("W/m2", 0), ("kW/m2", 3)];
const POWER: [(&str, i32); 3] = [("W", 0), ("mW", -3), ("uW", -6)];
const LENGTH: [(&str, i32); 4] = [("m", 0), ("cm", -2), ("mm", -3), ("um", -6)];
const TEMPERATURE: [(&str, i32); 1] = [("K", 0)];
const FIELD: [(&str, i32); 4] = [("T", 0), ("mT", -3), ("uT", -6), ("G", -4)];
const FREQUENCY: [(&str, i32); 4] = [("Hz", 0), ("kHz", 3), ("MHz", 6), ("GHz", 9)];
const DENSITY: [(&str, i32); 2] = [("/m3", 0), ("/cm3", 6)];
const GAIN: [(&str, i32); 1] = [("V/W", 0)];

/// Splits `-1.8e-3mT` into its number and unit; the unit is mandatory.
pub fn parse_quantity(text: &str, units: &Units, what: &str) -> Result<f64> {
    let t = text.trim();
    let split = t
        .char_indices()
        .find(|&(k, c)| {
            !(c.is_ascii_digit()
                || c == '.'
                || ((c == '-' || c == '+') && (k == 0 || matches!(t.as_bytes()[k - 1], b'e' | b'E')))
                || ((c == 'e' || c == 'E')
                    && t[k + 1..].starts_with(|n: char| n.is_ascii_digit() || n == '-' || n == '+')))
        })
        .map_or(t.len(), |(k, _)| k);
    let (num, unit) = (&t[..split], t[split..].trim());
    let allowed: Vec<&str> = units.iter().map(|u| u.0).collect();
    if unit.is_empty() {
        return Err(Error::Config(format!(
            "{what} `{t}` needs a unit ({})",
            allowed.join(", ")
        )));
    }
    let scale = units
        .iter()
        .find(|u| u.0 == unit)
        .map(|u| u.1)
        .ok_or_else(|| Error::Config(format!("{what}: unknown unit `{unit}` ({})", allowed.join(", "))))?;
    // shift the decimal exponent so `1.8mT` rounds exactly like `1.8e-3`
    let bad = || Error::Config(format!("{what}: `{num}` is not a number"));
    let (mantissa, exponent) = match num.find(['e', 'E']) {
        Some(k) => (&num[..k], num[k + 1..].parse::<i32>().map_err(|_| bad())?),
        None => (num, 0),
    };
    mantissa.parse::<f64>().map_err(|_| bad())?;
    let value: f64 = format!("{mantissa}e{}", exponent + scale).parse().map_err(|_| bad())?;
    if !value.is_finite() {
        return Err(Error::Config(format!("{what}: `{t}` is not finite")));
    }
    Ok(value)
}

/// A rate in 1/s: `2pi*18MHz`, `pi*515kHz`, `3.2*1MHz` or `1.6e6/s`.
pub fn parse_rate(text: &str) -> Result<f64> {
    let t = text.trim();
    if let Some(num) = t.strip_suffix("/s") {
        return num
            .trim()
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| Error::Config(format!("rate `{t}`: `{num}` is not a number")));
    }
    let Some((factor, freq)) = t.split_once('*') else {
        return Err(Error::Config(format!(
            "rate `{t}` must be written as 2pi*<frequency>, pi*<frequency> or <value>/s"
        )));
    };
    let factor = match factor.trim() {
        "2pi" => 2.0 * PI,
        "pi" => PI,
        other => other
            .parse::<f64>()
            .map_err(|_| Error::Config(format!("rate `{t}`: unknown factor `{other}`")))?,
    };
    Ok(factor * parse_quantity(freq, &FREQUENCY, "rate")?)
}

/// `start:stop:step` with units on every part.
pub fn parse_axis(text: &str) -> Result<AxisSpec> {
    let parts: Vec<&str> = text.split(':').collect();
    if parts.len() != 3 {
        return Err(Error::Config(format!("axis `{text}` must be start:stop:step")));
    }
    let f = |s: &str| parse_quantity(s, &FREQUENCY, "axis");
    let axis = AxisSpec {
        start: f(parts[0])?,
        stop: f(parts[1])?,
        step: f(parts[2])?,
    };
    axis.points()?;
    Ok(axis)
}

/// `87Rb:0.2785,85Rb:0.7215`
pub fn parse_mixture(text: &str) -> Result<Vec<(Isotope, f64)>> {
    text.split(',')
        .map(|item| {
            let (iso, frac) = item
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("mixture item `{item}` must be isotope:fraction")))?;
            Ok((iso.parse()?, parse_plain(frac)?))
        })
        .collect()
}

/// A frequency with or without unit (bare numbers are Hz), as used for fit windows.
pub fn parse_frequency_lenient(text: &str) -> Result<f64> {
    match text.trim().parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => parse_quantity(text, &FREQUENCY, "frequency"),
    }
}

fn parse_plain(text: &str) -> Result<f64> {
    text.trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::Config(format!("`{}` is not a number", text.trim())))
}

fn parse_count(text: &str) -> Result<usize> {
    text.trim()
        .parse()
        .map_err(|_| Error::Config(format!("`{}` is not a whole number", text.trim())))
}

fn parse_bool(text: &str) -> Result<bool> {
    match text.trim() {
        "true" | "on" | "yes" => Ok(true),
        "false" | "off" | "no" => Ok(false),
        other => Err(Error::Config(format!("`{other}` is not true or false"))),
    }
}
