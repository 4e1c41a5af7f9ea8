//! Command-line front end.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::atomic_data::{detuning_reference_hz, Isotope};
use crate::bloch::{assemble_generator, DriveContext};
use crate::config::{parse_frequency_lenient, read_settings, RunConfig};
use crate::error::{Error, Result};
use crate::fit::fit_lorentzian;
use crate::io::{columns_to_csv, fmt_f64, sidecar_path, write_json};
use crate::spectra::{transmitted_power, Spectrum, SpectrumMeta};
use crate::sweep::SweepEngine;

#[derive(Debug, Parser)]
#[command(name = "spin-noise", version, about = "Rb D2 absorption and spin-noise spectra")]
pub struct Cli {
    #[command(flatten)]
    pub settings: SettingArgs,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Absorption coefficient over the detuning axis.
    Absorption,
    /// Difference noise spectra over the detuning axis.
    Noisemap,
    /// One difference noise spectrum at --detuning.
    Spectrum,
    /// Lorentzian fit of a spectrum CSV.
    Fit {
        /// Spectrum CSV (nu_hz,value).
        #[arg(long)]
        input: PathBuf,
        /// Fit window lo:hi, Hz unless a unit is given.
        #[arg(long, allow_hyphen_values = true)]
        window: String,
    },
    /// Level scheme tables, and the resolved configuration if one is given.
    DumpScheme {
        /// 87Rb, 85Rb or all.
        #[arg(long, default_value = "all")]
        isotope: String,
    },
}

macro_rules! setting_args {
    ($($field:ident => $help:literal),* $(,)?) => {
        #[derive(Debug, Default, Args)]
        pub struct SettingArgs {
            /// Flat TOML configuration file; flags override it.
            #[arg(long, global = true)]
            pub config: Option<PathBuf>,
            /// Extra key=value settings, applied last.
            #[arg(long = "set", global = true, value_name = "KEY=VALUE", allow_hyphen_values = true)]
            pub set: Vec<String>,
            /// Write the generator at this detuning (u = 0) for each isotope.
            #[arg(long, global = true, value_name = "DETUNING", allow_hyphen_values = true)]
            pub dump_generator: Option<String>,
            /// Output directory.
            #[arg(long, global = true, env = "SPIN_NOISE_OUT")]
            pub output: Option<PathBuf>,
            $(
                #[doc = $help]
                #[arg(long, global = true, allow_hyphen_values = true)]
                pub $field: Option<String>,
            )*
        }

        impl SettingArgs {
            fn flags(&self) -> Vec<(&'static str, &Option<String>)> {
                vec![$((stringify!($field), &self.$field)),*]
            }
        }
    };
}

setting_args! {
    preset => "cellA, cellB or custom",
    intensity => "e.g. 1.8W/cm2",
    power => "e.g. 0.8mW (overrides the value implied by intensity)",
    beam_diameter => "e.g. 240um",
    cell_length => "e.g. 50mm",
    temperature => "e.g. 350K",
    field => "e.g. 1.8mT",
    reference_field => "e.g. 45uT",
    density => "auto or e.g. 1.2e18/m3",
    mixture => "e.g. 87Rb:0.2785,85Rb:0.7215",
    buffer_quench => "e.g. 2pi*18MHz",
    transit_rate => "e.g. pi*515kHz",
    gain => "e.g. 20V/W",
    detuning_axis => "e.g. -7GHz:13GHz:50MHz",
    noise_axis => "e.g. 0MHz:20MHz:20kHz",
    detuning => "e.g. -5GHz",
    exclusion => "e.g. 2MHz",
    components => "all, ground or excited",
    nodes => "velocity nodes (odd)",
    rate_calibration => "multiplier on optical pumping rates",
    workers => "worker threads",
    cache_dir => "directory for cached steady states",
}

impl SettingArgs {
    /// Config file, then flags, then --set pairs.
    pub fn collect(&self) -> Result<BTreeMap<String, String>> {
        let mut out = match &self.config {
            Some(path) => read_settings(path)?,
            None => BTreeMap::new(),
        };
        for (key, value) in self.flags() {
            if let Some(v) = value {
                out.insert(key.to_string(), v.clone());
            }
        }
        for pair in &self.set {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set `{pair}` must be key=value")))?;
            out.insert(k.trim().to_string(), v.trim().to_string());
        }
        if let Some(dir) = &self.output {
            out.insert("output".into(), dir.display().to_string());
        }
        Ok(out)
    }

    fn has_any(&self) -> bool {
        self.config.is_some() || !self.set.is_empty() || self.flags().iter().any(|(_, v)| v.is_some())
    }
}

#[derive(Serialize)]
struct Sidecar<'a> {
    kind: &'a str,
    config_digest: String,
    run: &'a RunConfig,
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(lines) => {
            for line in lines {
                println!("{line}");
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Runs a parsed command; returns one summary line per file written.
pub fn execute(cli: &Cli) -> Result<Vec<String>> {
    let mut lines = Vec::new();
    let needs_config = !matches!(cli.command, Command::Fit { .. } | Command::DumpScheme { .. });
    let run = if needs_config || cli.settings.has_any() && !matches!(cli.command, Command::Fit { .. }) {
        Some(RunConfig::resolve(&cli.settings.collect()?)?)
    } else {
        None
    };
    let out_dir = match &run {
        Some(r) => r.output.clone(),
        None => cli.settings.output.clone().unwrap_or_else(|| PathBuf::from(".")),
    };
    fs::create_dir_all(&out_dir)?;

    if let (Some(d), Some(run)) = (&cli.settings.dump_generator, &run) {
        let detuning = parse_frequency_lenient(d)?;
        for (iso, _) in &run.experiment.mixture {
            lines.push(dump_generator(run, *iso, detuning, &out_dir)?);
        }
    }

    match &cli.command {
        Command::Absorption => {
            let run = run.as_ref().expect("resolved above");
            lines.extend(absorption(run, &out_dir)?);
        }
        Command::Noisemap => {
            let run = run.as_ref().expect("resolved above");
            let plan = run.plan()?;
            let map = engine(run).noise_map(&plan)?;
            let path = out_dir.join("noisemap.csv");
            let written = map.write(&path)?;
            let peak = map.integrated.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            lines.push(format!(
                "{}: {} detunings x {} noise frequencies",
                written[0].display(),
                map.detuning.len(),
                map.noise_axis.len()
            ));
            lines.push(format!("{}: metadata, digest {}", written[1].display(), run.experiment.digest()));
            lines.push(format!("{}: kappa per detuning", written[2].display()));
            lines.push(format!("{}: integrated power, max {peak:.4e} V^2", written[3].display()));
        }
        Command::Spectrum => {
            let run = run.as_ref().expect("resolved above");
            let detuning = run
                .detuning
                .ok_or_else(|| Error::Config("spectrum needs --detuning".into()))?;
            let mut plan = run.plan()?;
            plan.detuning = vec![detuning];
            let map = engine(run).noise_map(&plan)?;
            let spectrum = map
                .spectrum_at(0)?
                .with_meta(SpectrumMeta::for_config("difference", &run.experiment, detuning));
            let path = out_dir.join("spectrum.csv");
            spectrum.write(&path)?;
            lines.push(format!(
                "{}: {} points at detuning {} Hz, integrated {:.4e} V^2",
                path.display(),
                spectrum.axis.len(),
                fmt_f64(detuning),
                map.integrated[0]
            ));
            lines.push(format!("{}: metadata", sidecar_path(&path).display()));
        }
        Command::Fit { input, window } => {
            let (lo, hi) = window
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("window `{window}` must be lo:hi")))?;
            let window = (parse_frequency_lenient(lo)?, parse_frequency_lenient(hi)?);
            let spectrum = Spectrum::read(input)?;
            let result = fit_lorentzian(&spectrum, window)?;
            let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("spectrum");
            let path = out_dir.join(format!("{stem}_fit.json"));
            write_json(&path, &result)?;
            lines.push(format!(
                "{}: center {:.6e} Hz, fwhm {:.6e} Hz, tau_s {:.6e} s",
                path.display(),
                result.center_hz,
                result.fwhm_hz,
                result.dephasing_time
            ));
        }
        Command::DumpScheme { isotope } => {
            let isotopes: Vec<Isotope> = match isotope.trim() {
                "all" => Isotope::ALL.to_vec(),
                one => vec![one.parse()?],
            };
            for iso in isotopes {
                let scheme = iso.scheme();
                let path = out_dir.join(format!("scheme_{}.json", iso.name()));
                write_json(&path, &scheme)?;
                lines.push(format!(
                    "{}: {} ground and {} excited levels",
                    path.display(),
                    scheme.n_ground(),
                    scheme.n_excited()
                ));
            }
            if let Some(run) = &run {
                let path = out_dir.join("config.json");
                write_json(&path, run)?;
                lines.push(format!("{}: resolved {:?} configuration", path.display(), run.preset));
            }
        }
    }
    Ok(lines)
}

fn engine(run: &RunConfig) -> SweepEngine {
    match &run.cache_dir {
        Some(dir) => SweepEngine::with_cache_dir(dir),
        None => SweepEngine::new(),
    }
}

fn absorption(run: &RunConfig, out_dir: &Path) -> Result<Vec<String>> {
    let plan = run.plan()?;
    let kappa = engine(run).absorption_sweep(&plan)?;
    let power: Vec<f64> = kappa.iter().map(|k| transmitted_power(*k, &run.experiment)).collect();
    let path = out_dir.join("absorption.csv");
    fs::write(&path, columns_to_csv(("detuning_hz", "kappa"), &plan.detuning, &kappa))?;
    let tpath = out_dir.join("transmission.csv");
    fs::write(&tpath, columns_to_csv(("detuning_hz", "power_w"), &plan.detuning, &power))?;
    let side = sidecar_path(&path);
    write_json(
        &side,
        &Sidecar {
            kind: "absorption",
            config_digest: run.experiment.digest(),
            run,
        },
    )?;
    let (kmax, at) = kappa
        .iter()
        .zip(&plan.detuning)
        .fold((f64::NEG_INFINITY, 0.0), |m, (k, d)| if *k > m.0 { (*k, *d) } else { m });
    Ok(vec![
        format!(
            "{}: {} detunings, kappa max {kmax:.4e} at {at:.4e} Hz",
            path.display(),
            kappa.len()
        ),
        format!("{}: transmitted power", tpath.display()),
        format!("{}: metadata", side.display()),
    ])
}

fn dump_generator(run: &RunConfig, iso: Isotope, detuning: f64, out_dir: &Path) -> Result<String> {
    let scheme = run.experiment.scheme(iso);
    let ctx = DriveContext::at_detuning(
        &scheme,
        detuning_reference_hz(),
        detuning,
        0.0,
        run.experiment.intensity,
        run.experiment.buffer_quench,
        run.experiment.transit_rate,
    )?;
    let gen = assemble_generator(&scheme, &ctx)?;
    let path = out_dir.join(format!("generator_{}.csv", iso.name()));
    fs::write(&path, gen.to_csv())?;
    Ok(format!("{}: {}x{} generator at {detuning:.4e} Hz", path.display(), gen.dim(), gen.dim()))
}
