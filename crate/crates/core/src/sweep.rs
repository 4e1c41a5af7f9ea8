//! Grids of steady-state solves: absorption sweeps, noise maps and
//! integrated noise power.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use dashmap::DashMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::atomic_data::{detuning_reference_hz, Isotope, LevelScheme};
use crate::bloch::{assemble_with_layout, steady_state, DensityMatrix, DriveContext, StateLayout};
use crate::doppler::VelocityGrid;
use crate::error::{Error, Result};
use crate::io;
use crate::spectra::{
    absorption_coefficient, assemble_noise_spectrum, noise_components, susceptibility, uniform_axis,
    ExperimentConfig, NoiseComponent,
};

pub const DEFAULT_EXCLUSION: f64 = 2e6;

/// Which noise components enter a map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ComponentFilter {
    #[default]
    All,
    Ground,
    Excited,
}

impl ComponentFilter {
    fn keeps(self, c: &NoiseComponent) -> bool {
        match self {
            ComponentFilter::All => true,
            ComponentFilter::Ground => !c.excited,
            ComponentFilter::Excited => c.excited,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPlan {
    /// Laser detuning from the 87Rb F=2 -> F'=3 line (Hz).
    pub detuning: Vec<f64>,
    /// Noise frequency (Hz).
    pub noise_axis: Vec<f64>,
    pub config: ExperimentConfig,
    pub filter: ComponentFilter,
    /// Isotopes whose noise enters the map; `None` means every isotope of
    /// the mixture. Absorption always uses the whole vapor.
    pub sources: Option<Vec<Isotope>>,
    /// Lower edge of the integrated-power window (Hz).
    pub exclusion: f64,
    /// Rayon worker threads; `None` uses the global pool.
    pub workers: Option<usize>,
}

impl SweepPlan {
    /// Default axes: -7..13 GHz in 50 MHz steps, 0..20 MHz in 20 kHz steps.
    pub fn new(config: ExperimentConfig) -> Self {
        Self {
            detuning: uniform_axis(-7e9, 13e9, 50e6).expect("static axis"),
            noise_axis: uniform_axis(0.0, 20e6, 20e3).expect("static axis"),
            config,
            filter: ComponentFilter::All,
            sources: None,
            exclusion: DEFAULT_EXCLUSION,
            workers: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        for (name, axis) in [("detuning", &self.detuning), ("noise", &self.noise_axis)] {
            if axis.is_empty() || !axis.windows(2).all(|w| w[1] > w[0]) || axis.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!("{name} axis must be finite and strictly increasing")));
            }
        }
        if self.noise_axis[0] < 0.0 {
            return Err(Error::Config("noise axis must be non-negative".into()));
        }
        if !(self.exclusion >= 0.0) || self.exclusion >= *self.noise_axis.last().unwrap() {
            return Err(Error::Config(format!(
                "exclusion {} Hz must lie inside the noise axis",
                self.exclusion
            )));
        }
        if self.workers == Some(0) {
            return Err(Error::Config("worker count must be >= 1".into()));
        }
        Ok(())
    }

    fn isotopes(&self) -> Vec<Isotope> {
        self.config.mixture.iter().map(|m| m.0).collect()
    }

    fn emits_noise(&self, iso: Isotope) -> bool {
        self.sources.as_ref().is_none_or(|s| s.contains(&iso))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct SolveKey {
    isotope: Isotope,
    detuning_khz: i64,
    node: u32,
    config: u64,
}

#[derive(Serialize, Deserialize)]
struct DiskEntry {
    detuning_khz: i64,
    node: u32,
    values: Vec<f64>,
}

/// Memoizing steady-state solver shared by every sweep of a run.
#[derive(Debug, Default)]
pub struct SweepEngine {
    memo: DashMap<SolveKey, Arc<[f64]>>,
    cache_dir: Option<PathBuf>,
}

/// Steady states of one isotope, indexed [detuning][velocity node].
pub struct IsotopeStates {
    pub isotope: Isotope,
    pub scheme: LevelScheme,
    pub grid: VelocityGrid,
    pub states: Vec<Vec<DensityMatrix>>,
}

impl SweepEngine {
    pub fn new() -> Self {
        Self::default()
    }

    /// Also persists steady states as JSON files in `dir`.
    pub fn with_cache_dir(dir: impl Into<PathBuf>) -> Self {
        Self {
            memo: DashMap::new(),
            cache_dir: Some(dir.into()),
        }
    }

    pub fn memo_len(&self) -> usize {
        self.memo.len()
    }

    fn disk_path(&self, iso: Isotope, digest: &str) -> Option<PathBuf> {
        self.cache_dir
            .as_ref()
            .map(|d| d.join(format!("states-{}-{}.json", iso.name(), &digest[..16])))
    }

    fn load_disk(&self, iso: Isotope, digest: &str, tag: u64) -> Result<()> {
        let Some(path) = self.disk_path(iso, digest) else {
            return Ok(());
        };
        if !path.exists() {
            return Ok(());
        }
        let entries: Vec<DiskEntry> = serde_json::from_str(&fs::read_to_string(&path)?)?;
        log::debug!("loaded {} cached states from {}", entries.len(), path.display());
        for e in entries {
            let key = SolveKey {
                isotope: iso,
                detuning_khz: e.detuning_khz,
                node: e.node,
                config: tag,
            };
            self.memo.insert(key, e.values.into());
        }
        Ok(())
    }

    fn store_disk(&self, iso: Isotope, digest: &str, tag: u64) -> Result<()> {
        let Some(path) = self.disk_path(iso, digest) else {
            return Ok(());
        };
        fs::create_dir_all(path.parent().unwrap_or(Path::new(".")))?;
        let mut entries: Vec<DiskEntry> = self
            .memo
            .iter()
            .filter(|e| e.key().isotope == iso && e.key().config == tag)
            .map(|e| DiskEntry {
                detuning_khz: e.key().detuning_khz,
                node: e.key().node,
                values: e.value().to_vec(),
            })
            .collect();
        entries.sort_by_key(|e| (e.detuning_khz, e.node));
        fs::write(&path, serde_json::to_string(&entries)?)?;
        Ok(())
    }

    /// Solves (or recalls) every (detuning, velocity) steady state of one isotope.
    pub fn solve_isotope(&self, plan: &SweepPlan, isotope: Isotope) -> Result<IsotopeStates> {
        let cfg = &plan.config;
        let scheme = cfg.scheme(isotope);
        let grid = cfg.velocity_grid(&scheme)?;
        let layout = Arc::new(StateLayout::new(&scheme));
        let digest = cfg.solve_digest();
        let tag = u64::from_str_radix(&digest[..16], 16).expect("hex digest");
        self.load_disk(isotope, &digest, tag)?;
        let reference = detuning_reference_hz();
        let n_nodes = grid.len();

        let before = self.memo.len();
        let tasks: Vec<(usize, usize)> = (0..plan.detuning.len())
            .flat_map(|d| (0..n_nodes).map(move |k| (d, k)))
            .collect();
        let flat: Vec<DensityMatrix> = tasks
            .par_iter()
            .map(|&(d, k)| {
                let delta = plan.detuning[d];
                let u = grid.nodes[k];
                let key = SolveKey {
                    isotope,
                    detuning_khz: (delta / 1e3).round() as i64,
                    node: k as u32,
                    config: tag,
                };
                if let Some(v) = self.memo.get(&key) {
                    return Ok(DensityMatrix {
                        layout: layout.clone(),
                        values: v.to_vec(),
                    });
                }
                let rho = DriveContext::at_detuning(
                    &scheme,
                    reference,
                    delta,
                    u,
                    cfg.intensity,
                    cfg.buffer_quench,
                    cfg.transit_rate,
                )
                .and_then(|ctx| assemble_with_layout(layout.clone(), &ctx))
                .and_then(|g| steady_state(&g))
                .map_err(|e| {
                    let msg = format!("{} at detuning {delta} Hz, u = {u} m/s: {e}", isotope.name());
                    match e {
                        Error::Solver(_) => Error::Solver(msg),
                        Error::Assembly(_) => Error::Assembly(msg),
                        _ => Error::Domain(msg),
                    }
                })?;
                self.memo.insert(key, rho.values.clone().into());
                Ok(rho)
            })
            .collect::<Result<_>>()?;
        if self.memo.len() > before {
            self.store_disk(isotope, &digest, tag)?;
        }

        let mut states = Vec::with_capacity(plan.detuning.len());
        let mut it = flat.into_iter();
        for _ in 0..plan.detuning.len() {
            states.push(it.by_ref().take(n_nodes).collect());
        }
        Ok(IsotopeStates {
            isotope,
            scheme,
            grid,
            states,
        })
    }

    fn solve_all(&self, plan: &SweepPlan) -> Result<Vec<IsotopeStates>> {
        plan.isotopes().into_iter().map(|iso| self.solve_isotope(plan, iso)).collect()
    }

    fn in_pool<T: Send>(&self, plan: &SweepPlan, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
        match plan.workers {
            Some(n) => rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?
                .install(f),
            None => f(),
        }
    }

    /// kappa(Delta) of the whole vapor.
    pub fn absorption_sweep(&self, plan: &SweepPlan) -> Result<Vec<f64>> {
        plan.validate()?;
        self.in_pool(plan, || {
            let solved = self.solve_all(plan)?;
            absorption_from(plan, &solved)
        })
    }

    pub fn noise_map(&self, plan: &SweepPlan) -> Result<NoiseMap> {
        plan.validate()?;
        self.in_pool(plan, || {
            let solved = self.solve_all(plan)?;
            let kappa = absorption_from(plan, &solved)?;
            let cfg = &plan.config;
            let rows: Vec<Vec<Vec<f64>>> = (0..plan.detuning.len())
                .into_par_iter()
                .map(|d| {
                    solved
                        .iter()
                        .filter(|s| plan.emits_noise(s.isotope))
                        .map(|s| {
                            let comps: Vec<NoiseComponent> =
                                noise_components(&s.states[d], &s.scheme, cfg, &s.grid, kappa[d], cfg.field)
                                    .map_err(|e| {
                                        Error::Domain(format!("detuning {} Hz: {e}", plan.detuning[d]))
                                    })?
                                    .into_iter()
                                    .filter(|c| plan.filter.keeps(c))
                                    .collect();
                            let reference: Vec<NoiseComponent> =
                                comps.iter().map(|c| c.at_field(cfg.reference_field)).collect();
                            let a = assemble_noise_spectrum(&comps, &plan.noise_axis)?;
                            let b = assemble_noise_spectrum(&reference, &plan.noise_axis)?;
                            Ok(a.values.iter().zip(&b.values).map(|(x, y)| x - y).collect())
                        })
                        .collect::<Result<Vec<Vec<f64>>>>()
                })
                .collect::<Result<_>>()?;

            let sources: Vec<Isotope> = solved
                .iter()
                .map(|s| s.isotope)
                .filter(|&iso| plan.emits_noise(iso))
                .collect();
            let mut values = vec![vec![0.0; plan.noise_axis.len()]; plan.detuning.len()];
            let mut contributions: Vec<(Isotope, Vec<Vec<f64>>)> = sources
                .iter()
                .map(|&iso| (iso, Vec::with_capacity(plan.detuning.len())))
                .collect();
            for (d, per_iso) in rows.into_iter().enumerate() {
                for (k, row) in per_iso.into_iter().enumerate() {
                    for (v, x) in values[d].iter_mut().zip(&row) {
                        *v += x;
                    }
                    contributions[k].1.push(row);
                }
            }
            let mut map = NoiseMap {
                detuning: plan.detuning.clone(),
                noise_axis: plan.noise_axis.clone(),
                values,
                absorption: kappa,
                integrated: Vec::new(),
                exclusion: plan.exclusion,
                contributions,
                config: Some(cfg.clone()),
            };
            map.integrated = integrated_noise_power(&map, plan.exclusion)?;
            if let Some(d) = map.values.iter().position(|r| r.iter().any(|v| !v.is_finite())) {
                return Err(Error::NonFinite(format!("noise map row at detuning {} Hz", map.detuning[d])));
            }
            Ok(map)
        })
    }
}

fn absorption_from(plan: &SweepPlan, solved: &[IsotopeStates]) -> Result<Vec<f64>> {
    (0..plan.detuning.len())
        .map(|d| {
            let mut chi = num_complex::Complex64::new(0.0, 0.0);
            for s in solved {
                chi += susceptibility(&s.states[d], &s.scheme, &plan.config, &s.grid)?;
            }
            Ok(absorption_coefficient(chi))
        })
        .collect()
}

/// kappa(Delta) with a fresh engine.
pub fn absorption_sweep(plan: &SweepPlan) -> Result<Vec<f64>> {
    SweepEngine::new().absorption_sweep(plan)
}

/// Difference noise map with a fresh engine.
pub fn noise_map(plan: &SweepPlan) -> Result<NoiseMap> {
    SweepEngine::new().noise_map(plan)
}

/// Per detuning, the trapezoidal integral of S over nu > `exclusion`.
pub fn integrated_noise_power(map: &NoiseMap, exclusion: f64) -> Result<Vec<f64>> {
    let top = *map.noise_axis.last().ok_or_else(|| Error::Shape("empty noise axis".into()))?;
    if !(exclusion < top) {
        return Err(Error::Config(format!("exclusion {exclusion} Hz beyond noise axis end {top} Hz")));
    }
    Ok(map
        .values
        .iter()
        .map(|row| {
            map.noise_axis
                .windows(2)
                .zip(row.windows(2))
                .filter(|(x, _)| x[0] >= exclusion)
                .map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1]))
                .sum()
        })
        .collect())
}

/// Spin-noise power density over (detuning, noise frequency).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseMap {
    pub detuning: Vec<f64>,
    pub noise_axis: Vec<f64>,
    /// values[detuning][noise] (V^2/Hz)
    pub values: Vec<Vec<f64>>,
    /// kappa per detuning
    pub absorption: Vec<f64>,
    /// Integrated noise power per detuning (V^2).
    pub integrated: Vec<f64>,
    pub exclusion: f64,
    /// Share of each noise-emitting isotope.
    pub contributions: Vec<(Isotope, Vec<Vec<f64>>)>,
    pub config: Option<ExperimentConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseMapMeta {
    pub config_digest: Option<String>,
    pub config: Option<ExperimentConfig>,
    pub detuning_points: usize,
    pub noise_points: usize,
    pub exclusion_hz: f64,
    pub isotopes: Vec<Isotope>,
}

impl NoiseMap {
    pub fn spectrum_at(&self, d: usize) -> Result<crate::spectra::Spectrum> {
        let row = self
            .values
            .get(d)
            .ok_or_else(|| Error::Index(format!("detuning index {d} of {}", self.values.len())))?;
        crate::spectra::Spectrum::new(self.noise_axis.clone(), row.clone())
    }

    /// First row: noise axis; first column: detuning.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("detuning_hz");
        for nu in &self.noise_axis {
            out.push(',');
            out.push_str(&io::fmt_f64(*nu));
        }
        out.push('\n');
        for (d, row) in self.detuning.iter().zip(&self.values) {
            out.push_str(&io::fmt_f64(*d));
            for v in row {
                out.push(',');
                out.push_str(&io::fmt_f64(*v));
            }
            out.push('\n');
        }
        out
    }

    /// Reads the matrix written by [`NoiseMap::to_csv`]; curves are left empty.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, head) = lines.next().ok_or_else(|| Error::Shape("empty noise map".into()))?;
        let noise_axis = head
            .split(',')
            .skip(1)
            .map(|f| io::parse_f64(f, 1))
            .collect::<Result<Vec<_>>>()?;
        let (mut detuning, mut values) = (Vec::new(), Vec::new());
        for (n, line) in lines {
            let mut fields = line.split(',');
            detuning.push(io::parse_f64(fields.next().unwrap_or(""), n + 1)?);
            let row = fields.map(|f| io::parse_f64(f, n + 1)).collect::<Result<Vec<_>>>()?;
            if row.len() != noise_axis.len() {
                return Err(Error::Shape(format!(
                    "line {}: {} values for {} noise frequencies",
                    n + 1,
                    row.len(),
                    noise_axis.len()
                )));
            }
            values.push(row);
        }
        Ok(Self {
            detuning,
            noise_axis,
            values,
            absorption: Vec::new(),
            integrated: Vec::new(),
            exclusion: 0.0,
            contributions: Vec::new(),
            config: None,
        })
    }

    pub fn meta(&self) -> NoiseMapMeta {
        NoiseMapMeta {
            config_digest: self.config.as_ref().map(ExperimentConfig::digest),
            config: self.config.clone(),
            detuning_points: self.detuning.len(),
            noise_points: self.noise_axis.len(),
            exclusion_hz: self.exclusion,
            isotopes: self.contributions.iter().map(|c| c.0).collect(),
        }
    }

    /// Writes `<stem>.csv`, `<stem>.json`, `<stem>_absorption.csv` and
    /// `<stem>_integrated.csv`; returns the paths written.
    pub fn write(&self, path: &Path) -> Result<Vec<PathBuf>> {
        fs::write(path, self.to_csv())?;
        let side = io::sidecar_path(path);
        io::write_json(&side, &self.meta())?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("noisemap");
        let abs = path.with_file_name(format!("{stem}_absorption.csv"));
        fs::write(&abs, io::columns_to_csv(("detuning_hz", "kappa"), &self.detuning, &self.absorption))?;
        let int = path.with_file_name(format!("{stem}_integrated.csv"));
        fs::write(
            &int,
            io::columns_to_csv(("detuning_hz", "power_v2"), &self.detuning, &self.integrated),
        )?;
        Ok(vec![path.to_path_buf(), side, abs, int])
    }
}
