//! Rubidium D2 level structure, spontaneous rates and Rabi frequencies.
//!
//! Levels are hyperfine manifolds (not resolved in `m_F`). Transition
//! frequencies are derived from the fine-structure line center and the
//! hyperfine offsets of each level, so the table is self-consistent by
//! construction.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::constants::CODATA;
use crate::error::{Error, Result};

/// Fine-structure oscillator strength of the D2 line.
pub const F_JJ: f64 = 0.6958;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Manifold {
    /// 5S_1/2
    Ground,
    /// 5P_3/2
    Excited,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Isotope {
    Rb85,
    Rb87,
}

impl Isotope {
    pub fn name(self) -> &'static str {
        match self {
            Isotope::Rb85 => "85Rb",
            Isotope::Rb87 => "87Rb",
        }
    }

    pub const ALL: [Isotope; 2] = [Isotope::Rb87, Isotope::Rb85];

    pub fn scheme(self) -> LevelScheme {
        match self {
            Isotope::Rb85 => LevelScheme::rb85(),
            Isotope::Rb87 => LevelScheme::rb87(),
        }
    }
}

impl std::str::FromStr for Isotope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "85Rb" | "Rb85" | "rb85" | "85" => Ok(Isotope::Rb85),
            "87Rb" | "Rb87" | "rb87" | "87" => Ok(Isotope::Rb87),
            other => Err(Error::Config(format!("unknown isotope `{other}`"))),
        }
    }
}

/// Frequency (Hz) of the 87Rb F=2 -> F'=3 line, the zero of every detuning axis.
pub fn detuning_reference_hz() -> f64 {
    let s = LevelScheme::rb87();
    s.transition_hz[1][3]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HyperfineLevel {
    pub manifold: Manifold,
    /// Total angular momentum F.
    pub f: u32,
    /// 2F + 1
    pub degeneracy: u32,
    pub g_f: f64,
    /// Hyperfine shift from the fine-structure centroid (Hz).
    pub offset_hz: f64,
}

impl HyperfineLevel {
    pub fn new(manifold: Manifold, f: u32, g_f: f64, offset_hz: f64) -> Self {
        Self {
            manifold,
            f,
            degeneracy: 2 * f + 1,
            g_f,
            offset_hz,
        }
    }

    /// Mean square magnetic quantum number for uniform sublevel occupation.
    pub fn mean_square_mf(&self) -> f64 {
        let f = self.f as f64;
        f * (f + 1.0) / 3.0
    }
}

/// Reference to a level of a scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum LevelRef {
    Ground(usize),
    Excited(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelScheme {
    pub isotope: Option<Isotope>,
    pub name: String,
    pub abundance: f64,
    /// Atomic mass (kg).
    pub mass: f64,
    /// Fine-structure (centroid) transition frequency (Hz).
    pub line_center_hz: f64,
    pub ground: Vec<HyperfineLevel>,
    pub excited: Vec<HyperfineLevel>,
    /// Transition frequencies nu_ij (Hz), ground-major.
    pub transition_hz: Vec<Vec<f64>>,
    /// Relative hyperfine line strengths f_ij, ground-major.
    pub branching: Vec<Vec<f64>>,
    pub f_jj: f64,
    /// Multiplier applied to every spontaneous rate (1.0 = literal formula).
    pub rate_calibration: f64,
}

impl LevelScheme {
    /// Builds a scheme and derives the transition frequency table.
    pub fn new(
        name: impl Into<String>,
        isotope: Option<Isotope>,
        abundance: f64,
        mass: f64,
        line_center_hz: f64,
        ground: Vec<HyperfineLevel>,
        excited: Vec<HyperfineLevel>,
        branching: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if branching.len() != ground.len() || branching.iter().any(|r| r.len() != excited.len()) {
            return Err(Error::Shape(format!(
                "branching table must be {}x{}",
                ground.len(),
                excited.len()
            )));
        }
        if branching.iter().flatten().any(|&f| !(f >= 0.0) || !f.is_finite()) {
            return Err(Error::Domain("branching entries must be finite and >= 0".into()));
        }
        let transition_hz = ground
            .iter()
            .map(|g| {
                excited
                    .iter()
                    .map(|e| line_center_hz + e.offset_hz - g.offset_hz)
                    .collect()
            })
            .collect();
        Ok(Self {
            isotope,
            name: name.into(),
            abundance,
            mass,
            line_center_hz,
            ground,
            excited,
            transition_hz,
            branching,
            f_jj: F_JJ,
            rate_calibration: 1.0,
        })
    }

    /// 87Rb D2 line. Hyperfine constants from D. A. Steck, "Rubidium 87 D
    /// Line Data" (rev. 2.2).
    pub fn rb87() -> Self {
        use Manifold::*;
        let ground = vec![
            HyperfineLevel::new(Ground, 1, -0.5, -4.271_676_631_815_181e9),
            HyperfineLevel::new(Ground, 2, 0.5, 2.563_005_979_089_109e9),
        ];
        let excited = vec![
            HyperfineLevel::new(Excited, 0, 0.0, -302.0738e6),
            HyperfineLevel::new(Excited, 1, 2.0 / 3.0, -229.8518e6),
            HyperfineLevel::new(Excited, 2, 2.0 / 3.0, -72.9113e6),
            HyperfineLevel::new(Excited, 3, 2.0 / 3.0, 193.7408e6),
        ];
        let branching = vec![
            vec![0.5, 1.25, 1.25, 0.0],
            vec![0.0, 0.25, 1.25, 3.5],
        ];
        Self::new(
            "87Rb",
            Some(Isotope::Rb87),
            0.2785,
            1.443_160_648e-25,
            384.230_484_468_5e12,
            ground,
            excited,
            branching,
        )
        .expect("static 87Rb table")
    }

    /// 85Rb D2 line. Hyperfine constants from D. A. Steck, "Rubidium 85 D
    /// Line Data" (rev. 2.2). Line strengths are (2F+1)(2F'+1)(2J+1){J J' 1;
    /// F' F I}^2 with I = 5/2, the same normalization that yields the 87Rb
    /// table.
    pub fn rb85() -> Self {
        use Manifold::*;
        let ground = vec![
            HyperfineLevel::new(Ground, 2, -1.0 / 3.0, -1.770_843_922_8e9),
            HyperfineLevel::new(Ground, 3, 1.0 / 3.0, 1.264_888_516_3e9),
        ];
        let excited = vec![
            HyperfineLevel::new(Excited, 1, -1.0, -113.208e6),
            HyperfineLevel::new(Excited, 2, 1.0 / 9.0, -83.835e6),
            HyperfineLevel::new(Excited, 3, 7.0 / 18.0, -20.435e6),
            HyperfineLevel::new(Excited, 4, 0.5, 100.205e6),
        ];
        let branching = vec![
            vec![1.5, 35.0 / 18.0, 14.0 / 9.0, 0.0],
            vec![0.0, 5.0 / 9.0, 35.0 / 18.0, 4.5],
        ];
        Self::new(
            "85Rb",
            Some(Isotope::Rb85),
            0.7215,
            1.409_993_199e-25,
            384.230_406_373e12,
            ground,
            excited,
            branching,
        )
        .expect("static 85Rb table")
    }

    pub fn with_rate_calibration(mut self, factor: f64) -> Self {
        self.rate_calibration = factor;
        self
    }

    pub fn n_ground(&self) -> usize {
        self.ground.len()
    }

    pub fn n_excited(&self) -> usize {
        self.excited.len()
    }

    fn check(&self, i: usize, j: usize) -> Result<()> {
        if i >= self.ground.len() || j >= self.excited.len() {
            return Err(Error::Index(format!(
                "level pair ({i}, {j}) outside {}x{} scheme {}",
                self.ground.len(),
                self.excited.len(),
                self.name
            )));
        }
        Ok(())
    }

    pub fn level(&self, level: LevelRef) -> Result<&HyperfineLevel> {
        match level {
            LevelRef::Ground(i) => self.ground.get(i),
            LevelRef::Excited(j) => self.excited.get(j),
        }
        .ok_or_else(|| Error::Index(format!("{level:?} not in scheme {}", self.name)))
    }

    /// Index of the ground level with total angular momentum `f`.
    pub fn ground_index(&self, f: u32) -> Result<usize> {
        self.ground
            .iter()
            .position(|l| l.f == f)
            .ok_or_else(|| Error::Index(format!("no ground F={f} in {}", self.name)))
    }

    pub fn excited_index(&self, f: u32) -> Result<usize> {
        self.excited
            .iter()
            .position(|l| l.f == f)
            .ok_or_else(|| Error::Index(format!("no excited F'={f} in {}", self.name)))
    }

    /// Whether the pair is coupled at all (nonzero line strength).
    pub fn is_allowed(&self, i: usize, j: usize) -> bool {
        i < self.ground.len() && j < self.excited.len() && self.branching[i][j] > 0.0
    }

    pub fn transition_frequency(&self, i: usize, j: usize) -> Result<f64> {
        self.check(i, j)?;
        Ok(self.transition_hz[i][j])
    }

    /// Angular transition frequency omega_ij (rad/s).
    pub fn transition_angular(&self, i: usize, j: usize) -> Result<f64> {
        Ok(2.0 * PI * self.transition_frequency(i, j)?)
    }

    /// Share of excited level `j` decaying into ground level `i`.
    pub fn branching_fraction(&self, i: usize, j: usize) -> Result<f64> {
        self.check(i, j)?;
        let column: f64 = self.branching.iter().map(|row| row[j]).sum();
        if column == 0.0 {
            return Ok(0.0);
        }
        Ok(self.branching[i][j] / column)
    }

    /// Spontaneous transition rate gamma_ij (1/s):
    /// 2 pi nu_ij^2 e^2 / (m c^3 eps0) * f_ij / sum_i' f_i'j * f_JJ'.
    pub fn spontaneous_rate(&self, i: usize, j: usize) -> Result<f64> {
        let c = &CODATA;
        let nu = self.transition_frequency(i, j)?;
        let share = self.branching_fraction(i, j)?;
        Ok(self.rate_calibration * 2.0 * PI * nu * nu * c.e * c.e / (c.m_e * c.c.powi(3) * c.eps0)
            * share
            * self.f_jj)
    }

    /// Total spontaneous decay rate of excited level `j`.
    pub fn total_decay_rate(&self, j: usize) -> Result<f64> {
        (0..self.ground.len()).map(|i| self.spontaneous_rate(i, j)).sum()
    }

    /// Resonant Rabi frequency (rad/s) for linearly polarized light of
    /// intensity `intensity` (W/m^2).
    pub fn rabi_frequency(&self, i: usize, j: usize, intensity: f64) -> Result<f64> {
        if !(intensity >= 0.0) || !intensity.is_finite() {
            return Err(Error::Domain(format!("intensity must be >= 0, got {intensity}")));
        }
        let c = &CODATA;
        let omega = self.transition_angular(i, j)?;
        let g_i = self.ground[i].degeneracy as f64;
        let f_ij = self.branching[i][j];
        Ok(0.5
            * (c.e * c.e / (c.m_e * c.hbar * omega) * intensity / (c.c * c.eps0) * f_ij / g_i
                * self.f_jj)
                .sqrt())
    }

    /// Transition dipole moment (C m) implied by gamma_ij:
    /// mu^2 = 3 pi eps0 hbar c^3 gamma / omega^3.
    pub fn dipole_moment(&self, i: usize, j: usize) -> Result<f64> {
        let c = &CODATA;
        let gamma = self.spontaneous_rate(i, j)?;
        let omega = self.transition_angular(i, j)?;
        Ok((3.0 * PI * c.eps0 * c.hbar * c.c.powi(3) * gamma / omega.powi(3)).sqrt())
    }

    /// Doppler FWHM (Hz) of the line at temperature `temperature` (K).
    pub fn doppler_fwhm(&self, temperature: f64) -> Result<f64> {
        if !(temperature > 0.0) {
            return Err(Error::Domain(format!("temperature must be > 0, got {temperature}")));
        }
        let c = &CODATA;
        Ok(self.line_center_hz
            * (8.0 * c.k_b * temperature * std::f64::consts::LN_2 / (self.mass * c.c * c.c)).sqrt())
    }

    pub fn lande_factor(&self, level: LevelRef) -> Result<f64> {
        Ok(self.level(level)?.g_f)
    }

    /// Calibration factor that makes the total decay of excited level `j`
    /// equal `reference_rate` (1/s).
    pub fn calibration_for(&self, j: usize, reference_rate: f64) -> Result<f64> {
        let raw = self.clone().with_rate_calibration(1.0).total_decay_rate(j)?;
        Ok(reference_rate / raw)
    }

    /// Statistical weight of each ground level, g_i / sum g.
    pub fn ground_equilibrium(&self) -> Vec<f64> {
        let total: u32 = self.ground.iter().map(|l| l.degeneracy).sum();
        self.ground
            .iter()
            .map(|l| l.degeneracy as f64 / total as f64)
            .collect()
    }
}
