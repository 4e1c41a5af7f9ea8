//! Extended optical Bloch equations for a hyperfine-resolved (but not
//! m_F-resolved) alkali D2 line, their steady state and a time-domain
//! integrator used to cross-check it.
//!
//! The density matrix is real-vectorized: one slot per level population,
//! then a (re, im) slot pair per retained coherence. A coherence between
//! levels a and b is stored once, as the element ⟨a|ρ|b⟩ with a later in
//! level order than b (excited levels follow ground levels), so the stored
//! ground-excited element is the optical coherence ⟨j|ρ|i⟩.
//!
//! Retained coherences:
//! * ground-excited pairs with nonzero line strength,
//! * all ground-ground pairs,
//! * excited-excited pairs that share at least one allowed ground partner.
//!
//! Couplings into any other element are dropped.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::atomic_data::LevelScheme;
use crate::constants::CODATA;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CoherenceKind {
    GroundExcited,
    GroundGround,
    ExcitedExcited,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Coherence {
    /// Row level (later in level order).
    pub row: usize,
    /// Column level.
    pub col: usize,
    pub kind: CoherenceKind,
    /// Index of the real part; the imaginary part follows.
    pub slot: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Elem {
    Pop(usize),
    Coh { slot: usize, conj: bool },
}

/// Maps density-matrix elements onto real vector slots.
#[derive(Debug, Clone, PartialEq)]
pub struct StateLayout {
    pub n_ground: usize,
    pub n_excited: usize,
    pub coherences: Vec<Coherence>,
    /// Degeneracy-weighted ground distribution, zero on excited levels.
    pub equilibrium: Vec<f64>,
    lookup: Vec<Option<Elem>>,
}

impl StateLayout {
    pub fn new(scheme: &LevelScheme) -> Self {
        let (ng, ne) = (scheme.n_ground(), scheme.n_excited());
        let n = ng + ne;
        let mut coherences = Vec::new();
        let mut slot = n;
        let mut push = |row: usize, col: usize, kind| {
            coherences.push(Coherence {
                row,
                col,
                kind,
                slot,
            });
            slot += 2;
        };
        for i in 0..ng {
            for j in 0..ne {
                if scheme.is_allowed(i, j) {
                    push(ng + j, i, CoherenceKind::GroundExcited);
                }
            }
        }
        for i in 0..ng {
            for ip in i + 1..ng {
                push(ip, i, CoherenceKind::GroundGround);
            }
        }
        for j in 0..ne {
            for jp in j + 1..ne {
                if (0..ng).any(|i| scheme.is_allowed(i, j) && scheme.is_allowed(i, jp)) {
                    push(ng + jp, ng + j, CoherenceKind::ExcitedExcited);
                }
            }
        }

        let mut lookup = vec![None; n * n];
        for a in 0..n {
            lookup[a * n + a] = Some(Elem::Pop(a));
        }
        for c in &coherences {
            lookup[c.row * n + c.col] = Some(Elem::Coh {
                slot: c.slot,
                conj: false,
            });
            lookup[c.col * n + c.row] = Some(Elem::Coh {
                slot: c.slot,
                conj: true,
            });
        }

        let mut equilibrium = scheme.ground_equilibrium();
        equilibrium.resize(n, 0.0);
        Self {
            n_ground: ng,
            n_excited: ne,
            coherences,
            equilibrium,
            lookup,
        }
    }

    pub fn n_levels(&self) -> usize {
        self.n_ground + self.n_excited
    }

    pub fn dim(&self) -> usize {
        self.n_levels() + 2 * self.coherences.len()
    }

    fn elem(&self, a: usize, b: usize) -> Option<Elem> {
        self.lookup[a * self.n_levels() + b]
    }

    pub fn is_retained(&self, a: usize, b: usize) -> bool {
        self.elem(a, b).is_some()
    }

    /// Human-readable name of a vector slot.
    pub fn slot_label(&self, slot: usize) -> String {
        let name = |a: usize| {
            if a < self.n_ground {
                format!("g{a}")
            } else {
                format!("e{}", a - self.n_ground)
            }
        };
        if slot < self.n_levels() {
            return format!("pop[{}]", name(slot));
        }
        for c in &self.coherences {
            if slot == c.slot {
                return format!("re[{},{}]", name(c.row), name(c.col));
            }
            if slot == c.slot + 1 {
                return format!("im[{},{}]", name(c.row), name(c.col));
            }
        }
        format!("slot{slot}")
    }
}

/// Drive and relaxation parameters for one velocity class at one laser
/// frequency. Matrices are indexed [ground][excited].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriveContext {
    /// omega_l (rad/s)
    pub laser_angular: f64,
    /// u (m/s)
    pub velocity: f64,
    /// omega' = omega_l (1 - u/c)
    pub shifted_angular: f64,
    /// Delta_ij = omega_ij - omega' (rad/s)
    pub detuning: Vec<Vec<f64>>,
    /// Omega_ij (rad/s)
    pub rabi: Vec<Vec<f64>>,
    /// gamma_ij (1/s)
    pub decay: Vec<Vec<f64>>,
    /// gamma_B (1/s)
    pub buffer_quench: f64,
    /// gamma_diff (1/s)
    pub transit_rate: f64,
}

impl DriveContext {
    pub fn new(
        scheme: &LevelScheme,
        laser_angular: f64,
        velocity: f64,
        intensity: f64,
        buffer_quench: f64,
        transit_rate: f64,
    ) -> Result<Self> {
        let shifted_angular = laser_angular * (1.0 - velocity / CODATA.c);
        let (ng, ne) = (scheme.n_ground(), scheme.n_excited());
        let mut detuning = vec![vec![0.0; ne]; ng];
        let mut rabi = vec![vec![0.0; ne]; ng];
        let mut decay = vec![vec![0.0; ne]; ng];
        for i in 0..ng {
            for j in 0..ne {
                detuning[i][j] = scheme.transition_angular(i, j)? - shifted_angular;
                rabi[i][j] = scheme.rabi_frequency(i, j, intensity)?;
                decay[i][j] = scheme.spontaneous_rate(i, j)?;
            }
        }
        Ok(Self {
            laser_angular,
            velocity,
            shifted_angular,
            detuning,
            rabi,
            decay,
            buffer_quench,
            transit_rate,
        })
    }

    /// Laser tuned `detuning_hz` away from `reference_hz`.
    pub fn at_detuning(
        scheme: &LevelScheme,
        reference_hz: f64,
        detuning_hz: f64,
        velocity: f64,
        intensity: f64,
        buffer_quench: f64,
        transit_rate: f64,
    ) -> Result<Self> {
        Self::new(
            scheme,
            2.0 * PI * (reference_hz + detuning_hz),
            velocity,
            intensity,
            buffer_quench,
            transit_rate,
        )
    }

    fn n_ground(&self) -> usize {
        self.detuning.len()
    }

    fn n_excited(&self) -> usize {
        self.detuning.first().map_or(0, Vec::len)
    }

    /// Total spontaneous decay of each excited level.
    pub fn excited_decay(&self) -> Vec<f64> {
        (0..self.n_excited())
            .map(|j| self.decay.iter().map(|row| row[j]).sum())
            .collect()
    }
}

/// Real linear generator d(x)/dt = G x acting on the vectorized state.
#[derive(Debug, Clone)]
pub struct Generator {
    pub layout: Arc<StateLayout>,
    pub matrix: DMatrix<f64>,
}

impl Generator {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.matrix * x
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            layout: self.layout.clone(),
            matrix: &self.matrix * factor,
        }
    }

    /// Dense matrix as CSV, first row holds the slot labels.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let labels: Vec<String> = (0..self.dim()).map(|s| self.layout.slot_label(s)).collect();
        out.push_str("row");
        for l in &labels {
            let _ = write!(out, ",{l}");
        }
        out.push('\n');
        for r in 0..self.dim() {
            out.push_str(&labels[r]);
            for c in 0..self.dim() {
                let _ = write!(out, ",{:.17e}", self.matrix[(r, c)]);
            }
            out.push('\n');
        }
        out
    }
}

struct Builder<'a> {
    layout: &'a StateLayout,
    m: DMatrix<f64>,
}

impl Builder<'_> {
    /// d(dst)/dt += coef * src
    fn add(&mut self, dst: Elem, coef: Complex64, src: Elem) {
        let (cr, ci) = (coef.re, coef.im);
        let m = &mut self.m;
        match (dst, src) {
            (Elem::Pop(r), Elem::Pop(s)) => m[(r, s)] += cr,
            (Elem::Pop(r), Elem::Coh { slot: s, conj }) => {
                m[(r, s)] += cr;
                m[(r, s + 1)] += if conj { ci } else { -ci };
            }
            (Elem::Coh { slot: r, .. }, Elem::Pop(s)) => {
                m[(r, s)] += cr;
                m[(r + 1, s)] += ci;
            }
            (Elem::Coh { slot: r, .. }, Elem::Coh { slot: s, conj }) => {
                if conj {
                    m[(r, s)] += cr;
                    m[(r, s + 1)] += ci;
                    m[(r + 1, s)] += ci;
                    m[(r + 1, s + 1)] -= cr;
                } else {
                    m[(r, s)] += cr;
                    m[(r, s + 1)] -= ci;
                    m[(r + 1, s)] += ci;
                    m[(r + 1, s + 1)] += cr;
                }
            }
        }
    }

    /// Adds -i[V, ρ]_ab for the retained element (a, b).
    fn coherent(&mut self, a: usize, b: usize, coupling: &DMatrix<f64>) {
        let Some(dst) = self.layout.elem(a, b) else {
            return;
        };
        let n = self.layout.n_levels();
        for c in 0..n {
            let v = coupling[(a, c)];
            if v != 0.0 {
                if let Some(src) = self.layout.elem(c, b) {
                    self.add(dst, Complex64::new(0.0, -v), src);
                }
            }
            let v = coupling[(c, b)];
            if v != 0.0 {
                if let Some(src) = self.layout.elem(a, c) {
                    self.add(dst, Complex64::new(0.0, v), src);
                }
            }
        }
    }
}

/// Assembles the generator of the extended Bloch equations.
///
/// Terms, for stored elements ρ_ab = ⟨a|ρ|b⟩:
/// * coherent coupling -i[V, ρ] with V_ij = V_ji = -Ω_ij,
/// * rotation -i ω_ab ρ_ab, with ω_ji = Δ_ij for optical coherences and
///   detuning differences through a shared partner level otherwise,
/// * spontaneous decay of excited populations into ground levels (γ_ij),
/// * coherence damping ½(Γ_a + Γ_b) + ½(q_a + q_b), Γ the total spontaneous
///   rate and q = γ_B on excited levels,
/// * transit relaxation -γ_diff (ρ - Tr(ρ) ρ_eq) on every element.
pub fn assemble_generator(scheme: &LevelScheme, ctx: &DriveContext) -> Result<Generator> {
    let layout = Arc::new(StateLayout::new(scheme));
    assemble_with_layout(layout, ctx)
}

pub fn assemble_with_layout(layout: Arc<StateLayout>, ctx: &DriveContext) -> Result<Generator> {
    let (ng, ne) = (layout.n_ground, layout.n_excited);
    if ctx.n_ground() != ng
        || ctx.n_excited() != ne
        || [&ctx.rabi, &ctx.decay]
            .iter()
            .any(|m| m.len() != ng || m.iter().any(|r| r.len() != ne))
    {
        return Err(Error::Assembly(format!(
            "context tables do not match the {ng}x{ne} level scheme"
        )));
    }
    let rates_ok = ctx
        .rabi
        .iter()
        .chain(&ctx.decay)
        .flatten()
        .chain([&ctx.buffer_quench, &ctx.transit_rate])
        .all(|&v| v.is_finite() && v >= 0.0);
    if !rates_ok || ctx.detuning.iter().flatten().any(|d| !d.is_finite()) {
        return Err(Error::Assembly(
            "rates must be finite and non-negative, detunings finite".into(),
        ));
    }

    let n = ng + ne;
    let dim = layout.dim();
    let mut coupling = DMatrix::<f64>::zeros(n, n);
    for i in 0..ng {
        for j in 0..ne {
            if layout.is_retained(ng + j, i) {
                coupling[(i, ng + j)] = -ctx.rabi[i][j];
                coupling[(ng + j, i)] = -ctx.rabi[i][j];
            }
        }
    }
    let gamma_tot = ctx.excited_decay();
    let total = |a: usize| if a < ng { 0.0 } else { gamma_tot[a - ng] };
    let quench = |a: usize| if a < ng { 0.0 } else { ctx.buffer_quench };

    let mut b = Builder {
        layout: &layout,
        m: DMatrix::zeros(dim, dim),
    };

    // coherent part
    for a in 0..n {
        b.coherent(a, a, &coupling);
    }
    for c in &layout.coherences {
        b.coherent(c.row, c.col, &coupling);
    }

    // spontaneous decay of populations
    for j in 0..ne {
        let e = Elem::Pop(ng + j);
        b.add(e, (-gamma_tot[j]).into(), e);
        for i in 0..ng {
            if ctx.decay[i][j] != 0.0 {
                b.add(Elem::Pop(i), ctx.decay[i][j].into(), e);
            }
        }
    }

    // coherence rotation and damping
    for c in &layout.coherences {
        let omega = rotation(&layout, ctx, c)?;
        let damping = 0.5 * (total(c.row) + total(c.col)) + 0.5 * (quench(c.row) + quench(c.col));
        let e = Elem::Coh {
            slot: c.slot,
            conj: false,
        };
        b.add(e, Complex64::new(-damping, -omega), e);
    }

    // transit relaxation towards the thermal ground distribution
    let gd = ctx.transit_rate;
    let mut m = b.m;
    for s in 0..dim {
        m[(s, s)] -= gd;
    }
    for a in 0..n {
        let eq = layout.equilibrium[a];
        if eq != 0.0 {
            for s in 0..n {
                m[(a, s)] += gd * eq;
            }
        }
    }

    Ok(Generator { layout, matrix: m })
}

/// Rotation frequency of a stored coherence ⟨row|ρ|col⟩.
fn rotation(layout: &StateLayout, ctx: &DriveContext, c: &Coherence) -> Result<f64> {
    let ng = layout.n_ground;
    match c.kind {
        CoherenceKind::GroundExcited => Ok(ctx.detuning[c.col][c.row - ng]),
        CoherenceKind::GroundGround => {
            let (i, ip) = (c.col, c.row);
            (0..layout.n_excited)
                .find(|&j| layout.is_retained(ng + j, i) && layout.is_retained(ng + j, ip))
                .map(|j| ctx.detuning[i][j] - ctx.detuning[ip][j])
                .ok_or_else(|| {
                    Error::Assembly(format!("ground levels {i} and {ip} share no excited partner"))
                })
        }
        CoherenceKind::ExcitedExcited => {
            let (j, jp) = (c.col - ng, c.row - ng);
            (0..ng)
                .find(|&i| layout.is_retained(ng + j, i) && layout.is_retained(ng + jp, i))
                .map(|i| ctx.detuning[i][jp] - ctx.detuning[i][j])
                .ok_or_else(|| {
                    Error::Assembly(format!("excited levels {j} and {jp} share no ground partner"))
                })
        }
    }
}

/// Populations and coherences of one isotope for one velocity class.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    pub layout: Arc<StateLayout>,
    pub values: Vec<f64>,
}

impl DensityMatrix {
    /// Thermal state: ground levels weighted by degeneracy, nothing excited.
    pub fn equilibrium(layout: Arc<StateLayout>) -> Self {
        let mut values = vec![0.0; layout.dim()];
        values[..layout.n_levels()].copy_from_slice(&layout.equilibrium);
        Self { layout, values }
    }

    pub fn ground_population(&self, i: usize) -> f64 {
        self.values[i]
    }

    pub fn excited_population(&self, j: usize) -> f64 {
        self.values[self.layout.n_ground + j]
    }

    pub fn populations(&self) -> &[f64] {
        &self.values[..self.layout.n_levels()]
    }

    pub fn trace(&self) -> f64 {
        self.populations().iter().sum()
    }

    /// ⟨a|ρ|b⟩, zero for elements outside the retained set.
    pub fn element(&self, a: usize, b: usize) -> Complex64 {
        match self.layout.elem(a, b) {
            Some(Elem::Pop(s)) => self.values[s].into(),
            Some(Elem::Coh { slot, conj }) => {
                let z = Complex64::new(self.values[slot], self.values[slot + 1]);
                if conj {
                    z.conj()
                } else {
                    z
                }
            }
            None => Complex64::new(0.0, 0.0),
        }
    }

    /// Optical coherence ⟨j|ρ|i⟩ of ground level i and excited level j.
    pub fn optical_coherence(&self, i: usize, j: usize) -> Complex64 {
        self.element(self.layout.n_ground + j, i)
    }

    pub fn to_matrix(&self) -> DMatrix<Complex64> {
        let n = self.layout.n_levels();
        DMatrix::from_fn(n, n, |a, b| self.element(a, b))
    }

    pub fn as_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.values)
    }

    /// Largest violation of |ρ_ab|^2 <= ρ_aa ρ_bb over stored coherences,
    /// as |ρ_ab| - sqrt(ρ_aa ρ_bb).
    pub fn cauchy_schwarz_excess(&self) -> f64 {
        self.layout
            .coherences
            .iter()
            .map(|c| {
                let z = self.element(c.row, c.col).norm();
                let bound = (self.values[c.row].max(0.0) * self.values[c.col].max(0.0)).sqrt();
                z - bound
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Steady state G x = 0 with unit trace. The first population equation is
/// replaced by the trace constraint and the dense system is solved by LU
/// with one step of iterative refinement.
pub fn steady_state(gen: &Generator) -> Result<DensityMatrix> {
    let layout = &gen.layout;
    let (n, dim) = (layout.n_levels(), gen.dim());
    let mut a = gen.matrix.clone();
    for s in 0..dim {
        a[(0, s)] = if s < n { 1.0 } else { 0.0 };
    }
    let mut rhs = DVector::zeros(dim);
    rhs[0] = 1.0;

    let lu = a.clone().lu();
    let u = lu.u();
    let diag = u.diagonal();
    let dmax = diag.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let dmin = diag.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    if !(dmin > 1e-13 * dmax) {
        return Err(Error::Solver(format!(
            "singular steady-state system: {}",
            describe_zero_modes(gen)
        )));
    }
    let mut x = lu
        .solve(&rhs)
        .ok_or_else(|| Error::Solver(format!("singular steady-state system: {}", describe_zero_modes(gen))))?;
    let r = &rhs - &a * &x;
    if let Some(dx) = lu.solve(&r) {
        x += dx;
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Solver("non-finite steady state".into()));
    }

    let residual = (&gen.matrix * &x).norm();
    let scale = gen.matrix.norm().max(f64::MIN_POSITIVE);
    if residual > 1e-10 * dim as f64 * scale {
        return Err(Error::Solver(format!(
            "steady-state residual {residual:.3e} exceeds tolerance (|G| = {scale:.3e})"
        )));
    }
    Ok(DensityMatrix {
        layout: layout.clone(),
        values: x.as_slice().to_vec(),
    })
}

/// Names slots that nothing acts on (undamped, undriven modes).
fn describe_zero_modes(gen: &Generator) -> String {
    let dim = gen.dim();
    let zero: Vec<String> = (0..dim)
        .filter(|&s| (0..dim).all(|r| gen.matrix[(r, s)] == 0.0))
        .map(|s| gen.layout.slot_label(s))
        .collect();
    if zero.is_empty() {
        "zero mode not isolated to a single element".into()
    } else {
        format!("undamped mode(s) {}", zero.join(", "))
    }
}

/// Integration tolerances for [`time_evolve`].
#[derive(Debug, Clone, Copy)]
pub struct EvolveTolerance {
    pub rtol: f64,
    pub atol: f64,
}

impl Default for EvolveTolerance {
    fn default() -> Self {
        Self {
            rtol: 1e-10,
            atol: 1e-13,
        }
    }
}

/// Integrates dρ/dt = G ρ from `rho0` over `t` seconds.
///
/// The propagator over τ = t/2^k is integrated column by column with the
/// Dormand-Prince 5(4) pair (adaptive steps no larger than `dt_max`) and then
/// squared k times, so the fast optical and hyperfine rotations are resolved
/// only once.
pub fn time_evolve(gen: &Generator, rho0: &DensityMatrix, t: f64, dt_max: f64) -> Result<DensityMatrix> {
    time_evolve_with(gen, rho0, t, dt_max, EvolveTolerance::default())
}

pub fn time_evolve_with(
    gen: &Generator,
    rho0: &DensityMatrix,
    t: f64,
    dt_max: f64,
    tol: EvolveTolerance,
) -> Result<DensityMatrix> {
    if !(t >= 0.0) || !(dt_max > 0.0) {
        return Err(Error::Integration(format!("bad span t={t}, dt_max={dt_max}")));
    }
    if rho0.values.len() != gen.dim() {
        return Err(Error::Shape("initial state does not match generator".into()));
    }
    if t == 0.0 {
        return Ok(rho0.clone());
    }
    let norm = gen.matrix.norm().max(f64::MIN_POSITIVE);
    let k = (t * norm / 16.0).log2().ceil().clamp(0.0, 60.0) as i32;
    let tau = t / 2f64.powi(k);
    let mut p = dp5_propagator(&gen.matrix, tau, dt_max, tol)?;
    for _ in 0..k {
        p = &p * &p;
    }
    let y = p * rho0.as_vector();
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Integration("non-finite state during integration".into()));
    }
    Ok(DensityMatrix {
        layout: gen.layout.clone(),
        values: y.as_slice().to_vec(),
    })
}

/// exp(G t) by adaptive DP5 applied to the identity.
fn dp5_propagator(g: &DMatrix<f64>, t: f64, dt_max: f64, tol: EvolveTolerance) -> Result<DMatrix<f64>> {
    // the last row of A doubles as the 5th-order weights
    const A: [[f64; 6]; 7] = [
        [0.0; 6],
        [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
        [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
        [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
        [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
        [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
        [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
    ];
    const E: [f64; 7] = [
        71.0 / 57600.0,
        0.0,
        -71.0 / 16695.0,
        71.0 / 1920.0,
        -17253.0 / 339200.0,
        22.0 / 525.0,
        -1.0 / 40.0,
    ];

    let dim = g.nrows();
    let mut y = DMatrix::<f64>::identity(dim, dim);
    let mut k: Vec<DMatrix<f64>> = vec![DMatrix::zeros(dim, dim); 7];
    let mut stage = DMatrix::zeros(dim, dim);
    let mut err = DMatrix::zeros(dim, dim);
    k[0].gemm(1.0, g, &y, 0.0);

    let mut h = (1.0 / g.norm().max(f64::MIN_POSITIVE)).min(dt_max).min(t);
    let mut time = 0.0;
    let mut steps = 0usize;
    while time < t {
        if time + h > t {
            h = t - time;
        }
        for s in 1..7 {
            stage.copy_from(&y);
            for p in 0..s {
                if A[s][p] != 0.0 {
                    stage += &k[p] * (h * A[s][p]);
                }
            }
            k[s].gemm(1.0, g, &stage, 0.0);
        }
        err.fill(0.0);
        for (s, ks) in k.iter().enumerate() {
            if E[s] != 0.0 {
                err += ks * (h * E[s]);
            }
        }
        let mut enorm = 0.0_f64;
        for idx in 0..dim * dim {
            let sc = tol.atol + tol.rtol * y[idx].abs().max(stage[idx].abs());
            enorm = enorm.max((err[idx] / sc).abs());
        }
        if !enorm.is_finite() {
            return Err(Error::Integration("non-finite state during integration".into()));
        }
        if enorm <= 1.0 {
            time += h;
            std::mem::swap(&mut y, &mut stage);
            k.swap(0, 6);
            steps += 1;
        }
        let factor = if enorm == 0.0 {
            5.0
        } else {
            (0.9 * enorm.powf(-0.2)).clamp(0.2, 5.0)
        };
        h = (h * factor).min(dt_max);
        if h < 1e-14 * t && time < t {
            return Err(Error::Integration(format!(
                "step size underflow at t = {time:.3e} s after {steps} steps"
            )));
        }
    }
    log::trace!("dp5_propagator: {steps} accepted steps over {t:.3e} s");
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::atomic_data::{HyperfineLevel, Manifold};

    const TWO_PI: f64 = 2.0 * PI;

    fn rb87_context(detuning_hz: f64, velocity: f64, intensity: f64) -> (LevelScheme, DriveContext) {
        let s = LevelScheme::rb87();
        let reference = s.transition_frequency(1, 3).unwrap();
        let ctx = DriveContext::at_detuning(
            &s,
            reference,
            detuning_hz,
            velocity,
            intensity,
            TWO_PI * 18e6,
            PI * 515e3,
        )
        .unwrap();
        (s, ctx)
    }

    fn two_level() -> LevelScheme {
        LevelScheme::new(
            "two-level",
            None,
            1.0,
            1.443e-25,
            384.23e12,
            vec![HyperfineLevel::new(Manifold::Ground, 0, 0.0, 0.0)],
            vec![HyperfineLevel::new(Manifold::Excited, 1, 0.0, 0.0)],
            vec![vec![1.0]],
        )
        .unwrap()
    }

    fn two_level_ctx(rabi: f64, decay: f64, detuning: f64, quench: f64, transit: f64) -> DriveContext {
        DriveContext {
            laser_angular: 0.0,
            velocity: 0.0,
            shifted_angular: 0.0,
            detuning: vec![vec![detuning]],
            rabi: vec![vec![rabi]],
            decay: vec![vec![decay]],
            buffer_quench: quench,
            transit_rate: transit,
        }
    }

    #[test]
    fn layout_sizes() {
        for s in [LevelScheme::rb87(), LevelScheme::rb85()] {
            let l = StateLayout::new(&s);
            let kinds = |k| l.coherences.iter().filter(|c| c.kind == k).count();
            assert_eq!(kinds(CoherenceKind::GroundExcited), 6);
            assert_eq!(kinds(CoherenceKind::GroundGround), 1);
            assert_eq!(kinds(CoherenceKind::ExcitedExcited), 5);
            assert_eq!(l.dim(), 30);
        }
        // F'=0 and F'=3 of 87Rb share no ground level
        let l = StateLayout::new(&LevelScheme::rb87());
        assert!(!l.is_retained(2 + 3, 2));
        assert!(!l.is_retained(2 + 3, 2 + 0));
    }

    #[test]
    fn dark_state_is_thermal() {
        let (s, ctx) = rb87_context(0.0, 0.0, 0.0);
        let gen = assemble_generator(&s, &ctx).unwrap();
        let rho = steady_state(&gen).unwrap();
        assert!((rho.ground_population(0) - 3.0 / 8.0).abs() < 1e-12);
        assert!((rho.ground_population(1) - 5.0 / 8.0).abs() < 1e-12);
        for v in &rho.values[2..] {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn trace_is_conserved_by_generator() {
        let (s, ctx) = rb87_context(-300e6, 50.0, 1.8e4);
        let gen = assemble_generator(&s, &ctx).unwrap();
        let n = gen.layout.n_levels();
        for col in 0..gen.dim() {
            let sum: f64 = (0..n).map(|r| gen.matrix[(r, col)]).sum();
            let scale = gen.matrix.column(col).amax().max(1.0);
            assert!(sum.abs() <= 1e-10 * scale, "column {col}: {sum}");
        }
    }

    #[test]
    fn two_level_matches_closed_form() {
        let s = two_level();
        let (gamma, rabi) = (3.8e7, 2.1e7);
        // saturation limit without transit or quench
        let ctx = two_level_ctx(rabi, gamma, 0.0, 0.0, 0.0);
        let rho = steady_state(&assemble_generator(&s, &ctx).unwrap()).unwrap();
        let sat = 8.0 * rabi * rabi / (gamma * gamma);
        let expected = sat / (2.0 * (1.0 + sat));
        assert!((rho.excited_population(0) - expected).abs() < 1e-12);

        // general rates: rho_ee = K / (Gamma + gd + 2K), K = 2 Ω² β / (β² + Δ²)
        let (delta, quench, gd) = (4.4e7, 1.1e8, 1.6e6);
        let ctx = two_level_ctx(rabi, gamma, delta, quench, gd);
        let rho = steady_state(&assemble_generator(&s, &ctx).unwrap()).unwrap();
        let beta = 0.5 * gamma + 0.5 * quench + gd;
        let kk = 2.0 * rabi * rabi * beta / (beta * beta + delta * delta);
        let expected = kk / (gamma + gd + 2.0 * kk);
        assert!((rho.excited_population(0) - expected).abs() < 1e-12);
        // absorption sign convention: Im ⟨e|ρ|g⟩ > 0, Re follows sign of Δ
        let z = rho.optical_coherence(0, 0);
        assert!(z.im > 0.0 && z.re > 0.0);
    }

    #[test]
    fn far_detuned_excitation_is_perturbative() {
        // no buffer-gas dephasing: rho_jj ~ (Ω/Δ)^2
        let (s, mut ctx) = rb87_context(-50e9, 0.0, 1.8e4);
        ctx.buffer_quench = 0.0;
        let rho = steady_state(&assemble_generator(&s, &ctx).unwrap()).unwrap();
        let bound: f64 = (0..2)
            .flat_map(|i| (0..4).map(move |j| (i, j)))
            .map(|(i, j)| (ctx.rabi[i][j] / ctx.detuning[i][j]).powi(2))
            .sum();
        for j in 0..4 {
            let p = rho.excited_population(j);
            assert!(p < 1e-6 && p <= 2.0 * bound, "{p} vs {bound}");
        }
    }

    #[test]
    fn steady_state_properties() {
        for (d, u, i) in [(0.0, 0.0, 1.8e4), (-250e6, 120.0, 14.1e4), (6.5e9, -80.0, 7.8e4)] {
            let (s, ctx) = rb87_context(d, u, i);
            let gen = assemble_generator(&s, &ctx).unwrap();
            let rho = steady_state(&gen).unwrap();
            assert!((rho.trace() - 1.0).abs() < 1e-9);
            assert!(rho.populations().iter().all(|&p| p >= -1e-9));
            assert!(rho.cauchy_schwarz_excess() <= 1e-8);
            let m = rho.to_matrix();
            assert_eq!(m, m.adjoint());
            let scaled = steady_state(&gen.scaled(37.5)).unwrap();
            for (a, b) in rho.values.iter().zip(&scaled.values) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn singular_system_names_mode() {
        let (s, ctx) = rb87_context(0.0, 0.0, 0.0);
        let ctx = DriveContext {
            transit_rate: 0.0,
            ..ctx
        };
        let err = steady_state(&assemble_generator(&s, &ctx).unwrap()).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Solver(_)));
        assert!(msg.contains("pop[g"), "{msg}");
    }

    #[test]
    fn mismatched_context_rejected() {
        let (_, ctx) = rb87_context(0.0, 0.0, 1e4);
        let err = assemble_generator(&LevelScheme::rb85().clone(), &DriveContext {
            rabi: vec![vec![0.0; 3]; 2],
            ..ctx
        });
        assert!(matches!(err, Err(Error::Assembly(_))));
    }

    #[test]
    fn detuning_symmetry_single_ground() {
        // one ground level coupled to two excited levels placed symmetrically
        let s = LevelScheme::new(
            "V",
            None,
            1.0,
            1.443e-25,
            384.23e12,
            vec![HyperfineLevel::new(Manifold::Ground, 1, 0.0, 0.0)],
            vec![
                HyperfineLevel::new(Manifold::Excited, 1, 0.0, -100e6),
                HyperfineLevel::new(Manifold::Excited, 2, 0.0, 100e6),
            ],
            vec![vec![1.0, 1.0]],
        )
        .unwrap();
        let pop = |d: f64| {
            let mut ctx =
                DriveContext::at_detuning(&s, s.line_center_hz, d, 0.0, 1e4, 1e8, 1e6).unwrap();
            // identical line strengths and rates for a mirror-symmetric pair
            ctx.rabi[0][1] = ctx.rabi[0][0];
            ctx.decay[0][1] = ctx.decay[0][0];
            let rho = steady_state(&assemble_generator(&s, &ctx).unwrap()).unwrap();
            rho.excited_population(0) + rho.excited_population(1)
        };
        for d in [30e6, 170e6, 900e6] {
            let (a, b) = (pop(d), pop(-d));
            assert!((a - b).abs() <= 1e-9 * a.max(b), "{d}: {a} {b}");
        }
        // full 87Rb scheme is asymmetric about the F=2 -> F'=3 line
        let full = |d: f64| {
            let (s, ctx) = rb87_context(d, 0.0, 1.8e4);
            let rho = steady_state(&assemble_generator(&s, &ctx).unwrap()).unwrap();
            (0..4).map(|j| rho.excited_population(j)).sum::<f64>()
        };
        let (a, b) = (full(150e6), full(-150e6));
        assert!((a - b).abs() > 1e-3 * a.max(b), "{a} {b}");
    }

    #[test]
    fn evolve_zero_time_is_identity() {
        let (s, ctx) = rb87_context(0.0, 0.0, 1e4);
        let gen = assemble_generator(&s, &ctx).unwrap();
        let rho0 = DensityMatrix::equilibrium(gen.layout.clone());
        assert_eq!(time_evolve(&gen, &rho0, 0.0, 1e-9).unwrap(), rho0);
    }

    #[test]
    fn dark_evolution_relaxes_to_thermal() {
        let (s, ctx) = rb87_context(0.0, 0.0, 0.0);
        let gen = assemble_generator(&s, &ctx).unwrap();
        let mut start = DensityMatrix::equilibrium(gen.layout.clone());
        start.values[0] = 0.9;
        start.values[1] = 0.1;
        let t = 10.0 / ctx.transit_rate;
        let out = time_evolve(&gen, &start, t, t).unwrap();
        let decay = (-10.0_f64).exp();
        assert!((out.ground_population(0) - 3.0 / 8.0).abs() < 1.0 * decay);
        assert!((out.trace() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn two_level_evolution_matches_steady_state() {
        let s = two_level();
        let ctx = two_level_ctx(3e7, 3.8e7, 2e7, 0.0, 2e6);
        let gen = assemble_generator(&s, &ctx).unwrap();
        let ss = steady_state(&gen).unwrap();
        let out = time_evolve(&gen, &DensityMatrix::equilibrium(gen.layout.clone()), 50.0 / 2e6, 1.0)
            .unwrap();
        for (a, b) in ss.values.iter().zip(&out.values) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }
}
