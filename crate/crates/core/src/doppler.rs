//! Thermal velocity distribution and Doppler averaging on a Gauss-Legendre
//! velocity grid.

use std::f64::consts::PI;

use gauss_quad::legendre::GaussLegendre;
use serde::{Deserialize, Serialize};

use crate::constants::CODATA;
use crate::error::{Error, Result};

pub const DEFAULT_NODES: usize = 201;
pub const DEFAULT_SPAN: f64 = 5.0;

/// One-dimensional Maxwell density f(u) = exp(-(u/ubar)^2 / 2) / (sqrt(2 pi) ubar), in s/m.
pub fn maxwell_weight(u: f64, ubar: f64) -> f64 {
    debug_assert!(ubar > 0.0);
    (-(u / ubar).powi(2) / 2.0).exp() / ((2.0 * PI).sqrt() * ubar)
}

/// ubar = sqrt(k_B T / m) (m/s).
pub fn thermal_velocity(temperature: f64, mass: f64) -> f64 {
    (CODATA.k_b * temperature / mass).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub nodes: usize,
    /// Half-width of the grid in units of ubar.
    pub span: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            nodes: DEFAULT_NODES,
            span: DEFAULT_SPAN,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VelocityGrid {
    /// Ascending, symmetric about zero (m/s).
    pub nodes: Vec<f64>,
    /// Quadrature weight times Maxwell density.
    pub weights: Vec<f64>,
    pub ubar: f64,
}

impl VelocityGrid {
    pub fn build(temperature: f64, mass: f64, spec: GridSpec) -> Result<Self> {
        let GridSpec { nodes: n, span } = spec;
        if n < 33 || n % 2 == 0 {
            return Err(Error::Config(format!(
                "velocity grid needs an odd node count >= 33, got {n}"
            )));
        }
        if !(span >= 4.0) || !span.is_finite() {
            return Err(Error::Config(format!("velocity span must be >= 4 ubar, got {span}")));
        }
        if !(temperature > 0.0) || !(mass > 0.0) {
            return Err(Error::Config("temperature and mass must be positive".into()));
        }
        let ubar = thermal_velocity(temperature, mass);
        let rule = GaussLegendre::new(n).map_err(|e| Error::Config(format!("{e}")))?;
        let mut pairs: Vec<(f64, f64)> = rule.as_node_weight_pairs().to_vec();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        // enforce exact mirror symmetry of the rule
        for k in 0..n / 2 {
            let m = n - 1 - k;
            let x = 0.5 * (pairs[m].0 - pairs[k].0);
            let w = 0.5 * (pairs[m].1 + pairs[k].1);
            pairs[k] = (-x, w);
            pairs[m] = (x, w);
        }
        pairs[n / 2].0 = 0.0;

        let half = span * ubar;
        let (nodes, weights) = pairs
            .into_iter()
            .map(|(x, w)| {
                let u = half * x;
                (u, half * w * maxwell_weight(u, ubar))
            })
            .unzip();
        Ok(Self {
            nodes,
            weights,
            ubar,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Weighted sum of `g` over the nodes, ascending node order.
    pub fn convolve<F: FnMut(f64) -> f64>(&self, mut g: F) -> Result<f64> {
        let mut acc = 0.0;
        for (k, (&u, &w)) in self.nodes.iter().zip(&self.weights).enumerate() {
            let v = g(u);
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("integrand at node {k} (u = {u} m/s) is {v}")));
            }
            acc += w * v;
        }
        Ok(acc)
    }

    /// Weighted sum of values already evaluated on the nodes.
    pub fn convolve_values(&self, values: &[f64]) -> Result<f64> {
        if values.len() != self.len() {
            return Err(Error::Shape(format!(
                "{} values for {} velocity nodes",
                values.len(),
                self.len()
            )));
        }
        let mut k = 0;
        self.convolve(|_| {
            k += 1;
            values[k - 1]
        })
    }
}
