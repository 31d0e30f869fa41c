//! Quadratic Rényi entropy of diagonal Gaussians and their equal-weight
//! mixtures, and the Jensen-Rényi divergence built from them.
//!
//! For order 2 every term has a closed form because the integral of a product
//! of two Gaussian densities is itself a Gaussian density value:
//!
//! ```text
//! ∫ N(x; μa, Σa) N(x; μb, Σb) dx = N(μa; μb, Σa + Σb)
//! ```
//!
//! All quantities are in nats.

use alloc::format;
use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::error::{Error, Result};

/// One diagonal Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianComponent {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl GaussianComponent {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        let c = GaussianComponent { mean, var };
        c.validate()?;
        Ok(c)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn validate(&self) -> Result<()> {
        if self.mean.is_empty() || self.mean.len() != self.var.len() {
            return Err(Error::Shape {
                what: "gaussian component",
                expected: self.mean.len().max(1),
                actual: self.var.len(),
            });
        }
        check_vars(&self.var)
    }
}

fn check_vars(var: &[f64]) -> Result<()> {
    match var.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
        Some(v) => Err(Error::Numeric(format!("covariance entry {v} is not positive"))),
        None => Ok(()),
    }
}

/// Equal-weight mixture of diagonal Gaussians sharing one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSummary {
    pub components: Vec<GaussianComponent>,
}

impl MixtureSummary {
    pub fn new(components: Vec<GaussianComponent>) -> Result<Self> {
        let m = MixtureSummary { components };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        let first = self
            .components
            .first()
            .ok_or_else(|| Error::Config("mixture has no components".into()))?;
        for c in &self.components {
            c.validate()?;
            if c.dim() != first.dim() {
                return Err(Error::Shape {
                    what: "mixture component dimension",
                    expected: first.dim(),
                    actual: c.dim(),
                });
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    /// Component parameters flattened row-major as `(means, vars)`.
    fn flatten(&self) -> (Vec<f64>, Vec<f64>) {
        let means = self.components.iter().flat_map(|c| c.mean.iter().copied()).collect();
        let vars = self.components.iter().flat_map(|c| c.var.iter().copied()).collect();
        (means, vars)
    }
}

/// `ln N(μa; μb, Σa + Σb)` for diagonal covariances.
#[inline]
fn ln_cross_term(mean_a: &[f64], var_a: &[f64], mean_b: &[f64], var_b: &[f64]) -> f64 {
    let d = mean_a.len() as f64;
    let mut quad = 0.0;
    let mut ln_det = 0.0;
    for k in 0..mean_a.len() {
        let s = var_a[k] + var_b[k];
        let diff = mean_a[k] - mean_b[k];
        quad += diff * diff / s;
        ln_det += libm::log(s);
    }
    -0.5 * (d * libm::log(2.0 * PI) + ln_det + quad)
}

/// Closed-form pairwise term `z_ab = ∫ p_a p_b`.
pub fn gaussian_cross_term(a: &GaussianComponent, b: &GaussianComponent) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    if a.dim() != b.dim() {
        return Err(Error::Shape {
            what: "cross term dimension",
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    Ok(libm::exp(ln_cross_term(&a.mean, &a.var, &b.mean, &b.var)))
}

#[inline]
fn renyi2_diag(var: &[f64]) -> f64 {
    let d = var.len() as f64;
    0.5 * d * libm::log(4.0 * PI) + 0.5 * var.iter().map(|&v| libm::log(v)).sum::<f64>()
}

/// `H₂(N(μ, Σ)) = (d/2) ln 4π + ½ Σ ln σ²ₖ`.
pub fn renyi2_entropy_gaussian(c: &GaussianComponent) -> Result<f64> {
    c.validate()?;
    Ok(renyi2_diag(&c.var))
}

/// Mixture entropy from flattened `count x dim` parameters. Inputs are trusted.
fn renyi2_mixture_flat(means: &[f64], vars: &[f64], dim: usize) -> f64 {
    let count = means.len() / dim;
    // log-sum-exp over the count² ordered pairs
    let mut terms = [0.0f64; 64];
    let mut heap;
    let ln_z: &mut [f64] = if count * count <= terms.len() {
        &mut terms[..count * count]
    } else {
        heap = alloc::vec![0.0; count * count];
        &mut heap
    };
    for i in 0..count {
        let (mi, vi) = (&means[i * dim..(i + 1) * dim], &vars[i * dim..(i + 1) * dim]);
        for j in i..count {
            let (mj, vj) = (&means[j * dim..(j + 1) * dim], &vars[j * dim..(j + 1) * dim]);
            let v = ln_cross_term(mi, vi, mj, vj);
            ln_z[i * count + j] = v;
            ln_z[j * count + i] = v;
        }
    }
    let max = ln_z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = ln_z.iter().map(|&v| libm::exp(v - max)).sum();
    let n = count as f64;
    -(max + libm::log(sum) - 2.0 * libm::log(n))
}

/// `H₂(mix) = −ln((1/B²) Σᵢⱼ zᵢⱼ)`.
pub fn renyi2_entropy_mixture(m: &MixtureSummary) -> Result<f64> {
    m.validate()?;
    let (means, vars) = m.flatten();
    Ok(renyi2_mixture_flat(&means, &vars, m.dim()))
}

/// Jensen-Rényi divergence from flattened `count x dim` means and variances.
///
/// This is the allocation-light entry point used inside control loops. A
/// single component, or identical components, yield exactly 0.
pub fn jrd_flat(means: &[f64], vars: &[f64], dim: usize) -> Result<f64> {
    if dim == 0 || means.len() != vars.len() || means.len() % dim != 0 || means.is_empty() {
        return Err(Error::Shape {
            what: "flattened mixture",
            expected: vars.len(),
            actual: means.len(),
        });
    }
    check_vars(vars)?;
    let count = means.len() / dim;
    let identical = means.chunks_exact(dim).all(|m| m == &means[..dim])
        && vars.chunks_exact(dim).all(|v| v == &vars[..dim]);
    if count == 1 || identical {
        return Ok(0.0);
    }
    let mean_component_entropy =
        vars.chunks_exact(dim).map(renyi2_diag).sum::<f64>() / count as f64;
    Ok(renyi2_mixture_flat(means, vars, dim) - mean_component_entropy)
}

/// `JRD = H₂(mixture) − (1/B) Σᵢ H₂(componentᵢ)`.
pub fn jrd(m: &MixtureSummary) -> Result<f64> {
    m.validate()?;
    let (means, vars) = m.flatten();
    jrd_flat(&means, &vars, m.dim())
}

/// Uniform grid for the numeric-integration oracle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl Grid {
    /// Covers every component out to 12 standard deviations with step 1e-3.
    pub fn covering(m: &MixtureSummary) -> Self {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for c in &m.components {
            let sd = libm::sqrt(c.var[0]);
            lo = lo.min(c.mean[0] - 12.0 * sd);
            hi = hi.max(c.mean[0] + 12.0 * sd);
        }
        Grid { lo, hi, step: 1e-3 }
    }
}

/// Jensen-Rényi divergence of a one-dimensional mixture by trapezoidal
/// integration of squared densities.
///
/// The step must resolve the narrowest component (`step ≤ σ_min / 4`); the
/// trapezoid rule on Gaussians is then accurate well below 1e-8 as long as the
/// grid spans several standard deviations past every component.
pub fn jrd_oracle_1d(m: &MixtureSummary, grid: Grid) -> Result<f64> {
    m.validate()?;
    if m.dim() != 1 {
        return Err(Error::Shape {
            what: "oracle dimension",
            expected: 1,
            actual: m.dim(),
        });
    }
    let min_sd = m
        .components
        .iter()
        .map(|c| libm::sqrt(c.var[0]))
        .fold(f64::INFINITY, f64::min);
    if !(grid.step > 0.0) || grid.step > 0.25 * min_sd || !(grid.hi > grid.lo) {
        return Err(Error::Config(format!(
            "grid step {} does not resolve component sd {min_sd}",
            grid.step
        )));
    }
    let n = libm::ceil((grid.hi - grid.lo) / grid.step) as usize;
    let b = m.components.len();
    let pdf = |c: &GaussianComponent, x: f64| {
        let v = c.var[0];
        let d = x - c.mean[0];
        libm::exp(-0.5 * d * d / v) / libm::sqrt(2.0 * PI * v)
    };
    let mut mix_sq = 0.0;
    let mut comp_sq = alloc::vec![0.0; b];
    for i in 0..=n {
        let x = grid.lo + i as f64 * grid.step;
        let w = if i == 0 || i == n { 0.5 } else { 1.0 };
        let mut mix = 0.0;
        for (c, acc) in m.components.iter().zip(comp_sq.iter_mut()) {
            let p = pdf(c, x);
            mix += p;
            *acc += w * p * p;
        }
        mix /= b as f64;
        mix_sq += w * mix * mix;
    }
    let h_mix = -libm::log(mix_sq * grid.step);
    let h_comp = comp_sq
        .iter()
        .map(|s| -libm::log(s * grid.step))
        .sum::<f64>()
        / b as f64;
    Ok(h_mix - h_comp)
}
