//! Kernel functions, boundary-corrected kernels, kernel moments, and power-weighted
//! kernel convolutions.
//!
//! All kernels here are symmetric probability densities. The Gaussian kernel is
//! truncated at a finite radius (default 6 kernel units, mass below 1e-8) and
//! renormalized so that every kernel has bounded support; this keeps the
//! support-based quadrature in the smoother and in the convolution integrals finite.

use crate::error::{Error, Result};
use crate::quad;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

const SQRT_2PI: f64 = 2.5066282746310002;

/// Default truncation radius for the Gaussian kernel, in kernel units.
pub const DEFAULT_GAUSSIAN_RADIUS: f64 = 6.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    Gaussian,
    Epanechnikov,
    Uniform,
}

/// A symmetric nonnegative kernel density.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    /// Truncation radius in kernel units; only meaningful for the Gaussian,
    /// the compact kernels have natural support [-1, 1].
    pub truncation_radius: f64,
}

impl KernelSpec {
    pub fn new(family: KernelFamily) -> Self {
        KernelSpec { family, truncation_radius: DEFAULT_GAUSSIAN_RADIUS }
    }

    pub fn gaussian() -> Self {
        Self::new(KernelFamily::Gaussian)
    }

    pub fn epanechnikov() -> Self {
        Self::new(KernelFamily::Epanechnikov)
    }

    pub fn uniform() -> Self {
        Self::new(KernelFamily::Uniform)
    }

    /// Half-width of the kernel support in kernel units.
    pub fn support_radius(&self) -> f64 {
        match self.family {
            KernelFamily::Gaussian => self.truncation_radius,
            KernelFamily::Epanechnikov | KernelFamily::Uniform => 1.0,
        }
    }

    /// Mass retained inside the truncation radius before renormalization.
    fn gaussian_mass(&self) -> f64 {
        erf(self.truncation_radius / std::f64::consts::SQRT_2)
    }

    /// K(u); zero outside the support.
    pub fn eval(&self, u: f64) -> f64 {
        match self.family {
            KernelFamily::Gaussian => {
                if u.abs() > self.truncation_radius {
                    0.0
                } else {
                    (-0.5 * u * u).exp() / SQRT_2PI / self.gaussian_mass()
                }
            }
            KernelFamily::Epanechnikov => {
                if u.abs() > 1.0 {
                    0.0
                } else {
                    0.75 * (1.0 - u * u)
                }
            }
            KernelFamily::Uniform => {
                if u.abs() > 1.0 {
                    0.0
                } else {
                    0.5
                }
            }
        }
    }

    /// ∫_{-∞}^{u} K(t) dt, using the closed-form antiderivative of each family.
    pub fn cdf(&self, u: f64) -> f64 {
        match self.family {
            KernelFamily::Gaussian => {
                let r = self.truncation_radius;
                if u <= -r {
                    0.0
                } else if u >= r {
                    1.0
                } else {
                    let phi = |x: f64| 0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2));
                    (phi(u) - phi(-r)) / self.gaussian_mass()
                }
            }
            KernelFamily::Epanechnikov => {
                if u <= -1.0 {
                    0.0
                } else if u >= 1.0 {
                    1.0
                } else {
                    0.5 + 0.75 * u - 0.25 * u * u * u
                }
            }
            KernelFamily::Uniform => ((u + 1.0) / 2.0).clamp(0.0, 1.0),
        }
    }

    /// K_h(u) = K(u/h)/h.
    pub fn scaled(&self, h: f64, u: f64) -> Result<f64> {
        if h <= 0.0 || !h.is_finite() {
            return Err(Error::InvalidBandwidth(h));
        }
        Ok(self.eval(u / h) / h)
    }

    /// ∫_0^1 K_h(w - v) dw, evaluated from the closed-form CDF.
    pub fn interval_mass(&self, h: f64, v: f64) -> Result<f64> {
        if h <= 0.0 || !h.is_finite() {
            return Err(Error::InvalidBandwidth(h));
        }
        Ok(self.cdf((1.0 - v) / h) - self.cdf(-v / h))
    }

    /// Boundary-corrected kernel K_h(u, v) = K_h(u - v) / ∫_0^1 K_h(w - v) dw,
    /// for u, v in [0, 1]. Integrates to one over u for fixed v.
    pub fn boundary(&self, h: f64, u: f64, v: f64) -> Result<f64> {
        let norm = self.interval_mass(h, v)?;
        if norm < 1e-12 {
            return Err(Error::DegenerateBandwidth(norm));
        }
        Ok(self.scaled(h, u - v)? / norm)
    }

    /// (K_l * K_m)(u), the convolution of the power-weighted kernels
    /// K_l(x) = x^l K(x) and K_m(x) = x^m K(x), by adaptive Gauss–Legendre
    /// quadrature to absolute accuracy 1e-9.
    pub fn convolution(&self, l: u32, m: u32, u: f64) -> f64 {
        debug_assert!(l <= 3 && m <= 3);
        let r = self.support_radius();
        // Integrand support: x in [-r, r] intersected with u - x in [-r, r].
        let a = (-r).max(u - r);
        let b = r.min(u + r);
        if a >= b {
            return 0.0;
        }
        let f = |x: f64| {
            let y = u - x;
            x.powi(l as i32) * self.eval(x) * y.powi(m as i32) * self.eval(y)
        };
        match quad::integrate_adaptive(&f, a, b, 256, 1e-9, 4) {
            Ok(v) | Err(v) => v,
        }
    }

    /// Kernel moments up to the order needed for a degree-p local fit.
    pub fn moments(&self, p: usize) -> KernelMoments {
        let r = self.support_radius();
        let order = 2 * p;
        let mu: Vec<f64> = (0..=order)
            .map(|t| quad::integrate(&|x: f64| x.powi(t as i32) * self.eval(x), -r, r, 512))
            .collect();
        let v: Vec<f64> = (0..=order)
            .map(|t| {
                quad::integrate(&|x: f64| x.powi(t as i32) * self.eval(x) * self.eval(x), -r, r, 512)
            })
            .collect();
        let s = DMatrix::from_fn(p + 1, p + 1, |i, j| mu[i + j]);
        let s_inv = s
            .clone()
            .try_inverse()
            .expect("kernel moment matrix is positive definite for p <= 3");
        KernelMoments { mu, v, s, s_inv }
    }
}

/// Moments μ_t = ∫ u^t K(u) du and v_t = ∫ u^t K²(u) du together with the
/// moment matrix S = (μ_{i+j-2}) and its inverse.
#[derive(Debug, Clone)]
pub struct KernelMoments {
    pub mu: Vec<f64>,
    pub v: Vec<f64>,
    pub s: DMatrix<f64>,
    pub s_inv: DMatrix<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn eval_reference_values() {
        let ep = KernelSpec::epanechnikov();
        assert!((ep.eval(0.0) - 0.75).abs() < 1e-15);
        assert_eq!(ep.eval(1.5), 0.0);
        let ga = KernelSpec::gaussian();
        assert!((ga.eval(0.0) - 0.3989422804014327).abs() < 1e-8);
        let un = KernelSpec::uniform();
        assert!((un.eval(0.3) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kernels_integrate_to_one() {
        for spec in [KernelSpec::gaussian(), KernelSpec::epanechnikov(), KernelSpec::uniform()] {
            let r = spec.support_radius();
            let mass = quad::integrate(&|x| spec.eval(x), -r, r, 512);
            assert!((mass - 1.0).abs() < 1e-8, "{:?}: {mass}", spec.family);
        }
    }

    #[test]
    fn scaled_kernel_values() {
        let ep = KernelSpec::epanechnikov();
        assert!((ep.scaled(0.05, 0.0).unwrap() - 15.0).abs() < 1e-12);
        // Scaling by h = 1 is the identity.
        for u in [-0.7, 0.0, 0.4] {
            assert!((ep.scaled(1.0, u).unwrap() - ep.eval(u)).abs() < 1e-15);
        }
        // N(0, 0.04) density at 0.2 (hand arithmetic from the normal density).
        let ga = KernelSpec::gaussian();
        assert!((ga.scaled(0.2, 0.2).unwrap() - 1.2098536).abs() < 1e-4);
        assert!(ga.scaled(0.0, 0.1).is_err());
        assert!(ga.scaled(-1.0, 0.1).is_err());
    }

    #[test]
    fn boundary_kernel_interior_and_edge() {
        let ep = KernelSpec::epanechnikov();
        // Interior point: the normalizer is one.
        assert!((ep.boundary(0.05, 0.5, 0.5).unwrap() - 15.0).abs() < 1e-10);
        // At the edge the normalizer is 1/2 by symmetry; quadrature oracle below.
        assert!((ep.boundary(0.05, 0.0, 0.0).unwrap() - 30.0).abs() < 1e-9);
        let oracle: f64 = {
            // Brute-force Riemann normalizer for v = 0.
            let n = 2_000_000;
            let dw = 1.0 / n as f64;
            (0..n)
                .map(|i| ep.scaled(0.05, (i as f64 + 0.5) * dw).unwrap() * dw)
                .sum()
        };
        assert!((oracle - 0.5).abs() < 1e-6);
    }

    /// ∫_0^1 K_h(u, v) du over the support window, where the integrand is smooth.
    fn boundary_mass(spec: &KernelSpec, h: f64, v: f64) -> f64 {
        let r = spec.support_radius() * h;
        let a = (v - r).max(0.0);
        let b = (v + r).min(1.0);
        quad::integrate(&|u| spec.boundary(h, u, v).unwrap(), a, b, 512)
    }

    #[test]
    fn boundary_kernel_row_normalization() {
        for spec in [KernelSpec::gaussian(), KernelSpec::epanechnikov(), KernelSpec::uniform()] {
            for k in 0..=100 {
                let v = k as f64 / 100.0;
                let mass = boundary_mass(&spec, 0.07, v);
                assert!((mass - 1.0).abs() < 1e-8, "{:?} v={v}: {mass}", spec.family);
            }
        }
    }

    #[test]
    fn boundary_matches_scaled_in_interior_for_compact_support() {
        let ep = KernelSpec::epanechnikov();
        let h = 0.1;
        for &v in &[0.1, 0.35, 0.5, 0.9] {
            for &u in &[0.05, 0.3, 0.52, 0.95] {
                let lhs = ep.boundary(h, u, v).unwrap();
                let rhs = ep.scaled(h, u - v).unwrap();
                assert!((lhs - rhs).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn convolution_reference_values() {
        let ga = KernelSpec::gaussian();
        // Gaussian self-convolution is N(0, 2).
        assert!((ga.convolution(0, 0, 0.0) - 1.0 / (4.0 * std::f64::consts::PI).sqrt()).abs() < 1e-7);
        let ep = KernelSpec::epanechnikov();
        // (K0 * K0)(0) = ∫ K², known to be 3/5; cross-checked by a Riemann oracle.
        let oracle: f64 = {
            let n = 1_000_000;
            let dx = 2.0 / n as f64;
            (0..n).map(|i| ep.eval(-1.0 + (i as f64 + 0.5) * dx).powi(2) * dx).sum()
        };
        assert!((oracle - 0.6).abs() < 1e-9);
        assert!((ep.convolution(0, 0, 0.0) - 0.6).abs() < 1e-9);
        // Convolution of densities is a density.
        for spec in [ga, ep] {
            let r = 2.0 * spec.support_radius();
            let mass = quad::integrate(&|u| spec.convolution(0, 0, u), -r, r, 512);
            assert!((mass - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn convolution_argument_swap_symmetry() {
        // Swapping the powers and flipping the sign of the argument changes the
        // value by (-1)^{l+m}: the sign flip induced by odd powers.
        let ep = KernelSpec::epanechnikov();
        for (l, m) in [(0u32, 1u32), (1, 2), (2, 3), (0, 3), (1, 1), (0, 2)] {
            let parity = if (l + m) % 2 == 0 { 1.0 } else { -1.0 };
            for &u in &[-0.8, -0.2, 0.0, 0.5, 1.3] {
                let a = ep.convolution(l, m, u);
                let b = parity * ep.convolution(m, l, -u);
                assert!((a - b).abs() < 1e-8, "l={l} m={m} u={u}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn moments_structure() {
        for spec in [KernelSpec::gaussian(), KernelSpec::epanechnikov(), KernelSpec::uniform()] {
            for p in 0..=3 {
                let mom = spec.moments(p);
                assert!((mom.mu[0] - 1.0).abs() < 1e-9);
                for t in (1..=2 * p).step_by(2) {
                    assert!(mom.mu[t].abs() < 1e-10, "odd moment {t} not zero");
                }
                let id = &mom.s * &mom.s_inv;
                let n = p + 1;
                for i in 0..n {
                    for j in 0..n {
                        let want = if i == j { 1.0 } else { 0.0 };
                        assert!((id[(i, j)] - want).abs() < 1e-10);
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn kernel_symmetry(u in -8.0f64..8.0) {
            for spec in [KernelSpec::gaussian(), KernelSpec::epanechnikov(), KernelSpec::uniform()] {
                prop_assert_eq!(spec.eval(u), spec.eval(-u));
                prop_assert!(spec.eval(u) >= 0.0);
            }
        }

        #[test]
        fn boundary_normalization_random(h in 0.02f64..0.8, v in 0.0f64..1.0) {
            let spec = KernelSpec::epanechnikov();
            let mass = boundary_mass(&spec, h, v);
            prop_assert!((mass - 1.0).abs() < 1e-8);
        }
    }
}
