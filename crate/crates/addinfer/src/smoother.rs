//! The integrated local-polynomial smoother matrix for one covariate.
//!
//! The matrix is assembled as a midpoint-rule quadrature over grid points z of
//! the weighted local least-squares operators
//!   B(z) = W_z Z_z (Z_z' W_z Z_z)^{-1} Z_z' W_z,
//! with boundary-corrected kernel weights. The boundary normalizer for each
//! observation is evaluated with the same quadrature rule as the z-integral, so
//! row sums and polynomial reproduction are exact to rounding, the matrix is
//! exactly symmetric, and its eigenvalues lie in [0, 1].

use crate::error::{Error, Result};
use crate::kernel::KernelSpec;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub const DEFAULT_GRID_SIZE: usize = 401;
pub const DEFAULT_RIDGE_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SmootherConfig {
    /// Local polynomial order, 0 through 3.
    pub order: usize,
    /// Bandwidth in scaled ([0, 1]) covariate units.
    pub bandwidth: f64,
    pub kernel: KernelSpec,
    /// Number of midpoint quadrature nodes for the z-integral; odd.
    pub grid_size: usize,
    /// Relative ridge added to near-singular local systems; zero disables.
    pub ridge_tol: f64,
}

impl SmootherConfig {
    pub fn new(order: usize, bandwidth: f64, kernel: KernelSpec) -> Self {
        SmootherConfig {
            order,
            bandwidth,
            kernel,
            grid_size: DEFAULT_GRID_SIZE,
            ridge_tol: DEFAULT_RIDGE_TOL,
        }
    }

    fn validate(&self, n: usize) -> Result<()> {
        if !(1..=3 + 1).contains(&(self.order + 1)) {
            return Err(Error::Input(format!("order {} not in 0..=3", self.order)));
        }
        if !(self.bandwidth > 0.0 && self.bandwidth <= 1.0) {
            return Err(Error::InvalidBandwidth(self.bandwidth));
        }
        if self.grid_size < 51 || self.grid_size % 2 == 0 {
            return Err(Error::Input(format!(
                "grid size {} must be odd and at least 51",
                self.grid_size
            )));
        }
        if n < self.order + 2 {
            return Err(Error::Input(format!(
                "need at least {} observations for order {}",
                self.order + 2,
                self.order
            )));
        }
        Ok(())
    }
}

/// Dense integrated smoother matrix for one covariate.
#[derive(Debug, Clone)]
pub struct SmootherMatrix {
    pub matrix: DMatrix<f64>,
    pub config: SmootherConfig,
    pub covariate_index: usize,
}

impl SmootherMatrix {
    /// Eigenvalues sorted in descending order.
    pub fn eigenvalues(&self) -> Vec<f64> {
        symmetric_eigenvalues_desc(&self.matrix)
    }
}

pub fn symmetric_eigenvalues_desc(m: &DMatrix<f64>) -> Vec<f64> {
    let mut eig: Vec<f64> =
        m.clone().symmetric_eigen().eigenvalues.iter().copied().collect();
    eig.sort_by(|a, b| b.partial_cmp(a).unwrap());
    eig
}

/// Eigenvalues of the modified smoother H* - G_j, sorted descending.
pub fn modified_smoother_eigs(h: &SmootherMatrix, g_j: &DMatrix<f64>) -> Vec<f64> {
    symmetric_eigenvalues_desc(&(&h.matrix - g_j))
}

/// Quadrature rule of the z-integral on [0, 1]: equal-width panels, each carrying
/// a three-point Gauss–Legendre subrule, with roughly `grid_size` nodes in total.
///
/// Plain equispaced rules leave a second-order boundary error where the kernel
/// mass is truncated at 0 or 1; panel edges at the interval ends remove it, so
/// entries of the assembled smoother are stable under grid refinement. Weights
/// are positive and sum to one.
pub fn quadrature_rule(grid_size: usize) -> (Vec<f64>, Vec<f64>) {
    panel_rule(&uniform_edges(grid_size))
}

fn uniform_edges(grid_size: usize) -> Vec<f64> {
    let panels = grid_size.div_ceil(3);
    (0..=panels).map(|p| p as f64 / panels as f64).collect()
}

fn panel_rule(edges: &[f64]) -> (Vec<f64>, Vec<f64>) {
    // Gauss-Legendre 3 on [-1, 1].
    let gl_nodes = [-(0.6f64).sqrt(), 0.0, (0.6f64).sqrt()];
    let gl_wts = [5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0];
    let mut nodes = Vec::with_capacity(3 * (edges.len() - 1));
    let mut wts = Vec::with_capacity(3 * (edges.len() - 1));
    for win in edges.windows(2) {
        let (a, b) = (win[0], win[1]);
        let width = b - a;
        if width <= 1e-12 {
            continue;
        }
        let mid = 0.5 * (a + b);
        for k in 0..3 {
            nodes.push(mid + 0.5 * width * gl_nodes[k]);
            wts.push(0.5 * width * gl_wts[k]);
        }
    }
    (nodes, wts)
}

/// Panel rule whose edges include every point where the integrand loses
/// smoothness. Kernels with compact support are not differentiable where
/// |x_i - z| equals the support radius times the bandwidth, so those locations
/// become panel edges; the truncated Gaussian is smooth to rounding and keeps
/// the uniform panels.
fn quadrature_rule_for(sorted_x: &[f64], config: &SmootherConfig) -> (Vec<f64>, Vec<f64>) {
    match config.kernel.family {
        crate::kernel::KernelFamily::Gaussian => quadrature_rule(config.grid_size),
        _ => {
            let radius = config.kernel.support_radius() * config.bandwidth;
            let mut edges = uniform_edges(config.grid_size);
            for &x in sorted_x {
                for e in [x - radius, x + radius] {
                    if e > 0.0 && e < 1.0 {
                        edges.push(e);
                    }
                }
            }
            edges.sort_by(|a, b| a.partial_cmp(b).unwrap());
            edges.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
            panel_rule(&edges)
        }
    }
}

/// Sorted view of one covariate with the z-quadrature rule and the
/// per-observation boundary normalizers.
struct GridLayout {
    /// Observation indices ordered by covariate value.
    order: Vec<usize>,
    sorted_x: Vec<f64>,
    nodes: Vec<f64>,
    wts: Vec<f64>,
    /// Discretized normalizer sum_m w_m K_h(x_i - z_m), per sorted observation.
    norms: Vec<f64>,
}

impl GridLayout {
    fn new(x: &DVector<f64>, config: &SmootherConfig) -> Result<Self> {
        let n = x.len();
        for &v in x.iter() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Input(format!("covariate value {v} outside [0, 1]")));
            }
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).unwrap());
        let sorted_x: Vec<f64> = order.iter().map(|&i| x[i]).collect();
        let (nodes, wts) = quadrature_rule_for(&sorted_x, config);
        let h = config.bandwidth;
        let mut norms = vec![0.0; n];
        for (&z, &w) in nodes.iter().zip(wts.iter()) {
            let (lo, hi) = window(&sorted_x, z, config.kernel.support_radius() * h);
            for i in lo..hi {
                norms[i] += w * config.kernel.scaled(h, sorted_x[i] - z)?;
            }
        }
        for (i, &nv) in norms.iter().enumerate() {
            if nv < 1e-12 {
                return Err(Error::BandwidthTooSmall(format!(
                    "no quadrature node carries weight at x = {:.6}",
                    sorted_x[i]
                )));
            }
        }
        Ok(GridLayout { order, sorted_x, nodes, wts, norms })
    }
}

/// Contiguous index range of sorted values within radius of z.
fn window(sorted_x: &[f64], z: f64, radius: f64) -> (usize, usize) {
    let lo = sorted_x.partition_point(|&v| v < z - radius);
    let hi = sorted_x.partition_point(|&v| v <= z + radius);
    (lo, hi)
}

/// Local moment matrix in the scaled basis t = (x - z)/h, its inverse applied
/// symmetrically, with the ridge fallback of the config.
fn local_inverse(
    s: &DMatrix<f64>,
    config: &SmootherConfig,
    z: f64,
) -> Result<DMatrix<f64>> {
    let k = s.nrows();
    let eig = s.clone().symmetric_eigen();
    let lmax = eig.eigenvalues.max();
    let lmin = eig.eigenvalues.min();
    let (eig, ridged) = if lmax <= 0.0 || lmin <= 1e-12 * lmax {
        if config.ridge_tol > 0.0 && lmax > 0.0 {
            let ridge = config.ridge_tol * s.trace() / k as f64;
            let s2 = s + DMatrix::<f64>::identity(k, k) * ridge;
            (s2.symmetric_eigen(), true)
        } else {
            return Err(Error::BandwidthTooSmall(format!(
                "rank-deficient local system at grid point z = {z:.6}"
            )));
        }
    } else {
        (eig, false)
    };
    let lmax = eig.eigenvalues.max();
    let lmin = eig.eigenvalues.min();
    if ridged && (lmax <= 0.0 || lmin <= 1e-15 * lmax) {
        return Err(Error::BandwidthTooSmall(format!(
            "rank-deficient local system at grid point z = {z:.6} after ridge fallback"
        )));
    }
    // Symmetric inverse Q diag(1/l) Q', filled entrywise so it is exactly symmetric.
    let q = &eig.eigenvectors;
    let mut inv = DMatrix::zeros(k, k);
    for a in 0..k {
        for b in a..k {
            let mut acc = 0.0;
            for r in 0..k {
                acc += q[(a, r)] * q[(b, r)] / eig.eigenvalues[r];
            }
            inv[(a, b)] = acc;
            inv[(b, a)] = acc;
        }
    }
    Ok(inv)
}

/// Build the integrated smoother matrix for one covariate given in scaled units.
pub fn build_smoother(
    x: &DVector<f64>,
    config: &SmootherConfig,
    covariate_index: usize,
) -> Result<SmootherMatrix> {
    let n = x.len();
    config.validate(n)?;
    let layout = GridLayout::new(x, config)?;
    let h = config.bandwidth;
    let p1 = config.order + 1;
    let radius = config.kernel.support_radius() * h;

    // Accumulate the upper triangle in sorted coordinates, then mirror.
    let mut hs = DMatrix::<f64>::zeros(n, n);
    let mut weights = vec![0.0f64; n];
    let mut u = DMatrix::<f64>::zeros(n, p1);
    for (&z, &wz) in layout.nodes.iter().zip(layout.wts.iter()) {
        let (lo, hi) = window(&layout.sorted_x, z, radius);
        let na = hi - lo;
        if na == 0 {
            return Err(Error::BandwidthTooSmall(format!(
                "no observation carries weight at grid point z = {z:.6}"
            )));
        }
        // Weighted design rows in the conditioned basis t = (x - z)/h.
        for (row, i) in (lo..hi).enumerate() {
            let w = config.kernel.scaled(h, layout.sorted_x[i] - z)? / layout.norms[i];
            weights[row] = w;
            let t = (layout.sorted_x[i] - z) / h;
            let mut tp = 1.0;
            for r in 0..p1 {
                u[(row, r)] = w * tp;
                tp *= t;
            }
        }
        // s = Z' W Z in the same basis: s[a][b] = sum_i w_i t^{a+b}.
        let mut s = DMatrix::<f64>::zeros(p1, p1);
        for row in 0..na {
            let w = weights[row];
            if w == 0.0 {
                continue;
            }
            // u[row, r] = w * t^r, so u[row, a] * u[row, b] / w = w * t^{a+b}.
            for a in 0..p1 {
                for b in a..p1 {
                    s[(a, b)] += u[(row, a)] * u[(row, b)] / w;
                }
            }
        }
        for a in 0..p1 {
            for b in 0..a {
                s[(a, b)] = s[(b, a)];
            }
        }
        let s_inv = local_inverse(&s, config, z)?;
        // v = U s_inv; contribution dz * v U' added on the active block.
        for (row_a, ia) in (lo..hi).enumerate() {
            let mut v_a = [0.0f64; 4];
            for r in 0..p1 {
                let mut acc = 0.0;
                for c in 0..p1 {
                    acc += u[(row_a, c)] * s_inv[(c, r)];
                }
                v_a[r] = acc;
            }
            for (row_b, ib) in (lo..hi).enumerate().skip(row_a) {
                let mut acc = 0.0;
                for r in 0..p1 {
                    acc += v_a[r] * u[(row_b, r)];
                }
                hs[(ia, ib)] += wz * acc;
            }
        }
    }
    // Mirror the strict upper triangle and scatter back to observation order.
    let mut out = DMatrix::<f64>::zeros(n, n);
    for a in 0..n {
        let oa = layout.order[a];
        out[(oa, oa)] = hs[(a, a)];
        for b in (a + 1)..n {
            let ob = layout.order[b];
            out[(oa, ob)] = hs[(a, b)];
            out[(ob, oa)] = hs[(a, b)];
        }
    }
    Ok(SmootherMatrix { matrix: out, config: *config, covariate_index })
}

/// Trace of the smoother and its action on one response vector, without
/// materializing the matrix. Used by bandwidth selection.
pub fn smoother_trace_and_fit(
    x: &DVector<f64>,
    config: &SmootherConfig,
    response: &DVector<f64>,
) -> Result<(f64, DVector<f64>)> {
    let n = x.len();
    config.validate(n)?;
    let layout = GridLayout::new(x, config)?;
    let h = config.bandwidth;
    let p1 = config.order + 1;
    let radius = config.kernel.support_radius() * h;
    let r_sorted: Vec<f64> = layout.order.iter().map(|&i| response[i]).collect();

    let mut trace = 0.0;
    let mut fit_sorted = vec![0.0f64; n];
    let mut u = DMatrix::<f64>::zeros(n, p1);
    let mut weights = vec![0.0f64; n];
    for (&z, &wz) in layout.nodes.iter().zip(layout.wts.iter()) {
        let (lo, hi) = window(&layout.sorted_x, z, radius);
        let na = hi - lo;
        if na == 0 {
            return Err(Error::BandwidthTooSmall(format!(
                "no observation carries weight at grid point z = {z:.6}"
            )));
        }
        let mut s = DMatrix::<f64>::zeros(p1, p1);
        let mut s2 = DMatrix::<f64>::zeros(p1, p1);
        let mut uty = DVector::<f64>::zeros(p1);
        for (row, i) in (lo..hi).enumerate() {
            let w = config.kernel.scaled(h, layout.sorted_x[i] - z)? / layout.norms[i];
            weights[row] = w;
            let t = (layout.sorted_x[i] - z) / h;
            let mut tp = 1.0;
            for r in 0..p1 {
                u[(row, r)] = w * tp;
                tp *= t;
            }
            for a in 0..p1 {
                uty[a] += u[(row, a)] * r_sorted[i];
                for b in a..p1 {
                    if w > 0.0 {
                        s[(a, b)] += u[(row, a)] * u[(row, b)] / w;
                    }
                    s2[(a, b)] += u[(row, a)] * u[(row, b)];
                }
            }
        }
        for a in 0..p1 {
            for b in 0..a {
                s[(a, b)] = s[(b, a)];
                s2[(a, b)] = s2[(b, a)];
            }
        }
        let s_inv = local_inverse(&s, config, z)?;
        trace += wz * (&s_inv * &s2).trace();
        let beta = &s_inv * &uty;
        for (row, i) in (lo..hi).enumerate() {
            let mut acc = 0.0;
            for r in 0..p1 {
                acc += u[(row, r)] * beta[r];
            }
            fit_sorted[i] += wz * acc;
        }
    }
    let mut fitted = DVector::zeros(n);
    for (pos, &i) in layout.order.iter().enumerate() {
        fitted[i] = fit_sorted[pos];
    }
    Ok((trace, fitted))
}

/// Weighted local polynomial fit at a single point z with plain kernel weights.
/// Returns the coefficient vector; entry r estimates the r-th derivative over r!.
pub fn local_poly_fit(
    x: &DVector<f64>,
    y: &DVector<f64>,
    z: f64,
    order: usize,
    bandwidth: f64,
    kernel: &KernelSpec,
) -> Result<DVector<f64>> {
    if bandwidth <= 0.0 {
        return Err(Error::InvalidBandwidth(bandwidth));
    }
    let n = x.len();
    let p1 = order + 1;
    let mut s = DMatrix::<f64>::zeros(p1, p1);
    let mut b = DVector::<f64>::zeros(p1);
    let mut active = 0usize;
    for i in 0..n {
        let w = kernel.scaled(bandwidth, x[i] - z)?;
        if w <= 0.0 {
            continue;
        }
        active += 1;
        let t = (x[i] - z) / bandwidth;
        let mut tp = 1.0;
        let mut pows = [0.0f64; 4];
        for item in pows.iter_mut().take(p1) {
            *item = tp;
            tp *= t;
        }
        for a in 0..p1 {
            b[a] += w * pows[a] * y[i];
            for c in a..p1 {
                s[(a, c)] += w * pows[a] * pows[c];
            }
        }
    }
    for a in 0..p1 {
        for c in 0..a {
            s[(a, c)] = s[(c, a)];
        }
    }
    if active < p1 {
        return Err(Error::InsufficientLocalData { at: z, needed: p1 });
    }
    let eig = s.clone().symmetric_eigen();
    if eig.eigenvalues.min() <= 1e-12 * eig.eigenvalues.max() {
        return Err(Error::InsufficientLocalData { at: z, needed: p1 });
    }
    let beta_t = s.lu().solve(&b).ok_or(Error::InsufficientLocalData { at: z, needed: p1 })?;
    // Undo the basis scaling: coefficient r in the raw basis is beta_t[r]/h^r.
    let mut beta = DVector::zeros(p1);
    let mut hp = 1.0;
    for r in 0..p1 {
        beta[r] = beta_t[r] / hp;
        hp *= bandwidth;
    }
    Ok(beta)
}
