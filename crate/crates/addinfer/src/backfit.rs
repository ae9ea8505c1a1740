//! Simplified smooth backfitting: the iterative cycle over modified smoothers,
//! the closed-form solution, hat matrices for the full and reduced models, and
//! grid-level coefficient estimates.

use crate::data::Dataset;
use crate::design::{self, DesignSet};
use crate::error::{Error, Result};
use crate::kernel::KernelSpec;
use crate::smoother::{self, SmootherConfig, SmootherMatrix};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use std::time::{Duration, Instant};

pub const DEFAULT_MAX_ITER: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-8;

/// Model specification: per-covariate polynomial orders and bandwidths in
/// scaled units, the kernel, quadrature grid size, and convergence controls.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSpec {
    pub orders: Vec<usize>,
    pub bandwidths: Vec<f64>,
    pub kernel: KernelSpec,
    pub grid_size: usize,
    pub ridge_tol: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl ModelSpec {
    pub fn new(orders: Vec<usize>, bandwidths: Vec<f64>, kernel: KernelSpec) -> Self {
        ModelSpec {
            orders,
            bandwidths,
            kernel,
            grid_size: smoother::DEFAULT_GRID_SIZE,
            ridge_tol: smoother::DEFAULT_RIDGE_TOL,
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
        }
    }

    /// Local-linear spec with a common bandwidth for every covariate.
    pub fn local_linear(dim: usize, bandwidth: f64, kernel: KernelSpec) -> Self {
        Self::new(vec![1; dim], vec![bandwidth; dim], kernel)
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if self.orders.len() != dim || self.bandwidths.len() != dim {
            return Err(Error::Input(format!(
                "spec for {} covariates applied to {dim}",
                self.orders.len()
            )));
        }
        for &p in &self.orders {
            if p > 3 {
                return Err(Error::Input(format!("order {p} not in 0..=3")));
            }
        }
        for &h in &self.bandwidths {
            if !(h > 0.0 && h <= 1.0) {
                return Err(Error::InvalidBandwidth(h));
            }
        }
        if self.tol <= 0.0 {
            return Err(Error::Input("tolerance must be positive".into()));
        }
        Ok(())
    }

    fn smoother_config(&self, j: usize) -> SmootherConfig {
        SmootherConfig {
            order: self.orders[j],
            bandwidth: self.bandwidths[j],
            kernel: self.kernel,
            grid_size: self.grid_size,
            ridge_tol: self.ridge_tol,
        }
    }
}

/// Null hypothesis form for a tested component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NullForm {
    /// The component is absent: its covariate leaves both the smoothing cycle
    /// and the parametric space.
    Omit,
    /// The component is a polynomial of the given degree (1 = linear): the
    /// covariate keeps parametric columns up to that degree but is not smoothed.
    Polynomial(usize),
}

/// The fitted additive model.
#[derive(Debug, Clone)]
pub struct AdditiveFit {
    pub alpha0: f64,
    /// Parametric parts, one per covariate, each centered to mean zero.
    pub g_parts: Vec<DVector<f64>>,
    /// Nonparametric parts orthogonal to the covariate's polynomial space.
    pub m_star: Vec<DVector<f64>>,
    /// Component totals g + m*.
    pub m: Vec<DVector<f64>>,
    pub fitted: DVector<f64>,
    pub residuals: DVector<f64>,
    pub rss: f64,
    /// Hat matrix, materialized by the closed-form path.
    pub hat: Option<DMatrix<f64>>,
    pub iterations: usize,
    pub converged: bool,
    /// Relative sup-norm changes recorded per cycle.
    pub rel_changes: Vec<f64>,
    pub concurvity: bool,
    pub elapsed: Duration,
}

/// Reusable fitting machinery for one covariate layout: smoothers, modified
/// smoothers, and the parametric projection. Construction is the expensive
/// part; fitting a response afterwards is cheap.
pub struct Engine {
    n: usize,
    dim: usize,
    /// Covariate indices that carry a smoother.
    smoothed: Vec<usize>,
    smoothers: Vec<Arc<SmootherMatrix>>,
    /// Modified smoothers H_j - G_j, parallel to `smoothed`.
    modified: Vec<Arc<DMatrix<f64>>>,
    /// Projection onto the parametric span.
    g: DMatrix<f64>,
    /// Moore-Penrose pseudo-inverse of the design, for the decomposition of Gy.
    design_pinv: DMatrix<f64>,
    design: DesignSet,
    /// Power columns present in the design, per covariate.
    design_orders: Vec<usize>,
    concurvity: bool,
    spec: ModelSpec,
}

impl Engine {
    /// Engine for the unrestricted model.
    pub fn new(data: &Dataset, spec: &ModelSpec) -> Result<Self> {
        spec.validate(data.dim())?;
        let smoothed: Vec<usize> = (0..data.dim()).collect();
        Self::with_layout(data, spec, smoothed, spec.orders.clone(), None)
    }

    /// Engine for the reduced model under the given null for one covariate.
    /// Smoothers for the remaining covariates are shared with `full`.
    pub fn reduced_from(
        full: &Engine,
        data: &Dataset,
        tested: usize,
        form: NullForm,
    ) -> Result<Self> {
        let spec = &full.spec;
        if tested >= data.dim() {
            return Err(Error::Input(format!("tested covariate {tested} out of range")));
        }
        let mut design_orders = spec.orders.clone();
        match form {
            NullForm::Omit => design_orders[tested] = 0,
            NullForm::Polynomial(k) => {
                if k == 0 || k > spec.orders[tested] {
                    return Err(Error::Input(format!(
                        "polynomial null degree {k} must be in 1..={}",
                        spec.orders[tested]
                    )));
                }
                design_orders[tested] = k;
            }
        }
        let smoothed: Vec<usize> = (0..data.dim()).filter(|&j| j != tested).collect();
        let shared: Vec<Arc<SmootherMatrix>> = smoothed
            .iter()
            .map(|&j| {
                let pos = full.smoothed.iter().position(|&s| s == j).unwrap();
                full.smoothers[pos].clone()
            })
            .collect();
        Self::with_layout(data, spec, smoothed, design_orders, Some(shared))
    }

    fn with_layout(
        data: &Dataset,
        spec: &ModelSpec,
        smoothed: Vec<usize>,
        design_orders: Vec<usize>,
        shared_smoothers: Option<Vec<Arc<SmootherMatrix>>>,
    ) -> Result<Self> {
        let n = data.n();
        let x = data.x_scaled();
        // Covariates with no design columns and no smoother drop out of the
        // design; build_design treats order zero as intercept-only.
        let ds = design::build_design(x, &design_orders, None)?;
        let basis = design::orthonormal_basis(&ds.x_full, ds.rank_tol);
        let concurvity = basis.ncols() < ds.x_full.ncols();
        let g = &basis * basis.transpose();
        let svd = ds.x_full.clone().svd(true, true);
        let design_pinv = svd.pseudo_inverse(ds.rank_tol).map_err(|e| {
            Error::DegenerateDesign(format!("design pseudo-inverse failed: {e}"))
        })?;

        let smoothers: Vec<Arc<SmootherMatrix>> = match shared_smoothers {
            Some(s) => s,
            None => smoothed
                .iter()
                .map(|&j| {
                    Ok(Arc::new(smoother::build_smoother(
                        &data.scaled_col(j),
                        &spec.smoother_config(j),
                        j,
                    )?))
                })
                .collect::<Result<_>>()?,
        };
        // Modified smoother H_j - G_j with G_j the projection onto the
        // covariate's full polynomial block (intercept through order p_j).
        let modified = smoothed
            .iter()
            .zip(smoothers.iter())
            .map(|(&j, sm)| {
                let mut cols = vec![DVector::from_element(n, 1.0)];
                for r in 1..=spec.orders[j] {
                    cols.push(DVector::from_fn(n, |i, _| x[(i, j)].powi(r as i32)));
                }
                let block = DMatrix::from_columns(&cols);
                let gj = design::projection(&block, ds.rank_tol);
                Arc::new(&sm.matrix - gj)
            })
            .collect();
        Ok(Engine {
            n,
            dim: data.dim(),
            smoothed,
            smoothers,
            modified,
            g,
            design_pinv,
            design: ds,
            design_orders,
            concurvity,
            spec: spec.clone(),
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn smoother(&self, covariate: usize) -> Option<&SmootherMatrix> {
        self.smoothed
            .iter()
            .position(|&j| j == covariate)
            .map(|pos| self.smoothers[pos].as_ref())
    }

    pub fn parametric_projection(&self) -> &DMatrix<f64> {
        &self.g
    }

    /// Column index of covariate j's power-rho column in the design.
    fn design_col(&self, j: usize, rho: usize) -> usize {
        let mut col = 1;
        for power in 1..=rho {
            for (jj, &pj) in self.design_orders.iter().enumerate() {
                if power > pj {
                    continue;
                }
                if power == rho && jj == j {
                    return col;
                }
                col += 1;
            }
        }
        unreachable!("column lookup for absent power");
    }

    /// Decompose Gy into the intercept and centered per-covariate polynomial parts.
    fn decompose_parametric(&self, y: &DVector<f64>) -> (f64, Vec<DVector<f64>>) {
        let coeffs = &self.design_pinv * y;
        let mut alpha0 = coeffs[0];
        let mut g_parts = Vec::with_capacity(self.dim);
        for j in 0..self.dim {
            let mut q = DVector::zeros(self.n);
            for rho in 1..=self.design_orders[j] {
                let c = coeffs[self.design_col(j, rho)];
                for i in 0..self.n {
                    q[i] += c * self.design.x_full[(i, self.design_col(j, rho))];
                }
            }
            let mean: f64 = q.mean();
            alpha0 += mean;
            g_parts.push(q.add_scalar(-mean));
        }
        (alpha0, g_parts)
    }

    fn assemble(
        &self,
        y: &DVector<f64>,
        m_star_by_pos: Vec<DVector<f64>>,
        hat: Option<DMatrix<f64>>,
        iterations: usize,
        converged: bool,
        rel_changes: Vec<f64>,
        started: Instant,
    ) -> AdditiveFit {
        let (alpha0, g_parts) = self.decompose_parametric(y);
        let mut m_star = vec![DVector::zeros(self.n); self.dim];
        for (pos, &j) in self.smoothed.iter().enumerate() {
            m_star[j] = m_star_by_pos[pos].clone();
        }
        let m: Vec<DVector<f64>> =
            (0..self.dim).map(|j| &g_parts[j] + &m_star[j]).collect();
        let mut fitted = DVector::from_element(self.n, alpha0);
        for comp in &m {
            fitted += comp;
        }
        let residuals = y - &fitted;
        let rss = residuals.norm_squared();
        AdditiveFit {
            alpha0,
            g_parts,
            m_star,
            m,
            fitted,
            residuals,
            rss,
            hat,
            iterations,
            converged,
            rel_changes,
            concurvity: self.concurvity,
            elapsed: started.elapsed(),
        }
    }

    /// Gauss-Seidel cycle over the modified smoothers applied to the response
    /// with the parametric span projected out.
    pub fn fit_iterative(&self, y: &DVector<f64>) -> AdditiveFit {
        let started = Instant::now();
        let r = y - &self.g * y;
        let k = self.smoothed.len();
        let mut parts = vec![DVector::<f64>::zeros(self.n); k];
        let mut rel_changes = Vec::new();
        let mut converged = k == 0;
        let mut iterations = 0;
        'outer: for it in 0..self.spec.max_iter {
            iterations = it + 1;
            let mut worst: f64 = 0.0;
            for pos in 0..k {
                let mut resid = r.clone();
                for (other, part) in parts.iter().enumerate() {
                    if other != pos {
                        resid -= part;
                    }
                }
                let updated = self.modified[pos].as_ref() * resid;
                let denom = 1.0 + parts[pos].amax();
                let change = (&updated - &parts[pos]).amax() / denom;
                worst = worst.max(change);
                parts[pos] = updated;
            }
            rel_changes.push(worst);
            if worst < self.spec.tol {
                converged = true;
                break 'outer;
            }
        }
        self.assemble(y, parts, None, iterations, converged, rel_changes, started)
    }

    /// Operator bundle of the closed-form solution: the per-component maps
    /// T_j with m*_j = T_j G_perp y, and the hat matrix W.
    pub fn explicit_operators(&self) -> Result<ExplicitOperators> {
        let n = self.n;
        let identity = DMatrix::<f64>::identity(n, n);
        let mut a_list = Vec::with_capacity(self.smoothed.len());
        for (pos, s_mod) in self.modified.iter().enumerate() {
            let eigs = smoother::symmetric_eigenvalues_desc(s_mod);
            // The inverse below needs spectral radius strictly under one; a top
            // eigenvalue within 1e-9 of one leaves it numerically singular.
            if eigs[0] >= 1.0 - 1e-9 {
                return Err(Error::BandwidthTooSmall(format!(
                    "modified smoother for covariate {} has top eigenvalue {:.12} >= 1 - 1e-9",
                    self.smoothed[pos], eigs[0]
                )));
            }
            let lu = (&identity - s_mod.as_ref()).lu();
            let a = lu.solve(s_mod.as_ref()).ok_or_else(|| {
                Error::BandwidthTooSmall(format!(
                    "singular modified-smoother system for covariate {}",
                    self.smoothed[pos]
                ))
            })?;
            a_list.push(a);
        }
        let mut a_sum = DMatrix::<f64>::zeros(n, n);
        for a in &a_list {
            a_sum += a;
        }
        let g_perp = &identity - &self.g;
        let u = (&identity + &a_sum).lu().solve(&g_perp).ok_or_else(|| {
            Error::DegenerateFit("singular backfitting system".into())
        })?;
        // T_j maps y directly to the j-th nonparametric part.
        let component_maps: Vec<DMatrix<f64>> = a_list.iter().map(|a| a * &u).collect();
        let mut w = self.g.clone();
        for t in &component_maps {
            w += t;
        }
        Ok(ExplicitOperators { component_maps, hat: w })
    }

    /// Closed-form fit via the explicit operators.
    pub fn fit_explicit(&self, y: &DVector<f64>) -> Result<AdditiveFit> {
        let ops = self.explicit_operators()?;
        Ok(self.fit_with_operators(&ops, y))
    }

    /// Closed-form fit reusing precomputed operators.
    pub fn fit_with_operators(&self, ops: &ExplicitOperators, y: &DVector<f64>) -> AdditiveFit {
        let started = Instant::now();
        let parts: Vec<DVector<f64>> = ops.component_maps.iter().map(|t| t * y).collect();
        self.assemble(y, parts, Some(ops.hat.clone()), 0, true, Vec::new(), started)
    }

    pub fn smoothed_indices(&self) -> &[usize] {
        &self.smoothed
    }

    pub fn design_orders(&self) -> &[usize] {
        &self.design_orders
    }

    /// Linear map sending a response to the tested covariate's full component
    /// g_d + m*_d. Used to replay component fits across bootstrap replicates.
    pub fn component_operator(&self, covariate: usize) -> Result<DMatrix<f64>> {
        let ops = self.explicit_operators()?;
        Ok(self.component_operator_from(&ops, covariate))
    }

    pub fn component_operator_from(
        &self,
        ops: &ExplicitOperators,
        covariate: usize,
    ) -> DMatrix<f64> {
        let n = self.n;
        // Parametric part: coefficients are linear in y; the centered block of
        // covariate powers assembles into a matrix.
        let mut para = DMatrix::<f64>::zeros(n, n);
        for rho in 1..=self.design_orders[covariate] {
            let col_idx = self.design_col(covariate, rho);
            let col = self.design.x_full.column(col_idx);
            let mean = col.mean();
            let pinv_row = self.design_pinv.row(col_idx);
            for i in 0..n {
                let ci = col[i] - mean;
                for j in 0..n {
                    para[(i, j)] += ci * pinv_row[j];
                }
            }
        }
        if let Some(pos) = self.smoothed.iter().position(|&j| j == covariate) {
            para += &ops.component_maps[pos];
        }
        para
    }
}

/// Closed-form solution operators.
pub struct ExplicitOperators {
    /// Per smoothed covariate (in engine order): maps y to the nonparametric part.
    pub component_maps: Vec<DMatrix<f64>>,
    pub hat: DMatrix<f64>,
}

/// Fit by the iterative backfitting cycle.
pub fn fit_backfitting(data: &Dataset, spec: &ModelSpec) -> Result<AdditiveFit> {
    let engine = Engine::new(data, spec)?;
    Ok(engine.fit_iterative(data.y()))
}

/// Fit by the closed-form expressions, materializing the hat matrix.
pub fn fit_explicit(data: &Dataset, spec: &ModelSpec) -> Result<AdditiveFit> {
    let engine = Engine::new(data, spec)?;
    engine.fit_explicit(data.y())
}

/// Hat matrices of the unrestricted model and of the reduced model for the
/// tested covariate, fitted with the same bandwidths, together with both fits.
pub struct HatPair {
    pub full: AdditiveFit,
    pub reduced: AdditiveFit,
    pub w_full: DMatrix<f64>,
    pub w_reduced: DMatrix<f64>,
    pub rss_alt: f64,
    pub rss_null: f64,
    pub tested: usize,
    pub form: NullForm,
}

pub fn hat_matrices(
    data: &Dataset,
    spec: &ModelSpec,
    tested: usize,
    form: NullForm,
) -> Result<HatPair> {
    let engine = Engine::new(data, spec)?;
    let reduced_engine = Engine::reduced_from(&engine, data, tested, form)?;
    hat_matrices_from(&engine, &reduced_engine, data.y(), tested, form)
}

pub fn hat_matrices_from(
    engine: &Engine,
    reduced_engine: &Engine,
    y: &DVector<f64>,
    tested: usize,
    form: NullForm,
) -> Result<HatPair> {
    let full = engine.fit_explicit(y)?;
    let reduced = reduced_engine.fit_explicit(y)?;
    let w_full = full.hat.clone().expect("explicit fit has hat");
    let w_reduced = reduced.hat.clone().expect("explicit fit has hat");
    let rss_alt = full.rss;
    let rss_null = reduced.rss;
    Ok(HatPair { full, reduced, w_full, w_reduced, rss_alt, rss_null, tested, form })
}

/// Coefficient curves on an evaluation grid, one set per covariate. A missing
/// value marks a grid point whose local system was rank deficient.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridEstimates {
    /// Grid in scaled units, shared across covariates.
    pub grid: Vec<f64>,
    /// curves[j][r][k]: coefficient r of covariate j at grid point k.
    pub curves: Vec<Vec<Vec<Option<f64>>>>,
}

/// Local polynomial regression of each covariate's partial residual on the grid.
/// The partial residual keeps the covariate's own full component: the order-zero
/// coefficient tracks the component total g_j + m*_j.
pub fn grid_estimates(
    fit: &AdditiveFit,
    data: &Dataset,
    spec: &ModelSpec,
    grid: &[f64],
) -> GridEstimates {
    let n = data.n();
    let mut curves = Vec::with_capacity(data.dim());
    for j in 0..data.dim() {
        let mut resid = DVector::from_element(n, -fit.alpha0);
        resid += data.y();
        for (l, comp) in fit.m.iter().enumerate() {
            if l != j {
                resid -= comp;
            }
        }
        let x = data.scaled_col(j);
        let p = spec.orders[j];
        let mut coef: Vec<Vec<Option<f64>>> = vec![Vec::with_capacity(grid.len()); p + 1];
        for &z in grid {
            match smoother::local_poly_fit(&x, &resid, z, p, spec.bandwidths[j], &spec.kernel)
            {
                Ok(beta) => {
                    for (r, c) in coef.iter_mut().enumerate() {
                        c.push(Some(beta[r]));
                    }
                }
                Err(_) => {
                    for c in coef.iter_mut() {
                        c.push(None);
                    }
                }
            }
        }
        curves.push(coef);
    }
    GridEstimates { grid: grid.to_vec(), curves }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::{gen_sim_data, SimConfig};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sim_dataset(n: usize, seed: u64) -> Dataset {
        gen_sim_data(&SimConfig::alternative(n, 1.0, seed)).unwrap()
    }

    fn spec4(h: f64) -> ModelSpec {
        ModelSpec::local_linear(4, h, KernelSpec::gaussian())
    }

    #[test]
    fn constant_response_reduces_to_intercept() {
        let base = sim_dataset(80, 2);
        let data = base.with_response(DVector::from_element(80, 3.25));
        let fit = fit_backfitting(&data, &spec4(0.3)).unwrap();
        assert!((fit.alpha0 - 3.25).abs() < 1e-10);
        for j in 0..4 {
            assert!(fit.m[j].amax() < 1e-10, "component {j}");
        }
        assert!(fit.rss < 1e-18);
    }

    #[test]
    fn affine_response_is_parametric() {
        let base = sim_dataset(80, 6);
        let y = DVector::from_fn(80, |i, _| 1.0 - 2.0 * base.x_raw()[(i, 0)]);
        let data = base.with_response(y);
        let fit = fit_backfitting(&data, &spec4(0.3)).unwrap();
        for j in 0..4 {
            assert!(fit.m_star[j].amax() < 1e-9, "nonparametric part {j} not zero");
        }
        assert!(fit.residuals.amax() < 1e-9);
    }

    #[test]
    fn explicit_matches_iterative_on_simulated_data() {
        let data = sim_dataset(200, 5);
        let spec = spec4(0.25);
        let engine = Engine::new(&data, &spec).unwrap();
        let explicit = engine.fit_explicit(data.y()).unwrap();
        let iterative = engine.fit_iterative(data.y());
        assert!(iterative.converged);
        assert!(iterative.iterations <= 50);
        for j in 0..4 {
            let diff = (&explicit.m_star[j] - &iterative.m_star[j]).amax();
            assert!(diff < 1e-6, "component {j}: {diff}");
        }
        // Identifiability and the orthogonality that identifies the split.
        for j in 0..4 {
            assert!(explicit.m[j].mean().abs() < 1e-9);
            assert!(iterative.m[j].mean().abs() < 1e-9);
        }
    }

    #[test]
    fn fitted_values_equal_hat_action_and_reproduce_design() {
        let data = sim_dataset(120, 9);
        let spec = spec4(0.3);
        let fit = fit_explicit(&data, &spec).unwrap();
        let w = fit.hat.as_ref().unwrap();
        let wy = w * data.y();
        assert!((&wy - &fit.fitted).amax() < 1e-8);
        // Intercept reproduced: W 1 = 1.
        let ones = DVector::from_element(data.n(), 1.0);
        assert!((w * &ones - &ones).amax() < 1e-8);
        // Residuals sum to zero and each nonparametric part is orthogonal to
        // its own covariate's polynomial block; cross-covariate columns keep
        // finite-sample correlation with the other components, so the full
        // design is not orthogonal to the residuals.
        let resid = data.y() - &wy;
        assert!(resid.sum().abs() / (data.n() as f64) < 1e-10);
        let ds = design::build_design(data.x_scaled(), &spec.orders, None).unwrap();
        for j in 0..4 {
            let t = ds.x_j[j].transpose() * &fit.m_star[j];
            assert!(t.amax() / (data.n() as f64) < 1e-10, "own-block orthogonality {j}");
        }
        // The parametric part agrees with a dense least-squares oracle.
        let gram = ds.x_full.transpose() * &ds.x_full;
        let beta = gram.lu().solve(&(ds.x_full.transpose() * data.y())).unwrap();
        let ls_fit = &ds.x_full * beta;
        let mut para = DVector::from_element(data.n(), fit.alpha0);
        for g in &fit.g_parts {
            para += g;
        }
        assert!((&para - &ls_fit).amax() < 1e-8);
    }

    #[test]
    fn modified_system_solved_and_projections_vanish() {
        // The cycle's stationarity condition: m*_j = (H_j - G_j)(G_perp y - sum_{l != j} m*_l).
        let data = sim_dataset(150, 11);
        let spec = spec4(0.25);
        let engine = Engine::new(&data, &spec).unwrap();
        let fit = engine.fit_explicit(data.y()).unwrap();
        let y = data.y();
        let gy = &engine.g * y;
        let r = y - &gy;
        let ynorm = y.norm();
        for (pos, &j) in engine.smoothed.iter().enumerate() {
            let mut resid = r.clone();
            for (opos, &l) in engine.smoothed.iter().enumerate() {
                if l != j {
                    resid -= &fit.m_star[engine.smoothed[opos]];
                }
            }
            let implied = engine.modified[pos].as_ref() * resid;
            let gap = (&implied - &fit.m_star[j]).norm();
            assert!(gap < 1e-6 * ynorm, "component {j}: {gap}");
            // The polynomial projection of the own nonparametric part vanishes.
            let mut cols = vec![DVector::from_element(data.n(), 1.0)];
            for rr in 1..=spec.orders[j] {
                cols.push(DVector::from_fn(data.n(), |i, _| {
                    data.x_scaled()[(i, j)].powi(rr as i32)
                }));
            }
            let gj = design::projection(&DMatrix::from_columns(&cols), 1e-10);
            assert!((gj * &fit.m_star[j]).amax() < 1e-7);
        }
    }

    #[test]
    fn cycle_changes_eventually_decrease() {
        let data = sim_dataset(150, 13);
        let fit = fit_backfitting(&data, &spec4(0.2)).unwrap();
        assert!(fit.converged);
        let ch = &fit.rel_changes;
        assert!(ch.len() >= 5, "converged too fast to check: {}", ch.len());
        for w in ch[ch.len() - 5..].windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12), "changes not decreasing: {w:?}");
        }
    }

    #[test]
    fn update_order_invariance_at_convergence() {
        let data = sim_dataset(120, 17);
        let mut spec = spec4(0.25);
        spec.tol = 1e-10;
        let fit = fit_backfitting(&data, &spec).unwrap();
        // Permute covariate order; the cycle visits them in the permuted order.
        let perm = [2usize, 0, 3, 1];
        let xp = DMatrix::from_fn(data.n(), 4, |i, j| data.x_raw()[(i, perm[j])]);
        let datap = Dataset::new(data.y().clone(), xp, vec![]).unwrap();
        let fitp = fit_backfitting(&datap, &spec).unwrap();
        for (jp, &j) in perm.iter().enumerate() {
            let diff = (&fit.m_star[j] - &fitp.m_star[jp]).amax();
            assert!(diff < 10.0 * spec.tol.max(1e-9), "component {j}: {diff}");
        }
    }

    #[test]
    fn hat_pair_identities() {
        let data = sim_dataset(150, 23);
        let spec = spec4(0.25);
        let pair = hat_matrices(&data, &spec, 1, NullForm::Omit).unwrap();
        let y = data.y();
        let n = data.n();
        let id = DMatrix::<f64>::identity(n, n);
        let a1 = (&id - &pair.w_reduced).transpose() * (&id - &pair.w_reduced);
        let a2 = (&id - &pair.w_full).transpose() * (&id - &pair.w_full);
        let quad = (y.transpose() * (&a1 - &a2) * y)[(0, 0)];
        let dr = pair.rss_null - pair.rss_alt;
        assert!((quad - dr).abs() < 1e-8 * dr.abs().max(1.0));

        // The reduced hat matrix never looks at the tested covariate.
        let mut xr = data.x_raw().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for i in 0..n {
            xr[(i, 1)] = rng.gen_range(-0.99..0.99);
        }
        let data2 = Dataset::new(y.clone(), xr, vec![]).unwrap();
        let engine2 = Engine::new(&data2, &spec).unwrap();
        let reduced2 = Engine::reduced_from(&engine2, &data2, 1, NullForm::Omit).unwrap();
        let pair2 = hat_matrices_from(&engine2, &reduced2, y, 1, NullForm::Omit).unwrap();
        let dw = (&pair.w_reduced - &pair2.w_reduced).amax();
        assert!(dw < 1e-10, "reduced hat depends on tested covariate: {dw}");
    }

    #[test]
    fn reduced_fit_close_under_pure_noise_component() {
        // When the tested covariate never enters the truth, dropping it moves
        // fitted values only a little.
        let data = gen_sim_data(&SimConfig::null_model(200, 29)).unwrap();
        let spec = spec4(0.25);
        let pair = hat_matrices(&data, &spec, 1, NullForm::Omit).unwrap();
        let diff = &pair.full.fitted - &pair.reduced.fitted;
        let msd = diff.norm_squared() / (data.n() as f64);
        let y = data.y();
        let var_y = {
            let m = y.mean();
            y.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / data.n() as f64
        };
        assert!(msd < 0.05 * var_y, "msd {msd} vs var {var_y}");
    }

    #[test]
    fn polynomial_null_keeps_parametric_columns() {
        let data = sim_dataset(150, 37);
        let spec = spec4(0.25);
        let pair = hat_matrices(&data, &spec, 3, NullForm::Polynomial(1)).unwrap();
        // Reduced fit has no nonparametric part for the tested covariate but a
        // nonzero parametric one.
        assert!(pair.reduced.m_star[3].amax() < 1e-12);
        assert!(pair.reduced.g_parts[3].amax() > 1e-3);
        assert!(pair.rss_null >= pair.rss_alt - 1e-8);
    }

    #[test]
    fn grid_estimates_behaviour() {
        let data = sim_dataset(200, 41);
        let spec = spec4(0.25);
        let fit = fit_explicit(&data, &spec).unwrap();
        let grid: Vec<f64> = (0..41).map(|k| k as f64 / 40.0).collect();
        let est = grid_estimates(&fit, &data, &spec, &grid);
        assert_eq!(est.curves.len(), 4);
        // Order-zero curve tracks the component total at nearby sample points.
        let j = 1usize;
        let x = data.scaled_col(j);
        let mut max_gap = 0.0f64;
        for i in 0..data.n() {
            // nearest grid point
            let k = ((x[i] * 40.0).round() as usize).min(40);
            if let Some(b0) = est.curves[j][0][k] {
                max_gap = max_gap.max((b0 - fit.m[j][i]).abs());
            }
        }
        // Within a couple of smoothing scales of the component values.
        assert!(max_gap < 0.5, "grid curve far from component: {max_gap}");
    }

    #[test]
    fn grid_estimates_affine_slope_and_single_covariate() {
        let base = sim_dataset(100, 43);
        let y = DVector::from_fn(100, |i, _| 0.5 + 2.0 * base.x_raw()[(i, 0)]);
        let data = base.with_response(y);
        let spec = spec4(0.3);
        let fit = fit_explicit(&data, &spec).unwrap();
        let grid: Vec<f64> = (1..=9).map(|k| k as f64 / 10.0).collect();
        let est = grid_estimates(&fit, &data, &spec, &grid);
        // Slope constant across the grid in scaled units: 2.0 * range of x1.
        let want = 2.0 * (data.map(0).range);
        for v in &est.curves[0][1] {
            let got = v.unwrap();
            assert!((got - want).abs() < 1e-6 * want.abs().max(1.0), "{got} vs {want}");
        }

        // Single covariate: the partial-residual sum is empty, so the curve is
        // one local regression of the centered response.
        let x1 = DMatrix::from_fn(100, 1, |i, _| base.x_raw()[(i, 0)]);
        let data1 = Dataset::new(data.y().clone(), x1, vec![]).unwrap();
        let spec1 = ModelSpec::local_linear(1, 0.3, KernelSpec::gaussian());
        let fit1 = fit_explicit(&data1, &spec1).unwrap();
        let est1 = grid_estimates(&fit1, &data1, &spec1, &grid);
        let xs = data1.scaled_col(0);
        let resid = data1.y().add_scalar(-fit1.alpha0);
        for (k, &z) in grid.iter().enumerate() {
            let beta =
                smoother::local_poly_fit(&xs, &resid, z, 1, 0.3, &spec1.kernel).unwrap();
            assert!((est1.curves[0][0][k].unwrap() - beta[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn component_operator_reproduces_component() {
        let data = sim_dataset(120, 47);
        let spec = spec4(0.3);
        let engine = Engine::new(&data, &spec).unwrap();
        let fit = engine.fit_explicit(data.y()).unwrap();
        for j in 0..4 {
            let op = engine.component_operator(j).unwrap();
            let comp = &op * data.y();
            assert!((&comp - &fit.m[j]).amax() < 1e-9, "component {j}");
        }
    }
}
