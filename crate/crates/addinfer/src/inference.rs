//! Test matrices, the likelihood-ratio / loss-function / F-type / component-norm
//! statistics, their scaling constants, asymptotic p-values, and the
//! relative-efficiency diagnostic of the loss-function test over the
//! likelihood-ratio test.

use crate::backfit::HatPair;
use crate::error::{Error, Result};
use crate::kernel::KernelSpec;
use crate::quad;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, FisherSnedecor};

/// Statistic identifiers, used for report fields and CSV columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatKind {
    Glr,
    Lf,
    FGlr,
    FLf,
    Sb,
}

impl StatKind {
    pub const ALL: [StatKind; 5] =
        [StatKind::Glr, StatKind::Lf, StatKind::FGlr, StatKind::FLf, StatKind::Sb];

    pub fn as_str(&self) -> &'static str {
        match self {
            StatKind::Glr => "glr",
            StatKind::Lf => "lf",
            StatKind::FGlr => "f_glr",
            StatKind::FLf => "f_lf",
            StatKind::Sb => "sb",
        }
    }
}

/// Values of all statistics for one response realization.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, Default)]
pub struct StatValues {
    pub glr: f64,
    pub lf: f64,
    pub f_glr: f64,
    pub f_lf: f64,
    pub sb: f64,
}

impl StatValues {
    pub fn get(&self, kind: StatKind) -> f64 {
        match kind {
            StatKind::Glr => self.glr,
            StatKind::Lf => self.lf,
            StatKind::FGlr => self.f_glr,
            StatKind::FLf => self.f_lf,
            StatKind::Sb => self.sb,
        }
    }
}

/// The quadratic-form matrices of the tests, computed exactly from the hat
/// matrices of the two nested fits.
#[derive(Debug, Clone)]
pub struct TestMatrices {
    /// Difference of residual Gram matrices; y'Cy = RSS0 - RSS1 exactly.
    pub c: DMatrix<f64>,
    /// Residual Gram matrix of the unrestricted model: (I-W)'(I-W).
    pub d: DMatrix<f64>,
    /// Fitted-value difference map W - W_reduced.
    pub e: DMatrix<f64>,
    /// Cached E'E.
    pub ete: DMatrix<f64>,
}

pub fn test_matrices(w_full: &DMatrix<f64>, w_reduced: &DMatrix<f64>) -> Result<TestMatrices> {
    let n = w_full.nrows();
    if w_full.shape() != (n, n) || w_reduced.shape() != (n, n) {
        return Err(Error::IncompatibleFits(format!(
            "hat matrix shapes {:?} and {:?}",
            w_full.shape(),
            w_reduced.shape()
        )));
    }
    let id = DMatrix::<f64>::identity(n, n);
    let r_full = &id - w_full;
    let r_red = &id - w_reduced;
    let d = r_full.transpose() * &r_full;
    let a1 = r_red.transpose() * &r_red;
    let c = &a1 - &d;
    let e = w_full - w_reduced;
    let ete = e.transpose() * &e;
    Ok(TestMatrices { c, d, e, ete })
}

/// LINEX loss family d(z) = (t/s^2)(exp(sz) - 1 - sz); the shape s controls
/// asymmetry and the quadratic limit at s = 0 is t z^2 / 2.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossSpec {
    pub shape: f64,
    pub scale: f64,
}

impl LossSpec {
    pub fn linex(shape: f64, scale: f64) -> Result<Self> {
        if scale <= 0.0 {
            return Err(Error::Input(format!("loss scale {scale} must be positive")));
        }
        Ok(LossSpec { shape, scale })
    }

    /// Half the curvature at zero: d''(0)/2 = t/2.
    pub fn curvature(&self) -> f64 {
        self.scale / 2.0
    }

    /// Loss value; the near-zero region of s z is evaluated by series for
    /// stability and s = 0 exactly as the quadratic limit.
    pub fn eval(&self, z: f64) -> f64 {
        linex(self, z)
    }
}

impl Default for LossSpec {
    fn default() -> Self {
        LossSpec { shape: 0.0, scale: 1.0 }
    }
}

pub fn linex(loss: &LossSpec, z: f64) -> f64 {
    let (s, t) = (loss.shape, loss.scale);
    let sz = s * z;
    if s == 0.0 || sz.abs() < 1e-4 {
        // Fourth-order series in sz: (t/s^2)(exp(sz)-1-sz) = t z^2/2 (1 + sz/3 + (sz)^2/12).
        t * z * z / 2.0 * (1.0 + sz / 3.0 + sz * sz / 12.0)
    } else {
        t / (s * s) * (sz.exp() - 1.0 - sz)
    }
}

/// Likelihood-ratio statistic in its two algebraic forms.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GlrValue {
    /// (n/2) log(RSS0/RSS1), the reported statistic.
    pub log_form: f64,
    /// (n/2)(RSS0 - RSS1)/RSS1, the form entering the F-statistic identity.
    pub ratio_form: f64,
}

pub fn glr_statistic(rss0: f64, rss1: f64, n: usize) -> Result<GlrValue> {
    if !(rss0 > 0.0 && rss1 > 0.0) {
        return Err(Error::DegenerateFit(format!(
            "nonpositive residual sums rss0 = {rss0}, rss1 = {rss1}"
        )));
    }
    let half_n = n as f64 / 2.0;
    Ok(GlrValue {
        log_form: half_n * (rss0 / rss1).ln(),
        ratio_form: half_n * (rss0 - rss1) / rss1,
    })
}

/// Loss-function statistic: the summed loss of the fitted-value differences
/// normalized by RSS1/n.
pub fn lf_statistic(
    fitted_alt: &DVector<f64>,
    fitted_null: &DVector<f64>,
    rss1: f64,
    loss: &LossSpec,
) -> Result<f64> {
    if rss1 <= 0.0 {
        return Err(Error::DegenerateFit("nonpositive alternative RSS".into()));
    }
    let n = fitted_alt.len();
    let mut q = 0.0;
    for i in 0..n {
        let z = fitted_alt[i] - fitted_null[i];
        let v = linex(loss, z);
        if !v.is_finite() {
            return Err(Error::LossOverflow { index: i, value: z });
        }
        q += v;
    }
    Ok(q / (rss1 / n as f64))
}

/// The two F-type statistics from the quadratic forms of C, D, and E'E.
pub fn f_statistics(y: &DVector<f64>, tm: &TestMatrices) -> Result<(f64, f64)> {
    let tr_c = tm.c.trace();
    let tr_d = tm.d.trace();
    let tr_ete = tm.ete.trace();
    if tr_c.abs() < 1e-10 || tr_ete.abs() < 1e-10 {
        return Err(Error::DegenerateTest(format!(
            "zero-trace test matrix: tr(C) = {tr_c:.3e}, tr(E'E) = {tr_ete:.3e}"
        )));
    }
    let y_c_y = (y.transpose() * &tm.c * y)[(0, 0)];
    let y_d_y = (y.transpose() * &tm.d * y)[(0, 0)];
    let y_ete_y = (y.transpose() * &tm.ete * y)[(0, 0)];
    if y_d_y <= 0.0 {
        return Err(Error::DegenerateFit("nonpositive alternative RSS".into()));
    }
    Ok((y_c_y / y_d_y * (tr_d / tr_c), y_ete_y / y_d_y * (tr_d / tr_ete)))
}

/// Riemann approximation of the integrated squared component weighted by a
/// kernel density estimate of the covariate, over the ordered sample.
///
/// `x` and `component` are parallel sample vectors (any order); `density_bandwidth`
/// is in the same units as `x`. Tied covariate values contribute zero-width terms.
pub fn sb_statistic(
    x: &DVector<f64>,
    component: &DVector<f64>,
    density_bandwidth: f64,
    kernel: &KernelSpec,
) -> Result<f64> {
    if density_bandwidth <= 0.0 {
        return Err(Error::InvalidBandwidth(density_bandwidth));
    }
    let n = x.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).unwrap());
    // Kernel density estimate at the ordered points.
    let mut s = 0.0;
    let mut prev = x[order[0]];
    for &i in &order {
        let xi = x[i];
        let mut f = 0.0;
        for l in 0..n {
            f += kernel.scaled(density_bandwidth, xi - x[l])?;
        }
        f /= n as f64;
        s += component[i] * component[i] * f * (xi - prev);
        prev = xi;
    }
    Ok(s)
}

/// Location and spread constants of the scaled null laws, computed from the
/// exact test matrices, and the loss curvature.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ScalingConstants {
    /// Location of the likelihood-ratio statistic: tr(C)/2.
    pub mu_n: f64,
    /// Spread^2: sum of squared above-diagonal entries of C.
    pub sigma_n2: f64,
    /// 2 mu_n / sigma_n^2.
    pub r_k: f64,
    /// Location of the loss statistic: tr(E'E).
    pub nu_n: f64,
    /// Spread^2: sum of squared off-diagonal entries of E'E.
    pub delta_n2: f64,
    /// 2 nu_n / delta_n^2.
    pub s_k: f64,
    /// Loss curvature d''(0)/2.
    pub loss_curvature: f64,
}

pub fn scaling_constants(tm: &TestMatrices, loss: &LossSpec) -> Result<ScalingConstants> {
    let n = tm.c.nrows();
    let mu_n = tm.c.trace() / 2.0;
    let mut sigma_n2 = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            sigma_n2 += tm.c[(i, j)] * tm.c[(i, j)];
        }
    }
    let nu_n = tm.ete.trace();
    let mut delta_n2 = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                delta_n2 += tm.ete[(i, j)] * tm.ete[(i, j)];
            }
        }
    }
    if sigma_n2 <= 0.0 || delta_n2 <= 0.0 {
        return Err(Error::DegenerateTest(format!(
            "zero spread constants: sigma^2 = {sigma_n2:.3e}, delta^2 = {delta_n2:.3e}"
        )));
    }
    Ok(ScalingConstants {
        mu_n,
        sigma_n2,
        r_k: 2.0 * mu_n / sigma_n2,
        nu_n,
        delta_n2,
        s_k: 2.0 * nu_n / delta_n2,
        loss_curvature: loss.curvature(),
    })
}

/// Asymptotic p-values, upper tail. The component-norm statistic has no
/// asymptotic reference law here and is bootstrap-only.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AsymptoticPValues {
    pub glr: f64,
    pub lf: f64,
    pub f_glr: f64,
    pub f_lf: f64,
}

fn chi2_upper(x: f64, df: f64) -> Result<f64> {
    if !(df > 0.0) {
        return Err(Error::DegenerateTest(format!("nonpositive chi-square df {df}")));
    }
    let dist = ChiSquared::new(df)
        .map_err(|e| Error::DegenerateTest(format!("chi-square df {df}: {e}")))?;
    Ok(1.0 - dist.cdf(x.max(0.0)))
}

fn f_upper(x: f64, df1: f64, df2: f64) -> Result<f64> {
    if !(df1 > 0.0 && df2 > 0.0) {
        return Err(Error::DegenerateTest(format!("nonpositive F df ({df1}, {df2})")));
    }
    let dist = FisherSnedecor::new(df1, df2)
        .map_err(|e| Error::DegenerateTest(format!("F df ({df1}, {df2}): {e}")))?;
    Ok(1.0 - dist.cdf(x.max(0.0)))
}

pub fn asymptotic_pvalues(
    stats: &StatValues,
    constants: &ScalingConstants,
    tm: &TestMatrices,
) -> Result<AsymptoticPValues> {
    let m = constants.loss_curvature;
    Ok(AsymptoticPValues {
        glr: chi2_upper(constants.r_k * stats.glr, constants.r_k * constants.mu_n)?,
        lf: chi2_upper(constants.s_k * stats.lf / m, constants.s_k * constants.nu_n)?,
        f_glr: f_upper(stats.f_glr, tm.c.trace(), tm.d.trace())?,
        f_lf: f_upper(stats.f_lf, tm.ete.trace(), tm.d.trace())?,
    })
}

/// Everything the `test` workflow reports for one tested component.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TestReport {
    pub n: usize,
    pub tested: usize,
    pub rss_null: f64,
    pub rss_alt: f64,
    pub glr_log: f64,
    pub glr_ratio: f64,
    pub statistics: StatValues,
    pub constants: ScalingConstants,
    pub df_chi2_glr: f64,
    pub df_chi2_lf: f64,
    pub df_f_glr: (f64, f64),
    pub df_f_lf: (f64, f64),
    pub p_asymptotic: AsymptoticPValues,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_bootstrap: Option<crate::bootstrap::BootstrapPValues>,
}

/// The statistic bundle for one response under precomputed hat matrices; the
/// bootstrap replays this on resampled responses.
pub struct StatContext<'a> {
    pub tm: &'a TestMatrices,
    pub loss: LossSpec,
    /// Tested covariate in scaled units with its KDE bandwidth.
    pub x_tested: &'a DVector<f64>,
    pub density_bandwidth: f64,
    pub kernel: KernelSpec,
    /// Map from a response to the tested component (null-form adjusted).
    pub component_map: &'a DMatrix<f64>,
    pub w_full: &'a DMatrix<f64>,
    pub w_reduced: &'a DMatrix<f64>,
    /// Kernel density values at the sorted sample, precomputable.
    pub density_at_sorted: &'a [f64],
    pub sorted_order: &'a [usize],
}

impl StatContext<'_> {
    /// All five statistics for a response vector, using matrix-vector work only.
    pub fn evaluate(&self, y: &DVector<f64>) -> Result<StatValues> {
        let n = y.len();
        let fitted_alt = self.w_full * y;
        let fitted_null = self.w_reduced * y;
        let rss1 = (y - &fitted_alt).norm_squared();
        let rss0 = (y - &fitted_null).norm_squared();
        let glr = glr_statistic(rss0, rss1, n)?;
        let lf = lf_statistic(&fitted_alt, &fitted_null, rss1, &self.loss)?;
        let diff = &fitted_alt - &fitted_null;
        let tr_c = self.tm.c.trace();
        let tr_d = self.tm.d.trace();
        let tr_ete = self.tm.ete.trace();
        let f_glr = (rss0 - rss1) / rss1 * (tr_d / tr_c);
        let f_lf = diff.norm_squared() / rss1 * (tr_d / tr_ete);
        // Component-norm statistic from the null-form adjusted component.
        let comp = self.component_map * y;
        let mut sb = 0.0;
        let mut prev = self.x_tested[self.sorted_order[0]];
        for (pos, &i) in self.sorted_order.iter().enumerate() {
            let xi = self.x_tested[i];
            sb += comp[i] * comp[i] * self.density_at_sorted[pos] * (xi - prev);
            prev = xi;
        }
        Ok(StatValues { glr: glr.log_form, lf, f_glr, f_lf, sb })
    }
}

/// Asymptotic relative efficiency of the loss-function test over the
/// likelihood-ratio test for order-zero components, as a function of the
/// bandwidth-rate exponent. Evaluated by nested quadrature over the kernel
/// self-convolution.
pub fn are_lf_glr(kernel: &KernelSpec, omega: f64) -> Result<f64> {
    if !(omega > 0.0 && omega < 0.2) {
        return Err(Error::Input(format!("bandwidth exponent {omega} outside (0, 1/5)")));
    }
    let coarse = are_base_ratio(kernel, 2048)?;
    let fine = are_base_ratio(kernel, 4096)?;
    if (fine - coarse).abs() > 1e-6 * fine.abs() {
        return Err(Error::QuadratureFailure(format!(
            "base ratio unstable under refinement: {coarse} vs {fine}"
        )));
    }
    Ok(fine.powf(1.0 / (2.0 - 3.0 * omega)))
}

/// The ratio inside the efficiency formula at a given interpolation-table
/// resolution, exposed for refinement checks.
pub fn are_base_ratio(kernel: &KernelSpec, table_size: usize) -> Result<f64> {
    let r = kernel.support_radius();
    let conv = ConvTable::build(kernel, table_size);
    // Inner smooth g(u) = int conv2(u+v) conv2(v) dv over the support of conv2.
    let g = |u: f64| {
        let f = |v: f64| conv.at(u + v) * conv.at(v);
        quad::integrate(&f, -2.0 * r, 2.0 * r, 512)
    };
    let num_f = |u: f64| {
        let t = 2.0 * conv.at(u) - g(u);
        t * t
    };
    let den_f = |u: f64| {
        let t = g(u);
        t * t
    };
    let num = quad::integrate(&num_f, -4.0 * r, 4.0 * r, 1024);
    let den = quad::integrate(&den_f, -4.0 * r, 4.0 * r, 1024);
    if den <= 0.0 {
        return Err(Error::QuadratureFailure("vanishing denominator integral".into()));
    }
    Ok(num / den)
}

/// Dense table of the kernel self-convolution with cubic interpolation.
struct ConvTable {
    lo: f64,
    step: f64,
    values: Vec<f64>,
}

impl ConvTable {
    fn build(kernel: &KernelSpec, size: usize) -> Self {
        let r = kernel.support_radius();
        let lo = -2.0 * r;
        let hi = 2.0 * r;
        let step = (hi - lo) / size as f64;
        let values: Vec<f64> =
            (0..=size).map(|k| kernel.convolution(0, 0, lo + k as f64 * step)).collect();
        ConvTable { lo, step, values }
    }

    /// Catmull-Rom interpolation; zero outside the table.
    fn at(&self, u: f64) -> f64 {
        let pos = (u - self.lo) / self.step;
        if pos <= 0.0 || pos >= (self.values.len() - 1) as f64 {
            return 0.0;
        }
        let k = pos.floor() as usize;
        let t = pos - k as f64;
        let pm1 = self.values[k.saturating_sub(1)];
        let p0 = self.values[k];
        let p1 = self.values[k + 1];
        let p2 = self.values[(k + 2).min(self.values.len() - 1)];
        let a = -0.5 * pm1 + 1.5 * p0 - 1.5 * p1 + 0.5 * p2;
        let b = pm1 - 2.5 * p0 + 2.0 * p1 - 0.5 * p2;
        let c = -0.5 * pm1 + 0.5 * p1;
        ((a * t + b) * t + c) * t + p0
    }
}
