//! Conditional bootstrap null distributions and p-values.
//!
//! The procedure fixes the bandwidths, fits the restricted and unrestricted
//! models once, resamples centered unrestricted-model residuals onto the
//! restricted fitted values, and replays all statistics on each synthetic
//! response. Hat matrices depend only on the covariates and bandwidths, so a
//! replicate costs matrix-vector work.

use crate::backfit::{Engine, ModelSpec, NullForm};
use crate::data::Dataset;
use crate::design;
use crate::error::{Error, Result};
use crate::inference::{
    self, AsymptoticPValues, LossSpec, ScalingConstants, StatContext, StatKind, StatValues,
    TestMatrices, TestReport,
};
use crate::kernel::KernelSpec;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicUsize, Ordering};

/// Bootstrap execution plan.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootstrapPlan {
    /// Replicate count B.
    pub replicates: usize,
    /// Master seed; replicate l draws from stream l of this seed.
    pub seed: u64,
    /// Statistics to resolve; others keep empty null samples.
    pub statistics: Vec<StatKind>,
    pub loss: LossSpec,
    /// Emit progress lines on stderr.
    pub progress: bool,
}

impl BootstrapPlan {
    pub fn new(replicates: usize, seed: u64) -> Self {
        BootstrapPlan {
            replicates,
            seed,
            statistics: StatKind::ALL.to_vec(),
            loss: LossSpec::default(),
            progress: false,
        }
    }
}

/// Per-statistic bootstrap p-values; a missing value means the statistic was
/// not requested.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, Default)]
pub struct BootstrapPValues {
    pub glr: Option<f64>,
    pub lf: Option<f64>,
    pub f_glr: Option<f64>,
    pub f_lf: Option<f64>,
    pub sb: Option<f64>,
}

impl BootstrapPValues {
    pub fn get(&self, kind: StatKind) -> Option<f64> {
        match kind {
            StatKind::Glr => self.glr,
            StatKind::Lf => self.lf,
            StatKind::FGlr => self.f_glr,
            StatKind::FLf => self.f_lf,
            StatKind::Sb => self.sb,
        }
    }

    fn set(&mut self, kind: StatKind, v: f64) {
        match kind {
            StatKind::Glr => self.glr = Some(v),
            StatKind::Lf => self.lf = Some(v),
            StatKind::FGlr => self.f_glr = Some(v),
            StatKind::FLf => self.f_lf = Some(v),
            StatKind::Sb => self.sb = Some(v),
        }
    }
}

/// Null samples and p-values of one bootstrap run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub replicates: usize,
    pub seed: u64,
    pub observed: StatValues,
    /// Null samples per statistic, replicate-ordered; empty when not requested.
    pub null_samples: Vec<(StatKind, Vec<f64>)>,
    pub p_values: BootstrapPValues,
    pub failures: usize,
}

/// Precomputed state for testing one component of one dataset: both fits, the
/// exact test matrices, scaling constants, and the linear maps the bootstrap
/// replays on synthetic responses.
pub struct TestSession {
    pub n: usize,
    pub tested: usize,
    pub form: NullForm,
    pub loss: LossSpec,
    pub rss_alt: f64,
    pub rss_null: f64,
    pub fitted_alt: DVector<f64>,
    pub fitted_null: DVector<f64>,
    pub residuals_alt: DVector<f64>,
    pub tm: TestMatrices,
    pub constants: ScalingConstants,
    pub observed: StatValues,
    pub glr_log: f64,
    pub glr_ratio: f64,
    w_full: DMatrix<f64>,
    w_reduced: DMatrix<f64>,
    component_map: DMatrix<f64>,
    x_tested: DVector<f64>,
    density_bandwidth: f64,
    kernel: KernelSpec,
    sorted_order: Vec<usize>,
    density_at_sorted: Vec<f64>,
}

impl TestSession {
    pub fn new(
        data: &Dataset,
        spec: &ModelSpec,
        tested: usize,
        form: NullForm,
        loss: LossSpec,
    ) -> Result<Self> {
        let engine = Engine::new(data, spec)?;
        let reduced = Engine::reduced_from(&engine, data, tested, form)?;
        Self::from_engines(&engine, &reduced, data, spec, tested, form, loss)
    }

    pub fn from_engines(
        engine: &Engine,
        reduced: &Engine,
        data: &Dataset,
        spec: &ModelSpec,
        tested: usize,
        form: NullForm,
        loss: LossSpec,
    ) -> Result<Self> {
        let y = data.y();
        let n = data.n();
        let ops_full = engine.explicit_operators()?;
        let ops_reduced = reduced.explicit_operators()?;
        let fit_full = engine.fit_with_operators(&ops_full, y);
        let fit_reduced = reduced.fit_with_operators(&ops_reduced, y);
        let w_full = ops_full.hat.clone();
        let w_reduced = ops_reduced.hat.clone();
        let tm = inference::test_matrices(&w_full, &w_reduced)?;
        let constants = inference::scaling_constants(&tm, &loss)?;

        // Component map, adjusted for the null form: the part of the tested
        // component the null does not allow.
        let raw_map = engine.component_operator_from(&ops_full, tested);
        let component_map = match form {
            NullForm::Omit => raw_map,
            NullForm::Polynomial(k) => {
                let x = data.scaled_col(tested);
                let mut cols = vec![DVector::from_element(n, 1.0)];
                for r in 1..=k {
                    cols.push(DVector::from_fn(n, |i, _| x[i].powi(r as i32)));
                }
                let q = design::projection(&DMatrix::from_columns(&cols), 1e-10);
                // Centered projection of the component onto the allowed space.
                let proj = &q * &raw_map;
                let mut centered = proj.clone();
                for j in 0..n {
                    let mean = proj.column(j).mean();
                    for i in 0..n {
                        centered[(i, j)] -= mean;
                    }
                }
                raw_map - centered
            }
        };

        let x_tested = data.scaled_col(tested);
        let mut sorted_order: Vec<usize> = (0..n).collect();
        sorted_order.sort_by(|&a, &b| x_tested[a].partial_cmp(&x_tested[b]).unwrap());
        // Gaussian density estimate with the component's own bandwidth, at the
        // ordered sample points.
        let kde_kernel = KernelSpec::gaussian();
        let density_bandwidth = spec.bandwidths[tested];
        let density_at_sorted: Vec<f64> = sorted_order
            .iter()
            .map(|&i| {
                let mut f = 0.0;
                for l in 0..n {
                    f += kde_kernel.scaled(density_bandwidth, x_tested[i] - x_tested[l])?;
                }
                Ok(f / n as f64)
            })
            .collect::<Result<_>>()?;

        let mut session = TestSession {
            n,
            tested,
            form,
            loss,
            rss_alt: fit_full.rss,
            rss_null: fit_reduced.rss,
            fitted_alt: fit_full.fitted.clone(),
            fitted_null: fit_reduced.fitted.clone(),
            residuals_alt: fit_full.residuals.clone(),
            tm,
            constants,
            observed: StatValues::default(),
            glr_log: 0.0,
            glr_ratio: 0.0,
            w_full,
            w_reduced,
            component_map,
            x_tested,
            density_bandwidth,
            kernel: spec.kernel,
            sorted_order,
            density_at_sorted,
        };
        session.observed = session.context().evaluate(y)?;
        let glr = inference::glr_statistic(session.rss_null, session.rss_alt, n)?;
        session.glr_log = glr.log_form;
        session.glr_ratio = glr.ratio_form;
        Ok(session)
    }

    fn context(&self) -> StatContext<'_> {
        StatContext {
            tm: &self.tm,
            loss: self.loss,
            x_tested: &self.x_tested,
            density_bandwidth: self.density_bandwidth,
            kernel: self.kernel,
            component_map: &self.component_map,
            w_full: &self.w_full,
            w_reduced: &self.w_reduced,
            density_at_sorted: &self.density_at_sorted,
            sorted_order: &self.sorted_order,
        }
    }

    /// Statistics for an arbitrary response under the fixed design and bandwidths.
    pub fn evaluate(&self, y: &DVector<f64>) -> Result<StatValues> {
        self.context().evaluate(y)
    }

    /// Report with asymptotic p-values only.
    pub fn report(&self) -> Result<TestReport> {
        let p_asymptotic = self.asymptotic()?;
        Ok(TestReport {
            n: self.n,
            tested: self.tested,
            rss_null: self.rss_null,
            rss_alt: self.rss_alt,
            glr_log: self.glr_log,
            glr_ratio: self.glr_ratio,
            statistics: self.observed,
            constants: self.constants,
            df_chi2_glr: self.constants.r_k * self.constants.mu_n,
            df_chi2_lf: self.constants.s_k * self.constants.nu_n,
            df_f_glr: (self.tm.c.trace(), self.tm.d.trace()),
            df_f_lf: (self.tm.ete.trace(), self.tm.d.trace()),
            p_asymptotic,
            p_bootstrap: None,
        })
    }

    pub fn asymptotic(&self) -> Result<AsymptoticPValues> {
        inference::asymptotic_pvalues(&self.observed, &self.constants, &self.tm)
    }

    /// Conditional bootstrap: centered unrestricted residuals resampled onto the
    /// restricted fitted values, all requested statistics replayed per replicate.
    pub fn bootstrap(&self, plan: &BootstrapPlan) -> Result<BootstrapResult> {
        if plan.replicates == 0 {
            return Err(Error::Input("bootstrap needs at least one replicate".into()));
        }
        let n = self.n;
        let mean = self.residuals_alt.mean();
        let centered: Vec<f64> = self.residuals_alt.iter().map(|r| r - mean).collect();
        let b = plan.replicates;
        let done = AtomicUsize::new(0);
        let draws: Vec<Option<StatValues>> = (0..b)
            .into_par_iter()
            .map(|l| {
                let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
                rng.set_stream(l as u64 + 1);
                let mut ystar = self.fitted_null.clone();
                for i in 0..n {
                    ystar[i] += centered[rng.gen_range(0..n)];
                }
                let out = self.evaluate(&ystar).ok();
                if plan.progress {
                    let k = done.fetch_add(1, Ordering::Relaxed) + 1;
                    if k % (b / 10).max(1) == 0 {
                        eprintln!("bootstrap: {k}/{b} replicates");
                    }
                }
                out
            })
            .collect();
        let failures = draws.iter().filter(|d| d.is_none()).count();
        if failures * 20 > b {
            return Err(Error::BootstrapFailures { failures, total: b });
        }
        let mut null_samples = Vec::new();
        let mut p_values = BootstrapPValues::default();
        for &kind in &plan.statistics {
            let samples: Vec<f64> = draws
                .iter()
                .filter_map(|d| d.as_ref().map(|s| s.get(kind)))
                .collect();
            // Indicator form: replicates strictly above the observed value.
            let observed = self.observed.get(kind);
            let exceed = samples.iter().filter(|&&v| v > observed).count();
            p_values.set(kind, exceed as f64 / b as f64);
            null_samples.push((kind, samples));
        }
        Ok(BootstrapResult {
            replicates: b,
            seed: plan.seed,
            observed: self.observed,
            null_samples,
            p_values,
            failures,
        })
    }

    /// Full report including bootstrap p-values.
    pub fn report_with_bootstrap(&self, plan: &BootstrapPlan) -> Result<(TestReport, BootstrapResult)> {
        let mut report = self.report()?;
        let boot = self.bootstrap(plan)?;
        report.p_bootstrap = Some(boot.p_values);
        Ok((report, boot))
    }
}

/// One-call wrapper: fits both models and runs the conditional bootstrap.
pub fn conditional_bootstrap(
    data: &Dataset,
    spec: &ModelSpec,
    tested: usize,
    form: NullForm,
    plan: &BootstrapPlan,
) -> Result<BootstrapResult> {
    let session = TestSession::new(data, spec, tested, form, plan.loss)?;
    session.bootstrap(plan)
}
