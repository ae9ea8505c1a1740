//! Polynomial design matrices and the orthogonal projections that carry the
//! parametric part of the additive fit.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};

pub const DEFAULT_RANK_TOL: f64 = 1e-10;

/// The full polynomial design and its per-covariate blocks.
///
/// Columns of the full matrix are grouped by power: intercept, then all linear
/// columns, then all quadratic columns of covariates with order at least two,
/// and so on.
#[derive(Debug, Clone)]
pub struct DesignSet {
    pub x_full: DMatrix<f64>,
    /// Per-covariate blocks [1, x_j, ..., x_j^{p_j}].
    pub x_j: Vec<DMatrix<f64>>,
    /// Design excluding the tested covariate's power columns (intercept kept).
    pub x_minus_d: Option<DMatrix<f64>>,
    /// Power columns [x_d, ..., x_d^{p_d}] of the tested covariate.
    pub x_d_powers: Option<DMatrix<f64>>,
    pub tested: Option<usize>,
    pub orders: Vec<usize>,
    pub rank_tol: f64,
}

fn power_major_columns(x: &DMatrix<f64>, orders: &[usize], skip: Option<usize>) -> DMatrix<f64> {
    let n = x.nrows();
    let max_p = orders.iter().copied().max().unwrap_or(0);
    let mut cols: Vec<DVector<f64>> = vec![DVector::from_element(n, 1.0)];
    for power in 1..=max_p {
        for (j, &pj) in orders.iter().enumerate() {
            if Some(j) == skip || power > pj {
                continue;
            }
            cols.push(DVector::from_fn(n, |i, _| x[(i, j)].powi(power as i32)));
        }
    }
    DMatrix::from_columns(&cols)
}

/// Build the design blocks from scaled covariates and per-covariate orders.
pub fn build_design(
    x_scaled: &DMatrix<f64>,
    orders: &[usize],
    tested: Option<usize>,
) -> Result<DesignSet> {
    let (n, d) = x_scaled.shape();
    if orders.len() != d {
        return Err(Error::Input("order vector length mismatch".into()));
    }
    let ncols = 1 + orders.iter().sum::<usize>();
    if n <= ncols {
        return Err(Error::DegenerateDesign(format!(
            "need more than {ncols} observations, got {n}"
        )));
    }
    for j in 0..d {
        let col = x_scaled.column(j);
        if col.max() - col.min() <= 0.0 {
            return Err(Error::DegenerateDesign(format!("covariate {j} is constant")));
        }
    }
    let x_full = power_major_columns(x_scaled, orders, None);
    let x_j = (0..d)
        .map(|j| {
            let mut cols = vec![DVector::from_element(n, 1.0)];
            for r in 1..=orders[j] {
                cols.push(DVector::from_fn(n, |i, _| x_scaled[(i, j)].powi(r as i32)));
            }
            DMatrix::from_columns(&cols)
        })
        .collect();
    let (x_minus_d, x_d_powers) = match tested {
        Some(dd) => {
            let minus = power_major_columns(x_scaled, orders, Some(dd));
            let powers = if orders[dd] == 0 {
                DMatrix::zeros(n, 0)
            } else {
                DMatrix::from_columns(
                    &(1..=orders[dd])
                        .map(|r| DVector::from_fn(n, |i, _| x_scaled[(i, dd)].powi(r as i32)))
                        .collect::<Vec<_>>(),
                )
            };
            (Some(minus), Some(powers))
        }
        None => (None, None),
    };
    Ok(DesignSet {
        x_full,
        x_j,
        x_minus_d,
        x_d_powers,
        tested,
        orders: orders.to_vec(),
        rank_tol: DEFAULT_RANK_TOL,
    })
}

/// Orthonormal basis of the numerical column space of `a`, from an SVD with
/// singular values below `rank_tol * sigma_max` treated as zero.
pub fn orthonormal_basis(a: &DMatrix<f64>, rank_tol: f64) -> DMatrix<f64> {
    if a.ncols() == 0 {
        return DMatrix::zeros(a.nrows(), 0);
    }
    let svd = a.clone().svd(true, false);
    let u = svd.u.as_ref().expect("svd with u");
    let smax = svd.singular_values.max();
    let rank = svd.singular_values.iter().filter(|&&s| s > rank_tol * smax).count();
    u.columns(0, rank).into_owned()
}

/// Orthogonal projector onto the numerical column span of `a`.
pub fn projection(a: &DMatrix<f64>, rank_tol: f64) -> DMatrix<f64> {
    let basis = orthonormal_basis(a, rank_tol);
    &basis * basis.transpose()
}

/// The projections onto the full parametric space, the per-covariate polynomial
/// spaces, and, when a tested covariate is set, the reduced space and the
/// residual direction of the tested covariate's power columns.
#[derive(Debug, Clone)]
pub struct ProjectionSet {
    pub g: DMatrix<f64>,
    pub g_j: Vec<DMatrix<f64>>,
    pub g_minus_d: Option<DMatrix<f64>>,
    pub p_resid_d: Option<DMatrix<f64>>,
    /// Numerical rank of the full design.
    pub rank: usize,
    /// True when the full design is rank deficient (exact concurvity).
    pub concurvity: bool,
}

pub fn build_projections(ds: &DesignSet) -> ProjectionSet {
    let basis = orthonormal_basis(&ds.x_full, ds.rank_tol);
    let rank = basis.ncols();
    let g = &basis * basis.transpose();
    let concurvity = rank < ds.x_full.ncols();
    let g_j = ds.x_j.iter().map(|xj| projection(xj, ds.rank_tol)).collect();
    let (g_minus_d, p_resid_d) = match (&ds.x_minus_d, &ds.x_d_powers) {
        (Some(xm), Some(xdp)) => {
            let gm = projection(xm, ds.rank_tol);
            let resid = xdp - &gm * xdp;
            let pr = projection(&resid, ds.rank_tol);
            (Some(gm), Some(pr))
        }
        _ => (None, None),
    };
    ProjectionSet { g, g_j, g_minus_d, p_resid_d, rank, concurvity }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn max_abs(m: &DMatrix<f64>) -> f64 {
        m.iter().fold(0.0f64, |a, &v| a.max(v.abs()))
    }

    #[test]
    fn design_column_layout() {
        // d = 1, p = (1): plain affine design.
        let x = DMatrix::from_column_slice(3, 1, &[0.0, 0.5, 1.0]);
        let ds = build_design(&x, &[1], None).unwrap();
        assert_eq!(ds.x_full.ncols(), 2);
        assert_eq!(ds.x_full[(1, 1)], 0.5);
        assert_eq!(ds.x_full.column(0).sum(), 3.0);

        // d = 2, p = (1, 2): columns ordered [1, x1, x2, x2^2].
        let x2 = DMatrix::from_fn(10, 2, |i, j| (i as f64 / 9.0).powi(j as i32 + 1));
        let ds2 = build_design(&x2, &[1, 2], None).unwrap();
        assert_eq!(ds2.x_full.ncols(), 4);
        for i in 0..10 {
            assert!((ds2.x_full[(i, 3)] - x2[(i, 1)] * x2[(i, 1)]).abs() < 1e-15);
        }
    }

    #[test]
    fn projection_examples() {
        let n = 6;
        let ones = DMatrix::from_element(n, 1, 1.0);
        let p = projection(&ones, DEFAULT_RANK_TOL);
        for v in p.iter() {
            assert!((v - 1.0 / n as f64).abs() < 1e-12);
        }
        // Duplicate column spans the same space.
        let mut dup = DMatrix::zeros(n, 2);
        for i in 0..n {
            dup[(i, 0)] = i as f64;
            dup[(i, 1)] = i as f64;
        }
        let single = dup.columns(0, 1).into_owned();
        let diff = projection(&dup, DEFAULT_RANK_TOL) - projection(&single, DEFAULT_RANK_TOL);
        assert!(max_abs(&diff) < 1e-12);
    }

    #[test]
    fn projection_reproduces_columns() {
        // Oracle: normal-equations projector on a random full-rank matrix.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = DMatrix::from_fn(50, 5, |_, _| rng.gen_range(-1.0..1.0));
        let p = projection(&a, DEFAULT_RANK_TOL);
        let diff = &p * &a - &a;
        assert!(max_abs(&diff) < 1e-10);
        let gram = a.transpose() * &a;
        let oracle = &a * gram.try_inverse().unwrap() * a.transpose();
        assert!(max_abs(&(&p - &oracle)) < 1e-9);
    }

    #[test]
    fn projection_set_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 60;
        let x = DMatrix::from_fn(n, 3, |_, _| rng.gen_range(0.0..1.0));
        let ds = build_design(&x, &[1, 2, 1], Some(2)).unwrap();
        let ps = build_projections(&ds);
        assert!(!ps.concurvity);
        assert_eq!(ps.rank, 5);

        // Idempotence and symmetry of every projector.
        let mut all = vec![ps.g.clone()];
        all.extend(ps.g_j.iter().cloned());
        all.push(ps.g_minus_d.clone().unwrap());
        all.push(ps.p_resid_d.clone().unwrap());
        for p in &all {
            assert!(max_abs(&(p * p - p)) < 1e-9);
            assert!(max_abs(&(p.transpose() - p)) < 1e-9);
        }

        // G reproduces every design column.
        let gd = &ps.g * &ds.x_full - &ds.x_full;
        assert!(max_abs(&gd) < 1e-9);

        // G_j G^perp = 0.
        let gperp = DMatrix::identity(n, n) - &ps.g;
        for gj in &ps.g_j {
            assert!(max_abs(&(gj * &gperp)) < 1e-9);
        }

        // G = G_[-d] + P over the residual directions of the tested covariate.
        let sum = ps.g_minus_d.as_ref().unwrap() + ps.p_resid_d.as_ref().unwrap();
        assert!(max_abs(&(&ps.g - &sum)) < 1e-9);

        // G decomposes as the mean projection plus the centered remainder.
        let ones = DMatrix::from_element(n, 1, 1.0);
        let p1 = projection(&ones, DEFAULT_RANK_TOL);
        let no_intercept = ds.x_full.columns(1, ds.x_full.ncols() - 1).into_owned();
        let centered = &no_intercept - &p1 * &no_intercept;
        let decomp = &p1 + projection(&centered, DEFAULT_RANK_TOL);
        assert!(max_abs(&(&ps.g - &decomp)) < 1e-9);

        // G_[-d]^perp annihilates the reduced design columns.
        let gmp = DMatrix::identity(n, n) - ps.g_minus_d.as_ref().unwrap();
        assert!(max_abs(&(&gmp * ds.x_minus_d.as_ref().unwrap())) < 1e-9);
    }

    #[test]
    fn concurvity_flagged_on_dependent_designs() {
        let n = 40;
        let x1 = DVector::from_fn(n, |i, _| i as f64 / (n - 1) as f64);
        // Second covariate exactly affine in the first: shared linear span.
        let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { x1[i] } else { 0.25 + 0.5 * x1[i] });
        let ds = build_design(&x, &[1, 1], None).unwrap();
        let ps = build_projections(&ds);
        assert!(ps.concurvity);
        assert_eq!(ps.rank, 2);
    }
}
