//! Confidence-weighted matrix factorization of implicit feedback, fitted by
//! alternating least squares.
//!
//! Preferences are binary (`p = 1` when a count is present) and every cell
//! carries a confidence `c = 1 + alpha * count`. The objective over *all*
//! user/item pairs is
//!
//! ```text
//! sum_ui c_ui (p_ui - x_u . y_i)^2 + lambda (sum_u |x_u|^2 + sum_i |y_i|^2)
//! ```
//!
//! With one side fixed, each row of the other side has a closed-form ridge
//! solution. Zero-count cells contribute only through the Gram matrix `YᵀY`,
//! so a row solve costs `O(k^2 * nnz_row + k^3)`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand_distr::{Distribution, Normal};

use crate::data::FeedbackMatrix;
use crate::error::{Error, Result};
use crate::seed;

/// Paired user and item latent factors.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorModel {
    pub user_factors: Array2<f64>,
    pub item_factors: Array2<f64>,
}

impl FactorModel {
    pub fn k(&self) -> usize {
        self.user_factors.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WmfConfig {
    pub k: usize,
    pub alpha: f64,
    pub lambda: f64,
    pub iterations: usize,
    pub init_scale: f64,
    pub seed: u64,
    /// Stop early once the relative objective improvement of a sweep drops
    /// below this value.
    pub early_stop: Option<f64>,
}

impl Default for WmfConfig {
    fn default() -> Self {
        Self {
            k: 200,
            alpha: 40.0,
            lambda: 0.01,
            iterations: 15,
            init_scale: 0.01,
            seed: 0,
            early_stop: None,
        }
    }
}

impl WmfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidInput("wmf: k must be at least 1".into()));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::InvalidInput("wmf: alpha must be non-negative".into()));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::InvalidInput("wmf: lambda must be positive".into()));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidInput("wmf: iterations must be at least 1".into()));
        }
        if !(self.init_scale >= 0.0) {
            return Err(Error::InvalidInput("wmf: init_scale must be non-negative".into()));
        }
        Ok(())
    }
}

/// Fits user and item factors for `m`.
pub fn factorize_wmf(m: &FeedbackMatrix, cfg: &WmfConfig) -> Result<FactorModel> {
    factorize_wmf_traced(m, cfg).map(|(model, _)| model)
}

/// Like [`factorize_wmf`], also returning the objective before the first
/// sweep and after every sweep. Computing the trace costs an extra
/// `O((users + items) k^2 + nnz k)` per sweep.
pub fn factorize_wmf_traced(m: &FeedbackMatrix, cfg: &WmfConfig) -> Result<(FactorModel, Vec<f64>)> {
    cfg.validate()?;
    if m.n_users() == 0 || m.n_items() == 0 || m.nnz() == 0 {
        return Err(Error::InvalidInput("wmf: feedback matrix is empty".into()));
    }
    let mut rng = seed::rng(cfg.seed);
    let normal = Normal::new(0.0, cfg.init_scale).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let mut model = FactorModel {
        user_factors: Array2::from_shape_fn((m.n_users(), cfg.k), |_| normal.sample(&mut rng)),
        item_factors: Array2::from_shape_fn((m.n_items(), cfg.k), |_| normal.sample(&mut rng)),
    };
    let rows = m.user_rows();
    let cols = m.item_cols();
    let mut trace = vec![objective_sparse(&model, &rows, cfg.alpha, cfg.lambda)];
    for sweep in 0..cfg.iterations {
        model.user_factors = solve_side(&model.item_factors, &rows, cfg.alpha, cfg.lambda)?;
        model.item_factors = solve_side(&model.user_factors, &cols, cfg.alpha, cfg.lambda)?;
        let obj = objective_sparse(&model, &rows, cfg.alpha, cfg.lambda);
        if !obj.is_finite() {
            return Err(Error::NonFinite(format!(
                "wmf objective after sweep {sweep} is {obj}; the system is ill-conditioned, try a larger lambda"
            )));
        }
        let prev = *trace.last().unwrap_or(&obj);
        trace.push(obj);
        if let Some(tol) = cfg.early_stop {
            if (prev - obj) <= tol * prev.abs() {
                break;
            }
        }
    }
    Ok((model, trace))
}

/// Solves every row of one side against the fixed opposite factors.
pub fn solve_side(other: &Array2<f64>, rows: &[Vec<(usize, f64)>], alpha: f64, lambda: f64) -> Result<Array2<f64>> {
    let gram = other.t().dot(other);
    let mut out = Array2::zeros((rows.len(), other.ncols()));
    for (r, counts) in rows.iter().enumerate() {
        let x = solve_row_with_gram(&gram, other.view(), counts, alpha, lambda)?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "row {r} solve produced non-finite values; try a larger lambda"
            )));
        }
        out.row_mut(r).assign(&x);
    }
    Ok(out)
}

/// Closed-form ridge update for one row:
/// `x = (YᵀCY + λI)⁻¹ YᵀCp` with `C = diag(1 + alpha * count)` and
/// `p = [count > 0]`.
pub fn solve_row(other: ArrayView2<f64>, counts: &[(usize, f64)], alpha: f64, lambda: f64) -> Result<Array1<f64>> {
    let gram = other.t().dot(&other);
    solve_row_with_gram(&gram, other, counts, alpha, lambda)
}

/// [`solve_row`] with a precomputed `YᵀY`.
pub fn solve_row_with_gram(
    gram: &Array2<f64>,
    other: ArrayView2<f64>,
    counts: &[(usize, f64)],
    alpha: f64,
    lambda: f64,
) -> Result<Array1<f64>> {
    let k = other.ncols();
    if gram.dim() != (k, k) {
        return Err(Error::Shape(format!("gram is {:?}, expected ({k}, {k})", gram.dim())));
    }
    if !(lambda > 0.0) {
        return Err(Error::InvalidInput("solve_row: lambda must be positive".into()));
    }
    let mut rhs = Array1::zeros(k);
    if counts.iter().all(|&(_, c)| c <= 0.0) {
        return Ok(rhs);
    }
    let mut a = gram.clone();
    for d in 0..k {
        a[[d, d]] += lambda;
    }
    for &(j, count) in counts {
        if count <= 0.0 {
            continue;
        }
        if j >= other.nrows() {
            return Err(Error::Shape(format!("row index {j} out of range {}", other.nrows())));
        }
        let y = other.row(j);
        let c = 1.0 + alpha * count;
        // rank-one update with (c - 1) y yᵀ, lower triangle only
        for p in 0..k {
            let s = (c - 1.0) * y[p];
            for q in 0..=p {
                a[[p, q]] += s * y[q];
            }
        }
        rhs.scaled_add(c, &y);
    }
    cholesky_solve(a, rhs)
}

/// Solves `A x = b` for symmetric positive-definite `A`, reading only the
/// lower triangle.
pub(crate) fn cholesky_solve(mut a: Array2<f64>, mut b: Array1<f64>) -> Result<Array1<f64>> {
    let n = b.len();
    for j in 0..n {
        let mut d = a[[j, j]];
        for p in 0..j {
            d -= a[[j, p]] * a[[j, p]];
        }
        if !(d > 0.0) {
            return Err(Error::Degenerate(format!("matrix is not positive definite at pivot {j}")));
        }
        let d = d.sqrt();
        a[[j, j]] = d;
        for i in j + 1..n {
            let mut s = a[[i, j]];
            for p in 0..j {
                s -= a[[i, p]] * a[[j, p]];
            }
            a[[i, j]] = s / d;
        }
    }
    for i in 0..n {
        let mut s = b[i];
        for p in 0..i {
            s -= a[[i, p]] * b[p];
        }
        b[i] = s / a[[i, i]];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for p in i + 1..n {
            s -= a[[p, i]] * b[p];
        }
        b[i] = s / a[[i, i]];
    }
    Ok(b)
}

/// Exact weighted, regularized objective over every user/item pair,
/// zero-count pairs included (`c = 1`, `p = 0`).
pub fn als_objective(model: &FactorModel, m: &FeedbackMatrix, alpha: f64, lambda: f64) -> Result<f64> {
    let (nu, ku) = model.user_factors.dim();
    let (ni, ki) = model.item_factors.dim();
    if nu != m.n_users() || ni != m.n_items() || ku != ki {
        return Err(Error::Shape(format!(
            "model is {nu}x{ku} / {ni}x{ki}, matrix is {}x{}",
            m.n_users(),
            m.n_items()
        )));
    }
    Ok(objective_sparse(model, &m.user_rows(), alpha, lambda))
}

// Σ_all (xᵀy)² = tr((XᵀX)(YᵀY)); observed cells then swap their c=1,p=0 term
// for the real one.
fn objective_sparse(model: &FactorModel, rows: &[Vec<(usize, f64)>], alpha: f64, lambda: f64) -> f64 {
    let xtx = model.user_factors.t().dot(&model.user_factors);
    let yty = model.item_factors.t().dot(&model.item_factors);
    let mut total: f64 = (&xtx * &yty).sum();
    for (u, row) in rows.iter().enumerate() {
        let x = model.user_factors.row(u);
        for &(i, count) in row {
            if count <= 0.0 {
                continue;
            }
            let s = x.dot(&model.item_factors.row(i));
            let c = 1.0 + alpha * count;
            total += c * (1.0 - s) * (1.0 - s) - s * s;
        }
    }
    let reg = model.user_factors.iter().map(|v| v * v).sum::<f64>() + model.item_factors.iter().map(|v| v * v).sum::<f64>();
    total + lambda * reg
}

/// Dot product of a user factor with every item factor.
pub fn predict_scores(user_factor: ArrayView1<f64>, item_factors: ArrayView2<f64>) -> Result<Array1<f64>> {
    if user_factor.len() != item_factors.ncols() {
        return Err(Error::Shape(format!(
            "user factor has {} dims, item factors have {}",
            user_factor.len(),
            item_factors.ncols()
        )));
    }
    Ok(item_factors.dot(&user_factor))
}

/// Item factors for items outside the fitted model, obtained by solving each
/// item row against fixed user factors. Items without feedback get zeros.
pub fn fold_in_items(user_factors: &Array2<f64>, m: &FeedbackMatrix, alpha: f64, lambda: f64) -> Result<Array2<f64>> {
    if user_factors.nrows() != m.n_users() {
        return Err(Error::Shape(format!(
            "{} user factors for {} users",
            user_factors.nrows(),
            m.n_users()
        )));
    }
    solve_side(user_factors, &m.item_cols(), alpha, lambda)
}

/// Rows with a nonzero norm.
pub fn nonzero_rows(factors: &Array2<f64>) -> Vec<usize> {
    factors
        .axis_iter(Axis(0))
        .enumerate()
        .filter(|(_, r)| r.iter().any(|v| *v != 0.0))
        .map(|(i, _)| i)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};
    use rand::Rng;

    fn random_matrix(users: usize, items: usize, density: f64, seed_: u64) -> FeedbackMatrix {
        let mut rng = seed::rng(seed_);
        let mut m = FeedbackMatrix::with_ids(
            (0..users).map(|u| format!("u{u}")).collect(),
            (0..items).map(|i| format!("i{i}")).collect(),
        )
        .unwrap();
        for u in 0..users {
            for i in 0..items {
                if rng.random::<f64>() < density {
                    m.add_at(u, i, rng.random_range(1..6));
                }
            }
        }
        m
    }

    fn brute_objective(model: &FactorModel, m: &FeedbackMatrix, alpha: f64, lambda: f64) -> f64 {
        let mut total = 0.0;
        for u in 0..m.n_users() {
            for i in 0..m.n_items() {
                let count = m.get(u, i) as f64;
                let p = if count > 0.0 { 1.0 } else { 0.0 };
                let c = 1.0 + alpha * count;
                let s: f64 = (0..model.k())
                    .map(|d| model.user_factors[[u, d]] * model.item_factors[[i, d]])
                    .sum();
                total += c * (p - s) * (p - s);
            }
        }
        let reg: f64 = model.user_factors.iter().chain(model.item_factors.iter()).map(|v| v * v).sum();
        total + lambda * reg
    }

    #[test]
    fn zero_iterations_rejected() {
        let m = random_matrix(3, 3, 0.5, 1);
        let cfg = WmfConfig {
            iterations: 0,
            ..WmfConfig::default()
        };
        assert!(factorize_wmf(&m, &cfg).is_err());
    }

    #[test]
    fn users_without_feedback_get_zero_rows() {
        let mut m = random_matrix(5, 7, 0.5, 2);
        m = m
            .with_user_order(&[m.user_ids(), &["ghost".to_string()]].concat())
            .unwrap();
        let cfg = WmfConfig {
            k: 3,
            iterations: 3,
            ..WmfConfig::default()
        };
        let model = factorize_wmf(&m, &cfg).unwrap();
        assert!(model.user_factors.row(5).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn empty_row_solves_to_zero() {
        let y = Array2::from_shape_fn((4, 3), |(i, j)| (i + j) as f64);
        let x = solve_row(y.view(), &[], 40.0, 0.1).unwrap();
        assert!(x.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn scalar_row_solve_matches_closed_form() {
        // k=1, y=1, count=1, alpha=1: x = c/(c+lambda) with c=2
        let y = Array2::from_elem((1, 1), 1.0);
        for lambda in [1e-1, 1e-3, 1e-6] {
            let x = solve_row(y.view(), &[(0, 1.0)], 1.0, lambda).unwrap();
            assert_relative_eq!(x[0], 2.0 / (2.0 + lambda), max_relative = 1e-14);
        }
    }

    #[test]
    fn lambda_zero_rejected() {
        let y = Array2::from_elem((1, 1), 1.0);
        assert!(solve_row(y.view(), &[(0, 1.0)], 1.0, 0.0).is_err());
    }

    /// Dense normal equations with the full confidence diagonal, solved by LU.
    fn dense_solve(y: &Array2<f64>, counts: &[(usize, f64)], alpha: f64, lambda: f64) -> DVector<f64> {
        let (n, k) = y.dim();
        let ym = DMatrix::from_fn(n, k, |i, j| y[[i, j]]);
        let mut c = DVector::from_element(n, 1.0);
        let mut p = DVector::zeros(n);
        for &(j, count) in counts {
            c[j] = 1.0 + alpha * count;
            p[j] = 1.0;
        }
        let cm = DMatrix::from_diagonal(&c);
        let a = ym.transpose() * &cm * &ym + DMatrix::identity(k, k) * lambda;
        let b = ym.transpose() * &cm * p;
        a.lu().solve(&b).unwrap()
    }

    #[test]
    fn row_solve_matches_dense_oracle() {
        let mut rng = seed::rng(5);
        for trial in 0..20 {
            let n = rng.random_range(1..12);
            let k = rng.random_range(1..6);
            let y = Array2::from_shape_fn((n, k), |_| rng.random_range(-1.0..1.0));
            let mut counts: Vec<(usize, f64)> = Vec::new();
            for j in 0..n {
                if rng.random_bool(0.4) {
                    counts.push((j, rng.random_range(1..10) as f64));
                }
            }
            let (alpha, lambda) = (rng.random_range(0.0..40.0), rng.random_range(0.01..1.0));
            let fast = solve_row(y.view(), &counts, alpha, lambda).unwrap();
            let oracle = dense_solve(&y, &counts, alpha, lambda);
            for d in 0..k {
                assert!((fast[d] - oracle[d]).abs() < 1e-10, "trial {trial} dim {d}: {} vs {}", fast[d], oracle[d]);
            }
        }
    }

    #[test]
    fn row_solve_is_a_minimum() {
        let mut rng = seed::rng(8);
        let y = Array2::from_shape_fn((9, 4), |_| rng.random_range(-1.0..1.0));
        let counts = vec![(1, 3.0), (4, 1.0), (7, 8.0)];
        let (alpha, lambda) = (10.0, 0.1);
        let partial = |x: &Array1<f64>| {
            let mut f = lambda * x.dot(x);
            for j in 0..9 {
                let count = counts.iter().find(|(i, _)| *i == j).map_or(0.0, |(_, c)| *c);
                let p = if count > 0.0 { 1.0 } else { 0.0 };
                let s = x.dot(&y.row(j));
                f += (1.0 + alpha * count) * (p - s) * (p - s);
            }
            f
        };
        let x = solve_row(y.view(), &counts, alpha, lambda).unwrap();
        let best = partial(&x);
        for d in 0..4 {
            for step in [1e-4, -1e-4] {
                let mut z = x.clone();
                z[d] += step;
                assert!(partial(&z) >= best);
            }
        }
    }

    #[test]
    fn objective_small_cases() {
        let m = FeedbackMatrix::with_ids(vec!["u".into()], vec!["i".into()]).unwrap();
        let zero = FactorModel {
            user_factors: Array2::zeros((1, 2)),
            item_factors: Array2::zeros((1, 2)),
        };
        assert_eq!(als_objective(&zero, &m, 40.0, 0.1).unwrap(), 0.0);
        let mut m1 = m.clone();
        m1.add_at(0, 0, 1);
        assert_eq!(als_objective(&zero, &m1, 40.0, 0.1).unwrap(), 41.0);
    }

    #[test]
    fn objective_matches_brute_force() {
        let m = random_matrix(3, 3, 0.5, 21);
        let mut rng = seed::rng(22);
        let model = FactorModel {
            user_factors: Array2::from_shape_fn((3, 2), |_| rng.random_range(-1.0..1.0)),
            item_factors: Array2::from_shape_fn((3, 2), |_| rng.random_range(-1.0..1.0)),
        };
        let fast = als_objective(&model, &m, 7.0, 0.3).unwrap();
        assert_relative_eq!(fast, brute_objective(&model, &m, 7.0, 0.3), max_relative = 1e-12);
    }

    #[test]
    fn objective_rejects_mismatch() {
        let m = random_matrix(3, 3, 0.5, 21);
        let model = FactorModel {
            user_factors: Array2::zeros((2, 2)),
            item_factors: Array2::zeros((3, 2)),
        };
        assert!(als_objective(&model, &m, 1.0, 1.0).is_err());
    }

    #[test]
    fn objective_never_increases() {
        let m = random_matrix(12, 15, 0.3, 3);
        let cfg = WmfConfig {
            k: 4,
            alpha: 10.0,
            lambda: 0.1,
            iterations: 20,
            init_scale: 0.1,
            seed: 4,
            early_stop: None,
        };
        let (_, trace) = factorize_wmf_traced(&m, &cfg).unwrap();
        for w in trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn fit_is_bit_deterministic() {
        let m = random_matrix(10, 8, 0.3, 9);
        let cfg = WmfConfig {
            k: 3,
            seed: 17,
            ..WmfConfig::default()
        };
        assert_eq!(factorize_wmf(&m, &cfg).unwrap(), factorize_wmf(&m, &cfg).unwrap());
    }

    #[test]
    fn predict_scores_cases() {
        let items = ndarray::arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        let s = predict_scores(ndarray::arr1(&[1.0, 0.0]).view(), items.view()).unwrap();
        assert_eq!(s.to_vec(), vec![1.0, 0.0]);
        let z = predict_scores(ndarray::arr1(&[0.0, 0.0]).view(), items.view()).unwrap();
        assert_eq!(z.to_vec(), vec![0.0, 0.0]);
        assert!(predict_scores(ndarray::arr1(&[1.0]).view(), items.view()).is_err());

        let mut rng = seed::rng(3);
        let u = Array1::from_shape_fn(2, |_| rng.random_range(-1.0..1.0));
        let it = Array2::from_shape_fn((5, 2), |_| rng.random_range(-1.0..1.0));
        let s = predict_scores(u.view(), it.view()).unwrap();
        for i in 0..5 {
            assert!((s[i] - (u[0] * it[[i, 0]] + u[1] * it[[i, 1]])).abs() < 1e-15);
        }
    }
}
