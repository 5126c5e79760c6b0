use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::OracleError;

/// Above this the innovation covariance is treated as singular.
pub const MAX_CONDITION: f64 = 1e14;

/// Dense linearized observation operator; rows are observations, columns state entries.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearObsOperator {
    pub matrix: DMatrix<f64>,
}

impl LinearObsOperator {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self, OracleError> {
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(OracleError::Operator("non-finite entries".into()));
        }
        Ok(Self { matrix })
    }

    pub fn n_obs(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn n_state(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.matrix * x
    }

    /// `B Hᵀ`, skipping the zero entries of the (typically very sparse) operator.
    pub fn b_ht(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let (m, n) = (self.n_obs(), self.n_state());
        let mut out = DMatrix::zeros(n, m);
        for r in 0..m {
            for c in 0..n {
                let h = self.matrix[(r, c)];
                if h != 0.0 {
                    out.column_mut(r).axpy(h, &b.column(c), 1.0);
                }
            }
        }
        out
    }
}

/// Result of the exact analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct Analysis {
    pub xa: DVector<f64>,
    pub increment: DVector<f64>,
    /// 2-norm condition number of `HBHᵀ + R`.
    pub condition: f64,
}

struct Innovation {
    bht: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    condition: f64,
}

fn factor(h: &LinearObsOperator, b: &DMatrix<f64>, r: &DVector<f64>) -> Result<Innovation, OracleError> {
    check_dims(h, b, r)?;
    let bht = h.b_ht(b);
    let mut s = &h.matrix * &bht;
    s = (&s + s.transpose()) * 0.5;
    for (i, v) in r.iter().enumerate() {
        s[(i, i)] += v;
    }
    let eig = s.clone().symmetric_eigenvalues();
    let (lo, hi) = eig.iter().fold((f64::MAX, 0.0f64), |(l, h), &e| (l.min(e), h.max(e.abs())));
    let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if !(condition < MAX_CONDITION) {
        return Err(OracleError::Singular { condition });
    }
    let chol = Cholesky::new(s).ok_or(OracleError::Singular { condition })?;
    Ok(Innovation { bht, chol, condition })
}

fn check_dims(h: &LinearObsOperator, b: &DMatrix<f64>, r: &DVector<f64>) -> Result<(), OracleError> {
    let (m, n) = (h.n_obs(), h.n_state());
    if b.nrows() != n || b.ncols() != n || r.len() != m {
        return Err(OracleError::Dimension(format!(
            "H is {m}x{n}, B is {}x{}, R has {} entries",
            b.nrows(),
            b.ncols(),
            r.len()
        )));
    }
    Ok(())
}

/// `x^a = x^b + B Hᵀ (H B Hᵀ + R)⁻¹ (y^o − H x^b)` via a Cholesky solve.
pub fn analysis_3dvar(
    xb: &DVector<f64>,
    yo: &DVector<f64>,
    h: &LinearObsOperator,
    b: &DMatrix<f64>,
    r: &DVector<f64>,
) -> Result<Analysis, OracleError> {
    if xb.len() != h.n_state() || yo.len() != h.n_obs() {
        return Err(OracleError::Dimension(format!(
            "x^b has {} entries, y^o has {}, H is {}x{}",
            xb.len(),
            yo.len(),
            h.n_obs(),
            h.n_state()
        )));
    }
    let f = factor(h, b, r)?;
    let d = yo - h.apply(xb);
    let increment = &f.bht * f.chol.solve(&d);
    Ok(Analysis {
        xa: xb + &increment,
        increment,
        condition: f.condition,
    })
}

/// `K = B Hᵀ (H B Hᵀ + R)⁻¹`.
pub fn kalman_gain(h: &LinearObsOperator, b: &DMatrix<f64>, r: &DVector<f64>) -> Result<DMatrix<f64>, OracleError> {
    let f = factor(h, b, r)?;
    // K = (S⁻¹ H B)ᵀ since S and B are symmetric.
    Ok(f.chol.solve(&f.bht.transpose()).transpose())
}

/// `K · Δy`.
pub fn single_obs_increment(k: &DMatrix<f64>, dy: &DVector<f64>) -> DVector<f64> {
    k * dy
}

/// `½(x−x^b)ᵀB⁻¹(x−x^b) + ½(y^o−Hx)ᵀR⁻¹(y^o−Hx)`.
pub fn cost_function(
    x: &DVector<f64>,
    xb: &DVector<f64>,
    yo: &DVector<f64>,
    h: &LinearObsOperator,
    b: &DMatrix<f64>,
    r: &DVector<f64>,
) -> Result<f64, OracleError> {
    check_dims(h, b, r)?;
    let chol = Cholesky::new(b.clone()).ok_or(OracleError::Singular { condition: f64::INFINITY })?;
    let dx = x - xb;
    let jb = dx.dot(&chol.solve(&dx));
    let dy = yo - h.apply(x);
    let jo: f64 = dy.iter().zip(r.iter()).map(|(d, v)| d * d / v).sum();
    Ok(0.5 * (jb + jo))
}

/// Normal-equation solution `(B⁻¹ + HᵀR⁻¹H) δ = HᵀR⁻¹(y^o − Hx^b)` through explicit
/// inverses and an LU solve; an independent route to the same analysis.
pub fn normal_equation_analysis(
    xb: &DVector<f64>,
    yo: &DVector<f64>,
    h: &LinearObsOperator,
    b: &DMatrix<f64>,
    r: &DVector<f64>,
) -> Result<DVector<f64>, OracleError> {
    check_dims(h, b, r)?;
    let binv = b.clone().try_inverse().ok_or(OracleError::Singular { condition: f64::INFINITY })?;
    let rinv = DMatrix::from_diagonal(&r.map(|v| 1.0 / v));
    let ht = h.matrix.transpose();
    let a = binv + &ht * &rinv * &h.matrix;
    let rhs = &ht * &rinv * (yo - h.apply(xb));
    let delta = a
        .lu()
        .solve(&rhs)
        .ok_or(OracleError::Singular { condition: f64::INFINITY })?;
    Ok(xb + delta)
}

/// Minimizes the cost function with conjugate-gradient steps (exact line search on the
/// quadratic), starting from the background. Returns the minimizer and iterations used.
pub fn minimize_cost(
    xb: &DVector<f64>,
    yo: &DVector<f64>,
    h: &LinearObsOperator,
    b: &DMatrix<f64>,
    r: &DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<(DVector<f64>, usize), OracleError> {
    check_dims(h, b, r)?;
    let chol = Cholesky::new(b.clone()).ok_or(OracleError::Singular { condition: f64::INFINITY })?;
    let rinv = r.map(|v| 1.0 / v);
    // Hessian-vector product of J.
    let hess = |v: &DVector<f64>| chol.solve(v) + h.matrix.tr_mul(&h.apply(v).component_mul(&rinv));
    let grad = |x: &DVector<f64>| {
        let dy = (h.apply(x) - yo).component_mul(&rinv);
        chol.solve(&(x - xb)) + h.matrix.tr_mul(&dy)
    };
    let mut x = xb.clone();
    let mut g = grad(&x);
    let mut p = -&g;
    let g0 = g.norm().max(f64::MIN_POSITIVE);
    for it in 0..max_iter {
        if g.norm() <= tol * g0 {
            return Ok((x, it));
        }
        let hp = hess(&p);
        let alpha = g.dot(&g) / p.dot(&hp);
        x.axpy(alpha, &p, 1.0);
        let g_new = grad(&x);
        let beta = g_new.dot(&g_new) / g.dot(&g);
        p = -&g_new + beta * p;
        g = g_new;
    }
    Ok((x, max_iter))
}
