//! Box-constrained strictly convex QP solved by Nesterov's fast gradient
//! method, plus the power-iteration and Riccati helpers it relies on.
//!
//! Problem form: minimise `½ zᵀHz + gᵀz` subject to `lb ≤ z ≤ ub`, optionally
//! plus one-sided quadratic penalties on linear rows `lo ≤ Az ≤ hi`.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum QpError {
    #[error("non-finite entry in {0}")]
    NonFinite(&'static str),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("Hessian is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("lower bound exceeds upper bound at index {0}")]
    BoundsOrder(usize),
    #[error("Hessian is not positive definite (min eigenvalue estimate {0:e})")]
    NotPositiveDefinite(f64),
    #[error("power iteration did not converge in {0} iterations")]
    EigenNoConvergence(usize),
    #[error("Riccati iteration did not converge in {0} iterations (non-stabilizable?)")]
    NonStabilizable(usize),
    #[error("singular matrix in {0}")]
    Singular(&'static str),
    #[error("max_iter must be at least 1")]
    ZeroIterations,
}

#[derive(Clone, Debug)]
pub struct QpProblem {
    h: DMatrix<f64>,
    g: DVector<f64>,
    lb: DVector<f64>,
    ub: DVector<f64>,
    lipschitz: f64,
    mu: f64,
    soft: Option<SoftRows>,
}

/// Penalty `ρ/2·Σ (max(0, aᵢᵀz − hiᵢ)² + max(0, loᵢ − aᵢᵀz)²)`.
#[derive(Clone, Debug)]
pub struct SoftRows {
    a: DMatrix<f64>,
    lo: DVector<f64>,
    hi: DVector<f64>,
    rho: f64,
    norms_sq: Vec<f64>,
}

impl SoftRows {
    pub fn new(a: DMatrix<f64>, lo: DVector<f64>, hi: DVector<f64>, rho: f64) -> Result<Self, QpError> {
        let m = a.nrows();
        if lo.len() != m || hi.len() != m {
            return Err(QpError::Dimension(format!("A has {m} rows, lo {}, hi {}", lo.len(), hi.len())));
        }
        check_finite_m(&a, "soft rows")?;
        if lo.iter().chain(hi.iter()).any(|x| x.is_nan()) || !rho.is_finite() || rho < 0.0 {
            return Err(QpError::NonFinite("soft bounds"));
        }
        if let Some(i) = (0..m).find(|&i| lo[i] > hi[i]) {
            return Err(QpError::BoundsOrder(i));
        }
        let norms_sq = (0..m).map(|i| a.row(i).norm_squared()).collect();
        Ok(SoftRows { a, lo, hi, rho, norms_sq })
    }

    pub fn len(&self) -> usize {
        self.a.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.a.nrows() == 0
    }

    /// Signed violation per row: positive above `hi`, negative below `lo`.
    fn violation(&self, z: &DVector<f64>) -> DVector<f64> {
        let az = &self.a * z;
        DVector::from_fn(az.len(), |i, _| {
            if az[i] > self.hi[i] {
                az[i] - self.hi[i]
            } else if az[i] < self.lo[i] {
                az[i] - self.lo[i]
            } else {
                0.0
            }
        })
    }

    pub fn penalty(&self, z: &DVector<f64>) -> f64 {
        0.5 * self.rho * self.violation(z).norm_squared()
    }

    /// Rows violated at `z`.
    pub fn active(&self, z: &DVector<f64>) -> Vec<usize> {
        let v = self.violation(z);
        (0..v.len()).filter(|&i| v[i] != 0.0).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QpSolution {
    pub z: DVector<f64>,
    /// Residual evaluations performed, so always at least one.
    pub iterations: usize,
    pub converged: bool,
    /// Norm of the gradient mapping `L·(z − Π(z − ∇f(z)/L))` at `z`.
    pub residual: f64,
}

const SYMMETRY_TOL: f64 = 1e-12;

fn check_finite_m(m: &DMatrix<f64>, what: &'static str) -> Result<(), QpError> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(QpError::NonFinite(what))
    }
}

fn check_finite_v(v: &DVector<f64>, what: &'static str) -> Result<(), QpError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(QpError::NonFinite(what))
    }
}

fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let scale = m.amax().max(1.0);
    (m - m.transpose()).amax() / scale
}

impl QpProblem {
    /// Builds a problem and estimates `L` and `mu` by power iteration.
    pub fn new(h: DMatrix<f64>, g: DVector<f64>, lb: DVector<f64>, ub: DVector<f64>) -> Result<Self, QpError> {
        Self::validate(&h, &g, &lb, &ub)?;
        let (lipschitz, mu) = extremal_eigs(&h)?;
        Self::assemble(h, g, lb, ub, lipschitz, mu)
    }

    /// Builds a problem with caller-supplied spectral bounds.
    ///
    /// `lipschitz` must bound `λ_max(H)` from above and `mu` must bound
    /// `λ_min(H)` from below; a smaller `mu` only slows convergence.
    pub fn with_spectrum(
        h: DMatrix<f64>,
        g: DVector<f64>,
        lb: DVector<f64>,
        ub: DVector<f64>,
        lipschitz: f64,
        mu: f64,
    ) -> Result<Self, QpError> {
        Self::validate(&h, &g, &lb, &ub)?;
        Self::assemble(h, g, lb, ub, lipschitz, mu)
    }

    fn validate(h: &DMatrix<f64>, g: &DVector<f64>, lb: &DVector<f64>, ub: &DVector<f64>) -> Result<(), QpError> {
        let n = g.len();
        if h.nrows() != n || h.ncols() != n || lb.len() != n || ub.len() != n {
            return Err(QpError::Dimension(format!("H {}x{}, g {}, lb {}, ub {}", h.nrows(), h.ncols(), n, lb.len(), ub.len())));
        }
        check_finite_m(h, "H")?;
        check_finite_v(g, "g")?;
        if lb.iter().chain(ub.iter()).any(|x| x.is_nan()) {
            return Err(QpError::NonFinite("bounds"));
        }
        let asym = asymmetry(h);
        if asym > SYMMETRY_TOL {
            return Err(QpError::NotSymmetric(asym));
        }
        if let Some(i) = (0..n).find(|&i| lb[i] > ub[i]) {
            return Err(QpError::BoundsOrder(i));
        }
        Ok(())
    }

    fn assemble(
        h: DMatrix<f64>,
        g: DVector<f64>,
        lb: DVector<f64>,
        ub: DVector<f64>,
        lipschitz: f64,
        mu: f64,
    ) -> Result<Self, QpError> {
        if !(mu > 0.0) || !mu.is_finite() || !lipschitz.is_finite() {
            return Err(QpError::NotPositiveDefinite(mu));
        }
        Ok(QpProblem { h, g, lb, ub, lipschitz, mu: mu.min(lipschitz), soft: None })
    }

    /// Adds one-sided penalty rows. `lipschitz` stays the bound for the
    /// quadratic part; the solver grows its step bound as rows activate.
    pub fn with_soft_rows(mut self, soft: SoftRows) -> Result<Self, QpError> {
        if soft.a.ncols() != self.dim() {
            return Err(QpError::Dimension(format!("soft rows have {} columns, expected {}", soft.a.ncols(), self.dim())));
        }
        self.soft = if soft.is_empty() || soft.rho == 0.0 { None } else { Some(soft) };
        Ok(self)
    }

    pub fn soft_rows(&self) -> Option<&SoftRows> {
        self.soft.as_ref()
    }

    pub fn dim(&self) -> usize {
        self.g.len()
    }

    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn gradient(&self) -> &DVector<f64> {
        &self.g
    }

    pub fn lower(&self) -> &DVector<f64> {
        &self.lb
    }

    pub fn upper(&self) -> &DVector<f64> {
        &self.ub
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        let soft = self.soft.as_ref().map_or(0.0, |s| s.penalty(z));
        0.5 * z.dot(&(&self.h * z)) + self.g.dot(z) + soft
    }

    /// Gradient of the full objective, penalties included.
    pub fn full_gradient(&self, z: &DVector<f64>) -> DVector<f64> {
        let mut grad = &self.h * z + &self.g;
        if let Some(s) = &self.soft {
            grad += s.a.tr_mul(&s.violation(z)) * s.rho;
        }
        grad
    }

    pub fn project(&self, z: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(z.len(), z.iter().enumerate().map(|(i, &x)| x.max(self.lb[i]).min(self.ub[i])))
    }

    fn residual(&self, z: &DVector<f64>, grad: &DVector<f64>) -> f64 {
        self.residual_with(z, grad, self.lipschitz)
    }

    fn residual_with(&self, z: &DVector<f64>, grad: &DVector<f64>, l: f64) -> f64 {
        let mut acc = 0.0;
        for i in 0..z.len() {
            let step = (z[i] - grad[i] / l).max(self.lb[i]).min(self.ub[i]);
            let d = l * (z[i] - step);
            acc += d * d;
        }
        acc.sqrt()
    }
}

/// Fast gradient solve with iteration cap and optional warm start.
pub fn solve(problem: &QpProblem, warm: Option<&DVector<f64>>, max_iter: usize, tol: f64) -> Result<QpSolution, QpError> {
    if max_iter == 0 {
        return Err(QpError::ZeroIterations);
    }
    let n = problem.dim();
    let start = match warm {
        Some(w) if w.len() == n => w.clone(),
        Some(w) => return Err(QpError::Dimension(format!("warm start has {} entries, expected {n}", w.len()))),
        None => DVector::zeros(n),
    };
    check_finite_v(&start, "warm start")?;
    if let Some(soft) = &problem.soft {
        return solve_soft(problem, soft, start, max_iter, tol);
    }

    let h = &problem.h;
    let g = &problem.g;
    let l = problem.lipschitz;
    let beta = momentum(l, problem.mu);
    let mut z = problem.project(&start);
    let mut gz = h * &z + g;
    let mut y = z.clone();
    let mut gy = gz.clone();
    let mut residual = problem.residual(&z, &gz);
    let mut k = 1;
    loop {
        if residual <= tol {
            return Ok(QpSolution { z, iterations: k, converged: true, residual });
        }
        if k == max_iter {
            return Ok(QpSolution { z, iterations: k, converged: false, residual });
        }
        let mut z_next = y.clone();
        z_next.axpy(-1.0 / l, &gy, 1.0);
        let z_next = problem.project(&z_next);
        let gz_next = h * &z_next + g;
        // Gradients are affine, so the extrapolated gradient needs no extra product.
        y = &z_next * (1.0 + beta) - &z * beta;
        gy = &gz_next * (1.0 + beta) - &gz * beta;
        z = z_next;
        gz = gz_next;
        residual = problem.residual(&z, &gz);
        k += 1;
    }
}

fn momentum(l: f64, mu: f64) -> f64 {
    let (sl, sm) = (l.sqrt(), mu.sqrt());
    (sl - sm) / (sl + sm)
}

/// The penalty gradient is only piecewise affine, so it is evaluated at the
/// extrapolated point each iteration. `L` covers the quadratic part plus every
/// row seen violated so far; a newly violated row raises it and restarts the
/// momentum. The reported residual is the gradient mapping at that point.
fn solve_soft(
    problem: &QpProblem,
    soft: &SoftRows,
    start: DVector<f64>,
    max_iter: usize,
    tol: f64,
) -> Result<QpSolution, QpError> {
    let mut seen = vec![false; soft.len()];
    let mut l = problem.lipschitz;
    let mut z = problem.project(&start);
    for i in soft.active(&z) {
        seen[i] = true;
        l += soft.rho * soft.norms_sq[i];
    }
    let mut beta = momentum(l, problem.mu);
    let mut y = z.clone();
    let mut k = 0;
    loop {
        k += 1;
        let viol = soft.violation(&y);
        let mut grew = false;
        for i in 0..viol.len() {
            if viol[i] != 0.0 && !seen[i] {
                seen[i] = true;
                l += soft.rho * soft.norms_sq[i];
                grew = true;
            }
        }
        if grew {
            beta = momentum(l, problem.mu);
            if y != z {
                y = z.clone();
                if k == max_iter {
                    let residual = problem.residual_with(&z, &problem.full_gradient(&z), l);
                    return Ok(QpSolution { z, iterations: k, converged: residual <= tol, residual });
                }
                continue;
            }
        }
        let mut grad = &problem.h * &y + &problem.g;
        grad += soft.a.tr_mul(&viol) * soft.rho;
        let residual = problem.residual_with(&y, &grad, l);
        let mut z_next = y.clone();
        z_next.axpy(-1.0 / l, &grad, 1.0);
        let z_next = problem.project(&z_next);
        if residual <= tol {
            return Ok(QpSolution { z: z_next, iterations: k, converged: true, residual });
        }
        if k == max_iter {
            return Ok(QpSolution { z: z_next, iterations: k, converged: false, residual });
        }
        y = &z_next * (1.0 + beta) - &z * beta;
        z = z_next;
    }
}

const POWER_MAX_ITER: usize = 500_000;
const POWER_TOL: f64 = 1e-11;

fn power_iteration(m: &DMatrix<f64>) -> Result<f64, QpError> {
    let n = m.nrows();
    if n == 0 {
        return Ok(0.0);
    }
    let scale = m.amax().max(f64::MIN_POSITIVE);
    // Deterministic, generic start vector.
    let mut x = DVector::from_fn(n, |i, _| 1.0 + 0.37 * ((i as f64 + 1.0) * 0.61).sin());
    x.normalize_mut();
    let mut theta = f64::NAN;
    let mut stalled = 0;
    for _ in 0..POWER_MAX_ITER {
        let mx = m * &x;
        let next = x.dot(&mx);
        let r = (&mx - &x * next).norm();
        if r <= POWER_TOL * scale {
            return Ok(next);
        }
        // With clustered top eigenvalues the vector wanders inside the
        // cluster while the Rayleigh quotient has already settled.
        if (next - theta).abs() <= 1e-15 * scale {
            stalled += 1;
            if stalled >= 50 {
                return Ok(next);
            }
        } else {
            stalled = 0;
        }
        theta = next;
        let norm = mx.norm();
        if norm == 0.0 {
            return Ok(0.0);
        }
        x = mx / norm;
    }
    Err(QpError::EigenNoConvergence(POWER_MAX_ITER))
}

/// Largest eigenvalue of a symmetric positive semidefinite matrix.
pub fn max_eig(h: &DMatrix<f64>) -> Result<f64, QpError> {
    if h.nrows() != h.ncols() {
        return Err(QpError::Dimension(format!("{}x{} is not square", h.nrows(), h.ncols())));
    }
    check_finite_m(h, "H")?;
    power_iteration(h)
}

/// Largest and smallest eigenvalue of a symmetric positive semidefinite matrix:
/// power iteration on `H`, then on `L·I − H`.
pub fn extremal_eigs(h: &DMatrix<f64>) -> Result<(f64, f64), QpError> {
    if h.nrows() != h.ncols() {
        return Err(QpError::Dimension(format!("{}x{} is not square", h.nrows(), h.ncols())));
    }
    check_finite_m(h, "H")?;
    let asym = asymmetry(h);
    if asym > SYMMETRY_TOL {
        return Err(QpError::NotSymmetric(asym));
    }
    let l = power_iteration(h)?;
    let n = h.nrows();
    let shifted = DMatrix::<f64>::identity(n, n) * l - h;
    let top = power_iteration(&shifted)?;
    Ok((l, l - top))
}

pub const DARE_MAX_ITER: usize = 100_000;

/// Stabilizing solution of `P = AᵀPA − AᵀPB(R+BᵀPB)⁻¹BᵀPA + Q` by fixed-point
/// iteration from `P = Q`, stopped when `‖ΔP‖∞ ≤ 1e-12·min(1, ‖P‖∞)`. The step equals the
/// Riccati residual at the previous iterate.
pub fn dare(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DMatrix<f64>, QpError> {
    let n = a.nrows();
    let m = b.ncols();
    if a.ncols() != n || b.nrows() != n || q.shape() != (n, n) || r.shape() != (m, m) {
        return Err(QpError::Dimension(format!("A {:?}, B {:?}, Q {:?}, R {:?}", a.shape(), b.shape(), q.shape(), r.shape())));
    }
    for (mat, what) in [(a, "A"), (b, "B"), (q, "Q"), (r, "R")] {
        check_finite_m(mat, what)?;
    }
    let at = a.transpose();
    let bt = b.transpose();
    let mut p = q.clone();
    for _ in 0..DARE_MAX_ITER {
        let pa = &p * a;
        let pb = &p * b;
        let s = r + &bt * &pb;
        let chol = s.clone().cholesky().ok_or(QpError::Singular("R + BᵀPB"))?;
        let gain = chol.solve(&(&bt * &pa));
        let mut next = &at * &pa - (&at * &pb) * gain + q;
        next = (&next + next.transpose()) * 0.5;
        if !next.iter().all(|x| x.is_finite()) {
            return Err(QpError::NonStabilizable(DARE_MAX_ITER));
        }
        let delta = (&next - &p).amax();
        p = next;
        if delta <= 1e-12 * p.amax().min(1.0) {
            return Ok(p);
        }
    }
    Err(QpError::NonStabilizable(DARE_MAX_ITER))
}

/// Residual of the Riccati equation at `P`, in max-norm.
pub fn dare_residual(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> f64 {
    let at = a.transpose();
    let bt = b.transpose();
    let s = r + &bt * p * b;
    let inv = s.try_inverse().expect("R + BᵀPB invertible");
    let res = &at * p * a - p - &at * p * b * inv * &bt * p * a + q;
    res.amax()
}

/// LQR feedback `K = (R + BᵀPB)⁻¹BᵀPA` for the law `u = −Kx`.
pub fn lqr_gain(a: &DMatrix<f64>, b: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> Result<DMatrix<f64>, QpError> {
    let bt = b.transpose();
    let s = r + &bt * p * b;
    let chol = s.cholesky().ok_or(QpError::Singular("R + BᵀPB"))?;
    Ok(chol.solve(&(&bt * p * a)))
}
