//! Condensed-horizon MPC for the ball-and-beam and the Kalman filter that
//! feeds it.
//!
//! The controller tracks a set-point by regulating the shifted state
//! `x̃ = x − (setpoint, 0, 0)` to zero. Inputs over the horizon are the only
//! decision variables; predicted states are `X̃ = Φ·x̃₀ + Γ·U`. Stage cost is
//! `x̃ᵀQx̃ + R·u²`, terminal cost uses the Riccati solution `P`. Position and
//! angle bounds are soft: rows of the prediction that the warm-start plan
//! pushes past a bound get a quadratic penalty folded into `H` and `g`, so
//! the QP stays a pure box over inputs.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::plant::{Measurement, PlantParams};
use crate::qp::{self, QpError, QpProblem, SoftRows};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ControlError {
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error("invalid MPC configuration: {0}")]
    Config(String),
    #[error("condensed Hessian condition number {0:e} exceeds 1e12")]
    IllConditioned(f64),
    #[error("innovation covariance is singular")]
    SingularInnovation,
    #[error("malformed controller state bytes: {0}")]
    Decode(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcConfig {
    /// Sampling period (s).
    pub sample_period: f64,
    pub horizon: usize,
    /// Diagonal of the stage state weight for (position, velocity, angle).
    pub q_diag: [f64; 3],
    pub r: f64,
    pub u_min: f64,
    pub u_max: f64,
    /// Soft bound on |position| (m).
    #[serde(with = "crate::optional")]
    pub pos_bound: Option<f64>,
    /// Soft bound on |angle| (rad).
    #[serde(with = "crate::optional")]
    pub angle_bound: Option<f64>,
    pub soft_penalty: f64,
    /// Solver iteration cap; hitting it is a "no solution" event.
    pub max_iter_cap: usize,
    /// Stopping tolerance on the gradient-mapping norm.
    pub tol: f64,
}

impl Default for MpcConfig {
    fn default() -> Self {
        MpcConfig {
            sample_period: 0.05,
            horizon: 40,
            q_diag: [10.0, 1.0, 1.0],
            r: 1.0,
            u_min: -1.0,
            u_max: 1.0,
            pos_bound: Some(0.53),
            angle_bound: None,
            soft_penalty: 5e5,
            max_iter_cap: 9_000,
            tol: 1e-6,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<(), ControlError> {
        let bad = |m: &str| Err(ControlError::Config(m.to_owned()));
        if !(self.sample_period > 0.0) {
            return bad("sample_period must be positive");
        }
        if self.horizon < 1 {
            return bad("horizon must be at least 1");
        }
        if self.q_diag.iter().any(|q| !(*q >= 0.0)) {
            return bad("state weights must be non-negative");
        }
        if !(self.r > 0.0) {
            return bad("input weight r must be positive");
        }
        if !(self.u_min <= self.u_max) {
            return bad("u_min must not exceed u_max");
        }
        if !(self.soft_penalty >= 0.0) {
            return bad("soft_penalty must be non-negative");
        }
        if self.max_iter_cap < 1 {
            return bad("max_iter_cap must be at least 1");
        }
        if !(self.tol > 0.0) {
            return bad("tol must be positive");
        }
        Ok(())
    }
}

/// Noise model and output map of the state estimator.
#[derive(Clone, Debug, PartialEq)]
pub struct KalmanConfig {
    pub a: Matrix3<f64>,
    pub b: Vector3<f64>,
    pub c: Matrix2x3<f64>,
    pub w: Matrix3<f64>,
    pub v: Matrix2<f64>,
}

impl KalmanConfig {
    /// Derives the filter from the plant's noise and quantization levels.
    pub fn for_plant(params: &PlantParams, h: f64) -> Self {
        let (a, b) = params.discrete_model(h);
        let quant = |s: Option<f64>| s.map_or(0.0, |s| s * s / 12.0);
        let proc_var = params.sigma_proc.powi(2) * (h / params.noise_period);
        // A small floor on position/angle keeps the model honest about
        // quantization and clamp effects the linear model ignores.
        let w = Matrix3::from_diagonal(&Vector3::new(1e-8, proc_var.max(1e-10), 1e-8));
        let v = Matrix2::from_diagonal(&Vector2::new(
            params.sigma_pos.powi(2) + quant(params.position_step()) + 1e-12,
            params.sigma_ang.powi(2) + quant(params.angle_step()) + 1e-12,
        ));
        KalmanConfig { a, b, c: Matrix2x3::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0), w, v }
    }
}

/// Everything the MPC actor carries between firings; exactly what migrates.
#[derive(Clone, Debug, PartialEq)]
pub struct ControllerState {
    pub x_hat: Vector3<f64>,
    pub p_cov: Matrix3<f64>,
    pub setpoint: f64,
    pub last_u: f64,
    pub warm: Vec<f64>,
    pub trace_meta: TraceMeta,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub run_id: u64,
    pub sample_seq: u64,
}

impl ControllerState {
    pub fn new(horizon: usize, setpoint: f64, run_id: u64) -> Self {
        ControllerState {
            x_hat: Vector3::new(0.0, 0.0, 0.0),
            p_cov: Matrix3::from_diagonal(&Vector3::new(1e-4, 1e-2, 1e-4)),
            setpoint,
            last_u: 0.0,
            warm: vec![0.0; horizon],
            trace_meta: TraceMeta { run_id, sample_seq: 0 },
        }
    }

    /// Canonical byte layout, all little-endian:
    ///
    /// | field       | encoding                        |
    /// |-------------|---------------------------------|
    /// | magic       | `b"ECS1"`                       |
    /// | x_hat       | 3 × f64 (p, v, alpha)           |
    /// | p_cov       | 9 × f64, row-major              |
    /// | setpoint    | f64                             |
    /// | last_u      | f64                             |
    /// | warm        | u32 length, then length × f64   |
    /// | run_id      | u64                             |
    /// | sample_seq  | u64                             |
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 8 * (14 + self.warm.len()) + 4 + 16);
        out.extend_from_slice(STATE_MAGIC);
        for x in self.x_hat.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
        for i in 0..3 {
            for j in 0..3 {
                out.extend_from_slice(&self.p_cov[(i, j)].to_le_bytes());
            }
        }
        out.extend_from_slice(&self.setpoint.to_le_bytes());
        out.extend_from_slice(&self.last_u.to_le_bytes());
        out.extend_from_slice(&(self.warm.len() as u32).to_le_bytes());
        for w in &self.warm {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out.extend_from_slice(&self.trace_meta.run_id.to_le_bytes());
        out.extend_from_slice(&self.trace_meta.sample_seq.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ControlError> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != STATE_MAGIC {
            return Err(ControlError::Decode("bad magic".into()));
        }
        let x_hat = Vector3::new(r.f64()?, r.f64()?, r.f64()?);
        let mut p_cov = Matrix3::zeros();
        for i in 0..3 {
            for j in 0..3 {
                p_cov[(i, j)] = r.f64()?;
            }
        }
        let setpoint = r.f64()?;
        let last_u = r.f64()?;
        let n = r.u32()? as usize;
        let warm = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
        let run_id = r.u64()?;
        let sample_seq = r.u64()?;
        if r.pos != bytes.len() {
            return Err(ControlError::Decode(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(ControllerState { x_hat, p_cov, setpoint, last_u, warm, trace_meta: TraceMeta { run_id, sample_seq } })
    }
}

const STATE_MAGIC: &[u8; 4] = b"ECS1";

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ControlError> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(ControlError::Decode(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn f64(&mut self) -> Result<f64, ControlError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn u64(&mut self) -> Result<u64, ControlError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn u32(&mut self) -> Result<u32, ControlError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Prediction matrices and the input-only Hessian over the horizon.
#[derive(Clone, Debug)]
pub struct Condensed {
    /// `3T × 3`: stacked `A^k`, k = 1..T.
    pub phi: DMatrix<f64>,
    /// `3T × T`: block lower-triangular `A^(k-1-j) B`.
    pub gamma: DMatrix<f64>,
    /// Diagonal of `Q̄ = blockdiag(Q, …, Q, P)`, stored as full blocks.
    pub qbar: DMatrix<f64>,
    /// `H = ΓᵀQ̄Γ + R·I`.
    pub hessian: DMatrix<f64>,
    /// `F = ΓᵀQ̄Φ`, so `g = F·x̃₀`.
    pub linear: DMatrix<f64>,
    pub lipschitz: f64,
    pub mu: f64,
}

/// Builds the condensed QP data for `horizon` steps of `(A, B)`.
pub fn build_condensed(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    terminal: &DMatrix<f64>,
    r: f64,
    horizon: usize,
) -> Result<Condensed, ControlError> {
    let nx = a.nrows();
    let nu = b.ncols();
    if horizon == 0 {
        return Err(ControlError::Config("horizon must be at least 1".into()));
    }
    let t = horizon;
    let mut phi = DMatrix::zeros(nx * t, nx);
    let mut gamma = DMatrix::zeros(nx * t, nu * t);
    let mut power = a.clone();
    // A^(k) B blocks, reused along each sub-diagonal.
    let mut ab = Vec::with_capacity(t);
    let mut apow_b = b.clone();
    for k in 0..t {
        phi.view_mut((nx * k, 0), (nx, nx)).copy_from(&power);
        power = a * &power;
        ab.push(apow_b.clone());
        apow_b = a * &apow_b;
    }
    for row in 0..t {
        for col in 0..=row {
            gamma.view_mut((nx * row, nu * col), (nx, nu)).copy_from(&ab[row - col]);
        }
    }
    let mut qbar = DMatrix::zeros(nx * t, nx * t);
    for k in 0..t {
        let w = if k + 1 == t { terminal } else { q };
        qbar.view_mut((nx * k, nx * k), (nx, nx)).copy_from(w);
    }
    let gt_q = gamma.transpose() * &qbar;
    let mut hessian = &gt_q * &gamma + DMatrix::<f64>::identity(nu * t, nu * t) * r;
    hessian = (&hessian + hessian.transpose()) * 0.5;
    let linear = &gt_q * &phi;
    // ΓᵀQ̄Γ is PSD, so r bounds the spectrum from below exactly; power
    // iteration on L·I − H would crawl through the cluster of eigenvalues
    // sitting just above r.
    let lipschitz = qp::max_eig(&hessian)?;
    let mu = r;
    if !(mu > 0.0) {
        return Err(ControlError::Qp(QpError::NotPositiveDefinite(mu)));
    }
    let cond = lipschitz / mu;
    if cond > 1e12 {
        return Err(ControlError::IllConditioned(cond));
    }
    Ok(Condensed { phi, gamma, qbar, hessian, linear, lipschitz, mu })
}

/// What one controller invocation produced.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub u: f64,
    pub iterations: usize,
    pub converged: bool,
    pub residual: f64,
    pub active_soft_rows: usize,
}

/// The assembled controller: model, condensed QP data and filter.
#[derive(Clone, Debug)]
pub struct Mpc {
    cfg: MpcConfig,
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    terminal: DMatrix<f64>,
    condensed: Condensed,
    kalman: KalmanConfig,
}

impl Mpc {
    pub fn new(cfg: MpcConfig, plant: &PlantParams) -> Result<Self, ControlError> {
        cfg.validate()?;
        let kalman = KalmanConfig::for_plant(plant, cfg.sample_period);
        let a = DMatrix::from_iterator(3, 3, kalman.a.iter().copied());
        let b = DMatrix::from_iterator(3, 1, kalman.b.iter().copied());
        let q = DMatrix::from_diagonal(&DVector::from_row_slice(&cfg.q_diag));
        let r = DMatrix::from_element(1, 1, cfg.r);
        let terminal = qp::dare(&a, &b, &q, &r)?;
        let condensed = build_condensed(&a, &b, &q, &terminal, cfg.r, cfg.horizon)?;
        Ok(Mpc { cfg, a, b, terminal, condensed, kalman })
    }

    pub fn config(&self) -> &MpcConfig {
        &self.cfg
    }

    pub fn kalman(&self) -> &KalmanConfig {
        &self.kalman
    }

    pub fn condensed(&self) -> &Condensed {
        &self.condensed
    }

    pub fn terminal_weight(&self) -> &DMatrix<f64> {
        &self.terminal
    }

    pub fn model(&self) -> (&DMatrix<f64>, &DMatrix<f64>) {
        (&self.a, &self.b)
    }

    pub fn initial_state(&self, setpoint: f64, run_id: u64) -> ControllerState {
        ControllerState::new(self.cfg.horizon, setpoint, run_id)
    }

    /// Assembles the QP for shifted initial state `x_tilde` and set-point.
    pub fn qp_for(&self, x_tilde: &Vector3<f64>, setpoint: f64) -> Result<QpProblem, ControlError> {
        let c = &self.condensed;
        let t = self.cfg.horizon;
        let x0 = DVector::from_column_slice(x_tilde.as_slice());
        let g = &c.linear * &x0;
        let lb = DVector::from_element(t, self.cfg.u_min);
        let ub = DVector::from_element(t, self.cfg.u_max);
        let problem = QpProblem::with_spectrum(c.hessian.clone(), g, lb, ub, c.lipschitz, c.mu)?;
        if !(self.cfg.soft_penalty > 0.0) {
            return Ok(problem);
        }

        let free = &c.phi * &x0;
        // (row of Γ, lower, upper) in shifted coordinates, minus the free response.
        let mut rows: Vec<(usize, f64, f64)> = Vec::new();
        for k in 0..t {
            if let Some(pb) = self.cfg.pos_bound {
                let i = 3 * k;
                rows.push((i, -pb - setpoint - free[i], pb - setpoint - free[i]));
            }
            if let Some(ab) = self.cfg.angle_bound {
                let i = 3 * k + 2;
                rows.push((i, -ab - free[i], ab - free[i]));
            }
        }
        // Rows no input in the box can violate never enter the penalty.
        rows.retain(|&(i, lo, hi)| {
            let (mut min, mut max) = (0.0, 0.0);
            for j in 0..t {
                let a = c.gamma[(i, j)];
                let (x, y) = (a * self.cfg.u_min, a * self.cfg.u_max);
                min += x.min(y);
                max += x.max(y);
            }
            min < lo || max > hi
        });
        if rows.is_empty() {
            return Ok(problem);
        }
        let a = DMatrix::from_fn(rows.len(), t, |r, j| c.gamma[(rows[r].0, j)]);
        let lo = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.1));
        let hi = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.2));
        Ok(problem.with_soft_rows(SoftRows::new(a, lo, hi, self.cfg.soft_penalty)?)?)
    }

    /// One sample: filter update, QP solve, warm-start shift, filter predict.
    ///
    /// A capped (non-converged) solve still yields an input; the report flags it.
    pub fn step(&self, cs: &mut ControllerState, meas: &Measurement) -> Result<StepReport, ControlError> {
        kalman_update(cs, meas, &self.kalman)?;
        let x_tilde = cs.x_hat - Vector3::new(cs.setpoint, 0.0, 0.0);
        let warm = DVector::from_column_slice(&cs.warm);
        let problem = self.qp_for(&x_tilde, cs.setpoint)?;
        let sol = qp::solve(&problem, Some(&warm), self.cfg.max_iter_cap, self.cfg.tol)?;
        let active = problem.soft_rows().map_or(0, |s| s.active(&sol.z).len());
        let u = sol.z[0].clamp(self.cfg.u_min, self.cfg.u_max);
        let n = sol.z.len();
        for i in 0..n {
            cs.warm[i] = sol.z[(i + 1).min(n - 1)];
        }
        cs.last_u = u;
        cs.trace_meta.sample_seq += 1;
        kalman_predict(cs, u, &self.kalman);
        Ok(StepReport {
            u,
            iterations: sol.iterations,
            converged: sol.converged,
            residual: sol.residual,
            active_soft_rows: active,
        })
    }
}

fn symmetrize(m: &Matrix3<f64>) -> Matrix3<f64> {
    (m + m.transpose()) * 0.5
}

pub fn kalman_predict(cs: &mut ControllerState, u: f64, cfg: &KalmanConfig) {
    cs.x_hat = cfg.a * cs.x_hat + cfg.b * u;
    cs.p_cov = symmetrize(&(cfg.a * cs.p_cov * cfg.a.transpose() + cfg.w));
}

pub fn kalman_gain(p_cov: &Matrix3<f64>, cfg: &KalmanConfig) -> Result<nalgebra::Matrix3x2<f64>, ControlError> {
    let s = cfg.c * p_cov * cfg.c.transpose() + cfg.v;
    let s_inv = s.try_inverse().ok_or(ControlError::SingularInnovation)?;
    Ok(p_cov * cfg.c.transpose() * s_inv)
}

pub fn kalman_update(cs: &mut ControllerState, meas: &Measurement, cfg: &KalmanConfig) -> Result<(), ControlError> {
    let k = kalman_gain(&cs.p_cov, cfg)?;
    let y = Vector2::new(meas.pos_reading, meas.ang_reading);
    cs.x_hat += k * (y - cfg.c * cs.x_hat);
    cs.p_cov = symmetrize(&((Matrix3::identity() - k * cfg.c) * cs.p_cov));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::des::SimTime;

    fn meas(p: f64, a: f64) -> Measurement {
        Measurement { pos_reading: p, ang_reading: a, stamp: SimTime::ZERO }
    }

    fn scalar(x: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, x)
    }

    #[test]
    fn horizon_one_is_the_model() {
        let params = PlantParams::default();
        let (a3, b3) = params.discrete_model(0.05);
        let a = DMatrix::from_iterator(3, 3, a3.iter().copied());
        let b = DMatrix::from_iterator(3, 1, b3.iter().copied());
        let q = DMatrix::identity(3, 3);
        let c = build_condensed(&a, &b, &q, &q, 1.0, 1).unwrap();
        assert_eq!(c.phi, a);
        assert_eq!(c.gamma, b);
    }

    #[test]
    fn identity_dynamics_stack_identities() {
        let a = DMatrix::identity(3, 3);
        let b = DMatrix::from_row_slice(3, 1, &[0.0, 0.0, 1.0]);
        let q = DMatrix::identity(3, 3);
        let c = build_condensed(&a, &b, &q, &q, 1.0, 4).unwrap();
        for k in 0..4 {
            assert_eq!(c.phi.view((3 * k, 0), (3, 3)).clone_owned(), DMatrix::identity(3, 3));
        }
    }

    #[test]
    fn scalar_integrator_gamma_is_lower_triangular_ones() {
        let c = build_condensed(&scalar(1.0), &scalar(1.0), &scalar(1.0), &scalar(1.0), 1.0, 3).unwrap();
        let want = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0]);
        assert_eq!(c.gamma, want);
    }

    #[test]
    fn at_equilibrium_the_input_is_zero() {
        let plant = PlantParams::default().noiseless();
        let mpc = Mpc::new(MpcConfig::default(), &plant).unwrap();
        let mut cs = mpc.initial_state(0.2, 0);
        cs.x_hat = Vector3::new(0.2, 0.0, 0.0);
        let rep = mpc.step(&mut cs, &meas(0.2, 0.0)).unwrap();
        assert!(rep.u.abs() <= 1e-9, "u = {}", rep.u);
        assert!(rep.converged);
    }

    #[test]
    fn degenerate_input_box_gives_zero_quickly() {
        let plant = PlantParams::default();
        let cfg = MpcConfig { u_min: 0.0, u_max: 0.0, ..MpcConfig::default() };
        let mpc = Mpc::new(cfg, &plant).unwrap();
        let mut cs = mpc.initial_state(0.3, 0);
        let rep = mpc.step(&mut cs, &meas(0.0, 0.01)).unwrap();
        assert_eq!(rep.u, 0.0);
        assert!(rep.converged && rep.iterations <= 2);
    }

    #[test]
    fn input_stays_in_bounds_even_when_capped() {
        let plant = PlantParams::default();
        let cfg = MpcConfig { max_iter_cap: 2, u_min: -0.3, u_max: 0.2, ..MpcConfig::default() };
        let mpc = Mpc::new(cfg, &plant).unwrap();
        let mut cs = mpc.initial_state(0.4, 0);
        let rep = mpc.step(&mut cs, &meas(-0.3, 0.1)).unwrap();
        assert!(!rep.converged);
        assert!((-0.3..=0.2).contains(&rep.u));
    }

    #[test]
    fn controller_state_round_trips_bytes() {
        let mut cs = ControllerState::new(5, 0.25, 77);
        cs.x_hat = Vector3::new(0.1, -0.2, 0.003);
        cs.warm = vec![0.1, 0.2, -0.3, 0.4, f64::MIN_POSITIVE];
        cs.trace_meta.sample_seq = 12345;
        let bytes = cs.to_bytes();
        assert_eq!(bytes.len(), 4 + 8 * 14 + 4 + 8 * 5 + 16);
        let back = ControllerState::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back, cs);
        assert!(ControllerState::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(ControllerState::from_bytes(&bad).is_err());
    }

    #[test]
    fn predict_grows_covariance_by_w_for_identity_model() {
        let cfg = KalmanConfig {
            a: Matrix3::identity(),
            b: Vector3::zeros(),
            c: Matrix2x3::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0),
            w: Matrix3::identity() * 0.5,
            v: Matrix2::identity(),
        };
        let mut cs = ControllerState::new(1, 0.0, 0);
        let p0 = cs.p_cov;
        for k in 1..=4 {
            kalman_predict(&mut cs, 0.3, &cfg);
            assert!((cs.p_cov - (p0 + cfg.w * k as f64)).amax() < 1e-15);
        }
    }

    #[test]
    fn exact_model_prediction_tracks_truth() {
        let plant = PlantParams::default().noiseless();
        let kf = KalmanConfig { w: Matrix3::zeros(), ..KalmanConfig::for_plant(&plant, 0.05) };
        let mut cs = ControllerState::new(1, 0.0, 0);
        let mut truth = crate::plant::PlantState::at(0.1, -0.05, 0.02);
        cs.x_hat = truth.vector();
        for k in 0..50 {
            let u = 0.1 * ((k as f64) * 0.3).sin();
            kalman_predict(&mut cs, u, &kf);
            truth = crate::plant::propagate(&plant, &truth, u, 0.05).unwrap();
            assert!((cs.x_hat - truth.vector()).amax() < 1e-12);
            let asym = (cs.p_cov - cs.p_cov.transpose()).amax();
            assert!(asym <= 1e-12);
        }
    }

    #[test]
    fn near_noiseless_update_snaps_to_measurement() {
        let cfg = KalmanConfig { v: Matrix2::identity() * 1e-14, ..KalmanConfig::for_plant(&PlantParams::default(), 0.05) };
        let mut cs = ControllerState::new(1, 0.0, 0);
        kalman_update(&mut cs, &meas(0.31, -0.04), &cfg).unwrap();
        assert!((cs.x_hat[0] - 0.31).abs() < 1e-8);
        assert!((cs.x_hat[2] + 0.04).abs() < 1e-8);
    }

    #[test]
    fn singular_innovation_is_an_error() {
        let cfg = KalmanConfig { v: Matrix2::zeros(), ..KalmanConfig::for_plant(&PlantParams::default(), 0.05) };
        let mut cs = ControllerState::new(1, 0.0, 0);
        cs.p_cov = Matrix3::zeros();
        assert_eq!(kalman_update(&mut cs, &meas(0.0, 0.0), &cfg), Err(ControlError::SingularInnovation));
    }

    #[test]
    fn config_validation() {
        assert!(MpcConfig::default().validate().is_ok());
        let bad = MpcConfig { u_min: 1.0, u_max: -1.0, ..MpcConfig::default() };
        assert!(bad.validate().is_err());
        let bad = MpcConfig { horizon: 0, ..MpcConfig::default() };
        assert!(bad.validate().is_err());
    }
}
