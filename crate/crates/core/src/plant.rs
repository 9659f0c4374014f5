//! Linearized ball-and-beam: ball position `p`, ball velocity `v`, beam angle
//! `alpha`, driven by the beam's angular velocity command `u`.
//!
//! ```text
//! p' = v,   v' = k_v * alpha,   alpha' = k_omega * u,   |alpha| <= alpha_max
//! ```
//!
//! Sign convention: `k_v < 0`, so a positive beam angle accelerates the ball
//! toward negative `p`. The beam centre is `p = 0`.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::des::{RngStream, SimTime};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PlantError {
    #[error("non-finite plant input u = {0}")]
    NonFiniteInput(f64),
    #[error("non-finite plant state ({p}, {v}, {alpha})")]
    NonFiniteState { p: f64, v: f64, alpha: f64 },
    #[error("step length must be positive, got {0}")]
    BadStep(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantParams {
    /// Beam length in metres.
    pub beam_length: f64,
    /// Ball acceleration per radian of beam angle (m/s^2/rad); negative.
    pub k_v: f64,
    /// Beam angular rate per unit input (rad/s).
    pub k_omega: f64,
    pub alpha_max: f64,
    /// Position sensor noise std dev (m).
    pub sigma_pos: f64,
    /// Angle sensor noise std dev (rad).
    pub sigma_ang: f64,
    /// Velocity process noise std dev accumulated over `noise_period` (m/s).
    pub sigma_proc: f64,
    /// Interval at which process noise is injected (s).
    pub noise_period: f64,
    /// ADC resolution; `None` disables quantization.
    #[serde(with = "crate::optional")]
    pub adc_bits: Option<u32>,
    /// Full measurement range of the angle sensor (rad), centred on zero.
    pub angle_range: f64,
    /// Hardware input limit; the DAC clips to `[-u_max_hw, u_max_hw]`.
    pub u_max_hw: f64,
}

impl Default for PlantParams {
    fn default() -> Self {
        PlantParams {
            beam_length: 1.10,
            k_v: -(5.0 / 7.0) * 9.81,
            k_omega: 0.17,
            alpha_max: 0.20,
            sigma_pos: 0.003,
            sigma_ang: 0.002,
            sigma_proc: 0.001,
            noise_period: 0.05,
            adc_bits: Some(10),
            angle_range: 0.5,
            u_max_hw: 2.0,
        }
    }
}

impl PlantParams {
    /// Noise-free, unquantized variant (useful for exactness checks).
    pub fn noiseless(mut self) -> Self {
        self.sigma_pos = 0.0;
        self.sigma_ang = 0.0;
        self.sigma_proc = 0.0;
        self.adc_bits = None;
        self
    }

    pub fn half_length(&self) -> f64 {
        0.5 * self.beam_length
    }

    /// Exact zero-order-hold discretization `(A, B)` of the unclamped chain.
    pub fn discrete_model(&self, h: f64) -> (Matrix3<f64>, Vector3<f64>) {
        let kv = self.k_v;
        let kw = self.k_omega;
        #[rustfmt::skip]
        let a = Matrix3::new(
            1.0, h,   0.5 * kv * h * h,
            0.0, 1.0, kv * h,
            0.0, 0.0, 1.0,
        );
        let b = Vector3::new(kv * kw * h * h * h / 6.0, 0.5 * kv * kw * h * h, kw * h);
        (a, b)
    }

    pub fn position_step(&self) -> Option<f64> {
        self.adc_bits.map(|b| self.beam_length / 2f64.powi(b as i32))
    }

    pub fn angle_step(&self) -> Option<f64> {
        self.adc_bits.map(|b| self.angle_range / 2f64.powi(b as i32))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PlantState {
    pub p: f64,
    pub v: f64,
    pub alpha: f64,
    pub off_beam: bool,
}

impl PlantState {
    pub fn at(p: f64, v: f64, alpha: f64) -> Self {
        PlantState { p, v, alpha, off_beam: false }
    }

    pub fn vector(&self) -> Vector3<f64> {
        Vector3::new(self.p, self.v, self.alpha)
    }

    fn check_finite(&self) -> Result<(), PlantError> {
        if self.p.is_finite() && self.v.is_finite() && self.alpha.is_finite() {
            Ok(())
        } else {
            Err(PlantError::NonFiniteState { p: self.p, v: self.v, alpha: self.alpha })
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub pos_reading: f64,
    pub ang_reading: f64,
    pub stamp: SimTime,
}

// Constant-input motion of the chain for `t` seconds with no clamp.
fn free_motion(s: &PlantState, kv: f64, rate: f64, t: f64) -> PlantState {
    PlantState {
        p: s.p + s.v * t + kv * (0.5 * s.alpha * t * t + rate * t * t * t / 6.0),
        v: s.v + kv * (s.alpha * t + 0.5 * rate * t * t),
        alpha: s.alpha + rate * t,
        off_beam: s.off_beam,
    }
}

/// Exact noise-free propagation over `h` seconds, including the angle clamp.
///
/// When the beam reaches `±alpha_max` mid-interval, the interval is split at
/// the saturation instant and the angle is held for the remainder, so the
/// result composes exactly: `propagate(h) == propagate(h/2) ∘ propagate(h/2)`.
pub fn propagate(params: &PlantParams, state: &PlantState, u: f64, h: f64) -> Result<PlantState, PlantError> {
    if !u.is_finite() {
        return Err(PlantError::NonFiniteInput(u));
    }
    state.check_finite()?;
    if !(h > 0.0) || !h.is_finite() {
        return Err(PlantError::BadStep(h));
    }
    if state.off_beam {
        return Ok(*state);
    }
    let kv = params.k_v;
    let amax = params.alpha_max;
    let mut s = *state;
    s.alpha = s.alpha.clamp(-amax, amax);
    let rate = params.k_omega * u;

    let limit = if rate > 0.0 { amax } else { -amax };
    let to_limit = if rate != 0.0 { (limit - s.alpha) / rate } else { f64::INFINITY };
    let mut next = if to_limit >= h {
        free_motion(&s, kv, rate, h)
    } else {
        let tau = to_limit.max(0.0);
        let mut mid = free_motion(&s, kv, rate, tau);
        mid.alpha = limit;
        free_motion(&mid, kv, 0.0, h - tau)
    };
    next.alpha = next.alpha.clamp(-amax, amax);
    if next.p.abs() > params.half_length() {
        next.off_beam = true;
    }
    Ok(next)
}

/// One plant step: exact propagation plus a velocity noise kick whose
/// variance scales with `h / noise_period`.
pub fn step(params: &PlantParams, state: &PlantState, u: f64, h: f64, noise: &mut RngStream) -> Result<PlantState, PlantError> {
    let mut next = propagate(params, state, u, h)?;
    if !next.off_beam && params.sigma_proc > 0.0 {
        next.v += params.sigma_proc * (h / params.noise_period).sqrt() * noise.standard_normal();
    }
    Ok(next)
}

/// Rounds to the nearest multiple of `step` and saturates to `±range/2`.
pub fn quantize(x: f64, step: Option<f64>, range: f64) -> f64 {
    let half = 0.5 * range;
    let q = match step {
        Some(s) if s > 0.0 => (x / s).round() * s,
        _ => x,
    };
    q.clamp(-half, half)
}

pub fn read_position(params: &PlantParams, state: &PlantState, noise: &mut RngStream) -> f64 {
    let raw = if params.sigma_pos > 0.0 { state.p + params.sigma_pos * noise.standard_normal() } else { state.p };
    quantize(raw, params.position_step(), params.beam_length)
}

pub fn read_angle(params: &PlantParams, state: &PlantState, noise: &mut RngStream) -> f64 {
    let raw = if params.sigma_ang > 0.0 { state.alpha + params.sigma_ang * noise.standard_normal() } else { state.alpha };
    quantize(raw, params.angle_step(), params.angle_range)
}

/// Both sensors sampled against one clock stamp.
pub fn measure(params: &PlantParams, state: &PlantState, stamp: SimTime, noise: &mut RngStream) -> Measurement {
    let pos_reading = read_position(params, state, noise);
    let ang_reading = read_angle(params, state, noise);
    Measurement { pos_reading, ang_reading, stamp }
}

/// DAC clip to the hardware input range.
pub fn apply_actuation(params: &PlantParams, u: f64) -> Result<f64, PlantError> {
    if !u.is_finite() {
        return Err(PlantError::NonFiniteInput(u));
    }
    Ok(u.clamp(-params.u_max_hw, params.u_max_hw))
}

/// The physical plant as seen by the simulator: advanced lazily to event
/// instants, with process noise injected on a fixed virtual-time grid so runs
/// that differ only in event timing still see the same disturbance sequence.
#[derive(Clone, Debug)]
pub struct PlantProcess {
    pub params: PlantParams,
    state: PlantState,
    u: f64,
    t: SimTime,
    next_kick: SimTime,
    kick_period: SimTime,
    off_beam_at: Option<SimTime>,
}

impl PlantProcess {
    pub fn new(params: PlantParams, initial: PlantState) -> Self {
        let kick_period = SimTime::from_secs_f64(params.noise_period).max(SimTime::from_nanos(1));
        PlantProcess { params, state: initial, u: 0.0, t: SimTime::ZERO, next_kick: kick_period, kick_period, off_beam_at: None }
    }

    pub fn state(&self) -> &PlantState {
        &self.state
    }

    pub fn time(&self) -> SimTime {
        self.t
    }

    pub fn input(&self) -> f64 {
        self.u
    }

    pub fn off_beam_at(&self) -> Option<SimTime> {
        self.off_beam_at
    }

    pub fn advance_to(&mut self, t: SimTime, noise: &mut RngStream) -> Result<(), PlantError> {
        while self.t < t {
            let seg_end = t.min(self.next_kick);
            let h = (seg_end - self.t).as_secs_f64();
            self.state = propagate(&self.params, &self.state, self.u, h)?;
            self.t = seg_end;
            if seg_end == self.next_kick {
                if !self.state.off_beam && self.params.sigma_proc > 0.0 {
                    self.state.v += self.params.sigma_proc * noise.standard_normal();
                }
                self.next_kick += self.kick_period;
            }
            if self.state.off_beam && self.off_beam_at.is_none() {
                self.off_beam_at = Some(self.t);
            }
        }
        Ok(())
    }

    /// Latches a new (already clipped) input from `now` on.
    pub fn set_input(&mut self, u: f64) -> Result<(), PlantError> {
        if !u.is_finite() {
            return Err(PlantError::NonFiniteInput(u));
        }
        self.u = u;
        Ok(())
    }

    /// Puts the ball back at rest in the centre with a level beam.
    pub fn respawn(&mut self) {
        self.state = PlantState::default();
        self.u = 0.0;
        self.off_beam_at = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet() -> PlantParams {
        PlantParams::default().noiseless()
    }

    #[test]
    fn level_beam_at_rest_is_a_fixed_point() {
        let p = quiet();
        let s = PlantState::default();
        for h in [1e-3, 0.05, 1.7] {
            assert_eq!(propagate(&p, &s, 0.0, h).unwrap(), s);
        }
    }

    #[test]
    fn tilted_beam_matches_double_integrator() {
        let p = quiet();
        let a0 = 0.05;
        let h = 0.05;
        let s = propagate(&p, &PlantState::at(0.0, 0.0, a0), 0.0, h).unwrap();
        assert!((s.p - 0.5 * p.k_v * a0 * h * h).abs() < 1e-12);
        assert!((s.v - p.k_v * a0 * h).abs() < 1e-12);
        assert_eq!(s.alpha, a0);
    }

    #[test]
    fn zoh_matrices_match_propagation() {
        let p = quiet();
        let (a, b) = p.discrete_model(0.05);
        let s = PlantState::at(0.1, -0.2, 0.03);
        let u = 0.7;
        let want = a * s.vector() + b * u;
        let got = propagate(&p, &s, u, 0.05).unwrap();
        assert!((got.vector() - want).amax() < 1e-14);
    }

    #[test]
    fn halves_compose_even_through_saturation() {
        let p = quiet();
        let s0 = PlantState::at(0.02, 0.01, 0.195);
        let h = 0.2;
        let whole = propagate(&p, &s0, 1.5, h).unwrap();
        let half = propagate(&p, &propagate(&p, &s0, 1.5, h / 2.0).unwrap(), 1.5, h / 2.0).unwrap();
        assert!((whole.vector() - half.vector()).amax() < 1e-12);
        assert_eq!(whole.alpha, p.alpha_max);
    }

    #[test]
    fn off_beam_is_detected_and_sticky() {
        let p = quiet();
        let s = propagate(&p, &PlantState::at(0.56, 0.0, 0.0), 0.0, 0.01).unwrap();
        assert!(s.off_beam);
        let later = propagate(&p, &PlantState { p: 0.0, ..s }, 1.0, 1.0).unwrap();
        assert!(later.off_beam);
        assert_eq!(later.p, 0.0);
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let p = quiet();
        assert!(matches!(propagate(&p, &PlantState::default(), f64::NAN, 0.05), Err(PlantError::NonFiniteInput(_))));
        let bad = PlantState::at(f64::INFINITY, 0.0, 0.0);
        assert!(propagate(&p, &bad, 0.0, 0.05).is_err());
    }

    #[test]
    fn quantization_step_for_ten_bits() {
        let step = PlantParams::default().position_step().unwrap();
        assert!((step - 1.10 / 1024.0).abs() < 1e-15);
        assert!((step * 1e3 - 1.074).abs() < 1e-3);
    }

    #[test]
    fn noiseless_measurement_is_exact() {
        let p = quiet();
        let mut rng = RngStream::new(1, "sensor");
        let s = PlantState::at(0.1234567, 0.0, -0.0314);
        let m = measure(&p, &s, SimTime::from_millis(5), &mut rng);
        assert_eq!(m.pos_reading, s.p);
        assert_eq!(m.ang_reading, s.alpha);
        assert_eq!(m.stamp, SimTime::from_millis(5));
    }

    #[test]
    fn sensor_saturates_off_the_beam() {
        let p = PlantParams::default();
        let mut rng = RngStream::new(1, "sensor");
        let s = PlantState { p: 0.9, v: 0.0, alpha: 0.0, off_beam: true };
        assert_eq!(read_position(&p, &s, &mut rng), 0.55);
        let s = PlantState { p: -3.0, ..s };
        assert_eq!(read_position(&p, &s, &mut rng), -0.55);
    }

    #[test]
    fn actuation_clips_to_hardware_range() {
        let p = PlantParams::default();
        assert_eq!(apply_actuation(&p, 0.3).unwrap(), 0.3);
        assert_eq!(apply_actuation(&p, 2.0 * p.u_max_hw).unwrap(), p.u_max_hw);
        assert!(apply_actuation(&p, f64::NAN).is_err());
    }

    #[test]
    fn process_noise_is_on_a_fixed_grid() {
        let params = PlantParams::default();
        let mut a = PlantProcess::new(params.clone(), PlantState::default());
        let mut b = PlantProcess::new(params, PlantState::default());
        let mut ra = RngStream::new(4, "plant");
        let mut rb = RngStream::new(4, "plant");
        a.advance_to(SimTime::from_secs(2), &mut ra).unwrap();
        for k in 1..=137 {
            b.advance_to(SimTime::from_nanos(k * 2_000_000_000 / 137), &mut rb).unwrap();
        }
        assert!((a.state().vector() - b.state().vector()).amax() < 1e-12);
    }
}
