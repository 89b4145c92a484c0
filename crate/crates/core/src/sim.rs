//! Quadrotor rigid-body simulator with a drag-based wind model, a
//! figure-eight reference and a geometric tracking controller.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataio::{Sample, Trajectory};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadState {
    pub p: Vector3<f64>,
    pub v: Vector3<f64>,
    /// Body to world rotation.
    pub r: Matrix3<f64>,
    pub omega: Vector3<f64>,
}

impl QuadState {
    pub fn at_rest(p: Vector3<f64>) -> Self {
        Self {
            p,
            v: Vector3::zeros(),
            r: Matrix3::identity(),
            omega: Vector3::zeros(),
        }
    }

    /// Frobenius norm of `R^T R - I`.
    pub fn orthonormality_error(&self) -> f64 {
        (self.r.transpose() * self.r - Matrix3::identity()).norm()
    }

    fn axpy(&self, h: f64, d: &StateDerivative) -> QuadState {
        QuadState {
            p: self.p + d.p_dot * h,
            v: self.v + d.v_dot * h,
            r: self.r + d.r_dot * h,
            omega: self.omega + d.omega_dot * h,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct QuadParams {
    pub mass: f64,
    /// Row-major inertia matrix.
    pub inertia: [[f64; 3]; 3],
    pub gravity: [f64; 3],
    pub thrust_coefficient: f64,
    pub torque_coefficient: f64,
    pub arm_length: f64,
    pub drag_coefficient: f64,
    pub max_motor_speed: f64,
}

impl Default for QuadParams {
    fn default() -> Self {
        Self {
            mass: 1.0,
            inertia: [[0.01, 0.0, 0.0], [0.0, 0.01, 0.0], [0.0, 0.0, 0.02]],
            gravity: [0.0, 0.0, -9.81],
            thrust_coefficient: 3e-6,
            torque_coefficient: 1e-7,
            arm_length: 0.1,
            drag_coefficient: 0.027,
            max_motor_speed: 2000.0,
        }
    }
}

impl QuadParams {
    pub fn inertia_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|r, c| self.inertia[r][c])
    }

    pub fn gravity_vector(&self) -> Vector3<f64> {
        Vector3::from(self.gravity)
    }

    /// Wrench mixing matrix: `eta = B0 * u` with `u` the squared motor speeds.
    pub fn b0(&self) -> Matrix4<f64> {
        let (kt, kq, l) = (self.thrust_coefficient, self.torque_coefficient, self.arm_length);
        Matrix4::new(
            kt, kt, kt, kt, //
            0.0, -l * kt, 0.0, l * kt, //
            l * kt, 0.0, -l * kt, 0.0, //
            kq, -kq, kq, -kq,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mass > 0.0) {
            return Err(Error::Config(format!("mass must be positive, got {}", self.mass)));
        }
        let j = self.inertia_matrix();
        if (j - j.transpose()).norm() > 1e-12 * j.norm() || j.cholesky().is_none() {
            return Err(Error::Config("inertia must be symmetric positive definite".into()));
        }
        if self.b0().try_inverse().is_none() {
            return Err(Error::Config("B0 is singular; check rotor coefficients".into()));
        }
        if self.drag_coefficient < 0.0 || !(self.max_motor_speed > 0.0) {
            return Err(Error::Config("drag coefficient and max motor speed must be nonnegative/positive".into()));
        }
        Ok(())
    }

    pub fn hover_thrust(&self) -> f64 {
        self.mass * self.gravity_vector().norm()
    }
}

/// Wind velocity `direction * (mean + amplitude * sin(frequency * t))`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct WindCondition {
    pub label: String,
    pub mean: f64,
    #[serde(default)]
    pub amplitude: f64,
    #[serde(default)]
    pub frequency: f64,
    #[serde(default = "default_direction")]
    pub direction: [f64; 3],
}

fn default_direction() -> [f64; 3] {
    [1.0, 0.0, 0.0]
}

impl WindCondition {
    pub fn steady(label: &str, mean: f64) -> Self {
        Self {
            label: label.to_string(),
            mean,
            amplitude: 0.0,
            frequency: 0.0,
            direction: default_direction(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = Vector3::from(self.direction).norm();
        if self.mean < 0.0 || !self.mean.is_finite() {
            return Err(Error::Config(format!("wind {}: mean speed must be >= 0", self.label)));
        }
        if (n - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("wind {}: direction must have unit norm, got {n}", self.label)));
        }
        Ok(())
    }

    pub fn velocity(&self, t: f64) -> Vector3<f64> {
        Vector3::from(self.direction) * (self.mean + self.amplitude * (self.frequency * t).sin())
    }
}

/// Six steady training winds.
pub fn meta_train_winds() -> Vec<WindCondition> {
    [("nowind", 0.0), ("10wind", 1.3), ("20wind", 2.5), ("30wind", 3.7), ("40wind", 4.9), ("50wind", 6.1)]
        .into_iter()
        .map(|(l, s)| WindCondition::steady(l, s))
        .collect()
}

/// Four held-out winds, one of them oscillating at 1 rad/s.
pub fn eval_winds() -> Vec<WindCondition> {
    let mut psin = WindCondition::steady("70psin20", 8.5);
    psin.amplitude = 2.4;
    psin.frequency = 1.0;
    vec![
        WindCondition::steady("35wind", 4.2),
        psin,
        WindCondition::steady("70wind", 8.5),
        WindCondition::steady("100wind", 12.1),
    ]
}

pub fn wind_by_label(label: &str) -> Option<WindCondition> {
    meta_train_winds().into_iter().chain(eval_winds()).find(|w| w.label == label)
}

/// Quadratic relative-airspeed drag `c_d * |w - v| * (w - v)`.
pub fn wind_force(v: &Vector3<f64>, wind: &Vector3<f64>, drag_coefficient: f64) -> Vector3<f64> {
    let rel = wind - v;
    rel * (drag_coefficient * rel.norm())
}

pub fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateDerivative {
    pub p_dot: Vector3<f64>,
    pub v_dot: Vector3<f64>,
    pub r_dot: Matrix3<f64>,
    pub omega_dot: Vector3<f64>,
}

/// Rigid-body equations with wrench `[T, tau_x, tau_y, tau_z]`:
/// `m v' = m g + R [0, 0, T] + f_a`, `J w' = J w x w + tau`, `R' = R S(w)`.
pub fn quad_derivatives(
    state: &QuadState,
    wrench: &Vector4<f64>,
    wind: &Vector3<f64>,
    params: &QuadParams,
) -> StateDerivative {
    let m = params.mass;
    let j = params.inertia_matrix();
    let f_u = Vector3::new(0.0, 0.0, wrench[0]);
    let tau = Vector3::new(wrench[1], wrench[2], wrench[3]);
    let f_a = wind_force(&state.v, wind, params.drag_coefficient);
    let v_dot = params.gravity_vector() + (state.r * f_u + f_a) / m;
    let jw = j * state.omega;
    let omega_dot = j.lu().solve(&(jw.cross(&state.omega) + tau)).unwrap_or_else(Vector3::zeros);
    StateDerivative {
        p_dot: state.v,
        v_dot,
        r_dot: state.r * skew(&state.omega),
        omega_dot,
    }
}

/// Closest rotation in Frobenius norm (polar factor `U V^T`).
pub fn orthonormalize(r: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = r.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut q = u * vt;
    if q.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        q = u * vt;
    }
    q
}

/// Classical RK4 with the wrench held constant over the step, then the
/// rotation is projected back onto SO(3).
pub fn rk4_step(
    state: &QuadState,
    wrench: &Vector4<f64>,
    wind_fn: impl Fn(f64) -> Vector3<f64>,
    t: f64,
    dt: f64,
    params: &QuadParams,
) -> QuadState {
    let f = |s: &QuadState, tt: f64| quad_derivatives(s, wrench, &wind_fn(tt), params);
    let k1 = f(state, t);
    let k2 = f(&state.axpy(dt / 2.0, &k1), t + dt / 2.0);
    let k3 = f(&state.axpy(dt / 2.0, &k2), t + dt / 2.0);
    let k4 = f(&state.axpy(dt, &k3), t + dt);
    let mut next = *state;
    next.p += (k1.p_dot + 2.0 * k2.p_dot + 2.0 * k3.p_dot + k4.p_dot) * (dt / 6.0);
    next.v += (k1.v_dot + 2.0 * k2.v_dot + 2.0 * k3.v_dot + k4.v_dot) * (dt / 6.0);
    next.r += (k1.r_dot + 2.0 * k2.r_dot + 2.0 * k3.r_dot + k4.r_dot) * (dt / 6.0);
    next.omega += (k1.omega_dot + 2.0 * k2.omega_dot + 2.0 * k3.omega_dot + k4.omega_dot) * (dt / 6.0);
    next.r = orthonormalize(&next.r);
    next
}

/// Lissajous figure-eight `[r sin(2 pi t / P), r sin(4 pi t / P) / 2, z]`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FigureEight {
    pub period: f64,
    pub radius: f64,
    pub altitude: f64,
}

impl Default for FigureEight {
    fn default() -> Self {
        Self {
            period: 8.0,
            radius: 2.0,
            altitude: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferencePoint {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub acceleration: Vector3<f64>,
}

impl FigureEight {
    pub fn validate(&self) -> Result<()> {
        if !(self.period > 0.0) {
            return Err(Error::InvalidArgument(format!("figure-eight period must be positive, got {}", self.period)));
        }
        Ok(())
    }

    pub fn position(&self, t: f64) -> Result<Vector3<f64>> {
        Ok(self.sample(t)?.position)
    }

    pub fn sample(&self, t: f64) -> Result<ReferencePoint> {
        self.validate()?;
        let w = 2.0 * PI / self.period;
        let r = self.radius;
        let (s1, c1) = (w * t).sin_cos();
        let (s2, c2) = (2.0 * w * t).sin_cos();
        Ok(ReferencePoint {
            position: Vector3::new(r * s1, r * s2 / 2.0, self.altitude),
            velocity: Vector3::new(r * w * c1, r * w * c2, 0.0),
            acceleration: Vector3::new(-r * w * w * s1, -2.0 * r * w * w * s2, 0.0),
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ControllerGains {
    pub kp: f64,
    pub kv: f64,
    pub kr: [f64; 3],
    pub kw: [f64; 3],
}

impl Default for ControllerGains {
    fn default() -> Self {
        Self {
            kp: 6.0,
            kv: 4.5,
            kr: [4.0, 4.0, 8.0],
            kw: [0.28, 0.28, 0.56],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlOutput {
    /// Realized wrench after motor saturation.
    pub wrench: Vector4<f64>,
    pub motor_speeds: Vector4<f64>,
}

/// Geometric tracking controller on SE(3) with zero yaw reference.
#[derive(Debug, Clone)]
pub struct Controller {
    gains: ControllerGains,
    held_attitude: Matrix3<f64>,
}

impl Controller {
    pub fn new(gains: ControllerGains) -> Self {
        Self {
            gains,
            held_attitude: Matrix3::identity(),
        }
    }

    pub fn compute(&mut self, state: &QuadState, reference: &ReferencePoint, params: &QuadParams) -> ControlOutput {
        let g = &self.gains;
        let m = params.mass;
        let e_p = reference.position - state.p;
        let e_v = reference.velocity - state.v;
        let f_d = m * (-params.gravity_vector() + reference.acceleration + g.kp * e_p + g.kv * e_v);
        let b3 = state.r.column(2).into_owned();
        let thrust = f_d.dot(&b3);

        let rd = match f_d.try_normalize(1e-12) {
            Some(b3d) => {
                let b1c = Vector3::x();
                match b3d.cross(&b1c).try_normalize(1e-9) {
                    Some(b2d) => {
                        let b1d = b2d.cross(&b3d);
                        Matrix3::from_columns(&[b1d, b2d, b3d])
                    }
                    None => self.held_attitude,
                }
            }
            None => self.held_attitude,
        };
        self.held_attitude = rd;

        let e_r = 0.5 * vee(&(rd.transpose() * state.r - state.r.transpose() * rd));
        let e_w = state.omega;
        let tau = -Vector3::from(g.kr).component_mul(&e_r) - Vector3::from(g.kw).component_mul(&e_w);
        let eta = Vector4::new(thrust, tau.x, tau.y, tau.z);
        realize_wrench(&eta, params)
    }
}

/// Clamp squared motor speeds to `[0, n_max^2]` and map back through B0.
pub fn realize_wrench(eta: &Vector4<f64>, params: &QuadParams) -> ControlOutput {
    let b0 = params.b0();
    let u = b0.try_inverse().expect("validated B0") * eta;
    let u_max = params.max_motor_speed * params.max_motor_speed;
    let u = u.map(|x| x.clamp(0.0, u_max));
    ControlOutput {
        wrench: b0 * u,
        motor_speeds: u.map(f64::sqrt),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub dt: f64,
    pub duration: f64,
    pub noise_std_v: f64,
    pub noise_std_omega: f64,
    /// Unlogged closed-loop flight before `t = 0`, so the log starts past the
    /// transient from the level initial attitude.
    pub warmup: f64,
    pub params: QuadParams,
    pub gains: ControllerGains,
    pub reference: FigureEight,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 0.01,
            duration: 25.11,
            noise_std_v: 0.05,
            noise_std_omega: 0.05,
            warmup: 2.0,
            params: QuadParams::default(),
            gains: ControllerGains::default(),
            reference: FigureEight::default(),
        }
    }
}

impl SimConfig {
    pub fn sample_count(&self) -> Result<usize> {
        if !(self.dt > 0.0) || !(self.duration > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "duration ({}) and dt ({}) must be positive",
                self.duration, self.dt
            )));
        }
        self.steps_of(self.duration, "duration")
    }

    pub fn warmup_steps(&self) -> Result<usize> {
        if !(self.warmup >= 0.0 && self.warmup.is_finite()) {
            return Err(Error::InvalidArgument(format!("warmup must be >= 0, got {}", self.warmup)));
        }
        if !(self.dt > 0.0) {
            return Err(Error::InvalidArgument(format!("dt ({}) must be positive", self.dt)));
        }
        self.steps_of(self.warmup, "warmup")
    }

    fn steps_of(&self, span: f64, what: &str) -> Result<usize> {
        let ratio = span / self.dt;
        let n = ratio.round();
        if (ratio - n).abs() > 1e-6 * n.max(1.0) {
            return Err(Error::InvalidArgument(format!(
                "{what} {span} is not an integer multiple of dt {}",
                self.dt
            )));
        }
        Ok(n as usize)
    }

    pub fn validate(&self) -> Result<()> {
        self.sample_count()?;
        self.warmup_steps()?;
        self.params.validate()?;
        self.reference.validate()?;
        if self.noise_std_v < 0.0 || self.noise_std_omega < 0.0 {
            return Err(Error::Config("sensor noise std must be >= 0".into()));
        }
        Ok(())
    }
}

/// Closed-loop figure-eight flight under `wind`, logged at every `dt`.
/// Flight starts at rest attitude on the reference at `-warmup`; logging
/// starts at `t = 0`.
///
/// The logged wrench at sample k is the one held over `[t_k, t_k + dt)`.
/// True `v'` and `w'` are recorded alongside; sensor noise touches the
/// logged `v` and `w` only.
pub fn generate_trajectory(wind: &WindCondition, cfg: &SimConfig, seed: u64) -> Result<Trajectory> {
    cfg.validate()?;
    wind.validate()?;
    let n = cfg.sample_count()?;
    let params = &cfg.params;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise_v = Normal::new(0.0, cfg.noise_std_v).map_err(|e| Error::Config(e.to_string()))?;
    let noise_w = Normal::new(0.0, cfg.noise_std_omega).map_err(|e| Error::Config(e.to_string()))?;

    let warmup = cfg.warmup_steps()?;
    let t0 = -(warmup as f64) * cfg.dt;
    let start = cfg.reference.sample(t0)?;
    let mut state = QuadState::at_rest(start.position);
    state.v = start.velocity;
    let mut controller = Controller::new(cfg.gains.clone());
    for k in 0..warmup {
        let t = t0 + k as f64 * cfg.dt;
        let control = controller.compute(&state, &cfg.reference.sample(t)?, params);
        state = rk4_step(&state, &control.wrench, |tt| wind.velocity(tt), t, cfg.dt, params);
    }
    let mut traj = Trajectory::with_capacity(n);
    let mut v_dot = Vec::with_capacity(n);
    let mut omega_dot = Vec::with_capacity(n);

    for k in 0..n {
        let t = k as f64 * cfg.dt;
        let reference = cfg.reference.sample(t)?;
        let control = controller.compute(&state, &reference, params);
        let d = quad_derivatives(&state, &control.wrench, &wind.velocity(t), params);
        v_dot.push(d.v_dot.into());
        omega_dot.push(d.omega_dot.into());

        let mut v: [f64; 3] = state.v.into();
        let mut w: [f64; 3] = state.omega.into();
        if cfg.noise_std_v > 0.0 {
            v.iter_mut().for_each(|x| *x += noise_v.sample(&mut rng));
        }
        if cfg.noise_std_omega > 0.0 {
            w.iter_mut().for_each(|x| *x += noise_w.sample(&mut rng));
        }
        let r = state.r.transpose();
        let mut r_rows = [0.0; 9];
        r_rows.copy_from_slice(r.as_slice());
        traj.push(Sample {
            t,
            p: state.p.into(),
            v,
            r: r_rows,
            omega: w,
            thrust: control.wrench[0],
            torque: [control.wrench[1], control.wrench[2], control.wrench[3]],
            motor_speeds: control.motor_speeds.into(),
        });

        if k + 1 < n {
            state = rk4_step(&state, &control.wrench, |tt| wind.velocity(tt), t, cfg.dt, params);
            if !state.p.iter().chain(state.v.iter()).all(|x| x.is_finite()) {
                return Err(Error::NonFinite {
                    context: "simulated state",
                    index: k + 1,
                });
            }
        }
    }
    traj.v_dot = Some(v_dot);
    traj.omega_dot = Some(omega_dot);
    Ok(traj)
}
