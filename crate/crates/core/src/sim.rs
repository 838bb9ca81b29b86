//! Differentiable dynamics for the four planar environments.
//!
//! Every step is written in tape operations, so rollouts are differentiable with respect to the
//! initial state, the actions and the system parameters. Integration is semi-implicit Euler
//! (velocity first, then position). Stiff environments split the control step `dt` into
//! fixed sub-steps of the same scheme.

use std::f64::consts::{FRAC_PI_4, LN_10, PI};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Tensor, Var};

/// Control step in seconds.
pub const DT: f64 = 0.02;
/// Longest supported rollout.
pub const MAX_STEPS: usize = 200;
/// Actions are clamped to this magnitude inside the step.
pub const ACTION_LIMIT: f64 = 500.0;
/// A rollout fails once any position exceeds this magnitude.
pub const DIVERGENCE_LIMIT: f64 = 1000.0;
pub const GRAVITY: f64 = 9.81;

/// Quadrotor rotor arm length.
pub const QUAD_ARM: f64 = 0.3;
/// Moment of inertia per unit mass of the quadrotor body.
pub const QUAD_INERTIA_PER_MASS: f64 = QUAD_ARM * QUAD_ARM / 4.0;

pub const BOUNCE_MASS: f64 = 1.0;
pub const BOUNCE_CONTACT_DAMPING: f64 = 200.0;
pub const BOUNCE_SUBSTEPS: usize = 40;

pub const FINGER_LINKS: [f64; 2] = [0.6, 0.5];
pub const FINGER_MASSES: [f64; 2] = [0.1, 0.1];
pub const FINGER_DAMPING: f64 = 0.05;
pub const FINGER_JOINT_LIMIT: f64 = FRAC_PI_4;
/// Period of the sinusoidal finger action, in steps.
pub const FINGER_PERIOD: f64 = 40.0;
pub const FINGER_MAX_BIAS: f64 = 40.0;

pub const ROD_NODES: usize = 12;
pub const ROD_SPACING: f64 = 0.2;
pub const ROD_NODE_MASS: f64 = 0.1;
/// Cross-section area of the rod; spring stiffness is `10^lambda_E * area / rest_length`.
pub const ROD_AREA: f64 = 1.976e-4;
pub const ROD_DAMPING: f64 = 0.2;
pub const ROD_SUBSTEPS: usize = 16;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("rollout diverged at step {step}")]
    Diverged { step: usize },
    #[error("unknown environment `{0}`")]
    UnknownEnv(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvId {
    Quad2d,
    Bounce,
    Finger,
    Rod,
}

impl EnvId {
    pub const ALL: [EnvId; 4] = [EnvId::Quad2d, EnvId::Bounce, EnvId::Finger, EnvId::Rod];

    pub fn name(self) -> &'static str {
        match self {
            EnvId::Quad2d => "quad2d",
            EnvId::Bounce => "bounce",
            EnvId::Finger => "finger",
            EnvId::Rod => "rod",
        }
    }

    pub fn state_dim(self) -> usize {
        match self {
            EnvId::Quad2d => 6,
            EnvId::Bounce => 5,
            EnvId::Finger => 4,
            EnvId::Rod => 2 * ROD_NODES,
        }
    }

    pub fn action_dim(self) -> usize {
        match self {
            EnvId::Quad2d | EnvId::Finger => 2,
            EnvId::Bounce => 0,
            EnvId::Rod => 1,
        }
    }

    pub fn param_dim(self) -> usize {
        match self {
            EnvId::Finger => 2,
            _ => 1,
        }
    }

    pub fn obs_dim(self) -> usize {
        match self {
            EnvId::Quad2d | EnvId::Bounce => 4,
            EnvId::Finger => 2,
            EnvId::Rod => ROD_NODES - 2,
        }
    }

    /// Ground-truth system parameters.
    pub fn true_params(self) -> Vec<f64> {
        match self {
            EnvId::Quad2d => vec![3.0],
            EnvId::Bounce => vec![6.0],
            EnvId::Finger => vec![1.0, 1.0],
            EnvId::Rod => vec![5.0],
        }
    }

    /// Half-open range initial parameter guesses are drawn from.
    pub fn param_range(self) -> (f64, f64) {
        match self {
            EnvId::Quad2d => (2.8, 3.2),
            EnvId::Bounce => (5.5, 6.5),
            EnvId::Finger => (0.0, 1.0),
            EnvId::Rod => (4.0, 7.0),
        }
    }

    /// Internal semi-implicit Euler sub-steps per control step.
    pub fn substeps(self) -> usize {
        match self {
            EnvId::Quad2d | EnvId::Finger => 1,
            EnvId::Bounce => BOUNCE_SUBSTEPS,
            EnvId::Rod => ROD_SUBSTEPS,
        }
    }

    /// Indices of the state vector that hold positions (checked by the divergence guard).
    fn position_indices(self) -> std::ops::Range<usize> {
        match self {
            EnvId::Quad2d => 0..2,
            EnvId::Bounce => 0..2,
            EnvId::Finger => 0..2,
            EnvId::Rod => 0..ROD_NODES,
        }
    }
}

impl fmt::Display for EnvId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnvId {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EnvId::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| SimError::UnknownEnv(s.to_string()))
    }
}

/// Time-indexed rollout: `states.len() == actions.len() + 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub env: EnvId,
    pub dt: f64,
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct StepRecord {
    t: f64,
    state: Vec<f64>,
    action: Option<Vec<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("trajectory has an initial state")
    }

    /// One JSON record per line: `{"t", "state", "action"}`. The last state has no action.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for (i, s) in self.states.iter().enumerate() {
            let rec = StepRecord {
                t: i as f64 * self.dt,
                state: s.clone(),
                action: self.actions.get(i).cloned(),
            };
            out.push_str(&serde_json::to_string(&rec).expect("serializable record"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(env: EnvId, dt: f64, text: &str) -> Result<Self, serde_json::Error> {
        let mut states = Vec::new();
        let mut actions = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let rec: StepRecord = serde_json::from_str(line)?;
            states.push(rec.state);
            if let Some(a) = rec.action {
                actions.push(a);
            }
        }
        Ok(Trajectory {
            env,
            dt,
            states,
            actions,
        })
    }
}

fn pow10<'t>(x: Var<'t>) -> Var<'t> {
    x.mul_scalar(LN_10).exp()
}

/// One control step on the tape. `s`, `a` and `phi` are vectors of the environment's dimensions.
pub fn step_var<'t>(env: EnvId, s: Var<'t>, a: Var<'t>, phi: Var<'t>, dt: f64) -> Var<'t> {
    assert_eq!(s.len(), env.state_dim(), "{env}: state has wrong dimension");
    assert_eq!(a.len(), env.action_dim(), "{env}: action has wrong dimension");
    assert_eq!(phi.len(), env.param_dim(), "{env}: parameters have wrong dimension");
    match env {
        EnvId::Quad2d => quad_step(s, a, phi, dt),
        EnvId::Bounce => bounce_step(s, phi, dt),
        EnvId::Finger => finger_step(s, a, phi, dt),
        EnvId::Rod => rod_step(s, a, phi, dt),
    }
}

fn quad_step<'t>(s: Var<'t>, a: Var<'t>, phi: Var<'t>, dt: f64) -> Var<'t> {
    let u = a.clamp(-ACTION_LIMIT, ACTION_LIMIT);
    let (u1, u2) = (u.at(0), u.at(1));
    let mass = phi.at(0);
    let inertia = mass.mul_scalar(QUAD_INERTIA_PER_MASS);
    let (x, y, th, vx, vy, om) = (s.at(0), s.at(1), s.at(2), s.at(3), s.at(4), s.at(5));
    let thrust = u1 + u2;
    let torque = (u2 - u1).mul_scalar(QUAD_ARM);
    let vx = vx + (-(thrust * th.sin()) / mass).mul_scalar(dt);
    let vy = vy + (thrust * th.cos() / mass - GRAVITY).mul_scalar(dt);
    let om = om + (torque / inertia).mul_scalar(dt);
    let x = x + vx.mul_scalar(dt);
    let y = y + vy.mul_scalar(dt);
    let th = th + om.mul_scalar(dt);
    Var::concat(&[x, y, th, vx, vy, om])
}

fn bounce_step<'t>(s: Var<'t>, phi: Var<'t>, dt: f64) -> Var<'t> {
    let n = BOUNCE_SUBSTEPS;
    let h = dt / n as f64;
    let stiffness = pow10(phi.at(0));
    let (x, mut y, mut vy, mut th, om) = (s.at(0), s.at(1), s.at(2), s.at(3), s.at(4));
    for _ in 0..n {
        let penetration = y.neg().clamp(0.0, f64::INFINITY);
        let mut force = stiffness * penetration;
        if y.item() < 0.0 {
            force = force - vy.mul_scalar(BOUNCE_CONTACT_DAMPING);
        }
        vy = vy + (force.mul_scalar(1.0 / BOUNCE_MASS) - GRAVITY).mul_scalar(h);
        y = y + vy.mul_scalar(h);
        th = th + om.mul_scalar(h);
    }
    Var::concat(&[x, y, vy, th, om])
}

fn finger_step<'t>(s: Var<'t>, a: Var<'t>, phi: Var<'t>, dt: f64) -> Var<'t> {
    let u = a.clamp(-ACTION_LIMIT, ACTION_LIMIT);
    let [l1, l2] = FINGER_LINKS;
    let [m1, m2] = FINGER_MASSES;
    let (t1, t2, w1, w2) = (s.at(0), s.at(1), s.at(2), s.at(3));
    let c2 = t2.cos();
    let s2 = t2.sin();
    let m11 = c2
        .mul_scalar(2.0 * m2 * l1 * l2)
        .add_scalar((m1 + m2) * l1 * l1 + m2 * l2 * l2);
    let m12 = c2.mul_scalar(m2 * l1 * l2).add_scalar(m2 * l2 * l2);
    let m22 = m2 * l2 * l2;
    // Coriolis and centrifugal terms.
    let h = m2 * l1 * l2;
    let cor1 = -(s2 * (w1 * w2).mul_scalar(2.0) + s2 * w2 * w2).mul_scalar(h);
    let cor2 = (s2 * w1 * w1).mul_scalar(h);
    let tau1 = u.at(0) - phi.at(0) * t1 - w1.mul_scalar(FINGER_DAMPING) - cor1;
    let tau2 = u.at(1) - phi.at(1) * t2 - w2.mul_scalar(FINGER_DAMPING) - cor2;
    let det = m11.mul_scalar(m22) - m12 * m12;
    let acc1 = (tau1.mul_scalar(m22) - m12 * tau2) / det;
    let acc2 = (m11 * tau2 - m12 * tau1) / det;
    let w1 = w1 + acc1.mul_scalar(dt);
    let w2 = w2 + acc2.mul_scalar(dt);
    let t1 = (t1 + w1.mul_scalar(dt)).clamp(-FINGER_JOINT_LIMIT, FINGER_JOINT_LIMIT);
    let t2 = (t2 + w2.mul_scalar(dt)).clamp(-FINGER_JOINT_LIMIT, FINGER_JOINT_LIMIT);
    Var::concat(&[t1, t2, w1, w2])
}

/// Horizontal rest positions of the rod nodes.
pub fn rod_node_x() -> Vec<f64> {
    let half = ROD_SPACING * (ROD_NODES - 1) as f64 / 2.0;
    (0..ROD_NODES).map(|i| -half + ROD_SPACING * i as f64).collect()
}

/// Spring stiffness of one rod segment for log-modulus `lambda`.
pub fn rod_stiffness(lambda: f64) -> f64 {
    10f64.powf(lambda) * ROD_AREA / ROD_SPACING
}

/// Graph Laplacian of the rod chain with the pinned rows zeroed.
fn rod_laplacian() -> Tensor {
    let n = ROD_NODES;
    let mut m = vec![0.0; n * n];
    for i in 1..n - 1 {
        m[i * n + i - 1] = 1.0;
        m[i * n + i] = -2.0;
        m[i * n + i + 1] = 1.0;
    }
    Tensor::new([n, n], m)
}

fn rod_interior_mask() -> Tensor {
    let mut m = vec![1.0; ROD_NODES];
    m[0] = 0.0;
    m[ROD_NODES - 1] = 0.0;
    Tensor::vector(m)
}

fn rod_step<'t>(s: Var<'t>, a: Var<'t>, phi: Var<'t>, dt: f64) -> Var<'t> {
    let tape = s.tape();
    let n = ROD_NODES;
    let sub = ROD_SUBSTEPS;
    let h = dt / sub as f64;
    let lap = tape.constant(rod_laplacian());
    let mask = tape.constant(rod_interior_mask());
    let k = pow10(phi.at(0)).mul_scalar(ROD_AREA / ROD_SPACING);
    let f = a.clamp(-ACTION_LIMIT, ACTION_LIMIT).at(0).mul_scalar(0.5);
    // Center force split over the two middle nodes.
    let force_ext = Var::concat(&[f, f]).pad(n / 2 - 1, n);
    let gravity = tape.constant(Tensor::vector(
        rod_interior_mask()
            .data()
            .iter()
            .map(|m| -m * ROD_NODE_MASS * GRAVITY)
            .collect(),
    ));
    let ext = force_ext * mask + gravity;
    let mut y = s.slice(0, n);
    let mut v = s.slice(n, n);
    for _ in 0..sub {
        let spring = lap.matmul(y.reshape(&[n, 1])).reshape(&[n]).scale_by(k);
        let force = spring + ext - v.mul_scalar(ROD_DAMPING) * mask;
        v = v + force.mul_scalar(h / ROD_NODE_MASS);
        y = y + v.mul_scalar(h);
    }
    Var::concat(&[y, v])
}

fn check_finite(env: EnvId, s: &Tensor, step: usize) -> Result<(), SimError> {
    let bad = !s.is_finite() || env.position_indices().any(|i| s.data()[i].abs() > DIVERGENCE_LIMIT);
    if bad {
        Err(SimError::Diverged { step })
    } else {
        Ok(())
    }
}

/// One step on raw values.
pub fn step(env: EnvId, s: &[f64], a: &[f64], phi: &[f64], dt: f64) -> Result<Vec<f64>, SimError> {
    let tape = Tape::new();
    let next = step_var(
        env,
        tape.constant(Tensor::vector(s.to_vec())),
        tape.constant(Tensor::vector(a.to_vec())),
        tape.constant(Tensor::vector(phi.to_vec())),
        dt,
    )
    .value();
    check_finite(env, &next, 1)?;
    Ok(next.data().to_vec())
}

/// Rollout on the tape. Fails, without producing NaNs downstream, once any step diverges.
pub fn rollout_var<'t>(
    env: EnvId,
    s0: Var<'t>,
    actions: &[Var<'t>],
    phi: Var<'t>,
    dt: f64,
) -> Result<Vec<Var<'t>>, SimError> {
    assert!(actions.len() <= MAX_STEPS, "rollout longer than {MAX_STEPS} steps");
    let mut states = Vec::with_capacity(actions.len() + 1);
    states.push(s0);
    let mut s = s0;
    for (i, &a) in actions.iter().enumerate() {
        s = step_var(env, s, a, phi, dt);
        check_finite(env, &s.value(), i + 1)?;
        states.push(s);
    }
    Ok(states)
}

/// Rollout on raw values.
pub fn rollout(env: EnvId, s0: &[f64], actions: &[Vec<f64>], phi: &[f64]) -> Result<Trajectory, SimError> {
    assert!(actions.len() <= MAX_STEPS, "rollout longer than {MAX_STEPS} steps");
    let mut states = vec![s0.to_vec()];
    for a in actions {
        let next =
            step(env, states.last().unwrap(), a, phi, DT).map_err(|_| SimError::Diverged { step: states.len() })?;
        states.push(next);
    }
    Ok(Trajectory {
        env,
        dt: DT,
        states,
        actions: actions.to_vec(),
    })
}

/// Observable encoding of a state (what the predictor is trained to output).
pub fn observe_var<'t>(env: EnvId, s: Var<'t>) -> Var<'t> {
    match env {
        EnvId::Quad2d => {
            let th = s.at(2);
            Var::concat(&[s.at(0), s.at(1), th.sin(), th.cos()])
        }
        EnvId::Bounce => {
            let th = s.at(3);
            Var::concat(&[s.at(0), s.at(1), th.sin(), th.cos()])
        }
        EnvId::Finger => s.slice(0, 2),
        EnvId::Rod => s.slice(1, ROD_NODES - 2),
    }
}

pub fn observe(env: EnvId, s: &[f64]) -> Vec<f64> {
    assert_eq!(s.len(), env.state_dim(), "{env}: state has wrong dimension");
    match env {
        EnvId::Quad2d => vec![s[0], s[1], s[2].sin(), s[2].cos()],
        EnvId::Bounce => vec![s[0], s[1], s[3].sin(), s[3].cos()],
        EnvId::Finger => s[..2].to_vec(),
        EnvId::Rod => s[1..ROD_NODES - 1].to_vec(),
    }
}

/// Angle of a possibly unnormalized `(sin, cos)` pair.
pub fn decode_angle(sin: f64, cos: f64) -> f64 {
    if sin == 0.0 && cos == 0.0 {
        log::warn!("degenerate (sin, cos) = (0, 0); decoding angle as 0");
        return 0.0;
    }
    sin.atan2(cos)
}

/// Pose recovered from an observable: `(x, y, theta)` for rigid bodies, joint angles for the
/// finger, node heights for the rod.
pub fn decode(env: EnvId, o: &[f64]) -> Vec<f64> {
    assert_eq!(o.len(), env.obs_dim(), "{env}: observable has wrong dimension");
    match env {
        EnvId::Quad2d | EnvId::Bounce => vec![o[0], o[1], decode_angle(o[2], o[3])],
        EnvId::Finger | EnvId::Rod => o.to_vec(),
    }
}

/// Sinusoidal finger action `u_j = m_j sin(2 pi clamp((t - delta_j) / T, 0, 1))` on the tape.
pub fn finger_action_var<'t>(magnitude: Var<'t>, bias: Var<'t>, t: usize) -> Var<'t> {
    let phase = (bias.neg().add_scalar(t as f64))
        .mul_scalar(1.0 / FINGER_PERIOD)
        .clamp(0.0, 1.0)
        .mul_scalar(2.0 * PI);
    magnitude * phase.sin()
}

/// Finger action for step `t`; out-of-range magnitudes and biases are clamped.
pub fn finger_action(magnitude: &[f64], bias: &[f64], t: usize) -> Vec<f64> {
    assert_eq!(magnitude.len(), bias.len(), "one magnitude and one bias per joint");
    let clamp_warn = |v: f64, lo: f64, hi: f64, what: &str| {
        if v < lo || v > hi {
            log::warn!("finger action {what} {v} outside [{lo}, {hi}]; clamping");
        }
        v.clamp(lo, hi)
    };
    let m: Vec<f64> = magnitude
        .iter()
        .map(|&m| clamp_warn(m, 0.0, 1.0, "magnitude"))
        .collect();
    let d: Vec<f64> = bias
        .iter()
        .map(|&d| clamp_warn(d, 0.0, FINGER_MAX_BIAS, "bias"))
        .collect();
    let tape = Tape::new();
    finger_action_var(tape.constant(Tensor::vector(m)), tape.constant(Tensor::vector(d)), t)
        .value()
        .data()
        .to_vec()
}

/// Mechanical energy of the finger (kinetic plus joint springs).
pub fn finger_energy(s: &[f64], stiffness: &[f64]) -> f64 {
    let [l1, l2] = FINGER_LINKS;
    let [m1, m2] = FINGER_MASSES;
    let c2 = s[1].cos();
    let m11 = (m1 + m2) * l1 * l1 + m2 * l2 * l2 + 2.0 * m2 * l1 * l2 * c2;
    let m12 = m2 * l2 * l2 + m2 * l1 * l2 * c2;
    let m22 = m2 * l2 * l2;
    let (w1, w2) = (s[2], s[3]);
    0.5 * (m11 * w1 * w1 + 2.0 * m12 * w1 * w2 + m22 * w2 * w2)
        + 0.5 * (stiffness[0] * s[0] * s[0] + stiffness[1] * s[1] * s[1])
}

/// Mechanical energy of the rod (kinetic, springs and gravity).
pub fn rod_energy(s: &[f64], lambda: f64) -> f64 {
    let n = ROD_NODES;
    let k = rod_stiffness(lambda);
    let (y, v) = s.split_at(n);
    let kinetic: f64 = v.iter().map(|v| 0.5 * ROD_NODE_MASS * v * v).sum();
    let spring: f64 = y.windows(2).map(|w| 0.5 * k * (w[1] - w[0]).powi(2)).sum();
    let gravity: f64 = y.iter().map(|y| ROD_NODE_MASS * GRAVITY * y).sum();
    kinetic + spring + gravity
}

/// Static equilibrium heights of the rod under gravity, from the tridiagonal force balance.
pub fn rod_equilibrium(lambda: f64) -> Vec<f64> {
    let n = ROD_NODES - 2;
    let k = rod_stiffness(lambda);
    // k (y_{i-1} - 2 y_i + y_{i+1}) = m g on interior nodes.
    let mut diag = vec![-2.0 * k; n];
    let off = k;
    let mut rhs = vec![ROD_NODE_MASS * GRAVITY; n];
    for i in 1..n {
        let w = off / diag[i - 1];
        diag[i] -= w * off;
        rhs[i] -= w * rhs[i - 1];
    }
    let mut y = vec![0.0; n];
    y[n - 1] = rhs[n - 1] / diag[n - 1];
    for i in (0..n - 1).rev() {
        y[i] = (rhs[i] - off * y[i + 1]) / diag[i];
    }
    let mut full = vec![0.0; ROD_NODES];
    full[1..ROD_NODES - 1].copy_from_slice(&y);
    full
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_grad, rel_err};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_state(env: EnvId, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match env {
            EnvId::Quad2d => (0..6).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            EnvId::Bounce => {
                // Either clearly in contact or clearly airborne, never near the kink.
                let y = if rng.gen_bool(0.5) {
                    rng.gen_range(-0.02..-0.002)
                } else {
                    rng.gen_range(0.3..1.0)
                };
                vec![
                    rng.gen_range(-0.5..0.5),
                    y,
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-2.0..2.0),
                ]
            }
            EnvId::Finger => vec![
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
            ],
            EnvId::Rod => {
                let mut s: Vec<f64> = (0..2 * ROD_NODES).map(|_| rng.gen_range(-0.2..0.2)).collect();
                for i in [0, ROD_NODES - 1, ROD_NODES, 2 * ROD_NODES - 1] {
                    s[i] = 0.0;
                }
                s
            }
        }
    }

    fn random_action(env: EnvId, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match env {
            EnvId::Quad2d => vec![rng.gen_range(10.0..20.0), rng.gen_range(10.0..20.0)],
            EnvId::Bounce => vec![],
            EnvId::Finger => vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
            EnvId::Rod => vec![rng.gen_range(-2.0..2.0)],
        }
    }

    fn random_params(env: EnvId, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let (lo, hi) = env.param_range();
        (0..env.param_dim()).map(|_| rng.gen_range(lo..hi).max(0.2)).collect()
    }

    /// `<w, step(s, a, phi)>` with one argument perturbed.
    fn probe(env: EnvId, s: &[f64], a: &[f64], phi: &[f64], w: &Tensor) -> f64 {
        let next = step(env, s, a, phi, DT).unwrap();
        Tensor::vector(next).dot(w)
    }

    #[test]
    fn step_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for env in EnvId::ALL {
            for _ in 0..10 {
                let s = random_state(env, &mut rng);
                let a = random_action(env, &mut rng);
                let phi = random_params(env, &mut rng);
                let w = Tensor::vector((0..env.state_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect());
                let tape = Tape::new();
                let sv = tape.leaf(Tensor::vector(s.clone()));
                let av = tape.leaf(Tensor::vector(a.clone()));
                let pv = tape.leaf(Tensor::vector(phi.clone()));
                let out = step_var(env, sv, av, pv, DT).dot(tape.constant(w.clone()));
                let grads = tape.backward(out, &[sv, av, pv]);
                let fd_s = finite_diff_grad(|t| probe(env, t.data(), &a, &phi, &w), &Tensor::vector(s.clone()), 1e-6);
                let fd_a = finite_diff_grad(|t| probe(env, &s, t.data(), &phi, &w), &Tensor::vector(a.clone()), 1e-6);
                let fd_p = finite_diff_grad(|t| probe(env, &s, &a, t.data(), &w), &Tensor::vector(phi.clone()), 1e-6);
                for (name, g, fd) in [
                    ("state", &grads[0], fd_s),
                    ("action", &grads[1], fd_a),
                    ("params", &grads[2], fd_p),
                ] {
                    for (x, y) in g.data().iter().zip(fd.data()) {
                        let e = rel_err(*x, *y, 1e-2);
                        assert!(e < 1e-5, "{env} {name}: {x} vs {y} (rel {e:e})");
                    }
                }
            }
        }
    }

    #[test]
    fn quad_hover_is_a_fixed_point() {
        let m = 3.0;
        let s = vec![0.1, -0.2, 0.0, 0.0, 0.0, 0.0];
        let a = vec![m * GRAVITY / 2.0; 2];
        let next = step(EnvId::Quad2d, &s, &a, &[m], DT).unwrap();
        for (x, y) in s.iter().zip(&next) {
            assert!((x - y).abs() < 1e-12);
        }
        let traj = rollout(EnvId::Quad2d, &s, &vec![a; 100], &[m]).unwrap();
        for (x, y) in s.iter().zip(traj.final_state()) {
            assert!((x - y).abs() < 1e-8);
        }
    }

    #[test]
    fn bounce_free_flight_changes_velocity_by_gravity() {
        let s = vec![0.0, 5.0, 0.3, 0.0, 0.0];
        let next = step(EnvId::Bounce, &s, &[], &[6.0], DT).unwrap();
        assert!((next[2] - (0.3 - GRAVITY * DT)).abs() < 1e-12);
    }

    #[test]
    fn rod_equilibrium_is_a_fixed_point() {
        for lambda in [4.5, 5.0, 6.0] {
            let mut s = rod_equilibrium(lambda);
            s.extend(vec![0.0; ROD_NODES]);
            let next = step(EnvId::Rod, &s, &[0.0], &[lambda], DT).unwrap();
            for (x, y) in s.iter().zip(&next) {
                assert!((x - y).abs() < 1e-9, "{x} vs {y}");
            }
        }
        // Sag is visible at the true modulus.
        let eq = rod_equilibrium(5.0);
        assert!(eq[ROD_NODES / 2] < -0.1 && eq[ROD_NODES / 2] > -0.2);
    }

    #[test]
    fn zero_gravity_zero_action_rollouts_are_constant() {
        // The quadrotor under exact hover thrust and the rod at equilibrium stay put.
        let eq = {
            let mut s = rod_equilibrium(5.0);
            s.extend(vec![0.0; ROD_NODES]);
            s
        };
        let traj = rollout(EnvId::Rod, &eq, &vec![vec![0.0]; 50], &[5.0]).unwrap();
        for s in &traj.states {
            for (x, y) in s.iter().zip(&eq) {
                assert!((x - y).abs() < 1e-9);
            }
        }
        let fs = vec![0.0; 4];
        let traj = rollout(EnvId::Finger, &fs, &vec![vec![0.0, 0.0]; 50], &[1.0, 1.0]).unwrap();
        assert!(traj.states.iter().all(|s| s == &fs));
    }

    #[test]
    fn bounce_rollout_gradient_matches_finite_differences() {
        let s0 = vec![0.0, 0.6, 0.0, 0.0, 1.0];
        let final_height = |lambda: f64| {
            let traj = rollout(EnvId::Bounce, &s0, &vec![vec![]; 50], &[lambda]).unwrap();
            traj.final_state()[1]
        };
        let tape = Tape::new();
        let sv = tape.constant(Tensor::vector(s0.clone()));
        let pv = tape.leaf(Tensor::vector(vec![6.0]));
        let actions: Vec<_> = (0..50).map(|_| tape.constant(Tensor::vector(vec![]))).collect();
        let states = rollout_var(EnvId::Bounce, sv, &actions, pv, DT).unwrap();
        let g = tape.backward(states[50].at(1), &[pv]).pop().unwrap().item();
        let h = 1e-5;
        let fd = (final_height(6.0 + h) - final_height(6.0 - h)) / (2.0 * h);
        assert!(g.abs() > 1e-6, "contact must influence the final height");
        assert!(rel_err(g, fd, 1e-8) < 1e-4, "{g} vs {fd}");
    }

    #[test]
    fn divergence_is_reported_not_nan() {
        let s = vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let err = rollout(EnvId::Quad2d, &s, &vec![vec![500.0, 500.0]; 200], &[0.01]).unwrap_err();
        assert!(matches!(err, SimError::Diverged { .. }));
    }

    #[test]
    fn observe_and_decode() {
        let th = PI / 3.0;
        let o = observe(EnvId::Quad2d, &[0.5, -0.25, th, 0.0, 0.0, 0.0]);
        assert!((o[2] - 3f64.sqrt() / 2.0).abs() < 1e-15 && (o[3] - 0.5).abs() < 1e-15);
        let pose = decode(EnvId::Quad2d, &o);
        assert!((pose[2] - th).abs() < 1e-15);
        assert_eq!(decode_angle(0.6 * 2.0, 0.8 * 2.0), 0.6f64.atan2(0.8));
        assert_eq!(decode_angle(0.0, 0.0), 0.0);
        let rod: Vec<f64> = (0..2 * ROD_NODES).map(|i| i as f64).collect();
        assert_eq!(observe(EnvId::Rod, &rod), (1..11).map(|i| i as f64).collect::<Vec<_>>());
        assert_eq!(observe(EnvId::Rod, &rod).len(), 10);
    }

    #[test]
    fn finger_action_formula() {
        assert_eq!(finger_action(&[0.7], &[12.0], 5), vec![0.0]);
        assert!(finger_action(&[0.7], &[3.0], 45)[0].abs() < 1e-12);
        assert!((finger_action(&[1.0], &[0.0], 10)[0] - 1.0).abs() < 1e-15);
        // Clamped out-of-range magnitude.
        assert!((finger_action(&[3.0], &[0.0], 10)[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn finger_action_is_differentiable_in_parameters() {
        let tape = Tape::new();
        let m = tape.leaf(Tensor::vector(vec![0.6]));
        let d = tape.leaf(Tensor::vector(vec![4.0]));
        let u = finger_action_var(m, d, 13).sum();
        let g = tape.backward(u, &[m, d]);
        let phase = 2.0 * PI * (13.0 - 4.0) / FINGER_PERIOD;
        assert!((g[0].item() - phase.sin()).abs() < 1e-12);
        assert!((g[1].item() + 0.6 * phase.cos() * 2.0 * PI / FINGER_PERIOD).abs() < 1e-12);
    }

    #[test]
    fn damped_unactuated_energy_decays() {
        let mut s = vec![0.6, -0.5, 0.0, 0.0];
        let k = [1.0, 1.0];
        let e0 = finger_energy(&s, &k);
        let mut prev = e0;
        let mut worst = 0.0f64;
        for _ in 0..200 {
            s = step(EnvId::Finger, &s, &[0.0, 0.0], &k, DT).unwrap();
            let e = finger_energy(&s, &k);
            worst = worst.max(e - prev);
            prev = e;
        }
        assert!(prev < 0.5 * e0, "finger energy {e0} -> {prev}");
        assert!(worst <= 1e-3 * e0, "finger energy rose by {worst}");

        let lambda = 5.0;
        let mut r = rod_equilibrium(lambda);
        for (i, y) in r.iter_mut().enumerate().take(ROD_NODES - 1).skip(1) {
            *y += 0.1 * (PI * i as f64 / (ROD_NODES - 1) as f64).sin();
        }
        r.extend(vec![0.0; ROD_NODES]);
        let e0 = rod_energy(&r, lambda);
        let mut prev = e0;
        let mut worst = 0.0f64;
        for _ in 0..200 {
            r = step(EnvId::Rod, &r, &[0.0], &[lambda], DT).unwrap();
            let e = rod_energy(&r, lambda);
            worst = worst.max(e - prev);
            prev = e;
        }
        let floor = rod_energy(
            &{
                let mut eq = rod_equilibrium(lambda);
                eq.extend(vec![0.0; ROD_NODES]);
                eq
            },
            lambda,
        );
        assert!(prev - floor < 0.5 * (e0 - floor));
        assert!(worst <= 1e-3 * (e0 - floor).abs(), "rod energy rose by {worst}");
    }

    #[test]
    fn trajectory_jsonl_round_trip() {
        let traj = rollout(
            EnvId::Finger,
            &[0.1, 0.0, 0.0, 0.0],
            &vec![vec![0.2, -0.1]; 3],
            &[1.0, 1.0],
        )
        .unwrap();
        let text = traj.to_jsonl();
        assert_eq!(text.lines().count(), 4);
        assert_eq!(Trajectory::from_jsonl(EnvId::Finger, DT, &text).unwrap(), traj);
    }

    #[test]
    fn env_ids_parse() {
        for env in EnvId::ALL {
            assert_eq!(env.name().parse::<EnvId>().unwrap(), env);
        }
        assert!("cube".parse::<EnvId>().is_err());
    }
}
