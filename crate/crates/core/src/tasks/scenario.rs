//! Reference motions for the downstream tasks and the bookkeeping around a single fit run.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::fit::{fit, Evidence, FitConfig, FitError, FitProblem, FitStatus, Method, Unknown};
use super::train::ErrorStats;
use crate::net::Network;
use crate::render::{render_state, PsiRange, RenderParams};
use crate::sim::{self, EnvId, Trajectory, GRAVITY, ROD_NODES};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Sysid,
    Imitation,
    Control,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Sysid => "sysid",
            Task::Imitation => "imitation",
            Task::Control => "control",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which frames of the reference video a fit compares against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// Every `k`-th frame after the initial one.
    Stride(usize),
    /// The initial and the final frame.
    Endpoints,
    /// The initial and the middle frame.
    FirstMiddle,
}

impl Sampling {
    pub fn frames(self, steps: usize) -> Vec<usize> {
        let mut frames = match self {
            Sampling::Stride(k) => (1..=steps).filter(|t| t % k.max(1) == 0).collect(),
            Sampling::Endpoints => vec![0, steps],
            Sampling::FirstMiddle => vec![0, steps / 2],
        };
        // Very short rollouts collapse the middle frame onto frame 0.
        frames.dedup();
        frames
    }
}

impl fmt::Display for Sampling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Sampling::Stride(k) => write!(f, "stride{k}"),
            Sampling::Endpoints => f.write_str("endpoints"),
            Sampling::FirstMiddle => f.write_str("first-middle"),
        }
    }
}

impl FromStr for Sampling {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "endpoints" => Ok(Sampling::Endpoints),
            "first-middle" => Ok(Sampling::FirstMiddle),
            _ => s
                .strip_prefix("stride")
                .and_then(|k| k.parse::<usize>().ok())
                .filter(|&k| k > 0)
                .map(Sampling::Stride)
                .ok_or_else(|| format!("unknown frame sampling `{s}` (stride<k>, endpoints, first-middle)")),
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{env} has no {task} scenario")]
pub struct NoScenario {
    pub env: EnvId,
    pub task: Task,
}

/// A ground-truth motion, the inverse problem posed on it and the reference rendering.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub task: Task,
    pub seed: u64,
    pub problem: FitProblem,
    /// Decision vector that reproduces the reference.
    pub truth: Vec<f64>,
    pub reference: Trajectory,
    /// Rendering of the reference video, drawn from the target range.
    pub psi_ref: RenderParams,
    /// Draw from the sampling distribution; the starting point of every optimizing method.
    pub random_z: Vec<f64>,
    /// Mean of the sampling distribution.
    pub average_z: Vec<f64>,
}

const ROD_FORCE_SCALE: f64 = 5.0;
const QUAD_ACTION_SCALE: f64 = 2.0;

fn quad_hover() -> f64 {
    EnvId::Quad2d.true_params()[0] * GRAVITY / 2.0
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

impl Scenario {
    pub fn new(task: Task, env: EnvId, seed: u64) -> Result<Self, NoScenario> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ce7_a410);
        let psi_ref = PsiRange::target().sample(&mut rng);
        let phi = env.true_params();
        let (problem, truth, random_z, average_z) = match (task, env) {
            (Task::Sysid, _) => {
                let (lo, hi) = env.param_range();
                let d = env.param_dim();
                let (s0, steps, actions): (Vec<f64>, usize, Vec<Vec<f64>>) = match env {
                    EnvId::Quad2d => (vec![0.0; 6], 30, vec![vec![17.2, 16.8]; 30]),
                    EnvId::Bounce => (vec![0.0, 0.5, 0.0, 0.0, 3.0], 40, vec![vec![]; 40]),
                    EnvId::Finger => (vec![0.6, -0.5, 0.0, 0.0], 50, vec![vec![0.0, 0.0]; 50]),
                    EnvId::Rod => (vec![0.0; 2 * ROD_NODES], 40, vec![vec![0.0]; 40]),
                };
                let problem = FitProblem {
                    env,
                    s0,
                    steps,
                    unknown: Unknown::Params,
                    phi: phi.clone(),
                    actions,
                    offset: vec![lo; d],
                    scale: vec![hi - lo; d],
                };
                let truth = problem.decision(&phi);
                (problem, truth, uniform(&mut rng, d, 0.0, 1.0), vec![0.5; d])
            }
            (_, EnvId::Bounce) => return Err(NoScenario { env, task }),
            (_, EnvId::Finger) => {
                let steps = 80;
                let problem = FitProblem {
                    env,
                    s0: vec![0.0; 4],
                    steps,
                    unknown: Unknown::FingerWave,
                    phi: phi.clone(),
                    actions: Vec::new(),
                    offset: vec![0.0; 4],
                    scale: vec![1.0, 1.0, sim::FINGER_MAX_BIAS, sim::FINGER_MAX_BIAS],
                };
                let truth = vec![
                    rng.gen_range(0.4..1.0),
                    rng.gen_range(0.4..1.0),
                    rng.gen_range(0.0..0.5),
                    rng.gen_range(0.0..0.5),
                ];
                (problem, truth, uniform(&mut rng, 4, 0.0, 1.0), vec![0.5; 4])
            }
            (_, EnvId::Quad2d) => {
                let steps = 30;
                let hover = quad_hover();
                let problem = FitProblem {
                    env,
                    s0: vec![0.0; 6],
                    steps,
                    unknown: Unknown::Actions,
                    phi: phi.clone(),
                    actions: Vec::new(),
                    offset: vec![hover; 2 * steps],
                    scale: vec![QUAD_ACTION_SCALE; 2 * steps],
                };
                let amp = uniform(&mut rng, 2, 0.2, 0.5);
                let phase = uniform(&mut rng, 2, 0.0, 2.0 * PI);
                let lift = rng.gen_range(0.1..0.4);
                let truth: Vec<f64> = (0..steps)
                    .flat_map(|t| {
                        let w = 2.0 * PI * t as f64 / steps as f64;
                        [
                            lift + amp[0] * (w + phase[0]).sin(),
                            lift + amp[1] * (w + phase[1]).sin(),
                        ]
                    })
                    .collect();
                (
                    problem,
                    truth,
                    uniform(&mut rng, 2 * steps, -0.5, 0.5),
                    vec![0.0; 2 * steps],
                )
            }
            (_, EnvId::Rod) => {
                let steps = 40;
                let s0 = match task {
                    Task::Control => {
                        let mut s = sim::rod_equilibrium(phi[0]);
                        s.resize(2 * ROD_NODES, 0.0);
                        s
                    }
                    _ => vec![0.0; 2 * ROD_NODES],
                };
                let problem = FitProblem {
                    env,
                    s0,
                    steps,
                    unknown: Unknown::Actions,
                    phi: phi.clone(),
                    actions: Vec::new(),
                    offset: vec![0.0; steps],
                    scale: vec![ROD_FORCE_SCALE; steps],
                };
                let truth: Vec<f64> = match task {
                    Task::Control => vec![rng.gen_range(0.4..1.0); steps],
                    _ => {
                        let amp = rng.gen_range(0.4..1.0);
                        let phase = rng.gen_range(0.0..2.0 * PI);
                        (0..steps)
                            .map(|t| amp * (2.0 * PI * t as f64 / steps as f64 + phase).sin())
                            .collect()
                    }
                };
                (problem, truth, uniform(&mut rng, steps, -1.0, 1.0), vec![0.0; steps])
            }
        };
        let reference = problem.rollout(&truth).expect("reference motion stays finite");
        Ok(Self {
            task,
            seed,
            problem,
            truth,
            reference,
            psi_ref,
            random_z,
            average_z,
        })
    }

    pub fn env(&self) -> EnvId {
        self.problem.env
    }

    /// Frames compared by the fit: the final frame for control, `sampling` otherwise.
    pub fn frames(&self, sampling: Sampling) -> Vec<usize> {
        match self.task {
            Task::Control => vec![self.problem.steps],
            _ => sampling.frames(self.problem.steps),
        }
    }

    /// Reference video rendered under the target-domain configuration.
    pub fn video(&self, frames: &[usize]) -> Evidence {
        Evidence::Video {
            frames: frames.to_vec(),
            images: frames
                .iter()
                .map(|&t| render_state(self.env(), &self.reference.states[t], &self.psi_ref))
                .collect(),
        }
    }

    /// Ground-truth states at the given frames (oracle only).
    pub fn states(&self, frames: &[usize]) -> Evidence {
        Evidence::States {
            frames: frames.to_vec(),
            states: frames.iter().map(|&t| self.reference.states[t].clone()).collect(),
        }
    }

    pub fn evidence_for(&self, method: Method, frames: &[usize]) -> Evidence {
        if method == Method::Oracle {
            self.states(frames)
        } else {
            self.video(frames)
        }
    }

    /// Task error of a decision vector: parameter error for system identification, mean per-frame
    /// L1 observable discrepancy for imitation, final-frame L1 observable distance for control.
    /// `None` when the induced rollout diverges.
    pub fn metric(&self, z: &[f64]) -> Option<ErrorStats> {
        let env = self.env();
        if self.task == Task::Sysid {
            let est = self.problem.values(z);
            let err: f64 = est
                .iter()
                .zip(self.problem.values(&self.truth))
                .map(|(a, b)| (a - b).abs())
                .sum();
            return Some(ErrorStats {
                mean: err,
                std: 0.0,
                n: 1,
            });
        }
        let traj = self.problem.rollout(z).ok()?;
        let dist = |t: usize| {
            sim::observe(env, &traj.states[t])
                .iter()
                .zip(sim::observe(env, &self.reference.states[t]))
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
        };
        Some(match self.task {
            Task::Control => ErrorStats {
                mean: dist(self.problem.steps),
                std: 0.0,
                n: 1,
            },
            _ => ErrorStats::of(&(1..=self.problem.steps).map(dist).collect::<Vec<_>>()),
        })
    }

    /// Solves the scenario with one method. Average and random return their guess unoptimized.
    pub fn run(
        &self,
        method: Method,
        net: Option<&Network>,
        sampling: Sampling,
        cfg: &FitConfig,
    ) -> Result<RunRecord, FitError> {
        let start = std::time::Instant::now();
        let (z, status, iterations, trace) = match method {
            Method::Average => (self.average_z.clone(), FitStatus::Completed, 0, Vec::new()),
            Method::Random => (self.random_z.clone(), FitStatus::Completed, 0, Vec::new()),
            _ => {
                let frames = self.frames(sampling);
                let out = fit(
                    &self.problem,
                    &self.evidence_for(method, &frames),
                    method,
                    net,
                    &self.random_z,
                    cfg,
                )?;
                (out.z, out.status, out.iterations, out.trace)
            }
        };
        let stats = match status {
            FitStatus::Completed => self.metric(&z),
            FitStatus::Failed { .. } => None,
        };
        let status = match (status, stats) {
            (FitStatus::Completed, None) => FitStatus::Failed {
                iteration: iterations,
                reason: "final rollout diverged".into(),
            },
            (s, _) => s,
        };
        Ok(RunRecord {
            env: self.env(),
            task: self.task,
            method,
            seed: self.seed,
            metric: stats.map_or(f64::NAN, |s| s.mean),
            metric_std: stats.map_or(f64::NAN, |s| s.std),
            iterations,
            status,
            estimate: self.problem.values(&z),
            trace,
            wall_seconds: start.elapsed().as_secs_f64(),
        })
    }
}

/// Result of one (task, env, method, seed) run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub env: EnvId,
    pub task: Task,
    pub method: Method,
    pub seed: u64,
    /// Task error (NaN on failure).
    pub metric: f64,
    pub metric_std: f64,
    pub iterations: usize,
    pub status: FitStatus,
    /// Physical values of the final decision vector.
    pub estimate: Vec<f64>,
    pub trace: Vec<f64>,
    /// Not part of any CSV, so reruns stay byte-identical.
    pub wall_seconds: f64,
}

pub const RESULTS_HEADER: &str = "env,task,method,seed,metric_mean,metric_std,iterations,status";

impl RunRecord {
    pub fn failed(&self) -> bool {
        matches!(self.status, FitStatus::Failed { .. })
    }

    pub fn csv_row(&self) -> String {
        let status = match &self.status {
            FitStatus::Completed => "completed".to_string(),
            FitStatus::Failed { iteration, .. } => format!("failed@{iteration}"),
        };
        format!(
            "{},{},{},{},{:e},{:e},{},{}",
            self.env, self.task, self.method, self.seed, self.metric, self.metric_std, self.iterations, status
        )
    }
}
