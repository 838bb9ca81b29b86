//! Gradient-based fitting of unknown system parameters or actions to a reference motion.
//!
//! The rollout is recorded once per iteration on a simulator tape. Each compared frame gets its
//! own small tape (render, predictor, loss) whose state gradient is fed back into the simulator
//! tape as a seed, so memory stays proportional to one frame plus the rollout.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::optim::RmsProp;
use crate::autodiff::{Tape, Tensor, Var};
use crate::losses::{pixelwise_frame, FeatureExtractor};
use crate::net::Network;
use crate::render::{geometry_var, render_var, Camera, Image, PsiRange, RenderParams, PSI_DIM};
use crate::sim::{self, finger_action_var, rollout_var, EnvId, SimError, DT};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Predictor trained with the rendering-gradient regularizer.
    Ours,
    /// Same predictor architecture trained without it.
    OursNoGrad,
    Pixelwise,
    Perceptual,
    /// Midpoint of the sampling distribution, no optimization.
    Average,
    /// A draw from the sampling distribution, no optimization.
    Random,
    /// Optimizes directly against ground-truth states.
    Oracle,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Ours,
        Method::OursNoGrad,
        Method::Pixelwise,
        Method::Perceptual,
        Method::Average,
        Method::Random,
        Method::Oracle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ours => "ours",
            Method::OursNoGrad => "ours_no_grad",
            Method::Pixelwise => "pixelwise",
            Method::Perceptual => "perceptual",
            Method::Average => "average",
            Method::Random => "random",
            Method::Oracle => "oracle",
        }
    }

    pub fn uses_network(self) -> bool {
        matches!(self, Method::Ours | Method::OursNoGrad)
    }

    pub fn optimizes(self) -> bool {
        !matches!(self, Method::Average | Method::Random)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown method `{s}`"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub lr: f64,
    pub momentum: f64,
    pub iterations: usize,
    /// Step halvings allowed after a diverged rollout before the fit is reported as failed.
    pub max_retries: usize,
    /// Also optimize the rendering parameters (pixelwise and perceptual methods only).
    pub optimize_psi: bool,
    /// Rendering parameters used for the fitted rollout; the source-range midpoint when unset.
    pub psi: Option<RenderParams>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            momentum: 0.5,
            iterations: 100,
            max_retries: 5,
            optimize_psi: false,
            psi: None,
        }
    }
}

/// What a fit is allowed to see of the reference motion. Frame indices count simulator steps
/// (`0` is the initial state).
#[derive(Clone, Debug, PartialEq)]
pub enum Evidence {
    Video {
        frames: Vec<usize>,
        images: Vec<Image>,
    },
    /// Ground-truth states; only the oracle accepts these.
    States {
        frames: Vec<usize>,
        states: Vec<Vec<f64>>,
    },
}

impl Evidence {
    pub fn frames(&self) -> &[usize] {
        match self {
            Evidence::Video { frames, .. } | Evidence::States { frames, .. } => frames,
        }
    }
}

/// Which quantities the decision vector encodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Unknown {
    /// System parameters, with the actions known.
    Params,
    /// One raw action vector per step, with the parameters known.
    Actions,
    /// Finger magnitudes and biases `(m1, m2, d1, d2)`, with the parameters known.
    FingerWave,
}

/// An inverse problem: decision `z` maps to physical values `offset + scale * z`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitProblem {
    pub env: EnvId,
    pub s0: Vec<f64>,
    pub steps: usize,
    pub unknown: Unknown,
    /// Known parameters (ignored when they are the unknown).
    pub phi: Vec<f64>,
    /// Known actions (ignored when they are the unknown).
    pub actions: Vec<Vec<f64>>,
    pub offset: Vec<f64>,
    pub scale: Vec<f64>,
}

impl FitProblem {
    pub fn decision_dim(&self) -> usize {
        self.offset.len()
    }

    fn check(&self) -> Result<(), FitError> {
        let env = self.env;
        let want = match self.unknown {
            Unknown::Params => env.param_dim(),
            Unknown::Actions => self.steps * env.action_dim(),
            Unknown::FingerWave => 4,
        };
        let bad = |what: String| Err(FitError::Problem(what));
        if self.offset.len() != want || self.scale.len() != want {
            return bad(format!("decision has {} entries, expected {want}", self.offset.len()));
        }
        if self.s0.len() != env.state_dim() {
            return bad("initial state has the wrong dimension".into());
        }
        if self.steps == 0 || self.steps > sim::MAX_STEPS {
            return bad(format!("rollout length {} outside 1..={}", self.steps, sim::MAX_STEPS));
        }
        if self.unknown == Unknown::FingerWave && env != EnvId::Finger {
            return bad("the wave parametrization only applies to the finger".into());
        }
        if self.unknown != Unknown::Params && self.phi.len() != env.param_dim() {
            return bad("known parameters have the wrong dimension".into());
        }
        if self.unknown == Unknown::Params
            && (self.actions.len() != self.steps || self.actions.iter().any(|a| a.len() != env.action_dim()))
        {
            return bad("known actions do not match the rollout length".into());
        }
        if self.unknown == Unknown::Actions && env.action_dim() == 0 {
            return bad(format!("{env} has no actions to fit"));
        }
        Ok(())
    }

    /// Physical values for a decision vector.
    pub fn values(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.offset.iter().zip(&self.scale))
            .map(|(z, (o, s))| o + s * z)
            .collect()
    }

    /// Decision vector for physical values.
    pub fn decision(&self, values: &[f64]) -> Vec<f64> {
        values
            .iter()
            .zip(self.offset.iter().zip(&self.scale))
            .map(|(v, (o, s))| (v - o) / s)
            .collect()
    }

    fn apply<'t>(&self, tape: &'t Tape, z: Var<'t>) -> (Var<'t>, Vec<Var<'t>>) {
        let v =
            z * tape.constant(Tensor::vector(self.scale.clone())) + tape.constant(Tensor::vector(self.offset.clone()));
        let adim = self.env.action_dim();
        match self.unknown {
            Unknown::Params => {
                let actions = self
                    .actions
                    .iter()
                    .map(|a| tape.constant(Tensor::vector(a.clone())))
                    .collect();
                (v, actions)
            }
            Unknown::Actions => {
                let phi = tape.constant(Tensor::vector(self.phi.clone()));
                (phi, (0..self.steps).map(|t| v.slice(t * adim, adim)).collect())
            }
            Unknown::FingerWave => {
                let phi = tape.constant(Tensor::vector(self.phi.clone()));
                let m = v.slice(0, 2).clamp(0.0, 1.0);
                let d = v.slice(2, 2).clamp(0.0, sim::FINGER_MAX_BIAS);
                (phi, (0..self.steps).map(|t| finger_action_var(m, d, t)).collect())
            }
        }
    }

    /// Parameters and per-step actions for a decision vector.
    pub fn decode(&self, z: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let tape = Tape::new();
        let (phi, actions) = self.apply(&tape, tape.constant(Tensor::vector(z.to_vec())));
        (
            phi.value().data().to_vec(),
            actions.iter().map(|a| a.value().data().to_vec()).collect(),
        )
    }

    /// Rollout induced by a decision vector.
    pub fn rollout(&self, z: &[f64]) -> Result<sim::Trajectory, SimError> {
        let (phi, actions) = self.decode(z);
        sim::rollout(self.env, &self.s0, &actions, &phi)
    }
}

#[derive(Debug, Error)]
pub enum FitError {
    #[error("invalid problem: {0}")]
    Problem(String),
    #[error("method {0} needs a trained predictor")]
    MissingNetwork(Method),
    #[error("method {method} cannot use {evidence} evidence")]
    Evidence { method: Method, evidence: &'static str },
    #[error("method {0} does not optimize")]
    NotOptimizing(Method),
    #[error("predictor outputs {found} values, {env} observables have {expected}")]
    NetworkShape { env: EnvId, expected: usize, found: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum FitStatus {
    Completed,
    /// Rollouts kept diverging after the allowed number of step halvings.
    Failed {
        iteration: usize,
        reason: String,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitOutcome {
    pub status: FitStatus,
    /// Final decision vector (the last accepted iterate).
    pub z: Vec<f64>,
    pub psi: RenderParams,
    /// Objective at the initial point and after every accepted step.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub retries: usize,
}

impl FitOutcome {
    pub fn failed(&self) -> bool {
        matches!(self.status, FitStatus::Failed { .. })
    }
}

enum Reference {
    Predictions(Vec<Vec<f64>>),
    Images(Vec<Image>),
    Observables(Vec<Vec<f64>>),
}

/// Frame-segmented objective: mean over compared frames of a per-frame loss.
pub struct Objective<'a> {
    problem: &'a FitProblem,
    method: Method,
    net: Option<&'a Network>,
    extractor: Option<FeatureExtractor>,
    frames: Vec<usize>,
    reference: Reference,
    camera: Camera,
    psi: RenderParams,
    optimize_psi: bool,
}

impl<'a> Objective<'a> {
    pub fn new(
        problem: &'a FitProblem,
        evidence: &Evidence,
        method: Method,
        net: Option<&'a Network>,
        cfg: &FitConfig,
    ) -> Result<Self, FitError> {
        problem.check()?;
        let env = problem.env;
        let frames = evidence.frames().to_vec();
        if frames.is_empty() || frames.iter().any(|&t| t > problem.steps) {
            return Err(FitError::Problem("evidence frames must lie in 0..=steps".into()));
        }
        let reference = match (method, evidence) {
            (Method::Average | Method::Random, _) => return Err(FitError::NotOptimizing(method)),
            (Method::Oracle, Evidence::States { states, .. }) => {
                Reference::Observables(states.iter().map(|s| sim::observe(env, s)).collect())
            }
            (Method::Oracle, Evidence::Video { .. }) => {
                return Err(FitError::Evidence {
                    method,
                    evidence: "image",
                })
            }
            (_, Evidence::States { .. }) => {
                return Err(FitError::Evidence {
                    method,
                    evidence: "state",
                })
            }
            (Method::Ours | Method::OursNoGrad, Evidence::Video { images, .. }) => {
                let net = net.ok_or(FitError::MissingNetwork(method))?;
                if net.config.outputs != env.obs_dim() {
                    return Err(FitError::NetworkShape {
                        env,
                        expected: env.obs_dim(),
                        found: net.config.outputs,
                    });
                }
                Reference::Predictions(images.iter().map(|i| net.predict(i)).collect())
            }
            (_, Evidence::Video { images, .. }) => Reference::Images(images.clone()),
        };
        let count = match &reference {
            Reference::Predictions(v) | Reference::Observables(v) => v.len(),
            Reference::Images(v) => v.len(),
        };
        if count != frames.len() {
            return Err(FitError::Problem("evidence has one entry per frame".into()));
        }
        Ok(Self {
            problem,
            method,
            net,
            extractor: (method == Method::Perceptual).then(FeatureExtractor::new),
            frames,
            reference,
            camera: Camera::for_env(env),
            psi: cfg.psi.unwrap_or_else(RenderParams::nominal),
            optimize_psi: cfg.optimize_psi && matches!(method, Method::Pixelwise | Method::Perceptual),
        })
    }

    /// Length of the optimized vector: the decision plus, optionally, normalized psi.
    pub fn dim(&self) -> usize {
        self.problem.decision_dim() + if self.optimize_psi { PSI_DIM } else { 0 }
    }

    /// Starting point for a decision vector (psi starts at the configured value).
    pub fn start(&self, z0: &[f64]) -> Vec<f64> {
        let mut x = z0.to_vec();
        if self.optimize_psi {
            let r = PsiRange::source();
            x.extend(
                self.psi
                    .to_vec()
                    .iter()
                    .enumerate()
                    .map(|(j, p)| (p - r.lo[j]) / (r.hi[j] - r.lo[j])),
            );
        }
        x
    }

    fn psi_of(&self, x: &[f64]) -> RenderParams {
        if !self.optimize_psi {
            return self.psi;
        }
        let r = PsiRange::source();
        let zp = &x[self.problem.decision_dim()..];
        RenderParams::from_slice(
            &(0..PSI_DIM)
                .map(|j| r.lo[j] + (r.hi[j] - r.lo[j]) * zp[j])
                .collect::<Vec<_>>(),
        )
    }

    /// Loss at one frame with its gradient w.r.t. the state and psi.
    fn frame(&self, k: usize, s: &Tensor, psi: &RenderParams) -> (f64, Tensor, Tensor) {
        let env = self.problem.env;
        let tape = Tape::new();
        let sv = tape.leaf(s.clone());
        let pv = tape.leaf(psi.to_tensor());
        let image = || render_var(&tape, &self.camera, &geometry_var(env, sv), pv);
        let loss = match (&self.reference, self.method) {
            (Reference::Observables(o), _) => (sim::observe_var(env, sv) - tape.constant(Tensor::vector(o[k].clone())))
                .square()
                .sum(),
            (Reference::Predictions(p), _) => {
                let net = self.net.expect("checked at construction");
                let params = net.on_tape(&tape, false);
                let out = net.forward(&params, image());
                (out - tape.constant(Tensor::vector(p[k].clone()))).square().sum()
            }
            (Reference::Images(imgs), Method::Perceptual) => {
                let ex = self.extractor.as_ref().expect("perceptual extractor");
                ex.frame(image(), tape.constant(imgs[k].clone()))
            }
            (Reference::Images(imgs), _) => pixelwise_frame(image(), tape.constant(imgs[k].clone())),
        };
        let mut g = tape.backward(loss, &[sv, pv]);
        let gp = g.pop().unwrap();
        (loss.item(), g.pop().unwrap(), gp)
    }

    /// Objective value and gradient at `x`.
    pub fn evaluate(&self, x: &[f64]) -> Result<(f64, Vec<f64>), SimError> {
        let p = self.problem;
        let nd = p.decision_dim();
        let tape = Tape::new();
        let z = tape.leaf(Tensor::vector(x[..nd].to_vec()));
        let (phi, actions) = p.apply(&tape, z);
        let states = rollout_var(p.env, tape.constant(Tensor::vector(p.s0.clone())), &actions, phi, DT)?;
        let psi = self.psi_of(x);
        let w = 1.0 / self.frames.len() as f64;
        let mut loss = 0.0;
        let mut grads = Vec::with_capacity(self.frames.len());
        let mut gpsi = vec![0.0; PSI_DIM];
        for (k, &t) in self.frames.iter().enumerate() {
            let (l, gs, gp) = self.frame(k, &states[t].value(), &psi);
            loss += w * l;
            grads.push(gs.scale(w));
            for (a, b) in gpsi.iter_mut().zip(gp.data()) {
                *a += w * b;
            }
        }
        let seeds: Vec<(Var<'_>, &Tensor)> = self.frames.iter().map(|&t| states[t]).zip(grads.iter()).collect();
        let mut g = if nd > 0 {
            tape.vjp(&seeds, &[z]).pop().unwrap().into_data()
        } else {
            Vec::new()
        };
        if self.optimize_psi {
            let r = PsiRange::source();
            g.extend((0..PSI_DIM).map(|j| gpsi[j] * (r.hi[j] - r.lo[j])));
        }
        if !loss.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(SimError::Diverged { step: p.steps });
        }
        Ok((loss, g))
    }

    /// Objective value only.
    pub fn value(&self, x: &[f64]) -> Result<f64, SimError> {
        self.evaluate(x).map(|(l, _)| l)
    }
}

/// Runs RMSProp on the objective from `z0`. A step whose rollout diverges is halved and retried;
/// after `max_retries` consecutive halvings the fit stops with a failure record.
pub fn fit(
    problem: &FitProblem,
    evidence: &Evidence,
    method: Method,
    net: Option<&Network>,
    z0: &[f64],
    cfg: &FitConfig,
) -> Result<FitOutcome, FitError> {
    if z0.len() != problem.decision_dim() {
        return Err(FitError::Problem("initial decision has the wrong length".into()));
    }
    let obj = Objective::new(problem, evidence, method, net, cfg)?;
    let mut x = obj.start(z0);
    let mut outcome = FitOutcome {
        status: FitStatus::Completed,
        z: z0.to_vec(),
        psi: obj.psi_of(&x),
        trace: Vec::new(),
        iterations: 0,
        retries: 0,
    };
    let (mut loss, mut grad) = match obj.evaluate(&x) {
        Ok(v) => v,
        Err(e) => {
            outcome.status = FitStatus::Failed {
                iteration: 0,
                reason: format!("initial rollout failed: {e}"),
            };
            return Ok(outcome);
        }
    };
    outcome.trace.push(loss);
    let mut opt = RmsProp::new(x.len(), cfg.lr, cfg.momentum);
    for it in 0..cfg.iterations {
        let delta = opt.step(&grad);
        let mut h = 1.0;
        let mut accepted = false;
        for _ in 0..=cfg.max_retries {
            let cand: Vec<f64> = x.iter().zip(&delta).map(|(a, d)| a - h * d).collect();
            match obj.evaluate(&cand) {
                Ok((l, g)) => {
                    (x, loss, grad) = (cand, l, g);
                    accepted = true;
                    break;
                }
                Err(e) => {
                    log::warn!("{method} iteration {it}: {e}; halving the step");
                    outcome.retries += 1;
                    h *= 0.5;
                }
            }
        }
        if !accepted {
            outcome.status = FitStatus::Failed {
                iteration: it,
                reason: format!("rollout diverged after {} step halvings", cfg.max_retries),
            };
            break;
        }
        outcome.trace.push(loss);
        outcome.iterations = it + 1;
    }
    outcome.z = x[..problem.decision_dim()].to_vec();
    outcome.psi = obj.psi_of(&x);
    Ok(outcome)
}

/// Objective value at each decision vector, `NaN` where the rollout diverges.
pub fn loss_landscape(
    problem: &FitProblem,
    evidence: &Evidence,
    method: Method,
    net: Option<&Network>,
    points: &[Vec<f64>],
    cfg: &FitConfig,
) -> Result<Vec<f64>, FitError> {
    let obj = Objective::new(problem, evidence, method, net, cfg)?;
    Ok(points
        .iter()
        .map(|z| obj.value(&obj.start(z)).unwrap_or(f64::NAN))
        .collect())
}
