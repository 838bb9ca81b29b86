//! Predictor training, state-estimation evaluation and the constant/random baselines.

use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::optim::{cosine_lr, Adam};
use crate::autodiff::Tensor;
use crate::data::{sample_state, RenderSample};
use crate::losses::{l_error, l_reg, sample_train_grad, RegVariant};
use crate::net::{ByteReader, CheckpointError, NetConfig, Network};
use crate::sim::{self, EnvId};

/// Final regularizer weight per environment.
pub fn default_gamma_max(env: EnvId) -> f64 {
    match env {
        EnvId::Quad2d => 1.0,
        EnvId::Bounce => 20.0,
        EnvId::Finger => 100.0,
        EnvId::Rod => 30.0,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub gamma_max: f64,
    /// Epochs over which gamma ramps linearly from 0 to `gamma_max`.
    pub warmup_epochs: usize,
    /// `None` trains on the error term alone.
    pub reg: Option<RegVariant>,
    pub seed: u64,
    /// Samples on which the regularizer is evaluated for the log when it is not trained.
    pub reg_eval_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch: 16,
            lr: 1e-2,
            weight_decay: 1e-6,
            gamma_max: default_gamma_max(EnvId::Quad2d),
            warmup_epochs: 20,
            reg: Some(RegVariant::Fast),
            seed: 0,
            reg_eval_samples: 16,
        }
    }
}

impl TrainConfig {
    pub fn for_env(env: EnvId) -> Self {
        Self {
            gamma_max: default_gamma_max(env),
            ..Self::default()
        }
    }

    pub fn gamma(&self, epoch: usize) -> f64 {
        if self.reg.is_none() {
            return 0.0;
        }
        if self.warmup_epochs == 0 {
            return self.gamma_max;
        }
        self.gamma_max * (epoch as f64 / self.warmup_epochs as f64).min(1.0)
    }
}

/// One row of the training trace. For unregularized runs `l_reg` is measured on a fixed subset
/// after the epoch and never enters the objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub gamma: f64,
    pub l_error: f64,
    pub l_reg: f64,
    pub l_train: f64,
    /// Mean state error on the evaluation set, when one is given.
    pub eval_error: Option<f64>,
}

pub const EPOCH_LOG_HEADER: &str = "epoch,lr,gamma,l_error,l_reg,l_train,eval_error";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let eval = self.eval_error.map(|e| format!("{e:e}")).unwrap_or_default();
        format!(
            "{},{:e},{:e},{:e},{:e},{:e},{}",
            self.epoch, self.lr, self.gamma, self.l_error, self.l_reg, self.l_train, eval
        )
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss or parameters in epoch {epoch}; training stopped")]
    NonFinite {
        epoch: usize,
        last_good: Box<Network>,
        log: Vec<EpochLog>,
    },
    #[error("training set is empty")]
    EmptyDataset,
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

const STATE_MAGIC: &[u8; 8] = b"RISPTRN\0";
const STATE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct StateHeader {
    config: TrainConfig,
    epoch: usize,
    log: Vec<EpochLog>,
    adam_t: u64,
}

/// Resumable training state: network, optimizer moments, epoch counter and log.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer {
    pub config: TrainConfig,
    pub net: Network,
    opt: Adam,
    pub epoch: usize,
    pub log: Vec<EpochLog>,
}

fn flatten(grads: &[Tensor], out: &mut [f64]) {
    let mut k = 0;
    for g in grads {
        for &v in g.data() {
            out[k] += v;
            k += 1;
        }
    }
    debug_assert_eq!(k, out.len());
}

impl Trainer {
    pub fn new(config: TrainConfig, outputs: usize) -> Self {
        let net = Network::new(NetConfig::standard(outputs), config.seed);
        Self::from_network(config, net)
    }

    pub fn from_network(config: TrainConfig, net: Network) -> Self {
        let opt = Adam::new(net.param_count(), config.weight_decay);
        Self {
            config,
            net,
            opt,
            epoch: 0,
            log: Vec::new(),
        }
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    fn shuffled(&self, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        let seed = self.config.seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ self.epoch as u64;
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        order
    }

    /// Runs one epoch. On a non-finite loss the trainer is rolled back to the start of the epoch.
    pub fn run_epoch(&mut self, train: &[RenderSample], eval: Option<&[RenderSample]>) -> Result<EpochLog, TrainError> {
        if train.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let cfg = &self.config;
        let gamma = cfg.gamma(self.epoch);
        let lr = cosine_lr(cfg.lr, self.epoch, cfg.epochs);
        let reg = cfg.reg.filter(|_| gamma > 0.0);
        let snapshot = (self.net.clone(), self.opt.clone());
        let mut params = self.net.flat();
        let (mut sum_err, mut sum_reg) = (0.0, 0.0);
        let mut failed = false;
        for batch in self.shuffled(train.len()).chunks(cfg.batch.max(1)) {
            let mut grad = vec![0.0; params.len()];
            for &i in batch {
                let (losses, g) = sample_train_grad(&self.net, &train[i].view(), reg, gamma);
                sum_err += losses.l_error;
                sum_reg += losses.l_reg;
                flatten(&g, &mut grad);
            }
            let scale = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            if !sum_err.is_finite() || !sum_reg.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                failed = true;
                break;
            }
            self.opt.step(&mut params, &grad, lr);
            self.net.set_flat(&params);
        }
        if failed || !self.net.is_finite() {
            let epoch = self.epoch;
            (self.net, self.opt) = snapshot;
            log::error!("epoch {epoch}: non-finite training loss, rolled back");
            return Err(TrainError::NonFinite {
                epoch,
                last_good: Box::new(self.net.clone()),
                log: self.log.clone(),
            });
        }
        let n = train.len() as f64;
        let l_err = sum_err / n;
        let l_reg_value = if reg.is_some() {
            sum_reg / n
        } else {
            let k = cfg.reg_eval_samples.min(train.len());
            let variant = cfg.reg.unwrap_or(RegVariant::Fast);
            if k == 0 {
                0.0
            } else {
                train[..k]
                    .iter()
                    .map(|s| l_reg(&self.net, &s.view(), variant))
                    .sum::<f64>()
                    / k as f64
            }
        };
        let entry = EpochLog {
            epoch: self.epoch,
            lr,
            gamma,
            l_error: l_err,
            l_reg: l_reg_value,
            l_train: l_err + gamma * l_reg_value,
            eval_error: eval.map(|e| eval_state_estimation(&mut self.net, e).mean),
        };
        log::info!(
            "epoch {:3} lr {:.2e} gamma {:.3} l_error {:.5} l_reg {:.5} eval {:?}",
            entry.epoch,
            entry.lr,
            entry.gamma,
            entry.l_error,
            entry.l_reg,
            entry.eval_error
        );
        self.log.push(entry);
        self.epoch += 1;
        Ok(entry)
    }

    /// Runs the remaining epochs.
    pub fn run(&mut self, train: &[RenderSample], eval: Option<&[RenderSample]>) -> Result<(), TrainError> {
        while !self.is_done() {
            self.run_epoch(train, eval)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&StateHeader {
            config: self.config.clone(),
            epoch: self.epoch,
            log: self.log.clone(),
            adam_t: self.opt.t,
        })
        .expect("serializable training state");
        let mut net = Vec::new();
        self.net.write_to(&mut net).expect("in-memory write");
        let mut out = Vec::with_capacity(net.len() * 3 + header.len() + 64);
        out.extend_from_slice(STATE_MAGIC);
        out.extend_from_slice(&STATE_VERSION.to_le_bytes());
        for block in [&header, &net] {
            out.extend_from_slice(&(block.len() as u64).to_le_bytes());
            out.extend_from_slice(block);
        }
        for v in self.opt.m.iter().chain(&self.opt.v) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(8)? != STATE_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != STATE_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let hlen = r.u64()? as usize;
        let header: StateHeader =
            serde_json::from_slice(r.take(hlen)?).map_err(|e| CheckpointError::Invalid(e.to_string()))?;
        let nlen = r.u64()? as usize;
        let net = Network::from_bytes(r.take(nlen)?)?;
        let p = net.param_count();
        let raw = r.take(2 * p * 8)?;
        if r.pos != bytes.len() {
            return Err(CheckpointError::Invalid("trailing bytes after training state".into()));
        }
        let floats: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut opt = Adam::new(p, header.config.weight_decay);
        opt.t = header.adam_t;
        opt.m.copy_from_slice(&floats[..p]);
        opt.v.copy_from_slice(&floats[p..]);
        Ok(Self {
            config: header.config,
            net,
            opt,
            epoch: header.epoch,
            log: header.log,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(&self.to_bytes())?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Trains a fresh predictor on `train`, optionally tracking the mean error on `eval` per epoch.
pub fn train_risp(
    train: &[RenderSample],
    config: &TrainConfig,
    eval: Option<&[RenderSample]>,
) -> Result<Trainer, TrainError> {
    let outputs = train.first().ok_or(TrainError::EmptyDataset)?.obs.len();
    let mut trainer = Trainer::new(config.clone(), outputs);
    trainer.run(train, eval)?;
    Ok(trainer)
}

/// Anything that maps an image to an observable estimate.
pub trait Predictor {
    fn estimate(&mut self, image: &Tensor) -> Vec<f64>;
}

impl Predictor for Network {
    fn estimate(&mut self, image: &Tensor) -> Vec<f64> {
        self.predict(image)
    }
}

/// Always predicts the mean observable of its training set.
#[derive(Clone, Debug, PartialEq)]
pub struct AveragePredictor {
    pub mean: Vec<f64>,
}

impl Predictor for AveragePredictor {
    fn estimate(&mut self, _image: &Tensor) -> Vec<f64> {
        self.mean.clone()
    }
}

pub fn baseline_average(train: &[RenderSample]) -> AveragePredictor {
    assert!(!train.is_empty(), "average of an empty training set");
    let d = train[0].obs.len();
    let mut mean = vec![0.0; d];
    for s in train {
        for (m, o) in mean.iter_mut().zip(&s.obs) {
            *m += o;
        }
    }
    mean.iter_mut().for_each(|m| *m /= train.len() as f64);
    AveragePredictor { mean }
}

/// Ignores the image and returns the observable of a state drawn from the training distribution.
#[derive(Clone, Debug)]
pub struct RandomPredictor {
    env: EnvId,
    rng: ChaCha8Rng,
}

impl Predictor for RandomPredictor {
    fn estimate(&mut self, _image: &Tensor) -> Vec<f64> {
        sim::observe(self.env, &sample_state(self.env, &mut self.rng))
    }
}

pub fn baseline_random(env: EnvId, seed: u64) -> RandomPredictor {
    RandomPredictor {
        env,
        rng: ChaCha8Rng::seed_from_u64(seed),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub n: usize,
}

impl ErrorStats {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
                n,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        Self {
            mean,
            std: var.sqrt(),
            n,
        }
    }
}

/// Mean and spread of the L1 observable error over `test`.
pub fn eval_state_estimation(predictor: &mut impl Predictor, test: &[RenderSample]) -> ErrorStats {
    let errors: Vec<f64> = test
        .iter()
        .map(|s| l_error(&predictor.estimate(&s.image), &s.obs))
        .collect();
    ErrorStats::of(&errors)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gamma_ramps_linearly_then_holds() {
        let cfg = TrainConfig {
            gamma_max: 30.0,
            warmup_epochs: 10,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.gamma(0), 0.0);
        assert_eq!(cfg.gamma(5), 15.0);
        assert_eq!(cfg.gamma(10), 30.0);
        assert_eq!(cfg.gamma(99), 30.0);
        let none = TrainConfig { reg: None, ..cfg };
        assert!((0..100).all(|e| none.gamma(e) == 0.0));
    }

    #[test]
    fn error_stats_population_moments() {
        let s = ErrorStats::of(&[1.0, 3.0]);
        assert_eq!((s.mean, s.std, s.n), (2.0, 1.0, 2));
    }

    #[test]
    fn config_round_trips_and_fills_defaults() {
        let cfg: TrainConfig = serde_json::from_str(r#"{"epochs": 3, "reg": null}"#).unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.reg, None);
        assert_eq!(cfg.batch, 16);
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<TrainConfig>(&text).unwrap(), cfg);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epoch": 3}"#).is_err());
    }
}
