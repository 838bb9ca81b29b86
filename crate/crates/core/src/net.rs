//! Image-to-observable predictor: strided convolutions and dense layers with parameter-free
//! mean/variance normalization and Swish activations.

use std::io::{self, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Tensor, Var};
use crate::render::{CHANNELS, IMAGE_SIZE};

const NORM_EPS: f64 = 1e-5;
const CHECKPOINT_MAGIC: &[u8; 8] = b"RISPNET\0";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

/// Architecture. Every hidden layer is followed by normalization (if enabled) and Swish; the last
/// dense layer is a plain linear projection to `outputs`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    /// `[C, H, W]` of the input image.
    pub input: [usize; 3],
    pub convs: Vec<ConvSpec>,
    pub hidden: Vec<usize>,
    pub outputs: usize,
    pub normalize: bool,
}

impl NetConfig {
    /// The standard predictor for 32x32 RGB images: conv 3->8->16 (3x3, stride 2), dense 1024->64->outputs.
    pub fn standard(outputs: usize) -> Self {
        let conv = |out_channels| ConvSpec {
            out_channels,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        Self {
            input: [CHANNELS, IMAGE_SIZE, IMAGE_SIZE],
            convs: vec![conv(8), conv(16)],
            hidden: vec![64],
            outputs,
            normalize: true,
        }
    }

    /// Single linear map from the flattened input to the outputs.
    pub fn linear(input: [usize; 3], outputs: usize) -> Self {
        Self {
            input,
            convs: vec![],
            hidden: vec![],
            outputs,
            normalize: false,
        }
    }

    /// Parameter tensor shapes, in storage order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        let [mut c, mut h, mut w] = self.input;
        for cs in &self.convs {
            shapes.push(vec![cs.out_channels, c, cs.kernel, cs.kernel]);
            if !self.normalize {
                shapes.push(vec![cs.out_channels]);
            }
            c = cs.out_channels;
            h = (h + 2 * cs.pad - cs.kernel) / cs.stride + 1;
            w = (w + 2 * cs.pad - cs.kernel) / cs.stride + 1;
        }
        let mut fan_in = c * h * w;
        for &width in self.hidden.iter().chain(std::iter::once(&self.outputs)) {
            shapes.push(vec![width, fan_in]);
            shapes.push(vec![width]);
            fan_in = width;
        }
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|s| s.iter().product::<usize>()).sum()
    }

    pub fn input_len(&self) -> usize {
        self.input.iter().product()
    }
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] io::Error),
    #[error("not a predictor checkpoint")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("invalid checkpoint: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub config: NetConfig,
    pub params: Vec<Tensor>,
}

/// Subtract the mean and divide by the standard deviation of each row of a `[R, N]` matrix.
pub fn normalize_rows<'t>(x: Var<'t>) -> Var<'t> {
    let s = x.shape();
    let n = s[1];
    let mean = x.sum_rows().mul_scalar(1.0 / n as f64);
    let centered = x - mean.broadcast_rows(n);
    let var = centered.square().sum_rows().mul_scalar(1.0 / n as f64);
    let inv_std = var.add_scalar(NORM_EPS).powf(-0.5);
    centered * inv_std.broadcast_rows(n)
}

impl Network {
    /// Fan-in scaled uniform initialization, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn new(config: NetConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = config.param_shapes();
        let mut params = Vec::with_capacity(shapes.len());
        let mut fan_in = 1;
        for shape in shapes {
            if shape.len() > 1 {
                fan_in = shape[1..].iter().product();
            }
            let bound = 1.0 / (fan_in as f64).sqrt();
            let n = shape.iter().product();
            let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
            params.push(Tensor::new(shape, data));
        }
        let net = Self { config, params };
        log::debug!("predictor with {} parameters", net.param_count());
        net
    }

    pub fn zeros(config: NetConfig) -> Self {
        let params = config.param_shapes().into_iter().map(Tensor::zeros).collect();
        Self { config, params }
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.data().iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count(), "flat parameter length mismatch");
        let mut off = 0;
        for p in &mut self.params {
            let n = p.len();
            p.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(Tensor::is_finite)
    }

    /// Parameters as tape leaves (differentiable) or constants.
    pub fn on_tape<'t>(&self, tape: &'t Tape, trainable: bool) -> Vec<Var<'t>> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    tape.leaf(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect()
    }

    /// Forward pass on the tape; `image` has the configured input shape (any layout of that size).
    pub fn forward<'t>(&self, params: &[Var<'t>], image: Var<'t>) -> Var<'t> {
        let cfg = &self.config;
        assert_eq!(
            image.len(),
            cfg.input_len(),
            "image size does not match the predictor input"
        );
        assert_eq!(params.len(), self.params.len(), "parameter list mismatch");
        let mut p = params.iter().copied();
        let mut x = image.reshape(&cfg.input);
        for cs in &cfg.convs {
            let w = p.next().unwrap();
            x = x.conv2d(w, cs.stride, cs.pad);
            let s = x.shape();
            let (c, hw) = (s[0], s[1] * s[2]);
            let mut rows = x.reshape(&[c, hw]);
            if cfg.normalize {
                rows = normalize_rows(rows);
            } else {
                rows = rows + p.next().unwrap().broadcast_rows(hw);
            }
            x = rows.swish().reshape(&s);
        }
        let mut h = x.reshape(&[x.len(), 1]);
        let layers = cfg.hidden.len() + 1;
        for layer in 0..layers {
            let w = p.next().unwrap();
            let b = p.next().unwrap();
            let width = w.shape()[0];
            let z = w.matmul(h).reshape(&[width]) + b;
            if layer + 1 == layers {
                return z;
            }
            let z = if cfg.normalize {
                normalize_rows(z.reshape(&[1, width])).reshape(&[width])
            } else {
                z
            };
            h = z.swish().reshape(&[width, 1]);
        }
        unreachable!("the output layer returns")
    }

    pub fn predict(&self, image: &Tensor) -> Vec<f64> {
        let tape = Tape::new();
        let params = self.on_tape(&tape, false);
        self.forward(&params, tape.constant(image.clone()))
            .value()
            .data()
            .to_vec()
    }

    /// `d predict(image)_i / d image`, as a plain tensor in the image's shape.
    pub fn input_jacobian_row(&self, image: &Tensor, i: usize) -> Tensor {
        assert!(i < self.config.outputs, "output index {i} out of range");
        let tape = Tape::new();
        let params = self.on_tape(&tape, false);
        let x = tape.leaf(image.clone());
        let out = self.forward(&params, x);
        let seed = Tensor::basis([self.config.outputs], i);
        tape.vjp(&[(out, &seed)], &[x])
            .pop()
            .unwrap()
            .reshape(image.shape().to_vec())
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut f = io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), CheckpointError> {
        let config = serde_json::to_vec(&self.config).map_err(|e| CheckpointError::Invalid(e.to_string()))?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(config.len() as u64).to_le_bytes())?;
        w.write_all(&config)?;
        let flat = self.flat();
        w.write_all(&(flat.len() as u64).to_le_bytes())?;
        for v in flat {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let clen = r.u64()? as usize;
        let config: NetConfig =
            serde_json::from_slice(r.take(clen)?).map_err(|e| CheckpointError::Invalid(e.to_string()))?;
        let n = r.u64()? as usize;
        if n != config.param_count() {
            return Err(CheckpointError::Invalid(format!(
                "{n} parameters stored, architecture has {}",
                config.param_count()
            )));
        }
        let raw = r.take(n.checked_mul(8).ok_or(CheckpointError::Truncated)?)?;
        let flat: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut net = Network::zeros(config);
        net.set_flat(&flat);
        Ok(net)
    }
}

pub(crate) struct ByteReader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        if end > self.bytes.len() {
            return Err(CheckpointError::Truncated);
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_architecture_shapes() {
        let cfg = NetConfig::standard(4);
        let shapes = cfg.param_shapes();
        assert_eq!(shapes[0], vec![8, 3, 3, 3]);
        assert_eq!(shapes[1], vec![16, 8, 3, 3]);
        assert_eq!(shapes[2], vec![64, 16 * 8 * 8]);
        assert_eq!(shapes[4], vec![4, 64]);
        assert_eq!(cfg.param_count(), 216 + 1152 + 64 * 1024 + 64 + 4 * 64 + 4);
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = Network::zeros(NetConfig::standard(4));
        let img = Tensor::full([3, 32, 32], 0.3);
        assert_eq!(net.predict(&img), vec![0.0; 4]);
    }

    #[test]
    fn normalization_ignores_constant_shifts() {
        let tape = Tape::new();
        let x = Tensor::new([2, 4], vec![0.1, 0.5, -0.3, 0.9, 2.0, 1.0, 0.0, 4.0]);
        let shifted = x.map(|v| v + 7.5);
        let a = normalize_rows(tape.constant(x)).value();
        let b = normalize_rows(tape.constant(shifted)).value();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let net = Network::new(NetConfig::standard(2), 7);
        let mut buf = Vec::new();
        net.write_to(&mut buf).unwrap();
        let back = Network::from_bytes(&buf).unwrap();
        assert_eq!(back, net);
        assert!(matches!(
            Network::from_bytes(&buf[..buf.len() - 3]),
            Err(CheckpointError::Truncated)
        ));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(Network::from_bytes(&bad), Err(CheckpointError::BadMagic)));
        let mut bad = buf;
        bad[8] = 9;
        assert!(matches!(Network::from_bytes(&bad), Err(CheckpointError::Version(9))));
    }

    #[test]
    fn initialization_is_seeded() {
        let a = Network::new(NetConfig::standard(4), 1);
        let b = Network::new(NetConfig::standard(4), 1);
        let c = Network::new(NetConfig::standard(4), 2);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
