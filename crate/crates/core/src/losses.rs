//! Training objectives: the L1 state error, the rendering-gradient regularizers and the image-space
//! losses used by the baselines.
//!
//! `G_ij = <dN_i/dI, dI/dpsi_j>` is assembled from per-output input gradients and the
//! precomputed image sensitivities of a sample, so no renderer call (and no second-order renderer
//! derivative) is ever needed.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::net::Network;

/// Which regularizer a training run adds to the error term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegVariant {
    /// Squared Frobenius norm of the output/psi Jacobian.
    Full,
    /// Norm of the psi-gradient of the error term.
    Fast,
}

impl fmt::Display for RegVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RegVariant::Full => "full",
            RegVariant::Fast => "fast",
        })
    }
}

impl FromStr for RegVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(RegVariant::Full),
            "fast" => Ok(RegVariant::Fast),
            _ => Err(format!("unknown regularizer `{s}` (expected full or fast)")),
        }
    }
}

/// One training example as the losses see it.
#[derive(Clone, Copy, Debug)]
pub struct SampleView<'a> {
    pub image: &'a Tensor,
    pub target: &'a [f64],
    /// `dI/dpsi_j`, one image-shaped tensor per rendering parameter.
    pub jac_psi: &'a [Tensor],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_error: f64,
    pub l_reg: f64,
    pub gamma: f64,
    pub l_train: f64,
}

impl LossBreakdown {
    pub fn new(l_error: f64, l_reg: f64, gamma: f64) -> Self {
        Self {
            l_error,
            l_reg,
            gamma,
            l_train: l_error + gamma * l_reg,
        }
    }
}

/// `sum_i |o_hat_i - o_i|`.
pub fn l_error(o_hat: &[f64], o: &[f64]) -> f64 {
    assert_eq!(o_hat.len(), o.len(), "prediction and target differ in length");
    o_hat.iter().zip(o).map(|(a, b)| (a - b).abs()).sum()
}

pub fn l_error_var<'t>(o_hat: Var<'t>, o: Var<'t>) -> Var<'t> {
    (o_hat - o).abs().sum()
}

/// `G[i][j] = dN_i / dpsi_j` for one sample.
pub fn reg_jacobian(net: &Network, sample: &SampleView<'_>) -> Vec<Vec<f64>> {
    assert!(!sample.jac_psi.is_empty(), "sample carries no psi sensitivities");
    (0..net.config.outputs)
        .map(|i| {
            let g = net.input_jacobian_row(sample.image, i);
            sample.jac_psi.iter().map(|j| g.dot(j)).collect()
        })
        .collect()
}

/// Squared Frobenius norm of [`reg_jacobian`].
pub fn l_reg_full(net: &Network, sample: &SampleView<'_>) -> f64 {
    reg_jacobian(net, sample).iter().flatten().map(|g| g * g).sum()
}

/// Records the forward pass with trainable parameters and a differentiable image input.
struct Recorded<'t> {
    params: Vec<Var<'t>>,
    image: Var<'t>,
    out: Var<'t>,
}

fn record<'t>(tape: &'t Tape, net: &Network, image: &Tensor) -> Recorded<'t> {
    let params = net.on_tape(tape, true);
    let image = tape.leaf(image.clone());
    let out = net.forward(&params, image);
    Recorded { params, image, out }
}

/// Builds the scalar whose parameter gradient equals `d l_reg_full / d theta`, and returns it
/// together with the regularizer value.
///
/// For each output `i`: `g_i = dN_i/dI` through a differentiable backward pass,
/// `G_ij = <g_i, J_j>`, adjoint `v_i = 2 sum_j G_ij J_j` with `G` held constant, and
/// `h = sum_i <g_i, v_i>`. Backpropagating `h` costs one more pass, so the whole gradient takes
/// `|outputs| + 1` backward passes.
fn full_reg_surrogate<'t>(tape: &'t Tape, rec: &Recorded<'t>, jac_psi: &[Tensor], outputs: usize) -> (Var<'t>, f64) {
    assert!(!jac_psi.is_empty(), "sample carries no psi sensitivities");
    let mut value = 0.0;
    let mut h: Option<Var<'t>> = None;
    for i in 0..outputs {
        let seed = tape.constant(Tensor::basis([outputs], i));
        let g = tape.vjp_graph(&[(rec.out, seed)], &[rec.image]).pop().unwrap();
        let gv = g.value();
        let mut adjoint = Tensor::zeros(gv.shape().to_vec());
        for j in jac_psi {
            let gij = gv.dot(j);
            value += gij * gij;
            adjoint.add_assign(&j.scale(2.0 * gij));
        }
        let term = g.dot(tape.constant(adjoint));
        h = Some(h.map_or(term, |acc| acc + term));
    }
    (h.unwrap(), value)
}

/// Gradient of the squared Frobenius regularizer with respect to every parameter tensor.
pub fn grad_l_reg_full(net: &Network, sample: &SampleView<'_>) -> (f64, Vec<Tensor>) {
    let tape = Tape::new();
    let rec = record(&tape, net, sample.image);
    let (h, value) = full_reg_surrogate(&tape, &rec, sample.jac_psi, net.config.outputs);
    (value, tape.backward(h, &rec.params))
}

/// `d = <d l_error / dI, J_j>` as a differentiable vector, built from one differentiable backward.
fn fast_reg_var<'t>(tape: &'t Tape, rec: &Recorded<'t>, target: &[f64], jac_psi: &[Tensor]) -> (Var<'t>, Var<'t>) {
    let err = l_error_var(rec.out, tape.constant(Tensor::vector(target.to_vec())));
    let g = tape.backward_graph(err, &[rec.image]).pop().unwrap();
    let d: Vec<Var<'t>> = jac_psi.iter().map(|j| g.dot(tape.constant(j.clone()))).collect();
    let sq = Var::concat(&d).square().sum();
    // The norm is not differentiable at d = 0; use the zero subgradient there.
    let reg = if sq.item() > 0.0 { sq.sqrt() } else { sq.detach() };
    (err, reg)
}

/// `d_j = <d l_error / dI, J_j>`, the psi-gradient of the error term through the image.
pub fn error_psi_gradient(net: &Network, sample: &SampleView<'_>) -> Vec<f64> {
    let g = {
        let tape = Tape::new();
        let rec = record(&tape, net, sample.image);
        let err = l_error_var(rec.out, tape.constant(Tensor::vector(sample.target.to_vec())));
        tape.backward(err, &[rec.image]).pop().unwrap()
    };
    sample.jac_psi.iter().map(|j| g.dot(j)).collect()
}

pub fn l_reg_fast(net: &Network, sample: &SampleView<'_>) -> f64 {
    let tape = Tape::new();
    let rec = record(&tape, net, sample.image);
    fast_reg_var(&tape, &rec, sample.target, sample.jac_psi).1.item()
}

pub fn grad_l_reg_fast(net: &Network, sample: &SampleView<'_>) -> (f64, Vec<Tensor>) {
    let tape = Tape::new();
    let rec = record(&tape, net, sample.image);
    let (_, reg) = fast_reg_var(&tape, &rec, sample.target, sample.jac_psi);
    (reg.item(), tape.backward(reg, &rec.params))
}

/// Per-sample training loss `l_error + gamma * l_reg` and its parameter gradient.
///
/// With `reg = None` the regularizer is neither evaluated nor differentiated and `l_reg` is 0.
pub fn sample_train_grad(
    net: &Network,
    sample: &SampleView<'_>,
    reg: Option<RegVariant>,
    gamma: f64,
) -> (LossBreakdown, Vec<Tensor>) {
    let tape = Tape::new();
    let rec = record(&tape, net, sample.image);
    let target = tape.constant(Tensor::vector(sample.target.to_vec()));
    match reg {
        None => {
            let err = l_error_var(rec.out, target);
            let g = tape.backward(err, &rec.params);
            (LossBreakdown::new(err.item(), 0.0, 0.0), g)
        }
        Some(RegVariant::Fast) => {
            let (err, r) = fast_reg_var(&tape, &rec, sample.target, sample.jac_psi);
            let total = err + r.mul_scalar(gamma);
            let g = tape.backward(total, &rec.params);
            (LossBreakdown::new(err.item(), r.item(), gamma), g)
        }
        Some(RegVariant::Full) => {
            let err = l_error_var(rec.out, target);
            let (h, value) = full_reg_surrogate(&tape, &rec, sample.jac_psi, net.config.outputs);
            let total = err + h.mul_scalar(gamma);
            let g = tape.backward(total, &rec.params);
            (LossBreakdown::new(err.item(), value, gamma), g)
        }
    }
}

/// Value of the selected regularizer on one sample.
pub fn l_reg(net: &Network, sample: &SampleView<'_>, variant: RegVariant) -> f64 {
    match variant {
        RegVariant::Full => l_reg_full(net, sample),
        RegVariant::Fast => l_reg_fast(net, sample),
    }
}

/// Batch-mean objective.
pub fn l_train(net: &Network, batch: &[SampleView<'_>], gamma: f64, variant: RegVariant) -> LossBreakdown {
    assert!(gamma >= 0.0, "gamma must be non-negative");
    assert!(!batch.is_empty(), "empty batch");
    let n = batch.len() as f64;
    let err: f64 = batch
        .iter()
        .map(|s| l_error(&net.predict(s.image), s.target))
        .sum::<f64>()
        / n;
    let reg: f64 = if gamma == 0.0 {
        0.0
    } else {
        batch.iter().map(|s| l_reg(net, s, variant)).sum::<f64>() / n
    };
    LossBreakdown::new(err, reg, gamma)
}

fn check_pairs(a: usize, b: usize) {
    assert_eq!(a, b, "image sequences differ in length");
    assert!(a > 0, "empty image sequence");
}

/// Mean squared pixel difference, averaged over frames.
pub fn pixelwise_loss(a: &[Tensor], b: &[Tensor]) -> f64 {
    check_pairs(a.len(), b.len());
    let per_frame: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| x.data().iter().zip(y.data()).map(|(u, v)| (u - v).powi(2)).sum::<f64>() / x.len() as f64)
        .sum();
    per_frame / a.len() as f64
}

/// Single-frame pixelwise term on the tape, `mean((a - b)^2)`.
pub fn pixelwise_frame<'t>(a: Var<'t>, b: Var<'t>) -> Var<'t> {
    (a - b).square().mean()
}

/// Frozen random convolutional feature extractor standing in for a pretrained network.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    net: Network,
}

impl FeatureExtractor {
    pub const SEED: u64 = 0x5eed_f00d;

    pub fn new() -> Self {
        use crate::net::{ConvSpec, NetConfig};
        let conv = |out_channels| ConvSpec {
            out_channels,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let config = NetConfig {
            input: [
                crate::render::CHANNELS,
                crate::render::IMAGE_SIZE,
                crate::render::IMAGE_SIZE,
            ],
            convs: vec![conv(8), conv(16)],
            hidden: vec![],
            outputs: 1,
            normalize: false,
        };
        Self {
            net: Network::new(config, Self::SEED),
        }
    }

    /// Feature map after the convolution stack, flattened.
    pub fn features<'t>(&self, image: Var<'t>) -> Var<'t> {
        let tape = image.tape();
        let cfg = &self.net.config;
        let mut x = image.reshape(&cfg.input);
        let mut p = self.net.params.iter();
        for cs in &cfg.convs {
            let w = tape.constant(p.next().unwrap().clone());
            let b = tape.constant(p.next().unwrap().clone());
            x = x.conv2d(w, cs.stride, cs.pad);
            let s = x.shape();
            let hw = s[1] * s[2];
            x = (x.reshape(&[s[0], hw]) + b.broadcast_rows(hw)).tanh().reshape(&s);
        }
        x.reshape(&[x.len()])
    }

    /// Single-frame perceptual term, `mean((phi(a) - phi(b))^2)`.
    pub fn frame<'t>(&self, a: Var<'t>, b: Var<'t>) -> Var<'t> {
        (self.features(a) - self.features(b)).square().mean()
    }
}

impl Default for FeatureExtractor {
    fn default() -> Self {
        Self::new()
    }
}

/// Mean squared feature distance, averaged over frames.
pub fn perceptual_loss(extractor: &FeatureExtractor, a: &[Tensor], b: &[Tensor]) -> f64 {
    check_pairs(a.len(), b.len());
    let total: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| {
            let tape = Tape::new();
            extractor
                .frame(tape.constant(x.clone()), tape.constant(y.clone()))
                .item()
        })
        .sum();
    total / a.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn l1_error_examples() {
        assert_eq!(l_error(&[0.5, -1.0], &[0.5, -1.0]), 0.0);
        assert!((l_error(&[1.1, 1.8], &[1.0, 2.0]) - 0.3).abs() < 1e-12);
        let a = [0.3, -2.0, 4.5, 0.0];
        let b = [-0.1, 1.0, 4.0, 2.0];
        let mut brute = 0.0;
        for i in 0..4 {
            brute += if a[i] > b[i] { a[i] - b[i] } else { b[i] - a[i] };
        }
        assert_eq!(l_error(&a, &b), brute);
    }

    #[test]
    fn breakdown_identity() {
        let b = LossBreakdown::new(0.7, 0.2, 3.0);
        assert!((b.l_train - (b.l_error + b.gamma * b.l_reg)).abs() < 1e-12);
    }

    #[test]
    fn pixelwise_single_pixel() {
        let a = vec![Tensor::zeros([3, 32, 32]); 4];
        let mut b = a.clone();
        b[2].data_mut()[17] = 0.5;
        let expected = 0.25 / (32.0 * 32.0 * 3.0 * 4.0);
        assert!((pixelwise_loss(&a, &b) - expected).abs() < 1e-18);
        assert_eq!(pixelwise_loss(&a, &a), 0.0);
    }

    #[test]
    fn perceptual_is_zero_on_identical_and_symmetric() {
        let fx = FeatureExtractor::new();
        let a = vec![Tensor::full([3, 32, 32], 0.2)];
        let mut b = a.clone();
        b[0].data_mut()[100] = 0.9;
        assert_eq!(perceptual_loss(&fx, &a, &a), 0.0);
        let ab = perceptual_loss(&fx, &a, &b);
        assert!(ab > 0.0);
        assert_eq!(ab, perceptual_loss(&fx, &b, &a));
    }

    #[test]
    fn reg_variant_parses() {
        assert_eq!("full".parse::<RegVariant>().unwrap(), RegVariant::Full);
        assert_eq!("fast".parse::<RegVariant>().unwrap(), RegVariant::Fast);
        assert!("none".parse::<RegVariant>().is_err());
    }
}
