//! The two-stage x4 super-resolution generator.
//!
//! Each stage bilinearly upsamples its input by 2 and applies a stack of
//! convolutions. The first convolution sees the upsampled input concatenated
//! with a noise map; every later convolution sees the previous activation
//! concatenated with a skip image (the x2-upsampled input in the lower stage,
//! the x4-upsampled original input in the upper stage). Hidden layers are
//! conv -> batch norm -> rectifier; the last layer is conv -> sigmoid.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{relu, relu_backward, sigmoid, sigmoid_backward, BatchNorm, BnCache, Conv2d, ConvGrad};
use crate::resample::{upsample_bilinear, upsample_bilinear_backward};
use crate::scalar::Scalar;
use crate::seeds::SeedTree;
use crate::tensor::{Image01, Tensor};

pub const IMAGE_CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubNetworkConfig {
    pub n_conv_layers: usize,
    pub kernel_size: usize,
    pub hidden_channels: usize,
    pub noise_channels: usize,
}

impl Default for SubNetworkConfig {
    fn default() -> Self {
        Self {
            n_conv_layers: 9,
            kernel_size: 5,
            hidden_channels: 64,
            noise_channels: 1,
        }
    }
}

impl SubNetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_conv_layers == 0 {
            return Err(Error::Config("a sub-network needs at least one convolution".into()));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "kernel size must be odd, got {}",
                self.kernel_size
            )));
        }
        if self.hidden_channels == 0 {
            return Err(Error::Config("hidden_channels must be positive".into()));
        }
        Ok(())
    }

    pub fn in_channels(&self, layer: usize) -> usize {
        if layer == 0 {
            IMAGE_CHANNELS + self.noise_channels
        } else {
            self.hidden_channels + IMAGE_CHANNELS
        }
    }

    pub fn out_channels(&self, layer: usize) -> usize {
        if layer + 1 == self.n_conv_layers {
            IMAGE_CHANNELS
        } else {
            self.hidden_channels
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub lower: SubNetworkConfig,
    pub upper: SubNetworkConfig,
}

impl GeneratorConfig {
    /// Both stages share one sub-network configuration.
    pub fn uniform(stage: SubNetworkConfig) -> Self {
        Self {
            lower: stage,
            upper: stage,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.lower.validate()?;
        self.upper.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalization layers.
    Train,
    /// Running statistics in normalization layers.
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageKind {
    Lower,
    Upper,
}

impl StageKind {
    fn name(self) -> &'static str {
        match self {
            StageKind::Lower => "lower",
            StageKind::Upper => "upper",
        }
    }
}

/// The two latent noise maps, `[n, k_z, 2h, 2w]` and `[n, k_z, 4h, 4w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisePair<T> {
    pub lower: Tensor<T>,
    pub upper: Tensor<T>,
}

/// Tensor of independent standard normal draws, filled in memory order.
pub fn standard_normal<T: Scalar>(shape: [usize; 4], rng: &mut impl Rng) -> Tensor<T> {
    let len = shape.iter().product();
    let data = (0..len)
        .map(|_| T::lit(rng.sample::<f64, _>(StandardNormal)))
        .collect();
    Tensor::from_vec(shape, data).expect("shape matches length")
}

impl<T: Scalar> NoisePair<T> {
    /// Draws one noise pair per input for a batch of `n` inputs of size `h x w`.
    pub fn sample(config: &GeneratorConfig, n: usize, h: usize, w: usize, rng: &mut impl Rng) -> Self {
        Self {
            lower: standard_normal([n, config.lower.noise_channels, 2 * h, 2 * w], rng),
            upper: standard_normal([n, config.upper.noise_channels, 4 * h, 4 * w], rng),
        }
    }

    pub fn stack(pairs: &[&NoisePair<T>]) -> Result<Self> {
        let lower: Vec<&Tensor<T>> = pairs.iter().map(|p| &p.lower).collect();
        let upper: Vec<&Tensor<T>> = pairs.iter().map(|p| &p.upper).collect();
        Ok(Self {
            lower: Tensor::stack(&lower)?,
            upper: Tensor::stack(&upper)?,
        })
    }
}

/// One sub-network: `n_conv_layers` convolutions and a normalization layer
/// between each adjacent pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage<T> {
    pub config: SubNetworkConfig,
    pub convs: Vec<Conv2d<T>>,
    pub norms: Vec<BatchNorm<T>>,
}

#[derive(Clone, Debug)]
pub struct StageTape<T> {
    inputs: Vec<Tensor<T>>,
    norms: Vec<BnCache<T>>,
    activations: Vec<Tensor<T>>,
    out: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct StageGrads<T> {
    pub convs: Vec<ConvGrad<T>>,
    /// `(dgamma, dbeta)` per normalization layer.
    pub norms: Vec<(Vec<T>, Vec<T>)>,
}

impl<T: Scalar> Stage<T> {
    pub fn init(config: SubNetworkConfig, rng: &mut impl Rng) -> Self {
        let convs = (0..config.n_conv_layers)
            .map(|l| {
                Conv2d::init(
                    config.in_channels(l),
                    config.out_channels(l),
                    config.kernel_size,
                    rng,
                )
            })
            .collect();
        let norms = (0..config.n_conv_layers - 1)
            .map(|_| BatchNorm::new(config.hidden_channels))
            .collect();
        Self {
            config,
            convs,
            norms,
        }
    }

    fn check_inputs(&self, input: &Tensor<T>, noise: &Tensor<T>, skip: Option<&Tensor<T>>) -> Result<()> {
        let [n, c, h, w] = input.shape();
        if c != IMAGE_CHANNELS {
            return Err(Error::arg(format!("stage input must have 3 channels, got {c}")));
        }
        let expected_noise = [n, self.config.noise_channels, 2 * h, 2 * w];
        if noise.shape() != expected_noise {
            return Err(Error::arg(format!(
                "noise shape {:?} does not match expected {expected_noise:?}",
                noise.shape()
            )));
        }
        if let Some(skip) = skip {
            if skip.shape() != [n, IMAGE_CHANNELS, 2 * h, 2 * w] {
                return Err(Error::arg(format!(
                    "skip image shape {:?} does not match stage output size {}x{}",
                    skip.shape(),
                    2 * h,
                    2 * w
                )));
            }
        }
        Ok(())
    }

    fn run(
        &self,
        input: &Tensor<T>,
        noise: &Tensor<T>,
        skip: Option<&Tensor<T>>,
        mode: Mode,
        record: bool,
    ) -> Result<(Tensor<T>, Option<StageTape<T>>)> {
        self.check_inputs(input, noise, skip)?;
        let up = upsample_bilinear(input, 2);
        let skip = skip.unwrap_or(&up);
        let layers = self.config.n_conv_layers;
        let mut tape = StageTape {
            inputs: Vec::with_capacity(layers),
            norms: Vec::with_capacity(layers),
            activations: Vec::with_capacity(layers),
            out: Tensor::zeros([0, 0, 0, 0]),
        };
        let mut current = Tensor::concat_channels(&[&up, noise])?;
        for (l, conv) in self.convs.iter().enumerate() {
            let pre = conv.forward(&current)?;
            if l + 1 == layers {
                let out = sigmoid(&pre);
                if record {
                    tape.inputs.push(current);
                    tape.out = out.clone();
                }
                return Ok((out, record.then_some(tape)));
            }
            let normed = match mode {
                Mode::Train => {
                    let (y, cache) = self.norms[l].forward_train(&pre);
                    if record {
                        tape.norms.push(cache);
                    }
                    y
                }
                Mode::Eval => self.norms[l].forward_eval(&pre),
            };
            let act = relu(&normed);
            let next = Tensor::concat_channels(&[&act, skip])?;
            if record {
                tape.inputs.push(std::mem::replace(&mut current, next));
                tape.activations.push(act);
            } else {
                current = next;
            }
        }
        unreachable!("stage has at least one layer")
    }

    /// Runs the stage on `input` (`s x s`) and noise (`2s x 2s`).
    ///
    /// `skip` is the image concatenated onto every layer after the first;
    /// `None` uses the bilinearly upsampled input.
    pub fn forward(
        &self,
        input: &Tensor<T>,
        noise: &Tensor<T>,
        skip: Option<&Tensor<T>>,
        mode: Mode,
    ) -> Result<Tensor<T>> {
        Ok(self.run(input, noise, skip, mode, false)?.0)
    }

    /// Training-mode forward that keeps the intermediates needed by [`Stage::backward`].
    pub fn forward_train(
        &self,
        input: &Tensor<T>,
        noise: &Tensor<T>,
        skip: Option<&Tensor<T>>,
    ) -> Result<(Tensor<T>, StageTape<T>)> {
        let (out, tape) = self.run(input, noise, skip, Mode::Train, true)?;
        Ok((out, tape.expect("recorded")))
    }

    /// Returns the parameter gradients and, if requested, the gradient with
    /// respect to the bilinearly upsampled input.
    pub fn backward(
        &self,
        tape: &StageTape<T>,
        d_out: &Tensor<T>,
        need_input_grad: bool,
    ) -> Result<(StageGrads<T>, Option<Tensor<T>>)> {
        let layers = self.config.n_conv_layers;
        let mut convs: Vec<Option<ConvGrad<T>>> = vec![None; layers];
        let mut norms = vec![(Vec::new(), Vec::new()); layers - 1];
        let mut d = sigmoid_backward(&tape.out, d_out);
        let mut d_up = None;
        for l in (0..layers).rev() {
            if l + 1 < layers {
                d = relu_backward(&tape.activations[l], &d);
                let (dx, dg, db) = self.norms[l].backward(&tape.norms[l], &d);
                norms[l] = (dg, db);
                d = dx;
            }
            let need_dx = l > 0 || need_input_grad;
            let (grad, dx) = self.convs[l].backward(&tape.inputs[l], &d, need_dx)?;
            convs[l] = Some(grad);
            if l > 0 {
                d = dx.expect("requested").channel_slice(0, self.config.hidden_channels);
            } else if let Some(dx) = dx {
                d_up = Some(dx.channel_slice(0, IMAGE_CHANNELS));
            }
        }
        Ok((
            StageGrads {
                convs: convs.into_iter().map(|g| g.expect("every layer visited")).collect(),
                norms,
            },
            d_up,
        ))
    }

    pub fn update_running_stats(&mut self, tape: &StageTape<T>) {
        for (norm, cache) in self.norms.iter_mut().zip(&tape.norms) {
            norm.update_running(cache);
        }
    }
}

/// All learnable weights of the generator plus normalization running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorParams<T> {
    pub config: GeneratorConfig,
    pub lower: Stage<T>,
    pub upper: Stage<T>,
}

#[derive(Clone, Debug)]
pub struct GeneratorOutput<T> {
    /// Lower stage output, `2h x 2w`.
    pub mid: Tensor<T>,
    /// Final output, `4h x 4w`.
    pub out: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct GeneratorTape<T> {
    lower: StageTape<T>,
    upper: StageTape<T>,
}

/// Gradients aligned with [`GeneratorParams::learnable`].
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorGrads<T> {
    pub tensors: Vec<Vec<T>>,
}

impl<T: Scalar> GeneratorGrads<T> {
    fn from_stages(lower: StageGrads<T>, upper: StageGrads<T>) -> Self {
        let mut tensors = Vec::new();
        for stage in [lower, upper] {
            let mut norms = stage.norms.into_iter();
            for conv in stage.convs {
                tensors.push(conv.weight);
                tensors.push(conv.bias);
                if let Some((g, b)) = norms.next() {
                    tensors.push(g);
                    tensors.push(b);
                }
            }
        }
        Self { tensors }
    }

    pub fn scale(&mut self, k: T) {
        for t in &mut self.tensors {
            for v in t {
                *v *= k;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|v| v.is_finite())
    }
}

impl<T: Scalar> GeneratorParams<T> {
    /// Deterministic initialization from a seed.
    pub fn init(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let seeds = SeedTree::new(seed);
        let mut lower_rng = seeds.rng("init", &[0]);
        let mut upper_rng = seeds.rng("init", &[1]);
        Ok(Self {
            config,
            lower: Stage::init(config.lower, &mut lower_rng),
            upper: Stage::init(config.upper, &mut upper_rng),
        })
    }

    pub fn stage(&self, kind: StageKind) -> &Stage<T> {
        match kind {
            StageKind::Lower => &self.lower,
            StageKind::Upper => &self.upper,
        }
    }

    fn check_input(&self, x: &Tensor<T>, noise: &NoisePair<T>) -> Result<()> {
        let [n, c, h, w] = x.shape();
        if c != IMAGE_CHANNELS || h == 0 || w == 0 {
            return Err(Error::arg(format!("generator input has shape {:?}", x.shape())));
        }
        if noise.upper.shape() != [n, self.config.upper.noise_channels, 4 * h, 4 * w] {
            return Err(Error::arg(format!(
                "upper noise shape {:?} does not match input {:?}",
                noise.upper.shape(),
                x.shape()
            )));
        }
        Ok(())
    }

    /// The original input upsampled x4, used as skip image in the upper stage.
    pub fn upper_skip(x: &Tensor<T>) -> Tensor<T> {
        upsample_bilinear(x, 4)
    }

    pub fn forward(&self, x: &Image01<T>, noise: &NoisePair<T>, mode: Mode) -> Result<GeneratorOutput<T>> {
        self.check_input(x, noise)?;
        let mid = self.lower.forward(x, &noise.lower, None, mode)?;
        let skip = Self::upper_skip(x);
        let out = self.upper.forward(&mid, &noise.upper, Some(&skip), mode)?;
        Ok(GeneratorOutput { mid, out })
    }

    pub fn forward_train(
        &self,
        x: &Image01<T>,
        noise: &NoisePair<T>,
    ) -> Result<(GeneratorOutput<T>, GeneratorTape<T>)> {
        self.check_input(x, noise)?;
        let (mid, lower) = self.lower.forward_train(x, &noise.lower, None)?;
        let skip = Self::upper_skip(x);
        let (out, upper) = self.upper.forward_train(&mid, &noise.upper, Some(&skip))?;
        Ok((GeneratorOutput { mid, out }, GeneratorTape { lower, upper }))
    }

    /// Backpropagates a gradient on the final output to every learnable tensor.
    pub fn backward(&self, tape: &GeneratorTape<T>, d_out: &Tensor<T>) -> Result<GeneratorGrads<T>> {
        let (upper, d_up) = self.upper.backward(&tape.upper, d_out, true)?;
        let d_mid = upsample_bilinear_backward(&d_up.expect("requested"), 2);
        let (lower, _) = self.lower.backward(&tape.lower, &d_mid, false)?;
        Ok(GeneratorGrads::from_stages(lower, upper))
    }

    pub fn update_running_stats(&mut self, tape: &GeneratorTape<T>) {
        self.lower.update_running_stats(&tape.lower);
        self.upper.update_running_stats(&tape.upper);
    }

    /// Draws a noise pair from `seed` and returns the eval-mode output.
    pub fn sample(&self, x: &Image01<T>, seed: u64) -> Result<Image01<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = NoisePair::sample(&self.config, x.n(), x.h(), x.w(), &mut rng);
        Ok(self.forward(x, &noise, Mode::Eval)?.out)
    }

    /// Learnable tensors in a fixed order, with their checkpoint names.
    pub fn learnable(&self) -> Vec<(String, &Vec<T>)> {
        let mut out = Vec::new();
        for kind in [StageKind::Lower, StageKind::Upper] {
            let stage = self.stage(kind);
            let p = kind.name();
            for (l, conv) in stage.convs.iter().enumerate() {
                out.push((format!("{p}.conv{l}.weight"), &conv.weight));
                out.push((format!("{p}.conv{l}.bias"), &conv.bias));
                if let Some(norm) = stage.norms.get(l) {
                    out.push((format!("{p}.norm{l}.gamma"), &norm.gamma));
                    out.push((format!("{p}.norm{l}.beta"), &norm.beta));
                }
            }
        }
        out
    }

    /// Mutable view of the learnable tensors, same order as [`Self::learnable`].
    pub fn learnable_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut out = Vec::new();
        for stage in [&mut self.lower, &mut self.upper] {
            let mut norms = stage.norms.iter_mut();
            for conv in stage.convs.iter_mut() {
                out.push(&mut conv.weight);
                out.push(&mut conv.bias);
                if let Some(norm) = norms.next() {
                    out.push(&mut norm.gamma);
                    out.push(&mut norm.beta);
                }
            }
        }
        out
    }

    /// Normalization running statistics with their checkpoint names.
    pub fn buffers(&self) -> Vec<(String, &Vec<T>)> {
        let mut out = Vec::new();
        for kind in [StageKind::Lower, StageKind::Upper] {
            let p = kind.name();
            for (l, norm) in self.stage(kind).norms.iter().enumerate() {
                out.push((format!("{p}.norm{l}.running_mean"), &norm.running_mean));
                out.push((format!("{p}.norm{l}.running_var"), &norm.running_var));
            }
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut out = Vec::new();
        for stage in [&mut self.lower, &mut self.upper] {
            for norm in stage.norms.iter_mut() {
                out.push(&mut norm.running_mean);
                out.push(&mut norm.running_var);
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.learnable().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.learnable()
            .iter()
            .chain(self.buffers().iter())
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}
