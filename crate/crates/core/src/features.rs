//! Perceptual feature space.
//!
//! A feature vector is the weighted concatenation of the raw pixels and the
//! pre-activations of two tap layers of a convolutional network applied to
//! the mean-subtracted `[0, 255]` image. Two network backends exist: a
//! pretrained 19-layer classification network loaded from a weights file,
//! and a small randomly initialized network from a fixed seed that needs no
//! download. High-dimensional features can be compressed with a Gaussian
//! random projection before nearest-sample search.


use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::container::Container;
use crate::error::{Error, Result};
use crate::generator::standard_normal;
use crate::nn::{maxpool2, maxpool2_backward, relu, relu_backward, Conv2d};
use crate::scalar::Scalar;
use crate::tensor::{Image01, Tensor};

/// Mean RGB pixel of the ImageNet training set on the `[0, 255]` scale.
pub const IMAGENET_MEAN_RGB: [f64; 3] = [123.68, 116.779, 103.939];

/// Floor applied to component magnitudes during weight calibration.
pub const CALIBRATION_EPS: f64 = 1e-8;

const FEATURE_NET_KIND: &str = "srim-feature-net";

/// Scales `[0, 1]` pixels to `[0, 255]` and subtracts the mean pixel.
pub fn preprocess_for_deep_net<T: Scalar>(img: &Image01<T>) -> Result<Tensor<T>> {
    if img.c() != 3 {
        return Err(Error::arg(format!("expected 3 channels, got {}", img.c())));
    }
    if let Some(v) = img.data().iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
        return Err(Error::arg(format!("pixel value {v} outside [0, 1]")));
    }
    let mut out = img.clone();
    let scale = T::lit(255.0);
    for s in 0..img.n() {
        for (ch, mean) in IMAGENET_MEAN_RGB.iter().enumerate() {
            let m = T::lit(*mean);
            for v in out.plane_mut(s, ch) {
                *v = *v * scale - m;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub enum FeatureOp<T> {
    Conv(Conv2d<T>),
    Relu,
    MaxPool,
}

impl<T> FeatureOp<T> {
    fn tag(&self) -> &'static str {
        match self {
            FeatureOp::Conv(_) => "conv",
            FeatureOp::Relu => "relu",
            FeatureOp::MaxPool => "pool",
        }
    }
}

/// A fixed convolutional network whose tap layers provide deep features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureNet<T> {
    ops: Vec<FeatureOp<T>>,
    /// Indices into `ops` of convolutions whose outputs are taken, increasing.
    taps: Vec<usize>,
}

/// Intermediate values of a recorded forward pass.
#[derive(Clone, Debug)]
pub struct NetTape<T> {
    inputs: Vec<Tensor<T>>,
    outputs: Vec<Tensor<T>>,
    argmax: Vec<Vec<usize>>,
}

/// Layer layout of the 19-layer network up to `conv4_4`, as `(in, out)` per
/// convolution and `None` per pooling layer. Taps: `conv2_2`, `conv4_4`.
const VGG19_LAYOUT: [Option<(usize, usize)>; 15] = [
    Some((3, 64)),
    Some((64, 64)),
    None,
    Some((64, 128)),
    Some((128, 128)),
    None,
    Some((128, 256)),
    Some((256, 256)),
    Some((256, 256)),
    Some((256, 256)),
    None,
    Some((256, 512)),
    Some((512, 512)),
    Some((512, 512)),
    Some((512, 512)),
];

fn build_ops<T>(layout: &[Option<(usize, usize)>], mut conv: impl FnMut(usize, usize) -> Conv2d<T>) -> (Vec<FeatureOp<T>>, Vec<usize>)
where
    T: Scalar,
{
    let mut ops = Vec::new();
    for (i, layer) in layout.iter().enumerate() {
        match layer {
            Some((cin, cout)) => {
                ops.push(FeatureOp::Conv(conv(*cin, *cout)));
                if i + 1 < layout.len() {
                    ops.push(FeatureOp::Relu);
                }
            }
            None => ops.push(FeatureOp::MaxPool),
        }
    }
    (ops, Vec::new())
}

impl<T: Scalar> FeatureNet<T> {
    pub fn new(ops: Vec<FeatureOp<T>>, taps: Vec<usize>) -> Result<Self> {
        if taps.is_empty() || taps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::arg("feature taps must be non-empty and increasing"));
        }
        for &t in &taps {
            if !matches!(ops.get(t), Some(FeatureOp::Conv(_))) {
                return Err(Error::arg(format!("tap {t} is not a convolution")));
            }
        }
        let mut channels = 3;
        for op in &ops {
            if let FeatureOp::Conv(c) = op {
                if c.in_channels != channels {
                    return Err(Error::arg(format!(
                        "feature network convolution expects {} channels, previous layer gives {channels}",
                        c.in_channels
                    )));
                }
                channels = c.out_channels;
            }
        }
        Ok(Self { ops, taps })
    }

    /// Two-tap random network: `conv(3->8) relu conv(8->8)* relu pool conv(8->16) relu conv(16->16)*`.
    pub fn random_convnet(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = [Some((3, 8)), Some((8, 8)), None, Some((8, 16)), Some((16, 16))];
        let (ops, _) = build_ops(&layout, |i, o| Conv2d::init(i, o, 3, &mut rng));
        let taps = vec![2, 7];
        Self::new(ops, taps).expect("static layout is valid")
    }

    /// The pretrained 19-layer network, truncated after `conv4_4`, from a
    /// weights container. Convolutions are stored as `conv{i}.weight`
    /// (`[out, in, 3, 3]`) and `conv{i}.bias` for `i` in `0..12` in layer order.
    pub fn vgg19_from_container(c: &Container) -> Result<Self> {
        let mut idx = 0;
        let mut err = None;
        let (ops, _) = build_ops(&VGG19_LAYOUT, |cin, cout| {
            let i = idx;
            idx += 1;
            let load = || -> Result<Conv2d<T>> {
                let weight = c.get_exact(&format!("conv{i}.weight"), cout * cin * 9)?;
                let bias = c.get_exact(&format!("conv{i}.bias"), cout)?;
                Ok(Conv2d {
                    in_channels: cin,
                    out_channels: cout,
                    kernel: 3,
                    weight,
                    bias,
                })
            };
            load().unwrap_or_else(|e| {
                err.get_or_insert(e);
                Conv2d {
                    in_channels: cin,
                    out_channels: cout,
                    kernel: 3,
                    weight: vec![T::zero(); cout * cin * 9],
                    bias: vec![T::zero(); cout],
                }
            })
        });
        if let Some(e) = err {
            return Err(e);
        }
        // conv2_2 and conv4_4 positions in the op list
        let taps = vec![7, 25];
        Self::new(ops, taps)
    }

    pub fn taps(&self) -> &[usize] {
        &self.taps
    }

    pub fn pool_count(&self) -> usize {
        self.ops[..=*self.taps.last().expect("non-empty")]
            .iter()
            .filter(|o| matches!(o, FeatureOp::MaxPool))
            .count()
    }

    /// `[c, h, w]` of each tap for an `h x w` input.
    pub fn tap_shapes(&self, h: usize, w: usize) -> Vec<[usize; 3]> {
        let (mut c, mut h, mut w) = (3, h, w);
        let mut shapes = Vec::new();
        for (i, op) in self.ops.iter().enumerate() {
            match op {
                FeatureOp::Conv(conv) => c = conv.out_channels,
                FeatureOp::MaxPool => {
                    h /= 2;
                    w /= 2;
                }
                FeatureOp::Relu => {}
            }
            if self.taps.contains(&i) {
                shapes.push([c, h, w]);
            }
        }
        shapes
    }

    fn run(&self, x: Tensor<T>, record: bool) -> Result<(Vec<Tensor<T>>, Option<NetTape<T>>)> {
        let last = *self.taps.last().expect("non-empty");
        let mut tape = NetTape {
            inputs: Vec::new(),
            outputs: Vec::new(),
            argmax: Vec::new(),
        };
        let mut taps = Vec::with_capacity(self.taps.len());
        let mut cur = x;
        for (i, op) in self.ops[..=last].iter().enumerate() {
            let (next, arg) = match op {
                FeatureOp::Conv(conv) => (conv.forward(&cur)?, Vec::new()),
                FeatureOp::Relu => (relu(&cur), Vec::new()),
                FeatureOp::MaxPool => maxpool2(&cur),
            };
            if self.taps.contains(&i) {
                taps.push(next.clone());
            }
            if record {
                tape.inputs.push(cur);
                tape.outputs.push(next.clone());
                tape.argmax.push(arg);
            }
            cur = next;
        }
        Ok((taps, record.then_some(tape)))
    }

    /// Tap activations for a preprocessed batch.
    pub fn forward(&self, x: Tensor<T>) -> Result<Vec<Tensor<T>>> {
        Ok(self.run(x, false)?.0)
    }

    pub fn forward_record(&self, x: Tensor<T>) -> Result<(Vec<Tensor<T>>, NetTape<T>)> {
        let (taps, tape) = self.run(x, true)?;
        Ok((taps, tape.expect("recorded")))
    }

    /// Gradient with respect to the network input given gradients on each tap.
    pub fn backward(&self, tape: &NetTape<T>, d_taps: &[Tensor<T>]) -> Result<Tensor<T>> {
        let last = *self.taps.last().expect("non-empty");
        let mut d: Option<Tensor<T>> = None;
        for i in (0..=last).rev() {
            if let Some(k) = self.taps.iter().position(|&t| t == i) {
                d = Some(match d {
                    None => d_taps[k].clone(),
                    Some(mut acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(d_taps[k].data()) {
                            *a += *b;
                        }
                        acc
                    }
                });
            }
            let g = d.take().expect("gradient flows from the last tap");
            d = Some(match &self.ops[i] {
                FeatureOp::Conv(conv) => conv
                    .backward(&tape.inputs[i], &g, true)?
                    .1
                    .expect("requested"),
                FeatureOp::Relu => relu_backward(&tape.outputs[i], &g),
                FeatureOp::MaxPool => maxpool2_backward(&tape.argmax[i], &g, tape.inputs[i].shape()),
            });
        }
        Ok(d.expect("at least one op"))
    }

    pub fn to_container(&self) -> Container {
        let ops: Vec<&str> = self.ops.iter().map(FeatureOp::tag).collect();
        let mut c = Container::new(FEATURE_NET_KIND, json!({ "ops": ops, "taps": self.taps }));
        for (i, op) in self.ops.iter().enumerate() {
            if let FeatureOp::Conv(conv) = op {
                let k = conv.kernel;
                c.insert(
                    format!("op{i}.weight"),
                    &[conv.out_channels, conv.in_channels, k, k],
                    &conv.weight,
                );
                c.insert(format!("op{i}.bias"), &[conv.out_channels], &conv.bias);
            }
        }
        c
    }

    /// Inverse of [`Self::to_container`].
    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != FEATURE_NET_KIND {
            return Err(Error::Checkpoint(format!("expected a feature network, found {}", c.kind)));
        }
        let ops: Vec<String> = serde_json::from_value(c.meta["ops"].clone())
            .map_err(|e| Error::Checkpoint(format!("feature network ops: {e}")))?;
        let taps: Vec<usize> = serde_json::from_value(c.meta["taps"].clone())
            .map_err(|e| Error::Checkpoint(format!("feature network taps: {e}")))?;
        let mut built = Vec::with_capacity(ops.len());
        for (i, tag) in ops.iter().enumerate() {
            built.push(match tag.as_str() {
                "conv" => {
                    let (shape, weight) = c.get::<T>(&format!("op{i}.weight"))?;
                    if shape.len() != 4 || shape[2] != shape[3] || shape[2] % 2 == 0 {
                        return Err(Error::Checkpoint(format!("op{i}: bad kernel shape {shape:?}")));
                    }
                    let bias = c.get_exact(&format!("op{i}.bias"), shape[0])?;
                    FeatureOp::Conv(Conv2d {
                        in_channels: shape[1],
                        out_channels: shape[0],
                        kernel: shape[2],
                        weight,
                        bias,
                    })
                }
                "relu" => FeatureOp::Relu,
                "pool" => FeatureOp::MaxPool,
                other => return Err(Error::Checkpoint(format!("unknown feature op {other}"))),
            });
        }
        Self::new(built, taps)
    }

    pub fn checksum(&self) -> String {
        self.to_container().checksum()
    }
}

/// Which network supplies the deep feature components.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FeatureBackend {
    /// Small network with fixed-seed random weights.
    RandomConvnet { seed: u64 },
    /// Pretrained 19-layer network weights from a container file.
    Pretrained { path: std::path::PathBuf },
}

/// Offsets and lengths of the components inside a feature vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeatureLayout {
    pub offsets: Vec<usize>,
    pub lengths: Vec<usize>,
}

impl FeatureLayout {
    fn from_lengths(lengths: Vec<usize>) -> Self {
        let offsets = lengths
            .iter()
            .scan(0, |acc, &l| {
                let o = *acc;
                *acc += l;
                Some(o)
            })
            .collect();
        Self { offsets, lengths }
    }

    pub fn total(&self) -> usize {
        self.lengths.iter().sum()
    }

    pub fn components(&self) -> usize {
        self.lengths.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector<T> {
    pub data: Vec<T>,
    pub layout: FeatureLayout,
}

impl<T: Scalar> FeatureVector<T> {
    pub fn component(&self, k: usize) -> &[T] {
        &self.data[self.layout.offsets[k]..self.layout.offsets[k] + self.layout.lengths[k]]
    }
}

/// Intermediates for backpropagating through feature extraction.
#[derive(Clone, Debug)]
pub struct FeatureTape<T> {
    net: Option<NetTape<T>>,
    shape: [usize; 4],
}

/// The feature map: raw pixels followed by each network tap, each scaled by its weight.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor<T> {
    net: Option<FeatureNet<T>>,
    weights: Vec<T>,
    input_hw: (usize, usize),
    layout: FeatureLayout,
    checksum: String,
}

impl<T: Scalar> FeatureExtractor<T> {
    /// Extractor over `net` for `h x w` images with unit weights.
    pub fn new(net: FeatureNet<T>, h: usize, w: usize) -> Result<Self> {
        let pools = net.pool_count();
        let m = 1usize << pools;
        if h == 0 || w == 0 || !h.is_multiple_of(m) || !w.is_multiple_of(m) {
            return Err(Error::arg(format!(
                "input size {h}x{w} must be a positive multiple of {m} for this feature network"
            )));
        }
        let mut lengths = vec![3 * h * w];
        lengths.extend(net.tap_shapes(h, w).iter().map(|s| s.iter().product::<usize>()));
        let checksum = net.checksum();
        Ok(Self {
            weights: vec![T::one(); lengths.len()],
            layout: FeatureLayout::from_lengths(lengths),
            net: Some(net),
            input_hw: (h, w),
            checksum,
        })
    }

    /// Pixel-only feature map (a single identity component).
    pub fn pixels_only(h: usize, w: usize) -> Self {
        Self {
            net: None,
            weights: vec![T::one()],
            input_hw: (h, w),
            layout: FeatureLayout::from_lengths(vec![3 * h * w]),
            checksum: "pixels".into(),
        }
    }

    pub fn from_backend(backend: &FeatureBackend, h: usize, w: usize) -> Result<Self> {
        match backend {
            FeatureBackend::RandomConvnet { seed } => Self::new(FeatureNet::random_convnet(*seed), h, w),
            FeatureBackend::Pretrained { path } => {
                let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
                let c = Container::from_bytes(&bytes)?;
                let net = if c.kind == FEATURE_NET_KIND {
                    FeatureNet::from_container(&c)?
                } else {
                    FeatureNet::vgg19_from_container(&c)?
                };
                let mut ext = Self::new(net, h, w)?;
                ext.checksum = crate::container::sha256_hex(&bytes);
                Ok(ext)
            }
        }
    }

    /// Same network and weights at another input resolution.
    pub fn at_resolution(&self, h: usize, w: usize) -> Result<Self> {
        let mut out = match &self.net {
            Some(net) => Self::new(net.clone(), h, w)?,
            None => Self::pixels_only(h, w),
        };
        out.weights = self.weights.clone();
        out.checksum = self.checksum.clone();
        Ok(out)
    }

    pub fn layout(&self) -> &FeatureLayout {
        &self.layout
    }

    pub fn dim(&self) -> usize {
        self.layout.total()
    }

    pub fn input_hw(&self) -> (usize, usize) {
        self.input_hw
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn set_weights(&mut self, weights: Vec<T>) -> Result<()> {
        if weights.len() != self.layout.components() {
            return Err(Error::arg(format!(
                "expected {} component weights, got {}",
                self.layout.components(),
                weights.len()
            )));
        }
        self.weights = weights;
        Ok(())
    }

    /// Identifies the network weights (SHA-256 of the weights file or serialized net).
    pub fn checksum(&self) -> &str {
        &self.checksum
    }

    fn check_batch(&self, imgs: &Tensor<T>) -> Result<()> {
        if imgs.c() != 3 || imgs.hw() != self.input_hw {
            return Err(Error::arg(format!(
                "feature extractor expects [n, 3, {}, {}], got {:?}",
                self.input_hw.0,
                self.input_hw.1,
                imgs.shape()
            )));
        }
        Ok(())
    }

    /// Unweighted components per image: pixels, then each tap.
    fn components(&self, imgs: &Tensor<T>, record: bool) -> Result<(Vec<Tensor<T>>, Option<NetTape<T>>)> {
        self.check_batch(imgs)?;
        let mut comps = vec![imgs.clone()];
        let mut tape = None;
        if let Some(net) = &self.net {
            let pre = preprocess_for_deep_net(imgs)?;
            if record {
                let (taps, t) = net.forward_record(pre)?;
                comps.extend(taps);
                tape = Some(t);
            } else {
                comps.extend(net.forward(pre)?);
            }
        }
        Ok((comps, tape))
    }

    fn assemble(&self, comps: &[Tensor<T>]) -> Vec<Vec<T>> {
        let n = comps[0].n();
        (0..n)
            .map(|s| {
                let mut v = Vec::with_capacity(self.dim());
                for (comp, &alpha) in comps.iter().zip(&self.weights) {
                    v.extend(comp.sample(s).iter().map(|&x| x * alpha));
                }
                v
            })
            .collect()
    }

    /// Weighted feature vectors for every image of a batch.
    pub fn extract_batch(&self, imgs: &Tensor<T>) -> Result<Vec<Vec<T>>> {
        let (comps, _) = self.components(imgs, false)?;
        Ok(self.assemble(&comps))
    }

    pub fn extract(&self, img: &Image01<T>) -> Result<FeatureVector<T>> {
        if img.n() != 1 {
            return Err(Error::arg("extract takes a single image"));
        }
        let data = self.extract_batch(img)?.pop().expect("one image");
        Ok(FeatureVector {
            data,
            layout: self.layout.clone(),
        })
    }

    pub fn extract_with_tape(&self, imgs: &Tensor<T>) -> Result<(Vec<Vec<T>>, FeatureTape<T>)> {
        let (comps, net) = self.components(imgs, true)?;
        Ok((
            self.assemble(&comps),
            FeatureTape {
                net,
                shape: imgs.shape(),
            },
        ))
    }

    /// Gradient with respect to the input images given a gradient per feature vector.
    pub fn backward(&self, tape: &FeatureTape<T>, d_features: &[Vec<T>]) -> Result<Tensor<T>> {
        let [n, c, h, w] = tape.shape;
        if d_features.len() != n || d_features.iter().any(|d| d.len() != self.dim()) {
            return Err(Error::arg("feature gradient does not match the recorded batch"));
        }
        let mut split: Vec<Tensor<T>> = Vec::with_capacity(self.layout.components());
        let mut shapes = vec![[c, h, w]];
        if let Some(net) = &self.net {
            shapes.extend(net.tap_shapes(h, w));
        }
        for (k, [cc, hh, ww]) in shapes.iter().copied().enumerate() {
            let (off, len) = (self.layout.offsets[k], self.layout.lengths[k]);
            let alpha = self.weights[k];
            let mut data = Vec::with_capacity(n * len);
            for d in d_features {
                data.extend(d[off..off + len].iter().map(|&g| g * alpha));
            }
            split.push(Tensor::from_vec([n, cc, hh, ww], data)?);
        }
        let mut d_img = split[0].clone();
        if let (Some(net), Some(net_tape)) = (&self.net, &tape.net) {
            let d_pre = net.backward(net_tape, &split[1..])?;
            let k = T::lit(255.0);
            for (a, b) in d_img.data_mut().iter_mut().zip(d_pre.data()) {
                *a += *b * k;
            }
        }
        Ok(d_img)
    }

    /// Mean absolute value of each unweighted component over a set of images.
    pub fn component_magnitudes(&self, imgs: &[Image01<T>]) -> Result<Vec<f64>> {
        if imgs.is_empty() {
            return Err(Error::arg("calibration needs at least one image"));
        }
        let mut sums = vec![0.0; self.layout.components()];
        for img in imgs {
            let (comps, _) = self.components(img, false)?;
            for (s, comp) in sums.iter_mut().zip(&comps) {
                *s += comp.data().iter().map(|v| v.f64().abs()).sum::<f64>();
            }
        }
        Ok(sums
            .iter()
            .zip(&self.layout.lengths)
            .map(|(s, &len)| s / (len as f64 * imgs.len() as f64))
            .collect())
    }

    /// Sets each weight to the reciprocal of its component's mean absolute
    /// value (floored at [`CALIBRATION_EPS`]) and returns the new weights.
    pub fn calibrate_weights(&mut self, imgs: &[Image01<T>]) -> Result<Vec<T>> {
        let mags = self.component_magnitudes(imgs)?;
        self.weights = calibration_weights(&mags).into_iter().map(T::lit).collect();
        Ok(self.weights.clone())
    }
}

/// Reciprocal-magnitude weights for the given component magnitudes.
pub fn calibration_weights(magnitudes: &[f64]) -> Vec<f64> {
    magnitudes.iter().map(|&m| 1.0 / m.max(CALIBRATION_EPS)).collect()
}

/// Squared Euclidean distance.
pub fn feature_distance<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::arg(format!(
            "feature lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum())
}

/// Dense Gaussian projection with entry variance `1 / target_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionMatrix<T> {
    target_dim: usize,
    source_dim: usize,
    seed: u64,
    entries: Vec<T>,
}

impl<T: Scalar> ProjectionMatrix<T> {
    pub fn new(target_dim: usize, source_dim: usize, seed: u64) -> Result<Self> {
        if target_dim == 0 || source_dim == 0 {
            return Err(Error::arg("projection dimensions must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = T::lit((1.0 / target_dim as f64).sqrt());
        let entries = standard_normal::<T>([1, 1, target_dim, source_dim], &mut rng)
            .into_vec()
            .into_iter()
            .map(|v| v * std)
            .collect();
        Ok(Self {
            target_dim,
            source_dim,
            seed,
            entries,
        })
    }

    pub fn target_dim(&self) -> usize {
        self.target_dim
    }

    pub fn source_dim(&self) -> usize {
        self.source_dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn project(&self, v: &[T]) -> Result<Vec<T>> {
        Ok(self.project_many(std::slice::from_ref(&v.to_vec()))?.pop().expect("one"))
    }

    /// Projects a batch of vectors with one matrix product.
    pub fn project_many(&self, vs: &[Vec<T>]) -> Result<Vec<Vec<T>>> {
        if let Some(v) = vs.iter().find(|v| v.len() != self.source_dim) {
            return Err(Error::arg(format!(
                "projection expects length {}, got {}",
                self.source_dim,
                v.len()
            )));
        }
        if vs.is_empty() {
            return Ok(Vec::new());
        }
        let b = vs.len();
        let stacked: Vec<T> = vs.iter().flatten().copied().collect();
        let mut out = vec![T::zero(); b * self.target_dim];
        {
            let v = ArrayView2::from_shape((b, self.source_dim), &stacked).expect("shape");
            let p = ArrayView2::from_shape((self.target_dim, self.source_dim), &self.entries).expect("shape");
            let mut o = ArrayViewMut2::from_shape((b, self.target_dim), &mut out).expect("shape");
            general_mat_mul(T::one(), &v, &p.t(), T::zero(), &mut o);
        }
        Ok(out.chunks(self.target_dim).map(<[T]>::to_vec).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn image(h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..3 * h * w).map(|_| rng.random_range(0.0..1.0)).collect();
        Tensor::from_vec([1, 3, h, w], data).unwrap()
    }

    #[test]
    fn preprocess_zero_and_one() {
        let zero = preprocess_for_deep_net(&Tensor::<f64>::zeros([1, 3, 2, 2])).unwrap();
        assert_eq!(zero.plane(0, 0), &[-123.68; 4]);
        assert_eq!(zero.plane(0, 2), &[-103.939; 4]);
        let one = preprocess_for_deep_net(&Tensor::<f64>::filled([1, 3, 1, 1], 1.0)).unwrap();
        assert!((one.data()[0] - 131.32).abs() < 1e-9);
        assert!((one.data()[1] - 138.221).abs() < 1e-9);
        assert!((one.data()[2] - 151.061).abs() < 1e-9);
    }

    #[test]
    fn preprocess_mean_pixel_cancels() {
        let mut img = Tensor::<f64>::zeros([1, 3, 1, 2]);
        for (c, m) in IMAGENET_MEAN_RGB.iter().enumerate() {
            img.plane_mut(0, c).fill(m / 255.0);
        }
        let out = preprocess_for_deep_net(&img).unwrap();
        assert!(out.data().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn preprocess_rejects_out_of_range() {
        let img = Tensor::<f64>::filled([1, 3, 1, 1], 1.5);
        assert!(preprocess_for_deep_net(&img).is_err());
    }

    #[test]
    fn pixel_component_is_identity() {
        let mut ext = FeatureExtractor::<f64>::new(FeatureNet::random_convnet(1), 8, 8).unwrap();
        ext.set_weights(vec![1.0, 0.0, 0.0]).unwrap();
        let img = image(8, 8, 4);
        let f = ext.extract(&img).unwrap();
        assert_eq!(f.component(0), img.data());
        assert!(f.component(1).iter().all(|&v| v == 0.0));
        assert_eq!(f.data.len(), f.layout.total());
        assert_eq!(f.layout.lengths, vec![192, 8 * 64, 16 * 16]);
        assert_eq!(ext.extract(&img).unwrap(), f);
    }

    #[test]
    fn rejects_wrong_input_size() {
        let ext = FeatureExtractor::<f64>::new(FeatureNet::random_convnet(1), 8, 8).unwrap();
        assert!(ext.extract(&image(4, 4, 0)).is_err());
        assert!(FeatureExtractor::<f64>::new(FeatureNet::random_convnet(1), 7, 8).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut ext = FeatureExtractor::<f64>::new(FeatureNet::random_convnet(3), 4, 4).unwrap();
        ext.set_weights(vec![1.0, 0.01, 0.02]).unwrap();
        let img = image(4, 4, 9).map(|v| 0.2 + 0.6 * v);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g: Vec<f64> = (0..ext.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |x: &Tensor<f64>| -> f64 {
            let f = ext.extract_batch(x).unwrap();
            f[0].iter().zip(&g).map(|(a, b)| a * b).sum()
        };
        let (_, tape) = ext.extract_with_tape(&img).unwrap();
        let d = ext.backward(&tape, std::slice::from_ref(&g)).unwrap();
        let h = 1e-7;
        let mut checked = 0;
        for i in 0..img.len() {
            let mut p = img.clone();
            p.data_mut()[i] += h;
            let mut m = img.clone();
            m.data_mut()[i] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            let rel = (fd - d.data()[i]).abs() / fd.abs().max(d.data()[i].abs()).max(1e-6);
            if rel < 1e-4 {
                checked += 1;
            }
        }
        // rectifier kinks can make a few coordinates non-differentiable
        assert!(checked >= img.len() * 9 / 10, "{checked}/{}", img.len());
    }

    #[test]
    fn container_round_trip_preserves_features() {
        let net = FeatureNet::<f32>::random_convnet(5);
        let back = FeatureNet::<f32>::from_container(&Container::from_bytes(&net.to_container().to_bytes()).unwrap()).unwrap();
        assert_eq!(net, back);
        assert_eq!(net.checksum(), back.checksum());
    }

    #[test]
    fn vgg19_layout_loads_from_container() {
        let mut c = Container::new("vgg19", serde_json::Value::Null);
        let mut i = 0;
        for (cin, cout) in VGG19_LAYOUT.iter().flatten() {
            c.insert(format!("conv{i}.weight"), &[*cout, *cin, 3, 3], &vec![0.0f32; cout * cin * 9]);
            c.insert(format!("conv{i}.bias"), &[*cout], &vec![0.5f32; *cout]);
            i += 1;
        }
        assert_eq!(i, 12);
        let net = FeatureNet::<f32>::vgg19_from_container(&c).unwrap();
        assert_eq!(net.pool_count(), 3);
        assert_eq!(net.tap_shapes(32, 32), vec![[128, 16, 16], [512, 4, 4]]);
        let taps = net.forward(Tensor::zeros([1, 3, 32, 32])).unwrap();
        assert!(taps[1].data().iter().all(|&v| v == 0.5));
        let mut broken = Container::new("vgg19", serde_json::Value::Null);
        for name in c.names().filter(|n| *n != "conv11.bias") {
            let (shape, v) = c.get::<f32>(name).unwrap();
            broken.insert(name, &shape, &v);
        }
        assert!(FeatureNet::<f32>::vgg19_from_container(&broken).is_err());
    }

    #[test]
    fn distance_basics() {
        assert_eq!(feature_distance(&[0.0f64, 0.0], &[3.0, 4.0]).unwrap(), 25.0);
        assert_eq!(feature_distance(&[1.5f64, 2.0], &[1.5, 2.0]).unwrap(), 0.0);
        assert!(feature_distance(&[1.0f64], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn calibration_floor_and_ratio() {
        let w = calibration_weights(&[0.0, 10.0, 1000.0]);
        assert_eq!(w[0], 1.0 / CALIBRATION_EPS);
        assert!((w[1] / w[2] - 100.0).abs() < 1e-9);
    }

    #[test]
    fn projection_is_linear_and_seeded() {
        let p = ProjectionMatrix::<f64>::new(16, 40, 3).unwrap();
        assert_eq!(p, ProjectionMatrix::new(16, 40, 3).unwrap());
        assert!(p.project(&[0.0; 40]).unwrap().iter().all(|&v| v == 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let u: Vec<f64> = (0..40).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..40).map(|_| rng.random_range(-1.0..1.0)).collect();
        let diff: Vec<f64> = u.iter().zip(&v).map(|(a, b)| a - b).collect();
        let pu = p.project(&u).unwrap();
        let pv = p.project(&v).unwrap();
        let pd = p.project(&diff).unwrap();
        for i in 0..16 {
            assert!((pu[i] - pv[i] - pd[i]).abs() < 1e-12);
        }
        assert!(p.project(&[1.0; 39]).is_err());
    }
}
