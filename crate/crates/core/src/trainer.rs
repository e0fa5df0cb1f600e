//! Conditional IMLE training with hierarchical noise selection.
//!
//! One outer iteration:
//!
//! 1. draw a batch `S` of training examples;
//! 2. for each example, draw `m_lower` lower-stage noise maps, keep the one
//!    whose intermediate output is nearest the downsampled target, then draw
//!    `m_upper` upper-stage noise maps under that choice and keep the one whose
//!    final output is nearest the target in (projected) feature space;
//! 3. take `M` gradient steps, each on a mini-batch of `S`, on
//!    `(n / |mini-batch|) * sum |phi(T(x, z)) - phi(y)|^2` with the selected
//!    noise held fixed and the output recomputed under the current weights.
//!
//! Selection runs in eval mode (running normalization statistics), gradient
//! steps in train mode.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::container::Container;
use crate::dataset::PairedDataset;
use crate::error::{Error, Result};
use crate::features::{FeatureExtractor, ProjectionMatrix};
use crate::generator::{GeneratorConfig, GeneratorGrads, GeneratorParams, GeneratorTape, Mode, NoisePair};
use crate::nn_search::{select_nearest, CandidatePool};
use crate::optim::{Optimizer, OptimizerKind};
use crate::resample::resize_bicubic;
use crate::scalar::Scalar;
use crate::seeds::SeedTree;
use crate::tensor::{Image01, Tensor};

/// Distance used to pick the lower-stage noise.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LowerMetric {
    /// Squared pixel distance at the intermediate resolution.
    Pixel,
    /// Unprojected feature distance at the intermediate resolution.
    Feature,
}

impl fmt::Display for LowerMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LowerMetric::Pixel => "pixel",
            LowerMetric::Feature => "feature",
        })
    }
}

impl FromStr for LowerMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pixel" => Ok(LowerMetric::Pixel),
            "feature" => Ok(LowerMetric::Feature),
            other => Err(Error::Config(format!("unknown lower metric {other} (expected pixel or feature)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Outer iterations `N`.
    pub outer_iters: usize,
    /// Gradient steps per outer iteration `M`.
    pub inner_steps: usize,
    pub m_lower: usize,
    pub m_upper: usize,
    /// Outer batch size `|S|`.
    pub batch_outer: usize,
    /// Mini-batch size of each gradient step.
    pub batch_inner: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Write a checkpoint every this many outer iterations; 0 disables.
    pub checkpoint_every: usize,
    pub lower_metric: LowerMetric,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            outer_iters: 1000,
            inner_steps: 50,
            m_lower: 16,
            m_upper: 16,
            batch_outer: 16,
            batch_inner: 4,
            learning_rate: 1e-4,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            checkpoint_every: 100,
            lower_metric: LowerMetric::Pixel,
        }
    }
}

impl TrainConfig {
    /// Checks the loop bounds against a training set of `n` examples.
    pub fn validate(&self, n: usize) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.m_lower < 1 || self.m_upper < 1 {
            return fail("m_lower and m_upper must be at least 1".into());
        }
        if self.batch_inner < 1 {
            return fail("batch_inner must be at least 1".into());
        }
        if self.batch_inner > self.batch_outer {
            return fail(format!(
                "batch_inner ({}) must not exceed batch_outer ({})",
                self.batch_inner, self.batch_outer
            ));
        }
        if self.batch_outer > n {
            return fail(format!(
                "batch_outer ({}) exceeds the training set size ({n})",
                self.batch_outer
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning rate must be finite and non-negative, got {}", self.learning_rate));
        }
        Ok(())
    }

    /// True when `other` may continue a run started with `self`.
    fn resumable_from(&self, other: &TrainConfig) -> bool {
        let strip = |c: &TrainConfig| TrainConfig {
            outer_iters: 0,
            checkpoint_every: 0,
            ..c.clone()
        };
        strip(self) == strip(other)
    }
}

/// Feature extractors and projection used for selection and loss.
#[derive(Clone, Debug)]
pub struct FeatureSpace<T> {
    /// At the output resolution.
    pub full: FeatureExtractor<T>,
    /// Same weights at the intermediate resolution.
    pub half: FeatureExtractor<T>,
    pub projection: Option<ProjectionMatrix<T>>,
}

impl<T: Scalar> FeatureSpace<T> {
    pub fn new(full: FeatureExtractor<T>, projection: Option<ProjectionMatrix<T>>) -> Result<Self> {
        let (h, w) = full.input_hw();
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::arg("output resolution must be even"));
        }
        if let Some(p) = &projection {
            if p.source_dim() != full.dim() {
                return Err(Error::arg(format!(
                    "projection source dimension {} does not match feature dimension {}",
                    p.source_dim(),
                    full.dim()
                )));
            }
        }
        let half = full.at_resolution(h / 2, w / 2).or_else(|_| {
            // networks with pooling may not accept the half size; fall back to pixels
            Ok::<_, Error>(FeatureExtractor::pixels_only(h / 2, w / 2))
        })?;
        Ok(Self { full, half, projection })
    }

    /// Vectors compared during upper-stage selection.
    pub fn selection_vectors(&self, imgs: &Tensor<T>) -> Result<Vec<Vec<T>>> {
        let f = self.full.extract_batch(imgs)?;
        match &self.projection {
            Some(p) => p.project_many(&f),
            None => Ok(f),
        }
    }

    /// Identifies the feature network and projection for run manifests.
    pub fn describe(&self) -> String {
        match &self.projection {
            Some(p) => format!("{} projection={}x{} seed={}", self.full.checksum(), p.target_dim(), p.source_dim(), p.seed()),
            None => format!("{} projection=none", self.full.checksum()),
        }
    }
}

/// One training pair with its precomputed targets.
#[derive(Clone, Debug)]
pub struct TrainingExample<T> {
    pub name: String,
    pub x: Image01<T>,
    pub y: Image01<T>,
    /// Target downsampled by 2 (bicubic).
    pub y_half: Image01<T>,
    /// Unprojected `phi(y)`.
    pub y_features: Vec<T>,
    /// Vector compared during upper-stage selection.
    pub y_selection: Vec<T>,
    /// `phi(y_half)`, for the feature lower metric.
    pub y_half_features: Vec<T>,
}

impl<T: Scalar> TrainingExample<T> {
    pub fn new(name: impl Into<String>, x: Image01<T>, y: Image01<T>, space: &FeatureSpace<T>) -> Result<Self> {
        let (h, w) = x.hw();
        if x.n() != 1 || y.n() != 1 || y.hw() != (4 * h, 4 * w) {
            return Err(Error::arg(format!(
                "target {:?} must be a single image 4x the input {:?}",
                y.shape(),
                x.shape()
            )));
        }
        let y_half = resize_bicubic(&y, 2 * h, 2 * w)?.map(|v| v.max(T::zero()).min(T::one()));
        let y_features = space.full.extract_batch(&y)?.pop().expect("one");
        let y_selection = match &space.projection {
            Some(p) => p.project(&y_features)?,
            None => y_features.clone(),
        };
        let y_half_features = space.half.extract_batch(&y_half)?.pop().expect("one");
        Ok(Self {
            name: name.into(),
            x,
            y,
            y_half,
            y_features,
            y_selection,
            y_half_features,
        })
    }

    pub fn from_dataset(data: &PairedDataset, space: &FeatureSpace<T>) -> Result<Vec<Self>> {
        if data.scale_factor != 4 {
            return Err(Error::Data(format!(
                "the two-stage generator upscales by 4, dataset scale is {}",
                data.scale_factor
            )));
        }
        data.pairs
            .par_iter()
            .map(|p| Self::new(p.name.clone(), p.input.to_tensor(), p.target.to_tensor(), space))
            .collect()
    }
}

/// Outcome of hierarchical selection for one example.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionRecord<T> {
    pub example: usize,
    /// The chosen noise, as a batch of one.
    pub noise: NoisePair<T>,
    /// Selection-space distance of the chosen final output.
    pub distance: T,
    pub lower_index: usize,
    pub upper_index: usize,
    pub lower_distances: Vec<T>,
    pub upper_distances: Vec<T>,
}

/// Picks lower-stage noise against the downsampled target, then upper-stage
/// noise against the target, with the generator in eval mode.
#[allow(clippy::too_many_arguments)]
pub fn hierarchical_select<T: Scalar>(
    generator: &GeneratorParams<T>,
    space: &FeatureSpace<T>,
    example: &TrainingExample<T>,
    m_lower: usize,
    m_upper: usize,
    lower_metric: LowerMetric,
    rng: &mut impl Rng,
) -> Result<SelectionRecord<T>> {
    if m_lower == 0 || m_upper == 0 {
        return Err(Error::arg("candidate pools must be non-empty"));
    }
    let cfg = &generator.config;
    let (h, w) = example.x.hw();
    let z_lower = crate::generator::standard_normal::<T>([m_lower, cfg.lower.noise_channels, 2 * h, 2 * w], rng);
    let xs = example.x.repeat(m_lower);
    let mids = generator.lower.forward(&xs, &z_lower, None, Mode::Eval)?;
    let (lower_vectors, lower_target) = match lower_metric {
        LowerMetric::Pixel => (
            (0..m_lower).map(|j| mids.sample(j).to_vec()).collect(),
            example.y_half.data().to_vec(),
        ),
        LowerMetric::Feature => (space.half.extract_batch(&mids)?, example.y_half_features.clone()),
    };
    let lower_pool = CandidatePool::new(lower_vectors)?;
    let lower = select_nearest(&lower_target, &lower_pool)?;
    let lower_distances = crate::nn_search::pairwise_sq_dists(&[lower_target], lower_pool.vectors())?
        .pop()
        .expect("one row");

    let mid = mids.sample_tensor(lower.index).repeat(m_upper);
    let z_upper = crate::generator::standard_normal::<T>([m_upper, cfg.upper.noise_channels, 4 * h, 4 * w], rng);
    let skip = GeneratorParams::upper_skip(&example.x).repeat(m_upper);
    let outs = generator.upper.forward(&mid, &z_upper, Some(&skip), Mode::Eval)?;
    let upper_pool = CandidatePool::new(space.selection_vectors(&outs)?)?;
    let upper = select_nearest(&example.y_selection, &upper_pool)?;
    let upper_distances = crate::nn_search::pairwise_sq_dists(std::slice::from_ref(&example.y_selection), upper_pool.vectors())?
        .pop()
        .expect("one row");

    Ok(SelectionRecord {
        example: 0,
        noise: NoisePair {
            lower: z_lower.sample_tensor(lower.index),
            upper: z_upper.sample_tensor(upper.index),
        },
        distance: upper.distance,
        lower_index: lower.index,
        upper_index: upper.index,
        lower_distances,
        upper_distances,
    })
}

/// Loss value, parameter gradients and the tape (for running statistics).
pub struct LossOutput<T> {
    pub loss: T,
    pub grads: GeneratorGrads<T>,
    pub tape: GeneratorTape<T>,
}

/// `scale * sum_i |phi(T(x_i, z_i)) - phi(y_i)|^2` and its exact gradient,
/// with the generator in train mode. `targets` are unprojected feature vectors.
pub fn imle_loss<T: Scalar>(
    generator: &GeneratorParams<T>,
    features: &FeatureExtractor<T>,
    inputs: &[&Image01<T>],
    targets: &[&[T]],
    noise: &[&NoisePair<T>],
    scale: T,
) -> Result<LossOutput<T>> {
    if inputs.is_empty() || inputs.len() != targets.len() || inputs.len() != noise.len() {
        return Err(Error::arg("loss batch parts differ in length or are empty"));
    }
    let x = Tensor::stack(inputs)?;
    let z = NoisePair::stack(noise)?;
    let (out, tape) = generator.forward_train(&x, &z)?;
    let (feats, ftape) = features.extract_with_tape(&out.out)?;
    let two_scale = T::lit(2.0) * scale;
    let mut loss = T::zero();
    let mut d_feats = Vec::with_capacity(feats.len());
    for (f, y) in feats.iter().zip(targets) {
        if f.len() != y.len() {
            return Err(Error::arg("target feature length does not match extractor"));
        }
        let mut d = Vec::with_capacity(f.len());
        let mut sum = T::zero();
        for (&a, &b) in f.iter().zip(y.iter()) {
            let diff = a - b;
            sum += diff * diff;
            d.push(two_scale * diff);
        }
        loss += sum;
        d_feats.push(d);
    }
    let d_out = features.backward(&ftape, &d_feats)?;
    let grads = generator.backward(&tape, &d_out)?;
    Ok(LossOutput {
        loss: loss * scale,
        grads,
        tape,
    })
}

/// Per-iteration records of a run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    /// Mean selected distance per outer iteration (the empirical objective).
    pub selected_distance: Vec<f64>,
    /// Loss of every gradient step, `inner_steps` per outer iteration.
    pub inner_loss: Vec<f64>,
    /// Seconds since the run (or resumed segment) started, per outer iteration.
    pub elapsed_secs: Vec<f64>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.selected_distance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected_distance.is_empty()
    }

    /// Trailing moving average with the given window.
    pub fn smoothed_distance(&self, window: usize) -> Vec<f64> {
        let w = window.max(1);
        (0..self.selected_distance.len())
            .map(|i| {
                let lo = (i + 1).saturating_sub(w);
                let s = &self.selected_distance[lo..=i];
                s.iter().sum::<f64>() / s.len() as f64
            })
            .collect()
    }

    /// `iteration,mean_selected_distance,mean_inner_loss`, one row per outer
    /// iteration, 1-based. Timing is excluded so reruns are byte-identical.
    pub fn to_csv(&self, inner_steps: usize) -> String {
        let mut out = String::from("iteration,mean_selected_distance,mean_inner_loss\n");
        for (p, d) in self.selected_distance.iter().enumerate() {
            let inner = if inner_steps == 0 {
                String::new()
            } else {
                let s = &self.inner_loss[p * inner_steps..(p + 1) * inner_steps];
                (s.iter().sum::<f64>() / s.len() as f64).to_string()
            };
            out.push_str(&format!("{},{},{}\n", p + 1, d, inner));
        }
        out
    }
}

/// Summary of one outer iteration.
#[derive(Clone, Debug)]
pub struct OuterReport<T> {
    pub iteration: usize,
    pub batch: Vec<usize>,
    pub selections: Vec<SelectionRecord<T>>,
    pub mean_distance: f64,
    pub inner_losses: Vec<f64>,
}

pub const CHECKPOINT_KIND: &str = "srim-generator";
pub const CHECKPOINT_FORMAT: u32 = 1;

/// Owns the generator and optimizer state of one training run.
pub struct Trainer<T> {
    config: TrainConfig,
    generator: GeneratorParams<T>,
    optimizer: Optimizer<T>,
    space: FeatureSpace<T>,
    examples: Vec<TrainingExample<T>>,
    history: TrainHistory,
    seeds: SeedTree,
    started: Instant,
    elapsed_offset: f64,
    wall_clock: bool,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(
        generator_config: GeneratorConfig,
        config: TrainConfig,
        space: FeatureSpace<T>,
        examples: Vec<TrainingExample<T>>,
    ) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        config.validate(examples.len())?;
        let (oh, ow) = space.full.input_hw();
        if let Some(e) = examples.iter().find(|e| e.y.hw() != (oh, ow)) {
            return Err(Error::Data(format!(
                "example {} target is {:?}, feature space expects {oh}x{ow}",
                e.name,
                e.y.hw()
            )));
        }
        let seeds = SeedTree::new(config.seed);
        let generator = GeneratorParams::init(generator_config, seeds.derive("init", &[]))?;
        let lengths: Vec<usize> = generator.learnable().iter().map(|(_, t)| t.len()).collect();
        let optimizer = Optimizer::new(config.optimizer, config.learning_rate, &lengths);
        Ok(Self {
            config,
            generator,
            optimizer,
            space,
            examples,
            history: TrainHistory::default(),
            seeds,
            started: Instant::now(),
            elapsed_offset: 0.0,
            wall_clock: true,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn generator(&self) -> &GeneratorParams<T> {
        &self.generator
    }

    pub fn into_generator(self) -> GeneratorParams<T> {
        self.generator
    }

    pub fn history(&self) -> &TrainHistory {
        &self.history
    }

    pub fn space(&self) -> &FeatureSpace<T> {
        &self.space
    }

    pub fn examples(&self) -> &[TrainingExample<T>] {
        &self.examples
    }

    /// When off, elapsed times are recorded as 0 so checkpoints are
    /// byte-reproducible.
    pub fn set_wall_clock(&mut self, enabled: bool) {
        self.wall_clock = enabled;
    }

    /// Outer iterations completed.
    pub fn completed(&self) -> usize {
        self.history.len()
    }

    fn diverged(&self, iteration: usize, message: impl Into<String>) -> Error {
        Error::Diverged {
            iteration,
            message: message.into(),
        }
    }

    /// Runs the next outer iteration.
    pub fn outer_iteration(&mut self) -> Result<OuterReport<T>> {
        let p = self.completed();
        let iteration = p + 1;
        let n = self.examples.len();
        let cfg = self.config.clone();
        let mut rng = self.seeds.rng("batch", &[p as u64]);
        let batch = sample_indices(&mut rng, n, cfg.batch_outer).into_vec();

        let generator = &self.generator;
        let space = &self.space;
        let examples = &self.examples;
        let seeds = self.seeds;
        let selections: Vec<SelectionRecord<T>> = batch
            .par_iter()
            .map(|&i| {
                let mut r = seeds.rng("select", &[p as u64, i as u64]);
                let mut rec = hierarchical_select(
                    generator,
                    space,
                    &examples[i],
                    cfg.m_lower,
                    cfg.m_upper,
                    cfg.lower_metric,
                    &mut r,
                )?;
                rec.example = i;
                Ok(rec)
            })
            .collect::<Result<_>>()?;
        let mean_distance =
            selections.iter().map(|s| s.distance.f64()).sum::<f64>() / selections.len() as f64;
        if !mean_distance.is_finite() {
            return Err(self.diverged(iteration, "non-finite selection distance"));
        }

        let scale = T::lit(n as f64 / cfg.batch_inner as f64);
        let mut inner_losses = Vec::with_capacity(cfg.inner_steps);
        for _ in 0..cfg.inner_steps {
            let pick = sample_indices(&mut rng, selections.len(), cfg.batch_inner).into_vec();
            let recs: Vec<&SelectionRecord<T>> = pick.iter().map(|&k| &selections[k]).collect();
            let inputs: Vec<&Image01<T>> = recs.iter().map(|r| &self.examples[r.example].x).collect();
            let targets: Vec<&[T]> = recs
                .iter()
                .map(|r| self.examples[r.example].y_features.as_slice())
                .collect();
            let noise: Vec<&NoisePair<T>> = recs.iter().map(|r| &r.noise).collect();
            let out = imle_loss(&self.generator, &self.space.full, &inputs, &targets, &noise, scale)?;
            if !out.loss.is_finite() || !out.grads.is_finite() {
                return Err(self.diverged(iteration, format!("non-finite loss {}", out.loss)));
            }
            // a zero step leaves every weight and statistic untouched
            if cfg.learning_rate > 0.0 {
                self.generator.update_running_stats(&out.tape);
                self.optimizer.apply(self.generator.learnable_mut(), &out.grads.tensors)?;
            }
            inner_losses.push(out.loss.f64());
        }
        if !self.generator.is_finite() {
            return Err(self.diverged(iteration, "non-finite parameters"));
        }

        self.history.selected_distance.push(mean_distance);
        self.history.inner_loss.extend(&inner_losses);
        let elapsed = if self.wall_clock {
            self.elapsed_offset + self.started.elapsed().as_secs_f64()
        } else {
            0.0
        };
        self.history.elapsed_secs.push(elapsed);
        Ok(OuterReport {
            iteration,
            batch,
            selections,
            mean_distance,
            inner_losses,
        })
    }

    /// Runs until `config.outer_iters` iterations are complete, calling
    /// `on_checkpoint` every `checkpoint_every` iterations.
    pub fn run(&mut self, mut on_checkpoint: impl FnMut(&Self) -> Result<()>) -> Result<()> {
        while self.completed() < self.config.outer_iters {
            self.outer_iteration()?;
            let k = self.config.checkpoint_every;
            if k > 0 && self.completed().is_multiple_of(k) {
                on_checkpoint(self)?;
            }
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Container {
        let meta = json!({
            "format": CHECKPOINT_FORMAT,
            "generator": self.generator.config,
            "seed": self.config.seed,
            "step": self.completed(),
            "train": self.config,
            "features": self.space.describe(),
            "optimizer_step": self.optimizer.step,
        });
        let mut c = generator_container(&self.generator, meta);
        if self.config.optimizer == OptimizerKind::Adam {
            for (k, (name, _)) in self.generator.learnable().iter().enumerate() {
                let m = &self.optimizer.first_moment[k];
                let v = &self.optimizer.second_moment[k];
                c.insert(format!("optim.m.{name}"), &[m.len()], m);
                c.insert(format!("optim.v.{name}"), &[v.len()], v);
            }
        }
        let h = &self.history;
        c.insert("history.selected_distance", &[h.selected_distance.len()], &h.selected_distance);
        c.insert("history.inner_loss", &[h.inner_loss.len()], &h.inner_loss);
        c.insert("history.elapsed_secs", &[h.elapsed_secs.len()], &h.elapsed_secs);
        c
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    /// Restores generator, optimizer and history from a checkpoint written
    /// by [`Self::save_checkpoint`]. Everything else must match the
    /// original run except `outer_iters` and `checkpoint_every`.
    pub fn resume(
        checkpoint: &Container,
        generator_config: GeneratorConfig,
        config: TrainConfig,
        space: FeatureSpace<T>,
        examples: Vec<TrainingExample<T>>,
    ) -> Result<Self> {
        let mut t = Self::new(generator_config, config, space, examples)?;
        let saved: TrainConfig = serde_json::from_value(checkpoint.meta["train"].clone())
            .map_err(|e| Error::Checkpoint(format!("checkpoint lacks a training config: {e}")))?;
        if !t.config.resumable_from(&saved) {
            return Err(Error::Checkpoint(
                "training configuration differs from the checkpointed run".into(),
            ));
        }
        if checkpoint.meta["features"].as_str() != Some(t.space.describe().as_str()) {
            return Err(Error::Checkpoint("feature space differs from the checkpointed run".into()));
        }
        t.generator = load_generator(checkpoint, Some(&generator_config))?;
        if t.config.optimizer == OptimizerKind::Adam {
            let names: Vec<(String, usize)> =
                t.generator.learnable().iter().map(|(n, v)| (n.clone(), v.len())).collect();
            for (k, (name, len)) in names.iter().enumerate() {
                t.optimizer.first_moment[k] = checkpoint.get_exact(&format!("optim.m.{name}"), *len)?;
                t.optimizer.second_moment[k] = checkpoint.get_exact(&format!("optim.v.{name}"), *len)?;
            }
        }
        t.optimizer.step = checkpoint.meta["optimizer_step"]
            .as_u64()
            .ok_or_else(|| Error::Checkpoint("missing optimizer step".into()))?;
        let (_, selected_distance) = checkpoint.get::<f64>("history.selected_distance")?;
        let (_, inner_loss) = checkpoint.get::<f64>("history.inner_loss")?;
        let (_, elapsed_secs) = checkpoint.get::<f64>("history.elapsed_secs")?;
        if inner_loss.len() != selected_distance.len() * t.config.inner_steps {
            return Err(Error::Checkpoint("history lengths are inconsistent".into()));
        }
        if selected_distance.len() > t.config.outer_iters {
            return Err(Error::Checkpoint(format!(
                "checkpoint is at iteration {}, beyond outer_iters {}",
                selected_distance.len(),
                t.config.outer_iters
            )));
        }
        t.elapsed_offset = elapsed_secs.last().copied().unwrap_or(0.0);
        t.history = TrainHistory {
            selected_distance,
            inner_loss,
            elapsed_secs,
        };
        Ok(t)
    }
}

/// Container with the generator weights and running statistics.
pub fn generator_container<T: Scalar>(generator: &GeneratorParams<T>, meta: serde_json::Value) -> Container {
    let mut c = Container::new(CHECKPOINT_KIND, meta);
    for (name, values) in generator.learnable().into_iter().chain(generator.buffers()) {
        c.insert(name, &[values.len()], values);
    }
    c
}

/// Writes an inference-only checkpoint.
pub fn save_generator<T: Scalar>(generator: &GeneratorParams<T>, seed: u64, path: &Path) -> Result<()> {
    let meta = json!({
        "format": CHECKPOINT_FORMAT,
        "generator": generator.config,
        "seed": seed,
        "step": 0,
    });
    generator_container(generator, meta).save(path)
}

/// Reads generator weights; with `expected`, the stored config must match it.
pub fn load_generator<T: Scalar>(c: &Container, expected: Option<&GeneratorConfig>) -> Result<GeneratorParams<T>> {
    if c.kind != CHECKPOINT_KIND {
        return Err(Error::Checkpoint(format!("expected a generator checkpoint, found {}", c.kind)));
    }
    if c.meta["format"].as_u64() != Some(CHECKPOINT_FORMAT as u64) {
        return Err(Error::Checkpoint(format!("unsupported checkpoint format {}", c.meta["format"])));
    }
    let config: GeneratorConfig = serde_json::from_value(c.meta["generator"].clone())
        .map_err(|e| Error::Checkpoint(format!("generator config: {e}")))?;
    if let Some(exp) = expected {
        if *exp != config {
            return Err(Error::Checkpoint(format!(
                "checkpoint generator config {config:?} does not match {exp:?}"
            )));
        }
    }
    let mut g = GeneratorParams::<T>::init(config, 0)?;
    let names: Vec<(String, usize)> = g
        .learnable()
        .into_iter()
        .chain(g.buffers())
        .map(|(n, v)| (n, v.len()))
        .collect();
    let mut slots = g.learnable_mut();
    // learnable_mut and buffers_mut borrow separately
    let n_learn = slots.len();
    for (slot, (name, len)) in slots.iter_mut().zip(&names[..n_learn]) {
        **slot = c.get_exact(name, *len)?;
    }
    for (slot, (name, len)) in g.buffers_mut().into_iter().zip(&names[n_learn..]) {
        *slot = c.get_exact(name, *len)?;
    }
    Ok(g)
}

/// Convenience wrapper: builds a trainer and runs it to completion.
pub fn train<T: Scalar>(
    generator_config: GeneratorConfig,
    config: TrainConfig,
    space: FeatureSpace<T>,
    examples: Vec<TrainingExample<T>>,
) -> Result<(GeneratorParams<T>, TrainHistory)> {
    let mut t = Trainer::new(generator_config, config, space, examples)?;
    t.run(|_| Ok(()))?;
    let history = t.history.clone();
    Ok((t.into_generator(), history))
}
