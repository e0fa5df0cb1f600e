//! Run configuration: defaults, then a flat `key = value` file, then
//! `SRIM_<KEY>` environment variables, then `--key value` overrides.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::features::FeatureBackend;
use crate::generator::{GeneratorConfig, SubNetworkConfig};
use crate::trainer::TrainConfig;

/// Prefix of environment variables that override config keys.
pub const ENV_PREFIX: &str = "SRIM_";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackendKind {
    Random,
    Vgg19,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub src_dir: Option<PathBuf>,
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub target_size: usize,
    pub scale_factor: usize,
    pub split_fraction: f64,
    pub train: TrainConfig,
    pub resume: Option<PathBuf>,
    pub generator: SubNetworkConfig,
    pub feature_backend: BackendKind,
    pub feature_weights: Option<PathBuf>,
    pub feature_seed: u64,
    /// 0 disables the projection.
    pub projection_dim: usize,
    /// Training targets used to calibrate component weights; 0 keeps unit weights.
    pub calibration_images: usize,
    /// 0 lets the thread pool pick.
    pub threads: usize,
    pub deterministic: bool,
    pub checkpoint: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub count: usize,
    pub include_truth: bool,
    /// Which cached split `evaluate` scores.
    pub eval_split: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            src_dir: None,
            data_dir: None,
            out_dir: None,
            target_size: 256,
            scale_factor: 4,
            split_fraction: 0.9,
            train: TrainConfig::default(),
            resume: None,
            generator: SubNetworkConfig::default(),
            feature_backend: BackendKind::Random,
            feature_weights: None,
            feature_seed: 0,
            projection_dim: 2048,
            calibration_images: 16,
            threads: 0,
            deterministic: false,
            checkpoint: None,
            input: None,
            output: None,
            count: 5,
            include_truth: false,
            eval_split: "test".into(),
        }
    }
}

/// Every accepted key, in canonical (underscore) form.
pub const KEYS: &[&str] = &[
    "src_dir",
    "data_dir",
    "out_dir",
    "target_size",
    "scale_factor",
    "split_fraction",
    "seed",
    "outer_iters",
    "inner_steps",
    "m_lower",
    "m_upper",
    "batch_outer",
    "batch_inner",
    "learning_rate",
    "optimizer",
    "checkpoint_every",
    "resume",
    "lower_metric",
    "n_conv_layers",
    "kernel_size",
    "hidden_channels",
    "noise_channels",
    "feature_backend",
    "feature_weights",
    "feature_seed",
    "projection_dim",
    "calibration_images",
    "threads",
    "deterministic",
    "checkpoint",
    "input",
    "output",
    "count",
    "include_truth",
    "eval_split",
];

fn canonical(key: &str) -> String {
    key.trim().replace('-', "_").to_ascii_lowercase()
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V>
where
    V::Err: Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim().to_ascii_lowercase().as_str() {
        "" | "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

fn path(value: &str) -> Option<PathBuf> {
    let v = value.trim();
    (!v.is_empty()).then(|| PathBuf::from(v))
}

impl RunConfig {
    /// Sets one key; unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = canonical(key);
        let k = key.as_str();
        let t = &mut self.train;
        match k {
            "src_dir" => self.src_dir = path(value),
            "data_dir" => self.data_dir = path(value),
            "out_dir" => self.out_dir = path(value),
            "target_size" => self.target_size = parse(k, value)?,
            "scale_factor" => self.scale_factor = parse(k, value)?,
            "split_fraction" => self.split_fraction = parse(k, value)?,
            "seed" => t.seed = parse(k, value)?,
            "outer_iters" => t.outer_iters = parse(k, value)?,
            "inner_steps" => t.inner_steps = parse(k, value)?,
            "m_lower" => t.m_lower = parse(k, value)?,
            "m_upper" => t.m_upper = parse(k, value)?,
            "batch_outer" => t.batch_outer = parse(k, value)?,
            "batch_inner" => t.batch_inner = parse(k, value)?,
            "learning_rate" => t.learning_rate = parse(k, value)?,
            "optimizer" => t.optimizer = parse(k, value)?,
            "checkpoint_every" => t.checkpoint_every = parse(k, value)?,
            "lower_metric" => t.lower_metric = parse(k, value)?,
            "resume" => self.resume = path(value),
            "n_conv_layers" => self.generator.n_conv_layers = parse(k, value)?,
            "kernel_size" => self.generator.kernel_size = parse(k, value)?,
            "hidden_channels" => self.generator.hidden_channels = parse(k, value)?,
            "noise_channels" => self.generator.noise_channels = parse(k, value)?,
            "feature_backend" => {
                self.feature_backend = match value.trim() {
                    "random" => BackendKind::Random,
                    "vgg19" => BackendKind::Vgg19,
                    other => {
                        return Err(Error::Config(format!(
                            "feature_backend: expected random or vgg19, got {other:?}"
                        )))
                    }
                }
            }
            "feature_weights" => self.feature_weights = path(value),
            "feature_seed" => self.feature_seed = parse(k, value)?,
            "projection_dim" => self.projection_dim = parse(k, value)?,
            "calibration_images" => self.calibration_images = parse(k, value)?,
            "threads" => self.threads = parse(k, value)?,
            "deterministic" => self.deterministic = parse_bool(k, value)?,
            "checkpoint" => self.checkpoint = path(value),
            "input" => self.input = path(value),
            "output" => self.output = path(value),
            "count" => self.count = parse(k, value)?,
            "include_truth" => self.include_truth = parse_bool(k, value)?,
            "eval_split" => self.eval_split = value.trim().to_string(),
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{origin}:{}: expected key = value", i + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("{origin}:{}: {}", i + 1, strip_prefix(&e))))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, file: &Path) -> Result<()> {
        let text = std::fs::read_to_string(file).map_err(|e| Error::io(file, e))?;
        self.apply_text(&text, &file.display().to_string())
    }

    /// Applies `SRIM_<KEY>` variables from `vars`.
    pub fn apply_env<I, K, V>(&mut self, vars: I) -> Result<()>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let mut sorted = BTreeMap::new();
        for (k, v) in vars {
            if let Some(key) = k.as_ref().strip_prefix(ENV_PREFIX) {
                if canonical(key) != "config" {
                    sorted.insert(canonical(key), v.as_ref().to_string());
                }
            }
        }
        for (k, v) in sorted {
            self.set(&k, &v)
                .map_err(|e| Error::Config(format!("environment {ENV_PREFIX}{}: {}", k.to_uppercase(), strip_prefix(&e))))?;
        }
        Ok(())
    }

    /// Applies `--key value`, `--key=value` and bare `--flag` overrides.
    pub fn apply_args(&mut self, args: &[String]) -> Result<()> {
        for (k, v) in split_overrides(args)? {
            if k != "config" {
                self.set(&k, v.as_deref().unwrap_or(""))?;
            }
        }
        Ok(())
    }

    /// Full precedence chain. The config file comes from `--config` or
    /// `SRIM_CONFIG`.
    pub fn load<I, K, V>(args: &[String], env: I) -> Result<Self>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let env: Vec<(String, String)> = env
            .into_iter()
            .map(|(k, v)| (k.as_ref().to_string(), v.as_ref().to_string()))
            .collect();
        let overrides = split_overrides(args)?;
        let file = overrides
            .iter()
            .rev()
            .find(|(k, _)| k == "config")
            .and_then(|(_, v)| v.clone())
            .or_else(|| {
                env.iter()
                    .find(|(k, _)| k.as_str() == "SRIM_CONFIG")
                    .map(|(_, v)| v.clone())
            });
        let mut cfg = Self::default();
        if let Some(f) = file {
            cfg.apply_file(Path::new(&f))?;
        }
        cfg.apply_env(env)?;
        cfg.apply_args(args)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.scale_factor != 4 {
            return fail(format!("scale_factor must be 4 for the two-stage generator, got {}", self.scale_factor));
        }
        if self.target_size == 0 || !self.target_size.is_multiple_of(self.scale_factor) {
            return fail(format!(
                "target_size {} must be a positive multiple of {}",
                self.target_size, self.scale_factor
            ));
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return fail(format!("split_fraction must be in (0, 1), got {}", self.split_fraction));
        }
        let t = &self.train;
        if t.m_lower < 1 || t.m_upper < 1 {
            return fail("m_lower and m_upper must be at least 1".into());
        }
        if t.batch_inner < 1 || t.batch_inner > t.batch_outer {
            return fail(format!(
                "batch_inner ({}) must be in 1..=batch_outer ({})",
                t.batch_inner, t.batch_outer
            ));
        }
        if !(t.learning_rate >= 0.0 && t.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be finite and non-negative, got {}", t.learning_rate));
        }
        self.generator.validate().map_err(|e| Error::Config(strip_prefix(&e)))?;
        if self.feature_backend == BackendKind::Vgg19 && self.feature_weights.is_none() {
            return fail("feature_backend = vgg19 needs feature_weights".into());
        }
        if self.eval_split != "train" && self.eval_split != "test" {
            return fail(format!("eval_split must be train or test, got {:?}", self.eval_split));
        }
        Ok(())
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig::uniform(self.generator)
    }

    pub fn feature_backend(&self) -> FeatureBackend {
        match self.feature_backend {
            BackendKind::Random => FeatureBackend::RandomConvnet { seed: self.feature_seed },
            BackendKind::Vgg19 => FeatureBackend::Pretrained {
                path: self.feature_weights.clone().unwrap_or_default(),
            },
        }
    }

    /// Threads for the worker pool; deterministic mode forces one.
    pub fn effective_threads(&self) -> usize {
        if self.deterministic {
            1
        } else {
            self.threads
        }
    }

    /// `key = value` lines that reproduce this configuration.
    pub fn echo(&self) -> String {
        let p = |v: &Option<PathBuf>| v.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let t = &self.train;
        let g = &self.generator;
        let backend = match self.feature_backend {
            BackendKind::Random => "random",
            BackendKind::Vgg19 => "vgg19",
        };
        let rows: Vec<(&str, String)> = vec![
            ("src_dir", p(&self.src_dir)),
            ("data_dir", p(&self.data_dir)),
            ("out_dir", p(&self.out_dir)),
            ("target_size", self.target_size.to_string()),
            ("scale_factor", self.scale_factor.to_string()),
            ("split_fraction", self.split_fraction.to_string()),
            ("seed", t.seed.to_string()),
            ("outer_iters", t.outer_iters.to_string()),
            ("inner_steps", t.inner_steps.to_string()),
            ("m_lower", t.m_lower.to_string()),
            ("m_upper", t.m_upper.to_string()),
            ("batch_outer", t.batch_outer.to_string()),
            ("batch_inner", t.batch_inner.to_string()),
            ("learning_rate", t.learning_rate.to_string()),
            ("optimizer", t.optimizer.to_string()),
            ("checkpoint_every", t.checkpoint_every.to_string()),
            ("resume", p(&self.resume)),
            ("lower_metric", t.lower_metric.to_string()),
            ("n_conv_layers", g.n_conv_layers.to_string()),
            ("kernel_size", g.kernel_size.to_string()),
            ("hidden_channels", g.hidden_channels.to_string()),
            ("noise_channels", g.noise_channels.to_string()),
            ("feature_backend", backend.to_string()),
            ("feature_weights", p(&self.feature_weights)),
            ("feature_seed", self.feature_seed.to_string()),
            ("projection_dim", self.projection_dim.to_string()),
            ("calibration_images", self.calibration_images.to_string()),
            ("threads", self.threads.to_string()),
            ("deterministic", self.deterministic.to_string()),
            ("checkpoint", p(&self.checkpoint)),
            ("input", p(&self.input)),
            ("output", p(&self.output)),
            ("count", self.count.to_string()),
            ("include_truth", self.include_truth.to_string()),
            ("eval_split", self.eval_split.clone()),
        ];
        rows.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

/// Splits raw override arguments into `(key, value)` pairs. A `--key`
/// followed by another `--key` or by nothing has no value.
pub fn split_overrides(args: &[String]) -> Result<Vec<(String, Option<String>)>> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < args.len() {
        let a = &args[i];
        let body = a
            .strip_prefix("--")
            .ok_or_else(|| Error::Config(format!("unexpected argument {a:?} (expected --key value)")))?;
        if let Some((k, v)) = body.split_once('=') {
            out.push((canonical(k), Some(v.to_string())));
            i += 1;
        } else if i + 1 < args.len() && !args[i + 1].starts_with("--") {
            out.push((canonical(body), Some(args[i + 1].clone())));
            i += 2;
        } else {
            out.push((canonical(body), None));
            i += 1;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(s: &[&str]) -> Vec<String> {
        s.iter().map(|a| a.to_string()).collect()
    }

    const NO_ENV: [(&str, &str); 0] = [];

    #[test]
    fn every_key_is_settable_and_echoed() {
        let defaults = RunConfig::default();
        let echoed = defaults.echo();
        for key in KEYS {
            assert!(echoed.contains(&format!("{key} = ")), "{key} missing from echo");
        }
        let mut back = RunConfig::default();
        back.apply_text(&echoed, "echo").unwrap();
        assert_eq!(back, defaults);
    }

    #[test]
    fn precedence_file_env_args() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.cfg");
        std::fs::write(&file, "seed = 1\nm_lower = 3 # comment\nm-upper = 5\n").unwrap();
        let env = [("SRIM_M_LOWER", "7"), ("SRIM_OUTER_ITERS", "9"), ("HOME", "/x")];
        let a = args(&["--config", file.to_str().unwrap(), "--outer-iters", "11", "--deterministic"]);
        let cfg = RunConfig::load(&a, env).unwrap();
        assert_eq!(cfg.train.seed, 1);
        assert_eq!(cfg.train.m_upper, 5);
        assert_eq!(cfg.train.m_lower, 7);
        assert_eq!(cfg.train.outer_iters, 11);
        assert!(cfg.deterministic);
        assert_eq!(cfg.effective_threads(), 1);
    }

    #[test]
    fn unknown_keys_rejected_everywhere() {
        assert!(RunConfig::load(&args(&["--lerning-rate", "1"]), NO_ENV).is_err());
        assert!(RunConfig::load(&[], [("SRIM_BOGUS", "1")]).is_err());
        let mut c = RunConfig::default();
        let err = c.apply_text("seed = 1\nsede = 2\n", "f").unwrap_err();
        assert!(err.to_string().contains("f:2"), "{err}");
    }

    #[test]
    fn validation_rules() {
        assert!(RunConfig::load(&args(&["--target-size", "30"]), NO_ENV).is_err());
        assert!(RunConfig::load(&args(&["--batch-inner", "8", "--batch-outer", "4"]), NO_ENV).is_err());
        assert!(RunConfig::load(&args(&["--m-lower", "0"]), NO_ENV).is_err());
        assert!(RunConfig::load(&args(&["--m-upper", "0"]), NO_ENV).is_err());
        assert!(RunConfig::load(&args(&["--feature-backend", "vgg19"]), NO_ENV).is_err());
        assert!(RunConfig::load(&args(&["--target-size", "32"]), NO_ENV).is_ok());
    }

    #[test]
    fn override_forms() {
        let o = split_overrides(&args(&["--a=1", "--b", "2", "--c", "--d"])).unwrap();
        assert_eq!(
            o,
            vec![
                ("a".into(), Some("1".into())),
                ("b".into(), Some("2".into())),
                ("c".into(), None),
                ("d".into(), None)
            ]
        );
        assert!(split_overrides(&args(&["stray"])).is_err());
    }
}
