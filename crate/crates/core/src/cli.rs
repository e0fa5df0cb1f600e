//! Command-line entry points.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::container::Container;
use crate::dataset::{
    bicubic_upscale, build_dataset, list_images, load_cache, load_image, save_png, write_cache, ImageU8,
    PairedDataset, Split, MANIFEST_FILE,
};
use crate::error::{Error, Result};
use crate::features::{FeatureExtractor, ProjectionMatrix};
use crate::generator::GeneratorParams;
use crate::metrics::{reports_to_csv, EvalReport};
use crate::seeds::SeedTree;
use crate::trainer::{load_generator, FeatureSpace, Trainer, TrainingExample};

/// Largest projection matrix the CLI will allocate, in entries.
pub const MAX_PROJECTION_ENTRIES: usize = 1 << 28;

#[derive(Parser, Debug)]
#[command(
    name = "srim",
    about = "x4 super-resolution trained by conditional implicit maximum likelihood",
    after_help = "Every command takes configuration overrides as `--key value` (or `--key=value`).\n\
                  A config file is read from `--config <path>` or SRIM_CONFIG; any key can also be\n\
                  set through an SRIM_<KEY> environment variable. Precedence: defaults < file <\n\
                  environment < command line."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Resize and split a directory of images into a paired cache (src_dir -> data_dir).
    PrepareData(Overrides),
    /// Train a generator on the cached training split (data_dir -> out_dir).
    Train(Overrides),
    /// Upscale an image, or every image in a directory (checkpoint, input -> output dir).
    SuperResolve(Overrides),
    /// Draw `count` samples for one input plus a side-by-side grid.
    SampleMulti(Overrides),
    /// Score the generator and bicubic upscaling on a cached split.
    Evaluate(Overrides),
}

#[derive(Args, Debug)]
struct Overrides {
    /// `--key value` configuration overrides.
    #[arg(num_args = 0.., allow_hyphen_values = true, trailing_var_arg = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

/// Parses arguments, runs the command and returns the process exit code:
/// 0 on success, 1 on failure, 2 on usage errors, 3 when training diverges.
pub fn run<I, S, E, K, V>(args: I, env: E) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
    E: IntoIterator<Item = (K, V)>,
    K: AsRef<str>,
    V: AsRef<str>,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let (name, raw): (&str, &[String]) = match &cli.command {
        Command::PrepareData(o) => ("prepare-data", &o.overrides),
        Command::Train(o) => ("train", &o.overrides),
        Command::SuperResolve(o) => ("super-resolve", &o.overrides),
        Command::SampleMulti(o) => ("sample-multi", &o.overrides),
        Command::Evaluate(o) => ("evaluate", &o.overrides),
    };
    let cfg = match RunConfig::load(raw, env) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("srim {name}: {e}");
            return 2;
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.effective_threads())
        .build()
    {
        Ok(p) => p,
        Err(e) => {
            eprintln!("srim {name}: cannot start worker threads: {e}");
            return 1;
        }
    };
    let result = pool.install(|| match &cli.command {
        Command::PrepareData(_) => cmd_prepare_data(&cfg),
        Command::Train(_) => cmd_train(&cfg),
        Command::SuperResolve(_) => cmd_super_resolve(&cfg),
        Command::SampleMulti(_) => cmd_sample_multi(&cfg),
        Command::Evaluate(_) => cmd_evaluate(&cfg),
    });
    match result {
        Ok(()) => 0,
        Err(e @ Error::Diverged { .. }) => {
            eprintln!("srim {name}: {e}");
            3
        }
        Err(Error::Config(m)) => {
            eprintln!("srim {name}: configuration error: {m}");
            2
        }
        Err(e) => {
            eprintln!("srim {name}: {e}");
            1
        }
    }
}

fn required<'a>(v: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    v.as_deref()
        .ok_or_else(|| Error::Config(format!("missing required key {key}")))
}

fn create_dir(d: &Path) -> Result<()> {
    fs::create_dir_all(d).map_err(|e| Error::io(d, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn cmd_prepare_data(cfg: &RunConfig) -> Result<()> {
    let src = required(&cfg.src_dir, "src_dir")?;
    let out = required(&cfg.data_dir, "data_dir")?;
    let split_seed = SeedTree::new(cfg.train.seed).derive("split", &[]);
    let (train, test) = build_dataset(src, cfg.target_size, cfg.scale_factor, cfg.split_fraction, split_seed)?;
    create_dir(out)?;
    write_cache(out, &train, &test)?;
    println!(
        "prepared {} training and {} test pairs ({}x{} targets) in {}",
        train.len(),
        test.len(),
        cfg.target_size,
        cfg.target_size,
        out.display()
    );
    Ok(())
}

/// Feature extractor at the target resolution, calibrated on up to
/// `calibration_images` training targets, plus the selection projection.
pub fn build_feature_space(cfg: &RunConfig, train: &PairedDataset) -> Result<FeatureSpace<f32>> {
    let size = cfg.target_size;
    let mut ext = FeatureExtractor::<f32>::from_backend(&cfg.feature_backend(), size, size)?;
    let k = cfg.calibration_images.min(train.len());
    if k > 0 {
        let imgs: Vec<_> = train.pairs[..k].iter().map(|p| p.target.to_tensor()).collect();
        ext.calibrate_weights(&imgs)?;
    }
    let projection = if cfg.projection_dim > 0 {
        let entries = cfg.projection_dim.saturating_mul(ext.dim());
        if entries > MAX_PROJECTION_ENTRIES {
            return Err(Error::Config(format!(
                "a {}x{} projection matrix is too large; lower projection_dim or set it to 0",
                cfg.projection_dim,
                ext.dim()
            )));
        }
        let seed = SeedTree::new(cfg.train.seed).derive("projection", &[]);
        Some(ProjectionMatrix::new(cfg.projection_dim, ext.dim(), seed)?)
    } else {
        None
    };
    FeatureSpace::new(ext, projection)
}

fn check_target_size(cfg: &RunConfig, data: &PairedDataset) -> Result<()> {
    match data.pairs.iter().find(|p| p.target.height() != cfg.target_size || p.target.width() != cfg.target_size) {
        Some(p) => Err(Error::Config(format!(
            "cached pair {} is {}x{}, but target_size is {}",
            p.name,
            p.target.height(),
            p.target.width(),
            cfg.target_size
        ))),
        None => Ok(()),
    }
}

pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let data_dir = required(&cfg.data_dir, "data_dir")?;
    let out = required(&cfg.out_dir, "out_dir")?;
    let data = load_cache(data_dir, Split::Train)?;
    if data.is_empty() {
        return Err(Error::Data(format!("no training pairs in {}", data_dir.display())));
    }
    check_target_size(cfg, &data)?;
    let space = build_feature_space(cfg, &data)?;
    let examples = TrainingExample::from_dataset(&data, &space)?;
    let gen_cfg = cfg.generator_config();
    let mut trainer = match &cfg.resume {
        Some(path) => {
            let ckpt = Container::load(path)?;
            Trainer::resume(&ckpt, gen_cfg, cfg.train.clone(), space, examples)?
        }
        None => Trainer::new(gen_cfg, cfg.train.clone(), space, examples)?,
    };
    trainer.set_wall_clock(!cfg.deterministic);

    let ckpt_dir = out.join("checkpoints");
    create_dir(&ckpt_dir)?;
    let manifest = format!(
        "{}\n# derived\ngenerator_init_seed = {}\nprojection_seed = {}\nsplit_seed = {}\nfeature_space = {}\ntraining_pairs = {}\nparameters = {}\n",
        cfg.echo(),
        SeedTree::new(cfg.train.seed).derive("init", &[]),
        SeedTree::new(cfg.train.seed).derive("projection", &[]),
        SeedTree::new(cfg.train.seed).derive("split", &[]),
        trainer.space().describe(),
        trainer.examples().len(),
        trainer.generator().parameter_count(),
    );
    write_text(&out.join(MANIFEST_FILE), &manifest)?;

    let inner = cfg.train.inner_steps;
    let write_logs = |t: &Trainer<f32>| -> Result<()> {
        write_text(&out.join("loss.csv"), &t.history().to_csv(inner))?;
        let mut timing = String::from("iteration,elapsed_secs\n");
        for (p, s) in t.history().elapsed_secs.iter().enumerate() {
            timing.push_str(&format!("{},{:.3}\n", p + 1, s));
        }
        write_text(&out.join("timing.csv"), &timing)
    };
    let result = trainer.run(|t| {
        let p = t.completed();
        t.save_checkpoint(&ckpt_dir.join(format!("iter_{p:06}.ckpt")))?;
        t.save_checkpoint(&out.join("latest.ckpt"))?;
        write_logs(t)?;
        let d = t.history().selected_distance.last().copied().unwrap_or(f64::NAN);
        println!("iteration {p}: mean selected distance {d:.6}");
        Ok(())
    });
    if let Err(e @ Error::Diverged { .. }) = result {
        // keep the state that produced the failure for inspection
        let dump = out.join("diverged.ckpt");
        let _ = trainer.save_checkpoint(&dump);
        let _ = write_logs(&trainer);
        eprintln!("state written to {}", dump.display());
        return Err(e);
    }
    result?;
    trainer.save_checkpoint(&out.join("final.ckpt"))?;
    trainer.save_checkpoint(&out.join("latest.ckpt"))?;
    write_logs(&trainer)?;
    let h = trainer.history();
    match (h.selected_distance.first(), h.selected_distance.last()) {
        (Some(a), Some(b)) => println!(
            "trained {} outer iterations; mean selected distance {a:.6} -> {b:.6}",
            h.len()
        ),
        _ => println!("no outer iterations run; wrote the initial generator"),
    }
    Ok(())
}

fn load_checkpoint(cfg: &RunConfig) -> Result<GeneratorParams<f32>> {
    let path = required(&cfg.checkpoint, "checkpoint")?;
    load_generator(&Container::load(path)?, None)
}

fn upscale(g: &GeneratorParams<f32>, input: &ImageU8, seed: u64) -> Result<ImageU8> {
    let out = g.sample(&input.to_tensor::<f32>(), seed)?;
    ImageU8::from_tensor(&out, 0)
}

fn file_stem(p: &Path) -> Result<String> {
    p.file_stem()
        .and_then(|s| s.to_str())
        .map(str::to_string)
        .ok_or_else(|| Error::Data(format!("unusable file name {}", p.display())))
}

pub fn cmd_super_resolve(cfg: &RunConfig) -> Result<()> {
    let g = load_checkpoint(cfg)?;
    let input = required(&cfg.input, "input")?;
    let out = required(&cfg.output, "output")?;
    let files = if input.is_dir() {
        list_images(input)?
    } else {
        vec![input.to_path_buf()]
    };
    if files.is_empty() {
        return Err(Error::Data(format!("no images found in {}", input.display())));
    }
    create_dir(out)?;
    let seeds = SeedTree::new(cfg.train.seed);
    for f in &files {
        let img = load_image(f)?;
        // the seed depends on the name, not the position, so outputs do not
        // change when other files are added
        let name = file_stem(f)?;
        let seed = seeds.derive(&format!("sample/{name}"), &[0]);
        let sr = upscale(&g, &img, seed)?;
        let dst = out.join(format!("{name}.png"));
        save_png(&sr, &dst)?;
        println!("{} -> {} ({}x{})", f.display(), dst.display(), sr.height(), sr.width());
    }
    Ok(())
}

pub fn cmd_sample_multi(cfg: &RunConfig) -> Result<()> {
    let g = load_checkpoint(cfg)?;
    let input = required(&cfg.input, "input")?;
    let out = required(&cfg.output, "output")?;
    if cfg.count == 0 {
        return Err(Error::Config("count must be at least 1".into()));
    }
    let img = load_image(input)?;
    let name = file_stem(input)?;
    create_dir(out)?;
    let seeds = SeedTree::new(cfg.train.seed);
    let mut samples = Vec::with_capacity(cfg.count);
    for k in 0..cfg.count {
        let s = upscale(&g, &img, seeds.derive(&format!("sample/{name}"), &[k as u64]))?;
        save_png(&s, &out.join(format!("sample_{k}.png")))?;
        samples.push(s);
    }
    save_png(&ImageU8::hstack(&samples)?, &out.join("grid.png"))?;
    let distinct = samples.windows(2).filter(|w| w[0] != w[1]).count();
    println!(
        "wrote {} samples and grid.png to {} ({} adjacent pairs differ)",
        cfg.count,
        out.display(),
        distinct
    );
    Ok(())
}

pub fn cmd_evaluate(cfg: &RunConfig) -> Result<()> {
    let g = load_checkpoint(cfg)?;
    let data_dir = required(&cfg.data_dir, "data_dir")?;
    let split = Split::parse(&cfg.eval_split)?;
    let data = load_cache(data_dir, split)?;
    if data.is_empty() {
        return Err(Error::Data(format!("no {} pairs in {}", split.as_str(), data_dir.display())));
    }
    let seeds = SeedTree::new(cfg.train.seed);
    let mut srim = EvalReport::new("srim");
    let mut bicubic = EvalReport::new("bicubic");
    let mut truth = EvalReport::new("truth");
    for p in &data.pairs {
        let seed = seeds.derive(&format!("sample/{}", p.name), &[0]);
        srim.push(&p.name, &upscale(&g, &p.input, seed)?, &p.target)?;
        bicubic.push(&p.name, &bicubic_upscale(&p.input, data.scale_factor)?, &p.target)?;
        if cfg.include_truth {
            truth.push(&p.name, &p.target, &p.target)?;
        }
    }
    let mut reports = vec![srim, bicubic];
    if cfg.include_truth {
        reports.push(truth);
    }
    let csv = reports_to_csv(&reports);
    let dst = match &cfg.output {
        Some(o) => o.clone(),
        None => match &cfg.out_dir {
            Some(d) => d.join("eval.csv"),
            None => PathBuf::from("eval.csv"),
        },
    };
    if let Some(parent) = dst.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_text(&dst, &csv)?;
    println!("method    mean_psnr_db  mean_ssim   ({} {} images)", data.len(), split.as_str());
    for r in &reports {
        println!("{:<9} {:>12.4}  {:>9.4}", r.method, r.mean_psnr(), r.mean_ssim());
    }
    println!("wrote {}", dst.display());
    Ok(())
}
