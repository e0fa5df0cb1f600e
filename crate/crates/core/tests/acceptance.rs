//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::process::Command;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use srim::cli::build_feature_space;
use srim::config::RunConfig;
use srim::dataset::{bicubic_upscale, downsample, make_pair, save_png, ImageU8, PairedDataset};
use srim::features::{FeatureExtractor, ProjectionMatrix};
use srim::generator::{GeneratorConfig, GeneratorParams, Mode, NoisePair, SubNetworkConfig};
use srim::metrics::{psnr, ssim, EvalReport};
use srim::nn_search::{select_nearest, CandidatePool};
use srim::optim::OptimizerKind;
use srim::seeds::SeedTree;
use srim::trainer::{hierarchical_select, imle_loss, FeatureSpace, LowerMetric, TrainConfig, Trainer, TrainingExample};
use srim::{Scalar, Tensor};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn gaussian(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

// 1
fn nearest_selection_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut bad = 0;
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let m = rng.random_range(1..=64);
        let dim = rng.random_range(1..=512);
        let target = gaussian(dim, &mut rng);
        let pool: Vec<Vec<f64>> = (0..m).map(|_| gaussian(dim, &mut rng)).collect();
        let mut best = (0, f64::INFINITY);
        for (j, v) in pool.iter().enumerate() {
            let d = sq_dist(v, &target);
            if d < best.1 {
                best = (j, d);
            }
        }
        let got = select_nearest(&target, &CandidatePool::new(pool).unwrap()).unwrap();
        let rel = (got.distance - best.1).abs() / best.1.max(f64::MIN_POSITIVE);
        worst = worst.max(rel);
        if got.index != best.0 || rel > 1e-6 {
            bad += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        bad == 0 && secs < 10.0,
        format!("{bad} mismatches in 1000 instances, worst relative distance error {worst:.1e}, {secs:.2} s"),
    )
}

// 2
fn gradient_check() -> Outcome {
    let start = Instant::now();
    let cfg = GeneratorConfig::uniform(SubNetworkConfig {
        n_conv_layers: 2,
        kernel_size: 3,
        hidden_channels: 4,
        noise_channels: 1,
    });
    let mut g = GeneratorParams::<f64>::init(cfg, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let image = |h: usize, w: usize, rng: &mut ChaCha8Rng| {
        Tensor::from_vec([1, 3, h, w], (0..3 * h * w).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    };
    let xs: Vec<Tensor<f64>> = (0..2).map(|_| image(4, 4, &mut rng)).collect();
    let ys: Vec<Vec<f64>> = (0..2).map(|_| image(16, 16, &mut rng).into_vec()).collect();
    let zs: Vec<NoisePair<f64>> = (0..2).map(|_| NoisePair::sample(&cfg, 1, 4, 4, &mut rng)).collect();
    let pixels = FeatureExtractor::<f64>::pixels_only(16, 16);
    let x_refs: Vec<&Tensor<f64>> = xs.iter().collect();
    let y_refs: Vec<&[f64]> = ys.iter().map(Vec::as_slice).collect();
    let z_refs: Vec<&NoisePair<f64>> = zs.iter().collect();

    let analytic = imle_loss(&g, &pixels, &x_refs, &y_refs, &z_refs, 1.0).unwrap().grads.tensors;
    let x_batch = Tensor::stack(&x_refs).unwrap();
    let z_batch = NoisePair::stack(&z_refs).unwrap();
    // loss recomputed directly from the train-mode output
    let loss = |g: &GeneratorParams<f64>| -> f64 {
        let (out, _) = g.forward_train(&x_batch, &z_batch).unwrap();
        (0..2).map(|i| sq_dist(out.out.sample(i), &ys[i])).sum()
    };
    let h = 1e-4;
    let (mut total, mut good) = (0usize, 0usize);
    let n_tensors = analytic.len();
    for t in 0..n_tensors {
        for k in 0..analytic[t].len() {
            let orig = g.learnable_mut()[t][k];
            g.learnable_mut()[t][k] = orig + h;
            let up = loss(&g);
            g.learnable_mut()[t][k] = orig - h;
            let down = loss(&g);
            g.learnable_mut()[t][k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[t][k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            total += 1;
            if rel <= 1e-3 {
                good += 1;
            }
        }
    }
    let frac = good as f64 / total as f64;
    let secs = start.elapsed().as_secs_f64();
    outcome(
        frac >= 0.95 && secs < 60.0,
        format!("{good}/{total} parameters within 1e-3 relative error ({:.1}%), {secs:.2} s", 100.0 * frac),
    )
}

// 3
fn projection_fidelity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let source = 512;
    let p = ProjectionMatrix::<f64>::new(2048, source, 33).unwrap();
    let mut sum = 0.0;
    for _ in 0..1000 {
        let u = gaussian(source, &mut rng);
        let v = gaussian(source, &mut rng);
        sum += sq_dist(&p.project(&u).unwrap(), &p.project(&v).unwrap()) / sq_dist(&u, &v);
    }
    let mean = sum / 1000.0;
    outcome((0.9..=1.1).contains(&mean), format!("mean squared-distance ratio {mean:.4} over 1000 pairs"))
}

fn luma(img: &ImageU8, y: usize, x: usize) -> f64 {
    let p = img.pixel(y, x);
    0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64
}

fn psnr_oracle(a: &ImageU8, b: &ImageU8) -> f64 {
    let mut se = 0.0;
    for y in 0..a.height() {
        for x in 0..a.width() {
            se += (luma(a, y, x) - luma(b, y, x)).powi(2);
        }
    }
    let mse = se / (a.height() * a.width()) as f64;
    10.0 * (255.0 * 255.0 / mse).log10()
}

fn ssim_oracle(a: &ImageU8, b: &ImageU8) -> f64 {
    let mut win = [[0.0f64; 11]; 11];
    let mut total = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / 4.5).exp();
            total += *v;
        }
    }
    let (c1, c2) = ((0.01f64 * 255.0).powi(2), (0.03f64 * 255.0).powi(2));
    let (mut sum, mut count) = (0.0, 0);
    for y0 in 0..=a.height() - 11 {
        for x0 in 0..=a.width() - 11 {
            let (mut mx, mut my) = (0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    mx += win[i][j] / total * luma(a, y0 + i, x0 + j);
                    my += win[i][j] / total * luma(b, y0 + i, x0 + j);
                }
            }
            let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let g = win[i][j] / total;
                    let (dx, dy) = (luma(a, y0 + i, x0 + j) - mx, luma(b, y0 + i, x0 + j) - my);
                    vx += g * dx * dx;
                    vy += g * dy * dy;
                    cov += g * dx * dy;
                }
            }
            sum += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    sum / count as f64
}

// 4
fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut worst_psnr, mut worst_ssim) = (0.0f64, 0.0f64);
    let mut identical_ok = true;
    for k in 0..100 {
        let (h, w) = (rng.random_range(11..32), rng.random_range(11..32));
        let a = ImageU8::new(h, w, (0..h * w * 3).map(|_| rng.random()).collect()).unwrap();
        let b = if k % 2 == 0 {
            ImageU8::new(h, w, (0..h * w * 3).map(|_| rng.random()).collect()).unwrap()
        } else {
            let data = a.data().iter().map(|&v| v.saturating_add(rng.random_range(0..30))).collect();
            ImageU8::new(h, w, data).unwrap()
        };
        worst_psnr = worst_psnr.max((psnr(&a, &b).unwrap() - psnr_oracle(&a, &b)).abs());
        worst_ssim = worst_ssim.max((ssim(&a, &b).unwrap() - ssim_oracle(&a, &b)).abs());
        identical_ok &= psnr(&a, &a).unwrap() == f64::INFINITY && ssim(&a, &a).unwrap() == 1.0;
    }
    outcome(
        worst_psnr <= 1e-6 && worst_ssim <= 1e-6 && identical_ok,
        format!(
            "worst |psnr - oracle| {worst_psnr:.1e} dB, worst |ssim - oracle| {worst_ssim:.1e}, identical pairs give inf and 1: {identical_ok}"
        ),
    )
}

/// Flat background with a few solid rectangles and discs.
fn toy_image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> ImageU8 {
    let mut img = ImageU8::filled(h, w, rng.random());
    for _ in 0..3 {
        let color: [u8; 3] = rng.random();
        let (cy, cx) = (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64));
        let (ry, rx) = (rng.random_range(3.0..h as f64 / 2.5), rng.random_range(3.0..w as f64 / 2.5));
        let disc = rng.random_bool(0.5);
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = ((y as f64 - cy) / ry, (x as f64 - cx) / rx);
                let inside = if disc { dy * dy + dx * dx <= 1.0 } else { dy.abs() <= 1.0 && dx.abs() <= 1.0 };
                if inside {
                    img.set_pixel(y, x, color);
                }
            }
        }
    }
    img
}

const TOY_IMAGES: usize = 30;
const TOY_TRAIN: usize = 21;

/// Raw toy images (40x48, resized to 32x32 targets) split 21/9.
fn toy_sets() -> (Vec<ImageU8>, PairedDataset, PairedDataset) {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let raw: Vec<ImageU8> = (0..TOY_IMAGES).map(|_| toy_image(40, 48, &mut rng)).collect();
    let mut order: Vec<usize> = (0..TOY_IMAGES).collect();
    order.shuffle(&mut rng);
    let pairs = |idx: &[usize]| {
        let p = idx.iter().map(|&i| make_pair(&format!("toy{i:02}"), &raw[i], 32, 4).unwrap()).collect();
        PairedDataset::new(p, 4).unwrap()
    };
    let train = pairs(&order[..TOY_TRAIN]);
    let test = pairs(&order[TOY_TRAIN..]);
    (raw, train, test)
}

fn desk_run_config() -> RunConfig {
    let mut cfg = RunConfig {
        target_size: 32,
        projection_dim: 512,
        calibration_images: 16,
        ..RunConfig::default()
    };
    cfg.generator = SubNetworkConfig {
        n_conv_layers: 4,
        kernel_size: 3,
        hidden_channels: 16,
        noise_channels: 1,
    };
    cfg.train = TrainConfig {
        outer_iters: 200,
        inner_steps: 60,
        m_lower: 4,
        m_upper: 4,
        batch_outer: 8,
        batch_inner: 4,
        learning_rate: 5e-3,
        optimizer: OptimizerKind::Adam,
        seed: 0,
        checkpoint_every: 0,
        lower_metric: LowerMetric::Pixel,
    };
    cfg.validate().unwrap();
    cfg
}

// 5
fn pool_size_benefit(space: &FeatureSpace<f32>, examples: &[TrainingExample<f32>], cfg: &RunConfig) -> Outcome {
    let g = GeneratorParams::<f32>::init(cfg.generator_config(), 5).unwrap();
    let draws = 100;
    let mean = |m_upper: usize| -> f64 {
        let mut sum = 0.0;
        for d in 0..draws {
            for (i, ex) in examples.iter().take(4).enumerate() {
                let mut rng = SeedTree::new(55).rng("draw", &[m_upper as u64, d, i as u64]);
                sum += hierarchical_select(&g, space, ex, 4, m_upper, LowerMetric::Pixel, &mut rng)
                    .unwrap()
                    .distance
                    .f64();
            }
        }
        sum / (draws as f64 * 4.0)
    };
    let (big, single) = (mean(16), mean(1));
    outcome(
        big <= single,
        format!("mean selected distance {big:.2} with 16 upper candidates vs {single:.2} with 1 ({draws} draws x 4 inputs)"),
    )
}

fn sample_u8(g: &GeneratorParams<f32>, input: &ImageU8, seed: u64) -> ImageU8 {
    ImageU8::from_tensor(&g.sample(&input.to_tensor::<f32>(), seed).unwrap(), 0).unwrap()
}

// 6
fn desk_training(cfg: &RunConfig, space: FeatureSpace<f32>, train: &PairedDataset) -> (Outcome, Option<GeneratorParams<f32>>) {
    let start = Instant::now();
    let examples = TrainingExample::from_dataset(train, &space).unwrap();
    let mut trainer = Trainer::new(cfg.generator_config(), cfg.train.clone(), space, examples).unwrap();
    if let Err(e) = trainer.run(|_| Ok(())) {
        return (outcome(false, format!("training failed: {e}")), None);
    }
    let secs = start.elapsed().as_secs_f64();
    let h = trainer.history();
    let finite = h.selected_distance.iter().chain(&h.inner_loss).all(|v| v.is_finite()) && trainer.generator().is_finite();
    let smooth = h.smoothed_distance(20);
    let (initial, last) = (smooth[19], smooth[smooth.len() - 1]);
    let ratio = last / initial;

    let g = trainer.into_generator();
    let seeds = SeedTree::new(cfg.train.seed);
    let mut srim_report = EvalReport::new("srim");
    let mut bicubic_report = EvalReport::new("bicubic");
    for p in &train.pairs {
        let seed = seeds.derive(&format!("sample/{}", p.name), &[0]);
        srim_report.push(&p.name, &sample_u8(&g, &p.input, seed), &p.target).unwrap();
        bicubic_report.push(&p.name, &bicubic_upscale(&p.input, 4).unwrap(), &p.target).unwrap();
    }
    let (sr, bc) = (srim_report.mean_psnr(), bicubic_report.mean_psnr());
    let pass = finite && ratio < 0.5 && sr > bc && secs < 15.0 * 60.0;
    (
        outcome(
            pass,
            format!(
                "finite: {finite}; smoothed distance {initial:.1} -> {last:.1} (ratio {ratio:.3}); train PSNR srim {sr:.3} dB vs bicubic {bc:.3} dB; {secs:.0} s"
            ),
        ),
        Some(g),
    )
}

fn mse(a: &ImageU8, b: &ImageU8) -> f64 {
    a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / a.data().len() as f64
}

// 7
fn diversity_with_consistency(g: &GeneratorParams<f32>, test: &PairedDataset) -> Outcome {
    let n = test.len();
    let seeds = SeedTree::new(7);
    let samples: Vec<Vec<ImageU8>> = test
        .pairs
        .iter()
        .map(|p| (0..5).map(|k| sample_u8(g, &p.input, seeds.derive("multi", &[k]))).collect())
        .collect();
    let mut distinct = 0;
    let mut consistent = 0;
    for (i, p) in test.pairs.iter().enumerate() {
        let s = &samples[i];
        let all_distinct = (0..5).all(|a| (a + 1..5).all(|b| s[a].data().iter().zip(s[b].data()).any(|(x, y)| x != y)));
        distinct += all_distinct as usize;
        // control: samples drawn for another test input, compared against this input
        let j = (i + 1) % n;
        let ok = (0..5).all(|k| {
            let own = mse(&downsample(&s[k], 4).unwrap(), &p.input);
            let control = mse(&downsample(&samples[j][k], 4).unwrap(), &p.input);
            own < control
        });
        consistent += ok as usize;
    }
    let frac = consistent as f64 / n as f64;
    outcome(
        distinct == n && frac >= 0.8,
        format!("{distinct}/{n} inputs with 5 pairwise distinct samples; {consistent}/{n} inputs consistent ({:.0}%)", 100.0 * frac),
    )
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_srim"))
        .args(args)
        .env_remove("SRIM_CONFIG")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(String::from_utf8_lossy(&out.stderr).into_owned())
    }
}

// 8
fn determinism_and_resume(raw: &[ImageU8]) -> Result<Outcome, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = |p: &str| dir.path().join(p).to_str().unwrap().to_string();
    std::fs::create_dir(dir.path().join("src")).map_err(|e| e.to_string())?;
    for (i, img) in raw.iter().enumerate() {
        save_png(img, &dir.path().join(format!("src/toy{i:02}.png"))).map_err(|e| e.to_string())?;
    }
    let common = [
        "--target-size", "16", "--n-conv-layers", "2", "--hidden-channels", "4", "--kernel-size", "3",
        "--projection-dim", "64", "--m-lower", "2", "--m-upper", "3", "--batch-outer", "3", "--batch-inner", "2",
        "--inner-steps", "2", "--learning-rate", "1e-3", "--seed", "8", "--deterministic",
    ];
    let with = |extra: &[&str]| -> Vec<String> {
        extra.iter().chain(common.iter()).map(|s| s.to_string()).collect()
    };
    let call = |sub: &str, args: Vec<String>| -> Result<(), String> {
        let mut all = vec![sub];
        all.extend(args.iter().map(String::as_str));
        run_cli(&all)
    };
    call("prepare-data", with(&["--src-dir", &d("src"), "--data-dir", &d("data")]))?;
    for run in ["a", "b"] {
        call("train", with(&["--data-dir", &d("data"), "--out-dir", &d(run), "--outer-iters", "120", "--checkpoint-every", "50"]))?;
    }
    // an interrupted run: stopped at iteration 100, then resumed to 120
    call("train", with(&["--data-dir", &d("data"), "--out-dir", &d("c"), "--outer-iters", "100", "--checkpoint-every", "50"]))?;
    call(
        "train",
        with(&["--data-dir", &d("data"), "--out-dir", &d("c"), "--outer-iters", "120", "--checkpoint-every", "50", "--resume", &d("c/final.ckpt")]),
    )?;
    let read = |p: &str| std::fs::read(dir.path().join(p)).unwrap_or_default();
    let (a, b, c) = (read("a/loss.csv"), read("b/loss.csv"), read("c/loss.csv"));
    let rows = String::from_utf8_lossy(&a).lines().count().saturating_sub(1);
    let identical = !a.is_empty() && a == b;
    let resumed = a == c;
    let ckpt_identical = read("a/final.ckpt") == read("c/final.ckpt");
    Ok(outcome(
        identical && resumed && rows == 120,
        format!("{rows} loss rows; repeated runs byte-identical: {identical}; resumed history identical: {resumed} (final checkpoints identical: {ckpt_identical})"),
    ))
}

// 9
fn shape_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut failures = Vec::new();
    for c in 0..50 {
        let stage = |rng: &mut ChaCha8Rng| SubNetworkConfig {
            n_conv_layers: rng.random_range(1..=5),
            kernel_size: [1, 3, 5][rng.random_range(0..3)],
            hidden_channels: rng.random_range(1..=8),
            noise_channels: rng.random_range(1..=3),
        };
        let cfg = GeneratorConfig { lower: stage(&mut rng), upper: stage(&mut rng) };
        let (n, h, w) = (rng.random_range(1..=3), rng.random_range(1..=7), rng.random_range(1..=7));
        let ok = if c % 2 == 0 {
            check_shapes::<f32>(cfg, n, h, w, &mut rng)
        } else {
            check_shapes::<f64>(cfg, n, h, w, &mut rng)
        };
        if !ok {
            failures.push(format!("{cfg:?} on {n}x{h}x{w}"));
        }
    }
    outcome(failures.is_empty(), format!("{} of 50 configurations violated shape or range {:?}", failures.len(), failures))
}

fn check_shapes<T: Scalar>(cfg: GeneratorConfig, n: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> bool {
    let g = GeneratorParams::<T>::init(cfg, rng.random()).unwrap();
    let x = Tensor::from_vec([n, 3, h, w], (0..n * 3 * h * w).map(|_| T::lit(rng.random_range(0.0..1.0))).collect()).unwrap();
    let z = NoisePair::sample(&cfg, n, h, w, rng);
    let in_range = |t: &Tensor<T>| t.data().iter().all(|&v| v > T::zero() && v < T::one());
    [Mode::Eval, Mode::Train].iter().all(|&mode| {
        let out = g.forward(&x, &z, mode).unwrap();
        out.out.shape() == [n, 3, 4 * h, 4 * w] && out.mid.shape() == [n, 3, 2 * h, 2 * w] && in_range(&out.out)
    })
}

fn report(number: usize, name: &str, o: &Outcome) {
    println!("{} criterion {number}: {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
}

fn main() {
    // cargo passes harness flags such as --list; there is nothing to list
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let cfg = desk_run_config();
    let (raw, train, test) = toy_sets();
    let space = build_feature_space(&cfg, &train).unwrap();
    let examples = TrainingExample::from_dataset(&train, &space).unwrap();

    let mut results = vec![
        ("nearest-selection oracle", nearest_selection_oracle()),
        ("gradient matches finite differences", gradient_check()),
        ("projection fidelity", projection_fidelity()),
        ("metric oracles", metric_oracles()),
        ("pool-size benefit", pool_size_benefit(&space, &examples, &cfg)),
    ];
    let (desk, model) = desk_training(&cfg, space, &train);
    results.push(("desk-scale training", desk));
    results.push((
        "diversity with consistency",
        match &model {
            Some(g) => diversity_with_consistency(g, &test),
            None => outcome(false, "no trained model".into()),
        },
    ));
    results.push((
        "determinism and resume",
        determinism_and_resume(&raw).unwrap_or_else(|e| outcome(false, format!("command failed: {e}"))),
    ));
    results.push(("shape and range invariants", shape_invariants()));

    for (i, (name, o)) in results.iter().enumerate() {
        report(i + 1, name, o);
    }
    let failed = results.iter().filter(|(_, o)| !o.pass).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
