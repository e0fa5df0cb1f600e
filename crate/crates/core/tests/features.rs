use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use srim::features::{feature_distance, FeatureBackend, FeatureExtractor, FeatureNet, ProjectionMatrix};
use srim::Tensor;

const GOLDEN: &str = include_str!("data/random_convnet_seed7_8x8.txt");

fn ramp_image() -> Tensor<f64> {
    let data = (0..3 * 64).map(|i| ((i * 37) % 101) as f64 / 100.0).collect();
    Tensor::from_vec([1, 3, 8, 8], data).unwrap()
}

fn gaussian(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

#[test]
fn random_convnet_matches_golden_vector() {
    let ext = FeatureExtractor::<f64>::from_backend(&FeatureBackend::RandomConvnet { seed: 7 }, 8, 8).unwrap();
    let got = ext.extract(&ramp_image()).unwrap();
    let want: Vec<f64> = GOLDEN.lines().map(|l| l.parse().unwrap()).collect();
    assert_eq!(got.data.len(), want.len());
    for (i, (a, b)) in got.data.iter().zip(&want).enumerate() {
        assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0), "entry {i}: {a} vs {b}");
    }
    // a second extraction is bit-identical
    assert_eq!(ext.extract(&ramp_image()).unwrap().data, got.data);
}

#[test]
fn calibrated_components_have_comparable_magnitudes() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let imgs: Vec<Tensor<f64>> = (0..4)
        .map(|_| Tensor::from_vec([1, 3, 16, 16], (0..768).map(|_| rng.random::<f64>()).collect()).unwrap())
        .collect();
    let mut ext = FeatureExtractor::<f64>::new(FeatureNet::random_convnet(3), 16, 16).unwrap();
    let raw = ext.component_magnitudes(&imgs).unwrap();
    assert_eq!(raw.len(), 3);
    let weights = ext.calibrate_weights(&imgs).unwrap();
    assert!(weights.iter().all(|&w| w > 0.0));
    let weighted: Vec<f64> = raw.iter().zip(&weights).map(|(m, w)| m * w).collect();
    let (lo, hi) = weighted
        .iter()
        .fold((f64::MAX, f64::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    assert!(hi / lo < 10.0, "{weighted:?}");
}

#[test]
fn projection_preserves_squared_distances_on_average() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let p = ProjectionMatrix::<f64>::new(2048, 300, 17).unwrap();
    let mut sum = 0.0;
    for _ in 0..1000 {
        let u = gaussian(300, &mut rng);
        let v = gaussian(300, &mut rng);
        let d = feature_distance(&p.project(&u).unwrap(), &p.project(&v).unwrap()).unwrap();
        sum += d / feature_distance(&u, &v).unwrap();
    }
    let mean = sum / 1000.0;
    assert!((0.9..=1.1).contains(&mean), "{mean}");
}

#[test]
fn projection_rarely_reverses_clear_orderings() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let p = ProjectionMatrix::<f64>::new(2048, 256, 3).unwrap();
    let (mut trials, mut reversed) = (0, 0);
    while trials < 500 {
        let a = gaussian(256, &mut rng);
        let b = gaussian(256, &mut rng);
        let c: Vec<f64> = gaussian(256, &mut rng).iter().map(|v| v * 1.5).collect();
        let (dab, dac) = (feature_distance(&a, &b).unwrap(), feature_distance(&a, &c).unwrap());
        let (near, far) = if dab < dac { (&b, &c) } else { (&c, &b) };
        if dab.min(dac) > 0.8 * dab.max(dac) {
            continue;
        }
        trials += 1;
        let pa = p.project(&a).unwrap();
        let pn = feature_distance(&pa, &p.project(near).unwrap()).unwrap();
        let pf = feature_distance(&pa, &p.project(far).unwrap()).unwrap();
        if pn >= pf {
            reversed += 1;
        }
    }
    assert!((reversed as f64) < 0.05 * trials as f64, "{reversed} of {trials}");
}
