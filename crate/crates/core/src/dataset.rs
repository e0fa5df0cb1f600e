//! Image I/O, deterministic resampling and paired low/high resolution datasets.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::resample::resize_plane;
use crate::scalar::Scalar;
use crate::tensor::{Image01, Tensor};

/// An 8-bit RGB raster, row-major with interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageU8 {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl ImageU8 {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::arg(format!(
                "{height}x{width} RGB image needs {} bytes, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(height * width * 3).collect();
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        3
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    fn plane_f64(&self, c: usize) -> Vec<f64> {
        self.data.iter().skip(c).step_by(3).map(|&v| v as f64).collect()
    }

    fn from_planes(height: usize, width: usize, planes: &[Vec<f64>; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for i in 0..height * width {
            for p in planes {
                data.push(quantize(p[i]));
            }
        }
        Self { height, width, data }
    }

    /// `[1, 3, h, w]` tensor with values divided by 255.
    pub fn to_tensor<T: Scalar>(&self) -> Image01<T> {
        let mut t = Tensor::zeros([1, 3, self.height, self.width]);
        let k = T::lit(1.0 / 255.0);
        for c in 0..3 {
            for (d, &v) in t.plane_mut(0, c).iter_mut().zip(self.data.iter().skip(c).step_by(3)) {
                *d = T::lit(v as f64) * k;
            }
        }
        t
    }

    /// Sample `index` of a `[0, 1]` tensor, scaled by 255, clamped and rounded half-up.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, index: usize) -> Result<Self> {
        if t.c() != 3 || index >= t.n() {
            return Err(Error::arg(format!("cannot take RGB image {index} from {:?}", t.shape())));
        }
        let (h, w) = t.hw();
        let planes = [0, 1, 2].map(|c| t.plane(index, c).iter().map(|v| v.f64() * 255.0).collect());
        Ok(Self::from_planes(h, w, &planes))
    }

    /// Places images side by side. All must share a height.
    pub fn hstack(images: &[ImageU8]) -> Result<Self> {
        let h = images.first().ok_or_else(|| Error::arg("no images to stack"))?.height;
        if images.iter().any(|i| i.height != h) {
            return Err(Error::arg("images to stack differ in height"));
        }
        let width = images.iter().map(|i| i.width).sum();
        let mut data = Vec::with_capacity(h * width * 3);
        for y in 0..h {
            for img in images {
                data.extend_from_slice(&img.data[y * img.width * 3..(y + 1) * img.width * 3]);
            }
        }
        Ok(Self { height: h, width, data })
    }
}

/// Clamp to `[0, 255]` and round half-up.
#[inline]
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 255.0) + 0.5).floor() as u8
}

/// Reads a PNG or JPEG file as RGB. Grayscale and alpha inputs are converted.
pub fn load_image(path: &Path) -> Result<ImageU8> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory(&bytes).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    ImageU8::new(h as usize, w as usize, rgb.into_raw())
}

pub fn save_png(img: &ImageU8, path: &Path) -> Result<()> {
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, img.data.clone())
        .expect("buffer length checked at construction");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Format {
                path: path.to_path_buf(),
                message: other.to_string(),
            },
        })
}

/// Bicubic resize to exactly `out_h x out_w`, ignoring aspect ratio.
pub fn anisotropic_resize(img: &ImageU8, out_h: usize, out_w: usize) -> Result<ImageU8> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::arg(format!("output size must be positive, got {out_h}x{out_w}")));
    }
    if (out_h, out_w) == (img.height, img.width) {
        return Ok(img.clone());
    }
    let planes = [0, 1, 2].map(|c| resize_plane(&img.plane_f64(c), img.height, img.width, out_h, out_w));
    Ok(ImageU8::from_planes(out_h, out_w, &planes))
}

/// Bicubic downsampling by an integer factor that divides both dimensions.
pub fn downsample(img: &ImageU8, factor: usize) -> Result<ImageU8> {
    if factor == 0 {
        return Err(Error::arg("downsampling factor must be positive"));
    }
    if !img.height.is_multiple_of(factor) || !img.width.is_multiple_of(factor) {
        return Err(Error::arg(format!(
            "{}x{} image is not divisible by {factor}",
            img.height, img.width
        )));
    }
    anisotropic_resize(img, img.height / factor, img.width / factor)
}

/// Bicubic upscaling by an integer factor; the interpolation baseline.
pub fn bicubic_upscale(img: &ImageU8, factor: usize) -> Result<ImageU8> {
    if factor == 0 {
        return Err(Error::arg("upscaling factor must be positive"));
    }
    anisotropic_resize(img, img.height * factor, img.width * factor)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pair {
    pub name: String,
    pub input: ImageU8,
    pub target: ImageU8,
}

/// Low/high resolution pairs where each target is `scale_factor` times its input.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PairedDataset {
    pub pairs: Vec<Pair>,
    pub scale_factor: usize,
}

impl PairedDataset {
    pub fn new(pairs: Vec<Pair>, scale_factor: usize) -> Result<Self> {
        for p in &pairs {
            if p.target.height != p.input.height * scale_factor
                || p.target.width != p.input.width * scale_factor
            {
                return Err(Error::Data(format!(
                    "pair {}: target {}x{} is not {scale_factor}x input {}x{}",
                    p.name, p.target.height, p.target.width, p.input.height, p.input.width
                )));
            }
        }
        Ok(Self { pairs, scale_factor })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.pairs.iter().map(|p| p.name.as_str())
    }
}

/// Builds a pair from a raw image: resize to `target_size` square, then downsample.
pub fn make_pair(name: &str, raw: &ImageU8, target_size: usize, scale_factor: usize) -> Result<Pair> {
    let target = anisotropic_resize(raw, target_size, target_size)?;
    let input = downsample(&target, scale_factor)?;
    Ok(Pair {
        name: name.to_string(),
        input,
        target,
    })
}

fn is_image_file(path: &Path) -> bool {
    path.is_file()
        && path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
            .unwrap_or(false)
}

/// Image files directly inside `dir`, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if is_image_file(&path) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Deterministic train/test index split: shuffle `0..n` under `seed`, then
/// take the first `round(n * train_fraction)` (at least one on each side).
pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::arg(format!("split fraction must be in (0, 1), got {train_fraction}")));
    }
    if n < 2 {
        return Err(Error::Data(format!("need at least 2 images to split, found {n}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((n as f64 * train_fraction).round() as usize).clamp(1, n - 1);
    let test = idx.split_off(n_train);
    Ok((idx, test))
}

/// Loads every image in `src_dir` and returns disjoint train and test sets.
pub fn build_dataset(
    src_dir: &Path,
    target_size: usize,
    scale_factor: usize,
    split_fraction: f64,
    seed: u64,
) -> Result<(PairedDataset, PairedDataset)> {
    if scale_factor == 0 || target_size == 0 || !target_size.is_multiple_of(scale_factor) {
        return Err(Error::arg(format!(
            "target size {target_size} must be a positive multiple of scale factor {scale_factor}"
        )));
    }
    let files = list_images(src_dir)?;
    if files.is_empty() {
        return Err(Error::Data(format!("no images found in {}", src_dir.display())));
    }
    let mut names = BTreeSet::new();
    let mut pairs = Vec::with_capacity(files.len());
    for f in &files {
        let name = f
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Data(format!("unusable file name {}", f.display())))?
            .to_string();
        if !names.insert(name.clone()) {
            return Err(Error::Data(format!("duplicate image name {name}")));
        }
        pairs.push(Some(make_pair(&name, &load_image(f)?, target_size, scale_factor)?));
    }
    let (train_idx, test_idx) = split_indices(pairs.len(), split_fraction, seed)?;
    let mut take = |idx: &[usize]| -> Vec<Pair> {
        idx.iter().map(|&i| pairs[i].take().expect("index used once")).collect()
    };
    let train = take(&train_idx);
    let test = take(&test_idx);
    Ok((
        PairedDataset::new(train, scale_factor)?,
        PairedDataset::new(test, scale_factor)?,
    ))
}

pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split {other}"))),
        }
    }
}

/// Writes `lr/<name>.png`, `hr/<name>.png` and a manifest of `name split`
/// lines (train entries first, each group in dataset order).
pub fn write_cache(out: &Path, train: &PairedDataset, test: &PairedDataset) -> Result<()> {
    for sub in ["lr", "hr"] {
        let d = out.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut manifest = String::new();
    for (set, split) in [(train, Split::Train), (test, Split::Test)] {
        for p in &set.pairs {
            save_png(&p.input, &out.join("lr").join(format!("{}.png", p.name)))?;
            save_png(&p.target, &out.join("hr").join(format!("{}.png", p.name)))?;
            manifest.push_str(&format!("{} {}\n", p.name, split.as_str()));
        }
    }
    let path = out.join(MANIFEST_FILE);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

/// Reads the pairs of one split back from a cache written by [`write_cache`].
pub fn load_cache(dir: &Path, split: Split) -> Result<PairedDataset> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut pairs = Vec::new();
    let mut scale = None;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (name, s) = match (parts.next(), parts.next(), parts.next()) {
            (Some(n), Some(s), None) => (n, s),
            _ => return Err(Error::Data(format!("{}:{}: malformed line", path.display(), lineno + 1))),
        };
        if Split::parse(s)? != split {
            continue;
        }
        let input = load_image(&dir.join("lr").join(format!("{name}.png")))?;
        let target = load_image(&dir.join("hr").join(format!("{name}.png")))?;
        if input.height == 0 || target.height % input.height != 0 {
            return Err(Error::Data(format!("pair {name} has no integer scale factor")));
        }
        let f = target.height / input.height;
        if *scale.get_or_insert(f) != f {
            return Err(Error::Data(format!("pair {name} has scale {f}, others differ")));
        }
        pairs.push(Pair {
            name: name.to_string(),
            input,
            target,
        });
    }
    PairedDataset::new(pairs, scale.unwrap_or(1))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(h: usize, w: usize) -> ImageU8 {
        let mut img = ImageU8::filled(h, w, [0, 0, 0]);
        for y in 0..h {
            for x in 0..w {
                img.set_pixel(y, x, [(x * 30) as u8, (y * 30) as u8, ((x + y) * 15) as u8]);
            }
        }
        img
    }

    #[test]
    fn constant_images_stay_constant() {
        let img = ImageU8::filled(100, 200, [77, 128, 201]);
        let out = anisotropic_resize(&img, 256, 256).unwrap();
        assert_eq!((out.height(), out.width()), (256, 256));
        for y in 0..256 {
            for x in 0..256 {
                let p = out.pixel(y, x);
                assert!(p[0].abs_diff(77) <= 1 && p[1].abs_diff(128) <= 1 && p[2].abs_diff(201) <= 1);
            }
        }
        let down = downsample(&ImageU8::filled(32, 32, [9, 9, 9]), 4).unwrap();
        assert!(down.data().iter().all(|v| v.abs_diff(9) <= 1));
        let up = bicubic_upscale(&ImageU8::filled(3, 5, [250, 1, 0]), 4).unwrap();
        assert_eq!((up.height(), up.width()), (12, 20));
        assert!(up.data().chunks(3).all(|p| p[0].abs_diff(250) <= 1 && p[1] <= 2));
    }

    #[test]
    fn identity_resampling() {
        let img = gradient(8, 8);
        assert_eq!(anisotropic_resize(&img, 8, 8).unwrap(), img);
        assert_eq!(downsample(&img, 1).unwrap(), img);
        assert_eq!(bicubic_upscale(&img, 1).unwrap(), img);
    }

    #[test]
    fn argument_errors() {
        let img = gradient(6, 6);
        assert!(anisotropic_resize(&img, 0, 4).is_err());
        assert!(downsample(&img, 4).is_err());
        assert!(downsample(&img, 0).is_err());
        assert!(bicubic_upscale(&img, 0).is_err());
    }

    #[test]
    fn split_is_disjoint_and_deterministic() {
        let (a, b) = split_indices(10, 0.7, 3).unwrap();
        assert_eq!((a.len(), b.len()), (7, 3));
        assert!(a.iter().all(|i| !b.contains(i)));
        assert_eq!(split_indices(10, 0.7, 3).unwrap(), (a, b));
        assert!(split_indices(1, 0.5, 0).is_err());
        assert!(split_indices(4, 1.0, 0).is_err());
        let (a, b) = split_indices(2, 0.99, 0).unwrap();
        assert_eq!((a.len(), b.len()), (1, 1));
    }

    #[test]
    fn tensor_round_trip() {
        let img = gradient(5, 7);
        let t: Tensor<f32> = img.to_tensor();
        assert_eq!(t.shape(), [1, 3, 5, 7]);
        assert_eq!(ImageU8::from_tensor(&t, 0).unwrap(), img);
    }

    #[test]
    fn quantize_rounds_half_up_and_clamps() {
        assert_eq!(quantize(0.5), 1);
        assert_eq!(quantize(1.49), 1);
        assert_eq!(quantize(-3.0), 0);
        assert_eq!(quantize(300.0), 255);
    }

    #[test]
    fn hstack_layout() {
        let a = ImageU8::filled(2, 3, [1, 2, 3]);
        let b = ImageU8::filled(2, 1, [9, 9, 9]);
        let s = ImageU8::hstack(&[a, b]).unwrap();
        assert_eq!(s.width(), 4);
        assert_eq!(s.pixel(1, 3), [9, 9, 9]);
        assert_eq!(s.pixel(1, 2), [1, 2, 3]);
    }
}
