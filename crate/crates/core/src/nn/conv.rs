use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Stride-1 2-D convolution with zero "same" padding and an odd square kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    /// `[out, in, k, k]`, row-major.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct ConvGrad<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

fn view<T>(rows: usize, cols: usize, data: &[T]) -> ArrayView2<'_, T> {
    ArrayView2::from_shape((rows, cols), data).expect("matrix view shape")
}

fn view_mut<T>(rows: usize, cols: usize, data: &mut [T]) -> ArrayViewMut2<'_, T> {
    ArrayViewMut2::from_shape((rows, cols), data).expect("matrix view shape")
}

fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, k: usize, cols: &mut [T]) {
    let pad = k / 2;
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * hw..][..hw];
                for y in 0..h {
                    let dst = &mut row[y * w..(y + 1) * w];
                    let sy = y + ky;
                    if sy < pad || sy - pad >= h {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[(sy - pad) * w..(sy - pad + 1) * w];
                    for (xo, d) in dst.iter_mut().enumerate() {
                        let sx = xo + kx;
                        *d = if sx < pad || sx - pad >= w {
                            T::zero()
                        } else {
                            src[sx - pad]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, k: usize, dx: &mut [T]) {
    let pad = k / 2;
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y + ky;
                    if sy < pad || sy - pad >= h {
                        continue;
                    }
                    let dst = &mut plane[(sy - pad) * w..(sy - pad + 1) * w];
                    for xo in 0..w {
                        let sx = xo + kx;
                        if sx >= pad && sx - pad < w {
                            dst[sx - pad] += row[y * w + xo];
                        }
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Conv2d<T> {
    /// Fan-in scaled Gaussian weights (variance `2 / fan_in`), zero bias.
    pub fn init(in_channels: usize, out_channels: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        assert!(kernel % 2 == 1, "kernel size must be odd");
        let fan_in = (in_channels * kernel * kernel) as f64;
        let std = (2.0 / fan_in).sqrt();
        let weight = (0..out_channels * fan_in as usize)
            .map(|_| T::lit(rng.sample::<f64, _>(StandardNormal) * std))
            .collect();
        Self {
            in_channels,
            out_channels,
            kernel,
            weight,
            bias: vec![T::zero(); out_channels],
        }
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.c() != self.in_channels {
            return Err(Error::arg(format!(
                "convolution expects {} input channels, got {}",
                self.in_channels,
                x.c()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let [n, c, h, w] = x.shape();
        let hw = h * w;
        let pl = self.patch_len();
        let mut out = Tensor::zeros([n, self.out_channels, h, w]);
        let out_len = self.out_channels * hw;
        let weights = view(self.out_channels, pl, &self.weight);
        out.data_mut()
            .par_chunks_mut(out_len)
            .enumerate()
            .for_each_init(
                || vec![T::zero(); pl * hw],
                |cols, (s, dst)| {
                    im2col(x.sample(s), c, h, w, self.kernel, cols);
                    for (o, b) in self.bias.iter().enumerate() {
                        dst[o * hw..(o + 1) * hw].fill(*b);
                    }
                    let mut y = view_mut(self.out_channels, hw, dst);
                    general_mat_mul(T::one(), &weights, &view(pl, hw, cols), T::one(), &mut y);
                },
            );
        Ok(out)
    }

    /// Gradients of the parameters and, if requested, of the input.
    pub fn backward(
        &self,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        need_input_grad: bool,
    ) -> Result<(ConvGrad<T>, Option<Tensor<T>>)> {
        self.check_input(x)?;
        let [n, c, h, w] = x.shape();
        if dy.shape() != [n, self.out_channels, h, w] {
            return Err(Error::arg("convolution backward: gradient shape mismatch"));
        }
        let hw = h * w;
        let pl = self.patch_len();
        let weights = view(self.out_channels, pl, &self.weight);

        let per_sample: Vec<(Vec<T>, Vec<T>, Option<Vec<T>>)> = (0..n)
            .into_par_iter()
            .map(|s| {
                let mut cols = vec![T::zero(); pl * hw];
                im2col(x.sample(s), c, h, w, self.kernel, &mut cols);
                let g = view(self.out_channels, hw, dy.sample(s));
                let mut dw = vec![T::zero(); self.out_channels * pl];
                general_mat_mul(
                    T::one(),
                    &g,
                    &view(pl, hw, &cols).t(),
                    T::zero(),
                    &mut view_mut(self.out_channels, pl, &mut dw),
                );
                let db: Vec<T> = (0..self.out_channels)
                    .map(|o| dy.sample(s)[o * hw..(o + 1) * hw].iter().copied().sum())
                    .collect();
                let dx = need_input_grad.then(|| {
                    general_mat_mul(
                        T::one(),
                        &weights.t(),
                        &g,
                        T::zero(),
                        &mut view_mut(pl, hw, &mut cols),
                    );
                    let mut dx = vec![T::zero(); c * hw];
                    col2im(&cols, c, h, w, self.kernel, &mut dx);
                    dx
                });
                (dw, db, dx)
            })
            .collect();

        let mut grad = ConvGrad {
            weight: vec![T::zero(); self.weight.len()],
            bias: vec![T::zero(); self.out_channels],
        };
        let mut dx = need_input_grad.then(|| Tensor::zeros(x.shape()));
        // Summed in sample order so the result does not depend on scheduling.
        for (s, (dw, db, dxs)) in per_sample.into_iter().enumerate() {
            for (a, b) in grad.weight.iter_mut().zip(dw) {
                *a += b;
            }
            for (a, b) in grad.bias.iter_mut().zip(db) {
                *a += b;
            }
            if let (Some(dx), Some(dxs)) = (dx.as_mut(), dxs) {
                dx.sample_mut(s).copy_from_slice(&dxs);
            }
        }
        Ok((grad, dx))
    }
}
