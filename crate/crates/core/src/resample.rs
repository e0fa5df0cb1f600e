//! Resampling kernels.
//!
//! Bicubic (Keys cubic, a = -0.5) is used for dataset construction and the
//! interpolation baseline. When shrinking, the kernel is stretched by the
//! scale ratio so it acts as an antialiasing filter. Bilinear integer-factor
//! upsampling is the in-network upsampler and has an exact adjoint for
//! backpropagation. Both use half-pixel centres and replicate the border.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const CUBIC_A: f64 = -0.5;

#[inline]
pub fn cubic_weight(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        ((CUBIC_A + 2.0) * x - (CUBIC_A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((CUBIC_A * x - 5.0 * CUBIC_A) * x + 8.0 * CUBIC_A) * x - 4.0 * CUBIC_A
    } else {
        0.0
    }
}

/// Taps of one output coordinate: `(source index, weight)`, weights summing to one.
type Taps = Vec<(usize, f64)>;

fn cubic_axis(in_len: usize, out_len: usize) -> Vec<Taps> {
    let scale = in_len as f64 / out_len as f64;
    let stretch = scale.max(1.0);
    let support = 2.0 * stretch;
    (0..out_len)
        .map(|o| {
            let centre = (o as f64 + 0.5) * scale;
            let lo = (centre - support).floor() as isize;
            let hi = (centre + support).ceil() as isize;
            let mut taps: Taps = Vec::with_capacity((hi - lo) as usize);
            let mut total = 0.0;
            for i in lo..hi {
                let w = cubic_weight((i as f64 + 0.5 - centre) / stretch);
                if w == 0.0 {
                    continue;
                }
                let idx = i.clamp(0, in_len as isize - 1) as usize;
                total += w;
                match taps.iter_mut().find(|(j, _)| *j == idx) {
                    Some(t) => t.1 += w,
                    None => taps.push((idx, w)),
                }
            }
            for t in &mut taps {
                t.1 /= total;
            }
            taps
        })
        .collect()
}

/// Bicubic resize of one `h x w` plane.
pub fn resize_plane(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    debug_assert_eq!(src.len(), h * w);
    let xs = cubic_axis(w, out_w);
    let ys = cubic_axis(h, out_h);
    let mut rows = vec![0.0; h * out_w];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for (ox, taps) in xs.iter().enumerate() {
            rows[y * out_w + ox] = taps.iter().map(|&(i, wt)| row[i] * wt).sum();
        }
    }
    let mut out = vec![0.0; out_h * out_w];
    for (oy, taps) in ys.iter().enumerate() {
        let dst = &mut out[oy * out_w..(oy + 1) * out_w];
        for &(i, wt) in taps {
            let row = &rows[i * out_w..(i + 1) * out_w];
            for (d, &r) in dst.iter_mut().zip(row) {
                *d += r * wt;
            }
        }
    }
    out
}

fn check_dims(out_h: usize, out_w: usize) -> Result<()> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::arg(format!(
            "output dimensions must be positive, got {out_h}x{out_w}"
        )));
    }
    Ok(())
}

/// Bicubic resize of every plane of a float tensor. No clamping is applied.
pub fn resize_bicubic<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    check_dims(out_h, out_w)?;
    let [n, c, h, w] = x.shape();
    let mut out = Tensor::zeros([n, c, out_h, out_w]);
    for s in 0..n {
        for ch in 0..c {
            let plane: Vec<f64> = x.plane(s, ch).iter().map(|v| v.f64()).collect();
            let r = resize_plane(&plane, h, w, out_h, out_w);
            for (d, v) in out.plane_mut(s, ch).iter_mut().zip(r) {
                *d = T::lit(v);
            }
        }
    }
    Ok(out)
}

/// Per-axis taps `(i0, i1, t)` for bilinear upsampling; value is `(1 - t) * a[i0] + t * a[i1]`.
fn bilinear_axis(in_len: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..in_len * factor)
        .map(|o| {
            let src = (o as f64 + 0.5) / factor as f64 - 0.5;
            if src <= 0.0 {
                return (0, 0, 0.0);
            }
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear upsampling by an integer factor.
pub fn upsample_bilinear<T: Scalar>(x: &Tensor<T>, factor: usize) -> Tensor<T> {
    assert!(factor >= 1, "upsampling factor must be positive");
    let [n, c, h, w] = x.shape();
    let (oh, ow) = (h * factor, w * factor);
    let ys = bilinear_axis(h, factor);
    let xs = bilinear_axis(w, factor);
    let xs_t: Vec<(usize, usize, T, T)> = xs
        .iter()
        .map(|&(a, b, t)| (a, b, T::lit(1.0 - t), T::lit(t)))
        .collect();
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let mut row0 = vec![T::zero(); ow];
    let mut row1 = vec![T::zero(); ow];
    for s in 0..n {
        for ch in 0..c {
            let src = x.plane(s, ch);
            let dst = out.plane_mut(s, ch);
            for (oy, &(y0, y1, ty)) in ys.iter().enumerate() {
                let (wy0, wy1) = (T::lit(1.0 - ty), T::lit(ty));
                for (ox, &(x0, x1, wx0, wx1)) in xs_t.iter().enumerate() {
                    row0[ox] = src[y0 * w + x0] * wx0 + src[y0 * w + x1] * wx1;
                    row1[ox] = src[y1 * w + x0] * wx0 + src[y1 * w + x1] * wx1;
                }
                let d = &mut dst[oy * ow..(oy + 1) * ow];
                for ox in 0..ow {
                    d[ox] = row0[ox] * wy0 + row1[ox] * wy1;
                }
            }
        }
    }
    out
}

/// Adjoint of [`upsample_bilinear`]: maps an output gradient back to the input grid.
pub fn upsample_bilinear_backward<T: Scalar>(dy: &Tensor<T>, factor: usize) -> Tensor<T> {
    let [n, c, oh, ow] = dy.shape();
    let (h, w) = (oh / factor, ow / factor);
    let ys = bilinear_axis(h, factor);
    let xs = bilinear_axis(w, factor);
    let mut dx = Tensor::zeros([n, c, h, w]);
    for s in 0..n {
        for ch in 0..c {
            let g = dy.plane(s, ch);
            let d = dx.plane_mut(s, ch);
            for (oy, &(y0, y1, ty)) in ys.iter().enumerate() {
                let (wy0, wy1) = (T::lit(1.0 - ty), T::lit(ty));
                for (ox, &(x0, x1, tx)) in xs.iter().enumerate() {
                    let (wx0, wx1) = (T::lit(1.0 - tx), T::lit(tx));
                    let v = g[oy * ow + ox];
                    d[y0 * w + x0] += v * wy0 * wx0;
                    d[y0 * w + x1] += v * wy0 * wx1;
                    d[y1 * w + x0] += v * wy1 * wx0;
                    d[y1 * w + x1] += v * wy1 * wx1;
                }
            }
        }
    }
    dx
}
