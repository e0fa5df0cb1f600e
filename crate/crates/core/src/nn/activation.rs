use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient through a rectifier given its output.
pub fn relu_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = dy.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(y.data()) {
        if v <= T::zero() {
            *d = T::zero();
        }
    }
    dx
}

/// Logistic sigmoid, clamped to `[eps, 1 - eps]` so outputs stay strictly
/// inside the unit interval even where the exact value rounds to 0 or 1.
pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let lo = T::epsilon();
    let hi = T::one() - T::epsilon();
    x.map(|v| {
        let s = if v >= T::zero() {
            T::one() / (T::one() + (-v).exp())
        } else {
            let e = v.exp();
            e / (T::one() + e)
        };
        s.max(lo).min(hi)
    })
}

/// Gradient through a sigmoid given its output.
pub fn sigmoid_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = dy.clone();
    for (d, &s) in dx.data_mut().iter_mut().zip(y.data()) {
        *d *= s * (T::one() - s);
    }
    dx
}

/// 2x2 max pooling with stride 2. Returns the output and, per output value,
/// the flat index of the selected input.
pub fn maxpool2<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<usize>) {
    let [n, c, h, w] = x.shape();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * h * w;
            let src = x.plane(s, ch);
            let dst = out.plane_mut(s, ch);
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = 2 * y * w + 2 * xx;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = (2 * y + dy) * w + 2 * xx + dx;
                        if src[i] > src[best] {
                            best = i;
                        }
                    }
                    dst[y * ow + xx] = src[best];
                    arg.push(base + best);
                }
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward<T: Scalar>(
    argmax: &[usize],
    dy: &Tensor<T>,
    input_shape: [usize; 4],
) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    for (&i, &g) in argmax.iter().zip(dy.data()) {
        dx.data_mut()[i] += g;
    }
    dx
}
