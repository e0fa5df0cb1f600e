use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-channel batch normalization over `(n, h, w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: T,
    pub momentum: T,
}

/// Intermediates of a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct BnCache<T> {
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    /// Unbiased variance estimate, used for the running average.
    pub var_unbiased: Vec<T>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            eps: T::lit(1e-5),
            momentum: T::lit(0.1),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward_train(&self, x: &Tensor<T>) -> (Tensor<T>, BnCache<T>) {
        let [n, c, h, w] = x.shape();
        let count = n * h * w;
        let cnt = T::lit(count as f64);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut sum = T::zero();
            for s in 0..n {
                sum += x.plane(s, ch).iter().copied().sum::<T>();
            }
            let mu = sum / cnt;
            let mut sq = T::zero();
            for s in 0..n {
                sq += x.plane(s, ch).iter().map(|&v| (v - mu) * (v - mu)).sum::<T>();
            }
            mean[ch] = mu;
            var[ch] = sq / cnt;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + self.eps).sqrt()).collect();
        let mut normalized = Tensor::zeros(x.shape());
        let mut y = Tensor::zeros(x.shape());
        for s in 0..n {
            for ch in 0..c {
                let (mu, is, g, b) = (mean[ch], inv_std[ch], self.gamma[ch], self.beta[ch]);
                let src = x.plane(s, ch);
                let xh = normalized.plane_mut(s, ch);
                for (d, &v) in xh.iter_mut().zip(src) {
                    *d = (v - mu) * is;
                }
                let xh = normalized.plane(s, ch).to_vec();
                for (d, v) in y.plane_mut(s, ch).iter_mut().zip(xh) {
                    *d = g * v + b;
                }
            }
        }
        let unbias = if count > 1 {
            cnt / T::lit((count - 1) as f64)
        } else {
            T::one()
        };
        let var_unbiased = var.iter().map(|&v| v * unbias).collect();
        (
            y,
            BnCache {
                normalized,
                inv_std,
                mean,
                var_unbiased,
            },
        )
    }

    pub fn forward_eval(&self, x: &Tensor<T>) -> Tensor<T> {
        let [n, c, _, _] = x.shape();
        let mut y = x.clone();
        for ch in 0..c {
            let scale = self.gamma[ch] / (self.running_var[ch] + self.eps).sqrt();
            let shift = self.beta[ch] - self.running_mean[ch] * scale;
            for s in 0..n {
                for v in y.plane_mut(s, ch) {
                    *v = *v * scale + shift;
                }
            }
        }
        y
    }

    /// Returns `(dx, dgamma, dbeta)`.
    pub fn backward(&self, cache: &BnCache<T>, dy: &Tensor<T>) -> (Tensor<T>, Vec<T>, Vec<T>) {
        let [n, c, h, w] = dy.shape();
        let cnt = T::lit((n * h * w) as f64);
        let mut dx = Tensor::zeros(dy.shape());
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for ch in 0..c {
            let mut sum_dy = T::zero();
            let mut sum_dy_xh = T::zero();
            for s in 0..n {
                for (&g, &xh) in dy.plane(s, ch).iter().zip(cache.normalized.plane(s, ch)) {
                    sum_dy += g;
                    sum_dy_xh += g * xh;
                }
            }
            dgamma[ch] = sum_dy_xh;
            dbeta[ch] = sum_dy;
            let k = self.gamma[ch] * cache.inv_std[ch] / cnt;
            for s in 0..n {
                let xh = cache.normalized.plane(s, ch);
                let g = dy.plane(s, ch);
                for (i, d) in dx.plane_mut(s, ch).iter_mut().enumerate() {
                    *d = k * (cnt * g[i] - sum_dy - xh[i] * sum_dy_xh);
                }
            }
        }
        (dx, dgamma, dbeta)
    }

    pub fn update_running(&mut self, cache: &BnCache<T>) {
        let m = self.momentum;
        let keep = T::one() - m;
        for ch in 0..self.channels() {
            self.running_mean[ch] = keep * self.running_mean[ch] + m * cache.mean[ch];
            self.running_var[ch] = keep * self.running_var[ch] + m * cache.var_unbiased[ch];
        }
    }
}
