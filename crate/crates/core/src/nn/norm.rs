use ndarray::{Array4, ArrayD, IxDyn};

use super::{Mode, Param};

const EPS: f32 = 1e-5;
const MOMENTUM: f32 = 0.1;

/// Per-channel batch normalization over (batch, height, width).
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
}

#[derive(Debug)]
pub struct BnCache {
    xhat: Array4<f32>,
    inv_std: Vec<f32>,
    /// Batch mean and unbiased variance per channel, present in training mode.
    batch_stats: Option<(Vec<f32>, Vec<f32>)>,
}

impl BatchNorm2d {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::new(format!("{name}.gamma"), ArrayD::ones(IxDyn(&[channels]))),
            beta: Param::new(format!("{name}.beta"), ArrayD::zeros(IxDyn(&[channels]))),
            running_mean: Param::buffer(format!("{name}.running_mean"), ArrayD::zeros(IxDyn(&[channels]))),
            running_var: Param::buffer(format!("{name}.running_var"), ArrayD::ones(IxDyn(&[channels]))),
        }
    }

    pub fn forward(&self, x: &Array4<f32>, mode: Mode) -> (Array4<f32>, BnCache) {
        let (n, c, h, w) = x.dim();
        let hw = h * w;
        let m = (n * hw) as f64;
        let xs = x.as_standard_layout();
        let src = xs.as_slice().expect("standard layout");
        let mut xhat = Array4::<f32>::zeros((n, c, h, w));
        let mut y = Array4::<f32>::zeros((n, c, h, w));
        let mut inv_std = vec![0.0f32; c];
        let mut batch_means = Vec::new();
        let mut batch_vars = Vec::new();
        let gamma = self.gamma.value.as_slice().expect("contiguous").to_vec();
        let beta = self.beta.value.as_slice().expect("contiguous").to_vec();
        let xh = xhat.as_slice_mut().expect("standard layout");
        let ys = y.as_slice_mut().expect("standard layout");
        for ch in 0..c {
            let (mean, var) = match mode {
                Mode::Train => {
                    let mut sum = 0.0f64;
                    for b in 0..n {
                        let off = (b * c + ch) * hw;
                        sum += src[off..off + hw].iter().map(|&v| v as f64).sum::<f64>();
                    }
                    let mean = sum / m;
                    let mut sq = 0.0f64;
                    for b in 0..n {
                        let off = (b * c + ch) * hw;
                        sq += src[off..off + hw]
                            .iter()
                            .map(|&v| (v as f64 - mean).powi(2))
                            .sum::<f64>();
                    }
                    let var = sq / m;
                    let unbiased = if m > 1.0 { sq / (m - 1.0) } else { var };
                    batch_means.push(mean as f32);
                    batch_vars.push(unbiased as f32);
                    (mean as f32, var as f32)
                }
                Mode::Eval => (
                    self.running_mean.value.as_slice().expect("contiguous")[ch],
                    self.running_var.value.as_slice().expect("contiguous")[ch],
                ),
            };
            let inv = 1.0 / (var + EPS).sqrt();
            inv_std[ch] = inv;
            for b in 0..n {
                let off = (b * c + ch) * hw;
                for i in off..off + hw {
                    let v = (src[i] - mean) * inv;
                    xh[i] = v;
                    ys[i] = gamma[ch] * v + beta[ch];
                }
            }
        }
        (
            y,
            BnCache {
                xhat,
                inv_std,
                batch_stats: (mode == Mode::Train).then_some((batch_means, batch_vars)),
            },
        )
    }

    pub fn backward(&mut self, cache: BnCache, dy: &Array4<f32>, param_grads: bool) -> Array4<f32> {
        let (n, c, h, w) = dy.dim();
        let hw = h * w;
        let m = (n * hw) as f32;
        let dys = dy.as_slice().expect("standard layout");
        let xh = cache.xhat.as_slice().expect("standard layout");
        let gamma = self.gamma.value.as_slice().expect("contiguous").to_vec();
        let mut dx = Array4::<f32>::zeros((n, c, h, w));
        let dxs = dx.as_slice_mut().expect("standard layout");
        for ch in 0..c {
            let mut dbeta = 0.0f64;
            let mut dgamma = 0.0f64;
            for b in 0..n {
                let off = (b * c + ch) * hw;
                for i in off..off + hw {
                    dbeta += dys[i] as f64;
                    dgamma += (dys[i] * xh[i]) as f64;
                }
            }
            if param_grads {
                self.gamma.grad.as_slice_mut().expect("contiguous")[ch] += dgamma as f32;
                self.beta.grad.as_slice_mut().expect("contiguous")[ch] += dbeta as f32;
            }
            let scale = gamma[ch] * cache.inv_std[ch];
            let (db, dg) = (dbeta as f32 / m, dgamma as f32 / m);
            for b in 0..n {
                let off = (b * c + ch) * hw;
                for i in off..off + hw {
                    dxs[i] = if cache.batch_stats.is_some() {
                        scale * (dys[i] - db - xh[i] * dg)
                    } else {
                        scale * dys[i]
                    };
                }
            }
        }
        dx
    }

    /// Folds the batch statistics of a training-mode forward pass into the running averages.
    pub fn commit(&mut self, cache: &BnCache) {
        let Some((means, vars)) = &cache.batch_stats else {
            return;
        };
        let rm = self.running_mean.value.as_slice_mut().expect("contiguous");
        for (r, m) in rm.iter_mut().zip(means) {
            *r = (1.0 - MOMENTUM) * *r + MOMENTUM * m;
        }
        let rv = self.running_var.value.as_slice_mut().expect("contiguous");
        for (r, v) in rv.iter_mut().zip(vars) {
            *r = (1.0 - MOMENTUM) * *r + MOMENTUM * v;
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta, &self.running_mean, &self.running_var]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.gamma,
            &mut self.beta,
            &mut self.running_mean,
            &mut self.running_var,
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn train_mode_normalizes_and_tracks_running_stats() {
        let mut bn = BatchNorm2d::new("bn", 1);
        let x = Array4::from_shape_vec((2, 1, 1, 2), vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let (y, cache) = bn.forward(&x, Mode::Train);
        bn.commit(&cache);
        let mean: f32 = y.iter().sum::<f32>() / 4.0;
        let var: f32 = y.iter().map(|v| v * v).sum::<f32>() / 4.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-4);
        assert!((bn.running_mean.value[[0]] - 0.4).abs() < 1e-6);
        // unbiased variance of {1,3,5,7} is 20/3
        assert!((bn.running_var.value[[0]] - (0.9 + 0.1 * 20.0 / 3.0)).abs() < 1e-5);
    }

    #[test]
    fn eval_mode_is_pure() {
        let bn = BatchNorm2d::new("bn", 1);
        let x = Array4::from_shape_vec((1, 1, 1, 2), vec![1.0, 2.0]).unwrap();
        let before = bn.running_mean.value.clone();
        let (a, _) = bn.forward(&x, Mode::Eval);
        let (b, _) = bn.forward(&x, Mode::Eval);
        assert_eq!(a, b);
        assert_eq!(bn.running_mean.value, before);
    }
}
