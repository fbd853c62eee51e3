//! Minimal layer stack with hand-written backward passes.
//!
//! Forward calls return the activation plus a cache; backward consumes the cache
//! and accumulates parameter gradients into each [`Param::grad`]. Keeping caches
//! outside the layers lets the same network run on several batches (real and
//! reconstructed images) before any backward pass.

mod adam;
mod conv;
mod norm;

pub use adam::{Adam, AdamState};
pub use conv::{Conv2d, ConvCache, PadMode};
pub use norm::{BatchNorm2d, BnCache};

use ndarray::{Array2, Array4, ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// A named array plus its gradient accumulator.
///
/// Non-trainable state (batch-norm running statistics) is stored as a `Param`
/// with `trainable == false` so that checkpoints see one uniform list.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: ArrayD<f32>,
    pub grad: ArrayD<f32>,
    pub trainable: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, value: ArrayD<f32>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Param {
            name: name.into(),
            value,
            grad,
            trainable: true,
        }
    }

    pub fn buffer(name: impl Into<String>, value: ArrayD<f32>) -> Self {
        Param {
            trainable: false,
            ..Param::new(name, value)
        }
    }
}

/// Anything that owns parameters.
pub trait Module {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.grad.fill(0.0);
        }
    }

    /// Order-sensitive FNV-1a digest over every parameter value.
    fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for p in self.params() {
            for b in p.name.bytes() {
                h = (h ^ b as u64).wrapping_mul(0x100000001b3);
            }
            for v in p.value.iter() {
                for b in v.to_bits().to_le_bytes() {
                    h = (h ^ b as u64).wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running averages are updated.
    Train,
    /// Running averages; no state changes.
    Eval,
}

/// Fully connected layer, `y = x W^T + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(name: &str, inputs: usize, outputs: usize, std: f32, rng: &mut R) -> Self {
        let normal = Normal::new(0.0f32, std).expect("finite std");
        let w = ArrayD::from_shape_simple_fn(IxDyn(&[outputs, inputs]), || normal.sample(rng));
        Linear {
            weight: Param::new(format!("{name}.weight"), w),
            bias: Param::new(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[outputs]))),
        }
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.shape()[1]
    }

    fn w2(&self) -> ndarray::ArrayView2<'_, f32> {
        self.weight
            .value
            .view()
            .into_dimensionality()
            .expect("rank-2 weight")
    }

    pub fn forward(&self, x: &Array2<f32>) -> Array2<f32> {
        let mut y = x.dot(&self.w2().t());
        let b = self.bias.value.view().into_dimensionality::<ndarray::Ix1>().expect("rank-1");
        y += &b;
        y
    }

    /// `x` is the forward input. Returns the input gradient.
    pub fn backward(&mut self, x: &Array2<f32>, dy: &Array2<f32>, param_grads: bool) -> Array2<f32> {
        if param_grads {
            let mut gw = self
                .weight
                .grad
                .view_mut()
                .into_dimensionality::<ndarray::Ix2>()
                .expect("rank-2");
            ndarray::linalg::general_mat_mul(1.0, &dy.t(), x, 1.0, &mut gw);
            let mut gb = self
                .bias
                .grad
                .view_mut()
                .into_dimensionality::<ndarray::Ix1>()
                .expect("rank-1");
            gb += &dy.sum_axis(ndarray::Axis(0));
        }
        dy.dot(&self.w2())
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// One element of a [`Sequential`] stack.
#[derive(Debug, Clone)]
pub enum Layer {
    Conv(Conv2d),
    Norm(BatchNorm2d),
    LeakyRelu(f32),
    Relu,
    Tanh,
    /// Nearest-neighbour upsampling by a factor of two.
    Upsample2x,
    Residual(Box<Sequential>),
}

#[derive(Debug)]
pub enum Cache {
    Conv(ConvCache),
    Norm(BnCache),
    /// Post-activation output; enough to recover the pointwise derivative.
    Output(Array4<f32>),
    None,
    Residual(Vec<Cache>),
}

impl Layer {
    fn forward(&self, x: &Array4<f32>, mode: Mode) -> (Array4<f32>, Cache) {
        match self {
            Layer::Conv(c) => {
                let (y, cache) = c.forward(x);
                (y, Cache::Conv(cache))
            }
            Layer::Norm(bn) => {
                let (y, cache) = bn.forward(x, mode);
                (y, Cache::Norm(cache))
            }
            Layer::LeakyRelu(slope) => {
                let s = *slope;
                let y = x.mapv(|v| if v > 0.0 { v } else { v * s });
                (y.clone(), Cache::Output(y))
            }
            Layer::Relu => {
                let y = x.mapv(|v| v.max(0.0));
                (y.clone(), Cache::Output(y))
            }
            Layer::Tanh => {
                let y = x.mapv(f32::tanh);
                (y.clone(), Cache::Output(y))
            }
            Layer::Upsample2x => (upsample2x(x), Cache::None),
            Layer::Residual(body) => {
                let (mut y, caches) = body.forward(x, mode);
                y += x;
                (y, Cache::Residual(caches))
            }
        }
    }

    fn backward(&mut self, cache: Cache, dy: Array4<f32>, param_grads: bool) -> Array4<f32> {
        match (self, cache) {
            (Layer::Conv(c), Cache::Conv(cache)) => c.backward(cache, &dy, param_grads),
            (Layer::Norm(bn), Cache::Norm(cache)) => bn.backward(cache, &dy, param_grads),
            (Layer::LeakyRelu(slope), Cache::Output(y)) => {
                let s = *slope;
                let mut dx = dy;
                dx.zip_mut_with(&y, |g, &o| {
                    if o <= 0.0 {
                        *g *= s
                    }
                });
                dx
            }
            (Layer::Relu, Cache::Output(y)) => {
                let mut dx = dy;
                dx.zip_mut_with(&y, |g, &o| {
                    if o <= 0.0 {
                        *g = 0.0
                    }
                });
                dx
            }
            (Layer::Tanh, Cache::Output(y)) => {
                let mut dx = dy;
                dx.zip_mut_with(&y, |g, &o| *g *= 1.0 - o * o);
                dx
            }
            (Layer::Upsample2x, Cache::None) => downsample_sum2x(&dy),
            (Layer::Residual(body), Cache::Residual(caches)) => {
                let mut dx = body.backward(caches, dy.clone(), param_grads);
                dx += &dy;
                dx
            }
            _ => panic!("layer/cache mismatch"),
        }
    }

    fn params(&self) -> Vec<&Param> {
        match self {
            Layer::Conv(c) => vec![&c.weight, &c.bias],
            Layer::Norm(bn) => bn.params(),
            Layer::Residual(body) => body.params(),
            _ => Vec::new(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Layer::Conv(c) => vec![&mut c.weight, &mut c.bias],
            Layer::Norm(bn) => bn.params_mut(),
            Layer::Residual(body) => body.params_mut(),
            _ => Vec::new(),
        }
    }
}

/// Ordered stack of layers.
#[derive(Debug, Clone, Default)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, layer: Layer) {
        self.layers.push(layer);
    }

    /// Pure forward pass; in training mode call [`Sequential::commit`] afterwards
    /// to update batch-norm running averages.
    pub fn forward(&self, x: &Array4<f32>, mode: Mode) -> (Array4<f32>, Vec<Cache>) {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur: Option<Array4<f32>> = None;
        for layer in &self.layers {
            let input = cur.as_ref().unwrap_or(x);
            let (y, c) = layer.forward(input, mode);
            caches.push(c);
            cur = Some(y);
        }
        (cur.unwrap_or_else(|| x.clone()), caches)
    }

    pub fn commit(&mut self, caches: &[Cache]) {
        for (layer, cache) in self.layers.iter_mut().zip(caches) {
            match (layer, cache) {
                (Layer::Norm(bn), Cache::Norm(c)) => bn.commit(c),
                (Layer::Residual(body), Cache::Residual(cs)) => body.commit(cs),
                _ => {}
            }
        }
    }

    pub fn backward(&mut self, caches: Vec<Cache>, dy: Array4<f32>, param_grads: bool) -> Array4<f32> {
        let mut g = dy;
        for (layer, cache) in self.layers.iter_mut().rev().zip(caches.into_iter().rev()) {
            g = layer.backward(cache, g, param_grads);
        }
        g
    }
}

impl Module for Sequential {
    fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}

/// Residual block body: two 3x3 convolutions with the same filter count.
pub fn residual_block<R: Rng + ?Sized>(
    name: &str,
    channels: usize,
    pad_mode: PadMode,
    batch_norm: bool,
    slope: f32,
    init_std: f32,
    rng: &mut R,
) -> Layer {
    let mut body = Sequential::new();
    body.push(Layer::Conv(Conv2d::new(
        &format!("{name}.conv1"),
        channels,
        channels,
        3,
        1,
        1,
        pad_mode,
        init_std,
        rng,
    )));
    if batch_norm {
        body.push(Layer::Norm(BatchNorm2d::new(&format!("{name}.bn1"), channels)));
    }
    body.push(Layer::LeakyRelu(slope));
    body.push(Layer::Conv(Conv2d::new(
        &format!("{name}.conv2"),
        channels,
        channels,
        3,
        1,
        1,
        pad_mode,
        init_std,
        rng,
    )));
    if batch_norm {
        body.push(Layer::Norm(BatchNorm2d::new(&format!("{name}.bn2"), channels)));
    }
    Layer::Residual(Box::new(body))
}

fn upsample2x(x: &Array4<f32>) -> Array4<f32> {
    let (n, c, h, w) = x.dim();
    let mut y = Array4::<f32>::zeros((n, c, 2 * h, 2 * w));
    let xs = x.as_standard_layout();
    let src = xs.as_slice().expect("standard layout");
    let dst = y.as_slice_mut().expect("standard layout");
    let w2 = 2 * w;
    for plane in 0..n * c {
        let s = &src[plane * h * w..(plane + 1) * h * w];
        let d = &mut dst[plane * 4 * h * w..(plane + 1) * 4 * h * w];
        for i in 0..h {
            let row = &s[i * w..(i + 1) * w];
            let (top, bottom) = d[2 * i * w2..(2 * i + 2) * w2].split_at_mut(w2);
            for (j, &v) in row.iter().enumerate() {
                top[2 * j] = v;
                top[2 * j + 1] = v;
            }
            bottom.copy_from_slice(top);
        }
    }
    y
}

fn downsample_sum2x(dy: &Array4<f32>) -> Array4<f32> {
    let (n, c, h2, w2) = dy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array4::<f32>::zeros((n, c, h, w));
    let src = dy.as_slice().expect("standard layout");
    let dst = dx.as_slice_mut().expect("standard layout");
    for plane in 0..n * c {
        let s = &src[plane * h2 * w2..(plane + 1) * h2 * w2];
        let d = &mut dst[plane * h * w..(plane + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                let a = (2 * i) * w2 + 2 * j;
                d[i * w + j] = s[a] + s[a + 1] + s[a + w2] + s[a + w2 + 1];
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn check_sequential_grad(mut seq: Sequential, shape: (usize, usize, usize, usize), seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, 1.0).unwrap();
        let x = Array4::from_shape_simple_fn(shape, || normal.sample(&mut rng));
        let (y, caches) = seq.forward(&x, Mode::Train);
        let r = Array4::from_shape_simple_fn(y.dim(), || normal.sample(&mut rng));
        let dx = seq.backward(caches, r.clone(), true);
        let objective = |x: &Array4<f32>| -> f64 {
            let (y, _) = seq.forward(x, Mode::Train);
            y.iter().zip(r.iter()).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
        };
        let eps = 5e-3f32;
        let mut worst = 0.0f64;
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += eps;
            xm.as_slice_mut().unwrap()[idx] -= eps;
            let fd = (objective(&xp) - objective(&xm)) / (2.0 * eps as f64);
            let an = dx.as_slice().unwrap()[idx] as f64;
            worst = worst.max((fd - an).abs() / (1.0 + fd.abs()));
        }
        assert!(worst < 2e-2, "worst relative gradient error {worst}");
    }

    #[test]
    fn residual_stack_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut seq = Sequential::new();
        seq.push(Layer::Conv(Conv2d::new("a", 2, 3, 3, 1, 1, PadMode::Replicate, 0.4, &mut rng)));
        seq.push(Layer::Norm(BatchNorm2d::new("bn", 3)));
        seq.push(Layer::LeakyRelu(0.2));
        seq.push(residual_block("r", 3, PadMode::Zero, true, 0.2, 0.4, &mut rng));
        seq.push(Layer::Upsample2x);
        seq.push(Layer::Tanh);
        check_sequential_grad(seq, (3, 2, 4, 4), 9);
    }

    #[test]
    fn upsample_and_adjoint() {
        let x = Array4::from_shape_vec((1, 1, 1, 2), vec![1.0, 2.0]).unwrap();
        let y = upsample2x(&x);
        assert_eq!(y.iter().copied().collect::<Vec<_>>(), vec![1., 1., 2., 2., 1., 1., 2., 2.]);
        let back = downsample_sum2x(&y);
        assert_eq!(back.iter().copied().collect::<Vec<_>>(), vec![4.0, 8.0]);
    }

    #[test]
    fn linear_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut lin = Linear::new("l", 3, 2, 0.5, &mut rng);
        let x = Array2::from_shape_vec((2, 3), vec![0.1, -0.4, 0.3, 1.0, 0.5, -0.2]).unwrap();
        let dy = Array2::from_shape_vec((2, 2), vec![1.0, -1.0, 0.5, 2.0]).unwrap();
        let dx = lin.backward(&x, &dy, true);
        // d/dx sum(dy * (x W^T + b)) = dy W
        let w = lin.weight.value.clone().into_dimensionality::<ndarray::Ix2>().unwrap();
        assert_eq!(dx, dy.dot(&w));
        assert_eq!(lin.bias.grad.as_slice().unwrap(), &[1.5, 1.0]);
    }
}
