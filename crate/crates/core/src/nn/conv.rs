use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array4, ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Param;

/// How a convolution fills the border region.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    /// Border values are repeated outward.
    Replicate,
}

/// 2-D convolution lowered to a single matrix product over an im2col buffer.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    pad_mode: PadMode,
}

/// Saved state for the backward pass: the padded input and its unpadded extent.
#[derive(Debug)]
pub struct ConvCache {
    padded: Array4<f32>,
    in_hw: (usize, usize),
}

#[allow(clippy::too_many_arguments)]
impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        pad_mode: PadMode,
        init_std: f32,
        rng: &mut R,
    ) -> Self {
        let normal = Normal::new(0.0f32, init_std).expect("finite std");
        let w = ArrayD::from_shape_simple_fn(IxDyn(&[out_ch, in_ch, kernel, kernel]), || {
            normal.sample(rng)
        });
        Conv2d {
            weight: Param::new(format!("{name}.weight"), w),
            bias: Param::new(
                format!("{name}.bias"),
                ArrayD::zeros(IxDyn(&[out_ch])),
            ),
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
            pad_mode,
        }
    }

    /// Pins the bias at zero (kept as a non-trainable buffer).
    pub fn without_bias(mut self) -> Self {
        let name = std::mem::take(&mut self.bias.name);
        self.bias = Param::buffer(name, ArrayD::zeros(IxDyn(&[self.out_ch])));
        self
    }

    pub fn out_channels(&self) -> usize {
        self.out_ch
    }

    pub fn in_channels(&self) -> usize {
        self.in_ch
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn weight_matrix(&self) -> ndarray::ArrayView2<'_, f32> {
        self.weight
            .value
            .view()
            .into_shape_with_order((self.out_ch, self.in_ch * self.kernel * self.kernel))
            .expect("conv weight is contiguous")
    }

    pub fn forward(&self, x: &Array4<f32>) -> (Array4<f32>, ConvCache) {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_ch, "conv input channels");
        let padded = pad(x, self.pad, self.pad_mode);
        let (oh, ow) = self.output_hw(h, w);
        let cols = im2col(&padded, self.kernel, self.stride, oh, ow);
        let mut out2 = Array2::<f32>::zeros((self.out_ch, n * oh * ow));
        general_mat_mul(1.0, &self.weight_matrix(), &cols, 0.0, &mut out2);
        let bias = self.bias.value.as_slice().expect("contiguous bias");
        let y = from_channel_major(&out2, n, oh, ow, Some(bias));
        (
            y,
            ConvCache {
                padded,
                in_hw: (h, w),
            },
        )
    }

    /// Returns the input gradient; accumulates parameter gradients when `param_grads`.
    pub fn backward(&mut self, cache: ConvCache, dy: &Array4<f32>, param_grads: bool) -> Array4<f32> {
        let (n, _, oh, ow) = dy.dim();
        let dy2 = to_channel_major(dy);
        let cols = im2col(&cache.padded, self.kernel, self.stride, oh, ow);
        if param_grads {
            let k = self.in_ch * self.kernel * self.kernel;
            let mut gw = self
                .weight
                .grad
                .view_mut()
                .into_shape_with_order((self.out_ch, k))
                .expect("contiguous grad");
            general_mat_mul(1.0, &dy2, &cols.t(), 1.0, &mut gw);
            let db: Array1<f32> = dy2.sum_axis(ndarray::Axis(1));
            let gb = self.bias.grad.as_slice_mut().expect("contiguous");
            for (g, d) in gb.iter_mut().zip(db.iter()) {
                *g += d;
            }
        }
        let mut dcols = Array2::<f32>::zeros(cols.dim());
        general_mat_mul(1.0, &self.weight_matrix().t(), &dy2, 0.0, &mut dcols);
        let (_, _, hp, wp) = cache.padded.dim();
        let dpadded = col2im(&dcols, n, self.in_ch, hp, wp, self.kernel, self.stride, oh, ow);
        unpad(&dpadded, self.pad, self.pad_mode, cache.in_hw)
    }
}

pub(crate) fn pad(x: &Array4<f32>, p: usize, mode: PadMode) -> Array4<f32> {
    if p == 0 {
        return x.as_standard_layout().into_owned();
    }
    let (n, c, h, w) = x.dim();
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let mut out = Array4::<f32>::zeros((n, c, hp, wp));
    let xs = x.as_standard_layout();
    let src = xs.as_slice().expect("standard layout");
    let dst = out.as_slice_mut().expect("standard layout");
    for plane in 0..n * c {
        let s = &src[plane * h * w..(plane + 1) * h * w];
        let d = &mut dst[plane * hp * wp..(plane + 1) * hp * wp];
        for i in 0..hp {
            let si = match mode {
                PadMode::Zero => {
                    if i < p || i >= h + p {
                        continue;
                    }
                    i - p
                }
                PadMode::Replicate => i.saturating_sub(p).min(h - 1),
            };
            let row = &s[si * w..(si + 1) * w];
            let drow = &mut d[i * wp..(i + 1) * wp];
            drow[p..p + w].copy_from_slice(row);
            if mode == PadMode::Replicate {
                let (first, last) = (row[0], row[w - 1]);
                drow[..p].fill(first);
                drow[p + w..].fill(last);
            }
        }
    }
    out
}

/// Adjoint of [`pad`]: folds the gradient of the padded border back onto the interior.
pub(crate) fn unpad(dp: &Array4<f32>, p: usize, mode: PadMode, hw: (usize, usize)) -> Array4<f32> {
    if p == 0 {
        return dp.clone();
    }
    let (n, c, hp, wp) = dp.dim();
    let (h, w) = hw;
    let mut out = Array4::<f32>::zeros((n, c, h, w));
    let src = dp.as_slice().expect("standard layout");
    let dst = out.as_slice_mut().expect("standard layout");
    for plane in 0..n * c {
        let s = &src[plane * hp * wp..(plane + 1) * hp * wp];
        let d = &mut dst[plane * h * w..(plane + 1) * h * w];
        match mode {
            PadMode::Zero => {
                for i in 0..h {
                    d[i * w..(i + 1) * w].copy_from_slice(&s[(i + p) * wp + p..(i + p) * wp + p + w]);
                }
            }
            PadMode::Replicate => {
                for i in 0..hp {
                    let di = i.saturating_sub(p).min(h - 1);
                    for j in 0..wp {
                        let dj = j.saturating_sub(p).min(w - 1);
                        d[di * w + dj] += s[i * wp + j];
                    }
                }
            }
        }
    }
    out
}

fn im2col(xp: &Array4<f32>, k: usize, stride: usize, oh: usize, ow: usize) -> Array2<f32> {
    let (n, c, hp, wp) = xp.dim();
    let hw = oh * ow;
    let ncols = n * hw;
    let mut cols = Array2::<f32>::zeros((c * k * k, ncols));
    let xs = xp.as_slice().expect("standard layout");
    let cs = cols.as_slice_mut().expect("standard layout");
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let dst_row = &mut cs[row * ncols..(row + 1) * ncols];
                for b in 0..n {
                    let base = (b * c + ch) * hp * wp;
                    for r in 0..oh {
                        let src = base + (r * stride + ki) * wp + kj;
                        let d = &mut dst_row[b * hw + r * ow..b * hw + (r + 1) * ow];
                        if stride == 1 {
                            d.copy_from_slice(&xs[src..src + ow]);
                        } else {
                            for (o, v) in d.iter_mut().enumerate() {
                                *v = xs[src + o * stride];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &Array2<f32>,
    n: usize,
    c: usize,
    hp: usize,
    wp: usize,
    k: usize,
    stride: usize,
    oh: usize,
    ow: usize,
) -> Array4<f32> {
    let hw = oh * ow;
    let ncols = n * hw;
    let mut out = Array4::<f32>::zeros((n, c, hp, wp));
    let cs = cols.as_slice().expect("standard layout");
    let xs = out.as_slice_mut().expect("standard layout");
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let src_row = &cs[row * ncols..(row + 1) * ncols];
                for b in 0..n {
                    let base = (b * c + ch) * hp * wp;
                    for r in 0..oh {
                        let dst = base + (r * stride + ki) * wp + kj;
                        let s = &src_row[b * hw + r * ow..b * hw + (r + 1) * ow];
                        if stride == 1 {
                            for (o, v) in xs[dst..dst + ow].iter_mut().zip(s) {
                                *o += v;
                            }
                        } else {
                            for (o, v) in s.iter().enumerate() {
                                xs[dst + o * stride] += v;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// (C, N*H*W) matrix -> (N, C, H, W) tensor, optionally adding a per-channel bias.
fn from_channel_major(m: &Array2<f32>, n: usize, h: usize, w: usize, bias: Option<&[f32]>) -> Array4<f32> {
    let c = m.nrows();
    let hw = h * w;
    let mut y = Array4::<f32>::zeros((n, c, h, w));
    let ms = m.as_slice().expect("standard layout");
    let ys = y.as_slice_mut().expect("standard layout");
    for ch in 0..c {
        let b = bias.map_or(0.0, |b| b[ch]);
        for img in 0..n {
            let src = &ms[ch * n * hw + img * hw..ch * n * hw + (img + 1) * hw];
            let dst = &mut ys[(img * c + ch) * hw..(img * c + ch + 1) * hw];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s + b;
            }
        }
    }
    y
}

fn to_channel_major(x: &Array4<f32>) -> Array2<f32> {
    let (n, c, h, w) = x.dim();
    let hw = h * w;
    let xs = x.as_standard_layout();
    let src = xs.as_slice().expect("standard layout");
    let mut m = Array2::<f32>::zeros((c, n * hw));
    let ms = m.as_slice_mut().expect("standard layout");
    for img in 0..n {
        for ch in 0..c {
            ms[ch * n * hw + img * hw..ch * n * hw + (img + 1) * hw]
                .copy_from_slice(&src[(img * c + ch) * hw..(img * c + ch + 1) * hw]);
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(x: &Array4<f32>, conv: &Conv2d) -> Array4<f32> {
        let (n, _, h, w) = x.dim();
        let xp = pad(x, conv.pad, conv.pad_mode);
        let (oh, ow) = conv.output_hw(h, w);
        let wt = &conv.weight.value;
        let mut y = Array4::<f32>::zeros((n, conv.out_ch, oh, ow));
        for b in 0..n {
            for co in 0..conv.out_ch {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = conv.bias.value[[co]];
                        for ci in 0..conv.in_ch {
                            for ki in 0..conv.kernel {
                                for kj in 0..conv.kernel {
                                    acc += wt[[co, ci, ki, kj]]
                                        * xp[[b, ci, i * conv.stride + ki, j * conv.stride + kj]];
                                }
                            }
                        }
                        y[[b, co, i, j]] = acc;
                    }
                }
            }
        }
        y
    }

    fn random_input(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize)) -> Array4<f32> {
        let normal = Normal::new(0.0f32, 1.0).unwrap();
        Array4::from_shape_simple_fn(shape, || normal.sample(rng))
    }

    #[test]
    fn matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(k, s, p, mode) in &[
            (3, 1, 1, PadMode::Zero),
            (3, 1, 1, PadMode::Replicate),
            (4, 2, 1, PadMode::Zero),
            (4, 1, 0, PadMode::Zero),
        ] {
            let mut conv = Conv2d::new("c", 2, 3, k, s, p, mode, 0.5, &mut rng);
            conv.bias.value.fill(0.25);
            let x = random_input(&mut rng, (2, 2, 6, 6));
            let (y, _) = conv.forward(&x);
            let expected = naive_conv(&x, &conv);
            for (a, b) in y.iter().zip(expected.iter()) {
                assert!((a - b).abs() < 1e-4, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn replicate_pad_repeats_border() {
        let x = Array4::from_shape_vec((1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = pad(&x, 1, PadMode::Replicate);
        let got: Vec<f32> = p.iter().copied().collect();
        assert_eq!(
            got,
            vec![1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
    }

    // Finite differences on a scalar objective sum(y * r) in f32; loose tolerance.
    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(k, s, p, mode) in &[(3, 1, 1, PadMode::Replicate), (4, 2, 1, PadMode::Zero)] {
            let mut conv = Conv2d::new("c", 2, 2, k, s, p, mode, 0.5, &mut rng);
            let x = random_input(&mut rng, (1, 2, 4, 4));
            let (y, cache) = conv.forward(&x);
            let r = random_input(&mut rng, y.dim());
            let dx = conv.backward(cache, &r, true);
            let objective = |conv: &Conv2d, x: &Array4<f32>| -> f64 {
                let (y, _) = conv.forward(x);
                y.iter().zip(r.iter()).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
            };
            let eps = 1e-2f32;
            for idx in 0..x.len() {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp.as_slice_mut().unwrap()[idx] += eps;
                xm.as_slice_mut().unwrap()[idx] -= eps;
                let fd = (objective(&conv, &xp) - objective(&conv, &xm)) / (2.0 * eps as f64);
                let an = dx.as_slice().unwrap()[idx] as f64;
                assert!((fd - an).abs() < 1e-2 * (1.0 + fd.abs()), "dx {fd} vs {an}");
            }
            let gw = conv.weight.grad.clone();
            for idx in 0..gw.len() {
                let mut cp = conv.clone();
                let mut cm = conv.clone();
                cp.weight.value.as_slice_mut().unwrap()[idx] += eps;
                cm.weight.value.as_slice_mut().unwrap()[idx] -= eps;
                let fd = (objective(&cp, &x) - objective(&cm, &x)) / (2.0 * eps as f64);
                let an = gw.as_slice().unwrap()[idx] as f64;
                assert!((fd - an).abs() < 1e-2 * (1.0 + fd.abs()), "dw {fd} vs {an}");
            }
        }
    }
}
