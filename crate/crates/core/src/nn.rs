//! Layer primitives with hand-written backward passes.
//!
//! Activations are NHWC: a [`FeatureMap`] stores one row per spatial
//! position, `(b * h + y) * w + x`, and one column per channel, so a
//! convolution is an im2col followed by a single matrix product.

use ndarray::{Array2, Axis, Zip};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::rng::Rng;

/// A trainable array and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Array2<f32>,
    pub grad: Array2<f32>,
}

impl Param {
    pub fn new(value: Array2<f32>) -> Self {
        let grad = Array2::zeros(value.raw_dim());
        Param { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// He-normal initialization for a `(fan_in, fan_out)` weight matrix.
pub fn he_normal(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Array2<f32> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_fn((fan_in, fan_out), |_| dist.sample(rng) as f32)
}

/// Uniform `±1/sqrt(fan_in)` initialization, used for output layers.
pub fn lecun_uniform(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Array2<f32> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Array2::from_shape_fn((fan_in, fan_out), |_| rng.gen_range(-bound..bound) as f32)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Array2<f32>,
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.data.ncols()
    }
}

fn im2col(x: &FeatureMap, k: usize, s: usize, p: usize, ho: usize, wo: usize) -> Array2<f32> {
    let c = x.channels();
    let kc = k * k * c;
    let mut cols = Array2::<f32>::zeros((x.n * ho * wo, kc));
    let src = x.data.as_slice().expect("standard layout");
    let dst = cols.as_slice_mut().expect("standard layout");
    for b in 0..x.n {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((b * ho + oy) * wo + ox) * kc;
                for ky in 0..k {
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= x.h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * s + kx) as isize - p as isize;
                        if ix < 0 || ix >= x.w as isize {
                            continue;
                        }
                        let so = ((b * x.h + iy as usize) * x.w + ix as usize) * c;
                        let d = row + (ky * k + kx) * c;
                        dst[d..d + c].copy_from_slice(&src[so..so + c]);
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(cols: &Array2<f32>, n: usize, h: usize, w: usize, c: usize, k: usize, s: usize, p: usize, ho: usize, wo: usize) -> Array2<f32> {
    let kc = k * k * c;
    let mut out = Array2::<f32>::zeros((n * h * w, c));
    let src = cols.as_slice().expect("standard layout");
    let dst = out.as_slice_mut().expect("standard layout");
    for b in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((b * ho + oy) * wo + ox) * kc;
                for ky in 0..k {
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * s + kx) as isize - p as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let d = ((b * h + iy as usize) * w + ix as usize) * c;
                        let so = row + (ky * k + kx) * c;
                        for (o, v) in dst[d..d + c].iter_mut().zip(&src[so..so + c]) {
                            *o += v;
                        }
                    }
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
struct ConvCache {
    cols: Array2<f32>,
    n: usize,
    h: usize,
    w: usize,
}

/// 2-D convolution, weight laid out as `(k * k * cin, cout)`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub cin: usize,
    pub cout: usize,
    pub weight: Param,
    pub bias: Param,
    cache: Option<ConvCache>,
}

impl Conv2d {
    pub fn new(cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize, rng: &mut Rng) -> Self {
        Conv2d {
            kernel,
            stride,
            pad,
            cin,
            cout,
            weight: Param::new(he_normal(rng, kernel * kernel * cin, cout)),
            bias: Param::new(Array2::zeros((1, cout))),
            cache: None,
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let f = |x: usize| (x + 2 * self.pad - self.kernel) / self.stride + 1;
        (f(h), f(w))
    }

    fn compute(&self, x: &FeatureMap) -> (FeatureMap, Array2<f32>) {
        let (ho, wo) = self.out_size(x.h, x.w);
        let cols = if self.kernel == 1 && self.stride == 1 && self.pad == 0 {
            x.data.clone()
        } else {
            im2col(x, self.kernel, self.stride, self.pad, ho, wo)
        };
        let mut out = cols.dot(&self.weight.value);
        out += &self.bias.value;
        (
            FeatureMap {
                n: x.n,
                h: ho,
                w: wo,
                data: out,
            },
            cols,
        )
    }

    pub fn forward(&self, x: &FeatureMap) -> FeatureMap {
        self.compute(x).0
    }

    /// Forward pass that keeps the im2col buffer for [`Conv2d::backward`].
    pub fn forward_train(&mut self, x: &FeatureMap) -> FeatureMap {
        let (y, cols) = self.compute(x);
        self.cache = Some(ConvCache { cols, n: x.n, h: x.h, w: x.w });
        y
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, dy: &Array2<f32>) -> FeatureMap {
        let cache = self.cache.take().expect("backward without a training forward pass");
        self.weight.grad += &cache.cols.t().dot(dy);
        self.bias.grad += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        let dcols = dy.dot(&self.weight.value.t());
        let (ho, wo) = self.out_size(cache.h, cache.w);
        let data = if self.kernel == 1 && self.stride == 1 && self.pad == 0 {
            dcols
        } else {
            col2im(&dcols, cache.n, cache.h, cache.w, self.cin, self.kernel, self.stride, self.pad, ho, wo)
        };
        FeatureMap {
            n: cache.n,
            h: cache.h,
            w: cache.w,
            data,
        }
    }

    pub fn params_mut(&mut self) -> [(&'static str, &mut Param); 2] {
        [("weight", &mut self.weight), ("bias", &mut self.bias)]
    }

    pub fn params(&self) -> [(&'static str, &Param); 2] {
        [("weight", &self.weight), ("bias", &self.bias)]
    }
}

/// Fully connected layer, weight laid out as `(in, out)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    input: Option<Array2<f32>>,
}

impl Linear {
    pub fn new(weight: Array2<f32>) -> Self {
        let out = weight.ncols();
        Linear {
            weight: Param::new(weight),
            bias: Param::new(Array2::zeros((1, out))),
            input: None,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.ncols()
    }

    pub fn forward(&self, x: &Array2<f32>) -> Array2<f32> {
        let mut y = x.dot(&self.weight.value);
        y += &self.bias.value;
        y
    }

    pub fn forward_train(&mut self, x: &Array2<f32>) -> Array2<f32> {
        self.input = Some(x.clone());
        self.forward(x)
    }

    pub fn backward(&mut self, dy: &Array2<f32>) -> Array2<f32> {
        let x = self.input.take().expect("backward without a training forward pass");
        self.weight.grad += &x.t().dot(dy);
        self.bias.grad += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        dy.dot(&self.weight.value.t())
    }

    pub fn params_mut(&mut self) -> [(&'static str, &mut Param); 2] {
        [("weight", &mut self.weight), ("bias", &mut self.bias)]
    }

    pub fn params(&self) -> [(&'static str, &Param); 2] {
        [("weight", &self.weight), ("bias", &self.bias)]
    }
}

/// ReLU that lets NaN through, so corrupted inputs surface downstream.
pub fn relu_inplace(x: &mut Array2<f32>) {
    x.mapv_inplace(|v| if v <= 0.0 { 0.0 } else { v });
}

/// Zeroes `grad` where the post-activation output was not positive.
pub fn relu_backward(grad: &mut Array2<f32>, output: &Array2<f32>) {
    Zip::from(grad).and(output).for_each(|g, &o| {
        if o <= 0.0 {
            *g = 0.0;
        }
    });
}

/// Global average pooling over the spatial positions: `(n*h*w, c) -> (n, c)`.
pub fn global_avg_pool(x: &FeatureMap) -> Array2<f32> {
    let hw = x.h * x.w;
    let c = x.channels();
    let mut out = Array2::<f32>::zeros((x.n, c));
    for b in 0..x.n {
        let block = x.data.slice(ndarray::s![b * hw..(b + 1) * hw, ..]);
        out.row_mut(b).assign(&block.sum_axis(Axis(0)));
    }
    out /= hw as f32;
    out
}

pub fn global_avg_pool_backward(dz: &Array2<f32>, h: usize, w: usize) -> FeatureMap {
    let n = dz.nrows();
    let hw = h * w;
    let scale = 1.0 / hw as f32;
    let mut data = Array2::<f32>::zeros((n * hw, dz.ncols()));
    for b in 0..n {
        let row = dz.row(b).mapv(|v| v * scale);
        for r in 0..hw {
            data.row_mut(b * hw + r).assign(&row);
        }
    }
    FeatureMap { n, h, w, data }
}

/// Linear layers with ReLU between them (none after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    activations: Vec<Array2<f32>>,
}

impl Mlp {
    /// `dims = [in, hidden.., out]`; hidden layers He-initialized, output layer LeCun-uniform.
    pub fn new(dims: &[usize], rng: &mut Rng) -> Self {
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| {
                let w = if i == last {
                    lecun_uniform(rng, d[0], d[1])
                } else {
                    he_normal(rng, d[0], d[1])
                };
                Linear::new(w)
            })
            .collect();
        Mlp {
            layers,
            activations: Vec::new(),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim()
    }

    pub fn forward(&self, x: &Array2<f32>) -> Array2<f32> {
        let n = self.layers.len();
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h);
            if i + 1 < n {
                relu_inplace(&mut h);
            }
        }
        h
    }

    /// Activations entering the output layer.
    pub fn penultimate(&self, x: &Array2<f32>) -> Array2<f32> {
        let mut h = x.clone();
        for layer in &self.layers[..self.layers.len() - 1] {
            h = layer.forward(&h);
            relu_inplace(&mut h);
        }
        h
    }

    /// The output layer alone, as a one-layer network over [`Mlp::penultimate`].
    pub fn output_layer(&self) -> Mlp {
        Mlp {
            layers: vec![self.layers.last().expect("non-empty").clone()],
            activations: Vec::new(),
        }
    }

    pub fn set_output_layer(&mut self, out: Mlp) {
        assert_eq!(out.layers.len(), 1, "output layer must be a single linear layer");
        *self.layers.last_mut().expect("non-empty") = out.layers.into_iter().next().expect("one layer");
    }

    pub fn forward_train(&mut self, x: &Array2<f32>) -> Array2<f32> {
        self.activations.clear();
        let n = self.layers.len();
        let mut h = x.clone();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            h = layer.forward_train(&h);
            if i + 1 < n {
                relu_inplace(&mut h);
                self.activations.push(h.clone());
            }
        }
        h
    }

    pub fn backward(&mut self, dy: &Array2<f32>) -> Array2<f32> {
        let mut g = dy.clone();
        for i in (0..self.layers.len()).rev() {
            g = self.layers[i].backward(&g);
            if i > 0 {
                relu_backward(&mut g, &self.activations[i - 1]);
            }
        }
        self.activations.clear();
        g
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (name, p) in layer.params_mut() {
                f(&format!("{prefix}.fc{}.{name}", i + 1), p);
            }
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, p) in layer.params() {
                f(&format!("{prefix}.fc{}.{name}", i + 1), p);
            }
        }
    }
}
