//! Layer primitives with explicit forward caches and hand-written backward passes.
//!
//! Every layer caches what its backward pass needs during `forward`; calling
//! `backward` without a cached forward is an error. Parameter gradients are
//! accumulated into [`Param::grad`], which stays `None` for parameters that
//! never received a gradient (frozen sub-graphs).

use rand::Rng;

use super::scalar::Scalar;
use super::tensor::{gemm, Op, Tensor};
use crate::error::{Error, Result};
use crate::exec;

/// Samples per partial weight-gradient accumulation in convolutions. Fixed so
/// the reduction order is independent of the execution mode.
const CONV_GRAD_CHUNK: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    /// Batch-norm gain or shift; excluded from weight decay.
    Norm,
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub kind: ParamKind,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>, kind: ParamKind) -> Self {
        Self {
            value,
            grad: None,
            kind,
        }
    }

    pub fn accumulate(&mut self, g: Tensor<T>) {
        match &mut self.grad {
            Some(acc) => acc.add_assign(&g),
            None => self.grad = Some(g),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn uniform<T: Scalar, R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::lit(rng.gen_range(-bound..=bound)))
        .collect();
    Tensor::from_vec(shape, data).expect("shape")
}

fn expect_rank(x: &Tensor<impl Scalar>, rank: usize, who: &str) -> Result<()> {
    if x.shape().len() != rank {
        return Err(Error::Shape(format!(
            "{who} expects a rank-{rank} input, got {:?}",
            x.shape()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Convolution

/// Square-kernel, stride-1, zero-padded ("same") 2-D convolution without bias.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    input: Option<Tensor<T>>,
}

fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, k: usize, cols: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let di = ki as isize - pad;
                let dj = kj as isize - pad;
                for i in 0..h {
                    let si = i as isize + di;
                    let out = &mut dst[i * w..(i + 1) * w];
                    if si < 0 || si >= h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[si as usize * w..(si as usize + 1) * w];
                    for (j, o) in out.iter_mut().enumerate() {
                        let sj = j as isize + dj;
                        *o = if sj < 0 || sj >= w as isize {
                            T::zero()
                        } else {
                            src[sj as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, k: usize, x: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    x.fill(T::zero());
    for ci in 0..c {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                let di = ki as isize - pad;
                let dj = kj as isize - pad;
                for i in 0..h {
                    let si = i as isize + di;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[si as usize * w..(si as usize + 1) * w];
                    let s = &src[i * w..(i + 1) * w];
                    for (j, &v) in s.iter().enumerate() {
                        let sj = j as isize + dj;
                        if sj >= 0 && sj < w as isize {
                            dst[sj as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Conv2d<T> {
    pub fn new<R: Rng>(in_ch: usize, out_ch: usize, kernel: usize, rng: &mut R) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let bound = (6.0 / fan_in).sqrt();
        Self {
            weight: Param::new(
                uniform(&[out_ch, in_ch, kernel, kernel], bound, rng),
                ParamKind::Weight,
            ),
            in_ch,
            out_ch,
            kernel,
            input: None,
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.value.len()
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        expect_rank(x, 4, "conv2d")?;
        let (b, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        if c != self.in_ch {
            return Err(Error::Shape(format!(
                "conv2d expects {} input channels, got {c}",
                self.in_ch
            )));
        }
        let (o, k) = (self.out_ch, self.kernel);
        let hw = h * w;
        let ckk = c * k * k;
        let mut y = Tensor::zeros(&[b, o, h, w]);
        let weight = self.weight.value.data();
        let xs = x.data();
        exec::for_each_chunk_mut(y.data_mut(), o * hw, |bi, out| {
            let mut cols = vec![T::zero(); ckk * hw];
            im2col(&xs[bi * c * hw..(bi + 1) * c * hw], c, h, w, k, &mut cols);
            gemm(Op::N, Op::N, o, hw, ckk, T::one(), weight, &cols, T::zero(), out);
        });
        self.input = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.take().ok_or(Error::NoForward("conv2d"))?;
        let (b, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (o, k) = (self.out_ch, self.kernel);
        let hw = h * w;
        let ckk = c * k * k;
        let weight = self.weight.value.data();
        let xs = x.data();
        let dys = dy.data();
        let n_chunks = b.div_ceil(CONV_GRAD_CHUNK);
        let partials = exec::map_range(n_chunks, |ch| {
            let start = ch * CONV_GRAD_CHUNK;
            let end = (start + CONV_GRAD_CHUNK).min(b);
            let mut dw = vec![T::zero(); o * ckk];
            let mut dx = vec![T::zero(); (end - start) * c * hw];
            let mut cols = vec![T::zero(); ckk * hw];
            let mut dcols = vec![T::zero(); ckk * hw];
            for (local, bi) in (start..end).enumerate() {
                let dyb = &dys[bi * o * hw..(bi + 1) * o * hw];
                im2col(&xs[bi * c * hw..(bi + 1) * c * hw], c, h, w, k, &mut cols);
                gemm(Op::N, Op::T, o, ckk, hw, T::one(), dyb, &cols, T::one(), &mut dw);
                gemm(Op::T, Op::N, ckk, hw, o, T::one(), weight, dyb, T::zero(), &mut dcols);
                col2im(
                    &dcols,
                    c,
                    h,
                    w,
                    k,
                    &mut dx[local * c * hw..(local + 1) * c * hw],
                );
            }
            (dw, dx)
        });
        let mut dw_total = vec![T::zero(); o * ckk];
        let mut dx_all = Vec::with_capacity(b * c * hw);
        for (dw, dx) in partials {
            for (a, v) in dw_total.iter_mut().zip(dw) {
                *a += v;
            }
            dx_all.extend(dx);
        }
        self.weight
            .accumulate(Tensor::from_vec(&[o, c, k, k], dw_total)?);
        Tensor::from_vec(&[b, c, h, w], dx_all)
    }
}

// ---------------------------------------------------------------------------
// Batch normalization

#[derive(Debug, Clone)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    momentum: f64,
    eps: f64,
    cache: Option<BnCache<T>>,
}

#[derive(Debug, Clone)]
struct BnCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    train: bool,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(Tensor::filled(&[channels], T::one()), ParamKind::Norm),
            beta: Param::new(Tensor::zeros(&[channels]), ParamKind::Norm),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::filled(&[channels], T::one()),
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    pub fn param_count(&self) -> usize {
        self.gamma.value.len() + self.beta.value.len()
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        expect_rank(x, 4, "batchnorm")?;
        let (b, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let hw = h * w;
        let n = b * hw;
        let xs = x.data();
        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        match mode {
            Mode::Train => {
                for ci in 0..c {
                    let mut s = 0.0;
                    for bi in 0..b {
                        let off = (bi * c + ci) * hw;
                        s += xs[off..off + hw].iter().map(|v| v.as_f64()).sum::<f64>();
                    }
                    let m = s / n as f64;
                    let mut ss = 0.0;
                    for bi in 0..b {
                        let off = (bi * c + ci) * hw;
                        ss += xs[off..off + hw]
                            .iter()
                            .map(|v| (v.as_f64() - m).powi(2))
                            .sum::<f64>();
                    }
                    mean[ci] = m;
                    var[ci] = ss / n as f64;
                }
                let mom = self.momentum;
                let unbias = if n > 1 { n as f64 / (n - 1) as f64 } else { 1.0 };
                for ci in 0..c {
                    let rm = self.running_mean.data()[ci].as_f64();
                    let rv = self.running_var.data()[ci].as_f64();
                    self.running_mean.data_mut()[ci] = T::lit((1.0 - mom) * rm + mom * mean[ci]);
                    self.running_var.data_mut()[ci] =
                        T::lit((1.0 - mom) * rv + mom * var[ci] * unbias);
                }
            }
            Mode::Eval => {
                for ci in 0..c {
                    mean[ci] = self.running_mean.data()[ci].as_f64();
                    var[ci] = self.running_var.data()[ci].as_f64();
                }
            }
        }
        let inv_std: Vec<T> = var
            .iter()
            .map(|v| T::lit(1.0 / (v + self.eps).sqrt()))
            .collect();
        let mean_t: Vec<T> = mean.iter().map(|&m| T::lit(m)).collect();
        let mut xhat = Tensor::zeros(x.shape());
        let mut y = Tensor::zeros(x.shape());
        let (g, be) = (self.gamma.value.data(), self.beta.value.data());
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * hw;
                for i in off..off + hw {
                    let xh = (xs[i] - mean_t[ci]) * inv_std[ci];
                    xhat.data_mut()[i] = xh;
                    y.data_mut()[i] = g[ci] * xh + be[ci];
                }
            }
        }
        self.cache = Some(BnCache {
            xhat,
            inv_std,
            train: mode == Mode::Train,
        });
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.take().ok_or(Error::NoForward("batchnorm"))?;
        let (b, c, h, w) = (dy.dim(0), dy.dim(1), dy.dim(2), dy.dim(3));
        let hw = h * w;
        let n = T::lit((b * hw) as f64);
        let dys = dy.data();
        let xh = cache.xhat.data();
        let g = self.gamma.value.data();
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * hw;
                for i in off..off + hw {
                    dgamma[ci] += dys[i] * xh[i];
                    dbeta[ci] += dys[i];
                }
            }
        }
        let mut dx = Tensor::zeros(dy.shape());
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * hw;
                let scale = g[ci] * cache.inv_std[ci];
                for i in off..off + hw {
                    dx.data_mut()[i] = if cache.train {
                        scale * (dys[i] - dbeta[ci] / n - xh[i] * dgamma[ci] / n)
                    } else {
                        scale * dys[i]
                    };
                }
            }
        }
        self.gamma.accumulate(Tensor::from_vec(&[c], dgamma)?);
        self.beta.accumulate(Tensor::from_vec(&[c], dbeta)?);
        Ok(dx)
    }
}

// ---------------------------------------------------------------------------
// Elementwise and pooling

#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl Relu {
    pub fn forward<T: Scalar>(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let mut y = x.clone();
        let mut mask = Vec::with_capacity(x.len());
        for v in y.data_mut() {
            let keep = *v > T::zero();
            if !keep {
                *v = T::zero();
            }
            mask.push(keep);
        }
        self.mask = Some(mask);
        y
    }

    pub fn backward<T: Scalar>(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let mask = self.mask.take().ok_or(Error::NoForward("relu"))?;
        let mut dx = dy.clone();
        for (v, keep) in dx.data_mut().iter_mut().zip(mask) {
            if !keep {
                *v = T::zero();
            }
        }
        Ok(dx)
    }
}

/// 2×2 average pooling with stride 2; trailing odd rows/columns are dropped.
#[derive(Debug, Clone, Default)]
pub struct AvgPool2 {
    in_shape: Option<Vec<usize>>,
}

impl AvgPool2 {
    pub fn forward<T: Scalar>(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        expect_rank(x, 4, "avgpool")?;
        let (b, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (oh, ow) = (h / 2, w / 2);
        let mut y = Tensor::zeros(&[b, c, oh, ow]);
        let quarter = T::lit(0.25);
        let xs = x.data();
        for p in 0..b * c {
            let src = &xs[p * h * w..(p + 1) * h * w];
            let dst = &mut y.data_mut()[p * oh * ow..(p + 1) * oh * ow];
            for i in 0..oh {
                for j in 0..ow {
                    let r0 = 2 * i * w + 2 * j;
                    let r1 = r0 + w;
                    dst[i * ow + j] = (src[r0] + src[r0 + 1] + src[r1] + src[r1 + 1]) * quarter;
                }
            }
        }
        self.in_shape = Some(x.shape().to_vec());
        Ok(y)
    }

    pub fn backward<T: Scalar>(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = self.in_shape.take().ok_or(Error::NoForward("avgpool"))?;
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let (oh, ow) = (h / 2, w / 2);
        let mut dx = Tensor::zeros(&shape);
        let quarter = T::lit(0.25);
        for p in 0..b * c {
            let src = &dy.data()[p * oh * ow..(p + 1) * oh * ow];
            let dst = &mut dx.data_mut()[p * h * w..(p + 1) * h * w];
            for i in 0..oh {
                for j in 0..ow {
                    let g = src[i * ow + j] * quarter;
                    let r0 = 2 * i * w + 2 * j;
                    let r1 = r0 + w;
                    dst[r0] = g;
                    dst[r0 + 1] = g;
                    dst[r1] = g;
                    dst[r1 + 1] = g;
                }
            }
        }
        Ok(dx)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlobalPoolKind {
    Mean,
    MeanPlusMax,
}

/// Averages over the mel axis, then reduces the time axis by mean (and max).
/// Input `[B, C, mels, frames]`, output `[B, C]`.
#[derive(Debug, Clone)]
pub struct GlobalPool {
    kind: GlobalPoolKind,
    cache: Option<(Vec<usize>, Vec<usize>)>,
}

impl GlobalPool {
    pub fn new(kind: GlobalPoolKind) -> Self {
        Self { kind, cache: None }
    }

    pub fn forward<T: Scalar>(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        expect_rank(x, 4, "global pool")?;
        let (b, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let inv_h = T::lit(1.0 / h as f64);
        let inv_w = T::lit(1.0 / w as f64);
        let mut y = Tensor::zeros(&[b, c]);
        let mut argmax = vec![0usize; b * c];
        let mut col = vec![T::zero(); w];
        for p in 0..b * c {
            let src = &x.data()[p * h * w..(p + 1) * h * w];
            col.fill(T::zero());
            for i in 0..h {
                for (j, acc) in col.iter_mut().enumerate() {
                    *acc += src[i * w + j];
                }
            }
            let mut mean = T::zero();
            let mut best = 0;
            for j in 0..w {
                col[j] *= inv_h;
                mean += col[j];
                if col[j] > col[best] {
                    best = j;
                }
            }
            mean *= inv_w;
            y.data_mut()[p] = match self.kind {
                GlobalPoolKind::Mean => mean,
                GlobalPoolKind::MeanPlusMax => mean + col[best],
            };
            argmax[p] = best;
        }
        self.cache = Some((x.shape().to_vec(), argmax));
        Ok(y)
    }

    pub fn backward<T: Scalar>(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let (shape, argmax) = self.cache.take().ok_or(Error::NoForward("global pool"))?;
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let inv_h = T::lit(1.0 / h as f64);
        let inv_w = T::lit(1.0 / w as f64);
        let mut dx = Tensor::zeros(&shape);
        for p in 0..b * c {
            let g = dy.data()[p];
            let dst = &mut dx.data_mut()[p * h * w..(p + 1) * h * w];
            for i in 0..h {
                for j in 0..w {
                    let mut d = g * inv_w;
                    if self.kind == GlobalPoolKind::MeanPlusMax && j == argmax[p] {
                        d += g;
                    }
                    dst[i * w + j] = d * inv_h;
                }
            }
        }
        Ok(dx)
    }
}

// ---------------------------------------------------------------------------
// Dense

#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = (1.0 / in_dim as f64).sqrt();
        Self {
            weight: Param::new(uniform(&[out_dim, in_dim], bound, rng), ParamKind::Weight),
            bias: Param::new(Tensor::zeros(&[out_dim]), ParamKind::Bias),
            input: None,
        }
    }

    pub fn zeroed(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: Param::new(Tensor::zeros(&[out_dim, in_dim]), ParamKind::Weight),
            bias: Param::new(Tensor::zeros(&[out_dim]), ParamKind::Bias),
            input: None,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.dim(1)
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.dim(0)
    }

    pub fn param_count(&self) -> usize {
        self.weight.value.len() + self.bias.value.len()
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.apply(x)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    /// Forward pass without recording a cache.
    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        expect_rank(x, 2, "linear")?;
        let (b, i) = (x.dim(0), x.dim(1));
        if i != self.in_dim() {
            return Err(Error::Shape(format!(
                "linear expects input width {}, got {i}",
                self.in_dim()
            )));
        }
        let o = self.out_dim();
        let mut y = Tensor::zeros(&[b, o]);
        for r in 0..b {
            y.data_mut()[r * o..(r + 1) * o].copy_from_slice(self.bias.value.data());
        }
        gemm(
            Op::N,
            Op::T,
            b,
            o,
            i,
            T::one(),
            x.data(),
            self.weight.value.data(),
            T::one(),
            y.data_mut(),
        );
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.take().ok_or(Error::NoForward("linear"))?;
        let (b, i) = (x.dim(0), x.dim(1));
        let o = self.out_dim();
        let mut dw = Tensor::zeros(&[o, i]);
        gemm(Op::T, Op::N, o, i, b, T::one(), dy.data(), x.data(), T::zero(), dw.data_mut());
        let mut db = Tensor::zeros(&[o]);
        for r in 0..b {
            for (acc, &g) in db.data_mut().iter_mut().zip(dy.row(r)) {
                *acc += g;
            }
        }
        let mut dx = Tensor::zeros(&[b, i]);
        gemm(
            Op::N,
            Op::N,
            b,
            i,
            o,
            T::one(),
            dy.data(),
            self.weight.value.data(),
            T::zero(),
            dx.data_mut(),
        );
        self.weight.accumulate(dw);
        self.bias.accumulate(db);
        Ok(dx)
    }
}

/// Row-wise L2 normalization.
#[derive(Debug, Clone, Default)]
pub struct L2Normalize<T> {
    cache: Option<(Tensor<T>, Vec<T>)>,
}

const NORM_FLOOR: f64 = 1e-12;

impl<T: Scalar> L2Normalize<T> {
    pub fn new() -> Self {
        Self { cache: None }
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let (b, d) = (x.dim(0), x.dim(1));
        let mut y = x.clone();
        let mut norms = Vec::with_capacity(b);
        for r in 0..b {
            let row = &mut y.data_mut()[r * d..(r + 1) * d];
            let n = row
                .iter()
                .map(|v| *v * *v)
                .sum::<T>()
                .sqrt()
                .max(T::lit(NORM_FLOOR));
            for v in row.iter_mut() {
                *v = *v / n;
            }
            norms.push(n);
        }
        self.cache = Some((y.clone(), norms));
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let (y, norms) = self.cache.take().ok_or(Error::NoForward("l2 normalize"))?;
        let (b, d) = (y.dim(0), y.dim(1));
        let mut dx = Tensor::zeros(&[b, d]);
        for r in 0..b {
            let yr = y.row(r);
            let gr = dy.row(r);
            let dot: T = yr.iter().zip(gr).map(|(&a, &g)| a * g).sum();
            let out = &mut dx.data_mut()[r * d..(r + 1) * d];
            for j in 0..d {
                out[j] = (gr[j] - yr[j] * dot) / norms[r];
            }
        }
        Ok(dx)
    }
}
