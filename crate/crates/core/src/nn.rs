//! Layers with hand-written backward passes.
//!
//! Every layer caches what its backward pass needs during [`Sequential::forward`];
//! [`Sequential::infer`] runs the same arithmetic without caching and with
//! batch-norm in inference mode. Backward passes accumulate into parameter
//! gradients and leave caches intact, so a cached forward may be differentiated
//! more than once.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Real, Tensor};

/// Batch-norm behaviour.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running averages updated.
    Train,
    /// Running statistics.
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
}

/// A trainable tensor and its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Real> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { value, grad }
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::lit(rng.gen_range(-bound..=bound)))
            .collect();
        Self::new(Tensor::from_vec(shape, data).expect("shape matches"))
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

/// Fully connected layer, `y = x·Wᵀ + b` with `W` stored `out × in`.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Tensor<T>>,
}

impl<T: Real> Linear<T> {
    /// Fan-in uniform initialisation, bound `1/√fan_in` for weights and bias.
    pub fn new(in_features: usize, out_features: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_features as f64).sqrt();
        Self {
            weight: Param::uniform(&[out_features, in_features], bound, rng),
            bias: Param::uniform(&[out_features], bound, rng),
            input: None,
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let (n, fin, fout) = (x.rows(), self.in_features(), self.out_features());
        assert_eq!(x.row_len(), fin, "linear input width");
        let mut y = Tensor::zeros(&[n, fout]);
        let b = self.bias.value.data();
        for i in 0..n {
            y.row_mut(i).copy_from_slice(b);
        }
        let w = self.weight.value.data();
        T::gemm(n, fin, fout, T::one(), x.data(), fin, 1, w, 1, fin, T::one(), y.data_mut(), fout, 1);
        y
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let y = self.infer(x);
        self.input = Some(x.clone());
        y
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let x = self.input.as_ref().expect("linear backward before forward");
        let (n, fin, fout) = (x.rows(), self.in_features(), self.out_features());
        let g = grad.data();
        T::gemm(fout, n, fin, T::one(), g, 1, fout, x.data(), fin, 1, T::one(), self.weight.grad.data_mut(), fin, 1);
        let db = self.bias.grad.data_mut();
        for i in 0..n {
            for (d, &v) in db.iter_mut().zip(&g[i * fout..(i + 1) * fout]) {
                *d += v;
            }
        }
        let mut dx = Tensor::zeros(x.shape());
        T::gemm(n, fout, fin, T::one(), g, fout, 1, self.weight.value.data(), fin, 1, T::zero(), dx.data_mut(), fin, 1);
        dx
    }
}

/// Upper bound on the im2col buffer, in elements, when it is rebuilt in chunks.
const MAX_COLS: usize = 1 << 22;

/// Largest im2col matrix kept from a training forward pass for reuse in backward.
const CACHE_COLS: usize = 1 << 25;

/// Stride-1 convolutions with at most this many output channels skip im2col.
const DIRECT_MAX_COUT: usize = 4;

/// 2-D convolution over NCHW input via im2col and a single matrix multiply per chunk.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub stride: usize,
    pub padding: usize,
    input: Option<Tensor<T>>,
    cols: Option<Vec<T>>,
}

struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn kk(&self) -> usize {
        self.c * self.k * self.k
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    fn chunk(&self) -> usize {
        (MAX_COLS / (self.kk() * self.p()).max(1)).clamp(1, self.n.max(1))
    }

    /// Output columns `[lo, hi)` whose input column `ox·stride + kx − pad` lies
    /// inside the image.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kx).div_ceil(self.stride).min(self.wo);
        let hi = if self.w + self.pad > kx {
            ((self.w + self.pad - kx - 1) / self.stride + 1).min(self.wo)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    /// Fills `cols` (kk × cn·p) for samples `s0..s0+cn`.
    fn im2col<T: Real>(&self, x: &[T], s0: usize, cn: usize, cols: &mut [T]) {
        let (p, ncol) = (self.p(), cn * self.p());
        let img_len = self.c * self.h * self.w;
        for ci in 0..self.c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let r = (ci * self.k + ky) * self.k + kx;
                    let row = &mut cols[r * ncol..(r + 1) * ncol];
                    let (lo, hi) = self.valid_cols(kx);
                    for s in 0..cn {
                        let plane = &x[(s0 + s) * img_len + ci * self.h * self.w..][..self.h * self.w];
                        let dst = &mut row[s * p..(s + 1) * p];
                        for oy in 0..self.ho {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            let out = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                            if iy < 0 || iy >= self.h as isize {
                                out.fill(T::zero());
                                continue;
                            }
                            let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                            out[..lo].fill(T::zero());
                            out[hi..].fill(T::zero());
                            if hi > lo {
                                let first = lo * self.stride + kx - self.pad;
                                if self.stride == 1 {
                                    out[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                                } else {
                                    for (o, &v) in out[lo..hi].iter_mut().zip(src[first..].iter().step_by(self.stride)) {
                                        *o = v;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds `cols` back into the image gradient.
    fn col2im<T: Real>(&self, cols: &[T], s0: usize, cn: usize, dx: &mut [T]) {
        let (p, ncol) = (self.p(), cn * self.p());
        let img_len = self.c * self.h * self.w;
        for ci in 0..self.c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let r = (ci * self.k + ky) * self.k + kx;
                    let row = &cols[r * ncol..(r + 1) * ncol];
                    let (lo, hi) = self.valid_cols(kx);
                    if hi == lo {
                        continue;
                    }
                    let first = lo * self.stride + kx - self.pad;
                    for s in 0..cn {
                        let plane = &mut dx[(s0 + s) * img_len + ci * self.h * self.w..][..self.h * self.w];
                        let src = &row[s * p..(s + 1) * p];
                        for oy in 0..self.ho {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            let line = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                            let g = &src[oy * self.wo + lo..oy * self.wo + hi];
                            for (d, &v) in line[first..].iter_mut().step_by(self.stride).zip(g) {
                                *d += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

impl ConvGeom {
    /// `y += w ⋆ x` for stride 1, one output plane at a time.
    fn direct_forward<T: Real>(&self, x: &[T], w: &[T], cout: usize, y: &mut [T]) {
        let (hw, p) = (self.h * self.w, self.p());
        for s in 0..self.n {
            for co in 0..cout {
                let out = &mut y[(s * cout + co) * p..][..p];
                for ci in 0..self.c {
                    let plane = &x[(s * self.c + ci) * hw..][..hw];
                    for ky in 0..self.k {
                        for kx in 0..self.k {
                            let wv = w[((co * self.c + ci) * self.k + ky) * self.k + kx];
                            let (lo, hi) = self.valid_cols(kx);
                            if hi == lo {
                                continue;
                            }
                            let first = lo + kx - self.pad;
                            for oy in 0..self.ho {
                                let iy = (oy + ky) as isize - self.pad as isize;
                                if iy < 0 || iy >= self.h as isize {
                                    continue;
                                }
                                let src = &plane[iy as usize * self.w + first..][..hi - lo];
                                let dst = &mut out[oy * self.wo + lo..oy * self.wo + hi];
                                for (d, &v) in dst.iter_mut().zip(src) {
                                    *d += wv * v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Weight and input gradients of [`ConvGeom::direct_forward`].
    fn direct_backward<T: Real>(&self, x: &[T], w: &[T], g: &[T], cout: usize, dw: &mut [T], dx: &mut [T]) {
        let (hw, p) = (self.h * self.w, self.p());
        for s in 0..self.n {
            for co in 0..cout {
                let go = &g[(s * cout + co) * p..][..p];
                for ci in 0..self.c {
                    let plane = &x[(s * self.c + ci) * hw..][..hw];
                    let dplane = &mut dx[(s * self.c + ci) * hw..][..hw];
                    for ky in 0..self.k {
                        for kx in 0..self.k {
                            let wi = ((co * self.c + ci) * self.k + ky) * self.k + kx;
                            let wv = w[wi];
                            let (lo, hi) = self.valid_cols(kx);
                            if hi == lo {
                                continue;
                            }
                            let first = lo + kx - self.pad;
                            let mut acc = T::zero();
                            for oy in 0..self.ho {
                                let iy = (oy + ky) as isize - self.pad as isize;
                                if iy < 0 || iy >= self.h as isize {
                                    continue;
                                }
                                let at = iy as usize * self.w + first;
                                let gr = &go[oy * self.wo + lo..oy * self.wo + hi];
                                for ((d, &xv), &gv) in dplane[at..at + hi - lo].iter_mut().zip(&plane[at..at + hi - lo]).zip(gr) {
                                    *d += wv * gv;
                                    acc += xv * gv;
                                }
                            }
                            dw[wi] += acc;
                        }
                    }
                }
            }
        }
    }
}

/// Output size of a convolution along one axis, if the geometry is valid.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

impl<T: Real> Conv2d<T> {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / ((in_channels * kernel * kernel) as f64).sqrt();
        Self {
            weight: Param::uniform(&[out_channels, in_channels, kernel, kernel], bound, rng),
            bias: Param::uniform(&[out_channels], bound, rng),
            stride,
            padding,
            input: None,
            cols: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.value.shape()[2]
    }

    fn geom(&self, x: &Tensor<T>) -> ConvGeom {
        let s = x.shape();
        assert_eq!(s.len(), 4, "conv input must be NCHW");
        assert_eq!(s[1], self.in_channels(), "conv input channels");
        let k = self.kernel();
        let ho = conv_out_len(s[2], k, self.stride, self.padding).expect("conv height");
        let wo = conv_out_len(s[3], k, self.stride, self.padding).expect("conv width");
        ConvGeom {
            n: s[0],
            c: s[1],
            h: s[2],
            w: s[3],
            k,
            stride: self.stride,
            pad: self.padding,
            ho,
            wo,
        }
    }

    fn direct(&self) -> bool {
        self.stride == 1 && self.out_channels() <= DIRECT_MAX_COUT
    }

    fn add_bias(&self, out: &mut Tensor<T>) {
        let cout = self.out_channels();
        let p = out.row_len() / cout;
        let b = self.bias.value.data();
        for (i, plane) in out.data_mut().chunks_mut(p).enumerate() {
            let bv = b[i % cout];
            for v in plane {
                *v += bv;
            }
        }
    }

    /// Copies a `cout × cn·p` product into NCHW rows `s0..s0+cn`.
    fn scatter_rows(tmp: &[T], s0: usize, cn: usize, cout: usize, p: usize, out: &mut [T]) {
        let ncol = cn * p;
        for s in 0..cn {
            for co in 0..cout {
                out[((s0 + s) * cout + co) * p..][..p].copy_from_slice(&tmp[co * ncol + s * p..][..p]);
            }
        }
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let g = self.geom(x);
        let cout = self.out_channels();
        let mut out = Tensor::zeros(&[g.n, cout, g.ho, g.wo]);
        if self.direct() {
            g.direct_forward(x.data(), self.weight.value.data(), cout, out.data_mut());
            self.add_bias(&mut out);
            return out;
        }
        let (kk, p) = (g.kk(), g.p());
        let chunk = g.chunk();
        let mut cols = vec![T::zero(); kk * chunk * p];
        let mut tmp = vec![T::zero(); cout * chunk * p];
        let w = self.weight.value.data();
        let mut s0 = 0;
        while s0 < g.n {
            let cn = chunk.min(g.n - s0);
            let ncol = cn * p;
            g.im2col(x.data(), s0, cn, &mut cols[..kk * ncol]);
            T::gemm(cout, kk, ncol, T::one(), w, kk, 1, &cols[..kk * ncol], ncol, 1, T::zero(), &mut tmp[..cout * ncol], ncol, 1);
            Self::scatter_rows(&tmp, s0, cn, cout, p, out.data_mut());
            s0 += cn;
        }
        self.add_bias(&mut out);
        out
    }

    /// Like [`Conv2d::infer`], keeping the input and, when it fits, the full
    /// im2col matrix for the backward pass.
    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        self.input = Some(x.clone());
        self.cols = None;
        let g = self.geom(x);
        let (kk, p, cout) = (g.kk(), g.p(), self.out_channels());
        let ncol = g.n * p;
        if self.direct() || kk * ncol > CACHE_COLS {
            return self.infer(x);
        }
        let mut cols = vec![T::zero(); kk * ncol];
        g.im2col(x.data(), 0, g.n, &mut cols);
        let mut tmp = vec![T::zero(); cout * ncol];
        T::gemm(cout, kk, ncol, T::one(), self.weight.value.data(), kk, 1, &cols, ncol, 1, T::zero(), &mut tmp, ncol, 1);
        let mut out = Tensor::zeros(&[g.n, cout, g.ho, g.wo]);
        Self::scatter_rows(&tmp, 0, g.n, cout, p, out.data_mut());
        self.add_bias(&mut out);
        self.cols = Some(cols);
        out
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let x = self.input.as_ref().expect("conv backward before forward");
        let g = self.geom(x);
        let cout = self.out_channels();
        let (kk, p) = (g.kk(), g.p());
        let gd = grad.data();
        let db = self.bias.grad.data_mut();
        for (i, plane) in gd.chunks(p).enumerate() {
            db[i % cout] += plane.iter().copied().sum();
        }
        let mut dx = Tensor::zeros(x.shape());
        if self.direct() {
            g.direct_backward(x.data(), self.weight.value.data(), gd, cout, self.weight.grad.data_mut(), dx.data_mut());
            return dx;
        }
        let chunk = if self.cols.is_some() { g.n } else { g.chunk() };
        let mut scratch = Vec::new();
        let mut tmp = vec![T::zero(); cout * chunk * p];
        let mut s0 = 0;
        while s0 < g.n {
            let cn = chunk.min(g.n - s0);
            let ncol = cn * p;
            let cols: &mut [T] = match self.cols.as_mut() {
                Some(c) => c,
                None => {
                    scratch.resize(kk * chunk * p, T::zero());
                    g.im2col(x.data(), s0, cn, &mut scratch[..kk * ncol]);
                    &mut scratch[..kk * ncol]
                }
            };
            for s in 0..cn {
                for co in 0..cout {
                    tmp[co * ncol + s * p..][..p].copy_from_slice(&gd[((s0 + s) * cout + co) * p..][..p]);
                }
            }
            T::gemm(cout, ncol, kk, T::one(), &tmp[..cout * ncol], ncol, 1, cols, 1, ncol, T::one(), self.weight.grad.data_mut(), kk, 1);
            T::gemm(kk, cout, ncol, T::one(), self.weight.value.data(), 1, kk, &tmp[..cout * ncol], ncol, 1, T::zero(), cols, ncol, 1);
            g.col2im(cols, s0, cn, dx.data_mut());
            s0 += cn;
        }
        // the cached columns were overwritten with input gradients
        self.cols = None;
        dx
    }
}

/// Bilinear upsampling by an integer factor with half-pixel centres
/// (the `align_corners = false` convention).
#[derive(Clone, Debug)]
pub struct Upsample {
    pub factor: usize,
    input_shape: Option<Vec<usize>>,
}

/// For each output index: the two source indices and their weights.
fn bilinear_axis(in_len: usize, factor: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = 1.0 / factor as f64;
    (0..in_len * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = if i0 + 1 < in_len { i0 + 1 } else { i0 };
            let l1 = src - i0 as f64;
            (i0, i1, 1.0 - l1, l1)
        })
        .collect()
}

impl Upsample {
    pub fn new(factor: usize) -> Self {
        Self {
            factor,
            input_shape: None,
        }
    }

    fn axes<T: Real>(&self, h: usize, w: usize) -> (AxisTaps<T>, AxisTaps<T>) {
        let cast = |v: Vec<(usize, usize, f64, f64)>| {
            v.into_iter()
                .map(|(a, b, la, lb)| (a, b, T::lit(la), T::lit(lb)))
                .collect::<Vec<_>>()
        };
        (cast(bilinear_axis(h, self.factor)), cast(bilinear_axis(w, self.factor)))
    }

    /// Separable: rows are interpolated horizontally, then blended vertically.
    pub fn infer<T: Real>(&self, x: &Tensor<T>) -> Tensor<T> {
        let s = x.shape();
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let (ho, wo) = (h * self.factor, w * self.factor);
        let (ay, ax) = self.axes::<T>(h, w);
        let mut out = Tensor::zeros(&[s[0], s[1], ho, wo]);
        let od = out.data_mut();
        let mut rows = vec![T::zero(); h * wo];
        for plane in 0..nc {
            let src = &x.data()[plane * h * w..(plane + 1) * h * w];
            for y in 0..h {
                let r = &src[y * w..(y + 1) * w];
                for (d, &(x0, x1, l0, l1)) in rows[y * wo..(y + 1) * wo].iter_mut().zip(&ax) {
                    *d = l0 * r[x0] + l1 * r[x1];
                }
            }
            let dst = &mut od[plane * ho * wo..(plane + 1) * ho * wo];
            for (oy, &(y0, y1, l0, l1)) in ay.iter().enumerate() {
                let (r0, r1) = (&rows[y0 * wo..(y0 + 1) * wo], &rows[y1 * wo..(y1 + 1) * wo]);
                for ((d, &a), &b) in dst[oy * wo..(oy + 1) * wo].iter_mut().zip(r0).zip(r1) {
                    *d = l0 * a + l1 * b;
                }
            }
        }
        out
    }

    pub fn forward<T: Real>(&mut self, x: &Tensor<T>) -> Tensor<T> {
        self.input_shape = Some(x.shape().to_vec());
        self.infer(x)
    }

    pub fn backward<T: Real>(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let s = self.input_shape.clone().expect("upsample backward before forward");
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let (ho, wo) = (h * self.factor, w * self.factor);
        let (ay, ax) = self.axes::<T>(h, w);
        let mut dx = Tensor::zeros(&s);
        let dd = dx.data_mut();
        let mut rows = vec![T::zero(); h * wo];
        for plane in 0..nc {
            let g = &grad.data()[plane * ho * wo..(plane + 1) * ho * wo];
            rows.fill(T::zero());
            for (oy, &(y0, y1, l0, l1)) in ay.iter().enumerate() {
                let gr = &g[oy * wo..(oy + 1) * wo];
                for (d, &v) in rows[y0 * wo..(y0 + 1) * wo].iter_mut().zip(gr) {
                    *d += l0 * v;
                }
                for (d, &v) in rows[y1 * wo..(y1 + 1) * wo].iter_mut().zip(gr) {
                    *d += l1 * v;
                }
            }
            let dst = &mut dd[plane * h * w..(plane + 1) * h * w];
            for y in 0..h {
                let r = &rows[y * wo..(y + 1) * wo];
                let line = &mut dst[y * w..(y + 1) * w];
                for (&v, &(x0, x1, l0, l1)) in r.iter().zip(&ax) {
                    line[x0] += l0 * v;
                    line[x1] += l1 * v;
                }
            }
        }
        dx
    }
}

type AxisTaps<T> = Vec<(usize, usize, T, T)>;

/// Per-channel batch normalisation over N, H and W.
#[derive(Clone, Debug)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<BnCache<T>>,
}

#[derive(Clone, Debug)]
struct BnCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    batch_stats: bool,
}

impl<T: Real> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(Tensor::full(&[channels], T::one())),
            beta: Param::new(Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    fn normalize(&self, x: &Tensor<T>, mean: &[T], inv_std: &[T]) -> (Tensor<T>, Tensor<T>) {
        let s = x.shape();
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let mut xhat = Tensor::zeros(s);
        let mut y = Tensor::zeros(s);
        let (g, b) = (self.gamma.value.data(), self.beta.value.data());
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * hw;
                for j in off..off + hw {
                    let v = (x.data()[j] - mean[ch]) * inv_std[ch];
                    xhat.data_mut()[j] = v;
                    y.data_mut()[j] = g[ch] * v + b[ch];
                }
            }
        }
        (xhat, y)
    }

    fn running_inv_std(&self) -> Vec<T> {
        let eps = T::lit(self.eps);
        self.running_var
            .data()
            .iter()
            .map(|&v| T::one() / (v + eps).sqrt())
            .collect()
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let inv = self.running_inv_std();
        self.normalize(x, self.running_mean.data(), &inv).1
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let s = x.shape().to_vec();
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        match mode {
            Mode::Eval => {
                let inv = self.running_inv_std();
                let (xhat, y) = self.normalize(x, self.running_mean.data(), &inv);
                self.cache = Some(BnCache {
                    xhat,
                    inv_std: inv,
                    batch_stats: false,
                });
                y
            }
            Mode::Train => {
                let count = n * hw;
                let cnt = T::lit(count as f64);
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut acc = T::zero();
                    for i in 0..n {
                        let off = (i * c + ch) * hw;
                        acc += x.data()[off..off + hw].iter().copied().sum::<T>();
                    }
                    mean[ch] = acc / cnt;
                    let mut sq = T::zero();
                    for i in 0..n {
                        let off = (i * c + ch) * hw;
                        for &v in &x.data()[off..off + hw] {
                            let d = v - mean[ch];
                            sq += d * d;
                        }
                    }
                    var[ch] = sq / cnt;
                }
                let eps = T::lit(self.eps);
                let inv: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                let (xhat, y) = self.normalize(x, &mean, &inv);
                let m = T::lit(self.momentum);
                let unbias = if count > 1 {
                    T::lit(count as f64 / (count - 1) as f64)
                } else {
                    T::one()
                };
                for ch in 0..c {
                    let rm = &mut self.running_mean.data_mut()[ch];
                    *rm = (T::one() - m) * *rm + m * mean[ch];
                    let rv = &mut self.running_var.data_mut()[ch];
                    *rv = (T::one() - m) * *rv + m * var[ch] * unbias;
                }
                self.cache = Some(BnCache {
                    xhat,
                    inv_std: inv,
                    batch_stats: true,
                });
                y
            }
        }
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let cache = self.cache.as_ref().expect("batch-norm backward before forward");
        let s = grad.shape();
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let cnt = T::lit((n * hw) as f64);
        let mut dx = Tensor::zeros(s);
        for ch in 0..c {
            let mut dgamma = T::zero();
            let mut dbeta = T::zero();
            for i in 0..n {
                let off = (i * c + ch) * hw;
                for j in off..off + hw {
                    dgamma += grad.data()[j] * cache.xhat.data()[j];
                    dbeta += grad.data()[j];
                }
            }
            self.gamma.grad.data_mut()[ch] += dgamma;
            self.beta.grad.data_mut()[ch] += dbeta;
            let scale = self.gamma.value.data()[ch] * cache.inv_std[ch];
            for i in 0..n {
                let off = (i * c + ch) * hw;
                for j in off..off + hw {
                    let g = grad.data()[j];
                    dx.data_mut()[j] = if cache.batch_stats {
                        scale * (g - (dbeta + cache.xhat.data()[j] * dgamma) / cnt)
                    } else {
                        scale * g
                    };
                }
            }
        }
        dx
    }
}

/// One element of a [`Sequential`] stack.
#[derive(Clone, Debug)]
pub enum Layer<T> {
    Linear(Linear<T>),
    Conv2d(Conv2d<T>),
    Upsample(Upsample),
    BatchNorm(BatchNorm2d<T>),
    Act(Activation, Option<Tensor<T>>),
    /// `(N, …) → (N, features)`.
    Flatten(Option<Vec<usize>>),
    /// `(N, C) → (N, C, 1, 1)`.
    ToMap,
}

fn activate<T: Real>(act: Activation, x: &Tensor<T>) -> Tensor<T> {
    match act {
        Activation::Relu => x.map(|v| if v > T::zero() { v } else { T::zero() }),
        Activation::Tanh => x.map(|v| v.tanh()),
        Activation::Sigmoid => x.map(sigmoid),
    }
}

/// Logistic function, evaluated without overflow for large |v|.
pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

impl<T: Real> Layer<T> {
    pub fn relu() -> Self {
        Layer::Act(Activation::Relu, None)
    }

    pub fn activation(act: Activation) -> Self {
        Layer::Act(act, None)
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        match self {
            Layer::Linear(l) => l.infer(x),
            Layer::Conv2d(c) => c.infer(x),
            Layer::Upsample(u) => u.infer(x),
            Layer::BatchNorm(b) => b.infer(x),
            Layer::Act(a, _) => activate(*a, x),
            Layer::Flatten(_) => x.clone().reshape(&[x.rows(), x.row_len()]).expect("flatten"),
            Layer::ToMap => x.clone().reshape(&[x.rows(), x.row_len(), 1, 1]).expect("to_map"),
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        match self {
            Layer::Linear(l) => l.forward(x),
            Layer::Conv2d(c) => c.forward(x),
            Layer::Upsample(u) => u.forward(x),
            Layer::BatchNorm(b) => b.forward(x, mode),
            Layer::Act(a, cache) => {
                let y = activate(*a, x);
                *cache = Some(y.clone());
                y
            }
            Layer::Flatten(shape) => {
                *shape = Some(x.shape().to_vec());
                x.clone().reshape(&[x.rows(), x.row_len()]).expect("flatten")
            }
            Layer::ToMap => x.clone().reshape(&[x.rows(), x.row_len(), 1, 1]).expect("to_map"),
        }
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        match self {
            Layer::Linear(l) => l.backward(grad),
            Layer::Conv2d(c) => c.backward(grad),
            Layer::Upsample(u) => u.backward(grad),
            Layer::BatchNorm(b) => b.backward(grad),
            Layer::Act(a, cache) => {
                let y = cache.as_ref().expect("activation backward before forward");
                let mut dx = grad.clone();
                for (d, &yv) in dx.data_mut().iter_mut().zip(y.data()) {
                    *d *= match a {
                        Activation::Relu => {
                            if yv > T::zero() {
                                T::one()
                            } else {
                                T::zero()
                            }
                        }
                        Activation::Tanh => T::one() - yv * yv,
                        Activation::Sigmoid => yv * (T::one() - yv),
                    };
                }
                dx
            }
            Layer::Flatten(shape) => {
                let s = shape.as_ref().expect("flatten backward before forward");
                grad.clone().reshape(s).expect("unflatten")
            }
            Layer::ToMap => grad
                .clone()
                .reshape(&[grad.rows(), grad.row_len()])
                .expect("from_map"),
        }
    }
}

/// Ordered stack of layers. Parameter names follow `{prefix}.{index}.{kind}`,
/// where `index` counts every layer including activations.
#[derive(Clone, Debug, Default)]
pub struct Sequential<T> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Real> Sequential<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Self {
        Self { layers }
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.infer(&h);
        }
        h
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let mut h = x.clone();
        for layer in &mut self.layers {
            h = layer.forward(&h, mode);
        }
        h
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let mut g = grad.clone();
        for layer in self.layers.iter_mut().rev() {
            g = layer.backward(&g);
        }
        g
    }

    pub fn zero_grad(&mut self) {
        self.visit_params_mut("", &mut |_, p| p.zero_grad());
    }

    pub fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Linear(l) => {
                    f(&format!("{prefix}.{i}.weight"), &l.weight);
                    f(&format!("{prefix}.{i}.bias"), &l.bias);
                }
                Layer::Conv2d(c) => {
                    f(&format!("{prefix}.{i}.weight"), &c.weight);
                    f(&format!("{prefix}.{i}.bias"), &c.bias);
                }
                Layer::BatchNorm(b) => {
                    f(&format!("{prefix}.{i}.bn_gamma"), &b.gamma);
                    f(&format!("{prefix}.{i}.bn_beta"), &b.beta);
                }
                _ => {}
            }
        }
    }

    pub fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            match layer {
                Layer::Linear(l) => {
                    f(&format!("{prefix}.{i}.weight"), &mut l.weight);
                    f(&format!("{prefix}.{i}.bias"), &mut l.bias);
                }
                Layer::Conv2d(c) => {
                    f(&format!("{prefix}.{i}.weight"), &mut c.weight);
                    f(&format!("{prefix}.{i}.bias"), &mut c.bias);
                }
                Layer::BatchNorm(b) => {
                    f(&format!("{prefix}.{i}.bn_gamma"), &mut b.gamma);
                    f(&format!("{prefix}.{i}.bn_beta"), &mut b.beta);
                }
                _ => {}
            }
        }
    }

    /// Non-trainable state (batch-norm running statistics).
    pub fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for (i, layer) in self.layers.iter().enumerate() {
            if let Layer::BatchNorm(b) = layer {
                f(&format!("{prefix}.{i}.bn_mean"), &b.running_mean);
                f(&format!("{prefix}.{i}.bn_var"), &b.running_var);
            }
        }
    }

    pub fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            if let Layer::BatchNorm(b) = layer {
                f(&format!("{prefix}.{i}.bn_mean"), &mut b.running_mean);
                f(&format!("{prefix}.{i}.bn_var"), &mut b.running_var);
            }
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| n += p.value.len());
        n
    }
}
