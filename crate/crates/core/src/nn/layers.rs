//! Layer kernels. Each layer has an inference forward, a training forward
//! that returns what its backward pass needs, and a backward pass that
//! accumulates parameter gradients and returns the input gradient.

use rand::Rng;

use super::gemm::{gemm, Layout};
use super::spec::Axis;
use super::tensor::Tensor;

pub(crate) const BN_EPS: f32 = 1e-5;
pub(crate) const BN_MOMENTUM: f32 = 0.1;

/// Upper bound on im2col buffer size, in floats.
const COLS_BUDGET: usize = 1 << 22;

/// A trainable tensor with its accumulated gradient.
#[derive(Debug, Clone)]
pub(crate) struct Param {
    pub value: Tensor,
    pub grad: Vec<f32>,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let grad = vec![0.0; value.len()];
        Param { value, grad }
    }

    pub fn uniform<R: Rng + ?Sized>(shape: Vec<usize>, bound: f32, rng: &mut R) -> Self {
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut() {
            *v = rng.random_range(-bound..=bound);
        }
        Param::new(t)
    }

    pub fn filled(shape: Vec<usize>, value: f32) -> Self {
        let mut t = Tensor::zeros(shape);
        t.data_mut().fill(value);
        Param::new(t)
    }
}

// ---------------------------------------------------------------------------
// convolution

#[derive(Debug, Clone)]
pub(crate) struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    pub kernel: [usize; 2],
    pub padding: [usize; 2],
    pub stride: [usize; 2],
}

struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    k: usize,
}

impl Conv2d {
    fn geom(&self, shape: &[usize]) -> ConvGeom {
        let (cin, h, w) = (shape[1], shape[2], shape[3]);
        let [kh, kw] = self.kernel;
        let [ph, pw] = self.padding;
        let [sh, sw] = self.stride;
        ConvGeom {
            cin,
            h,
            w,
            ho: (h + 2 * ph - kh) / sh + 1,
            wo: (w + 2 * pw - kw) / sw + 1,
            k: cin * kh * kw,
        }
    }

    fn cout(&self) -> usize {
        self.weight.value.shape()[0]
    }

    /// Output rows per im2col chunk.
    fn chunk_rows(&self, g: &ConvGeom) -> usize {
        (COLS_BUDGET / (g.k * g.wo).max(1)).clamp(1, g.ho)
    }

    /// Fills `cols` (`k × rows·wo`) for output rows `oy0..oy0+rows`.
    fn im2col(&self, x: &[f32], g: &ConvGeom, oy0: usize, rows: usize, cols: &mut [f32]) {
        let [kh, kw] = self.kernel;
        let [ph, pw] = self.padding;
        let [sh, sw] = self.stride;
        let p = rows * g.wo;
        for c in 0..g.cin {
            let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
            for ki in 0..kh {
                for kj in 0..kw {
                    let r = (c * kh + ki) * kw + kj;
                    let row = &mut cols[r * p..(r + 1) * p];
                    for oy in 0..rows {
                        let iy = ((oy0 + oy) * sh + ki) as isize - ph as isize;
                        let dst = &mut row[oy * g.wo..(oy + 1) * g.wo];
                        if iy < 0 || iy >= g.h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * sw + kj) as isize - pw as isize;
                            *d = if ix >= 0 && (ix as usize) < g.w {
                                src[ix as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f32], g: &ConvGeom, oy0: usize, rows: usize, dx: &mut [f32]) {
        let [kh, kw] = self.kernel;
        let [ph, pw] = self.padding;
        let [sh, sw] = self.stride;
        let p = rows * g.wo;
        for c in 0..g.cin {
            let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
            for ki in 0..kh {
                for kj in 0..kw {
                    let r = (c * kh + ki) * kw + kj;
                    let row = &cols[r * p..(r + 1) * p];
                    for oy in 0..rows {
                        let iy = ((oy0 + oy) * sh + ki) as isize - ph as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for (ox, &v) in row[oy * g.wo..(oy + 1) * g.wo].iter().enumerate() {
                            let ix = (ox * sw + kj) as isize - pw as isize;
                            if ix >= 0 && (ix as usize) < g.w {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let b = x.shape()[0];
        let g = self.geom(x.shape());
        let cout = self.cout();
        let plane_out = g.ho * g.wo;
        let mut out = Tensor::zeros(vec![b, cout, g.ho, g.wo]);
        let chunk = self.chunk_rows(&g);
        let mut cols = vec![0.0f32; g.k * chunk * g.wo];
        let w = self.weight.value.data();
        for bi in 0..b {
            let xin = &x.data()[bi * g.cin * g.h * g.w..(bi + 1) * g.cin * g.h * g.w];
            let base = bi * cout * plane_out;
            let mut oy0 = 0;
            while oy0 < g.ho {
                let rows = chunk.min(g.ho - oy0);
                let p = rows * g.wo;
                self.im2col(xin, &g, oy0, rows, &mut cols[..g.k * p]);
                gemm(
                    cout,
                    g.k,
                    p,
                    w,
                    Layout::rows(g.k),
                    &cols[..g.k * p],
                    Layout::rows(p),
                    0.0,
                    out.data_mut(),
                    Layout {
                        offset: base + oy0 * g.wo,
                        rs: plane_out,
                        cs: 1,
                    },
                );
                oy0 += rows;
            }
            for (co, &bias) in self.bias.value.data().iter().enumerate() {
                let s = base + co * plane_out;
                out.data_mut()[s..s + plane_out]
                    .iter_mut()
                    .for_each(|v| *v += bias);
            }
        }
        out
    }

    pub fn backward(&mut self, x: &Tensor, dy: &Tensor, need_dx: bool) -> Option<Tensor> {
        let b = x.shape()[0];
        let g = self.geom(x.shape());
        let cout = self.cout();
        let plane_out = g.ho * g.wo;
        let chunk = self.chunk_rows(&g);
        let mut cols = vec![0.0f32; g.k * chunk * g.wo];
        let mut dcols = if need_dx {
            vec![0.0f32; g.k * chunk * g.wo]
        } else {
            Vec::new()
        };
        let mut dx = need_dx.then(|| Tensor::zeros(x.shape().to_vec()));
        let in_len = g.cin * g.h * g.w;
        for bi in 0..b {
            let xin = &x.data()[bi * in_len..(bi + 1) * in_len];
            let base = bi * cout * plane_out;
            for co in 0..cout {
                let s = base + co * plane_out;
                self.bias.grad[co] += dy.data()[s..s + plane_out].iter().sum::<f32>();
            }
            let mut oy0 = 0;
            while oy0 < g.ho {
                let rows = chunk.min(g.ho - oy0);
                let p = rows * g.wo;
                let dy_view = Layout {
                    offset: base + oy0 * g.wo,
                    rs: plane_out,
                    cs: 1,
                };
                self.im2col(xin, &g, oy0, rows, &mut cols[..g.k * p]);
                // dW += dY · colsᵀ
                gemm(
                    cout,
                    p,
                    g.k,
                    dy.data(),
                    dy_view,
                    &cols[..g.k * p],
                    Layout::trans(p),
                    1.0,
                    &mut self.weight.grad,
                    Layout::rows(g.k),
                );
                if let Some(dx) = dx.as_mut() {
                    // dcols = Wᵀ · dY
                    gemm(
                        g.k,
                        cout,
                        p,
                        self.weight.value.data(),
                        Layout::trans(g.k),
                        dy.data(),
                        dy_view,
                        0.0,
                        &mut dcols[..g.k * p],
                        Layout::rows(p),
                    );
                    self.col2im(
                        &dcols[..g.k * p],
                        &g,
                        oy0,
                        rows,
                        &mut dx.data_mut()[bi * in_len..(bi + 1) * in_len],
                    );
                }
                oy0 += rows;
            }
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// elementwise

pub(crate) fn relu(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    y
}

pub(crate) fn relu_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(y.data()) {
        if v <= 0.0 {
            *d = 0.0;
        }
    }
    dx
}

pub(crate) fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

pub(crate) fn sigmoid_tensor(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
    y
}

pub(crate) fn sigmoid_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(y.data()) {
        *d *= v * (1.0 - v);
    }
    dx
}

// ---------------------------------------------------------------------------
// batch normalization

#[derive(Debug, Clone)]
pub(crate) struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
}

pub(crate) struct BnCache {
    xhat: Vec<f32>,
    inv_std: Vec<f32>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::filled(vec![channels], 1.0),
            beta: Param::filled(vec![channels], 0.0),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    fn dims(x: &Tensor) -> (usize, usize, usize) {
        let s = x.shape();
        (s[0], s[1], s[2] * s[3])
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let (b, c, hw) = Self::dims(x);
        let mut y = x.clone();
        let d = y.data_mut();
        for ch in 0..c {
            let inv = 1.0 / (self.running_var[ch] + BN_EPS).sqrt();
            let scale = self.gamma.value.data()[ch] * inv;
            let shift = self.beta.value.data()[ch] - self.running_mean[ch] * scale;
            for bi in 0..b {
                let s = (bi * c + ch) * hw;
                d[s..s + hw].iter_mut().for_each(|v| *v = *v * scale + shift);
            }
        }
        y
    }

    /// Normalizes with batch statistics and updates the running averages.
    pub fn forward_train(&mut self, x: &Tensor) -> (Tensor, BnCache) {
        let (b, c, hw) = Self::dims(x);
        let n = (b * hw) as f64;
        let mut y = x.clone();
        let mut xhat = vec![0.0f32; x.len()];
        let mut inv_std = vec![0.0f32; c];
        for ch in 0..c {
            let mut sum = 0.0f64;
            let mut sq = 0.0f64;
            for bi in 0..b {
                let s = (bi * c + ch) * hw;
                for &v in &x.data()[s..s + hw] {
                    sum += v as f64;
                    sq += (v as f64) * (v as f64);
                }
            }
            let mean = sum / n;
            let var = (sq / n - mean * mean).max(0.0);
            let inv = 1.0 / (var + BN_EPS as f64).sqrt();
            inv_std[ch] = inv as f32;
            let unbiased = if n > 1.0 { var * n / (n - 1.0) } else { var };
            self.running_mean[ch] =
                (1.0 - BN_MOMENTUM) * self.running_mean[ch] + BN_MOMENTUM * mean as f32;
            self.running_var[ch] =
                (1.0 - BN_MOMENTUM) * self.running_var[ch] + BN_MOMENTUM * unbiased as f32;
            let (gm, bt) = (self.gamma.value.data()[ch], self.beta.value.data()[ch]);
            for bi in 0..b {
                let s = (bi * c + ch) * hw;
                for i in s..s + hw {
                    let h = ((x.data()[i] as f64 - mean) * inv) as f32;
                    xhat[i] = h;
                    y.data_mut()[i] = gm * h + bt;
                }
            }
        }
        (y, BnCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &BnCache, dy: &Tensor) -> Tensor {
        let (b, c, hw) = Self::dims(dy);
        let n = (b * hw) as f32;
        let mut dx = Tensor::zeros(dy.shape().to_vec());
        for ch in 0..c {
            let mut sum_dy = 0.0f32;
            let mut sum_dy_xhat = 0.0f32;
            for bi in 0..b {
                let s = (bi * c + ch) * hw;
                for i in s..s + hw {
                    sum_dy += dy.data()[i];
                    sum_dy_xhat += dy.data()[i] * cache.xhat[i];
                }
            }
            self.gamma.grad[ch] += sum_dy_xhat;
            self.beta.grad[ch] += sum_dy;
            let k = self.gamma.value.data()[ch] * cache.inv_std[ch] / n;
            for bi in 0..b {
                let s = (bi * c + ch) * hw;
                for i in s..s + hw {
                    dx.data_mut()[i] =
                        k * (n * dy.data()[i] - sum_dy - cache.xhat[i] * sum_dy_xhat);
                }
            }
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// max pooling

pub(crate) fn max_pool(
    x: &Tensor,
    kernel: [usize; 2],
    stride: [usize; 2],
    want_argmax: bool,
) -> (Tensor, Vec<u32>) {
    let s = x.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let ho = (h - kernel[0]) / stride[0] + 1;
    let wo = (w - kernel[1]) / stride[1] + 1;
    let mut out = Tensor::zeros(vec![b, c, ho, wo]);
    let mut arg = if want_argmax {
        vec![0u32; b * c * ho * wo]
    } else {
        Vec::new()
    };
    let od = out.data_mut();
    for p in 0..b * c {
        let plane = &x.data()[p * h * w..(p + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f32::NEG_INFINITY;
                let mut at = 0;
                for ki in 0..kernel[0] {
                    for kj in 0..kernel[1] {
                        let i = (oy * stride[0] + ki) * w + ox * stride[1] + kj;
                        if plane[i] > best {
                            best = plane[i];
                            at = i;
                        }
                    }
                }
                let o = (p * ho + oy) * wo + ox;
                od[o] = best;
                if want_argmax {
                    arg[o] = at as u32;
                }
            }
        }
    }
    (out, arg)
}

pub(crate) fn max_pool_backward(in_shape: &[usize], argmax: &[u32], dy: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(in_shape.to_vec());
    let plane_in = in_shape[2] * in_shape[3];
    let s = dy.shape();
    let plane_out = s[2] * s[3];
    for (o, &g) in dy.data().iter().enumerate() {
        let p = o / plane_out;
        dx.data_mut()[p * plane_in + argmax[o] as usize] += g;
    }
    dx
}

// ---------------------------------------------------------------------------
// reshapes

/// `[B, C, H, W]` → `[B, W, C·H]`, feature index `c·H + h`.
pub(crate) fn collapse_height(x: &Tensor) -> Tensor {
    let s = x.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let f = c * h;
    let mut out = vec![0.0f32; x.len()];
    for bi in 0..b {
        for ch in 0..c {
            for y in 0..h {
                let src = ((bi * c + ch) * h + y) * w;
                for (t, &v) in x.data()[src..src + w].iter().enumerate() {
                    out[(bi * w + t) * f + ch * h + y] = v;
                }
            }
        }
    }
    Tensor::new(vec![b, w, f], out).expect("collapse preserves size")
}

pub(crate) fn collapse_height_backward(in_shape: &[usize], dy: &Tensor) -> Tensor {
    let (b, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let f = c * h;
    let mut dx = vec![0.0f32; dy.len()];
    for bi in 0..b {
        for ch in 0..c {
            for y in 0..h {
                let dst = ((bi * c + ch) * h + y) * w;
                for t in 0..w {
                    dx[dst + t] = dy.data()[(bi * w + t) * f + ch * h + y];
                }
            }
        }
    }
    Tensor::new(in_shape.to_vec(), dx).expect("collapse preserves size")
}

/// Feature map → sequences along `axis`: `[B·W, H, C]` for y, `[B·H, W, C]`
/// for x.
pub(crate) fn map_to_sequences(x: &Tensor, axis: Axis) -> Tensor {
    let s = x.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut out = vec![0.0f32; x.len()];
    for bi in 0..b {
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let v = x.data()[((bi * c + ch) * h + y) * w + xx];
                    let o = match axis {
                        Axis::Y => ((bi * w + xx) * h + y) * c + ch,
                        Axis::X => ((bi * h + y) * w + xx) * c + ch,
                    };
                    out[o] = v;
                }
            }
        }
    }
    let shape = match axis {
        Axis::Y => vec![b * w, h, c],
        Axis::X => vec![b * h, w, c],
    };
    Tensor::new(shape, out).expect("permutation preserves size")
}

/// Inverse of [`map_to_sequences`] for a sequence tensor with `c` features.
pub(crate) fn sequences_to_map(seq: &Tensor, axis: Axis, b: usize, h: usize, w: usize) -> Tensor {
    let c = seq.shape()[2];
    let mut out = vec![0.0f32; seq.len()];
    for bi in 0..b {
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let i = match axis {
                        Axis::Y => ((bi * w + xx) * h + y) * c + ch,
                        Axis::X => ((bi * h + y) * w + xx) * c + ch,
                    };
                    out[((bi * c + ch) * h + y) * w + xx] = seq.data()[i];
                }
            }
        }
    }
    Tensor::new(vec![b, c, h, w], out).expect("permutation preserves size")
}

// ---------------------------------------------------------------------------
// LSTM

/// One direction of an LSTM layer; gate order input, forget, cell, output.
#[derive(Debug, Clone)]
pub(crate) struct LstmDir {
    pub w_ih: Param,
    pub w_hh: Param,
    pub bias: Param,
}

pub(crate) struct DirCache {
    /// Post-activation gates `[B, T, 4H]`.
    gates: Vec<f32>,
    /// Cell states `[B, T, H]`.
    cells: Vec<f32>,
    /// Hidden states `[B, T, H]`.
    hidden: Vec<f32>,
}

impl LstmDir {
    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden as f32).sqrt();
        let mut bias = Param::uniform(vec![4 * hidden], bound, rng);
        bias.value.data_mut()[hidden..2 * hidden].fill(1.0);
        LstmDir {
            w_ih: Param::uniform(vec![4 * hidden, input], bound, rng),
            w_hh: Param::uniform(vec![4 * hidden, hidden], bound, rng),
            bias,
        }
    }

    fn hidden(&self) -> usize {
        self.w_hh.value.shape()[1]
    }

    /// Runs over `x: [B, T, F]`, forward in time or reversed.
    pub fn run(&self, x: &Tensor, reverse: bool) -> DirCache {
        let s = x.shape();
        let (b, t_len, f) = (s[0], s[1], s[2]);
        let h = self.hidden();
        let g4 = 4 * h;
        let mut gates = vec![0.0f32; b * t_len * g4];
        gemm(
            b * t_len,
            f,
            g4,
            x.data(),
            Layout::rows(f),
            self.w_ih.value.data(),
            Layout::trans(f),
            0.0,
            &mut gates,
            Layout::rows(g4),
        );
        let bias = self.bias.value.data();
        for row in gates.chunks_exact_mut(g4) {
            row.iter_mut().zip(bias).for_each(|(v, b)| *v += b);
        }
        let mut cells = vec![0.0f32; b * t_len * h];
        let mut hidden = vec![0.0f32; b * t_len * h];
        for step in 0..t_len {
            let t = if reverse { t_len - 1 - step } else { step };
            let prev = (step > 0).then(|| if reverse { t + 1 } else { t - 1 });
            if let Some(p) = prev {
                gemm(
                    b,
                    h,
                    g4,
                    &hidden,
                    Layout {
                        offset: p * h,
                        rs: t_len * h,
                        cs: 1,
                    },
                    self.w_hh.value.data(),
                    Layout::trans(h),
                    1.0,
                    &mut gates,
                    Layout {
                        offset: t * g4,
                        rs: t_len * g4,
                        cs: 1,
                    },
                );
            }
            for bi in 0..b {
                let gi = (bi * t_len + t) * g4;
                let hi = (bi * t_len + t) * h;
                let g = &mut gates[gi..gi + g4];
                for j in 0..h {
                    let i = sigmoid(g[j]);
                    let fg = sigmoid(g[h + j]);
                    let cg = g[2 * h + j].tanh();
                    let o = sigmoid(g[3 * h + j]);
                    g[j] = i;
                    g[h + j] = fg;
                    g[2 * h + j] = cg;
                    g[3 * h + j] = o;
                    let c_prev = prev.map_or(0.0, |p| cells[(bi * t_len + p) * h + j]);
                    let c = fg * c_prev + i * cg;
                    cells[hi + j] = c;
                    hidden[hi + j] = o * c.tanh();
                }
            }
        }
        DirCache {
            gates,
            cells,
            hidden,
        }
    }

    /// Backpropagates `dh: [B, T, H]` (strided view into the layer output
    /// gradient) and accumulates `dx`.
    pub fn backward(
        &mut self,
        x: &Tensor,
        cache: &DirCache,
        dout: &[f32],
        dout_layout: (usize, usize),
        reverse: bool,
        dx: Option<&mut [f32]>,
    ) {
        let s = x.shape();
        let (b, t_len, f) = (s[0], s[1], s[2]);
        let h = self.hidden();
        let g4 = 4 * h;
        let (d_off, d_stride) = dout_layout;
        let mut dgates = vec![0.0f32; b * t_len * g4];
        let mut dh_rec = vec![0.0f32; b * h];
        let mut dc_rec = vec![0.0f32; b * h];
        for step in (0..t_len).rev() {
            let t = if reverse { t_len - 1 - step } else { step };
            let prev = (step > 0).then(|| if reverse { t + 1 } else { t - 1 });
            for bi in 0..b {
                let gi = (bi * t_len + t) * g4;
                let hi = (bi * t_len + t) * h;
                let di = (bi * t_len + t) * d_stride + d_off;
                for j in 0..h {
                    let (i, fg, cg, o) = (
                        cache.gates[gi + j],
                        cache.gates[gi + h + j],
                        cache.gates[gi + 2 * h + j],
                        cache.gates[gi + 3 * h + j],
                    );
                    let c = cache.cells[hi + j];
                    let c_prev = prev.map_or(0.0, |p| cache.cells[(bi * t_len + p) * h + j]);
                    let tc = c.tanh();
                    let dh = dout[di + j] + dh_rec[bi * h + j];
                    let d_o = dh * tc;
                    let dc = dc_rec[bi * h + j] + dh * o * (1.0 - tc * tc);
                    let d_i = dc * cg;
                    let d_g = dc * i;
                    let d_f = dc * c_prev;
                    dc_rec[bi * h + j] = dc * fg;
                    dgates[gi + j] = d_i * i * (1.0 - i);
                    dgates[gi + h + j] = d_f * fg * (1.0 - fg);
                    dgates[gi + 2 * h + j] = d_g * (1.0 - cg * cg);
                    dgates[gi + 3 * h + j] = d_o * o * (1.0 - o);
                }
            }
            let dg_view = Layout {
                offset: t * g4,
                rs: t_len * g4,
                cs: 1,
            };
            // dh_prev = dgates_t · W_hh
            gemm(
                b,
                g4,
                h,
                &dgates,
                dg_view,
                self.w_hh.value.data(),
                Layout::rows(h),
                0.0,
                &mut dh_rec,
                Layout::rows(h),
            );
            if let Some(p) = prev {
                // dW_hh += dgates_tᵀ · h_prev
                gemm(
                    g4,
                    b,
                    h,
                    &dgates,
                    Layout {
                        offset: t * g4,
                        rs: 1,
                        cs: t_len * g4,
                    },
                    &cache.hidden,
                    Layout {
                        offset: p * h,
                        rs: t_len * h,
                        cs: 1,
                    },
                    1.0,
                    &mut self.w_hh.grad,
                    Layout::rows(h),
                );
            }
        }
        let bt = b * t_len;
        gemm(
            g4,
            bt,
            f,
            &dgates,
            Layout::trans(g4),
            x.data(),
            Layout::rows(f),
            1.0,
            &mut self.w_ih.grad,
            Layout::rows(f),
        );
        for row in dgates.chunks_exact(g4) {
            self.bias.grad.iter_mut().zip(row).for_each(|(g, d)| *g += d);
        }
        if let Some(dx) = dx {
            gemm(
                bt,
                g4,
                f,
                &dgates,
                Layout::rows(g4),
                self.w_ih.value.data(),
                Layout::rows(f),
                1.0,
                dx,
                Layout::rows(f),
            );
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct BiLstm {
    pub fwd: LstmDir,
    pub bwd: LstmDir,
}

pub(crate) struct BiLstmCache {
    fwd: DirCache,
    bwd: DirCache,
}

impl BiLstm {
    fn concat(&self, b: usize, t: usize, fwd: &DirCache, bwd: &DirCache) -> Tensor {
        let h = self.fwd.hidden();
        let mut out = vec![0.0f32; b * t * 2 * h];
        for r in 0..b * t {
            out[r * 2 * h..r * 2 * h + h].copy_from_slice(&fwd.hidden[r * h..(r + 1) * h]);
            out[r * 2 * h + h..(r + 1) * 2 * h].copy_from_slice(&bwd.hidden[r * h..(r + 1) * h]);
        }
        Tensor::new(vec![b, t, 2 * h], out).expect("lstm output shape")
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        self.forward_train(x).0
    }

    pub fn forward_train(&self, x: &Tensor) -> (Tensor, BiLstmCache) {
        let (b, t) = (x.shape()[0], x.shape()[1]);
        let fwd = self.fwd.run(x, false);
        let bwd = self.bwd.run(x, true);
        let out = self.concat(b, t, &fwd, &bwd);
        (out, BiLstmCache { fwd, bwd })
    }

    pub fn backward(&mut self, x: &Tensor, cache: &BiLstmCache, dy: &Tensor, need_dx: bool) -> Option<Tensor> {
        let h = self.fwd.hidden();
        let mut dx = need_dx.then(|| Tensor::zeros(x.shape().to_vec()));
        self.fwd.backward(
            x,
            &cache.fwd,
            dy.data(),
            (0, 2 * h),
            false,
            dx.as_mut().map(|d| d.data_mut()),
        );
        self.bwd.backward(
            x,
            &cache.bwd,
            dy.data(),
            (h, 2 * h),
            true,
            dx.as_mut().map(|d| d.data_mut()),
        );
        dx
    }
}

// ---------------------------------------------------------------------------
// linear, log-softmax, dropout

#[derive(Debug, Clone)]
pub(crate) struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let s = x.shape();
        let (rows, f) = (s[0] * s[1], s[2]);
        let o = self.weight.value.shape()[0];
        let mut y = vec![0.0f32; rows * o];
        gemm(
            rows,
            f,
            o,
            x.data(),
            Layout::rows(f),
            self.weight.value.data(),
            Layout::trans(f),
            0.0,
            &mut y,
            Layout::rows(o),
        );
        for row in y.chunks_exact_mut(o) {
            row.iter_mut()
                .zip(self.bias.value.data())
                .for_each(|(v, b)| *v += b);
        }
        Tensor::new(vec![s[0], s[1], o], y).expect("linear output shape")
    }

    pub fn backward(&mut self, x: &Tensor, dy: &Tensor, need_dx: bool) -> Option<Tensor> {
        let s = x.shape();
        let (rows, f) = (s[0] * s[1], s[2]);
        let o = self.weight.value.shape()[0];
        gemm(
            o,
            rows,
            f,
            dy.data(),
            Layout::trans(o),
            x.data(),
            Layout::rows(f),
            1.0,
            &mut self.weight.grad,
            Layout::rows(f),
        );
        for row in dy.data().chunks_exact(o) {
            self.bias.grad.iter_mut().zip(row).for_each(|(g, d)| *g += d);
        }
        need_dx.then(|| {
            let mut dx = Tensor::zeros(s.to_vec());
            gemm(
                rows,
                o,
                f,
                dy.data(),
                Layout::rows(o),
                self.weight.value.data(),
                Layout::rows(f),
                0.0,
                dx.data_mut(),
                Layout::rows(f),
            );
            dx
        })
    }
}

pub(crate) fn log_softmax(x: &Tensor) -> Tensor {
    let c = *x.shape().last().expect("non-empty shape");
    let mut y = x.clone();
    for row in y.data_mut().chunks_exact_mut(c) {
        let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f32>().ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
    y
}

pub(crate) fn log_softmax_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let c = *y.shape().last().expect("non-empty shape");
    let mut dx = dy.clone();
    for (drow, yrow) in dx.data_mut().chunks_exact_mut(c).zip(y.data().chunks_exact(c)) {
        let total: f32 = drow.iter().sum();
        drow.iter_mut()
            .zip(yrow)
            .for_each(|(d, &v)| *d -= v.exp() * total);
    }
    dx
}

/// Inverted dropout mask: `0` or `1/(1-p)` per element.
pub(crate) fn dropout_mask<R: Rng + ?Sized>(n: usize, p: f32, rng: &mut R) -> Vec<f32> {
    let keep = 1.0 / (1.0 - p);
    (0..n)
        .map(|_| if rng.random::<f32>() < p { 0.0 } else { keep })
        .collect()
}

pub(crate) fn mul_mask(x: &Tensor, mask: &[f32]) -> Tensor {
    let mut y = x.clone();
    y.data_mut().iter_mut().zip(mask).for_each(|(v, m)| *v *= m);
    y
}
