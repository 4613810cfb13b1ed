//! Batched layers with hand-written backward passes.
//!
//! Convolutional activations use a channel-major layout `[C, N, spatial]`
//! so that each layer is a single GEMM over the whole batch.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// `C = alpha * A·B + beta * C` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers pass buffers sized for the given shapes and strides;
    // the debug assertions above and in each layer check the lengths.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Trainable tensor with its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Param {
            name: name.into(),
            shape: shape.to_vec(),
            value: vec![0.0; n],
            grad: vec![0.0; n],
        }
    }

    /// Glorot-uniform initialisation.
    pub fn glorot(name: impl Into<String>, shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut p = Param::zeros(name, shape);
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for v in &mut p.value {
            *v = rng.random_range(-limit..limit);
        }
        p
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// 1-D valid convolution applied independently to `n` sequences.
#[derive(Debug, Clone)]
pub struct TemporalConv {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub weight: Param,
    pub bias: Param,
    cols: Vec<f64>,
    n: usize,
    lin: usize,
}

impl TemporalConv {
    pub fn new(name: &str, cin: usize, cout: usize, kernel: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        TemporalConv {
            cin,
            cout,
            kernel,
            stride,
            weight: Param::glorot(format!("{name}.weight"), &[cout, cin, kernel], cin * kernel, cout * kernel, rng),
            bias: Param::zeros(format!("{name}.bias"), &[cout]),
            cols: Vec::new(),
            n: 0,
            lin: 0,
        }
    }

    pub fn out_len(&self, lin: usize) -> usize {
        (lin - self.kernel) / self.stride + 1
    }

    /// `x` is `[cin, n, lin]`; returns `[cout, n, lout]`.
    pub fn forward(&mut self, x: &[f64], n: usize, lin: usize) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cin * n * lin);
        let lout = self.out_len(lin);
        let ck = self.cin * self.kernel;
        let width = n * lout;
        self.cols.clear();
        self.cols.resize(ck * width, 0.0);
        for ci in 0..self.cin {
            for k in 0..self.kernel {
                let row = &mut self.cols[(ci * self.kernel + k) * width..][..width];
                for s in 0..n {
                    let src = &x[(ci * n + s) * lin..][..lin];
                    for j in 0..lout {
                        row[s * lout + j] = src[j * self.stride + k];
                    }
                }
            }
        }
        let mut y = vec![0.0; self.cout * width];
        for (co, chunk) in y.chunks_mut(width).enumerate() {
            chunk.fill(self.bias.value[co]);
        }
        gemm(self.cout, ck, width, &self.weight.value, (ck as isize, 1), &self.cols, (width as isize, 1), &mut y, 1.0);
        self.n = n;
        self.lin = lin;
        y
    }

    pub fn backward(&mut self, dy: &[f64]) -> Vec<f64> {
        let (n, lin) = (self.n, self.lin);
        let lout = self.out_len(lin);
        let ck = self.cin * self.kernel;
        let width = n * lout;
        for (co, chunk) in dy.chunks(width).enumerate() {
            self.bias.grad[co] += chunk.iter().sum::<f64>();
        }
        // dW += dy · colsᵀ
        gemm(self.cout, width, ck, dy, (width as isize, 1), &self.cols, (1, width as isize), &mut self.weight.grad, 1.0);
        // dcols = Wᵀ · dy
        let mut dcols = vec![0.0; ck * width];
        gemm(ck, self.cout, width, &self.weight.value, (1, ck as isize), dy, (width as isize, 1), &mut dcols, 0.0);
        let mut dx = vec![0.0; self.cin * n * lin];
        for ci in 0..self.cin {
            for k in 0..self.kernel {
                let row = &dcols[(ci * self.kernel + k) * width..][..width];
                for s in 0..n {
                    let dst = &mut dx[(ci * n + s) * lin..][..lin];
                    for j in 0..lout {
                        dst[j * self.stride + k] += row[s * lout + j];
                    }
                }
            }
        }
        dx
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// Fully connected layer on row-major `[batch, inputs]`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Param,
    pub bias: Param,
    x: Vec<f64>,
}

impl Dense {
    pub fn new(name: &str, inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        Dense {
            inputs,
            outputs,
            weight: Param::glorot(format!("{name}.weight"), &[outputs, inputs], inputs, outputs, rng),
            bias: Param::zeros(format!("{name}.bias"), &[outputs]),
            x: Vec::new(),
        }
    }

    pub fn forward(&mut self, x: &[f64], batch: usize) -> Vec<f64> {
        debug_assert_eq!(x.len(), batch * self.inputs);
        let mut y = Vec::with_capacity(batch * self.outputs);
        for _ in 0..batch {
            y.extend_from_slice(&self.bias.value);
        }
        let (i, o) = (self.inputs as isize, self.outputs);
        gemm(batch, self.inputs, o, x, (i, 1), &self.weight.value, (1, i), &mut y, 1.0);
        self.x.clear();
        self.x.extend_from_slice(x);
        y
    }

    pub fn backward(&mut self, dy: &[f64]) -> Vec<f64> {
        let batch = dy.len() / self.outputs;
        let (i, o) = (self.inputs, self.outputs);
        for row in dy.chunks(o) {
            for (g, d) in self.bias.grad.iter_mut().zip(row) {
                *g += d;
            }
        }
        // dW += dyᵀ · x
        gemm(o, batch, i, dy, (1, o as isize), &self.x, (i as isize, 1), &mut self.weight.grad, 1.0);
        let mut dx = vec![0.0; batch * i];
        gemm(batch, o, i, dy, (o as isize, 1), &self.weight.value, (i as isize, 1), &mut dx, 0.0);
        dx
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// Transposed 2-D convolution, kernel 4, stride 2, padding 1: doubles the
/// spatial size. Layout `[C, batch, H, W]`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub cin: usize,
    pub cout: usize,
    pub weight: Param,
    pub bias: Param,
    x: Vec<f64>,
    batch: usize,
    h: usize,
    w: usize,
}

const KT: usize = 4;
const ST: usize = 2;
const PT: usize = 1;

impl ConvTranspose2d {
    pub fn new(name: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        ConvTranspose2d {
            cin,
            cout,
            weight: Param::glorot(format!("{name}.weight"), &[cin, cout, KT, KT], cin * KT * KT, cout * KT * KT, rng),
            bias: Param::zeros(format!("{name}.bias"), &[cout]),
            x: Vec::new(),
            batch: 0,
            h: 0,
            w: 0,
        }
    }

    /// Output coordinate of input index `i` under kernel tap `k`.
    #[inline]
    fn out_index(i: usize, k: usize, size: usize) -> Option<usize> {
        let o = (i * ST + k).checked_sub(PT)?;
        (o < size).then_some(o)
    }

    pub fn forward(&mut self, x: &[f64], batch: usize, h: usize, w: usize) -> Vec<f64> {
        let hw = h * w;
        let width = batch * hw;
        debug_assert_eq!(x.len(), self.cin * width);
        let ckk = self.cout * KT * KT;
        // cols = Wᵀ · X, with W viewed as [cin, cout·k·k].
        let mut cols = vec![0.0; ckk * width];
        gemm(ckk, self.cin, width, &self.weight.value, (1, ckk as isize), x, (width as isize, 1), &mut cols, 0.0);
        let (ho, wo) = (2 * h, 2 * w);
        let mut y = vec![0.0; self.cout * batch * ho * wo];
        for co in 0..self.cout {
            y[co * batch * ho * wo..][..batch * ho * wo].fill(self.bias.value[co]);
            for ky in 0..KT {
                for kx in 0..KT {
                    let row = &cols[((co * KT + ky) * KT + kx) * width..][..width];
                    for b in 0..batch {
                        let out = &mut y[(co * batch + b) * ho * wo..][..ho * wo];
                        for iy in 0..h {
                            let Some(oy) = Self::out_index(iy, ky, ho) else { continue };
                            for ix in 0..w {
                                if let Some(ox) = Self::out_index(ix, kx, wo) {
                                    out[oy * wo + ox] += row[b * hw + iy * w + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
        self.x.clear();
        self.x.extend_from_slice(x);
        self.batch = batch;
        self.h = h;
        self.w = w;
        y
    }

    pub fn backward(&mut self, dy: &[f64]) -> Vec<f64> {
        let (batch, h, w) = (self.batch, self.h, self.w);
        let hw = h * w;
        let width = batch * hw;
        let (ho, wo) = (2 * h, 2 * w);
        let ckk = self.cout * KT * KT;
        for co in 0..self.cout {
            self.bias.grad[co] += dy[co * batch * ho * wo..][..batch * ho * wo].iter().sum::<f64>();
        }
        let mut dcols = vec![0.0; ckk * width];
        for co in 0..self.cout {
            for ky in 0..KT {
                for kx in 0..KT {
                    let row = &mut dcols[((co * KT + ky) * KT + kx) * width..][..width];
                    for b in 0..batch {
                        let g = &dy[(co * batch + b) * ho * wo..][..ho * wo];
                        for iy in 0..h {
                            let Some(oy) = Self::out_index(iy, ky, ho) else { continue };
                            for ix in 0..w {
                                if let Some(ox) = Self::out_index(ix, kx, wo) {
                                    row[b * hw + iy * w + ix] = g[oy * wo + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
        // dW += X · dcolsᵀ
        gemm(self.cin, width, ckk, &self.x, (width as isize, 1), &dcols, (1, width as isize), &mut self.weight.grad, 1.0);
        let mut dx = vec![0.0; self.cin * width];
        gemm(self.cin, ckk, width, &self.weight.value, (ckk as isize, 1), &dcols, (width as isize, 1), &mut dx, 0.0);
        dx
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

pub fn tanh_inplace(x: &mut [f64]) {
    x.iter_mut().for_each(|v| *v = v.tanh());
}

/// Backward through `y = tanh(x)` given the cached output `y`.
pub fn tanh_backward(y: &[f64], dy: &mut [f64]) {
    for (d, y) in dy.iter_mut().zip(y) {
        *d *= 1.0 - y * y;
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
