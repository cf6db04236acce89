use serde::{Deserialize, Serialize};

use super::kernels::{matmul_acc, transpose};
use crate::error::{CfpError, Result};
use crate::tensor::Tensor;

/// Valid (unpadded), stride-1 convolution. Weights are `[c_out, c_in, k_h, k_w]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub c_in: usize,
    pub c_out: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub weights: Tensor,
    pub bias: Vec<f64>,
}

/// Fully connected layer, `y = W x + b` with `W` stored `[n_out, n_in]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub n_in: usize,
    pub n_out: usize,
    pub weights: Tensor,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    Conv2d(Conv2d),
    MaxPool2,
    Relu,
    Flatten,
    Dense(Dense),
}

impl Conv2d {
    pub fn new(c_in: usize, c_out: usize, k_h: usize, k_w: usize, weights: Tensor, bias: Vec<f64>) -> Result<Self> {
        let want = vec![c_out, c_in, k_h, k_w];
        if weights.shape() != want.as_slice() {
            return Err(CfpError::Shape {
                layer: 0,
                kind: "conv2d",
                expected: want,
                actual: weights.shape().to_vec(),
            });
        }
        if bias.len() != c_out {
            return Err(CfpError::Shape {
                layer: 0,
                kind: "conv2d bias",
                expected: vec![c_out],
                actual: vec![bias.len()],
            });
        }
        Ok(Conv2d {
            c_in,
            c_out,
            k_h,
            k_w,
            weights,
            bias,
        })
    }

    /// Weights per filter: `c_in * k_h * k_w`.
    pub fn kernel_volume(&self) -> usize {
        self.c_in * self.k_h * self.k_w
    }

    pub fn filter(&self, f: usize) -> &[f64] {
        let v = self.kernel_volume();
        &self.weights.data()[f * v..(f + 1) * v]
    }

    pub fn output_shape(&self, input: &[usize]) -> Option<[usize; 3]> {
        match *input {
            [c, h, w] if c == self.c_in && h >= self.k_h && w >= self.k_w => {
                Some([self.c_out, h - self.k_h + 1, w - self.k_w + 1])
            }
            _ => None,
        }
    }
}

impl Dense {
    pub fn new(n_in: usize, n_out: usize, weights: Tensor, bias: Vec<f64>) -> Result<Self> {
        if weights.shape() != [n_out, n_in] {
            return Err(CfpError::Shape {
                layer: 0,
                kind: "dense",
                expected: vec![n_out, n_in],
                actual: weights.shape().to_vec(),
            });
        }
        if bias.len() != n_out {
            return Err(CfpError::Shape {
                layer: 0,
                kind: "dense bias",
                expected: vec![n_out],
                actual: vec![bias.len()],
            });
        }
        Ok(Dense {
            n_in,
            n_out,
            weights,
            bias,
        })
    }
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv2d(_) => "conv2d",
            Layer::MaxPool2 => "maxpool2",
            Layer::Relu => "relu",
            Layer::Flatten => "flatten",
            Layer::Dense(_) => "dense",
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, Layer::Conv2d(_) | Layer::Dense(_))
    }

    /// Weight and bias slices for parametric layers.
    pub fn params(&self) -> Option<(&Tensor, &[f64])> {
        match self {
            Layer::Conv2d(c) => Some((&c.weights, &c.bias)),
            Layer::Dense(d) => Some((&d.weights, &d.bias)),
            _ => None,
        }
    }

    pub fn params_mut(&mut self) -> Option<(&mut Tensor, &mut Vec<f64>)> {
        match self {
            Layer::Conv2d(c) => Some((&mut c.weights, &mut c.bias)),
            Layer::Dense(d) => Some((&mut d.weights, &mut d.bias)),
            _ => None,
        }
    }

    /// Per-sample output shape, with a structured error naming this layer on mismatch.
    pub fn output_shape(&self, index: usize, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = |expected: Vec<usize>| CfpError::Shape {
            layer: index,
            kind: self.kind(),
            expected,
            actual: input.to_vec(),
        };
        match self {
            Layer::Conv2d(c) => c
                .output_shape(input)
                .map(|s| s.to_vec())
                .ok_or_else(|| mismatch(vec![c.c_in, c.k_h, c.k_w])),
            Layer::MaxPool2 => match *input {
                [c, h, w] if h % 2 == 0 && w % 2 == 0 => Ok(vec![c, h / 2, w / 2]),
                [_, h, w] => Err(CfpError::OddPool { layer: index, h, w }),
                _ => Err(mismatch(vec![0, 0, 0])),
            },
            Layer::Relu => Ok(input.to_vec()),
            Layer::Flatten => Ok(vec![input.iter().product()]),
            Layer::Dense(d) => match *input {
                [n] if n == d.n_in => Ok(vec![d.n_out]),
                _ => Err(mismatch(vec![d.n_in])),
            },
        }
    }
}

/// Builds the `[K, P]` patch matrix for one sample, `K = c_in*k_h*k_w` ordered
/// `(c, r, s)` and `P = h_o*w_o` ordered row-major.
fn im2col(x: &[f64], c_in: usize, h: usize, w: usize, k_h: usize, k_w: usize, cols: &mut [f64]) {
    let (ho, wo) = (h - k_h + 1, w - k_w + 1);
    let p = ho * wo;
    for c in 0..c_in {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for r in 0..k_h {
            for s in 0..k_w {
                let row = ((c * k_h + r) * k_w + s) * p;
                for i in 0..ho {
                    let src = &plane[(i + r) * w + s..(i + r) * w + s + wo];
                    cols[row + i * wo..row + i * wo + wo].copy_from_slice(src);
                }
            }
        }
    }
}

/// Scatter-adds a `[K, P]` patch gradient back onto an input-shaped buffer.
fn col2im(dcols: &[f64], c_in: usize, h: usize, w: usize, k_h: usize, k_w: usize, dx: &mut [f64]) {
    let (ho, wo) = (h - k_h + 1, w - k_w + 1);
    let p = ho * wo;
    for c in 0..c_in {
        for r in 0..k_h {
            for s in 0..k_w {
                let row = ((c * k_h + r) * k_w + s) * p;
                for i in 0..ho {
                    let dst = &mut dx[c * h * w + (i + r) * w + s..c * h * w + (i + r) * w + s + wo];
                    for (d, g) in dst.iter_mut().zip(&dcols[row + i * wo..row + i * wo + wo]) {
                        *d += g;
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward_batch(layer: &Conv2d, input: &Tensor, index: usize) -> Result<Tensor> {
    let (b, [c, h, w]) = split_batch3(input, index, "conv2d")?;
    let [co, ho, wo] = layer.output_shape(&[c, h, w]).ok_or_else(|| CfpError::Shape {
        layer: index,
        kind: "conv2d",
        expected: vec![layer.c_in, layer.k_h, layer.k_w],
        actual: vec![c, h, w],
    })?;
    let k = layer.kernel_volume();
    let p = ho * wo;
    let mut cols = vec![0.0; k * p];
    let mut out = vec![0.0; b * co * p];
    for n in 0..b {
        im2col(
            &input.data()[n * c * h * w..(n + 1) * c * h * w],
            c,
            h,
            w,
            layer.k_h,
            layer.k_w,
            &mut cols,
        );
        let o = &mut out[n * co * p..(n + 1) * co * p];
        matmul_acc(co, k, p, layer.weights.data(), &cols, o);
        for (f, chunk) in o.chunks_exact_mut(p).enumerate() {
            let bias = layer.bias[f];
            chunk.iter_mut().for_each(|v| *v += bias);
        }
    }
    Tensor::new(vec![b, co, ho, wo], out)
}

/// Returns `(dx, dw, db)`; `dx` is skipped when `need_dx` is false.
pub(crate) fn conv2d_backward_batch(
    layer: &Conv2d,
    input: &Tensor,
    dout: &Tensor,
    need_dx: bool,
) -> (Option<Tensor>, Vec<f64>, Vec<f64>) {
    let b = input.rows();
    let (c, h, w) = (input.shape()[1], input.shape()[2], input.shape()[3]);
    let (co, ho, wo) = (dout.shape()[1], dout.shape()[2], dout.shape()[3]);
    let k = layer.kernel_volume();
    let p = ho * wo;
    let mut cols = vec![0.0; k * p];
    let mut dw = vec![0.0; co * k];
    let mut db = vec![0.0; co];
    let wt = if need_dx {
        transpose(co, k, layer.weights.data())
    } else {
        Vec::new()
    };
    let mut dx = if need_dx { vec![0.0; input.len()] } else { Vec::new() };
    let mut dcols = if need_dx { vec![0.0; k * p] } else { Vec::new() };
    for n in 0..b {
        let x = &input.data()[n * c * h * w..(n + 1) * c * h * w];
        let g = &dout.data()[n * co * p..(n + 1) * co * p];
        im2col(x, c, h, w, layer.k_h, layer.k_w, &mut cols);
        let cols_t = transpose(k, p, &cols);
        matmul_acc(co, p, k, g, &cols_t, &mut dw);
        for (f, chunk) in g.chunks_exact(p).enumerate() {
            db[f] += chunk.iter().sum::<f64>();
        }
        if need_dx {
            dcols.iter_mut().for_each(|v| *v = 0.0);
            matmul_acc(k, co, p, &wt, g, &mut dcols);
            col2im(
                &dcols,
                c,
                h,
                w,
                layer.k_h,
                layer.k_w,
                &mut dx[n * c * h * w..(n + 1) * c * h * w],
            );
        }
    }
    let dx = need_dx.then(|| Tensor::new(input.shape().to_vec(), dx).expect("input-shaped gradient"));
    (dx, dw, db)
}

/// Max over non-overlapping 2x2 windows. The second value holds, per output
/// element, the flat input offset of the winner (first row-major occurrence on ties).
pub(crate) fn maxpool2_forward_batch(input: &Tensor, index: usize) -> Result<(Tensor, Vec<u32>)> {
    let (b, [c, h, w]) = split_batch3(input, index, "maxpool2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(CfpError::OddPool { layer: index, h, w });
    }
    let (ho, wo) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(b * c * ho * wo);
    let mut arg = Vec::with_capacity(b * c * ho * wo);
    for plane in 0..b * c {
        let base = plane * h * w;
        for i in 0..ho {
            for j in 0..wo {
                let candidates = [
                    base + 2 * i * w + 2 * j,
                    base + 2 * i * w + 2 * j + 1,
                    base + (2 * i + 1) * w + 2 * j,
                    base + (2 * i + 1) * w + 2 * j + 1,
                ];
                let mut best = candidates[0];
                for &cand in &candidates[1..] {
                    if x[cand] > x[best] {
                        best = cand;
                    }
                }
                out.push(x[best]);
                arg.push(best as u32);
            }
        }
    }
    Ok((Tensor::new(vec![b, c, ho, wo], out)?, arg))
}

pub(crate) fn maxpool2_backward_batch(input_shape: &[usize], argmax: &[u32], dout: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(input_shape.to_vec());
    let d = dx.data_mut();
    for (&a, &g) in argmax.iter().zip(dout.data()) {
        d[a as usize] += g;
    }
    dx
}

pub(crate) fn dense_forward_batch(layer: &Dense, input: &Tensor, index: usize) -> Result<Tensor> {
    if input.shape().len() != 2 || input.shape()[1] != layer.n_in {
        return Err(CfpError::Shape {
            layer: index,
            kind: "dense",
            expected: vec![layer.n_in],
            actual: input.shape().get(1..).unwrap_or(&[]).to_vec(),
        });
    }
    let b = input.rows();
    let wt = transpose(layer.n_out, layer.n_in, layer.weights.data());
    let mut out = vec![0.0; b * layer.n_out];
    matmul_acc(b, layer.n_in, layer.n_out, input.data(), &wt, &mut out);
    for row in out.chunks_exact_mut(layer.n_out) {
        for (v, bias) in row.iter_mut().zip(&layer.bias) {
            *v += bias;
        }
    }
    Tensor::new(vec![b, layer.n_out], out)
}

pub(crate) fn dense_backward_batch(
    layer: &Dense,
    input: &Tensor,
    dout: &Tensor,
    need_dx: bool,
) -> (Option<Tensor>, Vec<f64>, Vec<f64>) {
    let b = input.rows();
    let (n_in, n_out) = (layer.n_in, layer.n_out);
    let dout_t = transpose(b, n_out, dout.data());
    let mut dw = vec![0.0; n_out * n_in];
    matmul_acc(n_out, b, n_in, &dout_t, input.data(), &mut dw);
    let mut db = vec![0.0; n_out];
    for row in dout.data().chunks_exact(n_out) {
        for (acc, g) in db.iter_mut().zip(row) {
            *acc += g;
        }
    }
    let dx = need_dx.then(|| {
        let mut dx = vec![0.0; b * n_in];
        matmul_acc(b, n_out, n_in, dout.data(), layer.weights.data(), &mut dx);
        Tensor::new(vec![b, n_in], dx).expect("input-shaped gradient")
    });
    (dx, dw, db)
}

fn split_batch3(input: &Tensor, index: usize, kind: &'static str) -> Result<(usize, [usize; 3])> {
    match *input.shape() {
        [b, c, h, w] => Ok((b, [c, h, w])),
        _ => Err(CfpError::Shape {
            layer: index,
            kind,
            expected: vec![0, 0, 0],
            actual: input.shape().get(1..).unwrap_or(&[]).to_vec(),
        }),
    }
}

/// Single-sample convolution of a `[c_in, h, w]` input.
pub fn conv2d_forward(input: &Tensor, layer: &Conv2d) -> Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(input.shape());
    let out = conv2d_forward_batch(layer, &input.clone().reshape(shape)?, 0)?;
    let s = out.shape()[1..].to_vec();
    out.reshape(s)
}

/// Single-sample 2x2 max-pool of a `[c, h, w]` input.
pub fn maxpool2_forward(input: &Tensor) -> Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(input.shape());
    let (out, _) = maxpool2_forward_batch(&input.clone().reshape(shape)?, 0)?;
    let s = out.shape()[1..].to_vec();
    out.reshape(s)
}

/// Single-vector dense layer.
pub fn dense_forward(input: &[f64], layer: &Dense) -> Result<Vec<f64>> {
    let x = Tensor::new(vec![1, input.len()], input.to_vec())?;
    Ok(dense_forward_batch(layer, &x, 0)?.into_data())
}
