use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::layers::*;
use super::loss::softmax_xent;
use crate::error::{CfpError, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Ordered layer stack applied to `[c, h, w]` inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub layers: Vec<Layer>,
    pub input_shape: [usize; 3],
}

/// Gradient (or any parameter-shaped quantity) for one parametric layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// One entry per network layer; `None` for layers without parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gradients {
    pub layers: Vec<Option<ParamGrad>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Weight,
    Bias,
}

/// Address of a single scalar parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCoord {
    pub layer: usize,
    pub kind: ParamKind,
    pub index: usize,
}

/// What the backward pass needs from each layer's forward evaluation.
pub(crate) enum Cache {
    Conv { input: Tensor },
    Pool { input_shape: Vec<usize>, argmax: Vec<u32> },
    Relu { output: Tensor },
    Flatten { input_shape: Vec<usize> },
    Dense { input: Tensor },
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Gradients {
            layers: net
                .layers
                .iter()
                .map(|l| {
                    l.params().map(|(w, b)| ParamGrad {
                        weights: vec![0.0; w.len()],
                        bias: vec![0.0; b.len()],
                    })
                })
                .collect(),
        }
    }

    /// Checks that every entry mirrors the corresponding parameter of `net`.
    pub fn matches(&self, net: &Network) -> bool {
        self.layers.len() == net.layers.len()
            && self.layers.iter().zip(&net.layers).all(|(g, l)| match (g, l.params()) {
                (None, None) => true,
                (Some(g), Some((w, b))) => g.weights.len() == w.len() && g.bias.len() == b.len(),
                _ => false,
            })
    }

    /// `self += scale * other`. Panics if the layouts differ.
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        assert_eq!(self.layers.len(), other.layers.len(), "gradient layout mismatch");
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            match (a, b) {
                (Some(a), Some(b)) => {
                    assert_eq!(a.weights.len(), b.weights.len(), "gradient layout mismatch");
                    assert_eq!(a.bias.len(), b.bias.len(), "gradient layout mismatch");
                    a.weights.iter_mut().zip(&b.weights).for_each(|(x, y)| *x += scale * y);
                    a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += scale * y);
                }
                (None, None) => {}
                _ => panic!("gradient layout mismatch"),
            }
        }
    }

    pub fn get(&self, coord: ParamCoord) -> Option<f64> {
        let g = self.layers.get(coord.layer)?.as_ref()?;
        match coord.kind {
            ParamKind::Weight => g.weights.get(coord.index).copied(),
            ParamKind::Bias => g.bias.get(coord.index).copied(),
        }
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flatten()
            .flat_map(|g| g.weights.iter().chain(&g.bias).copied())
    }

    pub fn all_finite(&self) -> bool {
        self.values().all(f64::is_finite)
    }
}

impl Network {
    pub fn new(layers: Vec<Layer>, input_shape: [usize; 3]) -> Result<Self> {
        let net = Network { layers, input_shape };
        net.check_structure()?;
        Ok(net)
    }

    /// Classic LeNet-5 as "20-50-800-500": conv5x5(20) pool conv5x5(50) pool
    /// flatten dense(800->500) relu dense(500->10), on 1x28x28 inputs.
    pub fn lenet5(rng: &mut Rng) -> Self {
        Self::lenet(20, 50, 500, rng)
    }

    /// LeNet-5 layout with configurable widths.
    pub fn lenet(conv1: usize, conv2: usize, hidden: usize, rng: &mut Rng) -> Self {
        let layers = vec![
            Layer::Conv2d(kaiming_conv(1, conv1, 5, rng)),
            Layer::MaxPool2,
            Layer::Conv2d(kaiming_conv(conv1, conv2, 5, rng)),
            Layer::MaxPool2,
            Layer::Flatten,
            Layer::Dense(kaiming_dense(conv2 * 16, hidden, rng)),
            Layer::Relu,
            Layer::Dense(kaiming_dense(hidden, 10, rng)),
        ];
        Network::new(layers, [1, 28, 28]).expect("lenet layout is consistent")
    }

    /// Per-sample output shape after each layer; index `i` is the output of layer `i`.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut cur = self.input_shape.to_vec();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            cur = layer.output_shape(i, &cur).map_err(|e| self.pair_error(i, e))?;
            out.push(cur.clone());
        }
        Ok(out)
    }

    /// Per-sample input shape of each layer.
    pub fn input_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let outs = self.shapes()?;
        let mut ins = vec![self.input_shape.to_vec()];
        ins.extend(outs.into_iter().take(self.layers.len().saturating_sub(1)));
        Ok(ins)
    }

    fn pair_error(&self, i: usize, e: CfpError) -> CfpError {
        // A mismatch at layer i is really a disagreement with the parametric layer feeding it.
        let Some(prev) = (0..i).rev().find(|&j| self.layers[j].has_params()) else {
            return e;
        };
        match e {
            CfpError::Shape { expected, actual, .. } => CfpError::Incompatible {
                layer: prev,
                kind: self.layers[prev].kind(),
                next: i,
                next_kind: self.layers[i].kind(),
                detail: format!("expects input {expected:?} but receives {actual:?}"),
            },
            other => other,
        }
    }

    fn check_structure(&self) -> Result<()> {
        self.shapes()?;
        let flattens: Vec<usize> = self
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, Layer::Flatten))
            .map(|(i, _)| i)
            .collect();
        let first_dense = self.layers.iter().position(|l| matches!(l, Layer::Dense(_)));
        let last_spatial = self
            .layers
            .iter()
            .rposition(|l| matches!(l, Layer::Conv2d(_) | Layer::MaxPool2));
        let ok = match (first_dense, last_spatial) {
            (Some(d), Some(s)) => flattens.len() == 1 && s < flattens[0] && flattens[0] < d,
            (Some(d), None) => flattens.len() == 1 && flattens[0] < d,
            (None, _) => flattens.len() <= 1,
        };
        if !ok {
            return Err(CfpError::Config(
                "network needs exactly one flatten between the last conv/pool and the first dense layer".into(),
            ));
        }
        Ok(())
    }

    pub fn conv_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, Layer::Conv2d(_)))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn conv(&self, index: usize) -> Result<&Conv2d> {
        match self.layers.get(index) {
            Some(Layer::Conv2d(c)) => Ok(c),
            _ => Err(CfpError::WrongLayer {
                layer: index,
                expected: "conv2d",
            }),
        }
    }

    /// Output-channel count of every conv layer, in order.
    pub fn filter_counts(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Conv2d(c) => Some(c.c_out),
                _ => None,
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .filter_map(Layer::params)
            .map(|(w, b)| w.len() + b.len())
            .sum()
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.layers.iter().rev().find_map(|l| match l {
            Layer::Dense(d) => Some(d.n_out),
            _ => None,
        })
    }

    pub fn param(&self, coord: ParamCoord) -> Option<f64> {
        let (w, b) = self.layers.get(coord.layer)?.params()?;
        match coord.kind {
            ParamKind::Weight => w.data().get(coord.index).copied(),
            ParamKind::Bias => b.get(coord.index).copied(),
        }
    }

    pub fn param_mut(&mut self, coord: ParamCoord) -> Option<&mut f64> {
        let (w, b) = self.layers.get_mut(coord.layer)?.params_mut()?;
        match coord.kind {
            ParamKind::Weight => w.data_mut().get_mut(coord.index),
            ParamKind::Bias => b.get_mut(coord.index),
        }
    }

    /// Every scalar parameter address, weights before biases, layer by layer.
    pub fn param_coords(&self) -> Vec<ParamCoord> {
        let mut out = Vec::new();
        for (layer, l) in self.layers.iter().enumerate() {
            if let Some((w, b)) = l.params() {
                out.extend((0..w.len()).map(|index| ParamCoord {
                    layer,
                    kind: ParamKind::Weight,
                    index,
                }));
                out.extend((0..b.len()).map(|index| ParamCoord {
                    layer,
                    kind: ParamKind::Bias,
                    index,
                }));
            }
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .filter_map(Layer::params)
            .all(|(w, b)| w.all_finite() && b.iter().all(|v| v.is_finite()))
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        if batch.shape().len() != 4 || batch.shape()[1..] != self.input_shape {
            return Err(CfpError::Shape {
                layer: 0,
                kind: "input",
                expected: self.input_shape.to_vec(),
                actual: batch.shape().get(1..).unwrap_or(&[]).to_vec(),
            });
        }
        Ok(())
    }

    /// Logits for a `[B, c, h, w]` batch.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_batch(batch)?;
        let mut x = batch.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            x = match layer {
                Layer::Conv2d(c) => conv2d_forward_batch(c, &x, i).map_err(|e| self.pair_error(i, e))?,
                Layer::MaxPool2 => maxpool2_forward_batch(&x, i)?.0,
                Layer::Relu => relu(x),
                Layer::Flatten => flatten(x)?,
                Layer::Dense(d) => dense_forward_batch(d, &x, i).map_err(|e| self.pair_error(i, e))?,
            };
        }
        Ok(x)
    }

    pub(crate) fn forward_cached(&self, batch: &Tensor) -> Result<(Tensor, Vec<Cache>)> {
        self.check_batch(batch)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut x = batch.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            x = match layer {
                Layer::Conv2d(c) => {
                    let y = conv2d_forward_batch(c, &x, i).map_err(|e| self.pair_error(i, e))?;
                    caches.push(Cache::Conv { input: x });
                    y
                }
                Layer::MaxPool2 => {
                    let (y, argmax) = maxpool2_forward_batch(&x, i)?;
                    caches.push(Cache::Pool {
                        input_shape: x.shape().to_vec(),
                        argmax,
                    });
                    y
                }
                Layer::Relu => {
                    let y = relu(x);
                    caches.push(Cache::Relu { output: y.clone() });
                    y
                }
                Layer::Flatten => {
                    caches.push(Cache::Flatten {
                        input_shape: x.shape().to_vec(),
                    });
                    flatten(x)?
                }
                Layer::Dense(d) => {
                    let y = dense_forward_batch(d, &x, i).map_err(|e| self.pair_error(i, e))?;
                    caches.push(Cache::Dense { input: x });
                    y
                }
            };
        }
        Ok((x, caches))
    }

    /// Reverse-mode pass from an upstream logit gradient.
    pub(crate) fn backward(&self, caches: Vec<Cache>, dlogits: Tensor) -> Result<Gradients> {
        let mut grads = Gradients {
            layers: vec![None; self.layers.len()],
        };
        // Nothing upstream of the first parametric layer needs an input gradient.
        let first_param = self.layers.iter().position(Layer::has_params).unwrap_or(0);
        let mut g = dlogits;
        for (i, (layer, cache)) in self.layers.iter().zip(caches).enumerate().rev() {
            let need_dx = i > first_param;
            g = match (layer, cache) {
                (Layer::Conv2d(c), Cache::Conv { input }) => {
                    let (dx, dw, db) = conv2d_backward_batch(c, &input, &g, need_dx);
                    grads.layers[i] = Some(ParamGrad { weights: dw, bias: db });
                    match dx {
                        Some(dx) => dx,
                        None => break,
                    }
                }
                (Layer::Dense(d), Cache::Dense { input }) => {
                    let (dx, dw, db) = dense_backward_batch(d, &input, &g, need_dx);
                    grads.layers[i] = Some(ParamGrad { weights: dw, bias: db });
                    match dx {
                        Some(dx) => dx,
                        None => break,
                    }
                }
                (Layer::MaxPool2, Cache::Pool { input_shape, argmax }) => {
                    maxpool2_backward_batch(&input_shape, &argmax, &g)
                }
                (Layer::Relu, Cache::Relu { output }) => {
                    let mut g = g;
                    for (gv, &y) in g.data_mut().iter_mut().zip(output.data()) {
                        if y <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    g
                }
                (Layer::Flatten, Cache::Flatten { input_shape }) => g.reshape(input_shape)?,
                _ => unreachable!("cache built by forward_cached for the same layer list"),
            };
        }
        // Layers before the first parametric one get no entry; fill parametric gaps with zeros.
        for (slot, layer) in grads.layers.iter_mut().zip(&self.layers) {
            if slot.is_none() {
                if let Some((w, b)) = layer.params() {
                    *slot = Some(ParamGrad {
                        weights: vec![0.0; w.len()],
                        bias: vec![0.0; b.len()],
                    });
                }
            }
        }
        Ok(grads)
    }

    /// Mean cross-entropy on a batch and its exact gradient w.r.t. every parameter.
    pub fn backward_pass(&self, batch: &Tensor, labels: &[usize]) -> Result<(f64, Gradients)> {
        let (logits, caches) = self.forward_cached(batch)?;
        let (loss, dlogits) = softmax_xent(&logits, labels)?;
        let grads = self.backward(caches, dlogits)?;
        Ok((loss, grads))
    }

    /// Mean cross-entropy only.
    pub fn loss(&self, batch: &Tensor, labels: &[usize]) -> Result<f64> {
        let logits = self.forward(batch)?;
        Ok(softmax_xent(&logits, labels)?.0)
    }
}

fn relu(mut x: Tensor) -> Tensor {
    x.data_mut().iter_mut().for_each(|v| {
        if *v < 0.0 {
            *v = 0.0;
        }
    });
    x
}

fn flatten(x: Tensor) -> Result<Tensor> {
    let b = x.rows();
    let n = x.row_len();
    x.reshape(vec![b, n])
}

fn kaiming_conv(c_in: usize, c_out: usize, k: usize, rng: &mut Rng) -> Conv2d {
    let fan_in = c_in * k * k;
    let w = kaiming(fan_in, c_out * fan_in, rng);
    Conv2d::new(
        c_in,
        c_out,
        k,
        k,
        Tensor::new(vec![c_out, c_in, k, k], w).unwrap(),
        vec![0.0; c_out],
    )
    .unwrap()
}

fn kaiming_dense(n_in: usize, n_out: usize, rng: &mut Rng) -> Dense {
    let w = kaiming(n_in, n_in * n_out, rng);
    Dense::new(
        n_in,
        n_out,
        Tensor::new(vec![n_out, n_in], w).unwrap(),
        vec![0.0; n_out],
    )
    .unwrap()
}

/// Normal(0, sqrt(2 / fan_in)) samples.
pub fn kaiming(fan_in: usize, count: usize, rng: &mut Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    (0..count).map(|_| normal.sample(rng)).collect()
}
