use serde::{Deserialize, Serialize};

use super::network::{Gradients, Network};
use crate::error::{CfpError, Result};

/// Momentum buffers for SGD; empty until the first step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SgdState {
    pub velocity: Option<Gradients>,
}

impl SgdState {
    pub fn new() -> Self {
        SgdState::default()
    }

    /// `v <- momentum * v + g; w <- w - lr * v` for every parameter.
    pub fn step(&mut self, net: &mut Network, grads: &Gradients, lr: f64, momentum: f64) -> Result<()> {
        if lr.is_nan() || lr < 0.0 || !(0.0..1.0).contains(&momentum) {
            return Err(CfpError::Config(format!(
                "sgd needs lr >= 0 and momentum in [0, 1), got lr={lr} momentum={momentum}"
            )));
        }
        if !grads.matches(net) {
            return Err(CfpError::Shape {
                layer: 0,
                kind: "gradients",
                expected: vec![net.num_params()],
                actual: vec![grads.values().count()],
            });
        }
        let velocity = match &mut self.velocity {
            Some(v) if v.matches(net) => v,
            Some(_) => {
                return Err(CfpError::Shape {
                    layer: 0,
                    kind: "sgd velocity",
                    expected: vec![net.num_params()],
                    actual: vec![self.velocity.as_ref().map_or(0, |v| v.values().count())],
                })
            }
            None => self.velocity.insert(Gradients::zeros_like(net)),
        };
        for ((layer, v), g) in net.layers.iter_mut().zip(&mut velocity.layers).zip(&grads.layers) {
            let (Some((w, b)), Some(v), Some(g)) = (layer.params_mut(), v.as_mut(), g.as_ref()) else {
                continue;
            };
            for ((p, vi), gi) in w.data_mut().iter_mut().zip(&mut v.weights).zip(&g.weights) {
                *vi = momentum * *vi + gi;
                *p -= lr * *vi;
            }
            for ((p, vi), gi) in b.iter_mut().zip(&mut v.bias).zip(&g.bias) {
                *vi = momentum * *vi + gi;
                *p -= lr * *vi;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Dense, Layer, ParamGrad};
    use crate::tensor::Tensor;

    // A one-weight network: Flatten -> Dense(1 -> 1).
    fn scalar_net(w: f64) -> Network {
        let d = Dense::new(1, 1, Tensor::new(vec![1, 1], vec![w]).unwrap(), vec![0.0]).unwrap();
        Network::new(vec![Layer::Flatten, Layer::Dense(d)], [1, 1, 1]).unwrap()
    }

    fn grad(g: f64) -> Gradients {
        Gradients {
            layers: vec![
                None,
                Some(ParamGrad {
                    weights: vec![g],
                    bias: vec![0.0],
                }),
            ],
        }
    }

    fn weight(net: &Network) -> f64 {
        net.layers[1].params().unwrap().0.data()[0]
    }

    #[test]
    fn zero_lr_leaves_parameters() {
        let mut net = scalar_net(1.0);
        SgdState::new().step(&mut net, &grad(0.5), 0.0, 0.9).unwrap();
        assert_eq!(weight(&net), 1.0);
    }

    #[test]
    fn plain_step() {
        let mut net = scalar_net(1.0);
        SgdState::new().step(&mut net, &grad(0.5), 0.1, 0.0).unwrap();
        assert!((weight(&net) - 0.95).abs() < 1e-15);
    }

    #[test]
    fn momentum_recurrence() {
        let mut net = scalar_net(1.0);
        let mut state = SgdState::new();
        state.step(&mut net, &grad(0.5), 0.1, 0.9).unwrap();
        assert!((weight(&net) - 0.95).abs() < 1e-15);
        state.step(&mut net, &grad(0.5), 0.1, 0.9).unwrap();
        let v = state.velocity.as_ref().unwrap().layers[1].as_ref().unwrap().weights[0];
        assert!((v - 0.95).abs() < 1e-15);
        assert!((weight(&net) - 0.855).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_hyperparameters_and_shapes() {
        let mut net = scalar_net(1.0);
        assert!(SgdState::new().step(&mut net, &grad(0.5), -0.1, 0.0).is_err());
        assert!(SgdState::new().step(&mut net, &grad(0.5), 0.1, 1.0).is_err());
        let bad = Gradients {
            layers: vec![None, None],
        };
        assert!(SgdState::new().step(&mut net, &bad, 0.1, 0.0).is_err());
    }
}
