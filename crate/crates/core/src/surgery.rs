//! Structural filter removal with exact downstream repair.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corr::Episode;
use crate::data::NUM_CLASSES;
use crate::error::{CfpError, Result};
use crate::nn::{Conv2d, Dense, Layer, Network};
use crate::tensor::Tensor;

/// Victim filters per conv layer (network layer index -> sorted unique indices).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrunePlan {
    pub layers: BTreeMap<usize, Vec<usize>>,
}

impl PrunePlan {
    pub fn is_empty(&self) -> bool {
        self.layers.values().all(Vec::is_empty)
    }

    pub fn num_victims(&self) -> usize {
        self.layers.values().map(Vec::len).sum()
    }

    pub fn single(layer: usize, victims: Vec<usize>) -> Self {
        let mut v = victims;
        v.sort_unstable();
        PrunePlan {
            layers: BTreeMap::from([(layer, v)]),
        }
    }
}

fn l1(w: &[f64]) -> f64 {
    w.iter().map(|v| v.abs()).sum()
}

/// From each pair, removes the filter with the smaller L1 weight norm (ties: higher index).
pub fn choose_victims(ep: &Episode, net: &Network) -> Result<PrunePlan> {
    let mut plan = PrunePlan::default();
    for lp in &ep.layers {
        if lp.pairs.is_empty() {
            continue;
        }
        let conv = net.conv(lp.layer)?;
        let victims = plan.layers.entry(lp.layer).or_default();
        for p in &lp.pairs {
            let (na, nb) = (l1(conv.filter(p.a)), l1(conv.filter(p.b)));
            let victim = if na < nb {
                p.a
            } else if nb < na {
                p.b
            } else {
                p.a.max(p.b)
            };
            victims.push(victim);
        }
        victims.sort_unstable();
    }
    Ok(plan)
}

enum Keep {
    All,
    Channels(Vec<usize>),
    Features(Vec<usize>),
}

fn kept(total: usize, victims: &[usize]) -> Vec<usize> {
    (0..total).filter(|i| victims.binary_search(i).is_err()).collect()
}

fn check_plan(net: &Network, plan: &PrunePlan) -> Result<()> {
    for (&layer, victims) in &plan.layers {
        let conv = net.conv(layer)?;
        if victims.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CfpError::Plan {
                layer,
                detail: format!("victims {victims:?} must be sorted and unique"),
            });
        }
        if let Some(&v) = victims.iter().find(|&&v| v >= conv.c_out) {
            return Err(CfpError::Plan {
                layer,
                detail: format!("victim {v} out of range for {} filters", conv.c_out),
            });
        }
        if victims.len() >= conv.c_out && conv.c_out > 0 {
            return Err(CfpError::Plan {
                layer,
                detail: format!(
                    "removing {} of {} filters would empty the layer",
                    victims.len(),
                    conv.c_out
                ),
            });
        }
    }
    Ok(())
}

/// Copy of `net` without the planned filters.
///
/// Each victim's weights and bias are removed; the next conv loses the matching
/// input-channel slices, and a conv feeding `Flatten -> Dense` loses the dense
/// input columns `v*h*w .. (v+1)*h*w` (channel-major flatten). Pooling and ReLU
/// are per-channel and pass deletions through. Untouched parameters are copied
/// bit for bit.
pub fn prune_filters(net: &Network, plan: &PrunePlan) -> Result<Network> {
    check_plan(net, plan)?;
    let inputs = net.input_shapes()?;
    let mut keep = Keep::All;
    let mut layers = Vec::with_capacity(net.layers.len());
    for (i, layer) in net.layers.iter().enumerate() {
        let new = match layer {
            Layer::Conv2d(c) => {
                let mut c = match &keep {
                    Keep::All => c.clone(),
                    Keep::Channels(ch) => select_input_channels(c, ch),
                    Keep::Features(_) => unreachable!("flatten precedes every dense layer"),
                };
                keep = match plan.layers.get(&i).filter(|v| !v.is_empty()) {
                    Some(victims) => {
                        let k = kept(c.c_out, victims);
                        c = select_output_channels(&c, &k);
                        Keep::Channels(k)
                    }
                    None => Keep::All,
                };
                Layer::Conv2d(c)
            }
            Layer::Flatten => {
                if let Keep::Channels(ch) = &keep {
                    let spatial: usize = inputs[i][1..].iter().product();
                    keep = Keep::Features(ch.iter().flat_map(|&c| c * spatial..(c + 1) * spatial).collect());
                }
                Layer::Flatten
            }
            Layer::Dense(d) => {
                let d = match &keep {
                    Keep::Features(cols) => select_columns(d, cols),
                    _ => d.clone(),
                };
                keep = Keep::All;
                Layer::Dense(d)
            }
            Layer::MaxPool2 | Layer::Relu => layer.clone(),
        };
        layers.push(new);
    }
    Network::new(layers, net.input_shape)
}

fn select_output_channels(c: &Conv2d, keep: &[usize]) -> Conv2d {
    let v = c.kernel_volume();
    let mut w = Vec::with_capacity(keep.len() * v);
    for &f in keep {
        w.extend_from_slice(c.filter(f));
    }
    Conv2d {
        c_in: c.c_in,
        c_out: keep.len(),
        k_h: c.k_h,
        k_w: c.k_w,
        weights: Tensor::new(vec![keep.len(), c.c_in, c.k_h, c.k_w], w).unwrap(),
        bias: keep.iter().map(|&f| c.bias[f]).collect(),
    }
}

fn select_input_channels(c: &Conv2d, keep: &[usize]) -> Conv2d {
    let plane = c.k_h * c.k_w;
    let mut w = Vec::with_capacity(c.c_out * keep.len() * plane);
    for f in 0..c.c_out {
        let filter = c.filter(f);
        for &ch in keep {
            w.extend_from_slice(&filter[ch * plane..(ch + 1) * plane]);
        }
    }
    Conv2d {
        c_in: keep.len(),
        c_out: c.c_out,
        k_h: c.k_h,
        k_w: c.k_w,
        weights: Tensor::new(vec![c.c_out, keep.len(), c.k_h, c.k_w], w).unwrap(),
        bias: c.bias.clone(),
    }
}

fn select_columns(d: &Dense, cols: &[usize]) -> Dense {
    let src = d.weights.data();
    let mut w = Vec::with_capacity(d.n_out * cols.len());
    for o in 0..d.n_out {
        let row = &src[o * d.n_in..(o + 1) * d.n_in];
        w.extend(cols.iter().map(|&c| row[c]));
    }
    Dense {
        n_in: cols.len(),
        n_out: d.n_out,
        weights: Tensor::new(vec![d.n_out, cols.len()], w).unwrap(),
        bias: d.bias.clone(),
    }
}

/// Full forward pass on one zero input; logits must be `[1, 10]`.
pub fn validate_network(net: &Network) -> Result<()> {
    let [c, h, w] = net.input_shape;
    let logits = net.forward(&Tensor::zeros(vec![1, c, h, w]))?;
    if logits.shape() != [1, NUM_CLASSES] {
        return Err(CfpError::Shape {
            layer: net.layers.len().saturating_sub(1),
            kind: "logits",
            expected: vec![1, NUM_CLASSES],
            actual: logits.shape().to_vec(),
        });
    }
    Ok(())
}
