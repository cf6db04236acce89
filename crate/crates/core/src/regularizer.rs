//! Correlation regularizer `C = exp(-sum rho)` over the pairs of an episode,
//! its analytic gradient, and the episode-optimization loop.

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::corr::{centred, CorrPair, Episode};
use crate::data::Dataset;
use crate::error::{CfpError, Result};
use crate::nn::{Gradients, Network, SgdState};
use crate::tensor::Tensor;
use crate::train::{steps_for_epochs, BatchStream};

const SIGMA_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegConfig {
    pub lambda: f64,
    /// Optimization budget in epochs of the training data.
    pub opt_epochs: f64,
    /// Hard cap on steps; required when optimizing without data.
    pub max_steps: Option<usize>,
    pub opt_lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Stop once the mean correlation of the selected pairs reaches this.
    pub target_rho: f64,
}

impl Default for RegConfig {
    fn default() -> Self {
        RegConfig {
            lambda: 1.0,
            opt_epochs: 1.0,
            max_steps: None,
            opt_lr: 0.01,
            momentum: 0.9,
            batch_size: 64,
            target_rho: 0.99,
        }
    }
}

impl RegConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda.is_nan() || self.lambda < 0.0 {
            return Err(CfpError::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.target_rho > 0.0 && self.target_rho <= 1.0) {
            return Err(CfpError::Config(format!(
                "target_rho must be in (0, 1], got {}",
                self.target_rho
            )));
        }
        Ok(())
    }
}

/// Per-pair pieces needed for both the value and the gradient.
struct PairStats {
    cx: Vec<f64>,
    cy: Vec<f64>,
    sx: f64,
    sy: f64,
    rho: f64,
}

fn sigma_guard(sigma: f64, layer: usize, filter: usize) -> f64 {
    if sigma < SIGMA_FLOOR {
        warn!("layer {layer} filter {filter}: sigma {sigma:e} floored at {SIGMA_FLOOR:e}");
        SIGMA_FLOOR
    } else {
        sigma
    }
}

fn pair_stats(net: &Network, p: &CorrPair) -> Result<PairStats> {
    let conv = net.conv(p.layer)?;
    let (cx, sx) = centred(conv.filter(p.a)).ok_or(CfpError::DegenerateFilter {
        layer: p.layer,
        filter: p.a,
    })?;
    let (cy, sy) = centred(conv.filter(p.b)).ok_or(CfpError::DegenerateFilter {
        layer: p.layer,
        filter: p.b,
    })?;
    let sx = sigma_guard(sx, p.layer, p.a);
    let sy = sigma_guard(sy, p.layer, p.b);
    let n = cx.len() as f64;
    let rho = cx.iter().zip(&cy).map(|(a, b)| a * b).sum::<f64>() / (n * sx * sy);
    Ok(PairStats { cx, cy, sx, sy, rho })
}

/// Current (unclamped) correlation of one pair.
pub fn pair_rho(net: &Network, p: &CorrPair) -> Result<f64> {
    Ok(pair_stats(net, p)?.rho)
}

/// Mean current correlation over all pairs of the episode; 1 for an empty episode.
pub fn mean_rho(net: &Network, ep: &Episode) -> Result<f64> {
    let n = ep.num_pairs();
    if n == 0 {
        return Ok(1.0);
    }
    let sum = ep.pairs().map(|p| pair_rho(net, p)).sum::<Result<f64>>()?;
    Ok(sum / n as f64)
}

pub fn reg_value(net: &Network, ep: &Episode) -> Result<f64> {
    let sum = ep.pairs().map(|p| pair_rho(net, p)).sum::<Result<f64>>()?;
    Ok((-sum).exp())
}

/// Analytic gradient of [`reg_value`]. Only conv weights of filters in a
/// selected pair are nonzero; biases always get zero.
///
/// With `x~ = x - mean(x)`, `d rho / d x_i = y~_i / (n sx sy) - rho x~_i / (n sx^2)`.
pub fn reg_grad(net: &Network, ep: &Episode) -> Result<Gradients> {
    let stats = ep.pairs().map(|p| pair_stats(net, p)).collect::<Result<Vec<_>>>()?;
    let value = (-stats.iter().map(|s| s.rho).sum::<f64>()).exp();
    let mut grads = Gradients::zeros_like(net);
    for (p, s) in ep.pairs().zip(&stats) {
        let volume = s.cx.len();
        let n = volume as f64;
        let g = grads.layers[p.layer].as_mut().expect("conv layer has parameters");
        // dC/drho = -C
        let scale = -value;
        let gx = &mut g.weights[p.a * volume..(p.a + 1) * volume];
        for ((out, &x), &y) in gx.iter_mut().zip(&s.cx).zip(&s.cy) {
            *out += scale * (y / (n * s.sx * s.sy) - s.rho * x / (n * s.sx * s.sx));
        }
        let gy = &mut g.weights[p.b * volume..(p.b + 1) * volume];
        for ((out, &x), &y) in gy.iter_mut().zip(&s.cx).zip(&s.cy) {
            *out += scale * (x / (n * s.sx * s.sy) - s.rho * y / (n * s.sy * s.sy));
        }
    }
    Ok(grads)
}

#[derive(Debug, Clone)]
pub struct RegLoss {
    pub total: f64,
    pub data: f64,
    pub reg: f64,
    pub grads: Gradients,
}

/// `C(theta) + lambda * C_S` on one batch, with summed gradients.
pub fn regularized_loss(
    net: &Network,
    batch: &Tensor,
    labels: &[usize],
    ep: &Episode,
    cfg: &RegConfig,
) -> Result<RegLoss> {
    let (data, mut grads) = net.backward_pass(batch, labels)?;
    if cfg.lambda == 0.0 || ep.is_empty() {
        return Ok(RegLoss {
            total: data,
            data,
            reg: if ep.is_empty() { 1.0 } else { reg_value(net, ep)? },
            grads,
        });
    }
    let reg = reg_value(net, ep)?;
    grads.add_scaled(&reg_grad(net, ep)?, cfg.lambda);
    Ok(RegLoss {
        total: data + cfg.lambda * reg,
        data,
        reg,
        grads,
    })
}

/// One row of the optimization trace. `data_loss` is absent when no data term is used.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RhoTraceRow {
    pub step: usize,
    pub mean_rho: f64,
    pub data_loss: Option<f64>,
    pub reg_loss: f64,
}

/// Minimizes the regularized objective for the episode's pairs.
///
/// With `data`, each step uses a minibatch of cross-entropy plus `lambda * C_S`;
/// without it, only the regularizer is minimized. Row 0 of the trace is the
/// starting point. Stops early once the mean pair correlation reaches
/// `cfg.target_rho`.
pub fn optimize_episode(
    net: &Network,
    ep: &Episode,
    cfg: &RegConfig,
    data: Option<&Dataset>,
    seed: u64,
) -> Result<(Network, Vec<RhoTraceRow>)> {
    cfg.validate()?;
    if ep.is_empty() {
        return Err(CfpError::Config("cannot optimize an empty episode".into()));
    }
    let steps = match (data, cfg.max_steps) {
        (Some(d), cap) => {
            let s = steps_for_epochs(cfg.opt_epochs, d.len(), cfg.batch_size);
            cap.map_or(s, |c| s.min(c))
        }
        (None, Some(cap)) => cap,
        (None, None) => {
            return Err(CfpError::Config("pure-regularizer optimization needs max_steps".into()));
        }
    };
    let mut net = net.clone();
    let mut state = SgdState::new();
    let mut batches = data.map(|d| BatchStream::new(d.len(), cfg.batch_size, seed));
    let mut trace = vec![RhoTraceRow {
        step: 0,
        mean_rho: mean_rho(&net, ep)?,
        data_loss: None,
        reg_loss: reg_value(&net, ep)?,
    }];
    for step in 1..=steps {
        if trace.last().unwrap().mean_rho >= cfg.target_rho {
            break;
        }
        let (data_loss, reg, grads) = match (data, batches.as_mut()) {
            (Some(d), Some(stream)) => {
                let idx = stream.next().expect("non-empty dataset");
                let (x, y) = d.gather(&idx);
                let l = match regularized_loss(&net, &x, &y, ep, cfg) {
                    Err(CfpError::NonFinite { .. }) => {
                        return Err(CfpError::Diverged {
                            step,
                            last_valid: Box::new(net),
                        })
                    }
                    r => r?,
                };
                (Some(l.data), l.reg, l.grads)
            }
            _ => {
                let mut g = reg_grad(&net, ep)?;
                for layer in g.layers.iter_mut().flatten() {
                    layer.weights.iter_mut().for_each(|v| *v *= cfg.lambda);
                }
                (None, reg_value(&net, ep)?, g)
            }
        };
        if !reg.is_finite() || !grads.all_finite() || data_loss.is_some_and(|d| !d.is_finite()) {
            return Err(CfpError::Diverged {
                step,
                last_valid: Box::new(net),
            });
        }
        state.step(&mut net, &grads, cfg.opt_lr, cfg.momentum)?;
        let row = RhoTraceRow {
            step,
            mean_rho: mean_rho(&net, ep)?,
            data_loss,
            reg_loss: reg_value(&net, ep)?,
        };
        if step % 50 == 0 {
            debug!("episode {} step {step}: mean rho {:.5}", ep.index, row.mean_rho);
        }
        trace.push(row);
    }
    let (first, last) = (trace[0].mean_rho, trace.last().unwrap().mean_rho);
    if last < first {
        warn!("episode {}: mean rho fell from {first:.4} to {last:.4}", ep.index);
    }
    Ok((net, trace))
}

pub fn rho_trace_csv(trace: &[RhoTraceRow]) -> String {
    let mut out = String::from("step,mean_rho,data_loss,reg_loss\n");
    for r in trace {
        let data = r.data_loss.map(|d| d.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{}\n", r.step, r.mean_rho, data, r.reg_loss));
    }
    out
}
