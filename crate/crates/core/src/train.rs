//! Minibatch SGD loops and evaluation.

use log::debug;
use serde::{Deserialize, Serialize};

use crate::data::{make_batches, Dataset};
use crate::error::{CfpError, Result};
use crate::nn::{Gradients, Network, SgdState};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Fractional epochs are allowed; the step count is rounded up.
    pub epochs: f64,
}

impl SgdConfig {
    pub fn steps(&self, n: usize) -> usize {
        steps_for_epochs(self.epochs, n, self.batch_size)
    }
}

pub fn steps_for_epochs(epochs: f64, n: usize, batch_size: usize) -> usize {
    let per_epoch = n.div_ceil(batch_size.max(1));
    (epochs * per_epoch as f64).ceil() as usize
}

/// Endless sequence of minibatch index lists: one seeded permutation per epoch.
pub struct BatchStream {
    n: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    pending: std::vec::IntoIter<Vec<usize>>,
}

impl BatchStream {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Self {
        BatchStream {
            n,
            batch_size,
            seed,
            epoch: 0,
            pending: Vec::new().into_iter(),
        }
    }
}

impl Iterator for BatchStream {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.n == 0 {
            return None;
        }
        if let Some(b) = self.pending.next() {
            return Some(b);
        }
        let epoch_seed = self.seed ^ self.epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        self.epoch += 1;
        self.pending = make_batches(self.n, self.batch_size, epoch_seed).into_iter();
        self.pending.next()
    }
}

/// One loss evaluation handed to [`sgd_loop`]'s objective.
pub struct StepLoss {
    pub loss: f64,
    pub grads: Gradients,
}

/// Runs `steps` SGD updates, asking `objective` for the loss and gradients on
/// each batch. `on_step` sees the network after each update.
#[allow(clippy::too_many_arguments)]
pub fn sgd_loop<O, S>(
    net: &mut Network,
    state: &mut SgdState,
    data: &Dataset,
    cfg: &SgdConfig,
    steps: usize,
    seed: u64,
    mut objective: O,
    mut on_step: S,
) -> Result<Vec<f64>>
where
    O: FnMut(&Network, &Tensor, &[usize]) -> Result<StepLoss>,
    S: FnMut(usize, &Network, f64) -> Result<bool>,
{
    let mut losses = Vec::with_capacity(steps);
    for (step, idx) in BatchStream::new(data.len(), cfg.batch_size, seed)
        .take(steps)
        .enumerate()
    {
        let (x, y) = data.gather(&idx);
        let StepLoss { loss, grads } = match objective(net, &x, &y) {
            Err(CfpError::NonFinite { .. }) => {
                return Err(CfpError::Diverged {
                    step,
                    last_valid: Box::new(net.clone()),
                })
            }
            r => r?,
        };
        if !loss.is_finite() || !grads.all_finite() {
            return Err(CfpError::Diverged {
                step,
                last_valid: Box::new(net.clone()),
            });
        }
        state.step(net, &grads, cfg.lr, cfg.momentum)?;
        losses.push(loss);
        if !on_step(step, net, loss)? {
            break;
        }
    }
    Ok(losses)
}

/// Plain cross-entropy training for `cfg.epochs`.
pub fn train(net: &mut Network, state: &mut SgdState, data: &Dataset, cfg: &SgdConfig, seed: u64) -> Result<Vec<f64>> {
    let steps = cfg.steps(data.len());
    let log_every = (steps / 10).max(1);
    sgd_loop(
        net,
        state,
        data,
        cfg,
        steps,
        seed,
        |n, x, y| {
            let (loss, grads) = n.backward_pass(x, y)?;
            Ok(StepLoss { loss, grads })
        },
        |step, _, loss| {
            if step % log_every == 0 {
                debug!("train step {step}/{steps} loss {loss:.5}");
            }
            Ok(true)
        },
    )
}

const EVAL_BATCH: usize = 500;

/// Predicted class for every sample, in order.
pub fn predict(net: &Network, data: &Dataset) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(data.len());
    for start in (0..data.len()).step_by(EVAL_BATCH) {
        let idx: Vec<usize> = (start..(start + EVAL_BATCH).min(data.len())).collect();
        let (x, _) = data.gather(&idx);
        let logits = net.forward(&x)?;
        let classes = logits.row_len();
        for row in logits.data().chunks_exact(classes) {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            out.push(best);
        }
    }
    Ok(out)
}

/// Classification error in percent.
pub fn error_rate(net: &Network, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let wrong = predict(net, data)?
        .iter()
        .zip(&data.labels)
        .filter(|(p, l)| p != l)
        .count();
    Ok(100.0 * wrong as f64 / data.len() as f64)
}
