//! One pruning episode and the layer-wise fallback built on it.

use log::{info, warn};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::{PruneConfig, Splits};
use crate::corr::select_episode;
use crate::cost::{cost_report, flops_total};
use crate::error::{CfpError, Result};
use crate::nn::{Network, SgdState};
use crate::regularizer::{optimize_episode, pair_rho, RhoTraceRow};
use crate::rng::{seeded, RngState};
use crate::surgery::{choose_victims, prune_filters, validate_network, PrunePlan};
use crate::train::{error_rate, train};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Global,
    Layerwise,
    Done,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairLog {
    pub layer: usize,
    pub a: usize,
    pub b: usize,
    pub rho_before: f64,
    pub rho_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: usize,
    pub phase: Phase,
    pub quotas: Vec<usize>,
    pub pairs: Vec<PairLog>,
    pub victims: PrunePlan,
    pub filters_before: Vec<usize>,
    pub filters_after: Vec<usize>,
    /// Validation error (percent) of the baseline the gate compares against.
    pub base_err: f64,
    pub err_before: f64,
    /// After surgery, before finetuning.
    pub err_pruned: Option<f64>,
    pub err_after: Option<f64>,
    pub flops_before: u64,
    pub flops_after: u64,
    pub accepted: bool,
    pub note: Option<String>,
    pub trace: Vec<RhoTraceRow>,
}

pub struct EpisodeOutcome {
    /// The pruned network if accepted, otherwise the restored pre-episode one.
    pub network: Network,
    pub log: EpisodeLog,
}

impl EpisodeOutcome {
    pub fn accepted(&self) -> bool {
        self.log.accepted
    }
}

/// Accept iff `new_err <= base_err + epsilon`.
pub fn tolerance_gate(base_err: f64, new_err: f64, epsilon: f64) -> bool {
    new_err <= base_err + epsilon
}

/// Restores the network from a checkpoint.
pub fn rollback(ck: &Checkpoint) -> Network {
    ck.rollback().0
}

/// Largest quota that keeps `floor` filters and fits disjoint pairs.
fn quota_cap(c_out: usize, floor: usize) -> usize {
    c_out.saturating_sub(floor).min(c_out / 2)
}

/// Global-episode quotas: explicit ones from the config, or `pairs_per_episode`
/// split by each prunable layer's FLOPs share (at least 1 each). All are
/// clamped so every layer keeps its floor.
pub fn global_quotas(net: &Network, cfg: &PruneConfig) -> Result<Vec<usize>> {
    let convs = net.conv_indices();
    let report = cost_report(net, 1)?;
    let caps: Vec<usize> = convs
        .iter()
        .enumerate()
        .map(|(o, &l)| quota_cap(net.conv(l).map(|c| c.c_out).unwrap_or(0), cfg.floor(o)))
        .collect();
    let wanted: Vec<usize> = match &cfg.quotas {
        Some(q) => {
            if q.len() != convs.len() {
                return Err(CfpError::Config(format!(
                    "{} quotas for {} conv layers",
                    q.len(),
                    convs.len()
                )));
            }
            q.clone()
        }
        None => {
            let flops: Vec<u64> = convs.iter().map(|&l| report.layers[l].flops).collect();
            let prunable: u64 = flops.iter().zip(&caps).filter(|(_, &c)| c > 0).map(|(f, _)| f).sum();
            flops
                .iter()
                .zip(&caps)
                .map(|(&f, &cap)| {
                    if cap == 0 || prunable == 0 {
                        0
                    } else {
                        ((cfg.pairs_per_episode as f64 * f as f64 / prunable as f64).round() as usize).max(1)
                    }
                })
                .collect()
        }
    };
    Ok(wanted.iter().zip(&caps).map(|(&w, &c)| w.min(c)).collect())
}

fn derive_seeds(seed: u64) -> (u64, u64) {
    let mut rng = seeded(seed);
    (rng.random(), rng.random())
}

/// select -> optimize -> victims -> surgery -> finetune -> gate.
///
/// On rejection, or if optimization or finetuning diverges, the returned
/// network is restored from a checkpoint taken before the episode started.
#[allow(clippy::too_many_arguments)]
pub fn run_episode(
    net: &Network,
    cfg: &PruneConfig,
    data: &Splits,
    quotas: &[usize],
    base_err: f64,
    index: usize,
    phase: Phase,
    seed: u64,
) -> Result<EpisodeOutcome> {
    let snapshot = Checkpoint {
        network: net.clone(),
        optimizer: SgdState::new(),
        rng: RngState::capture(&seeded(seed)),
        episode: index as u64,
        meta: String::new(),
    }
    .to_bytes();
    let flops_before = flops_total(net, 1)?;
    let mut log = EpisodeLog {
        episode: index,
        phase,
        quotas: quotas.to_vec(),
        pairs: vec![],
        victims: PrunePlan::default(),
        filters_before: net.filter_counts(),
        filters_after: net.filter_counts(),
        base_err,
        err_before: error_rate(net, &data.val)?,
        err_pruned: None,
        err_after: None,
        flops_before,
        flops_after: flops_before,
        accepted: false,
        note: None,
        trace: vec![],
    };
    let reject = |mut log: EpisodeLog, note: String| -> Result<EpisodeOutcome> {
        warn!("episode {index} rejected: {note}");
        log.note = Some(note);
        log.accepted = false;
        log.filters_after = log.filters_before.clone();
        log.flops_after = log.flops_before;
        let restored = rollback(&Checkpoint::from_bytes(&snapshot)?);
        Ok(EpisodeOutcome { network: restored, log })
    };

    let ep = select_episode(net, quotas, index)?;
    if ep.is_empty() || ep.num_pairs() == 0 {
        return reject(log, "no eligible pairs".into());
    }
    let (opt_seed, ft_seed) = derive_seeds(seed);
    let (optimized, trace) = match optimize_episode(net, &ep, &cfg.reg_config(), Some(&data.train), opt_seed) {
        Ok(r) => r,
        Err(CfpError::Diverged { step, .. }) => return reject(log, format!("optimization diverged at step {step}")),
        Err(e) => return Err(e),
    };
    for p in ep.pairs() {
        log.pairs.push(PairLog {
            layer: p.layer,
            a: p.a,
            b: p.b,
            rho_before: p.rho,
            rho_after: pair_rho(&optimized, p)?,
        });
    }
    log.trace = trace;

    let plan = choose_victims(&ep, &optimized)?;
    let mut pruned = prune_filters(&optimized, &plan)?;
    validate_network(&pruned)?;
    log.victims = plan;
    log.err_pruned = Some(error_rate(&pruned, &data.val)?);

    let ft = cfg.finetune_sgd(cfg.finetune_epochs);
    match train(&mut pruned, &mut SgdState::new(), &data.train, &ft, ft_seed) {
        Ok(_) => {}
        Err(CfpError::Diverged { step, .. }) => return reject(log, format!("finetuning diverged at step {step}")),
        Err(e) => return Err(e),
    }
    let err_after = error_rate(&pruned, &data.val)?;
    log.err_after = Some(err_after);
    if !tolerance_gate(base_err, err_after, cfg.epsilon) {
        let note = format!("error {err_after:.3}% exceeds {base_err:.3}% + {}", cfg.epsilon);
        return reject(log, note);
    }
    log.accepted = true;
    log.filters_after = pruned.filter_counts();
    log.flops_after = flops_total(&pruned, 1)?;
    info!(
        "episode {index} accepted: filters {:?} -> {:?}, val error {:.2}%",
        log.filters_before, log.filters_after, err_after
    );
    Ok(EpisodeOutcome { network: pruned, log })
}

/// Layer-by-layer progress of the fallback phase.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FallbackCursor {
    pub layer: usize,
    pub frozen: Vec<bool>,
}

impl FallbackCursor {
    pub fn new(num_convs: usize) -> Self {
        FallbackCursor {
            layer: 0,
            frozen: vec![false; num_convs],
        }
    }

    /// Quotas for the next single-layer episode, or `None` when every layer is
    /// frozen. Layers already at their floor are frozen on the way.
    pub fn next_quotas(&mut self, net: &Network, cfg: &PruneConfig) -> Result<Option<Vec<usize>>> {
        let convs = net.conv_indices();
        while self.layer < convs.len() {
            let c_out = net.conv(convs[self.layer])?.c_out;
            if !self.frozen[self.layer] && quota_cap(c_out, cfg.floor(self.layer)) > 0 {
                let mut q = vec![0; convs.len()];
                q[self.layer] = 1;
                return Ok(Some(q));
            }
            self.frozen[self.layer] = true;
            self.layer += 1;
        }
        Ok(None)
    }

    pub fn record(&mut self, accepted: bool) {
        if !accepted && self.layer < self.frozen.len() {
            self.frozen[self.layer] = true;
            self.layer += 1;
        }
    }
}

/// Single-layer, single-pair episodes from the first conv layer to the last;
/// the first rejection freezes a layer for good. `next_index` numbers the
/// episodes and `seeds` supplies one seed per episode.
pub fn layerwise_fallback(
    net: &Network,
    cfg: &PruneConfig,
    data: &Splits,
    base_err: f64,
    next_index: usize,
    seeds: &mut impl FnMut() -> u64,
) -> Result<(Network, Vec<EpisodeLog>)> {
    let mut cursor = FallbackCursor::new(net.conv_indices().len());
    let mut net = net.clone();
    let mut logs = Vec::new();
    while let Some(q) = cursor.next_quotas(&net, cfg)? {
        let out = run_episode(
            &net,
            cfg,
            data,
            &q,
            base_err,
            next_index + logs.len(),
            Phase::Layerwise,
            seeds(),
        )?;
        cursor.record(out.accepted());
        net = out.network;
        logs.push(out.log);
    }
    Ok((net, logs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gate_examples() {
        assert!(tolerance_gate(0.9, 1.0, 0.3));
        assert!(!tolerance_gate(0.9, 1.5, 0.3));
        assert!(tolerance_gate(0.5, 0.75, 0.25));
        assert!(tolerance_gate(0.9, 0.2, 0.3));
    }

    #[test]
    fn flops_proportional_quotas() {
        let net = Network::lenet5(&mut seeded(0));
        let cfg = PruneConfig::default();
        // conv1 288k vs conv2 1.6M FLOPs: 8 pairs split ~1.2 / ~6.8.
        assert_eq!(global_quotas(&net, &cfg).unwrap(), vec![1, 7]);
        let cfg = PruneConfig {
            min_filters: Some(vec![3, 48]),
            ..PruneConfig::default()
        };
        assert_eq!(global_quotas(&net, &cfg).unwrap(), vec![1, 2]);
        let cfg = PruneConfig {
            min_filters: Some(vec![20, 50]),
            ..PruneConfig::default()
        };
        assert_eq!(global_quotas(&net, &cfg).unwrap(), vec![0, 0]);
    }

    #[test]
    fn explicit_quotas_are_clamped() {
        let net = Network::lenet(4, 9, 10, &mut seeded(1));
        let cfg = PruneConfig {
            quotas: Some(vec![5, 3]),
            ..PruneConfig::default()
        };
        assert_eq!(global_quotas(&net, &cfg).unwrap(), vec![2, 3]);
        let cfg = PruneConfig {
            quotas: Some(vec![1]),
            ..PruneConfig::default()
        };
        assert!(global_quotas(&net, &cfg).is_err());
    }

    #[test]
    fn cursor_freezes_and_advances() {
        let net = Network::lenet(3, 1, 10, &mut seeded(2));
        let cfg = PruneConfig::default();
        let mut c = FallbackCursor::new(2);
        assert_eq!(c.next_quotas(&net, &cfg).unwrap(), Some(vec![1, 0]));
        c.record(true);
        assert_eq!(c.next_quotas(&net, &cfg).unwrap(), Some(vec![1, 0]));
        c.record(false);
        // conv2 has a single filter, so nothing is left to try.
        assert_eq!(c.next_quotas(&net, &cfg).unwrap(), None);
        assert_eq!(c.frozen, vec![true, true]);
    }
}
