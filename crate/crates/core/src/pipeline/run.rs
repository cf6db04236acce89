//! Resumable end-to-end driver: baseline, global episodes, layer-wise
//! fallback, final finetune, report.
//!
//! Run directory layout:
//! `config.toml`, `baseline.ckpt`, `state.ckpt` (rolling), `episodes.jsonl`
//! (append-only), `snapshots/episode-NNNN.ckpt` (accepted episodes),
//! `final.ckpt` and the report files.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::{PruneConfig, Splits};
use super::episode::{global_quotas, run_episode, EpisodeLog, FallbackCursor, Phase};
use super::report::{max_abs_rho, write_report, Summary};
use crate::cost::compression_report;
use crate::error::{CfpError, Result};
use crate::nn::{Network, SgdState};
use crate::rng::{seeded, Rng, RngState};
use crate::train::{error_rate, train};

pub const STATE_FILE: &str = "state.ckpt";
pub const BASELINE_FILE: &str = "baseline.ckpt";
pub const FINAL_FILE: &str = "final.ckpt";
pub const LOG_FILE: &str = "episodes.jsonl";
pub const CONFIG_FILE: &str = "config.toml";

/// Pipeline bookkeeping stored as JSON inside the rolling checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub phase: Phase,
    pub base_val_err: f64,
    pub episodes: usize,
    pub accepted: usize,
    pub cursor: FallbackCursor,
    pub config: PruneConfig,
}

pub struct RunResult {
    pub network: Network,
    pub baseline: Network,
    pub logs: Vec<EpisodeLog>,
    pub summary: Summary,
}

pub struct Pipeline {
    pub cfg: PruneConfig,
    pub dir: PathBuf,
    pub data: Splits,
    pub baseline: Network,
    pub net: Network,
    pub state: RunState,
    pub logs: Vec<EpisodeLog>,
    rng: Rng,
}

/// Trains LeNet-5 from scratch with the config's baseline settings.
pub fn train_baseline(cfg: &PruneConfig, data: &Splits) -> Result<Network> {
    let mut rng = seeded(cfg.seed);
    let [c1, c2, hidden] = cfg.lenet;
    let mut net = Network::lenet(c1, c2, hidden, &mut rng);
    info!(
        "training baseline: {} images, {} epochs, lr {}",
        data.train.len(),
        cfg.train_epochs,
        cfg.train_lr
    );
    train(
        &mut net,
        &mut SgdState::new(),
        &data.train,
        &cfg.train_sgd(),
        rng.random(),
    )?;
    Ok(net)
}

pub fn save_network(net: &Network, path: &Path) -> Result<()> {
    Checkpoint {
        network: net.clone(),
        optimizer: SgdState::new(),
        rng: RngState::capture(&seeded(0)),
        episode: 0,
        meta: String::new(),
    }
    .save(path)
}

pub fn read_logs(path: &Path) -> Result<Vec<EpisodeLog>> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(vec![]),
        Err(e) => return Err(CfpError::io(path, e)),
    };
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| CfpError::Checkpoint(format!("{}: {e}", path.display()))))
        .collect()
}

fn write_logs(path: &Path, logs: &[EpisodeLog]) -> Result<()> {
    let mut text = String::new();
    for l in logs {
        text.push_str(&serde_json::to_string(l).expect("logs serialize"));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| CfpError::io(path, e))
}

impl Pipeline {
    /// Starts a new run in `dir`, or resumes the one already there.
    ///
    /// `baseline` is used only for a new run; without it the baseline is trained.
    pub fn open(cfg: PruneConfig, dir: &Path, baseline: Option<Network>) -> Result<Self> {
        cfg.validate()?;
        fs::create_dir_all(dir.join("snapshots")).map_err(|e| CfpError::io(dir, e))?;
        let data = cfg.load_splits()?;
        let state_path = dir.join(STATE_FILE);
        if state_path.exists() {
            return Pipeline::resume(cfg, dir, data);
        }
        fs::write(dir.join(CONFIG_FILE), cfg.to_toml()).map_err(|e| CfpError::io(dir.join(CONFIG_FILE), e))?;
        let base_path = dir.join(BASELINE_FILE);
        let baseline = match baseline {
            Some(b) => b,
            None if base_path.exists() => Checkpoint::load(&base_path)?.network,
            None => train_baseline(&cfg, &data)?,
        };
        save_network(&baseline, &base_path)?;
        let base_val_err = error_rate(&baseline, &data.val)?;
        info!("baseline validation error {base_val_err:.3}%");
        let state = RunState {
            phase: Phase::Global,
            base_val_err,
            episodes: 0,
            accepted: 0,
            cursor: FallbackCursor::new(baseline.conv_indices().len()),
            config: cfg.clone(),
        };
        let p = Pipeline {
            rng: seeded(cfg.seed ^ 0xC0FF_EE00),
            cfg,
            dir: dir.to_path_buf(),
            data,
            net: baseline.clone(),
            baseline,
            state,
            logs: vec![],
        };
        write_logs(&p.dir.join(LOG_FILE), &[])?;
        p.save_state()?;
        Ok(p)
    }

    fn resume(cfg: PruneConfig, dir: &Path, data: Splits) -> Result<Self> {
        let ck = Checkpoint::load(&dir.join(STATE_FILE))?;
        let state: RunState = serde_json::from_str(&ck.meta).map_err(|e| CfpError::Checkpoint(e.to_string()))?;
        if state.config != cfg {
            return Err(CfpError::Config(format!(
                "{} holds a run with a different configuration",
                dir.display()
            )));
        }
        let mut logs = read_logs(&dir.join(LOG_FILE))?;
        if logs.len() < state.episodes {
            return Err(CfpError::Checkpoint(format!(
                "log has {} episodes but the checkpoint expects {}",
                logs.len(),
                state.episodes
            )));
        }
        // Lines past the checkpoint belong to an episode that never committed.
        logs.truncate(state.episodes);
        write_logs(&dir.join(LOG_FILE), &logs)?;
        info!(
            "resuming {} after {} episodes ({:?})",
            dir.display(),
            state.episodes,
            state.phase
        );
        Ok(Pipeline {
            baseline: Checkpoint::load(&dir.join(BASELINE_FILE))?.network,
            rng: ck.rng.restore(),
            net: ck.network,
            cfg,
            dir: dir.to_path_buf(),
            data,
            state,
            logs,
        })
    }

    fn save_state(&self) -> Result<()> {
        Checkpoint {
            network: self.net.clone(),
            optimizer: SgdState::new(),
            rng: RngState::capture(&self.rng),
            episode: self.state.episodes as u64,
            meta: serde_json::to_string(&self.state).expect("state serializes"),
        }
        .save(&self.dir.join(STATE_FILE))
    }

    fn commit(&mut self, log: EpisodeLog, network: Network) -> Result<()> {
        let path = self.dir.join(LOG_FILE);
        let mut f = OpenOptions::new()
            .append(true)
            .create(true)
            .open(&path)
            .map_err(|e| CfpError::io(&path, e))?;
        writeln!(f, "{}", serde_json::to_string(&log).expect("logs serialize")).map_err(|e| CfpError::io(&path, e))?;
        if log.accepted {
            self.state.accepted += 1;
            save_network(
                &network,
                &self.dir.join(format!("snapshots/episode-{:04}.ckpt", log.episode)),
            )?;
        }
        self.net = network;
        self.state.episodes += 1;
        self.logs.push(log);
        self.save_state()
    }

    /// Runs at most one episode. Returns `false` once the episode phases are over.
    pub fn step(&mut self) -> Result<bool> {
        loop {
            if self.state.episodes >= self.cfg.max_episodes && self.state.phase != Phase::Done {
                self.state.phase = Phase::Done;
                self.save_state()?;
            }
            let quotas = match self.state.phase {
                Phase::Done => return Ok(false),
                Phase::Global => {
                    let q = global_quotas(&self.net, &self.cfg)?;
                    if q.iter().all(|&v| v == 0) {
                        self.state.phase = Phase::Layerwise;
                        continue;
                    }
                    q
                }
                Phase::Layerwise => match self.state.cursor.next_quotas(&self.net, &self.cfg)? {
                    Some(q) => q,
                    None => {
                        self.state.phase = Phase::Done;
                        continue;
                    }
                },
            };
            let phase = self.state.phase;
            let seed = self.rng.random();
            let out = run_episode(
                &self.net,
                &self.cfg,
                &self.data,
                &quotas,
                self.state.base_val_err,
                self.state.episodes,
                phase,
                seed,
            )?;
            let accepted = out.accepted();
            match phase {
                Phase::Global if !accepted => {
                    info!("global episode rejected; switching to layer-wise pruning");
                    self.state.phase = Phase::Layerwise;
                }
                Phase::Layerwise => self.state.cursor.record(accepted),
                _ => {}
            }
            self.commit(out.log, out.network)?;
            return Ok(true);
        }
    }

    /// Runs the remaining episodes, the final finetune and the report.
    pub fn run(mut self) -> Result<RunResult> {
        while self.step()? {}
        self.finish()
    }

    fn finish(mut self) -> Result<RunResult> {
        if self.state.accepted > 0 && self.cfg.final_finetune_epochs > 0.0 {
            info!("final finetune: {} epochs", self.cfg.final_finetune_epochs);
            let seed = self.rng.random();
            let ft = self.cfg.finetune_sgd(self.cfg.final_finetune_epochs);
            train(&mut self.net, &mut SgdState::new(), &self.data.train, &ft, seed)?;
        }
        Checkpoint {
            network: self.net.clone(),
            optimizer: SgdState::new(),
            rng: RngState::capture(&self.rng),
            episode: self.state.episodes as u64,
            meta: serde_json::to_string(&self.state).expect("state serializes"),
        }
        .save(&self.dir.join(FINAL_FILE))?;
        let summary = Summary {
            method: "CFP".into(),
            base_test_err: error_rate(&self.baseline, &self.data.test)?,
            test_err: error_rate(&self.net, &self.data.test)?,
            base_val_err: self.state.base_val_err,
            val_err: error_rate(&self.net, &self.data.val)?,
            episodes: self.state.episodes,
            accepted: self.state.accepted,
            max_abs_rho_before: max_abs_rho(&self.baseline)?,
            max_abs_rho_after: max_abs_rho(&self.net)?,
            compression: compression_report(&self.baseline, &self.net, 1)?,
        };
        write_report(&self.dir, &self.logs, &summary)?;
        info!(
            "done: filters {:?}, test error {:.2}% (baseline {:.2}%), FLOPs -{:.2}%",
            self.net.filter_counts(),
            summary.test_err,
            summary.base_test_err,
            summary.compression.flops_reduction_pct
        );
        Ok(RunResult {
            network: self.net,
            baseline: self.baseline,
            logs: self.logs,
            summary,
        })
    }
}

/// `Pipeline::open(..).run()` in one call.
pub fn run_full_pipeline(cfg: PruneConfig, dir: &Path, baseline: Option<Network>) -> Result<RunResult> {
    Pipeline::open(cfg, dir, baseline)?.run()
}
