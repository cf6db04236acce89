//! Report files derived from episode logs and a run summary.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::episode::EpisodeLog;
use crate::corr::{corr_matrix, flatten_filters};
use crate::cost::Compression;
use crate::error::{CfpError, Result};
use crate::nn::Network;

pub const SUMMARY_JSON: &str = "summary.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub method: String,
    pub base_test_err: f64,
    pub test_err: f64,
    pub base_val_err: f64,
    pub val_err: f64,
    pub episodes: usize,
    pub accepted: usize,
    /// Largest off-diagonal |rho| per conv layer.
    pub max_abs_rho_before: Vec<Option<f64>>,
    pub max_abs_rho_after: Vec<Option<f64>>,
    pub compression: Compression,
}

pub fn max_abs_rho(net: &Network) -> Result<Vec<Option<f64>>> {
    net.conv_indices()
        .into_iter()
        .map(|l| match corr_matrix(&flatten_filters(net, l)?) {
            Ok(m) => Ok(m.max_abs_off_diagonal()),
            Err(CfpError::DegenerateFilter { .. }) => Ok(None),
            Err(e) => Err(e),
        })
        .collect()
}

fn dashed(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("-")
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Report files as `(name, contents)`; a pure function of its inputs.
pub fn emit_report(logs: &[EpisodeLog], summary: &Summary) -> Vec<(&'static str, String)> {
    let c = &summary.compression;
    let rows = [
        ("Baseline", &c.base.filters, summary.base_test_err, c.base.flops, 0.0),
        (
            summary.method.as_str(),
            &c.pruned.filters,
            summary.test_err,
            c.pruned.flops,
            c.flops_reduction_pct,
        ),
    ];
    let mut text = format!(
        "{:<10}{:>10}{:>10}{:>12}{:>10}\n",
        "Method", "Filters", "Error%", "FLOPs", "Pruned%"
    );
    let mut csv = String::from("method,filters,error_pct,flops,pruned_flops_pct\n");
    for (method, filters, err, flops, pct) in rows {
        text.push_str(&format!(
            "{method:<10}{:>10}{err:>10.2}{flops:>12}{pct:>10.2}\n",
            dashed(filters)
        ));
        csv.push_str(&format!("{method},{},{err},{flops},{pct}\n", dashed(filters)));
    }
    text.push_str(&format!(
        "\nepisodes {} (accepted {}), TRM -{:.2}%, params -{:.2}%\n",
        summary.episodes, summary.accepted, c.trm_reduction_pct, c.params_reduction_pct
    ));
    text.push_str(&format!(
        "validation error {:.2}% -> {:.2}%\n",
        summary.base_val_err, summary.val_err
    ));
    text.push_str(&format!(
        "max |rho| per conv layer {:?} -> {:?}\n",
        summary.max_abs_rho_before, summary.max_abs_rho_after
    ));

    let mut episodes = String::from(
        "episode,phase,quotas,pairs,victims,filters_before,filters_after,err_before,err_pruned,err_after,flops_before,flops_after,accepted\n",
    );
    let mut trace = String::from("episode,step,mean_rho,data_loss,reg_loss\n");
    for l in logs {
        let pairs = l
            .pairs
            .iter()
            .map(|p| format!("{}:{}/{}", p.layer, p.a, p.b))
            .collect::<Vec<_>>()
            .join(" ");
        let victims = l
            .victims
            .layers
            .iter()
            .map(|(layer, v)| format!("{layer}:{}", dashed(v)))
            .collect::<Vec<_>>()
            .join(" ");
        episodes.push_str(&format!(
            "{},{},{},{pairs},{victims},{},{},{},{},{},{},{},{}\n",
            l.episode,
            serde_json::to_value(l.phase).unwrap().as_str().unwrap_or_default(),
            dashed(&l.quotas),
            dashed(&l.filters_before),
            dashed(&l.filters_after),
            l.err_before,
            opt(l.err_pruned),
            opt(l.err_after),
            l.flops_before,
            l.flops_after,
            l.accepted
        ));
        for r in &l.trace {
            trace.push_str(&format!(
                "{},{},{},{},{}\n",
                l.episode,
                r.step,
                r.mean_rho,
                opt(r.data_loss),
                r.reg_loss
            ));
        }
    }
    vec![
        ("summary.txt", text),
        ("summary.csv", csv),
        ("episodes.csv", episodes),
        ("rho_trace.csv", trace),
        ("cost.csv", c.pruned.to_csv()),
        (
            SUMMARY_JSON,
            serde_json::to_string_pretty(summary).expect("summary serializes") + "\n",
        ),
    ]
}

pub fn write_report(dir: &Path, logs: &[EpisodeLog], summary: &Summary) -> Result<()> {
    for (name, contents) in emit_report(logs, summary) {
        let path = dir.join(name);
        std::fs::write(&path, contents).map_err(|e| CfpError::io(&path, e))?;
    }
    Ok(())
}

pub fn read_summary(dir: &Path) -> Result<Summary> {
    let path = dir.join(SUMMARY_JSON);
    let text = std::fs::read_to_string(&path).map_err(|e| CfpError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| CfpError::Checkpoint(format!("{}: {e}", path.display())))
}
