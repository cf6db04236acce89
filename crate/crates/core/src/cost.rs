//! FLOPs and memory accounting.
//!
//! Conv FLOPs are `c_in * k_w * k_h * w_o * h_o * c_o * B`, dense FLOPs
//! `n_in * n_out * B`; pooling, activations and flatten are free. Memory
//! uses 4 bytes per value: weights `4 * k_w * k_h * c_in * c_o` and feature
//! maps `4 * w_o * h_o * c_o * B` for every layer that materializes a new
//! map (conv, pool, dense). ReLU is in place and flatten is a view, so both
//! contribute nothing.

use serde::{Deserialize, Serialize};

use crate::error::{CfpError, Result};
use crate::nn::{Layer, Network};

pub const BYTES_PER_VALUE: u64 = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub index: usize,
    pub kind: String,
    pub output_shape: Vec<usize>,
    pub flops: u64,
    pub weight_bytes: u64,
    pub feature_map_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub batch_size: u64,
    pub layers: Vec<LayerCost>,
    pub filters: Vec<usize>,
    pub params: u64,
    pub flops: u64,
    pub weight_bytes: u64,
    pub feature_map_bytes: u64,
    /// Total runtime memory: weights plus feature maps.
    pub trm: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Compression {
    pub base: CostReport,
    pub pruned: CostReport,
    pub flops_reduction_pct: f64,
    pub trm_reduction_pct: f64,
    pub params_reduction_pct: f64,
}

fn shape_err(index: usize, layer: &Layer, input: &[usize]) -> CfpError {
    CfpError::Shape {
        layer: index,
        kind: layer.kind(),
        expected: vec![],
        actual: input.to_vec(),
    }
}

pub fn flops_layer(layer: &Layer, input: &[usize], output: &[usize], batch: u64) -> Result<u64> {
    match (layer, output) {
        (Layer::Conv2d(c), &[co, ho, wo]) if input.first() == Some(&c.c_in) && co == c.c_out => {
            Ok((c.c_in * c.k_w * c.k_h * wo * ho * co) as u64 * batch)
        }
        (Layer::Dense(d), &[n]) if input == [d.n_in] && n == d.n_out => Ok((d.n_in * d.n_out) as u64 * batch),
        (Layer::Conv2d(_) | Layer::Dense(_), _) => Err(shape_err(0, layer, input)),
        _ => Ok(0),
    }
}

/// `(feature_map_bytes, weight_bytes)` for one layer.
pub fn memory_layer(layer: &Layer, input: &[usize], output: &[usize], batch: u64) -> Result<(u64, u64)> {
    let out_values: u64 = output.iter().product::<usize>() as u64;
    match layer {
        Layer::Conv2d(c) => {
            flops_layer(layer, input, output, batch)?;
            Ok((
                BYTES_PER_VALUE * out_values * batch,
                BYTES_PER_VALUE * c.kernel_volume() as u64 * c.c_out as u64,
            ))
        }
        Layer::Dense(d) => {
            flops_layer(layer, input, output, batch)?;
            Ok((
                BYTES_PER_VALUE * out_values * batch,
                BYTES_PER_VALUE * (d.n_in * d.n_out) as u64,
            ))
        }
        Layer::MaxPool2 => Ok((BYTES_PER_VALUE * out_values * batch, 0)),
        Layer::Relu | Layer::Flatten => Ok((0, 0)),
    }
}

pub fn cost_report(net: &Network, batch: u64) -> Result<CostReport> {
    let inputs = net.input_shapes()?;
    let outputs = net.shapes()?;
    let mut layers = Vec::with_capacity(net.layers.len());
    for (i, layer) in net.layers.iter().enumerate() {
        let flops = flops_layer(layer, &inputs[i], &outputs[i], batch).map_err(|_| shape_err(i, layer, &inputs[i]))?;
        let (fm, w) = memory_layer(layer, &inputs[i], &outputs[i], batch)?;
        layers.push(LayerCost {
            index: i,
            kind: layer.kind().to_string(),
            output_shape: outputs[i].clone(),
            flops,
            weight_bytes: w,
            feature_map_bytes: fm,
        });
    }
    let flops = layers.iter().map(|l| l.flops).sum();
    let weight_bytes = layers.iter().map(|l| l.weight_bytes).sum();
    let feature_map_bytes = layers.iter().map(|l| l.feature_map_bytes).sum();
    Ok(CostReport {
        batch_size: batch,
        layers,
        filters: net.filter_counts(),
        params: net.num_params() as u64,
        flops,
        weight_bytes,
        feature_map_bytes,
        trm: weight_bytes + feature_map_bytes,
    })
}

pub fn flops_total(net: &Network, batch: u64) -> Result<u64> {
    Ok(cost_report(net, batch)?.flops)
}

pub fn trm_total(net: &Network, batch: u64) -> Result<u64> {
    Ok(cost_report(net, batch)?.trm)
}

pub fn reduction_pct(base: u64, pruned: u64) -> f64 {
    if base == 0 {
        0.0
    } else {
        100.0 * (1.0 - pruned as f64 / base as f64)
    }
}

pub fn compression_report(base: &Network, pruned: &Network, batch: u64) -> Result<Compression> {
    let b = cost_report(base, batch)?;
    let p = cost_report(pruned, batch)?;
    Ok(Compression {
        flops_reduction_pct: reduction_pct(b.flops, p.flops),
        trm_reduction_pct: reduction_pct(b.trm, p.trm),
        params_reduction_pct: reduction_pct(b.params, p.params),
        base: b,
        pruned: p,
    })
}

impl CostReport {
    /// Per-layer CSV with a totals footer.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,type,shape,flops,m_w,m_fm\n");
        for l in &self.layers {
            let shape = l
                .output_shape
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join("x");
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                l.index, l.kind, shape, l.flops, l.weight_bytes, l.feature_map_bytes
            ));
        }
        out.push_str(&format!(
            "total,,,{},{},{}\n",
            self.flops, self.weight_bytes, self.feature_map_bytes
        ));
        out
    }

    /// Aligned plain-text table.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:<6}{:<10}{:<14}{:>14}{:>14}{:>14}\n",
            "layer", "type", "shape", "FLOPs", "M_w", "M_fm"
        );
        for l in &self.layers {
            let shape = l
                .output_shape
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join("x");
            out.push_str(&format!(
                "{:<6}{:<10}{:<14}{:>14}{:>14}{:>14}\n",
                l.index, l.kind, shape, l.flops, l.weight_bytes, l.feature_map_bytes
            ));
        }
        out.push_str(&format!(
            "{:<30}{:>14}{:>14}{:>14}\n",
            "total", self.flops, self.weight_bytes, self.feature_map_bytes
        ));
        out.push_str(&format!(
            "filters {:?}  params {}  TRM {} bytes (batch {})\n",
            self.filters, self.params, self.trm, self.batch_size
        ));
        out
    }
}
