//! Filter-pair correlation analysis and episode selection.

use std::cmp::Ordering;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{CfpError, Result};
use crate::nn::Network;

/// Conv filters of one layer as rows of length `c_in * k_h * k_w`, biases excluded.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterMatrix {
    pub layer_index: usize,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl FilterMatrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrPair {
    pub layer: usize,
    pub a: usize,
    pub b: usize,
    pub rho: f64,
}

/// Symmetric `n x n` correlation matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrMatrix {
    pub layer_index: usize,
    pub n: usize,
    pub data: Vec<f64>,
}

impl CorrMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    /// Largest off-diagonal entry, by absolute value.
    pub fn max_abs_off_diagonal(&self) -> Option<f64> {
        (0..self.n)
            .flat_map(|i| (i + 1..self.n).map(move |j| (i, j)))
            .map(|(i, j)| self.get(i, j).abs())
            .max_by(f64::total_cmp)
    }
}

/// Ready-to-prune pairs of one conv layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPairs {
    pub layer: usize,
    pub requested: usize,
    pub pairs: Vec<CorrPair>,
    /// Fewer disjoint pairs were available than requested.
    pub shortfall: bool,
    /// Zero-variance filters left out of the ranking.
    pub degenerate: Vec<usize>,
}

/// Pairs selected from every conv layer for one round of pruning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub index: usize,
    pub layers: Vec<LayerPairs>,
}

impl Episode {
    pub fn pairs(&self) -> impl Iterator<Item = &CorrPair> {
        self.layers.iter().flat_map(|l| l.pairs.iter())
    }

    pub fn num_pairs(&self) -> usize {
        self.layers.iter().map(|l| l.pairs.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.num_pairs() == 0
    }
}

pub fn flatten_filters(net: &Network, layer: usize) -> Result<FilterMatrix> {
    let conv = net.conv(layer)?;
    Ok(FilterMatrix {
        layer_index: layer,
        rows: conv.c_out,
        cols: conv.kernel_volume(),
        data: conv.weights.data().to_vec(),
    })
}

/// Mean-centred copy and population standard deviation; `None` if every element is equal.
pub(crate) fn centred(x: &[f64]) -> Option<(Vec<f64>, f64)> {
    if x.windows(2).all(|w| w[0] == w[1]) {
        return None;
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let c: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let sigma = (c.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
    Some((c, sigma))
}

/// Pearson correlation with population moments, clamped to `[-1, 1]`.
///
/// A constant argument yields `DegenerateFilter` with `filter` 0 for `x`, 1 for `y`.
pub fn pearson_rho(x: &[f64], y: &[f64]) -> Result<f64> {
    assert_eq!(x.len(), y.len(), "pearson_rho needs equal lengths");
    assert!(x.len() >= 2, "pearson_rho needs at least two elements");
    let (cx, sx) = centred(x).ok_or(CfpError::DegenerateFilter { layer: 0, filter: 0 })?;
    let (cy, sy) = centred(y).ok_or(CfpError::DegenerateFilter { layer: 0, filter: 1 })?;
    let n = x.len() as f64;
    let cov = cx.iter().zip(&cy).map(|(a, b)| a * b).sum::<f64>() / n;
    Ok((cov / (sx * sy)).clamp(-1.0, 1.0))
}

pub fn corr_matrix(fm: &FilterMatrix) -> Result<CorrMatrix> {
    let mut rows = Vec::with_capacity(fm.rows);
    for f in 0..fm.rows {
        let (c, s) = centred(fm.row(f)).ok_or(CfpError::DegenerateFilter {
            layer: fm.layer_index,
            filter: f,
        })?;
        rows.push((c, s));
    }
    Ok(corr_from_centred(fm.layer_index, fm.cols, &rows))
}

fn corr_from_centred(layer_index: usize, cols: usize, rows: &[(Vec<f64>, f64)]) -> CorrMatrix {
    let n = rows.len();
    let len = cols as f64;
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        data[i * n + i] = 1.0;
        for j in i + 1..n {
            let cov = rows[i].0.iter().zip(&rows[j].0).map(|(a, b)| a * b).sum::<f64>() / len;
            let rho = (cov / (rows[i].1 * rows[j].1)).clamp(-1.0, 1.0);
            data[i * n + j] = rho;
            data[j * n + i] = rho;
        }
    }
    CorrMatrix { layer_index, n, data }
}

fn by_rank(p: &CorrPair, q: &CorrPair) -> Ordering {
    q.rho.total_cmp(&p.rho).then((p.a, p.b).cmp(&(q.a, q.b)))
}

/// All pairs `a < b`, highest correlation first; ties by `(a, b)`.
pub fn rank_pairs(corr: &CorrMatrix) -> Vec<CorrPair> {
    let mut pairs: Vec<CorrPair> = (0..corr.n)
        .flat_map(|a| (a + 1..corr.n).map(move |b| (a, b)))
        .map(|(a, b)| CorrPair {
            layer: corr.layer_index,
            a,
            b,
            rho: corr.get(a, b),
        })
        .collect();
    pairs.sort_by(by_rank);
    pairs
}

/// Ranked pairs of one layer, skipping zero-variance filters.
/// Returns the ranking and the indices that were left out.
pub fn rank_layer(net: &Network, layer: usize) -> Result<(Vec<CorrPair>, Vec<usize>)> {
    let fm = flatten_filters(net, layer)?;
    let mut degenerate = Vec::new();
    let mut live = Vec::new();
    let mut stats = Vec::new();
    for f in 0..fm.rows {
        match centred(fm.row(f)) {
            Some(s) => {
                live.push(f);
                stats.push(s);
            }
            None => degenerate.push(f),
        }
    }
    if !degenerate.is_empty() {
        warn!("layer {layer}: constant filters {degenerate:?} excluded from pair ranking");
    }
    let sub = corr_from_centred(layer, fm.cols, &stats);
    let mut pairs = rank_pairs(&sub);
    for p in &mut pairs {
        p.a = live[p.a];
        p.b = live[p.b];
    }
    pairs.sort_by(by_rank);
    Ok((pairs, degenerate))
}

/// Greedy disjoint matching over a ranked list: take pairs in order, skipping
/// any that reuse an already-chosen filter, until `quota` pairs are taken.
pub fn greedy_disjoint(ranked: &[CorrPair], quota: usize) -> Vec<CorrPair> {
    let mut used = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(quota);
    for p in ranked {
        if out.len() == quota {
            break;
        }
        if used.contains(&p.a) || used.contains(&p.b) {
            continue;
        }
        used.insert(p.a);
        used.insert(p.b);
        out.push(*p);
    }
    out
}

/// Builds episode `index`. `quotas[i]` is the number of pairs wanted from the
/// `i`-th conv layer; each layer must keep at least one filter.
pub fn select_episode(net: &Network, quotas: &[usize], index: usize) -> Result<Episode> {
    let convs = net.conv_indices();
    if quotas.len() != convs.len() {
        return Err(CfpError::Config(format!(
            "{} quotas for {} conv layers",
            quotas.len(),
            convs.len()
        )));
    }
    let mut layers = Vec::new();
    for (&layer, &quota) in convs.iter().zip(quotas) {
        if quota == 0 {
            continue;
        }
        let c_out = net.conv(layer)?.c_out;
        if quota >= c_out {
            return Err(CfpError::Quota {
                layer,
                detail: format!("pruning {quota} of {c_out} filters would leave none"),
            });
        }
        let (ranked, degenerate) = rank_layer(net, layer)?;
        let pairs = greedy_disjoint(&ranked, quota);
        let shortfall = pairs.len() < quota;
        if shortfall {
            warn!(
                "layer {layer}: only {} disjoint pairs for a quota of {quota}",
                pairs.len()
            );
        }
        layers.push(LayerPairs {
            layer,
            requested: quota,
            pairs,
            shortfall,
            degenerate,
        });
    }
    Ok(Episode { index, layers })
}

/// Pairs at the bottom of the ranking (lowest correlation first), disjoint.
pub fn select_lowest(net: &Network, layer: usize, count: usize) -> Result<Vec<CorrPair>> {
    let (mut ranked, _) = rank_layer(net, layer)?;
    ranked.reverse();
    Ok(greedy_disjoint(&ranked, count))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Conv2d, Layer};
    use crate::rng::seeded;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn pair(a: usize, b: usize, rho: f64) -> CorrPair {
        CorrPair { layer: 0, a, b, rho }
    }

    #[test]
    fn pearson_examples() {
        let x = [0.3, -1.2, 4.0, 2.2];
        assert!((pearson_rho(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(pearson_rho(&[1., -1., 1., -1.], &[1., 1., -1., -1.]).unwrap(), 0.0);
        let r = pearson_rho(&[1., 2., 3.], &[1., 2., 4.]).unwrap();
        assert!((r - 9.0 / 84f64.sqrt()).abs() < 1e-15);
        assert!((r - 0.981981).abs() < 1e-6);
        assert!(matches!(
            pearson_rho(&[1., 2.], &[3., 3.]),
            Err(CfpError::DegenerateFilter { filter: 1, .. })
        ));
    }

    proptest! {
        #[test]
        fn affine_invariance(xs in prop::collection::vec(-5.0f64..5.0, 3..40), scale in 0.1f64..10.0, shift in -5.0f64..5.0, seed in 0u64..100) {
            let ys: Vec<f64> = xs.iter().enumerate().map(|(i, v)| v.sin() + ((i as u64 * 31 + seed) % 7) as f64).collect();
            prop_assume!(centred(&xs).is_some_and(|(_, s)| s > 1e-3) && centred(&ys).is_some());
            let base = pearson_rho(&xs, &ys).unwrap();
            let pos: Vec<f64> = xs.iter().map(|v| scale * v + shift).collect();
            let neg: Vec<f64> = xs.iter().map(|v| -scale * v + shift).collect();
            prop_assert!((pearson_rho(&pos, &ys).unwrap() - base).abs() < 1e-12);
            prop_assert!((pearson_rho(&neg, &ys).unwrap() + base).abs() < 1e-12);
        }

        #[test]
        fn permuting_filters_keeps_rho_multiset(seed in 0u64..200) {
            let net = crate::nn::Network::lenet(6, 3, 4, &mut seeded(seed));
            let fm = flatten_filters(&net, 0).unwrap();
            let mut perm: Vec<usize> = (0..fm.rows).collect();
            perm.rotate_left((seed % 6) as usize);
            perm.swap(0, 3);
            let mut shuffled = fm.clone();
            for (dst, &src) in perm.iter().enumerate() {
                shuffled.data[dst * fm.cols..(dst + 1) * fm.cols].copy_from_slice(fm.row(src));
            }
            let mut a: Vec<f64> = rank_pairs(&corr_matrix(&fm).unwrap()).iter().map(|p| p.rho).collect();
            let mut b: Vec<f64> = rank_pairs(&corr_matrix(&shuffled).unwrap()).iter().map(|p| p.rho).collect();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn flatten_filter_shapes_and_ordering() {
        let net = crate::nn::Network::lenet5(&mut seeded(0));
        let fm = flatten_filters(&net, 0).unwrap();
        assert_eq!((fm.rows, fm.cols), (20, 25));
        assert!(matches!(flatten_filters(&net, 1), Err(CfpError::WrongLayer { .. })));

        let w: Vec<f64> = (0..18).map(f64::from).collect();
        let conv = Conv2d::new(2, 1, 3, 3, Tensor::new(vec![1, 2, 3, 3], w).unwrap(), vec![0.0]).unwrap();
        let tiny = Network {
            layers: vec![Layer::Conv2d(conv)],
            input_shape: [2, 3, 3],
        };
        let fm = flatten_filters(&tiny, 0).unwrap();
        // element (c=1, r=0, col=2)
        assert_eq!(fm.row(0)[11], 11.0);

        let conv = Conv2d::new(
            1,
            3,
            1,
            1,
            Tensor::new(vec![3, 1, 1, 1], vec![0.5, -1.0, 2.0]).unwrap(),
            vec![0.0; 3],
        )
        .unwrap();
        let tiny = Network {
            layers: vec![Layer::Conv2d(conv)],
            input_shape: [1, 2, 2],
        };
        let fm = flatten_filters(&tiny, 0).unwrap();
        assert_eq!((fm.rows, fm.cols), (3, 1));
        assert_eq!(fm.data, vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn corr_matrix_basic_properties() {
        let net = crate::nn::Network::lenet5(&mut seeded(4));
        let m = corr_matrix(&flatten_filters(&net, 2).unwrap()).unwrap();
        for i in 0..m.n {
            assert_eq!(m.get(i, i), 1.0);
            for j in 0..m.n {
                assert!((m.get(i, j) - m.get(j, i)).abs() <= 1e-12);
            }
        }
        let fm = FilterMatrix {
            layer_index: 0,
            rows: 2,
            cols: 25,
            data: (0..50).map(|i| ((i * 7919) % 23) as f64 - 11.0).collect(),
        };
        let m = corr_matrix(&fm).unwrap();
        assert!((m.get(0, 1) - pearson_rho(fm.row(0), fm.row(1)).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn rank_examples() {
        let corr = CorrMatrix {
            layer_index: 0,
            n: 3,
            data: vec![1.0, 0.9, 0.2, 0.9, 1.0, -0.5, 0.2, -0.5, 1.0],
        };
        let order: Vec<(usize, usize)> = rank_pairs(&corr).iter().map(|p| (p.a, p.b)).collect();
        assert_eq!(order, vec![(0, 1), (0, 2), (1, 2)]);

        let mut data = vec![0.0; 16];
        for i in 0..4 {
            data[i * 4 + i] = 1.0;
        }
        for (i, j) in [(0, 3), (1, 2)] {
            data[i * 4 + j] = 0.7;
            data[j * 4 + i] = 0.7;
        }
        let ranked = rank_pairs(&CorrMatrix {
            layer_index: 0,
            n: 4,
            data,
        });
        assert_eq!((ranked[0].a, ranked[0].b), (0, 3));
        assert_eq!((ranked[1].a, ranked[1].b), (1, 2));
        assert_eq!(ranked.len(), 6);
    }

    #[test]
    fn greedy_matching_hand_trace() {
        let ranked = [pair(1, 2, 0.9), pair(1, 3, 0.8), pair(3, 4, 0.7)];
        let chosen: Vec<(usize, usize)> = greedy_disjoint(&ranked, 2).iter().map(|p| (p.a, p.b)).collect();
        assert_eq!(chosen, vec![(1, 2), (3, 4)]);
    }

    #[test]
    fn select_episode_quota_rules() {
        let net = crate::nn::Network::lenet(2, 6, 4, &mut seeded(7));
        assert!(select_episode(&net, &[0, 0], 0).unwrap().is_empty());
        assert!(matches!(select_episode(&net, &[2, 0], 0), Err(CfpError::Quota { .. })));
        let ep = select_episode(&net, &[1, 4], 3).unwrap();
        assert_eq!(ep.index, 3);
        assert_eq!(ep.layers[0].pairs.len(), 1);
        // six filters hold at most three disjoint pairs
        assert_eq!(ep.layers[1].pairs.len(), 3);
        assert!(ep.layers[1].shortfall);
        let mut seen = std::collections::HashSet::new();
        for p in &ep.layers[1].pairs {
            assert!(seen.insert(p.a) && seen.insert(p.b));
        }
        assert!(select_episode(&net, &[1], 0).is_err());
    }

    #[test]
    fn constant_filters_are_left_out() {
        let mut net = crate::nn::Network::lenet(4, 3, 4, &mut seeded(8));
        if let Layer::Conv2d(c) = &mut net.layers[0] {
            c.weights.data_mut()[25..50].iter_mut().for_each(|v| *v = 0.25);
        }
        assert!(matches!(
            corr_matrix(&flatten_filters(&net, 0).unwrap()),
            Err(CfpError::DegenerateFilter { layer: 0, filter: 1 })
        ));
        let (ranked, degenerate) = rank_layer(&net, 0).unwrap();
        assert_eq!(degenerate, vec![1]);
        assert_eq!(ranked.len(), 3);
        assert!(ranked.iter().all(|p| p.a != 1 && p.b != 1));
    }
}
