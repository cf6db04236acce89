use crate::error::{CfpError, Result};
use crate::tensor::Tensor;

/// Mean softmax cross-entropy over a `[B, C]` logit batch.
///
/// Returns the loss and `dlogits = (softmax - onehot) / B`.
pub fn softmax_xent(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (b, classes) = match *logits.shape() {
        [b, c] => (b, c),
        _ => {
            return Err(CfpError::Shape {
                layer: 0,
                kind: "softmax_xent",
                expected: vec![labels.len(), 0],
                actual: logits.shape().to_vec(),
            })
        }
    };
    if labels.len() != b {
        return Err(CfpError::Shape {
            layer: 0,
            kind: "softmax_xent labels",
            expected: vec![b],
            actual: vec![labels.len()],
        });
    }
    if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
        return Err(CfpError::LabelRange { index, label, classes });
    }
    if b == 0 {
        return Ok((0.0, Tensor::zeros(vec![0, classes])));
    }
    let scale = 1.0 / b as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; b * classes];
    for (n, (row, &label)) in logits.data().chunks_exact(classes).zip(labels).enumerate() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&z| (z - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        loss += sum.ln() - (row[label] - max);
        let g = &mut grad[n * classes..(n + 1) * classes];
        for (gi, e) in g.iter_mut().zip(&exps) {
            *gi = e / sum * scale;
        }
        g[label] -= scale;
    }
    let loss = loss * scale;
    if !loss.is_finite() {
        return Err(CfpError::NonFinite {
            what: "softmax cross-entropy".into(),
        });
    }
    Ok((loss, Tensor::new(vec![b, classes], grad)?))
}
