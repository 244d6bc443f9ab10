//! Classification and regression losses, numeric and on the graph.

use std::sync::Arc;

use crate::autodiff::{Graph, NodeId};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

fn check_labels(shape: &[usize], labels: &[usize]) -> Result<(usize, usize)> {
    if shape.len() != 2 || shape[0] != labels.len() || shape[0] == 0 {
        return shape_err(format!("{} labels for logits {shape:?}", labels.len()));
    }
    let n = shape[1];
    if let Some(&l) = labels.iter().find(|&&l| l >= n) {
        return Err(Error::Argument(format!("label {l} out of range for {n} classes")));
    }
    Ok((shape[0], n))
}

/// Mean over the batch of `−log softmax(logits)[label]`, with the row
/// maximum subtracted before exponentiating.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let (b, n) = check_labels(logits.shape(), labels)?;
    let mut total = 0.0;
    for (row, &l) in logits.data().chunks(n).zip(labels) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[l];
    }
    Ok(total / b as f64)
}

pub fn cross_entropy_nodes(g: &mut Graph, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    let (_, n) = check_labels(g.shape(logits), labels)?;
    let ls = g.log_softmax_rows(logits)?;
    let idx: Arc<[usize]> = labels.iter().enumerate().map(|(i, &l)| i * n + l).collect();
    let picked = g.gather(ls, idx, &[labels.len()])?;
    let m = g.mean_all(picked)?;
    g.neg(m)
}

/// Mean squared error between `pred` and the one-hot encoding of `labels`.
pub fn mse_onehot_nodes(g: &mut Graph, pred: NodeId, labels: &[usize]) -> Result<NodeId> {
    let (b, n) = check_labels(g.shape(pred), labels)?;
    let t = Tensor::from_fn(&[b, n], |i| if labels[i / n] == i % n { 1.0 } else { 0.0 });
    let t = g.constant(t);
    mse_nodes(g, pred, t)
}

/// `mean((pred − target)²)`.
pub fn mse_nodes(g: &mut Graph, pred: NodeId, target: NodeId) -> Result<NodeId> {
    let d = g.sub(pred, target)?;
    let s = g.square(d)?;
    g.mean_all(s)
}

/// Index of the largest entry of each row; ties go to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let n = logits.shape().last().copied().unwrap_or(1).max(1);
    logits
        .data()
        .chunks(n)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn cross_entropy_examples() {
        let z = Tensor::zeros(&[1, 2]);
        assert!((cross_entropy(&z, &[0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        let big = Tensor::new(vec![1, 3], vec![0.0, 1000.0, 0.0]).unwrap();
        let l = cross_entropy(&big, &[1]).unwrap();
        assert!(l.is_finite() && l < 1e-6);
        assert!(matches!(cross_entropy(&z, &[2]), Err(Error::Argument(_))));
    }

    #[test]
    fn cross_entropy_matches_unstabilized_oracle() {
        let mut rng = seeded(3);
        let logits = Tensor::randn(&[6, 4], 1.0, &mut rng);
        let labels = [0, 3, 1, 2, 2, 0];
        let oracle: f64 = logits
            .data()
            .chunks(4)
            .zip(labels)
            .map(|(r, l)| -(r[l].exp() / r.iter().map(|v| v.exp()).sum::<f64>()).ln())
            .sum::<f64>()
            / 6.0;
        assert!((cross_entropy(&logits, &labels).unwrap() - oracle).abs() < 1e-10);
        let mut g = Graph::new();
        let x = g.constant(logits);
        let l = cross_entropy_nodes(&mut g, x, &labels).unwrap();
        assert!((g.value(l).item().unwrap() - oracle).abs() < 1e-10);
    }

    #[test]
    fn argmax_ties_go_low() {
        let t = Tensor::new(vec![2, 3], vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]).unwrap();
        assert_eq!(argmax_rows(&t), vec![0, 1]);
    }
}
