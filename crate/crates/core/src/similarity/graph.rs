//! Differentiable application of similarity matrices to im2col columns.

use crate::autodiff::{Graph, NodeId};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Graph nodes holding a resolved similarity for one layer.
///
/// Static kinds carry one matrix for the whole batch; dynamic prediction
/// yields one matrix per sample or, in per-patch mode, one per column.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SimilarityNodes {
    Identity,
    /// Shared diagonal, `[HV]`.
    Diagonal(NodeId),
    /// Full matrix, `[C·HV, C·HV]`.
    Dense(NodeId),
    /// Shared block, `[HV, HV]`.
    Block(NodeId),
    /// One diagonal per sample, `[B, HV]`.
    SampleDiagonal(NodeId),
    /// One block per sample, `[B, HV, HV]`.
    SampleBlock(NodeId),
    /// One diagonal per column, `[B·P, HV]`.
    PatchDiagonal(NodeId),
    /// One block per column, `[B·P, HV, HV]`.
    PatchBlock(NodeId),
}

/// Replace every column `x` of `cols` (`[C·HV, B·P]`, columns ordered by
/// sample then position) with `M·x`.
pub fn apply_similarity_nodes(
    g: &mut Graph,
    cols: NodeId,
    sim: SimilarityNodes,
    channels: usize,
    patch: usize,
    batch: usize,
) -> Result<NodeId> {
    let shape = g.shape(cols).to_vec();
    let rows = channels * patch;
    if shape.len() != 2 || shape[0] != rows || shape[1] % batch != 0 {
        return shape_err(format!(
            "similarity columns {shape:?} do not match {channels} channels × {patch} taps over {batch} samples"
        ));
    }
    let n = shape[1];
    let p = n / batch;
    let (c, hv) = (channels, patch);
    match sim {
        SimilarityNodes::Identity => Ok(cols),
        SimilarityNodes::Dense(m) => g.matmul(m, cols),
        SimilarityNodes::Diagonal(d) => {
            let x = g.reshape(cols, &[c, hv, n])?;
            let d = g.reshape(d, &[1, hv, 1])?;
            let y = g.mul(x, d)?;
            g.reshape(y, &[rows, n])
        }
        SimilarityNodes::Block(m) => {
            if c == 1 {
                return g.matmul(m, cols);
            }
            let x = g.reshape(cols, &[c, hv, n])?;
            let x = g.permute(x, &[1, 0, 2])?;
            let x = g.reshape(x, &[hv, c * n])?;
            let y = g.matmul(m, x)?;
            let y = g.reshape(y, &[hv, c, n])?;
            let y = g.permute(y, &[1, 0, 2])?;
            g.reshape(y, &[rows, n])
        }
        SimilarityNodes::SampleDiagonal(d) => {
            let x = g.reshape(cols, &[c, hv, batch, p])?;
            let dt = g.transpose(d)?;
            let dt = g.reshape(dt, &[1, hv, batch, 1])?;
            let y = g.mul(x, dt)?;
            g.reshape(y, &[rows, n])
        }
        SimilarityNodes::SampleBlock(m) => {
            let x = g.reshape(cols, &[c, hv, batch, p])?;
            let x = g.permute(x, &[2, 1, 0, 3])?;
            let x = g.reshape(x, &[batch, hv, c * p])?;
            let y = g.batch_matmul(m, x)?;
            let y = g.reshape(y, &[batch, hv, c, p])?;
            let y = g.permute(y, &[2, 1, 0, 3])?;
            g.reshape(y, &[rows, n])
        }
        SimilarityNodes::PatchDiagonal(d) => {
            let x = g.reshape(cols, &[c, hv, n])?;
            let dt = g.transpose(d)?;
            let dt = g.reshape(dt, &[1, hv, n])?;
            let y = g.mul(x, dt)?;
            g.reshape(y, &[rows, n])
        }
        SimilarityNodes::PatchBlock(m) => {
            let x = g.reshape(cols, &[c, hv, n])?;
            let x = g.permute(x, &[2, 1, 0])?;
            let y = g.batch_matmul(m, x)?;
            let y = g.permute(y, &[2, 1, 0])?;
            g.reshape(y, &[rows, n])
        }
    }
}

/// `L·Lᵀ` from a factor node whose upper triangle is masked out, so its
/// upper entries receive zero gradient.
pub fn cholesky_block(g: &mut Graph, factor: NodeId) -> Result<NodeId> {
    let hv = g.shape(factor)[0];
    let lower = g.constant(Tensor::from_fn(&[hv, hv], |i| if i % hv <= i / hv { 1.0 } else { 0.0 }));
    let l = g.mul(factor, lower)?;
    let lt = g.transpose(l)?;
    g.matmul(l, lt)
}

/// `diag(D)·R` with `D` a `[HV]` node.
pub fn masked_block(g: &mut Graph, mask: NodeId, r: NodeId) -> Result<NodeId> {
    let hv = g.shape(r)[0];
    let d = g.reshape(mask, &[hv, 1])?;
    g.mul(d, r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    /// Per-column loop oracle: `out[:, j] = M_j · cols[:, j]` with `M_j`
    /// the dense `C·HV` matrix for column `j`.
    fn oracle(cols: &Tensor, c: usize, hv: usize, block_for: impl Fn(usize) -> Tensor) -> Tensor {
        let n = cols.shape()[1];
        let mut out = Tensor::zeros(cols.shape());
        for j in 0..n {
            let b = block_for(j);
            for ch in 0..c {
                for i in 0..hv {
                    let mut acc = 0.0;
                    for k in 0..hv {
                        acc += b.at(&[i, k]) * cols.at(&[ch * hv + k, j]);
                    }
                    out.set(&[ch * hv + i, j], acc);
                }
            }
        }
        out
    }

    fn diag(d: &[f64]) -> Tensor {
        let hv = d.len();
        Tensor::from_fn(&[hv, hv], |i| if i / hv == i % hv { d[i / hv] } else { 0.0 })
    }

    #[test]
    fn all_modes_match_loop_oracle() {
        let (c, hv, b, p) = (3, 4, 2, 5);
        let n = b * p;
        let mut rng = seeded(3);
        let cols_t = Tensor::randn(&[c * hv, n], 1.0, &mut rng);
        let d = Tensor::randn(&[hv], 1.0, &mut rng);
        let blk = Tensor::randn(&[hv, hv], 1.0, &mut rng);
        let sd = Tensor::randn(&[b, hv], 1.0, &mut rng);
        let sb = Tensor::randn(&[b, hv, hv], 1.0, &mut rng);
        let pd = Tensor::randn(&[n, hv], 1.0, &mut rng);
        let pb = Tensor::randn(&[n, hv, hv], 1.0, &mut rng);
        let slice_block = |t: &Tensor, i: usize| {
            Tensor::new(vec![hv, hv], t.data()[i * hv * hv..(i + 1) * hv * hv].to_vec()).unwrap()
        };
        let slice_diag = |t: &Tensor, i: usize| diag(&t.data()[i * hv..(i + 1) * hv]);

        let cases: Vec<(Tensor, Box<dyn Fn(NodeId) -> SimilarityNodes>, Box<dyn Fn(usize) -> Tensor>)> = vec![
            (d.clone(), Box::new(SimilarityNodes::Diagonal), Box::new(|_| diag(d.data()))),
            (blk.clone(), Box::new(SimilarityNodes::Block), Box::new(|_| blk.clone())),
            (sd.clone(), Box::new(SimilarityNodes::SampleDiagonal), Box::new(|j| slice_diag(&sd, j / p))),
            (sb.clone(), Box::new(SimilarityNodes::SampleBlock), Box::new(|j| slice_block(&sb, j / p))),
            (pd.clone(), Box::new(SimilarityNodes::PatchDiagonal), Box::new(|j| slice_diag(&pd, j))),
            (pb.clone(), Box::new(SimilarityNodes::PatchBlock), Box::new(|j| slice_block(&pb, j))),
        ];
        for (value, wrap, block_for) in cases {
            let mut g = Graph::new();
            let cols = g.constant(cols_t.clone());
            let m = g.constant(value);
            let out = apply_similarity_nodes(&mut g, cols, wrap(m), c, hv, b).unwrap();
            let want = oracle(&cols_t, c, hv, block_for);
            assert!(g.value(out).max_abs_diff(&want) < 1e-12);
        }

        let dense = Tensor::randn(&[c * hv, c * hv], 1.0, &mut rng);
        let mut g = Graph::new();
        let cols = g.constant(cols_t.clone());
        let m = g.constant(dense.clone());
        let out = apply_similarity_nodes(&mut g, cols, SimilarityNodes::Dense(m), c, hv, b).unwrap();
        assert!(g.value(out).max_abs_diff(&dense.matmul(&cols_t).unwrap()) < 1e-12);
    }

    #[test]
    fn cholesky_block_ignores_upper_triangle() {
        let mut g = Graph::new();
        let l = g.param(Tensor::new(vec![2, 2], vec![1.0, 7.0, 2.0, 3.0]).unwrap());
        let m = cholesky_block(&mut g, l).unwrap();
        assert_eq!(g.value(m).data(), &[1.0, 2.0, 2.0, 13.0]);
        let s = g.sum_all(m).unwrap();
        let grads = g.backward(s, false).unwrap();
        assert_eq!(g.grad_value(&grads, l).unwrap().at(&[0, 1]), 0.0);
    }
}
