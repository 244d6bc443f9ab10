//! Differentiable building blocks over batched `B×C×H×W` activations.

use std::sync::Arc;

use crate::autodiff::{Graph, NodeId};
use crate::error::{shape_err, Result};
use crate::similarity::{apply_similarity_nodes, SimilarityNodes};
use crate::tensor::{ConvGeometry, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Patch columns of `x` for a square `kernel`, with the geometry used.
pub fn conv_columns(g: &mut Graph, x: NodeId, kernel: usize, stride: usize, pad: usize) -> Result<(NodeId, ConvGeometry)> {
    let geom = ConvGeometry::new(g.shape(x), kernel, kernel, stride, pad)?;
    Ok((g.im2col(x, geom)?, geom))
}

/// Convolution over prepared columns: `W·cols (+ b)` reshaped to
/// `B×K×H_out×W_out`.
pub fn conv_from_columns(
    g: &mut Graph,
    cols: NodeId,
    geom: &ConvGeometry,
    weight: NodeId,
    bias: Option<NodeId>,
) -> Result<NodeId> {
    let k = g.shape(weight)[0];
    let w = g.reshape(weight, &[k, geom.patch_len()])?;
    let mut y = g.matmul(w, cols)?;
    if let Some(b) = bias {
        let b = g.reshape(b, &[k, 1])?;
        y = g.add(y, b)?;
    }
    let y = g.reshape(y, &[k, geom.batch, geom.out_h(), geom.out_w()])?;
    g.permute(y, &[1, 0, 2, 3])
}

/// Convolution with an optional similarity applied to every patch.
pub fn conv2d(
    g: &mut Graph,
    x: NodeId,
    weight: NodeId,
    bias: Option<NodeId>,
    stride: usize,
    pad: usize,
    similarity: Option<SimilarityNodes>,
) -> Result<NodeId> {
    let ws = g.shape(weight).to_vec();
    if ws.len() != 4 || ws[2] != ws[3] || ws[1] != g.shape(x).get(1).copied().unwrap_or(0) {
        return shape_err(format!("conv weight {ws:?} does not fit input {:?}", g.shape(x)));
    }
    let (mut cols, geom) = conv_columns(g, x, ws[2], stride, pad)?;
    if let Some(sim) = similarity {
        cols = apply_similarity_nodes(g, cols, sim, geom.channels, ws[2] * ws[3], geom.batch)?;
    }
    conv_from_columns(g, cols, &geom, weight, bias)
}

/// Shape with every axis but 1 collapsed to size 1.
fn channel_shape(shape: &[usize]) -> Vec<usize> {
    shape.iter().enumerate().map(|(i, &d)| if i == 1 { d } else { 1 }).collect()
}

/// Batch normalization over all axes except 1. In training mode returns the
/// batch mean and (biased) variance for the running-statistics update.
pub fn batch_norm(
    g: &mut Graph,
    x: NodeId,
    gamma: NodeId,
    beta: NodeId,
    mode: Mode,
    running: (&Tensor, &Tensor),
) -> Result<(NodeId, Option<(Tensor, Tensor)>)> {
    let shape = g.shape(x).to_vec();
    let cs = channel_shape(&shape);
    let count = (shape.iter().product::<usize>() / shape[1]) as f64;
    let (xhat, stats) = match mode {
        Mode::Train => {
            let s = g.sum_to(x, &cs)?;
            let mean = g.scale(s, 1.0 / count)?;
            let xc = g.sub(x, mean)?;
            let sq = g.square(xc)?;
            let ss = g.sum_to(sq, &cs)?;
            let var = g.scale(ss, 1.0 / count)?;
            let ve = g.add_scalar(var, BN_EPS)?;
            let sd = g.sqrt(ve)?;
            let stats = (g.value(mean).reshape(&[shape[1]])?, g.value(var).reshape(&[shape[1]])?);
            (g.div(xc, sd)?, Some(stats))
        }
        Mode::Eval => {
            let mean = g.constant(running.0.reshape(&cs)?);
            let sd = g.constant(running.1.reshape(&cs)?.map(|v| (v + BN_EPS).sqrt()));
            let xc = g.sub(x, mean)?;
            (g.div(xc, sd)?, None)
        }
    };
    let gm = g.reshape(gamma, &cs)?;
    let bt = g.reshape(beta, &cs)?;
    let y = g.mul(xhat, gm)?;
    Ok((g.add(y, bt)?, stats))
}

/// Max pooling with square windows; ties pick the first position in
/// row-major window order.
pub fn max_pool(g: &mut Graph, x: NodeId, size: usize, stride: usize) -> Result<NodeId> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 4 || shape[2] < size || shape[3] < size || size == 0 || stride == 0 {
        return shape_err(format!("{size}×{size} pooling does not fit {shape:?}"));
    }
    let [b, c, h, w] = [shape[0], shape[1], shape[2], shape[3]];
    let (oh, ow) = ((h - size) / stride + 1, (w - size) / stride + 1);
    let v = g.value(x).data();
    let mut idx = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        let base = plane * h * w;
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = base + y * stride * w + xx * stride;
                for i in 0..size {
                    for j in 0..size {
                        let at = base + (y * stride + i) * w + xx * stride + j;
                        if v[at] > v[best] {
                            best = at;
                        }
                    }
                }
                idx.push(best);
            }
        }
    }
    g.gather(x, Arc::from(idx), &[b, c, oh, ow])
}

pub fn flatten(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    let shape = g.shape(x).to_vec();
    let rest: usize = shape[1..].iter().product();
    g.reshape(x, &[shape[0], rest])
}

/// `x·Wᵀ + b` for `x: [B, F]`, `W: [O, F]`.
pub fn linear(g: &mut Graph, x: NodeId, weight: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
    let wt = g.transpose(weight)?;
    let y = g.matmul(x, wt)?;
    match bias {
        Some(b) => {
            let o = g.shape(b)[0];
            let b = g.reshape(b, &[1, o])?;
            g.add(y, b)
        }
        None => Ok(y),
    }
}
