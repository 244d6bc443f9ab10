//! Global similarity: convolution written as one structured matrix acting on
//! the whole flattened feature map, with a similarity applied to that map
//! first, and self-attention as its input-dependent instance.
//!
//! Feature maps are `C×m×m` and flatten channel-major (`c·m² + row·m + col`);
//! kernels are `C×k×k` with odd `k` and dimension-preserving padding.

use crate::autodiff::{Graph, NodeId};
use crate::error::{shape_err, Error, Result};
use crate::nn::layers::conv2d;
use crate::similarity::SimilarityMatrix;
use crate::tensor::{im2col, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Padding {
    #[default]
    Zero,
    /// Wrap around the borders (a block-circulant operator).
    Circular,
}

/// `W_G` of shape `[m²·C, m²]` with `W_Gᵀ·x_F` equal to the stride-1,
/// dimension-preserving convolution of `x` with the kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvAsMatrix {
    matrix: Tensor,
    m: usize,
    channels: usize,
}

pub fn conv_as_matrix(w: &Tensor, m: usize, padding: Padding) -> Result<ConvAsMatrix> {
    let s = w.shape();
    if s.len() != 3 || s[1] != s[2] {
        return shape_err(format!("kernel must be C×k×k, got {s:?}"));
    }
    let (c, k) = (s[0], s[1]);
    if k % 2 == 0 {
        return Err(Error::Argument(format!(
            "even kernel size {k} has no symmetric dimension-preserving padding"
        )));
    }
    if m == 0 || k > 2 * m - 1 {
        return Err(Error::Argument(format!("kernel size {k} exceeds 2m−1 for m = {m}")));
    }
    let (mm, r) = (m * m, (k / 2) as isize);
    let mut wg = Tensor::zeros(&[mm * c, mm]);
    for i in 0..m {
        for j in 0..m {
            let p = i * m + j;
            for a in 0..k {
                for b in 0..k {
                    let (y, x) = (i as isize + a as isize - r, j as isize + b as isize - r);
                    let (y, x) = match padding {
                        Padding::Zero => {
                            if y < 0 || x < 0 || y >= m as isize || x >= m as isize {
                                continue;
                            }
                            (y as usize, x as usize)
                        }
                        Padding::Circular => (y.rem_euclid(m as isize) as usize, x.rem_euclid(m as isize) as usize),
                    };
                    for ch in 0..c {
                        let q = ch * mm + y * m + x;
                        let cur = wg.at(&[q, p]);
                        wg.set(&[q, p], cur + w.at(&[ch, a, b]));
                    }
                }
            }
        }
    }
    Ok(ConvAsMatrix { matrix: wg, m, channels: c })
}

impl ConvAsMatrix {
    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn side(&self) -> usize {
        self.m
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `W_Gᵀ·x_F`, length `m²`.
    pub fn apply(&self, x_f: &[f64]) -> Result<Tensor> {
        let n = self.m * self.m * self.channels;
        if x_f.len() != n {
            return shape_err(format!("flattened map has length {}, operator expects {n}", x_f.len()));
        }
        self.matrix.t()?.matmul(&Tensor::new(vec![n, 1], x_f.to_vec())?)?.into_reshape(&[self.m * self.m])
    }
}

/// A similarity over the whole flattened `C×m×m` map.
#[derive(Clone, Debug, PartialEq)]
pub enum GlobalSimilarity {
    Identity { m: usize, c: usize },
    /// One spatial mask of length `m²`, shared by all channels.
    DiagonalMask { m: usize, c: usize, mask: Vec<f64> },
    /// One `m²×m²` block, shared by all channels.
    BlockShared { m: usize, c: usize, block: Tensor },
    /// Arbitrary `m²C×m²C` matrix.
    Dense { m: usize, c: usize, matrix: Tensor },
    /// Attention map `G1(X)·G2(X)ᵀ` (row-softmaxed when `softmax`), applied
    /// like a shared block.
    Attention { m: usize, c: usize, map: Tensor, softmax: bool },
}

impl GlobalSimilarity {
    pub fn dims(&self) -> (usize, usize) {
        match self {
            GlobalSimilarity::Identity { m, c }
            | GlobalSimilarity::DiagonalMask { m, c, .. }
            | GlobalSimilarity::BlockShared { m, c, .. }
            | GlobalSimilarity::Dense { m, c, .. }
            | GlobalSimilarity::Attention { m, c, .. } => (*m, *c),
        }
    }

    fn shared_block(&self) -> Option<&Tensor> {
        match self {
            GlobalSimilarity::BlockShared { block, .. } => Some(block),
            GlobalSimilarity::Attention { map, .. } => Some(map),
            _ => None,
        }
    }

    /// `M_G·x_F`.
    pub fn apply(&self, x_f: &[f64]) -> Result<Vec<f64>> {
        let (m, c) = self.dims();
        let mm = m * m;
        if x_f.len() != mm * c {
            return shape_err(format!("flattened map has length {}, similarity expects {}", x_f.len(), mm * c));
        }
        Ok(match self {
            GlobalSimilarity::Identity { .. } => x_f.to_vec(),
            GlobalSimilarity::DiagonalMask { mask, .. } => {
                x_f.iter().enumerate().map(|(i, v)| mask[i % mm] * v).collect()
            }
            GlobalSimilarity::Dense { matrix, .. } => {
                matrix.matmul(&Tensor::new(vec![mm * c, 1], x_f.to_vec())?)?.into_data()
            }
            _ => {
                let b = self.shared_block().expect("block kinds");
                let x = Tensor::new(vec![c, mm], x_f.to_vec())?;
                b.matmul(&x.t()?)?.t()?.into_data()
            }
        })
    }

    /// Dense `m²C×m²C` expansion, for oracles.
    pub fn dense(&self) -> Result<Tensor> {
        let (m, c) = self.dims();
        let n = m * m * c;
        let mut out = Tensor::zeros(&[n, n]);
        for j in 0..n {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            for (i, v) in self.apply(&e)?.into_iter().enumerate() {
                out.set(&[i, j], v);
            }
        }
        Ok(out)
    }
}

fn check_map(x: &Tensor, m: usize, c: usize) -> Result<()> {
    if x.shape() != [c, m, m] {
        return shape_err(format!("feature map {:?} does not match C×m×m = {c}×{m}×{m}", x.shape()));
    }
    Ok(())
}

/// `W_Gᵀ·M_G·x_F`.
pub fn gns_forward(w: &ConvAsMatrix, sim: &GlobalSimilarity, x: &Tensor) -> Result<Tensor> {
    let (m, c) = sim.dims();
    if (m, c) != (w.m, w.channels) {
        return shape_err(format!(
            "similarity acts on {c}×{m}×{m}, operator on {}×{}×{}",
            w.channels, w.m, w.m
        ));
    }
    check_map(x, m, c)?;
    w.apply(&sim.apply(x.data())?)
}

/// Dimension-preserving convolution of `x` (`C×m×m`) with kernel `w`
/// (`C×k×k`) whose inner product is replaced by the local similarity `sim`
/// in every window. Returns the `m²` output map, flattened.
pub fn lns_forward(w: &Tensor, sim: &SimilarityMatrix, x: &Tensor) -> Result<Tensor> {
    let k = w.shape()[1];
    let cols = im2col(x, k, k, 1, k / 2)?;
    let mx = sim.apply(&cols)?;
    let n = w.len();
    Tensor::new(vec![1, n], w.data().to_vec())?.matmul(&mx)?.into_reshape(&[mx.shape()[1]])
}

/// The `k×k` window of a spatial mask around output `(i, j)`, zero outside
/// the map: the local diagonal similarity that agrees with the global mask
/// at that one position.
pub fn mask_seen_from(mask: &[f64], m: usize, k: usize, i: usize, j: usize) -> Vec<f64> {
    let r = (k / 2) as isize;
    let mut diag = vec![0.0; k * k];
    for a in 0..k {
        for b in 0..k {
            let (y, x) = (i as isize + a as isize - r, j as isize + b as isize - r);
            if y >= 0 && x >= 0 && (y as usize) < m && (x as usize) < m {
                diag[a * k + b] = mask[y as usize * m + x as usize];
            }
        }
    }
    diag
}

/// `[m², C]` with column `c` holding channel `c` of `x`.
fn positions_by_channel(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    x.reshape(&[s[0], s[1] * s[2]])?.t()
}

/// `A = G1(X)·G2(X)ᵀ` for 1×1 convolutions `G1, G2` (`C×C`).
pub fn self_attention_similarity(g1: &Tensor, g2: &Tensor, x: &Tensor, softmax: bool) -> Result<GlobalSimilarity> {
    let s = x.shape();
    if s.len() != 3 || s[1] != s[2] {
        return shape_err(format!("feature map must be C×m×m, got {s:?}"));
    }
    let (c, m) = (s[0], s[1]);
    for g in [g1, g2] {
        if g.shape() != [c, c] {
            return shape_err(format!("1×1 convolution {:?} must map {c} to {c} channels", g.shape()));
        }
    }
    let xp = positions_by_channel(x)?;
    let a = xp.matmul(&g1.t()?)?;
    let b = xp.matmul(&g2.t()?)?;
    let mut map = a.matmul(&b.t()?)?;
    if softmax {
        let mm = m * m;
        for row in map.data_mut().chunks_mut(mm) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            for v in row.iter_mut() {
                *v = (*v - mx).exp() / z;
            }
        }
    }
    Ok(GlobalSimilarity::Attention { m, c, map, softmax })
}

/// Self-attention followed by the convolution with each kernel of `w`
/// (`K×C×k×k`); returns `K×m×m`.
pub fn self_attention_forward(w: &Tensor, g1: &Tensor, g2: &Tensor, x: &Tensor, softmax: bool) -> Result<Tensor> {
    let sim = self_attention_similarity(g1, g2, x, softmax)?;
    let (m, c) = sim.dims();
    let ws = w.shape();
    if ws.len() != 4 || ws[1] != c {
        return shape_err(format!("kernels {ws:?} do not fit {c} channels"));
    }
    let attended = sim.apply(x.data())?;
    let per = c * ws[2] * ws[3];
    let mut out = Vec::with_capacity(ws[0] * m * m);
    for kernel in w.data().chunks(per) {
        let op = conv_as_matrix(&Tensor::new(vec![c, ws[2], ws[3]], kernel.to_vec())?, m, Padding::Zero)?;
        out.extend(op.apply(&attended)?.into_data());
    }
    Tensor::new(vec![ws[0], m, m], out)
}

/// Differentiable self-attention layer on graph nodes: `x` is `C×m×m`,
/// `w` is `K×C×k×k`, `g1, g2` are `C×C`. Returns `K×m×m`.
pub fn self_attention_nodes(g: &mut Graph, w: NodeId, g1: NodeId, g2: NodeId, x: NodeId, softmax: bool) -> Result<NodeId> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || s[1] != s[2] {
        return shape_err(format!("feature map must be C×m×m, got {s:?}"));
    }
    let (c, m) = (s[0], s[1]);
    let k = g.shape(w)[2];
    if k % 2 == 0 {
        return Err(Error::Argument(format!("even kernel size {k}")));
    }
    let xf = g.reshape(x, &[c, m * m])?;
    let xp = g.transpose(xf)?;
    let g1t = g.transpose(g1)?;
    let g2t = g.transpose(g2)?;
    let a = g.matmul(xp, g1t)?;
    let b = g.matmul(xp, g2t)?;
    let bt = g.transpose(b)?;
    let mut map = g.matmul(a, bt)?;
    if softmax {
        map = g.softmax_rows(map)?;
    }
    let y = g.matmul(map, xp)?;
    let y = g.transpose(y)?;
    let y = g.reshape(y, &[1, c, m, m])?;
    let out = conv2d(g, y, w, None, 1, k / 2, None)?;
    let kk = g.shape(w)[0];
    g.reshape(out, &[kk, m, m])
}
