//! Bilinear similarity matrices `M` and their structured realizations.
//!
//! A patch of `C` channels with `HV` spatial taps is a vector of length
//! `C·HV`; the similarity between kernel `w` and patch `x` is `wᵀMx`. All
//! kinds except [`SimilarityKind::Unconstrained`] are block-diagonal with one
//! shared `HV×HV` block per channel and never build the full matrix.

mod graph;
mod shape;

pub use graph::{apply_similarity_nodes, cholesky_block, masked_block, SimilarityNodes};
pub use shape::{shape_mask, ShapeShadow, DEFAULT_ALPHA, DEFAULT_SHADOW_INIT};

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityKind {
    Identity,
    Diagonal,
    Unconstrained,
    BlockDiagonalShared,
    CholeskyPsd,
    ShapeMasked,
}

impl SimilarityKind {
    pub const ALL: [SimilarityKind; 6] = [
        SimilarityKind::Identity,
        SimilarityKind::Diagonal,
        SimilarityKind::Unconstrained,
        SimilarityKind::BlockDiagonalShared,
        SimilarityKind::CholeskyPsd,
        SimilarityKind::ShapeMasked,
    ];
}

#[derive(Clone, Debug, PartialEq)]
enum Repr {
    Identity,
    /// Diagonal of the shared block, length `HV`.
    Diagonal(Vec<f64>),
    /// Full `C·HV × C·HV` matrix.
    Unconstrained(Tensor),
    /// Shared `HV×HV` block.
    Block(Tensor),
    /// Lower-triangular factor `L` and the cached block `L·Lᵀ`.
    Cholesky { factor: Tensor, block: Tensor },
    /// Kernel-shape mask `D` (0/1, length `HV`, `None` until a shadow has
    /// been attached) and the similarity `R`.
    ShapeMasked { mask: Option<Vec<f64>>, r: Tensor },
}

/// One realization of the similarity matrix for patches of `channels × patch`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    channels: usize,
    patch: usize,
    repr: Repr,
}

fn check_square(t: &Tensor, n: usize, what: &str) -> Result<()> {
    if t.shape() != [n, n] {
        return shape_err(format!("{what} must be {n}×{n}, got {:?}", t.shape()));
    }
    Ok(())
}

impl SimilarityMatrix {
    pub fn identity(channels: usize, patch: usize) -> Self {
        SimilarityMatrix { channels, patch, repr: Repr::Identity }
    }

    pub fn diagonal(channels: usize, diag: Vec<f64>) -> Self {
        SimilarityMatrix { channels, patch: diag.len(), repr: Repr::Diagonal(diag) }
    }

    pub fn unconstrained(channels: usize, patch: usize, matrix: Tensor) -> Result<Self> {
        check_square(&matrix, channels * patch, "unconstrained similarity")?;
        Ok(SimilarityMatrix { channels, patch, repr: Repr::Unconstrained(matrix) })
    }

    pub fn block_shared(channels: usize, block: Tensor) -> Result<Self> {
        let hv = block.shape()[0];
        check_square(&block, hv, "shared similarity block")?;
        Ok(SimilarityMatrix { channels, patch: hv, repr: Repr::Block(block) })
    }

    /// PSD block `L·Lᵀ` from a lower-triangular factor.
    pub fn psd_block(channels: usize, factor: Tensor) -> Result<Self> {
        let hv = factor.shape()[0];
        check_square(&factor, hv, "Cholesky factor")?;
        for i in 0..hv {
            for j in i + 1..hv {
                if factor.at(&[i, j]) != 0.0 {
                    return Err(Error::Contract(format!(
                        "Cholesky factor has nonzero upper-triangular entry at ({i}, {j})"
                    )));
                }
            }
        }
        let block = factor.matmul(&factor.t()?)?;
        Ok(SimilarityMatrix { channels, patch: hv, repr: Repr::Cholesky { factor, block } })
    }

    /// `M_s = diag(D)·R` for a 0/1 kernel-shape mask `D`.
    pub fn compose_shape_similarity(channels: usize, mask: &[f64], r: Tensor) -> Result<Self> {
        check_square(&r, mask.len(), "shape-masked similarity R")?;
        Ok(SimilarityMatrix {
            channels,
            patch: mask.len(),
            repr: Repr::ShapeMasked { mask: Some(mask.to_vec()), r },
        })
    }

    /// Shape-masked similarity whose mask has not been derived yet.
    pub fn shape_masked_unset(channels: usize, r: Tensor) -> Result<Self> {
        let hv = r.shape()[0];
        check_square(&r, hv, "shape-masked similarity R")?;
        Ok(SimilarityMatrix { channels, patch: hv, repr: Repr::ShapeMasked { mask: None, r } })
    }

    pub fn from_shadow(channels: usize, shadow: &ShapeShadow, r: Tensor) -> Result<Self> {
        Self::compose_shape_similarity(channels, &shadow.mask(), r)
    }

    pub fn kind(&self) -> SimilarityKind {
        match self.repr {
            Repr::Identity => SimilarityKind::Identity,
            Repr::Diagonal(_) => SimilarityKind::Diagonal,
            Repr::Unconstrained(_) => SimilarityKind::Unconstrained,
            Repr::Block(_) => SimilarityKind::BlockDiagonalShared,
            Repr::Cholesky { .. } => SimilarityKind::CholeskyPsd,
            Repr::ShapeMasked { .. } => SimilarityKind::ShapeMasked,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn patch_size(&self) -> usize {
        self.patch
    }

    /// Length `C·HV` of the vectors this matrix acts on.
    pub fn dim(&self) -> usize {
        self.channels * self.patch
    }

    /// The parameters this kind actually stores: the diagonal, the full
    /// matrix, the shared block, the Cholesky factor or `R`.
    pub fn stored(&self) -> &[f64] {
        match &self.repr {
            Repr::Identity => &[],
            Repr::Diagonal(d) => d,
            Repr::Unconstrained(m) => m.data(),
            Repr::Block(b) => b.data(),
            Repr::Cholesky { factor, .. } => factor.data(),
            Repr::ShapeMasked { r, .. } => r.data(),
        }
    }

    pub fn mask(&self) -> Option<&[f64]> {
        match &self.repr {
            Repr::ShapeMasked { mask, .. } => mask.as_deref(),
            _ => None,
        }
    }

    fn require_mask(&self) -> Result<&[f64]> {
        match &self.repr {
            Repr::ShapeMasked { mask: None, .. } => Err(Error::State(
                "shape-masked similarity has no mask: its shadow D_r is unset".into(),
            )),
            Repr::ShapeMasked { mask: Some(m), .. } => Ok(m),
            _ => Ok(&[]),
        }
    }

    /// The effective shared `HV×HV` block `M_s`. Not defined for the
    /// unconstrained kind, which has no shared block.
    pub fn block(&self) -> Result<Tensor> {
        let hv = self.patch;
        match &self.repr {
            Repr::Identity => Ok(Tensor::eye(hv)),
            Repr::Diagonal(d) => Ok(Tensor::from_fn(&[hv, hv], |i| {
                if i / hv == i % hv { d[i / hv] } else { 0.0 }
            })),
            Repr::Unconstrained(_) => Err(Error::Contract(
                "unconstrained similarity has no shared block".into(),
            )),
            Repr::Block(b) => Ok(b.clone()),
            Repr::Cholesky { block, .. } => Ok(block.clone()),
            Repr::ShapeMasked { r, .. } => {
                let mask = self.require_mask()?;
                Ok(Tensor::from_fn(&[hv, hv], |i| mask[i / hv] * r.data()[i]))
            }
        }
    }

    /// Materialize the full `C·HV × C·HV` matrix. Meant for oracles and
    /// diagnostics; the structured operations never call it.
    pub fn dense(&self) -> Result<Tensor> {
        if let Repr::Unconstrained(m) = &self.repr {
            return Ok(m.clone());
        }
        let b = self.block()?;
        let (hv, n) = (self.patch, self.dim());
        let mut out = Tensor::zeros(&[n, n]);
        for c in 0..self.channels {
            for i in 0..hv {
                for j in 0..hv {
                    out.set(&[c * hv + i, c * hv + j], b.at(&[i, j]));
                }
            }
        }
        Ok(out)
    }

    fn check_vec(&self, v: &[f64], what: &str) -> Result<()> {
        if v.len() != self.dim() {
            return shape_err(format!(
                "{what} has length {} but the similarity acts on {}·{} = {}",
                v.len(),
                self.channels,
                self.patch,
                self.dim()
            ));
        }
        Ok(())
    }

    /// `M·x` for a single vector, exploiting structure.
    fn apply_vec(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        let hv = self.patch;
        match &self.repr {
            Repr::Identity => out.copy_from_slice(x),
            Repr::Diagonal(d) => {
                for (i, (o, &xv)) in out.iter_mut().zip(x).enumerate() {
                    *o = d[i % hv] * xv;
                }
            }
            Repr::Unconstrained(m) => {
                let n = self.dim();
                for (i, o) in out.iter_mut().enumerate() {
                    *o = (0..n).map(|j| m.data()[i * n + j] * x[j]).sum();
                }
            }
            Repr::Block(b) | Repr::Cholesky { block: b, .. } => {
                block_apply(b.data(), hv, x, out, |_| 1.0);
            }
            Repr::ShapeMasked { r, .. } => {
                let mask = self.require_mask()?;
                block_apply(r.data(), hv, x, out, |i| mask[i]);
            }
        }
        Ok(())
    }

    /// `Mᵀ·w` for a single vector, exploiting structure.
    fn apply_transpose_vec(&self, w: &[f64], out: &mut [f64]) -> Result<()> {
        let hv = self.patch;
        match &self.repr {
            Repr::Identity | Repr::Diagonal(_) => self.apply_vec(w, out)?,
            Repr::Cholesky { .. } => self.apply_vec(w, out)?,
            Repr::Unconstrained(m) => {
                let n = self.dim();
                for (j, o) in out.iter_mut().enumerate() {
                    *o = (0..n).map(|i| m.data()[i * n + j] * w[i]).sum();
                }
            }
            Repr::Block(b) => block_apply_t(b.data(), hv, w, out, |_| 1.0),
            Repr::ShapeMasked { r, .. } => {
                let mask = self.require_mask()?;
                block_apply_t(r.data(), hv, w, out, |i| mask[i]);
            }
        }
        Ok(())
    }

    /// `wᵀ M x`.
    pub fn bilinear_score(&self, w: &[f64], x: &[f64]) -> Result<f64> {
        self.check_vec(w, "kernel")?;
        self.check_vec(x, "patch")?;
        let mut mx = vec![0.0; x.len()];
        self.apply_vec(x, &mut mx)?;
        Ok(w.iter().zip(&mx).map(|(a, b)| a * b).sum())
    }

    /// Replace every column `x` of a `C·HV × P` matrix by `M·x`.
    pub fn apply(&self, cols: &Tensor) -> Result<Tensor> {
        if cols.ndim() != 2 || cols.shape()[0] != self.dim() {
            return shape_err(format!(
                "apply_similarity on columns {:?}; expected {} rows",
                cols.shape(),
                self.dim()
            ));
        }
        if let Repr::Identity = self.repr {
            return Ok(cols.clone());
        }
        let ct = cols.t()?;
        let (n, p) = (self.dim(), cols.shape()[1]);
        let mut out = vec![0.0; n * p];
        for j in 0..p {
            self.apply_vec(&ct.data()[j * n..(j + 1) * n], &mut out[j * n..(j + 1) * n])?;
        }
        Tensor::new(vec![p, n], out)?.t()
    }

    /// The equivalent plain kernel `Mᵀw`: `⟨Mᵀw, x⟩ = wᵀMx` for every `x`.
    pub fn fold_kernel(&self, w: &[f64]) -> Result<Vec<f64>> {
        self.check_vec(w, "kernel")?;
        self.require_mask()?;
        let mut out = vec![0.0; w.len()];
        self.apply_transpose_vec(w, &mut out)?;
        Ok(out)
    }

    /// Fold every row of a `K × C·HV` kernel matrix.
    pub fn fold_kernels(&self, kernels: &Tensor) -> Result<Tensor> {
        let n = self.dim();
        if kernels.len() % n != 0 {
            return shape_err(format!("kernels {:?} are not multiples of {n}", kernels.shape()));
        }
        let mut out = Vec::with_capacity(kernels.len());
        for row in kernels.data().chunks(n) {
            out.extend(self.fold_kernel(row)?);
        }
        Tensor::new(kernels.shape().to_vec(), out)
    }

    /// `λ·Σ|stored entries|`.
    pub fn l1_penalty(&self, lambda: f64) -> Result<f64> {
        if lambda < 0.0 {
            return Err(Error::Argument(format!("l1 weight must be non-negative, got {lambda}")));
        }
        Ok(lambda * self.stored().iter().map(|v| v.abs()).sum::<f64>())
    }

    /// Keep the `k` largest-magnitude stored entries and zero the rest.
    /// Ties keep the lowest flat index first.
    pub fn hard_sparsify(&self, k: usize) -> Result<Self> {
        let entries = self.stored();
        if k > entries.len() {
            return Err(Error::Argument(format!(
                "cannot keep {k} of {} stored entries",
                entries.len()
            )));
        }
        let mut order: Vec<usize> = (0..entries.len()).collect();
        order.sort_by(|&a, &b| {
            entries[b].abs().total_cmp(&entries[a].abs()).then(a.cmp(&b))
        });
        let mut kept = vec![0.0; entries.len()];
        for &i in &order[..k] {
            kept[i] = entries[i];
        }
        self.with_stored(kept)
    }

    fn with_stored(&self, values: Vec<f64>) -> Result<Self> {
        let c = self.channels;
        match &self.repr {
            Repr::Identity => Ok(self.clone()),
            Repr::Diagonal(_) => Ok(Self::diagonal(c, values)),
            Repr::Unconstrained(m) => {
                Self::unconstrained(c, self.patch, Tensor::new(m.shape().to_vec(), values)?)
            }
            Repr::Block(b) => Self::block_shared(c, Tensor::new(b.shape().to_vec(), values)?),
            Repr::Cholesky { factor, .. } => {
                Self::psd_block(c, Tensor::new(factor.shape().to_vec(), values)?)
            }
            Repr::ShapeMasked { mask, r } => Ok(SimilarityMatrix {
                channels: c,
                patch: self.patch,
                repr: Repr::ShapeMasked {
                    mask: mask.clone(),
                    r: Tensor::new(r.shape().to_vec(), values)?,
                },
            }),
        }
    }
}

/// `out = blockdiag(diag(row_scale)·B)·x` for a shared `hv×hv` block.
fn block_apply(b: &[f64], hv: usize, x: &[f64], out: &mut [f64], row_scale: impl Fn(usize) -> f64) {
    for (xc, oc) in x.chunks(hv).zip(out.chunks_mut(hv)) {
        for i in 0..hv {
            let s = row_scale(i);
            oc[i] = if s == 0.0 {
                0.0
            } else {
                s * (0..hv).map(|j| b[i * hv + j] * xc[j]).sum::<f64>()
            };
        }
    }
}

/// `out = blockdiag(diag(row_scale)·B)ᵀ·w`.
fn block_apply_t(b: &[f64], hv: usize, w: &[f64], out: &mut [f64], row_scale: impl Fn(usize) -> f64) {
    for (wc, oc) in w.chunks(hv).zip(out.chunks_mut(hv)) {
        for (j, o) in oc.iter_mut().enumerate() {
            *o = (0..hv).map(|i| row_scale(i) * b[i * hv + j] * wc[i]).sum();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;

    fn mat(rows: usize, v: &[f64]) -> Tensor {
        Tensor::new(vec![rows, v.len() / rows], v.to_vec()).unwrap()
    }

    /// Dense oracle `wᵀ(Mx)` with explicit loops over a materialized matrix.
    fn dense_score(m: &Tensor, w: &[f64], x: &[f64]) -> f64 {
        let n = w.len();
        let mut acc = 0.0;
        for i in 0..n {
            let mut mx = 0.0;
            for j in 0..n {
                mx += m.at(&[i, j]) * x[j];
            }
            acc += w[i] * mx;
        }
        acc
    }

    pub(crate) fn random_kind(kind: SimilarityKind, c: usize, hv: usize, rng: &mut crate::rng::Prng) -> SimilarityMatrix {
        match kind {
            SimilarityKind::Identity => SimilarityMatrix::identity(c, hv),
            SimilarityKind::Diagonal => {
                SimilarityMatrix::diagonal(c, Tensor::randn(&[hv], 1.0, rng).into_data())
            }
            SimilarityKind::Unconstrained => {
                SimilarityMatrix::unconstrained(c, hv, Tensor::randn(&[c * hv, c * hv], 1.0, rng)).unwrap()
            }
            SimilarityKind::BlockDiagonalShared => {
                SimilarityMatrix::block_shared(c, Tensor::randn(&[hv, hv], 1.0, rng)).unwrap()
            }
            SimilarityKind::CholeskyPsd => {
                let mut l = Tensor::randn(&[hv, hv], 1.0, rng);
                for i in 0..hv {
                    for j in i + 1..hv {
                        l.set(&[i, j], 0.0);
                    }
                    let d = l.at(&[i, i]).abs();
                    l.set(&[i, i], d);
                }
                SimilarityMatrix::psd_block(c, l).unwrap()
            }
            SimilarityKind::ShapeMasked => {
                let shadow = ShapeShadow::new(Tensor::uniform(&[hv], 0.0, 1.0, rng).into_data(), 0.5);
                SimilarityMatrix::from_shadow(c, &shadow, Tensor::randn(&[hv, hv], 1.0, rng)).unwrap()
            }
        }
    }

    #[test]
    fn bilinear_examples() {
        let id = SimilarityMatrix::identity(1, 2);
        assert_eq!(id.bilinear_score(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), 11.0);

        let m = mat(2, &[1.0, 2.0, 3.0, 4.0]);
        let un = SimilarityMatrix::unconstrained(1, 2, m.clone()).unwrap();
        assert_eq!(un.bilinear_score(&[1.0, 2.0], &[5.0, 6.0]).unwrap(), 95.0);
        assert_eq!(dense_score(&m, &[1.0, 2.0], &[5.0, 6.0]), 95.0);

        let bs = SimilarityMatrix::block_shared(2, mat(2, &[1.0, 0.0, 0.0, 2.0])).unwrap();
        let ones = [1.0; 4];
        assert_eq!(bs.bilinear_score(&ones, &ones).unwrap(), 6.0);
        assert_eq!(dense_score(&bs.dense().unwrap(), &ones, &ones), 6.0);
    }

    #[test]
    fn bilinear_dimension_mismatch() {
        let id = SimilarityMatrix::identity(2, 2);
        assert!(matches!(id.bilinear_score(&[1.0; 3], &[1.0; 4]), Err(Error::Shape(_))));
    }

    #[test]
    fn apply_examples() {
        let mut rng = seeded(7);
        let cols = Tensor::randn(&[6, 5], 1.0, &mut rng);
        assert_eq!(SimilarityMatrix::identity(2, 3).apply(&cols).unwrap(), cols);

        let d = vec![2.0, -1.0, 0.5];
        let out = SimilarityMatrix::diagonal(2, d.clone()).apply(&cols).unwrap();
        for r in 0..6 {
            for p in 0..5 {
                assert_eq!(out.at(&[r, p]), d[r % 3] * cols.at(&[r, p]));
            }
        }

        let bs = random_kind(SimilarityKind::BlockDiagonalShared, 2, 3, &mut rng);
        let oracle = bs.dense().unwrap().matmul(&cols).unwrap();
        assert!(bs.apply(&cols).unwrap().max_abs_diff(&oracle) < 1e-12);
        assert!(bs.apply(&Tensor::zeros(&[5, 5])).is_err());
    }

    #[test]
    fn fold_examples() {
        let w = [1.0, 1.0];
        assert_eq!(SimilarityMatrix::identity(1, 2).fold_kernel(&w).unwrap(), w.to_vec());
        assert_eq!(
            SimilarityMatrix::diagonal(1, vec![2.0, 3.0]).fold_kernel(&w).unwrap(),
            vec![2.0, 3.0]
        );
        let un = SimilarityMatrix::unconstrained(1, 2, mat(2, &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let f = un.fold_kernel(&[1.0, 2.0]).unwrap();
        assert_eq!(f, vec![7.0, 10.0]);
        assert_eq!(f[0] * 5.0 + f[1] * 6.0, 95.0);
        assert_eq!(un.bilinear_score(&[1.0, 2.0], &[5.0, 6.0]).unwrap(), 95.0);
    }

    #[test]
    fn fold_unset_shape_mask_is_state_error() {
        let s = SimilarityMatrix::shape_masked_unset(1, Tensor::eye(2)).unwrap();
        assert!(matches!(s.fold_kernel(&[1.0, 1.0]), Err(Error::State(_))));
    }

    #[test]
    fn compose_shape_examples() {
        let r = mat(2, &[1.0, 2.0, 3.0, 4.0]);
        let full = SimilarityMatrix::compose_shape_similarity(1, &[1.0, 1.0], r.clone()).unwrap();
        assert_eq!(full.block().unwrap(), r);
        let none = SimilarityMatrix::compose_shape_similarity(1, &[0.0, 0.0], r.clone()).unwrap();
        assert_eq!(none.block().unwrap(), Tensor::zeros(&[2, 2]));
        assert_eq!(none.bilinear_score(&[1.0, 2.0], &[3.0, -4.0]).unwrap(), 0.0);
        let half = SimilarityMatrix::compose_shape_similarity(1, &[1.0, 0.0], r).unwrap();
        assert_eq!(half.dense().unwrap(), mat(2, &[1.0, 2.0, 0.0, 0.0]));
    }

    #[test]
    fn psd_block_examples() {
        let id = SimilarityMatrix::psd_block(1, Tensor::eye(3)).unwrap();
        assert_eq!(id.block().unwrap(), Tensor::eye(3));
        let d = SimilarityMatrix::psd_block(1, mat(2, &[2.0, 0.0, 0.0, 3.0])).unwrap();
        assert_eq!(d.block().unwrap(), mat(2, &[4.0, 0.0, 0.0, 9.0]));
        assert!(matches!(
            SimilarityMatrix::psd_block(1, mat(2, &[1.0, 0.5, 0.0, 1.0])),
            Err(Error::Contract(_))
        ));
    }

    /// Smallest eigenvalue of a symmetric matrix by power iteration on
    /// `cI − A`, with `c` a Gershgorin bound.
    fn min_eigenvalue(a: &Tensor) -> f64 {
        let n = a.shape()[0];
        let c: f64 = (0..n)
            .map(|i| (0..n).map(|j| a.at(&[i, j]).abs()).sum::<f64>())
            .fold(0.0, f64::max);
        let shifted = Tensor::from_fn(&[n, n], |k| {
            let (i, j) = (k / n, k % n);
            if i == j { c - a.at(&[i, j]) } else { -a.at(&[i, j]) }
        });
        let mut v = Tensor::from_fn(&[n, 1], |i| 1.0 + i as f64 * 0.1);
        let mut lambda = 0.0;
        for _ in 0..5000 {
            let w = shifted.matmul(&v).unwrap();
            lambda = w.norm() / v.norm();
            v = w.scale(1.0 / w.norm());
        }
        c - lambda
    }

    #[test]
    fn psd_block_is_symmetric_psd() {
        let mut rng = seeded(11);
        for _ in 0..10 {
            let m = random_kind(SimilarityKind::CholeskyPsd, 1, 4, &mut rng);
            let b = m.block().unwrap();
            assert!(b.max_abs_diff(&b.t().unwrap()) < 1e-12);
            assert!(min_eigenvalue(&b) >= -1e-10);
        }
    }

    #[test]
    fn l1_examples() {
        let z = SimilarityMatrix::block_shared(1, Tensor::zeros(&[2, 2])).unwrap();
        assert_eq!(z.l1_penalty(1.0).unwrap(), 0.0);
        let d = SimilarityMatrix::diagonal(3, vec![1.0, -2.0]);
        assert_eq!(d.l1_penalty(0.5).unwrap(), 1.5);
        let mut rng = seeded(2);
        let m = Tensor::randn(&[4, 4], 1.0, &mut rng);
        let un = SimilarityMatrix::unconstrained(2, 2, m.clone()).unwrap();
        let oracle: f64 = m.data().iter().map(|v| v.abs()).sum::<f64>() * 0.3;
        assert!((un.l1_penalty(0.3).unwrap() - oracle).abs() < 1e-12);
        assert!(un.l1_penalty(-1.0).is_err());
    }

    #[test]
    fn hard_sparsify_examples() {
        let b = SimilarityMatrix::block_shared(1, mat(2, &[3.0, -5.0, 1.0, 4.0])).unwrap();
        assert_eq!(b.hard_sparsify(4).unwrap(), b);
        assert_eq!(b.hard_sparsify(0).unwrap().block().unwrap(), Tensor::zeros(&[2, 2]));
        assert_eq!(
            b.hard_sparsify(2).unwrap().block().unwrap(),
            mat(2, &[0.0, -5.0, 0.0, 4.0])
        );
        assert!(matches!(b.hard_sparsify(5), Err(Error::Argument(_))));
        let tie = SimilarityMatrix::diagonal(1, vec![1.0, -1.0, 1.0]);
        assert_eq!(tie.hard_sparsify(2).unwrap().stored(), &[1.0, -1.0, 0.0]);
    }

    #[test]
    fn hyperspherical_special_case() {
        let mut rng = seeded(5);
        for _ in 0..100 {
            let w = Tensor::randn(&[8], 1.0, &mut rng);
            let x = Tensor::randn(&[8], 1.0, &mut rng);
            let s = 1.0 / (w.norm() * x.norm());
            let m = SimilarityMatrix::diagonal(2, vec![s; 4]);
            let cos = w.dot(&x).unwrap() / (w.norm() * x.norm());
            assert!((m.bilinear_score(w.data(), x.data()).unwrap() - cos).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn structured_score_matches_dense_and_fold(seed in any::<u64>(), c in 1usize..4, hv in 1usize..10, k in 0usize..6) {
            let mut rng = seeded(seed);
            let m = random_kind(SimilarityKind::ALL[k], c, hv, &mut rng);
            let w = Tensor::randn(&[c * hv], 1.0, &mut rng);
            let x = Tensor::randn(&[c * hv], 1.0, &mut rng);
            let s = m.bilinear_score(w.data(), x.data()).unwrap();
            let dense = dense_score(&m.dense().unwrap(), w.data(), x.data());
            prop_assert!((s - dense).abs() <= 1e-12 * (1.0 + dense.abs()));
            let folded = m.fold_kernel(w.data()).unwrap();
            let via_fold: f64 = folded.iter().zip(x.data()).map(|(a, b)| a * b).sum();
            prop_assert!((via_fold - s).abs() <= 1e-12 * (1.0 + s.abs()));
        }

        #[test]
        fn masked_rows_of_r_are_ignored(seed in any::<u64>(), hv in 2usize..10) {
            let mut rng = seeded(seed);
            let mut mask: Vec<f64> = (0..hv).map(|i| (i % 2) as f64).collect();
            mask[0] = 0.0;
            let r = Tensor::randn(&[hv, hv], 1.0, &mut rng);
            let mut r2 = r.clone();
            for i in (0..hv).filter(|&i| mask[i] == 0.0) {
                for j in 0..hv {
                    r2.set(&[i, j], rng.random_range(-5.0..5.0));
                }
            }
            let w = Tensor::randn(&[2 * hv], 1.0, &mut rng);
            let x = Tensor::randn(&[2 * hv], 1.0, &mut rng);
            let a = SimilarityMatrix::compose_shape_similarity(2, &mask, r).unwrap();
            let b = SimilarityMatrix::compose_shape_similarity(2, &mask, r2).unwrap();
            prop_assert_eq!(a.bilinear_score(w.data(), x.data()).unwrap(), b.bilinear_score(w.data(), x.data()).unwrap());
        }
    }

    use rand::Rng;
}
