//! Hyperspherical similarity predictors and input adaptation networks.

use std::sync::Arc;

use indexmap::IndexMap;

use crate::autodiff::{Graph, NodeId};
use crate::error::{shape_err, Error, Result};
use crate::nn::layers::conv_columns;
use crate::nn::spec::{NormMode, Variant};
use crate::similarity::{SimilarityMatrix, SimilarityNodes};
use crate::tensor::{ConvGeometry, Tensor};

pub const SPHERE_EPS: f64 = 1e-6;

/// Normalization of a single sphere convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SphereMode {
    Both,
    XOnly,
}

/// `w·x / ((‖w‖+ε)(‖x‖+ε))`, or `w·x / (‖x‖+ε)` with only `x` normalized.
pub fn sphere_conv(w: &[f64], x: &[f64], mode: SphereMode, eps: f64) -> Result<f64> {
    if w.len() != x.len() {
        return shape_err(format!("sphere_conv on lengths {} and {}", w.len(), x.len()));
    }
    if !(eps > 0.0) {
        return Err(Error::Argument(format!("eps must be positive, got {eps}")));
    }
    let dot: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum();
    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt() + eps;
    Ok(match mode {
        SphereMode::Both => dot / ((w.iter().map(|v| v * v).sum::<f64>().sqrt() + eps) * nx),
        SphereMode::XOnly => dot / nx,
    })
}

/// `W·X` for `W: [O, D]` and columns `X: [D, N]`, optionally divided by the
/// column norms of `X` and the row norms of `W`.
pub fn sphere_linear(g: &mut Graph, w: NodeId, x: NodeId, normalize_x: bool, normalize_w: bool) -> Result<NodeId> {
    let mut y = g.matmul(w, x)?;
    if normalize_x {
        let nx = g.norm_axis_keep(x, 0)?;
        let nx = g.add_scalar(nx, SPHERE_EPS)?;
        y = g.div(y, nx)?;
    }
    if normalize_w {
        let nw = g.norm_axis_keep(w, 1)?;
        let nw = g.add_scalar(nw, SPHERE_EPS)?;
        y = g.div(y, nw)?;
    }
    Ok(y)
}

/// Layer options of a similarity predictor, independent of its weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PredictorConfig {
    pub variant: Variant,
    pub norm: NormMode,
    pub kernel: usize,
    pub per_patch: bool,
    pub identity_residual: bool,
}

impl PredictorConfig {
    pub fn patch(&self) -> usize {
        self.kernel * self.kernel
    }

    pub fn output_dim(&self) -> usize {
        match self.variant {
            Variant::Dns => self.patch(),
            Variant::Uns => self.patch() * self.patch(),
        }
    }
}

/// Graph output of one prediction.
#[derive(Clone, Copy, Debug)]
pub struct Prediction {
    /// Raw network output, `[N, output_dim]`, one row per sample or patch.
    pub raw: NodeId,
    pub similarity: SimilarityNodes,
}

/// Run the predictor on `x: [B, C, H, W]`.
///
/// Per feature map: sphere convolution (`k×k`, input-normalized) → ReLU →
/// global average pooling → sphere-normalized linear output. Per patch: the
/// hidden layer sees each `k×k` window of `layer_geom` on its own.
pub fn predict_nodes(
    g: &mut Graph,
    cfg: &PredictorConfig,
    hidden: NodeId,
    out: NodeId,
    x: NodeId,
    layer_geom: &ConvGeometry,
) -> Result<Prediction> {
    let hs = g.shape(hidden).to_vec();
    let os = g.shape(out).to_vec();
    let cin = g.shape(x)[1];
    if hs.len() != 4 || hs[1] != cin || hs[2] != cfg.kernel || hs[3] != cfg.kernel {
        return shape_err(format!(
            "predictor hidden weights {hs:?} do not fit {cin} input channels with a {k}×{k} kernel",
            k = cfg.kernel
        ));
    }
    if os.len() != 2 || os[1] != hs[0] {
        return shape_err(format!("predictor output weights {os:?} do not follow hidden width {}", hs[0]));
    }
    if os[0] != cfg.output_dim() {
        return Err(Error::Configuration(format!(
            "predictor has {} outputs; a {k}×{k} kernel needs {} (diagonal) or {} (unconstrained)",
            os[0],
            cfg.patch(),
            cfg.patch() * cfg.patch(),
            k = cfg.kernel
        )));
    }
    let normalized = cfg.norm != NormMode::None;
    let wh = g.reshape(hidden, &[hs[0], hs[1] * hs[2] * hs[3]])?;
    let batch = layer_geom.batch;
    let feats = if cfg.per_patch {
        let geom = ConvGeometry { channels: cin, ..*layer_geom };
        let cols = g.im2col(x, geom)?;
        let h = sphere_linear(g, wh, cols, normalized, false)?;
        g.relu(h)?
    } else {
        let (cols, geom) = conv_columns(g, x, cfg.kernel, 1, cfg.kernel / 2)?;
        let h = sphere_linear(g, wh, cols, normalized, false)?;
        let h = g.relu(h)?;
        let p = geom.positions();
        let h = g.reshape(h, &[hs[0], batch, p])?;
        let s = g.sum_to(h, &[hs[0], batch, 1])?;
        let s = g.scale(s, 1.0 / p as f64)?;
        g.reshape(s, &[hs[0], batch])?
    };
    let o = sphere_linear(g, out, feats, normalized, cfg.norm == NormMode::Both)?;
    let raw = g.transpose(o)?;
    let n = g.shape(raw)[0];
    let hv = cfg.patch();
    let similarity = match cfg.variant {
        Variant::Dns => {
            let d = if cfg.identity_residual { g.add_scalar(raw, 1.0)? } else { raw };
            if cfg.per_patch {
                SimilarityNodes::PatchDiagonal(d)
            } else {
                SimilarityNodes::SampleDiagonal(d)
            }
        }
        Variant::Uns => {
            let mut m = g.reshape(raw, &[n, hv, hv])?;
            if cfg.identity_residual {
                let eye = g.constant(Tensor::eye(hv).into_reshape(&[1, hv, hv])?);
                m = g.add(m, eye)?;
            }
            if cfg.per_patch {
                SimilarityNodes::PatchBlock(m)
            } else {
                SimilarityNodes::SampleBlock(m)
            }
        }
    };
    Ok(Prediction { raw, similarity })
}

/// A stand-alone predictor `M_θ(X) = SphereNet(X; θ) + I`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpherePredictor {
    pub config: PredictorConfig,
    /// `[hidden, C, k, k]`.
    pub hidden: Tensor,
    /// `[output_dim, hidden]`.
    pub out: Tensor,
}

impl SpherePredictor {
    pub fn new(config: PredictorConfig, hidden: Tensor, out: Tensor) -> Result<Self> {
        let od = out.shape()[0];
        if od != config.output_dim() {
            return Err(Error::Configuration(format!(
                "predictor output_dim {od} is neither HV = {} nor HV² = {} as the variant requires",
                config.patch(),
                config.patch() * config.patch()
            )));
        }
        Ok(SpherePredictor { config, hidden, out })
    }

    /// Raw outputs and the resolved similarity for one `C×H×W` input, with
    /// the predictor evaluated over the whole map (`per_patch` is ignored).
    pub fn predict(&self, x: &Tensor) -> Result<(Tensor, SimilarityMatrix)> {
        if x.ndim() != 3 {
            return shape_err(format!("predict_similarity expects C×H×W, got {:?}", x.shape()));
        }
        let cfg = PredictorConfig { per_patch: false, ..self.config };
        let mut g = Graph::new();
        let mut shape = vec![1];
        shape.extend_from_slice(x.shape());
        let xn = g.constant(x.reshape(&shape)?);
        let h = g.constant(self.hidden.clone());
        let o = g.constant(self.out.clone());
        let geom = ConvGeometry::new(&shape, cfg.kernel, cfg.kernel, 1, cfg.kernel / 2)?;
        let p = predict_nodes(&mut g, &cfg, h, o, xn, &geom)?;
        let raw = g.value(p.raw).reshape(&[cfg.output_dim()])?;
        let c = x.shape()[0];
        let hv = cfg.patch();
        let res = if cfg.identity_residual { 1.0 } else { 0.0 };
        let sim = match cfg.variant {
            Variant::Dns => SimilarityMatrix::diagonal(c, raw.data().iter().map(|v| v + res).collect()),
            Variant::Uns => {
                let block = raw.reshape(&[hv, hv])?.axpy(res, &Tensor::eye(hv))?;
                if c == 1 {
                    SimilarityMatrix::unconstrained(1, hv, block)?
                } else {
                    SimilarityMatrix::block_shared(c, block)?
                }
            }
        };
        Ok((raw, sim))
    }
}

/// Maps a `C×H×W` feature map to a fixed channel width so one predictor can
/// serve layers of different widths. Identity when `C` already matches.
#[derive(Debug, PartialEq, Eq)]
pub struct Adapter {
    pub input_shape: [usize; 3],
    pub out_channels: usize,
    /// Name of the `[out_channels, C]` 1×1 convolution weight, if any.
    pub weight: Option<String>,
}

impl Adapter {
    pub fn is_identity(&self) -> bool {
        self.weight.is_none()
    }

    /// Graph version over a batch `[B, C, H, W]`.
    pub fn forward(&self, g: &mut Graph, weight: Option<NodeId>, x: NodeId) -> Result<NodeId> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[1..] != self.input_shape {
            return Err(Error::Configuration(format!(
                "no adapter registered for input shape {:?} (this one adapts {:?})",
                &s[1..],
                self.input_shape
            )));
        }
        let Some(w) = weight else { return Ok(x) };
        let (b, c, h, wd) = (s[0], s[1], s[2], s[3]);
        let xp = g.permute(x, &[1, 0, 2, 3])?;
        let xp = g.reshape(xp, &[c, b * h * wd])?;
        let y = g.matmul(w, xp)?;
        let y = g.reshape(y, &[self.out_channels, b, h, wd])?;
        g.permute(y, &[1, 0, 2, 3])
    }
}

/// Adaptation networks keyed by input shape; layers whose inputs have the
/// same shape receive the same adapter.
#[derive(Debug, Default, Clone)]
pub struct AdapterRegistry {
    adapters: IndexMap<[usize; 3], Arc<Adapter>>,
}

impl AdapterRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, input_shape: [usize; 3], out_channels: usize) -> Arc<Adapter> {
        self.adapters
            .entry(input_shape)
            .or_insert_with(|| {
                let weight = (input_shape[0] != out_channels).then(|| {
                    format!("adapt.{}x{}x{}.weight", input_shape[0], input_shape[1], input_shape[2])
                });
                Arc::new(Adapter { input_shape, out_channels, weight })
            })
            .clone()
    }

    pub fn get(&self, input_shape: [usize; 3]) -> Result<Arc<Adapter>> {
        self.adapters.get(&input_shape).cloned().ok_or_else(|| {
            Error::Configuration(format!("no adapter registered for input shape {input_shape:?}"))
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = &Arc<Adapter>> {
        self.adapters.values()
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }
}

/// Apply `adapter` to one `C×H×W` input.
pub fn adapt_input(adapter: &Adapter, weight: Option<&Tensor>, x: &Tensor) -> Result<Tensor> {
    if adapter.weight.is_some() != weight.is_some() {
        return Err(Error::Configuration("adapter weight presence does not match the adapter".into()));
    }
    let mut g = Graph::new();
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    let xn = g.constant(x.reshape(&shape)?);
    let w = weight.map(|w| g.constant(w.clone()));
    let y = adapter.forward(&mut g, w, xn)?;
    let v = g.value(y).clone();
    let s = v.shape()[1..].to_vec();
    v.into_reshape(&s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::similarity::SimilarityKind;

    fn cfg(variant: Variant, norm: NormMode) -> PredictorConfig {
        PredictorConfig { variant, norm, kernel: 3, per_patch: false, identity_residual: true }
    }

    #[test]
    fn sphere_conv_examples() {
        let v = sphere_conv(&[3.0, 4.0], &[4.0, 3.0], SphereMode::Both, SPHERE_EPS).unwrap();
        assert!((v - 0.96).abs() < 1e-6);
        let v = sphere_conv(&[3.0, 4.0], &[4.0, 3.0], SphereMode::XOnly, SPHERE_EPS).unwrap();
        assert!((v - 4.8).abs() < 1e-5);
        let w = [0.3, -1.2, 2.0];
        assert!((sphere_conv(&w, &w, SphereMode::Both, SPHERE_EPS).unwrap() - 1.0).abs() < 1e-6);
        assert_eq!(sphere_conv(&[0.0; 2], &[0.0; 2], SphereMode::Both, SPHERE_EPS).unwrap(), 0.0);
    }

    #[test]
    fn zero_theta_predicts_identity() {
        let mut rng = seeded(4);
        let x = Tensor::randn(&[2, 5, 5], 1.0, &mut rng);
        for variant in [Variant::Dns, Variant::Uns] {
            let c = cfg(variant, NormMode::Both);
            let p = SpherePredictor::new(c, Tensor::zeros(&[8, 2, 3, 3]), Tensor::zeros(&[c.output_dim(), 8])).unwrap();
            let (raw, m) = p.predict(&x).unwrap();
            assert!(raw.data().iter().all(|&v| v == 0.0));
            assert_eq!(m.dense().unwrap(), Tensor::eye(18));
        }
    }

    #[test]
    fn output_counts_for_3x3_kernels() {
        let mut rng = seeded(5);
        let x = Tensor::randn(&[1, 4, 4], 1.0, &mut rng);
        let dns = cfg(Variant::Dns, NormMode::Both);
        let uns = cfg(Variant::Uns, NormMode::Both);
        assert_eq!(dns.output_dim(), 9);
        assert_eq!(uns.output_dim(), 81);
        let p = SpherePredictor::new(dns, Tensor::randn(&[4, 1, 3, 3], 1.0, &mut rng), Tensor::randn(&[9, 4], 1.0, &mut rng)).unwrap();
        let (raw, m) = p.predict(&x).unwrap();
        assert_eq!(raw.len(), 9);
        assert_eq!(m.kind(), SimilarityKind::Diagonal);
        let p = SpherePredictor::new(uns, Tensor::randn(&[4, 1, 3, 3], 1.0, &mut rng), Tensor::randn(&[81, 4], 1.0, &mut rng)).unwrap();
        let (raw, m) = p.predict(&x).unwrap();
        assert_eq!(raw.len(), 81);
        assert_eq!(m.kind(), SimilarityKind::Unconstrained);
        assert!(matches!(
            SpherePredictor::new(dns, Tensor::zeros(&[4, 1, 3, 3]), Tensor::zeros(&[10, 4])),
            Err(Error::Configuration(_))
        ));
    }

    #[test]
    fn both_mode_outputs_are_bounded() {
        let mut rng = seeded(6);
        for _ in 0..20 {
            let x = Tensor::randn(&[3, 6, 6], 10.0, &mut rng);
            let c = cfg(Variant::Uns, NormMode::Both);
            let p = SpherePredictor::new(c, Tensor::randn(&[5, 3, 3, 3], 3.0, &mut rng), Tensor::randn(&[81, 5], 3.0, &mut rng)).unwrap();
            let (raw, _) = p.predict(&x).unwrap();
            assert!(raw.data().iter().all(|v| v.abs() <= 1.0 + 1e-9));
        }
    }

    #[test]
    fn adapters_shared_by_shape() {
        let mut reg = AdapterRegistry::new();
        let a = reg.register([8, 8, 8], 4);
        let b = reg.register([8, 8, 8], 4);
        let c = reg.register([8, 4, 4], 4);
        assert!(Arc::ptr_eq(&a, &b));
        assert!(!Arc::ptr_eq(&a, &c));
        assert!(Arc::ptr_eq(&reg.get([8, 8, 8]).unwrap(), &a));
        assert!(matches!(reg.get([3, 8, 8]), Err(Error::Configuration(_))));

        let id = reg.register([4, 3, 3], 4);
        assert!(id.is_identity());
        let mut rng = seeded(1);
        let x = Tensor::randn(&[4, 3, 3], 1.0, &mut rng);
        assert_eq!(adapt_input(&id, None, &x).unwrap(), x);

        let w = Tensor::randn(&[4, 8], 1.0, &mut rng);
        let big = adapt_input(&a, Some(&w), &Tensor::randn(&[8, 8, 8], 1.0, &mut rng)).unwrap();
        let small = adapt_input(&c, Some(&w), &Tensor::randn(&[8, 4, 4], 1.0, &mut rng)).unwrap();
        assert_eq!(big.shape()[0], small.shape()[0]);
        let pc = PredictorConfig { variant: Variant::Dns, norm: NormMode::Both, kernel: 3, per_patch: false, identity_residual: true };
        let p = SpherePredictor::new(pc, Tensor::randn(&[6, 4, 3, 3], 1.0, &mut rng), Tensor::randn(&[9, 6], 1.0, &mut rng)).unwrap();
        assert_eq!(p.predict(&big).unwrap().0.len(), 9);
        assert_eq!(p.predict(&small).unwrap().0.len(), 9);
    }
}
