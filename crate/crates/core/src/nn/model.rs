//! Networks assembled from a [`NetworkSpec`]: parameter layout, forward
//! pass, folding and plain twins.

use std::sync::Arc;

use indexmap::IndexMap;
use rand::Rng;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::nn::layers::{self, batch_norm, conv2d, conv_columns, conv_from_columns, linear, max_pool, Mode};
use crate::nn::params::{Bindings, ParamStore};
use crate::nn::predictor::{predict_nodes, Adapter, AdapterRegistry, PredictorConfig, SpherePredictor};
use crate::nn::spec::{Dim, LayerSpec, NetworkSpec, PredictorSpec, SimilaritySpec, Wiring};
use crate::similarity::{
    apply_similarity_nodes, cholesky_block, masked_block, SimilarityKind, SimilarityMatrix, SimilarityNodes,
    ShapeShadow, DEFAULT_ALPHA, DEFAULT_SHADOW_INIT,
};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    /// Gaussian with `std = sqrt(2 / fan_in)`.
    He(usize),
    /// Gaussian with `std = sqrt(1 / fan_in)`.
    Lecun(usize),
    Zeros,
    Ones,
    Eye,
    Shadow,
}

#[derive(Clone, Debug)]
struct Slot {
    shape: Vec<usize>,
    init: Init,
}

#[derive(Clone, Debug, Default)]
struct Layout {
    params: IndexMap<String, Slot>,
    buffers: IndexMap<String, Slot>,
    adapters: AdapterRegistry,
}

pub fn sim_param_name(layer: usize, kind: SimilarityKind) -> Option<String> {
    let suffix = match kind {
        SimilarityKind::Identity => return None,
        SimilarityKind::Diagonal => "diag",
        SimilarityKind::Unconstrained => "matrix",
        SimilarityKind::BlockDiagonalShared => "block",
        SimilarityKind::CholeskyPsd => "chol",
        SimilarityKind::ShapeMasked => "r",
    };
    Some(format!("l{layer}.sim.{suffix}"))
}

pub fn shadow_name(layer: usize) -> String {
    format!("l{layer}.sim.shadow")
}

pub fn mask_name(layer: usize) -> String {
    format!("l{layer}.sim.mask")
}

fn predictor_names(layer: usize, wiring: Wiring) -> (String, String) {
    match wiring {
        Wiring::Disjoint => (format!("l{layer}.pred.hidden"), format!("l{layer}.pred.out")),
        Wiring::Shared => ("pred.hidden".into(), "pred.out".into()),
    }
}

fn layout(spec: &NetworkSpec) -> Result<(Layout, Vec<Dim>)> {
    let dims = spec.shapes()?;
    let mut l = Layout::default();
    let add = |map: &mut IndexMap<String, Slot>, name: String, shape: Vec<usize>, init: Init| {
        map.entry(name).or_insert(Slot { shape, init });
    };
    for (i, layer) in spec.layers.iter().enumerate() {
        let dim = dims[i];
        match layer {
            LayerSpec::Conv { out_channels, kernel, bias, .. } | LayerSpec::NsConv { out_channels, kernel, bias, .. } => {
                let Dim::Map([c, h, w]) = dim else { unreachable!("validated by shapes()") };
                let (k, hv) = (*kernel, kernel * kernel);
                add(&mut l.params, format!("l{i}.weight"), vec![*out_channels, c, k, k], Init::He(c * hv));
                if *bias {
                    add(&mut l.params, format!("l{i}.bias"), vec![*out_channels], Init::Zeros);
                }
                match layer {
                    LayerSpec::NsConv { similarity: SimilaritySpec::Static { kind }, .. } => {
                        if let Some(name) = sim_param_name(i, *kind) {
                            let (shape, init) = match kind {
                                SimilarityKind::Diagonal => (vec![hv], Init::Ones),
                                SimilarityKind::Unconstrained => (vec![c * hv, c * hv], Init::Eye),
                                _ => (vec![hv, hv], Init::Eye),
                            };
                            add(&mut l.params, name, shape, init);
                        }
                        if *kind == SimilarityKind::ShapeMasked {
                            add(&mut l.buffers, shadow_name(i), vec![hv], Init::Shadow);
                        }
                    }
                    LayerSpec::NsConv { similarity: SimilaritySpec::Dynamic { predictor: p }, .. } => {
                        let hid = p.hidden_width();
                        let (hn, on) = predictor_names(i, p.wiring);
                        let cin = match p.wiring {
                            Wiring::Disjoint => c,
                            Wiring::Shared => {
                                let a = l.adapters.register([c, h, w], spec.adapter_channels);
                                if let Some(name) = &a.weight {
                                    add(&mut l.params, name.clone(), vec![spec.adapter_channels, c], Init::Lecun(c));
                                }
                                spec.adapter_channels
                            }
                        };
                        add(&mut l.params, hn, vec![hid, cin, k, k], Init::He(cin * hv));
                        add(&mut l.params, on, vec![p.output_dim(hv), hid], Init::Lecun(hid));
                    }
                    _ => {}
                }
            }
            LayerSpec::BatchNorm {} => {
                let c = match dim {
                    Dim::Map([c, _, _]) => c,
                    Dim::Flat(f) => f,
                };
                add(&mut l.params, format!("l{i}.gamma"), vec![c], Init::Ones);
                add(&mut l.params, format!("l{i}.beta"), vec![c], Init::Zeros);
                add(&mut l.buffers, format!("l{i}.running_mean"), vec![c], Init::Zeros);
                add(&mut l.buffers, format!("l{i}.running_var"), vec![c], Init::Ones);
            }
            LayerSpec::Fc { out } => {
                let f = dim.numel();
                add(&mut l.params, format!("l{i}.weight"), vec![*out, f], Init::He(f));
                add(&mut l.params, format!("l{i}.bias"), vec![*out], Init::Zeros);
            }
            LayerSpec::Classifier { classes } => {
                let f = dim.numel();
                add(&mut l.params, "head.weight".into(), vec![*classes, f], Init::Lecun(f));
                add(&mut l.params, "head.bias".into(), vec![*classes], Init::Zeros);
            }
            LayerSpec::Relu {} | LayerSpec::MaxPool { .. } => {}
        }
    }
    Ok((l, dims))
}

fn materialize<R: Rng + ?Sized>(slot: &Slot, rng: &mut R) -> Tensor {
    match slot.init {
        Init::He(fan) => Tensor::randn(&slot.shape, (2.0 / fan as f64).sqrt(), rng),
        Init::Lecun(fan) => Tensor::randn(&slot.shape, (1.0 / fan as f64).sqrt(), rng),
        Init::Zeros => Tensor::zeros(&slot.shape),
        Init::Ones => Tensor::ones(&slot.shape),
        Init::Eye => Tensor::eye(slot.shape[0]),
        Init::Shadow => Tensor::full(&slot.shape, DEFAULT_SHADOW_INIT),
    }
}

/// Per-layer outputs of one forward pass besides the logits.
#[derive(Clone, Debug)]
pub struct Forward {
    pub logits: NodeId,
    /// `(layer, batch mean, batch variance)` of every batch-norm layer in
    /// training mode.
    pub batch_stats: Vec<(usize, Tensor, Tensor)>,
    /// `(layer, raw predictor output)` of every dynamic layer.
    pub predictions: Vec<(usize, NodeId)>,
}

/// A network and its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    spec: NetworkSpec,
    pub params: ParamStore,
    adapters: AdapterRegistry,
    dims: Vec<Dim>,
}

impl PartialEq for Model {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.params == other.params
    }
}

impl Model {
    /// Fresh parameters: fan-in scaled Gaussian weights, zero biases,
    /// identity similarities, full kernel shapes.
    pub fn init<R: Rng + ?Sized>(spec: NetworkSpec, rng: &mut R) -> Result<Model> {
        let (l, dims) = layout(&spec)?;
        let mut params = ParamStore::new();
        for (name, slot) in &l.params {
            params.insert(name.clone(), materialize(slot, rng));
        }
        for (name, slot) in &l.buffers {
            params.insert_buffer(name.clone(), materialize(slot, rng));
        }
        Ok(Model { spec, params, adapters: l.adapters, dims })
    }

    /// Every parameter set to zero (buffers at their defaults).
    pub fn zeros(spec: NetworkSpec) -> Result<Model> {
        let mut m = Model::init(spec, &mut crate::rng::seeded(0))?;
        for (_, p) in m.params.iter_mut() {
            *p = Tensor::zeros(p.shape());
        }
        Ok(m)
    }

    /// Attach existing parameters to `spec`. Names and shapes must match the
    /// spec's layout exactly; nothing is modified on failure.
    pub fn from_params(spec: NetworkSpec, params: ParamStore) -> Result<Model> {
        let (l, dims) = layout(&spec)?;
        let check = |what: &str, want: &IndexMap<String, Slot>, have: Vec<(&str, &Tensor)>| -> Result<()> {
            if have.len() != want.len() {
                return Err(Error::Configuration(format!(
                    "{what} count {} does not match the network's {}",
                    have.len(),
                    want.len()
                )));
            }
            for (name, t) in have {
                match want.get(name) {
                    None => return Err(Error::Configuration(format!("unexpected {what} {name}"))),
                    Some(s) if s.shape != t.shape() => {
                        return Err(Error::Configuration(format!(
                            "{what} {name} has shape {:?}, network expects {:?}",
                            t.shape(),
                            s.shape
                        )))
                    }
                    _ => {}
                }
            }
            Ok(())
        };
        check("parameter", &l.params, params.iter().collect())?;
        check("buffer", &l.buffers, params.buffers().collect())?;
        Ok(Model { spec, params, adapters: l.adapters, dims })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    /// Per-sample shape entering each layer, then the output.
    pub fn dims(&self) -> &[Dim] {
        &self.dims
    }

    pub fn adapters(&self) -> &AdapterRegistry {
        &self.adapters
    }

    /// The adapter serving the shared predictor at `layer`.
    pub fn adapter_for(&self, layer: usize) -> Result<Arc<Adapter>> {
        match self.dims.get(layer) {
            Some(Dim::Map(s)) => self.adapters.get(*s),
            _ => Err(Error::Configuration(format!("layer {layer} has no feature-map input"))),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    /// Bind parameters into `g`. With `learn_shape`, kernel-shape masks are
    /// bound as trainable leaves so their gradients can drive the shadows.
    pub fn bind(&self, g: &mut Graph, trainable: &dyn Fn(&str) -> bool, learn_shape: bool) -> Result<Bindings> {
        let mut b = self.params.bind(g, trainable);
        for (i, layer) in self.spec.layers.iter().enumerate() {
            if let LayerSpec::NsConv { similarity: SimilaritySpec::Static { kind: SimilarityKind::ShapeMasked }, .. } = layer {
                let mask = Tensor::from_vec(self.shadow(i)?.mask());
                let id = if learn_shape { g.param(mask) } else { g.constant(mask) };
                b.set_mask(mask_name(i), id);
            }
        }
        Ok(b)
    }

    /// Bind everything as constants.
    pub fn bind_constants(&self, g: &mut Graph) -> Result<Bindings> {
        self.bind(g, &|_| false, false)
    }

    fn layer_kernel(&self, layer: usize) -> Result<(usize, usize)> {
        match self.spec.layers.get(layer) {
            Some(LayerSpec::NsConv { kernel, .. }) | Some(LayerSpec::Conv { kernel, .. }) => match self.dims[layer] {
                Dim::Map([c, _, _]) => Ok((c, kernel * kernel)),
                Dim::Flat(_) => Err(Error::Configuration(format!("layer {layer} has no feature-map input"))),
            },
            _ => Err(Error::Configuration(format!("layer {layer} is not a convolution"))),
        }
    }

    fn static_kind(&self, layer: usize) -> Result<SimilarityKind> {
        match self.spec.layers.get(layer) {
            Some(LayerSpec::NsConv { similarity: SimilaritySpec::Static { kind }, .. }) => Ok(*kind),
            _ => Err(Error::Configuration(format!("layer {layer} has no static similarity"))),
        }
    }

    /// Layers carrying a static similarity.
    pub fn static_layers(&self) -> Vec<usize> {
        (0..self.spec.layers.len()).filter(|&i| self.static_kind(i).is_ok()).collect()
    }

    /// Layers carrying a dynamic similarity.
    pub fn dynamic_layers(&self) -> Vec<usize> {
        self.spec
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerSpec::NsConv { similarity: SimilaritySpec::Dynamic { .. }, .. }))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn shadow(&self, layer: usize) -> Result<ShapeShadow> {
        let d_r = self.params.buffer(&shadow_name(layer))?;
        Ok(ShapeShadow::new(d_r.data().to_vec(), DEFAULT_ALPHA))
    }

    pub fn set_shadow(&mut self, layer: usize, shadow: &ShapeShadow) -> Result<()> {
        let b = self.params.buffer_mut(&shadow_name(layer))?;
        if b.len() != shadow.len() {
            return Err(Error::Shape(format!("shadow length {} for a {}-tap kernel", shadow.len(), b.len())));
        }
        b.data_mut().copy_from_slice(&shadow.d_r);
        Ok(())
    }

    /// The static similarity of `layer` as a [`SimilarityMatrix`].
    pub fn similarity(&self, layer: usize) -> Result<SimilarityMatrix> {
        let kind = self.static_kind(layer)?;
        let (c, hv) = self.layer_kernel(layer)?;
        let stored = || self.params.get(&sim_param_name(layer, kind).expect("non-identity kind"));
        match kind {
            SimilarityKind::Identity => Ok(SimilarityMatrix::identity(c, hv)),
            SimilarityKind::Diagonal => Ok(SimilarityMatrix::diagonal(c, stored()?.data().to_vec())),
            SimilarityKind::Unconstrained => SimilarityMatrix::unconstrained(c, hv, stored()?.clone()),
            SimilarityKind::BlockDiagonalShared => SimilarityMatrix::block_shared(c, stored()?.clone()),
            SimilarityKind::CholeskyPsd => {
                let mut l = stored()?.clone();
                for i in 0..hv {
                    for j in i + 1..hv {
                        l.set(&[i, j], 0.0);
                    }
                }
                SimilarityMatrix::psd_block(c, l)
            }
            SimilarityKind::ShapeMasked => SimilarityMatrix::from_shadow(c, &self.shadow(layer)?, stored()?.clone()),
        }
    }

    fn predictor_spec(&self, layer: usize) -> Result<&PredictorSpec> {
        match self.spec.layers.get(layer) {
            Some(LayerSpec::NsConv { similarity: SimilaritySpec::Dynamic { predictor: p }, .. }) => Ok(p),
            _ => Err(Error::Configuration(format!("layer {layer} has no dynamic similarity"))),
        }
    }

    fn predictor_config(&self, layer: usize) -> Result<PredictorConfig> {
        let p = self.predictor_spec(layer)?;
        let LayerSpec::NsConv { kernel, .. } = &self.spec.layers[layer] else { unreachable!() };
        Ok(PredictorConfig {
            variant: p.variant,
            norm: p.norm,
            kernel: *kernel,
            per_patch: p.per_patch,
            identity_residual: p.identity_residual,
        })
    }

    /// The predictor of a dynamic layer, with its current parameters.
    pub fn predictor(&self, layer: usize) -> Result<SpherePredictor> {
        let p = self.predictor_spec(layer)?;
        let (hn, on) = predictor_names(layer, p.wiring);
        SpherePredictor::new(self.predictor_config(layer)?, self.params.get(&hn)?.clone(), self.params.get(&on)?.clone())
    }

    /// The similarity predicted at `layer` for one sample whose input to that
    /// layer is `x` (`C×H×W`).
    pub fn predict_similarity(&self, layer: usize, x: &Tensor) -> Result<SimilarityMatrix> {
        let p = self.predictor_spec(layer)?;
        let input = match p.wiring {
            Wiring::Disjoint => x.clone(),
            Wiring::Shared => {
                let a = self.adapter_for(layer)?;
                let w = match &a.weight {
                    Some(n) => Some(self.params.get(n)?),
                    None => None,
                };
                crate::nn::predictor::adapt_input(&a, w, x)?
            }
        };
        let (_, m) = self.predictor(layer)?.predict(&input)?;
        let (c, _) = self.layer_kernel(layer)?;
        if c == m.channels() {
            return Ok(m);
        }
        match m.kind() {
            SimilarityKind::Diagonal => Ok(SimilarityMatrix::diagonal(c, m.stored().to_vec())),
            _ => SimilarityMatrix::block_shared(c, m.block().or_else(|_| m.dense())?),
        }
    }

    fn static_nodes(&self, g: &mut Graph, b: &Bindings, layer: usize, kind: SimilarityKind) -> Result<SimilarityNodes> {
        let name = sim_param_name(layer, kind);
        Ok(match kind {
            SimilarityKind::Identity => SimilarityNodes::Identity,
            SimilarityKind::Diagonal => SimilarityNodes::Diagonal(b.get(name.as_deref().unwrap())?),
            SimilarityKind::Unconstrained => SimilarityNodes::Dense(b.get(name.as_deref().unwrap())?),
            SimilarityKind::BlockDiagonalShared => SimilarityNodes::Block(b.get(name.as_deref().unwrap())?),
            SimilarityKind::CholeskyPsd => SimilarityNodes::Block(cholesky_block(g, b.get(name.as_deref().unwrap())?)?),
            SimilarityKind::ShapeMasked => {
                let mask = match b.mask(&mask_name(layer)) {
                    Some(m) => m,
                    None => g.constant(Tensor::from_vec(self.shadow(layer)?.mask())),
                };
                SimilarityNodes::Block(masked_block(g, mask, b.get(name.as_deref().unwrap())?)?)
            }
        })
    }

    /// Run the network on `x: [B, C, H, W]`.
    pub fn forward(&self, g: &mut Graph, b: &Bindings, x: NodeId, mode: Mode) -> Result<Forward> {
        let xs = g.shape(x).to_vec();
        if xs.len() != 4 || xs[1..] != self.spec.input {
            return Err(Error::Shape(format!(
                "network expects batches of {:?}, got {xs:?}",
                self.spec.input
            )));
        }
        let mut h = x;
        let mut batch_stats = Vec::new();
        let mut predictions = Vec::new();
        let opt = |name: String| b.try_get(&name);
        for (i, layer) in self.spec.layers.iter().enumerate() {
            h = match layer {
                LayerSpec::Conv { stride, pad, .. } => {
                    conv2d(g, h, b.get(&format!("l{i}.weight"))?, opt(format!("l{i}.bias")), *stride, *pad, None)?
                }
                LayerSpec::NsConv { stride, pad, kernel, similarity, .. } => {
                    let w = b.get(&format!("l{i}.weight"))?;
                    let bias = opt(format!("l{i}.bias"));
                    match similarity {
                        SimilaritySpec::Static { kind } => {
                            let s = self.static_nodes(g, b, i, *kind)?;
                            conv2d(g, h, w, bias, *stride, *pad, Some(s))?
                        }
                        SimilaritySpec::Dynamic { predictor: p } => {
                            let (cols, geom) = conv_columns(g, h, *kernel, *stride, *pad)?;
                            let input = match p.wiring {
                                Wiring::Disjoint => h,
                                Wiring::Shared => {
                                    let a = self.adapter_for(i)?;
                                    let aw = match &a.weight {
                                        Some(n) => Some(b.get(n)?),
                                        None => None,
                                    };
                                    a.forward(g, aw, h)?
                                }
                            };
                            let (hn, on) = predictor_names(i, p.wiring);
                            let cfg = self.predictor_config(i)?;
                            let pred = predict_nodes(g, &cfg, b.get(&hn)?, b.get(&on)?, input, &geom)?;
                            predictions.push((i, pred.raw));
                            let cols = apply_similarity_nodes(g, cols, pred.similarity, geom.channels, kernel * kernel, geom.batch)?;
                            conv_from_columns(g, cols, &geom, w, bias)?
                        }
                    }
                }
                LayerSpec::BatchNorm {} => {
                    let rm = self.params.buffer(&format!("l{i}.running_mean"))?;
                    let rv = self.params.buffer(&format!("l{i}.running_var"))?;
                    let (y, stats) = batch_norm(
                        g,
                        h,
                        b.get(&format!("l{i}.gamma"))?,
                        b.get(&format!("l{i}.beta"))?,
                        mode,
                        (rm, rv),
                    )?;
                    if let Some((m, v)) = stats {
                        batch_stats.push((i, m, v));
                    }
                    y
                }
                LayerSpec::Relu {} => g.relu(h)?,
                LayerSpec::MaxPool { size, stride } => max_pool(g, h, *size, *stride)?,
                LayerSpec::Fc { .. } => {
                    let f = layers::flatten(g, h)?;
                    linear(g, f, b.get(&format!("l{i}.weight"))?, opt(format!("l{i}.bias")))?
                }
                LayerSpec::Classifier { .. } => {
                    let f = layers::flatten(g, h)?;
                    linear(g, f, b.get("head.weight")?, opt("head.bias".into()))?
                }
            };
        }
        Ok(Forward { logits: h, batch_stats, predictions })
    }

    /// Logits for a batch with every parameter held constant.
    pub fn logits(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.bind_constants(&mut g)?;
        let xn = g.constant(x.clone());
        let f = self.forward(&mut g, &b, xn, mode)?;
        Ok(g.value(f.logits).clone())
    }

    /// Fold batch statistics into the running averages.
    pub fn update_running_stats(&mut self, stats: &[(usize, Tensor, Tensor)]) -> Result<()> {
        for (i, m, v) in stats {
            let rm = self.params.buffer_mut(&format!("l{i}.running_mean"))?;
            *rm = rm.scale(layers::BN_MOMENTUM).axpy(1.0 - layers::BN_MOMENTUM, m)?;
            let rv = self.params.buffer_mut(&format!("l{i}.running_var"))?;
            *rv = rv.scale(layers::BN_MOMENTUM).axpy(1.0 - layers::BN_MOMENTUM, v)?;
        }
        Ok(())
    }

    /// Keep Cholesky factors canonical: upper triangle zero, diagonal ≥ 0.
    pub fn project_constraints(&mut self) {
        for (name, p) in self.params.iter_mut() {
            if name.ends_with(".sim.chol") {
                let n = p.shape()[0];
                for i in 0..n {
                    for j in i + 1..n {
                        p.set(&[i, j], 0.0);
                    }
                    let d = p.at(&[i, i]);
                    if d < 0.0 {
                        p.set(&[i, i], 0.0);
                    }
                }
            }
        }
    }

    /// The plain-convolution network with this model's backbone weights;
    /// similarity parameters are dropped.
    pub fn plain_twin(&self) -> Result<Model> {
        self.to_plain(false)
    }

    /// Replace every static similarity by its folded kernels `Mᵀw`, giving a
    /// plain-convolution network with the same outputs.
    pub fn fold(&self) -> Result<Model> {
        self.to_plain(true)
    }

    fn to_plain(&self, fold: bool) -> Result<Model> {
        if fold {
            if let Some(i) = self.dynamic_layers().first() {
                return Err(Error::Configuration(format!(
                    "layer {i} has a dynamic similarity, which cannot be folded"
                )));
            }
        }
        let spec = self.spec.plain_twin();
        let (l, _) = layout(&spec)?;
        let mut params = ParamStore::new();
        for name in l.params.keys() {
            params.insert(name.clone(), self.params.get(name)?.clone());
        }
        for name in l.buffers.keys() {
            params.insert_buffer(name.clone(), self.params.buffer(name)?.clone());
        }
        if fold {
            for i in self.static_layers() {
                let m = self.similarity(i)?;
                let w = params.get_mut(&format!("l{i}.weight"))?;
                let k = w.shape()[0];
                let flat = w.reshape(&[k, m.dim()])?;
                *w = m.fold_kernels(&flat)?.into_reshape(w.shape())?;
            }
        }
        Model::from_params(spec, params)
    }
}

/// `Wᵀ W′ · XᵀX`: one neuron whose similarity is predicted as `W′Xᵀ`.
pub fn quadratic_toy_forward(wp: &Tensor, w: &Tensor, x: &Tensor) -> Result<f64> {
    Ok(w.dot(wp)? * x.dot(x)?)
}
