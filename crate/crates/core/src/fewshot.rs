//! N-way K-shot episodes and three ways of adapting to them: finetuning a
//! static similarity with the classifier, retraining only the classifier of
//! a dynamic network, and meta-learning the initial similarity.

use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{Bindings, LayerSpec, Mode, Model, ParamGroup, ParamStore};
use crate::rng::substream;
use crate::tensor::Tensor;
use crate::train::{cross_entropy_nodes, evaluate, train, Optimizer, OptimizerConfig, TrainConfig};

/// One task: `ways` classes relabeled to `0..ways`, with disjoint support
/// and query samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub support: Dataset,
    pub query: Dataset,
    /// Original class of each new label.
    pub classes: Vec<usize>,
    pub support_indices: Vec<usize>,
    pub query_indices: Vec<usize>,
}

/// Draw `n` classes uniformly without replacement among those with at least
/// `k + q` samples, then `k + q` samples of each without replacement; the
/// first `k` go to the support set.
pub fn sample_episode<R: Rng + ?Sized>(data: &Dataset, n: usize, k: usize, q: usize, rng: &mut R) -> Result<Episode> {
    if n == 0 || k == 0 || q == 0 {
        return Err(Error::Argument(format!("episode needs n, k, q ≥ 1, got {n}, {k}, {q}")));
    }
    let by_class = data.by_class();
    let eligible: Vec<usize> = (0..by_class.len()).filter(|&c| by_class[c].len() >= k + q).collect();
    if eligible.len() < n {
        return Err(Error::Argument(format!(
            "{n}-way episodes with {k}+{q} samples per class need {n} classes of that size, dataset has {}",
            eligible.len()
        )));
    }
    let classes: Vec<usize> = sample(rng, eligible.len(), n).into_iter().map(|i| eligible[i]).collect();
    let (mut si, mut qi) = (Vec::with_capacity(n * k), Vec::with_capacity(n * q));
    for &c in &classes {
        let pool = &by_class[c];
        let picked: Vec<usize> = sample(rng, pool.len(), k + q).into_iter().map(|i| pool[i]).collect();
        si.extend_from_slice(&picked[..k]);
        qi.extend_from_slice(&picked[k..]);
    }
    let relabel = |c: usize| classes.iter().position(|&x| x == c).expect("sampled class");
    Ok(Episode {
        support: data.subset(&si, Some((&relabel, n)))?,
        query: data.subset(&qi, Some((&relabel, n)))?,
        classes: classes.clone(),
        support_indices: si,
        query_indices: qi,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Static,
    Dynamic,
    Meta,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Static => "static",
            Strategy::Dynamic => "dynamic",
            Strategy::Meta => "meta",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "static" => Ok(Strategy::Static),
            "dynamic" => Ok(Strategy::Dynamic),
            "meta" => Ok(Strategy::Meta),
            _ => Err(Error::Argument(format!("unknown strategy {s:?} (static, dynamic, meta)"))),
        }
    }
}

fn d_epochs() -> usize {
    100
}
fn d_lr() -> f64 {
    0.01
}
fn d_mu() -> f64 {
    0.9
}
fn d_damp() -> f64 {
    0.9
}
fn d_wd() -> f64 {
    0.001
}

/// Finetuning on the support set: momentum SGD on full support batches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_mu")]
    pub momentum: f64,
    #[serde(default = "d_damp")]
    pub dampening: f64,
    #[serde(default = "d_wd")]
    pub weight_decay: f64,
    /// Let batch-norm statistics follow the support set.
    #[serde(default)]
    pub update_bn_stats: bool,
    #[serde(default)]
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

/// Result of adapting to one episode.
#[derive(Clone, Debug)]
pub struct Adapted {
    pub accuracy: f64,
    pub query_loss: f64,
    pub model: Model,
}

/// The model with a zero-initialized `ways`-class head.
pub fn with_fresh_head(model: &Model, ways: usize) -> Result<Model> {
    let mut spec = model.spec().clone();
    match spec.layers.last_mut() {
        Some(LayerSpec::Classifier { classes }) => *classes = ways,
        _ => return Err(Error::Configuration("network has no classifier head".into())),
    }
    let features = model.params.get("head.weight")?.shape()[1];
    let mut params = model.params.clone();
    params.insert("head.weight", Tensor::zeros(&[ways, features]));
    params.insert("head.bias", Tensor::zeros(&[ways]));
    Model::from_params(spec, params)
}

/// Mean query cross-entropy in evaluation mode.
pub fn query_loss(model: &Model, data: &Dataset) -> Result<f64> {
    let logits = model.logits(&data.images, Mode::Eval)?;
    crate::train::cross_entropy(&logits, &data.labels)
}

fn finetune(model: &Model, ep: &Episode, cfg: &FinetuneConfig, freeze: Vec<String>) -> Result<Adapted> {
    let mut m = with_fresh_head(model, ep.classes.len())?;
    let tc = TrainConfig {
        batch_size: ep.support.len(),
        epochs: cfg.epochs,
        lr: cfg.lr,
        milestones: Some(Vec::new()),
        optimizer: OptimizerConfig::Sgd { momentum: cfg.momentum, dampening: cfg.dampening, weight_decay: cfg.weight_decay },
        freeze,
        seed: cfg.seed,
        freeze_bn_stats: !cfg.update_bn_stats,
        ..TrainConfig::default()
    };
    train(&mut m, &ep.support, None, &tc)?;
    Ok(Adapted { accuracy: 1.0 - evaluate(&m, &ep.query)?, query_loss: query_loss(&m, &ep.query)?, model: m })
}

/// Reset the head, finetune only the static similarities and the head on
/// the support set, and score the query set.
pub fn static_fewshot(model: &Model, ep: &Episode, cfg: &FinetuneConfig) -> Result<Adapted> {
    if model.static_layers().is_empty() {
        return Err(Error::Configuration("static few-shot needs at least one static similarity layer".into()));
    }
    finetune(model, ep, cfg, vec!["@backbone".into(), "@predictor".into(), "@adapter".into()])
}

/// Reset the head and retrain only it; convolutions and predictors stay
/// fixed and similarities are still predicted per input.
pub fn dynamic_fewshot(model: &Model, ep: &Episode, cfg: &FinetuneConfig) -> Result<Adapted> {
    if model.dynamic_layers().is_empty() {
        return Err(Error::Configuration("dynamic few-shot needs at least one dynamic similarity layer".into()));
    }
    classifier_fewshot(model, ep, cfg)
}

/// Retrain only a fresh head on the support set.
pub fn classifier_fewshot(model: &Model, ep: &Episode, cfg: &FinetuneConfig) -> Result<Adapted> {
    finetune(model, ep, cfg, vec!["@backbone".into(), "@similarity".into(), "@predictor".into(), "@adapter".into()])
}

/// `p − η·∂loss/∂p` for each of `params`. With `create_graph` the step stays
/// differentiable in `p` (second order); otherwise the gradient enters as a
/// constant.
pub fn gradient_step_nodes(g: &mut Graph, loss: NodeId, params: &[NodeId], eta: f64, create_graph: bool) -> Result<Vec<NodeId>> {
    let grads = g.backward(loss, create_graph)?;
    params
        .iter()
        .map(|&p| match grads.get(p) {
            Some(gp) => {
                let s = g.scale(gp, eta)?;
                g.sub(p, s)
            }
            None => Ok(p),
        })
        .collect()
}

/// Names of the static similarity parameters of `model`.
pub fn similarity_names(model: &Model) -> Vec<String> {
    model.params.names().filter(|n| ParamGroup::of(n) == ParamGroup::Similarity).map(str::to_string).collect()
}

/// Support loss of the bound network (evaluation-mode batch norm).
pub fn support_loss(g: &mut Graph, model: &Model, b: &Bindings, data: &Dataset) -> Result<NodeId> {
    let x = g.constant(data.images.clone());
    let f = model.forward(g, b, x, Mode::Eval)?;
    cross_entropy_nodes(g, f.logits, &data.labels)
}

/// One inner step `M′ = M − η∇_M L_support(M)` on the parameters `names`
/// (the similarity matrices by default). The returned bindings carry the
/// stepped nodes; with `create_graph` they remain differentiable in `M`.
pub fn meta_inner_step(
    g: &mut Graph,
    model: &Model,
    b: &Bindings,
    support: &Dataset,
    eta: f64,
    names: &[String],
    create_graph: bool,
) -> Result<Bindings> {
    if !(eta >= 0.0) {
        return Err(Error::Argument(format!("inner step size must be non-negative, got {eta}")));
    }
    let loss = support_loss(g, model, b, support)?;
    let ids: Vec<NodeId> = names.iter().map(|n| b.get(n)).collect::<Result<_>>()?;
    let stepped = gradient_step_nodes(g, loss, &ids, eta, create_graph)?;
    let mut out = b.clone();
    for (n, id) in names.iter().zip(stepped) {
        out.set(n.clone(), id);
    }
    Ok(out)
}

fn d_outer() -> usize {
    100
}
fn d_outer_lr() -> f64 {
    1e-3
}
fn d_step() -> f64 {
    0.2
}
fn d_inner() -> usize {
    1
}
fn d_joint() -> usize {
    5
}
fn d_cls() -> usize {
    20
}
fn d_ways() -> usize {
    5
}
fn d_shots() -> usize {
    5
}
fn d_queries() -> usize {
    15
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaConfig {
    #[serde(default = "d_outer")]
    pub outer_steps: usize,
    #[serde(default = "d_outer_lr")]
    pub outer_lr: f64,
    /// Inner step size η (training) and adaptation step size (testing).
    #[serde(default = "d_step")]
    pub step_size: f64,
    /// Inner steps per episode during meta-training; each updates the
    /// similarities and the head jointly.
    #[serde(default = "d_inner")]
    pub inner_steps: usize,
    #[serde(default)]
    pub first_order: bool,
    /// Adaptation schedule at test time.
    #[serde(default = "d_joint")]
    pub joint_steps: usize,
    #[serde(default = "d_cls")]
    pub classifier_steps: usize,
    #[serde(default = "d_ways")]
    pub ways: usize,
    #[serde(default = "d_shots")]
    pub shots: usize,
    #[serde(default = "d_queries")]
    pub queries: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

/// Meta-learned initial similarities and head, with the adaptation schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaState {
    pub init: ParamStore,
    pub step_size: f64,
    pub joint_steps: usize,
    pub classifier_steps: usize,
}

impl MetaState {
    /// The model's current similarities (identity for a freshly initialized
    /// static network) and a zero head for `ways` classes.
    pub fn from_model(model: &Model, cfg: &MetaConfig) -> Result<MetaState> {
        let names = similarity_names(model);
        if model.static_layers().is_empty() || names.is_empty() {
            return Err(Error::Configuration("meta-learning needs learnable static similarity layers".into()));
        }
        let fresh = with_fresh_head(model, cfg.ways)?;
        let mut init = ParamStore::new();
        for n in names.iter().map(String::as_str).chain(["head.weight", "head.bias"]) {
            init.insert(n, fresh.params.get(n)?.clone());
        }
        Ok(MetaState { init, step_size: cfg.step_size, joint_steps: cfg.joint_steps, classifier_steps: cfg.classifier_steps })
    }

    /// `model` with this state's similarities and head.
    pub fn instantiate(&self, model: &Model) -> Result<Model> {
        let ways = self.init.get("head.weight")?.shape()[0];
        let mut m = with_fresh_head(model, ways)?;
        for (n, t) in self.init.iter() {
            let p = m.params.get_mut(n)?;
            if p.shape() != t.shape() {
                return Err(Error::Configuration(format!("meta state {n} has shape {:?}, model {:?}", t.shape(), p.shape())));
            }
            *p = t.clone();
        }
        Ok(m)
    }
}

/// Outer objective for one episode: query loss after `inner_steps` joint
/// steps from the state's initialization. Returns the loss and its gradient
/// for every entry of `state.init`.
pub fn meta_objective(
    model: &Model,
    state: &MetaState,
    ep: &Episode,
    inner_steps: usize,
    first_order: bool,
) -> Result<(f64, Vec<(String, Tensor)>)> {
    let m = state.instantiate(model)?;
    let names: Vec<String> = state.init.names().map(str::to_string).collect();
    let mut g = Graph::new();
    let b0 = m.bind(&mut g, &|n| state.init.contains(n), false)?;
    let mut b = b0.clone();
    for _ in 0..inner_steps {
        b = meta_inner_step(&mut g, &m, &b, &ep.support, state.step_size, &names, !first_order)?;
    }
    let loss = support_loss(&mut g, &m, &b, &ep.query)?;
    let lv = g.value(loss).item()?;
    let grads = g.backward(loss, false)?;
    let out = names
        .iter()
        .map(|n| {
            let id = b0.get(n)?;
            Ok((n.clone(), g.grad_value(&grads, id).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(id)))))
        })
        .collect::<Result<_>>()?;
    Ok((lv, out))
}

/// Learn the initialization with Adam over `cfg.outer_steps` episodes drawn
/// from `data`. Returns the state and the per-episode meta-loss.
pub fn meta_train(model: &Model, data: &Dataset, cfg: &MetaConfig) -> Result<(MetaState, Vec<f64>)> {
    let mut state = MetaState::from_model(model, cfg)?;
    let mut opt = Optimizer::new(OptimizerConfig::adam())?;
    let mut rng = substream(cfg.seed, 0x6d65_7461);
    let mut trace = Vec::with_capacity(cfg.outer_steps);
    for step in 0..cfg.outer_steps {
        let ep = sample_episode(data, cfg.ways, cfg.shots, cfg.queries, &mut rng)?;
        let (lv, grads) = match meta_objective(model, &state, &ep, cfg.inner_steps, cfg.first_order) {
            Ok(r) => r,
            Err(Error::Contract(m)) => return Err(Error::NonFiniteLoss { iteration: step, detail: format!("episode {step}: {m}") }),
            Err(e) => return Err(e),
        };
        if !lv.is_finite() || grads.iter().any(|(_, t)| !t.is_finite()) {
            return Err(Error::NonFiniteLoss { iteration: step, detail: format!("episode {step}: meta-loss {lv}") });
        }
        opt.step(&mut state.init, &grads, cfg.outer_lr)?;
        trace.push(lv);
    }
    Ok((state, trace))
}

/// Outcome of test-time adaptation, with the number of updates applied to
/// the similarities and to the head.
#[derive(Clone, Debug)]
pub struct MetaAdapted {
    pub adapted: Adapted,
    pub similarity_updates: usize,
    pub classifier_updates: usize,
}

/// Adapt from the meta-learned initialization: `joint_steps` plain gradient
/// steps on similarities and head, then `classifier_steps` on the head
/// alone, all at `step_size` on the full support set.
pub fn meta_test(model: &Model, state: &MetaState, ep: &Episode) -> Result<MetaAdapted> {
    let mut m = state.instantiate(model)?;
    let sims: Vec<String> = state.init.names().filter(|n| !n.starts_with("head.")).map(str::to_string).collect();
    let head = ["head.weight".to_string(), "head.bias".to_string()];
    let (mut su, mut cu) = (0, 0);
    let total = state.joint_steps + state.classifier_steps;
    for step in 0..total {
        let joint = step < state.joint_steps;
        let names: Vec<String> = if joint { sims.iter().chain(&head).cloned().collect() } else { head.to_vec() };
        let mut g = Graph::new();
        let b = m.bind(&mut g, &|n| names.iter().any(|x| x == n), false)?;
        let loss = support_loss(&mut g, &m, &b, &ep.support)?;
        let grads = g.backward(loss, false)?;
        for n in &names {
            let id = b.get(n)?;
            if let Some(gv) = g.grad_value(&grads, id) {
                let p = m.params.get_mut(n)?;
                *p = p.axpy(-state.step_size, gv)?;
            }
        }
        m.project_constraints();
        if joint {
            su += 1;
        }
        cu += 1;
    }
    let accuracy = 1.0 - evaluate(&m, &ep.query)?;
    let ql = query_loss(&m, &ep.query)?;
    Ok(MetaAdapted {
        adapted: Adapted { accuracy, query_loss: ql, model: m },
        similarity_updates: su,
        classifier_updates: cu,
    })
}

/// Accuracy of one episode under one strategy.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeResult {
    pub episode: usize,
    pub strategy: Strategy,
    pub accuracy: f64,
}

pub const EPISODE_CSV_HEADER: &str = "episode_id,strategy,accuracy";

pub fn episodes_csv(results: &[EpisodeResult]) -> String {
    let mut s = format!("{EPISODE_CSV_HEADER}\n");
    for r in results {
        let _ = writeln!(s, "{},{},{}", r.episode, r.strategy.name(), r.accuracy);
    }
    s
}

/// Mean and half-width of the normal 95% confidence interval.
pub fn mean_ci95(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * (var / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, SynthSpec};
    use crate::gradcheck::finite_diff_check;
    use crate::nn::{NetworkSpec, PredictorSpec, SimilaritySpec, Variant};
    use crate::rng::seeded;
    use crate::similarity::SimilarityKind;
    use std::collections::HashSet;

    fn data() -> Dataset {
        synth_dataset(&SynthSpec { classes: 6, per_class: 8, channels: 1, size: 6, noise: 0.1, jitter: 0.2 }, 1).unwrap()
    }

    fn net(sim: SimilaritySpec) -> NetworkSpec {
        NetworkSpec::new(
            [1, 6, 6],
            vec![
                LayerSpec::NsConv { out_channels: 3, kernel: 3, stride: 1, pad: 1, bias: true, similarity: sim },
                LayerSpec::BatchNorm {},
                LayerSpec::Relu {},
                LayerSpec::MaxPool { size: 2, stride: 2 },
                LayerSpec::Classifier { classes: 6 },
            ],
        )
    }

    fn static_net(kind: SimilarityKind) -> Model {
        Model::init(net(SimilaritySpec::Static { kind }), &mut seeded(4)).unwrap()
    }

    #[test]
    fn episodes_have_the_right_sizes_and_are_disjoint() {
        let d = data();
        let mut rng = seeded(3);
        for _ in 0..200 {
            let e = sample_episode(&d, 3, 2, 4, &mut rng).unwrap();
            assert_eq!((e.support.len(), e.query.len()), (6, 12));
            let s: HashSet<_> = e.support_indices.iter().collect();
            assert!(e.query_indices.iter().all(|i| !s.contains(i)));
            for c in 0..3 {
                assert_eq!(e.support.labels.iter().filter(|&&l| l == c).count(), 2);
                assert_eq!(e.query.labels.iter().filter(|&&l| l == c).count(), 4);
            }
        }
        let a = sample_episode(&d, 3, 2, 4, &mut seeded(9)).unwrap();
        let b = sample_episode(&d, 3, 2, 4, &mut seeded(9)).unwrap();
        assert_eq!(a, b);
        let full = sample_episode(&d, 6, 3, 5, &mut rng).unwrap();
        let mut all: Vec<usize> = full.support_indices.iter().chain(&full.query_indices).copied().collect();
        all.sort();
        assert_eq!(all, (0..48).collect::<Vec<_>>());
        assert!(matches!(sample_episode(&d, 7, 1, 1, &mut rng), Err(Error::Argument(_))));
        assert!(matches!(sample_episode(&d, 2, 5, 5, &mut rng), Err(Error::Argument(_))));
    }

    #[test]
    fn untuned_head_is_chance_level() {
        let d = data();
        let m = static_net(SimilarityKind::Diagonal);
        let ep = sample_episode(&d, 3, 2, 4, &mut seeded(1)).unwrap();
        let r = static_fewshot(&m, &ep, &FinetuneConfig { epochs: 0, ..FinetuneConfig::default() }).unwrap();
        assert!((r.accuracy - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn static_finetune_keeps_backbone_and_fits_support() {
        let d = data();
        let m = static_net(SimilarityKind::Unconstrained);
        let ep = sample_episode(&d, 3, 4, 4, &mut seeded(2)).unwrap();
        let same = Episode { query: ep.support.clone(), ..ep.clone() };
        let r = static_fewshot(&m, &same, &FinetuneConfig { epochs: 30, lr: 0.1, ..FinetuneConfig::default() }).unwrap();
        let r0 = static_fewshot(&m, &same, &FinetuneConfig { epochs: 0, ..FinetuneConfig::default() }).unwrap();
        assert!(r.accuracy >= r0.accuracy);
        for (n, t) in m.params.iter() {
            if ParamGroup::of(n) == ParamGroup::Backbone {
                assert_eq!(t, r.model.params.get(n).unwrap(), "{n}");
            }
        }
        assert_ne!(m.params.get("l0.sim.matrix").unwrap(), r.model.params.get("l0.sim.matrix").unwrap());
        for (n, t) in m.params.buffers() {
            assert_eq!(t, r.model.params.buffer(n).unwrap());
        }
        let dyn_m = Model::init(net(SimilaritySpec::Dynamic { predictor: PredictorSpec::new(Variant::Dns) }), &mut seeded(1)).unwrap();
        assert!(matches!(static_fewshot(&dyn_m, &ep, &FinetuneConfig::default()), Err(Error::Configuration(_))));
        assert!(matches!(dynamic_fewshot(&m, &ep, &FinetuneConfig::default()), Err(Error::Configuration(_))));
    }

    #[test]
    fn dynamic_finetune_touches_only_the_head_and_zero_theta_is_identity() {
        let d = data();
        let ep = sample_episode(&d, 3, 2, 3, &mut seeded(5)).unwrap();
        let mut dm = Model::init(net(SimilaritySpec::Dynamic { predictor: PredictorSpec::new(Variant::Dns) }), &mut seeded(6)).unwrap();
        let cfg = FinetuneConfig { epochs: 5, ..FinetuneConfig::default() };
        let r = dynamic_fewshot(&dm, &ep, &cfg).unwrap();
        for (n, t) in dm.params.iter() {
            if !n.starts_with("head.") {
                assert_eq!(t, r.model.params.get(n).unwrap(), "{n}");
            }
        }
        for n in ["l0.pred.hidden", "l0.pred.out"] {
            *dm.params.get_mut(n).unwrap() = Tensor::zeros(dm.params.get(n).unwrap().shape());
        }
        let sm = Model::from_params(dm.spec().with_similarity(&SimilaritySpec::Static { kind: SimilarityKind::Identity }), {
            let mut p = ParamStore::new();
            for (n, t) in dm.params.iter().filter(|(n, _)| !n.contains(".pred.")) {
                p.insert(n, t.clone());
            }
            for (n, t) in dm.params.buffers() {
                p.insert_buffer(n, t.clone());
            }
            p
        })
        .unwrap();
        let a = dynamic_fewshot(&dm, &ep, &cfg).unwrap();
        let b = classifier_fewshot(&sm, &ep, &cfg).unwrap();
        assert_eq!(a.accuracy, b.accuracy);
        assert!((a.query_loss - b.query_loss).abs() < 1e-12);
    }

    #[test]
    fn toy_inner_step_closed_form() {
        let mut rng = seeded(7);
        let (m0, a) = (Tensor::randn(&[3, 3], 1.0, &mut rng), Tensor::randn(&[3, 3], 1.0, &mut rng));
        let mut g = Graph::new();
        let m = g.param(m0.clone());
        let an = g.constant(a.clone());
        let d = g.sub(m, an).unwrap();
        let s = g.square(d).unwrap();
        let s = g.sum_all(s).unwrap();
        let l = g.scale(s, 0.5).unwrap();
        let out = gradient_step_nodes(&mut g, l, &[m], 0.3, true).unwrap();
        let want = m0.axpy(-0.3, &m0.sub(&a).unwrap()).unwrap();
        assert!(g.value(out[0]).max_abs_diff(&want) < 1e-15);

        let mut g = Graph::new();
        let m = g.param(m0.clone());
        let c = g.constant(Tensor::zeros(&[3, 3]));
        let z = g.mul(m, c).unwrap();
        let l = g.sum_all(z).unwrap();
        let out = gradient_step_nodes(&mut g, l, &[m], 0.3, true).unwrap();
        assert_eq!(g.value(out[0]), &m0);
    }

    fn small_episode() -> (Model, Episode) {
        let d = data();
        let ep = sample_episode(&d, 2, 2, 2, &mut seeded(11)).unwrap();
        (static_net(SimilarityKind::Unconstrained), ep)
    }

    #[test]
    fn outer_gradient_through_inner_step_matches_finite_differences() {
        let (m, ep) = small_episode();
        let mut state = MetaState::from_model(&m, &MetaConfig { ways: 2, ..MetaConfig::default() }).unwrap();
        let mut rng = seeded(12);
        for (_, t) in state.init.iter_mut() {
            *t = t.add(&Tensor::randn(t.shape(), 0.3, &mut rng)).unwrap();
        }
        let inst = state.instantiate(&m).unwrap();
        let names: Vec<String> = state.init.names().map(str::to_string).collect();
        let params: Vec<Tensor> = names.iter().map(|n| state.init.get(n).unwrap().clone()).collect();
        let report = finite_diff_check(
            |g, ids| {
                let mut b = inst.bind_constants(g)?;
                for (n, &id) in names.iter().zip(ids) {
                    b.set(n.clone(), id);
                }
                let b = meta_inner_step(g, &inst, &b, &ep.support, 0.5, &names, true)?;
                support_loss(g, &inst, &b, &ep.query)
            },
            &params,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
        let (lv, grads) = meta_objective(&m, &state, &ep, 1, false).unwrap();
        assert!(lv.is_finite());
        assert_eq!(grads.len(), names.len());
    }

    #[test]
    fn collapsed_inner_step_gives_plain_query_gradient() {
        let (m, ep) = small_episode();
        let mut state = MetaState::from_model(&m, &MetaConfig { ways: 2, ..MetaConfig::default() }).unwrap();
        *state.init.get_mut("head.weight").unwrap() = Tensor::randn(&[2, 27], 0.5, &mut seeded(3));
        state.step_size = 0.0;
        let (_, meta) = meta_objective(&m, &state, &ep, 1, false).unwrap();
        let (_, plain) = meta_objective(&m, &state, &ep, 0, false).unwrap();
        for ((n, a), (_, b)) in meta.iter().zip(&plain) {
            assert!(a.max_abs_diff(b) < 1e-12, "{n}");
        }
    }

    #[test]
    fn meta_train_zero_steps_is_identity_and_schedule_is_counted() {
        let (m, _) = small_episode();
        let d = data();
        let cfg = MetaConfig { outer_steps: 0, ways: 2, shots: 2, queries: 2, ..MetaConfig::default() };
        let (state, trace) = meta_train(&m, &d, &cfg).unwrap();
        assert!(trace.is_empty());
        assert_eq!(state.init.get("l0.sim.matrix").unwrap(), &Tensor::eye(9));
        let ep = sample_episode(&d, 2, 2, 2, &mut seeded(1)).unwrap();
        let a = meta_test(&m, &state, &ep).unwrap();
        assert_eq!((a.similarity_updates, a.classifier_updates), (5, 25));
        let b = meta_test(&m, &state, &ep).unwrap();
        assert_eq!(a.adapted.accuracy, b.adapted.accuracy);
        for (n, t) in m.params.iter() {
            if ParamGroup::of(n) == ParamGroup::Backbone {
                assert_eq!(t, a.adapted.model.params.get(n).unwrap());
            }
        }
        let zero = MetaState { joint_steps: 0, classifier_steps: 0, ..state.clone() };
        assert!((meta_test(&m, &zero, &ep).unwrap().adapted.accuracy - 0.5).abs() < 1e-12);

        let cfg = MetaConfig { outer_steps: 3, ways: 2, shots: 2, queries: 2, ..MetaConfig::default() };
        let (s1, t1) = meta_train(&m, &d, &cfg).unwrap();
        let (s2, t2) = meta_train(&m, &d, &cfg).unwrap();
        assert_eq!((s1, t1.len()), (s2, t2.len()));
    }

    #[test]
    fn ci_and_csv() {
        let (m, h) = mean_ci95(&[0.5, 0.7, 0.6, 0.6]);
        assert!((m - 0.6).abs() < 1e-12);
        let sd = (0.02f64 / 3.0).sqrt();
        assert!((h - 1.96 * sd / 2.0).abs() < 1e-12);
        let csv = episodes_csv(&[EpisodeResult { episode: 0, strategy: Strategy::Meta, accuracy: 0.5 }]);
        assert_eq!(csv, "episode_id,strategy,accuracy\n0,meta,0.5\n");
    }
}
