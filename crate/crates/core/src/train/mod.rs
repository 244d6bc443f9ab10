//! Mini-batch training with frozen parameter sets, and evaluation.

pub mod loss;
pub mod optim;

use std::fmt::Write as _;

use glob::Pattern;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{mask_name, Mode, Model, ParamGroup};
use crate::rng::substream;
use crate::tensor::Tensor;

pub use loss::{argmax_rows, cross_entropy, cross_entropy_nodes, mse_nodes, mse_onehot_nodes};
pub use optim::{adam_step, sgd_momentum_step, LrSchedule, Optimizer, OptimizerConfig, OptimizerState};

/// Parameter names excluded from updates: glob patterns over names
/// (`l0.*`, `*.sim.*`) or `@group` for a whole [`ParamGroup`].
#[derive(Clone, Debug, Default)]
pub struct FreezeSet {
    globs: Vec<Pattern>,
    groups: Vec<ParamGroup>,
}

impl FreezeSet {
    pub fn new(patterns: &[String]) -> Result<Self> {
        let mut f = FreezeSet::default();
        for p in patterns {
            if let Some(g) = p.strip_prefix('@') {
                f.groups.push(
                    ParamGroup::parse(g).ok_or_else(|| Error::Configuration(format!("unknown parameter group @{g}")))?,
                );
            } else {
                f.globs.push(Pattern::new(p).map_err(|e| Error::Configuration(format!("freeze pattern {p:?}: {e}")))?);
            }
        }
        Ok(f)
    }

    pub fn everything() -> Self {
        FreezeSet { globs: vec![Pattern::new("*").expect("static pattern")], groups: Vec::new() }
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.groups.contains(&ParamGroup::of(name)) || self.globs.iter().any(|p| p.matches(name))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    CrossEntropy,
    /// Squared error against one-hot targets.
    Mse,
}

fn d_batch() -> usize {
    32
}
fn d_epochs() -> usize {
    10
}
fn d_lr() -> f64 {
    0.1
}
fn d_gamma() -> f64 {
    0.1
}
fn d_shape_lr() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    /// Iterations at which the rate is multiplied by `gamma`; when absent,
    /// placed at 34/64 and 54/64 of the run.
    #[serde(default)]
    pub milestones: Option<Vec<usize>>,
    #[serde(default = "d_gamma")]
    pub gamma: f64,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub freeze: Vec<String>,
    #[serde(default)]
    pub seed: u64,
    /// ℓ1 weight on static similarity parameters.
    #[serde(default)]
    pub l1: f64,
    /// Global gradient-norm clip.
    #[serde(default)]
    pub clip_norm: Option<f64>,
    /// Train kernel-shape masks through their shadows.
    #[serde(default)]
    pub learn_shape: bool,
    #[serde(default = "d_shape_lr")]
    pub shape_lr: f64,
    /// Normalize with the running statistics and leave them untouched.
    #[serde(default)]
    pub freeze_bn_stats: bool,
    #[serde(default)]
    pub loss: LossKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Configuration("batch size must be positive".into()));
        }
        if self.l1 < 0.0 || !(self.shape_lr > 0.0) {
            return Err(Error::Configuration("l1 weight must be ≥ 0 and shape learning rate > 0".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Configuration(format!("clip norm {c} must be positive")));
            }
        }
        self.optimizer.validate()?;
        FreezeSet::new(&self.freeze)?;
        LrSchedule::new(self.lr, self.milestones.clone().unwrap_or_default(), self.gamma)?;
        Ok(())
    }

    fn schedule(&self, total: usize) -> Result<LrSchedule> {
        let m = self.milestones.clone().unwrap_or_else(|| LrSchedule::scaled_default(total));
        LrSchedule::new(self.lr, m, self.gamma)
    }
}

/// First phase of the pretrained recipe: backbone and classifier frozen so
/// only similarity, predictor and adapter parameters move; then an optional
/// full finetune.
pub fn two_phase(base: &TrainConfig, phase1_epochs: usize, phase2_epochs: usize) -> Vec<TrainConfig> {
    let mut p1 = base.clone();
    p1.epochs = phase1_epochs;
    p1.freeze.extend(["@backbone".to_string(), "@classifier".to_string()]);
    let mut out = vec![p1];
    if phase2_epochs > 0 {
        let mut p2 = base.clone();
        p2.epochs = phase2_epochs;
        p2.seed = base.seed.wrapping_add(1);
        out.push(p2);
    }
    out
}

/// One row of the metrics trace. Accuracies are filled on the last
/// iteration of each epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub iteration: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub train_acc: Option<f64>,
    pub test_acc: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub rows: Vec<MetricRow>,
}

impl TrainReport {
    pub const CSV_HEADER: &'static str = "iteration,epoch,loss,lr,train_acc,test_acc";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{},{}", r.iteration, r.epoch, r.loss, r.lr, opt(r.train_acc), opt(r.test_acc));
        }
        s
    }

    pub fn losses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.loss).collect()
    }

    /// Mean loss of each epoch.
    pub fn epoch_losses(&self) -> Vec<f64> {
        let epochs = self.rows.last().map_or(0, |r| r.epoch + 1);
        (0..epochs)
            .map(|e| {
                let l: Vec<f64> = self.rows.iter().filter(|r| r.epoch == e).map(|r| r.loss).collect();
                l.iter().sum::<f64>() / l.len().max(1) as f64
            })
            .collect()
    }

    pub fn last_test_acc(&self) -> Option<f64> {
        self.rows.iter().rev().find_map(|r| r.test_acc)
    }

    /// Continue `self` with the rows of a later run, renumbering them.
    pub fn append(&mut self, other: TrainReport) {
        let (it, ep) = self.rows.last().map_or((0, 0), |r| (r.iteration + 1, r.epoch + 1));
        self.rows.extend(other.rows.into_iter().map(|mut r| {
            r.iteration += it;
            r.epoch += ep;
            r
        }));
    }
}

fn param_stats(model: &Model) -> String {
    let mut worst = ("", 0.0f64);
    for (name, t) in model.params.iter() {
        let m = t.data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if m >= worst.1 {
            worst = (name, m);
        }
    }
    format!("largest |parameter| {:e} in {}", worst.1, worst.0)
}

fn non_finite(iteration: usize, model: &Model, what: impl std::fmt::Display) -> Error {
    Error::NonFiniteLoss { iteration, detail: format!("{what}; {}", param_stats(model)) }
}

/// Train `model` in place with a fresh optimizer.
pub fn train(model: &mut Model, data: &Dataset, test: Option<&Dataset>, cfg: &TrainConfig) -> Result<(TrainReport, Optimizer)> {
    let mut opt = Optimizer::new(cfg.optimizer.clone())?;
    let r = train_with(model, data, test, cfg, &mut opt)?;
    Ok((r, opt))
}

/// Run several configurations back to back, each with a fresh optimizer.
pub fn train_phases(model: &mut Model, data: &Dataset, test: Option<&Dataset>, phases: &[TrainConfig]) -> Result<TrainReport> {
    let mut report = TrainReport::default();
    for cfg in phases {
        report.append(train(model, data, test, cfg)?.0);
    }
    Ok(report)
}

/// Train `model` in place, continuing from `opt`'s state.
///
/// Samples are reshuffled each epoch by a permutation drawn from
/// `(cfg.seed, epoch)`, so identical inputs give bit-identical results.
/// Parameters matched by `cfg.freeze` are never written.
pub fn train_with(
    model: &mut Model,
    data: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
    opt: &mut Optimizer,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    if data.sample_shape() != model.spec().input {
        return Err(Error::Shape(format!(
            "dataset samples {:?} do not match network input {:?}",
            data.sample_shape(),
            model.spec().input
        )));
    }
    let freeze = FreezeSet::new(&cfg.freeze)?;
    let per_epoch = data.len().div_ceil(cfg.batch_size);
    let schedule = cfg.schedule(per_epoch * cfg.epochs)?;
    let shape_layers: Vec<usize> = if cfg.learn_shape {
        model.static_layers().into_iter().filter(|&i| model.shadow(i).is_ok() && !freeze.is_frozen(&mask_name(i))).collect()
    } else {
        Vec::new()
    };
    let l1_names: Vec<String> = model
        .params
        .names()
        .filter(|n| ParamGroup::of(n) == ParamGroup::Similarity && !freeze.is_frozen(n))
        .map(str::to_string)
        .collect();

    let mut report = TrainReport::default();
    let mut iteration = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut substream(cfg.seed, epoch as u64));
        let (mut correct, mut seen) = (0usize, 0usize);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let lr = schedule.lr_at(iteration);
            let (x, labels) = data.batch(chunk);
            let step = (|| -> Result<_> {
                let mut g = Graph::new();
                let b = model.bind(&mut g, &|n| !freeze.is_frozen(n), cfg.learn_shape && !shape_layers.is_empty())?;
                let xn = g.constant(x);
                let mode = if cfg.freeze_bn_stats { Mode::Eval } else { Mode::Train };
                let f = model.forward(&mut g, &b, xn, mode)?;
                let mut loss = match cfg.loss {
                    LossKind::CrossEntropy => cross_entropy_nodes(&mut g, f.logits, &labels)?,
                    LossKind::Mse => mse_onehot_nodes(&mut g, f.logits, &labels)?,
                };
                if cfg.l1 > 0.0 {
                    for n in &l1_names {
                        let a = g.abs(b.get(n)?)?;
                        let s = g.sum_all(a)?;
                        let s = g.scale(s, cfg.l1)?;
                        loss = g.add(loss, s)?;
                    }
                }
                let lv = g.value(loss).item()?;
                let preds = argmax_rows(g.value(f.logits));
                let grads = g.backward(loss, false)?;
                let mut out = Vec::new();
                for (name, id) in b.iter() {
                    if !freeze.is_frozen(name) {
                        let gv = g.grad_value(&grads, id).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(id)));
                        out.push((name.to_string(), gv));
                    }
                }
                let mut mask_grads = Vec::new();
                for &i in &shape_layers {
                    let id = b.mask(&mask_name(i)).ok_or_else(|| Error::State(format!("mask of layer {i} not bound")))?;
                    let gv = g.grad_value(&grads, id).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(id)));
                    mask_grads.push((i, gv));
                }
                Ok((lv, preds, out, mask_grads, f.batch_stats))
            })();
            let (lv, preds, mut grads, mask_grads, stats) = match step {
                Ok(s) => s,
                Err(Error::Contract(m)) => return Err(non_finite(iteration, model, m)),
                Err(e) => return Err(e),
            };
            if !lv.is_finite() {
                return Err(non_finite(iteration, model, format!("loss {lv}")));
            }
            if let Some(c) = cfg.clip_norm {
                let norm = grads.iter().map(|(_, t)| t.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
                if norm > c {
                    for (_, t) in grads.iter_mut() {
                        *t = t.scale(c / norm);
                    }
                }
            }
            opt.step(&mut model.params, &grads, lr)?;
            for (i, gv) in mask_grads {
                let s = model.shadow(i)?.update(gv.data(), cfg.shape_lr)?;
                model.set_shadow(i, &s)?;
            }
            if !cfg.freeze_bn_stats {
                let stats: Vec<_> = stats.into_iter().filter(|(i, _, _)| !freeze.is_frozen(&format!("l{i}.gamma"))).collect();
                model.update_running_stats(&stats)?;
            }
            model.project_constraints();
            if model.params.iter().any(|(_, t)| !t.is_finite()) {
                return Err(non_finite(iteration, model, "non-finite parameter after update"));
            }
            correct += preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
            seen += labels.len();
            let last = bi + 1 == per_epoch;
            let test_acc = match (last, test) {
                (true, Some(t)) => Some(1.0 - evaluate(model, t)?),
                _ => None,
            };
            report.rows.push(MetricRow {
                iteration,
                epoch,
                loss: lv,
                lr,
                train_acc: last.then(|| correct as f64 / seen as f64),
                test_acc,
            });
            iteration += 1;
        }
    }
    Ok(report)
}

/// Predicted class per sample (evaluation mode, ties to the lowest index).
pub fn predict(model: &Model, data: &Dataset) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(128) {
        let (x, _) = data.batch(chunk);
        out.extend(argmax_rows(&model.logits(&x, Mode::Eval)?));
    }
    Ok(out)
}

/// Fraction of samples misclassified.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Argument("evaluation set is empty".into()));
    }
    let p = predict(model, data)?;
    Ok(p.iter().zip(&data.labels).filter(|(a, b)| a != b).count() as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, SynthSpec};
    use crate::nn::{LayerSpec, NetworkSpec, SimilaritySpec};
    use crate::rng::seeded;
    use crate::similarity::SimilarityKind;

    fn linear_spec(input: [usize; 3], classes: usize) -> NetworkSpec {
        NetworkSpec::new(input, vec![LayerSpec::Classifier { classes }])
    }

    fn small_cnn(sim: Option<SimilarityKind>) -> NetworkSpec {
        let conv = match sim {
            None => LayerSpec::conv(4, 3, 1),
            Some(kind) => LayerSpec::NsConv {
                out_channels: 4,
                kernel: 3,
                stride: 1,
                pad: 1,
                bias: true,
                similarity: SimilaritySpec::Static { kind },
            },
        };
        NetworkSpec::new(
            [1, 8, 8],
            vec![conv, LayerSpec::BatchNorm {}, LayerSpec::Relu {}, LayerSpec::MaxPool { size: 2, stride: 2 }, LayerSpec::Classifier { classes: 3 }],
        )
    }

    fn data(classes: usize, per: usize, size: usize, seed: u64) -> Dataset {
        synth_dataset(&SynthSpec { classes, per_class: per, channels: 1, size, noise: 0.1, jitter: 0.2 }, seed).unwrap()
    }

    #[test]
    fn zero_epochs_and_full_freeze_leave_model_unchanged() {
        let d = data(3, 6, 8, 1);
        let mut m = Model::init(small_cnn(Some(SimilarityKind::Unconstrained)), &mut seeded(1)).unwrap();
        let before = m.clone();
        train(&mut m, &d, None, &TrainConfig { epochs: 0, ..TrainConfig::default() }).unwrap();
        assert_eq!(m, before);
        let cfg = TrainConfig { epochs: 2, batch_size: 6, freeze: vec!["*".into()], freeze_bn_stats: true, ..TrainConfig::default() };
        train(&mut m, &d, None, &cfg).unwrap();
        assert_eq!(m.params, before.params);
    }

    #[test]
    fn separable_two_class_reaches_full_train_accuracy() {
        let d = synth_dataset(&SynthSpec { classes: 2, per_class: 40, channels: 1, size: 6, noise: 0.05, jitter: 0.1 }, 4).unwrap();
        let mut m = Model::init(linear_spec([1, 6, 6], 2), &mut seeded(2)).unwrap();
        let cfg = TrainConfig { epochs: 20, batch_size: 8, lr: 0.05, ..TrainConfig::default() };
        let (r, _) = train(&mut m, &d, None, &cfg).unwrap();
        assert_eq!(r.rows.len(), 200);
        assert!(1.0 - evaluate(&m, &d).unwrap() >= 0.99);
    }

    #[test]
    fn deterministic_and_freeze_is_bitwise() {
        let d = data(3, 8, 8, 2);
        let cfg = TrainConfig { epochs: 2, batch_size: 5, freeze: vec!["@backbone".into()], ..TrainConfig::default() };
        let run = || {
            let mut m = Model::init(small_cnn(Some(SimilarityKind::Diagonal)), &mut seeded(3)).unwrap();
            let r = train(&mut m, &d, Some(&d), &cfg).unwrap().0;
            (m, r)
        };
        let (a, ra) = run();
        let (b, rb) = run();
        assert_eq!(ra.to_csv(), rb.to_csv());
        for ((n, x), (_, y)) in a.params.iter().zip(b.params.iter()) {
            assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()), "{n}");
        }
        let init = Model::init(small_cnn(Some(SimilarityKind::Diagonal)), &mut seeded(3)).unwrap();
        for (n, t) in a.params.iter() {
            if ParamGroup::of(n) == ParamGroup::Backbone {
                assert_eq!(t, init.params.get(n).unwrap(), "{n}");
            }
        }
        assert_ne!(a.params.get("l0.sim.diag").unwrap(), init.params.get("l0.sim.diag").unwrap());
        let csv = ra.to_csv();
        assert!(csv.starts_with(TrainReport::CSV_HEADER));
        assert_eq!(csv.lines().count(), 1 + ra.rows.len());
    }

    #[test]
    fn convex_least_squares_decreases_monotonically() {
        let d = data(2, 10, 4, 5);
        let n = d.len();
        let x = d.images.reshape(&[n, 16]).unwrap();
        let xt = Tensor::from_fn(&[n, 17], |i| if i % 17 == 16 { 1.0 } else { x.data()[(i / 17) * 16 + i % 17] });
        let xtx = xt.t().unwrap().matmul(&xt).unwrap();
        let mut v = Tensor::ones(&[17, 1]);
        let mut lam = 0.0;
        for _ in 0..500 {
            let w = xtx.matmul(&v).unwrap();
            lam = w.norm() / v.norm();
            v = w.scale(1.0 / w.norm());
        }
        let lip = 2.0 * lam * 1.01 / (n as f64 * 2.0);
        let mut m = Model::init(linear_spec([1, 4, 4], 2), &mut seeded(5)).unwrap();
        let cfg = TrainConfig {
            epochs: 60,
            batch_size: n,
            lr: 1.0 / lip,
            optimizer: OptimizerConfig::Sgd { momentum: 0.0, dampening: 0.0, weight_decay: 0.0 },
            milestones: Some(vec![]),
            loss: LossKind::Mse,
            ..TrainConfig::default()
        };
        let r = train(&mut m, &d, None, &cfg).unwrap().0;
        let l = r.losses();
        assert!(l.windows(2).all(|w| w[1] <= w[0] + 1e-15), "{l:?}");
        assert!(l.last().unwrap() < &l[0]);
    }

    #[test]
    fn non_finite_loss_reports_iteration() {
        let d = data(3, 4, 8, 6);
        let mut m = Model::init(small_cnn(None), &mut seeded(6)).unwrap();
        let cfg = TrainConfig { epochs: 3, batch_size: 4, lr: 1e200, milestones: Some(vec![]), ..TrainConfig::default() };
        match train(&mut m, &d, None, &cfg) {
            Err(Error::NonFiniteLoss { iteration, detail }) => {
                assert!(iteration >= 1);
                assert!(detail.contains("largest"), "{detail}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn freeze_patterns() {
        let f = FreezeSet::new(&["l0.*".into(), "@classifier".into()]).unwrap();
        assert!(f.is_frozen("l0.weight") && f.is_frozen("head.bias") && !f.is_frozen("l1.weight"));
        assert!(FreezeSet::new(&["@nope".into()]).is_err());
        assert!(FreezeSet::everything().is_frozen("anything"));
    }

    #[test]
    fn evaluate_properties() {
        let d = data(3, 5, 8, 7);
        let one = d.filter_classes(&[0]).unwrap();
        let mut m = Model::zeros(small_cnn(None)).unwrap();
        assert_eq!(evaluate(&m, &one).unwrap(), 0.0);
        m = Model::init(small_cnn(None), &mut seeded(8)).unwrap();
        let e = evaluate(&m, &d).unwrap();
        let mut rev: Vec<usize> = (0..d.len()).collect();
        rev.reverse();
        assert_eq!(evaluate(&m, &d.subset(&rev, None).unwrap()).unwrap(), e);
    }

    #[test]
    fn two_phase_recipe_freezes_backbone_first() {
        let d = data(3, 6, 8, 9);
        let mut m = Model::init(small_cnn(Some(SimilarityKind::BlockDiagonalShared)), &mut seeded(9)).unwrap();
        let w0 = m.params.get("l0.weight").unwrap().clone();
        let phases = two_phase(&TrainConfig { batch_size: 6, lr: 0.05, ..TrainConfig::default() }, 2, 0);
        let r = train_phases(&mut m, &d, None, &phases).unwrap();
        assert_eq!(m.params.get("l0.weight").unwrap(), &w0);
        assert_eq!(r.rows.len(), 6);
        let phases = two_phase(&TrainConfig { batch_size: 6, lr: 0.05, ..TrainConfig::default() }, 1, 1);
        let r = train_phases(&mut m, &d, None, &phases).unwrap();
        assert_ne!(m.params.get("l0.weight").unwrap(), &w0);
        assert_eq!(r.rows.last().unwrap().epoch, 1);
    }

    #[test]
    fn trained_static_nsn_folds_exactly() {
        let d = data(3, 6, 8, 10);
        for kind in SimilarityKind::ALL {
            let mut m = Model::init(small_cnn(Some(kind)), &mut seeded(10)).unwrap();
            let cfg = TrainConfig { epochs: 1, batch_size: 6, lr: 0.05, ..TrainConfig::default() };
            train(&mut m, &d, None, &cfg).unwrap();
            let f = m.fold().unwrap();
            let a = m.logits(&d.images, Mode::Eval).unwrap();
            let b = f.logits(&d.images, Mode::Eval).unwrap();
            assert!(a.max_abs_diff(&b) <= 1e-10, "{kind:?}");
        }
    }

    #[test]
    fn config_rejects_unknown_keys_and_bad_values() {
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epochz": 3}"#).is_err());
        let c: TrainConfig = serde_json::from_str(r#"{"optimizer": {"kind": "adam"}}"#).unwrap();
        assert_eq!(c.optimizer, OptimizerConfig::adam());
        assert!(TrainConfig { milestones: Some(vec![5, 5]), ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { gamma: 0.0, ..TrainConfig::default() }.validate().is_err());
    }
}
