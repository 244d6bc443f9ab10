//! Central finite-difference verification of reverse-mode gradients.

use crate::autodiff::{Graph, NodeId};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fewshot::{meta_inner_step, similarity_names, support_loss};
use crate::gns::self_attention_nodes;
use crate::nn::{LayerSpec, Mode, Model, NetworkSpec, ParamGroup, PredictorSpec, SimilaritySpec, Variant, Wiring};
use crate::rng::seeded;
use crate::similarity::{ShapeShadow, SimilarityKind, DEFAULT_ALPHA};
use crate::tensor::Tensor;
use crate::train::cross_entropy_nodes;

/// Denominator floor for the elementwise relative error, so components whose
/// true derivative is zero are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub index: usize,
    pub max_rel_error: f64,
    pub worst_element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn eval_scalar<F>(f: &mut F, params: &[Tensor], index: usize) -> Result<f64>
where
    F: FnMut(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    // Leaves stay differentiable so that `f` may take gradients internally.
    let ids: Vec<NodeId> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &ids).map_err(|e| Error::Evaluation { index, message: e.to_string() })?;
    let v = g.value(out).item()?;
    if !v.is_finite() {
        return Err(Error::Evaluation { index, message: format!("function value {v}") });
    }
    Ok(v)
}

/// Compare the reverse-mode gradient of `f` with central differences
/// `(f(p+h) − f(p−h)) / 2h`, one element at a time.
///
/// `f` receives a fresh graph and one node per entry of `params`, and must
/// return a one-element node.
pub fn finite_diff_check<F>(mut f: F, params: &[Tensor], h: f64, tol: f64) -> Result<CheckReport>
where
    F: FnMut(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    if h <= 0.0 {
        return Err(Error::Argument(format!("finite-difference step must be positive, got {h}")));
    }
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &ids)?;
    let grads = g.backward(out, false)?;
    let analytic: Vec<Tensor> = ids
        .iter()
        .zip(params)
        .map(|(&id, p)| g.grad_value(&grads, id).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();

    let mut work: Vec<Tensor> = params.to_vec();
    let mut reports = Vec::with_capacity(params.len());
    for (pi, a) in analytic.iter().enumerate() {
        let mut worst = ParamCheck { index: pi, max_rel_error: 0.0, worst_element: 0, analytic: 0.0, numeric: 0.0 };
        for e in 0..a.len() {
            let orig = work[pi].data()[e];
            work[pi].data_mut()[e] = orig + h;
            let fp = eval_scalar(&mut f, &work, pi)?;
            work[pi].data_mut()[e] = orig - h;
            let fm = eval_scalar(&mut f, &work, pi)?;
            work[pi].data_mut()[e] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let err = relative_error(a.data()[e], numeric);
            if err > worst.max_rel_error || e == 0 {
                worst = ParamCheck {
                    index: pi,
                    max_rel_error: err.max(worst.max_rel_error),
                    worst_element: e,
                    analytic: a.data()[e],
                    numeric,
                };
            }
        }
        reports.push(worst);
    }
    let max_rel_error = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    Ok(CheckReport { params: reports, max_rel_error, tol, passed: max_rel_error <= tol })
}

/// Step and tolerance of the built-in suite.
pub const SUITE_STEP: f64 = 1e-5;
pub const SUITE_TOL: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SuiteSize {
    #[default]
    Small,
    Full,
}

impl std::str::FromStr for SuiteSize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small" => Ok(SuiteSize::Small),
            "full" => Ok(SuiteSize::Full),
            _ => Err(Error::Argument(format!("unknown suite size {s:?}; expected small or full"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: String,
    /// Parameter names checked, in report order.
    pub checked: Vec<String>,
    pub report: CheckReport,
}

struct Sizes {
    channels: usize,
    side: usize,
    out: usize,
    batch: usize,
}

fn smooth_net(input: [usize; 3], convs: Vec<LayerSpec>, classes: usize) -> NetworkSpec {
    let mut layers = Vec::new();
    for c in convs {
        layers.push(c);
        layers.push(LayerSpec::BatchNorm {});
    }
    layers.push(LayerSpec::Classifier { classes });
    NetworkSpec::new(input, layers)
}

fn ns(out: usize, similarity: SimilaritySpec) -> LayerSpec {
    LayerSpec::NsConv { out_channels: out, kernel: 3, stride: 1, pad: 1, bias: true, similarity }
}

fn jitter(model: &mut Model, names: &[String], seed: u64) -> Result<()> {
    let mut rng = seeded(seed);
    for n in names {
        let p = model.params.get_mut(n)?;
        *p = p.add(&Tensor::randn(p.shape(), 0.2, &mut rng))?;
    }
    model.project_constraints();
    Ok(())
}

/// Cross-entropy of `model` on `data` (training-mode batch norm) as a
/// function of the parameters `names`, all others held fixed.
fn model_check(model: &Model, data: &Dataset, names: &[String]) -> Result<CheckReport> {
    if names.is_empty() {
        return Err(Error::Configuration("gradient check selected no parameters".into()));
    }
    let params: Vec<Tensor> = names.iter().map(|n| model.params.get(n).cloned()).collect::<Result<_>>()?;
    finite_diff_check(
        |g, ids| {
            let mut b = model.bind_constants(g)?;
            for (n, &id) in names.iter().zip(ids) {
                b.set(n.clone(), id);
            }
            let x = g.constant(data.images.clone());
            let f = model.forward(g, &b, x, Mode::Train)?;
            cross_entropy_nodes(g, f.logits, &data.labels)
        },
        &params,
        SUITE_STEP,
        SUITE_TOL,
    )
}

fn random_data(shape: [usize; 3], n: usize, classes: usize, seed: u64) -> Result<Dataset> {
    let images = Tensor::randn(&[n, shape[0], shape[1], shape[2]], 1.0, &mut seeded(seed));
    Dataset::new(images, (0..n).map(|i| i % classes).collect(), classes)
}

fn names_where(model: &Model, pred: impl Fn(&str) -> bool) -> Vec<String> {
    model.params.names().filter(|n| pred(n)).map(str::to_string).collect()
}

/// Finite-difference checks of every differentiable parameter family:
/// kernels, each learnable similarity kind, shape-masked factors with the
/// mask fixed, dynamic predictors, adaptation networks, self-attention and
/// the second-order meta-learning step.
pub fn run_suite(size: SuiteSize) -> Result<Vec<SuiteEntry>> {
    let s = match size {
        SuiteSize::Small => Sizes { channels: 2, side: 4, out: 2, batch: 3 },
        SuiteSize::Full => Sizes { channels: 3, side: 6, out: 4, batch: 6 },
    };
    let input = [s.channels, s.side, s.side];
    let classes = 3;
    let data = random_data(input, s.batch, classes, 1)?;
    let mut out = Vec::new();
    let mut push = |name: &str, checked: Vec<String>, report: CheckReport| {
        out.push(SuiteEntry { name: name.to_string(), checked, report });
    };

    let plain = Model::init(smooth_net(input, vec![LayerSpec::conv(s.out, 3, 1)], classes), &mut seeded(2))?;
    let names = names_where(&plain, |n| n.starts_with("l0."));
    push("conv_kernel_w", names.clone(), model_check(&plain, &data, &names)?);

    for (label, kind) in [
        ("similarity_diagonal", SimilarityKind::Diagonal),
        ("similarity_unconstrained", SimilarityKind::Unconstrained),
        ("similarity_block_shared", SimilarityKind::BlockDiagonalShared),
        ("similarity_cholesky_psd", SimilarityKind::CholeskyPsd),
    ] {
        let mut m = Model::init(smooth_net(input, vec![ns(s.out, SimilaritySpec::Static { kind })], classes), &mut seeded(3))?;
        let names = names_where(&m, |n| n.starts_with("l0.sim.") || n == "l0.weight");
        jitter(&mut m, &names, 4)?;
        push(label, names.clone(), model_check(&m, &data, &names)?);
    }

    let mut m = Model::init(
        smooth_net(input, vec![ns(s.out, SimilaritySpec::Static { kind: SimilarityKind::ShapeMasked })], classes),
        &mut seeded(5),
    )?;
    let d_r: Vec<f64> = (0..9).map(|i| if i % 3 == 1 { 0.1 } else { 0.9 }).collect();
    m.set_shadow(0, &ShapeShadow::new(d_r, DEFAULT_ALPHA))?;
    let names = names_where(&m, |n| n.starts_with("l0.sim."));
    jitter(&mut m, &names, 6)?;
    push("shape_masked_r_fixed_mask", names.clone(), model_check(&m, &data, &names)?);

    for (label, variant) in [("predictor_dns", Variant::Dns), ("predictor_uns", Variant::Uns)] {
        let mut p = PredictorSpec::new(variant);
        p.hidden = Some(4);
        let m = Model::init(smooth_net(input, vec![ns(s.out, SimilaritySpec::Dynamic { predictor: p })], classes), &mut seeded(7))?;
        let names = names_where(&m, |n| ParamGroup::of(n) == ParamGroup::Predictor);
        push(label, names.clone(), model_check(&m, &data, &names)?);
    }

    let mut p = PredictorSpec::new(Variant::Dns);
    p.hidden = Some(4);
    p.wiring = Wiring::Shared;
    let mut spec = smooth_net(
        input,
        vec![ns(s.out + 1, SimilaritySpec::Dynamic { predictor: p.clone() }), ns(s.out, SimilaritySpec::Dynamic { predictor: p })],
        classes,
    );
    spec.adapter_channels = s.channels + 2;
    let m = Model::init(spec, &mut seeded(8))?;
    let names = names_where(&m, |n| matches!(ParamGroup::of(n), ParamGroup::Adapter | ParamGroup::Predictor));
    push("adaptation_networks", names.clone(), model_check(&m, &data, &names)?);

    for (label, softmax) in [("self_attention", false), ("self_attention_softmax", true)] {
        let c = s.channels;
        let mut rng = seeded(9);
        let params = vec![
            Tensor::randn(&[s.out, c, 3, 3], 0.5, &mut rng),
            Tensor::randn(&[c, c], 0.5, &mut rng),
            Tensor::randn(&[c, c], 0.5, &mut rng),
            Tensor::randn(&[c, s.side, s.side], 0.5, &mut rng),
        ];
        let probe = Tensor::randn(&[s.out, s.side, s.side], 1.0, &mut rng);
        let report = finite_diff_check(
            |g, p| {
                let y = self_attention_nodes(g, p[0], p[1], p[2], p[3], softmax)?;
                let w = g.constant(probe.clone());
                let yw = g.mul(y, w)?;
                g.sum_all(yw)
            },
            &params,
            SUITE_STEP,
            SUITE_TOL,
        )?;
        push(label, ["w", "g1", "g2", "x"].map(String::from).to_vec(), report);
    }

    let mut m = Model::init(
        smooth_net(input, vec![ns(s.out, SimilaritySpec::Static { kind: SimilarityKind::Unconstrained })], classes),
        &mut seeded(10),
    )?;
    let mut names = similarity_names(&m);
    names.extend(["head.weight".to_string(), "head.bias".to_string()]);
    jitter(&mut m, &names, 11)?;
    let support = random_data(input, s.batch, classes, 12)?;
    let query = random_data(input, s.batch, classes, 13)?;
    let params: Vec<Tensor> = names.iter().map(|n| m.params.get(n).cloned()).collect::<Result<_>>()?;
    let report = finite_diff_check(
        |g, ids| {
            let mut b = m.bind_constants(g)?;
            for (n, &id) in names.iter().zip(ids) {
                b.set(n.clone(), id);
            }
            let b = meta_inner_step(g, &m, &b, &support, 0.5, &names, true)?;
            support_loss(g, &m, &b, &query)
        },
        &params,
        SUITE_STEP,
        SUITE_TOL,
    )?;
    push("meta_inner_step", names, report);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let r = finite_diff_check(
            |g, p| g.mul(p[0], p[0]),
            &[Tensor::scalar(3.0)],
            1e-4,
            1e-10,
        )
        .unwrap();
        assert!(r.passed);
        assert!((r.params[0].analytic - 6.0).abs() < 1e-12);
        assert!(r.max_rel_error < 1e-10);
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let r = finite_diff_check(
            |g, p| {
                let z = g.scale(p[0], 0.0)?;
                let s = g.sum_all(z)?;
                g.add_scalar(s, 4.0)
            },
            &[Tensor::from_vec(vec![1.0, 2.0])],
            1e-5,
            1e-10,
        )
        .unwrap();
        assert!(r.passed);
        assert_eq!(r.params[0].analytic, 0.0);
        assert_eq!(r.params[0].numeric, 0.0);
    }

    #[test]
    fn non_finite_evaluation_names_parameter() {
        // log(x) at x = 1e-7 is fine; x - h < 0 is not.
        let e = finite_diff_check(
            |g, p| {
                let l = g.log(p[1])?;
                let s = g.sum_all(l)?;
                let t = g.sum_all(p[0])?;
                g.add(s, t)
            },
            &[Tensor::scalar(1.0), Tensor::scalar(1e-7)],
            1e-5,
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(e, Error::Evaluation { index: 1, .. }), "{e}");
    }

    #[test]
    fn rejects_non_positive_step() {
        assert!(finite_diff_check(|g, p| g.sum_all(p[0]), &[Tensor::scalar(1.0)], 0.0, 1e-5).is_err());
    }

    #[test]
    fn small_suite_passes() {
        let entries = run_suite(SuiteSize::Small).unwrap();
        assert_eq!(entries.len(), 12);
        for e in &entries {
            eprintln!("{:<28} {:.3e}", e.name, e.report.max_rel_error);
        }
        for e in &entries {
            assert!(e.report.passed, "{} {:?}", e.name, e.report);
        }
    }
}
