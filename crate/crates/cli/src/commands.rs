//! Subcommand implementations. Each returns the `key=value` lines it prints.

use std::fmt::Write as _;
use std::path::Path;

use serde_json::json;

use nsl_core::checkpoint::Checkpoint;
use nsl_core::data::Dataset;
use nsl_core::fewshot::{
    dynamic_fewshot, episodes_csv, mean_ci95, meta_test, meta_train, sample_episode, static_fewshot, EpisodeResult,
    MetaConfig, Strategy,
};
use nsl_core::gns::{
    conv_as_matrix, gns_forward, lns_forward, mask_seen_from, self_attention_forward, self_attention_nodes,
    GlobalSimilarity, Padding,
};
use nsl_core::gradcheck::{run_suite, SuiteSize, SUITE_TOL};
use nsl_core::gradflow::{integrate_with_retry, min_norm_solution, FlowProblem, FlowState};
use nsl_core::nn::Model;
use nsl_core::rng::substream;
use nsl_core::similarity::SimilarityMatrix;
use nsl_core::train::{evaluate, train, two_phase, Optimizer, TrainReport};
use nsl_core::{Error, Graph, Result, Tensor};

use crate::config::{load_pretrained, save_resolved, to_json, EvalRun, FewshotRun, GradflowRun, TrainRun};

/// Streams split off the run seed.
const MODEL_STREAM: u64 = 1;
const EPISODE_STREAM: u64 = 2;
const PROBLEM_STREAM: u64 = 3;

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(dir.join(name), contents)?;
    Ok(())
}

pub fn train_cmd(run: &TrainRun) -> Result<Vec<String>> {
    let (data, test) = run.data.load(run.seed)?;
    let spec = run.network.build(data.sample_shape(), data.classes)?;
    let mut model = Model::init(spec, &mut substream(run.seed, MODEL_STREAM))?;
    let mut out = Vec::new();
    if let Some(p) = &run.pretrained {
        out.push(format!("pretrained_tensors={}", load_pretrained(&mut model, p)?));
    }
    let mut cfg = run.train.clone();
    cfg.seed = run.seed;
    let phases = match run.phases {
        Some([e1, e2]) => two_phase(&cfg, e1, e2),
        None => vec![cfg],
    };
    let mut report = TrainReport::default();
    let mut opt: Option<Optimizer> = None;
    for c in &phases {
        let (r, o) = train(&mut model, &data, test.as_ref(), c)?;
        report.append(r);
        opt = Some(o);
    }
    let resolved = TrainRun { train: nsl_core::train::TrainConfig { seed: run.seed, ..run.train.clone() }, ..run.clone() };
    save_resolved(&run.output_dir, &resolved)?;
    Checkpoint::from_model(&model, opt.as_ref()).save(run.output_dir.join("model.ckpt"))?;
    write(&run.output_dir, "metrics.csv", report.to_csv())?;
    let final_loss = report.rows.last().map(|r| r.loss);
    let test_error = match &test {
        Some(t) => Some(evaluate(&model, t)?),
        None => None,
    };
    let summary = json!({
        "iterations": report.rows.len(),
        "final_loss": final_loss,
        "test_error": test_error,
        "param_count": model.param_count(),
    });
    write(&run.output_dir, "summary.json", to_json(&summary)? + "\n")?;
    out.push(format!("iterations={}", report.rows.len()));
    if let Some(l) = final_loss {
        out.push(format!("final_loss={l}"));
    }
    if let Some(e) = test_error {
        out.push(format!("test_error={e}"));
    }
    out.push(format!("param_count={}", model.param_count()));
    out.push(format!("output_dir={}", run.output_dir.display()));
    Ok(out)
}

/// Error rate of a checkpoint on the run's test split, or on the whole
/// dataset when there is none.
pub fn eval_cmd(run: &EvalRun, save: bool) -> Result<Vec<String>> {
    let model = Checkpoint::load(&run.checkpoint)?.into_model()?;
    let (data, test) = run.data.load(run.seed)?;
    let (set, which) = match &test {
        Some(t) => (t, "test"),
        None => (&data, "train"),
    };
    let err = evaluate(&model, set)?;
    if save {
        save_resolved(&run.output_dir, run)?;
        let summary = json!({ "error_rate": err, "split": which, "samples": set.len() });
        write(&run.output_dir, "eval.json", to_json(&summary)? + "\n")?;
    }
    Ok(vec![format!("split={which}"), format!("samples={}", set.len()), format!("error_rate={err}")])
}

/// Replace every static similarity layer by a plain convolution with folded
/// kernels.
pub fn fold_cmd(input: &Path, output: &Path) -> Result<Vec<String>> {
    let model = Checkpoint::load(input)?.into_model()?;
    let folded = model.fold()?;
    Checkpoint::from_model(&folded, None).save(output)?;
    Ok(vec![
        format!("params_before={}", model.param_count()),
        format!("params_after={}", folded.param_count()),
        format!("output={}", output.display()),
    ])
}

pub fn gradcheck_cmd(size: SuiteSize) -> Result<(Vec<String>, bool)> {
    let entries = run_suite(size)?;
    let mut ok = true;
    let lines = entries
        .iter()
        .map(|e| {
            ok &= e.report.passed;
            format!(
                "op={} max_rel_error={:.3e} tol={:e} status={}",
                e.name,
                e.report.max_rel_error,
                SUITE_TOL,
                if e.report.passed { "pass" } else { "fail" }
            )
        })
        .collect();
    Ok((lines, ok))
}

fn relabeled(data: &Dataset, classes: std::ops::Range<usize>) -> Result<Dataset> {
    let idx: Vec<usize> = (0..data.len()).filter(|&i| classes.contains(&data.labels[i])).collect();
    let start = classes.start;
    data.subset(&idx, Some((&move |l| l - start, classes.len())))
}

pub fn fewshot_cmd(run: &FewshotRun) -> Result<Vec<String>> {
    let (data, _) = run.data.load(run.seed)?;
    if run.base_classes < 2 || run.base_classes + run.ways > data.classes {
        return Err(Error::Configuration(format!(
            "{} classes cannot hold {} base classes and {}-way novel episodes",
            data.classes, run.base_classes, run.ways
        )));
    }
    let base = relabeled(&data, 0..run.base_classes)?;
    let novel = relabeled(&data, run.base_classes..data.classes)?;
    let spec = run.network_choice().build(data.sample_shape(), run.base_classes)?;
    let mut model = Model::init(spec, &mut substream(run.seed, MODEL_STREAM))?;
    if let Some(p) = &run.pretrained {
        load_pretrained(&mut model, p)?;
    }
    if run.pretrain.epochs > 0 {
        let cfg = nsl_core::train::TrainConfig { seed: run.seed, ..run.pretrain.clone() };
        train(&mut model, &base, None, &cfg)?;
    }
    save_resolved(&run.output_dir, run)?;
    let mut rng = substream(run.seed, EPISODE_STREAM);
    let mut results = Vec::with_capacity(run.episodes);
    let mut extra = Vec::new();
    let meta = match run.strategy {
        Strategy::Meta => {
            let cfg = MetaConfig { ways: run.ways, shots: run.shots, queries: run.queries, seed: run.seed, ..run.meta.clone() };
            let (state, trace) = meta_train(&model, &base, &cfg)?;
            let mut csv = String::from("outer_step,meta_loss\n");
            for (i, l) in trace.iter().enumerate() {
                let _ = writeln!(csv, "{i},{l}");
            }
            write(&run.output_dir, "meta_loss.csv", csv)?;
            Some(state)
        }
        _ => None,
    };
    for e in 0..run.episodes {
        let ep = sample_episode(&novel, run.ways, run.shots, run.queries, &mut rng)?;
        let ft = nsl_core::fewshot::FinetuneConfig { seed: run.seed.wrapping_add(e as u64), ..run.finetune.clone() };
        let accuracy = match (run.strategy, &meta) {
            (Strategy::Static, _) => static_fewshot(&model, &ep, &ft)?.accuracy,
            (Strategy::Dynamic, _) => dynamic_fewshot(&model, &ep, &ft)?.accuracy,
            (Strategy::Meta, Some(state)) => {
                let a = meta_test(&model, state, &ep)?;
                if e == 0 {
                    extra.push(format!("similarity_updates={}", a.similarity_updates));
                    extra.push(format!("classifier_updates={}", a.classifier_updates));
                }
                a.adapted.accuracy
            }
            (Strategy::Meta, None) => unreachable!("meta state is built above"),
        };
        results.push(EpisodeResult { episode: e, strategy: run.strategy, accuracy });
    }
    write(&run.output_dir, "episodes.csv", episodes_csv(&results))?;
    let accs: Vec<f64> = results.iter().map(|r| r.accuracy).collect();
    let (mean, ci) = mean_ci95(&accs);
    let summary = json!({ "strategy": run.strategy, "episodes": run.episodes, "mean_accuracy": mean, "ci95": ci });
    write(&run.output_dir, "summary.json", to_json(&summary)? + "\n")?;
    let mut out = vec![
        format!("strategy={}", run.strategy.name()),
        format!("episodes={}", run.episodes),
        format!("mean_accuracy={mean}"),
        format!("ci95={ci}"),
    ];
    out.extend(extra);
    out.push(format!("output_dir={}", run.output_dir.display()));
    Ok(out)
}

pub fn gradflow_cmd(run: &GradflowRun) -> Result<Vec<String>> {
    let p = FlowProblem::random_consistent(run.samples, run.n, run.m, &mut substream(run.seed, PROBLEM_STREAM))?;
    let state = FlowState::initial(run.mode, &p, run.wp_std, run.seed);
    let tr = integrate_with_retry(state, &p, run.dt, run.steps, run.stop_tol, run.max_halvings)?;
    save_resolved(&run.output_dir, run)?;
    write(&run.output_dir, "trajectory.csv", tr.to_csv())?;
    let last = tr.records.last().expect("trajectories start with the initial state");
    let min_norm = min_norm_solution(&p).ok().map(|w| w.norm());
    let summary = json!({
        "mode": run.mode,
        "dt": tr.dt,
        "records": tr.records.len(),
        "final_t": last.t,
        "final_loss": last.loss,
        "final_frob_norm": last.frob_norm,
        "final_rank": last.rank,
        "min_norm_frob": min_norm,
        "distance_to_min_norm": last.distance_to_min_norm,
    });
    write(&run.output_dir, "summary.json", to_json(&summary)? + "\n")?;
    let mut out = vec![
        format!("dt={}", tr.dt),
        format!("records={}", tr.records.len()),
        format!("final_t={}", last.t),
        format!("final_loss={}", last.loss),
    ];
    if let Some(d) = last.distance_to_min_norm {
        out.push(format!("distance_to_min_norm={d}"));
    }
    out.push(format!("output_dir={}", run.output_dir.display()));
    Ok(out)
}

struct Tally {
    name: &'static str,
    worst: f64,
    tol: f64,
    /// The check passes when `worst > tol` instead of `≤`.
    exceed: bool,
}

impl Tally {
    fn new(name: &'static str, tol: f64, exceed: bool) -> Self {
        Tally { name, worst: if exceed { f64::INFINITY } else { 0.0 }, tol, exceed }
    }

    fn see(&mut self, v: f64) {
        self.worst = if self.exceed { self.worst.min(v) } else { self.worst.max(v) };
    }

    fn passed(&self) -> bool {
        if self.exceed {
            self.worst > self.tol
        } else {
            self.worst <= self.tol
        }
    }
}

/// Random checks of the global-similarity identities: the convolution
/// operator matrix against im2col convolution, diagonal masks against
/// masking the input, local and global similarity at one position and
/// their disagreement on a 2×2 map, and the graph form of self-attention
/// against its numeric form.
pub fn attn_demo_cmd(seed: u64, trials: usize) -> Result<(Vec<String>, bool)> {
    let mut rng = substream(seed, 0);
    use rand::Rng as _;
    let mut conv = Tally::new("conv_as_matrix_vs_im2col", 1e-12, false);
    let mut mask = Tally::new("diagonal_mask_vs_hadamard", 1e-12, false);
    let mut single = Tally::new("lns_equals_gns_at_m1", 1e-12, false);
    let mut counter = Tally::new("lns_differs_from_gns_at_m2", 1e-6, true);
    let mut attn = Tally::new("attention_graph_vs_numeric", 1e-10, false);
    for _ in 0..trials {
        let m = rng.random_range(1..=5usize);
        let c = rng.random_range(1..=3usize);
        let k = if m >= 2 && rng.random_bool(0.5) { 3 } else { 1 };
        let w = Tensor::randn(&[c, k, k], 1.0, &mut rng);
        let x = Tensor::randn(&[c, m, m], 1.0, &mut rng);
        let op = conv_as_matrix(&w, m, Padding::Zero)?;
        let direct = lns_forward(&w, &SimilarityMatrix::identity(c, k * k), &x)?;
        conv.see(op.apply(x.data())?.max_abs_diff(&direct));

        let d: Vec<f64> = (0..m * m).map(|_| rng.random_range(-2.0..2.0)).collect();
        let masked = Tensor::from_fn(x.shape(), |i| x.data()[i] * d[i % (m * m)]);
        let via = gns_forward(&op, &GlobalSimilarity::DiagonalMask { m, c, mask: d }, &x)?;
        mask.see(via.max_abs_diff(&op.apply(masked.data())?));

        let w1 = Tensor::randn(&[c, 1, 1], 1.0, &mut rng);
        let x1 = Tensor::randn(&[c, 1, 1], 1.0, &mut rng);
        let mm = Tensor::randn(&[c, c], 1.0, &mut rng);
        let lns = lns_forward(&w1, &SimilarityMatrix::unconstrained(c, 1, mm.clone())?, &x1)?;
        let gns = gns_forward(&conv_as_matrix(&w1, 1, Padding::Zero)?, &GlobalSimilarity::Dense { m: 1, c, matrix: mm }, &x1)?;
        single.see(lns.max_abs_diff(&gns));

        let w2 = Tensor::randn(&[1, 3, 3], 1.0, &mut rng);
        let x2 = Tensor::randn(&[1, 2, 2], 1.0, &mut rng);
        let d2: Vec<f64> = (0..4).map(|_| rng.random_range(0.5..2.0)).collect();
        let lns = lns_forward(&w2, &SimilarityMatrix::diagonal(1, mask_seen_from(&d2, 2, 3, 0, 0)), &x2)?;
        let gns = gns_forward(&conv_as_matrix(&w2, 2, Padding::Zero)?, &GlobalSimilarity::DiagonalMask { m: 2, c: 1, mask: d2 }, &x2)?;
        counter.see(lns.max_abs_diff(&gns));

        let kk = rng.random_range(1..=3usize);
        let wa = Tensor::randn(&[kk, c, k, k], 1.0, &mut rng);
        let g1 = Tensor::randn(&[c, c], 1.0, &mut rng);
        let g2 = Tensor::randn(&[c, c], 1.0, &mut rng);
        for softmax in [false, true] {
            let want = self_attention_forward(&wa, &g1, &g2, &x, softmax)?;
            let mut g = Graph::new();
            let ids: Vec<_> = [&wa, &g1, &g2, &x].iter().map(|t| g.constant((*t).clone())).collect();
            let y = self_attention_nodes(&mut g, ids[0], ids[1], ids[2], ids[3], softmax)?;
            attn.see(g.value(y).max_abs_diff(&want) / want.data().iter().fold(1.0f64, |a, v| a.max(v.abs())));
        }
    }
    let mut ok = true;
    let lines = [conv, mask, single, counter, attn]
        .iter()
        .map(|t| {
            ok &= t.passed();
            let rel = if t.exceed { ">" } else { "<=" };
            format!(
                "check={} value={:.3e} want{}{:e} status={}",
                t.name,
                t.worst,
                rel,
                t.tol,
                if t.passed() { "pass" } else { "fail" }
            )
        })
        .collect();
    Ok((lines, ok))
}
