//! Run configurations: JSON files with every key checked, resolved with
//! command-line overrides and saved beside the outputs.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use nsl_core::checkpoint::Checkpoint;
use nsl_core::data::{load_idx_dataset, split, synth_dataset, Dataset, SynthSpec};
use nsl_core::fewshot::{FinetuneConfig, MetaConfig, Strategy};
use nsl_core::gradflow::FlowMode;
use nsl_core::nn::{build_preset, LayerSpec, Model, NetworkSpec, Preset, SimilaritySpec};
use nsl_core::similarity::SimilarityKind;
use nsl_core::train::TrainConfig;
use nsl_core::{Error, Result};

pub const CONFIG_FILE: &str = "config.json";

/// Where images come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synth {
        spec: SynthSpec,
        /// Fraction held out for testing, split with the run seed.
        #[serde(default = "quarter")]
        test_fraction: f64,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default)]
        test_images: Option<PathBuf>,
        #[serde(default)]
        test_labels: Option<PathBuf>,
        /// Used only without separate test files.
        #[serde(default)]
        test_fraction: f64,
    },
}

fn quarter() -> f64 {
    0.25
}

impl DataSource {
    pub fn synth(classes: usize, per_class: usize) -> Self {
        DataSource::Synth { spec: SynthSpec::new(classes, per_class), test_fraction: quarter() }
    }

    /// Training set and, when configured, a test set.
    pub fn load(&self, seed: u64) -> Result<(Dataset, Option<Dataset>)> {
        let (full, fraction, test) = match self {
            DataSource::Synth { spec, test_fraction } => (synth_dataset(spec, seed)?, *test_fraction, None),
            DataSource::Idx { images, labels, test_images, test_labels, test_fraction } => {
                let test = match (test_images, test_labels) {
                    (Some(i), Some(l)) => Some(load_idx_dataset(i, l)?),
                    (None, None) => None,
                    _ => return Err(Error::Configuration("test_images and test_labels go together".into())),
                };
                (load_idx_dataset(images, labels)?, *test_fraction, test)
            }
        };
        if test.is_some() {
            return Ok((full, test));
        }
        if fraction > 0.0 {
            let (train, test) = split(&full, fraction, seed)?;
            return Ok((train, Some(test)));
        }
        Ok((full, None))
    }
}

/// A network by preset name (optionally with a similarity applied to every
/// convolution) or written out in full.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkChoice {
    /// `small`, `CNN-4`, `CNN-9`, `CNN-10`, `baselineCNN` or `baselineCNN++`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub similarity: Option<SimilaritySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<NetworkSpec>,
}

/// Two conv-bn-relu-pool stages and a classifier; fits 8×8 and larger inputs.
pub fn small_net(input: [usize; 3], classes: usize) -> NetworkSpec {
    let mut layers = Vec::new();
    for w in [8, 16] {
        layers.extend([LayerSpec::conv(w, 3, 1), LayerSpec::BatchNorm {}, LayerSpec::Relu {}]);
        layers.push(LayerSpec::MaxPool { size: 2, stride: 2 });
    }
    layers.push(LayerSpec::Classifier { classes });
    NetworkSpec::new(input, layers)
}

impl NetworkChoice {
    pub fn preset(name: &str, similarity: Option<SimilaritySpec>) -> Self {
        NetworkChoice { preset: Some(name.to_string()), similarity, spec: None }
    }

    pub fn build(&self, input: [usize; 3], classes: usize) -> Result<NetworkSpec> {
        let base = match (&self.preset, &self.spec) {
            (Some(_), Some(_)) => return Err(Error::Configuration("give either network.preset or network.spec".into())),
            (None, Some(spec)) => {
                if spec.input != input || spec.classes() != classes {
                    return Err(Error::Configuration(format!(
                        "network expects {:?} inputs and {} classes, data has {input:?} and {classes}",
                        spec.input,
                        spec.classes()
                    )));
                }
                spec.clone()
            }
            (Some(p), None) if p == "small" => small_net(input, classes),
            (Some(p), None) => build_preset(p.parse::<Preset>()?, input, classes)?,
            (None, None) => small_net(input, classes),
        };
        let spec = match &self.similarity {
            Some(s) => base.with_similarity(s),
            None => base,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Copy every tensor of a checkpoint into `model` by name. Entries the
/// model lacks, or whose shapes differ, are errors; model parameters the
/// checkpoint lacks (similarities of a plain checkpoint) keep their values.
/// Nothing changes on error.
pub fn load_pretrained(model: &mut Model, path: &Path) -> Result<usize> {
    let ck = Checkpoint::load(path)?;
    let mut params = model.params.clone();
    let mut n = 0;
    for (name, t) in ck.params.iter() {
        let p = params
            .get_mut(name)
            .map_err(|_| Error::Configuration(format!("pretrained parameter {name} has no place in this network")))?;
        if p.shape() != t.shape() {
            return Err(Error::Configuration(format!(
                "pretrained {name} has shape {:?}, network expects {:?}",
                t.shape(),
                p.shape()
            )));
        }
        *p = t.clone();
        n += 1;
    }
    for (name, t) in ck.params.buffers() {
        let b = params
            .buffer_mut(name)
            .map_err(|_| Error::Configuration(format!("pretrained buffer {name} has no place in this network")))?;
        if b.shape() != t.shape() {
            return Err(Error::Configuration(format!("pretrained buffer {name} has shape {:?}", t.shape())));
        }
        *b = t.clone();
    }
    *model = Model::from_params(model.spec().clone(), params)?;
    Ok(n)
}

fn default_out() -> PathBuf {
    PathBuf::from("nsl-out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRun {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
    #[serde(default = "default_train_data")]
    pub data: DataSource,
    #[serde(default)]
    pub network: NetworkChoice,
    #[serde(default)]
    pub train: TrainConfig,
    /// Epochs of the two-phase pretrained recipe: similarities only, then
    /// everything.
    #[serde(default)]
    pub phases: Option<[usize; 2]>,
    #[serde(default)]
    pub pretrained: Option<PathBuf>,
}

fn default_train_data() -> DataSource {
    DataSource::synth(4, 24)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRun {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
    #[serde(default = "default_train_data")]
    pub data: DataSource,
    pub checkpoint: PathBuf,
}

fn d_episodes() -> usize {
    20
}

fn default_fewshot_data() -> DataSource {
    DataSource::Synth { spec: SynthSpec::new(10, 20), test_fraction: 0.0 }
}

fn d_base() -> usize {
    5
}

fn d_pretrain() -> TrainConfig {
    TrainConfig { epochs: 5, batch_size: 16, lr: 0.05, ..TrainConfig::default() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FewshotRun {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
    pub strategy: Strategy,
    #[serde(default = "default_fewshot_data")]
    pub data: DataSource,
    /// Classes `0..base_classes` pretrain the network (and meta-train);
    /// episodes draw from the rest.
    #[serde(default = "d_base")]
    pub base_classes: usize,
    /// Defaults to the small network with an unconstrained static
    /// similarity (static, meta) or a DNS predictor (dynamic).
    #[serde(default)]
    pub network: Option<NetworkChoice>,
    #[serde(default = "d_pretrain")]
    pub pretrain: TrainConfig,
    #[serde(default)]
    pub pretrained: Option<PathBuf>,
    #[serde(default = "d_episodes")]
    pub episodes: usize,
    #[serde(default = "d_ways")]
    pub ways: usize,
    #[serde(default = "d_shots")]
    pub shots: usize,
    #[serde(default = "d_queries")]
    pub queries: usize,
    #[serde(default)]
    pub finetune: FinetuneConfig,
    #[serde(default)]
    pub meta: MetaConfig,
}

fn d_ways() -> usize {
    5
}
fn d_shots() -> usize {
    5
}
fn d_queries() -> usize {
    10
}

impl FewshotRun {
    pub fn network_choice(&self) -> NetworkChoice {
        self.network.clone().unwrap_or_else(|| {
            let similarity = match self.strategy {
                Strategy::Dynamic => SimilaritySpec::Dynamic {
                    predictor: nsl_core::nn::PredictorSpec::new(nsl_core::nn::Variant::Dns),
                },
                Strategy::Static | Strategy::Meta => SimilaritySpec::Static { kind: SimilarityKind::Unconstrained },
            };
            NetworkChoice::preset("small", Some(similarity))
        })
    }
}

fn d_samples() -> usize {
    3
}
fn d_n() -> usize {
    5
}
fn d_m() -> usize {
    2
}
fn d_dt() -> f64 {
    1e-3
}
fn d_steps() -> usize {
    20_000
}
fn d_stop() -> f64 {
    1e-12
}
fn d_wp_std() -> f64 {
    1e-3
}
fn d_halvings() -> usize {
    8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradflowRun {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub mode: FlowMode,
    /// A random consistent problem with `samples` points in `n` dimensions
    /// and `m` targets.
    #[serde(default = "d_samples")]
    pub samples: usize,
    #[serde(default = "d_n")]
    pub n: usize,
    #[serde(default = "d_m")]
    pub m: usize,
    #[serde(default = "d_dt")]
    pub dt: f64,
    #[serde(default = "d_steps")]
    pub steps: usize,
    #[serde(default = "d_stop")]
    pub stop_tol: f64,
    #[serde(default = "d_wp_std")]
    pub wp_std: f64,
    #[serde(default = "d_halvings")]
    pub max_halvings: usize,
}

pub fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io_at(e, path))?;
    serde_json::from_str(&text).map_err(|e| Error::Configuration(format!("{}: {e}", path.display())))
}

/// Parse `{}`-style defaults for a run type without a file.
pub fn defaults<T: DeserializeOwned>(json: &str) -> Result<T> {
    serde_json::from_str(json).map_err(|e| Error::Configuration(e.to_string()))
}

pub fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::Format(e.to_string()))
}

/// Create `dir` and write the resolved configuration into it.
pub fn save_resolved<T: Serialize>(dir: &Path, cfg: &T) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(CONFIG_FILE), to_json(cfg)? + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        assert!(defaults::<TrainRun>(r#"{"seed": 1, "epohcs": 3}"#).is_err());
        assert!(defaults::<TrainRun>(r#"{"train": {"epohcs": 3}}"#).is_err());
        assert!(defaults::<TrainRun>(r#"{"data": {"source": "synth", "spec": {"classes": 2, "per_class": 2, "nosie": 0}}}"#).is_err());
        assert!(defaults::<GradflowRun>(r#"{"mode": "nsl", "dtt": 1}"#).is_err());
        assert!(defaults::<FewshotRun>(r#"{"strategy": "meta", "meta": {"outer": 1}}"#).is_err());
        let r: TrainRun = defaults("{}").unwrap();
        assert_eq!(r, defaults::<TrainRun>(&to_json(&r).unwrap()).unwrap());
    }

    #[test]
    fn network_choice_builds() {
        let n = NetworkChoice::default().build([1, 12, 12], 4).unwrap();
        assert_eq!(n.classes(), 4);
        let s = NetworkChoice::preset("CNN-9", Some(SimilaritySpec::Static { kind: SimilarityKind::Diagonal }))
            .build([3, 32, 32], 10)
            .unwrap();
        assert_eq!(s.conv_count(), 9);
        assert!(NetworkChoice::preset("resnet", None).build([1, 12, 12], 4).is_err());
        let spec = small_net([1, 8, 8], 2);
        let c = NetworkChoice { spec: Some(spec), ..Default::default() };
        assert!(c.build([1, 8, 8], 3).is_err());
        assert!(c.build([1, 8, 8], 2).is_ok());
    }
}
