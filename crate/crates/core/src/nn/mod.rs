//! Similarity convolution networks: layers, predictors, specs and models.

pub mod layers;
pub mod model;
pub mod params;
pub mod predictor;
pub mod spec;

pub use layers::Mode;
pub use model::{mask_name, quadratic_toy_forward, shadow_name, sim_param_name, Forward, Model};
pub use params::{Bindings, ParamGroup, ParamStore};
pub use predictor::{adapt_input, sphere_conv, Adapter, AdapterRegistry, SphereMode, SpherePredictor};
pub use spec::{build_preset, LayerSpec, NetworkSpec, NormMode, PredictorSpec, Preset, SimilaritySpec, Variant, Wiring};
