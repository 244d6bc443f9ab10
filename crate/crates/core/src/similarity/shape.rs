use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

pub const DEFAULT_ALPHA: f64 = 0.5;
pub const DEFAULT_SHADOW_INIT: f64 = 1.0;

/// Real-valued shadow `D_r` of a 0/1 kernel-shape mask.
///
/// Only the thresholded mask takes part in computation; gradients with
/// respect to the mask are applied to the shadow.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeShadow {
    pub d_r: Vec<f64>,
    pub alpha: f64,
}

/// `d_i = 1` iff `d_r[i] > alpha`.
pub fn shape_mask(d_r: &[f64], alpha: f64) -> Vec<f64> {
    d_r.iter().map(|&v| if v > alpha { 1.0 } else { 0.0 }).collect()
}

impl ShapeShadow {
    pub fn new(d_r: Vec<f64>, alpha: f64) -> Self {
        ShapeShadow { d_r, alpha }
    }

    /// Full kernel shape: every entry at 1.0, threshold 0.5.
    pub fn full(patch: usize) -> Self {
        ShapeShadow { d_r: vec![DEFAULT_SHADOW_INIT; patch], alpha: DEFAULT_ALPHA }
    }

    pub fn len(&self) -> usize {
        self.d_r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d_r.is_empty()
    }

    pub fn mask(&self) -> Vec<f64> {
        shape_mask(&self.d_r, self.alpha)
    }

    /// `D_r ← D_r − η·∂L/∂D`.
    pub fn update(&self, grad_d: &[f64], eta: f64) -> Result<ShapeShadow> {
        if !(eta > 0.0) {
            return Err(Error::Argument(format!("shadow learning rate must be positive, got {eta}")));
        }
        if grad_d.len() != self.d_r.len() {
            return shape_err(format!(
                "mask gradient has length {}, shadow has {}",
                grad_d.len(),
                self.d_r.len()
            ));
        }
        let d_r = self.d_r.iter().zip(grad_d).map(|(d, g)| d - eta * g).collect();
        Ok(ShapeShadow { d_r, alpha: self.alpha })
    }
}
