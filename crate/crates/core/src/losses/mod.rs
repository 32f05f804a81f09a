//! Contrastive and gap-closing objectives with analytic gradients.
//!
//! Every loss consumes row-normalized embeddings and returns gradients with
//! respect to those unit rows. Callers that start from raw encoder outputs
//! chain the gradients through [`crate::embedding::normalize_rows_backward`];
//! [`gradcheck::evaluate_raw`] does exactly that for verification.

mod contrastive;
mod gap;
pub mod gradcheck;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use contrastive::{clip_bidirectional, clip_directional};
pub use gap::{atp_loss, combined_loss, combined_loss_with_parts, cu_loss, gap_loss, LossParts};

/// Temperature of the fixed-temperature baseline.
pub const FIXED_TAU: f64 = 0.07;

/// Lower clamp for the temperature.
pub const MIN_TAU: f64 = 0.01;

/// Softmax temperature dividing the cosine logits.
///
/// A learnable temperature is optimized through `log(tau)` and clamped to
/// `min_value`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Temperature {
    value: f64,
    learnable: bool,
    min_value: f64,
}

impl Temperature {
    pub fn fixed(value: f64) -> Result<Self> {
        Self::build(value, false, MIN_TAU)
    }

    pub fn learnable(value: f64) -> Result<Self> {
        Self::build(value, true, MIN_TAU)
    }

    pub fn build(value: f64, learnable: bool, min_value: f64) -> Result<Self> {
        if !(min_value > 0.0) || !min_value.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "temperature clamp must be positive, got {min_value}"
            )));
        }
        if !value.is_finite() || value < min_value {
            return Err(Error::InvalidArgument(format!(
                "temperature {value} below clamp {min_value}"
            )));
        }
        Ok(Self {
            value,
            learnable,
            min_value,
        })
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn is_learnable(&self) -> bool {
        self.learnable
    }

    pub fn min_value(&self) -> f64 {
        self.min_value
    }

    pub fn log_value(&self) -> f64 {
        self.value.ln()
    }

    /// Sets `tau = exp(log_tau)`, clamped to the minimum.
    pub fn set_log_value(&mut self, log_tau: f64) {
        self.value = log_tau.exp().max(self.min_value);
    }

    pub(crate) fn with_value(&self, value: f64) -> Self {
        Self { value, ..*self }
    }
}

/// Scalar loss plus one gradient matrix per input batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub value: f64,
    pub grads: Vec<Array2<f64>>,
    /// `dL/dtau`, present only for a learnable temperature.
    pub temp_grad: Option<f64>,
}

impl LossResult {
    pub(crate) fn zeros(m: usize, b: usize, d: usize) -> Self {
        Self {
            value: 0.0,
            grads: vec![Array2::zeros((b, d)); m],
            temp_grad: None,
        }
    }

    /// Adds `weight * other` into `self`.
    pub(crate) fn add_scaled(&mut self, weight: f64, other: &LossResult) {
        self.value += weight * other.value;
        for (g, o) in self.grads.iter_mut().zip(&other.grads) {
            g.scaled_add(weight, o);
        }
        if let Some(t) = other.temp_grad {
            *self.temp_grad.get_or_insert(0.0) += weight * t;
        }
    }
}

/// Weights of the ATP, CU and contrastive terms. The defaults give the plain
/// unweighted objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_atp: f64,
    pub w_cu: f64,
    pub w_contrastive: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_atp: 1.0,
            w_cu: 1.0,
            w_contrastive: 1.0,
        }
    }
}

impl LossWeights {
    pub fn new(w_atp: f64, w_cu: f64, w_contrastive: f64) -> Result<Self> {
        let w = Self {
            w_atp,
            w_cu,
            w_contrastive,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("w_atp", self.w_atp),
            ("w_cu", self.w_cu),
            ("w_contrastive", self.w_contrastive),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Training objectives selectable from the CLI and config files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// Contrastive loss with a learnable temperature.
    ClipLt,
    /// Contrastive loss with the temperature fixed at 0.07.
    ClipFt,
    /// Contrastive loss plus ATP and CU.
    Gap,
    /// ATP alone.
    AtpOnly,
    /// CU alone.
    CuOnly,
}

impl Objective {
    pub const ALL: [Objective; 5] = [
        Objective::ClipLt,
        Objective::ClipFt,
        Objective::Gap,
        Objective::AtpOnly,
        Objective::CuOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Objective::ClipLt => "clip-lt",
            Objective::ClipFt => "clip-ft",
            Objective::Gap => "gap",
            Objective::AtpOnly => "atp-only",
            Objective::CuOnly => "cu-only",
        }
    }

    /// Term weights implied by the objective.
    pub fn weights(self) -> LossWeights {
        match self {
            Objective::ClipLt | Objective::ClipFt => LossWeights::new(0.0, 0.0, 1.0),
            Objective::Gap => LossWeights::new(1.0, 1.0, 1.0),
            Objective::AtpOnly => LossWeights::new(1.0, 0.0, 0.0),
            Objective::CuOnly => LossWeights::new(0.0, 1.0, 0.0),
        }
        .expect("static weights are valid")
    }

    /// Whether the temperature is learned by default under this objective.
    pub fn learnable_tau(self) -> bool {
        matches!(self, Objective::ClipLt)
    }

    pub fn uses_contrastive(self) -> bool {
        self.weights().w_contrastive > 0.0
    }
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Objective::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown objective '{s}'")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn temperature_clamps() {
        let mut t = Temperature::learnable(0.07).unwrap();
        t.set_log_value((0.001f64).ln());
        assert_eq!(t.value(), MIN_TAU);
        assert!(Temperature::fixed(0.0).is_err());
        assert!(Temperature::fixed(0.005).is_err());
    }

    #[test]
    fn objective_names_round_trip() {
        for o in Objective::ALL {
            assert_eq!(o.name().parse::<Objective>().unwrap(), o);
            let json = serde_json::to_string(&o).unwrap();
            assert_eq!(json, format!("\"{}\"", o.name()));
        }
        assert!("bogus".parse::<Objective>().is_err());
    }

    #[test]
    fn negative_weight_rejected() {
        assert!(LossWeights::new(-1.0, 0.0, 0.0).is_err());
    }
}
