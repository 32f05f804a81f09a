//! Versioned single-file checkpoints (JSON).
//!
//! Holds the resolved config, every parameter tensor by name and shape, both
//! optimizer states and the shuffling RNG, so a run can be resumed or
//! re-evaluated exactly.

use std::path::Path;

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::SyntheticDatasetSpec;
use super::encoder::{Dense, EncoderModel};
use super::optim::AdamState;
use super::run::{TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::io::{read_json, write_json};
use crate::losses::Temperature;

pub const CHECKPOINT_FORMAT: &str = "gapforge-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: TrainConfig,
    pub dataset: Option<SyntheticDatasetSpec>,
    pub step: u64,
    pub epoch: usize,
    pub tau: Temperature,
    pub params: Vec<NamedArray>,
    pub optimizer: AdamState,
    pub tau_optimizer: AdamState,
    pub rng: ChaCha8Rng,
}

impl Checkpoint {
    pub fn from_state(state: &TrainState, dataset: Option<&SyntheticDatasetSpec>) -> Self {
        let mut params = Vec::new();
        for (m, enc) in state.encoders.iter().enumerate() {
            for (k, layer) in enc.layers.iter().enumerate() {
                params.push(NamedArray {
                    name: format!("m{m}.layer{k}.weight"),
                    shape: layer.weight.shape().to_vec(),
                    data: layer.weight.iter().copied().collect(),
                });
                params.push(NamedArray {
                    name: format!("m{m}.layer{k}.bias"),
                    shape: vec![layer.bias.len()],
                    data: layer.bias.to_vec(),
                });
            }
        }
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: state.config.clone(),
            dataset: dataset.cloned(),
            step: state.step,
            epoch: state.epoch,
            tau: state.tau,
            params,
            optimizer: state.optimizer.clone(),
            tau_optimizer: state.tau_optimizer.clone(),
            rng: state.rng.clone(),
        }
    }

    /// Rebuilds the encoders from the named parameter arrays.
    pub fn encoders(&self) -> Result<Vec<EncoderModel>> {
        let bad = |detail: String| Error::format("checkpoint", detail);
        type Slot = (Option<Array2<f64>>, Option<Array1<f64>>);
        let mut encoders: Vec<Vec<Slot>> = Vec::new();
        for p in &self.params {
            let (m, k, kind) =
                parse_name(&p.name).ok_or_else(|| bad(format!("bad name {}", p.name)))?;
            if encoders.len() <= m {
                encoders.resize_with(m + 1, Vec::new);
            }
            if encoders[m].len() <= k {
                encoders[m].resize_with(k + 1, || (None, None));
            }
            let slot = &mut encoders[m][k];
            match (kind, p.shape.as_slice()) {
                ("weight", &[r, c]) => {
                    slot.0 = Some(
                        Array2::from_shape_vec((r, c), p.data.clone())
                            .map_err(|e| bad(format!("{}: {e}", p.name)))?,
                    );
                }
                ("bias", &[n]) if p.data.len() == n => slot.1 = Some(Array1::from(p.data.clone())),
                _ => return Err(bad(format!("bad shape {:?} for {}", p.shape, p.name))),
            }
        }
        encoders
            .into_iter()
            .enumerate()
            .map(|(m, layers)| {
                let layers = layers
                    .into_iter()
                    .enumerate()
                    .map(|(k, slot)| match slot {
                        (Some(weight), Some(bias)) => Ok(Dense { weight, bias }),
                        _ => Err(bad(format!("encoder {m} layer {k} incomplete"))),
                    })
                    .collect::<Result<Vec<_>>>()?;
                EncoderModel::from_layers(layers)
            })
            .collect()
    }

    pub fn into_state(self) -> Result<TrainState> {
        let encoders = self.encoders()?;
        Ok(TrainState {
            config: self.config,
            encoders,
            tau: self.tau,
            optimizer: self.optimizer,
            tau_optimizer: self.tau_optimizer,
            rng: self.rng,
            step: self.step,
            epoch: self.epoch,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Checkpoint = read_json(path)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::format(
                path,
                format!("not a checkpoint (format '{}')", ck.format),
            ));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::format(
                path,
                format!("unsupported checkpoint version {}", ck.version),
            ));
        }
        Ok(ck)
    }
}

fn parse_name(name: &str) -> Option<(usize, usize, &str)> {
    let mut it = name.split('.');
    let m = it.next()?.strip_prefix('m')?.parse().ok()?;
    let k = it.next()?.strip_prefix("layer")?.parse().ok()?;
    let kind = it.next()?;
    it.next().is_none().then_some((m, k, kind))
}
