use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{PairedSplit, SyntheticDataset};
use super::encoder::{EncoderModel, InitScale};
use super::optim::{AdamState, AdamW};
use crate::embedding::{EmbeddingBatch, MultimodalBatch};
use crate::error::{Error, Result};
use crate::losses::{
    atp_loss, combined_loss_with_parts, LossParts, LossWeights, Objective, Temperature, FIXED_TAU,
    MIN_TAU,
};
use crate::metrics::{alignment_report, AlignmentReport, ReportOptions};

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: Objective,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub tau_init: f64,
    pub learnable_tau: bool,
    pub weights: LossWeights,
    pub seed: u64,
    pub eval_every: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    pub init: InitScale,
    pub anchor: usize,
    /// Apply ATP to the encoder outputs before row normalization.
    pub atp_unnormalized: bool,
    pub report: ReportOptions,
}

impl TrainConfig {
    /// Small, CPU-friendly defaults.
    pub fn desk(objective: Objective) -> Self {
        Self {
            objective,
            epochs: 50,
            batch_size: 128,
            lr: 1e-3,
            weight_decay: 0.01,
            tau_init: FIXED_TAU,
            learnable_tau: objective.learnable_tau(),
            weights: objective.weights(),
            seed: 0,
            eval_every: 5,
            hidden: 128,
            embed_dim: 32,
            init: InitScale::default(),
            anchor: 0,
            atp_unnormalized: false,
            report: ReportOptions::default(),
        }
    }

    /// Long schedule: 100 epochs, lr 1e-4, 512-d latent space.
    pub fn full_scale(objective: Objective) -> Self {
        Self {
            epochs: 100,
            lr: 1e-4,
            embed_dim: 512,
            ..Self::desk(objective)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: String| Err(Error::InvalidArgument(what));
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if self.eval_every == 0 {
            return bad("eval_every must be >= 1".into());
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            ));
        }
        if self.hidden == 0 || self.embed_dim < 2 {
            return bad("hidden must be >= 1 and embed_dim >= 2".into());
        }
        if !(self.tau_init >= MIN_TAU) {
            return bad(format!(
                "tau_init must be >= {MIN_TAU}, got {}",
                self.tau_init
            ));
        }
        self.weights.validate()
    }
}

/// One held-out evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    pub epoch: usize,
    /// Mean training loss of the epoch just finished; absent at step 0.
    pub train_loss: Option<f64>,
    pub parts: Option<LossParts>,
    pub tau: f64,
    pub report: AlignmentReport,
}

/// Mean training loss of one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
    pub parts: LossParts,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub records: Vec<EvalRecord>,
    pub epoch_losses: Vec<EpochLoss>,
}

impl TrainingHistory {
    /// Evaluation records as JSON Lines.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn first(&self) -> Option<&EvalRecord> {
        self.records.first()
    }

    pub fn last(&self) -> Option<&EvalRecord> {
        self.records.last()
    }
}

/// Everything needed to resume or reproduce a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub encoders: Vec<EncoderModel>,
    pub tau: Temperature,
    pub optimizer: AdamState,
    pub tau_optimizer: AdamState,
    pub rng: ChaCha8Rng,
    pub step: u64,
    pub epoch: usize,
}

/// Loss of a single optimization step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub parts: LossParts,
}

/// Seed of modality `i`'s encoder, distinct per modality.
pub fn encoder_seed(seed: u64, modality: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(0xD1B5_4A32_D192_ED03u64.wrapping_mul(modality as u64 + 1))
}

impl TrainState {
    /// Fresh encoders and optimizer state for features of the given widths.
    pub fn init(config: &TrainConfig, d_feat: &[usize]) -> Result<Self> {
        config.validate()?;
        if config.anchor >= d_feat.len() {
            return Err(Error::InvalidArgument(format!(
                "anchor {} out of range for {} modalities",
                config.anchor,
                d_feat.len()
            )));
        }
        if config.weights.w_contrastive > 0.0 && d_feat.len() != 2 {
            return Err(Error::Unsupported(format!(
                "objective {} needs exactly two modalities",
                config.objective
            )));
        }
        let encoders: Vec<EncoderModel> = d_feat
            .iter()
            .enumerate()
            .map(|(i, &df)| {
                EncoderModel::mlp(
                    df,
                    config.hidden,
                    config.embed_dim,
                    config.init,
                    encoder_seed(config.seed, i),
                )
            })
            .collect();
        let sizes: Vec<usize> = encoders
            .iter()
            .flat_map(|e| e.layers.iter().flat_map(|l| [l.weight.len(), l.bias.len()]))
            .collect();
        Ok(Self {
            config: config.clone(),
            tau: Temperature::build(config.tau_init, config.learnable_tau, MIN_TAU)?,
            optimizer: AdamState::new(&sizes),
            tau_optimizer: AdamState::new(&[1]),
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED_5EED_5EED_5EED),
            encoders,
            step: 0,
            epoch: 0,
        })
    }

    /// Forward, backward and one AdamW update on the given training rows.
    pub fn step_batch(&mut self, split: &PairedSplit, rows: &[usize]) -> Result<StepOutcome> {
        let cfg = &self.config;
        let mut units = Vec::with_capacity(self.encoders.len());
        let mut caches = Vec::with_capacity(self.encoders.len());
        for (enc, feats) in self.encoders.iter().zip(&split.features) {
            let (unit, cache) = enc.forward(&feats.select(Axis(0), rows))?;
            units.push(unit);
            caches.push(cache);
        }
        let batch = MultimodalBatch::new(units, cfg.anchor)?;

        let mut weights = cfg.weights;
        if cfg.atp_unnormalized {
            weights.w_atp = 0.0;
        }
        let (result, mut parts) = combined_loss_with_parts(&batch, &self.tau, &weights)?;
        let mut loss = result.value;
        let mut raw_grads: Vec<Array2<f64>> = caches
            .iter()
            .zip(&result.grads)
            .map(|(c, g)| c.unit_grad_to_raw(g))
            .collect();
        if cfg.atp_unnormalized && cfg.weights.w_atp > 0.0 {
            let raw = caches
                .iter()
                .map(|c| EmbeddingBatch::new(c.raw.clone()))
                .collect::<Result<Vec<_>>>()?;
            let atp = atp_loss(&MultimodalBatch::new(raw, cfg.anchor)?)?;
            parts.atp = Some(atp.value);
            loss += cfg.weights.w_atp * atp.value;
            for (g, a) in raw_grads.iter_mut().zip(&atp.grads) {
                g.scaled_add(cfg.weights.w_atp, a);
            }
        }
        self.check_finite(loss, &parts)?;

        let grads = self
            .encoders
            .iter()
            .zip(&caches)
            .zip(&raw_grads)
            .map(|((e, c), g)| e.backward_raw(c, g))
            .collect::<Result<Vec<_>>>()?;
        let opt = AdamW {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..AdamW::default()
        };
        let grad_slices: Vec<&[f64]> = grads.iter().flat_map(|g| g.slices()).collect();
        let mut params: Vec<&mut [f64]> = self
            .encoders
            .iter_mut()
            .flat_map(|e| e.param_slices_mut())
            .collect();
        opt.step(&mut params, &grad_slices, &mut self.optimizer)?;

        if self.tau.is_learnable() {
            if let Some(dtau) = result.temp_grad {
                let tau_opt = AdamW {
                    lr: cfg.lr,
                    weight_decay: 0.0,
                    ..AdamW::default()
                };
                let mut log_tau = [self.tau.log_value()];
                tau_opt.step(
                    &mut [&mut log_tau],
                    &[&[dtau * self.tau.value()]],
                    &mut self.tau_optimizer,
                )?;
                self.tau.set_log_value(log_tau[0]);
            }
        }
        self.step += 1;
        Ok(StepOutcome { loss, parts })
    }

    fn check_finite(&self, loss: f64, parts: &LossParts) -> Result<()> {
        if loss.is_finite() {
            return Ok(());
        }
        let component = [
            ("contrastive", parts.contrastive),
            ("atp", parts.atp),
            ("cu", parts.cu),
        ]
        .into_iter()
        .find(|(_, v)| v.is_some_and(|x| !x.is_finite()))
        .map_or("total", |(n, _)| n);
        Err(Error::Numeric {
            step: self.step,
            component: component.into(),
            detail: format!("loss = {loss}"),
        })
    }

    /// One pass over the training split in a freshly shuffled order. The
    /// last partial batch is dropped.
    pub fn run_epoch(&mut self, split: &PairedSplit) -> Result<EpochLoss> {
        let b = self.config.batch_size;
        if split.len() < b {
            return Err(Error::InvalidArgument(format!(
                "batch size {b} exceeds the {} training pairs",
                split.len()
            )));
        }
        let mut order: Vec<usize> = (0..split.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        let mut sums = [0.0f64; 3];
        let mut seen = [false; 3];
        let mut count = 0usize;
        for rows in order.chunks_exact(b) {
            let out = self.step_batch(split, rows)?;
            total += out.loss;
            for (k, v) in [out.parts.contrastive, out.parts.atp, out.parts.cu]
                .into_iter()
                .enumerate()
            {
                if let Some(v) = v {
                    sums[k] += v;
                    seen[k] = true;
                }
            }
            count += 1;
        }
        self.epoch += 1;
        let n = count as f64;
        let mean = |k: usize| seen[k].then(|| sums[k] / n);
        Ok(EpochLoss {
            epoch: self.epoch,
            step: self.step,
            loss: total / n,
            parts: LossParts {
                contrastive: mean(0),
                atp: mean(1),
                cu: mean(2),
            },
        })
    }

    /// Embeds a split with the current encoders.
    pub fn encode(&self, split: &PairedSplit) -> Result<MultimodalBatch> {
        encode_split(&self.encoders, split, self.config.anchor)
    }

    /// Report on the first two modalities of `split`.
    pub fn evaluate(&self, split: &PairedSplit) -> Result<AlignmentReport> {
        let batch = self.encode(split)?;
        let pair = MultimodalBatch::pair(batch.modality(0).clone(), batch.modality(1).clone())?;
        alignment_report(&pair, &self.config.report)
    }
}

/// Runs every encoder on its modality's features.
pub fn encode_split(
    encoders: &[EncoderModel],
    split: &PairedSplit,
    anchor: usize,
) -> Result<MultimodalBatch> {
    if encoders.len() != split.num_modalities() {
        return Err(Error::ShapeMismatch(format!(
            "{} encoders for {} modalities",
            encoders.len(),
            split.num_modalities()
        )));
    }
    if split.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot encode an empty split".into(),
        ));
    }
    let units = encoders
        .iter()
        .zip(&split.features)
        .map(|(e, f)| e.forward(f).map(|(u, _)| u))
        .collect::<Result<Vec<_>>>()?;
    MultimodalBatch::new(units, anchor)
}

/// Result of [`train_run`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub state: TrainState,
    pub history: TrainingHistory,
}

/// Trains from scratch, evaluating on the test split at step 0, every
/// `eval_every` epochs and after the final epoch.
pub fn train_run(config: &TrainConfig, data: &SyntheticDataset) -> Result<TrainOutput> {
    let d_feat: Vec<usize> = data.train.features.iter().map(|f| f.ncols()).collect();
    let mut state = TrainState::init(config, &d_feat)?;
    let mut history = TrainingHistory::default();
    history.records.push(EvalRecord {
        step: 0,
        epoch: 0,
        train_loss: None,
        parts: None,
        tau: state.tau.value(),
        report: state.evaluate(&data.test)?,
    });
    for epoch in 1..=config.epochs {
        let summary = state.run_epoch(&data.train)?;
        if epoch % config.eval_every == 0 || epoch == config.epochs {
            history.records.push(EvalRecord {
                step: state.step,
                epoch,
                train_loss: Some(summary.loss),
                parts: Some(summary.parts),
                tau: state.tau.value(),
                report: state.evaluate(&data.test)?,
            });
        }
        history.epoch_losses.push(summary);
    }
    Ok(TrainOutput { state, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::data::{generate_synthetic, SyntheticDatasetSpec};

    fn tiny_data() -> SyntheticDataset {
        generate_synthetic(&SyntheticDatasetSpec {
            n_pairs: 120,
            d_semantic: 4,
            d_feat: vec![6, 5],
            ..SyntheticDatasetSpec::default()
        })
        .unwrap()
    }

    fn tiny_config(objective: Objective) -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 16,
            hidden: 8,
            embed_dim: 4,
            eval_every: 1,
            seed: 3,
            ..TrainConfig::desk(objective)
        }
    }

    #[test]
    fn zero_epochs_keeps_initial_encoders() {
        let data = tiny_data();
        let cfg = TrainConfig {
            epochs: 0,
            ..tiny_config(Objective::Gap)
        };
        let out = train_run(&cfg, &data).unwrap();
        assert_eq!(out.history.records.len(), 1);
        assert_eq!(out.history.records[0].step, 0);
        let fresh = TrainState::init(&cfg, &[6, 5]).unwrap();
        assert_eq!(out.state.encoders, fresh.encoders);
    }

    #[test]
    fn runs_are_deterministic() {
        let data = tiny_data();
        for objective in Objective::ALL {
            let a = train_run(&tiny_config(objective), &data).unwrap();
            let b = train_run(&tiny_config(objective), &data).unwrap();
            assert_eq!(a.history, b.history, "{objective}");
            assert_eq!(a.state, b.state);
        }
    }

    #[test]
    fn steps_strictly_increase() {
        let out = train_run(&tiny_config(Objective::ClipFt), &tiny_data()).unwrap();
        let steps: Vec<u64> = out.history.records.iter().map(|r| r.step).collect();
        assert!(steps.windows(2).all(|w| w[0] < w[1]), "{steps:?}");
        assert_eq!(out.history.epoch_losses.len(), 3);
        // 96 training pairs, batch 16 -> 6 steps per epoch
        assert_eq!(out.state.step, 18);
    }

    #[test]
    fn one_step_moves_every_tensor() {
        let data = tiny_data();
        let mut state = TrainState::init(&tiny_config(Objective::Gap), &[6, 5]).unwrap();
        let before = state.encoders.clone();
        let rows: Vec<usize> = (0..16).collect();
        state.step_batch(&data.train, &rows).unwrap();
        for (old, new) in before.iter().zip(&state.encoders) {
            for (lo, ln) in old.layers.iter().zip(&new.layers) {
                assert_ne!(lo.weight, ln.weight);
                assert_ne!(lo.bias, ln.bias);
            }
        }
    }

    #[test]
    fn learnable_tau_moves_only_under_clip_lt() {
        let data = tiny_data();
        let lt = train_run(&tiny_config(Objective::ClipLt), &data).unwrap();
        assert_ne!(lt.state.tau.value(), FIXED_TAU);
        let ft = train_run(&tiny_config(Objective::ClipFt), &data).unwrap();
        assert_eq!(ft.state.tau.value(), FIXED_TAU);
    }

    #[test]
    fn oversized_batch_rejected() {
        let cfg = TrainConfig {
            batch_size: 500,
            ..tiny_config(Objective::ClipFt)
        };
        assert!(train_run(&cfg, &tiny_data()).is_err());
    }

    #[test]
    fn contrastive_objectives_need_two_modalities() {
        let cfg = tiny_config(Objective::Gap);
        assert!(matches!(
            TrainState::init(&cfg, &[4, 4, 4]),
            Err(Error::Unsupported(_))
        ));
        assert!(TrainState::init(&tiny_config(Objective::AtpOnly), &[4, 4, 4]).is_ok());
    }

    #[test]
    fn unnormalized_atp_flag_trains() {
        let cfg = TrainConfig {
            atp_unnormalized: true,
            ..tiny_config(Objective::Gap)
        };
        let out = train_run(&cfg, &tiny_data()).unwrap();
        assert!(out.history.epoch_losses.iter().all(|e| e.loss.is_finite()));
    }
}
