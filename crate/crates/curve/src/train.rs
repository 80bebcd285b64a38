//! Training configuration, deterministic splits, the batch objective, and
//! the Adam training loop.

use crate::checkpoint::{AdamState, Checkpoint};
use crate::error::{CurveError, Result};
use crate::model::{
    forward_sequence, AblationMode, BoundModel, CurveModel, ForwardSettings, ModelDims,
    SequenceNoise, SequenceOutput,
};
use crate::objectives::{
    calibration_loss, kl_regularizer, prediction_loss, prototype_diversity_loss, total_objective,
    LossComponents, LossWeights,
};
use crate::optim::{Adam, AdamConfig};
use crate::reasoner::predicted_class;
use crate::rng::{derive_seed, rng_from};
use crate::scene::{Dataset, SequenceSample, SplitTag};
use crate::tensor::{Tape, Tensor, Var};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

const SALT_SPLIT: u64 = 0x73_70_6c_69_74;
const SALT_EPOCH: u64 = 0x65_70_6f_63_68;
const SALT_NOISE: u64 = 0x6e_6f_69_73_65;

/// Training hyperparameters. Defaults are the desk-scale configuration;
/// `paper_preset` restores the reference epoch budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub decoupled_weight_decay: bool,
    pub dropout: f64,
    pub hidden_dim: usize,
    /// train : test : validate fractions of the in-distribution pool.
    pub split: [f64; 3],
    pub seed: u64,
    pub k_topk: usize,
    pub tau: f64,
    pub loss: LossWeights,
    pub mode: AblationMode,
    /// Full layer-width override; when absent, widths derive from
    /// `hidden_dim`.
    pub dims: Option<ModelDims>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            epochs: 50,
            batch_size: 64,
            weight_decay: 0.1,
            decoupled_weight_decay: false,
            dropout: 0.5,
            hidden_dim: 64,
            split: [0.7, 0.2, 0.1],
            seed: 0,
            k_topk: 5,
            tau: 0.9,
            loss: LossWeights::default(),
            mode: AblationMode::Full,
            dims: None,
        }
    }
}

impl TrainConfig {
    /// Reference configuration: everything at its default except the epoch
    /// budget.
    pub fn paper_preset() -> Self {
        TrainConfig {
            epochs: 500,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(CurveError::Config("learning_rate must be positive".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.hidden_dim == 0 {
            return Err(CurveError::Config(
                "epochs, batch_size, and hidden_dim must be positive".into(),
            ));
        }
        if self.weight_decay < 0.0 {
            return Err(CurveError::Config("weight_decay must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CurveError::Config("dropout must be in [0, 1)".into()));
        }
        if self.split.iter().any(|s| *s <= 0.0)
            || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(CurveError::Config(format!(
                "split fractions must be positive and sum to 1, got {:?}",
                self.split
            )));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(CurveError::Config("tau must be in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn dims(&self) -> ModelDims {
        self.dims.unwrap_or(ModelDims {
            d: self.hidden_dim,
            rel: self.hidden_dim,
            enc_hidden: self.hidden_dim,
            proj_dim: self.hidden_dim,
            msg_hidden: self.hidden_dim,
            ..ModelDims::default()
        })
    }

    pub fn settings(&self) -> ForwardSettings {
        ForwardSettings {
            k_topk: self.k_topk,
            tau: self.tau,
            mode: self.mode,
        }
    }

    /// The mode-adjusted configuration used by the ablation study: the
    /// threshold-only mode scores against 0.6 and the no-uncertainty mode
    /// drops the calibration term.
    pub fn for_mode(&self, mode: AblationMode) -> Self {
        let mut cfg = *self;
        cfg.mode = mode;
        match mode {
            AblationMode::ThresholdOnly => cfg.tau = 0.6,
            AblationMode::NoUncertainty => cfg.loss.lambda_unc = 0.0,
            _ => {}
        }
        cfg
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            decoupled_weight_decay: self.decoupled_weight_decay,
            ..AdamConfig::default()
        }
    }
}

/// Indices into `Dataset::samples` per evaluation pool.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub validate: Vec<usize>,
    pub ood: Vec<usize>,
}

/// Deterministic 7:2:1 partition of the in-distribution samples, plus the
/// held-out OOD pool. Samples already tagged as ID test are appended to the
/// test pool unchanged.
pub fn split_dataset(ds: &Dataset, cfg: &TrainConfig) -> Result<SplitIndices> {
    cfg.validate()?;
    let mut pool: Vec<usize> = Vec::new();
    let mut test = Vec::new();
    let mut ood = Vec::new();
    for (i, s) in ds.samples.iter().enumerate() {
        match s.split {
            SplitTag::Train => pool.push(i),
            SplitTag::IdTest => test.push(i),
            SplitTag::OodTest => ood.push(i),
        }
    }
    if pool.is_empty() {
        return Err(CurveError::Config("dataset has no training samples".into()));
    }
    pool.sort_by_key(|&i| ds.samples[i].id);
    let mut rng = rng_from(derive_seed(cfg.seed, &[SALT_SPLIT]));
    pool.shuffle(&mut rng);

    let n = pool.len();
    let n_train = ((n as f64) * cfg.split[0]).floor() as usize;
    let n_test = ((n as f64) * cfg.split[1]).floor() as usize;
    let train = pool[..n_train].to_vec();
    test.extend_from_slice(&pool[n_train..n_train + n_test]);
    let validate = pool[n_train + n_test..].to_vec();
    Ok(SplitIndices {
        train,
        test,
        validate,
        ood,
    })
}

/// Parameter names in the order `CurveModel::bind` pushes leaves.
pub fn param_names(model: &CurveModel) -> Vec<String> {
    let mut names = Vec::new();
    model.visit(&mut |name, _| names.push(name));
    names
}

/// Bind the model and return the leaf vars aligned with `param_names`.
pub fn bind_with_vars(model: &CurveModel, tape: &mut Tape) -> (BoundModel, Vec<Var>) {
    let start = tape.len();
    let bound = model.bind(tape);
    let vars = (start..tape.len()).map(Var).collect();
    (bound, vars)
}

/// Stack per-sequence (1, c) rows into a (B, c) matrix on the tape.
fn stack_rows(tape: &mut Tape, rows: &[Var]) -> Result<Var> {
    let cols: Vec<Var> = rows.iter().map(|r| tape.transpose(*r)).collect();
    let cat = tape.concat_cols(&cols)?;
    Ok(tape.transpose(cat))
}

/// Draw per-sequence noise for one epoch; seeds depend only on
/// (config seed, epoch, sequence id) so interrupted runs resume exactly.
pub fn epoch_noise(
    cfg: &TrainConfig,
    dims: &ModelDims,
    epoch: usize,
    sample: &SequenceSample,
) -> SequenceNoise {
    let counts: Vec<usize> = sample.frames.iter().map(|f| f.rows.len()).collect();
    let mut rng = rng_from(derive_seed(
        cfg.seed,
        &[SALT_NOISE, epoch as u64, sample.id],
    ));
    SequenceNoise::sample(&counts, dims, cfg.loss.mc_samples, cfg.dropout, &mut rng)
}

/// Scalar loss pieces reported per batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BatchLoss {
    pub total: f64,
    pub pred: f64,
    pub unc: f64,
    pub div: f64,
    pub kl: f64,
}

/// Forward a batch, assemble the composite objective, and return the loss
/// with gradients aligned to `param_names` order (zeros for parameters the
/// graph never touched).
pub fn batch_objective(
    model: &CurveModel,
    samples: &[&SequenceSample],
    noise: &[SequenceNoise],
    cfg: &TrainConfig,
) -> Result<(BatchLoss, Vec<Tensor>)> {
    let settings = cfg.settings();
    let mut tape = Tape::new();
    let (bound, vars) = bind_with_vars(model, &mut tape);

    let mut outputs: Vec<SequenceOutput> = Vec::with_capacity(samples.len());
    for (s, nz) in samples.iter().zip(noise) {
        outputs.push(forward_sequence(&mut tape, &bound, &s.frames, &settings, Some(nz))?);
    }

    let mu_rows: Vec<Var> = outputs.iter().map(|o| o.logits_mu).collect();
    let lv_rows: Vec<Var> = outputs.iter().map(|o| o.logvar).collect();
    let logits_mu = stack_rows(&mut tape, &mu_rows)?;
    let logvar = stack_rows(&mut tape, &lv_rows)?;

    let labels: Vec<usize> = samples.iter().map(|s| s.label as usize).collect();
    let eps_draws: Vec<Tensor> = (0..cfg.loss.mc_samples)
        .map(|m| {
            let mut data = Vec::with_capacity(samples.len() * 2);
            for nz in noise {
                data.extend_from_slice(nz.pred_eps[m].data());
            }
            Tensor::matrix(samples.len(), 2, data).unwrap()
        })
        .collect();
    let pred = prediction_loss(&mut tape, logits_mu, logvar, &labels, &eps_draws)?;

    let correct: Vec<bool> = outputs
        .iter()
        .zip(&labels)
        .map(|(o, &y)| predicted_class(tape.value(o.logits_mu)) == y)
        .collect();
    let unc = calibration_loss(&mut tape, logvar, &correct, &cfg.loss)?;

    let div = prototype_diversity_loss(&mut tape, bound.dict.c)?;

    let posteriors: Vec<_> = outputs.iter().flat_map(|o| o.posteriors.clone()).collect();
    let kl = kl_regularizer(&mut tape, &posteriors, samples.len())?;

    let parts = LossComponents { pred, unc, div, kl };
    let total = total_objective(&mut tape, parts, &cfg.loss)?;

    let report = BatchLoss {
        total: tape.value(total).item(),
        pred: tape.value(pred).item(),
        unc: tape.value(unc).item(),
        div: tape.value(div).item(),
        kl: tape.value(kl).item(),
    };

    let grads = tape.backward(total)?;
    let mut out = Vec::with_capacity(vars.len());
    for v in &vars {
        match grads.get(*v) {
            Some(g) => out.push(g.clone()),
            None => out.push(Tensor::zeros(tape.value(*v).shape().to_vec())),
        }
    }
    Ok((report, out))
}

/// Per-epoch mean batch losses.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossCurve {
    pub epochs: Vec<BatchLoss>,
}

impl LossCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,total,pred,unc,div,kl\n");
        for (e, l) in self.epochs.iter().enumerate() {
            s.push_str(&format!(
                "{e},{},{},{},{},{}\n",
                l.total, l.pred, l.unc, l.div, l.kl
            ));
        }
        s
    }
}

/// Trained model plus everything needed to checkpoint or resume.
pub struct TrainOutcome {
    pub model: CurveModel,
    pub curve: LossCurve,
    pub adam_state: AdamState,
    pub epochs_done: usize,
}

/// Train a fresh model for `cfg.epochs` epochs.
pub fn train_model(ds: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let splits = split_dataset(ds, cfg)?;
    let dims = cfg.dims();
    let mut model = CurveModel::init(dims, &mut rng_from(derive_seed(cfg.seed, &[1])));
    let mut adam = Adam::new(cfg.adam());
    let mut curve = LossCurve { epochs: Vec::new() };
    train_range(&mut model, &mut adam, ds, &splits.train, cfg, 0, cfg.epochs, &mut curve)?;
    Ok(TrainOutcome {
        model,
        curve,
        adam_state: adam.export_state(),
        epochs_done: cfg.epochs,
    })
}

/// Continue training from a checkpoint for `extra_epochs` more epochs.
pub fn resume_training(ckpt: &Checkpoint, ds: &Dataset, extra_epochs: usize) -> Result<TrainOutcome> {
    let cfg = ckpt.config;
    let splits = split_dataset(ds, &cfg)?;
    let mut model = ckpt.to_model()?;
    let mut adam = Adam::from_state(cfg.adam(), &ckpt.adam);
    let mut curve = LossCurve { epochs: Vec::new() };
    let start = ckpt.epoch;
    train_range(
        &mut model,
        &mut adam,
        ds,
        &splits.train,
        &cfg,
        start,
        start + extra_epochs,
        &mut curve,
    )?;
    Ok(TrainOutcome {
        model,
        curve,
        adam_state: adam.export_state(),
        epochs_done: start + extra_epochs,
    })
}

/// Shared epoch loop; `adam` may carry frozen prefixes for fine-tuning.
#[allow(clippy::too_many_arguments)]
pub fn train_range(
    model: &mut CurveModel,
    adam: &mut Adam,
    ds: &Dataset,
    train_idx: &[usize],
    cfg: &TrainConfig,
    start_epoch: usize,
    end_epoch: usize,
    curve: &mut LossCurve,
) -> Result<()> {
    if train_idx.is_empty() {
        return Err(CurveError::Config("empty training pool".into()));
    }
    let dims = model.dims;
    let names = param_names(model);
    for epoch in start_epoch..end_epoch {
        let mut order = train_idx.to_vec();
        order.sort_by_key(|&i| ds.samples[i].id);
        let mut rng = rng_from(derive_seed(cfg.seed, &[SALT_EPOCH, epoch as u64]));
        order.shuffle(&mut rng);

        let mut epoch_loss = BatchLoss {
            total: 0.0,
            pred: 0.0,
            unc: 0.0,
            div: 0.0,
            kl: 0.0,
        };
        let mut batches = 0.0;
        for (batch_no, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let samples: Vec<&SequenceSample> = chunk.iter().map(|&i| &ds.samples[i]).collect();
            let noise: Vec<SequenceNoise> = samples
                .iter()
                .map(|s| epoch_noise(cfg, &dims, epoch, s))
                .collect();
            let (loss, grads) = batch_objective(model, &samples, &noise, cfg).map_err(|e| {
                CurveError::Numeric(format!("epoch {epoch} batch {batch_no}: {e}"))
            })?;
            if !loss.total.is_finite() {
                return Err(CurveError::Numeric(format!(
                    "non-finite loss {} at epoch {epoch} batch {batch_no}",
                    loss.total
                )));
            }
            adam.begin_step();
            let mut i = 0;
            let mut step_err = None;
            model.visit_mut(&mut |_, t| {
                if step_err.is_none() {
                    if let Err(e) = adam.update(&names[i], t, &grads[i]) {
                        step_err = Some(e);
                    }
                }
                i += 1;
            });
            if let Some(e) = step_err {
                return Err(e);
            }
            epoch_loss.total += loss.total;
            epoch_loss.pred += loss.pred;
            epoch_loss.unc += loss.unc;
            epoch_loss.div += loss.div;
            epoch_loss.kl += loss.kl;
            batches += 1.0;
        }
        epoch_loss.total /= batches;
        epoch_loss.pred /= batches;
        epoch_loss.unc /= batches;
        epoch_loss.div /= batches;
        epoch_loss.kl /= batches;
        curve.epochs.push(epoch_loss);
    }
    Ok(())
}
