//! Evaluation protocols: deterministic metric evaluation, the ablation
//! study, the geometric-noise robustness sweep, partial-supervision
//! fine-tuning, and the uncertainty separation report.

use crate::checkpoint::Checkpoint;
use crate::error::{CurveError, Result};
use crate::metrics::{aggregate_metrics, MetricsReport, SequenceEval};
use crate::model::{forward_sequence, AblationMode, CurveModel};
use crate::optim::Adam;
use crate::reasoner::predicted_class;
use crate::rng::{derive_seed, rng_from};
use crate::scene::{inject_geometric_noise, Dataset, SequenceSample};
use crate::tensor::Tape;
use crate::train::{split_dataset, train_model, train_range, LossCurve, TrainConfig};
use rand::seq::SliceRandom;
use serde::Serialize;

const SALT_EVAL_NOISE: u64 = 0x65_76_61_6c;
const SALT_FINETUNE: u64 = 0x66_74_75_6e;

/// Label fractions accepted by `finetune_partial`.
pub const FINETUNE_FRACTIONS: [f64; 5] = [0.0, 0.01, 0.05, 0.10, 1.0];
/// Adaptation epoch budget below full supervision.
pub const FINETUNE_EPOCHS: usize = 50;
/// Epoch budget for the fully supervised oracle.
pub const ORACLE_EPOCHS: usize = 200;
/// Parameter prefixes frozen during low-data adaptation.
pub const FROZEN_PREFIXES: [&str; 3] = ["encoder", "dict", "scorer"];

/// Evaluation-time geometric noise (standard deviation in normalized
/// coordinates). `None` evaluates on clean frames.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalNoise {
    pub sigma: f64,
    pub seed: u64,
}

/// Deterministic forward pass per sequence: latents collapse to their
/// means, no dropout, scores from `logits_mu`.
pub fn evaluate_sequences(
    model: &CurveModel,
    ds: &Dataset,
    indices: &[usize],
    cfg: &TrainConfig,
    noise: Option<EvalNoise>,
) -> Result<Vec<SequenceEval>> {
    let settings = cfg.settings();
    let mut evals = Vec::with_capacity(indices.len());
    for &i in indices {
        let sample = &ds.samples[i];
        let frames = match noise {
            Some(n) => {
                let mut noisy = Vec::with_capacity(sample.frames.len());
                for (t, f) in sample.frames.iter().enumerate() {
                    let seed = derive_seed(n.seed, &[SALT_EVAL_NOISE, sample.id, t as u64]);
                    noisy.push(inject_geometric_noise(f, n.sigma, seed)?);
                }
                noisy
            }
            None => sample.frames.clone(),
        };
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let out = forward_sequence(&mut tape, &bound, &frames, &settings, None)?;
        let mu = tape.value(out.logits_mu);
        let lv = tape.value(out.logvar);
        let uncertainty =
            lv.data().iter().map(|v| (0.5 * v).exp()).sum::<f64>() / lv.len() as f64;
        evals.push(SequenceEval {
            label: sample.label as usize,
            pred: predicted_class(mu),
            score: mu.data()[1] - mu.data()[0],
            uncertainty,
            frame_topology: out
                .frame_edges
                .iter()
                .zip(&out.frame_nodes)
                .map(|(&e, &n)| (e, n))
                .collect(),
        });
    }
    Ok(evals)
}

pub fn evaluate_metrics(
    model: &CurveModel,
    ds: &Dataset,
    indices: &[usize],
    cfg: &TrainConfig,
    noise: Option<EvalNoise>,
) -> Result<MetricsReport> {
    if indices.is_empty() {
        return Err(CurveError::Config("evaluation split is empty".into()));
    }
    Ok(aggregate_metrics(&evaluate_sequences(model, ds, indices, cfg, noise)?))
}

/// One trained mode of the ablation study.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationResult {
    pub mode: String,
    pub id_test: MetricsReport,
    pub ood: MetricsReport,
}

/// Train one model per mode and evaluate on the ID test and OOD pools.
pub fn run_ablation(
    ds: &Dataset,
    cfg: &TrainConfig,
    modes: &[AblationMode],
) -> Result<Vec<AblationResult>> {
    let splits = split_dataset(ds, cfg)?;
    let mut results = Vec::with_capacity(modes.len());
    for &mode in modes {
        let mode_cfg = cfg.for_mode(mode);
        let outcome = train_model(ds, &mode_cfg)?;
        results.push(AblationResult {
            mode: mode.name().to_string(),
            id_test: evaluate_metrics(&outcome.model, ds, &splits.test, &mode_cfg, None)?,
            ood: evaluate_metrics(&outcome.model, ds, &splits.ood, &mode_cfg, None)?,
        });
    }
    Ok(results)
}

/// Metrics per noise level; the shared seed makes rows paired comparisons.
pub fn robustness_sweep(
    model: &CurveModel,
    ds: &Dataset,
    indices: &[usize],
    cfg: &TrainConfig,
    grid: &[f64],
    eval_seed: u64,
) -> Result<Vec<(f64, MetricsReport)>> {
    let mut rows = Vec::with_capacity(grid.len());
    for &sigma in grid {
        let noise = EvalNoise {
            sigma,
            seed: eval_seed,
        };
        rows.push((sigma, evaluate_metrics(model, ds, indices, cfg, Some(noise))?));
    }
    Ok(rows)
}

pub const ROBUSTNESS_GRID: [f64; 9] = [0.0, 0.01, 0.02, 0.05, 0.10, 0.15, 0.20, 0.25, 0.30];

/// One supervision level of the transfer protocol.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FinetuneResult {
    pub fraction: f64,
    pub epochs: usize,
    pub adapted: MetricsReport,
}

/// Adapt a source checkpoint to the OOD pool with a given label fraction.
///
/// The OOD pool is split 70/30 into an adaptation pool and a held-out
/// evaluation set. Below full supervision the encoder, intervention, and
/// scorer parameters are frozen and only the temporal module and heads
/// train for 50 epochs; at fraction 1.0 everything trains for 200 epochs.
/// Fraction 0 evaluates the checkpoint unchanged.
pub fn finetune_partial(
    ckpt: &Checkpoint,
    ds: &Dataset,
    fraction: f64,
    epochs_override: Option<usize>,
) -> Result<(FinetuneResult, CurveModel)> {
    if !FINETUNE_FRACTIONS.iter().any(|f| *f == fraction) {
        return Err(CurveError::Config(format!(
            "label fraction {fraction} not in {FINETUNE_FRACTIONS:?}"
        )));
    }
    let cfg = ckpt.config;
    let splits = split_dataset(ds, &cfg)?;
    if splits.ood.is_empty() {
        return Err(CurveError::Config("dataset has no OOD samples".into()));
    }
    let mut pool = splits.ood.clone();
    pool.sort_by_key(|&i| ds.samples[i].id);
    let mut rng = rng_from(derive_seed(cfg.seed, &[SALT_FINETUNE]));
    pool.shuffle(&mut rng);
    let n_adapt = (pool.len() as f64 * 0.7).floor() as usize;
    let (adapt_pool, eval_pool) = pool.split_at(n_adapt);

    let mut model = ckpt.to_model()?;
    let mut epochs = 0;
    if fraction > 0.0 {
        let n_labeled = ((adapt_pool.len() as f64) * fraction).ceil() as usize;
        let labeled = &adapt_pool[..n_labeled.min(adapt_pool.len())];
        epochs = epochs_override.unwrap_or(if fraction < 1.0 {
            FINETUNE_EPOCHS
        } else {
            ORACLE_EPOCHS
        });
        let mut adam = Adam::from_state(
            crate::optim::AdamConfig {
                learning_rate: cfg.learning_rate,
                weight_decay: cfg.weight_decay,
                decoupled_weight_decay: cfg.decoupled_weight_decay,
                ..crate::optim::AdamConfig::default()
            },
            &Default::default(),
        );
        if fraction < 1.0 {
            adam.freeze_prefixes(&FROZEN_PREFIXES);
        }
        let mut curve = LossCurve { epochs: Vec::new() };
        train_range(&mut model, &mut adam, ds, labeled, &cfg, 0, epochs, &mut curve)?;
    }
    let adapted = evaluate_metrics(&model, ds, eval_pool, &cfg, None)?;
    Ok((
        FinetuneResult {
            fraction,
            epochs,
            adapted,
        },
        model,
    ))
}

/// Uncertainty separation between correct and wrong predictions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UncertaintyReport {
    pub num_samples: usize,
    pub u_cor_mean: Option<f64>,
    pub u_wro_mean: Option<f64>,
    /// `u_wro_mean - u_cor_mean` when both sides exist.
    pub separation: Option<f64>,
    pub histogram_bins: usize,
    pub bin_edges: Vec<f64>,
    pub cor_counts: Vec<usize>,
    pub wro_counts: Vec<usize>,
}

pub const HISTOGRAM_BINS: usize = 20;

pub fn uncertainty_report(evals: &[SequenceEval]) -> UncertaintyReport {
    let cor: Vec<f64> = evals
        .iter()
        .filter(|e| e.pred == e.label)
        .map(|e| e.uncertainty)
        .collect();
    let wro: Vec<f64> = evals
        .iter()
        .filter(|e| e.pred != e.label)
        .map(|e| e.uncertainty)
        .collect();
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let u_cor_mean = (!cor.is_empty()).then(|| mean(&cor));
    let u_wro_mean = (!wro.is_empty()).then(|| mean(&wro));

    let hi = evals
        .iter()
        .map(|e| e.uncertainty)
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let width = hi / HISTOGRAM_BINS as f64;
    let bin_edges: Vec<f64> = (0..=HISTOGRAM_BINS).map(|i| i as f64 * width).collect();
    let bucket = |u: f64| ((u / width) as usize).min(HISTOGRAM_BINS - 1);
    let mut cor_counts = vec![0usize; HISTOGRAM_BINS];
    let mut wro_counts = vec![0usize; HISTOGRAM_BINS];
    for &u in &cor {
        cor_counts[bucket(u)] += 1;
    }
    for &u in &wro {
        wro_counts[bucket(u)] += 1;
    }

    UncertaintyReport {
        num_samples: evals.len(),
        u_cor_mean,
        u_wro_mean,
        separation: match (u_cor_mean, u_wro_mean) {
            (Some(c), Some(w)) => Some(w - c),
            _ => None,
        },
        histogram_bins: HISTOGRAM_BINS,
        bin_edges,
        cor_counts,
        wro_counts,
    }
}

pub fn histogram_csv(report: &UncertaintyReport) -> String {
    let mut s = String::from("bin_lo,bin_hi,correct,wrong\n");
    for i in 0..report.histogram_bins {
        s.push_str(&format!(
            "{},{},{},{}\n",
            report.bin_edges[i],
            report.bin_edges[i + 1],
            report.cor_counts[i],
            report.wro_counts[i]
        ));
    }
    s
}

/// Final LSTM states per sequence as CSV: id, label, then one column per
/// hidden coordinate.
pub fn embeddings_csv(
    model: &CurveModel,
    ds: &Dataset,
    indices: &[usize],
    cfg: &TrainConfig,
) -> Result<String> {
    let settings = cfg.settings();
    let hidden = model.reasoner.lstm_hidden();
    let mut s = String::from("id,label");
    for j in 0..hidden {
        s.push_str(&format!(",h{j}"));
    }
    s.push('\n');
    for &i in indices {
        let sample: &SequenceSample = &ds.samples[i];
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let out = forward_sequence(&mut tape, &bound, &sample.frames, &settings, None)?;
        s.push_str(&format!("{},{}", sample.id, sample.label));
        for v in tape.value(out.h_last).data() {
            s.push_str(&format!(",{v}"));
        }
        s.push('\n');
    }
    Ok(s)
}
