//! The optimization loop over day-sized minibatches, with per-step metrics
//! and per-epoch checkpoints.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{extract_detections, mean_average_precision, EvalReport};
use crate::geometry::{assign_targets, build_anchor_grid, AnchorGrid};
use crate::loss::{total_loss, LossBreakdown, LossWeights};
use crate::model::{build_model, decoder_forward, encoder_forward, scorer_forward, ModelConfig, ModelParams};
use crate::optim::{adam_step, OptimConfig, OptimState};
use crate::tensor::{backprop, no_grad};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainMode {
    #[serde(rename = "supervised")]
    Supervised,
    #[serde(rename = "semi")]
    SemiSupervised,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub mode: TrainMode,
    pub epochs: usize,
    pub seed: u64,
    pub optim: OptimConfig,
    /// Evaluate on the held-out split every k epochs (0 = never).
    pub eval_every: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            mode: TrainMode::SemiSupervised,
            epochs: 30,
            seed: 7,
            optim: OptimConfig::default(),
            eval_every: 0,
        }
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub steps: u64,
    /// Mean total loss per epoch.
    pub epoch_means: Vec<f64>,
    pub checkpoint_path: PathBuf,
    pub metrics_path: PathBuf,
}

/// Six-significant-digit scientific formatting used in the metrics log.
pub fn format_metric(v: f64) -> String {
    format!("{v:.5e}")
}

fn write_metrics_row(w: &mut impl Write, step: u64, epoch: usize, b: &LossBreakdown) -> Result<()> {
    writeln!(
        w,
        "{step},{epoch},{},{},{},{},{},{}",
        format_metric(b.total),
        format_metric(b.l_rec),
        format_metric(b.l_sup),
        format_metric(b.l_box),
        format_metric(b.l_conf),
        format_metric(b.l_cls)
    )?;
    Ok(())
}

fn check_compat(cfg: &ModelConfig, dataset: &Dataset) -> Result<()> {
    let m = &dataset.manifest;
    if m.channels != cfg.channels
        || m.timesteps_per_sample != cfg.timesteps
        || m.image_h != cfg.image_h
        || m.image_w != cfg.image_w
        || m.num_classes != cfg.num_classes
    {
        return Err(Error::invalid(format!(
            "dataset ({}ch {}x{}x{} {} classes) does not match model config ({}ch {}x{}x{} {} classes)",
            m.channels, m.timesteps_per_sample, m.image_h, m.image_w, m.num_classes,
            cfg.channels, cfg.timesteps, cfg.image_h, cfg.image_w, cfg.num_classes
        )));
    }
    if m.labeled_frames != cfg.labeled_frames() {
        return Err(Error::invalid(format!(
            "dataset labeled frames {:?} do not match the model's {:?}",
            m.labeled_frames,
            cfg.labeled_frames()
        )));
    }
    Ok(())
}

/// One forward pass and loss for one day. In semi-supervised mode the
/// reconstruction participates in the graph; in supervised mode lambda is
/// forced to 0 and the decoder runs outside the graph purely for logging.
pub fn forward_day(
    params: &ModelParams,
    input: &crate::tensor::Tensor,
    targets: &crate::geometry::TargetMap,
    weights: &LossWeights,
    mode: TrainMode,
) -> Result<(crate::tensor::Tensor, LossBreakdown)> {
    let cfg = &params.config;
    let outputs = encoder_forward(params, input)?;
    let code = outputs.last().unwrap().clone();
    drop(outputs);
    let heads = scorer_forward(params, &code)?;
    let (weights_eff, n_frames) = match mode {
        TrainMode::SemiSupervised => (*weights, cfg.timesteps),
        TrainMode::Supervised => {
            (LossWeights { lambda: 0.0, ..*weights }, cfg.labeled_frames().len())
        }
    };
    let reconstruction = if weights_eff.lambda == 0.0 {
        let _g = no_grad();
        decoder_forward(params, &code)?
    } else {
        decoder_forward(params, &code)?
    };
    total_loss(input, &reconstruction, &heads, targets, &weights_eff, n_frames)
}

/// Runs detections over a whole split and scores mAP at the thresholds.
pub fn evaluate_model(
    params: &ModelParams,
    dataset: &Dataset,
    thresholds: &[f64],
    conf_floor: f64,
) -> Result<EvalReport> {
    check_compat(&params.config, dataset)?;
    let _guard = no_grad();
    let cfg = &params.config;
    let grid = build_anchor_grid(cfg.image_h, cfg.image_w, cfg.cell)?;
    let labeled = cfg.labeled_frames();
    let mut frames = Vec::new();
    for day in 0..dataset.len() {
        let (input, boxes) = dataset.load_sample(day)?;
        let outputs = encoder_forward(params, &input)?;
        let heads = scorer_forward(params, outputs.last().unwrap())?;
        let dets = extract_detections(&heads, &grid, conf_floor, &labeled)?;
        for (t, frame_dets) in dets.into_iter().enumerate() {
            let f = labeled[t];
            let gts: Vec<_> = boxes.iter().filter(|b| b.frame == f).copied().collect();
            frames.push((frame_dets, gts));
        }
    }
    mean_average_precision(&frames, &dataset.manifest.class_names, thresholds)
}

/// Iterates epochs of seeded-shuffled days: forward, total loss, backprop,
/// Adam. Writes one metrics row per step and a checkpoint per epoch.
pub fn train(
    cfg: &ModelConfig,
    weights: &LossWeights,
    settings: &TrainSettings,
    dataset: &Dataset,
    eval_dataset: Option<&Dataset>,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    weights.validate()?;
    check_compat(cfg, dataset)?;
    if dataset.is_empty() {
        return Err(Error::invalid("training dataset is empty"));
    }
    std::fs::create_dir_all(out_dir)?;
    let metrics_path = out_dir.join("metrics.csv");
    let checkpoint_path = out_dir.join("checkpoint.ckpt");
    let mut metrics = BufWriter::new(File::create(&metrics_path)?);
    writeln!(metrics, "step,epoch,total,l_rec,l_sup,l_box,l_conf,l_cls")?;

    let params = build_model(cfg, settings.seed)?;
    let named = params.named_tensors();
    let mut optim = OptimState::new(settings.optim, &named);
    let grid = build_anchor_grid(cfg.image_h, cfg.image_w, cfg.cell)?;
    let labeled = cfg.labeled_frames();

    let mut step: u64 = 0;
    let mut epoch_means = Vec::with_capacity(settings.epochs);
    for epoch in 1..=settings.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(settings.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut shuffle_rng);

        let mut epoch_sum = 0.0;
        let mut epoch_count = 0usize;
        for &day in &order {
            let (input, boxes) = match dataset.load_sample(day) {
                Ok(s) => s,
                Err(e) => {
                    eprintln!("warning: skipping day {day}: {e}");
                    continue;
                }
            };
            let targets = assign_targets(&boxes, &grid, &labeled, cfg.num_classes)?;
            let (total, breakdown) = forward_day(&params, &input, &targets, weights, settings.mode)?;
            if !breakdown.total.is_finite() {
                metrics.flush()?;
                return Err(Error::runtime(format!(
                    "non-finite loss at step {} (epoch {epoch}, day {day}); last good checkpoint retained",
                    step + 1
                )));
            }
            params.zero_grads();
            backprop(&total)?;
            step += 1;
            if let Err(e) = adam_step(&named, &mut optim) {
                eprintln!("warning: step {step} rejected: {e}");
            }
            write_metrics_row(&mut metrics, step, epoch, &breakdown)?;
            epoch_sum += breakdown.total;
            epoch_count += 1;
        }
        metrics.flush()?;
        epoch_means.push(epoch_sum / epoch_count.max(1) as f64);
        save_checkpoint(&params, &optim, &checkpoint_path)?;

        if settings.eval_every > 0 && epoch % settings.eval_every == 0 {
            if let Some(eval_ds) = eval_dataset {
                let report = evaluate_model(&params, eval_ds, &[0.1, 0.5], 0.0)?;
                println!(
                    "epoch {epoch}: held-out mAP@0.1 = {:.4}, mAP@0.5 = {:.4}",
                    report.map_at(0.1).unwrap_or(0.0),
                    report.map_at(0.5).unwrap_or(0.0)
                );
            }
        }
    }
    Ok(TrainOutcome { steps: step, epoch_means, checkpoint_path, metrics_path })
}

/// Anchor grid implied by a model config.
pub fn model_grid(cfg: &ModelConfig) -> Result<AnchorGrid> {
    build_anchor_grid(cfg.image_h, cfg.image_w, cfg.cell)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate_synthetic_dataset, SyntheticEventSpec};

    fn tiny_setup(dir: &Path) -> (ModelConfig, Dataset) {
        let spec = SyntheticEventSpec {
            image_h: 64,
            image_w: 64,
            ..SyntheticEventSpec::default()
        };
        generate_synthetic_dataset(&spec, dir, 3, 77).unwrap();
        let cfg = ModelConfig {
            image_h: 64,
            image_w: 64,
            filter_counts: vec![4, 6, 8, 10, 12, 16],
            ..ModelConfig::desk()
        };
        (cfg, Dataset::open(dir).unwrap())
    }

    #[test]
    fn metrics_format_is_six_significant_digits() {
        assert_eq!(format_metric(0.5), "5.00000e-1");
        assert_eq!(format_metric(123456.789), "1.23457e5");
        assert_eq!(format_metric(0.0), "0.00000e0");
    }

    #[test]
    fn two_epoch_run_writes_metrics_and_checkpoint() {
        let data_dir = tempfile::tempdir().unwrap();
        let out_dir = tempfile::tempdir().unwrap();
        let (cfg, dataset) = tiny_setup(data_dir.path());
        let settings = TrainSettings { epochs: 2, seed: 5, ..TrainSettings::default() };
        let outcome = train(&cfg, &LossWeights::default(), &settings, &dataset, None, out_dir.path()).unwrap();
        assert_eq!(outcome.steps, 6);
        let metrics = std::fs::read_to_string(&outcome.metrics_path).unwrap();
        let lines: Vec<&str> = metrics.lines().collect();
        assert_eq!(lines[0], "step,epoch,total,l_rec,l_sup,l_box,l_conf,l_cls");
        assert_eq!(lines.len(), 7);
        assert!(outcome.checkpoint_path.exists());
    }

    #[test]
    fn same_seed_same_metrics() {
        let data_dir = tempfile::tempdir().unwrap();
        let (cfg, dataset) = tiny_setup(data_dir.path());
        let settings = TrainSettings { epochs: 2, seed: 9, ..TrainSettings::default() };
        let mut logs = Vec::new();
        for _ in 0..2 {
            let out = tempfile::tempdir().unwrap();
            train(&cfg, &LossWeights::default(), &settings, &dataset, None, out.path()).unwrap();
            logs.push(std::fs::read_to_string(out.path().join("metrics.csv")).unwrap());
        }
        assert_eq!(logs[0], logs[1]);
    }

    #[test]
    fn supervised_mode_logs_l_rec_without_affecting_total() {
        let data_dir = tempfile::tempdir().unwrap();
        let out_dir = tempfile::tempdir().unwrap();
        let (cfg, dataset) = tiny_setup(data_dir.path());
        let settings = TrainSettings {
            mode: TrainMode::Supervised,
            epochs: 1,
            seed: 5,
            ..TrainSettings::default()
        };
        train(&cfg, &LossWeights::default(), &settings, &dataset, None, out_dir.path()).unwrap();
        let metrics = std::fs::read_to_string(out_dir.path().join("metrics.csv")).unwrap();
        for line in metrics.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            assert_eq!(f[2], f[4], "total column equals l_sup column");
            assert_ne!(f[3], "0.00000e0", "l_rec logged");
        }
    }

    #[test]
    fn incompatible_dataset_is_rejected() {
        let data_dir = tempfile::tempdir().unwrap();
        let (mut cfg, dataset) = tiny_setup(data_dir.path());
        cfg.channels = 5;
        let err = train(
            &cfg,
            &LossWeights::default(),
            &TrainSettings::default(),
            &dataset,
            None,
            data_dir.path(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("does not match"));
    }
}
