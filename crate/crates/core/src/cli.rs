//! Command-line entry point: `synth | train | eval | predict | gradcheck |
//! export-features`, a JSON config file with flag overrides, and the exit
//! code contract 0 = success, 1 = validation failure, 2 = runtime failure.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::checkpoint::{load_checkpoint, read_header};
use crate::config::RunConfig;
use crate::data::synth::generate_synthetic_dataset;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::extract_detections;
use crate::features::export_features;
use crate::model::{build_model, count_parameters, encoder_forward, scorer_forward, Variant};
use crate::overlay::render_overlay;
use crate::tensor::no_grad;
use crate::train::{evaluate_model, model_grid, train, TrainMode};
use crate::verify::gradient_check_suite;

#[derive(Parser)]
#[command(name = "stormdet", version, about = "Spatiotemporal event detection engine: train, evaluate, and inspect a tied-weight conv autoencoder with an anchor-grid box head on synthetic multichannel data")]
struct Cli {
    /// JSON run configuration; flags override file values.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides both the synthesis and training seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (dataset directory for `synth`).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Synth {
        #[arg(long)]
        days: Option<usize>,
        /// Fraction of planted events left out of the labels.
        #[arg(long)]
        drop_rate: Option<f64>,
        /// `default` or `motion-pair`.
        #[arg(long)]
        preset: Option<String>,
    },
    /// Train a model on a dataset directory.
    Train {
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// `semi` or `supervised`.
        #[arg(long)]
        mode: Option<String>,
        /// `3d` or `2d`.
        #[arg(long)]
        variant: Option<String>,
        /// Reconstruction weight.
        #[arg(long)]
        lambda: Option<f64>,
        /// Filter-count multiplier (2 doubles every layer).
        #[arg(long)]
        capacity: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Held-out dataset evaluated every `--eval-every` epochs.
        #[arg(long, value_name = "DIR")]
        eval_data: Option<PathBuf>,
        #[arg(long)]
        eval_every: Option<usize>,
        /// Copy channels/extents/classes from the dataset manifest.
        #[arg(long, default_value_t = false)]
        fit_data: bool,
    },
    /// Score a checkpoint on a dataset: per-class AP and mAP at IOU 0.1/0.5.
    Eval {
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
    },
    /// Write prediction overlays (PPM) for one day's labeled frames.
    Predict {
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        #[arg(long)]
        day: Option<usize>,
        #[arg(long)]
        channel: Option<usize>,
        #[arg(long)]
        conf_floor: Option<f64>,
    },
    /// Run the finite-difference gradient suite; nonzero exit on failure.
    Gradcheck,
    /// Export bottleneck feature vectors per (day, frame, grid cell).
    ExportFeatures {
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        #[arg(long)]
        days: Option<usize>,
    },
}

pub fn run_cli() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
        cfg.synth.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.display().to_string();
    }
    Ok(cfg)
}

fn required_dir(opt: &Option<PathBuf>, cfg_value: &Option<String>, what: &str) -> Result<PathBuf> {
    opt.clone()
        .or_else(|| cfg_value.as_ref().map(PathBuf::from))
        .ok_or_else(|| Error::invalid(format!("{what} required (flag or config)")))
}

fn dispatch(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    match &cli.command {
        Command::Synth { days, drop_rate, preset } => {
            if let Some(d) = days {
                cfg.synth.days = *d;
            }
            if let Some(r) = drop_rate {
                cfg.synth.drop_rate = Some(*r);
            }
            if let Some(p) = preset {
                cfg.synth.preset = p.clone();
            }
            let out = PathBuf::from(&cfg.out);
            cfg.echo_resolved(&out)?;
            let spec = cfg.synth.resolve_spec()?;
            let summary = generate_synthetic_dataset(&spec, &out, cfg.synth.days, cfg.synth.seed)?;
            let m = &summary.manifest;
            println!(
                "wrote {} days to {}: {} channels, {}x{} px, {} frames/day, classes {:?}",
                summary.days,
                out.display(),
                m.channels,
                m.image_h,
                m.image_w,
                m.timesteps_per_sample,
                m.class_names
            );
            println!(
                "planted {} events ({} dropped from labels)",
                summary.total_events, summary.dropped_events
            );
            Ok(())
        }
        Command::Train {
            data,
            mode,
            variant,
            lambda,
            capacity,
            epochs,
            lr,
            eval_data,
            eval_every,
            fit_data,
        } => {
            if let Some(m) = mode {
                cfg.train.mode = match m.as_str() {
                    "semi" => TrainMode::SemiSupervised,
                    "supervised" => TrainMode::Supervised,
                    other => return Err(Error::invalid(format!("unknown mode '{other}'"))),
                };
            }
            if let Some(v) = variant {
                cfg.model.variant = match v.as_str() {
                    "3d" => Variant::ThreeD,
                    "2d" => Variant::TwoD,
                    other => return Err(Error::invalid(format!("unknown variant '{other}'"))),
                };
            }
            if let Some(l) = lambda {
                cfg.loss.lambda = *l;
            }
            if let Some(c) = capacity {
                cfg.model.capacity_multiplier = *c;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = *e;
            }
            if let Some(lr) = lr {
                cfg.train.optim.lr = *lr;
            }
            if let Some(k) = eval_every {
                cfg.train.eval_every = *k;
            }
            let data_dir = required_dir(data, &cfg.data, "--data")?;
            cfg.data = Some(data_dir.display().to_string());
            let dataset = Dataset::open(&data_dir)?;
            if *fit_data {
                let m = &dataset.manifest;
                cfg.model.channels = m.channels;
                cfg.model.timesteps = m.timesteps_per_sample;
                cfg.model.image_h = m.image_h;
                cfg.model.image_w = m.image_w;
                cfg.model.num_classes = m.num_classes;
            }
            let eval_dir = eval_data.clone().or_else(|| cfg.eval_data.as_ref().map(PathBuf::from));
            cfg.eval_data = eval_dir.as_ref().map(|p| p.display().to_string());
            let eval_dataset = eval_dir.map(|d| Dataset::open(&d)).transpose()?;
            let out = PathBuf::from(&cfg.out);
            cfg.echo_resolved(&out)?;

            let outcome = train(
                &cfg.model,
                &cfg.loss,
                &cfg.train,
                &dataset,
                eval_dataset.as_ref(),
                &out,
            )?;
            let params = build_model(&cfg.model, cfg.train.seed)?;
            println!(
                "trained {} steps over {} epochs ({} parameters); metrics: {}, checkpoint: {}",
                outcome.steps,
                cfg.train.epochs,
                count_parameters(&params),
                outcome.metrics_path.display(),
                outcome.checkpoint_path.display()
            );
            if let (Some(first), Some(last)) = (outcome.epoch_means.first(), outcome.epoch_means.last()) {
                println!("mean total loss: epoch 1 = {first:.6}, final = {last:.6}");
            }
            Ok(())
        }
        Command::Eval { checkpoint, data } => {
            let ckpt = required_dir(checkpoint, &cfg.checkpoint, "--checkpoint")?;
            let data_dir = required_dir(data, &cfg.data, "--data")?;
            cfg.checkpoint = Some(ckpt.display().to_string());
            cfg.data = Some(data_dir.display().to_string());
            let out = PathBuf::from(&cfg.out);
            cfg.echo_resolved(&out)?;
            let (params, _) = load_checkpoint(&ckpt)?;
            let dataset = Dataset::open(&data_dir)?;
            let report = evaluate_model(&params, &dataset, &[0.1, 0.5], 0.0)?;
            println!("{:<12} {:>10} {:>10}", "class", "AP@0.1", "AP@0.5");
            for name in &dataset.manifest.class_names {
                let at = |t: &str| {
                    report.iou[t]
                        .per_class
                        .get(name)
                        .map(|v| format!("{v:.4}"))
                        .unwrap_or_else(|| "-".into())
                };
                println!("{name:<12} {:>10} {:>10}", at("0.1"), at("0.5"));
            }
            println!(
                "{:<12} {:>10.4} {:>10.4}",
                "mAP",
                report.map_at(0.1).unwrap_or(0.0),
                report.map_at(0.5).unwrap_or(0.0)
            );
            let report_path = out.join("eval_report.json");
            serde_json::to_writer_pretty(
                std::io::BufWriter::new(std::fs::File::create(&report_path)?),
                &report,
            )?;
            println!("report: {}", report_path.display());
            Ok(())
        }
        Command::Predict { checkpoint, data, day, channel, conf_floor } => {
            if let Some(d) = day {
                cfg.predict.day = *d;
            }
            if let Some(c) = channel {
                cfg.predict.channel = *c;
            }
            if let Some(f) = conf_floor {
                cfg.predict.conf_floor = *f;
            }
            let ckpt = required_dir(checkpoint, &cfg.checkpoint, "--checkpoint")?;
            let data_dir = required_dir(data, &cfg.data, "--data")?;
            cfg.checkpoint = Some(ckpt.display().to_string());
            cfg.data = Some(data_dir.display().to_string());
            let out = PathBuf::from(&cfg.out);
            cfg.echo_resolved(&out)?;
            let (params, _) = load_checkpoint(&ckpt)?;
            let dataset = Dataset::open(&data_dir)?;
            let written = predict_overlays(&params, &dataset, &cfg, &out)?;
            println!("wrote {} overlays to {}", written.len(), out.display());
            for p in written {
                println!("  {}", p.display());
            }
            Ok(())
        }
        Command::Gradcheck => {
            let out = PathBuf::from(&cfg.out);
            cfg.echo_resolved(&out)?;
            let outcomes = gradient_check_suite(None)?;
            let mut worst: f64 = 0.0;
            let mut failures = 0;
            for o in &outcomes {
                println!("{o}");
                worst = worst.max(o.max_rel_error);
                if !o.passed() {
                    failures += 1;
                }
            }
            println!("{} ops checked, max rel error {worst:.3e}", outcomes.len());
            if failures > 0 {
                return Err(Error::runtime(format!("{failures} gradient checks failed")));
            }
            Ok(())
        }
        Command::ExportFeatures { checkpoint, data, days } => {
            if let Some(d) = days {
                cfg.export_days = *d;
            }
            let ckpt = required_dir(checkpoint, &cfg.checkpoint, "--checkpoint")?;
            let data_dir = required_dir(data, &cfg.data, "--data")?;
            cfg.checkpoint = Some(ckpt.display().to_string());
            cfg.data = Some(data_dir.display().to_string());
            let out = PathBuf::from(&cfg.out);
            cfg.echo_resolved(&out)?;
            let (params, _) = load_checkpoint(&ckpt)?;
            let dataset = Dataset::open(&data_dir)?;
            let path = out.join("features.csv");
            let mut file = std::io::BufWriter::new(std::fs::File::create(&path)?);
            let rows = export_features(&params, &dataset, cfg.export_days, &mut file)?;
            use std::io::Write;
            file.flush()?;
            println!("wrote {rows} feature rows to {}", path.display());
            Ok(())
        }
    }
}

/// Overlay rendering for one day: ground truth plus high-confidence
/// predictions on the chosen channel, one PPM per labeled frame.
pub fn predict_overlays(
    params: &crate::model::ModelParams,
    dataset: &Dataset,
    cfg: &RunConfig,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    let mcfg = &params.config;
    if cfg.predict.channel >= mcfg.channels {
        return Err(Error::invalid(format!(
            "channel {} out of range ({} channels)",
            cfg.predict.channel, mcfg.channels
        )));
    }
    let _guard = no_grad();
    let day = cfg.predict.day;
    let (input, boxes) = dataset.load_sample(day)?;
    let outs = encoder_forward(params, &input)?;
    let heads = scorer_forward(params, outs.last().unwrap())?;
    let grid = model_grid(mcfg)?;
    let labeled = mcfg.labeled_frames();
    let dets = extract_detections(&heads, &grid, cfg.predict.conf_floor, &labeled)?;
    std::fs::create_dir_all(out)?;
    let (h, w) = (mcfg.image_h, mcfg.image_w);
    let frame_elems = h * w;
    let data = input.data();
    let mut written = Vec::new();
    for (t, &frame) in labeled.iter().enumerate() {
        let base = (cfg.predict.channel * mcfg.timesteps + frame) * frame_elems;
        let frame_data = &data[base..base + frame_elems];
        let gts: Vec<_> = boxes.iter().filter(|b| b.frame == frame).copied().collect();
        let img = render_overlay(frame_data, h, w, &gts, &dets[t], cfg.predict.conf_floor);
        let path = out.join(format!("overlay_day{day:05}_frame{frame}.ppm"));
        img.write_ppm(&path)?;
        written.push(path);
    }
    Ok(written)
}

/// Prints a checkpoint's header summary (used by tests and debugging).
pub fn describe_checkpoint(path: &Path) -> Result<String> {
    let header = read_header(path)?;
    Ok(format!(
        "{} parameters, step {}, variant {}",
        header.param_count, header.step, header.model_config.variant
    ))
}
