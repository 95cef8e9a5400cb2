//! Seeded synthetic dataset generator: smooth multichannel background fields
//! with planted, temporally coherent events per class.
//!
//! Each day is 8 frames; events persist across all frames with per-frame
//! motion (and rotation for spiral morphologies), labels are written only for
//! the labeled frames, and a configurable fraction of events is dropped from
//! the labels to emulate ground-truth false negatives.

use std::f64::consts::TAU;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{compute_channel_stats, sample_file_name, write_sample_file, DatasetManifest};
use crate::error::{Error, Result};
use crate::geometry::BBox;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Morphology {
    CompactBlob,
    RotatingSpiral,
    ElongatedBand,
    DriftingBlob,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    /// Base event size range in pixels (blob diameter / spiral envelope).
    pub size_range: (f64, f64),
    /// Channels the event raises or lowers, in background-sigma units.
    pub channels: Vec<(usize, f64)>,
    /// Base motion in pixels per frame.
    pub motion: (f64, f64),
    /// Rotate the motion vector by a random per-event angle.
    pub isotropic_motion: bool,
    pub morphology: Morphology,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticEventSpec {
    pub channels: usize,
    pub timesteps: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub classes: Vec<ClassSpec>,
    /// Inclusive range of events per day.
    pub events_per_day: (usize, usize),
    /// Probability that a planted event is left out of the labels.
    pub drop_rate: f64,
    /// White-noise level on top of the smooth background.
    pub noise_std: f64,
    /// Number of low-frequency cosine modes per channel.
    pub background_modes: usize,
}

impl Default for SyntheticEventSpec {
    fn default() -> Self {
        SyntheticEventSpec {
            channels: 8,
            timesteps: 8,
            image_h: 128,
            image_w: 192,
            classes: vec![
                ClassSpec {
                    name: "td".into(),
                    size_range: (18.0, 30.0),
                    channels: vec![(0, 3.0), (1, 2.0)],
                    motion: (1.0, 0.0),
                    isotropic_motion: true,
                    morphology: Morphology::CompactBlob,
                },
                ClassSpec {
                    name: "tc".into(),
                    size_range: (30.0, 52.0),
                    channels: vec![(1, 2.5), (2, 3.0), (3, -2.0)],
                    motion: (2.0, 0.0),
                    isotropic_motion: true,
                    morphology: Morphology::RotatingSpiral,
                },
                ClassSpec {
                    name: "etc".into(),
                    size_range: (34.0, 56.0),
                    channels: vec![(2, 2.0), (4, 3.0)],
                    motion: (3.0, 0.0),
                    isotropic_motion: true,
                    morphology: Morphology::DriftingBlob,
                },
                ClassSpec {
                    name: "ar".into(),
                    size_range: (36.0, 48.0),
                    channels: vec![(4, 2.5), (5, 3.0), (0, -1.5)],
                    motion: (0.5, 0.0),
                    isotropic_motion: true,
                    morphology: Morphology::ElongatedBand,
                },
            ],
            events_per_day: (1, 3),
            drop_rate: 0.0,
            noise_std: 0.05,
            background_modes: 6,
        }
    }
}

impl SyntheticEventSpec {
    /// Two classes identical except for motion: temporal information is the
    /// only class signal, so framewise models must guess.
    pub fn motion_contrast() -> Self {
        let stay = ClassSpec {
            name: "stay".into(),
            size_range: (26.0, 40.0),
            channels: vec![(0, 3.0), (2, 2.5)],
            motion: (0.0, 0.0),
            isotropic_motion: false,
            morphology: Morphology::CompactBlob,
        };
        let mover = ClassSpec {
            name: "mover".into(),
            motion: (3.5, 0.0),
            isotropic_motion: true,
            ..stay.clone()
        };
        SyntheticEventSpec {
            classes: vec![stay, mover],
            events_per_day: (1, 2),
            ..SyntheticEventSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::invalid("at least one event class required"));
        }
        for c in &self.classes {
            if c.size_range.0 <= 0.0 || c.size_range.1 < c.size_range.0 {
                return Err(Error::invalid(format!("class {}: invalid size range", c.name)));
            }
            if c.channels.iter().any(|&(ch, _)| ch >= self.channels) {
                return Err(Error::invalid(format!("class {}: channel index out of range", c.name)));
            }
        }
        if !(0.0..1.0).contains(&self.drop_rate) {
            return Err(Error::invalid("drop rate must be in [0, 1)"));
        }
        if self.events_per_day.0 > self.events_per_day.1 {
            return Err(Error::invalid("events_per_day range is reversed"));
        }
        if self.timesteps == 0 || self.timesteps % 2 != 0 {
            return Err(Error::invalid("timesteps must be positive and even"));
        }
        Ok(())
    }

    pub fn labeled_frames(&self) -> Vec<usize> {
        (0..self.timesteps).step_by(2).collect()
    }

    /// Box extents for an event of base size `s`.
    pub fn box_extent(morphology: Morphology, s: f64) -> (f64, f64) {
        match morphology {
            Morphology::ElongatedBand => (1.8 * s, 0.45 * s),
            _ => (s, s),
        }
    }
}

/// One planted event, the generator's own ground truth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlantedEvent {
    pub class_id: usize,
    /// Center at frame 0.
    pub x0: f64,
    pub y0: f64,
    /// Pixels per frame.
    pub vx: f64,
    pub vy: f64,
    pub w: f64,
    pub h: f64,
    pub size: f64,
    /// Per-event pattern phase (spiral arm angle at frame 0).
    pub phase: f64,
    /// Left out of the labels file (simulated false negative).
    pub dropped: bool,
}

impl PlantedEvent {
    pub fn center_at(&self, frame: usize) -> (f64, f64) {
        (self.x0 + self.vx * frame as f64, self.y0 + self.vy * frame as f64)
    }

    pub fn bbox_at(&self, frame: usize) -> BBox {
        let (x, y) = self.center_at(frame);
        BBox::new(x, y, self.w, self.h, self.class_id, frame)
    }
}

#[derive(Debug)]
pub struct GenSummary {
    pub days: usize,
    pub planted: Vec<Vec<PlantedEvent>>,
    pub total_events: usize,
    pub dropped_events: usize,
    pub manifest: DatasetManifest,
}

const SPIRAL_SPIN: f64 = 0.7; // radians per frame

/// Additive pattern value of an event at offset (dx, dy) from its center.
pub fn event_pattern(morphology: Morphology, size: f64, phase: f64, frame: usize, dx: f64, dy: f64) -> f64 {
    match morphology {
        Morphology::CompactBlob | Morphology::DriftingBlob => {
            let sigma = size / 4.0;
            (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
        }
        Morphology::RotatingSpiral => {
            let sigma = size / 4.0;
            let env = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            let r = (dx * dx + dy * dy).sqrt();
            let theta = dy.atan2(dx);
            let arm = (2.0 * theta + r / (0.15 * size) - SPIRAL_SPIN * frame as f64 + phase).cos();
            env * (0.65 + 0.35 * arm)
        }
        Morphology::ElongatedBand => {
            let (w, h) = SyntheticEventSpec::box_extent(Morphology::ElongatedBand, size);
            let (sx, sy) = (w / 4.0, h / 4.0);
            (-(dx * dx / (2.0 * sx * sx) + dy * dy / (2.0 * sy * sy))).exp()
        }
    }
}

struct BackgroundMode {
    amp: f64,
    fx: f64,
    fy: f64,
    phase: f64,
    drift: f64,
}

/// Writes manifest, sample files, and labels for `n_days` seeded days.
pub fn generate_synthetic_dataset(
    spec: &SyntheticEventSpec,
    out_dir: &Path,
    n_days: usize,
    seed: u64,
) -> Result<GenSummary> {
    spec.validate()?;
    if n_days == 0 {
        return Err(Error::invalid("n_days must be positive"));
    }
    std::fs::create_dir_all(out_dir.join("samples"))
        .map_err(|e| Error::runtime(format!("{}: {e}", out_dir.display())))?;

    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut planted: Vec<Vec<PlantedEvent>> = Vec::with_capacity(n_days);
    for _ in 0..n_days {
        let day_seed: u64 = master.random();
        let mut rng = ChaCha8Rng::seed_from_u64(day_seed);
        let events = plant_events(spec, &mut rng);
        let field = render_day(spec, &events, &mut rng);
        planted.push(events);
        let day = planted.len() - 1;
        write_sample_file(&out_dir.join("samples").join(sample_file_name(day)), &field)?;
    }

    // Labels: only labeled frames, only non-dropped events.
    let labeled = spec.labeled_frames();
    {
        let mut w = BufWriter::new(File::create(out_dir.join("labels.csv"))?);
        writeln!(w, "day,frame,class_id,x,y,w,h")?;
        for (day, events) in planted.iter().enumerate() {
            for ev in events {
                if ev.dropped {
                    continue;
                }
                for &f in &labeled {
                    let (x, y) = ev.center_at(f);
                    writeln!(w, "{day},{f},{},{x:.4},{y:.4},{:.4},{:.4}", ev.class_id, ev.w, ev.h)?;
                }
            }
        }
        w.flush()?;
    }

    let mut manifest = DatasetManifest {
        channels: spec.channels,
        timesteps_per_sample: spec.timesteps,
        image_h: spec.image_h,
        image_w: spec.image_w,
        num_classes: spec.classes.len(),
        class_names: spec.classes.iter().map(|c| c.name.clone()).collect(),
        channel_mean: vec![0.0; spec.channels],
        channel_std: vec![1.0; spec.channels],
        sample_count: n_days,
        labeled_frames: labeled,
    };
    let (mean, std) = compute_channel_stats(out_dir, &manifest)?;
    manifest.channel_mean = mean;
    manifest.channel_std = std;
    let mut mf = BufWriter::new(File::create(out_dir.join("manifest.json"))?);
    serde_json::to_writer_pretty(&mut mf, &manifest)?;
    mf.flush()?;

    let total_events = planted.iter().map(Vec::len).sum();
    let dropped_events = planted.iter().flatten().filter(|e| e.dropped).count();
    Ok(GenSummary { days: n_days, planted, total_events, dropped_events, manifest })
}

fn plant_events(spec: &SyntheticEventSpec, rng: &mut ChaCha8Rng) -> Vec<PlantedEvent> {
    let (lo, hi) = spec.events_per_day;
    let count = rng.random_range(lo..=hi);
    let last = (spec.timesteps - 1) as f64;
    let mut events: Vec<PlantedEvent> = Vec::with_capacity(count);
    for _ in 0..count {
        let class_id = rng.random_range(0..spec.classes.len());
        let class = &spec.classes[class_id];
        let size = rng.random_range(class.size_range.0..=class.size_range.1);
        let (w, h) = SyntheticEventSpec::box_extent(class.morphology, size);
        let (vx, vy) = if class.isotropic_motion {
            let speed = (class.motion.0 * class.motion.0 + class.motion.1 * class.motion.1).sqrt();
            let angle = rng.random_range(0.0..TAU);
            (speed * angle.cos(), speed * angle.sin())
        } else {
            class.motion
        };
        // Keep the full box inside the image across all frames.
        let (img_w, img_h) = (spec.image_w as f64, spec.image_h as f64);
        let x_min = w / 2.0 + 1.0 - (vx * last).min(0.0);
        let x_max = img_w - w / 2.0 - 1.0 - (vx * last).max(0.0);
        let y_min = h / 2.0 + 1.0 - (vy * last).min(0.0);
        let y_max = img_h - h / 2.0 - 1.0 - (vy * last).max(0.0);
        if x_min >= x_max || y_min >= y_max {
            continue; // event too large or fast for the image; skip
        }
        let mut accepted = None;
        for _attempt in 0..50 {
            let x0 = rng.random_range(x_min..x_max);
            let y0 = rng.random_range(y_min..y_max);
            let clear = events.iter().all(|other| {
                (0..spec.timesteps).step_by(2).all(|f| {
                    let (ox, oy) = other.center_at(f);
                    let fx = x0 + vx * f as f64;
                    let fy = y0 + vy * f as f64;
                    ((ox - fx).powi(2) + (oy - fy).powi(2)).sqrt() > 48.0
                })
            });
            if clear {
                accepted = Some((x0, y0));
                break;
            }
        }
        let Some((x0, y0)) = accepted else { continue };
        events.push(PlantedEvent {
            class_id,
            x0,
            y0,
            vx,
            vy,
            w,
            h,
            size,
            phase: rng.random_range(0.0..TAU),
            dropped: spec.drop_rate > 0.0 && rng.random_bool(spec.drop_rate),
        });
    }
    events
}

/// Renders one day's `[C, T, H, W]` field as f32, background plus events.
fn render_day(spec: &SyntheticEventSpec, events: &[PlantedEvent], rng: &mut ChaCha8Rng) -> Vec<f32> {
    let (c, t, h, w) = (spec.channels, spec.timesteps, spec.image_h, spec.image_w);
    let mut field = vec![0.0f32; c * t * h * w];
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).unwrap();

    for ch in 0..c {
        let modes: Vec<BackgroundMode> = (0..spec.background_modes)
            .map(|_| BackgroundMode {
                amp: (2.0 / spec.background_modes as f64).sqrt(),
                fx: rng.random_range(0.5..3.0),
                fy: rng.random_range(0.5..3.0),
                phase: rng.random_range(0.0..TAU),
                drift: rng.random_range(-0.3..0.3),
            })
            .collect();
        for frame in 0..t {
            let base = (ch * t + frame) * h * w;
            for row in 0..h {
                for col in 0..w {
                    let mut v = 0.0;
                    for m in &modes {
                        let arg = TAU * (m.fx * col as f64 / w as f64 + m.fy * row as f64 / h as f64)
                            + m.phase
                            + m.drift * frame as f64;
                        v += m.amp * arg.cos();
                    }
                    if spec.noise_std > 0.0 {
                        v += noise.sample(rng);
                    }
                    field[base + row * w + col] = v as f32;
                }
            }
        }
    }

    for ev in events {
        let class = &spec.classes[ev.class_id];
        // Stamp within a padded bounding window around the moving center.
        let reach_x = ev.w * 1.25;
        let reach_y = ev.h * 1.25;
        for frame in 0..t {
            let (cx, cy) = ev.center_at(frame);
            let row_lo = ((cy - reach_y).floor().max(0.0)) as usize;
            let row_hi = ((cy + reach_y).ceil().min(h as f64 - 1.0)) as usize;
            let col_lo = ((cx - reach_x).floor().max(0.0)) as usize;
            let col_hi = ((cx + reach_x).ceil().min(w as f64 - 1.0)) as usize;
            for &(ch, amp) in &class.channels {
                let base = (ch * t + frame) * h * w;
                for row in row_lo..=row_hi {
                    let dy = row as f64 - cy;
                    for col in col_lo..=col_hi {
                        let dx = col as f64 - cx;
                        let p = event_pattern(class.morphology, ev.size, ev.phase, frame, dx, dy);
                        field[base + row * w + col] += (amp * p) as f32;
                    }
                }
            }
        }
    }
    field
}
