//! Dataset directory format and loader.
//!
//! A dataset directory holds `manifest.json`, `samples/day_%05d.bin` (raw
//! little-endian f32, C-order `[channel][frame][row][col]`), and `labels.csv`
//! with header `day,frame,class_id,x,y,w,h` in pixels.

pub mod synth;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::tensor::Tensor;

pub const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub channels: usize,
    pub timesteps_per_sample: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    /// Per-channel normalization statistics from this split.
    pub channel_mean: Vec<f64>,
    pub channel_std: Vec<f64>,
    pub sample_count: usize,
    pub labeled_frames: Vec<usize>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.channel_mean.len() != self.channels || self.channel_std.len() != self.channels {
            return Err(Error::invalid("manifest stats do not cover every channel"));
        }
        if self.channel_std.iter().any(|&s| s <= 0.0) {
            return Err(Error::invalid("manifest stddev must be positive"));
        }
        if self.class_names.len() != self.num_classes {
            return Err(Error::invalid("manifest class names do not match num_classes"));
        }
        if self
            .labeled_frames
            .iter()
            .any(|&f| f >= self.timesteps_per_sample)
        {
            return Err(Error::invalid("labeled frame outside the sample's timesteps"));
        }
        Ok(())
    }

    pub fn frame_elems(&self) -> usize {
        self.image_h * self.image_w
    }

    pub fn sample_elems(&self) -> usize {
        self.channels * self.timesteps_per_sample * self.frame_elems()
    }
}

pub fn sample_file_name(day: usize) -> String {
    format!("day_{day:05}.bin")
}

/// An opened dataset: manifest plus labels grouped per day.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
    labels: Vec<Vec<BBox>>,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Dataset> {
        let manifest_path = dir.join("manifest.json");
        let manifest: DatasetManifest = serde_json::from_reader(BufReader::new(
            File::open(&manifest_path)
                .map_err(|e| Error::runtime(format!("{}: {e}", manifest_path.display())))?,
        ))?;
        manifest.validate()?;
        let labels = read_labels(&dir.join("labels.csv"), &manifest)?;
        Ok(Dataset { dir: dir.to_path_buf(), manifest, labels })
    }

    pub fn len(&self) -> usize {
        self.manifest.sample_count
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Boxes on the labeled frames of one day, in pixel coordinates.
    pub fn boxes(&self, day: usize) -> &[BBox] {
        &self.labels[day]
    }

    /// Z-scored `[C, T, H, W]` tensor plus that day's ground-truth boxes.
    pub fn load_sample(&self, day: usize) -> Result<(Tensor, Vec<BBox>)> {
        if day >= self.len() {
            return Err(Error::invalid(format!(
                "sample index {day} out of range ({} samples)",
                self.len()
            )));
        }
        let raw = read_sample_file(&self.dir.join("samples").join(sample_file_name(day)), &self.manifest)?;
        let m = &self.manifest;
        let per_chan = m.timesteps_per_sample * m.frame_elems();
        let mut data = Vec::with_capacity(raw.len());
        for (c, chunk) in raw.chunks(per_chan).enumerate() {
            let (mean, std) = (m.channel_mean[c], m.channel_std[c]);
            data.extend(chunk.iter().map(|&v| (v as f64 - mean) / std));
        }
        let tensor = Tensor::from_vec(
            vec![m.channels, m.timesteps_per_sample, m.image_h, m.image_w],
            data,
        )?;
        Ok((tensor, self.labels[day].clone()))
    }
}

/// Raw (un-normalized) f32 payload of one sample file, with a byte-count
/// diagnostic on size mismatch.
pub fn read_sample_file(path: &Path, manifest: &DatasetManifest) -> Result<Vec<f32>> {
    let mut file = File::open(path).map_err(|e| Error::runtime(format!("{}: {e}", path.display())))?;
    let expected = manifest.sample_elems() * 4;
    let actual = file.metadata()?.len() as usize;
    if actual != expected {
        return Err(Error::runtime(format!(
            "{}: expected {expected} bytes (C*T*H*W*4), found {actual}",
            path.display()
        )));
    }
    let mut bytes = vec![0u8; expected];
    file.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn write_sample_file(path: &Path, values: &[f32]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_labels(path: &Path, manifest: &DatasetManifest) -> Result<Vec<Vec<BBox>>> {
    let mut labels = vec![Vec::new(); manifest.sample_count];
    let file = File::open(path).map_err(|e| Error::runtime(format!("{}: {e}", path.display())))?;
    let mut lines = BufReader::new(file).lines();
    match lines.next() {
        Some(Ok(h)) if h.trim() == "day,frame,class_id,x,y,w,h" => {}
        other => {
            return Err(Error::runtime(format!(
                "{}: bad labels header: {other:?}",
                path.display()
            )))
        }
    }
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(Error::runtime(format!(
                "{}:{}: expected 7 fields, got {}",
                path.display(),
                lineno + 2,
                fields.len()
            )));
        }
        let parse_err = |what: &str| {
            Error::runtime(format!("{}:{}: bad {what}", path.display(), lineno + 2))
        };
        let day: usize = fields[0].parse().map_err(|_| parse_err("day"))?;
        let frame: usize = fields[1].parse().map_err(|_| parse_err("frame"))?;
        let class_id: usize = fields[2].parse().map_err(|_| parse_err("class_id"))?;
        let x: f64 = fields[3].parse().map_err(|_| parse_err("x"))?;
        let y: f64 = fields[4].parse().map_err(|_| parse_err("y"))?;
        let w: f64 = fields[5].parse().map_err(|_| parse_err("w"))?;
        let h: f64 = fields[6].parse().map_err(|_| parse_err("h"))?;
        if day >= manifest.sample_count {
            return Err(Error::runtime(format!(
                "{}:{}: day {day} beyond sample count {}",
                path.display(),
                lineno + 2,
                manifest.sample_count
            )));
        }
        if !manifest.labeled_frames.contains(&frame) {
            return Err(Error::runtime(format!(
                "{}:{}: frame {frame} is not a labeled frame",
                path.display(),
                lineno + 2
            )));
        }
        labels[day].push(BBox::new(x, y, w, h, class_id, frame));
    }
    Ok(labels)
}

/// Population mean and standard deviation per channel over every frame of
/// every sample in the directory. Zero-variance channels are floored at
/// [`STD_FLOOR`] with a warning on stderr.
pub fn compute_channel_stats(dir: &Path, manifest: &DatasetManifest) -> Result<(Vec<f64>, Vec<f64>)> {
    if manifest.sample_count == 0 {
        return Err(Error::invalid("cannot compute statistics of an empty split"));
    }
    let c = manifest.channels;
    let mut sums = vec![0.0f64; c];
    let mut sq_sums = vec![0.0f64; c];
    let per_chan = manifest.timesteps_per_sample * manifest.frame_elems();
    for day in 0..manifest.sample_count {
        let raw = read_sample_file(&dir.join("samples").join(sample_file_name(day)), manifest)?;
        for (ch, chunk) in raw.chunks(per_chan).enumerate() {
            for &v in chunk {
                let v = v as f64;
                sums[ch] += v;
                sq_sums[ch] += v * v;
            }
        }
    }
    let n = (manifest.sample_count * per_chan) as f64;
    let mean: Vec<f64> = sums.iter().map(|s| s / n).collect();
    let std: Vec<f64> = sq_sums
        .iter()
        .zip(&mean)
        .enumerate()
        .map(|(ch, (sq, m))| {
            let var = (sq / n - m * m).max(0.0);
            let s = var.sqrt();
            if s < STD_FLOOR {
                eprintln!("warning: channel {ch} has near-zero variance; stddev floored at {STD_FLOOR}");
                STD_FLOOR
            } else {
                s
            }
        })
        .collect();
    Ok((mean, std))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_manifest(sample_count: usize) -> DatasetManifest {
        DatasetManifest {
            channels: 2,
            timesteps_per_sample: 8,
            image_h: 4,
            image_w: 4,
            num_classes: 4,
            class_names: vec!["a".into(), "b".into(), "c".into(), "d".into()],
            channel_mean: vec![0.0, 0.0],
            channel_std: vec![1.0, 1.0],
            sample_count,
            labeled_frames: vec![0, 2, 4, 6],
        }
    }

    fn write_split(dir: &Path, manifest: &DatasetManifest, fill: impl Fn(usize, usize) -> f32) {
        std::fs::create_dir_all(dir.join("samples")).unwrap();
        for day in 0..manifest.sample_count {
            let values: Vec<f32> = (0..manifest.sample_elems())
                .map(|i| fill(day, i))
                .collect();
            write_sample_file(&dir.join("samples").join(sample_file_name(day)), &values).unwrap();
        }
        serde_json::to_writer_pretty(
            File::create(dir.join("manifest.json")).unwrap(),
            manifest,
        )
        .unwrap();
        std::fs::write(dir.join("labels.csv"), "day,frame,class_id,x,y,w,h\n").unwrap();
    }

    #[test]
    fn sample_byte_size_is_checked() {
        let tmp = tempfile::tempdir().unwrap();
        let manifest = tiny_manifest(1);
        write_split(tmp.path(), &manifest, |_, i| i as f32);
        // Exact size: C*T*H*W*4 bytes.
        let meta = std::fs::metadata(tmp.path().join("samples").join(sample_file_name(0))).unwrap();
        assert_eq!(meta.len() as usize, 2 * 8 * 4 * 4 * 4);
        // Truncate one float: loader reports expected vs actual byte counts.
        let path = tmp.path().join("samples").join(sample_file_name(0));
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        let err = read_sample_file(&path, &manifest).unwrap_err().to_string();
        assert!(err.contains("1024") && err.contains("1020"), "{err}");
    }

    #[test]
    fn loader_roundtrip_within_f32_precision() {
        let tmp = tempfile::tempdir().unwrap();
        let manifest = tiny_manifest(1);
        write_split(tmp.path(), &manifest, |_, i| ((i * 37 % 101) as f32) / 101.0 - 0.5);
        let ds = Dataset::open(tmp.path()).unwrap();
        let (t, boxes) = ds.load_sample(0).unwrap();
        assert!(boxes.is_empty());
        assert_eq!(t.shape(), &[2, 8, 4, 4]);
        for (i, v) in t.data().iter().enumerate() {
            let want = ((i * 37 % 101) as f64) / 101.0 - 0.5;
            assert!((v - want).abs() <= 1e-6 * want.abs().max(1.0));
        }
        assert!(ds.load_sample(1).is_err());
    }

    #[test]
    fn stats_two_point_channel() {
        let tmp = tempfile::tempdir().unwrap();
        let manifest = tiny_manifest(2);
        // Channel 0 alternates {0,2}: mean 1, population stddev 1.
        // Channel 1 constant: stddev floored.
        write_split(tmp.path(), &manifest, |_, i| {
            let per_chan = 8 * 16;
            if i < per_chan {
                (i % 2 * 2) as f32
            } else {
                7.5
            }
        });
        let (mean, std) = compute_channel_stats(tmp.path(), &manifest).unwrap();
        assert_eq!(mean[0], 1.0);
        assert_eq!(std[0], 1.0);
        assert_eq!(mean[1], 7.5);
        assert_eq!(std[1], STD_FLOOR);
    }

    #[test]
    fn constant_channel_normalizes_to_zero() {
        let tmp = tempfile::tempdir().unwrap();
        let mut manifest = tiny_manifest(1);
        write_split(tmp.path(), &manifest, |_, _| 3.25);
        let (mean, std) = compute_channel_stats(tmp.path(), &manifest).unwrap();
        manifest.channel_mean = mean;
        manifest.channel_std = std;
        serde_json::to_writer_pretty(
            File::create(tmp.path().join("manifest.json")).unwrap(),
            &manifest,
        )
        .unwrap();
        let ds = Dataset::open(tmp.path()).unwrap();
        let (t, _) = ds.load_sample(0).unwrap();
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stats_permutation_invariant_over_samples() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let manifest = tiny_manifest(2);
        // Exact-in-f32 values so reordering cannot change the sums.
        write_split(a.path(), &manifest, |day, i| (day * 2) as f32 + (i % 2) as f32);
        write_split(b.path(), &manifest, |day, i| ((1 - day) * 2) as f32 + (i % 2) as f32);
        let sa = compute_channel_stats(a.path(), &manifest).unwrap();
        let sb = compute_channel_stats(b.path(), &manifest).unwrap();
        assert_eq!(sa, sb);
    }

    #[test]
    fn labels_on_unlabeled_frames_are_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let manifest = tiny_manifest(1);
        write_split(tmp.path(), &manifest, |_, _| 0.0);
        std::fs::write(
            tmp.path().join("labels.csv"),
            "day,frame,class_id,x,y,w,h\n0,3,0,1.0,1.0,2.0,2.0\n",
        )
        .unwrap();
        let err = Dataset::open(tmp.path()).unwrap_err().to_string();
        assert!(err.contains("not a labeled frame"), "{err}");
    }
}
