//! Bottleneck feature export: one CSV row per (day, frame, grid cell) with
//! the code-layer feature vector, for external projection tools.

use std::io::Write;

use crate::data::Dataset;
use crate::error::Result;
use crate::geometry::assign_targets;
use crate::model::{encoder_forward, ModelParams};
use crate::tensor::no_grad;
use crate::train::model_grid;

/// Writes `day,frame,row,col,label,f0..f{C-1}` rows; `label` is the class id
/// at that cell on labeled frames with an assigned box, else -1. Returns the
/// number of data rows written.
pub fn export_features(
    params: &ModelParams,
    dataset: &Dataset,
    n_days: usize,
    out: &mut impl Write,
) -> Result<usize> {
    let _guard = no_grad();
    let cfg = &params.config;
    let grid = model_grid(cfg)?;
    let labeled = cfg.labeled_frames();
    let code_shape = cfg.code_shape();
    let (c_code, t, rows, cols) = (code_shape[0], code_shape[1], code_shape[2], code_shape[3]);

    write!(out, "day,frame,row,col,label")?;
    for k in 0..c_code {
        write!(out, ",f{k}")?;
    }
    writeln!(out)?;

    let days = n_days.min(dataset.len());
    let mut written = 0usize;
    for day in 0..days {
        let (input, boxes) = dataset.load_sample(day)?;
        let targets = assign_targets(&boxes, &grid, &labeled, cfg.num_classes)?;
        let outputs = encoder_forward(params, &input)?;
        let code = outputs.last().unwrap();
        let data = code.data();
        let map = rows * cols;
        for frame in 0..t {
            let lab_idx = labeled.iter().position(|&f| f == frame);
            for row in 0..rows {
                for col in 0..cols {
                    let label: i64 = match lab_idx {
                        Some(tl) => {
                            let j = targets.idx(tl, row, col);
                            if targets.obj[j] {
                                targets.class_id[j] as i64
                            } else {
                                -1
                            }
                        }
                        None => -1,
                    };
                    write!(out, "{day},{frame},{row},{col},{label}")?;
                    for k in 0..c_code {
                        let v = data[(k * t + frame) * map + row * cols + col];
                        write!(out, ",{v:.6e}")?;
                    }
                    writeln!(out)?;
                    written += 1;
                }
            }
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate_synthetic_dataset, SyntheticEventSpec};
    use crate::model::{build_model, ModelConfig};

    #[test]
    fn row_and_column_counts_match_the_grid() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticEventSpec::default();
        generate_synthetic_dataset(&spec, dir.path(), 2, 4).unwrap();
        let dataset = Dataset::open(dir.path()).unwrap();
        let cfg = ModelConfig::desk();
        let params = build_model(&cfg, 3).unwrap();
        let mut buf = Vec::new();
        let rows = export_features(&params, &dataset, 2, &mut buf).unwrap();
        // 2 days x 8 frames x (2x3 grid) = 96 rows.
        assert_eq!(rows, 96);
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 97);
        // Desk code layer is 48 features wide: 5 metadata + 48 columns.
        assert_eq!(lines[0].split(',').count(), 53);
        assert!(lines[0].starts_with("day,frame,row,col,label,f0,"));
        // Labels only appear on labeled frames; odd frames are all -1.
        for line in &lines[1..] {
            let f: Vec<&str> = line.split(',').collect();
            let frame: usize = f[1].parse().unwrap();
            if frame % 2 == 1 {
                assert_eq!(f[4], "-1");
            }
        }
        // At least one labeled cell exists in a 2-day default dataset.
        assert!(lines[1..].iter().any(|l| {
            let f: Vec<&str> = l.split(',').collect();
            f[4] != "-1"
        }));
    }
}
