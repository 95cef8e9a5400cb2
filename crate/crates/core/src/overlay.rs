//! Prediction overlays: one binary PPM (P6) per labeled frame, a grayscale
//! channel with ground truth in green and high-confidence predictions in red.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::Detection;
use crate::geometry::BBox;

pub const GT_COLOR: [u8; 3] = [0, 200, 0];
pub const PRED_COLOR: [u8; 3] = [230, 0, 0];

pub struct OverlayImage {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major.
    pub rgb: Vec<u8>,
}

impl OverlayImage {
    /// Grayscale base from one channel's frame, min-max scaled.
    pub fn from_frame(frame: &[f64], height: usize, width: usize) -> OverlayImage {
        assert_eq!(frame.len(), height * width);
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &v in frame {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let span = (hi - lo).max(1e-12);
        let mut rgb = Vec::with_capacity(frame.len() * 3);
        for &v in frame {
            let g = (255.0 * (v - lo) / span).round().clamp(0.0, 255.0) as u8;
            rgb.extend_from_slice(&[g, g, g]);
        }
        OverlayImage { width, height, rgb }
    }

    fn put(&mut self, row: i64, col: i64, color: [u8; 3]) {
        if row < 0 || col < 0 || row >= self.height as i64 || col >= self.width as i64 {
            return;
        }
        let idx = (row as usize * self.width + col as usize) * 3;
        self.rgb[idx..idx + 3].copy_from_slice(&color);
    }

    /// One-pixel rectangle outline, clipped at the image border.
    pub fn draw_box(&mut self, b: &BBox, color: [u8; 3]) {
        let x0 = (b.x - b.w / 2.0).round() as i64;
        let x1 = (b.x + b.w / 2.0).round() as i64;
        let y0 = (b.y - b.h / 2.0).round() as i64;
        let y1 = (b.y + b.h / 2.0).round() as i64;
        for col in x0..=x1 {
            self.put(y0, col, color);
            self.put(y1, col, color);
        }
        for row in y0..=y1 {
            self.put(row, x0, color);
            self.put(row, x1, color);
        }
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.rgb)?;
        w.flush()?;
        Ok(())
    }
}

/// Renders one labeled frame: ground truth first, then predictions at or
/// above the confidence floor (so predictions stay visible on overlap).
pub fn render_overlay(
    frame: &[f64],
    height: usize,
    width: usize,
    gts: &[BBox],
    predictions: &[Detection],
    conf_floor: f64,
) -> OverlayImage {
    let mut img = OverlayImage::from_frame(frame, height, width);
    for gt in gts {
        img.draw_box(gt, GT_COLOR);
    }
    for det in predictions {
        if det.confidence >= conf_floor {
            img.draw_box(&det.bbox, PRED_COLOR);
        }
    }
    img
}

/// Minimal P6 reader for round-trip tests.
pub fn read_ppm(path: &Path) -> Result<OverlayImage> {
    let bytes = std::fs::read(path)?;
    let header_end = bytes
        .windows(1)
        .enumerate()
        .filter(|(_, w)| w[0] == b'\n')
        .map(|(i, _)| i)
        .nth(2)
        .ok_or_else(|| Error::runtime("ppm: truncated header"))?;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| Error::runtime("ppm: non-utf8 header"))?;
    let mut lines = header.lines();
    if lines.next() != Some("P6") {
        return Err(Error::runtime("ppm: missing P6 magic"));
    }
    let dims: Vec<usize> = lines
        .next()
        .unwrap_or_default()
        .split_whitespace()
        .filter_map(|t| t.parse().ok())
        .collect();
    if dims.len() != 2 {
        return Err(Error::runtime("ppm: bad dimensions"));
    }
    let rgb = bytes[header_end + 1..].to_vec();
    if rgb.len() != dims[0] * dims[1] * 3 {
        return Err(Error::runtime("ppm: payload size mismatch"));
    }
    Ok(OverlayImage { width: dims[0], height: dims[1], rgb })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn drawn_extents_match_box_coordinates() {
        let frame = vec![0.0; 64 * 96];
        let b = BBox::new(40.0, 30.0, 20.0, 10.0, 0, 0);
        let img = render_overlay(&frame, 64, 96, &[], &[], 0.8);
        let mut img = img;
        img.draw_box(&b, PRED_COLOR);
        let mut min_col = usize::MAX;
        let mut max_col = 0;
        let mut min_row = usize::MAX;
        let mut max_row = 0;
        for row in 0..64 {
            for col in 0..96 {
                if img.rgb[(row * 96 + col) * 3] == PRED_COLOR[0] {
                    min_col = min_col.min(col);
                    max_col = max_col.max(col);
                    min_row = min_row.min(row);
                    max_row = max_row.max(row);
                }
            }
        }
        assert!((min_col as f64 - (b.x - b.w / 2.0)).abs() <= 1.0);
        assert!((max_col as f64 - (b.x + b.w / 2.0)).abs() <= 1.0);
        assert!((min_row as f64 - (b.y - b.h / 2.0)).abs() <= 1.0);
        assert!((max_row as f64 - (b.y + b.h / 2.0)).abs() <= 1.0);
    }

    #[test]
    fn ppm_roundtrip() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("x.ppm");
        let frame: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let img = OverlayImage::from_frame(&frame, 3, 4);
        img.write_ppm(&path).unwrap();
        let back = read_ppm(&path).unwrap();
        assert_eq!(back.width, 4);
        assert_eq!(back.height, 3);
        assert_eq!(back.rgb, img.rgb);
    }

    #[test]
    fn low_confidence_predictions_are_skipped() {
        let frame = vec![0.5; 16 * 16];
        let det = Detection {
            bbox: BBox::new(8.0, 8.0, 6.0, 6.0, 0, 0),
            confidence: 0.4,
            class_probs: vec![1.0],
        };
        let img = render_overlay(&frame, 16, 16, &[], &[det], 0.8);
        assert!(img.rgb.chunks(3).all(|p| p[0] == p[1] && p[1] == p[2]), "no red pixels drawn");
    }
}
