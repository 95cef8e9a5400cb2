//! Anchor-grid geometry: boxes, the t-parametrization against anchors, IOU,
//! and ground-truth-to-cell assignment.
//!
//! Coordinates are (x = column, y = row), origin top-left, boxes given by
//! center and size in pixels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Class-tagged axis-aligned box at one frame. Anchor boxes reuse this type
/// with `class_id` and `frame` set to zero and ignored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub class_id: usize,
    pub frame: usize,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64, class_id: usize, frame: usize) -> BBox {
        BBox { x, y, w, h, class_id, frame }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

/// Regular lattice of fixed-size square anchors tiling one frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorGrid {
    pub rows: usize,
    pub cols: usize,
    /// Anchor side length in pixels.
    pub cell: usize,
}

impl AnchorGrid {
    pub fn num_anchors(&self) -> usize {
        self.rows * self.cols
    }

    /// Anchor box of cell (row, col), centered at ((col+0.5)c, (row+0.5)c).
    pub fn anchor(&self, row: usize, col: usize) -> BBox {
        let c = self.cell as f64;
        BBox::new((col as f64 + 0.5) * c, (row as f64 + 0.5) * c, c, c, 0, 0)
    }

    pub fn image_w(&self) -> usize {
        self.cols * self.cell
    }

    pub fn image_h(&self) -> usize {
        self.rows * self.cell
    }
}

/// Dimensionless center offsets and log size ratios relative to an anchor.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BoxParam {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

/// Per-cell, per-labeled-frame supervision derived from ground-truth boxes.
#[derive(Debug, Clone)]
pub struct TargetMap {
    pub t_lab: usize,
    pub rows: usize,
    pub cols: usize,
    pub num_classes: usize,
    /// Objectness indicator, `t_lab * rows * cols`.
    pub obj: Vec<bool>,
    /// Encoded box params per cell; zeros where `obj` is false.
    pub params: Vec<BoxParam>,
    /// Class id per cell; only meaningful where `obj` is true.
    pub class_id: Vec<usize>,
    /// Ground-truth boxes whose cell was already taken by a larger box.
    pub collisions: usize,
}

impl TargetMap {
    pub fn idx(&self, t: usize, row: usize, col: usize) -> usize {
        (t * self.rows + row) * self.cols + col
    }

    /// Number of cells carrying an assigned ground-truth box.
    pub fn assigned(&self) -> usize {
        self.obj.iter().filter(|&&o| o).count()
    }
}

/// Grid of `image_h/cell x image_w/cell` anchors; extents must tile exactly.
pub fn build_anchor_grid(image_h: usize, image_w: usize, cell: usize) -> Result<AnchorGrid> {
    if cell == 0 {
        return Err(Error::invalid("anchor cell size must be positive"));
    }
    if image_h % cell != 0 || image_w % cell != 0 {
        return Err(Error::invalid(format!(
            "image {image_h}x{image_w} is not an exact multiple of cell {cell}"
        )));
    }
    Ok(AnchorGrid { rows: image_h / cell, cols: image_w / cell, cell })
}

/// Faster-R-CNN-style t-parametrization of `bbox` against `anchor`.
pub fn encode_box(bbox: &BBox, anchor: &BBox) -> Result<BoxParam> {
    if bbox.w <= 0.0 || bbox.h <= 0.0 {
        return Err(Error::invalid(format!("box size must be positive, got {}x{}", bbox.w, bbox.h)));
    }
    if anchor.w <= 0.0 || anchor.h <= 0.0 {
        return Err(Error::invalid("anchor size must be positive"));
    }
    Ok(BoxParam {
        tx: (bbox.x - anchor.x) / anchor.w,
        ty: (bbox.y - anchor.y) / anchor.h,
        tw: (bbox.w / anchor.w).ln(),
        th: (bbox.h / anchor.h).ln(),
    })
}

/// Exact inverse of [`encode_box`]. The exponential guarantees positive
/// sizes for any parameter values. Class and frame come from the caller.
pub fn decode_box(param: &BoxParam, anchor: &BBox) -> BBox {
    BBox {
        x: anchor.x + param.tx * anchor.w,
        y: anchor.y + param.ty * anchor.h,
        w: anchor.w * param.tw.exp(),
        h: anchor.h * param.th.exp(),
        class_id: 0,
        frame: 0,
    }
}

/// Intersection area over union area, in [0, 1].
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ax0 = a.x - a.w / 2.0;
    let ax1 = a.x + a.w / 2.0;
    let ay0 = a.y - a.h / 2.0;
    let ay1 = a.y + a.h / 2.0;
    let bx0 = b.x - b.w / 2.0;
    let bx1 = b.x + b.w / 2.0;
    let by0 = b.y - b.h / 2.0;
    let by1 = b.y + b.h / 2.0;
    let ix = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let iy = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = ix * iy;
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    inter / union
}

/// Assigns each ground-truth box to the cell containing its center
/// (floor(x/cell), floor(y/cell)) on each labeled frame. When two boxes land
/// in one cell the larger-area box is kept and the collision counted.
pub fn assign_targets(
    gt_boxes: &[BBox],
    grid: &AnchorGrid,
    labeled_frames: &[usize],
    num_classes: usize,
) -> Result<TargetMap> {
    let t_lab = labeled_frames.len();
    let n = t_lab * grid.rows * grid.cols;
    let mut map = TargetMap {
        t_lab,
        rows: grid.rows,
        cols: grid.cols,
        num_classes,
        obj: vec![false; n],
        params: vec![BoxParam::default(); n],
        class_id: vec![0; n],
        collisions: 0,
    };
    // Which slot, if taken, holds which area (for the largest-wins rule).
    let mut areas = vec![0.0_f64; n];
    let (img_w, img_h) = (grid.image_w() as f64, grid.image_h() as f64);
    for b in gt_boxes {
        if b.x < 0.0 || b.x >= img_w || b.y < 0.0 || b.y >= img_h {
            return Err(Error::invalid(format!(
                "box center ({}, {}) outside {img_w}x{img_h} image",
                b.x, b.y
            )));
        }
        if b.class_id >= num_classes {
            return Err(Error::invalid(format!(
                "class id {} out of range for {num_classes} classes",
                b.class_id
            )));
        }
        let Some(t) = labeled_frames.iter().position(|&f| f == b.frame) else {
            return Err(Error::invalid(format!(
                "box on frame {} which is not a labeled frame {labeled_frames:?}",
                b.frame
            )));
        };
        let col = (b.x / grid.cell as f64).floor() as usize;
        let row = (b.y / grid.cell as f64).floor() as usize;
        let idx = map.idx(t, row, col);
        if map.obj[idx] {
            map.collisions += 1;
            if b.area() <= areas[idx] {
                continue;
            }
        }
        let anchor = grid.anchor(row, col);
        map.params[idx] = encode_box(b, &anchor)?;
        map.class_id[idx] = b.class_id;
        map.obj[idx] = true;
        areas[idx] = b.area();
    }
    Ok(map)
}
