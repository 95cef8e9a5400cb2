//! The training objective: reconstruction error plus the anchor-grid
//! supervision terms (box regression, objectness confidence, class), combined
//! as `total = (box + conf + cls)/N + lambda * rec`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::TargetMap;
use crate::model::HeadOutputs;
use crate::tensor::{add, scale, smooth_l1, smooth_l1_deriv, Tensor};

/// Probabilities are clamped here before logs; below the clamp the loss is
/// constant and the gradient zero.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Box center-offset weight.
    pub alpha: f64,
    /// Box log-size weight.
    pub beta: f64,
    /// No-object confidence weight; kept low to tolerate label false negatives.
    pub gamma: f64,
    /// Reconstruction weight (0 = purely supervised).
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 5.0, beta: 7.0, gamma: 0.5, lambda: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 || self.gamma < 0.0 || self.lambda < 0.0 {
            return Err(Error::invalid("loss weights must be non-negative"));
        }
        Ok(())
    }
}

/// Scalar values of every term for one step. `l_box`, `l_conf`, `l_cls` are
/// the raw weighted sums before the 1/N; `total = l_sup + lambda * l_rec`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub l_rec: f64,
    pub l_sup: f64,
    pub l_box: f64,
    pub l_conf: f64,
    pub l_cls: f64,
}

/// Mean squared difference, normalized by the total element count.
pub fn reconstruction_loss(input: &Tensor, reconstruction: &Tensor) -> Result<Tensor> {
    if input.shape() != reconstruction.shape() {
        return Err(Error::invalid(format!(
            "reconstruction shape {:?} does not match input {:?}",
            reconstruction.shape(),
            input.shape()
        )));
    }
    let m = input.numel() as f64;
    let value = input
        .data()
        .iter()
        .zip(reconstruction.data().iter())
        .map(|(x, r)| (x - r) * (x - r))
        .sum::<f64>()
        / m;
    Ok(Tensor::from_op(
        vec![1],
        vec![value],
        vec![input.clone(), reconstruction.clone()],
        Box::new(move |up, _out, parents| {
            let x = parents[0].data();
            let r = parents[1].data();
            let gx = parents[0]
                .is_tracked()
                .then(|| x.iter().zip(r.iter()).map(|(x, r)| up[0] * 2.0 * (x - r) / m).collect());
            let gr = parents[1]
                .is_tracked()
                .then(|| x.iter().zip(r.iter()).map(|(x, r)| up[0] * 2.0 * (r - x) / m).collect());
            vec![gx, gr]
        }),
    ))
}

fn check_head_shape(t: &Tensor, channels: usize, target: &TargetMap, what: &str) -> Result<usize> {
    let want = [channels, target.t_lab, target.rows, target.cols];
    if t.shape() != want {
        return Err(Error::invalid(format!(
            "{what} shape {:?} does not align with target map {want:?}",
            t.shape()
        )));
    }
    Ok(target.t_lab * target.rows * target.cols)
}

/// Smooth-L1 regression on the t-parameters at object cells only:
/// `alpha * (R(dtx) + R(dty)) + beta * (R(dtw) + R(dth))` summed over cells.
pub fn box_loss(pred_params: &Tensor, target: &TargetMap, weights: &LossWeights) -> Result<Tensor> {
    let cells = check_head_shape(pred_params, 4, target, "box head")?;
    let (alpha, beta) = (weights.alpha, weights.beta);
    let value = {
        let p = pred_params.data();
        let mut acc = 0.0;
        for j in 0..cells {
            if !target.obj[j] {
                continue;
            }
            let t = &target.params[j];
            acc += alpha * (smooth_l1(p[j] - t.tx) + smooth_l1(p[cells + j] - t.ty))
                + beta * (smooth_l1(p[2 * cells + j] - t.tw) + smooth_l1(p[3 * cells + j] - t.th));
        }
        acc
    };
    let target_b = target.clone();
    Ok(Tensor::from_op(
        vec![1],
        vec![value],
        vec![pred_params.clone()],
        Box::new(move |up, _out, parents| {
            let g = parents[0].is_tracked().then(|| {
                let p = parents[0].data();
                let mut g = vec![0.0; p.len()];
                for j in 0..cells {
                    if !target_b.obj[j] {
                        continue;
                    }
                    let t = &target_b.params[j];
                    g[j] = up[0] * alpha * smooth_l1_deriv(p[j] - t.tx);
                    g[cells + j] = up[0] * alpha * smooth_l1_deriv(p[cells + j] - t.ty);
                    g[2 * cells + j] = up[0] * beta * smooth_l1_deriv(p[2 * cells + j] - t.tw);
                    g[3 * cells + j] = up[0] * beta * smooth_l1_deriv(p[3 * cells + j] - t.th);
                }
                g
            });
            vec![g]
        }),
    ))
}

/// Weighted cross-entropy of the two-way objectness distribution: object
/// cells pay `-log p(obj)`, no-object cells pay `gamma * -log p(noobj)`.
/// Channel 0 is no-object, channel 1 is object.
pub fn confidence_loss(obj_probs: &Tensor, target: &TargetMap, weights: &LossWeights) -> Result<Tensor> {
    let cells = check_head_shape(obj_probs, 2, target, "objectness head")?;
    let gamma = weights.gamma;
    let value = {
        let p = obj_probs.data();
        let mut acc = 0.0;
        for j in 0..cells {
            if target.obj[j] {
                acc -= p[cells + j].max(LOG_EPS).ln();
            } else {
                acc -= gamma * p[j].max(LOG_EPS).ln();
            }
        }
        acc
    };
    let target_b = target.clone();
    Ok(Tensor::from_op(
        vec![1],
        vec![value],
        vec![obj_probs.clone()],
        Box::new(move |up, _out, parents| {
            let g = parents[0].is_tracked().then(|| {
                let p = parents[0].data();
                let mut g = vec![0.0; p.len()];
                for j in 0..cells {
                    if target_b.obj[j] {
                        if p[cells + j] >= LOG_EPS {
                            g[cells + j] = -up[0] / p[cells + j];
                        }
                    } else if p[j] >= LOG_EPS {
                        g[j] = -up[0] * gamma / p[j];
                    }
                }
                g
            });
            vec![g]
        }),
    ))
}

/// Cross-entropy against the one-hot class at object cells only.
pub fn class_loss(class_probs: &Tensor, target: &TargetMap) -> Result<Tensor> {
    let cells = check_head_shape(class_probs, target.num_classes, target, "class head")?;
    let value = {
        let p = class_probs.data();
        let mut acc = 0.0;
        for j in 0..cells {
            if target.obj[j] {
                acc -= p[target.class_id[j] * cells + j].max(LOG_EPS).ln();
            }
        }
        acc
    };
    let target_b = target.clone();
    Ok(Tensor::from_op(
        vec![1],
        vec![value],
        vec![class_probs.clone()],
        Box::new(move |up, _out, parents| {
            let g = parents[0].is_tracked().then(|| {
                let p = parents[0].data();
                let mut g = vec![0.0; p.len()];
                for j in 0..cells {
                    if target_b.obj[j] {
                        let idx = target_b.class_id[j] * cells + j;
                        if p[idx] >= LOG_EPS {
                            g[idx] = -up[0] / p[idx];
                        }
                    }
                }
                g
            });
            vec![g]
        }),
    ))
}

/// Combines the terms per the headline objective. `n_frames` is the number
/// of time steps in the minibatch (8 semi-supervised, 4 labeled-only).
///
/// Returns the scalar graph node to backprop plus the numeric breakdown.
/// With `lambda == 0` the returned total *is* the supervised node, so
/// `total == l_sup` holds bit-exactly.
pub fn total_loss(
    input: &Tensor,
    reconstruction: &Tensor,
    heads: &HeadOutputs,
    target: &TargetMap,
    weights: &LossWeights,
    n_frames: usize,
) -> Result<(Tensor, LossBreakdown)> {
    weights.validate()?;
    if n_frames == 0 {
        return Err(Error::invalid("n_frames must be positive"));
    }
    let l_box = box_loss(&heads.box_params, target, weights)?;
    let l_conf = confidence_loss(&heads.obj_probs, target, weights)?;
    let l_cls = class_loss(&heads.class_probs, target)?;
    let l_rec = reconstruction_loss(input, reconstruction)?;
    let l_sup = scale(&add(&add(&l_box, &l_conf)?, &l_cls)?, 1.0 / n_frames as f64);
    let total = if weights.lambda == 0.0 {
        l_sup.clone()
    } else {
        add(&l_sup, &scale(&l_rec, weights.lambda))?
    };
    let breakdown = LossBreakdown {
        total: total.item(),
        l_rec: l_rec.item(),
        l_sup: l_sup.item(),
        l_box: l_box.item(),
        l_conf: l_conf.item(),
        l_cls: l_cls.item(),
    };
    Ok((total, breakdown))
}
