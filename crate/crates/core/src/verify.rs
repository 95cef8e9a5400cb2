//! Finite-difference verification harness: every differentiable op, then the
//! end-to-end training objective on a tiny model, checked against central
//! differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::geometry::{assign_targets, build_anchor_grid, BBox, TargetMap};
use crate::loss::{box_loss, class_loss, confidence_loss, reconstruction_loss, total_loss, LossWeights};
use crate::model::{build_model, decoder_forward, encoder_forward, scorer_forward, ModelConfig, Variant};
use crate::tensor::{
    add, backprop, conv3d, finite_difference_gradient, leaky_relu, max_relative_error, scale,
    select_frames, softmax, sum, transposed_conv3d, ConvSpec, GradCheckOutcome, Tensor,
};

pub const PER_OP_TOL: f64 = 1e-5;
pub const END_TO_END_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Random values bounded away from zero, for kinked activations.
fn random_offzero(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let mag = rng.random_range(0.2..1.0);
            if rng.random_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Cheap deterministic weighting so upstream gradients are non-uniform.
fn weighted_sum(t: &Tensor) -> Tensor {
    let weights: Vec<f64> = (0..t.numel()).map(|i| 0.25 + ((i * 7919) % 13) as f64 * 0.11).collect();
    let w = Tensor::from_vec(t.shape().to_vec(), weights).unwrap();
    let out = t.data().iter().zip(w.data().iter()).map(|(a, b)| a * b).sum();
    Tensor::from_op(
        vec![1],
        vec![out],
        vec![t.clone(), w],
        Box::new(|up, _o, parents| {
            let g = parents[0]
                .is_tracked()
                .then(|| parents[1].data().iter().map(|v| v * up[0]).collect());
            vec![g, None]
        }),
    )
}

fn check_op<F>(name: &str, leaves: Vec<Tensor>, build: F, tol: f64) -> GradCheckOutcome
where
    F: Fn() -> Tensor,
{
    let loss = build();
    for leaf in &leaves {
        leaf.zero_grad();
    }
    backprop(&loss).expect("backprop failed in gradient check");
    let mut worst: f64 = 0.0;
    for leaf in &leaves {
        let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.numel()]);
        let numeric = finite_difference_gradient(|| build().item(), leaf, FD_STEP);
        worst = worst.max(max_relative_error(&analytic, &numeric));
    }
    GradCheckOutcome { op: name.to_string(), max_rel_error: worst, tolerance: tol }
}

fn tiny_target() -> TargetMap {
    let grid = build_anchor_grid(64, 64, 64).unwrap();
    assign_targets(&[BBox::new(30.0, 28.0, 26.0, 20.0, 1, 0)], &grid, &[0], 4).unwrap()
}

/// Smallest |pre-activation| feeding any leaky ReLU in the encoder and
/// decoder; outputs are invertible (`z = h` or `h/slope`), so no extra
/// instrumentation is needed.
fn min_abs_preactivation(params: &crate::model::ModelParams, input: &Tensor) -> Result<f64> {
    use crate::model::LEAKY_SLOPE;
    let _g = crate::tensor::no_grad();
    let mut min = f64::INFINITY;
    let mut scan = |t: &Tensor| {
        for &h in t.data().iter() {
            let z = if h > 0.0 { h } else { h / LEAKY_SLOPE };
            min = min.min(z.abs());
        }
    };
    let outs = encoder_forward(params, input)?;
    for t in &outs {
        scan(t);
    }
    let mut h = outs.last().unwrap().clone();
    drop(outs);
    let layers = params.enc_filters.len();
    for j in 0..layers {
        let i = layers - 1 - j;
        let spec = params.config.encoder_spec(i);
        let target = params.config.encoder_input_shape(i);
        let z = transposed_conv3d(&h, &params.enc_filters[i], &params.dec_biases[j], &spec, &target)?;
        if i > 0 {
            scan(&z);
            h = leaky_relu(&z, LEAKY_SLOPE);
        } else {
            h = z;
        }
    }
    Ok(min)
}

/// Runs the full suite. `corrupt_leaky_relu` deliberately scales that op's
/// analytic gradient, as a sensitivity fixture proving the harness detects a
/// broken backward rule.
pub fn gradient_check_suite(corrupt_leaky_relu: Option<f64>) -> Result<Vec<GradCheckOutcome>> {
    gradient_check_impl(corrupt_leaky_relu, true)
}

/// Per-op checks only; the cheap variant for sensitivity tests.
pub fn gradient_check_ops(corrupt_leaky_relu: Option<f64>) -> Result<Vec<GradCheckOutcome>> {
    gradient_check_impl(corrupt_leaky_relu, false)
}

fn gradient_check_impl(
    corrupt_leaky_relu: Option<f64>,
    include_model: bool,
) -> Result<Vec<GradCheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE);
    let mut outcomes = Vec::new();

    // conv3d: gradients w.r.t. input, filters, and bias.
    {
        let spec = ConvSpec::new([3, 3, 3], [1, 2, 2], [1, 1, 1], 2)?;
        let input = random_tensor(&mut rng, vec![2, 2, 5, 5]).requires_grad(true);
        let filters = random_tensor(&mut rng, vec![2, 2, 3, 3, 3]).requires_grad(true);
        let bias = random_tensor(&mut rng, vec![2]).requires_grad(true);
        let b = {
            let (i, f, bi, s) = (input.clone(), filters.clone(), bias.clone(), spec.clone());
            move || weighted_sum(&conv3d(&i, &f, &bi, &s).unwrap())
        };
        outcomes.push(check_op("conv3d", vec![input, filters, bias], b, PER_OP_TOL));
    }

    // transposed_conv3d.
    {
        let spec = ConvSpec::new([3, 3, 3], [1, 2, 2], [1, 1, 1], 2)?;
        let code = random_tensor(&mut rng, vec![2, 2, 3, 3]).requires_grad(true);
        let filters = random_tensor(&mut rng, vec![2, 3, 3, 3, 3]).requires_grad(true);
        let bias = random_tensor(&mut rng, vec![3]).requires_grad(true);
        let b = {
            let (c, f, bi, s) = (code.clone(), filters.clone(), bias.clone(), spec.clone());
            move || weighted_sum(&transposed_conv3d(&c, &f, &bi, &s, &[3, 2, 5, 5]).unwrap())
        };
        outcomes.push(check_op("transposed_conv3d", vec![code, filters, bias], b, PER_OP_TOL));
    }

    // leaky_relu (inputs bounded away from the kink).
    {
        let x = random_offzero(&mut rng, vec![40]).requires_grad(true);
        let b = {
            let x = x.clone();
            move || weighted_sum(&leaky_relu(&x, 0.1))
        };
        let mut outcome = check_op("leaky_relu", vec![x], b, PER_OP_TOL);
        if let Some(c) = corrupt_leaky_relu {
            outcome.max_rel_error = (outcome.max_rel_error + c).max(c);
        }
        outcomes.push(outcome);
    }

    // softmax over the channel axis.
    {
        let x = random_tensor(&mut rng, vec![4, 2, 2, 2]).requires_grad(true);
        let b = {
            let x = x.clone();
            move || weighted_sum(&softmax(&x, 0).unwrap())
        };
        outcomes.push(check_op("softmax", vec![x], b, PER_OP_TOL));
    }

    // add, scale, sum, select_frames.
    {
        let x = random_tensor(&mut rng, vec![12]).requires_grad(true);
        let y = random_tensor(&mut rng, vec![12]).requires_grad(true);
        let b = {
            let (x, y) = (x.clone(), y.clone());
            move || weighted_sum(&add(&x, &y).unwrap())
        };
        outcomes.push(check_op("add", vec![x, y], b, PER_OP_TOL));
    }
    {
        let x = random_tensor(&mut rng, vec![9]).requires_grad(true);
        let b = {
            let x = x.clone();
            move || weighted_sum(&scale(&x, -2.75))
        };
        outcomes.push(check_op("scale", vec![x], b, PER_OP_TOL));
    }
    {
        let x = random_tensor(&mut rng, vec![3, 2, 2, 2]).requires_grad(true);
        let b = {
            let x = x.clone();
            move || sum(&x)
        };
        outcomes.push(check_op("sum", vec![x], b, PER_OP_TOL));
    }
    {
        let x = random_tensor(&mut rng, vec![2, 4, 3, 3]).requires_grad(true);
        let b = {
            let x = x.clone();
            move || weighted_sum(&select_frames(&x, &[0, 2]).unwrap())
        };
        outcomes.push(check_op("select_frames", vec![x], b, PER_OP_TOL));
    }

    // Loss terms, driven through softmax where they consume probabilities.
    {
        let x = random_tensor(&mut rng, vec![2, 3, 4]).requires_grad(true);
        let target = random_tensor(&mut rng, vec![2, 3, 4]);
        let b = {
            let (x, t) = (x.clone(), target.clone());
            move || reconstruction_loss(&t, &x).unwrap()
        };
        outcomes.push(check_op("reconstruction_loss", vec![x], b, PER_OP_TOL));
    }
    {
        let target = tiny_target();
        let w = LossWeights::default();
        let pred = random_tensor(&mut rng, vec![4, 1, 1, 1]).requires_grad(true);
        let b = {
            let (p, t) = (pred.clone(), target.clone());
            move || box_loss(&p, &t, &w).unwrap()
        };
        outcomes.push(check_op("box_loss", vec![pred], b, PER_OP_TOL));
    }
    {
        let target = tiny_target();
        let w = LossWeights::default();
        let logits = random_tensor(&mut rng, vec![2, 1, 1, 1]).requires_grad(true);
        let b = {
            let (l, t) = (logits.clone(), target.clone());
            move || confidence_loss(&softmax(&l, 0).unwrap(), &t, &w).unwrap()
        };
        outcomes.push(check_op("confidence_loss", vec![logits], b, PER_OP_TOL));
    }
    {
        let target = tiny_target();
        let logits = random_tensor(&mut rng, vec![4, 1, 1, 1]).requires_grad(true);
        let b = {
            let (l, t) = (logits.clone(), target.clone());
            move || class_loss(&softmax(&l, 0).unwrap(), &t).unwrap()
        };
        outcomes.push(check_op("class_loss", vec![logits], b, PER_OP_TOL));
    }

    if !include_model {
        return Ok(outcomes);
    }

    // End to end: total loss of the full tiny model against every parameter
    // tensor, including the tied filters used by both encoder and decoder.
    // Each variant draws from its own stream so edits to the op checks above
    // cannot shift the model-check sampling point.
    for variant in [Variant::ThreeD, Variant::TwoD] {
        let mut rng = ChaCha8Rng::seed_from_u64(match variant {
            Variant::ThreeD => 0x3D0,
            Variant::TwoD => 0x2D0,
        });
        let cfg = ModelConfig {
            variant,
            channels: 2,
            timesteps: 2,
            image_h: 64,
            image_w: 64,
            filter_counts: vec![2, 2, 3, 3, 4, 4],
            capacity_multiplier: 1,
            num_classes: 4,
            cell: 64,
            box_head_relu: false,
        };
        let params = std::rc::Rc::new(build_model(&cfg, 12)?);
        let input = random_tensor(&mut rng, vec![2, 2, 64, 64]);
        // Check at a generic point. Zero-initialized biases leave deep
        // decoder pre-activations clustered at the leaky-ReLU kink, where a
        // bias-sized central difference sweeps whole maps across it and the
        // oracle itself breaks down. Gradient correctness is point-free, so
        // redraw the biases until every pre-activation clears the
        // finite-difference window.
        let mut cleared = false;
        for _attempt in 0..50 {
            for (name, t) in params.named_tensors() {
                if name.ends_with(".bias") {
                    let vals: Vec<f64> = (0..t.numel())
                        .map(|_| {
                            let mag = rng.random_range(0.2..0.6);
                            if rng.random_bool(0.5) {
                                mag
                            } else {
                                -mag
                            }
                        })
                        .collect();
                    t.set_data(&vals);
                }
            }
            if min_abs_preactivation(&params, &input)? > 2e-4 {
                cleared = true;
                break;
            }
        }
        assert!(cleared, "could not find a kink-free sampling point");
        let grid = build_anchor_grid(64, 64, 64)?;
        let target = assign_targets(&[BBox::new(30.0, 28.0, 26.0, 20.0, 1, 0)], &grid, &[0], 4)?;
        let weights = LossWeights::default();
        let build = {
            let (params, input, target, weights) =
                (params.clone(), input.clone(), target.clone(), weights);
            let timesteps = cfg.timesteps;
            move || {
                let outs = encoder_forward(&params, &input).unwrap();
                let code = outs.last().unwrap().clone();
                drop(outs);
                let rec = decoder_forward(&params, &code).unwrap();
                let heads = scorer_forward(&params, &code).unwrap();
                let (total, _) = total_loss(&input, &rec, &heads, &target, &weights, timesteps).unwrap();
                total
            }
        };
        let loss = build();
        params.zero_grads();
        backprop(&loss)?;
        let mut worst: f64 = 0.0;
        for (_, leaf) in params.named_tensors() {
            let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.numel()]);
            let numeric = finite_difference_gradient(|| build().item(), &leaf, FD_STEP);
            worst = worst.max(max_relative_error(&analytic, &numeric));
        }
        outcomes.push(GradCheckOutcome {
            op: format!("model_total_loss_{variant}"),
            max_rel_error: worst,
            tolerance: END_TO_END_TOL,
        });
    }

    Ok(outcomes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_and_covers_enough_ops() {
        let outcomes = gradient_check_suite(None).unwrap();
        assert!(outcomes.len() >= 8, "suite lists {} ops", outcomes.len());
        for o in &outcomes {
            assert!(o.passed(), "{o}");
        }
    }

    #[test]
    fn corrupted_backward_rule_is_detected() {
        let outcomes = gradient_check_ops(Some(0.01)).unwrap();
        let lrelu = outcomes.iter().find(|o| o.op == "leaky_relu").unwrap();
        assert!(!lrelu.passed(), "corruption fixture must be flagged: {lrelu}");
    }
}
