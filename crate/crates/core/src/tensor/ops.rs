//! Differentiable operations recorded on the graph.

use super::conv::{
    conv3d_bias_grad_raw, conv3d_filter_grad_raw, conv3d_input_grad_raw, conv3d_raw, ConvSpec,
};
use super::Tensor;
use crate::error::{Error, Result};

fn shape4(shape: &[usize], what: &str) -> Result<[usize; 4]> {
    if shape.len() != 4 {
        return Err(Error::invalid(format!("{what} must be rank 4, got {shape:?}")));
    }
    Ok([shape[0], shape[1], shape[2], shape[3]])
}

/// Cross-correlation with zero padding. Input `[C_in,T,H,W]`, filters
/// `[C_out,C_in,fT,fH,fW]`, bias `[C_out]`.
pub fn conv3d(input: &Tensor, filters: &Tensor, bias: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    let in_shape = shape4(input.shape(), "conv3d input")?;
    let f_shape = filters.shape();
    if f_shape.len() != 5 {
        return Err(Error::invalid(format!("conv3d filters must be rank 5, got {f_shape:?}")));
    }
    if f_shape[1] != in_shape[0] {
        return Err(Error::invalid(format!(
            "filter input channels {} do not match input channels {} (filters {f_shape:?}, input {in_shape:?})",
            f_shape[1], in_shape[0]
        )));
    }
    if f_shape[0] != spec.out_channels || f_shape[2..] != spec.filter {
        return Err(Error::invalid(format!(
            "filters {f_shape:?} inconsistent with spec {spec:?}"
        )));
    }
    if bias.shape() != [spec.out_channels] {
        return Err(Error::invalid(format!(
            "bias shape {:?} does not match {} output channels",
            bias.shape(),
            spec.out_channels
        )));
    }
    let out_shape = spec.output_shape(&in_shape)?;
    let mut out = vec![0.0; out_shape.iter().product()];
    conv3d_raw(
        &input.data(),
        &in_shape,
        &filters.data(),
        spec,
        &bias.data(),
        &mut out,
        &out_shape,
    );

    let spec_b = spec.clone();
    Ok(Tensor::from_op(
        out_shape.to_vec(),
        out,
        vec![input.clone(), filters.clone(), bias.clone()],
        Box::new(move |up, _out, parents| {
            let input = &parents[0];
            let filters = &parents[1];
            let bias = &parents[2];
            let in_shape = shape4(input.shape(), "conv3d input").unwrap();
            let out_shape = spec_b.output_shape(&in_shape).unwrap();
            let g_input = input.is_tracked().then(|| {
                let mut g = vec![0.0; input.numel()];
                conv3d_input_grad_raw(up, &out_shape, &filters.data(), &spec_b, &mut g, &in_shape);
                g
            });
            let g_filters = filters.is_tracked().then(|| {
                let mut g = vec![0.0; filters.numel()];
                conv3d_filter_grad_raw(up, &out_shape, &input.data(), &in_shape, &spec_b, &mut g);
                g
            });
            let g_bias = bias.is_tracked().then(|| {
                let mut g = vec![0.0; bias.numel()];
                conv3d_bias_grad_raw(up, &out_shape, &mut g);
                g
            });
            vec![g_input, g_filters, g_bias]
        }),
    ))
}

/// Exact adjoint of [`conv3d`]'s linear map, with its own bias. `filters` are
/// shared with the forward conv: `[C_out, C_in, ...]` maps `C_out` channels
/// back to `C_in`. The caller supplies `output_shape` to disambiguate
/// stride-2 preimages.
pub fn transposed_conv3d(
    input: &Tensor,
    filters: &Tensor,
    bias: &Tensor,
    spec: &ConvSpec,
    output_shape: &[usize],
) -> Result<Tensor> {
    let in_shape = shape4(input.shape(), "transposed_conv3d input")?;
    let f_shape = filters.shape();
    if f_shape.len() != 5 {
        return Err(Error::invalid(format!("filters must be rank 5, got {f_shape:?}")));
    }
    if f_shape[0] != in_shape[0] {
        return Err(Error::invalid(format!(
            "filter output channels {} do not match transposed input channels {}",
            f_shape[0], in_shape[0]
        )));
    }
    spec.validate_preimage(output_shape, &in_shape, f_shape[1])?;
    if bias.shape() != [f_shape[1]] {
        return Err(Error::invalid(format!(
            "bias shape {:?} does not match {} output channels",
            bias.shape(),
            f_shape[1]
        )));
    }
    let out_shape4 = shape4(output_shape, "transposed_conv3d output_shape")?;
    let mut out = vec![0.0; out_shape4.iter().product()];
    conv3d_input_grad_raw(&input.data(), &in_shape, &filters.data(), spec, &mut out, &out_shape4);
    {
        let b = bias.data();
        let map = out_shape4[1] * out_shape4[2] * out_shape4[3];
        for (c, chunk) in out.chunks_mut(map).enumerate() {
            for v in chunk {
                *v += b[c];
            }
        }
    }

    let spec_b = spec.clone();
    let image_shape = out_shape4;
    Ok(Tensor::from_op(
        out_shape4.to_vec(),
        out,
        vec![input.clone(), filters.clone(), bias.clone()],
        Box::new(move |up, _out, parents| {
            let input = &parents[0];
            let filters = &parents[1];
            let bias = &parents[2];
            let code_shape = shape4(input.shape(), "transposed_conv3d input").unwrap();
            // Grad w.r.t. the code-side input is the forward conv of the
            // upstream gradient (adjoint of the adjoint), without bias.
            let g_input = input.is_tracked().then(|| {
                let mut g = vec![0.0; input.numel()];
                conv3d_raw(
                    up,
                    &image_shape,
                    &filters.data(),
                    &spec_b,
                    &vec![0.0; code_shape[0]],
                    &mut g,
                    &code_shape,
                );
                g
            });
            // Grad w.r.t. filters: the conv filter-grad correlation with the
            // roles of "input" and "output grad" exchanged.
            let g_filters = filters.is_tracked().then(|| {
                let mut g = vec![0.0; filters.numel()];
                conv3d_filter_grad_raw(&input.data(), &code_shape, up, &image_shape, &spec_b, &mut g);
                g
            });
            let g_bias = bias.is_tracked().then(|| {
                let map = image_shape[1] * image_shape[2] * image_shape[3];
                let mut g = vec![0.0; bias.numel()];
                for (c, gb) in g.iter_mut().enumerate() {
                    *gb = up[c * map..(c + 1) * map].iter().sum::<f64>();
                }
                g
            });
            vec![g_input, g_filters, g_bias]
        }),
    ))
}

/// Elementwise `max(x, slope*x)`. Subgradient at 0 is the negative-side slope.
pub fn leaky_relu(input: &Tensor, slope: f64) -> Tensor {
    assert!((0.0..1.0).contains(&slope), "leaky_relu slope must be in [0,1)");
    let out: Vec<f64> = input.data().iter().map(|&x| if x > 0.0 { x } else { slope * x }).collect();
    Tensor::from_op(
        input.shape().to_vec(),
        out,
        vec![input.clone()],
        Box::new(move |up, _out, parents| {
            let g = parents[0].is_tracked().then(|| {
                parents[0]
                    .data()
                    .iter()
                    .zip(up)
                    .map(|(&x, &u)| if x > 0.0 { u } else { slope * u })
                    .collect()
            });
            vec![g]
        }),
    )
}

/// Numerically stable softmax along `axis`.
pub fn softmax(input: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = input.shape().to_vec();
    if axis >= shape.len() {
        return Err(Error::invalid(format!("softmax axis {axis} out of range for {shape:?}")));
    }
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let data = input.data();
    let mut out = vec![0.0; data.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * axis_len * inner + i;
            let mut max = f64::NEG_INFINITY;
            for k in 0..axis_len {
                max = max.max(data[base + k * inner]);
            }
            let mut denom = 0.0;
            for k in 0..axis_len {
                let e = (data[base + k * inner] - max).exp();
                out[base + k * inner] = e;
                denom += e;
            }
            for k in 0..axis_len {
                out[base + k * inner] /= denom;
            }
        }
    }
    drop(data);
    Ok(Tensor::from_op(
        shape,
        out,
        vec![input.clone()],
        Box::new(move |up, out, parents| {
            let g = parents[0].is_tracked().then(|| {
                let mut g = vec![0.0; up.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * axis_len * inner + i;
                        let mut dot = 0.0;
                        for k in 0..axis_len {
                            let idx = base + k * inner;
                            dot += up[idx] * out[idx];
                        }
                        for k in 0..axis_len {
                            let idx = base + k * inner;
                            g[idx] = out[idx] * (up[idx] - dot);
                        }
                    }
                }
                g
            });
            vec![g]
        }),
    ))
}

/// Elementwise sum of two same-shape tensors.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::invalid(format!(
            "add shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let out: Vec<f64> = a.data().iter().zip(b.data().iter()).map(|(x, y)| x + y).collect();
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        out,
        vec![a.clone(), b.clone()],
        Box::new(|up, _out, parents| {
            let ga = parents[0].is_tracked().then(|| up.to_vec());
            let gb = parents[1].is_tracked().then(|| up.to_vec());
            vec![ga, gb]
        }),
    ))
}

/// Multiplication by a compile-time-known scalar constant.
pub fn scale(a: &Tensor, factor: f64) -> Tensor {
    let out: Vec<f64> = a.data().iter().map(|x| x * factor).collect();
    Tensor::from_op(
        a.shape().to_vec(),
        out,
        vec![a.clone()],
        Box::new(move |up, _out, parents| {
            let g = parents[0].is_tracked().then(|| up.iter().map(|u| u * factor).collect());
            vec![g]
        }),
    )
}

/// Sum of all elements, as a scalar tensor.
pub fn sum(a: &Tensor) -> Tensor {
    let total: f64 = a.data().iter().sum();
    Tensor::from_op(
        vec![1],
        vec![total],
        vec![a.clone()],
        Box::new(|up, _out, parents| {
            let g = parents[0].is_tracked().then(|| vec![up[0]; parents[0].numel()]);
            vec![g]
        }),
    )
}

/// Gathers frames along the time axis (axis 1) of a `[C,T,H,W]` tensor.
pub fn select_frames(input: &Tensor, frames: &[usize]) -> Result<Tensor> {
    let s = shape4(input.shape(), "select_frames input")?;
    let [c, t, h, w] = s;
    for &f in frames {
        if f >= t {
            return Err(Error::invalid(format!("frame index {f} out of range (T={t})")));
        }
    }
    let map = h * w;
    let data = input.data();
    let mut out = vec![0.0; c * frames.len() * map];
    for ci in 0..c {
        for (k, &f) in frames.iter().enumerate() {
            let src = (ci * t + f) * map;
            let dst = (ci * frames.len() + k) * map;
            out[dst..dst + map].copy_from_slice(&data[src..src + map]);
        }
    }
    drop(data);
    let frames_b = frames.to_vec();
    Ok(Tensor::from_op(
        vec![c, frames.len(), h, w],
        out,
        vec![input.clone()],
        Box::new(move |up, _out, parents| {
            let g = parents[0].is_tracked().then(|| {
                let mut g = vec![0.0; parents[0].numel()];
                for ci in 0..c {
                    for (k, &f) in frames_b.iter().enumerate() {
                        let dst = (ci * t + f) * map;
                        let src = (ci * frames_b.len() + k) * map;
                        for (gd, &u) in g[dst..dst + map].iter_mut().zip(&up[src..src + map]) {
                            *gd += u;
                        }
                    }
                }
                g
            });
            vec![g]
        }),
    ))
}

/// Smooth L1: `0.5*z^2` for `|z| < 1`, `|z| - 0.5` otherwise.
pub fn smooth_l1(z: f64) -> f64 {
    if z.abs() < 1.0 {
        0.5 * z * z
    } else {
        z.abs() - 0.5
    }
}

/// Derivative of [`smooth_l1`]: `z` inside the unit interval, `sign(z)` outside.
pub fn smooth_l1_deriv(z: f64) -> f64 {
    if z.abs() < 1.0 {
        z
    } else {
        z.signum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{backprop, finite_difference_gradient, max_relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn conv3d_rejects_channel_mismatch() {
        let spec = ConvSpec::new([1, 1, 1], [1, 1, 1], [0, 0, 0], 2).unwrap();
        let input = Tensor::zeros(vec![3, 1, 2, 2]);
        let filters = Tensor::zeros(vec![2, 4, 1, 1, 1]);
        let bias = Tensor::zeros(vec![2]);
        let err = conv3d(&input, &filters, &bias, &spec).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('4') && msg.contains('3'), "diagnostic names both shapes: {msg}");
    }

    #[test]
    fn conv3d_zero_input_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = ConvSpec::new([3, 3, 3], [1, 2, 2], [1, 1, 1], 3).unwrap();
        let input = Tensor::zeros(vec![2, 4, 6, 6]);
        let filters = random_tensor(&mut rng, vec![3, 2, 3, 3, 3]);
        let bias = Tensor::zeros(vec![3]);
        let out = conv3d(&input, &filters, &bias, &spec).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn transposed_conv_is_exact_adjoint() {
        // <conv(u), v> == <u, convT(v)> for random tensors, shared filters.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (stride, pad) in [([1, 2, 2], [1, 2, 2]), ([2, 1, 1], [1, 1, 1]), ([1, 1, 1], [0, 0, 0])] {
            let spec = ConvSpec::new([3, 3, 3], stride, pad, 3).unwrap();
            let u = random_tensor(&mut rng, vec![4, 4, 8, 8]);
            let filters = random_tensor(&mut rng, vec![3, 4, 3, 3, 3]);
            let zero_out = Tensor::zeros(vec![3]);
            let zero_in = Tensor::zeros(vec![4]);
            let au = conv3d(&u, &filters, &zero_out, &spec).unwrap();
            let v = random_tensor(&mut rng, au.shape().to_vec());
            let atv = transposed_conv3d(&v, &filters, &zero_in, &spec, u.shape()).unwrap();
            let lhs = dot(&au.data(), &v.data());
            let rhs = dot(&u.data(), &atv.data());
            let rel = (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-30);
            assert!(rel < 1e-10, "adjoint identity violated: {lhs} vs {rhs} (rel {rel:.3e})");
        }
    }

    #[test]
    fn transposed_conv_identity_kernel() {
        let spec = ConvSpec::new([1, 1, 1], [1, 1, 1], [0, 0, 0], 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor(&mut rng, vec![1, 2, 3, 3]);
        let filters = Tensor::from_vec(vec![1, 1, 1, 1, 1], vec![1.0]).unwrap();
        let bias = Tensor::zeros(vec![1]);
        let y = transposed_conv3d(&x, &filters, &bias, &spec, x.shape()).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn transposed_conv_rejects_invalid_preimage() {
        let spec = ConvSpec::new([3, 5, 5], [1, 2, 2], [1, 2, 2], 4).unwrap();
        let code = Tensor::zeros(vec![4, 2, 4, 4]);
        let filters = Tensor::zeros(vec![4, 2, 3, 5, 5]);
        let bias = Tensor::zeros(vec![2]);
        // 4 -> valid preimages are 7 and 8; 10 is not.
        let err = transposed_conv3d(&code, &filters, &bias, &spec, &[2, 2, 10, 8]).unwrap_err();
        assert!(err.to_string().contains("preimage"));
        // Both stride-2 preimages round-trip.
        for h in [7, 8] {
            assert!(transposed_conv3d(&code, &filters, &bias, &spec, &[2, 2, h, 8]).is_ok());
        }
    }

    #[test]
    fn conv_roundtrip_restores_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let spec = ConvSpec::new([3, 5, 5], [1, 2, 2], [1, 2, 2], 5).unwrap();
        let x = random_tensor(&mut rng, vec![2, 4, 10, 12]);
        let filters = random_tensor(&mut rng, vec![5, 2, 3, 5, 5]);
        let y = conv3d(&x, &filters, &Tensor::zeros(vec![5]), &spec).unwrap();
        let back = transposed_conv3d(&y, &filters, &Tensor::zeros(vec![2]), &spec, x.shape()).unwrap();
        assert_eq!(back.shape(), x.shape());
    }

    #[test]
    fn leaky_relu_values_and_gradient() {
        let x = Tensor::from_vec(vec![3], vec![2.0, -2.0, 0.0]).unwrap().requires_grad(true);
        let y = leaky_relu(&x, 0.1);
        assert_eq!(y.to_vec(), vec![2.0, -0.2, 0.0]);
        backprop(&sum(&y)).unwrap();
        // Subgradient at 0 fixed to the negative-side slope.
        assert_eq!(x.grad().unwrap(), vec![1.0, 0.1, 0.1]);
    }

    #[test]
    fn softmax_values() {
        let x = Tensor::from_vec(vec![4], vec![0.0, 0.0, 0.0, 0.0]).unwrap();
        let p = softmax(&x, 0).unwrap();
        for &v in p.data().iter() {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let big = Tensor::from_vec(vec![2], vec![1000.0, 0.0]).unwrap();
        let p = softmax(&big, 0).unwrap();
        assert!(p.data()[0] > 1.0 - 1e-12 && p.data()[1] < 1e-12);
        let thirds = Tensor::from_vec(vec![2], vec![3.0_f64.ln(), 1.0_f64.ln()]).unwrap();
        let p = softmax(&thirds, 0).unwrap();
        assert!((p.data()[0] - 0.75).abs() < 1e-12);
        assert!((p.data()[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn softmax_sums_to_one_along_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_tensor(&mut rng, vec![4, 2, 3, 3]);
        let p = softmax(&x, 0).unwrap();
        let d = p.data();
        let inner = 2 * 3 * 3;
        for i in 0..inner {
            let s: f64 = (0..4).map(|k| d[k * inner + i]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn smooth_l1_cases() {
        assert_eq!(smooth_l1(0.0), 0.0);
        assert_eq!(smooth_l1(0.5), 0.125);
        assert_eq!(smooth_l1(2.0), 1.5);
        assert_eq!(smooth_l1(-2.0), 1.5);
        // Continuity at |z| = 1 and bounded derivative.
        for eps in [1e-3, 1e-6, 1e-9] {
            assert!((smooth_l1(1.0 - eps) - smooth_l1(1.0 + eps)).abs() < 3.0 * eps);
        }
        for z in [-3.0, -1.0, -0.4, 0.0, 0.7, 1.0, 5.0] {
            assert!(smooth_l1_deriv(z).abs() <= 1.0);
        }
    }

    #[test]
    fn select_frames_gathers_and_scatters() {
        let x = Tensor::from_vec(vec![1, 4, 1, 2], (0..8).map(|v| v as f64).collect())
            .unwrap()
            .requires_grad(true);
        let y = select_frames(&x, &[0, 2]).unwrap();
        assert_eq!(y.shape(), &[1, 2, 1, 2]);
        assert_eq!(y.to_vec(), vec![0.0, 1.0, 4.0, 5.0]);
        backprop(&sum(&y)).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
    }

    /// Backprop through `loss = sum(leaky_relu(op(x)))` vs central differences.
    fn check_gradients<F>(build: F, leaves: &[&Tensor], tol: f64)
    where
        F: Fn() -> Tensor,
    {
        let loss = build();
        backprop(&loss).unwrap();
        for leaf in leaves {
            let analytic = leaf.grad().expect("leaf missing gradient");
            let numeric = finite_difference_gradient(|| build().item(), leaf, 1e-5);
            let err = max_relative_error(&analytic, &numeric);
            assert!(err < tol, "gradient mismatch: rel err {err:.3e} >= {tol:.0e}");
        }
    }

    #[test]
    fn conv3d_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for (stride, pad) in [([1, 1, 1], [1, 1, 1]), ([1, 2, 2], [1, 2, 2]), ([2, 1, 1], [1, 1, 1])] {
            let spec = ConvSpec::new([3, 3, 3], stride, pad, 2).unwrap();
            let input = random_tensor(&mut rng, vec![2, 2, 5, 5]).requires_grad(true);
            let filters = random_tensor(&mut rng, vec![2, 2, 3, 3, 3]).requires_grad(true);
            let bias = random_tensor(&mut rng, vec![2]).requires_grad(true);
            check_gradients(
                || sum(&conv3d(&input, &filters, &bias, &spec).unwrap()),
                &[&input, &filters, &bias],
                1e-7,
            );
        }
    }

    #[test]
    fn conv3d_weighted_gradients_match_finite_differences() {
        // Weighted sum output exercises non-uniform upstream gradients.
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let spec = ConvSpec::new([1, 3, 3], [1, 2, 2], [0, 1, 1], 3).unwrap();
        let input = random_tensor(&mut rng, vec![2, 1, 6, 6]).requires_grad(true);
        let filters = random_tensor(&mut rng, vec![3, 2, 1, 3, 3]).requires_grad(true);
        let bias = random_tensor(&mut rng, vec![3]).requires_grad(true);
        let weights = random_tensor(&mut rng, vec![3, 1, 3, 3]);
        let build = {
            let (input, filters, bias, weights) =
                (input.clone(), filters.clone(), bias.clone(), weights.clone());
            move || {
                let y = conv3d(&input, &filters, &bias, &spec).unwrap();
                sum(&mul_for_test(&y, &weights))
            }
        };
        check_gradients(build, &[&input, &filters, &bias], 1e-7);
    }

    #[test]
    fn transposed_conv3d_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let spec = ConvSpec::new([3, 3, 3], [1, 2, 2], [1, 1, 1], 2).unwrap();
        let code = random_tensor(&mut rng, vec![2, 2, 3, 3]).requires_grad(true);
        let filters = random_tensor(&mut rng, vec![2, 3, 3, 3, 3]).requires_grad(true);
        let bias = random_tensor(&mut rng, vec![3]).requires_grad(true);
        let out_shape = vec![3, 2, 5, 5];
        check_gradients(
            || sum(&leaky_relu(&transposed_conv3d(&code, &filters, &bias, &spec, &out_shape).unwrap(), 0.1)),
            &[&code, &filters, &bias],
            1e-6,
        );
    }

    #[test]
    fn softmax_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let x = random_tensor(&mut rng, vec![4, 2, 2, 2]).requires_grad(true);
        let w = random_tensor(&mut rng, vec![4, 2, 2, 2]);
        let wc = w.clone();
        check_gradients(
            || {
                let p = softmax(&x, 0).unwrap();
                sum(&mul_for_test(&p, &wc))
            },
            &[&x],
            1e-6,
        );
    }

    #[test]
    fn leaky_relu_gradients_match_finite_differences() {
        // Inputs bounded away from the kink so central differences are exact.
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let data: Vec<f64> = (0..24)
            .map(|_| {
                let mag = rng.random_range(0.2..1.0);
                if rng.random_bool(0.5) {
                    mag
                } else {
                    -mag
                }
            })
            .collect();
        let x = Tensor::from_vec(vec![24], data).unwrap().requires_grad(true);
        check_gradients(|| sum(&leaky_relu(&x, 0.1)), &[&x], 1e-8);
    }
}

/// Elementwise product; test-only helper for building non-uniform upstream
/// gradients in checks.
#[cfg(test)]
pub(crate) fn mul_for_test(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.shape(), b.shape());
    let out: Vec<f64> = a.data().iter().zip(b.data().iter()).map(|(x, y)| x * y).collect();
    Tensor::from_op(
        a.shape().to_vec(),
        out,
        vec![a.clone(), b.clone()],
        Box::new(|up, _out, parents| {
            let ga = parents[0]
                .is_tracked()
                .then(|| parents[1].data().iter().zip(up).map(|(b, u)| b * u).collect());
            let gb = parents[1]
                .is_tracked()
                .then(|| parents[0].data().iter().zip(up).map(|(a, u)| a * u).collect());
            vec![ga, gb]
        }),
    )
}
