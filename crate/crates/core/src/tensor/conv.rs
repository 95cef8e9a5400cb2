//! Raw 3D cross-correlation kernels: forward, input-gradient (the adjoint,
//! also the transposed-conv forward), and filter-gradient.
//!
//! Layouts are row-major: input `[C_in, T, H, W]`, filters
//! `[C_out, C_in, fT, fH, fW]`, output `[C_out, T', H', W']`. The 2D model
//! variant is expressed with `fT = 1`, which applies filters framewise.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of stride-2 encoder layers; each anchor cell spans 2^6 = 64 px.
pub const CELL_STRIDE_LAYERS: usize = 6;

/// Filter extents, strides, and zero padding per convolved axis, plus the
/// output channel count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub filter: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub out_channels: usize,
}

impl ConvSpec {
    pub fn new(filter: [usize; 3], stride: [usize; 3], pad: [usize; 3], out_channels: usize) -> Result<ConvSpec> {
        if filter.iter().any(|&f| f == 0) || stride.iter().any(|&s| s == 0) || out_channels == 0 {
            return Err(Error::invalid(format!(
                "conv spec extents and strides must be >= 1: filter {filter:?} stride {stride:?} out_channels {out_channels}"
            )));
        }
        Ok(ConvSpec { filter, stride, pad, out_channels })
    }

    /// Framewise spec: time axis untouched (fT=1, sT=1, pT=0).
    pub fn framewise(filter: [usize; 2], stride: [usize; 2], pad: [usize; 2], out_channels: usize) -> Result<ConvSpec> {
        ConvSpec::new(
            [1, filter[0], filter[1]],
            [1, stride[0], stride[1]],
            [0, pad[0], pad[1]],
            out_channels,
        )
    }

    /// `floor((in + 2*pad - filter) / stride) + 1`, rejected when non-positive.
    pub fn output_extent(&self, axis: usize, in_extent: usize) -> Result<usize> {
        let padded = in_extent + 2 * self.pad[axis];
        if padded < self.filter[axis] {
            return Err(Error::invalid(format!(
                "axis {axis}: filter {} exceeds padded extent {padded}",
                self.filter[axis]
            )));
        }
        Ok((padded - self.filter[axis]) / self.stride[axis] + 1)
    }

    /// Output shape `[C_out, T', H', W']` for an input `[C, T, H, W]`.
    pub fn output_shape(&self, in_shape: &[usize]) -> Result<[usize; 4]> {
        if in_shape.len() != 4 {
            return Err(Error::invalid(format!("expected rank-4 input, got {in_shape:?}")));
        }
        let mut out = [self.out_channels, 0, 0, 0];
        for axis in 0..3 {
            out[axis + 1] = self.output_extent(axis, in_shape[axis + 1])?;
        }
        Ok(out)
    }

    /// Checks that `preimage` is a valid conv input shape producing `post`.
    pub fn validate_preimage(&self, preimage: &[usize], post: &[usize], in_channels: usize) -> Result<()> {
        if preimage.len() != 4 {
            return Err(Error::invalid(format!("output_shape must be rank 4, got {preimage:?}")));
        }
        if preimage[0] != in_channels {
            return Err(Error::invalid(format!(
                "output_shape channels {} do not match filter input channels {in_channels}",
                preimage[0]
            )));
        }
        let implied = self.output_shape(preimage)?;
        if implied[1..] != post[1..] {
            return Err(Error::invalid(format!(
                "output_shape {preimage:?} is not a valid preimage: conv would map it to {implied:?}, needed {post:?}"
            )));
        }
        Ok(())
    }
}

/// Range of output positions `o` with `0 <= o*stride + k - pad < in_extent`.
#[inline]
fn out_range(k: usize, pad: usize, stride: usize, in_extent: usize, out_extent: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let limit = (in_extent + pad).saturating_sub(k);
    let hi = if limit == 0 { 0 } else { ((limit - 1) / stride + 1).min(out_extent) };
    (lo.min(hi), hi)
}

struct Dims {
    c_in: usize,
    t_in: usize,
    h_in: usize,
    w_in: usize,
    c_out: usize,
    t_out: usize,
    h_out: usize,
    w_out: usize,
}

fn dims(in_shape: &[usize; 4], out_shape: &[usize; 4]) -> Dims {
    Dims {
        c_in: in_shape[0],
        t_in: in_shape[1],
        h_in: in_shape[2],
        w_in: in_shape[3],
        c_out: out_shape[0],
        t_out: out_shape[1],
        h_out: out_shape[2],
        w_out: out_shape[3],
    }
}

/// Forward cross-correlation. `out` must be sized `C_out * T' * H' * W'`.
pub fn conv3d_raw(
    input: &[f64],
    in_shape: &[usize; 4],
    filters: &[f64],
    spec: &ConvSpec,
    bias: &[f64],
    out: &mut [f64],
    out_shape: &[usize; 4],
) {
    let d = dims(in_shape, out_shape);
    let [ft, fh, fw] = spec.filter;
    let [st, sh, sw] = spec.stride;
    let [pt, ph, pw] = spec.pad;
    let in_chan_stride = d.t_in * d.h_in * d.w_in;
    let out_chan_stride = d.t_out * d.h_out * d.w_out;
    let filt_chan_stride = d.c_in * ft * fh * fw;

    out.par_chunks_mut(out_chan_stride).enumerate().for_each(|(co, out_c)| {
        out_c.fill(bias[co]);
        let filt_c = &filters[co * filt_chan_stride..(co + 1) * filt_chan_stride];
        for ci in 0..d.c_in {
            let in_c = &input[ci * in_chan_stride..(ci + 1) * in_chan_stride];
            for kt in 0..ft {
                let (to_lo, to_hi) = out_range(kt, pt, st, d.t_in, d.t_out);
                for kh in 0..fh {
                    let (ho_lo, ho_hi) = out_range(kh, ph, sh, d.h_in, d.h_out);
                    let filt_row = &filt_c[((ci * ft + kt) * fh + kh) * fw..][..fw];
                    for to in to_lo..to_hi {
                        let ti = to * st + kt - pt;
                        for ho in ho_lo..ho_hi {
                            let hi = ho * sh + kh - ph;
                            let in_row = &in_c[(ti * d.h_in + hi) * d.w_in..][..d.w_in];
                            let out_row = &mut out_c[(to * d.h_out + ho) * d.w_out..][..d.w_out];
                            for (kw, &f) in filt_row.iter().enumerate() {
                                if f == 0.0 {
                                    continue;
                                }
                                let (wo_lo, wo_hi) = out_range(kw, pw, sw, d.w_in, d.w_out);
                                if wo_hi <= wo_lo {
                                    continue;
                                }
                                let base = wo_lo * sw + kw - pw;
                                if sw == 1 {
                                    let n = wo_hi - wo_lo;
                                    for (o, &v) in out_row[wo_lo..wo_hi].iter_mut().zip(&in_row[base..base + n]) {
                                        *o += f * v;
                                    }
                                } else {
                                    let mut wi = base;
                                    for o in &mut out_row[wo_lo..wo_hi] {
                                        *o += f * in_row[wi];
                                        wi += sw;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
}

/// Gradient w.r.t. the conv input; equivalently the transposed-conv forward
/// map (without bias). `gin` must be zeroed by the caller or freshly sized.
pub fn conv3d_input_grad_raw(
    gout: &[f64],
    out_shape: &[usize; 4],
    filters: &[f64],
    spec: &ConvSpec,
    gin: &mut [f64],
    in_shape: &[usize; 4],
) {
    let d = dims(in_shape, out_shape);
    let [ft, fh, fw] = spec.filter;
    let [st, sh, sw] = spec.stride;
    let [pt, ph, pw] = spec.pad;
    let in_chan_stride = d.t_in * d.h_in * d.w_in;
    let out_chan_stride = d.t_out * d.h_out * d.w_out;
    let filt_chan_stride = d.c_in * ft * fh * fw;

    gin.par_chunks_mut(in_chan_stride).enumerate().for_each(|(ci, gin_c)| {
        for co in 0..d.c_out {
            let gout_c = &gout[co * out_chan_stride..(co + 1) * out_chan_stride];
            let filt_c = &filters[co * filt_chan_stride..(co + 1) * filt_chan_stride];
            for kt in 0..ft {
                let (to_lo, to_hi) = out_range(kt, pt, st, d.t_in, d.t_out);
                for kh in 0..fh {
                    let (ho_lo, ho_hi) = out_range(kh, ph, sh, d.h_in, d.h_out);
                    let filt_row = &filt_c[((ci * ft + kt) * fh + kh) * fw..][..fw];
                    for to in to_lo..to_hi {
                        let ti = to * st + kt - pt;
                        for ho in ho_lo..ho_hi {
                            let hi = ho * sh + kh - ph;
                            let gin_row = &mut gin_c[(ti * d.h_in + hi) * d.w_in..][..d.w_in];
                            let gout_row = &gout_c[(to * d.h_out + ho) * d.w_out..][..d.w_out];
                            for (kw, &f) in filt_row.iter().enumerate() {
                                if f == 0.0 {
                                    continue;
                                }
                                let (wo_lo, wo_hi) = out_range(kw, pw, sw, d.w_in, d.w_out);
                                if wo_hi <= wo_lo {
                                    continue;
                                }
                                let base = wo_lo * sw + kw - pw;
                                if sw == 1 {
                                    let n = wo_hi - wo_lo;
                                    for (g, &v) in gin_row[base..base + n].iter_mut().zip(&gout_row[wo_lo..wo_hi]) {
                                        *g += f * v;
                                    }
                                } else {
                                    let mut wi = base;
                                    for &v in &gout_row[wo_lo..wo_hi] {
                                        gin_row[wi] += f * v;
                                        wi += sw;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
}

/// Gradient w.r.t. the filters. `gfilt` must be zeroed by the caller.
pub fn conv3d_filter_grad_raw(
    gout: &[f64],
    out_shape: &[usize; 4],
    input: &[f64],
    in_shape: &[usize; 4],
    spec: &ConvSpec,
    gfilt: &mut [f64],
) {
    let d = dims(in_shape, out_shape);
    let [ft, fh, fw] = spec.filter;
    let [st, sh, sw] = spec.stride;
    let [pt, ph, pw] = spec.pad;
    let in_chan_stride = d.t_in * d.h_in * d.w_in;
    let out_chan_stride = d.t_out * d.h_out * d.w_out;
    let filt_chan_stride = d.c_in * ft * fh * fw;

    gfilt.par_chunks_mut(filt_chan_stride).enumerate().for_each(|(co, gfilt_c)| {
        let gout_c = &gout[co * out_chan_stride..(co + 1) * out_chan_stride];
        for ci in 0..d.c_in {
            let in_c = &input[ci * in_chan_stride..(ci + 1) * in_chan_stride];
            for kt in 0..ft {
                let (to_lo, to_hi) = out_range(kt, pt, st, d.t_in, d.t_out);
                for kh in 0..fh {
                    let (ho_lo, ho_hi) = out_range(kh, ph, sh, d.h_in, d.h_out);
                    let gfilt_row = &mut gfilt_c[((ci * ft + kt) * fh + kh) * fw..][..fw];
                    for to in to_lo..to_hi {
                        let ti = to * st + kt - pt;
                        for ho in ho_lo..ho_hi {
                            let hi = ho * sh + kh - ph;
                            let in_row = &in_c[(ti * d.h_in + hi) * d.w_in..][..d.w_in];
                            let gout_row = &gout_c[(to * d.h_out + ho) * d.w_out..][..d.w_out];
                            for (kw, g) in gfilt_row.iter_mut().enumerate() {
                                let (wo_lo, wo_hi) = out_range(kw, pw, sw, d.w_in, d.w_out);
                                if wo_hi <= wo_lo {
                                    continue;
                                }
                                let base = wo_lo * sw + kw - pw;
                                let mut acc = 0.0;
                                if sw == 1 {
                                    let n = wo_hi - wo_lo;
                                    for (&gv, &iv) in gout_row[wo_lo..wo_hi].iter().zip(&in_row[base..base + n]) {
                                        acc += gv * iv;
                                    }
                                } else {
                                    let mut wi = base;
                                    for &gv in &gout_row[wo_lo..wo_hi] {
                                        acc += gv * in_row[wi];
                                        wi += sw;
                                    }
                                }
                                *g += acc;
                            }
                        }
                    }
                }
            }
        }
    });
}

/// Gradient w.r.t. the bias: sum of the output gradient per channel map.
pub fn conv3d_bias_grad_raw(gout: &[f64], out_shape: &[usize; 4], gbias: &mut [f64]) {
    let map = out_shape[1] * out_shape[2] * out_shape[3];
    for (co, g) in gbias.iter_mut().enumerate() {
        *g += gout[co * map..(co + 1) * map].iter().sum::<f64>();
    }
}
