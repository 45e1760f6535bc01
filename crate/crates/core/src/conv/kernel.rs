//! Plane-level dilated convolution primitives shared by the fast paths.

use rayon::prelude::*;

use crate::conv::{check_input, check_weight, ConvSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// Geometry of one input plane / output plane pair.
#[derive(Clone, Copy, Debug)]
pub(crate) struct PlaneGeom {
    pub h: usize,
    pub w: usize,
    pub hout: usize,
    pub wout: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl PlaneGeom {
    pub fn new(spec: &ConvSpec, h: usize, w: usize) -> Self {
        let (hout, wout) = spec.output_hw(h, w);
        PlaneGeom {
            h,
            w,
            hout,
            wout,
            kernel: spec.kernel,
            stride: spec.stride,
        }
    }
}

/// Output indices `x` in `[0, m)` with `0 <= x·s + off < n`.
#[inline]
pub(crate) fn valid_range(off: isize, s: usize, n: usize, m: usize) -> (usize, usize) {
    let s_i = s as isize;
    let lo = if off < 0 { ((-off) + s_i - 1) / s_i } else { 0 };
    let span = n as isize - off;
    let hi = if span <= 0 { 0 } else { (span + s_i - 1) / s_i };
    let hi = (hi as usize).min(m);
    let lo = lo as usize;
    (lo, hi.max(lo))
}

/// `out += conv(inp, taps)` at dilation `d`, taps visited in `(i, j)` order.
pub(crate) fn accumulate_plane(
    out: &mut [f64],
    inp: &[f64],
    taps: &[f64],
    d: usize,
    geom: &PlaneGeom,
) {
    let PlaneGeom {
        h,
        w,
        hout,
        wout,
        kernel,
        stride,
    } = *geom;
    let r = (kernel / 2) as isize;
    for i in 0..kernel {
        let di = (i as isize - r) * d as isize;
        let (x_lo, x_hi) = valid_range(di, stride, h, hout);
        for j in 0..kernel {
            let wv = taps[i * kernel + j];
            let dj = (j as isize - r) * d as isize;
            let (y_lo, y_hi) = valid_range(dj, stride, w, wout);
            if y_lo >= y_hi {
                continue;
            }
            for x in x_lo..x_hi {
                let src_row = ((x * stride) as isize + di) as usize * w;
                let out_row = &mut out[x * wout..(x + 1) * wout];
                if stride == 1 {
                    let start = (src_row as isize + y_lo as isize + dj) as usize;
                    let src = &inp[start..start + (y_hi - y_lo)];
                    for (o, v) in out_row[y_lo..y_hi].iter_mut().zip(src) {
                        *o += wv * v;
                    }
                } else {
                    for (y, o) in out_row.iter_mut().enumerate().take(y_hi).skip(y_lo) {
                        let col = ((y * stride) as isize + dj) as usize;
                        *o += wv * inp[src_row + col];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`accumulate_plane`]: `grad_in += convᵀ(grad_out, taps)`.
pub(crate) fn scatter_plane(
    grad_in: &mut [f64],
    grad_out: &[f64],
    taps: &[f64],
    d: usize,
    geom: &PlaneGeom,
) {
    let PlaneGeom {
        h,
        w,
        hout,
        wout,
        kernel,
        stride,
    } = *geom;
    let r = (kernel / 2) as isize;
    for i in 0..kernel {
        let di = (i as isize - r) * d as isize;
        let (x_lo, x_hi) = valid_range(di, stride, h, hout);
        for j in 0..kernel {
            let wv = taps[i * kernel + j];
            let dj = (j as isize - r) * d as isize;
            let (y_lo, y_hi) = valid_range(dj, stride, w, wout);
            if y_lo >= y_hi {
                continue;
            }
            for x in x_lo..x_hi {
                let dst_row = ((x * stride) as isize + di) as usize * w;
                let go_row = &grad_out[x * wout..(x + 1) * wout];
                if stride == 1 {
                    let start = (dst_row as isize + y_lo as isize + dj) as usize;
                    let dst = &mut grad_in[start..start + (y_hi - y_lo)];
                    for (gi, go) in dst.iter_mut().zip(&go_row[y_lo..y_hi]) {
                        *gi += wv * go;
                    }
                } else {
                    for (y, go) in go_row.iter().enumerate().take(y_hi).skip(y_lo) {
                        let col = ((y * stride) as isize + dj) as usize;
                        grad_in[dst_row + col] += wv * go;
                    }
                }
            }
        }
    }
}

/// `taps_grad[i,j] += Σ_{x,y} grad_out[x,y] · inp[x·s + (i−r)·d, y·s + (j−r)·d]`.
pub(crate) fn correlate_plane(
    taps_grad: &mut [f64],
    grad_out: &[f64],
    inp: &[f64],
    d: usize,
    geom: &PlaneGeom,
) {
    let PlaneGeom {
        h,
        w,
        hout,
        wout,
        kernel,
        stride,
    } = *geom;
    let r = (kernel / 2) as isize;
    for i in 0..kernel {
        let di = (i as isize - r) * d as isize;
        let (x_lo, x_hi) = valid_range(di, stride, h, hout);
        for j in 0..kernel {
            let dj = (j as isize - r) * d as isize;
            let (y_lo, y_hi) = valid_range(dj, stride, w, wout);
            let mut acc = 0.0;
            for x in x_lo..x_hi {
                let src_row = ((x * stride) as isize + di) as usize * w;
                let go_row = &grad_out[x * wout..(x + 1) * wout];
                for (y, go) in go_row.iter().enumerate().take(y_hi).skip(y_lo) {
                    let col = ((y * stride) as isize + dj) as usize;
                    acc += go * inp[src_row + col];
                }
            }
            taps_grad[i * kernel + j] += acc;
        }
    }
}

/// Dense dilated convolution with one rate for every kernel. Per output
/// element the sum runs over `k`, then `i`, then `j`, matching
/// [`conv2d_reference`](crate::conv::conv2d_reference) exactly.
pub fn dilated_conv(input: &Tensor4, weight: &Tensor4, spec: &ConvSpec, d: u32) -> Result<Tensor4> {
    check_weight(weight, spec)?;
    check_input(input, spec)?;
    if d == 0 {
        return Err(Error::invalid("dilation rate must be >= 1"));
    }
    let mut out = Tensor4::zeros(spec.output_dims(input.dims()))?;
    dilated_conv_into(&mut out, input, weight, spec, d as usize);
    Ok(out)
}

/// Accumulates a dense dilated convolution into `out`.
pub(crate) fn dilated_conv_into(
    out: &mut Tensor4,
    input: &Tensor4,
    weight: &Tensor4,
    spec: &ConvSpec,
    d: usize,
) {
    let [_, _, h, w] = input.dims();
    let geom = PlaneGeom::new(spec, h, w);
    let plane = geom.hout * geom.wout;
    if plane == 0 {
        return;
    }
    let cout = spec.cout;
    let cin_pg = spec.cin_per_group();
    let cout_pg = spec.cout_per_group();
    let taps = spec.kernel * spec.kernel;
    out.data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(idx, out_plane)| {
            let (n, c) = (idx / cout, idx % cout);
            let group = c / cout_pg;
            let wrow = &weight.data()[c * cin_pg * taps..(c + 1) * cin_pg * taps];
            for kl in 0..cin_pg {
                let inp = input.plane(n, group * cin_pg + kl);
                accumulate_plane(out_plane, inp, &wrow[kl * taps..(kl + 1) * taps], d, &geom);
            }
        });
}
