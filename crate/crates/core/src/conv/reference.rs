use crate::conv::{check_forward, ConvSpec};
use crate::error::{Error, Result};
use crate::lattice::DilationMatrix;
use crate::tensor::Tensor4;

/// Direct evaluation of the lattice convolution.
///
/// `H[n,c,x,y] = Σ_k Σ_{i,j} G[c,k,i,j] · F[n, k, x·s + (i−r)·D(c,k), y·s + (j−r)·D(c,k)]`
/// summed in `k`, `i`, `j` order with out-of-range reads skipped.
pub fn conv2d_reference(
    input: &Tensor4,
    weight: &Tensor4,
    spec: &ConvSpec,
    lattice: &DilationMatrix,
) -> Result<Tensor4> {
    check_forward(input, weight, spec, lattice)?;
    reference_loop(input, weight, spec, |c, k| lattice.get(c, k))
}

/// Dilated convolution with a single rate `d` for every kernel, summed in the
/// same order as [`conv2d_reference`].
pub fn conv2d_dilated_reference(
    input: &Tensor4,
    weight: &Tensor4,
    spec: &ConvSpec,
    d: u32,
) -> Result<Tensor4> {
    crate::conv::check_weight(weight, spec)?;
    crate::conv::check_input(input, spec)?;
    if d == 0 {
        return Err(Error::invalid("dilation rate must be >= 1"));
    }
    reference_loop(input, weight, spec, |_, _| d)
}

fn reference_loop(
    input: &Tensor4,
    weight: &Tensor4,
    spec: &ConvSpec,
    rate: impl Fn(usize, usize) -> u32,
) -> Result<Tensor4> {
    let [n_batch, _, h, w] = input.dims();
    let out_dims = spec.output_dims(input.dims());
    let [_, cout, hout, wout] = out_dims;
    let mut out = Tensor4::zeros(out_dims)?;
    let cin_pg = spec.cin_per_group();
    let cout_pg = spec.cout_per_group();
    let ksize = spec.kernel;
    let r = (ksize / 2) as isize;
    let s = spec.stride as isize;
    let (h, w) = (h as isize, w as isize);

    for n in 0..n_batch {
        for c in 0..cout {
            let group = c / cout_pg;
            for x in 0..hout {
                for y in 0..wout {
                    let mut acc = 0.0;
                    for kl in 0..cin_pg {
                        let k = group * cin_pg + kl;
                        let d = rate(c, kl) as isize;
                        for i in 0..ksize {
                            let xi = x as isize * s + (i as isize - r) * d;
                            if xi < 0 || xi >= h {
                                continue;
                            }
                            for j in 0..ksize {
                                let yj = y as isize * s + (j as isize - r) * d;
                                if yj < 0 || yj >= w {
                                    continue;
                                }
                                acc += weight.get(c, kl, i, j)
                                    * input.get(n, k, xi as usize, yj as usize);
                            }
                        }
                    }
                    out.set(n, c, x, y, acc);
                }
            }
        }
    }
    Ok(out)
}
