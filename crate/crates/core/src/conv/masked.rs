use crate::conv::kernel::dilated_conv_into;
use crate::conv::{check_forward, ConvSpec};
use crate::error::Result;
use crate::lattice::DilationMatrix;
use crate::tensor::Tensor4;

/// Lattice convolution as a sum of dense dilated convolutions, one per
/// distinct rate in `lattice`, each run with the weights of every other
/// rate's kernels zeroed.
pub fn psconv_forward_masked(
    input: &Tensor4,
    weight: &Tensor4,
    spec: &ConvSpec,
    lattice: &DilationMatrix,
) -> Result<Tensor4> {
    Ok(masked_forward_impl(input, weight, spec, lattice, false)?.0)
}

/// [`psconv_forward_masked`] that also reports how many dense dilated
/// convolutions it ran.
pub fn psconv_forward_masked_counted(
    input: &Tensor4,
    weight: &Tensor4,
    spec: &ConvSpec,
    lattice: &DilationMatrix,
) -> Result<(Tensor4, usize)> {
    masked_forward_impl(input, weight, spec, lattice, false)
}

/// `sign_flip_fault` negates the last rate's branch; the verification
/// harness uses it to prove it can detect a broken strategy.
pub(crate) fn masked_forward_impl(
    input: &Tensor4,
    weight: &Tensor4,
    spec: &ConvSpec,
    lattice: &DilationMatrix,
    sign_flip_fault: bool,
) -> Result<(Tensor4, usize)> {
    check_forward(input, weight, spec, lattice)?;
    let rates = lattice.distinct_rates();
    let out_dims = spec.output_dims(input.dims());

    if rates.len() == 1 && !sign_flip_fault {
        let mut out = Tensor4::zeros(out_dims)?;
        dilated_conv_into(&mut out, input, weight, spec, rates[0] as usize);
        return Ok((out, 1));
    }

    let taps = spec.kernel * spec.kernel;
    let cin_pg = spec.cin_per_group();
    let mut total = Tensor4::zeros(out_dims)?;
    let mut branch = Tensor4::zeros(out_dims)?;
    for (idx, &rate) in rates.iter().enumerate() {
        let mut masked = weight.clone();
        for c in 0..spec.cout {
            for kl in 0..cin_pg {
                if lattice.get(c, kl) != rate {
                    let start = (c * cin_pg + kl) * taps;
                    masked.data_mut()[start..start + taps].fill(0.0);
                }
            }
        }
        branch.data_mut().fill(0.0);
        dilated_conv_into(&mut branch, input, &masked, spec, rate as usize);
        let sign = if sign_flip_fault && idx + 1 == rates.len() {
            -1.0
        } else {
            1.0
        };
        total.axpy(sign, &branch)?;
    }
    Ok((total, rates.len()))
}
