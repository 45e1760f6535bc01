use rayon::prelude::*;

use crate::conv::kernel::{correlate_plane, scatter_plane, PlaneGeom};
use crate::conv::{check_lattice, check_weight, ConvSpec};
use crate::error::{Error, Result};
use crate::lattice::DilationMatrix;
use crate::tensor::Tensor4;

fn check_grad_out(grad_out: &Tensor4, spec: &ConvSpec, input_hw: (usize, usize)) -> Result<()> {
    let expected = spec.output_dims([grad_out.dims()[0], spec.cin, input_hw.0, input_hw.1]);
    if grad_out.dims() != expected {
        return Err(Error::shape(format!(
            "grad_out dims {:?}, forward output is {:?}",
            grad_out.dims(),
            expected
        )));
    }
    Ok(())
}

/// Gradient of a scalar loss with respect to the input, given its gradient
/// with respect to the output. `input_hw` is the forward input's spatial size
/// (it is not recoverable from `grad_out` when stride > 1).
pub fn conv2d_backward_input(
    grad_out: &Tensor4,
    weight: &Tensor4,
    spec: &ConvSpec,
    lattice: &DilationMatrix,
    input_hw: (usize, usize),
) -> Result<Tensor4> {
    check_weight(weight, spec)?;
    check_lattice(lattice, spec)?;
    check_grad_out(grad_out, spec, input_hw)?;

    let (h, w) = input_hw;
    let n_batch = grad_out.dims()[0];
    let geom = PlaneGeom::new(spec, h, w);
    let mut grad_in = Tensor4::zeros([n_batch, spec.cin, h, w])?;
    let plane = h * w;
    if plane == 0 {
        return Ok(grad_in);
    }
    let cin = spec.cin;
    let cin_pg = spec.cin_per_group();
    let cout_pg = spec.cout_per_group();

    grad_in
        .data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(idx, gi)| {
            let (n, k) = (idx / cin, idx % cin);
            let group = k / cin_pg;
            let kl = k % cin_pg;
            for c in group * cout_pg..(group + 1) * cout_pg {
                let d = lattice.get(c, kl) as usize;
                scatter_plane(gi, grad_out.plane(n, c), weight.plane(c, kl), d, &geom);
            }
        });
    Ok(grad_in)
}

/// Gradient of a scalar loss with respect to the weights.
pub fn conv2d_backward_weight(
    grad_out: &Tensor4,
    input: &Tensor4,
    spec: &ConvSpec,
    lattice: &DilationMatrix,
) -> Result<Tensor4> {
    spec.validate()?;
    crate::conv::check_input(input, spec)?;
    check_lattice(lattice, spec)?;
    let [n_batch, _, h, w] = input.dims();
    check_grad_out(grad_out, spec, (h, w))?;
    if grad_out.dims()[0] != n_batch {
        return Err(Error::shape("grad_out and input batch sizes differ"));
    }

    let geom = PlaneGeom::new(spec, h, w);
    let cin_pg = spec.cin_per_group();
    let cout_pg = spec.cout_per_group();
    let taps = spec.kernel * spec.kernel;
    let mut grad_w = Tensor4::zeros(spec.weight_dims())?;

    grad_w
        .data_mut()
        .par_chunks_mut(cin_pg * taps)
        .enumerate()
        .for_each(|(c, gw)| {
            let group = c / cout_pg;
            for kl in 0..cin_pg {
                let d = lattice.get(c, kl) as usize;
                let taps_grad = &mut gw[kl * taps..(kl + 1) * taps];
                for n in 0..n_batch {
                    correlate_plane(
                        taps_grad,
                        grad_out.plane(n, c),
                        input.plane(n, group * cin_pg + kl),
                        d,
                        &geom,
                    );
                }
            }
        });
    Ok(grad_w)
}
