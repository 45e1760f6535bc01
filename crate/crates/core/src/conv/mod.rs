//! Forward and backward convolution under a per-kernel dilation lattice.
//!
//! All paths share one boundary convention: output element `(x, y)` is
//! centred on input position `(x·s, y·s)` and tap `(i, j)` of kernel `(c, k)`
//! reads `F[k, x·s + (i−r)·D(c,k), y·s + (j−r)·D(c,k)]` with `r = (K−1)/2`.
//! Reads outside the input are zero. At stride 1 the output therefore has the
//! input's spatial size for every dilation at once. Output size is
//! `ceil(H/s) × ceil(W/s)`.
//!
//! Three forward strategies compute the same operator:
//!
//! - [`conv2d_reference`]: the direct nested loop, used as the oracle.
//! - [`psconv_forward_masked`]: one dense dilated convolution per distinct
//!   rate with the other kernels' weights zeroed, summed.
//! - [`psconv_forward_rearranged`]: channels sorted into residue classes so the
//!   lattice becomes block-constant, then one dilated convolution per block.
//!
//! Work is split over `(n, c)` output planes with rayon; every output element
//! is produced by one worker with a fixed summation order, so results do not
//! depend on the thread count.

mod backward;
mod kernel;
mod masked;
mod rearranged;
mod reference;

pub use backward::{conv2d_backward_input, conv2d_backward_weight};
pub use kernel::dilated_conv;
pub use masked::{psconv_forward_masked, psconv_forward_masked_counted};
pub(crate) use masked::masked_forward_impl;
pub use rearranged::{permute_channels, psconv_forward_rearranged, unpermute_channels, RearrangedLayer};
pub use reference::{conv2d_dilated_reference, conv2d_reference};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::DilationMatrix;
use crate::tensor::Tensor4;

/// Static shape contract of one convolution layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(cin: usize, cout: usize, kernel: usize, stride: usize, groups: usize) -> Result<Self> {
        let spec = ConvSpec {
            cin,
            cout,
            kernel,
            stride,
            groups,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cin == 0 || self.cout == 0 || self.stride == 0 || self.groups == 0 {
            return Err(Error::invalid(format!(
                "channels, stride and groups must be positive: {self:?}"
            )));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::invalid(format!(
                "kernel size must be odd, got {}",
                self.kernel
            )));
        }
        for (what, value) in [("Cin", self.cin), ("Cout", self.cout)] {
            if value % self.groups != 0 {
                return Err(Error::NotDivisible {
                    what,
                    value,
                    divisor: self.groups,
                });
            }
        }
        Ok(())
    }

    pub fn cin_per_group(&self) -> usize {
        self.cin / self.groups
    }

    pub fn cout_per_group(&self) -> usize {
        self.cout / self.groups
    }

    pub fn weight_dims(&self) -> [usize; 4] {
        [self.cout, self.cin_per_group(), self.kernel, self.kernel]
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (h.div_ceil(self.stride), w.div_ceil(self.stride))
    }

    pub fn output_dims(&self, input: [usize; 4]) -> [usize; 4] {
        let (ho, wo) = self.output_hw(input[2], input[3]);
        [input[0], self.cout, ho, wo]
    }

    pub fn params(&self) -> u64 {
        (self.cout * self.cin_per_group() * self.kernel * self.kernel) as u64
    }
}

/// Forward strategy selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Reference,
    Masked,
    Rearranged,
}

/// Runs the chosen forward strategy. The rearranged strategy builds its plan
/// on the fly.
pub fn forward(
    strategy: Strategy,
    input: &Tensor4,
    weight: &Tensor4,
    spec: &ConvSpec,
    lattice: &DilationMatrix,
) -> Result<Tensor4> {
    match strategy {
        Strategy::Reference => conv2d_reference(input, weight, spec, lattice),
        Strategy::Masked => psconv_forward_masked(input, weight, spec, lattice),
        Strategy::Rearranged => {
            let plan = lattice.rearrangement()?;
            psconv_forward_rearranged(input, weight, spec, lattice, &plan)
        }
    }
}

pub(crate) fn check_weight(weight: &Tensor4, spec: &ConvSpec) -> Result<()> {
    spec.validate()?;
    if weight.dims() != spec.weight_dims() {
        return Err(Error::shape(format!(
            "weight dims {:?}, spec expects {:?}",
            weight.dims(),
            spec.weight_dims()
        )));
    }
    Ok(())
}

pub(crate) fn check_input(input: &Tensor4, spec: &ConvSpec) -> Result<()> {
    if input.dims()[1] != spec.cin {
        return Err(Error::shape(format!(
            "input has {} channels, spec expects {}",
            input.dims()[1],
            spec.cin
        )));
    }
    Ok(())
}

pub(crate) fn check_lattice(lattice: &DilationMatrix, spec: &ConvSpec) -> Result<()> {
    if lattice.rows() != spec.cout
        || lattice.cols() != spec.cin_per_group()
        || lattice.groups() != spec.groups
    {
        return Err(Error::shape(format!(
            "lattice is {}x{} with {} groups, spec needs {}x{} with {} groups",
            lattice.rows(),
            lattice.cols(),
            lattice.groups(),
            spec.cout,
            spec.cin_per_group(),
            spec.groups
        )));
    }
    Ok(())
}

pub(crate) fn check_forward(
    input: &Tensor4,
    weight: &Tensor4,
    spec: &ConvSpec,
    lattice: &DilationMatrix,
) -> Result<()> {
    check_weight(weight, spec)?;
    check_input(input, spec)?;
    check_lattice(lattice, spec)
}
