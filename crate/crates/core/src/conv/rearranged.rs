//! Block execution after residue-class channel sorting.
//!
//! Sorting input channels by `k mod t` and output channels by `c mod t` turns
//! the cyclic lattice into `t × t` constant blocks, so the layer becomes `t²`
//! ordinary dilated convolutions between channel slices. Because a layer's
//! input channels are the previous layer's output channels, a stack of such
//! layers can stay in permuted order end to end: see
//! [`RearrangedLayer::forward_permuted`] and [`RearrangedLayer::chains_into`].

use rayon::prelude::*;

use crate::conv::kernel::{accumulate_plane, PlaneGeom};
use crate::conv::{check_forward, check_input, ConvSpec};
use crate::error::{Error, Result};
use crate::lattice::{invert_permutation, DilationMatrix, Rearrangement};
use crate::tensor::Tensor4;

/// `out[:, p] = t[:, perm[p]]` along axis 1.
pub fn permute_channels(t: &Tensor4, perm: &[usize]) -> Result<Tensor4> {
    let dims = t.dims();
    if perm.len() != dims[1] {
        return Err(Error::shape(format!(
            "permutation of length {} for {} channels",
            perm.len(),
            dims[1]
        )));
    }
    let mut out = Tensor4::zeros(dims)?;
    for n in 0..dims[0] {
        for (p, &src) in perm.iter().enumerate() {
            out.plane_mut(n, p).copy_from_slice(t.plane(n, src));
        }
    }
    Ok(out)
}

/// Inverse of [`permute_channels`]: `out[:, perm[p]] = t[:, p]`.
pub fn unpermute_channels(t: &Tensor4, perm: &[usize]) -> Result<Tensor4> {
    permute_channels(t, &invert_permutation(perm))
}

/// A lattice convolution with weights pre-permuted into block order.
#[derive(Clone, Debug)]
pub struct RearrangedLayer {
    spec: ConvSpec,
    plan: Rearrangement,
    /// Weights indexed by permuted output channel and permuted local input
    /// channel.
    weight: Tensor4,
}

impl RearrangedLayer {
    pub fn new(
        weight: &Tensor4,
        spec: &ConvSpec,
        lattice: &DilationMatrix,
        plan: &Rearrangement,
    ) -> Result<Self> {
        crate::conv::check_weight(weight, spec)?;
        crate::conv::check_lattice(lattice, spec)?;
        if *plan != lattice.rearrangement()? {
            return Err(Error::PlanMismatch(
                "plan was not derived from this lattice".into(),
            ));
        }
        let cin_pg = spec.cin_per_group();
        let cout_pg = spec.cout_per_group();
        let mut permuted = Tensor4::zeros(weight.dims())?;
        for p in 0..spec.cout {
            let g = p / cout_pg;
            let c = plan.perm_out[p];
            for s in 0..cin_pg {
                let kl = plan.perm_in[g * cin_pg + s] - g * cin_pg;
                permuted.plane_mut(p, s).copy_from_slice(weight.plane(c, kl));
            }
        }
        Ok(RearrangedLayer {
            spec: *spec,
            plan: plan.clone(),
            weight: permuted,
        })
    }

    pub fn plan(&self) -> &Rearrangement {
        &self.plan
    }

    pub fn spec(&self) -> &ConvSpec {
        &self.spec
    }

    /// True if `next` can consume this layer's permuted output directly.
    pub fn chains_into(&self, next: &RearrangedLayer) -> bool {
        self.plan.perm_out == next.plan.perm_in
    }

    /// Input in original channel order, output in original channel order.
    pub fn forward(&self, input: &Tensor4) -> Result<Tensor4> {
        check_input(input, &self.spec)?;
        let permuted = permute_channels(input, &self.plan.perm_in)?;
        let out = self.forward_permuted(&permuted)?;
        unpermute_channels(&out, &self.plan.perm_out)
    }

    /// Input already in `perm_in` order; output left in `perm_out` order.
    pub fn forward_permuted(&self, input: &Tensor4) -> Result<Tensor4> {
        check_input(input, &self.spec)?;
        let spec = &self.spec;
        let layout = &self.plan.layout;
        let [_, _, h, w] = input.dims();
        let geom = PlaneGeom::new(spec, h, w);
        let mut out = Tensor4::zeros(spec.output_dims(input.dims()))?;
        let plane = geom.hout * geom.wout;
        if plane == 0 {
            return Ok(out);
        }
        let cout = spec.cout;
        let cin_pg = spec.cin_per_group();
        let cout_pg = spec.cout_per_group();
        let taps = spec.kernel * spec.kernel;
        let t = layout.interval;
        let weight = &self.weight;

        out.data_mut()
            .par_chunks_mut(plane)
            .enumerate()
            .for_each(|(idx, out_plane)| {
                let (n, p) = (idx / cout, idx % cout);
                let g = p / cout_pg;
                let q = (p % cout_pg) / layout.out_block;
                let wrow = &weight.data()[p * cin_pg * taps..(p + 1) * cin_pg * taps];
                for r in 0..t {
                    let d = layout.rate(q, r) as usize;
                    for s in r * layout.in_block..(r + 1) * layout.in_block {
                        let inp = input.plane(n, g * cin_pg + s);
                        accumulate_plane(out_plane, inp, &wrow[s * taps..(s + 1) * taps], d, &geom);
                    }
                }
            });
        Ok(out)
    }
}

/// Lattice convolution executed block-wise after channel rearrangement.
/// Requires a plan from [`DilationMatrix::rearrangement`] on the same lattice.
pub fn psconv_forward_rearranged(
    input: &Tensor4,
    weight: &Tensor4,
    spec: &ConvSpec,
    lattice: &DilationMatrix,
    plan: &Rearrangement,
) -> Result<Tensor4> {
    check_forward(input, weight, spec, lattice)?;
    RearrangedLayer::new(weight, spec, lattice, plan)?.forward(input)
}
