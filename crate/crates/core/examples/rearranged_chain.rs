//! Two stacked poly-scale layers kept in rearranged channel order between
//! them, so only the network input and output are permuted.

use psconv::conv::{conv2d_reference, permute_channels, unpermute_channels, ConvSpec, RearrangedLayer};
use psconv::lattice::{DilationMatrix, DilationPattern};
use psconv::tensor::{Rng, Tensor4};

fn main() -> psconv::Result<()> {
    let p = DilationPattern::default();
    let spec = ConvSpec::new(16, 16, 3, 1, 1)?;
    let lattice = DilationMatrix::psconv(16, 16, &p)?;
    let plan = lattice.rearrangement()?;

    let mut rng = Rng::new(3);
    let x = Tensor4::randn([1, 16, 12, 12], &mut rng, 1.0)?;
    let w1 = Tensor4::randn(spec.weight_dims(), &mut rng, 0.3)?;
    let w2 = Tensor4::randn(spec.weight_dims(), &mut rng, 0.3)?;

    let l1 = RearrangedLayer::new(&w1, &spec, &lattice, &plan)?;
    let l2 = RearrangedLayer::new(&w2, &spec, &lattice, &plan)?;
    println!("layer 1 output order feeds layer 2 directly: {}", l1.chains_into(&l2));

    let h = l1.forward_permuted(&permute_channels(&x, &l1.plan().perm_in)?)?;
    let y = unpermute_channels(&l2.forward_permuted(&h)?, &l2.plan().perm_out)?;

    let oracle = conv2d_reference(&conv2d_reference(&x, &w1, &spec, &lattice)?, &w2, &spec, &lattice)?;
    println!("max |diff| vs two reference layers = {:e}", y.max_abs_diff(&oracle)?);
    Ok(())
}
