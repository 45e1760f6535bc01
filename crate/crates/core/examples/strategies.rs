//! Run one poly-scale layer through all three forward strategies and
//! compare them with the reference loop.

use psconv::conv::{forward, ConvSpec, Strategy};
use psconv::lattice::{DilationMatrix, DilationPattern};
use psconv::tensor::{Rng, Tensor4};

fn main() -> psconv::Result<()> {
    let spec = ConvSpec::new(16, 32, 3, 1, 2)?;
    let lattice = DilationMatrix::psconv_grouped(32, 16, 2, &DilationPattern::default())?;
    let mut rng = Rng::new(7);
    let input = Tensor4::randn([2, 16, 20, 20], &mut rng, 1.0)?;
    let weight = Tensor4::randn(spec.weight_dims(), &mut rng, 0.2)?;

    let oracle = forward(Strategy::Reference, &input, &weight, &spec, &lattice)?;
    for strategy in [Strategy::Masked, Strategy::Rearranged] {
        let out = forward(strategy, &input, &weight, &spec, &lattice)?;
        println!("{strategy:?}: max |diff| vs reference = {:e}", out.max_abs_diff(&oracle)?);
    }
    println!("output dims {:?}", oracle.dims());
    Ok(())
}
