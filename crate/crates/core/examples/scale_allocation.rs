//! Per-rate weight-magnitude proportions for a synthetic archive whose
//! rate-4 kernels grow with depth.

use psconv::analysis::{allocation_report, default_lattice_specs};
use psconv::io::{NamedTensor, TensorArchive};
use psconv::lattice::{DilationMatrix, DilationPattern};
use psconv::tensor::{Rng, Tensor4};

fn main() -> psconv::Result<()> {
    let p = DilationPattern::default();
    let lattice = DilationMatrix::psconv(8, 8, &p)?;
    let mut rng = Rng::new(5);
    let mut archive = TensorArchive::new();
    for layer in 0..4 {
        let mut w = Tensor4::randn([8, 8, 3, 3], &mut rng, 0.1)?;
        for c in 0..8 {
            for k in 0..8 {
                if lattice.get(c, k) == 4 {
                    for v in &mut w.data_mut()[(c * 8 + k) * 9..(c * 8 + k + 1) * 9] {
                        *v *= 1.0 + layer as f64;
                    }
                }
            }
        }
        archive.push(NamedTensor::from_tensor4(format!("stage{}.conv.weight", layer + 1), &w))?;
    }
    let report = allocation_report(&archive, &default_lattice_specs(&archive, &p, 1))?;
    print!("{}", report.to_csv());
    Ok(())
}
