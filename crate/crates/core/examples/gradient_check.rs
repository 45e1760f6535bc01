//! Compare the analytic backward passes with central differences for the
//! scalar loss L = <conv(F), U>.

use psconv::conv::{conv2d_backward_input, conv2d_backward_weight, conv2d_reference, ConvSpec};
use psconv::lattice::{DilationMatrix, DilationPattern};
use psconv::tensor::{Rng, Tensor4};

fn main() -> psconv::Result<()> {
    let spec = ConvSpec::new(4, 4, 3, 2, 1)?;
    let lattice = DilationMatrix::psconv(4, 4, &DilationPattern::default())?;
    let mut rng = Rng::new(11);
    let f = Tensor4::randn([1, 4, 6, 6], &mut rng, 1.0)?;
    let g = Tensor4::randn(spec.weight_dims(), &mut rng, 1.0)?;
    let u = Tensor4::randn(spec.output_dims(f.dims()), &mut rng, 1.0)?;

    let gf = conv2d_backward_input(&u, &g, &spec, &lattice, (6, 6))?;
    let gg = conv2d_backward_weight(&u, &f, &spec, &lattice)?;
    let loss = |f: &Tensor4, g: &Tensor4| conv2d_reference(f, g, &spec, &lattice)?.dot(&u);

    let h = 1e-5;
    let mut worst = 0.0f64;
    for idx in [0, 7, 50, 101, 143] {
        let (mut plus, mut minus) = (f.clone(), f.clone());
        plus.data_mut()[idx] += h;
        minus.data_mut()[idx] -= h;
        let fd = (loss(&plus, &g)? - loss(&minus, &g)?) / (2.0 * h);
        println!("dL/dF[{idx:3}]  analytic {:+.9}  fd {fd:+.9}", gf.data()[idx]);
        worst = worst.max((fd - gf.data()[idx]).abs());
    }
    for idx in [0, 13, 77, 143] {
        let (mut plus, mut minus) = (g.clone(), g.clone());
        plus.data_mut()[idx] += h;
        minus.data_mut()[idx] -= h;
        let fd = (loss(&f, &plus)? - loss(&f, &minus)?) / (2.0 * h);
        println!("dL/dG[{idx:3}]  analytic {:+.9}  fd {fd:+.9}", gg.data()[idx]);
        worst = worst.max((fd - gg.data()[idx]).abs());
    }
    println!("worst absolute gap {worst:e}");
    Ok(())
}
