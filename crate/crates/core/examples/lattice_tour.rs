//! Print the dilation lattices the library can build, and the block
//! structure that channel rearrangement exposes.

use psconv::lattice::{Axis, DilationMatrix, DilationPattern};

fn show(title: &str, d: &DilationMatrix) {
    println!("{title} ({}x{}, groups {})", d.rows(), d.cols(), d.groups());
    for c in 0..d.rows() {
        let row: Vec<String> = d.row(c).iter().map(|r| r.to_string()).collect();
        println!("  {}", row.join(" "));
    }
    println!();
}

fn main() -> psconv::Result<()> {
    let p = DilationPattern::default();
    show("psconv {1,2,1,4}", &DilationMatrix::psconv(8, 8, &p)?);
    show("grouped, g=2", &DilationMatrix::psconv_grouped(8, 8, 2, &p)?);
    show("depthwise", &DilationMatrix::depthwise(8, &p)?);
    show("input axis only", &DilationMatrix::axis_variant(4, 4, &p, Axis::InputOnly)?);
    show("output axis only", &DilationMatrix::axis_variant(4, 4, &p, Axis::OutputOnly)?);
    show("truncated, Cin=6", &DilationMatrix::psconv(4, 6, &p)?);

    let d = DilationMatrix::psconv(8, 8, &p)?;
    let plan = d.rearrangement()?;
    println!("perm_in  {:?}", plan.perm_in);
    println!("perm_out {:?}", plan.perm_out);
    let permuted = plan.permuted_entries(&d);
    println!("after rearrangement, block-constant:");
    for row in permuted.chunks(d.cols()) {
        let row: Vec<String> = row.iter().map(|r| r.to_string()).collect();
        println!("  {}", row.join(" "));
    }
    Ok(())
}
