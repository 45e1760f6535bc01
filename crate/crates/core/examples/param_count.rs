//! Parameter and MAC totals for every supported backbone, standard and
//! poly-scale.

use psconv::zoo::{count, ArchSpec, Variant, ARCH_NAMES};

fn main() -> psconv::Result<()> {
    println!("{:<18} {:>9} {:>14} {:>16}", "arch", "variant", "params", "MACs");
    for name in ARCH_NAMES {
        for variant in [Variant::Standard, Variant::Psconv] {
            let report = count(&ArchSpec::by_name(name, variant)?, (224, 224))?;
            println!(
                "{:<18} {:>9} {:>14} {:>16}",
                name, variant, report.total_params, report.total_macs
            );
        }
    }
    Ok(())
}
