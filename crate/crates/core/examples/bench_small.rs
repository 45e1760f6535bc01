//! A quick strategy benchmark on a small layer. `psconv bench` runs the
//! full-size version.

use psconv::bench::{run_bench, BenchConfig};

fn main() -> psconv::Result<()> {
    let config = BenchConfig {
        input: [8, 32, 28, 28],
        cout: 32,
        repeats: 5,
        warmup: 1,
        ..BenchConfig::default()
    };
    let report = run_bench(&config)?;
    print!("{}", report.to_csv());
    Ok(())
}
