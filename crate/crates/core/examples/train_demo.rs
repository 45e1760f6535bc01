//! Train the two-layer demo network on synthetic blobs and print the
//! per-epoch mean loss.

use psconv::train::{train, TrainConfig};

fn main() -> psconv::Result<()> {
    let config = TrainConfig::new(200, 0.05, 1);
    let outcome = train(&config)?;
    for (epoch, mean) in outcome.epoch_means().iter().enumerate() {
        println!("epoch {epoch:2}  mean loss {mean:.4}");
    }
    let means = outcome.epoch_means();
    println!(
        "final/first = {:.3}",
        means.last().unwrap() / means.first().unwrap()
    );
    Ok(())
}
