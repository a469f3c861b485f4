//! Trains the full model on the synthetic periodic dataset and reports
//! filtered test MRR. Usage: `cargo run --release -p lms-core --example
//! synthetic_overfit -- [epochs] [seed] [variant]`

use lms_core::config::{Config, Variant};
use lms_core::dataset::SplitName;
use lms_core::synthetic::{generate, SyntheticConfig};
use lms_core::training::train;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).map_or(300, |s| s.parse().unwrap());
    let seed: u64 = args.get(2).map_or(0, |s| s.parse().unwrap());
    let variant = args
        .get(3)
        .map_or(Variant::Full, |s| Variant::parse(s).unwrap());
    let window: usize = args.get(4).map_or(8, |s| s.parse().unwrap());

    let data = generate(&SyntheticConfig {
        seed,
        ..SyntheticConfig::default()
    });
    let cfg = Config {
        dim: 48,
        time_dim: 16,
        channels: 12,
        history_window: window,
        periods: vec![3, 7, 14, 30],
        max_epochs: epochs,
        patience: 30,
        seed,
        variant,
        ..Config::default()
    };
    let start = std::time::Instant::now();
    let trained = train(&data, &cfg, false).unwrap();
    let test = trained.evaluate(&data, SplitName::Test, None, false).unwrap();
    println!(
        "variant {:?} seed {seed}: epochs {} (best {}) | {}",
        variant,
        trained.epochs_run,
        trained.best_epoch,
        test.table_row()
    );
    println!("total {:.1}s", start.elapsed().as_secs_f64());
}
