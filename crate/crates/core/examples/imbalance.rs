//! Compare change-class recall of CEM and plain BCE over several seeds on a
//! strongly imbalanced synthetic set.
//!
//! ```text
//! cargo run --release --example imbalance
//! ```

use std::time::Instant;

use cemcd::config::RunConfig;
use cemcd::data::{synthesize_dataset, SynthesisConfig};
use cemcd::loss::LossKind;
use cemcd::network::NetworkConfig;
use cemcd::train::run_seeds;

fn main() -> cemcd::Result<()> {
    env_logger::init();
    let mut samples = synthesize_dataset(&SynthesisConfig {
        num_samples: 200,
        tile_size: 64,
        change_fraction_target: 0.03,
        seed: 11,
        ..SynthesisConfig::default()
    })?;
    let test = samples.split_off(150);

    let mut run = RunConfig::default();
    run.network = NetworkConfig {
        residual_blocks: 2,
        ..NetworkConfig::small([8, 16, 32, 64], 8)
    };
    run.train.augment.crop = 64;
    run.train.batch_size = 4;
    run.train.epochs = 6;
    run.train.base_lr = 0.1;
    run.train.schedule_horizon = 10.0;

    let seeds: Vec<u64> = (0..5).collect();
    for kind in [LossKind::Cem, LossKind::Bce] {
        let start = Instant::now();
        run.train.loss.kind = kind;
        let summary = run_seeds(&run, &seeds, &samples, &Vec::new(), &test, None)?;
        let recalls: Vec<String> = summary.runs.iter().map(|r| format!("{:.1}", 100.0 * r.report.recall)).collect();
        println!(
            "{:>4}: mean recall {:.2}%  precision {:.2}%  F1 {:.2}%  per seed [{}]  ({:.0}s)",
            kind.to_string(),
            100.0 * summary.mean.recall,
            100.0 * summary.mean.precision,
            100.0 * summary.mean.f1,
            recalls.join(", "),
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
