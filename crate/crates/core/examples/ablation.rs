//! Sweep the masking ratio over a few seeds and write the ablation table.
//!
//! ```text
//! cargo run --release --example ablation -- [out_dir]
//! ```

use std::path::PathBuf;

use cemcd::config::RunConfig;
use cemcd::data::{synthesize_dataset, SynthesisConfig};
use cemcd::network::NetworkConfig;
use cemcd::train::{run_ablation, write_ablation_table, Sweep};

fn main() -> cemcd::Result<()> {
    env_logger::init();
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "cemcd-out/ablation".into()));
    let mut samples = synthesize_dataset(&SynthesisConfig {
        num_samples: 60,
        tile_size: 64,
        change_fraction_target: 0.05,
        seed: 11,
        ..SynthesisConfig::default()
    })?;
    let test = samples.split_off(48);

    let mut run = RunConfig::default();
    run.network = NetworkConfig {
        residual_blocks: 2,
        ..NetworkConfig::small([8, 16, 32, 64], 8)
    };
    run.train.augment.crop = 64;
    run.train.augment.flip_prob = 0.0;
    run.train.epochs = 20;
    run.train.base_lr = 0.1;
    run.train.schedule_horizon = 40.0;

    let sweep: Sweep = "delta=0,0.3,0.6".parse()?;
    let rows = run_ablation(&run, &sweep, &[0, 1], &samples, &Vec::new(), &test, Some(&out))?;
    for row in &rows {
        println!(
            "{:<10} recall {:.2}%  precision {:.2}%  F1 {:.2}%",
            row.setting,
            100.0 * row.summary.mean.recall,
            100.0 * row.summary.mean.precision,
            100.0 * row.summary.mean.f1
        );
    }
    write_ablation_table(&out, &rows)?;
    println!("tables in {}", out.display());
    Ok(())
}
