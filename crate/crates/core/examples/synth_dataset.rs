//! Generate a synthetic bitemporal dataset, write it in the `A/ B/ label/ list/`
//! layout and read it back.
//!
//! ```text
//! cargo run --release --example synth_dataset -- [out_dir]
//! ```

use std::path::PathBuf;

use cemcd::data::{synthesize_dataset, write_dataset, write_list, DiskDataset, SampleSource, Split, SynthesisConfig};

fn main() -> cemcd::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "cemcd-out/synth".into()));
    let cfg = SynthesisConfig {
        num_samples: 12,
        tile_size: 128,
        change_fraction_target: 0.05,
        seed: 7,
        ..SynthesisConfig::default()
    };
    let samples = synthesize_dataset(&cfg)?;
    write_dataset(&out, &samples)?;
    let ids: Vec<String> = samples.iter().map(|s| s.id().to_string()).collect();
    write_list(&out, Split::Train, &ids[..8])?;
    write_list(&out, Split::Test, &ids[8..])?;

    for s in &samples {
        println!("{}  change {:.2}%", s.id(), 100.0 * s.change_fraction());
    }
    let mean = samples.iter().map(|s| s.change_fraction()).sum::<f64>() / samples.len() as f64;
    println!("mean change fraction {:.3} (target {})", mean, cfg.change_fraction_target);

    let test = DiskDataset::open(&out, Split::Test, cfg.tile_size)?;
    let first = test.get(0)?;
    assert_eq!(first.gt(), samples[8].gt());
    println!("reloaded {} test samples from {}", test.len(), out.display());
    Ok(())
}
