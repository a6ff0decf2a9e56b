//! Train a small detector, then compare single-pass and flip-averaged
//! prediction and write probability maps and error overlays.
//!
//! ```text
//! cargo run --release --example tta -- [out_dir]
//! ```

use std::path::PathBuf;

use cemcd::config::RunConfig;
use cemcd::data::{synthesize_dataset, SynthesisConfig};
use cemcd::infer::{evaluate, predict, write_prediction};
use cemcd::loss::{cem_mask, CemConfig};
use cemcd::metrics::report;
use cemcd::network::NetworkConfig;
use cemcd::train::train;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> cemcd::Result<()> {
    env_logger::init();
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "cemcd-out/tta".into()));
    let mut samples = synthesize_dataset(&SynthesisConfig {
        num_samples: 40,
        tile_size: 64,
        change_fraction_target: 0.08,
        seed: 2,
        ..SynthesisConfig::default()
    })?;
    let test = samples.split_off(32);

    let mut run = RunConfig::default();
    run.network = NetworkConfig::small([8, 16, 32, 64], 8);
    run.train.augment.crop = 64;
    run.train.augment.flip_prob = 0.0;
    run.train.epochs = 40;
    run.train.base_lr = 0.1;
    run.train.schedule_horizon = 80.0;
    let trainer = train(&run, &samples, &Vec::new(), Some(&out))?;
    let model = trainer.best_model();

    for tta in [false, true] {
        let m = report(&evaluate(model, &test, tta)?)?;
        println!(
            "tta {:<5}  F1 {:.2}%  recall {:.2}%  mIoU {:.2}%",
            tta,
            100.0 * m.f1,
            100.0 * m.recall,
            100.0 * m.miou
        );
    }

    let pred_dir = out.join("predictions");
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for sample in test.iter().take(3) {
        let probs = predict(model, sample, true)?;
        let mask = cem_mask(sample.gt().view(), &CemConfig::new(0.3)?, &mut rng);
        let files = write_prediction(&pred_dir, sample, probs.view(), Some(&mask))?;
        println!("{} -> {}", sample.id(), files.overlay.display());
    }
    Ok(())
}
