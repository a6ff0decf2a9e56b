//! Evaluate every imbalance loss on the same imperfect prediction, and show how
//! the cross-entropy mask thins out the background as the masking ratio grows.
//!
//! ```text
//! cargo run --release --example losses
//! ```

use cemcd::data::{synthesize_dataset, SynthesisConfig};
use cemcd::loss::{cem_mask, CemConfig, LossConfig, LossKind};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> cemcd::Result<()> {
    let sample = synthesize_dataset(&SynthesisConfig {
        num_samples: 1,
        tile_size: 128,
        change_fraction_target: 0.05,
        seed: 3,
        ..SynthesisConfig::default()
    })?
    .remove(0);
    let gt = sample.gt();
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    // A detector that finds most of the change but is unsure everywhere.
    let probs: Array2<f64> = gt.mapv(|y| {
        let miss = rng.gen_bool(0.3);
        let centre = if y == 1 && !miss { 0.7 } else { 0.15 };
        (centre + rng.gen_range(-0.1..0.1f64)).clamp(0.01, 0.99)
    });

    let mask = cem_mask(gt.view(), &CemConfig::new(0.3)?, &mut rng);
    for kind in LossKind::ALL {
        let cfg = LossConfig::of_kind(kind);
        let value = cfg.evaluate_probs(probs.view(), gt.view(), Some(&mask))?;
        println!("{:>8}  {value:.5}", kind.to_string());
    }

    let total = gt.len() as f64;
    let change = gt.iter().filter(|&&y| y == 1).count() as f64;
    println!("\nchange pixels {:.2}%", 100.0 * change / total);
    for delta in [0.0, 0.2, 0.3, 0.4, 0.5, 0.6] {
        let m = cem_mask(gt.view(), &CemConfig::new(delta)?, &mut rng);
        let kept = m.kept() as f64;
        println!(
            "delta {delta:.1}  kept {:.1}%  change share of kept {:.2}%",
            100.0 * kept / total,
            100.0 * change / kept
        );
    }
    Ok(())
}
