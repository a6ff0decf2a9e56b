//! Render the dropped-pixel overlay of the cross-entropy mask for a sweep of
//! masking ratios.
//!
//! ```text
//! cargo run --release --example masking -- [out_dir]
//! ```

use std::path::PathBuf;

use cemcd::data::{synthesize_dataset, SynthesisConfig};
use cemcd::infer::{render_dropped_overlay, DROPPED};
use cemcd::loss::{cem_mask, CemConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> cemcd::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "cemcd-out/masking".into()));
    std::fs::create_dir_all(&out)?;
    let sample = synthesize_dataset(&SynthesisConfig {
        num_samples: 1,
        tile_size: 256,
        seed: 5,
        ..SynthesisConfig::default()
    })?
    .remove(0);

    for delta in [0.2, 0.3, 0.4, 0.5, 0.6] {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mask = cem_mask(sample.gt().view(), &CemConfig::new(delta)?, &mut rng);
        let img = render_dropped_overlay(sample.gt().view(), &mask, sample.pre().view())?;
        let path = out.join(format!("dropped_delta_{delta}.png"));
        img.save(&path).map_err(|source| cemcd::Error::Image { path: path.clone(), source })?;
        let red = img.pixels().filter(|p| p.0 == DROPPED).count();
        println!(
            "delta {delta}: {:.1}% of pixels dropped -> {}",
            100.0 * red as f64 / mask.len() as f64,
            path.display()
        );
    }
    Ok(())
}
