//! Export a trained encoder, plug it back in as an external frozen backbone
//! and fine-tune only the change head. Finishes with a checkpoint round trip.
//!
//! ```text
//! cargo run --release --example external_encoder -- [out_dir]
//! ```

use std::path::PathBuf;

use cemcd::config::RunConfig;
use cemcd::data::{synthesize_dataset, SynthesisConfig};
use cemcd::encoder::{EncoderBackend, EncoderSpec};
use cemcd::infer::evaluate;
use cemcd::metrics::report;
use cemcd::network::{ChangeDetector, NetworkConfig};
use cemcd::nn::Module;
use cemcd::train::train;

fn main() -> cemcd::Result<()> {
    env_logger::init();
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "cemcd-out/external".into()));
    let mut samples = synthesize_dataset(&SynthesisConfig {
        num_samples: 40,
        tile_size: 64,
        change_fraction_target: 0.08,
        seed: 4,
        ..SynthesisConfig::default()
    })?;
    let test = samples.split_off(32);
    let channels = [8, 16, 32, 64];

    let mut run = RunConfig::default();
    run.network = NetworkConfig::small(channels, 8);
    run.train.augment.crop = 64;
    run.train.augment.flip_prob = 0.0;
    run.train.epochs = 30;
    run.train.base_lr = 0.1;
    run.train.schedule_horizon = 60.0;
    let pretrained = train(&run, &samples, &Vec::new(), None)?.into_best_model();
    let weights = out.join("encoder.ckpt");
    std::fs::create_dir_all(&out)?;
    pretrained.encoder.save(&weights)?;

    run.train.epochs = 15;
    run.network.encoder = EncoderSpec {
        backend: EncoderBackend::External,
        channels,
        weights: Some(weights.clone()),
        freeze: true,
    };
    let model = ChangeDetector::<f32>::new(&run.seeded_network())?;
    let mut trainable = 0;
    let mut frozen = 0;
    model.visit("", &mut |name, p| {
        if name.starts_with("encoder.") && !p.trainable {
            frozen += p.value.len();
        } else if p.trainable {
            trainable += p.value.len();
        }
    });
    println!("loaded {} : {frozen} frozen encoder values, {trainable} trainable", weights.display());

    let base = report(&evaluate(&pretrained, &test, false)?)?;
    println!("pretrained test F1 {:.2}%", 100.0 * base.f1);
    let tuned = train(&run, &samples, &Vec::new(), Some(&out.join("finetune")))?.into_best_model();
    let before = tuned.encoder.checkpoint();
    let reference = pretrained.encoder.checkpoint();
    assert_eq!(
        before.tensors.get("stage4.conv.weight").map(|t| &t.data),
        reference.tensors.get("stage4.conv.weight").map(|t| &t.data)
    );
    println!("frozen encoder weights unchanged after fine-tuning");

    let path = out.join("model.ckpt");
    tuned.save(&path)?;
    let reloaded = ChangeDetector::<f32>::load(&path)?;
    let a = report(&evaluate(&tuned, &test, false)?)?;
    let b = report(&evaluate(&reloaded, &test, false)?)?;
    assert_eq!(a, b);
    println!("test F1 {:.2}% (identical after reload from {})", 100.0 * a.f1, path.display());
    Ok(())
}
