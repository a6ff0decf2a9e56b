//! Overfit a compact model on a small synthetic set and report training F1.
//!
//! ```text
//! cargo run --release --example overfit
//! ```

use std::time::Instant;

use cemcd::config::RunConfig;
use cemcd::data::{synthesize_dataset, SynthesisConfig};
use cemcd::infer::evaluate;
use cemcd::metrics::report;
use cemcd::network::NetworkConfig;
use cemcd::train::train;

fn main() -> cemcd::Result<()> {
    env_logger::init();
    let samples = synthesize_dataset(&SynthesisConfig {
        num_samples: 20,
        tile_size: 128,
        change_fraction_target: 0.05,
        seed: 7,
        ..SynthesisConfig::default()
    })?;

    let mut run = RunConfig::default();
    run.network = NetworkConfig::small([8, 16, 32, 64], 8);
    run.train.augment.crop = 128;
    run.train.epochs = 40;
    run.train.max_iterations = Some(200);
    run.train.augment.flip_prob = 0.0;
    run.train.base_lr = 0.1;
    run.train.schedule_horizon = 80.0;

    let start = Instant::now();
    let trainer = train(&run, &samples, &Vec::new(), None)?;
    for r in trainer.state().history.iter().step_by(5) {
        println!("epoch {:>2}  lr {:.5}  loss {:.4}", r.epoch, r.lr, r.train_loss);
    }
    let metrics = report(&evaluate(&trainer.model, &samples, false)?)?;
    println!(
        "{} iterations in {:.1}s, training F1 {:.2}%",
        trainer.state().iteration,
        start.elapsed().as_secs_f64(),
        100.0 * metrics.f1
    );
    Ok(())
}
