//! Trains every probe on the default synthetic dataset and prints the
//! symmetric / non-symmetric breakdown with and without frame reversal.

use std::time::Instant;

use probekit::data::{generate_synthetic, OrderCorruption, SynthConfig};
use probekit::probe::{ProbeConfig, ProbeModel, ProbeVariant};
use probekit::train::{evaluate, sensitivity_analysis, train, TrainConfig};

fn main() -> probekit::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(50);
    let synth = generate_synthetic(&SynthConfig::default())?;
    let dataset = synth.to_dataset();
    let dims = synth.config.dims();
    let cfg = TrainConfig { epochs, ..TrainConfig::default() };
    for variant in ProbeVariant::ALL {
        let start = Instant::now();
        let init = ProbeModel::init(&ProbeConfig::preset(variant, dims, 4, dataset.num_classes()))?;
        let (model, history) = train(&init, &dataset, &cfg)?;
        let mut report = evaluate(&model, &dataset.test, &dataset.classes, &synth.pairs)?;
        sensitivity_analysis(&model, &dataset.test, &synth.pairs, &mut report, &[OrderCorruption::Reverse])?;
        println!("{}", report.render(variant.name()));
        println!("best epoch {} | {:.1}s\n", history.best_epoch, start.elapsed().as_secs_f64());
    }
    Ok(())
}
