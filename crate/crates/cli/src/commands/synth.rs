use anyhow::Context;
use catunet::data::synthesize;
use catunet::SynthConfig;

use crate::{usage, SynthArgs};

/// Image side the default lesion radii are chosen for.
const REFERENCE_SIZE: f64 = 64.0;

pub fn run(args: &SynthArgs) -> anyhow::Result<()> {
    let defaults = SynthConfig::default();
    let k = args.size as f64 / REFERENCE_SIZE;
    let (r0, r1) = defaults.lesion_radius_range;
    let config = SynthConfig {
        image_size: args.size,
        lesion_radius_range: ((r0 * k).max(1.0), (r1 * k).max(1.0)),
        n_positive: args.n_pos,
        n_negative: args.n_neg,
        seed: args.seed,
        ..defaults
    };
    config.validate().map_err(usage)?;
    let manifest = synthesize(&config, &args.out)
        .with_context(|| format!("writing dataset to {}", args.out.display()))?;
    let masks = manifest
        .files
        .iter()
        .filter(|f| f.mask_path.is_some())
        .count();
    println!(
        "wrote {} images ({} positive, {} negative) and {masks} masks to {}",
        manifest.files.len(),
        args.n_pos,
        args.n_neg,
        args.out.display()
    );
    Ok(())
}
