use anyhow::Context;
use catunet::checkpoint;
use catunet::data::{load_image, save_image};
use catunet::diagnosis::{diagnose, json_line};
use catunet::evaluation::prepare;

use super::ensure_parent;
use crate::config::RunConfig;
use crate::{usage, DiagnoseArgs};

pub fn run(args: &DiagnoseArgs) -> anyhow::Result<()> {
    let config = RunConfig::load(args.thresholds.config.as_deref())?
        .with_thresholds(&args.thresholds)
        .threshold;
    config.validate().map_err(usage)?;
    let model = checkpoint::load(&args.model).context("loading model")?;
    let sample = load_image(&args.image)?;
    let prepared = prepare(model.config(), &sample)?;
    let result = diagnose(&model, &prepared, &config, args.mask_out.is_some())?;
    let mask_path = match (&args.mask_out, &result.mask) {
        (Some(path), Some(mask)) => {
            ensure_parent(path)?;
            save_image(path, mask)?;
            Some(path.display().to_string())
        }
        _ => None,
    };
    println!("{}", json_line(&Ok(result), mask_path.as_deref()));
    Ok(())
}
