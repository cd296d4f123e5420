use std::path::{Path, PathBuf};

use anyhow::Context;
use catunet::data::load_dataset;
use catunet::evaluation::training_inputs;
use catunet::{checkpoint, training, CatUNetModel};

use super::write_file;
use crate::config::RunConfig;
use crate::{usage, TrainArgs};

/// `dir/stem.<suffix>` beside the checkpoint.
pub fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out
        .file_stem()
        .map_or_else(|| "model".into(), |s| s.to_string_lossy());
    out.with_file_name(format!("{stem}.{suffix}"))
}

fn resolve(args: &TrainArgs) -> anyhow::Result<RunConfig> {
    let mut c = RunConfig::load(args.config.as_deref())?;
    let t = &mut c.training;
    if let Some(v) = args.epochs {
        t.epochs = v;
    }
    if let Some(v) = args.batch {
        t.batch_size = v;
    }
    if let Some(v) = args.lr {
        t.learning_rate = v;
    }
    if let Some(v) = args.seed {
        t.seed = v;
    }
    if let Some(v) = args.size {
        c.model.input_size = v;
    }
    if let Some(v) = args.depth {
        c.model.depth = v;
    }
    c.model.validate().map_err(usage)?;
    c.training.validate().map_err(usage)?;
    c.threshold.validate().map_err(usage)?;
    if c.model.output_channels != c.model.input_channels {
        return Err(usage(format!(
            "output_channels {} must equal input_channels {} to reconstruct the input",
            c.model.output_channels, c.model.input_channels
        )));
    }
    Ok(c)
}

pub fn run(args: &TrainArgs) -> anyhow::Result<()> {
    let config = resolve(args)?;
    let config_path = sibling(&args.out, "config.toml");
    write_file(&config_path, config.to_toml())?;

    let dataset = load_dataset(&args.data).context("loading dataset")?;
    if !dataset.negatives.is_empty() {
        log::info!("ignoring {} negative images", dataset.negatives.len());
    }
    let inputs = training_inputs(&config.model, &dataset.positives)?;
    let model = CatUNetModel::build(config.model.clone(), config.training.seed)?;
    log::info!(
        "training {} parameters on {} images",
        model.param_count(),
        inputs.len()
    );

    let (best, report) = if config.training.epochs == 0 {
        (model, training::TrainReport::default())
    } else {
        training::train(model, &inputs, &config.training, Some(&args.out))?
    };
    checkpoint::save(&best, &args.out)?;
    let report_path = sibling(&args.out, "report.csv");
    write_file(&report_path, report.to_csv())?;

    match (report.best_epoch, report.epochs.last()) {
        (Some(best), Some(last)) => println!(
            "trained {} epochs; best epoch {best}; final train loss {:.6}; checkpoint {}",
            last.epoch,
            last.train_loss,
            args.out.display()
        ),
        _ => println!("saved untrained model to {}", args.out.display()),
    }
    println!(
        "report {}; config {}",
        report_path.display(),
        config_path.display()
    );
    Ok(())
}
