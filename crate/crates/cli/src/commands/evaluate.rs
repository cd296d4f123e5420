use std::fmt::Write as _;

use anyhow::Context;
use catunet::data::{load_dataset, load_images, save_image};
use catunet::evaluation::{calibrate, evaluate};
use catunet::{checkpoint, diagnosis, MetricsReport};

use super::{ensure_parent, write_file};
use crate::config::RunConfig;
use crate::{usage, EvaluateArgs};

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |v| format!("{v:.4}"))
}

fn summary(r: &MetricsReport) -> String {
    let mut s = String::new();
    let rows = [
        ("samples", r.samples.to_string()),
        ("failed", r.failed.to_string()),
        ("threshold", format!("{:.4}", r.threshold)),
        (
            "reconstruction_accuracy",
            format!("{:.6}", r.reconstruction_accuracy),
        ),
        ("accuracy", fmt_opt(r.accuracy)),
        ("sensitivity", fmt_opt(r.sensitivity)),
        ("specificity", fmt_opt(r.specificity)),
        ("dice", fmt_opt(r.dice)),
        ("masks_scored", r.masks_scored.to_string()),
    ];
    for (k, v) in rows {
        let _ = writeln!(s, "{k:<24} {v:>10}");
    }
    if let Some(m) = r.confusion() {
        let _ = writeln!(s, "\n{:<10} {:>8} {:>8}", "actual", "pred +", "pred -");
        let _ = writeln!(s, "{:<10} {:>8} {:>8}", "positive", m.tp, m.fn_);
        let _ = writeln!(s, "{:<10} {:>8} {:>8}", "negative", m.fp, m.tn);
    }
    s
}

pub fn run(args: &EvaluateArgs) -> anyhow::Result<()> {
    if args.jobs == 0 {
        return Err(usage("--jobs must be at least 1"));
    }
    let mut config = RunConfig::load(args.thresholds.config.as_deref())?
        .with_thresholds(&args.thresholds)
        .threshold;
    config.validate().map_err(usage)?;

    let model = checkpoint::load(&args.model).context("loading model")?;
    if let Some(dir) = &args.calibrate {
        let cal = load_dataset(dir).context("loading calibration set")?;
        config.sample_threshold = calibrate(&model, &cal, &config, args.jobs)?;
    }
    let labelled = ["positive", "negative"]
        .iter()
        .any(|d| args.data.join(d).is_dir());
    let samples = if labelled {
        let dataset = load_dataset(&args.data).context("loading dataset")?;
        dataset.all().cloned().collect()
    } else {
        log::info!(
            "{} has no class directories; scoring unlabelled",
            args.data.display()
        );
        load_images(&args.data).context("loading images")?
    };
    let eval = evaluate(&model, &samples, &config, args.masks, args.jobs)?;

    let mut lines = String::new();
    for outcome in &eval.outcomes {
        let mask_path = match outcome {
            Ok(r) => match &r.mask {
                Some(m) => {
                    let rel = format!("masks/{}.pgm", r.id);
                    let path = args.out.join(&rel);
                    ensure_parent(&path)?;
                    save_image(&path, m)?;
                    Some(rel)
                }
                None => None,
            },
            Err(f) => {
                log::warn!("{}: {}", f.id, f.message);
                None
            }
        };
        lines.push_str(&diagnosis::json_line(outcome, mask_path.as_deref()));
        lines.push('\n');
    }
    write_file(&args.out.join("diagnoses.jsonl"), lines)?;
    let report_path = args
        .report
        .clone()
        .unwrap_or_else(|| args.out.join("metrics.json"));
    write_file(&report_path, eval.report.to_json() + "\n")?;
    if let Some(m) = eval.report.confusion() {
        write_file(&args.out.join("confusion.csv"), m.to_csv())?;
    }
    print!("{}", summary(&eval.report));
    Ok(())
}
