use anyhow::bail;
use catunet::verify::gradient_suite;

use crate::GradcheckArgs;

pub fn run(args: &GradcheckArgs) -> anyhow::Result<()> {
    let outcomes = gradient_suite(args.seed, args.corrupt.as_deref())?;
    println!(
        "{:<30} {:>12} {:>9} {:>7} {:>7}  result",
        "check", "max_rel_err", "tolerance", "probes", "skipped"
    );
    for o in &outcomes {
        println!(
            "{:<30} {:>12.3e} {:>9.0e} {:>7} {:>7}  {}",
            o.name,
            o.report.max_rel_error,
            o.tolerance,
            o.report.probes,
            o.report.skipped,
            if o.passed() { "PASS" } else { "FAIL" }
        );
    }
    let failed: Vec<&str> = outcomes
        .iter()
        .filter(|o| !o.passed())
        .map(|o| o.name.as_str())
        .collect();
    if !failed.is_empty() {
        bail!("gradient check failed: {}", failed.join(", "));
    }
    Ok(())
}
