use std::path::Path;

use avalign::gradsuite::{run_suite, OpReport};

use crate::error::{CliError, Result};
use crate::rundir::write_json;

/// Runs every op's finite-difference check; fails naming the ops that miss
/// tolerance.
pub fn run(seed: u64, corrupt: Option<&str>, out: Option<&Path>) -> Result<Vec<OpReport>> {
    let reports = run_suite(seed, corrupt)?;
    for r in &reports {
        println!(
            "{:<20} max_rel_err {:.3e}  {}",
            r.op,
            r.report.max_rel_err,
            if r.report.passed { "ok" } else { "FAIL" }
        );
    }
    if let Some(path) = out {
        write_json(path, &reports)?;
    }
    let failed: Vec<String> = reports.iter().filter(|r| !r.report.passed).map(|r| r.op.clone()).collect();
    if failed.is_empty() {
        Ok(reports)
    } else {
        Err(CliError::GradcheckFailed(failed))
    }
}
