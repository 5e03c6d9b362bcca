use anyhow::Result;
use tti_core::gradcheck::{run_gradcheck, GradcheckOptions, GRADCHECK_TOLERANCE};

use crate::{EXIT_NUMERIC, EXIT_OK};

pub fn run(opts: &GradcheckOptions) -> Result<u8> {
    let report = run_gradcheck(opts)?;
    println!("{:<10} {:>12} {:>9}", "loss", "max rel err", "compared");
    for r in &report.rows {
        println!("{:<10} {:>12.3e} {:>9}", r.loss, r.max_rel_error, r.compared);
    }
    println!("{:<10} {:>12.3e}", "dcl-loop", report.contrastive_error);
    if report.passed() {
        println!("all gradients within {GRADCHECK_TOLERANCE:e}");
        return Ok(EXIT_OK);
    }
    for r in report.failures() {
        match r.worst {
            Some((inst, coord)) => eprintln!(
                "gradient mismatch in {}: instance {inst}, coordinate {coord}, relative error {:.3e}",
                r.loss, r.max_rel_error
            ),
            None => eprintln!("gradient mismatch in {}", r.loss),
        }
    }
    if !(report.contrastive_error < GRADCHECK_TOLERANCE) {
        eprintln!("contrastive loss differs from its loop evaluation by {:.3e}", report.contrastive_error);
    }
    Ok(EXIT_NUMERIC)
}
