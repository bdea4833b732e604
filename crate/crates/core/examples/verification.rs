//! Runs the bundled property checks and exits non-zero on any failure.

use evisteer::harness::run_verification;

fn main() -> evisteer::Result<()> {
    let checks = run_verification()?;
    for c in &checks {
        println!("{c}");
    }
    if checks.iter().any(|c| !c.passed) {
        std::process::exit(1);
    }
    Ok(())
}
