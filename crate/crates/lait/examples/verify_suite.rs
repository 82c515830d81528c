//! Runs the full invariant suite and prints one line per check.

use lait::verify::{run_suite, SuiteSize};

fn main() -> lait::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(7);
    let report = run_suite(seed, SuiteSize::default())?;
    for c in &report.checks {
        println!(
            "{} {:<22} {:>5} cases  {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.cases,
            c.detail
        );
    }
    std::process::exit(if report.passed() { 0 } else { 1 });
}
