//! Analytic gradients of every suite against central differences.

use ccnet::verify::{grad_checks, grad_summary, GradGeometry};

fn main() -> ccnet::Result<()> {
    let reports = grad_checks(2, 0, GradGeometry::default())?;
    for r in &reports {
        println!(
            "{:<20} seed {} {:>4} coords  max rel err {:.2e}  worst {}",
            r.suite.label(),
            r.seed,
            r.coordinates,
            r.max_relative_error,
            r.worst
        );
    }
    println!("{}", grad_summary(&reports, 1e-5));
    Ok(())
}
