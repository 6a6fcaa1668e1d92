//! FLOP and attention-memory tables for dense and criss-cross attention.

use ccnet::cost::{flops_cc2d, flops_cc3d, flops_nonlocal, render_report, ReportFormat, WorkloadSpec};

fn main() -> ccnet::Result<()> {
    let mut reports = vec![flops_nonlocal(&WorkloadSpec::reference(1))?];
    for loops in 1..=3 {
        reports.push(flops_cc2d(&WorkloadSpec::reference(loops))?);
    }
    print!("{}", render_report(&reports, ReportFormat::Markdown)?);

    let clip = WorkloadSpec {
        t: 8,
        h: 32,
        w: 32,
        ..WorkloadSpec::reference(3)
    };
    let video = [flops_nonlocal(&clip.with_loops(1))?, flops_cc3d(&clip)?];
    println!();
    print!("{}", render_report(&video, ReportFormat::Csv)?);
    Ok(())
}
