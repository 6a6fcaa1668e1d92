mod common;

use ccnet::cost::{
    flops_cc2d, flops_cc3d, flops_nonlocal, render_report, MemoryMode, ReportFormat, WorkloadSpec, REPORT_COLUMNS,
};
use ccnet::oracles::cca_naive_counted;
use common::{params, randn};

fn spec(h: usize, w: usize, c: usize, cr: usize, loops: usize) -> WorkloadSpec {
    WorkloadSpec {
        h,
        w,
        t: 1,
        c,
        c_reduced: cr,
        loops,
        bytes_per_scalar: 8,
        memory: MemoryMode::Inference,
    }
}

#[test]
fn model_matches_instrumented_reference() {
    for (h, w, c, cr) in [(1, 1, 2, 1), (2, 3, 4, 2), (4, 5, 6, 3), (6, 2, 3, 1)] {
        let (_, counts) = cca_naive_counted(&randn(&[c, h, w], 1), &params(c, cr, 2)).unwrap();
        let stages = flops_cc2d(&spec(h, w, c, cr, 1)).unwrap().per_loop;
        assert_eq!(stages.projections, 2 * counts.projection_macs, "{h}x{w}");
        assert_eq!(stages.affinity, 2 * counts.affinity_macs, "{h}x{w}");
        assert_eq!(stages.softmax, counts.softmax_ops, "{h}x{w}");
        assert_eq!(
            stages.aggregation,
            2 * counts.aggregation_macs + counts.residual_adds,
            "{h}x{w}"
        );
    }
}

#[test]
fn flops_strictly_increase_in_every_extent() {
    let base = spec(6, 7, 8, 4, 2);
    let f = |s: WorkloadSpec| flops_cc2d(&s).unwrap().flops_total;
    let b = f(base);
    assert!(f(WorkloadSpec { h: 7, ..base }) > b);
    assert!(f(WorkloadSpec { w: 8, ..base }) > b);
    assert!(f(WorkloadSpec { c: 9, ..base }) > b);
    assert!(f(WorkloadSpec { c_reduced: 5, ..base }) > b);
    assert!(f(WorkloadSpec { loops: 3, ..base }) > b);
}

#[test]
fn dense_to_sparse_affinity_ratio_grows_linearly() {
    let ratio = |s: usize| {
        let sp = spec(s, s, 16, 4, 1);
        flops_nonlocal(&sp).unwrap().per_loop.affinity as f64 / flops_cc2d(&sp).unwrap().per_loop.affinity as f64
    };
    let sizes = [8, 16, 32, 64];
    for pair in sizes.windows(2) {
        let growth = ratio(pair[1]) / ratio(pair[0]);
        assert!((growth - 2.0).abs() <= 0.2, "{pair:?}: {growth}");
    }
}

#[test]
fn reduction_claims_at_reference_workload() {
    let nl = flops_nonlocal(&WorkloadSpec::reference(1)).unwrap();
    let r2 = flops_cc2d(&WorkloadSpec::reference(2)).unwrap();
    assert!(r2.flops_total as f64 / nl.flops_total as f64 <= 0.16);
    assert!((r2.ratio_vs_nonlocal - r2.flops_total as f64 / nl.flops_total as f64).abs() < 1e-15);
    let bytes = nl.attention_bytes as f64 / r2.attention_bytes as f64;
    assert!((bytes - 9409.0 / 386.0).abs() < 1e-9);
    assert!(bytes >= 11.0);
}

#[test]
fn volume_affinity_grows_slower_than_quadratically() {
    let vol = |t: usize| WorkloadSpec {
        t,
        ..spec(8, 8, 16, 4, 1)
    };
    let mut prev = flops_cc3d(&vol(1)).unwrap().per_loop.affinity as f64;
    for t in [2, 4, 8, 16] {
        let now = flops_cc3d(&vol(t)).unwrap().per_loop.affinity as f64;
        // N doubles, so a dense model would quadruple
        assert!(now / prev < 4.0, "t={t}");
        prev = now;
    }
}

#[test]
fn csv_report_round_trips_through_a_reader() {
    let reports = vec![
        flops_nonlocal(&WorkloadSpec::reference(1)).unwrap(),
        flops_cc2d(&WorkloadSpec::reference(2)).unwrap(),
    ];
    let text = render_report(&reports, ReportFormat::Csv).unwrap();
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = rd.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header, REPORT_COLUMNS);
    let rows: Vec<csv::StringRecord> = rd.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 2);
    let g: f64 = rows[1][7].parse().unwrap();
    assert!((g - reports[1].gflops()).abs() < 1e-12);
}
