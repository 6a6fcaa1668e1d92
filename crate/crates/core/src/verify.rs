//! Reusable verification suites behind `ccnet selftest`, `ccnet gradcheck`
//! and `ccnet reach`.
//!
//! Every suite compares the production code paths against the independent
//! oracles in [`crate::oracles`] and reports a [`Check`].

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{backward_recurrent, forward_recurrent, CCAttentionParams, CrissCrossLayout, NeighborTable};
use crate::cca2d::{rcca_forward, Grid2D};
use crate::cca3d::{cca3d_forward, Grid3D};
use crate::cost::{flops_cc2d, flops_nonlocal, WorkloadSpec};
use crate::error::{Error, Result};
use crate::losses::{ccl_loss_with_grad, cross_entropy_seg, phi_dis, phi_var, CCLConfig, LabelMap, IGNORE_LABEL};
use crate::oracles::{
    cca3d_naive, cca_naive, gradient_fd4, hop_mask, influence_scan, max_relative_error, InfluencePattern, FD4_STEP,
    INFLUENCE_THRESHOLD,
};
use crate::tensor::{ProjectionWeights, Tensor};

/// Outcome of one named property.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub property: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(property: &'static str, passed: bool, detail: String) -> Self {
        Self {
            property,
            passed,
            detail,
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{status} {}: {}", self.property, self.detail)
    }
}

/// Deliberate defects for exercising the failure paths of the suites.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fault {
    #[default]
    None,
    /// The first member of every criss-cross set is replaced by the second.
    IndexMap,
}

struct Corrupted<'a>(&'a dyn CrissCrossLayout);

impl CrissCrossLayout for Corrupted<'_> {
    fn spatial_shape(&self) -> Vec<usize> {
        self.0.spatial_shape()
    }

    fn set_size(&self) -> usize {
        self.0.set_size()
    }

    fn member(&self, u: usize, i: usize) -> usize {
        let l = self.0.set_size();
        let i = if i == 0 && l > 1 { 1 } else { i };
        self.0.member(u, i)
    }
}

fn table_for(layout: &dyn CrissCrossLayout, fault: Fault) -> Arc<NeighborTable> {
    Arc::new(match fault {
        Fault::None => NeighborTable::build(layout),
        Fault::IndexMap => NeighborTable::build(&Corrupted(layout)),
    })
}

fn random_params(rng: &mut ChaCha8Rng) -> Result<CCAttentionParams> {
    let c = rng.random_range(2..=5);
    let cr = rng.random_range(1..c);
    CCAttentionParams::random(c, cr, rng)
}

/// Production forward pass against the scalar-loop reference on `instances`
/// random 2D grids (≤ 6×6) and 3D volumes (≤ 3×4×4), alternating.
pub fn oracle_equivalence(instances: usize, seed: u64, fault: Fault) -> Result<Check> {
    const TOL: f64 = 1e-9;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut worst_shape = Vec::new();
    for n in 0..instances {
        let p = random_params(&mut rng)?;
        let c = p.channels();
        let (x, out, reference) = if n % 2 == 0 {
            let (h, w) = (rng.random_range(1..=6), rng.random_range(1..=6));
            let x = Tensor::randn(&[c, h, w], 1.0, &mut rng)?;
            let grid = Grid2D::new(h, w)?;
            let (out, _) = forward_recurrent(&x, &p, 1, &table_for(&grid, fault))?;
            let reference = cca_naive(&x, &p)?;
            (x, out, reference)
        } else {
            let (t, h, w) = (
                rng.random_range(1..=3),
                rng.random_range(1..=4),
                rng.random_range(1..=4),
            );
            let x = Tensor::randn(&[c, t, h, w], 1.0, &mut rng)?;
            let grid = Grid3D::new(t, h, w)?;
            let (out, _) = forward_recurrent(&x, &p, 1, &table_for(&grid, fault))?;
            let reference = cca3d_naive(&x, &p)?;
            (x, out, reference)
        };
        let err = out.max_rel_diff(&reference)?;
        if err.is_nan() || err > worst {
            worst = err;
            worst_shape = x.shape().to_vec();
        }
    }
    Ok(Check::new(
        "oracle-equivalence",
        worst <= TOL,
        format!("{instances} instances, max relative deviation {worst:.3e} (shape {worst_shape:?}), limit {TOL:.0e}"),
    ))
}

/// Attention weights sum to one per position, including for inputs large
/// enough to overflow an unstabilised softmax.
pub fn normalization(instances: usize, seed: u64) -> Result<Check> {
    const TOL: f64 = 1e-12;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut finite = true;
    for n in 0..instances {
        let p = random_params(&mut rng)?;
        let (h, w) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let scale = if n % 2 == 0 { 1.0 } else { 60.0 };
        let x = Tensor::randn(&[p.channels(), h, w], scale, &mut rng)?;
        let (out, cache) = rcca_forward(&x, &p, 2)?;
        finite &= out.is_finite();
        for lc in &cache.loops {
            let e = lc.attention.normalization_error();
            worst = if e.is_nan() { f64::NAN } else { worst.max(e) };
        }
    }
    Ok(Check::new(
        "normalization",
        finite && worst <= TOL,
        format!("{instances} instances, max |sum - 1| {worst:.3e}, outputs finite: {finite}"),
    ))
}

/// 3D attention over a single frame equals 2D attention.
pub fn degeneration(instances: usize, seed: u64) -> Result<Check> {
    const TOL: f64 = 1e-12;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let p = random_params(&mut rng)?;
        let (h, w) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let x2 = Tensor::randn(&[p.channels(), h, w], 1.0, &mut rng)?;
        let x3 = x2.clone().reshape(vec![p.channels(), 1, h, w])?;
        let (y2, _) = rcca_forward(&x2, &p, 1)?;
        let (y3, _) = cca3d_forward(&x3, &p)?;
        let err = y3.reshape(y2.shape().to_vec())?.max_rel_diff(&y2)?;
        if err.is_nan() || err > worst {
            worst = err;
        }
    }
    Ok(Check::new(
        "degeneration",
        worst <= TOL,
        format!("{instances} instances with T=1, max relative deviation {worst:.3e}, limit {TOL:.0e}"),
    ))
}

/// Worked values of the distance functions are exact and `phi_var` is
/// continuous across both margins.
pub fn phi_fidelity() -> Result<Check> {
    let cfg = CCLConfig::default();
    let worked = [
        (phi_var(1.0, &cfg)?, 0.25),
        (phi_var(2.0, &cfg)?, 1.5),
        (phi_dis(0.0, &cfg)?, 9.0),
    ];
    let exact = worked.iter().all(|(got, want)| got == want);
    let mut jump = 0.0f64;
    for m in [cfg.delta_v, cfg.delta_d] {
        let at = phi_var(m, &cfg)?;
        for side in [m.next_down(), m.next_up()] {
            jump = jump.max((phi_var(side, &cfg)? - at).abs());
        }
    }
    let continuous = jump <= 4.0 * f64::EPSILON;
    Ok(Check::new(
        "phi-fidelity",
        exact && continuous,
        format!(
            "phi_var(1)={}, phi_var(2)={}, phi_dis(0)={}, largest jump at a margin {jump:.3e}",
            worked[0].0, worked[1].0, worked[2].0
        ),
    ))
}

/// Which analytic reverse pass a gradient case exercises.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradSuite {
    /// Recurrent 2D attention; one loop is the plain block.
    Attention2D {
        loops: usize,
    },
    Attention3D {
        loops: usize,
    },
    CategoryConsistent,
    CrossEntropy,
}

impl GradSuite {
    /// The suites run by `gradcheck` and `selftest`.
    pub const ALL: [GradSuite; 7] = [
        GradSuite::Attention2D { loops: 1 },
        GradSuite::Attention2D { loops: 2 },
        GradSuite::Attention2D { loops: 3 },
        GradSuite::Attention3D { loops: 1 },
        GradSuite::Attention3D { loops: 2 },
        GradSuite::CategoryConsistent,
        GradSuite::CrossEntropy,
    ];

    pub fn label(self) -> String {
        match self {
            Self::Attention2D { loops: 1 } => "cca2d".into(),
            Self::Attention2D { loops } => format!("rcca[R={loops}]"),
            Self::Attention3D { loops: 1 } => "cca3d".into(),
            Self::Attention3D { loops } => format!("rcca3d[R={loops}]"),
            Self::CategoryConsistent => "ccl_loss".into(),
            Self::CrossEntropy => "cross_entropy_seg".into(),
        }
    }
}

/// Geometry of the gradient cases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradGeometry {
    pub dims: (usize, usize),
    pub volume: (usize, usize, usize),
    pub channels: usize,
    pub reduced_channels: usize,
}

impl Default for GradGeometry {
    fn default() -> Self {
        Self {
            dims: (3, 4),
            volume: (2, 3, 3),
            channels: 4,
            reduced_channels: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub suite: GradSuite,
    pub seed: u64,
    pub coordinates: usize,
    pub max_relative_error: f64,
    /// Name of the coordinate with the largest error.
    pub worst: String,
    pub analytic: f64,
    pub numeric: f64,
}

fn suite_rng(suite: GradSuite, seed: u64) -> ChaCha8Rng {
    let salt = match suite {
        GradSuite::Attention2D { loops } => 0x100 + loops as u64,
        GradSuite::Attention3D { loops } => 0x200 + loops as u64,
        GradSuite::CategoryConsistent => 0x300,
        GradSuite::CrossEntropy => 0x400,
    };
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x1000).wrapping_add(salt))
}

/// Analytic gradient against central finite differences for one suite and seed.
///
/// Attention cases differentiate `sum(G ⊙ f(x; Wq, Wk, Wv))` for a random
/// `G` with respect to the input and all three weight matrices.
pub fn grad_check(suite: GradSuite, seed: u64, geometry: GradGeometry) -> Result<GradReport> {
    let mut rng = suite_rng(suite, seed);
    let (names, analytic, numeric) = match suite {
        GradSuite::Attention2D { loops } | GradSuite::Attention3D { loops } => {
            let c = geometry.channels;
            let mut shape = vec![c];
            let table = if matches!(suite, GradSuite::Attention2D { .. }) {
                let (h, w) = geometry.dims;
                shape.extend([h, w]);
                Grid2D::new(h, w)?.table()
            } else {
                let (t, h, w) = geometry.volume;
                shape.extend([t, h, w]);
                Grid3D::new(t, h, w)?.table()
            };
            let p = CCAttentionParams::random(c, geometry.reduced_channels, &mut rng)?;
            let x = Tensor::randn(&shape, 1.0, &mut rng)?;
            let g = Tensor::randn(&shape, 1.0, &mut rng)?;
            let (_, cache) = forward_recurrent(&x, &p, loops, &table)?;
            let (dx, dp) = backward_recurrent(&cache, &g)?;
            let mut analytic = dx.data().to_vec();
            analytic.extend(dp.flat());
            let mut flat = x.data().to_vec();
            flat.extend(p.flat());
            let xl = x.len();
            let sizes: Vec<(usize, usize)> = p.parts().iter().map(|w| (w.out_channels(), w.in_channels())).collect();
            let objective = |v: &[f64]| -> f64 {
                let xv = Tensor::new(shape.clone(), v[..xl].to_vec()).expect("same shape");
                let mut at = xl;
                let mut ws = Vec::with_capacity(3);
                for &(o, i) in &sizes {
                    ws.push(ProjectionWeights::new(o, i, v[at..at + o * i].to_vec()).expect("same shape"));
                    at += o * i;
                }
                let wv = ws.pop().expect("three parts");
                let wk = ws.pop().expect("three parts");
                let wq = ws.pop().expect("three parts");
                let pv = CCAttentionParams::new(wq, wk, wv).expect("same shapes");
                let (y, _) = forward_recurrent(&xv, &pv, loops, &table).expect("valid forward");
                y.dot(&g).expect("same shape")
            };
            let numeric = gradient_fd4(objective, &flat, FD4_STEP);
            let mut names = Vec::with_capacity(flat.len());
            names.extend((0..xl).map(|i| format!("input[{i}]")));
            for (label, &(o, i)) in ["wq", "wk", "wv"].iter().zip(&sizes) {
                names.extend((0..o * i).map(|j| format!("{label}[{},{}]", j / i, j % i)));
            }
            (names, analytic, numeric)
        }
        GradSuite::CategoryConsistent => {
            let (h, w) = geometry.dims;
            let ch = geometry.channels;
            let cfg = CCLConfig {
                reduced_channels: ch,
                ..CCLConfig::default()
            };
            let x = Tensor::randn(&[ch, h, w], 1.5, &mut rng)?;
            let labels = random_labels(h, w, 3, &mut rng)?;
            let (_, dx) = ccl_loss_with_grad(&x, &labels, &cfg)?;
            let objective = |v: &[f64]| {
                let xv = Tensor::new(vec![ch, h, w], v.to_vec()).expect("same shape");
                ccl_loss_with_grad(&xv, &labels, &cfg).expect("valid loss").0.total
            };
            // small step: the piecewise distance functions have kinks at the margins
            let numeric = gradient_fd4(objective, x.data(), KINKED_STEP);
            let names = (0..x.len()).map(|i| format!("features[{i}]")).collect();
            (names, dx.into_data(), numeric)
        }
        GradSuite::CrossEntropy => {
            let (h, w) = geometry.dims;
            let k = 3;
            let x = Tensor::randn(&[k, h, w], 2.0, &mut rng)?;
            let labels = random_labels(h, w, k as u8, &mut rng)?;
            let (_, dx) = cross_entropy_seg(&x, &labels)?;
            let objective = |v: &[f64]| {
                let xv = Tensor::new(vec![k, h, w], v.to_vec()).expect("same shape");
                cross_entropy_seg(&xv, &labels).expect("valid loss").0
            };
            let numeric = gradient_fd4(objective, x.data(), FD4_STEP);
            let names = (0..x.len()).map(|i| format!("logits[{i}]")).collect();
            (names, dx.into_data(), numeric)
        }
    };
    let (max_relative_error, at) = max_relative_error(&analytic, &numeric);
    let bad = analytic.iter().chain(&numeric).position(|v| !v.is_finite());
    let (max_relative_error, at) = match bad {
        Some(i) => (f64::NAN, i % analytic.len()),
        None => (max_relative_error, at),
    };
    Ok(GradReport {
        suite,
        seed,
        coordinates: analytic.len(),
        max_relative_error,
        worst: names[at].clone(),
        analytic: analytic[at],
        numeric: numeric[at],
    })
}

const KINKED_STEP: f64 = 1e-5;

/// Labels in `0..k` with roughly one position in eight ignored; the first
/// two positions always carry classes 0 and 1.
fn random_labels(h: usize, w: usize, k: u8, rng: &mut ChaCha8Rng) -> Result<LabelMap> {
    let mut ids: Vec<u8> = (0..h * w)
        .map(|_| {
            if rng.random_range(0..8) == 0 {
                IGNORE_LABEL
            } else {
                rng.random_range(0..k)
            }
        })
        .collect();
    for (i, id) in ids.iter_mut().take(2).enumerate() {
        *id = i as u8;
    }
    LabelMap::new(h, w, ids)
}

/// Every suite in [`GradSuite::ALL`] for seeds `0..seeds`.
pub fn grad_checks(seeds: u64, first_seed: u64, geometry: GradGeometry) -> Result<Vec<GradReport>> {
    let mut out = Vec::new();
    for suite in GradSuite::ALL {
        for s in 0..seeds {
            out.push(grad_check(suite, first_seed.wrapping_add(s), geometry)?);
        }
    }
    Ok(out)
}

/// Passes when every report is finite and strictly below `tol`.
pub fn grad_summary(reports: &[GradReport], tol: f64) -> Check {
    let worst = reports
        .iter()
        .max_by(|a, b| a.max_relative_error.total_cmp(&b.max_relative_error));
    let passed = reports.iter().all(|r| r.max_relative_error < tol);
    let detail = match worst {
        Some(r) => format!(
            "{} cases, worst {:.3e} in {} seed {} at {} (analytic {:.9e}, numeric {:.9e}), limit {tol:.0e}",
            reports.len(),
            r.max_relative_error,
            r.suite.label(),
            r.seed,
            r.worst,
            r.analytic,
            r.numeric
        ),
        None => "no cases".into(),
    };
    Check::new("gradient", passed && !reports.is_empty(), detail)
}

/// Finite-difference influence pattern of recurrent 2D attention with
/// random parameters (4 channels, 2 reduced) and random input.
pub fn influence_2d(h: usize, w: usize, loops: usize, seed: u64) -> Result<InfluencePattern> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = CCAttentionParams::random(4, 2, &mut rng)?;
    let x = Tensor::randn(&[4, h, w], 1.0, &mut rng)?;
    rcca_forward(&x, &p, loops)?;
    Ok(influence_scan(
        |t| rcca_forward(t, &p, loops).expect("validated above").0,
        &x,
        INFLUENCE_THRESHOLD,
    ))
}

/// The measured influence pattern equals the positions reachable in
/// `loops` criss-cross hops: the cross itself for one loop, everything from
/// two loops on.
pub fn propagation(h: usize, w: usize, loops: usize, seeds: &[u64]) -> Result<Check> {
    if loops == 0 {
        return Err(Error::Config("loops must be at least 1".into()));
    }
    let expected = hop_mask(&[h, w], loops);
    let mut densities = Vec::with_capacity(seeds.len());
    let mut passed = true;
    for &seed in seeds {
        let pattern = influence_2d(h, w, loops, seed)?;
        passed &= pattern == expected;
        densities.push(pattern.density());
    }
    Ok(Check::new(
        "propagation",
        passed && !seeds.is_empty(),
        format!(
            "{h}x{w} grid, R={loops}, {} seeds, densities {densities:?}, expected {}",
            seeds.len(),
            expected.density()
        ),
    ))
}

/// Published GFLOPs figures: R = 1, 2, 3 and the dense baseline.
pub const PUBLISHED_GFLOPS: [(&str, f64); 4] = [("R=1", 8.3), ("R=2", 16.5), ("R=3", 24.7), ("non-local", 108.0)];

/// Modelled GFLOPs against the published figures at `spec` geometry, within
/// 5% each.
pub fn flop_reproduction(spec: &WorkloadSpec) -> Result<Vec<Check>> {
    let modelled = [
        flops_cc2d(&spec.with_loops(1))?.gflops(),
        flops_cc2d(&spec.with_loops(2))?.gflops(),
        flops_cc2d(&spec.with_loops(3))?.gflops(),
        flops_nonlocal(&spec.with_loops(1))?.gflops(),
    ];
    Ok(PUBLISHED_GFLOPS
        .iter()
        .zip(modelled)
        .map(|(&(label, want), got)| {
            let dev = (got - want).abs() / want;
            Check::new(
                "flop-reproduction",
                dev <= 0.05,
                format!(
                    "{label}: modelled {got:.4} vs published {want} GFLOPs ({:.2}% off)",
                    dev * 100.0
                ),
            )
        })
        .collect())
}

/// Sizes used by [`selftest`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SelftestConfig {
    pub oracle_instances: usize,
    pub normalization_instances: usize,
    pub degeneration_instances: usize,
    pub grad_seeds: u64,
    pub propagation_seeds: u64,
    pub seed: u64,
}

impl Default for SelftestConfig {
    fn default() -> Self {
        Self {
            oracle_instances: 60,
            normalization_instances: 20,
            degeneration_instances: 20,
            grad_seeds: 3,
            propagation_seeds: 3,
            seed: 0,
        }
    }
}

/// Oracle equivalence, normalisation, gradients, propagation, degeneration
/// and distance-function fidelity, in that order.
pub fn selftest(cfg: &SelftestConfig, fault: Fault) -> Result<Vec<Check>> {
    let s = cfg.seed;
    let grads = grad_checks(cfg.grad_seeds, s, GradGeometry::default())?;
    let seeds: Vec<u64> = (0..cfg.propagation_seeds).map(|i| s.wrapping_add(i)).collect();
    Ok(vec![
        oracle_equivalence(cfg.oracle_instances, s, fault)?,
        normalization(cfg.normalization_instances, s)?,
        grad_summary(&grads, 1e-5),
        propagation(4, 5, 1, &seeds)?,
        propagation(4, 5, 2, &seeds)?,
        degeneration(cfg.degeneration_instances, s)?,
        phi_fidelity()?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_oracle_equivalence_passes_and_fault_fails() {
        assert!(oracle_equivalence(12, 3, Fault::None).unwrap().passed);
        let c = oracle_equivalence(12, 3, Fault::IndexMap).unwrap();
        assert!(!c.passed);
        assert_eq!(c.property, "oracle-equivalence");
    }

    #[test]
    fn phi_fidelity_passes() {
        assert!(phi_fidelity().unwrap().passed);
    }

    #[test]
    fn grad_cases_pass_at_default_geometry() {
        let reports = grad_checks(1, 0, GradGeometry::default()).unwrap();
        assert_eq!(reports.len(), GradSuite::ALL.len());
        let summary = grad_summary(&reports, 1e-5);
        assert!(summary.passed, "{summary}");
    }

    #[test]
    fn impossible_tolerance_fails() {
        let reports = grad_checks(1, 0, GradGeometry::default()).unwrap();
        assert!(!grad_summary(&reports, 1e-15).passed);
    }

    #[test]
    fn published_flops_reproduce() {
        let checks = flop_reproduction(&WorkloadSpec::reference(1)).unwrap();
        assert_eq!(checks.len(), 4);
        assert!(checks.iter().all(|c| c.passed), "{checks:?}");
    }

    #[test]
    fn single_cell_grid_is_trivially_dense() {
        let p = influence_2d(1, 1, 1, 0).unwrap();
        assert_eq!(p.density(), 1.0);
    }
}
