//! Closed-form FLOP and attention-buffer model for dense (non-local) and
//! criss-cross attention.
//!
//! Counting conventions: one multiply-add is 2 FLOPs, softmax is 3 FLOPs per
//! element (exp, accumulate, divide; the max subtraction is not counted), the
//! residual add is 1 FLOP per output element and is booked under aggregation.
//! Query, key and value are recomputed in every loop.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Which attention tensors the memory model keeps per loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MemoryMode {
    /// Attention weights only.
    #[default]
    Inference,
    /// Scores and weights.
    Training,
}

impl MemoryMode {
    fn buffers(self) -> u64 {
        match self {
            Self::Inference => 1,
            Self::Training => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WorkloadSpec {
    pub h: usize,
    pub w: usize,
    pub t: usize,
    pub c: usize,
    pub c_reduced: usize,
    pub loops: usize,
    pub bytes_per_scalar: usize,
    pub memory: MemoryMode,
}

impl WorkloadSpec {
    /// 97×97 feature map (a 769×769 input at output stride 8), C = 512,
    /// C′ = 64, 32-bit scalars. The channel widths are not published; these
    /// are the widths for which the model lands on 8.3 / 16.5 / 24.7 GFLOPs
    /// for one to three loops and 108 GFLOPs for the dense block.
    pub fn reference(loops: usize) -> Self {
        Self {
            h: 97,
            w: 97,
            t: 1,
            c: 512,
            c_reduced: 64,
            loops,
            bytes_per_scalar: 4,
            memory: MemoryMode::Inference,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.h, self.w, self.t, self.c, self.c_reduced, self.loops];
        if dims.contains(&0) {
            return Err(Error::Config(format!("workload extents must be positive: {self:?}")));
        }
        if self.c_reduced >= self.c {
            return Err(Error::Config(format!(
                "reduced channels {} must be below channels {}",
                self.c_reduced, self.c
            )));
        }
        if self.bytes_per_scalar != 4 && self.bytes_per_scalar != 8 {
            return Err(Error::Config(format!(
                "scalar width {} is not 4 or 8 bytes",
                self.bytes_per_scalar
            )));
        }
        Ok(())
    }

    pub fn with_loops(self, loops: usize) -> Self {
        Self { loops, ..self }
    }

    fn positions(&self) -> u64 {
        (self.t * self.h * self.w) as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    NonLocal,
    CrissCross2D,
    CrissCross3D,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Self::NonLocal => "non-local",
            Self::CrissCross2D => "rcca",
            Self::CrissCross3D => "rcca3d",
        }
    }
}

/// FLOPs of one loop, by stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StageFlops {
    pub projections: u64,
    pub affinity: u64,
    pub softmax: u64,
    pub aggregation: u64,
}

impl StageFlops {
    pub fn total(&self) -> u64 {
        self.projections + self.affinity + self.softmax + self.aggregation
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub method: Method,
    pub spec: WorkloadSpec,
    pub per_loop: StageFlops,
    pub flops_total: u64,
    pub attention_bytes: u64,
    /// `flops_total` over a single dense block on the same geometry.
    pub ratio_vs_nonlocal: f64,
}

impl CostReport {
    pub fn gflops(&self) -> f64 {
        self.flops_total as f64 / 1e9
    }

    /// Attention buffer size in MiB.
    pub fn attention_mb(&self) -> f64 {
        self.attention_bytes as f64 / (1024.0 * 1024.0)
    }
}

/// Stage counts for `positions` queries, each attending to `context` keys.
fn stages(spec: &WorkloadSpec, context: u64) -> StageFlops {
    let n = spec.positions();
    let c = spec.c as u64;
    let cr = spec.c_reduced as u64;
    StageFlops {
        projections: 2 * (2 * n * c * cr) + 2 * n * c * c,
        affinity: 2 * n * context * cr,
        softmax: 3 * n * context,
        aggregation: 2 * n * context * c + n * c,
    }
}

fn build(method: Method, spec: &WorkloadSpec, context: u64) -> Result<CostReport> {
    spec.validate()?;
    let per_loop = stages(spec, context);
    let loops = spec.loops as u64;
    let n = spec.positions();
    let flops_total = per_loop.total() * loops;
    let attention_bytes = loops * spec.memory.buffers() * n * context * spec.bytes_per_scalar as u64;
    let dense_once = stages(spec, n).total();
    Ok(CostReport {
        method,
        spec: *spec,
        per_loop,
        flops_total,
        attention_bytes,
        ratio_vs_nonlocal: flops_total as f64 / dense_once as f64,
    })
}

/// Recurrent 2D criss-cross attention; `spec.t` is ignored.
pub fn flops_cc2d(spec: &WorkloadSpec) -> Result<CostReport> {
    let flat = WorkloadSpec { t: 1, ..*spec };
    build(Method::CrissCross2D, &flat, (spec.h + spec.w - 1) as u64)
}

/// Dense attention over all `T·H·W` positions, repeated `spec.loops` times.
pub fn flops_nonlocal(spec: &WorkloadSpec) -> Result<CostReport> {
    build(Method::NonLocal, spec, spec.positions())
}

pub fn flops_cc3d(spec: &WorkloadSpec) -> Result<CostReport> {
    build(Method::CrissCross3D, spec, (spec.t + spec.h + spec.w - 2) as u64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReportFormat {
    #[default]
    Markdown,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "md" | "markdown" => Ok(Self::Markdown),
            "csv" => Ok(Self::Csv),
            other => Err(Error::UnknownVariant {
                kind: "report format",
                value: other.to_string(),
            }),
        }
    }
}

pub const REPORT_COLUMNS: [&str; 10] = [
    "method",
    "loops",
    "h",
    "w",
    "t",
    "c",
    "c_reduced",
    "gflops",
    "attn_mb",
    "ratio_vs_nl",
];

/// Markdown rounds for reading; CSV keeps full precision.
fn row(r: &CostReport, rounded: bool) -> [String; 10] {
    let s = &r.spec;
    let num = |v: f64, digits: usize| {
        if rounded {
            format!("{v:.digits$}")
        } else {
            v.to_string()
        }
    };
    [
        r.method.label().to_string(),
        s.loops.to_string(),
        s.h.to_string(),
        s.w.to_string(),
        s.t.to_string(),
        s.c.to_string(),
        s.c_reduced.to_string(),
        num(r.gflops(), 3),
        num(r.attention_mb(), 3),
        num(r.ratio_vs_nonlocal, 4),
    ]
}

pub fn render_report(reports: &[CostReport], format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(REPORT_COLUMNS)?;
            for r in reports {
                w.write_record(row(r, false))?;
            }
            let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
            Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
        }
        ReportFormat::Markdown => {
            let rows: Vec<[String; 10]> = reports.iter().map(|r| row(r, true)).collect();
            let widths: Vec<usize> = (0..10)
                .map(|i| {
                    rows.iter()
                        .map(|r| r[i].len())
                        .chain([REPORT_COLUMNS[i].len()])
                        .max()
                        .unwrap_or(0)
                })
                .collect();
            let mut out = String::new();
            let line = |out: &mut String, cells: &[&str]| {
                out.push('|');
                for (cell, w) in cells.iter().zip(&widths) {
                    let _ = write!(out, " {cell:>w$} |");
                }
                out.push('\n');
            };
            line(&mut out, &REPORT_COLUMNS);
            out.push('|');
            for w in &widths {
                let _ = write!(out, "{}:|", "-".repeat(w + 1));
            }
            out.push('\n');
            for r in &rows {
                let cells: Vec<&str> = r.iter().map(String::as_str).collect();
                line(&mut out, &cells);
            }
            Ok(out)
        }
    }
}
