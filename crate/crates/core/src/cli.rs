//! The `ccnet` command line.
//!
//! Exit codes: 0 success, 1 a verification failed, 2 bad usage or input.
//! [`run`] holds all behaviour so the binary stays a one-liner and tests can
//! drive it in-process.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{attention_mass, CCAttentionParams};
use crate::cca2d::rcca_forward;
use crate::cost::{flops_cc2d, flops_cc3d, flops_nonlocal, render_report, MemoryMode, ReportFormat, WorkloadSpec};
use crate::error::{Error, Result};
use crate::io::{load_tensor, StoredTensor};
use crate::losses::PhiVariant;
use crate::tensor::{Scalar, Tensor};
use crate::toytrain::{gen_toy, init_seed_for, train_seeds, train_toy, write_metrics_csv, ToyGeometry, TrainConfig};
use crate::verify::{self, Check, Fault, GradGeometry, GradSuite, SelftestConfig};

/// Environment variable that replaces the default seed of every subcommand.
pub const SEED_ENV: &str = "CC_SEED";

/// Largest grid `reach` accepts per side.
pub const REACH_MAX_SIDE: usize = 8;

#[derive(Debug, Parser)]
#[command(
    name = "ccnet",
    version,
    about = "Criss-cross attention verification and cost reporting"
)]
pub struct Cli {
    /// Scalar precision for computation and byte accounting.
    #[arg(long, global = true, value_enum, default_value_t = Precision::F64)]
    pub precision: Precision,

    /// Run on one worker thread for bit-exact reproduction.
    #[arg(long, global = true)]
    pub single_thread: bool,

    /// Output format of tables and summaries.
    #[arg(long, global = true, value_enum, default_value_t = Format::Md)]
    pub format: Format,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Md,
    Csv,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Md => ReportFormat::Markdown,
            Format::Csv => ReportFormat::Csv,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Phi {
    Piecewise,
    Quadratic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Memory {
    Inference,
    Training,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InjectedFault {
    IndexMap,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Analytic FLOP and attention-memory report for dense and criss-cross attention.
    Bench(BenchArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Measure which inputs influence which outputs after R loops.
    Reach(ReachArgs),
    /// Write the attention mass one position draws from every pixel.
    AttnDump(AttnDumpArgs),
    /// Train the synthetic segmentation head and write per-epoch metrics.
    TrainToy(TrainToyArgs),
    /// Run the oracle, normalisation, gradient, propagation, degeneration and loss suites.
    Selftest(SelftestArgs),
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Feature map height.
    #[arg(long, default_value_t = 97)]
    pub h: usize,
    /// Feature map width.
    #[arg(long, default_value_t = 97)]
    pub w: usize,
    /// Frames; values above 1 add 3D rows.
    #[arg(long, default_value_t = 1)]
    pub t: usize,
    /// Channels.
    #[arg(long, default_value_t = 512)]
    pub c: usize,
    /// Reduced query/key channels.
    #[arg(long, default_value_t = 64)]
    pub cred: usize,
    /// Report recurrent rows for 1..=loops.
    #[arg(long, default_value_t = 3)]
    pub loops: usize,
    /// Attention tensors held per loop.
    #[arg(long, value_enum, default_value_t = Memory::Inference)]
    pub memory: Memory,
    /// Fail unless the published GFLOPs figures are reproduced within 5%.
    #[arg(long)]
    pub check_paper: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// 2D grid as HxW.
    #[arg(long, default_value = "3x4", value_parser = parse_dims2)]
    pub dims: (usize, usize),
    /// 3D volume as TxHxW.
    #[arg(long, default_value = "2x3x3", value_parser = parse_dims3)]
    pub vol: (usize, usize, usize),
    /// Seeds per suite.
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    /// First seed [default: $CC_SEED or 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
}

#[derive(Debug, Args)]
pub struct ReachArgs {
    /// Grid height, at most 8.
    #[arg(long, default_value_t = 4)]
    pub h: usize,
    /// Grid width, at most 8.
    #[arg(long, default_value_t = 5)]
    pub w: usize,
    /// Recurrent loops.
    #[arg(long, default_value_t = 1)]
    pub loops: usize,
    /// Parameter seed [default: $CC_SEED or 0].
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct AttnDumpArgs {
    /// C×H×W feature map in CCT1 format.
    #[arg(long)]
    pub input: PathBuf,
    /// Query position as row,col.
    #[arg(long, value_parser = parse_position)]
    pub u: (usize, usize),
    /// Number of recurrent loops to dump.
    #[arg(long, default_value_t = 2)]
    pub loops: usize,
    /// Output directory; created if missing.
    #[arg(long)]
    pub out: PathBuf,
    /// Parameter seed [default: $CC_SEED or 0].
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainToyArgs {
    /// Data and initialisation seed [default: $CC_SEED or 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Parameter updates; 0 evaluates the initial model only.
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    /// Add the category consistent loss to the objective.
    #[arg(long, value_enum, default_value_t = Switch::On)]
    pub ccl: Switch,
    /// Intra-class distance function.
    #[arg(long, value_enum, default_value_t = Phi::Piecewise)]
    pub phi: Phi,
    /// Recurrent loops.
    #[arg(long, default_value_t = 2)]
    pub loops: usize,
    /// Learning rate.
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    /// Momentum coefficient.
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    /// Images per batch.
    #[arg(long, default_value_t = 4)]
    pub images: usize,
    /// Image side length.
    #[arg(long, default_value_t = 12)]
    pub size: usize,
    /// Number of classes.
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    /// Run seeds seed..seed+N and report the success count.
    #[arg(long)]
    pub repeat: Option<u64>,
    /// CSV destination [default: stdout].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    /// Base seed [default: $CC_SEED or 0].
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum, hide = true)]
    pub inject_fault: Option<InjectedFault>,
}

fn parse_extents(s: &str, n: usize) -> std::result::Result<Vec<usize>, String> {
    let parts: Vec<&str> = s.split(['x', 'X']).collect();
    if parts.len() != n {
        return Err(format!("expected {n} extents separated by 'x', got {s:?}"));
    }
    parts
        .iter()
        .map(|p| match p.trim().parse::<usize>() {
            Ok(0) | Err(_) => Err(format!("{p:?} is not a positive integer")),
            Ok(v) => Ok(v),
        })
        .collect()
}

fn parse_dims2(s: &str) -> std::result::Result<(usize, usize), String> {
    let v = parse_extents(s, 2)?;
    Ok((v[0], v[1]))
}

fn parse_dims3(s: &str) -> std::result::Result<(usize, usize, usize), String> {
    let v = parse_extents(s, 3)?;
    Ok((v[0], v[1], v[2]))
}

fn parse_position(s: &str) -> std::result::Result<(usize, usize), String> {
    let (r, c) = s
        .split_once(',')
        .ok_or_else(|| format!("expected row,col, got {s:?}"))?;
    let r = r.trim().parse().map_err(|_| format!("bad row {r:?}"))?;
    let c = c.trim().parse().map_err(|_| format!("bad column {c:?}"))?;
    Ok((r, c))
}

/// Explicit flag, else `$CC_SEED`, else 0.
fn seed_or_default(flag: Option<u64>) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}

enum Outcome {
    Ok,
    Failed,
}

/// Parses `args` (program name first) and runs the command, writing normal
/// output to `out` and diagnostics to `err`. Returns the process exit code.
pub fn run<I, S>(args: I, out: &mut (dyn Write + Send), err: &mut (dyn Write + Send)) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{}", e.render());
                    0
                }
                _ => {
                    let _ = write!(err, "{}", e.render());
                    2
                }
            };
        }
    };
    let result = if cli.single_thread {
        rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))
            .and_then(|pool| pool.install(|| dispatch(&cli, out, err)))
    } else {
        dispatch(&cli, out, err)
    };
    match result {
        Ok(Outcome::Ok) => 0,
        Ok(Outcome::Failed) => 1,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            2
        }
    }
}

fn dispatch(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<Outcome> {
    match &cli.command {
        Command::Bench(a) => bench(cli, a, out, err),
        Command::Gradcheck(a) => gradcheck(cli, a, out),
        Command::Reach(a) => reach(a, out),
        Command::AttnDump(a) => attn_dump(cli, a, out),
        Command::TrainToy(a) => train(cli, a, out),
        Command::Selftest(a) => selftest(cli, a, out),
    }
}

fn bench(cli: &Cli, a: &BenchArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<Outcome> {
    let base = WorkloadSpec {
        h: a.h,
        w: a.w,
        t: 1,
        c: a.c,
        c_reduced: a.cred,
        loops: 1,
        bytes_per_scalar: match cli.precision {
            Precision::F32 => 4,
            Precision::F64 => 8,
        },
        memory: match a.memory {
            Memory::Inference => MemoryMode::Inference,
            Memory::Training => MemoryMode::Training,
        },
    };
    base.validate()?;
    if a.loops == 0 || a.t == 0 {
        return Err(Error::Config("--loops and --t must be at least 1".into()));
    }
    let mut reports = vec![flops_nonlocal(&base)?];
    for r in 1..=a.loops {
        reports.push(flops_cc2d(&base.with_loops(r))?);
    }
    if a.t > 1 {
        let vol = WorkloadSpec { t: a.t, ..base };
        reports.push(flops_nonlocal(&vol)?);
        reports.push(flops_cc3d(&vol.with_loops(a.loops))?);
    }
    write!(out, "{}", render_report(&reports, cli.format.into())?)?;
    if cli.format == Format::Md {
        writeln!(out)?;
        writeln!(
            out,
            "Channel widths are not published for the reference workload; C=512 and C'=64 are the widths that reproduce its figures."
        )?;
    }
    if !a.check_paper {
        return Ok(Outcome::Ok);
    }
    let checks = verify::flop_reproduction(&base)?;
    let sink: &mut dyn Write = if cli.format == Format::Md { out } else { err };
    for c in &checks {
        writeln!(sink, "{c}")?;
    }
    Ok(if checks.iter().all(|c| c.passed) {
        Outcome::Ok
    } else {
        Outcome::Failed
    })
}

fn gradcheck(cli: &Cli, a: &GradcheckArgs, out: &mut dyn Write) -> Result<Outcome> {
    if cli.precision != Precision::F64 {
        return Err(Error::Config("finite-difference checks run in 64-bit mode only".into()));
    }
    if a.seeds == 0 {
        return Err(Error::Config("--seeds must be at least 1".into()));
    }
    if a.tol.is_nan() || a.tol <= 0.0 {
        return Err(Error::Config(format!("--tol must be positive, got {}", a.tol)));
    }
    let geometry = GradGeometry {
        dims: a.dims,
        volume: a.vol,
        ..GradGeometry::default()
    };
    let reports = verify::grad_checks(a.seeds, seed_or_default(a.seed)?, geometry)?;
    let status = |e: f64| if e < a.tol { "pass" } else { "FAIL" };
    match cli.format {
        Format::Md => {
            writeln!(
                out,
                "| suite | seed | coordinates | max rel error | worst coordinate | status |"
            )?;
            writeln!(out, "|---|---|---|---|---|---|")?;
            for r in &reports {
                writeln!(
                    out,
                    "| {} | {} | {} | {:.3e} | {} | {} |",
                    r.suite.label(),
                    r.seed,
                    r.coordinates,
                    r.max_relative_error,
                    r.worst,
                    status(r.max_relative_error)
                )?;
            }
            writeln!(out)?;
        }
        Format::Csv => {
            let mut w = csv::Writer::from_writer(&mut *out);
            w.write_record(["suite", "seed", "coordinates", "max_rel_error", "worst", "status"])?;
            for r in &reports {
                w.write_record([
                    r.suite.label(),
                    r.seed.to_string(),
                    r.coordinates.to_string(),
                    format!("{:e}", r.max_relative_error),
                    r.worst.clone(),
                    status(r.max_relative_error).to_string(),
                ])?;
            }
            w.flush()?;
        }
    }
    let summary = verify::grad_summary(&reports, a.tol);
    writeln!(
        out,
        "summary: {} cases ({} suites x {} seeds)",
        reports.len(),
        GradSuite::ALL.len(),
        a.seeds
    )?;
    writeln!(out, "{summary}")?;
    Ok(if summary.passed { Outcome::Ok } else { Outcome::Failed })
}

fn reach(a: &ReachArgs, out: &mut dyn Write) -> Result<Outcome> {
    if a.h == 0 || a.w == 0 || a.h > REACH_MAX_SIDE || a.w > REACH_MAX_SIDE {
        return Err(Error::Config(format!(
            "grid {}x{} must have sides in 1..={REACH_MAX_SIDE}",
            a.h, a.w
        )));
    }
    if a.loops == 0 {
        return Err(Error::Config("--loops must be at least 1".into()));
    }
    let seed = seed_or_default(a.seed)?;
    let pattern = verify::influence_2d(a.h, a.w, a.loops, seed)?;
    let n = a.h * a.w;
    let rows: Vec<usize> = (0..n).map(|u| pattern.row_count(u)).collect();
    writeln!(out, "grid {}x{}, loops {}, seed {seed}", a.h, a.w, a.loops)?;
    writeln!(out, "density {}", pattern.density())?;
    writeln!(
        out,
        "influencing positions per output: min {}, max {} of {n}",
        rows.iter().min().copied().unwrap_or(0),
        rows.iter().max().copied().unwrap_or(0)
    )?;
    let check = verify::propagation(a.h, a.w, a.loops, &[seed])?;
    writeln!(out, "{check}")?;
    Ok(if check.passed { Outcome::Ok } else { Outcome::Failed })
}

fn attn_dump(cli: &Cli, a: &AttnDumpArgs, out: &mut dyn Write) -> Result<Outcome> {
    let stored = load_tensor(&a.input)?;
    let shape = stored.shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::InvalidShape {
            shape,
            reason: "attn-dump expects a C×H×W feature map".into(),
        });
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if c < 2 {
        return Err(Error::Config("attention needs at least 2 channels".into()));
    }
    let (row, col) = a.u;
    if row >= h || col >= w {
        return Err(Error::Config(format!(
            "position {row},{col} lies outside the {h}x{w} map"
        )));
    }
    if a.loops == 0 {
        return Err(Error::Config("--loops must be at least 1".into()));
    }
    let seed = seed_or_default(a.seed)?;
    let masses = match (cli.precision, &stored) {
        (Precision::F64, _) => attention_masses(stored.to_f64(), a.loops, row * w + col, seed)?,
        (Precision::F32, StoredTensor::F32(x)) => attention_masses(x.clone(), a.loops, row * w + col, seed)?,
        (Precision::F32, StoredTensor::F64(x)) => attention_masses(x.cast::<f32>(), a.loops, row * w + col, seed)?,
    };
    fs::create_dir_all(&a.out)?;
    for (k, mass) in masses.iter().enumerate() {
        let r = k + 1;
        let pgm = a.out.join(format!("attn_r{r}.pgm"));
        let table = a.out.join(format!("attn_r{r}.csv"));
        fs::write(&pgm, encode_pgm(mass, h, w))?;
        write_mass_csv(mass, w, &table)?;
        let support = mass.iter().filter(|&&m| m > 0.0).count();
        writeln!(
            out,
            "R={r}: {support} of {} pixels carry mass -> {}, {}",
            h * w,
            pgm.display(),
            table.display()
        )?;
    }
    Ok(Outcome::Ok)
}

fn attention_masses<T: Scalar>(x: Tensor<T>, loops: usize, u: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let c = x.channels();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = CCAttentionParams::<T>::random(c, (c / 8).max(1), &mut rng)?;
    let (_, cache) = rcca_forward(&x, &p, loops)?;
    Ok(attention_mass(&cache, u)?
        .into_iter()
        .map(|m| m.into_iter().map(|v| v.to_f64_lossy()).collect())
        .collect())
}

/// 8-bit binary PGM, each pixel `round(255 · mass / max mass)`.
pub fn encode_pgm(mass: &[f64], h: usize, w: usize) -> Vec<u8> {
    let max = mass.iter().copied().fold(0.0, f64::max);
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(mass.iter().map(|&m| {
        if max > 0.0 {
            (255.0 * m / max).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    bytes
}

fn write_mass_csv(mass: &[f64], w: usize, path: &Path) -> Result<()> {
    let mut wr = csv::Writer::from_path(path)?;
    wr.write_record(["row", "col", "mass"])?;
    for (p, m) in mass.iter().enumerate() {
        wr.write_record([(p / w).to_string(), (p % w).to_string(), m.to_string()])?;
    }
    wr.flush()?;
    Ok(())
}

fn train(cli: &Cli, a: &TrainToyArgs, out: &mut dyn Write) -> Result<Outcome> {
    if cli.precision != Precision::F64 {
        return Err(Error::Config("toy training runs in 64-bit mode only".into()));
    }
    let mut cfg = TrainConfig {
        epochs: a.epochs,
        learning_rate: a.lr,
        momentum: a.momentum,
        use_ccl: a.ccl == Switch::On,
        loops: a.loops,
        ..TrainConfig::default()
    };
    cfg.ccl.phi = match a.phi {
        Phi::Piecewise => PhiVariant::Piecewise,
        Phi::Quadratic => PhiVariant::Quadratic,
    };
    let geometry = ToyGeometry {
        images: a.images,
        height: a.size,
        width: a.size,
        classes: a.classes,
    };
    let seed = seed_or_default(a.seed)?;

    let Some(n) = a.repeat else {
        let task = gen_toy(seed, geometry.images, geometry.height, geometry.width, geometry.classes)?;
        let outcome = train_toy(&task, init_seed_for(seed), &cfg)?;
        match &a.out {
            Some(path) => {
                write_metrics_csv(&outcome.history, fs::File::create(path)?)?;
                let last = outcome.last();
                writeln!(
                    out,
                    "seed {seed}: {} after {} epochs, total {:.6}, pixel_acc {:.4}, intra_var {:.6} -> {}",
                    if outcome.succeeded() { "ok" } else { "failed" },
                    last.epoch,
                    last.total,
                    last.pixel_acc,
                    last.intra_var,
                    path.display()
                )?;
            }
            None => write_metrics_csv(&outcome.history, &mut *out)?,
        }
        return Ok(Outcome::Ok);
    };

    if n == 0 {
        return Err(Error::Config("--repeat must be at least 1".into()));
    }
    let seeds: Vec<u64> = (0..n).map(|i| seed.wrapping_add(i)).collect();
    let outcomes = train_seeds(&seeds, geometry, &cfg)?;
    let rows_with = |num: fn(f64) -> String| -> Vec<[String; 6]> {
        seeds
            .iter()
            .zip(&outcomes)
            .map(|(s, o)| {
                let last = o.last();
                [
                    s.to_string(),
                    if o.succeeded() { "ok" } else { "failed" }.to_string(),
                    o.failed_at.map_or(String::new(), |e| e.to_string()),
                    num(last.total),
                    num(last.pixel_acc),
                    num(last.intra_var),
                ]
            })
            .collect()
    };
    let rows = rows_with(|v| v.to_string());
    const COLUMNS: [&str; 6] = [
        "seed",
        "status",
        "failed_at",
        "final_total",
        "final_pixel_acc",
        "final_intra_var",
    ];
    if let Some(path) = &a.out {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(COLUMNS)?;
        for r in &rows {
            w.write_record(r)?;
        }
        w.flush()?;
    }
    match cli.format {
        Format::Csv => {
            let mut w = csv::Writer::from_writer(&mut *out);
            w.write_record(COLUMNS)?;
            for r in &rows {
                w.write_record(r)?;
            }
            w.flush()?;
        }
        Format::Md => {
            writeln!(out, "| {} |", COLUMNS.join(" | "))?;
            writeln!(out, "|{}", "---|".repeat(COLUMNS.len()))?;
            for r in rows_with(compact) {
                writeln!(out, "| {} |", r.join(" | "))?;
            }
        }
    }
    let ok = crate::toytrain::success_count(&outcomes);
    writeln!(out, "successes: {ok}/{n}")?;
    Ok(Outcome::Ok)
}

fn compact(v: f64) -> String {
    if v == 0.0 || (1e-3..1e6).contains(&v.abs()) {
        format!("{v:.4}")
    } else {
        format!("{v:.3e}")
    }
}

fn selftest(cli: &Cli, a: &SelftestArgs, out: &mut dyn Write) -> Result<Outcome> {
    if cli.precision != Precision::F64 {
        return Err(Error::Config("self-test runs in 64-bit mode only".into()));
    }
    let cfg = SelftestConfig {
        seed: seed_or_default(a.seed)?,
        ..SelftestConfig::default()
    };
    let fault = match a.inject_fault {
        Some(InjectedFault::IndexMap) => Fault::IndexMap,
        None => Fault::None,
    };
    let start = Instant::now();
    let checks = verify::selftest(&cfg, fault)?;
    let elapsed = start.elapsed().as_secs_f64();
    write_checks(&checks, cli.format, out)?;
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.property).collect();
    writeln!(
        out,
        "selftest: {}/{} passed in {elapsed:.1} s",
        checks.len() - failed.len(),
        checks.len()
    )?;
    if failed.is_empty() {
        Ok(Outcome::Ok)
    } else {
        writeln!(out, "failing properties: {}", failed.join(", "))?;
        Ok(Outcome::Failed)
    }
}

fn write_checks(checks: &[Check], format: Format, out: &mut dyn Write) -> Result<()> {
    match format {
        Format::Md => {
            for c in checks {
                writeln!(out, "{c}")?;
            }
        }
        Format::Csv => {
            let mut w = csv::Writer::from_writer(&mut *out);
            w.write_record(["property", "status", "detail"])?;
            for c in checks {
                w.write_record([c.property, if c.passed { "pass" } else { "fail" }, &c.detail])?;
            }
            w.flush()?;
        }
    }
    Ok(())
}
