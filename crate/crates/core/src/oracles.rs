//! Slow, obviously-correct references.
//!
//! Nothing here goes through [`crate::attention`]: membership in a criss-cross
//! set is decided by comparing coordinates, projections and softmax are
//! explicit loops. The vectorised modules are checked against these.

use rayon::prelude::*;

use crate::attention::CCAttentionParams;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Scalar operation tally collected while running a naive forward pass.
///
/// Multiply-adds are counted once each; softmax counts one exp, one
/// accumulate and one divide per element.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCounts {
    pub projection_macs: u64,
    pub affinity_macs: u64,
    pub softmax_ops: u64,
    pub aggregation_macs: u64,
    pub residual_adds: u64,
}

struct Naive<T> {
    output: Tensor<T>,
    /// Per output position, the normalised weights in enumeration order.
    weights: Vec<Vec<T>>,
    counts: OpCounts,
}

fn unravel(mut flat: usize, shape: &[usize]) -> Vec<usize> {
    let mut idx = vec![0; shape.len()];
    for d in (0..shape.len()).rev() {
        idx[d] = flat % shape[d];
        flat /= shape[d];
    }
    idx
}

fn naive_project<T: Scalar>(
    x: &[Vec<T>],
    w: &crate::tensor::ProjectionWeights<T>,
    counts: &mut OpCounts,
) -> Vec<Vec<T>> {
    // x is position-major: x[p][k]
    x.iter()
        .map(|xp| {
            (0..w.out_channels())
                .map(|c| {
                    let mut acc = T::zero();
                    for (k, &xk) in xp.iter().enumerate() {
                        acc = acc + w.at(c, k) * xk;
                        counts.projection_macs += 1;
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

fn naive_attention<T: Scalar>(
    h: &Tensor<T>,
    p: &CCAttentionParams<T>,
    in_set: impl Fn(&[usize], &[usize]) -> bool,
) -> Result<Naive<T>> {
    if h.rank() < 2 || h.channels() != p.channels() {
        return Err(Error::ChannelMismatch {
            context: "reference attention input channels",
            expected: p.channels(),
            found: h.channels(),
        });
    }
    let spatial = h.spatial_shape().to_vec();
    let n = h.positions();
    let c = h.channels();
    let hp: Vec<Vec<T>> = (0..n)
        .map(|u| (0..c).map(|ch| h.data()[ch * n + u]).collect())
        .collect();
    let mut counts = OpCounts::default();
    let q = naive_project(&hp, &p.wq, &mut counts);
    let k = naive_project(&hp, &p.wk, &mut counts);
    let v = naive_project(&hp, &p.wv, &mut counts);
    let coords: Vec<Vec<usize>> = (0..n).map(|u| unravel(u, &spatial)).collect();

    let mut out = vec![T::zero(); c * n];
    let mut weights = Vec::with_capacity(n);
    for u in 0..n {
        let set: Vec<usize> = (0..n).filter(|&t| in_set(&coords[u], &coords[t])).collect();
        let mut scores = Vec::with_capacity(set.len());
        for &t in &set {
            let mut d = T::zero();
            for ch in 0..q[u].len() {
                d = d + q[u][ch] * k[t][ch];
                counts.affinity_macs += 1;
            }
            scores.push(d);
        }
        let max = scores.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        let mut e = Vec::with_capacity(set.len());
        for &s in &scores {
            let x = (s - max).exp();
            total = total + x;
            e.push(x);
            counts.softmax_ops += 2;
        }
        let a: Vec<T> = e
            .iter()
            .map(|&x| {
                counts.softmax_ops += 1;
                x / total
            })
            .collect();
        for ch in 0..c {
            let mut acc = T::zero();
            for (j, &t) in set.iter().enumerate() {
                acc = acc + a[j] * v[t][ch];
                counts.aggregation_macs += 1;
            }
            out[ch * n + u] = acc + hp[u][ch];
            counts.residual_adds += 1;
        }
        weights.push(a);
    }
    Ok(Naive {
        output: Tensor::new(h.shape().to_vec(), out)?,
        weights,
        counts,
    })
}

fn same_row_or_col(u: &[usize], t: &[usize]) -> bool {
    u[0] == t[0] || u[1] == t[1]
}

fn two_coords_shared(u: &[usize], t: &[usize]) -> bool {
    u.iter().zip(t).filter(|(a, b)| a == b).count() >= 2
}

fn expect_rank<T: Scalar>(h: &Tensor<T>, rank: usize) -> Result<()> {
    if h.rank() != rank {
        return Err(Error::InvalidShape {
            shape: h.shape().to_vec(),
            reason: format!("expected rank {rank}"),
        });
    }
    Ok(())
}

/// Dense attention: every position attends to all positions, same residual
/// and no score scaling.
pub fn nonlocal_forward<T: Scalar>(h: &Tensor<T>, p: &CCAttentionParams<T>) -> Result<Tensor<T>> {
    Ok(naive_attention(h, p, |_, _| true)?.output)
}

/// Per-position dense attention weights, positions in row-major order.
pub fn nonlocal_weights<T: Scalar>(h: &Tensor<T>, p: &CCAttentionParams<T>) -> Result<Vec<Vec<T>>> {
    Ok(naive_attention(h, p, |_, _| true)?.weights)
}

pub fn cca_naive<T: Scalar>(h: &Tensor<T>, p: &CCAttentionParams<T>) -> Result<Tensor<T>> {
    Ok(cca_naive_counted(h, p)?.0)
}

/// [`cca_naive`] plus the tally of scalar operations it performed.
pub fn cca_naive_counted<T: Scalar>(h: &Tensor<T>, p: &CCAttentionParams<T>) -> Result<(Tensor<T>, OpCounts)> {
    expect_rank(h, 3)?;
    let r = naive_attention(h, p, same_row_or_col)?;
    Ok((r.output, r.counts))
}

pub fn cca3d_naive<T: Scalar>(h: &Tensor<T>, p: &CCAttentionParams<T>) -> Result<Tensor<T>> {
    expect_rank(h, 4)?;
    Ok(naive_attention(h, p, two_coords_shared)?.output)
}

/// Central-difference Jacobian, `rows = |f(x)|`, `cols = |x|`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Jacobian {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Jacobian {
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }
}

pub fn jacobian_fd<F>(f: F, x: &Tensor<f64>, step: f64) -> Jacobian
where
    F: Fn(&Tensor<f64>) -> Tensor<f64> + Sync,
{
    let rows = f(x).len();
    let cols = x.len();
    let columns: Vec<Vec<f64>> = (0..cols)
        .into_par_iter()
        .map(|j| {
            let mut xp = x.clone();
            xp.data_mut()[j] += step;
            let mut xm = x.clone();
            xm.data_mut()[j] -= step;
            let (fp, fm) = (f(&xp), f(&xm));
            fp.data()
                .iter()
                .zip(fm.data())
                .map(|(a, b)| (a - b) / (2.0 * step))
                .collect()
        })
        .collect();
    let mut data = vec![0.0; rows * cols];
    for (j, col) in columns.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            data[i * cols + j] = v;
        }
    }
    Jacobian { rows, cols, data }
}

/// Central-difference gradient of a scalar function of a flat vector.
pub fn gradient_fd<F>(f: F, x: &[f64], step: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    (0..x.len())
        .into_par_iter()
        .map(|j| {
            let mut xp = x.to_vec();
            xp[j] += step;
            let mut xm = x.to_vec();
            xm[j] -= step;
            (f(&xp) - f(&xm)) / (2.0 * step)
        })
        .collect()
}

/// Fourth-order central-difference gradient,
/// `(f(x-2h) - 8f(x-h) + 8f(x+h) - f(x+2h)) / 12h`. Truncation error is
/// `O(h^4)`, so a step near [`FD4_STEP`] keeps both truncation and roundoff
/// well below the two-point stencil's.
pub fn gradient_fd4<F>(f: F, x: &[f64], step: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    (0..x.len())
        .into_par_iter()
        .map(|j| {
            let at = |k: f64| {
                let mut xs = x.to_vec();
                xs[j] += k * step;
                f(&xs)
            };
            (at(-2.0) - 8.0 * at(-1.0) + 8.0 * at(1.0) - at(2.0)) / (12.0 * step)
        })
        .collect()
}

/// Floor under the denominator of [`relative_error`], so coordinates whose
/// true gradient is (near) zero are judged on absolute error.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-4;

/// `|a - b| / max(|a|, |b|, RELATIVE_ERROR_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Worst [`relative_error`] over paired entries and its index.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> (f64, usize) {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .enumerate()
        .fold((0.0, 0), |(m, at), (i, e)| if e > m { (e, i) } else { (m, at) })
}

/// Boolean reachability between output positions (rows) and input positions
/// (columns).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InfluencePattern {
    outputs: usize,
    inputs: usize,
    bits: Vec<bool>,
}

impl InfluencePattern {
    pub fn from_fn(outputs: usize, inputs: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(outputs * inputs);
        for u in 0..outputs {
            for t in 0..inputs {
                bits.push(f(u, t));
            }
        }
        Self { outputs, inputs, bits }
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn get(&self, u: usize, theta: usize) -> bool {
        self.bits[u * self.inputs + theta]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn density(&self) -> f64 {
        self.count() as f64 / self.bits.len() as f64
    }

    pub fn row_count(&self, u: usize) -> usize {
        self.bits[u * self.inputs..(u + 1) * self.inputs]
            .iter()
            .filter(|&&b| b)
            .count()
    }

    pub fn is_subset_of(&self, other: &Self) -> bool {
        self.bits.len() == other.bits.len() && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }
}

/// Positions whose coordinates differ from `u` in at most `hops` axes; this is
/// what `hops` rounds of criss-cross attention can reach. `hops = 1` is the
/// criss-cross set itself.
pub fn hop_mask(spatial: &[usize], hops: usize) -> InfluencePattern {
    let n: usize = spatial.iter().product();
    let coords: Vec<Vec<usize>> = (0..n).map(|u| unravel(u, spatial)).collect();
    InfluencePattern::from_fn(n, n, |u, t| {
        coords[u].iter().zip(&coords[t]).filter(|(a, b)| a != b).count() <= hops
    })
}

/// Finite-difference scan: `pattern[u][θ]` is set when some channel of
/// `f(x)` at `u` moves by more than `threshold` per unit change of some
/// channel of `x` at `θ`. `x` and `f(x)` are channel-first.
pub fn influence_scan<F>(f: F, x: &Tensor<f64>, threshold: f64) -> InfluencePattern
where
    F: Fn(&Tensor<f64>) -> Tensor<f64> + Sync,
{
    let y = f(x);
    let n_out = y.positions();
    let n_in = x.positions();
    let jac = jacobian_fd(&f, x, INFLUENCE_STEP);
    InfluencePattern::from_fn(n_out, n_in, |u, t| {
        (0..y.channels()).any(|co| (0..x.channels()).any(|ci| jac.at(co * n_out + u, ci * n_in + t).abs() > threshold))
    })
}

/// Default central-difference step in 64-bit mode.
pub const FD_STEP: f64 = 1e-6;

/// Default step of [`gradient_fd4`].
pub const FD4_STEP: f64 = 1e-4;

/// Perturbation used by [`influence_scan`]. Larger than [`FD_STEP`] so that
/// weak but genuine influences still move the output by many ulps; entries
/// that are structurally zero stay exactly zero at any step.
pub const INFLUENCE_STEP: f64 = 1e-3;

/// Default influence threshold.
pub const INFLUENCE_THRESHOLD: f64 = 1e-12;
