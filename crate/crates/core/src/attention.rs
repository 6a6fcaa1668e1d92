//! Geometry-agnostic criss-cross attention.
//!
//! The 2D and 3D modules differ only in which positions make up the
//! criss-cross set of a position and in what order. That is captured by
//! [`CrissCrossLayout`] and flattened into a [`NeighborTable`]; everything
//! below (affinity, aggregation, recurrence, reverse pass) works off the table.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{pointwise_project, project_backward, softmax_axis, ProjectionWeights, Scalar, Tensor};

/// Enumerates the criss-cross set of every position of a spatial grid.
pub trait CrissCrossLayout {
    fn spatial_shape(&self) -> Vec<usize>;

    /// Number of members of every criss-cross set.
    fn set_size(&self) -> usize;

    /// Flat index of the `i`-th member of the set of flat position `u`.
    /// Callers guarantee `u < positions` and `i < set_size`.
    fn member(&self, u: usize, i: usize) -> usize;
}

/// Dense `positions × set_size` lookup built once per geometry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborTable {
    spatial: Vec<usize>,
    set_size: usize,
    members: Vec<usize>,
}

impl NeighborTable {
    pub fn build<L: CrissCrossLayout + ?Sized>(layout: &L) -> Self {
        let spatial = layout.spatial_shape();
        let n: usize = spatial.iter().product();
        let set_size = layout.set_size();
        let mut members = Vec::with_capacity(n * set_size);
        for u in 0..n {
            for i in 0..set_size {
                members.push(layout.member(u, i));
            }
        }
        Self {
            spatial,
            set_size,
            members,
        }
    }

    pub fn spatial_shape(&self) -> &[usize] {
        &self.spatial
    }

    pub fn positions(&self) -> usize {
        self.spatial.iter().product()
    }

    pub fn set_size(&self) -> usize {
        self.set_size
    }

    pub fn members(&self, u: usize) -> &[usize] {
        &self.members[u * self.set_size..(u + 1) * self.set_size]
    }
}

/// Query, key and value projections shared by every recurrence loop.
#[derive(Debug, Clone, PartialEq)]
pub struct CCAttentionParams<T = f64> {
    pub wq: ProjectionWeights<T>,
    pub wk: ProjectionWeights<T>,
    pub wv: ProjectionWeights<T>,
}

impl<T: Scalar> CCAttentionParams<T> {
    /// Requires `wq, wk: C′×C` and `wv: C×C` with `C′ < C`.
    pub fn new(wq: ProjectionWeights<T>, wk: ProjectionWeights<T>, wv: ProjectionWeights<T>) -> Result<Self> {
        let c = wv.in_channels();
        let consistent = wv.out_channels() == c
            && wq.in_channels() == c
            && wk.in_channels() == c
            && wq.out_channels() == wk.out_channels();
        if !consistent {
            return Err(Error::Config(format!(
                "projection shapes wq {}x{}, wk {}x{}, wv {}x{} are inconsistent",
                wq.out_channels(),
                wq.in_channels(),
                wk.out_channels(),
                wk.in_channels(),
                wv.out_channels(),
                wv.in_channels()
            )));
        }
        if wq.out_channels() >= c {
            return Err(Error::Config(format!(
                "reduced channels {} must be below channels {c}",
                wq.out_channels()
            )));
        }
        Ok(Self { wq, wk, wv })
    }

    pub fn random<R: Rng + ?Sized>(channels: usize, reduced: usize, rng: &mut R) -> Result<Self> {
        Self::new(
            ProjectionWeights::random(reduced, channels, rng)?,
            ProjectionWeights::random(reduced, channels, rng)?,
            ProjectionWeights::random(channels, channels, rng)?,
        )
    }

    pub fn zeros_like(&self) -> Self {
        let z = |w: &ProjectionWeights<T>| {
            ProjectionWeights::zeros(w.out_channels(), w.in_channels()).expect("shape already validated")
        };
        Self {
            wq: z(&self.wq),
            wk: z(&self.wk),
            wv: z(&self.wv),
        }
    }

    pub fn channels(&self) -> usize {
        self.wv.in_channels()
    }

    pub fn reduced_channels(&self) -> usize {
        self.wq.out_channels()
    }

    /// The three weight matrices in (q, k, v) order.
    pub fn parts(&self) -> [&ProjectionWeights<T>; 3] {
        [&self.wq, &self.wk, &self.wv]
    }

    pub fn parts_mut(&mut self) -> [&mut ProjectionWeights<T>; 3] {
        [&mut self.wq, &mut self.wk, &mut self.wv]
    }

    /// Element-wise accumulation; used to sum gradients of shared weights.
    pub fn accumulate(&mut self, other: &Self) {
        for (dst, src) in self.parts_mut().into_iter().zip(other.parts()) {
            for (a, &b) in dst.weight_mut().iter_mut().zip(src.weight()) {
                *a = *a + b;
            }
        }
    }

    pub fn flat(&self) -> Vec<T> {
        self.parts().iter().flat_map(|w| w.weight().iter().copied()).collect()
    }
}

/// Normalised attention weights, shape `set_size × spatial...`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap<T = f64> {
    values: Tensor<T>,
}

impl<T: Scalar> AttentionMap<T> {
    /// Softmax over the criss-cross axis of raw affinity scores.
    pub fn from_scores(scores: &Tensor<T>) -> Result<Self> {
        Ok(Self {
            values: softmax_axis(scores, 0)?,
        })
    }

    /// Wraps weights as given; no normalisation is applied or checked.
    pub fn from_weights(values: Tensor<T>) -> Self {
        Self { values }
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn set_size(&self) -> usize {
        self.values.channels()
    }

    /// Largest deviation of a per-position weight sum from one.
    pub fn normalization_error(&self) -> T {
        let l = self.values.channels();
        let n = self.values.positions();
        let d = self.values.data();
        (0..n)
            .map(|u| {
                let s: T = (0..l).map(|i| d[i * n + u]).sum();
                (s - T::one()).abs()
            })
            .fold(T::zero(), T::max)
    }
}

/// Intermediates of one criss-cross pass.
#[derive(Debug, Clone)]
pub struct LoopCache<T = f64> {
    pub input: Tensor<T>,
    pub q: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
    pub scores: Tensor<T>,
    pub attention: AttentionMap<T>,
    table: Arc<NeighborTable>,
}

impl<T> LoopCache<T> {
    pub fn table(&self) -> &NeighborTable {
        &self.table
    }
}

/// Everything the reverse pass needs: a copy of the shared parameters and one
/// [`LoopCache`] per recurrence loop.
#[derive(Debug, Clone)]
pub struct ForwardCache<T = f64> {
    pub params: CCAttentionParams<T>,
    pub loops: Vec<LoopCache<T>>,
}

fn check_grid<T: Scalar>(x: &Tensor<T>, table: &NeighborTable, context: &'static str) -> Result<()> {
    if x.rank() < 2 || x.spatial_shape() != table.spatial_shape() {
        let mut expected = vec![x.shape().first().copied().unwrap_or(0)];
        expected.extend_from_slice(table.spatial_shape());
        return Err(Error::ShapeMismatch {
            context,
            lhs: x.shape().to_vec(),
            rhs: expected,
        });
    }
    Ok(())
}

/// Channel-first `C × N` to position-major `N × C`.
fn transpose<T: Scalar>(x: &Tensor<T>) -> Vec<T> {
    let c = x.channels();
    let n = x.positions();
    let d = x.data();
    let mut out = vec![T::zero(); c * n];
    for ch in 0..c {
        for u in 0..n {
            out[u * c + ch] = d[ch * n + u];
        }
    }
    out
}

fn untranspose<T: Scalar>(pm: &[T], c: usize, spatial: &[usize]) -> Result<Tensor<T>> {
    let n: usize = spatial.iter().product();
    let mut data = vec![T::zero(); c * n];
    for u in 0..n {
        for ch in 0..c {
            data[ch * n + u] = pm[u * c + ch];
        }
    }
    let mut shape = vec![c];
    shape.extend_from_slice(spatial);
    Tensor::new(shape, data)
}

fn with_leading(lead: usize, spatial: &[usize]) -> Vec<usize> {
    let mut shape = vec![lead];
    shape.extend_from_slice(spatial);
    shape
}

/// `scores[i, u] = ⟨q[:, u], k[:, member(u, i)]⟩`, unscaled.
pub fn affinity<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, table: &NeighborTable) -> Result<Tensor<T>> {
    if q.shape() != k.shape() {
        return Err(Error::ShapeMismatch {
            context: "affinity query/key",
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    check_grid(q, table, "affinity")?;
    let c = q.channels();
    let n = table.positions();
    let l = table.set_size();
    let qt = transpose(q);
    let kt = transpose(k);
    let mut out = vec![T::zero(); l * n];
    for u in 0..n {
        let qu = &qt[u * c..(u + 1) * c];
        for (i, &m) in table.members(u).iter().enumerate() {
            let km = &kt[m * c..(m + 1) * c];
            out[i * n + u] = qu.iter().zip(km).map(|(&a, &b)| a * b).sum();
        }
    }
    Tensor::new(with_leading(l, table.spatial_shape()), out)
}

/// `out[:, u] = Σ_i a[i, u] · v[:, member(u, i)] + h[:, u]`.
pub fn aggregate<T: Scalar>(
    a: &AttentionMap<T>,
    v: &Tensor<T>,
    h: &Tensor<T>,
    table: &NeighborTable,
) -> Result<Tensor<T>> {
    if v.shape() != h.shape() {
        return Err(Error::ShapeMismatch {
            context: "aggregation value/residual",
            lhs: v.shape().to_vec(),
            rhs: h.shape().to_vec(),
        });
    }
    check_grid(v, table, "aggregation")?;
    let expected = with_leading(table.set_size(), table.spatial_shape());
    if a.values().shape() != expected.as_slice() {
        return Err(Error::ShapeMismatch {
            context: "aggregation attention map",
            lhs: a.values().shape().to_vec(),
            rhs: expected,
        });
    }
    let c = v.channels();
    let n = table.positions();
    let vt = transpose(v);
    let aw = a.values().data();
    let mut out = transpose(h);
    for u in 0..n {
        let ou = &mut out[u * c..(u + 1) * c];
        for (i, &m) in table.members(u).iter().enumerate() {
            let w = aw[i * n + u];
            for (o, &vm) in ou.iter_mut().zip(&vt[m * c..(m + 1) * c]) {
                *o = *o + w * vm;
            }
        }
    }
    untranspose(&out, c, table.spatial_shape())
}

/// One criss-cross attention pass over `h` (`C × spatial...`).
pub fn forward_once<T: Scalar>(
    h: &Tensor<T>,
    p: &CCAttentionParams<T>,
    table: &Arc<NeighborTable>,
) -> Result<(Tensor<T>, LoopCache<T>)> {
    check_grid(h, table, "criss-cross input")?;
    let q = pointwise_project(h, &p.wq)?;
    let k = pointwise_project(h, &p.wk)?;
    let v = pointwise_project(h, &p.wv)?;
    let scores = affinity(&q, &k, table)?;
    let attention = AttentionMap::from_scores(&scores)?;
    let out = aggregate(&attention, &v, h, table)?;
    Ok((
        out,
        LoopCache {
            input: h.clone(),
            q,
            k,
            v,
            scores,
            attention,
            table: Arc::clone(table),
        },
    ))
}

/// `loops` passes, each feeding the next, all with the same parameters.
pub fn forward_recurrent<T: Scalar>(
    x: &Tensor<T>,
    p: &CCAttentionParams<T>,
    loops: usize,
    table: &Arc<NeighborTable>,
) -> Result<(Tensor<T>, ForwardCache<T>)> {
    if loops == 0 {
        return Err(Error::Config("recurrence needs at least one loop".into()));
    }
    let mut caches = Vec::with_capacity(loops);
    let mut cur = x.clone();
    for _ in 0..loops {
        let (next, cache) = forward_once(&cur, p, table)?;
        caches.push(cache);
        cur = next;
    }
    Ok((
        cur,
        ForwardCache {
            params: p.clone(),
            loops: caches,
        },
    ))
}

/// Reverse pass of one loop. Returns `(dL/dh, dL/dparams)`.
pub fn backward_once<T: Scalar>(
    cache: &LoopCache<T>,
    p: &CCAttentionParams<T>,
    d_out: &Tensor<T>,
) -> Result<(Tensor<T>, CCAttentionParams<T>)> {
    if d_out.shape() != cache.input.shape() {
        return Err(Error::State(format!(
            "output gradient shape {:?} does not match cached input {:?}",
            d_out.shape(),
            cache.input.shape()
        )));
    }
    if p.channels() != cache.input.channels() || p.reduced_channels() != cache.q.channels() {
        return Err(Error::State(format!(
            "parameters ({}→{}) do not match cached pass ({}→{})",
            p.channels(),
            p.reduced_channels(),
            cache.input.channels(),
            cache.q.channels()
        )));
    }
    let table = &cache.table;
    let n = table.positions();
    let c = cache.v.channels();
    let cr = cache.q.channels();
    let a = cache.attention.values().data();
    let g = transpose(d_out);
    let vt = transpose(&cache.v);
    let qt = transpose(&cache.q);
    let kt = transpose(&cache.k);

    let mut dv = vec![T::zero(); n * c];
    let mut dq = vec![T::zero(); n * cr];
    let mut dk = vec![T::zero(); n * cr];
    let mut da = vec![T::zero(); table.set_size()];
    for u in 0..n {
        let gu = &g[u * c..(u + 1) * c];
        let members = table.members(u);
        for (i, &m) in members.iter().enumerate() {
            let vm = &vt[m * c..(m + 1) * c];
            da[i] = gu.iter().zip(vm).map(|(&x, &y)| x * y).sum();
            let w = a[i * n + u];
            for (d, &gv) in dv[m * c..(m + 1) * c].iter_mut().zip(gu) {
                *d = *d + w * gv;
            }
        }
        let mean: T = members.iter().enumerate().map(|(i, _)| a[i * n + u] * da[i]).sum();
        let qu = &qt[u * cr..(u + 1) * cr];
        for (i, &m) in members.iter().enumerate() {
            let dd = a[i * n + u] * (da[i] - mean);
            let km = &kt[m * cr..(m + 1) * cr];
            for (d, &kv) in dq[u * cr..(u + 1) * cr].iter_mut().zip(km) {
                *d = *d + dd * kv;
            }
            for (d, &qv) in dk[m * cr..(m + 1) * cr].iter_mut().zip(qu) {
                *d = *d + dd * qv;
            }
        }
    }
    let spatial = table.spatial_shape();
    let dv = untranspose(&dv, c, spatial)?;
    let dq = untranspose(&dq, cr, spatial)?;
    let dk = untranspose(&dk, cr, spatial)?;

    let (dh_q, dwq) = project_backward(&cache.input, &p.wq, &dq)?;
    let (dh_k, dwk) = project_backward(&cache.input, &p.wk, &dk)?;
    let (dh_v, dwv) = project_backward(&cache.input, &p.wv, &dv)?;
    let mut dh = d_out.clone();
    dh.add_assign(&dh_q)?;
    dh.add_assign(&dh_k)?;
    dh.add_assign(&dh_v)?;
    Ok((
        dh,
        CCAttentionParams {
            wq: dwq,
            wk: dwk,
            wv: dwv,
        },
    ))
}

/// Reverse pass through every loop; shared-weight gradients are summed.
pub fn backward_recurrent<T: Scalar>(
    cache: &ForwardCache<T>,
    d_out: &Tensor<T>,
) -> Result<(Tensor<T>, CCAttentionParams<T>)> {
    if cache.loops.is_empty() {
        return Err(Error::State("forward cache holds no loops".into()));
    }
    let mut grads = cache.params.zeros_like();
    let mut g = d_out.clone();
    for lc in cache.loops.iter().rev() {
        let (dh, dp) = backward_once(lc, &cache.params, &g)?;
        grads.accumulate(&dp);
        g = dh;
    }
    Ok((g, grads))
}

/// Attention mass that position `u` draws from every source position after
/// `1..=loops` passes, with the projections read as identities: entry `k - 1`
/// composes the attention maps of loops `k, k-1, ..., 1`. Each vector sums
/// to one.
pub fn attention_mass<T: Scalar>(cache: &ForwardCache<T>, u: usize) -> Result<Vec<Vec<T>>> {
    let first = cache
        .loops
        .first()
        .ok_or_else(|| Error::State("forward cache holds no loops".into()))?;
    let n = first.table.positions();
    if u >= n {
        return Err(Error::Index {
            what: "position",
            index: u,
            len: n,
        });
    }
    let mut out = Vec::with_capacity(cache.loops.len());
    for k in 1..=cache.loops.len() {
        let mut mass = vec![T::zero(); n];
        mass[u] = T::one();
        for lc in cache.loops[..k].iter().rev() {
            let a = lc.attention.values().data();
            let mut next = vec![T::zero(); n];
            for (v, &m) in mass.iter().enumerate() {
                if m == T::zero() {
                    continue;
                }
                for (i, &t) in lc.table.members(v).iter().enumerate() {
                    next[t] = next[t] + m * a[i * n + v];
                }
            }
            mass = next;
        }
        out.push(mass);
    }
    Ok(out)
}
