//! Criss-cross attention on `C × H × W` feature maps.
//!
//! The criss-cross set of `u = (row, col)` is ordered column first: indices
//! `0..H` walk down u's column (u itself sits at `i = row`), indices
//! `H..H+W-1` walk u's row left to right with column `col` skipped.

use std::sync::Arc;

use crate::attention::{self, AttentionMap, CCAttentionParams, CrissCrossLayout, ForwardCache, NeighborTable};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grid2D {
    pub h: usize,
    pub w: usize,
}

impl Grid2D {
    pub fn new(h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::InvalidShape {
                shape: vec![h, w],
                reason: "grid extents must be positive".into(),
            });
        }
        Ok(Self { h, w })
    }

    fn of(x: &Tensor<impl Scalar>) -> Result<Self> {
        if x.rank() != 3 {
            return Err(Error::InvalidShape {
                shape: x.shape().to_vec(),
                reason: "expected a C×H×W feature map".into(),
            });
        }
        Self::new(x.shape()[1], x.shape()[2])
    }

    pub fn table(&self) -> Arc<NeighborTable> {
        Arc::new(NeighborTable::build(self))
    }
}

impl CrissCrossLayout for Grid2D {
    fn spatial_shape(&self) -> Vec<usize> {
        vec![self.h, self.w]
    }

    fn set_size(&self) -> usize {
        self.h + self.w - 1
    }

    fn member(&self, u: usize, i: usize) -> usize {
        let (row, col) = (u / self.w, u % self.w);
        let (r, c) = member_2d(row, col, i, self.h);
        r * self.w + c
    }
}

fn member_2d(row: usize, col: usize, i: usize, h: usize) -> (usize, usize) {
    if i < h {
        (i, col)
    } else {
        let j = i - h;
        (row, if j < col { j } else { j + 1 })
    }
}

/// Position of the `i`-th member of the criss-cross set of `u` on an `h × w` grid.
pub fn crisscross_index_map(u: (usize, usize), i: usize, h: usize, w: usize) -> Result<(usize, usize)> {
    if u.0 >= h {
        return Err(Error::Index {
            what: "row",
            index: u.0,
            len: h,
        });
    }
    if u.1 >= w {
        return Err(Error::Index {
            what: "column",
            index: u.1,
            len: w,
        });
    }
    let len = h + w - 1;
    if i >= len {
        return Err(Error::Index {
            what: "criss-cross",
            index: i,
            len,
        });
    }
    Ok(member_2d(u.0, u.1, i, h))
}

/// Raw scores, shape `(H+W-1) × H × W`.
pub fn affinity2d<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>) -> Result<Tensor<T>> {
    let grid = Grid2D::of(q)?;
    attention::affinity(q, k, &NeighborTable::build(&grid))
}

/// Weighted sum over the criss-cross set plus the residual `h`.
pub fn aggregate2d<T: Scalar>(a: &AttentionMap<T>, v: &Tensor<T>, h: &Tensor<T>) -> Result<Tensor<T>> {
    let grid = Grid2D::of(v)?;
    attention::aggregate(a, v, h, &NeighborTable::build(&grid))
}

pub fn cca_forward<T: Scalar>(h: &Tensor<T>, p: &CCAttentionParams<T>) -> Result<(Tensor<T>, ForwardCache<T>)> {
    rcca_forward(h, p, 1)
}

pub fn rcca_forward<T: Scalar>(
    x: &Tensor<T>,
    p: &CCAttentionParams<T>,
    loops: usize,
) -> Result<(Tensor<T>, ForwardCache<T>)> {
    check_channels(x, p)?;
    attention::forward_recurrent(x, p, loops, &Grid2D::of(x)?.table())
}

pub fn cca_backward<T: Scalar>(
    cache: &ForwardCache<T>,
    d_out: &Tensor<T>,
) -> Result<(Tensor<T>, CCAttentionParams<T>)> {
    if cache.loops.len() != 1 {
        return Err(Error::State(format!(
            "single-pass backward given a cache with {} loops",
            cache.loops.len()
        )));
    }
    attention::backward_recurrent(cache, d_out)
}

pub fn rcca_backward<T: Scalar>(
    cache: &ForwardCache<T>,
    d_out: &Tensor<T>,
) -> Result<(Tensor<T>, CCAttentionParams<T>)> {
    attention::backward_recurrent(cache, d_out)
}

pub(crate) fn check_channels<T: Scalar>(x: &Tensor<T>, p: &CCAttentionParams<T>) -> Result<()> {
    if x.channels() != p.channels() {
        return Err(Error::ChannelMismatch {
            context: "criss-cross attention input channels",
            expected: p.channels(),
            found: x.channels(),
        });
    }
    Ok(())
}

/// Shape of a recurrent criss-cross block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RCCAConfig {
    pub loops: usize,
    pub channels: usize,
    pub reduced_channels: usize,
}

impl RCCAConfig {
    pub fn new(loops: usize, channels: usize, reduced_channels: usize) -> Result<Self> {
        if loops == 0 {
            return Err(Error::Config("loops must be at least 1".into()));
        }
        if reduced_channels == 0 || reduced_channels >= channels {
            return Err(Error::Config(format!(
                "reduced channels {reduced_channels} must be in 1..{channels}"
            )));
        }
        Ok(Self {
            loops,
            channels,
            reduced_channels,
        })
    }
}
