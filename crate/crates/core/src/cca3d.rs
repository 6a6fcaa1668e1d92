//! Criss-cross attention on `C × T × H × W` volumes.
//!
//! The set of `u = (t, x, y)` is the union of the three axis-aligned lines
//! through it: `T` temporal entries (u itself at `i = t`), then the `H - 1`
//! other entries of its column, then the `W - 1` other entries of its row.

use std::sync::Arc;

use crate::attention::{self, CCAttentionParams, CrissCrossLayout, ForwardCache, NeighborTable};
use crate::cca2d::check_channels;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grid3D {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl Grid3D {
    pub fn new(t: usize, h: usize, w: usize) -> Result<Self> {
        if t == 0 || h == 0 || w == 0 {
            return Err(Error::InvalidShape {
                shape: vec![t, h, w],
                reason: "volume extents must be positive".into(),
            });
        }
        Ok(Self { t, h, w })
    }

    fn of(x: &Tensor<impl Scalar>) -> Result<Self> {
        if x.rank() != 4 {
            return Err(Error::InvalidShape {
                shape: x.shape().to_vec(),
                reason: "expected a C×T×H×W volume".into(),
            });
        }
        Self::new(x.shape()[1], x.shape()[2], x.shape()[3])
    }

    pub fn table(&self) -> Arc<NeighborTable> {
        Arc::new(NeighborTable::build(self))
    }
}

fn skip(j: usize, at: usize) -> usize {
    if j < at {
        j
    } else {
        j + 1
    }
}

fn member_3d(u: (usize, usize, usize), i: usize, t: usize, h: usize) -> (usize, usize, usize) {
    let (ut, ux, uy) = u;
    if i < t {
        (i, ux, uy)
    } else if i < t + h - 1 {
        (ut, skip(i - t, ux), uy)
    } else {
        (ut, ux, skip(i - t - (h - 1), uy))
    }
}

impl CrissCrossLayout for Grid3D {
    fn spatial_shape(&self) -> Vec<usize> {
        vec![self.t, self.h, self.w]
    }

    fn set_size(&self) -> usize {
        self.t + self.h + self.w - 2
    }

    fn member(&self, u: usize, i: usize) -> usize {
        let plane = self.h * self.w;
        let coords = (u / plane, (u % plane) / self.w, u % self.w);
        let (a, b, c) = member_3d(coords, i, self.t, self.h);
        a * plane + b * self.w + c
    }
}

pub fn crisscross_index_map_3d(
    u: (usize, usize, usize),
    i: usize,
    t: usize,
    h: usize,
    w: usize,
) -> Result<(usize, usize, usize)> {
    for (what, index, len) in [("frame", u.0, t), ("row", u.1, h), ("column", u.2, w)] {
        if index >= len {
            return Err(Error::Index { what, index, len });
        }
    }
    let len = t + h + w - 2;
    if i >= len {
        return Err(Error::Index {
            what: "criss-cross",
            index: i,
            len,
        });
    }
    Ok(member_3d(u, i, t, h))
}

pub fn cca3d_forward<T: Scalar>(h: &Tensor<T>, p: &CCAttentionParams<T>) -> Result<(Tensor<T>, ForwardCache<T>)> {
    rcca3d_forward(h, p, 1)
}

pub fn rcca3d_forward<T: Scalar>(
    x: &Tensor<T>,
    p: &CCAttentionParams<T>,
    loops: usize,
) -> Result<(Tensor<T>, ForwardCache<T>)> {
    check_channels(x, p)?;
    attention::forward_recurrent(x, p, loops, &Grid3D::of(x)?.table())
}

pub fn cca3d_backward<T: Scalar>(
    cache: &ForwardCache<T>,
    d_out: &Tensor<T>,
) -> Result<(Tensor<T>, CCAttentionParams<T>)> {
    crate::cca2d::cca_backward(cache, d_out)
}

pub fn rcca3d_backward<T: Scalar>(
    cache: &ForwardCache<T>,
    d_out: &Tensor<T>,
) -> Result<(Tensor<T>, CCAttentionParams<T>)> {
    attention::backward_recurrent(cache, d_out)
}
