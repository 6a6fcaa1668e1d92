#![allow(dead_code)]

use ccnet::{CCAttentionParams, ProjectionWeights, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn params(c: usize, cr: usize, seed: u64) -> CCAttentionParams {
    CCAttentionParams::random(c, cr, &mut rng(seed)).unwrap()
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut rng(seed)).unwrap()
}

/// Parameters with the same shapes as `like`, read from `flat` in (q, k, v) order.
pub fn unflatten(like: &CCAttentionParams, flat: &[f64]) -> CCAttentionParams {
    let mut at = 0;
    let [wq, wk, wv] = like.parts().map(|w| {
        let n = w.out_channels() * w.in_channels();
        let p = ProjectionWeights::new(w.out_channels(), w.in_channels(), flat[at..at + n].to_vec()).unwrap();
        at += n;
        p
    });
    CCAttentionParams::new(wq, wk, wv).unwrap()
}
