//! One criss-cross attention pass on a small feature map, checked against
//! the scalar reference.

use ccnet::cca2d::{cca_forward, crisscross_index_map};
use ccnet::oracles::cca_naive;
use ccnet::{CCAttentionParams, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> ccnet::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (c, h, w) = (8, 5, 6);
    let x: Tensor = Tensor::randn(&[c, h, w], 1.0, &mut rng)?;
    let p = CCAttentionParams::random(c, c / 8, &mut rng)?;

    let (y, cache) = cca_forward(&x, &p)?;
    let deviation = y.max_rel_diff(&cca_naive(&x, &p)?)?;
    println!("output shape {:?}, deviation from reference {deviation:e}", y.shape());

    let a = &cache.loops[0].attention;
    let u = (2, 3);
    println!("attention of position {u:?} over its {} neighbours:", h + w - 1);
    for i in 0..h + w - 1 {
        let (r, col) = crisscross_index_map(u, i, h, w)?;
        println!("  ({r},{col}) {:.4}", a.values().get(&[i, u.0, u.1])?);
    }
    Ok(())
}
