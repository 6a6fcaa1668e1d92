//! Criss-cross attention over a T×H×W clip, and its reduction to the plane
//! case when T is 1.

use ccnet::cca2d::cca_forward;
use ccnet::cca3d::{cca3d_forward, rcca3d_forward};
use ccnet::{CCAttentionParams, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> ccnet::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p: CCAttentionParams = CCAttentionParams::random(6, 2, &mut rng)?;

    let clip = Tensor::randn(&[6, 4, 5, 5], 1.0, &mut rng)?;
    let (y, cache) = rcca3d_forward(&clip, &p, 3)?;
    println!(
        "clip {:?} -> {:?}, {} loops",
        clip.shape(),
        y.shape(),
        cache.loops.len()
    );
    println!(
        "neighbours per position: {}",
        cache.loops[0].attention.values().shape()[0]
    );

    let plane = Tensor::randn(&[6, 5, 5], 1.0, &mut rng)?;
    let single = Tensor::new(vec![6, 1, 5, 5], plane.data().to_vec())?;
    let a = cca3d_forward(&single, &p)?.0;
    let b = cca_forward(&plane, &p)?.0;
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    println!("T=1 against the plane: max difference {diff:e}");
    Ok(())
}
