//! Which inputs reach which outputs after one and two recurrent loops.

use ccnet::cca2d::rcca_forward;
use ccnet::oracles::{influence_scan, INFLUENCE_THRESHOLD};
use ccnet::{CCAttentionParams, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> ccnet::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (h, w) = (4, 5);
    let p = CCAttentionParams::random(4, 2, &mut rng)?;
    let x = Tensor::randn(&[4, h, w], 1.0, &mut rng)?;
    for loops in 1..=2 {
        let pattern = influence_scan(|t| rcca_forward(t, &p, loops).unwrap().0, &x, INFLUENCE_THRESHOLD);
        println!("R={loops}: density {}", pattern.density());
        // inputs that influence output (0,0)
        for r in 0..h {
            let row: String = (0..w)
                .map(|c| if pattern.get(0, r * w + c) { '#' } else { '.' })
                .collect();
            println!("  {row}");
        }
    }
    Ok(())
}
