//! Trains the synthetic segmentation head with and without the category
//! consistent loss on the same data and initialisation.

use ccnet::toytrain::{gen_toy, init_seed_for, train_toy, TrainConfig};

fn main() -> ccnet::Result<()> {
    let seed = 3;
    let task = gen_toy(seed, 4, 12, 12, 3)?;
    for use_ccl in [true, false] {
        let cfg = TrainConfig {
            use_ccl,
            ..TrainConfig::default()
        };
        let out = train_toy(&task, init_seed_for(seed), &cfg)?;
        let (first, last) = (out.first(), out.last());
        println!(
            "ccl {:<5} loss {:.3} -> {:.3}  acc {:.3} -> {:.3}  intra-class var {:.3} -> {:.3}  failed {:?}",
            use_ccl,
            first.total,
            last.total,
            first.pixel_acc,
            last.pixel_acc,
            first.intra_var,
            last.intra_var,
            out.failed_at
        );
    }
    Ok(())
}
