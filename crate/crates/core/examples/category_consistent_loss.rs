//! Category consistent loss on hand-made features: the distance functions,
//! the loss terms, and the gradient.

use ccnet::losses::{ccl_loss_with_grad, phi_dis, phi_var, CCLConfig, LabelMap, PhiVariant};
use ccnet::Tensor;

fn main() -> ccnet::Result<()> {
    let cfg = CCLConfig {
        reduced_channels: 2,
        ..CCLConfig::default()
    };
    let quadratic = CCLConfig {
        phi: PhiVariant::Quadratic,
        ..cfg
    };
    println!("d     phi_var  quadratic  phi_dis");
    for d in [0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 5.0] {
        println!(
            "{d:<5} {:<8.4} {:<10.4} {:.4}",
            phi_var(d, &cfg)?,
            phi_var(d, &quadratic)?,
            phi_dis(d, &cfg)?
        );
    }

    // two classes on a 2×4 map, second row ignored at one pixel
    let labels = LabelMap::new(2, 4, vec![0, 0, 1, 1, 0, 0, 1, 255])?;
    let x = Tensor::new(
        vec![2, 2, 4],
        vec![
            0.0, 0.3, 1.0, 1.4, -0.2, 0.1, 1.1, 9.0, 0.0, 0.2, 0.5, 0.4, 0.1, -0.1, 0.6, 9.0,
        ],
    )?;
    let (b, g) = ccl_loss_with_grad(&x, &labels, &cfg)?;
    println!(
        "\nl_var {:.4}  l_dis {:.4}  l_reg {:.4}  total {:.4}",
        b.l_var, b.l_dis, b.l_reg, b.total
    );
    for (id, mu) in &b.centers {
        println!("centre of class {id}: {mu:.3?}");
    }
    println!("gradient {:.3?}", g.data());
    Ok(())
}
