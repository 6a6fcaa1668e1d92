//! Writes a tensor in the CCT1 container and reads it back.

use ccnet::io::{load_tensor, save_tensor, StoredTensor};
use ccnet::Tensor;

fn main() -> ccnet::Result<()> {
    let x = Tensor::from_fn(&[3, 4, 5], |i| (i as f64).sin())?;
    let path = std::env::temp_dir().join("ccnet_example.cct");
    save_tensor(&x, &path)?;
    println!("wrote {} ({} bytes)", path.display(), std::fs::metadata(&path)?.len());
    match load_tensor(&path)? {
        StoredTensor::F64(y) => println!("read back {:?}, identical: {}", y.shape(), y == x),
        StoredTensor::F32(y) => println!("unexpected single precision {:?}", y.shape()),
    }
    std::fs::remove_file(&path)?;
    Ok(())
}
