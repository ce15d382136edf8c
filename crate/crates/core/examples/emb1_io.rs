//! EMB1 binary tensor files: f64 round trips bit-exactly, f32 quantizes.
//!
//!     cargo run --example emb1_io

use softpair::tensor_io::{self, Dtype};
use softpair::Matrix;

fn main() -> softpair::Result<()> {
    let m = Matrix::from_rows(&[vec![0.1, -2.5, 1e-300], vec![std::f64::consts::PI, 7.0, -0.0]])?;
    for dtype in [Dtype::F64, Dtype::F32] {
        let bytes = tensor_io::encode(&m, dtype);
        let (back, tag) = tensor_io::decode(&bytes)?;
        let exact = back.data().iter().zip(m.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        println!(
            "{tag:?}: {} bytes ({} header), bit-exact {exact}, max abs diff {:.3e}",
            bytes.len(),
            tensor_io::HEADER_LEN,
            back.max_abs_diff(&m)?
        );
    }
    // truncated payloads are rejected
    let bytes = tensor_io::encode(&m, Dtype::F64);
    match tensor_io::decode(&bytes[..bytes.len() - 3]) {
        Ok(_) => println!("unexpected: truncated file decoded"),
        Err(e) => println!("truncated file: {e}"),
    }
    Ok(())
}
