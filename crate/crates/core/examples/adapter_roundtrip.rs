//! Composing a LoRA adapter, decomposing the delta at a smaller rank, and
//! checking that the loss equals the tail of the spectrum.

use flexlora::adapter::{compose, decompose, LoraAdapter};
use flexlora::lowrank::{frobenius_norm, svd, truncation_error, Matrix};

fn main() -> flexlora::Result<()> {
    let mut rng = flexlora::seed::rng(1, &[]);
    let up = Matrix::gaussian(32, 8, 1.0, &mut rng);
    let down = Matrix::gaussian(8, 32, 1.0, &mut rng);
    let adapter = LoraAdapter::new(up, down, 2.0)?;
    let delta = compose(&adapter);
    let f = svd(&delta)?;
    for r in [8, 4, 2, 1] {
        let smaller = decompose(&delta, r, 2.0)?;
        let residual = frobenius_norm(&delta.sub(&compose(&smaller))?);
        println!(
            "rank {r}: residual {residual:.6}  tail formula {:.6}  params {}",
            truncation_error(&f, r)?,
            smaller.param_count()
        );
    }
    Ok(())
}
