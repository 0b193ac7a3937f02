//! Analytic adapter gradients against central finite differences.

use std::sync::Arc;

use flexlora::adapter::LoraAdapter;
use flexlora::cli::verify::gradient_check;
use flexlora::lowrank::Matrix;
use flexlora::model::{Batch, FrozenBase, ToyModel};

fn main() -> flexlora::Result<()> {
    let mut rng = flexlora::seed::rng(3, &[]);
    let dims = [8, 12, 6];
    let base = FrozenBase::new(vec![
        Matrix::gaussian(dims[1], dims[0], 0.3, &mut rng),
        Matrix::gaussian(dims[2], dims[1], 0.3, &mut rng),
    ])?;
    let adapters = (0..2)
        .map(|l| {
            LoraAdapter::new(
                Matrix::gaussian(dims[l + 1], 3, 0.3, &mut rng),
                Matrix::gaussian(3, dims[l], 0.3, &mut rng),
                2.0,
            )
            .map(Some)
        })
        .collect::<flexlora::Result<Vec<_>>>()?;
    let model = ToyModel::new(Arc::new(base), adapters)?;
    let batch = Batch::new(
        Matrix::gaussian(10, dims[0], 1.0, &mut rng),
        Matrix::gaussian(10, dims[2], 1.0, &mut rng),
    )?;
    for l2 in [0.0, 0.01] {
        println!("l2 {l2}: max relative error {:.2e}", gradient_check(&model, &batch, l2)?);
    }
    Ok(())
}
