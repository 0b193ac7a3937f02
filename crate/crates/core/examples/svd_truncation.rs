//! Best rank-r approximations of a random matrix and their error ratios.

use flexlora::lowrank::{error_ratio_curve, svd, truncation_error, Matrix};

fn main() -> flexlora::Result<()> {
    let mut rng = flexlora::seed::rng(7, &[]);
    let w = Matrix::gaussian(24, 16, 1.0, &mut rng);
    let f = svd(&w)?;
    println!("jacobi sweeps: {}", f.sweeps);
    println!("singular values: {:.3?}", f.sigma);
    for (r, ratio) in error_ratio_curve(&f).iter().enumerate().step_by(3) {
        println!(
            "rank {:2}: ||W - W_r||_F = {:.4}  ratio {:.4}",
            r + 1,
            truncation_error(&f, r + 1)?,
            ratio
        );
    }
    Ok(())
}
