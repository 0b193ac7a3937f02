//! The three server-side strategies on the same three client updates.

use flexlora::adapter::{compose, LoraAdapter};
use flexlora::aggregate::{aggregate_flexlora, aggregate_hetlora, aggregate_naive, redistribute, ClientId, Contribution};
use flexlora::lowrank::{frobenius_norm, Matrix};

fn client(id: u32, rank: usize, samples: usize) -> Contribution {
    let mut rng = flexlora::seed::rng(id as u64, &[]);
    let adapter = LoraAdapter::new(
        Matrix::gaussian(16, rank, 1.0, &mut rng),
        Matrix::gaussian(rank, 16, 1.0, &mut rng),
        1.0,
    )
    .expect("consistent shapes");
    Contribution {
        client_id: ClientId(id),
        adapters: vec![adapter],
        sample_count: samples,
    }
}

fn main() -> flexlora::Result<()> {
    let mixed = [client(0, 2, 40), client(1, 4, 80), client(2, 8, 120)];
    let flex = aggregate_flexlora(&mixed)?;
    println!("flexlora global delta norm {:.4}", frobenius_norm(&flex.layers[0]));
    let handed_out = redistribute(&flex, &[vec![2], vec![4], vec![8]], 1.0)?;
    for (c, a) in mixed.iter().zip(&handed_out) {
        let err = frobenius_norm(&flex.layers[0].sub(&compose(&a[0]))?);
        println!("  client {} gets rank {} (error {err:.4})", c.client_id, a[0].rank());
    }

    let het = aggregate_hetlora(&mixed)?;
    println!("hetlora global rank {} delta norm {:.4}", het[0].rank(), frobenius_norm(&compose(&het[0])));

    match aggregate_naive(&mixed) {
        Ok(_) => println!("naive accepted mixed ranks"),
        Err(e) => println!("naive: {e}"),
    }
    let same = [client(0, 4, 40), client(1, 4, 80)];
    let naive = aggregate_naive(&same)?;
    println!("naive on equal ranks: delta norm {:.4}", frobenius_norm(&compose(&naive[0])));
    Ok(())
}
