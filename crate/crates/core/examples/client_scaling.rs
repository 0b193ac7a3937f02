//! Zero-shot loss against training pool size, with the scaling-law fit.

use flexlora::federation::{client_scaling_experiment, FedConfig};
use flexlora::taskgen::{gen_world, WorldConfig};

fn main() -> flexlora::Result<()> {
    let world = gen_world(&WorldConfig {
        num_archetypes: 30,
        samples_min: 10,
        samples_max: 20,
        ..WorldConfig::default()
    })?;
    let base = FedConfig {
        participants_per_round: Some(10),
        max_rounds: 60,
        early_stop_patience: 0,
        ..FedConfig::default()
    };
    let res = client_scaling_experiment(&world, &base, &[10, 50, 100], &[0])?;
    for (p, l) in res.pool_sizes.iter().zip(&res.mean_losses) {
        println!("pool {p:3}: zero-shot {l:.4}");
    }
    println!("non-increasing: {}", res.is_non_increasing());
    if let Some(f) = &res.fit {
        println!("fit A1 {:.3} A2 {:.3} A3 {:.3} rmse {:.4}", f.a1, f.a2, f.a3, f.rmse);
    }
    Ok(())
}
