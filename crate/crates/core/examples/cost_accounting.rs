//! Rounds to threshold and cost multipliers for homogeneous and
//! heterogeneous resource mixes.

use flexlora::federation::{run_experiment, FedConfig, ResourceDistribution};
use flexlora::taskgen::{gen_world, WorldConfig};

fn main() -> flexlora::Result<()> {
    let world = gen_world(&WorldConfig::default())?;
    for dist in ["point_type1", "heavy_tail_light", "uniform"] {
        let cfg = FedConfig {
            distribution: ResourceDistribution::preset(dist)?,
            max_rounds: 40,
            early_stop_patience: 0,
            ..FedConfig::default()
        };
        let res = run_experiment(&world, &cfg)?;
        println!(
            "{dist:18} R {:>4}  Cost_R {:.3}x  Cost_all {}",
            res.rounds_to_threshold.map_or("-".into(), |r| r.to_string()),
            1.0 + res.mean_cost_per_round(),
            res.cost_to_threshold.map_or("-".into(), |c| format!("{c:.2}"))
        );
    }
    Ok(())
}
