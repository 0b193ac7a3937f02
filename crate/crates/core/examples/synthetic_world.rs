//! A synthetic non-IID world: teachers, client assignments and datasets.

use flexlora::taskgen::{gen_world, Assignment, TaskMode, WorldConfig};

fn main() -> flexlora::Result<()> {
    for scale in [0.0, 0.5, 1.0] {
        let world = gen_world(&WorldConfig {
            specific_scale: scale,
            ..WorldConfig::default()
        })?;
        println!(
            "specific_scale {scale}: mean pairwise teacher distance {:.3}",
            world.mean_pairwise_teacher_distance()
        );
    }

    let world = gen_world(&WorldConfig {
        mode: TaskMode::Mixture,
        num_clients: 6,
        num_archetypes: 3,
        ..WorldConfig::default()
    })?;
    println!("noise floor {:.4}", world.noise_floor());
    for c in &world.clients {
        let ds = flexlora::taskgen::gen_client_dataset(&world, c.id, c.sample_count)?;
        let mix = match &c.assignment {
            Assignment::Mixture(pi) => format!("{pi:.2?}"),
            Assignment::Archetype(t) => format!("archetype {t}"),
        };
        println!(
            "client {}: {} samples (train {} / val {} / test {}), {mix}",
            c.id,
            c.sample_count,
            ds.train.len(),
            ds.val.len(),
            ds.test.len()
        );
    }
    Ok(())
}
