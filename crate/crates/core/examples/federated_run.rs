//! Round-by-round FlexLoRA training under a uniform resource mix.

use flexlora::federation::{Federation, FedConfig};
use flexlora::taskgen::{gen_world, WorldConfig};

fn main() -> flexlora::Result<()> {
    let world = gen_world(&WorldConfig::default())?;
    let cfg = FedConfig {
        max_rounds: 15,
        ..FedConfig::default()
    };
    let mut fed = Federation::new(&world, cfg.clone())?;
    println!("threshold {:.4}, {} participants per round", fed.loss_threshold()?, fed.participants_per_round());
    for _ in 0..cfg.max_rounds {
        let r = fed.run_round()?;
        let worst_phi = r.phi.iter().map(|p| p.measured).fold(0.0, f64::max);
        println!(
            "round {:2}: train {:.4} val {:.4} zero-shot {:.4} max phi {:.4} top sigma {:.3}",
            r.round, r.train_loss, r.val_loss, r.zeroshot_loss, worst_phi, r.spectra[0][0]
        );
    }
    println!("held-out zero-shot {:.4}", fed.heldout_zeroshot_loss()?);
    Ok(())
}
