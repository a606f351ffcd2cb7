//! The cart-pole comparison: equal-budget datasets with 1, 4, and many
//! environments, one world model trained per dataset, and the in-context
//! error sweep over seen and unseen environments.
//!
//! ```bash
//! cargo run --release --example icl_emergence -- [budget] [many_envs] [epochs] [hidden] [seed]
//! ```

use ctxworld::gsa::GsaConfig;
use ctxworld::harness::experiments::{cartpole_icl_experiment, CartpoleIclConfig, TrainParams};

fn arg(n: usize, default: usize) -> usize {
    std::env::args().nth(n).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() -> ctxworld::Result<()> {
    let budget = arg(1, 1024);
    let many_envs = arg(2, 256);
    let epochs = arg(3, 6);
    let hidden = arg(4, 32);
    let seed = arg(5, 17) as u64;

    let config = CartpoleIclConfig {
        seed,
        length: 200,
        budget_trajectories: budget,
        many_envs,
        eval_envs: 64,
        eval_traj_per_env: 4,
        model: GsaConfig {
            hidden,
            layers: 2,
            heads: 4,
            mem_len: 32,
            chunk: 64,
            obs_dim: 4,
            num_actions: 2,
            train_sigma_head: true,
        },
        train: TrainParams {
            epochs,
            batch_size: 16,
            lr_init: 3e-3,
            lr_final: 1e-4,
            mask_prob: 0.1,
            lambda_kl: 1e-3,
            transition_weight: 1.0,
        },
        t_grid: vec![1, 10, 100],
        k_list: vec![1],
        early_fraction: 0.1,
    };

    eprintln!(
        "budget={budget} many_envs={many_envs} epochs={epochs} hidden={hidden} seed={seed}"
    );
    let start = std::time::Instant::now();
    let result = cartpole_icl_experiment(&config, "icl_emergence")?;
    eprintln!("experiment took {:.1}s", start.elapsed().as_secs_f64());

    println!("{}", serde_json::to_string_pretty(&result.summary)?);
    for (name, curve) in &result.curves {
        let first = curve.first().unwrap();
        let last = curve.last().unwrap();
        eprintln!(
            "{name:>16}: loss {:.5} -> {:.5} over {} epochs",
            first.loss,
            last.loss,
            curve.len()
        );
    }
    Ok(())
}
