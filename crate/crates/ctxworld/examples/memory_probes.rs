//! Analysis probes on a trained multi-environment model: how sensitive its
//! predictions are to losing a ground-truth input, and how well its memory
//! states separate environments.

use ctxworld::cartpole::{build_dataset, DatasetSpec, ScopeSpec};
use ctxworld::gsa::{train, GsaConfig, GsaModel, Sequence, TrainConfig};
use ctxworld::harness::experiments::DimStats;
use ctxworld::harness::probes::{predictive_coding_probe, silhouette_probe};

fn main() -> ctxworld::Result<()> {
    let spec = DatasetSpec {
        scope: ScopeSpec::Scope1Plus2,
        num_envs: 64,
        traj_per_env: 4,
        length: 200,
    };
    let dataset = build_dataset(&spec, 11)?;
    let stats = DimStats::from_trajectories(&dataset.trajectories)?;
    let sequences: Vec<Sequence> =
        dataset.trajectories.iter().map(|t| stats.standardize(t)).collect();

    let mut model = GsaModel::new(
        GsaConfig { hidden: 32, layers: 2, heads: 2, mem_len: 16, ..GsaConfig::desk_default() },
        13,
    )?;
    let cfg = TrainConfig {
        epochs: 6,
        batch_size: 16,
        lr_init: 3e-3,
        lr_final: 3e-4,
        adamw: Default::default(),
        mask_prob: 0.1,
        loss: Default::default(),
        seed: 15,
        verbose: true,
    };
    train(&mut model, &sequences, &cfg)?;

    // Fresh evaluation trajectories from held-out environments.
    let eval = build_dataset(
        &DatasetSpec { num_envs: 8, traj_per_env: 3, ..spec.clone() },
        90,
    )?;
    let eval_seqs: Vec<Sequence> =
        eval.trajectories.iter().map(|t| stats.standardize(t)).collect();

    let pc = predictive_coding_probe(&model, &eval_seqs, &[10, 100, 180], &[1, 8], 500, 99)?;
    println!(
        "prediction-error sensitivity: rho = {:.3} (95% CI [{:.3}, {:.3}], {} points)",
        pc.rho,
        pc.rho_ci_low,
        pc.rho_ci_high,
        pc.points.len()
    );
    for (k, rho) in &pc.rho_per_k {
        println!("  k={k}: rho = {rho:.3}");
    }

    let env_of: Vec<usize> = (0..eval_seqs.len()).map(|i| eval.env_of(i)).collect();
    let (sil, _dump) = silhouette_probe(&model, &eval_seqs, &env_of, &[0, 1], 10)?;
    println!("memory-state silhouette by layer ({} points/layer):", sil.points_per_layer);
    for (layer, score) in &sil.per_layer {
        println!("  layer {layer}: {score:.3}");
    }
    Ok(())
}
