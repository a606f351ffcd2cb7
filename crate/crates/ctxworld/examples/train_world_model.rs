//! Train a small world model on single-environment cart-pole data and watch
//! the in-context error sweep.

use ctxworld::cartpole::{build_dataset, DatasetSpec, ScopeSpec};
use ctxworld::gsa::eval::evaluate_icl;
use ctxworld::gsa::{train, GsaConfig, GsaModel, Sequence, TrainConfig};
use ctxworld::harness::experiments::DimStats;

fn main() -> ctxworld::Result<()> {
    let spec = DatasetSpec {
        scope: ScopeSpec::Original,
        num_envs: 1,
        traj_per_env: 256,
        length: 200,
    };
    let dataset = build_dataset(&spec, 5)?;
    let stats = DimStats::from_trajectories(&dataset.trajectories)?;
    let sequences: Vec<Sequence> =
        dataset.trajectories.iter().map(|t| stats.standardize(t)).collect();

    let mut model = GsaModel::new(
        GsaConfig { hidden: 32, layers: 2, heads: 2, mem_len: 16, ..GsaConfig::desk_default() },
        7,
    )?;
    let cfg = TrainConfig {
        epochs: 6,
        batch_size: 16,
        lr_init: 3e-3,
        lr_final: 3e-4,
        adamw: Default::default(),
        mask_prob: 0.1,
        loss: Default::default(),
        seed: 9,
        verbose: true,
    };
    let curve = train(&mut model, &sequences, &cfg)?;
    println!(
        "loss: {:.5} -> {:.5} over {} epochs",
        curve.first().unwrap().loss,
        curve.last().unwrap().loss,
        curve.len()
    );

    // Fresh trajectories from the same environment.
    let eval = build_dataset(&spec, 6)?;
    let eval_seqs: Vec<Sequence> =
        eval.trajectories.iter().take(32).map(|t| stats.standardize(t)).collect();
    let table = evaluate_icl(&model, &eval_seqs, &[1, 10, 50, 100], &[1, 4, 8])?;
    println!("{:>6} {:>4} {:>12}", "T", "k", "std_mse");
    for cell in &table.cells {
        println!("{:>6} {:>4} {:>12.6}", cell.t, cell.k, cell.mse);
    }
    Ok(())
}
