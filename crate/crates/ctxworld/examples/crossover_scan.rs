//! Where does in-context estimation overtake recognition?
//!
//! Sweeps training-set size and environment dimensions, reporting the first
//! context length at which the count estimator's median error drops below
//! the recognizer's, on held-out and on seen environments.

use ctxworld::bounds::{crossover_scan, CrossoverConfig};

fn main() -> ctxworld::Result<()> {
    let config = CrossoverConfig {
        n_envs_list: vec![1, 4, 16],
        dims_list: vec![(4, 2, 4), (6, 3, 6)],
        t_grid: (4..=14).map(|k| 1u64 << k).collect(),
        trials: 30,
        concentration: 1.0,
        seed: 31,
        fit_samples: 50_000,
        min_best_tv: 0.05,
    };
    let report = crossover_scan(&config)?;
    println!(
        "{:>7} {:>12} {:>10} {:>16} {:>16}",
        "n_envs", "dims", "best_tv", "crossover_unseen", "crossover_seen"
    );
    for cell in &report.cells {
        println!(
            "{:>7} {:>12} {:>10.4} {:>16} {:>16}",
            cell.n_envs,
            format!("{:?}", cell.dims),
            cell.best_tv_holdout,
            cell.crossover_t_unseen.map(|t| t.to_string()).unwrap_or_else(|| "none".into()),
            cell.crossover_t_seen.map(|t| t.to_string()).unwrap_or_else(|| "none".into()),
        );
    }
    Ok(())
}
