//! Monte-Carlo check of the finite-sample error bounds on one family.

use ctxworld::bounds::{verify_bound_montecarlo, BoundConfig, Predictor, Target, fit_decay_slope};
use ctxworld::tabular::{sample_env_family, ContextMode, EnvFamilyConfig, EnvKind};

fn main() -> ctxworld::Result<()> {
    let family = sample_env_family(&EnvFamilyConfig {
        count: 4,
        dims: (6, 3, 6),
        concentration: 1.0,
        determinism_fraction: 0.0,
        kind: EnvKind::Mdp,
        seed: 21,
    })?;
    let config = BoundConfig {
        delta: 0.1,
        t_grid: (6..=14).map(|k| 1u64 << k).collect(),
        trials: 100,
        seed: 22,
        fit_samples: 100_000,
        fit_smoothing: 1.0,
            context_mode: ContextMode::UniformQuery,
    };
    let report = verify_bound_montecarlo(&family, &Target::Seen(0), &config)?;
    println!(
        "alpha = {:.3}, best_tv = {:.4}, worst_tv = {:.4}, el threshold T > {:.0}",
        report.alpha, report.best_tv, report.worst_tv, report.el_threshold
    );
    println!(
        "{:>7} {:>11} {:>11} {:>7} {:>11} {:>11} {:>10}",
        "T", "el_median", "el_bound", "valid", "er_median", "er_bound", "el_viol"
    );
    for s in &report.per_t {
        println!(
            "{:>7} {:>11.5} {:>11.5} {:>7} {:>11.5} {:>11.5} {:>10}",
            s.t,
            s.el_median_tv,
            s.el_bound,
            s.el_valid,
            s.er_median_tv,
            s.er_bound,
            if s.el_valid { format!("{:.3}", s.el_violation_rate) } else { "-".into() },
        );
    }
    let slope = fit_decay_slope(&report, Predictor::El, (256, 16384))?;
    println!("fitted log-log decay slope of the count estimator: {slope:.3}");
    Ok(())
}
