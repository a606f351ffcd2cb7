//! How the two in-context predictors improve with context length.
//!
//! A recognizer over stored environment models identifies the active one and
//! plateaus at its matching error; the count-based estimator keeps improving
//! like `T^-1/2` and eventually wins on held-out environments.

use ctxworld::bounds::fit_family_models;
use ctxworld::estimators::{
    accumulate, el_predict, er_identify, expected_tv, ContextCounts,
};
use ctxworld::rng;
use ctxworld::tabular::{sample_context, sample_env_family, ContextMode, EnvFamilyConfig, EnvKind};

fn main() -> ctxworld::Result<()> {
    let family_cfg = EnvFamilyConfig {
        count: 4,
        dims: (6, 3, 6),
        concentration: 1.0,
        determinism_fraction: 0.0,
        kind: EnvKind::Mdp,
        seed: 7,
    };
    let family = sample_env_family(&family_cfg)?;
    let models = fit_family_models(&family, 100_000, 1.0, 11)?;

    // A held-out environment from the same law.
    let holdout = sample_env_family(&EnvFamilyConfig { count: 1, seed: 99, ..family_cfg })?.remove(0);

    println!("{:>8} {:>12} {:>12} {:>12} {:>12}", "T", "el_seen", "er_seen", "el_unseen", "er_unseen");
    for k in 4..=14 {
        let t = 1usize << k;
        let mut cells = Vec::new();
        for (target, tag) in [(&family[0], 0u64), (&holdout, 1u64)] {
            let trials = 30;
            let (mut el_sum, mut er_sum) = (0.0, 0.0);
            for trial in 0..trials {
                let mut r = rng::rng_at(3, &[tag, k as u64, trial]);
                let ctx = sample_context(target, t, ContextMode::UniformQuery, &mut r)?;
                let mut counts = ContextCounts::for_env(target);
                accumulate(&mut counts, &ctx)?;
                el_sum += expected_tv(|s, a| el_predict(&counts, s, a, 0.0), target)?;
                let (pick, _) = er_identify(&models, &ctx)?;
                er_sum += expected_tv(|s, a| Ok(models[pick].row(s, a).to_vec()), target)?;
            }
            cells.push((el_sum / trials as f64, er_sum / trials as f64));
        }
        println!(
            "{:>8} {:>12.5} {:>12.5} {:>12.5} {:>12.5}",
            t, cells[0].0, cells[0].1, cells[1].0, cells[1].1
        );
    }
    Ok(())
}
