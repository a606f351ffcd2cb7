//! Generate a family of random tabular MDPs and serialize it to JSON.

use ctxworld::tabular::{family_to_doc, sample_env_family, EnvFamilyConfig, EnvKind};

fn main() -> ctxworld::Result<()> {
    let config = EnvFamilyConfig {
        count: 4,
        dims: (6, 3, 6),
        concentration: 1.0,
        determinism_fraction: 0.25,
        kind: EnvKind::Mdp,
        seed: 42,
    };
    let envs = sample_env_family(&config)?;
    for env in &envs {
        let row = env.transition_row(0, 0);
        println!(
            "env {:016x}: first transition row {:?}",
            env.env_id,
            row.iter().map(|p| (p * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        );
    }
    let doc = family_to_doc(&config, &envs);
    let path = std::env::temp_dir().join("ctxworld_envs.json");
    std::fs::write(&path, serde_json::to_string_pretty(&doc)?)?;
    println!("serialized family to {}", path.display());
    Ok(())
}
