//! Build a randomized cart-pole dataset and round-trip it through the binary
//! container.

use ctxworld::cartpole::{build_dataset, read_dataset, write_dataset, DatasetSpec, ScopeSpec};

fn main() -> ctxworld::Result<()> {
    let spec = DatasetSpec {
        scope: ScopeSpec::Scope1Plus2,
        num_envs: 8,
        traj_per_env: 16,
        length: 200,
    };
    let dataset = build_dataset(&spec, 123)?;
    println!(
        "built {} trajectories over {} environments ({} steps total)",
        dataset.trajectories.len(),
        dataset.envs.len(),
        spec.total_steps()
    );
    for (i, p) in dataset.envs.iter().take(3).enumerate() {
        println!("  env {i}: g={:.2} m_c={:.2} m_p={:.3} l={:.2}", p.g, p.m_c, p.m_p, p.l);
    }

    let path = std::env::temp_dir().join("ctxworld_dataset.bin");
    let mut buf = Vec::new();
    write_dataset(&dataset, &mut buf)?;
    std::fs::write(&path, &buf)?;
    let loaded = read_dataset(std::io::Cursor::new(std::fs::read(&path)?))?;
    println!(
        "container round-trip: {} bytes, {} trajectories, first noise level {:.3}",
        buf.len(),
        loaded.trajectories.len(),
        loaded.trajectories[0].noise_level
    );
    Ok(())
}
