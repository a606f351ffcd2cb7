//! Cross-format integration: the JSON/binary containers and the CSV report
//! surfaces, including the invariants that matter (losslessness, fixed
//! column orders, determinism of emitted bytes).

use proptest::prelude::*;

use ctxworld::cartpole::{build_dataset, read_dataset, write_dataset, DatasetSpec, ScopeSpec};
use ctxworld::estimators::{accumulate, ContextCounts};
use ctxworld::gsa::checkpoint::{load_checkpoint, save_checkpoint_full, RngState};
use ctxworld::gsa::{GsaConfig, GsaModel};
use ctxworld::harness::report::{read_rows_csv, write_rows_csv, ReportRow};
use ctxworld::tabular::{
    family_from_doc, family_to_doc, sample_context, sample_env_family, ContextMode, ContextRecord,
    DiscreteContext, EnvFamilyConfig, EnvKind,
};

#[test]
fn env_family_json_is_lossless() {
    for kind in [EnvKind::Mdp, EnvKind::Pomdp] {
        let dims = if kind == EnvKind::Mdp { (5, 2, 5) } else { (4, 2, 6) };
        let cfg = EnvFamilyConfig {
            count: 3,
            dims,
            concentration: 0.7,
            determinism_fraction: 0.3,
            kind,
            seed: 101,
        };
        let envs = sample_env_family(&cfg).unwrap();
        let json = serde_json::to_string(&family_to_doc(&cfg, &envs)).unwrap();
        let back = family_from_doc(&serde_json::from_str(&json).unwrap()).unwrap();
        for (a, b) in envs.iter().zip(&back) {
            assert_eq!(a.env_id, b.env_id);
            assert_eq!(a.transition, b.transition);
            assert_eq!(a.observation, b.observation);
        }
    }
}

#[test]
fn dataset_container_end_to_end() {
    let spec = DatasetSpec {
        scope: ScopeSpec::Scope1Plus2Excl1,
        num_envs: 3,
        traj_per_env: 4,
        length: 48,
    };
    let dataset = build_dataset(&spec, 77).unwrap();
    let mut bytes = Vec::new();
    write_dataset(&dataset, &mut bytes).unwrap();
    let loaded = read_dataset(bytes.as_slice()).unwrap();
    // Writer output is a pure function of the loaded content.
    let mut bytes2 = Vec::new();
    write_dataset(&loaded, &mut bytes2).unwrap();
    assert_eq!(bytes, bytes2);
    assert_eq!(loaded.envs.len(), 3);
    assert_eq!(loaded.trajectories.len(), 12);
    assert_eq!(loaded.trajectories[5].actions, dataset.trajectories[5].actions);
}

#[test]
fn checkpoint_container_end_to_end() {
    let model = GsaModel::new(
        GsaConfig { hidden: 16, layers: 2, heads: 2, mem_len: 4, ..GsaConfig::desk_default() },
        3,
    )
    .unwrap();
    let extra = serde_json::json!({
        "normalizer": { "mean": [0.0, 0.0, 0.0, 0.0], "std": [1.0, 1.0, 1.0, 1.0] }
    });
    let mut buf = Vec::new();
    save_checkpoint_full(&model, 42, RngState { seed: 9, word_pos: 7 }, Some(extra), &mut buf)
        .unwrap();
    let (loaded, meta) = load_checkpoint(buf.as_slice()).unwrap();
    assert_eq!(meta.step_count, 42);
    assert!(meta.extra.is_some());
    // f32 storage round-trips exactly once re-quantized.
    for (a, b) in model.params.flatten().iter().zip(loaded.params.flatten()) {
        for (x, y) in a.data.iter().zip(&b.data) {
            assert_eq!((*x as f32) as f64, *y);
        }
    }
}

#[test]
fn report_rows_round_trip_fixed_columns() {
    let rows: Vec<ReportRow> = (0..20)
        .map(|i| ReportRow {
            experiment_id: "e1".into(),
            model_id: format!("m{}", i % 3),
            t: 1 << (i % 8),
            k: if i % 2 == 0 { Some(i / 2) } else { None },
            metric: "std_mse".into(),
            value: (i as f64 + 0.5) / 7.0,
            trial: i,
            seen: match i % 3 {
                0 => Some(true),
                1 => Some(false),
                _ => None,
            },
        })
        .collect();
    let mut buf = Vec::new();
    write_rows_csv(&rows, &mut buf).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert!(text.starts_with("experiment_id,model_id,T,k,metric,value,trial,seen\n"));
    let back = read_rows_csv(buf.as_slice()).unwrap();
    assert_eq!(rows, back);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Any generated family keeps every row on the probability simplex.
    #[test]
    fn prop_family_rows_are_simplex(
        count in 1usize..4,
        s in 1usize..6,
        a in 1usize..4,
        conc in 0.05f64..5.0,
        det in 0.0f64..1.0,
        seed in any::<u64>(),
    ) {
        let cfg = EnvFamilyConfig {
            count,
            dims: (s, a, s),
            concentration: conc,
            determinism_fraction: det,
            kind: EnvKind::Mdp,
            seed,
        };
        let envs = sample_env_family(&cfg).unwrap();
        for env in &envs {
            env.validate().unwrap();
        }
    }

    /// Streaming accumulation equals batch accumulation for any split point.
    #[test]
    fn prop_streaming_equals_batch(
        records in proptest::collection::vec((0usize..4, 0usize..3, 0usize..5), 0..50),
        split in 0usize..50,
    ) {
        let ctx = |r: &[(usize, usize, usize)]| DiscreteContext {
            records: r
                .iter()
                .map(|&(state, action, obs_next)| ContextRecord { state, action, obs_next })
                .collect(),
            mode: ContextMode::UniformQuery,
        };
        let split = split.min(records.len());
        let mut streamed = ContextCounts::new(4, 3, 5);
        accumulate(&mut streamed, &ctx(&records[..split])).unwrap();
        accumulate(&mut streamed, &ctx(&records[split..])).unwrap();
        let mut batch = ContextCounts::new(4, 3, 5);
        accumulate(&mut batch, &ctx(&records)).unwrap();
        prop_assert_eq!(streamed, batch);
    }

    /// Sampled contexts always stay within the environment's index ranges
    /// and the dataset CSV float formatting survives a parse round trip.
    #[test]
    fn prop_context_indices_in_range(t in 0usize..300, seed in any::<u64>()) {
        let cfg = EnvFamilyConfig {
            count: 1,
            dims: (5, 3, 5),
            concentration: 1.0,
            determinism_fraction: 0.2,
            kind: EnvKind::Mdp,
            seed,
        };
        let env = &sample_env_family(&cfg).unwrap()[0];
        let mut r = ctxworld::rng::rng_from_seed(seed ^ 0xabc);
        for mode in [ContextMode::UniformQuery, ContextMode::Rollout] {
            let ctx = sample_context(env, t, mode, &mut r).unwrap();
            prop_assert_eq!(ctx.len(), t);
            for rec in &ctx.records {
                prop_assert!(rec.state < 5 && rec.action < 3 && rec.obs_next < 5);
            }
        }
    }

    /// Shortest round-trip float formatting parses back exactly.
    #[test]
    fn prop_float_format_round_trips(x in any::<f64>().prop_filter("finite", |v| v.is_finite())) {
        let s = ctxworld::bounds::format_float(x);
        let back: f64 = s.parse().unwrap();
        prop_assert_eq!(x.to_bits(), back.to_bits());
    }
}
