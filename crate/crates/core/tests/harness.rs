use lorafuse::harness::{
    default_shapes, fusion_config, gen_families, gen_tasks, task_losses, weight_moments, write_experiment_csv,
    HarnessSettings, Preset, World,
};
use lorafuse::pipeline::fuse_sets;
use lorafuse::surrogate::mse;

#[test]
fn experts_specialize_on_their_own_task() {
    let mut world = World::new(0, HarnessSettings::default()).unwrap();
    let n_tasks = world.settings.tasks;
    for family in 0..world.families.len() {
        for task in 0..n_tasks {
            let (adapter, report) = world.expert(family, &[task]).unwrap();
            assert!(report.converged, "expert {family}/{task} did not converge: {report:?}");
            assert!(adapter.pairs.values().all(|p| p.rank() == 8));
            let (base, own) = task_losses(&world, family, &adapter, task).unwrap();
            assert!(own < 0.1 * base, "family {family} task {task}: own {own} vs initial {base}");
            for other in (0..n_tasks).filter(|&k| k != task) {
                let (base, foreign) = task_losses(&world, family, &adapter, other).unwrap();
                assert!(foreign >= 0.5 * base, "family {family} task {task} on {other}: {foreign} vs {base}");
            }
        }
    }
}

#[test]
fn families_are_deterministic_and_heterogeneous() {
    let st = HarnessSettings::default();
    let a = gen_families(3, &default_shapes(), &st).unwrap();
    let b = gen_families(3, &default_shapes(), &st).unwrap();
    let c = gen_families(4, &default_shapes(), &st).unwrap();
    for ((x, y), z) in a.iter().zip(&b).zip(&c) {
        assert_eq!(x.base, y.base);
        assert_eq!(x.geometry, y.geometry);
        assert_ne!(x.base, z.base);
    }
    let shapes: std::collections::BTreeSet<(usize, usize)> = a.iter().map(|f| (f.depth, f.width())).collect();
    assert_eq!(shapes.len(), a.len());
    assert_eq!(gen_tasks(3, &st), gen_tasks(3, &st));

    let w1 = World::new(3, st.clone()).unwrap();
    let w2 = World::new(3, st).unwrap();
    assert_eq!(w1.sample(1, 2, 10, "eval").unwrap(), w2.sample(1, 2, 10, "eval").unwrap());
    assert_ne!(w1.sample(1, 2, 10, "eval").unwrap(), w1.sample(1, 2, 10, "train").unwrap());
}

#[test]
fn base_weights_have_the_declared_scale() {
    let st = HarnessSettings::default();
    let d = st.latent as f64;
    for fam in gen_families(5, &default_shapes(), &st).unwrap() {
        let (mean, std) = weight_moments(&fam);
        let wd = fam.width() as f64;
        let core = st.core_layers as f64;
        let prefix = (fam.depth - st.core_layers) as f64;
        // Per-matrix expected squared norms: prefix N(0, 0.01/wd) entries;
        // core Q M Q^T with M ~ N(0, 0.25/d) plus N(0, 0.0004/wd) jitter.
        let expected_ms = (prefix * 0.01 * wd + core * (0.25 * d + 0.0004 * wd)) / (fam.depth as f64 * wd * wd);
        let ms = std * std + mean * mean;
        assert!(mean.is_finite() && std.is_finite());
        assert!((ms / expected_ms - 1.0).abs() < 0.1, "{}: {ms} vs {expected_ms}", fam.family_id);
        assert!(mean.abs() < 0.05 * std, "{}: mean {mean}", fam.family_id);
    }
}

#[test]
fn bad_shapes_are_rejected() {
    let st = HarnessSettings::default();
    let narrow = [lorafuse::harness::FamilyShape::new("x", 6, 16)];
    assert!(gen_families(0, &narrow, &st).is_err());
    let shallow = [lorafuse::harness::FamilyShape::new("x", 2, 64)];
    assert!(gen_families(0, &shallow, &st).is_err());
}

#[test]
fn single_source_run_orders_baselines() {
    let mut world = World::new(1, HarnessSettings::default()).unwrap();
    let scenario = Preset::SingleSource.scenario("").unwrap();
    let mut cfg = fusion_config();
    cfg.train.seed = 1;
    let row = world.run(&scenario, &cfg).unwrap();
    assert!(row.joint_oracle_eval <= row.fused_eval, "{row:?}");
    assert!(row.joint_oracle_eval <= row.target_only_eval, "{row:?}");
    assert!(row.fused_eval < row.target_only_eval, "{row:?}");
    assert_eq!(world.run(&scenario, &cfg).unwrap(), row);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rows.csv");
    write_experiment_csv(&path, std::slice::from_ref(&row)).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("preset,variant,seed,n_sources,fused_eval,target_only_eval,joint_oracle_eval"));
    assert!(text.lines().nth(1).unwrap().starts_with("single-source,single,1,1,"));
}

#[test]
fn noise_only_sources_leave_the_target_nearly_unchanged() {
    let mut world = World::new(2, HarnessSettings::default()).unwrap();
    let scenario = Preset::SingleSource.scenario("").unwrap();
    let (target, _) = world.expert(0, &[scenario.target_task]).unwrap();
    let noise: Vec<_> = (0..world.settings.noise_sources)
        .map(|i| world.noise_adapter(&target, i))
        .collect();
    let data = world.task_data(&scenario).unwrap();
    let mut cfg = fusion_config();
    cfg.train.seed = 2;
    let outcome = fuse_sets(&target, &noise, &cfg, &data.model, &data.replay).unwrap();
    let eval = |set| mse(&data.model.predict(set, &data.eval.inputs).unwrap(), &data.eval.targets);
    let (fused, alone) = (eval(&outcome.fused), eval(&target));
    assert!(fused <= 1.05 * alone, "fused {fused} vs target alone {alone}");
}

#[test]
fn preset_names_round_trip() {
    for p in Preset::ALL {
        assert_eq!(p.name().parse::<Preset>().unwrap(), p);
        assert!(!p.scenarios(4).is_empty());
    }
    assert!("bogus".parse::<Preset>().is_err());
    assert!(Preset::MultiSource.scenario("three-source").is_err());
}
