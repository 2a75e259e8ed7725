use psst_core::agents::{Listener, Speaker};
use psst_core::estimators::EstimatorKind;
use psst_core::experiment::{
    evaluate, evaluate_captions, evaluate_references, joint_train, listener_gradient_audit,
    pretrain, reference_recall_vs_distractors, stream_rng, sweep, RunConfig, Stream, SweepGrid,
};
use psst_core::metrics::{read_curve, CurvePoint, NGramStats};
use psst_core::world::{generate_world, Split, SplitSizes, World, WorldConfig};

fn small_world() -> World {
    generate_world(&WorldConfig {
        split_sizes: SplitSizes {
            train: 48,
            val: 16,
            test: 16,
        },
        seed: 4,
        ..WorldConfig::default()
    })
    .unwrap()
}

fn quick() -> RunConfig {
    RunConfig {
        speaker_pretrain_epochs: 3,
        listener_pretrain_epochs: 3,
        joint_epochs: 2,
        batch_size: 16,
        hidden: 16,
        embed: 8,
        listener_hidden: 16,
        ..RunConfig::default()
    }
}

/// Curve values without the method label.
fn numbers(curve: &[CurvePoint]) -> Vec<[u64; 4]> {
    curve
        .iter()
        .map(|p| {
            [
                p.cider.to_bits(),
                p.recall1.to_bits(),
                p.recall5.to_bits(),
                p.recall10.to_bits(),
            ]
        })
        .collect()
}

#[test]
fn zero_pretrain_epochs_return_the_initialisation() {
    let world = small_world();
    let cfg = RunConfig {
        speaker_pretrain_epochs: 0,
        listener_pretrain_epochs: 0,
        seed: 17,
        ..quick()
    };
    let p = pretrain(&world, &cfg).unwrap();
    let s = Speaker::init(cfg.speaker_shape(&world), &mut stream_rng(17, Stream::SpeakerInit));
    let l = Listener::init(cfg.listener_shape(&world), &mut stream_rng(17, Stream::ListenerInit));
    assert_eq!(p.speaker.params, s.params);
    assert_eq!(p.listener.params, l.params);
    assert_eq!(p.log.len(), 1);
}

#[test]
fn default_pretraining_learns_both_agents() {
    let world = generate_world(&WorldConfig::default()).unwrap();
    let cfg = RunConfig::default();
    let p = pretrain(&world, &cfg).unwrap();
    let nll: Vec<f64> = p.log.iter().filter_map(|e| e.speaker_val_nll).collect();
    assert!(nll.last().unwrap() < &nll[0], "{nll:?}");

    let mut rng = stream_rng(99, Stream::Validation);
    let r1 = reference_recall_vs_distractors(&world, &p.listener, Split::Val, 31, &mut rng).unwrap();
    assert!(r1 > 5.0 / 32.0, "recall@1 {r1} against 31 distractors");

    // reference captions bound what the speaker's own captions achieve
    let stats = NGramStats::from_world(&world).unwrap();
    let refs = evaluate_references(&world, &stats, &p.listener, Split::Val).unwrap();
    let own = evaluate(&world, &stats, &p.speaker, &p.listener, Split::Val, cfg.beam_width).unwrap();
    assert!(refs.recall1 >= own.recall1, "{refs:?} vs {own:?}");
    assert!(refs.recall1 <= refs.recall5 && refs.recall5 <= refs.recall10);
}

#[test]
fn fully_relaxed_runs_repeat_exactly() {
    let world = small_world();
    let cfg = RunConfig {
        method: EstimatorKind::PsstMultinomial,
        rho: Some(1.0),
        ..quick()
    };
    let p = pretrain(&world, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let c = RunConfig {
            output_dir: Some(dir.path().join(name)),
            ..cfg.clone()
        };
        joint_train(&world, &c, &p.speaker, &p.listener).unwrap()
    };
    let (a, b) = (run("a"), run("b"));
    assert_eq!(a.curve, b.curve);
    assert_eq!(a.speaker.params, b.speaker.params);
    assert_eq!(
        std::fs::read(dir.path().join("a/curve.csv")).unwrap(),
        std::fs::read(dir.path().join("b/curve.csv")).unwrap()
    );
    assert_eq!(read_curve(&dir.path().join("a/curve.csv")).unwrap(), a.curve);
}

#[test]
fn rho_zero_follows_straight_through_exactly() {
    let world = small_world();
    for (psst, st) in [
        (EstimatorKind::PsstMultinomial, EstimatorKind::StMultinomial),
        (EstimatorKind::PsstGumbel, EstimatorKind::StGumbel),
    ] {
        let base = quick();
        let p = pretrain(&world, &base).unwrap();
        let a = joint_train(
            &world,
            &RunConfig {
                method: psst,
                rho: Some(0.0),
                ..base.clone()
            },
            &p.speaker,
            &p.listener,
        )
        .unwrap();
        let b = joint_train(
            &world,
            &RunConfig {
                method: st,
                rho: None,
                ..base.clone()
            },
            &p.speaker,
            &p.listener,
        )
        .unwrap();
        assert_eq!(numbers(&a.curve), numbers(&b.curve), "{psst}");
        assert_eq!(a.speaker.params, b.speaker.params, "{psst}");
        assert_eq!(a.listener.params, b.listener.params, "{psst}");
    }
}

#[test]
fn lambda_zero_sends_nothing_to_the_listener() {
    let world = small_world();
    let cfg = quick();
    let p = pretrain(&world, &cfg).unwrap();
    let at = |lambda: f64| {
        let c = RunConfig { lambda, ..cfg.clone() };
        listener_gradient_audit(&world, &c, &p.speaker, &p.listener).unwrap()
    };
    assert_eq!(at(0.0), 0.0);
    assert!(at(0.5) > 0.0);
}

#[test]
fn frozen_speaker_keeps_its_captions() {
    let world = small_world();
    // the speaker needs real captions for the listener to have anything to learn
    let cfg = RunConfig {
        speaker_pretrain_epochs: RunConfig::default().speaker_pretrain_epochs,
        listener_pretrain_epochs: 1,
        joint_epochs: 4,
        lr: 2.0,
        freeze_speaker: true,
        ..quick()
    };
    let p = pretrain(&world, &cfg).unwrap();
    let out = joint_train(&world, &cfg, &p.speaker, &p.listener).unwrap();
    assert_eq!(out.speaker.params, p.speaker.params);
    let cider: Vec<f64> = out.curve.iter().map(|c| c.cider).collect();
    assert!(cider.windows(2).all(|w| w[0] == w[1]), "{cider:?}");
    let first = &out.curve[0];
    let last = out.curve.last().unwrap();
    assert!(last.recall10 > first.recall10 || last.recall1 > first.recall1, "{:?}", out.curve);
}

#[test]
fn best_checkpoint_has_the_top_recall_at_ten() {
    let world = small_world();
    let cfg = RunConfig {
        joint_epochs: 4,
        ..quick()
    };
    let p = pretrain(&world, &cfg).unwrap();
    let out = joint_train(&world, &cfg, &p.speaker, &p.listener).unwrap();
    let best = out.manifest.best.recall10;
    assert!(out.curve.iter().all(|c| c.recall10 <= best));
    assert_eq!(out.curve[out.manifest.best_epoch].recall10, best);
    assert_eq!(out.curve.len(), 5);
}

#[test]
fn single_cell_sweep_equals_a_direct_run() {
    let world = small_world();
    let cfg = RunConfig { seed: 3, ..quick() };
    let grid = SweepGrid {
        methods: vec![cfg.method],
        lambdas: vec![cfg.lambda],
        rhos: cfg.rho.into_iter().collect(),
        seeds: vec![3],
    };
    let s = sweep(&world, &cfg, &grid).unwrap();
    let p = pretrain(&world, &cfg).unwrap();
    let direct = joint_train(&world, &cfg, &p.speaker, &p.listener).unwrap();
    assert_eq!(s.cells.len(), 1);
    assert_eq!(s.points, direct.curve);
}

#[test]
fn rho_grid_writes_every_run_epoch() {
    let world = small_world();
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        speaker_pretrain_epochs: 1,
        listener_pretrain_epochs: 1,
        joint_epochs: 1,
        output_dir: Some(dir.path().to_path_buf()),
        ..quick()
    };
    let grid = SweepGrid {
        methods: vec![EstimatorKind::PsstMultinomial],
        lambdas: vec![0.5],
        rhos: vec![0.0, 0.25, 0.5, 0.75, 1.0],
        seeds: (0..5).collect(),
    };
    let out = sweep(&world, &cfg, &grid).unwrap();
    assert_eq!(out.failures(), 0);
    let rows = read_curve(&dir.path().join("curves.csv")).unwrap();
    assert_eq!(rows.len(), 25 * 2);
}

#[test]
fn serial_and_parallel_sweeps_agree() {
    let world = small_world();
    let cfg = quick();
    let grid = SweepGrid {
        methods: vec![EstimatorKind::PsstMultinomial, EstimatorKind::Reinforce],
        lambdas: vec![0.5],
        rhos: vec![0.5],
        seeds: vec![0, 1],
    };
    let on = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| sweep(&world, &cfg, &grid).unwrap())
    };
    assert_eq!(on(1).points, on(3).points);
}

#[test]
fn single_scene_pool_is_always_found() {
    let world = small_world();
    let cfg = quick();
    let mut rng = stream_rng(0, Stream::ListenerInit);
    let l = Listener::init(cfg.listener_shape(&world), &mut rng);
    let stats = NGramStats::from_world(&world).unwrap();
    let id = world.split_ids(Split::Val)[0];
    let caption = world.references(id)[0].tokens.clone();
    let m = evaluate_captions(&world, &stats, &l, &[id], &[caption]).unwrap();
    assert_eq!(m.recall1, 1.0);
    assert_eq!(m.pool, 1);
}
