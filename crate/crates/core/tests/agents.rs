mod common;

use common::{fd_gap, flat};
use psst_autodiff::{ParamSet, Tape, Tensor};
use psst_core::agents::{
    beam_decode, score_matrix, speaker_mle_loss, speaker_rollout, token_steps, Listener,
    ListenerShape, RolloutPolicy, Speaker, SpeakerShape,
};
use psst_core::estimators::{BaselineKind, EstimatorConfig};
use psst_core::experiment::{pretrain, RunConfig};
use psst_core::metrics::disc_hinge_loss;
use psst_core::world::{generate_world, EOS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SPEAKER: SpeakerShape = SpeakerShape {
    vocab: 5,
    scene_dim: 4,
    hidden: 3,
    embed: 2,
};
const LISTENER: ListenerShape = ListenerShape {
    vocab: 5,
    scene_dim: 4,
    hidden: 3,
    embed: 2,
};

fn scenes(rows: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(vec![rows, 4], data).unwrap()
}

#[test]
fn mle_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let sp = Speaker::init(SPEAKER, &mut rng);
    let x = scenes(2, 2);
    let refs: [&[usize]; 2] = [&[3, EOS], &[4, 3]];
    let loss = |p: &ParamSet| {
        let s = Speaker::from_params(SPEAKER, p.clone()).unwrap();
        let mut tape = Tape::new();
        let sv = s.attach(&mut tape, true).unwrap();
        let xv = tape.constant(x.clone()).unwrap();
        let l = speaker_mle_loss(&mut tape, &sv, xv, &refs).unwrap();
        (tape, sv.all, l)
    };
    let (mut tape, vars, l) = loss(&sp.params);
    tape.backward(l).unwrap();
    let grad = flat(&sp.params.gradients(&tape, &vars));
    let gap = fd_gap(&sp.params, &grad, |p| {
        let (tape, _, l) = loss(p);
        tape.value(l).item()
    });
    assert!(gap < 1e-5, "gap {gap}");
}

#[test]
fn listener_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let li = Listener::init(LISTENER, &mut rng);
    let x = scenes(3, 4);
    let captions = vec![vec![3, 4], vec![2], vec![4, 4]];
    let run = |p: &ParamSet| {
        let l = Listener::from_params(LISTENER, p.clone()).unwrap();
        let mut tape = Tape::new();
        let lv = l.attach(&mut tape, true).unwrap();
        let steps = token_steps(&mut tape, &captions, LISTENER.vocab).unwrap();
        let c = lv.encode_caption(&mut tape, &steps).unwrap();
        let xv = tape.constant(x.clone()).unwrap();
        let s = lv.encode_scenes(&mut tape, xv).unwrap();
        let m = score_matrix(&mut tape, c, s).unwrap();
        // weight entries unevenly so every score contributes a distinct term
        let w = Tensor::new(vec![3, 3], (1..=9).map(|i| i as f64 / 9.0).collect()).unwrap();
        let wv = tape.constant(w).unwrap();
        let prod = tape.mul(m, wv).unwrap();
        let total = tape.sum(prod).unwrap();
        (tape, lv.all, total)
    };
    let (mut tape, vars, total) = run(&li.params);
    tape.backward(total).unwrap();
    let grad = flat(&li.params.gradients(&tape, &vars));
    let gap = fd_gap(&li.params, &grad, |p| {
        let (tape, _, t) = run(p);
        tape.value(t).item()
    });
    assert!(gap < 1e-5, "gap {gap}");
}

#[test]
fn relaxed_pipeline_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let sp = Speaker::init(SPEAKER, &mut rng);
    let li = Listener::init(LISTENER, &mut rng);
    let x = scenes(3, 6);
    let cfg = EstimatorConfig::psst_multinomial(1.0).unwrap();
    let run = |p: &ParamSet| {
        let s = Speaker::from_params(SPEAKER, p.clone()).unwrap();
        let mut tape = Tape::new();
        let sv = s.attach(&mut tape, true).unwrap();
        let lv = li.attach(&mut tape, false).unwrap();
        let xv = tape.constant(x.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cap = speaker_rollout(&mut tape, &sv, xv, RolloutPolicy::Estimator(&cfg), 3, &mut rng)
            .unwrap();
        let c = lv.encode_caption(&mut tape, &cap.listener_steps()).unwrap();
        let s = lv.encode_scenes(&mut tape, xv).unwrap();
        let m = score_matrix(&mut tape, c, s).unwrap();
        let loss = disc_hinge_loss(&mut tape, m).unwrap();
        (tape, sv.all, loss)
    };
    let (mut tape, vars, loss) = run(&sp.params);
    assert!(tape.value(loss).item() > 0.0, "hinge inactive, test would be vacuous");
    tape.backward(loss).unwrap();
    let grad = flat(&sp.params.gradients(&tape, &vars));
    assert!(grad.iter().any(|g| g.abs() > 1e-6));
    let gap = fd_gap(&sp.params, &grad, |p| {
        let (tape, _, l) = run(p);
        tape.value(l).item()
    });
    assert!(gap < 1e-4, "gap {gap}");
}

#[test]
fn rollout_distributions_are_normalised() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let sp = Speaker::init(SPEAKER, &mut rng);
    let configs = [
        EstimatorConfig::reinforce(BaselineKind::None),
        EstimatorConfig::st_multinomial(),
        EstimatorConfig::psst_gumbel(0.5, 1.0).unwrap(),
    ];
    let mut checked = 0;
    for (i, cfg) in configs.iter().cycle().take(100).enumerate() {
        let mut tape = Tape::new();
        let sv = sp.attach(&mut tape, false).unwrap();
        let xv = tape.constant(scenes(10, i as u64)).unwrap();
        let cap =
            speaker_rollout(&mut tape, &sv, xv, RolloutPolicy::Estimator(cfg), 6, &mut rng).unwrap();
        for step in &cap.steps {
            let probs = tape.value(step.probs);
            for r in 0..probs.rows() {
                assert!((probs.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        checked += 10;
    }
    assert_eq!(checked, 1000);
}

/// Every sequence the decoder can return for V=3, max_len=2: a lone EOS, or
/// a non-EOS token followed by anything.
fn enumerate_sequences() -> Vec<Vec<usize>> {
    let mut out = vec![vec![EOS]];
    for a in 0..3 {
        if a == EOS {
            continue;
        }
        for b in 0..3 {
            out.push(vec![a, b]);
        }
    }
    out
}

fn sequence_log_prob(sp: &Speaker, x: &Tensor, seq: &[usize]) -> f64 {
    let mut tape = Tape::new();
    let sv = sp.attach(&mut tape, false).unwrap();
    let xv = tape.constant(x.clone()).unwrap();
    let l = speaker_mle_loss(&mut tape, &sv, xv, &[seq]).unwrap();
    -tape.value(l).item() * seq.len() as f64
}

#[test]
fn full_width_beam_finds_the_enumerated_argmax() {
    let shape = SpeakerShape {
        vocab: 3,
        ..SPEAKER
    };
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sp = Speaker::init(shape, &mut rng);
        // sharpen the output layer so sequence scores are well separated
        let flat: Vec<f64> = sp.params.flatten().iter().map(|v| v * 4.0).collect();
        sp.params.assign_flat(&flat).unwrap();
        let x = scenes(1, seed);
        let best = enumerate_sequences()
            .into_iter()
            .map(|s| (sequence_log_prob(&sp, &x, &s), s))
            .max_by(|a, b| a.0.total_cmp(&b.0))
            .unwrap()
            .1;
        assert_eq!(beam_decode(&sp, &x, 9, 2).unwrap(), best, "seed {seed}");
        assert_eq!(beam_decode(&sp, &x, 9, 2).unwrap(), best);
    }
}

#[test]
fn width_one_beam_is_greedy() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let sp = Speaker::init(SPEAKER, &mut rng);
    for seed in 0..10 {
        let x = scenes(1, seed);
        let mut tape = Tape::new();
        let sv = sp.attach(&mut tape, false).unwrap();
        let xv = tape.constant(x.clone()).unwrap();
        let cap = speaker_rollout(&mut tape, &sv, xv, RolloutPolicy::Greedy, 6, &mut rng).unwrap();
        assert_eq!(beam_decode(&sp, &x, 1, 6).unwrap(), cap.tokens[0]);
    }
}

#[test]
fn checkpoints_reproduce_forward_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let sp = Speaker::init(SPEAKER, &mut rng);
    let li = Listener::init(LISTENER, &mut rng);
    sp.save(&dir.path().join("s.ckpt")).unwrap();
    li.save(&dir.path().join("nested/l.ckpt")).unwrap();
    let sp2 = Speaker::load(&dir.path().join("s.ckpt")).unwrap();
    let li2 = Listener::load(&dir.path().join("nested/l.ckpt")).unwrap();
    assert_eq!(sp2.shape, SPEAKER);
    assert_eq!(li2.shape, LISTENER);

    let x = scenes(4, 1);
    let scores = |l: &Listener| {
        let mut tape = Tape::new();
        let lv = l.attach(&mut tape, false).unwrap();
        let steps = token_steps(&mut tape, &[vec![3, 4, EOS], vec![4], vec![3], vec![2]], 5).unwrap();
        let c = lv.encode_caption(&mut tape, &steps).unwrap();
        let xv = tape.constant(x.clone()).unwrap();
        let s = lv.encode_scenes(&mut tape, xv).unwrap();
        let m = score_matrix(&mut tape, c, s).unwrap();
        tape.value(m).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(scores(&li), scores(&li2));
    let nll = |s: &Speaker| sequence_log_prob(s, &scenes(1, 3), &[3, 4, EOS]).to_bits();
    assert_eq!(nll(&sp), nll(&sp2));
    assert!(Listener::load(&dir.path().join("s.ckpt")).is_err());
}

#[test]
fn pretraining_nll_falls_over_twenty_epochs() {
    let world = generate_world(&Default::default()).unwrap();
    let cfg = RunConfig {
        speaker_pretrain_epochs: 20,
        listener_pretrain_epochs: 0,
        ..RunConfig::default()
    };
    let p = pretrain(&world, &cfg).unwrap();
    let nll: Vec<f64> = p.log.iter().filter_map(|e| e.speaker_val_nll).collect();
    assert!(nll.len() >= 20, "{nll:?}");
    let smoothed: Vec<f64> = nll.windows(3).map(|w| w.iter().sum::<f64>() / 3.0).collect();
    for w in smoothed.windows(2) {
        assert!(w[1] <= w[0], "smoothed NLL rose: {smoothed:?}");
    }
    assert!(nll.last().unwrap() < nll.first().unwrap());
}
